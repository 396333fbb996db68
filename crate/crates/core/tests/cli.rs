use std::path::{Path, PathBuf};

use hemiseg::cli::{resolve_config, run};
use hemiseg::data::{derive_regions, read_labels, read_manifest, read_volume};
use hemiseg::network::{load_checkpoint, segment};

const SMALL: &[&str] = &[
    "--set",
    "phantom.params.extents=[16,64,64]",
    "--set",
    "train.epochs=1",
    "--set",
    "train.learning_rate=1e-3",
    "--set",
    "train.ensemble_size=2",
    "--set",
    "analysis.resamples=1000",
    "--set",
    "seed=3",
];

fn hs(args: &[&str]) -> i32 {
    // shared defaults first so a test's own overrides win
    let mut all = vec!["hemiseg", args[0]];
    all.extend_from_slice(SMALL);
    all.extend_from_slice(&args[1..]);
    run(all)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn phantoms(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    assert_eq!(hs(&["phantom", "-o", p(&out), "--set", "phantom.count=4"]), 0);
    out
}

#[test]
fn phantom_set_is_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = phantoms(dir.path());
    let b = dir.path().join("again");
    assert_eq!(hs(&["phantom", "-o", p(&b), "--set", "phantom.count=4"]), 0);

    let entries = read_manifest(a.join("manifest.csv")).unwrap();
    assert_eq!(entries.len(), 4);
    let count = |suffix: &str| {
        std::fs::read_dir(&a)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_str().unwrap().ends_with(suffix))
            .count()
    };
    assert_eq!((count("_t2.nii"), count("_labels.nii")), (4, 4));
    for e in &entries {
        let v = read_volume(&e.volume_path).unwrap();
        let l = read_labels(&e.labels_path).unwrap();
        assert_eq!(v.extents(), l.extents());
        derive_regions(&l.brain_mask(), &l.class_mask(2)).unwrap();
        for f in [&e.volume_path, &e.labels_path] {
            let name = f.file_name().unwrap();
            assert_eq!(std::fs::read(f).unwrap(), std::fs::read(b.join(name)).unwrap());
        }
    }
    let cfg = std::fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(cfg.contains("count = 4"));
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(run(["hemiseg"]), 1);
    assert_eq!(run(["hemiseg", "frobnicate"]), 1);
    assert_eq!(run(["hemiseg", "train", "-o", p(&out)]), 1);
    assert_eq!(run(["hemiseg", "phantom", "-o", p(&out), "--set", "nope=1"]), 1);
    assert_eq!(run(["hemiseg", "phantom", "-o", p(&out), "--set", "noequals"]), 1);
    assert_eq!(run(["hemiseg", "phantom", "-o", p(&out), "--config", "/nonexistent.toml"]), 1);
    assert_eq!(run(["hemiseg", "--help"]), 0);

    let missing = dir.path().join("missing.csv");
    assert_eq!(hs(&["gridsearch", "-o", p(&out), "--manifest", p(&missing)]), 2);
    assert_eq!(hs(&["phantom", "-o", p(&out), "--set", "network.filter_rate=0.0"]), 0);
    let data = phantoms(dir.path());
    let manifest = data.join("manifest.csv");
    assert_eq!(hs(&["train", "-o", p(&out), "--manifest", p(&manifest), "--set", "network.filter_rate=0.0"]), 2);
    assert_eq!(hs(&["train", "-o", p(&out), "--manifest", p(&manifest), "--set", "split.train_per_group=9"]), 2);
}

#[test]
fn divergence_exits_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantoms(dir.path());
    let out = dir.path().join("diverge");
    let code = hs(&[
        "train",
        "-o",
        p(&out),
        "--manifest",
        p(&data.join("manifest.csv")),
        "--set",
        "train.learning_rate=1e300",
        "--set",
        "train.epochs=3",
        "--set",
        "train.ensemble_size=1",
    ]);
    assert_eq!(code, 3);
}

#[test]
fn config_file_and_overrides_resolve() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "seed = 9\n[train]\nepochs = 7\n[network]\nfilter_rate = 0.25\n").unwrap();
    let cfg = resolve_config(Some(&path), &["train.epochs=11".into(), "analysis.alpha=0.1".into()]).unwrap();
    assert_eq!(cfg.train.epochs, 11);
    assert_eq!(cfg.network.filter_rate, 0.25);
    assert_eq!(cfg.analysis.alpha, 0.1);
    assert_eq!((cfg.train.seed, cfg.network.seed, cfg.phantom.params.seed), (9, 9, 9));
    assert!(resolve_config(None, &["train.epochs=\"many\"".into()]).is_err());
    assert!(resolve_config(None, &["train.epochs.x=1".into()]).is_err());

    // the echoed config reproduces itself
    let out = dir.path().join("o");
    assert_eq!(run(["hemiseg", "phantom", "-o", p(&out), "--config", p(&path), "--set", "phantom.count=1"]), 0);
    let echoed = out.join("config.toml");
    let again = resolve_config(Some(&echoed), &[]).unwrap();
    let mut expected = resolve_config(Some(&path), &["phantom.count=1".into()]).unwrap();
    expected.seed = Some(9);
    assert_eq!(again, expected);
    assert_eq!(std::fs::read(out.join("config.input.toml")).unwrap(), std::fs::read(&path).unwrap());
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn pipeline_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let data = phantoms(dir.path());
    let manifest = data.join("manifest.csv");
    let model = dir.path().join("model");
    assert_eq!(hs(&["train", "-o", p(&model), "--manifest", p(&manifest)]), 0);
    for k in 0..2 {
        assert!(model.join(format!("member_{k}.ckpt")).exists());
        assert_eq!(csv_rows(&model.join(format!("history_{k}.csv"))).len(), 1);
    }
    assert!(!model.join("member_2.ckpt").exists());
    let summary = csv_rows(&model.join("train_summary.csv"));
    assert_eq!(summary.len(), 2);

    let wide = dir.path().join("wide");
    assert_eq!(
        hs(&["train", "-o", p(&wide), "--manifest", p(&manifest), "--set", "network.filter_rate=0.25", "--set", "train.ensemble_size=1"]),
        0
    );
    assert!(csv_rows(&wide.join("train_summary.csv"))[0][2].parse::<usize>().unwrap() > summary[0][2].parse::<usize>().unwrap());

    // single checkpoint equals segment() on the same volume
    let ck0 = model.join("member_0.ckpt");
    let pred = dir.path().join("pred1");
    assert_eq!(hs(&["segment", "-o", p(&pred), "--manifest", p(&manifest), "--checkpoint", p(&ck0)]), 0);
    let preds = read_manifest(pred.join("predictions.csv")).unwrap();
    assert_eq!(preds.len(), 4);
    let m = load_checkpoint(&ck0).unwrap();
    let v = read_volume(&preds[0].volume_path).unwrap();
    assert_eq!(read_labels(&preds[0].labels_path).unwrap().labels(), segment(&m, &v).unwrap().labels());

    let ens = |name: &str| {
        let out = dir.path().join(name);
        let ck1 = model.join("member_1.ckpt");
        assert_eq!(hs(&["segment", "-o", p(&out), "--manifest", p(&manifest), "--checkpoint", p(&ck0), "--checkpoint", p(&ck1)]), 0);
        out
    };
    let (e1, e2) = (ens("ens1"), ens("ens2"));
    for k in 0..4 {
        let f = format!("phantom_{k:03}_pred.nii");
        assert_eq!(std::fs::read(e1.join(&f)).unwrap(), std::fs::read(e2.join(&f)).unwrap());
    }

    // predictions against themselves
    let selfeval = dir.path().join("self");
    assert_eq!(hs(&["evaluate", "-o", p(&selfeval), "--pred", p(&manifest), "--gt", p(&manifest)]), 0);
    for r in csv_rows(&selfeval.join("metrics.csv")) {
        if &r[0] != "std" {
            assert_eq!((&r[2], &r[3]), ("1.0", "0.0"), "{r:?}");
        }
    }

    let preds_csv = e1.join("predictions.csv");
    let midline = dir.path().join("midline");
    assert_eq!(hs(&["midline", "-o", p(&midline), "--pred", p(&preds_csv), "--gt", p(&manifest)]), 0);
    assert_eq!(csv_rows(&midline.join("midline.csv")).len(), 10);

    let grid = dir.path().join("grid");
    assert_eq!(hs(&["gridsearch", "-o", p(&grid), "--manifest", p(&manifest)]), 0);
    assert_eq!(csv_rows(&grid.join("gridsearch.csv")).len(), 1089);

    // id mismatch
    let partial = dir.path().join("partial.csv");
    let text = std::fs::read_to_string(&preds_csv).unwrap();
    let kept: Vec<&str> = text.lines().take(3).collect();
    std::fs::write(&partial, kept.join("\n") + "\n").unwrap();
    std::fs::copy(e1.join("phantom_000_pred.nii"), dir.path().join("phantom_000_pred.nii")).unwrap();
    std::fs::copy(e1.join("phantom_001_pred.nii"), dir.path().join("phantom_001_pred.nii")).unwrap();
    let bad = dir.path().join("bad");
    assert_eq!(hs(&["evaluate", "-o", p(&bad), "--pred", p(&partial), "--gt", p(&manifest)]), 2);
}

#[test]
fn segment_reports_required_padding() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("odd");
    assert_eq!(
        hs(&["phantom", "-o", p(&data), "--set", "phantom.count=2", "--set", "phantom.params.extents=[16,64,56]"]),
        0
    );
    let ck = dir.path().join("m.ckpt");
    hemiseg::network::save_checkpoint(&hemiseg::network::Model::new(&Default::default()).unwrap(), &ck).unwrap();
    let out = dir.path().join("seg");
    assert_eq!(hs(&["segment", "-o", p(&out), "--manifest", p(&data.join("manifest.csv")), "--checkpoint", p(&ck)]), 2);
}
