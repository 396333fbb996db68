//! Command-line front end. `run` is the whole program minus process exit,
//! so it can be driven from tests.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    gridsearch, hemispheric_ratio, midline_dice, write_biomarker_report, write_gridsearch_report,
    write_midline_report, BiomarkerResult, EffectSize, MidlineRow,
};
use crate::data::{
    generate_phantom, read_labels, read_manifest, read_volume, split_dataset, write_labels, write_manifest,
    write_volume, ManifestEntry, PhantomParams,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_volume, write_metric_report};
use crate::network::{count_parameters, ensemble_predict, load_checkpoint, save_checkpoint, segment, NetworkConfig};
use crate::train::{train_ensemble, write_history, TrainConfig, TrainSample};
use crate::volume::{LabelVolume, VolumeGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSetConfig {
    pub count: usize,
    /// Group tag written to the manifest for every phantom.
    pub group: String,
    /// Phantom `k` uses `params.seed + k`.
    pub params: PhantomParams,
}

impl Default for PhantomSetConfig {
    fn default() -> Self {
        PhantomSetConfig {
            count: 4,
            group: "phantom".into(),
            params: PhantomParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_per_group: usize,
    pub val_per_group: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_per_group: 3,
            val_per_group: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Restrict metrics to these slices (axis 0); all slices when absent.
    pub slices: Option<Vec<usize>>,
    pub resamples: usize,
    pub alpha: f64,
    pub effect_size: EffectSize,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            slices: None,
            resamples: 10_000,
            alpha: 0.05,
            effect_size: EffectSize::Pooled,
            seed: 0,
        }
    }
}

/// Every knob of every subcommand; each has a default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces every section's seed.
    pub seed: Option<u64>,
    pub phantom: PhantomSetConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub analysis: AnalysisConfig,
}

#[derive(Parser, Debug)]
#[command(name = "hemiseg", version, about = "Cerebral hemisphere segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a field, e.g. `--set train.epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate seeded phantom volumes, label files and a manifest.
    Phantom {
        #[command(flatten)]
        common: Common,
    },
    /// Train the ensemble on the train/validation split of a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Segment every volume of a manifest with one or more checkpoints.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Dice / Hausdorff / precision / recall of predictions against ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Hemisphere Dice inside midline bands of width n = 1..=10.
    Midline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Effect size and bootstrap interval of the hemispheric volume ratio.
    Biomarker {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Tune the percentile-threshold baseline over its 99 x 11 grid.
    Gridsearch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Phantom { common }
            | Command::Train { common, .. }
            | Command::Segment { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Midline { common, .. }
            | Command::Biomarker { common, .. }
            | Command::Gridsearch { common, .. } => common,
        }
    }
}

/// Problems with the invocation itself (exit code 1).
#[derive(Debug)]
struct UsageError(String);

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> std::result::Result<(), UsageError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got `{spec}`")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(UsageError(format!("bad key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| UsageError(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads the config file (if any), applies `--set` overrides in order and
/// deserializes with defaults for everything unspecified.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> std::result::Result<RunConfig, String> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o).map_err(|UsageError(m)| m)?;
    }
    let mut cfg = toml::Value::Table(table)
        .try_into::<RunConfig>()
        .map_err(|e| format!("configuration: {e}"))?;
    if let Some(seed) = cfg.seed {
        cfg.phantom.params.seed = seed;
        cfg.network.seed = seed;
        cfg.train.seed = seed;
        cfg.split.seed = seed;
        cfg.analysis.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::Data(format!("serializing config: {e}")))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Runs the program; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let common = cli.command.common().clone();
    let cfg = match resolve_config(common.config.as_deref(), &common.overrides) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    match execute(&cli.command, &cfg, &common) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cmd: &Command, cfg: &RunConfig, common: &Common) -> Result<()> {
    let out = common.out.as_path();
    echo_config(cfg, out)?;
    if let Some(src) = &common.config {
        let dst = out.join("config.input.toml");
        std::fs::copy(src, &dst).map_err(|e| Error::io(dst, e))?;
    }
    match cmd {
        Command::Phantom { .. } => cmd_phantom(cfg, out),
        Command::Train { manifest, .. } => cmd_train(cfg, manifest, out),
        Command::Segment { manifest, checkpoints, .. } => cmd_segment(manifest, checkpoints, out),
        Command::Evaluate { pred, gt, .. } => cmd_evaluate(cfg, pred, gt, out),
        Command::Midline { pred, gt, .. } => cmd_midline(cfg, pred, gt, out),
        Command::Biomarker { pred, gt, .. } => cmd_biomarker(cfg, pred, gt, out),
        Command::Gridsearch { manifest, .. } => cmd_gridsearch(manifest, out),
    }
}

pub fn cmd_phantom(cfg: &RunConfig, out: &Path) -> Result<()> {
    let set = &cfg.phantom;
    let mut entries = Vec::with_capacity(set.count);
    for k in 0..set.count {
        let params = PhantomParams {
            seed: set.params.seed.wrapping_add(k as u64),
            ..set.params.clone()
        };
        let ph = generate_phantom(&params)?;
        let id = format!("phantom_{k:03}");
        let (vol, lab) = (format!("{id}_t2.nii"), format!("{id}_labels.nii"));
        write_volume(&ph.volume, out.join(&vol))?;
        write_labels(&ph.labels, out.join(&lab))?;
        entries.push(ManifestEntry {
            id,
            group: set.group.clone(),
            volume_path: vol.into(),
            labels_path: lab.into(),
        });
    }
    write_manifest(&entries, out.join("manifest.csv"))?;
    info!("wrote {} phantoms to {}", set.count, out.display());
    Ok(())
}

fn load_pair(e: &ManifestEntry) -> Result<(VolumeGrid, LabelVolume)> {
    let volume = read_volume(&e.volume_path)?;
    let labels = read_labels(&e.labels_path)?;
    if volume.extents() != labels.extents() {
        return Err(Error::Data(format!(
            "`{}`: volume extents {:?} differ from label extents {:?}",
            e.id,
            volume.extents(),
            labels.extents()
        )));
    }
    Ok((volume, labels))
}

fn samples(entries: &[ManifestEntry]) -> Result<Vec<TrainSample>> {
    entries
        .iter()
        .map(|e| {
            let (v, l) = load_pair(e)?;
            TrainSample::new(e.id.clone(), &v, l)
        })
        .collect()
}

#[derive(Serialize)]
struct MemberSummary {
    member: usize,
    network_seed: u64,
    parameters: usize,
    selected_epoch: usize,
    final_train_loss: f64,
}

pub fn cmd_train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    let entries = read_manifest(manifest)?;
    let s = &cfg.split;
    let split = split_dataset(&entries, |e| e.group.as_str(), s.train_per_group, s.val_per_group, s.seed)?;
    info!(
        "split: {} train, {} validation, {} test (unused)",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let parameters = count_parameters(&cfg.network)?;
    info!("filter_rate {}: {parameters} trainable parameters", cfg.network.filter_rate);
    let train_set = samples(&split.train)?;
    let val_set = samples(&split.val)?;
    let outcomes = train_ensemble(&cfg.network, &train_set, &val_set, &cfg.train)?;
    let path = out.join("train_summary.csv");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for (k, o) in outcomes.iter().enumerate() {
        save_checkpoint(&o.model, out.join(format!("member_{k}.ckpt")))?;
        write_history(&o.history, out.join(format!("history_{k}.csv")))?;
        w.serialize(MemberSummary {
            member: k,
            network_seed: o.model.config().seed,
            parameters,
            selected_epoch: o.selected_epoch,
            final_train_loss: o.history.last().map_or(f64::NAN, |r| r.train_loss),
        })?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn cmd_segment(manifest: &Path, checkpoints: &[PathBuf], out: &Path) -> Result<()> {
    let models = checkpoints.iter().map(load_checkpoint).collect::<Result<Vec<_>>>()?;
    let entries = read_manifest(manifest)?;
    create_dir(out)?;
    let out_abs = std::fs::canonicalize(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::with_capacity(entries.len());
    for e in &entries {
        let volume = read_volume(&e.volume_path)?;
        let labels = if models.len() == 1 {
            segment(&models[0], &volume)?
        } else {
            ensemble_predict(&models, &volume)?
        };
        let name = format!("{}_pred.nii", e.id);
        write_labels(&labels, out.join(&name))?;
        written.push(ManifestEntry {
            id: e.id.clone(),
            group: e.group.clone(),
            volume_path: relative_to(&e.volume_path, &out_abs)?,
            labels_path: name.into(),
        });
        info!("segmented `{}`", e.id);
    }
    write_manifest(&written, out.join("predictions.csv"))
}

/// `path` as seen from `dir`, so manifests stay valid wherever the run tree is moved.
fn relative_to(path: &Path, dir: &Path) -> Result<PathBuf> {
    let abs = std::fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
    Ok(pathdiff::diff_paths(&abs, dir).unwrap_or(abs))
}

/// Pairs prediction and ground-truth label files by id.
fn aligned(pred: &Path, gt: &Path) -> Result<Vec<(String, LabelVolume, LabelVolume)>> {
    let p = read_manifest(pred)?;
    let g = read_manifest(gt)?;
    let pi: BTreeMap<&str, &ManifestEntry> = p.iter().map(|e| (e.id.as_str(), e)).collect();
    let gi: BTreeMap<&str, &ManifestEntry> = g.iter().map(|e| (e.id.as_str(), e)).collect();
    let pk: BTreeSet<&str> = pi.keys().copied().collect();
    let gk: BTreeSet<&str> = gi.keys().copied().collect();
    let unmatched: Vec<&str> = pk.symmetric_difference(&gk).copied().collect();
    if !unmatched.is_empty() {
        return Err(Error::Data(format!("ids without a counterpart: {}", unmatched.join(", "))));
    }
    gi.iter()
        .map(|(id, ge)| {
            let gt = read_labels(&ge.labels_path)?;
            let pr = read_labels(&pi[id].labels_path)?;
            Ok((id.to_string(), pr, gt))
        })
        .collect()
}

pub fn cmd_evaluate(cfg: &RunConfig, pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let slices = cfg.analysis.slices.as_deref();
    let mut rows = Vec::new();
    for (id, p, g) in aligned(pred, gt)? {
        for r in evaluate_volume(&p, &g, slices)? {
            if r.hd_mm.is_none() {
                warn!("`{id}`: {} mask empty; Hausdorff distance left blank", r.region.name());
            }
            rows.push((id.clone(), r));
        }
    }
    write_metric_report(&rows, out.join("metrics.csv"))
}

fn mean_sd(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.len() > 1).then(|| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (m, sd)
}

pub fn cmd_midline(cfg: &RunConfig, pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let pairs = aligned(pred, gt)?;
    let slices = cfg.analysis.slices.as_deref();
    let mut rows = Vec::with_capacity(10);
    for n in 1..=10 {
        let (mut ipsi, mut contra) = (Vec::new(), Vec::new());
        for (_, p, g) in &pairs {
            let (a, b) = midline_dice(p, g, n, slices)?;
            ipsi.push(a);
            contra.push(b);
        }
        let (mi, si) = mean_sd(&ipsi);
        let (mc, sc) = mean_sd(&contra);
        rows.push(MidlineRow {
            n,
            dice_ipsi: mi,
            dice_contra: mc,
            dice_ipsi_sd: si,
            dice_contra_sd: sc,
        });
    }
    write_midline_report(&rows, out.join("midline.csv"))
}

pub fn cmd_biomarker(cfg: &RunConfig, pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let pairs = aligned(pred, gt)?;
    let mut gt_r = Vec::with_capacity(pairs.len());
    let mut pred_r = Vec::with_capacity(pairs.len());
    for (_, p, g) in &pairs {
        gt_r.push(hemispheric_ratio(g)?);
        pred_r.push(hemispheric_ratio(p)?);
    }
    let a = &cfg.analysis;
    let result = BiomarkerResult::compute(gt_r, pred_r, a.effect_size, a.resamples, a.alpha, a.seed)?;
    if result.interval.degenerate {
        warn!("bootstrap distribution degenerate; interval collapsed to d");
    }
    info!(
        "d = {:.4}, {}% CI [{:.4}, {:.4}]",
        result.cohens_d,
        100.0 * (1.0 - a.alpha),
        result.interval.low,
        result.interval.high
    );
    write_biomarker_report(&result, out.join("biomarker.csv"))
}

pub fn cmd_gridsearch(manifest: &Path, out: &Path) -> Result<()> {
    let entries = read_manifest(manifest)?;
    let data = entries.iter().map(load_pair).collect::<Result<Vec<_>>>()?;
    let result = gridsearch(&data)?;
    info!(
        "best percentile index {} with {} closing iterations: mean Dice {:.4}",
        result.best_percentile_index, result.best_alpha, result.best_mean_dice
    );
    write_gridsearch_report(&result, out.join("gridsearch.csv"))
}
