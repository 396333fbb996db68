mod common;

use common::{network_grad_check, random_tensor, rng};
use hemiseg::data::{generate_phantom, PhantomParams};
use hemiseg::network::{
    argmax_labels, aspp_forward, attention_block, count_parameters, encoder_forward, ensemble_predict, ensemble_vote,
    forward, load_checkpoint, save_checkpoint, segment, Model, NetworkConfig,
};
use hemiseg::tensor::{BatchNormMode, Tensor};
use hemiseg::volume::{LabelVolume, VolumeGrid};
use rand::Rng;

fn small_model(seed: u64) -> Model {
    Model::new(&NetworkConfig {
        seed,
        ..NetworkConfig::default()
    })
    .unwrap()
}

fn phantom(seed: u64) -> VolumeGrid {
    generate_phantom(&PhantomParams {
        seed,
        ..PhantomParams::default()
    })
    .unwrap()
    .volume
}

fn probs(values: &[[f64; 3]]) -> Tensor {
    let s = values.len();
    let mut data = vec![0.0; 3 * s];
    for (i, v) in values.iter().enumerate() {
        for c in 0..3 {
            data[c * s + i] = v[c];
        }
    }
    Tensor::new(vec![1, 3, 1, 1, s], data).unwrap()
}

#[test]
fn forward_shapes_and_distributions() {
    let model = small_model(1);
    let x = random_tensor(&mut rng(1), &[1, 1, 16, 32, 16]);
    let out = forward(&model, &x).unwrap();
    assert_eq!(out.main_probs.shape(), &[1, 3, 16, 32, 16]);
    assert_eq!(out.aux_probs.len(), 2);
    assert_eq!(out.aux_probs[0].shape(), &[1, 3, 2, 4, 2]);
    assert_eq!(out.aux_probs[1].shape(), &[1, 3, 4, 8, 4]);
    for t in std::iter::once(&out.main_probs).chain(&out.aux_probs) {
        let s = t.numel() / 3;
        for i in 0..s {
            let sum: f64 = (0..3).map(|c| t.data()[c * s + i]).sum();
            assert!((sum - 1.0).abs() <= 1e-12, "probabilities sum to {sum}");
        }
    }
    assert_eq!(out.attention_maps.len(), 3);
    for m in &out.attention_maps {
        assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn encoder_strides() {
    let model = small_model(2);
    let x = random_tensor(&mut rng(2), &[1, 1, 32, 32, 32]);
    let enc = encoder_forward(&model, &x).unwrap();
    assert_eq!(&enc.deep.shape()[2..], &[2, 2, 2]);
    let spatial: Vec<&[usize]> = enc.skips.iter().map(|s| &s.shape()[2..]).collect();
    assert_eq!(spatial, vec![&[4, 4, 4][..], &[8, 8, 8], &[16, 16, 16]]);
    assert!(enc.deep.is_finite() && enc.skips.iter().all(Tensor::is_finite));
}

#[test]
fn indivisible_extents_ask_for_padding() {
    let model = small_model(0);
    let x = Tensor::zeros(&[1, 1, 16, 20, 16]).unwrap();
    let msg = forward(&model, &x).unwrap_err().to_string();
    assert!(msg.contains("pad") && msg.contains("32"), "{msg}");
}

#[test]
fn initialization_is_seed_deterministic() {
    let (a, b, c) = (small_model(5), small_model(5), small_model(6));
    assert_eq!(a.params(), b.params());
    assert!(a.params().iter().zip(c.params()).any(|(p, q)| p.value != q.value));
    assert_eq!(a.num_parameters(), count_parameters(a.config()).unwrap());
}

#[test]
fn parameter_count_scales_quadratically() {
    let count = |r: f64| {
        count_parameters(&NetworkConfig {
            filter_rate: r,
            ..NetworkConfig::default()
        })
        .unwrap()
    };
    let counts: Vec<usize> = [0.125, 0.25, 0.5, 0.75, 1.0].iter().map(|&r| count(r)).collect();
    assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    let ratio = counts[2] as f64 / counts[4] as f64;
    assert!((0.22..=0.30).contains(&ratio), "ratio {ratio}");
    assert!(count_parameters(&NetworkConfig {
        filter_rate: 0.001,
        ..NetworkConfig::default()
    })
    .is_err());
}

#[test]
fn aspp_with_zero_weights_outputs_zero() {
    let mut model = small_model(3);
    let rates = model.config().aspp_dilation_rates.len();
    let branches: std::collections::BTreeSet<String> = model
        .params()
        .iter()
        .filter_map(|p| p.name.strip_prefix("aspp."))
        .map(|n| n.split('.').next().unwrap().to_string())
        .filter(|n| n != "project")
        .collect();
    assert_eq!(branches.len(), rates + 2, "{branches:?}");

    for p in model.params_mut() {
        if p.name.starts_with("aspp.") && (p.name.ends_with(".w") || p.name.ends_with(".b")) {
            p.value.data_mut().fill(0.0);
        }
    }
    let c4 = model.plan().stages[3];
    let deep = random_tensor(&mut rng(3), &[1, c4, 2, 2, 2]);
    let out = aspp_forward(&model, &deep).unwrap();
    assert_eq!(&out.shape()[2..], &[2, 2, 2]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_with_zero_weights_halves_features() {
    let mut model = small_model(4);
    for p in model.params_mut() {
        if p.name.starts_with("dec1.att.") {
            p.value.data_mut().fill(0.0);
        }
    }
    let c = model.plan().stages[2];
    let features = random_tensor(&mut rng(4), &[1, c, 2, 4, 2]);
    let out = attention_block(&model, 0, &features, true).unwrap();
    assert!(out.map.data().iter().all(|&v| v == 0.5));
    for (a, f) in out.attended.data().iter().zip(features.data()) {
        assert_eq!(*a, 0.5 * f);
    }
    let aux = out.aux_logits.unwrap();
    assert_eq!(aux.shape(), &[1, 3, 2, 4, 2]);

    let trained = small_model(4);
    let out = attention_block(&trained, 0, &features, false).unwrap();
    assert!(out.aux_logits.is_none());
    assert!(out.map.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(attention_block(&trained, 2, &features, true).is_err());
}

#[test]
fn argmax_examples() {
    let labels = argmax_labels(&probs(&[[0.2, 0.5, 0.3], [1.0 / 3.0; 3], [0.1, 0.45, 0.45], [0.2, 0.2, 0.6]])).unwrap();
    assert_eq!(labels, vec![1, 0, 1, 2]);
}

#[test]
fn ensemble_vote_examples() {
    // votes (1, 1, 2)
    let a = probs(&[[0.1, 0.6, 0.3]]);
    let b = probs(&[[0.2, 0.5, 0.3]]);
    let c = probs(&[[0.0, 0.1, 0.9]]);
    assert_eq!(ensemble_vote(&[a, b, c.clone()]).unwrap(), vec![1]);

    // votes (0, 1, 2), mean softmax (0.2, 0.3, 0.5) -> 2
    let a = probs(&[[0.5, 0.3, 0.2]]);
    let b = probs(&[[0.1, 0.5, 0.4]]);
    assert_eq!(ensemble_vote(&[a.clone(), b.clone(), c.clone()]).unwrap(), vec![2]);
    // mean (0.4, 0.3, 0.3) -> 0
    let a2 = probs(&[[0.9, 0.05, 0.05]]);
    let b2 = probs(&[[0.31, 0.34, 0.35]]);
    let c2 = probs(&[[0.0, 0.51, 0.49]]);
    let got = ensemble_vote(&[a2, b2, c2]).unwrap();
    assert_eq!(got, vec![0]);

    assert!(ensemble_vote(&[a]).is_err());
}

#[test]
fn ensemble_of_identical_models_equals_single_model() {
    let m = small_model(7);
    let v = phantom(11);
    let single = segment(&m, &v).unwrap();
    let ens = ensemble_predict(&[m.clone(), m.clone(), m], &v).unwrap();
    assert_eq!(single, ens);
}

#[test]
fn ensemble_is_permutation_invariant() {
    let models = [small_model(20), small_model(21), small_model(22)];
    let v = phantom(12);
    let base = ensemble_predict(&models, &v).unwrap();
    for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let m: Vec<Model> = perm.iter().map(|&i| models[i].clone()).collect();
        assert_eq!(ensemble_predict(&m, &v).unwrap(), base);
    }
    assert!(ensemble_predict(&models[..1], &v).is_err());
}

#[test]
fn segmentation_ignores_intensity_scale() {
    let m = small_model(8);
    let v = phantom(13);
    let base = segment(&m, &v).unwrap();
    assert_eq!(base.extents(), v.extents());
    for c in [2.0, 3.7, 1e-3] {
        let scaled = v.with_values(v.values().iter().map(|x| x * c).collect()).unwrap();
        let out = segment(&m, &scaled).unwrap();
        let diff = out.labels().iter().zip(base.labels()).filter(|(a, b)| a != b).count();
        assert_eq!(diff, 0, "scale {c}: {diff} voxels changed");
    }
}

#[test]
fn forward_is_deterministic() {
    let m = small_model(9);
    let x = random_tensor(&mut rng(9), &[1, 1, 16, 16, 16]);
    let a = forward(&m, &x).unwrap();
    let b = forward(&m, &x).unwrap();
    assert_eq!(a.main_probs, b.main_probs);
    assert_eq!(a.aux_probs, b.aux_probs);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut m = small_model(10);
    // give the running statistics non-default values
    for (k, n) in m.norms_mut().iter_mut().enumerate() {
        n.state.running_mean.iter_mut().for_each(|v| *v = 0.01 * k as f64);
        n.state.running_var.iter_mut().for_each(|v| *v = 1.0 + 0.02 * k as f64);
    }
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.params(), m.params());
    assert_eq!(back.norms(), m.norms());
    let x = random_tensor(&mut rng(10), &[1, 1, 16, 16, 16]);
    assert_eq!(forward(&back, &x).unwrap().main_probs, forward(&m, &x).unwrap().main_probs);

    let bytes = std::fs::read(&path).unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes[..bytes.len() - 5]).unwrap();
    assert!(load_checkpoint(&bad).is_err());
    let mut flipped = bytes.clone();
    flipped[0] ^= 0xff;
    std::fs::write(&bad, &flipped).unwrap();
    assert!(load_checkpoint(&bad).is_err());
    let mut extra = bytes;
    extra.push(0);
    std::fs::write(&bad, &extra).unwrap();
    assert!(load_checkpoint(&bad).is_err());
}

#[test]
fn deep_supervision_gradient_matches_finite_differences() {
    let model = small_model(11);
    let mut r = rng(11);
    let x = random_tensor(&mut r, &[1, 1, 16, 16, 16]);
    let labels = LabelVolume::new([16; 3], [1.0; 3], (0..4096).map(|_| r.random_range(0..3u8)).collect()).unwrap();
    let err = network_grad_check(&model, &x, &labels, BatchNormMode::Eval, 0.01, 1e-5, &mut r);
    assert!(err <= 1e-3, "relative error {err:e}");
}
