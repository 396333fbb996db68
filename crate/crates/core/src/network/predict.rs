use super::{forward, Model};
use crate::data::standardize;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, VolumeGrid};

fn volume_tensor(grid: &VolumeGrid) -> Result<Tensor> {
    let [d, h, w] = grid.extents();
    Tensor::new(vec![1, 1, d, h, w], grid.values().to_vec())
}

fn probs_for(model: &Model, grid: &VolumeGrid) -> Result<Tensor> {
    Ok(forward(model, &volume_tensor(grid)?)?.main_probs)
}

/// Per-voxel argmax over the class axis of a `[1, C, ...]` tensor; exact ties
/// go to the lower class index.
pub fn argmax_labels(probs: &Tensor) -> Result<Vec<u8>> {
    let shape = probs.shape();
    if shape.len() < 2 || shape[0] != 1 {
        return Err(shape_err!("expected a single-item [1, C, ...] tensor, got {shape:?}"));
    }
    let c = shape[1];
    let s: usize = shape[2..].iter().product();
    let p = probs.data();
    Ok((0..s)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if p[k * s + i] > p[best * s + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}

fn labels_like(grid: &VolumeGrid, labels: Vec<u8>) -> Result<LabelVolume> {
    let mut out = LabelVolume::new(grid.extents(), grid.spacing(), labels)?;
    out.orientation = grid.orientation.clone();
    Ok(out)
}

/// Standardizes `grid`, runs inference and decodes the argmax.
pub fn segment(model: &Model, grid: &VolumeGrid) -> Result<LabelVolume> {
    segment_standardized(model, &standardize(grid)?)
}

/// As [`segment`] for a volume that is already standardized.
pub fn segment_standardized(model: &Model, grid: &VolumeGrid) -> Result<LabelVolume> {
    labels_like(grid, argmax_labels(&probs_for(model, grid)?)?)
}

/// Combines per-model `[1, C, ...]` probabilities: a class chosen by more
/// than half of the models wins; otherwise the argmax of the mean softmax.
/// The mean sums each voxel's values in sorted order, so the result does not
/// depend on the order of `probs`.
pub fn ensemble_vote(probs: &[Tensor]) -> Result<Vec<u8>> {
    if probs.len() < 2 {
        return Err(invalid!("an ensemble needs at least 2 models, got {}", probs.len()));
    }
    let shape = probs[0].shape();
    if let Some(p) = probs.iter().find(|p| p.shape() != shape) {
        return Err(shape_err!("ensemble outputs differ in shape: {shape:?} vs {:?}", p.shape()));
    }
    let votes: Vec<Vec<u8>> = probs.iter().map(argmax_labels).collect::<Result<_>>()?;
    let c = shape[1];
    let s: usize = shape[2..].iter().product();
    let m = probs.len();
    let mut counts = vec![0usize; c];
    let mut column = vec![0.0; m];
    let mut out = Vec::with_capacity(s);
    for i in 0..s {
        counts.iter_mut().for_each(|n| *n = 0);
        for v in &votes {
            counts[v[i] as usize] += 1;
        }
        if let Some(k) = counts.iter().position(|&n| 2 * n > m) {
            out.push(k as u8);
            continue;
        }
        let mut best = (0usize, f64::NEG_INFINITY);
        for k in 0..c {
            for (slot, p) in column.iter_mut().zip(probs) {
                *slot = p.data()[k * s + i];
            }
            column.sort_by(f64::total_cmp);
            let mean = column.iter().sum::<f64>() / m as f64;
            if mean > best.1 {
                best = (k, mean);
            }
        }
        out.push(best.0 as u8);
    }
    Ok(out)
}

pub fn ensemble_predict(models: &[Model], grid: &VolumeGrid) -> Result<LabelVolume> {
    if models.len() < 2 {
        return Err(invalid!("an ensemble needs at least 2 models, got {}", models.len()));
    }
    let classes = models[0].config().num_classes;
    if models.iter().any(|m| m.config().num_classes != classes) {
        return Err(invalid!("ensemble members disagree on the number of classes"));
    }
    let std = standardize(grid)?;
    let probs: Vec<Tensor> = models.iter().map(|m| probs_for(m, &std)).collect::<Result<_>>()?;
    labels_like(grid, ensemble_vote(&probs)?)
}
