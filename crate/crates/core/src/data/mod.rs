//! Volume I/O, intensity standardization, label derivation, dataset
//! splitting, and the synthetic lesion phantom.

mod manifest;
mod nifti;
mod phantom;

pub use manifest::{read_manifest, split_dataset, write_manifest, ManifestEntry, Split};
pub use nifti::{read_labels, read_volume, write_labels, write_volume};
pub use phantom::{generate_phantom, Phantom, PhantomParams};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, LabelVolume, VolumeGrid, CONTRALATERAL, IPSILATERAL};

/// Mean and population standard deviation, two-pass.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Zero mean, unit population variance over every voxel of the volume.
pub fn standardize(grid: &VolumeGrid) -> Result<VolumeGrid> {
    let values = grid.values();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("voxel {i} is not finite")));
    }
    let (mean, sd) = mean_std(values);
    let first = values[0];
    if values.iter().all(|&v| v == first) || sd == 0.0 {
        return Err(Error::Numerical("cannot standardize a constant volume (zero variance)".into()));
    }
    let mut out: Vec<f64> = values.iter().map(|v| (v - mean) / sd).collect();
    // One correction pass removes the rounding left by the first.
    let (m2, s2) = mean_std(&out);
    out.iter_mut().for_each(|v| *v = (*v - m2) / s2);
    grid.with_values(out)
}

/// Ipsilateral = brain minus contralateral.
pub fn derive_regions(brain: &BinaryMask, contra: &BinaryMask) -> Result<LabelVolume> {
    brain.check_same_extents(contra)?;
    let outside = brain
        .voxels()
        .iter()
        .zip(contra.voxels())
        .filter(|&(&b, &c)| c && !b)
        .count();
    if outside > 0 {
        return Err(Error::Data(format!(
            "{outside} contralateral voxels lie outside the brain mask"
        )));
    }
    let labels = brain
        .voxels()
        .iter()
        .zip(contra.voxels())
        .map(|(&b, &c)| match (b, c) {
            (_, true) => CONTRALATERAL,
            (true, false) => IPSILATERAL,
            _ => 0,
        })
        .collect();
    LabelVolume::new(brain.extents(), brain.spacing(), labels)
}
