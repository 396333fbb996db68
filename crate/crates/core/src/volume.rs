//! Scalar, label and boolean volumes on a `(D, H, W)` grid with physical spacing.
//!
//! Axis 0 (D) indexes coronal slices; H and W span the in-plane grid. Voxel
//! `(z, y, x)` lives at flat index `(z * H + y) * W + x`.

use crate::error::{invalid, shape_err, Error, Result};

pub const BACKGROUND: u8 = 0;
pub const IPSILATERAL: u8 = 1;
pub const CONTRALATERAL: u8 = 2;
pub const NUM_CLASSES: usize = 3;

/// Header fields carried through file round trips without interpretation.
#[derive(Clone, Debug, PartialEq)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    pub qfac: f32,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation {
            qform_code: 0,
            sform_code: 0,
            qfac: 1.0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: [[0.0; 4]; 3],
        }
    }
}

fn check_grid(extents: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if extents.contains(&0) {
        return Err(shape_err!("volume extents must be positive, got {extents:?}"));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(invalid!("voxel spacing must be finite and positive, got {spacing:?}"));
    }
    let n = extents.iter().product::<usize>();
    if n != len {
        return Err(shape_err!("extents {extents:?} hold {n} voxels but {len} values were given"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeGrid {
    extents: [usize; 3],
    spacing: [f64; 3],
    values: Vec<f64>,
    pub orientation: Orientation,
}

impl VolumeGrid {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], values: Vec<f64>) -> Result<Self> {
        check_grid(extents, spacing, values.len())?;
        Ok(VolumeGrid {
            extents,
            spacing,
            values,
            orientation: Orientation::default(),
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        let mut out = VolumeGrid::new(self.extents, self.spacing, values)?;
        out.orientation = self.orientation.clone();
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    extents: [usize; 3],
    spacing: [f64; 3],
    labels: Vec<u8>,
    pub orientation: Orientation,
}

impl LabelVolume {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        check_grid(extents, spacing, labels.len())?;
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("label {bad} outside {{0, 1, 2}}")));
        }
        Ok(LabelVolume {
            extents,
            spacing,
            labels,
            orientation: Orientation::default(),
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn mask_of(&self, pred: impl Fn(u8) -> bool) -> BinaryMask {
        BinaryMask {
            extents: self.extents,
            spacing: self.spacing,
            voxels: self.labels.iter().map(|&l| pred(l)).collect(),
        }
    }

    /// Classes {1, 2}.
    pub fn brain_mask(&self) -> BinaryMask {
        self.mask_of(|l| l == IPSILATERAL || l == CONTRALATERAL)
    }

    pub fn class_mask(&self, class: u8) -> BinaryMask {
        self.mask_of(|l| l == class)
    }

    pub fn same_grid(&self, other: &LabelVolume) -> Result<()> {
        if self.extents != other.extents {
            return Err(shape_err!("label volume extents {:?} vs {:?}", self.extents, other.extents));
        }
        if self.spacing != other.spacing {
            return Err(shape_err!("label volume spacing {:?} vs {:?}", self.spacing, other.spacing));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    extents: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<bool>,
}

impl BinaryMask {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], voxels: Vec<bool>) -> Result<Self> {
        check_grid(extents, spacing, voxels.len())?;
        Ok(BinaryMask {
            extents,
            spacing,
            voxels,
        })
    }

    pub fn empty(extents: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        BinaryMask::new(extents, spacing, vec![false; extents.iter().product()])
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[bool] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [bool] {
        &mut self.voxels
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.voxels.iter().any(|&v| v)
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.voxels[self.index(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: bool) {
        let i = self.index(z, y, x);
        self.voxels[i] = v;
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [_, h, w] = self.extents;
        [i / (h * w), (i / w) % h, i % w]
    }

    pub fn check_same_extents(&self, other: &BinaryMask) -> Result<()> {
        if self.extents != other.extents {
            return Err(shape_err!("mask extents {:?} vs {:?}", self.extents, other.extents));
        }
        Ok(())
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_extents(other)?;
        Ok(self.zip_with(other, |a, b| a && b))
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_extents(other)?;
        Ok(self.zip_with(other, |a, b| a || b))
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> BinaryMask {
        BinaryMask {
            extents: self.extents,
            spacing: self.spacing,
            voxels: self.voxels.iter().zip(&other.voxels).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.voxels.iter().zip(&other.voxels).all(|(&a, &b)| !a || b)
    }

    /// Keeps only slices (axis 0) listed in `slices`.
    pub fn restrict_slices(&self, slices: &[usize]) -> BinaryMask {
        let plane = self.extents[1] * self.extents[2];
        let mut keep = vec![false; self.extents[0]];
        for &s in slices {
            if s < keep.len() {
                keep[s] = true;
            }
        }
        BinaryMask {
            extents: self.extents,
            spacing: self.spacing,
            voxels: self.voxels.iter().enumerate().map(|(i, &v)| v && keep[i / plane]).collect(),
        }
    }
}
