//! Synthetic stand-in for T2-weighted rodent brain scans: an ellipsoidal
//! brain split at a sagittal plane into two hemisphere labels, with an
//! optional hyperintense lesion on the ipsilateral side.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::volume::{BinaryMask, LabelVolume, VolumeGrid, BACKGROUND, CONTRALATERAL, IPSILATERAL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    /// (D, H, W) voxels.
    pub extents: [usize; 3],
    /// (sd, sh, sw) in mm.
    pub spacing: [f64; 3],
    /// Brain semi-axes as fractions of each extent.
    pub semi_axes: [f64; 3],
    /// Relative per-volume jitter of each semi-axis.
    pub shape_jitter: f64,
    /// Per-volume jitter of the centre, as a fraction of each extent.
    pub center_jitter: f64,
    pub background_mean: f64,
    pub ipsilateral_mean: f64,
    pub contralateral_mean: f64,
    /// Per-volume jitter of each hemisphere mean.
    pub hemisphere_sigma: f64,
    pub lesion_probability: f64,
    /// Lesion radius range in mm.
    pub lesion_radius_mm: [f64; 2],
    /// Added to the ipsilateral intensity inside the lesion.
    pub lesion_shift: f64,
    /// Per-voxel additive Gaussian noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            extents: [32, 64, 64],
            spacing: [1.0, 0.117, 0.117],
            semi_axes: [0.36, 0.36, 0.38],
            shape_jitter: 0.08,
            center_jitter: 0.03,
            background_mean: 0.0,
            ipsilateral_mean: 1.0,
            contralateral_mean: 0.75,
            hemisphere_sigma: 0.03,
            lesion_probability: 1.0,
            lesion_radius_mm: [0.6, 1.0],
            lesion_shift: 0.6,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(invalid!("phantom spacing must be positive, got {:?}", self.spacing));
        }
        for (name, v) in [
            ("shape_jitter", self.shape_jitter),
            ("center_jitter", self.center_jitter),
            ("hemisphere_sigma", self.hemisphere_sigma),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.lesion_probability) {
            return Err(invalid!("lesion_probability must lie in [0, 1], got {}", self.lesion_probability));
        }
        let [r0, r1] = self.lesion_radius_mm;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return Err(invalid!("lesion_radius_mm must satisfy 0 < lo <= hi, got {:?}", self.lesion_radius_mm));
        }
        if self.shape_jitter >= 1.0 {
            return Err(invalid!("shape_jitter must be below 1"));
        }
        for axis in 0..3 {
            let frac = self.semi_axes[axis];
            if !(frac > 0.0) {
                return Err(invalid!("semi_axes must be positive, got {:?}", self.semi_axes));
            }
            if frac * (1.0 + self.shape_jitter) + self.center_jitter > 0.5 {
                return Err(invalid!(
                    "semi-axis {frac} with jitter does not fit inside the volume along axis {axis}"
                ));
            }
            let smallest = frac * (1.0 - self.shape_jitter) * self.extents[axis] as f64;
            if smallest < 2.0 {
                return Err(invalid!(
                    "extents {:?} too small to contain the ellipsoid (semi-axis {smallest:.2} voxels along axis {axis})",
                    self.extents
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: VolumeGrid,
    pub labels: LabelVolume,
    /// Lesion voxels, when a lesion was placed.
    pub lesion: Option<BinaryMask>,
}

fn normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("validated sigma").sample(rng)
}

/// Deterministic in `params` (seed included). Intensities are rounded to
/// float32 so the volume survives a file round trip unchanged.
pub fn generate_phantom(params: &PhantomParams) -> Result<Phantom> {
    params.validate()?;
    let [d, h, w] = params.extents;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut center = [0.0; 3];
    let mut axes = [0.0; 3];
    for k in 0..3 {
        let e = params.extents[k] as f64;
        center[k] = (e - 1.0) / 2.0 + params.center_jitter * e * rng.random_range(-1.0..=1.0);
        axes[k] = params.semi_axes[k] * e * (1.0 + params.shape_jitter * rng.random_range(-1.0..=1.0));
    }
    let ipsi_mean = params.ipsilateral_mean + normal(&mut rng, params.hemisphere_sigma);
    let contra_mean = params.contralateral_mean + normal(&mut rng, params.hemisphere_sigma);

    // Voxels with x below the sagittal plane through the centre are
    // contralateral, the rest ipsilateral.
    let mut labels = vec![BACKGROUND; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let r2: f64 = (0..3).map(|k| ((p[k] - center[k]) / axes[k]).powi(2)).sum();
                if r2 <= 1.0 {
                    labels[(z * h + y) * w + x] = if p[2] < center[2] { CONTRALATERAL } else { IPSILATERAL };
                }
            }
        }
    }
    let count = |c: u8| labels.iter().filter(|&&l| l == c).count();
    if count(IPSILATERAL) == 0 || count(CONTRALATERAL) == 0 {
        return Err(invalid!("phantom ellipsoid did not produce both hemispheres"));
    }

    let lesion = if rng.random::<f64>() < params.lesion_probability {
        let radius = rng.random_range(params.lesion_radius_mm[0]..=params.lesion_radius_mm[1]);
        Some(place_lesion(&mut rng, &labels, params, radius)?)
    } else {
        None
    };

    let mut values = Vec::with_capacity(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        let mut v = match l {
            IPSILATERAL => ipsi_mean,
            CONTRALATERAL => contra_mean,
            _ => params.background_mean,
        };
        if lesion.as_ref().is_some_and(|m| m[i]) {
            v += params.lesion_shift;
        }
        v += normal(&mut rng, params.noise_sigma);
        values.push(v as f32 as f64);
    }

    let volume = VolumeGrid::new(params.extents, params.spacing, values)?;
    let labels = LabelVolume::new(params.extents, params.spacing, labels)?;
    let lesion = lesion.map(|m| BinaryMask::new(params.extents, params.spacing, m)).transpose()?;
    Ok(Phantom { volume, labels, lesion })
}

/// Draws ball centres among ipsilateral voxels until the whole ball and its
/// face neighbours are ipsilateral.
fn place_lesion(rng: &mut ChaCha8Rng, labels: &[u8], params: &PhantomParams, radius: f64) -> Result<Vec<bool>> {
    let [d, h, w] = params.extents;
    let [sd, sh, sw] = params.spacing;
    let reach = [(radius / sd) as isize + 1, (radius / sh) as isize + 1, (radius / sw) as isize + 1];
    let ipsi: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == IPSILATERAL).collect();
    let is_ipsi = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && labels[(z as usize * h + y as usize) * w + x as usize] == IPSILATERAL
    };
    'attempt: for _ in 0..1000 {
        let c = ipsi[rng.random_range(0..ipsi.len())];
        let (cz, cy, cx) = ((c / (h * w)) as isize, ((c / w) % h) as isize, (c % w) as isize);
        let mut ball = Vec::new();
        for dz in -reach[0]..=reach[0] {
            for dy in -reach[1]..=reach[1] {
                for dx in -reach[2]..=reach[2] {
                    let dist2 = (dz as f64 * sd).powi(2) + (dy as f64 * sh).powi(2) + (dx as f64 * sw).powi(2);
                    if dist2 > radius * radius {
                        continue;
                    }
                    let (z, y, x) = (cz + dz, cy + dy, cx + dx);
                    let face = [(0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                    if !face.iter().all(|&(a, b, e)| is_ipsi(z + a, y + b, x + e)) {
                        continue 'attempt;
                    }
                    ball.push((z as usize * h + y as usize) * w + x as usize);
                }
            }
        }
        let mut mask = vec![false; labels.len()];
        ball.into_iter().for_each(|i| mask[i] = true);
        return Ok(mask);
    }
    Err(Error::InvalidArgument(format!(
        "could not fit a {radius:.3} mm lesion strictly inside the ipsilateral hemisphere"
    )))
}
