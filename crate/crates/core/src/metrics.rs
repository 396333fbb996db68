//! Dice, anisotropy-aware Hausdorff distance, precision and recall.

use std::path::Path;

use serde::Serialize;

use crate::error::{invalid, shape_err, Error, Result};
use crate::volume::{BinaryMask, LabelVolume, CONTRALATERAL};

/// `2|A ∩ B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same_extents(b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.voxels().iter().zip(b.voxels()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Mask voxels with at least one face neighbour outside the mask; the
/// volume edge counts as outside. Coordinates are `(z, y, x)` in index order.
pub fn boundary_voxels(mask: &BinaryMask) -> Vec<[usize; 3]> {
    let [d, h, w] = mask.extents();
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask.get(z, y, x) {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                if edge
                    || !mask.get(z - 1, y, x)
                    || !mask.get(z + 1, y, x)
                    || !mask.get(z, y - 1, x)
                    || !mask.get(z, y + 1, x)
                    || !mask.get(z, y, x - 1)
                    || !mask.get(z, y, x + 1)
                {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn squared_mm(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    let dz = (a[0] as f64 - b[0] as f64) * spacing[0];
    let dy = (a[1] as f64 - b[1] as f64) * spacing[1];
    let dx = (a[2] as f64 - b[2] as f64) * spacing[2];
    dz * dz + dy * dy + dx * dx
}

/// Squared directed Hausdorff distance `max_a min_b |a - b|^2`. The inner
/// scan stops once it cannot raise the running maximum, which keeps the
/// result exact.
fn directed_sq(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    let mut worst = 0.0f64;
    for &a in from {
        let mut best = f64::INFINITY;
        for &b in to {
            let d = squared_mm(a, b, spacing);
            if d < best {
                best = d;
                if best <= worst {
                    break;
                }
            }
        }
        if best > worst {
            worst = best;
        }
    }
    worst
}

fn check_nonempty(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    a.check_same_extents(b)?;
    if a.is_empty() || b.is_empty() {
        return Err(invalid!("Hausdorff distance is undefined for an empty mask"));
    }
    Ok(())
}

/// Symmetric Hausdorff distance in mm between the boundary sets, with voxel
/// offsets scaled per axis by `spacing` (`(sd, sh, sw)`).
pub fn hausdorff_mm(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3]) -> Result<f64> {
    check_nonempty(a, b)?;
    let (ba, bb) = (boundary_voxels(a), boundary_voxels(b));
    Ok(directed_sq(&ba, &bb, spacing).max(directed_sq(&bb, &ba, spacing)).sqrt())
}

/// Same quantity as [`hausdorff_mm`] through exact squared Euclidean distance
/// transforms of each boundary set; faster on large masks.
pub fn hausdorff_mm_edt(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3]) -> Result<f64> {
    check_nonempty(a, b)?;
    let (ba, bb) = (boundary_voxels(a), boundary_voxels(b));
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        let field = squared_edt(a.extents(), to, spacing);
        let [_, h, w] = a.extents();
        from.iter().map(|p| field[(p[0] * h + p[1]) * w + p[2]]).fold(0.0, f64::max)
    };
    Ok(directed(&ba, &bb).max(directed(&bb, &ba)).sqrt())
}

/// Squared distance (mm^2) from every voxel to the nearest seed, by
/// separable lower envelopes of parabolas along each axis.
fn squared_edt(extents: [usize; 3], seeds: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = extents;
    let mut f = vec![f64::INFINITY; d * h * w];
    for s in seeds {
        f[(s[0] * h + s[1]) * w + s[2]] = 0.0;
    }
    let n_max = d.max(h).max(w);
    let mut line = vec![0.0; n_max];
    let mut out = vec![0.0; n_max];
    let mut scratch = Envelope::new(n_max);
    let strides = [h * w, w, 1];
    for axis in [2usize, 1, 0] {
        let len = extents[axis];
        let stride = strides[axis];
        for start in 0..d * h * w {
            // Visit each line once, from the voxel whose coordinate on `axis` is 0.
            if (start / stride) % len != 0 {
                continue;
            }
            for k in 0..len {
                line[k] = f[start + k * stride];
            }
            scratch.transform(&line[..len], &mut out[..len], spacing[axis]);
            for k in 0..len {
                f[start + k * stride] = out[k];
            }
        }
    }
    f
}

struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn new(n: usize) -> Self {
        Envelope {
            v: vec![0; n],
            z: vec![0.0; n + 1],
        }
    }

    /// `out[q] = min_p ((q - p) s)^2 + f[p]`.
    fn transform(&mut self, f: &[f64], out: &mut [f64], s: f64) {
        let n = f.len();
        let s2 = s * s;
        let finite: Vec<usize> = (0..n).filter(|&p| f[p].is_finite()).collect();
        if finite.is_empty() {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
        let meet = |p: usize, q: usize| -> f64 {
            let (pf, qf) = (p as f64, q as f64);
            ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf))
        };
        let mut k = 0;
        self.v[0] = finite[0];
        self.z[0] = f64::NEG_INFINITY;
        self.z[1] = f64::INFINITY;
        for &q in &finite[1..] {
            let mut x = meet(self.v[k], q);
            while x <= self.z[k] {
                k -= 1;
                x = meet(self.v[k], q);
            }
            k += 1;
            self.v[k] = q;
            self.z[k] = x;
            self.z[k + 1] = f64::INFINITY;
        }
        let mut j = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while self.z[j + 1] < q as f64 {
                j += 1;
            }
            let p = self.v[j];
            let t = (q as f64 - p as f64) * s;
            *o = t * t + f[p];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrecisionRecall {
    /// `TP / (TP + FP)`; 0 when the prediction is empty.
    pub precision: f64,
    /// `TP / (TP + FN)`; 0 when the ground truth is empty.
    pub recall: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

pub fn precision_recall(pred: &BinaryMask, gt: &BinaryMask) -> Result<PrecisionRecall> {
    pred.check_same_extents(gt)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.voxels().iter().zip(gt.voxels()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(PrecisionRecall {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
        precision_undefined: tp + fp == 0,
        recall_undefined: tp + fneg == 0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Brain,
    ContralateralHemisphere,
}

impl Region {
    pub fn mask(self, labels: &LabelVolume) -> BinaryMask {
        match self {
            Region::Brain => labels.brain_mask(),
            Region::ContralateralHemisphere => labels.class_mask(CONTRALATERAL),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Brain => "brain",
            Region::ContralateralHemisphere => "contralateral_hemisphere",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub region: Region,
    pub dice: f64,
    /// `None` when either restricted mask is empty (distance undefined).
    pub hd_mm: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub precision_undefined: bool,
}

/// Brain and contralateral rows, optionally restricted to the listed
/// slices (axis 0) of both volumes.
pub fn evaluate_volume(pred: &LabelVolume, gt: &LabelVolume, slice_filter: Option<&[usize]>) -> Result<Vec<MetricRow>> {
    pred.same_grid(gt)?;
    if let Some(bad) = slice_filter.and_then(|s| s.iter().find(|&&z| z >= gt.extents()[0])) {
        return Err(shape_err!("slice {bad} is outside {} slices", gt.extents()[0]));
    }
    let mut rows = Vec::with_capacity(2);
    for region in [Region::Brain, Region::ContralateralHemisphere] {
        let (mut p, mut g) = (region.mask(pred), region.mask(gt));
        if let Some(slices) = slice_filter {
            p = p.restrict_slices(slices);
            g = g.restrict_slices(slices);
        }
        let pr = precision_recall(&p, &g)?;
        let hd_mm = if p.is_empty() || g.is_empty() {
            None
        } else {
            Some(hausdorff_mm(&p, &g, gt.spacing())?)
        };
        rows.push(MetricRow {
            region,
            dice: dice(&p, &g)?,
            hd_mm,
            precision: pr.precision,
            recall: pr.recall,
            precision_undefined: pr.precision_undefined,
        });
    }
    Ok(rows)
}

#[derive(Serialize)]
struct ReportLine<'a> {
    id: &'a str,
    region: &'a str,
    dice: Option<f64>,
    hd_mm: Option<f64>,
    precision: Option<f64>,
    recall: Option<f64>,
    precision_undefined: Option<bool>,
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), sd)
}

/// One line per (volume, region), then `mean` and `std` (sample SD) lines
/// per region. Undefined values are left blank.
pub fn write_metric_report(rows: &[(String, MetricRow)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for (id, r) in rows {
        w.serialize(ReportLine {
            id,
            region: r.region.name(),
            dice: Some(r.dice),
            hd_mm: r.hd_mm,
            precision: Some(r.precision),
            recall: Some(r.recall),
            precision_undefined: Some(r.precision_undefined),
        })?;
    }
    for region in [Region::Brain, Region::ContralateralHemisphere] {
        let of = |f: &dyn Fn(&MetricRow) -> Option<f64>| -> Vec<f64> {
            rows.iter().filter(|(_, r)| r.region == region).filter_map(|(_, r)| f(r)).collect()
        };
        let cols = [
            mean_sd(&of(&|r| Some(r.dice))),
            mean_sd(&of(&|r| r.hd_mm)),
            mean_sd(&of(&|r| Some(r.precision))),
            mean_sd(&of(&|r| Some(r.recall))),
        ];
        for (label, pick) in [("mean", 0usize), ("std", 1)] {
            let get = |k: usize| if pick == 0 { cols[k].0 } else { cols[k].1 };
            w.serialize(ReportLine {
                id: label,
                region: region.name(),
                dice: get(0),
                hd_mm: get(1),
                precision: get(2),
                recall: get(3),
                precision_undefined: None,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
