use crate::error::{invalid, Error, Result};
use crate::metrics::dice;
use crate::volume::{BinaryMask, LabelVolume, CONTRALATERAL, IPSILATERAL};

/// Hemisphere voxels with an in-plane 4-neighbour of the other hemisphere.
pub fn extract_midline(labels: &LabelVolume) -> Result<BinaryMask> {
    for (class, name) in [(IPSILATERAL, "ipsilateral"), (CONTRALATERAL, "contralateral")] {
        if labels.count(class) == 0 {
            return Err(Error::Data(format!("no {name} voxels; the midline is undefined")));
        }
    }
    let [d, h, w] = labels.extents();
    let l = labels.labels();
    let mut out = BinaryMask::empty(labels.extents(), labels.spacing())?;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let c = l[(z * h + y) * w + x];
                if c != IPSILATERAL && c != CONTRALATERAL {
                    continue;
                }
                let other = IPSILATERAL + CONTRALATERAL - c;
                let at = |yy: usize, xx: usize| l[(z * h + yy) * w + xx] == other;
                if (y > 0 && at(y - 1, x)) || (y + 1 < h && at(y + 1, x)) || (x > 0 && at(y, x - 1)) || (x + 1 < w && at(y, x + 1))
                {
                    out.set(z, y, x, true);
                }
            }
        }
    }
    Ok(out)
}

/// `n` binary dilations by the 4-connected cross, within each slice.
pub fn dilate_inplane(mask: &BinaryMask, n: usize) -> BinaryMask {
    let [d, h, w] = mask.extents();
    let mut cur = mask.clone();
    for _ in 0..n {
        let src = cur.voxels().to_vec();
        let dst = cur.voxels_mut();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    if src[i] {
                        continue;
                    }
                    dst[i] = (y > 0 && src[i - w]) || (y + 1 < h && src[i + w]) || (x > 0 && src[i - 1]) || (x + 1 < w && src[i + 1]);
                }
            }
        }
    }
    cur
}

#[derive(Clone, Debug, PartialEq)]
pub struct MidlineBand {
    pub n: usize,
    pub band: BinaryMask,
}

/// The ground-truth midline dilated `n` times, restricted to `slices`.
pub fn midline_band(gt: &LabelVolume, n: usize, slices: Option<&[usize]>) -> Result<MidlineBand> {
    let mut band = dilate_inplane(&extract_midline(gt)?, n);
    if let Some(s) = slices {
        band = band.restrict_slices(s);
    }
    Ok(MidlineBand { n, band })
}

/// Per-hemisphere Dice `(ipsilateral, contralateral)` over the voxels of the
/// midline band of `gt`.
pub fn midline_dice(pred: &LabelVolume, gt: &LabelVolume, n: usize, slices: Option<&[usize]>) -> Result<(f64, f64)> {
    pred.same_grid(gt)?;
    let MidlineBand { band, .. } = midline_band(gt, n, slices)?;
    if band.is_empty() {
        return Err(invalid!("midline band is empty for n = {n} and the given slices"));
    }
    let restricted = |lv: &LabelVolume, class: u8| lv.class_mask(class).and(&band);
    let ipsi = dice(&restricted(pred, IPSILATERAL)?, &restricted(gt, IPSILATERAL)?)?;
    let contra = dice(&restricted(pred, CONTRALATERAL)?, &restricted(gt, CONTRALATERAL)?)?;
    Ok((ipsi, contra))
}

/// Contralateral over ipsilateral hemisphere volume.
pub fn hemispheric_ratio(labels: &LabelVolume) -> Result<f64> {
    let ipsi = labels.count(IPSILATERAL);
    let contra = labels.count(CONTRALATERAL);
    if ipsi == 0 {
        return Err(Error::Data("empty ipsilateral hemisphere; ratio undefined".into()));
    }
    if contra == 0 {
        return Err(Error::Data("empty contralateral hemisphere; ratio undefined".into()));
    }
    let [sd, sh, sw] = labels.spacing();
    let voxel = sd * sh * sw;
    Ok((contra as f64 * voxel) / (ipsi as f64 * voxel))
}
