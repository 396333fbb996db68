//! Percentile-threshold brain extraction and the (percentile, closing) grid
//! search that tunes it.

use crate::error::{invalid, Result};
use crate::metrics::dice;
use crate::volume::{BinaryMask, LabelVolume, VolumeGrid};

pub const PERCENTILE_GRID: std::ops::RangeInclusive<usize> = 1..=99;
pub const ALPHA_GRID: std::ops::RangeInclusive<usize> = 0..=10;

/// Value at the `i`-th percentile, interpolating linearly between order
/// statistics.
pub fn percentile_value(sorted: &[f64], i: usize) -> f64 {
    super::bootstrap::percentile_sorted(sorted, i as f64 / 100.0)
}

fn check_index(i: usize, alpha: usize) -> Result<()> {
    if !PERCENTILE_GRID.contains(&i) {
        return Err(invalid!("percentile index {i} outside 1..=99"));
    }
    if !ALPHA_GRID.contains(&alpha) {
        return Err(invalid!("closing iterations {alpha} outside 0..=10"));
    }
    Ok(())
}

/// In-plane city-block distance (in voxels) from each voxel to the nearest
/// `true` voxel of its slice; `u32::MAX` when the slice has none.
fn cityblock_distance(extents: [usize; 3], fg: &[bool]) -> Vec<u32> {
    let [d, h, w] = extents;
    let far = u32::MAX / 2;
    let mut dist: Vec<u32> = fg.iter().map(|&f| if f { 0 } else { far }).collect();
    for z in 0..d {
        let s = &mut dist[z * h * w..(z + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if y > 0 {
                    s[i] = s[i].min(s[i - w] + 1);
                }
                if x > 0 {
                    s[i] = s[i].min(s[i - 1] + 1);
                }
            }
        }
        for y in (0..h).rev() {
            for x in (0..w).rev() {
                let i = y * w + x;
                if y + 1 < h {
                    s[i] = s[i].min(s[i + w] + 1);
                }
                if x + 1 < w {
                    s[i] = s[i].min(s[i + 1] + 1);
                }
            }
        }
    }
    dist
}

/// `alpha` in-plane dilations by the 4-connected cross followed by `alpha`
/// erosions (voxels beyond the slice edge count as foreground, so the
/// border does not erode). Uses distance transforms: `alpha` iterated cross
/// dilations reach exactly the city-block ball of radius `alpha`.
fn close_inplane(extents: [usize; 3], fg: &[bool], dist_to_fg: &[u32], alpha: usize) -> Vec<bool> {
    if alpha == 0 {
        return fg.to_vec();
    }
    let a = alpha as u32;
    let dilated_bg: Vec<bool> = dist_to_fg.iter().map(|&d| d > a).collect();
    let to_bg = cityblock_distance(extents, &dilated_bg);
    to_bg.iter().map(|&d| d > a).collect()
}

/// Keeps the largest 6-connected component; on equal sizes the one holding
/// the lowest voxel index wins.
pub fn largest_component(extents: [usize; 3], fg: &[bool]) -> Vec<bool> {
    let [d, h, w] = extents;
    let mut comp = vec![u32::MAX; fg.len()];
    let mut best = (0usize, u32::MAX);
    let mut stack = Vec::new();
    let mut next = 0u32;
    for seed in 0..fg.len() {
        if !fg[seed] || comp[seed] != u32::MAX {
            continue;
        }
        let id = next;
        next += 1;
        comp[seed] = id;
        stack.push(seed);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let mut visit = |j: usize| {
                if fg[j] && comp[j] == u32::MAX {
                    comp[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if z > 0 {
                visit(i - h * w);
            }
            if z + 1 < d {
                visit(i + h * w);
            }
        }
        if size > best.0 {
            best = (size, id);
        }
    }
    comp.iter().map(|&c| c == best.1 && best.1 != u32::MAX).collect()
}

/// Threshold, close and keep the largest component, sharing the sorted
/// intensities and the foreground distance map across closing sizes.
struct Prepared<'a> {
    grid: &'a VolumeGrid,
    sorted: Vec<f64>,
}

impl<'a> Prepared<'a> {
    fn new(grid: &'a VolumeGrid) -> Self {
        let mut sorted = grid.values().to_vec();
        sorted.sort_by(f64::total_cmp);
        Prepared { grid, sorted }
    }

    fn threshold(&self, i: usize) -> (Vec<bool>, Vec<u32>) {
        let t = percentile_value(&self.sorted, i);
        let fg: Vec<bool> = self.grid.values().iter().map(|&v| v > t).collect();
        let dist = cityblock_distance(self.grid.extents(), &fg);
        (fg, dist)
    }

    fn finish(&self, fg: &[bool], dist: &[u32], alpha: usize) -> Result<BinaryMask> {
        let ext = self.grid.extents();
        let closed = close_inplane(ext, fg, dist, alpha);
        BinaryMask::new(ext, self.grid.spacing(), largest_component(ext, &closed))
    }
}

/// Voxels brighter than the `i`-th intensity percentile, closed in-plane
/// `alpha` times, reduced to the largest 6-connected component.
pub fn baseline_threshold_segment(volume: &VolumeGrid, i: usize, alpha: usize) -> Result<BinaryMask> {
    check_index(i, alpha)?;
    let p = Prepared::new(volume);
    let (fg, dist) = p.threshold(i);
    p.finish(&fg, &dist, alpha)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct GridCell {
    pub i: usize,
    pub alpha: usize,
    pub mean_dice: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSearchResult {
    pub best_percentile_index: usize,
    pub best_alpha: usize,
    pub best_mean_dice: f64,
    /// Every cell, ordered by `i` then `alpha`.
    pub table: Vec<GridCell>,
}

/// Mean brain Dice of the baseline over the 99 x 11 grid. The mean sums
/// per-volume scores in sorted order so the table does not depend on the
/// order of `data`; ties go to the lowest `i`, then the lowest `alpha`.
pub fn gridsearch(data: &[(VolumeGrid, LabelVolume)]) -> Result<GridSearchResult> {
    if data.is_empty() {
        return Err(invalid!("grid search needs at least one volume"));
    }
    let cells: Vec<(usize, usize)> = PERCENTILE_GRID.flat_map(|i| ALPHA_GRID.map(move |a| (i, a))).collect();
    let mut scores = vec![Vec::with_capacity(data.len()); cells.len()];
    for (volume, gt) in data {
        if volume.extents() != gt.extents() {
            return Err(invalid!("volume extents {:?} differ from labels {:?}", volume.extents(), gt.extents()));
        }
        let brain = gt.brain_mask();
        let p = Prepared::new(volume);
        let per_i = ALPHA_GRID.count();
        for (k, i) in PERCENTILE_GRID.enumerate() {
            let (fg, dist) = p.threshold(i);
            for alpha in ALPHA_GRID {
                let mask = p.finish(&fg, &dist, alpha)?;
                scores[k * per_i + alpha].push(dice(&mask, &brain)?);
            }
        }
    }
    let n = data.len() as f64;
    let mut table = Vec::with_capacity(cells.len());
    let mut best = 0;
    for (c, (&(i, alpha), s)) in cells.iter().zip(scores.iter_mut()).enumerate() {
        s.sort_by(f64::total_cmp);
        let mean_dice = s.iter().sum::<f64>() / n;
        if mean_dice > table.get(best).map_or(f64::NEG_INFINITY, |b: &GridCell| b.mean_dice) {
            best = c;
        }
        table.push(GridCell { i, alpha, mean_dice });
    }
    Ok(GridSearchResult {
        best_percentile_index: table[best].i,
        best_alpha: table[best].alpha,
        best_mean_dice: table[best].mean_dice,
        table,
    })
}
