//! Midline-band Dice, the hemispheric-ratio biomarker with its effect size
//! and bootstrap interval, and the threshold-baseline grid search.

mod bootstrap;
mod midline;
mod threshold;

pub use bootstrap::{
    bca_ci, bca_ci_with, bootstrap_replicates, cohens_d, cohens_d_paired, percentile_ci, percentile_sorted,
    BootstrapInterval, EffectSize, Statistic,
};
pub use midline::{dilate_inplane, extract_midline, hemispheric_ratio, midline_band, midline_dice, MidlineBand};
pub use threshold::{
    baseline_threshold_segment, gridsearch, largest_component, percentile_value, GridCell, GridSearchResult,
    ALPHA_GRID, PERCENTILE_GRID,
};

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

fn write_rows<T: Serialize>(rows: impl IntoIterator<Item = T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Hemispheric-ratio comparison between ground truth and predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct BiomarkerResult {
    pub gt_ratios: Vec<f64>,
    pub pred_ratios: Vec<f64>,
    pub cohens_d: f64,
    pub interval: BootstrapInterval,
}

impl BiomarkerResult {
    pub fn compute(
        gt_ratios: Vec<f64>,
        pred_ratios: Vec<f64>,
        effect: EffectSize,
        resamples: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        let stat = move |a: &[f64], b: &[f64]| effect.compute(a, b);
        let interval = bca_ci(&gt_ratios, &pred_ratios, &stat, resamples, alpha, seed)?;
        Ok(BiomarkerResult {
            cohens_d: interval.estimate,
            gt_ratios,
            pred_ratios,
            interval,
        })
    }
}

#[derive(Serialize)]
struct BiomarkerLine {
    d: f64,
    ci_low: f64,
    ci_high: f64,
    n_volumes: usize,
    resamples: usize,
    alpha: f64,
    degenerate: bool,
}

pub fn write_biomarker_report(r: &BiomarkerResult, path: impl AsRef<Path>) -> Result<()> {
    write_rows(
        [BiomarkerLine {
            d: r.cohens_d,
            ci_low: r.interval.low,
            ci_high: r.interval.high,
            n_volumes: r.gt_ratios.len(),
            resamples: r.interval.resamples,
            alpha: r.interval.alpha,
            degenerate: r.interval.degenerate,
        }],
        path.as_ref(),
    )
}

/// Band Dice for one dilation count, averaged over volumes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MidlineRow {
    pub n: usize,
    pub dice_ipsi: f64,
    pub dice_contra: f64,
    pub dice_ipsi_sd: Option<f64>,
    pub dice_contra_sd: Option<f64>,
}

pub fn write_midline_report(rows: &[MidlineRow], path: impl AsRef<Path>) -> Result<()> {
    write_rows(rows, path.as_ref())
}

pub fn write_gridsearch_report(result: &GridSearchResult, path: impl AsRef<Path>) -> Result<()> {
    write_rows(&result.table, path.as_ref())
}
