use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64], m: f64) -> f64 {
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Two-sample Cohen's d with the pooled sample standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(invalid!("Cohen's d needs at least 2 values per sample, got {} and {}", a.len(), b.len()));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = ((na - 1.0) * sample_var(a, ma) + (nb - 1.0) * sample_var(b, mb)) / (na + nb - 2.0);
    if !(pooled > 0.0) {
        return Err(Error::Numerical("pooled variance is zero; Cohen's d undefined".into()));
    }
    Ok((ma - mb) / pooled.sqrt())
}

/// Paired variant: mean of `a - b` over the sample SD of the differences.
pub fn cohens_d_paired(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(invalid!("paired Cohen's d needs two equal-length samples of at least 2"));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&diff);
    let var = sample_var(&diff, m);
    if !(var > 0.0) {
        return Err(Error::Numerical("differences have zero variance; paired Cohen's d undefined".into()));
    }
    Ok(m / var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectSize {
    Pooled,
    Paired,
}

impl EffectSize {
    pub fn compute(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            EffectSize::Pooled => cohens_d(a, b),
            EffectSize::Paired => cohens_d_paired(a, b),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapInterval {
    pub estimate: f64,
    pub low: f64,
    pub high: f64,
    pub z0: f64,
    pub acceleration: f64,
    /// Every usable replicate equalled the estimate; the interval collapsed.
    pub degenerate: bool,
    /// Replicates on which the statistic was undefined.
    pub dropped: usize,
    pub resamples: usize,
    pub alpha: f64,
}

/// Linear interpolation between order statistics at position `q (n - 1)`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

/// Statistic over (a, b) pairs resampled jointly by index.
pub type Statistic<'a> = &'a dyn Fn(&[f64], &[f64]) -> Result<f64>;

/// Bootstrap replicates; replicate `r` draws its indices from a ChaCha8
/// stream keyed by (`seed`, `r`), so any replicate can be recomputed alone.
pub fn bootstrap_replicates(a: &[f64], b: &[f64], stat: Statistic, resamples: usize, seed: u64) -> (Vec<f64>, usize) {
    let n = a.len();
    let mut reps = Vec::with_capacity(resamples);
    let mut dropped = 0;
    let (mut ra, mut rb) = (vec![0.0; n], vec![0.0; n]);
    for r in 0..resamples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        for k in 0..n {
            let i = rng.random_range(0..n);
            ra[k] = a[i];
            rb[k] = b[i];
        }
        match stat(&ra, &rb) {
            Ok(v) if v.is_finite() => reps.push(v),
            _ => dropped += 1,
        }
    }
    (reps, dropped)
}

fn jackknife_acceleration(a: &[f64], b: &[f64], stat: Statistic) -> Result<f64> {
    let n = a.len();
    let mut thetas = Vec::with_capacity(n);
    for skip in 0..n {
        let ja: Vec<f64> = (0..n).filter(|&i| i != skip).map(|i| a[i]).collect();
        let jb: Vec<f64> = (0..n).filter(|&i| i != skip).map(|i| b[i]).collect();
        if let Ok(t) = stat(&ja, &jb) {
            thetas.push(t);
        }
    }
    if thetas.len() < 2 {
        return Ok(0.0);
    }
    let m = mean(&thetas);
    let num: f64 = thetas.iter().map(|t| (m - t).powi(3)).sum();
    let den: f64 = thetas.iter().map(|t| (m - t).powi(2)).sum();
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (6.0 * den.powf(1.5)))
}

fn check_inputs(a: &[f64], b: &[f64], resamples: usize, alpha: f64) -> Result<()> {
    if a.len() != b.len() {
        return Err(invalid!("paired samples differ in length: {} vs {}", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(invalid!("bootstrap needs at least 2 paired values"));
    }
    if resamples < 1000 {
        return Err(invalid!("at least 1000 resamples are required, got {resamples}"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid!("alpha must lie in (0, 1), got {alpha}"));
    }
    Ok(())
}

/// Bias-corrected and accelerated interval at level `1 - alpha`.
///
/// `z0` is the normal quantile of the fraction of replicates strictly below
/// the estimate (clamped to `[1/(2B), 1 - 1/(2B)]`); the acceleration comes
/// from the jackknife skewness.
pub fn bca_ci(a: &[f64], b: &[f64], stat: Statistic, resamples: usize, alpha: f64, seed: u64) -> Result<BootstrapInterval> {
    bca_interval(a, b, stat, resamples, alpha, seed, None)
}

/// As [`bca_ci`] with `z0` and the acceleration fixed by the caller.
pub fn bca_ci_with(
    a: &[f64],
    b: &[f64],
    stat: Statistic,
    resamples: usize,
    alpha: f64,
    seed: u64,
    z0: f64,
    acceleration: f64,
) -> Result<BootstrapInterval> {
    bca_interval(a, b, stat, resamples, alpha, seed, Some((z0, acceleration)))
}

/// Plain percentile interval on the same replicate stream.
pub fn percentile_ci(a: &[f64], b: &[f64], stat: Statistic, resamples: usize, alpha: f64, seed: u64) -> Result<(f64, f64)> {
    check_inputs(a, b, resamples, alpha)?;
    let (mut reps, _) = bootstrap_replicates(a, b, stat, resamples, seed);
    if reps.is_empty() {
        return Err(Error::Numerical("statistic undefined on every resample".into()));
    }
    reps.sort_by(f64::total_cmp);
    Ok((percentile_sorted(&reps, alpha / 2.0), percentile_sorted(&reps, 1.0 - alpha / 2.0)))
}

fn bca_interval(
    a: &[f64],
    b: &[f64],
    stat: Statistic,
    resamples: usize,
    alpha: f64,
    seed: u64,
    forced: Option<(f64, f64)>,
) -> Result<BootstrapInterval> {
    check_inputs(a, b, resamples, alpha)?;
    let estimate = stat(a, b)?;
    let (mut reps, dropped) = bootstrap_replicates(a, b, stat, resamples, seed);
    reps.sort_by(f64::total_cmp);
    let collapsed = |z0, acceleration| BootstrapInterval {
        estimate,
        low: estimate,
        high: estimate,
        z0,
        acceleration,
        degenerate: true,
        dropped,
        resamples,
        alpha,
    };
    if reps.is_empty() || reps[0] == reps[reps.len() - 1] {
        log::warn!("bootstrap distribution is degenerate; interval collapsed to the estimate");
        return Ok(collapsed(0.0, 0.0));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let (z0, acc) = match forced {
        Some(v) => v,
        None => {
            let kept = reps.len() as f64;
            let below = reps.partition_point(|&r| r < estimate) as f64;
            let frac = (below / kept).clamp(0.5 / kept, 1.0 - 0.5 / kept);
            (normal.inverse_cdf(frac), jackknife_acceleration(a, b, stat)?)
        }
    };
    let adjusted = |q: f64| {
        let zq = normal.inverse_cdf(q);
        let z = z0 + (z0 + zq) / (1.0 - acc * (z0 + zq));
        // cdf(inverse_cdf(q)) is not bit-exact; keep q when nothing moved
        if z == zq {
            q
        } else {
            normal.cdf(z)
        }
    };
    let (q_lo, q_hi) = (adjusted(alpha / 2.0), adjusted(1.0 - alpha / 2.0));
    if !(q_lo.is_finite() && q_hi.is_finite()) {
        return Err(Error::Numerical("BCa adjustment produced non-finite levels".into()));
    }
    Ok(BootstrapInterval {
        estimate,
        low: percentile_sorted(&reps, q_lo),
        high: percentile_sorted(&reps, q_hi),
        z0,
        acceleration: acc,
        degenerate: false,
        dropped,
        resamples,
        alpha,
    })
}
