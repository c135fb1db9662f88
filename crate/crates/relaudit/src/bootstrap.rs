//! Percentile bootstrap with pinned determinism: pre-generated index
//! streams, a fixed cross-platform generator, and type-7 quantiles, so the
//! same data, statistic, and seed give bit-identical intervals on any
//! machine at any thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{CellKey, VariantId};
use crate::rng::seeded_rng;

pub const DEFAULT_N_RESAMPLES: usize = 1000;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error("bootstrap requires non-empty data")]
    EmptyData,
    #[error("n_resamples must be positive")]
    ZeroResamples,
    #[error("variant {variant} has {got} rows, expected {expected}")]
    MisalignedLengths {
        variant: VariantId,
        expected: usize,
        got: usize,
    },
    #[error("variant {0} is missing a correctness vector")]
    MissingVariant(VariantId),
    #[error("format_change must not enter spread")]
    FormatChangeIncluded,
    #[error("paired resampling across phrasings {a} and {b} is not comparable")]
    PhrasingMismatch { a: String, b: String },
    #[error("statistic produced a non-finite value")]
    NonFiniteStatistic,
    #[error("point {point} fell outside the interval [{lo}, {hi}]")]
    PointOutsideInterval { point: f64, lo: f64, hi: f64 },
}

/// What one resampling draw replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleUnit {
    Example,
    PairedExample,
    Cell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub point: f64,
    /// 2.5th percentile of the resample distribution.
    pub lo: f64,
    /// 97.5th percentile of the resample distribution.
    pub hi: f64,
    pub n_resamples: usize,
    pub seed: u64,
    pub unit: ResampleUnit,
}

/// All with-replacement index draws, generated serially up front so that
/// parallel evaluation cannot change which indices a resample sees.
fn index_streams(n: usize, n_resamples: usize, seed: u64, context_label: &str) -> Vec<Vec<u32>> {
    let mut rng = seeded_rng(seed, context_label);
    (0..n_resamples)
        .map(|_| (0..n).map(|_| rng.next_below(n as u64) as u32).collect())
        .collect()
}

/// Linear interpolation between order statistics (the type-7 rule):
/// h = (n − 1)·p, interpolate between the flanking values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95% percentile-bootstrap interval for `statistic` over with-replacement
/// resamples of `data`. The context label keeps streams from being shared
/// across cells or statistics; reuse a label only to reproduce a result.
pub fn bootstrap_ci<T, F>(
    data: &[T],
    statistic: F,
    n_resamples: usize,
    seed: u64,
    context_label: &str,
    unit: ResampleUnit,
) -> Result<BootstrapResult, BootstrapError>
where
    T: Copy + Sync,
    F: Fn(&[T]) -> f64 + Sync,
{
    if data.is_empty() {
        return Err(BootstrapError::EmptyData);
    }
    if n_resamples == 0 {
        return Err(BootstrapError::ZeroResamples);
    }
    let point = statistic(data);
    if !point.is_finite() {
        return Err(BootstrapError::NonFiniteStatistic);
    }

    let streams = index_streams(data.len(), n_resamples, seed, context_label);
    let stats: Vec<f64> = streams
        .par_iter()
        .map(|indices| {
            let resample: Vec<T> = indices.iter().map(|&i| data[i as usize]).collect();
            statistic(&resample)
        })
        .collect();
    if stats.iter().any(|s| !s.is_finite()) {
        return Err(BootstrapError::NonFiniteStatistic);
    }

    let mut sorted = stats;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
    let lo = percentile(&sorted, 0.025);
    let hi = percentile(&sorted, 0.975);
    if !(lo <= point && point <= hi) {
        return Err(BootstrapError::PointOutsideInterval { point, lo, hi });
    }
    Ok(BootstrapResult {
        point,
        lo,
        hi,
        n_resamples,
        seed,
        unit,
    })
}

/// Paired example-level CI on an accuracy drop: resample (correct_a,
/// correct_b) pairs jointly, statistic acc_a − acc_b. Cells elicited under
/// different phrasings are refused; those runs are bootstrapped
/// independently instead.
pub fn paired_drop_ci(
    cell_a: &CellKey,
    cell_b: &CellKey,
    pairs: &[(bool, bool)],
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapResult, BootstrapError> {
    if cell_a.phrasing_id != cell_b.phrasing_id {
        return Err(BootstrapError::PhrasingMismatch {
            a: cell_a.phrasing_id.to_string(),
            b: cell_b.phrasing_id.to_string(),
        });
    }
    let label = format!("{cell_a}|{cell_b}#paired_drop");
    bootstrap_ci(
        pairs,
        |resample| {
            let mut hits_a = 0usize;
            let mut hits_b = 0usize;
            for &(a, b) in resample {
                hits_a += a as usize;
                hits_b += b as usize;
            }
            (hits_a as f64 - hits_b as f64) / resample.len() as f64
        },
        n_resamples,
        seed,
        &label,
        ResampleUnit::PairedExample,
    )
}

/// Example-level CI on prompt-perturbation spread: resample row indices once
/// per draw, apply them to all four non-format_change correctness vectors,
/// recompute max − min accuracy.
pub fn spread_ci(
    context_label: &str,
    per_variant_correct: &BTreeMap<VariantId, Vec<bool>>,
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapResult, BootstrapError> {
    if per_variant_correct.contains_key(&VariantId::FormatChange) {
        return Err(BootstrapError::FormatChangeIncluded);
    }
    let mut vectors: Vec<&[bool]> = Vec::with_capacity(4);
    for variant in VariantId::NON_FORMAT_CHANGE {
        vectors.push(
            per_variant_correct
                .get(&variant)
                .ok_or(BootstrapError::MissingVariant(variant))?,
        );
    }
    let n = vectors[0].len();
    for (variant, vector) in VariantId::NON_FORMAT_CHANGE.iter().zip(&vectors) {
        if vector.len() != n {
            return Err(BootstrapError::MisalignedLengths {
                variant: *variant,
                expected: n,
                got: vector.len(),
            });
        }
    }
    if n == 0 {
        return Err(BootstrapError::EmptyData);
    }
    let rows: Vec<u32> = (0..n as u32).collect();
    bootstrap_ci(
        &rows,
        |resample| {
            let mut max = f64::NEG_INFINITY;
            let mut min = f64::INFINITY;
            for vector in &vectors {
                let hits = resample.iter().filter(|&&r| vector[r as usize]).count();
                let acc = hits as f64 / resample.len() as f64;
                max = max.max(acc);
                min = min.min(acc);
            }
            max - min
        },
        n_resamples,
        seed,
        &format!("{context_label}#spread"),
        ResampleUnit::Example,
    )
}
