//! Prompt-perturbation robustness: per-cell accuracy spread and the
//! size-spread Spearman correlation panel.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::datamodel::VariantId;
use crate::rng::seeded_rng;

/// Monte-Carlo permutation count when exact enumeration is out of reach.
pub const MC_PERMUTATIONS: u64 = 10_000;
/// Largest n for which the permutation p-value enumerates all n! orderings.
pub const EXACT_PERM_LIMIT: usize = 10;
/// Seed context for the Monte-Carlo permutation stream.
const PERM_CONTEXT: &str = "spearman_permutation";
const PERM_SEED: u64 = 42;

#[derive(Debug, Error)]
pub enum RobustnessError {
    #[error("variant {0} is missing from the accuracy map")]
    MissingVariant(VariantId),
    #[error("format_change must not enter spread")]
    FormatChangeIncluded,
    #[error("correlation requires at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("input lengths differ ({x} vs {y})")]
    LengthMismatch { x: usize, y: usize },
    #[error("zero rank variance: one input is constant")]
    ZeroRankVariance,
    #[error("input contains a non-finite value")]
    NonFiniteInput,
    #[error("no size configured for model {0:?}")]
    MissingModelSize(String),
}

// ─── spread ───

/// Best-minus-worst accuracy over the four comparable prompt variants.
/// format_change is excluded by construction: its answer sits at the end of a
/// reasoning trace, so first-token scoring measures the evaluator, not the
/// prompt sensitivity.
pub fn spread(per_variant_accuracy: &BTreeMap<VariantId, f64>) -> Result<f64, RobustnessError> {
    if per_variant_accuracy.contains_key(&VariantId::FormatChange) {
        return Err(RobustnessError::FormatChangeIncluded);
    }
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    for variant in VariantId::NON_FORMAT_CHANGE {
        let &acc = per_variant_accuracy
            .get(&variant)
            .ok_or(RobustnessError::MissingVariant(variant))?;
        if !acc.is_finite() {
            return Err(RobustnessError::NonFiniteInput);
        }
        max = max.max(acc);
        min = min.min(acc);
    }
    Ok(max - min)
}

/// One model-dataset point of the robustness panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadRecord {
    pub model_id: String,
    pub dataset_id: String,
    pub per_variant_accuracy: BTreeMap<VariantId, f64>,
    pub spread: f64,
}

impl SpreadRecord {
    pub fn new(
        model_id: impl Into<String>,
        dataset_id: impl Into<String>,
        per_variant_accuracy: BTreeMap<VariantId, f64>,
    ) -> Result<Self, RobustnessError> {
        let spread = spread(&per_variant_accuracy)?;
        Ok(SpreadRecord {
            model_id: model_id.into(),
            dataset_id: dataset_id.into(),
            per_variant_accuracy,
            spread,
        })
    }
}

// ─── spearman ───

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho: f64,
    /// Two-sided p from the t-approximation with n − 2 degrees of freedom.
    pub p_value_t: f64,
    /// Two-sided permutation p: exact enumeration for n ≤ 10, Monte-Carlo
    /// beyond that.
    pub p_value_perm: Option<f64>,
    pub n: usize,
}

/// Midranks doubled and centred: 2·rank − (n + 1). Ranks sum to n(n+1)/2
/// whatever the ties, so the doubled deviations are exact integers and every
/// downstream permutation tally is exact integer arithmetic.
fn scaled_rank_deviations(values: &[f64]) -> Result<Vec<i64>, RobustnessError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(RobustnessError::NonFiniteInput);
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut doubled_ranks = vec![0i64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Tie block spanning positions i..=j gets the average rank; doubling
        // (i+1 + j+1) keeps it integral.
        let doubled = (i + j + 2) as i64;
        for &idx in &order[i..=j] {
            doubled_ranks[idx] = doubled;
        }
        i = j + 1;
    }
    let shift = (n + 1) as i64;
    Ok(doubled_ranks.into_iter().map(|r| r - shift).collect())
}

fn cross(dx: &[i64], dy: &[i64]) -> i64 {
    dx.iter().zip(dy).map(|(a, b)| a * b).sum()
}

/// Exact two-sided permutation p-value: fraction of all n! orderings of `dy`
/// whose |cross product| reaches the observed one. Heap's algorithm permutes
/// in place; integer tallies make every comparison exact.
fn exact_permutation_p(dx: &[i64], dy: &[i64], observed_abs: i64) -> f64 {
    let n = dx.len();
    let mut dy = dy.to_vec();
    let mut counters = vec![0usize; n];
    let mut total: u64 = 1;
    let mut hits: u64 = (cross(dx, &dy).abs() >= observed_abs) as u64;
    let mut i = 0;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                dy.swap(0, i);
            } else {
                dy.swap(counters[i], i);
            }
            total += 1;
            hits += (cross(dx, &dy).abs() >= observed_abs) as u64;
            counters[i] += 1;
            i = 0;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

/// Monte-Carlo permutation p-value with the add-one correction, drawn from
/// the harness-wide derived stream so reruns agree bit for bit.
fn monte_carlo_permutation_p(dx: &[i64], dy: &[i64], observed_abs: i64) -> f64 {
    let mut rng = seeded_rng(PERM_SEED, PERM_CONTEXT);
    let mut shuffled = dy.to_vec();
    let mut hits: u64 = 0;
    for _ in 0..MC_PERMUTATIONS {
        for i in 0..shuffled.len() {
            let j = i + rng.next_below((shuffled.len() - i) as u64) as usize;
            shuffled.swap(i, j);
        }
        hits += (cross(dx, &shuffled).abs() >= observed_abs) as u64;
    }
    (hits + 1) as f64 / (MC_PERMUTATIONS + 1) as f64
}

/// Spearman rank correlation with midrank tie handling, plus two p-values:
/// the t-approximation and a permutation test.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<CorrelationResult, RobustnessError> {
    if x.len() != y.len() {
        return Err(RobustnessError::LengthMismatch { x: x.len(), y: y.len() });
    }
    let n = x.len();
    if n < 3 {
        return Err(RobustnessError::TooFewPoints(n));
    }
    let dx = scaled_rank_deviations(x)?;
    let dy = scaled_rank_deviations(y)?;
    let sx2 = cross(&dx, &dx);
    let sy2 = cross(&dy, &dy);
    if sx2 == 0 || sy2 == 0 {
        return Err(RobustnessError::ZeroRankVariance);
    }
    let observed = cross(&dx, &dy);
    // One sqrt of the product: exact for perfect squares, so a perfect
    // monotone relation yields rho = ±1.0 with no rounding residue.
    let rho = observed as f64 / (sx2 as f64 * sy2 as f64).sqrt();

    let df = (n - 2) as f64;
    let p_value_t = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df ≥ 1");
        (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
    };

    let p_value_perm = if n <= EXACT_PERM_LIMIT {
        exact_permutation_p(&dx, &dy, observed.abs())
    } else {
        monte_carlo_permutation_p(&dx, &dy, observed.abs())
    };

    Ok(CorrelationResult {
        rho,
        p_value_t,
        p_value_perm: Some(p_value_perm),
        n,
    })
}

// ─── size-spread panel ───

/// One CorrelationResult per dataset: model parameter count (billions,
/// supplied as configuration) against prompt-perturbation spread.
pub fn size_spread_panel(
    spreads: &[SpreadRecord],
    sizes: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, CorrelationResult>, RobustnessError> {
    let mut by_dataset: BTreeMap<&str, Vec<&SpreadRecord>> = BTreeMap::new();
    for record in spreads {
        by_dataset.entry(&record.dataset_id).or_default().push(record);
    }
    let mut panel = BTreeMap::new();
    for (dataset, records) in by_dataset {
        let mut x = Vec::with_capacity(records.len());
        let mut y = Vec::with_capacity(records.len());
        for record in records {
            let &size = sizes
                .get(&record.model_id)
                .ok_or_else(|| RobustnessError::MissingModelSize(record.model_id.clone()))?;
            x.push(size);
            y.push(record.spread);
        }
        panel.insert(dataset.to_string(), spearman(&x, &y)?);
    }
    Ok(panel)
}

// ─── tabular emission ───

/// Model-by-dataset spread grid. With sizes supplied, rows carry the size
/// column and sort by it; otherwise rows sort by model id.
pub fn spread_table(spreads: &[SpreadRecord], sizes: Option<&BTreeMap<String, f64>>) -> String {
    let mut datasets: Vec<&str> = spreads.iter().map(|r| r.dataset_id.as_str()).collect();
    datasets.sort_unstable();
    datasets.dedup();
    let mut models: Vec<&str> = spreads.iter().map(|r| r.model_id.as_str()).collect();
    models.sort_unstable();
    models.dedup();
    if let Some(sizes) = sizes {
        models.sort_by(|a, b| {
            let ka = sizes.get(*a).copied().unwrap_or(f64::INFINITY);
            let kb = sizes.get(*b).copied().unwrap_or(f64::INFINITY);
            ka.partial_cmp(&kb).expect("finite sizes").then(a.cmp(b))
        });
    }

    let mut by_key: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    for record in spreads {
        by_key.insert((&record.model_id, &record.dataset_id), record.spread);
    }

    let mut out = String::from("model");
    if sizes.is_some() {
        out.push_str("\tsize_b");
    }
    for dataset in &datasets {
        let _ = write!(out, "\t{dataset}");
    }
    out.push('\n');
    for model in &models {
        out.push_str(model);
        if let Some(sizes) = sizes {
            match sizes.get(*model) {
                Some(size) => {
                    let _ = write!(out, "\t{size:.1}");
                }
                None => out.push_str("\t-"),
            }
        }
        for dataset in &datasets {
            match by_key.get(&(*model, *dataset)) {
                Some(s) => {
                    let _ = write!(out, "\t{s:.3}");
                }
                None => out.push_str("\t-"),
            }
        }
        out.push('\n');
    }
    out
}

/// Dataset-by-statistic correlation panel table.
pub fn panel_table(panel: &BTreeMap<String, CorrelationResult>) -> String {
    let mut out = String::from("dataset\trho\tp_t\tp_perm\tn\n");
    for (dataset, result) in panel {
        let perm = match result.p_value_perm {
            Some(p) => format!("{p:.3}"),
            None => "-".to_string(),
        };
        let _ = writeln!(
            out,
            "{dataset}\t{rho:+.3}\t{p:.3}\t{perm}\t{n}",
            rho = result.rho,
            p = result.p_value_t,
            n = result.n,
        );
    }
    out
}
