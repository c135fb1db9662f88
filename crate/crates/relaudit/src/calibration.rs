//! Confidence calibration: raw and label-set-normalised token confidence,
//! equal-width ECE with reliability-diagram bins, per-cell metric bundles,
//! normalisation-shift summaries, and top-k label-coverage checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{CellKey, TopKDistribution, TranscriptRecord, VariantId};
use crate::extraction::{parse_verbal_confidence, verbal_parse_rate, EvaluatorVerdict, ExtractionError};

pub const DEFAULT_N_BINS: usize = 10;
pub const DEFAULT_VPR_THRESHOLD: f64 = 0.80;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("predicted letter {0:?} is outside the label set")]
    LetterOutsideLabelSet(char),
    #[error("ece requires at least one row")]
    EmptyInput,
    #[error("confidence and outcome lists differ in length ({confidences} vs {outcomes})")]
    LengthMismatch { confidences: usize, outcomes: usize },
    #[error("confidence {0} is outside [0, 1]")]
    ConfidenceOutOfRange(f64),
    #[error("n_bins must be positive")]
    ZeroBins,
    #[error("cell has no records")]
    EmptyCell,
    #[error("records span more than one cell: {0} and {1}")]
    CellMismatch(CellKey, CellKey),
    #[error("no row yields a usable token-confidence pair")]
    NoScorableRows,
    #[error("no record carries a top-k window")]
    NoTopkData,
    #[error("example {0:?} has no verdict entry")]
    MissingVerdict(String),
    #[error("example {0:?} has no parse entry")]
    MissingParseEntry(String),
    #[error("verdict for example {0:?} is unscored")]
    UnscoredVerdict(String),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
}

// ─── token confidence ───

/// The two first-step confidence readings for one answered example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePair {
    /// First-token probability of the predicted letter, 0 if absent.
    pub raw: f64,
    /// Raw probability rescaled by the observed label mass.
    pub normalised: f64,
    pub predicted_letter: char,
    /// Summed window probability over every label letter present.
    pub observed_label_mass: f64,
}

/// Token confidence for one row, or the marker that no label letter appears
/// in the window, in which case the normalised form is undefined and the row
/// is excluded from ECE (zero label mass forces raw = 0 as well).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TokenConfidence {
    Valid(ConfidencePair),
    Degenerate,
}

/// Window mass attributed to `letter`: the bare letter token plus any
/// single-leading-whitespace variant of it, summed. Tokenizers disagree on
/// whether the answer letter carries its preceding space.
fn letter_mass(topk: &TopKDistribution, letter: char) -> f64 {
    let mut mass = 0.0;
    for (token, p) in topk.iter() {
        let mut chars = token.chars();
        let matched = match (chars.next(), chars.next(), chars.next()) {
            (Some(c), None, _) => c == letter,
            (Some(ws), Some(c), None) => ws.is_whitespace() && c == letter,
            _ => false,
        };
        if matched {
            mass += p;
        }
    }
    mass
}

/// Raw and label-set-normalised confidence of the predicted letter, read off
/// one first-token window.
pub fn token_confidence(
    topk: &TopKDistribution,
    predicted_letter: char,
    label_set: &[char],
) -> Result<TokenConfidence, CalibrationError> {
    if !label_set.contains(&predicted_letter) {
        return Err(CalibrationError::LetterOutsideLabelSet(predicted_letter));
    }
    let raw = letter_mass(topk, predicted_letter);
    let mut mass = 0.0;
    for &letter in label_set {
        mass += letter_mass(topk, letter);
    }
    if mass == 0.0 {
        return Ok(TokenConfidence::Degenerate);
    }
    // Stored windows may carry mass up to 1 + 1e-9; clamping keeps both
    // confidences in [0, 1] and preserves normalised ≥ raw.
    let mass = mass.min(1.0);
    let raw = raw.min(mass);
    let normalised = (raw / mass).min(1.0);
    Ok(TokenConfidence::Valid(ConfidencePair {
        raw,
        normalised,
        predicted_letter,
        observed_label_mass: mass,
    }))
}

// ─── expected calibration error ───

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub count: usize,
    pub mean_confidence: f64,
    pub empirical_accuracy: f64,
}

/// Equal-width reliability bins over [0, 1] with edges at i/n_bins, plus the
/// expected calibration error they induce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedReliability {
    pub n_bins: usize,
    pub bins: Vec<BinStats>,
    pub ece: f64,
}

impl BinnedReliability {
    pub fn n(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Per-bin rows as tab-separated text for external plotting.
    pub fn diagram_table(&self) -> String {
        let mut out = String::from("bin_lo\tbin_hi\tcount\tmean_confidence\tempirical_accuracy\n");
        let width = 1.0 / self.n_bins as f64;
        for (i, bin) in self.bins.iter().enumerate() {
            out.push_str(&format!(
                "{:.3}\t{:.3}\t{}\t{:.6}\t{:.6}\n",
                i as f64 * width,
                (i + 1) as f64 * width,
                bin.count,
                bin.mean_confidence,
                bin.empirical_accuracy,
            ));
        }
        out
    }
}

/// A confidence of exactly 1.0 lands in the top (right-closed) bin. Products
/// at interior bin edges resolve by their rounded floating-point value; the
/// test oracle uses the identical expression.
fn bin_index(confidence: f64, n_bins: usize) -> usize {
    ((confidence * n_bins as f64) as usize).min(n_bins - 1)
}

/// Expected calibration error under equal-width binning. Per-bin sums
/// accumulate in input order so results are reproducible bit for bit.
pub fn ece(
    confidences: &[f64],
    correct: &[bool],
    n_bins: usize,
) -> Result<BinnedReliability, CalibrationError> {
    if n_bins == 0 {
        return Err(CalibrationError::ZeroBins);
    }
    if confidences.is_empty() {
        return Err(CalibrationError::EmptyInput);
    }
    if confidences.len() != correct.len() {
        return Err(CalibrationError::LengthMismatch {
            confidences: confidences.len(),
            outcomes: correct.len(),
        });
    }
    let mut conf_sum = vec![0.0f64; n_bins];
    let mut hit_count = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(CalibrationError::ConfidenceOutOfRange(c));
        }
        let b = bin_index(c, n_bins);
        count[b] += 1;
        conf_sum[b] += c;
        hit_count[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    let mut bins = Vec::with_capacity(n_bins);
    let mut total = 0.0f64;
    for b in 0..n_bins {
        if count[b] == 0 {
            bins.push(BinStats {
                count: 0,
                mean_confidence: 0.0,
                empirical_accuracy: 0.0,
            });
            continue;
        }
        let mean_confidence = conf_sum[b] / count[b] as f64;
        let empirical_accuracy = hit_count[b] as f64 / count[b] as f64;
        total += (count[b] as f64 / n) * (empirical_accuracy - mean_confidence).abs();
        bins.push(BinStats {
            count: count[b],
            mean_confidence,
            empirical_accuracy,
        });
    }
    Ok(BinnedReliability {
        n_bins,
        bins,
        ece: total,
    })
}

// ─── per-cell metric bundle ───

/// Verbal-calibration block, present only when the cell clears the verbal
/// parse rate threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbalMetrics {
    pub ece_verbal: f64,
    pub mean_verbal_conf: f64,
    /// Mean verbal confidence minus accuracy, both over parsed rows.
    pub overconf_vs_acc: f64,
    /// Mean verbal confidence minus mean normalised token confidence, both
    /// over parsed rows (token side skips rows without a usable pair).
    pub overconf_vs_token: f64,
    /// ece_verbal minus the cell-level ece_token_norm.
    pub ece_gap: f64,
    pub n_parsed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub cell: CellKey,
    pub n_examples: usize,
    pub accuracy: f64,
    pub ece_token_raw: f64,
    pub ece_token_norm: f64,
    pub mean_token_conf_raw: f64,
    pub mean_token_conf_norm: f64,
    /// Rows whose window held zero label mass.
    pub n_degenerate: usize,
    /// Rows with no first-step window at all.
    pub n_no_topk: usize,
    /// Rows whose verdict carries no predicted letter.
    pub n_no_prediction: usize,
    pub vpr: f64,
    pub verbal: Option<VerbalMetrics>,
    pub verbal_exclusion_reason: Option<String>,
}

/// Verbal-confidence parses for a batch of records, keyed by example id.
pub fn verbal_parses(records: &[TranscriptRecord]) -> BTreeMap<String, Option<f64>> {
    records
        .iter()
        .map(|r| {
            let parsed = r
                .verbal_response_text
                .as_deref()
                .and_then(|text| parse_verbal_confidence(text, r.cell.phrasing_id));
            (r.example_id.clone(), parsed)
        })
        .collect()
}

/// Per-record verdicts of one evaluator, keyed by example id.
pub fn chosen_verdicts(
    records: &[TranscriptRecord],
    evaluator: &str,
) -> Result<BTreeMap<String, EvaluatorVerdict>, CalibrationError> {
    let mut out = BTreeMap::new();
    for record in records {
        let verdict = record
            .verdicts
            .get(evaluator)
            .ok_or_else(|| CalibrationError::MissingVerdict(record.example_id.clone()))?;
        out.insert(record.example_id.clone(), verdict.clone());
    }
    Ok(out)
}

/// Full calibration bundle for one (model, dataset, variant, phrasing) cell.
///
/// Accuracy and token-side fields never depend on `vpr_threshold`; the
/// threshold only gates whether the verbal block is present.
pub fn cell_calibration(
    records: &[TranscriptRecord],
    verdicts: &BTreeMap<String, EvaluatorVerdict>,
    parses: &BTreeMap<String, Option<f64>>,
    vpr_threshold: f64,
) -> Result<CellMetrics, CalibrationError> {
    let first = records.first().ok_or(CalibrationError::EmptyCell)?;
    for record in records {
        if record.cell != first.cell {
            return Err(CalibrationError::CellMismatch(
                first.cell.clone(),
                record.cell.clone(),
            ));
        }
    }

    // Row-aligned series, all in record order so sums are reproducible.
    let mut correct = Vec::with_capacity(records.len());
    let mut pairs: Vec<Option<ConfidencePair>> = Vec::with_capacity(records.len());
    let mut parsed_conf: Vec<Option<f64>> = Vec::with_capacity(records.len());
    let mut n_degenerate = 0usize;
    let mut n_no_topk = 0usize;
    let mut n_no_prediction = 0usize;

    for record in records {
        let verdict = verdicts
            .get(&record.example_id)
            .ok_or_else(|| CalibrationError::MissingVerdict(record.example_id.clone()))?;
        let ok = verdict
            .correct
            .ok_or_else(|| CalibrationError::UnscoredVerdict(record.example_id.clone()))?;
        correct.push(ok);

        let pair = match (&record.first_step_topk, verdict.predicted_letter) {
            (None, _) => {
                n_no_topk += 1;
                None
            }
            (Some(_), None) => {
                n_no_prediction += 1;
                None
            }
            (Some(topk), Some(letter)) => match token_confidence(topk, letter, &record.label_set)? {
                TokenConfidence::Valid(pair) => Some(pair),
                TokenConfidence::Degenerate => {
                    n_degenerate += 1;
                    None
                }
            },
        };
        pairs.push(pair);

        let parsed = parses
            .get(&record.example_id)
            .ok_or_else(|| CalibrationError::MissingParseEntry(record.example_id.clone()))?;
        parsed_conf.push(*parsed);
    }

    let n = records.len();
    let accuracy = correct.iter().filter(|&&ok| ok).count() as f64 / n as f64;

    let mut raw_confs = Vec::new();
    let mut norm_confs = Vec::new();
    let mut token_correct = Vec::new();
    for (pair, &ok) in pairs.iter().zip(&correct) {
        if let Some(pair) = pair {
            raw_confs.push(pair.raw);
            norm_confs.push(pair.normalised);
            token_correct.push(ok);
        }
    }
    if raw_confs.is_empty() {
        return Err(CalibrationError::NoScorableRows);
    }
    let ece_token_raw = ece(&raw_confs, &token_correct, DEFAULT_N_BINS)?.ece;
    let ece_token_norm = ece(&norm_confs, &token_correct, DEFAULT_N_BINS)?.ece;
    let mean_token_conf_raw = raw_confs.iter().sum::<f64>() / raw_confs.len() as f64;
    let mean_token_conf_norm = norm_confs.iter().sum::<f64>() / norm_confs.len() as f64;

    let vpr = verbal_parse_rate(records)?;

    let mut verbal = None;
    let mut verbal_exclusion_reason = None;
    if vpr >= vpr_threshold {
        let mut verbal_confs = Vec::new();
        let mut verbal_correct = Vec::new();
        let mut parsed_token_norm = Vec::new();
        for ((parsed, &ok), pair) in parsed_conf.iter().zip(&correct).zip(&pairs) {
            if let Some(conf) = parsed {
                verbal_confs.push(*conf);
                verbal_correct.push(ok);
                if let Some(pair) = pair {
                    parsed_token_norm.push(pair.normalised);
                }
            }
        }
        let n_parsed = verbal_confs.len();
        let ece_verbal = ece(&verbal_confs, &verbal_correct, DEFAULT_N_BINS)?.ece;
        let mean_verbal_conf = verbal_confs.iter().sum::<f64>() / n_parsed as f64;
        let parsed_accuracy =
            verbal_correct.iter().filter(|&&ok| ok).count() as f64 / n_parsed as f64;
        let mean_parsed_token_norm = if parsed_token_norm.is_empty() {
            f64::NAN
        } else {
            parsed_token_norm.iter().sum::<f64>() / parsed_token_norm.len() as f64
        };
        verbal = Some(VerbalMetrics {
            ece_verbal,
            mean_verbal_conf,
            overconf_vs_acc: mean_verbal_conf - parsed_accuracy,
            overconf_vs_token: mean_verbal_conf - mean_parsed_token_norm,
            ece_gap: ece_verbal - ece_token_norm,
            n_parsed,
        });
    } else {
        verbal_exclusion_reason = Some(format!(
            "verbal parse rate {vpr:.3} below threshold {vpr_threshold:.3}"
        ));
    }

    Ok(CellMetrics {
        cell: first.cell.clone(),
        n_examples: n,
        accuracy,
        ece_token_raw,
        ece_token_norm,
        mean_token_conf_raw,
        mean_token_conf_norm,
        n_degenerate,
        n_no_topk,
        n_no_prediction,
        vpr,
        verbal,
        verbal_exclusion_reason,
    })
}

// ─── normalisation shift ───

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSummary {
    pub n_cells: usize,
    pub mean_abs: f64,
    pub median_abs: f64,
    pub max_abs: f64,
    /// Fraction of cells with |Δ| strictly above 0.05.
    pub frac_gt_005: f64,
    /// Fraction of cells with |Δ| strictly above 0.20.
    pub frac_gt_020: f64,
}

/// How much switching the token-confidence definition moves per-cell ECE,
/// where Δ = ece_token_raw − ece_token_norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalisationShift {
    pub overall: ShiftSummary,
    pub per_variant: BTreeMap<VariantId, ShiftSummary>,
}

fn summarise_abs_shifts(mut abs: Vec<f64>) -> ShiftSummary {
    let n = abs.len();
    let mean_abs = abs.iter().sum::<f64>() / n as f64;
    abs.sort_by(|a, b| a.partial_cmp(b).expect("shift values are finite"));
    let median_abs = if n % 2 == 1 {
        abs[n / 2]
    } else {
        (abs[n / 2 - 1] + abs[n / 2]) / 2.0
    };
    let max_abs = *abs.last().expect("nonempty");
    let frac_gt_005 = abs.iter().filter(|&&d| d > 0.05).count() as f64 / n as f64;
    let frac_gt_020 = abs.iter().filter(|&&d| d > 0.20).count() as f64 / n as f64;
    ShiftSummary {
        n_cells: n,
        mean_abs,
        median_abs,
        max_abs,
        frac_gt_005,
        frac_gt_020,
    }
}

pub fn normalisation_shift(cells: &[CellMetrics]) -> Result<NormalisationShift, CalibrationError> {
    if cells.is_empty() {
        return Err(CalibrationError::EmptyInput);
    }
    let abs_all: Vec<f64> = cells
        .iter()
        .map(|c| (c.ece_token_raw - c.ece_token_norm).abs())
        .collect();
    let mut by_variant: BTreeMap<VariantId, Vec<f64>> = BTreeMap::new();
    for (cell, &delta) in cells.iter().zip(&abs_all) {
        by_variant
            .entry(cell.cell.variant_id)
            .or_default()
            .push(delta);
    }
    Ok(NormalisationShift {
        overall: summarise_abs_shifts(abs_all),
        per_variant: by_variant
            .into_iter()
            .map(|(v, deltas)| (v, summarise_abs_shifts(deltas)))
            .collect(),
    })
}

// ─── top-k label coverage ───

/// Share of examples whose window holds every label letter, and the mean
/// bound-based captured-mass ratio. For a window missing m labels the ratio
/// charges each missing label the smallest in-window probability:
/// mass / (mass + m · min_prob), an upper bound on what truncation hides.
pub fn topk_coverage(records: &[TranscriptRecord]) -> Result<(f64, f64), CalibrationError> {
    let mut n_windows = 0usize;
    let mut n_full = 0usize;
    let mut ratio_sum = 0.0f64;
    for record in records {
        let Some(topk) = &record.first_step_topk else {
            continue;
        };
        n_windows += 1;
        let mut mass = 0.0f64;
        let mut missing = 0usize;
        for &letter in &record.label_set {
            let m = letter_mass(topk, letter);
            if m > 0.0 {
                mass += m;
            } else {
                missing += 1;
            }
        }
        if missing == 0 {
            n_full += 1;
        }
        let floor = topk.min_prob().unwrap_or(0.0);
        let denominator = mass + missing as f64 * floor;
        ratio_sum += if denominator == 0.0 {
            0.0
        } else {
            (mass / denominator).min(1.0)
        };
    }
    if n_windows == 0 {
        return Err(CalibrationError::NoTopkData);
    }
    Ok((
        n_full as f64 / n_windows as f64,
        ratio_sum / n_windows as f64,
    ))
}
