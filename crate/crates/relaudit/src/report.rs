//! Report assembly: the gap-recovery table, VPR threshold sensitivity, grid
//! and panel tables, reliability-diagram exports, the six-item release
//! checklist, and deterministic emission in three formats.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bootstrap::BootstrapResult;
use crate::calibration::{
    cell_calibration, chosen_verdicts, ece, token_confidence, verbal_parses, CalibrationError,
    CellMetrics, NormalisationShift, TokenConfidence, DEFAULT_N_BINS,
};
use crate::datamodel::{CellKey, PhrasingId, TranscriptRecord, VariantId};
use crate::extraction::EvaluatorVerdict;
use crate::robustness::{CorrelationResult, SpreadRecord};

/// VPR inclusion thresholds swept by the sensitivity table.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.70, 0.80, 0.90];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("gap recovery needs a positive gap, got repaired baseline {nonfc_mean} <= first-char {firstchar}")]
    NonPositiveGap { nonfc_mean: f64, firstchar: f64 },
    #[error("gap recovery table needs at least one row")]
    EmptyTable,
    #[error("reliability diagram mixes cells {expected} and {got}")]
    MixedDiagramCells { expected: String, got: String },
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("writing report files: {0}")]
    Io(#[from] std::io::Error),
    #[error("serializing report: {0}")]
    Serialize(String),
}

// ─── gap recovery ───

/// Fraction of the evaluator-induced accuracy gap a repair path recovers,
/// as a percentage. Values above 100 mean the repair overshoots the
/// non-format-change baseline.
pub fn gap_recovery(nonfc_mean: f64, firstchar: f64, repaired: f64) -> Result<f64, ReportError> {
    if nonfc_mean <= firstchar {
        return Err(ReportError::NonPositiveGap {
            nonfc_mean,
            firstchar,
        });
    }
    Ok(100.0 * (repaired - firstchar) / (nonfc_mean - firstchar))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRecoveryInput {
    pub model_id: String,
    pub nonfc_mean: f64,
    pub firstchar: f64,
    pub repaired_regex: f64,
    pub repaired_constrained: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRecoveryRow {
    pub model_id: String,
    pub nonfc_mean: f64,
    pub firstchar: f64,
    pub repaired_regex: f64,
    pub recovery_regex: f64,
    pub repaired_constrained: f64,
    pub recovery_constrained: f64,
}

/// Per-model recovery rows plus both meaningful aggregates. The pooled route
/// applies `gap_recovery` to the column means; the per-model route averages
/// the individual recovery percentages. They disagree whenever per-model gap
/// widths differ, so the table carries both instead of picking one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRecoveryTable {
    pub rows: Vec<GapRecoveryRow>,
    pub mean_nonfc: f64,
    pub mean_firstchar: f64,
    pub mean_regex: f64,
    pub mean_constrained: f64,
    pub pooled_recovery_regex: f64,
    pub pooled_recovery_constrained: f64,
    pub mean_recovery_regex: f64,
    pub mean_recovery_constrained: f64,
}

pub fn gap_recovery_table(inputs: &[GapRecoveryInput]) -> Result<GapRecoveryTable, ReportError> {
    if inputs.is_empty() {
        return Err(ReportError::EmptyTable);
    }
    let mut rows = Vec::with_capacity(inputs.len());
    for input in inputs {
        rows.push(GapRecoveryRow {
            model_id: input.model_id.clone(),
            nonfc_mean: input.nonfc_mean,
            firstchar: input.firstchar,
            repaired_regex: input.repaired_regex,
            recovery_regex: gap_recovery(input.nonfc_mean, input.firstchar, input.repaired_regex)?,
            repaired_constrained: input.repaired_constrained,
            recovery_constrained: gap_recovery(
                input.nonfc_mean,
                input.firstchar,
                input.repaired_constrained,
            )?,
        });
    }
    let n = rows.len() as f64;
    let mean_nonfc = rows.iter().map(|r| r.nonfc_mean).sum::<f64>() / n;
    let mean_firstchar = rows.iter().map(|r| r.firstchar).sum::<f64>() / n;
    let mean_regex = rows.iter().map(|r| r.repaired_regex).sum::<f64>() / n;
    let mean_constrained = rows.iter().map(|r| r.repaired_constrained).sum::<f64>() / n;
    Ok(GapRecoveryTable {
        pooled_recovery_regex: gap_recovery(mean_nonfc, mean_firstchar, mean_regex)?,
        pooled_recovery_constrained: gap_recovery(mean_nonfc, mean_firstchar, mean_constrained)?,
        mean_recovery_regex: rows.iter().map(|r| r.recovery_regex).sum::<f64>() / n,
        mean_recovery_constrained: rows.iter().map(|r| r.recovery_constrained).sum::<f64>() / n,
        rows,
        mean_nonfc,
        mean_firstchar,
        mean_regex,
        mean_constrained,
    })
}

// ─── threshold sensitivity ───

/// One cell's records together with the evaluator verdicts and verbal parses
/// the metrics are computed from, so thresholds can be re-applied later.
#[derive(Debug, Clone)]
pub struct ScoredCell {
    pub records: Vec<TranscriptRecord>,
    pub verdicts: BTreeMap<String, EvaluatorVerdict>,
    pub parses: BTreeMap<String, Option<f64>>,
}

impl ScoredCell {
    /// Bundles records with one evaluator's verdicts and the verbal parses.
    pub fn from_records(
        records: Vec<TranscriptRecord>,
        evaluator: &str,
    ) -> Result<Self, ReportError> {
        let verdicts = chosen_verdicts(&records, evaluator)?;
        let parses = verbal_parses(&records);
        Ok(ScoredCell {
            records,
            verdicts,
            parses,
        })
    }

    pub fn metrics(&self, vpr_threshold: f64) -> Result<CellMetrics, CalibrationError> {
        cell_calibration(&self.records, &self.verdicts, &self.parses, vpr_threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCell {
    pub threshold: f64,
    /// Mean overconf_vs_acc over this model's contributing cells; absent when
    /// no cell clears the threshold.
    pub mean_overconf: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub model_id: String,
    pub cells: Vec<ThresholdCell>,
}

/// Re-applies each VPR threshold to every cell and reports the per-model
/// mean signed verbal overconfidence with the contributing-cell count.
pub fn threshold_sensitivity(
    cells: &[ScoredCell],
    thresholds: &[f64],
) -> Result<Vec<ThresholdRow>, ReportError> {
    let mut per_model: BTreeMap<String, Vec<(f64, usize)>> = BTreeMap::new();
    for cell in cells {
        let model_id = cell
            .records
            .first()
            .ok_or(CalibrationError::EmptyCell)?
            .cell
            .model_id
            .clone();
        let sums = per_model
            .entry(model_id)
            .or_insert_with(|| vec![(0.0, 0); thresholds.len()]);
        for (i, &threshold) in thresholds.iter().enumerate() {
            if let Some(verbal) = cell.metrics(threshold)?.verbal {
                sums[i].0 += verbal.overconf_vs_acc;
                sums[i].1 += 1;
            }
        }
    }
    Ok(per_model
        .into_iter()
        .map(|(model_id, sums)| ThresholdRow {
            model_id,
            cells: sums
                .into_iter()
                .zip(thresholds)
                .map(|((sum, n), &threshold)| ThresholdCell {
                    threshold,
                    mean_overconf: (n > 0).then(|| sum / n as f64),
                    n,
                })
                .collect(),
        })
        .collect())
}

// ─── report body ───

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VprEntry {
    pub cell: CellKey,
    pub vpr: f64,
    pub below_threshold: bool,
}

/// Flat VPR grid entries, sorted by cell key for stable rendering.
pub fn vpr_entries(cells: &[CellMetrics], threshold: f64) -> Vec<VprEntry> {
    let mut entries: Vec<VprEntry> = cells
        .iter()
        .map(|c| VprEntry {
            cell: c.cell.clone(),
            vpr: c.vpr,
            below_threshold: c.vpr < threshold,
        })
        .collect();
    entries.sort_by_cached_key(|e| e.cell.to_string());
    entries
}

/// Pooled per-bin reliability rows for one (model, dataset, phrasing) triple;
/// prompt variants are pooled, which is why this is not keyed by cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityDiagram {
    pub model_id: String,
    pub dataset_id: String,
    pub phrasing_id: PhrasingId,
    pub token: crate::calibration::BinnedReliability,
    pub verbal: Option<crate::calibration::BinnedReliability>,
}

pub fn reliability_diagram(
    records: &[TranscriptRecord],
    verdicts: &BTreeMap<String, EvaluatorVerdict>,
    parses: &BTreeMap<String, Option<f64>>,
) -> Result<ReliabilityDiagram, ReportError> {
    let first = records.first().ok_or(CalibrationError::EmptyCell)?;
    let mut norm_confs = Vec::new();
    let mut norm_correct = Vec::new();
    let mut verbal_confs = Vec::new();
    let mut verbal_correct = Vec::new();
    for record in records {
        if record.cell.model_id != first.cell.model_id
            || record.cell.dataset_id != first.cell.dataset_id
            || record.cell.phrasing_id != first.cell.phrasing_id
        {
            return Err(ReportError::MixedDiagramCells {
                expected: first.cell.to_string(),
                got: record.cell.to_string(),
            });
        }
        let verdict = verdicts
            .get(&record.example_id)
            .ok_or_else(|| CalibrationError::MissingVerdict(record.example_id.clone()))?;
        let ok = verdict
            .correct
            .ok_or_else(|| CalibrationError::UnscoredVerdict(record.example_id.clone()))?;
        if let (Some(topk), Some(letter)) = (&record.first_step_topk, verdict.predicted_letter) {
            if let TokenConfidence::Valid(pair) = token_confidence(topk, letter, &record.label_set)?
            {
                norm_confs.push(pair.normalised);
                norm_correct.push(ok);
            }
        }
        let parsed = parses
            .get(&record.example_id)
            .ok_or_else(|| CalibrationError::MissingParseEntry(record.example_id.clone()))?;
        if let Some(conf) = parsed {
            verbal_confs.push(*conf);
            verbal_correct.push(ok);
        }
    }
    let token = ece(&norm_confs, &norm_correct, DEFAULT_N_BINS)?;
    let verbal = if verbal_confs.is_empty() {
        None
    } else {
        Some(ece(&verbal_confs, &verbal_correct, DEFAULT_N_BINS)?)
    };
    Ok(ReliabilityDiagram {
        model_id: first.cell.model_id.clone(),
        dataset_id: first.cell.dataset_id.clone(),
        phrasing_id: first.cell.phrasing_id,
        token,
        verbal,
    })
}

/// A CI-bearing quantity with its full resampling recipe attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportedInterval {
    pub context: String,
    pub result: BootstrapResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistItem {
    pub number: u8,
    pub title: String,
    pub satisfied: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AuditReport {
    pub cells: Vec<CellMetrics>,
    pub gap_recovery_table: Option<GapRecoveryTable>,
    pub shift_summary: Option<NormalisationShift>,
    pub vpr_matrix: Vec<VprEntry>,
    pub spread_table: Vec<SpreadRecord>,
    /// Model sizes in billions of parameters, when known; orders the spread
    /// table and feeds the correlation panel.
    pub model_sizes: BTreeMap<String, f64>,
    pub panel: BTreeMap<String, CorrelationResult>,
    pub threshold_table: Vec<ThresholdRow>,
    pub intervals: Vec<ReportedInterval>,
    pub reliability: Vec<ReliabilityDiagram>,
    /// Evaluator names attached to every scored table.
    pub evaluators: Vec<String>,
    pub raw_generations_retained: bool,
    pub checklist: Vec<ChecklistItem>,
}

impl AuditReport {
    /// Fills the checklist from the assembled report content.
    pub fn with_checklist(mut self) -> Self {
        self.checklist = checklist(&self);
        self
    }
}

// ─── checklist ───

/// The six release-disclosure items, filled mechanically from the report.
pub fn checklist(report: &AuditReport) -> Vec<ChecklistItem> {
    let mut items = Vec::with_capacity(6);

    let (shift_ok, shift_detail) = match &report.shift_summary {
        Some(shift) => (
            true,
            format!(
                "token ECE uses the label-set-normalised definition; the raw-probability \
                 alternative shifts per-cell ECE by mean |delta| {:.3} (max {:.3}) over {} cells",
                shift.overall.mean_abs, shift.overall.max_abs, shift.overall.n_cells
            ),
        ),
        None => (
            false,
            "normalisation shift between the two token-ECE definitions was not computed".into(),
        ),
    };
    items.push(ChecklistItem {
        number: 1,
        title: "Token-ECE normalisation disclosed with alternate-definition shift".into(),
        satisfied: shift_ok,
        detail: shift_detail,
    });

    items.push(ChecklistItem {
        number: 2,
        title: "Evaluator logic named for every scored table".into(),
        satisfied: !report.evaluators.is_empty(),
        detail: if report.evaluators.is_empty() {
            "no evaluator names recorded".into()
        } else {
            format!("scored tables carry evaluators: {}", report.evaluators.join(", "))
        },
    });

    items.push(ChecklistItem {
        number: 3,
        title: "Raw generations retained for re-scoring".into(),
        satisfied: report.raw_generations_retained,
        detail: if report.raw_generations_retained {
            "full generation text is stored alongside every verdict".into()
        } else {
            "raw generations were dropped; verdicts cannot be re-derived".into()
        },
    });

    let excluded = report
        .cells
        .iter()
        .filter(|c| c.verbal_exclusion_reason.is_some())
        .count();
    let all_annotated = report
        .cells
        .iter()
        .all(|c| c.verbal.is_some() || c.verbal_exclusion_reason.is_some());
    items.push(ChecklistItem {
        number: 4,
        title: "Per-cell VPR with footnoted exclusions and a signed quantity".into(),
        satisfied: all_annotated,
        detail: format!(
            "{} cells carry a VPR; {} fall below threshold, each with its exclusion reason; \
             signed overconf_vs_acc accompanies every included cell",
            report.cells.len(),
            excluded
        ),
    });

    let mut phrasings: Vec<&str> = report
        .cells
        .iter()
        .map(|c| c.cell.phrasing_id.as_str())
        .collect();
    phrasings.sort_unstable();
    phrasings.dedup();
    items.push(ChecklistItem {
        number: 5,
        title: "Verbal elicitation replicated across phrasings".into(),
        satisfied: phrasings.len() >= 2,
        detail: match phrasings.len() {
            0 => "no cells present".into(),
            1 => "1 phrasing — replication missing".into(),
            n => format!("{n} phrasings run: {}", phrasings.join(", ")),
        },
    });

    items.push(ChecklistItem {
        number: 6,
        title: "Perturbation spread reported alongside accuracy".into(),
        satisfied: !report.spread_table.is_empty(),
        detail: if report.spread_table.is_empty() {
            "no spread rows present".into()
        } else {
            format!(
                "spread reported for {} model-dataset groups",
                report.spread_table.len()
            )
        },
    });

    items
}

// ─── emission ───

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    MarkdownTables,
    CsvBundle,
    Json,
}

fn fmt_frac(x: f64) -> String {
    format!("{x:.3}")
}

fn fmt_pct(x: f64) -> String {
    format!("{x:.1}%")
}

fn vpr_cell_text(vpr: f64, below: bool) -> String {
    if below {
        format!("{vpr:.3} ×")
    } else {
        format!("{vpr:.3}")
    }
}

fn threshold_cell_text(cell: &ThresholdCell) -> String {
    match cell.mean_overconf {
        Some(mean) => format!("{:+.3} [{}]", mean, cell.n),
        None => format!("n/a [{}]", cell.n),
    }
}

/// Human-readable tables; one decimal for percentages, three for fractions.
pub fn render_markdown(report: &AuditReport) -> String {
    let mut out = String::new();
    out.push_str("# Reliability audit report\n");

    if !report.cells.is_empty() {
        out.push_str("\n## Cell metrics\n\n");
        out.push_str(
            "| cell | n | accuracy | ece_token_raw | ece_token_norm | vpr | verbal | note |\n",
        );
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        let mut cells: Vec<&CellMetrics> = report.cells.iter().collect();
        cells.sort_by_cached_key(|c| c.cell.to_string());
        for c in cells {
            let verbal = match &c.verbal {
                Some(v) => format!(
                    "ece_verbal {} overconf_vs_acc {:+.3} (n={})",
                    fmt_frac(v.ece_verbal),
                    v.overconf_vs_acc,
                    v.n_parsed
                ),
                None => "excluded".into(),
            };
            let note = c.verbal_exclusion_reason.clone().unwrap_or_default();
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                c.cell,
                c.n_examples,
                fmt_frac(c.accuracy),
                fmt_frac(c.ece_token_raw),
                fmt_frac(c.ece_token_norm),
                fmt_frac(c.vpr),
                verbal,
                note
            );
        }
    }

    if let Some(table) = &report.gap_recovery_table {
        out.push_str("\n## Answer-extraction gap recovery\n\n");
        out.push_str(
            "| model | nonfc_mean | first_char | regex | recovery | constrained | recovery |\n",
        );
        out.push_str("|---|---|---|---|---|---|---|\n");
        for row in &table.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} |",
                row.model_id,
                fmt_frac(row.nonfc_mean),
                fmt_frac(row.firstchar),
                fmt_frac(row.repaired_regex),
                fmt_pct(row.recovery_regex),
                fmt_frac(row.repaired_constrained),
                fmt_pct(row.recovery_constrained),
            );
        }
        let _ = writeln!(
            out,
            "| mean (pooled) | {} | {} | {} | {} | {} | {} |",
            fmt_frac(table.mean_nonfc),
            fmt_frac(table.mean_firstchar),
            fmt_frac(table.mean_regex),
            fmt_pct(table.pooled_recovery_regex),
            fmt_frac(table.mean_constrained),
            fmt_pct(table.pooled_recovery_constrained),
        );
        let _ = writeln!(
            out,
            "| mean (per-model) | | | | {} | | {} |",
            fmt_pct(table.mean_recovery_regex),
            fmt_pct(table.mean_recovery_constrained),
        );
    }

    if let Some(shift) = &report.shift_summary {
        out.push_str("\n## Token-ECE definition shift\n\n");
        out.push_str("| scope | n_cells | mean_abs | median_abs | max_abs | frac>0.05 | frac>0.20 |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        let mut write_row = |scope: &str, s: &crate::calibration::ShiftSummary| {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} |",
                scope,
                s.n_cells,
                fmt_frac(s.mean_abs),
                fmt_frac(s.median_abs),
                fmt_frac(s.max_abs),
                fmt_frac(s.frac_gt_005),
                fmt_frac(s.frac_gt_020),
            );
        };
        write_row("overall", &shift.overall);
        for (variant, summary) in &shift.per_variant {
            write_row(variant.as_str(), summary);
        }
    }

    if !report.vpr_matrix.is_empty() {
        out.push_str("\n## Verbal parse rate grid\n");
        // (model, phrasing) -> dataset -> variant -> entry
        let mut grids: BTreeMap<(String, String), BTreeMap<String, BTreeMap<VariantId, &VprEntry>>> =
            BTreeMap::new();
        for entry in &report.vpr_matrix {
            grids
                .entry((
                    entry.cell.model_id.clone(),
                    entry.cell.phrasing_id.as_str().to_string(),
                ))
                .or_default()
                .entry(entry.cell.dataset_id.clone())
                .or_default()
                .insert(entry.cell.variant_id, entry);
        }
        for ((model, phrasing), by_dataset) in &grids {
            let variants: Vec<VariantId> = VariantId::ALL
                .into_iter()
                .filter(|v| by_dataset.values().any(|row| row.contains_key(v)))
                .collect();
            let _ = write!(out, "\n### {model} ({phrasing})\n\n| dataset |");
            for v in &variants {
                let _ = write!(out, " {} |", v.as_str());
            }
            out.push_str("\n|---|");
            out.push_str(&"---|".repeat(variants.len()));
            out.push('\n');
            for (dataset, row) in by_dataset {
                let _ = write!(out, "| {dataset} |");
                for v in &variants {
                    match row.get(v) {
                        Some(e) => {
                            let _ = write!(out, " {} |", vpr_cell_text(e.vpr, e.below_threshold));
                        }
                        None => out.push_str("  |"),
                    }
                }
                out.push('\n');
            }
        }
    }

    if !report.spread_table.is_empty() {
        out.push_str("\n## Prompt-perturbation spread\n\n");
        out.push_str("| model | size_b | dataset |");
        for v in VariantId::NON_FORMAT_CHANGE {
            let _ = write!(out, " {} |", v.as_str());
        }
        out.push_str(" spread |\n|---|---|---|---|---|---|---|---|\n");
        let mut rows: Vec<&SpreadRecord> = report.spread_table.iter().collect();
        rows.sort_by_cached_key(|r| {
            // Known sizes order the table; unknown models sort after, by name.
            let size = report.model_sizes.get(&r.model_id).copied();
            (
                size.is_none(),
                size.map(f64::to_bits).unwrap_or(0),
                r.model_id.clone(),
                r.dataset_id.clone(),
            )
        });
        for row in rows {
            let size = report
                .model_sizes
                .get(&row.model_id)
                .map(|s| format!("{s:.1}"))
                .unwrap_or_default();
            let _ = write!(out, "| {} | {} | {} |", row.model_id, size, row.dataset_id);
            for v in VariantId::NON_FORMAT_CHANGE {
                match row.per_variant_accuracy.get(&v) {
                    Some(acc) => {
                        let _ = write!(out, " {} |", fmt_frac(*acc));
                    }
                    None => out.push_str("  |"),
                }
            }
            let _ = writeln!(out, " {} |", fmt_frac(row.spread));
        }
    }

    if !report.panel.is_empty() {
        out.push_str("\n## Model size vs spread\n\n");
        out.push_str("| dataset | rho | p_t | p_perm | n |\n|---|---|---|---|---|\n");
        for (dataset, r) in &report.panel {
            let p_perm = r
                .p_value_perm
                .map(|p| fmt_frac(p))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "| {} | {:+.3} | {} | {} | {} |",
                dataset,
                r.rho,
                fmt_frac(r.p_value_t),
                p_perm,
                r.n
            );
        }
    }

    if !report.threshold_table.is_empty() {
        out.push_str("\n## VPR threshold sensitivity\n\n| model |");
        let thresholds: Vec<f64> = report.threshold_table[0]
            .cells
            .iter()
            .map(|c| c.threshold)
            .collect();
        for t in &thresholds {
            let _ = write!(out, " >={t:.2} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(thresholds.len()));
        out.push('\n');
        for row in &report.threshold_table {
            let _ = write!(out, "| {} |", row.model_id);
            for cell in &row.cells {
                let _ = write!(out, " {} |", threshold_cell_text(cell));
            }
            out.push('\n');
        }
    }

    if !report.intervals.is_empty() {
        out.push_str("\n## Bootstrap intervals\n\n");
        out.push_str("| context | point | lo | hi | unit | n_resamples | seed |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        for interval in &report.intervals {
            let r = &interval.result;
            let unit = serde_json::to_value(r.unit)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} |",
                interval.context,
                fmt_frac(r.point),
                fmt_frac(r.lo),
                fmt_frac(r.hi),
                unit,
                r.n_resamples,
                r.seed
            );
        }
    }

    if !report.checklist.is_empty() {
        out.push_str("\n## Release checklist\n\n");
        for item in &report.checklist {
            let mark = if item.satisfied { "x" } else { " " };
            let _ = writeln!(
                out,
                "{}. [{}] {}: {}",
                item.number, mark, item.title, item.detail
            );
        }
    }

    out
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cells_csv(report: &AuditReport) -> String {
    let mut out = String::from(
        "cell,n_examples,accuracy,ece_token_raw,ece_token_norm,mean_token_conf_raw,\
         mean_token_conf_norm,n_degenerate,n_no_topk,n_no_prediction,vpr,ece_verbal,\
         mean_verbal_conf,overconf_vs_acc,overconf_vs_token,ece_gap,n_parsed,exclusion_reason\n",
    );
    let mut cells: Vec<&CellMetrics> = report.cells.iter().collect();
    cells.sort_by_cached_key(|c| c.cell.to_string());
    for c in cells {
        let (ece_v, mean_v, ova, ovt, gap, n_parsed) = match &c.verbal {
            Some(v) => (
                v.ece_verbal.to_string(),
                v.mean_verbal_conf.to_string(),
                v.overconf_vs_acc.to_string(),
                v.overconf_vs_token.to_string(),
                v.ece_gap.to_string(),
                v.n_parsed.to_string(),
            ),
            None => Default::default(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&c.cell.to_string()),
            c.n_examples,
            c.accuracy,
            c.ece_token_raw,
            c.ece_token_norm,
            c.mean_token_conf_raw,
            c.mean_token_conf_norm,
            c.n_degenerate,
            c.n_no_topk,
            c.n_no_prediction,
            c.vpr,
            ece_v,
            mean_v,
            ova,
            ovt,
            gap,
            n_parsed,
            csv_field(c.verbal_exclusion_reason.as_deref().unwrap_or("")),
        );
    }
    out
}

fn gap_recovery_csv(table: &GapRecoveryTable) -> String {
    let mut out = String::from(
        "model,nonfc_mean,firstchar,repaired_regex,recovery_regex_pct,\
         repaired_constrained,recovery_constrained_pct\n",
    );
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(&r.model_id),
            r.nonfc_mean,
            r.firstchar,
            r.repaired_regex,
            r.recovery_regex,
            r.repaired_constrained,
            r.recovery_constrained,
        );
    }
    let _ = writeln!(
        out,
        "mean_pooled,{},{},{},{},{},{}",
        table.mean_nonfc,
        table.mean_firstchar,
        table.mean_regex,
        table.pooled_recovery_regex,
        table.mean_constrained,
        table.pooled_recovery_constrained,
    );
    let _ = writeln!(
        out,
        "mean_per_model,,,,{},,{}",
        table.mean_recovery_regex, table.mean_recovery_constrained,
    );
    out
}

fn shift_csv(shift: &NormalisationShift) -> String {
    let mut out =
        String::from("scope,n_cells,mean_abs,median_abs,max_abs,frac_gt_005,frac_gt_020\n");
    let mut write_row = |scope: &str, s: &crate::calibration::ShiftSummary| {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            scope, s.n_cells, s.mean_abs, s.median_abs, s.max_abs, s.frac_gt_005, s.frac_gt_020
        );
    };
    write_row("overall", &shift.overall);
    for (variant, summary) in &shift.per_variant {
        write_row(variant.as_str(), summary);
    }
    out
}

fn vpr_csv(report: &AuditReport) -> String {
    let mut out = String::from("model,dataset,variant,phrasing,vpr,below_threshold\n");
    for e in &report.vpr_matrix {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            csv_field(&e.cell.model_id),
            csv_field(&e.cell.dataset_id),
            e.cell.variant_id.as_str(),
            e.cell.phrasing_id.as_str(),
            e.vpr,
            e.below_threshold,
        );
    }
    out
}

fn spread_csv(report: &AuditReport) -> String {
    let mut out = String::from("model,dataset");
    for v in VariantId::NON_FORMAT_CHANGE {
        let _ = write!(out, ",{}", v.as_str());
    }
    out.push_str(",spread\n");
    let mut rows: Vec<&SpreadRecord> = report.spread_table.iter().collect();
    rows.sort_by_key(|r| (r.model_id.clone(), r.dataset_id.clone()));
    for r in rows {
        let _ = write!(out, "{},{}", csv_field(&r.model_id), csv_field(&r.dataset_id));
        for v in VariantId::NON_FORMAT_CHANGE {
            match r.per_variant_accuracy.get(&v) {
                Some(acc) => {
                    let _ = write!(out, ",{acc}");
                }
                None => out.push(','),
            }
        }
        let _ = writeln!(out, ",{}", r.spread);
    }
    out
}

fn panel_csv(report: &AuditReport) -> String {
    let mut out = String::from("dataset,rho,p_value_t,p_value_perm,n\n");
    for (dataset, r) in &report.panel {
        let p_perm = r.p_value_perm.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            csv_field(dataset),
            r.rho,
            r.p_value_t,
            p_perm,
            r.n
        );
    }
    out
}

fn thresholds_csv(report: &AuditReport) -> String {
    let mut out = String::from("model,threshold,mean_overconf_vs_acc,n\n");
    for row in &report.threshold_table {
        for cell in &row.cells {
            let mean = cell.mean_overconf.map(|m| m.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{}",
                csv_field(&row.model_id),
                cell.threshold,
                mean,
                cell.n
            );
        }
    }
    out
}

fn intervals_csv(report: &AuditReport) -> String {
    let mut out = String::from("context,point,lo,hi,unit,n_resamples,seed\n");
    for interval in &report.intervals {
        let r = &interval.result;
        let unit = serde_json::to_value(r.unit)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(&interval.context),
            r.point,
            r.lo,
            r.hi,
            unit,
            r.n_resamples,
            r.seed
        );
    }
    out
}

fn checklist_csv(report: &AuditReport) -> String {
    let mut out = String::from("item,title,satisfied,detail\n");
    for item in &report.checklist {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            item.number,
            csv_field(&item.title),
            item.satisfied,
            csv_field(&item.detail),
        );
    }
    out
}

fn reliability_csv(diagram: &ReliabilityDiagram) -> String {
    let mut out =
        String::from("series,bin_lo,bin_hi,count,mean_confidence,empirical_accuracy\n");
    let mut write_series = |name: &str, bins: &crate::calibration::BinnedReliability| {
        let width = 1.0 / bins.n_bins as f64;
        for (i, bin) in bins.bins.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                name,
                i as f64 * width,
                (i + 1) as f64 * width,
                bin.count,
                bin.mean_confidence,
                bin.empirical_accuracy,
            );
        }
    };
    write_series("token_norm", &diagram.token);
    if let Some(verbal) = &diagram.verbal {
        write_series("verbal", verbal);
    }
    out
}

/// Writes the report to `out_dir` in one format and returns the file paths,
/// sorted. Identical reports produce byte-identical files.
pub fn emit_report(
    report: &AuditReport,
    format: ReportFormat,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ReportError> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut write = |name: String, content: String| -> Result<(), ReportError> {
        let path = out_dir.join(name);
        std::fs::write(&path, content)?;
        written.push(path);
        Ok(())
    };

    match format {
        ReportFormat::MarkdownTables => {
            write("report.md".into(), render_markdown(report))?;
        }
        ReportFormat::Json => {
            let body = serde_json::to_string_pretty(report)
                .map_err(|e| ReportError::Serialize(e.to_string()))?;
            write("report.json".into(), body + "\n")?;
        }
        ReportFormat::CsvBundle => {
            write("cells.csv".into(), cells_csv(report))?;
            if let Some(table) = &report.gap_recovery_table {
                write("gap_recovery.csv".into(), gap_recovery_csv(table))?;
            }
            if let Some(shift) = &report.shift_summary {
                write("shift_summary.csv".into(), shift_csv(shift))?;
            }
            write("vpr_matrix.csv".into(), vpr_csv(report))?;
            write("spread.csv".into(), spread_csv(report))?;
            write("panel.csv".into(), panel_csv(report))?;
            write("threshold_sensitivity.csv".into(), thresholds_csv(report))?;
            write("intervals.csv".into(), intervals_csv(report))?;
            write("checklist.csv".into(), checklist_csv(report))?;
            for diagram in &report.reliability {
                write(
                    format!(
                        "{}_{}_{}_reliability.csv",
                        diagram.model_id,
                        diagram.dataset_id,
                        diagram.phrasing_id.as_str()
                    ),
                    reliability_csv(diagram),
                )?;
            }
        }
    }
    written.sort();
    Ok(written)
}

// ─── tests ───

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::TopKDistribution;
    use crate::extraction::ExtractionRule;

    fn cell_key(model: &str, dataset: &str, variant: VariantId) -> CellKey {
        CellKey {
            model_id: model.into(),
            dataset_id: dataset.into(),
            variant_id: variant,
            phrasing_id: PhrasingId::Decimal01,
        }
    }

    fn record(
        cell: &CellKey,
        id: &str,
        correct: bool,
        verbal: Option<&str>,
    ) -> TranscriptRecord {
        let mut verdicts = BTreeMap::new();
        verdicts.insert(
            "first_char".to_string(),
            EvaluatorVerdict {
                predicted_letter: Some(if correct { 'A' } else { 'B' }),
                rule_fired: ExtractionRule::FirstChar,
                correct: Some(correct),
            },
        );
        let topk = TopKDistribution::from_probs(
            BTreeMap::from([("A".to_string(), 0.6), ("B".to_string(), 0.3)]),
            200,
        )
        .unwrap();
        TranscriptRecord {
            cell: cell.clone(),
            example_id: id.to_string(),
            rendered_prompt: "p".into(),
            generation_text: if correct { "A" } else { "B" }.into(),
            first_step_topk: Some(topk),
            verbal_response_text: verbal.map(str::to_string),
            gold_letter: 'A',
            label_set: vec!['A', 'B'],
            verdicts,
        }
    }

    // Published recovery arithmetic, frozen as plain numbers.
    const TABLE_ROWS: [(&str, f64, f64, f64, f64, f64, f64); 5] = [
        ("llama-3.2-3b", 0.751, 0.098, 0.712, 94.0, 0.732, 97.1),
        ("phi-4-mini", 0.842, 0.180, 0.848, 100.9, 0.862, 103.0),
        ("gemma-3-4b", 0.705, 0.198, 0.758, 110.5, 0.786, 116.0),
        ("mistral-7b", 0.783, 0.128, 0.748, 94.7, 0.766, 97.4),
        ("qwen-2.5-7b", 0.897, 0.104, 0.710, 76.4, 0.896, 99.9),
    ];

    fn published_inputs() -> Vec<GapRecoveryInput> {
        TABLE_ROWS
            .iter()
            .map(|&(model, nonfc, fc, rgx, _, con, _)| GapRecoveryInput {
                model_id: model.into(),
                nonfc_mean: nonfc,
                firstchar: fc,
                repaired_regex: rgx,
                repaired_constrained: con,
            })
            .collect()
    }

    #[test]
    fn gap_recovery_known_values() {
        assert!((gap_recovery(0.751, 0.098, 0.712).unwrap() - 94.0).abs() < 0.1);
        assert!((gap_recovery(0.705, 0.198, 0.758).unwrap() - 110.5).abs() < 0.1);
        assert_eq!(gap_recovery(0.8, 0.2, 0.8).unwrap(), 100.0);
    }

    #[test]
    fn gap_recovery_rejects_nonpositive_gap() {
        assert!(matches!(
            gap_recovery(0.1, 0.1, 0.5),
            Err(ReportError::NonPositiveGap { .. })
        ));
        assert!(matches!(
            gap_recovery(0.1, 0.3, 0.5),
            Err(ReportError::NonPositiveGap { .. })
        ));
    }

    #[test]
    fn recovery_table_reproduces_per_model_rows() {
        let table = gap_recovery_table(&published_inputs()).unwrap();
        for (row, &(_, _, _, _, rgx_pct, _, con_pct)) in table.rows.iter().zip(&TABLE_ROWS) {
            assert!((row.recovery_regex - rgx_pct).abs() < 0.1, "{}", row.model_id);
            assert!(
                (row.recovery_constrained - con_pct).abs() < 0.1,
                "{}",
                row.model_id
            );
        }
    }

    #[test]
    fn recovery_table_mean_rows_cover_both_aggregations() {
        let table = gap_recovery_table(&published_inputs()).unwrap();
        // The published mean row pairs the pooled regex figure with the
        // per-model constrained figure; both routes stay available.
        assert!((table.pooled_recovery_regex - 93.8).abs() < 0.1);
        assert!((table.mean_recovery_constrained - 102.7).abs() < 0.1);
        assert!((table.mean_recovery_regex - 95.3).abs() < 0.1);
        assert!((table.pooled_recovery_constrained - 102.0).abs() < 0.1);
    }

    #[test]
    fn threshold_sensitivity_recomputes_inclusion() {
        // m1 surface_paraphrase: VPR 3/4, overconf 0.4 on parsed rows.
        let sp = cell_key("m1", "d1", VariantId::SurfaceParaphrase);
        let sp_records = vec![
            record(&sp, "e1", false, Some("0.4")),
            record(&sp, "e2", false, Some("0.4")),
            record(&sp, "e3", false, Some("0.4")),
            record(&sp, "e4", false, Some("who knows")),
        ];
        // m1 instruction_reorder: VPR 4/4, overconf 0.2.
        let ir = cell_key("m1", "d1", VariantId::InstructionReorder);
        let ir_records = vec![
            record(&ir, "e1", false, Some("0.2")),
            record(&ir, "e2", false, Some("0.2")),
            record(&ir, "e3", false, Some("0.2")),
            record(&ir, "e4", false, Some("0.2")),
        ];
        let cells = vec![
            ScoredCell::from_records(sp_records, "first_char").unwrap(),
            ScoredCell::from_records(ir_records, "first_char").unwrap(),
        ];
        let rows = threshold_sensitivity(&cells, &[0.70, 0.80]).unwrap();
        assert_eq!(rows.len(), 1);
        let row = &rows[0];
        assert_eq!(row.model_id, "m1");
        assert_eq!(row.cells[0].n, 2);
        assert!((row.cells[0].mean_overconf.unwrap() - 0.3).abs() < 1e-12);
        // At 0.80 the surface cell (VPR 0.75) drops out.
        assert_eq!(row.cells[1].n, 1);
        assert!((row.cells[1].mean_overconf.unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn threshold_sensitivity_flags_empty_rows() {
        let sp = cell_key("m2", "d1", VariantId::SurfaceParaphrase);
        let records = vec![
            record(&sp, "e1", false, Some("0.5")),
            record(&sp, "e2", false, None),
        ];
        let cells = vec![ScoredCell::from_records(records, "first_char").unwrap()];
        let rows = threshold_sensitivity(&cells, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(rows[0].cells.len(), 3);
        for cell in &rows[0].cells {
            assert_eq!(cell.mean_overconf, None);
            assert_eq!(cell.n, 0);
        }
        assert_eq!(threshold_cell_text(&rows[0].cells[0]), "n/a [0]");
    }

    fn metrics_stub(cell: CellKey, vpr: f64, reason: Option<&str>) -> CellMetrics {
        CellMetrics {
            cell,
            n_examples: 500,
            accuracy: 0.5,
            ece_token_raw: 0.1,
            ece_token_norm: 0.08,
            mean_token_conf_raw: 0.55,
            mean_token_conf_norm: 0.6,
            n_degenerate: 0,
            n_no_topk: 0,
            n_no_prediction: 0,
            vpr,
            verbal: None,
            verbal_exclusion_reason: reason.map(str::to_string),
        }
    }

    #[test]
    fn vpr_grid_marks_below_threshold_cells() {
        let low = metrics_stub(
            cell_key("mistral-7b", "mnli", VariantId::InstructionReorder),
            0.346,
            Some("verbal parse rate 0.346 below threshold 0.800"),
        );
        let high = metrics_stub(
            cell_key("mistral-7b", "mnli", VariantId::Fewshot3),
            0.948,
            None,
        );
        let report = AuditReport {
            vpr_matrix: vpr_entries(&[low, high], 0.80),
            ..AuditReport::default()
        };
        let md = render_markdown(&report);
        assert!(md.contains("0.346 ×"), "grid mark missing:\n{md}");
        assert!(md.contains("0.948"));
        assert!(!md.contains("0.948 ×"));
    }

    #[test]
    fn excluded_cells_surface_their_reason() {
        let reason = "verbal parse rate 0.002 below threshold 0.800";
        let report = AuditReport {
            cells: vec![metrics_stub(
                cell_key("mistral-7b", "sst2", VariantId::SurfaceParaphrase),
                0.002,
                Some(reason),
            )],
            ..AuditReport::default()
        };
        let md = render_markdown(&report);
        assert!(md.contains(reason));
        let csv = cells_csv(&report);
        assert!(csv.contains(reason));
    }

    #[test]
    fn checklist_has_exactly_six_mechanical_items() {
        let report = AuditReport {
            cells: vec![metrics_stub(
                cell_key("m1", "d1", VariantId::SurfaceParaphrase),
                0.9,
                Some("verbal parse rate 0.900 below threshold 0.950"),
            )],
            evaluators: vec!["first_char".into(), "regex".into()],
            raw_generations_retained: true,
            ..AuditReport::default()
        }
        .with_checklist();
        assert_eq!(report.checklist.len(), 6);
        assert_eq!(
            report.checklist.iter().map(|i| i.number).collect::<Vec<_>>(),
            vec![1, 2, 3, 4, 5, 6]
        );
        let item2 = &report.checklist[1];
        assert!(item2.satisfied);
        assert!(item2.detail.contains("first_char") && item2.detail.contains("regex"));
        let item3 = &report.checklist[2];
        assert!(item3.satisfied);
        let item5 = &report.checklist[4];
        assert_eq!(item5.detail, "1 phrasing — replication missing");
        assert!(!item5.satisfied);
    }

    #[test]
    fn checklist_flags_dropped_generations_and_missing_spread() {
        let report = AuditReport::default().with_checklist();
        assert!(!report.checklist[2].satisfied);
        assert!(report.checklist[2].detail.contains("dropped"));
        assert!(!report.checklist[5].satisfied);
    }

    fn small_report() -> AuditReport {
        let sp = cell_key("m1", "d1", VariantId::SurfaceParaphrase);
        let ir = cell_key("m1", "d1", VariantId::InstructionReorder);
        let records: Vec<TranscriptRecord> = vec![
            record(&sp, "e1", true, Some("0.9")),
            record(&sp, "e2", false, Some("0.7")),
            record(&ir, "e3", true, Some("0.8")),
            record(&ir, "e4", false, None),
        ];
        let sp_cell =
            ScoredCell::from_records(records[..2].to_vec(), "first_char").unwrap();
        let ir_cell =
            ScoredCell::from_records(records[2..].to_vec(), "first_char").unwrap();
        let cells = vec![sp_cell.metrics(0.8).unwrap(), ir_cell.metrics(0.8).unwrap()];
        let verdicts = chosen_verdicts(&records, "first_char").unwrap();
        let parses = verbal_parses(&records);
        let diagram = reliability_diagram(&records, &verdicts, &parses).unwrap();
        let table = gap_recovery_table(&published_inputs()).unwrap();
        AuditReport {
            vpr_matrix: vpr_entries(&cells, 0.80),
            cells,
            gap_recovery_table: Some(table),
            reliability: vec![diagram],
            evaluators: vec!["first_char".into()],
            raw_generations_retained: true,
            ..AuditReport::default()
        }
        .with_checklist()
    }

    #[test]
    fn emission_is_byte_stable_across_runs() {
        let report = small_report();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        for format in [
            ReportFormat::MarkdownTables,
            ReportFormat::CsvBundle,
            ReportFormat::Json,
        ] {
            let files_a = emit_report(&report, format, dir_a.path()).unwrap();
            let files_b = emit_report(&report, format, dir_b.path()).unwrap();
            assert_eq!(files_a.len(), files_b.len());
            for (a, b) in files_a.iter().zip(&files_b) {
                assert_eq!(a.file_name(), b.file_name());
                assert_eq!(
                    std::fs::read(a).unwrap(),
                    std::fs::read(b).unwrap(),
                    "{a:?} differs"
                );
            }
        }
    }

    #[test]
    fn json_report_round_trips() {
        let report = small_report();
        let body = serde_json::to_string(&report).unwrap();
        let back: AuditReport = serde_json::from_str(&body).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn reliability_csv_is_named_and_shaped_per_triple() {
        let report = small_report();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&report, ReportFormat::CsvBundle, dir.path()).unwrap();
        let path = files
            .iter()
            .find(|p| p.file_name().unwrap() == "m1_d1_decimal_01_reliability.csv")
            .expect("reliability csv present");
        let body = std::fs::read_to_string(path).unwrap();
        let lines: Vec<&str> = body.lines().collect();
        // Header plus ten token bins plus ten verbal bins.
        assert_eq!(lines.len(), 21);
        assert_eq!(
            lines.iter().filter(|l| l.starts_with("token_norm,")).count(),
            10
        );
        assert_eq!(lines.iter().filter(|l| l.starts_with("verbal,")).count(), 10);
    }

    #[test]
    fn diagram_rejects_mixed_triples() {
        let a = cell_key("m1", "d1", VariantId::SurfaceParaphrase);
        let mut other = cell_key("m2", "d1", VariantId::SurfaceParaphrase);
        other.model_id = "m2".into();
        let records = vec![record(&a, "e1", true, None), record(&other, "e2", true, None)];
        let verdicts = chosen_verdicts(&records, "first_char").unwrap();
        let parses = verbal_parses(&records);
        let err = reliability_diagram(&records, &verdicts, &parses).unwrap_err();
        assert!(matches!(err, ReportError::MixedDiagramCells { .. }));
    }
}
