//! Pipeline stages. Every stage writes its artifacts plus a meta record
//! carrying the protocol hash. A stage whose meta already matches the
//! current hash is a no-op, and artifacts hashed under a different protocol
//! are refused outright instead of being mixed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use relaudit::bootstrap::{bootstrap_ci, paired_drop_ci, spread_ci, ResampleUnit};
use relaudit::calibration::{chosen_verdicts, normalisation_shift, verbal_parses, CellMetrics};
use relaudit::client::{BackendConfig, Client, ClientError, GenerationRequest, LABEL_PROBE_LOGPROBS};
use relaudit::datamodel::{
    group_by_cell, read_examples, read_recorded_answers, read_transcripts, write_transcripts,
    CellKey, ExampleRecord, PhrasingId, TranscriptRecord, VariantId,
};
use relaudit::extraction::{
    extract_pred_letter, regex_reparse, EvaluatorVerdict, ExtractionRule, EVAL_CONSTRAINED,
    EVAL_FIRST_CHAR, EVAL_REGEX,
};
use relaudit::prompts::{
    builtin_templates, elicitation_suffix, load_template_file, make_fewshot_indices,
    make_sample_plan, render_elicitation, render_prompt, SamplePlan, TemplateSet,
};
use relaudit::report::{
    emit_report, gap_recovery_table, reliability_diagram, threshold_sensitivity, vpr_entries,
    AuditReport, GapRecoveryInput, ReliabilityDiagram, ReportFormat, ReportedInterval, ScoredCell,
    DEFAULT_THRESHOLDS,
};
use relaudit::robustness::{
    panel_table, size_spread_panel, spread_table, CorrelationResult, SpreadRecord,
};

use crate::config::RunConfig;
use crate::AppError;

// ─── stage context and meta records ───

pub struct StageCtx<'a> {
    pub config: &'a RunConfig,
    pub run_dir: PathBuf,
    pub hash: String,
}

impl<'a> StageCtx<'a> {
    pub fn new(config: &'a RunConfig, run_dir: &Path) -> Result<Self, AppError> {
        Ok(StageCtx {
            config,
            run_dir: run_dir.to_path_buf(),
            hash: config.protocol_hash()?,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageMeta {
    stage: String,
    config_hash: String,
    /// Artifact paths relative to the run directory; absolute only for
    /// report targets placed outside it.
    outputs: Vec<String>,
}

fn meta_path(ctx: &StageCtx, stage: &str) -> PathBuf {
    ctx.path(&format!("meta/{stage}.meta.json"))
}

fn read_meta(ctx: &StageCtx, stage: &str) -> Result<Option<StageMeta>, AppError> {
    let path = meta_path(ctx, stage);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(&path)?;
    let meta: StageMeta = serde_json::from_slice(&bytes)
        .map_err(|e| AppError::Data(format!("corrupt stage meta {}: {e}", path.display())))?;
    Ok(Some(meta))
}

fn write_meta(ctx: &StageCtx, stage: &str, outputs: Vec<String>) -> Result<(), AppError> {
    let meta = StageMeta {
        stage: stage.to_string(),
        config_hash: ctx.hash.clone(),
        outputs,
    };
    let mut bytes = serde_json::to_vec_pretty(&meta).expect("stage meta serializes");
    bytes.push(b'\n');
    write_artifact(ctx, &format!("meta/{stage}.meta.json"), &bytes)
}

fn resolve_output(ctx: &StageCtx, key: &str) -> PathBuf {
    let path = Path::new(key);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        ctx.path(key)
    }
}

/// Gate at stage entry. Ok(true) means the stage already ran under this
/// protocol and its outputs are intact, so the rerun is a no-op. A meta
/// record under a different hash is refused rather than silently
/// overwritten: one run directory holds one protocol.
fn stage_guard(ctx: &StageCtx, stage: &str) -> Result<bool, AppError> {
    let Some(meta) = read_meta(ctx, stage)? else {
        return Ok(false);
    };
    if meta.config_hash != ctx.hash {
        return Err(AppError::Data(format!(
            "refuses to mix protocols: `{stage}` artifacts in this run dir carry config hash {} \
             but the current config hashes to {}; use a fresh --run-dir",
            &meta.config_hash[..12.min(meta.config_hash.len())],
            &ctx.hash[..12],
        )));
    }
    Ok(!meta.outputs.is_empty()
        && meta.outputs.iter().all(|key| resolve_output(ctx, key).exists()))
}

fn require_upstream(ctx: &StageCtx, stage: &str) -> Result<StageMeta, AppError> {
    let meta = read_meta(ctx, stage)?.ok_or_else(|| {
        AppError::Data(format!(
            "missing upstream artifacts: run `relaudit {stage}` against this run dir first"
        ))
    })?;
    if meta.config_hash != ctx.hash {
        return Err(AppError::Data(format!(
            "refuses to mix protocols: `{stage}` artifacts carry config hash {} but the \
             current config hashes to {}; use a fresh --run-dir or rerun the pipeline",
            &meta.config_hash[..12.min(meta.config_hash.len())],
            &ctx.hash[..12],
        )));
    }
    for key in &meta.outputs {
        let path = resolve_output(ctx, key);
        if !path.exists() {
            return Err(AppError::Data(format!(
                "upstream artifact {} is missing; rerun `relaudit {stage}`",
                path.display()
            )));
        }
    }
    Ok(meta)
}

/// Write bytes under the run directory through a temp file and rename, so
/// an interrupted stage never leaves a truncated artifact behind.
fn write_artifact(ctx: &StageCtx, rel: &str, bytes: &[u8]) -> Result<(), AppError> {
    let path = ctx.path(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, &path)?;
    Ok(())
}

fn write_json_artifact<T: Serialize>(ctx: &StageCtx, rel: &str, value: &T) -> Result<(), AppError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    write_artifact(ctx, rel, &bytes)
}

fn read_json_artifact<T: for<'de> Deserialize<'de>>(
    ctx: &StageCtx,
    rel: &str,
) -> Result<T, AppError> {
    let path = ctx.path(rel);
    let bytes = std::fs::read(&path)
        .map_err(|e| AppError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| AppError::Data(format!("corrupt artifact {}: {e}", path.display())))
}

// ─── shared helpers ───

fn require_cells(ctx: &StageCtx) -> Result<(), AppError> {
    if ctx.config.cells.models.is_empty() || ctx.config.cells.datasets.is_empty() {
        return Err(AppError::Data(
            "config [cells] must list at least one model and one dataset".into(),
        ));
    }
    Ok(())
}

fn load_examples(ctx: &StageCtx) -> Result<Vec<ExampleRecord>, AppError> {
    let path = ctx
        .config
        .corpus
        .examples
        .as_ref()
        .ok_or_else(|| AppError::Data("config has no [corpus] examples path".into()))?;
    Ok(read_examples(path)?)
}

fn load_templates(config: &RunConfig) -> Result<TemplateSet, AppError> {
    match &config.templates.path {
        Some(path) => Ok(load_template_file(path)?),
        None => Ok(builtin_templates(config.task_type()?).clone()),
    }
}

fn build_client(
    config: &RunConfig,
    base_url: Option<&str>,
    model: &str,
) -> Result<Client, AppError> {
    let backend = config.backend.as_ref().ok_or_else(|| {
        AppError::Data("config has no [backend] section; this stage talks to a live backend".into())
    })?;
    let backend_config = BackendConfig {
        base_url: base_url.unwrap_or(&backend.base_url).to_string(),
        model_name: backend
            .model_name
            .clone()
            .unwrap_or_else(|| model.to_string()),
        timeout_secs: backend.timeout_secs,
        max_in_flight: backend.max_in_flight,
        retry_limit: backend.retry_limit,
    };
    Client::new(backend_config).map_err(|e| match e {
        ClientError::InvalidConfig(msg) => AppError::Data(format!("bad [backend] config: {msg}")),
        other => AppError::Backend(other.to_string()),
    })
}

fn cell_file(dir: &str, cell: &CellKey) -> String {
    format!(
        "{dir}/{}_{}_{}_{}.jsonl",
        cell.model_id,
        cell.dataset_id,
        cell.variant_id.as_str(),
        cell.phrasing_id.as_str()
    )
}

fn write_records(ctx: &StageCtx, rel: &str, records: &[TranscriptRecord]) -> Result<(), AppError> {
    let path = ctx.path(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_transcripts(&path, records)?;
    Ok(())
}

fn write_cell_files(
    ctx: &StageCtx,
    dir: &str,
    records: Vec<TranscriptRecord>,
) -> Result<Vec<String>, AppError> {
    let mut outputs = Vec::new();
    for (cell, cell_records) in group_by_cell(records) {
        let rel = cell_file(dir, &cell);
        write_records(ctx, &rel, &cell_records)?;
        outputs.push(rel);
    }
    Ok(outputs)
}

fn read_meta_records(ctx: &StageCtx, meta: &StageMeta) -> Result<Vec<TranscriptRecord>, AppError> {
    let mut records = Vec::new();
    for key in &meta.outputs {
        records.extend(read_transcripts(&resolve_output(ctx, key))?);
    }
    Ok(records)
}

// ─── sample ───

pub fn sample(ctx: &StageCtx) -> Result<(), AppError> {
    if stage_guard(ctx, "sample")? {
        println!("sample: up to date");
        return Ok(());
    }
    require_cells(ctx)?;
    let examples = load_examples(ctx)?;
    let mut outputs = Vec::new();
    for dataset in &ctx.config.cells.datasets {
        let split_size = examples.iter().filter(|e| &e.dataset_id == dataset).count();
        if split_size == 0 {
            return Err(AppError::Data(format!(
                "example corpus holds no rows for dataset {dataset}"
            )));
        }
        let plan = make_sample_plan(
            dataset,
            split_size,
            ctx.config.run.sample_size,
            ctx.config.run.seed,
        )?;
        let rel = format!("sample/{dataset}.json");
        write_json_artifact(ctx, &rel, &plan)?;
        outputs.push(rel);
    }
    let n = outputs.len();
    write_meta(ctx, "sample", outputs)?;
    println!("sample: wrote {n} plan file(s)");
    Ok(())
}

// ─── render ───

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RenderedPrompt {
    example_id: String,
    dataset_id: String,
    variant_id: VariantId,
    prompt: String,
    max_new_tokens: u32,
}

fn rendered_file(dataset: &str, variant: VariantId) -> String {
    format!("render/{dataset}_{}.jsonl", variant.as_str())
}

pub fn render(ctx: &StageCtx) -> Result<(), AppError> {
    if stage_guard(ctx, "render")? {
        println!("render: up to date");
        return Ok(());
    }
    require_upstream(ctx, "sample")?;
    let templates = load_templates(ctx.config)?;
    let examples = load_examples(ctx)?;
    let mut outputs = Vec::new();
    for dataset in &ctx.config.cells.datasets {
        let split: Vec<&ExampleRecord> = examples
            .iter()
            .filter(|e| &e.dataset_id == dataset)
            .collect();
        let plan: SamplePlan = read_json_artifact(ctx, &format!("sample/{dataset}.json"))?;
        if plan.indices.iter().any(|&i| i >= split.len()) {
            return Err(AppError::Data(format!(
                "sample plan for {dataset} indexes outside the corpus split; rerun `relaudit sample`"
            )));
        }
        let fewshot: Vec<ExampleRecord> =
            if ctx.config.cells.variants.contains(&VariantId::Fewshot3) {
                make_fewshot_indices(&plan, split.len())?
                    .into_iter()
                    .map(|i| split[i].clone())
                    .collect()
            } else {
                Vec::new()
            };
        for &variant in &ctx.config.cells.variants {
            let template = templates.get(variant);
            let shots: &[ExampleRecord] = if variant == VariantId::Fewshot3 {
                &fewshot
            } else {
                &[]
            };
            let mut lines = String::new();
            for &i in &plan.indices {
                let example = split[i];
                let row = RenderedPrompt {
                    example_id: example.example_id.clone(),
                    dataset_id: dataset.clone(),
                    variant_id: variant,
                    prompt: render_prompt(template, example, shots)?,
                    max_new_tokens: template.max_new_tokens,
                };
                lines.push_str(&serde_json::to_string(&row).expect("rendered row serializes"));
                lines.push('\n');
            }
            let rel = rendered_file(dataset, variant);
            write_artifact(ctx, &rel, lines.as_bytes())?;
            outputs.push(rel);
        }
    }
    let n = outputs.len();
    write_meta(ctx, "render", outputs)?;
    println!("render: wrote {n} prompt file(s)");
    Ok(())
}

fn read_rendered(ctx: &StageCtx, dataset: &str, variant: VariantId) -> Result<Vec<RenderedPrompt>, AppError> {
    let path = ctx.path(&rendered_file(dataset, variant));
    let text = std::fs::read_to_string(&path)
        .map_err(|e| AppError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: RenderedPrompt = serde_json::from_str(line).map_err(|e| {
            AppError::Data(format!(
                "corrupt rendered prompt {} line {}: {e}",
                path.display(),
                idx + 1
            ))
        })?;
        rows.push(row);
    }
    Ok(rows)
}

// ─── generate ───

pub fn generate(ctx: &StageCtx, base_url: Option<&str>) -> Result<(), AppError> {
    if stage_guard(ctx, "generate")? {
        println!("generate: up to date");
        return Ok(());
    }
    require_upstream(ctx, "render")?;
    let examples = load_examples(ctx)?;
    let by_id: BTreeMap<(&str, &str), &ExampleRecord> = examples
        .iter()
        .map(|e| ((e.dataset_id.as_str(), e.example_id.as_str()), e))
        .collect();
    let mut outputs = Vec::new();
    for model in &ctx.config.cells.models {
        let client = build_client(ctx.config, base_url, model)?;
        for dataset in &ctx.config.cells.datasets {
            for &variant in &ctx.config.cells.variants {
                let rendered = read_rendered(ctx, dataset, variant)?;
                for &phrasing in &ctx.config.cells.phrasings {
                    let suffix = elicitation_suffix(phrasing);
                    let cell = CellKey {
                        model_id: model.clone(),
                        dataset_id: dataset.clone(),
                        variant_id: variant,
                        phrasing_id: phrasing,
                    };
                    let mut records = Vec::with_capacity(rendered.len());
                    for row in &rendered {
                        let example = by_id
                            .get(&(dataset.as_str(), row.example_id.as_str()))
                            .ok_or_else(|| {
                                AppError::Data(format!(
                                    "rendered prompt cites unknown example {}",
                                    row.example_id
                                ))
                            })?;
                        let request = GenerationRequest {
                            logprobs: Some(LABEL_PROBE_LOGPROBS),
                            ..GenerationRequest::text(row.prompt.clone(), row.max_new_tokens)
                        };
                        let (text, topk) = client.generate(&request)?;
                        let verbal = if text.is_empty() {
                            None
                        } else {
                            let elicit = render_elicitation(&suffix, &row.prompt, &text)?;
                            let (reply, _) = client
                                .generate(&GenerationRequest::text(elicit, suffix.max_new_tokens))?;
                            Some(reply)
                        };
                        records.push(TranscriptRecord {
                            cell: cell.clone(),
                            example_id: row.example_id.clone(),
                            rendered_prompt: row.prompt.clone(),
                            generation_text: text,
                            first_step_topk: topk,
                            verbal_response_text: verbal,
                            gold_letter: example.gold,
                            label_set: example.label_set(),
                            verdicts: BTreeMap::new(),
                        });
                    }
                    let rel = cell_file("transcripts", &cell);
                    write_records(ctx, &rel, &records)?;
                    outputs.push(rel);
                }
            }
        }
    }
    let n = outputs.len();
    write_meta(ctx, "generate", outputs)?;
    println!("generate: wrote {n} transcript file(s)");
    Ok(())
}

// ─── score ───

/// Where constrained re-ask verdicts come from: an offline recorded-answer
/// replay when the corpus ships one, else a live backend per model.
enum ConstrainedSource {
    Recorded(BTreeMap<(CellKey, String), char>),
    Live(BTreeMap<String, Client>),
}

impl ConstrainedSource {
    fn open(ctx: &StageCtx, base_url: Option<&str>) -> Result<Self, AppError> {
        if let Some(path) = &ctx.config.corpus.recorded_answers {
            let answers = read_recorded_answers(path)?;
            let map = answers
                .into_iter()
                .map(|a| ((a.cell, a.example_id), a.letter))
                .collect();
            return Ok(ConstrainedSource::Recorded(map));
        }
        if ctx.config.backend.is_some() {
            let mut clients = BTreeMap::new();
            for model in &ctx.config.cells.models {
                clients.insert(model.clone(), build_client(ctx.config, base_url, model)?);
            }
            return Ok(ConstrainedSource::Live(clients));
        }
        Err(AppError::Data(
            "constrained verdicts need [corpus] recorded_answers or a [backend] section".into(),
        ))
    }

    /// None when a recorded replay has no row for this record.
    fn verdict(&self, record: &TranscriptRecord) -> Result<Option<EvaluatorVerdict>, AppError> {
        match self {
            ConstrainedSource::Recorded(map) => {
                let key = (record.cell.clone(), record.example_id.clone());
                let Some(&letter) = map.get(&key) else {
                    return Ok(None);
                };
                if !record.label_set.contains(&letter) {
                    return Err(AppError::Data(format!(
                        "recorded answer {letter:?} for {} {} is outside the label set",
                        record.cell, record.example_id
                    )));
                }
                let verdict = EvaluatorVerdict {
                    predicted_letter: Some(letter),
                    rule_fired: ExtractionRule::Constrained,
                    correct: None,
                }
                .scored(record.gold_letter);
                Ok(Some(verdict))
            }
            ConstrainedSource::Live(clients) => {
                let client = clients.get(&record.cell.model_id).ok_or_else(|| {
                    AppError::Data(format!(
                        "no backend client for model {}; is it listed under [cells]?",
                        record.cell.model_id
                    ))
                })?;
                let verdict = client
                    .constrained_finalize(&record.generation_text, &record.label_set)?
                    .scored(record.gold_letter);
                Ok(Some(verdict))
            }
        }
    }
}

fn load_source_transcripts(ctx: &StageCtx) -> Result<Vec<TranscriptRecord>, AppError> {
    if read_meta(ctx, "generate")?.is_some() {
        let meta = require_upstream(ctx, "generate")?;
        return read_meta_records(ctx, &meta);
    }
    let path = ctx.config.corpus.transcripts.as_ref().ok_or_else(|| {
        AppError::Data(
            "no transcripts: run `relaudit generate` first or point [corpus] transcripts \
             at recorded data"
                .into(),
        )
    })?;
    read_transcript_tree(path)
}

fn read_transcript_tree(path: &Path) -> Result<Vec<TranscriptRecord>, AppError> {
    if !path.is_dir() {
        return Ok(read_transcripts(path)?);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(AppError::Data(format!(
            "{} holds no .jsonl transcript files",
            path.display()
        )));
    }
    let mut records = Vec::new();
    for file in files {
        records.extend(read_transcripts(&file)?);
    }
    Ok(records)
}

pub fn score(
    ctx: &StageCtx,
    evaluators: &[&'static str],
    base_url: Option<&str>,
) -> Result<(), AppError> {
    if stage_guard(ctx, "score")? {
        println!("score: up to date");
        return Ok(());
    }
    let mut records = load_source_transcripts(ctx)?;
    let cells = &ctx.config.cells;
    records.retain(|r| {
        cells.models.contains(&r.cell.model_id)
            && cells.datasets.contains(&r.cell.dataset_id)
            && cells.variants.contains(&r.cell.variant_id)
            && cells.phrasings.contains(&r.cell.phrasing_id)
    });
    if records.is_empty() {
        return Err(AppError::Data(
            "no transcripts match the configured cells".into(),
        ));
    }
    let constrained = if evaluators.contains(&EVAL_CONSTRAINED) {
        Some(ConstrainedSource::open(ctx, base_url)?)
    } else {
        None
    };
    for record in &mut records {
        for &name in evaluators {
            let verdict = match name {
                EVAL_FIRST_CHAR => extract_pred_letter(&record.generation_text, &record.label_set)
                    .scored(record.gold_letter),
                EVAL_REGEX => regex_reparse(&record.generation_text, &record.label_set)
                    .scored(record.gold_letter),
                EVAL_CONSTRAINED => {
                    let source = constrained.as_ref().expect("source opened above");
                    match source.verdict(record)? {
                        Some(verdict) => verdict,
                        None => continue,
                    }
                }
                other => {
                    return Err(AppError::Usage(format!("unknown evaluator {other:?}")));
                }
            };
            record.verdicts.insert(name.to_string(), verdict);
        }
    }
    let n_records = records.len();
    let outputs = write_cell_files(ctx, "scored", records)?;
    let n = outputs.len();
    write_meta(ctx, "score", outputs)?;
    println!(
        "score: scored {n_records} records into {n} cell file(s) with evaluators {}",
        evaluators.join(", ")
    );
    Ok(())
}

// ─── repair ───

pub fn repair(ctx: &StageCtx, base_url: Option<&str>) -> Result<(), AppError> {
    if stage_guard(ctx, "repair")? {
        println!("repair: up to date");
        return Ok(());
    }
    let score_meta = require_upstream(ctx, "score")?;
    let mut records = read_meta_records(ctx, &score_meta)?;
    let source = ConstrainedSource::open(ctx, base_url)?;
    let mut added = 0usize;
    for record in &mut records {
        if record.verdicts.contains_key(EVAL_CONSTRAINED) {
            continue;
        }
        if let Some(verdict) = source.verdict(record)? {
            record.verdicts.insert(EVAL_CONSTRAINED.to_string(), verdict);
            added += 1;
        }
    }
    let outputs = write_cell_files(ctx, "repaired", records)?;
    let n = outputs.len();
    write_meta(ctx, "repair", outputs)?;
    println!("repair: appended {added} constrained verdict(s) across {n} cell file(s)");
    Ok(())
}

// ─── metrics ───

/// Repaired records when the repair stage ran under this protocol, else the
/// scored records.
fn load_scored_records(ctx: &StageCtx) -> Result<Vec<TranscriptRecord>, AppError> {
    let meta = match read_meta(ctx, "repair")? {
        Some(_) => require_upstream(ctx, "repair")?,
        None => require_upstream(ctx, "score")?,
    };
    read_meta_records(ctx, &meta)
}

pub fn metrics(ctx: &StageCtx) -> Result<(), AppError> {
    if stage_guard(ctx, "metrics")? {
        println!("metrics: up to date");
        return Ok(());
    }
    let records = load_scored_records(ctx)?;
    let primary = &ctx.config.evaluator.primary;
    let mut cells = Vec::new();
    for (_, cell_records) in group_by_cell(records) {
        let scored = ScoredCell::from_records(cell_records, primary)?;
        cells.push(scored.metrics(ctx.config.run.vpr_threshold)?);
    }
    write_json_artifact(ctx, "metrics/cells.json", &cells)?;
    write_meta(ctx, "metrics", vec!["metrics/cells.json".into()])?;
    println!("metrics: wrote metrics/cells.json ({} cells)", cells.len());
    Ok(())
}

// ─── spread ───

/// Spread rows, one per (model, dataset, phrasing) group holding all four
/// non-format_change variants, plus the size panel when [sizes] covers
/// enough models. Incomplete groups are skipped with a note.
fn compute_spreads(
    ctx: &StageCtx,
    cells: &[CellMetrics],
) -> Result<(Vec<SpreadRecord>, BTreeMap<String, CorrelationResult>), AppError> {
    let mut groups: BTreeMap<(String, String, PhrasingId), BTreeMap<VariantId, f64>> =
        BTreeMap::new();
    for cell in cells {
        if cell.cell.variant_id == VariantId::FormatChange {
            continue;
        }
        groups
            .entry((
                cell.cell.model_id.clone(),
                cell.cell.dataset_id.clone(),
                cell.cell.phrasing_id,
            ))
            .or_default()
            .insert(cell.cell.variant_id, cell.accuracy);
    }
    let multi_phrasing = ctx.config.cells.phrasings.len() > 1;
    let mut records = Vec::new();
    for ((model, dataset, phrasing), accuracies) in groups {
        if accuracies.len() != VariantId::NON_FORMAT_CHANGE.len() {
            println!(
                "spread: skipping {model}/{dataset}/{} ({} of {} non-format_change variants present)",
                phrasing.as_str(),
                accuracies.len(),
                VariantId::NON_FORMAT_CHANGE.len()
            );
            continue;
        }
        // One spread row per phrasing; the dataset label carries the
        // phrasing only when the config elicits under more than one.
        let dataset_label = if multi_phrasing {
            format!("{dataset}@{}", phrasing.as_str())
        } else {
            dataset.clone()
        };
        records.push(SpreadRecord::new(model, dataset_label, accuracies)?);
    }
    let panel = if ctx.config.sizes.is_empty() || records.is_empty() {
        BTreeMap::new()
    } else {
        match size_spread_panel(&records, &ctx.config.sizes) {
            Ok(panel) => panel,
            Err(err) => {
                println!("spread: correlation panel unavailable ({err})");
                BTreeMap::new()
            }
        }
    };
    Ok((records, panel))
}

pub fn spread(ctx: &StageCtx) -> Result<(), AppError> {
    if stage_guard(ctx, "spread")? {
        println!("spread: up to date");
        return Ok(());
    }
    require_upstream(ctx, "metrics")?;
    let cells: Vec<CellMetrics> = read_json_artifact(ctx, "metrics/cells.json")?;
    let (records, panel) = compute_spreads(ctx, &cells)?;
    if records.is_empty() {
        return Err(AppError::Data(
            "no (model, dataset, phrasing) group holds all four non-format_change variants".into(),
        ));
    }
    write_json_artifact(ctx, "spread/spread.json", &records)?;
    write_json_artifact(ctx, "spread/panel.json", &panel)?;
    write_meta(
        ctx,
        "spread",
        vec!["spread/spread.json".into(), "spread/panel.json".into()],
    )?;
    let sizes = (!ctx.config.sizes.is_empty()).then_some(&ctx.config.sizes);
    print!("{}", spread_table(&records, sizes));
    Ok(())
}

// ─── panel ───

/// Read-only: prints the correlation panel computed by the spread stage.
pub fn panel(ctx: &StageCtx) -> Result<(), AppError> {
    require_upstream(ctx, "spread")?;
    let panel: BTreeMap<String, CorrelationResult> =
        read_json_artifact(ctx, "spread/panel.json")?;
    if panel.is_empty() {
        return Err(AppError::Data(
            "no correlation panel: add a [sizes] table covering at least three models per \
             dataset and rerun `relaudit spread`"
                .into(),
        ));
    }
    print!("{}", panel_table(&panel));
    Ok(())
}

// ─── report ───

fn report_stage_name(format: ReportFormat) -> &'static str {
    match format {
        ReportFormat::MarkdownTables => "report_markdown",
        ReportFormat::CsvBundle => "report_csv",
        ReportFormat::Json => "report_json",
    }
}

pub fn report(ctx: &StageCtx, format: ReportFormat, out: Option<PathBuf>) -> Result<(), AppError> {
    let stage = report_stage_name(format);
    if stage_guard(ctx, stage)? {
        println!("report: up to date");
        return Ok(());
    }
    require_upstream(ctx, "metrics")?;
    let records = load_scored_records(ctx)?;
    let cells: Vec<CellMetrics> = read_json_artifact(ctx, "metrics/cells.json")?;
    let report = assemble_report(ctx, records, cells)?;
    let out_dir = out.unwrap_or_else(|| ctx.path("report"));
    let files = emit_report(&report, format, &out_dir)?;
    let outputs: Vec<String> = files.iter().map(|p| output_key(ctx, p)).collect();
    write_meta(ctx, stage, outputs)?;
    for file in &files {
        println!("report: wrote {}", file.display());
    }
    Ok(())
}

fn output_key(ctx: &StageCtx, path: &Path) -> String {
    match path.strip_prefix(&ctx.run_dir) {
        Ok(rel) => rel.to_string_lossy().into_owned(),
        Err(_) => path.to_string_lossy().into_owned(),
    }
}

/// Per-record correctness under one evaluator, keyed and ordered by example
/// id. Errors when a record lacks the verdict or carries it unscored.
fn correctness(
    records: &[TranscriptRecord],
    evaluator: &str,
) -> Result<BTreeMap<String, bool>, AppError> {
    let verdicts = chosen_verdicts(records, evaluator)?;
    let mut flags = BTreeMap::new();
    for record in records {
        let verdict = &verdicts[&record.example_id];
        let ok = verdict.correct.ok_or_else(|| {
            AppError::Data(format!(
                "unscored {evaluator} verdict on {}",
                record.example_id
            ))
        })?;
        flags.insert(record.example_id.clone(), ok);
    }
    Ok(flags)
}

/// Fraction correct under `evaluator`; None when any row lacks the verdict.
fn eval_accuracy(records: &[TranscriptRecord], evaluator: &str) -> Option<f64> {
    let mut hits = 0usize;
    for record in records {
        match record.verdicts.get(evaluator).and_then(|v| v.correct) {
            Some(ok) => hits += ok as usize,
            None => return None,
        }
    }
    (!records.is_empty()).then(|| hits as f64 / records.len() as f64)
}

/// Like `eval_accuracy` but rows without the verdict count as incorrect;
/// None only when no row carries it at all. Recorded replays that cover a
/// subset of rows land here rather than inflating accuracy.
fn eval_accuracy_lenient(records: &[TranscriptRecord], evaluator: &str) -> Option<f64> {
    let mut hits = 0usize;
    let mut seen = false;
    for record in records {
        if let Some(verdict) = record.verdicts.get(evaluator) {
            seen = true;
            hits += verdict.correct.unwrap_or(false) as usize;
        }
    }
    (seen && !records.is_empty()).then(|| hits as f64 / records.len() as f64)
}

fn assemble_report(
    ctx: &StageCtx,
    records: Vec<TranscriptRecord>,
    cells: Vec<CellMetrics>,
) -> Result<AuditReport, AppError> {
    let config = ctx.config;
    let primary = &config.evaluator.primary;
    let n_resamples = config.run.n_resamples;
    let seed = config.run.seed;

    let evaluators: Vec<String> = records
        .iter()
        .flat_map(|r| r.verdicts.keys().cloned())
        .collect::<BTreeSet<String>>()
        .into_iter()
        .collect();
    let raw_generations_retained =
        !records.is_empty() && records.iter().all(|r| !r.generation_text.is_empty());

    let by_cell = group_by_cell(records);

    let mut scored_cells = Vec::new();
    for cell_records in by_cell.values() {
        scored_cells.push(ScoredCell::from_records(cell_records.clone(), primary)?);
    }
    let threshold_table = threshold_sensitivity(&scored_cells, &DEFAULT_THRESHOLDS)?;

    // Accuracy interval per cell; correctness maps feed the spread and gap
    // computations below.
    let mut intervals = Vec::new();
    let mut nonfc_correct: BTreeMap<
        (String, String, PhrasingId),
        BTreeMap<VariantId, BTreeMap<String, bool>>,
    > = BTreeMap::new();
    for (cell, cell_records) in &by_cell {
        let flags = correctness(cell_records, primary)?;
        let data: Vec<f64> = flags.values().map(|&ok| ok as u8 as f64).collect();
        let label = format!("{cell}#accuracy");
        let result = bootstrap_ci(
            &data,
            |xs| xs.iter().sum::<f64>() / xs.len() as f64,
            n_resamples,
            seed,
            &label,
            ResampleUnit::Example,
        )?;
        intervals.push(ReportedInterval {
            context: label,
            result,
        });
        if cell.variant_id != VariantId::FormatChange {
            nonfc_correct
                .entry((
                    cell.model_id.clone(),
                    cell.dataset_id.clone(),
                    cell.phrasing_id,
                ))
                .or_default()
                .insert(cell.variant_id, flags);
        }
    }

    // Spread interval per group whose four variants score one example set.
    for ((model, dataset, phrasing), variants) in &nonfc_correct {
        if variants.len() != VariantId::NON_FORMAT_CHANGE.len() {
            continue;
        }
        let first = variants.values().next().expect("group is nonempty");
        let aligned = variants
            .values()
            .all(|m| m.len() == first.len() && m.keys().eq(first.keys()));
        if !aligned {
            println!(
                "report: spread interval skipped for {model}/{dataset}/{} \
                 (variants score different example sets)",
                phrasing.as_str()
            );
            continue;
        }
        let per_variant: BTreeMap<VariantId, Vec<bool>> = variants
            .iter()
            .map(|(&variant, map)| (variant, map.values().copied().collect()))
            .collect();
        let label = format!("{model}/{dataset}/{}", phrasing.as_str());
        let result = spread_ci(&label, &per_variant, n_resamples, seed)?;
        intervals.push(ReportedInterval {
            context: format!("{label}#spread"),
            result,
        });
    }

    // Gap-recovery rows and the paired evaluator-drop interval, both
    // anchored on format_change cells.
    let mut gap_inputs = Vec::new();
    for (cell, cell_records) in &by_cell {
        if cell.variant_id != VariantId::FormatChange {
            continue;
        }
        let pairs: Vec<(bool, bool)> = cell_records
            .iter()
            .filter_map(|r| {
                let regex_ok = r.verdicts.get(EVAL_REGEX)?.correct?;
                let fc_ok = r.verdicts.get(EVAL_FIRST_CHAR)?.correct?;
                Some((regex_ok, fc_ok))
            })
            .collect();
        if pairs.len() == cell_records.len() && !pairs.is_empty() {
            let result = paired_drop_ci(cell, cell, &pairs, n_resamples, seed)?;
            intervals.push(ReportedInterval {
                context: format!("{cell}#regex_minus_first_char"),
                result,
            });
        }
        let group = (
            cell.model_id.clone(),
            cell.dataset_id.clone(),
            cell.phrasing_id,
        );
        let Some(variants) = nonfc_correct.get(&group) else {
            continue;
        };
        if variants.len() != VariantId::NON_FORMAT_CHANGE.len() {
            continue;
        }
        let nonfc_mean = variants
            .values()
            .map(|m| m.values().filter(|&&ok| ok).count() as f64 / m.len() as f64)
            .sum::<f64>()
            / variants.len() as f64;
        let firstchar = eval_accuracy(cell_records, EVAL_FIRST_CHAR);
        let regex = eval_accuracy(cell_records, EVAL_REGEX);
        let constrained = eval_accuracy_lenient(cell_records, EVAL_CONSTRAINED);
        match (firstchar, regex, constrained) {
            (Some(firstchar), Some(regex), Some(constrained)) if nonfc_mean > firstchar => {
                gap_inputs.push(GapRecoveryInput {
                    model_id: format!(
                        "{} {}/{}",
                        cell.model_id,
                        cell.dataset_id,
                        cell.phrasing_id.as_str()
                    ),
                    nonfc_mean,
                    firstchar,
                    repaired_regex: regex,
                    repaired_constrained: constrained,
                });
            }
            _ => {
                println!("report: gap-recovery row skipped for {cell}");
            }
        }
    }
    let gap_recovery = if gap_inputs.is_empty() {
        None
    } else {
        Some(gap_recovery_table(&gap_inputs)?)
    };

    // Reliability diagrams pool variants per (model, dataset, phrasing);
    // example ids repeat across variants, so pooled rows are rekeyed.
    let mut diagram_groups: BTreeMap<(String, String, PhrasingId), Vec<TranscriptRecord>> =
        BTreeMap::new();
    for (cell, cell_records) in &by_cell {
        let pooled = diagram_groups
            .entry((
                cell.model_id.clone(),
                cell.dataset_id.clone(),
                cell.phrasing_id,
            ))
            .or_default();
        for record in cell_records {
            let mut record = record.clone();
            record.example_id = format!("{}@{}", record.example_id, cell.variant_id.as_str());
            pooled.push(record);
        }
    }
    let mut reliability: Vec<ReliabilityDiagram> = Vec::new();
    for pooled in diagram_groups.values() {
        let verdicts = chosen_verdicts(pooled, primary)?;
        let parses = verbal_parses(pooled);
        reliability.push(reliability_diagram(pooled, &verdicts, &parses)?);
    }

    let (spread_records, panel) = compute_spreads(ctx, &cells)?;
    // normalisation_shift only fails on empty input, and metrics wrote at
    // least one cell to get here.
    let shift_summary = normalisation_shift(&cells).ok();
    let vpr_matrix = vpr_entries(&cells, config.run.vpr_threshold);

    Ok(AuditReport {
        cells,
        gap_recovery_table: gap_recovery,
        shift_summary,
        vpr_matrix,
        spread_table: spread_records,
        model_sizes: config.sizes.clone(),
        panel,
        threshold_table,
        intervals,
        reliability,
        evaluators,
        raw_generations_retained,
        checklist: Vec::new(),
    }
    .with_checklist())
}

// ─── tests ───
