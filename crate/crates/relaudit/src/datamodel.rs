//! Record types and strict JSONL ingestion.
//!
//! Ingestion is all-or-nothing: a malformed line rejects the whole file with
//! a line-numbered error, because a silently dropped row shifts every
//! downstream accuracy and calibration figure. Log-probabilities live on
//! disk; they are converted to linear probabilities exactly once, on ingest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::EvaluatorVerdict;

/// Choice letters run A..J; a task exposes a contiguous prefix of them.
pub const LETTERS: [char; 10] = ['A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J'];

/// First `n` choice letters, for building label sets.
pub fn letter_prefix(n: usize) -> Vec<char> {
    LETTERS[..n].to_vec()
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {problem}")]
    Line {
        path: PathBuf,
        line: usize,
        problem: String,
    },
    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    fn at(path: &Path, line: usize, problem: impl Into<String>) -> Self {
        DataError::Line {
            path: path.to_path_buf(),
            line,
            problem: problem.into(),
        }
    }
}

// ─── prompt perturbation variants and elicitation phrasings ───

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantId {
    SurfaceParaphrase,
    InstructionReorder,
    #[serde(rename = "fewshot_3")]
    Fewshot3,
    FormatChange,
    ImplicitFraming,
}

impl VariantId {
    pub const ALL: [VariantId; 5] = [
        VariantId::SurfaceParaphrase,
        VariantId::InstructionReorder,
        VariantId::Fewshot3,
        VariantId::FormatChange,
        VariantId::ImplicitFraming,
    ];

    /// The four variants that enter accuracy-spread comparisons.
    /// `format_change` is excluded: its first-token answer position differs
    /// by design, so it is scored by the repair paths instead.
    pub const NON_FORMAT_CHANGE: [VariantId; 4] = [
        VariantId::SurfaceParaphrase,
        VariantId::InstructionReorder,
        VariantId::Fewshot3,
        VariantId::ImplicitFraming,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            VariantId::SurfaceParaphrase => "surface_paraphrase",
            VariantId::InstructionReorder => "instruction_reorder",
            VariantId::Fewshot3 => "fewshot_3",
            VariantId::FormatChange => "format_change",
            VariantId::ImplicitFraming => "implicit_framing",
        }
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhrasingId {
    #[serde(rename = "decimal_01")]
    Decimal01,
    #[serde(rename = "percent_0_100")]
    Percent0100,
}

impl PhrasingId {
    pub const ALL: [PhrasingId; 2] = [PhrasingId::Decimal01, PhrasingId::Percent0100];

    pub fn as_str(&self) -> &'static str {
        match self {
            PhrasingId::Decimal01 => "decimal_01",
            PhrasingId::Percent0100 => "percent_0_100",
        }
    }
}

impl fmt::Display for PhrasingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One audit cell: a (model, dataset, variant, phrasing) combination.
/// Ordered so grouped iteration is deterministic.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub model_id: String,
    pub dataset_id: String,
    pub variant_id: VariantId,
    pub phrasing_id: PhrasingId,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.model_id, self.dataset_id, self.variant_id, self.phrasing_id
        )
    }
}

// ─── example corpus ───

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Choice {
    pub letter: char,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleRecord {
    pub example_id: String,
    pub dataset_id: String,
    pub question: String,
    pub choices: Vec<Choice>,
    pub gold: char,
}

impl ExampleRecord {
    /// Letters of the choices, in order.
    pub fn label_set(&self) -> Vec<char> {
        self.choices.iter().map(|c| c.letter).collect()
    }

    fn validate(&self) -> Result<(), String> {
        validate_labels(&self.label_set())?;
        if !self.choices.iter().any(|c| c.letter == self.gold) {
            return Err(format!(
                "gold letter {:?} is not among the choice letters",
                self.gold
            ));
        }
        Ok(())
    }
}

/// Labels must be the contiguous prefix A.. of length 2 to 10, in order.
fn validate_labels(labels: &[char]) -> Result<(), String> {
    if labels.len() < 2 || labels.len() > 10 {
        return Err(format!(
            "expected 2 to 10 choice letters, found {}",
            labels.len()
        ));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l != LETTERS[i] {
            return Err(format!(
                "choice letters must be the contiguous prefix {:?} in order, found {:?} at position {}",
                &LETTERS[..labels.len()],
                l,
                i
            ));
        }
    }
    Ok(())
}

// ─── first-token top-k window ───

/// Top-k log-probability window over the first generated token.
///
/// Holds both scales: linear probabilities for metric code and the original
/// log-probabilities so that re-serialization reproduces the input exactly.
#[derive(Debug, Clone)]
pub struct TopKDistribution {
    probs: BTreeMap<String, f64>,
    logprobs: BTreeMap<String, f64>,
    k: usize,
}

/// `k` is a window-size bound, not distribution content: a file round trip
/// records the observed size, while a live response records the requested
/// one. Equality therefore compares the entries only.
impl PartialEq for TopKDistribution {
    fn eq(&self, other: &Self) -> bool {
        self.probs == other.probs && self.logprobs == other.logprobs
    }
}

impl TopKDistribution {
    /// Window size bound: at most `k` entries, every probability in (0, 1],
    /// total mass at most 1 + 1e-9.
    pub fn from_logprobs(logprobs: BTreeMap<String, f64>, k: usize) -> Result<Self, String> {
        if k == 0 {
            return Err("window size k must be positive".into());
        }
        if logprobs.len() > k {
            return Err(format!(
                "{} entries exceed the window size k={}",
                logprobs.len(),
                k
            ));
        }
        let mut probs = BTreeMap::new();
        let mut sum = 0.0f64;
        for (token, &lp) in &logprobs {
            let p = lp.exp();
            if !(p > 0.0 && p <= 1.0) {
                return Err(format!(
                    "log-probability {lp} for token {token:?} maps outside (0, 1]"
                ));
            }
            sum += p;
            probs.insert(token.clone(), p);
        }
        if sum > 1.0 + 1e-9 {
            return Err(format!("window mass {sum} exceeds 1 + 1e-9"));
        }
        Ok(TopKDistribution { probs, logprobs, k })
    }

    /// Construction from linear probabilities; log-probabilities are derived.
    pub fn from_probs(probs: BTreeMap<String, f64>, k: usize) -> Result<Self, String> {
        let logprobs = probs.iter().map(|(t, &p)| (t.clone(), p.ln())).collect();
        let mut dist = Self::from_logprobs(logprobs, k)?;
        // Keep the caller's linear values: ln then exp can wobble a ulp.
        dist.probs = probs;
        Ok(dist)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Linear probability of a token, if present in the window.
    pub fn prob(&self, token: &str) -> Option<f64> {
        self.probs.get(token).copied()
    }

    /// Tokens and linear probabilities, in token order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.probs.iter().map(|(t, &p)| (t.as_str(), p))
    }

    /// Smallest probability in the window, over all tokens.
    pub fn min_prob(&self) -> Option<f64> {
        self.probs.values().copied().fold(None, |acc, p| match acc {
            None => Some(p),
            Some(m) => Some(if p < m { p } else { m }),
        })
    }

    pub fn logprobs(&self) -> &BTreeMap<String, f64> {
        &self.logprobs
    }
}

// ─── transcripts ───

/// One recorded generation for one example in one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptRecord {
    pub cell: CellKey,
    pub example_id: String,
    pub rendered_prompt: String,
    pub generation_text: String,
    /// Absent only for text-only ingest paths without log-probabilities.
    pub first_step_topk: Option<TopKDistribution>,
    pub verbal_response_text: Option<String>,
    pub gold_letter: char,
    pub label_set: Vec<char>,
    /// Evaluator-name keyed verdicts appended by scoring stages.
    pub verdicts: BTreeMap<String, EvaluatorVerdict>,
}

impl TranscriptRecord {
    fn validate(&self) -> Result<(), String> {
        validate_labels(&self.label_set)?;
        if !self.label_set.contains(&self.gold_letter) {
            return Err(format!(
                "gold letter {:?} is not in the label set",
                self.gold_letter
            ));
        }
        for (name, verdict) in &self.verdicts {
            if let Some(letter) = verdict.predicted_letter {
                if !self.label_set.contains(&letter) {
                    return Err(format!(
                        "verdict {name:?} predicts {letter:?}, which is outside the label set"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Wire form of a transcript row. Field order is the serialization order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TranscriptWire {
    model: String,
    dataset: String,
    variant: VariantId,
    phrasing: PhrasingId,
    example_id: String,
    prompt: String,
    generation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    topk_logprobs: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    verbal_response: Option<String>,
    gold: char,
    labels: Vec<char>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    verdicts: BTreeMap<String, EvaluatorVerdict>,
}

impl TranscriptWire {
    fn into_record(self) -> Result<TranscriptRecord, String> {
        let first_step_topk = match self.topk_logprobs {
            // Files do not carry the requested window size, so the observed
            // entry count serves as k; the bound still holds by construction.
            Some(map) => {
                let k = map.len().max(1);
                Some(TopKDistribution::from_logprobs(map, k)?)
            }
            None => None,
        };
        let record = TranscriptRecord {
            cell: CellKey {
                model_id: self.model,
                dataset_id: self.dataset,
                variant_id: self.variant,
                phrasing_id: self.phrasing,
            },
            example_id: self.example_id,
            rendered_prompt: self.prompt,
            generation_text: self.generation,
            first_step_topk,
            verbal_response_text: self.verbal_response,
            gold_letter: self.gold,
            label_set: self.labels,
            verdicts: self.verdicts,
        };
        record.validate()?;
        Ok(record)
    }

    fn from_record(record: &TranscriptRecord) -> Self {
        TranscriptWire {
            model: record.cell.model_id.clone(),
            dataset: record.cell.dataset_id.clone(),
            variant: record.cell.variant_id,
            phrasing: record.cell.phrasing_id,
            example_id: record.example_id.clone(),
            prompt: record.rendered_prompt.clone(),
            generation: record.generation_text.clone(),
            topk_logprobs: record.first_step_topk.as_ref().map(|t| t.logprobs().clone()),
            verbal_response: record.verbal_response_text.clone(),
            gold: record.gold_letter,
            labels: record.label_set.clone(),
            verdicts: record.verdicts.clone(),
        }
    }
}

// ─── strict JSONL readers and writers ───

fn read_lines(path: &Path) -> Result<Vec<String>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let _ = idx;
        lines.push(line);
    }
    Ok(lines)
}

/// Read a whole examples corpus. Any malformed line rejects the file.
pub fn read_examples(path: &Path) -> Result<Vec<ExampleRecord>, DataError> {
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in read_lines(path)?.iter().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            return Err(DataError::at(path, lineno, "blank line in JSONL input"));
        }
        let record: ExampleRecord = serde_json::from_str(line)
            .map_err(|e| DataError::at(path, lineno, e.to_string()))?;
        record
            .validate()
            .map_err(|e| DataError::at(path, lineno, e))?;
        if !seen.insert(record.example_id.clone()) {
            return Err(DataError::at(
                path,
                lineno,
                format!("duplicate example_id {:?}", record.example_id),
            ));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_examples(path: &Path, records: &[ExampleRecord]) -> Result<(), DataError> {
    let mut out = Vec::new();
    for record in records {
        record.validate().map_err(DataError::Invalid)?;
        serde_json::to_writer(&mut out, record).expect("example serialization cannot fail");
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Read a transcripts file. Any malformed line rejects the file; top-k
/// log-probabilities are converted to linear scale here and nowhere else.
pub fn read_transcripts(path: &Path) -> Result<Vec<TranscriptRecord>, DataError> {
    let mut records = Vec::new();
    for (idx, line) in read_lines(path)?.iter().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            return Err(DataError::at(path, lineno, "blank line in JSONL input"));
        }
        let wire: TranscriptWire = serde_json::from_str(line)
            .map_err(|e| DataError::at(path, lineno, e.to_string()))?;
        let record = wire
            .into_record()
            .map_err(|e| DataError::at(path, lineno, e))?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_transcripts(path: &Path, records: &[TranscriptRecord]) -> Result<(), DataError> {
    let mut out = Vec::new();
    for record in records {
        record.validate().map_err(DataError::Invalid)?;
        let wire = TranscriptWire::from_record(record);
        serde_json::to_writer(&mut out, &wire).expect("transcript serialization cannot fail");
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

// ─── recorded constrained answers ───

/// One constrained-decoding answer captured from a backend, keyed by cell and
/// example so a later repair pass can replay it without network access.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordedAnswer {
    pub cell: CellKey,
    pub example_id: String,
    pub letter: char,
}

/// Read recorded constrained answers. Any malformed or duplicate
/// (cell, example) line rejects the file.
pub fn read_recorded_answers(path: &Path) -> Result<Vec<RecordedAnswer>, DataError> {
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in read_lines(path)?.iter().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            return Err(DataError::at(path, lineno, "blank line in JSONL input"));
        }
        let record: RecordedAnswer = serde_json::from_str(line)
            .map_err(|e| DataError::at(path, lineno, e.to_string()))?;
        if !seen.insert((record.cell.clone(), record.example_id.clone())) {
            return Err(DataError::at(
                path,
                lineno,
                format!(
                    "duplicate recorded answer for {} example {:?}",
                    record.cell, record.example_id
                ),
            ));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_recorded_answers(path: &Path, records: &[RecordedAnswer]) -> Result<(), DataError> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, record).expect("recorded answer serialization cannot fail");
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Write via a temporary file and rename, so interrupted runs never leave a
/// half-written artifact behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    let mut file = File::create(&tmp).map_err(io_err)?;
    file.write_all(bytes).map_err(io_err)?;
    file.sync_all().map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

/// Read a whole file as bytes, mapped into [`DataError`].
pub fn read_bytes(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(buf)
}

/// Group transcripts by cell, preserving within-cell input order.
pub fn group_by_cell(records: Vec<TranscriptRecord>) -> BTreeMap<CellKey, Vec<TranscriptRecord>> {
    let mut cells: BTreeMap<CellKey, Vec<TranscriptRecord>> = BTreeMap::new();
    for record in records {
        cells.entry(record.cell.clone()).or_default().push(record);
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::{EvaluatorVerdict, ExtractionRule};
    use proptest::prelude::*;

    fn example(id: &str, n_choices: usize, gold: char) -> ExampleRecord {
        ExampleRecord {
            example_id: id.to_string(),
            dataset_id: "demo".to_string(),
            question: format!("Question text for {id}?"),
            choices: (0..n_choices)
                .map(|i| Choice {
                    letter: LETTERS[i],
                    text: format!("choice {i}"),
                })
                .collect(),
            gold,
        }
    }

    fn transcript(id: &str) -> TranscriptRecord {
        let mut logprobs = BTreeMap::new();
        logprobs.insert("A".to_string(), -0.105);
        logprobs.insert(" B".to_string(), -2.42);
        logprobs.insert("The".to_string(), -4.6);
        TranscriptRecord {
            cell: CellKey {
                model_id: "model-x".to_string(),
                dataset_id: "demo".to_string(),
                variant_id: VariantId::SurfaceParaphrase,
                phrasing_id: PhrasingId::Decimal01,
            },
            example_id: id.to_string(),
            rendered_prompt: format!("prompt for {id}"),
            generation_text: "A".to_string(),
            first_step_topk: Some(TopKDistribution::from_logprobs(logprobs, 200).unwrap()),
            verbal_response_text: Some("0.8".to_string()),
            gold_letter: 'A',
            label_set: vec!['A', 'B', 'C', 'D'],
            verdicts: BTreeMap::new(),
        }
    }

    #[test]
    fn examples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("examples.jsonl");
        let records = vec![example("e1", 4, 'B'), example("e2", 2, 'A')];
        write_examples(&path, &records).unwrap();
        let back = read_examples(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn transcripts_reserialize_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("transcripts.jsonl");
        let mut with_verdict = transcript("e3");
        with_verdict.verdicts.insert(
            "first_char".to_string(),
            EvaluatorVerdict {
                predicted_letter: Some('A'),
                rule_fired: ExtractionRule::FirstChar,
                correct: Some(true),
            },
        );
        let records = vec![transcript("e1"), transcript("e2"), with_verdict];
        write_transcripts(&path, &records).unwrap();
        let first = read_bytes(&path).unwrap();

        let back = read_transcripts(&path).unwrap();
        assert_eq!(back, records);
        let path2 = dir.path().join("again.jsonl");
        write_transcripts(&path2, &back).unwrap();
        let second = read_bytes(&path2).unwrap();
        assert_eq!(first, second, "round trip must be byte-identical");
    }

    #[test]
    fn malformed_line_is_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&TranscriptWire::from_record(&transcript("e1"))).unwrap();
        std::fs::write(&path, format!("{good}\nnot json at all\n")).unwrap();
        let err = read_transcripts(&path).unwrap_err();
        match err {
            DataError::Line { line, .. } => assert_eq!(line, 2),
            other => panic!("expected line error, got {other:?}"),
        }
    }

    #[test]
    fn misspelled_field_is_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&TranscriptWire::from_record(&transcript("e1"))).unwrap();
        let bad = good.replace("\"topk_logprobs\"", "\"topk_logprob\"");
        assert_ne!(good, bad);
        std::fs::write(&path, format!("{bad}\n")).unwrap();
        let err = read_transcripts(&path).unwrap_err().to_string();
        assert!(err.contains(":1:"), "error must name the line: {err}");
        assert!(err.contains("topk_logprob"), "error must name the field: {err}");
    }

    #[test]
    fn duplicate_example_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        let a = serde_json::to_string(&example("e1", 4, 'A')).unwrap();
        std::fs::write(&path, format!("{a}\n{a}\n")).unwrap();
        let err = read_examples(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn gold_outside_labels_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gold.jsonl");
        let bad = example("e1", 2, 'C');
        std::fs::write(&path, format!("{}\n", serde_json::to_string(&bad).unwrap())).unwrap();
        let err = read_examples(&path).unwrap_err().to_string();
        assert!(err.contains("gold"), "{err}");
    }

    #[test]
    fn non_contiguous_choice_letters_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut bad = example("e1", 3, 'A');
        bad.choices[2].letter = 'D';
        std::fs::write(&path, format!("{}\n", serde_json::to_string(&bad).unwrap())).unwrap();
        let err = read_examples(&path).unwrap_err().to_string();
        assert!(err.contains("contiguous"), "{err}");
    }

    #[test]
    fn topk_invariants_are_enforced() {
        let mut over = BTreeMap::new();
        over.insert("A".to_string(), -0.01);
        over.insert("B".to_string(), -0.01);
        assert!(TopKDistribution::from_logprobs(over, 200).is_err());

        let mut positive = BTreeMap::new();
        positive.insert("A".to_string(), 0.5);
        assert!(TopKDistribution::from_logprobs(positive, 200).is_err());

        let mut fine = BTreeMap::new();
        fine.insert("A".to_string(), 0.0);
        let dist = TopKDistribution::from_logprobs(fine.clone(), 200).unwrap();
        assert_eq!(dist.prob("A"), Some(1.0));
        assert!(TopKDistribution::from_logprobs(fine, 0).is_err());
    }

    #[test]
    fn group_by_cell_preserves_input_order_within_cells() {
        let mut t1 = transcript("e1");
        let mut t2 = transcript("e2");
        let mut t3 = transcript("e3");
        t2.cell.variant_id = VariantId::ImplicitFraming;
        t1.cell.variant_id = VariantId::ImplicitFraming;
        t3.cell.variant_id = VariantId::ImplicitFraming;
        let grouped = group_by_cell(vec![t1.clone(), t2.clone(), t3.clone()]);
        assert_eq!(grouped.len(), 1);
        let rows = grouped.values().next().unwrap();
        let ids: Vec<_> = rows.iter().map(|r| r.example_id.as_str()).collect();
        assert_eq!(ids, vec!["e1", "e2", "e3"]);
    }

    proptest! {
        #[test]
        fn arbitrary_valid_transcripts_round_trip(
            n_labels in 2usize..=10,
            gold_idx in 0usize..10,
            gen in "[ -~]{0,40}",
            verbal in proptest::option::of("[ -~]{0,20}"),
            probs in proptest::collection::btree_map("[a-zA-Z ]{1,6}", 1e-6f64..0.2, 0..5),
        ) {
            let gold_idx = gold_idx % n_labels;
            let mut record = transcript("p1");
            record.label_set = letter_prefix(n_labels);
            record.gold_letter = record.label_set[gold_idx];
            record.generation_text = gen;
            record.verbal_response_text = verbal;
            record.first_step_topk = if probs.is_empty() {
                None
            } else {
                Some(TopKDistribution::from_probs(probs, 200).unwrap())
            };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.jsonl");
            write_transcripts(&path, std::slice::from_ref(&record)).unwrap();
            let back = read_transcripts(&path).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].cell, &record.cell);
            prop_assert_eq!(&back[0].generation_text, &record.generation_text);
            prop_assert_eq!(&back[0].verbal_response_text, &record.verbal_response_text);
            prop_assert_eq!(&back[0].label_set, &record.label_set);
        }
    }
}
