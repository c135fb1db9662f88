//! Answer-letter evaluators and the verbal-confidence parser.
//!
//! Three evaluators produce verdicts over the same generations:
//!
//! 1. the first-character chain (`extract_pred_letter`), cheap and brittle;
//! 2. the regex re-parse (`regex_reparse`), which hunts for explicit answer
//!    markers before falling back to the chain;
//! 3. the constrained re-ask, whose continuation prompt is built here and
//!    issued by the client module.
//!
//! A verdict always records which rule fired, so downstream tables can
//! attribute every accuracy number to the evaluator logic that produced it.

use std::collections::BTreeSet;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{PhrasingId, TranscriptRecord};

/// Verdict-map keys used by the scoring stages.
pub const EVAL_FIRST_CHAR: &str = "first_char";
pub const EVAL_REGEX: &str = "regex";
pub const EVAL_CONSTRAINED: &str = "constrained";

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("verbal parse rate is undefined for an empty cell")]
    EmptyCell,
}

/// Which extraction rule produced a predicted letter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionRule {
    FirstChar,
    LineScan,
    FallbackFirstChar,
    RegexMarker,
    RegexTailScan,
    Constrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorVerdict {
    pub predicted_letter: Option<char>,
    pub rule_fired: ExtractionRule,
    /// Filled when the verdict is scored against a gold letter.
    pub correct: Option<bool>,
}

impl EvaluatorVerdict {
    fn unscored(predicted_letter: Option<char>, rule_fired: ExtractionRule) -> Self {
        EvaluatorVerdict {
            predicted_letter,
            rule_fired,
            correct: None,
        }
    }

    /// Score against the gold letter. A missing prediction is incorrect.
    pub fn scored(mut self, gold: char) -> Self {
        self.correct = Some(self.predicted_letter == Some(gold));
        self
    }
}

/// Strip leading whitespace, bullet markers, numbered-list prefixes, and
/// punctuation from a line. Never strips letters or bare digit runs.
fn strip_lead(line: &str) -> &str {
    let mut s = line;
    loop {
        let t = s.trim_start();
        // Numbered-list prefix: digits directly followed by '.' or ')'.
        let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits > 0 {
            let after = &t[digits..];
            if let Some(rest) = after.strip_prefix('.').or_else(|| after.strip_prefix(')')) {
                s = rest;
                continue;
            }
        }
        match t.chars().next() {
            Some(c) if is_strippable(c) => s = &t[c.len_utf8()..],
            _ => return t,
        }
    }
}

fn is_strippable(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '•' | '‘' | '’' | '“' | '”' | '–' | '—')
}

/// A stripped fragment counts as a standalone answer iff it is exactly one
/// label letter with at most one trailing '.', ')' or ':'.
fn standalone_letter(fragment: &str, label_set: &[char]) -> Option<char> {
    let fragment = fragment.trim_end();
    let mut chars = fragment.chars();
    let first = chars.next()?;
    if !label_set.contains(&first) {
        return None;
    }
    match chars.next() {
        None => Some(first),
        Some(p) if matches!(p, '.' | ')' | ':') && chars.next().is_none() => Some(first),
        _ => None,
    }
}

/// First-character evaluator chain.
///
/// 1. If the stripped first non-empty line begins with a label letter, that
///    letter wins (`first_char`).
/// 2. Otherwise scan lines last to first for a standalone letter
///    (`line_scan`).
/// 3. Otherwise fall back to the raw first character of the
///    whitespace-trimmed generation (`fallback_first_char`); the prediction
///    is present only when that character happens to be a label letter.
pub fn extract_pred_letter(generation: &str, label_set: &[char]) -> EvaluatorVerdict {
    if let Some(line) = generation.lines().find(|l| !l.trim().is_empty()) {
        let stripped = strip_lead(line);
        if let Some(first) = stripped.chars().next() {
            if label_set.contains(&first) {
                return EvaluatorVerdict::unscored(Some(first), ExtractionRule::FirstChar);
            }
        }
        for line in generation.lines().rev() {
            if let Some(letter) = standalone_letter(strip_lead(line), label_set) {
                return EvaluatorVerdict::unscored(Some(letter), ExtractionRule::LineScan);
            }
        }
    }
    let raw = generation.trim_start().chars().next();
    let letter = raw.filter(|c| label_set.contains(c));
    EvaluatorVerdict::unscored(letter, ExtractionRule::FallbackFirstChar)
}

// Marker patterns, tried in order. The letter slot tolerates markdown bold,
// quotes, and brackets between the marker and the letter.
static MARKER_RES: Lazy<[Regex; 3]> = Lazy::new(|| {
    let junk = r#"(?:[*_\(\[\{"'`]|\s)*"#;
    [
        Regex::new(&format!(r"(?i)final\s+answer\s*:{junk}([A-Ja-j])\b")).unwrap(),
        Regex::new(&format!(r"(?i)the\s+correct\s+answer\s+is{junk}([A-Ja-j])\b")).unwrap(),
        Regex::new(&format!(r"(?i)answer\s*:{junk}([A-Ja-j])\b")).unwrap(),
    ]
});

/// Regex re-parse evaluator.
///
/// Marker patterns are matched case-insensitively in a fixed precedence
/// order; within one pattern the last occurrence wins, so a model that
/// revises its answer is scored on its final statement. When no marker
/// matches, the final 150 characters are scanned backwards for a standalone
/// label letter; when that fails too, the verdict is delegated to
/// [`extract_pred_letter`].
pub fn regex_reparse(generation: &str, label_set: &[char]) -> EvaluatorVerdict {
    for re in MARKER_RES.iter() {
        let hit = re
            .captures_iter(generation)
            .filter_map(|c| {
                let letter = c
                    .get(1)
                    .expect("marker patterns have one capture group")
                    .as_str()
                    .chars()
                    .next()
                    .expect("capture group is one character wide")
                    .to_ascii_uppercase();
                label_set.contains(&letter).then_some(letter)
            })
            .last();
        if let Some(letter) = hit {
            return EvaluatorVerdict::unscored(Some(letter), ExtractionRule::RegexMarker);
        }
    }

    let chars: Vec<char> = generation.chars().collect();
    let tail_start = chars.len().saturating_sub(150);
    let tail: String = chars[tail_start..].iter().collect();
    for token in tail.split_whitespace().rev() {
        if let Some(letter) = standalone_letter(strip_lead(token), label_set) {
            return EvaluatorVerdict::unscored(Some(letter), ExtractionRule::RegexTailScan);
        }
    }

    extract_pred_letter(generation, label_set)
}

/// Continuation prompt for the constrained re-ask path.
pub fn build_constrained_continuation(cot_text: &str) -> String {
    format!("{cot_text}\n\nFinal answer:")
}

// ─── verbal confidence ───

// Maximal number tokens; signs are handled by the preceding-character guard.
static NUMBER_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"\d+\.?\d*|\.\d+").unwrap());
static PERCENT_SUFFIX_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^\s*(?:%|(?i:percent)\b)").unwrap());
static PHRASE_SUFFIX_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^\s+(?i:out\s+of\s+100\b)").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum NumberForm {
    Percent,
    Decimal,
    Phrase,
}

/// Parse a verbal confidence response to a probability in [0, 1].
///
/// Number forms are tried in precedence order: percent ("75%",
/// "75 percent"), then decimal ("0.75", ".75"), then phrase
/// ("75 out of 100"). The parser is strict by design:
///
/// * the first form with any candidate is the matched form; later forms are
///   never consulted once a form has matched;
/// * two or more distinct candidate values of the matched form do not parse;
/// * values outside the form's range are rejected, not clipped (a tolerance
///   of 1e-9 around the bounds absorbs float fuzz only);
/// * partial tokens ("%", "0.") and bare integers without a form suffix do
///   not parse.
///
/// The rules are identical under both phrasings; the `phrasing` argument
/// records which elicitation produced the response but does not change the
/// grammar, so cross-phrasing comparisons are never confounded by the
/// parser.
pub fn parse_verbal_confidence(response: &str, phrasing: PhrasingId) -> Option<f64> {
    let _ = phrasing;
    let mut candidates: Vec<(NumberForm, f64)> = Vec::new();

    for m in NUMBER_RE.find_iter(response) {
        let before = response[..m.start()].chars().next_back();
        if matches!(before, Some(c) if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-')) {
            continue;
        }
        let after = &response[m.end()..];
        let text = m.as_str();

        if PERCENT_SUFFIX_RE.is_match(after) {
            if let Some(v) = parse_plain_number(text) {
                candidates.push((NumberForm::Percent, v));
            }
            continue;
        }
        if PHRASE_SUFFIX_RE.is_match(after) {
            if let Some(v) = parse_plain_number(text) {
                candidates.push((NumberForm::Phrase, v));
            }
            continue;
        }
        // Reject tokens glued to trailing letters or further numerals
        // ("0.8x", "1.2.3"); a sentence-final period is fine.
        let mut after_chars = after.chars();
        match after_chars.next() {
            Some(c) if c.is_ascii_alphabetic() || c.is_ascii_digit() => continue,
            Some('.') if matches!(after_chars.next(), Some(d) if d.is_ascii_digit()) => continue,
            _ => {}
        }
        if text.contains('.') && !text.ends_with('.') {
            if let Some(v) = parse_plain_number(text) {
                candidates.push((NumberForm::Decimal, v));
            }
        }
    }

    for form in [NumberForm::Percent, NumberForm::Decimal, NumberForm::Phrase] {
        let values: Vec<f64> = candidates
            .iter()
            .filter(|(f, _)| *f == form)
            .map(|&(_, v)| v)
            .collect();
        if values.is_empty() {
            continue;
        }
        let distinct: BTreeSet<u64> = values.iter().map(|v| v.to_bits()).collect();
        if distinct.len() > 1 {
            return None;
        }
        let value = values[0];
        let upper = match form {
            NumberForm::Decimal => 1.0,
            NumberForm::Percent | NumberForm::Phrase => 100.0,
        };
        if !(-1e-9..=upper + 1e-9).contains(&value) {
            return None;
        }
        let scaled = value / upper;
        return Some(scaled.clamp(0.0, 1.0));
    }
    None
}

/// Well-formed digits with at most one interior decimal point.
fn parse_plain_number(text: &str) -> Option<f64> {
    if text.ends_with('.') {
        return None;
    }
    text.parse::<f64>().ok()
}

/// Share of a cell's records whose verbal response parses. Records without
/// a verbal response, and unparseable responses, both count against the
/// rate; the denominator is the full cell.
pub fn verbal_parse_rate(records: &[TranscriptRecord]) -> Result<f64, ExtractionError> {
    if records.is_empty() {
        return Err(ExtractionError::EmptyCell);
    }
    let parsed = records
        .iter()
        .filter(|r| {
            r.verbal_response_text
                .as_deref()
                .and_then(|t| parse_verbal_confidence(t, r.cell.phrasing_id))
                .is_some()
        })
        .count();
    Ok(parsed as f64 / records.len() as f64)
}
