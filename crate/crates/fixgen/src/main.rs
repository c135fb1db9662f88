//! Deterministic fixture generator.
//!
//! Writes three corpora under `fixtures/`, each engineered so its metric
//! outcomes are known in advance and re-derivable by hand:
//!
//! * `cot_corpus/` — 500 chain-of-thought transcripts where the first-character
//!   evaluator almost always misses but every row carries an explicit final
//!   answer marker, so the evaluator gap is large and exactly known.
//! * `mmlu_threshold/` — 15 cells (5 models x 3 variants) whose verbal parse
//!   rates straddle the 0.70 / 0.80 / 0.90 thresholds, with per-cell verbal
//!   confidence and accuracy chosen to pin the threshold-sensitivity table.
//! * `arc_demo/` — a small end-to-end corpus (examples, per-cell transcripts,
//!   recorded constrained answers) for driving the full offline pipeline.
//!
//! Every engineered property is re-checked here after generation; a mismatch
//! aborts instead of writing misleading fixtures.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{ensure, Context, Result};
use clap::Parser;
use relaudit::datamodel::{
    letter_prefix, write_examples, write_recorded_answers, write_transcripts, CellKey, Choice,
    ExampleRecord, PhrasingId, RecordedAnswer, TopKDistribution, TranscriptRecord, VariantId,
    LETTERS,
};
use relaudit::extraction::{
    extract_pred_letter, parse_verbal_confidence, regex_reparse, ExtractionRule, EVAL_FIRST_CHAR,
};
use relaudit::prompts::{builtin_templates, make_fewshot_indices, make_sample_plan, render_prompt, TaskType};
use relaudit::rng::seeded_rng;

#[derive(Parser)]
#[command(about = "Generate the deterministic fixture corpora used by the test suites")]
struct Args {
    /// Output directory; each fixture family lands in its own subdirectory.
    #[arg(long, default_value = "fixtures")]
    out: PathBuf,
}

fn main() -> Result<()> {
    let args = Args::parse();
    write_cot_corpus(&args.out.join("cot_corpus"))?;
    write_mmlu_threshold(&args.out.join("mmlu_threshold"))?;
    write_arc_demo(&args.out.join("arc_demo"))?;
    Ok(())
}

fn next_letter(letter: char, n_labels: usize) -> char {
    let idx = (letter as u8 - b'A') as usize;
    LETTERS[(idx + 1) % n_labels]
}

fn topk_pair(main: char, n_labels: usize) -> TopKDistribution {
    let alt = next_letter(main, n_labels);
    let probs: BTreeMap<String, f64> =
        BTreeMap::from([(main.to_string(), 0.62), (alt.to_string(), 0.23)]);
    TopKDistribution::from_probs(probs, 200).expect("two-entry window is always valid")
}

// ─── cot corpus: large first-char vs marker gap ───

const COT_ROWS: usize = 500;

// Openers whose first letter is outside A..D, so the first-character rule
// cannot fire on them.
const COT_OPENERS: [&str; 10] = [
    "The", "Looking", "Given", "To", "We", "Since", "Overall", "First", "Let", "It",
];

fn write_cot_corpus(dir: &std::path::Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let labels = letter_prefix(4);
    let cell = CellKey {
        model_id: "llama-3.2-3b".into(),
        dataset_id: "arc_challenge".into(),
        variant_id: VariantId::FormatChange,
        phrasing_id: PhrasingId::Decimal01,
    };

    let mut rng = seeded_rng(42, "cot_corpus");
    let mut records = Vec::with_capacity(COT_ROWS);
    let mut first_char_hits = 0usize;
    let mut regex_hits = 0usize;
    for i in 0..COT_ROWS {
        let drawn = LETTERS[rng.next_below(4) as usize];
        // Ten rows open with a label letter on purpose; their gold is forced
        // to match so the first-character accuracy is exactly 10/500.
        let hittable = i % 50 == 7;
        let gold = if hittable { 'B' } else { drawn };
        let generation = if hittable {
            format!("Because the premise pins the outcome, case {i} resolves without a tie.\nFinal answer: B")
        } else {
            let opener = COT_OPENERS[i % COT_OPENERS.len()];
            format!(
                "{opener} comparison for case {i} favours the stated relation over the distractors.\nFinal answer: {gold}"
            )
        };

        let fc = extract_pred_letter(&generation, &labels);
        if hittable {
            ensure!(
                fc.predicted_letter == Some('B') && fc.rule_fired == ExtractionRule::FirstChar,
                "row {i}: engineered first-char hit did not fire"
            );
        } else {
            ensure!(
                fc.predicted_letter.is_none(),
                "row {i}: first-char chain unexpectedly extracted a letter"
            );
        }
        if fc.predicted_letter == Some(gold) {
            first_char_hits += 1;
        }
        let rx = regex_reparse(&generation, &labels);
        ensure!(
            rx.predicted_letter == Some(gold) && rx.rule_fired == ExtractionRule::RegexMarker,
            "row {i}: answer marker did not parse back to gold"
        );
        regex_hits += 1;

        records.push(TranscriptRecord {
            cell: cell.clone(),
            example_id: format!("cot-{i:03}"),
            rendered_prompt: format!(
                "Case {i}: pick the option that satisfies the stated relation.\nA. candidate one\nB. candidate two\nC. candidate three\nD. candidate four"
            ),
            generation_text: generation,
            first_step_topk: None,
            verbal_response_text: None,
            gold_letter: gold,
            label_set: labels.clone(),
            verdicts: BTreeMap::new(),
        });
    }
    ensure!(first_char_hits == 10, "expected 10 first-char hits, got {first_char_hits}");
    ensure!(regex_hits == COT_ROWS, "expected every row to carry a marker");

    let path = dir.join("transcripts.jsonl");
    write_transcripts(&path, &records)?;
    println!(
        "cot_corpus: {} rows, first-char accuracy {:.3}, marker accuracy {:.3} -> {}",
        COT_ROWS,
        first_char_hits as f64 / COT_ROWS as f64,
        regex_hits as f64 / COT_ROWS as f64,
        path.display()
    );
    Ok(())
}

// ─── threshold-sensitivity corpus: parse rates straddling the thresholds ───

struct ThresholdCellPlan {
    model: &'static str,
    variant: VariantId,
    parsed: usize,
    correct_parsed: usize,
    verbal: &'static str,
}

const THRESHOLD_ROWS_PER_CELL: usize = 50;

const THRESHOLD_CELLS: [ThresholdCellPlan; 15] = {
    use VariantId::{ImplicitFraming as IF, InstructionReorder as IR, SurfaceParaphrase as SP};
    [
        ThresholdCellPlan { model: "llama-3.2-3b", variant: SP, parsed: 42, correct_parsed: 0, verbal: "0.64" },
        ThresholdCellPlan { model: "llama-3.2-3b", variant: IR, parsed: 50, correct_parsed: 10, verbal: "0.78" },
        ThresholdCellPlan { model: "llama-3.2-3b", variant: IF, parsed: 45, correct_parsed: 9, verbal: "0.78" },
        ThresholdCellPlan { model: "phi-4-mini", variant: SP, parsed: 38, correct_parsed: 0, verbal: "0.626" },
        ThresholdCellPlan { model: "phi-4-mini", variant: IR, parsed: 50, correct_parsed: 10, verbal: "0.808" },
        ThresholdCellPlan { model: "phi-4-mini", variant: IF, parsed: 50, correct_parsed: 10, verbal: "0.808" },
        ThresholdCellPlan { model: "gemma-3-4b", variant: SP, parsed: 50, correct_parsed: 10, verbal: "0.984" },
        ThresholdCellPlan { model: "gemma-3-4b", variant: IR, parsed: 50, correct_parsed: 10, verbal: "0.984" },
        ThresholdCellPlan { model: "gemma-3-4b", variant: IF, parsed: 50, correct_parsed: 10, verbal: "0.984" },
        ThresholdCellPlan { model: "mistral-7b", variant: SP, parsed: 21, correct_parsed: 0, verbal: "0.5" },
        ThresholdCellPlan { model: "mistral-7b", variant: IR, parsed: 50, correct_parsed: 10, verbal: "0.907" },
        ThresholdCellPlan { model: "mistral-7b", variant: IF, parsed: 50, correct_parsed: 10, verbal: "0.907" },
        ThresholdCellPlan { model: "qwen-2.5-7b", variant: SP, parsed: 50, correct_parsed: 10, verbal: "0.873" },
        ThresholdCellPlan { model: "qwen-2.5-7b", variant: IR, parsed: 50, correct_parsed: 10, verbal: "0.873" },
        ThresholdCellPlan { model: "qwen-2.5-7b", variant: IF, parsed: 50, correct_parsed: 10, verbal: "0.873" },
    ]
};

fn write_mmlu_threshold(dir: &std::path::Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let labels = letter_prefix(10);
    let mut records = Vec::with_capacity(THRESHOLD_CELLS.len() * THRESHOLD_ROWS_PER_CELL);

    for plan in &THRESHOLD_CELLS {
        ensure!(plan.correct_parsed <= plan.parsed && plan.parsed <= THRESHOLD_ROWS_PER_CELL);
        let value: f64 = plan.verbal.parse().expect("verbal value is a bare decimal");
        ensure!(
            parse_verbal_confidence(plan.verbal, PhrasingId::Decimal01) == Some(value),
            "verbal value {:?} must parse to itself",
            plan.verbal
        );
        let cell = CellKey {
            model_id: plan.model.into(),
            dataset_id: "mmlu_pro".into(),
            variant_id: plan.variant,
            phrasing_id: PhrasingId::Decimal01,
        };
        for i in 0..THRESHOLD_ROWS_PER_CELL {
            let gold = LETTERS[i % 10];
            let wrong = LETTERS[(i + 3) % 10];
            let pred = if i < plan.correct_parsed { gold } else { wrong };
            let parsed = i < plan.parsed;
            let generation = format!("{pred}. The option {pred} fits best for item {i}.");
            let verdict = extract_pred_letter(&generation, &labels).scored(gold);
            ensure!(
                verdict.predicted_letter == Some(pred)
                    && verdict.rule_fired == ExtractionRule::FirstChar,
                "threshold row {i} of {cell}: first-char rule must extract {pred}"
            );
            let verbal = if parsed {
                plan.verbal.to_string()
            } else {
                "I cannot commit to a number here.".to_string()
            };
            ensure!(
                parse_verbal_confidence(&verbal, PhrasingId::Decimal01).is_some() == parsed,
                "threshold row {i} of {cell}: verbal parse state mismatch"
            );
            records.push(TranscriptRecord {
                cell: cell.clone(),
                example_id: format!("mmlu-{i:02}"),
                rendered_prompt: format!("Item {i}: choose the best option among A through J."),
                generation_text: generation,
                first_step_topk: Some(topk_pair(pred, 10)),
                verbal_response_text: Some(verbal),
                gold_letter: gold,
                label_set: labels.clone(),
                verdicts: BTreeMap::from([(EVAL_FIRST_CHAR.to_string(), verdict)]),
            });
        }
    }

    let path = dir.join("transcripts.jsonl");
    write_transcripts(&path, &records)?;
    println!(
        "mmlu_threshold: {} rows across {} cells -> {}",
        records.len(),
        THRESHOLD_CELLS.len(),
        path.display()
    );
    Ok(())
}

// ─── end-to-end demo corpus ───

const DEMO_SPLIT: usize = 120;
const DEMO_SAMPLE: usize = 100;
const DEMO_SEED: u64 = 42;
const DEMO_MODEL: &str = "llama-3.2-3b";
const DEMO_DATASET: &str = "arc_challenge";

// Per-variant hit counts for the letter-first cells: accuracies 0.74 / 0.78 /
// 0.70 / 0.76, so the non-format-change spread is exactly 0.08.
fn demo_hits(variant: VariantId) -> usize {
    match variant {
        VariantId::SurfaceParaphrase => 74,
        VariantId::InstructionReorder => 78,
        VariantId::Fewshot3 => 70,
        VariantId::ImplicitFraming => 76,
        VariantId::FormatChange => unreachable!("format_change rows are chain-of-thought"),
    }
}

const DEMO_FC_BODIES: [&str; 8] = [
    "The relation behind statement {} narrows the field before any choice is named.",
    "Looking at statement {}, two readings compete and the stricter one survives.",
    "Given statement {}, the premises rule out the loose readings right away.",
    "We can drop the readings that contradict statement {} and keep the strict one.",
    "Since statement {} fixes the relation, only the strict reading survives.",
    "To settle statement {}, compare the strict reading against the loose ones.",
    "Overall, statement {} leaves little room once the relation is pinned down.",
    "It helps to restate statement {} before committing to a reading.",
];

// Marker rows, wrong-marker rows, and recorded-answer hits in the
// format_change cell: regex accuracy 55/100, constrained accuracy 74/100.
const DEMO_FC_MARKER_GOLD: usize = 55;
const DEMO_FC_MARKER_ANY: usize = 60;
const DEMO_FC_CONSTRAINED_HITS: usize = 74;

fn write_arc_demo(dir: &std::path::Path) -> Result<()> {
    let transcripts_dir = dir.join("transcripts");
    fs::create_dir_all(&transcripts_dir)
        .with_context(|| format!("creating {}", transcripts_dir.display()))?;

    let examples: Vec<ExampleRecord> = (0..DEMO_SPLIT)
        .map(|i| ExampleRecord {
            example_id: format!("arc-{i:03}"),
            dataset_id: DEMO_DATASET.into(),
            question: format!("Which candidate completes statement {i}?"),
            choices: (0..4)
                .map(|c| Choice {
                    letter: LETTERS[c],
                    text: format!("candidate {} for statement {}", c + 1, i),
                })
                .collect(),
            gold: LETTERS[i % 4],
        })
        .collect();
    write_examples(&dir.join("examples.jsonl"), &examples)?;

    let plan = make_sample_plan(DEMO_DATASET, DEMO_SPLIT, DEMO_SAMPLE, DEMO_SEED)?;
    let fewshot_indices = make_fewshot_indices(&plan, DEMO_SPLIT)?;
    let fewshot: Vec<ExampleRecord> = fewshot_indices.iter().map(|&i| examples[i].clone()).collect();
    let templates = builtin_templates(TaskType::Reasoning);
    let labels = letter_prefix(4);

    // First-char hits in the chain-of-thought cell: the first five sampled
    // rows among the gold-marker rows whose gold letter is B open with
    // "Because", so the brittle rule extracts B and happens to be right.
    let because_rows: Vec<usize> = plan.indices[..DEMO_FC_MARKER_GOLD]
        .iter()
        .enumerate()
        .filter(|(_, &idx)| examples[idx].gold == 'B')
        .map(|(j, _)| j)
        .take(5)
        .collect();
    ensure!(because_rows.len() == 5, "sample must contain five gold-B marker rows");

    let mut recorded = Vec::with_capacity(DEMO_SAMPLE);
    for variant in VariantId::ALL {
        let cell = CellKey {
            model_id: DEMO_MODEL.into(),
            dataset_id: DEMO_DATASET.into(),
            variant_id: variant,
            phrasing_id: PhrasingId::Decimal01,
        };
        let template = templates.get(variant);
        let shots: &[ExampleRecord] = if variant == VariantId::Fewshot3 { &fewshot } else { &[] };

        let mut records = Vec::with_capacity(DEMO_SAMPLE);
        let mut first_char_hits = 0usize;
        let mut regex_hits = 0usize;
        let mut parsed_rows = 0usize;
        for (j, &idx) in plan.indices.iter().enumerate() {
            let example = &examples[idx];
            let gold = example.gold;
            let wrong = next_letter(gold, 4);
            let (generation, intended) = if variant == VariantId::FormatChange {
                let body = if because_rows.contains(&j) {
                    format!("Because the premise pins the outcome, statement {idx} resolves cleanly.")
                } else {
                    DEMO_FC_BODIES[j % DEMO_FC_BODIES.len()].replacen("{}", &idx.to_string(), 1)
                };
                if j < DEMO_FC_MARKER_GOLD {
                    (format!("{body}\nFinal answer: {gold}"), gold)
                } else if j < DEMO_FC_MARKER_ANY {
                    (format!("{body}\nFinal answer: {wrong}"), wrong)
                } else {
                    (body, wrong)
                }
            } else {
                let pred = if j < demo_hits(variant) { gold } else { wrong };
                (format!("{pred}. Option {pred} matches statement {idx} directly."), pred)
            };

            let fc = extract_pred_letter(&generation, &labels);
            if fc.predicted_letter == Some(gold) {
                first_char_hits += 1;
            }
            if regex_reparse(&generation, &labels).predicted_letter == Some(gold) {
                regex_hits += 1;
            }

            let verbal = if j % 10 == 7 {
                "Hard to say.".to_string()
            } else if intended == gold {
                "0.85".to_string()
            } else {
                "0.7".to_string()
            };
            if parse_verbal_confidence(&verbal, PhrasingId::Decimal01).is_some() {
                parsed_rows += 1;
            }

            if variant == VariantId::FormatChange {
                recorded.push(RecordedAnswer {
                    cell: cell.clone(),
                    example_id: example.example_id.clone(),
                    letter: if j < DEMO_FC_CONSTRAINED_HITS { gold } else { wrong },
                });
            }

            records.push(TranscriptRecord {
                cell: cell.clone(),
                example_id: example.example_id.clone(),
                rendered_prompt: render_prompt(template, example, shots)?,
                generation_text: generation,
                first_step_topk: Some(topk_pair(intended, 4)),
                verbal_response_text: Some(verbal),
                gold_letter: gold,
                label_set: labels.clone(),
                verdicts: BTreeMap::new(),
            });
        }

        ensure!(parsed_rows == 90, "{cell}: expected a 0.90 verbal parse rate");
        if variant == VariantId::FormatChange {
            ensure!(first_char_hits == 5, "{cell}: expected 5 first-char hits, got {first_char_hits}");
            ensure!(regex_hits == DEMO_FC_MARKER_GOLD, "{cell}: expected {DEMO_FC_MARKER_GOLD} marker hits, got {regex_hits}");
        } else {
            ensure!(
                first_char_hits == demo_hits(variant) && regex_hits == demo_hits(variant),
                "{cell}: expected {} hits, got first-char {first_char_hits} / regex {regex_hits}",
                demo_hits(variant)
            );
        }

        let file = transcripts_dir.join(format!(
            "{}_{}_{}_{}.jsonl",
            cell.model_id, cell.dataset_id, cell.variant_id, cell.phrasing_id
        ));
        write_transcripts(&file, &records)?;
        println!(
            "arc_demo: {} rows, first-char accuracy {:.2} -> {}",
            records.len(),
            first_char_hits as f64 / DEMO_SAMPLE as f64,
            file.display()
        );
    }

    let recorded_hits = recorded
        .iter()
        .zip(plan.indices.iter())
        .filter(|(answer, &idx)| answer.letter == examples[idx].gold)
        .count();
    ensure!(recorded_hits == DEMO_FC_CONSTRAINED_HITS, "recorded answers must hit gold {DEMO_FC_CONSTRAINED_HITS} times");
    let recorded_path = dir.join("recorded_answers.jsonl");
    write_recorded_answers(&recorded_path, &recorded)?;
    println!(
        "arc_demo: {} recorded constrained answers, accuracy {:.2} -> {}",
        recorded.len(),
        recorded_hits as f64 / DEMO_SAMPLE as f64,
        recorded_path.display()
    );
    Ok(())
}
