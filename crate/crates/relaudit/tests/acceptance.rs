//! Acceptance gate: one test per release criterion.
//!
//! Every test prints a `criterion N: PASS/FAIL` line (visible with
//! `--nocapture`) and enforces pinned tolerances plus, where one applies, a
//! runtime budget. Tolerances are frozen here on purpose: loosening one is a
//! release decision, not a test fix.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use relaudit::bootstrap::{bootstrap_ci, paired_drop_ci, ResampleUnit};
use relaudit::calibration::{ece, token_confidence, TokenConfidence};
use relaudit::client::mock::{MockResponse, MockServer};
use relaudit::client::{BackendConfig, Client};
use relaudit::datamodel::{
    group_by_cell, letter_prefix, read_transcripts, CellKey, PhrasingId, TopKDistribution,
    TranscriptRecord, VariantId,
};
use relaudit::extraction::{
    extract_pred_letter, parse_verbal_confidence, regex_reparse, verbal_parse_rate,
    EVAL_FIRST_CHAR,
};
use relaudit::report::{
    gap_recovery_table, threshold_sensitivity, GapRecoveryInput, ScoredCell, DEFAULT_THRESHOLDS,
};
use relaudit::rng::seeded_rng;
use relaudit::robustness::{size_spread_panel, SpreadRecord};

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(rel)
}

/// Runs one criterion body, prints its verdict line, then re-raises any
/// failure so the test still registers as failed.
fn check(criterion: usize, label: &str, body: impl FnOnce()) {
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(body));
    let verdict = if outcome.is_ok() { "PASS" } else { "FAIL" };
    println!(
        "criterion {criterion}: {verdict} ({label}, {} ms)",
        start.elapsed().as_millis()
    );
    if let Err(panic) = outcome {
        panic::resume_unwind(panic);
    }
}

// ─── criterion 1: rank-correlation panel ───

const PANEL_SIZES: [(&str, f64); 10] = [
    ("llama-3.2-1b", 1.0),
    ("gemma-3-1b", 1.0),
    ("smollm2-1.7b", 1.7),
    ("qwen-2.5-3b", 3.1),
    ("llama-3.2-3b", 3.2),
    ("phi-4-mini", 3.8),
    ("gemma-3-4b", 4.0),
    ("deepseek-r1-7b", 7.0),
    ("mistral-7b", 7.2),
    ("qwen-2.5-7b", 7.6),
];

const PANEL_SPREADS: [(&str, [f64; 10]); 5] = [
    ("sst2", [0.202, 0.296, 0.398, 0.028, 0.270, 0.084, 0.456, 0.916, 0.500, 0.096]),
    ("mnli", [0.110, 0.160, 0.008, 0.402, 0.110, 0.030, 0.254, 0.538, 0.254, 0.218]),
    ("ag_news", [0.414, 0.464, 0.456, 0.610, 0.536, 0.374, 0.494, 0.754, 0.374, 0.236]),
    ("arc_challenge", [0.098, 0.176, 0.056, 0.054, 0.098, 0.046, 0.370, 0.568, 0.104, 0.048]),
    ("mmlu_pro", [0.036, 0.144, 0.110, 0.084, 0.064, 0.106, 0.156, 0.260, 0.014, 0.188]),
];

// Frozen per-dataset targets: rho within 1e-3, t-approximation p within 0.02.
const PANEL_EXPECTED: [(&str, f64, f64); 5] = [
    ("sst2", 0.261, 0.466),
    ("mnli", 0.474, 0.166),
    ("ag_news", -0.244, 0.497),
    ("arc_challenge", 0.015, 0.967),
    ("mmlu_pro", 0.304, 0.393),
];

#[test]
fn criterion_1_size_spread_panel() {
    check(1, "size vs spread rank-correlation panel", || {
        let start = Instant::now();
        let mut records = Vec::new();
        for (dataset, spreads) in PANEL_SPREADS {
            for ((model, _), value) in PANEL_SIZES.iter().zip(spreads) {
                // Three variants at zero and one at `value` realise the
                // target spread exactly.
                let accuracies = BTreeMap::from([
                    (VariantId::SurfaceParaphrase, 0.0),
                    (VariantId::InstructionReorder, value),
                    (VariantId::Fewshot3, 0.0),
                    (VariantId::ImplicitFraming, 0.0),
                ]);
                records.push(SpreadRecord::new(*model, dataset, accuracies).unwrap());
            }
        }
        let sizes: BTreeMap<String, f64> = PANEL_SIZES
            .iter()
            .map(|(model, size)| (model.to_string(), *size))
            .collect();

        let panel = size_spread_panel(&records, &sizes).unwrap();
        assert_eq!(panel.len(), PANEL_EXPECTED.len());
        for (dataset, rho, p_value) in PANEL_EXPECTED {
            let got = &panel[dataset];
            assert_eq!(got.n, 10, "{dataset}: expected all ten models");
            assert!(
                (got.rho - rho).abs() <= 1e-3,
                "{dataset}: rho {} vs {rho}",
                got.rho
            );
            assert!(
                (got.p_value_t - p_value).abs() <= 0.02,
                "{dataset}: p {} vs {p_value}",
                got.p_value_t
            );
        }
        assert!(start.elapsed() < Duration::from_secs(1), "budget 1 s");
    });
}

// ─── criterion 2: gap-recovery arithmetic ───

// Frozen recovery table: (model, non-fc mean, first-char, regex-repaired,
// regex recovery %, constrained-repaired, constrained recovery %).
const RECOVERY_ROWS: [(&str, f64, f64, f64, f64, f64, f64); 5] = [
    ("llama-3.2-3b", 0.751, 0.098, 0.712, 94.0, 0.732, 97.1),
    ("phi-4-mini", 0.842, 0.180, 0.848, 100.9, 0.862, 103.0),
    ("gemma-3-4b", 0.705, 0.198, 0.758, 110.5, 0.786, 116.0),
    ("mistral-7b", 0.783, 0.128, 0.748, 94.7, 0.766, 97.4),
    ("qwen-2.5-7b", 0.897, 0.104, 0.710, 76.4, 0.896, 99.9),
];

#[test]
fn criterion_2_gap_recovery() {
    check(2, "answer-extraction gap recovery", || {
        let start = Instant::now();
        let inputs: Vec<GapRecoveryInput> = RECOVERY_ROWS
            .iter()
            .map(|&(model, nonfc, fc, regex, _, constrained, _)| GapRecoveryInput {
                model_id: model.into(),
                nonfc_mean: nonfc,
                firstchar: fc,
                repaired_regex: regex,
                repaired_constrained: constrained,
            })
            .collect();
        let table = gap_recovery_table(&inputs).unwrap();

        for (row, &(model, _, _, _, rec_regex, _, rec_constrained)) in
            table.rows.iter().zip(&RECOVERY_ROWS)
        {
            assert_eq!(row.model_id, model);
            assert!(
                (row.recovery_regex - rec_regex).abs() <= 0.1,
                "{model}: regex recovery {} vs {rec_regex}",
                row.recovery_regex
            );
            assert!(
                (row.recovery_constrained - rec_constrained).abs() <= 0.1,
                "{model}: constrained recovery {} vs {rec_constrained}",
                row.recovery_constrained
            );
        }

        // The two frozen mean figures come from different aggregation routes:
        // 93.8 is the recovery of the column means (pooled), 102.7 is the
        // mean of the per-model recoveries. The table carries both routes so
        // each figure is checked against the route that produces it, and the
        // opposite route is pinned too to show the disagreement is real.
        assert!((table.pooled_recovery_regex - 93.8).abs() <= 0.1);
        assert!((table.mean_recovery_constrained - 102.7).abs() <= 0.1);
        assert!((table.mean_recovery_regex - 95.3).abs() <= 0.1);
        assert!((table.pooled_recovery_constrained - 102.0).abs() <= 0.1);
        assert!(start.elapsed() < Duration::from_secs(1), "budget 1 s");
    });
}

// ─── criterion 3: ECE against a brute-force oracle ───

/// Independent per-bin oracle: accumulate count, confidence and hit sums per
/// equal-width bin in input order, then total the weighted gaps bin by bin.
fn oracle_ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> f64 {
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0f64; n_bins];
    let mut hit_sum = vec![0.0f64; n_bins];
    for (&conf, &ok) in confidences.iter().zip(correct) {
        let mut idx = (conf * n_bins as f64) as usize;
        if idx >= n_bins {
            idx = n_bins - 1;
        }
        count[idx] += 1;
        conf_sum[idx] += conf;
        if ok {
            hit_sum[idx] += 1.0;
        }
    }
    let n = confidences.len() as f64;
    let mut total = 0.0f64;
    for bin in 0..n_bins {
        if count[bin] == 0 {
            continue;
        }
        let mean_conf = conf_sum[bin] / count[bin] as f64;
        let accuracy = hit_sum[bin] / count[bin] as f64;
        total += (count[bin] as f64 / n) * (accuracy - mean_conf).abs();
    }
    total
}

#[test]
fn criterion_3_ece_oracle_equivalence() {
    check(3, "ECE equals the brute-force oracle bit for bit", || {
        let start = Instant::now();
        let mut rng = seeded_rng(42, "acceptance_ece_oracle");
        for instance in 0..1000 {
            let n = 1 + rng.next_below(50) as usize;
            let mut confidences = Vec::with_capacity(n);
            let mut correct = Vec::with_capacity(n);
            for _ in 0..n {
                // One draw in eight sits exactly on a bin edge to exercise
                // the boundary assignment, including 1.0 into the top bin.
                let conf = if rng.next_below(8) == 0 {
                    rng.next_below(11) as f64 / 10.0
                } else {
                    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
                };
                confidences.push(conf);
                correct.push(rng.next_below(2) == 1);
            }
            let got = ece(&confidences, &correct, 10).unwrap().ece;
            let want = oracle_ece(&confidences, &correct, 10);
            assert_eq!(
                got.to_bits(),
                want.to_bits(),
                "instance {instance}: {got} vs oracle {want}"
            );
        }
        assert!(start.elapsed() < Duration::from_secs(5), "budget 5 s");
    });
}

// ─── criterion 4: normalisation dominance ───

#[test]
fn criterion_4_normalisation_dominance() {
    check(4, "normalised confidence dominates raw", || {
        let start = Instant::now();
        let mut rng = seeded_rng(42, "acceptance_normalisation");
        let mut n_strict = 0usize;
        let mut n_equal_zero_raw = 0usize;
        let mut n_equal_full_mass = 0usize;
        let mut n_degenerate = 0usize;

        for _ in 0..10_000 {
            let n_labels = 2 + rng.next_below(9) as usize;
            let labels = letter_prefix(n_labels);
            let predicted = labels[rng.next_below(n_labels as u64) as usize];
            let other = labels[(predicted as u8 - b'A' + 1) as usize % n_labels];

            let mode = rng.next_below(10);
            let probs: BTreeMap<String, f64> = match mode {
                // Dyadic full-mass window: label mass is exactly 1 while the
                // predicted letter holds only part of it.
                0 | 1 => BTreeMap::from([
                    (predicted.to_string(), 0.25),
                    (format!(" {predicted}"), 0.25),
                    (other.to_string(), 0.5),
                ]),
                // Predicted letter entirely absent: raw is 0 by definition.
                2 => BTreeMap::from([(other.to_string(), 0.375), ("The".to_string(), 0.25)]),
                // No label letter at all: degenerate window.
                3 => BTreeMap::from([("The".to_string(), 0.5), ("so".to_string(), 0.125)]),
                // Random sub-unit window over several labels plus noise.
                _ => {
                    let total = (100 + rng.next_below(850)) as f64 / 1000.0;
                    let mut weights: Vec<(String, u64)> =
                        vec![(predicted.to_string(), 1 + rng.next_below(999))];
                    if rng.next_below(2) == 0 {
                        weights.push((format!(" {predicted}"), 1 + rng.next_below(999)));
                    }
                    if rng.next_below(2) == 0 {
                        weights.push((other.to_string(), 1 + rng.next_below(999)));
                    }
                    if rng.next_below(2) == 0 {
                        weights.push(("The".to_string(), 1 + rng.next_below(999)));
                    }
                    let sum: u64 = weights.iter().map(|(_, w)| w).sum();
                    weights
                        .into_iter()
                        .map(|(token, w)| (token, total * w as f64 / sum as f64))
                        .collect()
                }
            };
            let window = TopKDistribution::from_probs(probs, 200).unwrap();

            match token_confidence(&window, predicted, &labels).unwrap() {
                TokenConfidence::Degenerate => n_degenerate += 1,
                TokenConfidence::Valid(pair) => {
                    assert!(
                        pair.normalised >= pair.raw,
                        "normalised {} < raw {} (mass {})",
                        pair.normalised,
                        pair.raw,
                        pair.observed_label_mass
                    );
                    // Equality holds exactly when raw is 0 or the observed
                    // label mass is 1; equal raw and label mass does NOT
                    // force equality (the dyadic windows above have
                    // normalised = raw with the letter holding only half the
                    // label mass).
                    let is_equal = pair.normalised == pair.raw;
                    let should_be_equal =
                        pair.raw == 0.0 || pair.observed_label_mass == 1.0;
                    assert_eq!(
                        is_equal, should_be_equal,
                        "raw {} mass {} normalised {}",
                        pair.raw, pair.observed_label_mass, pair.normalised
                    );
                    if !is_equal {
                        n_strict += 1;
                    } else if pair.raw == 0.0 {
                        n_equal_zero_raw += 1;
                    } else {
                        n_equal_full_mass += 1;
                    }
                }
            }
        }

        // Each regime must actually occur, or the characterisation above is
        // vacuous.
        assert!(n_strict >= 4000, "strict cases {n_strict}");
        assert!(n_equal_zero_raw >= 500, "zero-raw equalities {n_equal_zero_raw}");
        assert!(n_equal_full_mass >= 500, "full-mass equalities {n_equal_full_mass}");
        assert!(n_degenerate >= 500, "degenerate windows {n_degenerate}");
        assert!(start.elapsed() < Duration::from_secs(5), "budget 5 s");
    });
}

// ─── criterion 5: evaluator-gap mechanism at desk scale ───

#[test]
fn criterion_5_cot_corpus_gap_mechanism() {
    check(5, "first-char collapse vs marker and constrained repair", || {
        let start = Instant::now();
        let records = read_transcripts(&fixture("cot_corpus/transcripts.jsonl")).unwrap();
        assert_eq!(records.len(), 500);

        let mut first_char_hits = 0usize;
        let mut regex_hits = 0usize;
        let mut pairs: Vec<(bool, bool)> = Vec::with_capacity(records.len());
        for record in &records {
            let fc = extract_pred_letter(&record.generation_text, &record.label_set)
                .scored(record.gold_letter);
            let rx = regex_reparse(&record.generation_text, &record.label_set)
                .scored(record.gold_letter);
            let fc_ok = fc.correct.unwrap();
            let rx_ok = rx.correct.unwrap();
            first_char_hits += fc_ok as usize;
            regex_hits += rx_ok as usize;
            pairs.push((rx_ok, fc_ok));
        }
        let first_char_acc = first_char_hits as f64 / records.len() as f64;
        let regex_acc = regex_hits as f64 / records.len() as f64;
        assert!(first_char_acc <= 0.05, "first-char accuracy {first_char_acc}");
        assert!(regex_acc >= 0.99, "regex accuracy {regex_acc}");

        // Scripted backend: every continuation prompt embeds the row's own
        // answer marker, so the mock replays the letter that follows it.
        let mock = MockServer::respond_with(|request| {
            let prompt = request["prompt"].as_str().unwrap_or("");
            let letter = prompt
                .split("Final answer: ")
                .nth(1)
                .and_then(|rest| rest.chars().next())
                .unwrap_or('?');
            MockResponse::completion(&format!(" {letter}"))
        });
        let client = Client::new(BackendConfig {
            base_url: mock.url(),
            model_name: "mock-model".into(),
            timeout_secs: 10,
            max_in_flight: 4,
            retry_limit: 0,
        })
        .unwrap();
        let mut constrained_hits = 0usize;
        for record in &records {
            let verdict = client
                .constrained_finalize(&record.generation_text, &record.label_set)
                .unwrap()
                .scored(record.gold_letter);
            constrained_hits += verdict.correct.unwrap() as usize;
        }
        assert_eq!(constrained_hits, records.len(), "constrained repair must reach 1.00");

        let cell = &records[0].cell;
        let drop = paired_drop_ci(cell, cell, &pairs, 1000, 42).unwrap();
        assert!(drop.lo > 0.0, "paired drop interval [{}, {}]", drop.lo, drop.hi);
        assert!(start.elapsed() < Duration::from_secs(10), "budget 10 s");
    });
}

// ─── criterion 6: verbal-confidence parser corpus ───

const D: PhrasingId = PhrasingId::Decimal01;
const P: PhrasingId = PhrasingId::Percent0100;

// (response, phrasing, expected). The grammar is phrasing-independent, so a
// handful of cases repeat under the other phrasing to pin that down.
const PARSER_CASES: [(&str, PhrasingId, Option<f64>); 62] = [
    // Percent form.
    ("75%", D, Some(0.75)),
    ("75%", P, Some(0.75)),
    ("50%", P, Some(0.50)),
    ("100%", P, Some(1.0)),
    ("0%", P, Some(0.0)),
    ("I am 95% sure", P, Some(0.95)),
    ("95 %", P, Some(0.95)),
    ("72.5%", P, Some(0.725)),
    ("75 percent", P, Some(0.75)),
    ("75 PERCENT", P, Some(0.75)),
    ("Confidence: 80%.", P, Some(0.80)),
    ("110%", P, None),
    ("-5%", P, None),
    ("100.0001%", P, None),
    // Percent duplicates of one value still parse; distinct values refuse.
    ("75%, definitely 75%", P, Some(0.75)),
    ("75% or maybe 80%", P, None),
    ("roughly 60 percent, possibly 65 percent", P, None),
    // Percent precedence over a later decimal.
    ("75% which is 0.75", P, Some(0.75)),
    ("I'd say 40%, i.e. 0.4", D, Some(0.40)),
    // Decimal form.
    ("0.75", D, Some(0.75)),
    ("0.75", P, Some(0.75)),
    (".75", D, Some(0.75)),
    ("about .9", D, Some(0.90)),
    ("Probability: .66", D, Some(0.66)),
    ("0.0", D, Some(0.0)),
    ("1.0", D, Some(1.0)),
    ("1.00", D, Some(1.0)),
    ("0.725", D, Some(0.725)),
    ("My confidence is 0.8.", D, Some(0.80)),
    ("(0.85)", D, Some(0.85)),
    ("p=0.85", D, Some(0.85)),
    ("confidence 0.8, yes 0.8", D, Some(0.80)),
    ("1.01", D, None),
    ("1.5", D, None),
    ("-0.5", D, None),
    ("0.7 to 0.8", D, None),
    ("maybe 0.75, maybe 0.8, maybe 0.75", D, None),
    ("version 2.0 scores 0.75", D, None),
    // Phrase form.
    ("75 out of 100", D, Some(0.75)),
    ("75 out of 100", P, Some(0.75)),
    ("85 out   of   100.", P, Some(0.85)),
    ("100 out of 100", D, Some(1.0)),
    ("0 out of 100", D, Some(0.0)),
    ("101 out of 100", D, None),
    ("75 out of 100 or 80 out of 100", D, None),
    ("7 out of 10", D, None),
    ("85 out of 1000", D, None),
    // Partial tokens and bare integers.
    ("%", D, None),
    ("0.", D, None),
    ("75", D, None),
    ("75.", D, None),
    ("confidence high, maybe 9", D, None),
    ("9/10", D, None),
    // Glued or malformed numerals.
    ("0.8x", D, None),
    ("1.2.3", D, None),
    ("3e-2", D, None),
    ("v0.75", D, None),
    // No number at all.
    ("", D, None),
    ("I refuse to give a number", D, None),
    ("eighty percent", P, None),
    ("quite sure", P, None),
    // Sentence-final period after a decimal is fine.
    ("0.80.", D, Some(0.80)),
];

fn vpr_record(example_id: &str, verbal: &str) -> TranscriptRecord {
    TranscriptRecord {
        cell: CellKey {
            model_id: "mistral-7b".into(),
            dataset_id: "sst2".into(),
            variant_id: VariantId::SurfaceParaphrase,
            phrasing_id: PhrasingId::Decimal01,
        },
        example_id: example_id.into(),
        rendered_prompt: "prompt".into(),
        generation_text: "A".into(),
        first_step_topk: None,
        verbal_response_text: Some(verbal.into()),
        gold_letter: 'A',
        label_set: vec!['A', 'B'],
        verdicts: BTreeMap::new(),
    }
}

#[test]
fn criterion_6_parser_golden_corpus() {
    check(6, "verbal parser corpus and parse-rate arithmetic", || {
        assert!(PARSER_CASES.len() >= 60);
        for (response, phrasing, expected) in PARSER_CASES {
            let got = parse_verbal_confidence(response, phrasing);
            match (got, expected) {
                (Some(g), Some(e)) => assert!(
                    (g - e).abs() < 1e-12,
                    "{response:?}: parsed {g}, expected {e}"
                ),
                (None, None) => {}
                _ => panic!("{response:?}: parsed {got:?}, expected {expected:?}"),
            }
        }

        // Three of four responses parse: VPR is exactly 0.75.
        let records = vec![
            vpr_record("r0", "0.9"),
            vpr_record("r1", "75%"),
            vpr_record("r2", ".6"),
            vpr_record("r3", "I will not guess."),
        ];
        assert_eq!(verbal_parse_rate(&records).unwrap(), 0.75);
    });
}

// ─── criterion 7: bootstrap coverage and thread invariance ───

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[test]
fn criterion_7_bootstrap_coverage() {
    check(7, "bootstrap coverage near nominal, thread-invariant", || {
        let start = Instant::now();
        let mut covered = 0usize;
        let mut first_trial: Vec<f64> = Vec::new();
        for trial in 0..200 {
            let mut data_rng = seeded_rng(2024, &format!("acceptance_coverage_data_{trial}"));
            let data: Vec<f64> = (0..500)
                .map(|_| if data_rng.next_below(10) < 7 { 1.0 } else { 0.0 })
                .collect();
            if trial == 0 {
                first_trial = data.clone();
            }
            let ci = bootstrap_ci(
                &data,
                mean,
                1000,
                42,
                &format!("acceptance_coverage_trial_{trial}"),
                ResampleUnit::Example,
            )
            .unwrap();
            if ci.lo <= 0.7 && 0.7 <= ci.hi {
                covered += 1;
            }
        }
        assert!(
            (186..=194).contains(&covered),
            "covered {covered} of 200 trials, outside the 93-97% band"
        );

        // The index streams are drawn serially up front, so thread count
        // must not change a single bit of the interval.
        let run = || {
            bootstrap_ci(
                &first_trial,
                mean,
                1000,
                42,
                "acceptance_thread_invariance",
                ResampleUnit::Example,
            )
            .unwrap()
        };
        let reference = run();
        for threads in [1usize, 2, 8] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            let got = pool.install(run);
            assert_eq!(got.point.to_bits(), reference.point.to_bits());
            assert_eq!(got.lo.to_bits(), reference.lo.to_bits(), "{threads} threads");
            assert_eq!(got.hi.to_bits(), reference.hi.to_bits(), "{threads} threads");
        }
        assert!(start.elapsed() < Duration::from_secs(60), "budget 60 s");
    });
}

// ─── criterion 8: threshold-sensitivity stability ───

// Frozen per-model rows: mean signed overconfidence and contributing-cell
// count at thresholds 0.70 / 0.80 / 0.90, in model id order.
const THRESHOLD_EXPECTED: [(&str, [(f64, usize); 3]); 5] = [
    ("gemma-3-4b", [(0.784, 3), (0.784, 3), (0.784, 3)]),
    ("llama-3.2-3b", [(0.600, 3), (0.600, 3), (0.580, 2)]),
    ("mistral-7b", [(0.707, 2), (0.707, 2), (0.707, 2)]),
    ("phi-4-mini", [(0.614, 3), (0.608, 2), (0.608, 2)]),
    ("qwen-2.5-7b", [(0.673, 3), (0.673, 3), (0.673, 3)]),
];

#[test]
fn criterion_8_threshold_sensitivity() {
    check(8, "overconfidence stable across parse-rate thresholds", || {
        let records = read_transcripts(&fixture("mmlu_threshold/transcripts.jsonl")).unwrap();
        assert_eq!(records.len(), 750);
        let cells: Vec<ScoredCell> = group_by_cell(records)
            .into_values()
            .map(|cell_records| ScoredCell::from_records(cell_records, EVAL_FIRST_CHAR).unwrap())
            .collect();
        assert_eq!(cells.len(), 15);

        let rows = threshold_sensitivity(&cells, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(rows.len(), THRESHOLD_EXPECTED.len());
        for (row, (model, expected_cells)) in rows.iter().zip(THRESHOLD_EXPECTED) {
            assert_eq!(row.model_id, model);
            let mut means = Vec::with_capacity(expected_cells.len());
            for (cell, (expected_mean, expected_n)) in row.cells.iter().zip(expected_cells) {
                assert_eq!(
                    cell.n, expected_n,
                    "{model} at {:.2}: contributing cells",
                    cell.threshold
                );
                let got = cell
                    .mean_overconf
                    .expect("every threshold keeps at least one cell per model");
                assert!(
                    (got - expected_mean).abs() <= 0.005,
                    "{model} at {:.2}: mean {got} vs {expected_mean}",
                    cell.threshold
                );
                assert!(got > 0.0, "{model}: overconfidence must stay positive");
                means.push(got);
            }
            let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = means.iter().copied().fold(f64::INFINITY, f64::min);
            assert!(
                max - min <= 0.020 + 1e-9,
                "{model}: threshold sweep moved the mean by {}",
                max - min
            );
        }
    });
}
