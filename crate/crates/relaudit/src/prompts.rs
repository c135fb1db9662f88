//! Prompt variant templates, rendering, and deterministic sampling.
//!
//! Every audit cell renders from one of five perturbation variants per task
//! type. Templates are data, not code: the builtin sets below ship as TOML
//! files and auditors can substitute their own, so the exact wording that
//! produced a number is always inspectable. Rendering is a pure string
//! substitution; given the same template and example it is byte-stable.

use std::collections::BTreeMap;
use std::path::Path;

use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{ExampleRecord, PhrasingId, VariantId};
use crate::rng::{fnv1a64, SplitMix64};

/// Completion budget for confidence elicitation turns.
pub const ELICITATION_MAX_NEW_TOKENS: u32 = 8;

/// Worked examples embedded by the fewshot_3 variant.
pub const FEWSHOT_COUNT: usize = 3;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template file {source_name}: {problem}")]
    BadTemplateFile { source_name: String, problem: String },
    #[error("variant {variant} expects {expected} few-shot examples, got {got}")]
    FewshotCount {
        variant: VariantId,
        expected: usize,
        got: usize,
    },
    #[error("placeholder {{{name}}} left unsubstituted after rendering")]
    Unsubstituted { name: String },
    #[error("model answer is empty; an elicitation turn needs the answer it asks about")]
    EmptyModelAnswer,
    #[error("sample size {sample_size} exceeds split size {split_size}")]
    SampleTooLarge {
        sample_size: usize,
        split_size: usize,
    },
    #[error("sample size must be positive")]
    EmptySample,
    #[error("split has too few examples outside the evaluation sample for {needed} few-shot slots")]
    FewshotExhausted { needed: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Classification,
    Reasoning,
    Qa,
}

impl TaskType {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskType::Classification => "classification",
            TaskType::Reasoning => "reasoning",
            TaskType::Qa => "qa",
        }
    }
}

/// One variant's template for one task type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptVariantTemplate {
    pub variant_id: VariantId,
    pub task_type: TaskType,
    pub template_text: String,
    /// 256 for the reasoning format_change variant (it asks for a chain of
    /// thought), 32 everywhere else.
    pub max_new_tokens: u32,
}

/// The five variants of one task type.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub task_type: TaskType,
    variants: BTreeMap<VariantId, PromptVariantTemplate>,
}

impl TemplateSet {
    pub fn get(&self, variant: VariantId) -> &PromptVariantTemplate {
        self.variants
            .get(&variant)
            .expect("a validated set holds all five variants")
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptVariantTemplate> {
        self.variants.values()
    }
}

#[derive(Deserialize)]
struct TemplateFile {
    task_type: TaskType,
    variants: Vec<TemplateFileVariant>,
}

#[derive(Deserialize)]
struct TemplateFileVariant {
    variant_id: VariantId,
    max_new_tokens: u32,
    template: String,
}

/// Parse and validate one template document.
pub fn parse_template_set(text: &str, source_name: &str) -> Result<TemplateSet, PromptError> {
    let bad = |problem: String| PromptError::BadTemplateFile {
        source_name: source_name.to_string(),
        problem,
    };
    let file: TemplateFile = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
    let mut variants = BTreeMap::new();
    for v in file.variants {
        let template = PromptVariantTemplate {
            variant_id: v.variant_id,
            task_type: file.task_type,
            template_text: v.template,
            max_new_tokens: v.max_new_tokens,
        };
        validate_template(&template).map_err(bad)?;
        if variants.insert(v.variant_id, template).is_some() {
            return Err(bad(format!("duplicate variant {}", v.variant_id)));
        }
    }
    for required in VariantId::ALL {
        if !variants.contains_key(&required) {
            return Err(bad(format!("missing variant {required}")));
        }
    }
    Ok(TemplateSet {
        task_type: file.task_type,
        variants,
    })
}

/// Load a template document from disk.
pub fn load_template_file(path: &Path) -> Result<TemplateSet, PromptError> {
    let text = std::fs::read_to_string(path).map_err(|e| PromptError::BadTemplateFile {
        source_name: path.display().to_string(),
        problem: e.to_string(),
    })?;
    parse_template_set(&text, &path.display().to_string())
}

fn validate_template(t: &PromptVariantTemplate) -> Result<(), String> {
    let count = |needle: &str| t.template_text.matches(needle).count();
    if count("{input}") != 1 {
        return Err(format!(
            "variant {}: {{input}} must appear exactly once",
            t.variant_id
        ));
    }
    let expected_fewshot = usize::from(t.variant_id == VariantId::Fewshot3);
    if count("{fewshot_examples}") != expected_fewshot {
        return Err(format!(
            "variant {}: {{fewshot_examples}} must appear {} times",
            t.variant_id, expected_fewshot
        ));
    }
    for m in PLACEHOLDER_SCAN.find_iter(&t.template_text) {
        let name = m.as_str();
        if !matches!(name, "{input}" | "{label_list}" | "{fewshot_examples}") {
            return Err(format!(
                "variant {}: unknown placeholder {}",
                t.variant_id, name
            ));
        }
    }
    let expected_budget = if t.variant_id == VariantId::FormatChange && t.task_type == TaskType::Reasoning
    {
        256
    } else {
        32
    };
    if t.max_new_tokens != expected_budget {
        return Err(format!(
            "variant {} ({}): max_new_tokens must be {}, got {}",
            t.variant_id,
            t.task_type.as_str(),
            expected_budget,
            t.max_new_tokens
        ));
    }
    Ok(())
}

static PLACEHOLDER_SCAN: Lazy<regex::Regex> =
    Lazy::new(|| regex::Regex::new(r"\{[a-zA-Z_]+\}").unwrap());

static BUILTIN_CLASSIFICATION: Lazy<TemplateSet> = Lazy::new(|| {
    parse_template_set(
        include_str!("../templates/classification.toml"),
        "builtin classification",
    )
    .expect("builtin classification templates are valid")
});
static BUILTIN_REASONING: Lazy<TemplateSet> = Lazy::new(|| {
    parse_template_set(
        include_str!("../templates/reasoning.toml"),
        "builtin reasoning",
    )
    .expect("builtin reasoning templates are valid")
});
static BUILTIN_QA: Lazy<TemplateSet> = Lazy::new(|| {
    parse_template_set(include_str!("../templates/qa.toml"), "builtin qa")
        .expect("builtin qa templates are valid")
});

/// The shipped default template set for a task type.
pub fn builtin_templates(task: TaskType) -> &'static TemplateSet {
    match task {
        TaskType::Classification => &BUILTIN_CLASSIFICATION,
        TaskType::Reasoning => &BUILTIN_REASONING,
        TaskType::Qa => &BUILTIN_QA,
    }
}

// ─── rendering ───

/// Question plus one "X. text" line per choice.
fn input_block(example: &ExampleRecord) -> String {
    let mut block = example.question.clone();
    for choice in &example.choices {
        block.push('\n');
        block.push(choice.letter);
        block.push_str(". ");
        block.push_str(&choice.text);
    }
    block
}

/// Comma-separated label letters: "A, B, C, D".
fn label_list(example: &ExampleRecord) -> String {
    example
        .label_set()
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// One worked few-shot example: the input block plus its gold answer.
fn worked_example(example: &ExampleRecord) -> String {
    format!("{}\nAnswer: {}", input_block(example), example.gold)
}

/// Render a prompt for one example under one variant.
///
/// `fewshot` must hold exactly [`FEWSHOT_COUNT`] examples for the fewshot_3
/// variant and must be empty otherwise. Rendering never alters question or
/// choice text; the five variants differ only in their instruction framing.
pub fn render_prompt(
    template: &PromptVariantTemplate,
    example: &ExampleRecord,
    fewshot: &[ExampleRecord],
) -> Result<String, PromptError> {
    let expected = if template.variant_id == VariantId::Fewshot3 {
        FEWSHOT_COUNT
    } else {
        0
    };
    if fewshot.len() != expected {
        return Err(PromptError::FewshotCount {
            variant: template.variant_id,
            expected,
            got: fewshot.len(),
        });
    }

    let mut rendered = template
        .template_text
        .replace("{input}", &input_block(example));
    rendered = rendered.replace("{label_list}", &label_list(example));
    if expected > 0 {
        let block = fewshot
            .iter()
            .map(worked_example)
            .collect::<Vec<_>>()
            .join("\n\n");
        rendered = rendered.replace("{fewshot_examples}", &block);
    }

    for name in ["input", "label_list", "fewshot_examples"] {
        if rendered.contains(&format!("{{{name}}}")) {
            return Err(PromptError::Unsubstituted {
                name: name.to_string(),
            });
        }
    }
    Ok(rendered)
}

// ─── confidence elicitation ───

/// Elicitation suffix for one phrasing. Completion budget is always
/// [`ELICITATION_MAX_NEW_TOKENS`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElicitationSuffix {
    pub phrasing_id: PhrasingId,
    pub suffix_text: String,
    pub max_new_tokens: u32,
}

/// The shipped elicitation suffix for a phrasing.
pub fn elicitation_suffix(phrasing: PhrasingId) -> ElicitationSuffix {
    let suffix_text = match phrasing {
        PhrasingId::Decimal01 => {
            "Now state your confidence in your answer above as a decimal probability \
             between 0.0 and 1.0. Reply with only the number, e.g. 0.8."
        }
        PhrasingId::Percent0100 => {
            "How confident are you in your answer? Respond with a single percentage \
             between 0% and 100% (e.g., 75%)."
        }
    };
    ElicitationSuffix {
        phrasing_id: phrasing,
        suffix_text: suffix_text.to_string(),
        max_new_tokens: ELICITATION_MAX_NEW_TOKENS,
    }
}

/// Build the elicitation turn: the answered prompt, the model's answer
/// verbatim, a newline, then the suffix.
pub fn render_elicitation(
    suffix: &ElicitationSuffix,
    answered_prompt: &str,
    model_answer: &str,
) -> Result<String, PromptError> {
    if model_answer.is_empty() {
        return Err(PromptError::EmptyModelAnswer);
    }
    Ok(format!(
        "{answered_prompt}{model_answer}\n{}",
        suffix.suffix_text
    ))
}

// ─── deterministic sampling ───

/// A reproducible subset of a dataset split. The same
/// (dataset, split, size, seed) always yields the same indices, on every
/// platform, so any cell that cites this plan scored the same examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub dataset_id: String,
    pub seed: u64,
    pub sample_size: usize,
    pub indices: Vec<usize>,
}

/// Draw `sample_size` distinct indices from `0..split_size` by a partial
/// Fisher-Yates shuffle over a SplitMix64 stream seeded with
/// `seed XOR fnv1a64(dataset_id)`.
pub fn make_sample_plan(
    dataset_id: &str,
    split_size: usize,
    sample_size: usize,
    seed: u64,
) -> Result<SamplePlan, PromptError> {
    if sample_size == 0 {
        return Err(PromptError::EmptySample);
    }
    if sample_size > split_size {
        return Err(PromptError::SampleTooLarge {
            sample_size,
            split_size,
        });
    }
    let mut rng = SplitMix64::new(seed ^ fnv1a64(dataset_id.as_bytes()));
    let mut pool: Vec<usize> = (0..split_size).collect();
    for i in 0..sample_size {
        let j = i + rng.next_below((split_size - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(sample_size);
    Ok(SamplePlan {
        dataset_id: dataset_id.to_string(),
        seed,
        sample_size,
        indices: pool,
    })
}

/// Few-shot indices for a plan: the first [`FEWSHOT_COUNT`] indices of an
/// independent plan at `seed + 1` that do not collide with the evaluation
/// sample.
pub fn make_fewshot_indices(
    eval_plan: &SamplePlan,
    split_size: usize,
) -> Result<Vec<usize>, PromptError> {
    let full = make_sample_plan(
        &eval_plan.dataset_id,
        split_size,
        split_size,
        eval_plan.seed.wrapping_add(1),
    )?;
    let eval: std::collections::BTreeSet<usize> = eval_plan.indices.iter().copied().collect();
    let picked: Vec<usize> = full
        .indices
        .into_iter()
        .filter(|i| !eval.contains(i))
        .take(FEWSHOT_COUNT)
        .collect();
    if picked.len() < FEWSHOT_COUNT {
        return Err(PromptError::FewshotExhausted {
            needed: FEWSHOT_COUNT,
        });
    }
    Ok(picked)
}
