//! Agent roles: descriptions used for routing, prompt templates, and execution.

use serde::{Deserialize, Serialize};

use crate::arith;
use crate::backend::{BackendPool, Completion, GenerationRequest};
use crate::cost::{call_cost, CostRecord, PriceTable};
use crate::error::{Error, Result};
use crate::state::{render_context, ReasoningState, RoleId};

pub const EARLY_STOP: &str = "EarlyStop";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleKind {
    Generate,
    Aggregate,
    Verify,
    Control,
}

/// How the answer is pulled out of a role's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerFormat {
    /// Last line of the form `Answer: <x>`.
    #[default]
    Line,
    /// Body of the last fenced code block.
    Code,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleSpec {
    pub id: String,
    pub description: String,
    #[serde(default)]
    pub template: Option<String>,
    pub kind: RoleKind,
    #[serde(default)]
    pub answer_format: AnswerFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoleOutput {
    pub role: RoleId,
    pub text: String,
    pub answer: Option<String>,
    /// Present only for verify-kind roles.
    pub verdict: Option<Verdict>,
}

/// Pluggable check run by verify-kind roles on their extracted answer.
pub trait VerifierHook: Send + Sync {
    fn verify(&self, answer: &str) -> Verdict;
}

/// Passes when the answer is an arithmetic expression that evaluates cleanly.
#[derive(Debug, Clone, Copy, Default)]
pub struct ArithmeticVerifier;

impl VerifierHook for ArithmeticVerifier {
    fn verify(&self, answer: &str) -> Verdict {
        match arith::evaluate(answer) {
            Ok(_) => Verdict::Pass,
            Err(_) => Verdict::Fail,
        }
    }
}

const ANSWER_SUFFIX: &str = "End your reply with a final line of the form 'Answer: <value>'.";

fn spec(id: &str, kind: RoleKind, description: &str, template: Option<String>) -> RoleSpec {
    RoleSpec {
        id: id.into(),
        description: description.into(),
        template,
        kind,
        answer_format: AnswerFormat::Line,
    }
}

fn standard_template(instruction: &str) -> String {
    format!("{instruction}\n\nQuestion: {{query}}\n\nContext:\n{{context}}\n\n{ANSWER_SUFFIX}")
}

/// The nine default roles, declared in canonical execution order.
pub fn default_roles() -> Vec<RoleSpec> {
    let mut programmer = spec(
        "Programmer",
        RoleKind::Generate,
        "Programmer writes a short program whose execution computes the answer, useful when the problem is algorithmic or needs exact calculation.",
        Some(
            "You are the Programmer. Write a program that solves the question. Put the complete program in one fenced code block.\n\nQuestion: {query}\n\nContext:\n{context}"
                .into(),
        ),
    );
    programmer.answer_format = AnswerFormat::Code;
    vec![
        spec(
            "Decomposer",
            RoleKind::Generate,
            "Decomposer breaks a complex problem into smaller sub-questions and identifies the structure, quantities and categories involved before solving.",
            Some(standard_template(
                "You are the Decomposer. Break the question into ordered sub-problems and state what each requires.",
            )),
        ),
        spec(
            "Generator",
            RoleKind::Generate,
            "Generator drafts a direct answer to the question from the current context, producing an initial solution.",
            Some(standard_template("You are the Generator. Answer the question directly.")),
        ),
        spec(
            "GeneratorCoT",
            RoleKind::Generate,
            "GeneratorCoT solves the question with explicit step-by-step chain-of-thought reasoning before giving the answer.",
            Some(standard_template(
                "You are the GeneratorCoT. Reason step by step, then answer.",
            )),
        ),
        programmer,
        spec(
            "Critique",
            RoleKind::Generate,
            "Critique reviews the existing reasoning, points out errors, gaps and unjustified steps in previous answers.",
            Some(standard_template(
                "You are the Critique. Identify mistakes in the context and state the corrected answer.",
            )),
        ),
        spec(
            "Verifier",
            RoleKind::Verify,
            "Verifier checks a candidate answer by re-deriving it as an executable expression and reports whether it holds.",
            Some(
                "You are the Verifier. Re-derive the result as a single arithmetic expression and give that expression as the answer.\n\nQuestion: {query}\n\nContext:\n{context}\n\nEnd your reply with a final line of the form 'Answer: <expression>'."
                    .into(),
            ),
        ),
        spec(
            "Refiner",
            RoleKind::Generate,
            "Refiner revises and improves the current solution using the critiques and checks gathered so far.",
            Some(standard_template(
                "You are the Refiner. Revise the latest solution, fixing any issues raised in the context.",
            )),
        ),
        spec(
            "Ensembler",
            RoleKind::Aggregate,
            "Ensembler consolidates the candidate answers produced so far and selects the most reliable final answer.",
            Some(format!(
                "You are the Ensembler. Choose the most reliable final answer among the candidates.\n\nQuestion: {{query}}\n\nCandidates:\n{{candidates}}\n\nContext:\n{{context}}\n\n{ANSWER_SUFFIX}"
            )),
        ),
        spec(
            EARLY_STOP,
            RoleKind::Control,
            "EarlyStop ends the reasoning process when the current answer is already settled and further computation is unnecessary.",
            None,
        ),
    ]
}

/// Validated, ordered set of roles. Declaration order is the canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleRegistry {
    specs: Vec<RoleSpec>,
    ids: Vec<RoleId>,
    early_stop: Option<usize>,
}

impl RoleRegistry {
    pub fn new(specs: Vec<RoleSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("role registry is empty".into()));
        }
        let mut ids = Vec::with_capacity(specs.len());
        let mut early_stop = None;
        for (i, s) in specs.iter().enumerate() {
            let id = RoleId::new(s.id.clone())?;
            if ids.contains(&id) {
                return Err(Error::Config(format!("duplicate role {}", s.id)));
            }
            if s.description.trim().is_empty() {
                return Err(Error::Config(format!("role {} has an empty description", s.id)));
            }
            match s.kind {
                RoleKind::Control => {
                    if s.template.is_some() {
                        return Err(Error::Config(format!("control role {} must not have a template", s.id)));
                    }
                    if early_stop.replace(i).is_some() {
                        return Err(Error::Config("at most one control role may be registered".into()));
                    }
                }
                _ => {
                    if s.template.as_deref().is_none_or(|t| t.trim().is_empty()) {
                        return Err(Error::Config(format!("role {} needs a template", s.id)));
                    }
                }
            }
            ids.push(id);
        }
        if early_stop.is_some() && specs.len() == 1 {
            return Err(Error::Config("registry needs at least one working role".into()));
        }
        Ok(Self {
            specs,
            ids,
            early_stop,
        })
    }

    pub fn default_registry() -> Self {
        Self::new(default_roles()).expect("default roles are valid")
    }

    pub fn specs(&self) -> &[RoleSpec] {
        &self.specs
    }

    pub fn ids(&self) -> &[RoleId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn early_stop(&self) -> Option<usize> {
        self.early_stop
    }

    pub fn get(&self, idx: usize) -> &RoleSpec {
        &self.specs[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.id == id)
    }

    pub fn descriptions(&self) -> Vec<&str> {
        self.specs.iter().map(|s| s.description.as_str()).collect()
    }
}

/// Last `Answer: <x>` line of `text`.
pub fn extract_answer_line(text: &str) -> Option<String> {
    text.lines().rev().find_map(|line| {
        let rest = line.trim().strip_prefix("Answer:")?;
        let v = rest.trim();
        (!v.is_empty()).then(|| v.to_string())
    })
}

/// Body of the last fenced code block in `text`.
pub fn extract_code_block(text: &str) -> Option<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            match current.take() {
                Some(body) => blocks.push(body.join("\n")),
                None => current = Some(Vec::new()),
            }
        } else if let Some(body) = current.as_mut() {
            body.push(line);
        }
    }
    blocks.pop()
}

pub fn extract_answer(spec: &RoleSpec, text: &str) -> Option<String> {
    match spec.answer_format {
        AnswerFormat::Line => extract_answer_line(text),
        AnswerFormat::Code => extract_code_block(text),
    }
}

fn render_candidates(registry: &RoleRegistry, state: &ReasoningState) -> String {
    state
        .context()
        .iter()
        .filter_map(|e| {
            let spec = registry.index_of(e.role.as_str()).map(|i| registry.get(i));
            let answer = match spec {
                Some(s) => extract_answer(s, &e.text),
                None => extract_answer_line(&e.text),
            }?;
            Some((e, answer))
        })
        .enumerate()
        .map(|(i, (e, a))| format!("Candidate {} (turn {}, {}): {}", i + 1, e.turn, e.role, a))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Fills the role's template from the state.
pub fn render_prompt(
    registry: &RoleRegistry,
    spec: &RoleSpec,
    state: &ReasoningState,
    char_budget: usize,
) -> Result<String> {
    let Some(template) = spec.template.as_deref().filter(|_| spec.kind != RoleKind::Control) else {
        return Err(Error::ControlRole(spec.id.clone()));
    };
    let context = render_context(state, char_budget)?;
    let candidates = if spec.kind == RoleKind::Aggregate {
        render_candidates(registry, state)
    } else {
        String::new()
    };
    Ok(template
        .replace("{query}", state.query())
        .replace("{context}", &context)
        .replace("{candidates}", &candidates))
}

pub struct RoleExecution {
    pub output: RoleOutput,
    pub completion: Completion,
    pub cost: CostRecord,
}

/// Everything a role needs to run one call.
pub struct ExecutionContext<'a> {
    pub registry: &'a RoleRegistry,
    pub pool: &'a BackendPool,
    pub prices: &'a PriceTable,
    pub hook: &'a dyn VerifierHook,
    pub char_budget: usize,
    pub max_tokens: u32,
}

/// Renders the prompt, calls the backend at `model_idx`, extracts the answer
/// and prices the call. The state is left untouched.
pub fn execute_role(
    ctx: &ExecutionContext<'_>,
    role_idx: usize,
    model_idx: usize,
    state: &ReasoningState,
    seed: u64,
) -> Result<RoleExecution> {
    let spec = ctx.registry.get(role_idx);
    let prompt = render_prompt(ctx.registry, spec, state, ctx.char_budget)?;
    let model = ctx.pool.model_at(model_idx).clone();
    let price = ctx
        .prices
        .get(&model)
        .ok_or_else(|| Error::Config(format!("no price entry for backend {model}")))?;
    let completion = ctx
        .pool
        .generate(model_idx, &GenerationRequest::new(prompt, ctx.max_tokens, seed))?;
    let answer = extract_answer(spec, &completion.text);
    let verdict = (spec.kind == RoleKind::Verify).then(|| {
        answer
            .as_deref()
            .map_or(Verdict::Unknown, |a| ctx.hook.verify(a))
    });
    let role = ctx.registry.ids()[role_idx].clone();
    let cost = CostRecord {
        model,
        role: role.clone(),
        tokens_in: completion.tokens_in,
        tokens_out: completion.tokens_out,
        usd: call_cost(completion.tokens_in, completion.tokens_out, price),
    };
    Ok(RoleExecution {
        output: RoleOutput {
            role,
            text: completion.text.clone(),
            answer,
            verdict,
        },
        completion,
        cost,
    })
}
