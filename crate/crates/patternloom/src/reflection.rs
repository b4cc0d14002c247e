//! Generator-Critic (C5xT1), Self-Heal Loop (C5xT5), and
//! Fan-Out/Gather (C6xT3).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::catalog::CognitiveFunction as CF;
use crate::kernel::{
    self, Context, SlotWrite, Step, StepInput, StepOutcome, TokenLedger, Trace, TraceKind,
    WorkflowNode,
};
use crate::model::{tokenize, ScriptedModel};

// ---------------------------------------------------------------------------
// Critics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CritiqueSource {
    SelfPrompt,
    CrossModel,
    ToolGrounded,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Critique {
    pub score: f64,
    pub feedback: String,
    pub source: CritiqueSource,
}

/// Feedback source for Generator-Critic. ToolGrounded critics are
/// deterministic functions of the draft alone.
#[derive(Clone)]
pub enum Critic {
    /// Successive calls return successive scores (last one repeats).
    Scripted { scores: Vec<f64>, feedback: String },
    ToolGrounded(Arc<dyn Fn(&str) -> Critique + Send + Sync>),
}

impl Critic {
    fn critique(&self, draft: &str, pass: usize) -> Critique {
        match self {
            Critic::Scripted { scores, feedback } => {
                let idx = pass.min(scores.len().saturating_sub(1));
                Critique {
                    score: scores.get(idx).copied().unwrap_or(1.0),
                    feedback: feedback.clone(),
                    source: CritiqueSource::SelfPrompt,
                }
            }
            Critic::ToolGrounded(f) => f(draft),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticRun {
    pub draft: String,
    pub passes_used: usize,
    pub final_score: f64,
}

/// Bounded generate -> critique -> (revise -> critique) chain. Exits as
/// soon as the biased score clears the threshold; never more than
/// `max_passes` (1 or 2) critique passes. A below-threshold final draft
/// is returned with its score, not an error.
pub fn generator_critic(
    task: &str,
    model: &ScriptedModel,
    critic: &Critic,
    threshold: f64,
    max_passes: usize,
    critic_bias: f64,
) -> (CriticRun, Trace, TokenLedger) {
    assert!((0.0..=1.0).contains(&threshold), "threshold in [0,1]");
    assert!((1..=2).contains(&max_passes), "max_passes is 1 or 2");

    let mut ctx = Context::new(task);
    let mut ledger = TokenLedger::unbounded();
    let mut trace = Trace::new();

    let generate = Step::prompt("generate", CF::C5, "generate:{task}", 4096);
    let first = WorkflowNode::chain(vec![WorkflowNode::Step(generate)]);
    kernel::execute(&first, &mut ctx, &mut ledger, model, &mut trace)
        .expect("scripted generate cannot fail");
    let mut draft = ctx.last_output().unwrap_or_default().to_string();

    let mut passes_used = 0;
    let mut score = 0.0;
    for pass in 0..max_passes {
        let critique = critic.critique(&draft, pass);
        passes_used += 1;
        score = critique.score + critic_bias;
        let critique_step = Step::new(format!("critique-{}", pass + 1), CF::C5, {
            let c = critique.clone();
            move |_: &StepInput| {
                let mut o = StepOutcome::text(format!("score {:.2}: {}", c.score, c.feedback), 0);
                o.label = Some(format!("{:.2}", c.score));
                Ok(o)
            }
        });
        let node = WorkflowNode::chain(vec![WorkflowNode::Step(critique_step)]);
        kernel::execute(&node, &mut ctx, &mut ledger, model, &mut trace)
            .expect("critique step cannot fail");

        if score >= threshold || pass + 1 == max_passes {
            break;
        }
        let revise = Step::new(format!("revise-{}", pass + 1), CF::C5, {
            let feedback = critique.feedback.clone();
            move |input: &StepInput| {
                let prompt = format!("revise:{} | {}", input.ctx.task, feedback);
                let c = input.model.complete(&prompt, 4096);
                Ok(StepOutcome::text(c.text, c.tokens_in))
            }
        });
        let node = WorkflowNode::chain(vec![WorkflowNode::Step(revise)]);
        kernel::execute(&node, &mut ctx, &mut ledger, model, &mut trace)
            .expect("revise step cannot fail");
        draft = ctx.last_output().unwrap_or_default().to_string();
    }

    (CriticRun { draft, passes_used, final_score: score }, trace, ledger)
}

// ---------------------------------------------------------------------------
// Self-Heal

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerifierKind {
    SchemaCheck,
    TestSuiteStub,
    RangeCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifierResult {
    pub pass: bool,
    pub diagnostics: String,
}

/// Deterministic, pure pass/fail check over a draft.
#[derive(Clone)]
pub struct Verifier {
    pub kind: VerifierKind,
    predicate: Arc<dyn Fn(&str) -> VerifierResult + Send + Sync>,
}

impl Verifier {
    pub fn new<F>(kind: VerifierKind, predicate: F) -> Self
    where
        F: Fn(&str) -> VerifierResult + Send + Sync + 'static,
    {
        Self { kind, predicate: Arc::new(predicate) }
    }

    /// Draft must parse as JSON.
    pub fn schema_json() -> Self {
        Self::new(VerifierKind::SchemaCheck, |draft| match serde_json::from_str::<serde_json::Value>(draft) {
            Ok(_) => VerifierResult { pass: true, diagnostics: String::new() },
            Err(e) => VerifierResult { pass: false, diagnostics: format!("schema error: {e}") },
        })
    }

    /// Draft must contain the marker string.
    pub fn test_stub(marker: &str) -> Self {
        let marker = marker.to_string();
        Self::new(VerifierKind::TestSuiteStub, move |draft| {
            if draft.contains(&marker) {
                VerifierResult { pass: true, diagnostics: String::new() }
            } else {
                VerifierResult { pass: false, diagnostics: format!("missing marker {marker:?}") }
            }
        })
    }

    /// Draft must parse as a number within [lo, hi].
    pub fn range(lo: f64, hi: f64) -> Self {
        Self::new(VerifierKind::RangeCheck, move |draft| match draft.trim().parse::<f64>() {
            Ok(x) if (lo..=hi).contains(&x) => {
                VerifierResult { pass: true, diagnostics: String::new() }
            }
            Ok(x) => VerifierResult {
                pass: false,
                diagnostics: format!("value {x} outside [{lo}, {hi}]"),
            },
            Err(e) => VerifierResult { pass: false, diagnostics: format!("not a number: {e}") },
        })
    }

    pub fn check(&self, draft: &str) -> VerifierResult {
        (self.predicate)(draft)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HealRun {
    pub draft: String,
    pub iterations: u64,
    pub pass: bool,
}

/// Kernel Loop: draft, verify, feed diagnostics into the next repair
/// prompt; exit when the verifier passes or the cap is reached. Failure
/// is reported in the result, never as an error.
pub fn self_heal(
    task: &str,
    model: &ScriptedModel,
    verifier: &Verifier,
    max_iterations: u64,
) -> (HealRun, Trace, TokenLedger) {
    assert!(max_iterations >= 1);

    let body = Step::new("draft-or-repair", CF::C5, {
        let verifier = verifier.clone();
        let task = task.to_string();
        move |input: &StepInput| {
            let prompt = match input.ctx.slot("heal.diagnostics") {
                None => format!("heal:{task}"),
                Some(diag) => format!("repair:{task} | {diag}"),
            };
            let c = input.model.complete(&prompt, 4096);
            let verdict = verifier.check(&c.text);
            Ok(StepOutcome {
                output: c.text.clone(),
                tokens_in: c.tokens_in,
                tokens_out: c.tokens_out,
                label: Some(if verdict.pass { "pass" } else { "fail" }.to_string()),
                slot_writes: vec![
                    SlotWrite { name: "heal.draft".into(), content: c.text, priority: None },
                    SlotWrite {
                        name: "heal.verdict".into(),
                        content: if verdict.pass { "pass".into() } else { "fail".into() },
                        priority: None,
                    },
                    SlotWrite {
                        name: "heal.diagnostics".into(),
                        content: verdict.diagnostics,
                        priority: None,
                    },
                ],
            })
        }
    });

    let root = WorkflowNode::Loop {
        body: Box::new(WorkflowNode::Step(body)),
        exit: Arc::new(|ctx: &Context| ctx.slot("heal.verdict") == Some("pass")),
        max_iterations,
    };

    let (ctx, ledger, trace) =
        kernel::run(&root, Context::new(task), model).expect("heal loop is well-formed");
    let iterations = trace.count(TraceKind::IterationStart) as u64;
    (
        HealRun {
            draft: ctx.slot("heal.draft").unwrap_or_default().to_string(),
            iterations,
            pass: ctx.slot("heal.verdict") == Some("pass"),
        },
        trace,
        ledger,
    )
}

// ---------------------------------------------------------------------------
// Fan-Out/Gather

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatherStrategy {
    StructuredConcat,
    MajorityVote,
    CoordinatorSynthesis,
}

impl std::str::FromStr for GatherStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concat" | "structured_concat" => Ok(GatherStrategy::StructuredConcat),
            "vote" | "majority_vote" => Ok(GatherStrategy::MajorityVote),
            "synthesis" | "coordinator_synthesis" => Ok(GatherStrategy::CoordinatorSynthesis),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

/// One independent worker assignment: the output slot doubles as the
/// worker identity, so colliding slots mean a mis-decomposed task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FanOutTask {
    pub slot: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GatherResult {
    /// Declared branch order.
    pub branch_outputs: Vec<String>,
    pub aggregate: String,
    pub strategy: GatherStrategy,
    pub conflicts: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum FanOutError {
    #[error("need at least 2 subtasks, got {0}")]
    TooFewSubtasks(usize),
    #[error("interdependent subtasks: slot {0:?} declared twice")]
    InterdependentSubtasks(String),
}

/// Kernel Parallel: each worker runs on an isolated context containing
/// only its own subtask prompt; the aggregator sees the branch contexts
/// read-only and builds the aggregate per strategy.
pub fn fan_out_gather(
    subtasks: &[FanOutTask],
    model: &ScriptedModel,
    strategy: GatherStrategy,
) -> Result<(GatherResult, Trace, TokenLedger), FanOutError> {
    if subtasks.len() < 2 {
        return Err(FanOutError::TooFewSubtasks(subtasks.len()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for t in subtasks {
        if !seen.insert(&t.slot) {
            return Err(FanOutError::InterdependentSubtasks(t.slot.clone()));
        }
    }

    let branches: Vec<WorkflowNode> = subtasks
        .iter()
        .map(|t| {
            let prompt = t.prompt.clone();
            let slot = t.slot.clone();
            WorkflowNode::Step(Step::new(format!("worker-{}", t.slot), CF::C6, move |input: &StepInput| {
                // The worker sees only its subtask prompt, not the
                // parent task or sibling material.
                let c = input.model.complete(&prompt, 4096);
                Ok(StepOutcome {
                    output: c.text.clone(),
                    tokens_in: c.tokens_in,
                    tokens_out: c.tokens_out,
                    label: None,
                    slot_writes: vec![SlotWrite { name: slot.clone(), content: c.text, priority: None }],
                })
            }))
        })
        .collect();

    let slots: Vec<String> = subtasks.iter().map(|t| t.slot.clone()).collect();
    let aggregator = Step::new("gather", CF::C6, {
        let slots = slots.clone();
        move |input: &StepInput| {
            let outputs: Vec<String> = input
                .branches
                .iter()
                .zip(&slots)
                .map(|(branch, slot)| branch.slot(slot).unwrap_or_default().to_string())
                .collect();
            let (aggregate, conflicts) = aggregate_outputs(&outputs, &slots, strategy, input.model);
            Ok(StepOutcome {
                output: aggregate.clone(),
                tokens_in: outputs.iter().map(|o| tokenize(o)).sum(),
                tokens_out: tokenize(&aggregate),
                label: None,
                slot_writes: vec![SlotWrite {
                    name: "gather.conflicts".into(),
                    content: serde_json::to_string(&conflicts).unwrap(),
                    priority: None,
                }],
            })
        }
    });

    let root = WorkflowNode::Parallel { branches, aggregator };
    let (ctx, ledger, trace) =
        kernel::run(&root, Context::new("fan-out"), model).expect("fan-out workflow is well-formed");

    let branch_outputs: Vec<String> = subtasks
        .iter()
        .map(|t| {
            ctx.history
                .iter()
                .find(|h| h.step == format!("worker-{}", t.slot))
                .map(|h| h.output.clone())
                .unwrap_or_default()
        })
        .collect();
    let conflicts: Vec<String> =
        serde_json::from_str(ctx.slot("gather.conflicts").unwrap_or("[]")).unwrap_or_default();
    Ok((
        GatherResult {
            branch_outputs,
            aggregate: ctx.last_output().unwrap_or_default().to_string(),
            strategy,
            conflicts,
        },
        trace,
        ledger,
    ))
}

/// Aggregate branch outputs; returns (aggregate, conflicts).
pub fn aggregate_outputs(
    outputs: &[String],
    slots: &[String],
    strategy: GatherStrategy,
    model: &ScriptedModel,
) -> (String, Vec<String>) {
    match strategy {
        GatherStrategy::StructuredConcat => {
            let lines: Vec<String> =
                slots.iter().zip(outputs).map(|(s, o)| format!("{s}: {o}")).collect();
            (lines.join("\n"), Vec::new())
        }
        GatherStrategy::MajorityVote => {
            // Ties break toward the earliest branch.
            let mut best: Option<(&String, usize)> = None;
            for candidate in outputs {
                let votes = outputs.iter().filter(|o| *o == candidate).count();
                if best.is_none_or(|(_, b)| votes > b) {
                    best = Some((candidate, votes));
                }
            }
            let winner = best.map(|(w, _)| w.clone()).unwrap_or_default();
            let conflicts: Vec<String> = outputs
                .iter()
                .filter(|o| **o != winner)
                .cloned()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            (winner, conflicts)
        }
        GatherStrategy::CoordinatorSynthesis => {
            let prompt = format!("synthesize: {}", outputs.join(" | "));
            (model.complete(&prompt, 4096).text, Vec::new())
        }
    }
}
