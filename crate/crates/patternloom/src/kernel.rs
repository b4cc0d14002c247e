//! Execution kernel: the step abstraction, the six topology combinators,
//! token/cost accounting, and structured tracing.
//!
//! A workflow is a finite tree of [`WorkflowNode`]s whose leaves are
//! [`Step`]s. [`execute`] walks the tree, threading a [`Context`] and a
//! [`TokenLedger`] and emitting a balanced [`Trace`]. Parallel and
//! Orchestrate branches run on isolated context copies with private
//! ledger shards that are merged, in declared branch order, at the join.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::catalog::CognitiveFunction;
use crate::model::{tokenize, ScriptedModel};

// ---------------------------------------------------------------------------
// Context

/// Triage priority classes for context material.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Priority {
    /// Always load.
    P0,
    /// Load if relevant.
    P1,
    /// Load on demand.
    P2,
    /// Never load.
    P3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub content: String,
    pub tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority: Option<Priority>,
}

/// Append-only summary of one executed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: String,
    pub output: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

/// The agent's working memory: the task, named slots, and step history.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub task: String,
    pub slots: BTreeMap<String, Slot>,
    pub history: Vec<HistoryEntry>,
}

impl Context {
    pub fn new(task: impl Into<String>) -> Self {
        Self { task: task.into(), slots: BTreeMap::new(), history: Vec::new() }
    }

    /// Slot token counts always come from the tokenizer.
    pub fn set_slot(&mut self, name: impl Into<String>, content: impl Into<String>) {
        self.set_slot_with_priority(name, content, None);
    }

    pub fn set_slot_with_priority(
        &mut self,
        name: impl Into<String>,
        content: impl Into<String>,
        priority: Option<Priority>,
    ) {
        let content = content.into();
        let tokens = tokenize(&content);
        self.slots.insert(name.into(), Slot { content, tokens, priority });
    }

    pub fn slot(&self, name: &str) -> Option<&str> {
        self.slots.get(name).map(|s| s.content.as_str())
    }

    pub fn last_output(&self) -> Option<&str> {
        self.history.last().map(|h| h.output.as_str())
    }
}

// ---------------------------------------------------------------------------
// Ledger

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub step: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    /// Cost in micro-dollars (1e-6 $); integral so sums are exact.
    pub microdollars: u64,
}

/// Token and dollar accounting with optional hard budgets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub entries: Vec<LedgerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_tokens: Option<u64>,
    /// Budget in micro-dollars.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_microdollars: Option<u64>,
}

impl TokenLedger {
    pub fn unbounded() -> Self {
        Self::default()
    }

    pub fn with_token_budget(budget: u64) -> Self {
        Self { budget_tokens: Some(budget), ..Self::default() }
    }

    pub fn with_dollar_budget(budget_microdollars: u64) -> Self {
        Self { budget_microdollars: Some(budget_microdollars), ..Self::default() }
    }

    pub fn total_tokens(&self) -> u64 {
        self.entries.iter().map(|e| e.tokens_in + e.tokens_out).sum()
    }

    pub fn total_microdollars(&self) -> u64 {
        self.entries.iter().map(|e| e.microdollars).sum()
    }

    /// Append a charge, enforcing budgets. `rate_dollars_per_token`
    /// applies to tokens_in + tokens_out; cost is rounded to the nearest
    /// micro-dollar.
    pub fn charge(
        &mut self,
        step: &str,
        tokens_in: u64,
        tokens_out: u64,
        rate_dollars_per_token: f64,
    ) -> Result<&LedgerEntry, KernelError> {
        assert!(rate_dollars_per_token >= 0.0, "rates are nonnegative");
        let microdollars =
            ((tokens_in + tokens_out) as f64 * rate_dollars_per_token * 1e6).round() as u64;
        self.charge_exact(step, tokens_in, tokens_out, microdollars)
    }

    /// Append a charge with an exact micro-dollar cost.
    pub fn charge_exact(
        &mut self,
        step: &str,
        tokens_in: u64,
        tokens_out: u64,
        microdollars: u64,
    ) -> Result<&LedgerEntry, KernelError> {
        let tokens = tokens_in + tokens_out;
        if let Some(cap) = self.budget_tokens {
            if self.total_tokens() + tokens > cap {
                return Err(KernelError::BudgetExceeded {
                    step: step.to_string(),
                    resource: "tokens".to_string(),
                });
            }
        }
        if let Some(cap) = self.budget_microdollars {
            if self.total_microdollars() + microdollars > cap {
                return Err(KernelError::BudgetExceeded {
                    step: step.to_string(),
                    resource: "dollars".to_string(),
                });
            }
        }
        self.entries.push(LedgerEntry {
            step: step.to_string(),
            tokens_in,
            tokens_out,
            microdollars,
        });
        Ok(self.entries.last().unwrap())
    }

    /// Private shard for a branch: empty entries, budgets set to what
    /// remains on this ledger at fork time.
    pub fn fork_shard(&self) -> TokenLedger {
        TokenLedger {
            entries: Vec::new(),
            budget_tokens: self.budget_tokens.map(|b| b - self.total_tokens().min(b)),
            budget_microdollars: self
                .budget_microdollars
                .map(|b| b - self.total_microdollars().min(b)),
        }
    }

    /// Merge a branch shard back at the join point.
    pub fn merge_shard(&mut self, shard: TokenLedger) {
        self.entries.extend(shard.entries);
    }
}

// ---------------------------------------------------------------------------
// Trace

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceKind {
    NodeEnter,
    NodeExit,
    StepRun,
    BranchTaken,
    IterationStart,
    BudgetCharge,
    GateDecision,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: TraceKind,
    pub path: Vec<String>,
    pub payload: serde_json::Value,
}

/// Ordered event log with strictly increasing sequence numbers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn emit(&mut self, kind: TraceKind, path: &[String], payload: serde_json::Value) {
        let seq = self.events.len() as u64;
        self.events.push(TraceEvent { seq, kind, path: path.to_vec(), payload });
    }

    /// Append another trace's events, reassigning sequence numbers.
    /// Branch traces are absorbed at the join point in declared order.
    pub fn absorb(&mut self, other: Trace) {
        for mut ev in other.events {
            ev.seq = self.events.len() as u64;
            self.events.push(ev);
        }
    }

    /// One JSON object per line: seq, kind, path, payload.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ev in &self.events {
            let line = json!({
                "seq": ev.seq,
                "kind": ev.kind,
                "path": ev.path,
                "payload": ev.payload,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Trace, serde_json::Error> {
        let mut events = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)?;
            events.push(TraceEvent {
                seq: v["seq"].as_u64().unwrap_or(0),
                kind: serde_json::from_value(v["kind"].clone())?,
                path: serde_json::from_value(v["path"].clone())?,
                payload: v["payload"].clone(),
            });
        }
        Ok(Trace { events })
    }

    pub fn count(&self, kind: TraceKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

// ---------------------------------------------------------------------------
// Steps

/// A slot write requested by a step; applied by the kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotWrite {
    pub name: String,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority: Option<Priority>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub output: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    /// Routing label (classifiers), vote value, etc.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slot_writes: Vec<SlotWrite>,
}

impl StepOutcome {
    pub fn text(output: impl Into<String>, tokens_in: u64) -> Self {
        let output = output.into();
        let tokens_out = tokenize(&output);
        Self { output, tokens_in, tokens_out, label: None, slot_writes: Vec::new() }
    }
}

/// What a step handler can see: the working context, sibling branch
/// contexts (aggregators and synthesizers only), and the model backend.
pub struct StepInput<'a> {
    pub ctx: &'a Context,
    /// Branch contexts at a join point, in declared branch order.
    pub branches: &'a [Context],
    pub model: &'a ScriptedModel,
}

pub type HandlerFn = dyn Fn(&StepInput) -> Result<StepOutcome, StepFailure> + Send + Sync;

#[derive(Clone)]
pub struct Step {
    pub name: String,
    pub function: CognitiveFunction,
    pub handler: Arc<HandlerFn>,
    /// Optional per-step token cap (tokens_in + tokens_out).
    pub cost_cap: Option<u64>,
    pub rate_dollars_per_token: f64,
}

impl fmt::Debug for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Step")
            .field("name", &self.name)
            .field("function", &self.function)
            .field("cost_cap", &self.cost_cap)
            .finish_non_exhaustive()
    }
}

impl Step {
    pub fn new<F>(name: impl Into<String>, function: CognitiveFunction, handler: F) -> Self
    where
        F: Fn(&StepInput) -> Result<StepOutcome, StepFailure> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            function,
            handler: Arc::new(handler),
            cost_cap: None,
            rate_dollars_per_token: 0.0,
        }
    }

    pub fn with_cost_cap(mut self, cap: u64) -> Self {
        self.cost_cap = Some(cap);
        self
    }

    pub fn with_rate(mut self, rate_dollars_per_token: f64) -> Self {
        self.rate_dollars_per_token = rate_dollars_per_token;
        self
    }

    /// A step that renders a prompt template against the context and
    /// asks the model backend for a completion. The template may use
    /// `{task}`, `{last}` (last history output) and `{slot:NAME}`.
    pub fn prompt(
        name: impl Into<String>,
        function: CognitiveFunction,
        template: impl Into<String>,
        max_tokens: u64,
    ) -> Self {
        let template = template.into();
        Self::new(name, function, move |input: &StepInput| {
            let prompt = render_template(&template, input.ctx);
            let c = input.model.complete(&prompt, max_tokens);
            Ok(StepOutcome {
                output: c.text,
                tokens_in: c.tokens_in,
                tokens_out: c.tokens_out,
                label: None,
                slot_writes: Vec::new(),
            })
        })
    }
}

pub fn render_template(template: &str, ctx: &Context) -> String {
    let mut out = template.replace("{task}", &ctx.task);
    out = out.replace("{last}", ctx.last_output().unwrap_or(""));
    while let Some(start) = out.find("{slot:") {
        let Some(end) = out[start..].find('}') else { break };
        let name = out[start + 6..start + end].to_string();
        let value = ctx.slot(&name).unwrap_or("").to_string();
        out.replace_range(start..start + end + 1, &value);
    }
    out
}

// ---------------------------------------------------------------------------
// Workflow tree

pub type ExitPredicate = Arc<dyn Fn(&Context) -> bool + Send + Sync>;

/// Recursive topology tree. Leaves are steps; interior nodes are the
/// six combinators.
#[derive(Clone)]
pub enum WorkflowNode {
    Step(Step),
    Chain(Vec<WorkflowNode>),
    Route {
        classifier: Step,
        branches: BTreeMap<String, WorkflowNode>,
        default: Option<Box<WorkflowNode>>,
    },
    Parallel {
        branches: Vec<WorkflowNode>,
        aggregator: Step,
    },
    Orchestrate {
        coordinator: Step,
        workers: Vec<WorkflowNode>,
        synthesizer: Step,
    },
    Loop {
        body: Box<WorkflowNode>,
        exit: ExitPredicate,
        max_iterations: u64,
    },
    /// Ordered outermost to innermost; each level wraps the next.
    Hierarchy(Vec<WorkflowNode>),
}

impl fmt::Debug for WorkflowNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorkflowNode::Step(s) => write!(f, "Step({})", s.name),
            WorkflowNode::Chain(c) => f.debug_tuple("Chain").field(c).finish(),
            WorkflowNode::Route { branches, .. } => {
                write!(f, "Route({} branches)", branches.len())
            }
            WorkflowNode::Parallel { branches, .. } => {
                write!(f, "Parallel({} branches)", branches.len())
            }
            WorkflowNode::Orchestrate { workers, .. } => {
                write!(f, "Orchestrate({} workers)", workers.len())
            }
            WorkflowNode::Loop { max_iterations, .. } => {
                write!(f, "Loop(max={max_iterations})")
            }
            WorkflowNode::Hierarchy(l) => f.debug_tuple("Hierarchy").field(l).finish(),
        }
    }
}

impl WorkflowNode {
    pub fn chain(children: Vec<WorkflowNode>) -> Self {
        WorkflowNode::Chain(children)
    }

    pub fn single(step: Step) -> Self {
        WorkflowNode::Step(step)
    }

    pub fn loop_node(body: WorkflowNode, exit: ExitPredicate, max_iterations: u64) -> Self {
        WorkflowNode::Loop { body: Box::new(body), exit, max_iterations }
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    MissingDefault { path: Vec<String> },
    InvalidIterationCap { path: Vec<String> },
    TooFewBranches { path: Vec<String> },
    DuplicateStepName { path: Vec<String>, name: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingDefault { path } => {
                write!(f, "route at {} has no default branch", path.join("/"))
            }
            Violation::InvalidIterationCap { path } => {
                write!(f, "loop at {} has max_iterations 0", path.join("/"))
            }
            Violation::TooFewBranches { path } => {
                write!(f, "parallel at {} has fewer than 2 branches", path.join("/"))
            }
            Violation::DuplicateStepName { path, name } => {
                write!(f, "step name {name:?} at {} is not unique", path.join("/"))
            }
        }
    }
}

/// Check all structural invariants; empty result means well-formed.
pub fn validate(root: &WorkflowNode) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut path = vec!["root".to_string()];
    walk_validate(root, &mut path, &mut seen, &mut violations);
    violations
}

fn walk_validate(
    node: &WorkflowNode,
    path: &mut Vec<String>,
    seen: &mut std::collections::BTreeSet<String>,
    out: &mut Vec<Violation>,
) {
    fn check_step(
        step: &Step,
        path: &[String],
        seen: &mut std::collections::BTreeSet<String>,
        out: &mut Vec<Violation>,
    ) {
        if !seen.insert(step.name.clone()) {
            out.push(Violation::DuplicateStepName {
                path: path.to_vec(),
                name: step.name.clone(),
            });
        }
    }
    match node {
        WorkflowNode::Step(s) => check_step(s, path, seen, out),
        WorkflowNode::Chain(children) => {
            for (i, child) in children.iter().enumerate() {
                path.push(format!("chain[{i}]"));
                walk_validate(child, path, seen, out);
                path.pop();
            }
        }
        WorkflowNode::Route { classifier, branches, default } => {
            check_step(classifier, path, seen, out);
            if default.is_none() {
                out.push(Violation::MissingDefault { path: path.clone() });
            }
            for (label, child) in branches {
                path.push(format!("route[{label}]"));
                walk_validate(child, path, seen, out);
                path.pop();
            }
            if let Some(d) = default {
                path.push("route[default]".to_string());
                walk_validate(d, path, seen, out);
                path.pop();
            }
        }
        WorkflowNode::Parallel { branches, aggregator } => {
            if branches.len() < 2 {
                out.push(Violation::TooFewBranches { path: path.clone() });
            }
            for (i, child) in branches.iter().enumerate() {
                path.push(format!("parallel[{i}]"));
                walk_validate(child, path, seen, out);
                path.pop();
            }
            check_step(aggregator, path, seen, out);
        }
        WorkflowNode::Orchestrate { coordinator, workers, synthesizer } => {
            check_step(coordinator, path, seen, out);
            for (i, child) in workers.iter().enumerate() {
                path.push(format!("orchestrate[{i}]"));
                walk_validate(child, path, seen, out);
                path.pop();
            }
            check_step(synthesizer, path, seen, out);
        }
        WorkflowNode::Loop { body, max_iterations, .. } => {
            if *max_iterations == 0 {
                out.push(Violation::InvalidIterationCap { path: path.clone() });
            }
            path.push("loop".to_string());
            walk_validate(body, path, seen, out);
            path.pop();
        }
        WorkflowNode::Hierarchy(levels) => {
            for (i, level) in levels.iter().enumerate() {
                path.push(format!("hierarchy[{i}]"));
                walk_validate(level, path, seen, out);
                path.pop();
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("step {step} failed: {message}")]
pub struct StepFailure {
    pub step: String,
    pub message: String,
}

impl StepFailure {
    pub fn new(step: impl Into<String>, message: impl Into<String>) -> Self {
        Self { step: step.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("budget exceeded at step {step} ({resource})")]
    BudgetExceeded { step: String, resource: String },
    #[error(transparent)]
    StepFailure(#[from] StepFailure),
    #[error("malformed workflow: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    MalformedWorkflow(Vec<Violation>),
}

// ---------------------------------------------------------------------------
// Execution

/// Execute a workflow, mutating the context, ledger, and trace in
/// place. On error the partial trace and ledger remain valid.
pub fn execute(
    root: &WorkflowNode,
    ctx: &mut Context,
    ledger: &mut TokenLedger,
    model: &ScriptedModel,
    trace: &mut Trace,
) -> Result<(), KernelError> {
    let violations = validate(root);
    if !violations.is_empty() {
        return Err(KernelError::MalformedWorkflow(violations));
    }
    let mut path = vec!["root".to_string()];
    exec_node(root, &mut path, ctx, ledger, model, trace)
}

/// Convenience wrapper: run with a fresh unbounded ledger and trace.
pub fn run(
    root: &WorkflowNode,
    mut ctx: Context,
    model: &ScriptedModel,
) -> Result<(Context, TokenLedger, Trace), (KernelError, Trace)> {
    let mut ledger = TokenLedger::unbounded();
    let mut trace = Trace::new();
    match execute(root, &mut ctx, &mut ledger, model, &mut trace) {
        Ok(()) => Ok((ctx, ledger, trace)),
        Err(e) => Err((e, trace)),
    }
}

fn exec_node(
    node: &WorkflowNode,
    path: &mut Vec<String>,
    ctx: &mut Context,
    ledger: &mut TokenLedger,
    model: &ScriptedModel,
    trace: &mut Trace,
) -> Result<(), KernelError> {
    match node {
        WorkflowNode::Step(step) => {
            run_step(step, path, ctx, &[], ledger, model, trace).map(|_| ())
        }
        WorkflowNode::Chain(children) => {
            trace.emit(TraceKind::NodeEnter, path, json!({"node": "chain"}));
            let result = (|| {
                for (i, child) in children.iter().enumerate() {
                    path.push(format!("chain[{i}]"));
                    let r = exec_node(child, path, ctx, ledger, model, trace);
                    path.pop();
                    r?;
                }
                Ok(())
            })();
            finish_node(trace, path, "chain", result)
        }
        WorkflowNode::Route { classifier, branches, default } => {
            trace.emit(TraceKind::NodeEnter, path, json!({"node": "route"}));
            let result = (|| {
                let outcome = run_step(classifier, path, ctx, &[], ledger, model, trace)?;
                let label = outcome.label.unwrap_or(outcome.output);
                let (segment, branch) = match branches.get(&label) {
                    Some(b) => (format!("route[{label}]"), b),
                    None => (
                        "route[default]".to_string(),
                        default.as_deref().expect("validated"),
                    ),
                };
                trace.emit(
                    TraceKind::BranchTaken,
                    path,
                    json!({"label": label, "matched": branches.contains_key(&label)}),
                );
                path.push(segment);
                let r = exec_node(branch, path, ctx, ledger, model, trace);
                path.pop();
                r
            })();
            finish_node(trace, path, "route", result)
        }
        WorkflowNode::Parallel { branches, aggregator } => {
            trace.emit(TraceKind::NodeEnter, path, json!({"node": "parallel"}));
            let result = (|| {
                let branch_ctxs = exec_branches(branches, "parallel", path, ctx, ledger, model, trace)?;
                join_branches(ctx, &branch_ctxs);
                let outcome =
                    run_step_with_branches(aggregator, path, ctx, &branch_ctxs, ledger, model, trace)?;
                let _ = outcome;
                Ok(())
            })();
            finish_node(trace, path, "parallel", result)
        }
        WorkflowNode::Orchestrate { coordinator, workers, synthesizer } => {
            trace.emit(TraceKind::NodeEnter, path, json!({"node": "orchestrate"}));
            let result = (|| {
                run_step(coordinator, path, ctx, &[], ledger, model, trace)?;
                let branch_ctxs =
                    exec_branches(workers, "orchestrate", path, ctx, ledger, model, trace)?;
                join_branches(ctx, &branch_ctxs);
                run_step_with_branches(synthesizer, path, ctx, &branch_ctxs, ledger, model, trace)?;
                Ok(())
            })();
            finish_node(trace, path, "orchestrate", result)
        }
        WorkflowNode::Loop { body, exit, max_iterations } => {
            trace.emit(TraceKind::NodeEnter, path, json!({"node": "loop"}));
            let result = (|| {
                for i in 1..=*max_iterations {
                    trace.emit(TraceKind::IterationStart, path, json!({"iteration": i}));
                    path.push("loop".to_string());
                    let r = exec_node(body, path, ctx, ledger, model, trace);
                    path.pop();
                    r?;
                    if exit(ctx) {
                        break;
                    }
                }
                Ok(())
            })();
            finish_node(trace, path, "loop", result)
        }
        WorkflowNode::Hierarchy(levels) => exec_hierarchy(levels, 0, path, ctx, ledger, model, trace),
    }
}

/// Each level wraps the next: enter level i, run it, then run the
/// remaining levels nested inside before exiting.
fn exec_hierarchy(
    levels: &[WorkflowNode],
    index: usize,
    path: &mut Vec<String>,
    ctx: &mut Context,
    ledger: &mut TokenLedger,
    model: &ScriptedModel,
    trace: &mut Trace,
) -> Result<(), KernelError> {
    if index >= levels.len() {
        return Ok(());
    }
    trace.emit(TraceKind::NodeEnter, path, json!({"node": "hierarchy", "level": index}));
    let result = (|| {
        path.push(format!("hierarchy[{index}]"));
        let r = exec_node(&levels[index], path, ctx, ledger, model, trace);
        path.pop();
        r?;
        exec_hierarchy(levels, index + 1, path, ctx, ledger, model, trace)
    })();
    finish_node(trace, path, "hierarchy", result)
}

/// Run branch nodes on isolated context copies with private ledger
/// shards, absorbing their traces and ledgers in declared order.
fn exec_branches(
    branches: &[WorkflowNode],
    segment: &str,
    path: &mut Vec<String>,
    ctx: &Context,
    ledger: &mut TokenLedger,
    model: &ScriptedModel,
    trace: &mut Trace,
) -> Result<Vec<Context>, KernelError> {
    let mut branch_ctxs = Vec::with_capacity(branches.len());
    for (i, branch) in branches.iter().enumerate() {
        let mut branch_ctx = ctx.clone();
        let mut shard = ledger.fork_shard();
        let mut branch_trace = Trace::new();
        path.push(format!("{segment}[{i}]"));
        let r = exec_node(branch, path, &mut branch_ctx, &mut shard, model, &mut branch_trace);
        path.pop();
        // Sequence numbers are assigned at the join, not during branch
        // execution.
        trace.absorb(branch_trace);
        ledger.merge_shard(shard);
        r?;
        branch_ctxs.push(branch_ctx);
    }
    Ok(branch_ctxs)
}

/// History from branches is appended in declared order; slots are not
/// merged automatically (the aggregator writes the merged slot set).
fn join_branches(ctx: &mut Context, branch_ctxs: &[Context]) {
    let base = ctx.history.len();
    for b in branch_ctxs {
        for entry in &b.history[base.min(b.history.len())..] {
            ctx.history.push(entry.clone());
        }
    }
}

fn run_step(
    step: &Step,
    path: &mut Vec<String>,
    ctx: &mut Context,
    branches: &[Context],
    ledger: &mut TokenLedger,
    model: &ScriptedModel,
    trace: &mut Trace,
) -> Result<StepOutcome, KernelError> {
    run_step_with_branches(step, path, ctx, branches, ledger, model, trace)
}

fn run_step_with_branches(
    step: &Step,
    path: &mut Vec<String>,
    ctx: &mut Context,
    branches: &[Context],
    ledger: &mut TokenLedger,
    model: &ScriptedModel,
    trace: &mut Trace,
) -> Result<StepOutcome, KernelError> {
    path.push(format!("step:{}", step.name));
    let result = (|| {
        let input = StepInput { ctx, branches, model };
        let outcome = (step.handler)(&input)?;
        if let Some(cap) = step.cost_cap {
            if outcome.tokens_in + outcome.tokens_out > cap {
                return Err(KernelError::StepFailure(StepFailure::new(
                    &step.name,
                    format!(
                        "declared cost cap {cap} exceeded ({} tokens)",
                        outcome.tokens_in + outcome.tokens_out
                    ),
                )));
            }
        }
        let entry = ledger
            .charge(&step.name, outcome.tokens_in, outcome.tokens_out, step.rate_dollars_per_token)?
            .clone();
        trace.emit(
            TraceKind::BudgetCharge,
            path,
            json!({
                "step": step.name,
                "tokens_in": entry.tokens_in,
                "tokens_out": entry.tokens_out,
                "microdollars": entry.microdollars,
            }),
        );
        trace.emit(
            TraceKind::StepRun,
            path,
            json!({"step": step.name, "output": outcome.output, "label": outcome.label}),
        );
        ctx.history.push(HistoryEntry {
            step: step.name.clone(),
            output: outcome.output.clone(),
            tokens_in: outcome.tokens_in,
            tokens_out: outcome.tokens_out,
        });
        for w in &outcome.slot_writes {
            ctx.set_slot_with_priority(&w.name, &w.content, w.priority);
        }
        Ok(outcome)
    })();
    if let Err(e) = &result {
        trace.emit(TraceKind::Error, path, json!({"error": e.to_string()}));
    }
    path.pop();
    result
}

fn finish_node(
    trace: &mut Trace,
    path: &[String],
    node: &str,
    result: Result<(), KernelError>,
) -> Result<(), KernelError> {
    // NodeExit always matches the NodeEnter, even on the error path, so
    // partial traces stay balanced.
    trace.emit(TraceKind::NodeExit, path, json!({"node": node}));
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::CognitiveFunction as CF;

    fn echo_step(name: &str) -> Step {
        let out = format!("{name}-out");
        Step::new(name, CF::C3, move |_| Ok(StepOutcome::text(out.clone(), 1)))
    }

    fn emit_tokens_step(name: &str, tokens: u64) -> Step {
        Step::new(name, CF::C3, move |_| {
            Ok(StepOutcome { output: "x".into(), tokens_in: 0, tokens_out: tokens, ..Default::default() })
        })
    }

    #[test]
    fn chain_runs_in_order() {
        let root = WorkflowNode::chain(vec![
            WorkflowNode::Step(echo_step("A")),
            WorkflowNode::Step(echo_step("B")),
            WorkflowNode::Step(echo_step("C")),
        ]);
        let (ctx, _, _) = run(&root, Context::new("t"), &ScriptedModel::empty(0)).unwrap();
        let names: Vec<_> = ctx.history.iter().map(|h| h.step.as_str()).collect();
        assert_eq!(names, ["A", "B", "C"]);
    }

    #[test]
    fn loop_runs_to_cap_with_iteration_events() {
        let root = WorkflowNode::loop_node(
            WorkflowNode::Step(echo_step("body")),
            Arc::new(|_| false),
            3,
        );
        let (ctx, _, trace) = run(&root, Context::new("t"), &ScriptedModel::empty(0)).unwrap();
        assert_eq!(ctx.history.len(), 3);
        assert_eq!(trace.count(TraceKind::IterationStart), 3);
    }

    #[test]
    fn parallel_ledger_equals_sequential_oracle() {
        let branches = || {
            vec![
                WorkflowNode::Step(emit_tokens_step("w0", 100)),
                WorkflowNode::Step(emit_tokens_step("w1", 100)),
                WorkflowNode::Step(emit_tokens_step("w2", 100)),
                WorkflowNode::Step(emit_tokens_step("w3", 100)),
            ]
        };
        let agg = Step::new("agg", CF::C6, |_| Ok(StepOutcome::text("merged", 0)));
        let parallel = WorkflowNode::Parallel { branches: branches(), aggregator: agg.clone() };
        let mut seq_children = branches();
        seq_children.push(WorkflowNode::Step(agg));
        let sequential = WorkflowNode::chain(seq_children);

        let model = ScriptedModel::empty(0);
        let (_, par_ledger, _) = run(&parallel, Context::new("t"), &model).unwrap();
        let (_, seq_ledger, _) = run(&sequential, Context::new("t"), &model).unwrap();
        assert_eq!(par_ledger.total_tokens(), 400 + seq_ledger.total_tokens() - 400);
        assert_eq!(par_ledger.total_tokens(), seq_ledger.total_tokens());
    }

    #[test]
    fn parallel_branch_isolation() {
        // One branch writes a slot; the sibling must not see it.
        let writer = Step::new("writer", CF::C3, |_| {
            Ok(StepOutcome {
                output: "wrote".into(),
                tokens_in: 0,
                tokens_out: 1,
                label: None,
                slot_writes: vec![SlotWrite { name: "x".into(), content: "leak".into(), priority: None }],
            })
        });
        let reader = Step::new("reader", CF::C3, |input: &StepInput| {
            let seen = input.ctx.slot("x").unwrap_or("clean").to_string();
            Ok(StepOutcome::text(seen, 0))
        });
        let agg = Step::new("agg", CF::C6, |_| Ok(StepOutcome::text("done", 0)));
        let root = WorkflowNode::Parallel {
            branches: vec![WorkflowNode::Step(writer), WorkflowNode::Step(reader)],
            aggregator: agg,
        };
        let (ctx, _, _) = run(&root, Context::new("t"), &ScriptedModel::empty(0)).unwrap();
        let reader_out = ctx.history.iter().find(|h| h.step == "reader").unwrap();
        assert_eq!(reader_out.output, "clean");
    }

    #[test]
    fn route_takes_default_when_unmatched() {
        let classifier = Step::new("cls", CF::C3, |_| {
            let mut o = StepOutcome::text("?", 1);
            o.label = Some("nope".into());
            Ok(o)
        });
        let mut branches = BTreeMap::new();
        branches.insert("a".to_string(), WorkflowNode::Step(echo_step("A")));
        let root = WorkflowNode::Route {
            classifier,
            branches,
            default: Some(Box::new(WorkflowNode::Step(echo_step("D")))),
        };
        let (ctx, _, trace) = run(&root, Context::new("t"), &ScriptedModel::empty(0)).unwrap();
        assert_eq!(ctx.history.last().unwrap().step, "D");
        assert_eq!(trace.count(TraceKind::BranchTaken), 1);
    }

    #[test]
    fn budget_exceeded_halts_with_partial_trace() {
        let root = WorkflowNode::chain(vec![
            WorkflowNode::Step(emit_tokens_step("a", 600)),
            WorkflowNode::Step(emit_tokens_step("b", 600)),
        ]);
        let mut ctx = Context::new("t");
        let mut ledger = TokenLedger::with_token_budget(1000);
        let mut trace = Trace::new();
        let err = execute(&root, &mut ctx, &mut ledger, &ScriptedModel::empty(0), &mut trace)
            .unwrap_err();
        assert!(matches!(err, KernelError::BudgetExceeded { .. }));
        assert_eq!(ledger.total_tokens(), 600);
        assert_eq!(trace.count(TraceKind::NodeEnter), trace.count(TraceKind::NodeExit));
        assert_eq!(trace.count(TraceKind::Error), 1);
    }

    #[test]
    fn validate_flags_invariant_breaches() {
        let classifier = echo_step("cls");
        let root = WorkflowNode::Route {
            classifier,
            branches: BTreeMap::new(),
            default: None,
        };
        let v = validate(&root);
        assert!(matches!(v[0], Violation::MissingDefault { .. }));

        let looped = WorkflowNode::Loop {
            body: Box::new(WorkflowNode::Step(echo_step("b"))),
            exit: Arc::new(|_| true),
            max_iterations: 0,
        };
        assert!(matches!(validate(&looped)[0], Violation::InvalidIterationCap { .. }));

        let hier = WorkflowNode::Hierarchy(vec![
            WorkflowNode::Step(echo_step("l0")),
            WorkflowNode::Step(echo_step("l1")),
            WorkflowNode::Step(echo_step("l2")),
        ]);
        assert!(validate(&hier).is_empty());
    }

    #[test]
    fn charge_arithmetic() {
        let mut ledger = TokenLedger::unbounded();
        let e = ledger.charge("s", 100, 400, 0.0).unwrap();
        assert_eq!(e.microdollars, 0);

        let mut capped = TokenLedger::with_token_budget(1000);
        capped.charge("a", 0, 600, 0.0).unwrap();
        assert!(capped.charge("b", 0, 600, 0.0).is_err());
    }

    #[test]
    fn deterministic_reruns_are_byte_identical() {
        let root = WorkflowNode::chain(vec![
            WorkflowNode::Step(Step::prompt("ask", CF::C3, "q:{task}", 32)),
            WorkflowNode::Step(Step::prompt("followup", CF::C3, "f:{last}", 32)),
        ]);
        let model = ScriptedModel::empty(7).rule("q:", "first").rule("f:", "second");
        let (_, l1, t1) = run(&root, Context::new("job"), &model).unwrap();
        let (_, l2, t2) = run(&root, Context::new("job"), &model).unwrap();
        assert_eq!(t1.to_jsonl(), t2.to_jsonl());
        assert_eq!(serde_json::to_string(&l1).unwrap(), serde_json::to_string(&l2).unwrap());
    }
}
