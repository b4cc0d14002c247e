//! Complexity-Based Routing (C3xT2) and Plan-and-Execute (C4xT4) with
//! saga-style compensation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::catalog::CognitiveFunction as CF;
use crate::kernel::{
    self, Context, Step, StepInput, StepOutcome, TokenLedger, Trace, WorkflowNode,
};
use crate::model::ScriptedModel;

// ---------------------------------------------------------------------------
// Reasoning tiers

/// Micro-dollars per query; Extended is the anchor rate, System2 is the
/// Extended per-token rate applied to its 8K thinking budget
/// (8000 * 190000/64000 = 23750).
pub const SYSTEM1_MICRODOLLARS: u64 = 1_500;
pub const SYSTEM2_MICRODOLLARS: u64 = 190_000 * 8_000 / 64_000;
pub const EXTENDED_MICRODOLLARS: u64 = 190_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReasoningTier {
    System1,
    System2,
    Extended,
}

impl ReasoningTier {
    pub fn thinking_tokens(&self) -> u64 {
        match self {
            ReasoningTier::System1 => 500,
            ReasoningTier::System2 => 8_000,
            ReasoningTier::Extended => 64_000,
        }
    }

    pub fn microdollars_per_query(&self) -> u64 {
        match self {
            ReasoningTier::System1 => SYSTEM1_MICRODOLLARS,
            ReasoningTier::System2 => SYSTEM2_MICRODOLLARS,
            ReasoningTier::Extended => EXTENDED_MICRODOLLARS,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ReasoningTier::System1 => "system1",
            ReasoningTier::System2 => "system2",
            ReasoningTier::Extended => "extended",
        }
    }
}

const CUE_WORDS: [&str; 4] = ["then", "diagnose", "compare", "why"];

/// Transparent feature-threshold heuristic: 2 points per multi-step cue
/// word, 1 per numeric token, 1 per question mark, 1 if the query is
/// long (> 50 tokens). Score < 2 is System1, 2-4 is System2, > 4 is
/// Extended.
pub fn complexity_score(query: &str) -> u64 {
    let lower = query.to_lowercase();
    let words: Vec<&str> =
        lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
    let cues = words.iter().filter(|w| CUE_WORDS.contains(w)).count() as u64;
    let numerics = words.iter().filter(|w| w.chars().all(|c| c.is_ascii_digit())).count() as u64;
    let questions = query.matches('?').count() as u64;
    let long = u64::from(crate::model::tokenize(query) > 50);
    2 * cues + numerics + questions + long
}

pub fn classify_complexity(query: &str) -> ReasoningTier {
    match complexity_score(query) {
        0..=1 => ReasoningTier::System1,
        2..=4 => ReasoningTier::System2,
        _ => ReasoningTier::Extended,
    }
}

#[derive(Debug)]
pub struct RoutedAnswer {
    pub answer: String,
    pub tier: ReasoningTier,
    pub cost_microdollars: u64,
    pub ledger: TokenLedger,
    pub trace: Trace,
}

/// Dispatch through a kernel Route node on the complexity classifier;
/// the answer step is capped at the tier's thinking budget and the
/// ledger is charged the tier's flat per-query cost.
pub fn route_and_answer(query: &str, model: &ScriptedModel) -> RoutedAnswer {
    let tier = classify_complexity(query);

    let classifier = Step::new("classify-complexity", CF::C3, |input: &StepInput| {
        let tier = classify_complexity(&input.ctx.task);
        let mut o = StepOutcome::text(format!("score {}", complexity_score(&input.ctx.task)), 0);
        o.label = Some(tier.label().to_string());
        Ok(o)
    });

    let answer_branch = |tier: ReasoningTier| {
        WorkflowNode::Step(Step::prompt(
            format!("answer-{}", tier.label()),
            CF::C3,
            "answer:{task}",
            tier.thinking_tokens(),
        ))
    };

    let mut branches = BTreeMap::new();
    branches.insert(ReasoningTier::System1.label().to_string(), answer_branch(ReasoningTier::System1));
    branches.insert(ReasoningTier::System2.label().to_string(), answer_branch(ReasoningTier::System2));
    branches.insert(ReasoningTier::Extended.label().to_string(), answer_branch(ReasoningTier::Extended));

    let root = WorkflowNode::Route {
        classifier,
        branches,
        default: Some(Box::new(WorkflowNode::Step(Step::prompt(
            "answer-default",
            CF::C3,
            "answer:{task}",
            ReasoningTier::System1.thinking_tokens(),
        )))),
    };

    let (ctx, mut ledger, trace) =
        kernel::run(&root, Context::new(query), model).expect("routing workflow is well-formed");
    let cost = tier.microdollars_per_query();
    ledger
        .charge_exact(&format!("tier-{}", tier.label()), 0, 0, cost)
        .expect("unbounded ledger");
    RoutedAnswer {
        answer: ctx.last_output().unwrap_or_default().to_string(),
        tier,
        cost_microdollars: cost,
        ledger,
        trace,
    }
}

// ---------------------------------------------------------------------------
// Daily cost report

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryMix {
    pub system1: u64,
    pub system2: u64,
    pub extended: u64,
}

impl QueryMix {
    pub fn total_queries(&self) -> u64 {
        self.system1 + self.system2 + self.extended
    }
}

impl std::ops::Add for QueryMix {
    type Output = QueryMix;
    fn add(self, rhs: QueryMix) -> QueryMix {
        QueryMix {
            system1: self.system1 + rhs.system1,
            system2: self.system2 + rhs.system2,
            extended: self.extended + rhs.extended,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub mix: QueryMix,
    pub total_microdollars: u64,
    /// Savings versus running every query at the Extended rate.
    pub delta_vs_all_extended_microdollars: i128,
    /// Extra spend versus running every query at the System1 rate.
    pub delta_vs_all_system1_microdollars: i128,
}

pub fn daily_cost_report(mix: QueryMix) -> CostReport {
    let total = mix.system1 * SYSTEM1_MICRODOLLARS
        + mix.system2 * SYSTEM2_MICRODOLLARS
        + mix.extended * EXTENDED_MICRODOLLARS;
    let n = mix.total_queries();
    let all_extended = n * EXTENDED_MICRODOLLARS;
    let all_system1 = n * SYSTEM1_MICRODOLLARS;
    CostReport {
        mix,
        total_microdollars: total,
        delta_vs_all_extended_microdollars: all_extended as i128 - total as i128,
        delta_vs_all_system1_microdollars: total as i128 - all_system1 as i128,
    }
}

/// Render micro-dollars as a dollar string with thousands separators,
/// trimming trailing zeros but always keeping cents.
pub fn format_microdollars(micro: u64) -> String {
    let dollars = micro / 1_000_000;
    let rem = micro % 1_000_000;
    let whole = group_thousands(dollars);
    if rem.is_multiple_of(10_000) {
        format!("${whole}.{:02}", rem / 10_000)
    } else {
        let mut frac = format!("{rem:06}");
        while frac.ends_with('0') {
            frac.pop();
        }
        format!("${whole}.{frac}")
    }
}

fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

// ---------------------------------------------------------------------------
// Plan-and-Execute (saga)

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTask {
    pub id: String,
    #[serde(default)]
    pub desc: String,
    #[serde(default)]
    pub deps: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compensation: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub tasks: Vec<SubTask>,
}

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("plan contains a dependency cycle")]
    CyclicPlan,
    #[error("task {task:?} depends on unknown id {dep:?}")]
    UnknownDependency { task: String, dep: String },
    #[error("duplicate task id {0:?}")]
    DuplicateId(String),
    #[error("plan parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("planner produced no plan for task {0:?}")]
    NoPlan(String),
}

impl Plan {
    pub fn from_json(json: &str) -> Result<Plan, PlanError> {
        let plan: Plan = serde_json::from_str(json)?;
        plan.validate()?;
        Ok(plan)
    }

    /// Kahn's algorithm: duplicate ids, unknown deps, and cycles are
    /// all rejected.
    pub fn validate(&self) -> Result<(), PlanError> {
        let mut ids = BTreeSet::new();
        for t in &self.tasks {
            if !ids.insert(t.id.as_str()) {
                return Err(PlanError::DuplicateId(t.id.clone()));
            }
        }
        for t in &self.tasks {
            for d in &t.deps {
                if !ids.contains(d.as_str()) {
                    return Err(PlanError::UnknownDependency {
                        task: t.id.clone(),
                        dep: d.clone(),
                    });
                }
            }
        }
        let mut remaining: BTreeMap<&str, BTreeSet<&str>> = self
            .tasks
            .iter()
            .map(|t| (t.id.as_str(), t.deps.iter().map(String::as_str).collect()))
            .collect();
        while !remaining.is_empty() {
            let ready: Vec<&str> = remaining
                .iter()
                .filter(|(_, deps)| deps.iter().all(|d| !remaining.contains_key(*d)))
                .map(|(id, _)| *id)
                .collect();
            if ready.is_empty() {
                return Err(PlanError::CyclicPlan);
            }
            for id in ready {
                remaining.remove(id);
            }
        }
        Ok(())
    }

    pub fn task(&self, id: &str) -> Option<&SubTask> {
        self.tasks.iter().find(|t| t.id == id)
    }
}

/// Ask the scripted planner to decompose a task; the response must be a
/// plan document, which is then validated before use.
pub fn plan(task: &str, model: &ScriptedModel) -> Result<Plan, PlanError> {
    let completion = model.complete(&format!("plan: {task}"), 64_000);
    if completion.text == model.fallback {
        return Err(PlanError::NoPlan(task.to_string()));
    }
    Plan::from_json(&completion.text)
}

/// A planner script holding the built-in demo fixtures: a 4-task
/// diamond for "deploy report" and a trivial single-step plan.
pub fn demo_planner_model(seed: u64) -> ScriptedModel {
    let diamond = serde_json::json!({
        "tasks": [
            {"id": "a-fetch", "desc": "fetch data", "deps": [], "compensation": "drop-staging"},
            {"id": "b-analyze", "desc": "analyze", "deps": ["a-fetch"], "compensation": "discard-analysis"},
            {"id": "c-chart", "desc": "render charts", "deps": ["a-fetch"], "compensation": "delete-charts"},
            {"id": "d-publish", "desc": "publish report", "deps": ["b-analyze", "c-chart"], "compensation": "retract"}
        ]
    });
    let single = serde_json::json!({
        "tasks": [{"id": "only", "desc": "do the thing", "deps": []}]
    });
    ScriptedModel::empty(seed)
        .rule("plan: deploy report", diamond.to_string())
        .rule("plan: single", single.to_string())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExecutionRecord {
    pub completed: Vec<String>,
    pub failed: Option<String>,
    /// Reverse completion order, restricted to tasks that declare a
    /// compensation.
    pub compensated: Vec<String>,
    pub outputs: BTreeMap<String, String>,
}

/// Run the plan in topological order, eligible tasks chosen ascending
/// by id. A failure stops the saga: nothing else starts and the
/// compensations of completed tasks run in reverse completion order.
/// Failures are embedded in the record, not propagated.
pub fn execute_plan<F>(plan: &Plan, worker: F, fail_at: Option<&str>) -> ExecutionRecord
where
    F: Fn(&SubTask) -> Result<String, String>,
{
    let mut record = ExecutionRecord::default();
    let mut done: BTreeSet<&str> = BTreeSet::new();
    loop {
        let mut eligible: Vec<&SubTask> = plan
            .tasks
            .iter()
            .filter(|t| !done.contains(t.id.as_str()))
            .filter(|t| t.deps.iter().all(|d| done.contains(d.as_str())))
            .collect();
        eligible.sort_by(|a, b| a.id.cmp(&b.id));
        let Some(task) = eligible.first() else { break };

        let result = if fail_at == Some(task.id.as_str()) {
            Err("injected failure".to_string())
        } else {
            worker(task)
        };
        match result {
            Ok(output) => {
                done.insert(task.id.as_str());
                record.completed.push(task.id.clone());
                record.outputs.insert(task.id.clone(), output);
            }
            Err(_) => {
                record.failed = Some(task.id.clone());
                record.compensated = record
                    .completed
                    .iter()
                    .rev()
                    .filter(|id| plan.task(id).is_some_and(|t| t.compensation.is_some()))
                    .cloned()
                    .collect();
                break;
            }
        }
    }
    record
}
