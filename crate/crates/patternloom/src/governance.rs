//! Approval Gate (C7xT2), Blast Radius Control (C7xT6), and the
//! Observability Harness report (C7xT4).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::kernel::{Trace, TraceKind};

// ---------------------------------------------------------------------------
// Actions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reversibility {
    Reversible,
    Irreversible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Impact {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionRequest {
    pub tool: String,
    #[serde(default)]
    pub args: serde_json::Value,
    pub reversibility: Reversibility,
    pub impact: Impact,
}

// ---------------------------------------------------------------------------
// Rules

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Tool,
    Reversibility,
    Impact,
    /// Dotted path into the args record.
    Arg(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Eq,
    Ne,
    Contains,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cond {
    pub field: Field,
    pub op: Op,
    pub value: String,
}

/// A pure predicate over an action: the conjunction of its conditions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    pub all: Vec<Cond>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    #[serde(default)]
    pub deny: Vec<Rule>,
    #[serde(default)]
    pub allow: Vec<Rule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Deny,
    Allow,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GateDecision {
    pub verdict: Verdict,
    pub matched_rule: Option<String>,
}

fn field_value(action: &ActionRequest, field: &Field) -> String {
    match field {
        Field::Tool => action.tool.clone(),
        Field::Reversibility => match action.reversibility {
            Reversibility::Reversible => "reversible".to_string(),
            Reversibility::Irreversible => "irreversible".to_string(),
        },
        Field::Impact => match action.impact {
            Impact::Low => "low",
            Impact::Medium => "medium",
            Impact::High => "high",
        }
        .to_string(),
        Field::Arg(path) => {
            let mut v = &action.args;
            for key in path.split('.') {
                v = &v[key];
            }
            match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            }
        }
    }
}

impl Rule {
    pub fn matches(&self, action: &ActionRequest) -> bool {
        self.all.iter().all(|c| {
            let actual = field_value(action, &c.field);
            match c.op {
                Op::Eq => actual == c.value,
                Op::Ne => actual != c.value,
                Op::Contains => actual.contains(&c.value),
            }
        })
    }
}

/// Deny -> Allow -> Human, in that order; the first matching deny rule
/// always wins.
pub fn evaluate_gate(action: &ActionRequest, rules: &RuleSet) -> GateDecision {
    if let Some(rule) = rules.deny.iter().find(|r| r.matches(action)) {
        return GateDecision { verdict: Verdict::Deny, matched_rule: Some(rule.id.clone()) };
    }
    if let Some(rule) = rules.allow.iter().find(|r| r.matches(action)) {
        return GateDecision { verdict: Verdict::Allow, matched_rule: Some(rule.id.clone()) };
    }
    GateDecision { verdict: Verdict::Human, matched_rule: None }
}

/// Resolves residual Human verdicts. Tests and batch runs use the
/// scripted approver; the CLI may prompt interactively.
pub trait Approver {
    fn approve(&mut self, action: &ActionRequest) -> bool;
}

pub struct ScriptedApprover(pub bool);

impl Approver for ScriptedApprover {
    fn approve(&mut self, _action: &ActionRequest) -> bool {
        self.0
    }
}

// ---------------------------------------------------------------------------
// Containment

/// One containment level. `None` allowlists are unrestricted; an
/// allowlist entry is a prefix for paths and an exact host for network.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContainmentLevel {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_allowlist: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network_allowlist: Option<Vec<String>>,
    /// Max calls per enforcement window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_limit: Option<u64>,
    /// Budget cap in micro-dollars.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_cap_microdollars: Option<u64>,
}

/// Ordered outermost to innermost; effective numeric limits compose by
/// minimum and allowlists by intersection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainmentHierarchy {
    pub levels: Vec<ContainmentLevel>,
}

impl ContainmentHierarchy {
    pub fn effective_rate_limit(&self) -> Option<u64> {
        self.levels.iter().filter_map(|l| l.rate_limit).min()
    }

    pub fn effective_budget_cap(&self) -> Option<u64> {
        self.levels.iter().filter_map(|l| l.budget_cap_microdollars).min()
    }
}

/// What an action wants to touch, plus its cost.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AccessRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<String>,
    #[serde(default)]
    pub cost_microdollars: u64,
}

/// Running totals at the enforcement point.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Usage {
    pub calls_in_window: u64,
    pub spent_microdollars: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Containment {
    Permit,
    /// Names the outermost blocking level.
    Block { level: String, reason: String },
}

/// Permitted iff every level permits; levels are checked outermost
/// first so the reason names the outermost blocker.
pub fn check_containment(
    request: &AccessRequest,
    hierarchy: &ContainmentHierarchy,
    usage: &Usage,
) -> Containment {
    for level in &hierarchy.levels {
        if let (Some(path), Some(allow)) = (&request.path, &level.path_allowlist) {
            if !allow.iter().any(|prefix| path.starts_with(prefix)) {
                return Containment::Block {
                    level: level.name.clone(),
                    reason: format!("path {path:?} outside allowlist"),
                };
            }
        }
        if let (Some(host), Some(allow)) = (&request.host, &level.network_allowlist) {
            if !allow.iter().any(|h| h == host) {
                return Containment::Block {
                    level: level.name.clone(),
                    reason: format!("host {host:?} outside allowlist"),
                };
            }
        }
        if let Some(limit) = level.rate_limit {
            if usage.calls_in_window + 1 > limit {
                return Containment::Block {
                    level: level.name.clone(),
                    reason: format!("rate limit {limit} calls/window"),
                };
            }
        }
        if let Some(cap) = level.budget_cap_microdollars {
            if usage.spent_microdollars + request.cost_microdollars > cap {
                return Containment::Block {
                    level: level.name.clone(),
                    reason: format!("budget cap {cap} microdollars"),
                };
            }
        }
    }
    Containment::Permit
}

// ---------------------------------------------------------------------------
// Harness report

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NodeUsage {
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub microdollars: u64,
    pub step_runs: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub per_step: BTreeMap<String, NodeUsage>,
    pub total_tokens: u64,
    pub total_microdollars: u64,
    pub step_runs: u64,
    pub iterations: u64,
    pub gate_allowed: u64,
    pub gate_denied: u64,
    pub gate_human: u64,
    pub containment_blocks: u64,
    pub errors: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
}

/// Pure function of the trace: per-step token/dollar totals, gate
/// decisions, containment blocks, iteration counts.
pub fn harness_report(trace: &Trace) -> Result<RunReport, ReportError> {
    // Enter/exit balance with stack discipline.
    let mut depth: i64 = 0;
    let mut last_seq: Option<u64> = None;
    for ev in &trace.events {
        if let Some(prev) = last_seq {
            if ev.seq <= prev {
                return Err(ReportError::MalformedTrace(format!(
                    "sequence numbers not strictly increasing at {}",
                    ev.seq
                )));
            }
        }
        last_seq = Some(ev.seq);
        match ev.kind {
            TraceKind::NodeEnter => depth += 1,
            TraceKind::NodeExit => {
                depth -= 1;
                if depth < 0 {
                    return Err(ReportError::MalformedTrace("exit without enter".into()));
                }
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(ReportError::MalformedTrace(format!("{depth} unmatched enters")));
    }

    let mut report = RunReport::default();
    for ev in &trace.events {
        match ev.kind {
            TraceKind::BudgetCharge => {
                let step = ev.payload["step"].as_str().unwrap_or("?").to_string();
                let entry = report.per_step.entry(step).or_default();
                let tin = ev.payload["tokens_in"].as_u64().unwrap_or(0);
                let tout = ev.payload["tokens_out"].as_u64().unwrap_or(0);
                let micro = ev.payload["microdollars"].as_u64().unwrap_or(0);
                entry.tokens_in += tin;
                entry.tokens_out += tout;
                entry.microdollars += micro;
                report.total_tokens += tin + tout;
                report.total_microdollars += micro;
            }
            TraceKind::StepRun => {
                report.step_runs += 1;
                let step = ev.payload["step"].as_str().unwrap_or("?").to_string();
                report.per_step.entry(step).or_default().step_runs += 1;
            }
            TraceKind::IterationStart => report.iterations += 1,
            TraceKind::GateDecision => match ev.payload["verdict"].as_str() {
                Some("Deny") => report.gate_denied += 1,
                Some("Allow") => report.gate_allowed += 1,
                _ => report.gate_human += 1,
            },
            TraceKind::Error => {
                report.errors += 1;
                if ev.payload["error"].as_str().is_some_and(|e| e.contains("containment")) {
                    report.containment_blocks += 1;
                }
            }
            _ => {}
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Trace;
    use serde_json::json;

    fn action(rev: Reversibility, impact: Impact) -> ActionRequest {
        ActionRequest { tool: "shell".into(), args: json!({}), reversibility: rev, impact }
    }

    fn rule(id: &str, field: Field, value: &str) -> Rule {
        Rule { id: id.into(), all: vec![Cond { field, op: Op::Eq, value: value.into() }] }
    }

    #[test]
    fn deny_beats_allow() {
        let rules = RuleSet {
            deny: vec![rule("no-high", Field::Impact, "high")],
            allow: vec![rule("yes-shell", Field::Tool, "shell")],
        };
        let d = evaluate_gate(&action(Reversibility::Reversible, Impact::High), &rules);
        assert_eq!(d.verdict, Verdict::Deny);
        assert_eq!(d.matched_rule.as_deref(), Some("no-high"));
    }

    #[test]
    fn empty_rules_reach_the_human() {
        let d = evaluate_gate(&action(Reversibility::Reversible, Impact::Low), &RuleSet::default());
        assert_eq!(d.verdict, Verdict::Human);
        assert!(d.matched_rule.is_none());
    }

    #[test]
    fn reversible_low_allow_rule() {
        let rules = RuleSet {
            deny: vec![],
            allow: vec![Rule {
                id: "safe".into(),
                all: vec![
                    Cond { field: Field::Reversibility, op: Op::Eq, value: "reversible".into() },
                    Cond { field: Field::Impact, op: Op::Eq, value: "low".into() },
                ],
            }],
        };
        let d = evaluate_gate(&action(Reversibility::Reversible, Impact::Low), &rules);
        assert_eq!(d.verdict, Verdict::Allow);
        let d2 = evaluate_gate(&action(Reversibility::Irreversible, Impact::Low), &rules);
        assert_eq!(d2.verdict, Verdict::Human);
    }

    #[test]
    fn arg_conditions_match_nested_paths() {
        let mut a = action(Reversibility::Reversible, Impact::Low);
        a.args = json!({"file": {"path": "/tmp/x"}});
        let r = Rule {
            id: "tmp-only".into(),
            all: vec![Cond { field: Field::Arg("file.path".into()), op: Op::Contains, value: "/tmp".into() }],
        };
        assert!(r.matches(&a));
    }

    #[test]
    fn budget_caps_compose_by_minimum() {
        let hierarchy = ContainmentHierarchy {
            levels: vec![
                ContainmentLevel { name: "org".into(), budget_cap_microdollars: Some(100_000_000), ..Default::default() },
                ContainmentLevel { name: "team".into(), budget_cap_microdollars: Some(50_000_000), ..Default::default() },
                ContainmentLevel { name: "task".into(), budget_cap_microdollars: Some(75_000_000), ..Default::default() },
            ],
        };
        assert_eq!(hierarchy.effective_budget_cap(), Some(50_000_000));
        let blocked = check_containment(
            &AccessRequest { cost_microdollars: 60_000_000, ..Default::default() },
            &hierarchy,
            &Usage::default(),
        );
        assert_eq!(
            blocked,
            Containment::Block { level: "team".into(), reason: "budget cap 50000000 microdollars".into() }
        );
    }

    #[test]
    fn fully_open_level_permits_everything() {
        let hierarchy = ContainmentHierarchy {
            levels: vec![ContainmentLevel { name: "open".into(), ..Default::default() }],
        };
        let req = AccessRequest {
            path: Some("/anywhere".into()),
            host: Some("example.test".into()),
            cost_microdollars: u64::MAX / 2,
        };
        assert_eq!(check_containment(&req, &hierarchy, &Usage::default()), Containment::Permit);
    }

    #[test]
    fn outermost_blocker_is_named() {
        let hierarchy = ContainmentHierarchy {
            levels: vec![
                ContainmentLevel {
                    name: "outer".into(),
                    path_allowlist: Some(vec!["/srv".into()]),
                    ..Default::default()
                },
                ContainmentLevel {
                    name: "inner".into(),
                    path_allowlist: Some(vec!["/home".into(), "/srv".into()]),
                    ..Default::default()
                },
            ],
        };
        let req = AccessRequest { path: Some("/home/agent".into()), ..Default::default() };
        match check_containment(&req, &hierarchy, &Usage::default()) {
            Containment::Block { level, .. } => assert_eq!(level, "outer"),
            Containment::Permit => panic!("expected a block"),
        }
    }

    #[test]
    fn empty_trace_yields_empty_report() {
        let report = harness_report(&Trace::new()).unwrap();
        assert_eq!(report, RunReport::default());
    }

    #[test]
    fn unbalanced_trace_is_malformed() {
        let mut t = Trace::new();
        t.emit(TraceKind::NodeEnter, &["root".into()], json!({}));
        assert!(harness_report(&t).is_err());
    }

    #[test]
    fn gate_decisions_are_counted() {
        let mut t = Trace::new();
        t.emit(TraceKind::NodeEnter, &["root".into()], json!({}));
        t.emit(TraceKind::GateDecision, &["root".into()], json!({"verdict": "Deny"}));
        t.emit(TraceKind::NodeExit, &["root".into()], json!({}));
        let report = harness_report(&t).unwrap();
        assert_eq!(report.gate_denied, 1);
    }
}
