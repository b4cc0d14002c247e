//! The pattern-selection advisor: five selection laws plus domain
//! overlays, run as the six-step methodology (Bound, Map, Topology,
//! Select, Impact, Build) and validated against four case studies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::catalog::{Catalog, TopologyArchetype};

// ---------------------------------------------------------------------------
// Constraints

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Volume {
    Single,
    /// 10-50 items.
    Moderate,
    /// 100-500 items.
    High,
    Stream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Authority {
    AdvisoryOnly,
    AutoLowRisk,
    AutoHighRisk,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureAsymmetry {
    Symmetric,
    /// Missing a real problem is the costly direction.
    AsymmetricFalseNegative,
    /// Raising a false alarm is the costly direction.
    AsymmetricFalsePositive,
}

impl FromStr for Volume {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Volume::Single),
            "moderate" => Ok(Volume::Moderate),
            "high" => Ok(Volume::High),
            "stream" => Ok(Volume::Stream),
            other => Err(format!("unknown volume {other:?}")),
        }
    }
}

impl FromStr for Authority {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "advisory" | "advisory_only" => Ok(Authority::AdvisoryOnly),
            "auto_low_risk" | "auto-low" => Ok(Authority::AutoLowRisk),
            "auto_high_risk" | "auto-high" => Ok(Authority::AutoHighRisk),
            "mixed" => Ok(Authority::Mixed),
            other => Err(format!("unknown authority {other:?}")),
        }
    }
}

impl FromStr for FailureAsymmetry {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "symmetric" => Ok(FailureAsymmetry::Symmetric),
            "false_negative" | "asymmetric_false_negative" => {
                Ok(FailureAsymmetry::AsymmetricFalseNegative)
            }
            "false_positive" | "asymmetric_false_positive" => {
                Ok(FailureAsymmetry::AsymmetricFalsePositive)
            }
            other => Err(format!("unknown asymmetry {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainConstraints {
    pub time_budget_secs: u64,
    pub volume: Volume,
    pub authority: Authority,
    pub failure_asymmetry: FailureAsymmetry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_tag: Option<String>,
}

/// Parse a human time spec: plain seconds, or `Ns`/`Nmin`/`Nm`/`Nh`/`Nd`.
pub fn parse_time_budget(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (digits, unit): (String, String) = (
        s.chars().take_while(|c| c.is_ascii_digit()).collect(),
        s.chars().skip_while(|c| c.is_ascii_digit()).collect(),
    );
    let n: u64 = digits.parse().map_err(|_| format!("bad time budget {s:?}"))?;
    let mult = match unit.trim() {
        "" | "s" | "sec" | "secs" => 1,
        "m" | "min" | "mins" => 60,
        "h" | "hr" | "hrs" | "hours" => 3600,
        "d" | "day" | "days" => 86400,
        other => return Err(format!("bad time unit {other:?}")),
    };
    Ok(n * mult)
}

// ---------------------------------------------------------------------------
// The five laws

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CountRange {
    pub min: usize,
    /// None means open-ended ("10+").
    pub max: Option<usize>,
}

impl CountRange {
    pub fn contains(&self, n: usize) -> bool {
        n >= self.min && self.max.is_none_or(|m| n <= m)
    }
}

impl fmt::Display for CountRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.max {
            Some(m) => write!(f, "{}-{}", self.min, m),
            None => write!(f, "{}+", self.min),
        }
    }
}

/// Law 1: time pressure determines architectural complexity. Bands
/// are inclusive at the upper edge so a 60-second budget is still
/// the seconds tier.
pub fn law1_complexity(time_budget_secs: u64) -> (TopologyArchetype, CountRange) {
    if time_budget_secs <= 60 {
        (TopologyArchetype::T1, CountRange { min: 3, max: Some(5) })
    } else if time_budget_secs <= 3600 {
        (TopologyArchetype::T2, CountRange { min: 5, max: Some(7) })
    } else if time_budget_secs <= 86400 {
        (TopologyArchetype::T4, CountRange { min: 7, max: Some(8) })
    } else {
        (TopologyArchetype::T6, CountRange { min: 10, max: None })
    }
}

/// Law 2: action authority determines the governance pattern(s).
pub fn law2_governance(authority: Authority) -> Vec<&'static str> {
    match authority {
        Authority::AdvisoryOnly => vec!["Approval Gate"],
        Authority::AutoLowRisk => vec!["Blast Radius Control"],
        Authority::AutoHighRisk => vec!["Guardrail Sandwich"],
        Authority::Mixed => vec!["Approval Gate", "Blast Radius Control", "Guardrail Sandwich"],
    }
}

/// Law 3: failure-cost asymmetry sets the critic bias. Negative
/// tightens the threshold (errs toward rejection/escalation).
pub fn law3_bias(asymmetry: FailureAsymmetry) -> f64 {
    match asymmetry {
        FailureAsymmetry::Symmetric => 0.0,
        FailureAsymmetry::AsymmetricFalseNegative => -0.2,
        FailureAsymmetry::AsymmetricFalsePositive => 0.2,
    }
}

pub struct CollaborationPlan {
    pub patterns: Vec<&'static str>,
    pub upgrade_to_hierarchy: bool,
    pub warning: Option<&'static str>,
}

/// Law 4: volume determines collaboration needs.
pub fn law4_collaboration(volume: Volume) -> CollaborationPlan {
    match volume {
        Volume::Single => CollaborationPlan {
            patterns: vec![],
            upgrade_to_hierarchy: false,
            warning: None,
        },
        Volume::Moderate => CollaborationPlan {
            patterns: vec!["Fan-Out/Gather"],
            upgrade_to_hierarchy: false,
            warning: None,
        },
        Volume::High => CollaborationPlan {
            patterns: vec!["Hierarchical Delegation", "Fan-Out/Gather"],
            upgrade_to_hierarchy: true,
            warning: None,
        },
        Volume::Stream => CollaborationPlan {
            patterns: vec!["Tool Dispatch"],
            upgrade_to_hierarchy: false,
            warning: Some("continuous stream: pair routing with auto-scaling infrastructure"),
        },
    }
}

/// Always-recommended baseline patterns.
pub const FOUNDATIONAL: [&str; 4] = [
    "Context Triage",
    "RAG Pipeline",
    "Complexity-Based Routing",
    "Generator-Critic",
];

/// Domain overlays: pattern sets the laws alone do not derive,
/// keyed by domain tag.
pub fn domain_overlay(domain_tag: Option<&str>) -> Vec<&'static str> {
    match domain_tag {
        Some("lending") => vec!["Iterative Hypothesis Testing", "Observability Harness"],
        Some("legal") => vec!["Observability Harness"],
        Some("network") => vec!["Self-Heal Loop"],
        Some("healthcare") => vec!["Semantic Compaction", "Observability Harness"],
        _ => vec![],
    }
}

fn governance_focus(c: &DomainConstraints) -> &'static str {
    if c.failure_asymmetry != FailureAsymmetry::Symmetric {
        "Asymmetric safety"
    } else if c.authority != Authority::AdvisoryOnly {
        "Blast radius"
    } else if c.volume == Volume::High {
        "Data isolation"
    } else {
        "Audit trail"
    }
}

// ---------------------------------------------------------------------------
// Recommendation

#[derive(Debug, Clone, Serialize)]
pub struct Recommendation {
    pub primary_topology: TopologyArchetype,
    pub pattern_ids: BTreeSet<String>,
    pub governance: Vec<String>,
    pub governance_focus: String,
    pub critic_bias: f64,
    pub law_citations: Vec<(u8, String)>,
    pub warnings: Vec<String>,
    /// Law 5: per-pattern parameter notes (structural template, domain
    /// parameterization).
    pub parameterization: BTreeMap<String, String>,
    /// A runnable workflow descriptor skeleton for the chosen topology.
    pub skeleton: serde_json::Value,
}

fn skeleton_for(topology: TopologyArchetype) -> serde_json::Value {
    let step = |name: &str, prompt: &str| {
        json!({"type": "step", "name": name, "prompt": prompt})
    };
    match topology {
        TopologyArchetype::T1 => json!({
            "type": "chain",
            "children": [step("triage", "triage:{task}"),
                         step("draft", "draft:{last}"),
                         step("critique", "critique:{last}")]
        }),
        TopologyArchetype::T2 => json!({
            "type": "route",
            "classifier": step("classify", "classify:{task}"),
            "branches": {
                "simple": step("fast-path", "fast:{task}"),
                "complex": step("deep-path", "deep:{task}")
            },
            "default": step("fallback", "fallback:{task}")
        }),
        TopologyArchetype::T3 => json!({
            "type": "parallel",
            "branches": [step("shard-a", "part a of {task}"),
                         step("shard-b", "part b of {task}")],
            "aggregator": step("gather", "gather:{task}")
        }),
        TopologyArchetype::T4 => json!({
            "type": "orchestrate",
            "coordinator": step("plan", "plan:{task}"),
            "workers": [step("worker-1", "work 1:{task}"),
                        step("worker-2", "work 2:{task}")],
            "synthesizer": step("synthesize", "synthesize:{task}")
        }),
        TopologyArchetype::T5 => json!({
            "type": "loop",
            "max_iterations": 3,
            "exit": {"contains": "pass"},
            "body": step("refine", "refine:{last}")
        }),
        TopologyArchetype::T6 => json!({
            "type": "hierarchy",
            "levels": [step("manager", "delegate:{task}"),
                       {"type": "parallel",
                        "branches": [step("specialist-a", "part a of {task}"),
                                     step("specialist-b", "part b of {task}")],
                        "aggregator": step("gather", "gather:{task}")}]
        }),
    }
}

/// The six-step methodology: Bound, Map, Topology, Select, Impact,
/// Build. Deterministic in the constraints.
pub fn recommend(constraints: &DomainConstraints, catalog: &Catalog) -> Recommendation {
    let mut citations: Vec<(u8, String)> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();

    // Step 1 (Bound): normalize the time budget into a complexity tier.
    let (tier, range) = law1_complexity(constraints.time_budget_secs);
    citations.push((1, format!("{}s budget -> {} tier, {} patterns", constraints.time_budget_secs, tier.name(), range)));

    // Step 2 (Map): the foundational baseline is always in.
    let mut patterns: BTreeSet<String> = FOUNDATIONAL.iter().map(|s| s.to_string()).collect();

    // Step 3 (Topology): Law 1's tier, upgraded by Law 4 when high
    // volume demands nested delegation.
    let collab = law4_collaboration(constraints.volume);
    let primary_topology = if collab.upgrade_to_hierarchy {
        citations.push((4, "high volume upgrades primary topology to Hierarchy".into()));
        TopologyArchetype::T6
    } else {
        tier
    };

    // Step 4 (Select): governance (Law 2), collaboration (Law 4),
    // then the domain overlay.
    let governance: Vec<String> =
        law2_governance(constraints.authority).into_iter().map(String::from).collect();
    citations.push((2, format!("{:?} authority -> {}", constraints.authority, governance.join(" + "))));
    patterns.extend(governance.iter().cloned());
    for p in &collab.patterns {
        patterns.insert((*p).to_string());
    }
    if !collab.patterns.is_empty() {
        citations.push((4, format!("{:?} volume -> {}", constraints.volume, collab.patterns.join(" + "))));
    }
    if let Some(w) = collab.warning {
        warnings.push(w.to_string());
    }
    for p in domain_overlay(constraints.domain_tag.as_deref()) {
        patterns.insert(p.to_string());
    }

    // Every recommended pattern must exist in the catalog.
    for p in &patterns {
        debug_assert!(catalog.find_by_name(p).is_some(), "unknown pattern {p:?}");
    }

    if !range.contains(patterns.len()) {
        warnings.push(format!(
            "pattern count {} outside the {} tier's {} range; domain requirements override",
            patterns.len(),
            tier.name(),
            range
        ));
    }

    // Step 5 (Impact): Law 3 sets the critic bias; Law 5 records the
    // per-pattern parameterization surface.
    let critic_bias = law3_bias(constraints.failure_asymmetry);
    citations.push((3, format!("{:?} -> critic bias {critic_bias:+.1}", constraints.failure_asymmetry)));
    let mut parameterization = BTreeMap::new();
    for p in &patterns {
        let note = match p.as_str() {
            "Generator-Critic" => format!("threshold bias {critic_bias:+.1}; budget {}s", constraints.time_budget_secs),
            "Context Triage" => "token budget scaled to the time tier".to_string(),
            "Approval Gate" => "deny/allow rules supplied by the domain".to_string(),
            _ => "structural template; domain supplies prompts and thresholds".to_string(),
        };
        parameterization.insert(p.clone(), note);
    }
    citations.push((5, "same templates, domain-specific parameters".into()));

    // Step 6 (Build): emit a runnable skeleton for the topology.
    let skeleton = skeleton_for(primary_topology);

    Recommendation {
        primary_topology,
        pattern_ids: patterns,
        governance,
        governance_focus: governance_focus(constraints).to_string(),
        critic_bias,
        law_citations: citations,
        warnings,
        parameterization,
        skeleton,
    }
}

// ---------------------------------------------------------------------------
// Case-study fixtures

#[derive(Debug, Clone, Serialize)]
pub struct CaseStudyFixture {
    pub name: &'static str,
    pub constraints: DomainConstraints,
    pub expected_topology: TopologyArchetype,
    pub expected_pattern_count: usize,
    pub expected_governance_focus: &'static str,
}

pub fn case_studies() -> Vec<CaseStudyFixture> {
    vec![
        CaseStudyFixture {
            name: "lending",
            constraints: DomainConstraints {
                time_budget_secs: 4 * 3600,
                volume: Volume::Single,
                authority: Authority::AdvisoryOnly,
                failure_asymmetry: FailureAsymmetry::Symmetric,
                domain_tag: Some("lending".into()),
            },
            expected_topology: TopologyArchetype::T4,
            expected_pattern_count: 7,
            expected_governance_focus: "Audit trail",
        },
        CaseStudyFixture {
            name: "legal",
            constraints: DomainConstraints {
                time_budget_secs: 8 * 3600,
                volume: Volume::High,
                authority: Authority::AdvisoryOnly,
                failure_asymmetry: FailureAsymmetry::Symmetric,
                domain_tag: Some("legal".into()),
            },
            expected_topology: TopologyArchetype::T6,
            expected_pattern_count: 8,
            expected_governance_focus: "Data isolation",
        },
        CaseStudyFixture {
            name: "network",
            constraints: DomainConstraints {
                time_budget_secs: 5 * 60,
                volume: Volume::Stream,
                authority: Authority::Mixed,
                failure_asymmetry: FailureAsymmetry::Symmetric,
                domain_tag: Some("network".into()),
            },
            expected_topology: TopologyArchetype::T2,
            expected_pattern_count: 9,
            expected_governance_focus: "Blast radius",
        },
        CaseStudyFixture {
            name: "healthcare",
            constraints: DomainConstraints {
                time_budget_secs: 60,
                volume: Volume::Single,
                authority: Authority::AdvisoryOnly,
                failure_asymmetry: FailureAsymmetry::AsymmetricFalseNegative,
                domain_tag: Some("healthcare".into()),
            },
            expected_topology: TopologyArchetype::T1,
            expected_pattern_count: 7,
            expected_governance_focus: "Asymmetric safety",
        },
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct FixtureResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

pub fn check_fixtures(catalog: &Catalog) -> Vec<FixtureResult> {
    case_studies()
        .into_iter()
        .map(|fixture| {
            let rec = recommend(&fixture.constraints, catalog);
            let mut mismatches = Vec::new();
            if rec.primary_topology != fixture.expected_topology {
                mismatches.push(format!(
                    "topology {} != expected {}",
                    rec.primary_topology.name(),
                    fixture.expected_topology.name()
                ));
            }
            if rec.pattern_ids.len() != fixture.expected_pattern_count {
                mismatches.push(format!(
                    "pattern count {} != expected {}",
                    rec.pattern_ids.len(),
                    fixture.expected_pattern_count
                ));
            }
            if rec.governance_focus != fixture.expected_governance_focus {
                mismatches.push(format!(
                    "focus {:?} != expected {:?}",
                    rec.governance_focus, fixture.expected_governance_focus
                ));
            }
            let pass = mismatches.is_empty();
            let detail = if pass {
                format!(
                    "{} / {} patterns / {}",
                    rec.primary_topology.name(),
                    rec.pattern_ids.len(),
                    rec.governance_focus
                )
            } else {
                mismatches.join("; ")
            };
            FixtureResult { name: fixture.name, pass, detail }
        })
        .collect()
}
