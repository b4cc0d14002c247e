//! Acceptance gate: ten checks, one PASS line each. Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use patternloom::advisor::{self, Authority, DomainConstraints, FailureAsymmetry, Volume};
use patternloom::catalog::{Catalog, CognitiveFunction, TopologyArchetype};
use patternloom::governance::{
    check_containment, evaluate_gate, harness_report, AccessRequest, ActionRequest, Containment,
    ContainmentHierarchy, ContainmentLevel, Cond, Field, Impact, Op, Reversibility, Rule,
    RuleSet, Usage, Verdict,
};
use patternloom::kernel::{self, Context, Step, StepInput, StepOutcome, WorkflowNode};
use patternloom::model::ScriptedModel;
use patternloom::perception::{cosine, embed, rag_pipeline, retrieve, KnowledgeStore};
use patternloom::reasoning::{
    daily_cost_report, execute_plan, format_microdollars, Plan, QueryMix, SubTask,
};
use patternloom::reflection::{generator_critic, self_heal, Critic, Verifier};

/// Deterministic xorshift64* generator; no external RNG needed.
struct Rng(u64);

impl Rng {
    fn new(seed: u64) -> Self {
        Rng(seed.max(1))
    }

    fn next(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.0 = x;
        x.wrapping_mul(0x2545F4914F6CDD1D)
    }

    fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }
}

fn pass(n: u32, what: &str) {
    println!("criterion {n}: PASS - {what}");
}

fn c1_catalog_counts(catalog: &Catalog) {
    let r = catalog.orthogonality_report();
    assert_eq!(r.named, 28);
    assert_eq!(r.original, 15);
    assert_eq!(r.empty, 14);
    assert_eq!(r.fill_ratio, 28.0 / 42.0);
    pass(1, "catalog counts 28 named / 15 original / 14 empty, fill 28/42");
}

fn c2_orthogonality(catalog: &Catalog) {
    let r = catalog.orthogonality_report();
    assert_eq!(r.per_topology[&TopologyArchetype::T5].len(), 4, "T5 column");
    assert_eq!(r.per_function[&CognitiveFunction::C3].len(), 4, "C3 row");
    assert_eq!(r.per_function[&CognitiveFunction::C5].len(), 4, "C5 row");
    pass(2, "T5 serves 4 functions; C3 and C5 rows each fill 4 cells");
}

fn c3_advisor_fixtures(catalog: &Catalog) {
    let t0 = Instant::now();
    let results = advisor::check_fixtures(catalog);
    assert_eq!(results.len(), 4);
    for r in &results {
        assert!(r.pass, "{}: {}", r.name, r.detail);
    }
    let expected = [
        ("lending", TopologyArchetype::T4, 7, "Audit trail"),
        ("legal", TopologyArchetype::T6, 8, "Data isolation"),
        ("network", TopologyArchetype::T2, 9, "Blast radius"),
        ("healthcare", TopologyArchetype::T1, 7, "Asymmetric safety"),
    ];
    for (fixture, (name, topo, count, focus)) in advisor::case_studies().iter().zip(expected) {
        assert_eq!(fixture.name, name);
        let rec = advisor::recommend(&fixture.constraints, catalog);
        assert_eq!(rec.primary_topology, topo, "{name} topology");
        assert_eq!(rec.pattern_ids.len(), count, "{name} pattern count");
        assert_eq!(rec.governance_focus, focus, "{name} focus");
    }
    assert!(t0.elapsed().as_secs() < 1, "advisor must answer in <1s");
    pass(3, "4/4 case studies: Orchestrate/Hierarchy/Route/Chain, 7/8/9/7, focus exact");
}

fn c4_cost_arithmetic() {
    let all_s1 = daily_cost_report(QueryMix { system1: 100_000, system2: 0, extended: 0 });
    assert_eq!(
        format_microdollars(all_s1.delta_vs_all_extended_microdollars as u64),
        "$18,850.00"
    );
    let all_ext = daily_cost_report(QueryMix { system1: 0, system2: 0, extended: 100_000 });
    assert_eq!(
        format_microdollars(all_ext.delta_vs_all_system1_microdollars as u64),
        "$18,850.00"
    );
    pass(4, "100k-query System1-vs-Extended delta is exactly $18,850.00");
}

fn c5_rag_oracle() {
    let t0 = Instant::now();
    let vocab = [
        "latency", "routing", "ledger", "triage", "kernel", "saga", "critic", "verifier",
        "chunk", "topology", "budget", "gate", "containment", "embed", "retrieve", "plan",
    ];
    let mut store = KnowledgeStore::new();
    let mut rng = Rng::new(5);
    for d in 0..100 {
        // exactly 10 chunks of 2,000 chars (500 tokens) per document
        let mut text = String::new();
        while text.len() < 20_000 {
            text.push_str(vocab[rng.below(vocab.len() as u64) as usize]);
            text.push(' ');
        }
        text.truncate(20_000);
        store.add_document(&format!("doc{d:03}"), &text);
    }
    assert_eq!(store.chunks.len(), 1_000);

    let query = "latency routing budget";
    for k in [1usize, 3, 10] {
        let got: BTreeSet<(String, usize)> = retrieve(&store, query, k)
            .unwrap()
            .iter()
            .map(|c| (c.doc_id.clone(), c.offset))
            .collect();
        // independent oracle: full sort by cosine with the same tie order
        let q = embed(query);
        let mut all: Vec<(f64, &str, usize)> = store
            .chunks
            .iter()
            .map(|c| (cosine(&q, &c.vector), c.doc_id.as_str(), c.offset))
            .collect();
        all.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)).then(a.2.cmp(&b.2))
        });
        let want: BTreeSet<(String, usize)> =
            all[..k].iter().map(|(_, d, o)| (d.to_string(), *o)).collect();
        assert_eq!(got, want, "top-{k} mismatch");
    }

    let model = ScriptedModel::empty(0).rule("", "grounded answer");
    let run = rag_pipeline(&store, query, 10, &model).unwrap();
    let retrieve_entry = run
        .ledger
        .entries
        .iter()
        .find(|e| e.step == "retrieve")
        .expect("retrieve step charged");
    assert_eq!(retrieve_entry.tokens_out, 5_000, "10 x 500-token chunks");
    assert!(t0.elapsed().as_secs() < 10);
    pass(5, "retrieval equals brute-force cosine for k in {1,3,10}; 10x500 charges 5,000 tokens");
}

fn random_plan(rng: &mut Rng) -> Plan {
    let n = 2 + rng.below(11) as usize; // 2..=12 nodes
    let mut tasks = Vec::new();
    for i in 0..n {
        let mut deps = BTreeSet::new();
        for j in 0..i {
            if rng.below(3) == 0 {
                deps.insert(format!("t{j:02}"));
            }
        }
        tasks.push(SubTask {
            id: format!("t{i:02}"),
            desc: format!("task {i}"),
            deps,
            compensation: if rng.below(4) > 0 { Some(format!("undo {i}")) } else { None },
        });
    }
    Plan { tasks }
}

/// Brute-force replay oracle: step-by-step simulation with a full
/// rescan of eligibility each round.
fn oracle_saga(plan: &Plan, fail_at: Option<&str>) -> (Vec<String>, Option<String>, Vec<String>) {
    let mut completed: Vec<String> = Vec::new();
    let mut failed = None;
    loop {
        let next = plan
            .tasks
            .iter()
            .filter(|t| !completed.contains(&t.id))
            .filter(|t| t.deps.iter().all(|d| completed.contains(d)))
            .map(|t| t.id.clone())
            .min();
        let Some(id) = next else { break };
        if fail_at == Some(id.as_str()) {
            failed = Some(id);
            break;
        }
        completed.push(id);
    }
    let compensated = match failed {
        Some(_) => completed
            .iter()
            .rev()
            .filter(|id| plan.task(id).is_some_and(|t| t.compensation.is_some()))
            .cloned()
            .collect(),
        None => Vec::new(),
    };
    (completed, failed, compensated)
}

fn c6_saga_property_suite() {
    let t0 = Instant::now();
    let mut rng = Rng::new(6);
    let mut cases = 0;
    for _ in 0..100 {
        let plan = random_plan(&mut rng);
        plan.validate().expect("generated plans are acyclic");
        let mut fail_points: Vec<Option<String>> =
            plan.tasks.iter().map(|t| Some(t.id.clone())).collect();
        fail_points.push(None);
        for fail_at in fail_points {
            let record = execute_plan(
                &plan,
                |t| Ok(format!("ok {}", t.id)),
                fail_at.as_deref(),
            );
            let (completed, failed, compensated) = oracle_saga(&plan, fail_at.as_deref());
            assert_eq!(record.completed, completed);
            assert_eq!(record.failed, failed);
            assert_eq!(record.compensated, compensated);
            // dependency ordering holds within the completed sequence
            for (i, id) in record.completed.iter().enumerate() {
                let task = plan.task(id).unwrap();
                for dep in &task.deps {
                    let pos = record.completed.iter().position(|c| c == dep);
                    assert!(pos.is_some_and(|p| p < i), "{dep} must precede {id}");
                }
            }
            cases += 1;
        }
    }
    assert!(t0.elapsed().as_secs() < 30);
    pass(6, &format!("{cases} saga runs match the replay oracle with ordered compensation"));
}

fn c7_governance_exhaustion() {
    let t0 = Instant::now();
    // fixture: 3 deny + 3 allow rules over tool/reversibility/impact
    let rule = |id: &str, field: Field, value: &str| Rule {
        id: id.into(),
        all: vec![Cond { field, op: Op::Eq, value: value.into() }],
    };
    let deny_pool = [
        rule("d-high", Field::Impact, "high"),
        rule("d-irrev", Field::Reversibility, "irreversible"),
        rule("d-db", Field::Tool, "db"),
    ];
    let allow_pool = [
        rule("a-low", Field::Impact, "low"),
        rule("a-rev", Field::Reversibility, "reversible"),
        rule("a-shell", Field::Tool, "shell"),
    ];
    let mut cases = 0;
    for mask in 0u32..64 {
        let rules = RuleSet {
            deny: deny_pool
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, r)| r.clone())
                .collect(),
            allow: allow_pool
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << (i + 3)) != 0)
                .map(|(_, r)| r.clone())
                .collect(),
        };
        for rev in [Reversibility::Reversible, Reversibility::Irreversible] {
            for impact in [Impact::Low, Impact::Medium, Impact::High] {
                let action = ActionRequest {
                    tool: "db".into(),
                    args: serde_json::Value::Null,
                    reversibility: rev,
                    impact,
                };
                let decision = evaluate_gate(&action, &rules);
                let deny_matches = rules.deny.iter().any(|r| r.matches(&action));
                if deny_matches {
                    assert_eq!(decision.verdict, Verdict::Deny, "active deny must win");
                } else {
                    assert_ne!(decision.verdict, Verdict::Deny);
                }
                cases += 1;
            }
        }
    }

    // effective-cap law over 1,000 random hierarchies
    let mut rng = Rng::new(7);
    for _ in 0..1_000 {
        let levels: Vec<ContainmentLevel> = (0..1 + rng.below(4))
            .map(|i| ContainmentLevel {
                name: format!("L{i}"),
                rate_limit: (rng.below(2) == 0).then(|| 1 + rng.below(100)),
                budget_cap_microdollars: (rng.below(2) == 0).then(|| rng.below(1_000_000)),
                ..Default::default()
            })
            .collect();
        let hierarchy = ContainmentHierarchy { levels: levels.clone() };
        let flattened = ContainmentHierarchy {
            levels: vec![ContainmentLevel {
                name: "min".into(),
                rate_limit: hierarchy.effective_rate_limit(),
                budget_cap_microdollars: hierarchy.effective_budget_cap(),
                ..Default::default()
            }],
        };
        let request = AccessRequest {
            cost_microdollars: rng.below(1_200_000),
            ..Default::default()
        };
        let usage = Usage {
            calls_in_window: rng.below(120),
            spent_microdollars: rng.below(500_000),
        };
        let a = check_containment(&request, &hierarchy, &usage);
        let b = check_containment(&request, &flattened, &usage);
        assert_eq!(
            matches!(a, Containment::Permit),
            matches!(b, Containment::Permit),
            "hierarchy must behave as its coordinate-wise minimum"
        );
    }
    assert!(t0.elapsed().as_secs() < 10);
    pass(7, &format!("deny precedence over {cases} cases; min-cap law over 1,000 hierarchies"));
}

fn c8_reflection_bounds() {
    // Generator-Critic never exceeds 2 passes under fuzzed inputs.
    let mut rng = Rng::new(8);
    let model = ScriptedModel::empty(0)
        .rule("generate:", "draft")
        .rule("revise:", "revised");
    for _ in 0..200 {
        let scores = vec![
            rng.below(100) as f64 / 100.0,
            rng.below(100) as f64 / 100.0,
        ];
        let threshold = rng.below(101) as f64 / 100.0;
        let bias = (rng.below(5) as f64 - 2.0) / 10.0;
        let critic = Critic::Scripted { scores, feedback: "fuzz".into() };
        let max_passes = 1 + rng.below(2) as usize;
        let (run, _, _) = generator_critic("task", &model, &critic, threshold, max_passes, bias);
        assert!(run.passes_used <= 2, "never more than 2 critique passes");
        assert!(run.passes_used >= 1);
    }

    // Self-Heal: iterations == min(first passing iteration, cap).
    // This fixture first passes the range check on iteration 3.
    let model = ScriptedModel::empty(0)
        .rule("value 200", "42")
        .rule("value 9000", "200")
        .rule("heal:", "9000");
    let verifier = Verifier::range(0.0, 100.0);
    for (cap, want_iters, want_pass) in [(5, 3, true), (3, 3, true), (2, 2, false), (1, 1, false)]
    {
        let (run, trace, _) = self_heal("fix the number", &model, &verifier, cap);
        assert_eq!(run.iterations, want_iters, "cap {cap}");
        assert_eq!(run.pass, want_pass, "cap {cap}");
        assert_eq!(
            trace.count(kernel::TraceKind::IterationStart) as u64,
            want_iters
        );
    }
    pass(8, "Generator-Critic <=2 passes on 200 fuzzed inputs; Self-Heal stops at min(fix, cap)");
}

fn leaf(counter: &mut u32) -> WorkflowNode {
    *counter += 1;
    WorkflowNode::Step(Step::prompt(
        format!("s{counter}"),
        CognitiveFunction::C3,
        format!("p{counter}:{{task}}"),
        64,
    ))
}

fn labeled_classifier(counter: &mut u32, label: &str) -> Step {
    *counter += 1;
    let name = format!("s{counter}");
    let label = label.to_string();
    Step::new(name, CognitiveFunction::C3, move |_: &StepInput| {
        let mut o = StepOutcome::text("classified", 0);
        o.label = Some(label.clone());
        Ok(o)
    })
}

fn random_workflow(rng: &mut Rng, depth: u32, counter: &mut u32) -> WorkflowNode {
    if depth == 0 || *counter > 40 {
        return leaf(counter);
    }
    match rng.below(6) {
        0 => leaf(counter),
        1 => WorkflowNode::Chain(
            (0..1 + rng.below(3)).map(|_| random_workflow(rng, depth - 1, counter)).collect(),
        ),
        2 => {
            let keys = ["alpha", "beta"];
            let chosen = keys[rng.below(2) as usize];
            let classifier = labeled_classifier(counter, chosen);
            let mut branches = BTreeMap::new();
            for key in keys {
                branches.insert(key.to_string(), random_workflow(rng, depth - 1, counter));
            }
            WorkflowNode::Route {
                classifier,
                branches,
                default: Some(Box::new(leaf(counter))),
            }
        }
        3 => {
            let branches =
                (0..2 + rng.below(2)).map(|_| random_workflow(rng, depth - 1, counter)).collect();
            let aggregator = match leaf(counter) {
                WorkflowNode::Step(s) => s,
                _ => unreachable!(),
            };
            WorkflowNode::Parallel { branches, aggregator }
        }
        4 => WorkflowNode::Loop {
            body: Box::new(random_workflow(rng, depth - 1, counter)),
            exit: std::sync::Arc::new(|_| false),
            max_iterations: 1 + rng.below(3),
        },
        _ => WorkflowNode::Hierarchy(
            (0..1 + rng.below(2)).map(|_| random_workflow(rng, depth - 1, counter)).collect(),
        ),
    }
}

fn c9_kernel_determinism() {
    let t0 = Instant::now();
    let model = ScriptedModel::empty(42).rule("p", "output text");
    for i in 0..1_000u64 {
        let mut build_rng = Rng::new(1_000 + i);
        let mut counter = 0;
        let root = random_workflow(&mut build_rng, 3, &mut counter);
        assert!(kernel::validate(&root).is_empty(), "fuzzed workflow {i} must be well-formed");

        let run = |node: &WorkflowNode| match kernel::run(node, Context::new("fuzz"), &model) {
            Ok((_, _, trace)) => trace,
            Err((_, trace)) => trace,
        };
        let first = run(&root);
        let second = run(&root);
        assert_eq!(first.to_jsonl(), second.to_jsonl(), "rerun {i} must be byte-identical");
        harness_report(&first).unwrap_or_else(|e| panic!("trace {i} unbalanced: {e}"));
    }
    assert!(t0.elapsed().as_secs() < 60);
    pass(9, "1,000 fuzzed workflows: balanced traces, byte-identical reruns");
}

#[test]
fn acceptance_gate() {
    let t0 = Instant::now();
    let catalog = Catalog::builtin();

    c1_catalog_counts(&catalog);
    c2_orthogonality(&catalog);
    c3_advisor_fixtures(&catalog);
    c4_cost_arithmetic();
    c5_rag_oracle();
    c6_saga_property_suite();
    c7_governance_exhaustion();
    c8_reflection_bounds();
    c9_kernel_determinism();

    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 300, "gate must finish in <5 minutes");
    pass(10, &format!("acceptance gate completed in {:.1}s (<300s)", elapsed.as_secs_f64()));
}

// A second advisor sanity check the gate relies on: recommendations
// only cite patterns that exist in the catalog.
#[test]
fn advisor_cites_only_catalog_patterns() {
    let catalog = Catalog::builtin();
    let mut rng = Rng::new(99);
    for _ in 0..200 {
        let constraints = DomainConstraints {
            time_budget_secs: rng.below(200_000),
            volume: [Volume::Single, Volume::Moderate, Volume::High, Volume::Stream]
                [rng.below(4) as usize],
            authority: [
                Authority::AdvisoryOnly,
                Authority::AutoLowRisk,
                Authority::AutoHighRisk,
                Authority::Mixed,
            ][rng.below(4) as usize],
            failure_asymmetry: [
                FailureAsymmetry::Symmetric,
                FailureAsymmetry::AsymmetricFalseNegative,
                FailureAsymmetry::AsymmetricFalsePositive,
            ][rng.below(3) as usize],
            domain_tag: [None, Some("lending"), Some("legal"), Some("network"), Some("healthcare")]
                [rng.below(5) as usize]
                .map(String::from),
        };
        let rec = advisor::recommend(&constraints, &catalog);
        for p in &rec.pattern_ids {
            assert!(catalog.find_by_name(p).is_some(), "{p} not in catalog");
        }
    }
}
