use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use patternloom::advisor::{
    self, Authority, DomainConstraints, FailureAsymmetry, Volume,
};
use patternloom::catalog::{Catalog, CognitiveFunction, TopologyArchetype};
use patternloom::descriptor::NodeSpec;
use patternloom::governance::{
    check_containment, evaluate_gate, harness_report, AccessRequest, ActionRequest,
    Containment, ContainmentHierarchy, RuleSet, Usage, Verdict,
};
use patternloom::kernel::{self, Context, Trace};
use patternloom::model::ScriptedModel;
use patternloom::perception::{rag_pipeline, KnowledgeStore};
use patternloom::reasoning::{
    daily_cost_report, execute_plan, format_microdollars, route_and_answer, Plan, QueryMix,
};
use patternloom::reflection::{
    fan_out_gather, generator_critic, self_heal, Critic, FanOutTask, GatherStrategy, Verifier,
};

#[derive(Parser)]
#[command(name = "patternloom", version, about = "Agent-pattern catalog, kernel, and advisor")]
struct Cli {
    /// Emit machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Seed for the scripted model backend.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Scripted-model rule file (JSON); defaults to the built-in demo script.
    #[arg(long, global = true)]
    model_script: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Query the 7x6 pattern matrix.
    Catalog {
        #[command(subcommand)]
        action: CatalogCmd,
    },
    /// Chunk and embed documents into a knowledge store.
    Ingest {
        /// Directory of text files to ingest.
        dir: PathBuf,
        /// Where to write the store.
        #[arg(long, default_value = "store.json")]
        store: PathBuf,
        /// Ask the store a question after ingesting.
        #[arg(long)]
        ask: Option<String>,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Execute a workflow descriptor.
    Run {
        /// Workflow descriptor (JSON).
        workflow: PathBuf,
        #[arg(long, default_value = "demo task")]
        task: String,
        /// Write the trace as JSONL to this path.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Route a query by complexity and answer it.
    Route {
        #[arg(long)]
        query: String,
    },
    /// Daily cost arithmetic for a query mix.
    CostReport {
        /// Mix spec, e.g. s1=93000,s2=6000,ext=1000
        #[arg(long)]
        mix: String,
    },
    /// Execute a plan as a saga with compensation on failure.
    SagaRun {
        /// Plan file: {"tasks":[{"id","desc","deps","compensation"}]}
        plan: PathBuf,
        /// Inject a failure at this task id.
        #[arg(long)]
        fail_at: Option<String>,
    },
    /// Generator-Critic demo: bounded critique passes.
    Reflect {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        /// Critic bias (Law 3 surface); negative is stricter.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        bias: f64,
    },
    /// Self-Heal demo: iterative repair against a deterministic verifier.
    Heal {
        /// Verifier fixture: schema | tests | range
        #[arg(long)]
        fixture: String,
        #[arg(long, default_value_t = 3)]
        max_iterations: u64,
    },
    /// Fan out N independent subtasks and gather the results.
    Fanout {
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// concat | vote | synthesis
        #[arg(long, default_value = "concat")]
        strategy: GatherStrategy,
    },
    /// Approval-gate evaluation.
    Gate {
        #[command(subcommand)]
        action: GateCmd,
    },
    /// Containment-hierarchy checks.
    Containment {
        #[command(subcommand)]
        action: ContainmentCmd,
    },
    /// Pattern-selection advisor.
    Advise(AdviseArgs),
    /// Summarize a trace file (JSONL) into a run report.
    Report {
        trace: PathBuf,
    },
}

#[derive(Subcommand)]
enum CatalogCmd {
    /// All named patterns with coordinates.
    List,
    /// One pattern by name or coordinate (e.g. "RAG Pipeline" or C2xT1).
    Show { pattern: String },
    /// Fill ratio and per-axis coverage.
    Report,
}

#[derive(Subcommand)]
enum GateCmd {
    /// Evaluate an action request (JSON file) against a rule set.
    Eval {
        /// {"tool","args","reversibility","impact"}
        action: PathBuf,
        /// {"deny":[...],"allow":[...]}; defaults to the built-in demo rules.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Resolve a residual Human verdict with a scripted approver.
        #[arg(long)]
        approve: Option<bool>,
    },
}

#[derive(Subcommand)]
enum ContainmentCmd {
    /// Check an access request against a level hierarchy.
    Check {
        /// {"levels":[{"name",...allowlists and caps...}]}
        #[arg(long)]
        hierarchy: PathBuf,
        #[arg(long)]
        path: Option<String>,
        #[arg(long)]
        host: Option<String>,
        #[arg(long, default_value_t = 0)]
        cost: u64,
        #[arg(long, default_value_t = 0)]
        calls: u64,
        #[arg(long, default_value_t = 0)]
        spent: u64,
    },
}

#[derive(Args)]
struct AdviseArgs {
    #[command(subcommand)]
    sub: Option<AdviseCmd>,
    /// Time budget, e.g. 60s, 5min, 4h.
    #[arg(long)]
    time: Option<String>,
    /// single | moderate | high | stream
    #[arg(long)]
    volume: Option<Volume>,
    /// advisory | auto_low_risk | auto_high_risk | mixed
    #[arg(long)]
    authority: Option<Authority>,
    /// symmetric | false_negative | false_positive
    #[arg(long)]
    asymmetry: Option<FailureAsymmetry>,
    #[arg(long)]
    domain: Option<String>,
}

#[derive(Subcommand)]
enum AdviseCmd {
    /// Validate the four built-in case studies.
    CheckFixtures,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Domain(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<String> for CliError {
    fn from(s: String) -> Self {
        CliError::Domain(s)
    }
}

fn domain<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Domain(e.to_string())
}

/// Demo script: enough rules to make every subcommand runnable offline.
fn demo_model(seed: u64) -> ScriptedModel {
    ScriptedModel::empty(seed)
        .rule("answer:", "routed answer")
        .rule("generate:", "first draft")
        .rule("revise:", "revised draft")
        .rule("repair:", "{\"status\": \"ok\"}")
        .rule("heal:", "not json at all")
        .rule("part ", "section text")
        .rule("gather:", "gathered")
}

fn load_model(cli: &Cli) -> Result<ScriptedModel, CliError> {
    match &cli.model_script {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            Ok(ScriptedModel::from_json(&text).map_err(domain)?.with_seed(cli.seed))
        }
        None => Ok(demo_model(cli.seed)),
    }
}

fn parse_coordinate(s: &str) -> Option<(CognitiveFunction, TopologyArchetype)> {
    let (c, t) = s.split_once(['x', 'X'])?;
    Some((c.trim().parse().ok()?, t.trim().parse().ok()?))
}

fn parse_mix(spec: &str) -> Result<QueryMix, CliError> {
    let mut mix = QueryMix::default();
    for part in spec.split(',') {
        let (key, val) = part
            .split_once('=')
            .ok_or_else(|| CliError::Domain(format!("bad mix component {part:?}")))?;
        let n: u64 = val
            .trim()
            .parse()
            .map_err(|_| CliError::Domain(format!("bad count {val:?}")))?;
        match key.trim() {
            "s1" | "system1" => mix.system1 = n,
            "s2" | "system2" => mix.system2 = n,
            "ext" | "extended" => mix.extended = n,
            other => return Err(CliError::Domain(format!("unknown tier {other:?}"))),
        }
    }
    Ok(mix)
}

fn emit(json_mode: bool, value: serde_json::Value, text: String) {
    if json_mode {
        println!("{}", serde_json::to_string_pretty(&value).unwrap());
    } else {
        println!("{text}");
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let catalog = Catalog::load(None).map_err(domain)?;
    match &cli.command {
        Command::Catalog { action } => match action {
            CatalogCmd::List => {
                let mut rows = Vec::new();
                let mut lines = Vec::new();
                for e in catalog.named_entries() {
                    let (c, t) = e.coordinate;
                    let name = e.name().unwrap_or("?");
                    rows.push(json!({"coordinate": format!("{c}x{t}"), "name": name,
                                     "executable": e.executable}));
                    let marker = if e.executable { " *" } else { "" };
                    lines.push(format!("{c}x{t}  {name}{marker}"));
                }
                lines.push("(* runnable demo)".to_string());
                emit(cli.json, json!(rows), lines.join("\n"));
            }
            CatalogCmd::Show { pattern } => {
                let entry = parse_coordinate(pattern)
                    .map(|coord| catalog.lookup(coord))
                    .or_else(|| catalog.find_by_name(pattern))
                    .ok_or_else(|| CliError::Domain(format!("no pattern {pattern:?}")))?;
                let (c, t) = entry.coordinate;
                emit(
                    cli.json,
                    serde_json::to_value(entry).unwrap(),
                    format!(
                        "{c}x{t} {} [{}]\n  function: {}\n  topology: {}",
                        entry.name().unwrap_or("(empty cell)"),
                        if entry.executable { "runnable" } else { "catalog-only" },
                        catalog.function_info(c).name,
                        catalog.topology_info(t).name,
                    ),
                );
            }
            CatalogCmd::Report => {
                let r = catalog.orthogonality_report();
                emit(
                    cli.json,
                    serde_json::to_value(&r).unwrap(),
                    format!(
                        "named {} / empty {} / original {}\nfill ratio {}/42 ({:.0}%)",
                        r.named,
                        r.empty,
                        r.original,
                        r.named,
                        r.fill_ratio * 100.0
                    ),
                );
            }
        },
        Command::Ingest { dir, store, ask, k } => {
            let mut ks = KnowledgeStore::new();
            let docs = ks.ingest_dir(dir).map_err(domain)?;
            ks.save(store).map_err(domain)?;
            let mut text = format!("ingested {docs} documents into {}", store.display());
            let mut payload = json!({"documents": docs, "store": store.display().to_string()});
            if let Some(question) = ask {
                let model = load_model(cli)?;
                let run = rag_pipeline(&ks, question, *k, &model).map_err(domain)?;
                text.push_str(&format!("\nanswer: {}", run.answer));
                payload["answer"] = json!(run.answer);
                payload["chunks"] = json!(run.reranked);
            }
            emit(cli.json, payload, text);
        }
        Command::Run { workflow, task, trace_out } => {
            let spec = NodeSpec::from_json(&std::fs::read_to_string(workflow)?).map_err(domain)?;
            let node = spec.compile().map_err(domain)?;
            let model = load_model(cli)?;
            let (ctx, ledger, trace) = match kernel::run(&node, Context::new(task.clone()), &model)
            {
                Ok(done) => done,
                Err((err, _trace)) => return Err(domain(err)),
            };
            if let Some(path) = trace_out {
                std::fs::write(path, trace.to_jsonl())?;
            }
            emit(
                cli.json,
                json!({
                    "output": ctx.last_output(),
                    "steps": ctx.history.len(),
                    "total_tokens": ledger.total_tokens(),
                    "total_microdollars": ledger.total_microdollars(),
                    "trace_events": trace.events.len(),
                }),
                format!(
                    "output: {}\nsteps: {}  tokens: {}  trace events: {}",
                    ctx.last_output().unwrap_or("(none)"),
                    ctx.history.len(),
                    ledger.total_tokens(),
                    trace.events.len()
                ),
            );
        }
        Command::Route { query } => {
            let model = load_model(cli)?;
            let routed = route_and_answer(query, &model);
            emit(
                cli.json,
                json!({
                    "tier": routed.tier.label(),
                    "answer": routed.answer,
                    "cost": format_microdollars(routed.cost_microdollars),
                }),
                format!(
                    "tier: {}\nanswer: {}\ncost: {}",
                    routed.tier.label(),
                    routed.answer,
                    format_microdollars(routed.cost_microdollars)
                ),
            );
        }
        Command::CostReport { mix } => {
            let report = daily_cost_report(parse_mix(mix)?);
            emit(
                cli.json,
                serde_json::to_value(&report).unwrap(),
                format!(
                    "queries: {}\ntotal: {}\nsaved vs all-extended: {}\nextra vs all-system1: {}",
                    report.mix.total_queries(),
                    format_microdollars(report.total_microdollars),
                    format_microdollars(report.delta_vs_all_extended_microdollars.max(0) as u64),
                    format_microdollars(report.delta_vs_all_system1_microdollars.max(0) as u64),
                ),
            );
        }
        Command::SagaRun { plan, fail_at } => {
            let plan = Plan::from_json(&std::fs::read_to_string(plan)?).map_err(domain)?;
            let record = execute_plan(
                &plan,
                |task| Ok(format!("done: {}", task.desc)),
                fail_at.as_deref(),
            );
            let ok = record.failed.is_none();
            emit(
                cli.json,
                serde_json::to_value(&record).unwrap(),
                format!(
                    "completed: {}\nfailed: {}\ncompensated: {}",
                    record.completed.join(", "),
                    record.failed.as_deref().unwrap_or("(none)"),
                    record.compensated.join(", ")
                ),
            );
            if !ok {
                return Err(CliError::Domain("saga failed and was compensated".into()));
            }
        }
        Command::Reflect { task, threshold, bias } => {
            let model = load_model(cli)?;
            let critic = Critic::Scripted {
                scores: vec![0.4, 0.9],
                feedback: "tighten the argument".into(),
            };
            let (run, _trace, ledger) =
                generator_critic(task, &model, &critic, *threshold, 2, *bias);
            emit(
                cli.json,
                json!({
                    "draft": run.draft,
                    "passes_used": run.passes_used,
                    "final_score": run.final_score,
                    "tokens": ledger.total_tokens(),
                }),
                format!(
                    "draft: {}\npasses: {}  final score: {:.2}",
                    run.draft, run.passes_used, run.final_score
                ),
            );
        }
        Command::Heal { fixture, max_iterations } => {
            let verifier = match fixture.as_str() {
                "schema" => Verifier::schema_json(),
                "tests" => Verifier::test_stub("ALL_TESTS_PASS"),
                "range" => Verifier::range(0.0, 100.0),
                other => return Err(CliError::Domain(format!("unknown fixture {other:?}"))),
            };
            let model = match fixture.as_str() {
                // first draft fails, the repair keyed on diagnostics passes
                "schema" => load_model(cli)?,
                "tests" => ScriptedModel::empty(cli.seed)
                    .rule("repair:", "ALL_TESTS_PASS")
                    .rule("heal:", "3 tests failed"),
                _ => ScriptedModel::empty(cli.seed).rule("repair:", "42").rule("heal:", "5000"),
            };
            let (run, _trace, _ledger) = self_heal(fixture, &model, &verifier, *max_iterations);
            emit(
                cli.json,
                serde_json::to_value(&run).unwrap(),
                format!(
                    "pass: {}  iterations: {}\ndraft: {}",
                    run.pass, run.iterations, run.draft
                ),
            );
            if !run.pass {
                return Err(CliError::Domain("verifier never passed".into()));
            }
        }
        Command::Fanout { n, strategy } => {
            let subtasks: Vec<FanOutTask> = (0..*n)
                .map(|i| FanOutTask {
                    slot: format!("part-{i}"),
                    prompt: format!("part {i} of the report"),
                })
                .collect();
            let model = load_model(cli)?;
            let (result, _trace, ledger) =
                fan_out_gather(&subtasks, &model, *strategy).map_err(domain)?;
            emit(
                cli.json,
                json!({
                    "aggregate": result.aggregate,
                    "branches": result.branch_outputs,
                    "conflicts": result.conflicts,
                    "tokens": ledger.total_tokens(),
                }),
                format!(
                    "aggregate: {}\nbranches: {}  conflicts: {}",
                    result.aggregate,
                    result.branch_outputs.len(),
                    result.conflicts.len()
                ),
            );
        }
        Command::Gate { action: GateCmd::Eval { action, rules, approve } } => {
            let action: ActionRequest =
                serde_json::from_str(&std::fs::read_to_string(action)?).map_err(domain)?;
            let rules: RuleSet = match rules {
                Some(path) => {
                    serde_json::from_str(&std::fs::read_to_string(path)?).map_err(domain)?
                }
                None => demo_rules(),
            };
            let mut decision = evaluate_gate(&action, &rules);
            let mut resolved_by_human = false;
            if decision.verdict == Verdict::Human {
                if let Some(answer) = approve {
                    decision.verdict = if *answer { Verdict::Allow } else { Verdict::Deny };
                    resolved_by_human = true;
                }
            }
            emit(
                cli.json,
                json!({
                    "verdict": format!("{:?}", decision.verdict),
                    "matched_rule": decision.matched_rule,
                    "resolved_by_human": resolved_by_human,
                }),
                format!(
                    "verdict: {:?}{}{}",
                    decision.verdict,
                    decision
                        .matched_rule
                        .as_deref()
                        .map(|r| format!("  (rule {r})"))
                        .unwrap_or_default(),
                    if resolved_by_human { "  (via human approver)" } else { "" }
                ),
            );
            if decision.verdict == Verdict::Deny {
                return Err(CliError::Domain("action denied".into()));
            }
        }
        Command::Containment {
            action: ContainmentCmd::Check { hierarchy, path, host, cost, calls, spent },
        } => {
            let hierarchy: ContainmentHierarchy =
                serde_json::from_str(&std::fs::read_to_string(hierarchy)?).map_err(domain)?;
            let request = AccessRequest {
                path: path.clone(),
                host: host.clone(),
                cost_microdollars: *cost,
            };
            let usage = Usage { calls_in_window: *calls, spent_microdollars: *spent };
            let outcome = check_containment(&request, &hierarchy, &usage);
            emit(
                cli.json,
                serde_json::to_value(&outcome).unwrap(),
                match &outcome {
                    Containment::Permit => "permit".to_string(),
                    Containment::Block { level, reason } => {
                        format!("block at {level}: {reason}")
                    }
                },
            );
            if outcome != Containment::Permit {
                return Err(CliError::Domain("access blocked".into()));
            }
        }
        Command::Advise(args) => match &args.sub {
            Some(AdviseCmd::CheckFixtures) => {
                let results = advisor::check_fixtures(&catalog);
                let all_pass = results.iter().all(|r| r.pass);
                let lines: Vec<String> = results
                    .iter()
                    .map(|r| {
                        format!("{} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail)
                    })
                    .collect();
                emit(
                    cli.json,
                    serde_json::to_value(&results).unwrap(),
                    format!(
                        "{}\n{}/{} fixtures pass",
                        lines.join("\n"),
                        results.iter().filter(|r| r.pass).count(),
                        results.len()
                    ),
                );
                if !all_pass {
                    return Err(CliError::Domain("fixture check failed".into()));
                }
            }
            None => {
                let missing = || CliError::Domain(
                    "advise needs --time, --volume, --authority and --asymmetry".into(),
                );
                let constraints = DomainConstraints {
                    time_budget_secs: advisor::parse_time_budget(
                        args.time.as_deref().ok_or_else(missing)?,
                    )?,
                    volume: args.volume.ok_or_else(missing)?,
                    authority: args.authority.ok_or_else(missing)?,
                    failure_asymmetry: args.asymmetry.ok_or_else(missing)?,
                    domain_tag: args.domain.clone(),
                };
                let rec = advisor::recommend(&constraints, &catalog);
                let mut text = format!(
                    "topology: {}\npatterns ({}):\n",
                    rec.primary_topology.name(),
                    rec.pattern_ids.len()
                );
                for p in &rec.pattern_ids {
                    text.push_str(&format!("  - {p}\n"));
                }
                text.push_str(&format!(
                    "governance: {} (focus: {})\ncritic bias: {:+.1}\n",
                    rec.governance.join(", "),
                    rec.governance_focus,
                    rec.critic_bias
                ));
                for w in &rec.warnings {
                    text.push_str(&format!("warning: {w}\n"));
                }
                emit(cli.json, serde_json::to_value(&rec).unwrap(), text.trim_end().to_string());
            }
        },
        Command::Report { trace } => {
            let trace = Trace::from_jsonl(&std::fs::read_to_string(trace)?).map_err(domain)?;
            let report = harness_report(&trace).map_err(domain)?;
            let mut text = format!(
                "steps run: {}  iterations: {}  errors: {}\ntokens: {}  cost: {}\n",
                report.step_runs,
                report.iterations,
                report.errors,
                report.total_tokens,
                format_microdollars(report.total_microdollars)
            );
            let per_step: &BTreeMap<_, _> = &report.per_step;
            for (step, usage) in per_step {
                text.push_str(&format!(
                    "  {step}: {} in / {} out / {}\n",
                    usage.tokens_in,
                    usage.tokens_out,
                    format_microdollars(usage.microdollars)
                ));
            }
            emit(cli.json, serde_json::to_value(&report).unwrap(), text.trim_end().to_string());
        }
    }
    Ok(())
}

fn demo_rules() -> RuleSet {
    serde_json::from_value(json!({
        "deny": [
            {"id": "no-irreversible-high",
             "all": [{"field": "reversibility", "op": "eq", "value": "irreversible"},
                     {"field": "impact", "op": "eq", "value": "high"}]}
        ],
        "allow": [
            {"id": "reversible-low",
             "all": [{"field": "reversibility", "op": "eq", "value": "reversible"},
                     {"field": "impact", "op": "eq", "value": "low"}]}
        ]
    }))
    .unwrap()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
