use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use resbuild_core::description::BuildDescription;
use resbuild_core::executor::{
    parse_trace_export, run_interleaved, run_parallel, run_seeded, run_sequential, BuildTrace, InterleavingChoice,
    TraceRecord,
};
use resbuild_core::granularity::{suggest_partitions, Proposal, UsageStats};
use resbuild_core::graph::{check_validity, list_schedule, priority_schedule};
use resbuild_core::inference::{
    infer_until_valid, prune_inferred, record_build, run_incremental, InferredEdgeSet, ResourceDigestDb,
};
use resbuild_core::oracle::{theorem_check, Limits, OracleOptions, TheoremResult};
use resbuild_core::txn::{run_locking, run_mvto, DispatchPolicy, TxnOptions, TxnOutcome};
use resbuild_core::{Configuration, SharedState, TaskId, TaskTrace, ValidityReport};
use serde_json::{json, Value};

use crate::{Input, Mode};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn emit(report: &Value) {
    println!("{}", serde_json::to_string_pretty(report).expect("report serializes"));
}

fn description(path: &Path) -> Result<BuildDescription> {
    BuildDescription::parse(&read(path)?).with_context(|| format!("in {}", path.display()))
}

/// The sidecar at `path`; a missing file counts as empty only when `optional`.
fn sidecar(path: Option<&Path>, optional: bool) -> Result<InferredEdgeSet> {
    match path {
        Some(p) if optional && !p.exists() => Ok(InferredEdgeSet::default()),
        Some(p) => InferredEdgeSet::from_json(&read(p)?).with_context(|| format!("in {}", p.display())),
        None => Ok(InferredEdgeSet::default()),
    }
}

fn configure(desc: &Path, state: SharedState, edges: &InferredEdgeSet) -> Result<Configuration> {
    let config = description(desc)?.configuration(state).with_context(|| format!("in {}", desc.display()))?;
    let graph = config.graph.with_edges(edges.graph_edges()).context("inferred edges do not fit the description")?;
    Ok(config.with_graph(graph))
}

fn load(input: &Input, edges_optional: bool) -> Result<(Configuration, InferredEdgeSet)> {
    let state =
        SharedState::from_json(&read(&input.state)?).with_context(|| format!("in {}", input.state.display()))?;
    let edges = sidecar(input.edges.as_deref(), edges_optional)?;
    Ok((configure(&input.desc, state, &edges)?, edges))
}

fn summarize(what: &str, report: &ValidityReport) {
    if report.is_valid() {
        eprintln!("{what}: valid");
    } else {
        eprintln!("{what}: invalid, {} unordered conflicting pair(s)", report.violations.len());
        for ((a, b), conflicts) in &report.violations {
            let names: Vec<String> = conflicts.iter().map(ToString::to_string).collect();
            eprintln!("  {a} / {b}: {}", names.join(", "));
        }
    }
}

/// Committed accesses in serial order, numbered like a build trace.
fn export_committed(config: &Configuration, traces: &BTreeMap<TaskId, TaskTrace>) -> String {
    config
        .graph
        .tasks()
        .iter()
        .flat_map(|t| &traces[t].events)
        .enumerate()
        .map(|(seq, e)| TraceRecord::from_event(seq, e).to_string() + "\n")
        .collect()
}

fn txn_report(outcome: &TxnOutcome) -> Value {
    json!({
        "aborts": outcome.aborts(),
        "abort_log": outcome.export_abort_log().lines().collect::<Vec<_>>(),
        "blocks": outcome.blocks,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn build(
    input: &Input,
    mode: Mode,
    workers: usize,
    seed: Option<u64>,
    out: Option<&Path>,
    trace_path: Option<&Path>,
    db: Option<&Path>,
    predict: Option<&Path>,
) -> Result<bool> {
    let (config, _) = load(input, false)?;
    let mut extra = json!({});
    let (final_state, report, trace_text) = match mode {
        Mode::Serial | Mode::Parallel => {
            let trace: BuildTrace = match (mode, seed) {
                (Mode::Serial, _) => run_sequential(&config)?,
                (_, Some(seed)) => run_seeded(&config, seed)?,
                (_, None) => run_parallel(&config, workers)?.0,
            };
            let report = check_validity(&config.graph, &trace.per_task)?;
            let text = trace.export();
            (trace.final_state, report, text)
        }
        Mode::Locking | Mode::Mvto => {
            let options = TxnOptions {
                policy: seed.map_or(DispatchPolicy::SerialOrder, DispatchPolicy::Seeded),
                workers: Some(workers),
            };
            let outcome = if mode == Mode::Mvto {
                run_mvto(&config, &options)?
            } else {
                let predicted = match predict {
                    Some(p) => ResourceDigestDb::from_json(&read(p)?)
                        .with_context(|| format!("in {}", p.display()))?
                        .accesses
                        .into_iter()
                        .map(|(t, fp)| (t, fp.reads.into_iter().chain(fp.writes).collect()))
                        .collect(),
                    None => BTreeMap::new(),
                };
                run_locking(&config, &predicted, &options)?
            };
            let report = check_validity(&config.graph, &outcome.traces)?;
            let text = export_committed(&config, &outcome.traces);
            extra = txn_report(&outcome);
            (outcome.final_state, report, text)
        }
    };
    if let Some(p) = out {
        write(p, &final_state.to_json())?;
    }
    if let Some(p) = trace_path {
        write(p, &trace_text)?;
    }
    if let Some(p) = db {
        write(p, &record_build(&config, &final_state)?.to_json())?;
    }
    let mut body = report.to_json();
    body["mode"] = json!(format!("{mode:?}").to_lowercase());
    body["final_state"] = json!(final_state.digest().to_hex());
    if let Value::Object(fields) = extra {
        body.as_object_mut().expect("object").extend(fields);
    }
    emit(&body);
    summarize(&format!("{} build of {} task(s)", body["mode"].as_str().unwrap_or(""), config.graph.len()), &report);
    Ok(report.is_valid())
}

pub fn incremental(input: &Input, db_path: &Path, out: Option<&Path>) -> Result<bool> {
    let (config, _) = load(input, false)?;
    let db = ResourceDigestDb::from_json(&read(db_path)?).with_context(|| format!("in {}", db_path.display()))?;
    let outcome = run_incremental(&config, &db)?;
    let final_state = &outcome.trace.final_state;
    if let Some(p) = out {
        write(p, &final_state.to_json())?;
    }
    write(db_path, &record_build(&config, final_state)?.to_json())?;
    let mut body = outcome.report.to_json();
    body["changed_resources"] = json!(outcome.changes.resources);
    body["changed_scripts"] = json!(outcome.changes.scripts);
    body["frontier"] = json!(outcome.frontier);
    body["executed"] = json!(outcome.executed);
    body["skipped"] = json!(outcome.skipped);
    body["expansions"] = json!(outcome.expansions);
    body["final_state"] = json!(final_state.digest().to_hex());
    emit(&body);
    eprintln!(
        "incremental build: executed {} of {} task(s), skipped {}",
        outcome.executed.len(),
        config.graph.len(),
        outcome.skipped.len()
    );
    summarize("combined build", &outcome.report);
    Ok(outcome.report.is_valid())
}

pub fn infer(input: &Input) -> Result<bool> {
    let (config, previous) = load(input, true)?;
    let inference = infer_until_valid(&config)?;
    let set = inference.sidecar(&previous);
    if let Some(p) = &input.edges {
        write(p, &set.to_json())?;
    }
    emit(&json!({ "added": inference.added, "iterations": inference.iterations, "inferred_edges": set.edges.len() }));
    if inference.added.is_empty() {
        eprintln!("no changes");
    }
    for e in &inference.added {
        eprintln!("added {} -> {}", e.from, e.to);
    }
    Ok(true)
}

pub fn prune(input: &Input) -> Result<bool> {
    let (config, _) = load(input, false)?;
    let pruning = prune_inferred(&config)?;
    let set = InferredEdgeSet::new(pruning.inference.added.clone());
    if let Some(p) = &input.edges {
        write(p, &set.to_json())?;
    }
    let removed: Vec<Value> = pruning.removed.iter().map(|e| json!({ "from": e.from, "to": e.to })).collect();
    emit(&json!({ "removed": removed, "inferred_edges": set.edges.len() }));
    if pruning.removed.is_empty() {
        eprintln!("no changes");
    }
    for e in &pruning.removed {
        eprintln!("removed {} -> {}", e.from, e.to);
    }
    Ok(true)
}

pub fn parse_limits(text: &str) -> Result<Limits, String> {
    let parts: Vec<&str> = text.split(',').collect();
    let [a, b, c] = parts.as_slice() else {
        return Err("expected three comma-separated numbers: tasks,accesses,interleavings".into());
    };
    let num = |s: &str| s.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
    Ok(Limits { max_tasks: num(a)?, max_events_per_task: num(b)?, max_interleavings: num(c)? })
}

pub fn verify(input: &Input, limits: Limits, dump: Option<&Path>) -> Result<bool> {
    let (config, _) = load(input, false)?;
    let options = OracleOptions { limits, ..OracleOptions::new() };
    match theorem_check(&config, &options)? {
        TheoremResult::Pass(r) => {
            let verdict = r.verdicts.first().copied();
            emit(&json!({
                "result": "pass",
                "verdict": verdict,
                "builds": r.build_count,
                "final_states": r.final_states.len(),
                "explored": r.explored,
            }));
            eprintln!(
                "pass: {} build(s), all {}",
                r.build_count,
                verdict.map_or("-".into(), |v| format!("{v:?}").to_lowercase())
            );
            Ok(true)
        }
        TheoremResult::Counterexample(cx) => {
            if let Some(dir) = dump {
                fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
                write(&dir.join("first.json"), &cx.first.to_json())?;
                write(&dir.join("second.json"), &cx.second.to_json())?;
            }
            emit(&json!({ "result": "counterexample", "reason": cx.reason, "first": cx.first, "second": cx.second }));
            eprintln!("counterexample: {}", cx.reason);
            Ok(false)
        }
    }
}

/// An interleaving file, or a trace export whose task column is one.
fn choice(path: &Path) -> Result<InterleavingChoice> {
    let text = read(path)?;
    if let Ok(c) = serde_json::from_str::<InterleavingChoice>(&text) {
        return Ok(c);
    }
    match parse_trace_export(&text) {
        Some(records) => Ok(InterleavingChoice(records.into_iter().map(|r| r.task).collect())),
        None => bail!("{} is neither an interleaving nor a trace export", path.display()),
    }
}

pub fn replay(input: &Input, choice_path: &Path, out: Option<&Path>, trace_path: Option<&Path>) -> Result<bool> {
    let (config, _) = load(input, false)?;
    let trace = run_interleaved(&config, &choice(choice_path)?)?;
    let report = check_validity(&config.graph, &trace.per_task)?;
    if let Some(p) = out {
        write(p, &trace.final_state.to_json())?;
    }
    if let Some(p) = trace_path {
        write(p, &trace.export())?;
    }
    let mut body = report.to_json();
    body["final_state"] = json!(trace.final_state.digest().to_hex());
    emit(&body);
    summarize(&format!("replay of {} access(es)", trace.events.len()), &report);
    Ok(report.is_valid())
}

pub fn schedule(
    desc: &Path,
    edges: Option<&Path>,
    workers: usize,
    durations: Option<&Path>,
    critical_path: bool,
) -> Result<bool> {
    let config = configure(desc, SharedState::new(), &sidecar(edges, false)?)?;
    let durations: BTreeMap<TaskId, u64> = match durations {
        Some(p) => serde_json::from_str(&read(p)?).with_context(|| format!("in {}", p.display()))?,
        None => BTreeMap::new(),
    };
    let schedule = if critical_path {
        priority_schedule(&config.graph, workers, &durations)?
    } else {
        list_schedule(&config.graph, workers, &durations)?
    };
    print!("{}", schedule.to_json());
    eprintln!("makespan {} on {workers} worker(s)", schedule.makespan());
    Ok(true)
}

pub fn suggest(input: &Input, hot: usize, out: Option<&Path>) -> Result<bool> {
    let (config, _) = load(input, false)?;
    let trace = run_sequential(&config)?;
    let proposal = suggest_partitions(&config, &UsageStats::from_traces(&trace.per_task), hot);
    match out {
        Some(p) => write(p, &proposal.to_json())?,
        None => print!("{}", proposal.to_json()),
    }
    let groups: std::collections::BTreeSet<&String> = proposal.partitions.values().collect();
    eprintln!(
        "{} contraction(s); {} task(s) in {} group(s)",
        proposal.contractions.len(),
        proposal.partitions.len(),
        groups.len()
    );
    Ok(true)
}

pub fn apply(desc: &Path, edges: Option<&Path>, proposal: &Path, out: Option<&Path>) -> Result<bool> {
    let config = configure(desc, SharedState::new(), &sidecar(edges, false)?)?;
    let proposal = Proposal::from_json(&read(proposal)?).with_context(|| format!("in {}", proposal.display()))?;
    let applied = proposal.apply(&config)?;
    let text = BuildDescription::from_configuration(&applied).to_json();
    match out {
        Some(p) => write(p, &text)?,
        None => print!("{text}"),
    }
    eprintln!("{} task(s) -> {} task(s)", config.graph.len(), applied.graph.len());
    Ok(true)
}
