//! Offline dependency inference, change detection and the incremental build
//! pipeline.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{run_sequential, run_tasks, BuildTrace, ExecError, SpaceView};
use crate::graph::{check_validity, incremental_frontier, Configuration, Edge, EdgeTag, GraphError, ValidityReport};
use crate::resource::{ConflictSet, Digest, Footprint, ResourceId, SharedState, Target};
use crate::script::{run_task_budgeted, TaskId, TaskScript};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InferenceError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("incremental mode unavailable: task `{task}` changes {resources:?} when re-run on its own output")]
    IncrementalIneligible { task: TaskId, resources: BTreeSet<ResourceId> },
    #[error("malformed file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InferredEdge {
    pub from: TaskId,
    pub to: TaskId,
    /// Inference round that observed the conflict.
    pub build: usize,
    pub conflicts: ConflictSet,
}

impl InferredEdge {
    pub fn edge(&self) -> Edge {
        Edge { from: self.from.clone(), to: self.to.clone(), tag: EdgeTag::Inferred }
    }
}

/// Sidecar file of inferred edges, kept apart from the build description.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferredEdgeSet {
    pub edges: Vec<InferredEdge>,
}

impl InferredEdgeSet {
    pub fn new(mut edges: Vec<InferredEdge>) -> Self {
        edges.sort();
        edges.dedup_by(|a, b| a.from == b.from && a.to == b.to);
        InferredEdgeSet { edges }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("edges serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, InferenceError> {
        let set: InferredEdgeSet = serde_json::from_str(text).map_err(|e| InferenceError::Format(e.to_string()))?;
        Ok(InferredEdgeSet::new(set.edges))
    }

    pub fn graph_edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges.iter().map(InferredEdge::edge)
    }
}

/// One edge per violating pair, from whichever task comes first in serial
/// order, so the result can never close a cycle.
pub fn infer_edges(report: &ValidityReport, serial: &[TaskId], build: usize) -> Vec<InferredEdge> {
    let pos = |t: &TaskId| serial.iter().position(|x| x == t);
    report
        .violations
        .iter()
        .map(|((a, b), conflicts)| {
            let (from, to) = if pos(a) <= pos(b) { (a, b) } else { (b, a) };
            InferredEdge { from: from.clone(), to: to.clone(), build, conflicts: conflicts.clone() }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub config: Configuration,
    /// Edges added, in the order they were inferred.
    pub added: Vec<InferredEdge>,
    /// Rounds that added edges.
    pub iterations: usize,
    /// The final (valid) build.
    pub trace: BuildTrace,
}

impl Inference {
    /// Every inferred edge of the resulting graph, for the sidecar file.
    pub fn sidecar(&self, previous: &InferredEdgeSet) -> InferredEdgeSet {
        let mut edges = self.added.clone();
        edges.extend(previous.edges.iter().filter(|e| self.config.graph.has_edge(&e.from, &e.to)).cloned());
        InferredEdgeSet::new(edges)
    }
}

/// Builds, checks, and adds edges for every violation until the build is valid.
pub fn infer_until_valid(config: &Configuration) -> Result<Inference, InferenceError> {
    let mut config = config.clone();
    let mut added = Vec::new();
    let mut iterations = 0;
    loop {
        let trace = run_sequential(&config)?;
        let report = check_validity(&config.graph, &trace.per_task)?;
        if report.is_valid() {
            return Ok(Inference { config, added, iterations, trace });
        }
        iterations += 1;
        let delta = infer_edges(&report, config.graph.tasks(), iterations);
        let graph = config.graph.with_edges(delta.iter().map(InferredEdge::edge))?;
        config = config.with_graph(graph);
        added.extend(delta);
    }
}

#[derive(Debug, Clone)]
pub struct Pruning {
    pub config: Configuration,
    pub removed: Vec<Edge>,
    pub inference: Inference,
}

/// Drops every inferred edge and infers again from scratch. Declared edges are
/// untouched.
pub fn prune_inferred(config: &Configuration) -> Result<Pruning, InferenceError> {
    let bare = config.with_graph(config.graph.without_inferred());
    let inference = infer_until_valid(&bare)?;
    let removed = config
        .graph
        .edges()
        .filter(|e| e.tag == EdgeTag::Inferred && !inference.config.graph.has_edge(&e.from, &e.to))
        .collect();
    Ok(Pruning { config: inference.config.clone(), removed, inference })
}

pub fn script_digest(script: &TaskScript) -> Digest {
    Digest::of(&serde_json::to_vec(script).expect("scripts serialize"))
}

/// Content digests of a build's final state and scripts, plus the accesses each
/// task makes when re-run on that state.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceDigestDb {
    pub resources: BTreeMap<ResourceId, Digest>,
    pub scripts: BTreeMap<TaskId, Digest>,
    #[serde(default)]
    pub accesses: BTreeMap<TaskId, Footprint>,
    /// Tasks whose re-run on the final state changes it, with what they change.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ineligible: BTreeMap<TaskId, BTreeSet<ResourceId>>,
}

impl ResourceDigestDb {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("db serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, InferenceError> {
        serde_json::from_str(text).map_err(|e| InferenceError::Format(e.to_string()))
    }
}

/// Digests of every present resource and every script. Absent resources are
/// left out.
pub fn snapshot(state: &SharedState, scripts: &BTreeMap<TaskId, TaskScript>) -> ResourceDigestDb {
    ResourceDigestDb {
        resources: state.iter().map(|(r, v)| (r.clone(), v.digest())).collect(),
        scripts: scripts.iter().map(|(t, s)| (t.clone(), script_digest(s))).collect(),
        accesses: BTreeMap::new(),
        ineligible: BTreeMap::new(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Changes {
    /// The developer's write set.
    pub resources: BTreeSet<ResourceId>,
    /// Tasks added, removed or edited since the snapshot.
    pub scripts: BTreeSet<TaskId>,
}

impl Changes {
    pub fn is_empty(&self) -> bool {
        self.resources.is_empty() && self.scripts.is_empty()
    }
}

pub fn diff(db: &ResourceDigestDb, state: &SharedState, scripts: &BTreeMap<TaskId, TaskScript>) -> Changes {
    let now = snapshot(state, scripts);
    fn changed<K: Ord + Clone>(a: &BTreeMap<K, Digest>, b: &BTreeMap<K, Digest>) -> BTreeSet<K> {
        a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
    }
    Changes { resources: changed(&db.resources, &now.resources), scripts: changed(&db.scripts, &now.scripts) }
}

/// Accesses of each task, and what the tasks that changed the state changed.
pub type Replay = (BTreeMap<TaskId, Footprint>, BTreeMap<TaskId, BTreeSet<ResourceId>>);

/// Re-runs each task alone on `state`. Returns the accesses of each such run,
/// and the tasks whose run changed the state.
pub fn replay_on(config: &Configuration, state: &SharedState) -> Result<Replay, InferenceError> {
    let mut footprints = BTreeMap::new();
    let mut effects = BTreeMap::new();
    for task in config.graph.tasks() {
        let mut after = state.clone();
        let trace =
            run_task_budgeted(task, config.script(task), &mut SpaceView::new(&mut after, &config.space), config.budget)
                .map_err(|source| ExecError::Script { task: task.clone(), source })?;
        let changed = state.changed_resources(&after);
        if !changed.is_empty() {
            effects.insert(task.clone(), changed);
        }
        footprints.insert(task.clone(), trace.footprint());
    }
    Ok((footprints, effects))
}

/// Digest db for a finished build whose final state is `state`.
pub fn record_build(config: &Configuration, state: &SharedState) -> Result<ResourceDigestDb, InferenceError> {
    let (accesses, ineligible) = replay_on(config, state)?;
    Ok(ResourceDigestDb { accesses, ineligible, ..snapshot(state, &config.scripts) })
}

#[derive(Debug, Clone)]
pub struct IncrementalOutcome {
    /// Tasks conflicting with the developer's writes, plus descendants.
    pub frontier: BTreeSet<TaskId>,
    /// Tasks actually run; a superset of `frontier`.
    pub executed: BTreeSet<TaskId>,
    pub skipped: BTreeSet<TaskId>,
    /// Rounds in which a skipped task had to join because an executed task
    /// newly conflicted with it.
    pub expansions: usize,
    pub trace: BuildTrace,
    /// Validity of the combined build: fresh traces of executed tasks, recorded
    /// accesses of skipped ones.
    pub report: ValidityReport,
    pub changes: Changes,
}

/// Re-runs only what the changes since `db` require, starting from
/// `config.initial` (the edited state).
///
/// Starts from the frontier of the developer's writes and changed scripts.
/// Executed tasks may take new branches; any skipped task that conflicts with
/// an earlier executed task's new accesses (or with a changed resource) joins
/// the set, with its descendants, and the round is repeated.
pub fn run_incremental(config: &Configuration, db: &ResourceDigestDb) -> Result<IncrementalOutcome, InferenceError> {
    if let Some((task, resources)) = db.ineligible.iter().next() {
        return Err(InferenceError::IncrementalIneligible { task: task.clone(), resources: resources.clone() });
    }
    let graph = &config.graph;
    let changes = diff(db, &config.initial, &config.scripts);
    let mut baseline = db.accesses.clone();
    for t in &changes.scripts {
        baseline.remove(t);
    }
    let frontier = incremental_frontier(graph, &baseline, &changes.resources);
    let mut executed = frontier.clone();
    let mut expansions = 0;
    let d =
        Footprint { reads: BTreeSet::new(), writes: changes.resources.iter().cloned().map(Target::Resource).collect() };
    loop {
        let trace = run_tasks(config, config.initial.clone(), &executed)?;
        let fresh: BTreeMap<usize, Footprint> = graph
            .tasks()
            .iter()
            .enumerate()
            .filter(|(_, t)| executed.contains(*t))
            .map(|(i, t)| (i, trace.per_task[t].footprint()))
            .collect();
        let joining: Vec<usize> = graph
            .tasks()
            .iter()
            .enumerate()
            .filter(|(_, t)| !executed.contains(*t))
            .filter(|(i, t)| {
                let old = &baseline[*t];
                !d.conflicts(old).is_empty() || fresh.range(..*i).any(|(_, fp)| !fp.conflicts(old).is_empty())
            })
            .map(|(i, _)| i)
            .collect();
        if joining.is_empty() {
            let skipped: BTreeSet<TaskId> = graph.tasks().iter().filter(|t| !executed.contains(*t)).cloned().collect();
            let mut footprints: BTreeMap<TaskId, Footprint> =
                executed.iter().map(|t| (t.clone(), trace.per_task[t].footprint())).collect();
            footprints.extend(skipped.iter().map(|t| (t.clone(), baseline[t].clone())));
            let report = crate::graph::check_footprints(graph, &footprints)?;
            return Ok(IncrementalOutcome { frontier, executed, skipped, expansions, trace, report, changes });
        }
        expansions += 1;
        executed.extend(graph.descendant_closure(joining).into_iter().map(|i| graph.tasks()[i].clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DependencyGraph;
    use crate::resource::{ResourceSpace, ResourceValue};
    use crate::script::{Expr, Instr};

    fn gen_config(edges: &[Edge]) -> Configuration {
        let graph = DependencyGraph::new(vec!["gen".into(), "gcc".into()], edges.iter().cloned()).unwrap();
        let scripts = BTreeMap::from([
            (
                TaskId::new("gen"),
                TaskScript::new(vec![
                    Instr::read("config", "v"),
                    Instr::write("gen.h", Expr::concat([Expr::lit("h:"), Expr::var("v")])),
                ]),
            ),
            (
                TaskId::new("gcc"),
                TaskScript::new(vec![
                    Instr::read("foo.c", "s"),
                    Instr::read("gen.h", "h"),
                    Instr::write("foo", Expr::concat([Expr::var("s"), Expr::var("h")])),
                ]),
            ),
        ]);
        let initial =
            SharedState::from_entries([("config", ResourceValue::bytes("c1")), ("foo.c", ResourceValue::bytes("src"))]);
        Configuration::new(graph, scripts, initial, ResourceSpace::new()).unwrap()
    }

    #[test]
    fn infers_single_gen_edge() {
        let inf = infer_until_valid(&gen_config(&[])).unwrap();
        assert_eq!(inf.iterations, 1);
        assert_eq!(inf.added.len(), 1);
        assert_eq!((inf.added[0].from.as_str(), inf.added[0].to.as_str()), ("gen", "gcc"));
        assert_eq!(inf.added[0].conflicts, BTreeSet::from(["gen.h".parse().unwrap()]));
        let again = infer_until_valid(&inf.config).unwrap();
        assert!(again.added.is_empty());
    }

    #[test]
    fn mutual_conflicts_get_forward_edges() {
        let mut report = ValidityReport::default();
        for (a, b) in [("a", "b"), ("a", "c"), ("b", "c")] {
            report.violations.insert((a.into(), b.into()), BTreeSet::from(["x".parse().unwrap()]));
        }
        let serial: Vec<TaskId> = vec!["a".into(), "b".into(), "c".into()];
        let edges: Vec<(String, String)> =
            infer_edges(&report, &serial, 1).iter().map(|e| (e.from.to_string(), e.to.to_string())).collect();
        assert_eq!(edges, [("a", "b"), ("a", "c"), ("b", "c")].map(|(a, b)| (a.to_owned(), b.to_owned())));
        assert!(infer_edges(&ValidityReport::default(), &serial, 1).is_empty());
    }

    #[test]
    fn prune_drops_edges_no_longer_needed() {
        let inf = infer_until_valid(&gen_config(&[])).unwrap();
        let mut edited = inf.config.clone();
        edited.scripts.insert(
            "gcc".into(),
            TaskScript::new(vec![Instr::read("foo.c", "s"), Instr::write("foo", Expr::var("s"))]),
        );
        let pruned = prune_inferred(&edited).unwrap();
        assert!(!pruned.config.graph.has_edge(&"gen".into(), &"gcc".into()));
        assert_eq!(pruned.removed.len(), 1);
        let kept = prune_inferred(&inf.config).unwrap();
        assert!(kept.removed.is_empty());
        assert_eq!(kept.config.graph, inf.config.graph);
    }

    #[test]
    fn diff_reports_edits_and_deletions() {
        let c = gen_config(&[]);
        let db = snapshot(&c.initial, &c.scripts);
        assert!(diff(&db, &c.initial, &c.scripts).is_empty());
        let edited = c.initial.apply([(&"foo.c".parse().unwrap(), &ResourceValue::bytes("src2"))]).unwrap();
        assert_eq!(diff(&db, &edited, &c.scripts).resources, BTreeSet::from(["foo.c".into()]));
        let deleted = c.initial.apply([(&"config".parse().unwrap(), &ResourceValue::Absent)]).unwrap();
        assert_eq!(diff(&db, &deleted, &c.scripts).resources, BTreeSet::from(["config".into()]));
        let empty = snapshot(&SharedState::new(), &c.scripts);
        assert!(empty.resources.is_empty());
        assert_eq!(empty.scripts.len(), 2);
        assert_eq!(ResourceDigestDb::from_json(&db.to_json()).unwrap(), db);
    }

    #[test]
    fn incremental_gen_scenarios() {
        let c = infer_until_valid(&gen_config(&[])).unwrap().config;
        let built = run_sequential(&c).unwrap().final_state;
        let db = record_build(&c, &built).unwrap();
        assert!(db.ineligible.is_empty());
        let edit = |pairs: &[(&str, &str)]| {
            let mut s = built.clone();
            for (k, v) in pairs {
                s.write(&k.parse().unwrap(), ResourceValue::bytes(*v)).unwrap();
            }
            s
        };
        for (edits, expect) in
            [(vec![("foo.c", "src2")], vec!["gcc"]), (vec![("config", "c2")], vec!["gcc", "gen"]), (vec![], vec![])]
        {
            let out = run_incremental(&c.with_initial(edit(&edits)), &db).unwrap();
            let expect: BTreeSet<TaskId> = expect.into_iter().map(TaskId::new).collect();
            assert_eq!(out.executed, expect);
            assert_eq!(out.expansions, 0);
            assert!(out.report.is_valid());
            let full = run_sequential(&c.with_initial(edit(&edits))).unwrap();
            assert_eq!(out.trace.final_state, full.final_state);
        }
    }

    #[test]
    fn effectful_replay_is_ineligible() {
        // `bump` appends to its own input, so re-running it always changes the state.
        let graph = DependencyGraph::new(vec!["bump".into()], []).unwrap();
        let scripts = BTreeMap::from([(
            TaskId::new("bump"),
            TaskScript::new(vec![
                Instr::read("n", "v"),
                Instr::write("n", Expr::concat([Expr::var("v"), Expr::lit("+")])),
            ]),
        )]);
        let c = Configuration::new(graph, scripts, SharedState::new(), ResourceSpace::new()).unwrap();
        let db = record_build(&c, &run_sequential(&c).unwrap().final_state).unwrap();
        assert!(matches!(run_incremental(&c, &db), Err(InferenceError::IncrementalIneligible { .. })));
    }

    #[test]
    fn newly_written_resource_pulls_in_skipped_reader() {
        // `w` writes `out` only when `flag` is "on"; `r` reads `out` but has no
        // edge from `w`, since on the prior build they did not conflict.
        let graph = DependencyGraph::new(vec!["w".into(), "r".into()], []).unwrap();
        let scripts = BTreeMap::from([
            (
                TaskId::new("w"),
                TaskScript::new(vec![
                    Instr::read("flag", "f"),
                    Instr::branch("f", Expr::lit("on"), vec![Instr::write("out", Expr::lit("x"))], vec![]),
                ]),
            ),
            (TaskId::new("r"), TaskScript::new(vec![Instr::read("out", "o"), Instr::write("copy", Expr::var("o"))])),
        ]);
        let c = Configuration::new(graph, scripts, SharedState::new(), ResourceSpace::new()).unwrap();
        let built = run_sequential(&c).unwrap().final_state;
        let db = record_build(&c, &built).unwrap();
        let edited = built.apply([(&"flag".parse().unwrap(), &ResourceValue::bytes("on"))]).unwrap();
        let out = run_incremental(&c.with_initial(edited.clone()), &db).unwrap();
        assert_eq!(out.frontier, BTreeSet::from(["w".into()]));
        assert_eq!(out.executed, BTreeSet::from(["w".into(), "r".into()]));
        assert_eq!(out.expansions, 1);
        assert!(!out.report.is_valid());
        assert_eq!(out.trace.final_state, run_sequential(&c.with_initial(edited)).unwrap().final_state);
    }
}
