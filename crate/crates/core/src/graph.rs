//! Dependency graphs, build validity and scheduling.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resource::{ConflictSet, Footprint, ResourceId, ResourceSpace, SharedState, Target};
use crate::script::{TaskId, TaskScript, TaskTrace, DEFAULT_INSTRUCTION_BUDGET};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("task `{0}` is listed more than once")]
    DuplicateTask(TaskId),
    #[error("edge refers to unknown task `{0}`")]
    UnknownTask(TaskId),
    #[error("dependency cycle through `{0}`")]
    CycleDetected(TaskId),
    #[error("serial order lists `{to}` before its dependency `{from}`")]
    OrderViolation { from: TaskId, to: TaskId },
    #[error("no trace for task `{0}`")]
    MissingTrace(TaskId),
    #[error("task `{0}` has no script")]
    MissingScript(TaskId),
    #[error("task `{task}` lists undeclared collection `{prefix}*`")]
    UnknownCollection { task: TaskId, prefix: String },
    #[error("at least one worker is required")]
    NoWorkers,
    #[error("task `{0}` has a zero duration")]
    ZeroDuration(TaskId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeTag {
    Declared,
    Inferred,
}

/// `to` depends on `from`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: TaskId,
    pub to: TaskId,
    pub tag: EdgeTag,
}

impl Edge {
    pub fn declared(from: &str, to: &str) -> Self {
        Edge { from: from.into(), to: to.into(), tag: EdgeTag::Declared }
    }
}

#[derive(Clone, PartialEq, Eq, Default)]
struct Bits(Vec<u64>);

impl Bits {
    fn new(n: usize) -> Self {
        Bits(vec![0; n.div_ceil(64)])
    }
    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }
    fn get(&self, i: usize) -> bool {
        self.0[i / 64] & (1 << (i % 64)) != 0
    }
    fn union(&mut self, other: &Bits) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a |= *b;
        }
    }
}

/// DAG over tasks. The task list is the declared serial order and must be a
/// topological sort of the edges.
#[derive(Clone)]
pub struct DependencyGraph {
    tasks: Vec<TaskId>,
    index: HashMap<TaskId, usize>,
    edges: BTreeMap<(usize, usize), EdgeTag>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
    // reach[i] has bit j set iff there is a non-empty path i -> j
    reach: Vec<Bits>,
}

impl fmt::Debug for DependencyGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DependencyGraph")
            .field("tasks", &self.tasks)
            .field("edges", &self.edges().collect::<Vec<_>>())
            .finish()
    }
}

impl PartialEq for DependencyGraph {
    fn eq(&self, other: &Self) -> bool {
        self.tasks == other.tasks && self.edges().eq(other.edges())
    }
}

impl Eq for DependencyGraph {}

impl DependencyGraph {
    pub fn new(tasks: Vec<TaskId>, edges: impl IntoIterator<Item = Edge>) -> Result<Self, GraphError> {
        let mut index = HashMap::new();
        for (i, t) in tasks.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(GraphError::DuplicateTask(t.clone()));
            }
        }
        let mut edge_map = BTreeMap::new();
        for e in edges {
            let from = *index.get(&e.from).ok_or_else(|| GraphError::UnknownTask(e.from.clone()))?;
            let to = *index.get(&e.to).ok_or_else(|| GraphError::UnknownTask(e.to.clone()))?;
            if from == to {
                return Err(GraphError::CycleDetected(e.from));
            }
            // A declared tag wins over an inferred duplicate.
            let tag = edge_map.entry((from, to)).or_insert(e.tag);
            *tag = (*tag).min(e.tag);
        }
        let n = tasks.len();
        let mut preds = vec![Vec::new(); n];
        let mut succs = vec![Vec::new(); n];
        for &(f, t) in edge_map.keys() {
            preds[t].push(f);
            succs[f].push(t);
        }
        let graph = DependencyGraph { tasks, index, edges: edge_map, preds, succs, reach: Vec::new() };
        graph.check_acyclic()?;
        if let Some((&(f, t), _)) = graph.edges.iter().find(|((f, t), _)| f > t) {
            return Err(GraphError::OrderViolation { from: graph.tasks[f].clone(), to: graph.tasks[t].clone() });
        }
        Ok(graph.with_reachability())
    }

    fn check_acyclic(&self) -> Result<(), GraphError> {
        let n = self.tasks.len();
        let mut indegree: Vec<usize> = self.preds.iter().map(Vec::len).collect();
        let mut queue: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = queue.pop() {
            seen += 1;
            for &s in &self.succs[i] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    queue.push(s);
                }
            }
        }
        match (0..n).find(|&i| indegree[i] > 0) {
            Some(i) if seen < n => Err(GraphError::CycleDetected(self.tasks[i].clone())),
            _ => Ok(()),
        }
    }

    fn with_reachability(mut self) -> Self {
        let n = self.tasks.len();
        let mut reach = vec![Bits::new(n); n];
        // Serial order is topological, so successors have larger indices.
        for i in (0..n).rev() {
            let mut bits = Bits::new(n);
            for &s in &self.succs[i] {
                bits.set(s);
                bits.union(&reach[s]);
            }
            reach[i] = bits;
        }
        self.reach = reach;
        self
    }

    pub fn tasks(&self) -> &[TaskId] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn position(&self, task: &TaskId) -> Option<usize> {
        self.index.get(task).copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges.iter().map(|(&(f, t), &tag)| Edge { from: self.tasks[f].clone(), to: self.tasks[t].clone(), tag })
    }

    pub fn predecessors(&self, i: usize) -> &[usize] {
        &self.preds[i]
    }

    pub fn successors(&self, i: usize) -> &[usize] {
        &self.succs[i]
    }

    /// True iff there is a non-empty directed path from `from` to `to`.
    pub fn reaches(&self, from: usize, to: usize) -> bool {
        self.reach[from].get(to)
    }

    pub fn ordered(&self, a: usize, b: usize) -> bool {
        self.reaches(a, b) || self.reaches(b, a)
    }

    pub fn has_edge(&self, from: &TaskId, to: &TaskId) -> bool {
        match (self.position(from), self.position(to)) {
            (Some(f), Some(t)) => self.edges.contains_key(&(f, t)),
            _ => false,
        }
    }

    pub fn with_edges(&self, extra: impl IntoIterator<Item = Edge>) -> Result<Self, GraphError> {
        DependencyGraph::new(self.tasks.clone(), self.edges().chain(extra))
    }

    pub fn without_inferred(&self) -> Self {
        DependencyGraph::new(self.tasks.clone(), self.edges().filter(|e| e.tag == EdgeTag::Declared))
            .expect("removing edges keeps the graph valid")
    }

    /// `seeds` plus everything reachable from them.
    pub fn descendant_closure(&self, seeds: impl IntoIterator<Item = usize>) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for s in seeds {
            out.insert(s);
            for j in 0..self.len() {
                if self.reaches(s, j) {
                    out.insert(j);
                }
            }
        }
        out
    }
}

/// A dependency graph together with the task scripts, initial state and
/// resource space it is built over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Configuration {
    pub graph: DependencyGraph,
    pub scripts: BTreeMap<TaskId, TaskScript>,
    pub initial: SharedState,
    pub space: ResourceSpace,
    pub budget: usize,
}

impl Configuration {
    pub fn new(
        graph: DependencyGraph,
        scripts: BTreeMap<TaskId, TaskScript>,
        initial: SharedState,
        space: ResourceSpace,
    ) -> Result<Self, GraphError> {
        for t in graph.tasks() {
            let script = scripts.get(t).ok_or_else(|| GraphError::MissingScript(t.clone()))?;
            if let Some(prefix) = listings(script.instrs()).into_iter().find(|p| !space.declares_collection(p)) {
                return Err(GraphError::UnknownCollection { task: t.clone(), prefix });
            }
        }
        Ok(Configuration { graph, scripts, initial, space, budget: DEFAULT_INSTRUCTION_BUDGET })
    }

    pub fn script(&self, task: &TaskId) -> &TaskScript {
        &self.scripts[task]
    }

    pub fn with_graph(&self, graph: DependencyGraph) -> Self {
        Configuration { graph, ..self.clone() }
    }

    pub fn with_initial(&self, initial: SharedState) -> Self {
        Configuration { initial, ..self.clone() }
    }
}

fn listings(instrs: &[crate::script::Instr]) -> Vec<String> {
    use crate::script::Instr;
    let mut out = Vec::new();
    for i in instrs {
        match i {
            Instr::Read { from: Target::Listing(p), .. } => out.push(p.clone()),
            Instr::Branch { then, otherwise, .. } => {
                out.extend(listings(then));
                out.extend(listings(otherwise));
            }
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Valid,
    Invalid,
}

/// Conflicting task pairs with no directed path between them. Pairs are keyed
/// (earlier, later) by serial position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidityReport {
    pub violations: BTreeMap<(TaskId, TaskId), ConflictSet>,
}

impl ValidityReport {
    pub fn verdict(&self) -> Verdict {
        if self.violations.is_empty() {
            Verdict::Valid
        } else {
            Verdict::Invalid
        }
    }

    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "verdict": self.verdict(),
            "violations": self.violations.iter().map(|((a, b), c)| serde_json::json!({
                "tasks": [a, b],
                "conflicts": c.iter().map(ToString::to_string).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }
}

pub fn check_validity(
    graph: &DependencyGraph,
    traces: &BTreeMap<TaskId, TaskTrace>,
) -> Result<ValidityReport, GraphError> {
    let footprints = traces.iter().map(|(t, tr)| (t.clone(), tr.footprint())).collect();
    check_footprints(graph, &footprints)
}

pub fn check_footprints(
    graph: &DependencyGraph,
    footprints: &BTreeMap<TaskId, Footprint>,
) -> Result<ValidityReport, GraphError> {
    let fps: Vec<&Footprint> = graph
        .tasks()
        .iter()
        .map(|t| footprints.get(t).ok_or_else(|| GraphError::MissingTrace(t.clone())))
        .collect::<Result<_, _>>()?;
    let mut report = ValidityReport::default();
    for i in 0..fps.len() {
        for j in i + 1..fps.len() {
            if graph.ordered(i, j) {
                continue;
            }
            let c = fps[i].conflicts(fps[j]);
            if !c.is_empty() {
                report.violations.insert((graph.tasks()[i].clone(), graph.tasks()[j].clone()), c);
            }
        }
    }
    Ok(report)
}

pub fn serial_schedule(graph: &DependencyGraph) -> Vec<TaskId> {
    graph.tasks().to_vec()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub task: TaskId,
    pub worker: usize,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub workers: usize,
    pub assignments: Vec<Assignment>,
}

impl Schedule {
    pub fn makespan(&self) -> u64 {
        self.assignments.iter().map(|a| a.end).max().unwrap_or(0)
    }

    pub fn get(&self, task: &TaskId) -> Option<&Assignment> {
        self.assignments.iter().find(|a| &a.task == task)
    }

    /// Every task starts no earlier than each of its predecessors ends.
    pub fn respects(&self, graph: &DependencyGraph) -> bool {
        graph.edges().all(|e| match (self.get(&e.from), self.get(&e.to)) {
            (Some(f), Some(t)) => t.start >= f.end,
            _ => false,
        })
    }

    /// No worker runs two tasks at once.
    pub fn is_exclusive(&self) -> bool {
        self.assignments.iter().enumerate().all(|(i, a)| {
            self.assignments[i + 1..].iter().all(|b| a.worker != b.worker || a.end <= b.start || b.end <= a.start)
        })
    }

    /// At every instant either no worker is idle or no task is ready.
    pub fn is_greedy(&self, graph: &DependencyGraph) -> bool {
        let times: BTreeSet<u64> = self.assignments.iter().flat_map(|a| [a.start, a.end]).collect();
        times.into_iter().all(|t| {
            let busy = self.assignments.iter().filter(|a| a.start <= t && t < a.end).count();
            let ready = graph.tasks().iter().enumerate().any(|(i, task)| {
                let Some(a) = self.get(task) else { return false };
                a.start > t
                    && graph.predecessors(i).iter().all(|&p| self.get(&graph.tasks()[p]).is_some_and(|pa| pa.end <= t))
            });
            busy >= self.workers || !ready
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("schedule serializes");
        s.push('\n');
        s
    }
}

fn durations_vec(graph: &DependencyGraph, durations: &BTreeMap<TaskId, u64>) -> Result<Vec<u64>, GraphError> {
    graph
        .tasks()
        .iter()
        .map(|t| match durations.get(t) {
            Some(0) => Err(GraphError::ZeroDuration(t.clone())),
            Some(&d) => Ok(d),
            None => Ok(1),
        })
        .collect()
}

fn simulate<K: Ord + Copy>(
    graph: &DependencyGraph,
    workers: usize,
    dur: &[u64],
    rank: impl Fn(usize) -> K,
) -> Result<Schedule, GraphError> {
    if workers == 0 {
        return Err(GraphError::NoWorkers);
    }
    let n = graph.len();
    let mut waiting: Vec<usize> = (0..n).map(|i| graph.predecessors(i).len()).collect();
    let mut ready: BTreeSet<(K, usize)> = (0..n).filter(|&i| waiting[i] == 0).map(|i| (rank(i), i)).collect();
    let mut free: BTreeSet<usize> = (0..workers).collect();
    let mut running: BinaryHeap<Reverse<(u64, usize, usize)>> = BinaryHeap::new();
    let mut assignments = Vec::with_capacity(n);
    let mut now = 0;
    loop {
        while !free.is_empty() && !ready.is_empty() {
            let (_, task) = ready.pop_first().expect("non-empty");
            let worker = free.pop_first().expect("non-empty");
            let end = now + dur[task];
            assignments.push(Assignment { task: graph.tasks()[task].clone(), worker, start: now, end });
            running.push(Reverse((end, worker, task)));
        }
        let Some(Reverse((end, _, _))) = running.peek().copied() else { break };
        now = end;
        while let Some(Reverse((e, worker, task))) = running.peek().copied() {
            if e != now {
                break;
            }
            running.pop();
            free.insert(worker);
            for &s in graph.successors(task) {
                waiting[s] -= 1;
                if waiting[s] == 0 {
                    ready.insert((rank(s), s));
                }
            }
        }
    }
    Ok(Schedule { workers, assignments })
}

/// Greedy list scheduling; ready tasks are taken in serial order.
pub fn list_schedule(
    graph: &DependencyGraph,
    workers: usize,
    durations: &BTreeMap<TaskId, u64>,
) -> Result<Schedule, GraphError> {
    let dur = durations_vec(graph, durations)?;
    simulate(graph, workers, &dur, |i| i)
}

/// Sum of durations along the longest path starting at each task.
pub fn critical_paths(graph: &DependencyGraph, durations: &BTreeMap<TaskId, u64>) -> Result<Vec<u64>, GraphError> {
    let dur = durations_vec(graph, durations)?;
    let mut cp = vec![0; graph.len()];
    for i in (0..graph.len()).rev() {
        cp[i] = dur[i] + graph.successors(i).iter().map(|&s| cp[s]).max().unwrap_or(0);
    }
    Ok(cp)
}

/// List scheduling that prefers the ready task with the longest critical path,
/// then serial order.
pub fn priority_schedule(
    graph: &DependencyGraph,
    workers: usize,
    durations: &BTreeMap<TaskId, u64>,
) -> Result<Schedule, GraphError> {
    let dur = durations_vec(graph, durations)?;
    let cp = critical_paths(graph, durations)?;
    simulate(graph, workers, &dur, |i| (Reverse(cp[i]), i))
}

/// Tasks that must re-run after the developer writes `changed`: every task
/// whose prior footprint conflicts with those writes, plus all descendants.
/// Tasks with no recorded footprint are treated as conflicting.
pub fn incremental_frontier(
    graph: &DependencyGraph,
    footprints: &BTreeMap<TaskId, Footprint>,
    changed: &BTreeSet<ResourceId>,
) -> BTreeSet<TaskId> {
    let d = Footprint { reads: BTreeSet::new(), writes: changed.iter().cloned().map(Target::Resource).collect() };
    let seeds = graph.tasks().iter().enumerate().filter_map(|(i, t)| match footprints.get(t) {
        Some(fp) if d.conflicts(fp).is_empty() => None,
        _ => Some(i),
    });
    graph.descendant_closure(seeds.collect::<Vec<_>>()).into_iter().map(|i| graph.tasks()[i].clone()).collect()
}
