//! Build executors: sequential, multi-threaded parallel, and a single-threaded
//! interleaving executor that replays an exact access order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::sync::{Condvar, Mutex, MutexGuard};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{check_validity, Configuration, GraphError, ValidityReport};
use crate::resource::{
    AccessEvent, AccessKind, ResourceSpace, ResourceValue, SharedState, StateError, StoreFault, Target,
};
use crate::script::{run_task_budgeted, Pending, ScriptError, StateView, TaskId, TaskRun, TaskTrace};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("task `{task}` failed: {source}")]
    Script { task: TaskId, source: ScriptError },
    #[error("interleaving step {step} picks `{task}`, which {reason}")]
    InfeasibleChoice { step: usize, task: TaskId, reason: &'static str },
    #[error("interleaving ends before task `{0}` finished")]
    IncompleteChoice(TaskId),
    #[error("task `{0}` panicked on its worker")]
    TaskPanicked(TaskId),
    #[error("at least one worker is required")]
    NoWorkers,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A state handle that records accesses against the resource space and can
/// optionally misbehave.
pub struct SpaceView<'a> {
    pub state: &'a mut SharedState,
    pub space: &'a ResourceSpace,
    pub fault: StoreFault,
}

impl<'a> SpaceView<'a> {
    pub fn new(state: &'a mut SharedState, space: &'a ResourceSpace) -> Self {
        Self { state, space, fault: StoreFault::None }
    }
}

impl StateView for SpaceView<'_> {
    fn read(&mut self, target: &Target) -> Result<ResourceValue, StateError> {
        Ok(SharedState::read(self.state, target))
    }

    fn write(&mut self, target: &Target, value: ResourceValue) -> Result<(), StateError> {
        self.state.write_with_fault(target, value, self.fault)
    }

    fn track(&self, target: &Target) -> Target {
        self.space.resolve(target)
    }
}

/// Sequence of task picks, one per access, in global order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InterleavingChoice(pub Vec<TaskId>);

impl InterleavingChoice {
    /// All accesses of each task in turn, following `order`.
    pub fn serial(config: &Configuration) -> Result<Self, ExecError> {
        Ok(run_sequential(config)?.choice)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("choice serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildTrace {
    pub events: Vec<AccessEvent>,
    pub per_task: BTreeMap<TaskId, TaskTrace>,
    pub final_state: SharedState,
    /// The realized interleaving; replaying it reproduces this trace.
    pub choice: InterleavingChoice,
}

impl BuildTrace {
    fn empty(tasks: &[TaskId], initial: SharedState) -> Self {
        BuildTrace {
            events: Vec::new(),
            per_task: tasks.iter().map(|t| (t.clone(), TaskTrace::new(t.clone()))).collect(),
            final_state: initial,
            choice: InterleavingChoice::default(),
        }
    }

    fn push(&mut self, event: AccessEvent) {
        self.choice.0.push(event.task.clone());
        self.per_task.get_mut(&event.task).expect("task registered").events.push(event.clone());
        self.events.push(event);
    }

    /// Line-oriented export: `seq task kind resource valuehash`.
    pub fn export(&self) -> String {
        self.events.iter().enumerate().map(|(seq, e)| TraceRecord::from_event(seq, e).to_string() + "\n").collect()
    }
}

/// One line of the trace export file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub seq: usize,
    pub task: TaskId,
    pub kind: AccessKind,
    pub resource: Target,
    pub value_hash: String,
}

impl TraceRecord {
    pub fn from_event(seq: usize, e: &AccessEvent) -> Self {
        TraceRecord {
            seq,
            task: e.task.clone(),
            kind: e.kind,
            resource: e.tracked.clone(),
            value_hash: e.value.digest().to_hex(),
        }
    }

    pub fn parse(line: &str) -> Option<Self> {
        let mut parts = line.split(' ');
        let seq = parts.next()?.parse().ok()?;
        let task = TaskId::new(parts.next()?);
        let kind = match parts.next()? {
            "R" => AccessKind::Read,
            "W" => AccessKind::Write,
            _ => return None,
        };
        let resource = parts.next()?.parse().ok()?;
        let value_hash = parts.next()?.to_owned();
        if parts.next().is_some() || value_hash.len() != 64 {
            return None;
        }
        Some(TraceRecord { seq, task, kind, resource, value_hash })
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {}", self.seq, self.task, self.kind, self.resource, self.value_hash)
    }
}

pub fn parse_trace_export(text: &str) -> Option<Vec<TraceRecord>> {
    text.lines().map(TraceRecord::parse).collect()
}

/// Runs every task once, one after another, in serial order.
pub fn run_sequential(config: &Configuration) -> Result<BuildTrace, ExecError> {
    let all: BTreeSet<TaskId> = config.graph.tasks().iter().cloned().collect();
    run_tasks(config, config.initial.clone(), &all)
}

/// Runs only `subset`, in serial order, starting from `state`. Tasks outside
/// the subset perform no accesses and have empty traces.
pub fn run_tasks(
    config: &Configuration,
    state: SharedState,
    subset: &BTreeSet<TaskId>,
) -> Result<BuildTrace, ExecError> {
    let mut trace = BuildTrace::empty(config.graph.tasks(), state);
    for task in config.graph.tasks().iter().filter(|t| subset.contains(*t)) {
        let mut view = SpaceView::new(&mut trace.final_state, &config.space);
        let tt = run_task_budgeted(task, config.script(task), &mut view, config.budget)
            .map_err(|source| ExecError::Script { task: task.clone(), source })?;
        for e in tt.events {
            trace.push(e);
        }
    }
    Ok(trace)
}

/// Steps tasks one access at a time in whatever order the caller picks.
///
/// Every task is kept positioned at its next access (or finished), so a task
/// with no remaining accesses is finished as soon as its last access is made.
#[derive(Debug, Clone)]
pub struct Interleaver<'c> {
    config: &'c Configuration,
    runs: Vec<TaskRun<'c>>,
    pending: Vec<Pending>,
    fault: StoreFault,
    trace: BuildTrace,
}

impl<'c> Interleaver<'c> {
    pub fn new(config: &'c Configuration, fault: StoreFault) -> Result<Self, ExecError> {
        let mut runs = Vec::new();
        let mut pending = Vec::new();
        for task in config.graph.tasks() {
            let mut run = TaskRun::new(config.script(task), config.budget);
            let p = run.poll().map_err(|source| ExecError::Script { task: task.clone(), source })?;
            runs.push(run);
            pending.push(p);
        }
        Ok(Interleaver {
            config,
            runs,
            pending,
            fault,
            trace: BuildTrace::empty(config.graph.tasks(), config.initial.clone()),
        })
    }

    pub fn is_done(&self, i: usize) -> bool {
        self.pending[i] == Pending::Done
    }

    pub fn is_complete(&self) -> bool {
        (0..self.runs.len()).all(|i| self.is_done(i))
    }

    /// No accesses left, and every predecessor finished too. A task without
    /// accesses finishes only once its predecessors have.
    pub fn is_finished(&self, i: usize) -> bool {
        let graph = &self.config.graph;
        self.is_done(i) && (0..i).all(|a| !graph.reaches(a, i) || self.is_done(a))
    }

    pub fn is_runnable(&self, i: usize) -> bool {
        !self.is_done(i) && self.config.graph.predecessors(i).iter().all(|&p| self.is_finished(p))
    }

    pub fn runnable(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.runs.len()).filter(|&i| self.is_runnable(i))
    }

    pub fn state(&self) -> &SharedState {
        &self.trace.final_state
    }

    pub fn runs(&self) -> &[TaskRun<'c>] {
        &self.runs
    }

    pub fn trace(&self) -> &BuildTrace {
        &self.trace
    }

    /// Performs the next access of task `i`. The caller must ensure `i` is runnable.
    pub fn step(&mut self, i: usize) -> Result<(), ExecError> {
        let task = self.config.graph.tasks()[i].clone();
        let wrap = |source| ExecError::Script { task: task.clone(), source };
        let mut view = SpaceView { state: &mut self.trace.final_state, space: &self.config.space, fault: self.fault };
        let event = match std::mem::replace(&mut self.pending[i], Pending::Done) {
            Pending::Done => unreachable!("stepping a finished task"),
            Pending::Read(target) => {
                let value = view.read(&target).map_err(|e| wrap(e.into()))?;
                self.runs[i].supply(value.clone()).map_err(wrap)?;
                AccessEvent { task: task.clone(), kind: AccessKind::Read, tracked: view.track(&target), target, value }
            }
            Pending::Write(target, value) => {
                view.write(&target, value.clone()).map_err(|e| wrap(e.into()))?;
                self.runs[i].acknowledge().map_err(wrap)?;
                AccessEvent { task: task.clone(), kind: AccessKind::Write, tracked: view.track(&target), target, value }
            }
        };
        self.trace.push(event);
        self.pending[i] = self.runs[i].poll().map_err(wrap)?;
        Ok(())
    }

    pub fn into_trace(self) -> BuildTrace {
        self.trace
    }
}

/// Replays exactly the given access interleaving.
pub fn run_interleaved(config: &Configuration, choice: &InterleavingChoice) -> Result<BuildTrace, ExecError> {
    run_interleaved_with(config, choice, StoreFault::None)
}

pub fn run_interleaved_with(
    config: &Configuration,
    choice: &InterleavingChoice,
    fault: StoreFault,
) -> Result<BuildTrace, ExecError> {
    let mut il = Interleaver::new(config, fault)?;
    for (step, task) in choice.0.iter().enumerate() {
        let i = config.graph.position(task).ok_or(ExecError::InfeasibleChoice {
            step,
            task: task.clone(),
            reason: "is not part of the configuration",
        })?;
        if il.is_done(i) {
            return Err(ExecError::InfeasibleChoice { step, task: task.clone(), reason: "has no accesses left" });
        }
        if !il.is_runnable(i) {
            return Err(ExecError::InfeasibleChoice {
                step,
                task: task.clone(),
                reason: "has unfinished dependencies",
            });
        }
        il.step(i)?;
    }
    if let Some(i) = (0..config.graph.len()).find(|&i| !il.is_done(i)) {
        return Err(ExecError::IncompleteChoice(config.graph.tasks()[i].clone()));
    }
    Ok(il.into_trace())
}

/// A pseudo-random interleaving drawn from `seed`; the same seed reproduces
/// the same build.
pub fn run_seeded(config: &Configuration, seed: u64) -> Result<BuildTrace, ExecError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut il = Interleaver::new(config, StoreFault::None)?;
    loop {
        let runnable: Vec<usize> = il.runnable().collect();
        let Some(&i) = runnable.choose(&mut rng) else { break };
        il.step(i)?;
    }
    Ok(il.into_trace())
}

struct Port {
    trace: BuildTrace,
    ready: BTreeSet<usize>,
    waiting: Vec<usize>,
    finished: usize,
    failure: Option<ExecError>,
}

fn lock(m: &Mutex<Port>) -> MutexGuard<'_, Port> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Runs the build on `workers` threads. Ready tasks are dispatched in serial
/// order as their dependencies finish; writes are visible to other tasks
/// immediately. All accesses pass through one lock, which fixes the global
/// order recorded in the trace.
///
/// An invalid build still returns its final state; the report says whether
/// that state can be trusted.
pub fn run_parallel(config: &Configuration, workers: usize) -> Result<(BuildTrace, ValidityReport), ExecError> {
    if workers == 0 {
        return Err(ExecError::NoWorkers);
    }
    let graph = &config.graph;
    let n = graph.len();
    let waiting: Vec<usize> = (0..n).map(|i| graph.predecessors(i).len()).collect();
    let port = Mutex::new(Port {
        trace: BuildTrace::empty(graph.tasks(), config.initial.clone()),
        ready: (0..n).filter(|&i| waiting[i] == 0).collect(),
        waiting,
        finished: 0,
        failure: None,
    });
    let wake = Condvar::new();

    let worker = || loop {
        let i = {
            let mut p = lock(&port);
            loop {
                if p.failure.is_some() || p.finished == n {
                    return;
                }
                if let Some(i) = p.ready.pop_first() {
                    break i;
                }
                p = wake.wait(p).unwrap_or_else(|e| e.into_inner());
            }
        };
        let task = &graph.tasks()[i];
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| run_on_port(config, task, &port)));
        let mut p = lock(&port);
        match outcome {
            Ok(Ok(())) => {
                p.finished += 1;
                for &s in graph.successors(i) {
                    p.waiting[s] -= 1;
                    if p.waiting[s] == 0 {
                        p.ready.insert(s);
                    }
                }
            }
            Ok(Err(e)) => {
                p.failure.get_or_insert(e);
            }
            Err(_) => {
                p.failure.get_or_insert(ExecError::TaskPanicked(task.clone()));
            }
        }
        wake.notify_all();
    };

    std::thread::scope(|s| {
        for _ in 0..workers.min(n.max(1)) {
            s.spawn(worker);
        }
    });

    let port = port.into_inner().unwrap_or_else(|e| e.into_inner());
    if let Some(e) = port.failure {
        return Err(e);
    }
    let report = check_validity(graph, &port.trace.per_task)?;
    Ok((port.trace, report))
}

fn run_on_port(config: &Configuration, task: &TaskId, port: &Mutex<Port>) -> Result<(), ExecError> {
    let wrap = |source| ExecError::Script { task: task.clone(), source };
    let mut run = TaskRun::new(config.script(task), config.budget);
    loop {
        let pending = run.poll().map_err(wrap)?;
        if pending == Pending::Done {
            return Ok(());
        }
        {
            let mut p = lock(port);
            let mut view = SpaceView::new(&mut p.trace.final_state, &config.space);
            let event = match pending {
                Pending::Read(target) => {
                    let value = view.read(&target).map_err(|e| wrap(e.into()))?;
                    run.supply(value.clone()).map_err(wrap)?;
                    AccessEvent {
                        task: task.clone(),
                        kind: AccessKind::Read,
                        tracked: view.track(&target),
                        target,
                        value,
                    }
                }
                Pending::Write(target, value) => {
                    view.write(&target, value.clone()).map_err(|e| wrap(e.into()))?;
                    run.acknowledge().map_err(wrap)?;
                    AccessEvent {
                        task: task.clone(),
                        kind: AccessKind::Write,
                        tracked: view.track(&target),
                        target,
                        value,
                    }
                }
                Pending::Done => unreachable!(),
            };
            p.trace.push(event);
        }
        std::thread::yield_now();
    }
}
