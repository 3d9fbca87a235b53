//! Transactional executors. Each task runs as a transaction stamped with its
//! serial position; writes are buffered and published at commit. `run_mvto`
//! validates optimistically and rolls back late readers, `run_locking` adds
//! per-resource locks (optionally predicted from a prior build) on top of the
//! same validation.
//!
//! Both are deterministic simulations: a [`DispatchPolicy`] picks which task
//! acts next, which makes adversarial interleavings reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Configuration;
use crate::resource::{AccessEvent, AccessKind, ResourceId, ResourceValue, SharedState, StateError, Target};
use crate::script::{Pending, ScriptError, TaskId, TaskRun, TaskTrace};

/// Serial position of the writing task; `None` is the initial state.
pub type Version = Option<usize>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TxnError {
    #[error("task `{task}` failed: {source}")]
    Script { task: TaskId, source: ScriptError },
    #[error("restart budget of {budget} exhausted")]
    LivelockGuard { budget: usize },
    #[error("no task can make progress")]
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ReadRecord {
    Resource {
        resource: ResourceId,
        version: Version,
    },
    /// Membership of a collection; any later-visible member write invalidates it.
    Listing {
        prefix: String,
    },
}

/// Committed versions per resource plus the read-from log.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VersionedStore {
    versions: BTreeMap<ResourceId, BTreeMap<Version, ResourceValue>>,
    reads: BTreeMap<usize, BTreeSet<ReadRecord>>,
}

impl VersionedStore {
    pub fn new(initial: &SharedState) -> Self {
        let versions = initial.iter().map(|(r, v)| (r.clone(), BTreeMap::from([(None, v.clone())]))).collect();
        VersionedStore { versions, reads: BTreeMap::new() }
    }

    /// Latest committed version strictly older than `reader`.
    pub fn visible(&self, resource: &ResourceId, reader: usize) -> (Version, ResourceValue) {
        self.versions
            .get(resource)
            .and_then(|vs| vs.range(..Some(reader)).next_back())
            .map(|(w, v)| (*w, v.clone()))
            .unwrap_or((None, ResourceValue::Absent))
    }

    pub fn read(&mut self, resource: &ResourceId, reader: usize) -> ResourceValue {
        let (version, value) = self.visible(resource, reader);
        self.reads.entry(reader).or_default().insert(ReadRecord::Resource { resource: resource.clone(), version });
        value
    }

    /// Visible members of a collection, present or not, logged as reads.
    pub fn read_listing(&mut self, prefix: &str, reader: usize) -> BTreeMap<ResourceId, ResourceValue> {
        let members: Vec<ResourceId> = self
            .versions
            .range::<str, _>((std::ops::Bound::Included(prefix), std::ops::Bound::Unbounded))
            .take_while(|(k, _)| k.as_str().starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect();
        let log = self.reads.entry(reader).or_default();
        log.insert(ReadRecord::Listing { prefix: prefix.to_owned() });
        let mut out = BTreeMap::new();
        for m in members {
            let (version, value) = self.visible(&m, reader);
            self.reads.entry(reader).or_default().insert(ReadRecord::Resource { resource: m.clone(), version });
            out.insert(m, value);
        }
        out
    }

    pub fn read_log(&self, reader: usize) -> impl Iterator<Item = &ReadRecord> {
        self.reads.get(&reader).into_iter().flatten()
    }

    /// `(reader, writer)` pairs where the reader observed a committed version of the writer.
    pub fn read_from(&self) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for (&reader, log) in &self.reads {
            for rec in log {
                if let ReadRecord::Resource { version: Some(w), .. } = rec {
                    out.insert((reader, *w));
                }
            }
        }
        out
    }

    /// Readers later than `writer` whose reads a new version of `resource`
    /// at `writer` would have changed.
    fn stale_readers(&self, writer: usize, resource: &ResourceId) -> Vec<usize> {
        self.reads
            .range(writer + 1..)
            .filter(|(_, log)| {
                log.iter().any(|rec| match rec {
                    ReadRecord::Resource { resource: r, .. } => r == resource,
                    ReadRecord::Listing { prefix } => resource.as_str().starts_with(prefix.as_str()),
                })
            })
            .map(|(&t, _)| t)
            .filter(|&t| self.visible(resource, t).0 < Some(writer))
            .collect()
    }

    fn publish(&mut self, writer: usize, writes: &BTreeMap<ResourceId, ResourceValue>) {
        for (r, v) in writes {
            self.versions.entry(r.clone()).or_default().insert(Some(writer), v.clone());
        }
    }

    /// The task plus everyone who, transitively, read one of its versions.
    pub fn influence_closure(&self, task: usize) -> BTreeSet<usize> {
        let edges = self.read_from();
        let mut closure = BTreeSet::from([task]);
        let mut frontier = vec![task];
        while let Some(w) = frontier.pop() {
            for &(r, _) in edges.iter().filter(|(_, x)| *x == w) {
                if closure.insert(r) {
                    frontier.push(r);
                }
            }
        }
        closure
    }

    /// Removes the versions and read logs of the task's influence closure and
    /// returns that closure.
    pub fn rollback(&mut self, task: usize) -> BTreeSet<usize> {
        let closure = self.influence_closure(task);
        for &t in &closure {
            for vs in self.versions.values_mut() {
                vs.remove(&Some(t));
            }
            self.reads.remove(&t);
        }
        self.versions.retain(|_, vs| !vs.is_empty());
        closure
    }

    /// Newest version of every resource.
    pub fn latest(&self) -> SharedState {
        SharedState::from_entries(
            self.versions.iter().filter_map(|(r, vs)| vs.values().next_back().map(|v| (r.clone(), v.clone()))),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AbortReason {
    /// A running transaction read a version that an earlier commit superseded.
    UnrealizableRead,
    /// A committed transaction read a version that an earlier commit superseded.
    StaleRead,
    DeadlockVictim,
    /// Rolled back because it read from an aborted transaction.
    Cascade,
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AbortReason::UnrealizableRead => "UnrealizableRead",
            AbortReason::StaleRead => "StaleRead",
            AbortReason::DeadlockVictim => "DeadlockVictim",
            AbortReason::Cascade => "Cascade",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbortRecord {
    pub task: TaskId,
    pub timestamp: usize,
    pub reason: AbortReason,
    /// Restarts of this task so far, including this one.
    pub restart_count: usize,
    /// Other tasks rolled back with this one.
    pub cascade: BTreeSet<TaskId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxnOutcome {
    pub final_state: SharedState,
    pub abort_log: Vec<AbortRecord>,
    pub restarts: BTreeMap<TaskId, usize>,
    /// Number of times an access had to wait for a lock.
    pub blocks: usize,
    /// Accesses of each task's committed run.
    pub traces: BTreeMap<TaskId, TaskTrace>,
}

impl TxnOutcome {
    pub fn aborts(&self) -> usize {
        self.abort_log.len()
    }

    /// Line records `event task timestamp reason cascadeSet`.
    pub fn export_abort_log(&self) -> String {
        self.abort_log
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let cascade = if a.cascade.is_empty() {
                    "-".to_owned()
                } else {
                    a.cascade.iter().map(TaskId::as_str).collect::<Vec<_>>().join(",")
                };
                format!("{i} {} {} {} {cascade}\n", a.task, a.timestamp, a.reason)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DispatchPolicy {
    /// Lowest timestamp with an available action.
    SerialOrder,
    /// Highest timestamp with an available action.
    Reverse,
    Seeded(u64),
    /// Timestamps to act, in order; entries with no available action are
    /// skipped. Falls back to `SerialOrder` once exhausted.
    Scripted(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxnOptions {
    pub policy: DispatchPolicy,
    /// Maximum concurrently running transactions; `None` is unlimited.
    pub workers: Option<usize>,
}

impl Default for TxnOptions {
    fn default() -> Self {
        TxnOptions { policy: DispatchPolicy::SerialOrder, workers: None }
    }
}

impl TxnOptions {
    pub fn with_policy(policy: DispatchPolicy) -> Self {
        TxnOptions { policy, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TxnAction {
    Start(usize),
    Access(usize),
    Commit(usize),
}

impl TxnAction {
    pub fn task(self) -> usize {
        match self {
            TxnAction::Start(i) | TxnAction::Access(i) | TxnAction::Commit(i) => i,
        }
    }
}

#[derive(Debug, Clone)]
struct Running<'c> {
    run: TaskRun<'c>,
    pending: Pending,
    buffer: BTreeMap<ResourceId, ResourceValue>,
    events: Vec<AccessEvent>,
    locks: BTreeSet<Target>,
}

#[derive(Debug, Clone)]
enum Slot<'c> {
    Waiting,
    Running(Box<Running<'c>>),
    Committed(TaskTrace),
}

/// Step-by-step transactional executor.
#[derive(Debug, Clone)]
pub struct TxnEngine<'c> {
    config: &'c Configuration,
    /// `Some` enables locking with these predicted (tracked) targets.
    predicted: Option<Vec<BTreeSet<Target>>>,
    workers: Option<usize>,
    slots: Vec<Slot<'c>>,
    store: VersionedStore,
    abort_log: Vec<AbortRecord>,
    restarts: Vec<usize>,
    blocked: Vec<bool>,
    blocks: usize,
}

impl<'c> TxnEngine<'c> {
    pub fn mvto(config: &'c Configuration, workers: Option<usize>) -> Self {
        TxnEngine {
            config,
            predicted: None,
            workers,
            slots: vec![Slot::Waiting; config.graph.len()],
            store: VersionedStore::new(&config.initial),
            abort_log: Vec::new(),
            restarts: vec![0; config.graph.len()],
            blocked: vec![false; config.graph.len()],
            blocks: 0,
        }
    }

    pub fn locking(
        config: &'c Configuration,
        predicted: &BTreeMap<TaskId, BTreeSet<Target>>,
        workers: Option<usize>,
    ) -> Self {
        let per_task = config
            .graph
            .tasks()
            .iter()
            .map(|t| predicted.get(t).map(|s| s.iter().map(|x| config.space.resolve(x)).collect()).unwrap_or_default())
            .collect();
        TxnEngine { predicted: Some(per_task), ..Self::mvto(config, workers) }
    }

    pub fn store(&self) -> &VersionedStore {
        &self.store
    }

    pub fn abort_log(&self) -> &[AbortRecord] {
        &self.abort_log
    }

    pub fn is_committed(&self, i: usize) -> bool {
        matches!(self.slots[i], Slot::Committed(_))
    }

    pub fn is_finished(&self) -> bool {
        (0..self.slots.len()).all(|i| self.is_committed(i))
    }

    fn running(&self) -> usize {
        self.slots.iter().filter(|s| matches!(s, Slot::Running(_))).count()
    }

    fn task(&self, i: usize) -> &'c TaskId {
        &self.config.graph.tasks()[i]
    }

    /// Tasks that keep task `i`'s pending access from being granted.
    fn lock_blockers(&self, i: usize) -> Vec<usize> {
        let Some(predicted) = &self.predicted else { return Vec::new() };
        let Slot::Running(r) = &self.slots[i] else { return Vec::new() };
        let target = match &r.pending {
            Pending::Read(t) | Pending::Write(t, _) => self.config.space.resolve(t),
            Pending::Done => return Vec::new(),
        };
        if r.locks.contains(&target) {
            return Vec::new();
        }
        (0..self.slots.len())
            .filter(|&j| j != i)
            .filter(|&j| match &self.slots[j] {
                Slot::Committed(_) => false,
                Slot::Running(o) if o.locks.iter().any(|l| l.overlaps(&target)) => true,
                _ => j < i && predicted[j].iter().any(|l| l.overlaps(&target)),
            })
            .collect()
    }

    /// One action per task that can act now, in timestamp order.
    pub fn available(&self) -> Vec<TxnAction> {
        let can_start = self.workers.is_none_or(|w| self.running() < w);
        (0..self.slots.len())
            .filter_map(|i| match &self.slots[i] {
                Slot::Waiting => (can_start && self.config.graph.predecessors(i).iter().all(|&p| self.is_committed(p)))
                    .then_some(TxnAction::Start(i)),
                Slot::Running(r) if r.pending == Pending::Done => Some(TxnAction::Commit(i)),
                Slot::Running(_) => self.lock_blockers(i).is_empty().then_some(TxnAction::Access(i)),
                Slot::Committed(_) => None,
            })
            .collect()
    }

    fn note_blocking(&mut self) {
        for i in 0..self.slots.len() {
            let now = !self.lock_blockers(i).is_empty();
            if now && !self.blocked[i] {
                self.blocks += 1;
            }
            self.blocked[i] = now;
        }
    }

    /// A waits-for cycle, if any. Waiting tasks wait for their unfinished
    /// predecessors; blocked accesses wait for the lock holders or predictors.
    pub fn deadlock_cycle(&self) -> Option<Vec<usize>> {
        self.predicted.as_ref()?;
        let n = self.slots.len();
        let waits: Vec<Vec<usize>> = (0..n)
            .map(|i| match &self.slots[i] {
                Slot::Waiting => {
                    self.config.graph.predecessors(i).iter().copied().filter(|&p| !self.is_committed(p)).collect()
                }
                Slot::Running(_) => self.lock_blockers(i),
                Slot::Committed(_) => Vec::new(),
            })
            .collect();
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut color = vec![0u8; n];
        let mut stack = Vec::new();
        fn dfs(v: usize, waits: &[Vec<usize>], color: &mut [u8], stack: &mut Vec<usize>) -> Option<Vec<usize>> {
            color[v] = 1;
            stack.push(v);
            for &w in &waits[v] {
                if color[w] == 1 {
                    let from = stack.iter().position(|&x| x == w).expect("on stack");
                    return Some(stack[from..].to_vec());
                }
                if color[w] == 0 {
                    if let Some(c) = dfs(w, waits, color, stack) {
                        return Some(c);
                    }
                }
            }
            stack.pop();
            color[v] = 2;
            None
        }
        (0..n).find_map(|v| if color[v] == 0 { dfs(v, &waits, &mut color, &mut stack) } else { None })
    }

    fn script_err(&self, i: usize) -> impl Fn(ScriptError) -> TxnError + 'c {
        let task = self.task(i).clone();
        move |source| TxnError::Script { task: task.clone(), source }
    }

    pub fn perform(&mut self, action: TxnAction) -> Result<(), TxnError> {
        match action {
            TxnAction::Start(i) => {
                let mut run = TaskRun::new(self.config.script(self.task(i)), self.config.budget);
                let pending = run.poll().map_err(self.script_err(i))?;
                self.slots[i] = Slot::Running(Box::new(Running {
                    run,
                    pending,
                    buffer: BTreeMap::new(),
                    events: Vec::new(),
                    locks: BTreeSet::new(),
                }));
            }
            TxnAction::Access(i) => self.access(i)?,
            TxnAction::Commit(i) => self.commit(i)?,
        }
        self.note_blocking();
        Ok(())
    }

    fn access(&mut self, i: usize) -> Result<(), TxnError> {
        let err = self.script_err(i);
        let task = self.task(i).clone();
        let space = &self.config.space;
        let locking = self.predicted.is_some();
        let Slot::Running(r) = &mut self.slots[i] else { panic!("access by a task that is not running") };
        let event = match std::mem::replace(&mut r.pending, Pending::Done) {
            Pending::Done => panic!("access by a finished task"),
            Pending::Read(target) => {
                let value = match &target {
                    Target::Resource(id) => match r.buffer.get(id) {
                        Some(v) => v.clone(),
                        None => self.store.read(id, i),
                    },
                    Target::Listing(prefix) => {
                        let mut members = self.store.read_listing(prefix, i);
                        for (k, v) in r
                            .buffer
                            .range::<str, _>((std::ops::Bound::Included(prefix.as_str()), std::ops::Bound::Unbounded))
                        {
                            if !k.as_str().starts_with(prefix.as_str()) {
                                break;
                            }
                            members.insert(k.clone(), v.clone());
                        }
                        ResourceValue::Tuple(
                            members
                                .into_iter()
                                .filter(|(_, v)| !v.is_absent())
                                .map(|(k, _)| ResourceValue::bytes(&k.as_str()[prefix.len()..]))
                                .collect(),
                        )
                    }
                };
                r.run.supply(value.clone()).map_err(&err)?;
                AccessEvent { task, kind: AccessKind::Read, tracked: space.resolve(&target), target, value }
            }
            Pending::Write(target, value) => {
                match &target {
                    Target::Resource(id) => r.buffer.insert(id.clone(), value.clone()),
                    Target::Listing(p) => {
                        return Err(err(StateError::WriteIntoCollectionListing(p.clone()).into()));
                    }
                };
                r.run.acknowledge().map_err(&err)?;
                AccessEvent { task, kind: AccessKind::Write, tracked: space.resolve(&target), target, value }
            }
        };
        if locking {
            r.locks.insert(event.tracked.clone());
        }
        r.events.push(event);
        r.pending = r.run.poll().map_err(err)?;
        Ok(())
    }

    fn commit(&mut self, i: usize) -> Result<(), TxnError> {
        let Slot::Running(r) = std::mem::replace(&mut self.slots[i], Slot::Waiting) else {
            panic!("commit by a task that is not running")
        };
        let mut stale = BTreeSet::new();
        for resource in r.buffer.keys() {
            stale.extend(self.store.stale_readers(i, resource));
        }
        self.store.publish(i, &r.buffer);
        self.slots[i] = Slot::Committed(TaskTrace { task: self.task(i).clone(), events: r.events });
        for t in stale {
            let reason = match &self.slots[t] {
                Slot::Committed(_) => AbortReason::StaleRead,
                Slot::Running(_) => AbortReason::UnrealizableRead,
                Slot::Waiting => continue, // already rolled back by an earlier cascade
            };
            self.abort(t, reason)?;
        }
        Ok(())
    }

    /// Rolls back `t` and everything influenced by it, re-queueing them all.
    pub fn abort(&mut self, t: usize, reason: AbortReason) -> Result<BTreeSet<usize>, TxnError> {
        let closure = self.store.rollback(t);
        let tasks = self.config.graph.tasks();
        let names = |s: &BTreeSet<usize>, skip: usize| -> BTreeSet<TaskId> {
            s.iter().filter(|&&x| x != skip).map(|&x| tasks[x].clone()).collect()
        };
        for &x in &closure {
            if matches!(self.slots[x], Slot::Waiting) {
                continue;
            }
            self.slots[x] = Slot::Waiting;
            self.restarts[x] += 1;
            self.abort_log.push(AbortRecord {
                task: tasks[x].clone(),
                timestamp: x,
                reason: if x == t { reason } else { AbortReason::Cascade },
                restart_count: self.restarts[x],
                cascade: if x == t { names(&closure, t) } else { BTreeSet::new() },
            });
        }
        let n = self.slots.len();
        let budget = 2 * n * n;
        if self.restarts.iter().sum::<usize>() > budget {
            return Err(TxnError::LivelockGuard { budget });
        }
        Ok(closure)
    }

    /// Breaks a deadlock if there is one; returns whether it did.
    fn break_deadlock(&mut self) -> Result<bool, TxnError> {
        let victim = self
            .deadlock_cycle()
            .and_then(|cycle| cycle.into_iter().filter(|&x| matches!(self.slots[x], Slot::Running(_))).max());
        match victim {
            Some(v) => {
                self.abort(v, AbortReason::DeadlockVictim)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    /// Runs to completion under `policy`.
    pub fn drive(&mut self, policy: &DispatchPolicy) -> Result<(), TxnError> {
        let mut rng = match policy {
            DispatchPolicy::Seeded(seed) => Some(ChaCha8Rng::seed_from_u64(*seed)),
            _ => None,
        };
        let mut script = match policy {
            DispatchPolicy::Scripted(s) => s.as_slice(),
            _ => &[],
        };
        while !self.is_finished() {
            if self.break_deadlock()? {
                continue;
            }
            let actions = self.available();
            if actions.is_empty() {
                // Only reachable with a worker limit: every slot is held by a blocked task.
                let victim = (0..self.slots.len()).rev().find(|&i| !self.lock_blockers(i).is_empty());
                match victim {
                    Some(v) => {
                        self.abort(v, AbortReason::DeadlockVictim)?;
                        continue;
                    }
                    None => return Err(TxnError::Stalled),
                }
            }
            let mut pick = None;
            while let Some((&ts, rest)) = script.split_first() {
                script = rest;
                if let Some(&a) = actions.iter().find(|a| a.task() == ts) {
                    pick = Some(a);
                    break;
                }
            }
            let action = pick.unwrap_or_else(|| match (policy, rng.as_mut()) {
                (DispatchPolicy::Reverse, _) => *actions.last().expect("non-empty"),
                (_, Some(rng)) => actions[rng.gen_range(0..actions.len())],
                _ => actions[0],
            });
            self.perform(action)?;
        }
        Ok(())
    }

    pub fn into_outcome(self) -> TxnOutcome {
        let tasks = self.config.graph.tasks();
        TxnOutcome {
            final_state: self.store.latest(),
            abort_log: self.abort_log,
            restarts: tasks.iter().cloned().zip(self.restarts).collect(),
            blocks: self.blocks,
            traces: self
                .slots
                .into_iter()
                .zip(tasks)
                .map(|(s, t)| match s {
                    Slot::Committed(trace) => (t.clone(), trace),
                    _ => (t.clone(), TaskTrace::new(t.clone())),
                })
                .collect(),
        }
    }
}

/// Optimistic multiversion timestamp ordering; needs no dependency edges.
pub fn run_mvto(config: &Configuration, options: &TxnOptions) -> Result<TxnOutcome, TxnError> {
    let mut engine = TxnEngine::mvto(config, options.workers);
    engine.drive(&options.policy)?;
    Ok(engine.into_outcome())
}

/// Two-phase locking with predicted locks, validated like `run_mvto`.
pub fn run_locking(
    config: &Configuration,
    predicted: &BTreeMap<TaskId, BTreeSet<Target>>,
    options: &TxnOptions,
) -> Result<TxnOutcome, TxnError> {
    let mut engine = TxnEngine::locking(config, predicted, options.workers);
    engine.drive(&options.policy)?;
    Ok(engine.into_outcome())
}

/// Every target each task accessed, as lock predictions for the next build.
pub fn predicted_from_traces(traces: &BTreeMap<TaskId, TaskTrace>) -> BTreeMap<TaskId, BTreeSet<Target>> {
    traces.iter().map(|(t, tr)| (t.clone(), tr.events.iter().map(|e| e.target.clone()).collect())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::run_sequential;
    use crate::graph::{DependencyGraph, Edge};
    use crate::resource::ResourceSpace;
    use crate::script::{Expr, Instr, TaskScript};

    fn config(tasks: &[(&str, Vec<Instr>)], edges: &[(&str, &str)], initial: SharedState) -> Configuration {
        let graph = DependencyGraph::new(
            tasks.iter().map(|(n, _)| TaskId::new(*n)).collect(),
            edges.iter().map(|(f, t)| Edge::declared(f, t)),
        )
        .unwrap();
        let scripts = tasks.iter().map(|(n, s)| (TaskId::new(*n), TaskScript::new(s.clone()))).collect();
        Configuration::new(graph, scripts, initial, ResourceSpace::new()).unwrap()
    }

    fn gen_config() -> Configuration {
        config(
            &[
                (
                    "gen",
                    vec![
                        Instr::read("config", "v"),
                        Instr::write("gen.h", Expr::concat([Expr::lit("h:"), Expr::var("v")])),
                    ],
                ),
                (
                    "gcc",
                    vec![
                        Instr::read("foo.c", "s"),
                        Instr::read("gen.h", "h"),
                        Instr::write("foo", Expr::concat([Expr::var("s"), Expr::var("h")])),
                    ],
                ),
            ],
            &[],
            SharedState::from_entries([("config", ResourceValue::bytes("c1")), ("foo.c", ResourceValue::bytes("src"))]),
        )
    }

    #[test]
    fn serial_dispatch_has_no_aborts() {
        let c = gen_config();
        let out = run_mvto(&c, &TxnOptions::default()).unwrap();
        assert_eq!(out.final_state, run_sequential(&c).unwrap().final_state);
        assert_eq!(out.aborts(), 0);
    }

    #[test]
    fn late_writer_commit_aborts_committed_reader() {
        let c = gen_config();
        // gcc starts and runs to commit before gen does anything.
        let out = run_mvto(&c, &TxnOptions::with_policy(DispatchPolicy::Scripted(vec![1, 1, 1, 1, 1]))).unwrap();
        assert_eq!(out.final_state.get(&"foo".into()), ResourceValue::bytes("srch:c1"));
        assert_eq!(out.abort_log.len(), 1);
        assert_eq!(out.abort_log[0].reason, AbortReason::StaleRead);
        assert_eq!(out.abort_log[0].task, TaskId::new("gcc"));
        assert_eq!(out.export_abort_log(), "0 gcc 1 StaleRead -\n");
    }

    #[test]
    fn running_reader_gets_unrealizable_read() {
        let c = gen_config();
        // gcc reads both inputs, then gen runs and commits while gcc is still open.
        let out = run_mvto(&c, &TxnOptions::with_policy(DispatchPolicy::Scripted(vec![1, 1, 1]))).unwrap();
        assert_eq!(out.abort_log[0].reason, AbortReason::UnrealizableRead);
        assert_eq!(out.final_state, run_sequential(&c).unwrap().final_state);
    }

    #[test]
    fn reverse_dispatch_matches_sequential() {
        let c = gen_config();
        let out = run_mvto(&c, &TxnOptions::with_policy(DispatchPolicy::Reverse)).unwrap();
        assert_eq!(out.final_state, run_sequential(&c).unwrap().final_state);
    }

    #[test]
    fn rollback_without_readers_and_never_started() {
        let mut store = VersionedStore::new(&SharedState::new());
        store.publish(0, &BTreeMap::from([(ResourceId::new("a"), ResourceValue::bytes("1"))]));
        assert_eq!(store.rollback(0), BTreeSet::from([0]));
        assert_eq!(store.latest(), SharedState::new());
        let before = store.clone();
        assert_eq!(store.rollback(3), BTreeSet::from([3]));
        assert_eq!(store, before);
    }

    #[test]
    fn rollback_follows_read_from() {
        let mut store = VersionedStore::new(&SharedState::new());
        store.publish(0, &BTreeMap::from([(ResourceId::new("gen.h"), ResourceValue::bytes("h"))]));
        assert_eq!(store.read(&"gen.h".into(), 1), ResourceValue::bytes("h"));
        store.publish(1, &BTreeMap::from([(ResourceId::new("foo"), ResourceValue::bytes("x"))]));
        assert_eq!(store.read_from(), BTreeSet::from([(1, 0)]));
        assert_eq!(store.rollback(0), BTreeSet::from([0, 1]));
        assert_eq!(store.latest(), SharedState::new());
        assert!(store.read_from().is_empty());
    }

    #[test]
    fn visibility_is_strictly_earlier() {
        let mut store = VersionedStore::new(&SharedState::from_entries([("r", ResourceValue::bytes("0"))]));
        store.publish(2, &BTreeMap::from([(ResourceId::new("r"), ResourceValue::bytes("2"))]));
        assert_eq!(store.visible(&"r".into(), 2), (None, ResourceValue::bytes("0")));
        assert_eq!(store.visible(&"r".into(), 3), (Some(2), ResourceValue::bytes("2")));
    }

    #[test]
    fn locking_with_predictions_blocks_instead_of_aborting() {
        let c = gen_config();
        let seq = run_sequential(&c).unwrap();
        let predicted = predicted_from_traces(&seq.per_task);
        for policy in [DispatchPolicy::Reverse, DispatchPolicy::Scripted(vec![1, 1, 1, 1, 1])] {
            let out = run_locking(&c, &predicted, &TxnOptions::with_policy(policy)).unwrap();
            assert_eq!(out.final_state, seq.final_state);
            assert_eq!(out.aborts(), 0);
            assert!(out.blocks > 0);
        }
    }

    #[test]
    fn disjoint_tasks_never_block() {
        let c = config(
            &[("a", vec![Instr::write("x", Expr::lit("1"))]), ("b", vec![Instr::write("y", Expr::lit("2"))])],
            &[],
            SharedState::new(),
        );
        let out =
            run_locking(&c, &BTreeMap::new(), &TxnOptions::with_policy(DispatchPolicy::Scripted(vec![0, 1, 0, 1])))
                .unwrap();
        assert_eq!((out.blocks, out.aborts()), (0, 0));
    }

    #[test]
    fn cross_acquisition_deadlock_aborts_later_task() {
        let c = config(
            &[
                ("t1", vec![Instr::write("a", Expr::lit("1a")), Instr::write("b", Expr::lit("1b"))]),
                ("t2", vec![Instr::write("b", Expr::lit("2b")), Instr::write("a", Expr::lit("2a"))]),
            ],
            &[],
            SharedState::new(),
        );
        let out =
            run_locking(&c, &BTreeMap::new(), &TxnOptions::with_policy(DispatchPolicy::Scripted(vec![0, 1, 0, 1])))
                .unwrap();
        assert_eq!(out.abort_log.len(), 1);
        assert_eq!(out.abort_log[0].task, TaskId::new("t2"));
        assert_eq!(out.abort_log[0].reason, AbortReason::DeadlockVictim);
        assert_eq!(out.final_state, run_sequential(&c).unwrap().final_state);
    }

    #[test]
    fn listing_reader_invalidated_by_new_member() {
        let graph = DependencyGraph::new(vec!["mk".into(), "ls".into()], []).unwrap();
        let scripts = BTreeMap::from([
            (TaskId::new("mk"), TaskScript::new(vec![Instr::write("dir/x", Expr::lit("1"))])),
            (TaskId::new("ls"), TaskScript::new(vec![Instr::read("dir/*", "l"), Instr::write("out", Expr::var("l"))])),
        ]);
        let space = ResourceSpace::new().with_collection("dir/").unwrap();
        let c = Configuration::new(graph, scripts, SharedState::new(), space).unwrap();
        let out = run_mvto(&c, &TxnOptions::with_policy(DispatchPolicy::Reverse)).unwrap();
        assert_eq!(out.final_state, run_sequential(&c).unwrap().final_state);
        assert_eq!(out.aborts(), 1);
    }
}
