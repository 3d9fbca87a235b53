//! Exhaustive ground truth: every feasible interleaving of a small
//! configuration, and brute-force optimal schedules.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::executor::{ExecError, Interleaver, InterleavingChoice};
use crate::graph::{check_validity, Configuration, DependencyGraph, GraphError, Verdict};
use crate::resource::{Digest, Footprint, ResourceValue, SharedState, StoreFault};
use crate::script::TaskId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("limit exceeded: {0}")]
    LimitExceeded(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub max_tasks: usize,
    pub max_events_per_task: usize,
    /// Leaves actually evaluated; memoized subtrees are not re-counted.
    pub max_interleavings: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_tasks: 5, max_events_per_task: 4, max_interleavings: 200_000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OracleOptions {
    pub limits: Limits,
    /// Share results between identical search states.
    pub memoize: bool,
    /// Misbehaviour injected into the state store.
    pub fault: StoreFault,
}

impl OracleOptions {
    pub fn new() -> Self {
        OracleOptions { limits: Limits::default(), memoize: true, fault: StoreFault::None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Outcome {
    pub verdict: Verdict,
    pub state: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnumerationResult {
    /// Number of feasible complete interleavings.
    pub build_count: u64,
    pub verdicts: BTreeSet<Verdict>,
    /// Final-state digests of valid builds.
    pub final_states: BTreeSet<Digest>,
    /// One interleaving reaching each distinct outcome.
    pub witnesses: BTreeMap<Outcome, InterleavingChoice>,
    /// Leaves evaluated.
    pub explored: usize,
}

#[derive(Clone)]
struct Subtree {
    count: u64,
    // suffixes stored reversed
    outcomes: BTreeMap<Outcome, Vec<TaskId>>,
}

/// Everything the rest of a build can depend on: the state, where each task
/// is and what it has bound, and what it has accessed so far (which decides
/// the verdict). Scripts only jump forward, so the instruction budget cannot
/// differ between two runs at the same position.
type Key = (SharedState, Vec<(usize, BTreeMap<String, ResourceValue>)>, Vec<Footprint>);

struct Search<'c> {
    config: &'c Configuration,
    memo: Option<HashMap<Key, Subtree>>,
    explored: usize,
    limit: usize,
}

impl<'c> Search<'c> {
    fn footprints(il: &Interleaver<'c>) -> Vec<Footprint> {
        il.trace().per_task.values().map(|t| t.footprint()).collect()
    }

    fn key(il: &Interleaver<'c>) -> Key {
        (il.state().clone(), il.runs().iter().map(|r| (r.pc(), r.env().clone())).collect(), Self::footprints(il))
    }

    fn explore(&mut self, il: &Interleaver<'c>) -> Result<Subtree, OracleError> {
        if il.is_complete() {
            self.explored += 1;
            if self.explored > self.limit {
                return Err(OracleError::LimitExceeded(format!("more than {} interleavings", self.limit)));
            }
            let verdict = check_validity(&self.config.graph, &il.trace().per_task)?.verdict();
            let outcome = Outcome { verdict, state: il.state().digest() };
            return Ok(Subtree { count: 1, outcomes: BTreeMap::from([(outcome, Vec::new())]) });
        }
        let key = self.memo.as_ref().map(|_| Self::key(il));
        if let (Some(memo), Some(k)) = (&self.memo, &key) {
            if let Some(hit) = memo.get(k) {
                return Ok(hit.clone());
            }
        }
        let mut out = Subtree { count: 0, outcomes: BTreeMap::new() };
        for i in il.runnable().collect::<Vec<_>>() {
            let mut next = il.clone();
            next.step(i)?;
            let sub = self.explore(&next)?;
            out.count += sub.count;
            for (o, mut suffix) in sub.outcomes {
                out.outcomes.entry(o).or_insert_with(|| {
                    suffix.push(self.config.graph.tasks()[i].clone());
                    suffix
                });
            }
        }
        if let (Some(memo), Some(k)) = (&mut self.memo, key) {
            memo.insert(k, out.clone());
        }
        Ok(out)
    }
}

fn check_limits(config: &Configuration, limits: &Limits) -> Result<(), OracleError> {
    if config.graph.len() > limits.max_tasks {
        return Err(OracleError::LimitExceeded(format!(
            "{} tasks, at most {} allowed",
            config.graph.len(),
            limits.max_tasks
        )));
    }
    for (t, s) in &config.scripts {
        if s.max_accesses() > limits.max_events_per_task {
            return Err(OracleError::LimitExceeded(format!(
                "task `{t}` may make {} accesses, at most {} allowed",
                s.max_accesses(),
                limits.max_events_per_task
            )));
        }
    }
    Ok(())
}

/// Runs every feasible interleaving (respecting program order and edges) and
/// collects the verdicts and final states.
pub fn enumerate_builds(config: &Configuration, options: &OracleOptions) -> Result<EnumerationResult, OracleError> {
    check_limits(config, &options.limits)?;
    let mut search = Search {
        config,
        memo: options.memoize.then(HashMap::new),
        explored: 0,
        limit: options.limits.max_interleavings,
    };
    let root = Interleaver::new(config, options.fault)?;
    let tree = search.explore(&root)?;
    Ok(EnumerationResult {
        build_count: tree.count,
        verdicts: tree.outcomes.keys().map(|o| o.verdict).collect(),
        final_states: tree.outcomes.keys().filter(|o| o.verdict == Verdict::Valid).map(|o| o.state).collect(),
        witnesses: tree
            .outcomes
            .into_iter()
            .map(|(o, mut rev)| {
                rev.reverse();
                (o, InterleavingChoice(rev))
            })
            .collect(),
        explored: search.explored,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counterexample {
    pub reason: String,
    pub first: InterleavingChoice,
    pub second: InterleavingChoice,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TheoremResult {
    Pass(EnumerationResult),
    Counterexample(Counterexample),
}

impl TheoremResult {
    pub fn passed(&self) -> bool {
        matches!(self, TheoremResult::Pass(_))
    }
}

/// The serial build, run through the same (possibly faulty) store.
fn serial_run(config: &Configuration, fault: StoreFault) -> Result<(InterleavingChoice, Digest), OracleError> {
    let mut il = Interleaver::new(config, fault)?;
    loop {
        let Some(i) = il.runnable().next() else { break };
        il.step(i)?;
    }
    Ok((il.trace().choice.clone(), il.state().digest()))
}

/// Passes iff every build of the configuration gets the same verdict and, when
/// valid, every build ends in the serial build's final state.
pub fn theorem_check(config: &Configuration, options: &OracleOptions) -> Result<TheoremResult, OracleError> {
    let result = enumerate_builds(config, options)?;
    let pick = |v: Verdict| result.witnesses.iter().find(|(o, _)| o.verdict == v).map(|(_, c)| c.clone());
    if result.verdicts.len() > 1 {
        return Ok(TheoremResult::Counterexample(Counterexample {
            reason: "some builds are valid and others invalid".into(),
            first: pick(Verdict::Valid).expect("valid witness"),
            second: pick(Verdict::Invalid).expect("invalid witness"),
        }));
    }
    if result.verdicts.contains(&Verdict::Valid) {
        let (serial, serial_state) = serial_run(config, options.fault)?;
        if let Some((_, other)) = result.witnesses.iter().find(|(o, _)| o.state != serial_state) {
            return Ok(TheoremResult::Counterexample(Counterexample {
                reason: "valid builds end in different states".into(),
                first: serial,
                second: other.clone(),
            }));
        }
    }
    Ok(TheoremResult::Pass(result))
}

/// (finished mask, running tasks with remaining time) -> best remaining makespan
type MakespanMemo = HashMap<(u32, Vec<(usize, u64)>), u64>;

pub const MAX_SCHEDULING_TASKS: usize = 8;

/// Shortest possible makespan, by exhaustive search. Tasks start only at time
/// zero or when another task finishes; any subset of the ready tasks may start
/// (including none, as long as something is running).
pub fn optimal_makespan(
    graph: &DependencyGraph,
    durations: &BTreeMap<TaskId, u64>,
    workers: usize,
) -> Result<u64, OracleError> {
    let n = graph.len();
    if n > MAX_SCHEDULING_TASKS {
        return Err(OracleError::LimitExceeded(format!("{n} tasks, at most {MAX_SCHEDULING_TASKS} allowed")));
    }
    if workers == 0 {
        return Err(GraphError::NoWorkers.into());
    }
    let dur: Vec<u64> = graph
        .tasks()
        .iter()
        .map(|t| match durations.get(t) {
            Some(0) => Err(GraphError::ZeroDuration(t.clone())),
            Some(&d) => Ok(d),
            None => Ok(1),
        })
        .collect::<Result<_, _>>()?;
    let preds: Vec<u32> = (0..n).map(|i| graph.predecessors(i).iter().fold(0, |m, &p| m | 1 << p)).collect();

    fn best(
        done: u32,
        running: Vec<(usize, u64)>,
        n: usize,
        workers: usize,
        dur: &[u64],
        preds: &[u32],
        memo: &mut MakespanMemo,
    ) -> u64 {
        if done.count_ones() as usize == n {
            return 0;
        }
        let key = (done, running.clone());
        if let Some(&v) = memo.get(&key) {
            return v;
        }
        let busy: u32 = running.iter().fold(0, |m, &(t, _)| m | 1 << t);
        let ready: Vec<usize> = (0..n).filter(|&t| (done | busy) & 1 << t == 0 && preds[t] & !done == 0).collect();
        let free = workers - running.len();
        let mut answer = u64::MAX;
        for subset in 0u32..1 << ready.len() {
            if subset.count_ones() as usize > free || (subset == 0 && running.is_empty()) {
                continue;
            }
            let mut next = running.clone();
            next.extend(ready.iter().enumerate().filter(|(k, _)| subset & 1 << k != 0).map(|(_, &t)| (t, dur[t])));
            let dt = next.iter().map(|&(_, r)| r).min().expect("something runs");
            let mut now_done = done;
            let mut still = Vec::new();
            for (t, r) in next {
                if r == dt {
                    now_done |= 1 << t;
                } else {
                    still.push((t, r - dt));
                }
            }
            still.sort_unstable();
            answer = answer.min(dt + best(now_done, still, n, workers, dur, preds, memo));
        }
        memo.insert(key, answer);
        answer
    }

    Ok(best(0, Vec::new(), n, workers.min(n.max(1)), &dur, &preds, &mut HashMap::new()))
}
