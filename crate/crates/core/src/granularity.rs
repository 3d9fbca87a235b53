//! Coarsening: contract resources that need no separate tracking and merge
//! groups of tasks into single tasks.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Configuration, DependencyGraph, Edge, EdgeTag, GraphError};
use crate::resource::{AccessKind, Contraction, Footprint, ResourceId, ResourceSpace, StateError, Target};
use crate::script::{TaskId, TaskScript, TaskTrace};

pub const DEFAULT_READ_THRESHOLD: f64 = 0.75;
pub const DEFAULT_MOD_THRESHOLD: usize = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GranularityError {
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("partition `{0}` is not contiguous: a path leaves it and comes back")]
    NonContiguousPartition(String),
    #[error("task `{0}` is not assigned to a partition")]
    UnassignedTask(TaskId),
    #[error("malformed proposal: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceUsage {
    pub readers: BTreeSet<TaskId>,
    pub writers: BTreeSet<TaskId>,
    /// Builds after which the resource was found changed.
    pub modifications: usize,
}

/// Who touches what, accumulated over recorded builds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageStats {
    pub resources: BTreeMap<ResourceId, ResourceUsage>,
    /// Footprints from the most recent build.
    pub footprints: BTreeMap<TaskId, Footprint>,
    pub builds: usize,
}

impl UsageStats {
    /// Adds one build's traces and the resources the developer changed
    /// since the previous build.
    pub fn record_build(&mut self, traces: &BTreeMap<TaskId, TaskTrace>, changed: &BTreeSet<ResourceId>) {
        for trace in traces.values() {
            for e in &trace.events {
                if let Target::Resource(r) = &e.target {
                    let u = self.resources.entry(r.clone()).or_default();
                    match e.kind {
                        AccessKind::Read => u.readers.insert(e.task.clone()),
                        AccessKind::Write => u.writers.insert(e.task.clone()),
                    };
                }
            }
        }
        for r in changed {
            self.resources.entry(r.clone()).or_default().modifications += 1;
        }
        self.footprints = traces.iter().map(|(t, tr)| (t.clone(), tr.footprint())).collect();
        self.builds += 1;
    }

    pub fn from_traces(traces: &BTreeMap<TaskId, TaskTrace>) -> Self {
        let mut s = UsageStats::default();
        s.record_build(traces, &BTreeSet::new());
        s
    }
}

/// Resources that a contraction may take: not in a collection, not already
/// contracted, not a merged name.
fn contractible(space: &ResourceSpace, r: &ResourceId) -> bool {
    space.member_component(r).is_none()
        && !space.contractions().iter().any(|c| &c.merged == r)
        && !space.collections().iter().any(|c| r.as_str().starts_with(c.prefix.as_str()))
}

/// A merged name that does not collide with anything in use.
fn fresh_name(base: &str, used: &BTreeSet<ResourceId>, space: &ResourceSpace) -> ResourceId {
    let mut name = base.to_owned();
    while used.contains(name.as_str())
        || space.member_component(&ResourceId::new(name.as_str())).is_some()
        || space.contractions().iter().any(|c| c.merged.as_str() == name)
        || space.collections().iter().any(|c| name.starts_with(c.prefix.as_str()))
    {
        name.push('\'');
    }
    ResourceId::new(name)
}

fn touched(traces: &BTreeMap<TaskId, TaskTrace>) -> BTreeMap<ResourceId, BTreeSet<TaskId>> {
    let mut by = BTreeMap::<ResourceId, BTreeSet<TaskId>>::new();
    for trace in traces.values() {
        for e in &trace.events {
            if let Target::Resource(r) = &e.target {
                by.entry(r.clone()).or_default().insert(e.task.clone());
            }
        }
    }
    by
}

/// Contracts, per task, the resources no other task touches into one
/// resource named `owned:<task>`.
pub fn collapse_owned(
    config: &Configuration,
    traces: &BTreeMap<TaskId, TaskTrace>,
) -> Result<ResourceSpace, GranularityError> {
    let by = touched(traces);
    let used: BTreeSet<ResourceId> = by.keys().cloned().collect();
    let mut owned = BTreeMap::<TaskId, BTreeSet<ResourceId>>::new();
    for (r, tasks) in &by {
        if tasks.len() == 1 && contractible(&config.space, r) {
            owned.entry(tasks.first().expect("one task").clone()).or_default().insert(r.clone());
        }
    }
    let mut space = config.space.clone();
    for (task, members) in owned.into_iter().filter(|(_, m)| m.len() > 1) {
        let merged = fresh_name(&format!("owned:{task}"), &used, &space);
        space = space.contract(&members, merged)?;
    }
    Ok(space)
}

/// Contracts resources read by at least `read_threshold` of all tasks and
/// changed at most `mod_threshold` times into one resource named `system`.
pub fn aggregate_system(
    config: &Configuration,
    stats: &UsageStats,
    read_threshold: f64,
    mod_threshold: usize,
) -> Result<ResourceSpace, GranularityError> {
    let n = config.graph.len() as f64;
    let members: BTreeSet<ResourceId> = stats
        .resources
        .iter()
        .filter(|(r, u)| {
            u.readers.len() as f64 >= read_threshold * n
                && !u.readers.is_empty()
                && u.modifications <= mod_threshold
                && contractible(&config.space, r)
        })
        .map(|(r, _)| r.clone())
        .collect();
    if members.len() < 2 {
        return Ok(config.space.clone());
    }
    let used = stats.resources.keys().cloned().collect();
    let merged = fresh_name("system", &used, &config.space);
    Ok(config.space.contract(&members, merged)?)
}

/// Distinct (task, tracked resource) pairs: the dependency records a build
/// has to keep under `space`.
pub fn tracking_edges(traces: &BTreeMap<TaskId, TaskTrace>, space: &ResourceSpace) -> usize {
    traces
        .values()
        .flat_map(|t| t.events.iter().map(|e| (e.task.clone(), space.resolve(&e.target))))
        .collect::<BTreeSet<_>>()
        .len()
}

/// Task pairs that conflict once accesses are accounted under `space`.
pub fn conflicting_pairs(traces: &BTreeMap<TaskId, TaskTrace>, space: &ResourceSpace) -> BTreeSet<(TaskId, TaskId)> {
    let fps: Vec<(&TaskId, Footprint)> = traces
        .iter()
        .map(|(t, tr)| {
            let mut fp = Footprint::default();
            for e in &tr.events {
                fp.record(e.kind, space.resolve(&e.target));
            }
            (t, fp)
        })
        .collect();
    let mut out = BTreeSet::new();
    for (i, (a, fa)) in fps.iter().enumerate() {
        for (b, fb) in &fps[i + 1..] {
            if !fa.conflicts(fb).is_empty() {
                out.insert(((*a).clone(), (*b).clone()));
            }
        }
    }
    out
}

/// Collapses each partition into one task running its members' scripts in
/// serial order. Partitions must be convex.
pub fn merge_tasks(
    config: &Configuration,
    partition: &BTreeMap<TaskId, String>,
) -> Result<Configuration, GranularityError> {
    let graph = &config.graph;
    let n = graph.len();
    let mut part_of = Vec::with_capacity(n);
    for t in graph.tasks() {
        part_of.push(partition.get(t).ok_or_else(|| GranularityError::UnassignedTask(t.clone()))?.clone());
    }
    for a in 0..n {
        for b in 0..n {
            if part_of[a] != part_of[b] || !graph.reaches(a, b) {
                continue;
            }
            if (0..n).any(|x| part_of[x] != part_of[a] && graph.reaches(a, x) && graph.reaches(x, b)) {
                return Err(GranularityError::NonContiguousPartition(part_of[a].clone()));
            }
        }
    }

    let mut members = BTreeMap::<&str, Vec<usize>>::new();
    for (i, p) in part_of.iter().enumerate() {
        members.entry(p).or_default().push(i);
    }
    let mut quotient = BTreeMap::<(&str, &str), EdgeTag>::new();
    for e in graph.edges() {
        let (a, b) =
            (&part_of[graph.position(&e.from).expect("known")], &part_of[graph.position(&e.to).expect("known")]);
        if a != b {
            let tag = quotient.entry((a.as_str(), b.as_str())).or_insert(e.tag);
            *tag = (*tag).min(e.tag);
        }
    }

    // Kahn's algorithm, preferring the partition whose first member is earliest.
    let mut indegree: BTreeMap<&str, usize> = members.keys().map(|p| (*p, 0)).collect();
    for (_, b) in quotient.keys() {
        *indegree.get_mut(b).expect("known") += 1;
    }
    let mut ready: BTreeSet<(usize, &str)> =
        indegree.iter().filter(|(_, d)| **d == 0).map(|(p, _)| (members[p][0], *p)).collect();
    let mut order = Vec::new();
    while let Some((_, p)) = ready.pop_first() {
        order.push(p);
        for ((_, b), _) in quotient.range((p, "")..).take_while(|((a, _), _)| *a == p) {
            let d = indegree.get_mut(b).expect("known");
            *d -= 1;
            if *d == 0 {
                ready.insert((members[b][0], *b));
            }
        }
    }

    let scripts = members
        .iter()
        .map(|(p, ms)| {
            let renamed: Vec<TaskScript> = ms
                .iter()
                .map(|&i| {
                    let task = &graph.tasks()[i];
                    config.script(task).rename_vars(|v| format!("{task}/{v}"))
                })
                .collect();
            (TaskId::new(*p), TaskScript::concat(&renamed))
        })
        .collect();
    let merged = DependencyGraph::new(
        order.iter().map(|p| TaskId::new(*p)).collect(),
        quotient.iter().map(|((a, b), tag)| Edge { from: TaskId::new(*a), to: TaskId::new(*b), tag: *tag }),
    )?;
    let mut out = Configuration::new(merged, scripts, config.initial.clone(), config.space.clone())?;
    out.budget = config.budget;
    Ok(out)
}

/// Advisory coarsening, written as a file and applied only on request.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub contractions: Vec<Contraction>,
    pub partitions: BTreeMap<TaskId, String>,
}

impl Proposal {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("proposal serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, GranularityError> {
        serde_json::from_str(text).map_err(|e| GranularityError::Format(e.to_string()))
    }

    /// The configuration with the proposal's contractions and merges applied.
    pub fn apply(&self, config: &Configuration) -> Result<Configuration, GranularityError> {
        let mut space = config.space.clone();
        for c in &self.contractions {
            space = space.contract(&c.members.iter().cloned().collect(), c.merged.clone())?;
        }
        let mut contracted = config.clone();
        contracted.space = space;
        if self.partitions.is_empty() {
            return Ok(contracted);
        }
        merge_tasks(&contracted, &self.partitions)
    }
}

/// Resources changed more than `hot_threshold` times stay separate; the rest
/// are grouped by who reads and writes them. Consecutive tasks (in serial
/// order) that conflict and are already ordered are grouped into one task.
pub fn suggest_partitions(config: &Configuration, stats: &UsageStats, hot_threshold: usize) -> Proposal {
    let mut groups = BTreeMap::<(&BTreeSet<TaskId>, &BTreeSet<TaskId>), BTreeSet<ResourceId>>::new();
    for (r, u) in &stats.resources {
        if u.modifications <= hot_threshold && contractible(&config.space, r) {
            groups.entry((&u.readers, &u.writers)).or_default().insert(r.clone());
        }
    }
    let used: BTreeSet<ResourceId> = stats.resources.keys().cloned().collect();
    let mut space = config.space.clone();
    let mut contractions = Vec::new();
    for members in groups.into_values().filter(|m| m.len() > 1) {
        let first = members.first().expect("non-empty");
        let merged = fresh_name(&format!("group:{first}"), &used, &space);
        space = space.contract(&members, merged.clone()).expect("fresh, disjoint members");
        contractions.push(Contraction { merged, members: members.into_iter().collect() });
    }

    let graph = &config.graph;
    let mut partitions = BTreeMap::new();
    let mut current = String::new();
    let empty = Footprint::default();
    for (i, t) in graph.tasks().iter().enumerate() {
        let joins = i > 0 && {
            let prev = &graph.tasks()[i - 1];
            let (a, b) = (stats.footprints.get(prev).unwrap_or(&empty), stats.footprints.get(t).unwrap_or(&empty));
            graph.ordered(i - 1, i) && !a.conflicts(b).is_empty()
        };
        if !joins {
            current = t.to_string();
        }
        partitions.insert(t.clone(), current.clone());
    }
    Proposal { contractions, partitions }
}
