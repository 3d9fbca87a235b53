//! Random configurations for property tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resbuild_core::graph::{DependencyGraph, Edge};
use resbuild_core::script::{Expr, Instr};
use resbuild_core::{Configuration, ResourceSpace, ResourceValue, SharedState, TaskId, TaskScript};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gen_config(edges: &[(&str, &str)]) -> Configuration {
    let d = resbuild_core::description::BuildDescription::parse(include_str!("../../corpus/gen.json")).unwrap();
    let initial = SharedState::from_json(include_str!("../../corpus/gen.state.json")).unwrap();
    let c = d.configuration(initial).unwrap();
    let graph = c.graph.with_edges(edges.iter().map(|(a, b)| Edge::declared(a, b))).unwrap();
    c.with_graph(graph)
}

fn lit(rng: &mut ChaCha8Rng) -> Expr {
    Expr::lit(["0", "1"][rng.gen_range(0..2)])
}

fn value_expr(rng: &mut ChaCha8Rng, vars: &[String]) -> Expr {
    if vars.is_empty() || rng.gen_bool(0.3) {
        return if rng.gen_bool(0.1) { Expr::Absent } else { lit(rng) };
    }
    let v = Expr::var(vars.choose(rng).expect("non-empty"));
    if rng.gen_bool(0.5) {
        v
    } else {
        Expr::concat([v, lit(rng)])
    }
}

/// A straight-line or branching script with at most `budget` accesses on any
/// path. Variables are only used after being bound on every path.
fn script(rng: &mut ChaCha8Rng, budget: usize, reads: &[&str], writes: &[&str]) -> Vec<Instr> {
    let mut out = Vec::new();
    let mut vars: Vec<String> = Vec::new();
    let mut left = budget;
    while left > 0 {
        let roll = rng.gen_range(0..10);
        if roll < 4 && !reads.is_empty() {
            let var = format!("v{}", vars.len());
            out.push(Instr::read(reads.choose(rng).expect("non-empty"), &var));
            vars.push(var);
            left -= 1;
        } else if roll < 8 && !writes.is_empty() {
            out.push(Instr::write(writes.choose(rng).expect("non-empty"), value_expr(rng, &vars)));
            left -= 1;
        } else if !vars.is_empty() && rng.gen_bool(0.6) {
            let var = vars.choose(rng).expect("non-empty").clone();
            let arm = |rng: &mut ChaCha8Rng, left: usize| -> Vec<Instr> {
                (0..rng.gen_range(0..=left))
                    .map(|_| Instr::write(writes.choose(rng).expect("non-empty"), value_expr(rng, &vars)))
                    .collect()
            };
            let then = arm(rng, left);
            let otherwise = arm(rng, left);
            out.push(Instr::branch(&var, lit(rng), then, otherwise));
            break;
        } else if rng.gen_bool(0.2) {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub max_tasks: usize,
    pub max_accesses: usize,
    pub edge_probability: f64,
    pub collections: bool,
}

impl Default for Shape {
    fn default() -> Self {
        Shape { max_tasks: 4, max_accesses: 3, edge_probability: 0.3, collections: true }
    }
}

/// At most four resources (`a`, `b`, `c` and `dir/x`, the last one listed
/// through the `dir/` collection), random scripts and random forward edges.
pub fn random_config(rng: &mut ChaCha8Rng, shape: Shape) -> Configuration {
    let n = rng.gen_range(1..=shape.max_tasks);
    let with_dir = shape.collections && rng.gen_bool(0.3);
    let mut plain = vec!["a", "b", "c"];
    if with_dir {
        plain.push("dir/x");
    }
    let mut readable = plain.clone();
    if with_dir {
        readable.push("dir/*");
    }
    let names: Vec<TaskId> = (0..n).map(|i| TaskId::new(format!("t{i}"))).collect();
    let scripts: BTreeMap<TaskId, TaskScript> = names
        .iter()
        .map(|t| {
            let accesses = rng.gen_range(0..=shape.max_accesses);
            (t.clone(), TaskScript::new(script(rng, accesses, &readable, &plain)))
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(shape.edge_probability) {
                edges.push(Edge::declared(names[i].as_str(), names[j].as_str()));
            }
        }
    }
    let graph = DependencyGraph::new(names, edges).expect("forward edges");
    let mut entries = Vec::new();
    for r in &plain {
        if rng.gen_bool(0.5) {
            entries.push((*r, ResourceValue::bytes(["0", "1"][rng.gen_range(0..2)])));
        }
    }
    let initial = SharedState::from_entries(entries);
    let space = if with_dir { ResourceSpace::new().with_collection("dir/").unwrap() } else { ResourceSpace::new() };
    Configuration::new(graph, scripts, initial, space).expect("well-formed")
}

/// Make-style configuration: sources `s0..s2` are never written, every other
/// resource has exactly one writing task, and tasks read only sources and
/// outputs of earlier tasks. Re-running any task on a finished build's state
/// therefore changes nothing.
pub fn make_config(rng: &mut ChaCha8Rng, max_tasks: usize) -> Configuration {
    let n = rng.gen_range(1..=max_tasks);
    let sources = ["s0", "s1", "s2"];
    let names: Vec<TaskId> = (0..n).map(|i| TaskId::new(format!("t{i}"))).collect();
    let outputs: Vec<Vec<String>> = (0..n).map(|i| vec![format!("o{i}a"), format!("o{i}b")]).collect();
    let mut scripts = BTreeMap::new();
    for i in 0..n {
        let mut readable: Vec<String> = sources.iter().map(|s| s.to_string()).collect();
        readable.extend(outputs[..i].iter().flatten().cloned());
        let readable: Vec<&str> = readable.iter().map(String::as_str).collect();
        let writable: Vec<&str> = outputs[i].iter().map(String::as_str).collect();
        let mut body = Vec::new();
        let mut vars = Vec::new();
        for k in 0..rng.gen_range(1..=2) {
            let var = format!("v{k}");
            body.push(Instr::read(readable.choose(rng).expect("sources"), &var));
            vars.push(var);
        }
        if rng.gen_bool(0.4) {
            let var = vars[0].clone();
            let (x, y) = (writable[0], writable[1]);
            body.push(Instr::branch(
                &var,
                lit(rng),
                vec![Instr::write(x, value_expr(rng, &vars))],
                vec![Instr::write(y, value_expr(rng, &vars))],
            ));
        } else {
            body.push(Instr::write(writable.choose(rng).expect("outputs"), value_expr(rng, &vars)));
        }
        scripts.insert(names[i].clone(), TaskScript::new(body));
    }
    let graph = DependencyGraph::new(names, []).expect("no edges");
    let initial = SharedState::from_entries(
        sources.iter().map(|s| (*s, ResourceValue::bytes(["0", "1"][rng.gen_range(0..2)]))).collect::<Vec<_>>(),
    );
    Configuration::new(graph, scripts, initial, ResourceSpace::new()).expect("well-formed")
}

/// Developer edits between builds: rewrite, add or delete a random subset of
/// sources.
pub fn mutate_sources(rng: &mut ChaCha8Rng, state: &SharedState) -> SharedState {
    let mut next = state.clone();
    for s in ["s0", "s1", "s2"] {
        if rng.gen_bool(0.4) {
            let v = match rng.gen_range(0..4) {
                0 => ResourceValue::Absent,
                k => ResourceValue::bytes(k.to_string()),
            };
            next.write(&s.parse().unwrap(), v).unwrap();
        }
    }
    next
}

/// A random DAG on `n` tasks; edges only point forward.
pub fn random_dag(rng: &mut ChaCha8Rng, n: usize, p: f64) -> DependencyGraph {
    let names: Vec<TaskId> = (0..n).map(|i| TaskId::new(format!("t{i}"))).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p) {
                edges.push(Edge::declared(names[i].as_str(), names[j].as_str()));
            }
        }
    }
    DependencyGraph::new(names, edges).expect("forward edges")
}

/// `n` tasks that each read and write one shared resource: every pair conflicts.
pub fn pairwise_conflicting(n: usize) -> Configuration {
    let names: Vec<TaskId> = (0..n).map(|i| TaskId::new(format!("t{i}"))).collect();
    let scripts = names
        .iter()
        .map(|t| {
            (
                t.clone(),
                TaskScript::new(vec![
                    Instr::read("acc", "v"),
                    Instr::write("acc", Expr::concat([Expr::var("v"), Expr::lit(t.as_str())])),
                ]),
            )
        })
        .collect();
    let graph = DependencyGraph::new(names, []).unwrap();
    Configuration::new(graph, scripts, SharedState::new(), ResourceSpace::new()).unwrap()
}
