//! A small deterministic task language.
//!
//! A task can only learn about the shared state through `read`, and each read
//! yields exactly one resource value (or one collection listing). There are
//! no loops, clocks or random sources, so a task's accesses are a function of
//! the values it has read so far.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resource::{AccessEvent, AccessKind, ResourceValue, SharedState, StateError, Target};

pub const DEFAULT_INSTRUCTION_BUDGET: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(String);

impl TaskId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TaskId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScriptError {
    #[error("variable `{0}` used before any read bound it")]
    UnboundVariable(String),
    #[error("instruction budget of {budget} exceeded")]
    InstructionBudgetExceeded { budget: usize },
    #[error(transparent)]
    State(#[from] StateError),
}

/// Pure expression over bound variables.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Lit(String),
    Absent,
    Var(String),
    Concat(Vec<Expr>),
    Tuple(Vec<Expr>),
    Project { of: Box<Expr>, index: usize },
}

impl Expr {
    pub fn lit(s: &str) -> Self {
        Expr::Lit(s.to_owned())
    }

    pub fn var(v: &str) -> Self {
        Expr::Var(v.to_owned())
    }

    pub fn concat(parts: impl IntoIterator<Item = Expr>) -> Self {
        Expr::Concat(parts.into_iter().collect())
    }

    fn eval(&self, env: &BTreeMap<String, ResourceValue>) -> Result<ResourceValue, ScriptError> {
        Ok(match self {
            Expr::Lit(s) => ResourceValue::bytes(s),
            Expr::Absent => ResourceValue::Absent,
            Expr::Var(v) => env.get(v).cloned().ok_or_else(|| ScriptError::UnboundVariable(v.clone()))?,
            Expr::Concat(parts) => {
                let mut out = Vec::new();
                for p in parts {
                    out.extend(p.eval(env)?.render());
                }
                ResourceValue::Bytes(out)
            }
            Expr::Tuple(parts) => ResourceValue::Tuple(parts.iter().map(|p| p.eval(env)).collect::<Result<_, _>>()?),
            Expr::Project { of, index } => match of.eval(env)? {
                ResourceValue::Tuple(mut items) if *index < items.len() => items.swap_remove(*index),
                _ => ResourceValue::Absent,
            },
        })
    }

    fn rename_vars(&mut self, f: &impl Fn(&str) -> String) {
        match self {
            Expr::Var(v) => *v = f(v),
            Expr::Concat(parts) | Expr::Tuple(parts) => parts.iter_mut().for_each(|p| p.rename_vars(f)),
            Expr::Project { of, .. } => of.rename_vars(f),
            Expr::Lit(_) | Expr::Absent => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instr {
    Read {
        from: Target,
        into: String,
    },
    Write {
        to: Target,
        value: Expr,
    },
    Branch {
        var: String,
        equals: Expr,
        #[serde(default)]
        then: Vec<Instr>,
        #[serde(default, rename = "else")]
        otherwise: Vec<Instr>,
    },
    Halt,
}

impl Instr {
    pub fn read(from: &str, into: &str) -> Self {
        Instr::Read { from: from.parse().unwrap_or_else(|e| match e {}), into: into.to_owned() }
    }

    pub fn write(to: &str, value: Expr) -> Self {
        Instr::Write { to: to.parse().unwrap_or_else(|e| match e {}), value }
    }

    pub fn branch(var: &str, equals: Expr, then: Vec<Instr>, otherwise: Vec<Instr>) -> Self {
        Instr::Branch { var: var.to_owned(), equals, then, otherwise }
    }

    fn contains_halt(&self) -> bool {
        match self {
            Instr::Halt => true,
            Instr::Branch { then, otherwise, .. } => then.iter().chain(otherwise).any(Instr::contains_halt),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Op {
    Read { from: Target, into: String },
    Write { to: Target, value: Expr },
    JumpUnless { var: String, equals: Expr, to: usize },
    Jump(usize),
    Halt,
}

/// Deterministic, loop-free task program. Branches compile to forward jumps
/// only, so every run terminates.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskScript {
    instrs: Vec<Instr>,
    ops: Vec<Op>,
}

impl TaskScript {
    pub fn new(instrs: Vec<Instr>) -> Self {
        let mut ops = Vec::new();
        compile(&instrs, &mut ops);
        Self { instrs, ops }
    }

    pub fn instrs(&self) -> &[Instr] {
        &self.instrs
    }

    /// Largest number of accesses along any path through the script.
    pub fn max_accesses(&self) -> usize {
        // (longest path ending in a halt, longest path falling off the end)
        fn walk(instrs: &[Instr]) -> (Option<usize>, Option<usize>) {
            let mut halted: Option<usize> = None;
            let mut live = Some(0);
            for i in instrs {
                let Some(n) = live else { break };
                match i {
                    Instr::Read { .. } | Instr::Write { .. } => live = Some(n + 1),
                    Instr::Halt => {
                        halted = halted.max(Some(n));
                        live = None;
                    }
                    Instr::Branch { then, otherwise, .. } => {
                        let (h1, t1) = walk(then);
                        let (h2, t2) = walk(otherwise);
                        halted = halted.max(h1.map(|h| n + h)).max(h2.map(|h| n + h));
                        live = t1.max(t2).map(|t| n + t);
                    }
                }
            }
            (halted, live)
        }
        let (h, t) = walk(&self.instrs);
        h.max(t).unwrap_or(0)
    }

    /// Copy of the script with every variable renamed through `f`.
    pub fn rename_vars(&self, f: impl Fn(&str) -> String) -> TaskScript {
        fn go(instrs: &mut [Instr], f: &impl Fn(&str) -> String) {
            for i in instrs {
                match i {
                    Instr::Read { into, .. } => *into = f(into),
                    Instr::Write { value, .. } => value.rename_vars(f),
                    Instr::Branch { var, equals, then, otherwise } => {
                        *var = f(var);
                        equals.rename_vars(f);
                        go(then, f);
                        go(otherwise, f);
                    }
                    Instr::Halt => {}
                }
            }
        }
        let mut instrs = self.instrs.clone();
        go(&mut instrs, &f);
        TaskScript::new(instrs)
    }

    /// Sequential composition: runs each part to its own end (a `halt` inside a
    /// part only ends that part) and then continues with the next part.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a TaskScript>) -> TaskScript {
        let parts: Vec<&TaskScript> = parts.into_iter().collect();
        let mut tail: Vec<Instr> = Vec::new();
        for part in parts.into_iter().rev() {
            tail = inline_halts(&part.instrs, &tail);
        }
        TaskScript::new(tail)
    }
}

/// Rewrites `instrs` followed by `tail` so that every `halt` in `instrs`
/// continues into `tail` instead of ending the program.
fn inline_halts(instrs: &[Instr], tail: &[Instr]) -> Vec<Instr> {
    let mut out = Vec::new();
    for (i, instr) in instrs.iter().enumerate() {
        match instr {
            Instr::Halt => {
                out.extend_from_slice(tail);
                return out;
            }
            Instr::Branch { var, equals, then, otherwise } if instr.contains_halt() => {
                let rest = &instrs[i + 1..];
                let join = |arm: &[Instr]| {
                    let mut seq = arm.to_vec();
                    seq.extend_from_slice(rest);
                    inline_halts(&seq, tail)
                };
                out.push(Instr::Branch {
                    var: var.clone(),
                    equals: equals.clone(),
                    then: join(then),
                    otherwise: join(otherwise),
                });
                return out;
            }
            other => out.push(other.clone()),
        }
    }
    out.extend_from_slice(tail);
    out
}

fn compile(instrs: &[Instr], ops: &mut Vec<Op>) {
    for instr in instrs {
        match instr {
            Instr::Read { from, into } => ops.push(Op::Read { from: from.clone(), into: into.clone() }),
            Instr::Write { to, value } => ops.push(Op::Write { to: to.clone(), value: value.clone() }),
            Instr::Halt => ops.push(Op::Halt),
            Instr::Branch { var, equals, then, otherwise } => {
                let test = ops.len();
                ops.push(Op::Halt);
                compile(then, ops);
                let skip = ops.len();
                ops.push(Op::Halt);
                compile(otherwise, ops);
                let end = ops.len();
                ops[test] = Op::JumpUnless { var: var.clone(), equals: equals.clone(), to: skip + 1 };
                ops[skip] = Op::Jump(end);
            }
        }
    }
}

impl Serialize for TaskScript {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.instrs.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TaskScript {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Vec::<Instr>::deserialize(d).map(TaskScript::new)
    }
}

/// The next thing a suspended task wants to do.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pending {
    Read(Target),
    Write(Target, ResourceValue),
    Done,
}

/// A task suspended between accesses. Control flow between accesses runs
/// eagerly inside [`TaskRun::poll`]; the caller completes each access with
/// [`TaskRun::supply`] (reads) or [`TaskRun::acknowledge`] (writes).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskRun<'s> {
    ops: &'s [Op],
    pc: usize,
    env: BTreeMap<String, ResourceValue>,
    executed: usize,
    budget: usize,
}

impl<'s> TaskRun<'s> {
    pub fn new(script: &'s TaskScript, budget: usize) -> Self {
        Self { ops: &script.ops, pc: 0, env: BTreeMap::new(), executed: 0, budget }
    }

    /// Program counter; together with [`TaskRun::env`] it determines all future behavior.
    pub fn pc(&self) -> usize {
        self.pc
    }

    pub fn env(&self) -> &BTreeMap<String, ResourceValue> {
        &self.env
    }

    fn tick(&mut self) -> Result<(), ScriptError> {
        self.executed += 1;
        if self.executed > self.budget {
            return Err(ScriptError::InstructionBudgetExceeded { budget: self.budget });
        }
        Ok(())
    }

    pub fn poll(&mut self) -> Result<Pending, ScriptError> {
        loop {
            match self.ops.get(self.pc) {
                None | Some(Op::Halt) => return Ok(Pending::Done),
                Some(Op::Read { from, .. }) => return Ok(Pending::Read(from.clone())),
                Some(Op::Write { to, value }) => {
                    return Ok(Pending::Write(to.clone(), value.eval(&self.env)?));
                }
                Some(Op::Jump(to)) => {
                    self.tick()?;
                    self.pc = *to;
                }
                Some(Op::JumpUnless { var, equals, to }) => {
                    self.tick()?;
                    let lhs = self.env.get(var).ok_or_else(|| ScriptError::UnboundVariable(var.clone()))?;
                    if *lhs == equals.eval(&self.env)? {
                        self.pc += 1;
                    } else {
                        self.pc = *to;
                    }
                }
            }
        }
    }

    /// Completes a pending read with the value observed.
    pub fn supply(&mut self, value: ResourceValue) -> Result<(), ScriptError> {
        match self.ops.get(self.pc) {
            Some(Op::Read { into, .. }) => {
                self.tick()?;
                self.env.insert(into.clone(), value);
                self.pc += 1;
                Ok(())
            }
            other => panic!("supply called while not at a read: {other:?}"),
        }
    }

    /// Completes a pending write.
    pub fn acknowledge(&mut self) -> Result<(), ScriptError> {
        match self.ops.get(self.pc) {
            Some(Op::Write { .. }) => {
                self.tick()?;
                self.pc += 1;
                Ok(())
            }
            other => panic!("acknowledge called while not at a write: {other:?}"),
        }
    }
}

/// Read/write handle a task runs against.
pub trait StateView {
    fn read(&mut self, target: &Target) -> Result<ResourceValue, StateError>;
    fn write(&mut self, target: &Target, value: ResourceValue) -> Result<(), StateError>;
    /// Resource the access is accounted against.
    fn track(&self, target: &Target) -> Target {
        target.clone()
    }
}

impl StateView for SharedState {
    fn read(&mut self, target: &Target) -> Result<ResourceValue, StateError> {
        Ok(SharedState::read(self, target))
    }

    fn write(&mut self, target: &Target, value: ResourceValue) -> Result<(), StateError> {
        SharedState::write(self, target, value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskTrace {
    pub task: TaskId,
    pub events: Vec<AccessEvent>,
}

impl TaskTrace {
    pub fn new(task: TaskId) -> Self {
        Self { task, events: Vec::new() }
    }

    pub fn footprint(&self) -> crate::resource::Footprint {
        crate::resource::Footprint::of(&self.events)
    }
}

pub fn run_task(task: &TaskId, script: &TaskScript, view: &mut impl StateView) -> Result<TaskTrace, ScriptError> {
    run_task_budgeted(task, script, view, DEFAULT_INSTRUCTION_BUDGET)
}

pub fn run_task_budgeted(
    task: &TaskId,
    script: &TaskScript,
    view: &mut impl StateView,
    budget: usize,
) -> Result<TaskTrace, ScriptError> {
    let mut run = TaskRun::new(script, budget);
    let mut trace = TaskTrace::new(task.clone());
    loop {
        match run.poll()? {
            Pending::Done => return Ok(trace),
            Pending::Read(target) => {
                let value = view.read(&target)?;
                trace.events.push(AccessEvent {
                    task: task.clone(),
                    kind: AccessKind::Read,
                    tracked: view.track(&target),
                    target,
                    value: value.clone(),
                });
                run.supply(value)?;
            }
            Pending::Write(target, value) => {
                view.write(&target, value.clone())?;
                trace.events.push(AccessEvent {
                    task: task.clone(),
                    kind: AccessKind::Write,
                    tracked: view.track(&target),
                    target,
                    value,
                });
                run.acknowledge()?;
            }
        }
    }
}

/// True iff feeding the trace's recorded read values back into the script
/// reproduces the trace exactly.
pub fn replay_check(script: &TaskScript, trace: &TaskTrace) -> bool {
    let mut run = TaskRun::new(script, DEFAULT_INSTRUCTION_BUDGET);
    let mut events = trace.events.iter();
    loop {
        let step = match run.poll() {
            Ok(p) => p,
            Err(_) => return false,
        };
        match (step, events.next()) {
            (Pending::Done, None) => return true,
            (Pending::Read(t), Some(e)) if e.kind == AccessKind::Read && e.target == t && e.task == trace.task => {
                if run.supply(e.value.clone()).is_err() {
                    return false;
                }
            }
            (Pending::Write(t, v), Some(e))
                if e.kind == AccessKind::Write && e.target == t && e.value == v && e.task == trace.task =>
            {
                if run.acknowledge().is_err() {
                    return false;
                }
            }
            _ => return false,
        }
    }
}
