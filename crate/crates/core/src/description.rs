//! The build description file: tasks in serial order with their scripts,
//! declared edges, resource-space declarations and options.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Configuration, DependencyGraph, Edge, EdgeTag, GraphError};
use crate::resource::{Contraction, ResourceSpace, SharedState, StateError};
use crate::script::{TaskId, TaskScript, DEFAULT_INSTRUCTION_BUDGET};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DescriptionError {
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    State(#[from] StateError),
}

impl From<serde_json::Error> for DescriptionError {
    fn from(e: serde_json::Error) -> Self {
        let message = e.to_string();
        // serde_json appends " at line L column C"; keep only the message part
        let message = message.split(" at line ").next().unwrap_or(&message).to_owned();
        DescriptionError::Parse { line: e.line(), column: e.column(), message }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub name: TaskId,
    pub script: TaskScript,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeEntry {
    pub from: TaskId,
    pub to: TaskId,
    #[serde(default = "declared")]
    pub tag: EdgeTag,
}

fn declared() -> EdgeTag {
    EdgeTag::Declared
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceEntry {
    #[serde(default)]
    pub collections: Vec<String>,
    #[serde(default)]
    pub contractions: Vec<Contraction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Options {
    #[serde(default = "default_budget")]
    pub instruction_budget: usize,
}

fn default_budget() -> usize {
    DEFAULT_INSTRUCTION_BUDGET
}

impl Default for Options {
    fn default() -> Self {
        Options { instruction_budget: DEFAULT_INSTRUCTION_BUDGET }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildDescription {
    pub tasks: Vec<TaskEntry>,
    #[serde(default)]
    pub edges: Vec<EdgeEntry>,
    #[serde(default)]
    pub space: SpaceEntry,
    #[serde(default)]
    pub options: Options,
}

impl BuildDescription {
    pub fn parse(text: &str) -> Result<Self, DescriptionError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("description serializes");
        s.push('\n');
        s
    }

    pub fn space(&self) -> Result<ResourceSpace, DescriptionError> {
        let mut space = ResourceSpace::new();
        for c in &self.space.collections {
            space = space.with_collection(c.clone())?;
        }
        for c in &self.space.contractions {
            let members: BTreeSet<_> = c.members.iter().cloned().collect();
            space = space.contract(&members, c.merged.clone())?;
        }
        Ok(space)
    }

    pub fn configuration(&self, initial: SharedState) -> Result<Configuration, DescriptionError> {
        let graph = DependencyGraph::new(
            self.tasks.iter().map(|t| t.name.clone()).collect(),
            self.edges.iter().map(|e| Edge { from: e.from.clone(), to: e.to.clone(), tag: e.tag }),
        )?;
        let mut scripts = std::collections::BTreeMap::new();
        for t in &self.tasks {
            scripts.insert(t.name.clone(), t.script.clone());
        }
        let mut config = Configuration::new(graph, scripts, initial, self.space()?)?;
        config.budget = self.options.instruction_budget;
        Ok(config)
    }

    /// Description of a configuration, inferred edges included.
    pub fn from_configuration(config: &Configuration) -> Self {
        BuildDescription {
            tasks: config
                .graph
                .tasks()
                .iter()
                .map(|t| TaskEntry { name: t.clone(), script: config.script(t).clone() })
                .collect(),
            edges: config.graph.edges().map(|e| EdgeEntry { from: e.from, to: e.to, tag: e.tag }).collect(),
            space: SpaceEntry {
                collections: config.space.collections().iter().map(|c| c.prefix.clone()).collect(),
                contractions: config.space.contractions().to_vec(),
            },
            options: Options { instruction_budget: config.budget },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GEN: &str = r#"{
  "tasks": [
    {"name": "gen", "script": [
      {"read": {"from": "config", "into": "v"}},
      {"write": {"to": "gen.h", "value": {"concat": [{"lit": "h:"}, {"var": "v"}]}}}
    ]},
    {"name": "gcc", "script": [
      {"read": {"from": "foo.c", "into": "s"}},
      {"read": {"from": "gen.h", "into": "h"}},
      {"write": {"to": "foo", "value": {"concat": [{"var": "s"}, {"var": "h"}]}}}
    ]}
  ]
}"#;

    #[test]
    fn parses_and_roundtrips() {
        let d = BuildDescription::parse(GEN).unwrap();
        let c = d.configuration(SharedState::new()).unwrap();
        assert_eq!(c.graph.len(), 2);
        let text = d.to_json();
        assert_eq!(BuildDescription::parse(&text).unwrap().to_json(), text);
        assert_eq!(BuildDescription::from_configuration(&c), d);
    }

    #[test]
    fn errors_are_positional() {
        let err = BuildDescription::parse("{\n  \"tasks\": [\n    {\"name\": 3}\n  ]\n}").unwrap_err();
        assert!(matches!(err, DescriptionError::Parse { line: 3, .. }), "{err}");
        let err = BuildDescription::parse("{\"tasks\": [], \"bogus\": 1}").unwrap_err();
        assert!(matches!(err, DescriptionError::Parse { line: 1, .. }));
    }

    #[test]
    fn edges_must_follow_serial_order() {
        let mut d = BuildDescription::parse(GEN).unwrap();
        d.edges.push(EdgeEntry { from: "gcc".into(), to: "gen".into(), tag: EdgeTag::Declared });
        assert!(matches!(
            d.configuration(SharedState::new()),
            Err(DescriptionError::Graph(GraphError::OrderViolation { .. }))
        ));
    }
}
