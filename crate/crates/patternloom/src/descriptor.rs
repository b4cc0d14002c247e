//! JSON workflow descriptors: a serializable mirror of the workflow
//! tree, compiled into runnable nodes whose leaf steps prompt the
//! scripted model backend.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::catalog::CognitiveFunction;
use crate::kernel::{Step, WorkflowNode};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepSpec {
    pub name: String,
    #[serde(default = "default_function")]
    pub function: CognitiveFunction,
    /// Prompt template; `{task}`, `{last}` and `{slot:NAME}` expand
    /// against the context.
    pub prompt: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u64,
    #[serde(default)]
    pub rate_dollars_per_token: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_cap: Option<u64>,
}

fn default_function() -> CognitiveFunction {
    CognitiveFunction::C3
}

fn default_max_tokens() -> u64 {
    1024
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExitSpec {
    /// The literal string "never": loop runs to its iteration cap.
    Keyword(String),
    /// Exit when the last output contains the given substring.
    Contains { contains: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum NodeSpec {
    Step(StepSpec),
    Chain {
        children: Vec<NodeSpec>,
    },
    Route {
        classifier: StepSpec,
        branches: BTreeMap<String, NodeSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        default: Option<Box<NodeSpec>>,
    },
    Parallel {
        branches: Vec<NodeSpec>,
        aggregator: StepSpec,
    },
    Orchestrate {
        coordinator: StepSpec,
        workers: Vec<NodeSpec>,
        synthesizer: StepSpec,
    },
    Loop {
        body: Box<NodeSpec>,
        max_iterations: u64,
        #[serde(default = "default_exit")]
        exit: ExitSpec,
    },
    Hierarchy {
        levels: Vec<NodeSpec>,
    },
}

fn default_exit() -> ExitSpec {
    ExitSpec::Keyword("never".to_string())
}

#[derive(Debug, thiserror::Error)]
pub enum DescriptorError {
    #[error("descriptor parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown exit keyword {0:?} (expected \"never\")")]
    BadExit(String),
}

impl StepSpec {
    fn compile(&self) -> Step {
        let mut step =
            Step::prompt(&self.name, self.function, &self.prompt, self.max_tokens)
                .with_rate(self.rate_dollars_per_token);
        if let Some(cap) = self.cost_cap {
            step = step.with_cost_cap(cap);
        }
        step
    }
}

impl NodeSpec {
    pub fn from_json(json: &str) -> Result<NodeSpec, DescriptorError> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn compile(&self) -> Result<WorkflowNode, DescriptorError> {
        Ok(match self {
            NodeSpec::Step(s) => WorkflowNode::Step(s.compile()),
            NodeSpec::Chain { children } => WorkflowNode::Chain(
                children.iter().map(|c| c.compile()).collect::<Result<_, _>>()?,
            ),
            NodeSpec::Route { classifier, branches, default } => WorkflowNode::Route {
                classifier: classifier.compile(),
                branches: branches
                    .iter()
                    .map(|(k, v)| Ok((k.clone(), v.compile()?)))
                    .collect::<Result<_, DescriptorError>>()?,
                default: match default {
                    Some(d) => Some(Box::new(d.compile()?)),
                    None => None,
                },
            },
            NodeSpec::Parallel { branches, aggregator } => WorkflowNode::Parallel {
                branches: branches.iter().map(|b| b.compile()).collect::<Result<_, _>>()?,
                aggregator: aggregator.compile(),
            },
            NodeSpec::Orchestrate { coordinator, workers, synthesizer } => {
                WorkflowNode::Orchestrate {
                    coordinator: coordinator.compile(),
                    workers: workers.iter().map(|w| w.compile()).collect::<Result<_, _>>()?,
                    synthesizer: synthesizer.compile(),
                }
            }
            NodeSpec::Loop { body, max_iterations, exit } => {
                let predicate: crate::kernel::ExitPredicate = match exit {
                    ExitSpec::Keyword(k) if k == "never" => Arc::new(|_| false),
                    ExitSpec::Keyword(k) => return Err(DescriptorError::BadExit(k.clone())),
                    ExitSpec::Contains { contains } => {
                        let needle = contains.clone();
                        Arc::new(move |ctx: &crate::kernel::Context| {
                            ctx.last_output().is_some_and(|o| o.contains(&needle))
                        })
                    }
                };
                WorkflowNode::Loop {
                    body: Box::new(body.compile()?),
                    exit: predicate,
                    max_iterations: *max_iterations,
                }
            }
            NodeSpec::Hierarchy { levels } => WorkflowNode::Hierarchy(
                levels.iter().map(|l| l.compile()).collect::<Result<_, _>>()?,
            ),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{self, Context};
    use crate::model::ScriptedModel;

    #[test]
    fn descriptor_round_trips_and_runs() {
        let json = r#"{
            "type": "chain",
            "children": [
                {"type": "step", "name": "draft", "function": "C3", "prompt": "draft:{task}"},
                {"type": "loop", "max_iterations": 4,
                 "exit": {"contains": "done"},
                 "body": {"type": "step", "name": "polish", "prompt": "polish:{last}"}}
            ]
        }"#;
        let spec = NodeSpec::from_json(json).unwrap();
        let round: NodeSpec =
            serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        let node = round.compile().unwrap();
        let model = ScriptedModel::empty(0)
            .rule("polish:rough", "smoother")
            .rule("polish:smoother", "done")
            .rule("draft:", "rough");
        let (ctx, _, trace) = kernel::run(&node, Context::new("memo"), &model).unwrap();
        assert_eq!(ctx.last_output(), Some("done"));
        assert_eq!(trace.count(kernel::TraceKind::IterationStart), 2);
    }

    #[test]
    fn bad_exit_keyword_is_rejected() {
        let json = r#"{"type": "loop", "max_iterations": 1, "exit": "sometimes",
                       "body": {"type": "step", "name": "s", "prompt": "p"}}"#;
        let spec = NodeSpec::from_json(json).unwrap();
        assert!(matches!(spec.compile(), Err(DescriptorError::BadExit(_))));
    }
}
