use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch::Activation;
use crate::network::NodeId;

pub const PLAN_SCHEMA: &str = "obfunas-plan/v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    WidenLayer,
    DeepenLayer,
    WidenKernel,
    ReplaceAvgpool,
    ReplaceSkip,
    AddShortcutSequential,
    AddShortcutParallel,
    AddBranch,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::WidenLayer,
        StrategyKind::DeepenLayer,
        StrategyKind::WidenKernel,
        StrategyKind::ReplaceAvgpool,
        StrategyKind::ReplaceSkip,
        StrategyKind::AddShortcutSequential,
        StrategyKind::AddShortcutParallel,
        StrategyKind::AddBranch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::WidenLayer => "widen-layer",
            StrategyKind::DeepenLayer => "deepen-layer",
            StrategyKind::WidenKernel => "widen-kernel",
            StrategyKind::ReplaceAvgpool => "replace-avgpool",
            StrategyKind::ReplaceSkip => "replace-skip",
            StrategyKind::AddShortcutSequential => "add-shortcut-sequential",
            StrategyKind::AddShortcutParallel => "add-shortcut-parallel",
            StrategyKind::AddBranch => "add-branch",
        }
    }

    /// Adds no executed cost.
    pub fn is_free(self) -> bool {
        matches!(
            self,
            StrategyKind::AddShortcutSequential | StrategyKind::AddShortcutParallel
        )
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    /// Exact kind names; [`parse_strategy_set`] also takes aliases.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = StrategyKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown strategy {s:?}; expected one of {}", names.join(", "))
            })
    }
}

/// Comma-separated kinds; `add-shortcut` expands to both shortcut modes and
/// `all` to every kind. Sorted and deduplicated.
pub fn parse_strategy_set(text: &str) -> Result<Vec<StrategyKind>, String> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "all" => out.extend(StrategyKind::ALL),
            "add-shortcut" => out.extend([
                StrategyKind::AddShortcutSequential,
                StrategyKind::AddShortcutParallel,
            ]),
            other => out.push(other.parse()?),
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn one() -> usize {
    1
}

/// One parameterized strategy use. Node ids refer to the network the
/// application is applied to.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StrategyApplication {
    WidenLayer {
        node: NodeId,
        channels: usize,
        seed: u64,
    },
    DeepenLayer {
        edge: [NodeId; 2],
        kernel: usize,
        batchnorm: bool,
        activation: Activation,
        seed: u64,
    },
    WidenKernel {
        node: NodeId,
        kernel: [usize; 2],
        seed: u64,
    },
    ReplaceAvgpool {
        node: NodeId,
        seed: u64,
    },
    ReplaceSkip {
        edge: [NodeId; 2],
        kernel: usize,
        seed: u64,
    },
    AddShortcutSequential {
        edge: [NodeId; 2],
        seed: u64,
    },
    AddShortcutParallel {
        edge: [NodeId; 2],
        seed: u64,
    },
    AddBranch {
        edge: [NodeId; 2],
        kernel: usize,
        batchnorm: bool,
        activation: Activation,
        #[serde(default = "one")]
        stride: usize,
        seed: u64,
    },
}

impl StrategyApplication {
    pub fn kind(&self) -> StrategyKind {
        match self {
            StrategyApplication::WidenLayer { .. } => StrategyKind::WidenLayer,
            StrategyApplication::DeepenLayer { .. } => StrategyKind::DeepenLayer,
            StrategyApplication::WidenKernel { .. } => StrategyKind::WidenKernel,
            StrategyApplication::ReplaceAvgpool { .. } => StrategyKind::ReplaceAvgpool,
            StrategyApplication::ReplaceSkip { .. } => StrategyKind::ReplaceSkip,
            StrategyApplication::AddShortcutSequential { .. } => StrategyKind::AddShortcutSequential,
            StrategyApplication::AddShortcutParallel { .. } => StrategyKind::AddShortcutParallel,
            StrategyApplication::AddBranch { .. } => StrategyKind::AddBranch,
        }
    }

    pub fn seed(&self) -> u64 {
        match *self {
            StrategyApplication::WidenLayer { seed, .. }
            | StrategyApplication::DeepenLayer { seed, .. }
            | StrategyApplication::WidenKernel { seed, .. }
            | StrategyApplication::ReplaceAvgpool { seed, .. }
            | StrategyApplication::ReplaceSkip { seed, .. }
            | StrategyApplication::AddShortcutSequential { seed, .. }
            | StrategyApplication::AddShortcutParallel { seed, .. }
            | StrategyApplication::AddBranch { seed, .. } => seed,
        }
    }

    pub fn with_seed(&self, new: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            StrategyApplication::WidenLayer { seed, .. }
            | StrategyApplication::DeepenLayer { seed, .. }
            | StrategyApplication::WidenKernel { seed, .. }
            | StrategyApplication::ReplaceAvgpool { seed, .. }
            | StrategyApplication::ReplaceSkip { seed, .. }
            | StrategyApplication::AddShortcutSequential { seed, .. }
            | StrategyApplication::AddShortcutParallel { seed, .. }
            | StrategyApplication::AddBranch { seed, .. } => *seed = new,
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObfuscationPlan {
    pub applications: Vec<StrategyApplication>,
}

impl ObfuscationPlan {
    pub fn new(applications: Vec<StrategyApplication>) -> Self {
        ObfuscationPlan { applications }
    }

    pub fn len(&self) -> usize {
        self.applications.len()
    }

    pub fn is_empty(&self) -> bool {
        self.applications.is_empty()
    }

    /// The plan with every seed zeroed: its structural identity.
    pub fn unseeded(&self) -> ObfuscationPlan {
        ObfuscationPlan::new(self.applications.iter().map(|a| a.with_seed(0)).collect())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanDoc {
    schema: String,
    applications: Vec<StrategyApplication>,
}

impl Serialize for ObfuscationPlan {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PlanDoc {
            schema: PLAN_SCHEMA.to_string(),
            applications: self.applications.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ObfuscationPlan {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = PlanDoc::deserialize(d)?;
        if doc.schema != PLAN_SCHEMA {
            return Err(serde::de::Error::custom(format!(
                "schema must be \"{PLAN_SCHEMA}\", found \"{}\"",
                doc.schema
            )));
        }
        Ok(ObfuscationPlan::new(doc.applications))
    }
}

pub fn parse_plan(text: &str) -> Result<ObfuscationPlan, String> {
    serde_json::from_str(text).map_err(|e| e.to_string())
}

/// Indented JSON with sorted keys.
pub fn serialize_plan(plan: &ObfuscationPlan) -> String {
    let value = serde_json::to_value(plan).expect("plans serialize");
    serde_json::to_string_pretty(&value).expect("json value serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ObfuscationPlan {
        ObfuscationPlan::new(vec![
            StrategyApplication::DeepenLayer {
                edge: [0, 1],
                kernel: 3,
                batchnorm: true,
                activation: Activation::Relu,
                seed: 4,
            },
            StrategyApplication::AddShortcutParallel { edge: [1, 2], seed: 0 },
            StrategyApplication::AddBranch {
                edge: [0, 2],
                kernel: 1,
                batchnorm: false,
                activation: Activation::None,
                stride: 1,
                seed: 9,
            },
        ])
    }

    #[test]
    fn plan_round_trip() {
        let text = serialize_plan(&sample());
        assert!(text.contains("\"kind\": \"deepen-layer\""));
        let back = parse_plan(&text).unwrap();
        assert_eq!(back, sample());
        assert_eq!(serialize_plan(&back), text);
    }

    #[test]
    fn branch_stride_defaults_to_one() {
        let text = r#"{"schema":"obfunas-plan/v1","applications":[{"kind":"add-branch","edge":[0,1],"kernel":3,"batchnorm":false,"activation":"relu","seed":1}]}"#;
        let plan = parse_plan(text).unwrap();
        assert!(matches!(plan.applications[0], StrategyApplication::AddBranch { stride: 1, .. }));
    }

    #[test]
    fn rejects_unknown_fields_and_schema() {
        let bad_field = r#"{"schema":"obfunas-plan/v1","applications":[{"kind":"replace-avgpool","node":2,"seed":0,"extra":1}]}"#;
        assert!(parse_plan(bad_field).is_err());
        let bad_schema = r#"{"schema":"obfunas-plan/v0","applications":[]}"#;
        assert!(parse_plan(bad_schema).unwrap_err().contains("schema"));
    }

    #[test]
    fn strategy_sets() {
        let set = parse_strategy_set("add-shortcut, deepen-layer,deepen-layer").unwrap();
        assert_eq!(
            set,
            vec![
                StrategyKind::DeepenLayer,
                StrategyKind::AddShortcutSequential,
                StrategyKind::AddShortcutParallel
            ]
        );
        assert_eq!(parse_strategy_set("all").unwrap().len(), 8);
        assert!(parse_strategy_set("prune").is_err());
    }

    #[test]
    fn unseeded_zeroes_seeds() {
        assert!(sample().unseeded().applications.iter().all(|a| a.seed() == 0));
        assert_eq!(sample().unseeded().len(), 3);
    }
}
