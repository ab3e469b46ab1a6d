use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simnet::LinkModel;

use super::{DisseminationSpec, ScenarioConfig, TopicAssignment};

/// Grid axes over the base scenario; an empty axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioGrid {
    pub nodes: Vec<usize>,
    pub data_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub assignments: Vec<TopicAssignment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisseminationGrid {
    pub nodes: Vec<usize>,
    pub bytes: Vec<u64>,
    #[serde(default = "one")]
    pub trees: Vec<usize>,
    #[serde(default = "one_seed")]
    pub seeds: Vec<u64>,
    #[serde(default = "sixteen")]
    pub fanout: usize,
    #[serde(default)]
    pub link: LinkModel,
}

fn one() -> Vec<usize> {
    vec![1]
}

fn one_seed() -> Vec<u64> {
    vec![1]
}

fn sixteen() -> usize {
    16
}

/// A base scenario plus the axes to vary. Either part may be absent, but
/// not both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub scenario: Option<ScenarioConfig>,
    #[serde(default)]
    pub grid: ScenarioGrid,
    #[serde(default)]
    pub dissemination: Option<DisseminationGrid>,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SweepConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.scenario.is_none() && cfg.dissemination.is_none() {
            return Err(Error::Config(
                "sweep needs a [scenario] or a [dissemination] section".into(),
            ));
        }
        if cfg.scenario.is_none() && cfg.grid != ScenarioGrid::default() {
            return Err(Error::Config("[grid] needs a base [scenario]".into()));
        }
        Ok(cfg)
    }

    /// Every grid point as a validated scenario, in grid order.
    pub fn scenarios(&self) -> Result<Vec<ScenarioConfig>> {
        let Some(base) = &self.scenario else {
            return Ok(Vec::new());
        };
        let mut out = Vec::new();
        for assignment in axis(&self.grid.assignments, base.assignment) {
            for nodes in axis(&self.grid.nodes, base.nodes) {
                for size in axis(&self.grid.data_sizes, base.topics.samples_per_node) {
                    for seed in axis(&self.grid.seeds, base.seed) {
                        let mut cfg = base.clone();
                        cfg.name = None;
                        cfg.assignment = assignment;
                        cfg.nodes = nodes;
                        cfg.topics.samples_per_node = size;
                        cfg.seed = seed;
                        cfg.validate()?;
                        out.push(cfg);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn dissemination_specs(&self) -> Result<Vec<DisseminationSpec>> {
        let Some(g) = &self.dissemination else {
            return Ok(Vec::new());
        };
        let mut out = Vec::new();
        for &trees in &g.trees {
            for &nodes in &g.nodes {
                for &bytes in &g.bytes {
                    for &seed in &g.seeds {
                        let spec = DisseminationSpec {
                            nodes,
                            trees,
                            concurrent: trees,
                            fanout: g.fanout,
                            intercept: true,
                            bytes,
                            seed,
                            link: g.link,
                        };
                        spec.validate()?;
                        out.push(spec);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_expands_in_order() {
        let text = "[scenario]\nseed = 1\n[grid]\ndata_sizes = [200, 2000]\nseeds = [1, 2, 3]\nassignments = [\"single_topic_per_tree\", \"mixed\"]\n";
        let sweep = SweepConfig::from_toml(text).unwrap();
        let s = sweep.scenarios().unwrap();
        assert_eq!(s.len(), 12);
        assert_eq!((s[0].topics.samples_per_node, s[0].seed), (200, 1));
        assert_eq!((s[4].topics.samples_per_node, s[4].seed), (2000, 2));
        assert_eq!(s[11].assignment, TopicAssignment::Mixed);
        assert!(s.iter().all(|c| c.nodes == 60));
        assert!(sweep.dissemination_specs().unwrap().is_empty());
    }

    #[test]
    fn dissemination_grid() {
        let text = "[dissemination]\nnodes = [125, 250]\nbytes = [1048576, 2097152]\ntrees = [1, 4]\n";
        let sweep = SweepConfig::from_toml(text).unwrap();
        let specs = sweep.dissemination_specs().unwrap();
        assert_eq!(specs.len(), 8);
        assert!(specs.iter().all(|s| s.concurrent == s.trees));
        assert!(sweep.scenarios().unwrap().is_empty());
    }

    #[test]
    fn rejects_empty_and_unknown() {
        assert!(SweepConfig::from_toml("").is_err());
        assert!(SweepConfig::from_toml("[grid]\nseeds = [1]").is_err());
        assert!(SweepConfig::from_toml("[scenario]\nseed = 1\n[grid]\nsizes = [1]").is_err());
        assert!(SweepConfig::from_toml("[scenario]\nseed = 1\n[grid]\nnodes = [2]")
            .unwrap()
            .scenarios()
            .is_err());
    }
}
