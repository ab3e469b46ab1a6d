use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, LocalDataset};
use crate::overlay::NodeId;
use crate::simnet::derive_seed;

/// Two Gaussian classes with topic-specific means and isotropic noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicSpec {
    pub topic_id: u32,
    pub mean0: Vec<f64>,
    pub mean1: Vec<f64>,
    /// Noise standard deviation per coordinate.
    pub scale: f64,
    pub samples_per_node: usize,
}

impl TopicSpec {
    /// Topic `t` of `topics`: the class means sit at `center ± (separation/2) u_t`
    /// where the directions `u_t` are spread evenly over one shared plane,
    /// and `center` is a topic-specific offset orthogonal to that plane.
    pub fn standard(
        topic_id: u32,
        topics: u32,
        hidden: usize,
        separation: f64,
        scale: f64,
        samples_per_node: usize,
    ) -> Result<Self> {
        if hidden < 3 {
            return Err(Error::invalid("topics need at least 3 feature dimensions"));
        }
        if topics == 0 || topic_id >= topics {
            return Err(Error::invalid(format!(
                "topic {topic_id} out of range for {topics} topics"
            )));
        }
        let angle = TAU * topic_id as f64 / topics as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x7091c, &[topic_id as u64, hidden as u64]));
        let mut center: Vec<f64> = (0..hidden).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        center[0] = 0.0;
        center[1] = 0.0;
        let norm = center.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut center {
            *v /= norm;
        }
        let half = separation / 2.0;
        let mut mean0 = center.clone();
        let mut mean1 = center;
        mean1[0] += half * angle.cos();
        mean1[1] += half * angle.sin();
        mean0[0] -= half * angle.cos();
        mean0[1] -= half * angle.sin();
        let spec = Self {
            topic_id,
            mean0,
            mean1,
            scale,
            samples_per_node,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn hidden(&self) -> usize {
        self.mean0.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean0.len() != self.mean1.len() || self.mean0.is_empty() {
            return Err(Error::invalid("class means must have equal, positive length"));
        }
        if self.mean0 == self.mean1 {
            return Err(Error::invalid("class means must differ"));
        }
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(Error::invalid("covariance scale must be finite and non-negative"));
        }
        if self.mean0.iter().chain(&self.mean1).any(|v| !v.is_finite()) {
            return Err(Error::invalid("class means must be finite"));
        }
        Ok(())
    }

    /// Draws `n` examples; labels are fair coin flips.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Example> {
        (0..n)
            .map(|_| {
                let y = usize::from(rng.random_bool(0.5));
                let mean = if y == 1 { &self.mean1 } else { &self.mean0 };
                let x = mean
                    .iter()
                    .map(|m| m + self.scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Example { x, y }
            })
            .collect()
    }
}

fn node_rng(seed: u64, topic: u32, id: NodeId) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[topic as u64, (id.0 >> 64) as u64, id.0 as u64]))
}

/// One dataset per node, each drawn from a generator keyed by
/// `(seed, topic, node id)`.
pub fn generate_topic_data(spec: &TopicSpec, nodes: &[NodeId], seed: u64) -> Result<BTreeMap<NodeId, LocalDataset>> {
    spec.validate()?;
    Ok(nodes
        .iter()
        .map(|&id| {
            let mut rng = node_rng(seed, spec.topic_id, id);
            (
                id,
                LocalDataset::new(spec.sample(spec.samples_per_node, &mut rng), spec.topic_id),
            )
        })
        .collect())
}

/// Held-out examples for one topic, independent of every node's stream.
pub fn generate_test_set(spec: &TopicSpec, n: usize, seed: u64) -> Result<Vec<Example>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[spec.topic_id as u64, u64::MAX]));
    Ok(spec.sample(n, &mut rng))
}
