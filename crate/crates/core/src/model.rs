//! Linear classification head over precomputed feature vectors, with the
//! personalized proximal objective used for local fine-tuning.
//!
//! The local loss for node `n` is
//!
//! ```text
//! mean_{(x,y) in D_n} [ -log softmax(W x + b)_y ]  +  (lambda / 2) * ||w_per - w_cla||^2
//! ```
//!
//! where `w_cla` is the shared head and `w_per` the node's personal copy.
//! Both are updated by the same gradient steps.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LABELS: usize = 2;
pub const DEFAULT_HIDDEN: usize = 32;

/// Weight matrix (`labels x hidden`, row-major) plus bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    labels: usize,
    hidden: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(labels: usize, hidden: usize) -> Self {
        Self {
            labels,
            hidden,
            weights: vec![0.0; labels * hidden],
            bias: vec![0.0; labels],
        }
    }

    pub fn new(labels: usize, hidden: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if labels == 0 || hidden == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if weights.len() != labels * hidden || bias.len() != labels {
            return Err(Error::invalid(format!(
                "expected {labels}x{hidden} weights and {labels} biases, got {} and {}",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            labels,
            hidden,
            weights,
            bias,
        })
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(labels: usize, hidden: usize, scale: f64, rng: &mut R) -> Self {
        let mut draw = || rng.random_range(-scale..=scale);
        let weights = (0..labels * hidden).map(|_| draw()).collect();
        let bias = (0..labels).map(|_| draw()).collect();
        Self {
            labels,
            hidden,
            weights,
            bias,
        }
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn row(&self, label: usize) -> &[f64] {
        &self.weights[label * self.hidden..(label + 1) * self.hidden]
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.labels == other.labels && self.hidden == other.hidden
    }

    fn check_shape(&self, other: &ModelParams) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.labels, self.hidden, other.labels, other.hidden
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// Every parameter, weights first.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().chain(&self.bias).copied()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        assert!(self.same_shape(other), "axpy on mismatched shapes");
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.values_mut() {
            *v *= alpha;
        }
    }

    /// `self - other`.
    pub fn sub(&self, other: &ModelParams) -> ModelParams {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn squared_distance(&self, other: &ModelParams) -> f64 {
        self.values().zip(other.values()).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Size of [`ModelParams::to_bytes`].
    pub fn byte_len(&self) -> usize {
        16 + 8 * self.len()
    }

    /// `labels` and `hidden` as little-endian u64, then weights and biases
    /// as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&(self.labels as u64).to_le_bytes());
        out.extend_from_slice(&(self.hidden as u64).to_le_bytes());
        for v in self.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = |i: usize| -> Result<usize> {
            let raw: [u8; 8] = bytes
                .get(i * 8..i * 8 + 8)
                .and_then(|s| s.try_into().ok())
                .ok_or_else(|| Error::invalid("truncated model header"))?;
            usize::try_from(u64::from_le_bytes(raw)).map_err(|_| Error::invalid("dimension overflow"))
        };
        let (labels, hidden) = (header(0)?, header(1)?);
        let count = labels
            .checked_mul(hidden)
            .and_then(|n| n.checked_add(labels))
            .ok_or_else(|| Error::invalid("dimension overflow"))?;
        let body = &bytes[16..];
        if body.len() != count * 8 {
            return Err(Error::invalid(format!(
                "expected {} payload bytes, got {}",
                count * 8,
                body.len()
            )));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let weights: Vec<f64> = values.by_ref().take(labels * hidden).collect();
        let bias: Vec<f64> = values.collect();
        ModelParams::new(labels, hidden, weights, bias)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProximalNorm {
    /// `(lambda / 2) * ||d||^2`
    #[default]
    Squared,
    /// `(lambda / 2) * ||d||`, subgradient 0 at `d = 0`.
    Plain,
}

/// A node's personalized head and its local optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalState {
    pub w_per: ModelParams,
    pub lambda: f64,
    pub eta_local: f64,
    #[serde(default)]
    pub norm: ProximalNorm,
}

impl PersonalState {
    pub fn new(w_per: ModelParams, lambda: f64, eta_local: f64) -> Self {
        Self {
            w_per,
            lambda,
            eta_local,
            norm: ProximalNorm::Squared,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalDataset {
    pub examples: Vec<Example>,
    pub topic_id: u32,
}

impl LocalDataset {
    pub fn new(examples: Vec<Example>, topic_id: u32) -> Self {
        Self { examples, topic_id }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Class probabilities: softmax of `W x + b`, max-subtracted.
pub fn forward(x: &[f64], w: &ModelParams) -> Result<Vec<f64>> {
    let logits = logits(x, w)?;
    Ok(softmax(&logits))
}

fn logits(x: &[f64], w: &ModelParams) -> Result<Vec<f64>> {
    if x.len() != w.hidden {
        return Err(Error::invalid(format!(
            "feature length {} but model expects {}",
            x.len(),
            w.hidden
        )));
    }
    Ok((0..w.labels)
        .map(|l| w.row(l).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w.bias[l])
        .collect())
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Most probable label; ties go to the smaller label.
pub fn predict(x: &[f64], w: &ModelParams) -> Result<usize> {
    let p = forward(x, w)?;
    Ok(argmax(&p))
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(data: &[Example], w: &ModelParams) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let mut hits = 0usize;
    for ex in data {
        hits += usize::from(predict(&ex.x, w)? == ex.y);
    }
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub cross_entropy: f64,
    pub proximal: f64,
    pub total: f64,
}

fn check_inputs(data: &[Example], w_cla: &ModelParams, personal: &PersonalState) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    w_cla.check_shape(&personal.w_per)?;
    if !w_cla.is_finite() || !personal.w_per.is_finite() || !personal.lambda.is_finite() {
        return Err(Error::invalid("non-finite parameter"));
    }
    if personal.lambda < 0.0 {
        return Err(Error::invalid("lambda must be non-negative"));
    }
    for ex in data {
        if ex.y >= w_cla.labels {
            return Err(Error::invalid(format!("label {} out of range", ex.y)));
        }
    }
    Ok(())
}

/// Mean negative log-likelihood under `w`.
pub fn cross_entropy(data: &[Example], w: &ModelParams) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut total = 0.0;
    for ex in data {
        let lp = log_softmax(&logits(&ex.x, w)?);
        total -= lp[ex.y];
    }
    Ok(total / data.len() as f64)
}

fn proximal(personal: &PersonalState, w_cla: &ModelParams) -> f64 {
    let sq = personal.w_per.squared_distance(w_cla);
    match personal.norm {
        ProximalNorm::Squared => 0.5 * personal.lambda * sq,
        ProximalNorm::Plain => 0.5 * personal.lambda * sq.sqrt(),
    }
}

/// Local objective with its two terms reported separately.
pub fn pfl_loss_parts(data: &LocalDataset, w_cla: &ModelParams, personal: &PersonalState) -> Result<LossParts> {
    check_inputs(&data.examples, w_cla, personal)?;
    let ce = cross_entropy(&data.examples, w_cla)?;
    let prox = proximal(personal, w_cla);
    Ok(LossParts {
        cross_entropy: ce,
        proximal: prox,
        total: ce + prox,
    })
}

pub fn pfl_loss(data: &LocalDataset, w_cla: &ModelParams, personal: &PersonalState) -> Result<f64> {
    pfl_loss_parts(data, w_cla, personal).map(|p| p.total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PflGrad {
    pub w_cla: ModelParams,
    pub w_per: ModelParams,
}

/// Gradient of the cross-entropy term over `data` with respect to `w`.
fn cross_entropy_grad(data: &[Example], w: &ModelParams) -> Result<ModelParams> {
    let mut g = ModelParams::zeros(w.labels, w.hidden);
    for ex in data {
        let p = forward(&ex.x, w)?;
        for (l, pl) in p.iter().enumerate() {
            let r = pl - if l == ex.y { 1.0 } else { 0.0 };
            g.bias[l] += r;
            let row = &mut g.weights[l * w.hidden..(l + 1) * w.hidden];
            for (gi, xi) in row.iter_mut().zip(&ex.x) {
                *gi += r * xi;
            }
        }
    }
    g.scale(1.0 / data.len() as f64);
    Ok(g)
}

/// Gradient of the proximal term with respect to `w_per`; the gradient
/// with respect to `w_cla` is its negation.
fn proximal_grad(personal: &PersonalState, w_cla: &ModelParams) -> ModelParams {
    let mut d = personal.w_per.sub(w_cla);
    let coef = match personal.norm {
        ProximalNorm::Squared => personal.lambda,
        ProximalNorm::Plain => {
            let n = d.norm();
            if n == 0.0 {
                0.0
            } else {
                0.5 * personal.lambda / n
            }
        }
    };
    d.scale(coef);
    d
}

fn pfl_grad_on(data: &[Example], w_cla: &ModelParams, personal: &PersonalState, data_term: bool) -> Result<PflGrad> {
    let prox = proximal_grad(personal, w_cla);
    let mut g_cla = if data_term {
        cross_entropy_grad(data, w_cla)?
    } else {
        ModelParams::zeros(w_cla.labels, w_cla.hidden)
    };
    g_cla.axpy(-1.0, &prox);
    Ok(PflGrad {
        w_cla: g_cla,
        w_per: prox,
    })
}

/// Exact gradient of [`pfl_loss`] with respect to both heads.
pub fn pfl_grad(data: &LocalDataset, w_cla: &ModelParams, personal: &PersonalState) -> Result<PflGrad> {
    check_inputs(&data.examples, w_cla, personal)?;
    pfl_grad_on(&data.examples, w_cla, personal, true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Off only in tests that isolate the proximal pull.
    pub data_term: bool,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            batch: 32,
            data_term: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    /// `w_start - w_final`.
    pub delta: ModelParams,
    pub weights: ModelParams,
    pub personal: PersonalState,
}

/// Runs `steps` mini-batch gradient steps on the local objective, moving
/// `w_cla` and `w_per` together. A batch equal to the dataset size uses the
/// whole dataset in order; smaller batches are drawn without replacement.
pub fn local_finetune<R: Rng + ?Sized>(
    data: &LocalDataset,
    w_start: &ModelParams,
    personal: &PersonalState,
    cfg: &LocalTrainConfig,
    rng: &mut R,
) -> Result<FinetuneOutcome> {
    check_inputs(&data.examples, w_start, personal)?;
    if cfg.steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    if cfg.batch == 0 || cfg.batch > data.len() {
        return Err(Error::invalid(format!("batch {} not in 1..={}", cfg.batch, data.len())));
    }
    if !(personal.eta_local.is_finite() && personal.eta_local >= 0.0) {
        return Err(Error::invalid("eta_local must be finite and non-negative"));
    }
    let eta = personal.eta_local;
    let mut w = w_start.clone();
    let mut state = personal.clone();
    let mut batch: Vec<Example> = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.steps {
        let g = if cfg.batch == data.len() {
            pfl_grad_on(&data.examples, &w, &state, cfg.data_term)?
        } else {
            batch.clear();
            batch.extend(
                index::sample(rng, data.len(), cfg.batch)
                    .into_iter()
                    .map(|i| data.examples[i].clone()),
            );
            pfl_grad_on(&batch, &w, &state, cfg.data_term)?
        };
        w.axpy(-eta, &g.w_cla);
        state.w_per.axpy(-eta, &g.w_per);
    }
    Ok(FinetuneOutcome {
        delta: w_start.sub(&w),
        weights: w,
        personal: state,
    })
}
