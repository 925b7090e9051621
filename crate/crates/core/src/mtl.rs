//! Multi-task security classifier: a conditional encoder shared by a
//! reconstruction decoder and four task decoders, trained with Adam and
//! hand-written backpropagation.
//!
//! All parameters live in one flat vector in the order encoder, recon
//! decoder, task decoders, then the four `log_sigma_sq` entries. Each dense
//! layer stores its weight matrix row-major as `[out][in]`, followed by its
//! bias.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::{split, DatagenError, Dataset, NormStats};
use crate::evalharness::Confusion;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const PROB_EPS: f64 = 1e-12;
const N_TASKS: usize = 4;

#[derive(Debug, Error)]
pub enum MtlError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("schema hash mismatch: model {model}, data {data}")]
    Schema { model: String, data: String },
    #[error("dataset must be normalized before training")]
    NotNormalized,
    #[error("empty batch or dataset")]
    Empty,
    #[error("invalid task index {0}")]
    Task(usize),
    #[error("model file: {0}")]
    File(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DatagenError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One decoder stack per criterion.
    PerTask,
    /// A single stack with four sigmoid outputs.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_layers: Vec<usize>,
    /// Hidden widths of the reconstruction decoder; `None` mirrors the
    /// encoder's hidden widths.
    pub recon_layers: Option<Vec<usize>>,
    pub task_layers: Vec<usize>,
    pub dropout_rate: f64,
    pub l2_lambda: f64,
    pub recon_weight: f64,
    pub head: HeadKind,
    pub active_tasks: [bool; 4],
    pub class_weighting: bool,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_layers: vec![128, 64, 32],
            recon_layers: None,
            task_layers: vec![32, 16, 1],
            dropout_rate: 0.1,
            l2_lambda: 1e-4,
            recon_weight: 1.0,
            head: HeadKind::PerTask,
            active_tasks: [true; 4],
            class_weighting: true,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), MtlError> {
        let bad = |m: &str| Err(MtlError::Config(m.into()));
        if self.encoder_layers.is_empty() || self.encoder_layers.contains(&0) {
            return bad("encoder_layers must be non-empty positive widths");
        }
        if self.recon_layers.as_ref().is_some_and(|r| r.contains(&0)) {
            return bad("recon_layers widths must be positive");
        }
        if self.task_layers.last() != Some(&1) || self.task_layers.contains(&0) {
            return bad("task_layers must end in width 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if !(self.l2_lambda >= 0.0) || !(self.recon_weight >= 0.0) {
            return bad("l2_lambda and recon_weight must be non-negative");
        }
        if !self.active_tasks.iter().any(|&a| a) {
            return bad("at least one task must be active");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must be in (0, 1)");
        }
        Ok(())
    }

    pub fn latent_m(&self) -> usize {
        *self.encoder_layers.last().unwrap()
    }

    pub fn recon_hidden(&self) -> Vec<usize> {
        match &self.recon_layers {
            Some(r) => r.clone(),
            None => {
                let e = &self.encoder_layers;
                e[..e.len() - 1].iter().rev().copied().collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub eta0: f64,
    pub gamma: f64,
    pub k_s: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub adam: AdamConfig,
    pub patience: usize,
    pub weighting: Weighting,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta0: 1e-3,
            gamma: 0.95,
            k_s: 10,
            batch_size: 64,
            max_epochs: 200,
            adam: AdamConfig::default(),
            patience: 10,
            weighting: Weighting::Adaptive,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MtlError> {
        let bad = |m: &str| Err(MtlError::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if self.patience == 0 || self.k_s == 0 || self.batch_size == 0 {
            return bad("patience, k_s and batch_size must be at least 1");
        }
        if !(self.eta0 > 0.0) {
            return bad("eta0 must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.b1) || !(0.0..1.0).contains(&a.b2) || !(a.eps > 0.0) {
            return bad("adam moments must be in [0, 1) and eps positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Act {
    Relu,
    Linear,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layer {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
    act: Act,
}

type Stack = Vec<Layer>;

fn build_stack(off: &mut usize, n_in: usize, widths: &[usize], last: Act) -> Stack {
    let mut prev = n_in;
    let mut out = Vec::with_capacity(widths.len());
    for (i, &w) in widths.iter().enumerate() {
        let act = if i + 1 == widths.len() { last } else { Act::Relu };
        let layer = Layer {
            n_in: prev,
            n_out: w,
            w: *off,
            b: *off + w * prev,
            act,
        };
        *off = layer.b + w;
        out.push(layer);
        prev = w;
    }
    out
}

fn stack_range(stack: &Stack) -> Range<usize> {
    stack.first().map_or(0, |l| l.w)..stack.last().map_or(0, |l| l.b + l.n_out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtlModel {
    pub config: ModelConfig,
    pub feature_dim: usize,
    pub cond_dim: usize,
    pub class_beta: [f64; 4],
    pub norm_stats: Option<NormStats>,
    pub schema_hash: String,
    /// Every parameter, including `log_sigma_sq` at the end.
    pub theta: Vec<f64>,
    encoder: Stack,
    recon: Stack,
    heads: Vec<Stack>,
    sigma: usize,
}

/// He-initialised model; biases and `log_sigma_sq` start at zero.
pub fn init_model(mcfg: &ModelConfig, feature_dim: usize, cond_dim: usize) -> Result<MtlModel, MtlError> {
    mcfg.validate()?;
    if feature_dim == 0 {
        return Err(MtlError::Config("feature_dim must be positive".into()));
    }
    let mut off = 0;
    let encoder = build_stack(&mut off, feature_dim + cond_dim, &mcfg.encoder_layers, Act::Relu);
    let mut rw = mcfg.recon_hidden();
    rw.push(feature_dim);
    let recon = build_stack(&mut off, mcfg.latent_m() + cond_dim, &rw, Act::Linear);
    let heads = match mcfg.head {
        HeadKind::PerTask => (0..N_TASKS)
            .map(|_| build_stack(&mut off, mcfg.latent_m(), &mcfg.task_layers, Act::Sigmoid))
            .collect(),
        HeadKind::Joint => {
            let mut w = mcfg.task_layers.clone();
            *w.last_mut().unwrap() = N_TASKS;
            vec![build_stack(&mut off, mcfg.latent_m(), &w, Act::Sigmoid)]
        }
    };
    let sigma = off;
    let mut theta = vec![0.0; sigma + N_TASKS];
    let mut rng = ChaCha20Rng::seed_from_u64(mcfg.seed);
    for layer in encoder.iter().chain(&recon).chain(heads.iter().flatten()) {
        let std = (2.0 / layer.n_in as f64).sqrt();
        for v in &mut theta[layer.w..layer.b] {
            let z: f64 = rng.sample(StandardNormal);
            *v = std * z;
        }
    }
    Ok(MtlModel {
        config: mcfg.clone(),
        feature_dim,
        cond_dim,
        class_beta: [0.5; 4],
        norm_stats: None,
        schema_hash: String::new(),
        theta,
        encoder,
        recon,
        heads,
        sigma,
    })
}

/// A batch in model units: normalised features, condition vectors, and
/// label bits (1 = secure) as 0/1 reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Array2<f64>,
    pub c: Array2<f64>,
    pub y: Array2<f64>,
}

impl Batch {
    pub fn from_dataset(ds: &Dataset) -> Self {
        Batch::from_indices(ds, &(0..ds.len()).collect::<Vec<_>>())
    }

    pub fn from_indices(ds: &Dataset, idx: &[usize]) -> Self {
        let d = ds.layout.feature_dim();
        let cd = ds.layout.cond_dim();
        let mut x = Array2::zeros((idx.len(), d));
        let mut c = Array2::zeros((idx.len(), cd));
        let mut y = Array2::zeros((idx.len(), N_TASKS));
        for (r, &i) in idx.iter().enumerate() {
            let s = &ds.samples[i];
            x.row_mut(r).assign(&Array1::from(s.x.clone()));
            c.row_mut(r).assign(&Array1::from(s.c.clone()));
            for (t, b) in s.y.bits().iter().enumerate() {
                y[(r, t)] = *b as u8 as f64;
            }
        }
        Batch { x, c, y }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean weighted cross-entropy per task, before the task weight.
    pub task: [f64; 4],
    pub alpha: [f64; 4],
    pub recon: f64,
    pub l2: f64,
    pub sigma_penalty: f64,
}

struct StackCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    out: Array2<f64>,
}

struct Forward {
    enc: StackCache,
    rec: StackCache,
    heads: Vec<StackCache>,
    /// `n × 4` secure-class probabilities.
    probs: Array2<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weighted binary cross-entropy of one prediction; `y` is clamped.
pub fn task_loss(y: f64, y_true: f64, beta: f64) -> f64 {
    let y = y.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let mut l = 0.0;
    if y_true != 0.0 {
        l -= beta * y_true * y.ln();
    }
    if y_true != 1.0 {
        l -= (1.0 - beta) * (1.0 - y_true) * (1.0 - y).ln();
    }
    l
}

/// `∂ task_loss / ∂ logit`.
fn task_loss_dlogit(y: f64, y_true: f64, beta: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&y) {
        return 0.0;
    }
    -beta * y_true * (1.0 - y) + (1.0 - beta) * (1.0 - y_true) * y
}

pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.eta0 * cfg.gamma.powf(epoch as f64 / cfg.k_s as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, eta: f64, cfg: &AdamConfig) {
    state.t += 1;
    let c1 = 1.0 - cfg.b1.powi(state.t as i32);
    let c2 = 1.0 - cfg.b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.b1 * state.m[i] + (1.0 - cfg.b1) * g;
        state.v[i] = cfg.b2 * state.v[i] + (1.0 - cfg.b2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= eta * mh / (vh.sqrt() + cfg.eps);
    }
}

impl MtlModel {
    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn log_sigma_sq(&self) -> [f64; 4] {
        let s = &self.theta[self.sigma..self.sigma + N_TASKS];
        [s[0], s[1], s[2], s[3]]
    }

    pub fn set_log_sigma_sq(&mut self, v: [f64; 4]) {
        self.theta[self.sigma..self.sigma + N_TASKS].copy_from_slice(&v);
    }

    pub fn active_tasks(&self) -> [bool; 4] {
        self.config.active_tasks
    }

    /// Parameter ranges covered by the L2 penalty: encoder and task decoders.
    pub fn l2_ranges(&self) -> Vec<Range<usize>> {
        let mut r = vec![stack_range(&self.encoder)];
        r.extend(self.heads.iter().map(stack_range));
        r
    }

    /// Parameter range of the decoder serving task `t`.
    pub fn head_range(&self, t: usize) -> Result<Range<usize>, MtlError> {
        if t >= N_TASKS {
            return Err(MtlError::Task(t));
        }
        Ok(match self.config.head {
            HeadKind::PerTask => stack_range(&self.heads[t]),
            HeadKind::Joint => stack_range(&self.heads[0]),
        })
    }

    pub fn encoder_range(&self) -> Range<usize> {
        stack_range(&self.encoder)
    }

    pub fn recon_range(&self) -> Range<usize> {
        stack_range(&self.recon)
    }

    /// Weight matrix and bias of a layer, for inspection.
    pub fn layer_weights(&self, which: LayerRef) -> Option<(ArrayView2<'_, f64>, &[f64])> {
        let layer = match which {
            LayerRef::Encoder(i) => self.encoder.get(i)?,
            LayerRef::Recon(i) => self.recon.get(i)?,
            LayerRef::Head(h, i) => self.heads.get(h)?.get(i)?,
        };
        let w = ArrayView2::from_shape((layer.n_out, layer.n_in), &self.theta[layer.w..layer.b]).ok()?;
        Some((w, &self.theta[layer.b..layer.b + layer.n_out]))
    }

    fn task_weights(&self, weighting: Weighting) -> [f64; 4] {
        let s = self.log_sigma_sq();
        let mut a = [0.0; 4];
        for t in 0..N_TASKS {
            if self.config.active_tasks[t] {
                a[t] = match weighting {
                    Weighting::Uniform => 1.0,
                    Weighting::Adaptive => 0.5 * (-s[t]).exp(),
                };
            }
        }
        a
    }

    fn check_batch(&self, b: &Batch) -> Result<(), MtlError> {
        if b.is_empty() {
            return Err(MtlError::Empty);
        }
        if b.x.ncols() != self.feature_dim || b.c.ncols() != self.cond_dim {
            return Err(MtlError::Dimension(format!(
                "batch is {}+{}, model expects {}+{}",
                b.x.ncols(),
                b.c.ncols(),
                self.feature_dim,
                self.cond_dim
            )));
        }
        if b.y.ncols() != N_TASKS || b.y.nrows() != b.len() || b.c.nrows() != b.len() {
            return Err(MtlError::Dimension("label matrix shape".into()));
        }
        Ok(())
    }

    fn run_stack(&self, stack: &Stack, input: Array2<f64>, mut drop: Option<&mut ChaCha20Rng>) -> StackCache {
        let p = self.config.dropout_rate;
        let mut cache = StackCache {
            inputs: Vec::with_capacity(stack.len()),
            pre: Vec::with_capacity(stack.len()),
            masks: Vec::with_capacity(stack.len()),
            out: input,
        };
        for layer in stack {
            let w = ArrayView2::from_shape((layer.n_out, layer.n_in), &self.theta[layer.w..layer.b]).unwrap();
            let b = ndarray::ArrayView1::from(&self.theta[layer.b..layer.b + layer.n_out]);
            let input = std::mem::take(&mut cache.out);
            let z = input.dot(&w.t()) + &b;
            let mut a = match layer.act {
                Act::Relu => z.mapv(|v| v.max(0.0)),
                Act::Linear => z.clone(),
                Act::Sigmoid => z.mapv(sigmoid),
            };
            let mask = match (layer.act, drop.as_deref_mut()) {
                (Act::Relu, Some(rng)) if p > 0.0 => {
                    let keep = 1.0 / (1.0 - p);
                    let m = Array2::from_shape_fn(a.raw_dim(), |_| {
                        if rng.random::<f64>() >= p {
                            keep
                        } else {
                            0.0
                        }
                    });
                    a *= &m;
                    Some(m)
                }
                _ => None,
            };
            cache.inputs.push(input);
            cache.pre.push(z);
            cache.masks.push(mask);
            cache.out = a;
        }
        cache
    }

    /// Returns `∂L/∂input`; `d_last` is the gradient at the last layer's
    /// pre-activation when `last_is_pre`, otherwise at its output.
    fn back_stack(
        &self,
        stack: &Stack,
        cache: &StackCache,
        d_last: Array2<f64>,
        last_is_pre: bool,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let mut d = d_last;
        for (i, layer) in stack.iter().enumerate().rev() {
            let dz = if i + 1 == stack.len() && last_is_pre {
                d
            } else {
                match layer.act {
                    Act::Relu => {
                        let mut dz = d;
                        dz.zip_mut_with(&cache.pre[i], |g, &z| {
                            if z <= 0.0 {
                                *g = 0.0
                            }
                        });
                        if let Some(m) = &cache.masks[i] {
                            dz *= m;
                        }
                        dz
                    }
                    Act::Linear => d,
                    Act::Sigmoid => {
                        let mut dz = d;
                        dz.zip_mut_with(&cache.pre[i], |g, &z| {
                            let s = sigmoid(z);
                            *g *= s * (1.0 - s)
                        });
                        dz
                    }
                }
            };
            let dw = dz.t().dot(&cache.inputs[i]);
            for (g, v) in grad[layer.w..layer.b].iter_mut().zip(dw.iter()) {
                *g += v;
            }
            let db = dz.sum_axis(Axis(0));
            for (g, v) in grad[layer.b..layer.b + layer.n_out].iter_mut().zip(db.iter()) {
                *g += v;
            }
            let w = ArrayView2::from_shape((layer.n_out, layer.n_in), &self.theta[layer.w..layer.b]).unwrap();
            d = dz.dot(&w);
        }
        d
    }

    fn forward(&self, x: ArrayView2<f64>, c: ArrayView2<f64>, mut drop: Option<&mut ChaCha20Rng>) -> Forward {
        let input = ndarray::concatenate(Axis(1), &[x, c]).unwrap();
        let enc = self.run_stack(&self.encoder, input, drop.as_deref_mut());
        let rec_in = ndarray::concatenate(Axis(1), &[enc.out.view(), c]).unwrap();
        let rec = self.run_stack(&self.recon, rec_in, drop.as_deref_mut());
        let heads: Vec<StackCache> = self
            .heads
            .iter()
            .map(|h| self.run_stack(h, enc.out.clone(), drop.as_deref_mut()))
            .collect();
        let n = x.nrows();
        let mut probs = Array2::zeros((n, N_TASKS));
        match self.config.head {
            HeadKind::PerTask => {
                for (t, h) in heads.iter().enumerate() {
                    probs.column_mut(t).assign(&h.out.column(0));
                }
            }
            HeadKind::Joint => {
                probs.assign(&heads[0].out);
            }
        }
        Forward {
            enc,
            rec,
            heads,
            probs,
        }
    }

    fn loss_from(&self, f: &Forward, b: &Batch, weighting: Weighting) -> LossBreakdown {
        let n = b.len() as f64;
        let alpha = self.task_weights(weighting);
        let mut out = LossBreakdown {
            alpha,
            ..Default::default()
        };
        for t in 0..N_TASKS {
            if !self.config.active_tasks[t] {
                continue;
            }
            let beta = self.class_beta[t];
            let sum: f64 = f
                .probs
                .column(t)
                .iter()
                .zip(b.y.column(t))
                .map(|(&p, &y)| task_loss(p, y, beta))
                .sum();
            out.task[t] = sum / n;
        }
        let diff = &f.rec.out - &b.x;
        out.recon = diff.iter().map(|v| v * v).sum::<f64>() / n;
        let sq: f64 = self
            .l2_ranges()
            .into_iter()
            .map(|r| self.theta[r].iter().map(|v| v * v).sum::<f64>())
            .sum();
        out.l2 = self.config.l2_lambda * sq;
        if weighting == Weighting::Adaptive {
            let s = self.log_sigma_sq();
            out.sigma_penalty = (0..N_TASKS)
                .filter(|&t| self.config.active_tasks[t])
                .map(|t| 0.5 * s[t])
                .sum();
        }
        out.total = (0..N_TASKS).map(|t| alpha[t] * out.task[t]).sum::<f64>()
            + self.config.recon_weight * out.recon
            + out.l2
            + out.sigma_penalty;
        out
    }

    /// Loss in evaluation mode (no dropout).
    pub fn total_loss(&self, b: &Batch, weighting: Weighting) -> Result<LossBreakdown, MtlError> {
        self.check_batch(b)?;
        let f = self.forward(b.x.view(), b.c.view(), None);
        Ok(self.loss_from(&f, b, weighting))
    }

    /// Loss and its exact gradient with respect to every parameter.
    /// Passing `dropout` draws fresh masks and reuses them in the backward pass.
    pub fn backward(
        &self,
        b: &Batch,
        weighting: Weighting,
        dropout: Option<&mut ChaCha20Rng>,
    ) -> Result<(LossBreakdown, Vec<f64>), MtlError> {
        self.check_batch(b)?;
        let f = self.forward(b.x.view(), b.c.view(), dropout);
        let loss = self.loss_from(&f, b, weighting);
        let n = b.len() as f64;
        let mut grad = vec![0.0; self.theta.len()];
        let m = self.config.latent_m();

        let mut d_logit = Array2::zeros((b.len(), N_TASKS));
        for t in 0..N_TASKS {
            if loss.alpha[t] == 0.0 {
                continue;
            }
            let beta = self.class_beta[t];
            for i in 0..b.len() {
                d_logit[(i, t)] = loss.alpha[t] / n * task_loss_dlogit(f.probs[(i, t)], b.y[(i, t)], beta);
            }
        }
        let mut d_h = Array2::zeros((b.len(), m));
        match self.config.head {
            HeadKind::PerTask => {
                for (t, (stack, cache)) in self.heads.iter().zip(&f.heads).enumerate() {
                    let d = d_logit.slice(s![.., t..t + 1]).to_owned();
                    d_h += &self.back_stack(stack, cache, d, true, &mut grad);
                }
            }
            HeadKind::Joint => {
                d_h += &self.back_stack(&self.heads[0], &f.heads[0], d_logit, true, &mut grad);
            }
        }
        let d_rec = (&f.rec.out - &b.x) * (2.0 * self.config.recon_weight / n);
        let d_rec_in = self.back_stack(&self.recon, &f.rec, d_rec, true, &mut grad);
        d_h += &d_rec_in.slice(s![.., ..m]);
        self.back_stack(&self.encoder, &f.enc, d_h, false, &mut grad);

        let lam = self.config.l2_lambda;
        if lam > 0.0 {
            for r in self.l2_ranges() {
                for i in r {
                    grad[i] += 2.0 * lam * self.theta[i];
                }
            }
        }
        if weighting == Weighting::Adaptive {
            for t in 0..N_TASKS {
                if self.config.active_tasks[t] {
                    grad[self.sigma + t] = -loss.alpha[t] * loss.task[t] + 0.5;
                }
            }
        }
        Ok((loss, grad))
    }

    fn check_inputs(&self, x: ArrayView2<f64>, c: ArrayView2<f64>) -> Result<(), MtlError> {
        if x.ncols() != self.feature_dim || c.ncols() != self.cond_dim || x.nrows() != c.nrows() {
            return Err(MtlError::Dimension(format!(
                "inputs {}x{} and {}x{}, model expects {} + {} columns",
                x.nrows(),
                x.ncols(),
                c.nrows(),
                c.ncols(),
                self.feature_dim,
                self.cond_dim
            )));
        }
        Ok(())
    }

    /// Latent codes for normalised inputs.
    pub fn encode(&self, x: ArrayView2<f64>, c: ArrayView2<f64>) -> Result<Array2<f64>, MtlError> {
        self.check_inputs(x, c)?;
        let input = ndarray::concatenate(Axis(1), &[x, c]).unwrap();
        Ok(self.run_stack(&self.encoder, input, None).out)
    }

    pub fn reconstruct(&self, h: ArrayView2<f64>, c: ArrayView2<f64>) -> Result<Array2<f64>, MtlError> {
        if h.ncols() != self.config.latent_m() || c.ncols() != self.cond_dim || h.nrows() != c.nrows() {
            return Err(MtlError::Dimension("latent or condition width".into()));
        }
        let input = ndarray::concatenate(Axis(1), &[h, c]).unwrap();
        Ok(self.run_stack(&self.recon, input, None).out)
    }

    /// Probability that criterion `t` (0-based, task order) is secure.
    pub fn decode_task(&self, h: ArrayView2<f64>, t: usize) -> Result<Array1<f64>, MtlError> {
        if t >= N_TASKS {
            return Err(MtlError::Task(t));
        }
        if h.ncols() != self.config.latent_m() {
            return Err(MtlError::Dimension("latent width".into()));
        }
        Ok(match self.config.head {
            HeadKind::PerTask => self.run_stack(&self.heads[t], h.to_owned(), None).out.column(0).to_owned(),
            HeadKind::Joint => self.run_stack(&self.heads[0], h.to_owned(), None).out.column(t).to_owned(),
        })
    }

    /// Predictions for normalised inputs.
    pub fn predict_normalized(&self, x: ArrayView2<f64>, c: ArrayView2<f64>) -> Result<Vec<Prediction>, MtlError> {
        self.check_inputs(x, c)?;
        let f = self.forward(x, c, None);
        let thr = self.config.threshold;
        let active = self.config.active_tasks;
        Ok((0..x.nrows())
            .map(|i| {
                let mut prob = [1.0; 4];
                let mut label = [true; 4];
                for t in 0..N_TASKS {
                    if active[t] {
                        prob[t] = f.probs[(i, t)];
                        label[t] = prob[t] >= thr;
                    }
                }
                let recon_error = x
                    .row(i)
                    .iter()
                    .zip(f.rec.out.row(i))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    / self.feature_dim as f64;
                Prediction {
                    prob,
                    label,
                    overall_secure: label.iter().all(|&l| l),
                    active,
                    latent: f.enc.out.row(i).to_vec(),
                    recon_error,
                }
            })
            .collect())
    }

    /// Prediction for one operating point in original units.
    pub fn predict(&self, x_raw: &[f64], c: &[f64]) -> Result<Prediction, MtlError> {
        let stats = self
            .norm_stats
            .as_ref()
            .ok_or_else(|| MtlError::Config("model has no normalization statistics".into()))?;
        if x_raw.len() != self.feature_dim || c.len() != self.cond_dim {
            return Err(MtlError::Dimension("input lengths".into()));
        }
        let x = Array2::from_shape_vec((1, self.feature_dim), stats.apply(x_raw)).unwrap();
        let c = Array2::from_shape_vec((1, self.cond_dim), c.to_vec()).unwrap();
        Ok(self.predict_normalized(x.view(), c.view())?.remove(0))
    }

    /// Predictions for a dataset, either raw or normalised with this
    /// model's statistics.
    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<Prediction>, MtlError> {
        if ds.schema_hash != self.schema_hash {
            return Err(MtlError::Schema {
                model: self.schema_hash.clone(),
                data: ds.schema_hash.clone(),
            });
        }
        let batch = match (&ds.norm_stats, &self.norm_stats) {
            (Some(a), Some(b)) if a == b => Batch::from_dataset(ds),
            (Some(_), _) => {
                return Err(MtlError::Config(
                    "dataset was normalized with different statistics".into(),
                ))
            }
            (None, Some(stats)) => Batch::from_dataset(&crate::datagen::normalize(ds, Some(stats))?),
            (None, None) => Batch::from_dataset(ds),
        };
        self.predict_normalized(batch.x.view(), batch.c.view())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRef {
    Encoder(usize),
    Recon(usize),
    Head(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub prob: [f64; 4],
    pub label: [bool; 4],
    pub overall_secure: bool,
    /// Tasks the model was trained on; inactive tasks report secure.
    pub active: [bool; 4],
    pub latent: Vec<f64>,
    pub recon_error: f64,
}

/// Class weight per task: the fraction of insecure samples, clamped away
/// from 0 and 1.
pub fn class_beta_from(y: &Array2<f64>) -> [f64; 4] {
    let n = y.nrows().max(1) as f64;
    let mut out = [0.5; 4];
    for (t, b) in out.iter_mut().enumerate() {
        let neg = y.column(t).iter().filter(|&&v| v == 0.0).count() as f64;
        *b = (neg / n).clamp(0.01, 0.99);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val_total: f64,
    pub val_f2: [f64; 4],
    pub val_f2_overall: f64,
    pub log_sigma_sq: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub n_train: usize,
    pub n_val: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,lr,train_total,train_static,train_ss,train_volt,train_trans,train_recon,train_l2,train_sigma,\
             val_total,val_f2_static,val_f2_ss,val_f2_volt,val_f2_trans,val_f2_overall,\
             log_sigma_static,log_sigma_ss,log_sigma_volt,log_sigma_trans\n",
        );
        for r in &self.rows {
            let t = &r.train;
            let _ = write!(s, "{},{:?},{:?}", r.epoch, r.lr, t.total);
            for v in t.task {
                let _ = write!(s, ",{v:?}");
            }
            let _ = write!(s, ",{:?},{:?},{:?},{:?}", t.recon, t.l2, t.sigma_penalty, r.val_total);
            for v in r.val_f2 {
                let _ = write!(s, ",{v:?}");
            }
            let _ = write!(s, ",{:?}", r.val_f2_overall);
            for v in r.log_sigma_sq {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), MtlError> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn class_f2(preds: &[Prediction], y: &Array2<f64>) -> ([f64; 4], f64) {
    let mut per = [0.0; 4];
    for (t, out) in per.iter_mut().enumerate() {
        let c = Confusion::from_secure_bits(
            preds.iter().map(|p| p.label[t]),
            y.column(t).iter().map(|&v| v == 1.0),
        );
        *out = c.f2();
    }
    let active = preds.first().map_or([true; 4], |p| p.active);
    let overall = Confusion::from_secure_bits(
        preds.iter().map(|p| p.overall_secure),
        y.rows()
            .into_iter()
            .map(|r| (0..N_TASKS).all(|t| !active[t] || r[t] == 1.0)),
    );
    (per, overall.f2())
}

fn carve_validation(ds: &Dataset, frac: f64, seed: u64) -> (Dataset, Option<Dataset>) {
    if frac <= 0.0 || ds.len() < 4 {
        return (ds.clone(), None);
    }
    match split(ds, frac, seed) {
        Ok((tr, va)) if !va.is_empty() && !tr.is_empty() => (tr, Some(va)),
        _ => {
            log::warn!("stratified validation split failed; using an unstratified split");
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
            let n_val = ((ds.len() as f64 * frac).round() as usize).clamp(1, ds.len() - 1);
            let pick = |s: &[usize]| ds.with_samples(s.iter().map(|&i| ds.samples[i].clone()).collect());
            (pick(&idx[n_val..]), Some(pick(&idx[..n_val])))
        }
    }
}

/// Mini-batch Adam training with per-epoch learning-rate decay, validation
/// tracking and early stopping; the best validation parameters are restored.
pub fn train(train_ds: &Dataset, cfg: &TrainConfig, mcfg: &ModelConfig) -> Result<(MtlModel, TrainReport), MtlError> {
    cfg.validate()?;
    mcfg.validate()?;
    let stats = train_ds.norm_stats.clone().ok_or(MtlError::NotNormalized)?;
    if train_ds.is_empty() {
        return Err(MtlError::Empty);
    }
    let (fit_ds, val_ds) = carve_validation(train_ds, cfg.val_fraction, cfg.seed);
    let fit = Batch::from_dataset(&fit_ds);
    let val = val_ds.as_ref().map(Batch::from_dataset);

    let mut model = init_model(mcfg, train_ds.layout.feature_dim(), train_ds.layout.cond_dim())?;
    model.norm_stats = Some(stats);
    model.schema_hash = train_ds.schema_hash.clone();
    model.class_beta = if mcfg.class_weighting {
        class_beta_from(&fit.y)
    } else {
        [0.5; 4]
    };

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut adam = AdamState::new(model.theta.len());
    let mut order: Vec<usize> = (0..fit.len()).collect();

    let score = |m: &MtlModel| -> Result<(f64, [f64; 4], f64), MtlError> {
        let b = val.as_ref().unwrap_or(&fit);
        let loss = m.total_loss(b, cfg.weighting)?;
        let preds = m.predict_normalized(b.x.view(), b.c.view())?;
        let (f2, overall) = class_f2(&preds, &b.y);
        Ok((loss.total, f2, overall))
    };
    let record = |m: &MtlModel, epoch: usize, lr: f64| -> Result<EpochRow, MtlError> {
        let train = m.total_loss(&fit, cfg.weighting)?;
        let (val_total, val_f2, val_f2_overall) = score(m)?;
        Ok(EpochRow {
            epoch,
            lr,
            train,
            val_total,
            val_f2,
            val_f2_overall,
            log_sigma_sq: m.log_sigma_sq(),
        })
    };

    let mut rows = vec![record(&model, 0, cfg.eta0)?];
    let mut best = (rows[0].val_total, 0usize, model.theta.clone());
    let mut wait = 0;
    let mut stopped_early = false;
    let use_dropout = mcfg.dropout_rate > 0.0;
    for epoch in 1..=cfg.max_epochs {
        let lr = lr_at(epoch - 1, cfg);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let b = Batch {
                x: fit.x.select(Axis(0), chunk),
                c: fit.c.select(Axis(0), chunk),
                y: fit.y.select(Axis(0), chunk),
            };
            let drop = if use_dropout { Some(&mut rng) } else { None };
            let (_, grad) = model.backward(&b, cfg.weighting, drop)?;
            adam_step(&mut model.theta, &grad, &mut adam, lr, &cfg.adam);
        }
        let row = record(&model, epoch, lr)?;
        let vt = row.val_total;
        rows.push(row);
        if vt < best.0 {
            best = (vt, epoch, model.theta.clone());
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    model.theta = best.2;
    let report = TrainReport {
        rows,
        best_epoch: best.1,
        stopped_early,
        n_train: fit.len(),
        n_val: val.as_ref().map_or(0, |v| v.len()),
    };
    Ok((model, report))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    format_version: u32,
    config: ModelConfig,
    feature_dim: usize,
    cond_dim: usize,
    schema_hash: String,
    norm_stats: Option<NormStats>,
    class_beta: [f64; 4],
    log_sigma_sq: [f64; 4],
    layer_order: Vec<String>,
    n_params: usize,
    blob_sha256: String,
}

impl MtlModel {
    fn layer_order(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |name: String, l: &Layer| out.push(format!("{name} w[{}x{}] b[{}]", l.n_out, l.n_in, l.n_out));
        for (i, l) in self.encoder.iter().enumerate() {
            push(format!("encoder.{i}"), l);
        }
        for (i, l) in self.recon.iter().enumerate() {
            push(format!("recon.{i}"), l);
        }
        for (h, stack) in self.heads.iter().enumerate() {
            for (i, l) in stack.iter().enumerate() {
                push(format!("head{h}.{i}"), l);
            }
        }
        out.push("log_sigma_sq[4]".into());
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blob: Vec<u8> = self.theta.iter().flat_map(|v| v.to_le_bytes()).collect();
        let header = ModelHeader {
            format_version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            feature_dim: self.feature_dim,
            cond_dim: self.cond_dim,
            schema_hash: self.schema_hash.clone(),
            norm_stats: self.norm_stats.clone(),
            class_beta: self.class_beta,
            log_sigma_sq: self.log_sigma_sq(),
            layer_order: self.layer_order(),
            n_params: self.theta.len(),
            blob_sha256: hex::encode(Sha256::digest(&blob)),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MtlError> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| MtlError::File("missing header".into()))?;
        let header: ModelHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| MtlError::File(format!("header: {e}")))?;
        if header.format_version != MODEL_FORMAT_VERSION {
            return Err(MtlError::File(format!("unsupported format {}", header.format_version)));
        }
        let blob = &bytes[nl + 1..];
        if hex::encode(Sha256::digest(blob)) != header.blob_sha256 {
            return Err(MtlError::File("parameter blob digest mismatch".into()));
        }
        let mut model = init_model(&header.config, header.feature_dim, header.cond_dim)?;
        if blob.len() != 8 * model.theta.len() || header.n_params != model.theta.len() {
            return Err(MtlError::File("parameter count does not match config".into()));
        }
        for (v, chunk) in model.theta.iter_mut().zip(blob.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        if model.log_sigma_sq() != header.log_sigma_sq {
            return Err(MtlError::File("log_sigma_sq disagrees with blob".into()));
        }
        model.schema_hash = header.schema_hash;
        model.norm_stats = header.norm_stats;
        model.class_beta = header.class_beta;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String, MtlError> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MtlError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(head: HeadKind) -> MtlModel {
        let cfg = ModelConfig {
            encoder_layers: vec![6, 4],
            task_layers: vec![3, 1],
            dropout_rate: 0.0,
            head,
            seed: 7,
            ..Default::default()
        };
        init_model(&cfg, 5, 2).unwrap()
    }

    fn batch(n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Batch {
            x: Array2::from_shape_fn((n, 5), |_| rng.sample(StandardNormal)),
            c: Array2::from_shape_fn((n, 2), |(i, j)| ((i + j) % 2) as f64),
            y: Array2::from_shape_fn((n, 4), |(i, t)| ((i * 7 + t * 3) % 5 < 2) as u8 as f64),
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = tiny(HeadKind::PerTask);
        let b = tiny(HeadKind::PerTask);
        assert_eq!(a.theta, b.theta);
        for (_, bias) in [LayerRef::Encoder(0), LayerRef::Recon(1), LayerRef::Head(3, 1)]
            .into_iter()
            .map(|r| a.layer_weights(r).unwrap())
        {
            assert!(bias.iter().all(|&v| v == 0.0));
        }
        assert_eq!(a.log_sigma_sq(), [0.0; 4]);
    }

    #[test]
    fn initial_weight_spread_follows_fan_in() {
        let cfg = ModelConfig {
            encoder_layers: vec![128, 64],
            task_layers: vec![32, 1],
            seed: 3,
            ..Default::default()
        };
        let m = init_model(&cfg, 70, 10).unwrap();
        for r in [LayerRef::Encoder(0), LayerRef::Encoder(1), LayerRef::Head(2, 0)] {
            let (w, _) = m.layer_weights(r).unwrap();
            let n = w.len() as f64;
            let mean = w.sum() / n;
            let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let want = (2.0 / w.ncols() as f64).sqrt();
            assert!(w.ncols() >= 64);
            assert!((sd / want - 1.0).abs() < 0.1, "{r:?}: {sd} vs {want}");
        }
    }

    #[test]
    fn identity_encoder_is_relu() {
        let cfg = ModelConfig {
            encoder_layers: vec![5],
            task_layers: vec![1],
            seed: 1,
            ..Default::default()
        };
        let mut m = init_model(&cfg, 5, 0).unwrap();
        let l = &m.encoder[0];
        let (w, b) = (l.w, l.b);
        m.theta[w..b].iter_mut().for_each(|v| *v = 0.0);
        for i in 0..5 {
            m.theta[w + i * 5 + i] = 1.0;
        }
        let x = Array2::from_shape_fn((4, 5), |(i, j)| i as f64 - j as f64 * 0.7);
        let c = Array2::zeros((4, 0));
        let h = m.encode(x.view(), c.view()).unwrap();
        assert_eq!(h, x.mapv(|v| v.max(0.0)));
    }

    #[test]
    fn task_outputs_are_open_unit_interval() {
        let m = tiny(HeadKind::PerTask);
        let mut b = batch(32, 9);
        b.x.mapv_inplace(|v| 10.0 * v);
        let h = m.encode(b.x.view(), b.c.view()).unwrap();
        for t in 0..4 {
            assert!(m.decode_task(h.view(), t).unwrap().iter().all(|&p| p > 0.0 && p < 1.0));
        }
        let p = m.predict_normalized(b.x.view(), b.c.view()).unwrap();
        assert_eq!(p, m.predict_normalized(b.x.view(), b.c.view()).unwrap());
        for q in &p {
            assert_eq!(q.overall_secure, q.label.iter().all(|&l| l));
        }
    }

    #[test]
    fn zero_parameters() {
        let mut m = tiny(HeadKind::PerTask);
        m.theta.iter_mut().for_each(|v| *v = 0.0);
        let b = batch(3, 1);
        let h = m.encode(b.x.view(), b.c.view()).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        let xh = m.reconstruct(h.view(), b.c.view()).unwrap();
        assert_eq!(xh.ncols(), 5);
        assert!(xh.iter().all(|&v| v == 0.0));
        for t in 0..4 {
            assert!(m.decode_task(h.view(), t).unwrap().iter().all(|&p| p == 0.5));
        }
        assert!(matches!(m.decode_task(h.view(), 4), Err(MtlError::Task(4))));
        let loss = m.total_loss(&b, Weighting::Uniform).unwrap();
        assert_eq!(loss.l2, 0.0);
    }

    #[test]
    fn bce_examples() {
        assert!((task_loss(0.5, 1.0, 0.5) - 0.34657359).abs() < 1e-8);
        assert!(task_loss(1.0, 1.0, 0.3) < 1e-11);
        assert!(task_loss(0.0, 0.0, 0.3) < 1e-11);
        for y in [0.01, 0.5, 0.99] {
            assert_eq!(task_loss(y, 0.0, 1.0), 0.0);
        }
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig {
            eta0: 1e-3,
            gamma: 0.5,
            k_s: 10,
            ..Default::default()
        };
        assert_eq!(lr_at(0, &cfg), 1e-3);
        assert!((lr_at(10, &cfg) - 5e-4).abs() < 1e-18);
        assert!((lr_at(20, &cfg) - 2.5e-4).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.3, -4.0, 0.0];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &g, &mut st, 1e-2, &cfg);
        assert!((p[0] - (1.0 - 1e-2)).abs() < 1e-9);
        assert!((p[1] - (-2.0 + 1e-2)).abs() < 1e-9);
        assert_eq!(p[2], 0.5);
        let (m, v) = (st.m.clone(), st.v.clone());
        adam_step(&mut p, &[0.0; 3], &mut st, 1e-2, &cfg);
        assert!((st.m[0] - 0.9 * m[0]).abs() < 1e-15 && (st.v[1] - 0.999 * v[1]).abs() < 1e-15);

        let mut twins = vec![0.4, 0.4];
        let mut st = AdamState::new(2);
        for k in 0..5 {
            let g = 0.1 * k as f64 - 0.2;
            adam_step(&mut twins, &[g, g], &mut st, 1e-3, &cfg);
        }
        assert_eq!(twins[0], twins[1]);
    }

    #[test]
    fn adaptive_weights_at_zero_log_sigma() {
        let m = tiny(HeadKind::PerTask);
        let loss = m.total_loss(&batch(4, 2), Weighting::Adaptive).unwrap();
        assert_eq!(loss.alpha, [0.5; 4]);
        assert_eq!(loss.sigma_penalty, 0.0);
    }

    #[test]
    fn perturbing_one_head_leaves_others() {
        let mut m = tiny(HeadKind::PerTask);
        let b = batch(4, 3);
        let h = m.encode(b.x.view(), b.c.view()).unwrap();
        let before: Vec<_> = (0..4).map(|t| m.decode_task(h.view(), t).unwrap()).collect();
        for i in m.head_range(0).unwrap() {
            m.theta[i] += 0.3;
        }
        for t in 1..4 {
            assert_eq!(m.decode_task(h.view(), t).unwrap(), before[t]);
        }
        assert_ne!(m.decode_task(h.view(), 0).unwrap(), before[0]);
    }

    #[test]
    fn joint_head_has_fewer_parameters() {
        assert!(tiny(HeadKind::Joint).n_params() < tiny(HeadKind::PerTask).n_params());
    }

    #[test]
    fn gradient_of_inactive_head_is_l2_only() {
        let mut cfg = tiny(HeadKind::PerTask).config;
        cfg.active_tasks = [true, false, true, true];
        cfg.l2_lambda = 0.01;
        let m = init_model(&cfg, 5, 2).unwrap();
        let (_, g) = m.backward(&batch(6, 4), Weighting::Adaptive, None).unwrap();
        for i in m.head_range(1).unwrap() {
            assert_eq!(g[i], 2.0 * 0.01 * m.theta[i]);
        }
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let m = tiny(HeadKind::PerTask);
        let b = batch(5, 5);
        let bb = Batch {
            x: ndarray::concatenate(Axis(0), &[b.x.view(), b.x.view()]).unwrap(),
            c: ndarray::concatenate(Axis(0), &[b.c.view(), b.c.view()]).unwrap(),
            y: ndarray::concatenate(Axis(0), &[b.y.view(), b.y.view()]).unwrap(),
        };
        let (_, g1) = m.backward(&b, Weighting::Adaptive, None).unwrap();
        let (_, g2) = m.backward(&bb, Weighting::Adaptive, None).unwrap();
        for (a, c) in g1.iter().zip(&g2) {
            assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn single_task_reduction() {
        let mut cfg = tiny(HeadKind::PerTask).config;
        cfg.active_tasks = [true, false, false, false];
        cfg.recon_weight = 0.0;
        cfg.l2_lambda = 0.0;
        let m = init_model(&cfg, 5, 2).unwrap();
        let b = batch(8, 6);
        let loss = m.total_loss(&b, Weighting::Uniform).unwrap();
        let h = m.encode(b.x.view(), b.c.view()).unwrap();
        let p = m.decode_task(h.view(), 0).unwrap();
        let want: f64 = p.iter().zip(b.y.column(0)).map(|(&p, &y)| task_loss(p, y, 0.5)).sum::<f64>() / 8.0;
        assert!((loss.total - want).abs() < 1e-14);
    }

    #[test]
    fn model_file_round_trip() {
        let m = tiny(HeadKind::Joint);
        let back = MtlModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        let mut bytes = m.to_bytes();
        let n = bytes.len();
        bytes[n - 3] ^= 1;
        assert!(MtlModel::from_bytes(&bytes).is_err());
    }

    #[test]
    fn threshold_tie_is_secure() {
        let mut m = tiny(HeadKind::PerTask);
        m.theta.iter_mut().for_each(|v| *v = 0.0);
        let b = batch(2, 9);
        let p = m.predict_normalized(b.x.view(), b.c.view()).unwrap();
        assert_eq!(p[0].prob, [0.5; 4]);
        assert_eq!(p[0].label, [true; 4]);
        assert!(p[0].overall_secure);
    }
}
