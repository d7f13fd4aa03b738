//! Write-aware training. A block matching loss pulls every weight block
//! toward the mean block of the PTC group it is written to, in the level
//! space of the cell, so that consecutive writes flip fewer wires.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{check_domain, CellConfig};
use crate::deploy::{assign_with, partition, Assignment, Matrix};
use crate::error::{Error, Result};
use crate::reorder::column_reorder;
use crate::write::{simulate_schedule, SimOptions, WriteStats};

/// `tanh(W) / max|tanh(W)|`. All-zero input stays zero.
pub fn normalize_weights(w: &[f64]) -> Vec<f64> {
    let t: Vec<f64> = w.iter().map(|v| v.tanh()).collect();
    let max = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return vec![0.0; w.len()];
    }
    t.iter().map(|v| v / max).collect()
}

/// How levels are taken from the exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelMode {
    /// Rounded levels as programmed; gradients pass straight through Round.
    #[default]
    Rounded,
    /// Round replaced by identity. Differentiable almost everywhere.
    Smooth,
}

/// `w >= 0` and `w < 0` indicators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignMasks {
    pub pos: Vec<bool>,
    pub neg: Vec<bool>,
}

impl SignMasks {
    pub fn new(w: &[f64]) -> Self {
        let pos: Vec<bool> = w.iter().map(|&v| v >= 0.0).collect();
        let neg = pos.iter().map(|p| !p).collect();
        SignMasks { pos, neg }
    }
}

/// Levels divided by `2^b - 1`: `pos` in [0, 1], `neg` in [-1, 0].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLevels {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
    /// `log_c(s|w| + delta)` before rounding and clipping.
    pub exponent: Vec<f64>,
}

pub fn soft_levels(cfg: &CellConfig, w: &[f64], mode: LevelMode) -> Result<SoftLevels> {
    let alpha = cfg.max_level() as f64;
    let mut out = SoftLevels {
        pos: Vec::with_capacity(w.len()),
        neg: Vec::with_capacity(w.len()),
        exponent: Vec::with_capacity(w.len()),
    };
    for &v in w {
        check_domain(v)?;
        let e = cfg.exponent(v);
        let r = match mode {
            LevelMode::Rounded => e.round(),
            LevelMode::Smooth => e,
        }
        .clamp(0.0, alpha);
        let l = (alpha - r) / alpha;
        if v >= 0.0 {
            out.pos.push(l);
            out.neg.push(0.0);
        } else {
            out.pos.push(0.0);
            out.neg.push(-l);
        }
        out.exponent.push(e);
    }
    Ok(out)
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(
            format!("{} weights", b.len()),
            format!("{} weights", a.len()),
        ));
    }
    Ok(())
}

fn ld_with(cfg: &CellConfig, w: &[f64], w_ref: &[f64], mode: LevelMode) -> Result<f64> {
    check_same_len(w, w_ref)?;
    let a = soft_levels(cfg, w, mode)?;
    let b = soft_levels(cfg, w_ref, mode)?;
    Ok((0..w.len())
        .map(|i| (a.pos[i] - b.pos[i]).powi(2) + (a.neg[i] - b.neg[i]).powi(2))
        .sum())
}

/// Level difference between two equally shaped weight sets.
pub fn ld(cfg: &CellConfig, w: &[f64], w_ref: &[f64]) -> Result<f64> {
    ld_with(cfg, w, w_ref, LevelMode::Rounded)
}

/// Blocks written to one PTC; every block has `k * k` values.
pub type BlockGroup = Vec<Vec<f64>>;

fn group_mean(group: &[Vec<f64>], gi: usize) -> Result<Vec<f64>> {
    let first = group.first().ok_or(Error::EmptyGroup(gi))?;
    let n = first.len();
    let mut mean = vec![0.0; n];
    for b in group {
        if b.len() != n {
            return Err(Error::shape(
                format!("blocks of {n} values"),
                format!("a block of {}", b.len()),
            ));
        }
        for (m, v) in mean.iter_mut().zip(b) {
            *m += v;
        }
    }
    let count = group.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    Ok(mean)
}

/// `sum_g sum_b ld(block, mean(g)) / (k*k)`.
pub fn block_matching_loss(cfg: &CellConfig, groups: &[BlockGroup]) -> Result<f64> {
    block_matching_loss_with(cfg, groups, LevelMode::Rounded)
}

pub fn block_matching_loss_with(
    cfg: &CellConfig,
    groups: &[BlockGroup],
    mode: LevelMode,
) -> Result<f64> {
    let per_group = groups
        .par_iter()
        .enumerate()
        .map(|(gi, g)| {
            let mean = group_mean(g, gi)?;
            let beta = mean.len() as f64;
            g.iter()
                .map(|b| Ok(ld_with(cfg, b, &mean, mode)? / beta))
                .sum::<Result<f64>>()
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_group.iter().sum())
}

/// Derivative of a normalized level with respect to its weight, zero where
/// the exponent is clipped.
fn level_slope(cfg: &CellConfig, w: f64, exponent: f64) -> f64 {
    let alpha = cfg.max_level() as f64;
    if !(0.0..=alpha).contains(&exponent) {
        return 0.0;
    }
    let s = cfg.scale();
    -s / (alpha * cfg.base().ln() * (s * w.abs() + cfg.floor()))
}

/// Gradient of the block matching loss with respect to every block value,
/// shaped like `groups`. The group mean is held constant.
pub fn grad_block_matching(
    cfg: &CellConfig,
    groups: &[BlockGroup],
    mode: LevelMode,
) -> Result<Vec<BlockGroup>> {
    groups
        .par_iter()
        .enumerate()
        .map(|(gi, g)| {
            let mean = group_mean(g, gi)?;
            let beta = mean.len() as f64;
            let r = soft_levels(cfg, &mean, mode)?;
            g.iter()
                .map(|b| {
                    let l = soft_levels(cfg, b, mode)?;
                    let masks = SignMasks::new(b);
                    Ok((0..b.len())
                        .map(|i| {
                            let slope = level_slope(cfg, b[i], l.exponent[i]);
                            let dp = if masks.pos[i] { 2.0 * (l.pos[i] - r.pos[i]) } else { 0.0 };
                            let dn = if masks.neg[i] { 2.0 * (l.neg[i] - r.neg[i]) } else { 0.0 };
                            (dp + dn) * slope / beta
                        })
                        .collect())
                })
                .collect::<Result<BlockGroup>>()
        })
        .collect()
}

/// Where each block of a weight matrix lands, grouped by PTC.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    k: usize,
    rows: usize,
    cols: usize,
    /// Block coordinates per non-empty PTC, in write order.
    groups: Vec<Vec<(usize, usize)>>,
}

impl BlockLayout {
    pub fn new(rows: usize, cols: usize, k: usize, mode: Assignment) -> Result<Self> {
        let grid = partition(&Matrix::zeros(rows, cols), k)?;
        let schedule = assign_with(&grid, mode);
        let groups = schedule
            .ptcs
            .iter()
            .filter(|s| !s.blocks.is_empty())
            .map(|s| s.blocks.iter().map(|b| (b.row, b.col)).collect())
            .collect();
        Ok(BlockLayout {
            k,
            rows,
            cols,
            groups,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    fn index(&self, (p, q): (usize, usize), cell: usize) -> Option<usize> {
        let r = p * self.k + cell / self.k;
        let c = q * self.k + cell % self.k;
        (r < self.rows && c < self.cols).then_some(r * self.cols + c)
    }

    /// Blocks of a row-major `rows x cols` matrix; padding reads as zero.
    pub fn gather(&self, w: &[f64]) -> Result<Vec<BlockGroup>> {
        if w.len() != self.rows * self.cols {
            return Err(Error::shape(
                format!("{}x{} weights", self.rows, self.cols),
                format!("{} values", w.len()),
            ));
        }
        let cells = self.k * self.k;
        Ok(self
            .groups
            .iter()
            .map(|g| {
                g.iter()
                    .map(|&pq| {
                        (0..cells)
                            .map(|c| self.index(pq, c).map_or(0.0, |i| w[i]))
                            .collect()
                    })
                    .collect()
            })
            .collect())
    }

    /// Adds block-shaped values back onto the matrix, dropping padding.
    pub fn scatter_add(&self, blocks: &[BlockGroup], out: &mut [f64]) {
        for (g, vals) in self.groups.iter().zip(blocks) {
            for (&pq, block) in g.iter().zip(vals) {
                for (c, v) in block.iter().enumerate() {
                    if let Some(i) = self.index(pq, c) {
                        out[i] += v;
                    }
                }
            }
        }
    }
}

/// Regularizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BMConfig {
    pub lambda: f64,
    /// PTC size; blocks hold `k * k` weights.
    pub k: usize,
    pub assignment: Assignment,
}

impl BMConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda {} must be finite and non-negative",
                self.lambda
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("ptc size must be at least 1".into()));
        }
        if let Assignment::RoundRobin { ptcs: 0 } = self.assignment {
            return Err(Error::InvalidConfig("round robin needs at least one ptc".into()));
        }
        Ok(())
    }

    pub fn block_size(&self) -> usize {
        self.k * self.k
    }
}

/// Fully connected layer, `rows` outputs by `cols` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// ReLU MLP with a softmax head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub layers: Vec<DenseLayer>,
    /// Running maxima of hidden activations, used when they are quantized.
    pub activation_ranges: Vec<f64>,
}

impl ToyModel {
    /// `sizes = [inputs, hidden.., classes]`, Gaussian init.
    pub fn init(sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|p| {
                let (cols, rows) = (p[0], p[1]);
                let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("valid std");
                DenseLayer {
                    rows,
                    cols,
                    weights: (0..rows * cols).map(|_| normal.sample(rng)).collect(),
                    bias: vec![0.0; rows],
                }
            })
            .collect();
        Ok(ToyModel {
            layers,
            activation_ranges: vec![0.0; sizes.len() - 2],
        })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(Error::shape(
                    format!("{}x{} layer {i}", l.rows, l.cols),
                    format!("{} weights, {} biases", l.weights.len(), l.bias.len()),
                ));
            }
            if i > 0 && layers[i - 1].rows != l.cols {
                return Err(Error::shape(
                    format!("{} inputs to layer {i}", layers[i - 1].rows),
                    l.cols,
                ));
            }
        }
        let hidden = layers.len().saturating_sub(1);
        Ok(ToyModel {
            layers,
            activation_ranges: vec![0.0; hidden],
        })
    }

    pub fn inputs(&self) -> usize {
        self.layers.first().map_or(0, |l| l.cols)
    }
}

/// Weights seen by the forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightPath {
    /// `quantize(normalize_weights(W))`.
    Quantized(CellConfig),
    /// `W` as is.
    FullPrecision,
}

/// Weights of every layer as the forward pass sees them.
pub fn effective_weights(model: &ToyModel, path: WeightPath) -> Result<Vec<Vec<f64>>> {
    model
        .layers
        .iter()
        .map(|l| match path {
            WeightPath::FullPrecision => Ok(l.weights.clone()),
            WeightPath::Quantized(cfg) => normalize_weights(&l.weights)
                .iter()
                .map(|&w| Ok(cfg.quantize(w)?.0))
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

/// `activation_bits`: uniform affine quantization of hidden activations over
/// `[0, running max]`, straight-through in the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForwardOptions {
    pub activation_bits: Option<u32>,
    pub update_ranges: bool,
}

fn quantize_activation(v: f64, range: f64, bits: u32) -> f64 {
    if range <= 0.0 {
        return 0.0;
    }
    let steps = ((1u64 << bits) - 1) as f64;
    (v.clamp(0.0, range) / range * steps).round() / steps * range
}

struct Trace {
    /// Inputs of every layer.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn forward_trace(
    model: &mut ToyModel,
    weights: &[Vec<f64>],
    x: &Matrix,
    opts: ForwardOptions,
) -> Result<Trace> {
    if x.cols() != model.inputs() {
        return Err(Error::shape(
            format!("{} input features", model.inputs()),
            format!("{} features", x.cols()),
        ));
    }
    let n = x.rows();
    let depth = model.layers.len();
    let mut acts = vec![x.data().to_vec()];
    let mut pre = Vec::with_capacity(depth.saturating_sub(1));
    for (li, (layer, w)) in model.layers.iter().zip(weights).enumerate() {
        let input = &acts[li];
        let mut z = vec![0.0; n * layer.rows];
        for s in 0..n {
            let xs = &input[s * layer.cols..(s + 1) * layer.cols];
            for o in 0..layer.rows {
                let wr = &w[o * layer.cols..(o + 1) * layer.cols];
                z[s * layer.rows + o] =
                    layer.bias[o] + wr.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        if li + 1 == depth {
            return Ok(Trace {
                acts,
                pre,
                logits: z,
            });
        }
        let mut h: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
        if let Some(bits) = opts.activation_bits {
            if opts.update_ranges {
                let m = h.iter().fold(0.0f64, |a, &b| a.max(b));
                model.activation_ranges[li] = model.activation_ranges[li].max(m);
            }
            let range = model.activation_ranges[li];
            h.iter_mut().for_each(|v| *v = quantize_activation(*v, range, bits));
        }
        pre.push(z);
        acts.push(h);
    }
    Err(Error::InvalidConfig("model has no layers".into()))
}

/// Logits of a batch, one row per sample.
pub fn forward(
    model: &ToyModel,
    path: WeightPath,
    x: &Matrix,
    activation_bits: Option<u32>,
) -> Result<Matrix> {
    let weights = effective_weights(model, path)?;
    let mut m = model.clone();
    let opts = ForwardOptions {
        activation_bits,
        update_ranges: false,
    };
    let t = forward_trace(&mut m, &weights, x, opts)?;
    let classes = model.layers.last().map_or(0, |l| l.rows);
    Matrix::new(x.rows(), classes, t.logits)
}

/// Mean cross entropy of a batch and its gradients. Gradients with respect
/// to the effective weights are returned as the gradients of `W`.
pub fn quantized_forward_backward(
    model: &mut ToyModel,
    path: WeightPath,
    x: &Matrix,
    labels: &[usize],
    opts: ForwardOptions,
) -> Result<(f64, Gradients)> {
    if labels.len() != x.rows() {
        return Err(Error::shape(
            format!("{} labels", x.rows()),
            format!("{} labels", labels.len()),
        ));
    }
    let classes = model.layers.last().map_or(0, |l| l.rows);
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::shape(format!("labels below {classes}"), bad));
    }
    let weights = effective_weights(model, path)?;
    let t = forward_trace(model, &weights, x, opts)?;
    let n = x.rows();
    let mut loss = 0.0;
    let mut delta = vec![0.0; n * classes];
    for s in 0..n {
        let z = &t.logits[s * classes..(s + 1) * classes];
        let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        loss += sum.ln() + m - z[labels[s]];
        for c in 0..classes {
            let p = (z[c] - m).exp() / sum;
            delta[s * classes + c] = (p - f64::from(c == labels[s])) / n as f64;
        }
    }
    loss /= n as f64;

    let depth = model.layers.len();
    let mut gw = vec![Vec::new(); depth];
    let mut gb = vec![Vec::new(); depth];
    for li in (0..depth).rev() {
        let layer = &model.layers[li];
        let input = &t.acts[li];
        let mut dw = vec![0.0; layer.rows * layer.cols];
        let mut db = vec![0.0; layer.rows];
        for s in 0..n {
            let xs = &input[s * layer.cols..(s + 1) * layer.cols];
            for o in 0..layer.rows {
                let d = delta[s * layer.rows + o];
                if d == 0.0 {
                    continue;
                }
                db[o] += d;
                for (g, &xv) in dw[o * layer.cols..(o + 1) * layer.cols].iter_mut().zip(xs) {
                    *g += d * xv;
                }
            }
        }
        if li > 0 {
            let w = &weights[li];
            let z = &t.pre[li - 1];
            let mut next = vec![0.0; n * layer.cols];
            for s in 0..n {
                for o in 0..layer.rows {
                    let d = delta[s * layer.rows + o];
                    if d == 0.0 {
                        continue;
                    }
                    for (j, &wv) in w[o * layer.cols..(o + 1) * layer.cols].iter().enumerate() {
                        next[s * layer.cols + j] += d * wv;
                    }
                }
            }
            for (g, &zv) in next.iter_mut().zip(z) {
                if zv <= 0.0 {
                    *g = 0.0;
                }
            }
            delta = next;
        }
        gw[li] = dw;
        gb[li] = db;
    }
    Ok((
        loss,
        Gradients {
            weights: gw,
            bias: gb,
        },
    ))
}

/// Isotropic Gaussian clusters around random centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobConfig {
    pub classes: usize,
    pub features: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Standard deviation of the centers.
    pub center_std: f64,
    /// Standard deviation of samples around their center.
    pub noise_std: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            classes: 3,
            features: 64,
            train_samples: 600,
            test_samples: 600,
            center_std: 1.0,
            noise_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobDataset {
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub test_x: Matrix,
    pub test_y: Vec<usize>,
}

pub fn gaussian_blobs(cfg: &BlobConfig, rng: &mut ChaCha8Rng) -> Result<BlobDataset> {
    if cfg.classes < 2 || cfg.features == 0 {
        return Err(Error::InvalidConfig(
            "blobs need at least two classes and one feature".into(),
        ));
    }
    let center = Normal::new(0.0, cfg.center_std)
        .map_err(|e| Error::InvalidConfig(format!("center_std: {e}")))?;
    let noise = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| Error::InvalidConfig(format!("noise_std: {e}")))?;
    let centers: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..cfg.features).map(|_| center.sample(rng)).collect())
        .collect();
    let mut draw = |n: usize| -> Result<(Matrix, Vec<usize>)> {
        let labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
        let data = labels
            .iter()
            .flat_map(|&y| centers[y].iter().map(|c| c + noise.sample(rng)).collect::<Vec<_>>())
            .collect();
        Ok((Matrix::new(n, cfg.features, data)?, labels))
    };
    let (train_x, train_y) = draw(cfg.train_samples)?;
    let (test_x, test_y) = draw(cfg.test_samples)?;
    Ok(BlobDataset {
        train_x,
        train_y,
        test_x,
        test_y,
    })
}

pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(s, &y)| {
            let row = logits.row(s);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Everything a toy run depends on besides the regularization weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub cell: CellConfig,
    pub k: usize,
    pub assignment: Assignment,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub activation_bits: Option<u32>,
    pub data: BlobConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(cell: CellConfig, k: usize, seed: u64) -> Self {
        TrainConfig {
            cell,
            k,
            assignment: Assignment::RowPerPtc,
            hidden: vec![32],
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 60,
            batch_size: 32,
            activation_bits: None,
            data: BlobConfig::default(),
            seed,
        }
    }

    pub fn bm(&self, lambda: f64) -> BMConfig {
        BMConfig {
            lambda,
            k: self.k,
            assignment: self.assignment,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bm(0.0).validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.data.train_samples == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and train_samples must be positive".into(),
            ));
        }
        if let Some(b) = self.activation_bits {
            if !(1..=16).contains(&b) {
                return Err(Error::InvalidConfig(format!("activation_bits {b} outside 1..=16")));
            }
        }
        Ok(())
    }

    fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.data.features];
        s.extend(&self.hidden);
        s.push(self.data.classes);
        s
    }
}

/// Writes of deploying a trained model once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WriteSummary {
    pub total_writes: u64,
    pub max_writes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub lambda: f64,
    pub accuracy: f64,
    pub final_loss: f64,
    pub block_matching_loss: f64,
    pub writes_reorder_off: WriteSummary,
    pub writes_reorder_on: WriteSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub rows: Vec<TrainRow>,
}

/// Blocks of every layer of the normalized model, grouped per PTC.
fn layer_groups(
    model: &ToyModel,
    layouts: &[BlockLayout],
) -> Result<Vec<(Vec<f64>, Vec<BlockGroup>)>> {
    model
        .layers
        .iter()
        .zip(layouts)
        .map(|(l, lay)| {
            let n = normalize_weights(&l.weights);
            let g = lay.gather(&n)?;
            Ok((n, g))
        })
        .collect()
}

/// Total block matching loss of a model.
pub fn model_block_matching_loss(cfg: &CellConfig, model: &ToyModel, bm: &BMConfig) -> Result<f64> {
    let layouts = layouts(model, bm)?;
    layer_groups(model, &layouts)?
        .iter()
        .map(|(_, g)| block_matching_loss(cfg, g))
        .sum()
}

fn layouts(model: &ToyModel, bm: &BMConfig) -> Result<Vec<BlockLayout>> {
    model
        .layers
        .iter()
        .map(|l| BlockLayout::new(l.rows, l.cols, bm.k, bm.assignment))
        .collect()
}

/// Deploys the quantized weights and counts writes.
pub fn deployment_writes(
    cfg: &CellConfig,
    model: &ToyModel,
    k: usize,
    mode: Assignment,
    reorder: bool,
) -> Result<WriteSummary> {
    let mut stats = WriteStats::default();
    for (l, w) in model
        .layers
        .iter()
        .zip(effective_weights(model, WeightPath::Quantized(*cfg))?)
    {
        let mut schedule = assign_with(&partition(&Matrix::new(l.rows, l.cols, w)?, k)?, mode);
        if reorder {
            schedule = column_reorder(&schedule)?.into_schedule();
        }
        let run = simulate_schedule(cfg, &schedule, &SimOptions::default(), None)?;
        stats = stats.merge(&run.stats);
    }
    Ok(WriteSummary {
        total_writes: stats.total_writes,
        max_writes: stats.max_cell_writes,
    })
}

/// Trains one model with SGD and momentum on `CE + lambda * L_BM`.
pub fn train_model(config: &TrainConfig, lambda: f64, data: &BlobDataset) -> Result<ToyModel> {
    config.validate()?;
    let bm = config.bm(lambda);
    bm.validate()?;
    let cfg = config.cell;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ToyModel::init(&config.sizes(), &mut rng)?;
    let layouts = layouts(&model, &bm)?;
    let mut vw: Vec<Vec<f64>> = model.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect();
    let mut vb: Vec<Vec<f64>> = model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect();
    let n = data.train_x.rows();
    let features = data.train_x.cols();
    let mut order: Vec<usize> = (0..n).collect();
    let opts = ForwardOptions {
        activation_bits: config.activation_bits,
        update_ranges: true,
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let xs: Vec<f64> = batch
                .iter()
                .flat_map(|&i| data.train_x.row(i).iter().copied())
                .collect();
            let ys: Vec<usize> = batch.iter().map(|&i| data.train_y[i]).collect();
            let x = Matrix::new(batch.len(), features, xs)?;
            let (loss, mut grads) =
                quantized_forward_backward(&mut model, WeightPath::Quantized(cfg), &x, &ys, opts)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, lambda });
            }
            if lambda > 0.0 {
                for ((_, groups), (lay, gw)) in layer_groups(&model, &layouts)?
                    .iter()
                    .zip(layouts.iter().zip(grads.weights.iter_mut()))
                {
                    let g = grad_block_matching(&cfg, groups, LevelMode::Rounded)?;
                    let mut dense = vec![0.0; gw.len()];
                    lay.scatter_add(&g, &mut dense);
                    for (a, d) in gw.iter_mut().zip(dense) {
                        *a += lambda * d;
                    }
                }
            }
            for (li, layer) in model.layers.iter_mut().enumerate() {
                for ((w, v), g) in layer.weights.iter_mut().zip(&mut vw[li]).zip(&grads.weights[li]) {
                    *v = config.momentum * *v + g;
                    *w -= config.learning_rate * *v;
                }
                for ((b, v), g) in layer.bias.iter_mut().zip(&mut vb[li]).zip(&grads.bias[li]) {
                    *v = config.momentum * *v + g;
                    *b -= config.learning_rate * *v;
                }
            }
            if model.layers.iter().any(|l| l.weights.iter().any(|w| !w.is_finite())) {
                return Err(Error::Diverged { epoch, lambda });
            }
        }
    }
    Ok(model)
}

fn run_row(config: &TrainConfig, lambda: f64, data: &BlobDataset) -> Result<TrainRow> {
    let cfg = config.cell;
    let mut model = train_model(config, lambda, data)?;
    let logits = forward(&model, WeightPath::Quantized(cfg), &data.test_x, config.activation_bits)?;
    let (final_loss, _) = quantized_forward_backward(
        &mut model,
        WeightPath::Quantized(cfg),
        &data.train_x,
        &data.train_y,
        ForwardOptions {
            activation_bits: config.activation_bits,
            update_ranges: false,
        },
    )?;
    Ok(TrainRow {
        lambda,
        accuracy: accuracy(&logits, &data.test_y),
        final_loss,
        block_matching_loss: model_block_matching_loss(&cfg, &model, &config.bm(lambda))?,
        writes_reorder_off: deployment_writes(&cfg, &model, config.k, config.assignment, false)?,
        writes_reorder_on: deployment_writes(&cfg, &model, config.k, config.assignment, true)?,
    })
}

/// One training run per lambda, all from the same seed and data.
pub fn train_toy(config: &TrainConfig, lambdas: &[f64]) -> Result<TrainReport> {
    config.validate()?;
    for &l in lambdas {
        config.bm(l).validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let data = gaussian_blobs(&config.data, &mut rng)?;
    let rows = lambdas
        .par_iter()
        .map(|&l| run_row(config, l, &data))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainReport {
        config: config.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg2() -> CellConfig {
        CellConfig::new(2, 0.5).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_weights(&[0.0]), vec![0.0]);
        assert_eq!(normalize_weights(&[0.3, -0.3]), vec![1.0, -1.0]);
        let n = normalize_weights(&[1.0, 2.0]);
        assert_eq!(n[0], 1.0f64.tanh() / 2.0f64.tanh());
        assert!((n[0] - 0.79001).abs() < 1e-5);
        assert_eq!(n[1], 1.0);
    }

    #[test]
    fn ld_examples() {
        let c = cfg2();
        assert_eq!(ld(&c, &[0.2, -0.4], &[0.2, -0.4]).unwrap(), 0.0);
        assert!((ld(&c, &[1.0], &[3.0 / 7.0]).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(ld(&c, &[0.5], &[3.0 / 7.0]).unwrap(), 0.0);
        assert!(ld(&c, &[0.5], &[0.5, 0.1]).is_err());
        assert!(ld(&c, &[1.5], &[0.5]).is_err());
    }

    #[test]
    fn block_matching_examples() {
        let c = cfg2();
        let same = vec![vec![vec![0.3, -0.2]; 4]];
        assert_eq!(block_matching_loss(&c, &same).unwrap(), 0.0);
        let single = vec![vec![vec![0.9, -0.7]]];
        assert_eq!(block_matching_loss(&c, &single).unwrap(), 0.0);
        // the mean 5/7 rounds to level 3
        let pair = vec![vec![vec![1.0], vec![3.0 / 7.0]]];
        let l = block_matching_loss(&c, &pair).unwrap();
        assert!((l - 1.0 / 9.0).abs() < 1e-15);
        assert!(matches!(
            block_matching_loss(&c, &[vec![]]),
            Err(Error::EmptyGroup(0))
        ));
    }

    #[test]
    fn gradient_vanishes_at_mean() {
        let c = cfg2();
        let groups = vec![vec![vec![0.3, -0.6, 0.0, 0.9]; 3]];
        for mode in [LevelMode::Rounded, LevelMode::Smooth] {
            let g = grad_block_matching(&c, &groups, mode).unwrap();
            assert!(g.iter().flatten().flatten().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gradient_points_toward_mean() {
        let c = CellConfig::new(4, 0.8).unwrap();
        let groups = vec![vec![vec![0.9], vec![0.1]]];
        let g = grad_block_matching(&c, &groups, LevelMode::Smooth).unwrap();
        assert!(g[0][0][0] > 0.0);
        assert!(g[0][1][0] < 0.0);
    }

    #[test]
    fn layout_round_trip() {
        let w: Vec<f64> = (0..3 * 5).map(|i| i as f64).collect();
        let lay = BlockLayout::new(3, 5, 2, Assignment::RowPerPtc).unwrap();
        assert_eq!(lay.group_count(), 2);
        let g = lay.gather(&w).unwrap();
        assert_eq!(g[0][0], vec![0.0, 1.0, 5.0, 6.0]);
        assert_eq!(g[1][2], vec![14.0, 0.0, 0.0, 0.0]);
        let mut back = vec![0.0; 15];
        lay.scatter_add(&g, &mut back);
        assert_eq!(back, w);
        let rr = BlockLayout::new(3, 5, 2, Assignment::RoundRobin { ptcs: 10 }).unwrap();
        assert_eq!(rr.group_count(), 2);
        let one = BlockLayout::new(3, 5, 2, Assignment::RoundRobin { ptcs: 1 }).unwrap();
        assert_eq!(one.group_count(), 1);
        assert_eq!(one.gather(&w).unwrap()[0].len(), 6);
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut model = ToyModel::from_layers(vec![DenseLayer {
            rows: 3,
            cols: 3,
            weights: Matrix::identity(3).into_data(),
            bias: vec![0.0; 3],
        }])
        .unwrap();
        let x = Matrix::new(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25]).unwrap();
        for path in [WeightPath::Quantized(cfg2()), WeightPath::FullPrecision] {
            assert_eq!(forward(&model, path, &x, None).unwrap(), x);
        }
        let (_, g) = quantized_forward_backward(
            &mut model,
            WeightPath::Quantized(cfg2()),
            &x,
            &[0, 1],
            ForwardOptions::default(),
        )
        .unwrap();
        assert_eq!(g.weights[0].len(), 9);
    }

    #[test]
    fn full_precision_is_plain_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = ToyModel::init(&[4, 5, 2], &mut rng).unwrap();
        let x = Matrix::new(1, 4, vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let l0 = &model.layers[0];
        let h: Vec<f64> = (0..5)
            .map(|o| {
                (l0.bias[o] + (0..4).map(|j| l0.weights[o * 4 + j] * x.get(0, j)).sum::<f64>()).max(0.0)
            })
            .collect();
        let l1 = &model.layers[1];
        let want: Vec<f64> = (0..2)
            .map(|o| l1.bias[o] + (0..5).map(|j| l1.weights[o * 5 + j] * h[j]).sum::<f64>())
            .collect();
        let got = forward(&model, WeightPath::FullPrecision, &x, None).unwrap();
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences_full_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = ToyModel::init(&[3, 4, 3], &mut rng).unwrap();
        model.layers[0].bias = vec![0.1, 0.2, 0.3, 0.4];
        let x = Matrix::new(2, 3, vec![0.5, -0.3, 0.8, -0.1, 0.9, 0.2]).unwrap();
        let y = [2, 0];
        let opts = ForwardOptions::default();
        let (_, g) =
            quantized_forward_backward(&mut model, WeightPath::FullPrecision, &x, &y, opts).unwrap();
        let h = 1e-6;
        for li in 0..2 {
            for i in 0..model.layers[li].weights.len() {
                let mut m = model.clone();
                m.layers[li].weights[i] += h;
                let (up, _) = quantized_forward_backward(&mut m, WeightPath::FullPrecision, &x, &y, opts).unwrap();
                m.layers[li].weights[i] -= 2.0 * h;
                let (dn, _) = quantized_forward_backward(&mut m, WeightPath::FullPrecision, &x, &y, opts).unwrap();
                assert!(((up - dn) / (2.0 * h) - g.weights[li][i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn activation_quantizer() {
        assert_eq!(quantize_activation(0.5, 1.0, 1), 1.0);
        assert_eq!(quantize_activation(0.2, 1.0, 2), 1.0 / 3.0);
        assert_eq!(quantize_activation(2.0, 1.0, 2), 1.0);
        assert_eq!(quantize_activation(0.7, 0.0, 4), 0.0);
    }

    #[test]
    fn blobs_are_reproducible() {
        let c = BlobConfig::default();
        let a = gaussian_blobs(&c, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gaussian_blobs(&c, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train_x.cols(), 64);
        assert_eq!(a.train_y.iter().max(), Some(&2));
    }

    #[test]
    fn lambda_zero_ignores_regularizer_and_is_reproducible() {
        let mut t = TrainConfig::new(CellConfig::new(4, 0.8).unwrap(), 8, 1);
        t.epochs = 2;
        t.data.train_samples = 64;
        t.data.test_samples = 30;
        let a = train_toy(&t, &[0.0]).unwrap();
        let b = train_toy(&t, &[0.0]).unwrap();
        assert_eq!(a, b);
        assert!(a.rows[0].writes_reorder_on.total_writes <= a.rows[0].writes_reorder_off.total_writes);
        assert!(train_toy(&t, &[-1.0]).is_err());
    }

    proptest! {
        #[test]
        fn masks_partition(w in proptest::collection::vec(-1.0f64..=1.0, 1..20)) {
            let m = SignMasks::new(&w);
            for i in 0..w.len() {
                prop_assert!(m.pos[i] != m.neg[i]);
            }
        }

        #[test]
        fn rounded_levels_are_integral(w in proptest::collection::vec(-1.0f64..=1.0, 1..20), bits in 2u32..7) {
            let c = CellConfig::new(bits, 0.8).unwrap();
            let l = soft_levels(&c, &w, LevelMode::Rounded).unwrap();
            let a = c.max_level() as f64;
            for i in 0..w.len() {
                prop_assert!((0.0..=1.0).contains(&l.pos[i]) && (-1.0..=0.0).contains(&l.neg[i]));
                prop_assert_eq!((l.pos[i] * a).round(), l.pos[i] * a);
                prop_assert_eq!((l.neg[i] * a).round(), l.neg[i] * a);
            }
        }

        #[test]
        fn bm_loss_nonnegative_and_permutation_invariant(
            blocks in proptest::collection::vec(proptest::collection::vec(-1.0f64..=1.0, 4), 1..6),
            rot in 0usize..6,
        ) {
            let c = CellConfig::new(3, 0.7).unwrap();
            let l = block_matching_loss(&c, std::slice::from_ref(&blocks)).unwrap();
            prop_assert!(l >= 0.0);
            let mut shuffled = blocks.clone();
            let r = rot % shuffled.len();
            shuffled.rotate_left(r);
            let l2 = block_matching_loss(&c, &[shuffled]).unwrap();
            prop_assert!((l - l2).abs() <= 1e-12 * (1.0 + l));
        }

        #[test]
        fn bm_loss_zero_iff_levels_match_mean(
            blocks in proptest::collection::vec(proptest::collection::vec(-1.0f64..=1.0, 4), 1..6),
        ) {
            let c = CellConfig::new(2, 0.5).unwrap();
            let l = block_matching_loss(&c, std::slice::from_ref(&blocks)).unwrap();
            let n = blocks.len() as f64;
            let mean: Vec<f64> = (0..4).map(|i| blocks.iter().map(|b| b[i]).sum::<f64>() / n).collect();
            let lm: Vec<_> = mean.iter().map(|&m| c.levels(m).unwrap()).collect();
            let matches = blocks.iter().all(|b| b.iter().zip(&lm).all(|(&w, l)| c.levels(w).unwrap() == *l));
            prop_assert_eq!(l == 0.0, matches);
        }
    }
}
