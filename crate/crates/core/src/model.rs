//! Full-softmax recommenders with hand-derived gradients.
//!
//! Two model kinds share one interface:
//!
//! * `DotFactorization`: the representation of a sample is its user's embedding row.
//! * `MeanPoolEncoder`: the representation is `act(proj · mean(item_in[history]) + bias)`.
//!
//! Both score the whole catalog with `item_out · representation` and normalise with a
//! softmax. Gradients arrive from the loss module as `d loss / d logits`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    DotFactorization,
    MeanPoolEncoder,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot_factorization" => Ok(ModelKind::DotFactorization),
            "mean_pool_encoder" => Ok(ModelKind::MeanPoolEncoder),
            other => Err(Error::InvalidArgument(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Encoder nonlinearity. `Identity` exists for tests that need a linear encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · v` for a vector of length `cols`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub activation: Activation,
    pub dim: usize,
    pub user_count: usize,
    pub item_in: Matrix,
    pub item_out: Matrix,
    /// `user_count × dim` for dot factorization, empty otherwise.
    pub user_emb: Matrix,
    /// `dim × dim` for the mean-pool encoder, empty otherwise.
    pub proj: Matrix,
    pub bias: Vec<f64>,
}

/// Initialises every parameter uniformly in `[-1/sqrt(d), 1/sqrt(d)]`.
pub fn init_params(kind: ModelKind, m: usize, user_count: usize, dim: usize, seed: u64) -> ModelParams {
    assert!(dim >= 1, "embedding dimension must be positive");
    let bound = 1.0 / (dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |rows: usize, cols: usize| {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Matrix::from_vec(rows, cols, data)
    };
    let item_in = fill(m, dim);
    let item_out = fill(m, dim);
    let (user_emb, proj, bias) = match kind {
        ModelKind::DotFactorization => (fill(user_count, dim), Matrix::zeros(0, 0), Vec::new()),
        ModelKind::MeanPoolEncoder => {
            let proj = fill(dim, dim);
            let bias = fill(1, dim).data;
            (Matrix::zeros(0, dim), proj, bias)
        }
    };
    ModelParams {
        kind,
        activation: Activation::Tanh,
        dim,
        user_count,
        item_in,
        item_out,
        user_emb,
        proj,
        bias,
    }
}

impl ModelParams {
    pub fn item_count(&self) -> usize {
        self.item_out.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.item_in.is_finite()
            && self.item_out.is_finite()
            && self.user_emb.is_finite()
            && self.proj.is_finite()
            && self.bias.iter().all(|x| x.is_finite())
    }
}

/// Intermediate values of a forward pass kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Mean of the history's input embeddings (mean-pool only).
    pub pooled: Vec<f64>,
    pub repr: Vec<f64>,
}

pub fn forward_cached(params: &ModelParams, sample: &Sample) -> Result<ForwardCache> {
    match params.kind {
        ModelKind::DotFactorization => {
            if sample.user >= params.user_emb.rows() {
                return Err(Error::Contract(format!(
                    "user {} outside embedding table of {} users",
                    sample.user,
                    params.user_emb.rows()
                )));
            }
            Ok(ForwardCache {
                pooled: Vec::new(),
                repr: params.user_emb.row(sample.user).to_vec(),
            })
        }
        ModelKind::MeanPoolEncoder => {
            if sample.history.is_empty() {
                return Err(Error::Contract(format!(
                    "sample {} has an empty history",
                    sample.sample_id
                )));
            }
            let m = params.item_in.rows();
            let mut pooled = vec![0.0; params.dim];
            for &i in &sample.history {
                if i >= m {
                    return Err(Error::Contract(format!("history item {i} >= {m}")));
                }
                axpy(1.0, params.item_in.row(i), &mut pooled);
            }
            let inv = 1.0 / sample.history.len() as f64;
            pooled.iter_mut().for_each(|x| *x *= inv);
            let mut repr = params.proj.matvec(&pooled);
            for (r, b) in repr.iter_mut().zip(&params.bias) {
                *r += b;
                if params.activation == Activation::Tanh {
                    *r = r.tanh();
                }
            }
            Ok(ForwardCache { pooled, repr })
        }
    }
}

/// Per-sample representation vector (length `dim`).
pub fn forward(params: &ModelParams, sample: &Sample) -> Result<Vec<f64>> {
    forward_cached(params, sample).map(|c| c.repr)
}

/// Softmax output over the full catalog, with log-probabilities kept alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDistribution {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl PredictionDistribution {
    /// Log-sum-exp stabilised softmax.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        let log_probs: Vec<f64> = logits.iter().map(|z| z - lse).collect();
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        Self { probs, log_probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

pub fn logits(params: &ModelParams, repr: &[f64]) -> Vec<f64> {
    params.item_out.matvec(repr)
}

pub fn score_and_softmax(params: &ModelParams, repr: &[f64]) -> PredictionDistribution {
    PredictionDistribution::from_logits(&logits(params, repr))
}

/// Gradients with the same layout as [`ModelParams`].
///
/// `item_in` and `user_emb` are sparse: only rows reached by a sample are present.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub item_in: BTreeMap<usize, Vec<f64>>,
    pub user_emb: BTreeMap<usize, Vec<f64>>,
    pub item_out: Matrix,
    pub proj: Matrix,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            item_in: BTreeMap::new(),
            user_emb: BTreeMap::new(),
            item_out: Matrix::zeros(params.item_out.rows(), params.item_out.cols()),
            proj: Matrix::zeros(params.proj.rows(), params.proj.cols()),
            bias: vec![0.0; params.bias.len()],
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.item_in.values_mut().chain(self.user_emb.values_mut()) {
            row.iter_mut().for_each(|x| *x *= factor);
        }
        self.item_out.as_mut_slice().iter_mut().for_each(|x| *x *= factor);
        self.proj.as_mut_slice().iter_mut().for_each(|x| *x *= factor);
        self.bias.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.item_in
            .values()
            .chain(self.user_emb.values())
            .all(|r| r.iter().all(|x| x.is_finite()))
            && self.item_out.is_finite()
            && self.proj.is_finite()
            && self.bias.iter().all(|x| x.is_finite())
    }

    /// Euclidean norm over every gradient entry.
    pub fn norm(&self) -> f64 {
        let sq = |xs: &[f64]| xs.iter().map(|x| x * x).sum::<f64>();
        let sparse: f64 = self
            .item_in
            .values()
            .chain(self.user_emb.values())
            .map(|r| sq(r))
            .sum();
        (sparse + sq(self.item_out.as_slice()) + sq(self.proj.as_slice()) + sq(&self.bias)).sqrt()
    }
}

/// Adds the gradient of one sample into `grads`, given `d loss / d logits`.
pub fn backward_into(
    params: &ModelParams,
    sample: &Sample,
    cache: &ForwardCache,
    grad_logits: &[f64],
    grads: &mut Gradients,
) {
    let d = params.dim;
    let mut grad_repr = vec![0.0; d];
    for (j, &g) in grad_logits.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        axpy(g, &cache.repr, grads.item_out.row_mut(j));
        axpy(g, params.item_out.row(j), &mut grad_repr);
    }
    match params.kind {
        ModelKind::DotFactorization => {
            let row = grads
                .user_emb
                .entry(sample.user)
                .or_insert_with(|| vec![0.0; d]);
            axpy(1.0, &grad_repr, row);
        }
        ModelKind::MeanPoolEncoder => {
            let grad_pre: Vec<f64> = match params.activation {
                Activation::Tanh => grad_repr
                    .iter()
                    .zip(&cache.repr)
                    .map(|(g, r)| g * (1.0 - r * r))
                    .collect(),
                Activation::Identity => grad_repr,
            };
            for (i, &gp) in grad_pre.iter().enumerate() {
                axpy(gp, &cache.pooled, grads.proj.row_mut(i));
                grads.bias[i] += gp;
            }
            let mut grad_pooled = vec![0.0; d];
            for (i, &gp) in grad_pre.iter().enumerate() {
                axpy(gp, params.proj.row(i), &mut grad_pooled);
            }
            let inv = 1.0 / sample.history.len() as f64;
            for &item in &sample.history {
                let row = grads.item_in.entry(item).or_insert_with(|| vec![0.0; d]);
                axpy(inv, &grad_pooled, row);
            }
        }
    }
}

/// Gradients of one sample with respect to every parameter it reaches.
pub fn backward(params: &ModelParams, sample: &Sample, grad_logits: &[f64]) -> Result<Gradients> {
    if grad_logits.len() != params.item_count() {
        return Err(Error::Contract(format!(
            "grad_logits has length {}, expected {}",
            grad_logits.len(),
            params.item_count()
        )));
    }
    let cache = forward_cached(params, sample)?;
    let mut grads = Gradients::zeros_like(params);
    backward_into(params, sample, &cache, grad_logits, &mut grads);
    Ok(grads)
}

/// Adam moments. Sparse tables (`item_in`, `user_emb`) are updated lazily: rows
/// without a gradient in a step keep their moments untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: ParamMoments,
    second: ParamMoments,
}

#[derive(Debug, Clone, PartialEq)]
struct ParamMoments {
    item_in: Matrix,
    item_out: Matrix,
    user_emb: Matrix,
    proj: Matrix,
    bias: Vec<f64>,
}

impl ParamMoments {
    fn zeros_like(p: &ModelParams) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            item_in: z(&p.item_in),
            item_out: z(&p.item_out),
            user_emb: z(&p.user_emb),
            proj: z(&p.proj),
            bias: vec![0.0; p.bias.len()],
        }
    }
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: ParamMoments::zeros_like(params),
            second: ParamMoments::zeros_like(params),
        }
    }
}

struct AdamCoeffs {
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
    bc1: f64,
    bc2: f64,
}

impl AdamCoeffs {
    fn update(&self, theta: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]) {
        for k in 0..theta.len() {
            m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
            v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
            let m_hat = m[k] / self.bc1;
            let v_hat = v[k] / self.bc2;
            theta[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// One bias-corrected Adam step. Non-finite gradients abort before anything changes.
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState, grads: &Gradients, lr: f64) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite gradient at optimizer step {}",
            state.step + 1
        )));
    }
    if grads.item_out.rows() != params.item_out.rows() || grads.bias.len() != params.bias.len() {
        return Err(Error::Contract("gradient shapes do not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c = AdamCoeffs {
        beta1: state.beta1,
        beta2: state.beta2,
        eps: state.eps,
        lr,
        bc1: 1.0 - state.beta1.powi(t),
        bc2: 1.0 - state.beta2.powi(t),
    };
    let (m1, m2) = (&mut state.first, &mut state.second);
    c.update(
        params.item_out.as_mut_slice(),
        m1.item_out.as_mut_slice(),
        m2.item_out.as_mut_slice(),
        grads.item_out.as_slice(),
    );
    c.update(
        params.proj.as_mut_slice(),
        m1.proj.as_mut_slice(),
        m2.proj.as_mut_slice(),
        grads.proj.as_slice(),
    );
    c.update(&mut params.bias, &mut m1.bias, &mut m2.bias, &grads.bias);
    for (&r, g) in &grads.item_in {
        c.update(
            params.item_in.row_mut(r),
            m1.item_in.row_mut(r),
            m2.item_in.row_mut(r),
            g,
        );
    }
    for (&r, g) in &grads.user_emb {
        c.update(
            params.user_emb.row_mut(r),
            m1.user_emb.row_mut(r),
            m2.user_emb.row_mut(r),
            g,
        );
    }
    Ok(())
}

/// Row `i` is the representation of `samples[i]`.
pub fn embed_samples(params: &ModelParams, samples: &[Sample]) -> Result<Matrix> {
    let mut out = Matrix::zeros(samples.len(), params.dim);
    for (i, s) in samples.iter().enumerate() {
        out.row_mut(i).copy_from_slice(&forward(params, s)?);
    }
    Ok(out)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DRCK";
const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 1 + 8 * 3;

/// Binary checkpoint: magic, version, kind, activation, (m, users, dim) as u64 LE,
/// then every matrix as little-endian f64 in a fixed order.
pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(match params.kind {
        ModelKind::DotFactorization => 0,
        ModelKind::MeanPoolEncoder => 1,
    });
    out.push(match params.activation {
        Activation::Tanh => 0,
        Activation::Identity => 1,
    });
    for n in [params.item_count(), params.user_count, params.dim] {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for block in [
        params.item_in.as_slice(),
        params.item_out.as_slice(),
        params.user_emb.as_slice(),
        params.proj.as_slice(),
        &params.bias,
    ] {
        for x in block {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated("checkpoint header".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Contract("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let kind = match bytes[8] {
        0 => ModelKind::DotFactorization,
        1 => ModelKind::MeanPoolEncoder,
        b => return Err(Error::Contract(format!("unknown model kind tag {b}"))),
    };
    let activation = match bytes[9] {
        0 => Activation::Tanh,
        1 => Activation::Identity,
        b => return Err(Error::Contract(format!("unknown activation tag {b}"))),
    };
    let read_u64 = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let to_usize = |x: u64| usize::try_from(x).map_err(|_| Error::Contract("dimension overflow".into()));
    let m = to_usize(read_u64(10))?;
    let users = to_usize(read_u64(18))?;
    let dim = to_usize(read_u64(26))?;
    if dim == 0 {
        return Err(Error::Contract("checkpoint dimension is zero".into()));
    }
    let (user_rows, proj_rows, bias_len) = match kind {
        ModelKind::DotFactorization => (users, 0, 0),
        ModelKind::MeanPoolEncoder => (0, dim, dim),
    };
    let overflow = || Error::Contract("checkpoint dimensions overflow".into());
    let counts = [
        m.checked_mul(dim).ok_or_else(overflow)?,
        m.checked_mul(dim).ok_or_else(overflow)?,
        user_rows.checked_mul(dim).ok_or_else(overflow)?,
        proj_rows.checked_mul(dim).ok_or_else(overflow)?,
        bias_len,
    ];
    let total = counts
        .iter()
        .try_fold(0usize, |acc, &c| acc.checked_add(c))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(overflow)?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < total {
        return Err(Error::Truncated(format!(
            "checkpoint body has {} bytes, expected {total}",
            body.len()
        )));
    }
    if body.len() > total {
        return Err(Error::Contract("trailing bytes after checkpoint body".into()));
    }
    let mut floats = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| -> Vec<f64> { floats.by_ref().take(n).collect() };
    let item_in = Matrix::from_vec(m, dim, take(counts[0]));
    let item_out = Matrix::from_vec(m, dim, take(counts[1]));
    let user_emb = Matrix::from_vec(user_rows, dim, take(counts[2]));
    let proj = if proj_rows == 0 {
        Matrix::zeros(0, 0)
    } else {
        Matrix::from_vec(proj_rows, dim, take(counts[3]))
    };
    let bias = take(counts[4]);
    Ok(ModelParams {
        kind,
        activation,
        dim,
        user_count: users,
        item_in,
        item_out,
        user_emb,
        proj,
        bias,
    })
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
