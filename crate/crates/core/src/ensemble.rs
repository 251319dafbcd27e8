//! Value-function ensemble: a small ReLU MLP, Adam, fitted-value training
//! and the binary checkpoint container.
//!
//! # Checkpoint layout
//!
//! All integers and floats are little-endian.
//!
//! | offset      | size   | content                                         |
//! |-------------|--------|-------------------------------------------------|
//! | 0           | 8      | magic `CVMPCENS`                                |
//! | 8           | 4      | format version, `u32`                           |
//! | 12          | 4      | header length `n`, `u32`                        |
//! | 16          | n      | UTF-8 JSON [`CheckpointHeader`]                 |
//! | 16 + n      | 8·P    | `f64` payload (see below)                       |
//! | end − 32    | 32     | SHA-256 of every preceding byte                 |
//!
//! The payload is the normalization mean (`input_dim` values), the
//! normalization std (`input_dim` values), then for each member and each
//! layer the weight matrix in column-major order (`out × in`) followed by
//! the bias vector.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conservative::{extract_into, ObservationMode};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::kinematics::EndEffectorState;
use crate::seeds;

/// Fully connected network, ReLU on hidden layers, scalar linear output.
///
/// Layer `l` maps `sizes[l]` inputs to `sizes[l + 1]` outputs with
/// `weights[l]` of shape `out × in`. Batched calls take inputs as columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn init(sizes: &[usize], rng: &mut impl Rng) -> Result<Mlp> {
        let mut mlp = Mlp::zeros(sizes)?;
        for w in &mut mlp.weights {
            let std = (2.0 / w.ncols() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in w.iter_mut() {
                *v = normal.sample(rng);
            }
        }
        Ok(mlp)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Mlp> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        if *sizes.last().unwrap() != 1 {
            return Err(Error::InvalidArgument("output layer must have one unit".into()));
        }
        Ok(Mlp {
            weights: sizes.windows(2).map(|p| DMatrix::zeros(p[1], p[0])).collect(),
            biases: sizes[1..].iter().map(|&n| DVector::zeros(n)).collect(),
        })
    }

    /// Checks that shapes chain and the output is scalar.
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.biases.len() {
            return Err(Error::InvalidArgument("weights and biases disagree".into()));
        }
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.nrows() != b.len() {
                return Err(Error::Dimension {
                    what: "bias length",
                    expected: w.nrows(),
                    got: b.len(),
                });
            }
            if l > 0 && w.ncols() != self.weights[l - 1].nrows() {
                return Err(Error::Dimension {
                    what: "layer input",
                    expected: self.weights[l - 1].nrows(),
                    got: w.ncols(),
                });
            }
        }
        if self.biases.last().unwrap().len() != 1 {
            return Err(Error::InvalidArgument("output layer must have one unit".into()));
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.biases.iter().map(|b| b.len()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Parameter slices in checkpoint order.
    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let x = DMatrix::from_column_slice(x.len(), 1, x);
        Ok(self.forward_batch(&x)[0])
    }

    /// Evaluates every column of `x`.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let last = self.weights.len() - 1;
        let mut a = self.layer(0, x, last == 0);
        for l in 1..=last {
            a = self.layer(l, &a, l == last);
        }
        a.as_slice().to_vec()
    }

    fn layer(&self, l: usize, input: &DMatrix<f64>, linear: bool) -> DMatrix<f64> {
        let mut z = &self.weights[l] * input;
        for mut col in z.column_iter_mut() {
            col += &self.biases[l];
        }
        if !linear {
            z.apply(|v| *v = v.max(0.0));
        }
        z
    }

    /// Gradient of `½ (V(x) − target)²`.
    pub fn backward(&self, x: &[f64], target: f64) -> Result<Mlp> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let x = DMatrix::from_column_slice(x.len(), 1, x);
        Ok(self.loss_and_grad(&x, &[target]).1)
    }

    /// Mean of `½ (V(x_j) − y_j)²` over the columns of `x`, and its gradient.
    pub fn loss_and_grad(&self, x: &DMatrix<f64>, targets: &[f64]) -> (f64, Mlp) {
        let n = x.ncols() as f64;
        let depth = self.weights.len();
        let mut acts: Vec<DMatrix<f64>> = Vec::with_capacity(depth);
        for l in 0..depth {
            let input = if l == 0 { x } else { &acts[l - 1] };
            let a = self.layer(l, input, l + 1 == depth);
            acts.push(a);
        }
        let out = &acts[depth - 1];
        let mut delta = DMatrix::zeros(1, x.ncols());
        let mut loss = 0.0;
        for (j, (&v, &y)) in out.iter().zip(targets).enumerate() {
            let e = v - y;
            loss += 0.5 * e * e;
            delta[(0, j)] = e / n;
        }
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        for l in (0..depth).rev() {
            let input = if l == 0 { x } else { &acts[l - 1] };
            weights.push(&delta * input.transpose());
            biases.push(delta.column_sum());
            if l > 0 {
                let mut back = self.weights[l].tr_mul(&delta);
                back.zip_apply(input, |d, a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = back;
            }
        }
        weights.reverse();
        biases.reverse();
        (loss / n, Mlp { weights, biases })
    }

    fn zeros_like(&self) -> Mlp {
        Mlp {
            weights: self.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: self.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Mlp,
    pub v: Mlp,
    pub t: i32,
}

impl AdamState {
    pub fn new(params: &Mlp) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

pub fn adam_step(params: &mut Mlp, grads: &Mlp, state: &mut AdamState, hp: &AdamConfig) {
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powi(state.t);
    let c2 = 1.0 - hp.beta2.powi(state.t);
    let layers = params
        .slices_mut()
        .zip(grads.slices())
        .zip(state.m.slices_mut().zip(state.v.slices_mut()));
    for ((p, g), (m, v)) in layers {
        for i in 0..p.len() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            p[i] -= hp.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + hp.eps);
        }
    }
}

/// Per-feature affine input normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Mean and population std of each row of `x`, std floored at `floor`.
    pub fn fit(x: &DMatrix<f64>, floor: f64) -> Self {
        let n = x.ncols().max(1) as f64;
        let mut mean = Vec::with_capacity(x.nrows());
        let mut std = Vec::with_capacity(x.nrows());
        for row in x.row_iter() {
            let m = row.sum() / n;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            std.push(var.sqrt().max(floor));
        }
        Normalizer { mean, std }
    }

    pub fn apply(&self, x: &mut DMatrix<f64>) {
        for mut col in x.column_iter_mut() {
            for (i, v) in col.iter_mut().enumerate() {
                *v = (*v - self.mean[i]) / self.std[i];
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Caps the number of gradient steps per member regardless of `epochs`.
    pub max_steps: Option<usize>,
    pub target_period: usize,
    pub normalize: bool,
    pub std_floor: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![128, 128],
            epochs: 300,
            batch_size: 256,
            max_steps: None,
            target_period: 200,
            normalize: true,
            std_floor: 1e-8,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if self.batch_size == 0 || self.target_period == 0 {
            return Err(Error::Config("batch_size and target_period must be positive".into()));
        }
        if !(self.adam.lr > 0.0) || !(self.std_floor > 0.0) {
            return Err(Error::Config("lr and std_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_for(&self, transitions: usize) -> usize {
        let per_epoch = transitions.div_ceil(self.batch_size);
        let steps = per_epoch * self.epochs;
        self.max_steps.map_or(steps, |cap| steps.min(cap))
    }
}

/// Seed of member `i`. Depends only on `(seed, i)`, so a member trains the
/// same way whatever the ensemble size.
pub fn member_seed(seed: u64, i: usize) -> u64 {
    seeds::derive(seed, "member", i as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleCheckpoint {
    pub mode: Option<ObservationMode>,
    pub gamma: f64,
    pub normalizer: Normalizer,
    pub members: Vec<Mlp>,
    pub digest: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub mode: Option<ObservationMode>,
    pub gamma: f64,
    pub members: usize,
    pub sizes: Vec<usize>,
    pub digest: String,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CVMPCENS";
pub const CHECKPOINT_VERSION: u32 = 1;

impl EnsembleCheckpoint {
    pub fn input_dim(&self) -> usize {
        self.normalizer.mean.len()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::InvalidArgument("ensemble has no members".into()));
        }
        let dim = self.input_dim();
        if self.normalizer.std.len() != dim || self.normalizer.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("bad normalization".into()));
        }
        if let Some(mode) = self.mode {
            if mode.dim() != dim {
                return Err(Error::Dimension {
                    what: "checkpoint input",
                    expected: mode.dim(),
                    got: dim,
                });
            }
        }
        let sizes = self.members[0].sizes();
        for m in &self.members {
            m.validate()?;
            if m.sizes() != sizes || m.input_dim() != dim {
                return Err(Error::InvalidArgument("members differ in shape".into()));
            }
        }
        Ok(())
    }

    /// Normalized observations of `states`, one per column.
    pub fn observation_matrix(&self, states: &[EndEffectorState]) -> Result<DMatrix<f64>> {
        let mode = self
            .mode
            .ok_or_else(|| Error::InvalidArgument("ensemble has no observation mode".into()))?;
        let mut x = DMatrix::zeros(mode.dim(), states.len());
        for (j, ee) in states.iter().enumerate() {
            extract_into(ee, mode, x.column_mut(j).as_mut_slice());
        }
        self.normalizer.apply(&mut x);
        Ok(x)
    }

    /// Per-member predictions on already-normalized columns.
    pub fn predict_matrix(&self, x: &DMatrix<f64>, exec: Exec) -> Vec<Vec<f64>> {
        exec.map(&self.members, |m| m.forward_batch(x))
    }

    /// Per-member predictions for one raw observation.
    pub fn predict(&self, obs: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.input_dim() {
            return Err(Error::Dimension {
                what: "observation",
                expected: self.input_dim(),
                got: obs.len(),
            });
        }
        let mut x = DMatrix::from_column_slice(obs.len(), 1, obs);
        self.normalizer.apply(&mut x);
        Ok(self.predict_matrix(&x, Exec::Sequential).into_iter().map(|v| v[0]).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = CheckpointHeader {
            mode: self.mode,
            gamma: self.gamma,
            members: self.members.len(),
            sizes: self.members[0].sizes(),
            digest: self.digest.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |vals: &[f64]| vals.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        put(&self.normalizer.mean);
        put(&self.normalizer.std);
        for m in &self.members {
            m.slices().for_each(&mut put);
        }
        let hash = Sha256::digest(&out);
        out.extend_from_slice(&hash);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::corrupt(path, reason);
        if bytes.len() < 16 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, hash) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != hash {
            return Err(corrupt("checksum mismatch (truncated or modified)"));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header overruns file"))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[16..header_end])
            .map_err(|e| Error::corrupt(path, format!("bad header: {e}")))?;
        let payload = &body[header_end..];
        if payload.len() % 8 != 0 {
            return Err(corrupt("payload is not a whole number of f64 values"));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));

        let template = Mlp::zeros(&header.sizes)?;
        let dim = template.input_dim();
        let expected = 2 * dim + header.members * template.num_params();
        if payload.len() / 8 != expected {
            return Err(Error::corrupt(
                path,
                format!("expected {expected} parameters, found {}", payload.len() / 8),
            ));
        }
        let mean: Vec<f64> = values.by_ref().take(dim).collect();
        let std: Vec<f64> = values.by_ref().take(dim).collect();
        let mut members = Vec::with_capacity(header.members);
        for _ in 0..header.members {
            let mut m = template.clone();
            for s in m.slices_mut() {
                for v in s.iter_mut() {
                    *v = values.next().unwrap();
                }
            }
            members.push(m);
        }
        let ckpt = EnsembleCheckpoint {
            mode: header.mode,
            gamma: header.gamma,
            normalizer: Normalizer { mean, std },
            members,
            digest: header.digest,
        };
        ckpt.validate()
            .map_err(|e| Error::corrupt(path, e.to_string()))?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &EnsembleCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EnsembleCheckpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EnsembleCheckpoint::from_bytes(&bytes, path)
}

#[derive(Clone, Debug)]
pub struct TrainedEnsemble {
    pub checkpoint: EnsembleCheckpoint,
    /// Minibatch loss of every gradient step, per member.
    pub losses: Vec<Vec<f64>>,
}

impl TrainedEnsemble {
    pub fn final_losses(&self, window: usize) -> Vec<f64> {
        self.losses
            .iter()
            .map(|l| {
                let tail = &l[l.len().saturating_sub(window)..];
                tail.iter().sum::<f64>() / tail.len().max(1) as f64
            })
            .collect()
    }
}

/// Hex SHA-256 over everything that determines the trained parameters.
pub fn training_digest(ds: &Dataset, members: usize, gamma: f64, cfg: &TrainConfig, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&(cfg, members, gamma, seed, ds.mode)).unwrap_or_default());
    for t in &ds.transitions {
        for v in t.obs.iter().chain(&t.next_obs).chain([&t.cost]) {
            h.update(v.to_le_bytes());
        }
        h.update([t.terminal as u8]);
    }
    hex::encode(h.finalize())
}

struct Prepared {
    x: DMatrix<f64>,
    next: DMatrix<f64>,
    cost: Vec<f64>,
    bootstrap: Vec<f64>,
}

fn prepare(ds: &Dataset, normalizer: &Normalizer) -> Prepared {
    let dim = ds.obs_dim();
    let n = ds.len();
    let mut x = DMatrix::zeros(dim, n);
    let mut next = DMatrix::zeros(dim, n);
    for (j, t) in ds.transitions.iter().enumerate() {
        x.column_mut(j).copy_from_slice(&t.obs);
        next.column_mut(j).copy_from_slice(&t.next_obs);
    }
    normalizer.apply(&mut x);
    normalizer.apply(&mut next);
    Prepared {
        x,
        next,
        cost: ds.transitions.iter().map(|t| t.cost).collect(),
        bootstrap: ds.transitions.iter().map(|t| if t.terminal { 0.0 } else { 1.0 }).collect(),
    }
}

fn gather(src: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(src.nrows(), idx.len());
    for (j, &i) in idx.iter().enumerate() {
        out.column_mut(j).copy_from(&src.column(i));
    }
    out
}

fn train_member(
    data: &Prepared,
    sizes: &[usize],
    gamma: f64,
    cfg: &TrainConfig,
    seed: u64,
    index: usize,
) -> Result<(Mlp, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(member_seed(seed, index));
    let mut params = Mlp::init(sizes, &mut rng)?;
    let mut target = params.clone();
    let mut adam = AdamState::new(&params);
    let n = data.cost.len();
    let steps = cfg.steps_for(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        if step % cfg.target_period == 0 {
            target = params.clone();
        }
        if cursor >= n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(n);
        let idx = &order[cursor..end];
        cursor = end;
        let x = gather(&data.x, idx);
        let targets: Vec<f64> = if gamma == 0.0 {
            idx.iter().map(|&i| data.cost[i]).collect()
        } else {
            let boot = target.forward_batch(&gather(&data.next, idx));
            idx.iter()
                .zip(boot)
                .map(|(&i, v)| data.cost[i] + gamma * data.bootstrap[i] * v)
                .collect()
        };
        let (loss, grads) = params.loss_and_grad(&x, &targets);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "member {index}, step {step}: loss {loss} (lr {}, batch {})",
                cfg.adam.lr, cfg.batch_size
            )));
        }
        losses.push(loss);
        adam_step(&mut params, &grads, &mut adam, &cfg.adam);
    }
    Ok((params, losses))
}

/// Fits `members` value functions to the Bellman targets
/// `c + γ (1 − terminal) V_target(x′)`, each against a frozen copy of itself
/// refreshed every `target_period` steps.
pub fn train_ensemble(
    ds: &Dataset,
    members: usize,
    gamma: f64,
    cfg: &TrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<TrainedEnsemble> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if members == 0 {
        return Err(Error::InvalidArgument("ensemble size must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("γ must lie in [0, 1), got {gamma}")));
    }
    cfg.validate()?;
    ds.validate()?;
    let dim = ds.obs_dim();
    let normalizer = if cfg.normalize {
        let mut x = DMatrix::zeros(dim, ds.len());
        for (j, t) in ds.transitions.iter().enumerate() {
            x.column_mut(j).copy_from_slice(&t.obs);
        }
        Normalizer::fit(&x, cfg.std_floor)
    } else {
        Normalizer::identity(dim)
    };
    let data = prepare(ds, &normalizer);
    let mut sizes = vec![dim];
    sizes.extend(&cfg.hidden);
    sizes.push(1);

    let results = exec.map_range(members, |i| train_member(&data, &sizes, gamma, cfg, seed, i));
    let mut nets = Vec::with_capacity(members);
    let mut losses = Vec::with_capacity(members);
    for r in results {
        let (net, loss) = r?;
        nets.push(net);
        losses.push(loss);
    }
    Ok(TrainedEnsemble {
        checkpoint: EnsembleCheckpoint {
            mode: ds.mode,
            gamma,
            normalizer,
            members: nets,
            digest: training_digest(ds, members, gamma, cfg, seed),
        },
        losses,
    })
}
