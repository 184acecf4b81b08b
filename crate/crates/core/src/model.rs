//! Patch transformer classifier for single-channel signal windows.
//!
//! ```text
//! window ─► patches ─► linear patch embedding ─► + sinusoidal positions
//!        ─► [pre-norm attention block] × n_blocks ─► mean over patches
//!        ─► dense head ─► softmax
//! ```
//!
//! The mean-pooled output of the last block (before the head) is the
//! embedding used by the analysis module.

use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub const N_CLASSES: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("window has {got} samples, model expects {expected}")]
    WindowLength { expected: usize, got: usize },
    #[error("checkpoint weights do not match config: {0}")]
    Weights(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub window_len: usize,
    pub patch_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ff_dim: usize,
    pub dropout_rate: f64,
    pub n_classes: usize,
    pub positional_encoding: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_window(700)
    }
}

pub fn default_patch_len(window_len: usize) -> usize {
    let target = window_len as f64 / 10.0;
    (1..=window_len.max(1))
        .filter(|p| window_len.is_multiple_of(*p))
        .min_by(|a, b| {
            let (da, db) = ((*a as f64 - target).abs(), (*b as f64 - target).abs());
            da.total_cmp(&db).then(b.cmp(a))
        })
        .unwrap_or(1)
}

impl ModelConfig {
    /// Default architecture. `patch_len` is the divisor of `window_len`
    /// closest to `window_len / 10` (ties go to the larger divisor).
    pub fn for_window(window_len: usize) -> Self {
        Self {
            window_len,
            patch_len: default_patch_len(window_len),
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            ff_dim: 128,
            dropout_rate: 0.1,
            n_classes: N_CLASSES,
            positional_encoding: true,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.window_len / self.patch_len
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window_len", self.window_len),
            ("patch_len", self.patch_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_blocks", self.n_blocks),
            ("ff_dim", self.ff_dim),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.window_len.is_multiple_of(self.patch_len) {
            return Err(ModelError::Config(format!(
                "window_len {} is not divisible by patch_len {}",
                self.window_len, self.patch_len
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(ModelError::Config("layer_norm_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Splits a window into contiguous non-overlapping patches, `[n_patches, patch_len]`.
pub fn make_patches(window: &[f64], patch_len: usize) -> Result<Tensor> {
    if patch_len == 0 || window.is_empty() || !window.len().is_multiple_of(patch_len) {
        return Err(ModelError::Config(format!(
            "window of {} samples cannot be cut into patches of {patch_len}",
            window.len()
        )));
    }
    Ok(Tensor::matrix(window.len() / patch_len, patch_len, window.to_vec())?)
}

/// Fixed sinusoidal table: `sin` on even columns, `cos` on odd, base 10000.
pub fn positional_encoding(n_patches: usize, d_model: usize) -> Result<Tensor> {
    let mut data = vec![0.0; n_patches * d_model];
    for pos in 0..n_patches {
        for i in 0..d_model {
            let pair = (i / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / d_model as f64);
            data[pos * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(Tensor::matrix(n_patches, d_model, data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn dense<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Tensor> {
    Ok(Tensor::uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)?)
}

impl TransformerWeights {
    /// Seeded uniform `±1/sqrt(fan_in)` matrices, zero biases, unit norm gains.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let z = |n: usize| Tensor::zeros(&[n]);
        let one = |n: usize| Tensor::full(&[n], 1.0);
        let patch_w = dense(cfg.patch_len, d, rng)?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for _ in 0..cfg.n_blocks {
            blocks.push(BlockWeights {
                ln1_gamma: one(d)?,
                ln1_beta: z(d)?,
                wq: dense(d, d, rng)?,
                wk: dense(d, d, rng)?,
                wv: dense(d, d, rng)?,
                wo: dense(d, d, rng)?,
                ln2_gamma: one(d)?,
                ln2_beta: z(d)?,
                ff1_w: dense(d, cfg.ff_dim, rng)?,
                ff1_b: z(cfg.ff_dim)?,
                ff2_w: dense(cfg.ff_dim, d, rng)?,
                ff2_b: z(d)?,
            });
        }
        Ok(Self {
            patch_w,
            patch_b: z(d)?,
            blocks,
            head_w: dense(d, cfg.n_classes, rng)?,
            head_b: z(cfg.n_classes)?,
        })
    }

    /// Every matrix and bias zero; layer-norm gains one.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut w = Self::init(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        for (name, t) in w.params_mut() {
            let fill = if name.ends_with("gamma") { 1.0 } else { 0.0 };
            t.data_mut().iter_mut().for_each(|v| *v = fill);
        }
        Ok(w)
    }

    /// Parameters in a fixed canonical order with stable names.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_w".to_string(), &self.patch_w),
            ("patch_b".to_string(), &self.patch_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let fields: [(&str, &Tensor); 12] = [
                ("ln1_gamma", &b.ln1_gamma),
                ("ln1_beta", &b.ln1_beta),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ln2_gamma", &b.ln2_gamma),
                ("ln2_beta", &b.ln2_beta),
                ("ff1_w", &b.ff1_w),
                ("ff1_b", &b.ff1_b),
                ("ff2_w", &b.ff2_w),
                ("ff2_b", &b.ff2_b),
            ];
            out.extend(fields.into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("patch_w".to_string(), &mut self.patch_w),
            ("patch_b".to_string(), &mut self.patch_b),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let fields: [(&str, &mut Tensor); 12] = [
                ("ln1_gamma", &mut b.ln1_gamma),
                ("ln1_beta", &mut b.ln1_beta),
                ("wq", &mut b.wq),
                ("wk", &mut b.wk),
                ("wv", &mut b.wv),
                ("wo", &mut b.wo),
                ("ln2_gamma", &mut b.ln2_gamma),
                ("ln2_beta", &mut b.ln2_beta),
                ("ff1_w", &mut b.ff1_w),
                ("ff1_b", &mut b.ff1_b),
                ("ff2_w", &mut b.ff2_w),
                ("ff2_b", &mut b.ff2_b),
            ];
            out.extend(fields.into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out.push(("head_w".to_string(), &mut self.head_w));
        out.push(("head_b".to_string(), &mut self.head_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for (_, t) in self.params_mut() {
            t.set_requires_grad(on);
        }
    }

    /// Copies gradients from a backward sweep into each parameter's grad slot.
    pub fn assign_grads(&mut self, vars: &[Var], grads: &Gradients) -> Result<()> {
        for ((name, t), var) in self.params_mut().into_iter().zip(vars) {
            match grads.get(*var) {
                Some(g) => t.set_grad(g.to_vec())?,
                None => {
                    return Err(ModelError::Weights(format!("no gradient reached {name}")));
                }
            }
        }
        Ok(())
    }

    /// Rebuilds weights from named arrays, checking names and shapes against `cfg`.
    pub fn from_named(cfg: &ModelConfig, arrays: Vec<(String, Tensor)>) -> Result<Self> {
        let mut w = Self::zeros(cfg)?;
        let slots = w.params_mut();
        if slots.len() != arrays.len() {
            return Err(ModelError::Weights(format!(
                "expected {} arrays, found {}",
                slots.len(),
                arrays.len()
            )));
        }
        for ((name, slot), (got_name, t)) in slots.into_iter().zip(arrays) {
            if name != got_name {
                return Err(ModelError::Weights(format!("expected {name}, found {got_name}")));
            }
            if slot.shape() != t.shape() {
                return Err(ModelError::Weights(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(w)
    }
}

/// Forward-pass mode. Training mode applies dropout from the given generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Tape handles produced by [`Transformer::forward_tape`].
#[derive(Debug, Clone)]
pub struct TapeOutput {
    /// `[batch, n_classes]`
    pub logits: Var,
    /// `[batch, n_classes]`
    pub probs: Var,
    /// `[batch, d_model]`
    pub embedding: Var,
    /// One attention node per block.
    pub attention: Vec<Var>,
    /// Parameter leaves in [`TransformerWeights::params`] order.
    pub params: Vec<Var>,
}

/// Eval-mode outputs for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl ForwardOutput {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    config: ModelConfig,
    pub weights: TransformerWeights,
    positions: Tensor,
}

/// Windows evaluated per tape in [`Transformer::forward_many`].
const EVAL_CHUNK: usize = 64;

impl Transformer {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let weights = TransformerWeights::init(&config, rng)?;
        Self::from_weights(config, weights)
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let weights = TransformerWeights::zeros(&config)?;
        Self::from_weights(config, weights)
    }

    pub fn from_weights(config: ModelConfig, weights: TransformerWeights) -> Result<Self> {
        config.validate()?;
        let positions = positional_encoding(config.n_patches(), config.d_model)?;
        Ok(Self {
            config,
            weights,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Records one batched forward pass on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape, windows: &[&[f64]], mut mode: Mode<'_>) -> Result<TapeOutput> {
        let cfg = &self.config;
        if windows.is_empty() {
            return Err(ModelError::Config("forward called with no windows".into()));
        }
        let n_patches = cfg.n_patches();
        let mut flat = Vec::with_capacity(windows.len() * cfg.window_len);
        for w in windows {
            if w.len() != cfg.window_len {
                return Err(ModelError::WindowLength {
                    expected: cfg.window_len,
                    got: w.len(),
                });
            }
            flat.extend_from_slice(w);
        }
        let rows = windows.len() * n_patches;
        let patches = tape.constant(Tensor::matrix(rows, cfg.patch_len, flat)?);

        let params: Vec<Var> = self.weights.params().iter().map(|(_, t)| tape.leaf(t)).collect();
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("parameter list matches layout");

        let (patch_w, patch_b) = (next(), next());
        let h = tape.matmul(patches, patch_w)?;
        let mut x = tape.add_row(h, patch_b)?;
        if cfg.positional_encoding {
            let mut tiled = Vec::with_capacity(rows * cfg.d_model);
            for _ in 0..windows.len() {
                tiled.extend_from_slice(self.positions.data());
            }
            let pe = tape.constant(Tensor::matrix(rows, cfg.d_model, tiled)?);
            x = tape.add(x, pe)?;
        }

        let mut attention = Vec::with_capacity(cfg.n_blocks);
        for _ in 0..cfg.n_blocks {
            let bw: [Var; 12] = std::array::from_fn(|_| next());
            let (out, attn) = self.block_tape(tape, x, &bw, &mut mode)?;
            attention.push(attn);
            x = out;
        }
        let embedding = tape.mean_pool(x, n_patches)?;
        let (head_w, head_b) = (next(), next());
        let logits = tape.matmul(embedding, head_w)?;
        let logits = tape.add_row(logits, head_b)?;
        let probs = tape.softmax(logits)?;
        Ok(TapeOutput {
            logits,
            probs,
            embedding,
            attention,
            params,
        })
    }

    /// `y = x + MHSA(LN(x))`, `z = y + FF(LN(y))`.
    fn block_tape(&self, tape: &mut Tape, x: Var, w: &[Var; 12], mode: &mut Mode<'_>) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let [ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b] = *w;
        let eps = cfg.layer_norm_eps;

        let n1 = tape.layer_norm(x, ln1_g, ln1_b, eps)?;
        let q = tape.matmul(n1, wq)?;
        let k = tape.matmul(n1, wk)?;
        let v = tape.matmul(n1, wv)?;
        let attn = tape.attention(q, k, v, cfg.n_patches(), cfg.n_heads)?;
        let proj = tape.matmul(attn, wo)?;
        let proj = self.dropout(tape, proj, mode)?;
        let y = tape.add(x, proj)?;

        let n2 = tape.layer_norm(y, ln2_g, ln2_b, eps)?;
        let f = tape.matmul(n2, ff1_w)?;
        let f = tape.add_row(f, ff1_b)?;
        let f = tape.relu(f);
        let f = self.dropout(tape, f, mode)?;
        let f = tape.matmul(f, ff2_w)?;
        let f = tape.add_row(f, ff2_b)?;
        let z = tape.add(y, f)?;
        Ok((z, attn))
    }

    fn dropout(&self, tape: &mut Tape, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        Ok(match mode {
            Mode::Eval => x,
            Mode::Train(rng) => tape.dropout(x, self.config.dropout_rate, &mut **rng, true)?,
        })
    }

    /// Eval-mode forward on one window.
    pub fn forward(&self, window: &[f64]) -> Result<ForwardOutput> {
        Ok(self.forward_many(&[window])?.pop().expect("one window in, one out"))
    }

    /// Eval-mode forward on many windows, batched internally.
    pub fn forward_many(&self, windows: &[&[f64]]) -> Result<Vec<ForwardOutput>> {
        let mut out = Vec::with_capacity(windows.len());
        let c = self.config.n_classes;
        let d = self.config.d_model;
        for chunk in windows.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let o = self.forward_tape(&mut tape, chunk, Mode::Eval)?;
            let (logits, probs, emb) = (tape.value(o.logits), tape.value(o.probs), tape.value(o.embedding));
            for i in 0..chunk.len() {
                out.push(ForwardOutput {
                    logits: logits.data()[i * c..(i + 1) * c].to_vec(),
                    probs: probs.data()[i * c..(i + 1) * c].to_vec(),
                    embedding: emb.data()[i * d..(i + 1) * d].to_vec(),
                });
            }
        }
        Ok(out)
    }

    /// Builds the batch loss on a fresh tape. Returns the tape, the loss node and the forward handles.
    pub fn loss_tape(&self, windows: &[&[f64]], labels: &[usize], mode: Mode<'_>) -> Result<(Tape, Var, TapeOutput)> {
        if windows.len() != labels.len() {
            return Err(ModelError::Config(format!(
                "{} windows but {} labels",
                windows.len(),
                labels.len()
            )));
        }
        let c = self.config.n_classes;
        let mut onehot = vec![0.0; labels.len() * c];
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(ModelError::Config(format!("label {l} outside 0..{c}")));
            }
            onehot[i * c + l] = 1.0;
        }
        let onehot = Tensor::matrix(labels.len(), c, onehot)?;
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, windows, mode)?;
        let loss = tape.cross_entropy(out.probs, &onehot)?;
        Ok((tape, loss, out))
    }
}
