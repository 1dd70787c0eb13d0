//! Decoder-only transformer used as the repair model.
//!
//! Pre-norm residual blocks with causal multi-head attention and a GELU
//! feed-forward, learned absolute positions, untied output head. Every
//! attention and feed-forward projection is a [`Linear`]: a frozen base
//! (dense or NF4) plus an optional low-rank adapter.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{gelu, gemm, softmax_row, Tape, Tensor, TensorId};
use crate::error::{Error, Result};
use crate::quant::{self, double_dequant, quantize_nf4, AdapterIds, LoraAdapter, QuantizedTensor};

pub type TokenId = u32;

const LN_EPS: f64 = 1e-5;

/// Projections that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Q,
    K,
    V,
    O,
    FfUp,
    FfDown,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::O,
        Projection::FfUp,
        Projection::FfDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
            Projection::FfUp => "ff_up",
            Projection::FfDown => "ff_down",
        }
    }

    fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            Projection::Q | Projection::K | Projection::V | Projection::O => (cfg.d_model, cfg.d_model),
            Projection::FfUp => (cfg.d_model, cfg.d_ff),
            Projection::FfDown => (cfg.d_ff, cfg.d_model),
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub adapter_targets: Vec<Projection>,
    pub adapter_rank: usize,
    /// Defaults to `2 * adapter_rank` (scaling 2.0) when unset.
    pub adapter_alpha: Option<f64>,
    /// Store attention/feed-forward bases as NF4.
    pub quantize_base: bool,
    pub block_size_1: usize,
    pub block_size_2: usize,
    pub init_seed: u64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::dataprep::VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 384,
            adapter_targets: vec![Projection::Q, Projection::V, Projection::FfUp, Projection::FfDown],
            adapter_rank: 8,
            adapter_alpha: None,
            quantize_base: true,
            block_size_1: quant::DEFAULT_BLOCK_SIZE_1,
            block_size_2: quant::DEFAULT_BLOCK_SIZE_2,
            init_seed: 0,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return fail("model dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len < 2 {
            return fail(format!("max_seq_len must be at least 2, got {}", self.max_seq_len));
        }
        if !self.adapter_targets.is_empty() {
            let smallest = self
                .adapter_targets
                .iter()
                .map(|p| {
                    let (i, o) = p.dims(self);
                    i.min(o)
                })
                .min()
                .unwrap_or(self.d_model);
            if self.adapter_rank == 0 || self.adapter_rank > self.d_model.min(smallest) {
                return fail(format!(
                    "adapter_rank {} must be in 1..={}",
                    self.adapter_rank,
                    self.d_model.min(smallest)
                ));
            }
        }
        if let Some(a) = self.adapter_alpha {
            if !(a > 0.0 && a.is_finite()) {
                return fail(format!("adapter_alpha must be positive, got {a}"));
            }
        }
        if self.block_size_1 == 0 || self.block_size_2 == 0 {
            return fail("quantization block sizes must be positive".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail("init_std must be positive".into());
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.adapter_alpha.unwrap_or(2.0 * self.adapter_rank as f64)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn has_adapter(&self, p: Projection) -> bool {
        self.adapter_targets.contains(&p)
    }

    /// Parameter counts derived from the configuration alone.
    pub fn param_counts(&self) -> ParamCounts {
        let (v, d, l, f) = (
            self.vocab_size as u64,
            self.d_model as u64,
            self.max_seq_len as u64,
            self.d_ff as u64,
        );
        let per_layer = 4 * d * d + 2 * d * f + 4 * d;
        let base = v * d + l * d + self.n_layers as u64 * per_layer + 2 * d + d * v;
        let r = self.adapter_rank as u64;
        let adapter_per_layer: u64 = Projection::ALL
            .iter()
            .filter(|p| self.has_adapter(**p))
            .map(|p| {
                let (i, o) = p.dims(self);
                r * (i as u64 + o as u64)
            })
            .sum();
        ParamCounts {
            adapter: self.n_layers as u64 * adapter_per_layer,
            base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub adapter: u64,
    pub base: u64,
}

impl ParamCounts {
    /// `adapter / (adapter + base)`, 0 for an empty model.
    pub fn trainable_fraction(&self) -> f64 {
        let total = self.adapter + self.base;
        if total == 0 {
            0.0
        } else {
            self.adapter as f64 / total as f64
        }
    }
}

/// Fraction of all parameters that live in adapters.
pub fn trainable_fraction(weights: &ModelWeights) -> f64 {
    weights.config.param_counts().trainable_fraction()
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaseWeight {
    Dense(Tensor),
    Quantized(QuantizedTensor),
}

impl BaseWeight {
    pub fn numel(&self) -> usize {
        match self {
            BaseWeight::Dense(t) => t.numel(),
            BaseWeight::Quantized(q) => q.numel(),
        }
    }

    /// Full-precision view of the weight.
    pub fn dense(&self) -> Result<Tensor> {
        match self {
            BaseWeight::Dense(t) => Ok(t.clone()),
            BaseWeight::Quantized(q) => double_dequant(q),
        }
    }
}

/// Frozen base projection plus an optional adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub base: BaseWeight,
    pub adapter: Option<LoraAdapter>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::new(vec![d], vec![1.0; d]).expect("positive"),
            beta: Tensor::zeros(vec![d]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNormParams,
    pub ff_up: Linear,
    pub ff_down: Linear,
}

impl Block {
    pub fn linear(&self, p: Projection) -> &Linear {
        match p {
            Projection::Q => &self.q,
            Projection::K => &self.k,
            Projection::V => &self.v,
            Projection::O => &self.o,
            Projection::FfUp => &self.ff_up,
            Projection::FfDown => &self.ff_down,
        }
    }

    pub fn linear_mut(&mut self, p: Projection) -> &mut Linear {
        match p {
            Projection::Q => &mut self.q,
            Projection::K => &mut self.k,
            Projection::V => &mut self.v,
            Projection::O => &mut self.o,
            Projection::FfUp => &mut self.ff_up,
            Projection::FfDown => &mut self.ff_down,
        }
    }
}

/// Identifies one trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRef {
    TokenEmbedding,
    PositionEmbedding,
    Head,
    AdapterDown(usize, Projection),
    AdapterUp(usize, Projection),
}

impl fmt::Display for ParamRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamRef::TokenEmbedding => write!(f, "tok_emb"),
            ParamRef::PositionEmbedding => write!(f, "pos_emb"),
            ParamRef::Head => write!(f, "head"),
            ParamRef::AdapterDown(l, p) => write!(f, "layers.{l}.{p}.lora_down"),
            ParamRef::AdapterUp(l, p) => write!(f, "layers.{l}.{p}.lora_up"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNormParams,
    pub head: Tensor,
}

fn normal_tensor(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

impl ModelWeights {
    /// Random base weights from `config.init_seed`, then fresh adapters.
    ///
    /// All base tensors are drawn before any adapter, so two configs that
    /// differ only in adapter placement share identical bases.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let (v, d, std) = (config.vocab_size, config.d_model, config.init_std);
        let tok_emb = normal_tensor(vec![v, d], std, &mut rng)?;
        let pos_emb = normal_tensor(vec![config.max_seq_len, d], std, &mut rng)?;
        let mut dense_blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut mats = Vec::new();
            for p in Projection::ALL {
                let (i, o) = p.dims(&config);
                mats.push(normal_tensor(vec![i, o], std, &mut rng)?);
            }
            dense_blocks.push(mats);
        }
        let head = normal_tensor(vec![d, v], std, &mut rng)?;

        let mut blocks = Vec::with_capacity(config.n_layers);
        for mats in dense_blocks {
            let mut linears = Vec::with_capacity(6);
            for (p, w) in Projection::ALL.into_iter().zip(mats) {
                let base = if config.quantize_base {
                    BaseWeight::Quantized(quantize_nf4(&w, config.block_size_1, config.block_size_2)?)
                } else {
                    BaseWeight::Dense(w)
                };
                let adapter = if config.has_adapter(p) {
                    let (i, o) = p.dims(&config);
                    Some(LoraAdapter::init(i, o, config.adapter_rank, config.alpha(), &mut rng)?)
                } else {
                    None
                };
                linears.push(Linear { base, adapter });
            }
            let mut it = linears.into_iter();
            let mut next = || it.next().expect("six projections");
            blocks.push(Block {
                ln1: LayerNormParams::new(d),
                q: next(),
                k: next(),
                v: next(),
                o: next(),
                ln2: LayerNormParams::new(d),
                ff_up: next(),
                ff_down: next(),
            });
        }
        Ok(Self {
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNormParams::new(d),
            head,
            config,
        })
    }

    /// Copy with every quantized base replaced by its dequantized dense form.
    pub fn dequantized(&self) -> Result<Self> {
        let mut out = self.clone();
        for block in &mut out.blocks {
            for p in Projection::ALL {
                let lin = block.linear_mut(p);
                lin.base = BaseWeight::Dense(lin.base.dense()?);
            }
        }
        out.config.quantize_base = false;
        Ok(out)
    }

    /// Trainable tensors in a fixed order: adapters (layer-major, projection
    /// order), then embeddings and head when requested.
    pub fn trainable_params(&self, include_embeddings: bool) -> Vec<ParamRef> {
        let mut out = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            for p in Projection::ALL {
                if block.linear(p).adapter.is_some() {
                    out.push(ParamRef::AdapterDown(l, p));
                    out.push(ParamRef::AdapterUp(l, p));
                }
            }
        }
        if include_embeddings {
            out.extend([ParamRef::TokenEmbedding, ParamRef::PositionEmbedding, ParamRef::Head]);
        }
        out
    }

    pub fn param(&self, r: ParamRef) -> Option<&Tensor> {
        match r {
            ParamRef::TokenEmbedding => Some(&self.tok_emb),
            ParamRef::PositionEmbedding => Some(&self.pos_emb),
            ParamRef::Head => Some(&self.head),
            ParamRef::AdapterDown(l, p) => self.blocks.get(l)?.linear(p).adapter.as_ref().map(|a| &a.down),
            ParamRef::AdapterUp(l, p) => self.blocks.get(l)?.linear(p).adapter.as_ref().map(|a| &a.up),
        }
    }

    pub fn param_mut(&mut self, r: ParamRef) -> Option<&mut Tensor> {
        match r {
            ParamRef::TokenEmbedding => Some(&mut self.tok_emb),
            ParamRef::PositionEmbedding => Some(&mut self.pos_emb),
            ParamRef::Head => Some(&mut self.head),
            ParamRef::AdapterDown(l, p) => self
                .blocks
                .get_mut(l)?
                .linear_mut(p)
                .adapter
                .as_mut()
                .map(|a| &mut a.down),
            ParamRef::AdapterUp(l, p) => self
                .blocks
                .get_mut(l)?
                .linear_mut(p)
                .adapter
                .as_mut()
                .map(|a| &mut a.up),
        }
    }

    fn check_tokens(&self, tokens: &[Vec<TokenId>]) -> Result<(usize, usize)> {
        let b = tokens.len();
        let t = tokens.first().map_or(0, Vec::len);
        if b == 0 || t == 0 {
            return Err(Error::invalid("empty token batch"));
        }
        if tokens.iter().any(|s| s.len() != t) {
            return Err(Error::invalid("ragged token batch; pad sequences to one length"));
        }
        if t > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {t} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let v = self.config.vocab_size;
        if let Some(bad) = tokens.iter().flatten().find(|&&id| id as usize >= v) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary of {v}"
            )));
        }
        Ok((b, t))
    }

    /// Puts every weight on `tape` once. Adapters always carry gradients;
    /// embeddings and head do when `grad_embeddings` is set. The returned
    /// handles can drive several forward passes that share one backward.
    pub fn register(&self, tape: &mut Tape, grad_embeddings: bool) -> Result<Leaves> {
        let mut params = Vec::new();
        let leaf = |tape: &mut Tape, tensor: &Tensor| {
            let mut copy = tensor.clone();
            copy.set_requires_grad(grad_embeddings);
            tape.leaf(copy)
        };
        let tok = leaf(tape, &self.tok_emb);
        let pos = leaf(tape, &self.pos_emb);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let ln1 = (tape.leaf(block.ln1.gamma.clone()), tape.leaf(block.ln1.beta.clone()));
            let ln2 = (tape.leaf(block.ln2.gamma.clone()), tape.leaf(block.ln2.beta.clone()));
            let mut linears = Vec::with_capacity(6);
            for p in Projection::ALL {
                let lin = block.linear(p);
                let mut base = lin.base.dense()?;
                base.set_requires_grad(false);
                let base = tape.leaf(base);
                let ids = lin.adapter.as_ref().map(|a| a.register(tape));
                if let Some(ids) = ids {
                    params.push((ParamRef::AdapterDown(l, p), ids.down));
                    params.push((ParamRef::AdapterUp(l, p), ids.up));
                }
                linears.push((base, ids));
            }
            blocks.push(BlockLeaves { ln1, ln2, linears });
        }
        let ln_f = (tape.leaf(self.ln_f.gamma.clone()), tape.leaf(self.ln_f.beta.clone()));
        let head = leaf(tape, &self.head);
        if grad_embeddings {
            params.extend([
                (ParamRef::TokenEmbedding, tok),
                (ParamRef::PositionEmbedding, pos),
                (ParamRef::Head, head),
            ]);
        }
        Ok(Leaves {
            tok,
            pos,
            blocks,
            ln_f,
            head,
            params,
        })
    }

    /// One forward pass over registered weights for `tokens` (`B` sequences
    /// of equal length `T`).
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        leaves: &Leaves,
        tokens: &[Vec<TokenId>],
        mode: Mode<'_>,
    ) -> Result<ForwardTrace> {
        let (b, t) = self.check_tokens(tokens)?;
        let cfg = &self.config;
        let d = cfg.d_model;

        let ids: Vec<usize> = tokens.iter().flatten().map(|&i| i as usize).collect();
        let mut x = tape.embedding(leaves.tok, &ids)?;
        let embeddings = x;
        if let Mode::Train { neftune_alpha, rng } = mode {
            if let Some(noise) = neftune_noise(b, t, d, neftune_alpha, rng)? {
                let noise = tape.leaf(noise.reshaped(vec![b * t, d])?);
                x = tape.add(x, noise)?;
            }
        }
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let p = tape.embedding(leaves.pos, &pos_ids)?;
        x = tape.add(x, p)?;

        for bl in &leaves.blocks {
            let lin = |tape: &mut Tape, proj: Projection, input: TensorId| {
                let (base, ids) = bl.linears[proj as usize];
                quant::linear_on_tape(tape, input, base, ids)
            };
            let h = tape.layer_norm(x, bl.ln1.0, bl.ln1.1, LN_EPS)?;
            let q = lin(tape, Projection::Q, h)?;
            let k = lin(tape, Projection::K, h)?;
            let v = lin(tape, Projection::V, h)?;
            let att = causal_attention(tape, q, k, v, b, t, cfg.n_heads)?;
            let o = lin(tape, Projection::O, att)?;
            x = tape.add(x, o)?;

            let h = tape.layer_norm(x, bl.ln2.0, bl.ln2.1, LN_EPS)?;
            let u = lin(tape, Projection::FfUp, h)?;
            let u = tape.gelu(u);
            let dn = lin(tape, Projection::FfDown, u)?;
            x = tape.add(x, dn)?;
        }

        let h = tape.layer_norm(x, leaves.ln_f.0, leaves.ln_f.1, LN_EPS)?;
        let logits = tape.matmul(h, leaves.head)?;
        let logits = tape.reshape(logits, vec![b, t, cfg.vocab_size])?;
        Ok(ForwardTrace {
            logits,
            embeddings,
            params: leaves.params.clone(),
        })
    }

    /// [`register`](Self::register) followed by one [`forward_with`](Self::forward_with).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        tokens: &[Vec<TokenId>],
        mode: Mode<'_>,
        grad_embeddings: bool,
    ) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        let leaves = self.register(tape, grad_embeddings)?;
        self.forward_with(tape, &leaves, tokens, mode)
    }

    /// Builds dense views of every projection for repeated inference.
    pub fn inference(&self) -> Result<InferenceModel<'_>> {
        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut dense = Vec::with_capacity(6);
            for p in Projection::ALL {
                dense.push(block.linear(p).base.dense()?.into_data());
            }
            layers.push(dense);
        }
        Ok(InferenceModel {
            weights: self,
            dense: layers,
        })
    }
}

/// Whether a forward pass is for training (with embedding noise) or inference.
pub enum Mode<'a> {
    Train {
        neftune_alpha: f64,
        rng: &'a mut ChaCha8Rng,
    },
    Infer,
}

/// Tape handles produced by [`ModelWeights::forward_on_tape`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `B × T × V`
    pub logits: TensorId,
    /// Token embeddings before noise and positions, `B·T × d`.
    pub embeddings: TensorId,
    /// Gradient-carrying parameters in registration order.
    pub params: Vec<(ParamRef, TensorId)>,
}

/// Tape handles for every weight of a registered model.
#[derive(Debug, Clone)]
pub struct Leaves {
    tok: TensorId,
    pos: TensorId,
    blocks: Vec<BlockLeaves>,
    ln_f: (TensorId, TensorId),
    head: TensorId,
    /// Gradient-carrying parameters in registration order.
    pub params: Vec<(ParamRef, TensorId)>,
}

#[derive(Debug, Clone)]
struct BlockLeaves {
    ln1: (TensorId, TensorId),
    ln2: (TensorId, TensorId),
    /// Indexed by `Projection as usize`.
    linears: Vec<(TensorId, Option<AdapterIds>)>,
}

fn causal_attention(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<TensorId> {
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut rows = Vec::with_capacity(batch);
    for b in 0..batch {
        let r = b * seq..(b + 1) * seq;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let c = h * dh..(h + 1) * dh;
            let qs = tape.slice(q, r.clone(), c.clone())?;
            let ks = tape.slice(k, r.clone(), c.clone())?;
            let vs = tape.slice(v, r.clone(), c)?;
            let kt = tape.transpose(ks)?;
            let scores = tape.matmul(qs, kt)?;
            let scores = tape.scale(scores, inv_sqrt);
            let probs = tape.causal_softmax(scores)?;
            outs.push(tape.matmul(probs, vs)?);
        }
        rows.push(if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? });
    }
    if batch == 1 {
        Ok(rows[0])
    } else {
        tape.concat_rows(&rows)
    }
}

/// Uniform noise `alpha / sqrt(L·d) · U(-1, 1)` for a `B × L × d` batch, or
/// `None` when `alpha` is zero (no draws are made).
fn neftune_noise(b: usize, l: usize, d: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Option<Tensor>> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::invalid(format!("neftune alpha must be >= 0, got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(None);
    }
    let scale = alpha / ((l * d) as f64).sqrt();
    let data = (0..b * l * d).map(|_| scale * rng.gen_range(-1.0..=1.0)).collect();
    Ok(Some(Tensor::new(vec![b, l, d], data)?))
}

/// Adds training-time embedding noise to a `B × L × d` embedding batch.
pub fn apply_neftune(emb: &Tensor, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let &[b, l, d] = emb.shape() else {
        return Err(Error::Shape {
            op: "apply_neftune",
            left: emb.shape().to_vec(),
            right: vec![],
        });
    };
    if !emb.is_finite() {
        return Err(Error::invalid("non-finite embeddings"));
    }
    match neftune_noise(b, l, d, alpha, rng)? {
        None => Ok(emb.clone()),
        Some(noise) => {
            let data = emb.data().iter().zip(noise.data()).map(|(e, n)| e + n).collect();
            Tensor::new(emb.shape().to_vec(), data)
        }
    }
}

/// Logits `B × T × V` for a token batch.
pub fn forward_logits(tokens: &[Vec<TokenId>], weights: &ModelWeights, mode: Mode<'_>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let trace = weights.forward_on_tape(&mut tape, tokens, mode, false)?;
    Ok(tape.value(trace.logits).clone())
}

/// Frozen, dequantized view of a model for token-by-token decoding.
pub struct InferenceModel<'a> {
    weights: &'a ModelWeights,
    /// Dense base per layer, in [`Projection::ALL`] order.
    dense: Vec<Vec<Vec<f64>>>,
}

impl<'a> InferenceModel<'a> {
    pub fn weights(&self) -> &'a ModelWeights {
        self.weights
    }

    pub fn session(&self) -> DecoderSession<'_, 'a> {
        let n = self.weights.blocks.len();
        DecoderSession {
            model: self,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    fn project(&self, layer: usize, p: Projection, x: &[f64]) -> Vec<f64> {
        let cfg = &self.weights.config;
        let (i, o) = p.dims(cfg);
        let idx = Projection::ALL.iter().position(|q| *q == p).expect("known projection");
        let mut y = gemm(x, &self.dense[layer][idx], 1, i, o);
        if let Some(ad) = &self.weights.blocks[layer].linear(p).adapter {
            let r = ad.rank();
            let h = gemm(x, ad.down.data(), 1, i, r);
            let delta = gemm(&h, ad.up.data(), 1, r, o);
            let s = ad.scaling();
            for (yj, dj) in y.iter_mut().zip(delta) {
                *yj += dj * s;
            }
        }
        y
    }
}

/// Per-sequence key/value cache over an [`InferenceModel`].
pub struct DecoderSession<'m, 'a> {
    model: &'m InferenceModel<'a>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl DecoderSession<'_, '_> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends one token and returns the next-token logits.
    pub fn step(&mut self, token: TokenId) -> Result<Vec<f64>> {
        let w = self.model.weights;
        let cfg = &w.config;
        if self.len >= cfg.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length would exceed max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::invalid(format!("token id {token} out of range")));
        }
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let t = self.len;
        let mut x: Vec<f64> = w.tok_emb.data()[token as usize * d..(token as usize + 1) * d]
            .iter()
            .zip(&w.pos_emb.data()[t * d..(t + 1) * d])
            .map(|(a, b)| a + b)
            .collect();

        for (l, block) in w.blocks.iter().enumerate() {
            let h = layer_norm_row(&x, &block.ln1);
            let q = self.model.project(l, Projection::Q, &h);
            let k = self.model.project(l, Projection::K, &h);
            let v = self.model.project(l, Projection::V, &h);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let n = t + 1;
            let inv_sqrt = 1.0 / (dh as f64).sqrt();
            let mut att = vec![0.0; d];
            for head in 0..cfg.n_heads {
                let off = head * dh;
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        let kj = &self.keys[l][j * d + off..j * d + off + dh];
                        let mut dot = 0.0;
                        for (a, b) in q[off..off + dh].iter().zip(kj) {
                            dot += a * b;
                        }
                        dot * inv_sqrt
                    })
                    .collect();
                let probs = softmax_row(&scores);
                for (j, p) in probs.iter().enumerate() {
                    let vj = &self.values[l][j * d + off..j * d + off + dh];
                    for (o, vv) in att[off..off + dh].iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
            let o = self.model.project(l, Projection::O, &att);
            for (xi, oi) in x.iter_mut().zip(o) {
                *xi += oi;
            }
            let h = layer_norm_row(&x, &block.ln2);
            let u: Vec<f64> = self
                .model
                .project(l, Projection::FfUp, &h)
                .into_iter()
                .map(gelu)
                .collect();
            let dn = self.model.project(l, Projection::FfDown, &u);
            for (xi, di) in x.iter_mut().zip(dn) {
                *xi += di;
            }
        }
        let h = layer_norm_row(&x, &w.ln_f);
        self.len += 1;
        Ok(gemm(&h, w.head.data(), 1, d, cfg.vocab_size))
    }

    /// Feeds a whole prompt; returns the logits after its last token.
    pub fn prefill(&mut self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let mut last = Err(Error::invalid("empty prompt"));
        for &tok in tokens {
            last = self.step(tok);
            last.as_ref().map_err(|e| Error::invalid(e.to_string()))?;
        }
        last
    }
}

fn layer_norm_row(x: &[f64], p: &LayerNormParams) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(p.gamma.data().iter().zip(p.beta.data()))
        .map(|(v, (g, b))| (v - mean) * rstd * g + b)
        .collect()
}
