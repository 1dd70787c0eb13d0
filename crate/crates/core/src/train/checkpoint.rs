//! Binary checkpoint: `MOR1`, u32 version, u64 header length, a text header of
//! `key: value` lines, then little-endian f64 arrays in declared order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamW, EpochOrder, TrainConfig, Trainer};
use crate::dataprep::RenderOptions;
use crate::error::{Error, Result};
use crate::model::{BaseWeight, ModelConfig, ModelWeights, Projection};
use crate::quant::{GroupConstants, QuantizedTensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MOR1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed rng state".into());
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad())?
            .try_into()
            .map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

pub fn config_hash(cfg: &ModelConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(cfg)?)))
}

fn linear_name(l: usize, p: Projection) -> String {
    format!("layers.{l}.{p}")
}

fn weight_arrays(w: &ModelWeights) -> Vec<(String, Vec<f64>)> {
    let mut out = vec![
        ("tok_emb".to_string(), w.tok_emb.data().to_vec()),
        ("pos_emb".to_string(), w.pos_emb.data().to_vec()),
        ("head".to_string(), w.head.data().to_vec()),
        ("ln_f.gamma".to_string(), w.ln_f.gamma.data().to_vec()),
        ("ln_f.beta".to_string(), w.ln_f.beta.data().to_vec()),
    ];
    for (l, block) in w.blocks.iter().enumerate() {
        for (tag, ln) in [("ln1", &block.ln1), ("ln2", &block.ln2)] {
            out.push((format!("layers.{l}.{tag}.gamma"), ln.gamma.data().to_vec()));
            out.push((format!("layers.{l}.{tag}.beta"), ln.beta.data().to_vec()));
        }
        for p in Projection::ALL {
            let lin = block.linear(p);
            let name = linear_name(l, p);
            match &lin.base {
                BaseWeight::Dense(t) => out.push((format!("{name}.base"), t.data().to_vec())),
                BaseWeight::Quantized(q) => {
                    out.push((
                        format!("{name}.codes"),
                        q.packed_codes().iter().map(|&b| f64::from(b)).collect(),
                    ));
                    out.push((
                        format!("{name}.c2"),
                        q.c2_codes().iter().map(|&b| f64::from(b)).collect(),
                    ));
                    out.push((
                        format!("{name}.c1"),
                        q.c1().iter().flat_map(|g| [g.scale, g.offset]).collect(),
                    ));
                }
            }
            if let Some(a) = &lin.adapter {
                out.push((format!("{name}.lora_down"), a.down.data().to_vec()));
                out.push((format!("{name}.lora_up"), a.up.data().to_vec()));
            }
        }
    }
    out
}

fn bytes_of(v: &[f64], name: &str) -> Result<Vec<u8>> {
    v.iter()
        .map(|&x| {
            if x.fract() == 0.0 && (0.0..=255.0).contains(&x) {
                Ok(x as u8)
            } else {
                Err(Error::Checkpoint(format!("{name}: {x} is not a byte")))
            }
        })
        .collect()
}

fn restore_weights(w: &mut ModelWeights, arrays: &mut HashMap<String, Vec<f64>>) -> Result<()> {
    let mut take = |name: &str, len: Option<usize>| -> Result<Vec<f64>> {
        let v = arrays
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
        match len {
            Some(n) if v.len() != n => Err(Error::Checkpoint(format!(
                "{name}: expected {n} values, found {}",
                v.len()
            ))),
            _ => Ok(v),
        }
    };
    let fill = |t: &mut crate::autograd::Tensor, v: Vec<f64>| t.data_mut().copy_from_slice(&v);
    let v = take("tok_emb", Some(w.tok_emb.numel()))?;
    fill(&mut w.tok_emb, v);
    let v = take("pos_emb", Some(w.pos_emb.numel()))?;
    fill(&mut w.pos_emb, v);
    let v = take("head", Some(w.head.numel()))?;
    fill(&mut w.head, v);
    let d = w.config.d_model;
    let v = take("ln_f.gamma", Some(d))?;
    fill(&mut w.ln_f.gamma, v);
    let v = take("ln_f.beta", Some(d))?;
    fill(&mut w.ln_f.beta, v);
    for l in 0..w.blocks.len() {
        for tag in ["ln1", "ln2"] {
            let g = take(&format!("layers.{l}.{tag}.gamma"), Some(d))?;
            let b = take(&format!("layers.{l}.{tag}.beta"), Some(d))?;
            let ln = if tag == "ln1" {
                &mut w.blocks[l].ln1
            } else {
                &mut w.blocks[l].ln2
            };
            fill(&mut ln.gamma, g);
            fill(&mut ln.beta, b);
        }
        for p in Projection::ALL {
            let name = linear_name(l, p);
            let lin = w.blocks[l].linear_mut(p);
            lin.base = match &lin.base {
                BaseWeight::Dense(t) => {
                    let mut t = t.clone();
                    let v = take(&format!("{name}.base"), Some(t.numel()))?;
                    fill(&mut t, v);
                    BaseWeight::Dense(t)
                }
                BaseWeight::Quantized(q) => {
                    let codes = bytes_of(&take(&format!("{name}.codes"), None)?, &name)?;
                    let c2 = bytes_of(&take(&format!("{name}.c2"), None)?, &name)?;
                    let c1_flat = take(&format!("{name}.c1"), None)?;
                    if c1_flat.len() % 2 != 0 {
                        return Err(Error::Checkpoint(format!("{name}.c1 has odd length")));
                    }
                    let c1 = c1_flat
                        .chunks(2)
                        .map(|c| GroupConstants {
                            scale: c[0],
                            offset: c[1],
                        })
                        .collect();
                    BaseWeight::Quantized(
                        QuantizedTensor::from_parts(
                            q.shape().to_vec(),
                            codes,
                            q.block_size_1(),
                            c2,
                            q.block_size_2(),
                            c1,
                        )
                        .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?,
                    )
                }
            };
            if let Some(a) = &mut lin.adapter {
                let v = take(&format!("{name}.lora_down"), Some(a.down.numel()))?;
                fill(&mut a.down, v);
                let v = take(&format!("{name}.lora_up"), Some(a.up.numel()))?;
                fill(&mut a.up, v);
            }
        }
    }
    Ok(())
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let mut arrays = weight_arrays(&trainer.weights);
    for (r, m, v) in &trainer.opt.moments {
        arrays.push((format!("adam.{r}.m"), m.clone()));
        arrays.push((format!("adam.{r}.v"), v.clone()));
    }
    arrays.push((
        "order.perm".into(),
        trainer.order.perm.iter().map(|&i| i as f64).collect(),
    ));

    let mut payload = Vec::with_capacity(arrays.iter().map(|(_, v)| v.len() * 8).sum());
    for (_, v) in &arrays {
        for x in v {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let model_cfg = &trainer.weights.config;
    let mut header = String::new();
    let mut kv = |k: &str, v: String| {
        header.push_str(k);
        header.push_str(": ");
        header.push_str(&v);
        header.push('\n');
    };
    kv("model_config", serde_json::to_string(model_cfg)?);
    kv("model_config_hash", config_hash(model_cfg)?);
    kv("train_config", serde_json::to_string(&trainer.cfg)?);
    kv("render", serde_json::to_string(&trainer.render)?);
    kv("step", trainer.step.to_string());
    kv("adam_t", trainer.opt.t.to_string());
    kv("order_cursor", trainer.order.cursor.to_string());
    kv("order_rng", serde_json::to_string(&RngState::of(&trainer.order.rng))?);
    kv("noise_rng", serde_json::to_string(&RngState::of(&trainer.noise_rng))?);
    for (name, v) in &arrays {
        kv("array", format!("{name} {}", v.len()));
    }
    kv("payload_sha256", hex::encode(Sha256::digest(&payload)));

    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Restores a trainer. When `expected` is given, the stored model
/// configuration must match it exactly.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| corrupt("truncated header"))?;
    let header = std::str::from_utf8(header).map_err(|_| corrupt("header is not text"))?;
    let payload = &bytes[16 + hlen..];

    let mut fields: HashMap<&str, &str> = HashMap::new();
    let mut decls: Vec<(String, usize)> = Vec::new();
    for line in header.lines() {
        let (k, v) = line.split_once(": ").ok_or_else(|| corrupt("malformed header line"))?;
        if k == "array" {
            let (name, len) = v.rsplit_once(' ').ok_or_else(|| corrupt("malformed array line"))?;
            decls.push((name.to_string(), len.parse().map_err(|_| corrupt("bad array length"))?));
        } else {
            fields.insert(k, v);
        }
    }
    let field = |k: &str| fields.get(k).copied().ok_or_else(|| corrupt(&format!("missing {k}")));
    if hex::encode(Sha256::digest(payload)) != field("payload_sha256")? {
        return Err(corrupt("payload hash mismatch"));
    }
    let model_cfg: ModelConfig = serde_json::from_str(field("model_config")?)?;
    if config_hash(&model_cfg)? != field("model_config_hash")? {
        return Err(corrupt("model config hash mismatch"));
    }
    if let Some(exp) = expected {
        if config_hash(exp)? != config_hash(&model_cfg)? {
            return Err(Error::Checkpoint(format!(
                "{} was written for a different model configuration",
                path.display()
            )));
        }
    }
    let train_cfg: TrainConfig = serde_json::from_str(field("train_config")?)?;
    let render: RenderOptions = serde_json::from_str(field("render")?)?;
    let num = |k: &str| -> Result<u64> { field(k)?.parse().map_err(|_| corrupt(&format!("bad {k}"))) };

    let total: usize = decls.iter().map(|(_, n)| n).sum();
    if payload.len() != total * 8 {
        return Err(corrupt("payload length disagrees with declared arrays"));
    }
    let mut arrays = HashMap::with_capacity(decls.len());
    let mut off = 0;
    for (name, n) in decls {
        let v: Vec<f64> = payload[off..off + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        off += n * 8;
        arrays.insert(name, v);
    }

    let mut weights = ModelWeights::init(model_cfg)?;
    restore_weights(&mut weights, &mut arrays)?;
    let mut trainer = Trainer::new(weights, train_cfg, render)?;
    let mut opt = AdamW {
        t: num("adam_t")?,
        moments: trainer.opt.moments.clone(),
    };
    for (r, m, v) in &mut opt.moments {
        for (suffix, dst) in [("m", m), ("v", v)] {
            let name = format!("adam.{r}.{suffix}");
            let src = arrays
                .remove(&name)
                .ok_or_else(|| corrupt(&format!("missing {name}")))?;
            if src.len() != dst.len() {
                return Err(corrupt(&format!("{name} has the wrong length")));
            }
            *dst = src;
        }
    }
    let perm = arrays
        .remove("order.perm")
        .ok_or_else(|| corrupt("missing order.perm"))?
        .into_iter()
        .map(|x| x as usize)
        .collect();
    let order_rng: RngState = serde_json::from_str(field("order_rng")?)?;
    let noise_rng: RngState = serde_json::from_str(field("noise_rng")?)?;
    trainer.opt = opt;
    trainer.step = num("step")?;
    trainer.order = EpochOrder {
        rng: order_rng.restore()?,
        perm,
        cursor: num("order_cursor")? as usize,
    };
    trainer.noise_rng = noise_rng.restore()?;
    if let Some(extra) = arrays.keys().next() {
        return Err(corrupt(&format!("unexpected array {extra}")));
    }
    Ok(trainer)
}
