//! Dual-objective adapter fine-tuning.
//!
//! The code objective trains on the repaired program alone, the guided
//! objective on guidance followed by the program. `morepair` mode sums the
//! two per step as `loss1 + lambda * loss2`; `cot` trains on the guided
//! target alone; `standard` uses the code objective only.

mod checkpoint;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::autograd::{Reduction, Tape, TensorId};
use crate::dataprep::{render_training_pair, Objective, RenderOptions, RenderedPair, RepairExample, PAD};
use crate::error::{Error, Result};
use crate::model::{Leaves, Mode, ModelWeights, ParamRef, TokenId};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Standard,
    #[default]
    Morepair,
    Cot,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveSchedule {
    /// Both objectives on the same batch every step.
    #[default]
    Paired,
    /// Code objective on even steps, guided objective on odd steps.
    Alternating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lambda: f64,
    pub neftune_alpha: f64,
    pub learning_rate: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_reduction: Reduction,
    pub objective_schedule: ObjectiveSchedule,
    /// Fail on examples lacking guidance instead of skipping their guided loss.
    pub strict: bool,
    /// Also train token/position embeddings and the output head.
    pub train_embeddings: bool,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Morepair,
            lambda: 1.0,
            neftune_alpha: 5.0,
            learning_rate: 1e-3,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
            steps: 100,
            batch_size: 1,
            seed: 0,
            loss_reduction: Reduction::Mean,
            objective_schedule: ObjectiveSchedule::Paired,
            strict: true,
            train_embeddings: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.neftune_alpha >= 0.0 && self.neftune_alpha.is_finite()) {
            return fail(format!("neftune_alpha must be >= 0, got {}", self.neftune_alpha));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return fail(format!("adam_betas must lie in [0, 1), got {:?}", self.adam_betas));
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0)
            || !self.weight_decay.is_finite()
            || self.weight_decay < 0.0
        {
            return fail("adam_eps must be > 0 and weight_decay >= 0".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Per-step losses. `loss2` is only ever set in `morepair` mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss1: Option<f64>,
    pub loss2: Option<f64>,
    pub combined: f64,
}

/// Combines already-computed objective losses according to the mode.
pub fn combined_loss(l1: f64, l2: Option<f64>, cfg: &TrainConfig) -> Result<LossBreakdown> {
    match cfg.mode {
        TrainMode::Standard | TrainMode::Cot => Ok(LossBreakdown {
            loss1: Some(l1),
            loss2: None,
            combined: l1,
        }),
        TrainMode::Morepair => match l2 {
            Some(l2) => Ok(LossBreakdown {
                loss1: Some(l1),
                loss2: Some(l2),
                combined: l1 + cfg.lambda * l2,
            }),
            None if cfg.lambda == 0.0 => Ok(LossBreakdown {
                loss1: Some(l1),
                loss2: None,
                combined: l1,
            }),
            None => Err(Error::invalid("morepair mode needs the guided-objective loss")),
        },
    }
}

/// Right-pads pairs into one batch and returns the masked cross-entropy.
pub fn batch_loss_on_tape(
    tape: &mut Tape,
    weights: &ModelWeights,
    leaves: &Leaves,
    pairs: &[&RenderedPair],
    mode: Mode<'_>,
    reduction: Reduction,
) -> Result<TensorId> {
    let views: Vec<_> = pairs.iter().map(|p| p.shifted()).collect();
    let t = views.iter().map(|v| v.0.len()).max().unwrap_or(0);
    if t == 0 {
        return Err(Error::EmptyLoss);
    }
    let mut tokens: Vec<Vec<TokenId>> = Vec::with_capacity(views.len());
    let mut targets = Vec::with_capacity(views.len() * t);
    let mut mask = Vec::with_capacity(views.len() * t);
    for (inp, tgt, m) in views {
        let pad = t - inp.len();
        let mut row = inp;
        row.resize(t, PAD);
        tokens.push(row);
        targets.extend(tgt);
        targets.extend(std::iter::repeat_n(PAD as usize, pad));
        mask.extend(m);
        mask.extend(std::iter::repeat_n(false, pad));
    }
    let fwd = weights.forward_with(tape, leaves, &tokens, mode)?;
    tape.cross_entropy(fwd.logits, &targets, &mask, reduction)
}

fn pair_loss(
    pair: &RenderedPair,
    weights: &ModelWeights,
    cfg: &TrainConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let leaves = weights.register(&mut tape, false)?;
    let mode = match rng {
        Some(rng) => Mode::Train {
            neftune_alpha: cfg.neftune_alpha,
            rng,
        },
        None => Mode::Infer,
    };
    let id = batch_loss_on_tape(&mut tape, weights, &leaves, &[pair], mode, cfg.loss_reduction)?;
    tape.value(id).item()
}

/// Code-objective loss of one pair. With `rng`, embeddings are noised as in training.
pub fn compute_loss1(
    pair: &RenderedPair,
    weights: &ModelWeights,
    cfg: &TrainConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    if pair.objective != Objective::Code {
        return Err(Error::invalid("compute_loss1 needs a code-objective pair"));
    }
    pair_loss(pair, weights, cfg, rng)
}

/// Guided-objective loss of one pair; same machinery over the longer target.
pub fn compute_loss2(
    pair: &RenderedPair,
    weights: &ModelWeights,
    cfg: &TrainConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    if pair.objective != Objective::Guided {
        return Err(Error::invalid("compute_loss2 needs a guided-objective pair"));
    }
    pair_loss(pair, weights, cfg, rng)
}

/// Adaptive-moment optimizer with decoupled weight decay and linear warmup.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub t: u64,
    pub moments: Vec<(ParamRef, Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    fn new(weights: &ModelWeights, params: &[ParamRef]) -> Self {
        let moments = params
            .iter()
            .map(|&r| {
                let n = weights.param(r).expect("listed by the model").numel();
                (r, vec![0.0; n], vec![0.0; n])
            })
            .collect();
        Self { t: 0, moments }
    }

    fn update(&mut self, weights: &mut ModelWeights, grads: &[(ParamRef, Vec<f64>)], cfg: &TrainConfig) {
        self.t += 1;
        let t = self.t as f64;
        let [b1, b2] = cfg.adam_betas;
        let warm = if cfg.warmup_steps == 0 {
            1.0
        } else {
            (self.t as f64 / cfg.warmup_steps as f64).min(1.0)
        };
        let lr = cfg.learning_rate * warm;
        let (c1, c2) = (1.0 - b1.powf(t), 1.0 - b2.powf(t));
        for (r, m, v) in &mut self.moments {
            let Some((_, g)) = grads.iter().find(|(gr, _)| gr == r) else {
                continue;
            };
            let p = weights.param_mut(*r).expect("listed by the model").data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + cfg.weight_decay * p[i]);
            }
        }
    }
}

/// Deterministic epoch-shuffled example order.
#[derive(Debug, Clone, PartialEq)]
struct EpochOrder {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    cursor: usize,
}

impl EpochOrder {
    fn next(&mut self, n: usize) -> usize {
        if self.perm.len() != n || self.cursor == 0 {
            self.perm = (0..n).collect();
            self.perm.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let i = self.perm[self.cursor];
        self.cursor = (self.cursor + 1) % n;
        i
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub losses: LossBreakdown,
}

impl StepRecord {
    /// JSON object; the `loss2` key appears only in `morepair` mode.
    pub fn to_json(&self, mode: TrainMode) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        m.insert("step".into(), self.step.into());
        m.insert("loss1".into(), self.losses.loss1.into());
        if mode == TrainMode::Morepair {
            m.insert("loss2".into(), self.losses.loss2.into());
        }
        m.insert("combined".into(), self.losses.combined.into());
        m.into()
    }
}

/// Owns the model, optimizer and random streams of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub weights: ModelWeights,
    pub cfg: TrainConfig,
    pub render: RenderOptions,
    opt: AdamW,
    step: u64,
    order: EpochOrder,
    noise_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(weights: ModelWeights, cfg: TrainConfig, render: RenderOptions) -> Result<Self> {
        cfg.validate()?;
        let params = weights.trainable_params(cfg.train_embeddings);
        let opt = AdamW::new(&weights, &params);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        noise_rng.set_stream(1);
        Ok(Self {
            order: EpochOrder {
                rng: ChaCha8Rng::seed_from_u64(cfg.seed),
                perm: Vec::new(),
                cursor: 0,
            },
            noise_rng,
            opt,
            step: 0,
            weights,
            cfg,
            render,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    /// Next `batch_size` examples in seeded epoch order.
    pub fn next_batch<'d>(&mut self, data: &'d [RepairExample]) -> Result<Vec<&'d RepairExample>> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        Ok((0..self.cfg.batch_size)
            .map(|_| &data[self.order.next(data.len())])
            .collect())
    }

    /// Draws the next batch from `data` and trains on it.
    pub fn step(&mut self, data: &[RepairExample]) -> Result<StepRecord> {
        let batch: Vec<RepairExample> = self.next_batch(data)?.into_iter().cloned().collect();
        let losses = self.train_step(&batch)?;
        Ok(StepRecord {
            step: self.step,
            losses,
        })
    }

    fn guided_pairs(&self, batch: &[RepairExample]) -> Result<Vec<RenderedPair>> {
        let mut out = Vec::with_capacity(batch.len());
        for ex in batch {
            if ex.guidance.is_none() {
                if self.cfg.strict {
                    return Err(Error::invalid(format!("example {} has no guidance", ex.id)));
                }
                warn!("example {} has no guidance; skipping its guided loss", ex.id);
                continue;
            }
            out.push(render_training_pair(ex, Objective::Guided, &self.render)?);
        }
        Ok(out)
    }

    /// One optimizer update on `batch`; base weights are never modified.
    pub fn train_step(&mut self, batch: &[RepairExample]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let cfg = self.cfg.clone();
        let mut tape = Tape::new();
        let leaves = self.weights.register(&mut tape, cfg.train_embeddings)?;
        let code_pairs = || -> Result<Vec<RenderedPair>> {
            batch
                .iter()
                .map(|ex| render_training_pair(ex, Objective::Code, &self.render))
                .collect()
        };
        let loss = |tape: &mut Tape, pairs: &[RenderedPair], rng: &mut ChaCha8Rng| -> Result<TensorId> {
            let refs: Vec<&RenderedPair> = pairs.iter().collect();
            let mode = Mode::Train {
                neftune_alpha: cfg.neftune_alpha,
                rng,
            };
            batch_loss_on_tape(tape, &self.weights, &leaves, &refs, mode, cfg.loss_reduction)
        };

        let (objective, l1, l2) = match cfg.mode {
            TrainMode::Standard => {
                let l1 = loss(&mut tape, &code_pairs()?, &mut self.noise_rng)?;
                (l1, Some(l1), None)
            }
            TrainMode::Cot => {
                let mut pairs = self.guided_pairs(batch)?;
                if pairs.is_empty() {
                    pairs = code_pairs()?;
                }
                let l = loss(&mut tape, &pairs, &mut self.noise_rng)?;
                (l, Some(l), None)
            }
            TrainMode::Morepair => {
                let guided_turn = cfg.objective_schedule == ObjectiveSchedule::Paired || self.step % 2 == 1;
                let code_turn = cfg.objective_schedule == ObjectiveSchedule::Paired || self.step.is_multiple_of(2);
                let guided = if cfg.lambda != 0.0 && guided_turn {
                    self.guided_pairs(batch)?
                } else {
                    Vec::new()
                };
                let l1 = if code_turn || guided.is_empty() {
                    Some(loss(&mut tape, &code_pairs()?, &mut self.noise_rng)?)
                } else {
                    None
                };
                let l2 = if guided.is_empty() {
                    None
                } else {
                    Some(loss(&mut tape, &guided, &mut self.noise_rng)?)
                };
                let objective = match (l1, l2) {
                    (Some(a), Some(b)) => {
                        let scaled = tape.scale(b, cfg.lambda);
                        tape.add(a, scaled)?
                    }
                    (Some(a), None) => a,
                    (None, Some(b)) => tape.scale(b, cfg.lambda),
                    (None, None) => unreachable!("one objective always runs"),
                };
                (objective, l1, l2)
            }
        };

        let value = |id: Option<TensorId>| id.map(|i| tape.value(i).item()).transpose();
        let losses = LossBreakdown {
            loss1: value(l1)?,
            loss2: value(l2)?,
            combined: tape.value(objective).item()?,
        };
        tape.backward(objective)?;
        let grads: Vec<(ParamRef, Vec<f64>)> = leaves
            .params
            .iter()
            .map(|&(r, id)| (r, tape.grad(id).map(<[f64]>::to_vec).unwrap_or_default()))
            .filter(|(_, g)| !g.is_empty())
            .collect();
        drop(tape);
        self.opt.update(&mut self.weights, &grads, &cfg);
        self.step += 1;
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use crate::dataprep::{encode, VOCAB_SIZE};
    use crate::model::{ModelConfig, Projection};

    fn tiny_model(seed: u64) -> ModelWeights {
        ModelWeights::init(ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 160,
            adapter_targets: Projection::ALL.to_vec(),
            adapter_rank: 2,
            block_size_1: 16,
            block_size_2: 8,
            init_seed: seed,
            init_std: 0.2,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn example(guided: bool) -> RepairExample {
        RepairExample {
            id: "e".into(),
            task_description: "Add.".into(),
            buggy_code: "a-b".into(),
            fixed_code: "a+b".into(),
            guidance: guided.then(|| "Use plus.".into()),
            language_tag: "c".into(),
        }
    }

    #[test]
    fn combined_arithmetic() {
        let cfg = TrainConfig::default();
        assert_eq!(combined_loss(2.0, Some(3.0), &cfg).unwrap().combined, 5.0);
        assert!(combined_loss(2.0, None, &cfg).is_err());
        let zero = TrainConfig {
            lambda: 0.0,
            ..cfg.clone()
        };
        assert_eq!(combined_loss(2.0, Some(3.0), &zero).unwrap().combined, 2.0);
        let std = TrainConfig {
            mode: TrainMode::Standard,
            ..cfg
        };
        let b = combined_loss(2.0, Some(3.0), &std).unwrap();
        assert_eq!((b.combined, b.loss2), (2.0, None));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut w = tiny_model(0);
        w.head = Tensor::zeros(vec![8, VOCAB_SIZE]);
        let cfg = TrainConfig::default();
        let opts = RenderOptions::default();
        let p1 = render_training_pair(&example(true), Objective::Code, &opts).unwrap();
        let p2 = render_training_pair(&example(true), Objective::Guided, &opts).unwrap();
        let ln_v = (VOCAB_SIZE as f64).ln();
        assert!((compute_loss1(&p1, &w, &cfg, None).unwrap() - ln_v).abs() < 1e-12);
        assert!((compute_loss2(&p2, &w, &cfg, None).unwrap() - ln_v).abs() < 1e-12);
        assert!(compute_loss1(&p2, &w, &cfg, None).is_err());
    }

    #[test]
    fn empty_target_is_an_error() {
        let w = tiny_model(0);
        let pair = RenderedPair::new(encode("ab"), vec![], Objective::Code, 0);
        assert!(compute_loss1(&pair, &w, &TrainConfig::default(), None).is_err());
    }

    #[test]
    fn strict_and_lenient_guidance() {
        let data = vec![example(false)];
        let mut t = Trainer::new(tiny_model(1), TrainConfig::default(), RenderOptions::default()).unwrap();
        assert!(t.step(&data).is_err());
        let lenient = TrainConfig {
            strict: false,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(tiny_model(1), lenient, RenderOptions::default()).unwrap();
        let r = t.step(&data).unwrap();
        assert!(r.losses.loss2.is_none());
        assert_eq!(r.losses.loss1, Some(r.losses.combined));
    }

    #[test]
    fn alternating_schedule() {
        let cfg = TrainConfig {
            objective_schedule: ObjectiveSchedule::Alternating,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(tiny_model(2), cfg, RenderOptions::default()).unwrap();
        let data = vec![example(true)];
        let a = t.step(&data).unwrap().losses;
        let b = t.step(&data).unwrap().losses;
        assert!(a.loss1.is_some() && a.loss2.is_none());
        assert!(b.loss1.is_none() && b.loss2.is_some());
    }

    #[test]
    fn log_schema_by_mode() {
        let r = StepRecord {
            step: 1,
            losses: LossBreakdown {
                loss1: Some(1.0),
                loss2: None,
                combined: 1.0,
            },
        };
        assert!(r.to_json(TrainMode::Morepair).get("loss2").is_some());
        assert!(r.to_json(TrainMode::Standard).get("loss2").is_none());
    }

    #[test]
    fn epoch_order_visits_everything() {
        let mut o = EpochOrder {
            rng: ChaCha8Rng::seed_from_u64(0),
            perm: vec![],
            cursor: 0,
        };
        let mut seen: Vec<usize> = (0..5).map(|_| o.next(5)).collect();
        seen.sort_unstable();
        assert_eq!(seen, [0, 1, 2, 3, 4]);
    }
}
