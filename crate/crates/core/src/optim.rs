//! AdamW with decoupled weight decay, a linear warmup/decay schedule, and
//! the serializable training state (moments, step counter, frozen set, rng).

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimizer hyper-parameters. Defaults follow the training recipe used for
/// the language-modeling runs: lr 2.5e-4, warmup ratio 0.05, no weight
/// decay, betas (0.9, 0.98), epsilon 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimHyper {
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global-norm gradient clipping threshold; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper {
            base_lr: 2.5e-4,
            warmup_ratio: 0.05,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-6,
            batch_size: 16,
            epochs: 1,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl OptimHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio {} outside [0, 1)",
                self.warmup_ratio
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::Config(format!("{name} {b} outside (0, 1)")));
            }
        }
        if self.base_lr <= 0.0 || self.epsilon <= 0.0 {
            return Err(Error::Config(
                "base_lr and epsilon must be positive".into(),
            ));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `base_lr` over `warmup_ratio * total_steps`, then
/// linear decay to 0 at `total_steps`. Steps past the end clamp to 0 with a
/// warning.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_ratio: f64, base_lr: f64) -> f64 {
    if step > total_steps {
        log::warn!("lr_schedule: step {step} past total {total_steps}; clamping lr to 0");
        return 0.0;
    }
    let total = total_steps as f64;
    let warmup = warmup_ratio * total;
    let s = step as f64;
    if warmup > 0.0 && s < warmup {
        base_lr * s / warmup
    } else if total > warmup {
        base_lr * (total - s) / (total - warmup)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    /// Plain task training (teacher runs and the FT baseline).
    TaskTraining,
    /// Filter training on a frozen backbone.
    FilterTraining,
    /// Student distillation.
    Distillation,
}

impl TrainStage {
    pub fn name(self) -> &'static str {
        match self {
            TrainStage::TaskTraining => "task",
            TrainStage::FilterTraining => "stage1",
            TrainStage::Distillation => "stage2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "task" => Ok(TrainStage::TaskTraining),
            "stage1" => Ok(TrainStage::FilterTraining),
            "stage2" => Ok(TrainStage::Distillation),
            other => Err(Error::Format(format!("unknown stage {other:?}"))),
        }
    }
}

struct Moments<S> {
    m: Vec<S>,
    v: Vec<S>,
}

/// Optimizer state: step counter, per-parameter moments keyed by name, the
/// frozen-name set, the stage marker, and the training rng.
pub struct TrainState<S: Scalar> {
    pub step: u64,
    pub stage: TrainStage,
    pub rng: ChaCha8Rng,
    frozen: BTreeSet<String>,
    moments: HashMap<String, Moments<S>>,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(stage: TrainStage, rng_seed: u64) -> TrainState<S> {
        TrainState {
            step: 0,
            stage,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            frozen: BTreeSet::new(),
            moments: HashMap::new(),
        }
    }

    pub fn mark_frozen(&mut self, names: impl IntoIterator<Item = String>) {
        self.frozen.extend(names);
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn save_into(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.put_meta("state.step", self.step)?;
        ck.put_meta("state.stage", self.stage.name())?;
        ck.put_meta(
            "state.rng_seed",
            crate::checkpoint::hex(&self.rng.get_seed()),
        )?;
        ck.put_meta("state.rng_word_pos", self.rng.get_word_pos())?;
        ck.put_meta(
            "state.frozen",
            self.frozen.iter().cloned().collect::<Vec<_>>().join(","),
        )?;
        for (name, m) in &self.moments {
            ck.put_tensor(&format!("state.m.{name}"), &Tensor::from_vec(&[m.m.len()], m.m.clone())?)?;
            ck.put_tensor(&format!("state.v.{name}"), &Tensor::from_vec(&[m.v.len()], m.v.clone())?)?;
        }
        Ok(())
    }

    pub fn load_from(ck: &Checkpoint) -> Result<TrainState<S>> {
        let step: u64 = ck.parse_meta("state.step")?;
        let stage = TrainStage::parse(ck.require_meta("state.stage")?)?;
        let seed_hex = ck.require_meta("state.rng_seed")?;
        if seed_hex.len() != 64 {
            return Err(Error::Format("bad rng seed length".into()));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in seed_hex.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk).map_err(|_| Error::Format("bad hex".into()))?;
            seed[i] = u8::from_str_radix(s, 16).map_err(|_| Error::Format("bad hex".into()))?;
        }
        let word_pos: u128 = ck.parse_meta("state.rng_word_pos")?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(word_pos);
        let frozen: BTreeSet<String> = ck
            .require_meta("state.frozen")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.to_string())
            .collect();
        let mut moments = HashMap::new();
        for name in ck.tensor_names() {
            if let Some(pname) = name.strip_prefix("state.m.") {
                let m: Tensor<S> = ck.tensor(name)?;
                let v: Tensor<S> = ck.tensor(&format!("state.v.{pname}"))?;
                moments.insert(
                    pname.to_string(),
                    Moments {
                        m: m.to_vec(),
                        v: v.to_vec(),
                    },
                );
            }
        }
        Ok(TrainState {
            step,
            stage,
            rng,
            frozen,
            moments,
        })
    }
}

/// One decoupled-weight-decay adaptive update with bias correction.
///
/// Preconditions: gradients are present for exactly the unfrozen parameters.
/// A gradient on a frozen parameter is a freeze-contract error; frozen
/// parameters are never touched and hold no moment entries.
pub fn adamw_step<S: Scalar>(
    params: &[(String, Tensor<S>)],
    state: &mut TrainState<S>,
    hyper: &OptimHyper,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step;

    // Optional global-norm clip over the unfrozen gradients.
    let mut scale = 1.0f64;
    if let Some(max_norm) = hyper.grad_clip {
        let mut sq = 0.0f64;
        for (name, p) in params {
            if state.frozen.contains(name) || !p.requires_grad() {
                continue;
            }
            if let Some(g) = p.grad() {
                sq += g.iter().map(|&v| v.to_f64() * v.to_f64()).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if norm > max_norm {
            scale = max_norm / norm;
        }
    }

    let b1 = S::from_f64(hyper.beta1);
    let b2 = S::from_f64(hyper.beta2);
    let one = S::one();
    let eps = S::from_f64(hyper.epsilon);
    let lr_s = S::from_f64(lr);
    let wd = S::from_f64(hyper.weight_decay);
    let bc1 = S::from_f64(1.0 - hyper.beta1.powi(t as i32));
    let bc2 = S::from_f64(1.0 - hyper.beta2.powi(t as i32));
    let clip = S::from_f64(scale);

    for (name, p) in params {
        let frozen = state.frozen.contains(name) || !p.requires_grad();
        let grad = p.grad();
        if frozen {
            if grad.is_some() {
                return Err(Error::Freeze(format!(
                    "gradient present for frozen parameter {name}"
                )));
            }
            continue;
        }
        let grad = grad.ok_or_else(|| {
            Error::Contract(format!("missing gradient for trainable parameter {name}"))
        })?;
        let entry = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![S::zero(); grad.len()],
            v: vec![S::zero(); grad.len()],
        });
        p.update_data(|data| {
            for i in 0..data.len() {
                let g = grad[i] * clip;
                entry.m[i] = b1 * entry.m[i] + (one - b1) * g;
                entry.v[i] = b2 * entry.v[i] + (one - b2) * g * g;
                let m_hat = entry.m[i] / bc1;
                let v_hat = entry.v[i] / bc2;
                data[i] = data[i] - lr_s * (m_hat / (v_hat.sqrt() + eps) + wd * data[i]);
            }
        });
    }
    Ok(())
}
