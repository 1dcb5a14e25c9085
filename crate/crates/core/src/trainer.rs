//! Training loops for all three phases, evaluation, metrics files, and
//! resumable state.
//!
//! One generic step loop drives plain task training (teacher and the FT
//! baseline), filter training on a frozen backbone, and student
//! distillation; the phases differ only in their parameter set and loss
//! closure. Everything is derived deterministically from the config seed:
//! identical config + seed reproduces identical parameter trajectories and
//! metric rows (wall-clock milliseconds excepted).

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{batch_iter, Batch, TaskDataset, TaskKind};
use crate::distill::{stage2_objective_on, DistillConfig, DistillContext, LayerMap, SideTransform};
use crate::error::{Error, Result};
use crate::filters::{stage1_loss, FilterBank};
use crate::model::TransformerModel;
use crate::optim::{adamw_step, lr_schedule, OptimHyper, TrainStage, TrainState};
use crate::tensor::Tensor;

pub const EVAL_BATCH_SIZE: usize = 64;

/// Stable sub-seed derivation: sha256 over (base, tag, n).
pub fn derive_seed(base: u64, tag: &str, n: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(n.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Loss decomposition produced by one training step.
pub struct StepParts {
    pub total: Tensor<f32>,
    pub task: f64,
    pub pred: f64,
    pub distill: f64,
    pub per_layer: Vec<f64>,
}

/// Writes the per-interval metrics file
/// (step, lr, task_loss, pred_loss, distill_loss, per_layer_distill_mean,
/// wall_ms) and, when per-layer terms exist, a companion per-layer file.
pub struct MetricsWriter {
    metrics: BufWriter<File>,
    layers: Option<BufWriter<File>>,
    interval: u64,
    start: Instant,
}

impl MetricsWriter {
    pub fn create(
        metrics_path: &Path,
        layers: Option<(&Path, usize)>,
        interval: u64,
        append: bool,
    ) -> Result<MetricsWriter> {
        let open = |path: &Path| -> Result<BufWriter<File>> {
            let file = if append {
                OpenOptions::new().create(true).append(true).open(path)?
            } else {
                File::create(path)?
            };
            Ok(BufWriter::new(file))
        };
        let mut metrics = open(metrics_path)?;
        if !append {
            writeln!(
                metrics,
                "step,lr,task_loss,pred_loss,distill_loss,per_layer_distill_mean,wall_ms"
            )?;
        }
        let layers = match layers {
            Some((path, count)) => {
                let mut w = open(path)?;
                if !append {
                    let cols: Vec<String> = (0..count).map(|k| format!("layer_{k}")).collect();
                    writeln!(w, "step,{}", cols.join(","))?;
                }
                Some(w)
            }
            None => None,
        };
        Ok(MetricsWriter {
            metrics,
            layers,
            interval: interval.max(1),
            start: Instant::now(),
        })
    }

    /// Discarding writer for callers that do not keep curves.
    pub fn sink(interval: u64) -> Result<MetricsWriter> {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("ted-metrics-sink-{}.csv", std::process::id()));
        MetricsWriter::create(&path, None, interval, false)
    }

    fn log(&mut self, step: u64, total_steps: u64, lr: f64, parts: &StepParts) -> Result<()> {
        if step % self.interval != 0 && step != total_steps {
            return Ok(());
        }
        let per_layer_mean = if parts.per_layer.is_empty() {
            0.0
        } else {
            parts.per_layer.iter().sum::<f64>() / parts.per_layer.len() as f64
        };
        writeln!(
            self.metrics,
            "{step},{lr:.8},{:.6},{:.6},{:.6},{:.6},{}",
            parts.task,
            parts.pred,
            parts.distill,
            per_layer_mean,
            self.start.elapsed().as_millis()
        )?;
        if let Some(w) = self.layers.as_mut() {
            if !parts.per_layer.is_empty() {
                let cols: Vec<String> =
                    parts.per_layer.iter().map(|v| format!("{v:.6}")).collect();
                writeln!(w, "{step},{}", cols.join(","))?;
            }
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        if let Some(w) = self.layers.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

/// Total optimizer steps for a dataset/hyper pair, fixed up front so the
/// linear schedule is well-defined.
pub fn total_steps(train_len: usize, hyper: &OptimHyper) -> u64 {
    (train_len.div_ceil(hyper.batch_size) * hyper.epochs) as u64
}

/// The generic step loop. `params` must contain every parameter that can
/// appear in the loss graph, frozen ones included; only unfrozen ones are
/// updated (a gradient on a frozen one is an error). Resumes from `state`
/// when given; stops early after `stop_after` total steps when given.
pub fn train_loop<F>(
    train: &TaskDataset,
    hyper: &OptimHyper,
    stage: TrainStage,
    params: &[(String, Tensor<f32>)],
    state: Option<TrainState<f32>>,
    stop_after: Option<u64>,
    writer: &mut MetricsWriter,
    mut step_fn: F,
) -> Result<TrainState<f32>>
where
    F: FnMut(&Batch, &mut ChaCha8Rng) -> Result<StepParts>,
{
    hyper.validate()?;
    let batches_per_epoch = train.len().div_ceil(hyper.batch_size) as u64;
    let total = batches_per_epoch * hyper.epochs as u64;
    let mut state = state.unwrap_or_else(|| {
        TrainState::new(stage, derive_seed(hyper.seed, "train-rng", 0))
    });
    let frozen: Vec<String> = params
        .iter()
        .filter(|(_, p)| !p.requires_grad())
        .map(|(n, _)| n.clone())
        .collect();
    state.mark_frozen(frozen);

    if state.step >= total {
        writer.flush()?;
        return Ok(state);
    }
    let start_epoch = state.step / batches_per_epoch;
    'outer: for epoch in start_epoch..hyper.epochs as u64 {
        let shuffle_seed = derive_seed(hyper.seed, "shuffle", epoch);
        let batches = batch_iter(train, hyper.batch_size, shuffle_seed, true)?;
        let skip = if state.step / batches_per_epoch == epoch {
            (state.step % batches_per_epoch) as usize
        } else {
            0
        };
        for batch in batches.iter().skip(skip) {
            let lr = lr_schedule(state.step, total, hyper.warmup_ratio, hyper.base_lr);
            for (_, p) in params {
                p.zero_grad();
            }
            let parts = step_fn(batch, &mut state.rng)?;
            parts.total.backward()?;
            adamw_step(params, &mut state, hyper, lr)?;
            writer.log(state.step, total, lr, &parts)?;
            if stop_after.is_some_and(|stop| state.step >= stop) {
                break 'outer;
            }
        }
    }
    writer.flush()?;
    Ok(state)
}

/// Plain task training: the teacher run, the FT baseline, and the optional
/// student fine-tune before filter training.
pub fn train_model(
    model: &TransformerModel,
    train: &TaskDataset,
    hyper: &OptimHyper,
    state: Option<TrainState<f32>>,
    stop_after: Option<u64>,
    writer: &mut MetricsWriter,
) -> Result<TrainState<f32>> {
    let params = model.named_params();
    train_loop(
        train,
        hyper,
        TrainStage::TaskTraining,
        &params,
        state,
        stop_after,
        writer,
        |batch, rng| {
            let out = model.forward_batch_train(batch, rng)?;
            let total = model.task_loss_on(&out, batch)?;
            let task = total.item()? as f64;
            Ok(StepParts {
                total,
                task,
                pred: 0.0,
                distill: 0.0,
                per_layer: Vec::new(),
            })
        },
    )
}

/// Filter training on a frozen backbone. The bank is updated in place; the
/// backbone must already be frozen and is bit-identical afterwards.
pub fn train_filter_bank(
    model: &TransformerModel,
    bank: &FilterBank,
    train: &TaskDataset,
    hyper: &OptimHyper,
    state: Option<TrainState<f32>>,
    stop_after: Option<u64>,
    writer: &mut MetricsWriter,
) -> Result<TrainState<f32>> {
    if !model.all_frozen() {
        return Err(Error::Freeze(
            "filter training requires a frozen backbone".into(),
        ));
    }
    let mut params = bank.named_params();
    params.extend(
        model
            .named_params()
            .into_iter()
            .map(|(n, p)| (format!("backbone.{n}"), p)),
    );
    train_loop(
        train,
        hyper,
        TrainStage::FilterTraining,
        &params,
        state,
        stop_after,
        writer,
        |batch, _rng| {
            let out = stage1_loss(model, bank, batch)?;
            let task = out.total.item()? as f64;
            Ok(StepParts {
                total: out.total,
                task,
                pred: 0.0,
                distill: 0.0,
                per_layer: out.per_filter,
            })
        },
    )
}

/// Everything the distillation stage trains and compares against.
pub struct Stage2Setup<'a> {
    pub cfg: &'a DistillConfig,
    pub map: &'a LayerMap,
    pub student: &'a TransformerModel,
    pub teacher: Option<&'a TransformerModel>,
    /// Frozen teacher-side filters; absent means raw teacher hidden states.
    pub teacher_bank: Option<&'a FilterBank>,
    /// Trainable student-side filters.
    pub student_bank: Option<&'a FilterBank>,
    /// Trainable projections: the LWD projections, or the student-side
    /// fallback when it has no filters but widths differ.
    pub projections: Option<&'a [Tensor<f32>]>,
}

/// Student distillation (all four modes). Trains the student plus its
/// filters/projections; the teacher side must be frozen.
pub fn run_stage2(
    setup: &Stage2Setup,
    train: &TaskDataset,
    hyper: &OptimHyper,
    state: Option<TrainState<f32>>,
    stop_after: Option<u64>,
    writer: &mut MetricsWriter,
) -> Result<TrainState<f32>> {
    let mut params = setup.student.named_params();
    if let Some(bank) = setup.student_bank {
        params.extend(
            bank.named_params()
                .into_iter()
                .map(|(n, p)| (format!("student.{n}"), p)),
        );
    }
    if let Some(projections) = setup.projections {
        for (k, w) in projections.iter().enumerate() {
            params.push((format!("proj.{k}"), w.clone()));
        }
    }
    if let Some(teacher) = setup.teacher {
        params.extend(
            teacher
                .named_params()
                .into_iter()
                .map(|(n, p)| (format!("teacher.{n}"), p)),
        );
    }
    if let Some(bank) = setup.teacher_bank {
        params.extend(
            bank.named_params()
                .into_iter()
                .map(|(n, p)| (format!("teacher.{n}"), p)),
        );
    }

    let ctx = DistillContext {
        teacher: setup.teacher,
        teacher_side: setup.teacher_bank.map(SideTransform::Bank).or(Some(
            SideTransform::Identity,
        )),
        student_side: match (setup.student_bank, setup.projections) {
            (Some(bank), _) => Some(SideTransform::Bank(bank)),
            (None, Some(p)) => Some(SideTransform::Projections(p)),
            (None, None) => Some(SideTransform::Identity),
        },
        projections: setup.projections,
        map: setup.map,
    };

    train_loop(
        train,
        hyper,
        TrainStage::Distillation,
        &params,
        state,
        stop_after,
        writer,
        |batch, rng| {
            let out = setup.student.forward_batch_train(batch, rng)?;
            let parts = stage2_objective_on(setup.cfg, batch, setup.student, &out, &ctx)?;
            Ok(StepParts {
                total: parts.total,
                task: parts.task,
                pred: parts.pred,
                distill: parts.distill,
                per_layer: parts.per_layer,
            })
        },
    )
}

/// Deterministic evaluation metrics for a checkpointed model.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub kind: TaskKind,
    /// Mean NLL per next-token position (LM) or mean cross-entropy (cls).
    pub loss: f64,
    pub metric_name: &'static str,
    pub metric_value: f64,
    pub n_samples: usize,
}

impl EvalMetrics {
    pub fn csv_header() -> &'static str {
        "split,loss,metric,value,n_samples"
    }

    pub fn csv_row(&self, split: &str) -> String {
        format!(
            "{split},{:.6},{},{:.6},{}",
            self.loss, self.metric_name, self.metric_value, self.n_samples
        )
    }
}

/// LM: perplexity = exp(mean next-token NLL). Classification: accuracy.
pub fn evaluate(model: &TransformerModel, dataset: &TaskDataset) -> Result<EvalMetrics> {
    let batches = batch_iter(dataset, EVAL_BATCH_SIZE, 0, false)?;
    match dataset.kind {
        TaskKind::CausalLm => {
            let mut nll_sum = 0.0f64;
            let mut positions = 0usize;
            for batch in &batches {
                let loss = model.task_loss(batch)?.item()? as f64;
                let n = batch.batch_size * (batch.seq_len - 1);
                nll_sum += loss * n as f64;
                positions += n;
            }
            let loss = nll_sum / positions as f64;
            Ok(EvalMetrics {
                kind: TaskKind::CausalLm,
                loss,
                metric_name: "ppl",
                metric_value: loss.exp(),
                n_samples: dataset.len(),
            })
        }
        TaskKind::Classification => {
            let mut correct = 0usize;
            let mut loss_sum = 0.0f64;
            for batch in &batches {
                let out = model.forward_batch(batch)?;
                let labels = batch
                    .labels
                    .as_deref()
                    .ok_or_else(|| Error::Contract("evaluation needs labels".into()))?;
                loss_sum +=
                    (model.task_loss_on(&out, batch)?.item()? as f64) * batch.batch_size as f64;
                let logits = out.logits.to_vec();
                let classes = out.logits.shape()[1];
                for (i, &label) in labels.iter().enumerate() {
                    let row = &logits[i * classes..(i + 1) * classes];
                    let argmax = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                        .map(|(j, _)| j)
                        .expect("non-empty row");
                    if argmax == label as usize {
                        correct += 1;
                    }
                }
            }
            Ok(EvalMetrics {
                kind: TaskKind::Classification,
                loss: loss_sum / dataset.len() as f64,
                metric_name: "accuracy",
                metric_value: correct as f64 / dataset.len() as f64,
                n_samples: dataset.len(),
            })
        }
    }
}

/// Content hash of a model's parameters and config, for freeze-contract
/// assertions.
pub fn model_sha256(model: &TransformerModel) -> String {
    model.to_checkpoint().sha256_hex()
}

pub fn bank_sha256(bank: &FilterBank) -> String {
    bank.to_checkpoint().sha256_hex()
}
