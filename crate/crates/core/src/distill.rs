//! Distillation losses, the layer-mapping policy, and the combined
//! training objective for the distillation stage.

use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::filters::FilterBank;
use crate::model::{ForwardOutput, TransformerModel};
use crate::tensor::Tensor;

/// How student layer k picks its teacher layer M(k).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MapPolicy {
    /// M(k) = k; requires equal depths.
    Identity,
    /// M(k) = 2k - 1 for k <= K/2, else 2k; requires teacher depth 2K.
    SkipAlternate,
    /// Explicit strictly-increasing 1-based teacher indices.
    Explicit(Vec<usize>),
}

impl MapPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            MapPolicy::Identity => "identity",
            MapPolicy::SkipAlternate => "skip-alternate",
            MapPolicy::Explicit(_) => "explicit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMap {
    policy: MapPolicy,
    student_depth: usize,
    teacher_depth: usize,
}

impl LayerMap {
    pub fn new(policy: MapPolicy, student_depth: usize, teacher_depth: usize) -> Result<LayerMap> {
        if student_depth == 0 || teacher_depth == 0 {
            return Err(Error::Param("layer map needs depths of at least 1".into()));
        }
        match &policy {
            MapPolicy::Identity => {
                if student_depth != teacher_depth {
                    return Err(Error::Param(format!(
                        "identity map needs equal depths, got {student_depth} and {teacher_depth}"
                    )));
                }
            }
            MapPolicy::SkipAlternate => {
                if teacher_depth != 2 * student_depth {
                    return Err(Error::Param(format!(
                        "skip-alternate needs teacher depth {} for student depth \
                         {student_depth}, got {teacher_depth}",
                        2 * student_depth
                    )));
                }
            }
            MapPolicy::Explicit(list) => {
                if list.len() != student_depth {
                    return Err(Error::Param(format!(
                        "explicit map has {} entries for student depth {student_depth}",
                        list.len()
                    )));
                }
                for w in list.windows(2) {
                    if w[1] <= w[0] {
                        return Err(Error::Param(format!(
                            "explicit map must be strictly increasing, got {list:?}"
                        )));
                    }
                }
                if list.iter().any(|&v| v == 0 || v > teacher_depth) {
                    return Err(Error::Param(format!(
                        "explicit map entries must lie in 1..={teacher_depth}, got {list:?}"
                    )));
                }
            }
        }
        Ok(LayerMap {
            policy,
            student_depth,
            teacher_depth,
        })
    }

    /// Teacher layer index (1-based) matched with student layer k (1-based).
    pub fn map(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.student_depth {
            return Err(Error::Param(format!(
                "layer index {k} out of range 1..={}",
                self.student_depth
            )));
        }
        Ok(match &self.policy {
            MapPolicy::Identity => k,
            MapPolicy::SkipAlternate => {
                if k <= self.student_depth / 2 {
                    2 * k - 1
                } else {
                    2 * k
                }
            }
            MapPolicy::Explicit(list) => list[k - 1],
        })
    }

    /// All matched teacher indices, in student-layer order.
    pub fn indices(&self) -> Vec<usize> {
        (1..=self.student_depth)
            .map(|k| self.map(k).expect("k is in range"))
            .collect()
    }

    pub fn policy(&self) -> &MapPolicy {
        &self.policy
    }

    pub fn student_depth(&self) -> usize {
        self.student_depth
    }

    pub fn teacher_depth(&self) -> usize {
        self.teacher_depth
    }

    pub fn encode(&self) -> String {
        let list: Vec<String> = self.indices().iter().map(|v| v.to_string()).collect();
        format!(
            "{}:{}:{}:{}",
            self.policy.name(),
            self.student_depth,
            self.teacher_depth,
            list.join(",")
        )
    }

    pub fn decode(s: &str) -> Result<LayerMap> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 4 {
            return Err(Error::Format(format!("bad layer map encoding {s:?}")));
        }
        let student_depth: usize = parts[1]
            .parse()
            .map_err(|_| Error::Format(format!("bad layer map encoding {s:?}")))?;
        let teacher_depth: usize = parts[2]
            .parse()
            .map_err(|_| Error::Format(format!("bad layer map encoding {s:?}")))?;
        let policy = match parts[0] {
            "identity" => MapPolicy::Identity,
            "skip-alternate" => MapPolicy::SkipAlternate,
            "explicit" => {
                let list = parts[3]
                    .split(',')
                    .map(|v| {
                        v.parse::<usize>()
                            .map_err(|_| Error::Format(format!("bad layer map encoding {s:?}")))
                    })
                    .collect::<Result<Vec<usize>>>()?;
                MapPolicy::Explicit(list)
            }
            other => return Err(Error::Format(format!("bad map policy {other:?}"))),
        };
        LayerMap::new(policy, student_depth, teacher_depth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMode {
    Ft,
    Kd,
    Lwd,
    Ted,
}

impl DistillMode {
    pub fn name(self) -> &'static str {
        match self {
            DistillMode::Ft => "ft",
            DistillMode::Kd => "kd",
            DistillMode::Lwd => "lwd",
            DistillMode::Ted => "ted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ft" => Ok(DistillMode::Ft),
            "kd" => Ok(DistillMode::Kd),
            "lwd" => Ok(DistillMode::Lwd),
            "ted" => Ok(DistillMode::Ted),
            other => Err(Error::Param(format!("unknown distillation mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TedVariant {
    Mse,
    Kl,
}

impl TedVariant {
    pub fn name(self) -> &'static str {
        match self {
            TedVariant::Mse => "mse",
            TedVariant::Kl => "kl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(TedVariant::Mse),
            "kl" => Ok(TedVariant::Kl),
            other => Err(Error::Param(format!("unknown ted variant {other:?}"))),
        }
    }
}

/// Filter initialization per side (the ablation axes). The teacher side is
/// restricted to Trained or None.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterInit {
    Trained,
    Random,
    None,
}

impl FilterInit {
    pub fn name(self) -> &'static str {
        match self {
            FilterInit::Trained => "trained",
            FilterInit::Random => "random",
            FilterInit::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "trained" => Ok(FilterInit::Trained),
            "random" => Ok(FilterInit::Random),
            "none" => Ok(FilterInit::None),
            other => Err(Error::Param(format!("unknown filter init {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub mode: DistillMode,
    pub alpha1: f64,
    pub alpha2: f64,
    pub temperature: f64,
    pub ted_variant: TedVariant,
    /// Rescale the prediction (and KL-variant) distillation term by T^2 so
    /// its gradient does not vanish as T grows.
    pub t2_rescale: bool,
    pub teacher_filter_init: FilterInit,
    pub student_filter_init: FilterInit,
}

impl DistillConfig {
    pub fn new(mode: DistillMode) -> DistillConfig {
        let (alpha1, alpha2) = match mode {
            DistillMode::Ft => (0.0, 0.0),
            DistillMode::Kd => (2.5, 0.0),
            _ => (2.5, 0.1),
        };
        DistillConfig {
            mode,
            alpha1,
            alpha2,
            temperature: 2.0,
            ted_variant: TedVariant::Mse,
            t2_rescale: true,
            teacher_filter_init: FilterInit::Trained,
            student_filter_init: FilterInit::Trained,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 {
            return Err(Error::Config("alpha weights must be non-negative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        match self.mode {
            DistillMode::Ft if self.alpha1 != 0.0 || self.alpha2 != 0.0 => {
                return Err(Error::Config(
                    "ft mode forces alpha1 = alpha2 = 0".into(),
                ));
            }
            DistillMode::Kd if self.alpha2 != 0.0 => {
                return Err(Error::Config("kd mode forces alpha2 = 0".into()));
            }
            _ => {}
        }
        if self.teacher_filter_init == FilterInit::Random {
            return Err(Error::Config(
                "teacher filters are either trained or absent, never random".into(),
            ));
        }
        Ok(())
    }
}

/// Temperature-softened prediction distillation: T^2 * KL(p_t || p_s) with
/// the teacher side detached from gradient flow.
pub fn pred_distill_loss(
    logits_t: &Tensor<f32>,
    logits_s: &Tensor<f32>,
    temperature: f64,
    t2_rescale: bool,
) -> Result<Tensor<f32>> {
    if logits_t.shape() != logits_s.shape() {
        return Err(Error::Dim {
            op: "pred_distill_loss",
            lhs: logits_t.shape().to_vec(),
            rhs: logits_s.shape().to_vec(),
        });
    }
    let p = logits_t.detach().softmax_temp(temperature)?;
    let q = logits_s.softmax_temp(temperature)?;
    let kl = p.kl_div(&q)?;
    Ok(if t2_rescale {
        kl.scale(temperature * temperature)
    } else {
        kl
    })
}

fn project_hidden(h: &Tensor<f32>, w: &Tensor<f32>) -> Result<Tensor<f32>> {
    let shape = h.shape().to_vec();
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let out = w.shape()[1];
    h.reshape(&[b * l, d])?.matmul(w)?.reshape(&[b, l, out])
}

/// Conventional layer-wise distillation: sum over matched pairs of the MSE
/// between the teacher hidden state and the linearly projected student
/// hidden state. The teacher side is detached.
pub fn layerwise_loss(
    hidden_t: &[Tensor<f32>],
    hidden_s: &[Tensor<f32>],
    projections: &[Tensor<f32>],
    map: &LayerMap,
) -> Result<(Tensor<f32>, Vec<f64>)> {
    let k = map.student_depth();
    if projections.len() != k {
        return Err(Error::Contract(format!(
            "{} projections for {k} matched layers",
            projections.len()
        )));
    }
    check_hidden_counts(hidden_t, hidden_s, map)?;
    let mut total: Option<Tensor<f32>> = None;
    let mut per_layer = Vec::with_capacity(k);
    for idx in 1..=k {
        let target = hidden_t[map.map(idx)?].detach();
        let projected = project_hidden(&hidden_s[idx], &projections[idx - 1])?;
        let term = target.mse(&projected)?;
        per_layer.push(term.item()? as f64);
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok((total.expect("k >= 1"), per_layer))
}

/// One side of the filtered-representation comparison.
pub enum SideTransform<'a> {
    /// Raw hidden states (the "no filter" ablation; width-equal only).
    Identity,
    /// Bias-free learnable projections, one per layer (the "no filter"
    /// ablation for a width-mismatched student).
    Projections(&'a [Tensor<f32>]),
    /// Task-aware filters.
    Bank(&'a FilterBank),
}

impl SideTransform<'_> {
    fn apply(&self, k: usize, hidden: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            SideTransform::Identity => Ok(hidden.clone()),
            SideTransform::Projections(ws) => {
                let w = ws.get(k).ok_or_else(|| {
                    Error::Contract(format!("missing projection for layer pair {k}"))
                })?;
                project_hidden(hidden, w)
            }
            SideTransform::Bank(bank) => bank.filter(k).forward(hidden),
        }
    }
}

/// Task-aware layer-wise distillation loss over filtered representations.
///
/// The MSE variant compares filter outputs (heads must be detached); the KL
/// variant keeps the heads and compares temperature-softened prediction
/// distributions. Teacher-side filters must be frozen, and the teacher's
/// hidden states are detached.
#[allow(clippy::too_many_arguments)]
pub fn ted_loss(
    hidden_t: &[Tensor<f32>],
    hidden_s: &[Tensor<f32>],
    teacher_side: &SideTransform,
    student_side: &SideTransform,
    map: &LayerMap,
    variant: TedVariant,
    temperature: f64,
    t2_rescale: bool,
    pool: Option<&[usize]>,
) -> Result<(Tensor<f32>, Vec<f64>)> {
    check_hidden_counts(hidden_t, hidden_s, map)?;
    if matches!(teacher_side, SideTransform::Projections(_)) {
        return Err(Error::Contract(
            "the teacher side is never projected; use Identity or a frozen bank".into(),
        ));
    }
    if let SideTransform::Bank(bank) = teacher_side {
        if !bank.all_frozen() {
            return Err(Error::Freeze(
                "teacher filters must be frozen during distillation".into(),
            ));
        }
    }
    match variant {
        TedVariant::Mse => {
            for side in [teacher_side, student_side] {
                if let SideTransform::Bank(bank) = side {
                    if bank.has_heads() {
                        return Err(Error::Contract(
                            "mse variant compares filter outputs; detach the task heads".into(),
                        ));
                    }
                }
            }
        }
        TedVariant::Kl => {
            for side in [teacher_side, student_side] {
                match side {
                    SideTransform::Bank(bank) if bank.has_heads() => {}
                    _ => {
                        return Err(Error::Contract(
                            "kl variant needs filters with retained heads on both sides".into(),
                        ));
                    }
                }
            }
        }
    }

    let k = map.student_depth();
    let mut total: Option<Tensor<f32>> = None;
    let mut per_layer = Vec::with_capacity(k);
    for idx in 0..k {
        let h_t = hidden_t[map.map(idx + 1)?].detach();
        let h_s = &hidden_s[idx + 1];
        let term = match variant {
            TedVariant::Mse => {
                let t_out = teacher_side.apply(idx, &h_t)?;
                let s_out = student_side.apply(idx, h_s)?;
                t_out.mse(&s_out)?
            }
            TedVariant::Kl => {
                let (SideTransform::Bank(bank_t), SideTransform::Bank(bank_s)) =
                    (teacher_side, student_side)
                else {
                    unreachable!("validated above");
                };
                let z_t = bank_t.filter(idx).head_forward(&h_t, pool)?;
                let z_s = bank_s.filter(idx).head_forward(h_s, pool)?;
                pred_distill_loss(&z_t, &z_s, temperature, t2_rescale)?
            }
        };
        per_layer.push(term.item()? as f64);
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok((total.expect("k >= 1"), per_layer))
}

fn check_hidden_counts(
    hidden_t: &[Tensor<f32>],
    hidden_s: &[Tensor<f32>],
    map: &LayerMap,
) -> Result<()> {
    if hidden_t.len() != map.teacher_depth() + 1 || hidden_s.len() != map.student_depth() + 1 {
        return Err(Error::Contract(format!(
            "expected {} teacher and {} student hidden states, got {} and {}",
            map.teacher_depth() + 1,
            map.student_depth() + 1,
            hidden_t.len(),
            hidden_s.len()
        )));
    }
    Ok(())
}

/// Everything the combined objective needs besides the student itself.
pub struct DistillContext<'a> {
    pub teacher: Option<&'a TransformerModel>,
    pub teacher_side: Option<SideTransform<'a>>,
    pub student_side: Option<SideTransform<'a>>,
    /// Layer-wise projections for LWD mode.
    pub projections: Option<&'a [Tensor<f32>]>,
    pub map: &'a LayerMap,
}

/// Scalar loss plus the logged decomposition.
pub struct ObjectiveParts {
    pub total: Tensor<f32>,
    pub task: f64,
    pub pred: f64,
    pub distill: f64,
    pub per_layer: Vec<f64>,
}

/// The distillation-stage objective:
/// task loss + alpha1 * prediction term + alpha2 * layer term (by mode).
///
/// In FT mode the returned tensor IS the task-loss graph, so its gradient
/// is bit-identical to plain fine-tuning. Passing an rng runs the student
/// forward in training mode (dropout); the teacher always runs in
/// evaluation mode and must be fully frozen.
pub fn stage2_objective(
    cfg: &DistillConfig,
    batch: &Batch,
    student: &TransformerModel,
    ctx: &DistillContext,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ObjectiveParts> {
    cfg.validate()?;
    let student_out = match rng {
        Some(rng) => student.forward_batch_train(batch, rng)?,
        None => student.forward_batch(batch)?,
    };
    stage2_objective_on(cfg, batch, student, &student_out, ctx)
}

/// Same as [`stage2_objective`] but with the student forward already done.
pub fn stage2_objective_on(
    cfg: &DistillConfig,
    batch: &Batch,
    student: &TransformerModel,
    student_out: &ForwardOutput,
    ctx: &DistillContext,
) -> Result<ObjectiveParts> {
    let task = student.task_loss_on(student_out, batch)?;
    let task_val = task.item()? as f64;
    if cfg.mode == DistillMode::Ft {
        return Ok(ObjectiveParts {
            total: task,
            task: task_val,
            pred: 0.0,
            distill: 0.0,
            per_layer: Vec::new(),
        });
    }

    let teacher = ctx.teacher.ok_or_else(|| {
        Error::Config(format!("{} mode needs a teacher", cfg.mode.name()))
    })?;
    if !teacher.all_frozen() {
        return Err(Error::Freeze(
            "the teacher must be frozen during distillation".into(),
        ));
    }
    let teacher_out = teacher.forward_batch(batch)?;
    let pred = pred_distill_loss(
        &teacher_out.logits,
        &student_out.logits,
        cfg.temperature,
        cfg.t2_rescale,
    )?;
    let pred_val = pred.item()? as f64;
    let mut total = task.add(&pred.scale(cfg.alpha1))?;

    let (distill_val, per_layer) = match cfg.mode {
        DistillMode::Kd => (0.0, Vec::new()),
        DistillMode::Lwd => {
            let projections = ctx.projections.ok_or_else(|| {
                Error::Config("lwd mode needs layer-wise projections".into())
            })?;
            let (term, per_layer) =
                layerwise_loss(&teacher_out.hidden, &student_out.hidden, projections, ctx.map)?;
            total = total.add(&term.scale(cfg.alpha2))?;
            (term.item()? as f64, per_layer)
        }
        DistillMode::Ted => {
            let teacher_side = ctx.teacher_side.as_ref().ok_or_else(|| {
                Error::Config("ted mode needs a teacher-side transform".into())
            })?;
            let student_side = ctx.student_side.as_ref().ok_or_else(|| {
                Error::Config("ted mode needs a student-side transform".into())
            })?;
            let (term, per_layer) = ted_loss(
                &teacher_out.hidden,
                &student_out.hidden,
                teacher_side,
                student_side,
                ctx.map,
                cfg.ted_variant,
                cfg.temperature,
                cfg.t2_rescale,
                batch.pool_positions.as_deref(),
            )?;
            total = total.add(&term.scale(cfg.alpha2))?;
            (term.item()? as f64, per_layer)
        }
        DistillMode::Ft => unreachable!("handled above"),
    };

    Ok(ObjectiveParts {
        total,
        task: task_val,
        pred: pred_val,
        distill: distill_val,
        per_layer,
    })
}
