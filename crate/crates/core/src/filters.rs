//! Task-aware filters: small per-layer networks with detachable task heads.
//!
//! A filter reads the hidden representation of one matched layer and
//! projects it into the teacher's width; its head turns that filtered
//! representation into task logits. Filters are trained on a frozen
//! backbone (the filter-training stage) and the student's filters are later
//! trained jointly with the student during distillation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::Batch;
use crate::distill::LayerMap;
use crate::error::{Error, Result};
use crate::model::{
    classification_loss, lm_shift_loss, Block, HeadKind, TransformerModel, INIT_STD,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsequentDepth {
    Count(usize),
    AllRemaining,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterArch {
    /// Single learnable projection [in_dim, out_dim] with bias.
    LinearProjection,
    /// in_dim -> out_dim -> out_dim with a GeLU in between.
    TwoLayerMlp,
    /// Deep copies of the donor model's next n transformer layers
    /// (equal-width only).
    SubsequentLayers(SubsequentDepth),
}

impl FilterArch {
    pub fn encode(&self) -> String {
        match self {
            FilterArch::LinearProjection => "linear".into(),
            FilterArch::TwoLayerMlp => "mlp".into(),
            FilterArch::SubsequentLayers(SubsequentDepth::Count(n)) => format!("subsequent:{n}"),
            FilterArch::SubsequentLayers(SubsequentDepth::AllRemaining) => "subsequent:all".into(),
        }
    }

    pub fn decode(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(FilterArch::LinearProjection),
            "mlp" => Ok(FilterArch::TwoLayerMlp),
            "subsequent:all" => Ok(FilterArch::SubsequentLayers(SubsequentDepth::AllRemaining)),
            other => {
                if let Some(n) = other.strip_prefix("subsequent:") {
                    let n: usize = n
                        .parse()
                        .map_err(|_| Error::Format(format!("bad filter arch {other:?}")))?;
                    return Ok(FilterArch::SubsequentLayers(SubsequentDepth::Count(n)));
                }
                Err(Error::Format(format!("bad filter arch {other:?}")))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Teacher,
    Student,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Teacher => "teacher",
            Side::Student => "student",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpec {
    pub arch: FilterArch,
    pub in_dim: usize,
    pub out_dim: usize,
    pub head: HeadKind,
    pub vocab_size: usize,
    pub seed: u64,
}

impl FilterSpec {
    fn head_dim(&self) -> usize {
        self.head.out_dim(self.vocab_size)
    }
}

#[derive(Debug, Clone)]
enum FilterBody {
    Linear {
        w: Tensor<f32>,
        b: Tensor<f32>,
    },
    Mlp {
        w1: Tensor<f32>,
        b1: Tensor<f32>,
        w2: Tensor<f32>,
        b2: Tensor<f32>,
    },
    Subsequent {
        blocks: Vec<Block>,
        head_count: usize,
    },
}

/// Per-layer network g(.; W) with a detachable task head.
#[derive(Debug, Clone)]
pub struct TaskAwareFilter {
    spec: FilterSpec,
    body: FilterBody,
    head: Option<(Tensor<f32>, Tensor<f32>)>,
}

/// Build one filter. `donor` supplies the transformer layers for the
/// subsequent-layers architecture: (model, 1-based layer index the filter
/// attaches to).
pub fn build_filter(
    spec: &FilterSpec,
    donor: Option<(&TransformerModel, usize)>,
) -> Result<TaskAwareFilter> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let body = match spec.arch {
        FilterArch::LinearProjection => FilterBody::Linear {
            w: Tensor::randn(&[spec.in_dim, spec.out_dim], INIT_STD, &mut rng).trainable(),
            b: Tensor::zeros(&[spec.out_dim]).trainable(),
        },
        FilterArch::TwoLayerMlp => FilterBody::Mlp {
            w1: Tensor::randn(&[spec.in_dim, spec.out_dim], INIT_STD, &mut rng).trainable(),
            b1: Tensor::zeros(&[spec.out_dim]).trainable(),
            w2: Tensor::randn(&[spec.out_dim, spec.out_dim], INIT_STD, &mut rng).trainable(),
            b2: Tensor::zeros(&[spec.out_dim]).trainable(),
        },
        FilterArch::SubsequentLayers(depth) => {
            let (model, layer) = donor.ok_or_else(|| {
                Error::Param("subsequent-layers filters need a donor model".into())
            })?;
            let cfg = model.config();
            if spec.in_dim != cfg.hidden_dim || spec.out_dim != cfg.hidden_dim {
                return Err(Error::Unsupported(format!(
                    "subsequent-layers filters are equal-width only: {}x{} vs model width {}",
                    spec.in_dim, spec.out_dim, cfg.hidden_dim
                )));
            }
            if layer == 0 || layer > cfg.depth {
                return Err(Error::Param(format!(
                    "donor layer {layer} out of range 1..={}",
                    cfg.depth
                )));
            }
            let remaining = cfg.depth - layer;
            let n = match depth {
                SubsequentDepth::Count(n) => n,
                SubsequentDepth::AllRemaining => remaining,
            };
            if n == 0 || n > remaining {
                return Err(Error::Contract(format!(
                    "cannot take {n} subsequent layer(s) after layer {layer} of a depth-{} model",
                    cfg.depth
                )));
            }
            let blocks = (layer..layer + n)
                .map(|j| {
                    let b = model.blocks[j].deep_clone();
                    for (_, p) in b.named_params("f") {
                        p.set_requires_grad(true);
                    }
                    b
                })
                .collect();
            FilterBody::Subsequent {
                blocks,
                head_count: cfg.head_count,
            }
        }
    };
    let head = Some((
        Tensor::randn(&[spec.out_dim, spec.head_dim()], INIT_STD, &mut rng).trainable(),
        Tensor::zeros(&[spec.head_dim()]).trainable(),
    ));
    Ok(TaskAwareFilter {
        spec: spec.clone(),
        body,
        head,
    })
}

impl TaskAwareFilter {
    pub fn spec(&self) -> &FilterSpec {
        &self.spec
    }

    /// Filtered representation [b, l, out_dim]; the head is NOT applied.
    pub fn forward(&self, h: &Tensor<f32>) -> Result<Tensor<f32>> {
        let shape = h.shape().to_vec();
        if shape.len() != 3 || shape[2] != self.spec.in_dim {
            return Err(Error::Dim {
                op: "filter_forward",
                lhs: shape,
                rhs: vec![self.spec.in_dim],
            });
        }
        let (b, l) = (shape[0], shape[1]);
        match &self.body {
            FilterBody::Linear { w, b: bias } => h
                .reshape(&[b * l, self.spec.in_dim])?
                .matmul(w)?
                .broadcast_add(bias)?
                .reshape(&[b, l, self.spec.out_dim]),
            FilterBody::Mlp { w1, b1, w2, b2 } => h
                .reshape(&[b * l, self.spec.in_dim])?
                .matmul(w1)?
                .broadcast_add(b1)?
                .gelu()
                .matmul(w2)?
                .broadcast_add(b2)?
                .reshape(&[b, l, self.spec.out_dim]),
            FilterBody::Subsequent { blocks, head_count } => {
                let mut x = h.clone();
                for block in blocks {
                    x = block.forward(&x, *head_count, &mut None)?;
                }
                Ok(x)
            }
        }
    }

    /// Apply only the task head to an already-filtered representation.
    pub fn head_on(&self, filtered: &Tensor<f32>, pool: Option<&[usize]>) -> Result<Tensor<f32>> {
        let (hw, hb) = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Contract("filter head has been detached".into()))?;
        let shape = filtered.shape().to_vec();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        match self.spec.head {
            HeadKind::Lm => filtered
                .reshape(&[b * l, d])?
                .matmul(hw)?
                .broadcast_add(hb)?
                .reshape(&[b, l, self.spec.head_dim()]),
            HeadKind::Classifier { .. } => {
                let default_pool = vec![l - 1; b];
                let positions = pool.unwrap_or(&default_pool);
                filtered
                    .gather_positions(positions)?
                    .matmul(hw)?
                    .broadcast_add(hb)
            }
        }
    }

    /// Filter body plus task head: task logits from a hidden state.
    pub fn head_forward(&self, h: &Tensor<f32>, pool: Option<&[usize]>) -> Result<Tensor<f32>> {
        let filtered = self.forward(h)?;
        self.head_on(&filtered, pool)
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    pub fn detach_head(&mut self) {
        self.head = None;
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        match &self.body {
            FilterBody::Linear { w, b } => {
                out.push((format!("{prefix}.w"), w.clone()));
                out.push((format!("{prefix}.b"), b.clone()));
            }
            FilterBody::Mlp { w1, b1, w2, b2 } => {
                out.push((format!("{prefix}.w1"), w1.clone()));
                out.push((format!("{prefix}.b1"), b1.clone()));
                out.push((format!("{prefix}.w2"), w2.clone()));
                out.push((format!("{prefix}.b2"), b2.clone()));
            }
            FilterBody::Subsequent { blocks, .. } => {
                for (j, block) in blocks.iter().enumerate() {
                    out.extend(block.named_params(&format!("{prefix}.block.{j}")));
                }
            }
        }
        if let Some((hw, hb)) = &self.head {
            out.push((format!("{prefix}.head.w"), hw.clone()));
            out.push((format!("{prefix}.head.b"), hb.clone()));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params("f").iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn deep_clone(&self) -> TaskAwareFilter {
        let body = match &self.body {
            FilterBody::Linear { w, b } => FilterBody::Linear {
                w: w.deep_clone(),
                b: b.deep_clone(),
            },
            FilterBody::Mlp { w1, b1, w2, b2 } => FilterBody::Mlp {
                w1: w1.deep_clone(),
                b1: b1.deep_clone(),
                w2: w2.deep_clone(),
                b2: b2.deep_clone(),
            },
            FilterBody::Subsequent { blocks, head_count } => FilterBody::Subsequent {
                blocks: blocks.iter().map(Block::deep_clone).collect(),
                head_count: *head_count,
            },
        };
        TaskAwareFilter {
            spec: self.spec.clone(),
            body,
            head: self
                .head
                .as_ref()
                .map(|(w, b)| (w.deep_clone(), b.deep_clone())),
        }
    }
}

/// Ordered list of K filters, one per matched layer pair. Filter k of a
/// teacher bank attaches to teacher layer M(k); filter k of a student bank
/// attaches to student layer k.
#[derive(Debug, Clone)]
pub struct FilterBank {
    side: Side,
    map: LayerMap,
    filters: Vec<TaskAwareFilter>,
    source_task: String,
}

/// Build a bank of K filters sharing one architecture. `model` is the
/// backbone the filters attach to (and the donor for subsequent-layers
/// bodies); `out_dim` is the teacher width.
pub fn build_bank(
    arch: FilterArch,
    model: &TransformerModel,
    map: &LayerMap,
    side: Side,
    out_dim: usize,
    seed: u64,
    source_task: &str,
) -> Result<FilterBank> {
    let cfg = model.config();
    let expected_depth = match side {
        Side::Teacher => map.teacher_depth(),
        Side::Student => map.student_depth(),
    };
    if cfg.depth != expected_depth {
        return Err(Error::Param(format!(
            "{} model has depth {}, layer map expects {expected_depth}",
            side.name(),
            cfg.depth
        )));
    }
    let k = map.student_depth();
    let mut filters = Vec::with_capacity(k);
    for idx in 1..=k {
        let layer = match side {
            Side::Teacher => map.map(idx)?,
            Side::Student => idx,
        };
        let spec = FilterSpec {
            arch,
            in_dim: cfg.hidden_dim,
            out_dim,
            head: cfg.head.clone(),
            vocab_size: cfg.vocab_size,
            seed: seed.wrapping_add(idx as u64),
        };
        filters.push(build_filter(&spec, Some((model, layer)))?);
    }
    Ok(FilterBank {
        side,
        map: map.clone(),
        filters,
        source_task: source_task.to_string(),
    })
}

impl FilterBank {
    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn map(&self) -> &LayerMap {
        &self.map
    }

    pub fn source_task(&self) -> &str {
        &self.source_task
    }

    /// Filter for pair index k (0-based).
    pub fn filter(&self, k: usize) -> &TaskAwareFilter {
        &self.filters[k]
    }

    pub fn filter_mut(&mut self, k: usize) -> &mut TaskAwareFilter {
        &mut self.filters[k]
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (k, f) in self.filters.iter().enumerate() {
            out.extend(f.named_params(&format!("filter.{k}")));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.filters.iter().map(TaskAwareFilter::param_count).sum()
    }

    pub fn set_frozen(&self, frozen: bool) {
        for (_, p) in self.named_params() {
            p.set_requires_grad(!frozen);
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.named_params().iter().all(|(_, p)| !p.requires_grad())
    }

    pub fn detach_heads(&mut self) {
        for f in &mut self.filters {
            f.detach_head();
        }
    }

    pub fn has_heads(&self) -> bool {
        self.filters.iter().all(TaskAwareFilter::has_head)
    }

    /// Adopt this (teacher) bank's trained filters as the student's, without
    /// further training. Only valid when the student shares the teacher's
    /// width, i.e. the filters' input dimension.
    pub fn adopt_for_student(&self, student_width: usize) -> Result<FilterBank> {
        if self.filters.iter().any(|f| f.spec.in_dim != student_width) {
            return Err(Error::Unsupported(format!(
                "cannot adopt filters with in_dim {} for a width-{student_width} student",
                self.filters[0].spec.in_dim
            )));
        }
        let bank = FilterBank {
            side: Side::Student,
            map: self.map.clone(),
            filters: self.filters.iter().map(TaskAwareFilter::deep_clone).collect(),
            source_task: self.source_task.clone(),
        };
        // The source bank is usually frozen by now; the student's copy trains.
        bank.set_frozen(false);
        Ok(bank)
    }

    /// Dimension-only compatibility check used for cross-task filter loading.
    pub fn check_dims(&self, in_dim: usize, out_dim: usize, k: usize) -> Result<()> {
        if self.len() != k {
            return Err(Error::Artifact(format!(
                "filter bank has {} filters, expected {k}",
                self.len()
            )));
        }
        for f in &self.filters {
            if f.spec.in_dim != in_dim || f.spec.out_dim != out_dim {
                return Err(Error::Artifact(format!(
                    "filter dims {}x{} incompatible with required {in_dim}x{out_dim}",
                    f.spec.in_dim, f.spec.out_dim
                )));
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let spec = &self.filters[0].spec;
        let meta = [
            ("kind", "filterbank".to_string()),
            ("filter.arch", spec.arch.encode()),
            ("filter.in_dim", spec.in_dim.to_string()),
            ("filter.out_dim", spec.out_dim.to_string()),
            ("filter.head", spec.head.encode()),
            ("filter.vocab_size", spec.vocab_size.to_string()),
            ("filter.count", self.len().to_string()),
            ("filter.has_heads", self.has_heads().to_string()),
            ("side", self.side.name().to_string()),
            ("source_task", self.source_task.clone()),
            ("map", self.map.encode()),
        ];
        for (k, v) in meta {
            ck.put_meta(k, v).expect("static keys are valid");
        }
        if let FilterBody::Subsequent { head_count, .. } = &self.filters[0].body {
            ck.put_meta("filter.block_head_count", head_count)
                .expect("static key is valid");
        }
        for (name, t) in self.named_params() {
            ck.put_tensor(&name, &t).expect("param names are unique");
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<FilterBank> {
        if ck.meta("kind") != Some("filterbank") {
            return Err(Error::Format(format!(
                "expected a filterbank checkpoint, found kind {:?}",
                ck.meta("kind")
            )));
        }
        let arch = FilterArch::decode(ck.require_meta("filter.arch")?)?;
        let in_dim: usize = ck.parse_meta("filter.in_dim")?;
        let out_dim: usize = ck.parse_meta("filter.out_dim")?;
        let head = HeadKind::decode(ck.require_meta("filter.head")?)?;
        let vocab_size: usize = ck.parse_meta("filter.vocab_size")?;
        let count: usize = ck.parse_meta("filter.count")?;
        let has_heads: bool = ck.parse_meta("filter.has_heads")?;
        let side = match ck.require_meta("side")? {
            "teacher" => Side::Teacher,
            "student" => Side::Student,
            other => return Err(Error::Format(format!("bad side {other:?}"))),
        };
        let map = LayerMap::decode(ck.require_meta("map")?)?;
        let source_task = ck.require_meta("source_task")?.to_string();

        let mut filters = Vec::with_capacity(count);
        for k in 0..count {
            let spec = FilterSpec {
                arch,
                in_dim,
                out_dim,
                head: head.clone(),
                vocab_size,
                seed: 0,
            };
            let prefix = format!("filter.{k}");
            let body = match arch {
                FilterArch::LinearProjection => FilterBody::Linear {
                    w: ck.tensor::<f32>(&format!("{prefix}.w"))?.trainable(),
                    b: ck.tensor::<f32>(&format!("{prefix}.b"))?.trainable(),
                },
                FilterArch::TwoLayerMlp => FilterBody::Mlp {
                    w1: ck.tensor::<f32>(&format!("{prefix}.w1"))?.trainable(),
                    b1: ck.tensor::<f32>(&format!("{prefix}.b1"))?.trainable(),
                    w2: ck.tensor::<f32>(&format!("{prefix}.w2"))?.trainable(),
                    b2: ck.tensor::<f32>(&format!("{prefix}.b2"))?.trainable(),
                },
                FilterArch::SubsequentLayers(_) => {
                    let head_count: usize = ck.parse_meta("filter.block_head_count")?;
                    let mut blocks = Vec::new();
                    let mut j = 0;
                    while ck.has_tensor(&format!("{prefix}.block.{j}.attn.wq")) {
                        let ffn_dim = ck
                            .tensor_shape(&format!("{prefix}.block.{j}.ffn.w1"))
                            .ok_or_else(|| Error::Format("missing ffn tensor".into()))?[1];
                        let mut rng = ChaCha8Rng::seed_from_u64(0);
                        let block = Block::new(in_dim, ffn_dim, &mut rng);
                        for (name, t) in block.named_params(&format!("{prefix}.block.{j}")) {
                            t.set_data(ck.tensor::<f32>(&name)?.to_vec())?;
                        }
                        blocks.push(block);
                        j += 1;
                    }
                    if blocks.is_empty() {
                        return Err(Error::Format(format!(
                            "no blocks stored for subsequent filter {k}"
                        )));
                    }
                    FilterBody::Subsequent { blocks, head_count }
                }
            };
            let head_params = if has_heads {
                Some((
                    ck.tensor::<f32>(&format!("{prefix}.head.w"))?.trainable(),
                    ck.tensor::<f32>(&format!("{prefix}.head.b"))?.trainable(),
                ))
            } else {
                None
            };
            filters.push(TaskAwareFilter {
                spec,
                body,
                head: head_params,
            });
        }
        Ok(FilterBank {
            side,
            map,
            filters,
            source_task,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().write_to(path)
    }

    pub fn load(path: &std::path::Path) -> Result<FilterBank> {
        FilterBank::from_checkpoint(&Checkpoint::read_from(path)?)
    }
}

/// Per-filter task losses plus their sum.
pub struct Stage1Loss {
    pub total: Tensor<f32>,
    pub per_filter: Vec<f64>,
}

/// Sum of the K filters' task losses on a frozen backbone. Gradients reach
/// only the filter parameters; the model must already be frozen.
pub fn stage1_loss(
    model: &TransformerModel,
    bank: &FilterBank,
    batch: &Batch,
) -> Result<Stage1Loss> {
    if !model.all_frozen() {
        return Err(Error::Freeze(
            "stage1_loss requires a fully frozen backbone".into(),
        ));
    }
    let out = model.forward_batch(batch)?;
    let mut total: Option<Tensor<f32>> = None;
    let mut per_filter = Vec::with_capacity(bank.len());
    for k in 0..bank.len() {
        let layer = match bank.side() {
            Side::Teacher => bank.map().map(k + 1)?,
            Side::Student => k + 1,
        };
        let hidden = &out.hidden[layer];
        let logits = bank.filter(k).head_forward(hidden, batch.pool_positions.as_deref())?;
        let loss_k = match bank.filter(k).spec.head {
            HeadKind::Lm => lm_shift_loss(&logits, &batch.tokens, batch.batch_size)?,
            HeadKind::Classifier { .. } => {
                let labels = batch.labels.as_deref().ok_or_else(|| {
                    Error::Contract("classification filter loss needs a labeled batch".into())
                })?;
                classification_loss(&logits, labels)?
            }
        };
        per_filter.push(loss_k.item()? as f64);
        total = Some(match total {
            Some(t) => t.add(&loss_k)?,
            None => loss_k,
        });
    }
    Ok(Stage1Loss {
        total: total.ok_or_else(|| Error::Contract("empty filter bank".into()))?,
        per_filter,
    })
}
