//! Minimal decoder-style transformer with per-layer hidden-state exposure.
//!
//! Blocks are pre-layer-norm residual: x += attn(ln1(x)); x += ffn(ln2(x)).
//! The hidden state H^k exposed for distillation is the residual-stream
//! output of block k (H^0 is the embedding output), and the task head reads
//! H^depth directly, so a filter that replicates the head reproduces the
//! task loss exactly. Attention is always causally masked; classifier heads
//! pool the hidden state at the last content position.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::Batch;
use crate::distill::LayerMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadKind {
    Lm,
    Classifier { num_classes: usize },
}

impl HeadKind {
    pub fn encode(&self) -> String {
        match self {
            HeadKind::Lm => "lm".to_string(),
            HeadKind::Classifier { num_classes } => format!("cls:{num_classes}"),
        }
    }

    pub fn decode(s: &str) -> Result<Self> {
        if s == "lm" {
            return Ok(HeadKind::Lm);
        }
        if let Some(n) = s.strip_prefix("cls:") {
            let num_classes = n
                .parse()
                .map_err(|_| Error::Format(format!("bad head spec {s:?}")))?;
            return Ok(HeadKind::Classifier { num_classes });
        }
        Err(Error::Format(format!("bad head spec {s:?}")))
    }

    /// Output width of the head.
    pub fn out_dim(&self, vocab_size: usize) -> usize {
        match self {
            HeadKind::Lm => vocab_size,
            HeadKind::Classifier { num_classes } => *num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub head_count: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub tie_embeddings: bool,
    pub head: HeadKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("hidden_dim", self.hidden_dim),
            ("head_count", self.head_count),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.hidden_dim % self.head_count != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by head_count {}",
                self.hidden_dim, self.head_count
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if let HeadKind::Classifier { num_classes } = self.head {
            if num_classes < 2 {
                return Err(Error::Config("classifier needs at least 2 classes".into()));
            }
            if self.tie_embeddings {
                return Err(Error::Config(
                    "tie_embeddings only applies to the LM head".into(),
                ));
            }
        }
        Ok(())
    }
}

pub(crate) struct Dropout<'a> {
    rate: f64,
    rng: &'a mut ChaCha8Rng,
}

fn dims3(x: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [b, l, d] => Ok((*b, *l, *d)),
        other => Err(Error::Contract(format!(
            "expected a [batch, len, dim] tensor, got {other:?}"
        ))),
    }
}

fn maybe_drop(t: Tensor<f32>, d: &mut Option<Dropout>) -> Result<Tensor<f32>> {
    match d.as_mut() {
        Some(dd) => t.dropout(dd.rate, dd.rng),
        None => Ok(t),
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Tensor<f32>,
    pub bq: Tensor<f32>,
    pub wk: Tensor<f32>,
    pub bk: Tensor<f32>,
    pub wv: Tensor<f32>,
    pub bv: Tensor<f32>,
    pub wo: Tensor<f32>,
    pub bo: Tensor<f32>,
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Tensor<f32>,
    pub b1: Tensor<f32>,
    pub w2: Tensor<f32>,
    pub b2: Tensor<f32>,
}

/// One pre-layer-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1_g: Tensor<f32>,
    pub ln1_b: Tensor<f32>,
    pub attn: Attention,
    pub ln2_g: Tensor<f32>,
    pub ln2_b: Tensor<f32>,
    pub ffn: FeedForward,
}

impl Block {
    pub fn new(d: usize, ffn_dim: usize, rng: &mut ChaCha8Rng) -> Block {
        let w = |shape: &[usize], rng: &mut ChaCha8Rng| {
            Tensor::randn(shape, INIT_STD, rng).trainable()
        };
        let zeros = |n: usize| Tensor::zeros(&[n]).trainable();
        Block {
            ln1_g: Tensor::full(&[d], 1.0).trainable(),
            ln1_b: zeros(d),
            attn: Attention {
                wq: w(&[d, d], rng),
                bq: zeros(d),
                wk: w(&[d, d], rng),
                bk: zeros(d),
                wv: w(&[d, d], rng),
                bv: zeros(d),
                wo: w(&[d, d], rng),
                bo: zeros(d),
            },
            ln2_g: Tensor::full(&[d], 1.0).trainable(),
            ln2_b: zeros(d),
            ffn: FeedForward {
                w1: w(&[d, ffn_dim], rng),
                b1: zeros(ffn_dim),
                w2: w(&[ffn_dim, d], rng),
                b2: zeros(d),
            },
        }
    }

    pub fn deep_clone(&self) -> Block {
        Block {
            ln1_g: self.ln1_g.deep_clone(),
            ln1_b: self.ln1_b.deep_clone(),
            attn: Attention {
                wq: self.attn.wq.deep_clone(),
                bq: self.attn.bq.deep_clone(),
                wk: self.attn.wk.deep_clone(),
                bk: self.attn.bk.deep_clone(),
                wv: self.attn.wv.deep_clone(),
                bv: self.attn.bv.deep_clone(),
                wo: self.attn.wo.deep_clone(),
                bo: self.attn.bo.deep_clone(),
            },
            ln2_g: self.ln2_g.deep_clone(),
            ln2_b: self.ln2_b.deep_clone(),
            ffn: FeedForward {
                w1: self.ffn.w1.deep_clone(),
                b1: self.ffn.b1.deep_clone(),
                w2: self.ffn.w2.deep_clone(),
                b2: self.ffn.b2.deep_clone(),
            },
        }
    }

    /// Residual-stream update for input [b, l, d].
    pub(crate) fn forward(
        &self,
        x: &Tensor<f32>,
        head_count: usize,
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<Tensor<f32>> {
        let attn_out = self.attention(x, head_count, drop)?;
        let x = x.add(&attn_out)?;
        let ffn_out = self.feed_forward(&x, drop)?;
        x.add(&ffn_out)
    }

    fn attention(
        &self,
        x: &Tensor<f32>,
        head_count: usize,
        drop: &mut Option<Dropout>,
    ) -> Result<Tensor<f32>> {
        let (b, l, d) = dims3(x)?;
        let dh = d / head_count;
        let normed = x.layer_norm(&self.ln1_g, &self.ln1_b, LN_EPS)?;
        let flat = normed.reshape(&[b * l, d])?;

        let split = |w: &Tensor<f32>, bias: &Tensor<f32>| -> Result<Tensor<f32>> {
            flat.matmul(w)?
                .broadcast_add(bias)?
                .reshape(&[b, l, head_count, dh])?
                .permute(&[0, 2, 1, 3])
        };
        let q = split(&self.attn.wq, &self.attn.bq)?;
        let k = split(&self.attn.wk, &self.attn.bk)?;
        let v = split(&self.attn.wv, &self.attn.bv)?;

        let scores = q
            .matmul(&k.permute(&[0, 1, 3, 2])?)?
            .scale(1.0 / (dh as f64).sqrt())
            .apply_causal_mask()?;
        let probs = maybe_drop(scores.softmax_temp(1.0)?, drop)?;
        let ctx = probs
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * l, d])?;
        let out = ctx
            .matmul(&self.attn.wo)?
            .broadcast_add(&self.attn.bo)?
            .reshape(&[b, l, d])?;
        maybe_drop(out, drop)
    }

    fn feed_forward(&self, x: &Tensor<f32>, drop: &mut Option<Dropout>) -> Result<Tensor<f32>> {
        let (b, l, d) = dims3(x)?;
        let normed = x.layer_norm(&self.ln2_g, &self.ln2_b, LN_EPS)?;
        let h = normed
            .reshape(&[b * l, d])?
            .matmul(&self.ffn.w1)?
            .broadcast_add(&self.ffn.b1)?
            .gelu();
        let out = h
            .matmul(&self.ffn.w2)?
            .broadcast_add(&self.ffn.b2)?
            .reshape(&[b, l, d])?;
        maybe_drop(out, drop)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        vec![
            (format!("{prefix}.ln1.g"), self.ln1_g.clone()),
            (format!("{prefix}.ln1.b"), self.ln1_b.clone()),
            (format!("{prefix}.attn.wq"), self.attn.wq.clone()),
            (format!("{prefix}.attn.bq"), self.attn.bq.clone()),
            (format!("{prefix}.attn.wk"), self.attn.wk.clone()),
            (format!("{prefix}.attn.bk"), self.attn.bk.clone()),
            (format!("{prefix}.attn.wv"), self.attn.wv.clone()),
            (format!("{prefix}.attn.bv"), self.attn.bv.clone()),
            (format!("{prefix}.attn.wo"), self.attn.wo.clone()),
            (format!("{prefix}.attn.bo"), self.attn.bo.clone()),
            (format!("{prefix}.ln2.g"), self.ln2_g.clone()),
            (format!("{prefix}.ln2.b"), self.ln2_b.clone()),
            (format!("{prefix}.ffn.w1"), self.ffn.w1.clone()),
            (format!("{prefix}.ffn.b1"), self.ffn.b1.clone()),
            (format!("{prefix}.ffn.w2"), self.ffn.w2.clone()),
            (format!("{prefix}.ffn.b2"), self.ffn.b2.clone()),
        ]
    }
}

/// Logits plus the hidden states H^0..H^depth ([b, l, d] each).
pub struct ForwardOutput {
    pub logits: Tensor<f32>,
    pub hidden: Vec<Tensor<f32>>,
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    config: ModelConfig,
    pub tok_embed: Tensor<f32>,
    pub pos_embed: Tensor<f32>,
    pub blocks: Vec<Block>,
    /// None when the LM head is tied to the token embedding.
    pub head_w: Option<Tensor<f32>>,
    pub head_b: Tensor<f32>,
}

impl TransformerModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<TransformerModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let tok_embed = Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng).trainable();
        let pos_embed = Tensor::randn(&[config.max_seq_len, d], INIT_STD, &mut rng).trainable();
        let blocks = (0..config.depth)
            .map(|_| Block::new(d, config.ffn_dim, &mut rng))
            .collect();
        let out_dim = config.head.out_dim(config.vocab_size);
        let tied = config.tie_embeddings && config.head == HeadKind::Lm;
        let head_w = if tied {
            None
        } else {
            Some(Tensor::randn(&[d, out_dim], INIT_STD, &mut rng).trainable())
        };
        let head_b = Tensor::zeros(&[out_dim]).trainable();
        Ok(TransformerModel {
            config,
            tok_embed,
            pos_embed,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Evaluation-mode forward (no dropout). For classifier heads, `pool`
    /// gives the pooled position per batch row, defaulting to the last one.
    pub fn forward(
        &self,
        tokens: &[u32],
        batch: usize,
        pool: Option<&[usize]>,
    ) -> Result<ForwardOutput> {
        self.forward_impl(tokens, batch, pool, &mut None)
    }

    /// Training-mode forward: applies dropout at the configured rate.
    pub fn forward_train(
        &self,
        tokens: &[u32],
        batch: usize,
        pool: Option<&[usize]>,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput> {
        let mut drop = (self.config.dropout_rate > 0.0).then(|| Dropout {
            rate: self.config.dropout_rate,
            rng,
        });
        self.forward_impl(tokens, batch, pool, &mut drop)
    }

    pub fn forward_batch(&self, batch: &Batch) -> Result<ForwardOutput> {
        self.forward(&batch.tokens, batch.batch_size, batch.pool_positions.as_deref())
    }

    pub fn forward_batch_train(&self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<ForwardOutput> {
        self.forward_train(
            &batch.tokens,
            batch.batch_size,
            batch.pool_positions.as_deref(),
            rng,
        )
    }

    fn forward_impl(
        &self,
        tokens: &[u32],
        batch: usize,
        pool: Option<&[usize]>,
        drop: &mut Option<Dropout>,
    ) -> Result<ForwardOutput> {
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::Validation(format!(
                "token buffer of {} does not form a batch of {batch}",
                tokens.len()
            )));
        }
        let l = tokens.len() / batch;
        if l > self.config.max_seq_len {
            return Err(Error::Validation(format!(
                "sequence length {l} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let d = self.config.hidden_dim;

        let tok = self.tok_embed.embedding(tokens, &[batch, l])?;
        let pos = self.pos_embed.narrow(0, 0, l)?;
        let mut x = maybe_drop(tok.broadcast_add(&pos)?, drop)?;

        let mut hidden = Vec::with_capacity(self.config.depth + 1);
        hidden.push(x.clone());
        for block in &self.blocks {
            x = block.forward(&x, self.config.head_count, drop)?;
            hidden.push(x.clone());
        }

        let logits = match &self.config.head {
            HeadKind::Lm => {
                let flat = x.reshape(&[batch * l, d])?;
                let w = match &self.head_w {
                    Some(w) => w.clone(),
                    None => self.tok_embed.transpose(0, 1)?,
                };
                flat.matmul(&w)?
                    .broadcast_add(&self.head_b)?
                    .reshape(&[batch, l, self.config.vocab_size])?
            }
            HeadKind::Classifier { num_classes } => {
                let default_pool = vec![l - 1; batch];
                let positions = pool.unwrap_or(&default_pool);
                let pooled = x.gather_positions(positions)?;
                let w = self
                    .head_w
                    .as_ref()
                    .expect("classifier heads are never tied");
                let logits = pooled.matmul(w)?.broadcast_add(&self.head_b)?;
                debug_assert_eq!(logits.shape(), &[batch, *num_classes]);
                logits
            }
        };
        Ok(ForwardOutput { logits, hidden })
    }

    /// Task loss on an evaluation-mode forward pass.
    pub fn task_loss(&self, batch: &Batch) -> Result<Tensor<f32>> {
        let out = self.forward_batch(batch)?;
        self.task_loss_on(&out, batch)
    }

    /// Task loss given an already-computed forward output.
    pub fn task_loss_on(&self, out: &ForwardOutput, batch: &Batch) -> Result<Tensor<f32>> {
        match &self.config.head {
            HeadKind::Lm => lm_shift_loss(&out.logits, &batch.tokens, batch.batch_size),
            HeadKind::Classifier { .. } => {
                let labels = batch.labels.as_deref().ok_or_else(|| {
                    Error::Contract("classifier task loss needs labeled batch".into())
                })?;
                classification_loss(&out.logits, labels)
            }
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<f32>)> {
        let mut params = vec![
            ("embed.tok".to_string(), self.tok_embed.clone()),
            ("embed.pos".to_string(), self.pos_embed.clone()),
        ];
        for (i, block) in self.blocks.iter().enumerate() {
            params.extend(block.named_params(&format!("block.{i}")));
        }
        if let Some(w) = &self.head_w {
            params.push(("head.w".to_string(), w.clone()));
        }
        params.push(("head.b".to_string(), self.head_b.clone()));
        params
    }

    pub fn param(&self, name: &str) -> Option<Tensor<f32>> {
        self.named_params()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_frozen(&self, frozen: bool) {
        for (_, p) in self.named_params() {
            p.set_requires_grad(!frozen);
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.named_params().iter().all(|(_, p)| !p.requires_grad())
    }

    pub fn deep_clone(&self) -> TransformerModel {
        TransformerModel {
            config: self.config.clone(),
            tok_embed: self.tok_embed.deep_clone(),
            pos_embed: self.pos_embed.deep_clone(),
            blocks: self.blocks.iter().map(Block::deep_clone).collect(),
            head_w: self.head_w.as_ref().map(Tensor::deep_clone),
            head_b: self.head_b.deep_clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let c = &self.config;
        let puts = [
            ("kind", "model".to_string()),
            ("model.depth", c.depth.to_string()),
            ("model.hidden_dim", c.hidden_dim.to_string()),
            ("model.head_count", c.head_count.to_string()),
            ("model.ffn_dim", c.ffn_dim.to_string()),
            ("model.vocab_size", c.vocab_size.to_string()),
            ("model.max_seq_len", c.max_seq_len.to_string()),
            ("model.dropout_rate", c.dropout_rate.to_string()),
            ("model.tie_embeddings", c.tie_embeddings.to_string()),
            ("model.head", c.head.encode()),
        ];
        for (k, v) in puts {
            ck.put_meta(k, v).expect("static keys are valid");
        }
        for (name, t) in self.named_params() {
            ck.put_tensor(&name, &t).expect("param names are unique");
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<TransformerModel> {
        if ck.meta("kind") != Some("model") {
            return Err(Error::Format(format!(
                "expected a model checkpoint, found kind {:?}",
                ck.meta("kind")
            )));
        }
        let config = ModelConfig {
            depth: ck.parse_meta("model.depth")?,
            hidden_dim: ck.parse_meta("model.hidden_dim")?,
            head_count: ck.parse_meta("model.head_count")?,
            ffn_dim: ck.parse_meta("model.ffn_dim")?,
            vocab_size: ck.parse_meta("model.vocab_size")?,
            max_seq_len: ck.parse_meta("model.max_seq_len")?,
            dropout_rate: ck.parse_meta("model.dropout_rate")?,
            tie_embeddings: ck.parse_meta("model.tie_embeddings")?,
            head: HeadKind::decode(ck.require_meta("model.head")?)?,
        };
        let model = TransformerModel::new(config, 0)?;
        for (name, t) in model.named_params() {
            let loaded: Tensor<f32> = ck.tensor(&name)?;
            if loaded.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "param {name} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            t.set_data(loaded.to_vec())?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write_to(path)
    }

    pub fn load(path: &Path) -> Result<TransformerModel> {
        TransformerModel::from_checkpoint(&Checkpoint::read_from(path)?)
    }
}

/// Build a student whose layer k is a deep copy of teacher layer M(k).
/// Embeddings and head are copied too. Only width-equal student configs are
/// supported; anything else must fall back to fresh initialization.
pub fn init_student_from_teacher(
    teacher: &TransformerModel,
    student_cfg: &ModelConfig,
    map: &LayerMap,
) -> Result<TransformerModel> {
    student_cfg.validate()?;
    let t = teacher.config();
    if student_cfg.hidden_dim != t.hidden_dim {
        return Err(Error::Unsupported(format!(
            "student width {} differs from teacher width {}; use fresh init",
            student_cfg.hidden_dim, t.hidden_dim
        )));
    }
    for (name, s, tv) in [
        ("head_count", student_cfg.head_count, t.head_count),
        ("ffn_dim", student_cfg.ffn_dim, t.ffn_dim),
        ("vocab_size", student_cfg.vocab_size, t.vocab_size),
        ("max_seq_len", student_cfg.max_seq_len, t.max_seq_len),
    ] {
        if s != tv {
            return Err(Error::Unsupported(format!(
                "student {name} {s} differs from teacher {name} {tv}"
            )));
        }
    }
    if student_cfg.head != t.head {
        return Err(Error::Unsupported(
            "student and teacher head kinds differ".into(),
        ));
    }
    if map.student_depth() != student_cfg.depth || map.teacher_depth() != t.depth {
        return Err(Error::Param(format!(
            "layer map covers {} -> {} but models have {} -> {}",
            map.student_depth(),
            map.teacher_depth(),
            student_cfg.depth,
            t.depth
        )));
    }
    let mut blocks = Vec::with_capacity(student_cfg.depth);
    for k in 1..=student_cfg.depth {
        let src = map.map(k)?;
        blocks.push(teacher.blocks[src - 1].deep_clone());
    }
    let tied = student_cfg.tie_embeddings && student_cfg.head == HeadKind::Lm;
    let head_w = match (&teacher.head_w, tied) {
        (_, true) => None,
        (Some(w), false) => Some(w.deep_clone()),
        // Teacher tied but student untied: materialize the transpose.
        (None, false) => Some(teacher.tok_embed.transpose(0, 1)?.detach().trainable()),
    };
    Ok(TransformerModel {
        config: student_cfg.clone(),
        tok_embed: teacher.tok_embed.deep_clone(),
        pos_embed: teacher.pos_embed.deep_clone(),
        blocks,
        head_w,
        head_b: teacher.head_b.deep_clone(),
    })
}

/// Next-token cross-entropy: logits at positions 0..L-1 predict tokens at
/// 1..L.
pub fn lm_shift_loss(logits: &Tensor<f32>, tokens: &[u32], batch: usize) -> Result<Tensor<f32>> {
    let shape = logits.shape().to_vec();
    if shape.len() != 3 || shape[0] != batch {
        return Err(Error::Contract(format!(
            "lm loss expects [batch, len, vocab] logits, got {shape:?}"
        )));
    }
    let (l, v) = (shape[1], shape[2]);
    if l < 2 {
        return Err(Error::Contract(
            "lm loss needs sequences of at least 2 tokens".into(),
        ));
    }
    let pred = logits.narrow(1, 0, l - 1)?.reshape(&[batch * (l - 1), v])?;
    let mut labels = Vec::with_capacity(batch * (l - 1));
    for b in 0..batch {
        for t in 1..l {
            labels.push(tokens[b * l + t] as usize);
        }
    }
    pred.cross_entropy(&labels)
}

/// Cross-entropy over pooled classifier logits [batch, classes].
pub fn classification_loss(logits: &Tensor<f32>, labels: &[u32]) -> Result<Tensor<f32>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Contract(format!(
            "classification loss expects [batch, classes] logits matching {} labels, got {shape:?}",
            labels.len()
        )));
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    logits.cross_entropy(&labels)
}
