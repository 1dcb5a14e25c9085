//! Experiment configuration files.
//!
//! TOML with sections; unknown keys are rejected with a line-anchored
//! message. A parsed config re-serializes with all defaults materialized,
//! and that canonical text is what gets hashed and frozen into run
//! directories.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::string_sha256_hex;
use crate::data::{gen_cls_task, gen_lm_corpus, ClsRule, LmGrammar, TaskDataset, TaskKind, Vocab};
use crate::distill::{
    DistillConfig, DistillMode, FilterInit, LayerMap, MapPolicy, TedVariant,
};
use crate::error::{Error, Result};
use crate::filters::FilterArch;
use crate::model::{HeadKind, ModelConfig};
use crate::optim::OptimHyper;

fn default_log_interval() -> u64 {
    10
}

fn default_lr() -> f64 {
    2.5e-4
}

fn default_warmup() -> f64 {
    0.05
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.98
}

fn default_epsilon() -> f64 {
    1e-6
}

fn default_batch_size() -> usize {
    16
}

fn default_epochs() -> usize {
    1
}

fn default_alpha1() -> f64 {
    2.5
}

fn default_alpha2() -> f64 {
    0.1
}

fn default_temperature() -> f64 {
    2.0
}

fn default_true() -> bool {
    true
}

fn default_mode() -> String {
    "ted".into()
}

fn default_variant() -> String {
    "mse".into()
}

fn default_filter_init() -> String {
    "trained".into()
}

fn default_arch() -> String {
    "linear".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarSection {
    #[serde(default = "GrammarSection::default_max_depth")]
    pub max_depth: usize,
    #[serde(default = "GrammarSection::default_nest_pct")]
    pub nest_pct: u32,
    #[serde(default = "GrammarSection::default_max_run")]
    pub max_run: usize,
}

impl GrammarSection {
    fn default_max_depth() -> usize {
        LmGrammar::default().max_depth
    }

    fn default_nest_pct() -> u32 {
        LmGrammar::default().nest_pct
    }

    fn default_max_run() -> usize {
        LmGrammar::default().max_run
    }
}

impl Default for GrammarSection {
    fn default() -> Self {
        GrammarSection {
            max_depth: Self::default_max_depth(),
            nest_pct: Self::default_nest_pct(),
            max_run: Self::default_max_run(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    /// "lm" or "cls".
    pub kind: String,
    pub num_sequences: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default)]
    pub rule: Option<String>,
    #[serde(default)]
    pub grammar: Option<GrammarSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub depth: usize,
    pub hidden_dim: usize,
    pub head_count: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub dropout: f64,
    /// Defaults to true for LM tasks, false (and required false) for
    /// classification.
    #[serde(default)]
    pub tie_embeddings: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerMapSection {
    /// "identity", "skip-alternate", or "explicit".
    pub policy: String,
    #[serde(default)]
    pub explicit: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            lr: default_lr(),
            warmup_ratio: default_warmup(),
            weight_decay: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            grad_clip: None,
        }
    }
}

impl OptimSection {
    pub fn to_hyper(&self, seed: u64) -> OptimHyper {
        OptimHyper {
            base_lr: self.lr,
            warmup_ratio: self.warmup_ratio,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            grad_clip: self.grad_clip,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Section {
    #[serde(default)]
    pub optim: OptimSection,
    /// Width-mismatch path trains a student bank too; the width-equal path
    /// adopts the teacher's trained filters instead.
    #[serde(default)]
    pub train_student_filters: bool,
    /// Fine-tune the student on the task before training its filters.
    #[serde(default)]
    pub fine_tune_student_first: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_alpha1")]
    pub alpha1: f64,
    #[serde(default = "default_alpha2")]
    pub alpha2: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_variant")]
    pub ted_variant: String,
    #[serde(default = "default_true")]
    pub t2_rescale: bool,
    #[serde(default = "default_filter_init")]
    pub teacher_filter_init: String,
    #[serde(default = "default_filter_init")]
    pub student_filter_init: String,
    #[serde(default)]
    pub alpha2_sweep: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    #[serde(default = "default_arch")]
    pub arch: String,
    #[serde(default)]
    pub seed: u64,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            arch: default_arch(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    #[serde(default = "default_log_interval")]
    pub log_interval: u64,
    pub task: TaskSection,
    pub teacher: ModelSection,
    pub student: ModelSection,
    pub layer_map: LayerMapSection,
    #[serde(default)]
    pub teacher_train: OptimSection,
    #[serde(default)]
    pub stage1: Stage1Section,
    #[serde(default)]
    pub stage2: OptimSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub filters: FilterSection,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Stage1Section {
            optim: OptimSection::default(),
            train_student_filters: false,
            fine_tune_student_first: false,
        }
    }
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            mode: default_mode(),
            alpha1: default_alpha1(),
            alpha2: default_alpha2(),
            temperature: default_temperature(),
            ted_variant: default_variant(),
            t2_rescale: true,
            teacher_filter_init: default_filter_init(),
            student_filter_init: default_filter_init(),
            alpha2_sweep: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            // toml errors carry line/column spans in their Display output.
            Error::Config(format!("{e}"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn task_kind(&self) -> Result<TaskKind> {
        match self.task.kind.as_str() {
            "lm" => Ok(TaskKind::CausalLm),
            "cls" => Ok(TaskKind::Classification),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list is empty".into()));
        }
        if self.name.is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        let kind = self.task_kind()?;
        match kind {
            TaskKind::CausalLm => {
                if self.task.rule.is_some() || self.task.num_classes != 0 {
                    return Err(Error::Config(
                        "lm tasks take neither rule nor num_classes".into(),
                    ));
                }
            }
            TaskKind::Classification => {
                let rule = self.task.rule.as_deref().ok_or_else(|| {
                    Error::Config("classification tasks need a rule".into())
                })?;
                ClsRule::parse(rule)?;
                if self.task.num_classes < 2 {
                    return Err(Error::Config("classification needs num_classes >= 2".into()));
                }
                if self.task.grammar.is_some() {
                    return Err(Error::Config("grammar only applies to lm tasks".into()));
                }
            }
        }
        self.teacher_model_config()?.validate()?;
        self.student_model_config()?.validate()?;
        self.build_layer_map()?;
        for (name, s) in [
            ("teacher_train", &self.teacher_train),
            ("stage1.optim", &self.stage1.optim),
            ("stage2", &self.stage2),
        ] {
            s.to_hyper(0).validate().map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("[{name}] {msg}")),
                other => other,
            })?;
        }
        self.build_distill(None)?.validate()?;
        FilterArch::decode(&self.filters.arch)
            .map_err(|_| Error::Config(format!("unknown filter arch {:?}", self.filters.arch)))?;
        if self.distill.alpha2_sweep.iter().any(|&a| a < 0.0) {
            return Err(Error::Config("alpha2_sweep values must be >= 0".into()));
        }
        Ok(())
    }

    /// Canonical text with all defaults materialized.
    pub fn canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn config_hash(&self) -> String {
        string_sha256_hex(&self.canonical_toml())
    }

    /// Hash over the task definition only; runs being compared must agree
    /// on it.
    pub fn task_hash(&self) -> String {
        let text = toml::to_string_pretty(&self.task).expect("task serializes");
        string_sha256_hex(&text)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::toy16()
    }

    pub fn build_task(&self) -> Result<(TaskDataset, TaskDataset)> {
        match self.task_kind()? {
            TaskKind::CausalLm => {
                let g = self.task.grammar.clone().unwrap_or_default();
                let grammar = LmGrammar {
                    max_depth: g.max_depth,
                    nest_pct: g.nest_pct,
                    max_run: g.max_run,
                };
                gen_lm_corpus(
                    self.task.data_seed,
                    self.task.num_sequences,
                    self.task.seq_len,
                    &grammar,
                )
            }
            TaskKind::Classification => {
                let rule = ClsRule::parse(self.task.rule.as_deref().expect("validated"))?;
                gen_cls_task(
                    self.task.data_seed,
                    self.task.num_sequences,
                    self.task.seq_len,
                    self.task.num_classes,
                    rule,
                )
            }
        }
    }

    fn head_kind(&self) -> Result<HeadKind> {
        Ok(match self.task_kind()? {
            TaskKind::CausalLm => HeadKind::Lm,
            TaskKind::Classification => HeadKind::Classifier {
                num_classes: self.task.num_classes,
            },
        })
    }

    fn model_config(&self, section: &ModelSection) -> Result<ModelConfig> {
        let kind = self.task_kind()?;
        let tie_default = kind == TaskKind::CausalLm;
        Ok(ModelConfig {
            depth: section.depth,
            hidden_dim: section.hidden_dim,
            head_count: section.head_count,
            ffn_dim: section.ffn_dim,
            vocab_size: self.vocab().size(),
            max_seq_len: section.max_seq_len,
            dropout_rate: section.dropout,
            tie_embeddings: section.tie_embeddings.unwrap_or(tie_default),
            head: self.head_kind()?,
        })
    }

    pub fn teacher_model_config(&self) -> Result<ModelConfig> {
        self.model_config(&self.teacher)
    }

    pub fn student_model_config(&self) -> Result<ModelConfig> {
        self.model_config(&self.student)
    }

    pub fn build_layer_map(&self) -> Result<LayerMap> {
        let policy = match self.layer_map.policy.as_str() {
            "identity" => MapPolicy::Identity,
            "skip-alternate" => MapPolicy::SkipAlternate,
            "explicit" => MapPolicy::Explicit(self.layer_map.explicit.clone()),
            other => return Err(Error::Config(format!("unknown map policy {other:?}"))),
        };
        LayerMap::new(policy, self.student.depth, self.teacher.depth)
    }

    /// Distillation config for a mode (CLI override or the config default).
    /// FT forces both alphas to zero and KD forces alpha2 to zero, so one
    /// experiment file drives all four baseline modes.
    pub fn build_distill(&self, mode_override: Option<DistillMode>) -> Result<DistillConfig> {
        let mode = match mode_override {
            Some(m) => m,
            None => DistillMode::parse(&self.distill.mode)?,
        };
        let (alpha1, alpha2) = match mode {
            DistillMode::Ft => (0.0, 0.0),
            DistillMode::Kd => (self.distill.alpha1, 0.0),
            _ => (self.distill.alpha1, self.distill.alpha2),
        };
        Ok(DistillConfig {
            mode,
            alpha1,
            alpha2,
            temperature: self.distill.temperature,
            ted_variant: TedVariant::parse(&self.distill.ted_variant)?,
            t2_rescale: self.distill.t2_rescale,
            teacher_filter_init: FilterInit::parse(&self.distill.teacher_filter_init)?,
            student_filter_init: FilterInit::parse(&self.distill.student_filter_init)?,
        })
    }

    pub fn filter_arch(&self) -> Result<FilterArch> {
        FilterArch::decode(&self.filters.arch)
    }

    /// Widths differ: the student cannot adopt teacher layers or filters.
    pub fn width_mismatch(&self) -> bool {
        self.teacher.hidden_dim != self.student.hidden_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        name = "t"
        seeds = [1]
        out_dir = "runs/t"
        [task]
        kind = "lm"
        num_sequences = 100
        seq_len = 32
        [teacher]
        depth = 2
        hidden_dim = 16
        head_count = 2
        ffn_dim = 32
        max_seq_len = 32
        [student]
        depth = 1
        hidden_dim = 16
        head_count = 2
        ffn_dim = 32
        max_seq_len = 32
        [layer_map]
        policy = "skip-alternate"
    "#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.teacher_train.lr, 2.5e-4);
        assert_eq!(cfg.distill.alpha1, 2.5);
        assert_eq!(cfg.distill.alpha2, 0.1);
        assert_eq!(cfg.distill.temperature, 2.0);
        assert_eq!(cfg.stage1.optim.epochs, 1);
        let map = cfg.build_layer_map().unwrap();
        assert_eq!(map.indices(), vec![2]);
    }

    #[test]
    fn unknown_key_is_rejected_with_location() {
        let bad = MINIMAL.replace("[teacher]", "typo_key = 3\n[teacher]");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("typo_key") || msg.contains("unknown field"), "{msg}");
        assert!(msg.contains("line"), "no line anchor in {msg}");
    }

    #[test]
    fn canonical_toml_roundtrips_to_same_hash() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let canon = cfg.canonical_toml();
        let cfg2 = ExperimentConfig::from_toml(&canon).unwrap();
        assert_eq!(cfg.config_hash(), cfg2.config_hash());
    }

    #[test]
    fn ft_and_kd_force_alpha_constraints() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let ft = cfg.build_distill(Some(DistillMode::Ft)).unwrap();
        assert_eq!((ft.alpha1, ft.alpha2), (0.0, 0.0));
        let kd = cfg.build_distill(Some(DistillMode::Kd)).unwrap();
        assert_eq!(kd.alpha1, 2.5);
        assert_eq!(kd.alpha2, 0.0);
        ft.validate().unwrap();
        kd.validate().unwrap();
    }

    #[test]
    fn cls_task_requires_rule() {
        let bad = MINIMAL.replace("kind = \"lm\"", "kind = \"cls\"");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad),
            Err(Error::Config(_))
        ));
    }
}
