//! Run-directory orchestration behind the CLI commands.
//!
//! Each command produces one run directory containing a frozen copy of the
//! resolved config, the artifacts (checkpoints, metrics), and a manifest
//! that records the config hash and the hashes of parent artifacts, so a
//! later comparison can verify the whole chain.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{file_sha256_hex, Checkpoint};
use crate::config::ExperimentConfig;
use crate::data::{TaskDataset, TaskKind};
use crate::distill::{DistillConfig, DistillMode, FilterInit, TedVariant};
use crate::error::{Error, Result};
use crate::filters::{build_bank, FilterBank, Side};
use crate::model::{init_student_from_teacher, TransformerModel};
use crate::optim::TrainState;
use crate::tensor::Tensor;
use crate::trainer::{
    bank_sha256, derive_seed, evaluate, model_sha256, run_stage2, total_steps, train_filter_bank,
    train_model, EvalMetrics, MetricsWriter, Stage2Setup,
};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CONFIG_FILE: &str = "config.toml";
pub const RESUME_FILE: &str = "resume.ckpt";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub force: bool,
    /// Stop after this many optimizer steps, leaving a resumable run.
    pub stop_after: Option<u64>,
    /// Continue an interrupted run from its resume checkpoint.
    pub resume: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParentRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FinalMetric {
    pub metric: String,
    pub value: f64,
    pub split: String,
}

/// Provenance record for one run directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub schema: u32,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    pub seed: u64,
    pub name: String,
    pub config_hash: String,
    pub task_hash: String,
    pub complete: bool,
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
    #[serde(default)]
    pub parents: BTreeMap<String, ParentRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_metric: Option<FinalMetric>,
}

impl Manifest {
    fn new(command: &str, mode: Option<&str>, seed: u64, cfg: &ExperimentConfig) -> Manifest {
        Manifest {
            schema: 1,
            command: command.to_string(),
            mode: mode.map(|m| m.to_string()),
            seed,
            name: cfg.name.clone(),
            config_hash: cfg.config_hash(),
            task_hash: cfg.task_hash(),
            complete: false,
            artifacts: BTreeMap::new(),
            parents: BTreeMap::new(),
            final_metric: None,
        }
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|_| {
            Error::Artifact(format!("no manifest at {}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).expect("manifest serializes");
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    fn add_artifact(&mut self, dir: &Path, file: &str) -> Result<()> {
        let hash = file_sha256_hex(&dir.join(file))?;
        self.artifacts.insert(file.to_string(), hash);
        Ok(())
    }

    fn add_parent(&mut self, label: &str, path: &Path) -> Result<()> {
        self.parents.insert(
            label.to_string(),
            ParentRef {
                path: path.display().to_string(),
                sha256: file_sha256_hex(path)?,
            },
        );
        Ok(())
    }

    /// Re-hash every artifact and parent and compare against the record.
    pub fn verify_chain(&self, dir: &Path) -> Result<()> {
        for (file, recorded) in &self.artifacts {
            let actual = file_sha256_hex(&dir.join(file)).map_err(|_| {
                Error::Compare(format!("{}: artifact {file} is missing", dir.display()))
            })?;
            if &actual != recorded {
                return Err(Error::Compare(format!(
                    "{}: artifact {file} hash changed since the run",
                    dir.display()
                )));
            }
        }
        for (label, parent) in &self.parents {
            let actual = file_sha256_hex(Path::new(&parent.path)).map_err(|_| {
                Error::Compare(format!(
                    "{}: parent {label} missing at {}",
                    dir.display(),
                    parent.path
                ))
            })?;
            if actual != parent.sha256 {
                return Err(Error::Compare(format!(
                    "{}: parent {label} at {} no longer matches its recorded hash",
                    dir.display(),
                    parent.path
                )));
            }
        }
        Ok(())
    }
}

/// Standard run-directory names.
pub fn teacher_dir(out_root: &Path, seed: u64) -> PathBuf {
    out_root.join(format!("teacher-seed{seed}"))
}

pub fn stage1_dir(out_root: &Path, seed: u64) -> PathBuf {
    out_root.join(format!("stage1-seed{seed}"))
}

pub fn distill_dir(out_root: &Path, mode: DistillMode, seed: u64) -> PathBuf {
    out_root.join(format!("distill-{}-seed{seed}", mode.name()))
}

fn sweep_subdir(out_root: &Path, mode: DistillMode, idx: usize, seed: u64) -> PathBuf {
    out_root.join(format!("distill-{}-a2{idx}-seed{seed}", mode.name()))
}

/// Create (or re-enter) a run directory: refuse when a completed manifest
/// is present and neither --force nor resume applies.
fn begin_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    manifest: &Manifest,
    opts: &RunOptions,
) -> Result<()> {
    if dir.exists() {
        match Manifest::load(dir) {
            Ok(existing) if existing.complete && !opts.force => {
                return Err(Error::Artifact(format!(
                    "{} already holds a completed run; re-run with --force to overwrite",
                    dir.display()
                )));
            }
            Ok(_) if opts.resume => {
                // Keep the directory for resumption.
                return Ok(());
            }
            _ => {
                fs::remove_dir_all(dir)?;
            }
        }
    }
    if opts.resume {
        return Err(Error::Artifact(format!(
            "nothing to resume at {}",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.canonical_toml())?;
    manifest.save(dir)?;
    Ok(())
}

fn write_eval_file(dir: &Path, rows: &[(&str, &EvalMetrics)]) -> Result<()> {
    let mut f = fs::File::create(dir.join("eval.csv"))?;
    writeln!(f, "{}", EvalMetrics::csv_header())?;
    for (split, m) in rows {
        writeln!(f, "{}", m.csv_row(split))?;
    }
    Ok(())
}

pub struct CommandOutcome {
    pub run_dir: PathBuf,
    pub lines: Vec<String>,
}

/// Train the teacher from scratch on the task and record its final eval
/// metric in the manifest.
pub fn cmd_train_teacher(
    cfg: &ExperimentConfig,
    seed: u64,
    out_root: &Path,
    opts: &RunOptions,
) -> Result<CommandOutcome> {
    let dir = teacher_dir(out_root, seed);
    let mut manifest = Manifest::new("train-teacher", None, seed, cfg);
    begin_run(&dir, cfg, &manifest, opts)?;

    let (train, test) = cfg.build_task()?;
    let hyper = cfg
        .teacher_train
        .to_hyper(derive_seed(seed, "teacher-train", 0));

    let (teacher, state) = if opts.resume {
        let ck = Checkpoint::read_from(&dir.join(RESUME_FILE))?;
        let model = TransformerModel::from_checkpoint(&ck)?;
        let state = TrainState::<f32>::load_from(&ck)?;
        (model, Some(state))
    } else {
        (
            TransformerModel::new(cfg.teacher_model_config()?, derive_seed(seed, "teacher-init", 0))?,
            None,
        )
    };

    let mut writer = MetricsWriter::create(
        &dir.join("metrics.csv"),
        None,
        cfg.log_interval,
        opts.resume,
    )?;
    let state = train_model(&teacher, &train, &hyper, state, opts.stop_after, &mut writer)?;

    if state.step < total_steps(train.len(), &hyper) {
        let mut ck = teacher.to_checkpoint();
        state.save_into(&mut ck)?;
        ck.write_to(&dir.join(RESUME_FILE))?;
        manifest.save(&dir)?;
        return Ok(CommandOutcome {
            run_dir: dir.clone(),
            lines: vec![format!(
                "teacher-seed{seed}: paused at step {} (resumable)",
                state.step
            )],
        });
    }

    teacher.save(&dir.join("model.ckpt"))?;
    let train_eval = evaluate(&teacher, &train)?;
    let test_eval = evaluate(&teacher, &test)?;
    write_eval_file(&dir, &[("train", &train_eval), ("test", &test_eval)])?;
    let _ = fs::remove_file(dir.join(RESUME_FILE));

    manifest.add_artifact(&dir, "model.ckpt")?;
    manifest.add_artifact(&dir, "metrics.csv")?;
    manifest.add_artifact(&dir, "eval.csv")?;
    manifest.final_metric = Some(FinalMetric {
        metric: test_eval.metric_name.to_string(),
        value: test_eval.metric_value,
        split: "test".into(),
    });
    manifest.complete = true;
    manifest.save(&dir)?;

    Ok(CommandOutcome {
        run_dir: dir,
        lines: vec![format!(
            "teacher-seed{seed}: {} {:.4} (test), {} samples",
            test_eval.metric_name, test_eval.metric_value, test_eval.n_samples
        )],
    })
}

fn load_teacher(out_root: &Path, seed: u64) -> Result<(TransformerModel, PathBuf)> {
    let dir = teacher_dir(out_root, seed);
    let path = dir.join("model.ckpt");
    if !path.exists() {
        return Err(Error::Artifact(format!(
            "teacher checkpoint missing at {}; run train-teacher first",
            path.display()
        )));
    }
    let manifest = Manifest::load(&dir)?;
    if !manifest.complete {
        return Err(Error::Artifact(format!(
            "teacher run at {} is incomplete",
            dir.display()
        )));
    }
    Ok((TransformerModel::load(&path)?, path))
}

/// Build the student initialization shared by every distillation mode:
/// a teacher-layer subset when widths match, fresh weights otherwise, or
/// the fine-tuned init produced by stage1 when it exists.
fn student_init(
    cfg: &ExperimentConfig,
    seed: u64,
    out_root: &Path,
    teacher: Option<&TransformerModel>,
) -> Result<(TransformerModel, String)> {
    let s1 = stage1_dir(out_root, seed).join("student_init.ckpt");
    if s1.exists() {
        return Ok((
            TransformerModel::load(&s1)?,
            format!("stage1 init ({})", s1.display()),
        ));
    }
    let student_cfg = cfg.student_model_config()?;
    if !cfg.width_mismatch() {
        if let Some(teacher) = teacher {
            let map = cfg.build_layer_map()?;
            return Ok((
                init_student_from_teacher(teacher, &student_cfg, &map)?,
                "teacher layer subset".to_string(),
            ));
        }
    }
    Ok((
        TransformerModel::new(student_cfg, derive_seed(seed, "student-init", 0))?,
        "fresh".to_string(),
    ))
}

/// Train (or import) the task-aware filter banks on frozen backbones.
pub fn cmd_stage1(
    cfg: &ExperimentConfig,
    seed: u64,
    out_root: &Path,
    opts: &RunOptions,
    filters_from: Option<&Path>,
) -> Result<CommandOutcome> {
    let dir = stage1_dir(out_root, seed);
    let mut manifest = Manifest::new("stage1", None, seed, cfg);
    if opts.resume {
        return Err(Error::Unsupported(
            "stage1 runs are short; resume is only supported for training runs".into(),
        ));
    }
    begin_run(&dir, cfg, &manifest, opts)?;

    let (teacher, teacher_path) = load_teacher(out_root, seed)?;
    manifest.add_parent("teacher", &teacher_path)?;
    let (train, test) = cfg.build_task()?;
    let map = cfg.build_layer_map()?;
    let arch = cfg.filter_arch()?;
    let d_t = cfg.teacher.hidden_dim;
    let mut lines = Vec::new();

    if let Some(foreign_dir) = filters_from {
        // Cross-task filter loading: compatibility is checked by dims only.
        let src = foreign_dir.join("filters_teacher.ckpt");
        if !src.exists() {
            return Err(Error::Artifact(format!(
                "no filters_teacher.ckpt under {}",
                foreign_dir.display()
            )));
        }
        let bank = FilterBank::load(&src)?;
        bank.check_dims(d_t, d_t, map.student_depth())?;
        bank.save(&dir.join("filters_teacher.ckpt"))?;
        manifest.add_parent("foreign_filters_teacher", &src)?;
        lines.push(format!(
            "stage1-seed{seed}: imported teacher filters trained on task {:?}",
            bank.source_task()
        ));
        let src_student = foreign_dir.join("filters_student.ckpt");
        if src_student.exists() {
            let bank = FilterBank::load(&src_student)?;
            bank.check_dims(cfg.student.hidden_dim, d_t, map.student_depth())?;
            bank.save(&dir.join("filters_student.ckpt"))?;
            manifest.add_parent("foreign_filters_student", &src_student)?;
            lines.push(format!(
                "stage1-seed{seed}: imported student filters trained on task {:?}",
                bank.source_task()
            ));
        }
    } else {
        // Teacher filters on the frozen teacher.
        teacher.set_frozen(true);
        let hash_before = model_sha256(&teacher);
        let bank_t = build_bank(
            arch,
            &teacher,
            &map,
            Side::Teacher,
            d_t,
            derive_seed(seed, "filters-teacher", 0),
            &cfg.name,
        )?;
        let mut writer = MetricsWriter::create(
            &dir.join("metrics.csv"),
            Some((&dir.join("layers.csv").clone(), map.student_depth())),
            cfg.log_interval,
            false,
        )?;
        let hyper = cfg
            .stage1
            .optim
            .to_hyper(derive_seed(seed, "stage1-teacher", 0));
        train_filter_bank(&teacher, &bank_t, &train, &hyper, None, opts.stop_after, &mut writer)?;
        if model_sha256(&teacher) != hash_before {
            return Err(Error::Freeze(
                "teacher backbone changed during filter training".into(),
            ));
        }
        bank_t.save(&dir.join("filters_teacher.ckpt"))?;
        lines.push(format!(
            "stage1-seed{seed}: trained teacher filters ({} params, backbone hash unchanged)",
            bank_t.param_count()
        ));

        if cfg.stage1.train_student_filters {
            let (student, init_kind) = student_init(cfg, seed, out_root, Some(&teacher))?;
            if cfg.stage1.fine_tune_student_first {
                let ft_hyper = cfg
                    .stage1
                    .optim
                    .to_hyper(derive_seed(seed, "stage1-student-ft", 0));
                let mut ft_writer = MetricsWriter::create(
                    &dir.join("metrics_student_ft.csv"),
                    None,
                    cfg.log_interval,
                    false,
                )?;
                train_model(&student, &train, &ft_hyper, None, None, &mut ft_writer)?;
                let m = evaluate(&student, &test)?;
                lines.push(format!(
                    "stage1-seed{seed}: fine-tuned student before filter training \
                     ({} {:.4} test)",
                    m.metric_name, m.metric_value
                ));
            }
            student.save(&dir.join("student_init.ckpt"))?;
            student.set_frozen(true);
            let student_hash = model_sha256(&student);
            let bank_s = build_bank(
                arch,
                &student,
                &map,
                Side::Student,
                d_t,
                derive_seed(seed, "filters-student", 0),
                &cfg.name,
            )?;
            let mut writer = MetricsWriter::create(
                &dir.join("metrics_student.csv"),
                None,
                cfg.log_interval,
                false,
            )?;
            let hyper = cfg
                .stage1
                .optim
                .to_hyper(derive_seed(seed, "stage1-student", 0));
            train_filter_bank(&student, &bank_s, &train, &hyper, None, opts.stop_after, &mut writer)?;
            if model_sha256(&student) != student_hash {
                return Err(Error::Freeze(
                    "student backbone changed during filter training".into(),
                ));
            }
            bank_s.save(&dir.join("filters_student.ckpt"))?;
            manifest.add_artifact(&dir, "filters_student.ckpt")?;
            manifest.add_artifact(&dir, "student_init.ckpt")?;
            manifest.add_artifact(&dir, "metrics_student.csv")?;
            lines.push(format!(
                "stage1-seed{seed}: trained student filters on frozen {init_kind} student"
            ));
        }
        manifest.add_artifact(&dir, "metrics.csv")?;
    }

    manifest.add_artifact(&dir, "filters_teacher.ckpt")?;
    manifest.complete = true;
    manifest.save(&dir)?;
    Ok(CommandOutcome {
        run_dir: dir,
        lines,
    })
}

struct DistillArtifacts {
    teacher: Option<TransformerModel>,
    teacher_path: Option<PathBuf>,
    teacher_bank: Option<FilterBank>,
    teacher_bank_path: Option<PathBuf>,
    student_bank: Option<FilterBank>,
    student_bank_from: Option<PathBuf>,
    projections: Option<Vec<Tensor<f32>>>,
    student: TransformerModel,
    student_init_kind: String,
}

/// Resolve every prerequisite for a distillation run per the mode and the
/// filter-init configuration.
fn assemble_distill(
    cfg: &ExperimentConfig,
    dcfg: &DistillConfig,
    seed: u64,
    out_root: &Path,
) -> Result<DistillArtifacts> {
    let map = cfg.build_layer_map()?;
    let k = map.student_depth();
    let (d_s, d_t) = (cfg.student.hidden_dim, cfg.teacher.hidden_dim);

    let (teacher, teacher_path) = if dcfg.mode == DistillMode::Ft {
        match load_teacher(out_root, seed) {
            Ok((t, p)) => (Some(t), Some(p)),
            Err(_) => (None, None),
        }
    } else {
        let (t, p) = load_teacher(out_root, seed)?;
        (Some(t), Some(p))
    };

    let (student, student_init_kind) = student_init(cfg, seed, out_root, teacher.as_ref())?;

    let mut teacher_bank = None;
    let mut teacher_bank_path = None;
    let mut student_bank = None;
    let mut student_bank_from = None;
    let mut projections = None;

    if dcfg.mode == DistillMode::Ted {
        let s1 = stage1_dir(out_root, seed);
        if dcfg.teacher_filter_init == FilterInit::Trained {
            let path = s1.join("filters_teacher.ckpt");
            if !path.exists() {
                return Err(Error::Artifact(format!(
                    "ted with trained teacher filters needs {}; run stage1 first",
                    path.display()
                )));
            }
            let bank = FilterBank::load(&path)?;
            bank.check_dims(d_t, d_t, k)?;
            teacher_bank = Some(bank);
            teacher_bank_path = Some(path);
        }
        match dcfg.student_filter_init {
            FilterInit::Trained => {
                if cfg.stage1.train_student_filters {
                    let path = s1.join("filters_student.ckpt");
                    if !path.exists() {
                        return Err(Error::Artifact(format!(
                            "ted with trained student filters needs {}; run stage1 first",
                            path.display()
                        )));
                    }
                    let bank = FilterBank::load(&path)?;
                    bank.check_dims(d_s, d_t, k)?;
                    bank.set_frozen(false);
                    student_bank = Some(bank);
                    student_bank_from = Some(path);
                } else {
                    // Width-equal path: adopt the teacher's trained filters.
                    let bank = teacher_bank.as_ref().ok_or_else(|| {
                        Error::Config(
                            "student_filter_init = trained without student stage1 \
                             requires trained teacher filters to adopt"
                                .into(),
                        )
                    })?;
                    student_bank = Some(bank.adopt_for_student(d_s)?);
                    student_bank_from = teacher_bank_path.clone();
                }
            }
            FilterInit::Random => {
                let bank = build_bank(
                    cfg.filter_arch()?,
                    &student,
                    &map,
                    Side::Student,
                    d_t,
                    derive_seed(seed, "filters-student-random", 0),
                    &cfg.name,
                )?;
                student_bank = Some(bank);
            }
            FilterInit::None => {
                if d_s != d_t {
                    // Raw comparison is dimensionally impossible; fall back
                    // to bias-free learnable projections.
                    let mut ws = Vec::with_capacity(k);
                    for i in 0..k {
                        let mut rng = rand::SeedableRng::seed_from_u64(derive_seed(
                            seed,
                            "ted-proj",
                            i as u64,
                        ));
                        ws.push(
                            Tensor::randn(&[d_s, d_t], crate::model::INIT_STD, &mut rng)
                                .trainable(),
                        );
                    }
                    projections = Some(ws);
                }
            }
        }
        // Head state per variant.
        match dcfg.ted_variant {
            TedVariant::Mse => {
                if let Some(bank) = teacher_bank.as_mut() {
                    bank.detach_heads();
                }
                if let Some(bank) = student_bank.as_mut() {
                    bank.detach_heads();
                }
            }
            TedVariant::Kl => {
                for (label, bank) in [("teacher", &teacher_bank), ("student", &student_bank)] {
                    match bank {
                        Some(b) if b.has_heads() => {}
                        Some(_) => {
                            return Err(Error::Config(format!(
                                "kl variant needs {label} filters with retained heads"
                            )));
                        }
                        None => {
                            return Err(Error::Config(format!(
                                "kl variant needs {label} filters; filter_init = none is \
                                 incompatible"
                            )));
                        }
                    }
                }
            }
        }
    }

    if dcfg.mode == DistillMode::Lwd {
        let mut ws = Vec::with_capacity(k);
        for i in 0..k {
            let mut rng =
                rand::SeedableRng::seed_from_u64(derive_seed(seed, "lwd-proj", i as u64));
            ws.push(Tensor::randn(&[d_s, d_t], crate::model::INIT_STD, &mut rng).trainable());
        }
        projections = Some(ws);
    }

    Ok(DistillArtifacts {
        teacher,
        teacher_path,
        teacher_bank,
        teacher_bank_path,
        student_bank,
        student_bank_from,
        projections,
        student,
        student_init_kind,
    })
}

/// One distillation training run in `dir`; shared by the plain command and
/// the alpha2 sweep driver.
fn distill_run(
    cfg: &ExperimentConfig,
    dcfg: &DistillConfig,
    seed: u64,
    out_root: &Path,
    dir: &Path,
    opts: &RunOptions,
) -> Result<(Manifest, EvalMetrics, Vec<String>)> {
    let mut manifest = Manifest::new("distill", Some(dcfg.mode.name()), seed, cfg);
    begin_run(dir, cfg, &manifest, opts)?;

    let (train, test) = cfg.build_task()?;
    let map = cfg.build_layer_map()?;
    let art = assemble_distill(cfg, dcfg, seed, out_root)?;

    if let Some(p) = &art.teacher_path {
        manifest.add_parent("teacher", p)?;
    }
    if let Some(p) = &art.teacher_bank_path {
        manifest.add_parent("teacher_filters", p)?;
    }
    if let Some(p) = &art.student_bank_from {
        manifest.add_parent("student_filters", p)?;
    }

    if let Some(t) = &art.teacher {
        t.set_frozen(true);
    }
    if let Some(b) = &art.teacher_bank {
        b.set_frozen(true);
    }
    let teacher_hash = art.teacher.as_ref().map(model_sha256);
    let teacher_bank_hash = art.teacher_bank.as_ref().map(bank_sha256);

    let hyper = cfg.stage2.to_hyper(derive_seed(seed, "stage2", 0));
    let state = if opts.resume {
        let ck = Checkpoint::read_from(&dir.join(RESUME_FILE))?;
        // Restore the trainable side in place.
        for (name, p) in art.student.named_params() {
            p.set_data(ck.tensor::<f32>(&format!("student::{name}"))?.to_vec())?;
        }
        if let Some(bank) = &art.student_bank {
            for (name, p) in bank.named_params() {
                p.set_data(ck.tensor::<f32>(&format!("sbank::{name}"))?.to_vec())?;
            }
        }
        if let Some(ws) = &art.projections {
            for (i, w) in ws.iter().enumerate() {
                w.set_data(ck.tensor::<f32>(&format!("proj::{i}"))?.to_vec())?;
            }
        }
        Some(TrainState::<f32>::load_from(&ck)?)
    } else {
        None
    };

    let mut writer = MetricsWriter::create(
        &dir.join("metrics.csv"),
        matches!(dcfg.mode, DistillMode::Lwd | DistillMode::Ted)
            .then(|| (dir.join("layers.csv"), map.student_depth()))
            .as_ref()
            .map(|(p, k)| (p.as_path(), *k)),
        cfg.log_interval,
        opts.resume,
    )?;

    let setup = Stage2Setup {
        cfg: dcfg,
        map: &map,
        student: &art.student,
        teacher: art.teacher.as_ref(),
        teacher_bank: art.teacher_bank.as_ref(),
        student_bank: art.student_bank.as_ref(),
        projections: art.projections.as_deref(),
    };
    let state = run_stage2(&setup, &train, &hyper, state, opts.stop_after, &mut writer)?;

    // The frozen side must be unchanged to the bit.
    if let (Some(t), Some(before)) = (&art.teacher, &teacher_hash) {
        if &model_sha256(t) != before {
            return Err(Error::Freeze("teacher changed during distillation".into()));
        }
    }
    if let (Some(b), Some(before)) = (&art.teacher_bank, &teacher_bank_hash) {
        if &bank_sha256(b) != before {
            return Err(Error::Freeze(
                "teacher filters changed during distillation".into(),
            ));
        }
    }

    if state.step < total_steps(train.len(), &hyper) {
        let mut full = Checkpoint::new();
        full.put_meta("kind", "resume")?;
        for (name, p) in art.student.named_params() {
            full.put_tensor(&format!("student::{name}"), &p)?;
        }
        if let Some(bank) = &art.student_bank {
            for (name, p) in bank.named_params() {
                full.put_tensor(&format!("sbank::{name}"), &p)?;
            }
        }
        if let Some(ws) = &art.projections {
            for (i, w) in ws.iter().enumerate() {
                full.put_tensor(&format!("proj::{i}"), w)?;
            }
        }
        state.save_into(&mut full)?;
        full.write_to(&dir.join(RESUME_FILE))?;
        manifest.save(dir)?;
        let m = evaluate(&art.student, &test)?;
        return Ok((
            manifest,
            m,
            vec![format!(
                "distill-{}-seed{seed}: paused at step {} (resumable)",
                dcfg.mode.name(),
                state.step
            )],
        ));
    }

    art.student.save(&dir.join("student.ckpt"))?;
    if let Some(bank) = &art.student_bank {
        bank.save(&dir.join("student_filters.ckpt"))?;
        manifest.add_artifact(dir, "student_filters.ckpt")?;
    }
    let train_eval = evaluate(&art.student, &train)?;
    let test_eval = evaluate(&art.student, &test)?;
    write_eval_file(dir, &[("train", &train_eval), ("test", &test_eval)])?;
    let _ = fs::remove_file(dir.join(RESUME_FILE));

    manifest.add_artifact(dir, "student.ckpt")?;
    manifest.add_artifact(dir, "metrics.csv")?;
    manifest.add_artifact(dir, "eval.csv")?;
    if dir.join("layers.csv").exists() {
        manifest.add_artifact(dir, "layers.csv")?;
    }
    manifest.final_metric = Some(FinalMetric {
        metric: test_eval.metric_name.to_string(),
        value: test_eval.metric_value,
        split: "test".into(),
    });
    manifest.complete = true;
    manifest.save(dir)?;

    let lines = vec![format!(
        "distill-{}-seed{seed}: student init = {}, {} {:.4} (test)",
        dcfg.mode.name(),
        art.student_init_kind,
        test_eval.metric_name,
        test_eval.metric_value
    )];
    Ok((manifest, test_eval, lines))
}

/// Distill the student in the requested mode. When the config lists an
/// alpha2 sweep and the mode uses alpha2, one run per value is produced
/// plus a summary with one metrics row per value.
pub fn cmd_distill(
    cfg: &ExperimentConfig,
    mode: Option<DistillMode>,
    seed: u64,
    out_root: &Path,
    opts: &RunOptions,
) -> Result<CommandOutcome> {
    let dcfg = cfg.build_distill(mode)?;
    dcfg.validate()?;
    let sweep_applies = !cfg.distill.alpha2_sweep.is_empty()
        && matches!(dcfg.mode, DistillMode::Lwd | DistillMode::Ted);

    if !sweep_applies {
        let dir = distill_dir(out_root, dcfg.mode, seed);
        let (_, _, lines) = distill_run(cfg, &dcfg, seed, out_root, &dir, opts)?;
        return Ok(CommandOutcome {
            run_dir: dir,
            lines,
        });
    }

    let summary_path = out_root.join(format!("sweep-{}-seed{seed}.csv", dcfg.mode.name()));
    let mut lines = Vec::new();
    let mut rows = Vec::new();
    for (idx, &alpha2) in cfg.distill.alpha2_sweep.iter().enumerate() {
        let sub = sweep_subdir(out_root, dcfg.mode, idx, seed);
        let mut sub_cfg = dcfg.clone();
        sub_cfg.alpha2 = alpha2;
        let (_, eval, mut sub_lines) = distill_run(cfg, &sub_cfg, seed, out_root, &sub, opts)?;
        lines.append(&mut sub_lines);
        rows.push((alpha2, eval));
    }
    let mut f = fs::File::create(&summary_path)?;
    writeln!(f, "alpha2,loss,metric,value")?;
    for (alpha2, eval) in &rows {
        writeln!(
            f,
            "{alpha2},{:.6},{},{:.6}",
            eval.loss, eval.metric_name, eval.metric_value
        )?;
    }
    lines.push(format!(
        "sweep: wrote {} rows to {}",
        rows.len(),
        summary_path.display()
    ));
    Ok(CommandOutcome {
        run_dir: out_root.to_path_buf(),
        lines,
    })
}

/// Evaluate a checkpoint on the config's task; metrics go to stdout lines
/// and an eval report next to the checkpoint (or under --out).
pub fn cmd_eval(
    checkpoint: &Path,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<CommandOutcome> {
    if !checkpoint.exists() {
        return Err(Error::Artifact(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let model = TransformerModel::load(checkpoint)?;
    let (train, test) = cfg.build_task()?;
    let train_eval = evaluate(&model, &train)?;
    let test_eval = evaluate(&model, &test)?;

    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir)?;
    let report = out_dir.join(format!("eval-{stem}.csv"));
    let mut f = fs::File::create(&report)?;
    writeln!(f, "{}", EvalMetrics::csv_header())?;
    writeln!(f, "{}", train_eval.csv_row("train"))?;
    writeln!(f, "{}", test_eval.csv_row("test"))?;

    Ok(CommandOutcome {
        run_dir: out_dir,
        lines: vec![
            format!("train: {}", train_eval.csv_row("train")),
            format!("test:  {}", test_eval.csv_row("test")),
            format!("wrote {}", report.display()),
        ],
    })
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metrics"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

struct CurveRow {
    step: u64,
    task: f64,
    pred: f64,
    distill: f64,
}

fn read_metrics_csv(path: &Path) -> Result<Vec<CurveRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 7 {
            return Err(Error::Format(format!(
                "{}: bad metrics row {line:?}",
                path.display()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("{}: bad number {s:?}", path.display())))
        };
        // Columns: step, lr, task_loss, pred_loss, distill_loss, ...
        rows.push(CurveRow {
            step: cols[0]
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad step {line:?}", path.display())))?,
            task: parse(cols[2])?,
            pred: parse(cols[3])?,
            distill: parse(cols[4])?,
        });
    }
    Ok(rows)
}

fn read_layers_csv(path: &Path) -> Result<Vec<(u64, Vec<f64>)>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let step: u64 = cols
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("{}: bad layers row", path.display())))?;
        let vals: Vec<f64> = cols
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Format(format!("{}: bad number {s:?}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((step, vals));
    }
    Ok(rows)
}

pub struct CompareOutcome {
    pub run_dir: PathBuf,
    pub lines: Vec<String>,
    /// mode -> (metric name, median over seeds)
    pub table: BTreeMap<String, (String, f64)>,
}

/// Compare completed runs on the same task: verify manifest chains, emit a
/// median-over-seeds table plus aligned per-step curve files, and the
/// per-layer distillation-loss mean/variance diagnostics.
pub fn cmd_compare(runs: &[PathBuf], out_root: &Path) -> Result<CompareOutcome> {
    if runs.len() < 2 {
        return Err(Error::Compare("need at least two runs to compare".into()));
    }
    let mut manifests = Vec::new();
    for dir in runs {
        let m = Manifest::load(dir)?;
        if !m.complete {
            return Err(Error::Artifact(format!(
                "{} is incomplete; finish the run before comparing",
                dir.display()
            )));
        }
        m.verify_chain(dir)?;
        manifests.push((dir.clone(), m));
    }
    let task_hash = &manifests[0].1.task_hash;
    for (dir, m) in &manifests {
        if &m.task_hash != task_hash {
            return Err(Error::Compare(format!(
                "{} was produced for a different task spec",
                dir.display()
            )));
        }
    }

    let compare_dir = out_root.join("compare");
    fs::create_dir_all(&compare_dir)?;

    // Group by mode label.
    let mut by_mode: BTreeMap<String, Vec<(&PathBuf, &Manifest)>> = BTreeMap::new();
    for (dir, m) in &manifests {
        let label = m.mode.clone().unwrap_or_else(|| m.command.clone());
        by_mode.entry(label).or_default().push((dir, m));
    }

    // All modes must cover the same seed set.
    let seed_set = |runs: &[(&PathBuf, &Manifest)]| -> Vec<u64> {
        let mut seeds: Vec<u64> = runs.iter().map(|(_, m)| m.seed).collect();
        seeds.sort_unstable();
        seeds
    };
    let first_seeds = seed_set(by_mode.values().next().expect("non-empty"));
    for (mode, runs) in &by_mode {
        let seeds = seed_set(runs);
        if seeds != first_seeds {
            return Err(Error::Compare(format!(
                "mode {mode} covers seeds {seeds:?}, expected {first_seeds:?}"
            )));
        }
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Compare(format!(
                "mode {mode} has duplicate seeds {seeds:?}"
            )));
        }
    }

    let mut lines = Vec::new();
    let mut table = BTreeMap::new();
    let mut table_file = fs::File::create(compare_dir.join("table.csv"))?;
    writeln!(table_file, "mode,metric,median,seeds")?;
    for (mode, mode_runs) in &by_mode {
        let metric_name = mode_runs
            .iter()
            .filter_map(|(_, m)| m.final_metric.as_ref())
            .map(|f| f.metric.clone())
            .next()
            .ok_or_else(|| {
                Error::Compare(format!("mode {mode} has no final metric recorded"))
            })?;
        let mut values: Vec<f64> = mode_runs
            .iter()
            .filter_map(|(_, m)| m.final_metric.as_ref().map(|f| f.value))
            .collect();
        let med = median(&mut values);
        writeln!(
            table_file,
            "{mode},{metric_name},{med:.6},{}",
            mode_runs.len()
        )?;
        lines.push(format!(
            "{mode}: median {metric_name} {med:.4} over {} seed(s)",
            mode_runs.len()
        ));
        table.insert(mode.clone(), (metric_name, med));

        // Aligned per-step curves.
        let mut per_seed: Vec<(u64, Vec<CurveRow>)> = Vec::new();
        for (dir, m) in mode_runs {
            let path = dir.join("metrics.csv");
            if path.exists() {
                per_seed.push((m.seed, read_metrics_csv(&path)?));
            }
        }
        if !per_seed.is_empty() {
            per_seed.sort_by_key(|(seed, _)| *seed);
            let common: Vec<u64> = {
                let mut steps: Vec<u64> = per_seed[0].1.iter().map(|r| r.step).collect();
                for (_, rows) in &per_seed[1..] {
                    let set: std::collections::HashSet<u64> =
                        rows.iter().map(|r| r.step).collect();
                    steps.retain(|s| set.contains(s));
                }
                steps
            };
            let mut f = fs::File::create(compare_dir.join(format!("curves-{mode}.csv")))?;
            let mut header = vec!["step".to_string()];
            for (seed, _) in &per_seed {
                for col in ["task", "pred", "distill"] {
                    header.push(format!("{col}_s{seed}"));
                }
            }
            writeln!(f, "{}", header.join(","))?;
            for &step in &common {
                let mut row = vec![step.to_string()];
                for (_, rows) in &per_seed {
                    let r = rows.iter().find(|r| r.step == step).expect("common step");
                    row.push(format!("{:.6}", r.task));
                    row.push(format!("{:.6}", r.pred));
                    row.push(format!("{:.6}", r.distill));
                }
                writeln!(f, "{}", row.join(","))?;
            }
        }

        // Per-layer distillation diagnostics: mean and variance across
        // layers per step, median over seeds.
        let mut per_seed_layers: Vec<Vec<(u64, Vec<f64>)>> = Vec::new();
        for (dir, _) in mode_runs {
            let path = dir.join("layers.csv");
            if path.exists() {
                per_seed_layers.push(read_layers_csv(&path)?);
            }
        }
        if !per_seed_layers.is_empty() {
            let common: Vec<u64> = {
                let mut steps: Vec<u64> =
                    per_seed_layers[0].iter().map(|(s, _)| *s).collect();
                for rows in &per_seed_layers[1..] {
                    let set: std::collections::HashSet<u64> =
                        rows.iter().map(|(s, _)| *s).collect();
                    steps.retain(|s| set.contains(s));
                }
                steps
            };
            let mut f =
                fs::File::create(compare_dir.join(format!("distill_diag-{mode}.csv")))?;
            writeln!(f, "step,layer_mean_median,layer_var_median")?;
            for &step in &common {
                let mut means = Vec::new();
                let mut vars = Vec::new();
                for rows in &per_seed_layers {
                    let (_, vals) = rows
                        .iter()
                        .find(|(s, _)| *s == step)
                        .expect("common step");
                    let n = vals.len() as f64;
                    let mean = vals.iter().sum::<f64>() / n;
                    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    means.push(mean);
                    vars.push(var);
                }
                writeln!(
                    f,
                    "{step},{:.6e},{:.6e}",
                    median(&mut means),
                    median(&mut vars)
                )?;
            }
        }
    }

    Ok(CompareOutcome {
        run_dir: compare_dir,
        lines,
        table,
    })
}

/// Convenience wrapper used by tests and the CLI to regenerate datasets for
/// an already-written run config.
pub fn load_run_config(dir: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&dir.join(CONFIG_FILE))
}

/// Re-generate the task datasets deterministically from a config.
pub fn rebuild_task(cfg: &ExperimentConfig) -> Result<(TaskDataset, TaskDataset)> {
    cfg.build_task()
}

/// What evaluation metric a task optimizes ("ppl" falls, "accuracy" rises).
pub fn metric_direction(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::CausalLm => "lower is better",
        TaskKind::Classification => "higher is better",
    }
}
