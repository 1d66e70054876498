//! The four stages over one run directory: Stage I teacher prompt learning,
//! class-vector caching, Stage II distillation, and evaluation.
//!
//! Layout under the run directory:
//!
//! ```text
//! config.txt  manifest.txt  report.csv  report.txt
//! seed-<s>/teacher.pkdc stage1.log stage1.costs
//!          class_vectors.pkdw cache.costs
//!          student.pkdc stage2.log stage2.costs baseline.txt
//!          eval.txt eval.costs
//! ```
//!
//! Pretrained backbones are pure functions of their settings and live in
//! `<root>/shared/`, reused by every run that asks for the same ones.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use super::config::{backbone_key, ExperimentConfig, TowerSpec};
use super::manifest::{validate_artifact, RunManifest, Stage, StageRecord, StageStatus};
use crate::class_vectors::{compute_class_vectors, load_cache, save_cache, text_fingerprint, validate_cache, ClassVectorTable};
use crate::codec::write_atomic;
use crate::data::{
    base_novel_split, few_shot_sample, generate_synthetic_dataset, unlabeled_pool, ClassSplit, Dataset, Image,
    UnlabeledPool, Vocabulary,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    agreement_between, cost_report, evaluate_base_to_novel, format_table, write_csv, CostCounter, EvalReport,
    ImageScorer, Phase, ReportRow, Scorer, TableMode,
};
use crate::model::{load_checkpoint, save_checkpoint, ClipConfig, ClipModel, Module, StudentModel};
use crate::training::distill::OwnText;
use crate::training::{distill_student, pretrain_backbone, pretrain_teacher, DistillOptions, TextBranch, TrainingLog};

pub const CONFIG_FILE: &str = "config.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Files each stage leaves in the seed directory.
pub fn stage_artifacts(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Stage1 => &["teacher.pkdc", "stage1.log", "stage1.costs"],
        Stage::Cache => &["class_vectors.pkdw", "cache.costs"],
        Stage::Stage2 => &["student.pkdc", "stage2.log", "stage2.costs", "baseline.txt"],
        Stage::Eval => &["eval.txt", "eval.costs"],
    }
}

/// Accuracy triple as stored in `baseline.txt` and `eval.txt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracies {
    pub base: f64,
    pub novel: f64,
    pub hm: f64,
}

impl From<&EvalReport> for Accuracies {
    fn from(r: &EvalReport) -> Self {
        Self {
            base: r.base_acc,
            novel: r.novel_acc,
            hm: r.hm,
        }
    }
}

/// Everything evaluation records for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub seed: u64,
    pub variant: String,
    pub table_mode: TableMode,
    pub student: Accuracies,
    pub teacher: Accuracies,
    /// The student before Stage II, scored the same way.
    pub untrained: Accuracies,
    pub agreement: f64,
    pub text_forwards_stage2: u64,
    pub cost_violations: Vec<String>,
}

impl EvalSummary {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "variant = {}", self.variant);
        let _ = writeln!(out, "table_mode = {}", self.table_mode);
        for (p, a) in [("student", &self.student), ("teacher", &self.teacher), ("untrained", &self.untrained)] {
            let _ = writeln!(out, "{p}.base_acc = {:?}", a.base);
            let _ = writeln!(out, "{p}.novel_acc = {:?}", a.novel);
            let _ = writeln!(out, "{p}.hm = {:?}", a.hm);
        }
        let _ = writeln!(out, "agreement = {:?}", self.agreement);
        let _ = writeln!(out, "text_forwards_stage2 = {}", self.text_forwards_stage2);
        for v in &self.cost_violations {
            let _ = writeln!(out, "cost_violation = {v}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        let mut violations = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Data(format!("eval summary: malformed line {line:?}")))?;
            if k == "cost_violation" {
                violations.push(v.to_string());
            } else {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Data(format!("eval summary: missing {k}")));
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Data(format!("eval summary: bad {k}")))
        };
        let acc = |p: &str| -> Result<Accuracies> {
            Ok(Accuracies {
                base: num(&format!("{p}.base_acc"))?,
                novel: num(&format!("{p}.novel_acc"))?,
                hm: num(&format!("{p}.hm"))?,
            })
        };
        Ok(Self {
            seed: get("seed")?.parse().map_err(|_| Error::Data("eval summary: bad seed".into()))?,
            variant: get("variant")?.clone(),
            table_mode: get("table_mode")?.parse()?,
            student: acc("student")?,
            teacher: acc("teacher")?,
            untrained: acc("untrained")?,
            agreement: num("agreement")?,
            text_forwards_stage2: get("text_forwards_stage2")?
                .parse()
                .map_err(|_| Error::Data("eval summary: bad text_forwards_stage2".into()))?,
            cost_violations: violations,
        })
    }

    pub fn row(&self) -> ReportRow {
        ReportRow {
            variant: self.variant.clone(),
            seed: self.seed,
            base_acc: self.student.base,
            novel_acc: self.student.novel,
            hm: self.student.hm,
            agreement: self.agreement,
            text_forwards_stage2: self.text_forwards_stage2,
        }
    }
}

fn accuracies_text(a: &Accuracies) -> String {
    format!("base_acc = {:?}\nnovel_acc = {:?}\nhm = {:?}\n", a.base, a.novel, a.hm)
}

fn parse_accuracies(text: &str) -> Result<Accuracies> {
    let mut vals = [None; 3];
    for line in text.lines() {
        let Some((k, v)) = line.split_once(" = ") else { continue };
        let slot = match k {
            "base_acc" => 0,
            "novel_acc" => 1,
            "hm" => 2,
            _ => continue,
        };
        vals[slot] = v.parse().ok();
    }
    match vals {
        [Some(base), Some(novel), Some(hm)] => Ok(Accuracies { base, novel, hm }),
        _ => Err(Error::Data("accuracy file is incomplete".into())),
    }
}

/// One configured experiment: data, vocabulary and run directory.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub run_dir: PathBuf,
    pub data: Dataset,
    pub split: ClassSplit,
    pub vocab: Vocabulary,
    pub template_ids: Vec<u32>,
}

impl Experiment {
    /// Validates the config, generates the data and writes `config.txt`.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = generate_synthetic_dataset(&config.dataset)?;
        let split = base_novel_split(&data.class_names)?;
        let vocab = Vocabulary::new(&config.template, &data.class_names);
        let template_ids = vocab.template_ids(&config.template)?;
        let run_dir = config.run_dir();
        write_text(&run_dir.join(CONFIG_FILE), &config.to_text())?;
        Ok(Self {
            config,
            run_dir,
            data,
            split,
            vocab,
            template_ids,
        })
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.run_dir.join(format!("seed-{seed}"))
    }

    fn artifact(&self, seed: u64, name: &str) -> PathBuf {
        self.seed_dir(seed).join(name)
    }

    fn shared_dir(&self) -> PathBuf {
        self.config.effective_root().join("shared")
    }

    pub fn teacher_config(&self) -> Result<ClipConfig> {
        self.config.teacher_clip(self.vocab.len())
    }

    pub fn student_config(&self) -> Result<ClipConfig> {
        self.config.student_clip(self.vocab.len())
    }

    /// A backbone aligned on the pretraining corpus, prompts not yet set.
    /// Loaded from the shared store when present, otherwise trained and stored.
    pub fn backbone(&self, tower: &TowerSpec, clip: &ClipConfig) -> Result<ClipModel> {
        let path = self
            .shared_dir()
            .join(format!("backbone-{}.pkdc", backbone_key(&self.config, tower)));
        let mut model = ClipModel::build(clip, &self.template_ids, self.config.pretrain.seed)?;
        if path.exists() {
            match load_checkpoint(&path).and_then(|t| model.load_named("", &t)) {
                Ok(()) => return Ok(model),
                Err(e) => log::warn!("ignoring unreadable backbone {}: {e}", path.display()),
            }
        }
        log::info!("pretraining backbone {}", path.display());
        let corpus = self.config.pretrain.corpus(&self.data.prototypes);
        pretrain_backbone(
            &mut model,
            &corpus,
            &self.data.class_names,
            &self.vocab,
            &self.config.template,
            &self.config.pretrain,
        )?;
        save_checkpoint(&path, &model.named_tensors(""))?;
        Ok(model)
    }

    fn fresh_teacher(&self) -> Result<ClipModel> {
        ClipModel::build(&self.teacher_config()?, &self.template_ids, self.config.pretrain.seed)
    }

    fn fresh_student(&self, seed: u64) -> Result<StudentModel> {
        let clip = ClipModel::build(&self.student_config()?, &self.template_ids, self.config.pretrain.seed)?;
        StudentModel::new(clip, self.config.teacher.output_dim, self.config.distill.projector_layers, seed)
    }

    /// The Stage I teacher for `seed`, from its checkpoint.
    pub fn load_teacher(&self, seed: u64) -> Result<ClipModel> {
        let mut t = self.fresh_teacher()?;
        t.load_named("", &load_checkpoint(&self.artifact(seed, "teacher.pkdc"))?)?;
        Ok(t)
    }

    pub fn load_student(&self, seed: u64) -> Result<StudentModel> {
        let mut s = self.fresh_student(seed)?;
        s.load_named("", &load_checkpoint(&self.artifact(seed, "student.pkdc"))?)?;
        Ok(s)
    }

    pub fn load_table(&self, seed: u64) -> Result<ClassVectorTable> {
        load_cache(&self.artifact(seed, "class_vectors.pkdw"))
    }

    pub fn load_costs(&self, seed: u64, stage: Stage) -> Result<CostCounter> {
        CostCounter::parse(&read_text(&self.artifact(seed, &format!("{}.costs", stage.name())))?)
    }

    pub fn load_eval(&self, seed: u64) -> Result<EvalSummary> {
        EvalSummary::parse(&read_text(&self.artifact(seed, "eval.txt"))?)
    }

    pub fn load_baseline(&self, seed: u64) -> Result<Accuracies> {
        parse_accuracies(&read_text(&self.artifact(seed, "baseline.txt"))?)
    }

    /// Stage II mean loss per epoch, from `stage2.log`.
    pub fn stage2_epoch_losses(&self, seed: u64) -> Result<Vec<f64>> {
        TrainingLog::parse_epoch_losses(&read_text(&self.artifact(seed, "stage2.log"))?)
    }

    pub fn pool(&self) -> UnlabeledPool {
        unlabeled_pool(
            &self.data.train,
            self.config.stage2.pool_scope,
            &self.split,
            self.config.stage2.per_class_cap.0,
        )
    }

    fn relevant_entries(&self, sections: &[&str]) -> Vec<(String, String)> {
        self.config
            .entries()
            .into_iter()
            .filter(|(k, _)| sections.iter().any(|s| k.starts_with(&format!("{s}."))))
            .collect()
    }

    /// Stage I memo directory for `seed`, keyed by every setting that shapes it.
    fn stage1_memo(&self, seed: u64) -> PathBuf {
        let mut h = Sha256::new();
        for (k, v) in self.relevant_entries(STAGE1_SECTIONS) {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        let key = &hex::encode(h.finalize())[..16];
        self.shared_dir().join(format!("stage1-{key}")).join(format!("seed-{seed}"))
    }

    fn stage_valid(&self, seed: u64, stage: Stage) -> bool {
        let files_ok = stage_artifacts(stage)
            .iter()
            .all(|f| validate_artifact(&self.artifact(seed, f)).is_ok());
        if !files_ok {
            return false;
        }
        match stage {
            Stage::Cache => match (self.load_teacher(seed), self.load_table(seed)) {
                (Ok(t), Ok(table)) => &text_fingerprint(&t.text, Some(&t.text_prompts)) == table.fingerprint(),
                _ => false,
            },
            _ => true,
        }
    }

    /// Runs one stage for one seed. With `resume`, valid artifacts from an
    /// earlier invocation are reused instead.
    pub fn run_stage(&self, seed: u64, stage: Stage, resume: bool) -> Result<StageStatus> {
        if resume && self.stage_valid(seed, stage) {
            log::info!("seed {seed}: {} resumed from artifacts", stage.name());
            return Ok(StageStatus::Resumed);
        }
        if resume && stage == Stage::Stage1 && self.copy_stage1_memo(seed)? {
            log::info!("seed {seed}: stage1 reused from the shared store");
            return Ok(StageStatus::Resumed);
        }
        log::info!("seed {seed}: running {}", stage.name());
        match stage {
            Stage::Stage1 => self.stage1(seed)?,
            Stage::Cache => self.cache(seed)?,
            Stage::Stage2 => self.stage2(seed)?,
            Stage::Eval => self.eval(seed)?,
        }
        Ok(StageStatus::Done)
    }

    fn copy_stage1_memo(&self, seed: u64) -> Result<bool> {
        let memo = self.stage1_memo(seed);
        let files = stage_artifacts(Stage::Stage1);
        if !files.iter().all(|f| validate_artifact(&memo.join(f)).is_ok()) {
            return Ok(false);
        }
        for f in files {
            let bytes = std::fs::read(memo.join(f)).map_err(|e| Error::io(memo.join(f), e))?;
            write_atomic(&self.artifact(seed, f), &bytes)?;
        }
        Ok(true)
    }

    fn stage1(&self, seed: u64) -> Result<()> {
        let mut teacher = self.backbone(&self.config.teacher, &self.teacher_config()?)?;
        teacher.reset_prompts(&self.template_ids, seed)?;
        let few = few_shot_sample(&self.data.train, self.config.stage1.shots, &self.split.base, seed)?;
        let mut counter = CostCounter::new();
        let mut log = pretrain_teacher(
            &mut teacher,
            &few,
            &self.split.base,
            &self.data.class_names,
            &self.vocab,
            &self.config.template,
            &self.config.stage1_train(seed),
            None,
            &mut counter,
        )?;
        log.config = self.relevant_entries(STAGE1_SECTIONS);
        log.seeds = vec![("run".into(), seed)];
        let texts = [
            (
                "teacher.pkdc",
                crate::model::encode_checkpoint(&teacher.named_tensors("")),
            ),
            ("stage1.log", log.export().into_bytes()),
            ("stage1.costs", counter.to_text().into_bytes()),
        ];
        let memo = self.stage1_memo(seed);
        for (name, bytes) in &texts {
            write_atomic(&self.artifact(seed, name), bytes)?;
            write_atomic(&memo.join(name), bytes)?;
        }
        Ok(())
    }

    fn cache(&self, seed: u64) -> Result<()> {
        let teacher = self.load_teacher(seed)?;
        let mut counter = CostCounter::new();
        let table = compute_class_vectors(
            &teacher.text,
            Some(&teacher.text_prompts),
            &self.data.class_names,
            &self.vocab,
            &self.config.template,
            &mut counter,
        )?;
        save_cache(&table, &self.artifact(seed, "class_vectors.pkdw"))?;
        write_text(&self.artifact(seed, "cache.costs"), &counter.to_text())
    }

    fn own_text(&self) -> bool {
        self.config.distill.variant.text_branch == TextBranch::OwnTextEncoder
    }

    /// The student's own class vectors, counted as inference-time text work.
    fn own_table(&self, student: &StudentModel, counter: &mut CostCounter) -> Result<ClassVectorTable> {
        let mut scratch = CostCounter::new();
        let t = compute_class_vectors(
            &student.clip.text,
            Some(&student.clip.text_prompts),
            &self.data.class_names,
            &self.vocab,
            &self.config.template,
            &mut scratch,
        )?;
        counter.texts(Phase::Inference, self.data.class_names.len());
        Ok(t)
    }

    /// Scores the student on the test set the way the deployed variant would.
    fn evaluate_student(
        &self,
        student: &StudentModel,
        table: &ClassVectorTable,
        counter: &mut CostCounter,
        seed: u64,
    ) -> Result<(EvalReport, Option<ClassVectorTable>)> {
        let own = if self.own_text() {
            Some(self.own_table(student, counter)?)
        } else {
            None
        };
        let mut scorer = match own {
            Some(_) => ImageScorer::student_native(student, counter, Phase::Inference),
            None => ImageScorer::student(student, counter, Phase::Inference),
        };
        let report = evaluate_base_to_novel(
            &mut scorer,
            own.as_ref().unwrap_or(table),
            &self.data.test,
            &self.split,
            &self.data.class_names,
            self.config.table_mode,
            seed,
        )?;
        Ok((report, own))
    }

    fn stage2(&self, seed: u64) -> Result<()> {
        let teacher = self.load_teacher(seed)?;
        let table = self.load_table(seed)?;
        validate_cache(&table, &self.data.class_names, None).into_result()?;
        let mut clip = self.backbone(&self.config.student, &self.student_config()?)?;
        clip.reset_prompts(&self.template_ids, seed)?;
        let mut student = StudentModel::new(
            clip,
            self.config.teacher.output_dim,
            self.config.distill.projector_layers,
            seed,
        )?;

        let (baseline, _) = self.evaluate_student(&student, &table, &mut CostCounter::new(), seed)?;
        write_text(&self.artifact(seed, "baseline.txt"), &accuracies_text(&(&baseline).into()))?;

        let options = DistillOptions {
            allow_fingerprint_mismatch: self.config.distill.allow_fingerprint_mismatch,
            own_text: self.own_text().then(|| OwnText {
                vocab: self.vocab.clone(),
                template: self.config.template.clone(),
            }),
        };
        let mut counter = CostCounter::new();
        let mut log = distill_student(
            &teacher,
            &mut student,
            &table,
            &self.pool(),
            &self.config.stage2_train(seed),
            &self.config.distill.variant,
            &options,
            &mut counter,
        )?;
        log.config = self.config.entries().into_iter().filter(|(k, _)| k != "run.root").collect();
        log.seeds = vec![("run".into(), seed)];
        save_checkpoint(&self.artifact(seed, "student.pkdc"), &student.named_tensors(""))?;
        write_text(&self.artifact(seed, "stage2.log"), &log.export())?;
        write_text(&self.artifact(seed, "stage2.costs"), &counter.to_text())
    }

    fn eval(&self, seed: u64) -> Result<()> {
        let teacher = self.load_teacher(seed)?;
        let student = self.load_student(seed)?;
        let table = self.load_table(seed)?;
        let untrained = self.load_baseline(seed)?;

        let mut counter = CostCounter::new();
        let (report, own) = self.evaluate_student(&student, &table, &mut counter, seed)?;

        let mut scratch = CostCounter::new();
        let teacher_report = evaluate_base_to_novel(
            &mut ImageScorer::teacher(&teacher, &mut scratch, Phase::Inference),
            &table,
            &self.data.test,
            &self.split,
            &self.data.class_names,
            self.config.table_mode,
            seed,
        )?;
        let images: Vec<&Image> = self.data.test.iter().map(|s| &s.image).collect();
        let mut scratch_t = CostCounter::new();
        let mut teacher_scorer = ImageScorer::teacher(&teacher, &mut scratch_t, Phase::Inference);
        let agreement = match &own {
            Some(own_table) => {
                let mut s: Box<dyn Scorer> =
                    Box::new(ImageScorer::student_native(&student, &mut scratch, Phase::Inference));
                agreement_between(s.as_mut(), own_table, &mut teacher_scorer, &table, &images)?
            }
            None => {
                let mut s = ImageScorer::student(&student, &mut scratch, Phase::Inference);
                agreement_between(&mut s, &table, &mut teacher_scorer, &table, &images)?
            }
        };

        let mut total = CostCounter::new();
        for stage in [Stage::Stage1, Stage::Cache, Stage::Stage2] {
            total.merge(&self.load_costs(seed, stage)?);
        }
        let text_forwards_stage2 = total.get(Phase::Stage2).text_forwards;
        total.merge(&counter);
        let costs = cost_report(&total, self.data.num_classes());
        for v in &costs.violations {
            log::warn!("seed {seed}: {v}");
        }
        let summary = EvalSummary {
            seed,
            variant: self.config.distill.variant.label(),
            table_mode: self.config.table_mode,
            student: (&report).into(),
            teacher: (&teacher_report).into(),
            untrained,
            agreement,
            text_forwards_stage2,
            cost_violations: costs.violations,
        };
        write_text(&self.artifact(seed, "eval.costs"), &counter.to_text())?;
        write_text(&self.artifact(seed, "eval.txt"), &summary.to_text())
    }

    /// Writes `report.csv` and `report.txt` from every seed's evaluation.
    pub fn write_report(&self) -> Result<Vec<PathBuf>> {
        let mut rows = Vec::new();
        let mut costs_text = String::new();
        for &seed in &self.config.seeds {
            let s = self.load_eval(seed)?;
            rows.push(s.row());
            let mut total = CostCounter::new();
            for stage in Stage::ALL {
                total.merge(&self.load_costs(seed, stage)?);
            }
            let _ = writeln!(costs_text, "\nforward passes, seed {seed}:");
            costs_text.push_str(&cost_report(&total, self.data.num_classes()).to_string());
            let _ = writeln!(
                costs_text,
                "teacher: base {:.2} novel {:.2} hm {:.2}; untrained student: base {:.2} novel {:.2} hm {:.2}",
                100.0 * s.teacher.base,
                100.0 * s.teacher.novel,
                100.0 * s.teacher.hm,
                100.0 * s.untrained.base,
                100.0 * s.untrained.novel,
                100.0 * s.untrained.hm
            );
        }
        let scoring = scoring_note(self.config.table_mode);
        let mut txt = format_table(&rows, scoring);
        txt.push_str(&costs_text);
        txt.push_str("\nconfig:\n");
        txt.push_str(&self.config.to_text());
        write_text(&self.run_dir.join(REPORT_CSV), &write_csv(&rows))?;
        write_text(&self.run_dir.join(REPORT_TXT), &txt)?;
        Ok(vec![PathBuf::from(REPORT_CSV), PathBuf::from(REPORT_TXT)])
    }

    pub fn read_report(&self) -> Result<String> {
        read_text(&self.run_dir.join(REPORT_CSV))
    }
}

const STAGE1_SECTIONS: &[&str] = &["dataset", "model", "teacher", "prompts", "pretrain", "stage1"];

pub fn scoring_note(mode: TableMode) -> &'static str {
    match mode {
        TableMode::Full => "full (every test image ranked against all classes)",
        TableMode::Split => "split (base images against base classes, novel against novel)",
    }
}

/// Runs `stages` for every configured seed, in order, recording each outcome.
///
/// A failing stage is recorded with its cause and the seed's later stages
/// are skipped. When evaluation succeeded for every seed the report is
/// written. Only setup problems (invalid config, unwritable run directory)
/// are returned as errors.
pub fn run_stages(config: &ExperimentConfig, stages: &[Stage], resume: bool) -> Result<RunManifest> {
    let exp = Experiment::new(config.clone())?;
    run_stages_in(&exp, stages, resume)
}

pub fn run_stages_in(exp: &Experiment, stages: &[Stage], resume: bool) -> Result<RunManifest> {
    let mut manifest = match RunManifest::load(&exp.run_dir) {
        Ok(Some(m)) if m.config_hash == exp.config.hash() => m,
        _ => RunManifest::new(exp.config.hash(), exp.run_dir.clone()),
    };
    manifest.run_dir = exp.run_dir.clone();
    // Records from earlier invocations whose files have since gone bad no longer hold.
    let run_dir = exp.run_dir.clone();
    manifest.records.retain(|r| {
        !r.status.succeeded() || r.artifacts.iter().all(|a| validate_artifact(&run_dir.join(a)).is_ok())
    });
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    for &seed in &exp.config.seeds {
        let mut blocked: Option<String> = None;
        for &stage in &stages {
            let started = now();
            let status = match &blocked {
                Some(cause) => StageStatus::Skipped(cause.clone()),
                None => match exp.run_stage(seed, stage, resume) {
                    Ok(s) => s,
                    Err(e) => {
                        log::error!("seed {seed}: {} failed: {e}", stage.name());
                        blocked = Some(format!("{} failed", stage.name()));
                        StageStatus::Failed(e.to_string())
                    }
                },
            };
            let artifacts = if status.succeeded() {
                stage_artifacts(stage)
                    .iter()
                    .map(|f| PathBuf::from(format!("seed-{seed}")).join(f))
                    .collect()
            } else {
                Vec::new()
            };
            manifest.upsert(StageRecord {
                seed,
                stage,
                status,
                started,
                finished: now(),
                artifacts,
            });
        }
    }
    manifest.sort(&exp.config.seeds);
    let all_evaluated = exp
        .config
        .seeds
        .iter()
        .all(|&s| manifest.record(s, Stage::Eval).is_some_and(|r| r.status.succeeded()));
    manifest.reports.clear();
    if stages.contains(&Stage::Eval) && all_evaluated {
        manifest.reports = exp.write_report()?;
    }
    manifest.write()?;
    Ok(manifest)
}

/// All four stages for every seed.
pub fn run_pipeline(config: &ExperimentConfig, resume: bool) -> Result<RunManifest> {
    run_stages(config, &Stage::ALL, resume)
}
