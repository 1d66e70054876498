//! Small end-to-end runs through the harness: stage artifacts, cost accounting,
//! frozen backbones, resume and reproducibility.

use std::path::Path;

use promptkd::class_vectors::{cache_file_len, load_cache, save_cache, ClassVectorTable};
use promptkd::evaluation::{parse_csv, Phase, CSV_HEADER};
use promptkd::harness::{run_pipeline, run_stages, Experiment, ExperimentConfig, RunManifest, Stage, StageStatus};
use promptkd::model::ParamTensor;

fn tiny(root: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    for (k, v) in [
        ("dataset.num_classes", "6"),
        ("dataset.images_per_class", "20"),
        ("dataset.test_per_class", "10"),
        ("pretrain.epochs", "2"),
        ("pretrain.images_per_class", "20"),
        ("stage1.epochs", "2"),
        ("stage2.epochs", "2"),
        ("run.seeds", "0,1"),
    ] {
        c.set(k, v).unwrap();
    }
    c.set("run.root", &root.display().to_string()).unwrap();
    c.validate().unwrap();
    c
}

fn statuses(m: &RunManifest) -> Vec<StageStatus> {
    m.records.iter().map(|r| r.status.clone()).collect()
}

fn status_of(m: &RunManifest, seed: u64, stage: Stage) -> StageStatus {
    m.records
        .iter()
        .find(|r| r.seed == seed && r.stage == stage)
        .unwrap()
        .status
        .clone()
}

fn backbone_tensors(m: &dyn Fn(&mut dyn FnMut(&str, &ParamTensor))) -> Vec<(String, Vec<u32>)> {
    let mut out = Vec::new();
    m(&mut |n, t| out.push((n.to_string(), t.data().iter().map(|x| x.to_bits()).collect())));
    out
}

#[test]
fn pipeline_produces_a_consistent_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let manifest = run_pipeline(&cfg, false).unwrap();
    assert_eq!(manifest.records.len(), 8);
    assert!(statuses(&manifest).iter().all(|s| *s == StageStatus::Done));
    assert!(manifest.run_dir.ends_with(&cfg.hash()[..16]));
    manifest.validate_artifacts().unwrap();

    let exp = Experiment::new(cfg.clone()).unwrap();
    let n = exp.data.class_names.len();
    let csv = std::fs::read_to_string(exp.run_dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
    let rows = parse_csv(&csv).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.text_forwards_stage2 == 0));

    for seed in [0, 1] {
        // Text forwards: N in the cache phase, none afterwards.
        let cache = exp.load_costs(seed, Stage::Cache).unwrap();
        assert_eq!(cache.get(Phase::Cache).text_forwards, n as u64);
        let stage2 = exp.load_costs(seed, Stage::Stage2).unwrap();
        assert_eq!(stage2.get(Phase::Stage2).text_forwards, 0);
        assert!(stage2.get(Phase::Stage2).image_forwards_teacher > 0);
        let eval = exp.load_costs(seed, Stage::Eval).unwrap();
        let inf = eval.get(Phase::Inference);
        assert_eq!(inf.text_forwards, 0);
        assert_eq!(inf.image_forwards_teacher, 0);
        assert!(inf.image_forwards_student > 0);
        assert!(exp.load_eval(seed).unwrap().cost_violations.is_empty());

        let table = exp.load_table(seed).unwrap();
        assert_eq!(table.num_classes(), n);
        assert!(table.row_norms().iter().all(|r| (r - 1.0).abs() < 1e-6));
        let len = std::fs::metadata(exp.seed_dir(seed).join("class_vectors.pkdw")).unwrap().len();
        assert_eq!(len as usize, cache_file_len(table.class_names(), table.dim()));

        // Stage II leaves both backbones bit-identical to the pretrained ones.
        let teacher_ref = exp.backbone(&cfg.teacher, &exp.teacher_config().unwrap()).unwrap();
        let teacher = exp.load_teacher(seed).unwrap();
        assert_eq!(
            backbone_tensors(&|f| teacher_ref.visit_backbone("", f)),
            backbone_tensors(&|f| teacher.visit_backbone("", f))
        );
        let student_ref = exp.backbone(&cfg.student, &exp.student_config().unwrap()).unwrap();
        let student = exp.load_student(seed).unwrap();
        assert_eq!(
            backbone_tensors(&|f| student_ref.visit_backbone("", f)),
            backbone_tensors(&|f| student.clip.visit_backbone("", f))
        );
    }
}

#[test]
fn resume_reuses_and_repairs_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let first = run_pipeline(&cfg, false).unwrap();
    let exp = Experiment::new(cfg.clone()).unwrap();
    let report = std::fs::read(exp.run_dir.join("report.csv")).unwrap();
    let teacher = std::fs::read(exp.seed_dir(0).join("teacher.pkdc")).unwrap();

    let again = run_pipeline(&cfg, true).unwrap();
    assert_eq!(again.records.len(), first.records.len());
    assert!(statuses(&again).iter().all(|s| *s == StageStatus::Resumed));
    assert_eq!(std::fs::read(exp.run_dir.join("report.csv")).unwrap(), report);

    // A truncated student checkpoint is retrained; Stage II never touches the teacher.
    let path = exp.seed_dir(1).join("student.pkdc");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let repaired = run_pipeline(&cfg, true).unwrap();
    let status = |seed, stage| status_of(&repaired, seed, stage);
    assert_eq!(status(1, Stage::Stage2), StageStatus::Done);
    assert_eq!(status(0, Stage::Stage2), StageStatus::Resumed);
    assert_eq!(std::fs::read(exp.seed_dir(0).join("teacher.pkdc")).unwrap(), teacher);
    assert_eq!(std::fs::read(exp.run_dir.join("report.csv")).unwrap(), report);
}

#[test]
fn fresh_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_pipeline(&tiny(a.path()), false).unwrap();
    let rb = run_pipeline(&tiny(b.path()), false).unwrap();
    for f in ["report.csv", "seed-0/student.pkdc", "seed-1/class_vectors.pkdw", "seed-0/stage2.log"] {
        assert_eq!(
            std::fs::read(ra.run_dir.join(f)).unwrap(),
            std::fs::read(rb.run_dir.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn corrupted_cache_fails_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.set("run.seeds", "0").unwrap();
    run_stages(&cfg, &[Stage::Stage1, Stage::Cache], false).unwrap();
    let exp = Experiment::new(cfg.clone()).unwrap();
    let path = exp.seed_dir(0).join("class_vectors.pkdw");
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_cache(&path).is_err());

    let m = run_stages(&cfg, &[Stage::Stage2, Stage::Eval], false).unwrap();
    assert!(matches!(status_of(&m, 0, Stage::Stage2), StageStatus::Failed(_)));
    assert!(matches!(status_of(&m, 0, Stage::Eval), StageStatus::Skipped(_)));
    assert!(m.record(0, Stage::Cache).is_none());
    assert!(m.any_failed());

    let reran = run_stages(&cfg, &[Stage::Cache], true).unwrap();
    assert_eq!(status_of(&reran, 0, Stage::Cache), StageStatus::Done);

    // A table whose fingerprint belongs to some other text encoder is refused
    // by Stage II and rebuilt by a resumed cache stage.
    let table = exp.load_table(0).unwrap();
    let foreign = ClassVectorTable::new(table.class_names().to_vec(), table.dim(), table.rows().to_vec(), [7u8; 32]).unwrap();
    save_cache(&foreign, &path).unwrap();
    let m = run_stages(&cfg, &[Stage::Stage2], false).unwrap();
    assert!(matches!(status_of(&m, 0, Stage::Stage2), StageStatus::Failed(_)));
    let m = run_stages(&cfg, &[Stage::Cache, Stage::Stage2], true).unwrap();
    assert_eq!(status_of(&m, 0, Stage::Cache), StageStatus::Done);
    assert_eq!(status_of(&m, 0, Stage::Stage2), StageStatus::Done);
    assert_eq!(exp.load_table(0).unwrap(), table);
}
