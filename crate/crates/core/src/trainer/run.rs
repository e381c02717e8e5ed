//! Runs that leave artifacts on disk: a checkpoint, a manifest, per-step
//! losses, validation results and (for distillation) the GI trace.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Split};
use crate::detector::{Checkpoint, Detector, DetectorConfig};
use crate::error::{GidError, Result};
use crate::evaluation::{coco_map, ground_truth, write_results, EvalReport};

use super::{predict, train, write_jsonl, DistillConfig, LossBreakdown, StepLog, TrainConfig, TrainOutcome};

pub const CHECKPOINT_FILE: &str = "checkpoint.gid";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSSES_FILE: &str = "losses.jsonl";
pub const RESULTS_FILE: &str = "results_val.jsonl";
pub const ADAPTATION_PREFIX: &str = "adaptation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Teacher,
    Baseline,
    Distill,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: String,
    pub checksum: String,
    pub seed: u64,
}

impl DatasetRef {
    pub fn new(path: &Path, data: &Dataset) -> Self {
        Self {
            path: path.display().to_string(),
            checksum: data.checksum(),
            seed: data.spec.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
}

impl EvalPoint {
    fn new(step: usize, r: &EvalReport) -> Self {
        Self {
            step,
            map: r.map,
            ap50: r.ap50,
            ap75: r.ap75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRef {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a command, plus its headline results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: RunKind,
    pub tool_version: String,
    pub detector: DetectorConfig,
    pub train: Option<TrainConfig>,
    pub distill: Option<DistillConfig>,
    pub teacher: Option<TeacherRef>,
    pub dataset: DatasetRef,
    pub split: Split,
    /// Model initialisation seed and data-order seed.
    pub init_seed: u64,
    pub data_seed: u64,
    pub evals: Vec<EvalPoint>,
    pub final_eval: Option<EvalReport>,
    pub final_loss: Option<LossBreakdown>,
    pub notes: Vec<String>,
    /// Wall-clock time; the only field that varies between reruns.
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GidError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| GidError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| GidError::io(path, e))
    }

    pub fn final_map(&self) -> Option<f64> {
        self.final_eval.as_ref().map(|e| e.map)
    }
}

pub struct RunOutput {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub outcome: TrainOutcome,
}

pub fn teacher_checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| GidError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GidError::io(dir, e))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    kind: RunKind,
    dir: &Path,
    outcome: TrainOutcome,
    cfg: &TrainConfig,
    distill: Option<&DistillConfig>,
    teacher: Option<TeacherRef>,
    dataset: DatasetRef,
    started: Instant,
) -> Result<RunOutput> {
    let meta = serde_json::json!({
        "kind": kind,
        "seed": cfg.seed,
        "steps": cfg.steps,
        "final_map": outcome.final_eval.as_ref().map(|e| e.map),
    });
    let mut ck = Checkpoint::from_detector(&outcome.model, meta);
    if let Some(a) = &outcome.adaptation {
        ck.add_params(a, ADAPTATION_PREFIX);
    }
    ck.save(&dir.join(CHECKPOINT_FILE))?;
    write_jsonl(&dir.join(LOSSES_FILE), &outcome.history)?;
    write_results(&dir.join(RESULTS_FILE), &outcome.final_results)?;
    if let Some(trace) = &outcome.trace {
        trace.save(dir)?;
    }
    let mut notes = vec![
        "losses.jsonl holds one LossBreakdown per step; total = task + lambda1*feature + lambda2*relation + lambda3*response".to_string(),
    ];
    if outcome.adaptation.is_some() {
        notes.push("adaptation layer parameters are included in weight decay".into());
    }
    let manifest = RunManifest {
        kind,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        detector: outcome.model.config.clone(),
        train: Some(cfg.clone()),
        distill: distill.cloned(),
        teacher,
        dataset,
        split: Split::Val,
        init_seed: cfg.seed,
        data_seed: cfg.seed,
        evals: outcome
            .evals
            .iter()
            .map(|(s, r)| EvalPoint::new(*s, r))
            .chain(outcome.final_eval.as_ref().map(|r| EvalPoint::new(cfg.steps, r)))
            .collect(),
        final_eval: outcome.final_eval.clone(),
        final_loss: outcome.history.last().map(|l| l.losses),
        notes,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        manifest,
        outcome,
    })
}

/// Teacher or baseline training with the task loss only.
pub fn run_train(
    kind: RunKind,
    detector: &DetectorConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    dataset: DatasetRef,
    out_dir: &Path,
    progress: &mut dyn FnMut(&StepLog),
) -> Result<RunOutput> {
    if !matches!(kind, RunKind::Teacher | RunKind::Baseline) {
        return Err(GidError::contract("run_train handles teacher and baseline runs"));
    }
    let started = Instant::now();
    prepare_dir(out_dir)?;
    let model = Detector::<f32>::new(detector.clone(), cfg.seed)?;
    let outcome = train(model, None, data, cfg, None, progress)?;
    finish(kind, out_dir, outcome, cfg, None, None, dataset, started)
}

/// Distils a student from the teacher checkpoint at `teacher_path`.
#[allow(clippy::too_many_arguments)]
pub fn run_distill(
    teacher_path: &Path,
    student: &DetectorConfig,
    cfg: &TrainConfig,
    distill: &DistillConfig,
    data: &Dataset,
    dataset: DatasetRef,
    out_dir: &Path,
    progress: &mut dyn FnMut(&StepLog),
) -> Result<RunOutput> {
    let started = Instant::now();
    let teacher_ck = Checkpoint::load(teacher_path)?;
    let teacher = teacher_ck.to_detector::<f32>()?;
    teacher.config.check_head_compatible(student)?;
    let teacher_ref = TeacherRef {
        path: teacher_path.display().to_string(),
        sha256: teacher_checksum(teacher_path)?,
    };
    prepare_dir(out_dir)?;
    let model = Detector::<f32>::new(student.clone(), cfg.seed)?;
    let outcome = train(model, Some(&teacher), data, cfg, Some(distill), progress)?;
    finish(RunKind::Distill, out_dir, outcome, cfg, Some(distill), Some(teacher_ref), dataset, started)
}

/// Scores a checkpoint on one split and writes its results file.
pub fn run_eval(checkpoint: &Path, data: &Dataset, split: Split, dataset: DatasetRef, out_dir: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let ck = Checkpoint::load(checkpoint)?;
    let det = ck.to_detector::<f32>()?;
    if det.config.num_classes != data.spec.num_classes {
        return Err(GidError::contract(format!(
            "checkpoint predicts {} classes, dataset has {}",
            det.config.num_classes, data.spec.num_classes
        )));
    }
    prepare_dir(out_dir)?;
    let cfg = TrainConfig::default();
    let samples = data.split(split);
    let results = predict(&det, samples, 16, &cfg)?;
    let report = coco_map(&results, &ground_truth(samples), det.config.num_classes)?;
    write_results(&out_dir.join(RESULTS_FILE), &results)?;
    let manifest = RunManifest {
        kind: RunKind::Eval,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        detector: det.config.clone(),
        train: None,
        distill: None,
        teacher: None,
        dataset,
        split,
        init_seed: 0,
        data_seed: 0,
        evals: vec![EvalPoint::new(0, &report)],
        final_eval: Some(report),
        final_loss: None,
        notes: vec![format!("checkpoint {}", checkpoint.display())],
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
