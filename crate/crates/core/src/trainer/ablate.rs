//! Ablation grids over knowledge types, GI-type filters and K.
//!
//! Every grid first trains one baseline student, then runs one distillation
//! per cell with the same seed. A failing cell is recorded and the grid
//! carries on.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::detector::{Checkpoint, DetectorConfig};
use crate::error::{GidError, Result};
use crate::gism::GiType;

use super::run::{run_distill, run_train, DatasetRef, RunKind, CHECKPOINT_FILE};
use super::{DistillConfig, Knowledge, StepLog, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Knowledge,
    GiTypes,
    TopK,
}

impl GridKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "knowledge" => Some(GridKind::Knowledge),
            "gi-types" | "gi_types" => Some(GridKind::GiTypes),
            "top-k" | "top_k" | "k" => Some(GridKind::TopK),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GridKind::Knowledge => "knowledge",
            GridKind::GiTypes => "gi-types",
            GridKind::TopK => "top-k",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub distill: DistillConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub kind: GridKind,
    pub cells: Vec<AblationCell>,
}

pub const TOP_K_VALUES: [usize; 4] = [0, 5, 10, 40];

impl AblationGrid {
    pub fn new(kind: GridKind, base: &DistillConfig) -> Self {
        let with = |label: String, f: &dyn Fn(&mut DistillConfig)| {
            let mut d = base.clone();
            f(&mut d);
            AblationCell { label, distill: d }
        };
        let cells = match kind {
            GridKind::Knowledge => [
                (false, false, false),
                (true, false, false),
                (false, true, false),
                (false, false, true),
                (true, false, true),
                (true, true, true),
            ]
            .iter()
            .map(|&(feature, relation, response)| {
                let k = Knowledge {
                    feature,
                    relation,
                    response,
                };
                with(k.label(), &|d| d.knowledge = k)
            })
            .collect(),
            GridKind::GiTypes => {
                let combos: [&[GiType]; 7] = [
                    &[GiType::Pos],
                    &[GiType::SemiPos],
                    &[GiType::Neg],
                    &[GiType::Pos, GiType::SemiPos],
                    &[GiType::Pos, GiType::Neg],
                    &[GiType::SemiPos, GiType::Neg],
                    &[GiType::Pos, GiType::SemiPos, GiType::Neg],
                ];
                combos
                    .iter()
                    .map(|types| {
                        let label = types.iter().map(|t| t.name()).collect::<Vec<_>>().join("+");
                        with(label, &|d| d.gi_types = Some(types.to_vec()))
                    })
                    .chain(std::iter::once(with("unfiltered".into(), &|d| d.gi_types = None)))
                    .collect()
            }
            GridKind::TopK => TOP_K_VALUES
                .iter()
                .map(|&k| with(format!("k={k}"), &|d| d.k = k))
                .collect(),
        };
        Self { kind, cells }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub error: Option<String>,
    /// For cells that reduce to the baseline: whether the final weights are
    /// bit-identical to it.
    pub matches_baseline: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: GridKind,
    pub seed: u64,
    pub baseline_map: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("ablation.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| GidError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("ablation.json");
        let text = std::fs::read_to_string(&path).map_err(|e| GidError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| GidError::Parse {
            path,
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn all_completed(&self) -> bool {
        self.rows.iter().all(|r| r.error.is_none())
    }
}

fn weights_equal(a: &Path, b: &Path) -> Result<bool> {
    let (a, b) = (Checkpoint::load(a)?, Checkpoint::load(b)?);
    let student = |c: &Checkpoint| {
        c.tensors
            .iter()
            .filter(|t| !t.0.starts_with(super::run::ADAPTATION_PREFIX))
            .cloned()
            .collect::<Vec<_>>()
    };
    Ok(student(&a) == student(&b))
}

/// Runs the baseline and every cell of `kind` under `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    kind: GridKind,
    teacher_path: &Path,
    student: &DetectorConfig,
    cfg: &TrainConfig,
    base: &DistillConfig,
    data: &Dataset,
    dataset: DatasetRef,
    out_dir: &Path,
    progress: &mut dyn FnMut(&str, &StepLog),
) -> Result<AblationTable> {
    let grid = AblationGrid::new(kind, base);
    let baseline_dir = out_dir.join("baseline");
    let baseline = run_train(
        RunKind::Baseline,
        student,
        cfg,
        data,
        dataset.clone(),
        &baseline_dir,
        &mut |l| progress("baseline", l),
    )?;
    let baseline_map = baseline.manifest.final_map().unwrap_or(0.0);
    let mut rows = Vec::with_capacity(grid.cells.len());
    for cell in &grid.cells {
        let dir = out_dir.join("cells").join(cell.label.replace(['+', '='], "_"));
        let res = run_distill(
            teacher_path,
            student,
            cfg,
            &cell.distill,
            data,
            dataset.clone(),
            &dir,
            &mut |l| progress(&cell.label, l),
        );
        let row = match res {
            Ok(out) => {
                let matches_baseline = if cell.distill.active() {
                    None
                } else {
                    Some(weights_equal(&dir.join(CHECKPOINT_FILE), &baseline_dir.join(CHECKPOINT_FILE))?)
                };
                AblationRow {
                    label: cell.label.clone(),
                    seed: cfg.seed,
                    map: out.manifest.final_map(),
                    ap50: out.manifest.final_eval.as_ref().map(|e| e.ap50),
                    error: None,
                    matches_baseline,
                }
            }
            Err(e) => AblationRow {
                label: cell.label.clone(),
                seed: cfg.seed,
                map: None,
                ap50: None,
                error: Some(e.to_string()),
                matches_baseline: None,
            },
        };
        rows.push(row);
    }
    let table = AblationTable {
        kind,
        seed: cfg.seed,
        baseline_map,
        rows,
    };
    table.save(out_dir)?;
    Ok(table)
}
