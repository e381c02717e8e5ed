use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GidError, Result};
use crate::gism::{GeneralInstance, GiRecord, GiType};

/// Weight on the previous smoothed value.
pub const TRACE_SMOOTHING: f64 = 0.9;
/// Weight on the new sample. Kept as its own literal since `1.0 - 0.9` is not
/// exactly `0.1` in binary.
pub const TRACE_NEW_WEIGHT: f64 = 0.1;

/// GI counts for one training step, indexed like [`GiType::ALL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub per_image: Vec<[usize; 4]>,
    /// Mean per-image count.
    pub mean: [f64; 4],
    /// `s_t = 0.9 s_(t-1) + 0.1 x_t` on `mean`, starting from `s_0 = x_0`.
    pub smoothed: [f64; 4],
}

/// GI scores of every head location for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub step: usize,
    pub image_id: u64,
    pub level_sizes: Vec<usize>,
    pub anchors_per_location: usize,
    pub scores: Vec<f64>,
}

impl Heatmap {
    /// Per-level `[size x size]` grids, max-pooled over anchors.
    pub fn level_grids(&self) -> Vec<Vec<f64>> {
        let a = self.anchors_per_location.max(1);
        let mut offset = 0;
        self.level_sizes
            .iter()
            .map(|&s| {
                let grid = (0..s * s)
                    .map(|p| {
                        self.scores[offset + p * a..offset + (p + 1) * a]
                            .iter()
                            .copied()
                            .fold(0.0, f64::max)
                    })
                    .collect();
                offset += s * s * a;
                grid
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GiTrace {
    pub k: usize,
    pub steps: Vec<TraceStep>,
    pub heatmaps: Vec<Heatmap>,
    /// Selected GIs on the steps where heatmaps were taken.
    pub records: Vec<GiRecord>,
}

pub fn type_counts(gis: &[GeneralInstance]) -> [usize; 4] {
    let mut c = [0; 4];
    for gi in gis {
        let t = gi.gi_type.unwrap_or(GiType::Ignore);
        c[GiType::ALL.iter().position(|x| *x == t).unwrap()] += 1;
    }
    c
}

impl GiTrace {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    pub fn push(&mut self, step: usize, per_image: Vec<[usize; 4]>) {
        let n = per_image.len().max(1) as f64;
        let mut mean = [0.0; 4];
        for counts in &per_image {
            for t in 0..4 {
                mean[t] += counts[t] as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let smoothed = match self.steps.last() {
            None => mean,
            Some(prev) => [0, 1, 2, 3].map(|t| TRACE_SMOOTHING * prev.smoothed[t] + TRACE_NEW_WEIGHT * mean[t]),
        };
        self.steps.push(TraceStep {
            step,
            per_image,
            mean,
            smoothed,
        });
    }

    /// Largest per-image GI total over all logged steps.
    pub fn max_per_image(&self) -> usize {
        self.steps
            .iter()
            .flat_map(|s| s.per_image.iter().map(|c| c.iter().sum::<usize>()))
            .max()
            .unwrap_or(0)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| GidError::io(dir, e))?;
        write_jsonl(&dir.join("gi_trace.jsonl"), &self.steps)?;
        write_jsonl(&dir.join("gi_heatmaps.jsonl"), &self.heatmaps)?;
        write_jsonl(&dir.join("gi_records.jsonl"), &self.records)?;
        let meta = serde_json::json!({ "k": self.k, "smoothing": TRACE_SMOOTHING });
        let path = dir.join("gi_trace_meta.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| GidError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("gi_trace_meta.json");
        let text = std::fs::read_to_string(&path).map_err(|e| GidError::io(&path, e))?;
        let meta: serde_json::Value = serde_json::from_str(&text).map_err(|e| GidError::Parse {
            path: path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Ok(Self {
            k: meta["k"].as_u64().unwrap_or(0) as usize,
            steps: read_jsonl(&dir.join("gi_trace.jsonl"))?,
            heatmaps: read_jsonl(&dir.join("gi_heatmaps.jsonl"))?,
            records: read_jsonl(&dir.join("gi_records.jsonl"))?,
        })
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| GidError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| GidError::io(path, e))?;
    }
    w.flush().map_err(|e| GidError::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| GidError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| GidError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| GidError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
