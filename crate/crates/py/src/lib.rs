//! Python bindings: geometry, GI selection, the relation loss, dataset
//! generation, evaluation and the full command line.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use gid_core::data::{generate, Dataset, DatasetSpec, Split};
use gid_core::evaluation::{coco_map, ground_truth, read_results};
use gid_core::feature_distill::PooledFeature;
use gid_core::geometry::BoundingBox;
use gid_core::gism::{GiSource, PredictionBatch};
use gid_core::GidError;

fn to_py(e: GidError) -> PyErr {
    match e {
        GidError::Contract(_) | GidError::Config { .. } => PyValueError::new_err(e.to_string()),
        GidError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn bbox(b: [f64; 4]) -> PyResult<BoundingBox> {
    BoundingBox::try_new(b[0], b[1], b[2], b[3]).map_err(to_py)
}

fn batch(scores: Vec<Vec<f64>>, boxes: Vec<[f64; 4]>) -> PyResult<PredictionBatch> {
    let c = scores.first().map_or(1, Vec::len);
    if scores.iter().any(|r| r.len() != c) {
        return Err(PyValueError::new_err("score rows differ in length"));
    }
    let boxes = boxes.into_iter().map(bbox).collect::<PyResult<Vec<_>>>()?;
    PredictionBatch::new(scores.concat(), boxes, c).map_err(to_py)
}

/// IoU of two `[x1, y1, x2, y2]` boxes.
#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    Ok(gid_core::geometry::iou(&bbox(a)?, &bbox(b)?))
}

/// Kept indices after greedy NMS, in descending score order.
#[pyfunction]
fn nms(boxes: Vec<[f64; 4]>, scores: Vec<f64>, iou_threshold: f64) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err("boxes and scores differ in length"));
    }
    let boxes = boxes.into_iter().map(bbox).collect::<PyResult<Vec<_>>>()?;
    Ok(gid_core::geometry::nms(&scores, &boxes, iou_threshold))
}

/// General instances as `(location, score, box, source)` tuples.
#[pyfunction]
#[pyo3(signature = (teacher_scores, teacher_boxes, student_scores, student_boxes, k=10, nms_iou=0.3))]
fn select_gis(
    teacher_scores: Vec<Vec<f64>>,
    teacher_boxes: Vec<[f64; 4]>,
    student_scores: Vec<Vec<f64>>,
    student_boxes: Vec<[f64; 4]>,
    k: usize,
    nms_iou: f64,
) -> PyResult<Vec<(usize, f64, [f64; 4], &'static str)>> {
    let t = batch(teacher_scores, teacher_boxes)?;
    let s = batch(student_scores, student_boxes)?;
    let gis = gid_core::gism::select_gis(&t, &s, nms_iou, k).map_err(to_py)?;
    Ok(gis
        .into_iter()
        .map(|g| {
            let source = match g.source {
                GiSource::Teacher => "teacher",
                GiSource::Student => "student",
            };
            (g.location, g.score, g.bbox.to_array(), source)
        })
        .collect())
}

/// Relation loss between two equally long lists of flat feature vectors.
#[pyfunction]
#[pyo3(signature = (teacher, student, beta=1.0))]
fn relation_loss(teacher: Vec<Vec<f64>>, student: Vec<Vec<f64>>, beta: f64) -> PyResult<f64> {
    let wrap = |v: Vec<Vec<f64>>| -> Vec<PooledFeature> {
        v.into_iter()
            .enumerate()
            .map(|(gi, data)| PooledFeature {
                channels: data.len(),
                data,
                gi,
            })
            .collect()
    };
    gid_core::relation_distill::relation_loss(&wrap(teacher), &wrap(student), beta)
        .map(|l| l.value)
        .map_err(to_py)
}

/// Writes a synthetic dataset to `out_dir` and returns its checksum.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=0, train_count=500, val_count=100))]
fn generate_dataset(out_dir: PathBuf, seed: u64, train_count: usize, val_count: usize) -> PyResult<String> {
    let spec = DatasetSpec {
        seed,
        train_count,
        val_count,
        ..DatasetSpec::default()
    };
    let data = generate(&spec).map_err(to_py)?;
    data.save(&out_dir).map_err(to_py)?;
    Ok(data.checksum())
}

/// `(mAP, AP50, AP75)` of a results file against a dataset split.
#[pyfunction]
#[pyo3(signature = (results_path, data_dir, split="val"))]
fn evaluate(results_path: PathBuf, data_dir: PathBuf, split: &str) -> PyResult<(f64, f64, f64)> {
    let split = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
    };
    let data = Dataset::load(&data_dir).map_err(to_py)?;
    let samples = data.split(split);
    let ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
    let results = read_results(&results_path, &ids).map_err(to_py)?;
    let r = coco_map(&results, &ground_truth(samples), data.spec.num_classes).map_err(to_py)?;
    Ok((r.map, r.ap50, r.ap75))
}

/// Runs the `gid` command line with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("gid".to_string()).chain(args).collect();
    py.detach(|| gid_core::cli::main_with(argv))
}

#[pymodule]
fn gid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(select_gis, m)?)?;
    m.add_function(wrap_pyfunction!(relation_loss, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
