//! Synthetic shapes detection dataset.
//!
//! Each image is a noisy gradient background with small clutter marks and a
//! few filled shapes (circle, square, triangle, cross), one class per shape.
//! Generation is a pure function of the [`DatasetSpec`]; every image draws
//! from its own ChaCha stream so images do not depend on each other.
//!
//! On disk a dataset is a directory holding `dataset.json` (spec, split ids
//! and a SHA-256 checksum), `annotations.jsonl` (one object per line) and
//! `images/<id>.png`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GidError, Result};
use crate::geometry::{iou, BoundingBox, LabeledBox};
use crate::nn::{Real, Tensor};

pub const SHAPE_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const MIN_BOX_SIDE: usize = 4;
const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "dataset.json";
const ANNOTATIONS: &str = "annotations.jsonl";
const IMAGES: &str = "images";
/// Mean and spread used to normalise pixels for the network.
const PIXEL_MEAN: f64 = 127.5;
const PIXEL_SCALE: f64 = 64.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub seed: u64,
    pub image_size: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side range in pixels, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    /// Pixel noise standard deviation as a fraction of the full range.
    pub noise: f64,
    /// Distractor marks per image.
    pub clutter: usize,
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            num_classes: 4,
            min_objects: 1,
            max_objects: 5,
            min_size: 10,
            max_size: 32,
            noise: 0.03,
            clutter: 6,
            train_count: 500,
            val_count: 100,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_size > self.image_size {
            return Err(GidError::contract(format!(
                "minimum object size {} does not fit in a {}px image",
                self.min_size, self.image_size
            )));
        }
        if self.num_classes == 0 || self.num_classes > SHAPE_NAMES.len() {
            return Err(GidError::config(
                "num_classes",
                format!("must be between 1 and {}", SHAPE_NAMES.len()),
            ));
        }
        if self.min_size < MIN_BOX_SIDE {
            return Err(GidError::config("min_size", format!("must be at least {MIN_BOX_SIDE}")));
        }
        if self.max_size < self.min_size {
            return Err(GidError::config("max_size", "must be at least min_size"));
        }
        if self.max_objects < self.min_objects {
            return Err(GidError::config("max_objects", "must be at least min_objects"));
        }
        if !(self.noise >= 0.0 && self.noise <= 1.0) {
            return Err(GidError::config("noise", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub image: RgbImage,
    pub objects: Vec<LabeledBox>,
}

impl Sample {
    pub fn flip_horizontal(&self) -> Sample {
        let RgbImage { width, height, .. } = self.image;
        let mut pixels = vec![0u8; self.image.pixels.len()];
        for y in 0..height {
            for x in 0..width {
                let src = (y * width + x) * 3;
                let dst = (y * width + width - 1 - x) * 3;
                pixels[dst..dst + 3].copy_from_slice(&self.image.pixels[src..src + 3]);
            }
        }
        Sample {
            id: self.id,
            image: RgbImage { width, height, pixels },
            objects: self
                .objects
                .iter()
                .map(|o| LabeledBox {
                    bbox: o.bbox.flip_horizontal(width as f64),
                    class: o.class,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    spec: DatasetSpec,
    checksum: String,
    train_ids: Vec<u64>,
    val_ids: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    image_id: u64,
    class: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

fn shape_covers(class: usize, u: f64, v: f64) -> bool {
    match class {
        0 => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        1 => true,
        2 => v >= 2.0 * (u - 0.5).abs(),
        _ => (u - 0.5).abs() <= 1.0 / 6.0 || (v - 0.5).abs() <= 1.0 / 6.0,
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(0.0..255.0))
}

fn render(spec: &DatasetSpec, id: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(id);
    let n = spec.image_size;
    let mut canvas = vec![[0.0f64; 3]; n * n];

    let base = [0, 1, 2].map(|_| rng.random_range(50.0..205.0));
    let grad = [0, 1, 2].map(|_| rng.random_range(-30.0..30.0));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    for y in 0..n {
        for x in 0..n {
            let t = ((x as f64 / n as f64 - 0.5) * ca + (y as f64 / n as f64 - 0.5) * sa) * 2.0;
            canvas[y * n + x] = [0, 1, 2].map(|c| base[c] + grad[c] * t);
        }
    }

    // clutter: short strokes and dots well below the object size
    for _ in 0..spec.clutter {
        let color = random_color(&mut rng);
        let x0 = rng.random_range(0.0..n as f64);
        let y0 = rng.random_range(0.0..n as f64);
        let len = rng.random_range(2.0..(spec.min_size as f64).max(3.0));
        let dir = rng.random_range(0.0..std::f64::consts::TAU);
        let steps = (len * 2.0) as usize + 1;
        for s in 0..steps {
            let t = s as f64 / 2.0;
            let (px, py) = ((x0 + t * dir.cos()) as isize, (y0 + t * dir.sin()) as isize);
            if px >= 0 && py >= 0 && (px as usize) < n && (py as usize) < n {
                canvas[py as usize * n + px as usize] = color;
            }
        }
    }

    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut objects: Vec<LabeledBox> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..spec.num_classes);
        let w = rng.random_range(spec.min_size..=spec.max_size.min(n));
        let h = if class == 0 {
            w
        } else {
            let r: f64 = rng.random_range(0.8..1.25);
            ((w as f64 * r).round() as usize).clamp(spec.min_size, n)
        };
        let x = rng.random_range(0..=n - w);
        let y = rng.random_range(0..=n - h);
        let bbox = BoundingBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
        let crowded = objects.iter().any(|o| {
            let inter = o.bbox.intersection_area(&bbox);
            iou(&o.bbox, &bbox) > 0.3 || inter > 0.5 * o.bbox.area().min(bbox.area())
        });
        // keep the stream length independent of the outcome
        let color_draws: Vec<[f64; 3]> = (0..8).map(|_| random_color(&mut rng)).collect();
        if crowded {
            continue;
        }
        let local = canvas[(y + h / 2) * n + x + w / 2];
        let color = color_draws
            .iter()
            .copied()
            .max_by(|a, b| {
                let d = |c: &[f64; 3]| (0..3).map(|i| (c[i] - local[i]).powi(2)).sum::<f64>();
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        const SS: usize = 4;
        for py in y..y + h {
            for px in x..x + w {
                let mut hits = 0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let u = (px - x) as f64 + (sx as f64 + 0.5) / SS as f64;
                        let v = (py - y) as f64 + (sy as f64 + 0.5) / SS as f64;
                        if shape_covers(class, u / w as f64, v / h as f64) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let a = hits as f64 / (SS * SS) as f64;
                    let dst = &mut canvas[py * n + px];
                    for c in 0..3 {
                        dst[c] = (1.0 - a) * dst[c] + a * color[c];
                    }
                }
            }
        }
        objects.push(LabeledBox { bbox, class });
    }

    let noise = Normal::new(0.0, spec.noise * 255.0).expect("validated noise");
    let mut pixels = Vec::with_capacity(n * n * 3);
    for px in &canvas {
        for &c in px {
            let v = if spec.noise > 0.0 { c + noise.sample(&mut rng) } else { c };
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Sample {
        id,
        image: RgbImage {
            width: n,
            height: n,
            pixels,
        },
        objects,
    }
}

/// Renders the train split (ids `0..train_count`) and the val split (the
/// following ids).
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let train = (0..spec.train_count as u64).map(|id| render(spec, id)).collect();
    let val = (spec.train_count as u64..(spec.train_count + spec.val_count) as u64)
        .map(|id| render(spec, id))
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    /// SHA-256 over every image and annotation in split order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (tag, samples) in [(b'T', &self.train), (b'V', &self.val)] {
            h.update([tag]);
            h.update((samples.len() as u64).to_le_bytes());
            for s in samples {
                h.update(s.id.to_le_bytes());
                h.update((s.image.width as u64).to_le_bytes());
                h.update((s.image.height as u64).to_le_bytes());
                h.update(&s.image.pixels);
                h.update((s.objects.len() as u64).to_le_bytes());
                for o in &s.objects {
                    h.update((o.class as u64).to_le_bytes());
                    for v in o.bbox.to_array() {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join(IMAGES);
        std::fs::create_dir_all(&images).map_err(|e| GidError::io(&images, e))?;
        for s in self.train.iter().chain(&self.val) {
            write_png(&image_path(dir, s.id), &s.image)?;
        }
        let ann_path = dir.join(ANNOTATIONS);
        let file = std::fs::File::create(&ann_path).map_err(|e| GidError::io(&ann_path, e))?;
        let mut w = BufWriter::new(file);
        for s in self.train.iter().chain(&self.val) {
            for o in &s.objects {
                let rec = AnnotationRecord {
                    image_id: s.id,
                    class: o.class,
                    bbox: o.bbox.to_array(),
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n").map_err(|e| GidError::io(&ann_path, e))?;
            }
        }
        w.flush().map_err(|e| GidError::io(&ann_path, e))?;
        let manifest = Manifest {
            format: FORMAT_VERSION,
            spec: self.spec.clone(),
            checksum: self.checksum(),
            train_ids: self.train.iter().map(|s| s.id).collect(),
            val_ids: self.val.iter().map(|s| s.id).collect(),
        };
        let man_path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&man_path, text + "\n").map_err(|e| GidError::io(&man_path, e))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let man_path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&man_path).map_err(|e| GidError::io(&man_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| GidError::Parse {
            path: man_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if manifest.format != FORMAT_VERSION {
            return Err(GidError::Dataset(format!("unsupported format version {}", manifest.format)));
        }
        manifest.spec.validate()?;
        let size = manifest.spec.image_size as f64;

        let mut split_of: BTreeMap<u64, Split> = BTreeMap::new();
        for (ids, split) in [(&manifest.train_ids, Split::Train), (&manifest.val_ids, Split::Val)] {
            for &id in ids {
                if split_of.insert(id, split).is_some() {
                    return Err(GidError::Dataset(format!("image id {id} listed twice in the manifest")));
                }
            }
        }

        let ann_path = dir.join(ANNOTATIONS);
        let file = std::fs::File::open(&ann_path).map_err(|e| GidError::io(&ann_path, e))?;
        let mut objects: BTreeMap<u64, Vec<LabeledBox>> = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| GidError::io(&ann_path, e))?;
            let parse_err = |message: String| GidError::Parse {
                path: ann_path.clone(),
                line: i + 1,
                message,
            };
            if line.trim().is_empty() {
                continue;
            }
            let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            if !split_of.contains_key(&rec.image_id) {
                return Err(parse_err(format!("image id {} is not in the manifest", rec.image_id)));
            }
            if rec.class >= manifest.spec.num_classes {
                return Err(parse_err(format!("class {} out of range", rec.class)));
            }
            let bbox = BoundingBox::from(rec.bbox);
            validate_box(&bbox, size).map_err(parse_err)?;
            objects.entry(rec.image_id).or_default().push(LabeledBox { bbox, class: rec.class });
        }

        let load_split = |ids: &[u64]| -> Result<Vec<Sample>> {
            ids.iter()
                .map(|&id| {
                    let image = read_png(&image_path(dir, id))?;
                    if image.width != manifest.spec.image_size || image.height != manifest.spec.image_size {
                        return Err(GidError::Image {
                            path: image_path(dir, id),
                            message: format!("size {}x{} does not match the spec", image.width, image.height),
                        });
                    }
                    Ok(Sample {
                        id,
                        image,
                        objects: objects.get(&id).cloned().unwrap_or_default(),
                    })
                })
                .collect()
        };
        let dataset = Dataset {
            train: load_split(&manifest.train_ids)?,
            val: load_split(&manifest.val_ids)?,
            spec: manifest.spec,
        };
        let sum = dataset.checksum();
        if sum != manifest.checksum {
            return Err(GidError::Dataset(format!(
                "checksum mismatch in {}: manifest {}, contents {sum}",
                dir.display(),
                manifest.checksum
            )));
        }
        Ok(dataset)
    }
}

/// Box invariants every annotation must satisfy.
pub fn validate_box(b: &BoundingBox, image_size: f64) -> std::result::Result<(), String> {
    let side = MIN_BOX_SIDE as f64;
    if !(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= image_size && b.y2 <= image_size) {
        return Err(format!("box {:?} leaves the {image_size}px image", b.to_array()));
    }
    if !(b.width() >= side && b.height() >= side) {
        return Err(format!("box {:?} is smaller than {side}x{side}", b.to_array()));
    }
    Ok(())
}

fn image_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(IMAGES).join(format!("{id:06}.png"))
}

pub fn write_png(path: &Path, image: &RgbImage) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| GidError::io(path, e))?;
    let err = |e: png::EncodingError| GidError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(&image.pixels).map_err(err)?;
    writer.finish().map_err(err)
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| GidError::io(path, e))?;
    let err = |message: String| GidError::Image {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = png::Decoder::new(Cursor::new(bytes))
        .read_info()
        .map_err(|e| err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| err("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(err(format!("expected 8-bit RGB, found {:?} {:?}", info.color_type, info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok(RgbImage {
        width: info.width as usize,
        height: info.height as usize,
        pixels: buf,
    })
}

/// Stacks images into a normalised `[N, 3, H, W]` tensor.
pub fn to_tensor<F: Real>(samples: &[&Sample]) -> Tensor<F> {
    let (h, w) = samples
        .first()
        .map_or((0, 0), |s| (s.image.height, s.image.width));
    let mut t = Tensor::zeros([samples.len(), 3, h, w]);
    for (n, s) in samples.iter().enumerate() {
        assert_eq!((s.image.height, s.image.width), (h, w), "mixed image sizes in one batch");
        let img = t.image_mut(n);
        for p in 0..h * w {
            for c in 0..3 {
                let v = s.image.pixels[p * 3 + c] as f64;
                img[c * h * w + p] = F::from_f64_lossy((v - PIXEL_MEAN) / PIXEL_SCALE);
            }
        }
    }
    t
}
