//! Synthetic shape scenes with exact visible-region masks, and a small
//! on-disk dataset format (PNG images, PNG masks, JSONL annotations).

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, PixelBox};
use crate::targets::GroundTruthInstance;
use crate::tensor::Tensor;

/// Instances with fewer visible pixels are dropped.
pub const MIN_VISIBLE_PIXELS: usize = 16;

const ANNOTATIONS: &str = "annotations.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeWeights {
    pub ellipse: f64,
    pub rectangle: f64,
    pub triangle: f64,
}

impl Default for ShapeWeights {
    fn default() -> Self {
        ShapeWeights {
            ellipse: 0.4,
            rectangle: 0.3,
            triangle: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// `(height, width)`
    pub canvas: (usize, usize),
    /// Inclusive object count range.
    pub num_objects: (usize, usize),
    pub shape_weights: ShapeWeights,
    /// Inclusive object extent range as a fraction of the canvas side.
    pub size_range: (f64, f64),
    /// Probability that an object is placed next to an earlier one.
    pub overlap_level: f64,
    pub num_classes: usize,
    /// First scene seed of a suite.
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            canvas: (128, 128),
            num_objects: (1, 4),
            shape_weights: ShapeWeights::default(),
            size_range: (0.15, 0.4),
            overlap_level: 0.3,
            num_classes: 3,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.canvas.0 < 8 || self.canvas.1 < 8 {
            return bad("canvas must be at least 8x8");
        }
        if self.num_objects.0 > self.num_objects.1 {
            return bad("num_objects range is empty");
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("size_range must satisfy 0 < min <= max <= 1");
        }
        if !(0.0..=1.0).contains(&self.overlap_level) {
            return bad("overlap_level must lie in [0, 1]");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        let w = self.shape_weights;
        let ws = [w.ellipse, w.rectangle, w.triangle];
        if ws.iter().any(|v| !(*v >= 0.0)) || (ws.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("shape weights must be non-negative and sum to 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    /// `3 x H x W`, values `k / 255`.
    pub image: Tensor<f32>,
    /// Back to front; masks hold the visible region only.
    pub instances: Vec<GroundTruthInstance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Ellipse,
    Rectangle,
    Triangle,
}

/// Base color of a class: evenly spaced hues, bright enough that one channel
/// always exceeds the background.
pub fn class_color(class_id: usize, num_classes: usize) -> [f32; 3] {
    let h = class_id as f64 / num_classes as f64 * 6.0;
    let (s, v) = (0.75, 0.9);
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

struct Placed {
    family: Family,
    class_id: usize,
    cx: f64,
    cy: f64,
    h: f64,
    w: f64,
    angle: f64,
    /// Triangle vertices relative to the center, in units of the half extents.
    verts: [(f64, f64); 3],
    brightness: f64,
}

impl Placed {
    fn bbox(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0)
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (a, b) = (self.w / 2.0, self.h / 2.0);
        match self.family {
            Family::Ellipse => {
                // rotated inside the box's inscribed ellipse
                let (s, c) = self.angle.sin_cos();
                let u = (dx * c + dy * s) / a;
                let v = (-dx * s + dy * c) / b;
                // shrink so the rotated ellipse stays inside the box
                let k = 1.0 + 0.4 * s.abs();
                u * u + v * v <= 1.0 / (k * k)
            }
            Family::Rectangle => dx.abs() <= a && dy.abs() <= b,
            Family::Triangle => {
                let p = |i: usize| (self.verts[i].0 * a, self.verts[i].1 * b);
                let (p0, p1, p2) = (p(0), p(1), p(2));
                let cross = |o: (f64, f64), q: (f64, f64)| (q.0 - o.0) * (dy - o.1) - (q.1 - o.1) * (dx - o.0);
                let d0 = cross(p0, p1);
                let d1 = cross(p1, p2);
                let d2 = cross(p2, p0);
                let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(neg && pos)
            }
        }
    }
}

fn box_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let iw = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let ih = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = iw * ih;
    let area = |r: (f64, f64, f64, f64)| (r.2 - r.0) * (r.3 - r.1);
    inter / (area(a) + area(b) - inter)
}

/// Deterministic scene for `seed`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (height, width) = cfg.canvas;
    let weights = [cfg.shape_weights.ellipse, cfg.shape_weights.rectangle, cfg.shape_weights.triangle];
    let families = WeightedIndex::new(weights).map_err(|e| Error::Config(e.to_string()))?;
    let count = rng.random_range(cfg.num_objects.0..=cfg.num_objects.1);
    let side = height.min(width) as f64;

    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    for _ in 0..count {
        let family = [Family::Ellipse, Family::Rectangle, Family::Triangle][families.sample(&mut rng)];
        let class_id = rng.random_range(0..cfg.num_classes);
        let h = rng.random_range(cfg.size_range.0..=cfg.size_range.1) * side;
        let w = rng.random_range(cfg.size_range.0..=cfg.size_range.1) * side;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let verts = [
            (rng.random_range(-1.0..0.0), 1.0),
            (rng.random_range(0.0..1.0), 1.0),
            (rng.random_range(-1.0..1.0), -1.0),
        ];
        let brightness = rng.random_range(-0.08..0.08);
        let cx_range = (w / 2.0)..=(width as f64 - w / 2.0);
        let cy_range = (h / 2.0)..=(height as f64 - h / 2.0);
        let near = !placed.is_empty() && rng.random_bool(cfg.overlap_level);
        let (mut cx, mut cy);
        if near {
            let anchor = &placed[rng.random_range(0..placed.len())];
            let reach_x = (anchor.w + w) / 4.0;
            let reach_y = (anchor.h + h) / 4.0;
            cx = (anchor.cx + rng.random_range(-reach_x..=reach_x)).clamp(*cx_range.start(), *cx_range.end());
            cy = (anchor.cy + rng.random_range(-reach_y..=reach_y)).clamp(*cy_range.start(), *cy_range.end());
        } else {
            let mut tries = 0;
            loop {
                cx = rng.random_range(cx_range.clone());
                cy = rng.random_range(cy_range.clone());
                let b = (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
                tries += 1;
                if tries >= 50 || placed.iter().all(|p| box_iou(p.bbox(), b) == 0.0) {
                    break;
                }
            }
        }
        placed.push(Placed {
            family,
            class_id,
            cx,
            cy,
            h,
            w,
            angle,
            verts,
            brightness,
        });
    }

    // Last writer wins: label[p] is the index of the front-most object.
    let mut label = vec![usize::MAX; height * width];
    for (k, obj) in placed.iter().enumerate() {
        let (x0, y0, x1, y1) = obj.bbox();
        let ys = (y0.floor().max(0.0) as usize)..(y1.ceil().min(height as f64) as usize);
        let xs = (x0.floor().max(0.0) as usize)..(x1.ceil().min(width as f64) as usize);
        for y in ys {
            for x in xs.clone() {
                if obj.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    label[y * width + x] = k;
                }
            }
        }
    }

    let background = rng.random_range(0.05..0.25);
    let mut image = Tensor::<f32>::zeros([3, height, width]);
    let plane = height * width;
    for i in 0..plane {
        let noise: [f64; 3] = [
            rng.random_range(-0.04..0.04),
            rng.random_range(-0.04..0.04),
            rng.random_range(-0.04..0.04),
        ];
        for (ch, n) in noise.iter().enumerate() {
            let base = match label[i] {
                usize::MAX => background,
                k => {
                    let obj = &placed[k];
                    class_color(obj.class_id, cfg.num_classes)[ch] as f64 + obj.brightness
                }
            };
            image.data_mut()[ch * plane + i] = quantize(base + n);
        }
    }

    let mut instances = Vec::new();
    for (k, obj) in placed.iter().enumerate() {
        let mask = BinaryMask::from_fn(height, width, |y, x| label[y * width + x] == k);
        if mask.area() >= MIN_VISIBLE_PIXELS {
            instances.push(GroundTruthInstance::new(obj.class_id, mask)?);
        }
    }
    Ok(Scene {
        id: format!("{seed:04}"),
        image,
        instances,
    })
}

/// Scenes for seeds `cfg.seed .. cfg.seed + count`, generated in parallel.
pub fn generate_suite(cfg: &SceneConfig, count: usize) -> Result<Vec<Scene>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(cfg, cfg.seed + i))
        .collect()
}

/// Mean IoU between tight boxes of all instance pairs within each scene.
pub fn mean_pairwise_box_iou(scenes: &[Scene]) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    let rect = |b: PixelBox| (b.x as f64, b.y as f64, (b.x + b.w as i64) as f64, (b.y + b.h as i64) as f64);
    for s in scenes {
        for (i, a) in s.instances.iter().enumerate() {
            for b in &s.instances[i + 1..] {
                total += box_iou(rect(a.bbox), rect(b.bbox));
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    class_id: usize,
    mask_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    image_id: String,
    image_file: String,
    instances: Vec<InstanceRecord>,
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `images/<id>.png`, `masks/<id>_<k>.png` and one annotation line per
/// scene. Output bytes depend only on the scenes.
pub fn export_dataset(scenes: &[Scene], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut ann = std::io::BufWriter::new(fs::File::create(dir.join(ANNOTATIONS))?);
    for scene in scenes {
        let s = scene.image.shape();
        let (h, w) = (s[1], s[2]);
        let plane = h * w;
        let mut rgb = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for ch in 0..3 {
                rgb.push((scene.image.data()[ch * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        let image_file = format!("images/{}.png", scene.id);
        let path = dir.join(&image_file);
        image::RgbImage::from_raw(w as u32, h as u32, rgb)
            .expect("buffer sized from the image")
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(image_err(&path))?;
        let mut instances = Vec::new();
        for (k, inst) in scene.instances.iter().enumerate() {
            let mask_file = format!("masks/{}_{k}.png", scene.id);
            let path = dir.join(&mask_file);
            let bytes = inst.mask.as_bytes().iter().map(|&b| b * 255).collect();
            image::GrayImage::from_raw(w as u32, h as u32, bytes)
                .expect("buffer sized from the mask")
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(image_err(&path))?;
            instances.push(InstanceRecord {
                class_id: inst.class_id,
                mask_file,
            });
        }
        let rec = ImageRecord {
            image_id: scene.id.clone(),
            image_file,
            instances,
        };
        serde_json::to_writer(&mut ann, &rec)?;
        ann.write_all(b"\n")?;
    }
    ann.flush()?;
    Ok(())
}

/// Lazily loads and validates the scenes of a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<impl Iterator<Item = Result<Scene>>> {
    let ann_path = dir.join(ANNOTATIONS);
    let file = fs::File::open(&ann_path).map_err(|e| Error::Ingestion {
        path: ann_path.clone(),
        line: 0,
        msg: e.to_string(),
    })?;
    let dir = dir.to_path_buf();
    let lines = BufReader::new(file).lines().enumerate();
    Ok(lines.filter_map(move |(i, line)| {
        let line = match line {
            Ok(l) if l.trim().is_empty() => return None,
            Ok(l) => l,
            Err(e) => return Some(Err(e.into())),
        };
        Some(load_record(&dir, &ann_path, i + 1, &line))
    }))
}

/// Reads a PNG (or any supported format) as a `3 x H x W` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = px[ch] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

fn load_record(dir: &Path, ann_path: &Path, line: usize, text: &str) -> Result<Scene> {
    let rec: ImageRecord = serde_json::from_str(text).map_err(|e| Error::Ingestion {
        path: ann_path.to_path_buf(),
        line,
        msg: e.to_string(),
    })?;
    let ingest = |path: &PathBuf, msg: String| Error::Ingestion {
        path: path.clone(),
        line,
        msg,
    };
    let image_path = dir.join(&rec.image_file);
    let image = load_image(&image_path).map_err(|e| ingest(&image_path, e.to_string()))?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut instances = Vec::with_capacity(rec.instances.len());
    for inst in &rec.instances {
        let path = dir.join(&inst.mask_file);
        let m = image::open(&path).map_err(|e| ingest(&path, e.to_string()))?.to_luma8();
        if (m.height() as usize, m.width() as usize) != (h, w) {
            return Err(ingest(
                &path,
                format!("mask is {}x{} but image is {h}x{w}", m.height(), m.width()),
            ));
        }
        let bytes: Vec<u8> = m.as_raw().iter().map(|&v| u8::from(v >= 128)).collect();
        let mask = BinaryMask::from_bytes(h, w, &bytes)?;
        let gt = GroundTruthInstance::new(inst.class_id, mask).map_err(|e| ingest(&path, e.to_string()))?;
        instances.push(gt);
    }
    Ok(Scene {
        id: rec.image_id,
        image,
        instances,
    })
}
