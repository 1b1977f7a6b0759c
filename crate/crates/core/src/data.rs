//! Synthetic occluding-shapes dataset and its on-disk format.
//!
//! Each sample is a textured background with 1–6 flat-coloured shapes drawn in
//! depth order. A shape placed as an *occluder* overlaps exactly one earlier,
//! not yet occluded shape and hides between 15% and 50% of it; every other
//! placement is disjoint from all visible pixels, and no two visible tight
//! boxes overlap by more than [`MAX_BOX_IOU`]. Under this placement model
//! the expected fraction of occluded instances is
//! `q · E[n − 1] / E[n]` for occlusion probability `q` and instance count `n`.
//!
//! On disk a dataset is a directory holding `annotations.jsonl` (one object per
//! sample), `images/<id>.png` (RGB8) and `masks/<id>_<k>.png` (L8, 0/255).
//! Paths in the JSON are relative to the dataset root.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::BinaryMask;
use crate::roimask::BoxXYXY;
use crate::tensor::Tensor4D;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

/// Hidden-area fraction at or above which an instance counts as occluded.
pub const OCCLUDED_FRACTION: f64 = 0.10;

const OCCLUDER_HIDE_RANGE: (f64, f64) = (0.15, 0.50);
const PLACEMENT_TRIES: usize = 100;
/// Largest tight-box IoU allowed between two instances of one sample.
pub const MAX_BOX_IOU: f64 = 0.5;
const LAYOUT_RESTARTS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceAnnotation {
    pub mask: BinaryMask,
    /// Tight bounds of `mask`.
    pub bbox: BoxXYXY,
    pub occluded: bool,
}

impl InstanceAnnotation {
    pub fn from_mask(mask: BinaryMask, occluded: bool) -> Result<Self> {
        let bbox = mask
            .tight_box()
            .ok_or_else(|| Error::InvalidArgument("instance mask is empty".into()))?;
        Ok(Self { mask, bbox, occluded })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(1, 3, H, W)` with values in `[0, 1]`, multiples of 1/255.
    pub image: Tensor4D,
    pub instances: Vec<InstanceAnnotation>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[3]
    }

    pub fn boxes(&self) -> Vec<BoxXYXY> {
        self.instances.iter().map(|i| i.bbox).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Shape side lengths in pixels, inclusive range.
    pub min_shape_size: usize,
    pub max_shape_size: usize,
    pub shapes: Vec<ShapeKind>,
    pub occlusion_prob: f64,
    /// Minimum per-channel-mean luminance gap between shape and background.
    pub min_contrast: f64,
    pub max_contrast: f64,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_instances: 1,
            max_instances: 4,
            min_shape_size: 24,
            max_shape_size: 40,
            shapes: vec![ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Triangle],
            occlusion_prob: 0.5,
            min_contrast: 0.25,
            max_contrast: 0.5,
            noise_amplitude: 0.03,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % 64 != 0 {
            return bad(format!("image_size {} must be a positive multiple of 64", self.image_size));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances || self.max_instances > 6 {
            return bad(format!(
                "instance range {}..={} must lie within 1..=6",
                self.min_instances, self.max_instances
            ));
        }
        if self.min_shape_size < 4 || self.min_shape_size > self.max_shape_size {
            return bad(format!(
                "shape size range {}..={} is empty or below 4 px",
                self.min_shape_size, self.max_shape_size
            ));
        }
        if self.max_shape_size >= self.image_size {
            return bad(format!(
                "shapes up to {} px do not fit a {} px image",
                self.max_shape_size, self.image_size
            ));
        }
        if 4 * self.max_instances * self.min_shape_size * self.min_shape_size > 3 * self.image_size * self.image_size {
            return bad(format!(
                "{} shapes of at least {} px cannot be laid out in a {} px image",
                self.max_instances, self.min_shape_size, self.image_size
            ));
        }
        if self.shapes.is_empty() {
            return bad("shape vocabulary is empty".into());
        }
        for (name, p) in [
            ("occlusion_prob", self.occlusion_prob),
            ("min_contrast", self.min_contrast),
            ("max_contrast", self.max_contrast),
            ("noise_amplitude", self.noise_amplitude),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} must lie in [0, 1]"));
            }
        }
        if self.min_contrast > self.max_contrast {
            return bad("min_contrast exceeds max_contrast".into());
        }
        Ok(())
    }

    /// `q · E[n − 1] / E[n]` for uniformly drawn `n`.
    pub fn expected_occluded_fraction(&self) -> f64 {
        let mean_n = 0.5 * (self.min_instances + self.max_instances) as f64;
        self.occlusion_prob * (mean_n - 1.0) / mean_n
    }
}

struct Placed {
    full: BinaryMask,
    visible: BinaryMask,
    color: [f64; 3],
}

fn rasterize<R: Rng>(rng: &mut R, kind: ShapeKind, size: usize, cx: f64, cy: f64, w: f64, h: f64) -> BinaryMask {
    let mut m = BinaryMask::new(size, size);
    // Triangle vertices: apex somewhere on the top edge, base on the bottom.
    let apex = cx - 0.5 * w + rng.gen_range(0.0..=1.0) * w;
    let (x0, x1, y0, y1) = (cx - 0.5 * w, cx + 0.5 * w, cy - 0.5 * h, cy + 0.5 * h);
    for y in 0..size {
        let py = y as f64 + 0.5;
        for x in 0..size {
            let px = x as f64 + 0.5;
            let inside = match kind {
                ShapeKind::Rectangle => px >= x0 && px < x1 && py >= y0 && py < y1,
                ShapeKind::Ellipse => {
                    let (u, v) = ((px - cx) / (0.5 * w), (py - cy) / (0.5 * h));
                    u * u + v * v <= 1.0
                }
                ShapeKind::Triangle => {
                    if py < y0 || py >= y1 {
                        false
                    } else {
                        let t = (py - y0) / h;
                        let left = apex + t * (x0 - apex);
                        let right = apex + t * (x1 - apex);
                        px >= left && px < right
                    }
                }
            };
            if inside {
                m.set(x, y, true);
            }
        }
    }
    m
}

fn random_color<R: Rng>(rng: &mut R, background: f64, cfg: &SynthConfig, avoid: Option<[f64; 3]>) -> [f64; 3] {
    loop {
        let contrast = rng.gen_range(cfg.min_contrast..=cfg.max_contrast);
        let sign = if background + contrast > 0.95 {
            -1.0
        } else if background - contrast < 0.05 {
            1.0
        } else if rng.gen_bool(0.5) {
            1.0
        } else {
            -1.0
        };
        let level = (background + sign * contrast).clamp(0.0, 1.0);
        // Tint around the target luminance, keeping the channel mean.
        let tint: [f64; 3] = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
        let mean_tint = (tint[0] + tint[1] + tint[2]) / 3.0;
        let c = tint.map(|t| (level + t - mean_tint).clamp(0.0, 1.0));
        let far_enough = avoid.map_or(true, |a| c.iter().zip(&a).map(|(x, y)| (x - y).abs()).sum::<f64>() > 0.3);
        if far_enough {
            return c;
        }
    }
}

struct Plan {
    kind: ShapeKind,
    /// Earlier shape this one must partially hide.
    target: Option<usize>,
}

fn place_all<R: Rng>(rng: &mut R, cfg: &SynthConfig, plan: &[Plan]) -> Option<Vec<(BinaryMask, BinaryMask)>> {
    let size = cfg.image_size;
    // (full, visible) per shape in depth order.
    let mut placed: Vec<(BinaryMask, BinaryMask)> = Vec::with_capacity(plan.len());
    for step in plan {
        let mut accepted = None;
        for _ in 0..PLACEMENT_TRIES {
            let w = rng.gen_range(cfg.min_shape_size..=cfg.max_shape_size) as f64;
            let h = rng.gen_range(cfg.min_shape_size..=cfg.max_shape_size) as f64;
            let (cx, cy) = match step.target {
                Some(t) => {
                    let tb = placed[t].1.tight_box().expect("visible");
                    let (tx, ty) = tb.center();
                    (
                        tx + rng.gen_range(-0.5..=0.5) * (tb.width() + w) * 0.8,
                        ty + rng.gen_range(-0.5..=0.5) * (tb.height() + h) * 0.8,
                    )
                }
                None => (
                    rng.gen_range(0.5 * w..=size as f64 - 0.5 * w),
                    rng.gen_range(0.5 * h..=size as f64 - 0.5 * h),
                ),
            };
            if cx - 0.5 * w < 0.0 || cy - 0.5 * h < 0.0 || cx + 0.5 * w > size as f64 || cy + 0.5 * h > size as f64 {
                continue;
            }
            let full = rasterize(rng, step.kind, size, cx, cy, w, h);
            if full.count() < 16 {
                continue;
            }
            let ok = placed.iter().enumerate().all(|(i, (pf, pv))| {
                let overlap = pv.intersection_count(&full);
                if Some(i) == step.target {
                    let frac = overlap as f64 / pf.count() as f64;
                    let remaining = pv.count() - overlap;
                    frac >= OCCLUDER_HIDE_RANGE.0 && frac <= OCCLUDER_HIDE_RANGE.1 && remaining >= 16
                } else {
                    overlap == 0
                }
            });
            if ok && separable(&placed, &full) {
                accepted = Some(full);
                break;
            }
        }
        let full = accepted?;
        for (_, pv) in placed.iter_mut() {
            for (v, &f) in pv.data_mut().iter_mut().zip(full.data()) {
                *v &= !f;
            }
        }
        placed.push((full.clone(), full));
    }
    Some(placed)
}

/// Every pair of visible tight boxes, after adding `full` on top, overlaps at
/// most `MAX_BOX_IOU`, so box-level NMS can keep all instances apart.
fn separable(placed: &[(BinaryMask, BinaryMask)], full: &BinaryMask) -> bool {
    let mut boxes: Vec<BoxXYXY> = placed
        .iter()
        .filter_map(|(_, v)| {
            let mut v = v.clone();
            for (p, &f) in v.data_mut().iter_mut().zip(full.data()) {
                *p &= !f;
            }
            v.tight_box()
        })
        .collect();
    boxes.extend(full.tight_box());
    (0..boxes.len()).all(|i| (i + 1..boxes.len()).all(|j| boxes[i].iou(&boxes[j]) <= MAX_BOX_IOU))
}

fn generate_one(cfg: &SynthConfig, seed: u64, id: String) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size;
    let n = rng.gen_range(cfg.min_instances..=cfg.max_instances);
    let background = rng.gen_range(0.35..0.65);

    // Count, kinds and occlusion structure are fixed before any geometry is drawn,
    // so crowded layouts are retried without biasing these statistics.
    let mut plan: Vec<Plan> = Vec::with_capacity(n);
    let mut occluded = vec![false; n];
    for k in 0..n {
        let target = if k > 0 && rng.gen_bool(cfg.occlusion_prob) {
            let open: Vec<usize> = (0..k).filter(|&i| !occluded[i]).collect();
            let t = open[rng.gen_range(0..open.len())];
            occluded[t] = true;
            Some(t)
        } else {
            None
        };
        let kind = cfg.shapes[rng.gen_range(0..cfg.shapes.len())];
        plan.push(Plan { kind, target });
    }
    let shapes = (0..LAYOUT_RESTARTS)
        .find_map(|_| place_all(&mut rng, cfg, &plan))
        .ok_or_else(|| Error::Config(format!("{id}: no layout found for {n} shapes; shrink the shapes")))?;

    let mut colors: Vec<[f64; 3]> = Vec::with_capacity(n);
    for step in &plan {
        let avoid = step.target.map(|t| colors[t]);
        colors.push(random_color(&mut rng, background, cfg, avoid));
    }
    let placed: Vec<Placed> = shapes
        .into_iter()
        .zip(colors)
        .map(|((full, visible), color)| Placed { full, visible, color })
        .collect();

    // Textured background, shapes in depth order, additive noise, 8-bit quantized.
    let (fx, fy, phase) = (rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4), rng.gen_range(0.0..6.28));
    let mut pixels = vec![[0.0f64; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let t = 0.06 * ((fx * x as f64 + phase).sin() * (fy * y as f64).cos());
            pixels[y * size + x] = [background + t, background + 0.5 * t, background - t];
        }
    }
    for p in &placed {
        for y in 0..size {
            for x in 0..size {
                if p.full.get(x, y) {
                    pixels[y * size + x] = p.color;
                }
            }
        }
    }
    let mut data = vec![0.0; 3 * size * size];
    for (i, px) in pixels.iter().enumerate() {
        for c in 0..3 {
            let noise = if cfg.noise_amplitude > 0.0 {
                rng.gen_range(-cfg.noise_amplitude..=cfg.noise_amplitude)
            } else {
                0.0
            };
            data[c * size * size + i] = quantize(px[c] + noise);
        }
    }
    let instances = placed
        .into_iter()
        .map(|p| {
            let hidden = 1.0 - p.visible.count() as f64 / p.full.count() as f64;
            InstanceAnnotation::from_mask(p.visible, hidden >= OCCLUDED_FRACTION)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sample {
        id,
        image: Tensor4D::from_vec([1, 3, size, size], data)?,
        instances,
    })
}

fn quantize(v: f64) -> f64 {
    f64::from((v.clamp(0.0, 1.0) * 255.0).round() as u8) / 255.0
}

/// Generates `n` samples; sample `i` uses a seed derived from `cfg.seed` and `i`.
pub fn synth_generate(cfg: &SynthConfig, n: usize) -> Result<Vec<Sample>> {
    synth_generate_prefixed(cfg, n, "s")
}

pub fn synth_generate_prefixed(cfg: &SynthConfig, n: usize, prefix: &str) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    (0..n)
        .map(|i| {
            let seed = cfg
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(i as u64 + 1);
            generate_one(cfg, seed, format!("{prefix}{i:05}"))
        })
        .collect()
}

/// Mirrors image, masks and boxes about the vertical axis.
pub fn augment_hflip(sample: &Sample) -> Sample {
    let [n, c, h, w] = sample.image.shape();
    let src = sample.image.data();
    let mut data = vec![0.0; src.len()];
    for plane in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                data[(plane * h + y) * w + (w - 1 - x)] = src[(plane * h + y) * w + x];
            }
        }
    }
    Sample {
        id: sample.id.clone(),
        image: Tensor4D::from_vec([n, c, h, w], data).expect("same shape"),
        instances: sample
            .instances
            .iter()
            .map(|inst| InstanceAnnotation {
                mask: inst.mask.hflip(),
                bbox: inst.bbox.hflip(w as f64),
                occluded: inst.occluded,
            })
            .collect(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    occluded: bool,
    mask: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    image: String,
    width: usize,
    height: usize,
    instances: Vec<InstanceRecord>,
}

fn image_to_rgb(t: &Tensor4D) -> RgbImage {
    let [_, _, h, w] = t.shape();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (t.at(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

fn rgb_to_image(img: &RgbImage) -> Tensor4D {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f64::from(p.0[c]) / 255.0;
        }
    }
    Tensor4D::from_vec([1, 3, h, w], data).expect("shape")
}

pub fn mask_to_gray(m: &BinaryMask) -> GrayImage {
    GrayImage::from_fn(m.width() as u32, m.height() as u32, |x, y| {
        Luma([if m.get(x as usize, y as usize) { 255 } else { 0 }])
    })
}

fn gray_to_mask(img: &GrayImage) -> BinaryMask {
    let data = img.pixels().map(|p| p.0[0] >= 128).collect();
    BinaryMask::from_vec(img.width() as usize, img.height() as usize, data).expect("shape")
}

pub fn save_png_gray(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn dataset_write(samples: &[Sample], dir: &Path) -> Result<()> {
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("masks"))?;
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let mut ann = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    for s in samples {
        let image_rel = format!("images/{}.png", s.id);
        let p = dir.join(&image_rel);
        image_to_rgb(&s.image)
            .save(&p)
            .map_err(|source| Error::Image { path: p.clone(), source })?;
        let mut instances = Vec::with_capacity(s.instances.len());
        for (k, inst) in s.instances.iter().enumerate() {
            let mask_rel = format!("masks/{}_{k}.png", s.id);
            save_png_gray(&mask_to_gray(&inst.mask), &dir.join(&mask_rel))?;
            let b = inst.bbox;
            instances.push(InstanceRecord {
                bbox: [b.x0, b.y0, b.x1, b.y1],
                occluded: inst.occluded,
                mask: mask_rel,
            });
        }
        let rec = SampleRecord {
            id: s.id.clone(),
            image: image_rel,
            width: s.width(),
            height: s.height(),
            instances,
        };
        let line = serde_json::to_string(&rec).expect("serializable");
        writeln!(ann, "{line}").map_err(|e| Error::io(&ann_path, e))?;
    }
    Ok(())
}

fn read_records(dir: &Path) -> Result<Vec<(usize, SampleRecord)>> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let file = fs::File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&ann_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: ann_path.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8())
}

fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8())
}

fn check_size(ann: &Path, line: usize, what: &str, got: (u32, u32), rec: &SampleRecord) -> Result<()> {
    if got != (rec.width as u32, rec.height as u32) {
        return Err(Error::Record {
            path: ann.to_path_buf(),
            line,
            message: format!("{what} is {}x{}, record says {}x{}", got.0, got.1, rec.width, rec.height),
        });
    }
    Ok(())
}

pub fn dataset_read(dir: &Path) -> Result<Vec<Sample>> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let mut samples = Vec::new();
    for (line, rec) in read_records(dir)? {
        let img = load_rgb(&dir.join(&rec.image))?;
        check_size(&ann_path, line, &rec.image, img.dimensions(), &rec)?;
        let mut instances = Vec::with_capacity(rec.instances.len());
        for inst in &rec.instances {
            let mask_path: PathBuf = dir.join(&inst.mask);
            let gray = load_gray(&mask_path)?;
            check_size(&ann_path, line, &inst.mask, gray.dimensions(), &rec)?;
            let [x0, y0, x1, y1] = inst.bbox;
            let bbox = BoxXYXY::new(x0, y0, x1, y1).map_err(|e| Error::Record {
                path: ann_path.clone(),
                line,
                message: e.to_string(),
            })?;
            instances.push(InstanceAnnotation {
                mask: gray_to_mask(&gray),
                bbox,
                occluded: inst.occluded,
            });
        }
        samples.push(Sample {
            id: rec.id,
            image: rgb_to_image(&img),
            instances,
        });
    }
    Ok(samples)
}

/// Images only; ground-truth masks are never opened.
pub fn dataset_read_images(dir: &Path) -> Result<Vec<(String, Tensor4D)>> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    read_records(dir)?
        .into_iter()
        .map(|(line, rec)| {
            let img = load_rgb(&dir.join(&rec.image))?;
            check_size(&ann_path, line, &rec.image, img.dimensions(), &rec)?;
            Ok((rec.id, rgb_to_image(&img)))
        })
        .collect()
}
