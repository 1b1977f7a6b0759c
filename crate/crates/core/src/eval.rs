//! Mask-IoU average precision, occlusion-subset metrics and gradient maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::data::{self, Sample};
use crate::detector;
use crate::error::{Error, Result};
use crate::model::{InferConfig, Model};
use crate::nn::Weights;
use crate::raster::BinaryMask;
use crate::roimask::{self, BoxXYXY, MaskConfig, MaskMode, Region, RoiMask};
use crate::segbranch::{self, SegTarget};
use crate::tensor::{Graph, Tensor4D};

/// Box-IoU above which two instances count as overlapping in the fallback
/// occlusion rule.
pub const OVERLAP_IOU: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub mask: BinaryMask,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtInstance {
    pub image_id: String,
    pub mask: BinaryMask,
    /// Excluded from recall; detections matched to it are neither TP nor FP.
    pub ignore: bool,
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::shape("mask_iou", &[a.height(), a.width()], &[b.height(), b.width()]));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        return Err(Error::InvalidArgument("mask IoU of two empty masks".into()));
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub curve: Vec<PrPoint>,
}

/// Descending score, ties by input order.
fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Per-detection IoU against every gt of the same image, `(gt index, iou)`.
fn overlaps(dets: &[Detection], gts: &[GtInstance]) -> Result<Vec<Vec<(usize, f64)>>> {
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (g, gt) in gts.iter().enumerate() {
        by_image.entry(gt.image_id.as_str()).or_default().push(g);
    }
    dets.iter()
        .map(|d| {
            by_image
                .get(d.image_id.as_str())
                .map(|ids| ids.iter().map(|&g| Ok((g, mask_iou(&d.mask, &gts[g].mask)?))).collect())
                .unwrap_or_else(|| Ok(Vec::new()))
        })
        .collect()
}

fn ap_from_overlaps(dets: &[Detection], gts: &[GtInstance], ious: &[Vec<(usize, f64)>], thr: f64) -> Option<ApResult> {
    let npos = gts.iter().filter(|g| !g.ignore).count();
    if npos == 0 {
        return None;
    }
    if dets.iter().any(|d| !d.score.is_finite()) {
        log::warn!("non-finite detection score; ranking uses total order");
    }
    let mut matched = vec![false; gts.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::new();
    for d in ranked(dets) {
        // Prefer the best unmatched counted gt, then the best unmatched ignored one.
        let pick = |want_ignore: bool| {
            ious[d]
                .iter()
                .filter(|&&(g, iou)| !matched[g] && gts[g].ignore == want_ignore && iou >= thr)
                .fold(None::<(usize, f64)>, |best, &(g, iou)| match best {
                    Some((_, b)) if b >= iou => best,
                    _ => Some((g, iou)),
                })
        };
        if let Some((g, _)) = pick(false) {
            matched[g] = true;
            tp += 1;
        } else if let Some((g, _)) = pick(true) {
            matched[g] = true;
            continue;
        } else {
            fp += 1;
        }
        curve.push(PrPoint {
            recall: tp as f64 / npos as f64,
            precision: tp as f64 / (tp + fp) as f64,
            score: dets[d].score,
        });
    }
    Some(ApResult {
        ap: all_point_ap(&curve),
        curve,
    })
}

/// Area under the precision envelope (precision at recall r = max precision
/// at any recall ≥ r).
fn all_point_ap(curve: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (p, &prec) in curve.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * prec;
        prev_recall = p.recall;
    }
    ap
}

/// Greedy matched, all-point interpolated AP. `None` when no gt is counted.
pub fn average_precision(dets: &[Detection], gts: &[GtInstance], iou_thr: f64) -> Result<Option<ApResult>> {
    let ious = overlaps(dets, gts)?;
    Ok(ap_from_overlaps(dets, gts, &ious, iou_thr))
}

/// Flag-based occlusion membership.
pub fn occlusion_subset(sample: &Sample) -> Vec<bool> {
    sample.instances.iter().map(|i| i.occluded).collect()
}

/// Overlap-based membership: the tight box overlaps another instance's tight
/// box with IoU > `thr`.
pub fn occlusion_subset_by_overlap(boxes: &[BoxXYXY], thr: f64) -> Vec<bool> {
    (0..boxes.len())
        .map(|i| (0..boxes.len()).any(|j| j != i && boxes[i].iou(&boxes[j]) > thr))
        .collect()
}

pub fn gt_instances(samples: &[Sample], occluded_only: bool) -> Vec<GtInstance> {
    samples
        .iter()
        .flat_map(|s| {
            let subset = occlusion_subset(s);
            s.instances.iter().zip(subset).map(move |(inst, occ)| GtInstance {
                image_id: s.id.clone(),
                mask: inst.mask.clone(),
                ignore: occluded_only && !occ,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map50: f64,
    pub map70: f64,
    /// Absent when the benchmark has no occluded instance.
    pub map_o50: Option<f64>,
    pub map_o70: Option<f64>,
    pub num_images: usize,
    pub num_instances: usize,
    pub num_occluded: usize,
    pub num_detections: usize,
    #[serde(skip)]
    pub curves: Vec<(String, Vec<PrPoint>)>,
}

impl EvalReport {
    /// AP at IoU 0.7 may never exceed AP at 0.5 on the same detections.
    pub fn check_monotone(&self) -> Result<()> {
        let bad = |a: f64, b: f64| b > a + 1e-12;
        if bad(self.map50, self.map70) {
            return Err(Error::InvalidArgument(format!(
                "mAP@0.7 {} exceeds mAP@0.5 {}",
                self.map70, self.map50
            )));
        }
        if let (Some(a), Some(b)) = (self.map_o50, self.map_o70) {
            if bad(a, b) {
                return Err(Error::InvalidArgument(format!("mAP_O@0.7 {b} exceeds mAP_O@0.5 {a}")));
            }
        }
        Ok(())
    }

    pub fn table(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}", v));
        format!(
            "metric     value\nmAP@0.5    {}\nmAP@0.7    {}\nmAP_O@0.5  {}\nmAP_O@0.7  {}\n",
            f(Some(self.map50)),
            f(Some(self.map70)),
            f(self.map_o50),
            f(self.map_o70)
        )
    }

    pub fn pr_csv(&self) -> String {
        let mut s = String::from("curve,recall,precision,score\n");
        for (name, pts) in &self.curves {
            for p in pts {
                let _ = writeln!(s, "{name},{},{},{}", p.recall, p.precision, p.score);
            }
        }
        s
    }
}

pub fn evaluate(dets: &[Detection], samples: &[Sample]) -> Result<EvalReport> {
    let all = gt_instances(samples, false);
    if all.is_empty() {
        return Err(Error::InvalidArgument("evaluation set has no instances".into()));
    }
    let occ = gt_instances(samples, true);
    // Masks are identical in both views, so one IoU table serves all four metrics.
    let ious = overlaps(dets, &all)?;
    let mut curves = Vec::new();
    let mut run = |name: &str, gts: &[GtInstance], thr: f64| {
        let r = ap_from_overlaps(dets, gts, &ious, thr);
        if let Some(r) = &r {
            curves.push((name.to_string(), r.curve.clone()));
        }
        r.map(|r| r.ap)
    };
    let map50 = run("all@0.5", &all, 0.5).expect("non-empty");
    let map70 = run("all@0.7", &all, 0.7).expect("non-empty");
    let map_o50 = run("occluded@0.5", &occ, 0.5);
    let map_o70 = run("occluded@0.7", &occ, 0.7);
    let report = EvalReport {
        map50,
        map70,
        map_o50,
        map_o70,
        num_images: samples.len(),
        num_instances: all.len(),
        num_occluded: occ.iter().filter(|g| !g.ignore).count(),
        num_detections: dets.len(),
        curves,
    };
    report.check_monotone()?;
    Ok(report)
}

/// Runs the model over every sample image and collects scored masks.
pub fn detect_all(model: &Model, images: &[(String, Tensor4D)], cfg: &InferConfig) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (id, img) in images {
        for p in model.predict(img, cfg)? {
            out.push(Detection {
                image_id: id.clone(),
                mask: p.mask,
                score: p.score,
            });
        }
    }
    Ok(out)
}

/// `Σ_c |∂L_seg / ∂H_c|` over stride-8 cells.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl GradientMap {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Share of the total mass falling in `region` of `geometry`; 0 for an
    /// all-zero map.
    pub fn region_ratio(&self, geometry: &RoiMask, region: Region) -> Result<f64> {
        if geometry.height() != self.height || geometry.width() != self.width {
            return Err(Error::shape(
                "region_ratio",
                &[self.height, self.width],
                &[geometry.height(), geometry.width()],
            ));
        }
        let total = self.total();
        if total == 0.0 {
            return Ok(0.0);
        }
        let part: f64 = self
            .values
            .iter()
            .zip(geometry.regions())
            .filter(|(_, &r)| r == region)
            .map(|(v, _)| v)
            .sum();
        Ok(part / total)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    /// Grayscale heatmap normalised to the map maximum, each cell drawn as
    /// `scale × scale` pixels.
    pub fn to_image(&self, scale: usize) -> GrayImage {
        let max = self.values.iter().copied().fold(0.0, f64::max);
        let scale = scale.max(1);
        GrayImage::from_fn((self.width * scale) as u32, (self.height * scale) as u32, |x, y| {
            let v = self.values[(y as usize / scale) * self.width + x as usize / scale];
            Luma([if max > 0.0 { (255.0 * v / max).round() as u8 } else { 0 }])
        })
    }

    pub fn write(&self, png: &Path, csv: &Path, scale: usize) -> Result<()> {
        data::save_png_gray(&self.to_image(scale), png)?;
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))
    }
}

/// Gradient of the segmentation loss of instance `k` (its ground-truth box
/// and mask) with respect to the compressed features before extraction, with
/// all weights held constant.
pub fn gradient_map(model: &Model, sample: &Sample, k: usize) -> Result<GradientMap> {
    if !model.params.all_finite() {
        return Err(Error::NonFinite("model weights".into()));
    }
    let inst = sample
        .instances
        .get(k)
        .ok_or_else(|| Error::InvalidArgument(format!("sample {} has no instance {k}", sample.id)))?;
    let weights = Weights::frozen(&model.params);
    let mut graph = Graph::new();
    let image = graph.constant(sample.image.clone());
    let laterals = detector::backbone_forward(&mut graph, weights, image)?;
    let h_const = segbranch::compress(&mut graph, weights, laterals[0])?;
    let h = graph.variable(graph.value(h_const).clone());
    let cfg = &model.config;
    let fwd = segbranch::seg_forward_from_features(&mut graph, weights, h, &[inst.bbox], &cfg.seg, &cfg.mask)?;
    let target = SegTarget::for_proposal(&fwd, 0, &inst.mask);
    let loss = segbranch::seg_loss_node(&mut graph, &fwd, &[target])?;
    graph.backward(loss)?;
    let [_, c, fh, fw] = graph.value(h).shape();
    let g = graph
        .grad(h)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; c * fh * fw]);
    let mut values = vec![0.0; fh * fw];
    for ch in 0..c {
        for (v, gi) in values.iter_mut().zip(&g[ch * fh * fw..(ch + 1) * fh * fw]) {
            *v += gi.abs();
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient map".into()));
    }
    Ok(GradientMap {
        height: fh,
        width: fw,
        values,
    })
}

/// Inner / band / exterior geometry of the ternary mask for `bbox`, used to
/// compare gradient maps across extractors on a common partition.
pub fn band_geometry(bbox: &BoxXYXY, mask: &MaskConfig, feat_h: usize, feat_w: usize) -> Result<RoiMask> {
    roimask::make_mask(
        bbox,
        &MaskConfig {
            mode: MaskMode::Ternary,
            ..*mask
        },
        feat_h,
        feat_w,
    )
}
