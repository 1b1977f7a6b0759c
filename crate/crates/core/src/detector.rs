//! Single-shot, class-agnostic detection branch: a small conv backbone with a
//! four-level top-down feature pyramid (strides 8, 16, 32, 64), one head per
//! level, anchor matching, box coding, NMS and top-k selection.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Weights};
use crate::roimask::BoxXYXY;
use crate::tensor::{Graph, NodeId, ParamStore};

pub const LEVEL_STRIDES: [usize; 4] = [8, 16, 32, 64];

/// Largest log-scale delta accepted by [`decode_box`]; keeps `exp` finite.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    /// Widths of the stride-8/16/32/64 stages.
    pub stage_channels: [usize; 4],
    pub lateral_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_channels: 8,
            stage_channels: [16, 32, 64, 128],
            lateral_channels: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    /// Anchor side (at ratio 1) as a multiple of the level stride.
    pub scale_per_stride: f64,
    /// Height / width ratios.
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scale_per_stride: 4.0,
            aspect_ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.aspect_ratios.len()
    }
}

pub fn register_detector<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: &BackboneConfig,
    anchors_per_cell: usize,
) -> Result<()> {
    let l = cfg.lateral_channels;
    nn::register_conv(store, rng, "backbone.stem1", 3, cfg.stem_channels, 3)?;
    nn::register_conv(store, rng, "backbone.stem2", cfg.stem_channels, cfg.stem_channels, 3)?;
    let mut c_in = cfg.stem_channels;
    for (i, &c) in cfg.stage_channels.iter().enumerate() {
        nn::register_conv(store, rng, &format!("backbone.stage{i}.down"), c_in, c, 3)?;
        nn::register_conv(store, rng, &format!("backbone.stage{i}.conv"), c, c, 3)?;
        nn::register_conv(store, rng, &format!("fpn.lateral{i}"), c, l, 1)?;
        nn::register_conv(store, rng, &format!("fpn.smooth{i}"), l, l, 3)?;
        nn::register_conv(store, rng, &format!("head{i}.conv"), l, l, 3)?;
        nn::register_conv_with(store, rng, &format!("head{i}.cls"), l, anchors_per_cell, 1, nn::OUTPUT_INIT)?;
        nn::register_conv_with(store, rng, &format!("head{i}.reg"), l, 4 * anchors_per_cell, 1, nn::OUTPUT_INIT)?;
        c_in = c;
    }
    Ok(())
}

/// Bottom-up conv stack plus top-down pyramid. Returns laterals at strides
/// 8, 16, 32, 64 in that order.
pub fn backbone_forward(graph: &mut Graph, weights: Weights<'_>, image: NodeId) -> Result<[NodeId; 4]> {
    let [_, c, h, w] = graph.value(image).shape();
    if c != 3 {
        return Err(Error::InvalidArgument(format!("backbone expects 3 input channels, got {c}")));
    }
    if h == 0 || w == 0 || h % 64 != 0 || w % 64 != 0 {
        return Err(Error::InvalidArgument(format!(
            "image size {h}x{w} must be a positive multiple of 64"
        )));
    }
    let mut x = nn::conv_relu(graph, weights, "backbone.stem1", image, 2, 1)?;
    x = nn::conv_relu(graph, weights, "backbone.stem2", x, 2, 1)?;
    let mut stages = Vec::with_capacity(4);
    for i in 0..4 {
        x = nn::conv_relu(graph, weights, &format!("backbone.stage{i}.down"), x, 2, 1)?;
        x = nn::conv_relu(graph, weights, &format!("backbone.stage{i}.conv"), x, 1, 1)?;
        stages.push(x);
    }
    let mut merged: [Option<NodeId>; 4] = [None; 4];
    for i in (0..4).rev() {
        let lat = nn::conv(graph, weights, &format!("fpn.lateral{i}"), stages[i], 1, 1)?;
        merged[i] = Some(match merged.get(i + 1).copied().flatten() {
            Some(coarser) => {
                let up = graph.upsample_nearest2x(coarser);
                graph.add(lat, up)?
            }
            None => lat,
        });
    }
    let mut out = [merged[0].expect("set"); 4];
    for (i, m) in merged.iter().enumerate() {
        out[i] = nn::conv_relu(graph, weights, &format!("fpn.smooth{i}"), m.expect("set"), 1, 1)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `(1, A, h, w)` objectness logits per level.
    pub cls: [NodeId; 4],
    /// `(1, 4A, h, w)` box deltas per level, channel `4a + d`.
    pub reg: [NodeId; 4],
}

pub fn detection_heads(graph: &mut Graph, weights: Weights<'_>, laterals: &[NodeId; 4]) -> Result<HeadOutputs> {
    let mut cls = [laterals[0]; 4];
    let mut reg = [laterals[0]; 4];
    for (i, &lat) in laterals.iter().enumerate() {
        let t = nn::conv_relu(graph, weights, &format!("head{i}.conv"), lat, 1, 1)?;
        cls[i] = nn::conv(graph, weights, &format!("head{i}.cls"), t, 1, 1)?;
        reg[i] = nn::conv(graph, weights, &format!("head{i}.reg"), t, 1, 1)?;
    }
    Ok(HeadOutputs { cls, reg })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelAnchors {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// First flat anchor index of this level.
    pub offset: usize,
}

/// Anchors for all levels, flattened level-major, then aspect ratio, then
/// row-major cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<BoxXYXY>,
    pub levels: Vec<LevelAnchors>,
    pub per_cell: usize,
}

impl AnchorSet {
    pub fn generate(image_h: usize, image_w: usize, cfg: &AnchorConfig) -> Result<Self> {
        if cfg.aspect_ratios.is_empty() || cfg.aspect_ratios.iter().any(|&r| !(r > 0.0)) || !(cfg.scale_per_stride > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid anchor config {cfg:?}")));
        }
        let mut boxes = Vec::new();
        let mut levels = Vec::new();
        for &stride in &LEVEL_STRIDES {
            let (h, w) = (image_h / stride, image_w / stride);
            levels.push(LevelAnchors {
                stride,
                height: h,
                width: w,
                offset: boxes.len(),
            });
            let side = cfg.scale_per_stride * stride as f64;
            for &ratio in &cfg.aspect_ratios {
                let aw = side / ratio.sqrt();
                let ah = side * ratio.sqrt();
                for y in 0..h {
                    for x in 0..w {
                        let cx = (x as f64 + 0.5) * stride as f64;
                        let cy = (y as f64 + 0.5) * stride as f64;
                        boxes.push(BoxXYXY {
                            x0: cx - 0.5 * aw,
                            y0: cy - 0.5 * ah,
                            x1: cx + 0.5 * aw,
                            y1: cy + 0.5 * ah,
                        });
                    }
                }
            }
        }
        Ok(Self {
            boxes,
            levels,
            per_cell: cfg.per_cell(),
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Flat position of anchor `index`'s logit and of its delta component
    /// `d` in the head outputs of its level: `(level, cls offset, reg offset)`.
    pub fn head_offsets(&self, index: usize, d: usize) -> (usize, usize, usize) {
        let level = self
            .levels
            .iter()
            .rposition(|l| l.offset <= index)
            .expect("index within anchor set");
        let l = &self.levels[level];
        let local = index - l.offset;
        let cells = l.height * l.width;
        let (a, cell) = (local / cells, local % cells);
        (level, local, (4 * a + d) * cells + cell)
    }
}

/// Anchor-to-ground-truth assignment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// Positive anchor indices, ascending.
    pub positives: Vec<usize>,
    /// Negative anchor indices, ascending.
    pub negatives: Vec<usize>,
    /// Regression target per positive.
    pub targets: Vec<[f64; 4]>,
    /// Matched ground-truth index per positive.
    pub matched_gt: Vec<usize>,
}

impl MatchResult {
    pub fn num_positive(&self) -> usize {
        self.positives.len()
    }

    pub fn num_negative(&self) -> usize {
        self.negatives.len()
    }
}

/// Positive iff best IoU `> pos_thr`, negative iff `< neg_thr`; in addition the
/// highest-IoU anchor of every ground truth (when that IoU is non-zero) is
/// forced positive for it.
pub fn match_anchors(anchors: &[BoxXYXY], gt: &[BoxXYXY], pos_thr: f64, neg_thr: f64) -> MatchResult {
    if gt.is_empty() {
        return MatchResult {
            negatives: (0..anchors.len()).collect(),
            ..MatchResult::default()
        };
    }
    let mut assigned: Vec<Option<usize>> = vec![None; anchors.len()];
    let mut negative = vec![false; anchors.len()];
    let mut best_for_gt = vec![(0.0f64, usize::MAX); gt.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        let mut best = (-1.0f64, 0usize);
        for (g, gbox) in gt.iter().enumerate() {
            let iou = anchor.iou(gbox);
            if iou > best.0 {
                best = (iou, g);
            }
            if iou > best_for_gt[g].0 {
                best_for_gt[g] = (iou, a);
            }
        }
        if best.0 > pos_thr {
            assigned[a] = Some(best.1);
        } else if best.0 < neg_thr {
            negative[a] = true;
        }
    }
    for (g, &(iou, a)) in best_for_gt.iter().enumerate() {
        if iou > 0.0 {
            assigned[a] = Some(g);
            negative[a] = false;
        }
    }
    let mut m = MatchResult::default();
    for a in 0..anchors.len() {
        if let Some(g) = assigned[a] {
            m.positives.push(a);
            m.matched_gt.push(g);
            m.targets.push(encode_box(&anchors[a], &gt[g]));
        } else if negative[a] {
            m.negatives.push(a);
        }
    }
    m
}

/// Center-offset / log-scale parameterization of `target` relative to `anchor`.
pub fn encode_box(anchor: &BoxXYXY, target: &BoxXYXY) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let (tx, ty) = target.center();
    [
        (tx - ax) / aw,
        (ty - ay) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

/// Inverse of [`encode_box`], without clipping.
pub fn decode_box(anchor: &BoxXYXY, delta: &[f64; 4]) -> Result<BoxXYXY> {
    if delta.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite(format!("box delta {delta:?}")));
    }
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + delta[0] * aw;
    let cy = ay + delta[1] * ah;
    let w = aw * delta[2].min(MAX_LOG_SCALE).exp();
    let h = ah * delta[3].min(MAX_LOG_SCALE).exp();
    Ok(BoxXYXY {
        x0: cx - 0.5 * w,
        y0: cy - 0.5 * h,
        x1: cx + 0.5 * w,
        y1: cy + 0.5 * h,
    })
}

/// Decodes every anchor and clips to the image.
pub fn decode_boxes(anchors: &[BoxXYXY], deltas: &[[f64; 4]], image_w: f64, image_h: f64) -> Result<Vec<BoxXYXY>> {
    if anchors.len() != deltas.len() {
        return Err(Error::shape("decode_boxes", &[anchors.len()], &[deltas.len()]));
    }
    anchors
        .iter()
        .zip(deltas)
        .map(|(a, d)| Ok(decode_box(a, d)?.clipped(image_w, image_h)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BoxXYXY,
    pub score: f64,
}

/// Indices sorted by descending score, ties by ascending index.
fn score_order(proposals: &[Proposal]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .score
            .total_cmp(&proposals[a].score)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy suppression of any box overlapping a kept, higher-ranked box with
/// IoU `> iou_thr`. Output is in rank order.
pub fn nms(proposals: &[Proposal], iou_thr: f64) -> Vec<Proposal> {
    let mut kept: Vec<Proposal> = Vec::new();
    for i in score_order(proposals) {
        let p = proposals[i];
        if kept.iter().all(|k| k.bbox.iou(&p.bbox) <= iou_thr) {
            kept.push(p);
        }
    }
    kept
}

pub fn select_topk(proposals: &[Proposal], k: usize) -> Vec<Proposal> {
    score_order(proposals)
        .into_iter()
        .take(k)
        .map(|i| proposals[i])
        .collect()
}

pub fn proposals_csv(rows: &[(String, Proposal)]) -> String {
    let mut s = String::from("image_id,x0,y0,x1,y1,score\n");
    for (id, p) in rows {
        let _ = writeln!(
            s,
            "{id},{},{},{},{},{}",
            p.bbox.x0, p.bbox.y0, p.bbox.x1, p.bbox.y1, p.score
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoxXYXY {
        BoxXYXY::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn anchor_counts_per_level() {
        let a = AnchorSet::generate(320, 320, &AnchorConfig::default()).unwrap();
        assert_eq!(a.levels[0].height * a.levels[0].width * 3, 4800);
        assert_eq!(a.len(), 3 * (1600 + 400 + 100 + 25));
        for b in &a.boxes {
            assert!(b.area() > 0.0);
        }
    }

    #[test]
    fn anchor_centres_on_stride_grid() {
        let a = AnchorSet::generate(64, 64, &AnchorConfig::default()).unwrap();
        for l in &a.levels {
            for i in l.offset..l.offset + 3 * l.height * l.width {
                let (cx, cy) = a.boxes[i].center();
                let s = l.stride as f64;
                let off_grid = |v: f64| ((v / s - 0.5) - (v / s - 0.5).round()).abs();
                assert!(off_grid(cx) < 1e-9 && off_grid(cy) < 1e-9);
            }
        }
    }

    #[test]
    fn head_offsets_follow_layout() {
        let a = AnchorSet::generate(64, 64, &AnchorConfig::default()).unwrap();
        // level 0 is 8x8; anchor with ratio index 1 at cell (2, 3)
        let idx = 64 + 2 * 8 + 3;
        assert_eq!(a.head_offsets(idx, 2), (0, idx, (4 + 2) * 64 + 19));
        let first_l1 = a.levels[1].offset;
        assert_eq!(a.head_offsets(first_l1, 0), (1, 0, 0));
    }

    #[test]
    fn identical_anchor_is_positive_disjoint_is_negative() {
        let anchors = vec![bx(0.0, 0.0, 10.0, 10.0), bx(50.0, 50.0, 60.0, 60.0)];
        let m = match_anchors(&anchors, &[bx(0.0, 0.0, 10.0, 10.0)], 0.5, 0.5);
        assert_eq!(m.positives, vec![0]);
        assert_eq!(m.negatives, vec![1]);
        assert_eq!(m.targets[0], [0.0; 4]);
    }

    #[test]
    fn exact_half_iou_is_neither() {
        // second anchor: IoU with gt = 50/100 = 0.5 exactly
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        let anchors = vec![gt, bx(0.0, 0.0, 10.0, 5.0)];
        assert_eq!(anchors[1].iou(&gt), 0.5);
        let m = match_anchors(&anchors, &[gt], 0.5, 0.5);
        assert_eq!(m.positives, vec![0]);
        assert!(m.negatives.is_empty());
    }

    #[test]
    fn small_gt_gets_forced_positive() {
        let anchors = vec![bx(0.0, 0.0, 32.0, 32.0), bx(32.0, 32.0, 64.0, 64.0)];
        let gt = bx(2.0, 2.0, 10.0, 10.0);
        let m = match_anchors(&anchors, &[gt], 0.5, 0.5);
        assert_eq!(m.positives, vec![0]);
        assert_eq!(m.negatives, vec![1]);
    }

    #[test]
    fn no_gt_means_all_negative() {
        let anchors = vec![bx(0.0, 0.0, 32.0, 32.0); 3];
        let m = match_anchors(&anchors, &[], 0.5, 0.5);
        assert!(m.positives.is_empty());
        assert_eq!(m.negatives, vec![0, 1, 2]);
    }

    #[test]
    fn zero_delta_and_log_two() {
        let a = bx(10.0, 20.0, 30.0, 60.0);
        assert_eq!(decode_box(&a, &[0.0; 4]).unwrap(), a);
        let d = decode_box(&a, &[0.0, 0.0, 2f64.ln(), 0.0]).unwrap();
        assert!((d.width() - 40.0).abs() < 1e-12);
        assert_eq!(d.center(), a.center());
        assert!(decode_box(&a, &[f64::NAN, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn decode_clips_to_image() {
        let a = bx(-10.0, -10.0, 30.0, 30.0);
        let b = decode_boxes(&[a], &[[0.0; 4]], 64.0, 64.0).unwrap();
        assert_eq!(b[0], bx(0.0, 0.0, 30.0, 30.0));
    }

    #[test]
    fn nms_basic_cases() {
        let p = |b: BoxXYXY, s: f64| Proposal { bbox: b, score: s };
        let same = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[p(same, 0.4), p(same, 0.9)], 0.5), vec![p(same, 0.9)]);
        let disjoint = [p(same, 0.1), p(bx(20.0, 0.0, 30.0, 10.0), 0.2)];
        assert_eq!(nms(&disjoint, 0.5).len(), 2);
        // equal scores: lower index wins
        let tie = nms(&[p(same, 0.5), p(bx(0.0, 0.0, 10.0, 9.0), 0.5)], 0.5);
        assert_eq!(tie, vec![p(same, 0.5)]);
    }

    #[test]
    fn topk_cases() {
        let p = |s: f64| Proposal { bbox: bx(0.0, 0.0, 1.0, 1.0), score: s };
        let list = [p(0.2), p(0.9), p(0.5)];
        assert_eq!(select_topk(&list, 10).len(), 3);
        assert_eq!(select_topk(&list, 1), vec![p(0.9)]);
        assert_eq!(select_topk(&list, 2), vec![p(0.9), p(0.5)]);
    }

    #[test]
    fn csv_header() {
        let p = Proposal { bbox: bx(1.0, 2.0, 3.0, 4.0), score: 0.5 };
        let s = proposals_csv(&[("img0".into(), p)]);
        assert_eq!(s, "image_id,x0,y0,x1,y1,score\nimg0,1,2,3,4,0.5\n");
    }
}
