//! Segmentation branch. The stride-8 lateral is compressed by a 1×1 conv (with
//! ReLU, so features are non-negative), masked per proposal, and passed
//! through a size-preserving conv stack:
//!
//! ```text
//! conv(wide) → conv(wide) → conv(wide)
//!   → residual(narrow) → maxpool 3×3/1 → dilated conv(narrow)
//!   → residual(narrow) → maxpool 3×3/1 → dilated conv(narrow)
//!   → 1×1 conv → one logit per cell
//! ```
//!
//! The RoIAlign / RoIPool extractors replace masking with a fixed-size crop
//! and exist only for ablation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss;
use crate::nn::{self, Weights};
use crate::raster::BinaryMask;
use crate::roimask::{self, BoxXYXY, MaskConfig, MaskMode, RoiMask};
use crate::tensor::kernels::bilinear_taps;
use crate::tensor::{Graph, NodeId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extractor {
    RoimaskingTernary,
    RoimaskingBinary,
    RoimaskingExpanded,
    Roialign,
    Roipool,
}

impl Extractor {
    pub const ALL: [Extractor; 5] = [
        Extractor::RoimaskingTernary,
        Extractor::RoimaskingBinary,
        Extractor::RoimaskingExpanded,
        Extractor::Roialign,
        Extractor::Roipool,
    ];

    pub fn mask_mode(self) -> Option<MaskMode> {
        match self {
            Extractor::RoimaskingTernary => Some(MaskMode::Ternary),
            Extractor::RoimaskingBinary => Some(MaskMode::Binary),
            Extractor::RoimaskingExpanded => Some(MaskMode::ExpandedBinary),
            Extractor::Roialign | Extractor::Roipool => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Extractor::RoimaskingTernary => "roimasking_ternary",
            Extractor::RoimaskingBinary => "roimasking_binary",
            Extractor::RoimaskingExpanded => "roimasking_expanded",
            Extractor::Roialign => "roialign",
            Extractor::Roipool => "roipool",
        }
    }
}

impl std::str::FromStr for Extractor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Extractor::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Extractor::ALL.iter().map(|e| e.name()).collect();
                Error::InvalidArgument(format!("unknown extractor `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegBranchConfig {
    pub compress_channels: usize,
    /// Width of the first three convs.
    pub wide_channels: usize,
    /// Width of every later conv.
    pub narrow_channels: usize,
    pub dilation: usize,
    pub extractor: Extractor,
    /// Crop size for the RoIAlign / RoIPool baselines.
    pub roi_output_size: usize,
}

impl Default for SegBranchConfig {
    fn default() -> Self {
        Self {
            compress_channels: 256,
            wide_channels: 128,
            narrow_channels: 64,
            dilation: 2,
            extractor: Extractor::RoimaskingTernary,
            roi_output_size: 7,
        }
    }
}

pub fn register_segbranch<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: &SegBranchConfig,
    lateral_channels: usize,
) -> Result<()> {
    let (c, wide, narrow) = (cfg.compress_channels, cfg.wide_channels, cfg.narrow_channels);
    nn::register_conv(store, rng, "seg.compress", lateral_channels, c, 1)?;
    nn::register_conv(store, rng, "seg.conv1", c, wide, 3)?;
    nn::register_conv(store, rng, "seg.conv2", wide, wide, 3)?;
    nn::register_conv(store, rng, "seg.conv3", wide, wide, 3)?;
    nn::register_conv(store, rng, "seg.res1.a", wide, narrow, 3)?;
    nn::register_conv(store, rng, "seg.res1.b", narrow, narrow, 3)?;
    if wide != narrow {
        nn::register_conv(store, rng, "seg.res1.proj", wide, narrow, 1)?;
    }
    nn::register_conv(store, rng, "seg.dil1", narrow, narrow, 3)?;
    nn::register_conv(store, rng, "seg.res2.a", narrow, narrow, 3)?;
    nn::register_conv(store, rng, "seg.res2.b", narrow, narrow, 3)?;
    nn::register_conv(store, rng, "seg.dil2", narrow, narrow, 3)?;
    nn::register_conv_with(store, rng, "seg.logit", narrow, 1, 1, nn::OUTPUT_INIT)?;
    Ok(())
}

/// `relu(conv1x1(lateral))`: the feature map the masks are applied to.
pub fn compress(graph: &mut Graph, weights: Weights<'_>, lateral: NodeId) -> Result<NodeId> {
    nn::conv_relu(graph, weights, "seg.compress", lateral, 1, 1)
}

fn residual(graph: &mut Graph, weights: Weights<'_>, name: &str, x: NodeId) -> Result<NodeId> {
    let a = nn::conv_relu(graph, weights, &format!("{name}.a"), x, 1, 1)?;
    let b = nn::conv(graph, weights, &format!("{name}.b"), a, 1, 1)?;
    let proj = format!("{name}.proj.weight");
    let skip = if weights.store.index_of(&proj).is_some() {
        nn::conv(graph, weights, &format!("{name}.proj"), x, 1, 1)?
    } else {
        x
    };
    let sum = graph.add(b, skip)?;
    Ok(graph.relu(sum))
}

/// The conv stack after extraction: `(N, C, h, w)` → `(N, 1, h, w)` logits.
pub fn branch(graph: &mut Graph, weights: Weights<'_>, x: NodeId, dilation: usize) -> Result<NodeId> {
    let mut y = nn::conv_relu(graph, weights, "seg.conv1", x, 1, 1)?;
    y = nn::conv_relu(graph, weights, "seg.conv2", y, 1, 1)?;
    y = nn::conv_relu(graph, weights, "seg.conv3", y, 1, 1)?;
    y = residual(graph, weights, "seg.res1", y)?;
    y = graph.maxpool2d(y, 3, 1, 1)?;
    y = nn::conv_relu(graph, weights, "seg.dil1", y, 1, dilation)?;
    y = residual(graph, weights, "seg.res2", y)?;
    y = graph.maxpool2d(y, 3, 1, 1)?;
    y = nn::conv_relu(graph, weights, "seg.dil2", y, 1, dilation)?;
    nn::conv(graph, weights, "seg.logit", y, 1, 1)
}

/// How a logit map relates to image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LogitLayout {
    /// Covers the whole feature map; cell `(i, j)` spans `stride` pixels.
    FullFrame { stride: usize },
    /// `size × size` bins spanning the proposal box.
    RoiGrid { size: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceLogits {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Owning proposal box in image pixels.
    pub bbox: BoxXYXY,
    pub layout: LogitLayout,
}

/// Nodes and per-proposal metadata of one segmentation forward.
#[derive(Clone, Debug)]
pub struct SegForward {
    /// Compressed features before masking (`H`).
    pub features: NodeId,
    /// Extracted (masked or cropped) features fed to the branch.
    pub extracted: NodeId,
    /// `(N, 1, h, w)` logits.
    pub logits: NodeId,
    pub boxes: Vec<BoxXYXY>,
    /// Per-proposal mask; `None` for the crop baselines.
    pub masks: Vec<Option<RoiMask>>,
    pub layout: LogitLayout,
}

impl SegForward {
    pub fn instance_logits(&self, graph: &Graph) -> Vec<InstanceLogits> {
        let v = graph.value(self.logits);
        let [n, _, h, w] = v.shape();
        (0..n)
            .map(|b| InstanceLogits {
                values: v.data()[b * h * w..(b + 1) * h * w].to_vec(),
                height: h,
                width: w,
                bbox: self.boxes[b],
                layout: self.layout,
            })
            .collect()
    }
}

/// Extraction + branch for every box over one image's stride-8 lateral.
pub fn seg_forward(
    graph: &mut Graph,
    weights: Weights<'_>,
    lateral_s8: NodeId,
    boxes: &[BoxXYXY],
    cfg: &SegBranchConfig,
    mask_cfg: &MaskConfig,
) -> Result<SegForward> {
    let features = compress(graph, weights, lateral_s8)?;
    seg_forward_from_features(graph, weights, features, boxes, cfg, mask_cfg)
}

/// As [`seg_forward`], starting from an existing compressed-feature node.
pub fn seg_forward_from_features(
    graph: &mut Graph,
    weights: Weights<'_>,
    features: NodeId,
    boxes: &[BoxXYXY],
    cfg: &SegBranchConfig,
    mask_cfg: &MaskConfig,
) -> Result<SegForward> {
    if boxes.is_empty() {
        return Err(Error::InvalidArgument("segmentation branch needs at least one box".into()));
    }
    let [n, _, h, w] = graph.value(features).shape();
    if n != 1 {
        return Err(Error::InvalidArgument(format!("segmentation branch takes one image, got batch {n}")));
    }
    let (extracted, masks, layout) = match cfg.extractor.mask_mode() {
        Some(mode) => {
            let mc = MaskConfig { mode, ..*mask_cfg };
            let masks = boxes
                .iter()
                .map(|b| roimask::make_mask(b, &mc, h, w))
                .collect::<Result<Vec<_>>>()?;
            let x = roimask::apply_masks(graph, features, &masks)?;
            (
                x,
                masks.into_iter().map(Some).collect(),
                LogitLayout::FullFrame { stride: mask_cfg.stride },
            )
        }
        None => {
            let x = baseline_extract(graph, features, boxes, cfg.extractor, cfg.roi_output_size, mask_cfg.stride)?;
            (x, vec![None; boxes.len()], LogitLayout::RoiGrid { size: cfg.roi_output_size })
        }
    };
    let logits = branch(graph, weights, extracted, cfg.dilation)?;
    Ok(SegForward {
        features,
        extracted,
        logits,
        boxes: boxes.to_vec(),
        masks,
        layout,
    })
}

/// RoIAlign taps for one channel plane: per bin, the average of a 2×2 grid of
/// bilinear samples. `feat_box` is in feature coordinates.
pub fn roialign_taps(h: usize, w: usize, feat_box: &BoxXYXY, out: usize) -> Vec<Vec<(usize, f64)>> {
    let bin_h = feat_box.height() / out as f64;
    let bin_w = feat_box.width() / out as f64;
    let mut taps = Vec::with_capacity(out * out);
    for py in 0..out {
        for px in 0..out {
            let mut t: Vec<(usize, f64)> = Vec::new();
            for sy in 0..2 {
                let y = feat_box.y0 + (py as f64 + (sy as f64 + 0.5) / 2.0) * bin_h;
                for sx in 0..2 {
                    let x = feat_box.x0 + (px as f64 + (sx as f64 + 0.5) / 2.0) * bin_w;
                    for (i, wt) in bilinear_taps(h, w, y, x) {
                        match t.iter_mut().find(|(j, _)| *j == i) {
                            Some(e) => e.1 += 0.25 * wt,
                            None => t.push((i, 0.25 * wt)),
                        }
                    }
                }
            }
            taps.push(t);
        }
    }
    taps
}

/// RoIPool bins for one plane: the box is snapped to whole cells
/// (`round(x0)`, `round(x1)`, at least one cell), each bin covers
/// `[floor(p·b), ceil((p+1)·b))` cells of it. Empty bins yield no cells.
pub fn roipool_bins(h: usize, w: usize, feat_box: &BoxXYXY, out: usize) -> Vec<Vec<usize>> {
    let snap = |lo: f64, hi: f64| -> (isize, f64) {
        let s = lo.round() as isize;
        let e = hi.round() as isize;
        (s, ((e - s).max(1)) as f64)
    };
    let (ys, rh) = snap(feat_box.y0, feat_box.y1);
    let (xs, rw) = snap(feat_box.x0, feat_box.x1);
    let (bh, bw) = (rh / out as f64, rw / out as f64);
    let clip = |v: isize, limit: usize| v.clamp(0, limit as isize) as usize;
    let mut bins = Vec::with_capacity(out * out);
    for py in 0..out {
        let y0 = clip((py as f64 * bh).floor() as isize + ys, h);
        let y1 = clip(((py + 1) as f64 * bh).ceil() as isize + ys, h);
        for px in 0..out {
            let x0 = clip((px as f64 * bw).floor() as isize + xs, w);
            let x1 = clip(((px + 1) as f64 * bw).ceil() as isize + xs, w);
            let mut cells = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    cells.push(y * w + x);
                }
            }
            bins.push(cells);
        }
    }
    bins
}

/// Fixed-size crop of a batch-1 feature node per box (image coordinates),
/// stacked along the batch dimension: `(N, C, out, out)`.
pub fn baseline_extract(
    graph: &mut Graph,
    features: NodeId,
    boxes: &[BoxXYXY],
    kind: Extractor,
    out: usize,
    stride: usize,
) -> Result<NodeId> {
    if out == 0 || stride == 0 {
        return Err(Error::InvalidArgument("crop size and stride must be >= 1".into()));
    }
    let [n, c, h, w] = graph.value(features).shape();
    if n != 1 {
        return Err(Error::InvalidArgument(format!("crop extraction takes one image, got batch {n}")));
    }
    let plane = h * w;
    let mut taps: Vec<Vec<(usize, f64)>> = Vec::with_capacity(boxes.len() * c * out * out);
    for b in boxes {
        if !b.is_valid() {
            return Err(Error::InvalidArgument(format!("degenerate box {b:?}")));
        }
        let fb = b.scaled(1.0 / stride as f64);
        match kind {
            Extractor::Roialign => {
                let base = roialign_taps(h, w, &fb, out);
                for ch in 0..c {
                    taps.extend(
                        base.iter()
                            .map(|t| t.iter().map(|&(i, wt)| (ch * plane + i, wt)).collect()),
                    );
                }
            }
            Extractor::Roipool => {
                let bins = roipool_bins(h, w, &fb, out);
                let data = graph.value(features).data();
                for ch in 0..c {
                    for cells in &bins {
                        // First maximal cell in row-major order.
                        let best = cells
                            .iter()
                            .map(|&i| ch * plane + i)
                            .fold(None::<usize>, |acc, i| match acc {
                                Some(j) if data[j] >= data[i] => Some(j),
                                _ => Some(i),
                            });
                        taps.push(best.map(|i| vec![(i, 1.0)]).unwrap_or_default());
                    }
                }
            }
            other => {
                return Err(Error::InvalidArgument(format!("{} is not a crop extractor", other.name())))
            }
        }
    }
    graph.sparse_linear(features, taps, [boxes.len(), c, out, out])
}

/// Per-cell supervision for one proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct SegTarget {
    pub target: Vec<f64>,
    /// Cells that contribute to the loss.
    pub mask: Vec<bool>,
}

impl SegTarget {
    pub fn supervised(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Full-frame supervision, supervised where the RoI mask is non-zero. A
    /// cell's target is 1 when most pixels of the cell that lie inside `bbox`
    /// belong to `gt`.
    pub fn full_frame(roi: &RoiMask, gt: &BinaryMask, bbox: &BoxXYXY, stride: usize) -> Self {
        let (h, w) = (roi.height(), roi.width());
        let s = stride as f64;
        let mut target = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let cell = BoxXYXY {
                    x0: (j as f64 * s).max(bbox.x0),
                    y0: (i as f64 * s).max(bbox.y0),
                    x1: ((j + 1) as f64 * s).min(bbox.x1),
                    y1: ((i + 1) as f64 * s).min(bbox.y1),
                };
                target.push(if majority(gt, &cell) { 1.0 } else { 0.0 });
            }
        }
        let mask = roi.values().iter().map(|&v| v != 0).collect();
        Self { target, mask }
    }

    /// Crop supervision over `size × size` bins spanning the box, by the same
    /// majority rule; every bin is supervised.
    pub fn roi_grid(bbox: &BoxXYXY, size: usize, gt: &BinaryMask) -> Self {
        let (bw, bh) = (bbox.width() / size as f64, bbox.height() / size as f64);
        let mut target = Vec::with_capacity(size * size);
        for py in 0..size {
            for px in 0..size {
                let bin = BoxXYXY {
                    x0: bbox.x0 + px as f64 * bw,
                    y0: bbox.y0 + py as f64 * bh,
                    x1: bbox.x0 + (px + 1) as f64 * bw,
                    y1: bbox.y0 + (py + 1) as f64 * bh,
                };
                target.push(if majority(gt, &bin) { 1.0 } else { 0.0 });
            }
        }
        Self {
            target,
            mask: vec![true; size * size],
        }
    }

    pub fn for_proposal(fwd: &SegForward, k: usize, gt: &BinaryMask) -> Self {
        match (fwd.layout, &fwd.masks[k]) {
            (LogitLayout::FullFrame { stride }, Some(roi)) => Self::full_frame(roi, gt, &fwd.boxes[k], stride),
            (LogitLayout::RoiGrid { size }, _) => Self::roi_grid(&fwd.boxes[k], size, gt),
            (LogitLayout::FullFrame { .. }, None) => unreachable!("full-frame layout always carries masks"),
        }
    }
}

/// More than half of the pixels whose centres fall in `region` are set in
/// `gt`. A region holding no pixel centre falls back to sampling its centre;
/// an empty region is background.
fn majority(gt: &BinaryMask, region: &BoxXYXY) -> bool {
    if region.x1 <= region.x0 || region.y1 <= region.y0 {
        return false;
    }
    let (mut on, mut total) = (0usize, 0usize);
    let xs = (region.x0 - 0.5).ceil().max(0.0) as usize..((region.x1 - 0.5).ceil().max(0.0) as usize).min(gt.width());
    let ys = (region.y0 - 0.5).ceil().max(0.0) as usize..((region.y1 - 0.5).ceil().max(0.0) as usize).min(gt.height());
    for y in ys {
        for x in xs.clone() {
            total += 1;
            on += usize::from(gt.get(x, y));
        }
    }
    if total == 0 {
        let (cx, cy) = region.center();
        return gt.sample(cx, cy);
    }
    2 * on > total
}

/// Adds the segmentation loss node (mean over proposals of the mean BCE over
/// each proposal's supervised cells) to the graph.
pub fn seg_loss_node(graph: &mut Graph, fwd: &SegForward, targets: &[SegTarget]) -> Result<NodeId> {
    let [n, _, h, w] = graph.value(fwd.logits).shape();
    if targets.len() != n {
        return Err(Error::InvalidArgument(format!("{n} proposals but {} targets", targets.len())));
    }
    let used = targets.iter().filter(|t| t.supervised() > 0).count();
    let mut target = Vec::with_capacity(n * h * w);
    let mut weight = Vec::with_capacity(n * h * w);
    for (k, t) in targets.iter().enumerate() {
        if t.target.len() != h * w {
            return Err(Error::shape("seg_loss_node", &[h, w], &[t.target.len()]));
        }
        let cnt = t.supervised();
        if cnt == 0 {
            log::warn!("seg loss: proposal {k} has an empty supervised region, skipped");
        }
        let wt = if cnt == 0 { 0.0 } else { 1.0 / (cnt as f64 * used as f64) };
        target.extend_from_slice(&t.target);
        weight.extend(t.mask.iter().map(|&m| if m { wt } else { 0.0 }));
    }
    graph.bce_with_logits(fwd.logits, target, weight)
}

/// Binary image-resolution mask: sigmoid > `threshold`, restricted to pixels
/// whose centre lies in the proposal box, nearest-neighbour upsampled.
pub fn logits_to_instance_mask(logits: &InstanceLogits, image_h: usize, image_w: usize, threshold: f64) -> BinaryMask {
    let mut m = BinaryMask::new(image_w, image_h);
    let b = logits.bbox;
    for y in 0..image_h {
        let cy = y as f64 + 0.5;
        for x in 0..image_w {
            let cx = x as f64 + 0.5;
            if !b.contains(cx, cy) {
                continue;
            }
            let idx = match logits.layout {
                LogitLayout::FullFrame { stride } => {
                    let (i, j) = (y / stride, x / stride);
                    if i >= logits.height || j >= logits.width {
                        continue;
                    }
                    i * logits.width + j
                }
                LogitLayout::RoiGrid { size } => {
                    let px = (((cx - b.x0) / b.width()) * size as f64).floor() as usize;
                    let py = (((cy - b.y0) / b.height()) * size as f64).floor() as usize;
                    py.min(size - 1) * size + px.min(size - 1)
                }
            };
            if loss::sigmoid(logits.values[idx]) > threshold {
                m.set(x, y, true);
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor4D;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(extractor: Extractor) -> SegBranchConfig {
        SegBranchConfig {
            compress_channels: 3,
            wide_channels: 4,
            narrow_channels: 2,
            dilation: 2,
            extractor,
            roi_output_size: 3,
        }
    }

    fn setup(extractor: Extractor) -> (ParamStore, Tensor4D) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        register_segbranch(&mut store, &mut rng, &small_cfg(extractor), 2).unwrap();
        let lat = Tensor4D::from_vec(
            [1, 2, 8, 8],
            (0..128).map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0).collect(),
        )
        .unwrap();
        (store, lat)
    }

    #[test]
    fn output_keeps_lateral_resolution() {
        let (store, lat) = setup(Extractor::RoimaskingTernary);
        let boxes = [
            BoxXYXY::new(3.0, 5.0, 60.0, 20.0).unwrap(),
            BoxXYXY::new(10.0, 10.0, 18.0, 50.0).unwrap(),
        ];
        let mut g = Graph::new();
        let x = g.constant(lat);
        let f = seg_forward(&mut g, Weights::frozen(&store), x, &boxes, &small_cfg(Extractor::RoimaskingTernary), &MaskConfig::default()).unwrap();
        assert_eq!(g.value(f.logits).shape(), [2, 1, 8, 8]);
    }

    #[test]
    fn identical_boxes_identical_logits() {
        let (store, lat) = setup(Extractor::RoimaskingTernary);
        let b = BoxXYXY::new(8.0, 8.0, 40.0, 30.0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(lat);
        let f = seg_forward(&mut g, Weights::frozen(&store), x, &[b, b], &small_cfg(Extractor::RoimaskingTernary), &MaskConfig::default()).unwrap();
        let l = f.instance_logits(&g);
        assert_eq!(l[0].values, l[1].values);
    }

    #[test]
    fn empty_box_list_rejected() {
        let (store, lat) = setup(Extractor::RoimaskingBinary);
        let mut g = Graph::new();
        let x = g.constant(lat);
        assert!(seg_forward(&mut g, Weights::frozen(&store), x, &[], &small_cfg(Extractor::RoimaskingBinary), &MaskConfig::default()).is_err());
    }

    #[test]
    fn crop_baselines_have_fixed_size() {
        for kind in [Extractor::Roialign, Extractor::Roipool] {
            let (store, lat) = setup(kind);
            let mut g = Graph::new();
            let x = g.constant(lat);
            let b = BoxXYXY::new(4.0, 4.0, 50.0, 30.0).unwrap();
            let f = seg_forward(&mut g, Weights::frozen(&store), x, &[b], &small_cfg(kind), &MaskConfig::default()).unwrap();
            assert_eq!(g.value(f.logits).shape(), [1, 1, 3, 3]);
        }
    }

    #[test]
    fn constant_features_pool_to_constant() {
        for kind in [Extractor::Roialign, Extractor::Roipool] {
            let mut g = Graph::new();
            let x = g.constant(Tensor4D::full([1, 2, 8, 8], 1.25));
            let b = BoxXYXY::new(5.0, 9.0, 47.0, 61.0).unwrap();
            let y = baseline_extract(&mut g, x, &[b], kind, 4, 8).unwrap();
            assert!(g.value(y).data().iter().all(|&v| (v - 1.25).abs() < 1e-12), "{kind:?}");
        }
    }

    #[test]
    fn align_equals_pool_on_single_cell_bins_of_affine_map() {
        // On an affine feature map the symmetric 2x2 bilinear average of a
        // one-cell bin is that cell's value, which is also its max.
        let data: Vec<f64> = (0..64).map(|i| 0.3 * (i / 8) as f64 - 0.7 * (i % 8) as f64 + 2.0).collect();
        let b = BoxXYXY::new(8.0, 16.0, 40.0, 48.0).unwrap();
        let mut out = Vec::new();
        for kind in [Extractor::Roialign, Extractor::Roipool] {
            let mut g = Graph::new();
            let x = g.constant(Tensor4D::from_vec([1, 1, 8, 8], data.clone()).unwrap());
            let y = baseline_extract(&mut g, x, &[b], kind, 4, 8).unwrap();
            out.push(g.value(y).data().to_vec());
        }
        for (a, p) in out[0].iter().zip(&out[1]) {
            assert!((a - p).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_samples_match_direct_interpolation() {
        let (h, w) = (5usize, 7usize);
        let f = |i: usize, j: usize| ((i * 31 + j * 7) % 11) as f64 * 0.5 - 1.0;
        let direct = |y: f64, x: f64| {
            // cell centres at (i + 0.5, j + 0.5)
            let (u, v) = ((y - 0.5).clamp(0.0, (h - 1) as f64), (x - 0.5).clamp(0.0, (w - 1) as f64));
            let (i0, j0) = (u.floor() as usize, v.floor() as usize);
            let (i1, j1) = ((i0 + 1).min(h - 1), (j0 + 1).min(w - 1));
            let (a, b) = (u - i0 as f64, v - j0 as f64);
            (1.0 - a) * (1.0 - b) * f(i0, j0) + (1.0 - a) * b * f(i0, j1) + a * (1.0 - b) * f(i1, j0) + a * b * f(i1, j1)
        };
        let bx = BoxXYXY::new(0.3, 1.1, 6.2, 4.7).unwrap();
        let out = 3;
        let taps = roialign_taps(h, w, &bx, out);
        for py in 0..out {
            for px in 0..out {
                let mut want = 0.0;
                for sy in [0.25, 0.75] {
                    for sx in [0.25, 0.75] {
                        let y = bx.y0 + (py as f64 + sy) * bx.height() / out as f64;
                        let x = bx.x0 + (px as f64 + sx) * bx.width() / out as f64;
                        want += 0.25 * direct(y, x);
                    }
                }
                let got: f64 = taps[py * out + px].iter().map(|&(i, wt)| wt * f(i / w, i % w)).sum();
                assert!((got - want).abs() < 1e-9, "bin ({py},{px})");
            }
        }
    }

    #[test]
    fn logits_to_mask_extremes() {
        let b = BoxXYXY::new(8.0, 16.0, 30.0, 40.0).unwrap();
        let mut l = InstanceLogits {
            values: vec![f64::NEG_INFINITY; 64],
            height: 8,
            width: 8,
            bbox: b,
            layout: LogitLayout::FullFrame { stride: 8 },
        };
        assert!(logits_to_instance_mask(&l, 64, 64, 0.5).is_empty());
        l.values = vec![f64::INFINITY; 64];
        assert_eq!(logits_to_instance_mask(&l, 64, 64, 0.5), BinaryMask::from_box(64, 64, &b));
        l.layout = LogitLayout::RoiGrid { size: 8 };
        assert_eq!(logits_to_instance_mask(&l, 64, 64, 0.5), BinaryMask::from_box(64, 64, &b));
    }

    #[test]
    fn extractor_names_round_trip() {
        for e in Extractor::ALL {
            assert_eq!(e.name().parse::<Extractor>().unwrap(), e);
        }
        assert!("roi".parse::<Extractor>().is_err());
    }
}
