//! RoI masking: instead of cropping and resampling a region, the feature map is
//! multiplied by a per-cell map that is `+1` inside the box, `-1` in a band
//! around it (ternary mode) and `0` elsewhere. Resolution and aspect ratio of
//! the features are untouched.
//!
//! Region membership is decided on continuous coordinates: a feature cell
//! `(i, j)` belongs to a box iff its centre `(j + 0.5, i + 0.5)` lies in the
//! half-open box `[x0, x1) × [y0, y1)` after dividing the image box by the
//! stride. Nothing is rounded beforehand.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor4D};

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxXYXY {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxXYXY {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        if !b.is_valid() {
            return Err(Error::InvalidArgument(format!(
                "box ({x0}, {y0}, {x1}, {y1}) must be finite with x1 > x0 and y1 > y0"
            )));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
            && self.x1 > self.x0
            && self.y1 > self.y0
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        (self.width().max(0.0)) * (self.height().max(0.0))
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            x0: self.x0 * factor,
            y0: self.y0 * factor,
            x1: self.x1 * factor,
            y1: self.y1 * factor,
        }
    }

    /// Grows each side by `alpha` times the box extent on that axis.
    pub fn expanded(&self, alpha: f64) -> Self {
        let (dx, dy) = (alpha * self.width(), alpha * self.height());
        Self {
            x0: self.x0 - dx,
            y0: self.y0 - dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    pub fn clipped(&self, width: f64, height: f64) -> Self {
        Self {
            x0: self.x0.clamp(0.0, width),
            y0: self.y0.clamp(0.0, height),
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
        }
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    /// Whether the point lies in the half-open box.
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn hflip(&self, image_width: f64) -> Self {
        Self {
            x0: image_width - self.x1,
            y0: self.y0,
            x1: image_width - self.x0,
            y1: self.y1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Binary,
    ExpandedBinary,
    Ternary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub mode: MaskMode,
    pub alpha: f64,
    pub stride: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mode: MaskMode::Ternary,
            alpha: 1.0 / 3.0,
            stride: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Inner,
    Band,
    Exterior,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiMask {
    height: usize,
    width: usize,
    regions: Vec<Region>,
    values: Vec<i8>,
    pub mode: MaskMode,
    pub alpha: f64,
    /// Box in feature coordinates.
    pub inner_box: BoxXYXY,
    /// Expanded box in feature coordinates, clipped to the feature extent.
    pub outer_box: BoxXYXY,
    /// No cell centre fell inside the inner box.
    pub empty_interior: bool,
}

/// Builds the mask for `bbox` (image pixels) on a `feat_h × feat_w` grid.
pub fn make_mask(bbox: &BoxXYXY, config: &MaskConfig, feat_h: usize, feat_w: usize) -> Result<RoiMask> {
    if !bbox.is_valid() {
        return Err(Error::InvalidArgument(format!("degenerate box {bbox:?}")));
    }
    if config.stride == 0 || !(config.alpha >= 0.0) || !config.alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "mask config needs stride >= 1 and finite alpha >= 0, got {config:?}"
        )));
    }
    if feat_h == 0 || feat_w == 0 {
        return Err(Error::InvalidArgument("empty feature grid".into()));
    }
    let inner = bbox.scaled(1.0 / config.stride as f64);
    let outer = inner.expanded(config.alpha).clipped(feat_w as f64, feat_h as f64);

    let mut regions = Vec::with_capacity(feat_h * feat_w);
    let mut any_inner = false;
    for i in 0..feat_h {
        let cy = i as f64 + 0.5;
        for j in 0..feat_w {
            let cx = j as f64 + 0.5;
            let r = if inner.contains(cx, cy) {
                any_inner = true;
                Region::Inner
            } else if outer.contains(cx, cy) {
                Region::Band
            } else {
                Region::Exterior
            };
            regions.push(r);
        }
    }
    let values = regions.iter().map(|&r| region_value(config.mode, r)).collect();
    Ok(RoiMask {
        height: feat_h,
        width: feat_w,
        regions,
        values,
        mode: config.mode,
        alpha: config.alpha,
        inner_box: inner,
        outer_box: outer,
        empty_interior: !any_inner,
    })
}

fn region_value(mode: MaskMode, region: Region) -> i8 {
    match (mode, region) {
        (_, Region::Inner) => 1,
        (MaskMode::Ternary, Region::Band) => -1,
        (MaskMode::ExpandedBinary, Region::Band) => 1,
        _ => 0,
    }
}

impl RoiMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn value(&self, i: usize, j: usize) -> i8 {
        self.values[i * self.width + j]
    }

    pub fn region(&self, i: usize, j: usize) -> Region {
        self.regions[i * self.width + j]
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    /// Cells with a non-zero multiplier.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.values.iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i)
    }

    pub fn count(&self, region: Region) -> usize {
        self.regions.iter().filter(|&&r| r == region).count()
    }

    /// `-1 / 0 / +1` as `0 / 128 / 255` in a binary PGM.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|&v| match v {
            -1 => 0u8,
            0 => 128,
            _ => 255,
        }));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn check_mask_size(features: [usize; 4], mask: &RoiMask) -> Result<()> {
    if features[2] != mask.height || features[3] != mask.width {
        return Err(Error::shape(
            "apply_mask",
            &features,
            &[mask.height, mask.width],
        ));
    }
    Ok(())
}

/// Eager per-channel multiply of every batch item by `mask`.
pub fn apply_mask(features: &Tensor4D, mask: &RoiMask) -> Result<Tensor4D> {
    let shape = features.shape();
    check_mask_size(shape, mask)?;
    let plane = mask.height * mask.width;
    let data = features
        .data()
        .chunks(plane)
        .flat_map(|p| p.iter().zip(&mask.values).map(|(x, &m)| x * f64::from(m)))
        .collect();
    Tensor4D::from_vec(shape, data)
}

/// Differentiable masking of a batch-1 feature node, producing one output
/// item per mask (batch dimension = proposals).
pub fn apply_masks(graph: &mut Graph, features: NodeId, masks: &[RoiMask]) -> Result<NodeId> {
    let shape = graph.value(features).shape();
    if masks.is_empty() {
        return Err(Error::InvalidArgument("apply_masks needs at least one mask".into()));
    }
    let mut planes = Vec::with_capacity(masks.len() * shape[2] * shape[3]);
    for m in masks {
        check_mask_size(shape, m)?;
        planes.extend(m.values.iter().map(|&v| f64::from(v)));
    }
    graph.mask_mul(features, planes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: MaskMode, alpha: f64) -> MaskConfig {
        MaskConfig { mode, alpha, stride: 8 }
    }

    fn rect_count(m: &RoiMask, v: i8) -> usize {
        m.values().iter().filter(|&&x| x == v).count()
    }

    #[test]
    fn box_at_origin_clips_band_on_top_left() {
        let b = BoxXYXY::new(0.0, 0.0, 240.0, 240.0).unwrap();
        let m = make_mask(&b, &cfg(MaskMode::Ternary, 1.0 / 3.0), 60, 60).unwrap();
        assert_eq!(rect_count(&m, 1), 30 * 30);
        // Outer extent is 50 wide before clipping; the left/top 10 cells fall off the map.
        assert_eq!(rect_count(&m, 1) + rect_count(&m, -1), 40 * 40);
        assert_eq!(m.value(0, 0), 1);
        assert_eq!(m.value(29, 29), 1);
        assert_eq!(m.value(39, 39), -1);
        assert_eq!(m.value(40, 0), 0);
        assert_eq!(m.value(0, 40), 0);
    }

    #[test]
    fn interior_box_has_ten_cell_band_on_each_side() {
        let b = BoxXYXY::new(80.0, 80.0, 320.0, 320.0).unwrap();
        let m = make_mask(&b, &cfg(MaskMode::Ternary, 1.0 / 3.0), 60, 60).unwrap();
        assert_eq!(rect_count(&m, 1), 30 * 30);
        assert_eq!(rect_count(&m, 1) + rect_count(&m, -1), 50 * 50);
        for i in 0..60 {
            for j in 0..60 {
                let inner = (10..40).contains(&i) && (10..40).contains(&j);
                let outer = i < 50 && j < 50;
                let want = if inner { 1 } else if outer { -1 } else { 0 };
                assert_eq!(m.value(i, j), want, "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn zero_alpha_ternary_equals_binary() {
        let b = BoxXYXY::new(13.0, 21.5, 47.0, 60.0).unwrap();
        let t = make_mask(&b, &cfg(MaskMode::Ternary, 0.0), 8, 8).unwrap();
        let bi = make_mask(&b, &cfg(MaskMode::Binary, 0.0), 8, 8).unwrap();
        assert_eq!(t.values(), bi.values());
    }

    #[test]
    fn full_image_box_is_all_ones() {
        let b = BoxXYXY::new(0.0, 0.0, 64.0, 64.0).unwrap();
        let m = make_mask(&b, &cfg(MaskMode::Ternary, 1.0 / 3.0), 8, 8).unwrap();
        assert!(m.values().iter().all(|&v| v == 1));
    }

    #[test]
    fn expanded_binary_covers_band_with_ones() {
        let b = BoxXYXY::new(16.0, 16.0, 48.0, 48.0).unwrap();
        let e = make_mask(&b, &cfg(MaskMode::ExpandedBinary, 0.5), 8, 8).unwrap();
        let t = make_mask(&b, &cfg(MaskMode::Ternary, 0.5), 8, 8).unwrap();
        for (a, b) in e.values().iter().zip(t.values()) {
            assert_eq!(*a, b.abs());
        }
    }

    #[test]
    fn tiny_box_flags_empty_interior() {
        let b = BoxXYXY::new(1.0, 1.0, 3.0, 3.0).unwrap();
        let m = make_mask(&b, &cfg(MaskMode::Ternary, 1.0 / 3.0), 8, 8).unwrap();
        assert!(m.empty_interior);
        assert_eq!(rect_count(&m, 1), 0);
    }

    #[test]
    fn apply_mask_ternary_on_nonnegative_features() {
        let b = BoxXYXY::new(16.0, 16.0, 40.0, 40.0).unwrap();
        let m = make_mask(&b, &cfg(MaskMode::Ternary, 1.0 / 3.0), 8, 8).unwrap();
        let data: Vec<f64> = (0..2 * 64).map(|i| (i % 7) as f64 + 0.5).collect();
        let f = Tensor4D::from_vec([1, 2, 8, 8], data).unwrap();
        let out = apply_mask(&f, &m).unwrap();
        for c in 0..2 {
            for i in 0..8 {
                for j in 0..8 {
                    let (x, y) = (f.at(0, c, i, j), out.at(0, c, i, j));
                    match m.region(i, j) {
                        Region::Inner => assert_eq!(y, x),
                        Region::Band => assert!(y <= 0.0 && y == -x),
                        Region::Exterior => assert_eq!(y, 0.0),
                    }
                }
            }
        }
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let b = BoxXYXY::new(0.0, 0.0, 64.0, 64.0).unwrap();
        let m = make_mask(&b, &cfg(MaskMode::Binary, 0.0), 8, 8).unwrap();
        let f = Tensor4D::from_vec([1, 3, 8, 8], (0..192).map(|i| i as f64 - 50.0).collect()).unwrap();
        assert_eq!(apply_mask(&f, &m).unwrap(), f);
    }

    #[test]
    fn size_mismatch_rejected() {
        let b = BoxXYXY::new(0.0, 0.0, 32.0, 32.0).unwrap();
        let m = make_mask(&b, &MaskConfig::default(), 8, 8).unwrap();
        let f = Tensor4D::zeros([1, 1, 4, 8]);
        assert!(matches!(apply_mask(&f, &m), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn pgm_levels() {
        let b = BoxXYXY::new(16.0, 16.0, 32.0, 32.0).unwrap();
        let m = make_mask(&b, &cfg(MaskMode::Ternary, 0.5), 8, 8).unwrap();
        let pgm = m.to_pgm();
        let header = b"P5\n8 8\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        let body = &pgm[header.len()..];
        assert_eq!(body.len(), 64);
        for (p, &v) in body.iter().zip(m.values()) {
            assert_eq!(*p, [0u8, 128, 255][(v + 1) as usize]);
        }
        assert_eq!(m.to_csv().lines().count(), 8);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BoxXYXY::new(5.0, 0.0, 5.0, 1.0).is_err());
        assert!(BoxXYXY::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }
}
