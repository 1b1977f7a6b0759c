//! Shared checks for the integration and acceptance suites. Every reference
//! implementation here is written from the definition, without calling the
//! library routine it is compared against.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use salseg::data::{self, SynthConfig};
use salseg::detector::{self, BackboneConfig, MatchResult, Proposal};
use salseg::eval::{self, Detection, GtInstance};
use salseg::loss;
use salseg::model::{self, ModelConfig};
use salseg::nn::Weights;
use salseg::raster::BinaryMask;
use salseg::roimask::{self, BoxXYXY, MaskConfig, MaskMode, Region};
use salseg::segbranch::{self, Extractor, SegBranchConfig};
use salseg::tensor::{finite_diff_check, GradCheckReport, Graph, NodeId, ParamStore, Tensor4D};
use salseg::Result;

pub const GRAD_EPS: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- gradients

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4D {
    let n = shape.iter().product();
    Tensor4D::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Deterministic scalar readout of an arbitrary node, so that every output
/// entry gets its own non-trivial weight.
fn readout(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let n = g.value(x).numel();
    let target = (0..n).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
    let weight = (0..n).map(|i| 0.3 + ((i * 53) % 17) as f64 / 17.0).collect();
    g.bce_with_logits(x, target, weight)
}

fn check_all(store: &ParamStore, build: impl Fn(&ParamStore) -> Result<(Graph, NodeId)> + Copy, max_entries: usize) -> Result<Vec<(String, GradCheckReport)>> {
    store
        .iter()
        .map(|(name, _)| Ok((name.to_string(), finite_diff_check(store, name, GRAD_EPS, max_entries, build)?)))
        .collect()
}

fn store_of(rng: &mut ChaCha8Rng, tensors: &[(&str, [usize; 4])]) -> ParamStore {
    let mut s = ParamStore::new();
    for &(name, shape) in tensors {
        s.insert(name, random_tensor(rng, shape)).unwrap();
    }
    s
}

type Check = (String, GradCheckReport);

/// Finite-difference checks of every differentiable graph operation, each
/// composed with a smooth readout where the op is not itself a loss.
pub fn op_gradchecks() -> Result<Vec<Check>> {
    let mut rng = rng(7);
    let mut out = Vec::new();
    let mut push = |op: &str, checks: Vec<Check>| {
        out.extend(checks.into_iter().map(|(p, r)| (format!("{op}/{p}"), r)));
    };

    for &(stride, dilation, padding, k) in &[(1, 1, 1, 3), (2, 1, 1, 3), (1, 2, 2, 3), (1, 1, 0, 1), (2, 1, 0, 1)] {
        let s = store_of(&mut rng, &[("x", [1, 3, 9, 9]), ("w", [4, 3, k, k]), ("b", [1, 4, 1, 1])]);
        let checks = check_all(
            &s,
            move |s| {
                let mut g = Graph::new();
                let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
                let y = g.conv2d(x, w, Some(b), stride, dilation, padding)?;
                let r = readout(&mut g, y)?;
                Ok((g, r))
            },
            400,
        )?;
        push(&format!("conv2d[s{stride},d{dilation},p{padding},k{k}]"), checks);
    }

    let s = store_of(&mut rng, &[("x", [2, 2, 5, 5])]);
    type Unary = fn(&mut Graph, NodeId) -> Result<NodeId>;
    let unary: [(&str, Unary); 5] = [
        ("relu", |g, x| Ok(g.relu(x))),
        ("sigmoid", |g, x| Ok(g.sigmoid(x))),
        ("maxpool[k3,s2,p1]", |g, x| g.maxpool2d(x, 3, 2, 1)),
        ("maxpool[k2,s2,p0]", |g, x| g.maxpool2d(x, 2, 2, 0)),
        ("upsample2x", |g, x| Ok(g.upsample_nearest2x(x))),
    ];
    for (name, op) in unary {
        let checks = check_all(
            &s,
            move |s| {
                let mut g = Graph::new();
                let x = g.param(s, "x")?;
                let y = op(&mut g, x)?;
                let r = readout(&mut g, y)?;
                Ok((g, r))
            },
            100,
        )?;
        push(name, checks);
    }

    let s = store_of(&mut rng, &[("a", [1, 2, 4, 4]), ("b", [1, 2, 4, 4])]);
    type Binary = fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>;
    let binary: [(&str, Binary); 3] = [
        ("add", |g, a, b| g.add(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
        ("mul_self", |g, a, _| g.mul(a, a)),
    ];
    for (name, op) in binary {
        let checks = check_all(
            &s,
            move |s| {
                let mut g = Graph::new();
                let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
                let y = op(&mut g, a, b)?;
                let r = readout(&mut g, y)?;
                Ok((g, r))
            },
            100,
        )?;
        push(name, checks);
    }

    // Two ternary masks over one replicated input.
    let s = store_of(&mut rng, &[("x", [1, 3, 8, 8])]);
    let masks: Vec<f64> = [BoxXYXY::new(8.0, 8.0, 40.0, 32.0).unwrap(), BoxXYXY::new(0.0, 20.0, 30.0, 64.0).unwrap()]
        .iter()
        .flat_map(|b| roimask::make_mask(b, &MaskConfig::default(), 8, 8).unwrap().as_f64())
        .collect();
    let checks = check_all(
        &s,
        |s| {
            let mut g = Graph::new();
            let x = g.param(s, "x")?;
            let y = g.mask_mul(x, masks.clone())?;
            let r = readout(&mut g, y)?;
            Ok((g, r))
        },
        200,
    )?;
    push("mask_mul", checks);

    let s = store_of(&mut rng, &[("x", [1, 1, 8, 8])]);
    let fbox = BoxXYXY::new(1.3, 0.7, 6.2, 5.9).unwrap();
    let taps = segbranch::roialign_taps(8, 8, &fbox, 7);
    let checks = check_all(
        &s,
        |s| {
            let mut g = Graph::new();
            let x = g.param(s, "x")?;
            let y = g.sparse_linear(x, taps.clone(), [1, 1, 7, 7])?;
            let r = readout(&mut g, y)?;
            Ok((g, r))
        },
        100,
    )?;
    push("sparse_linear", checks);

    let s = store_of(&mut rng, &[("a", [1, 2, 3, 3]), ("b", [1, 1, 2, 2])]);
    let index = vec![(0, 3), (1, 0), (0, 17), (1, 3), (0, 3)];
    let checks = check_all(
        &s,
        |s| {
            let mut g = Graph::new();
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            let y = g.gather(vec![a, b], index.clone())?;
            let r = readout(&mut g, y)?;
            Ok((g, r))
        },
        100,
    )?;
    push("gather", checks);

    let s = store_of(&mut rng, &[("z", [1, 1, 1, 12])]);
    let checks = check_all(
        &s,
        |s| {
            let mut g = Graph::new();
            let z = g.param(s, "z")?;
            let r = g.objectness_loss(z, vec![1, 4, 7], vec![0, 2, 3, 5, 8, 9, 10])?;
            Ok((g, r))
        },
        100,
    )?;
    push("objectness", checks);

    let mut s = ParamStore::new();
    // Residuals kept away from the ±1 seam.
    s.insert("p", Tensor4D::from_vec([1, 1, 1, 6], vec![0.3, -0.4, 2.5, -1.7, 0.05, 3.0]).unwrap())
        .unwrap();
    let checks = check_all(
        &s,
        |s| {
            let mut g = Graph::new();
            let p = g.param(s, "p")?;
            let r = g.smooth_l1(p, vec![0.1, 0.2, 0.0, 0.0, -0.5, 1.0], 0.5)?;
            Ok((g, r))
        },
        100,
    )?;
    push("smooth_l1", checks);

    let s = store_of(&mut rng, &[("z", [1, 1, 3, 4])]);
    let checks = check_all(
        &s,
        |s| {
            let mut g = Graph::new();
            let z = g.param(s, "z")?;
            let t = (0..12).map(|i| (i % 2) as f64).collect();
            let w = (0..12).map(|i| if i == 5 { 0.0 } else { 1.0 / 11.0 }).collect();
            let r = g.bce_with_logits(z, t, w)?;
            Ok((g, r))
        },
        100,
    )?;
    push("bce_with_logits", checks);

    Ok(out)
}

pub fn toy_model_config(extractor: Extractor) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            stem_channels: 3,
            stage_channels: [4, 4, 4, 4],
            lateral_channels: 4,
        },
        seg: SegBranchConfig {
            compress_channels: 4,
            wide_channels: 4,
            narrow_channels: 3,
            extractor,
            ..SegBranchConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Checks of the full training loss against every parameter tensor of a
/// narrow model, once per extractor.
pub fn model_gradchecks(entries_per_tensor: usize) -> Result<Vec<Check>> {
    let sample = data::synth_generate(&SynthConfig { seed: 5, ..SynthConfig::default() }, 1)?.remove(0);
    let mut out = Vec::new();
    for (i, ex) in Extractor::ALL.into_iter().enumerate() {
        let cfg = toy_model_config(ex);
        let m = model::Model::init(cfg.clone(), 100 + i as u64)?;
        let checks = check_all(
            &m.params,
            |s| {
                let (g, nodes, _) = model::forward_loss(&cfg, Weights::trainable(s), &sample, 0.5, 0.5)?;
                Ok((g, nodes.total))
            },
            entries_per_tensor,
        )?;
        out.extend(checks.into_iter().map(|(p, r)| (format!("model[{}]/{p}", ex.name()), r)));
    }
    Ok(out)
}

/// Failing checks, formatted; an empty vector means every check passed.
pub fn grad_failures(checks: &[Check]) -> Vec<String> {
    checks
        .iter()
        .filter(|(_, r)| !(r.max_rel_error < GRAD_TOL))
        .map(|(n, r)| format!("{n}: rel err {:.3e} at entry {}", r.max_rel_error, r.worst_entry))
        .collect()
}

// ---------------------------------------------------------------- masks

pub fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> BoxXYXY {
    let x0 = rng.gen_range(-0.1 * w..w);
    let y0 = rng.gen_range(-0.1 * h..h);
    let bw = rng.gen_range(0.5..0.8 * w);
    let bh = rng.gen_range(0.5..0.8 * h);
    BoxXYXY::new(x0, y0, x0 + bw, y0 + bh).unwrap()
}

/// Reference region of feature cell `(i, j)` computed in image pixels.
fn reference_region(bbox: &BoxXYXY, alpha: f64, stride: usize, feat_h: usize, feat_w: usize, i: usize, j: usize) -> Region {
    let s = stride as f64;
    let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
    let inside = |x0: f64, y0: f64, x1: f64, y1: f64| cx >= x0 && cx < x1 && cy >= y0 && cy < y1;
    if inside(bbox.x0, bbox.y0, bbox.x1, bbox.y1) {
        return Region::Inner;
    }
    let (dx, dy) = (alpha * (bbox.x1 - bbox.x0), alpha * (bbox.y1 - bbox.y0));
    let (fw, fh) = (feat_w as f64 * s, feat_h as f64 * s);
    let ex = |v: f64, hi: f64| v.clamp(0.0, hi);
    if inside(ex(bbox.x0 - dx, fw), ex(bbox.y0 - dy, fh), ex(bbox.x1 + dx, fw), ex(bbox.y1 + dy, fh)) {
        Region::Band
    } else {
        Region::Exterior
    }
}

/// All mask invariants for one box and coefficient; returns the violations.
pub fn mask_violations(bbox: &BoxXYXY, alpha: f64, feat_h: usize, feat_w: usize) -> Vec<String> {
    let mut bad = Vec::new();
    let cfg = |mode, alpha| MaskConfig { mode, alpha, stride: 8 };
    let make = |mode, alpha| roimask::make_mask(bbox, &cfg(mode, alpha), feat_h, feat_w).unwrap();
    let t = make(MaskMode::Ternary, alpha);
    let b = make(MaskMode::Binary, alpha);
    let e = make(MaskMode::ExpandedBinary, alpha);

    for m in [&t, &b, &e] {
        if (m.height(), m.width()) != (feat_h, feat_w) || m.values().len() != feat_h * feat_w {
            bad.push(format!("{:?} mask is {}x{}, grid is {feat_h}x{feat_w}", m.mode, m.height(), m.width()));
        }
    }
    for i in 0..feat_h {
        for j in 0..feat_w {
            let want = reference_region(bbox, alpha, 8, feat_h, feat_w, i, j);
            let tv = match want {
                Region::Inner => 1,
                Region::Band => -1,
                Region::Exterior => 0,
            };
            if t.region(i, j) != want || t.value(i, j) != tv {
                bad.push(format!("cell ({i},{j}): ternary {} / {:?}, expected {tv} / {want:?}", t.value(i, j), t.region(i, j)));
            }
            if b.value(i, j) != i8::from(want == Region::Inner) {
                bad.push(format!("cell ({i},{j}): binary {}", b.value(i, j)));
            }
            if e.value(i, j) != tv.abs() {
                bad.push(format!("cell ({i},{j}): expanded {}", e.value(i, j)));
            }
        }
    }
    // Growing the coefficient only grows the band.
    let t2 = make(MaskMode::Ternary, alpha * 1.5 + 0.05);
    for (k, (&r1, &r2)) in t.regions().iter().zip(t2.regions()).enumerate() {
        let ok = match r1 {
            Region::Inner => r2 == Region::Inner,
            Region::Band => r2 == Region::Band,
            Region::Exterior => r2 != Region::Inner,
        };
        if !ok {
            bad.push(format!("cell {k}: {r1:?} became {r2:?} at larger alpha"));
        }
    }
    let t0 = make(MaskMode::Ternary, 0.0);
    if t0.values() != b.values() {
        bad.push("alpha = 0 ternary differs from binary".into());
    }
    let feats = Tensor4D::from_vec([1, 2, feat_h, feat_w], (0..2 * feat_h * feat_w).map(|v| v as f64 + 1.0).collect()).unwrap();
    let masked = roimask::apply_mask(&feats, &t).unwrap();
    if masked.shape() != feats.shape() {
        bad.push(format!("masking changed shape to {:?}", masked.shape()));
    }
    for (k, (&m, &f)) in masked.data().iter().zip(feats.data()).enumerate() {
        if m != f * f64::from(t.values()[k % (feat_h * feat_w)]) {
            bad.push(format!("masked entry {k} = {m}"));
            break;
        }
    }
    bad
}

// ---------------------------------------------------------------- oracles

fn ref_iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Repeatedly keep the best remaining box and drop everything it overlaps.
pub fn nms_reference(props: &[Proposal], thr: f64) -> Vec<Proposal> {
    let mut alive: Vec<usize> = (0..props.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let &best = alive
            .iter()
            .max_by(|&&a, &&b| props[a].score.total_cmp(&props[b].score).then(b.cmp(&a)))
            .unwrap();
        kept.push(props[best]);
        alive.retain(|&i| i != best && ref_iou(&props[i].bbox, &props[best].bbox) <= thr);
    }
    kept
}

pub fn match_reference(anchors: &[BoxXYXY], gt: &[BoxXYXY], pos: f64, neg: f64) -> MatchResult {
    let iou: Vec<Vec<f64>> = anchors.iter().map(|a| gt.iter().map(|g| ref_iou(a, g)).collect()).collect();
    let argmax = |v: &mut dyn Iterator<Item = f64>| {
        v.enumerate()
            .fold((usize::MAX, f64::NEG_INFINITY), |(bi, bv), (i, x)| if x > bv { (i, x) } else { (bi, bv) })
    };
    let mut forced = vec![None; anchors.len()];
    for g in 0..gt.len() {
        let (a, v) = argmax(&mut iou.iter().map(|row| row[g]));
        if v > 0.0 {
            forced[a] = Some(g);
        }
    }
    let mut m = MatchResult::default();
    for a in 0..anchors.len() {
        let (g_best, v) = if gt.is_empty() { (0, 0.0) } else { argmax(&mut iou[a].iter().copied()) };
        let assigned = forced[a].or((v > pos).then_some(g_best));
        if let Some(g) = assigned {
            let (an, t) = (&anchors[a], &gt[g]);
            let (aw, ah) = (an.x1 - an.x0, an.y1 - an.y0);
            m.positives.push(a);
            m.matched_gt.push(g);
            m.targets.push([
                ((t.x0 + t.x1) - (an.x0 + an.x1)) / (2.0 * aw),
                ((t.y0 + t.y1) - (an.y0 + an.y1)) / (2.0 * ah),
                ((t.x1 - t.x0) / aw).ln(),
                ((t.y1 - t.y0) / ah).ln(),
            ]);
        } else if v < neg {
            m.negatives.push(a);
        }
    }
    m
}

fn ref_mask_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut i, mut u) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        i += usize::from(x && y);
        u += usize::from(x || y);
    }
    i as f64 / u as f64
}

/// AP as the mean over counted ground truths of the best precision reached
/// at or after the rank where each one is recovered.
pub fn ap_reference(dets: &[Detection], gts: &[GtInstance], thr: f64) -> Option<f64> {
    let npos = gts.iter().filter(|g| !g.ignore).count();
    if npos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut hits: Vec<bool> = Vec::new();
    for &d in &order {
        let mut best: [Option<(usize, f64)>; 2] = [None, None];
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.image_id != dets[d].image_id {
                continue;
            }
            let v = ref_mask_iou(&dets[d].mask, &gt.mask);
            let slot = &mut best[usize::from(gt.ignore)];
            if v >= thr && slot.map_or(true, |(_, b)| v > b) {
                *slot = Some((g, v));
            }
        }
        match best {
            [Some((g, _)), _] => {
                taken[g] = true;
                hits.push(true);
            }
            [None, Some((g, _))] => taken[g] = true,
            [None, None] => hits.push(false),
        }
    }
    let mut tp = 0.0;
    let precision: Vec<f64> = hits
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            tp += f64::from(u8::from(h));
            tp / (k + 1) as f64
        })
        .collect();
    let mut ap = 0.0;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            ap += precision[k..].iter().cloned().fold(0.0, f64::max);
        }
    }
    Some(ap / npos as f64)
}

fn random_props(rng: &mut ChaCha8Rng, n: usize) -> Vec<Proposal> {
    // Clustered boxes and coarse scores so overlaps and ties are common.
    let centres: Vec<(f64, f64)> = (0..rng.gen_range(1..6)).map(|_| (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0))).collect();
    (0..n)
        .map(|_| {
            let (cx, cy) = centres[rng.gen_range(0..centres.len())];
            let (x0, y0) = (cx + rng.gen_range(-8.0..8.0), cy + rng.gen_range(-8.0..8.0));
            let (w, h) = (rng.gen_range(2.0..30.0), rng.gen_range(2.0..30.0));
            let score = if rng.gen_bool(0.3) { f64::from(rng.gen_range(0..5)) / 4.0 } else { rng.gen() };
            Proposal {
                bbox: BoxXYXY::new(x0, y0, x0 + w, y0 + h).unwrap(),
                score,
            }
        })
        .collect()
}

pub fn nms_trial(seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    let n = r.gen_range(0..=200);
    let props = random_props(&mut r, n);
    let thr = [0.3, 0.5, 0.7][r.gen_range(0..3)];
    let got = detector::nms(&props, thr);
    let want = nms_reference(&props, thr);
    if got != want {
        return Err(format!("seed {seed}: nms kept {} boxes, reference {}", got.len(), want.len()));
    }
    Ok(())
}

pub fn match_trial(seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    let (na, ng) = (r.gen_range(1..=200), r.gen_range(0..=8));
    let anchors: Vec<BoxXYXY> = random_props(&mut r, na).into_iter().map(|p| p.bbox).collect();
    let gt: Vec<BoxXYXY> = random_props(&mut r, ng).into_iter().map(|p| p.bbox).collect();
    let (pos, neg) = if r.gen_bool(0.5) { (0.5, 0.5) } else { (0.6, 0.3) };
    let got = detector::match_anchors(&anchors, &gt, pos, neg);
    let want = match_reference(&anchors, &gt, pos, neg);
    let close = got.targets.len() == want.targets.len()
        && got
            .targets
            .iter()
            .flatten()
            .zip(want.targets.iter().flatten())
            .all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    if got.positives != want.positives || got.negatives != want.negatives || got.matched_gt != want.matched_gt || !close {
        return Err(format!(
            "seed {seed}: {} pos / {} neg vs reference {} / {}",
            got.num_positive(),
            got.num_negative(),
            want.num_positive(),
            want.num_negative()
        ));
    }
    Ok(())
}

fn random_blob(rng: &mut ChaCha8Rng, size: usize) -> BinaryMask {
    let b = random_box(rng, size as f64, size as f64).clipped(size as f64, size as f64);
    let mut m = BinaryMask::from_box(size, size, &b);
    for v in m.data_mut() {
        if rng.gen_bool(0.1) {
            *v = !*v;
        }
    }
    if m.is_empty() {
        m.set(0, 0, true);
    }
    m
}

pub fn ap_trial(seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed);
    let size = 12;
    let images = r.gen_range(1..=3);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for im in 0..images {
        let id = format!("im{im}");
        let objs: Vec<BinaryMask> = (0..r.gen_range(0..=5)).map(|_| random_blob(&mut r, size)).collect();
        for m in &objs {
            gts.push(GtInstance {
                image_id: id.clone(),
                mask: m.clone(),
                ignore: r.gen_bool(0.25),
            });
        }
        for _ in 0..r.gen_range(0..=15) {
            let mask = if !objs.is_empty() && r.gen_bool(0.6) {
                let mut m = objs[r.gen_range(0..objs.len())].clone();
                for v in m.data_mut() {
                    if r.gen_bool(0.08) {
                        *v = !*v;
                    }
                }
                if m.is_empty() {
                    m.set(1, 1, true);
                }
                m
            } else {
                random_blob(&mut r, size)
            };
            let score = if r.gen_bool(0.2) { 0.5 } else { r.gen() };
            dets.push(Detection {
                image_id: id.clone(),
                mask,
                score,
            });
        }
    }
    for thr in [0.5, 0.7] {
        let got = eval::average_precision(&dets, &gts, thr).map_err(|e| e.to_string())?.map(|a| a.ap);
        let want = ap_reference(&dets, &gts, thr);
        let same = match (got, want) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-12,
            (None, None) => true,
            _ => false,
        };
        if !same {
            return Err(format!("seed {seed} thr {thr}: AP {got:?}, reference {want:?}"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- balance

/// Largest change of the objectness loss when every negative is repeated
/// `k` times, over the scalar routine and the graph op.
pub fn duplication_shift(seed: u64, k: usize) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(4..60);
    let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0.001..0.999)).collect();
    let mut m = MatchResult::default();
    for i in 0..n {
        match r.gen_range(0..3) {
            0 => m.positives.push(i),
            1 => m.negatives.push(i),
            _ => {}
        }
    }
    let mut dup_scores = scores.clone();
    let mut dup = m.clone();
    for _ in 1..k {
        for &i in &m.negatives {
            dup.negatives.push(dup_scores.len());
            dup_scores.push(scores[i]);
        }
    }
    let base = loss::objectness_loss(&scores, &m).unwrap();
    let duped = loss::objectness_loss(&dup_scores, &dup).unwrap();

    let graph_loss = |s: &[f64], m: &MatchResult| {
        let mut g = Graph::new();
        let logits = s.iter().map(|p| (p / (1.0 - p)).ln()).collect();
        let z = g.constant(Tensor4D::from_vec([1, 1, 1, s.len()], logits).unwrap());
        let l = g.objectness_loss(z, m.positives.clone(), m.negatives.clone()).unwrap();
        g.scalar(l).unwrap()
    };
    let gbase = graph_loss(&scores, &m);
    let gduped = graph_loss(&dup_scores, &dup);
    (duped - base).abs().max((gduped - gbase).abs())
}
