//! The full two-branch network: detector + segmentation branch over one shared
//! backbone, with its training objective, SGD loop and inference path.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Sample};
use crate::detector::{self, AnchorConfig, AnchorSet, BackboneConfig, MatchResult, Proposal};
use crate::error::{Error, Result};
use crate::loss::{self, LossBundle};
use crate::nn::Weights;
use crate::raster::BinaryMask;
use crate::roimask::{BoxXYXY, MaskConfig};
use crate::segbranch::{self, InstanceLogits, SegBranchConfig, SegForward, SegTarget};
use crate::tensor::params::Gradients;
use crate::tensor::{sgd_step, Graph, NodeId, OptimState, ParamStore, Tensor4D};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MODEL_CONFIG_FILE: &str = "model.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub anchors: AnchorConfig,
    pub seg: SegBranchConfig,
    pub mask: MaskConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Step at which the learning rate is divided by 10; `None` = half the run.
    pub lr_drop_step: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub hflip: bool,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 0.004,
            lr_drop_step: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            hflip: true,
            pos_iou: 0.5,
            neg_iou: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let drop = self.lr_drop_step.unwrap_or(self.steps / 2);
        if step >= drop {
            self.learning_rate / 10.0
        } else {
            self.learning_rate
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub proposals: usize,
    pub nms_iou: f64,
    pub mask_threshold: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            proposals: 20,
            nms_iou: 0.5,
            mask_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Loss nodes of one training graph.
#[derive(Clone, Debug)]
pub struct LossNodes {
    pub obj: NodeId,
    pub coord: NodeId,
    pub seg: NodeId,
    pub total: NodeId,
    pub seg_forward: SegForward,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossBundle,
    pub lr: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,L,L_obj,L_coord,L_seg,lr";

    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!("{},{},{},{},{},{}", self.step, l.total, l.obj, l.coord, l.seg, self.lr)
    }
}

/// One predicted instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub bbox: BoxXYXY,
    pub score: f64,
    pub mask: BinaryMask,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        detector::register_detector(&mut params, &mut rng, &config.backbone, config.anchors.per_cell())?;
        segbranch::register_segbranch(&mut params, &mut rng, &config.seg, config.backbone.lateral_channels)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let expected = Self::init(config.clone(), 0)?;
        for (name, t) in expected.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Config(format!(
                        "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::UnknownParameter(format!("checkpoint lacks {name}"))),
            }
        }
        if params.len() != expected.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                params.len(),
                expected.params.len()
            )));
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("checkpoint weights".into()));
        }
        Ok(Self { config, params })
    }

    /// Writes `weights.bin` and `model.toml` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let w = dir.join(WEIGHTS_FILE);
        fs::write(&w, self.params.to_bytes()).map_err(|e| Error::io(&w, e))?;
        let c = dir.join(MODEL_CONFIG_FILE);
        let text = toml::to_string_pretty(&self.config).expect("model config serializes");
        fs::write(&c, text).map_err(|e| Error::io(&c, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let c = dir.join(MODEL_CONFIG_FILE);
        let text = fs::read_to_string(&c).map_err(|e| Error::io(&c, e))?;
        let config: ModelConfig = toml::from_str(&text).map_err(|e| Error::Format {
            path: c.clone(),
            message: e.to_string(),
        })?;
        let w = dir.join(WEIGHTS_FILE);
        let bytes = fs::read(&w).map_err(|e| Error::io(&w, e))?;
        Self::from_params(config, ParamStore::from_bytes(&bytes, &w)?)
    }

    pub fn predict(&self, image: &Tensor4D, cfg: &InferConfig) -> Result<Vec<Prediction>> {
        predict(&self.config, &self.params, image, cfg)
    }

    pub fn train_step(&mut self, sample: &Sample, cfg: &TrainConfig, state: &mut OptimState) -> Result<LossBundle> {
        let (bundle, grads) = loss_and_grads(&self.config, &self.params, sample, cfg)?;
        sgd_step(&mut self.params, &grads, state)?;
        Ok(bundle)
    }
}

fn anchors_for(config: &ModelConfig, image: &Tensor4D) -> Result<AnchorSet> {
    let [_, _, h, w] = image.shape();
    AnchorSet::generate(h, w, &config.anchors)
}

fn objectness_index(anchors: &AnchorSet) -> Vec<(usize, usize)> {
    (0..anchors.len())
        .map(|i| {
            let (level, cls, _) = anchors.head_offsets(i, 0);
            (level, cls)
        })
        .collect()
}

/// Builds the training graph for one sample: ground-truth boxes feed the
/// segmentation branch.
pub fn forward_loss(
    config: &ModelConfig,
    weights: Weights<'_>,
    sample: &Sample,
    pos_iou: f64,
    neg_iou: f64,
) -> Result<(Graph, LossNodes, MatchResult)> {
    if sample.instances.is_empty() {
        return Err(Error::InvalidArgument(format!("sample {} has no instances", sample.id)));
    }
    let mut graph = Graph::new();
    let image = graph.constant(sample.image.clone());
    let laterals = detector::backbone_forward(&mut graph, weights, image)?;
    let heads = detector::detection_heads(&mut graph, weights, &laterals)?;
    let anchors = anchors_for(config, &sample.image)?;
    let gt = sample.boxes();
    let m = detector::match_anchors(&anchors.boxes, &gt, pos_iou, neg_iou);

    let cls = graph.gather(heads.cls.to_vec(), objectness_index(&anchors))?;
    let obj = graph.objectness_loss(cls, m.positives.clone(), m.negatives.clone())?;

    let coord = if m.positives.is_empty() {
        graph.constant(Tensor4D::scalar(0.0))
    } else {
        let mut index = Vec::with_capacity(4 * m.positives.len());
        for &a in &m.positives {
            for d in 0..4 {
                let (level, _, reg) = anchors.head_offsets(a, d);
                index.push((level, reg));
            }
        }
        let pred = graph.gather(heads.reg.to_vec(), index)?;
        let target = m.targets.iter().flatten().copied().collect();
        graph.smooth_l1(pred, target, 1.0 / m.positives.len() as f64)?
    };

    let fwd = segbranch::seg_forward(&mut graph, weights, laterals[0], &gt, &config.seg, &config.mask)?;
    let targets: Vec<SegTarget> = sample
        .instances
        .iter()
        .enumerate()
        .map(|(k, inst)| SegTarget::for_proposal(&fwd, k, &inst.mask))
        .collect();
    let seg = segbranch::seg_loss_node(&mut graph, &fwd, &targets)?;

    let det = graph.add(obj, coord)?;
    let total = graph.add(det, seg)?;
    Ok((
        graph,
        LossNodes {
            obj,
            coord,
            seg,
            total,
            seg_forward: fwd,
        },
        m,
    ))
}

pub fn loss_and_grads(
    config: &ModelConfig,
    params: &ParamStore,
    sample: &Sample,
    cfg: &TrainConfig,
) -> Result<(LossBundle, Gradients)> {
    let (mut graph, nodes, _) = forward_loss(config, Weights::trainable(params), sample, cfg.pos_iou, cfg.neg_iou)?;
    let bundle = loss::total_loss(
        graph.scalar(nodes.obj)?,
        graph.scalar(nodes.coord)?,
        graph.scalar(nodes.seg)?,
    )?;
    graph.backward(nodes.total)?;
    let mut grads = Gradients::new(params);
    graph.accumulate_param_grads(&mut grads);
    grads.fill_missing(params);
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!("gradients on sample {}", sample.id)));
    }
    Ok((bundle, grads))
}

/// Momentum SGD over `samples`, one image per step, reshuffled every epoch;
/// `seed` drives the order and flips. `on_step` sees every step's losses.
pub fn train<F>(model: &mut Model, samples: &[Sample], cfg: &TrainConfig, seed: u64, mut on_step: F) -> Result<()>
where
    F: FnMut(&StepLog) -> Result<()>,
{
    let usable: Vec<&Sample> = samples.iter().filter(|s| !s.instances.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument("no training samples with instances".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_7EA1);
    let mut state = OptimState::new(&model.params, cfg.learning_rate, cfg.momentum, cfg.weight_decay)?;
    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        if order.is_empty() {
            order = (0..usable.len()).collect();
            order.shuffle(&mut rng);
        }
        let sample = usable[order.pop().expect("refilled")];
        let flipped;
        let sample = if cfg.hflip && rng.gen_bool(0.5) {
            flipped = data::augment_hflip(sample);
            &flipped
        } else {
            sample
        };
        state.learning_rate = cfg.lr_at(step);
        let loss = model.train_step(sample, cfg, &mut state)?;
        on_step(&StepLog {
            step,
            loss,
            lr: state.learning_rate,
        })?;
    }
    if !model.params.all_finite() {
        return Err(Error::NonFinite("parameters after training".into()));
    }
    Ok(())
}

/// Scored, NMS-filtered top-k proposals for one image.
pub fn propose(config: &ModelConfig, params: &ParamStore, image: &Tensor4D, cfg: &InferConfig) -> Result<Vec<Proposal>> {
    let (_, _, props) = detect(config, Weights::frozen(params), image, cfg)?;
    Ok(props)
}

fn detect(
    config: &ModelConfig,
    weights: Weights<'_>,
    image: &Tensor4D,
    cfg: &InferConfig,
) -> Result<(Graph, [NodeId; 4], Vec<Proposal>)> {
    if cfg.proposals == 0 {
        return Err(Error::InvalidArgument("proposal count must be at least 1".into()));
    }
    let mut graph = Graph::new();
    let x = graph.constant(image.clone());
    let laterals = detector::backbone_forward(&mut graph, weights, x)?;
    let heads = detector::detection_heads(&mut graph, weights, &laterals)?;
    let anchors = anchors_for(config, image)?;
    let [_, _, h, w] = image.shape();
    let mut deltas = Vec::with_capacity(anchors.len());
    let mut scores = Vec::with_capacity(anchors.len());
    for i in 0..anchors.len() {
        let (level, cls, _) = anchors.head_offsets(i, 0);
        scores.push(loss::sigmoid(graph.value(heads.cls[level]).data()[cls]));
        let mut d = [0.0; 4];
        for (k, dk) in d.iter_mut().enumerate() {
            let (_, _, reg) = anchors.head_offsets(i, k);
            *dk = graph.value(heads.reg[level]).data()[reg];
        }
        deltas.push(d);
    }
    let boxes = detector::decode_boxes(&anchors.boxes, &deltas, w as f64, h as f64)?;
    let props: Vec<Proposal> = boxes
        .into_iter()
        .zip(scores)
        .filter(|(b, s)| b.is_valid() && s.is_finite())
        .map(|(bbox, score)| Proposal { bbox, score })
        .collect();
    let kept = detector::select_topk(&detector::nms(&props, cfg.nms_iou), cfg.proposals);
    Ok((graph, laterals, kept))
}

/// Detector proposals feed the segmentation branch; empty masks are dropped.
pub fn predict(config: &ModelConfig, params: &ParamStore, image: &Tensor4D, cfg: &InferConfig) -> Result<Vec<Prediction>> {
    let weights = Weights::frozen(params);
    let (mut graph, laterals, props) = detect(config, weights, image, cfg)?;
    if props.is_empty() {
        return Ok(Vec::new());
    }
    let boxes: Vec<BoxXYXY> = props.iter().map(|p| p.bbox).collect();
    let fwd = segbranch::seg_forward(&mut graph, weights, laterals[0], &boxes, &config.seg, &config.mask)?;
    let [_, _, h, w] = image.shape();
    let logits: Vec<InstanceLogits> = fwd.instance_logits(&graph);
    Ok(props
        .iter()
        .zip(&logits)
        .map(|(p, l)| Prediction {
            bbox: p.bbox,
            score: p.score,
            mask: segbranch::logits_to_instance_mask(l, h, w, cfg.mask_threshold),
        })
        .filter(|p| !p.mask.is_empty())
        .collect())
}

/// Mask config actually used by the segmentation branch for this model.
pub fn effective_mask_config(config: &ModelConfig) -> Option<MaskConfig> {
    config.seg.extractor.mask_mode().map(|mode| MaskConfig { mode, ..config.mask })
}
