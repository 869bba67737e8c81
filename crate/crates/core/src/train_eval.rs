//! Combined objective, RMSProp training and evaluation metrics.

use std::fmt;
use std::io::Write;

use dualcorr_numcore::{finite_diff_check, GradCheckReport, Graph, Tensor, Var, DEFAULT_EPS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::{cross_loss_graph, inter_loss_graph, CorrespondenceConfig, CrossSelect, InterMode};
use crate::encoders::{QueryTokens, VideoClip};
use crate::error::{Error, Result};
use crate::grounding::{cls_loss_graph, iou, loc_loss_graph, BBox, GroundTruthBox};
use crate::model::{forward_graph, run_clip, ClipForward, ModelConfig, ModelParams, ModelVars};
use crate::synthgen::{
    builtin_vocabulary, flip_clip, permute_colors, sample_clip, EventKind, FlipAxis, VideoSample,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub loc: f64,
    pub cls: f64,
    pub inter: f64,
    pub cross: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            loc: 5.0,
            cls: 1.0,
            inter: 1.0,
            cross: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.loc, self.cls, self.inter, self.cross];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loc: f64,
    pub cls: f64,
    pub inter: f64,
    pub cross: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(loc: f64, cls: f64, inter: f64, cross: f64, w: &LossWeights) -> Self {
        Self {
            loc,
            cls,
            inter,
            cross,
            total: w.loc * loc + w.cls * cls + w.inter * inter + w.cross * cross,
        }
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {}", self.loc, self.cls, self.inter, self.cross, self.total)
    }
}

/// Loss terms recorded on a graph.
pub struct LossVars {
    pub loc: Var,
    pub cls: Var,
    pub inter: Var,
    pub cross: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            loc: g.scalar_value(self.loc),
            cls: g.scalar_value(self.cls),
            inter: g.scalar_value(self.inter),
            cross: g.scalar_value(self.cross),
            total: g.scalar_value(self.total),
        }
    }
}

/// Records the weighted objective for one forward pass. Localization and
/// classification are averaged over the frames.
pub fn total_loss_graph<R: Rng>(
    g: &mut Graph,
    fwd: &ClipForward,
    boxes: &[GroundTruthBox],
    weights: &LossWeights,
    correspondence: &CorrespondenceConfig,
    rng: &mut R,
) -> Result<LossVars> {
    if boxes.len() != fwd.head.len() {
        return Err(Error::Config(format!(
            "{} boxes for {} frames",
            boxes.len(),
            fwd.head.len()
        )));
    }
    let mut loc = g.constant(Tensor::scalar(0.0));
    let mut cls = g.constant(Tensor::scalar(0.0));
    for (&head, gt) in fwd.head.iter().zip(boxes) {
        let l = loc_loss_graph(g, head, gt, &fwd.grid)?;
        loc = g.add(loc, l)?;
        let c = cls_loss_graph(g, head, gt)?;
        cls = g.add(cls, c)?;
    }
    let frames = fwd.head.len() as f64;
    let loc = g.scale(loc, 1.0 / frames);
    let cls = g.scale(cls, 1.0 / frames);

    let box_cells: Vec<Vec<usize>> = boxes.iter().map(|b| fwd.grid.cells_inside(&b.bbox)).collect();
    let inter = inter_loss_graph(g, &fwd.patches, correspondence, Some(&box_cells))?.loss;
    let cross = cross_loss_graph(g, &fwd.patches, fwd.words, correspondence, rng)?;

    let mut total = g.scale(loc, weights.loc);
    for (term, w) in [(cls, weights.cls), (inter, weights.inter), (cross, weights.cross)] {
        let t = g.scale(term, w);
        total = g.add(total, t)?;
    }
    Ok(LossVars {
        loc,
        cls,
        inter,
        cross,
        total,
    })
}

/// Value of the objective for a clip.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    params: &ModelParams,
    clip: &VideoClip,
    tokens: &QueryTokens,
    boxes: &[BBox],
    weights: &LossWeights,
    correspondence: &CorrespondenceConfig,
    seed: u64,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let fwd = forward_graph(&mut g, &vars, &params.config, clip, tokens)?;
    let gts = boxes
        .iter()
        .map(|b| GroundTruthBox::new(*b, &fwd.grid))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let losses = total_loss_graph(&mut g, &fwd, &gts, weights, correspondence, &mut rng)?;
    Ok(losses.breakdown(&g))
}

/// Model shape used by [`toy_gradcheck`]: 8×8 frames, a 2×2 grid, D = 4.
pub fn toy_model_config() -> ModelConfig {
    let mut config = ModelConfig {
        head_hidden: 0,
        anchor: 4.0,
        ..ModelConfig::default()
    };
    config.encoder.window = 4;
    config.encoder.dim = 4;
    config
}

/// Finite-difference check of the full weighted loss over every model
/// parameter on a random two-frame clip (P = 4) with a three-word query.
pub fn toy_gradcheck(seed: u64, correspondence: &CorrespondenceConfig) -> Result<GradCheckReport> {
    let model = toy_model_config();
    let params = ModelParams::init(&model, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6AD_C4EC);
    let frames = (0..2)
        .map(|_| Tensor::from_fn(&[8, 8, 3], |_| rng.gen_range(0.0..1.0)))
        .collect();
    let clip = VideoClip::new(frames, vec![0, 1])?;
    let vocab = builtin_vocabulary();
    let tokens = vocab.tokenize("red square left")?;
    let boxes = [BBox::new(1.0, 1.5, 5.0, 6.0), BBox::new(2.5, 2.0, 7.0, 6.5)];
    let weights = LossWeights::default();
    let with_hidden = params.hidden.is_some();
    let start: Vec<Tensor> = params
        .tensors()
        .into_iter()
        .map(|t| t.map(|x| x + 0.05 * (7.0 * x).sin()))
        .collect();
    finite_diff_check(
        |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let vars = ModelVars::from_slice(v, with_hidden);
            let fwd = forward_graph(g, &vars, &model, &clip, &tokens)?;
            let gts = boxes
                .iter()
                .map(|b| GroundTruthBox::new(*b, &fwd.grid))
                .collect::<Result<Vec<_>>>()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(total_loss_graph(g, &fwd, &gts, &weights, correspondence, &mut rng)?.total)
        },
        &start,
        DEFAULT_EPS,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    /// Exponent of the polynomial decay.
    pub power: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            rho: 0.99,
            eps: 1e-8,
            power: 0.9,
        }
    }
}

impl OptimizerConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.eps > 0.0) || !(self.power >= 0.0) {
            return Err(Error::Config("need 0 <= rho < 1, eps > 0, power >= 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let frac = 1.0 - step as f64 / total.max(1) as f64;
        self.lr * frac.max(0.0).powf(self.power)
    }
}

/// RMSProp with one squared-gradient accumulator per parameter.
pub struct RmsProp {
    config: OptimizerConfig,
    cache: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(config: OptimizerConfig, params: &ModelParams) -> Self {
        let cache = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { config, cache }
    }

    /// `grads` holds one flat gradient per parameter tensor.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>], lr: f64) {
        let OptimizerConfig { rho, eps, .. } = self.config;
        for ((p, g), cache) in params.tensors_mut().into_iter().zip(grads).zip(&mut self.cache) {
            for ((x, &gi), c) in p.data_mut().iter_mut().zip(g).zip(cache.iter_mut()) {
                *c = rho * *c + (1.0 - rho) * gi * gi;
                *x -= lr * gi / (c.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub clip_len: usize,
    pub frame_distance: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub correspondence: CorrespondenceConfig,
    pub optimizer: OptimizerConfig,
    /// Random mirroring and palette permutation of training clips.
    pub augment: bool,
    /// Steps over which the inter and cross weights ramp linearly from 0.
    pub contrastive_warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            clip_len: 4,
            frame_distance: 3,
            seed: 0,
            weights: LossWeights::default(),
            correspondence: CorrespondenceConfig::default(),
            optimizer: OptimizerConfig::default(),
            augment: true,
            contrastive_warmup: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.correspondence.validate()?;
        self.optimizer.validate()?;
        if self.clip_len < 2 || self.frame_distance == 0 {
            return Err(Error::Config("clip_len >= 2 and frame_distance >= 1 required".into()));
        }
        Ok(())
    }

    /// Loss weights in effect at `step`, after the contrastive warm-up.
    pub fn weights_at(&self, step: usize) -> LossWeights {
        if step >= self.contrastive_warmup {
            return self.weights;
        }
        let ramp = step as f64 / self.contrastive_warmup as f64;
        LossWeights {
            inter: self.weights.inter * ramp,
            cross: self.weights.cross * ramp,
            ..self.weights
        }
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LossBreakdown>,
}

/// Header line of the metric log.
pub const LOG_HEADER: &str = "step loc cls inter cross total";

/// One clip per step, cycling through shuffled epochs of `samples`.
///
/// Each step's losses are appended to `log` if given.
pub fn train(
    samples: &[VideoSample],
    model: &ModelConfig,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut params = ModelParams::init(model, config.seed)?;
    let mut optimizer = RmsProp::new(config.optimizer.clone(), &params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7124_1D0C_A11E_D5EE);
    let mut order: Vec<usize> = Vec::new();
    let vocab = builtin_vocabulary();
    let mut history = Vec::with_capacity(config.steps);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}").map_err(|e| Error::Config(e.to_string()))?;
    }

    for step in 0..config.steps {
        if order.is_empty() {
            order = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let sample = &samples[order.pop().expect("refilled")];
        let (mut clip, mut boxes) = sample_clip(sample, config.clip_len, config.frame_distance, &mut rng)?;
        let mut tokens = sample.tokens.clone();
        if config.augment {
            for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
                if rng.gen_bool(0.5) {
                    (clip, boxes, tokens) = flip_clip(&clip, &boxes, &tokens, &vocab, axis)?;
                }
            }
            let mut perm = [0, 1, 2, 3, 4, 5, 6, 7];
            perm.shuffle(&mut rng);
            let blurred = clip
                .frame_indices()
                .iter()
                .any(|&t| sample.frame_has_event(t, EventKind::Blur));
            if !blurred {
                (clip, tokens) = permute_colors(&clip, &tokens, &vocab, &perm)?;
            }
        }

        let mut g = Graph::new();
        let vars: ModelVars = params.bind(&mut g, true);
        let fwd = forward_graph(&mut g, &vars, model, &clip, &tokens)?;
        let gts = boxes
            .iter()
            .map(|b| GroundTruthBox::new(*b, &fwd.grid))
            .collect::<Result<Vec<_>>>()?;
        let weights = config.weights_at(step);
        let losses = total_loss_graph(&mut g, &fwd, &gts, &weights, &config.correspondence, &mut rng)?;
        let breakdown = losses.breakdown(&g);
        if !breakdown.total.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: breakdown.total,
            });
        }
        let grads = g.backward(losses.total)?;
        let flat: Vec<Vec<f64>> = vars
            .all
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| grads.get_raw(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();
        let lr = config.optimizer.lr_at(step, config.steps);
        optimizer.step(&mut params, &flat, lr);

        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{step} {breakdown}").map_err(|e| Error::Config(e.to_string()))?;
        }
        history.push(breakdown);
    }
    Ok(TrainOutcome {
        params,
        log: history,
    })
}

/// Number of AUC thresholds: 0.00 to 1.00 in steps of 0.05.
pub const SUCCESS_POINTS: usize = 21;

/// Centre-distance threshold at `image_side` pixels, scaled from 20 px at 256.
pub fn precision_threshold(image_side: f64) -> f64 {
    20.0 * image_side / 256.0
}

/// Fraction of videos whose every frame has IoU strictly above `alpha`.
pub fn accuracy_at(videos: &[Vec<f64>], alpha: f64) -> f64 {
    if videos.is_empty() {
        return 0.0;
    }
    let hits = videos
        .iter()
        .filter(|ious| !ious.is_empty() && ious.iter().all(|&x| x > alpha))
        .count();
    hits as f64 / videos.len() as f64
}

/// Trapezoid area under the curve of the fraction of frames with IoU at
/// least each threshold.
pub fn success_auc(ious: &[f64]) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    let step = 1.0 / (SUCCESS_POINTS - 1) as f64;
    let rate: Vec<f64> = (0..SUCCESS_POINTS)
        .map(|k| {
            let t = k as f64 * step;
            ious.iter().filter(|&&x| x >= t - 1e-12).count() as f64 / ious.len() as f64
        })
        .collect();
    rate.windows(2).map(|w| step * (w[0] + w[1]) / 2.0).sum()
}

pub fn precision_rate(pairs: &[(BBox, BBox)], threshold: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs
        .iter()
        .filter(|(p, t)| {
            let (a, b) = (p.center(), t.center());
            (a.0 - b.0).hypot(a.1 - b.1) <= threshold
        })
        .count();
    hits as f64 / pairs.len() as f64
}

/// Mean IoU between consecutive predictions of one video.
pub fn consistency(predictions: &[BBox]) -> Option<f64> {
    if predictions.len() < 2 {
        return None;
    }
    let sum: f64 = predictions.windows(2).map(|w| iou(&w[0], &w[1])).sum();
    Some(sum / (predictions.len() - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `(alpha, fraction)` in ascending alpha.
    pub accu_at: Vec<(f64, f64)>,
    pub success: f64,
    pub precision: f64,
    pub consistency: f64,
    pub videos: usize,
    pub frames: usize,
}

impl EvalReport {
    /// Scores per-video predicted boxes against ground truth.
    pub fn from_boxes(videos: &[(Vec<BBox>, Vec<BBox>)], thresholds: &[f64], image_side: f64) -> Self {
        let ious: Vec<Vec<f64>> = videos
            .iter()
            .map(|(pred, gt)| pred.iter().zip(gt).map(|(p, t)| iou(p, t)).collect())
            .collect();
        let flat: Vec<f64> = ious.iter().flatten().copied().collect();
        let pairs: Vec<(BBox, BBox)> = videos
            .iter()
            .flat_map(|(pred, gt)| pred.iter().copied().zip(gt.iter().copied()))
            .collect();
        let cons: Vec<f64> = videos.iter().filter_map(|(pred, _)| consistency(pred)).collect();
        let mut alphas = thresholds.to_vec();
        alphas.sort_by(f64::total_cmp);
        Self {
            accu_at: alphas.iter().map(|&a| (a, accuracy_at(&ious, a))).collect(),
            success: success_auc(&flat),
            precision: precision_rate(&pairs, precision_threshold(image_side)),
            consistency: if cons.is_empty() {
                0.0
            } else {
                cons.iter().sum::<f64>() / cons.len() as f64
            },
            videos: videos.len(),
            frames: flat.len(),
        }
    }

    pub fn accu(&self, alpha: f64) -> Option<f64> {
        self.accu_at
            .iter()
            .find(|(a, _)| (a - alpha).abs() < 1e-12)
            .map(|&(_, v)| v)
    }

    /// Flat `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (a, v) in &self.accu_at {
            s.push_str(&format!("accu@{a}={v}\n"));
        }
        s.push_str(&format!("success={}\n", self.success));
        s.push_str(&format!("precision={}\n", self.precision));
        s.push_str(&format!("consistency={}\n", self.consistency));
        s.push_str(&format!("videos={}\n", self.videos));
        s.push_str(&format!("frames={}\n", self.frames));
        s
    }

    pub fn to_json(&self) -> Result<String> {
        let mut map = serde_json::Map::new();
        let accu: serde_json::Map<String, serde_json::Value> = self
            .accu_at
            .iter()
            .map(|(a, v)| (a.to_string(), serde_json::json!(v)))
            .collect();
        map.insert("accu_at".into(), accu.into());
        map.insert("success".into(), self.success.into());
        map.insert("precision".into(), self.precision.into());
        map.insert("consistency".into(), self.consistency.into());
        map.insert("videos".into(), self.videos.into());
        map.insert("frames".into(), self.frames.into());
        Ok(serde_json::to_string_pretty(&serde_json::Value::Object(map))?)
    }
}

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.4, 0.5, 0.6];

/// Predicted box for every frame of a sample.
pub fn predict_video(params: &ModelParams, sample: &VideoSample) -> Result<Vec<BBox>> {
    let out = run_clip(params, &sample.clip, &sample.tokens)?;
    Ok(out.predictions.iter().map(|p| p.selected.bbox).collect())
}

/// Runs the model over every frame of every sample.
pub fn evaluate(params: &ModelParams, samples: &[VideoSample], thresholds: &[f64]) -> Result<EvalReport> {
    let videos = samples
        .par_iter()
        .map(|s| Ok((predict_video(params, s)?, s.gt_boxes.clone())))
        .collect::<Result<Vec<_>>>()?;
    let side = samples
        .first()
        .map(|s| {
            let (h, w, _) = s.clip.dims();
            h.max(w) as f64
        })
        .unwrap_or(32.0);
    Ok(EvalReport::from_boxes(&videos, thresholds, side))
}

/// One trained variant of an ablation.
#[derive(Clone, Debug)]
pub struct AblationVariant {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub seed: u64,
    pub report: EvalReport,
    /// Report restricted to test videos with an occlusion event.
    pub occluded: Option<EvalReport>,
}

/// Config field swept by an ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    InterMode,
    CrossSelect,
    FrameDistance,
    RInter,
    RCross,
    Losses,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "inter_mode" => Self::InterMode,
            "cross_select" => Self::CrossSelect,
            "F" => Self::FrameDistance,
            "R_inter" => Self::RInter,
            "R_cross" => Self::RCross,
            "losses" => Self::Losses,
            other => return Err(Error::Config(format!("unknown ablation axis {other:?}"))),
        })
    }
}

impl AblationAxis {
    /// One variant per setting of the axis, everything else from `train`.
    pub fn variants(self, model: &ModelConfig, train: &TrainConfig) -> Vec<AblationVariant> {
        let make = |name: String, edit: &dyn Fn(&mut TrainConfig)| {
            let mut t = train.clone();
            edit(&mut t);
            AblationVariant {
                name,
                model: model.clone(),
                train: t,
            }
        };
        match self {
            Self::InterMode => [InterMode::Adjacent, InterMode::FullyConnected]
                .into_iter()
                .map(|m| make(m.to_string(), &|t| t.correspondence.inter_mode = m))
                .collect(),
            Self::CrossSelect => [CrossSelect::PatchTopk, CrossSelect::WordTopk, CrossSelect::Random]
                .into_iter()
                .map(|m| make(m.to_string(), &|t| t.correspondence.cross_select = m))
                .collect(),
            Self::FrameDistance => [1, 2, 3]
                .into_iter()
                .map(|f| make(format!("F={f}"), &|t| t.frame_distance = f))
                .collect(),
            Self::RInter => [2, 4, 8, 16]
                .into_iter()
                .map(|r| make(format!("R_inter={r}"), &|t| t.correspondence.r_inter = r))
                .collect(),
            Self::RCross => [1, 2, 3, 5]
                .into_iter()
                .map(|r| make(format!("R_cross={r}"), &|t| t.correspondence.r_cross = r))
                .collect(),
            Self::Losses => {
                let (wi, wc) = (train.weights.inter, train.weights.cross);
                [("both", wi, wc), ("inter_only", wi, 0.0), ("cross_only", 0.0, wc), ("neither", 0.0, 0.0)]
                    .into_iter()
                    .map(|(n, i, c)| {
                        make(n.to_string(), &|t| {
                            t.weights.inter = i;
                            t.weights.cross = c;
                        })
                    })
                    .collect()
            }
        }
    }
}

/// Trains every variant for every seed in parallel; rows come back in
/// `variants × seeds` order.
pub fn run_ablation(
    variants: &[AblationVariant],
    seeds: &[u64],
    train_set: &[VideoSample],
    test_set: &[VideoSample],
) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(&AblationVariant, u64)> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let occluded: Vec<VideoSample> = test_set
        .iter()
        .filter(|s| s.has_event(EventKind::Occlusion))
        .cloned()
        .collect();
    jobs.par_iter()
        .map(|&(variant, seed)| {
            let config = TrainConfig {
                seed,
                ..variant.train.clone()
            };
            let outcome = train(train_set, &variant.model, &config, None)?;
            let report = evaluate(&outcome.params, test_set, &DEFAULT_THRESHOLDS)?;
            let occluded = if occluded.is_empty() {
                None
            } else {
                Some(evaluate(&outcome.params, &occluded, &DEFAULT_THRESHOLDS)?)
            };
            Ok(AblationRow {
                name: variant.name.clone(),
                seed,
                report,
                occluded,
            })
        })
        .collect()
}

/// Mean of a metric per variant name, in first-appearance order.
pub fn mean_by_variant(rows: &[AblationRow], metric: impl Fn(&AblationRow) -> f64) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(n, _, _)| *n == r.name) {
            Some(e) => {
                e.1 += metric(r);
                e.2 += 1;
            }
            None => out.push((r.name.clone(), metric(r), 1)),
        }
    }
    out.into_iter().map(|(n, s, c)| (n, s / c as f64)).collect()
}

/// Plain-text table of an ablation, one line per row plus per-variant means.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant seed accu@0.4 accu@0.5 accu@0.6 success precision consistency\n");
    for r in rows {
        let a = |x: f64| r.report.accu(x).unwrap_or(f64::NAN);
        s.push_str(&format!(
            "{} {} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4}\n",
            r.name,
            r.seed,
            a(0.4),
            a(0.5),
            a(0.6),
            r.report.success,
            r.report.precision,
            r.report.consistency
        ));
    }
    for (name, mean) in mean_by_variant(rows, |r| r.report.accu(0.5).unwrap_or(f64::NAN)) {
        s.push_str(&format!("mean {name} accu@0.5={mean:.4}\n"));
    }
    s
}
