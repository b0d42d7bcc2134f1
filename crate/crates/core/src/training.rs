//! Composite loss and gradient training of the prompt parameters.
//!
//! The loss is soft-IoU + focal over the point-wise map plus cross-entropy
//! over the object score. Gradients flow through scoring, aggregation and
//! both encoders to the prompt banks only; the frozen backbone never
//! materializes a gradient.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::encoder::{
    encode_image_graph, text_encoding_graph, FrozenBackbone, PromptBanks,
};
use crate::error::{Error, Result};
use crate::geometry::{generate_view_rig, normalize_cloud, PointCloud};
use crate::pipeline::PipelineSettings;
use crate::rendering::render_all;
use crate::scoring::{
    aggregate_features_graph, anomaly_map_graph, anomaly_score_graph, AggregationPlan,
};
use crate::tensor::Tensor;

/// Soft-IoU stabilizer. Small enough that the loss matches the exact
/// formula to well below 1e-9 on unit-scale masks.
pub const IOU_EPS: f64 = 1e-12;
/// Probability clamp for logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Optimization hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Clouds per optimizer step.
    pub batch: usize,
    pub seed: u64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0005,
            epochs: 3,
            batch: 1,
            seed: 0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Training("learning rate must be non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Training("at least one epoch required".into()));
        }
        if self.batch == 0 {
            return Err(Error::Training("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// The three loss terms and their sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub iou: f64,
    pub focal: f64,
    pub ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len() as f64;
        LossBreakdown {
            iou: items.iter().map(|l| l.iou).sum::<f64>() / n,
            focal: items.iter().map(|l| l.focal).sum::<f64>() / n,
            ce: items.iter().map(|l| l.ce).sum::<f64>() / n,
            total: items.iter().map(|l| l.total).sum::<f64>() / n,
        }
    }
}

/// Soft IoU loss `1 − (Σ A·gt + ε)/(Σ A + Σ gt − Σ A·gt + ε)`.
pub fn iou_loss(map: &[f64], gt: &[u8]) -> f64 {
    assert_eq!(map.len(), gt.len());
    let inter: f64 = map.iter().zip(gt).map(|(&a, &g)| a * g as f64).sum();
    let sum_a: f64 = map.iter().sum();
    let sum_g: f64 = gt.iter().map(|&g| g as f64).sum();
    1.0 - (inter + IOU_EPS) / (sum_a + sum_g - inter + IOU_EPS)
}

/// Focal loss, mean over points of `−α_t (1−p_t)^γ ln(p_t)`.
pub fn focal_loss(map: &[f64], gt: &[u8], gamma: f64, alpha: f64) -> f64 {
    assert_eq!(map.len(), gt.len());
    let mut total = 0.0;
    for (&a, &g) in map.iter().zip(gt) {
        let (p_t, alpha_t) = if g == 1 { (a, alpha) } else { (1.0 - a, 1.0 - alpha) };
        let p_t = p_t.clamp(PROB_EPS, 1.0 - PROB_EPS);
        total += -alpha_t * (1.0 - p_t).powf(gamma) * p_t.ln();
    }
    total / map.len() as f64
}

/// Binary cross-entropy on the object score.
pub fn cross_entropy(xi: f64, xi_gt: u8) -> f64 {
    let xi = xi.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let y = xi_gt as f64;
    -(y * xi.ln() + (1.0 - y) * (1.0 - xi).ln())
}

/// Handles to the prompt parameter leaves of one cloud graph, in the fixed
/// optimizer order (visual banks, union, specific-normal, specific-abnormal).
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub visual: Vec<Var>,
    pub union: Var,
    pub specific_normal: Var,
    pub specific_abnormal: Var,
}

impl ParamVars {
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = self.visual.clone();
        out.extend([self.union, self.specific_normal, self.specific_abnormal]);
        out
    }
}

/// A fully built forward pass for one labeled cloud.
pub struct CloudGraph {
    pub graph: Graph,
    pub params: ParamVars,
    pub iou: Var,
    pub focal: Var,
    pub ce: Var,
    pub total: Var,
    pub map: Var,
    pub score: Var,
}

impl CloudGraph {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            iou: self.graph.value(self.iou).item(),
            focal: self.graph.value(self.focal).item(),
            ce: self.graph.value(self.ce).item(),
            total: self.graph.value(self.total).item(),
        }
    }

    fn check_finite(&self) -> Result<()> {
        let b = self.breakdown();
        for (term, value) in [("iou", b.iou), ("focal", b.focal), ("ce", b.ce)] {
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { term, value });
            }
        }
        Ok(())
    }
}

/// Graph-side loss terms over the `n×1` map, the `1×1` score and constant
/// ground truth.
pub fn loss_graph(
    g: &mut Graph,
    map: Var,
    score: Var,
    gt: &[u8],
    object_gt: u8,
    gamma: f64,
    alpha: f64,
) -> (Var, Var, Var, Var) {
    let n = gt.len();
    assert_eq!(g.value(map).shape(), (n, 1));
    let gt_f: Vec<f64> = gt.iter().map(|&v| v as f64).collect();
    let gt_sum: f64 = gt_f.iter().sum();
    let gt_c = g.constant(Tensor::from_vec(n, 1, gt_f.clone()));
    let gt_inv_c = g.constant(Tensor::from_vec(n, 1, gt_f.iter().map(|v| 1.0 - v).collect()));

    // Soft IoU.
    let inter = {
        let prod = g.mul(map, gt_c);
        g.sum_all(prod)
    };
    let sum_a = g.sum_all(map);
    let union = {
        let d = g.sub(sum_a, inter);
        g.add_scalar(d, gt_sum)
    };
    let num = g.add_scalar(inter, IOU_EPS);
    let den = g.add_scalar(union, IOU_EPS);
    let ratio = g.div(num, den);
    let iou = g.const_minus(1.0, ratio);

    // Focal.
    let alpha_t = g.constant(Tensor::from_vec(
        n,
        1,
        gt_f.iter().map(|&v| if v == 1.0 { alpha } else { 1.0 - alpha }).collect(),
    ));
    let p_pos = g.mul(map, gt_c);
    let one_minus_map = g.const_minus(1.0, map);
    let p_neg = g.mul(one_minus_map, gt_inv_c);
    let p_t = g.add(p_pos, p_neg);
    let p_t = g.clamp(p_t, PROB_EPS, 1.0 - PROB_EPS);
    let ln_p = g.ln(p_t);
    let one_minus_p = g.const_minus(1.0, p_t);
    let modulator = g.pow_const(one_minus_p, gamma);
    let per_point = g.mul(modulator, ln_p);
    let per_point = g.mul(per_point, alpha_t);
    let focal_sum = g.sum_all(per_point);
    let focal = g.scale(focal_sum, -1.0 / n as f64);

    // Cross-entropy on the object score.
    let y = object_gt as f64;
    let xi = g.clamp(score, PROB_EPS, 1.0 - PROB_EPS);
    let ln_xi = g.ln(xi);
    let one_minus_xi = g.const_minus(1.0, xi);
    let ln_one_minus = g.ln(one_minus_xi);
    let pos_part = g.scale(ln_xi, y);
    let neg_part = g.scale(ln_one_minus, 1.0 - y);
    let sum = g.add(pos_part, neg_part);
    let ce = g.scale(sum, -1.0);

    let partial = g.add(iou, focal);
    let total = g.add(partial, ce);
    (iou, focal, ce, total)
}

/// Build the full forward pass (render → encode → aggregate → score →
/// loss) for one labeled cloud.
pub fn build_cloud_loss_graph(
    cloud: &PointCloud,
    backbone: &FrozenBackbone,
    banks: &PromptBanks,
    settings: &PipelineSettings,
    train_cfg: &TrainConfig,
) -> Result<CloudGraph> {
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Error::Training(format!("cloud `{}` has no labels", cloud.category)))?;
    let object_gt = cloud
        .object_label
        .unwrap_or_else(|| labels.iter().any(|&l| l == 1) as u8);
    let config = backbone.config().clone();

    let normalized = normalize_cloud(cloud);
    let intrinsics = settings.intrinsics(&config);
    let rig = generate_view_rig(
        settings.n_views,
        settings.rig_radius,
        &nalgebra::Point3::origin(),
        &intrinsics,
    )?;
    let rendered = render_all(&normalized, &rig, settings.splat_radius)?;

    let mut g = Graph::new();
    let backbone_vars = backbone.to_vars(&mut g);
    let params = ParamVars {
        visual: banks.visual.tokens.iter().map(|t| g.param(t.clone())).collect(),
        union: g.param(banks.text.union.clone()),
        specific_normal: g.param(banks.text.specific_normal.clone()),
        specific_abnormal: g.param(banks.text.specific_abnormal.clone()),
    };

    let mut class_tokens = Vec::with_capacity(rendered.n_views());
    let mut key_maps = Vec::with_capacity(rendered.n_views() * config.n_key_layers());
    for image in &rendered.normalized {
        let enc = encode_image_graph(&mut g, image, &backbone_vars, &params.visual, &config)?;
        class_tokens.push(enc.class_token);
        key_maps.extend(enc.key_layer_maps);
    }

    let plan = AggregationPlan::from_rendered(&rendered, config.grid(), config.n_key_layers(), cloud.len());
    let features = aggregate_features_graph(&mut g, &key_maps, &plan);

    let text_bank = banks.text.with_class(&cloud.category);
    let text = text_encoding_graph(
        &mut g,
        params.union,
        params.specific_normal,
        params.specific_abnormal,
        &text_bank,
        backbone,
        &backbone_vars,
        &config,
    )?;

    let map = anomaly_map_graph(&mut g, features, text, settings.tau, &plan);
    let score = anomaly_score_graph(&mut g, &class_tokens, text, settings.tau);
    let (iou, focal, ce, total) = loss_graph(
        &mut g,
        map,
        score,
        labels,
        object_gt,
        train_cfg.focal_gamma,
        train_cfg.focal_alpha,
    );

    Ok(CloudGraph {
        graph: g,
        params,
        iou,
        focal,
        ce,
        total,
        map,
        score,
    })
}

/// Gradients for every prompt tensor, in [`PromptBanks::tensors`] order.
#[derive(Clone, Debug)]
pub struct PromptGradients {
    pub tensors: Vec<Tensor>,
}

impl PromptGradients {
    pub fn zeros_like(banks: &PromptBanks) -> Self {
        PromptGradients {
            tensors: banks
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &PromptGradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.tensors.iter_mut() {
            *t = t.scale(c);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().map(Tensor::max_abs).fold(0.0, f64::max)
    }
}

/// Reverse sweep of a built cloud graph. Errors if any loss term is
/// non-finite, naming the term.
pub fn backward(cloud_graph: &CloudGraph) -> Result<PromptGradients> {
    cloud_graph.check_finite()?;
    let grads = cloud_graph.graph.backward(cloud_graph.total);
    let tensors = cloud_graph
        .params
        .ordered()
        .iter()
        .map(|&p| {
            grads
                .get(p)
                .cloned()
                .unwrap_or_else(|| {
                    let t = cloud_graph.graph.value(p);
                    Tensor::zeros(t.rows(), t.cols())
                })
        })
        .collect();
    Ok(PromptGradients { tensors })
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
}

impl Adam {
    fn new(banks: &PromptBanks) -> Self {
        let zeros: Vec<Tensor> = banks
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, banks: &mut PromptBanks, grads: &PromptGradients, cfg: &TrainConfig) {
        self.t += 1;
        let b1 = cfg.adam_beta1;
        let b2 = cfg.adam_beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((param, grad), (m, v)) in banks
            .tensors_mut()
            .into_iter()
            .zip(&grads.tensors)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..param.len() {
                let g = grad.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * g;
                let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                param.data_mut()[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Training output: final banks, per-step loss log and per-epoch snapshots.
pub struct TrainOutput {
    pub banks: PromptBanks,
    /// `(global step, mean loss over the step's batch)`.
    pub step_log: Vec<(usize, LossBreakdown)>,
    pub epoch_banks: Vec<PromptBanks>,
    pub epoch_mean_loss: Vec<f64>,
}

/// Adam training of the prompt banks on labeled clouds. Deterministic
/// under `cfg.seed`.
pub fn train(
    clouds: &[PointCloud],
    backbone: &FrozenBackbone,
    init: &PromptBanks,
    settings: &PipelineSettings,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if clouds.is_empty() {
        return Err(Error::Training("training dataset is empty".into()));
    }
    let mut banks = init.clone();
    let mut adam = Adam::new(&banks);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5452_4149_4e00_0001);
    let mut step_log = Vec::new();
    let mut epoch_banks = Vec::with_capacity(cfg.epochs);
    let mut epoch_mean_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..clouds.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        for batch in order.chunks(cfg.batch) {
            let mut grads = PromptGradients::zeros_like(&banks);
            let mut losses = Vec::with_capacity(batch.len());
            for &ci in batch {
                let cg = build_cloud_loss_graph(&clouds[ci], backbone, &banks, settings, cfg)?;
                losses.push(cg.breakdown());
                grads.add_assign(&backward(&cg)?);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut banks, &grads, cfg);
            let mean = LossBreakdown::mean(&losses);
            epoch_losses.push(mean);
            step_log.push((step, mean));
            step += 1;
        }
        epoch_mean_loss.push(LossBreakdown::mean(&epoch_losses).total);
        epoch_banks.push(banks.clone());
    }

    Ok(TrainOutput {
        banks,
        step_log,
        epoch_banks,
        epoch_mean_loss,
    })
}

/// Mean total loss of the current banks over a cloud set, without updates.
pub fn evaluate_loss(
    clouds: &[PointCloud],
    backbone: &FrozenBackbone,
    banks: &PromptBanks,
    settings: &PipelineSettings,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for cloud in clouds {
        let cg = build_cloud_loss_graph(cloud, backbone, banks, settings, cfg)?;
        total += cg.breakdown().total;
    }
    Ok(total / clouds.len() as f64)
}
