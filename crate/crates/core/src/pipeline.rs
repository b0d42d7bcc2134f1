//! End-to-end composition: cloud → views → encodings → anomaly outputs,
//! plus split evaluation and the view-count sweep.

use std::time::Instant;

use nalgebra::Point3;
use rayon::prelude::*;

use crate::encoder::{
    encode_image, text_encoding, Checkpoint, EncoderConfig, FrozenBackbone, ImageEncoding,
    PromptBanks,
};
use crate::error::{Error, Result};
use crate::geometry::{generate_view_rig, normalize_cloud, CameraIntrinsics, PointCloud, ViewRig};
use crate::metrics::{evaluate, EvalReport, MetricSet, ScoredCloud};
use crate::rendering::{coverage, render_all, RenderedSet};
use crate::scoring::{aggregate_point_features, anomaly_map, anomaly_score, AnomalyResult};

/// Multi-view projection parameters shared by training and scoring.
#[derive(Clone, Debug)]
pub struct PipelineSettings {
    pub n_views: usize,
    pub rig_radius: f64,
    pub splat_radius: usize,
    pub tau: f64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            n_views: 9,
            rig_radius: 2.5,
            splat_radius: 1,
            tau: 0.07,
        }
    }
}

impl PipelineSettings {
    pub fn intrinsics(&self, config: &EncoderConfig) -> CameraIntrinsics {
        CameraIntrinsics::default_for_image_size(config.image_size)
    }

    pub fn rig(&self, config: &EncoderConfig) -> Result<ViewRig> {
        generate_view_rig(
            self.n_views,
            self.rig_radius,
            &Point3::origin(),
            &self.intrinsics(config),
        )
    }
}

/// Frozen backbone plus the current prompt banks.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub backbone: FrozenBackbone,
    pub banks: PromptBanks,
}

impl ModelState {
    pub fn init(
        config: &EncoderConfig,
        backbone_seed: u64,
        n_union: usize,
        n_specific: usize,
        prompt_seed: u64,
    ) -> Result<Self> {
        Ok(ModelState {
            backbone: FrozenBackbone::new(config, backbone_seed)?,
            banks: PromptBanks::init(config, n_union, n_specific, prompt_seed),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(ModelState {
            backbone: FrozenBackbone::new(&ckpt.config, ckpt.backbone_seed)?,
            banks: ckpt.banks.clone(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.backbone.config().clone(),
            backbone_seed: self.backbone.seed(),
            banks: self.banks.clone(),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        self.backbone.config()
    }
}

/// Normalize, render and encode one cloud against an explicit rig.
fn encode_cloud_views(
    state: &ModelState,
    cloud: &PointCloud,
    rig: &ViewRig,
    splat_radius: usize,
) -> Result<(RenderedSet, Vec<ImageEncoding>)> {
    let normalized = normalize_cloud(cloud);
    let rendered = render_all(&normalized, rig, splat_radius)?;
    let encodings: Vec<ImageEncoding> = rendered
        .normalized
        .iter()
        .map(|img| encode_image(img, &state.backbone, &state.banks.visual, state.config()))
        .collect::<Result<_>>()?;
    Ok((rendered, encodings))
}

fn score_with_rig(
    state: &ModelState,
    settings: &PipelineSettings,
    cloud: &PointCloud,
    rig: &ViewRig,
) -> Result<(AnomalyResult, f64)> {
    let (rendered, encodings) = encode_cloud_views(state, cloud, rig, settings.splat_radius)?;
    let features = aggregate_point_features(&encodings, &rendered, cloud.len())?;
    let text_bank = state.banks.text.with_class(&cloud.category);
    let text = text_encoding(&text_bank, &state.backbone, state.config())?;
    let map = anomaly_map(&features, &text, settings.tau);
    let score = anomaly_score(&encodings, &text, settings.tau)?;
    let cov = coverage(&rendered, cloud.len());
    Ok((AnomalyResult::new(score, map)?, cov))
}

/// Score one cloud with the configured rig.
pub fn score_cloud(
    state: &ModelState,
    settings: &PipelineSettings,
    cloud: &PointCloud,
) -> Result<AnomalyResult> {
    let rig = settings.rig(state.config())?;
    Ok(score_with_rig(state, settings, cloud, &rig)?.0)
}

/// Score many clouds (parallel across clouds, deterministic order).
pub fn score_clouds(
    state: &ModelState,
    settings: &PipelineSettings,
    clouds: &[PointCloud],
) -> Result<Vec<AnomalyResult>> {
    let rig = settings.rig(state.config())?;
    clouds
        .par_iter()
        .map(|c| score_with_rig(state, settings, c, &rig).map(|(r, _)| r))
        .collect()
}

/// Score a labeled split and compute the six metrics per category.
pub fn evaluate_split(
    state: &ModelState,
    settings: &PipelineSettings,
    clouds: &[PointCloud],
) -> Result<EvalReport> {
    if clouds.is_empty() {
        return Err(Error::Metrics("empty evaluation split".into()));
    }
    let results = score_clouds(state, settings, clouds)?;
    let scored: Vec<ScoredCloud> = clouds
        .iter()
        .zip(results)
        .map(|(cloud, result)| {
            let point_gt = cloud.labels.clone().ok_or_else(|| {
                Error::Metrics(format!("cloud `{}` has no ground truth labels", cloud.category))
            })?;
            Ok(ScoredCloud {
                category: cloud.category.clone(),
                object_gt: cloud
                    .object_label
                    .unwrap_or_else(|| point_gt.iter().any(|&l| l == 1) as u8),
                point_gt,
                foreground: None,
                result,
            })
        })
        .collect::<Result<_>>()?;
    evaluate(&scored)
}

/// One row of the view-count ablation.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub n_views: usize,
    pub mean_coverage: f64,
    pub seconds_per_cloud: f64,
    pub metrics: MetricSet,
}

/// Evaluate the same clouds under increasing view counts. All counts share
/// one camera schedule (the largest rig, truncated), so visibility sets
/// nest and coverage is non-decreasing in the view count.
pub fn sweep_views(
    state: &ModelState,
    settings: &PipelineSettings,
    clouds: &[PointCloud],
    k_list: &[usize],
) -> Result<Vec<SweepRow>> {
    if clouds.is_empty() || k_list.is_empty() {
        return Err(Error::Metrics("sweep needs clouds and view counts".into()));
    }
    let max_k = *k_list.iter().max().unwrap();
    let full = PipelineSettings {
        n_views: max_k,
        ..settings.clone()
    }
    .rig(state.config())?;

    // Warm the thread pool and allocator so the first timed row does not
    // absorb startup cost.
    {
        let rig = ViewRig {
            intrinsics: full.intrinsics,
            poses: full.poses[..1].to_vec(),
        };
        let _ = clouds
            .par_iter()
            .map(|c| score_with_rig(state, settings, c, &rig))
            .collect::<Result<Vec<_>>>()?;
    }

    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        if k == 0 || k > max_k {
            return Err(Error::Metrics(format!("invalid view count {k}")));
        }
        let rig = ViewRig {
            intrinsics: full.intrinsics,
            poses: full.poses[..k].to_vec(),
        };
        let start = Instant::now();
        let outcomes: Vec<(AnomalyResult, f64)> = clouds
            .par_iter()
            .map(|c| score_with_rig(state, settings, c, &rig))
            .collect::<Result<_>>()?;
        let elapsed = start.elapsed().as_secs_f64();

        let scored: Vec<ScoredCloud> = clouds
            .iter()
            .zip(&outcomes)
            .map(|(cloud, (result, _))| {
                let point_gt = cloud.labels.clone().unwrap_or_else(|| vec![0; cloud.len()]);
                ScoredCloud {
                    category: cloud.category.clone(),
                    object_gt: cloud
                        .object_label
                        .unwrap_or_else(|| point_gt.iter().any(|&l| l == 1) as u8),
                    point_gt,
                    foreground: None,
                    result: result.clone(),
                }
            })
            .collect();
        let report = evaluate(&scored)?;
        rows.push(SweepRow {
            n_views: k,
            mean_coverage: outcomes.iter().map(|(_, c)| c).sum::<f64>() / clouds.len() as f64,
            seconds_per_cloud: elapsed / clouds.len() as f64,
            metrics: report.mean,
        });
    }
    Ok(rows)
}

/// Render the sweep as a plain-text table.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "views coverage sec_per_cloud o_auroc o_maxf1 o_ap p_auroc p_maxf1 p_ap\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{} {:.6} {:.6} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4}\n",
            r.n_views,
            r.mean_coverage,
            r.seconds_per_cloud,
            r.metrics.o_auroc,
            r.metrics.o_maxf1,
            r.metrics.o_ap,
            r.metrics.p_auroc,
            r.metrics.p_maxf1,
            r.metrics.p_ap
        ));
    }
    out
}

/// Build the global rayon pool, honoring `MVAD_THREADS` when set. Safe to
/// call more than once (later calls are no-ops).
pub fn init_thread_pool_from_env() {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(n) = std::env::var("MVAD_THREADS") {
        if let Ok(n) = n.parse::<usize>() {
            if n > 0 {
                builder = builder.num_threads(n);
            }
        }
    }
    let _ = builder.build_global();
}
