//! From per-view encodings to per-point features and anomaly outputs.
//!
//! Patch grids are bilinearly upsampled to pixel resolution (corners
//! aligned to pixel centers); each point averages the features of every
//! pixel it wins, over all key layers and views, and the averaged rows are
//! compared against the two text features with a temperature softmax.

use crate::autodiff::{GatherEntry, Graph, Var};
use crate::encoder::{ImageEncoding, TextEncoding};
use crate::error::{Error, Result};
use crate::rendering::{CorrespondenceMap, RenderedSet};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-12;

/// Aggregated per-point features.
#[derive(Clone, Debug)]
pub struct PointFeatures {
    /// `n×dim`, unit rows; zero rows where `visible == 0`.
    pub features: Tensor,
    /// Count of contributing `(view, key layer)` pairs per point.
    pub visible: Vec<u32>,
}

/// Object score and per-point anomaly map, all in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct AnomalyResult {
    pub score: f64,
    pub map: Vec<f64>,
}

impl AnomalyResult {
    pub fn new(score: f64, map: Vec<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Scoring(format!("object score {score} outside [0,1]")));
        }
        if let Some(bad) = map.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Scoring(format!("map value {bad} outside [0,1]")));
        }
        Ok(AnomalyResult { score, map })
    }
}

/// `(low index, high index, fraction toward high)` for one output position
/// under corner-aligned interpolation.
fn grid_coeffs(idx: usize, out_len: usize, grid: usize) -> (usize, usize, f64) {
    if grid <= 1 || out_len <= 1 {
        return (0, 0, 0.0);
    }
    let pos = idx as f64 * (grid - 1) as f64 / (out_len - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(grid - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear upsample of a `grid²×dim` patch map to `(out_h·out_w)×dim`
/// pixel rows; grid corners align with the corner pixel centers.
pub fn upsample_feature_map(map: &Tensor, grid: usize, out_h: usize, out_w: usize) -> Tensor {
    assert_eq!(map.rows(), grid * grid, "map rows must equal grid²");
    let dim = map.cols();
    let mut out = Tensor::zeros(out_h * out_w, dim);
    for r in 0..out_h {
        let (r0, r1, fr) = grid_coeffs(r, out_h, grid);
        for c in 0..out_w {
            let (c0, c1, fc) = grid_coeffs(c, out_w, grid);
            let w00 = (1.0 - fr) * (1.0 - fc);
            let w01 = (1.0 - fr) * fc;
            let w10 = fr * (1.0 - fc);
            let w11 = fr * fc;
            let row = out.row_mut(r * out_w + c);
            for (d, slot) in row.iter_mut().enumerate() {
                *slot = w00 * map.get(r0 * grid + c0, d)
                    + w01 * map.get(r0 * grid + c1, d)
                    + w10 * map.get(r1 * grid + c0, d)
                    + w11 * map.get(r1 * grid + c1, d);
            }
        }
    }
    out
}

/// Precomputed routing from `(view, layer)` patch grids to per-point
/// feature sums. Sources are ordered view-major (`view·m + layer`).
#[derive(Clone, Debug)]
pub struct AggregationPlan {
    /// Original index of each visible point, ascending.
    pub visible_points: Vec<usize>,
    /// Gather entries per visible point: `(source, grid cell, weight)`.
    pub entries: Vec<Vec<GatherEntry>>,
    /// Per visible point, the number of `(view, pixel, layer)` terms summed.
    pub divisors: Vec<f64>,
    /// Per original point, contributing `(view, key layer)` pair count.
    pub visible_counts: Vec<u32>,
    pub n_points: usize,
    pub n_views: usize,
    pub n_layers: usize,
}

impl AggregationPlan {
    pub fn from_rendered(rendered: &RenderedSet, grid: usize, m: usize, n_points: usize) -> Self {
        Self::from_correspondences(rendered.views.iter().map(|(_, c)| c), grid, m, n_points)
    }

    pub fn from_correspondences<'a>(
        corrs: impl Iterator<Item = &'a CorrespondenceMap>,
        grid: usize,
        m: usize,
        n_points: usize,
    ) -> Self {
        let corrs: Vec<&CorrespondenceMap> = corrs.collect();
        let n_views = corrs.len();
        let mut visible_counts = vec![0u32; n_points];
        let mut visible_points = Vec::new();
        let mut entries = Vec::new();
        let mut divisors = Vec::new();

        for i in 0..n_points {
            let mut point_entries: Vec<GatherEntry> = Vec::new();
            let mut pixel_terms = 0usize;
            let mut views_seen = 0u32;
            for (v, corr) in corrs.iter().enumerate() {
                let pixels = &corr.point_to_pixels[i];
                if pixels.is_empty() {
                    continue;
                }
                views_seen += 1;
                for &(_, row, col) in pixels {
                    pixel_terms += 1;
                    let (r0, r1, fr) = grid_coeffs(row, corr.height, grid);
                    let (c0, c1, fc) = grid_coeffs(col, corr.width, grid);
                    let cells = [
                        (r0 * grid + c0, (1.0 - fr) * (1.0 - fc)),
                        (r0 * grid + c1, (1.0 - fr) * fc),
                        (r1 * grid + c0, fr * (1.0 - fc)),
                        (r1 * grid + c1, fr * fc),
                    ];
                    for l in 0..m {
                        let src = (v * m + l) as u32;
                        for &(cell, w) in &cells {
                            if w != 0.0 {
                                point_entries.push((src, cell as u32, w));
                            }
                        }
                    }
                }
            }
            if pixel_terms > 0 {
                visible_counts[i] = views_seen * m as u32;
                visible_points.push(i);
                divisors.push((pixel_terms * m) as f64);
                entries.push(point_entries);
            }
        }

        AggregationPlan {
            visible_points,
            entries,
            divisors,
            visible_counts,
            n_points,
            n_views,
            n_layers: m,
        }
    }

    pub fn n_visible(&self) -> usize {
        self.visible_points.len()
    }
}

/// Register every key-layer map as a graph constant, view-major.
pub fn key_map_constants(g: &mut Graph, encodings: &[ImageEncoding]) -> Vec<Var> {
    let mut out = Vec::new();
    for enc in encodings {
        for map in &enc.key_layer_maps {
            out.push(g.constant(map.clone()));
        }
    }
    out
}

/// Graph aggregation: weighted gather, divide by the contribution count,
/// L2-normalize rows. `key_maps` must be view-major `(view·m + layer)`.
pub fn aggregate_features_graph(g: &mut Graph, key_maps: &[Var], plan: &AggregationPlan) -> Var {
    assert_eq!(
        key_maps.len(),
        plan.n_views * plan.n_layers,
        "key map count does not match plan"
    );
    let summed = g.weighted_gather_rows(key_maps, plan.entries.clone());
    let scaled = g.scale_rows(summed, plan.divisors.iter().map(|d| 1.0 / d).collect());
    g.l2_normalize_rows(scaled, NORM_EPS)
}

/// Average per-point features over every winning pixel, key layer and
/// view; invisible points keep a zero row and `visible == 0`.
pub fn aggregate_point_features(
    encodings: &[ImageEncoding],
    rendered: &RenderedSet,
    n_points: usize,
) -> Result<PointFeatures> {
    if encodings.len() != rendered.n_views() {
        return Err(Error::Scoring(format!(
            "{} encodings for {} rendered views",
            encodings.len(),
            rendered.n_views()
        )));
    }
    if encodings.is_empty() {
        return Err(Error::Scoring("no views to aggregate".into()));
    }
    let grid = encodings[0].grid;
    let m = encodings[0].key_layer_maps.len();
    let dim = encodings[0].key_layer_maps[0].cols();
    for e in encodings {
        if e.grid != grid || e.key_layer_maps.len() != m {
            return Err(Error::Scoring("inconsistent encoding shapes across views".into()));
        }
    }
    let plan = AggregationPlan::from_rendered(rendered, grid, m, n_points);

    let mut g = Graph::new();
    let key_maps = key_map_constants(&mut g, encodings);
    let agg = aggregate_features_graph(&mut g, &key_maps, &plan);
    let rows = g.value(agg);

    let mut features = Tensor::zeros(n_points, dim);
    for (dense, &orig) in plan.visible_points.iter().enumerate() {
        features.row_mut(orig).copy_from_slice(rows.row(dense));
    }
    Ok(PointFeatures {
        features,
        visible: plan.visible_counts,
    })
}

fn pair_softmax_abnormal(sim_normal: f64, sim_abnormal: f64, tau: f64) -> f64 {
    let s = crate::autodiff::softmax_pair(sim_normal / tau, sim_abnormal / tau);
    s.1
}

/// Object-wise anomaly score: mean class token over views, two-way softmax
/// against the text features, abnormal probability.
pub fn anomaly_score(encodings: &[ImageEncoding], text: &TextEncoding, tau: f64) -> Result<f64> {
    if encodings.is_empty() {
        return Err(Error::Scoring("no views to score".into()));
    }
    let dim = encodings[0].class_token.cols();
    let mut mean = vec![0.0; dim];
    for e in encodings {
        for (m, v) in mean.iter_mut().zip(e.class_token.row(0)) {
            *m += v;
        }
    }
    let n = encodings.len() as f64;
    for m in mean.iter_mut() {
        *m /= n;
    }
    let sim = |row: &[f64]| -> f64 { mean.iter().zip(row).map(|(a, b)| a * b).sum() };
    Ok(pair_softmax_abnormal(
        sim(text.features.row(0)),
        sim(text.features.row(1)),
        tau,
    ))
}

/// Per-point abnormal probability; invisible points fall back to 0.5.
pub fn anomaly_map(points: &PointFeatures, text: &TextEncoding, tau: f64) -> Vec<f64> {
    let g_n = text.features.row(0);
    let g_a = text.features.row(1);
    (0..points.features.rows())
        .map(|i| {
            if points.visible[i] == 0 {
                return 0.5;
            }
            let row = points.features.row(i);
            let s_n: f64 = row.iter().zip(g_n).map(|(a, b)| a * b).sum();
            let s_a: f64 = row.iter().zip(g_a).map(|(a, b)| a * b).sum();
            pair_softmax_abnormal(s_n, s_a, tau)
        })
        .collect()
}

/// How per-view or per-point evidence is fused.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reducer {
    Mean,
    Max,
}

impl Reducer {
    fn reduce(&self, values: &[f64]) -> f64 {
        match self {
            Reducer::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Reducer::Max => values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Output of an arbitrary single-view 2D scorer: a pixel score map in
/// `[0, 1]` plus a view-level scalar.
#[derive(Clone, Debug)]
pub struct ViewScore {
    pub width: usize,
    pub height: usize,
    pub pixel_scores: Vec<f64>,
    pub object_score: f64,
}

impl ViewScore {
    pub fn new(width: usize, height: usize, pixel_scores: Vec<f64>, object_score: f64) -> Result<Self> {
        if pixel_scores.len() != width * height {
            return Err(Error::Scoring("pixel score map shape mismatch".into()));
        }
        if !(0.0..=1.0).contains(&object_score)
            || pixel_scores.iter().any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::Scoring("view scores must lie in [0,1]".into()));
        }
        Ok(ViewScore {
            width,
            height,
            pixel_scores,
            object_score,
        })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixel_scores[row * self.width + col]
    }
}

/// Generic integration of plug-in per-view scorers: each point reduces the
/// pixel scores it wins across views, the object score reduces the
/// per-view scalars. Points visible nowhere fall back to 0.5.
pub fn integrate_view_scores(
    scores: &[ViewScore],
    correspondences: &[&CorrespondenceMap],
    n_points: usize,
    reducer: Reducer,
) -> Result<AnomalyResult> {
    if scores.len() != correspondences.len() || scores.is_empty() {
        return Err(Error::Scoring(
            "need matching non-empty score and correspondence lists".into(),
        ));
    }
    for (s, c) in scores.iter().zip(correspondences) {
        if s.width != c.width || s.height != c.height {
            return Err(Error::Scoring("score map and correspondence shapes differ".into()));
        }
    }
    let mut map = Vec::with_capacity(n_points);
    let mut buf = Vec::new();
    for i in 0..n_points {
        buf.clear();
        for (s, c) in scores.iter().zip(correspondences) {
            for &(_, row, col) in &c.point_to_pixels[i] {
                buf.push(s.at(row, col));
            }
        }
        map.push(if buf.is_empty() { 0.5 } else { reducer.reduce(&buf) });
    }
    let object: Vec<f64> = scores.iter().map(|s| s.object_score).collect();
    AnomalyResult::new(reducer.reduce(&object), map)
}

/// Graph version of [`anomaly_map`] over the visible-point features;
/// scatters into an `n×1` map with 0.5 at invisible rows.
pub fn anomaly_map_graph(
    g: &mut Graph,
    visible_features: Var,
    text: Var,
    tau: f64,
    plan: &AggregationPlan,
) -> Var {
    let logits = g.matmul_nt(visible_features, text);
    let logits = g.scale(logits, 1.0 / tau);
    let probs = g.softmax_rows(logits);
    let abnormal = g.slice_cols(probs, 1, 1);
    g.scatter_rows(abnormal, plan.visible_points.clone(), plan.n_points, 0.5)
}

/// Graph version of [`anomaly_score`] from per-view class tokens.
pub fn anomaly_score_graph(g: &mut Graph, class_tokens: &[Var], text: Var, tau: f64) -> Var {
    let mean = g.mean_of(class_tokens);
    let logits = g.matmul_nt(mean, text);
    let logits = g.scale(logits, 1.0 / tau);
    let probs = g.softmax_rows(logits);
    g.slice_cols(probs, 1, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rendering::DepthView;

    fn const_map(grid: usize, dim: usize, value: f64) -> Tensor {
        Tensor::from_vec(grid * grid, dim, vec![value; grid * grid * dim])
    }

    fn corr_with(
        width: usize,
        height: usize,
        n_points: usize,
        wins: &[(usize, usize, usize)],
    ) -> CorrespondenceMap {
        let mut pixel_to_point = vec![None; width * height];
        let mut point_to_pixels = vec![Vec::new(); n_points];
        for &(point, row, col) in wins {
            pixel_to_point[row * width + col] = Some(point as u32);
            point_to_pixels[point].push((0, row, col));
        }
        CorrespondenceMap {
            width,
            height,
            pixel_to_point,
            point_to_pixels,
        }
    }

    fn rendered_from(corrs: Vec<CorrespondenceMap>) -> RenderedSet {
        let views = corrs
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let depth = DepthView {
                    width: c.width,
                    height: c.height,
                    depth: vec![0.0; c.width * c.height],
                    valid: vec![false; c.width * c.height],
                    view_index: i,
                };
                (depth, c)
            })
            .collect();
        RenderedSet {
            views,
            normalized: vec![],
        }
    }

    fn encoding_with_maps(maps: Vec<Tensor>, grid: usize, dim: usize) -> ImageEncoding {
        ImageEncoding {
            class_token: Tensor::from_vec(1, dim, vec![0.0; dim]),
            key_layer_maps: maps,
            grid,
        }
    }

    #[test]
    fn upsample_constant_map_stays_constant() {
        let map = const_map(2, 3, 0.7);
        let up = upsample_feature_map(&map, 2, 5, 5);
        assert!(up.iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn upsample_same_size_is_identity() {
        let map = Tensor::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let up = upsample_feature_map(&map, 2, 2, 2);
        assert_eq!(up.data(), map.data());
    }

    #[test]
    fn upsample_ramp_matches_hand_bilinear() {
        // Columns {0,1} upsampled to 4 give {0, 1/3, 2/3, 1} per row.
        let map = Tensor::from_vec(4, 1, vec![0.0, 1.0, 0.0, 1.0]);
        let up = upsample_feature_map(&map, 2, 4, 4);
        for r in 0..4 {
            for (c, expect) in [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].iter().enumerate() {
                assert!((up.get(r * 4 + c, 0) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_view_constant_feature_normalizes() {
        let dim = 4;
        let grid = 2;
        let m = 2;
        let corr = corr_with(4, 4, 2, &[(0, 1, 1)]);
        let rendered = rendered_from(vec![corr]);
        let maps = (0..m).map(|_| const_map(grid, dim, 2.0)).collect();
        let enc = encoding_with_maps(maps, grid, dim);
        let feats = aggregate_point_features(&[enc], &rendered, 2).unwrap();
        assert_eq!(feats.visible[0], m as u32);
        assert_eq!(feats.visible[1], 0);
        // Constant vector (2,2,2,2) normalizes to 1/sqrt(dim) per entry.
        let expect = 1.0 / (dim as f64).sqrt();
        for v in feats.features.row(0) {
            assert!((v - expect).abs() < 1e-9);
        }
        assert!(feats.features.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_views_average_then_normalize() {
        let dim = 2;
        let grid = 2;
        let corr_a = corr_with(2, 2, 1, &[(0, 0, 0)]);
        let corr_b = corr_with(2, 2, 1, &[(0, 0, 0)]);
        let rendered = rendered_from(vec![corr_a, corr_b]);
        // One key layer; view features a=(1,0), b=(0,1) at every cell.
        let map_a = Tensor::from_vec(4, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let map_b = Tensor::from_vec(4, 2, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let enc_a = encoding_with_maps(vec![map_a], grid, dim);
        let enc_b = encoding_with_maps(vec![map_b], grid, dim);
        let feats = aggregate_point_features(&[enc_a, enc_b], &rendered, 1).unwrap();
        // Mean is (0.5, 0.5); normalized → (1/√2, 1/√2).
        let expect = std::f64::consts::FRAC_1_SQRT_2;
        for v in feats.features.row(0) {
            assert!((v - expect).abs() < 1e-12);
        }
        assert_eq!(feats.visible[0], 2);
    }

    #[test]
    fn aggregation_matches_brute_force_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(40);
        let (grid, dim, m, n_points, w, h) = (3usize, 5usize, 2usize, 12usize, 9usize, 9usize);
        let mut corrs = Vec::new();
        let mut encs = Vec::new();
        for _ in 0..3 {
            let mut wins = Vec::new();
            let mut taken = std::collections::BTreeSet::new();
            for p in 0..n_points {
                if rng.random::<f64>() < 0.2 {
                    continue;
                }
                for _ in 0..rng.random_range(1..3) {
                    let (r, c) = (rng.random_range(0..h), rng.random_range(0..w));
                    if taken.insert((r, c)) {
                        wins.push((p, r, c));
                    }
                }
            }
            corrs.push(corr_with(w, h, n_points, &wins));
            let maps = (0..m)
                .map(|_| {
                    Tensor::from_vec(
                        grid * grid,
                        dim,
                        (0..grid * grid * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                })
                .collect();
            encs.push(encoding_with_maps(maps, grid, dim));
        }

        // Independent oracle: materialized upsample + triple loop.
        let mut sums = vec![vec![0.0; dim]; n_points];
        let mut counts = vec![0usize; n_points];
        for (corr, enc) in corrs.iter().zip(&encs) {
            let ups: Vec<Tensor> = enc
                .key_layer_maps
                .iter()
                .map(|mp| upsample_feature_map(mp, grid, h, w))
                .collect();
            for p in 0..n_points {
                for &(_, r, c) in &corr.point_to_pixels[p] {
                    for up in &ups {
                        counts[p] += 1;
                        for d in 0..dim {
                            sums[p][d] += up.get(r * w + c, d);
                        }
                    }
                }
            }
        }

        let rendered = rendered_from(corrs);
        let feats = aggregate_point_features(&encs, &rendered, n_points).unwrap();
        for p in 0..n_points {
            if counts[p] == 0 {
                assert_eq!(feats.visible[p], 0);
                continue;
            }
            let mean: Vec<f64> = sums[p].iter().map(|s| s / counts[p] as f64).collect();
            let norm = (mean.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
            for d in 0..dim {
                let expect = mean[d] / norm;
                let got = feats.features.get(p, d);
                assert!(
                    (expect - got).abs() < 1e-10,
                    "point {p} dim {d}: {expect} vs {got}"
                );
            }
        }
    }

    fn text_with_rows(g_n: &[f64], g_a: &[f64]) -> TextEncoding {
        let dim = g_n.len();
        let mut features = Tensor::zeros(2, dim);
        features.row_mut(0).copy_from_slice(g_n);
        features.row_mut(1).copy_from_slice(g_a);
        TextEncoding { features }
    }

    fn encoding_with_class(class: &[f64]) -> ImageEncoding {
        ImageEncoding {
            class_token: Tensor::from_vec(1, class.len(), class.to_vec()),
            key_layer_maps: vec![],
            grid: 0,
        }
    }

    #[test]
    fn equal_similarities_score_half() {
        let text = text_with_rows(&[1.0, 0.0], &[0.0, 1.0]);
        let enc = encoding_with_class(&[0.5, 0.5]);
        let xi = anomaly_score(&[enc], &text, 0.07).unwrap();
        assert!((xi - 0.5).abs() < 1e-12);
    }

    #[test]
    fn score_matches_hand_softmax() {
        // Similarities 0.2 / 0.6 at tau = 1.
        let text = text_with_rows(&[1.0, 0.0], &[0.0, 1.0]);
        let enc = encoding_with_class(&[0.2, 0.6]);
        let xi = anomaly_score(&[enc], &text, 1.0).unwrap();
        let expect = (0.6f64).exp() / ((0.2f64).exp() + (0.6f64).exp());
        assert!((xi - expect).abs() < 1e-12);
        assert!((expect - 0.59868).abs() < 1e-4);
    }

    #[test]
    fn score_saturates_as_tau_shrinks() {
        let text = text_with_rows(&[1.0, 0.0], &[0.0, 1.0]);
        let enc = encoding_with_class(&[0.2, 0.6]);
        let xi = anomaly_score(&[enc], &text, 1e-4).unwrap();
        assert!(xi > 0.999999);
    }

    #[test]
    fn map_orthogonal_feature_is_half_and_invisible_half() {
        let text = text_with_rows(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]);
        let feats = PointFeatures {
            features: Tensor::from_vec(2, 3, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
            visible: vec![2, 0],
        };
        let map = anomaly_map(&feats, &text, 0.07);
        assert!((map[0] - 0.5).abs() < 1e-12);
        assert_eq!(map[1], 0.5);
    }

    #[test]
    fn map_saturates_at_unit_margin() {
        let text = text_with_rows(&[1.0, 0.0], &[0.0, 1.0]);
        let feats = PointFeatures {
            features: Tensor::from_vec(1, 2, vec![0.0, 1.0]),
            visible: vec![1],
        };
        let map = anomaly_map(&feats, &text, 0.07);
        assert!(map[0] > 0.99);
    }

    #[test]
    fn map_is_strictly_monotone_in_abnormal_similarity() {
        let text = text_with_rows(&[1.0, 0.0], &[0.0, 1.0]);
        let mut last = 0.0;
        for k in 0..10 {
            let a = -0.5 + k as f64 * 0.1;
            let feats = PointFeatures {
                features: Tensor::from_vec(1, 2, vec![0.3, a]),
                visible: vec![1],
            };
            let v = anomaly_map(&feats, &text, 0.07)[0];
            if k > 0 {
                assert!(v > last);
            }
            last = v;
        }
    }

    #[test]
    fn pair_softmax_sums_to_one() {
        for (a, b) in [(0.3, 0.7), (-2.0, 5.0), (1.0, 1.0)] {
            let p = crate::autodiff::softmax_pair(a, b);
            assert!((p.0 + p.1 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn view_permutation_leaves_map_unchanged() {
        let dim = 3;
        let grid = 2;
        let corr_a = corr_with(2, 2, 2, &[(0, 0, 0), (1, 1, 1)]);
        let corr_b = corr_with(2, 2, 2, &[(0, 0, 1), (1, 1, 0)]);
        let maps_a: Vec<Tensor> = (0..2)
            .map(|l| Tensor::from_vec(4, dim, (0..4 * dim).map(|i| (i + l) as f64 * 0.1).collect()))
            .collect();
        let maps_b: Vec<Tensor> = (0..2)
            .map(|l| Tensor::from_vec(4, dim, (0..4 * dim).map(|i| 1.0 - (i * l) as f64 * 0.05).collect()))
            .collect();
        let enc_a = encoding_with_maps(maps_a, grid, dim);
        let enc_b = encoding_with_maps(maps_b, grid, dim);
        let fwd = aggregate_point_features(
            &[enc_a.clone(), enc_b.clone()],
            &rendered_from(vec![corr_a.clone(), corr_b.clone()]),
            2,
        )
        .unwrap();
        let rev = aggregate_point_features(
            &[enc_b, enc_a],
            &rendered_from(vec![corr_b, corr_a]),
            2,
        )
        .unwrap();
        let text = text_with_rows(&[1.0, 0.0, 0.2], &[0.0, 1.0, -0.1]);
        let map_fwd = anomaly_map(&fwd, &text, 0.07);
        let map_rev = anomaly_map(&rev, &text, 0.07);
        for (a, b) in map_fwd.iter().zip(&map_rev) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn view_order_does_not_change_outputs() {
        let text = text_with_rows(&[0.8, 0.2], &[0.1, 0.9]);
        let encs: Vec<ImageEncoding> = (0..4)
            .map(|i| encoding_with_class(&[0.1 * i as f64, 1.0 - 0.2 * i as f64]))
            .collect();
        let xi = anomaly_score(&encs, &text, 0.07).unwrap();
        let mut rev: Vec<ImageEncoding> = encs.clone();
        rev.reverse();
        let xi_rev = anomaly_score(&rev, &text, 0.07).unwrap();
        assert!((xi - xi_rev).abs() < 1e-12);
    }

    #[test]
    fn integrate_mean_and_max_reducers() {
        let corr = corr_with(2, 1, 2, &[(0, 0, 0), (1, 0, 1)]);
        let corr2 = corr_with(2, 1, 2, &[(0, 0, 0), (1, 0, 1)]);
        let s1 = ViewScore::new(2, 1, vec![0.1, 0.2], 0.2).unwrap();
        let s2 = ViewScore::new(2, 1, vec![0.9, 0.2], 0.4).unwrap();
        let out = integrate_view_scores(
            &[s1.clone(), s2.clone()],
            &[&corr, &corr2],
            2,
            Reducer::Mean,
        )
        .unwrap();
        assert!((out.score - 0.3).abs() < 1e-12);
        assert!((out.map[0] - 0.5).abs() < 1e-12);

        let out = integrate_view_scores(&[s1, s2], &[&corr, &corr2], 2, Reducer::Max).unwrap();
        assert!((out.score - 0.4).abs() < 1e-12);
        assert!((out.map[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn integrate_identical_maps_is_idempotent() {
        let corr = corr_with(2, 1, 3, &[(0, 0, 0), (2, 0, 1)]);
        let corr2 = corr_with(2, 1, 3, &[(0, 0, 0), (2, 0, 1)]);
        let s = ViewScore::new(2, 1, vec![0.3, 0.8], 0.6).unwrap();
        let out =
            integrate_view_scores(&[s.clone(), s.clone()], &[&corr, &corr2], 3, Reducer::Mean)
                .unwrap();
        assert!((out.map[0] - 0.3).abs() < 1e-12);
        assert_eq!(out.map[1], 0.5); // invisible
        assert!((out.map[2] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn view_score_validation() {
        assert!(ViewScore::new(2, 1, vec![0.5], 0.5).is_err());
        assert!(ViewScore::new(1, 1, vec![1.5], 0.5).is_err());
        assert!(ViewScore::new(1, 1, vec![0.5], -0.1).is_err());
    }
}
