//! Point splatting into per-view depth images with exact pixel↔point
//! correspondence.
//!
//! Every point is splatted onto the square of pixels around the pixel
//! containing its projection; per pixel the smallest depth wins, with
//! lower point index breaking ties. The winner table realizes the inverse
//! pixel-to-point mapping used by feature aggregation.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{project_point, PointCloud, Projection, ViewRig};

/// A rendered depth image; `depth` holds camera-frame depth, 0 where the
/// validity mask is unset.
#[derive(Clone, Debug)]
pub struct DepthView {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
    pub view_index: usize,
}

impl DepthView {
    pub fn depth_at(&self, row: usize, col: usize) -> f64 {
        self.depth[row * self.width + col]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }
}

/// Z-buffer winner table for one view, in both directions.
#[derive(Clone, Debug)]
pub struct CorrespondenceMap {
    pub width: usize,
    pub height: usize,
    /// Winning point index per pixel, row-major.
    pub pixel_to_point: Vec<Option<u32>>,
    /// For each point, the `(view, row, col)` pixels it wins.
    pub point_to_pixels: Vec<Vec<(usize, usize, usize)>>,
}

impl CorrespondenceMap {
    pub fn winner(&self, row: usize, col: usize) -> Option<u32> {
        self.pixel_to_point[row * self.width + col]
    }
}

/// Single-channel image with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

/// All views of one cloud: raw depth + correspondences, and the
/// normalized images fed to the encoder.
#[derive(Clone, Debug)]
pub struct RenderedSet {
    pub views: Vec<(DepthView, CorrespondenceMap)>,
    pub normalized: Vec<Image>,
}

impl RenderedSet {
    pub fn n_views(&self) -> usize {
        self.views.len()
    }
}

/// Splat one cloud into one view of the rig.
pub fn render_view(
    cloud: &PointCloud,
    rig: &ViewRig,
    view_index: usize,
    splat_radius: usize,
) -> Result<(DepthView, CorrespondenceMap)> {
    if cloud.is_empty() {
        return Err(Error::Rendering("cannot render an empty cloud".into()));
    }
    if view_index >= rig.n_views() {
        return Err(Error::Rendering(format!(
            "view index {view_index} out of range for {}-view rig",
            rig.n_views()
        )));
    }
    let k = &rig.intrinsics;
    let (w, h) = (k.width, k.height);
    let pose = &rig.poses[view_index];
    let mut depth = vec![0.0f64; w * h];
    let mut winner = vec![None::<u32>; w * h];

    for (i, p) in cloud.points.iter().enumerate() {
        let Projection::Pixel(px) = project_point(p, k, pose)? else {
            continue;
        };
        let (base_c, base_r) = (px.u.floor() as i64, px.v.floor() as i64);
        let r = splat_radius as i64;
        for row in (base_r - r).max(0)..=(base_r + r).min(h as i64 - 1) {
            if base_r - r > h as i64 - 1 || base_r + r < 0 {
                break;
            }
            for col in (base_c - r).max(0)..=(base_c + r).min(w as i64 - 1) {
                if base_c - r > w as i64 - 1 || base_c + r < 0 {
                    break;
                }
                let idx = row as usize * w + col as usize;
                // Strict less-than keeps the lowest point index on ties.
                if winner[idx].is_none() || px.z < depth[idx] {
                    depth[idx] = px.z;
                    winner[idx] = Some(i as u32);
                }
            }
        }
    }

    let mut point_to_pixels = vec![Vec::new(); cloud.len()];
    for row in 0..h {
        for col in 0..w {
            if let Some(i) = winner[row * w + col] {
                point_to_pixels[i as usize].push((view_index, row, col));
            }
        }
    }
    let valid: Vec<bool> = winner.iter().map(|w| w.is_some()).collect();
    Ok((
        DepthView {
            width: w,
            height: h,
            depth,
            valid,
            view_index,
        },
        CorrespondenceMap {
            width: w,
            height: h,
            pixel_to_point: winner,
            point_to_pixels,
        },
    ))
}

/// Min-max normalize a depth view into `[0, 1]` with near-bright polarity;
/// invalid pixels map to 0. A constant-depth view maps every valid pixel
/// to 1.
pub fn normalize_depth(view: &DepthView) -> Image {
    let mut d_min = f64::INFINITY;
    let mut d_max = f64::NEG_INFINITY;
    for (d, ok) in view.depth.iter().zip(view.valid.iter()) {
        if *ok {
            d_min = d_min.min(*d);
            d_max = d_max.max(*d);
        }
    }
    let mut data = vec![0.0; view.depth.len()];
    if d_min.is_finite() {
        let range = d_max - d_min + 1e-12;
        for (out, (d, ok)) in data.iter_mut().zip(view.depth.iter().zip(view.valid.iter())) {
            if *ok {
                *out = 1.0 - (d - d_min) / range;
            }
        }
    }
    Image {
        width: view.width,
        height: view.height,
        data,
    }
}

/// Render and normalize every view of the rig.
pub fn render_all(cloud: &PointCloud, rig: &ViewRig, splat_radius: usize) -> Result<RenderedSet> {
    let mut views = Vec::with_capacity(rig.n_views());
    for k in 0..rig.n_views() {
        views.push(render_view(cloud, rig, k, splat_radius)?);
    }
    let normalized = views.iter().map(|(v, _)| normalize_depth(v)).collect();
    Ok(RenderedSet { views, normalized })
}

/// Fraction of points that win at least one pixel in at least one view.
pub fn coverage(rendered: &RenderedSet, n_points: usize) -> f64 {
    if n_points == 0 {
        return 0.0;
    }
    let mut seen = vec![false; n_points];
    for (_, corr) in &rendered.views {
        for (i, pixels) in corr.point_to_pixels.iter().enumerate() {
            if !pixels.is_empty() {
                seen[i] = true;
            }
        }
    }
    seen.iter().filter(|s| **s).count() as f64 / n_points as f64
}

/// Write the normalized views as 16-bit grayscale PNGs plus 8-bit mask
/// PNGs, named `<cloud_id>_view<k>.png` / `<cloud_id>_view<k>_mask.png`.
pub fn export_views_png(rendered: &RenderedSet, dir: &Path, cloud_id: &str) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    for (k, img) in rendered.normalized.iter().enumerate() {
        let (w, h) = (img.width as u32, img.height as u32);
        let mut gray = image::ImageBuffer::<image::Luma<u16>, _>::new(w, h);
        for (x, y, px) in gray.enumerate_pixels_mut() {
            let v = img.at(y as usize, x as usize).clamp(0.0, 1.0);
            *px = image::Luma([(v * 65535.0).round() as u16]);
        }
        let path = dir.join(format!("{cloud_id}_view{k}.png"));
        gray.save(&path)
            .map_err(|e| Error::Rendering(format!("writing {}: {e}", path.display())))?;
        written.push(path);

        let view = &rendered.views[k].0;
        let mut mask = image::ImageBuffer::<image::Luma<u8>, _>::new(w, h);
        for (x, y, px) in mask.enumerate_pixels_mut() {
            *px = image::Luma([if view.is_valid(y as usize, x as usize) { 255 } else { 0 }]);
        }
        let path = dir.join(format!("{cloud_id}_view{k}_mask.png"));
        mask.save(&path)
            .map_err(|e| Error::Rendering(format!("writing {}: {e}", path.display())))?;
        written.push(path);
    }
    Ok(written)
}
