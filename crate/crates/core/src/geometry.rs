//! Pinhole camera model, rigid transforms and view rig construction.

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};

/// Depth below which a point counts as behind the camera plane.
pub const EPS_Z: f64 = 1e-6;

/// A point set with optional per-point anomaly labels.
#[derive(Clone, Debug)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    /// Per-point ground truth, 1 = anomalous.
    pub labels: Option<Vec<u8>>,
    /// Object-level ground truth; anomalous iff any point is.
    pub object_label: Option<u8>,
    pub category: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>, category: impl Into<String>) -> Result<Self> {
        let cloud = PointCloud {
            points,
            labels: None,
            object_label: None,
            category: category.into(),
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn with_labels(
        points: Vec<Point3<f64>>,
        labels: Vec<u8>,
        category: impl Into<String>,
    ) -> Result<Self> {
        let object_label = labels.iter().any(|&l| l == 1) as u8;
        let cloud = PointCloud {
            points,
            labels: Some(labels),
            object_label: Some(object_label),
            category: category.into(),
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Geometry("point cloud must contain at least one point".into()));
        }
        for (i, p) in self.points.iter().enumerate() {
            if !p.coords.iter().all(|c| c.is_finite()) {
                return Err(Error::Geometry(format!("non-finite coordinate at point {i}")));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.points.len() {
                return Err(Error::Geometry(format!(
                    "label count {} does not match point count {}",
                    labels.len(),
                    self.points.len()
                )));
            }
            if let Some(bad) = labels.iter().position(|l| *l > 1) {
                return Err(Error::Geometry(format!("label at {bad} is not 0/1")));
            }
            if let Some(obj) = self.object_label {
                let expect = labels.iter().any(|&l| l == 1) as u8;
                if obj != expect {
                    return Err(Error::Geometry(
                        "object label inconsistent with point labels".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Shared pinhole intrinsics, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Geometry("focal lengths must be positive".into()));
        }
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(Error::Geometry("principal point outside the image".into()));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Intrinsics that frame a unit-radius object at the default rig
    /// distance inside a square image: the focal length scales with image
    /// size so the framing is resolution independent.
    pub fn default_for_image_size(size: usize) -> Self {
        let f = 200.0 * size as f64 / 224.0;
        let c = size as f64 / 2.0;
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: c,
            cy: c,
            width: size,
            height: size,
        }
    }
}

/// World-to-camera rigid motion: `x_cam = R·x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let rtr = rotation.transpose() * rotation;
        let dev = (rtr - Matrix3::identity()).abs().max();
        if dev > 1e-9 {
            return Err(Error::Geometry(format!(
                "rotation not orthonormal (deviation {dev:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::Geometry(format!("rotation determinant {det} != 1")));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }
}

/// Shared intrinsics plus an ordered list of camera poses; pose order
/// indexes views everywhere downstream.
#[derive(Clone, Debug)]
pub struct ViewRig {
    pub intrinsics: CameraIntrinsics,
    pub poses: Vec<RigidTransform>,
}

impl ViewRig {
    pub fn n_views(&self) -> usize {
        self.poses.len()
    }
}

/// Successful projection of a point into a view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelDepth {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

/// Outcome of projecting one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Pixel(PixelDepth),
    /// Camera-frame depth at or below [`EPS_Z`].
    Behind,
}

/// Project a world point into pixel coordinates and camera-frame depth.
pub fn project_point(
    p: &Point3<f64>,
    intrinsics: &CameraIntrinsics,
    pose: &RigidTransform,
) -> Result<Projection> {
    if !p.coords.iter().all(|c| c.is_finite()) {
        return Err(Error::Geometry("cannot project non-finite point".into()));
    }
    let cam = pose.rotation * p.coords + pose.translation;
    if cam.z <= EPS_Z {
        return Ok(Projection::Behind);
    }
    Ok(Projection::Pixel(PixelDepth {
        u: intrinsics.cx + intrinsics.fx * cam.x / cam.z,
        v: intrinsics.cy + intrinsics.fy * cam.y / cam.z,
        z: cam.z,
    }))
}

/// Exact left inverse of [`project_point`] for depths above [`EPS_Z`].
pub fn back_project(
    u: f64,
    v: f64,
    z: f64,
    intrinsics: &CameraIntrinsics,
    pose: &RigidTransform,
) -> Result<Point3<f64>> {
    if z <= EPS_Z {
        return Err(Error::Geometry(format!("cannot back-project depth {z}")));
    }
    let cam = Vector3::new(
        (u - intrinsics.cx) / intrinsics.fx * z,
        (v - intrinsics.cy) / intrinsics.fy * z,
        z,
    );
    let world = pose.rotation.transpose() * (cam - pose.translation);
    Ok(Point3::from(world))
}

const ELEVATION_DEG: f64 = 35.0;

fn look_at_pose(position: Vector3<f64>, center: Vector3<f64>) -> RigidTransform {
    let forward = (center - position).normalize();
    let mut up_hint = Vector3::new(0.0, 0.0, 1.0);
    if forward.dot(&up_hint).abs() > 0.999 {
        up_hint = Vector3::new(1.0, 0.0, 0.0);
    }
    let right = forward.cross(&up_hint).normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let translation = -rotation * position;
    RigidTransform {
        rotation,
        translation,
    }
}

/// Deterministic look-at rig on a sphere around `center`.
///
/// Nine views use eight cameras at 45° azimuth steps at +35° elevation plus
/// a top-down camera; other counts spread azimuths evenly at +35°, adding
/// the top-down camera last for odd counts above one.
pub fn generate_view_rig(
    n_views: usize,
    radius: f64,
    center: &Point3<f64>,
    intrinsics: &CameraIntrinsics,
) -> Result<ViewRig> {
    if n_views == 0 {
        return Err(Error::Geometry("a rig needs at least one view".into()));
    }
    if radius <= 0.0 {
        return Err(Error::Geometry("rig radius must be positive".into()));
    }
    let with_top = n_views > 1 && n_views % 2 == 1;
    let n_ring = if with_top { n_views - 1 } else { n_views };
    let elev = ELEVATION_DEG.to_radians();
    let mut poses = Vec::with_capacity(n_views);
    for i in 0..n_ring {
        let az = 2.0 * std::f64::consts::PI * i as f64 / n_ring as f64;
        let dir = Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
        poses.push(look_at_pose(center.coords + radius * dir, center.coords));
    }
    if with_top {
        let dir = Vector3::new(0.0, 0.0, 1.0);
        poses.push(look_at_pose(center.coords + radius * dir, center.coords));
    }
    Ok(ViewRig {
        intrinsics: *intrinsics,
        poses,
    })
}

/// Center the cloud at its centroid and scale the farthest point to unit
/// distance. A degenerate cloud (all points coincident) is centered only.
pub fn normalize_cloud(cloud: &PointCloud) -> PointCloud {
    let n = cloud.len() as f64;
    let centroid = cloud
        .points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.coords)
        / n;
    let max_dist = cloud
        .points
        .iter()
        .map(|p| (p.coords - centroid).norm())
        .fold(0.0f64, f64::max);
    let scale = if max_dist > 0.0 { 1.0 / max_dist } else { 1.0 };
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| Point3::from((p.coords - centroid) * scale))
            .collect(),
        labels: cloud.labels.clone(),
        object_label: cloud.object_label,
        category: cloud.category.clone(),
    }
}
