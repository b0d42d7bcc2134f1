//! Category-disjoint synthetic benchmark: primitive surfaces with local
//! surface defects (bump, dent, hole, flash).

use nalgebra::{Point3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Defect families. Bump/dent/flash displace a local neighborhood along
/// (or obliquely to) the surface normal; hole removes a disk of points and
/// labels the surviving rim.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnomalyType {
    Bump,
    Dent,
    Hole,
    Flash,
}

impl AnomalyType {
    pub const ALL: [AnomalyType; 4] = [
        AnomalyType::Bump,
        AnomalyType::Dent,
        AnomalyType::Hole,
        AnomalyType::Flash,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bump" => Ok(AnomalyType::Bump),
            "dent" => Ok(AnomalyType::Dent),
            "hole" => Ok(AnomalyType::Hole),
            "flash" => Ok(AnomalyType::Flash),
            other => Err(Error::Data(format!("unknown anomaly type `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AnomalyType::Bump => "bump",
            AnomalyType::Dent => "dent",
            AnomalyType::Hole => "hole",
            AnomalyType::Flash => "flash",
        }
    }
}

/// Analytic base surfaces. Each can sample uniform surface points with
/// normals and report the exact distance of a query point to the surface.
#[derive(Clone, Debug)]
pub enum BaseShape {
    Sphere { radius: f64 },
    Box { half: Vector3<f64> },
    Cylinder { radius: f64, half_height: f64 },
    Torus { major: f64, minor: f64 },
    Cone { radius: f64, height: f64 },
}

fn unit_gauss_dir(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(gauss(rng), gauss(rng), gauss(rng));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Distance of 2D point `p` to segment `a`-`b`.
fn segment_distance_2d(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = ((px * dx + py * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

impl BaseShape {
    /// Sample a category's shape with per-cloud parameter jitter.
    pub fn sample_for_category(category: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        let u = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.random_range(lo..hi);
        Ok(match category {
            "sphere" => BaseShape::Sphere {
                radius: u(rng, 0.9, 1.1),
            },
            "box" => BaseShape::Box {
                half: Vector3::new(u(rng, 0.45, 0.95), u(rng, 0.45, 0.95), u(rng, 0.45, 0.95)),
            },
            "cylinder" => BaseShape::Cylinder {
                radius: u(rng, 0.4, 0.7),
                half_height: u(rng, 0.6, 1.0),
            },
            "torus" => BaseShape::Torus {
                major: u(rng, 0.6, 0.8),
                minor: u(rng, 0.2, 0.32),
            },
            "cone" => BaseShape::Cone {
                radius: u(rng, 0.5, 0.8),
                height: u(rng, 1.0, 1.6),
            },
            other => return Err(Error::Data(format!("unknown category `{other}`"))),
        })
    }

    /// One uniform surface sample with its outward normal.
    pub fn sample_point(&self, rng: &mut ChaCha8Rng) -> (Point3<f64>, Vector3<f64>) {
        match self {
            BaseShape::Sphere { radius } => {
                let n = unit_gauss_dir(rng);
                (Point3::from(n * *radius), n)
            }
            BaseShape::Box { half } => {
                // Face picked proportional to area.
                let areas = [
                    half.y * half.z, // ±x
                    half.x * half.z, // ±y
                    half.x * half.y, // ±z
                ];
                let total: f64 = areas.iter().sum::<f64>() * 2.0;
                let mut pick = rng.random::<f64>() * total;
                let mut axis = 0usize;
                let mut sign = 1.0;
                'outer: for (a, &area) in areas.iter().enumerate() {
                    for s in [1.0, -1.0] {
                        if pick < area {
                            axis = a;
                            sign = s;
                            break 'outer;
                        }
                        pick -= area;
                    }
                }
                let mut p = Vector3::new(
                    rng.random_range(-half.x..half.x),
                    rng.random_range(-half.y..half.y),
                    rng.random_range(-half.z..half.z),
                );
                p[axis] = sign * half[axis];
                let mut n = Vector3::zeros();
                n[axis] = sign;
                (Point3::from(p), n)
            }
            BaseShape::Cylinder {
                radius,
                half_height,
            } => {
                let side = 2.0 * std::f64::consts::PI * radius * 2.0 * half_height;
                let caps = 2.0 * std::f64::consts::PI * radius * radius;
                if rng.random::<f64>() * (side + caps) < side {
                    let theta = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                    let z = rng.random_range(-half_height..*half_height);
                    let n = Vector3::new(theta.cos(), theta.sin(), 0.0);
                    (Point3::new(radius * n.x, radius * n.y, z), n)
                } else {
                    let theta = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                    let r = radius * rng.random::<f64>().sqrt();
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    (
                        Point3::new(r * theta.cos(), r * theta.sin(), sign * half_height),
                        Vector3::new(0.0, 0.0, sign),
                    )
                }
            }
            BaseShape::Torus { major, minor } => {
                let u = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                // Rejection in v against the surface Jacobian (R + r cos v).
                let v = loop {
                    let v = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                    let accept = (major + minor * v.cos()) / (major + minor);
                    if rng.random::<f64>() < accept {
                        break v;
                    }
                };
                let ring = major + minor * v.cos();
                let p = Point3::new(ring * u.cos(), ring * u.sin(), minor * v.sin());
                let n = Vector3::new(v.cos() * u.cos(), v.cos() * u.sin(), v.sin());
                (p, n)
            }
            BaseShape::Cone { radius, height } => {
                let slant = (radius * radius + height * height).sqrt();
                let side = std::f64::consts::PI * radius * slant;
                let base = std::f64::consts::PI * radius * radius;
                let theta = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                if rng.random::<f64>() * (side + base) < side {
                    // Uniform over the lateral surface: area grows with t².
                    let t = rng.random::<f64>().sqrt();
                    let rho = radius * t;
                    let z = height * (1.0 - t);
                    let n = Vector3::new(height * theta.cos(), height * theta.sin(), *radius)
                        .normalize();
                    (Point3::new(rho * theta.cos(), rho * theta.sin(), z), n)
                } else {
                    let r = radius * rng.random::<f64>().sqrt();
                    (
                        Point3::new(r * theta.cos(), r * theta.sin(), 0.0),
                        Vector3::new(0.0, 0.0, -1.0),
                    )
                }
            }
        }
    }

    /// Exact (unsigned) distance to the surface.
    pub fn surface_distance(&self, p: &Point3<f64>) -> f64 {
        match self {
            BaseShape::Sphere { radius } => (p.coords.norm() - radius).abs(),
            BaseShape::Box { half } => {
                let q = Vector3::new(
                    p.x.abs() - half.x,
                    p.y.abs() - half.y,
                    p.z.abs() - half.z,
                );
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                (outside + inside).abs()
            }
            BaseShape::Cylinder {
                radius,
                half_height,
            } => {
                let rho = (p.x * p.x + p.y * p.y).sqrt();
                let dx = rho - radius;
                let dz = p.z.abs() - half_height;
                let outside = (dx.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                let inside = dx.max(dz).min(0.0);
                (outside + inside).abs()
            }
            BaseShape::Torus { major, minor } => {
                let rho = (p.x * p.x + p.y * p.y).sqrt();
                (((rho - major).powi(2) + p.z * p.z).sqrt() - minor).abs()
            }
            BaseShape::Cone { radius, height } => {
                let rho = (p.x * p.x + p.y * p.y).sqrt();
                let side = segment_distance_2d((rho, p.z), (*radius, 0.0), (0.0, *height));
                let base = segment_distance_2d((rho, p.z), (0.0, 0.0), (*radius, 0.0));
                side.min(base)
            }
        }
    }
}

/// A generated cloud before the rigid placement, kept for oracle tests.
pub(crate) struct RawCloud {
    pub points: Vec<Point3<f64>>,
    pub labels: Vec<u8>,
    #[cfg_attr(not(test), allow(dead_code))]
    pub shape: BaseShape,
    #[cfg_attr(not(test), allow(dead_code))]
    pub anomaly: Option<(AnomalyType, f64)>,
}

fn tangent_of(normal: &Vector3<f64>) -> Vector3<f64> {
    let hint = if normal.z.abs() < 0.9 {
        Vector3::new(0.0, 0.0, 1.0)
    } else {
        Vector3::new(1.0, 0.0, 0.0)
    };
    normal.cross(&hint).normalize()
}

/// Sample the base surface and apply at most one defect. `area` is the
/// fraction of points affected; displacement magnitude is drawn from
/// 3-8 % of the cloud radius.
pub(crate) fn generate_raw_cloud(
    category: &str,
    n_points: usize,
    anomaly: Option<AnomalyType>,
    area: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RawCloud> {
    let shape = BaseShape::sample_for_category(category, rng)?;
    let mut points = Vec::with_capacity(n_points);
    let mut normals = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let (p, n) = shape.sample_point(rng);
        points.push(p);
        normals.push(n);
    }
    let mut labels = vec![0u8; n_points];

    let Some(kind) = anomaly else {
        return Ok(RawCloud {
            points,
            labels,
            shape,
            anomaly: None,
        });
    };

    let k = ((area * n_points as f64).round() as usize).max(1);
    if k >= n_points {
        return Err(Error::Data(format!(
            "anomaly area {area} leaves no normal points on a {n_points}-point cloud"
        )));
    }
    let radius = points.iter().map(|p| p.coords.norm()).fold(0.0f64, f64::max);
    let magnitude = rng.random_range(0.03..0.08) * radius;
    let seed_idx = rng.random_range(0..n_points);
    let seed_point = points[seed_idx];

    let mut order: Vec<usize> = (0..n_points).collect();
    order.sort_by(|&a, &b| {
        let da = (points[a] - seed_point).norm();
        let db = (points[b] - seed_point).norm();
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    let region: Vec<usize> = order[..k].to_vec();
    let region_radius = (points[region[k - 1]] - seed_point).norm().max(1e-9);

    match kind {
        AnomalyType::Bump | AnomalyType::Dent | AnomalyType::Flash => {
            // Mild interior falloff with a sharp rim, the way molding
            // defects step off the nominal surface.
            for &i in &region {
                let d = (points[i] - seed_point).norm();
                let falloff = 1.0 - 0.3 * (d / region_radius).powi(2);
                let dir = match kind {
                    AnomalyType::Bump => normals[i],
                    AnomalyType::Dent => -normals[i],
                    AnomalyType::Flash => (normals[i] + tangent_of(&normals[i])).normalize(),
                    AnomalyType::Hole => unreachable!(),
                };
                points[i] += dir * magnitude * falloff;
                labels[i] = 1;
            }
        }
        AnomalyType::Hole => {
            let removed: std::collections::BTreeSet<usize> = region.iter().copied().collect();
            let mut rim_radius = region_radius * 1.45;
            loop {
                let rim: Vec<usize> = (0..n_points)
                    .filter(|i| {
                        !removed.contains(i) && (points[*i] - seed_point).norm() <= rim_radius
                    })
                    .collect();
                if !rim.is_empty() {
                    for i in rim {
                        labels[i] = 1;
                    }
                    break;
                }
                rim_radius *= 1.5;
            }
            let mut kept_points = Vec::with_capacity(n_points - k);
            let mut kept_labels = Vec::with_capacity(n_points - k);
            for i in 0..n_points {
                if !removed.contains(&i) {
                    kept_points.push(points[i]);
                    kept_labels.push(labels[i]);
                }
            }
            points = kept_points;
            labels = kept_labels;
        }
    }

    Ok(RawCloud {
        points,
        labels,
        shape,
        anomaly: Some((kind, magnitude)),
    })
}

/// Fixtured placement: free yaw, a small tilt and a small translation,
/// the pose variability of parts scanned in a jig.
pub(crate) fn place_randomly(raw: RawCloud, category: &str, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let yaw = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let tilt = rng.random_range(-0.15..0.15);
    let tilt_dir = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)
        * UnitQuaternion::from_axis_angle(
            &nalgebra::Unit::new_normalize(Vector3::new(tilt_dir.cos(), tilt_dir.sin(), 0.0)),
            tilt,
        );
    let rot = rot.to_rotation_matrix();
    let shift = Vector3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    );
    let points = raw
        .points
        .iter()
        .map(|p| Point3::from(rot * p.coords + shift))
        .collect();
    PointCloud::with_labels(points, raw.labels, category)
}
