//! Synthetic benchmark generation, point cloud file I/O and the dataset
//! manifest.

mod ply;
mod synthetic;

pub use ply::{
    export_colored, label_sidecar_path, load_cloud, load_labels, save_cloud, score_color,
    PlyFormat,
};
pub use synthetic::{AnomalyType, BaseShape};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Known base-shape categories.
pub const CATEGORIES: [&str; 5] = ["sphere", "box", "cylinder", "torus", "cone"];

/// Parameters of the synthetic zero-shot benchmark.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub categories: Vec<String>,
    pub points_per_cloud: usize,
    pub clouds_per_category: usize,
    pub anomaly_types: Vec<AnomalyType>,
    /// Fraction of clouds per category that carry a defect.
    pub anomaly_fraction: f64,
    /// Fraction of points affected by one defect, in (0, 0.3].
    pub anomaly_area: f64,
    /// The first `train_categories` categories form the train split.
    pub train_categories: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            categories: CATEGORIES.iter().map(|s| s.to_string()).collect(),
            points_per_cloud: 800,
            clouds_per_category: 40,
            anomaly_types: AnomalyType::ALL.to_vec(),
            anomaly_fraction: 0.5,
            anomaly_area: 0.12,
            train_categories: 3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Data("at least one category required".into()));
        }
        for c in &self.categories {
            if !CATEGORIES.contains(&c.as_str()) {
                return Err(Error::Data(format!("unknown category `{c}`")));
            }
        }
        if self.points_per_cloud < 8 {
            return Err(Error::Data("points_per_cloud too small".into()));
        }
        if self.clouds_per_category == 0 {
            return Err(Error::Data("clouds_per_category must be positive".into()));
        }
        if !(self.anomaly_area > 0.0 && self.anomaly_area <= 0.3) {
            return Err(Error::Data(format!(
                "anomaly_area {} outside (0, 0.3]",
                self.anomaly_area
            )));
        }
        if !(0.0..=1.0).contains(&self.anomaly_fraction) {
            return Err(Error::Data("anomaly_fraction outside [0, 1]".into()));
        }
        if self.anomaly_fraction > 0.0
            && (self.anomaly_area * self.points_per_cloud as f64) < 1.0
        {
            return Err(Error::Data(
                "anomaly_area × points_per_cloud < 1: no point could be labeled".into(),
            ));
        }
        if self.anomaly_fraction > 0.0 && self.anomaly_types.is_empty() {
            return Err(Error::Data("anomalous clouds requested but no anomaly types".into()));
        }
        if self.train_categories > self.categories.len() {
            return Err(Error::Data("train_categories exceeds category count".into()));
        }
        Ok(())
    }
}

/// Which half of the zero-shot protocol a cloud belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

/// Category-disjoint train/test sets.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train_categories: Vec<String>,
    pub test_categories: Vec<String>,
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
}

fn fnv1a(text: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Generate the benchmark: the first `train_categories` categories form
/// the train split, the rest the test split. Deterministic under the seed.
pub fn generate(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let n_anomalous = (spec.anomaly_fraction * spec.clouds_per_category as f64).round() as usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (ci, category) in spec.categories.iter().enumerate() {
        let is_train = ci < spec.train_categories;
        for idx in 0..spec.clouds_per_category {
            let mut rng =
                ChaCha8Rng::seed_from_u64(spec.seed ^ fnv1a(&format!("{category}/{idx}")));
            let anomaly = if idx < n_anomalous {
                Some(spec.anomaly_types[rng.random_range(0..spec.anomaly_types.len())])
            } else {
                None
            };
            let raw = synthetic::generate_raw_cloud(
                category,
                spec.points_per_cloud,
                anomaly,
                spec.anomaly_area,
                &mut rng,
            )?;
            let cloud = synthetic::place_randomly(raw, category, &mut rng)?;
            if is_train {
                train.push(cloud);
            } else {
                test.push(cloud);
            }
        }
    }
    Ok(DatasetSplit {
        train_categories: spec.categories[..spec.train_categories].to_vec(),
        test_categories: spec.categories[spec.train_categories..].to_vec(),
        train,
        test,
    })
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub category: String,
    /// Path relative to the manifest file.
    pub path: PathBuf,
    pub split: Split,
    pub object_label: u8,
}

/// Write clouds as binary PLY (plus label sidecars) under
/// `dir/{train,test}/` and a tab-separated `manifest.tsv`.
pub fn save_dataset(split: &DatasetSplit, dir: &Path) -> Result<PathBuf> {
    let mut entries = Vec::new();
    for (clouds, which) in [(&split.train, Split::Train), (&split.test, Split::Test)] {
        let sub = dir.join(which.to_string());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut per_category_counter: std::collections::BTreeMap<&str, usize> = Default::default();
        for cloud in clouds {
            let idx = per_category_counter.entry(cloud.category.as_str()).or_insert(0);
            let name = format!("{}_{:03}.ply", cloud.category, idx);
            *idx += 1;
            let path = sub.join(&name);
            save_cloud(cloud, &path, PlyFormat::BinaryLittleEndian)?;
            entries.push(ManifestEntry {
                category: cloud.category.clone(),
                path: PathBuf::from(which.to_string()).join(&name),
                split: which,
                object_label: cloud.object_label.unwrap_or(0),
            });
        }
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&entries, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut out = String::from("# category\tpath\tsplit\tobject_label\n");
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.category,
            e.path.display(),
            e.split,
            e.object_label
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let object_label: u8 = fields[3].parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("bad object label `{}`", fields[3]),
        })?;
        entries.push(ManifestEntry {
            category: fields[0].to_string(),
            path: PathBuf::from(fields[1]),
            split: Split::parse(fields[2])?,
            object_label,
        });
    }
    Ok(entries)
}

/// Load every cloud a manifest lists, restoring categories from the
/// manifest and checking object labels against the sidecars.
pub fn load_dataset(manifest_path: &Path) -> Result<DatasetSplit> {
    let entries = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut train_categories = Vec::new();
    let mut test_categories = Vec::new();
    for e in &entries {
        let mut cloud = load_cloud(&base.join(&e.path))?;
        cloud.category = e.category.clone();
        if let Some(obj) = cloud.object_label {
            if obj != e.object_label {
                return Err(Error::Data(format!(
                    "{}: manifest object label {} disagrees with sidecar ({})",
                    e.path.display(),
                    e.object_label,
                    obj
                )));
            }
        }
        let (clouds, cats) = match e.split {
            Split::Train => (&mut train, &mut train_categories),
            Split::Test => (&mut test, &mut test_categories),
        };
        if !cats.contains(&e.category) {
            cats.push(e.category.clone());
        }
        clouds.push(cloud);
    }
    Ok(DatasetSplit {
        train_categories,
        test_categories,
        train,
        test,
    })
}
