use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{generate_shape, make_partial, read_xyz, write_xyz, DataError, ShapeKind, ShapeSpec};
use crate::geometry::PointCloud;
use crate::seed::{derive_seed, stream_rng, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub samples: usize,
    pub partial_points: usize,
    pub complete_points: usize,
    pub keep_fraction: f64,
    /// Per-axis scales are drawn from `[1 - scale_jitter, 1 + scale_jitter]`.
    pub scale_jitter: f64,
    /// Roll and pitch are drawn from `[-tilt, tilt]`; yaw is unrestricted.
    pub tilt: f64,
    /// Set from the run's global seed rather than from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            partial_points: 512,
            complete_points: 2048,
            keep_fraction: 0.5,
            scale_jitter: 0.3,
            tilt: 0.25,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.samples == 0 {
            return Err(DataError::Count("dataset needs at least one sample".into()));
        }
        if self.partial_points == 0 || self.complete_points == 0 {
            return Err(DataError::Count("point counts must be at least 1".into()));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(DataError::KeepFraction(self.keep_fraction));
        }
        if !(0.0..1.0).contains(&self.scale_jitter) || !(self.tilt >= 0.0 && self.tilt.is_finite()) {
            return Err(DataError::Count(format!(
                "scale_jitter must lie in [0, 1) and tilt must be finite and nonnegative, got {} and {}",
                self.scale_jitter, self.tilt
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub partial: PointCloud,
    pub complete: PointCloud,
    pub label: ShapeKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DataError::UnknownSplit(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SamplePair>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn split_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split(&self, split: Split) -> Vec<SamplePair> {
        self.split_indices(split)
            .iter()
            .map(|&i| self.samples[i].clone())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub partial_path: String,
    pub complete_path: String,
    pub label: ShapeKind,
}

/// Centers the bounding box of `reference` at the origin and scales its
/// longest side to 1, applying the same map to every cloud in `others`.
pub fn normalize_unit_cube(reference: &PointCloud, others: &[&PointCloud]) -> (PointCloud, Vec<PointCloud>) {
    let (lo, hi) = reference.bounding_box();
    let center = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
    let s = if extent > 0.0 { 1.0 / extent } else { 1.0 };
    let map = |c: &PointCloud| {
        let pts = c
            .points()
            .iter()
            .map(|p| [0, 1, 2].map(|a| ((p[a] - center[a]) * s).clamp(-0.5, 0.5)))
            .collect();
        PointCloud::new(pts).expect("finite points stay finite")
    };
    (map(reference), others.iter().map(|c| map(c)).collect())
}

/// Sample `index` of the dataset: shape kinds cycle through all five, so
/// any run of five consecutive samples is balanced.
pub fn generate_pair(config: &DatasetConfig, index: usize) -> Result<SamplePair, DataError> {
    let kind = ShapeKind::ALL[index % ShapeKind::ALL.len()];
    let mut rng = stream_rng(config.seed, streams::SHAPE, index as u64);
    let j = config.scale_jitter;
    let scale = [0; 3].map(|_| rng.gen_range(1.0 - j..=1.0 + j));
    let t = config.tilt;
    let pose = [
        rng.gen_range(-t..=t),
        rng.gen_range(-t..=t),
        rng.gen_range(0.0..2.0 * PI),
    ];
    let spec = ShapeSpec {
        kind,
        scale,
        pose,
        seed: derive_seed(config.seed, streams::SHAPE, (index as u64) | (1 << 63)),
    };
    let raw = generate_shape(&spec, config.complete_points)?;
    let (complete, _) = normalize_unit_cube(&raw, &[]);

    let mut rng = stream_rng(config.seed, streams::PARTIAL, index as u64);
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..2.0 * PI);
    let rho = (1.0 - z * z).max(0.0).sqrt();
    let view = [rho * phi.cos(), rho * phi.sin(), z];
    let partial = make_partial(&complete, view, config.keep_fraction, config.partial_points, &mut rng)?;
    Ok(SamplePair {
        partial,
        complete,
        label: kind,
    })
}

/// Generates every sample and an 80/10/10 train/val/test split by seeded
/// shuffle. A pure function of the config.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    let samples = (0..config.samples)
        .map(|i| generate_pair(config, i))
        .collect::<Result<Vec<_>, _>>()?;
    let mut order: Vec<usize> = (0..config.samples).collect();
    order.shuffle(&mut stream_rng(config.seed, streams::SPLIT, 0));
    let n = config.samples;
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut test = order.split_off(n_train + n_val);
    let mut val = order.split_off(n_train);
    let mut train = order;
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Dataset {
        samples,
        train,
        val,
        test,
    })
}

fn entry_for(i: usize, label: ShapeKind) -> ManifestEntry {
    ManifestEntry {
        partial_path: format!("clouds/{i:05}_partial.xyz"),
        complete_path: format!("clouds/{i:05}_complete.xyz"),
        label,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| DataError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| DataError::io(path, e))
}

/// Writes `manifest.json` (all samples), one manifest per split, and the
/// XYZ files under `clouds/`. Paths in manifests are relative to `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    let clouds = dir.join("clouds");
    fs::create_dir_all(&clouds).map_err(|e| DataError::io(&clouds, e))?;
    let entries: Vec<ManifestEntry> = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| entry_for(i, s.label))
        .collect();
    for (s, e) in dataset.samples.iter().zip(&entries) {
        write_xyz(&dir.join(&e.partial_path), &s.partial)?;
        write_xyz(&dir.join(&e.complete_path), &s.complete)?;
    }
    write_json(&dir.join("manifest.json"), &entries)?;
    for split in Split::ALL {
        let subset: Vec<&ManifestEntry> = dataset
            .split_indices(split)
            .iter()
            .map(|&i| &entries[i])
            .collect();
        write_json(&dir.join(format!("{split}.json")), &subset)?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

/// Loads the samples listed in `<dir>/<split>.json`.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<SamplePair>, DataError> {
    read_manifest(&dir.join(format!("{split}.json")))?
        .into_iter()
        .map(|e| {
            Ok(SamplePair {
                partial: read_xyz(&resolve(dir, &e.partial_path))?,
                complete: read_xyz(&resolve(dir, &e.complete_path))?,
                label: e.label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            samples: 20,
            partial_points: 64,
            complete_points: 256,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn pairs_are_normalized_and_sized() {
        let ds = generate_dataset(&DatasetConfig {
            samples: 10,
            ..DatasetConfig::default()
        })
        .unwrap();
        for s in &ds.samples {
            assert_eq!(s.complete.len(), 2048);
            assert_eq!(s.partial.len(), 512);
            for c in [&s.complete, &s.partial] {
                assert!(c.points().iter().flatten().all(|v| v.abs() <= 0.5));
            }
            let (lo, hi) = s.complete.bounding_box();
            let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
            assert!((extent - 1.0).abs() < 1e-12);
            for a in 0..3 {
                assert!((lo[a] + hi[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn split_is_80_10_10_and_disjoint() {
        let ds = generate_dataset(&small()).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (16, 2, 2));
        let mut all: Vec<usize> = ds.train.iter().chain(&ds.val).chain(&ds.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_dataset(&small()).unwrap(), generate_dataset(&small()).unwrap());
        let other = generate_dataset(&DatasetConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(other.samples[0], generate_dataset(&small()).unwrap().samples[0]);
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(generate_dataset(&DatasetConfig { samples: 0, ..small() }).is_err());
    }

    #[test]
    fn disk_round_trip() {
        let ds = generate_dataset(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let all = read_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(all.len(), 20);
        assert_eq!(all[3].label, ShapeKind::Lamp);
        for split in Split::ALL {
            assert_eq!(load_split(dir.path(), split).unwrap(), ds.split(split));
        }
    }
}
