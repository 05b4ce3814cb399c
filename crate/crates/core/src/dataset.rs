//! Dataset manifests and the synthetic shape corpus.
//!
//! A manifest is a JSON object with an ordered `categories` list and a
//! `records` list. Each record points at a point-cloud file relative to the
//! manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorTable, Provenance, RowMeta};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::pointcloud::{gen_shape, normalize_unit_sphere, read_cloud, write_cloud, PointCloud, ShapeCategory};
use crate::renderer::{render_depth, CameraRing, StandInImageEncoder};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub pc_path: String,
    pub label: usize,
    pub words: Vec<String>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub categories: Vec<String>,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        fsutil::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json(path, self)
    }

    /// Category names indexed by label. Labels without an explicit name
    /// fall back to the first word of their first record.
    pub fn category_names(&self) -> Vec<String> {
        let classes = self.records.iter().map(|r| r.label + 1).max().unwrap_or(0).max(self.categories.len());
        (0..classes)
            .map(|c| {
                self.categories.get(c).cloned().unwrap_or_else(|| {
                    self.records
                        .iter()
                        .find(|r| r.label == c)
                        .and_then(|r| r.words.first().cloned())
                        .unwrap_or_else(|| format!("class{c}"))
                })
            })
            .collect()
    }
}

/// A manifest with every cloud loaded. Cloud `i` belongs to record `i` and
/// carries its label.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    clouds: Vec<PointCloud>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let clouds = manifest
            .records
            .iter()
            .map(|r| Ok(read_cloud(&root.join(&r.pc_path))?.with_label(Some(r.label))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { root, manifest, clouds })
    }

    pub fn from_parts(root: PathBuf, manifest: Manifest, clouds: Vec<PointCloud>) -> Result<Self> {
        if clouds.len() != manifest.records.len() {
            return Err(Error::LengthMismatch(clouds.len(), manifest.records.len()));
        }
        let clouds = clouds.into_iter().zip(&manifest.records).map(|(c, r)| c.with_label(Some(r.label))).collect();
        Ok(Dataset { root, manifest, clouds })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn records(&self) -> &[Record] {
        &self.manifest.records
    }

    pub fn cloud(&self, i: usize) -> &PointCloud {
        &self.clouds[i]
    }

    pub fn category_names(&self) -> Vec<String> {
        self.manifest.category_names()
    }

    /// Record indices in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.manifest.records.len()).filter(|&i| self.manifest.records[i].split == split).collect()
    }

    /// `(object id, label)` for every record.
    pub fn objects(&self) -> Vec<(String, usize)> {
        self.manifest.records.iter().map(|r| (r.id.clone(), r.label)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub categories: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    /// Points stored per object file.
    pub source_points: usize,
    pub noise: f64,
    /// Per-axis stretch drawn from `[1 - variation, 1 + variation]`.
    pub variation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { categories: 8, per_class: 40, test_per_class: 10, source_points: 1024, noise: 0.01, variation: 0.3, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(2..=ShapeCategory::ALL.len()).contains(&self.categories) {
            return bad(format!("categories must be in 2..=8, got {}", self.categories));
        }
        if self.per_class == 0 {
            return bad("per_class must be positive".into());
        }
        if !(0.0..1.0).contains(&self.variation) || !(self.noise >= 0.0) {
            return bad("variation must be in [0,1) and noise non-negative".into());
        }
        Ok(())
    }
}

/// One synthetic object: a shape instance with a random per-axis stretch
/// and a random turn about the up axis, renormalized.
fn synth_object(category: ShapeCategory, cfg: &SynthConfig, rng: &mut Rng) -> Result<PointCloud> {
    let base = gen_shape(category, cfg.source_points, cfg.noise, rng)?;
    let stretch: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(1.0 - cfg.variation, 1.0 + cfg.variation));
    let turn = rng.uniform_range(0.0, std::f64::consts::TAU);
    let stretched = base.map_points(|p| [p[0] * stretch[0], p[1] * stretch[1], p[2] * stretch[2]]);
    Ok(normalize_unit_sphere(&stretched.rotate_z(turn)).with_label(Some(category.id())))
}

/// Builds the synthetic corpus in memory. Object ids look like
/// `cube_train_007`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Manifest, Vec<PointCloud>)> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed, 0);
    let mut manifest = Manifest::default();
    let mut clouds = Vec::new();
    for &category in &ShapeCategory::ALL[..cfg.categories] {
        manifest.categories.push(category.name().to_owned());
        for (split, count) in [(Split::Train, cfg.per_class), (Split::Test, cfg.test_per_class)] {
            let tag = if split == Split::Train { "train" } else { "test" };
            for i in 0..count {
                let id = format!("{}_{tag}_{i:03}", category.name());
                let mut rng = root.derive(&format!("synthetic.{id}"), 0);
                clouds.push(synth_object(category, cfg, &mut rng)?);
                manifest.records.push(Record {
                    pc_path: format!("clouds/{id}.pc"),
                    id,
                    label: category.id(),
                    words: vec![category.name().to_owned()],
                    split,
                });
            }
        }
    }
    Ok((manifest, clouds))
}

/// Writes the synthetic corpus under `out_dir` and returns the manifest path.
pub fn write_synthetic(out_dir: &Path, cfg: &SynthConfig) -> Result<PathBuf> {
    let (manifest, clouds) = generate_synthetic(cfg)?;
    for (r, c) in manifest.records.iter().zip(&clouds) {
        write_cloud(&out_dir.join(&r.pc_path), c)?;
    }
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

/// Renders every record's views and embeds them with the stand-in image
/// encoder.
pub fn stand_in_image_table(ds: &Dataset, ring: &CameraRing, encoder: &StandInImageEncoder) -> Result<AnchorTable> {
    let mut meta = Vec::new();
    let mut data = Vec::new();
    for (i, r) in ds.records().iter().enumerate() {
        let pc = normalize_unit_sphere(ds.cloud(i));
        for v in 0..ring.view_count {
            let map = render_depth(&pc, ring, v, encoder.resolution())?;
            meta.push(RowMeta::image(&r.id, v));
            data.extend(encoder.embed(&map)?);
        }
    }
    AnchorTable::new(encoder.dim(), Provenance::StandIn, meta, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { categories: 3, per_class: 2, test_per_class: 1, source_points: 64, ..SynthConfig::default() }
    }

    #[test]
    fn synthetic_layout() {
        let (m, clouds) = generate_synthetic(&small()).unwrap();
        assert_eq!(m.categories, vec!["sphere", "cube", "cylinder"]);
        assert_eq!(m.records.len(), 9);
        assert_eq!(clouds.len(), 9);
        assert_eq!(m.records.iter().filter(|r| r.split == Split::Test).count(), 3);
        assert_eq!(m.records[3].id, "cube_train_000");
        for c in &clouds {
            assert_eq!(c.len(), 64);
            assert!((c.max_radius() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let (_, a) = generate_synthetic(&small()).unwrap();
        let (_, b) = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let (_, c) = generate_synthetic(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn write_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_synthetic(dir.path(), &small()).unwrap();
        let ds = Dataset::load(&path).unwrap();
        let (_, clouds) = generate_synthetic(&small()).unwrap();
        assert_eq!(ds.records().len(), 9);
        for (i, c) in clouds.iter().enumerate() {
            assert_eq!(ds.cloud(i).points(), c.points());
            assert_eq!(ds.cloud(i).label(), Some(ds.records()[i].label));
        }
        assert_eq!(ds.indices(Split::Test), vec![2, 5, 8]);
    }

    #[test]
    fn names_fall_back_to_words() {
        let m = Manifest {
            categories: vec![],
            records: vec![Record { id: "a".into(), pc_path: "a.pc".into(), label: 1, words: vec!["mug".into()], split: Split::Train }],
        };
        assert_eq!(m.category_names(), vec!["class0", "mug"]);
    }

    #[test]
    fn bad_config_is_rejected() {
        assert!(generate_synthetic(&SynthConfig { categories: 9, ..small() }).is_err());
        assert!(generate_synthetic(&SynthConfig { per_class: 0, ..small() }).is_err());
    }
}
