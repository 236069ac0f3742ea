//! Dataset directories: a JSON manifest listing scan bundles, plus the
//! template mesh, its landmark indices and its mouth region.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Template, Vec3};
use crate::losses::LossContext;
use crate::preprocess::resample;
use crate::synthgen::{landmarks_of, scan_cloud, SynthSample, ToyMorphable};
use crate::training::TrainSample;

use super::landmarks::{read_landmark_indices, read_landmark_positions, write_landmark_indices, write_landmark_positions};
use super::obj::{read_obj, write_obj_mesh};
use super::{read_cloud, read_text, write_cloud, write_text};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Synthetic,
    Real,
}

/// One scan and its side files; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanBundle {
    pub id: String,
    pub geometry: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<PathBuf>,
    /// Corresponded mesh in template vertex order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    pub provenance: SourceKind,
    pub expressive: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<usize>,
    /// Millimetres per model unit, when the scan had physical units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mm_per_unit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateRef {
    pub mesh: PathBuf,
    pub landmarks: PathBuf,
    pub mouth: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub template: TemplateRef,
    pub bundles: Vec<ScanBundle>,
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Loads `path`, which may be the manifest file or its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let manifest: DatasetManifest = serde_json::from_str(&read_text(&file)?).map_err(|e| Error::Parse {
            path: file.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported manifest version {}",
                file.display(),
                manifest.version
            )));
        }
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, manifest })
    }

    pub fn save(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        write_text(&self.root.join(MANIFEST_FILE), &(text + "\n"))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn template(&self) -> Result<Template> {
        let t = &self.manifest.template;
        let mesh = read_obj(self.resolve(&t.mesh))?.into_mesh()?;
        let landmarks = read_landmark_indices(self.resolve(&t.landmarks))?;
        Template::new(mesh, landmarks, t.mouth.clone())
    }

    pub fn geometry(&self, bundle: &ScanBundle) -> Result<PointCloud> {
        read_cloud(self.resolve(&bundle.geometry))
    }

    pub fn ground_truth(&self, bundle: &ScanBundle) -> Result<Option<Vec<Vec3>>> {
        bundle
            .ground_truth
            .as_ref()
            .map(|p| Ok(read_obj(self.resolve(p))?.vertices))
            .transpose()
    }

    /// Checks that every referenced file parses, that synthetic bundles
    /// carry ground truth and that ground truth matches the template size.
    pub fn validate(&self) -> Result<()> {
        let template = self.template()?;
        let mut ids = std::collections::HashSet::new();
        for b in &self.manifest.bundles {
            if !ids.insert(&b.id) {
                return Err(Error::Config(format!("duplicate bundle id `{}`", b.id)));
            }
            self.geometry(b)?;
            if let Some(l) = &b.landmarks {
                read_landmark_positions(self.resolve(l))?;
            }
            match self.ground_truth(b)? {
                Some(gt) if gt.len() != template.vertex_count() => {
                    return Err(Error::shape(template.vertex_count(), gt.len()));
                }
                None if b.provenance == SourceKind::Synthetic => {
                    return Err(Error::Config(format!("synthetic bundle `{}` has no ground truth", b.id)));
                }
                _ => {}
            }
            if let Some(s) = b.mm_per_unit {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::Config(format!("bundle `{}` has invalid mm_per_unit {s}", b.id)));
                }
            }
        }
        Ok(())
    }

    /// Training items for every bundle. Synthetic bundles are supervised by
    /// their ground truth; real bundles use their geometry as the raw target
    /// and an `n`-point resampling of it as encoder input.
    pub fn training_set(&self, ctx: &LossContext, n: usize, seed: u64) -> Result<Vec<TrainSample>> {
        self.manifest
            .bundles
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let cloud = self.geometry(b)?;
                match b.provenance {
                    SourceKind::Synthetic => {
                        let gt = self
                            .ground_truth(b)?
                            .ok_or_else(|| Error::Config(format!("synthetic bundle `{}` has no ground truth", b.id)))?;
                        TrainSample::synthetic(&cloud, gt, b.expressive, ctx)
                    }
                    SourceKind::Real => {
                        let input = resample(&cloud, n, seed.wrapping_add(i as u64), None)?;
                        TrainSample::real(&input, cloud, b.expressive)
                    }
                }
            })
            .collect()
    }
}

/// Options for [`write_toy_dataset`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyExport {
    /// Every `real_every`-th subject is exported as a raw scan; 0 disables.
    pub real_every: usize,
    pub scan_noise: f64,
    pub seed: u64,
}

/// Writes the template and every sample as a bundle: synthetic samples as
/// their shuffled ground-truth cloud, raw-scan subjects as a dense scan
/// cloud. Ground truth and landmark positions are written for all of them.
pub fn write_toy_dataset(dir: impl AsRef<Path>, model: &ToyMorphable, samples: &[SynthSample], export: &ToyExport) -> Result<Dataset> {
    let root = dir.as_ref().to_path_buf();
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let template = &model.template;
    write_obj_mesh(root.join("template.obj"), template.mesh())?;
    write_landmark_indices(root.join("template.lmk"), template.landmarks())?;
    let faces = template.mesh().faces();
    let mut bundles = Vec::with_capacity(samples.len());
    let mut per_subject = std::collections::HashMap::new();
    for s in samples {
        let e: &mut usize = per_subject.entry(s.subject).or_default();
        let id = format!("s{:04}_e{}", s.subject, *e);
        *e += 1;
        let real = export.real_every > 0 && s.subject % export.real_every == export.real_every - 1;
        let cloud = if real {
            scan_cloud(s, faces, export.scan_noise, export.seed ^ (bundles.len() as u64).wrapping_mul(0x9E37_79B9))?
        } else {
            s.input.clone()
        };
        let geometry = PathBuf::from(format!("{id}.ply"));
        write_cloud(root.join(&geometry), &cloud)?;
        let gt = PathBuf::from(format!("{id}_gt.obj"));
        write_obj_mesh(root.join(&gt), &template.mesh().with_vertices(s.ground_truth.clone())?)?;
        let lmk = PathBuf::from(format!("{id}.lmk"));
        write_landmark_positions(root.join(&lmk), &landmarks_of(template, &s.ground_truth)?)?;
        bundles.push(ScanBundle {
            id,
            geometry,
            landmarks: Some(lmk),
            ground_truth: Some(gt),
            provenance: if real { SourceKind::Real } else { SourceKind::Synthetic },
            expressive: !s.neutral,
            subject: Some(s.subject),
            mm_per_unit: None,
        });
    }
    let ds = Dataset {
        root,
        manifest: DatasetManifest {
            version: MANIFEST_VERSION,
            template: TemplateRef {
                mesh: "template.obj".into(),
                landmarks: "template.lmk".into(),
                mouth: template.mouth().to_vec(),
            },
            bundles,
        },
    };
    ds.save()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossWeights;
    use crate::synthgen::{build_toy_model, sample_dataset, ToyConfig};

    fn toy() -> ToyMorphable {
        build_toy_model(&ToyConfig {
            seed: 1,
            n: 162,
            k_id: 3,
            k_exp: 2,
            gamma: 0.3,
        })
        .unwrap()
    }

    #[test]
    fn export_load_and_train_set() {
        let dir = tempfile::tempdir().unwrap();
        let model = toy();
        let samples = sample_dataset(&model, 3, 2, 5).unwrap();
        let export = ToyExport {
            real_every: 3,
            scan_noise: 0.0,
            seed: 0,
        };
        write_toy_dataset(dir.path(), &model, &samples, &export).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        ds.validate().unwrap();
        assert_eq!(ds.manifest.bundles.len(), 9);
        assert_eq!(ds.manifest.bundles.iter().filter(|b| !b.expressive).count(), 3);
        assert_eq!(ds.manifest.bundles.iter().filter(|b| b.provenance == SourceKind::Real).count(), 3);
        let template = ds.template().unwrap();
        assert_eq!(template.mesh().faces(), model.template.mesh().faces());
        for (a, b) in template.mesh().vertices().iter().zip(model.template.mesh().vertices()) {
            assert!((a - b).amax() < 1e-7);
        }
        assert_eq!(template.mouth(), model.template.mouth());
        assert_eq!(template.landmarks(), model.template.landmarks());
        let gt = ds.ground_truth(&ds.manifest.bundles[1]).unwrap().unwrap();
        for (a, b) in gt.iter().zip(&samples[1].ground_truth) {
            assert!((a - b).amax() < 1e-7);
        }
        let ctx = LossContext::new(&template, LossWeights::default()).unwrap();
        let data = ds.training_set(&ctx, 162, 0).unwrap();
        assert_eq!(data.len(), 9);
        assert_eq!(data.iter().filter(|d| d.is_synthetic()).count(), 6);
        assert!(data.iter().all(|d| d.input.len() == 162));
    }

    #[test]
    fn validation_catches_problems() {
        let dir = tempfile::tempdir().unwrap();
        let model = toy();
        let samples = sample_dataset(&model, 1, 0, 5).unwrap();
        let export = ToyExport {
            real_every: 0,
            scan_noise: 0.0,
            seed: 0,
        };
        let mut ds = write_toy_dataset(dir.path(), &model, &samples, &export).unwrap();
        ds.manifest.bundles[0].ground_truth = None;
        assert!(matches!(ds.validate(), Err(Error::Config(_))));
        ds.manifest.bundles[0].ground_truth = Some("missing.obj".into());
        assert!(matches!(ds.validate(), Err(Error::Io { .. })));
        std::fs::write(dir.path().join(MANIFEST_FILE), "{\"version\":1,\"template\":{},\"bundles\":[],\"x\":1}").unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Parse { .. })));
    }
}
