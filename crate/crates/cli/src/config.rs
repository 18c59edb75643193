use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use provfield::applications::{RegularizerConfig, ViewSelectConfig};
use provfield::evaluation::EvalConfig;
use provfield::fixtures::{self, Fixture, FLOATER_CENTER, FLOATER_GRID, FLOATER_RADIUS, FLOATER_SIGMA};
use provfield::geometry::{cameras_from_json, CameraRecord, PinholeCamera};
use provfield::provenance::TrainConfig;
use provfield::scene::AnalyticScene;
use provfield::uncertainty::UncertaintyConfig;

/// Where provenance samples come from in the downstream commands.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// The trained checkpoint.
    #[default]
    Field,
    /// Exact tuples from the analytic scene (a perfect predictor).
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub center: [f64; 3],
    pub radius: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub regularizer: RegularizerConfig,
    /// Voxels per axis of the field being refined.
    pub grid: usize,
    pub n_q: usize,
    /// Extra density added to the voxel fit before refinement.
    pub floaters: Vec<Blob>,
}

impl Default for RefineSection {
    fn default() -> Self {
        Self {
            regularizer: RegularizerConfig::default(),
            grid: FLOATER_GRID,
            n_q: 32,
            floaters: vec![Blob {
                center: FLOATER_CENTER,
                radius: FLOATER_RADIUS,
                sigma: FLOATER_SIGMA,
            }],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewSection {
    pub select: ViewSelectConfig,
    /// Initial camera; the first test camera when absent.
    pub start: Option<CameraRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Bundled scene used when `scene` is absent.
    pub fixture: String,
    /// Scene JSON; requires `cameras`.
    pub scene: Option<PathBuf>,
    pub cameras: Option<PathBuf>,
    /// Evaluation views; the fixture's held-out views (or the training
    /// views) when absent.
    pub test_cameras: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    /// Trained field; `<out>/field.bin` when absent.
    pub checkpoint: Option<PathBuf>,
    pub source: SourceKind,
    pub train: TrainConfig,
    pub uncertainty: UncertaintyConfig,
    /// Voxels per axis of the rendered field behind uncertainty maps; 0
    /// renders the analytic scene itself.
    pub render_grid: usize,
    pub eval: EvalConfig,
    pub refine: RefineSection,
    pub viewselect: ViewSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            fixture: "opposed-pair".into(),
            scene: None,
            cameras: None,
            test_cameras: None,
            out: PathBuf::from("out"),
            seed: 0,
            checkpoint: None,
            source: SourceKind::Field,
            train: TrainConfig::default(),
            uncertainty: UncertaintyConfig::default(),
            render_grid: 32,
            eval: EvalConfig::default(),
            refine: RefineSection::default(),
            viewselect: ViewSection::default(),
        }
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

impl RunConfig {
    /// Config file (or defaults) with command-line overrides applied.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => serde_json::from_str(&read_text(p)?)
                .map_err(|e| provfield::Error::Config(format!("{}: {e}", p.display())))?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = out {
            cfg.out = o.to_path_buf();
        }
        Ok(cfg)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("field.bin"))
    }

    /// Scene, training cameras and test cameras.
    pub fn load_rig(&self) -> Result<Fixture> {
        let mut fx = match &self.scene {
            Some(scene_path) => {
                let Some(cam_path) = &self.cameras else {
                    bail!(provfield::Error::Config("a scene file needs a cameras file".into()));
                };
                let scene = AnalyticScene::from_json(&read_text(scene_path)?)
                    .with_context(|| format!("invalid scene {}", scene_path.display()))?;
                let cams = cameras_from_json(&read_text(cam_path)?)
                    .with_context(|| format!("invalid cameras {}", cam_path.display()))?;
                Fixture {
                    name: scene_path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "scene".into()),
                    scene,
                    cams,
                    held_out: Vec::new(),
                }
            }
            None => match fixtures::by_name(&self.fixture) {
                Some(f) => f?,
                None => bail!(provfield::Error::Config(format!(
                    "unknown fixture {:?}; expected one of {:?}",
                    self.fixture,
                    fixtures::FIXTURE_NAMES
                ))),
            },
        };
        if let Some(p) = &self.test_cameras {
            fx.held_out = cameras_from_json(&read_text(p)?)
                .with_context(|| format!("invalid cameras {}", p.display()))?;
        }
        if fx.cams.is_empty() {
            bail!(provfield::Error::Config("no training cameras".into()));
        }
        Ok(fx)
    }

    pub fn start_camera(&self, test: &[PinholeCamera]) -> Result<PinholeCamera> {
        match &self.viewselect.start {
            Some(rec) => Ok(PinholeCamera::try_from(rec)?),
            None => test
                .first()
                .cloned()
                .ok_or_else(|| provfield::Error::Config("no start camera".into()).into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_json() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_after_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 3, "out": "a", "source": "oracle"}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&path), Some(9), None).unwrap();
        assert_eq!((cfg.seed, cfg.out.as_path(), cfg.source), (9, Path::new("a"), SourceKind::Oracle));
        assert_eq!(cfg.checkpoint_path(), Path::new("a/field.bin"));
    }

    #[test]
    fn scene_without_cameras_is_rejected() {
        let cfg = RunConfig {
            scene: Some("s.json".into()),
            ..RunConfig::default()
        };
        assert!(cfg.load_rig().is_err());
    }

    #[test]
    fn unknown_fixture_lists_the_choices() {
        let cfg = RunConfig {
            fixture: "nope".into(),
            ..RunConfig::default()
        };
        let msg = format!("{:#}", cfg.load_rig().unwrap_err());
        assert!(msg.contains("opposed-pair"), "{msg}");
    }
}
