use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{read_tensors, write_tensors};
use crate::autodiff::{decode_row, encode_batch, encoded_dim, MlpParams, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

use super::latent::{LatentFunction, LatentMode};
use super::{filter_visible, ProvenanceSample, ProvenanceSource};

/// Shape and decoding constants of a provenance field; also the checkpoint sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub b: usize,
    pub lambda: f64,
    /// Positional-encoding frequencies.
    pub freqs: usize,
    /// Latent functions per pool.
    pub k: usize,
    pub near: f64,
    pub far: f64,
    pub v_min: f64,
    pub latent_mode: LatentMode,
    /// Head sees only the encoded position: one sample per point.
    pub deterministic: bool,
    pub hidden: usize,
}

impl FieldConfig {
    pub fn encoded_dim(&self) -> usize {
        encoded_dim(self.freqs)
    }

    pub fn head_in_dim(&self) -> usize {
        if self.deterministic {
            self.encoded_dim()
        } else {
            self.b + 1 + self.encoded_dim()
        }
    }

    /// Scale that normalizes `t` to the head's unit range.
    pub fn distance_scale(&self) -> f64 {
        self.far - self.near
    }

    pub fn decode_offset(&self) -> f64 {
        self.near / (self.far - self.near)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b < 1 || !(self.lambda > 0.0) || self.k < 1 || self.hidden < 1 {
            return Err(Error::Config(format!(
                "field b={}, lambda={}, k={}, hidden={}",
                self.b, self.lambda, self.k, self.hidden
            )));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Config(format!("near {} / far {}", self.near, self.far)));
        }
        Ok(())
    }
}

/// Learned head composed with random latent functions.
#[derive(Clone, Debug, PartialEq)]
pub struct ProvenanceField {
    pub head: MlpParams,
    pub config: FieldConfig,
}

impl ProvenanceField {
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            head: MlpParams::init(config.head_in_dim(), config.hidden, seed),
            config,
        })
    }

    pub fn draw_latents(&self, n: usize, seed: u64) -> Vec<LatentFunction> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                LatentFunction::sample(
                    &mut rng,
                    self.config.b,
                    self.config.lambda,
                    self.config.encoded_dim(),
                    self.config.latent_mode,
                )
            })
            .collect()
    }

    pub fn encode(&self, xs: &[Vec3]) -> Result<Array2<f64>> {
        encode_batch(xs, self.config.freqs)
    }

    /// Head input rows for encoded positions under one latent function.
    pub fn head_inputs(&self, latent: Option<&LatentFunction>, enc: &Array2<f64>) -> Result<Array2<f64>> {
        match (self.config.deterministic, latent) {
            (true, _) => Ok(enc.clone()),
            (false, Some(z)) => z.apply(enc),
            (false, None) => Err(Error::Config("stochastic field needs a latent function".into())),
        }
    }

    /// Head inputs for every latent stacked latent-major: row `j*N + i`.
    pub fn stacked_inputs(&self, latents: &[LatentFunction], enc: &Array2<f64>) -> Result<Array2<f64>> {
        if self.config.deterministic {
            return Ok(enc.clone());
        }
        let blocks = latents
            .iter()
            .map(|z| z.apply(enc))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        Ok(concatenate(Axis(0), &views).expect("equal widths"))
    }

    pub fn decode_outputs(&self, raw: &Array2<f64>) -> Result<Vec<ProvenanceSample>> {
        let scale = self.config.distance_scale();
        let offset = self.config.decode_offset();
        raw.rows()
            .into_iter()
            .map(|r| {
                if r.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("provenance head output".into()));
                }
                let (t, d) = decode_row([r[0], r[1], r[2], r[3]], offset);
                Ok(ProvenanceSample { t: t * scale, d })
            })
            .collect()
    }

    pub fn evaluate_batch(&self, latent: Option<&LatentFunction>, xs: &[Vec3]) -> Result<Vec<ProvenanceSample>> {
        let enc = self.encode(xs)?;
        let raw = self.head.forward_plain(&self.head_inputs(latent, &enc)?)?;
        self.decode_outputs(&raw)
    }

    pub fn evaluate(&self, latent: Option<&LatentFunction>, x: &Vec3) -> Result<ProvenanceSample> {
        Ok(self.evaluate_batch(latent, std::slice::from_ref(x))?[0])
    }

    /// `n` fresh draws at `x`, keeping those with visibility at least `v_min`.
    pub fn sample_provenances(&self, x: &Vec3, n: usize, seed: u64, v_min: f64) -> Result<Vec<ProvenanceSample>> {
        Ok(filter_visible(&self.sample(x, n, seed)?, v_min))
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the head tensors to `path` and the config next to it as `.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensors(
            BufWriter::new(File::create(path)?),
            &PARAM_NAMES,
            self.head.tensors(),
        )?;
        std::fs::write(
            Self::sidecar_path(path),
            serde_json::to_string_pretty(&self.config)?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: FieldConfig =
            serde_json::from_str(&std::fs::read_to_string(Self::sidecar_path(path))?)?;
        config.validate()?;
        let (_, tensors) = read_tensors(BufReader::new(File::open(path)?))?;
        let head = MlpParams::from_tensors(tensors)?;
        if head.in_dim() != config.head_in_dim() {
            return Err(Error::Checkpoint(format!(
                "head input width {} does not match config ({})",
                head.in_dim(),
                config.head_in_dim()
            )));
        }
        Ok(Self { head, config })
    }
}

/// Rows per head evaluation when sampling many points.
const SAMPLE_CHUNK: usize = 1 << 15;

impl ProvenanceSource for ProvenanceField {
    /// The same `n` latent functions (drawn from `seed`) are evaluated at
    /// every point, so the samples are coherent function draws.
    fn sample_batch(&self, xs: &[Vec3], n: usize, seed: u64) -> Result<Vec<Vec<ProvenanceSample>>> {
        let enc = self.encode(xs)?;
        if self.config.deterministic {
            let raw = self.head.forward_plain(&enc)?;
            return Ok(self
                .decode_outputs(&raw)?
                .into_iter()
                .map(|s| vec![s; n])
                .collect());
        }
        let mut out = vec![Vec::with_capacity(n); xs.len()];
        let per_chunk = (SAMPLE_CHUNK / xs.len().max(1)).max(1);
        let latents = self.draw_latents(n, seed);
        for group in latents.chunks(per_chunk) {
            let raw = self.head.forward_plain(&self.stacked_inputs(group, &enc)?)?;
            let samples = self.decode_outputs(&raw)?;
            for (row, s) in samples.into_iter().enumerate() {
                out[row % xs.len()].push(s);
            }
        }
        Ok(out)
    }

    fn distance_scale(&self) -> f64 {
        self.config.distance_scale()
    }
}
