use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Tape, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::geometry::{PinholeCamera, Vec3};
use crate::scene::DensityField;

use super::empirical::empirical_provenance;
use super::field::{FieldConfig, ProvenanceField};
use super::latent::{LatentFunction, LatentMode};
use super::loss::{fimle_loss, FimleBatch};
use super::ProvenanceSample;

/// Where training points come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Stratified points along rays of a random training camera.
    #[default]
    AlongRay,
    /// Uniform points in the scene bounds.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rays_per_iter: usize,
    pub points_per_ray: usize,
    pub k: usize,
    pub b: usize,
    pub lambda: f64,
    pub freqs: usize,
    pub hidden: usize,
    pub lr: f64,
    pub resample_every: usize,
    pub sample_mode: SampleMode,
    pub latent_mode: LatentMode,
    pub v_min: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            rays_per_iter: 256,
            points_per_ray: 32,
            k: 16,
            b: 32,
            lambda: 1.0,
            freqs: 6,
            hidden: 128,
            lr: crate::autodiff::adam::DEFAULT_LR,
            resample_every: 1000,
            sample_mode: SampleMode::AlongRay,
            latent_mode: LatentMode::Linear,
            v_min: 0.7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays_per_iter == 0 || self.points_per_ray == 0 || self.resample_every == 0 {
            return Err(Error::Config(
                "rays_per_iter, points_per_ray and resample_every must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }

    pub fn field_config(&self, cams: &[PinholeCamera], deterministic: bool) -> FieldConfig {
        FieldConfig {
            b: self.b,
            lambda: self.lambda,
            freqs: self.freqs,
            k: if deterministic { 1 } else { self.k },
            near: cams.iter().map(|c| c.near).fold(f64::INFINITY, f64::min),
            far: cams.iter().map(|c| c.far).fold(0.0, f64::max),
            v_min: self.v_min,
            latent_mode: self.latent_mode,
            deterministic,
            hidden: self.hidden,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub field: ProvenanceField,
    /// Loss before each update.
    pub losses: Vec<f64>,
}

/// Trains a stochastic provenance field by pointwise fIMLE against the
/// empirical provenance of `scene` seen from `cams`.
pub fn train_provenance_field<F: DensityField + ?Sized>(
    scene: &F,
    cams: &[PinholeCamera],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train(scene, cams, config, seed, false)
}

/// Same loop with a single-output head on the encoded position, regressed
/// onto one random visible empirical tuple per point.
pub fn train_deterministic_baseline<F: DensityField + ?Sized>(
    scene: &F,
    cams: &[PinholeCamera],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train(scene, cams, config, seed, true)
}

/// Head initialization stream, kept apart from the sampling stream.
const INIT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Redraws allowed when a batch lands entirely outside the bounds.
const MAX_EMPTY_BATCHES: usize = 16;

fn train<F: DensityField + ?Sized>(
    scene: &F,
    cams: &[PinholeCamera],
    config: &TrainConfig,
    seed: u64,
    deterministic: bool,
) -> Result<TrainOutcome> {
    if cams.is_empty() {
        return Err(Error::Config("training needs at least one camera".into()));
    }
    config.validate()?;
    let mut field = ProvenanceField::new(config.field_config(cams, deterministic), seed ^ INIT_STREAM)?;
    let mut adam = AdamState::new(config.lr, field.head.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<LatentFunction> = Vec::new();
    let mut losses = Vec::with_capacity(config.iterations);
    let offset = field.config.decode_offset();

    for it in 0..config.iterations {
        if !deterministic && it % config.resample_every == 0 {
            pool = field.draw_latents(config.k, rng.random());
        }
        let (xs, targets) = draw_batch(&mut rng, scene, cams, config, deterministic)?;
        let batch = FimleBatch::build(&field, &pool, &xs, &targets)?;
        let mut tape = Tape::new();
        let (loss, vars) = fimle_loss(&mut tape, &field.head, &batch, offset)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Diverged(it));
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        let g: Vec<_> = vars.params.iter().map(|&v| grads.wrt(v)).collect();
        adam.step(field.head.tensors_mut(), &g, &PARAM_NAMES)
            .map_err(|e| match e {
                Error::NanGradient(_) => Error::Diverged(it),
                other => other,
            })?;
    }
    Ok(TrainOutcome { field, losses })
}

type Batch = (Vec<Vec3>, Vec<Vec<ProvenanceSample>>);

fn draw_batch<F: DensityField + ?Sized>(
    rng: &mut ChaCha8Rng,
    scene: &F,
    cams: &[PinholeCamera],
    config: &TrainConfig,
    deterministic: bool,
) -> Result<Batch> {
    for _ in 0..MAX_EMPTY_BATCHES {
        let xs = draw_points(rng, scene, cams, config);
        let mut kept = Vec::with_capacity(xs.len());
        let mut targets = Vec::with_capacity(xs.len());
        for x in xs {
            let set = empirical_provenance(scene, cams, &x)?;
            let visible: Vec<ProvenanceSample> = set.nonzero().copied().collect();
            if visible.is_empty() {
                continue;
            }
            let chosen = if deterministic {
                vec![visible[rng.random_range(0..visible.len())]]
            } else {
                visible
            };
            kept.push(x);
            targets.push(chosen);
        }
        if !kept.is_empty() {
            return Ok((kept, targets));
        }
    }
    Err(Error::NoTargets)
}

fn draw_points<F: DensityField + ?Sized>(
    rng: &mut ChaCha8Rng,
    scene: &F,
    cams: &[PinholeCamera],
    config: &TrainConfig,
) -> Vec<Vec3> {
    let bounds = scene.bounds();
    let n_pts = config.points_per_ray;
    match config.sample_mode {
        SampleMode::Uniform => (0..config.rays_per_iter * n_pts)
            .map(|_| bounds.sample_uniform(rng))
            .collect(),
        SampleMode::AlongRay => {
            let cam = &cams[rng.random_range(0..cams.len())];
            let mut out = Vec::with_capacity(config.rays_per_iter * n_pts);
            for _ in 0..config.rays_per_iter {
                let px = Vector2::new(
                    rng.random_range(0.0..cam.width as f64),
                    rng.random_range(0.0..cam.height as f64),
                );
                let ray = cam.pixel_ray(&px);
                let Some((t0, t1)) = bounds.ray_interval(&ray.origin, &ray.direction) else {
                    continue;
                };
                let lo = t0.max(ray.near);
                let hi = t1.min(ray.far);
                if lo >= hi {
                    continue;
                }
                let step = (hi - lo) / n_pts as f64;
                for s in 0..n_pts {
                    let t = lo + (s as f64 + rng.random::<f64>()) * step;
                    let x = ray.at(t);
                    if bounds.contains(&x) {
                        out.push(x);
                    }
                }
            }
            out
        }
    }
}
