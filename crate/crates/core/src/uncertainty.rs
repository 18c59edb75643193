//! Triangulation posterior of a point from pseudo cameras built out of its
//! provenance samples.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::geometry::{
    look_rotation, sample_frustum_intersection, Aabb, FrustumRegion, PinholeCamera, Projection, Vec3,
};
use crate::provenance::{filter_visible, recover_observation_location, ProvenanceSample, ProvenanceSource};
use crate::scene::{render_depth, sample_surface_points, transmittance_crossing, DensityField, SURFACE_TRANSMITTANCE};

/// Focal length and image size shared by all pseudo cameras.
pub const PSEUDO_FOCAL: f64 = 128.0;
pub const PSEUDO_SIZE: u32 = 128;

/// Nearest admissible near plane for pseudo cameras.
const MIN_NEAR: f64 = 1e-2;

/// Half-width of the importance-sampling window in units of the pixel noise.
pub const WINDOW_SIGMAS: f64 = 5.0;

/// One pseudo camera per sample, centered at the recovered observer, looking
/// along the sample's direction. Its depth range is where that axis crosses
/// `bounds`.
pub fn build_pseudo_cameras(x: &Vec3, samples: &[ProvenanceSample], bounds: &Aabb) -> Result<Vec<PinholeCamera>> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    samples
        .iter()
        .map(|s| {
            let y = recover_observation_location(x, s)?;
            let axis = s.direction().normalize();
            let dist = s.distance()?;
            let (t0, t1) = bounds
                .ray_interval(&y, &axis)
                .unwrap_or((dist, dist));
            let near = t0.max(MIN_NEAR).min(dist);
            let far = t1.max(dist).max(near * (1.0 + 1e-9));
            PinholeCamera::new(
                look_rotation(&axis, &Vec3::y())?,
                y,
                PSEUDO_FOCAL,
                PSEUDO_FOCAL,
                PSEUDO_SIZE as f64 / 2.0,
                PSEUDO_SIZE as f64 / 2.0,
                PSEUDO_SIZE,
                PSEUDO_SIZE,
                near,
                far,
            )
        })
        .collect()
}

/// Isotropic 2-D Gaussian density of `pixel` around the projection of
/// `x_query`; 0 when `x_query` is outside the camera frustum.
pub fn observation_likelihood(cam: &PinholeCamera, x_query: &Vec3, pixel: &Vector2<f64>, sigma_px: f64) -> f64 {
    match cam.project_point(x_query) {
        Ok(Projection::Inside { pixel: p, .. }) => {
            let r2 = (p - pixel).norm_squared();
            (-r2 / (2.0 * sigma_px * sigma_px)).exp() / (2.0 * PI * sigma_px * sigma_px)
        }
        _ => 0.0,
    }
}

fn joint_likelihood(cams: &[PinholeCamera], x: &Vec3, sigma_px: f64) -> f64 {
    cams.iter()
        .map(|c| observation_likelihood(c, x, &c.principal_point(), sigma_px))
        .product()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEstimate {
    /// Posterior density at the query point, per cubic meter.
    pub density: f64,
    pub nll: f64,
    /// Samples behind the estimate (grid cells for the brute force).
    pub n_used: usize,
    /// Standard error of `density` (0 when exact).
    pub stderr: f64,
}

impl PosteriorEstimate {
    fn new(density: f64, n_used: usize, stderr: f64) -> Self {
        Self {
            density,
            nll: -density.ln(),
            n_used,
            stderr,
        }
    }
}

/// Mass of a standard 2-D Gaussian inside the square of half-width `k` sigmas.
fn square_mass(k: f64) -> f64 {
    erf(k / SQRT_2).powi(2)
}

/// Posterior at `x` given that each camera observes it at its principal
/// point with pixel noise `sigma_px`. A single camera uses the closed form;
/// more cameras use uniform importance sampling over the intersection of
/// their `5σ` windows.
pub fn posterior_importance_sampling(
    x: &Vec3,
    cams: &[PinholeCamera],
    sigma_px: f64,
    n: usize,
    seed: u64,
) -> Result<PosteriorEstimate> {
    if cams.len() == 1 {
        return posterior_single_closed_form(&cams[0], sigma_px);
    }
    posterior_monte_carlo(x, cams, sigma_px, n, seed)
}

/// Closed form for one camera: the window integral factors into the
/// Gaussian mass in the pixel square times the frustum's depth integral.
pub fn posterior_single_closed_form(cam: &PinholeCamera, sigma_px: f64) -> Result<PosteriorEstimate> {
    if !(sigma_px > 0.0) {
        return Err(Error::Config(format!("pixel noise {sigma_px}")));
    }
    let peak = 1.0 / (2.0 * PI * sigma_px * sigma_px);
    let depth = (cam.far.powi(3) - cam.near.powi(3)) / (3.0 * cam.fx * cam.fy);
    let denom = square_mass(WINDOW_SIGMAS) * depth;
    if !(denom > 0.0) {
        return Err(Error::DegenerateVolume);
    }
    Ok(PosteriorEstimate::new(peak / denom, 0, 0.0))
}

/// Monte-Carlo estimate for any number of cameras (the cross-check for the
/// closed form).
pub fn posterior_monte_carlo(
    x: &Vec3,
    cams: &[PinholeCamera],
    sigma_px: f64,
    n: usize,
    seed: u64,
) -> Result<PosteriorEstimate> {
    if cams.is_empty() {
        return Err(Error::NoSamples);
    }
    if !(sigma_px > 0.0) {
        return Err(Error::Config(format!("pixel noise {sigma_px}")));
    }
    let delta = WINDOW_SIGMAS * sigma_px;
    let regions = cams
        .iter()
        .map(|c| FrustumRegion::neighborhood(c, &c.principal_point(), delta))
        .collect::<Result<Vec<_>>>()?;
    let sample = sample_frustum_intersection(&regions, n, seed, Some(x), None)?;
    if !(sample.volume > 0.0) {
        return Err(Error::DegenerateVolume);
    }
    let f: Vec<f64> = sample
        .points
        .par_iter()
        .map(|p| joint_likelihood(cams, p, sigma_px))
        .collect();
    let numer = joint_likelihood(cams, x, sigma_px);
    let (denom, denom_se) = if sample.accepted == 0 {
        let d = sample.volume * f[0];
        (d, d)
    } else {
        // Per-proposal contribution is box_volume * f on acceptance, else 0.
        let p = sample.proposals as f64;
        let q = sample.accepted as f64 / p;
        let box_v = sample.proposal_volume;
        let m = f.len() as f64;
        let mean_f = f.iter().sum::<f64>() / m;
        let mean_f2 = f.iter().map(|v| v * v).sum::<f64>() / m;
        let mean = box_v * q * mean_f;
        let var = box_v * box_v * q * mean_f2 - mean * mean;
        (mean, (var.max(0.0) / p).sqrt())
    };
    if !(denom > 0.0) {
        return Err(Error::DegenerateVolume);
    }
    let density = numer / denom;
    Ok(PosteriorEstimate::new(density, f.len(), density * denom_se / denom))
}

/// Dense midpoint sum of the normalizer over a `grid_res³` lattice on `bounds`.
pub fn posterior_brute_force(
    x: &Vec3,
    cams: &[PinholeCamera],
    sigma_px: f64,
    bounds: &Aabb,
    grid_res: usize,
) -> Result<PosteriorEstimate> {
    if grid_res < 2 {
        return Err(Error::Config(format!("grid resolution {grid_res}")));
    }
    let cell = bounds.volume() / (grid_res * grid_res * grid_res) as f64;
    let e = bounds.extent();
    let r = grid_res as f64;
    let denom: f64 = (0..grid_res)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..grid_res {
                for k in 0..grid_res {
                    let p = Vec3::new(
                        bounds.min[0] + (i as f64 + 0.5) * e.x / r,
                        bounds.min[1] + (j as f64 + 0.5) * e.y / r,
                        bounds.min[2] + (k as f64 + 0.5) * e.z / r,
                    );
                    acc += joint_likelihood(cams, &p, sigma_px);
                }
            }
            acc
        })
        .collect::<Vec<_>>()
        .iter()
        .sum::<f64>()
        * cell;
    if !(denom > 0.0) {
        return Err(Error::DegenerateVolume);
    }
    Ok(PosteriorEstimate::new(
        joint_likelihood(cams, x, sigma_px) / denom,
        grid_res * grid_res * grid_res,
        0.0,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    pub sigma_px: f64,
    /// Importance samples per posterior.
    pub n_is: usize,
    /// Provenance draws per point.
    pub k: usize,
    pub v_min: f64,
    /// Pixel stride of uncertainty maps.
    pub stride: usize,
    /// Compositing samples for rendered depth.
    pub depth_samples: usize,
    /// Surface points per test camera for the NLL report.
    pub per_view: usize,
    /// Transmittance at which query points sit on a surface. Kept above
    /// `v_min` so the observing views themselves survive the filter.
    pub surface_transmittance: f64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            sigma_px: 2.0,
            n_is: 1_000_000,
            k: 16,
            v_min: 0.7,
            stride: 8,
            depth_samples: 256,
            per_view: 64,
            surface_transmittance: 0.9,
        }
    }
}

/// Per-draw seed derived from a base seed and an index.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// NLL of `x` under the posterior from the source's visible provenances, or
/// `None` when nothing usable is drawn.
pub fn point_nll<S: ProvenanceSource + ?Sized>(
    source: &S,
    bounds: &Aabb,
    x: &Vec3,
    config: &UncertaintyConfig,
    seed: u64,
) -> Result<Option<f64>> {
    if !bounds.contains(x) {
        return Ok(None);
    }
    let kept = filter_visible(&source.sample(x, config.k, seed)?, config.v_min);
    if kept.is_empty() {
        return Ok(None);
    }
    let cams = build_pseudo_cameras(x, &kept, bounds)?;
    match posterior_importance_sampling(x, &cams, config.sigma_px, config.n_is, mix_seed(seed, 1)) {
        Ok(est) if est.nll.is_finite() => Ok(Some(est.nll)),
        Ok(_) | Err(Error::DegenerateVolume) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Replaces missing values by the largest finite value plus one (0 when
/// nothing is finite); returns the filled values and the sentinel count.
pub fn fill_sentinels(values: &[Option<f64>]) -> (Vec<f64>, usize) {
    let max = values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let sentinel = if max.is_finite() { max + 1.0 } else { 0.0 };
    let count = values.iter().filter(|v| v.is_none()).count();
    (values.iter().map(|v| v.unwrap_or(sentinel)).collect(), count)
}

pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, sentinels filled in.
    pub nll: Vec<f64>,
    pub depth_error: Vec<f64>,
    pub sentinels: usize,
}

impl UncertaintyMap {
    pub fn normalized_nll(&self) -> Vec<f64> {
        min_max_normalize(&self.nll)
    }

    pub fn normalized_depth_error(&self) -> Vec<f64> {
        min_max_normalize(&self.depth_error)
    }
}

/// Per-pixel NLL at the front of the rendered surface and the error of the
/// rendered depth against the ground-truth `T = 0.5` surface, on a pixel
/// grid with the configured stride. Pixels whose ray hits no rendered
/// surface get the sentinel NLL.
pub fn uncertainty_map<S, R, G>(
    source: &S,
    rendered: &R,
    gt_scene: &G,
    cam: &PinholeCamera,
    config: &UncertaintyConfig,
    seed: u64,
) -> Result<UncertaintyMap>
where
    S: ProvenanceSource + ?Sized,
    R: DensityField + ?Sized,
    G: DensityField + ?Sized,
{
    let stride = config.stride.max(1);
    let width = (cam.width as usize).div_ceil(stride);
    let height = (cam.height as usize).div_ceil(stride);
    let bounds = gt_scene.bounds();
    let cells: Vec<Result<(Option<f64>, f64)>> = (0..width * height)
        .into_par_iter()
        .map(|idx| {
            let (r, c) = (idx / width, idx % width);
            let px = Vector2::new((c * stride) as f64 + 0.5, (r * stride) as f64 + 0.5);
            let ray = cam.pixel_ray(&px);
            let depth = render_depth(rendered, &ray, config.depth_samples);
            let gt = transmittance_crossing(gt_scene, &ray, SURFACE_TRANSMITTANCE).unwrap_or(ray.far);
            let nll = match transmittance_crossing(rendered, &ray, config.surface_transmittance) {
                Some(t) => point_nll(source, bounds, &ray.at(t), config, mix_seed(seed, idx as u64))?,
                None => None,
            };
            Ok((nll, (depth - gt).abs()))
        })
        .collect();
    let cells = cells.into_iter().collect::<Result<Vec<_>>>()?;
    let raw: Vec<Option<f64>> = cells.iter().map(|c| c.0).collect();
    let (nll, sentinels) = fill_sentinels(&raw);
    Ok(UncertaintyMap {
        width,
        height,
        nll,
        depth_error: cells.iter().map(|c| c.1).collect(),
        sentinels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub scene: String,
    pub n_points: usize,
    pub mean_nll: f64,
    pub n_sentinel: usize,
    pub per_point: Vec<f64>,
}

/// Mean NLL over ground-truth surface points seen by the test cameras.
pub fn nll_of_surface<S, G>(
    source: &S,
    scene: &G,
    cams_test: &[PinholeCamera],
    config: &UncertaintyConfig,
    scene_name: &str,
    seed: u64,
) -> Result<NllReport>
where
    S: ProvenanceSource + ?Sized,
    G: DensityField + ?Sized,
{
    let points = sample_surface_points(scene, cams_test, config.per_view, config.surface_transmittance, seed);
    if points.is_empty() {
        return Err(Error::NoSurfacePoints);
    }
    let raw = points
        .par_iter()
        .enumerate()
        .map(|(i, sp)| point_nll(source, scene.bounds(), &sp.point, config, mix_seed(seed, i as u64)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (per_point, n_sentinel) = fill_sentinels(&raw);
    Ok(NllReport {
        scene: scene_name.to_string(),
        n_points: per_point.len(),
        mean_nll: per_point.iter().sum::<f64>() / per_point.len() as f64,
        n_sentinel,
        per_point,
    })
}
