//! Provenance-driven optimization: a transmittance hinge that refines a
//! voxel density field, and criteria-based viewpoint selection.

use std::io::Write;
use std::sync::Arc;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CompositeLayout, SparseRows, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{pose_retract, PinholeCamera, Projection, Ray, Vec3};
use crate::provenance::{filter_visible, recover_observation_location, ProvenanceSample, ProvenanceSource};
use crate::scene::{
    render_depth, segment_layout, transmittance_crossing, DensityField, VoxelField, OPACITY_EPS, SURFACE_TRANSMITTANCE,
};
use crate::uncertainty::mix_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    /// Hinge margin.
    pub alpha: f64,
    /// Training-ray transmittance a point needs to enter the hinge.
    pub tau_vis: f64,
    pub v_min: f64,
    /// Provenance draws per point.
    pub k: usize,
    pub depth_weight: f64,
    pub reg_weight: f64,
    pub iterations: usize,
    /// Plain gradient-descent step on the raw voxel values.
    pub lr: f64,
    pub rays_per_iter: usize,
    pub points_per_ray: usize,
    /// Compositing segments per ray for depth.
    pub depth_samples: usize,
    /// Midpoint samples per transmittance integral.
    pub n_q: usize,
    /// Treat provenance-ray transmittance as a constant target.
    pub detach_provenance: bool,
    /// Pixel stride of the held-out depth evaluation.
    pub holdout_stride: usize,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            tau_vis: 0.9,
            v_min: 0.7,
            k: 8,
            depth_weight: 1.0,
            reg_weight: 100.0,
            iterations: 100,
            lr: 10.0,
            rays_per_iter: 64,
            points_per_ray: 16,
            depth_samples: 96,
            n_q: 32,
            detach_provenance: true,
            holdout_stride: 4,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("hinge margin {}", self.alpha)));
        }
        for (name, v) in [("tau_vis", self.tau_vis), ("v_min", self.v_min)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} = {v} outside (0, 1)")));
            }
        }
        if self.k == 0 || self.rays_per_iter == 0 || self.points_per_ray == 0 || self.depth_samples < 2 || self.n_q == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// Sparse optical-depth rows for the hinge: one pair per (point, provenance) term.
#[derive(Clone, Debug, Default)]
pub struct HingeRows {
    pub train: SparseRows,
    pub prov: SparseRows,
}

impl HingeRows {
    pub fn len(&self) -> usize {
        self.train.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.rows.is_empty()
    }
}

fn dot_sparse(row: &[(usize, f64)], values: &[f64]) -> f64 {
    row.iter().map(|&(i, w)| w * values[i]).sum()
}

/// Stratified distances along the part of `ray` inside the voxel bounds.
fn points_on_ray(voxel: &VoxelField, ray: &Ray, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let Some((t0, t1)) = voxel.bounds.ray_interval(&ray.origin, &ray.direction) else {
        return Vec::new();
    };
    let lo = t0.max(ray.near);
    let hi = t1.min(ray.far);
    if lo >= hi {
        return Vec::new();
    }
    let step = (hi - lo) / n as f64;
    (0..n).map(|s| lo + (s as f64 + rng.random::<f64>()) * step).collect()
}

/// Collects hinge terms for the training rays against the current voxel
/// densities: points with training transmittance above `tau_vis`, each
/// paired with its visible provenance draws.
pub fn hinge_rows<S: ProvenanceSource + ?Sized>(
    voxel: &VoxelField,
    source: &S,
    rays: &[Ray],
    config: &RegularizerConfig,
    seed: u64,
) -> Result<HingeRows> {
    let sigmas = voxel.sigmas();
    let mut xs = Vec::new();
    let mut train_rows = Vec::new();
    for (ri, ray) in rays.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, ri as u64));
        for t in points_on_ray(voxel, ray, config.points_per_ray, &mut rng) {
            let row = voxel.optical_depth_weights(ray, ray.near, t, config.n_q);
            if (-dot_sparse(&row, &sigmas)).exp() > config.tau_vis {
                xs.push(ray.at(t));
                train_rows.push(row);
            }
        }
    }
    let mut out = HingeRows::default();
    if xs.is_empty() {
        return Ok(out);
    }
    let draws = source.sample_batch(&xs, config.k, mix_seed(seed, u64::MAX))?;
    for ((x, row), samples) in xs.iter().zip(&train_rows).zip(&draws) {
        for s in filter_visible(samples, config.v_min) {
            let y = recover_observation_location(x, &s)?;
            let prov = Ray::new(y, s.direction(), 0.0, s.distance()?);
            out.prov.rows.push(voxel.optical_depth_weights(&prov, 0.0, prov.far, config.n_q));
            out.train.rows.push(row.clone());
        }
    }
    Ok(out)
}

/// Mean of `[alpha + T_prov - T_train]+` over the terms; a constant 0 when
/// there are none. `sigma` is the flattened voxel density node.
pub fn hinge_loss(
    tape: &mut Tape,
    sigma: Var,
    rows: &HingeRows,
    alpha: f64,
    detach_provenance: bool,
) -> Result<Var> {
    if rows.is_empty() {
        return Ok(tape.constant(ndarray::Array2::zeros((1, 1))));
    }
    let tau_train = tape.sparse_combine(sigma, Arc::new(rows.train.clone()))?;
    let neg = tape.scale(tau_train, -1.0);
    let t_train = tape.exp(neg);
    let t_prov = if detach_provenance {
        let flat = tape.value(sigma).iter().copied().collect::<Vec<_>>();
        let vals: Vec<f64> = rows.prov.rows.iter().map(|r| (-dot_sparse(r, &flat)).exp()).collect();
        tape.constant(ndarray::Array2::from_shape_vec((vals.len(), 1), vals).expect("column"))
    } else {
        let tau = tape.sparse_combine(sigma, Arc::new(rows.prov.clone()))?;
        let neg = tape.scale(tau, -1.0);
        tape.exp(neg)
    };
    let diff = tape.sub(t_prov, t_train)?;
    let shifted = tape.add_scalar(diff, alpha);
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

/// The transmittance hinge regularizer for a batch of training rays.
/// Returns the loss node and the number of terms.
pub fn prov_nvs_loss<S: ProvenanceSource + ?Sized>(
    tape: &mut Tape,
    sigma: Var,
    voxel: &VoxelField,
    source: &S,
    rays: &[Ray],
    config: &RegularizerConfig,
    seed: u64,
) -> Result<(Var, usize)> {
    let rows = hinge_rows(voxel, source, rays, config, seed)?;
    Ok((hinge_loss(tape, sigma, &rows, config.alpha, config.detach_provenance)?, rows.len()))
}

/// Expected depth of each ray through the voxel densities, on the tape.
pub fn composite_depth_loss_inputs(voxel: &VoxelField, rays: &[Ray], n_samples: usize) -> (SparseRows, CompositeLayout) {
    let mut rows = Vec::with_capacity(rays.len() * n_samples);
    let mut t_all = Vec::with_capacity(rays.len() * n_samples);
    let mut d_all = Vec::with_capacity(rays.len() * n_samples);
    for ray in rays {
        let (t, d) = segment_layout(ray.near, ray.far, n_samples);
        for &tk in &t {
            rows.push(voxel.density_weights(&ray.at(tk)));
        }
        t_all.extend(t);
        d_all.extend(d);
    }
    (
        SparseRows { rows },
        CompositeLayout {
            n_rays: rays.len(),
            n_samples,
            t: t_all,
            delta: d_all,
            far: rays.iter().map(|r| r.far).collect(),
            eps: OPACITY_EPS,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineStep {
    pub iter: usize,
    pub depth_mae_holdout: f64,
    pub reg_loss: f64,
    pub depth_loss: f64,
    pub reg_terms: usize,
}

#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub voxel: VoxelField,
    /// One entry per iteration, plus the final evaluation.
    pub trace: Vec<RefineStep>,
}

impl RefineOutcome {
    pub fn final_mae(&self) -> f64 {
        self.trace.last().map(|s| s.depth_mae_holdout).unwrap_or(f64::NAN)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iter,depth_mae_holdout,reg_loss,depth_loss")?;
        for s in &self.trace {
            writeln!(w, "{},{},{},{}", s.iter, s.depth_mae_holdout, s.reg_loss, s.depth_loss)?;
        }
        Ok(())
    }
}

/// Strided pixel rays of a camera.
pub fn strided_rays(cam: &PinholeCamera, stride: usize) -> Vec<Ray> {
    let s = stride.max(1);
    let mut out = Vec::new();
    for v in (0..cam.height as usize).step_by(s) {
        for u in (0..cam.width as usize).step_by(s) {
            out.push(cam.pixel_ray(&Vector2::new(u as f64 + 0.5, v as f64 + 0.5)));
        }
    }
    out
}

/// Mean absolute rendered-depth error of `field` against precomputed
/// ground-truth depths.
pub fn depth_mae<F: DensityField + ?Sized>(field: &F, rays: &[Ray], gt: &[f64], n_samples: usize) -> f64 {
    use rayon::prelude::*;
    let sum: f64 = rays
        .par_iter()
        .zip(gt)
        .map(|(r, g)| (render_depth(field, r, n_samples) - g).abs())
        .collect::<Vec<_>>()
        .iter()
        .sum();
    sum / rays.len().max(1) as f64
}

/// Ground-truth depths of the rays that reach a surface (transmittance
/// falls through one half); rays that miss everything are dropped.
pub fn surface_rays<G: DensityField + ?Sized>(gt: &G, rays: Vec<Ray>, n_samples: usize) -> (Vec<Ray>, Vec<f64>) {
    use rayon::prelude::*;
    let depths: Vec<Option<f64>> = rays
        .par_iter()
        .map(|r| transmittance_crossing(gt, r, SURFACE_TRANSMITTANCE).map(|_| render_depth(gt, r, n_samples)))
        .collect();
    rays.into_iter().zip(depths).filter_map(|(r, d)| d.map(|d| (r, d))).unzip()
}

/// Gradient descent on depth MSE against the ground truth (rays that reach
/// a surface only) plus
/// `reg_weight` times the hinge, logging held-out depth MAE each iteration.
pub fn refine_density<S, G>(
    voxel: &VoxelField,
    source: &S,
    cams: &[PinholeCamera],
    held_out: &[PinholeCamera],
    gt: &G,
    config: &RegularizerConfig,
    seed: u64,
) -> Result<RefineOutcome>
where
    S: ProvenanceSource + ?Sized,
    G: DensityField + ?Sized,
{
    config.validate()?;
    if cams.is_empty() || held_out.is_empty() {
        return Err(Error::Config("refinement needs training and held-out cameras".into()));
    }
    let (hold_rays, hold_gt) = surface_rays(
        gt,
        held_out.iter().flat_map(|c| strided_rays(c, config.holdout_stride)).collect(),
        config.depth_samples,
    );
    if hold_rays.is_empty() {
        return Err(Error::NoSurfacePoints);
    }
    let mut voxel = voxel.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::with_capacity(config.iterations + 1);
    let n = voxel.raw.len();

    for it in 0..config.iterations {
        let rays: Vec<Ray> = (0..config.rays_per_iter)
            .map(|_| {
                let cam = &cams[rng.random_range(0..cams.len())];
                cam.pixel_ray(&Vector2::new(
                    rng.random_range(0.0..cam.width as f64),
                    rng.random_range(0.0..cam.height as f64),
                ))
            })
            .collect();
        let (rays, target) = surface_rays(gt, rays, config.depth_samples);
        if rays.is_empty() {
            return Err(Error::NoSurfacePoints);
        }
        let mae = depth_mae(&voxel, &hold_rays, &hold_gt, config.depth_samples);

        let mut tape = Tape::new();
        let raw = tape.param(ndarray::Array2::from_shape_vec((n, 1), voxel.raw.clone()).expect("column"));
        let sigma = tape.softplus(raw);
        let (rows, layout) = composite_depth_loss_inputs(&voxel, &rays, config.depth_samples);
        let seg_sigma = tape.sparse_combine(sigma, Arc::new(rows))?;
        let depth = tape.composite_depth(seg_sigma, Arc::new(layout))?;
        let tgt = tape.constant(ndarray::Array2::from_shape_vec((target.len(), 1), target).expect("column"));
        let diff = tape.sub(depth, tgt)?;
        let sq = tape.square(diff);
        let depth_loss = tape.mean(sq);
        let mut total = tape.scale(depth_loss, config.depth_weight);
        let (mut reg_value, mut reg_terms) = (0.0, 0);
        if config.reg_weight != 0.0 {
            let (reg, terms) = prov_nvs_loss(&mut tape, sigma, &voxel, source, &rays, config, mix_seed(seed, it as u64))?;
            reg_value = tape.scalar(reg);
            reg_terms = terms;
            let weighted = tape.scale(reg, config.reg_weight);
            total = tape.add(total, weighted)?;
        }
        let total_value = tape.scalar(total);
        if !total_value.is_finite() {
            return Err(Error::Diverged(it));
        }
        trace.push(RefineStep {
            iter: it,
            depth_mae_holdout: mae,
            reg_loss: reg_value,
            depth_loss: tape.scalar(depth_loss),
            reg_terms,
        });
        let grads = tape.backward(total)?;
        let g = grads.wrt(raw);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(it));
        }
        for (r, gi) in voxel.raw.iter_mut().zip(g.iter()) {
            *r -= config.lr * gi;
        }
    }
    trace.push(RefineStep {
        iter: config.iterations,
        depth_mae_holdout: depth_mae(&voxel, &hold_rays, &hold_gt, config.depth_samples),
        reg_loss: f64::NAN,
        depth_loss: f64::NAN,
        reg_terms: 0,
    });
    Ok(RefineOutcome { voxel, trace })
}

/// Penalty area used when any quad corner leaves the frustum, so that the
/// area loss stays defined at `AREA_PENALTY`.
pub const AREA_PENALTY: f64 = 1e6;

/// Shoelace area (px²) of the projected quad, or `None` if any corner is
/// outside the frustum.
pub fn projected_area(cam: &PinholeCamera, quad: &[Vec3; 4]) -> Option<f64> {
    let mut px = [Vector2::zeros(); 4];
    for (p, x) in px.iter_mut().zip(quad) {
        match cam.project_point(x) {
            Ok(Projection::Inside { pixel, .. }) => *p = pixel,
            _ => return None,
        }
    }
    let twice: f64 = (0..4).map(|i| {
        let (a, b) = (px[i], px[(i + 1) % 4]);
        a.x * b.y - b.x * a.y
    }).sum();
    Some(twice.abs() / 2.0)
}

/// Projected area of the quad, or `-AREA_PENALTY` when a corner is out of
/// the frustum (the loss is the negated value).
pub fn area_objective(cam: &PinholeCamera, quad: &[Vec3; 4]) -> f64 {
    projected_area(cam, quad).unwrap_or(-AREA_PENALTY)
}

/// `-axis · (-normal)`: -1 when the camera faces the surface head-on.
pub fn normal_objective(cam: &PinholeCamera, normal: &Vec3) -> f64 {
    cam.principal_axis().dot(normal)
}

/// `(L_c, L_d)`: per target, the largest squared distance from the camera
/// center to a provenance location and the largest alignment of the
/// principal axis with a provenance direction, summed over targets. Targets
/// without samples are skipped.
pub fn selection_loss(cam: &PinholeCamera, targets: &[Vec3], samples: &[Vec<ProvenanceSample>]) -> Result<(f64, f64)> {
    let axis = cam.principal_axis();
    let mut l_c = 0.0;
    let mut l_d = 0.0;
    let mut used = 0;
    for (x, set) in targets.iter().zip(samples) {
        if set.is_empty() {
            continue;
        }
        let mut max_c = f64::NEG_INFINITY;
        let mut max_d = f64::NEG_INFINITY;
        for s in set {
            let y = recover_observation_location(x, s)?;
            max_c = max_c.max((y - cam.center()).norm_squared());
            max_d = max_d.max(axis.dot(&s.direction()));
        }
        l_c += max_c;
        l_d += max_d;
        used += 1;
    }
    if used == 0 {
        return Err(Error::NoTargetPoints);
    }
    Ok((l_c, l_d))
}

/// Draws and filters the provenances of each target once.
pub fn target_provenances<S: ProvenanceSource + ?Sized>(
    source: &S,
    targets: &[Vec3],
    k: usize,
    v_min: f64,
    seed: u64,
) -> Result<Vec<Vec<ProvenanceSample>>> {
    Ok(source
        .sample_batch(targets, k, seed)?
        .iter()
        .map(|s| filter_visible(s, v_min))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ViewObjective {
    /// Maximize the projected area of a planar quad.
    Area { quad: [[f64; 3]; 4] },
    /// Face the surface with the given unit normal.
    Normal { normal: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewSelectConfig {
    pub objective: ViewObjective,
    pub targets: Vec<[f64; 3]>,
    /// Include the provenance terms; false gives the objective-only baseline.
    pub use_selection: bool,
    /// Weight of the provenance terms relative to the objective.
    pub selection_weight: f64,
    /// Use `-(L_c + L_d)` exactly as written instead of `L_c - L_d`.
    pub literal_sign: bool,
    pub iterations: usize,
    /// First trial step of each line search.
    pub step: f64,
    /// Central-difference width on the pose increments.
    pub h: f64,
    pub k: usize,
    pub v_min: f64,
}

impl Default for ViewSelectConfig {
    fn default() -> Self {
        Self {
            objective: ViewObjective::Normal { normal: [0.0, 0.0, -1.0] },
            targets: vec![[0.0, 0.0, 0.0]],
            use_selection: true,
            selection_weight: 1.0,
            literal_sign: false,
            iterations: 100,
            step: 1e-2,
            h: 1e-4,
            k: 16,
            v_min: 0.7,
        }
    }
}

impl ViewSelectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("view selection needs at least one target point".into()));
        }
        if let ViewObjective::Normal { normal } = &self.objective {
            if (Vec3::from(*normal).norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Config("target normal must be unit length".into()));
            }
        }
        if !(self.h > 0.0 && self.step > 0.0) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn target_points(&self) -> Vec<Vec3> {
        self.targets.iter().map(|&t| Vec3::from(t)).collect()
    }

    /// Objective loss (lower is better).
    pub fn objective_loss(&self, cam: &PinholeCamera) -> f64 {
        match &self.objective {
            ViewObjective::Area { quad } => -area_objective(cam, &quad.map(Vec3::from)),
            ViewObjective::Normal { normal } => normal_objective(cam, &Vec3::from(*normal)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewStatus {
    Completed,
    /// No descent step was found.
    Converged,
    /// Every target left the frustum.
    TargetsLost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewStep {
    pub iter: usize,
    pub objective: f64,
    pub l_c: f64,
    pub l_d: f64,
    pub nearest_y_dist: f64,
    /// Rotation row-major, then center.
    pub pose: [f64; 12],
}

#[derive(Clone, Debug)]
pub struct ViewTrajectory {
    pub cameras: Vec<PinholeCamera>,
    pub steps: Vec<ViewStep>,
    pub status: ViewStatus,
}

impl ViewTrajectory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "iter,objective,L_c,L_d,nearest_y_dist")?;
        for i in 0..9 {
            write!(w, ",R{}{}", i / 3, i % 3)?;
        }
        writeln!(w, ",cx,cy,cz")?;
        for s in &self.steps {
            write!(w, "{},{},{},{},{}", s.iter, s.objective, s.l_c, s.l_d, s.nearest_y_dist)?;
            for p in s.pose {
                write!(w, ",{p}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn pose_of(cam: &PinholeCamera) -> [f64; 12] {
    let r = cam.rotation();
    let c = cam.center();
    let mut out = [0.0; 12];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = r[(i, j)];
        }
        out[9 + i] = c[i];
    }
    out
}

fn retract6(cam: &PinholeCamera, p: &[f64; 6]) -> PinholeCamera {
    pose_retract(cam, &Vec3::new(p[0], p[1], p[2]), &Vec3::new(p[3], p[4], p[5]))
}

/// Gradient descent on `L_obj (+ weight · L_select)` over pose increments,
/// with central-difference gradients and a backtracking line search.
pub fn optimize_viewpoint<S: ProvenanceSource + ?Sized>(
    init: &PinholeCamera,
    source: &S,
    config: &ViewSelectConfig,
    seed: u64,
) -> Result<ViewTrajectory> {
    config.validate()?;
    let targets = config.target_points();
    let samples = target_provenances(source, &targets, config.k, config.v_min, seed)?;
    let ys: Vec<Vec3> = targets
        .iter()
        .zip(&samples)
        .flat_map(|(x, set)| set.iter().map(move |s| recover_observation_location(x, s)))
        .collect::<Result<_>>()?;
    let sees_any = |cam: &PinholeCamera| {
        targets
            .iter()
            .any(|x| matches!(cam.project_point(x), Ok(Projection::Inside { .. })))
    };
    if !sees_any(init) {
        return Err(Error::NoTargetPoints);
    }
    let select = |cam: &PinholeCamera| -> (f64, f64) {
        selection_loss(cam, &targets, &samples).unwrap_or((f64::NAN, f64::NAN))
    };
    let total = |cam: &PinholeCamera| -> f64 {
        let mut v = config.objective_loss(cam);
        if config.use_selection {
            let (l_c, l_d) = select(cam);
            if l_c.is_finite() {
                let s = if config.literal_sign { -(l_c + l_d) } else { l_c - l_d };
                v += config.selection_weight * s;
            }
        }
        v
    };
    let record = |iter: usize, cam: &PinholeCamera| {
        let (l_c, l_d) = select(cam);
        ViewStep {
            iter,
            objective: config.objective_loss(cam),
            l_c,
            l_d,
            nearest_y_dist: ys
                .iter()
                .map(|y| (y - cam.center()).norm())
                .fold(f64::INFINITY, f64::min),
            pose: pose_of(cam),
        }
    };

    let mut cam = init.clone();
    let mut cameras = vec![cam.clone()];
    let mut steps = vec![record(0, &cam)];
    let mut status = ViewStatus::Completed;
    let mut f = total(&cam);
    let mut step = config.step;
    for it in 1..=config.iterations {
        let mut g = [0.0; 6];
        for (i, gi) in g.iter_mut().enumerate() {
            let mut p = [0.0; 6];
            p[i] = config.h;
            let fp = total(&retract6(&cam, &p));
            p[i] = -config.h;
            let fm = total(&retract6(&cam, &p));
            *gi = (fp - fm) / (2.0 * config.h);
        }
        let gnorm2: f64 = g.iter().map(|v| v * v).sum();
        if !(gnorm2 > 0.0) || !gnorm2.is_finite() {
            status = ViewStatus::Converged;
            break;
        }
        let gnorm = gnorm2.sqrt();
        // Trial steps are lengths in the 6-dim increment space.
        let mut accepted = None;
        let mut s = step;
        for _ in 0..40 {
            let p = g.map(|v| -s * v / gnorm);
            let next = retract6(&cam, &p);
            let fn_ = total(&next);
            if fn_ < f - 1e-4 * s * gnorm {
                accepted = Some((next, fn_));
                break;
            }
            s *= 0.5;
        }
        let Some((next, fn_)) = accepted else {
            status = ViewStatus::Converged;
            break;
        };
        step = (2.0 * s).min(config.step * 16.0);
        if !sees_any(&next) {
            status = ViewStatus::TargetsLost;
            break;
        }
        cam = next;
        f = fn_;
        cameras.push(cam.clone());
        steps.push(record(it, &cam));
    }
    Ok(ViewTrajectory { cameras, steps, status })
}
