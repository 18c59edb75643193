//! End-to-end acceptance checks, one test per criterion. Each prints a
//! `criterion N: PASS|FAIL ...` line before asserting.
//!
//! The heavy criteria take a shared lock so that their wall-clock budgets
//! are measured without competing for the CPU.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use nalgebra::Vector2;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use provfield::applications::{
    composite_depth_loss_inputs, hinge_rows, optimize_viewpoint, prov_nvs_loss, refine_density, RegularizerConfig,
    ViewObjective, ViewSelectConfig,
};
use provfield::autodiff::{MlpParams, Tape};
use provfield::evaluation::{ap_auc, evaluate_provenance, sparsification_curve, EvalConfig, PointSet, ThresholdSchedule};
use provfield::fixtures::{self, floater_rig, floater_targets, floater_view_start, opposed_pair, single_camera, stereo_rig};
use provfield::geometry::{Aabb, PinholeCamera, Ray, Vec3};
use provfield::provenance::{
    empirical_provenance, fimle_loss, sq_dist4, train_deterministic_baseline, train_provenance_field, EmpiricalOracle,
    FieldConfig, FimleBatch, LatentMode, ProvenanceField, ProvenanceSample, TrainConfig,
};
use provfield::scene::{softplus, AnalyticScene, DensityField, MidpointQuadrature, VoxelField};
use provfield::uncertainty::{
    build_pseudo_cameras, posterior_brute_force, posterior_importance_sampling, posterior_monte_carlo,
    posterior_single_closed_form,
};

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

/// Goes to the process stderr directly, which the test harness does not
/// capture, so the verdicts show up in a plain `cargo test` run.
fn say(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn verdict(n: u32, pass: bool, detail: &str) {
    say(&format!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" }));
    assert!(pass, "criterion {n} failed: {detail}");
}

/// Desk-scale training settings shared by the trained-field criteria.
fn desk_training() -> TrainConfig {
    TrainConfig {
        iterations: 2000,
        rays_per_iter: 32,
        points_per_ray: 8,
        k: 16,
        hidden: 64,
        lr: 5e-3,
        resample_every: 10,
        ..TrainConfig::default()
    }
}

/// Field trained on the floater rig, shared by the refinement and viewpoint criteria.
fn floater_field() -> &'static ProvenanceField {
    static FIELD: OnceLock<ProvenanceField> = OnceLock::new();
    FIELD.get_or_init(|| {
        let fx = floater_rig().unwrap();
        let t = Instant::now();
        let f = train_provenance_field(&fx.scene, &fx.cams, &desk_training(), 3).unwrap().field;
        say(&format!("floater field trained in {:.1}s", t.elapsed().as_secs_f64()));
        f
    })
}

// ---------------------------------------------------------------- 1

/// Relative error with a floor that keeps vanishing gradients from
/// dividing finite-difference noise by ~0.
fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

struct Probes {
    count: usize,
    worst: f64,
}

impl Probes {
    fn add(&mut self, fd: f64, an: f64) {
        self.count += 1;
        self.worst = self.worst.max(rel_err(fd, an));
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
}

fn mlp_probes(p: &mut Probes, rng: &mut ChaCha8Rng) {
    let head = MlpParams::init(7, 12, 21);
    let input = random_matrix(rng, 5, 7, 1.0);
    let weights = random_matrix(rng, 5, 4, 1.0);
    let eval = |h: &MlpParams| -> (f64, Vec<Array2<f64>>) {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let vars = h.forward(&mut tape, x).unwrap();
        let w = tape.constant(weights.clone());
        let prod = tape.mul(vars.output, w).unwrap();
        let sq = tape.square(prod);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        (tape.scalar(loss), vars.params.iter().map(|&v| g.wrt(v)).collect())
    };
    let (_, grads) = eval(&head);
    let h = 1e-6;
    for _ in 0..40 {
        let pi = rng.random_range(0..grads.len());
        let idx = rng.random_range(0..grads[pi].len());
        let shifted = |d: f64| {
            let mut c = head.clone();
            c.tensors_mut()[pi].as_slice_mut().unwrap()[idx] += d;
            eval(&c).0
        };
        p.add((shifted(h) - shifted(-h)) / (2.0 * h), grads[pi].as_slice().unwrap()[idx]);
    }
}

fn fimle_probes(p: &mut Probes, rng: &mut ChaCha8Rng) {
    let field = ProvenanceField::new(
        FieldConfig {
            b: 4,
            lambda: 1.0,
            freqs: 2,
            k: 4,
            near: 0.5,
            far: 6.0,
            v_min: 0.7,
            latent_mode: LatentMode::Linear,
            deterministic: false,
            hidden: 16,
        },
        8,
    )
    .unwrap();
    let pool = field.draw_latents(4, 9);
    let xs: Vec<Vec3> = (0..6)
        .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let targets: Vec<Vec<ProvenanceSample>> = xs
        .iter()
        .map(|_| {
            (0..2)
                .map(|_| {
                    let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalize();
                    ProvenanceSample::from_visibility(rng.random_range(1.0..5.0), &dir, rng.random_range(0.2..1.0))
                })
                .collect()
        })
        .collect();
    let batch = FimleBatch::build(&field, &pool, &xs, &targets).unwrap();
    let offset = field.config.decode_offset();
    let eval = |h: &MlpParams| -> (f64, Vec<Array2<f64>>) {
        let mut tape = Tape::new();
        let (loss, vars) = fimle_loss(&mut tape, h, &batch, offset).unwrap();
        let g = tape.backward(loss).unwrap();
        (tape.scalar(loss), vars.params.iter().map(|&v| g.wrt(v)).collect())
    };
    let (_, grads) = eval(&field.head);
    let h = 1e-6;
    for _ in 0..40 {
        let pi = rng.random_range(0..grads.len());
        let idx = rng.random_range(0..grads[pi].len());
        let shifted = |d: f64| {
            let mut c = field.head.clone();
            c.tensors_mut()[pi].as_slice_mut().unwrap()[idx] += d;
            eval(&c).0
        };
        p.add((shifted(h) - shifted(-h)) / (2.0 * h), grads[pi].as_slice().unwrap()[idx]);
    }
}

fn dot(row: &[(usize, f64)], sigma: &[f64]) -> f64 {
    row.iter().map(|&(i, w)| w * sigma[i]).sum()
}

/// Hinge and composite depth differentiated through the voxel raw values.
/// Term selection is fixed by the unperturbed voxel, as it is within a
/// refinement step. With detached provenance the reference is the hinge
/// with provenance transmittance frozen at its unperturbed value, which is
/// the objective that gradient belongs to.
fn voxel_probes(p: &mut Probes, rng: &mut ChaCha8Rng) -> usize {
    let fx = floater_rig().unwrap();
    let mut voxel = VoxelField::new(fx.scene.bounds, 12, 0.1, 32).unwrap();
    for r in voxel.raw.iter_mut() {
        *r = rng.random_range(-4.0..0.5);
    }
    let oracle = EmpiricalOracle::new(&fx.scene, &fx.cams);
    let rays: Vec<Ray> = (0..24)
        .map(|_| {
            let cam = &fx.cams[rng.random_range(0..fx.cams.len())];
            cam.pixel_ray(&Vector2::new(rng.random_range(0.0..48.0), rng.random_range(0.0..48.0)))
        })
        .collect();
    let base_sigma = voxel.sigmas();
    let mut terms = 0;
    for (detach, with_depth) in [(false, false), (true, false), (false, true)] {
        let config = RegularizerConfig {
            detach_provenance: detach,
            ..RegularizerConfig::default()
        };
        let rows = hinge_rows(&voxel, &oracle, &rays, &config, 4).unwrap();
        terms += rows.len();
        let t_prov_frozen: Vec<f64> = rows.prov.rows.iter().map(|r| (-dot(r, &base_sigma)).exp()).collect();
        let depth_inputs = with_depth.then(|| composite_depth_loss_inputs(&voxel, &rays, 48));
        let tape_eval = |raw: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let r = tape.param(Array2::from_shape_vec((raw.len(), 1), raw.to_vec()).unwrap());
            let sigma = tape.softplus(r);
            let (mut loss, _) = prov_nvs_loss(&mut tape, sigma, &voxel, &oracle, &rays, &config, 4).unwrap();
            if let Some((rows, layout)) = &depth_inputs {
                let seg = tape.sparse_combine(sigma, Arc::new(rows.clone())).unwrap();
                let depth = tape.composite_depth(seg, Arc::new(layout.clone())).unwrap();
                let sq = tape.square(depth);
                let d = tape.mean(sq);
                loss = tape.add(loss, d).unwrap();
            }
            let g = tape.backward(loss).unwrap();
            (tape.scalar(loss), g.wrt(r).iter().copied().collect())
        };
        let frozen_eval = |raw: &[f64]| -> f64 {
            let sigma: Vec<f64> = raw.iter().map(|&v| softplus(v)).collect();
            let sum: f64 = rows
                .train
                .rows
                .iter()
                .zip(&t_prov_frozen)
                .map(|(row, tp)| (config.alpha + tp - (-dot(row, &sigma)).exp()).max(0.0))
                .sum();
            sum / rows.len() as f64
        };
        let (_, grad) = tape_eval(&voxel.raw);
        let active: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).collect();
        assert!(!active.is_empty(), "voxel loss has no gradient");
        let h = 1e-6;
        for _ in 0..20 {
            let idx = active[rng.random_range(0..active.len())];
            let shifted = |d: f64| {
                let mut raw = voxel.raw.clone();
                raw[idx] += d;
                if detach {
                    frozen_eval(&raw)
                } else {
                    tape_eval(&raw).0
                }
            };
            p.add((shifted(h) - shifted(-h)) / (2.0 * h), grad[idx]);
        }
    }
    terms
}

#[test]
fn criterion_01_gradient_suite() {
    let _g = heavy();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = Probes { count: 0, worst: 0.0 };
    mlp_probes(&mut p, &mut rng);
    fimle_probes(&mut p, &mut rng);
    let terms = voxel_probes(&mut p, &mut rng);
    let secs = t.elapsed().as_secs_f64();
    let pass = p.count >= 100 && p.worst < 1e-3 && secs < 60.0 && terms > 0;
    verdict(
        1,
        pass,
        &format!("{} probes, worst rel err {:.2e}, {} hinge terms, {:.1}s", p.count, p.worst, terms, secs),
    );
}

// ---------------------------------------------------------------- 2

/// Density jumps are located by bisection on `density_at`, so piecewise
/// constant fields integrate exactly up to the bisection tolerance.
fn marched_optical_depth(scene: &AnalyticScene, ray: &Ray, a: f64, b: f64) -> f64 {
    let step = 1e-3;
    let mut tau = 0.0;
    let mut s = a;
    let mut rho = scene.density_at(&ray.at(s));
    while s < b {
        let e = (s + step).min(b);
        let rho_e = scene.density_at(&ray.at(e));
        if rho_e == rho {
            tau += rho * (e - s);
        } else {
            let (mut lo, mut hi) = (s, e);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if scene.density_at(&ray.at(mid)) == rho {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            tau += rho * (hi - s) + rho_e * (e - hi);
        }
        s = e;
        rho = rho_e;
    }
    tau
}

/// Tuple of `x` as seen from `cam`: frustum test by direct projection and
/// visibility by ray marching from the near plane.
fn brute_tuple(scene: &AnalyticScene, cam: &PinholeCamera, x: &Vec3) -> ProvenanceSample {
    let local = cam.rotation().transpose() * (x - cam.center());
    if local.z < cam.near || local.z > cam.far {
        return ProvenanceSample::ZERO;
    }
    let u = cam.fx * local.x / local.z + cam.cx;
    let v = cam.fy * local.y / local.z + cam.cy;
    if !(0.0..=cam.width as f64).contains(&u) || !(0.0..=cam.height as f64).contains(&v) {
        return ProvenanceSample::ZERO;
    }
    let dist = (x - cam.center()).norm();
    let dir = (x - cam.center()) / dist;
    let start = dist * cam.near / local.z;
    let ray = Ray::new(*cam.center(), dir, start, dist);
    let vis = (-marched_optical_depth(scene, &ray, start, dist)).exp();
    ProvenanceSample::from_visibility(dist, &dir, vis)
}

fn max_abs4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    (0..4).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_02_empirical_oracle() {
    let _g = heavy();
    let fx = opposed_pair().unwrap();
    let scale = EmpiricalOracle::new(&fx.scene, &fx.cams).distance_scale;
    let quad = MidpointQuadrature {
        field: &fx.scene,
        n_q: 1 << 17,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_analytic, mut worst_quad) = (0.0f64, 0.0f64);
    let mut occluded = 0;
    for _ in 0..1000 {
        let x = fx.scene.bounds.sample_uniform(&mut rng);
        let analytic = empirical_provenance(&fx.scene, &fx.cams, &x).unwrap();
        let numeric = empirical_provenance(&quad, &fx.cams, &x).unwrap();
        for (i, cam) in fx.cams.iter().enumerate() {
            let b = brute_tuple(&fx.scene, cam, &x).to_vec4(scale);
            if b[1..].iter().map(|c| c * c).sum::<f64>() < 0.25 {
                occluded += 1;
            }
            worst_analytic = worst_analytic.max(max_abs4(&analytic.tuples[i].to_vec4(scale), &b));
            worst_quad = worst_quad.max(max_abs4(&numeric.tuples[i].to_vec4(scale), &b));
        }
    }
    verdict(
        2,
        worst_analytic < 1e-6 && worst_quad < 1e-3,
        &format!(
            "max |diff| analytic {worst_analytic:.2e}, quadrature {worst_quad:.2e} (normalized tuples, {occluded} of 2000 with v < 0.5)"
        ),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_multimodality_ordering() {
    let _g = heavy();
    let t = Instant::now();
    let fx = opposed_pair().unwrap();
    let cfg = desk_training();
    let stochastic = train_provenance_field(&fx.scene, &fx.cams, &cfg, 1).unwrap().field;
    let deterministic = train_deterministic_baseline(&fx.scene, &fx.cams, &cfg, 1).unwrap().field;
    let ec = EvalConfig::default();
    let (s, _) = evaluate_provenance(&stochastic, &fx.scene, &fx.cams, &ec, 5).unwrap();
    let (d, _) = evaluate_provenance(&deterministic, &fx.scene, &fx.cams, &ec, 5).unwrap();
    let secs = t.elapsed().as_secs_f64();
    verdict(
        3,
        s.ap >= d.ap + 0.2 && s.ap >= 0.6 && secs <= 600.0,
        &format!(
            "stochastic AP {:.3} (AUC {:.3}) vs deterministic AP {:.3} (AUC {:.3}), {:.1}s",
            s.ap, s.auc, d.ap, d.auc, secs
        ),
    );
}

// ---------------------------------------------------------------- 4, 5

/// Pseudo cameras at `x` from the rig's exact tuples.
fn rig_pseudo_cameras(fx: &fixtures::Fixture, x: &Vec3) -> Vec<PinholeCamera> {
    let tuples = empirical_provenance(&fx.scene, &fx.cams, x).unwrap().tuples;
    let visible: Vec<ProvenanceSample> = tuples.into_iter().filter(|s| !s.is_zero()).collect();
    assert_eq!(visible.len(), fx.cams.len(), "point {x:?} not seen by every camera");
    build_pseudo_cameras(x, &visible, &fx.scene.bounds).unwrap()
}

#[test]
fn criterion_04_posterior_estimators() {
    let _g = heavy();
    let fx = stereo_rig(60.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let x = Vec3::new(
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.25..0.25),
        );
        let cams = rig_pseudo_cameras(&fx, &x);
        let is = posterior_importance_sampling(&x, &cams, 2.0, 100_000, 40 + i).unwrap();
        let bf = posterior_brute_force(&x, &cams, 2.0, &fx.scene.bounds, 128).unwrap();
        worst = worst.max((is.density / bf.density - 1.0).abs());
    }
    let single = single_camera().unwrap();
    let x = Vec3::zeros();
    let cams = rig_pseudo_cameras(&single, &x);
    let closed = posterior_single_closed_form(&cams[0], 2.0).unwrap();
    let mc = posterior_monte_carlo(&x, &cams, 2.0, 1_000_000, 7).unwrap();
    let single_err = (closed.density / mc.density - 1.0).abs();
    verdict(
        4,
        worst < 0.05 && single_err < 0.03,
        &format!("60deg rig worst rel err {worst:.4} over 10 points; single-camera closed form vs MC {single_err:.4}"),
    );
}

#[test]
fn criterion_05_triangulation_monotonicity() {
    let _g = heavy();
    let x = Vec3::zeros();
    let narrow = stereo_rig(5.0).unwrap();
    let wide = stereo_rig(60.0).unwrap();
    let cams_n = rig_pseudo_cameras(&narrow, &x);
    let cams_w = rig_pseudo_cameras(&wide, &x);
    let is = |cams: &[PinholeCamera], s: f64| posterior_importance_sampling(&x, cams, s, 100_000, 5).unwrap().density;
    let bf = |cams: &[PinholeCamera], bounds: &Aabb, s: f64| {
        posterior_brute_force(&x, cams, s, bounds, 160).unwrap().density
    };
    let mut lines = Vec::new();
    let (is_n, is_w) = (is(&cams_n, 2.0), is(&cams_w, 2.0));
    let (bf_n, bf_w) = (bf(&cams_n, &narrow.scene.bounds, 2.0), bf(&cams_w, &wide.scene.bounds, 2.0));
    let angle_ok = is_n < is_w && bf_n < bf_w;
    lines.push(format!("density 5deg {is_n:.4e} / 60deg {is_w:.4e} (brute {bf_n:.4e} / {bf_w:.4e})"));
    let mut sigma_ok = true;
    for (name, cams, bounds) in [("5deg", &cams_n, &narrow.scene.bounds), ("60deg", &cams_w, &wide.scene.bounds)] {
        let nll_is: Vec<f64> = [4.0, 2.0, 1.0].iter().map(|&s| -is(cams, s).ln()).collect();
        let nll_bf: Vec<f64> = [4.0, 2.0, 1.0].iter().map(|&s| -bf(cams, bounds, s).ln()).collect();
        sigma_ok &= nll_is.windows(2).all(|w| w[1] < w[0]) && nll_bf.windows(2).all(|w| w[1] < w[0]);
        lines.push(format!(
            "{name} NLL at sigma 4/2/1: {:.3}/{:.3}/{:.3} (brute {:.3}/{:.3}/{:.3})",
            nll_is[0], nll_is[1], nll_is[2], nll_bf[0], nll_bf[1], nll_bf[2]
        ));
    }
    verdict(5, angle_ok && sigma_ok, &lines.join("; "));
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_regularizer_efficacy() {
    let _g = heavy();
    let field = floater_field();
    let fx = floater_rig().unwrap();
    let voxel = fixtures::floater_voxel(&fx.scene).unwrap();
    let t = Instant::now();
    let cfg = RegularizerConfig::default();
    let reg = refine_density(&voxel, field, &fx.cams, &fx.held_out, &fx.scene, &cfg, 1).unwrap();
    let base_cfg = RegularizerConfig {
        reg_weight: 0.0,
        ..cfg.clone()
    };
    let base = refine_density(&voxel, field, &fx.cams, &fx.held_out, &fx.scene, &base_cfg, 1).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let ratio = reg.final_mae() / base.final_mae();
    verdict(
        6,
        ratio <= 0.5 && secs <= 300.0,
        &format!(
            "held-out depth MAE {:.4} -> with hinge {:.4}, depth only {:.4} (ratio {ratio:.3}), {:.1}s for both runs",
            reg.trace[0].depth_mae_holdout,
            reg.final_mae(),
            base.final_mae(),
            secs
        ),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_single_camera_overfit() {
    let _g = heavy();
    let fx = single_camera().unwrap();
    let outcome = train_provenance_field(&fx.scene, &fx.cams, &desk_training(), 1).unwrap();
    let losses = &outcome.losses;
    let initial = losses[0];
    let tail = losses.iter().rev().take(50).sum::<f64>() / 50.0;
    let field = &outcome.field;
    let scale = field.config.distance_scale();
    let mut errs = Vec::new();
    for x in fx.scene.bounds.lattice(6) {
        let gt = empirical_provenance(&fx.scene, &fx.cams, &x).unwrap().tuples[0];
        if gt.is_zero() {
            continue;
        }
        for s in field.sample_provenances(&x, 16, 3, 0.7).unwrap() {
            errs.push(sq_dist4(&s.to_vec4(scale), &gt.to_vec4(scale)).sqrt());
        }
    }
    errs.sort_by(f64::total_cmp);
    let median = errs.get(errs.len() / 2).copied().unwrap_or(f64::INFINITY);
    verdict(
        7,
        tail < 0.01 * initial && median < 0.05,
        &format!(
            "loss {initial:.4} -> {tail:.2e} (mean of last 50, {:.2}% of initial); median error {median:.4} over {} kept samples",
            100.0 * tail / initial,
            errs.len()
        ),
    );
}

// ---------------------------------------------------------------- 8

/// Straightforward re-implementation: per threshold, loop over points and
/// count nearest distances below it; AP from the descending-threshold sum
/// and AUC from sorted trapezoids.
fn reference_ap_auc(points: &[PointSet], thresholds: &[f64]) -> (f64, f64) {
    let mut precision = vec![0.0; thresholds.len()];
    let mut recall = vec![0.0; thresholds.len()];
    for (k, &delta) in thresholds.iter().enumerate() {
        let (mut ps, mut rs) = (0.0, 0.0);
        for p in points {
            if p.gt.is_empty() || p.pred.is_empty() {
                continue;
            }
            let covered = |a: &[f64; 4], set: &[[f64; 4]]| {
                set.iter().map(|b| sq_dist4(a, b)).fold(f64::INFINITY, f64::min) < delta
            };
            ps += p.gt.iter().filter(|g| covered(g, &p.pred)).count() as f64 / p.gt.len() as f64;
            rs += p.pred.iter().filter(|q| covered(q, &p.gt)).count() as f64 / p.pred.len() as f64;
        }
        precision[k] = ps / points.len() as f64;
        recall[k] = rs / points.len() as f64;
    }
    let mut ap = 0.0;
    for k in (0..thresholds.len()).rev() {
        let below = if k == 0 { 0.0 } else { recall[k - 1] };
        ap += (recall[k] - below) * precision[k];
    }
    let mut pts = vec![(0.0, 1.0)];
    pts.extend(recall.iter().copied().zip(precision.iter().copied()));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let auc = pts.windows(2).map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1)).sum();
    (ap, auc)
}

fn random_vec4(rng: &mut ChaCha8Rng) -> [f64; 4] {
    [rng.random(), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
}

#[test]
fn criterion_08_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let schedule = ThresholdSchedule::log_linear(60, -8.0, 1.0);
    let mut mismatches = 0;
    for _ in 0..20 {
        let points: Vec<PointSet> = (0..rng.random_range(1..12))
            .map(|_| PointSet {
                gt: (0..rng.random_range(0..4)).map(|_| random_vec4(&mut rng)).collect(),
                pred: (0..rng.random_range(0..6)).map(|_| random_vec4(&mut rng)).collect(),
            })
            .collect();
        if ap_auc(&points, &schedule) != reference_ap_auc(&points, &schedule.values) {
            mismatches += 1;
        }
    }
    let errors: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
    let ause = sparsification_curve(&errors, &errors).ause;
    verdict(8, mismatches == 0 && ause == 0.0, &format!("{mismatches} of 20 toy sets differ; AUSE with scores = errors {ause}"));
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_viewpoint_balance() {
    let _g = heavy();
    let field = floater_field();
    let (targets, quad) = floater_targets();
    let start = floater_view_start().unwrap();
    let run = |use_selection: bool| {
        let cfg = ViewSelectConfig {
            objective: ViewObjective::Area {
                quad: quad.map(|v| [v.x, v.y, v.z]),
            },
            targets: targets.iter().map(|v| [v.x, v.y, v.z]).collect(),
            use_selection,
            selection_weight: 1.0,
            iterations: 200,
            step: 0.05,
            ..ViewSelectConfig::default()
        };
        optimize_viewpoint(&start, field, &cfg, 5).unwrap()
    };
    let with = run(true);
    let without = run(false);
    let (a, b) = (&with.steps[0], with.steps.last().unwrap());
    let c = without.steps.last().unwrap();
    verdict(
        9,
        b.objective < a.objective && b.nearest_y_dist <= c.nearest_y_dist,
        &format!(
            "with selection: objective {:.2} -> {:.2}, nearest provenance {:.3}; objective only: {:.2}, nearest provenance {:.3}",
            a.objective, b.objective, b.nearest_y_dist, c.objective, c.nearest_y_dist
        ),
    );
}

// ---------------------------------------------------------------- 10

/// The CLI binary from the same target directory, built by `cargo test --workspace`.
fn cli_binary() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let dir = exe.parent()?.parent()?;
    let bin = dir.join(format!("provfield{}", std::env::consts::EXE_SUFFIX));
    bin.exists().then_some(bin)
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

const TINY: &str = r#""fixture": "floater-rig", "checkpoint": "t/field.bin",
    "train": {"iterations": 30, "rays_per_iter": 8, "points_per_ray": 4, "hidden": 16, "b": 4, "freqs": 2, "k": 4, "lr": 1e-3},
    "uncertainty": {"n_is": 2000, "k": 8, "per_view": 4, "stride": 12, "depth_samples": 32},
    "render_grid": 8,
    "eval": {"lattice_res": 3},
    "refine": {"grid": 10, "regularizer": {"iterations": 3, "rays_per_iter": 8, "depth_samples": 32}},
    "viewselect": {"select": {"iterations": 3, "targets": [[0, 0, -0.01], [0.3, 0.3, -0.01]]}}"#;

#[test]
fn criterion_10_cli_determinism() {
    let _g = heavy();
    let Some(bin) = cli_binary() else {
        verdict(10, false, "provfield binary not found next to the test executable; run `cargo test --workspace`");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), format!("{{{TINY}}}")).unwrap();
    let commands: [(&str, &[&str]); 6] = [
        ("t", &["train"]),
        ("u", &["uncertainty"]),
        ("e", &["eval"]),
        ("r", &["refine"]),
        ("v", &["viewselect"]),
        ("g", &["gen-scene"]),
    ];
    let mut report = Vec::new();
    let mut pass = true;
    for (out, args) in commands {
        let mut runs = Vec::new();
        for _ in 0..2 {
            let target = dir.path().join(out);
            let copy = dir.path().join(format!("{out}.prev"));
            if target.exists() {
                fs::rename(&target, &copy).unwrap();
            }
            let status = Command::new(&bin)
                .args(args)
                .args(["--config", "c.json", "--seed", "11", "--out", out])
                .current_dir(dir.path())
                .output()
                .unwrap();
            assert!(status.status.success(), "{args:?}: {}", String::from_utf8_lossy(&status.stderr));
            runs.push(snapshot(&target));
        }
        let same = runs[0] == runs[1] && !runs[0].is_empty();
        pass &= same;
        report.push(format!("{} {} files {}", args[0], runs[0].len(), if same { "identical" } else { "DIFFER" }));
    }
    verdict(10, pass, &report.join(", "));
}
