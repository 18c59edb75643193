//! Ground-truth density scenes: analytic primitive unions with exact
//! transmittance, and a trilinear voxel grid for learnable densities.

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, PinholeCamera, Ray, Vec3};

pub use crate::geometry::Aabb as SceneBounds;

/// Density below which a ray counts as empty when compositing depth.
pub const OPACITY_EPS: f64 = 1e-6;

/// Transmittance level that defines "the surface" along a ray.
pub const SURFACE_TRANSMITTANCE: f64 = 0.5;

/// A scalar density over a bounded region; zero outside the bounds.
pub trait DensityField: Sync {
    fn bounds(&self) -> &Aabb;

    fn density_at(&self, x: &Vec3) -> f64;

    /// `∫_a^b σ(ray(s)) ds`.
    fn optical_depth(&self, ray: &Ray, a: f64, b: f64) -> f64;

    /// Optical depth of one short compositing segment; may be cheaper than
    /// [`optical_depth`](Self::optical_depth).
    fn segment_optical_depth(&self, ray: &Ray, a: f64, b: f64) -> f64 {
        self.density_at(&ray.at(0.5 * (a + b))) * (b - a)
    }

    /// `exp(-∫_near^t σ)` along `ray`.
    fn transmittance(&self, ray: &Ray, t: f64) -> Result<f64> {
        if t < ray.near * (1.0 - 1e-12) {
            return Err(Error::BeforeNear { t, near: ray.near });
        }
        Ok((-self.optical_depth(ray, ray.near, t.max(ray.near))).exp())
    }
}

/// Part of `[a, b]` where the ray is inside `bounds`.
fn clip_to_bounds(bounds: &Aabb, ray: &Ray, a: f64, b: f64) -> Option<(f64, f64)> {
    let (t0, t1) = bounds.ray_interval(&ray.origin, &ray.direction)?;
    let lo = a.max(t0);
    let hi = b.min(t1);
    (lo < hi).then_some((lo, hi))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        density: f64,
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
        density: f64,
    },
}

impl Primitive {
    pub fn density(&self) -> f64 {
        match self {
            Primitive::Sphere { density, .. } | Primitive::Box { density, .. } => *density,
        }
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                (x - Vec3::from(*center)).norm_squared() <= radius * radius
            }
            Primitive::Box { min, max, .. } => (0..3).all(|i| x[i] >= min[i] && x[i] <= max[i]),
        }
    }

    pub fn bounding_box(&self) -> Aabb {
        match self {
            Primitive::Sphere { center, radius, .. } => Aabb {
                min: [center[0] - radius, center[1] - radius, center[2] - radius],
                max: [center[0] + radius, center[1] + radius, center[2] + radius],
            },
            Primitive::Box { min, max, .. } => Aabb {
                min: *min,
                max: *max,
            },
        }
    }

    /// Parameter interval of the ray (unit direction) inside the primitive.
    pub fn ray_interval(&self, ray: &Ray) -> Option<(f64, f64)> {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = ray.origin - Vec3::from(*center);
                let b = oc.dot(&ray.direction);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some((-b - s, -b + s))
            }
            Primitive::Box { min, max, .. } => Aabb {
                min: *min,
                max: *max,
            }
            .ray_interval(&ray.origin, &ray.direction),
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.density();
        if !(d.is_finite() && d >= 0.0) {
            return Err(Error::InvalidScene(format!("density {d}")));
        }
        match self {
            Primitive::Sphere { radius, .. } if !(*radius > 0.0) => {
                Err(Error::InvalidScene(format!("sphere radius {radius}")))
            }
            Primitive::Box { .. } => self.bounding_box().validate(),
            _ => Ok(()),
        }
    }
}

/// Union of constant-density primitives; densities add where they overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticScene {
    pub bounds: Aabb,
    pub primitives: Vec<Primitive>,
}

impl AnalyticScene {
    pub fn new(bounds: Aabb, primitives: Vec<Primitive>) -> Result<Self> {
        let s = Self { bounds, primitives };
        s.validate()?;
        Ok(s)
    }

    pub fn empty(bounds: Aabb) -> Self {
        Self {
            bounds,
            primitives: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        for p in &self.primitives {
            p.validate()?;
            if !self.bounds.contains_box(&p.bounding_box()) {
                return Err(Error::InvalidScene(format!(
                    "primitive {p:?} extends outside the bounds"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl DensityField for AnalyticScene {
    fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    fn density_at(&self, x: &Vec3) -> f64 {
        if !self.bounds.contains(x) {
            return 0.0;
        }
        self.primitives
            .iter()
            .filter(|p| p.contains(x))
            .map(Primitive::density)
            .sum()
    }

    fn optical_depth(&self, ray: &Ray, a: f64, b: f64) -> f64 {
        self.primitives
            .iter()
            .filter_map(|p| {
                let (t0, t1) = p.ray_interval(ray)?;
                let len = b.min(t1) - a.max(t0);
                (len > 0.0).then(|| p.density() * len)
            })
            .sum()
    }

    fn segment_optical_depth(&self, ray: &Ray, a: f64, b: f64) -> f64 {
        self.optical_depth(ray, a, b)
    }
}

/// Numerical stand-in for any field: composite midpoint rule with `n_q`
/// samples over the part of `[a, b]` inside the bounds.
#[derive(Clone, Copy, Debug)]
pub struct MidpointQuadrature<'a, F: DensityField> {
    pub field: &'a F,
    pub n_q: usize,
}

impl<F: DensityField> DensityField for MidpointQuadrature<'_, F> {
    fn bounds(&self) -> &Aabb {
        self.field.bounds()
    }

    fn density_at(&self, x: &Vec3) -> f64 {
        self.field.density_at(x)
    }

    fn optical_depth(&self, ray: &Ray, a: f64, b: f64) -> f64 {
        let Some((lo, hi)) = clip_to_bounds(self.field.bounds(), ray, a, b) else {
            return 0.0;
        };
        let h = (hi - lo) / self.n_q as f64;
        (0..self.n_q)
            .map(|k| self.field.density_at(&ray.at(lo + (k as f64 + 0.5) * h)))
            .sum::<f64>()
            * h
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Raw parameter whose softplus is `sigma`; clamped below for `sigma` near 0.
pub fn inverse_softplus(sigma: f64) -> f64 {
    const FLOOR: f64 = -12.0;
    if sigma <= softplus(FLOOR) {
        FLOOR
    } else if sigma > 30.0 {
        sigma
    } else {
        sigma.exp_m1().ln()
    }
}

/// `n³` cell-centered grid of raw densities; `σ = softplus(raw)` at the
/// centers, trilinearly interpolated between them and held constant in the
/// outer half-cell.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelField {
    pub bounds: Aabb,
    pub n: usize,
    pub raw: Vec<f64>,
    /// Midpoint samples used by [`DensityField::optical_depth`].
    pub n_q: usize,
}

impl VoxelField {
    pub fn new(bounds: Aabb, n: usize, fill_sigma: f64, n_q: usize) -> Result<Self> {
        bounds.validate()?;
        if n < 2 || n_q == 0 {
            return Err(Error::InvalidScene(format!(
                "voxel resolution {n} / quadrature {n_q}"
            )));
        }
        Ok(Self {
            bounds,
            n,
            raw: vec![inverse_softplus(fill_sigma); n * n * n],
            n_q,
        })
    }

    /// Samples `field` at the voxel centers.
    pub fn from_field<F: DensityField>(field: &F, n: usize, n_q: usize) -> Result<Self> {
        let mut v = Self::new(*field.bounds(), n, 0.0, n_q)?;
        for (idx, c) in v.bounds.lattice(n).iter().enumerate() {
            v.raw[idx] = inverse_softplus(field.density_at(c));
        }
        Ok(v)
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n + j) * self.n + k
    }

    pub fn cell_size(&self) -> Vec3 {
        self.bounds.extent() / self.n as f64
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let h = self.cell_size();
        Vec3::new(
            self.bounds.min[0] + (i as f64 + 0.5) * h.x,
            self.bounds.min[1] + (j as f64 + 0.5) * h.y,
            self.bounds.min[2] + (k as f64 + 0.5) * h.z,
        )
    }

    /// Adds a ball of constant extra density to every voxel whose center it covers.
    pub fn add_blob(&mut self, center: &Vec3, radius: f64, sigma: f64) {
        for i in 0..self.n {
            for j in 0..self.n {
                for k in 0..self.n {
                    if (self.center(i, j, k) - center).norm() <= radius {
                        let idx = self.index(i, j, k);
                        let s = softplus(self.raw[idx]) + sigma;
                        self.raw[idx] = inverse_softplus(s);
                    }
                }
            }
        }
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.raw.iter().map(|&r| softplus(r)).collect()
    }

    /// Trilinear corner weights at `x`, or `None` outside the bounds.
    pub fn corner_weights(&self, x: &Vec3) -> Option<[(usize, f64); 8]> {
        if !self.bounds.contains(x) {
            return None;
        }
        let h = self.cell_size();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let u = ((x[a] - self.bounds.min[a]) / h[a] - 0.5).clamp(0.0, (self.n - 1) as f64);
            let i0 = (u.floor() as usize).min(self.n - 2);
            base[a] = i0;
            frac[a] = u - i0 as f64;
        }
        let mut out = [(0usize, 0.0); 8];
        let mut c = 0;
        for di in 0..2 {
            for dj in 0..2 {
                for dk in 0..2 {
                    let w = if di == 1 { frac[0] } else { 1.0 - frac[0] }
                        * if dj == 1 { frac[1] } else { 1.0 - frac[1] }
                        * if dk == 1 { frac[2] } else { 1.0 - frac[2] };
                    out[c] = (self.index(base[0] + di, base[1] + dj, base[2] + dk), w);
                    c += 1;
                }
            }
        }
        Some(out)
    }

    /// Sparse weights `(voxel, w)` such that the midpoint-rule optical depth
    /// over `[a, b]` is `Σ w·σ_voxel`; sorted by voxel index.
    pub fn optical_depth_weights(&self, ray: &Ray, a: f64, b: f64, n_q: usize) -> Vec<(usize, f64)> {
        let Some((lo, hi)) = clip_to_bounds(&self.bounds, ray, a, b) else {
            return Vec::new();
        };
        let h = (hi - lo) / n_q as f64;
        let mut acc: Vec<(usize, f64)> = Vec::with_capacity(8 * n_q);
        for k in 0..n_q {
            if let Some(ws) = self.corner_weights(&ray.at(lo + (k as f64 + 0.5) * h)) {
                acc.extend(ws.iter().filter(|(_, w)| *w != 0.0).map(|&(i, w)| (i, w * h)));
            }
        }
        merge_weights(acc)
    }

    /// Sparse weights of the density at one point.
    pub fn density_weights(&self, x: &Vec3) -> Vec<(usize, f64)> {
        self.corner_weights(x)
            .map(|ws| merge_weights(ws.iter().copied().filter(|(_, w)| *w != 0.0).collect()))
            .unwrap_or_default()
    }
}

fn merge_weights(mut acc: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    acc.sort_by_key(|&(i, _)| i);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(acc.len());
    for (i, w) in acc {
        match out.last_mut() {
            Some((j, v)) if *j == i => *v += w,
            _ => out.push((i, w)),
        }
    }
    out
}

impl DensityField for VoxelField {
    fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    fn density_at(&self, x: &Vec3) -> f64 {
        self.corner_weights(x)
            .map(|ws| ws.iter().map(|&(i, w)| w * softplus(self.raw[i])).sum())
            .unwrap_or(0.0)
    }

    fn optical_depth(&self, ray: &Ray, a: f64, b: f64) -> f64 {
        let Some((lo, hi)) = clip_to_bounds(&self.bounds, ray, a, b) else {
            return 0.0;
        };
        let h = (hi - lo) / self.n_q as f64;
        (0..self.n_q)
            .map(|k| self.density_at(&ray.at(lo + (k as f64 + 0.5) * h)))
            .sum::<f64>()
            * h
    }
}

/// Midpoints and lengths of `n` equal segments over `[near, far]`.
pub fn segment_layout(near: f64, far: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = (far - near) / n as f64;
    let t = (0..n).map(|k| near + (k as f64 + 0.5) * h).collect();
    (t, vec![h; n])
}

/// Alpha-composited expected depth over `n_samples` equal segments of
/// `[ray.near, ray.far]`; `ray.far` when the ray stays (nearly) transparent.
pub fn render_depth<F: DensityField + ?Sized>(field: &F, ray: &Ray, n_samples: usize) -> f64 {
    let n = n_samples.max(2);
    let h = (ray.far - ray.near) / n as f64;
    let mut trans = 1.0;
    let mut acc = 0.0;
    for k in 0..n {
        let a = ray.near + k as f64 * h;
        let alpha = (-field.segment_optical_depth(ray, a, a + h)).exp();
        acc += trans * (1.0 - alpha) * (a + 0.5 * h);
        trans *= alpha;
    }
    let opacity = 1.0 - trans;
    if opacity < OPACITY_EPS {
        ray.far
    } else {
        acc / opacity
    }
}

/// Distance along `ray` where transmittance first reaches `level`, by bisection.
pub fn transmittance_crossing<F: DensityField + ?Sized>(
    field: &F,
    ray: &Ray,
    level: f64,
) -> Option<f64> {
    let t_of = |t: f64| (-field.optical_depth(ray, ray.near, t)).exp();
    if t_of(ray.far) > level {
        return None;
    }
    let (mut lo, mut hi) = (ray.near, ray.far);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_of(mid) > level {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Some(0.5 * (lo + hi))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfacePoint {
    pub point: Vec3,
    pub camera: usize,
    pub pixel: Vector2<f64>,
}

/// Random pixels per camera, each traced to where its transmittance falls
/// to `level`; pixels whose rays never get that opaque are skipped.
pub fn sample_surface_points<F: DensityField + ?Sized>(
    field: &F,
    cams: &[PinholeCamera],
    per_view: usize,
    level: f64,
    seed: u64,
) -> Vec<SurfacePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (ci, cam) in cams.iter().enumerate() {
        for _ in 0..per_view {
            let px = Vector2::new(
                rng.random_range(0.0..cam.width as f64),
                rng.random_range(0.0..cam.height as f64),
            );
            let ray = cam.pixel_ray(&px);
            if let Some(t) = transmittance_crossing(field, &ray, level) {
                out.push(SurfacePoint {
                    point: ray.at(t),
                    camera: ci,
                    pixel: px,
                });
            }
        }
    }
    out
}
