//! Pinhole cameras, rays, frustum regions and pose retraction.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ROTATION_TOL: f64 = 1e-9;

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0..3).all(|i| {
            self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] < self.max[i]
        });
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidScene(format!(
                "box min {:?} must be < max {:?}",
                self.min, self.max
            )))
        }
    }

    pub fn min_v(&self) -> Vec3 {
        Vec3::from(self.min)
    }

    pub fn max_v(&self) -> Vec3 {
        Vec3::from(self.max)
    }

    pub fn extent(&self) -> Vec3 {
        self.max_v() - self.min_v()
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        (0..3).all(|i| other.min[i] >= self.min[i] && other.max[i] <= self.max[i])
    }

    /// Intersection, or `None` when it has no interior.
    pub fn intersect(&self, other: &Aabb) -> Option<Aabb> {
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for i in 0..3 {
            min[i] = self.min[i].max(other.min[i]);
            max[i] = self.max[i].min(other.max[i]);
            if min[i] >= max[i] {
                return None;
            }
        }
        Some(Aabb { min, max })
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Aabb> {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for p in points {
            any = true;
            for i in 0..3 {
                min[i] = min[i].min(p[i]);
                max[i] = max[i].max(p[i]);
            }
        }
        any.then_some(Aabb { min, max })
    }

    /// Parametric interval `[t0, t1]` where `origin + t * dir` is inside the box.
    pub fn ray_interval(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-300 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
            } else {
                let a = (self.min[i] - origin[i]) / dir[i];
                let b = (self.max[i] - origin[i]) / dir[i];
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
        }
        (t0 <= t1).then_some((t0, t1))
    }

    /// Cell-centered lattice with `res` cells per axis.
    pub fn lattice(&self, res: usize) -> Vec<Vec3> {
        let e = self.extent();
        let mut out = Vec::with_capacity(res * res * res);
        for i in 0..res {
            for j in 0..res {
                for k in 0..res {
                    out.push(Vec3::new(
                        self.min[0] + (i as f64 + 0.5) * e.x / res as f64,
                        self.min[1] + (j as f64 + 0.5) * e.y / res as f64,
                        self.min[2] + (k as f64 + 0.5) * e.z / res as f64,
                    ));
                }
            }
        }
        out
    }

    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> Vec3 {
        Vec3::new(
            rng.random_range(self.min[0]..self.max[0]),
            rng.random_range(self.min[1]..self.max[1]),
            rng.random_range(self.min[2]..self.max[2]),
        )
    }
}

/// Ray with unit direction, valid on `[near, far]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    /// Normalizes `direction`.
    pub fn new(origin: Vec3, direction: Vec3, near: f64, far: f64) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
            near,
            far,
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Where a world point lands on the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Inside { pixel: Vector2<f64>, depth: f64 },
    Outside,
}

impl Projection {
    pub fn pixel(&self) -> Option<Vector2<f64>> {
        match self {
            Projection::Inside { pixel, .. } => Some(*pixel),
            Projection::Outside => None,
        }
    }
}

/// Pinhole camera. `rotation` maps camera axes to world axes, so its third
/// column is the principal axis in world coordinates; image `v` grows along
/// the camera's second axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct PinholeCamera {
    rotation: Mat3,
    center: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

impl PinholeCamera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rotation: Mat3,
        center: Vec3,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Mat3::identity()).norm();
        if !(orth <= ROTATION_TOL) {
            return Err(Error::InvalidCamera(format!(
                "rotation not orthonormal (|R^T R - I| = {orth:e})"
            )));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ROTATION_TOL) {
            return Err(Error::InvalidCamera(format!("det R = {det}")));
        }
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidCamera(format!("focal lengths {fx}, {fy}")));
        }
        if !(near > 0.0 && near < far) {
            return Err(Error::InvalidCamera(format!("near {near}, far {far}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera("empty image".into()));
        }
        if !center.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidCamera("non-finite center".into()));
        }
        Ok(Self {
            rotation,
            center,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near,
            far,
        })
    }

    /// Camera at `center` looking at `target`; `up` fixes the roll
    /// (image rows run against it).
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        center: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: u32,
        height: u32,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let rotation = look_rotation(&(target - center), &up)?;
        Self::new(
            rotation,
            center,
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            near,
            far,
        )
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn center(&self) -> &Vec3 {
        &self.center
    }

    pub fn principal_axis(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        Vector2::new(self.cx, self.cy)
    }

    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation.transpose() * (x - self.center)
    }

    /// Pixel and depth for points in front of the camera, ignoring image and
    /// depth bounds.
    pub fn project_raw(&self, x: &Vec3) -> Option<(Vector2<f64>, f64)> {
        let p = self.to_camera(x);
        if p.z <= 0.0 {
            return None;
        }
        Some((
            Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy),
            p.z,
        ))
    }

    pub fn in_image(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.x <= self.width as f64 && px.y >= 0.0 && px.y <= self.height as f64
    }

    pub fn project_point(&self, x: &Vec3) -> Result<Projection> {
        if !x.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite(format!("projected point {x:?}")));
        }
        if (x - self.center).norm() == 0.0 {
            return Err(Error::AtCameraCenter);
        }
        Ok(match self.project_raw(x) {
            Some((pixel, depth))
                if depth >= self.near && depth <= self.far && self.in_image(&pixel) =>
            {
                Projection::Inside { pixel, depth }
            }
            _ => Projection::Outside,
        })
    }

    /// Ray through `pixel`; its `[near, far]` are the distances at which it
    /// crosses the near and far depth planes.
    pub fn pixel_ray(&self, pixel: &Vector2<f64>) -> Ray {
        let d_cam = Vec3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        );
        let scale = d_cam.norm();
        Ray {
            origin: self.center,
            direction: self.rotation * d_cam / scale,
            near: self.near * scale,
            far: self.far * scale,
        }
    }

    /// Ray from the camera center towards `x`, valid from the near plane.
    pub fn ray_to(&self, x: &Vec3) -> Option<(Ray, f64)> {
        let diff = x - self.center;
        let dist = diff.norm();
        if dist == 0.0 {
            return None;
        }
        let dir = diff / dist;
        let cos = dir.dot(&self.principal_axis());
        if cos <= 0.0 {
            return None;
        }
        Some((
            Ray {
                origin: self.center,
                direction: dir,
                near: self.near / cos,
                far: self.far / cos,
            },
            dist,
        ))
    }

    pub fn with_pose(&self, rotation: Mat3, center: Vec3) -> Self {
        Self {
            rotation,
            center,
            ..self.clone()
        }
    }

    pub fn with_depth_range(&self, near: f64, far: f64) -> Result<Self> {
        Self::new(
            self.rotation,
            self.center,
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            near,
            far,
        )
    }

    /// `|R^T R - I|_F`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Mat3::identity()).norm()
    }
}

/// Rotation whose third column points along `forward`, with the second
/// column (image down) opposing `up` as closely as possible.
pub fn look_rotation(forward: &Vec3, up: &Vec3) -> Result<Mat3> {
    let f = forward
        .try_normalize(1e-12)
        .ok_or_else(|| Error::InvalidCamera("zero viewing direction".into()))?;
    let mut down_hint = -up;
    if down_hint.cross(&f).norm() < 1e-9 {
        down_hint = if f.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    }
    let right = down_hint.cross(&f).normalize();
    let down = f.cross(&right);
    Ok(Mat3::from_columns(&[right, down, f]))
}

/// Pixel window of a frustum region, as a closed rectangle in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelWindow {
    pub u0: f64,
    pub u1: f64,
    pub v0: f64,
    pub v1: f64,
}

impl PixelWindow {
    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= self.u0 && px.x <= self.u1 && px.y >= self.v0 && px.y <= self.v1
    }
}

/// A camera frustum restricted to a pixel window and a depth window.
#[derive(Clone, Debug, PartialEq)]
pub struct FrustumRegion {
    pub camera: PinholeCamera,
    pub window: PixelWindow,
    pub near: f64,
    pub far: f64,
}

impl FrustumRegion {
    pub fn full(camera: &PinholeCamera) -> Self {
        Self {
            window: PixelWindow {
                u0: 0.0,
                u1: camera.width as f64,
                v0: 0.0,
                v1: camera.height as f64,
            },
            near: camera.near,
            far: camera.far,
            camera: camera.clone(),
        }
    }

    /// Square window of half-width `delta` pixels around `center`, clamped
    /// to the image.
    pub fn neighborhood(camera: &PinholeCamera, center: &Vector2<f64>, delta: f64) -> Result<Self> {
        if !(delta >= 0.0) {
            return Err(Error::InvalidCamera(format!("window half-width {delta}")));
        }
        let w = camera.width as f64;
        let h = camera.height as f64;
        Ok(Self {
            window: PixelWindow {
                u0: (center.x - delta).clamp(0.0, w),
                u1: (center.x + delta).clamp(0.0, w),
                v0: (center.y - delta).clamp(0.0, h),
                v1: (center.y + delta).clamp(0.0, h),
            },
            near: camera.near,
            far: camera.far,
            camera: camera.clone(),
        })
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        match self.camera.project_raw(x) {
            Some((px, depth)) => {
                depth >= self.near && depth <= self.far && self.window.contains(&px)
            }
            None => false,
        }
    }

    /// Closed-form volume of the truncated pyramid.
    pub fn volume(&self) -> f64 {
        let w = (self.window.u1 - self.window.u0) / self.camera.fx;
        let h = (self.window.v1 - self.window.v0) / self.camera.fy;
        w * h * (self.far.powi(3) - self.near.powi(3)) / 3.0
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let cam = &self.camera;
        let mut out = [Vec3::zeros(); 8];
        let mut i = 0;
        for depth in [self.near, self.far] {
            for u in [self.window.u0, self.window.u1] {
                for v in [self.window.v0, self.window.v1] {
                    let p = Vec3::new(
                        (u - cam.cx) / cam.fx * depth,
                        (v - cam.cy) / cam.fy * depth,
                        depth,
                    );
                    out[i] = cam.rotation * p + cam.center;
                    i += 1;
                }
            }
        }
        out
    }

    pub fn bounding_box(&self) -> Aabb {
        Aabb::from_points(self.corners().iter()).expect("eight corners")
    }
}

/// Uniform samples over an intersection of frustum regions.
#[derive(Clone, Debug)]
pub struct IntersectionSample {
    pub points: Vec<Vec3>,
    /// Volume estimate: acceptance rate times proposal-box volume.
    pub volume: f64,
    pub proposal_volume: f64,
    pub proposals: usize,
    pub accepted: usize,
}

/// Proposal budget per requested point.
const MAX_PROPOSAL_FACTOR: usize = 64;

/// Rejection-samples up to `n` points uniformly from the intersection of
/// `regions` (optionally clipped to `clip`).
///
/// Proposals are drawn from the bounding box of the smallest region,
/// tightened by the other regions' boxes and `clip`. Proposals are drawn in
/// chunks of `n` until `n` points are accepted or the budget runs out. If
/// nothing is accepted, `witness` (a point known to lie in the intersection)
/// is returned as the single sample with a one-proposal volume floor;
/// without one the call fails.
pub fn sample_frustum_intersection(
    regions: &[FrustumRegion],
    n: usize,
    seed: u64,
    witness: Option<&Vec3>,
    clip: Option<&Aabb>,
) -> Result<IntersectionSample> {
    if regions.is_empty() || n == 0 {
        return Err(Error::Config(
            "frustum intersection needs regions and n >= 1".into(),
        ));
    }
    let smallest = regions
        .iter()
        .min_by(|a, b| a.volume().total_cmp(&b.volume()))
        .expect("non-empty");
    let mut proposal = Some(smallest.bounding_box());
    for r in regions {
        proposal = proposal.and_then(|p| p.intersect(&r.bounding_box()));
    }
    if let Some(c) = clip {
        proposal = proposal.and_then(|p| p.intersect(c));
    }
    let empty = |proposal_volume: f64, proposals: usize| match witness {
        Some(w) => Ok(IntersectionSample {
            points: vec![*w],
            volume: proposal_volume / proposals.max(1) as f64,
            proposal_volume,
            proposals,
            accepted: 0,
        }),
        None => Err(Error::EmptyIntersection),
    };
    let Some(proposal) = proposal else {
        return empty(0.0, 0);
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut proposals = 0usize;
    while points.len() < n && proposals < n * MAX_PROPOSAL_FACTOR {
        for _ in 0..n {
            let p = proposal.sample_uniform(&mut rng);
            proposals += 1;
            if regions.iter().all(|r| r.contains(&p)) {
                points.push(p);
            }
        }
    }
    let accepted = points.len();
    if accepted == 0 {
        return empty(proposal.volume(), proposals);
    }
    points.truncate(n);
    Ok(IntersectionSample {
        volume: accepted as f64 / proposals as f64 * proposal.volume(),
        points,
        proposal_volume: proposal.volume(),
        proposals,
        accepted,
    })
}

/// Right-multiplies the rotation by `exp([omega]x)` and translates the center.
pub fn pose_retract(cam: &PinholeCamera, omega: &Vec3, dc: &Vec3) -> PinholeCamera {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(cam.rotation);
    let q = UnitQuaternion::from_rotation_matrix(&rot) * UnitQuaternion::from_scaled_axis(*omega);
    let q = UnitQuaternion::new_normalize(q.into_inner());
    cam.with_pose(q.to_rotation_matrix().into_inner(), cam.center + dc)
}

/// JSON record used by camera-set files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub c: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

impl From<&PinholeCamera> for CameraRecord {
    fn from(cam: &PinholeCamera) -> Self {
        let r = cam.rotation;
        Self {
            r: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            c: cam.center.into(),
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            near: cam.near,
            far: cam.far,
        }
    }
}

impl TryFrom<&CameraRecord> for PinholeCamera {
    type Error = Error;

    fn try_from(rec: &CameraRecord) -> Result<Self> {
        PinholeCamera::new(
            Mat3::from_row_slice(&rec.r),
            Vec3::from(rec.c),
            rec.fx,
            rec.fy,
            rec.cx,
            rec.cy,
            rec.width,
            rec.height,
            rec.near,
            rec.far,
        )
    }
}

impl From<PinholeCamera> for CameraRecord {
    fn from(cam: PinholeCamera) -> Self {
        Self::from(&cam)
    }
}

impl TryFrom<CameraRecord> for PinholeCamera {
    type Error = Error;

    fn try_from(rec: CameraRecord) -> Result<Self> {
        Self::try_from(&rec)
    }
}

pub fn cameras_from_json(text: &str) -> Result<Vec<PinholeCamera>> {
    let recs: Vec<CameraRecord> = serde_json::from_str(text)?;
    recs.iter().map(PinholeCamera::try_from).collect()
}

pub fn cameras_to_json(cams: &[PinholeCamera]) -> Result<String> {
    let recs: Vec<CameraRecord> = cams.iter().map(CameraRecord::from).collect();
    Ok(serde_json::to_string_pretty(&recs)?)
}
