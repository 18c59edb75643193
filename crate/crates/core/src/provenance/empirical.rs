use crate::error::{Error, Result};
use crate::geometry::{FrustumRegion, PinholeCamera, Vec3};
use crate::scene::DensityField;

use super::{ProvenanceSample, ProvenanceSource};

/// One tuple per camera, zero for cameras that cannot see the point.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalProvenanceSet {
    pub tuples: Vec<ProvenanceSample>,
}

impl EmpiricalProvenanceSet {
    pub fn nonzero(&self) -> impl Iterator<Item = &ProvenanceSample> {
        self.tuples.iter().filter(|s| !s.is_zero())
    }
}

/// Empirical provenance of `x`: for each camera whose frustum holds `x`, the
/// transmittance from the camera's near plane to `x` scales the
/// distance-direction tuple; other cameras contribute zero tuples.
pub fn empirical_provenance<F: DensityField + ?Sized>(
    scene: &F,
    cams: &[PinholeCamera],
    x: &Vec3,
) -> Result<EmpiricalProvenanceSet> {
    if !scene.bounds().contains(x) {
        return Err(Error::OutsideBounds([x.x, x.y, x.z]));
    }
    let tuples = cams
        .iter()
        .map(|cam| {
            if !FrustumRegion::full(cam).contains(x) {
                return Ok(ProvenanceSample::ZERO);
            }
            let Some((ray, dist)) = cam.ray_to(x) else {
                return Ok(ProvenanceSample::ZERO);
            };
            let v = scene.transmittance(&ray, dist)?;
            Ok(ProvenanceSample::from_visibility(dist, &ray.direction, v))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmpiricalProvenanceSet { tuples })
}

/// Ground-truth provenance source backed by a scene and its cameras.
pub struct EmpiricalOracle<'a, F: DensityField + ?Sized> {
    pub scene: &'a F,
    pub cams: &'a [PinholeCamera],
    pub distance_scale: f64,
}

impl<'a, F: DensityField + ?Sized> EmpiricalOracle<'a, F> {
    pub fn new(scene: &'a F, cams: &'a [PinholeCamera]) -> Self {
        let near = cams.iter().map(|c| c.near).fold(f64::INFINITY, f64::min);
        let far = cams.iter().map(|c| c.far).fold(0.0, f64::max);
        Self {
            scene,
            cams,
            distance_scale: far - near,
        }
    }
}

impl<F: DensityField + ?Sized> ProvenanceSource for EmpiricalOracle<'_, F> {
    /// Returns the camera tuples themselves; `n` and `seed` are ignored.
    fn sample_batch(&self, xs: &[Vec3], _n: usize, _seed: u64) -> Result<Vec<Vec<ProvenanceSample>>> {
        xs.iter()
            .map(|x| empirical_provenance(self.scene, self.cams, x).map(|s| s.tuples))
            .collect()
    }

    fn distance_scale(&self) -> f64 {
        self.distance_scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Aabb, Mat3};
    use crate::scene::{AnalyticScene, Primitive};

    fn cam() -> PinholeCamera {
        PinholeCamera::new(Mat3::identity(), Vec3::zeros(), 64.0, 64.0, 32.0, 32.0, 64, 64, 0.5, 6.0)
            .unwrap()
    }

    fn scene_with(prims: Vec<Primitive>) -> AnalyticScene {
        AnalyticScene::new(Aabb::new([-1.0, -1.0, 0.5], [1.0, 1.0, 3.0]).unwrap(), prims).unwrap()
    }

    #[test]
    fn empty_scene_full_visibility() {
        let s = scene_with(vec![]);
        let set = empirical_provenance(&s, &[cam()], &Vec3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(set.tuples, vec![ProvenanceSample { t: 2.0, d: [0.0, 0.0, 1.0] }]);
    }

    #[test]
    fn opaque_wall_zeroes_tuple() {
        let s = scene_with(vec![Primitive::Box {
            min: [-1.0, -1.0, 0.9],
            max: [1.0, 1.0, 1.1],
            density: 1e4,
        }]);
        let t = empirical_provenance(&s, &[cam()], &Vec3::new(0.0, 0.0, 2.0)).unwrap().tuples[0];
        assert!(t.t < 1e-12 && t.visibility() < 1e-12);
    }

    #[test]
    fn half_transparent_slab() {
        let s = scene_with(vec![Primitive::Box {
            min: [-1.0, -1.0, 0.75],
            max: [1.0, 1.0, 1.25],
            density: 1.0,
        }]);
        let t = empirical_provenance(&s, &[cam()], &Vec3::new(0.0, 0.0, 2.0)).unwrap().tuples[0];
        let v = (-0.5f64).exp();
        assert!((t.t - 2.0 * v).abs() < 1e-14);
        assert!((t.d[2] - v).abs() < 1e-15 && t.d[0] == 0.0 && t.d[1] == 0.0);
    }

    #[test]
    fn outside_frustum_and_bounds() {
        let s = scene_with(vec![]);
        let set = empirical_provenance(&s, &[cam()], &Vec3::new(0.9, 0.0, 0.6)).unwrap();
        assert!(set.tuples[0].is_zero());
        assert!(matches!(
            empirical_provenance(&s, &[cam()], &Vec3::new(0.0, 0.0, 5.0)),
            Err(Error::OutsideBounds(_))
        ));
    }
}
