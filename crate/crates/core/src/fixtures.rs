//! Bundled synthetic rigs.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{Aabb, PinholeCamera, Vec3};
use crate::scene::{AnalyticScene, Primitive, VoxelField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub name: String,
    pub scene: AnalyticScene,
    pub cams: Vec<PinholeCamera>,
    /// Cameras kept out of training, for evaluation.
    pub held_out: Vec<PinholeCamera>,
}

pub const FIXTURE_NAMES: [&str; 5] = [
    "single-camera",
    "opposed-pair",
    "stereo-5deg",
    "stereo-60deg",
    "floater-rig",
];

pub fn by_name(name: &str) -> Option<Result<Fixture>> {
    match name {
        "single-camera" => Some(single_camera()),
        "opposed-pair" => Some(opposed_pair()),
        "stereo-5deg" => Some(stereo_rig(5.0)),
        "stereo-60deg" => Some(stereo_rig(60.0)),
        "floater-rig" => Some(floater_rig()),
        _ => None,
    }
}

fn look(center: Vec3, target: Vec3, focal: f64, size: u32, near: f64, far: f64) -> Result<PinholeCamera> {
    PinholeCamera::look_at(center, target, Vec3::y(), focal, size, size, near, far)
}

/// Empty unit box seen by one camera on the -z side.
pub fn single_camera() -> Result<Fixture> {
    Ok(Fixture {
        name: "single-camera".into(),
        scene: AnalyticScene::empty(Aabb::new([-1.0; 3], [1.0; 3])?),
        cams: vec![look(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), 64.0, 64, 0.5, 6.0)?],
        held_out: Vec::new(),
    })
}

/// Two cameras facing each other across the box, with a dense slab covering
/// the +x part of the mid-plane: points left of it are seen from both sides,
/// points right of it only from one.
pub fn opposed_pair() -> Result<Fixture> {
    let bounds = Aabb::new([-1.0; 3], [1.0; 3])?;
    let scene = AnalyticScene::new(
        bounds,
        vec![Primitive::Box {
            min: [0.3, -1.0, -0.15],
            max: [1.0, 1.0, 0.15],
            density: 30.0,
        }],
    )?;
    Ok(Fixture {
        name: "opposed-pair".into(),
        scene,
        cams: vec![
            look(Vec3::new(0.0, 0.0, -3.5), Vec3::zeros(), 64.0, 64, 0.5, 6.0)?,
            look(Vec3::new(0.0, 0.0, 3.5), Vec3::zeros(), 64.0, 64, 0.5, 6.0)?,
        ],
        held_out: Vec::new(),
    })
}

/// Empty box viewed by two cameras at distance 2 whose axes meet at the
/// origin with the given angle between them.
pub fn stereo_rig(angle_deg: f64) -> Result<Fixture> {
    let half = angle_deg.to_radians() / 2.0;
    let dist = 2.0;
    let cam = |s: f64| look(Vec3::new(s * dist * half.sin(), 0.0, -dist * half.cos()), Vec3::zeros(), 64.0, 64, 0.5, 4.0);
    Ok(Fixture {
        name: format!("stereo-{}deg", angle_deg),
        scene: AnalyticScene::empty(Aabb::new([-0.5; 3], [0.5; 3])?),
        cams: vec![cam(-1.0)?, cam(1.0)?],
        held_out: Vec::new(),
    })
}

/// Back wall plus a box object, three training cameras on a line and one
/// held-out view from an offset position.
pub fn floater_rig() -> Result<Fixture> {
    let bounds = Aabb::new([-1.5; 3], [1.5; 3])?;
    let scene = AnalyticScene::new(
        bounds,
        vec![
            Primitive::Box {
                min: [-1.5, -1.5, 1.0],
                max: [1.5, 1.5, 1.3],
                density: 50.0,
            },
            Primitive::Box {
                min: [-0.4, -0.4, 0.0],
                max: [0.4, 0.4, 0.6],
                density: 50.0,
            },
        ],
    )?;
    let target = Vec3::new(0.0, 0.0, 0.6);
    let cams = [-1.0, 0.0, 1.0]
        .iter()
        .map(|&x| look(Vec3::new(x, 0.0, -3.0), target, 48.0, 48, 0.5, 6.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(Fixture {
        name: "floater-rig".into(),
        scene,
        cams,
        held_out: vec![look(Vec3::new(0.5, 0.5, -2.8), target, 48.0, 48, 0.5, 6.0)?],
    })
}

/// Voxel resolution of the refinement starting point.
pub const FLOATER_GRID: usize = 24;
/// Faint haze injected between the rig and the object.
pub const FLOATER_CENTER: [f64; 3] = [0.3, 0.3, -1.44];
pub const FLOATER_RADIUS: f64 = 0.4;
pub const FLOATER_SIGMA: f64 = 0.5;

/// Voxel fit of the scene with the floater haze added: the starting point
/// for refinement runs.
pub fn floater_voxel(scene: &AnalyticScene) -> Result<VoxelField> {
    let mut v = VoxelField::from_field(scene, FLOATER_GRID, 32)?;
    v.add_blob(&Vec3::from(FLOATER_CENTER), FLOATER_RADIUS, FLOATER_SIGMA);
    Ok(v)
}

/// Targets on the object's camera-facing side and the quad around it.
pub fn floater_targets() -> (Vec<Vec3>, [Vec3; 4]) {
    let z = -0.01;
    let targets = vec![
        Vec3::new(0.0, 0.0, z),
        Vec3::new(-0.3, -0.3, z),
        Vec3::new(0.3, -0.3, z),
        Vec3::new(0.3, 0.3, z),
        Vec3::new(-0.3, 0.3, z),
    ];
    let quad = [
        Vec3::new(-0.4, -0.4, 0.0),
        Vec3::new(0.4, -0.4, 0.0),
        Vec3::new(0.4, 0.4, 0.0),
        Vec3::new(-0.4, 0.4, 0.0),
    ];
    (targets, quad)
}

/// Starting view for viewpoint selection: straight in front of the object,
/// farther back than the training rig.
pub fn floater_view_start() -> Result<PinholeCamera> {
    look(Vec3::new(0.0, 0.0, -4.0), Vec3::zeros(), 48.0, 48, 0.5, 6.0)
}
