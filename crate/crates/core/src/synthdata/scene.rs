use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Infinite plane through `point`; rendered two-sided.
    Plane { point: [f64; 3], normal: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Primitive,
    pub albedo: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    /// Unit vector pointing from surfaces toward the light.
    pub light_direction: [f64; 3],
    pub ambient: f64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::Config("scene has no objects".into()));
        }
        for obj in &self.objects {
            if obj.albedo.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
                return Err(Error::Config(format!("albedo {:?} outside [0,1]", obj.albedo)));
            }
            match obj.shape {
                Primitive::Sphere { radius, .. } if radius <= 0.0 => {
                    return Err(Error::Config("sphere radius must be positive".into()))
                }
                Primitive::Box { min, max } if (0..3).any(|i| min[i] >= max[i]) => {
                    return Err(Error::Config("box min corner must be below max corner".into()))
                }
                Primitive::Plane { normal, .. } if Vec3::from(normal).norm() < 1e-12 => {
                    return Err(Error::Config("plane normal is zero".into()))
                }
                _ => {}
            }
        }
        if (Vec3::from(self.light_direction).norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Config("light direction must be unit length".into()));
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(Error::Config("ambient must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// A ground plane plus a handful of spheres and boxes around the origin.
    pub fn random<R: Rng>(rng: &mut R) -> Scene {
        let mut objects = vec![SceneObject {
            shape: Primitive::Plane {
                point: [0.0, 0.0, 0.0],
                normal: [0.0, 1.0, 0.0],
            },
            albedo: random_albedo(rng),
        }];
        // A back wall keeps most of the frame covered by geometry.
        let wall_angle = rng.random_range(0.0..std::f64::consts::TAU);
        let wall_dist = rng.random_range(7.0..9.0);
        objects.push(SceneObject {
            shape: Primitive::Plane {
                point: [wall_dist * wall_angle.cos(), 0.0, wall_dist * wall_angle.sin()],
                normal: [-wall_angle.cos(), 0.0, -wall_angle.sin()],
            },
            albedo: random_albedo(rng),
        });
        let count = rng.random_range(3..=6);
        for _ in 0..count {
            let x = rng.random_range(-2.0..2.0);
            let z = rng.random_range(-2.0..2.0);
            let shape = if rng.random_bool(0.5) {
                let r = rng.random_range(0.3..0.9);
                Primitive::Sphere {
                    center: [x, r + rng.random_range(0.0..0.4), z],
                    radius: r,
                }
            } else {
                let sx = rng.random_range(0.25..0.8);
                let sy = rng.random_range(0.25..1.2);
                let sz = rng.random_range(0.25..0.8);
                Primitive::Box {
                    min: [x - sx, 0.0, z - sz],
                    max: [x + sx, 2.0 * sy, z + sz],
                }
            };
            objects.push(SceneObject {
                shape,
                albedo: random_albedo(rng),
            });
        }
        let elev = rng.random_range(0.4..1.3f64);
        let azim = rng.random_range(0.0..std::f64::consts::TAU);
        let light = Vec3::new(elev.cos() * azim.cos(), elev.sin(), elev.cos() * azim.sin()).normalize();
        Scene {
            objects,
            light_direction: [light.x, light.y, light.z],
            ambient: rng.random_range(0.15..0.35),
        }
    }
}

fn random_albedo<R: Rng>(rng: &mut R) -> [f32; 3] {
    [
        rng.random_range(0.2..0.95),
        rng.random_range(0.2..0.95),
        rng.random_range(0.2..0.95),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Centered pinhole with the given horizontal focal scale (`fx = scale·W`).
    pub fn centered(height: usize, width: usize, focal_scale: f64) -> Self {
        let f = focal_scale * width as f64;
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!("degenerate focal lengths fx={} fy={}", self.fx, self.fy)));
        }
        if self.cx <= 0.0 || self.cy <= 0.0 {
            return Err(Error::Config("principal point must be positive".into()));
        }
        Ok(())
    }

    /// Camera-space ray through the center of pixel `(x, y)`, scaled so its
    /// `z` component is 1.
    #[inline]
    pub fn ray(&self, x: usize, y: usize) -> Vec3 {
        Vec3::new(
            (x as f64 + 0.5 - self.cx) / self.fx,
            (y as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }

    /// Crops and rescales the intrinsics to match a resized image region.
    pub fn cropped(&self, x0: f64, y0: f64, sx: f64, sy: f64) -> Self {
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx - x0) * sx,
            cy: (self.cy - y0) * sy,
        }
    }
}

/// Camera-to-world rigid transform. Camera axes: `x` right, `y` down, `z`
/// forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn look_at(eye: Vec3, target: Vec3, world_up: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&world_up).normalize();
        let down = forward.cross(&right);
        Self {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation: eye,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraTrajectory {
    pub poses: Vec<Pose>,
    pub intrinsics: Intrinsics,
}

impl CameraTrajectory {
    pub fn validate(&self) -> Result<()> {
        if self.poses.is_empty() {
            return Err(Error::Config("trajectory has no poses".into()));
        }
        self.intrinsics.validate()?;
        for (i, p) in self.poses.iter().enumerate() {
            let r = &p.rotation;
            let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
            if ortho > 1e-5 || (r.determinant() - 1.0).abs() > 1e-5 {
                return Err(Error::Config(format!("pose {i} rotation is not a proper rotation")));
            }
        }
        Ok(())
    }

    /// Slow orbit around a target with gently varying radius and height.
    pub fn orbit<R: Rng>(rng: &mut R, frames: usize, intrinsics: Intrinsics) -> Self {
        let start = rng.random_range(0.0..std::f64::consts::TAU);
        let speed = rng.random_range(0.006..0.025) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let radius = rng.random_range(4.2..5.5);
        let height = rng.random_range(1.2..2.6);
        let bob = rng.random_range(0.0..0.4);
        let target = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(0.3..0.9), rng.random_range(-0.5..0.5));
        let poses = (0..frames)
            .map(|f| {
                let a = start + speed * f as f64;
                let h = height + bob * (0.05 * f as f64).sin();
                let eye = Vec3::new(radius * a.cos(), h, radius * a.sin());
                Pose::look_at(eye, target, Vec3::new(0.0, 1.0, 0.0))
            })
            .collect();
        Self { poses, intrinsics }
    }

    pub fn frames(&self) -> usize {
        self.poses.len()
    }
}
