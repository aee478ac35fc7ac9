use super::scene::{CameraTrajectory, Primitive, Scene, Vec3};
use super::types::{DepthSequence, Dims, NormalSequence, VideoClip};
use crate::error::{Error, Result};

const T_MIN: f64 = 1e-6;

/// Nearest intersection along `origin + t·dir` for `t > T_MIN`, returning
/// `(t, outward normal)` in world space.
pub fn intersect(shape: &Primitive, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
    match *shape {
        Primitive::Sphere { center, radius } => {
            let c = Vec3::from(center);
            let oc = origin - c;
            let a = dir.dot(dir);
            let b = 2.0 * dir.dot(&oc);
            let k = oc.dot(&oc) - radius * radius;
            let disc = b * b - 4.0 * a * k;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t0 = (-b - sq) / (2.0 * a);
            let t1 = (-b + sq) / (2.0 * a);
            let t = if t0 > T_MIN {
                t0
            } else if t1 > T_MIN {
                t1
            } else {
                return None;
            };
            let p = origin + dir * t;
            Some((t, (p - c) / radius))
        }
        Primitive::Plane { point, normal } => {
            let n = Vec3::from(normal).normalize();
            let denom = dir.dot(&n);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = (Vec3::from(point) - origin).dot(&n) / denom;
            (t > T_MIN).then_some((t, n))
        }
        Primitive::Box { min, max } => {
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut near_axis = 0;
            let mut near_sign = 0.0;
            for axis in 0..3 {
                let o = origin[axis];
                let d = dir[axis];
                if d.abs() < 1e-15 {
                    if o < min[axis] || o > max[axis] {
                        return None;
                    }
                    continue;
                }
                let (mut t0, mut t1) = ((min[axis] - o) / d, (max[axis] - o) / d);
                // Entering through the min face means the outward normal is -axis.
                let mut sign = -1.0;
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                    sign = 1.0;
                }
                if t0 > t_near {
                    t_near = t0;
                    near_axis = axis;
                    near_sign = sign;
                }
                t_far = t_far.min(t1);
                if t_near > t_far {
                    return None;
                }
            }
            if t_near <= T_MIN {
                // Camera inside the box or box behind the camera.
                return None;
            }
            let mut n = Vec3::zeros();
            n[near_axis] = near_sign;
            Some((t_near, n))
        }
    }
}

/// Ray-casts every frame of a trajectory.
///
/// Returns RGB (`ambient + Lambertian`, clamped), camera-space unit normals
/// oriented toward the camera, and camera-space depth. Pixels that hit nothing
/// are invalid in both masks and take the ambient value in every channel.
pub fn render_clip(
    scene: &Scene,
    trajectory: &CameraTrajectory,
    height: usize,
    width: usize,
) -> Result<(VideoClip, NormalSequence, DepthSequence)> {
    scene.validate()?;
    trajectory.validate()?;
    if height < 16 || width < 16 {
        return Err(Error::Config(format!("render size {height}x{width} below 16x16")));
    }
    let dims = Dims::new(trajectory.frames(), height, width);
    let mut rgb = vec![scene.ambient as f32; dims.pixels() * 3];
    let mut normals = vec![0f32; dims.pixels() * 3];
    let mut depth = vec![0f32; dims.pixels()];
    let mut mask = vec![false; dims.pixels()];
    let light = Vec3::from(scene.light_direction);
    let k = &trajectory.intrinsics;

    for (f, pose) in trajectory.poses.iter().enumerate() {
        let rot = &pose.rotation;
        let origin = pose.translation;
        for y in 0..height {
            for x in 0..width {
                let ray_cam = k.ray(x, y);
                let dir = rot * ray_cam;
                let mut best: Option<(f64, Vec3, usize)> = None;
                for (oi, obj) in scene.objects.iter().enumerate() {
                    if let Some((t, n)) = intersect(&obj.shape, &origin, &dir) {
                        if best.is_none_or(|(bt, _, _)| t < bt) {
                            best = Some((t, n, oi));
                        }
                    }
                }
                let Some((t, mut n_world, oi)) = best else {
                    continue;
                };
                if n_world.dot(&dir) > 0.0 {
                    n_world = -n_world;
                }
                let n_cam = rot.transpose() * n_world;
                let n_cam = n_cam / n_cam.norm();
                let idx = dims.index(f, y, x);
                let shade = scene.ambient + n_world.dot(&light).max(0.0);
                let albedo = scene.objects[oi].albedo;
                for c in 0..3 {
                    rgb[idx * 3 + c] = (albedo[c] as f64 * shade).clamp(0.0, 1.0) as f32;
                    normals[idx * 3 + c] = n_cam[c] as f32;
                }
                // Ray direction has unit camera-space z, so t is the hit depth.
                depth[idx] = t as f32;
                mask[idx] = true;
            }
        }
    }

    Ok((
        VideoClip::new(dims, rgb, 30.0)?,
        NormalSequence::new(dims, normals, mask.clone())?,
        DepthSequence::new(dims, depth, mask)?,
    ))
}
