use super::scene::{Intrinsics, Vec3};
use super::types::{DepthSequence, NormalSequence};

/// Normals from depth by crossing central differences of unprojected points.
///
/// Each valid pixel is lifted to `depth · K⁻¹ [x+½, y+½, 1]`. The normal is the
/// normalized cross product of the horizontal and vertical neighbour
/// differences, flipped to face the camera. Border pixels and pixels with an
/// invalid neighbour come out invalid.
pub fn depth_to_normal(depth: &DepthSequence, intrinsics: &Intrinsics) -> NormalSequence {
    let dims = depth.dims;
    let mut out = NormalSequence::invalid(dims);
    let (h, w) = (dims.height, dims.width);
    if h < 3 || w < 3 {
        return out;
    }
    let point = |f: usize, y: usize, x: usize| -> Option<Vec3> {
        let i = dims.index(f, y, x);
        let d = depth.depth[i] as f64;
        (depth.mask[i] && d > 0.0 && d.is_finite()).then(|| intrinsics.ray(x, y) * d)
    };
    for f in 0..dims.frames {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let Some(center) = point(f, y, x) else { continue };
                let (Some(l), Some(r), Some(u), Some(d)) =
                    (point(f, y, x - 1), point(f, y, x + 1), point(f, y - 1, x), point(f, y + 1, x))
                else {
                    continue;
                };
                let mut n = (r - l).cross(&(d - u));
                let len = n.norm();
                if len < 1e-12 {
                    continue;
                }
                n /= len;
                if n.dot(&center) > 0.0 {
                    n = -n;
                }
                let i = dims.index(f, y, x);
                out.normals[i * 3] = n.x as f32;
                out.normals[i * 3 + 1] = n.y as f32;
                out.normals[i * 3 + 2] = n.z as f32;
                out.mask[i] = true;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::render::render_clip;
    use crate::synthdata::scene::{CameraTrajectory, Pose, Primitive, Scene, SceneObject};
    use crate::synthdata::types::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn angle_deg(a: [f32; 3], b: Vec3) -> f64 {
        let a = Vec3::new(a[0] as f64, a[1] as f64, a[2] as f64);
        (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos().to_degrees()
    }

    #[test]
    fn constant_depth_gives_toward_camera_axis() {
        let dims = Dims::new(1, 24, 24);
        let depth = DepthSequence::new(dims, vec![3.0; dims.pixels()], vec![true; dims.pixels()]).unwrap();
        let k = Intrinsics::centered(24, 24, 1.0);
        let normals = depth_to_normal(&depth, &k);
        for y in 1..23 {
            for x in 1..23 {
                assert!(angle_deg(normals.normal(0, y, x), Vec3::new(0.0, 0.0, -1.0)) < 0.5);
            }
        }
        // Borders are invalid.
        assert!(!normals.mask[dims.index(0, 0, 5)]);
        assert_eq!(normals.normal(0, 0, 5), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn slanted_plane_matches_closed_form_normal() {
        // Plane z = a·X + b in camera space. Along the ray z·r, the depth is
        // z = b / (1 - a·r_x); the closed-form normal is (a, 0, -1) normalized.
        let (a, b) = (0.4, 5.0);
        let k = Intrinsics::centered(40, 40, 1.0);
        let dims = Dims::new(1, 40, 40);
        let mut depth = vec![0f32; dims.pixels()];
        for y in 0..40 {
            for x in 0..40 {
                let r = k.ray(x, y);
                depth[dims.index(0, y, x)] = (b / (1.0 - a * r.x)) as f32;
            }
        }
        let depth = DepthSequence::new(dims, depth, vec![true; dims.pixels()]).unwrap();
        let normals = depth_to_normal(&depth, &k);
        let expected = Vec3::new(a, 0.0, -1.0).normalize();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (x, y) = (rng.random_range(1..39), rng.random_range(1..39));
            // Brute-force oracle: unproject the pixel and its neighbours directly.
            let p = |xx: usize, yy: usize| k.ray(xx, yy) * (b / (1.0 - a * k.ray(xx, yy).x));
            let brute = (p(x + 1, y) - p(x - 1, y)).cross(&(p(x, y + 1) - p(x, y - 1))).normalize();
            assert!(brute.dot(&expected).abs() > 0.9999);
            assert!(angle_deg(normals.normal(0, y, x), expected) < 1.0);
        }
    }

    #[test]
    fn invalid_depth_frame_yields_invalid_normals() {
        let dims = Dims::new(2, 16, 16);
        let depth = DepthSequence::new(dims, vec![0.0; dims.pixels()], vec![false; dims.pixels()]).unwrap();
        let normals = depth_to_normal(&depth, &Intrinsics::centered(16, 16, 1.0));
        assert!(normals.mask.iter().all(|&m| !m));
    }

    #[test]
    fn agrees_with_rendered_sphere() {
        let scene = Scene {
            objects: vec![SceneObject {
                shape: Primitive::Sphere {
                    center: [0.0, 0.0, 3.0],
                    radius: 1.0,
                },
                albedo: [0.5; 3],
            }],
            light_direction: [0.0, 1.0, 0.0],
            ambient: 0.3,
        };
        let traj = CameraTrajectory {
            poses: vec![Pose::identity()],
            intrinsics: Intrinsics::centered(64, 64, 1.0),
        };
        let (_, analytic, depth) = render_clip(&scene, &traj, 64, 64).unwrap();
        let derived = depth_to_normal(&depth, &traj.intrinsics);
        let mut errs: Vec<f64> = (0..depth.dims.pixels())
            .filter(|&i| derived.mask[i] && analytic.mask[i])
            .map(|i| {
                let a = &analytic.normals[i * 3..i * 3 + 3];
                angle_deg(
                    [derived.normals[i * 3], derived.normals[i * 3 + 1], derived.normals[i * 3 + 2]],
                    Vec3::new(a[0] as f64, a[1] as f64, a[2] as f64),
                )
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        assert!(errs.len() > 300);
        let median = errs[errs.len() / 2];
        assert!(median < 2.0, "median {median}");
    }
}
