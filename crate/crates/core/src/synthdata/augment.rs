use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::types::{Dims, NormalSequence, VideoClip};
use crate::error::{Error, Result};

/// Per-augmentation probabilities. Crop, color and grayscale are mutually
/// exclusive, so their probabilities must sum to at most one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub hflip: f64,
    pub crop: f64,
    pub color: f64,
    pub grayscale: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            hflip: 0.5,
            crop: 0.3,
            color: 0.1,
            grayscale: 0.2,
        }
    }
}

impl AugmentationConfig {
    pub fn none() -> Self {
        Self {
            hflip: 0.0,
            crop: 0.0,
            color: 0.0,
            grayscale: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("hflip", self.hflip),
            ("crop", self.crop),
            ("color", self.color),
            ("grayscale", self.grayscale),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augmentation probability {name}={p} outside [0,1]")));
            }
        }
        if self.crop + self.color + self.grayscale > 1.0 + 1e-12 {
            return Err(Error::Config(
                "crop, color and grayscale are exclusive; their probabilities must sum to <= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Which augmentations a draw applied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AugmentRecord {
    pub hflip: bool,
    pub crop: bool,
    pub color: bool,
    pub grayscale: bool,
}

pub fn augment(
    clip: &VideoClip,
    normals: &NormalSequence,
    seed: u64,
    cfg: &AugmentationConfig,
) -> Result<(VideoClip, NormalSequence)> {
    augment_with_record(clip, normals, seed, cfg).map(|(c, n, _)| (c, n))
}

/// Applies one seeded augmentation draw jointly to every frame of the clip.
pub fn augment_with_record(
    clip: &VideoClip,
    normals: &NormalSequence,
    seed: u64,
    cfg: &AugmentationConfig,
) -> Result<(VideoClip, NormalSequence, AugmentRecord)> {
    cfg.validate()?;
    if clip.dims != normals.dims {
        return Err(Error::Shape(format!("clip {:?} vs normals {:?}", clip.dims, normals.dims)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut record = AugmentRecord {
        hflip: rng.random::<f64>() < cfg.hflip,
        ..Default::default()
    };
    let u: f64 = rng.random();
    if u < cfg.crop {
        record.crop = true;
    } else if u < cfg.crop + cfg.color {
        record.color = true;
    } else if u < cfg.crop + cfg.color + cfg.grayscale {
        record.grayscale = true;
    }

    let mut clip = clip.clone();
    let mut normals = normals.clone();
    if record.hflip {
        hflip(&mut clip, &mut normals);
    }
    if record.crop {
        random_crop(&mut clip, &mut normals, &mut rng);
    } else if record.color {
        color_jitter(&mut clip, &mut rng);
    } else if record.grayscale {
        grayscale(&mut clip);
    }
    Ok((clip, normals, record))
}

/// Mirrors columns; the camera-space x component of every normal flips sign.
pub fn hflip(clip: &mut VideoClip, normals: &mut NormalSequence) {
    let d = clip.dims;
    for f in 0..d.frames {
        for y in 0..d.height {
            for x in 0..d.width / 2 {
                let (a, b) = (d.index(f, y, x), d.index(f, y, d.width - 1 - x));
                for c in 0..3 {
                    clip.rgb.swap(a * 3 + c, b * 3 + c);
                    normals.normals.swap(a * 3 + c, b * 3 + c);
                }
                normals.mask.swap(a, b);
            }
        }
    }
    for (n, &m) in normals.normals.chunks_exact_mut(3).zip(&normals.mask) {
        if m {
            n[0] = -n[0];
        }
    }
}

fn random_crop<R: Rng>(clip: &mut VideoClip, normals: &mut NormalSequence, rng: &mut R) {
    let d = clip.dims;
    let area = rng.random_range(0.4..1.0f64);
    let log_ratio = rng.random_range((3.0f64 / 4.0).ln()..(4.0f64 / 3.0).ln());
    let ratio = log_ratio.exp();
    let cw = ((area * ratio).sqrt() * d.width as f64).round().clamp(8.0, d.width as f64) as usize;
    let ch = ((area / ratio).sqrt() * d.height as f64).round().clamp(8.0, d.height as f64) as usize;
    let x0 = rng.random_range(0..=d.width - cw);
    let y0 = rng.random_range(0..=d.height - ch);
    *clip = resize_rgb_region(clip, (y0, x0, ch, cw), d.height, d.width);
    *normals = resize_normals_region(normals, (y0, x0, ch, cw), d.height, d.width);
}

/// Bilinear resample of the region `(y0, x0, h, w)` of every frame to
/// `out_h × out_w`.
pub fn resize_rgb_region(clip: &VideoClip, region: (usize, usize, usize, usize), out_h: usize, out_w: usize) -> VideoClip {
    let (y0, x0, rh, rw) = region;
    let d = clip.dims;
    let od = Dims::new(d.frames, out_h, out_w);
    let mut rgb = vec![0f32; od.pixels() * 3];
    let sy = rh as f64 / out_h as f64;
    let sx = rw as f64 / out_w as f64;
    for f in 0..d.frames {
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (rh - 1) as f64);
            let (iy, ty) = (fy.floor() as usize, fy - fy.floor());
            let iy1 = (iy + 1).min(rh - 1);
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (rw - 1) as f64);
                let (ix, tx) = (fx.floor() as usize, fx - fx.floor());
                let ix1 = (ix + 1).min(rw - 1);
                let p00 = clip.pixel(f, y0 + iy, x0 + ix);
                let p01 = clip.pixel(f, y0 + iy, x0 + ix1);
                let p10 = clip.pixel(f, y0 + iy1, x0 + ix);
                let p11 = clip.pixel(f, y0 + iy1, x0 + ix1);
                let o = od.index(f, oy, ox) * 3;
                for c in 0..3 {
                    let top = p00[c] as f64 * (1.0 - tx) + p01[c] as f64 * tx;
                    let bot = p10[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
                    rgb[o + c] = (top * (1.0 - ty) + bot * ty) as f32;
                }
            }
        }
    }
    VideoClip {
        dims: od,
        rgb,
        frame_rate: clip.frame_rate,
    }
}

/// Nearest-neighbour resample of a normal region followed by renormalization
/// of valid pixels.
pub fn resize_normals_region(
    normals: &NormalSequence,
    region: (usize, usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> NormalSequence {
    let (y0, x0, rh, rw) = region;
    let d = normals.dims;
    let od = Dims::new(d.frames, out_h, out_w);
    let mut out = NormalSequence::invalid(od);
    for f in 0..d.frames {
        for oy in 0..out_h {
            let iy = (((oy as f64 + 0.5) * rh as f64 / out_h as f64) as usize).min(rh - 1);
            for ox in 0..out_w {
                let ix = (((ox as f64 + 0.5) * rw as f64 / out_w as f64) as usize).min(rw - 1);
                let src = d.index(f, y0 + iy, x0 + ix);
                if !normals.mask[src] {
                    continue;
                }
                let n = normals.normal(f, y0 + iy, x0 + ix);
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if len < 1e-12 {
                    continue;
                }
                let o = od.index(f, oy, ox);
                for c in 0..3 {
                    out.normals[o * 3 + c] = n[c] / len;
                }
                out.mask[o] = true;
            }
        }
    }
    out
}

/// Resizes so the shorter edge equals `short_edge`, keeping the aspect ratio.
pub fn resize_short_edge(clip: &VideoClip, normals: &NormalSequence, short_edge: usize) -> (VideoClip, NormalSequence) {
    let d = clip.dims;
    let short = d.height.min(d.width);
    if short == short_edge {
        return (clip.clone(), normals.clone());
    }
    let scale = short_edge as f64 / short as f64;
    let oh = ((d.height as f64 * scale).round() as usize).max(1);
    let ow = ((d.width as f64 * scale).round() as usize).max(1);
    let region = (0, 0, d.height, d.width);
    (
        resize_rgb_region(clip, region, oh, ow),
        resize_normals_region(normals, region, oh, ow),
    )
}

fn color_jitter<R: Rng>(clip: &mut VideoClip, rng: &mut R) {
    let brightness = rng.random_range(0.8..1.2f32);
    let contrast = rng.random_range(0.8..1.2f32);
    let saturation = rng.random_range(0.8..1.2f32);
    let hue = rng.random_range(-0.05..0.05f32) * std::f32::consts::TAU;
    let mean_luma = clip
        .rgb
        .chunks_exact(3)
        .map(|p| luma(p) as f64)
        .sum::<f64>() as f32
        / clip.dims.pixels() as f32;
    let (cos_h, sin_h) = (hue.cos(), hue.sin());
    for p in clip.rgb.chunks_exact_mut(3) {
        let mut c = [p[0] * brightness, p[1] * brightness, p[2] * brightness];
        for v in &mut c {
            *v = (*v - mean_luma * brightness) * contrast + mean_luma * brightness;
        }
        let l = luma(&c);
        for v in &mut c {
            *v = l + (*v - l) * saturation;
        }
        // Hue rotation in YIQ space.
        let y = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        let i = 0.596 * c[0] - 0.274 * c[1] - 0.322 * c[2];
        let q = 0.211 * c[0] - 0.523 * c[1] + 0.312 * c[2];
        let (i, q) = (i * cos_h - q * sin_h, i * sin_h + q * cos_h);
        let out = [
            y + 0.956 * i + 0.621 * q,
            y - 0.272 * i - 0.647 * q,
            y - 1.106 * i + 1.703 * q,
        ];
        for (dst, v) in p.iter_mut().zip(out) {
            *dst = v.clamp(0.0, 1.0);
        }
    }
}

fn grayscale(clip: &mut VideoClip) {
    for p in clip.rgb.chunks_exact_mut(3) {
        let l = luma(p).clamp(0.0, 1.0);
        p.fill(l);
    }
}

#[inline]
fn luma(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::render::render_clip;
    use crate::synthdata::scene::{CameraTrajectory, Intrinsics, Scene};

    fn sample() -> (VideoClip, NormalSequence) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scene = Scene::random(&mut rng);
        let traj = CameraTrajectory::orbit(&mut rng, 3, Intrinsics::centered(32, 32, 0.9));
        let (clip, normals, _) = render_clip(&scene, &traj, 32, 32).unwrap();
        (clip, normals)
    }

    #[test]
    fn flip_negates_x_component() {
        let dims = Dims::new(1, 1, 2);
        let mut clip = VideoClip::new(dims, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 30.0).unwrap();
        let mut normals = NormalSequence::dense(dims, vec![0.6, 0.0, 0.8, 0.0, 0.0, -1.0]).unwrap();
        hflip(&mut clip, &mut normals);
        assert_eq!(normals.normal(0, 0, 1), [-0.6, 0.0, 0.8]);
        assert_eq!(clip.pixel(0, 0, 0), [0.4, 0.5, 0.6]);

        let (clip, normals) = sample();
        let forced = AugmentationConfig {
            hflip: 1.0,
            ..AugmentationConfig::none()
        };
        let (c2, n2) = augment(&clip, &normals, 3, &forced).unwrap();
        let d = clip.dims;
        for y in 0..d.height {
            for x in 0..d.width {
                let a = normals.normal(1, y, x);
                let b = n2.normal(1, y, d.width - 1 - x);
                assert_eq!([-a[0], a[1], a[2]].map(|v| v + 0.0), b.map(|v| v + 0.0));
                assert_eq!(clip.pixel(1, y, x), c2.pixel(1, y, d.width - 1 - x));
            }
        }
        assert_eq!(
            normals.mask.iter().filter(|&&m| m).count(),
            n2.mask.iter().filter(|&&m| m).count()
        );
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let (clip, normals) = sample();
        let (c2, n2) = augment(&clip, &normals, 77, &AugmentationConfig::none()).unwrap();
        assert_eq!(c2, clip);
        assert_eq!(n2, normals);
    }

    #[test]
    fn draw_statistics_and_exclusivity() {
        let dims = Dims::new(1, 8, 8);
        let clip = VideoClip::new(dims, vec![0.5; dims.pixels() * 3], 30.0).unwrap();
        let normals = NormalSequence::dense(dims, [0.0, 0.0, -1.0].repeat(dims.pixels())).unwrap();
        let cfg = AugmentationConfig::default();
        let mut flips = 0;
        let (mut crops, mut colors, mut grays) = (0, 0, 0);
        let n = 10_000;
        for seed in 0..n {
            let (_, _, r) = augment_with_record(&clip, &normals, seed, &cfg).unwrap();
            flips += r.hflip as usize;
            let exclusive = r.crop as usize + r.color as usize + r.grayscale as usize;
            assert!(exclusive <= 1);
            crops += r.crop as usize;
            colors += r.color as usize;
            grays += r.grayscale as usize;
        }
        let rate = flips as f64 / n as f64;
        assert!((rate - 0.5).abs() < 0.02, "{rate}");
        assert!((crops as f64 / n as f64 - 0.3).abs() < 0.02);
        assert!((colors as f64 / n as f64 - 0.1).abs() < 0.02);
        assert!((grays as f64 / n as f64 - 0.2).abs() < 0.02);
    }

    #[test]
    fn photometric_augmentations_leave_normals_untouched() {
        let (clip, normals) = sample();
        for cfg in [
            AugmentationConfig {
                color: 1.0,
                ..AugmentationConfig::none()
            },
            AugmentationConfig {
                grayscale: 1.0,
                ..AugmentationConfig::none()
            },
        ] {
            let (c2, n2) = augment(&clip, &normals, 4, &cfg).unwrap();
            assert_eq!(n2, normals);
            assert_ne!(c2, clip);
            assert!(c2.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn crop_keeps_unit_normals_and_shape() {
        let (clip, normals) = sample();
        let cfg = AugmentationConfig {
            crop: 1.0,
            ..AugmentationConfig::none()
        };
        for seed in 0..5 {
            let (c2, n2) = augment(&clip, &normals, seed, &cfg).unwrap();
            assert_eq!(c2.dims, clip.dims);
            assert!(n2.max_norm_deviation() < 1e-4);
            for (n, &m) in n2.normals.chunks_exact(3).zip(&n2.mask) {
                if !m {
                    assert_eq!(n, [0.0, 0.0, 0.0]);
                }
            }
        }
    }

    #[test]
    fn determinism_and_validation() {
        let (clip, normals) = sample();
        let cfg = AugmentationConfig::default();
        let a = augment(&clip, &normals, 42, &cfg).unwrap();
        let b = augment(&clip, &normals, 42, &cfg).unwrap();
        assert_eq!(a, b);
        let bad = AugmentationConfig {
            hflip: 1.5,
            ..cfg
        };
        assert!(matches!(augment(&clip, &normals, 0, &bad), Err(Error::Config(_))));
        let overlapping = AugmentationConfig {
            crop: 0.6,
            color: 0.3,
            grayscale: 0.3,
            hflip: 0.5,
        };
        assert!(overlapping.validate().is_err());
    }
}
