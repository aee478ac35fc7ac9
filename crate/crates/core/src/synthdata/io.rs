use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::render_clip;
use super::scene::{CameraTrajectory, Intrinsics, Scene};
use super::types::{DepthSequence, Dims, NormalSequence, VideoClip};
use crate::error::{Error, Result};
use crate::ntf::{self, NtfTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub intrinsics: Intrinsics,
    pub scene_id: String,
    #[serde(default = "default_rate")]
    pub frame_rate: f32,
}

fn default_rate() -> f32 {
    30.0
}

/// A rendered clip with its ground truth, as stored in one clip directory.
#[derive(Debug, Clone)]
pub struct ClipData {
    pub id: String,
    pub rgb: VideoClip,
    pub normals: NormalSequence,
    pub depth: Option<DepthSequence>,
    pub meta: ClipMeta,
}

impl ClipData {
    /// Frames `start..end` as a new clip sharing metadata.
    pub fn slice(&self, start: usize, end: usize, id: String) -> ClipData {
        let mut meta = self.meta.clone();
        meta.frames = end - start;
        ClipData {
            id,
            rgb: self.rgb.slice_frames(start, end),
            normals: self.normals.slice_frames(start, end),
            depth: self.depth.as_ref().map(|d| {
                let fp = d.dims.frame_pixels();
                DepthSequence {
                    dims: Dims::new(end - start, d.dims.height, d.dims.width),
                    depth: d.depth[start * fp..end * fp].to_vec(),
                    mask: d.mask[start * fp..end * fp].to_vec(),
                }
            }),
            meta,
        }
    }
}

/// Corpus generation settings, mirroring the `synth` command's flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub scenes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

/// Renders one continuous clip per procedurally generated scene.
pub fn generate_corpus(spec: &SynthSpec) -> Result<Vec<ClipData>> {
    if spec.scenes == 0 || spec.frames == 0 {
        return Err(Error::Config("synth needs at least one scene and one frame".into()));
    }
    (0..spec.scenes)
        .map(|i| {
            let scene_seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
            let scene = Scene::random(&mut rng);
            let intrinsics = Intrinsics::centered(spec.height, spec.width, 0.9);
            let traj = CameraTrajectory::orbit(&mut rng, spec.frames, intrinsics);
            let (rgb, normals, depth) = render_clip(&scene, &traj, spec.height, spec.width)?;
            let id = format!("scene_{i:04}");
            Ok(ClipData {
                meta: ClipMeta {
                    frames: spec.frames,
                    height: spec.height,
                    width: spec.width,
                    intrinsics,
                    scene_id: id.clone(),
                    frame_rate: rgb.frame_rate,
                },
                id,
                rgb,
                normals,
                depth: Some(depth),
            })
        })
        .collect()
}

fn quantize_rgb(rgb: &[f32]) -> Vec<u8> {
    rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn write_rgb(path: &Path, clip: &VideoClip) -> Result<()> {
    let d = clip.dims;
    ntf::write(path, &NtfTensor::u8(vec![d.frames, d.height, d.width, 3], quantize_rgb(&clip.rgb))?)
}

pub fn read_rgb(path: &Path) -> Result<VideoClip> {
    let t = ntf::read(path)?;
    let dims = dims_from(&t.dims, 4, path)?;
    let values = match t.data {
        ntf::NtfData::U8(v) => v.into_iter().map(|b| b as f32 / 255.0).collect(),
        ntf::NtfData::F32(v) => v,
        ntf::NtfData::Bool(_) => return Err(format_err(path, "rgb stored as bool")),
    };
    VideoClip::new(dims, values, 30.0)
}

pub fn write_normals(path: &Path, seq: &NormalSequence) -> Result<()> {
    let d = seq.dims;
    ntf::write(path, &NtfTensor::f32(vec![d.frames, d.height, d.width, 3], seq.normals.clone())?)
}

pub fn write_mask(path: &Path, dims: Dims, mask: &[bool]) -> Result<()> {
    ntf::write(path, &NtfTensor::bool(vec![dims.frames, dims.height, dims.width], mask.to_vec())?)
}

/// Reads `normal.ntf` and, when present, the sibling `mask.ntf`. Without a
/// mask file a pixel is valid iff its vector is nonzero.
pub fn read_normals(dir: &Path) -> Result<NormalSequence> {
    let path = dir.join("normal.ntf");
    let t = ntf::read(&path)?;
    let dims = dims_from(&t.dims, 4, &path)?;
    let normals = t.into_f32()?;
    let mask_path = dir.join("mask.ntf");
    let mask = if mask_path.exists() {
        let m = ntf::read(&mask_path)?;
        if m.dims != [dims.frames, dims.height, dims.width] {
            return Err(format_err(&mask_path, "mask shape does not match normals"));
        }
        m.into_bool()?
    } else {
        normals
            .chunks_exact(3)
            .map(|n| n.iter().any(|v| *v != 0.0))
            .collect()
    };
    NormalSequence::new(dims, normals, mask)
}

fn dims_from(dims: &[usize], rank: usize, path: &Path) -> Result<Dims> {
    if dims.len() != rank || (rank == 4 && dims[3] != 3) {
        return Err(format_err(path, &format!("unexpected tensor shape {dims:?}")));
    }
    Ok(Dims::new(dims[0], dims[1], dims[2]))
}

fn format_err(path: &Path, reason: &str) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

/// Writes `rgb.ntf`, `normal.ntf`, `depth.ntf`, `mask.ntf` and `meta.json`.
pub fn write_clip_dir(dir: &Path, clip: &ClipData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = clip.rgb.dims;
    write_rgb(&dir.join("rgb.ntf"), &clip.rgb)?;
    write_normals(&dir.join("normal.ntf"), &clip.normals)?;
    write_mask(&dir.join("mask.ntf"), d, &clip.normals.mask)?;
    let depth = match &clip.depth {
        Some(depth) => depth.depth.clone(),
        None => vec![0.0; d.pixels()],
    };
    ntf::write(
        dir.join("depth.ntf"),
        &NtfTensor::f32(vec![d.frames, d.height, d.width], depth)?,
    )?;
    let meta = serde_json::to_vec_pretty(&clip.meta)?;
    ntf::write_atomic(&dir.join("meta.json"), &meta)
}

pub fn read_clip_dir(dir: &Path) -> Result<ClipData> {
    let meta_path = dir.join("meta.json");
    let meta: ClipMeta = serde_json::from_slice(&fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    let mut rgb = read_rgb(&dir.join("rgb.ntf"))?;
    rgb.frame_rate = meta.frame_rate;
    let normals = read_normals(dir)?;
    if rgb.dims != normals.dims {
        return Err(format_err(dir, "rgb and normal tensors disagree in shape"));
    }
    let depth_path = dir.join("depth.ntf");
    let depth = if depth_path.exists() {
        let values = ntf::read(&depth_path)?.into_f32()?;
        let mask: Vec<bool> = values.iter().map(|&d| d > 0.0 && d.is_finite()).collect();
        Some(DepthSequence::new(rgb.dims, values, mask)?)
    } else {
        None
    };
    Ok(ClipData {
        id: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        rgb,
        normals,
        depth,
        meta,
    })
}

/// Every immediate subdirectory of `root` holding a `meta.json`, sorted by name.
pub fn list_clip_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn read_corpus(root: &Path) -> Result<Vec<ClipData>> {
    let dirs = list_clip_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::Config(format!("no clip directories under {}", root.display())));
    }
    dirs.iter().map(|d| read_clip_dir(d)).collect()
}

/// Content hash over clip ids, RGB values and normals.
pub fn dataset_hash(clips: &[ClipData]) -> String {
    let mut h = Sha256::new();
    for c in clips {
        h.update(c.id.as_bytes());
        h.update((c.rgb.dims.frames as u64).to_le_bytes());
        for v in c.rgb.rgb.iter().chain(&c.normals.normals) {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Maps a normal to 8-bit color: `round((n + 1) / 2 · 255)` per channel.
#[inline]
pub fn normal_to_rgb8(n: [f32; 3]) -> [u8; 3] {
    n.map(|v| (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8)
}

pub fn save_normal_png(seq: &NormalSequence, frame: usize, path: &Path) -> Result<()> {
    let d = seq.dims;
    let mut img = image::RgbImage::new(d.width as u32, d.height as u32);
    for y in 0..d.height {
        for x in 0..d.width {
            img.put_pixel(x as u32, y as u32, image::Rgb(normal_to_rgb8(seq.normal(frame, y, x))));
        }
    }
    img.save(path)?;
    Ok(())
}

pub fn save_rgb_png(clip: &VideoClip, frame: usize, path: &Path) -> Result<()> {
    let d = clip.dims;
    let mut img = image::RgbImage::new(d.width as u32, d.height as u32);
    for y in 0..d.height {
        for x in 0..d.width {
            let p = clip.pixel(frame, y, x).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x as u32, y as u32, image::Rgb(p));
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_mapping() {
        assert_eq!(normal_to_rgb8([-1.0, 0.0, 1.0]), [0, 128, 255]);
        assert_eq!(normal_to_rgb8([0.0, 0.0, -1.0]), [128, 128, 0]);
    }

    #[test]
    fn clip_dir_roundtrip() {
        let spec = SynthSpec {
            scenes: 1,
            frames: 3,
            height: 16,
            width: 24,
            seed: 1,
        };
        let clip = generate_corpus(&spec).unwrap().remove(0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(&clip.id);
        write_clip_dir(&path, &clip).unwrap();
        for f in ["rgb.ntf", "normal.ntf", "depth.ntf", "mask.ntf", "meta.json"] {
            assert!(path.join(f).is_file(), "{f}");
        }
        let back = read_clip_dir(&path).unwrap();
        assert_eq!(back.meta, clip.meta);
        assert_eq!(back.normals, clip.normals);
        let max_rgb_err = back
            .rgb
            .rgb
            .iter()
            .zip(&clip.rgb.rgb)
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(max_rgb_err <= 0.5 / 255.0 + 1e-6);
        assert_eq!(list_clip_dirs(dir.path()).unwrap(), vec![path]);
    }

    #[test]
    fn corpus_is_seed_deterministic() {
        let spec = SynthSpec {
            scenes: 2,
            frames: 2,
            height: 16,
            width: 16,
            seed: 7,
        };
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a[1].rgb, b[1].rgb);
        assert_ne!(a[0].rgb, a[1].rgb);
    }
}
