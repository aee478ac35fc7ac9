use crate::error::{Error, Result};

/// Frame count and spatial size shared by every per-pixel sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width }
    }

    pub fn pixels(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn frame_pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, f: usize, y: usize, x: usize) -> usize {
        (f * self.height + y) * self.width + x
    }
}

/// RGB video, `F×H×W×3` row-major with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub dims: Dims,
    pub rgb: Vec<f32>,
    pub frame_rate: f32,
}

impl VideoClip {
    pub fn new(dims: Dims, rgb: Vec<f32>, frame_rate: f32) -> Result<Self> {
        if rgb.len() != dims.pixels() * 3 {
            return Err(Error::Shape(format!(
                "rgb buffer has {} values, expected {}",
                rgb.len(),
                dims.pixels() * 3
            )));
        }
        if dims.frames == 0 {
            return Err(Error::Domain("video clip needs at least one frame".into()));
        }
        Ok(Self { dims, rgb, frame_rate })
    }

    #[inline]
    pub fn pixel(&self, f: usize, y: usize, x: usize) -> [f32; 3] {
        let i = self.dims.index(f, y, x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Frames `start..end` as a new clip.
    pub fn slice_frames(&self, start: usize, end: usize) -> VideoClip {
        let fp = self.dims.frame_pixels() * 3;
        VideoClip {
            dims: Dims::new(end - start, self.dims.height, self.dims.width),
            rgb: self.rgb[start * fp..end * fp].to_vec(),
            frame_rate: self.frame_rate,
        }
    }
}

/// Per-pixel unit normals with a validity mask; invalid pixels hold `(0,0,0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalSequence {
    pub dims: Dims,
    pub normals: Vec<f32>,
    pub mask: Vec<bool>,
}

impl NormalSequence {
    pub fn new(dims: Dims, normals: Vec<f32>, mask: Vec<bool>) -> Result<Self> {
        if normals.len() != dims.pixels() * 3 || mask.len() != dims.pixels() {
            return Err(Error::Shape(format!(
                "normal buffers ({}, {}) do not match {:?}",
                normals.len(),
                mask.len(),
                dims
            )));
        }
        Ok(Self { dims, normals, mask })
    }

    /// All pixels valid.
    pub fn dense(dims: Dims, normals: Vec<f32>) -> Result<Self> {
        let n = dims.pixels();
        Self::new(dims, normals, vec![true; n])
    }

    pub fn invalid(dims: Dims) -> Self {
        Self {
            dims,
            normals: vec![0.0; dims.pixels() * 3],
            mask: vec![false; dims.pixels()],
        }
    }

    #[inline]
    pub fn normal(&self, f: usize, y: usize, x: usize) -> [f32; 3] {
        let i = self.dims.index(f, y, x) * 3;
        [self.normals[i], self.normals[i + 1], self.normals[i + 2]]
    }

    pub fn slice_frames(&self, start: usize, end: usize) -> NormalSequence {
        let fp = self.dims.frame_pixels();
        NormalSequence {
            dims: Dims::new(end - start, self.dims.height, self.dims.width),
            normals: self.normals[start * fp * 3..end * fp * 3].to_vec(),
            mask: self.mask[start * fp..end * fp].to_vec(),
        }
    }

    /// Largest deviation from unit length over valid pixels.
    pub fn max_norm_deviation(&self) -> f32 {
        self.normals
            .chunks_exact(3)
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(n, _)| ((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs())
            .fold(0.0, f32::max)
    }
}

/// Per-pixel camera-space depth (`z` of the hit point) with validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSequence {
    pub dims: Dims,
    pub depth: Vec<f32>,
    pub mask: Vec<bool>,
}

impl DepthSequence {
    pub fn new(dims: Dims, depth: Vec<f32>, mask: Vec<bool>) -> Result<Self> {
        if depth.len() != dims.pixels() || mask.len() != dims.pixels() {
            return Err(Error::Shape(format!("depth buffers do not match {dims:?}")));
        }
        Ok(Self { dims, depth, mask })
    }
}
