//! Conversions between the plain-buffer sequence types and `(F, C, H, W)` tensors.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::synthdata::{Dims, NormalSequence, VideoClip};

fn hwc_to_chw(values: &[f32], dims: Dims, channels: usize) -> Vec<f32> {
    let (f, h, w) = (dims.frames, dims.height, dims.width);
    let mut out = vec![0f32; values.len()];
    for fi in 0..f {
        for y in 0..h {
            for x in 0..w {
                let src = ((fi * h + y) * w + x) * channels;
                for c in 0..channels {
                    out[((fi * channels + c) * h + y) * w + x] = values[src + c];
                }
            }
        }
    }
    out
}

fn chw_to_hwc(values: &[f32], dims: Dims, channels: usize) -> Vec<f32> {
    let (f, h, w) = (dims.frames, dims.height, dims.width);
    let mut out = vec![0f32; values.len()];
    for fi in 0..f {
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    out[((fi * h + y) * w + x) * channels + c] = values[((fi * channels + c) * h + y) * w + x];
                }
            }
        }
    }
    out
}

/// RGB mapped to `[-1, 1]` as `(F, 3, H, W)`.
pub fn rgb_tensor(clip: &VideoClip) -> Result<Tensor> {
    let d = clip.dims;
    let scaled: Vec<f32> = clip.rgb.iter().map(|v| 2.0 * v - 1.0).collect();
    Ok(Tensor::from_vec(hwc_to_chw(&scaled, d, 3), (d.frames, 3, d.height, d.width), &Device::Cpu)?)
}

/// Normals as-is (invalid pixels are zero) as `(F, 3, H, W)`.
pub fn normal_tensor(seq: &NormalSequence) -> Result<Tensor> {
    let d = seq.dims;
    Ok(Tensor::from_vec(hwc_to_chw(&seq.normals, d, 3), (d.frames, 3, d.height, d.width), &Device::Cpu)?)
}

/// Validity mask as a `(F, 1, H, W)` tensor of zeros and ones.
pub fn mask_tensor(seq: &NormalSequence) -> Result<Tensor> {
    let d = seq.dims;
    let values: Vec<f32> = seq.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(values, (d.frames, 1, d.height, d.width), &Device::Cpu)?)
}

/// Renormalises a `(F, 3, H, W)` tensor into a dense normal sequence. Vectors
/// too short to normalise become the toward-camera axis `(0, 0, -1)`.
pub fn tensor_to_normals(t: &Tensor) -> Result<NormalSequence> {
    let (f, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let dims = Dims::new(f, h, w);
    let raw = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut hwc = chw_to_hwc(&raw, dims, 3);
    for n in hwc.chunks_exact_mut(3) {
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len > 1e-6 && len.is_finite() {
            n.iter_mut().for_each(|v| *v /= len);
        } else {
            n.copy_from_slice(&[0.0, 0.0, -1.0]);
        }
    }
    NormalSequence::dense(dims, hwc)
}

/// Inverse of [`rgb_tensor`], clamping to `[0, 1]`.
pub fn tensor_to_rgb(t: &Tensor, frame_rate: f32) -> Result<VideoClip> {
    let (f, _, h, w) = t.dims4()?;
    let dims = Dims::new(f, h, w);
    let raw = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let rgb = chw_to_hwc(&raw, dims, 3).into_iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
    VideoClip::new(dims, rgb, frame_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_roundtrip() {
        let dims = Dims::new(2, 3, 4);
        let n: Vec<f32> = (0..dims.pixels() * 3).map(|i| i as f32).collect();
        let seq = NormalSequence::dense(dims, n.clone()).unwrap();
        let t = normal_tensor(&seq).unwrap();
        // Channel 1 of pixel (f=1, y=2, x=3).
        let v = t.get(1).unwrap().get(1).unwrap().get(2).unwrap().get(3).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(v, n[dims.index(1, 2, 3) * 3 + 1]);
        let raw = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(chw_to_hwc(&raw, dims, 3), n);

        let clip = VideoClip::new(dims, vec![0.25; dims.pixels() * 3], 30.0).unwrap();
        let back = tensor_to_rgb(&rgb_tensor(&clip).unwrap(), 30.0).unwrap();
        assert_eq!(back, clip);
    }

    #[test]
    fn renormalises_and_fills_zero_vectors() {
        let t = Tensor::from_vec(vec![3.0f32, 0.0, 4.0, 0.0, 0.0, 0.0], (1, 3, 1, 2), &Device::Cpu).unwrap();
        let seq = tensor_to_normals(&t).unwrap();
        assert_eq!(seq.normal(0, 0, 0), [0.6, 0.8, 0.0]);
        assert_eq!(seq.normal(0, 0, 1), [0.0, 0.0, -1.0]);
        assert!(seq.mask.iter().all(|&m| m));
    }
}
