use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::acos;
use crate::synthdata::NormalSequence;
use crate::tensors::{mask_tensor, normal_tensor};

const CLAMP: f64 = 1.0 - 1e-7;

fn unit_channels(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + 1e-20)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Mean per-pixel angle in radians between `(N, 3, H, W)` fields over a
/// `(N, 1, H, W)` 0/1 mask.
///
/// The value is the exact arccosine of the renormalised dot product; the
/// gradient is taken through the dot clamped to `±(1 − 1e-7)`, where arccos
/// has a finite slope. Computed in f64 and returned in the input dtype.
pub fn angular_loss_tensor(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let dtype = pred.dtype();
    let (pred, gt, mask) = (pred.to_dtype(DType::F64)?, gt.to_dtype(DType::F64)?, mask.to_dtype(DType::F64)?);
    let count = mask.sum_all()?.to_scalar::<f64>()?;
    if count <= 0.0 {
        return Err(Error::UndefinedMetric("angular loss over an empty mask".into()));
    }
    let dot = (unit_channels(&pred)? * unit_channels(&gt)?)?.sum_keepdim(1)?;
    let safe = acos(&dot.clamp(-CLAMP, CLAMP)?)?;
    let exact = acos(&dot.detach().clamp(-1.0, 1.0)?)?;
    let angle = (&safe + (exact - safe.detach())?)?;
    Ok(((angle * mask)?.sum_all()? / count)?.to_dtype(dtype)?)
}

/// Mean angular error in degrees over pixels valid in both sequences.
pub fn angular_loss(pred: &NormalSequence, gt: &NormalSequence) -> Result<f64> {
    if pred.dims != gt.dims {
        return Err(Error::Shape(format!("{:?} vs {:?}", pred.dims, gt.dims)));
    }
    let mask = (mask_tensor(pred)? * mask_tensor(gt)?)?;
    let rad = angular_loss_tensor(&normal_tensor(pred)?, &normal_tensor(gt)?, &mask)?;
    Ok(rad.to_dtype(DType::F64)?.to_scalar::<f64>()?.to_degrees())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::Dims;
    use candle_core::{Device, Var};
    use proptest::prelude::*;

    fn one(n: [f32; 3]) -> NormalSequence {
        NormalSequence::dense(Dims::new(1, 1, 1), n.to_vec()).unwrap()
    }

    #[test]
    fn constructed_cases() {
        let gt = one([0.0, 0.0, 1.0]);
        assert!(angular_loss(&gt, &gt).unwrap().abs() < 1e-4);
        assert!((angular_loss(&one([0.0, 0.0, -1.0]), &gt).unwrap() - 180.0).abs() < 1e-4);
        let r = 10f64.to_radians();
        let p = one([r.sin() as f32, 0.0, r.cos() as f32]);
        assert!((angular_loss(&p, &gt).unwrap() - 10.0).abs() < 1e-4);
        let empty = NormalSequence::invalid(Dims::new(1, 1, 1));
        assert!(matches!(angular_loss(&empty, &gt), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn gradient_is_finite_at_identity() {
        let x = Var::new(&[0.0f32, 0.0, 1.0], &Device::Cpu).unwrap();
        let pred = x.as_tensor().reshape((1, 3, 1, 1)).unwrap();
        let gt = pred.detach();
        let mask = Tensor::ones((1, 1, 1, 1), DType::F32, &Device::Cpu).unwrap();
        let loss = angular_loss_tensor(&pred, &gt, &mask).unwrap();
        let g = loss.backward().unwrap();
        let gx = g.get(x.as_tensor()).unwrap().to_vec1::<f32>().unwrap();
        assert!(gx.iter().all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn symmetric_and_scale_invariant(
            a in proptest::collection::vec(-1.0f32..1.0, 6),
            b in proptest::collection::vec(-1.0f32..1.0, 6),
            s in 0.1f32..10.0,
        ) {
            let fix = |v: &[f32]| -> Vec<f32> {
                v.chunks(3).flat_map(|c| if c.iter().map(|x| x * x).sum::<f32>() < 1e-2 { vec![0.0, 0.0, 1.0] } else { c.to_vec() }).collect()
            };
            let (a, b) = (fix(&a), fix(&b));
            let dims = Dims::new(1, 1, 2);
            let sa = NormalSequence::dense(dims, a.clone()).unwrap();
            let sb = NormalSequence::dense(dims, b).unwrap();
            let scaled = NormalSequence::dense(dims, a.iter().map(|v| v * s).collect()).unwrap();
            let ab = angular_loss(&sa, &sb).unwrap();
            prop_assert!((ab - angular_loss(&sb, &sa).unwrap()).abs() < 1e-6);
            prop_assert!((ab - angular_loss(&scaled, &sb).unwrap()).abs() < 1e-4);
        }
    }
}
