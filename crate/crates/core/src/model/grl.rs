//! Gradient reversal: identity forward, `-λ · grad` backward.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReversal {
    pub lambda: f64,
}

impl GradientReversal {
    pub fn new(lambda: f64) -> crate::Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(crate::Error::Config(format!("GRL lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    pub fn apply(&self, x: &Tensor) -> crate::Result<Tensor> {
        Ok(x.contiguous()?.apply_op1(*self)?)
    }
}

fn copy_contiguous<T: Clone>(data: &[T], layout: &Layout) -> candle_core::Result<Vec<T>> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(data[a..b].to_vec()),
        None => candle_core::bail!("gradient reversal expects a contiguous input"),
    }
}

impl CustomOp1 for GradientReversal {
    fn name(&self) -> &'static str {
        "gradient-reversal"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(copy_contiguous(v, layout)?),
            CpuStorage::F64(v) => CpuStorage::F64(copy_contiguous(v, layout)?),
            _ => candle_core::bail!("gradient reversal supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.affine(-self.lambda, 0.0)?))
    }
}
