//! Finite-difference check of the training gradient on a tiny stand-in
//! network (3×3 conv 5→3, tanh, 1×1 conv 3→2, masked cross-entropy).
//! It exercises the conv op, the loss and the validity mask without the cost
//! of the full encoder.

use candle_core::{DType, Device, Tensor};
use serde::Serialize;

use super::conv::{conv2d, ConvGeom};
use super::net::masked_cross_entropy;
use super::params::{Init, ParamStore};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub parameters: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub worst_parameter: String,
}

impl GradCheckReport {
    pub fn passes(&self, rtol: f64) -> bool {
        self.max_rel_error <= rtol
    }
}

struct StandIn {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl StandIn {
    fn loss(&self, x: &Tensor, target: &Tensor, valid: &Tensor) -> candle_core::Result<Tensor> {
        let h = conv2d(x, &self.w1, ConvGeom::same(3, 1))?.broadcast_add(&self.b1.reshape((1, (), 1, 1))?)?.tanh()?;
        let logits = conv2d(&h, &self.w2, ConvGeom::same(1, 1))?.broadcast_add(&self.b2.reshape((1, (), 1, 1))?)?;
        masked_cross_entropy(&logits, target, valid)
    }
}

/// Compare backprop gradients to central differences (step `eps`) for every
/// parameter of the stand-in network on random `(2, 5, 8, 8)` inputs with a
/// random target and a validity mask that drops a quarter of the pixels.
pub fn stand_in_gradient_check(seed: u64, eps: f64) -> candle_core::Result<GradCheckReport> {
    let dev = Device::Cpu;
    let mut p = ParamStore::new(seed, DType::F64, dev.clone());
    let net = StandIn {
        w1: p.param("w1", &[3, 5, 3, 3], Init::Normal(0.4))?,
        b1: p.param("b1", &[3], Init::Normal(0.1))?,
        w2: p.param("w2", &[2, 3, 1, 1], Init::Normal(0.6))?,
        b2: p.param("b2", &[2], Init::Normal(0.1))?,
    };
    let mut data = ParamStore::new(seed.wrapping_add(1), DType::F64, dev.clone());
    let x = data.param("x", &[2, 5, 8, 8], Init::Normal(1.0))?;
    let target = data.param("t", &[2, 8, 8], Init::Normal(1.0))?.ge(0.0)?.to_dtype(DType::F64)?;
    let valid = data.param("v", &[2, 8, 8], Init::Normal(1.0))?.ge(-0.67)?.to_dtype(DType::F64)?;

    let grads = net.loss(&x, &target, &valid)?.backward()?;
    let mut report = GradCheckReport { parameters: 0, max_rel_error: 0.0, worst_parameter: String::new() };
    for (name, var) in p.named() {
        let analytic = grads
            .get(var.as_tensor())
            .ok_or_else(|| candle_core::Error::Msg(format!("no gradient for {name}")))?
            .flatten_all()?
            .to_vec1::<f64>()?;
        let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        for (i, &a) in analytic.iter().enumerate() {
            let eval = |delta: f64| -> candle_core::Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, var.shape(), &dev)?)?;
                net.loss(&x, &target, &valid)?.to_scalar::<f64>()
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            var.set(&Tensor::from_vec(base.clone(), var.shape(), &dev)?)?;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.parameters += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_parameter = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stand_in_gradients_match_finite_differences() {
        let r = stand_in_gradient_check(11, 1e-5).unwrap();
        assert_eq!(r.parameters, 3 * 5 * 9 + 3 + 2 * 3 + 2);
        assert!(r.passes(1e-3), "{r:?}");
    }
}
