//! Range-constraining activations.
//!
//! Maps an unconstrained head output `x` into a metric's valid range:
//!
//! | bounds            | output                                   |
//! |-------------------|------------------------------------------|
//! | `[lo, hi]`        | `lo + (hi - lo) * sigmoid(x)`            |
//! | `[lo, +inf)`      | `lo + softplus(x - lo)`                  |
//! | `(-inf, hi]`      | `hi - softplus(hi - x)`                  |
//! | `(-inf, +inf)`    | `x`                                      |
//!
//! All four are smooth and strictly increasing, so gradients stay continuous
//! at the range ends instead of vanishing as they would under hard clipping.
//!
//! With two finite bounds the exact output is strictly inside `(lo, hi)`, but
//! a saturated sigmoid can round onto a bound. Outputs are therefore held one
//! ulp inside the interval in the working precision; derivatives are always
//! the analytic ones.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::{Error, Result};
use crate::registry::MetricSpec;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_range(lower: f64, upper: f64) -> Result<()> {
    if lower.is_nan() || upper.is_nan() || lower >= upper || lower == f64::INFINITY || upper == f64::NEG_INFINITY {
        return Err(Error::InvalidRange {
            name: "rc_act".into(),
            lower,
            upper,
        });
    }
    Ok(())
}

/// A validated pair of bounds; infinite values mean "unbounded".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    lower: f64,
    upper: f64,
}

impl Range {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        check_range(lower, upper)?;
        Ok(Range { lower, upper })
    }

    pub fn of(spec: &MetricSpec) -> Self {
        Range {
            lower: spec.lower_value(),
            upper: spec.upper_value(),
        }
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    /// Exact-arithmetic value of the activation, rounded once to `f64`.
    pub fn apply_raw(&self, x: f64) -> f64 {
        match (self.lower.is_finite(), self.upper.is_finite()) {
            (true, true) => self.lower + (self.upper - self.lower) * sigmoid(x),
            (true, false) => self.lower + softplus(x - self.lower),
            (false, true) => self.upper - softplus(self.upper - x),
            (false, false) => x,
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        let y = self.apply_raw(x);
        if self.lower.is_finite() && self.upper.is_finite() {
            y.clamp(self.lower.next_up(), self.upper.next_down())
        } else {
            y
        }
    }

    fn apply_f32(&self, x: f32) -> f32 {
        let y = self.apply_raw(x as f64) as f32;
        if self.lower.is_finite() && self.upper.is_finite() {
            let lo = (self.lower as f32).next_up();
            let hi = (self.upper as f32).next_down();
            y.clamp(lo, hi)
        } else {
            y
        }
    }

    /// `d apply / dx`.
    pub fn derivative(&self, x: f64) -> f64 {
        match (self.lower.is_finite(), self.upper.is_finite()) {
            (true, true) => {
                let s = sigmoid(x);
                (self.upper - self.lower) * s * (1.0 - s)
            }
            (true, false) => sigmoid(x - self.lower),
            (false, true) => sigmoid(self.upper - x),
            (false, false) => 1.0,
        }
    }

    /// Applies the activation to a tensor, with analytic gradients.
    pub fn apply_tensor(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.contiguous()?.apply_op1(RangeConstrain { range: *self, grad: false })?)
    }
}

/// Applies the activation for explicit bounds; infinite bounds mean
/// "unbounded". Errors when `lower >= upper`.
pub fn rc_act(x: f64, lower: f64, upper: f64) -> Result<f64> {
    Ok(Range::new(lower, upper)?.apply(x))
}

/// Derivative of [`rc_act`] with respect to `x`.
pub fn rc_act_derivative(x: f64, lower: f64, upper: f64) -> Result<f64> {
    Ok(Range::new(lower, upper)?.derivative(x))
}

/// Forward (`grad == false`) or derivative (`grad == true`) of the activation
/// as an elementwise candle op.
struct RangeConstrain {
    range: Range,
    grad: bool,
}

impl CustomOp1 for RangeConstrain {
    fn name(&self) -> &'static str {
        if self.grad {
            "range-constrain-grad"
        } else {
            "range-constrain"
        }
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("range-constrain needs contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(
                v[start..end]
                    .iter()
                    .map(|&x| {
                        if self.grad {
                            self.range.derivative(x as f64) as f32
                        } else {
                            self.range.apply_f32(x)
                        }
                    })
                    .collect(),
            ),
            CpuStorage::F64(v) => CpuStorage::F64(
                v[start..end]
                    .iter()
                    .map(|&x| {
                        if self.grad {
                            self.range.derivative(x)
                        } else {
                            self.range.apply(x)
                        }
                    })
                    .collect(),
            ),
            other => candle_core::bail!("range-constrain: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(other)),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        if self.grad {
            candle_core::bail!("second derivative of range-constrain is not implemented");
        }
        let d = arg.contiguous()?.apply_op1(RangeConstrain { range: self.range, grad: true })?;
        Ok(Some(grad_res.mul(&d)?))
    }
}
