//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes. A non-scalar output
//! `y` is reduced to `sum(r * y)` with a fixed random projection `r`; on the
//! numeric side that projection is accumulated in `f64` so rounding of
//! outputs that a perturbation does not touch cancels exactly.

use crate::error::Result;
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradient norms below this are indistinguishable from finite-difference
/// rounding noise; such inputs report the absolute difference instead.
pub const ZERO_GRADIENT: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport<T: Real = f32> {
    /// Norm-wise relative error `|a - n| / max(|a|, |n|)` per input.
    pub relative_errors: Vec<f64>,
    pub analytic: Vec<Tensor<T>>,
    pub numeric: Vec<Tensor<T>>,
}

impl<T: Real> GradCheckReport<T> {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn projected<T: Real>(tape: &Tape<T>, y: Var, proj: Option<&Tensor<T>>) -> f64 {
    let out = tape.value(y);
    match proj {
        None => out.data()[0].to64(),
        Some(r) => out
            .data()
            .iter()
            .zip(r.data())
            .map(|(&a, &b)| a.to64() * b.to64())
            .sum(),
    }
}

/// Compare tape gradients of `f` against central differences with step `h`.
///
/// `f` builds the computation from the input vars; it is called once on a
/// tape with trainable leaves and twice per input element for the numeric
/// estimate.
pub fn check<T, F>(inputs: &[Tensor<T>], h: f64, rng: &mut Rng, f: F) -> Result<GradCheckReport<T>>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let out_shape = tape.value(y).shape().to_vec();
    let proj = (tape.value(y).len() != 1).then(|| Tensor::uniform(&out_shape, -1.0, 1.0, rng));
    let loss = match &proj {
        None => y,
        Some(r) => {
            let rv = tape.constant(r.clone());
            let weighted = tape.mul(y, rv)?;
            tape.sum(weighted)
        }
    };
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();

    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let y = f(&mut t, &vs)?;
        Ok(projected(&t, y, proj.as_ref()))
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut g = vec![T::zero(); inputs[k].len()];
        for (e, ge) in g.iter_mut().enumerate() {
            let orig = inputs[k].data()[e];
            let (up, down) = (orig + T::of(h), orig - T::of(h));
            work[k].data_mut()[e] = up;
            let plus = eval(&work)?;
            work[k].data_mut()[e] = down;
            let minus = eval(&work)?;
            work[k].data_mut()[e] = orig;
            // divide by the step actually representable in T
            let step = up.to64() - down.to64();
            *ge = T::of((plus - minus) / step);
        }
        numeric.push(Tensor::new(inputs[k].shape(), g)?);
    }

    let relative_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let diff = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(&x, &y)| (x.to64() - y.to64()).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = a.norm().max(n.norm());
            if scale < ZERO_GRADIENT {
                diff
            } else {
                diff / scale
            }
        })
        .collect();
    Ok(GradCheckReport {
        relative_errors,
        analytic,
        numeric,
    })
}
