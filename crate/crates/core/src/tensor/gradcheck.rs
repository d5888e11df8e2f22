use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference gradient check settings.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Perturbation size.
    pub step: f32,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-3 }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements skipped because a perturbation crossed a ReLU or max-pool kink.
    pub skipped: usize,
}

impl GradCheck {
    /// Compare the analytic gradient of scalar `f(x)` against central differences
    /// for every element of `x`.
    pub fn run<F>(&self, f: F, x: &Tensor) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, Var) -> Result<Var>,
    {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let out = f(&mut g, xv)?;
        let base_sig = g.kink_signature();
        let grads = g.backward(out)?;
        let analytic = grads
            .get(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));

        let eval = |t: Tensor| -> Result<(f64, u64)> {
            let mut g = Graph::new();
            let v = g.constant(t);
            let out = f(&mut g, v)?;
            if g.value(out).numel() != 1 {
                return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
            }
            Ok((g.scalar(out), g.kink_signature()))
        };

        let mut report = GradCheckReport::default();
        let mut pairs = Vec::with_capacity(x.numel());
        for i in 0..x.numel() {
            let mut plus = x.clone();
            plus.data_mut()[i] += self.step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= self.step;
            // the perturbation actually applied after f32 rounding
            let width = plus.data()[i] as f64 - minus.data()[i] as f64;
            let (fp, sp) = eval(plus)?;
            let (fm, sm) = eval(minus)?;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / width;
            pairs.push((analytic.data()[i] as f64, numeric));
        }
        report.checked = pairs.len();
        report.max_rel_error = norm_rel_error(&pairs);
        Ok(report)
    }
}

/// Max relative error of the analytic gradient of `f` at `x` against central
/// differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f32) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    GradCheck { step: h }.run(f, x).map(|r| r.max_rel_error)
}

/// Norm-wise relative error between paired (analytic, numeric) derivatives.
/// Zero when both sides are identically zero.
pub fn norm_rel_error(pairs: &[(f64, f64)]) -> f64 {
    let scale = pairs
        .iter()
        .map(|&(a, n)| a.abs().max(n.abs()))
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return 0.0;
    }
    pairs
        .iter()
        .map(|&(a, n)| (a - n).abs() / scale)
        .fold(0.0, f64::max)
}
