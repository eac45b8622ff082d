//! Central finite-difference gradient checks.

use crate::{Graph, Result, Tensor, Var};

/// Result of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, flat index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Finite-difference settings. Relative error per entry is
/// `|a − n| / max(|a|, |n|, floor·max(1, |f|))`, where `f` is the checked
/// value. Central differences at `h = 1e-5` carry round-off of
/// order `1e-10·|f|`, so entries below the floor are judged on
/// absolute error instead.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            floor: 1e-5,
        }
    }
}

impl GradCheck {
    /// Checks the gradient of the scalar built by `f` with respect to every
    /// entry of every tensor in `inputs`.
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let eval = |xs: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            Ok(g.value(out).item())
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let grads = g.backward(out)?;
        let floor = self.floor * g.value(out).item().abs().max(1.0);

        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            worst: (0, 0),
            checked: 0,
        };
        let mut probe = inputs.to_vec();
        for (k, &v) in vars.iter().enumerate() {
            let analytic = grads.get_or_zeros(v, &inputs[k]);
            for i in 0..inputs[k].numel() {
                let orig = inputs[k].data()[i];
                probe[k].data_mut()[i] = orig + self.h;
                let plus = eval(&probe)?;
                probe[k].data_mut()[i] = orig - self.h;
                let minus = eval(&probe)?;
                probe[k].data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.h);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                if rel > report.max_rel_err || rel.is_nan() {
                    report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                    report.worst = (k, i);
                }
                report.checked += 1;
            }
        }
        Ok(report)
    }
}
