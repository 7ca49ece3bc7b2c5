//! Central finite-difference verification of tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Base finite-difference step.
    pub step: f64,
    /// Scale the step by `max(1, |θ|)` per entry.
    pub relative_step: bool,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so entries whose
    /// true gradient is zero are judged on absolute error.
    pub floor: f64,
    /// Check at most this many entries per parameter (seeded choice).
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
    /// Build the analytic tape with this backward rule negated.
    pub sign_flip: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            relative_step: false,
            tolerance: 1e-6,
            floor: 1e-6,
            max_entries_per_param: None,
            seed: 0,
            sign_flip: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EntryCheck {
    pub param: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub param: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub worst: Option<EntryCheck>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, params: &[Tensor], tape: &mut Tape) -> Result<(Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::InvalidTensor("grad_check needs a scalar function".into()));
    }
    Ok((vars, loss))
}

fn scalar_value<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("loss during finite differencing".into()));
    }
    Ok(value)
}

/// Compares tape gradients of the scalar function `f` against central
/// differences `(f(θ + h) − f(θ − h)) / 2h`, entry by entry.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(Error::Config(format!("step must be positive, got {}", opts.step)));
    }
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("parameter {i}")));
    }

    let mut tape = match opts.sign_flip {
        Some(kind) => Tape::with_sign_flip(kind),
        None => Tape::new(),
    };
    let (vars, loss) = evaluate(&f, params, &mut tape)?;
    if !tape.value(loss).is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = tape.backward(loss)?;

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut worst: Option<EntryCheck> = None;
    let mut total = 0usize;
    let mut sum_err = 0.0;

    for (pi, (param, var)) in params.iter().zip(&vars).enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(param.shape()));
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < param.len() => {
                let mut picked = index::sample(&mut rng, param.len(), k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..param.len()).collect(),
        };

        let mut max_err = 0.0f64;
        let mut param_sum = 0.0;
        for &e in &entries {
            let theta = param.data()[e];
            let h = if opts.relative_step {
                opts.step * theta.abs().max(1.0)
            } else {
                opts.step
            };
            work[pi].data_mut()[e] = theta + h;
            let plus = scalar_value(&f, &work)?;
            work[pi].data_mut()[e] = theta - h;
            let minus = scalar_value(&f, &work)?;
            work[pi].data_mut()[e] = theta;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            let err = relative_error(a, numeric, opts.floor);
            max_err = max_err.max(err);
            param_sum += err;
            if worst.as_ref().is_none_or(|w| err > w.rel_err) {
                worst = Some(EntryCheck {
                    param: pi,
                    entry: e,
                    analytic: a,
                    numeric,
                    rel_err: err,
                });
            }
        }
        total += entries.len();
        sum_err += param_sum;
        per_param.push(ParamCheck {
            param: pi,
            checked: entries.len(),
            max_rel_err: max_err,
            mean_rel_err: if entries.is_empty() {
                0.0
            } else {
                param_sum / entries.len() as f64
            },
        });
    }

    let max_rel_err = per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: per_param,
        checked: total,
        max_rel_err,
        mean_rel_err: if total == 0 { 0.0 } else { sum_err / total as f64 },
        tolerance: opts.tolerance,
        passed: max_rel_err <= opts.tolerance,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot_self(tape: &mut Tape, p: &[Var]) -> Result<Var> {
        let wt = tape.transpose(p[0])?;
        tape.matmul(p[0], wt)
    }

    #[test]
    fn quadratic_gradient() {
        let w = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let report = grad_check(dot_self, std::slice::from_ref(&w), &GradCheckOptions::default()).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checked, 2);

        let mut tape = Tape::new();
        let v = tape.param(w);
        let loss = dot_self(&mut tape, &[v]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let f = |tape: &mut Tape, _p: &[Var]| -> Result<Var> {
            Ok(tape.constant(Tensor::scalar(3.0)))
        };
        let report =
            grad_check(f, &[Tensor::vector(vec![0.1, -4.0])], &GradCheckOptions::default())
                .unwrap();
        assert!(report.passed);
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let f = |tape: &mut Tape, p: &[Var]| -> Result<Var> {
            let s = tape.scale(p[0], f64::INFINITY);
            let z = tape.constant(Tensor::vector(vec![0.0]));
            tape.squared_distance(s, z)
        };
        let err = grad_check(f, &[Tensor::vector(vec![1.0])], &GradCheckOptions::default());
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_non_positive_step() {
        let opts = GradCheckOptions {
            step: 0.0,
            ..Default::default()
        };
        assert!(grad_check(dot_self, &[Tensor::vector(vec![1.0])], &opts).is_err());
    }

    #[test]
    fn sampling_limits_checked_entries() {
        let opts = GradCheckOptions {
            max_entries_per_param: Some(3),
            ..Default::default()
        };
        let w = Tensor::new(vec![1, 10], (0..10).map(|i| i as f64 * 0.1).collect()).unwrap();
        let report = grad_check(dot_self, &[w], &opts).unwrap();
        assert_eq!(report.checked, 3);
    }
}
