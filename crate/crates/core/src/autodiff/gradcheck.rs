use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Coordinates checked per parameter; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    /// Denominator floor for the relative error, so near-zero gradients are judged on
    /// absolute error instead.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords: None,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub n_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of the scalar built by `loss` against central differences on
/// the parameters in `store`.
pub fn grad_check<S, F>(store: &ParamStore<S>, loss: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let eval = |s: &ParamStore<S>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = s.bind(&mut tape);
        let out = loss(&mut tape, &vars)?;
        Ok(tape.value(out).item().as_f64())
    };

    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let out = loss(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape("grad_check", "loss must be a scalar"));
    }
    let grads = tape.backward(out)?;
    let analytic = store.collect_grads(&vars, &grads);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        n_checked: 0,
    };
    for (pi, param) in store.params().iter().enumerate() {
        let n = param.value.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in coords {
            let orig = param.value.data()[idx];
            probe.params_mut()[pi].value.data_mut()[idx] = orig + S::of(opts.h);
            let plus = eval(&probe)?;
            probe.params_mut()[pi].value.data_mut()[idx] = orig - S::of(opts.h);
            let minus = eval(&probe)?;
            probe.params_mut()[pi].value.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let err = relative_error(analytic[pi].data()[idx].as_f64(), numeric, opts.floor);
            report.n_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((param.name.clone(), idx));
                }
            }
        }
    }
    Ok(report)
}
