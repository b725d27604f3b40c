use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::params::init_rng;
use super::{Gradients, ParamStore};
use crate::{Error, Result};

/// One evaluation of the function under test.
pub struct Evaluation {
    pub loss: f64,
    /// Kink signature of the forward pass (see [`super::Tape::kink_signature`]).
    pub signature: u64,
    /// Analytic gradients; only required when requested.
    pub grads: Option<Gradients<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per parameter; all of them when the parameter is smaller.
    pub samples_per_param: usize,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_param: 24,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a relu or pooling kink.
    pub excluded: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.params.iter().filter(|p| !p.passed).map(|p| p.name.as_str()).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares analytic gradients from `eval` with central differences.
///
/// `eval(store, want_grads)` must be a deterministic function of the stored
/// parameters. A coordinate is excluded when either perturbed evaluation
/// lands on a different kink signature than the unperturbed one.
pub fn check_gradients<F>(store: &mut ParamStore<f64>, options: &GradCheckOptions, mut eval: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, bool) -> Result<Evaluation>,
{
    for p in store.params() {
        if p.value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("parameter {} is not finite", p.name)));
        }
    }
    let base = eval(store, true)?;
    let analytic = base
        .grads
        .ok_or_else(|| Error::Validation("gradient check needs analytic gradients".into()))?;
    if !base.loss.is_finite() {
        return Err(Error::NonFiniteGradient("loss is not finite".into()));
    }
    let mut rng = init_rng(options.seed);
    let h = options.step;
    let mut params = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.get(id).name.clone();
        let n = store.get(id).value.len();
        let grad = analytic.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("{name}[{i}]")));
        }
        let coords: Vec<usize> = if n <= options.samples_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, options.samples_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = ParamCheck {
            name,
            checked: 0,
            excluded: 0,
            max_rel_error: 0.0,
            worst_index: None,
            passed: true,
        };
        for i in coords {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(store, false);
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(store, false);
            store.get_mut(id).value.data_mut()[i] = orig;
            let (plus, minus) = (plus?, minus?);
            if plus.signature != base.signature || minus.signature != base.signature {
                check.excluded += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * h);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(options.abs_floor);
            check.checked += 1;
            if rel > check.max_rel_error || check.worst_index.is_none() {
                check.max_rel_error = check.max_rel_error.max(rel);
                check.worst_index = Some(i);
            }
        }
        check.passed = check.max_rel_error < options.tolerance;
        params.push(check);
    }
    Ok(GradCheckReport {
        tolerance: options.tolerance,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Mode, Tape, Tensor};

    fn relu_sum_store(values: Vec<f64>) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let n = values.len();
        store.add("x", Tensor::new(vec![1, n], values).unwrap()).unwrap();
        store
    }

    fn relu_then_softmax(store: &ParamStore<f64>, want: bool) -> Result<Evaluation> {
        let mut tape = Tape::new(store, Mode::Train, 0);
        tape.track_kinks(true);
        let x = tape.param(store.find("x").unwrap());
        let r = tape.relu(x);
        let p = tape.softmax(r)?;
        let loss = tape.cross_entropy(p, &[0], None)?;
        Ok(Evaluation {
            loss: tape.value(loss).data()[0],
            signature: tape.kink_signature(),
            grads: if want { Some(tape.backward(loss)?) } else { None },
        })
    }

    #[test]
    fn relu_at_zero_is_excluded() {
        let mut store = relu_sum_store(vec![0.0, 0.7, -0.4]);
        let report = check_gradients(&mut store, &GradCheckOptions::default(), relu_then_softmax).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.params[0].excluded, 1);
        assert_eq!(report.params[0].checked, 2);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let mut store = relu_sum_store(vec![0.3, 0.7, -0.4]);
        let report = check_gradients(&mut store, &GradCheckOptions::default(), |s, want| {
            let mut e = relu_then_softmax(s, want)?;
            if let Some(g) = e.grads.as_mut() {
                g.get_mut(s.find("x").unwrap()).unwrap()[1] *= 1.5;
            }
            Ok(e)
        })
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures(), vec!["x"]);
    }

    #[test]
    fn non_finite_parameter_is_rejected() {
        let mut store = relu_sum_store(vec![f64::NAN, 0.1]);
        let err = check_gradients(&mut store, &GradCheckOptions::default(), relu_then_softmax);
        assert!(matches!(err, Err(Error::NonFiniteGradient(_))));
    }
}
