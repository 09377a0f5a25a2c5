//! Central finite-difference certification of analytic gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const RTOL: f64 = 1e-3;
pub const ATOL: f64 = 1e-5;
const STEP: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub failures: Vec<String>,
    pub max_abs_error: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.failures.extend(other.failures);
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
    }

    fn record(&mut self, label: &str, analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = (analytic - numeric).abs();
        self.max_abs_error = self.max_abs_error.max(err);
        if err > ATOL + RTOL * numeric.abs() {
            self.failures
                .push(format!("{label}: analytic {analytic:.8e} vs numeric {numeric:.8e}"));
        }
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Certifies the gradient of a scalar function of tracked inputs.
pub fn input_grad_report<F>(inputs: &[Tensor], f: F) -> GradReport
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].rows(), inputs[k].cols()));
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + STEP;
            let plus = eval(&work);
            work[k].data_mut()[i] = orig - STEP;
            let minus = eval(&work);
            work[k].data_mut()[i] = orig;
            report.record(
                &format!("input {k}[{i}]"),
                analytic.data()[i],
                (plus - minus) / (2.0 * STEP),
            );
        }
    }
    report
}

/// Panicking wrapper of [`input_grad_report`] for unit tests.
pub fn check_input_grads<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let report = input_grad_report(inputs, f);
    assert!(report.passed(), "gradient check failed:\n{}", report.failures.join("\n"));
}

/// Certifies gradients with respect to stored parameters. At most
/// `max_per_param` entries of each parameter are probed, chosen by `rng`.
pub fn param_grad_report<F>(
    store: &ParamStore,
    max_per_param: usize,
    rng: &mut ChaCha8Rng,
    f: F,
) -> GradReport
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let analytic: Vec<Option<Tensor>> = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g);
        let grads = g.backward(out);
        let mut all = vec![None; store.len()];
        for (pid, t) in grads.params() {
            all[pid.index()] = Some(t.clone());
        }
        all
    };

    let mut work = store.clone();
    let mut report = GradReport::default();
    for pid in store.ids() {
        let n = store.get(pid).len();
        let picks: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            (0..max_per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in picks {
            let orig = store.get(pid).data()[i];
            work.get_mut(pid).data_mut()[i] = orig + STEP;
            let plus = scalar(&work, &f);
            work.get_mut(pid).data_mut()[i] = orig - STEP;
            let minus = scalar(&work, &f);
            work.get_mut(pid).data_mut()[i] = orig;
            let a = analytic[pid.index()].as_ref().map_or(0.0, |t| t.data()[i]);
            report.record(
                &format!("{}[{i}]", store.name(pid)),
                a,
                (plus - minus) / (2.0 * STEP),
            );
        }
    }
    report
}

fn scalar<F>(store: &ParamStore, f: &F) -> f64
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let mut g = Graph::with_params(store);
    let out = f(&mut g);
    g.value(out).item()
}
