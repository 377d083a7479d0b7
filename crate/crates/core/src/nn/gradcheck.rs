//! Central finite-difference verification of analytic gradients.

use rand::Rng;

use super::store::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// A scalar-valued differentiable computation over parameters and inputs.
pub trait Differentiable {
    fn value(&self, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<f64>;

    /// Returns the value and the input gradients; parameter gradients are
    /// accumulated into `store` (callers zero them first).
    fn gradient(
        &self,
        store: &mut ParamStore<f64>,
        inputs: &[Tensor<f64>],
    ) -> Result<(f64, Vec<Tensor<f64>>)>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates probed per tensor; tensors at most this large are probed exhaustively.
    pub probes_per_tensor: usize,
    /// Magnitude below which differences are measured absolutely.
    pub scale_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            probes_per_tensor: 20,
            scale_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor (parameter name or `input[i]`) holding the worst probe.
    pub worst: String,
    pub probes: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn probe_indices<R: Rng + ?Sized>(len: usize, probes: usize, rng: &mut R) -> Vec<usize> {
    if len <= probes {
        (0..len).collect()
    } else {
        (0..probes).map(|_| rng.random_range(0..len)).collect()
    }
}

pub fn grad_check<F: Differentiable + ?Sized, R: Rng + ?Sized>(
    f: &F,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let (_, input_grads) = f.gradient(&mut analytic_store, inputs)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        probes: 0,
        tolerance: cfg.tolerance,
        passed: true,
    };
    let record = |name: &str, analytic: f64, numeric: f64, report: &mut GradCheckReport| {
        let err = relative_error(analytic, numeric, cfg.scale_floor);
        report.probes += 1;
        if report.worst.is_empty() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = name.to_string();
        }
    };

    let mut probe_store = store.clone();
    for pi in 0..store.len() {
        let id = ParamId(pi);
        let name = store.get(id).name.clone();
        let len = store.get(id).value.len();
        for idx in probe_indices(len, cfg.probes_per_tensor, rng) {
            let orig = store.get(id).value.data()[idx];
            probe_store.get_mut(id).value.data_mut()[idx] = orig + cfg.step;
            let plus = f.value(&probe_store, inputs)?;
            probe_store.get_mut(id).value.data_mut()[idx] = orig - cfg.step;
            let minus = f.value(&probe_store, inputs)?;
            probe_store.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let analytic = analytic_store.get(id).grad.data()[idx];
            record(&name, analytic, numeric, &mut report);
        }
    }

    let mut probe_inputs = inputs.to_vec();
    for (ii, grad) in input_grads.iter().enumerate() {
        let name = format!("input[{ii}]");
        for idx in probe_indices(inputs[ii].len(), cfg.probes_per_tensor, rng) {
            let orig = inputs[ii].data()[idx];
            probe_inputs[ii].data_mut()[idx] = orig + cfg.step;
            let plus = f.value(store, &probe_inputs)?;
            probe_inputs[ii].data_mut()[idx] = orig - cfg.step;
            let minus = f.value(store, &probe_inputs)?;
            probe_inputs[ii].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            record(&name, grad.data()[idx], numeric, &mut report);
        }
    }

    report.passed = report.max_rel_error < cfg.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::store::ParamGroup;

    /// f(w, x) = sum_i c * w_i * x_i with a switchable bug in the gradient.
    struct Linear {
        scale: f64,
        corrupt: bool,
    }

    impl Differentiable for Linear {
        fn value(&self, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<f64> {
            let w = &store.by_name("lin.weight").unwrap().value;
            Ok(self.scale * w.dot(&inputs[0]))
        }

        fn gradient(
            &self,
            store: &mut ParamStore<f64>,
            inputs: &[Tensor<f64>],
        ) -> Result<(f64, Vec<Tensor<f64>>)> {
            let v = self.value(store, inputs)?;
            let id = store.id("lin.weight").unwrap();
            let mut gx = store.get(id).value.clone();
            gx.scale(self.scale);
            let p = store.get_mut(id);
            for (g, &x) in p.grad.data_mut().iter_mut().zip(inputs[0].data()) {
                *g += self.scale * x * if self.corrupt { 1.5 } else { 1.0 };
            }
            Ok((v, vec![gx]))
        }
    }

    fn setup() -> (ParamStore<f64>, Vec<Tensor<f64>>) {
        let mut s = ParamStore::new();
        s.insert(
            "lin.weight",
            ParamGroup::Network,
            Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap(),
        )
        .unwrap();
        (s, vec![Tensor::from_vec(&[3], vec![1.0, 0.5, -0.25]).unwrap()])
    }

    #[test]
    fn constant_output_passes_with_zero_gradients() {
        let (s, x) = setup();
        let f = Linear {
            scale: 0.0,
            corrupt: false,
        };
        let r = grad_check(&f, &s, &x, &GradCheckConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert!(r.passed);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn correct_gradient_passes() {
        let (s, x) = setup();
        let f = Linear {
            scale: 2.0,
            corrupt: false,
        };
        let r = grad_check(&f, &s, &x, &GradCheckConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.probes, 6);
    }

    #[test]
    fn corrupted_backward_fails_and_names_the_parameter() {
        let (s, x) = setup();
        let f = Linear {
            scale: 2.0,
            corrupt: true,
        };
        let r = grad_check(&f, &s, &x, &GradCheckConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst, "lin.weight");
    }
}
