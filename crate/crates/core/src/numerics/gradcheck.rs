//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::backend::Backend;
use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{nan_max, Tensor};
use crate::error::Result;

/// Fraction of the tolerance the step-halving tests may differ by before a
/// stencil is treated as straddling a kink.
const SMOOTHNESS_MARGIN: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Entries sampled per tensor; tensors at or below this size are checked exhaustively.
    pub max_entries_per_tensor: usize,
    /// Magnitudes below this floor are compared absolutely rather than relatively.
    pub abs_floor: f64,
    pub seed: u64,
    /// Times the step is divided by 10 when the estimates at `h` and `h / 2`
    /// disagree, which happens when a kink lies inside the stencil.
    pub max_refinements: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_entries_per_tensor: 64,
            abs_floor: 1e-6,
            seed: 0,
            max_refinements: 2,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Entries skipped because the loss is not smooth around them at any step tried.
    pub nonsmooth: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub checked: usize,
    pub nonsmooth: usize,
    pub tol: f64,
    pub passed: bool,
    /// Set when the loss was non-finite at some evaluation point.
    pub failure: Option<String>,
}

impl GradCheckReport {
    fn numerical_failure(msg: String, tol: f64) -> Self {
        Self {
            tensors: Vec::new(),
            max_rel_error: f64::INFINITY,
            checked: 0,
            nonsmooth: 0,
            tol,
            passed: false,
            failure: Some(msg),
        }
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Analytic gradients for every parameter (zeros where the loss does not
/// depend on it) and every input.
#[derive(Clone, Debug)]
pub struct AnalyticGradients {
    pub params: Vec<Tensor>,
    pub inputs: Vec<Tensor>,
}

impl AnalyticGradients {
    pub fn scale(&mut self, factor: f64) {
        for t in self.params.iter_mut().chain(self.inputs.iter_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// A differentiable computation from inputs (and the store's parameters) to a scalar loss.
pub trait LossFn: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var> {}
impl<F> LossFn for F where F: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var> {}

fn eval_loss(store: &ParamStore, inputs: &[Tensor], f: &impl LossFn) -> Result<f64> {
    let mut tape = Tape::new(store);
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    Ok(tape.value(&loss).item())
}

pub fn analytic_gradients(
    store: &ParamStore,
    inputs: &[Tensor],
    f: &impl LossFn,
) -> Result<AnalyticGradients> {
    let mut tape = Tape::new(store);
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let params = store
        .iter()
        .map(|(id, p)| {
            grads
                .param(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.tensor.shape().to_vec()))
        })
        .collect();
    let inputs = leaves
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .leaf(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    Ok(AnalyticGradients { params, inputs })
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn entries(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut idx = sample(rng, len, max).into_vec();
        idx.sort_unstable();
        idx
    }
}

#[derive(Clone, Copy)]
enum Target {
    Param(usize),
    Input(usize),
}

/// Compares `analytic` against central differences of `f`, perturbing every
/// parameter of `store` and every input in place (values are restored).
pub fn compare_gradients(
    store: &mut ParamStore,
    inputs: &mut [Tensor],
    analytic: &AnalyticGradients,
    cfg: &GradCheckConfig,
    f: &impl LossFn,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut targets: Vec<(String, Target)> = store
        .iter()
        .map(|(id, p)| (p.name.clone(), Target::Param(id.index())))
        .collect();
    targets.extend((0..inputs.len()).map(|i| (format!("input{i}"), Target::Input(i))));

    let base = eval_loss(store, inputs, f)?;
    if !base.is_finite() {
        return Ok(GradCheckReport::numerical_failure(
            format!("non-finite loss {base}"),
            cfg.tol,
        ));
    }
    let mut tensors = Vec::with_capacity(targets.len());
    for (name, target) in targets {
        let len = match target {
            Target::Param(i) => store.get(ParamId(i)).len(),
            Target::Input(i) => inputs[i].len(),
        };
        let mut check = TensorCheck {
            name,
            checked: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            nonsmooth: 0,
        };
        for idx in entries(len, cfg.max_entries_per_tensor, &mut rng) {
            let at = |delta: f64, store: &mut ParamStore, inputs: &mut [Tensor]| -> Result<f64> {
                let slot = match target {
                    Target::Param(i) => &mut store.get_mut(ParamId(i)).data_mut()[idx],
                    Target::Input(i) => &mut inputs[i].data_mut()[idx],
                };
                let orig = *slot;
                *slot = orig + delta;
                let loss = eval_loss(store, inputs, f);
                let slot = match target {
                    Target::Param(i) => &mut store.get_mut(ParamId(i)).data_mut()[idx],
                    Target::Input(i) => &mut inputs[i].data_mut()[idx],
                };
                *slot = orig;
                loss
            };
            // central slope and second difference `(f(h) - 2 f(0) + f(-h)) / h`
            let stencil = |h: f64,
                           store: &mut ParamStore,
                           inputs: &mut [Tensor]|
             -> Result<Option<(f64, f64)>> {
                let plus = at(h, store, inputs)?;
                let minus = at(-h, store, inputs)?;
                Ok((plus.is_finite() && minus.is_finite())
                    .then(|| ((plus - minus) / (2.0 * h), (plus - 2.0 * base + minus) / h)))
            };
            let mut numeric = None;
            let mut h = cfg.step;
            for _ in 0..=cfg.max_refinements {
                let (Some((d1, c1)), Some((d2, c2))) =
                    (stencil(h, store, inputs)?, stencil(h / 2.0, store, inputs)?)
                else {
                    return Ok(GradCheckReport::numerical_failure(
                        format!(
                            "non-finite loss while perturbing {} entry {idx}",
                            check.name
                        ),
                        cfg.tol,
                    ));
                };
                // On smooth stretches the second difference halves with the step;
                // a kink near the point keeps it at the slope jump.
                let allowed =
                    cfg.tol * (SMOOTHNESS_MARGIN * d1.abs().max(d2.abs()) + cfg.abs_floor / 4.0);
                let smooth = (d1 - d2).abs() <= allowed && (c2 - 0.5 * c1).abs() <= allowed;
                if smooth {
                    // Richardson extrapolation cancels the h^2 term
                    numeric = Some((4.0 * d2 - d1) / 3.0);
                    break;
                }
                h /= 10.0;
            }
            let Some(numeric) = numeric else {
                check.nonsmooth += 1;
                continue;
            };
            let a = match target {
                Target::Param(i) => analytic.params[i].data()[idx],
                Target::Input(i) => analytic.inputs[i].data()[idx],
            };
            check.checked += 1;
            check.max_abs_error = nan_max(check.max_abs_error, (a - numeric).abs());
            check.max_rel_error = nan_max(
                check.max_rel_error,
                relative_error(a, numeric, cfg.abs_floor),
            );
        }
        tensors.push(check);
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, nan_max);
    let checked = tensors.iter().map(|t| t.checked).sum();
    let nonsmooth = tensors.iter().map(|t| t.nonsmooth).sum();
    Ok(GradCheckReport {
        tensors,
        max_rel_error,
        checked,
        nonsmooth,
        tol: cfg.tol,
        passed: checked > 0 && max_rel_error <= cfg.tol,
        failure: None,
    })
}

/// Checks tape gradients of `f` against central finite differences.
///
/// A non-finite loss yields a failing report rather than an error.
pub fn grad_check(
    store: &mut ParamStore,
    inputs: &mut [Tensor],
    cfg: &GradCheckConfig,
    f: impl LossFn,
) -> Result<GradCheckReport> {
    let base = eval_loss(store, inputs, &f)?;
    if !base.is_finite() {
        return Ok(GradCheckReport::numerical_failure(
            format!("loss is {base} at the unperturbed point"),
            cfg.tol,
        ));
    }
    let analytic = analytic_gradients(store, inputs, &f)?;
    compare_gradients(store, inputs, &analytic, cfg, &f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_setup() -> (ParamStore, ParamId, Vec<Tensor>) {
        let mut store = ParamStore::new();
        let w = store
            .register("w", Tensor::from_fn(vec![3, 2], |i| 0.1 * i as f64 - 0.2))
            .unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.5, -1.5, 2.0]).unwrap();
        (store, w, vec![x])
    }

    #[test]
    fn linear_map_is_exact() {
        let (mut store, w, mut inputs) = linear_setup();
        let cfg = GradCheckConfig {
            tol: 1e-8,
            ..Default::default()
        };
        let report = grad_check(&mut store, &mut inputs, &cfg, |tape, xs| {
            let wv = tape.param(w);
            let y = tape.linear(&xs[0], &wv, None)?;
            tape.dot_const(&y, &Tensor::full(vec![1, 2], 1.0))
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
        let analytic = analytic_gradients(&store, &inputs, &|tape: &mut Tape<'_>, xs: &[Var]| {
            let wv = tape.param(w);
            let y = tape.linear(&xs[0], &wv, None)?;
            tape.dot_const(&y, &Tensor::full(vec![1, 2], 1.0))
        })
        .unwrap();
        // dL/dW[i, j] = x[i]
        assert_eq!(analytic.params[0].data(), &[0.5, 0.5, -1.5, -1.5, 2.0, 2.0]);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let (mut store, w, mut inputs) = linear_setup();
        let f = |tape: &mut Tape<'_>, xs: &[Var]| {
            let wv = tape.param(w);
            let y = tape.linear(&xs[0], &wv, None)?;
            tape.dot_const(&y, &Tensor::full(vec![1, 2], 1.0))
        };
        let mut analytic = analytic_gradients(&store, &inputs, &f).unwrap();
        analytic.scale(1.01);
        let report = compare_gradients(
            &mut store,
            &mut inputs,
            &analytic,
            &GradCheckConfig::default(),
            &f,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error > 5e-3);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let (mut store, w, mut inputs) = linear_setup();
        let report = grad_check(
            &mut store,
            &mut inputs,
            &GradCheckConfig::default(),
            |tape, xs| {
                let wv = tape.param(w);
                let y = tape.linear(&xs[0], &wv, None)?;
                tape.dot_const(&y, &Tensor::full(vec![1, 2], f64::INFINITY))
            },
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.failure.is_some());
    }
}
