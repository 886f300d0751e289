//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, Mode, ParamSet, Scalar, Tensor, ValueId};
use crate::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked exhaustively.
    pub max_per_tensor: usize,
    /// Lower bound of the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_per_tensor: 24,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor and flat index of the worst coordinate.
    pub worst: String,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a ReLU or
    /// max-pool switching point, where the function is not differentiable.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.checked > 0
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.clone();
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

fn evaluate<T, F>(params: &ParamSet<T>, inputs: &[Tensor<T>], mode: Mode, build: &F) -> Result<(f64, u64)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamSet<T>, &[ValueId]) -> Result<ValueId>,
{
    let mut g = Graph::new(mode).with_kink_tracking();
    let ids: Vec<ValueId> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
    let loss = build(&mut g, params, &ids)?;
    Ok((g.value(loss).data()[0].as_f64(), g.kink_signature()))
}

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences, for every trainable parameter and every input.
pub fn grad_check<T, F>(
    params: &mut ParamSet<T>,
    inputs: &[Tensor<T>],
    mode: Mode,
    opts: &GradCheckOptions,
    build: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamSet<T>, &[ValueId]) -> Result<ValueId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    params.zero_grad();
    let mut g = Graph::new(mode).with_kink_tracking();
    let ids: Vec<ValueId> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let loss = build(&mut g, params, &ids)?;
    let base_kinks = g.kink_signature();
    let input_grads = g.backward(loss, params)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
    };
    let eps = T::from_f64(opts.eps);
    let record = |report: &mut GradCheckReport, analytic: f64, plus: (f64, u64), minus: (f64, u64), label: String| {
        if plus.1 != base_kinks || minus.1 != base_kinks {
            report.skipped += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * opts.eps);
        let err = rel_error(analytic, numeric, opts.floor);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = label;
        }
    };

    let param_ids: Vec<_> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for pid in param_ids {
        let n = params.get(pid).value.len();
        let analytic = params.get(pid).grad.to_f64_vec();
        for k in pick(n, opts.max_per_tensor, &mut rng) {
            let orig = params.get(pid).value.data()[k];
            params.get_mut(pid).value.data_mut()[k] = orig + eps;
            let plus = evaluate(params, inputs, mode, &build)?;
            params.get_mut(pid).value.data_mut()[k] = orig - eps;
            let minus = evaluate(params, inputs, mode, &build)?;
            params.get_mut(pid).value.data_mut()[k] = orig;
            let label = format!("{}[{k}]", params.get(pid).name);
            record(&mut report, analytic[k], plus, minus, label);
        }
    }

    let mut perturbed: Vec<Tensor<T>> = inputs.to_vec();
    for (i, id) in ids.iter().enumerate() {
        let analytic = input_grads
            .get(*id)
            .map(|t| t.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for k in pick(inputs[i].len(), opts.max_per_tensor, &mut rng) {
            let orig = inputs[i].data()[k];
            perturbed[i].data_mut()[k] = orig + eps;
            let plus = evaluate(params, &perturbed, mode, &build)?;
            perturbed[i].data_mut()[k] = orig - eps;
            let minus = evaluate(params, &perturbed, mode, &build)?;
            perturbed[i].data_mut()[k] = orig;
            record(&mut report, analytic[k], plus, minus, format!("input{i}[{k}]"));
        }
    }
    Ok(report)
}

fn pick(n: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}
