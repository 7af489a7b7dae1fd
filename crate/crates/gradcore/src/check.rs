//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamSet;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Finite-difference half step.
    pub step: f64,
    /// Analytic gradients below this magnitude are compared absolutely.
    pub abs_threshold: f64,
    /// Larger parameters are checked on a seeded random subset of elements.
    pub max_elements_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            tolerance: 1e-4,
            step: 1e-3,
            abs_threshold: 1e-6,
            max_elements_per_param: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Elements where every tried step crossed an activation kink.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_error).fold(0.0, f64::max)
    }
}

/// Compares analytic and central-difference gradients of a scalar loss.
///
/// `build` records the loss graph from the given parameters; it is called once
/// for the analytic pass and four times per checked element. The difference quotient
/// at steps `h` and `h/2` is combined by Richardson extrapolation, and is
/// accepted only if every perturbed evaluation keeps each leaky-ReLU on the
/// same side of its kink; otherwise the step is shrunk tenfold (up to three
/// times) before the element is skipped.
pub fn grad_check<F>(
    params: &ParamSet<f64>,
    cfg: &GradCheckConfig,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let base_sig = g.gate_signature();
    g.backward(loss)?;
    let mut analytic = params.clone();
    analytic.zero_grads();
    g.export_grads(&mut analytic)?;

    let mut eval = |p: &ParamSet<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let loss = build(&mut g, p)?;
        Ok((g.value(loss).item(), g.gate_signature()))
    };

    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = Vec::with_capacity(names.len());
    for (pi, name) in names.iter().enumerate() {
        let numel = params.get(name)?.numel();
        let indices: Vec<usize> = if numel <= cfg.max_elements_per_param {
            (0..numel).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(pi as u64));
            let mut idx = sample(&mut rng, numel, cfg.max_elements_per_param).into_vec();
            idx.sort_unstable();
            idx
        };
        let grad = analytic.grad(name)?.to_vec();
        let mut max_error = 0.0f64;
        let mut worst_index = 0;
        let mut checked = 0;
        let mut skipped = 0;
        for i in indices {
            let orig = work.get(name)?.data()[i];
            let mut h = cfg.step;
            let mut numeric = None;
            for _ in 0..4 {
                let mut quotient = |step: f64| -> Result<Option<f64>> {
                    work.get_mut(name)?.data_mut()[i] = orig + step;
                    let (lp, sp) = eval(&work)?;
                    work.get_mut(name)?.data_mut()[i] = orig - step;
                    let (lm, sm) = eval(&work)?;
                    work.get_mut(name)?.data_mut()[i] = orig;
                    Ok((sp == base_sig && sm == base_sig).then(|| (lp - lm) / (2.0 * step)))
                };
                if let (Some(coarse), Some(fine)) = (quotient(h)?, quotient(h / 2.0)?) {
                    // Richardson extrapolation cancels the O(h^2) error term.
                    numeric = Some((4.0 * fine - coarse) / 3.0);
                    break;
                }
                h /= 10.0;
            }
            let Some(n) = numeric else {
                skipped += 1;
                continue;
            };
            let a = grad[i];
            let err = if a.abs() < cfg.abs_threshold {
                (a - n).abs()
            } else {
                (a - n).abs() / a.abs().max(n.abs())
            };
            checked += 1;
            if err > max_error || err.is_nan() {
                max_error = if err.is_nan() { f64::INFINITY } else { err };
                worst_index = i;
            }
        }
        report.push(ParamCheck {
            name: name.clone(),
            max_error,
            worst_index,
            checked,
            skipped,
            passed: max_error <= cfg.tolerance,
        });
    }
    let passed = report.iter().all(|p| p.passed);
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        params: report,
        passed,
    })
}
