//! Central-difference verification of reverse-mode gradients (64-bit only).

pub mod suite;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Fault, Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Probe at most this many coordinates per tensor; `None` probes all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: Some(64),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_parameter: String,
    pub passed: bool,
    /// Probed flat indices per parameter, in parameter order.
    pub probed: Vec<(String, Vec<usize>)>,
    /// Set when probing hit a non-finite value or the function failed.
    pub failure: Option<String>,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub type NamedTensor = (String, Tensor<f64>);

/// Checks the reverse-mode gradient of the scalar built by `f` against
/// central differences. `f` receives one graph leaf per parameter, in order.
pub fn gradient_check<F>(f: F, params: &[NamedTensor], cfg: &GradCheckConfig) -> GradReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    gradient_check_with_fault(f, params, cfg, None)
}

/// As [`gradient_check`], with the analytic pass run under `fault`.
pub fn gradient_check_with_fault<F>(f: F, params: &[NamedTensor], cfg: &GradCheckConfig, fault: Option<Fault>) -> GradReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic = match analytic_gradients_with_fault(&f, params, fault) {
        Ok(a) => a,
        Err(e) => return failed_report(params, format!("analytic pass failed: {e}")),
    };
    compare_with_finite_differences(&f, params, &analytic, cfg)
}

pub fn analytic_gradients<F>(f: &F, params: &[NamedTensor]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    analytic_gradients_with_fault(f, params, None)
}

/// Reverse-mode gradients computed on a graph carrying `fault`.
pub fn analytic_gradients_with_fault<F>(f: &F, params: &[NamedTensor], fault: Option<Fault>) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_fault(fault);
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let mut grads = g.backward(root)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect())
}

fn evaluate<F>(f: &F, params: &[NamedTensor]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.constant(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    Ok(g.value(root).item())
}

fn failed_report(params: &[NamedTensor], reason: String) -> GradReport {
    GradReport {
        max_rel_error: f64::INFINITY,
        max_abs_error: f64::INFINITY,
        worst_parameter: params.first().map(|p| p.0.clone()).unwrap_or_default(),
        passed: false,
        probed: Vec::new(),
        failure: Some(reason),
    }
}

/// Compares a supplied gradient against central differences of `f`.
pub fn compare_with_finite_differences<F>(
    f: &F,
    params: &[NamedTensor],
    analytic: &[Tensor<f64>],
    cfg: &GradCheckConfig,
) -> GradReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<NamedTensor> = params.to_vec();
    let mut report = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_parameter: String::new(),
        passed: true,
        probed: Vec::new(),
        failure: None,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let name = params[pi].0.clone();
        if !grad.is_finite() {
            report.failure = Some(format!("non-finite analytic gradient in `{name}`"));
            report.worst_parameter = name;
            report.passed = false;
            report.max_rel_error = f64::INFINITY;
            return report;
        }
        let n = params[pi].1.len();
        let mut indices: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        indices.sort_unstable();
        for &i in &indices {
            let orig = params[pi].1.data()[i];
            work[pi].1.data_mut()[i] = orig + cfg.step;
            let plus = evaluate(f, &work);
            work[pi].1.data_mut()[i] = orig - cfg.step;
            let minus = evaluate(f, &work);
            work[pi].1.data_mut()[i] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    return GradReport {
                        failure: Some(format!("evaluation failed probing `{name}`[{i}]: {e}")),
                        worst_parameter: name,
                        passed: false,
                        max_rel_error: f64::INFINITY,
                        ..report
                    }
                }
                _ => {
                    return GradReport {
                        failure: Some(format!("non-finite value probing `{name}`[{i}]")),
                        worst_parameter: name,
                        passed: false,
                        max_rel_error: f64::INFINITY,
                        ..report
                    }
                }
            };
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[i];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst_parameter.is_empty() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst_parameter = name.clone();
            }
        }
        report.probed.push((name, indices));
    }
    report.passed = report.max_rel_error <= cfg.tolerance;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_norm(g: &mut Graph<f64>, v: &[Var]) -> Result<Var> {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum(sq))
    }

    fn params() -> Vec<NamedTensor> {
        vec![
            ("x".into(), Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap()),
        ]
    }

    #[test]
    fn quadratic_passes_tight_tolerance() {
        let cfg = GradCheckConfig {
            tolerance: 1e-7,
            max_coords: None,
            ..Default::default()
        };
        let r = gradient_check(square_norm, &params(), &cfg);
        assert!(r.passed, "{r:?}");
        assert_eq!(r.probed[0].1, vec![0, 1, 2, 3]);
    }

    #[test]
    fn corrupted_entry_is_detected() {
        let two = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let a = g.mul(v[0], v[0])?;
            let b = g.mul(v[1], v[1])?;
            let s = g.add(a, b)?;
            Ok(g.sum(s))
        };
        let p = vec![
            ("clean".to_string(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()),
            ("corrupt".to_string(), Tensor::new(vec![2], vec![-0.5, 0.25]).unwrap()),
        ];
        let mut analytic = analytic_gradients(&two, &p).unwrap();
        analytic[1].data_mut()[1] *= 2.0;
        let cfg = GradCheckConfig::default();
        let r = compare_with_finite_differences(&two, &p, &analytic, &cfg);
        assert!(!r.passed);
        assert_eq!(r.worst_parameter, "corrupt");
    }

    #[test]
    fn non_finite_probe_names_parameter() {
        let log_like = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            // log_softmax of a huge/tiny temperature blows up only when probed
            let y = g.scale(v[0], 1.0);
            let s = g.sum(y);
            let inv = g.value(s).item();
            Ok(g.add_scalar(s, if inv > 0.0 { f64::INFINITY } else { 0.0 }))
        };
        let p = vec![("boom".to_string(), Tensor::new(vec![1], vec![0.0]).unwrap())];
        let r = gradient_check(log_like, &p, &GradCheckConfig::default());
        assert!(!r.passed);
        assert_eq!(r.worst_parameter, "boom");
        assert!(r.failure.is_some());
    }
}
