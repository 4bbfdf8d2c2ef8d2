//! Central-difference verification of reverse-mode gradients.
//!
//! The checked scalar is `sum(f(x))`. The numeric derivative is accumulated
//! as the sum of per-output differences rather than the difference of two
//! sums, which keeps cancellation error low on large outputs.
//!
//! Relative error is `|a - n| / max(|a|, |n|, 1e-3)`. When a point fails at
//! step `h`, it is retried at `h/10` and `h/100`; if it still fails and the
//! one-sided slopes disagree by more than the discrepancy itself, the point
//! sits on a non-differentiable kink (e.g. a ReLU at zero) and is counted as
//! skipped instead of failed.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Ctx, ParamStore};
use crate::{Graph, Tensor, Var};

pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Upper bound on checked elements per tensor; `None` checks all.
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-6,
            tol: 1e-4,
            max_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// Location and values of the largest error.
    pub worst: Option<String>,
    pub checked: usize,
    pub kinks_skipped: usize,
    /// Set when a value or gradient was not finite.
    pub non_finite: Option<String>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite.is_none() && self.max_rel_err <= self.tol
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

fn check_points(
    labels: &[String],
    points: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    eval: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        tol: cfg.tol,
        ..Default::default()
    };
    for (label, a) in labels.iter().zip(analytic) {
        if let Some(i) = a.data().iter().position(|v| !v.is_finite()) {
            report.non_finite = Some(format!("analytic gradient of {label}[{i}] is not finite"));
            return Ok(report);
        }
    }
    let base = eval(points)?;
    if !base.is_finite() {
        report.non_finite = Some("forward output is not finite at the check point".into());
        return Ok(report);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (t, label) in labels.iter().enumerate() {
        let n = points[t].numel();
        let indices: Vec<usize> = match cfg.max_per_tensor {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let x0 = points[t].data()[i];
            let a = analytic[t].data()[i];
            let mut h = cfg.h;
            let mut outcome = None;
            let mut last = (f64::NAN, 0.0, 0.0);
            for _ in 0..3 {
                work[t].data_mut()[i] = x0 + h;
                let plus = eval(&work)?;
                work[t].data_mut()[i] = x0 - h;
                let minus = eval(&work)?;
                work[t].data_mut()[i] = x0;
                if !plus.is_finite() || !minus.is_finite() {
                    report.non_finite = Some(format!("output not finite when perturbing {label}[{i}]"));
                    return Ok(report);
                }
                let (mut central, mut fwd, mut bwd) = (0.0, 0.0, 0.0);
                for ((&p, &m), &b) in plus.data().iter().zip(minus.data()).zip(base.data()) {
                    central += p - m;
                    fwd += p - b;
                    bwd += b - m;
                }
                let (central, fwd, bwd) = (central / (2.0 * h), fwd / h, bwd / h);
                let err = rel_err(a, central);
                last = (central, fwd, bwd);
                if err <= cfg.tol {
                    outcome = Some(err);
                    break;
                }
                h /= 10.0;
            }
            report.checked += 1;
            let err = match outcome {
                Some(e) => e,
                None => {
                    let (central, fwd, bwd) = last;
                    if (fwd - bwd).abs() > (central - a).abs() {
                        report.kinks_skipped += 1;
                        continue;
                    }
                    rel_err(a, central)
                }
            };
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(format!("{label}[{i}]: analytic {a:.6e}, numeric {:.6e}", last.0));
            }
        }
    }
    Ok(report)
}

/// Checks the gradient of `sum(f(inputs))` with respect to every input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let y = f(&g, &vars)?;
        let loss = g.sum_all(y);
        let mut grads = g.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect::<Vec<_>>()
    };
    let eval = |pts: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&g, &vars)?;
        Ok((*g.value(y)).clone())
    };
    let labels: Vec<String> = (0..inputs.len()).map(|i| format!("input{i}")).collect();
    check_points(&labels, inputs, &analytic, &eval, cfg)
}

/// Checks a module built on a [`ParamStore`] with respect to its inputs and
/// every trainable parameter.
pub fn gradcheck_module<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    training: bool,
    f: F,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: Fn(&Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let param_ids: Vec<_> = store.iter().filter(|e| e.3).map(|e| e.0).collect();
    let analytic = {
        let ctx = Ctx::new(store, training, true, cfg.seed);
        let vars: Vec<Var> = inputs.iter().map(|t| ctx.graph().input(t.clone())).collect();
        let y = f(&ctx, &vars)?;
        let loss = ctx.graph().sum_all(y);
        let (pg, mut leaf, _) = ctx.backward(loss)?;
        let mut out: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| leaf.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        for &id in &param_ids {
            out.push(
                pg.get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape())),
            );
        }
        out
    };
    let mut points: Vec<Tensor<f64>> = inputs.to_vec();
    points.extend(param_ids.iter().map(|&id| store.get(id).clone()));
    let n_in = inputs.len();
    let eval = |pts: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let mut s = store.clone();
        for (&id, t) in param_ids.iter().zip(&pts[n_in..]) {
            s.set(id, t.clone())?;
        }
        let ctx = Ctx::new(&s, training, false, cfg.seed);
        let vars: Vec<Var> = pts[..n_in].iter().map(|t| ctx.graph().constant(t.clone())).collect();
        let y = f(&ctx, &vars)?;
        let out = (*ctx.graph().value(y)).clone();
        Ok(out)
    };
    let mut labels: Vec<String> = (0..n_in).map(|i| format!("input{i}")).collect();
    labels.extend(param_ids.iter().map(|&id| store.name(id).to_string()));
    check_points(&labels, &points, &analytic, &eval, cfg)
}
