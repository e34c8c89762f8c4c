//! Central finite-difference gradient checker.

use crate::graph::{Graph, Var};
use crate::tensor::{Result, Tensor};

/// Per-tensor outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub tensor: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_tensor: Vec<TensorCheck>,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    /// The tensor holding the largest relative error.
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// Elements whose perturbed evaluations see |cos| below this are skipped.
    pub kink_threshold: f64,
    pub inject_fault: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            kink_threshold: 1e-3,
            inject_fault: false,
        }
    }
}

impl GradCheck {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            ..Self::default()
        }
    }

    fn eval<F>(&self, params: &[Tensor], f: &F) -> Result<(f64, Option<f64>)>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g.value(out).item(), g.min_abs_cosine()))
    }

    /// Compares autodiff gradients of `f` against central differences for
    /// every element of every parameter.
    pub fn run<F>(&self, params: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        g.inject_backward_fault(self.inject_fault);
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        g.backward(loss)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();

        let mut work: Vec<Tensor> = params.to_vec();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            per_tensor: Vec::with_capacity(params.len()),
            checked: 0,
            skipped: 0,
        };
        for (ti, grad) in analytic.iter().enumerate() {
            let mut stat = TensorCheck {
                tensor: ti,
                max_rel_error: 0.0,
                worst_element: 0,
                analytic: 0.0,
                numeric: 0.0,
                checked: 0,
                skipped: 0,
            };
            for ei in 0..grad.len() {
                let orig = work[ti].data()[ei];
                work[ti].data_mut()[ei] = orig + self.eps;
                let (plus, kink_plus) = self.eval(&work, &f)?;
                work[ti].data_mut()[ei] = orig - self.eps;
                let (minus, kink_minus) = self.eval(&work, &f)?;
                work[ti].data_mut()[ei] = orig;

                let near_kink = [kink_plus, kink_minus]
                    .iter()
                    .flatten()
                    .any(|&c| c < self.kink_threshold);
                if near_kink {
                    stat.skipped += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = grad.data()[ei];
                let err = relative_error(a, numeric);
                stat.checked += 1;
                if err > stat.max_rel_error || stat.checked == 1 {
                    stat.max_rel_error = err;
                    stat.worst_element = ei;
                    stat.analytic = a;
                    stat.numeric = numeric;
                }
            }
            report.max_rel_error = report.max_rel_error.max(stat.max_rel_error);
            report.checked += stat.checked;
            report.skipped += stat.skipped;
            report.per_tensor.push(stat);
        }
        Ok(report)
    }
}

/// `GradCheck::new(eps).run(params, f)` returning only the max relative error.
pub fn grad_check<F>(params: &[Tensor], f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(GradCheck::new(eps).run(params, f)?.max_rel_error)
}

fn as_tensor_error(e: crate::error::Error) -> crate::tensor::TensorError {
    match e {
        crate::error::Error::Tensor(t) => t,
        other => crate::tensor::TensorError::Invalid {
            op: "model",
            detail: other.to_string(),
        },
    }
}

/// Gradient check of the full training objective (encoder, head and both
/// loss terms) for a freshly initialised model on one random window.
/// Returns the tensor names alongside the report.
pub fn check_model(
    cfg: &crate::config::ModelConfig,
    seed: u64,
    inject_fault: bool,
) -> crate::error::Result<(Vec<String>, GradCheckReport)> {
    use crate::config::Precision;
    use crate::model::{predict_next, ModelState};
    use crate::objective::total_loss;
    use crate::rng::Rng;

    let cfg = crate::config::ModelConfig {
        precision: Precision::F64,
        ..cfg.clone()
    };
    cfg.validate()?;
    let mut rng = Rng::seed(seed);
    let state = ModelState::init(&cfg, &mut rng)?;
    let layout = state.layout();
    let window = Tensor::new(
        &[cfg.seq_len, cfg.d],
        (0..cfg.seq_len * cfg.d).map(|_| rng.gaussian()).collect(),
    )?;
    let label = Tensor::new(&[1, cfg.d], (0..cfg.d).map(|_| rng.gaussian()).collect())?;
    let params: Vec<Tensor> = state.tensors.iter().map(|t| t.tensor.clone()).collect();
    let names = state.tensors.iter().map(|t| t.name.clone()).collect();
    let checker = GradCheck {
        inject_fault,
        ..GradCheck::default()
    };
    let report = checker.run(&params, |g, vars| {
        let e = g.constant(window.clone());
        let y = g.constant(label.clone());
        let fwd = predict_next(g, e, vars, &layout, &cfg).map_err(as_tensor_error)?;
        Ok(total_loss(g, y, fwd.prediction, &fwd.heads, cfg.lambda)
            .map_err(as_tensor_error)?
            .0)
    })?;
    Ok((names, report))
}
