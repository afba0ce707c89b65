use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Binding, Graph, Params, TensorError, Var};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Largest `|a − f| / max(|a|, |f|, 1e-8)` over every checked coordinate.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub eps: f64,
    /// Per-tensor maximum relative error, in name order.
    pub per_param: Vec<(String, f64)>,
    pub coordinates_checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Tensors larger than this are checked on a seeded random subset of
    /// this many coordinates.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            coords_per_tensor: 64,
            seed: 0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_loss<E, F>(params: &Params<f64>, loss_fn: &F) -> Result<f64, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph<f64>, &Binding) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let b = g.bind(params)?;
    let loss = loss_fn(&mut g, &b)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(TensorError::NotScalar(v.shape().to_vec()).into());
    }
    Ok(v.data()[0])
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// `(L(p+eps) − L(p−eps)) / 2eps`, one scalar coordinate at a time.
pub fn grad_check<E, F>(params: &Params<f64>, opts: &GradCheckOptions, loss_fn: F) -> Result<GradReport, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph<f64>, &Binding) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let binding = g.bind(params)?;
    let loss = loss_fn(&mut g, &binding)?;
    let analytic = g.backward(loss)?.named(&g, &binding);
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        eps: opts.eps,
        per_param: Vec::new(),
        coordinates_checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let numel = params.get(&name).map_or(0, |t| t.numel());
        let coords: Vec<usize> = if numel <= opts.coords_per_tensor {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, opts.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let grad = analytic.get(&name).expect("gradient for every bound param");
        let mut worst: f64 = 0.0;
        for idx in coords {
            let orig = params.get(&name).expect("present").data()[idx];
            let set = |w: &mut Params<f64>, v: f64| w.get_mut(&name).expect("present").data_mut()[idx] = v;
            set(&mut work, orig + opts.eps);
            let up = eval_loss(&work, &loss_fn)?;
            set(&mut work, orig - opts.eps);
            let down = eval_loss(&work, &loss_fn)?;
            set(&mut work, orig);
            if !up.is_finite() || !down.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" }.into());
            }
            let numeric = (up - down) / (2.0 * opts.eps);
            let err = relative_error(grad.data()[idx], numeric);
            worst = worst.max(err);
            report.coordinates_checked += 1;
        }
        if report.worst_param.is_empty() || worst > report.max_rel_error {
            report.max_rel_error = worst;
            report.worst_param = name.clone();
        }
        report.per_param.push((name, worst));
    }
    Ok(report)
}
