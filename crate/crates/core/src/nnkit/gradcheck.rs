use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Parameters with more coordinates than this are sampled.
    pub max_coords_per_param: usize,
    pub seed: u64,
    /// Denominator floor of the relative error. Below it the comparison is
    /// effectively absolute, since finite differences of an O(1) loss carry
    /// roundoff near 1e-11 and near-zero gradients would otherwise dominate.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_coords_per_param: 50,
            seed: 0,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradients written by `loss_and_grad` with fourth-order
/// central differences of `loss`. Sampled parameters favour coordinates whose
/// analytic gradient is non-zero. Run with a [`super::Precision::F64`]
/// store for meaningful results.
pub fn grad_check<L, G>(
    store: &mut ParamStore,
    mut loss: L,
    mut loss_and_grad: G,
    opts: &GradCheckOptions,
) -> GradCheckReport
where
    L: FnMut(&ParamStore) -> f64,
    G: FnMut(&mut ParamStore) -> f64,
{
    store.zero_grads();
    loss_and_grad(store);
    let analytic: Vec<Vec<f64>> = store.params().iter().map(|p| p.grad.data.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        let coords: Vec<usize> = if grads.len() <= opts.max_coords_per_param {
            (0..grads.len()).collect()
        } else {
            let (mut nonzero, mut zero): (Vec<usize>, Vec<usize>) =
                (0..grads.len()).partition(|&k| grads[k] != 0.0);
            nonzero.shuffle(&mut rng);
            zero.shuffle(&mut rng);
            nonzero.truncate(opts.max_coords_per_param);
            let fill = opts.max_coords_per_param - nonzero.len();
            nonzero.extend(zero.into_iter().take(fill));
            nonzero
        };
        for k in coords {
            let orig = store.params()[pi].value.data[k];
            let mut at = |delta: f64| {
                store.params_mut()[pi].value.data[k] = orig + delta;
                loss(store)
            };
            let h = opts.eps;
            // five-point stencil, truncation error O(h^4)
            let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            store.params_mut()[pi].value.data[k] = orig;
            let err = relative_error(grads[k], numeric, opts.abs_floor);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.params()[pi].name.clone();
                report.worst_index = k;
                report.worst_analytic = grads[k];
                report.worst_numeric = numeric;
            }
        }
    }
    report
}
