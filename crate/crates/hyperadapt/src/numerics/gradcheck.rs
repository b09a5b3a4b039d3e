use super::rng::Rng;
use super::store::ParamStore;
use super::tensor::Tensor2;
use super::Result;

/// Central-difference step. 1e-5 balances truncation against round-off at
/// f64 precision for losses of order 1.
pub const GRADCHECK_EPS: f64 = 1e-5;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error across all sampled coordinates.
    pub max_rel_err: f64,
    /// Parameter name and flat element index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Number of coordinates actually compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Compares analytic gradients with central differences at f64 precision.
///
/// `loss_fn` must, for the current store values, recompute the loss and
/// leave fresh analytic gradients in the store's `grad` slots (callers
/// zero + backward + export inside the closure). It is then re-invoked
/// with perturbed values to obtain `(f(x+eps) - f(x-eps)) / (2 eps)`.
///
/// `samples` coordinates are drawn uniformly over the elements of all
/// trainable parameters; if the total count is smaller, every coordinate
/// is checked once.
pub fn grad_check(
    store: &mut ParamStore<f64>,
    mut loss_fn: impl FnMut(&mut ParamStore<f64>) -> Result<f64>,
    samples: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    // Analytic pass at the unperturbed point.
    let _ = loss_fn(store)?;
    let analytic: Vec<(String, Tensor2<f64>)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(name, p)| (name.to_string(), p.grad.clone()))
        .collect();

    // Flat index space over trainable coordinates.
    let sizes: Vec<usize> = analytic.iter().map(|(_, g)| g.len()).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<usize> = if total <= samples {
        (0..total).collect()
    } else {
        (0..samples).map(|_| rng.usize_below(total)).collect()
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0 };
    for flat in picks {
        let (pi, offset) = locate(&sizes, flat);
        let name = analytic[pi].0.clone();
        let ga = analytic[pi].1.data()[offset];

        let orig = store.value(&name)?.data()[offset];
        store.get_mut(&name)?.value.data_mut()[offset] = orig + GRADCHECK_EPS;
        let hi = loss_fn(store)?;
        store.get_mut(&name)?.value.data_mut()[offset] = orig - GRADCHECK_EPS;
        let lo = loss_fn(store)?;
        store.get_mut(&name)?.value.data_mut()[offset] = orig;

        let gn = (hi - lo) / (2.0 * GRADCHECK_EPS);
        let rel = (ga - gn).abs() / (ga.abs() + gn.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((name, offset));
        }
    }
    // Leave the store with clean analytic gradients at the original point.
    let _ = loss_fn(store)?;
    Ok(report)
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (i, &s) in sizes.iter().enumerate() {
        if flat < s {
            return (i, flat);
        }
        flat -= s;
    }
    unreachable!("flat index out of range");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor2};

    fn quadratic_store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert_matrix("w", Tensor2::from_vec(2, 3, vec![0.3, -1.2, 0.7, 2.0, -0.5, 0.1]).unwrap())
            .unwrap();
        s
    }

    /// loss = mean over rows of softmax-CE; analytic grads via the graph.
    fn ce_loss(store: &mut ParamStore<f64>) -> Result<f64> {
        store.zero_grads();
        let mut g = Graph::new();
        let w = g.param(store, "w")?;
        let loss = g.cross_entropy(w, &[2, 0], None)?;
        g.backward(loss)?;
        g.export_grads(store)?;
        Ok(g.value(loss).data()[0])
    }

    #[test]
    fn correct_gradients_pass() {
        let mut store = quadratic_store();
        let mut rng = Rng::new(0);
        let report = grad_check(&mut store, ce_loss, 100, &mut rng).unwrap();
        assert_eq!(report.checked, 6, "exhaustive when total <= samples");
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
        assert!(report.passes(1e-4));
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut store = quadratic_store();
        let mut rng = Rng::new(0);
        let broken = |s: &mut ParamStore<f64>| -> Result<f64> {
            let v = ce_loss(s)?;
            // Poison one coordinate of the analytic gradient.
            s.get_mut("w")?.grad.data_mut()[3] += 0.5;
            Ok(v)
        };
        let report = grad_check(&mut store, broken, 100, &mut rng).unwrap();
        assert!(report.max_rel_err > 1e-2, "rel err {}", report.max_rel_err);
        assert!(!report.passes(1e-4));
        let (name, idx) = report.worst.unwrap();
        assert_eq!((name.as_str(), idx), ("w", 3));
    }

    #[test]
    fn frozen_params_are_not_sampled() {
        let mut store = quadratic_store();
        store
            .insert_matrix("frozen", Tensor2::from_vec(1, 2, vec![1.0, 2.0]).unwrap())
            .unwrap();
        store.set_trainable("frozen", false).unwrap();
        let mut rng = Rng::new(1);
        let report = grad_check(&mut store, ce_loss, 1000, &mut rng).unwrap();
        // Only the six coordinates of "w" are eligible.
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn sampling_caps_at_requested_count() {
        let mut store = ParamStore::new();
        let data: Vec<f64> = (0..200).map(|i| (i as f64 / 100.0).sin()).collect();
        store.insert_matrix("big", Tensor2::from_vec(10, 20, data).unwrap()).unwrap();
        let loss = |s: &mut ParamStore<f64>| -> Result<f64> {
            s.zero_grads();
            let mut g = Graph::new();
            let w = g.param(s, "big")?;
            let loss = g.cross_entropy(w, &[0; 10], None)?;
            g.backward(loss)?;
            g.export_grads(s)?;
            Ok(g.value(loss).data()[0])
        };
        let mut rng = Rng::new(2);
        let report = grad_check(&mut store, loss, 25, &mut rng).unwrap();
        assert_eq!(report.checked, 25);
        assert!(report.passes(1e-4));
    }
}
