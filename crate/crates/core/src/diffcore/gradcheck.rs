use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub loss: f64,
    pub entries: Vec<GradEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradEntry {
    pub fn rel_err(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

impl GradCheckReport {
    /// Entries off by more than `rel_tol` relative and `abs_tol` absolute.
    /// The absolute slack covers the finite-difference rounding floor, which
    /// is roughly `ulp(loss) / eps`.
    pub fn failures(&self, rel_tol: f64, abs_tol: f64) -> Vec<&GradEntry> {
        self.entries
            .iter()
            .filter(|e| e.rel_err() >= rel_tol && (e.analytic - e.numeric).abs() >= abs_tol)
            .collect()
    }

    pub fn worst_entry(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err().total_cmp(&b.rel_err()))
    }
}

/// `|a - f| / max(1e-8, |a| + |f|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compare reverse-mode gradients against central differences for every
/// scalar of every parameter. `loss` must rebuild the same deterministic
/// computation from the store each time it is called.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    store.zero_grad();
    let base = {
        let mut g = Graph::new();
        let root = loss(&mut g, store)?;
        g.backward(root, store)?;
        g.scalar(root)
    };
    if !base.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {base}")));
    }
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data.clone()).collect();
    if analytic.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite analytic gradient".into()));
    }

    let mut eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let root = loss(&mut g, s)?;
        let v = g.scalar(root);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        loss: base,
        entries: Vec::new(),
    };
    for (id, grads) in ids.into_iter().zip(&analytic) {
        for (k, &a) in grads.iter().enumerate() {
            let orig = store.value(id).data[k];
            store.get_mut(id).value.data[k] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).value.data[k] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).value.data[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.checked += 1;
            report.entries.push(GradEntry {
                param: store.get(id).name.clone(),
                index: k,
                analytic: a,
                numeric,
            });
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tensor::Tensor;

    #[test]
    fn quadratic_loss_is_exact() {
        let mut store = ParamStore::new();
        let w = store
            .insert(
                "w",
                Tensor::from_vec(2, 2, vec![0.9, -0.6, 0.7, -0.8]).unwrap(),
            )
            .unwrap();
        let report = grad_check(&mut store, 1e-6, |g, s| {
            let wn = g.param(s, w);
            let sq = g.mul(wn, wn)?;
            let ones = g.input(Tensor::from_vec(2, 1, vec![1.0; 2]).unwrap());
            let rows = g.matmul(sq, ones)?;
            let ones_r = g.input(Tensor::row_vector(vec![1.0; 2]));
            g.matmul(ones_r, rows)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
        for (a, v) in store.grad(w).data.iter().zip(&store.value(w).data) {
            assert_eq!(*a, 2.0 * v);
        }
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut store = ParamStore::new();
        let w = store
            .insert("w", Tensor::row_vector(vec![1.0, 2.0]))
            .unwrap();
        let report = grad_check(&mut store, 1e-6, |g, s| {
            let wn = g.param(s, w);
            let zero = g.scale(wn, 0.0);
            let c = g.input(Tensor::row_vector(vec![3.0, 4.0]));
            let sum = g.add(zero, c)?;
            g.cross_entropy(sum, 0)
        })
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert!(store.grad(w).data.iter().all(|&v| v == 0.0));
        assert_eq!(report.checked, 2);
        assert!(report.failures(1e-12, 0.0).is_empty());
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        let w = store
            .insert("w", Tensor::row_vector(vec![f64::NAN]))
            .unwrap();
        let err = grad_check(&mut store, 1e-6, |g, s| Ok(g.param(s, w))).unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 2.1).abs() < 1e-15);
    }
}
