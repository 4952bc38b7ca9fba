//! Numerical gradient checking against central finite differences.

use super::{Graph, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub tol: f64,
    /// Op name of the first non-finite forward value, when any.
    pub non_finite_op: Option<&'static str>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite_op.is_none() && self.max_rel_err <= self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.non_finite_op {
            Some(op) => write!(f, "FAIL non-finite value in op '{op}'"),
            None => write!(
                f,
                "{} max rel err {:.3e} (tol {:.1e}) at element {}",
                if self.passed() { "ok" } else { "FAIL" },
                self.max_rel_err,
                self.tol,
                self.worst_index
            ),
        }
    }
}

/// Compares the reverse-mode gradient of a scalar-valued `f` with central
/// finite differences at `x`. `f` must be deterministic (no noise ops).
/// The difference quotient is accumulated in f64.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&Graph, &Tensor) -> Tensor,
{
    let graph = Graph::new();
    let leaf = graph.leaf(x, true);
    let y = f(&graph, &leaf);
    assert_eq!(y.numel(), 1, "grad_check: f must be scalar-valued, got {:?}", y.shape());
    if let Some((_, op)) = graph.find_non_finite() {
        return GradCheckReport { max_rel_err: f64::INFINITY, worst_index: 0, tol, non_finite_op: Some(op) };
    }
    graph.backward(&y);
    let ad = graph.grad(&leaf).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    let base = x.data().to_vec();
    for i in 0..x.numel() {
        let eval = |delta: f64| -> f64 {
            let mut d = base.clone();
            d[i] = (d[i] as f64 + delta) as f32;
            let g = Graph::inference();
            let t = Tensor::new(d, x.shape());
            f(&g, &t).item() as f64
        };
        let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
        let a = ad[i] as f64;
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    GradCheckReport { max_rel_err: max_rel, worst_index: worst, tol, non_finite_op: None }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        // f(x) = sum(x^2), grad = 2x.
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3]);
        let rep = grad_check(|g, t| g.sum_all(&g.mul(t, t)), &x, 1e-3, 1e-4);
        assert!(rep.passed(), "{rep}");
        let g = Graph::new();
        let leaf = g.leaf(&x, true);
        let y = g.sum_all(&g.mul(&leaf, &leaf));
        g.backward(&y);
        let grad = g.grad(&leaf).unwrap();
        assert_eq!(grad.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::new(vec![1.5, -0.5], &[2]);
        let g = Graph::new();
        let leaf = g.leaf(&x, true);
        let y = g.sum_all(&g.mul(&leaf.detach(), &leaf.detach()));
        g.backward(&y);
        assert!(g.grad(&leaf).is_none());
    }
}
