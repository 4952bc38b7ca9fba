//! Finite-difference coverage for every registered op.
//!
//! Each entry builds a scalar function exercising one op and runs
//! [`grad_check`] across seeds, with inputs sampled away from the op's
//! non-differentiable points. The Heaviside step is excluded from the
//! finite-difference comparison by construction (its pseudo-derivative is
//! deliberately not the true derivative); its chain rule is asserted
//! analytically instead.

use super::{grad_check, GradCheckReport, Graph, Tensor};
use crate::rng::Streams;
use rand::Rng;

pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| lo + (hi - lo) * rng.random::<f32>())
}

/// Uniform samples kept at least `margin` away from each point in `avoid`.
fn rand_away(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32, avoid: &[f32], margin: f32) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v = lo + (hi - lo) * rng.random::<f32>();
        if avoid.iter().all(|&a| (v - a).abs() > margin) {
            break v;
        }
    })
}

fn worst(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    if b.non_finite_op.is_some() || b.max_rel_err > a.max_rel_err {
        b
    } else {
        a
    }
}

/// Runs the op-level gradient suite over `seeds` seeds. Every entry must
/// pass at tol 1e-3 for the engine to be considered healthy.
pub fn op_gradient_suite(streams: &Streams, seeds: u64) -> Vec<SuiteEntry> {
    let mut entries: Vec<SuiteEntry> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut(&mut rand_chacha::ChaCha8Rng) -> GradCheckReport| {
        let mut acc: Option<GradCheckReport> = None;
        for s in 0..seeds {
            let mut rng = streams.stream(name, s);
            let rep = f(&mut rng);
            acc = Some(match acc {
                None => rep,
                Some(prev) => worst(prev, rep),
            });
        }
        entries.push(SuiteEntry { name, report: acc.unwrap() });
    };

    run("add", &mut |rng| {
        let x = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let c = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.add(t, &c)), &x, EPS, TOL)
    });
    run("add_broadcast_rhs", &mut |rng| {
        let x = rand_tensor(rng, &[4], -1.0, 1.0);
        let lhs = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.mul(&g.add(&g.leaf(&lhs, false), t), &g.leaf(&lhs, false))), &x, EPS, TOL)
    });
    run("sub", &mut |rng| {
        let x = rand_tensor(rng, &[2, 3], -1.0, 1.0);
        let c = rand_tensor(rng, &[3], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.mul(&g.sub(t, &c), &g.sub(t, &c))), &x, EPS, TOL)
    });
    run("mul", &mut |rng| {
        let x = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let c = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.mul(t, &g.mul(t, &c))), &x, EPS, TOL)
    });
    run("mul_broadcast_rhs_grad", &mut |rng| {
        let x = rand_tensor(rng, &[4], -1.0, 1.0);
        let lhs = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.mul(&g.leaf(&lhs, false), t)), &x, EPS, TOL)
    });
    run("div", &mut |rng| {
        let x = rand_tensor(rng, &[3, 4], 0.5, 2.0);
        let num = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.div(&g.leaf(&num, false), t)), &x, EPS, TOL)
    });
    run("add_scalar", &mut |rng| {
        let x = rand_tensor(rng, &[5], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.mul(&g.add_scalar(t, 0.7), &g.add_scalar(t, 0.7))), &x, EPS, TOL)
    });
    run("mul_scalar", &mut |rng| {
        let x = rand_tensor(rng, &[5], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.mul(&g.mul_scalar(t, -1.3), t)), &x, EPS, TOL)
    });
    run("sub_from_scalar", &mut |rng| {
        let x = rand_tensor(rng, &[5], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.mul(&g.sub_from_scalar(1.0, t), t)), &x, EPS, TOL)
    });
    run("pow_scalar", &mut |rng| {
        let x = rand_tensor(rng, &[5], 0.2, 2.0);
        grad_check(|g, t| g.sum_all(&g.pow_scalar(t, 0.25)), &x, EPS, TOL)
    });
    run("max_scalar", &mut |rng| {
        let x = rand_away(rng, &[8], -1.0, 1.0, &[0.2], 0.05);
        grad_check(|g, t| g.sum_all(&g.mul(&g.max_scalar(t, 0.2), t)), &x, EPS, TOL)
    });
    run("min_scalar", &mut |rng| {
        let x = rand_away(rng, &[8], -1.0, 1.0, &[0.1], 0.05);
        grad_check(|g, t| g.sum_all(&g.mul(&g.min_scalar(t, 0.1), t)), &x, EPS, TOL)
    });
    run("exp", &mut |rng| {
        let x = rand_tensor(rng, &[6], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.exp(t)), &x, EPS, TOL)
    });
    run("log", &mut |rng| {
        let x = rand_tensor(rng, &[6], 0.3, 2.0);
        grad_check(|g, t| g.sum_all(&g.log(t)), &x, EPS, TOL)
    });
    run("sqrt", &mut |rng| {
        let x = rand_tensor(rng, &[6], 0.3, 2.0);
        grad_check(|g, t| g.sum_all(&g.sqrt(t)), &x, EPS, TOL)
    });
    run("sigmoid", &mut |rng| {
        let x = rand_tensor(rng, &[6], -2.0, 2.0);
        grad_check(|g, t| g.sum_all(&g.sigmoid(t)), &x, EPS, TOL)
    });
    run("tanh", &mut |rng| {
        let x = rand_tensor(rng, &[6], -2.0, 2.0);
        grad_check(|g, t| g.sum_all(&g.tanh(t)), &x, EPS, TOL)
    });
    run("relu", &mut |rng| {
        let x = rand_away(rng, &[8], -1.0, 1.0, &[0.0], 0.05);
        grad_check(|g, t| g.sum_all(&g.mul(&g.relu(t), t)), &x, EPS, TOL)
    });
    run("rectified_tanh_smooth_branch", &mut |rng| {
        let x = rand_tensor(rng, &[6], 0.1, 2.0);
        grad_check(|g, t| g.sum_all(&g.rectified_tanh(t)), &x, EPS, TOL)
    });
    run("softmax_axis0", &mut |rng| {
        let x = rand_tensor(rng, &[4, 3], -2.0, 2.0);
        let w = rand_tensor(rng, &[4, 3], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.mul(&g.softmax(t, 0), &g.leaf(&w, false))), &x, EPS, TOL)
    });
    run("softmax_axis1", &mut |rng| {
        let x = rand_tensor(rng, &[3, 5], -2.0, 2.0);
        let w = rand_tensor(rng, &[3, 5], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.mul(&g.softmax(t, 1), &g.leaf(&w, false))), &x, EPS, TOL)
    });
    run("sum_axis", &mut |rng| {
        let x = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = rand_tensor(rng, &[4], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.mul(&g.sum_axis(t, 0), &g.leaf(&w, false))), &x, EPS, TOL)
    });
    run("mean_axis", &mut |rng| {
        let x = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = rand_tensor(rng, &[3], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.mul(&g.mean_axis(t, 1), &g.leaf(&w, false))), &x, EPS, TOL)
    });
    run("mean_all", &mut |rng| {
        let x = rand_tensor(rng, &[7], -1.0, 1.0);
        grad_check(|g, t| g.mean_all(&g.mul(t, t)), &x, EPS, TOL)
    });
    run("concat", &mut |rng| {
        let x = rand_tensor(rng, &[2, 3], -1.0, 1.0);
        let other = rand_tensor(rng, &[2, 2], -1.0, 1.0);
        let w = rand_tensor(rng, &[2, 5], -1.0, 1.0);
        grad_check(
            |g, t| g.sum_all(&g.mul(&g.concat(&[t, &g.leaf(&other, false)], 1), &g.leaf(&w, false))),
            &x,
            EPS,
            TOL,
        )
    });
    run("slice", &mut |rng| {
        let x = rand_tensor(rng, &[4, 3], -1.0, 1.0);
        let w = rand_tensor(rng, &[2, 3], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.mul(&g.slice(t, 0, 1, 2), &g.leaf(&w, false))), &x, EPS, TOL)
    });
    run("reshape", &mut |rng| {
        let x = rand_tensor(rng, &[2, 6], -1.0, 1.0);
        let w = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.mul(&g.reshape(t, &[3, 4]), &g.leaf(&w, false))), &x, EPS, TOL)
    });
    run("expand_leading", &mut |rng| {
        let x = rand_tensor(rng, &[5], -1.0, 1.0);
        let w = rand_tensor(rng, &[3, 5], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.mul(&g.expand_leading(t, 3), &g.leaf(&w, false))), &x, EPS, TOL)
    });
    run("matmul_lhs", &mut |rng| {
        let x = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = rand_tensor(rng, &[4, 2], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.matmul(t, &g.leaf(&w, false))), &x, EPS, TOL)
    });
    run("matmul_rhs", &mut |rng| {
        let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let x = rand_tensor(rng, &[4, 2], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.matmul(&g.leaf(&a, false), t)), &x, EPS, TOL)
    });
    run("matmul_batched", &mut |rng| {
        let x = rand_tensor(rng, &[2, 3, 4], -1.0, 1.0);
        let w = rand_tensor(rng, &[4, 2], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.matmul(t, &g.leaf(&w, false))), &x, EPS, TOL)
    });
    run("transpose2", &mut |rng| {
        let x = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = rand_tensor(rng, &[4, 3], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.mul(&g.transpose2(t), &g.leaf(&w, false))), &x, EPS, TOL)
    });
    run("conv2d_input_s1", &mut |rng| {
        let x = rand_tensor(rng, &[1, 2, 5, 5], -1.0, 1.0);
        let w = rand_tensor(rng, &[3, 2, 3, 3], -0.5, 0.5);
        let b = rand_tensor(rng, &[3], -0.5, 0.5);
        grad_check(|g, t| g.sum_all(&g.conv2d(t, &g.leaf(&w, false), Some(&g.leaf(&b, false)), 1, 1)), &x, EPS, TOL)
    });
    run("conv2d_kernel_s2", &mut |rng| {
        let a = rand_tensor(rng, &[2, 2, 6, 6], -1.0, 1.0);
        let x = rand_tensor(rng, &[3, 2, 3, 3], -0.5, 0.5);
        grad_check(|g, t| g.sum_all(&g.conv2d(&g.leaf(&a, false), t, None, 2, 1)), &x, EPS, TOL)
    });
    run("conv2d_bias", &mut |rng| {
        let a = rand_tensor(rng, &[1, 2, 4, 4], -1.0, 1.0);
        let w = rand_tensor(rng, &[2, 2, 3, 3], -0.5, 0.5);
        let x = rand_tensor(rng, &[2], -0.5, 0.5);
        grad_check(
            |g, t| {
                let y = g.conv2d(&g.leaf(&a, false), &g.leaf(&w, false), Some(t), 1, 1);
                g.sum_all(&g.mul(&y, &y))
            },
            &x,
            EPS,
            TOL,
        )
    });
    run("conv2d_transposed_input", &mut |rng| {
        let x = rand_tensor(rng, &[1, 3, 3, 3], -1.0, 1.0);
        let w = rand_tensor(rng, &[3, 2, 4, 4], -0.5, 0.5);
        grad_check(|g, t| g.sum_all(&g.conv2d_transposed(t, &g.leaf(&w, false), None, 2, 1)), &x, EPS, TOL)
    });
    run("conv2d_transposed_kernel", &mut |rng| {
        let a = rand_tensor(rng, &[2, 3, 3, 3], -1.0, 1.0);
        let x = rand_tensor(rng, &[3, 2, 4, 4], -0.5, 0.5);
        let b = rand_tensor(rng, &[2], -0.2, 0.2);
        grad_check(
            |g, t| g.sum_all(&g.conv2d_transposed(&g.leaf(&a, false), t, Some(&g.leaf(&b, false)), 2, 1)),
            &x,
            EPS,
            TOL,
        )
    });
    run("layer_norm_input", &mut |rng| {
        let x = rand_tensor(rng, &[3, 6], -1.0, 1.0);
        let gain = rand_tensor(rng, &[6], 0.5, 1.5);
        let bias = rand_tensor(rng, &[6], -0.5, 0.5);
        let w = rand_tensor(rng, &[3, 6], -1.0, 1.0);
        grad_check(
            |g, t| {
                g.sum_all(&g.mul(&g.layer_norm(t, &g.leaf(&gain, false), &g.leaf(&bias, false), 1e-5), &g.leaf(&w, false)))
            },
            &x,
            EPS,
            TOL,
        )
    });
    run("layer_norm_gain", &mut |rng| {
        let a = rand_tensor(rng, &[3, 6], -1.0, 1.0);
        let x = rand_tensor(rng, &[6], 0.5, 1.5);
        let bias = rand_tensor(rng, &[6], -0.5, 0.5);
        grad_check(
            |g, t| {
                let y = g.layer_norm(&g.leaf(&a, false), t, &g.leaf(&bias, false), 1e-5);
                g.sum_all(&g.mul(&y, &y))
            },
            &x,
            EPS,
            TOL,
        )
    });
    run("scale_rows", &mut |rng| {
        let x = rand_tensor(rng, &[3, 5], -1.0, 1.0);
        let s = rand_tensor(rng, &[3], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.mul(&g.scale_rows(t, &g.leaf(&s, false)), t)), &x, EPS, TOL)
    });
    run("scale_rows_scales", &mut |rng| {
        let a = rand_tensor(rng, &[3, 5], -1.0, 1.0);
        let x = rand_tensor(rng, &[3], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.scale_rows(&g.leaf(&a, false), t)), &x, EPS, TOL)
    });
    run("outer_spatial_q", &mut |rng| {
        let x = rand_tensor(rng, &[2, 3, 3], -1.0, 1.0);
        let v = rand_tensor(rng, &[2, 4], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.mul(&g.outer_spatial(t, &g.leaf(&v, false)), &g.outer_spatial(t, &g.leaf(&v, false)))), &x, EPS, TOL)
    });
    run("outer_spatial_v", &mut |rng| {
        let q = rand_tensor(rng, &[2, 3, 3], -1.0, 1.0);
        let x = rand_tensor(rng, &[2, 4], -1.0, 1.0);
        grad_check(|g, t| g.sum_all(&g.outer_spatial(&g.leaf(&q, false), t)), &x, EPS, TOL)
    });
    run("outer_diff", &mut |rng| {
        let x = rand_tensor(rng, &[4], -1.0, 1.0);
        let b = rand_tensor(rng, &[3], -1.0, 1.0);
        grad_check(
            |g, t| {
                let d = g.outer_diff(t, &g.leaf(&b, false));
                g.sum_all(&g.mul(&d, &d))
            },
            &x,
            EPS,
            TOL,
        )
    });
    run("outer_diff_rhs", &mut |rng| {
        let a = rand_tensor(rng, &[4], -1.0, 1.0);
        let x = rand_tensor(rng, &[3], -1.0, 1.0);
        grad_check(
            |g, t| {
                let d = g.outer_diff(&g.leaf(&a, false), t);
                g.sum_all(&g.mul(&d, &d))
            },
            &x,
            EPS,
            TOL,
        )
    });
    run("render_gaussian_mu", &mut |rng| {
        let x = rand_tensor(rng, &[2, 2], -0.6, 0.6);
        let sigma = rand_tensor(rng, &[2], 0.3, 0.8);
        let w = rand_tensor(rng, &[2, 5, 5], -1.0, 1.0);
        grad_check(
            |g, t| g.sum_all(&g.mul(&g.render_gaussian(t, &g.leaf(&sigma, false), 5, 5, 0.2), &g.leaf(&w, false))),
            &x,
            EPS,
            TOL,
        )
    });
    run("render_gaussian_sigma", &mut |rng| {
        let mu = rand_tensor(rng, &[2, 2], -0.6, 0.6);
        let x = rand_tensor(rng, &[2], 0.35, 0.8);
        let w = rand_tensor(rng, &[2, 5, 5], -1.0, 1.0);
        grad_check(
            |g, t| g.sum_all(&g.mul(&g.render_gaussian(&g.leaf(&mu, false), t, 5, 5, 0.2), &g.leaf(&w, false))),
            &x,
            EPS,
            TOL,
        )
    });
    run("bce_pred", &mut |rng| {
        let x = rand_tensor(rng, &[4, 4], 0.05, 0.95);
        let y = rand_tensor(rng, &[4, 4], 0.0, 1.0);
        grad_check(|g, t| g.bce(t, &g.leaf(&y, false)), &x, EPS, TOL)
    });
    run("bce_of_sigmoid_linear", &mut |rng| {
        // BCE(sigmoid(W x), target) on a random 4x4 system, checked w.r.t. W.
        let xin = rand_tensor(rng, &[4, 4], -1.0, 1.0);
        let target = rand_tensor(rng, &[4, 4], 0.0, 1.0);
        let w = rand_tensor(rng, &[4, 4], -0.8, 0.8);
        grad_check(
            |g, t| g.bce(&g.sigmoid(&g.matmul(&g.leaf(&xin, false), t)), &g.leaf(&target, false)),
            &w,
            EPS,
            TOL,
        )
    });

    entries
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    /// Module invariant: every registered op passes grad_check at tol 1e-3
    /// on random small shapes, 50 seeds.
    #[test]
    fn all_ops_pass_grad_check_50_seeds() {
        let streams = Streams::new(7);
        for entry in op_gradient_suite(&streams, 50) {
            assert!(entry.report.passed(), "{}: {}", entry.name, entry.report);
        }
    }

    /// The Heaviside pseudo-derivative feeds the upstream gradient through
    /// unchanged even where the true derivative is zero.
    #[test]
    fn heaviside_passes_unit_pseudo_gradient() {
        let x = Tensor::new(vec![-3.0, -0.5, 0.4, 2.0], &[4]);
        let g = Graph::new();
        let leaf = g.leaf(&x, true);
        let y = g.sum_all(&g.heaviside(&leaf));
        assert_eq!(y.item(), 2.0);
        g.backward(&y);
        assert_eq!(g.grad(&leaf).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    /// Reverse gradient through the rectified tanh at x=0.5 equals
    /// (1 - tanh(0.5)^2) * upstream.
    #[test]
    fn rectified_tanh_chain_value() {
        let x = Tensor::new(vec![0.5], &[1]);
        let g = Graph::new();
        let leaf = g.leaf(&x, true);
        let y = g.mul_scalar(&g.rectified_tanh(&leaf), 3.0);
        g.backward(&g.sum_all(&y));
        let got = g.grad(&leaf).unwrap().item();
        let want = (1.0 - 0.5f32.tanh().powi(2)) * 3.0;
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    }
}
