//! Every differentiable op against central finite differences.

use drgan_core::autodiff::{Graph, NormMode, Var};
use drgan_core::gradcheck::{numeric_grad, relative_error};
use drgan_core::rng::stream;
use drgan_core::Tensor;

const TOL: f64 = 1e-6;

/// Checks d/dx of `sum(op(x, consts) ⊙ r)` for a fixed random weighting `r`.
fn check_unary(name: &str, x: Tensor, op: impl Fn(&mut Graph, Var) -> Var) {
    let mut rng = stream(&[99, x.numel() as u64]);
    let probe = {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = op(&mut g, xv);
        g.value(y).shape().to_vec()
    };
    let r = Tensor::randn(&probe, 1.0, &mut rng);
    let eval = |input: &Tensor, want_grad: bool| -> (f64, Option<Tensor>) {
        let mut g = Graph::new();
        let xv = g.leaf(input.clone(), want_grad);
        let y = op(&mut g, xv);
        let rv = g.constant(r.clone());
        let prod = g.mul(y, rv);
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        let grad = want_grad.then(|| g.backward(loss).get(xv).cloned().unwrap_or_else(|| Tensor::zeros(input.shape())));
        (value, grad)
    };
    let (_, analytic) = eval(&x, true);
    let numeric = numeric_grad(&x, 1e-5, |t| eval(t, false).0);
    let err = relative_error(&analytic.unwrap(), &numeric);
    assert!(err < TOL, "{name}: relative error {err:e}");
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut stream(&[seed]))
}

#[test]
fn elementwise_ops() {
    let other = randn(&[2, 3, 2, 2], 2);
    check_unary("add", randn(&[2, 3, 2, 2], 1), |g, x| {
        let o = g.constant(other.clone());
        g.add(x, o)
    });
    check_unary("sub", randn(&[2, 3, 2, 2], 1), |g, x| {
        let o = g.constant(other.clone());
        g.sub(o, x)
    });
    check_unary("mul", randn(&[2, 3, 2, 2], 1), |g, x| {
        let y = g.mul(x, x);
        g.scale(y, 0.7)
    });
    check_unary("tanh", randn(&[5, 4], 3), |g, x| g.tanh(x));
    check_unary("softplus", randn(&[5, 4], 4).map(|v| 4.0 * v), |g, x| g.softplus(x));
    check_unary("leaky", randn(&[5, 4], 5), |g, x| g.leaky_relu(x, 0.2));
    check_unary("relu", randn(&[5, 4], 6), |g, x| g.relu(x));
    check_unary("abs", randn(&[5, 4], 7), |g, x| g.abs(x));
    check_unary("add_scalar", randn(&[3], 8), |g, x| g.add_scalar(x, 2.0));
}

#[test]
fn broadcasting_ops() {
    let x0 = randn(&[2, 3, 2, 2], 10);
    check_unary("bias", randn(&[3], 11), |g, b| {
        let x = g.constant(x0.clone());
        g.add_bias(x, b)
    });
    check_unary("bias_x", x0.clone(), |g, x| {
        let b = g.constant(Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]));
        g.add_bias(x, b)
    });
    check_unary("affine_gamma", randn(&[2, 3], 12), |g, gm| {
        let x = g.constant(x0.clone());
        let bt = g.constant(Tensor::full(&[2, 3], 0.3));
        g.channel_affine(x, gm, bt)
    });
    check_unary("affine_shared_beta", randn(&[1, 3], 13), |g, bt| {
        let x = g.constant(x0.clone());
        let gm = g.constant(Tensor::full(&[1, 3], 1.5));
        g.channel_affine(x, gm, bt)
    });
    check_unary("affine_x", x0.clone(), |g, x| {
        let gm = g.constant(randn(&[2, 3], 14));
        let bt = g.constant(randn(&[2, 3], 15));
        g.channel_affine(x, gm, bt)
    });
    check_unary("scalar_var", randn(&[1], 16), |g, s| {
        let x = g.constant(x0.clone());
        g.mul_scalar_var(x, s)
    });
}

#[test]
fn convolutions() {
    let w = randn(&[4, 3, 3, 3], 20);
    let bias = randn(&[4], 21);
    let x = randn(&[2, 3, 5, 6], 22);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        check_unary("conv_x", x.clone(), |g, xv| {
            let wv = g.constant(w.clone());
            let bv = g.constant(bias.clone());
            g.conv2d(xv, wv, Some(bv), stride, pad)
        });
        check_unary("conv_w", w.clone(), |g, wv| {
            let xv = g.constant(x.clone());
            g.conv2d(xv, wv, None, stride, pad)
        });
    }
    check_unary("conv_b", bias.clone(), |g, bv| {
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        g.conv2d(xv, wv, Some(bv), 1, 1)
    });
    let w1 = randn(&[2, 3, 1, 1], 23);
    check_unary("pointwise_x", x.clone(), |g, xv| {
        let wv = g.constant(w1.clone());
        g.conv2d(xv, wv, None, 1, 0)
    });
    check_unary("pointwise_w", w1.clone(), |g, wv| {
        let xv = g.constant(x.clone());
        g.conv2d(xv, wv, None, 1, 0)
    });
    let wt = randn(&[3, 2, 3, 3], 24);
    let bt = randn(&[2], 25);
    for (stride, pad, op) in [(2, 1, 1), (1, 1, 0)] {
        check_unary("convt_x", x.clone(), |g, xv| {
            let wv = g.constant(wt.clone());
            let bv = g.constant(bt.clone());
            g.conv_transpose2d(xv, wv, Some(bv), stride, pad, op)
        });
        check_unary("convt_w", wt.clone(), |g, wv| {
            let xv = g.constant(x.clone());
            g.conv_transpose2d(xv, wv, None, stride, pad, op)
        });
    }
    check_unary("convt_b", bt.clone(), |g, bv| {
        let xv = g.constant(x.clone());
        let wv = g.constant(wt.clone());
        g.conv_transpose2d(xv, wv, Some(bv), 2, 1, 1)
    });
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    let w = randn(&[3, 2, 3, 3], 30);
    let x = randn(&[1, 2, 8, 8], 31);
    let y = randn(&[1, 3, 4, 4], 32);
    let mut g = Graph::new();
    let (xv, wv, yv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(y.clone()));
    let cx = g.conv2d(xv, wv, None, 2, 1);
    // transposed weight layout [Ci=3, Co=2, k, k] is the same buffer
    let ty = g.conv_transpose2d(yv, wv, None, 2, 1, 1);
    let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn normalization() {
    check_unary("batchnorm", randn(&[3, 2, 2, 3], 40), |g, x| g.normalize(x, NormMode::Batch { eps: 1e-5 }));
    check_unary("instancenorm", randn(&[2, 3, 3, 3], 41), |g, x| g.normalize(x, NormMode::InstanceFloor { eps: 1e-5 }));
}

#[test]
fn matrix_ops() {
    let b = randn(&[2, 3, 4], 50);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let ashape = if ta { [2, 3, 5] } else { [2, 5, 3] };
        let bt = if tb { randn(&[2, 4, 3], 51) } else { b.clone() };
        check_unary("bmm_a", randn(&ashape, 52), |g, a| {
            let bv = g.constant(bt.clone());
            g.bmm(a, bv, ta, tb)
        });
        let at = randn(&ashape, 53);
        check_unary("bmm_b", bt.clone(), |g, bv| {
            let a = g.constant(at.clone());
            g.bmm(a, bv, ta, tb)
        });
    }
    check_unary("softmax", randn(&[2, 3, 4], 54), |g, x| g.softmax_rows(x));
    check_unary("reshape", randn(&[2, 3, 4], 55), |g, x| g.reshape(x, &[6, 4]));
}

#[test]
fn structural_ops() {
    let other = randn(&[2, 1, 2, 2], 60);
    check_unary("concat", randn(&[2, 2, 2, 2], 61), |g, x| {
        let o = g.constant(other.clone());
        g.concat(&[o, x])
    });
    check_unary("narrow", randn(&[2, 5], 62), |g, x| g.narrow(x, 1, 3));
    check_unary("avgpool", randn(&[1, 2, 4, 4], 63), |g, x| g.avg_pool2(x));
    check_unary("gap", randn(&[2, 2, 3, 3], 64), |g, x| g.global_avg_pool(x));
    check_unary("mean", randn(&[2, 2, 3], 65), |g, x| g.mean(x));
    check_unary("l2norm", randn(&[3, 2, 2], 66), |g, x| g.row_l2_norm(x));
}

#[test]
fn focal_gradient() {
    let labels = [0usize, 3, 4, 1];
    let alpha = [1.0, 0.5, 2.0, 1.5, 0.8];
    for gamma in [0.0, 0.5, 2.0] {
        check_unary("focal", randn(&[4, 5], 70 + gamma as u64), |g, z| g.focal(z, &labels, gamma, &alpha));
    }
}
