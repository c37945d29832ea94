//! Central finite-difference oracle for every autodiff operation.
//!
//! Each check builds a scalar loss from a parameter vector, takes the
//! analytic gradient by backward(), then recomputes every coordinate by
//! central differences (h = 1e-3) on the same forward path. The oracle
//! never touches the backward implementation it is judging.

use crate::autodiff::{self as ad, Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const OP_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} max_rel_err={:.3e} (tol {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance
        )
    }
}

/// Checks d(loss)/d(x) for `f` against central differences at `x0`.
pub fn check_scalar_fn(
    name: &str,
    x0: &[f64],
    shape: &[usize],
    tolerance: f64,
    f: impl Fn(&Tensor<f64>) -> Tensor<f64>,
) -> CheckResult {
    let x = Tensor::param(x0.to_vec(), shape);
    let loss = f(&x);
    loss.backward().expect("gradcheck loss must be scalar");
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x0.len()]);

    let mut max_rel = 0.0f64;
    for i in 0..x0.len() {
        let mut plus = x0.to_vec();
        plus[i] += FD_STEP;
        let mut minus = x0.to_vec();
        minus[i] -= FD_STEP;
        let (fp, fm) = ad::no_grad(|| {
            let tp = Tensor::new(plus, shape);
            let tm = Tensor::new(minus, shape);
            (f(&tp).value(), f(&tm).value())
        });
        let fd = (fp - fm) / (2.0 * FD_STEP);
        let a = analytic[i];
        let denom = a.abs().max(fd.abs()).max(1e-4);
        let rel = (a - fd).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    CheckResult { name: name.to_string(), max_rel_err: max_rel, tolerance, pass: max_rel <= tolerance }
}

fn randvec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Projects a tensor to a well-conditioned scalar with fixed random weights.
fn project(y: &Tensor<f64>, r: &[f64]) -> Tensor<f64> {
    let rt = Tensor::new(r[..y.len()].to_vec(), &y.shape());
    ad::sum_all(&ad::mul(y, &rt).unwrap())
}

/// The full per-op finite-difference suite at the 1e-3 tolerance.
/// `include_corrupted` appends a deliberately wrong backward as a
/// harness sanity fixture; it must FAIL.
pub fn suite(seed: u64, include_corrupted: bool) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let proj = randvec(&mut rng, 4096, -1.0, 1.0);

    // conv2d: grads wrt input, weight, bias
    {
        let x0 = randvec(&mut rng, 2 * 3 * 6 * 6, -1.0, 1.0);
        let w0 = randvec(&mut rng, 4 * 3 * 3 * 3, -0.5, 0.5);
        let b0 = randvec(&mut rng, 4, -0.5, 0.5);
        let (w0c, b0c, x0c) = (w0.clone(), b0.clone(), x0.clone());
        let p = proj.clone();
        out.push(check_scalar_fn("conv2d/input", &x0, &[2, 3, 6, 6], OP_TOLERANCE, move |x| {
            let w = Tensor::new(w0c.clone(), &[4, 3, 3, 3]);
            let b = Tensor::new(b0c.clone(), &[4]);
            project(&ad::conv2d(x, &w, &b, 2, 1).unwrap(), &p)
        }));
        let (x0c2, b0c2, p2) = (x0c.clone(), b0.clone(), proj.clone());
        out.push(check_scalar_fn("conv2d/weight", &w0, &[4, 3, 3, 3], OP_TOLERANCE, move |w| {
            let x = Tensor::new(x0c2.clone(), &[2, 3, 6, 6]);
            let b = Tensor::new(b0c2.clone(), &[4]);
            project(&ad::conv2d(&x, w, &b, 2, 1).unwrap(), &p2)
        }));
        let (x0c3, w0c3, p3) = (x0c, w0, proj.clone());
        out.push(check_scalar_fn("conv2d/bias", &b0, &[4], OP_TOLERANCE, move |b| {
            let x = Tensor::new(x0c3.clone(), &[2, 3, 6, 6]);
            let w = Tensor::new(w0c3.clone(), &[4, 3, 3, 3]);
            project(&ad::conv2d(&x, &w, b, 2, 1).unwrap(), &p3)
        }));
    }

    // conv2d_transpose: grads wrt input, weight
    {
        let x0 = randvec(&mut rng, 2 * 3 * 4 * 4, -1.0, 1.0);
        let w0 = randvec(&mut rng, 3 * 2 * 4 * 4, -0.5, 0.5);
        let (w0c, p) = (w0.clone(), proj.clone());
        out.push(check_scalar_fn(
            "conv2d_transpose/input",
            &x0,
            &[2, 3, 4, 4],
            OP_TOLERANCE,
            move |x| {
                let w = Tensor::new(w0c.clone(), &[3, 2, 4, 4]);
                let b = Tensor::zeros(&[2]);
                project(&ad::conv2d_transpose(x, &w, &b, 2, 1).unwrap(), &p)
            },
        ));
        let (x0c, p2) = (x0, proj.clone());
        out.push(check_scalar_fn(
            "conv2d_transpose/weight",
            &w0,
            &[3, 2, 4, 4],
            OP_TOLERANCE,
            move |w| {
                let x = Tensor::new(x0c.clone(), &[2, 3, 4, 4]);
                let b = Tensor::zeros(&[2]);
                project(&ad::conv2d_transpose(&x, w, &b, 2, 1).unwrap(), &p2)
            },
        ));
    }

    // batchnorm train/eval, input and affine params
    {
        let x0 = randvec(&mut rng, 4 * 3 * 2 * 2, -2.0, 2.0);
        let g0 = randvec(&mut rng, 3, 0.5, 1.5);
        let b0 = randvec(&mut rng, 3, -0.5, 0.5);
        for mode in [Mode::Train, Mode::Eval] {
            let tag = if mode == Mode::Train { "train" } else { "eval" };
            let (g0c, b0c, p) = (g0.clone(), b0.clone(), proj.clone());
            out.push(check_scalar_fn(
                &format!("batchnorm[{tag}]/input"),
                &x0,
                &[4, 3, 2, 2],
                OP_TOLERANCE,
                move |x| {
                    let gamma = Tensor::new(g0c.clone(), &[3]);
                    let beta = Tensor::new(b0c.clone(), &[3]);
                    let rm = Tensor::new(vec![0.1, -0.2, 0.3], &[3]);
                    let rv = Tensor::new(vec![1.0, 0.5, 2.0], &[3]);
                    project(&ad::batchnorm(x, &gamma, &beta, &rm, &rv, mode).unwrap(), &p)
                },
            ));
            let (x0c, b0c2, p2) = (x0.clone(), b0.clone(), proj.clone());
            out.push(check_scalar_fn(
                &format!("batchnorm[{tag}]/gamma"),
                &g0,
                &[3],
                OP_TOLERANCE,
                move |gamma| {
                    let x = Tensor::new(x0c.clone(), &[4, 3, 2, 2]);
                    let beta = Tensor::new(b0c2.clone(), &[3]);
                    let rm = Tensor::new(vec![0.1, -0.2, 0.3], &[3]);
                    let rv = Tensor::new(vec![1.0, 0.5, 2.0], &[3]);
                    project(&ad::batchnorm(&x, gamma, &beta, &rm, &rv, mode).unwrap(), &p2)
                },
            ));
        }
    }

    // relu: keep inputs away from the kink
    {
        let x0: Vec<f64> =
            randvec(&mut rng, 24, -1.0, 1.0).iter().map(|v| v + v.signum() * 0.1).collect();
        let p = proj.clone();
        out.push(check_scalar_fn("relu", &x0, &[24], OP_TOLERANCE, move |x| {
            project(&ad::relu(x), &p)
        }));
    }

    // sigmoid
    {
        let x0 = randvec(&mut rng, 24, -2.0, 2.0);
        let p = proj.clone();
        out.push(check_scalar_fn("sigmoid", &x0, &[24], OP_TOLERANCE, move |x| {
            project(&ad::sigmoid(x), &p)
        }));
    }

    // maxpool: perturbed distinct values keep the argmax stable
    {
        let mut x0 = randvec(&mut rng, 2 * 2 * 4 * 4, -1.0, 1.0);
        for (i, v) in x0.iter_mut().enumerate() {
            *v += (i as f64) * 0.01;
        }
        let p = proj.clone();
        out.push(check_scalar_fn("maxpool2d", &x0, &[2, 2, 4, 4], OP_TOLERANCE, move |x| {
            project(&ad::maxpool2d(x, 2, 2).unwrap(), &p)
        }));
    }

    // linear: input and weight
    {
        let x0 = randvec(&mut rng, 3 * 5, -1.0, 1.0);
        let w0 = randvec(&mut rng, 4 * 5, -0.5, 0.5);
        let b0 = randvec(&mut rng, 4, -0.5, 0.5);
        let (w0c, b0c, p) = (w0.clone(), b0.clone(), proj.clone());
        out.push(check_scalar_fn("linear/input", &x0, &[3, 5], OP_TOLERANCE, move |x| {
            let w = Tensor::new(w0c.clone(), &[4, 5]);
            let b = Tensor::new(b0c.clone(), &[4]);
            project(&ad::linear(x, &w, &b).unwrap(), &p)
        }));
        let (x0c, b0c2, p2) = (x0, b0, proj.clone());
        out.push(check_scalar_fn("linear/weight", &w0, &[4, 5], OP_TOLERANCE, move |w| {
            let x = Tensor::new(x0c.clone(), &[3, 5]);
            let b = Tensor::new(b0c2.clone(), &[4]);
            project(&ad::linear(&x, w, &b).unwrap(), &p2)
        }));
    }

    // softmax / log_softmax along axis 1
    {
        let x0 = randvec(&mut rng, 2 * 5 * 3, -1.5, 1.5);
        let p = proj.clone();
        out.push(check_scalar_fn("softmax", &x0, &[2, 5, 3], OP_TOLERANCE, move |x| {
            project(&ad::softmax(x, 1).unwrap(), &p)
        }));
        let x1 = randvec(&mut rng, 2 * 5 * 3, -1.5, 1.5);
        let p2 = proj.clone();
        out.push(check_scalar_fn("log_softmax", &x1, &[2, 5, 3], OP_TOLERANCE, move |x| {
            project(&ad::log_softmax(x, 1).unwrap(), &p2)
        }));
    }

    // l1_loss: keep |a - b| away from the non-smooth point
    {
        let b0: Vec<f64> = randvec(&mut rng, 16, -1.0, 1.0);
        let x0: Vec<f64> =
            b0.iter().map(|v| v + 0.1 + rng.gen_range(0.0f64..0.5)).collect();
        let b0c = b0.clone();
        out.push(check_scalar_fn("l1_loss", &x0, &[16], OP_TOLERANCE, move |x| {
            let b = Tensor::new(b0c.clone(), &[16]);
            ad::l1_loss(x, &b).unwrap()
        }));
    }

    // cosine
    {
        let x0 = randvec(&mut rng, 8, 0.2, 1.0);
        let b0 = randvec(&mut rng, 8, -1.0, -0.2);
        let b0c = b0.clone();
        out.push(check_scalar_fn("cosine", &x0, &[8], OP_TOLERANCE, move |x| {
            let b = Tensor::new(b0c.clone(), &[8]);
            ad::cosine(x, &b).unwrap()
        }));
    }

    // smooth_groups at a moderate temperature
    {
        let x0 = randvec(&mut rng, 10, 0.0, 1.0);
        let p = proj.clone();
        out.push(check_scalar_fn("smooth_groups", &x0, &[10], OP_TOLERANCE, move |x| {
            project(&ad::smooth_groups(x, 3, &[4, 3], 4.0).unwrap(), &p)
        }));
    }

    // channel-broadcast weighting, both sides
    {
        let f0 = randvec(&mut rng, 2 * 3 * 2 * 2, -1.0, 1.0);
        let w0 = randvec(&mut rng, 2 * 1 * 2 * 2, 0.1, 1.0);
        let (w0c, p) = (w0.clone(), proj.clone());
        out.push(check_scalar_fn(
            "mul_channel_weight/features",
            &f0,
            &[2, 3, 2, 2],
            OP_TOLERANCE,
            move |f| {
                let w = Tensor::new(w0c.clone(), &[2, 1, 2, 2]);
                project(&ad::mul_channel_weight(f, &w).unwrap(), &p)
            },
        ));
        let (f0c, p2) = (f0, proj.clone());
        out.push(check_scalar_fn(
            "mul_channel_weight/weights",
            &w0,
            &[2, 1, 2, 2],
            OP_TOLERANCE,
            move |w| {
                let f = Tensor::new(f0c.clone(), &[2, 3, 2, 2]);
                project(&ad::mul_channel_weight(&f, w).unwrap(), &p2)
            },
        ));
    }

    // channel-subset summation
    {
        let x0 = randvec(&mut rng, 2 * 5 * 2 * 2, -1.0, 1.0);
        let p = proj.clone();
        out.push(check_scalar_fn("sum_channels", &x0, &[2, 5, 2, 2], OP_TOLERANCE, move |x| {
            project(&ad::sum_channels(x, &[1, 3, 4]).unwrap(), &p)
        }));
    }

    // cross entropy head
    {
        let x0 = randvec(&mut rng, 3 * 5, -1.0, 1.0);
        out.push(check_scalar_fn("cross_entropy_mean", &x0, &[3, 5], OP_TOLERANCE, move |x| {
            ad::cross_entropy_mean(x, &[1, 4, 0]).unwrap()
        }));
    }

    if include_corrupted {
        // Fixture with a deliberately wrong backward; the harness must flag it.
        let x0 = randvec(&mut rng, 8, -1.0, 1.0);
        out.push(check_scalar_fn("corrupted_fixture", &x0, &[8], OP_TOLERANCE, move |x| {
            let y = ad::scale(x, 2.0);
            // doubly scale the forward value without telling backward
            let z = Tensor::from_op(
                y.data().iter().map(|v| v * 3.0).collect(),
                &[8],
                vec![y.clone()],
                move |g| y.accumulate_grad(g), // wrong: drops the factor 3
            );
            ad::sum_all(&z)
        }));
    }

    out
}
