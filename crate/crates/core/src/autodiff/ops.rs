//! Elementwise ops, reductions, activations, pooling, linear,
//! batchnorm and the loss heads used by the networks.

use super::{lit, AdError, Elem, Result, Tensor};
use crate::autodiff::gemm::{gemm_acc, gemm_at_acc, gemm_bt_acc};

fn same_shape<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<usize>> {
    let sa = a.shape();
    if sa != b.shape() {
        return Err(AdError::ShapeMismatch(format!("{:?} vs {:?}", sa, b.shape())));
    }
    Ok(sa)
}

pub fn add<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = same_shape(a, b)?;
    let out = a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(&u, &v)| u + v).collect()));
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(out, &shape, vec![a.clone(), b.clone()], move |g| {
        if pa.requires_grad() {
            pa.accumulate_grad(g);
        }
        if pb.requires_grad() {
            pb.accumulate_grad(g);
        }
    }))
}

pub fn sub<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = same_shape(a, b)?;
    let out = a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(&u, &v)| u - v).collect()));
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(out, &shape, vec![a.clone(), b.clone()], move |g| {
        if pa.requires_grad() {
            pa.accumulate_grad(g);
        }
        if pb.requires_grad() {
            let neg: Vec<T> = g.iter().map(|&v| -v).collect();
            pb.accumulate_grad(&neg);
        }
    }))
}

pub fn mul<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = same_shape(a, b)?;
    let out = a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(&u, &v)| u * v).collect()));
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(out, &shape, vec![a.clone(), b.clone()], move |g| {
        if pa.requires_grad() {
            let ga: Vec<T> = pb.with_data(|y| g.iter().zip(y).map(|(&gi, &v)| gi * v).collect());
            pa.accumulate_grad(&ga);
        }
        if pb.requires_grad() {
            let gb: Vec<T> = pa.with_data(|x| g.iter().zip(x).map(|(&gi, &u)| gi * u).collect());
            pb.accumulate_grad(&gb);
        }
    }))
}

pub fn scale<T: Elem>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let shape = a.shape();
    let out = a.with_data(|x| x.iter().map(|&v| v * c).collect());
    let pa = a.clone();
    Tensor::from_op(out, &shape, vec![a.clone()], move |g| {
        let ga: Vec<T> = g.iter().map(|&v| v * c).collect();
        pa.accumulate_grad(&ga);
    })
}

pub fn relu<T: Elem>(a: &Tensor<T>) -> Tensor<T> {
    let shape = a.shape();
    let out: Vec<T> = a.with_data(|x| x.iter().map(|&v| v.max(T::zero())).collect());
    let mask: Vec<bool> = a.with_data(|x| x.iter().map(|&v| v > T::zero()).collect());
    let pa = a.clone();
    Tensor::from_op(out, &shape, vec![a.clone()], move |g| {
        let ga: Vec<T> = g.iter().zip(&mask).map(|(&gi, &m)| if m { gi } else { T::zero() }).collect();
        pa.accumulate_grad(&ga);
    })
}

pub fn sigmoid<T: Elem>(a: &Tensor<T>) -> Tensor<T> {
    let shape = a.shape();
    let y: Vec<T> = a.with_data(|x| x.iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect());
    let ycap = y.clone();
    let pa = a.clone();
    Tensor::from_op(y, &shape, vec![a.clone()], move |g| {
        let ga: Vec<T> = g.iter().zip(&ycap).map(|(&gi, &yv)| gi * yv * (T::one() - yv)).collect();
        pa.accumulate_grad(&ga);
    })
}

pub fn mean_all<T: Elem>(a: &Tensor<T>) -> Tensor<T> {
    let n = lit::<T>(a.len() as f64);
    let s: T = a.with_data(|x| x.iter().copied().sum());
    let pa = a.clone();
    let count = a.len();
    Tensor::from_op(vec![s / n], &[1], vec![a.clone()], move |g| {
        let ga = vec![g[0] / n; count];
        pa.accumulate_grad(&ga);
    })
}

pub fn sum_all<T: Elem>(a: &Tensor<T>) -> Tensor<T> {
    let s: T = a.with_data(|x| x.iter().copied().sum());
    let pa = a.clone();
    let count = a.len();
    Tensor::from_op(vec![s], &[1], vec![a.clone()], move |g| {
        let ga = vec![g[0]; count];
        pa.accumulate_grad(&ga);
    })
}

/// Mean absolute difference over all elements. Subgradient at 0 is 0.
pub fn l1_loss<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b)?;
    let n = lit::<T>(a.len() as f64);
    let (loss, sign): (T, Vec<T>) = a.with_data(|x| {
        b.with_data(|y| {
            let mut s = T::zero();
            let sign: Vec<T> = x
                .iter()
                .zip(y)
                .map(|(&u, &v)| {
                    let d = u - v;
                    s += d.abs();
                    if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                })
                .collect();
            (s / n, sign)
        })
    });
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(vec![loss], &[1], vec![a.clone(), b.clone()], move |g| {
        let g0 = g[0] / n;
        if pa.requires_grad() {
            let ga: Vec<T> = sign.iter().map(|&s| s * g0).collect();
            pa.accumulate_grad(&ga);
        }
        if pb.requires_grad() {
            let gb: Vec<T> = sign.iter().map(|&s| -(s * g0)).collect();
            pb.accumulate_grad(&gb);
        }
    }))
}

/// cos(a, b) = <a, b> / sqrt(|a|^2 |b|^2) for 1-D tensors.
pub fn cosine<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.len() != b.len() {
        return Err(AdError::ShapeMismatch("cosine: length mismatch".into()));
    }
    let (dot, na2, nb2) = a.with_data(|x| {
        b.with_data(|y| {
            let mut d = T::zero();
            let mut nx = T::zero();
            let mut ny = T::zero();
            for (&u, &v) in x.iter().zip(y) {
                d += u * v;
                nx += u * u;
                ny += v * v;
            }
            (d, nx, ny)
        })
    });
    if na2 == T::zero() || nb2 == T::zero() {
        return Err(AdError::ZeroNormEmbedding);
    }
    let denom = (na2 * nb2).sqrt();
    let c = dot / denom;
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(vec![c], &[1], vec![a.clone(), b.clone()], move |g| {
        let g0 = g[0];
        if pa.requires_grad() {
            let ga: Vec<T> = pa.with_data(|x| {
                pb.with_data(|y| {
                    x.iter().zip(y).map(|(&u, &v)| g0 * (v / denom - c * u / na2)).collect()
                })
            });
            pa.accumulate_grad(&ga);
        }
        if pb.requires_grad() {
            let gb: Vec<T> = pa.with_data(|x| {
                pb.with_data(|y| {
                    x.iter().zip(y).map(|(&u, &v)| g0 * (u / denom - c * v / nb2)).collect()
                })
            });
            pb.accumulate_grad(&gb);
        }
    }))
}

/// Lane iteration over a designated axis: shape [outer, lanes, inner].
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

/// Softmax along `axis`; sums to 1 along that axis.
pub fn softmax<T: Elem>(a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = a.shape();
    if axis >= shape.len() {
        return Err(AdError::InvalidArgument(format!("softmax axis {axis} out of range")));
    }
    let (outer, lane, inner) = axis_split(&shape, axis);
    let mut y = a.data();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |c: usize| (o * lane + c) * inner + i;
            let mut mx = T::neg_infinity();
            for c in 0..lane {
                mx = mx.max(y[idx(c)]);
            }
            let mut z = T::zero();
            for c in 0..lane {
                let e = (y[idx(c)] - mx).exp();
                y[idx(c)] = e;
                z += e;
            }
            for c in 0..lane {
                y[idx(c)] /= z;
            }
        }
    }
    let ycap = y.clone();
    let pa = a.clone();
    Ok(Tensor::from_op(y, &shape, vec![a.clone()], move |g| {
        let mut ga = vec![T::zero(); g.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |c: usize| (o * lane + c) * inner + i;
                let mut dot = T::zero();
                for c in 0..lane {
                    dot += g[idx(c)] * ycap[idx(c)];
                }
                for c in 0..lane {
                    ga[idx(c)] = ycap[idx(c)] * (g[idx(c)] - dot);
                }
            }
        }
        pa.accumulate_grad(&ga);
    }))
}

pub fn log_softmax<T: Elem>(a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = a.shape();
    if axis >= shape.len() {
        return Err(AdError::InvalidArgument(format!("log_softmax axis {axis} out of range")));
    }
    let (outer, lane, inner) = axis_split(&shape, axis);
    let mut y = a.data();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |c: usize| (o * lane + c) * inner + i;
            let mut mx = T::neg_infinity();
            for c in 0..lane {
                mx = mx.max(y[idx(c)]);
            }
            let mut z = T::zero();
            for c in 0..lane {
                z += (y[idx(c)] - mx).exp();
            }
            let lz = mx + z.ln();
            for c in 0..lane {
                y[idx(c)] -= lz;
            }
        }
    }
    let ycap = y.clone();
    let pa = a.clone();
    Ok(Tensor::from_op(y, &shape, vec![a.clone()], move |g| {
        let mut ga = vec![T::zero(); g.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |c: usize| (o * lane + c) * inner + i;
                let mut gsum = T::zero();
                for c in 0..lane {
                    gsum += g[idx(c)];
                }
                for c in 0..lane {
                    ga[idx(c)] = g[idx(c)] - ycap[idx(c)].exp() * gsum;
                }
            }
        }
        pa.accumulate_grad(&ga);
    }))
}

/// Mean cross entropy over all lanes. `logits` is [N, C] or [N, C, H, W];
/// `targets` holds one class index per lane in row-major (n, spatial) order.
pub fn cross_entropy_mean<T: Elem>(logits: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
    let shape = logits.shape();
    if shape.len() < 2 {
        return Err(AdError::ShapeMismatch("cross entropy expects [N, C, ...]".into()));
    }
    let (outer, lane, inner) = axis_split(&shape, 1);
    if targets.len() != outer * inner {
        return Err(AdError::ShapeMismatch("target count != lane count".into()));
    }
    let lsm = log_softmax(logits, 1)?;
    let count = lit::<T>((outer * inner) as f64);
    let loss: T = lsm.with_data(|lp| {
        let mut s = T::zero();
        for o in 0..outer {
            for i in 0..inner {
                let t = targets[o * inner + i];
                s -= lp[(o * lane + t) * inner + i];
            }
        }
        s / count
    });
    let plsm = lsm.clone();
    let tcap = targets.to_vec();
    Ok(Tensor::from_op(vec![loss], &[1], vec![lsm], move |g| {
        let g0 = g[0] / count;
        let mut ga = vec![T::zero(); plsm.len()];
        for o in 0..outer {
            for i in 0..inner {
                let t = tcap[o * inner + i];
                ga[(o * lane + t) * inner + i] = -g0;
            }
        }
        plsm.accumulate_grad(&ga);
    }))
}

/// Class-weighted cross entropy: sum of `weights[target] * nll` over all
/// lanes, divided by the sum of the participating weights (so uniform weights
/// reduce to [`cross_entropy_mean`]). Shapes as in [`cross_entropy_mean`];
/// `weights` holds one non-negative factor per class.
pub fn cross_entropy_weighted_mean<T: Elem>(
    logits: &Tensor<T>,
    targets: &[usize],
    weights: &[T],
) -> Result<Tensor<T>> {
    let shape = logits.shape();
    if shape.len() < 2 {
        return Err(AdError::ShapeMismatch("cross entropy expects [N, C, ...]".into()));
    }
    let (outer, lane, inner) = axis_split(&shape, 1);
    if targets.len() != outer * inner {
        return Err(AdError::ShapeMismatch("target count != lane count".into()));
    }
    if weights.len() != lane {
        return Err(AdError::ShapeMismatch("one weight per class expected".into()));
    }
    let lsm = log_softmax(logits, 1)?;
    let mut wsum = T::zero();
    for &t in targets {
        wsum += weights[t];
    }
    if !(wsum > T::zero()) {
        return Err(AdError::ShapeMismatch("weights of present classes sum to zero".into()));
    }
    let loss: T = lsm.with_data(|lp| {
        let mut s = T::zero();
        for o in 0..outer {
            for i in 0..inner {
                let t = targets[o * inner + i];
                s -= weights[t] * lp[(o * lane + t) * inner + i];
            }
        }
        s / wsum
    });
    let plsm = lsm.clone();
    let tcap = targets.to_vec();
    let wcap = weights.to_vec();
    Ok(Tensor::from_op(vec![loss], &[1], vec![lsm], move |g| {
        let g0 = g[0] / wsum;
        let mut ga = vec![T::zero(); plsm.len()];
        for o in 0..outer {
            for i in 0..inner {
                let t = tcap[o * inner + i];
                ga[(o * lane + t) * inner + i] = -g0 * wcap[t];
            }
        }
        plsm.accumulate_grad(&ga);
    }))
}

/// 2-D max pooling over square windows. Ties keep the first (row-major) index.
pub fn maxpool2d<T: Elem>(a: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    let shape = a.shape();
    if shape.len() != 4 {
        return Err(AdError::ShapeMismatch("maxpool expects NCHW".into()));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if window > h || window > w {
        return Err(AdError::WindowExceedsInput);
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    a.with_data(|x| {
        for nc in 0..n * c {
            let plane = &x[nc * h * w..(nc + 1) * h * w];
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut besti = 0usize;
                    for ky in 0..window {
                        for kx in 0..window {
                            let ii = (yo * stride + ky) * w + xo * stride + kx;
                            if plane[ii] > best {
                                best = plane[ii];
                                besti = ii;
                            }
                        }
                    }
                    let oi = nc * oh * ow + yo * ow + xo;
                    out[oi] = best;
                    argmax[oi] = nc * h * w + besti;
                }
            }
        }
    });
    let pa = a.clone();
    let total = a.len();
    Ok(Tensor::from_op(out, &[n, c, oh, ow], vec![a.clone()], move |g| {
        let mut ga = vec![T::zero(); total];
        for (&gi, &src) in g.iter().zip(&argmax) {
            ga[src] += gi;
        }
        pa.accumulate_grad(&ga);
    }))
}

/// x [N, I] * w [O, I]^T + b [O] -> [N, O]
pub fn linear<T: Elem>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(AdError::ShapeMismatch(format!("linear: {:?} x {:?}", xs, ws)));
    }
    let (n, i, o) = (xs[0], xs[1], ws[0]);
    if b.len() != o {
        return Err(AdError::ShapeMismatch("linear bias length".into()));
    }
    let mut out = vec![T::zero(); n * o];
    x.with_data(|xd| w.with_data(|wd| gemm_bt_acc(n, i, o, xd, wd, &mut out)));
    b.with_data(|bd| {
        for row in out.chunks_mut(o) {
            for (v, &bb) in row.iter_mut().zip(bd) {
                *v += bb;
            }
        }
    });
    let (px, pw, pb) = (x.clone(), w.clone(), b.clone());
    Ok(Tensor::from_op(out, &[n, o], vec![x.clone(), w.clone(), b.clone()], move |g| {
        if px.requires_grad() {
            let mut gx = vec![T::zero(); n * i];
            pw.with_data(|wd| gemm_acc(n, o, i, g, wd, &mut gx));
            px.accumulate_grad(&gx);
        }
        if pw.requires_grad() {
            let mut gw = vec![T::zero(); o * i];
            px.with_data(|xd| gemm_at_acc(o, n, i, g, xd, &mut gw));
            pw.accumulate_grad(&gw);
        }
        if pb.requires_grad() {
            let mut gb = vec![T::zero(); o];
            for row in g.chunks(o) {
                for (gbv, &gv) in gb.iter_mut().zip(row) {
                    *gbv += gv;
                }
            }
            pb.accumulate_grad(&gb);
        }
    }))
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch normalization over the channel axis (axis 1) of an NCHW or
/// NC tensor. Train mode normalizes by batch statistics and folds them
/// into `running_mean`/`running_var` with momentum 0.9; eval mode uses
/// the running stats. `running_*` are plain buffers, never in the graph.
pub fn batchnorm<T: Elem>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 2 && shape.len() != 4 {
        return Err(AdError::ShapeMismatch("batchnorm expects NC or NCHW".into()));
    }
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product::<usize>().max(1);
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(AdError::ShapeMismatch("batchnorm channel params".into()));
    }
    let m = lit::<T>((n * spatial) as f64);
    let (mean, var) = if mode == Mode::Train {
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        x.with_data(|xd| {
            for bi in 0..n {
                for ci in 0..c {
                    let off = (bi * c + ci) * spatial;
                    for &v in &xd[off..off + spatial] {
                        mean[ci] += v;
                    }
                }
            }
            for mv in &mut mean {
                *mv /= m;
            }
            for bi in 0..n {
                for ci in 0..c {
                    let off = (bi * c + ci) * spatial;
                    for &v in &xd[off..off + spatial] {
                        let d = v - mean[ci];
                        var[ci] += d * d;
                    }
                }
            }
            for vv in &mut var {
                *vv /= m;
            }
        });
        let mom = lit::<T>(BN_MOMENTUM);
        running_mean.map_data_mut(|rm| {
            for (r, &b) in rm.iter_mut().zip(&mean) {
                *r = mom * *r + (T::one() - mom) * b;
            }
        });
        running_var.map_data_mut(|rv| {
            for (r, &b) in rv.iter_mut().zip(&var) {
                *r = mom * *r + (T::one() - mom) * b;
            }
        });
        (mean, var)
    } else {
        (running_mean.data(), running_var.data())
    };

    let eps = lit::<T>(BN_EPS);
    let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = x.data();
    for bi in 0..n {
        for ci in 0..c {
            let off = (bi * c + ci) * spatial;
            for v in &mut xhat[off..off + spatial] {
                *v = (*v - mean[ci]) * invstd[ci];
            }
        }
    }
    let mut out = xhat.clone();
    gamma.with_data(|gd| {
        beta.with_data(|bd| {
            for bi in 0..n {
                for ci in 0..c {
                    let off = (bi * c + ci) * spatial;
                    for v in &mut out[off..off + spatial] {
                        *v = *v * gd[ci] + bd[ci];
                    }
                }
            }
        })
    });

    let (px, pg, pbta) = (x.clone(), gamma.clone(), beta.clone());
    Ok(Tensor::from_op(out, &shape, vec![x.clone(), gamma.clone(), beta.clone()], move |g| {
        // per-channel reductions of g and g*xhat
        let mut sg = vec![T::zero(); c];
        let mut sgx = vec![T::zero(); c];
        for bi in 0..n {
            for ci in 0..c {
                let off = (bi * c + ci) * spatial;
                for s in 0..spatial {
                    sg[ci] += g[off + s];
                    sgx[ci] += g[off + s] * xhat[off + s];
                }
            }
        }
        if pbta.requires_grad() {
            pbta.accumulate_grad(&sg);
        }
        if pg.requires_grad() {
            pg.accumulate_grad(&sgx);
        }
        if px.requires_grad() {
            let mut gx = vec![T::zero(); g.len()];
            let gammad = pg.data();
            match mode {
                Mode::Train => {
                    for bi in 0..n {
                        for ci in 0..c {
                            let off = (bi * c + ci) * spatial;
                            let k = gammad[ci] * invstd[ci];
                            for s in 0..spatial {
                                gx[off + s] = k
                                    * (g[off + s] - sg[ci] / m - xhat[off + s] * sgx[ci] / m);
                            }
                        }
                    }
                }
                Mode::Eval => {
                    for bi in 0..n {
                        for ci in 0..c {
                            let off = (bi * c + ci) * spatial;
                            let k = gammad[ci] * invstd[ci];
                            for s in 0..spatial {
                                gx[off + s] = k * g[off + s];
                            }
                        }
                    }
                }
            }
            px.accumulate_grad(&gx);
        }
    }))
}

/// Copies data into a new shape with the same element count.
pub fn reshape<T: Elem>(a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let total: usize = shape.iter().product();
    if total != a.len() {
        return Err(AdError::ShapeMismatch(format!(
            "reshape {:?} -> {:?}",
            a.shape(),
            shape
        )));
    }
    let pa = a.clone();
    Ok(Tensor::from_op(a.data(), shape, vec![a.clone()], move |g| {
        pa.accumulate_grad(g);
    }))
}

/// feat [N, C, H, W] * w [N, 1, H, W], broadcast across channels.
pub fn mul_channel_weight<T: Elem>(feat: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let fs = feat.shape();
    let ws = w.shape();
    if fs.len() != 4 || ws.len() != 4 || ws[1] != 1 || fs[0] != ws[0] || fs[2..] != ws[2..] {
        return Err(AdError::ShapeMismatch(format!("channel weight: {:?} x {:?}", fs, ws)));
    }
    let (n, c, hw) = (fs[0], fs[1], fs[2] * fs[3]);
    let mut out = feat.data();
    w.with_data(|wd| {
        for bi in 0..n {
            let wplane = &wd[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                for (v, &wv) in out[off..off + hw].iter_mut().zip(wplane) {
                    *v *= wv;
                }
            }
        }
    });
    let (pf, pw) = (feat.clone(), w.clone());
    Ok(Tensor::from_op(out, &fs, vec![feat.clone(), w.clone()], move |g| {
        if pf.requires_grad() {
            let gf: Vec<T> = pw.with_data(|wd| {
                let mut gf = g.to_vec();
                for bi in 0..n {
                    let wplane = &wd[bi * hw..(bi + 1) * hw];
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for (v, &wv) in gf[off..off + hw].iter_mut().zip(wplane) {
                            *v *= wv;
                        }
                    }
                }
                gf
            });
            pf.accumulate_grad(&gf);
        }
        if pw.requires_grad() {
            let gw: Vec<T> = pf.with_data(|fd| {
                let mut gw = vec![T::zero(); n * hw];
                for bi in 0..n {
                    let wg = &mut gw[bi * hw..(bi + 1) * hw];
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for (s, wgv) in wg.iter_mut().enumerate() {
                            *wgv += g[off + s] * fd[off + s];
                        }
                    }
                }
                gw
            });
            pw.accumulate_grad(&gw);
        }
    }))
}

/// Sums a subset of channels of a [N,C,H,W] tensor into a [N,1,H,W] map.
pub fn sum_channels<T: Elem>(x: &Tensor<T>, channels: &[usize]) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(AdError::ShapeMismatch(format!("sum_channels expects NCHW, got {s:?}")));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    if channels.iter().any(|&ci| ci >= c) {
        return Err(AdError::InvalidArgument("channel index out of range".into()));
    }
    let chans = channels.to_vec();
    let out = x.with_data(|xd| {
        let mut out = vec![T::zero(); n * hw];
        for bi in 0..n {
            for &ci in &chans {
                let off = (bi * c + ci) * hw;
                for (o, &v) in out[bi * hw..(bi + 1) * hw].iter_mut().zip(&xd[off..off + hw]) {
                    *o += v;
                }
            }
        }
        out
    });
    let px = x.clone();
    let shape = vec![n, 1, s[2], s[3]];
    Ok(Tensor::from_op(out, &shape, vec![x.clone()], move |g| {
        if px.requires_grad() {
            let mut gx = vec![T::zero(); px.len()];
            for bi in 0..n {
                for &ci in &chans {
                    let off = (bi * c + ci) * hw;
                    gx[off..off + hw].copy_from_slice(&g[bi * hw..(bi + 1) * hw]);
                }
            }
            px.accumulate_grad(&gx);
        }
    }))
}

/// Temperature softmax over the discrete logit blocks of a flat
/// parameter vector; the continuous prefix passes through unchanged.
/// Each group block becomes softmax(beta * logits).
pub fn smooth_groups<T: Elem>(
    x: &Tensor<T>,
    continuous_len: usize,
    groups: &[usize],
    beta: T,
) -> Result<Tensor<T>> {
    let total: usize = continuous_len + groups.iter().sum::<usize>();
    if x.len() != total {
        return Err(AdError::ShapeMismatch(format!(
            "smooth_groups: vector length {} != {total}",
            x.len()
        )));
    }
    if beta <= T::zero() {
        return Err(AdError::InvalidArgument("beta must be positive".into()));
    }
    let mut y = x.data();
    let mut off = continuous_len;
    for &gsz in groups {
        let block = &mut y[off..off + gsz];
        let mx = block.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in block.iter_mut() {
            *v = (beta * (*v - mx)).exp();
            z += *v;
        }
        for v in block.iter_mut() {
            *v /= z;
        }
        off += gsz;
    }
    let ycap = y.clone();
    let px = x.clone();
    let gcap = groups.to_vec();
    let shape = x.shape();
    Ok(Tensor::from_op(y, &shape, vec![x.clone()], move |g| {
        let mut gx = g[..continuous_len].to_vec();
        gx.resize(g.len(), T::zero());
        let mut off = continuous_len;
        for &gsz in &gcap {
            let p = &ycap[off..off + gsz];
            let gb = &g[off..off + gsz];
            let dot: T = p.iter().zip(gb).map(|(&pi, &gi)| pi * gi).sum();
            for j in 0..gsz {
                gx[off + j] = beta * p[j] * (gb[j] - dot);
            }
            off += gsz;
        }
        px.accumulate_grad(&gx);
    }))
}

/// Detached copy with every element clamped to [0, 1] (display only).
pub fn clamp01<T: Elem>(a: &Tensor<T>) -> Tensor<T> {
    Tensor::new(
        a.with_data(|x| x.iter().map(|&v| v.max(T::zero()).min(T::one())).collect::<Vec<T>>()),
        &a.shape(),
    )
}
