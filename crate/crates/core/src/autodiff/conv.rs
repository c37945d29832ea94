//! conv2d / conv2d_transpose via im2col + GEMM.
//!
//! conv2d_transpose is implemented as the exact adjoint of conv2d: its
//! forward pass is conv2d's backward-input pass and vice versa, so the
//! inner-product identity <conv(a,w), b> == <a, convT(b,w)> holds by
//! construction.

use super::gemm::{gemm_acc, gemm_at_acc, gemm_bt_acc};
use super::{AdError, Elem, Result, Tensor};

pub struct ConvGeom {
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub ih: usize,
    pub iw: usize,
    pub oh: usize,
    pub ow: usize,
}

/// im2col on one image [ci, ih, iw] into columns [col0, col0 + oh*ow) of a
/// col matrix with `ncol` columns per row. The destination cells must be
/// zeroed beforehand (padding positions are skipped, not written).
fn im2col<T: Elem>(img: &[T], g: &ConvGeom, col: &mut [T], ncol: usize, col0: usize) {
    for c in 0..g.ci {
        let plane = &img[c * g.ih * g.iw..(c + 1) * g.ih * g.iw];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = ((c * g.k + kh) * g.k + kw) * ncol + col0;
                for oh in 0..g.oh {
                    let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.ih as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * g.iw..(ih as usize + 1) * g.iw];
                    let dst = &mut col[row + oh * g.ow..row + (oh + 1) * g.ow];
                    for ow in 0..g.ow {
                        let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.iw as isize {
                            dst[ow] = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter-add columns [col0, col0 + oh*ow) of a col
/// matrix with `ncol` columns per row into img [ci, ih, iw].
fn col2im_acc<T: Elem>(col: &[T], g: &ConvGeom, img: &mut [T], ncol: usize, col0: usize) {
    for c in 0..g.ci {
        let plane = &mut img[c * g.ih * g.iw..(c + 1) * g.ih * g.iw];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = ((c * g.k + kh) * g.k + kw) * ncol + col0;
                for oh in 0..g.oh {
                    let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.ih as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.iw..(ih as usize + 1) * g.iw];
                    let src = &col[row + oh * g.ow..row + (oh + 1) * g.ow];
                    for ow in 0..g.ow {
                        let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.iw as isize {
                            dst[iw as usize] += src[ow];
                        }
                    }
                }
            }
        }
    }
}

/// im2col over the whole batch: col [ci*k*k, n*oh*ow], sample b in columns
/// [b*oh*ow, (b+1)*oh*ow).
fn im2col_batch<T: Elem>(input: &[T], n: usize, g: &ConvGeom) -> Vec<T> {
    let ohw = g.oh * g.ow;
    let ckk = g.ci * g.k * g.k;
    let mut col = vec![T::zero(); ckk * n * ohw];
    for b in 0..n {
        let img = &input[b * g.ci * g.ih * g.iw..(b + 1) * g.ci * g.ih * g.iw];
        im2col(img, g, &mut col, n * ohw, b * ohw);
    }
    col
}

/// Gather [n, co, oh*ow] into a GEMM operand [co, n*oh*ow] whose sample b
/// occupies columns [b*oh*ow, (b+1)*oh*ow).
fn gather_batch_rows<T: Elem>(x: &[T], n: usize, co: usize, ohw: usize) -> Vec<T> {
    let mut rows = vec![T::zero(); co * n * ohw];
    for b in 0..n {
        for c in 0..co {
            let src = &x[(b * co + c) * ohw..(b * co + c + 1) * ohw];
            rows[c * n * ohw + b * ohw..c * n * ohw + (b + 1) * ohw].copy_from_slice(src);
        }
    }
    rows
}

/// out[n] = w (co x ci*k*k) * col(in[n]) + bias, for all n.
/// The batch is packed into one col matrix so a single GEMM covers it.
pub fn conv_fwd<T: Elem>(
    input: &[T],
    n: usize,
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let ohw = g.oh * g.ow;
    let ckk = g.ci * g.k * g.k;
    let col = im2col_batch(input, n, g);
    let mut prod = vec![T::zero(); g.co * n * ohw];
    gemm_acc(g.co, ckk, n * ohw, w, &col, &mut prod);
    let mut out = vec![T::zero(); n * g.co * ohw];
    for b in 0..n {
        for c in 0..g.co {
            let src = &prod[c * n * ohw + b * ohw..c * n * ohw + (b + 1) * ohw];
            let dst = &mut out[(b * g.co + c) * ohw..(b * g.co + c + 1) * ohw];
            match bias {
                Some(bias) => {
                    let bc = bias[c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bc;
                    }
                }
                None => dst.copy_from_slice(src),
            }
        }
    }
    out
}

/// gin[n] = col2im(w^T * gout[n]), batched into one GEMM.
pub fn conv_bwd_input<T: Elem>(gout: &[T], n: usize, w: &[T], g: &ConvGeom) -> Vec<T> {
    let ohw = g.oh * g.ow;
    let ckk = g.ci * g.k * g.k;
    let grows = gather_batch_rows(gout, n, g.co, ohw);
    let mut colg = vec![T::zero(); ckk * n * ohw];
    gemm_at_acc(ckk, g.co, n * ohw, w, &grows, &mut colg);
    let mut gin = vec![T::zero(); n * g.ci * g.ih * g.iw];
    for b in 0..n {
        let gi = &mut gin[b * g.ci * g.ih * g.iw..(b + 1) * g.ci * g.ih * g.iw];
        col2im_acc(&colg, g, gi, n * ohw, b * ohw);
    }
    gin
}

/// gw += sum_n gout[n] * col(in[n])^T, gbias += sum over spatial/batch
pub fn conv_bwd_weight<T: Elem>(
    input: &[T],
    gout: &[T],
    n: usize,
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let ohw = g.oh * g.ow;
    let ckk = g.ci * g.k * g.k;
    let mut gw = vec![T::zero(); g.co * ckk];
    let mut gb = vec![T::zero(); g.co];
    let col = im2col_batch(input, n, g);
    let grows = gather_batch_rows(gout, n, g.co, ohw);
    gemm_bt_acc(g.co, n * ohw, ckk, &grows, &col, &mut gw);
    for b in 0..n {
        let go = &gout[b * g.co * ohw..(b + 1) * g.co * ohw];
        for c in 0..g.co {
            let mut acc = T::zero();
            for &v in &go[c * ohw..(c + 1) * ohw] {
                acc += v;
            }
            gb[c] += acc;
        }
    }
    (gw, gb)
}

fn check_conv_args(ishape: &[usize], wshape: &[usize]) -> Result<()> {
    if ishape.len() != 4 {
        return Err(AdError::ShapeMismatch(format!(
            "conv input must be NCHW, got rank {}",
            ishape.len()
        )));
    }
    if wshape.len() != 4 || wshape[2] != wshape[3] {
        return Err(AdError::ShapeMismatch(
            "conv weight must be [o, i, k, k] with square kernel".into(),
        ));
    }
    Ok(())
}

/// 2-D convolution, NCHW input, [out_ch, in_ch, k, k] weight.
pub fn conv2d<T: Elem>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let ishape = input.shape();
    let wshape = weight.shape();
    check_conv_args(&ishape, &wshape)?;
    let (n, ci, ih, iw) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (co, wci, k) = (wshape[0], wshape[1], wshape[2]);
    if wci != ci {
        return Err(AdError::ChannelMismatch);
    }
    if bias.len() != co {
        return Err(AdError::ShapeMismatch("bias length != out channels".into()));
    }
    if ih + 2 * padding < k || iw + 2 * padding < k {
        return Err(AdError::ShapeMismatch(
            "spatial dims smaller than kernel after padding".into(),
        ));
    }
    let oh = (ih + 2 * padding - k) / stride + 1;
    let ow = (iw + 2 * padding - k) / stride + 1;
    let geom = ConvGeom { ci, co, k, stride, padding, ih, iw, oh, ow };

    let out = input.with_data(|inp| {
        weight.with_data(|w| bias.with_data(|b| conv_fwd(inp, n, w, Some(b), &geom)))
    });

    let (pi, pw, pb) = (input.clone(), weight.clone(), bias.clone());
    Ok(Tensor::from_op(
        out,
        &[n, co, oh, ow],
        vec![input.clone(), weight.clone(), bias.clone()],
        move |gout| {
            let geom = ConvGeom { ci, co, k, stride, padding, ih, iw, oh, ow };
            if pi.requires_grad() {
                let gin = pw.with_data(|w| conv_bwd_input(gout, n, w, &geom));
                pi.accumulate_grad_owned(gin);
            }
            if pw.requires_grad() || pb.requires_grad() {
                let (gw, gb) = pi.with_data(|inp| conv_bwd_weight(inp, gout, n, &geom));
                if pw.requires_grad() {
                    pw.accumulate_grad_owned(gw);
                }
                if pb.requires_grad() {
                    pb.accumulate_grad(&gb);
                }
            }
        },
    ))
}

/// Transposed 2-D convolution, NCHW input, [in_ch, out_ch, k, k] weight.
/// Output spatial size is (h - 1) * stride - 2 * padding + k.
pub fn conv2d_transpose<T: Elem>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let ishape = input.shape();
    let wshape = weight.shape();
    check_conv_args(&ishape, &wshape)?;
    let (n, ci, h, w_sp) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (wci, co, k) = (wshape[0], wshape[1], wshape[2]);
    if wci != ci {
        return Err(AdError::ChannelMismatch);
    }
    if bias.len() != co {
        return Err(AdError::ShapeMismatch("bias length != out channels".into()));
    }
    let oh = (h - 1) * stride + k;
    let ow = (w_sp - 1) * stride + k;
    if oh < 2 * padding + 1 || ow < 2 * padding + 1 {
        return Err(AdError::ShapeMismatch("padding exceeds output".into()));
    }
    let (oh, ow) = (oh - 2 * padding, ow - 2 * padding);
    // Geometry of the *matching forward conv*: its input is our output.
    let geom = ConvGeom { ci: co, co: ci, k, stride, padding, ih: oh, iw: ow, oh: h, ow: w_sp };

    let mut out = input.with_data(|inp| weight.with_data(|w| conv_bwd_input(inp, n, w, &geom)));
    bias.with_data(|b| {
        for bb in 0..n {
            for (c, &bc) in b.iter().enumerate() {
                let off = (bb * co + c) * oh * ow;
                for v in &mut out[off..off + oh * ow] {
                    *v += bc;
                }
            }
        }
    });

    let (pi, pw, pb) = (input.clone(), weight.clone(), bias.clone());
    Ok(Tensor::from_op(
        out,
        &[n, co, oh, ow],
        vec![input.clone(), weight.clone(), bias.clone()],
        move |gout| {
            let geom =
                ConvGeom { ci: co, co: ci, k, stride, padding, ih: oh, iw: ow, oh: h, ow: w_sp };
            if pi.requires_grad() {
                let gin = pw.with_data(|w| conv_fwd(gout, n, w, None, &geom));
                pi.accumulate_grad_owned(gin);
            }
            if pw.requires_grad() || pb.requires_grad() {
                let (gw, _) = pi.with_data(|z| conv_bwd_weight(gout, z, n, &geom));
                if pw.requires_grad() {
                    pw.accumulate_grad_owned(gw);
                }
                if pb.requires_grad() {
                    let mut gb = vec![T::zero(); co];
                    for bb in 0..n {
                        for (c, gc) in gb.iter_mut().enumerate() {
                            let off = (bb * co + c) * oh * ow;
                            for &v in &gout[off..off + oh * ow] {
                                *gc += v;
                            }
                        }
                    }
                    pb.accumulate_grad(&gb);
                }
            }
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::new((0..9).map(|v| v as f32).collect::<Vec<f32>>(), &[1, 1, 3, 3]);
        let w = Tensor::new(vec![1.0], &[1, 1, 1, 1]);
        let b = Tensor::new(vec![0.0], &[1]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn hand_computed_2x2() {
        // [[1,2],[3,4]] * [[1,0],[0,1]] -> 1*1 + 4*1 = 5
        let x = Tensor::new(vec![1.0f32, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let w = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[1, 1, 2, 2]);
        let b = Tensor::new(vec![0.0], &[1]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.data(), vec![5.0]);
    }

    #[test]
    fn conv_output_shape() {
        let x = Tensor::<f32>::zeros(&[1, 3, 64, 64]);
        let w = Tensor::zeros(&[32, 3, 3, 3]);
        let b = Tensor::zeros(&[32]);
        let y = conv2d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 32, 32, 32]);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let b = Tensor::zeros(&[4]);
        assert!(matches!(conv2d(&x, &w, &b, 1, 1), Err(AdError::ChannelMismatch)));
    }

    #[test]
    fn transpose_broadcasts_single_pixel() {
        let x = Tensor::new(vec![2.0f32], &[1, 1, 1, 1]);
        let w = Tensor::new(vec![1.0; 16], &[1, 1, 4, 4]);
        let b = Tensor::new(vec![0.0], &[1]);
        let y = conv2d_transpose(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn transpose_doubles_resolution() {
        // kernel 4, stride 2, pad 1: 4 -> 8
        let x = Tensor::<f32>::zeros(&[1, 8, 4, 4]);
        let w = Tensor::zeros(&[8, 5, 4, 4]);
        let b = Tensor::zeros(&[5]);
        let y = conv2d_transpose(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 5, 8, 8]);
    }

    #[test]
    fn adjoint_identity_random_trials() {
        // <conv(a, w), b> == <a, convT(b, w)>
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        for trial in 0..8 {
            // geometries where the conv output size reproduces the input
            // size exactly, i.e. (ih + 2p - k) % s == 0
            let (ci, co, k, s, p) = match trial % 4 {
                0 => (2, 3, 3, 1, 1),
                1 => (1, 2, 4, 2, 1),
                2 => (3, 1, 2, 2, 0),
                _ => (2, 2, 4, 2, 1),
            };
            let (ih, iw) = (6, 6);
            let oh = (ih + 2 * p - k) / s + 1;
            let ow = (iw + 2 * p - k) / s + 1;
            let mut randvec =
                |n: usize| (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
            let a = Tensor::new(randvec(ci * ih * iw), &[1, ci, ih, iw]);
            let w = Tensor::new(randvec(co * ci * k * k), &[co, ci, k, k]);
            let bvec = randvec(co * oh * ow);
            let b = Tensor::new(bvec.clone(), &[1, co, oh, ow]);
            let zb_conv = Tensor::zeros(&[co]);
            let zb_t = Tensor::zeros(&[ci]);
            let ca = conv2d(&a, &w, &zb_conv, s, p).unwrap();
            let tb = conv2d_transpose(&b, &w, &zb_t, s, p).unwrap();
            let lhs: f32 = ca.data().iter().zip(&bvec).map(|(x, y)| x * y).sum();
            let rhs: f32 = tb.data().iter().zip(&a.data()).map(|(x, y)| x * y).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-4 * lhs.abs().max(1.0),
                "trial {trial}: {lhs} vs {rhs}"
            );
        }
    }
}
