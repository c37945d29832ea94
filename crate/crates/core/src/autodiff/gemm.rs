//! Small row-major matrix kernels. The hot path is a register-blocked
//! MR x NR microkernel whose fixed-size inner loops the compiler turns into
//! wide FMA code. Operands are packed tile-by-tile: A once per call, B one
//! k x NR panel at a time so the panel stays cache-resident across every row
//! tile. The transposed variants pack straight from the transposed layout,
//! so no operand transpose is ever materialized.

use super::Elem;

/// Cache-line-aligned backing block for pack buffers, so the microkernel's
/// wide vector loads never straddle cache lines.
#[repr(C, align(64))]
#[derive(Clone, Copy)]
struct Block<T: Copy>([T; 16]);

/// A zeroed, 64-byte-aligned scratch buffer exposing `len` elements.
struct PackBuf<T: Elem>(Vec<Block<T>>, usize);

impl<T: Elem> PackBuf<T> {
    fn new(len: usize) -> PackBuf<T> {
        PackBuf(vec![Block([T::zero(); 16]); len.div_ceil(16)], len)
    }

    fn as_slice(&self) -> &[T] {
        // Blocks are contiguous, aligned, and fully initialized.
        unsafe { std::slice::from_raw_parts(self.0.as_ptr() as *const T, self.1) }
    }

    fn as_mut_slice(&mut self) -> &mut [T] {
        unsafe { std::slice::from_raw_parts_mut(self.0.as_mut_ptr() as *mut T, self.1) }
    }
}

/// Rows of C accumulated per tile.
const MR: usize = 8;
/// Columns of C accumulated per tile (three 16-lane f32 vectors).
const NR: usize = 48;

/// How a packing routine should read its source operand.
#[derive(Clone, Copy, PartialEq)]
enum Layout {
    /// Row-major in C-space: element (i, p) of A at a[i*k + p], element
    /// (p, j) of B at b[p*n + j].
    Normal,
    /// The operand is stored transposed: element (i, p) of A at a[p*m + i],
    /// element (p, j) of B at b[j*k + p].
    Transposed,
}
use Layout::{Normal, Transposed};

/// Packs rows [0, mb) of A column-major per MR-tile: apack[(t*k + p)*MR + r]
/// holds A[t*MR + r, p].
fn pack_a<T: Elem>(mb: usize, m: usize, k: usize, a: &[T], layout: Layout) -> PackBuf<T> {
    let mut buf = PackBuf::new(mb * k);
    let apack = buf.as_mut_slice();
    match layout {
        Normal => {
            for t in 0..mb / MR {
                for p in 0..k {
                    for r in 0..MR {
                        apack[(t * k + p) * MR + r] = a[(t * MR + r) * k + p];
                    }
                }
            }
        }
        Transposed => {
            // Source rows are contiguous in r, so this pack is a strided copy.
            for t in 0..mb / MR {
                for p in 0..k {
                    let src = &a[p * m + t * MR..p * m + t * MR + MR];
                    apack[(t * k + p) * MR..(t * k + p) * MR + MR].copy_from_slice(src);
                }
            }
        }
    }
    buf
}

/// Packs the k x W panel of B starting at column j0 into bpack[p*W + j].
fn pack_b_panel<T: Elem, const W: usize>(
    k: usize,
    n: usize,
    j0: usize,
    b: &[T],
    layout: Layout,
    bpack: &mut [T],
) {
    match layout {
        Normal => {
            for p in 0..k {
                bpack[p * W..(p + 1) * W].copy_from_slice(&b[p * n + j0..p * n + j0 + W]);
            }
        }
        Transposed => {
            // Each source row is contiguous in p; scatter it down the panel.
            for j in 0..W {
                let row = &b[(j0 + j) * k..(j0 + j + 1) * k];
                for (p, &v) in row.iter().enumerate() {
                    bpack[p * W + j] = v;
                }
            }
        }
    }
}

/// C[i0..i0+MR, j0..j0+W] += atile * bpanel, both packed.
#[inline(always)]
fn microkernel<T: Elem, const W: usize>(
    k: usize,
    atile: &[T],
    bpack: &[T],
    c: &mut [T],
    n: usize,
    i0: usize,
    j0: usize,
) {
    let mut acc = [[T::zero(); W]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        let base = (i0 + r) * n + j0;
        row.copy_from_slice(&c[base..base + W]);
    }
    for p in 0..k {
        // In-bounds by loop construction; checked in debug builds.
        debug_assert!((p + 1) * W <= bpack.len() && (p + 1) * MR <= atile.len());
        let (brow, acol) = unsafe {
            (
                &*(bpack.as_ptr().add(p * W) as *const [T; W]),
                &*(atile.as_ptr().add(p * MR) as *const [T; MR]),
            )
        };
        for (row, &av) in acc.iter_mut().zip(acol) {
            for (cj, &bj) in row.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        let base = (i0 + r) * n + j0;
        c[base..base + W].copy_from_slice(row);
    }
}

/// Blocked driver shared by the three public entry points. Dimensions are in
/// C-space (C is m x n, inner dimension k); `a_layout`/`b_layout` say how the
/// operand slices are stored.
fn gemm_driver<T: Elem>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_layout: Layout,
    b: &[T],
    b_layout: Layout,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    /// Narrow fallback panel width (one 16-lane f32 vector); the networks'
    /// GEMM widths are all multiples of 16, so the scalar edge is rare.
    const NR2: usize = 16;
    let mb = m - m % MR;
    let nb = n - n % NR;
    let nb2 = n - n % NR2;
    let apack_buf = pack_a(mb, m, k, a, a_layout);
    let apack = apack_buf.as_slice();
    if k * nb2 <= apack.len() {
        // B (packed) is the smaller operand: pack it whole, keep it hot, and
        // stream A tiles through it once.
        let mut bpack_buf = PackBuf::new(k * nb2);
        let bpack = bpack_buf.as_mut_slice();
        for (i, j0) in (0..nb).step_by(NR).enumerate() {
            pack_b_panel::<T, NR>(k, n, j0, b, b_layout, &mut bpack[i * k * NR..(i + 1) * k * NR]);
        }
        for (i, j0) in (nb..nb2).step_by(NR2).enumerate() {
            let off = k * nb + i * k * NR2;
            pack_b_panel::<T, NR2>(k, n, j0, b, b_layout, &mut bpack[off..off + k * NR2]);
        }
        for t in 0..mb / MR {
            let atile = &apack[t * k * MR..(t + 1) * k * MR];
            for (i, j0) in (0..nb).step_by(NR).enumerate() {
                let panel = &bpack[i * k * NR..(i + 1) * k * NR];
                microkernel::<T, NR>(k, atile, panel, c, n, t * MR, j0);
            }
            for (i, j0) in (nb..nb2).step_by(NR2).enumerate() {
                let off = k * nb + i * k * NR2;
                microkernel::<T, NR2>(k, atile, &bpack[off..off + k * NR2], c, n, t * MR, j0);
            }
        }
    } else {
        // A (packed) is the smaller operand: keep it hot and consume B one
        // freshly packed panel at a time.
        let mut bpack_buf = PackBuf::new(k * NR);
        let bpack = bpack_buf.as_mut_slice();
        for j0 in (0..nb).step_by(NR) {
            pack_b_panel::<T, NR>(k, n, j0, b, b_layout, bpack);
            for t in 0..mb / MR {
                microkernel::<T, NR>(k, &apack[t * k * MR..(t + 1) * k * MR], bpack, c, n, t * MR, j0);
            }
        }
        for j0 in (nb..nb2).step_by(NR2) {
            pack_b_panel::<T, NR2>(k, n, j0, b, b_layout, &mut bpack[..k * NR2]);
            for t in 0..mb / MR {
                microkernel::<T, NR2>(
                    k,
                    &apack[t * k * MR..(t + 1) * k * MR],
                    &bpack[..k * NR2],
                    c,
                    n,
                    t * MR,
                    j0,
                );
            }
        }
    }
    // Remainder columns (all rows) and remainder rows (all columns): scalar
    // paths ordered so the contiguous operand drives the inner loop.
    let edge = |i: usize, lo: usize, crow: &mut [T]| match (a_layout, b_layout) {
        (Normal, Normal) => axpy_row(k, n, lo, &a[i * k..(i + 1) * k], b, crow),
        (Transposed, Normal) => {
            for p in 0..k {
                let aip = a[p * m + i];
                if aip == T::zero() {
                    continue;
                }
                let brow = &b[p * n + lo..(p + 1) * n];
                for (cj, &bj) in crow[lo..].iter_mut().zip(brow) {
                    *cj += aip * bj;
                }
            }
        }
        (Normal, Transposed) => {
            let arow = &a[i * k..(i + 1) * k];
            for (j, cj) in crow.iter_mut().enumerate().skip(lo) {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&av, &bv) in arow.iter().zip(brow) {
                    acc += av * bv;
                }
                *cj += acc;
            }
        }
        (Transposed, Transposed) => {
            for (j, cj) in crow.iter_mut().enumerate().skip(lo) {
                let mut acc = T::zero();
                for p in 0..k {
                    acc += a[p * m + i] * b[j * k + p];
                }
                *cj += acc;
            }
        }
    };
    if nb2 < n {
        for i in 0..mb {
            edge(i, nb2, &mut c[i * n..(i + 1) * n]);
        }
    }
    for i in mb..m {
        edge(i, 0, &mut c[i * n..(i + 1) * n]);
    }
}

/// c += a (m x k) * b (k x n)
pub fn gemm_acc<T: Elem>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_driver(m, k, n, a, Normal, b, Normal, c);
}

/// c += a^T * b where a is stored (k x m), b is (k x n), c is (m x n)
pub fn gemm_at_acc<T: Elem>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_driver(m, k, n, a, Transposed, b, Normal, c);
}

/// c += a * b^T where a is (m x k), b is stored (n x k), c is (m x n)
pub fn gemm_bt_acc<T: Elem>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_driver(m, k, n, a, Normal, b, Transposed, c);
}

/// crow[j0..] += sum_p arow[p] * b[p, j0..] — scalar remainder path.
fn axpy_row<T: Elem>(k: usize, n: usize, j0: usize, arow: &[T], b: &[T], crow: &mut [T]) {
    for (p, &aip) in arow.iter().enumerate().take(k) {
        if aip == T::zero() {
            continue;
        }
        let brow = &b[p * n + j0..(p + 1) * n];
        for (cj, &bj) in crow[j0..].iter_mut().zip(brow) {
            *cj += aip * bj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f32, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f32; 4];
        gemm_acc(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_variants_agree() {
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f32, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut expect = [0.0f32; 4];
        gemm_acc(2, 3, 2, &a, &b, &mut expect);

        // a^T stored as (3x2) so a^T^T = a
        let at = [1.0f32, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2, transpose of a
        let mut c = [0.0f32; 4];
        gemm_at_acc(2, 3, 2, &at, &b, &mut c);
        assert_eq!(c, expect);

        let bt = [7.0f32, 9.0, 11.0, 8.0, 10.0, 12.0]; // 2x3, transpose of b
        let mut c = [0.0f32; 4];
        gemm_bt_acc(2, 3, 2, &a, &bt, &mut c);
        assert_eq!(c, expect);
    }

    #[test]
    fn accumulates_into_existing_c() {
        let a = [2.0f32; 6];
        let b = [3.0f32; 6];
        let mut c = [1.0f32; 4];
        gemm_acc(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, [19.0; 4]);
    }

    /// Exercises every combination of blocked tile and remainder edge against
    /// a naive triple loop, with exactly representable values, for all three
    /// entry points.
    #[test]
    fn blocked_kernel_matches_naive_on_odd_shapes() {
        for &(m, k, n) in
            &[(1, 1, 1), (8, 4, 48), (9, 3, 49), (17, 5, 97), (8, 2, 47), (23, 7, 50), (16, 9, 96)]
        {
            let a: Vec<f32> = (0..m * k).map(|i| ((i * 7 + 3) % 13) as f32 - 6.0).collect();
            let b: Vec<f32> = (0..k * n).map(|i| ((i * 5 + 1) % 11) as f32 - 5.0).collect();
            let mut expect: Vec<f32> = (0..m * n).map(|i| (i % 5) as f32).collect();
            let init = expect.clone();
            for i in 0..m {
                for p in 0..k {
                    for j in 0..n {
                        expect[i * n + j] += a[i * k + p] * b[p * n + j];
                    }
                }
            }
            let mut c = init.clone();
            gemm_acc(m, k, n, &a, &b, &mut c);
            assert_eq!(c, expect, "gemm_acc mismatch at shape {m}x{k}x{n}");

            let mut at = vec![0.0f32; m * k];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let mut c = init.clone();
            gemm_at_acc(m, k, n, &at, &b, &mut c);
            assert_eq!(c, expect, "gemm_at_acc mismatch at shape {m}x{k}x{n}");

            let mut bt = vec![0.0f32; k * n];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let mut c = init;
            gemm_bt_acc(m, k, n, &a, &bt, &mut c);
            assert_eq!(c, expect, "gemm_bt_acc mismatch at shape {m}x{k}x{n}");
        }
    }
}
