//! Raw slice kernels shared by the tape ops and their backward closures.

use super::scalar::Scalar;

/// out += a @ b, with a: [m,k], b: [k,n], out: [m,n].
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out += a @ b^T, with a: [m,k], b: [n,k], out: [m,n].
pub fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = S::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            out[i * n + j] += s;
        }
    }
}

/// out += a^T @ b, with a: [m,k], b: [m,n], out: [k,n].
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a 2D convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
}

/// input: [H,W,Cin], kernel: [kh,kw,Cin,Cout], bias: [Cout] -> [oh,ow,Cout].
pub fn conv2d_forward<S: Scalar>(input: &[S], kernel: &[S], bias: &[S], g: ConvGeom) -> Vec<S> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![S::zero(); oh * ow * g.c_out];
    for oy in 0..oh {
        for ox in 0..ow {
            let out_px = &mut out[(oy * ow + ox) * g.c_out..(oy * ow + ox + 1) * g.c_out];
            out_px.copy_from_slice(bias);
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let in_px = &input[((iy as usize) * g.w + ix as usize) * g.c_in..][..g.c_in];
                    let k_base = (ky * g.kw + kx) * g.c_in * g.c_out;
                    for (ci, &iv) in in_px.iter().enumerate() {
                        let k_row = &kernel[k_base + ci * g.c_out..][..g.c_out];
                        for (o, &kv) in out_px.iter_mut().zip(k_row) {
                            *o += iv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates d_input, d_kernel, d_bias for [`conv2d_forward`].
pub fn conv2d_backward<S: Scalar>(
    input: &[S],
    kernel: &[S],
    d_out: &[S],
    g: ConvGeom,
    d_input: Option<&mut [S]>,
    d_kernel: Option<&mut [S]>,
    d_bias: Option<&mut [S]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut d_input = d_input;
    let mut d_kernel = d_kernel;
    if let Some(db) = d_bias {
        for oy in 0..oh {
            for ox in 0..ow {
                let up = &d_out[(oy * ow + ox) * g.c_out..][..g.c_out];
                for (d, &u) in db.iter_mut().zip(up) {
                    *d += u;
                }
            }
        }
    }
    for oy in 0..oh {
        for ox in 0..ow {
            let up = &d_out[(oy * ow + ox) * g.c_out..][..g.c_out];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let px = ((iy as usize) * g.w + ix as usize) * g.c_in;
                    let k_base = (ky * g.kw + kx) * g.c_in * g.c_out;
                    if let Some(di) = d_input.as_deref_mut() {
                        for ci in 0..g.c_in {
                            let k_row = &kernel[k_base + ci * g.c_out..][..g.c_out];
                            let mut s = S::zero();
                            for (&u, &kv) in up.iter().zip(k_row) {
                                s += u * kv;
                            }
                            di[px + ci] += s;
                        }
                    }
                    if let Some(dk) = d_kernel.as_deref_mut() {
                        for ci in 0..g.c_in {
                            let iv = input[px + ci];
                            let dk_row = &mut dk[k_base + ci * g.c_out..][..g.c_out];
                            for (d, &u) in dk_row.iter_mut().zip(up) {
                                *d += iv * u;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stable softmax over each contiguous row of length `n`.
pub fn softmax_rows<S: Scalar>(x: &[S], n: usize) -> Vec<S> {
    assert!(n >= 1, "softmax over an empty axis");
    let mut out = vec![S::zero(); x.len()];
    for (row, out_row) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0f64; 4];
        matmul_acc(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transpose() {
        let a = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0]; // [2,3]
        let b = [2.0, 1.0, 0.0, -1.0, 1.5, 2.5]; // [2,3] for nt, [2,3] for tn
        let mut nt = [0.0f64; 4];
        matmul_nt_acc(&a, &b, 2, 3, 2, &mut nt); // a[2,3] @ b[2,3]^T
        let bt = [2.0, -1.0, 1.0, 1.5, 0.0, 2.5]; // b^T: [3,2]
        let mut plain = [0.0f64; 4];
        matmul_acc(&a, &bt, 2, 3, 2, &mut plain);
        assert_eq!(nt, plain);

        let mut tn = [0.0f64; 9];
        matmul_tn_acc(&a, &b, 2, 3, 3, &mut tn); // a^T[3,2] @ b[2,3]
        let at = [1.0, 3.0, -2.0, 4.0, 0.5, -1.0]; // a^T
        let mut plain2 = [0.0f64; 9];
        matmul_acc(&at, &b, 3, 2, 3, &mut plain2);
        assert_eq!(tn, plain2);
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with identity weights reproduces the input.
        let g = ConvGeom { h: 2, w: 2, c_in: 1, kh: 1, kw: 1, c_out: 1, stride: 1, pad: 0 };
        let input = [1.0, 2.0, 3.0, 4.0];
        let out = conv2d_forward(&input, &[1.0], &[0.0], g);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_stride_two_shapes() {
        let g = ConvGeom { h: 4, w: 4, c_in: 3, kh: 3, kw: 3, c_out: 5, stride: 2, pad: 1 };
        assert_eq!((g.out_h(), g.out_w()), (2, 2));
        let out = conv2d_forward(&vec![1.0f32; 48], &vec![0.0; 135], &vec![2.0; 5], g);
        assert_eq!(out.len(), 20);
        assert!(out.iter().all(|&v| v == 2.0));
    }
}
