//! Differentiable ops recorded on the [`Tape`].
//!
//! Structural misuse (shape mismatches, empty axes) panics; non-finite
//! values flow into the tape's nonfinite flag so callers at the model
//! boundary can surface them as errors.

use super::kernels::{self, ConvGeom};
use super::scalar::Scalar;
use super::tape::{Tape, VarId};
use super::tensor::Tensor;

/// Maximum RoI position-encoding frequency.
pub const PE_MAX_FREQ: f64 = 128.0;

const GELU_COEF: f64 = 0.044715;

impl<S: Scalar> Tape<S> {
    fn unary(
        &mut self,
        op: &str,
        a: VarId,
        value: Tensor<S>,
        back: impl Fn(&Tape<S>, &Tensor<S>, VarId, &mut [S]) + 'static,
    ) -> VarId {
        let needs = self.needs_grad(a);
        self.push(
            op,
            value,
            needs,
            Some(Box::new(move |t, up, g| {
                let shape = t.value(a).shape().to_vec();
                let da = g.acc(a, &shape);
                back(t, up, a, da);
            })),
        )
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let needs = self.any_needs_grad(&[a, b]);
        self.push(
            "add",
            value,
            needs,
            Some(Box::new(move |t, up, g| {
                for &id in &[a, b] {
                    if t.needs_grad(id) {
                        let da = g.acc(id, up.shape());
                        for (d, &u) in da.iter_mut().zip(up.data()) {
                            *d += u;
                        }
                    }
                }
            })),
        )
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let needs = self.any_needs_grad(&[a, b]);
        self.push(
            "sub",
            value,
            needs,
            Some(Box::new(move |t, up, g| {
                if t.needs_grad(a) {
                    let da = g.acc(a, up.shape());
                    for (d, &u) in da.iter_mut().zip(up.data()) {
                        *d += u;
                    }
                }
                if t.needs_grad(b) {
                    let db = g.acc(b, up.shape());
                    for (d, &u) in db.iter_mut().zip(up.data()) {
                        *d -= u;
                    }
                }
            })),
        )
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let needs = self.any_needs_grad(&[a, b]);
        self.push(
            "mul",
            value,
            needs,
            Some(Box::new(move |t, up, g| {
                if t.needs_grad(a) {
                    let other: Vec<S> = t.value(b).data().to_vec();
                    let da = g.acc(a, up.shape());
                    for ((d, &u), &o) in da.iter_mut().zip(up.data()).zip(&other) {
                        *d += u * o;
                    }
                }
                if t.needs_grad(b) {
                    let other: Vec<S> = t.value(a).data().to_vec();
                    let db = g.acc(b, up.shape());
                    for ((d, &u), &o) in db.iter_mut().zip(up.data()).zip(&other) {
                        *d += u * o;
                    }
                }
            })),
        )
    }

    pub fn scale(&mut self, a: VarId, c: S) -> VarId {
        let value = self.value(a).map(|v| v * c);
        self.unary("scale", a, value, move |_, up, _, da| {
            for (d, &u) in da.iter_mut().zip(up.data()) {
                *d += u * c;
            }
        })
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = S::from_f64(GELU_COEF);
        let half = S::from_f64(0.5);
        let value = self.value(a).map(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (S::one() + u.tanh())
        });
        self.unary("gelu", a, value, move |t, up, a, da| {
            let x = t.value(a).data();
            let three = S::from_f64(3.0);
            for ((d, &u), &xv) in da.iter_mut().zip(up.data()).zip(x) {
                let inner = c * (xv + k * xv * xv * xv);
                let th = inner.tanh();
                let sech2 = S::one() - th * th;
                let slope = half * (S::one() + th) + half * xv * sech2 * c * (S::one() + three * k * xv * xv);
                *d += u * slope;
            }
        })
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let value = self.value(a).map(|x| x.exp());
        self.unary("exp", a, value, move |t, up, a, da| {
            let x = t.value(a).data();
            for ((d, &u), &xv) in da.iter_mut().zip(up.data()).zip(x) {
                *d += u * xv.exp();
            }
        })
    }

    pub fn sin(&mut self, a: VarId) -> VarId {
        let value = self.value(a).map(|x| x.sin());
        self.unary("sin", a, value, move |t, up, a, da| {
            let x = t.value(a).data();
            for ((d, &u), &xv) in da.iter_mut().zip(up.data()).zip(x) {
                *d += u * xv.cos();
            }
        })
    }

    pub fn cos(&mut self, a: VarId) -> VarId {
        let value = self.value(a).map(|x| x.cos());
        self.unary("cos", a, value, move |t, up, a, da| {
            let x = t.value(a).data();
            for ((d, &u), &xv) in da.iter_mut().zip(up.data()).zip(x) {
                *d -= u * xv.sin();
            }
        })
    }

    /// a: [m,k] @ b: [k,n] -> [m,n].
    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_acc(va.data(), vb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out);
        let needs = self.any_needs_grad(&[a, b]);
        self.push(
            "matmul",
            value,
            needs,
            Some(Box::new(move |t, up, g| {
                if t.needs_grad(a) {
                    let bv: Vec<S> = t.value(b).data().to_vec();
                    let da = g.acc(a, &[m, k]);
                    kernels::matmul_nt_acc(up.data(), &bv, m, n, k, da);
                }
                if t.needs_grad(b) {
                    let av: Vec<S> = t.value(a).data().to_vec();
                    let db = g.acc(b, &[k, n]);
                    kernels::matmul_tn_acc(&av, up.data(), m, k, n, db);
                }
            })),
        )
    }

    /// a: [m,k] @ b^T with b: [n,k] -> [m,n].
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (n, k2) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul_nt: inner dims {k} vs {k2}");
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_nt_acc(va.data(), vb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out);
        let needs = self.any_needs_grad(&[a, b]);
        self.push(
            "matmul_nt",
            value,
            needs,
            Some(Box::new(move |t, up, g| {
                if t.needs_grad(a) {
                    let bv: Vec<S> = t.value(b).data().to_vec();
                    let da = g.acc(a, &[m, k]);
                    kernels::matmul_acc(up.data(), &bv, m, n, k, da);
                }
                if t.needs_grad(b) {
                    let av: Vec<S> = t.value(a).data().to_vec();
                    let db = g.acc(b, &[n, k]);
                    kernels::matmul_tn_acc(up.data(), &av, m, n, k, db);
                }
            })),
        )
    }

    /// m: [r,c] + bias: [c] broadcast over rows.
    pub fn add_row_bias(&mut self, m: VarId, bias: VarId) -> VarId {
        let (vm, vb) = (self.value(m), self.value(bias));
        let (r, c) = (vm.rows(), vm.cols());
        assert_eq!(vb.len(), c, "add_row_bias: bias length {} vs cols {c}", vb.len());
        let mut data = vm.data().to_vec();
        for row in data.chunks_mut(c) {
            for (d, &b) in row.iter_mut().zip(vb.data()) {
                *d += b;
            }
        }
        let value = Tensor::new(vec![r, c], data);
        let needs = self.any_needs_grad(&[m, bias]);
        self.push(
            "add_row_bias",
            value,
            needs,
            Some(Box::new(move |t, up, g| {
                if t.needs_grad(m) {
                    let dm = g.acc(m, &[r, c]);
                    for (d, &u) in dm.iter_mut().zip(up.data()) {
                        *d += u;
                    }
                }
                if t.needs_grad(bias) {
                    let shape = t.value(bias).shape().to_vec();
                    let db = g.acc(bias, &shape);
                    for row in up.data().chunks(c) {
                        for (d, &u) in db.iter_mut().zip(row) {
                            *d += u;
                        }
                    }
                }
            })),
        )
    }

    /// m: [r,c] + v broadcast over columns (v has r elements).
    pub fn add_col(&mut self, m: VarId, v: VarId) -> VarId {
        let (vm, vv) = (self.value(m), self.value(v));
        let (r, c) = (vm.rows(), vm.cols());
        assert_eq!(vv.len(), r, "add_col: vector length {} vs rows {r}", vv.len());
        let mut data = vm.data().to_vec();
        for (row, &a) in data.chunks_mut(c).zip(vv.data()) {
            for d in row.iter_mut() {
                *d += a;
            }
        }
        let value = Tensor::new(vec![r, c], data);
        let needs = self.any_needs_grad(&[m, v]);
        self.push(
            "add_col",
            value,
            needs,
            Some(Box::new(move |t, up, g| {
                if t.needs_grad(m) {
                    let dm = g.acc(m, &[r, c]);
                    for (d, &u) in dm.iter_mut().zip(up.data()) {
                        *d += u;
                    }
                }
                if t.needs_grad(v) {
                    let shape = t.value(v).shape().to_vec();
                    let dv = g.acc(v, &shape);
                    for (dvr, row) in dv.iter_mut().zip(up.data().chunks(c)) {
                        for &u in row {
                            *dvr += u;
                        }
                    }
                }
            })),
        )
    }

    /// m: [r,c] * v broadcast over columns (v has r elements).
    pub fn mul_col(&mut self, m: VarId, v: VarId) -> VarId {
        let (vm, vv) = (self.value(m), self.value(v));
        let (r, c) = (vm.rows(), vm.cols());
        assert_eq!(vv.len(), r, "mul_col: vector length {} vs rows {r}", vv.len());
        let mut data = vm.data().to_vec();
        for (row, &a) in data.chunks_mut(c).zip(vv.data()) {
            for d in row.iter_mut() {
                *d = *d * a;
            }
        }
        let value = Tensor::new(vec![r, c], data);
        let needs = self.any_needs_grad(&[m, v]);
        self.push(
            "mul_col",
            value,
            needs,
            Some(Box::new(move |t, up, g| {
                if t.needs_grad(m) {
                    let scalars: Vec<S> = t.value(v).data().to_vec();
                    let dm = g.acc(m, &[r, c]);
                    for ((drow, urow), &a) in dm.chunks_mut(c).zip(up.data().chunks(c)).zip(&scalars) {
                        for (d, &u) in drow.iter_mut().zip(urow) {
                            *d += u * a;
                        }
                    }
                }
                if t.needs_grad(v) {
                    let mv: Vec<S> = t.value(m).data().to_vec();
                    let shape = t.value(v).shape().to_vec();
                    let dv = g.acc(v, &shape);
                    for ((dvr, urow), mrow) in dv.iter_mut().zip(up.data().chunks(c)).zip(mv.chunks(c)) {
                        for (&u, &mvv) in urow.iter().zip(mrow) {
                            *dvr += u * mvv;
                        }
                    }
                }
            })),
        )
    }

    /// Columns [c0, c1) of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: VarId, c0: usize, c1: usize) -> VarId {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        assert!(c0 < c1 && c1 <= c, "slice_cols: bad range [{c0},{c1}) for {c} cols");
        let w = c1 - c0;
        let mut data = Vec::with_capacity(r * w);
        for row in va.data().chunks(c) {
            data.extend_from_slice(&row[c0..c1]);
        }
        let value = Tensor::new(vec![r, w], data);
        self.unary("slice_cols", a, value, move |_, up, _, da| {
            for (drow, urow) in da.chunks_mut(c).zip(up.data().chunks(w)) {
                for (d, &u) in drow[c0..c1].iter_mut().zip(urow) {
                    *d += u;
                }
            }
        })
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| {
            let v = self.value(p);
            assert_eq!(v.rows(), r, "concat_cols: row mismatch");
            v.cols()
        }).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![S::zero(); r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::new(vec![r, total], data);
        let needs = self.any_needs_grad(parts);
        let parts: Vec<VarId> = parts.to_vec();
        self.push(
            "concat_cols",
            value,
            needs,
            Some(Box::new(move |t, up, g| {
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if t.needs_grad(p) {
                        let dp = g.acc(p, &[r, w]);
                        for i in 0..r {
                            for (d, &u) in dp[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&up.data()[i * total + off..i * total + off + w])
                            {
                                *d += u;
                            }
                        }
                    }
                    off += w;
                }
            })),
        )
    }

    /// Rows [r0, r1) of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: VarId, r0: usize, r1: usize) -> VarId {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        assert!(r0 < r1 && r1 <= r, "slice_rows: bad range [{r0},{r1}) for {r} rows");
        let data = va.data()[r0 * c..r1 * c].to_vec();
        let value = Tensor::new(vec![r1 - r0, c], data);
        self.unary("slice_rows", a, value, move |_, up, _, da| {
            for (d, &u) in da[r0 * c..r1 * c].iter_mut().zip(up.data()) {
                *d += u;
            }
        })
    }

    /// Concatenate rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), c, "concat_rows: column mismatch");
            rows.push(v.rows());
            data.extend_from_slice(v.data());
        }
        let total: usize = rows.iter().sum();
        let value = Tensor::new(vec![total, c], data);
        let needs = self.any_needs_grad(parts);
        let parts: Vec<VarId> = parts.to_vec();
        self.push(
            "concat_rows",
            value,
            needs,
            Some(Box::new(move |t, up, g| {
                let mut off = 0;
                for (&p, &r) in parts.iter().zip(&rows) {
                    if t.needs_grad(p) {
                        let dp = g.acc(p, &[r, c]);
                        for (d, &u) in dp.iter_mut().zip(&up.data()[off..off + r * c]) {
                            *d += u;
                        }
                    }
                    off += r * c;
                }
            })),
        )
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> VarId {
        let value = self.value(a).clone().reshaped(shape);
        self.unary("reshape", a, value, move |_, up, _, da| {
            for (d, &u) in da.iter_mut().zip(up.data()) {
                *d += u;
            }
        })
    }

    /// Softmax over the last dimension (stabilized by max subtraction).
    pub fn softmax_lastdim(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        assert!(va.rank() >= 1, "softmax needs at least rank 1");
        let n = *va.shape().last().unwrap();
        assert!(n >= 1, "softmax over an empty last dimension");
        let data = kernels::softmax_rows(va.data(), n);
        let value = Tensor::new(va.shape().to_vec(), data);
        let out = self.len(); // id of the node being pushed
        let needs = self.needs_grad(a);
        self.push(
            "softmax",
            value,
            needs,
            Some(Box::new(move |t, up, g| {
                let y: Vec<S> = t.value(VarId(out)).data().to_vec();
                let shape = t.value(a).shape().to_vec();
                let da = g.acc(a, &shape);
                for ((drow, urow), yrow) in da.chunks_mut(n).zip(up.data().chunks(n)).zip(y.chunks(n)) {
                    let mut dot = S::zero();
                    for (&u, &yv) in urow.iter().zip(yrow) {
                        dot += u * yv;
                    }
                    for ((d, &u), &yv) in drow.iter_mut().zip(urow).zip(yrow) {
                        *d += yv * (u - dot);
                    }
                }
            })),
        )
    }

    /// Layer normalization over the last dimension with affine parameters.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: S) -> VarId {
        let vx = self.value(x);
        assert!(vx.rank() >= 1);
        let c = *vx.shape().last().unwrap();
        assert!(c >= 1, "layer_norm over an empty axis");
        let (vg, vb) = (self.value(gamma), self.value(beta));
        assert_eq!(vg.len(), c, "layer_norm: gamma length");
        assert_eq!(vb.len(), c, "layer_norm: beta length");
        let inv_c = S::from_usize(c).recip();
        let mut data = vec![S::zero(); vx.len()];
        for (row, out) in vx.data().chunks(c).zip(data.chunks_mut(c)) {
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean = mean * inv_c;
            let mut var = S::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_c;
            let inv_std = (var + eps).sqrt().recip();
            for ((o, &v), (&g0, &b0)) in out.iter_mut().zip(row).zip(vg.data().iter().zip(vb.data())) {
                *o = (v - mean) * inv_std * g0 + b0;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data);
        let needs = self.any_needs_grad(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            value,
            needs,
            Some(Box::new(move |t, up, g| {
                let xv: Vec<S> = t.value(x).data().to_vec();
                let gv: Vec<S> = t.value(gamma).data().to_vec();
                let inv_c = S::from_usize(c).recip();
                // per-row xhat and inv_std recomputed from inputs
                for (r, (xrow, urow)) in xv.chunks(c).zip(up.data().chunks(c)).enumerate() {
                    let mut mean = S::zero();
                    for &v in xrow {
                        mean += v;
                    }
                    mean = mean * inv_c;
                    let mut var = S::zero();
                    for &v in xrow {
                        let d = v - mean;
                        var += d * d;
                    }
                    var = var * inv_c;
                    let inv_std = (var + eps).sqrt().recip();
                    let xhat: Vec<S> = xrow.iter().map(|&v| (v - mean) * inv_std).collect();
                    if t.needs_grad(gamma) {
                        let dgam = g.acc(gamma, &[c]);
                        for ((d, &u), &xh) in dgam.iter_mut().zip(urow).zip(&xhat) {
                            *d += u * xh;
                        }
                    }
                    if t.needs_grad(beta) {
                        let dbet = g.acc(beta, &[c]);
                        for (d, &u) in dbet.iter_mut().zip(urow) {
                            *d += u;
                        }
                    }
                    if t.needs_grad(x) {
                        let dxhat: Vec<S> = urow.iter().zip(&gv).map(|(&u, &g0)| u * g0).collect();
                        let mut mean_dxhat = S::zero();
                        let mut mean_dxhat_xhat = S::zero();
                        for (&dxh, &xh) in dxhat.iter().zip(&xhat) {
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xh;
                        }
                        mean_dxhat = mean_dxhat * inv_c;
                        mean_dxhat_xhat = mean_dxhat_xhat * inv_c;
                        let shape = t.value(x).shape().to_vec();
                        let dx = g.acc(x, &shape);
                        for ((d, &dxh), &xh) in dx[r * c..(r + 1) * c].iter_mut().zip(&dxhat).zip(&xhat) {
                            *d += inv_std * (dxh - mean_dxhat - xh * mean_dxhat_xhat);
                        }
                    }
                }
            })),
        )
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let mut s = S::zero();
        for &v in va.data() {
            s += v;
        }
        self.unary("sum_all", a, Tensor::scalar(s), move |_, up, _, da| {
            let u = up.data()[0];
            for d in da.iter_mut() {
                *d += u;
            }
        })
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let n = S::from_usize(va.len());
        let mut s = S::zero();
        for &v in va.data() {
            s += v;
        }
        self.unary("mean_all", a, Tensor::scalar(s / n), move |_, up, _, da| {
            let u = up.data()[0] / n;
            for d in da.iter_mut() {
                *d += u;
            }
        })
    }

    /// Mean of single-element vars (batch-loss averaging).
    pub fn mean_scalars(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        self.scale(acc, S::from_usize(parts.len()).recip())
    }

    /// Bilinear sampling of `map` [H,W,C] at normalized coordinates.
    ///
    /// `px`/`py` hold matching numbers of x/y coordinates in [0,1] image
    /// space; coordinates outside the image are clamped to the border.
    /// Returns [P, C].
    pub fn bilinear_sample(&mut self, map: VarId, px: VarId, py: VarId) -> VarId {
        let vm = self.value(map);
        assert_eq!(vm.rank(), 3, "bilinear_sample: map must be [H,W,C]");
        let (h, w, c) = (vm.dim(0), vm.dim(1), vm.dim(2));
        assert!(h >= 1 && w >= 1, "bilinear_sample: empty map");
        let (vpx, vpy) = (self.value(px), self.value(py));
        assert_eq!(vpx.len(), vpy.len(), "bilinear_sample: coordinate count mismatch");
        let p = vpx.len();
        let coords_ok = vpx.all_finite() && vpy.all_finite();
        let geom = SampleGeom { h, w, c };
        let mut out = vec![S::zero(); p * c];
        for i in 0..p {
            let s = geom.site(vpx.data()[i], vpy.data()[i]);
            let row = &mut out[i * c..(i + 1) * c];
            for ch in 0..c {
                row[ch] = s.w00 * vm.data()[(s.y0 * w + s.x0) * c + ch]
                    + s.w01 * vm.data()[(s.y0 * w + s.x1) * c + ch]
                    + s.w10 * vm.data()[(s.y1 * w + s.x0) * c + ch]
                    + s.w11 * vm.data()[(s.y1 * w + s.x1) * c + ch];
            }
        }
        if !coords_ok {
            self.flag_nonfinite("bilinear_sample");
        }
        let value = Tensor::new(vec![p, c], out);
        let needs = self.any_needs_grad(&[map, px, py]);
        self.push(
            "bilinear_sample",
            value,
            needs,
            Some(Box::new(move |t, up, g| {
                let map_data: Vec<S> = t.value(map).data().to_vec();
                let xs: Vec<S> = t.value(px).data().to_vec();
                let ys: Vec<S> = t.value(py).data().to_vec();
                let (need_map, need_px, need_py) =
                    (t.needs_grad(map), t.needs_grad(px), t.needs_grad(py));
                let mut d_map = if need_map { Some(vec![S::zero(); map_data.len()]) } else { None };
                let mut d_px = if need_px { Some(vec![S::zero(); xs.len()]) } else { None };
                let mut d_py = if need_py { Some(vec![S::zero(); ys.len()]) } else { None };
                for i in 0..xs.len() {
                    let s = geom.site(xs[i], ys[i]);
                    let urow = &up.data()[i * c..(i + 1) * c];
                    for ch in 0..c {
                        let u = urow[ch];
                        if let Some(dm) = d_map.as_deref_mut() {
                            dm[(s.y0 * w + s.x0) * c + ch] += u * s.w00;
                            dm[(s.y0 * w + s.x1) * c + ch] += u * s.w01;
                            dm[(s.y1 * w + s.x0) * c + ch] += u * s.w10;
                            dm[(s.y1 * w + s.x1) * c + ch] += u * s.w11;
                        }
                        let v00 = map_data[(s.y0 * w + s.x0) * c + ch];
                        let v01 = map_data[(s.y0 * w + s.x1) * c + ch];
                        let v10 = map_data[(s.y1 * w + s.x0) * c + ch];
                        let v11 = map_data[(s.y1 * w + s.x1) * c + ch];
                        if let Some(dx) = d_px.as_deref_mut() {
                            let one = S::one();
                            let dfdx = (one - s.fy) * (v01 - v00) + s.fy * (v11 - v10);
                            dx[i] += u * dfdx * s.dx_scale;
                        }
                        if let Some(dy) = d_py.as_deref_mut() {
                            let one = S::one();
                            let dfdy = (one - s.fx) * (v10 - v00) + s.fx * (v11 - v01);
                            dy[i] += u * dfdy * s.dy_scale;
                        }
                    }
                }
                if let Some(dm) = d_map {
                    let acc = g.acc(map, &[h, w, c]);
                    for (a, v) in acc.iter_mut().zip(dm) {
                        *a += v;
                    }
                }
                if let Some(dx) = d_px {
                    let shape = t.value(px).shape().to_vec();
                    let acc = g.acc(px, &shape);
                    for (a, v) in acc.iter_mut().zip(dx) {
                        *a += v;
                    }
                }
                if let Some(dy) = d_py {
                    let shape = t.value(py).shape().to_vec();
                    let acc = g.acc(py, &shape);
                    for (a, v) in acc.iter_mut().zip(dy) {
                        *a += v;
                    }
                }
            })),
        )
    }

    /// 2D convolution: input [H,W,Cin], kernel [kh,kw,Cin,Cout], bias [Cout].
    pub fn conv2d(&mut self, input: VarId, kernel: VarId, bias: VarId, stride: usize, pad: usize) -> VarId {
        let vi = self.value(input);
        let vk = self.value(kernel);
        let vb = self.value(bias);
        assert_eq!(vi.rank(), 3, "conv2d: input must be [H,W,C]");
        assert_eq!(vk.rank(), 4, "conv2d: kernel must be [kh,kw,Cin,Cout]");
        let g = ConvGeom {
            h: vi.dim(0),
            w: vi.dim(1),
            c_in: vi.dim(2),
            kh: vk.dim(0),
            kw: vk.dim(1),
            c_out: vk.dim(3),
            stride,
            pad,
        };
        assert_eq!(vk.dim(2), g.c_in, "conv2d: channel mismatch");
        assert_eq!(vb.len(), g.c_out, "conv2d: bias length");
        let out = kernels::conv2d_forward(vi.data(), vk.data(), vb.data(), g);
        let value = Tensor::new(vec![g.out_h(), g.out_w(), g.c_out], out);
        let needs = self.any_needs_grad(&[input, kernel, bias]);
        self.push(
            "conv2d",
            value,
            needs,
            Some(Box::new(move |t, up, gr| {
                let iv: Vec<S> = t.value(input).data().to_vec();
                let kv: Vec<S> = t.value(kernel).data().to_vec();
                let (ni, nk, nb) = (t.needs_grad(input), t.needs_grad(kernel), t.needs_grad(bias));
                let mut di = if ni { Some(vec![S::zero(); iv.len()]) } else { None };
                let mut dk = if nk { Some(vec![S::zero(); kv.len()]) } else { None };
                let mut db = if nb { Some(vec![S::zero(); g.c_out]) } else { None };
                kernels::conv2d_backward(
                    &iv,
                    &kv,
                    up.data(),
                    g,
                    di.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = di {
                    let acc = gr.acc(input, &[g.h, g.w, g.c_in]);
                    for (a, v) in acc.iter_mut().zip(d) {
                        *a += v;
                    }
                }
                if let Some(d) = dk {
                    let acc = gr.acc(kernel, &[g.kh, g.kw, g.c_in, g.c_out]);
                    for (a, v) in acc.iter_mut().zip(d) {
                        *a += v;
                    }
                }
                if let Some(d) = db {
                    let acc = gr.acc(bias, &[g.c_out]);
                    for (a, v) in acc.iter_mut().zip(d) {
                        *a += v;
                    }
                }
            })),
        )
    }

    /// Normalized-delta RoI update:
    /// x' = x + dx*w, y' = y + dy*h, w' = w*exp(dw), h' = h*exp(dh).
    ///
    /// rois and deltas are both [N,4].
    pub fn roi_adjust(&mut self, rois: VarId, deltas: VarId) -> VarId {
        let (vr, vd) = (self.value(rois), self.value(deltas));
        assert_eq!(vr.shape(), vd.shape(), "roi_adjust: shape mismatch");
        assert_eq!(vr.cols(), 4, "roi_adjust: rois must be [N,4]");
        let n = vr.rows();
        let mut out = vec![S::zero(); n * 4];
        for i in 0..n {
            let r = &vr.data()[i * 4..(i + 1) * 4];
            let d = &vd.data()[i * 4..(i + 1) * 4];
            out[i * 4] = r[0] + d[0] * r[2];
            out[i * 4 + 1] = r[1] + d[1] * r[3];
            out[i * 4 + 2] = r[2] * d[2].exp();
            out[i * 4 + 3] = r[3] * d[3].exp();
        }
        let value = Tensor::new(vec![n, 4], out);
        let needs = self.any_needs_grad(&[rois, deltas]);
        self.push(
            "roi_adjust",
            value,
            needs,
            Some(Box::new(move |t, up, g| {
                let rv: Vec<S> = t.value(rois).data().to_vec();
                let dv: Vec<S> = t.value(deltas).data().to_vec();
                for i in 0..n {
                    let r = &rv[i * 4..(i + 1) * 4];
                    let d = &dv[i * 4..(i + 1) * 4];
                    let u = &up.data()[i * 4..(i + 1) * 4];
                    let (ew, eh) = (d[2].exp(), d[3].exp());
                    if t.needs_grad(rois) {
                        let dr = g.acc(rois, &[n, 4]);
                        dr[i * 4] += u[0];
                        dr[i * 4 + 1] += u[1];
                        dr[i * 4 + 2] += u[0] * d[0] + u[2] * ew;
                        dr[i * 4 + 3] += u[1] * d[1] + u[3] * eh;
                    }
                    if t.needs_grad(deltas) {
                        let dd = g.acc(deltas, &[n, 4]);
                        dd[i * 4] += u[0] * r[2];
                        dd[i * 4 + 1] += u[1] * r[3];
                        dd[i * 4 + 2] += u[2] * r[2] * ew;
                        dd[i * 4 + 3] += u[3] * r[3] * eh;
                    }
                }
            })),
        )
    }

    /// Sinusoidal RoI position encoding.
    ///
    /// For each RoI the four edge coordinates (left, top, right, bottom)
    /// each produce a d/4 part `[sin(pi f0 v), cos(pi f0 v), sin(pi f1 v), ...]`
    /// with d/8 frequencies geometrically spaced from 1 to `PE_MAX_FREQ`;
    /// the parts are concatenated to a [N, d] encoding.
    pub fn roi_position_encoding(&mut self, rois: VarId, d: usize) -> VarId {
        assert!(d % 8 == 0 && d > 0, "position encoding width must be divisible by 8, got {d}");
        let vr = self.value(rois);
        assert_eq!(vr.cols(), 4, "roi_position_encoding: rois must be [N,4]");
        let n = vr.rows();
        let freqs = pe_frequencies::<S>(d / 8);
        let part = d / 4;
        let pi = S::from_f64(std::f64::consts::PI);
        let mut out = vec![S::zero(); n * d];
        for i in 0..n {
            let r = &vr.data()[i * 4..(i + 1) * 4];
            let edges = roi_edges(r);
            for (e, &v) in edges.iter().enumerate() {
                let base = i * d + e * part;
                for (fi, &f) in freqs.iter().enumerate() {
                    let arg = pi * f * v;
                    out[base + 2 * fi] = arg.sin();
                    out[base + 2 * fi + 1] = arg.cos();
                }
            }
        }
        let value = Tensor::new(vec![n, d], out);
        let needs = self.needs_grad(rois);
        self.push(
            "roi_position_encoding",
            value,
            needs,
            Some(Box::new(move |t, up, g| {
                let rv: Vec<S> = t.value(rois).data().to_vec();
                let pi = S::from_f64(std::f64::consts::PI);
                let dr = g.acc(rois, &[n, 4]);
                let half = S::from_f64(0.5);
                for i in 0..n {
                    let r = &rv[i * 4..(i + 1) * 4];
                    let edges = roi_edges(r);
                    let mut d_edge = [S::zero(); 4];
                    for (e, &v) in edges.iter().enumerate() {
                        let base = i * d + e * part;
                        let mut acc = S::zero();
                        for (fi, &f) in freqs.iter().enumerate() {
                            let arg = pi * f * v;
                            let u_sin = up.data()[base + 2 * fi];
                            let u_cos = up.data()[base + 2 * fi + 1];
                            acc += pi * f * (u_sin * arg.cos() - u_cos * arg.sin());
                        }
                        d_edge[e] = acc;
                    }
                    // edges: left = x - w/2, top = y - h/2, right = x + w/2, bottom = y + h/2
                    dr[i * 4] += d_edge[0] + d_edge[2];
                    dr[i * 4 + 1] += d_edge[1] + d_edge[3];
                    dr[i * 4 + 2] += half * (d_edge[2] - d_edge[0]);
                    dr[i * 4 + 3] += half * (d_edge[3] - d_edge[1]);
                }
            })),
        )
    }

    /// Gaussian-style geometric attention bias between grid positions and RoIs.
    ///
    /// `grid` is [M,2] normalized positions; output [M,N] with
    /// `b[p,n] = -((px-x)^2/w^2 + (py-y)^2/h^2) / (2 sigma^2)`.
    pub fn geometric_bias(&mut self, rois: VarId, grid: &Tensor<S>, sigma: S) -> VarId {
        let vr = self.value(rois);
        assert_eq!(vr.cols(), 4, "geometric_bias: rois must be [N,4]");
        assert_eq!(grid.cols(), 2, "geometric_bias: grid must be [M,2]");
        let n = vr.rows();
        let m = grid.rows();
        let roi_data = vr.data().to_vec();
        let inv_two_sigma2 = (S::from_f64(2.0) * sigma * sigma).recip();
        let mut size_ok = true;
        for r in roi_data.chunks(4) {
            if !(r[2] > S::zero() && r[3] > S::zero()) {
                size_ok = false;
            }
        }
        if !size_ok {
            self.flag_nonfinite("geometric_bias");
        }
        let grid_data = grid.data().to_vec();
        let mut out = vec![S::zero(); m * n];
        for p in 0..m {
            let (gx, gy) = (grid_data[p * 2], grid_data[p * 2 + 1]);
            for (i, r) in roi_data.chunks(4).enumerate() {
                let dx = (gx - r[0]) / r[2];
                let dy = (gy - r[1]) / r[3];
                out[p * n + i] = -(dx * dx + dy * dy) * inv_two_sigma2;
            }
        }
        let value = Tensor::new(vec![m, n], out);
        let needs = self.needs_grad(rois);
        self.push(
            "geometric_bias",
            value,
            needs,
            Some(Box::new(move |t, up, g| {
                let rv: Vec<S> = t.value(rois).data().to_vec();
                let dr = g.acc(rois, &[n, 4]);
                let two = S::from_f64(2.0);
                let sig2 = (inv_two_sigma2 * two).recip(); // sigma^2
                for p in 0..m {
                    let (gx, gy) = (grid_data[p * 2], grid_data[p * 2 + 1]);
                    for i in 0..n {
                        let r = &rv[i * 4..(i + 1) * 4];
                        let u = up.data()[p * n + i];
                        let ddx = gx - r[0];
                        let ddy = gy - r[1];
                        let (w2, h2) = (r[2] * r[2], r[3] * r[3]);
                        // d/dx = (gx-x)/(w^2 sigma^2), d/dw = (gx-x)^2/(w^3 sigma^2)
                        dr[i * 4] += u * ddx / (w2 * sig2);
                        dr[i * 4 + 1] += u * ddy / (h2 * sig2);
                        dr[i * 4 + 2] += u * ddx * ddx / (w2 * r[2] * sig2);
                        dr[i * 4 + 3] += u * ddy * ddy / (h2 * r[3] * sig2);
                    }
                }
            })),
        )
    }

    /// Cosine alignment loss `1 - a.t / (|a||t|)` against a detached target.
    ///
    /// The target enters by value, so no gradient can flow into it; norms
    /// are epsilon-guarded.
    pub fn cosine_loss(&mut self, a: VarId, target: &Tensor<S>) -> VarId {
        let va = self.value(a);
        assert_eq!(va.len(), target.len(), "cosine_loss: length mismatch");
        let eps = S::from_f64(1e-12);
        let tv = target.data().to_vec();
        let mut dot = S::zero();
        let mut na2 = S::zero();
        let mut nt2 = S::zero();
        for (&x, &t0) in va.data().iter().zip(&tv) {
            dot += x * t0;
            na2 += x * x;
            nt2 += t0 * t0;
        }
        let na = na2.sqrt().max(eps);
        let nt = nt2.sqrt().max(eps);
        let loss = S::one() - dot / (na * nt);
        self.unary("cosine_loss", a, Tensor::scalar(loss), move |t, up, a, da| {
            let av = t.value(a).data();
            let mut dot = S::zero();
            let mut na2 = S::zero();
            let mut nt2 = S::zero();
            for (&x, &t0) in av.iter().zip(&tv) {
                dot += x * t0;
                na2 += x * x;
                nt2 += t0 * t0;
            }
            let na = na2.sqrt().max(eps);
            let nt = nt2.sqrt().max(eps);
            let u = up.data()[0];
            let inv_nant = (na * nt).recip();
            let coef = dot / (na * na * na * nt);
            for ((d, &x), &t0) in da.iter_mut().zip(av).zip(&tv) {
                *d += u * (x * coef - t0 * inv_nant);
            }
        })
    }

    /// Mean cross-entropy of row logits against integer labels.
    ///
    /// Rows whose label equals `ignore` contribute neither loss nor
    /// gradient; if every row is ignored the loss is exactly zero.
    pub fn cross_entropy_rows(&mut self, logits: VarId, labels: &[u32], ignore: u32) -> VarId {
        let vl = self.value(logits);
        let (r, l) = (vl.rows(), vl.cols());
        assert_eq!(labels.len(), r, "cross_entropy_rows: label count mismatch");
        for &lab in labels {
            assert!(lab == ignore || (lab as usize) < l, "label {lab} out of range for {l} classes");
        }
        let labels = labels.to_vec();
        let valid = labels.iter().filter(|&&lab| lab != ignore).count();
        let mut loss = S::zero();
        if valid > 0 {
            for (row, &lab) in vl.data().chunks(l).zip(&labels) {
                if lab == ignore {
                    continue;
                }
                let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
                let mut sum = S::zero();
                for &v in row {
                    sum += (v - max).exp();
                }
                let lse = max + sum.ln();
                loss += lse - row[lab as usize];
            }
            loss = loss / S::from_usize(valid);
        }
        self.unary("cross_entropy_rows", logits, Tensor::scalar(loss), move |t, up, logits, da| {
            if valid == 0 {
                return;
            }
            let lv = t.value(logits).data();
            let u = up.data()[0] / S::from_usize(valid);
            for ((drow, row), &lab) in da.chunks_mut(l).zip(lv.chunks(l)).zip(&labels) {
                if lab == ignore {
                    continue;
                }
                let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
                let mut sum = S::zero();
                for &v in row {
                    sum += (v - max).exp();
                }
                for (j, (d, &v)) in drow.iter_mut().zip(row).enumerate() {
                    let p = (v - max).exp() / sum;
                    let y = if j == lab as usize { S::one() } else { S::zero() };
                    *d += u * (p - y);
                }
            }
        })
    }

    /// Mean cross-entropy of row logits against a detached target
    /// distribution (soft labels), used by the distillation variant.
    pub fn cross_entropy_soft(&mut self, logits: VarId, targets: &Tensor<S>) -> VarId {
        let vl = self.value(logits);
        assert_eq!(vl.shape(), targets.shape(), "cross_entropy_soft: shape mismatch");
        let (r, l) = (vl.rows(), vl.cols());
        let tv = targets.data().to_vec();
        let mut loss = S::zero();
        for (row, trow) in vl.data().chunks(l).zip(tv.chunks(l)) {
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for &v in row {
                sum += (v - max).exp();
            }
            let lse = max + sum.ln();
            for (&v, &t0) in row.iter().zip(trow) {
                loss -= t0 * (v - lse);
            }
        }
        loss = loss / S::from_usize(r);
        self.unary("cross_entropy_soft", logits, Tensor::scalar(loss), move |t, up, logits, da| {
            let lv = t.value(logits).data();
            let u = up.data()[0] / S::from_usize(r);
            for ((drow, row), trow) in da.chunks_mut(l).zip(lv.chunks(l)).zip(tv.chunks(l)) {
                let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
                let mut sum = S::zero();
                for &v in row {
                    sum += (v - max).exp();
                }
                let mut tmass = S::zero();
                for &t0 in trow {
                    tmass += t0;
                }
                for ((d, &v), &t0) in drow.iter_mut().zip(row).zip(trow) {
                    let p = (v - max).exp() / sum;
                    *d += u * (p * tmass - t0);
                }
            }
        })
    }
}

struct SampleSite<S> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: S,
    fy: S,
    w00: S,
    w01: S,
    w10: S,
    w11: S,
    dx_scale: S,
    dy_scale: S,
}

#[derive(Clone, Copy)]
struct SampleGeom {
    h: usize,
    w: usize,
    #[allow(dead_code)]
    c: usize,
}

impl SampleGeom {
    /// Map a normalized coordinate pair to texel indices + weights.
    ///
    /// Texel centers sit at (j + 0.5)/W; out-of-range coordinates clamp to
    /// the border (with zero positional gradient there).
    fn site<S: Scalar>(&self, ux: S, uy: S) -> SampleSite<S> {
        let w_s = S::from_usize(self.w);
        let h_s = S::from_usize(self.h);
        let half = S::from_f64(0.5);
        let raw_x = ux * w_s - half;
        let raw_y = uy * h_s - half;
        let max_x = S::from_usize(self.w - 1);
        let max_y = S::from_usize(self.h - 1);
        let cx = raw_x.max(S::zero()).min(max_x);
        let cy = raw_y.max(S::zero()).min(max_y);
        let x0f = cx.floor();
        let y0f = cy.floor();
        let fx = cx - x0f;
        let fy = cy - y0f;
        let x0 = x0f.to_f64() as usize;
        let y0 = y0f.to_f64() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let one = S::one();
        SampleSite {
            x0,
            x1,
            y0,
            y1,
            fx,
            fy,
            w00: (one - fx) * (one - fy),
            w01: fx * (one - fy),
            w10: (one - fx) * fy,
            w11: fx * fy,
            dx_scale: if raw_x > S::zero() && raw_x < max_x { w_s } else { S::zero() },
            dy_scale: if raw_y > S::zero() && raw_y < max_y { h_s } else { S::zero() },
        }
    }
}

/// Edge coordinates (left, top, right, bottom) of an `[x,y,w,h]` RoI.
fn roi_edges<S: Scalar>(r: &[S]) -> [S; 4] {
    let half = S::from_f64(0.5);
    [r[0] - half * r[2], r[1] - half * r[3], r[0] + half * r[2], r[1] + half * r[3]]
}

/// Geometric frequency ladder from 1 to `PE_MAX_FREQ` with `k` rungs.
pub fn pe_frequencies<S: Scalar>(k: usize) -> Vec<S> {
    assert!(k >= 1);
    if k == 1 {
        return vec![S::one()];
    }
    (0..k)
        .map(|i| S::from_f64(PE_MAX_FREQ.powf(i as f64 / (k - 1) as f64)))
        .collect()
}
