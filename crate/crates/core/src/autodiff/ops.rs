//! Forward rules. Every method records one node whose backward rule lives
//! in `backward.rs`.

use std::sync::Arc;

use super::{AxisSplit, BinKind, Op, Tape, UnKind, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Geometry of a recorded 2-D convolution over an `H×W×C` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub(crate) fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Lowers the input into a `(oh*ow) × (kh*kw*cin)` patch matrix.
    pub(crate) fn im2col<F: Scalar>(&self, x: &[F]) -> Vec<F> {
        let cols = self.kh * self.kw * self.cin;
        let mut out = vec![F::zero(); self.oh * self.ow * cols];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut out[(oy * self.ow + ox) * cols..][..cols];
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = (iy as usize * self.w + ix as usize) * self.cin;
                        let dst = (ky * self.kw + kx) * self.cin;
                        row[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                    }
                }
            }
        }
        out
    }

    /// Scatter-adds a patch-matrix gradient back onto the input grid.
    pub(crate) fn col2im<F: Scalar>(&self, cols_grad: &[F], dx: &mut [F]) {
        let cols = self.kh * self.kw * self.cin;
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &cols_grad[(oy * self.ow + ox) * cols..][..cols];
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * self.w + ix as usize) * self.cin;
                        let src = (ky * self.kw + kx) * self.cin;
                        for c in 0..self.cin {
                            dx[dst + c] = dx[dst + c] + row[src + c];
                        }
                    }
                }
            }
        }
    }
}

/// Source taps of half-pixel bilinear resampling along one axis:
/// `(lo, hi, weight_of_hi)` per output coordinate.
pub(crate) fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// `C = op(A)·op(B)` for row-major buffers, `op` optionally transposing.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<F: Scalar>(
    a: &[F],
    a_shape: (usize, usize),
    ta: bool,
    b: &[F],
    b_shape: (usize, usize),
    tb: bool,
    c: &mut [F],
    beta: F,
) {
    let (ar, ac) = a_shape;
    let (br, bc) = b_shape;
    let (m, k, rsa, csa) = if ta { (ac, ar, 1, ac as isize) } else { (ar, ac, ac as isize, 1) };
    let (k2, n, rsb, csb) = if tb { (bc, br, 1, bc as isize) } else { (br, bc, bc as isize, 1) };
    debug_assert_eq!(k, k2);
    debug_assert_eq!(c.len(), m * n);
    assert!(a.len() >= ar * ac && b.len() >= br * bc);
    // SAFETY: extents and strides above describe exactly the slices passed in,
    // and `c` is a distinct mutable borrow.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn as_2d(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

/// Whether `b` broadcasts onto `a` along trailing axes.
fn trailing_broadcast(a: &[usize], b: &[usize]) -> bool {
    let bn: usize = b.iter().product();
    if bn == 1 {
        return true;
    }
    let b_core: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
    a.len() >= b_core.len() && a[a.len() - b_core.len()..] == b_core[..]
}

impl<F: Scalar> Tape<F> {
    /// Matrix product of two rank-2 nodes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (Some(da), Some(db)) = (as_2d(&sa), as_2d(&sb)) else {
            return Err(Error::dim("matmul", &sa, &sb));
        };
        let (m, k) = if ta { (da.1, da.0) } else { da };
        let (k2, n) = if tb { (db.1, db.0) } else { db };
        if k != k2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_into(self.value(a), da, ta, self.value(b), db, tb, &mut out, F::zero());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb }, rg))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if !trailing_broadcast(&sa, &sb) {
            return Err(Error::dim(
                match kind {
                    BinKind::Add => "add",
                    BinKind::Sub => "sub",
                    BinKind::Mul => "mul",
                },
                &sa,
                &sb,
            ));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let bn = bv.len();
        let out: Vec<F> = match kind {
            BinKind::Add => av.iter().enumerate().map(|(i, &x)| x + bv[i % bn]).collect(),
            BinKind::Sub => av.iter().enumerate().map(|(i, &x)| x - bv[i % bn]).collect(),
            BinKind::Mul => av.iter().enumerate().map(|(i, &x)| x * bv[i % bn]).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(sa, out, Op::Binary { kind, a, b }, rg))
    }

    /// `a + b`; `b` may be a scalar or broadcast along leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    /// Elementwise (Hadamard) product with the same broadcasting as `add`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, c }, rg)
    }

    fn unary(&mut self, kind: UnKind, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<F> = match kind {
            UnKind::Relu => av.iter().map(|&x| if x > F::zero() { x } else { F::zero() }).collect(),
            UnKind::Tanh => av.iter().map(|&x| x.tanh()).collect(),
            UnKind::Sigmoid => av.iter().map(|&x| sigmoid(x)).collect(),
            UnKind::Exp => av.iter().map(|&x| x.exp()).collect(),
            UnKind::Log => av.iter().map(|&x| x.ln()).collect(),
        };
        if kind == UnKind::Relu {
            let bits: Vec<u8> = av
                .iter()
                .map(|&x| (x > F::zero()) as u8 + (x >= F::zero()) as u8)
                .collect();
            self.note_kink(1, bits.into_iter());
        }
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Unary { kind, a }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnKind::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnKind::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnKind::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(UnKind::Log, a)
    }

    /// Softmax along `axis` with max-subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(a, axis, None)
    }

    /// Softmax along `axis`. Entries whose `keep` flag is false get exactly
    /// zero probability; a slice with no kept entry is all zeros.
    pub fn softmax_masked(&mut self, a: Var, axis: usize, keep: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        if let Some(k) = keep {
            if k.len() != self.value(a).len() {
                return Err(Error::dim("softmax mask", &shape, &[k.len()]));
            }
        }
        let split = AxisSplit::new(&shape, axis);
        let x = self.value(a);
        let mut out = vec![F::zero(); x.len()];
        let kept = |idx: usize| keep.is_none_or(|k| k[idx]);
        for o in 0..split.outer {
            for i in 0..split.inner {
                let mut max = F::neg_infinity();
                for j in 0..split.len {
                    let idx = split.at(o, j, i);
                    if kept(idx) && x[idx] > max {
                        max = x[idx];
                    }
                }
                if max == F::neg_infinity() {
                    continue;
                }
                let mut sum = F::zero();
                for j in 0..split.len {
                    let idx = split.at(o, j, i);
                    if kept(idx) {
                        let e = (x[idx] - max).exp();
                        out[idx] = e;
                        sum = sum + e;
                    }
                }
                for j in 0..split.len {
                    let idx = split.at(o, j, i);
                    out[idx] = out[idx] / sum;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Softmax { a, split }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("log_softmax axis {axis} out of range for {shape:?}")));
        }
        let split = AxisSplit::new(&shape, axis);
        let x = self.value(a);
        let mut out = vec![F::zero(); x.len()];
        for o in 0..split.outer {
            for i in 0..split.inner {
                let max = (0..split.len)
                    .map(|j| x[split.at(o, j, i)])
                    .fold(F::neg_infinity(), F::max);
                let lse = max
                    + (0..split.len)
                        .map(|j| (x[split.at(o, j, i)] - max).exp())
                        .sum::<F>()
                        .ln();
                for j in 0..split.len {
                    let idx = split.at(o, j, i);
                    out[idx] = x[idx] - lse;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::LogSoftmax { a, split }, rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let blocks: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let total: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(total);
        for o in 0..outer {
            for (&p, &blk) in parts.iter().zip(&blocks) {
                out.extend_from_slice(&self.value(p)[o * blk..(o + 1) * blk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out_shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                blocks,
            },
            rg,
        ))
    }

    /// `out[i] = a[idx[i]]` with the given output shape.
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let len = self.value(a).len();
        if n != idx.len() || idx.iter().any(|&i| i >= len) {
            return Err(Error::dim("gather", self.shape(a), shape));
        }
        let av = self.value(a);
        let out = idx.iter().map(|&i| av[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), out, Op::Gather { a, idx }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let value = Arc::clone(&self.node(a).value);
        let rg = self.rg(a);
        Ok(self.push_arc(shape.to_vec(), value, Op::Reshape { a }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (r, c) = as_2d(&s).ok_or_else(|| Error::dim("transpose", &s, &[2]))?;
        let idx: Vec<usize> = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(a, Arc::new(idx), &[c, r])
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::Contract(format!(
                "narrow [{start}, {}) out of range on axis {axis} of {s:?}",
                start + len
            )));
        }
        let split = AxisSplit::new(&s, axis);
        let mut idx = Vec::with_capacity(split.outer * len * split.inner);
        for o in 0..split.outer {
            for j in start..start + len {
                for i in 0..split.inner {
                    idx.push(split.at(o, j, i));
                }
            }
        }
        let mut out_shape = s;
        out_shape[axis] = len;
        self.gather(a, Arc::new(idx), &out_shape)
    }

    /// Selects rows (leading-axis slices) by index.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let inner: usize = s[1..].iter().product();
        if rows.iter().any(|&r| r >= s[0]) || rows.is_empty() {
            return Err(Error::Contract(format!("row selection out of range for {s:?}")));
        }
        let idx: Vec<usize> = rows.iter().flat_map(|&r| (r * inner)..((r + 1) * inner)).collect();
        let mut out_shape = s;
        out_shape[0] = rows.len();
        self.gather(a, Arc::new(idx), &out_shape)
    }

    /// `H×W×C → (H/f)×(W/f)×(f·f·C)`, each output cell holding its f×f
    /// neighborhood in row-major order.
    pub fn space_to_depth(&mut self, a: Var, f: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let [h, w, c] = s[..] else {
            return Err(Error::dim("space_to_depth", &s, &[3]));
        };
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Contract(format!(
                "spatial extents {h}×{w} not divisible by {f}"
            )));
        }
        let (oh, ow) = (h / f, w / f);
        let mut idx = Vec::with_capacity(h * w * c);
        for by in 0..oh {
            for bx in 0..ow {
                for dy in 0..f {
                    for dx in 0..f {
                        let base = ((by * f + dy) * w + bx * f + dx) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
        self.gather(a, Arc::new(idx), &[oh, ow, f * f * c])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().copied().sum::<F>() / F::c(v.len() as f64);
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean { a }, rg)
    }

    /// Divides each last-axis row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, a: Var, eps: F) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("rank ≥ 1");
        let x = self.value(a);
        let mut out = vec![F::zero(); x.len()];
        let mut norms = Vec::with_capacity(x.len() / d);
        for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            let denom = n.max(eps);
            for (ov, &xv) in o.iter_mut().zip(row) {
                *ov = xv / denom;
            }
            norms.push(n);
        }
        let floors: Vec<u8> = norms.iter().map(|&n| (n > eps) as u8).collect();
        self.note_kink(2, floors.into_iter());
        let rg = self.rg(a);
        self.push(shape, out, Op::L2NormRows { a, eps, norms }, rg)
    }

    /// Zero-mean, unit-variance along `axis` for every other index, with
    /// biased variance and `eps` added before the square root. Returns the
    /// normalized node plus the per-group mean and biased variance.
    pub fn standardize(&mut self, a: Var, axis: usize, eps: F) -> Result<(Var, Vec<F>, Vec<F>)> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("norm axis {axis} out of range for {shape:?}")));
        }
        let split = AxisSplit::new(&shape, axis);
        let x = self.value(a);
        let n = F::c(split.len as f64);
        let groups = split.outer * split.inner;
        let mut out = vec![F::zero(); x.len()];
        let mut means = Vec::with_capacity(groups);
        let mut vars = Vec::with_capacity(groups);
        let mut inv_std = Vec::with_capacity(groups);
        for o in 0..split.outer {
            for i in 0..split.inner {
                let mean = (0..split.len).map(|j| x[split.at(o, j, i)]).sum::<F>() / n;
                let var = (0..split.len)
                    .map(|j| {
                        let d = x[split.at(o, j, i)] - mean;
                        d * d
                    })
                    .sum::<F>()
                    / n;
                let is = F::one() / (var + eps).sqrt();
                for j in 0..split.len {
                    let idx = split.at(o, j, i);
                    out[idx] = (x[idx] - mean) * is;
                }
                means.push(mean);
                vars.push(var);
                inv_std.push(is);
            }
        }
        let rg = self.rg(a);
        let v = self.push(shape, out, Op::Standardize { a, split, inv_std }, rg);
        Ok((v, means, vars))
    }

    /// Cross-correlation of `x: H×W×Cin` with `k: kh×kw×Cin×Cout`, zero padded.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        let ([h, w, cin], [kh, kw, kcin, cout]) = (&sx[..], &sk[..]) else {
            return Err(Error::dim("conv2d", &sx, &sk));
        };
        let (h, w, cin, kh, kw, cout) = (*h, *w, *cin, *kh, *kw, *cout);
        if cin != *kcin {
            return Err(Error::dim("conv2d", &sx, &sk));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Contract(format!(
                "conv2d geometry invalid: input {sx:?}, kernel {sk:?}, stride {stride}, pad {pad}"
            )));
        }
        let geom = ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let rows = geom.oh * geom.ow;
        let kdim = kh * kw * cin;
        let mut out = vec![F::zero(); rows * cout];
        if geom.is_pointwise() {
            gemm_into(self.value(x), (rows, kdim), false, self.value(k), (kdim, cout), false, &mut out, F::zero());
        } else {
            let cols = geom.im2col(self.value(x));
            gemm_into(&cols, (rows, kdim), false, self.value(k), (kdim, cout), false, &mut out, F::zero());
        }
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(vec![geom.oh, geom.ow, cout], out, Op::Conv2d { x, k, geom }, rg))
    }

    /// Bilinear upsampling of an `H×W×C` map by an integer factor, sampling
    /// at half-pixel centers and clamping at the borders.
    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [h, w, c] = s[..] else {
            return Err(Error::dim("bilinear_upsample", &s, &[3]));
        };
        if factor == 0 {
            return Err(Error::Contract("upsample factor must be ≥ 1".into()));
        }
        let ty = bilinear_taps(h, factor);
        let tx = bilinear_taps(w, factor);
        let xv = self.value(x);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![F::zero(); oh * ow * c];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let wy = F::c(wy);
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let wx = F::c(wx);
                let w00 = (F::one() - wy) * (F::one() - wx);
                let w01 = (F::one() - wy) * wx;
                let w10 = wy * (F::one() - wx);
                let w11 = wy * wx;
                let dst = (oy * ow + ox) * c;
                let p00 = (y0 * w + x0) * c;
                let p01 = (y0 * w + x1) * c;
                let p10 = (y1 * w + x0) * c;
                let p11 = (y1 * w + x1) * c;
                for ch in 0..c {
                    out[dst + ch] =
                        w00 * xv[p00 + ch] + w01 * xv[p01 + ch] + w10 * xv[p10 + ch] + w11 * xv[p11 + ch];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![oh, ow, c],
            out,
            Op::Upsample {
                x,
                h,
                w,
                c,
                factor,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of logits against a {0,1} target, computed
    /// as `max(x,0) − x·t + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, x: Var, target: Arc<Vec<F>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != target.len() {
            return Err(Error::dim("bce_with_logits", self.shape(x), &[target.len()]));
        }
        let n = F::c(xv.len() as f64);
        let total: F = xv
            .iter()
            .zip(target.iter())
            .map(|(&x, &t)| x.max(F::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![total / n], Op::BceMean { x, target }, rg))
    }
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
