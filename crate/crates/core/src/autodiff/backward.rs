//! Reverse sweep and per-op vector-Jacobian products.

use std::collections::HashMap;

use super::ops::{bilinear_taps, gemm_into, sigmoid};
use super::{BinKind, Gradients, Op, Tape, UnKind, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

struct GradBuf<F> {
    slots: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> GradBuf<F> {
    fn slot(&mut self, v: Var, len: usize) -> &mut Vec<F> {
        self.slots[v.0].get_or_insert_with(|| vec![F::zero(); len])
    }

    fn add(&mut self, v: Var, g: &[F]) {
        let s = self.slot(v, g.len());
        for (a, &b) in s.iter_mut().zip(g) {
            *a = *a + b;
        }
    }

    fn add_owned(&mut self, v: Var, g: Vec<F>) {
        match &mut self.slots[v.0] {
            Some(s) => {
                for (a, b) in s.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

pub(super) fn run<F: Scalar>(tape: Tape<F>, loss: Var) -> Result<Gradients<F>> {
    if tape.nodes.is_empty() {
        return Err(Error::Contract("backward on an empty tape".into()));
    }
    if tape.node(loss).value.len() != 1 {
        return Err(Error::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            tape.shape(loss)
        )));
    }
    let mut grads = GradBuf {
        slots: (0..tape.nodes.len()).map(|_| None).collect(),
    };
    grads.slots[loss.0] = Some(vec![F::one()]);
    let mut leaves = HashMap::new();
    let mut params = Vec::new();

    for i in (0..=loss.0).rev() {
        let Some(g) = grads.slots[i].take() else {
            continue;
        };
        let node = &tape.nodes[i];
        if !node.requires_grad {
            continue;
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient flowing into {} node #{i} (shape {:?})",
                node.op.name(),
                node.shape
            )));
        }
        match &node.op {
            Op::Leaf { param } => {
                match param {
                    Some(id) => params.push((*id, g)),
                    None => {
                        leaves.insert(Var(i), g);
                    }
                }
                continue;
            }
            op => {
                vjp(&tape, op, &node.value, &g, &mut grads);
                for v in op.inputs() {
                    if let Some(gi) = &grads.slots[v.0] {
                        if gi.iter().any(|x| !x.is_finite()) {
                            return Err(Error::NonFinite(format!(
                                "gradient produced by {} node #{i} (shape {:?})",
                                op.name(),
                                node.shape
                            )));
                        }
                    }
                }
            }
        }
    }
    params.sort_by_key(|(id, _)| *id);
    Ok(Gradients { leaves, params })
}

fn vjp<F: Scalar>(tape: &Tape<F>, op: &Op<F>, y: &[F], g: &[F], grads: &mut GradBuf<F>) {
    match *op {
        Op::Leaf { .. } => unreachable!(),
        Op::MatMul { a, b, ta, tb } => {
            let sa = tape.shape(a);
            let sb = tape.shape(b);
            let da = (sa[0], sa[1]);
            let db = (sb[0], sb[1]);
            let m = if ta { da.1 } else { da.0 };
            let n = if tb { db.0 } else { db.1 };
            if tape.rg(a) {
                let mut ga = vec![F::zero(); sa[0] * sa[1]];
                if ta {
                    // A stored k×m: dA = op(B) · dCᵀ
                    gemm_into(tape.value(b), db, tb, g, (m, n), true, &mut ga, F::zero());
                } else {
                    // dA = dC · op(B)ᵀ
                    gemm_into(g, (m, n), false, tape.value(b), db, !tb, &mut ga, F::zero());
                }
                grads.add_owned(a, ga);
            }
            if tape.rg(b) {
                let mut gb = vec![F::zero(); sb[0] * sb[1]];
                if tb {
                    // B stored n×k: dB = dCᵀ · op(A)
                    gemm_into(g, (m, n), true, tape.value(a), da, ta, &mut gb, F::zero());
                } else {
                    // dB = op(A)ᵀ · dC
                    gemm_into(tape.value(a), da, !ta, g, (m, n), false, &mut gb, F::zero());
                }
                grads.add_owned(b, gb);
            }
        }
        Op::Binary { kind, a, b } => {
            let av = tape.value(a);
            let bv = tape.value(b);
            let bn = bv.len();
            if tape.rg(a) {
                match kind {
                    BinKind::Add | BinKind::Sub => grads.add(a, g),
                    BinKind::Mul => {
                        let ga = g.iter().enumerate().map(|(i, &gi)| gi * bv[i % bn]).collect();
                        grads.add_owned(a, ga);
                    }
                }
            }
            if tape.rg(b) {
                let mut gb = vec![F::zero(); bn];
                match kind {
                    BinKind::Add => g.iter().enumerate().for_each(|(i, &gi)| gb[i % bn] = gb[i % bn] + gi),
                    BinKind::Sub => g.iter().enumerate().for_each(|(i, &gi)| gb[i % bn] = gb[i % bn] - gi),
                    BinKind::Mul => g
                        .iter()
                        .enumerate()
                        .for_each(|(i, &gi)| gb[i % bn] = gb[i % bn] + gi * av[i]),
                }
                grads.add_owned(b, gb);
            }
        }
        Op::Scale { a, c } => {
            grads.add_owned(a, g.iter().map(|&v| v * c).collect());
        }
        Op::Unary { kind, a } => {
            let x = tape.value(a);
            let ga: Vec<F> = match kind {
                UnKind::Relu => g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > F::zero() { gi } else { F::zero() })
                    .collect(),
                UnKind::Tanh => g.iter().zip(y).map(|(&gi, &yi)| gi * (F::one() - yi * yi)).collect(),
                UnKind::Sigmoid => g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (F::one() - yi)).collect(),
                UnKind::Exp => g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect(),
                UnKind::Log => g.iter().zip(x).map(|(&gi, &xi)| gi / xi).collect(),
            };
            grads.add_owned(a, ga);
        }
        Op::Softmax { a, split } => {
            let mut ga = vec![F::zero(); y.len()];
            for o in 0..split.outer {
                for i in 0..split.inner {
                    let dot: F = (0..split.len)
                        .map(|j| {
                            let idx = split.at(o, j, i);
                            g[idx] * y[idx]
                        })
                        .sum();
                    for j in 0..split.len {
                        let idx = split.at(o, j, i);
                        ga[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            grads.add_owned(a, ga);
        }
        Op::LogSoftmax { a, split } => {
            let mut ga = vec![F::zero(); y.len()];
            for o in 0..split.outer {
                for i in 0..split.inner {
                    let gsum: F = (0..split.len).map(|j| g[split.at(o, j, i)]).sum();
                    for j in 0..split.len {
                        let idx = split.at(o, j, i);
                        ga[idx] = g[idx] - y[idx].exp() * gsum;
                    }
                }
            }
            grads.add_owned(a, ga);
        }
        Op::Concat {
            ref parts,
            outer,
            ref blocks,
        } => {
            let row: usize = blocks.iter().sum();
            let mut offset = 0;
            for (&p, &blk) in parts.iter().zip(blocks) {
                if tape.rg(p) {
                    let mut gp = Vec::with_capacity(outer * blk);
                    for o in 0..outer {
                        gp.extend_from_slice(&g[o * row + offset..o * row + offset + blk]);
                    }
                    grads.add_owned(p, gp);
                }
                offset += blk;
            }
        }
        Op::Gather { a, ref idx } => {
            let n = tape.value(a).len();
            let s = grads.slot(a, n);
            for (&src, &gi) in idx.iter().zip(g) {
                s[src] = s[src] + gi;
            }
        }
        Op::Reshape { a } => grads.add(a, g),
        Op::Sum { a } => {
            let n = tape.value(a).len();
            grads.add_owned(a, vec![g[0]; n]);
        }
        Op::Mean { a } => {
            let n = tape.value(a).len();
            grads.add_owned(a, vec![g[0] / F::c(n as f64); n]);
        }
        Op::L2NormRows { a, eps, ref norms } => {
            let d = *tape.shape(a).last().expect("rank ≥ 1");
            let mut ga = vec![F::zero(); y.len()];
            for (r, &n) in norms.iter().enumerate() {
                let yr = &y[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let out = &mut ga[r * d..(r + 1) * d];
                if n > eps {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for k in 0..d {
                        out[k] = (gr[k] - yr[k] * dot) / n;
                    }
                } else {
                    for k in 0..d {
                        out[k] = gr[k] / eps;
                    }
                }
            }
            grads.add_owned(a, ga);
        }
        Op::Standardize {
            a,
            split,
            ref inv_std,
        } => {
            let n = F::c(split.len as f64);
            let mut ga = vec![F::zero(); y.len()];
            let mut gi_idx = 0;
            for o in 0..split.outer {
                for i in 0..split.inner {
                    let is = inv_std[gi_idx];
                    gi_idx += 1;
                    let mut mg = F::zero();
                    let mut mgy = F::zero();
                    for j in 0..split.len {
                        let idx = split.at(o, j, i);
                        mg = mg + g[idx];
                        mgy = mgy + g[idx] * y[idx];
                    }
                    mg = mg / n;
                    mgy = mgy / n;
                    for j in 0..split.len {
                        let idx = split.at(o, j, i);
                        ga[idx] = is * (g[idx] - mg - y[idx] * mgy);
                    }
                }
            }
            grads.add_owned(a, ga);
        }
        Op::Conv2d { x, k, geom } => {
            let rows = geom.oh * geom.ow;
            let kdim = geom.kh * geom.kw * geom.cin;
            let cols_owned;
            let cols: &[F] = if geom.is_pointwise() {
                tape.value(x)
            } else {
                cols_owned = geom.im2col(tape.value(x));
                &cols_owned
            };
            if tape.rg(k) {
                let mut gk = vec![F::zero(); kdim * geom.cout];
                gemm_into(cols, (rows, kdim), true, g, (rows, geom.cout), false, &mut gk, F::zero());
                grads.add_owned(k, gk);
            }
            if tape.rg(x) {
                let mut gcols = vec![F::zero(); rows * kdim];
                gemm_into(g, (rows, geom.cout), false, tape.value(k), (kdim, geom.cout), true, &mut gcols, F::zero());
                if geom.is_pointwise() {
                    grads.add_owned(x, gcols);
                } else {
                    let mut gx = vec![F::zero(); geom.h * geom.w * geom.cin];
                    geom.col2im(&gcols, &mut gx);
                    grads.add_owned(x, gx);
                }
            }
        }
        Op::Upsample { x, h, w, c, factor } => {
            let ty = bilinear_taps(h, factor);
            let tx = bilinear_taps(w, factor);
            let ow = w * factor;
            let mut gx = vec![F::zero(); h * w * c];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                let wy = F::c(wy);
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let wx = F::c(wx);
                    let src = (oy * ow + ox) * c;
                    let taps = [
                        ((y0 * w + x0) * c, (F::one() - wy) * (F::one() - wx)),
                        ((y0 * w + x1) * c, (F::one() - wy) * wx),
                        ((y1 * w + x0) * c, wy * (F::one() - wx)),
                        ((y1 * w + x1) * c, wy * wx),
                    ];
                    for (p, wt) in taps {
                        for ch in 0..c {
                            gx[p + ch] = gx[p + ch] + wt * g[src + ch];
                        }
                    }
                }
            }
            grads.add_owned(x, gx);
        }
        Op::BceMean { x, ref target } => {
            let xv = tape.value(x);
            let scale = g[0] / F::c(xv.len() as f64);
            let gx = xv
                .iter()
                .zip(target.iter())
                .map(|(&xi, &ti)| (sigmoid(xi) - ti) * scale)
                .collect();
            grads.add_owned(x, gx);
        }
    }
}
