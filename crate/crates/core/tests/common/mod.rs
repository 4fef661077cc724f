//! Naive-loop oracles and the differentiable op suite shared by the test targets.
#![allow(dead_code)]

use std::sync::Arc;

use coupalign::autodiff::{Tape, Var};
use coupalign::gradcheck::{grad_check, GradCheckReport};
use coupalign::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                c[i * n + j] += a[i * k + l] * b[l * n + j];
            }
        }
    }
    c
}

pub fn naive_conv(x: &[f64], h: usize, w: usize, cin: usize, k: &[f64], kh: usize, kw: usize, cout: usize, pad: usize) -> Vec<f64> {
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut s = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        for ci in 0..cin {
                            let iy = oy as isize + ky as isize - pad as isize;
                            let ix = ox as isize + kx as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += x[(iy as usize * w + ix as usize) * cin + ci]
                                * k[((ky * kw + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = s;
            }
        }
    }
    out
}

/// Direct per-pixel bilinear formula, independent of the tap tables.
pub fn naive_upsample(x: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
    let at = |y: usize, x_: usize| x[y * w + x_];
    let mut out = vec![0.0; h * f * w * f];
    for oy in 0..h * f {
        for ox in 0..w * f {
            let sy = ((oy as f64 + 0.5) / f as f64 - 0.5).max(0.0).min((h - 1) as f64);
            let sx = ((ox as f64 + 0.5) / f as f64 - 0.5).max(0.0).min((w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (dy, dx) = (sy - y0 as f64, sx - x0 as f64);
            out[oy * w * f + ox] = at(y0, x0) * (1.0 - dy) * (1.0 - dx)
                + at(y0, x1) * (1.0 - dy) * dx
                + at(y1, x0) * dy * (1.0 - dx)
                + at(y1, x1) * dy * dx;
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn bce_oracle(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&x, &y) in x.iter().zip(y) {
        let p = 1.0 / (1.0 + (-x).exp());
        s -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    s / x.len() as f64
}

/// Independent InfoNCE: explicit loops over pixels, prototypes as means.
pub fn info_nce_oracle(y: &[f64], d: usize, fg: &[bool], tau: f64, normalize: bool) -> f64 {
    let rows: Vec<&[f64]> = y.chunks(d).collect();
    let norm = |v: &[f64]| -> Vec<f64> {
        if !normalize {
            return v.to_vec();
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| x / n).collect()
    };
    let mean = |sel: bool| -> Vec<f64> {
        let mut m = vec![0.0; d];
        let mut c = 0.0;
        for (r, &f) in rows.iter().zip(fg) {
            if f == sel {
                for k in 0..d {
                    m[k] += r[k];
                }
                c += 1.0;
            }
        }
        m.iter().map(|v| v / c).collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let term = |sel: bool| -> f64 {
        let proto = norm(&mean(sel));
        let anchors: Vec<Vec<f64>> = rows.iter().zip(fg).filter(|(_, &f)| f == sel).map(|(r, _)| norm(r)).collect();
        let others: Vec<Vec<f64>> = rows.iter().zip(fg).filter(|(_, &f)| f != sel).map(|(r, _)| norm(r)).collect();
        let mut s = 0.0;
        for a in &anchors {
            let pos = (dot(a, &proto) / tau).exp();
            let neg: f64 = others.iter().map(|o| (dot(a, o) / tau).exp()).sum();
            s -= (pos / (pos + neg)).ln();
        }
        s / anchors.len() as f64
    };
    term(true) + term(false)
}

pub type Builder = Box<dyn Fn(&mut Tape<f64>, Var, &mut ChaCha8Rng) -> coupalign::Result<Var>>;

/// Reduces an arbitrary node to a scalar via a fixed random projection.
pub fn project(t: &mut Tape<f64>, y: Var, rng: &mut ChaCha8Rng) -> coupalign::Result<Var> {
    let shape = t.shape(y).to_vec();
    let r = rand_tensor(rng, &shape);
    let rv = t.constant(&r);
    let m = t.mul(y, rv)?;
    Ok(t.sum(m))
}

pub fn op_suite() -> Vec<(&'static str, Vec<usize>, Builder)> {
    vec![
        ("matmul", vec![4, 3], Box::new(|t, x, rng| {
            let b = rand_tensor(rng, &[3, 5]);
            let b = t.constant(&b);
            let y = t.matmul(x, b)?;
            project(t, y, rng)
        })),
        ("matmul_t", vec![4, 3], Box::new(|t, x, rng| {
            let y = t.matmul_t(x, x, true, false)?;
            let z = t.matmul_t(x, y, false, true)?;
            project(t, z, rng)
        })),
        ("add_broadcast", vec![4, 3], Box::new(|t, x, rng| {
            let r = t.narrow(x, 0, 1, 1)?;
            let r = t.reshape(r, &[3])?;
            let y = t.add(x, r)?;
            project(t, y, rng)
        })),
        ("sub_mul", vec![3, 4], Box::new(|t, x, rng| {
            let r = t.narrow(x, 0, 0, 1)?;
            let y = t.sub(x, r)?;
            let z = t.mul(y, x)?;
            project(t, z, rng)
        })),
        ("scale", vec![5], Box::new(|t, x, rng| {
            let y = t.scale(x, -1.7);
            project(t, y, rng)
        })),
        ("relu", vec![6, 2], Box::new(|t, x, rng| {
            let y = t.relu(x);
            project(t, y, rng)
        })),
        ("tanh", vec![6], Box::new(|t, x, rng| {
            let y = t.tanh(x);
            project(t, y, rng)
        })),
        ("sigmoid", vec![6], Box::new(|t, x, rng| {
            let y = t.sigmoid(x);
            project(t, y, rng)
        })),
        ("exp_log", vec![6], Box::new(|t, x, rng| {
            let e = t.exp(x);
            let y = t.ln(e);
            let z = t.mul(y, e)?;
            project(t, z, rng)
        })),
        ("softmax_axis0", vec![4, 3], Box::new(|t, x, rng| {
            let y = t.softmax(x, 0)?;
            project(t, y, rng)
        })),
        ("softmax_masked", vec![3, 4], Box::new(|t, x, rng| {
            let keep = [true, false, true, true, false, true, true, false, false, false, false, false];
            let y = t.softmax_masked(x, 1, Some(&keep))?;
            project(t, y, rng)
        })),
        ("log_softmax", vec![3, 5], Box::new(|t, x, rng| {
            let y = t.log_softmax(x, 1)?;
            project(t, y, rng)
        })),
        ("concat", vec![2, 3], Box::new(|t, x, rng| {
            let y = t.concat(&[x, x], 1)?;
            let z = t.concat(&[y, y], 0)?;
            project(t, z, rng)
        })),
        ("transpose_narrow_select", vec![4, 5], Box::new(|t, x, rng| {
            let y = t.transpose(x)?;
            let z = t.narrow(y, 1, 1, 2)?;
            let w = t.select_rows(z, &[4, 0, 0])?;
            project(t, w, rng)
        })),
        ("gather", vec![3, 4], Box::new(|t, x, rng| {
            let y = t.gather(x, Arc::new(vec![5, 0, 5, 11, 2, 7]), &[2, 3])?;
            project(t, y, rng)
        })),
        ("space_to_depth", vec![4, 4, 2], Box::new(|t, x, rng| {
            let y = t.space_to_depth(x, 2)?;
            project(t, y, rng)
        })),
        ("mean", vec![3, 3], Box::new(|t, x, _| {
            let y = t.mul(x, x)?;
            Ok(t.mean(y))
        })),
        ("l2_normalize", vec![4, 3], Box::new(|t, x, rng| {
            let y = t.l2_normalize(x, 1e-12);
            project(t, y, rng)
        })),
        ("layer_norm", vec![4, 5], Box::new(|t, x, rng| {
            let (y, _, _) = t.standardize(x, 1, 1e-5)?;
            project(t, y, rng)
        })),
        ("batch_norm", vec![6, 3], Box::new(|t, x, rng| {
            let (y, _, _) = t.standardize(x, 0, 1e-5)?;
            project(t, y, rng)
        })),
        ("conv3x3", vec![5, 4, 2], Box::new(|t, x, rng| {
            let k = rand_tensor(rng, &[3, 3, 2, 3]);
            let k = t.constant(&k);
            let y = t.conv2d(x, k, 1, 1)?;
            project(t, y, rng)
        })),
        ("conv_kernel_grad", vec![3, 3, 2, 2], Box::new(|t, k, rng| {
            let x = rand_tensor(rng, &[4, 5, 2]);
            let x = t.constant(&x);
            let y = t.conv2d(x, k, 1, 1)?;
            project(t, y, rng)
        })),
        ("conv1x1", vec![3, 3, 4], Box::new(|t, x, rng| {
            let k = rand_tensor(rng, &[1, 1, 4, 2]);
            let k = t.constant(&k);
            let y = t.conv2d(x, k, 1, 0)?;
            project(t, y, rng)
        })),
        ("bilinear", vec![3, 2, 2], Box::new(|t, x, rng| {
            let y = t.bilinear_upsample(x, 2)?;
            project(t, y, rng)
        })),
        ("bce", vec![2, 3], Box::new(|t, x, _| {
            let target = Arc::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
            t.bce_with_logits(x, target)
        })),
    ]
}

/// Grad-checks one suite entry at one seed.
pub fn op_grad_check(shape: &[usize], build: &Builder, seed: u64, h: f64, tol: f64) -> coupalign::Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let x = rand_tensor(&mut rng, shape);
    grad_check(
        |t, xv| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            build(t, xv, &mut r)
        },
        &x,
        h,
        tol,
    )
}
