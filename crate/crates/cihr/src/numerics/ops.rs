//! Differentiable operations. Each op computes its forward result eagerly
//! and registers a backward closure on the tape when any input participates
//! in gradient flow.
//!
//! Shapes are only as general as the model needs: 1-D vectors and 2-D
//! matrices, plus row-broadcast variants for per-position modulation.

use super::tensor::{Tape, Tensor};
use super::NumericsError;

fn rg(inputs: &[&Tensor]) -> bool {
    inputs.iter().any(|t| t.requires_grad())
}

fn finish(tape: &Tape, out: Tensor, inputs: &[&Tensor], op: &str) -> Tensor {
    out.debug_check_finite(op);
    if rg(inputs) {
        out.set_requires_grad(true);
    }
    let _ = tape;
    out
}

// ── dense kernels ────────────────────────────────────────────────────

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ  (dot-product form)
pub(crate) fn mm_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn mm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected matrix, got shape {s:?}");
    (s[0], s[1])
}

// ── elementwise / broadcast ──────────────────────────────────────────

pub fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "add shape mismatch");
    let vals: Vec<f64> = a
        .values()
        .iter()
        .zip(b.values().iter())
        .map(|(x, y)| x + y)
        .collect();
    let out = Tensor::from_vec(a.shape(), vals);
    if rg(&[a, b]) {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                if a.requires_grad() {
                    a.accumulate_grad(|ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                if b.requires_grad() {
                    b.accumulate_grad(|gb| gb.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
            }
        });
    }
    finish(tape, out, &[a, b], "add")
}

/// a[r×c] + row-broadcast b[c]
pub fn add_row(tape: &Tape, a: &Tensor, b: &Tensor) -> Tensor {
    let (r, c) = dims2(a);
    assert_eq!(b.shape(), vec![c], "add_row width mismatch");
    let bv = b.to_vec();
    let vals: Vec<f64> = a
        .values()
        .iter()
        .enumerate()
        .map(|(i, x)| x + bv[i % c])
        .collect();
    let out = Tensor::from_vec(vec![r, c], vals);
    if rg(&[a, b]) {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                if a.requires_grad() {
                    a.accumulate_grad(|ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                if b.requires_grad() {
                    b.accumulate_grad(|gb| {
                        for i in 0..r {
                            for j in 0..c {
                                gb[j] += g[i * c + j];
                            }
                        }
                    });
                }
            }
        });
    }
    finish(tape, out, &[a, b], "add_row")
}

pub fn mul(tape: &Tape, a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
    let vals: Vec<f64> = a
        .values()
        .iter()
        .zip(b.values().iter())
        .map(|(x, y)| x * y)
        .collect();
    let out = Tensor::from_vec(a.shape(), vals);
    if rg(&[a, b]) {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        let (av, bv) = (a.to_vec(), b.to_vec());
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                if a.requires_grad() {
                    a.accumulate_grad(|ga| {
                        ga.iter_mut()
                            .zip(g.iter().zip(&bv))
                            .for_each(|(x, (gy, y))| *x += gy * y)
                    });
                }
                if b.requires_grad() {
                    b.accumulate_grad(|gb| {
                        gb.iter_mut()
                            .zip(g.iter().zip(&av))
                            .for_each(|(x, (gy, y))| *x += gy * y)
                    });
                }
            }
        });
    }
    finish(tape, out, &[a, b], "mul")
}

/// a[r×c] ⊙ row-broadcast b[c]
pub fn mul_row(tape: &Tape, a: &Tensor, b: &Tensor) -> Tensor {
    let (r, c) = dims2(a);
    assert_eq!(b.shape(), vec![c], "mul_row width mismatch");
    let bv = b.to_vec();
    let vals: Vec<f64> = a
        .values()
        .iter()
        .enumerate()
        .map(|(i, x)| x * bv[i % c])
        .collect();
    let out = Tensor::from_vec(vec![r, c], vals);
    if rg(&[a, b]) {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        let av = a.to_vec();
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                if a.requires_grad() {
                    a.accumulate_grad(|ga| {
                        for i in 0..r * c {
                            ga[i] += g[i] * bv[i % c];
                        }
                    });
                }
                if b.requires_grad() {
                    b.accumulate_grad(|gb| {
                        for i in 0..r {
                            for j in 0..c {
                                gb[j] += g[i * c + j] * av[i * c + j];
                            }
                        }
                    });
                }
            }
        });
    }
    finish(tape, out, &[a, b], "mul_row")
}

pub fn scale(tape: &Tape, a: &Tensor, s: f64) -> Tensor {
    let vals: Vec<f64> = a.values().iter().map(|x| x * s).collect();
    let out = Tensor::from_vec(a.shape(), vals);
    if a.requires_grad() {
        let (a, o) = (a.clone(), out.clone());
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                a.accumulate_grad(|ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += s * y));
            }
        });
    }
    finish(tape, out, &[a], "scale")
}

pub fn add_const(tape: &Tape, a: &Tensor, c: f64) -> Tensor {
    let vals: Vec<f64> = a.values().iter().map(|x| x + c).collect();
    let out = Tensor::from_vec(a.shape(), vals);
    if a.requires_grad() {
        let (a, o) = (a.clone(), out.clone());
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                a.accumulate_grad(|ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
            }
        });
    }
    finish(tape, out, &[a], "add_const")
}

// ── matrix products ──────────────────────────────────────────────────

pub fn matmul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = dims2(a);
    let (k2, n) = dims2(b);
    if k != k2 {
        return Err(NumericsError::DimensionMismatch {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut vals = vec![0.0; m * n];
    mm_acc(&a.values(), &b.values(), m, k, n, &mut vals);
    let out = Tensor::from_vec(vec![m, n], vals);
    if rg(&[a, b]) {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        let (av, bv) = (a.to_vec(), b.to_vec());
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                if a.requires_grad() {
                    // a.grad += g · bᵀ
                    a.accumulate_grad(|ga| mm_nt_acc(&g, &bv, m, n, k, ga));
                }
                if b.requires_grad() {
                    // b.grad += aᵀ · g
                    b.accumulate_grad(|gb| mm_tn_acc(&av, &g, m, k, n, gb));
                }
            }
        });
    }
    Ok(finish(tape, out, &[a, b], "matmul"))
}

/// a[m×k] · b[n×k]ᵀ → [m×n]; the attention-score product.
pub fn matmul_nt(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = dims2(a);
    let (n, k2) = dims2(b);
    if k != k2 {
        return Err(NumericsError::DimensionMismatch {
            op: "matmul_nt",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut vals = vec![0.0; m * n];
    mm_nt_acc(&a.values(), &b.values(), m, k, n, &mut vals);
    let out = Tensor::from_vec(vec![m, n], vals);
    if rg(&[a, b]) {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        let (av, bv) = (a.to_vec(), b.to_vec());
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                if a.requires_grad() {
                    // a.grad += g · b   ([m×n]·[n×k])
                    a.accumulate_grad(|ga| mm_acc(&g, &bv, m, n, k, ga));
                }
                if b.requires_grad() {
                    // b.grad += gᵀ · a  ([n×m]·[m×k])
                    b.accumulate_grad(|gb| mm_tn_acc(&g, &av, m, n, k, gb));
                }
            }
        });
    }
    Ok(finish(tape, out, &[a, b], "matmul_nt"))
}

// ── nonlinearities ───────────────────────────────────────────────────

pub fn sigmoid(tape: &Tape, x: &Tensor) -> Tensor {
    let vals: Vec<f64> = x
        .values()
        .iter()
        .map(|&v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
        .collect();
    let out = Tensor::from_vec(x.shape(), vals);
    if x.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        let y = o.to_vec();
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                x.accumulate_grad(|gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
        });
    }
    finish(tape, out, &[x], "sigmoid")
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044715;

pub fn gelu(tape: &Tape, x: &Tensor) -> Tensor {
    let xv = x.to_vec();
    let vals: Vec<f64> = xv
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_C0 * (v + GELU_C1 * v * v * v)).tanh()))
        .collect();
    let out = Tensor::from_vec(x.shape(), vals);
    if x.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                x.accumulate_grad(|gx| {
                    for i in 0..gx.len() {
                        let v = xv[i];
                        let t = (GELU_C0 * (v + GELU_C1 * v * v * v)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * v * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * v * v);
                        gx[i] += g[i] * d;
                    }
                });
            }
        });
    }
    finish(tape, out, &[x], "gelu")
}

/// Shift-invariant softmax over the last dimension of a 1-D or 2-D tensor.
pub fn softmax_lastdim(tape: &Tape, x: &Tensor) -> Tensor {
    let shape = x.shape();
    let c = *shape.last().expect("softmax on rank-0 tensor");
    assert!(c >= 1);
    let xv = x.to_vec();
    let rows = xv.len() / c;
    let mut vals = vec![0.0; xv.len()];
    for r in 0..rows {
        let row = &xv[r * c..(r + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - mx).exp();
            vals[r * c + j] = e;
            z += e;
        }
        for j in 0..c {
            vals[r * c + j] /= z;
        }
    }
    let out = Tensor::from_vec(shape, vals);
    if x.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        let y = o.to_vec();
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                x.accumulate_grad(|gx| {
                    for r in 0..rows {
                        let base = r * c;
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += g[base + j] * y[base + j];
                        }
                        for j in 0..c {
                            gx[base + j] += y[base + j] * (g[base + j] - dot);
                        }
                    }
                });
            }
        });
    }
    finish(tape, out, &[x], "softmax_lastdim")
}

/// Standardize each last-dim slice to zero mean / unit std (population
/// variance, eps inside the square root), then scale by gamma and shift
/// by beta.
pub fn layer_norm_core(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Tensor {
    let shape = x.shape();
    let d = *shape.last().expect("layer_norm on rank-0 tensor");
    assert!(eps > 0.0);
    assert_eq!(gamma.shape(), vec![d], "gamma width mismatch");
    assert_eq!(beta.shape(), vec![d], "beta width mismatch");
    let xv = x.to_vec();
    let gv = gamma.to_vec();
    let bv = beta.to_vec();
    let rows = xv.len() / d;
    let mut vals = vec![0.0; xv.len()];
    let mut xhat = vec![0.0; xv.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &xv[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + eps).sqrt();
        inv_std[r] = s;
        for j in 0..d {
            let h = (row[j] - mean) * s;
            xhat[r * d + j] = h;
            vals[r * d + j] = gv[j] * h + bv[j];
        }
    }
    let out = Tensor::from_vec(shape, vals);
    if rg(&[x, gamma, beta]) {
        let (x, gamma, beta, o) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                if gamma.requires_grad() {
                    gamma.accumulate_grad(|gg| {
                        for r in 0..rows {
                            for j in 0..d {
                                gg[j] += g[r * d + j] * xhat[r * d + j];
                            }
                        }
                    });
                }
                if beta.requires_grad() {
                    beta.accumulate_grad(|gb| {
                        for r in 0..rows {
                            for j in 0..d {
                                gb[j] += g[r * d + j];
                            }
                        }
                    });
                }
                if x.requires_grad() {
                    x.accumulate_grad(|gx| {
                        for r in 0..rows {
                            let base = r * d;
                            let mut mean_gh = 0.0;
                            let mut mean_ghx = 0.0;
                            for j in 0..d {
                                let gh = gv[j] * g[base + j];
                                mean_gh += gh;
                                mean_ghx += gh * xhat[base + j];
                            }
                            mean_gh /= d as f64;
                            mean_ghx /= d as f64;
                            for j in 0..d {
                                let gh = gv[j] * g[base + j];
                                gx[base + j] +=
                                    (gh - mean_gh - xhat[base + j] * mean_ghx) * inv_std[r];
                            }
                        }
                    });
                }
            }
        });
    }
    finish(tape, out, &[x, gamma, beta], "layer_norm_core")
}

// ── reductions, reshapes, gathers ────────────────────────────────────

pub fn mean_axis(tape: &Tape, x: &Tensor, axis: usize) -> Tensor {
    let (r, c) = dims2(x);
    assert!(axis < 2, "mean_axis supports 2-D tensors, axes 0/1");
    let xv = x.to_vec();
    let out = if axis == 0 {
        let mut vals = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                vals[j] += xv[i * c + j];
            }
        }
        vals.iter_mut().for_each(|v| *v /= r as f64);
        Tensor::from_vec(vec![c], vals)
    } else {
        let mut vals = vec![0.0; r];
        for i in 0..r {
            vals[i] = xv[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
        }
        Tensor::from_vec(vec![r], vals)
    };
    if x.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                x.accumulate_grad(|gx| {
                    if axis == 0 {
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += g[j] / r as f64;
                            }
                        }
                    } else {
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += g[i] / c as f64;
                            }
                        }
                    }
                });
            }
        });
    }
    finish(tape, out, &[x], "mean_axis")
}

pub fn sum_all(tape: &Tape, x: &Tensor) -> Tensor {
    let s: f64 = x.values().iter().sum();
    let out = Tensor::scalar(s);
    if x.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                x.accumulate_grad(|gx| gx.iter_mut().for_each(|v| *v += g[0]));
            }
        });
    }
    finish(tape, out, &[x], "sum_all")
}

pub fn log(tape: &Tape, x: &Tensor) -> Tensor {
    let xv = x.to_vec();
    let vals: Vec<f64> = xv.iter().map(|v| v.ln()).collect();
    let out = Tensor::from_vec(x.shape(), vals);
    if x.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                x.accumulate_grad(|gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] / xv[i];
                    }
                });
            }
        });
    }
    finish(tape, out, &[x], "log")
}

/// max(x, c) elementwise; gradient flows only where x > c.
pub fn clamp_min(tape: &Tape, x: &Tensor, c: f64) -> Tensor {
    let xv = x.to_vec();
    let vals: Vec<f64> = xv.iter().map(|&v| v.max(c)).collect();
    let out = Tensor::from_vec(x.shape(), vals);
    if x.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                x.accumulate_grad(|gx| {
                    for i in 0..gx.len() {
                        if xv[i] > c {
                            gx[i] += g[i];
                        }
                    }
                });
            }
        });
    }
    finish(tape, out, &[x], "clamp_min")
}

/// Concatenate along the last dimension. 1-D: [p]‖[q] → [p+q];
/// 2-D: [r×p]‖[r×q] → [r×(p+q)].
pub fn concat_lastdim(tape: &Tape, a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa.len(), sb.len(), "concat rank mismatch");
    let out = match sa.len() {
        1 => {
            let mut vals = a.to_vec();
            vals.extend(b.to_vec());
            Tensor::from_vec(vec![sa[0] + sb[0]], vals)
        }
        2 => {
            assert_eq!(sa[0], sb[0], "concat row-count mismatch");
            let (r, p, q) = (sa[0], sa[1], sb[1]);
            let (av, bv) = (a.to_vec(), b.to_vec());
            let mut vals = Vec::with_capacity(r * (p + q));
            for i in 0..r {
                vals.extend_from_slice(&av[i * p..(i + 1) * p]);
                vals.extend_from_slice(&bv[i * q..(i + 1) * q]);
            }
            Tensor::from_vec(vec![r, p + q], vals)
        }
        _ => panic!("concat_lastdim supports rank 1 and 2, got {sa:?}"),
    };
    if rg(&[a, b]) {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                match (sa.len(), sa.as_slice(), sb.as_slice()) {
                    (1, &[p], &[q]) => {
                        if a.requires_grad() {
                            a.accumulate_grad(|ga| {
                                ga.iter_mut().zip(&g[..p]).for_each(|(x, y)| *x += y)
                            });
                        }
                        if b.requires_grad() {
                            b.accumulate_grad(|gb| {
                                gb.iter_mut().zip(&g[p..p + q]).for_each(|(x, y)| *x += y)
                            });
                        }
                    }
                    (2, &[r, p], &[_, q]) => {
                        let w = p + q;
                        if a.requires_grad() {
                            a.accumulate_grad(|ga| {
                                for i in 0..r {
                                    for j in 0..p {
                                        ga[i * p + j] += g[i * w + j];
                                    }
                                }
                            });
                        }
                        if b.requires_grad() {
                            b.accumulate_grad(|gb| {
                                for i in 0..r {
                                    for j in 0..q {
                                        gb[i * q + j] += g[i * w + p + j];
                                    }
                                }
                            });
                        }
                    }
                    _ => unreachable!(),
                }
            }
        });
    }
    finish(tape, out, &[a, b], "concat_lastdim")
}

pub fn embedding_lookup(
    tape: &Tape,
    table: &Tensor,
    ids: &[usize],
) -> Result<Tensor, NumericsError> {
    let (v, d) = dims2(table);
    for &id in ids {
        if id >= v {
            return Err(NumericsError::LookupOutOfRange { id, vocab: v });
        }
    }
    let tv = table.values();
    let mut vals = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        vals.extend_from_slice(&tv[id * d..(id + 1) * d]);
    }
    drop(tv);
    let out = Tensor::from_vec(vec![ids.len(), d], vals);
    if table.requires_grad() {
        let (table, o) = (table.clone(), out.clone());
        let ids = ids.to_vec();
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                table.accumulate_grad(|gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[row * d + j];
                        }
                    }
                });
            }
        });
    }
    Ok(finish(tape, out, &[table], "embedding_lookup"))
}

/// Select row `i` of a matrix → vector.
pub fn row(tape: &Tape, x: &Tensor, i: usize) -> Tensor {
    let (r, c) = dims2(x);
    assert!(i < r, "row {i} out of range for {r} rows");
    let vals = x.values()[i * c..(i + 1) * c].to_vec();
    let out = Tensor::from_vec(vec![c], vals);
    if x.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                x.accumulate_grad(|gx| {
                    for j in 0..c {
                        gx[i * c + j] += g[j];
                    }
                });
            }
        });
    }
    finish(tape, out, &[x], "row")
}

/// Columns [a, b) of the last dimension (1-D: element range).
pub fn slice_lastdim(tape: &Tape, x: &Tensor, start: usize, end: usize) -> Tensor {
    let shape = x.shape();
    let c = *shape.last().unwrap();
    assert!(start < end && end <= c, "slice [{start},{end}) of width {c}");
    let xv = x.to_vec();
    let rows = xv.len() / c;
    let w = end - start;
    let mut vals = Vec::with_capacity(rows * w);
    for r in 0..rows {
        vals.extend_from_slice(&xv[r * c + start..r * c + end]);
    }
    let mut out_shape = shape.clone();
    *out_shape.last_mut().unwrap() = w;
    let out = Tensor::from_vec(out_shape, vals);
    if x.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                x.accumulate_grad(|gx| {
                    for r in 0..rows {
                        for j in 0..w {
                            gx[r * c + start + j] += g[r * w + j];
                        }
                    }
                });
            }
        });
    }
    finish(tape, out, &[x], "slice_lastdim")
}

/// Stack equal-width vectors into a matrix, one per row.
pub fn stack_rows(tape: &Tape, rows_in: &[Tensor]) -> Tensor {
    assert!(!rows_in.is_empty(), "stack_rows of nothing");
    let c = rows_in[0].numel();
    let mut vals = Vec::with_capacity(rows_in.len() * c);
    for t in rows_in {
        assert_eq!(t.shape(), vec![c], "stack_rows width mismatch");
        vals.extend(t.to_vec());
    }
    let out = Tensor::from_vec(vec![rows_in.len(), c], vals);
    let any_rg = rows_in.iter().any(|t| t.requires_grad());
    if any_rg {
        let parts: Vec<Tensor> = rows_in.to_vec();
        let o = out.clone();
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                for (i, t) in parts.iter().enumerate() {
                    if t.requires_grad() {
                        t.accumulate_grad(|gt| {
                            gt.iter_mut()
                                .zip(&g[i * c..(i + 1) * c])
                                .for_each(|(x, y)| *x += y)
                        });
                    }
                }
            }
        });
        out.set_requires_grad(true);
    }
    out.debug_check_finite("stack_rows");
    out
}

/// Same values, new shape; bitwise value-preserving.
pub fn reshape(tape: &Tape, x: &Tensor, new_shape: Vec<usize>) -> Tensor {
    let numel: usize = new_shape.iter().product();
    assert_eq!(numel, x.numel(), "reshape element count mismatch");
    let out = Tensor::from_vec(new_shape, x.to_vec());
    if x.requires_grad() {
        let (x, o) = (x.clone(), out.clone());
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                x.accumulate_grad(|gx| gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b));
            }
        });
    }
    finish(tape, out, &[x], "reshape")
}

/// x scaled by a single-element tensor `s` (differentiable in both).
pub fn scale_by(tape: &Tape, x: &Tensor, s: &Tensor) -> Tensor {
    assert_eq!(s.numel(), 1, "scale_by expects a scalar multiplier");
    let sv = s.value();
    let xv = x.to_vec();
    let vals: Vec<f64> = xv.iter().map(|v| v * sv).collect();
    let out = Tensor::from_vec(x.shape(), vals);
    if rg(&[x, s]) {
        let (x, s, o) = (x.clone(), s.clone(), out.clone());
        tape.record(move || {
            if let Some(g) = o.grad_clone() {
                if x.requires_grad() {
                    x.accumulate_grad(|gx| {
                        gx.iter_mut().zip(&g).for_each(|(a, b)| *a += sv * b)
                    });
                }
                if s.requires_grad() {
                    let dot: f64 = g.iter().zip(&xv).map(|(a, b)| a * b).sum();
                    s.accumulate_grad(|gs| gs[0] += dot);
                }
            }
        });
    }
    finish(tape, out, &[x, s], "scale_by")
}

/// y = x · W + b for a vector x[din], W[din×dout], b[dout].
pub fn linear_vec(
    tape: &Tape,
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
) -> Result<Tensor, NumericsError> {
    let din = x.numel();
    let xm = reshape(tape, x, vec![1, din]);
    let y = matmul(tape, &xm, w)?;
    let y = add_row(tape, &y, b);
    let dout = y.shape()[1];
    Ok(reshape(tape, &y, vec![dout]))
}
