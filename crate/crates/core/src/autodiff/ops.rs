//! Forward kernels and numeric vector-Jacobian products.

use std::sync::Arc;

use super::{InterpTable, Op};
use crate::error::{Error, Result};
use crate::par;

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gather index transposing a row-major `rows x cols` matrix.
pub(crate) fn transpose_index(rows: usize, cols: usize) -> Arc<[u32]> {
    let mut idx = Vec::with_capacity(rows * cols);
    for c in 0..cols {
        for r in 0..rows {
            idx.push((r * cols + c) as u32);
        }
    }
    idx.into()
}

fn broadcast_len(name: &str, a: usize, b: usize) -> Result<usize> {
    if a == b || b == 1 {
        Ok(a)
    } else if a == 1 {
        Ok(b)
    } else {
        Err(Error::Shape(format!("{name}: lengths {a} and {b}")))
    }
}

pub(crate) fn output_len(op: &Op, lens: &[usize]) -> Result<usize> {
    Ok(match op {
        Op::Leaf | Op::Const => unreachable!(),
        Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => broadcast_len(op.name(), lens[0], lens[1])?,
        Op::Clamp { lo, hi } => {
            if !(lo <= hi) {
                return Err(Error::Invalid(format!("clamp bounds {lo} > {hi}")));
            }
            lens[0]
        }
        Op::Sum => 1,
        Op::Gather { index } => {
            if let Some(&bad) = index.iter().find(|&&i| i as usize >= lens[0]) {
                return Err(Error::Shape(format!("gather index {bad} out of range {}", lens[0])));
            }
            index.len()
        }
        Op::ScatterAdd { index, len } => {
            if index.len() != lens[0] {
                return Err(Error::Shape(format!(
                    "scatter-add: {} indices for {} values",
                    index.len(),
                    lens[0]
                )));
            }
            if let Some(&bad) = index.iter().find(|&&i| i as usize >= *len) {
                return Err(Error::Shape(format!("scatter-add index {bad} out of range {len}")));
            }
            *len
        }
        Op::Select { mask } => {
            let n = mask.len();
            for &l in &lens[..2] {
                if l != n && l != 1 {
                    return Err(Error::Shape(format!("select: operand length {l}, mask {n}")));
                }
            }
            n
        }
        Op::Interp(t) => {
            check_table(t, lens[0])?;
            t.rows() * t.channels
        }
        Op::InterpTranspose { table, len } => {
            check_table(table, *len)?;
            if lens[0] != table.rows() * table.channels {
                return Err(Error::Shape(format!(
                    "interp-transpose: {} values for {} stencil rows",
                    lens[0],
                    table.rows()
                )));
            }
            *len
        }
        Op::MatMul { rows, inner, cols } => {
            if lens[0] != rows * inner || lens[1] != inner * cols {
                return Err(Error::Shape(format!(
                    "matmul {rows}x{inner} * {inner}x{cols} with buffers {} and {}",
                    lens[0], lens[1]
                )));
            }
            rows * cols
        }
        _ => lens[0],
    })
}

fn check_table(t: &InterpTable, table_len: usize) -> Result<()> {
    if t.taps == 0 || t.channels == 0 || t.index.len() != t.weight.len() || t.index.len() % t.taps != 0 {
        return Err(Error::Shape(format!(
            "interp stencil: {} indices, {} weights, {} taps, {} channels",
            t.index.len(),
            t.weight.len(),
            t.taps,
            t.channels
        )));
    }
    if table_len % t.channels != 0 {
        return Err(Error::Shape(format!("interp table of {table_len} values is not {}-wide", t.channels)));
    }
    let rows = table_len / t.channels;
    if let Some(&bad) = t.index.iter().find(|&&i| i as usize >= rows) {
        return Err(Error::Shape(format!("interp index {bad} out of range {rows}")));
    }
    Ok(())
}

/// Forward of [`Op::Interp`]; also the adjoint of its transpose.
fn interp_rows(t: &InterpTable, a: &[f64], out_len: usize) -> Vec<f64> {
    let (taps, ch) = (t.taps, t.channels);
    par::build(out_len, |i| {
        let (j, c) = (i / ch, i % ch);
        let mut s = 0.0;
        for k in j * taps..(j + 1) * taps {
            s += t.weight[k] * a[t.index[k] as usize * ch + c];
        }
        s
    })
}

/// Forward of [`Op::InterpTranspose`]; also the adjoint of the lookup.
fn interp_scatter(t: &InterpTable, a: &[f64], len: usize) -> Vec<f64> {
    let (taps, ch) = (t.taps, t.channels);
    let mut out = vec![0.0; len];
    for j in 0..t.rows() {
        for k in j * taps..(j + 1) * taps {
            let (w, base) = (t.weight[k], t.index[k] as usize * ch);
            for c in 0..ch {
                out[base + c] += w * a[j * ch + c];
            }
        }
    }
    out
}

#[inline]
fn at(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn binary(a: &[f64], b: &[f64], len: usize, f: impl Fn(f64, f64) -> f64 + Sync + Send) -> Vec<f64> {
    match (a.len() == len, b.len() == len) {
        (true, true) => par::build(len, |i| f(a[i], b[i])),
        (true, false) => {
            let s = b[0];
            par::build(len, |i| f(a[i], s))
        }
        (false, true) => {
            let s = a[0];
            par::build(len, |i| f(s, b[i]))
        }
        (false, false) => vec![f(a[0], b[0]); len],
    }
}

fn unary(a: &[f64], f: impl Fn(f64) -> f64 + Sync + Send) -> Vec<f64> {
    par::build(a.len(), |i| f(a[i]))
}

pub(crate) fn forward(op: &Op, ins: &[&[f64]], len: usize, deterministic: bool) -> Vec<f64> {
    match op {
        Op::Leaf | Op::Const => unreachable!(),
        Op::Add => binary(ins[0], ins[1], len, |x, y| x + y),
        Op::Sub => binary(ins[0], ins[1], len, |x, y| x - y),
        Op::Mul => binary(ins[0], ins[1], len, |x, y| x * y),
        Op::Div => binary(ins[0], ins[1], len, |x, y| x / y),
        Op::Pow => binary(ins[0], ins[1], len, f64::powf),
        Op::Neg => unary(ins[0], |x| -x),
        Op::Exp => unary(ins[0], f64::exp),
        Op::Log => unary(ins[0], f64::ln),
        Op::Sqrt => unary(ins[0], f64::sqrt),
        Op::Sin => unary(ins[0], f64::sin),
        Op::Cos => unary(ins[0], f64::cos),
        Op::Relu => unary(ins[0], |x| if x > 0.0 { x } else { 0.0 }),
        Op::Softplus => unary(ins[0], softplus),
        Op::Sigmoid => unary(ins[0], sigmoid),
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            unary(ins[0], move |x| x.max(lo).min(hi))
        }
        Op::Sum => vec![if deterministic {
            par::sum(ins[0])
        } else {
            par::sum_fast(ins[0])
        }],
        Op::Gather { index } => {
            let a = ins[0];
            par::build(index.len(), |j| a[index[j] as usize])
        }
        Op::ScatterAdd { index, len } => {
            let mut out = vec![0.0; *len];
            for (j, &i) in index.iter().enumerate() {
                out[i as usize] += ins[0][j];
            }
            out
        }
        Op::Select { mask } => {
            let (a, b) = (ins[0], ins[1]);
            par::build(len, |i| if mask[i] { at(a, i) } else { at(b, i) })
        }
        Op::Interp(t) => interp_rows(t, ins[0], len),
        Op::InterpTranspose { table, len } => interp_scatter(table, ins[0], *len),
        Op::MatMul { rows: _, inner, cols } => {
            let (a, b, inner, cols) = (ins[0], ins[1], *inner, *cols);
            let mut out = vec![0.0; len];
            par::rows_mut(&mut out, cols, |r, row| {
                let arow = &a[r * inner..(r + 1) * inner];
                for (k, &av) in arow.iter().enumerate() {
                    let brow = &b[k * cols..(k + 1) * cols];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            });
            out
        }
    }
}

/// Adds `f(i)` for `i < out_len` into `dst`, summing when `dst` is a
/// broadcast scalar.
fn contribute(dst: &mut [f64], out_len: usize, deterministic: bool, f: impl Fn(usize) -> f64 + Sync + Send) {
    if dst.len() == out_len {
        par::accumulate(dst, f);
    } else {
        let parts = par::build(out_len, f);
        dst[0] += if deterministic {
            par::sum(&parts)
        } else {
            par::sum_fast(&parts)
        };
    }
}

/// Accumulates the adjoint contribution of output adjoint `g` into input
/// `slot`'s adjoint buffer `dst`. `y` is the node's forward value.
pub(crate) fn vjp(op: &Op, slot: usize, ins: &[&[f64]], y: &[f64], g: &[f64], dst: &mut [f64], det: bool) {
    let n = g.len();
    let a = ins[0];
    match op {
        Op::Leaf | Op::Const => {}
        Op::Add => contribute(dst, n, det, |i| g[i]),
        Op::Sub => {
            if slot == 0 {
                contribute(dst, n, det, |i| g[i])
            } else {
                contribute(dst, n, det, |i| -g[i])
            }
        }
        Op::Mul => {
            let other = ins[1 - slot];
            contribute(dst, n, det, |i| g[i] * at(other, i))
        }
        Op::Div => {
            let b = ins[1];
            if slot == 0 {
                contribute(dst, n, det, |i| g[i] / at(b, i))
            } else {
                contribute(dst, n, det, |i| -(g[i] * y[i]) / at(b, i))
            }
        }
        Op::Pow => {
            let b = ins[1];
            if slot == 0 {
                contribute(dst, n, det, |i| g[i] * (at(b, i) * at(a, i).powf(at(b, i) - 1.0)))
            } else {
                contribute(dst, n, det, |i| {
                    let x = at(a, i);
                    let l = if x > 0.0 { x.ln() } else { 0.0 };
                    g[i] * (y[i] * l)
                })
            }
        }
        Op::Neg => par::accumulate(dst, |i| -g[i]),
        Op::Exp => par::accumulate(dst, |i| g[i] * y[i]),
        Op::Log => par::accumulate(dst, |i| g[i] / a[i]),
        Op::Sqrt => par::accumulate(dst, |i| (g[i] * 0.5) / y[i]),
        Op::Sin => par::accumulate(dst, |i| g[i] * a[i].cos()),
        Op::Cos => par::accumulate(dst, |i| -(g[i] * a[i].sin())),
        Op::Relu => par::accumulate(dst, |i| if a[i] > 0.0 { g[i] } else { 0.0 }),
        Op::Softplus => par::accumulate(dst, |i| g[i] * sigmoid(a[i])),
        Op::Sigmoid => par::accumulate(dst, |i| g[i] * (y[i] * (1.0 - y[i]))),
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            par::accumulate(dst, move |i| if a[i] >= lo && a[i] <= hi { g[i] } else { 0.0 })
        }
        Op::Sum => {
            let s = g[0];
            par::accumulate(dst, |_| s)
        }
        Op::Gather { index } => {
            // Scatter into a fresh buffer first so accumulation order matches
            // the recorded adjoint (scatter-add followed by add).
            let mut tmp = vec![0.0; dst.len()];
            for (j, &i) in index.iter().enumerate() {
                tmp[i as usize] += g[j];
            }
            par::accumulate(dst, |i| tmp[i]);
        }
        Op::ScatterAdd { index, .. } => par::accumulate(dst, |j| g[index[j] as usize]),
        Op::Interp(t) => {
            let tmp = interp_scatter(t, g, dst.len());
            par::accumulate(dst, |i| tmp[i]);
        }
        Op::InterpTranspose { table, .. } => {
            let tmp = interp_rows(table, g, dst.len());
            par::accumulate(dst, |i| tmp[i]);
        }
        Op::Select { mask } => {
            if slot == 0 {
                contribute(dst, n, det, |i| if mask[i] { g[i] } else { 0.0 })
            } else {
                contribute(dst, n, det, |i| if mask[i] { 0.0 } else { g[i] })
            }
        }
        Op::MatMul { rows, inner, cols } => {
            let (rows, inner, cols) = (*rows, *inner, *cols);
            let b = ins[1];
            if slot == 0 {
                // dA[r, k] += sum_c g[r, c] * B[k, c]
                par::rows_mut(dst, inner, |r, row| {
                    let grow = &g[r * cols..(r + 1) * cols];
                    for (k, o) in row.iter_mut().enumerate() {
                        let brow = &b[k * cols..(k + 1) * cols];
                        let mut s = 0.0;
                        for (gv, bv) in grow.iter().zip(brow) {
                            s += gv * bv;
                        }
                        *o += s;
                    }
                });
            } else {
                // dB[k, c] += sum_r A[r, k] * g[r, c]
                let mut tmp = vec![0.0; dst.len()];
                par::rows_mut(&mut tmp, cols, |k, row| {
                    for r in 0..rows {
                        let av = a[r * inner + k];
                        let grow = &g[r * cols..(r + 1) * cols];
                        for (o, gv) in row.iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                });
                par::accumulate(dst, |i| tmp[i]);
            }
        }
    }
}
