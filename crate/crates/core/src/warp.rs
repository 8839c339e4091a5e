//! Flow-field warping with differentiable bilinear interpolation, the L-inf
//! projection of the flow budget, and the per-pixel additive perturbation
//! used for comparison.
//!
//! Pixel centers sit at integer coordinates. Sample coordinates outside
//! `[0, W-1] x [0, H-1]` are clamped (border replication); clamped axes
//! carry zero gradient. At an exact integer coordinate the interpolation
//! weights use the right-hand derivative.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Trace};
use crate::error::{Error, Result};
use crate::imaging::{FlowField, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbKind {
    SpatialFlow,
    PerPixelAdditive,
}

/// Attack surface and budget: pixels for flows, color units for additive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbMode {
    pub kind: PerturbKind,
    pub budget: f64,
}

impl PerturbMode {
    pub fn new(kind: PerturbKind, budget: f64) -> Result<Self> {
        if !(budget > 0.0) || !budget.is_finite() {
            return Err(Error::Config(format!("perturbation budget must be > 0, got {budget}")));
        }
        Ok(PerturbMode { kind, budget })
    }

    /// Perturbation values per pixel (2 for flows, 3 for color offsets).
    pub fn channels(&self) -> usize {
        match self.kind {
            PerturbKind::SpatialFlow => 2,
            PerturbKind::PerPixelAdditive => 3,
        }
    }
}

/// One training pixel: image index and integer pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRef {
    pub image: usize,
    pub u: usize,
    pub v: usize,
}

/// Interpolation stencil along one axis.
#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: usize,
    hi: usize,
    frac: f64,
    /// The coordinate was inside the valid range, so it carries gradient.
    active: bool,
}

impl Axis {
    fn new(coord: f64, size: usize) -> Axis {
        let max = (size - 1) as f64;
        let active = (0.0..=max).contains(&coord);
        let c = coord.clamp(0.0, max);
        // At the upper border `hi == lo` and `frac == 0`, so integer
        // coordinates reproduce the source pixel bit-exactly.
        let lo = (c.floor() as usize).min(size - 1);
        let hi = (lo + 1).min(size - 1);
        Axis {
            lo,
            hi,
            frac: c - lo as f64,
            active,
        }
    }
}

fn lerp2(x00: f64, x10: f64, x01: f64, x11: f64, fu: f64, fv: f64) -> f64 {
    let a = x00 + fu * (x10 - x00);
    let b = x01 + fu * (x11 - x01);
    a + fv * (b - a)
}

/// Bilinear sample of `img` at continuous pixel coordinates `(u, v)`.
pub fn bilinear_sample(img: &Image, u: f64, v: f64) -> Result<[f64; 3]> {
    if !u.is_finite() || !v.is_finite() {
        return Err(Error::NonFinite(format!("sample coordinate ({u}, {v})")));
    }
    let au = Axis::new(u, img.width());
    let av = Axis::new(v, img.height());
    let (p00, p10) = (img.pixel(au.lo, av.lo), img.pixel(au.hi, av.lo));
    let (p01, p11) = (img.pixel(au.lo, av.hi), img.pixel(au.hi, av.hi));
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = lerp2(p00[c], p10[c], p01[c], p11[c], au.frac, av.frac);
    }
    Ok(out)
}

/// `x o delta`: output pixel `i` samples `img` at `(u_i + du_i, v_i + dv_i)`.
pub fn apply_flow(img: &Image, flow: &FlowField) -> Result<Image> {
    if !flow.matches(img) {
        return Err(Error::Shape(format!(
            "flow {}x{} vs image {}x{}",
            flow.width(),
            flow.height(),
            img.width(),
            img.height()
        )));
    }
    let (w, h) = (img.width(), img.height());
    let mut data = Vec::with_capacity(w * h * 3);
    for v in 0..h {
        for u in 0..w {
            let (du, dv) = flow.at(u, v);
            data.extend_from_slice(&bilinear_sample(img, u as f64 + du, v as f64 + dv)?);
        }
    }
    Image::from_clamped(w, h, data)
}

/// Adjoints of [`apply_flow`]: returns `(d/dflow, d/dimage)` given the
/// adjoint of the output image (H x W x 3).
pub fn flow_backward(img: &Image, flow: &FlowField, out_adj: &[f64]) -> Result<(FlowField, Vec<f64>)> {
    let (w, h) = (img.width(), img.height());
    if !flow.matches(img) || out_adj.len() != w * h * 3 {
        return Err(Error::Shape("flow_backward operand shapes".into()));
    }
    let mut g_flow = vec![0.0; w * h * 2];
    let mut g_img = vec![0.0; w * h * 3];
    let x = img.data();
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let (du, dv) = flow.at(u, v);
            let au = Axis::new(u as f64 + du, w);
            let av = Axis::new(v as f64 + dv, h);
            let (fu, fv) = (au.frac, av.frac);
            let q = [
                (av.lo * w + au.lo) * 3,
                (av.lo * w + au.hi) * 3,
                (av.hi * w + au.lo) * 3,
                (av.hi * w + au.hi) * 3,
            ];
            let wts = [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv];
            for c in 0..3 {
                let g = out_adj[i * 3 + c];
                let (x00, x10, x01, x11) = (x[q[0] + c], x[q[1] + c], x[q[2] + c], x[q[3] + c]);
                if au.active {
                    g_flow[i * 2] += g * ((x10 - x00) * (1.0 - fv) + (x11 - x01) * fv);
                }
                if av.active {
                    let a = x00 + fu * (x10 - x00);
                    let b = x01 + fu * (x11 - x01);
                    g_flow[i * 2 + 1] += g * (b - a);
                }
                for k in 0..4 {
                    g_img[q[k] + c] += g * wts[k];
                }
            }
        }
    }
    Ok((FlowField::new(w, h, g_flow)?, g_img))
}

/// Clamps every flow component to `[-rho, rho]`.
pub fn project_linf(flow: &FlowField, rho: f64) -> FlowField {
    let mut out = flow.clone();
    project_slice(out.data_mut(), rho);
    out
}

/// In-place L-inf projection; components already inside are untouched.
pub fn project_slice(values: &mut [f64], rho: f64) {
    for x in values {
        if *x > rho {
            *x = rho;
        } else if *x < -rho {
            *x = -rho;
        }
    }
}

/// `clamp(img + clamp(eps, -rho, rho), 0, 1)`.
pub fn apply_additive(img: &Image, eps: &[f64], rho: f64) -> Result<Image> {
    if eps.len() != img.data().len() {
        return Err(Error::Shape(format!(
            "additive perturbation has {} values for {} pixels",
            eps.len(),
            img.data().len()
        )));
    }
    let data = img
        .data()
        .iter()
        .zip(eps)
        .map(|(&x, &e)| (x + e.clamp(-rho, rho)).clamp(0.0, 1.0))
        .collect();
    Image::new(img.width(), img.height(), data)
}

/// Adjoint of [`apply_additive`] with respect to `eps`.
pub fn additive_backward(img: &Image, eps: &[f64], rho: f64, out_adj: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != img.data().len() || out_adj.len() != eps.len() {
        return Err(Error::Shape("additive_backward operand shapes".into()));
    }
    Ok(img
        .data()
        .iter()
        .zip(eps)
        .zip(out_adj)
        .map(|((&x, &e), &g)| {
            let inside_budget = (-rho..=rho).contains(&e);
            let s = x + e.clamp(-rho, rho);
            if inside_budget && (0.0..=1.0).contains(&s) {
                g
            } else {
                0.0
            }
        })
        .collect())
}

/// Records warped target colors for a batch of pixels on `trace`.
///
/// `flows` is a leaf holding every image's flow concatenated (image `k`
/// starts at `offsets[k]`). Returns a node of length `3 * pixels.len()`
/// whose values equal [`apply_flow`] at those pixels.
pub fn record_warped_targets(
    trace: &mut Trace,
    images: &[Image],
    offsets: &[usize],
    flows: NodeId,
    pixels: &[PixelRef],
) -> Result<NodeId> {
    let n = pixels.len();
    let flow_vals = trace.value(flows).to_vec();
    let mut idx_u = Vec::with_capacity(n);
    let mut idx_v = Vec::with_capacity(n);
    let mut base_u = Vec::with_capacity(n);
    let mut base_v = Vec::with_capacity(n);
    let mut bound_u = Vec::with_capacity(n);
    let mut bound_v = Vec::with_capacity(n);
    let mut in_u = Vec::with_capacity(n);
    let mut in_v = Vec::with_capacity(n);
    let mut lo_u = Vec::with_capacity(n);
    let mut lo_v = Vec::with_capacity(n);
    let mut x00 = Vec::with_capacity(3 * n);
    let mut d10 = Vec::with_capacity(3 * n);
    let mut x01 = Vec::with_capacity(3 * n);
    let mut d11 = Vec::with_capacity(3 * n);
    for p in pixels {
        let img = &images[p.image];
        let (w, h) = (img.width(), img.height());
        let k = offsets[p.image] + (p.v * w + p.u) * 2;
        idx_u.push(k as u32);
        idx_v.push(k as u32 + 1);
        let cu = p.u as f64 + flow_vals[k];
        let cv = p.v as f64 + flow_vals[k + 1];
        let au = Axis::new(cu, w);
        let av = Axis::new(cv, h);
        base_u.push(p.u as f64);
        base_v.push(p.v as f64);
        in_u.push(au.active);
        in_v.push(av.active);
        bound_u.push(cu.clamp(0.0, (w - 1) as f64));
        bound_v.push(cv.clamp(0.0, (h - 1) as f64));
        lo_u.push(au.lo as f64);
        lo_v.push(av.lo as f64);
        let (p00, p10) = (img.pixel(au.lo, av.lo), img.pixel(au.hi, av.lo));
        let (p01, p11) = (img.pixel(au.lo, av.hi), img.pixel(au.hi, av.hi));
        for c in 0..3 {
            x00.push(p00[c]);
            d10.push(p10[c] - p00[c]);
            x01.push(p01[c]);
            d11.push(p11[c] - p01[c]);
        }
    }
    let rep3: Arc<[u32]> = (0..n as u32).flat_map(|j| [j, j, j]).collect();

    let frac = |trace: &mut Trace, idx: Vec<u32>, base: Vec<f64>, inside: Vec<bool>, clamped: Vec<f64>, lo: Vec<f64>| -> Result<NodeId> {
        let d = trace.gather(flows, idx)?;
        let b = trace.constant(base);
        let coord = trace.add(d, b)?;
        let bound = trace.constant(clamped);
        let c = trace.select(inside, coord, bound)?;
        let lo = trace.constant(lo);
        let f = trace.sub(c, lo)?;
        trace.gather(f, rep3.clone())
    };
    let fu = frac(trace, idx_u, base_u, in_u, bound_u, lo_u)?;
    let fv = frac(trace, idx_v, base_v, in_v, bound_v, lo_v)?;

    let x00 = trace.constant(x00);
    let d10 = trace.constant(d10);
    let x01 = trace.constant(x01);
    let d11 = trace.constant(d11);
    let t = trace.mul(fu, d10)?;
    let a = trace.add(x00, t)?;
    let t = trace.mul(fu, d11)?;
    let b = trace.add(x01, t)?;
    let ba = trace.sub(b, a)?;
    let t = trace.mul(fv, ba)?;
    trace.add(a, t)
}

/// Records additively perturbed target colors for a batch of pixels.
/// `eps` concatenates every image's `3 * W * H` offsets.
pub fn record_additive_targets(
    trace: &mut Trace,
    images: &[Image],
    offsets: &[usize],
    eps: NodeId,
    rho: f64,
    pixels: &[PixelRef],
) -> Result<NodeId> {
    let mut idx = Vec::with_capacity(3 * pixels.len());
    let mut base = Vec::with_capacity(3 * pixels.len());
    for p in pixels {
        let img = &images[p.image];
        let k = offsets[p.image] + (p.v * img.width() + p.u) * 3;
        let px = img.pixel(p.u, p.v);
        for c in 0..3 {
            idx.push((k + c) as u32);
            base.push(px[c]);
        }
    }
    let e = trace.gather(eps, idx)?;
    let e = trace.clamp(e, -rho, rho)?;
    let x = trace.constant(base);
    let s = trace.add(x, e)?;
    trace.clamp(s, 0.0, 1.0)
}
