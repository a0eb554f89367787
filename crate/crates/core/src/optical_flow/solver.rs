use crate::error::{MffError, Result};
use crate::plane::Plane;
use crate::scalar::Scalar;

use super::{FlowField, FlowParams};

/// Level sizes of the pyramid, coarse to fine. The native size is always
/// the last entry.
pub fn pyramid_dims(width: usize, height: usize, params: &FlowParams) -> Vec<(usize, usize)> {
    let mut dims = vec![(width, height)];
    let mut factor = params.pyramid_scale;
    loop {
        let w = (width as f64 * factor).round() as usize;
        let h = (height as f64 * factor).round() as usize;
        if w.min(h) < params.min_level_dim || (w, h) == *dims.last().unwrap() {
            break;
        }
        dims.push((w, h));
        factor *= params.pyramid_scale;
    }
    dims.reverse();
    dims
}

/// 2×2 box filter (anchored at the top-left pixel) followed by a bilinear
/// resample whose grid is shifted half a source pixel to re-centre the box.
fn downscale<T: Scalar>(fine: &Plane<T>, width: usize, height: usize) -> Plane<T> {
    let (fw, fh) = fine.dims();
    let quarter = T::of(0.25);
    let boxed = Plane::from_fn(fw, fh, |x, y| {
        let x1 = (x + 1).min(fw - 1);
        let y1 = (y + 1).min(fh - 1);
        (fine.get(x, y) + fine.get(x1, y) + fine.get(x, y1) + fine.get(x1, y1)) * quarter
    });
    boxed.resize_bilinear_offset(width, height, T::of(-0.5))
}

/// Gray-image pyramid, level 0 coarsest. Frames whose smaller side is below
/// `min_level_dim` yield a single level.
pub fn build_pyramid<T: Scalar>(frame: &Plane<T>, params: &FlowParams) -> Vec<Plane<T>> {
    let dims = pyramid_dims(frame.width(), frame.height(), params);
    let mut levels = vec![frame.clone()];
    for &(w, h) in dims.iter().rev().skip(1) {
        let next = downscale(levels.last().unwrap(), w, h);
        levels.push(next);
    }
    levels.reverse();
    levels
}

/// `out(x, y) = frame(x + u, y + v)`, bilinear, border-clamped.
pub fn warp<T: Scalar>(frame: &Plane<T>, flow: &FlowField<T>) -> Plane<T> {
    let (w, h) = frame.dims();
    let mut out = Vec::with_capacity(w * h);
    let (u, v) = (flow.u.data(), flow.v.data());
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            out.push(frame.sample_clamped(T::of(x as f64) + u[i], T::of(y as f64) + v[i]));
        }
    }
    Plane::new(w, h, out).expect("warp preserves shape")
}

/// Central differences; the border is mirrored by edge duplication.
pub fn image_gradients<T: Scalar>(img: &Plane<T>) -> (Plane<T>, Plane<T>) {
    let (w, h) = img.dims();
    let half = T::of(0.5);
    let gx = Plane::from_fn(w, h, |x, y| {
        let l = x.saturating_sub(1);
        let r = (x + 1).min(w - 1);
        (img.get(r, y) - img.get(l, y)) * half
    });
    let gy = Plane::from_fn(w, h, |x, y| {
        let t = y.saturating_sub(1);
        let b = (y + 1).min(h - 1);
        (img.get(x, b) - img.get(x, t)) * half
    });
    (gx, gy)
}

fn upsample_flow<T: Scalar>(flow: &FlowField<T>, width: usize, height: usize) -> FlowField<T> {
    let sx = T::of(width as f64 / flow.width() as f64);
    let sy = T::of(height as f64 / flow.height() as f64);
    FlowField {
        u: flow.u.resize_bilinear(width, height).map(|x| x * sx),
        v: flow.v.resize_bilinear(width, height).map(|x| x * sy),
    }
}

/// Linearised data term `rho = ix*u + iy*v + c0` for one warping pass.
struct Linearization<T> {
    width: usize,
    height: usize,
    ix: Vec<T>,
    iy: Vec<T>,
    c0: Vec<T>,
}

impl<T: Scalar> Linearization<T> {
    fn new(prev: &Plane<T>, warped: &Plane<T>, flow: &FlowField<T>) -> Self {
        let (gx0, gy0) = image_gradients(prev);
        let (gx1, gy1) = image_gradients(warped);
        let half = T::of(0.5);
        let n = prev.data().len();
        let mut ix = Vec::with_capacity(n);
        let mut iy = Vec::with_capacity(n);
        let mut c0 = Vec::with_capacity(n);
        for i in 0..n {
            let gx = (gx0.data()[i] + gx1.data()[i]) * half;
            let gy = (gy0.data()[i] + gy1.data()[i]) * half;
            let it = warped.data()[i] - prev.data()[i];
            ix.push(gx);
            iy.push(gy);
            c0.push(it - gx * flow.u.data()[i] - gy * flow.v.data()[i]);
        }
        Linearization {
            width: prev.width(),
            height: prev.height(),
            ix,
            iy,
            c0,
        }
    }

    fn energy(&self, u: &[T], v: &[T], lambda: f64) -> f64 {
        energy_terms(self.width, self.height, &self.ix, &self.iy, &self.c0, u, v, lambda)
    }
}

#[allow(clippy::too_many_arguments)]
fn energy_terms<T: Scalar>(
    w: usize,
    h: usize,
    ix: &[T],
    iy: &[T],
    c0: &[T],
    u: &[T],
    v: &[T],
    lambda: f64,
) -> f64 {
    let mut data = 0.0f64;
    let mut smooth = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let rho = ix[i].to_f64_lossy() * u[i].to_f64_lossy()
                + iy[i].to_f64_lossy() * v[i].to_f64_lossy()
                + c0[i].to_f64_lossy();
            data += rho * rho;
            if x + 1 < w {
                let du = (u[i + 1] - u[i]).to_f64_lossy();
                let dv = (v[i + 1] - v[i]).to_f64_lossy();
                smooth += du * du + dv * dv;
            }
            if y + 1 < h {
                let du = (u[i + w] - u[i]).to_f64_lossy();
                let dv = (v[i + w] - v[i]).to_f64_lossy();
                smooth += du * du + dv * dv;
            }
        }
    }
    data + lambda * smooth
}

/// Discrete Horn–Schunck energy of `flow` for the pair `(prev, next)`,
/// linearised around `flow` itself:
/// `Σ (Ix·u + Iy·v + It)² + λ Σ_edges (|Δu|² + |Δv|²)` with 4-neighbour edges.
pub fn hs_energy<T: Scalar>(prev: &Plane<T>, next: &Plane<T>, flow: &FlowField<T>, lambda: f64) -> f64 {
    let warped = warp(next, flow);
    Linearization::new(prev, &warped, flow).energy(flow.u.data(), flow.v.data(), lambda)
}

/// One block-Jacobi sweep: each pixel's `(u, v)` solves its 2×2 normal
/// equations with neighbours held at the previous iterate. With free
/// (Neumann) boundaries this never increases the energy.
fn jacobi_sweep<T: Scalar>(
    lin: &Linearization<T>,
    lambda: T,
    u: &[T],
    v: &[T],
    u_out: &mut [T],
    v_out: &mut [T],
) {
    let (w, h) = (lin.width, lin.height);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut su = T::zero();
            let mut sv = T::zero();
            let mut d = 0usize;
            if x > 0 {
                su += u[i - 1];
                sv += v[i - 1];
                d += 1;
            }
            if x + 1 < w {
                su += u[i + 1];
                sv += v[i + 1];
                d += 1;
            }
            if y > 0 {
                su += u[i - w];
                sv += v[i - w];
                d += 1;
            }
            if y + 1 < h {
                su += u[i + w];
                sv += v[i + w];
                d += 1;
            }
            let (ix, iy, c0) = (lin.ix[i], lin.iy[i], lin.c0[i]);
            if d == 0 {
                // 1×1 image: no smoothness term, minimum-norm data solution
                let g2 = ix * ix + iy * iy;
                let k = if g2 > T::zero() { c0 / g2 } else { T::zero() };
                u_out[i] = -ix * k;
                v_out[i] = -iy * k;
                continue;
            }
            let df = T::of(d as f64);
            let ubar = su / df;
            let vbar = sv / df;
            let k = (ix * ubar + iy * vbar + c0) / (lambda * df + ix * ix + iy * iy);
            u_out[i] = ubar - ix * k;
            v_out[i] = vbar - iy * k;
        }
    }
}

/// Energies recorded during one warping pass: at iteration 0 and after every
/// tenth sweep (plus the last).
#[derive(Debug, Clone)]
pub struct PassTrace {
    pub level: usize,
    pub warp: usize,
    pub energies: Vec<f64>,
}

pub fn estimate_flow<T: Scalar>(prev: &Plane<T>, next: &Plane<T>, params: &FlowParams) -> Result<FlowField<T>> {
    estimate_flow_impl(prev, next, params, None)
}

/// As [`estimate_flow`], also returning the energy trace of every pass.
pub fn estimate_flow_traced<T: Scalar>(
    prev: &Plane<T>,
    next: &Plane<T>,
    params: &FlowParams,
) -> Result<(FlowField<T>, Vec<PassTrace>)> {
    let mut traces = Vec::new();
    let flow = estimate_flow_impl(prev, next, params, Some(&mut traces))?;
    Ok((flow, traces))
}

fn estimate_flow_impl<T: Scalar>(
    prev: &Plane<T>,
    next: &Plane<T>,
    params: &FlowParams,
    mut traces: Option<&mut Vec<PassTrace>>,
) -> Result<FlowField<T>> {
    if prev.dims() != next.dims() {
        return Err(MffError::Shape(format!(
            "flow frames differ in size: {:?} vs {:?}",
            prev.dims(),
            next.dims()
        )));
    }
    params.validate()?;
    let lambda = T::of(params.smoothness_lambda);
    let prev_pyr = build_pyramid(prev, params);
    let next_pyr = build_pyramid(next, params);
    let (w0, h0) = prev_pyr[0].dims();
    let mut flow = FlowField::zeros(w0, h0);
    let mut scratch_u = Vec::new();
    let mut scratch_v = Vec::new();

    for (level, (p, n)) in prev_pyr.iter().zip(&next_pyr).enumerate() {
        if level > 0 {
            flow = upsample_flow(&flow, p.width(), p.height());
        }
        for pass in 0..params.warps_per_level {
            let warped = warp(n, &flow);
            let lin = Linearization::new(p, &warped, &flow);
            let mut energies = Vec::new();
            if traces.is_some() {
                energies.push(lin.energy(flow.u.data(), flow.v.data(), params.smoothness_lambda));
            }
            scratch_u.resize(flow.u.data().len(), T::zero());
            scratch_v.resize(flow.v.data().len(), T::zero());
            for it in 0..params.iters_per_level {
                jacobi_sweep(&lin, lambda, flow.u.data(), flow.v.data(), &mut scratch_u, &mut scratch_v);
                flow.u.data_mut().swap_with_slice(&mut scratch_u);
                flow.v.data_mut().swap_with_slice(&mut scratch_v);
                if traces.is_some() && ((it + 1) % 10 == 0 || it + 1 == params.iters_per_level) {
                    energies.push(lin.energy(flow.u.data(), flow.v.data(), params.smoothness_lambda));
                }
            }
            if let Some(t) = traces.as_deref_mut() {
                t.push(PassTrace {
                    level,
                    warp: pass,
                    energies,
                });
            }
        }
    }
    if !flow.is_finite() {
        return Err(MffError::NonFinite("optical flow diverged".into()));
    }
    Ok(flow)
}
