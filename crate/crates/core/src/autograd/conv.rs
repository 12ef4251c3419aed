//! Stride-1 "same" 3D convolution.
//!
//! The fast path lowers each (sample, z-slab) pair to an im2col matrix and a
//! single GEMM; slabs are independent so they run in parallel when the
//! `parallel` feature is on. The input gradient reuses the forward path with
//! a flipped, channel-transposed kernel. [`conv3d_direct`] is the plain loop
//! nest the fast path is tested against.

use alloc::{vec, vec::Vec};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Target number of output columns per GEMM task.
const SLAB_COLUMNS: usize = 2048;
/// Upper bound on im2col buffer elements per task.
const SLAB_MAX_ELEMS: usize = 1 << 24;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl Geom {
    pub fn new(x: &[usize], wt: &[usize]) -> Result<Self> {
        let (n, cin, d, h, w) = match *x {
            [n, c, d, h, w] => (n, c, d, h, w),
            _ => {
                return Err(crate::error::shape_err(
                    "conv3d",
                    alloc::format!("input {:?}", x),
                ))
            }
        };
        let (cout, wcin, k) = match *wt {
            [co, ci, a, b, c] if a == b && b == c => (co, ci, a),
            _ => {
                return Err(crate::error::shape_err(
                    "conv3d",
                    alloc::format!("weight {:?}", wt),
                ))
            }
        };
        if k != 1 && k != 3 {
            return Err(Error::KernelSize(k));
        }
        if wcin != cin {
            return Err(crate::error::shape_err(
                "conv3d",
                alloc::format!("input has {} channels, kernel expects {}", cin, wcin),
            ));
        }
        Ok(Self {
            n,
            cin,
            cout,
            d,
            h,
            w,
            k,
        })
    }

    fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    fn kvol(&self) -> usize {
        self.k * self.k * self.k
    }

    fn planes_per_slab(&self) -> usize {
        let plane = (self.h * self.w).max(1);
        let by_cols = SLAB_COLUMNS.div_ceil(plane);
        let by_mem = (SLAB_MAX_ELEMS / (self.cin * self.kvol() * plane).max(1)).max(1);
        by_cols.min(by_mem).clamp(1, self.d.max(1))
    }

    fn slabs(&self) -> Vec<(usize, usize, usize)> {
        let step = self.planes_per_slab();
        let mut out = Vec::new();
        for n in 0..self.n {
            let mut z = 0;
            while z < self.d {
                let z1 = (z + step).min(self.d);
                out.push((n, z, z1));
                z = z1;
            }
        }
        out
    }
}

pub(crate) fn run_tasks<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Fills `col` (rows `cin*k^3`, columns `(z1-z0)*h*w`) for one sample.
fn im2col<T: Scalar>(x_n: &[T], g: &Geom, z0: usize, z1: usize, col: &mut [T]) {
    let (h, w, k) = (g.h, g.w, g.k);
    let pad = k / 2;
    let plane = h * w;
    let s = (z1 - z0) * plane;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x_n[ci * g.d * plane..(ci + 1) * g.d * plane];
        for dz in 0..k {
            for dy in 0..k {
                for dx in 0..k {
                    let dst = &mut col[row * s..(row + 1) * s];
                    row += 1;
                    let lo = pad.saturating_sub(dx);
                    let hi = (w + pad).saturating_sub(dx).min(w);
                    for z in z0..z1 {
                        let sz = z as isize + dz as isize - pad as isize;
                        let dplane = &mut dst[(z - z0) * plane..(z - z0 + 1) * plane];
                        if sz < 0 || sz >= g.d as isize {
                            dplane.fill(T::zero());
                            continue;
                        }
                        let splane = &xc[sz as usize * plane..(sz as usize + 1) * plane];
                        for y in 0..h {
                            let sy = y as isize + dy as isize - pad as isize;
                            let drow = &mut dplane[y * w..(y + 1) * w];
                            if sy < 0 || sy >= h as isize || lo >= hi {
                                drow.fill(T::zero());
                                continue;
                            }
                            let srow = &splane[sy as usize * w..(sy as usize + 1) * w];
                            drow[..lo].fill(T::zero());
                            drow[hi..].fill(T::zero());
                            drow[lo..hi].copy_from_slice(&srow[lo + dx - pad..hi + dx - pad]);
                        }
                    }
                }
            }
        }
    }
}

/// Output rows for one (sample, slab): `Cout x (z1-z0)*h*w`.
fn slab_forward<T: Scalar>(
    x: &[T],
    wt: &[T],
    bias: Option<&[T]>,
    g: &Geom,
    n: usize,
    z0: usize,
    z1: usize,
) -> Vec<T> {
    let plane = g.h * g.w;
    let s = (z1 - z0) * plane;
    let kk = g.cin * g.kvol();
    let mut out = vec![T::zero(); g.cout * s];
    if let Some(b) = bias {
        for (co, row) in out.chunks_exact_mut(s).enumerate() {
            row.fill(b[co]);
        }
    }
    let x_n = &x[n * g.cin * g.spatial()..(n + 1) * g.cin * g.spatial()];
    if g.k == 1 {
        // the input slab already is the column matrix, rows strided by D*H*W
        // SAFETY: row ci, column j addresses x_n[ci*DHW + z0*HW + j] < x_n.len().
        unsafe {
            T::gemm(
                g.cout,
                kk,
                s,
                T::one(),
                wt.as_ptr(),
                kk as isize,
                1,
                x_n.as_ptr().add(z0 * plane),
                g.spatial() as isize,
                1,
                T::one(),
                out.as_mut_ptr(),
                s as isize,
                1,
            );
        }
    } else {
        let mut col = vec![T::zero(); kk * s];
        im2col(x_n, g, z0, z1, &mut col);
        crate::scalar::matmul(g.cout, kk, s, wt, &col, &mut out, true);
    }
    out
}

pub(crate) fn forward<T: Scalar>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let g = Geom::new(x.shape(), wt.shape())?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(crate::error::shape_err(
                "conv3d",
                alloc::format!("bias {:?}", b.shape()),
            ));
        }
    }
    Ok(forward_geom(
        x.data(),
        wt.data(),
        bias.map(|b| b.data()),
        &g,
    ))
}

fn forward_geom<T: Scalar>(x: &[T], wt: &[T], bias: Option<&[T]>, g: &Geom) -> Tensor<T> {
    let slabs = g.slabs();
    let parts = run_tasks(slabs.len(), |i| {
        let (n, z0, z1) = slabs[i];
        slab_forward(x, wt, bias, g, n, z0, z1)
    });
    let plane = g.h * g.w;
    let sp = g.spatial();
    let mut out = vec![T::zero(); g.n * g.cout * sp];
    for (&(n, z0, z1), part) in slabs.iter().zip(parts) {
        let s = (z1 - z0) * plane;
        for co in 0..g.cout {
            let dst = (n * g.cout + co) * sp + z0 * plane;
            out[dst..dst + s].copy_from_slice(&part[co * s..(co + 1) * s]);
        }
    }
    Tensor::from_parts(alloc::vec![g.n, g.cout, g.d, g.h, g.w], out)
}

/// Gradient w.r.t. the input: correlation of `dy` with the spatially flipped,
/// channel-transposed kernel.
pub(crate) fn backward_input<T: Scalar>(dy: &[T], wt: &[T], g: &Geom) -> Vec<T> {
    let kv = g.kvol();
    let mut flipped = vec![T::zero(); wt.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            let src = &wt[(co * g.cin + ci) * kv..(co * g.cin + ci + 1) * kv];
            let dst = &mut flipped[(ci * g.cout + co) * kv..(ci * g.cout + co + 1) * kv];
            for (o, v) in src.iter().enumerate() {
                dst[kv - 1 - o] = *v;
            }
        }
    }
    let tg = Geom {
        cin: g.cout,
        cout: g.cin,
        ..*g
    };
    forward_geom(dy, &flipped, None, &tg).into_data()
}

/// Gradients w.r.t. weight and bias.
pub(crate) fn backward_params<T: Scalar>(x: &[T], dy: &[T], g: &Geom) -> (Vec<T>, Vec<T>) {
    let slabs = g.slabs();
    let kk = g.cin * g.kvol();
    let plane = g.h * g.w;
    let sp = g.spatial();
    let parts = run_tasks(slabs.len(), |i| {
        let (n, z0, z1) = slabs[i];
        let s = (z1 - z0) * plane;
        let x_n = &x[n * g.cin * sp..(n + 1) * g.cin * sp];
        let dy_n = &dy[n * g.cout * sp..(n + 1) * g.cout * sp];
        let mut part = vec![T::zero(); g.cout * kk];
        let col;
        let (bptr, rsb, csb) = if g.k == 1 {
            // SAFETY: offset stays inside x_n
            (unsafe { x_n.as_ptr().add(z0 * plane) }, 1isize, sp as isize)
        } else {
            let mut c = vec![T::zero(); kk * s];
            im2col(x_n, g, z0, z1, &mut c);
            col = c;
            (col.as_ptr(), 1isize, s as isize)
        };
        // SAFETY: dy rows are strided by DHW starting at the slab, B is col^T.
        unsafe {
            T::gemm(
                g.cout,
                s,
                kk,
                T::one(),
                dy_n.as_ptr().add(z0 * plane),
                sp as isize,
                1,
                bptr,
                rsb,
                csb,
                T::zero(),
                part.as_mut_ptr(),
                kk as isize,
                1,
            );
        }
        part
    });
    let mut dw = vec![T::zero(); g.cout * kk];
    for part in parts {
        for (a, b) in dw.iter_mut().zip(part) {
            *a += b;
        }
    }
    let mut db = vec![T::zero(); g.cout];
    for n in 0..g.n {
        for (co, acc) in db.iter_mut().enumerate() {
            let base = (n * g.cout + co) * sp;
            *acc += T::from_f64(dy[base..base + sp].iter().map(|v| v.as_f64()).sum());
        }
    }
    (dw, db)
}

/// Reference convolution: explicit loop nest, zero padding `(k-1)/2`.
pub fn conv3d_direct<T: Scalar>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let g = Geom::new(x.shape(), wt.shape())?;
    let (d, h, w, k) = (g.d as isize, g.h as isize, g.w as isize, g.k as isize);
    let pad = k / 2;
    let (xd, wd) = (x.data(), wt.data());
    let mut out = Tensor::zeros(&[g.n, g.cout, g.d, g.h, g.w]);
    let od = out.data_mut();
    let mut idx = 0;
    for n in 0..g.n {
        for co in 0..g.cout {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = bias.map_or(T::zero(), |b| b.data()[co]);
                        for ci in 0..g.cin {
                            for a in 0..k {
                                for b in 0..k {
                                    for c in 0..k {
                                        let (sz, sy, sx) = (z + a - pad, y + b - pad, xx + c - pad);
                                        if sz < 0
                                            || sy < 0
                                            || sx < 0
                                            || sz >= d
                                            || sy >= h
                                            || sx >= w
                                        {
                                            continue;
                                        }
                                        let xi = (((n * g.cin + ci) as isize * d + sz) * h + sy)
                                            * w
                                            + sx;
                                        let wi =
                                            (((co * g.cin + ci) as isize * k + a) * k + b) * k + c;
                                        acc += xd[xi as usize] * wd[wi as usize];
                                    }
                                }
                            }
                        }
                        od[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}
