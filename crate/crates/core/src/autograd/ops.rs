//! Forward kernels and adjoints for the non-convolution ops.

use alloc::{format, vec, vec::Vec};

use super::{BceWeights, PROB_CLAMP};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, d, h, w] = x.dims5("maxpool3d")?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddDims {
            op: "maxpool3d",
            dims: [d, h, w],
        });
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + ((2 * z) * h + 2 * y) * w + 2 * xx;
                    for (a, b, e) in CELL {
                        let idx = base + ((2 * z + a) * h + 2 * y + b) * w + 2 * xx + e;
                        // strict comparison keeps the first maximum on ties
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, od, oh, ow], out), argmax))
}

const CELL: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

/// Source taps for x2 linear interpolation with half-pixel centers:
/// `src = (o + 0.5) / 2 - 0.5`, clamped at the borders.
fn interp_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Interpolates axis of length `len` (between `outer` and `inner` strides).
fn interp_axis<T: Scalar>(src: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let taps = interp_taps(len);
    let mut dst = vec![T::zero(); outer * 2 * len * inner];
    for o in 0..outer {
        let s = &src[o * len * inner..(o + 1) * len * inner];
        let d = &mut dst[o * 2 * len * inner..(o + 1) * 2 * len * inner];
        for (j, &(i0, i1, f)) in taps.iter().enumerate() {
            let f = T::from_f64(f);
            let (a, b) = (
                &s[i0 * inner..(i0 + 1) * inner],
                &s[i1 * inner..(i1 + 1) * inner],
            );
            for (k, out) in d[j * inner..(j + 1) * inner].iter_mut().enumerate() {
                // v0 + f (v1 - v0) is exact on constant regions
                *out = a[k] + f * (b[k] - a[k]);
            }
        }
    }
    dst
}

fn interp_axis_adjoint<T: Scalar>(g: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let taps = interp_taps(len);
    let mut dst = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let gs = &g[o * 2 * len * inner..(o + 1) * 2 * len * inner];
        let d = &mut dst[o * len * inner..(o + 1) * len * inner];
        for (j, &(i0, i1, f)) in taps.iter().enumerate() {
            let f = T::from_f64(f);
            let one_minus = T::one() - f;
            for k in 0..inner {
                let gv = gs[j * inner + k];
                d[i0 * inner + k] += gv * one_minus;
                d[i1 * inner + k] += gv * f;
            }
        }
    }
    dst
}

pub(crate) fn upsample_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = x.dims5("trilinear_upsample")?;
    if d == 0 || h == 0 || w == 0 {
        return Ok(Tensor::from_parts(
            vec![n, c, 2 * d, 2 * h, 2 * w],
            Vec::new(),
        ));
    }
    let nc = n * c;
    let a = interp_axis(x.data(), nc * d * h, w, 1);
    let b = interp_axis(&a, nc * d, h, 2 * w);
    let out = interp_axis(&b, nc, d, 4 * h * w);
    Ok(Tensor::from_parts(vec![n, c, 2 * d, 2 * h, 2 * w], out))
}

pub(crate) fn upsample_backward<T: Scalar>(xshape: &[usize], g: &[T]) -> Vec<T> {
    let &[n, c, d, h, w] = xshape else {
        unreachable!("validated in forward")
    };
    if d == 0 || h == 0 || w == 0 {
        return Vec::new();
    }
    let nc = n * c;
    let b = interp_axis_adjoint(g, nc, d, 4 * h * w);
    let a = interp_axis_adjoint(&b, nc * d, h, 2 * w);
    interp_axis_adjoint(&a, nc * d * h, w, 1)
}

type NormOut<T> = (Tensor<T>, Vec<T>, Vec<T>);

pub(crate) fn instance_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<NormOut<T>> {
    let [n, c, d, h, w] = x.dims5("instance_norm")?;
    let s = d * h * w;
    if s < 2 {
        return Err(shape_err(
            "instance_norm",
            format!("spatial size {} < 2", s),
        ));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "instance_norm",
            format!(
                "affine params {:?}/{:?} for {} channels",
                gamma.shape(),
                beta.shape(),
                c
            ),
        ));
    }
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(n * c);
    for (i, chunk) in x.data().chunks_exact(s).enumerate() {
        let ch = i % c;
        let mean = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / s as f64;
        let var = chunk
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / s as f64;
        let istd = 1.0 / libm::sqrt(var + eps);
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        let xh = &mut xhat[i * s..(i + 1) * s];
        let o = &mut out[i * s..(i + 1) * s];
        for k in 0..s {
            let v = T::from_f64((chunk[k].as_f64() - mean) * istd);
            xh[k] = v;
            o[k] = gm * v + bt;
        }
        inv_std.push(T::from_f64(istd));
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), xhat, inv_std))
}

pub(crate) fn instance_norm_backward<T: Scalar>(
    shape: &[usize],
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = shape[1];
    let s: usize = shape[2..].iter().product();
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![0f64; c];
    let mut dbeta = vec![0f64; c];
    for (i, istd) in inv_std.iter().enumerate() {
        let ch = i % c;
        let gs = &g[i * s..(i + 1) * s];
        let xh = &xhat[i * s..(i + 1) * s];
        let (mut sum_g, mut sum_gx) = (0f64, 0f64);
        for k in 0..s {
            sum_g += gs[k].as_f64();
            sum_gx += gs[k].as_f64() * xh[k].as_f64();
        }
        dgamma[ch] += sum_gx;
        dbeta[ch] += sum_g;
        let gm = gamma[ch].as_f64();
        let scale = gm * istd.as_f64() / s as f64;
        let out = &mut dx[i * s..(i + 1) * s];
        for k in 0..s {
            out[k] =
                T::from_f64(scale * (s as f64 * gs[k].as_f64() - sum_g - xh[k].as_f64() * sum_gx));
        }
    }
    (
        dx,
        dgamma.into_iter().map(T::from_f64).collect(),
        dbeta.into_iter().map(T::from_f64).collect(),
    )
}

pub(crate) fn gap_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = x.dims5("global_avg_pool")?;
    let s = (d * h * w).max(1);
    let data = x
        .data()
        .chunks_exact(s)
        .map(|ch| T::from_f64(ch.iter().map(|v| v.as_f64()).sum::<f64>() / s as f64))
        .collect();
    Ok(Tensor::from_parts(vec![n, c], data))
}

pub(crate) fn linear_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (&[bsz, fin], &[fout, win]) = (x.shape(), w.shape()) else {
        return Err(shape_err(
            "linear",
            format!("input {:?}, weight {:?}", x.shape(), w.shape()),
        ));
    };
    if fin != win {
        return Err(shape_err(
            "linear",
            format!("input features {} vs weight {}", fin, win),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [fout] {
            return Err(shape_err("linear", format!("bias {:?}", b.shape())));
        }
    }
    let mut out = vec![T::zero(); bsz * fout];
    for i in 0..bsz {
        let xi = &x.data()[i * fin..(i + 1) * fin];
        for o in 0..fout {
            let wo = &w.data()[o * fin..(o + 1) * fin];
            let acc: T = xi.iter().zip(wo).map(|(a, b)| *a * *b).sum();
            out[i * fout + o] = acc + b.map_or(T::zero(), |b| b.data()[o]);
        }
    }
    Ok(Tensor::from_parts(vec![bsz, fout], out))
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (bsz, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    let mut dx = vec![T::zero(); bsz * fin];
    let mut dw = vec![T::zero(); fout * fin];
    let mut db = vec![T::zero(); fout];
    for i in 0..bsz {
        let xi = &x.data()[i * fin..(i + 1) * fin];
        for o in 0..fout {
            let gv = g[i * fout + o];
            db[o] += gv;
            let wo = &w.data()[o * fin..(o + 1) * fin];
            for k in 0..fin {
                dx[i * fin + k] += gv * wo[k];
                dw[o * fin + k] += gv * xi[k];
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn mul_channelwise_forward<T: Scalar>(
    x: &Tensor<T>,
    s: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, ..] = x.dims5("mul_channelwise")?;
    if s.shape() != [n, c] {
        return Err(shape_err(
            "mul_channelwise",
            format!("scales {:?} for {:?}", s.shape(), x.shape()),
        ));
    }
    let sp = x.len() / (n * c).max(1);
    let mut out = x.data().to_vec();
    for (chunk, sv) in out.chunks_exact_mut(sp.max(1)).zip(s.data()) {
        for v in chunk {
            *v = *v * *sv;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn mul_channelwise_backward<T: Scalar>(
    x: &Tensor<T>,
    s: &Tensor<T>,
    g: &[T],
) -> (Vec<T>, Vec<T>) {
    let sp = (x.len() / s.len().max(1)).max(1);
    let mut dx = vec![T::zero(); x.len()];
    let mut ds = vec![T::zero(); s.len()];
    for (i, sv) in s.data().iter().enumerate() {
        let (xs, gs) = (&x.data()[i * sp..(i + 1) * sp], &g[i * sp..(i + 1) * sp]);
        let mut acc = 0f64;
        for k in 0..sp {
            dx[i * sp + k] = gs[k] * *sv;
            acc += gs[k].as_f64() * xs[k].as_f64();
        }
        ds[i] = T::from_f64(acc);
    }
    (dx, ds)
}

pub(crate) fn concat_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, d, h, w] = a.dims5("concat")?;
    let [nb, cb, db, hb, wb] = b.dims5("concat")?;
    if (n, d, h, w) != (nb, db, hb, wb) {
        return Err(shape_err(
            "concat",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let sp = d * h * w;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * sp..(i + 1) * ca * sp]);
        out.extend_from_slice(&b.data()[i * cb * sp..(i + 1) * cb * sp]);
    }
    Ok(Tensor::from_parts(vec![n, ca + cb, d, h, w], out))
}

pub(crate) fn concat_backward<T: Scalar>(
    ashape: &[usize],
    bshape: &[usize],
    g: &[T],
) -> (Vec<T>, Vec<T>) {
    let (n, ca, cb) = (ashape[0], ashape[1], bshape[1]);
    let sp: usize = ashape[2..].iter().product();
    let mut da = Vec::with_capacity(n * ca * sp);
    let mut db = Vec::with_capacity(n * cb * sp);
    for i in 0..n {
        let base = i * (ca + cb) * sp;
        da.extend_from_slice(&g[base..base + ca * sp]);
        db.extend_from_slice(&g[base + ca * sp..base + (ca + cb) * sp]);
    }
    (da, db)
}

fn weight_of(weights: BceWeights, y: f64) -> f64 {
    match weights {
        BceWeights::Unit => 1.0,
        // w_i = (N0 y_i + N1 (1 - y_i)) / N, pre-divided by N
        BceWeights::Class { positive, negative } => positive * y + negative * (1.0 - y),
    }
}

pub(crate) fn bce_value<T: Scalar>(p: &[T], y: &[T], weights: BceWeights) -> f64 {
    p.iter()
        .zip(y)
        .map(|(pv, yv)| {
            let pc = pv.as_f64().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let yv = yv.as_f64();
            weight_of(weights, yv) * (-yv * libm::log(pc) - (1.0 - yv) * libm::log(1.0 - pc))
        })
        .sum()
}

pub(crate) fn bce_grad<T: Scalar>(p: &[T], y: &[T], weights: BceWeights, g: T) -> Vec<T> {
    let g = g.as_f64();
    p.iter()
        .zip(y)
        .map(|(pv, yv)| {
            let pv = pv.as_f64();
            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pv) {
                return T::zero();
            }
            let yv = yv.as_f64();
            T::from_f64(g * weight_of(weights, yv) * (-yv / pv + (1.0 - yv) / (1.0 - pv)))
        })
        .collect()
}

pub(crate) fn dice_sums<T: Scalar>(p: &[T], y: &[T]) -> (f64, f64, f64) {
    let (mut i, mut pp, mut yy) = (0f64, 0f64, 0f64);
    for (pv, yv) in p.iter().zip(y) {
        let (pv, yv) = (pv.as_f64(), yv.as_f64());
        i += pv * yv;
        pp += pv * pv;
        yy += yv * yv;
    }
    (i, pp, yy)
}

pub(crate) fn dice_grad<T: Scalar>(p: &[T], y: &[T], eps: f64, g: T) -> Vec<T> {
    let (i, pp, yy) = dice_sums(p, y);
    let num = 2.0 * i + eps;
    let den = pp + yy + eps;
    let g = g.as_f64();
    p.iter()
        .zip(y)
        .map(|(pv, yv)| {
            let (pv, yv) = (pv.as_f64(), yv.as_f64());
            T::from_f64(-g * (2.0 * yv * den - num * 2.0 * pv) / (den * den))
        })
        .collect()
}
