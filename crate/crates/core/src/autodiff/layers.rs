//! Forward and analytic backward kernels for the convolutional layers.

use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Float, Tensor};

/// Per-channel statistics of a batch-norm input. `var` is the unbiased
/// estimate, as folded into running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) struct BnSaved<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

fn dims4(t: &Tensor<impl Float>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

pub(crate) fn conv2d_forward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (bn, cin, h, wd) = dims4(x, "conv2d")?;
    let cout = w.shape().first().copied().unwrap_or(0);
    if w.shape() != [cout, cin, 3, 3] || b.shape() != [cout] {
        return Err(Error::Shape {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let geom = ConvGeom { cin, h, w: wd };
    let (k, hw) = (geom.cols_rows(), geom.positions());
    let mut cols = vec![T::zero(); k * hw];
    let mut out = vec![T::zero(); bn * cout * hw];
    for i in 0..bn {
        geom.im2col(&x.data()[i * cin * hw..(i + 1) * cin * hw], &mut cols);
        let dst = &mut out[i * cout * hw..(i + 1) * cout * hw];
        for (co, row) in dst.chunks_mut(hw).enumerate() {
            row.fill(b.data()[co]);
        }
        T::gemm(cout, k, hw, T::one(), w.data(), (k as isize, 1), &cols, (hw as isize, 1), T::one(), dst, (hw as isize, 1));
    }
    Ok(Tensor::from_parts(vec![bn, cout, h, wd], out))
}

pub(crate) fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (bn, cin, h, wd) = dims4(x, "conv2d")?;
    let cout = w.shape()[0];
    let geom = ConvGeom { cin, h, w: wd };
    let (k, hw) = (geom.cols_rows(), geom.positions());
    let mut cols = vec![T::zero(); k * hw];
    let mut dcols = vec![T::zero(); k * hw];
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); cout * k];
    let mut gb = vec![T::zero(); cout];
    for i in 0..bn {
        let gi = &g.data()[i * cout * hw..(i + 1) * cout * hw];
        for (co, row) in gi.chunks(hw).enumerate() {
            gb[co] += row.iter().copied().sum();
        }
        geom.im2col(&x.data()[i * cin * hw..(i + 1) * cin * hw], &mut cols);
        // gw += g_i · colsᵀ
        T::gemm(cout, hw, k, T::one(), gi, (hw as isize, 1), &cols, (1, hw as isize), T::one(), &mut gw, (k as isize, 1));
        // dcols = wᵀ · g_i
        T::gemm(k, cout, hw, T::one(), w.data(), (1, k as isize), gi, (hw as isize, 1), T::zero(), &mut dcols, (hw as isize, 1));
        geom.col2im(&dcols, &mut gx[i * cin * hw..(i + 1) * cin * hw]);
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
        Tensor::from_parts(vec![cout], gb),
    ))
}

fn check_affine<T: Float>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = dims4(x, "batchnorm2d")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape {
            op: "batchnorm2d",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    Ok((b, c, h * w))
}

pub(crate) fn batch_norm_forward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BnSaved<T>, BatchStats<T>)> {
    let (b, c, hw) = check_affine(x, gamma, beta)?;
    let n = b * hw;
    if n < 2 {
        return Err(Error::Invalid("batchnorm2d needs more than one value per channel".into()));
    }
    let nf = T::from_usize(n).expect("count fits float");
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..b {
            s += xd[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum();
        }
        let m = s / nf;
        let mut v = T::zero();
        for i in 0..b {
            for &val in &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                v += (val - m) * (val - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / nf;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for i in 0..b {
        for ch in 0..c {
            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for ((xh, o), &val) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&xd[r]) {
                *xh = (val - mean[ch]) * inv_std[ch];
                *o = gamma.data()[ch] * *xh + beta.data()[ch];
            }
        }
    }
    let unbias = nf / (nf - T::one());
    let stats = BatchStats {
        mean,
        var: var.iter().map(|&v| v * unbias).collect(),
    };
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        BnSaved {
            xhat,
            inv_std,
            shape: x.shape().to_vec(),
        },
        stats,
    ))
}

fn affine_param_grads<T: Float>(saved: &BnSaved<T>, g: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (b, c) = (saved.shape[0], saved.shape[1]);
    let hw = saved.shape[2] * saved.shape[3];
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for i in 0..b {
        for ch in 0..c {
            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for (&gv, &xh) in g.data()[r.clone()].iter().zip(&saved.xhat[r]) {
                sum_g[ch] += gv;
                sum_gx[ch] += gv * xh;
            }
        }
    }
    (sum_g, sum_gx)
}

pub(crate) fn batch_norm_backward<T: Float>(
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c) = (saved.shape[0], saved.shape[1]);
    let hw = saved.shape[2] * saved.shape[3];
    let nf = T::from_usize(b * hw).expect("count fits float");
    let (sum_g, sum_gx) = affine_param_grads(saved, g);
    let mut gx = vec![T::zero(); g.len()];
    for i in 0..b {
        for ch in 0..c {
            let k = gamma.data()[ch] * saved.inv_std[ch] / nf;
            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for ((o, &gv), &xh) in gx[r.clone()].iter_mut().zip(&g.data()[r.clone()]).zip(&saved.xhat[r]) {
                *o = k * (nf * gv - sum_g[ch] - xh * sum_gx[ch]);
            }
        }
    }
    Ok((
        Tensor::from_parts(saved.shape.clone(), gx),
        Tensor::from_parts(vec![c], sum_gx),
        Tensor::from_parts(vec![c], sum_g),
    ))
}

pub(crate) fn batch_norm_eval_forward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &BatchStats<T>,
    eps: T,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let (b, c, hw) = check_affine(x, gamma, beta)?;
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::Shape {
            op: "batchnorm2d",
            lhs: x.shape().to_vec(),
            rhs: vec![stats.mean.len()],
        });
    }
    let inv_std: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for i in 0..b {
        for ch in 0..c {
            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for ((xh, o), &val) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&x.data()[r]) {
                *xh = (val - stats.mean[ch]) * inv_std[ch];
                *o = gamma.data()[ch] * *xh + beta.data()[ch];
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        BnSaved {
            xhat,
            inv_std,
            shape: x.shape().to_vec(),
        },
    ))
}

pub(crate) fn batch_norm_eval_backward<T: Float>(
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c) = (saved.shape[0], saved.shape[1]);
    let hw = saved.shape[2] * saved.shape[3];
    let (sum_g, sum_gx) = affine_param_grads(saved, g);
    let mut gx = vec![T::zero(); g.len()];
    for i in 0..b {
        for ch in 0..c {
            let k = gamma.data()[ch] * saved.inv_std[ch];
            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for (o, &gv) in gx[r.clone()].iter_mut().zip(&g.data()[r]) {
                *o = k * gv;
            }
        }
    }
    Ok((
        Tensor::from_parts(saved.shape.clone(), gx),
        Tensor::from_parts(vec![c], sum_gx),
        Tensor::from_parts(vec![c], sum_g),
    ))
}

pub(crate) fn avg_pool_forward<T: Float>(x: &Tensor<T>, kt: usize, kf: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = dims4(x, "avgpool2d")?;
    if kt == 0 || kf == 0 || h < kt || w < kf {
        return Err(Error::Shape {
            op: "avgpool2d",
            lhs: x.shape().to_vec(),
            rhs: vec![kt, kf],
        });
    }
    let (ho, wo) = (h / kt, w / kf);
    let norm = T::one() / T::from_usize(kt * kf).expect("count fits float");
    let mut out = vec![T::zero(); b * c * ho * wo];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = T::zero();
                for dy in 0..kt {
                    let row = &plane[(oy * kt + dy) * w..];
                    for dx in 0..kf {
                        s += row[ox * kf + dx];
                    }
                }
                dst[oy * wo + ox] = s * norm;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, ho, wo], out))
}

pub(crate) fn avg_pool_backward<T: Float>(in_shape: &[usize], kt: usize, kf: usize, g: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (h / kt, w / kf);
    let norm = T::one() / T::from_usize(kt * kf).expect("count fits float");
    let mut gx = vec![T::zero(); in_shape.iter().product()];
    for (plane, src) in gx.chunks_mut(h * w).zip(g.data().chunks(ho * wo)) {
        for oy in 0..ho {
            for ox in 0..wo {
                let v = src[oy * wo + ox] * norm;
                for dy in 0..kt {
                    for dx in 0..kf {
                        plane[(oy * kt + dy) * w + ox * kf + dx] = v;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(in_shape.to_vec(), gx))
}

pub(crate) fn mean_last_forward<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let f = *x.shape().last().ok_or_else(|| Error::Invalid("mean over last axis of a scalar".into()))?;
    let norm = T::one() / T::from_usize(f).expect("count fits float");
    let out = x.data().chunks(f).map(|c| c.iter().copied().sum::<T>() * norm).collect();
    Ok(Tensor::from_parts(x.shape()[..x.rank() - 1].to_vec(), out))
}

pub(crate) fn mean_last_backward<T: Float>(in_shape: &[usize], g: &Tensor<T>) -> Result<Tensor<T>> {
    let f = *in_shape.last().expect("rank >= 1");
    let norm = T::one() / T::from_usize(f).expect("count fits float");
    let mut gx = Vec::with_capacity(g.len() * f);
    for &v in g.data() {
        gx.extend(std::iter::repeat_n(v * norm, f));
    }
    Ok(Tensor::from_parts(in_shape.to_vec(), gx))
}

/// `[B, D]` placed at time index `t` of a zero `[B, len, D]` tensor.
pub(crate) fn scatter_axis1<T: Float>(g: &Tensor<T>, t: usize, len: usize) -> Result<Tensor<T>> {
    if g.rank() != 2 || t >= len {
        return Err(Error::Shape {
            op: "scatter_axis1",
            lhs: g.shape().to_vec(),
            rhs: vec![t, len],
        });
    }
    let (b, d) = (g.shape()[0], g.shape()[1]);
    let mut out = vec![T::zero(); b * len * d];
    for i in 0..b {
        out[(i * len + t) * d..(i * len + t + 1) * d].copy_from_slice(&g.data()[i * d..(i + 1) * d]);
    }
    Ok(Tensor::from_parts(vec![b, len, d], out))
}
