//! Forward and backward kernels for the layers used by the networks.

use super::tensor::Tensor;

/// Zero-padded copy of every channel of batch item `n` ("same" padding).
fn pad_item(x: &Tensor, n: usize, pad: usize) -> (Vec<f64>, [usize; 3]) {
    let [nx, ny, nz] = x.spatial_dims();
    let (px, py, pz) = (nx + 2 * pad, ny + 2 * pad, nz + 2 * pad);
    let c = x.channels();
    let mut out = vec![0.0; c * px * py * pz];
    for ci in 0..c {
        let src = x.plane(n, ci);
        let dst = &mut out[ci * px * py * pz..(ci + 1) * px * py * pz];
        for z in 0..nz {
            for y in 0..ny {
                let s = nx * (y + ny * z);
                let d = pad + px * (y + pad + py * (z + pad));
                dst[d..d + nx].copy_from_slice(&src[s..s + nx]);
            }
        }
    }
    (out, [px, py, pz])
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Stride-1 "same" 3D convolution with an odd cubic kernel.
///
/// `weight` is laid out `[cout][cin][kz][ky][kx]`; `bias` may be empty.
pub fn conv3d(x: &Tensor, weight: &[f64], bias: &[f64], cout: usize, k: usize) -> Tensor {
    let cin = x.channels();
    assert_eq!(weight.len(), cout * cin * k * k * k, "conv weight shape");
    let pad = k / 2;
    let [nx, ny, nz] = x.spatial_dims();
    let mut shape = x.shape();
    shape[1] = cout;
    let mut out = Tensor::zeros(shape);
    for n in 0..x.batch() {
        let (padded, [px, py, pz]) = pad_item(x, n, pad);
        let pvol = px * py * pz;
        for co in 0..cout {
            let dst = out.plane_mut(n, co);
            if let Some(&b) = bias.get(co) {
                dst.fill(b);
            }
            for ci in 0..cin {
                let src = &padded[ci * pvol..(ci + 1) * pvol];
                let wbase = (co * cin + ci) * k * k * k;
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let w = weight[wbase + kx + k * (ky + k * kz)];
                            for z in 0..nz {
                                for y in 0..ny {
                                    let s = kx + px * (y + ky + py * (z + kz));
                                    let d = nx * (y + ny * z);
                                    axpy(w, &src[s..s + nx], &mut dst[d..d + nx]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv3d`]. Returns `(grad_input, grad_weight, grad_bias)`;
/// `grad_input` is skipped when `need_input` is false.
pub fn conv3d_backward(
    x: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    k: usize,
    need_input: bool,
) -> (Option<Tensor>, Vec<f64>, Vec<f64>) {
    let cin = x.channels();
    let cout = grad_out.channels();
    let pad = k / 2;
    let [nx, ny, nz] = x.spatial_dims();
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; cout];
    let mut gx = need_input.then(|| Tensor::zeros(x.shape()));
    for n in 0..x.batch() {
        let (padded, [px, py, pz]) = pad_item(x, n, pad);
        let pvol = px * py * pz;
        let mut gpad = if need_input {
            vec![0.0; cin * pvol]
        } else {
            Vec::new()
        };
        for co in 0..cout {
            let g = grad_out.plane(n, co);
            gb[co] += g.iter().sum::<f64>();
            for ci in 0..cin {
                let src = &padded[ci * pvol..(ci + 1) * pvol];
                let wbase = (co * cin + ci) * k * k * k;
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wi = wbase + kx + k * (ky + k * kz);
                            let w = weight[wi];
                            let mut acc = 0.0;
                            for z in 0..nz {
                                for y in 0..ny {
                                    let s = kx + px * (y + ky + py * (z + kz));
                                    let d = nx * (y + ny * z);
                                    acc += dot(&g[d..d + nx], &src[s..s + nx]);
                                    if need_input {
                                        let gp = &mut gpad[ci * pvol..(ci + 1) * pvol];
                                        axpy(w, &g[d..d + nx], &mut gp[s..s + nx]);
                                    }
                                }
                            }
                            gw[wi] += acc;
                        }
                    }
                }
            }
        }
        if let Some(gx) = gx.as_mut() {
            for ci in 0..cin {
                let src = &gpad[ci * pvol..(ci + 1) * pvol];
                let dst = gx.plane_mut(n, ci);
                for z in 0..nz {
                    for y in 0..ny {
                        let s = pad + px * (y + pad + py * (z + pad));
                        let d = nx * (y + ny * z);
                        dst[d..d + nx].copy_from_slice(&src[s..s + nx]);
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { slope * v })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Backward of [`leaky_relu`] given its output.
pub fn leaky_relu_backward(out: &Tensor, grad: &Tensor, slope: f64) -> Tensor {
    let data = out
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&o, &g)| if o > 0.0 { g } else { slope * g })
        .collect();
    Tensor::from_vec(out.shape(), data)
}

/// 2×2×2 average pooling. Spatial dims must be even.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let [nx, ny, nz] = x.spatial_dims();
    let (hx, hy, hz) = (nx / 2, ny / 2, nz / 2);
    let s = x.shape();
    let mut out = Tensor::zeros([s[0], s[1], hz, hy, hx]);
    for n in 0..s[0] {
        for c in 0..s[1] {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for z in 0..nz {
                for y in 0..ny {
                    let row = &src[nx * (y + ny * z)..];
                    let d = hx * (y / 2 + hy * (z / 2));
                    for xo in 0..hx {
                        dst[d + xo] += 0.125 * (row[2 * xo] + row[2 * xo + 1]);
                    }
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad: &Tensor, input_shape: [usize; 5]) -> Tensor {
    let mut out = Tensor::zeros(input_shape);
    let [nx, ny, nz] = out.spatial_dims();
    let [hx, hy, _] = grad.spatial_dims();
    for n in 0..input_shape[0] {
        for c in 0..input_shape[1] {
            let g = grad.plane(n, c);
            let dst = out.plane_mut(n, c);
            for z in 0..nz {
                for y in 0..ny {
                    let d = nx * (y + ny * z);
                    let s = hx * (y / 2 + hy * (z / 2));
                    for x in 0..nx {
                        dst[d + x] = 0.125 * g[s + x / 2];
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let [hx, hy, hz] = x.spatial_dims();
    let (nx, ny, nz) = (2 * hx, 2 * hy, 2 * hz);
    let s = x.shape();
    let mut out = Tensor::zeros([s[0], s[1], nz, ny, nx]);
    for n in 0..s[0] {
        for c in 0..s[1] {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for z in 0..nz {
                for y in 0..ny {
                    let d = nx * (y + ny * z);
                    let r = hx * (y / 2 + hy * (z / 2));
                    for xx in 0..nx {
                        dst[d + xx] = src[r + xx / 2];
                    }
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(grad: &Tensor) -> Tensor {
    let [nx, ny, nz] = grad.spatial_dims();
    let (hx, hy, hz) = (nx / 2, ny / 2, nz / 2);
    let s = grad.shape();
    let mut out = Tensor::zeros([s[0], s[1], hz, hy, hx]);
    for n in 0..s[0] {
        for c in 0..s[1] {
            let src = grad.plane(n, c);
            let dst = out.plane_mut(n, c);
            for z in 0..nz {
                for y in 0..ny {
                    let d = nx * (y + ny * z);
                    let r = hx * (y / 2 + hy * (z / 2));
                    for xx in 0..nx {
                        dst[r + xx / 2] += src[d + xx];
                    }
                }
            }
        }
    }
    out
}

/// Elementwise product with a precomputed mask (dropout, already rescaled).
pub fn apply_mask(x: &Tensor, mask: &[f64]) -> Tensor {
    let data = x.data().iter().zip(mask).map(|(a, m)| a * m).collect();
    Tensor::from_vec(x.shape(), data)
}

/// Per-channel batch statistics and normalized activations.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance, used for running-average updates.
    pub batch_var_unbiased: Vec<f64>,
    pub training: bool,
}

/// Batch normalization over (batch, z, y, x) per channel.
///
/// In training mode the batch statistics are used; otherwise the supplied
/// running mean and variance.
pub fn batch_norm(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running: (&[f64], &[f64]),
    eps: f64,
    training: bool,
) -> (Tensor, BatchNormCache) {
    let s = x.shape();
    let (nb, c, v) = (s[0], s[1], x.voxels());
    let count = (nb * v) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let mut var_unbiased = vec![0.0; c];
    if training {
        for ch in 0..c {
            let m = (0..nb)
                .map(|n| x.plane(n, ch).iter().sum::<f64>())
                .sum::<f64>()
                / count;
            let ss = (0..nb)
                .map(|n| {
                    x.plane(n, ch)
                        .iter()
                        .map(|a| (a - m) * (a - m))
                        .sum::<f64>()
                })
                .sum::<f64>();
            mean[ch] = m;
            var[ch] = ss / count;
            var_unbiased[ch] = if count > 1.0 { ss / (count - 1.0) } else { 0.0 };
        }
    } else {
        mean.copy_from_slice(running.0);
        var.copy_from_slice(running.1);
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for n in 0..nb {
        for ch in 0..c {
            let src = x.plane(n, ch);
            let xh = xhat.plane_mut(n, ch);
            for (h, a) in xh.iter_mut().zip(src) {
                *h = (a - mean[ch]) * inv_std[ch];
            }
            let dst = out.plane_mut(n, ch);
            for (o, h) in dst.iter_mut().zip(xhat.plane(n, ch)) {
                *o = gamma[ch] * h + beta[ch];
            }
        }
    }
    (
        out,
        BatchNormCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: var_unbiased,
            training,
        },
    )
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batch_norm_backward(
    cache: &BatchNormCache,
    gamma: &[f64],
    grad: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let s = grad.shape();
    let (nb, c, v) = (s[0], s[1], grad.voxels());
    let count = (nb * v) as f64;
    let mut gg = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let mut gx = Tensor::zeros(s);
    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for n in 0..nb {
            let g = grad.plane(n, ch);
            let xh = cache.xhat.plane(n, ch);
            sum_g += g.iter().sum::<f64>();
            sum_gx += dot(g, xh);
        }
        gbeta[ch] = sum_g;
        gg[ch] = sum_gx;
        let scale = gamma[ch] * cache.inv_std[ch];
        for n in 0..nb {
            let g = grad.plane(n, ch).to_vec();
            let xh = cache.xhat.plane(n, ch).to_vec();
            let dst = gx.plane_mut(n, ch);
            for i in 0..v {
                dst[i] = if cache.training {
                    scale * (g[i] - sum_g / count - xh[i] * sum_gx / count)
                } else {
                    scale * g[i]
                };
            }
        }
    }
    (gx, gg, gbeta)
}

/// Dense layer: `x` is `[rows][fin]`, `w` is `[fout][fin]`.
pub fn linear(x: &[f64], rows: usize, w: &[f64], b: &[f64], fout: usize) -> Vec<f64> {
    let fin = x.len() / rows;
    let mut out = vec![0.0; rows * fout];
    for r in 0..rows {
        let xr = &x[r * fin..(r + 1) * fin];
        for o in 0..fout {
            out[r * fout + o] = b[o] + dot(&w[o * fin..(o + 1) * fin], xr);
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)` for [`linear`].
pub fn linear_backward(
    x: &[f64],
    rows: usize,
    w: &[f64],
    grad: &[f64],
    fout: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let fin = x.len() / rows;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; fout];
    for r in 0..rows {
        let xr = &x[r * fin..(r + 1) * fin];
        for o in 0..fout {
            let g = grad[r * fout + o];
            gb[o] += g;
            axpy(g, xr, &mut gw[o * fin..(o + 1) * fin]);
            axpy(
                g,
                &w[o * fin..(o + 1) * fin],
                &mut gx[r * fin..(r + 1) * fin],
            );
        }
    }
    (gx, gw, gb)
}

/// Two-class softmax; returns the probability of class 1.
pub fn softmax2(z0: f64, z1: f64) -> f64 {
    let d = z1 - z0;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 5]) -> Tensor {
        let n = shape.iter().product::<usize>();
        Tensor::from_vec(
            shape,
            (0..n)
                .map(|i| ((i * 7919) % 23) as f64 / 23.0 - 0.4)
                .collect(),
        )
    }

    /// Direct definition of "same" convolution, independent of the row kernels.
    fn conv_reference(x: &Tensor, w: &[f64], b: &[f64], cout: usize, k: usize) -> Tensor {
        let [nx, ny, nz] = x.spatial_dims();
        let cin = x.channels();
        let p = (k / 2) as isize;
        let mut s = x.shape();
        s[1] = cout;
        let mut out = Tensor::zeros(s);
        for n in 0..x.batch() {
            for co in 0..cout {
                for z in 0..nz {
                    for y in 0..ny {
                        for xx in 0..nx {
                            let mut acc = b[co];
                            for ci in 0..cin {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iz = z as isize + kz as isize - p;
                                            let iy = y as isize + ky as isize - p;
                                            let ix = xx as isize + kx as isize - p;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= nz as isize
                                                || iy >= ny as isize
                                                || ix >= nx as isize
                                            {
                                                continue;
                                            }
                                            let xi =
                                                ix as usize + nx * (iy as usize + ny * iz as usize);
                                            acc += w
                                                [((co * cin + ci) * k + kz) * k * k + ky * k + kx]
                                                * x.plane(n, ci)[xi];
                                        }
                                    }
                                }
                            }
                            out.plane_mut(n, co)[xx + nx * (y + ny * z)] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition() {
        let x = ramp([2, 3, 4, 5, 6]);
        let w: Vec<f64> = (0..2 * 3 * 27)
            .map(|i| ((i * 31) % 17) as f64 / 17.0 - 0.5)
            .collect();
        let b = vec![0.1, -0.2];
        let got = conv3d(&x, &w, &b, 2, 3);
        let want = conv_reference(&x, &w, &b, 2, 3);
        for (a, e) in got.data().iter().zip(want.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is bilinear: its gradients w.r.t. x and w must reproduce it.
        let x = ramp([1, 2, 3, 4, 4]);
        let w: Vec<f64> = (0..3 * 2 * 27)
            .map(|i| ((i * 13) % 11) as f64 / 11.0 - 0.5)
            .collect();
        let g = ramp([1, 3, 3, 4, 4]);
        let y = conv3d(&x, &w, &[], 3, 3);
        let inner = dot(y.data(), g.data());
        let (gx, gw, _) = conv3d_backward(&x, &w, &g, 3, true);
        let via_x = dot(gx.unwrap().data(), x.data());
        let via_w = dot(&gw, &w);
        assert!((inner - via_x).abs() < 1e-9);
        assert!((inner - via_w).abs() < 1e-9);
    }

    #[test]
    fn pool_and_upsample_are_adjoint_up_to_scale() {
        let x = ramp([1, 2, 4, 4, 4]);
        let g = ramp([1, 2, 2, 2, 2]);
        let lhs = dot(avg_pool2(&x).data(), g.data());
        let rhs = dot(x.data(), avg_pool2_backward(&g, x.shape()).data());
        assert!((lhs - rhs).abs() < 1e-12);
        let up = upsample2(&g);
        let lhs = dot(up.data(), x.data());
        let rhs = dot(g.data(), upsample2_backward(&x).data());
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_stable() {
        assert!((softmax2(0.0, 0.0) - 0.5).abs() < 1e-15);
        assert!(softmax2(-800.0, 800.0) <= 1.0);
        assert!(softmax2(800.0, -800.0) >= 0.0);
    }
}
