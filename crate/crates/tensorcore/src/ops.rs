//! Numeric kernels behind the graph ops. All reductions accumulate in f64
//! and round to f32 only at op outputs; gradients stay in f64 buffers until
//! they reach parameter slots.

/// 2-D cross-correlation, stride 1, zero padding `pad = (k - 1) / 2`, so the
/// spatial extent is preserved. `x` is `[c_in, h, w]`, `k` is
/// `[c_out, c_in, ks, ks]`, output is `[c_out, h, w]`.
pub(crate) fn conv2d_forward(
    x: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    k: &[f32],
    c_out: usize,
    ks: usize,
    pad: usize,
) -> Vec<f32> {
    let plane = h * w;
    let mut out = vec![0.0f32; c_out * plane];
    let mut acc = vec![0.0f64; plane];
    for co in 0..c_out {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for ci in 0..c_in {
            let xp = &x[ci * plane..(ci + 1) * plane];
            let kbase = (co * c_in + ci) * ks * ks;
            for u in 0..ks {
                for v in 0..ks {
                    let kval = k[kbase + u * ks + v] as f64;
                    if kval == 0.0 {
                        continue;
                    }
                    // output row i reads input row i + u - pad
                    let i_lo = pad.saturating_sub(u);
                    let i_hi = (h + pad).saturating_sub(u).min(h);
                    let j_lo = pad.saturating_sub(v);
                    let j_hi = (w + pad).saturating_sub(v).min(w);
                    for i in i_lo..i_hi {
                        let a = i + u - pad;
                        let xrow = &xp[a * w..(a + 1) * w];
                        let arow = &mut acc[i * w..(i + 1) * w];
                        for j in j_lo..j_hi {
                            arow[j] += kval * xrow[j + v - pad] as f64;
                        }
                    }
                }
            }
        }
        for (o, a) in out[co * plane..(co + 1) * plane].iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    out
}

/// Accumulates dL/dx for `conv2d_forward` into `gx`.
pub(crate) fn conv2d_backward_input(
    gy: &[f64],
    k: &[f32],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    ks: usize,
    pad: usize,
    gx: &mut [f64],
) {
    let plane = h * w;
    for ci in 0..c_in {
        let gxp = &mut gx[ci * plane..(ci + 1) * plane];
        for co in 0..c_out {
            let gyp = &gy[co * plane..(co + 1) * plane];
            let kbase = (co * c_in + ci) * ks * ks;
            for u in 0..ks {
                for v in 0..ks {
                    let kval = k[kbase + u * ks + v] as f64;
                    if kval == 0.0 {
                        continue;
                    }
                    // dx[a, b] += k[u, v] * gy[a + pad - u, b + pad - v]
                    let a_lo = u.saturating_sub(pad);
                    let a_hi = (h + u).saturating_sub(pad).min(h);
                    let b_lo = v.saturating_sub(pad);
                    let b_hi = (w + v).saturating_sub(pad).min(w);
                    for a in a_lo..a_hi {
                        let i = a + pad - u;
                        let gyrow = &gyp[i * w..(i + 1) * w];
                        let gxrow = &mut gxp[a * w..(a + 1) * w];
                        for b in b_lo..b_hi {
                            gxrow[b] += kval * gyrow[b + pad - v];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates dL/dk for `conv2d_forward` into `gk`.
pub(crate) fn conv2d_backward_kernel(
    gy: &[f64],
    x: &[f32],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    ks: usize,
    pad: usize,
    gk: &mut [f64],
) {
    let plane = h * w;
    for co in 0..c_out {
        let gyp = &gy[co * plane..(co + 1) * plane];
        for ci in 0..c_in {
            let xp = &x[ci * plane..(ci + 1) * plane];
            let kbase = (co * c_in + ci) * ks * ks;
            for u in 0..ks {
                for v in 0..ks {
                    let i_lo = pad.saturating_sub(u);
                    let i_hi = (h + pad).saturating_sub(u).min(h);
                    let j_lo = pad.saturating_sub(v);
                    let j_hi = (w + pad).saturating_sub(v).min(w);
                    let mut acc = 0.0f64;
                    for i in i_lo..i_hi {
                        let a = i + u - pad;
                        let xrow = &xp[a * w..(a + 1) * w];
                        let gyrow = &gyp[i * w..(i + 1) * w];
                        for j in j_lo..j_hi {
                            acc += gyrow[j] * xrow[j + v - pad] as f64;
                        }
                    }
                    gk[kbase + u * ks + v] += acc;
                }
            }
        }
    }
}

/// Per-channel mean and biased variance over the spatial extent.
pub(crate) fn bn_stats(x: &[f32], channels: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0f64; channels];
    let mut var = vec![0.0f64; channels];
    for c in 0..channels {
        let xs = &x[c * n..(c + 1) * n];
        let m: f64 = xs.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let v: f64 = xs.iter().map(|&v| (v as f64 - m) * (v as f64 - m)).sum::<f64>() / n as f64;
        mean[c] = m;
        var[c] = v;
    }
    (mean, var)
}

pub(crate) fn bn_normalize(
    x: &[f32],
    channels: usize,
    n: usize,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    gamma: &[f32],
    beta: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f64>) {
    let mut y = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; x.len()];
    let mut invstd = vec![0.0f64; channels];
    for c in 0..channels {
        let istd = 1.0 / (var[c] + eps).sqrt();
        invstd[c] = istd;
        let (g, b) = (gamma[c] as f64, beta[c] as f64);
        for i in 0..n {
            let idx = c * n + i;
            let xh = (x[idx] as f64 - mean[c]) * istd;
            xhat[idx] = xh as f32;
            y[idx] = (g * xh + b) as f32;
        }
    }
    (y, xhat, invstd)
}

/// Backward through train-mode batch norm, where mean and variance depend on
/// the input batch:
///   dx = invstd / n * (n * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
pub(crate) fn bn_backward_train(
    gy: &[f64],
    xhat: &[f32],
    invstd: &[f64],
    gamma: &[f32],
    channels: usize,
    n: usize,
    gx: &mut [f64],
    ggamma: &mut [f64],
    gbeta: &mut [f64],
) {
    for c in 0..channels {
        let base = c * n;
        let g = gamma[c] as f64;
        let mut sum_dxhat = 0.0f64;
        let mut sum_dxhat_xhat = 0.0f64;
        let mut sum_gy = 0.0f64;
        for i in 0..n {
            let gyi = gy[base + i];
            let dxh = gyi * g;
            sum_gy += gyi;
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat[base + i] as f64;
            ggamma[c] += gyi * xhat[base + i] as f64;
        }
        gbeta[c] += sum_gy;
        let scale = invstd[c] / n as f64;
        for i in 0..n {
            let dxh = gy[base + i] * g;
            gx[base + i] += scale * (n as f64 * dxh - sum_dxhat - xhat[base + i] as f64 * sum_dxhat_xhat);
        }
    }
}

/// Backward through eval-mode batch norm, where the normalization statistics
/// are constants: dx = gy * gamma * invstd.
pub(crate) fn bn_backward_eval(
    gy: &[f64],
    xhat: &[f32],
    invstd: &[f64],
    gamma: &[f32],
    channels: usize,
    n: usize,
    gx: &mut [f64],
    ggamma: &mut [f64],
    gbeta: &mut [f64],
) {
    for c in 0..channels {
        let base = c * n;
        let scale = gamma[c] as f64 * invstd[c];
        for i in 0..n {
            let gyi = gy[base + i];
            gx[base + i] += gyi * scale;
            ggamma[c] += gyi * xhat[base + i] as f64;
            gbeta[c] += gyi;
        }
    }
}
