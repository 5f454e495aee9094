//! Raw numeric kernels behind the tape operations.
//!
//! Everything here is plain safe Rust over flat slices; the loops are ordered
//! so the innermost axis is contiguous and autovectorizes.

/// C[m,n] += A[m,k] · B[k,n] for one 2-D panel.
pub fn matmul_panel(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            if ap == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ap * bv;
            }
        }
    }
}

/// gA[m,k] += G[m,n] · B[k,n]ᵀ (rows of B dotted with rows of G).
pub fn matmul_grad_a(g: &[f32], b: &[f32], ga: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let garow = &mut ga[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0f32;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            garow[p] += acc;
        }
    }
}

/// gB[k,n] += A[m,k]ᵀ · G[m,n].
pub fn matmul_grad_b(a: &[f32], g: &[f32], gb: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            if ap == 0.0 {
                continue;
            }
            let gbrow = &mut gb[p * n..(p + 1) * n];
            for (gbv, &gv) in gbrow.iter_mut().zip(grow) {
                *gbv += ap * gv;
            }
        }
    }
}

/// Output length of a 1-D convolution; `None` when the geometry is invalid.
pub fn conv1d_out_len(l: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = l + 2 * padding;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Cross-correlation over the last axis.
///
/// x: [B, C_in, L], w: [C_out, C_in/groups, K] -> out: [B, C_out, L_out].
#[allow(clippy::too_many_arguments)]
pub fn conv1d_forward(
    x: &[f32],
    w: &[f32],
    out: &mut [f32],
    b: usize,
    c_in: usize,
    l: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    groups: usize,
) {
    let cig = c_in / groups;
    let cog = c_out / groups;
    let l_out = conv1d_out_len(l, k, stride, padding).expect("validated geometry");
    for bi in 0..b {
        for g in 0..groups {
            for co_local in 0..cog {
                let co = g * cog + co_local;
                let orow = &mut out[(bi * c_out + co) * l_out..(bi * c_out + co + 1) * l_out];
                for ci_local in 0..cig {
                    let ci = g * cig + ci_local;
                    let xrow = &x[(bi * c_in + ci) * l..(bi * c_in + ci + 1) * l];
                    let wrow = &w[(co * cig + ci_local) * k..(co * cig + ci_local + 1) * k];
                    for (kk, &wv) in wrow.iter().enumerate() {
                        if wv == 0.0 {
                            continue;
                        }
                        // out[lo] += w * x[lo*stride + kk - padding]
                        accumulate_shifted(orow, xrow, wv, stride, kk as isize - padding as isize);
                    }
                }
            }
        }
    }
}

/// orow[lo] += scale * xrow[lo*stride + shift] for in-bounds positions.
fn accumulate_shifted(orow: &mut [f32], xrow: &[f32], scale: f32, stride: usize, shift: isize) {
    let l = xrow.len() as isize;
    if stride == 1 {
        let lo_start = (-shift).max(0) as usize;
        let lo_end = ((l - shift).max(0) as usize).min(orow.len());
        if lo_start >= lo_end {
            return;
        }
        let xs = (lo_start as isize + shift) as usize;
        let seg = &xrow[xs..xs + (lo_end - lo_start)];
        for (ov, &xv) in orow[lo_start..lo_end].iter_mut().zip(seg) {
            *ov += scale * xv;
        }
    } else {
        for (lo, ov) in orow.iter_mut().enumerate() {
            let xi = lo as isize * stride as isize + shift;
            if xi >= 0 && xi < l {
                *ov += scale * xrow[xi as usize];
            }
        }
    }
}

/// Gradients of conv1d_forward w.r.t. input and weight.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    x: &[f32],
    w: &[f32],
    grad_out: &[f32],
    grad_x: &mut [f32],
    grad_w: &mut [f32],
    b: usize,
    c_in: usize,
    l: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    groups: usize,
) {
    let cig = c_in / groups;
    let cog = c_out / groups;
    let l_out = conv1d_out_len(l, k, stride, padding).expect("validated geometry");
    for bi in 0..b {
        for g in 0..groups {
            for co_local in 0..cog {
                let co = g * cog + co_local;
                let grow = &grad_out[(bi * c_out + co) * l_out..(bi * c_out + co + 1) * l_out];
                for ci_local in 0..cig {
                    let ci = g * cig + ci_local;
                    let xrow = &x[(bi * c_in + ci) * l..(bi * c_in + ci + 1) * l];
                    let gxrow = &mut grad_x[(bi * c_in + ci) * l..(bi * c_in + ci + 1) * l];
                    let wbase = (co * cig + ci_local) * k;
                    for kk in 0..k {
                        let shift = kk as isize - padding as isize;
                        let wv = w[wbase + kk];
                        // grad_x[lo*stride + shift] += w * grad_out[lo]
                        // grad_w[kk] += Σ_lo grad_out[lo] * x[lo*stride + shift]
                        let mut wgrad = 0.0f64;
                        for (lo, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let xi = lo as isize * stride as isize + shift;
                            if xi >= 0 && (xi as usize) < l {
                                let xi = xi as usize;
                                gxrow[xi] += wv * gv;
                                wgrad += (gv * xrow[xi]) as f64;
                            }
                        }
                        grad_w[wbase + kk] += wgrad as f32;
                    }
                }
            }
        }
    }
}

/// Per-channel mean and (biased) variance across all non-channel positions.
///
/// `index(i)` must map a flat element index to its channel.
pub fn channel_stats(
    data: &[f32],
    channels: usize,
    channel_of: impl Fn(usize) -> usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0f64; channels];
    let mut sumsq = vec![0.0f64; channels];
    let mut count = vec![0u64; channels];
    for (i, &v) in data.iter().enumerate() {
        let c = channel_of(i);
        sum[c] += v as f64;
        sumsq[c] += (v as f64) * (v as f64);
        count[c] += 1;
    }
    let mean: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    let var: Vec<f64> = sumsq
        .iter()
        .zip(&count)
        .zip(&mean)
        .map(|((&sq, &n), &m)| {
            if n > 0 {
                (sq / n as f64 - m * m).max(0.0)
            } else {
                0.0
            }
        })
        .collect();
    (mean, var)
}

/// Numerically stable softmax along contiguous rows of length `n`.
pub fn softmax_rows(x: &[f32], out: &mut [f32], n: usize) {
    for (xrow, orow) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = xrow.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for (&xv, ov) in xrow.iter().zip(orow.iter_mut()) {
            let e = (xv - max).exp();
            *ov = e;
            denom += e as f64;
        }
        let inv = (1.0 / denom) as f32;
        for ov in orow.iter_mut() {
            *ov *= inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] · [[5],[6]] = [[17],[39]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0];
        let mut c = [0.0; 2];
        matmul_panel(&a, &b, &mut c, 2, 2, 1);
        assert_eq!(c, [17.0, 39.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = [1.0, 2.0, 3.0];
        let w = [1.0];
        let mut out = [0.0; 3];
        conv1d_forward(&x, &w, &mut out, 1, 1, 3, 1, 1, 1, 0, 1);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_hand_case() {
        // x=[1,2,3,4], w=[1,1], k=2, pad 0 -> [3,5,7]
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [1.0, 1.0];
        let mut out = [0.0; 3];
        conv1d_forward(&x, &w, &mut out, 1, 1, 4, 1, 2, 1, 0, 1);
        assert_eq!(out, [3.0, 5.0, 7.0]);
    }

    #[test]
    fn conv_out_len_rejects_degenerate() {
        assert_eq!(conv1d_out_len(4, 2, 1, 0), Some(3));
        assert_eq!(conv1d_out_len(1, 3, 1, 0), None);
        assert_eq!(conv1d_out_len(4, 2, 0, 0), None);
    }

    #[test]
    fn softmax_rows_stable_and_normalized() {
        let x = [1000.0, 0.0];
        let mut out = [0.0; 2];
        softmax_rows(&x, &mut out, 2);
        assert!(out[0] > 0.999 && out[1] < 1e-6);
        assert!((out[0] + out[1] - 1.0).abs() < 1e-6);
    }
}
