//! Per-sample layer kernels. All loops run in a fixed order so batch
//! results are bit-reproducible.

/// Conv2D forward for one sample. `x` is (c_in, h, w) row-major; the weight
/// is (c_out, c_in, k_h, k_w) row-major. Output is (c_out, oh, ow).
#[allow(clippy::too_many_arguments)]
pub fn conv_forward(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    c_out: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    padding: usize,
    out: &mut Vec<f64>,
) {
    let (xp, hp, wp) = pad_input(x, c_in, h, w, padding);
    let oh = (hp - k_h) / stride + 1;
    let ow = (wp - k_w) / stride + 1;
    out.clear();
    out.resize(c_out * oh * ow, 0.0);
    for co in 0..c_out {
        let w_base = co * c_in * k_h * k_w;
        let b = bias.map_or(0.0, |b| b[co]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ci in 0..c_in {
                    let x_ch = ci * hp * wp;
                    let w_ch = w_base + ci * k_h * k_w;
                    for ky in 0..k_h {
                        let x_row = x_ch + (oy * stride + ky) * wp + ox * stride;
                        let w_row = w_ch + ky * k_w;
                        let xs = &xp[x_row..x_row + k_w];
                        let ws = &weight[w_row..w_row + k_w];
                        for (xv, wv) in xs.iter().zip(ws.iter()) {
                            acc += xv * wv;
                        }
                    }
                }
                out[co * oh * ow + oy * ow + ox] = acc;
            }
        }
    }
}

/// Conv2D backward for one sample: gradients w.r.t. input, weight and bias.
/// Weight/bias gradients accumulate into the provided buffers.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    g_out: &[f64],
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    padding: usize,
    g_x: &mut Vec<f64>,
    g_weight: &mut [f64],
    g_bias: Option<&mut [f64]>,
) {
    let (xp, hp, wp) = pad_input(x, c_in, h, w, padding);
    let oh = (hp - k_h) / stride + 1;
    let ow = (wp - k_w) / stride + 1;
    let mut g_xp = vec![0.0; c_in * hp * wp];
    if let Some(g_bias) = g_bias {
        for co in 0..c_out {
            let mut acc = 0.0;
            for g in &g_out[co * oh * ow..(co + 1) * oh * ow] {
                acc += g;
            }
            g_bias[co] += acc;
        }
    }
    for co in 0..c_out {
        let w_base = co * c_in * k_h * k_w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = g_out[co * oh * ow + oy * ow + ox];
                if g == 0.0 {
                    continue;
                }
                for ci in 0..c_in {
                    let x_ch = ci * hp * wp;
                    let w_ch = w_base + ci * k_h * k_w;
                    for ky in 0..k_h {
                        let x_row = x_ch + (oy * stride + ky) * wp + ox * stride;
                        let w_row = w_ch + ky * k_w;
                        for kx in 0..k_w {
                            g_weight[w_row + kx] += g * xp[x_row + kx];
                            g_xp[x_row + kx] += g * weight[w_row + kx];
                        }
                    }
                }
            }
        }
    }
    // Strip padding from the input gradient.
    g_x.clear();
    g_x.resize(c_in * h * w, 0.0);
    for ci in 0..c_in {
        for y in 0..h {
            let src = ci * hp * wp + (y + padding) * wp + padding;
            let dst = ci * h * w + y * w;
            g_x[dst..dst + w].copy_from_slice(&g_xp[src..src + w]);
        }
    }
}

fn pad_input(x: &[f64], c: usize, h: usize, w: usize, padding: usize) -> (Vec<f64>, usize, usize) {
    if padding == 0 {
        return (x.to_vec(), h, w);
    }
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    let mut xp = vec![0.0; c * hp * wp];
    for ci in 0..c {
        for y in 0..h {
            let src = ci * h * w + y * w;
            let dst = ci * hp * wp + (y + padding) * wp + padding;
            xp[dst..dst + w].copy_from_slice(&x[src..src + w]);
        }
    }
    (xp, hp, wp)
}

pub fn fc_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, d_out: usize, out: &mut Vec<f64>) {
    let d_in = x.len();
    out.clear();
    out.reserve(d_out);
    for j in 0..d_out {
        let mut acc = bias.map_or(0.0, |b| b[j]);
        let row = &weight[j * d_in..(j + 1) * d_in];
        for (xv, wv) in x.iter().zip(row.iter()) {
            acc += xv * wv;
        }
        out.push(acc);
    }
}

pub fn fc_backward(
    g_out: &[f64],
    x: &[f64],
    weight: &[f64],
    g_x: &mut Vec<f64>,
    g_weight: &mut [f64],
    g_bias: Option<&mut [f64]>,
) {
    let d_in = x.len();
    let d_out = g_out.len();
    if let Some(g_bias) = g_bias {
        for (gb, g) in g_bias.iter_mut().zip(g_out.iter()) {
            *gb += g;
        }
    }
    g_x.clear();
    g_x.resize(d_in, 0.0);
    for j in 0..d_out {
        let g = g_out[j];
        let row = &weight[j * d_in..(j + 1) * d_in];
        let g_row = &mut g_weight[j * d_in..(j + 1) * d_in];
        for i in 0..d_in {
            g_row[i] += g * x[i];
            g_x[i] += g * row[i];
        }
    }
}

pub fn relu_forward(x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend(x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }));
}

/// Subgradient at exactly zero is taken as zero.
pub fn relu_backward(g_out: &[f64], x: &[f64], g_x: &mut Vec<f64>) {
    g_x.clear();
    g_x.extend(
        g_out
            .iter()
            .zip(x.iter())
            .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }),
    );
}

/// 2x2 max-pool with stride 2. Ties take the first maximal element in
/// row-major window order, which pins the backward routing. Odd trailing
/// rows/columns are dropped.
pub fn maxpool2_forward(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    out: &mut Vec<f64>,
    argmax: &mut Vec<usize>,
) {
    let oh = h / 2;
    let ow = w / 2;
    out.clear();
    argmax.clear();
    out.reserve(c * oh * ow);
    argmax.reserve(c * oh * ow);
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (oy * 2) * w + ox * 2;
                let mut best = x[best_idx];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = base + (oy * 2 + dy) * w + (ox * 2 + dx);
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
}

pub fn maxpool2_backward(g_out: &[f64], argmax: &[usize], input_len: usize, g_x: &mut Vec<f64>) {
    g_x.clear();
    g_x.resize(input_len, 0.0);
    for (&g, &idx) in g_out.iter().zip(argmax.iter()) {
        g_x[idx] += g;
    }
}

/// Mean-reducible softmax cross-entropy for one sample. Returns the loss and
/// writes d(loss)/d(logits) scaled by `grad_scale`.
pub fn softmax_ce(logits: &[f64], label: usize, grad_scale: f64, g_logits: &mut Vec<f64>) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    g_logits.clear();
    g_logits.reserve(logits.len());
    for &z in logits {
        let e = (z - max).exp();
        sum += e;
        g_logits.push(e);
    }
    let log_sum = sum.ln();
    let loss = log_sum - (logits[label] - max);
    for (k, g) in g_logits.iter_mut().enumerate() {
        let softmax = *g / sum;
        *g = (softmax - if k == label { 1.0 } else { 0.0 }) * grad_scale;
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel_passes_through() {
        // 1x1 kernel with weight 1 reproduces the input.
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut out = Vec::new();
        conv_forward(&x, 1, 3, 3, &[1.0], None, 1, 1, 1, 1, 0, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_known_3x3_valid() {
        // 2x2 input, 2x2 kernel of ones, no padding: single output = sum.
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let mut out = Vec::new();
        conv_forward(&x, 1, 2, 2, &[1.0; 4], Some(&[0.5]), 1, 2, 2, 1, 0, &mut out);
        assert_eq!(out, vec![10.5]);
    }

    #[test]
    fn maxpool_tie_takes_first_in_row_major_order() {
        let x = vec![7.0, 7.0, 7.0, 7.0];
        let mut out = Vec::new();
        let mut argmax = Vec::new();
        maxpool2_forward(&x, 1, 2, 2, &mut out, &mut argmax);
        assert_eq!(out, vec![7.0]);
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let logits = vec![0.0; 4];
        let mut g = Vec::new();
        let loss = softmax_ce(&logits, 2, 1.0, &mut g);
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
        assert!((g[0] - 0.25).abs() < 1e-12);
        assert!((g[2] + 0.75).abs() < 1e-12);
    }

    #[test]
    fn fc_forward_identity() {
        let x = vec![0.0, 0.0, 1.0];
        let weight = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut out = Vec::new();
        fc_forward(&x, &weight, None, 3, &mut out);
        assert_eq!(out, x);
    }
}
