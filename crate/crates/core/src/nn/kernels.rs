//! Numeric kernels shared by the plain forward pass and the gradient tape.
//!
//! Layouts: dense weights are `[out, in]`; images are `[N, C, H, W]`;
//! conv weights are `[out_ch, in_ch, k, k]`.

pub(crate) fn dense_forward(
    x: &[f64],
    n: usize,
    fan_in: usize,
    w: &[f64],
    b: &[f64],
    fan_out: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; n * fan_out];
    for s in 0..n {
        let xs = &x[s * fan_in..(s + 1) * fan_in];
        let ys = &mut y[s * fan_out..(s + 1) * fan_out];
        for (o, yo) in ys.iter_mut().enumerate() {
            let wo = &w[o * fan_in..(o + 1) * fan_in];
            let mut acc = 0.0;
            for (a, c) in xs.iter().zip(wo) {
                acc += a * c;
            }
            *yo = acc + b[o];
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
pub(crate) fn dense_backward(
    dy: &[f64],
    x: &[f64],
    n: usize,
    fan_in: usize,
    w: &[f64],
    fan_out: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; n * fan_in];
    let mut dw = vec![0.0; fan_out * fan_in];
    let mut db = vec![0.0; fan_out];
    for s in 0..n {
        let xs = &x[s * fan_in..(s + 1) * fan_in];
        let dys = &dy[s * fan_out..(s + 1) * fan_out];
        let dxs = &mut dx[s * fan_in..(s + 1) * fan_in];
        for (o, &g) in dys.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wo = &w[o * fan_in..(o + 1) * fan_in];
            let dwo = &mut dw[o * fan_in..(o + 1) * fan_in];
            for i in 0..fan_in {
                dwo[i] += g * xs[i];
                dxs[i] += g * wo[i];
            }
        }
    }
    (dx, dw, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

pub(crate) fn conv2d_forward(x: &[f64], wt: &[f64], b: &[f64], g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let mut y = vec![0.0; g.n * g.c_out * ho * wo];
    for s in 0..g.n {
        for o in 0..g.c_out {
            let out_base = ((s * g.c_out) + o) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for c in 0..g.c_in {
                        let x_base = ((s * g.c_in) + c) * g.h * g.w;
                        let w_base = ((o * g.c_in) + c) * g.k * g.k;
                        for ky in 0..g.k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.k {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                acc += x[x_base + iy as usize * g.w + ix as usize]
                                    * wt[w_base + ky * g.k + kx];
                            }
                        }
                    }
                    y[out_base + oy * wo + ox] = acc;
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv2d_backward(
    dy: &[f64],
    x: &[f64],
    wt: &[f64],
    g: ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = g.out_hw();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; wt.len()];
    let mut db = vec![0.0; g.c_out];
    for s in 0..g.n {
        for o in 0..g.c_out {
            let out_base = ((s * g.c_out) + o) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let grad = dy[out_base + oy * wo + ox];
                    if grad == 0.0 {
                        continue;
                    }
                    db[o] += grad;
                    for c in 0..g.c_in {
                        let x_base = ((s * g.c_in) + c) * g.h * g.w;
                        let w_base = ((o * g.c_in) + c) * g.k * g.k;
                        for ky in 0..g.k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.k {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let xi = x_base + iy as usize * g.w + ix as usize;
                                let wi = w_base + ky * g.k + kx;
                                dw[wi] += grad * x[xi];
                                dx[xi] += grad * wt[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Non-overlapping max pooling (window == stride). Returns outputs and, for
/// each output, the flat input index that won.
pub(crate) fn maxpool_forward(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    size: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / size, w / size);
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_i = base + oy * size * w + ox * size;
                let mut best = x[best_i];
                for ky in 0..size {
                    for kx in 0..size {
                        let i = base + (oy * size + ky) * w + ox * size + kx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                y.push(best);
                arg.push(best_i);
            }
        }
    }
    (y, arg)
}

/// Row-wise softmax over `rows` blocks of width `width`.
pub(crate) fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xs, ys) in x.chunks(width).zip(y.chunks_mut(width)) {
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (yi, &xi) in ys.iter_mut().zip(xs) {
            *yi = (xi - m).exp();
            z += *yi;
        }
        for yi in ys.iter_mut() {
            *yi /= z;
        }
    }
    y
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
