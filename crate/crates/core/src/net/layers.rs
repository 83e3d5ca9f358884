//! Per-sample kernels: 3x3 convolution (padding 1), ReLU, 2x2 average pooling.
//!
//! Planes are row-major; every kernel loops in a fixed order so results are
//! reproducible bit for bit.

/// Output side length of a 3x3, padding-1 convolution.
pub(crate) fn conv_out(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

/// Range of output indices `o` for which `o * stride + k - 1` lies in `0..len`.
fn valid_range(k: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if k == 0 { 1usize.div_ceil(stride) } else { 0 };
    // one past the largest o with o * stride + k - 1 <= len - 1
    let hi = if len < k {
        0
    } else {
        ((len - k) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

pub(crate) struct ConvShape {
    pub in_c: usize,
    pub out_c: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        conv_out(self.h, self.stride)
    }

    pub fn out_w(&self) -> usize {
        conv_out(self.w, self.stride)
    }
}

pub(crate) fn conv_forward(
    s: &ConvShape,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let (h, w, st) = (s.h, s.w, s.stride);
    for co in 0..s.out_c {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.fill(bias[co]);
        for ci in 0..s.in_c {
            let inp = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                let (ylo, yhi) = valid_range(ky, st, h, oh);
                for kx in 0..3 {
                    let wv = weight[((co * s.in_c + ci) * 3 + ky) * 3 + kx];
                    let (xlo, xhi) = valid_range(kx, st, w, ow);
                    for oy in ylo..yhi {
                        let iy = oy * st + ky - 1;
                        let row_in = &inp[iy * w..(iy + 1) * w];
                        let row_out = &mut plane[oy * ow..(oy + 1) * ow];
                        if st == 1 {
                            let ix0 = xlo + kx - 1;
                            for (o, i) in row_out[xlo..xhi]
                                .iter_mut()
                                .zip(&row_in[ix0..ix0 + (xhi - xlo)])
                            {
                                *o += wv * i;
                            }
                        } else {
                            for ox in xlo..xhi {
                                row_out[ox] += wv * row_in[ox * st + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients and, when `grad_in` is given, the
/// input gradient.
pub(crate) fn conv_backward(
    s: &ConvShape,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let (h, w, st) = (s.h, s.w, s.stride);
    for co in 0..s.out_c {
        let g = &grad_out[co * oh * ow..(co + 1) * oh * ow];
        grad_b[co] += g.iter().sum::<f64>();
        for ci in 0..s.in_c {
            let inp = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                let (ylo, yhi) = valid_range(ky, st, h, oh);
                for kx in 0..3 {
                    let widx = ((co * s.in_c + ci) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let (xlo, xhi) = valid_range(kx, st, w, ow);
                    let mut acc = 0.0;
                    for oy in ylo..yhi {
                        let iy = oy * st + ky - 1;
                        let grow = &g[oy * ow..(oy + 1) * ow];
                        for ox in xlo..xhi {
                            let ix = ox * st + kx - 1;
                            acc += inp[iy * w + ix] * grow[ox];
                        }
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let gi = &mut gi[ci * h * w..(ci + 1) * h * w];
                            for ox in xlo..xhi {
                                gi[iy * w + ox * st + kx - 1] += wv * grow[ox];
                            }
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
}

pub(crate) fn relu_in_place(values: &mut [f64]) {
    for v in values {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub(crate) fn avg_pool_forward(
    channels: usize,
    h: usize,
    w: usize,
    input: &[f64],
    out: &mut [f64],
) {
    let (oh, ow) = (h / 2, w / 2);
    for c in 0..channels {
        let inp = &input[c * h * w..(c + 1) * h * w];
        let o = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * w + 2 * x;
                o[y * ow + x] = 0.25 * (inp[i] + inp[i + 1] + inp[i + w] + inp[i + w + 1]);
            }
        }
    }
}

pub(crate) fn avg_pool_backward(
    channels: usize,
    h: usize,
    w: usize,
    grad_out: &[f64],
    grad_in: &mut [f64],
) {
    let (oh, ow) = (h / 2, w / 2);
    for c in 0..channels {
        let g = &grad_out[c * oh * ow..(c + 1) * oh * ow];
        let gi = &mut grad_in[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let v = 0.25 * g[y * ow + x];
                let i = 2 * y * w + 2 * x;
                gi[i] += v;
                gi[i + 1] += v;
                gi[i + w] += v;
                gi[i + w + 1] += v;
            }
        }
    }
}
