//! Plane-level loops shared by the spatial operations.
//!
//! Every routine walks its loops in a fixed order so that results are
//! reproducible bit for bit. Planes are `h * w` row-major slices and all
//! spatial ops use stride 1 with `kernel / 2` zero padding.

/// Valid output range along one axis for an offset `d` into a plane of `len`.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 {
        len.saturating_sub(d as usize)
    } else {
        len
    };
    (lo.min(hi), hi)
}

/// `out[y, x] += weight * inp[y + dy, x + dx]` over the in-bounds window.
#[inline]
pub(crate) fn shift_acc(
    out: &mut [f64],
    inp: &[f64],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    weight: f64,
) {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx = (x0 as isize + dx) as usize;
        let o = &mut out[y * w + x0..y * w + x1];
        let i = &inp[sy * w + sx..sy * w + sx + (x1 - x0)];
        for (a, b) in o.iter_mut().zip(i) {
            *a += weight * b;
        }
    }
}

/// Adjoint of [`shift_acc`]: `gin[y + dy, x + dx] += weight * gout[y, x]`.
#[inline]
pub(crate) fn shift_acc_adjoint(
    gin: &mut [f64],
    gout: &[f64],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    weight: f64,
) {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx = (x0 as isize + dx) as usize;
        let g = &gout[y * w + x0..y * w + x1];
        let i = &mut gin[sy * w + sx..sy * w + sx + (x1 - x0)];
        for (a, b) in i.iter_mut().zip(g) {
            *a += weight * b;
        }
    }
}

/// `sum over window of gout[y, x] * inp[y + dy, x + dx]`
#[inline]
pub(crate) fn shift_dot(
    gout: &[f64],
    inp: &[f64],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
) -> f64 {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    let mut acc = 0.0;
    if x0 >= x1 {
        return acc;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let sx = (x0 as isize + dx) as usize;
        let g = &gout[y * w + x0..y * w + x1];
        let i = &inp[sy * w + sx..sy * w + sx + (x1 - x0)];
        for (a, b) in g.iter().zip(i) {
            acc += a * b;
        }
    }
    acc
}

pub(crate) struct Geometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Dense convolution `[n, cin, h, w] -> [n, cout, h, w]`.
pub(crate) fn conv_forward(
    g: &Geometry,
    input: &[f64],
    cin: usize,
    cout: usize,
    k: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let hw = g.plane();
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; g.batch * cout * hw];
    for b in 0..g.batch {
        for co in 0..cout {
            let plane = &mut out[(b * cout + co) * hw..(b * cout + co + 1) * hw];
            plane.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..cin {
                let inp = &input[(b * cin + ci) * hw..(b * cin + ci + 1) * hw];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[((co * cin + ci) * k + ky) * k + kx];
                        shift_acc(
                            plane,
                            inp,
                            g.height,
                            g.width,
                            ky as isize - pad,
                            kx as isize - pad,
                            wv,
                        );
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ParamGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    g: &Geometry,
    input: &[f64],
    grad_out: &[f64],
    cin: usize,
    cout: usize,
    k: usize,
    weight: &[f64],
    want_params: bool,
) -> (Vec<f64>, Option<ParamGrads>) {
    let hw = g.plane();
    let pad = (k / 2) as isize;
    let mut grad_in = vec![0.0; g.batch * cin * hw];
    let mut gw = vec![0.0; if want_params { cout * cin * k * k } else { 0 }];
    let mut gb = vec![0.0; if want_params { cout } else { 0 }];
    for b in 0..g.batch {
        for co in 0..cout {
            let gout = &grad_out[(b * cout + co) * hw..(b * cout + co + 1) * hw];
            if want_params {
                gb[co] += gout.iter().sum::<f64>();
            }
            for ci in 0..cin {
                let base = (b * cin + ci) * hw;
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((co * cin + ci) * k + ky) * k + kx;
                        let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                        shift_acc_adjoint(
                            &mut grad_in[base..base + hw],
                            gout,
                            g.height,
                            g.width,
                            dy,
                            dx,
                            weight[widx],
                        );
                        if want_params {
                            gw[widx] +=
                                shift_dot(gout, &input[base..base + hw], g.height, g.width, dy, dx);
                        }
                    }
                }
            }
        }
    }
    let params = want_params.then_some(ParamGrads {
        weight: gw,
        bias: gb,
    });
    (grad_in, params)
}

/// Per-channel convolution; `bias` may be empty.
pub(crate) fn depthwise_forward(
    g: &Geometry,
    input: &[f64],
    channels: usize,
    k: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let hw = g.plane();
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; g.batch * channels * hw];
    for b in 0..g.batch {
        for c in 0..channels {
            let range = (b * channels + c) * hw..(b * channels + c + 1) * hw;
            let plane = &mut out[range.clone()];
            if !bias.is_empty() {
                plane.iter_mut().for_each(|v| *v = bias[c]);
            }
            let inp = &input[range];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[(c * k + ky) * k + kx];
                    shift_acc(
                        plane,
                        inp,
                        g.height,
                        g.width,
                        ky as isize - pad,
                        kx as isize - pad,
                        wv,
                    );
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward(
    g: &Geometry,
    input: &[f64],
    grad_out: &[f64],
    channels: usize,
    k: usize,
    weight: &[f64],
    want_params: bool,
) -> (Vec<f64>, Option<ParamGrads>) {
    let hw = g.plane();
    let pad = (k / 2) as isize;
    let mut grad_in = vec![0.0; grad_out.len()];
    let mut gw = vec![0.0; if want_params { channels * k * k } else { 0 }];
    let mut gb = vec![0.0; if want_params { channels } else { 0 }];
    for b in 0..g.batch {
        for c in 0..channels {
            let range = (b * channels + c) * hw..(b * channels + c + 1) * hw;
            let gout = &grad_out[range.clone()];
            if want_params {
                gb[c] += gout.iter().sum::<f64>();
            }
            for ky in 0..k {
                for kx in 0..k {
                    let widx = (c * k + ky) * k + kx;
                    let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                    shift_acc_adjoint(
                        &mut grad_in[range.clone()],
                        gout,
                        g.height,
                        g.width,
                        dy,
                        dx,
                        weight[widx],
                    );
                    if want_params {
                        gw[widx] +=
                            shift_dot(gout, &input[range.clone()], g.height, g.width, dy, dx);
                    }
                }
            }
        }
    }
    let params = want_params.then_some(ParamGrads {
        weight: gw,
        bias: gb,
    });
    (grad_in, params)
}

/// 1x1 convolution `[n, cin, hw] -> [n, cout, hw]` with weight `[cout, cin]`.
pub(crate) fn pointwise_forward(
    batch: usize,
    hw: usize,
    input: &[f64],
    cin: usize,
    cout: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; batch * cout * hw];
    for b in 0..batch {
        for co in 0..cout {
            let plane = &mut out[(b * cout + co) * hw..(b * cout + co + 1) * hw];
            plane.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..cin {
                let wv = weight[co * cin + ci];
                let inp = &input[(b * cin + ci) * hw..(b * cin + ci + 1) * hw];
                for (o, i) in plane.iter_mut().zip(inp) {
                    *o += wv * i;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pointwise_backward(
    batch: usize,
    hw: usize,
    input: &[f64],
    grad_out: &[f64],
    cin: usize,
    cout: usize,
    weight: &[f64],
    want_params: bool,
) -> (Vec<f64>, Option<ParamGrads>) {
    let mut grad_in = vec![0.0; batch * cin * hw];
    let mut gw = vec![0.0; if want_params { cout * cin } else { 0 }];
    let mut gb = vec![0.0; if want_params { cout } else { 0 }];
    for b in 0..batch {
        for co in 0..cout {
            let gout = &grad_out[(b * cout + co) * hw..(b * cout + co + 1) * hw];
            if want_params {
                gb[co] += gout.iter().sum::<f64>();
            }
            for ci in 0..cin {
                let range = (b * cin + ci) * hw..(b * cin + ci + 1) * hw;
                let wv = weight[co * cin + ci];
                for (gi, go) in grad_in[range.clone()].iter_mut().zip(gout) {
                    *gi += wv * go;
                }
                if want_params {
                    gw[co * cin + ci] += gout
                        .iter()
                        .zip(&input[range])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
            }
        }
    }
    let params = want_params.then_some(ParamGrads {
        weight: gw,
        bias: gb,
    });
    (grad_in, params)
}
