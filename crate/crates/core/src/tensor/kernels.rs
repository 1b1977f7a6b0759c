//! Raw forward/backward kernels over flat row-major buffers.

use super::gemm::gemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn out_extent(size: usize, k: usize, stride: usize, dilation: usize, padding: usize) -> Option<usize> {
        let span = dilation * (k - 1) + 1;
        let padded = size + 2 * padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols_len(&self) -> usize {
        self.cols_rows() * self.ho * self.wo
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    batch: usize,
    c_out: usize,
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let in_len = g.c_in * g.h * g.w;
    let hw_out = g.ho * g.wo;
    let out_len = c_out * hw_out;
    let mut out = vec![0.0; batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.cols_len()]
    };
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let on = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = bias {
            for (o, plane) in on.chunks_mut(hw_out).enumerate() {
                plane.fill(b[o]);
            }
        }
        let cols_ref: &[f64] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        gemm(c_out, g.cols_rows(), hw_out, weight, false, cols_ref, false, 1.0, on);
    }
    out
}

/// Accumulates into whichever of `dx`, `dw`, `db` are present.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    c_out: usize,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let in_len = g.c_in * g.h * g.w;
    let hw_out = g.ho * g.wo;
    let out_len = c_out * hw_out;
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; g.cols_len()] };
    let mut dcols = if pointwise { Vec::new() } else { vec![0.0; g.cols_len()] };
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let don = &dout[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            for (o, plane) in don.chunks(hw_out).enumerate() {
                db[o] += plane.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let cols_ref: &[f64] = if pointwise {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            gemm(c_out, hw_out, g.cols_rows(), don, false, cols_ref, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if pointwise {
                gemm(g.cols_rows(), c_out, hw_out, weight, true, don, false, 1.0, dxn);
            } else {
                gemm(g.cols_rows(), c_out, hw_out, weight, true, don, false, 0.0, &mut dcols);
                col2im(g, &dcols, dxn);
            }
        }
    }
}

/// Returns the pooled values and, per output cell, the flat input index of the
/// window maximum (first in row-major order on ties).
pub(crate) fn maxpool_forward(
    shape: [usize; 4],
    x: &[f64],
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> (Vec<f64>, Vec<usize>) {
    let [n, c, h, w] = shape;
    let mut out = vec![0.0; n * c * ho * wo];
    let mut arg = vec![0usize; out.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    (out, arg)
}

/// Feature value at continuous feature-plane coordinates, cell `(i, j)`
/// centred at `(i + 0.5, j + 0.5)`. Samples more than one cell outside the
/// plane contribute zero; otherwise the coordinate is clamped to the border.
/// Returns up to four `(flat index, weight)` taps.
pub(crate) fn bilinear_taps(h: usize, w: usize, y: f64, x: f64) -> Vec<(usize, f64)> {
    let y = y - 0.5;
    let x = x - 0.5;
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return Vec::new();
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    let mut taps = Vec::with_capacity(4);
    for (yy, wy) in [(y0, 1.0 - ly), (y1, ly)] {
        for (xx, wx) in [(x0, 1.0 - lx), (x1, lx)] {
            let wt = wy * wx;
            if wt != 0.0 {
                taps.push((yy * w + xx, wt));
            }
        }
    }
    taps
}
