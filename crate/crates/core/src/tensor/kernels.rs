//! Raw numeric kernels behind the tape ops. Everything here works on flat
//! row-major slices; shape checking happens in the tape layer.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * k + j] += dot;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for kk in 0..k {
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a[kk * m + i];
            if aki == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aki * bv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image `[C,H,W]` into a `[C·kh·kw, H'·W']` patch matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.cols();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    let d = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        d.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, dv) in d.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        *dv = if ix < 0 || ix >= g.w as isize {
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

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im_acc(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.cols();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    n: usize,
    k: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let (q, p) = (g.rows(), g.cols());
    let in_stride = g.c * g.h * g.w;
    let mut out = vec![0.0; n * k * p];
    let mut cols = vec![0.0; q * p];
    for b in 0..n {
        im2col(&x[b * in_stride..(b + 1) * in_stride], g, &mut cols);
        let o = &mut out[b * k * p..(b + 1) * k * p];
        for (kk, row) in o.chunks_mut(p).enumerate() {
            row.fill(bias[kk]);
        }
        matmul_acc(weight, &cols, o, k, q, p);
    }
    out
}

/// Accumulates conv2d gradients for input, weight and bias.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    n: usize,
    k: usize,
    g: &ConvGeom,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (q, p) = (g.rows(), g.cols());
    let in_stride = g.c * g.h * g.w;
    let mut cols = vec![0.0; q * p];
    let mut dcols = vec![0.0; q * p];
    let mut dx = dx;
    let mut dw = dw;
    if let Some(db) = db {
        for b in 0..n {
            for (kk, row) in dout[b * k * p..(b + 1) * k * p].chunks(p).enumerate() {
                db[kk] += row.iter().sum::<f64>();
            }
        }
    }
    for b in 0..n {
        let d = &dout[b * k * p..(b + 1) * k * p];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[b * in_stride..(b + 1) * in_stride], g, &mut cols);
            matmul_bt_acc(d, &cols, dw, k, p, q);
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcols.fill(0.0);
            matmul_at_acc(weight, d, &mut dcols, k, q, p);
            col2im_acc(&dcols, g, &mut dx[b * in_stride..(b + 1) * in_stride]);
        }
    }
}

/// Mean pooling over non-overlapping `size×size` windows of `[planes,H,W]`.
pub(crate) fn avgpool_forward(x: &[f64], planes: usize, h: usize, w: usize, size: usize) -> Vec<f64> {
    let (oh, ow) = (h / size, w / size);
    let inv = 1.0 / (size * size) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for i in 0..size {
                    let row = &src[(oy * size + i) * w + ox * size..][..size];
                    acc += row.iter().sum::<f64>();
                }
                out[(pl * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    out
}

pub(crate) fn avgpool_backward_acc(
    dout: &[f64],
    dx: &mut [f64],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) {
    let (oh, ow) = (h / size, w / size);
    let inv = 1.0 / (size * size) as f64;
    for pl in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dout[(pl * oh + oy) * ow + ox] * inv;
                for i in 0..size {
                    let base = pl * h * w + (oy * size + i) * w + ox * size;
                    for v in &mut dx[base..base + size] {
                        *v += g;
                    }
                }
            }
        }
    }
}
