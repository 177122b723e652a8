//! Raw slice kernels behind the tape primitives. All layouts are NCHW, row-major.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad: usize,
    ) -> std::result::Result<Self, String> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(format!(
                "expected 4-d input and kernel, got {input:?} and {kernel:?}"
            ));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c {
            return Err(format!("kernel expects {kc} channels, input has {c}"));
        }
        if kh != kw {
            return Err(format!("only square kernels are supported, got {kh}x{kw}"));
        }
        if stride == 0 {
            return Err("stride must be >= 1".into());
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            k: kh,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.col_cols();
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
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

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.col_cols();
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// out[o, p] = sum_q a[o, q] * b[q, p]  (a: m x q, b: q x p), accumulated into `out`.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, q: usize, p: usize) {
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        let arow = &a[i * q..(i + 1) * q];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (q, p) = (g.col_rows(), g.col_cols());
    let in_img = g.c * g.h * g.w;
    let out_img = g.o * p;
    let mut out = vec![0.0; g.n * out_img];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; q * p] };
    for b in 0..g.n {
        let xi = &x[b * in_img..(b + 1) * in_img];
        let oi = &mut out[b * out_img..(b + 1) * out_img];
        if g.is_pointwise() {
            gemm_acc(kernel, xi, oi, g.o, q, p);
        } else {
            im2col(xi, g, &mut cols);
            gemm_acc(kernel, &cols, oi, g.o, q, p);
        }
    }
    out
}

/// Returns (d input, d kernel).
pub(crate) fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (q, p) = (g.col_rows(), g.col_cols());
    let in_img = g.c * g.h * g.w;
    let out_img = g.o * p;
    let mut dx = want_dx.then(|| vec![0.0; g.n * in_img]);
    let mut dk = want_dk.then(|| vec![0.0; g.o * q]);
    let mut cols = vec![0.0; q * p];
    let mut dcols = vec![0.0; q * p];
    for b in 0..g.n {
        let xi = &x[b * in_img..(b + 1) * in_img];
        let dyi = &dy[b * out_img..(b + 1) * out_img];
        if let Some(dk) = dk.as_mut() {
            let cols_ref: &[f64] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, g, &mut cols);
                &cols
            };
            for oc in 0..g.o {
                let drow = &dyi[oc * p..(oc + 1) * p];
                let krow = &mut dk[oc * q..(oc + 1) * q];
                for (qi, kv) in krow.iter_mut().enumerate() {
                    let crow = &cols_ref[qi * p..(qi + 1) * p];
                    *kv += drow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[b * in_img..(b + 1) * in_img];
            if g.is_pointwise() {
                gemm_t_acc(kernel, dyi, dxi, g.o, q, p);
            } else {
                dcols.fill(0.0);
                gemm_t_acc(kernel, dyi, &mut dcols, g.o, q, p);
                col2im(&dcols, g, dxi);
            }
        }
    }
    (dx, dk)
}

/// out[q, p] += sum_o a[o, q] * b[o, p]  (a: m x q, b: m x p).
fn gemm_t_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, q: usize, p: usize) {
    for o in 0..m {
        let arow = &a[o * q..(o + 1) * q];
        let brow = &b[o * p..(o + 1) * p];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[k * p..(k + 1) * p];
            for (v, &bv) in orow.iter_mut().zip(brow) {
                *v += av * bv;
            }
        }
    }
}

/// Per-channel statistics over N, H, W. Returns (mean, biased variance).
pub(crate) fn channel_stats(x: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for b in 0..n {
            v += x[(b * c + ch) * hw..][..hw]
                .iter()
                .map(|&e| (e - mu) * (e - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// Max pooling without padding. Returns (output, flat argmax index per output).
pub(crate) fn maxpool_forward(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg, oh, ow)
}

pub(crate) fn upsample_nearest(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            let row = &src[(oy / f) * w..(oy / f + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / f]);
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward(
    dy: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    f: usize,
) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut dx = vec![0.0; planes * h * w];
    for pl in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[pl * h * w + (oy / f) * w + ox / f] += dy[pl * oh * ow + oy * ow + ox];
            }
        }
    }
    dx
}
