//! Slice-level kernels shared by the tape operations and by the image
//! pipelines that do not need differentiation.

use crate::numeric::Scalar;

/// Strided view of a matrix operand: `(row stride, column stride)`.
pub type Strides = (usize, usize);

/// Strides of a contiguous row-major matrix with `cols` columns.
pub fn row_major(cols: usize) -> Strides {
    (cols, 1)
}

/// Strides reading a contiguous row-major matrix with `cols` columns as its transpose.
pub fn transposed(cols: usize) -> Strides {
    (1, cols)
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]`; `c` is contiguous row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    sa: Strides,
    b: &[F],
    sb: Strides,
    beta: F,
    c: &mut [F],
) {
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(
        (m - 1) * sa.0 + (k - 1) * sa.1 < a.len(),
        "gemm: lhs out of bounds"
    );
    assert!(
        (k - 1) * sb.0 + (n - 1) * sb.1 < b.len(),
        "gemm: rhs out of bounds"
    );
    // SAFETY: every address touched is bounds-checked above; `c` is a
    // distinct mutable borrow so it cannot alias `a` or `b`.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Geometry of a strided 2-D correlation over a `(channels, h, w)` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn valid(&self) -> bool {
        self.kernel >= 1
            && self.stride >= 1
            && self.height + 2 * self.padding >= self.kernel
            && self.width + 2 * self.padding >= self.kernel
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfold `image` into a `(c·k·k, oh·ow)` patch matrix.
pub fn im2col<F: Scalar>(image: &[F], g: &ConvGeometry) -> Vec<F> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut col = vec![F::zero(); g.col_rows() * oh * ow];
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = (oy * g.stride + ki) as isize - g.padding as isize;
                    if y < 0 || y as usize >= g.height {
                        continue;
                    }
                    let src_row = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..ow {
                        let x = (ox * g.stride + kj) as isize - g.padding as isize;
                        if x >= 0 && (x as usize) < g.width {
                            dst[oy * ow + ox] = src_row[x as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto an image.
pub fn col2im<F: Scalar>(col: &[F], g: &ConvGeometry, image: &mut [F]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = (oy * g.stride + ki) as isize - g.padding as isize;
                    if y < 0 || y as usize >= g.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let x = (ox * g.stride + kj) as isize - g.padding as isize;
                        if x >= 0 && (x as usize) < g.width {
                            plane[y as usize * g.width + x as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Sampling rule used by [`resize_taps`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResizeMode {
    Nearest,
    Bilinear,
    Bicubic,
}

/// Per-output-index source taps `(source index, weight)` along one axis.
///
/// All modes use half-pixel centres: output index `i` samples source
/// coordinate `(i + 0.5)·src/dst − 0.5`. Identical sizes yield a single unit
/// tap per index so the resize is an exact passthrough.
pub fn resize_taps<F: Scalar>(src: usize, dst: usize, mode: ResizeMode) -> Vec<Vec<(usize, F)>> {
    if src == dst {
        return (0..dst).map(|i| vec![(i, F::one())]).collect();
    }
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| match mode {
            ResizeMode::Nearest => {
                let s = (((i as f64) + 0.5) * scale).floor() as usize;
                vec![(s.min(src - 1), F::one())]
            }
            ResizeMode::Bilinear => {
                let s = (((i as f64) + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                let t = s - i0 as f64;
                if i0 == i1 {
                    vec![(i0, F::one())]
                } else {
                    vec![(i0, F::lit(1.0 - t)), (i1, F::lit(t))]
                }
            }
            ResizeMode::Bicubic => {
                let s = ((i as f64) + 0.5) * scale - 0.5;
                let base = s.floor();
                let t = s - base;
                let w = cubic_weights(t);
                let mut taps: Vec<(usize, F)> = Vec::with_capacity(4);
                for (j, wj) in w.iter().enumerate() {
                    let idx = (base as isize + j as isize - 1).clamp(0, src as isize - 1) as usize;
                    match taps.iter_mut().find(|(s, _)| *s == idx) {
                        Some(tap) => tap.1 += F::lit(*wj),
                        None => taps.push((idx, F::lit(*wj))),
                    }
                }
                taps
            }
        })
        .collect()
}

// Keys cubic convolution with a = -0.75.
fn cubic_weights(t: f64) -> [f64; 4] {
    const A: f64 = -0.75;
    let near = |x: f64| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Resample every `(h, w)` plane of a `(channels, h, w)` buffer.
pub fn resize_planes<F: Scalar>(
    input: &[F],
    channels: usize,
    (h, w): (usize, usize),
    rows: &[Vec<(usize, F)>],
    cols: &[Vec<(usize, F)>],
) -> Vec<F> {
    let (th, tw) = (rows.len(), cols.len());
    let mut out = vec![F::zero(); channels * th * tw];
    let mut tmp = vec![F::zero(); h * tw];
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for (j, taps) in cols.iter().enumerate() {
                tmp[y * tw + j] = taps
                    .iter()
                    .fold(F::zero(), |acc, &(s, wt)| acc + wt * plane[y * w + s]);
            }
        }
        let dst = &mut out[c * th * tw..(c + 1) * th * tw];
        for (i, taps) in rows.iter().enumerate() {
            for j in 0..tw {
                dst[i * tw + j] = taps
                    .iter()
                    .fold(F::zero(), |acc, &(s, wt)| acc + wt * tmp[s * tw + j]);
            }
        }
    }
    out
}

/// Adjoint of [`resize_planes`]; accumulates into `grad_in`.
pub fn resize_planes_adjoint<F: Scalar>(
    grad_out: &[F],
    channels: usize,
    (h, w): (usize, usize),
    rows: &[Vec<(usize, F)>],
    cols: &[Vec<(usize, F)>],
    grad_in: &mut [F],
) {
    let (th, tw) = (rows.len(), cols.len());
    let mut tmp = vec![F::zero(); h * tw];
    for c in 0..channels {
        tmp.iter_mut().for_each(|v| *v = F::zero());
        let g = &grad_out[c * th * tw..(c + 1) * th * tw];
        for (i, taps) in rows.iter().enumerate() {
            for &(s, wt) in taps {
                for j in 0..tw {
                    tmp[s * tw + j] += wt * g[i * tw + j];
                }
            }
        }
        let dst = &mut grad_in[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for (j, taps) in cols.iter().enumerate() {
                let v = tmp[y * tw + j];
                for &(s, wt) in taps {
                    dst[y * w + s] += wt * v;
                }
            }
        }
    }
}

/// Exact GELU `x·Φ(x)`.
pub fn gelu<F: Scalar>(x: F) -> F {
    let half = F::lit(0.5);
    half * x * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Derivative of [`gelu`]: `Φ(x) + x·φ(x)`.
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::lit(0.5);
    let cdf = half * (F::one() + (x * F::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * F::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}
