//! Dense row-major `f64` tensors and the kernels the network is built from.
//!
//! Every reduction runs in a fixed left-to-right order so results are
//! bitwise reproducible across runs.

use std::fmt;

use crate::error::{FixupError, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(FixupError::dim(format!("zero-sized axis in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(FixupError::dim(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Tensor { shape: vec![rows.len(), cols], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the leading (batch) axis.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of values per leading-axis slice.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(FixupError::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Gathers leading-axis slices in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|v| alpha * v)
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    fn check_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(FixupError::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |acc, (a, b)| acc + a * b))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v * v)
    }

    pub fn norm_l2(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    pub(crate) fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(FixupError::dim(format!("{what} expects a 2-D tensor, got shape {s:?}"))),
        }
    }
}

/// `c = a · b` for row-major `a: [m×k]`, `b: [k×n]`.
///
/// Each `c[i][j]` is accumulated over `k` in ascending order starting from
/// zero, the same order as the textbook triple loop, so results are
/// bitwise identical to it. Tiles of 4×8 outputs stay in registers.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    const TI: usize = 4;
    const TJ: usize = 8;
    let mut c = vec![0.0; m * n];
    let mut i0 = 0;
    while i0 + TI <= m {
        let mut j0 = 0;
        while j0 + TJ <= n {
            let mut acc = [[0.0f64; TJ]; TI];
            for kk in 0..k {
                let brow: &[f64; TJ] = b[kk * n + j0..kk * n + j0 + TJ].try_into().unwrap();
                for (r, accr) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + kk];
                    for (cv, bv) in accr.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + TJ].copy_from_slice(accr);
            }
            j0 += TJ;
        }
        if j0 < n {
            gemm_edge(a, b, &mut c, i0..i0 + TI, j0..n, k, n);
        }
        i0 += TI;
    }
    if i0 < m {
        gemm_edge(a, b, &mut c, i0..m, 0..n, k, n);
    }
    c
}

fn gemm_edge(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
) {
    for i in rows {
        let crow = &mut c[i * n + cols.start..i * n + cols.end];
        for kk in 0..k {
            let aik = a[i * k + kk];
            for (cv, &bv) in crow.iter_mut().zip(&b[kk * n + cols.start..kk * n + cols.end]) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c = a · b` for `a: [M×K]`, `b: [K×N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul lhs")?;
    let (k2, n) = b.dims2("matmul rhs")?;
    if k != k2 {
        return Err(FixupError::dim(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    Ok(Tensor { shape: vec![m, n], data: gemm(&a.data, &b.data, m, k, n) })
}

/// `c = a · bᵀ` for `a: [M×K]`, `b: [N×K]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul_nt lhs")?;
    let (n, k2) = b.dims2("matmul_nt rhs")?;
    if k != k2 {
        return Err(FixupError::dim(format!(
            "matmul_nt inner dimensions disagree: {:?} x {:?}ᵀ",
            a.shape, b.shape
        )));
    }
    let bt = b.transpose2d()?;
    Ok(Tensor { shape: vec![m, n], data: gemm(&a.data, &bt.data, m, k, n) })
}

/// `c = aᵀ · b` for `a: [K×M]`, `b: [K×N]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2("matmul_tn lhs")?;
    let (k2, n) = b.dims2("matmul_tn rhs")?;
    if k != k2 {
        return Err(FixupError::dim(format!(
            "matmul_tn inner dimensions disagree: {:?}ᵀ x {:?}",
            a.shape, b.shape
        )));
    }
    let at = a.transpose2d()?;
    Ok(Tensor { shape: vec![m, n], data: gemm(&at.data, &b.data, m, k, n) })
}

/// Output spatial size of a convolution, or an error when the kernel does
/// not fit inside the padded input.
pub fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(FixupError::pre("convolution stride must be at least 1"));
    }
    if k > size + 2 * pad {
        return Err(FixupError::dim(format!(
            "kernel size {k} larger than padded input {}",
            size + 2 * pad
        )));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

fn conv_geom(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (n, c, h, w) = match input.shape.as_slice() {
        &[n, c, h, w] => (n, c, h, w),
        s => return Err(FixupError::dim(format!("conv2d input must be N×C×H×W, got {s:?}"))),
    };
    let (f, kc, kh, kw) = match kernel.shape.as_slice() {
        &[f, kc, kh, kw] => (f, kc, kh, kw),
        s => return Err(FixupError::dim(format!("conv2d kernel must be F×C×k×k, got {s:?}"))),
    };
    if kc != c || kh != kw {
        return Err(FixupError::dim(format!(
            "conv2d kernel {:?} incompatible with input {:?}",
            kernel.shape, input.shape
        )));
    }
    let ho = conv_out_size(h, kh, stride, pad)?;
    let wo = conv_out_size(w, kw, stride, pad)?;
    Ok(ConvGeom { n, c, h, w, f, k: kh, ho, wo, stride, pad })
}

/// Unrolls one sample into a `[C·k·k × H'·W']` patch matrix.
fn im2col(sample: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            sample[(ci * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, sample: &mut [f64]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        sample[(ci * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geom(input, kernel, stride, pad)?;
    let ckk = g.c * g.k * g.k;
    let hw = g.ho * g.wo;
    let kmat = Tensor { shape: vec![g.f, ckk], data: kernel.data.clone() };
    let in_len = g.c * g.h * g.w;
    let mut out = Vec::with_capacity(g.n * g.f * hw);
    let mut cols = Tensor::zeros(&[ckk, hw]);
    for s in 0..g.n {
        im2col(&input.data[s * in_len..(s + 1) * in_len], &g, &mut cols.data);
        out.extend_from_slice(&matmul(&kmat, &cols)?.data);
    }
    Ok(Tensor { shape: vec![g.n, g.f, g.ho, g.wo], data: out })
}

/// Gradients of `conv2d` with respect to its input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let g = conv_geom(input, kernel, stride, pad)?;
    let ckk = g.c * g.k * g.k;
    let hw = g.ho * g.wo;
    if grad_out.shape != [g.n, g.f, g.ho, g.wo] {
        return Err(FixupError::dim(format!(
            "conv2d output gradient shape {:?} does not match forward output",
            grad_out.shape
        )));
    }
    let kmat = Tensor { shape: vec![g.f, ckk], data: kernel.data.clone() };
    let in_len = g.c * g.h * g.w;
    let mut dinput = vec![0.0; input.len()];
    let mut dk = Tensor::zeros(&[g.f, ckk]);
    let mut cols = Tensor::zeros(&[ckk, hw]);
    for s in 0..g.n {
        im2col(&input.data[s * in_len..(s + 1) * in_len], &g, &mut cols.data);
        let dout = Tensor {
            shape: vec![g.f, hw],
            data: grad_out.data[s * g.f * hw..(s + 1) * g.f * hw].to_vec(),
        };
        let dk_s = matmul_nt(&dout, &cols)?;
        dk.axpy(1.0, &dk_s)?;
        let dcols = matmul_tn(&kmat, &dout)?;
        col2im(&dcols.data, &g, &mut dinput[s * in_len..(s + 1) * in_len]);
    }
    Ok((
        Tensor { shape: input.shape.clone(), data: dinput },
        Tensor { shape: kernel.shape.clone(), data: dk.data },
    ))
}

/// Elementwise `max(x, 0)` together with the mask `1[x > 0]`.
///
/// The mask is exactly zero at `x == 0`, so the backward pass uses a zero
/// subgradient there.
pub fn relu(x: &Tensor) -> (Tensor, Tensor) {
    let out = x.map(|v| if v > 0.0 { v } else { 0.0 });
    let mask = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    (out, mask)
}

/// Sum over coordinates of the unbiased batch variance, where the leading
/// axis indexes examples.
pub fn variance_sum(batch: &Tensor) -> Result<f64> {
    let n = batch.rows();
    if n < 2 {
        return Err(FixupError::pre("variance_sum needs a batch of at least 2"));
    }
    let d = batch.row_len();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(batch.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut ss = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in ss.iter_mut().zip(batch.row(i)).zip(&mean) {
            let dv = v - m;
            *s += dv * dv;
        }
    }
    Ok(ss.iter().fold(0.0, |acc, s| acc + s / (n - 1) as f64))
}
