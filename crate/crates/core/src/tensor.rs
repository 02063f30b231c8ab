//! Dense kernel and feature-map types, the direct convolution, and the two
//! kernel matricizations used by the SVD methods.
//!
//! Layouts (all row-major):
//! - kernel `(t, s, k, k)`: output channel, input channel, first spatial
//!   axis (`x`), second spatial axis (`y`);
//! - feature map `(channels, h, w)` where `h` runs along `x` and `w` along `y`.
//!
//! Convolution uses stride 1 and zero padding of half-width `δ = (k−1)/2`
//! so that the output keeps the input's spatial size.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Convolution kernel `W` with `t` output channels, `s` input channels and
/// an odd `k × k` spatial support.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel4D {
    t: usize,
    s: usize,
    k: usize,
    data: Vec<f64>,
    /// Optional per-output-channel bias, added after the convolution.
    pub bias: Option<Vec<f64>>,
}

impl Kernel4D {
    pub fn new(t: usize, s: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if t == 0 || s == 0 {
            return Err(Error::InvalidKernel(format!("empty channel count t={t}, s={s}")));
        }
        if k == 0 || k % 2 == 0 {
            return Err(Error::InvalidKernel(format!("spatial size must be odd and >= 1, got {k}")));
        }
        if data.len() != t * s * k * k {
            return Err(Error::InvalidKernel(format!(
                "data length {} != t·s·k² = {}",
                data.len(),
                t * s * k * k
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("kernel"));
        }
        Ok(Self {
            t,
            s,
            k,
            data,
            bias: None,
        })
    }

    pub fn from_fn(
        t: usize,
        s: usize,
        k: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(t * s * k * k);
        for o in 0..t {
            for i in 0..s {
                for x in 0..k {
                    for y in 0..k {
                        data.push(f(o, i, x, y));
                    }
                }
            }
        }
        Self::new(t, s, k, data)
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != self.t {
            return Err(Error::Shape(format!("bias length {} != t = {}", bias.len(), self.t)));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("bias"));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    #[inline]
    pub fn t(&self) -> usize {
        self.t
    }

    #[inline]
    pub fn s(&self) -> usize {
        self.s
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    /// Half-width `(k − 1) / 2`.
    #[inline]
    pub fn delta(&self) -> usize {
        (self.k - 1) / 2
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.t, self.s, self.k)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn index(&self, o: usize, i: usize, x: usize, y: usize) -> usize {
        ((o * self.s + i) * self.k + x) * self.k + y
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, x: usize, y: usize) -> f64 {
        self.data[self.index(o, i, x, y)]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `‖self − other‖_F`; panics on shape mismatch.
    pub fn distance(&self, other: &Kernel4D) -> f64 {
        assert_eq!(self.dims(), other.dims(), "kernel shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Keeps the listed input channels in order.
    pub fn select_inputs(&self, keep: &[usize]) -> Result<Kernel4D> {
        let k = self.k;
        let out = Kernel4D::from_fn(self.t, keep.len(), k, |o, i, x, y| self.get(o, keep[i], x, y))?;
        Ok(Kernel4D { bias: self.bias.clone(), ..out })
    }

    /// Keeps the listed output channels in order (bias follows).
    pub fn select_outputs(&self, keep: &[usize]) -> Result<Kernel4D> {
        let k = self.k;
        let out = Kernel4D::from_fn(keep.len(), self.s, k, |o, i, x, y| self.get(keep[o], i, x, y))?;
        let bias = self.bias.as_ref().map(|b| keep.iter().map(|&o| b[o]).collect());
        Ok(Kernel4D { bias, ..out })
    }
}

/// Feature map `X` of shape `(channels, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty feature map {channels}x{h}x{w}")));
        }
        if data.len() != channels * h * w {
            return Err(Error::Shape(format!(
                "feature map data length {} != {}",
                data.len(),
                channels * h * w
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(Self { channels, h, w, data })
    }

    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        Self {
            channels,
            h,
            w,
            data: vec![0.0; channels * h * w],
        }
    }

    pub fn from_fn(
        channels: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * h * w);
        for c in 0..channels {
            for x in 0..h {
                for y in 0..w {
                    data.push(f(c, x, y));
                }
            }
        }
        Self::new(channels, h, w, data)
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.h + x) * self.w + y]
    }

    /// Zero outside the map.
    #[inline]
    pub fn get_padded(&self, c: usize, x: isize, y: isize) -> f64 {
        if x < 0 || y < 0 || x as usize >= self.h || y as usize >= self.w {
            0.0
        } else {
            self.get(c, x as usize, y as usize)
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `‖self − other‖_F / max(‖other‖_F, tiny)`.
    pub fn relative_error(&self, reference: &FeatureMap) -> f64 {
        assert_eq!(self.data.len(), reference.data.len(), "feature map shape mismatch");
        let diff: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        diff / reference.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    pub(crate) fn add_bias(&mut self, bias: &[f64]) {
        let plane = self.h * self.w;
        for (c, b) in bias.iter().enumerate() {
            self.data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
        }
    }
}

/// Direct convolution `Y(t, x, y) = Σ_s Σ_{x', y'} W(t, s, x'−x+δ, y'−y+δ) X(s, x', y')`
/// with zero padding; adds the kernel bias when present.
pub fn conv_direct(kernel: &Kernel4D, input: &FeatureMap) -> Result<FeatureMap> {
    if input.channels() != kernel.s() {
        return Err(Error::Shape(format!(
            "input has {} channels, kernel expects {}",
            input.channels(),
            kernel.s()
        )));
    }
    if input.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("convolution input"));
    }
    let (t, s, k) = kernel.dims();
    let mut out = conv_rect(kernel.data(), t, s, k, k, input);
    if let Some(b) = &kernel.bias {
        out.add_bias(b);
    }
    Ok(out)
}

/// Convolution with a rectangular `(out, in, kh, kw)` weight block, odd
/// `kh`/`kw`, stride 1 and same-size zero padding. No bias, no validation
/// beyond debug assertions: callers build the weights themselves.
pub(crate) fn conv_rect(
    weights: &[f64],
    out_ch: usize,
    in_ch: usize,
    kh: usize,
    kw: usize,
    input: &FeatureMap,
) -> FeatureMap {
    debug_assert_eq!(weights.len(), out_ch * in_ch * kh * kw);
    debug_assert_eq!(input.channels(), in_ch);
    let (h, w) = (input.h(), input.w());
    let (dh, dw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut out = FeatureMap::zeros(out_ch, h, w);
    let plane = h * w;
    for o in 0..out_ch {
        let dst = &mut out.data[o * plane..(o + 1) * plane];
        for i in 0..in_ch {
            let src = &input.data[i * plane..(i + 1) * plane];
            for a in 0..kh {
                // input row = x + a − dh must lie in [0, h)
                let x_lo = dh.saturating_sub(a);
                let x_hi = (h + dh).saturating_sub(a).min(h);
                for b in 0..kw {
                    let wv = weights[((o * in_ch + i) * kh + a) * kw + b];
                    if wv == 0.0 {
                        continue;
                    }
                    let y_lo = dw.saturating_sub(b);
                    let y_hi = (w + dw).saturating_sub(b).min(w);
                    for x in x_lo..x_hi {
                        let sx = x + a - dh;
                        let drow = &mut dst[x * w..(x + 1) * w];
                        let srow = &src[sx * w..(sx + 1) * w];
                        for y in y_lo..y_hi {
                            drow[y] += wv * srow[y + b - dw];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-channel convolution with a `(channels, kh, kw)` weight block.
pub(crate) fn conv_depthwise(weights: &[f64], kh: usize, kw: usize, input: &FeatureMap) -> FeatureMap {
    let ch = input.channels();
    debug_assert_eq!(weights.len(), ch * kh * kw);
    let (h, w) = (input.h(), input.w());
    let plane = h * w;
    let mut out = FeatureMap::zeros(ch, h, w);
    for c in 0..ch {
        let single = FeatureMap {
            channels: 1,
            h,
            w,
            data: input.data[c * plane..(c + 1) * plane].to_vec(),
        };
        let y = conv_rect(&weights[c * kh * kw..(c + 1) * kh * kw], 1, 1, kh, kw, &single);
        out.data[c * plane..(c + 1) * plane].copy_from_slice(&y.data);
    }
    out
}

/// Weight matricization: `k²s × t`, row index `(x·k + y)·s + i_s`, column
/// index `i_t`.
pub fn matricize_weight(kernel: &Kernel4D) -> Matrix {
    let (t, s, k) = kernel.dims();
    Matrix::from_fn(k * k * s, t, |row, o| {
        let i = row % s;
        let xy = row / s;
        kernel.get(o, i, xy / k, xy % k)
    })
}

/// Inverse of [`matricize_weight`].
pub fn unmatricize_weight(m: &Matrix, t: usize, s: usize, k: usize) -> Result<Kernel4D> {
    if m.shape() != (k * k * s, t) {
        return Err(Error::Shape(format!(
            "weight matrix is {:?}, expected ({}, {t})",
            m.shape(),
            k * k * s
        )));
    }
    Kernel4D::from_fn(t, s, k, |o, i, x, y| m[((x * k + y) * s + i, o)])
}

/// Spatial matricization: `sk × tk`, row index `i_s·k + x`, column index
/// `i_t·k + y`.
pub fn matricize_spatial(kernel: &Kernel4D) -> Matrix {
    let (t, s, k) = kernel.dims();
    Matrix::from_fn(s * k, t * k, |row, col| kernel.get(col / k, row / k, row % k, col % k))
}

/// Inverse of [`matricize_spatial`].
pub fn unmatricize_spatial(m: &Matrix, t: usize, s: usize, k: usize) -> Result<Kernel4D> {
    if m.shape() != (s * k, t * k) {
        return Err(Error::Shape(format!(
            "spatial matrix is {:?}, expected ({}, {})",
            m.shape(),
            s * k,
            t * k
        )));
    }
    Kernel4D::from_fn(t, s, k, |o, i, x, y| m[(i * k + x, o * k + y)])
}
