//! Orthonormal Haar discrete wavelet transform, 1-D and 2-D.
//!
//! Odd-length axes are extended by replicating the final sample before
//! filtering; the original length is kept with the coefficients so the
//! inverse trims exactly. Multi-level transforms recurse on the
//! approximation band only.
//!
//! 2-D naming (separable, rows filtered first, then columns):
//! `cA = LL`, `cH = LH` (low across width, high across height),
//! `cV = HL`, `cD = HH`.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{invalid, mismatch, Result};
use crate::tensor::Tensor;

/// Two-tap analysis/synthesis filter pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaveletFilters {
    pub lowpass: [f64; 2],
    pub highpass: [f64; 2],
}

impl WaveletFilters {
    pub const HAAR: WaveletFilters = WaveletFilters {
        lowpass: [FRAC_1_SQRT_2, FRAC_1_SQRT_2],
        highpass: [FRAC_1_SQRT_2, -FRAC_1_SQRT_2],
    };

    pub fn haar() -> Self {
        Self::HAAR
    }

    /// Haar with the sign of the second high-pass tap flipped. Breaks
    /// orthogonality; used to prove the verification suite can fail.
    pub fn haar_with_flipped_highpass() -> Self {
        let mut f = Self::HAAR;
        f.highpass[1] = -f.highpass[1];
        f
    }

    /// `(⟨L,L⟩, ⟨H,H⟩, ⟨L,H⟩)`.
    pub fn inner_products(&self) -> (f64, f64, f64) {
        let dot = |a: &[f64; 2], b: &[f64; 2]| a[0] * b[0] + a[1] * b[1];
        (
            dot(&self.lowpass, &self.lowpass),
            dot(&self.highpass, &self.highpass),
            dot(&self.lowpass, &self.highpass),
        )
    }
}

impl Default for WaveletFilters {
    fn default() -> Self {
        Self::HAAR
    }
}

/// Number of coefficients per band after one level on a length-`n` axis.
pub fn half_len(n: usize) -> usize {
    n.div_ceil(2)
}

// ---- strided 1-D kernels -------------------------------------------------
//
// `x` has `n` samples at stride `sx`; `a`/`d` have `half_len(n)` samples at
// stride `sc`. Offsets are relative to the slices passed in.

#[allow(clippy::too_many_arguments)]
pub(crate) fn analysis(
    f: &WaveletFilters,
    x: &[f64],
    xo: usize,
    sx: usize,
    n: usize,
    a: &mut [f64],
    d: &mut [f64],
    co: usize,
    sc: usize,
) {
    for k in 0..half_len(n) {
        let x0 = x[xo + 2 * k * sx];
        let x1 = if 2 * k + 1 < n { x[xo + (2 * k + 1) * sx] } else { x0 };
        a[co + k * sc] = f.lowpass[0] * x0 + f.lowpass[1] * x1;
        d[co + k * sc] = f.highpass[0] * x0 + f.highpass[1] * x1;
    }
}

/// Adjoint of [`analysis`], accumulating into `gx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn analysis_adjoint(
    f: &WaveletFilters,
    ga: &[f64],
    gd: &[f64],
    co: usize,
    sc: usize,
    gx: &mut [f64],
    xo: usize,
    sx: usize,
    n: usize,
) {
    for k in 0..half_len(n) {
        let (a, d) = (ga[co + k * sc], gd[co + k * sc]);
        gx[xo + 2 * k * sx] += f.lowpass[0] * a + f.highpass[0] * d;
        let i1 = if 2 * k + 1 < n { 2 * k + 1 } else { 2 * k };
        gx[xo + i1 * sx] += f.lowpass[1] * a + f.highpass[1] * d;
    }
}

/// Inverse of [`analysis`] for orthonormal filters, trimmed to `n` samples.
#[allow(clippy::too_many_arguments)]
pub(crate) fn synthesis(
    f: &WaveletFilters,
    a: &[f64],
    d: &[f64],
    co: usize,
    sc: usize,
    x: &mut [f64],
    xo: usize,
    sx: usize,
    n: usize,
) {
    for k in 0..half_len(n) {
        let (av, dv) = (a[co + k * sc], d[co + k * sc]);
        x[xo + 2 * k * sx] = f.lowpass[0] * av + f.highpass[0] * dv;
        if 2 * k + 1 < n {
            x[xo + (2 * k + 1) * sx] = f.lowpass[1] * av + f.highpass[1] * dv;
        }
    }
}

/// Adjoint of [`synthesis`], accumulating into `ga`/`gd`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn synthesis_adjoint(
    f: &WaveletFilters,
    gx: &[f64],
    xo: usize,
    sx: usize,
    n: usize,
    ga: &mut [f64],
    gd: &mut [f64],
    co: usize,
    sc: usize,
) {
    for k in 0..half_len(n) {
        let g0 = gx[xo + 2 * k * sx];
        let g1 = if 2 * k + 1 < n { gx[xo + (2 * k + 1) * sx] } else { 0.0 };
        ga[co + k * sc] += f.lowpass[0] * g0 + f.lowpass[1] * g1;
        gd[co + k * sc] += f.highpass[0] * g0 + f.highpass[1] * g1;
    }
}

// ---- 1-D -----------------------------------------------------------------

/// Multi-level 1-D decomposition along the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet1D {
    /// Deepest approximation band, shape `(…, ⌈L/2^n⌉)`.
    pub approx: Tensor,
    /// Detail bands, finest first: `details[j]` has last axis `⌈L/2^(j+1)⌉`.
    pub details: Vec<Tensor>,
    /// Input length seen by each level, `lengths[0] == L`.
    pub lengths: Vec<usize>,
}

impl SubbandSet1D {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    /// Sum of squared coefficients over every band.
    pub fn energy(&self) -> f64 {
        self.approx.sq_norm() + self.details.iter().map(Tensor::sq_norm).sum::<f64>()
    }

    pub fn coefficient_count(&self) -> usize {
        self.approx.len() + self.details.iter().map(Tensor::len).sum::<usize>()
    }
}

/// Deepest level count supported for a length-`n` axis.
pub fn max_levels(n: usize) -> usize {
    let mut levels = 0;
    let mut len = n;
    while len >= 2 {
        len = half_len(len);
        levels += 1;
    }
    levels
}

pub fn dwt1d(signal: &Tensor, levels: usize) -> Result<SubbandSet1D> {
    dwt1d_with(&WaveletFilters::HAAR, signal, levels)
}

pub fn dwt1d_with(f: &WaveletFilters, signal: &Tensor, levels: usize) -> Result<SubbandSet1D> {
    let shape = signal.shape();
    let n = *shape.last().unwrap();
    if n < 2 {
        return Err(invalid("dwt1d", format!("signal length {n} < 2")));
    }
    if levels == 0 || levels > max_levels(n) {
        return Err(invalid(
            "dwt1d",
            format!("{levels} levels requested, length {n} supports 1..={}", max_levels(n)),
        ));
    }
    let rows = signal.len() / n;
    let mut current = signal.clone();
    let mut details = Vec::with_capacity(levels);
    let mut lengths = Vec::with_capacity(levels);
    let mut len = n;
    for _ in 0..levels {
        let h = half_len(len);
        let mut a = vec![0.0; rows * h];
        let mut d = vec![0.0; rows * h];
        for r in 0..rows {
            analysis(f, current.data(), r * len, 1, len, &mut a, &mut d, r * h, 1);
        }
        let mut bshape = shape.to_vec();
        *bshape.last_mut().unwrap() = h;
        details.push(Tensor::new(&bshape, d)?);
        lengths.push(len);
        current = Tensor::new(&bshape, a)?;
        len = h;
    }
    Ok(SubbandSet1D {
        approx: current,
        details,
        lengths,
    })
}

pub fn idwt1d(bands: &SubbandSet1D) -> Result<Tensor> {
    idwt1d_with(&WaveletFilters::HAAR, bands)
}

pub fn idwt1d_with(f: &WaveletFilters, bands: &SubbandSet1D) -> Result<Tensor> {
    let levels = bands.details.len();
    if levels == 0 || bands.lengths.len() != levels {
        return Err(invalid("idwt1d", "subband set has no levels or mismatched length record"));
    }
    let mut current = bands.approx.clone();
    for j in (0..levels).rev() {
        let d = &bands.details[j];
        let len = bands.lengths[j];
        let h = half_len(len);
        let lead = &current.shape()[..current.ndim() - 1];
        if current.shape() != d.shape() || *current.shape().last().unwrap() != h || lead != &d.shape()[..d.ndim() - 1] {
            return Err(mismatch("idwt1d", current.shape(), d.shape()));
        }
        let rows = current.len() / h;
        let mut x = vec![0.0; rows * len];
        for r in 0..rows {
            synthesis(f, current.data(), d.data(), r * h, 1, &mut x, r * len, 1, len);
        }
        let mut shape = current.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        current = Tensor::new(&shape, x)?;
    }
    Ok(current)
}

// ---- 2-D -----------------------------------------------------------------

/// Single-level 2-D decomposition of a `(C,H,W)` map.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet2D {
    pub approx: Tensor,
    pub horizontal: Tensor,
    pub vertical: Tensor,
    pub diagonal: Tensor,
    /// Spatial size of the decomposed input.
    pub height: usize,
    pub width: usize,
}

impl SubbandSet2D {
    pub fn energy(&self) -> f64 {
        self.approx.sq_norm() + self.horizontal.sq_norm() + self.vertical.sq_norm() + self.diagonal.sq_norm()
    }

    pub fn bands(&self) -> [&Tensor; 4] {
        [&self.approx, &self.horizontal, &self.vertical, &self.diagonal]
    }
}

/// Forward 2-D kernel on flat data: `(C,H,W)` → four bands `(C,⌈H/2⌉,⌈W/2⌉)`
/// written contiguously as `[cA, cH, cV, cD]`.
pub(crate) fn forward_2d(f: &WaveletFilters, x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (half_len(h), half_len(w));
    let band = c * h2 * w2;
    let mut lo = vec![0.0; c * h * w2];
    let mut hi = vec![0.0; c * h * w2];
    for ch in 0..c {
        for r in 0..h {
            analysis(f, x, (ch * h + r) * w, 1, w, &mut lo, &mut hi, (ch * h + r) * w2, 1);
        }
    }
    let mut out = vec![0.0; 4 * band];
    let (ll_lh, hl_hh) = out.split_at_mut(2 * band);
    let (ll, lh) = ll_lh.split_at_mut(band);
    let (hl, hh) = hl_hh.split_at_mut(band);
    for ch in 0..c {
        for col in 0..w2 {
            let src = ch * h * w2 + col;
            let dst = ch * h2 * w2 + col;
            analysis(f, &lo, src, w2, h, ll, lh, dst, w2);
            analysis(f, &hi, src, w2, h, hl, hh, dst, w2);
        }
    }
    out
}

/// Adjoint of [`forward_2d`].
pub(crate) fn forward_2d_adjoint(f: &WaveletFilters, g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (half_len(h), half_len(w));
    let band = c * h2 * w2;
    let (ll, rest) = g.split_at(band);
    let (lh, rest) = rest.split_at(band);
    let (hl, hh) = rest.split_at(band);
    let mut glo = vec![0.0; c * h * w2];
    let mut ghi = vec![0.0; c * h * w2];
    for ch in 0..c {
        for col in 0..w2 {
            let src = ch * h2 * w2 + col;
            let dst = ch * h * w2 + col;
            analysis_adjoint(f, ll, lh, src, w2, &mut glo, dst, w2, h);
            analysis_adjoint(f, hl, hh, src, w2, &mut ghi, dst, w2, h);
        }
    }
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for r in 0..h {
            analysis_adjoint(f, &glo, &ghi, (ch * h + r) * w2, 1, &mut gx, (ch * h + r) * w, 1, w);
        }
    }
    gx
}

/// Inverse 2-D kernel: four contiguous bands → `(C,H,W)`.
pub(crate) fn inverse_2d(f: &WaveletFilters, bands: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (half_len(h), half_len(w));
    let band = c * h2 * w2;
    let (ll, rest) = bands.split_at(band);
    let (lh, rest) = rest.split_at(band);
    let (hl, hh) = rest.split_at(band);
    let mut lo = vec![0.0; c * h * w2];
    let mut hi = vec![0.0; c * h * w2];
    for ch in 0..c {
        for col in 0..w2 {
            let src = ch * h2 * w2 + col;
            let dst = ch * h * w2 + col;
            synthesis(f, ll, lh, src, w2, &mut lo, dst, w2, h);
            synthesis(f, hl, hh, src, w2, &mut hi, dst, w2, h);
        }
    }
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        for r in 0..h {
            synthesis(f, &lo, &hi, (ch * h + r) * w2, 1, &mut x, (ch * h + r) * w, 1, w);
        }
    }
    x
}

/// Adjoint of [`inverse_2d`].
pub(crate) fn inverse_2d_adjoint(f: &WaveletFilters, g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (half_len(h), half_len(w));
    let band = c * h2 * w2;
    let mut glo = vec![0.0; c * h * w2];
    let mut ghi = vec![0.0; c * h * w2];
    for ch in 0..c {
        for r in 0..h {
            synthesis_adjoint(f, g, (ch * h + r) * w, 1, w, &mut glo, &mut ghi, (ch * h + r) * w2, 1);
        }
    }
    let mut out = vec![0.0; 4 * band];
    let (ll_lh, hl_hh) = out.split_at_mut(2 * band);
    let (ll, lh) = ll_lh.split_at_mut(band);
    let (hl, hh) = hl_hh.split_at_mut(band);
    for ch in 0..c {
        for col in 0..w2 {
            let src = ch * h * w2 + col;
            let dst = ch * h2 * w2 + col;
            synthesis_adjoint(f, &glo, src, w2, h, ll, lh, dst, w2);
            synthesis_adjoint(f, &ghi, src, w2, h, hl, hh, dst, w2);
        }
    }
    out
}

fn check_map(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.ndim() != 3 {
        return Err(invalid(op, format!("expected (C,H,W), got {:?}", x.shape())));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h < 2 || w < 2 {
        return Err(invalid(op, format!("spatial size {h}x{w} is degenerate (need ≥ 2x2)")));
    }
    Ok((c, h, w))
}

pub fn dwt2d(x: &Tensor) -> Result<SubbandSet2D> {
    dwt2d_with(&WaveletFilters::HAAR, x)
}

pub fn dwt2d_with(f: &WaveletFilters, x: &Tensor) -> Result<SubbandSet2D> {
    let (c, h, w) = check_map("dwt2d", x)?;
    let out = forward_2d(f, x.data(), c, h, w);
    let shape = [c, half_len(h), half_len(w)];
    let band = shape.iter().product::<usize>();
    let take = |i: usize| Tensor::new(&shape, out[i * band..(i + 1) * band].to_vec());
    Ok(SubbandSet2D {
        approx: take(0)?,
        horizontal: take(1)?,
        vertical: take(2)?,
        diagonal: take(3)?,
        height: h,
        width: w,
    })
}

pub fn idwt2d(bands: &SubbandSet2D) -> Result<Tensor> {
    idwt2d_with(&WaveletFilters::HAAR, bands)
}

pub fn idwt2d_with(f: &WaveletFilters, bands: &SubbandSet2D) -> Result<Tensor> {
    let a = &bands.approx;
    let expect = [a.shape()[0], half_len(bands.height), half_len(bands.width)];
    for b in bands.bands() {
        if b.shape() != expect {
            return Err(mismatch("idwt2d", b.shape(), &expect));
        }
    }
    let mut flat = Vec::with_capacity(4 * a.len());
    for b in bands.bands() {
        flat.extend_from_slice(b.data());
    }
    let x = inverse_2d(f, &flat, expect[0], bands.height, bands.width);
    Tensor::new(&[expect[0], bands.height, bands.width], x)
}

/// Mallat pyramid: `levels` single-level 2-D steps recursing on `cA`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid2D {
    /// Finest level first. Each entry's `approx` is the input of the next
    /// level; only the last one is retained as coefficients.
    pub levels: Vec<SubbandSet2D>,
}

impl Pyramid2D {
    pub fn approx(&self) -> &Tensor {
        &self.levels.last().expect("non-empty pyramid").approx
    }

    pub fn energy(&self) -> f64 {
        let details: f64 = self
            .levels
            .iter()
            .map(|l| l.horizontal.sq_norm() + l.vertical.sq_norm() + l.diagonal.sq_norm())
            .sum();
        details + self.approx().sq_norm()
    }
}

pub fn dwt2d_levels(x: &Tensor, levels: usize) -> Result<Pyramid2D> {
    dwt2d_levels_with(&WaveletFilters::HAAR, x, levels)
}

pub fn dwt2d_levels_with(f: &WaveletFilters, x: &Tensor, levels: usize) -> Result<Pyramid2D> {
    let (_, h, w) = check_map("dwt2d", x)?;
    let max = max_levels(h).min(max_levels(w));
    if levels == 0 || levels > max {
        return Err(invalid("dwt2d", format!("{levels} levels requested, {h}x{w} supports 1..={max}")));
    }
    let mut out = Vec::with_capacity(levels);
    let mut current = x.clone();
    for _ in 0..levels {
        let set = dwt2d_with(f, &current)?;
        current = set.approx.clone();
        out.push(set);
    }
    Ok(Pyramid2D { levels: out })
}

pub fn idwt2d_levels(p: &Pyramid2D) -> Result<Tensor> {
    idwt2d_levels_with(&WaveletFilters::HAAR, p)
}

pub fn idwt2d_levels_with(f: &WaveletFilters, p: &Pyramid2D) -> Result<Tensor> {
    let mut current = p.approx().clone();
    for level in p.levels.iter().rev() {
        let set = SubbandSet2D {
            approx: current,
            ..level.clone()
        };
        current = idwt2d_with(f, &set)?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;

    const S2: f64 = std::f64::consts::SQRT_2;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn haar_is_orthonormal() {
        let (ll, hh, lh) = WaveletFilters::haar().inner_products();
        assert!((ll - 1.0).abs() < 1e-15 && (hh - 1.0).abs() < 1e-15 && lh.abs() < 1e-15);
    }

    #[test]
    fn constant_pairs_have_zero_detail() {
        let s = dwt1d(&Tensor::from_vec(vec![1.0, 1.0, 2.0, 2.0]), 1).unwrap();
        assert!(close(s.approx.data(), &[S2, 2.0 * S2], 1e-15));
        assert!(close(s.details[0].data(), &[0.0, 0.0], 1e-15));
    }

    #[test]
    fn pairwise_coefficients() {
        // Stride-2 application of L and H by hand.
        let x = [4.0, 2.0, 1.0, 3.0];
        let l = WaveletFilters::HAAR.lowpass;
        let h = WaveletFilters::HAAR.highpass;
        let expect_a: Vec<f64> = (0..2).map(|k| l[0] * x[2 * k] + l[1] * x[2 * k + 1]).collect();
        let expect_d: Vec<f64> = (0..2).map(|k| h[0] * x[2 * k] + h[1] * x[2 * k + 1]).collect();
        assert!(close(&expect_a, &[3.0 * S2, 2.0 * S2], 1e-14));
        assert!(close(&expect_d, &[S2, -S2], 1e-14));
        let s = dwt1d(&Tensor::from_vec(x.to_vec()), 1).unwrap();
        assert!(close(s.approx.data(), &expect_a, 1e-15));
        assert!(close(s.details[0].data(), &expect_d, 1e-15));
    }

    #[test]
    fn inverse_of_known_bands() {
        let bands = SubbandSet1D {
            approx: Tensor::from_vec(vec![S2, 2.0 * S2]),
            details: vec![Tensor::from_vec(vec![0.0, 0.0])],
            lengths: vec![4],
        };
        assert!(close(idwt1d(&bands).unwrap().data(), &[1.0, 1.0, 2.0, 2.0], 1e-14));
    }

    #[test]
    fn zero_detail_gives_pairwise_constant() {
        let bands = SubbandSet1D {
            approx: Tensor::from_vec(vec![0.3, -1.2, 5.0]),
            details: vec![Tensor::zeros(&[3])],
            lengths: vec![6],
        };
        let x = idwt1d(&bands).unwrap();
        for k in 0..3 {
            assert_eq!(x.data()[2 * k], x.data()[2 * k + 1]);
        }
    }

    #[test]
    fn odd_length_replicates_last_sample() {
        let s = dwt1d(&Tensor::from_vec(vec![3.0, 3.0, 3.0]), 1).unwrap();
        assert_eq!(s.approx.len(), 2);
        assert!(close(s.details[0].data(), &[0.0, 0.0], 1e-15));
        let back = idwt1d(&s).unwrap();
        assert!(close(back.data(), &[3.0, 3.0, 3.0], 1e-14));
    }

    #[test]
    fn level_lengths_follow_ceiling() {
        let s = dwt1d(&Tensor::zeros(&[2, 13]), 3).unwrap();
        let lens: Vec<usize> = s.details.iter().map(|d| d.shape()[1]).collect();
        assert_eq!(lens, vec![7, 4, 2]);
        assert_eq!(s.approx.shape(), &[2, 2]);
        assert_eq!(s.lengths, vec![13, 7, 4]);
    }

    #[test]
    fn too_many_levels_rejected() {
        assert!(dwt1d(&Tensor::zeros(&[8]), 4).is_err());
        assert!(dwt1d(&Tensor::zeros(&[8]), 3).is_ok());
        assert!(dwt1d(&Tensor::zeros(&[1]), 1).is_err());
    }

    #[test]
    fn inconsistent_bands_rejected() {
        let bands = SubbandSet1D {
            approx: Tensor::zeros(&[3]),
            details: vec![Tensor::zeros(&[2])],
            lengths: vec![6],
        };
        assert!(idwt1d(&bands).is_err());
    }

    #[test]
    fn constant_block_2d() {
        let s = dwt2d(&Tensor::ones(&[1, 2, 2])).unwrap();
        assert!((s.approx.item() - 2.0).abs() < 1e-15);
        for b in [&s.horizontal, &s.vertical, &s.diagonal] {
            assert!(b.item().abs() < 1e-15);
        }
    }

    #[test]
    fn naming_convention_2d() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = dwt2d(&x).unwrap();
        let got = [s.approx.item(), s.horizontal.item(), s.vertical.item(), s.diagonal.item()];
        assert!(close(&got, &[5.0, -2.0, -1.0, 0.0], 1e-14), "{got:?}");
        assert!((s.energy() - 30.0).abs() < 1e-12);
        assert!(close(idwt2d(&s).unwrap().data(), x.data(), 1e-14));
    }

    #[test]
    fn lowpass_projection_is_blockwise_constant() {
        let x = Tensor::new(&[1, 4, 4], (0..16).map(|v| (v * v % 7) as f64).collect()).unwrap();
        let mut s = dwt2d(&x).unwrap();
        for b in [&mut s.horizontal, &mut s.vertical, &mut s.diagonal] {
            b.data_mut().fill(0.0);
        }
        let y = idwt2d(&s).unwrap();
        for by in 0..2 {
            for bx in 0..2 {
                let v = y.get(&[0, 2 * by, 2 * bx]);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    assert!((y.get(&[0, 2 * by + dy, 2 * bx + dx]) - v).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn channels_are_independent() {
        let x = Tensor::new(&[2, 2, 4], (0..16).map(f64::from).collect()).unwrap();
        let s = dwt2d(&x).unwrap();
        for c in 0..2 {
            let xc = crate::tensor::slice(&x, 0, c, 1).unwrap();
            let sc = dwt2d(&xc).unwrap();
            assert_eq!(crate::tensor::slice(&s.approx, 0, c, 1).unwrap(), sc.approx);
            assert_eq!(crate::tensor::slice(&s.diagonal, 0, c, 1).unwrap(), sc.diagonal);
        }
    }

    #[test]
    fn degenerate_map_rejected() {
        assert!(dwt2d(&Tensor::zeros(&[1, 1, 4])).is_err());
        assert!(dwt2d(&Tensor::zeros(&[4, 4])).is_err());
    }

    #[test]
    fn odd_map_roundtrip() {
        let x = Tensor::new(&[2, 5, 3], (0..30).map(|v| (v as f64).sin()).collect()).unwrap();
        let s = dwt2d(&x).unwrap();
        assert_eq!(s.approx.shape(), &[2, 3, 2]);
        assert!(idwt2d(&s).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn flipped_highpass_breaks_reconstruction() {
        let f = WaveletFilters::haar_with_flipped_highpass();
        let x = Tensor::from_vec(vec![4.0, 2.0, 1.0, 3.0]);
        let s = dwt1d_with(&f, &x, 1).unwrap();
        assert!(idwt1d_with(&f, &s).unwrap().max_abs_diff(&x) > 0.5);
    }

    #[test]
    fn pyramid_roundtrip() {
        let x = Tensor::new(&[1, 8, 16], (0..128).map(|v| (v as f64 * 0.37).cos()).collect()).unwrap();
        let p = dwt2d_levels(&x, 3).unwrap();
        assert_eq!(p.approx().shape(), &[1, 1, 2]);
        assert!(idwt2d_levels(&p).unwrap().max_abs_diff(&x) < 1e-12);
        assert!((p.energy() - x.sq_norm()).abs() < 1e-10);
    }
}
