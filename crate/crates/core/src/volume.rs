//! Dense latent volumes and spatial resampling.
//!
//! A `LatentVolume` is a `(channels, t, h, w)` tensor of `f64` in row-major
//! order. The codec moves volumes between pyramid scales with
//! `resize_spatial`, which resamples every `(channel, frame)` plane
//! independently; the temporal axis is never resampled, only broadcast when a
//! pyramid transition grows it.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

/// Errors raised by volume operations.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VolumeError {
    #[error("data length {len} does not match dims ({channels}, {t}, {h}, {w})")]
    LengthMismatch { len: usize, channels: usize, t: usize, h: usize, w: usize },
    #[error("volume dimensions must be non-zero")]
    ZeroDim,
    #[error("volume contains a non-finite value")]
    NonFinite,
    #[error("volume shapes differ: ({0}, {1}, {2}, {3}) vs ({4}, {5}, {6}, {7})")]
    ShapeMismatch(usize, usize, usize, usize, usize, usize, usize, usize),
    #[error("frame range {start}..{start_plus_len} outside duration {t}")]
    FrameRange { start: usize, start_plus_len: usize, t: usize },
    #[error("cannot broadcast {from} frames to {to}")]
    BadBroadcast { from: usize, to: usize },
}

/// Interpolation mode for `resize_spatial`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResizeMode {
    /// Two-tap tent interpolation with half-pixel-centered sampling.
    #[default]
    Bilinear,
    /// Nearest input sample under the same half-pixel alignment.
    Nearest,
}

/// A dense `(channels, t, h, w)` tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVolume {
    channels: usize,
    t: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl LatentVolume {
    /// All-zero volume of the given shape.
    pub fn zeros(channels: usize, t: usize, h: usize, w: usize) -> Self {
        Self { channels, t, h, w, data: vec![0.0; channels * t * h * w] }
    }

    /// Wraps an existing row-major buffer.
    pub fn from_vec(
        channels: usize,
        t: usize,
        h: usize,
        w: usize,
        data: Vec<f64>,
    ) -> Result<Self, VolumeError> {
        if channels == 0 || t == 0 || h == 0 || w == 0 {
            return Err(VolumeError::ZeroDim);
        }
        if data.len() != channels * t * h * w {
            return Err(VolumeError::LengthMismatch { len: data.len(), channels, t, h, w });
        }
        Ok(Self { channels, t, h, w, data })
    }

    /// Shape as `(channels, t, h, w)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.channels, self.t, self.h, self.w)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    fn index(&self, c: usize, ti: usize, y: usize, x: usize) -> usize {
        ((c * self.t + ti) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, c: usize, ti: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, ti, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, ti: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, ti, y, x);
        self.data[i] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The d-vector at one `(t, y, x)` position: one value per channel.
    pub fn position_vector(&self, ti: usize, y: usize, x: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = self.get(c, ti, y, x);
        }
    }

    /// Writes a d-vector at one `(t, y, x)` position.
    pub fn set_position_vector(&mut self, ti: usize, y: usize, x: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.channels);
        for (c, &value) in values.iter().enumerate() {
            self.set(c, ti, y, x, value);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Self) -> Result<(), VolumeError> {
        if self.shape() != other.shape() {
            let (c, t, h, w) = self.shape();
            let (c2, t2, h2, w2) = other.shape();
            return Err(VolumeError::ShapeMismatch(c, t, h, w, c2, t2, h2, w2));
        }
        Ok(())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<(), VolumeError> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self, VolumeError> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { data, ..*self })
    }

    /// Frames `start..start + len` as a new volume.
    pub fn select_frames(&self, start: usize, len: usize) -> Result<Self, VolumeError> {
        let end = start.checked_add(len).filter(|&e| e <= self.t && len > 0).ok_or(
            VolumeError::FrameRange { start, start_plus_len: start + len, t: self.t },
        )?;
        let mut out = Self::zeros(self.channels, len, self.h, self.w);
        for c in 0..self.channels {
            for (dst_t, src_t) in (start..end).enumerate() {
                for y in 0..self.h {
                    for x in 0..self.w {
                        out.set(c, dst_t, y, x, self.get(c, src_t, y, x));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Repeats a single-frame volume to `t_out` frames.
    pub fn broadcast_frames(&self, t_out: usize) -> Result<Self, VolumeError> {
        if self.t == t_out {
            return Ok(self.clone());
        }
        if self.t != 1 || t_out == 0 {
            return Err(VolumeError::BadBroadcast { from: self.t, to: t_out });
        }
        let mut out = Self::zeros(self.channels, t_out, self.h, self.w);
        for c in 0..self.channels {
            for ti in 0..t_out {
                for y in 0..self.h {
                    for x in 0..self.w {
                        out.set(c, ti, y, x, self.get(c, 0, y, x));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Precomputed 1-D resampling taps for one output axis.
struct AxisTaps {
    /// Per output index: (lower input index, upper input index, upper weight).
    taps: Vec<(usize, usize, f64)>,
}

impl AxisTaps {
    fn new(n_in: usize, n_out: usize, mode: ResizeMode) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let taps = (0..n_out)
            .map(|j| {
                // Half-pixel-centered source coordinate, clamped to the grid.
                let src = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                match mode {
                    ResizeMode::Bilinear => {
                        let lower = src.floor() as usize;
                        let upper = (lower + 1).min(n_in - 1);
                        (lower, upper, src - lower as f64)
                    }
                    ResizeMode::Nearest => {
                        let nearest = (src + 0.5).floor().min((n_in - 1) as f64) as usize;
                        (nearest, nearest, 0.0)
                    }
                }
            })
            .collect();
        Self { taps }
    }
}

/// Resamples every `(channel, frame)` plane to `(h_out, w_out)`. The temporal
/// axis is untouched. Rejects non-finite input.
pub fn resize_spatial(
    volume: &LatentVolume,
    h_out: usize,
    w_out: usize,
    mode: ResizeMode,
) -> Result<LatentVolume, VolumeError> {
    if h_out == 0 || w_out == 0 {
        return Err(VolumeError::ZeroDim);
    }
    if !volume.is_finite() {
        return Err(VolumeError::NonFinite);
    }
    let (channels, t, h_in, w_in) = volume.shape();
    if (h_in, w_in) == (h_out, w_out) {
        return Ok(volume.clone());
    }
    let rows = AxisTaps::new(h_in, h_out, mode);
    let cols = AxisTaps::new(w_in, w_out, mode);
    let mut out = LatentVolume::zeros(channels, t, h_out, w_out);
    for c in 0..channels {
        for ti in 0..t {
            for (y, &(y0, y1, fy)) in rows.taps.iter().enumerate() {
                for (x, &(x0, x1, fx)) in cols.taps.iter().enumerate() {
                    let v00 = volume.get(c, ti, y0, x0);
                    let v01 = volume.get(c, ti, y0, x1);
                    let v10 = volume.get(c, ti, y1, x0);
                    let v11 = volume.get(c, ti, y1, x1);
                    let top = v00 + (v01 - v00) * fx;
                    let bottom = v10 + (v11 - v10) * fx;
                    out.set(c, ti, y, x, top + (bottom - top) * fy);
                }
            }
        }
    }
    Ok(out)
}

/// Applies the transpose of `resize_spatial`'s linear map: scatters
/// `grad_out` (shaped like the resize output) back onto the input grid.
/// Needed by gradient-based quantizer training.
pub fn resize_spatial_adjoint(
    grad_out: &LatentVolume,
    h_in: usize,
    w_in: usize,
    mode: ResizeMode,
) -> Result<LatentVolume, VolumeError> {
    if h_in == 0 || w_in == 0 {
        return Err(VolumeError::ZeroDim);
    }
    if !grad_out.is_finite() {
        return Err(VolumeError::NonFinite);
    }
    let (channels, t, h_out, w_out) = grad_out.shape();
    if (h_in, w_in) == (h_out, w_out) {
        return Ok(grad_out.clone());
    }
    let rows = AxisTaps::new(h_in, h_out, mode);
    let cols = AxisTaps::new(w_in, w_out, mode);
    let mut out = LatentVolume::zeros(channels, t, h_in, w_in);
    for c in 0..channels {
        for ti in 0..t {
            for (y, &(y0, y1, fy)) in rows.taps.iter().enumerate() {
                for (x, &(x0, x1, fx)) in cols.taps.iter().enumerate() {
                    let g = grad_out.get(c, ti, y, x);
                    let mut scatter = |yy: usize, xx: usize, weight: f64| {
                        let i = out.index(c, ti, yy, xx);
                        out.data[i] += g * weight;
                    };
                    scatter(y0, x0, (1.0 - fy) * (1.0 - fx));
                    scatter(y0, x1, (1.0 - fy) * fx);
                    scatter(y1, x0, fy * (1.0 - fx));
                    scatter(y1, x1, fy * fx);
                }
            }
        }
    }
    Ok(out)
}

/// Peak signal-to-noise ratio between two same-shaped volumes, in dB.
/// Identical volumes yield `+inf`.
pub fn psnr(a: &LatentVolume, b: &LatentVolume, peak: f64) -> Result<f64, VolumeError> {
    a.check_same_shape(b)?;
    if !a.is_finite() || !b.is_finite() {
        return Err(VolumeError::NonFinite);
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * Float::log10(peak * peak / mse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent resampling oracle: clamp the half-pixel source coordinate,
    /// then sum tent-kernel weights over every input sample.
    fn resize_oracle(volume: &LatentVolume, h_out: usize, w_out: usize) -> LatentVolume {
        let (channels, t, h_in, w_in) = volume.shape();
        let mut out = LatentVolume::zeros(channels, t, h_out, w_out);
        let coord = |j: usize, n_in: usize, n_out: usize| {
            let src = (j as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5;
            src.clamp(0.0, (n_in - 1) as f64)
        };
        for c in 0..channels {
            for ti in 0..t {
                for y in 0..h_out {
                    for x in 0..w_out {
                        let sy = coord(y, h_in, h_out);
                        let sx = coord(x, w_in, w_out);
                        let mut acc = 0.0;
                        for iy in 0..h_in {
                            for ix in 0..w_in {
                                let wy = (1.0 - (sy - iy as f64).abs()).max(0.0);
                                let wx = (1.0 - (sx - ix as f64).abs()).max(0.0);
                                acc += volume.get(c, ti, iy, ix) * wy * wx;
                            }
                        }
                        out.set(c, ti, y, x, acc);
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &LatentVolume, b: &LatentVolume, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn two_by_two_bilinear_upsample_expected_values() {
        let v = LatentVolume::from_vec(1, 1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = resize_spatial(&v, 4, 4, ResizeMode::Bilinear).unwrap();
        #[rustfmt::skip]
        let expected = [
            0.0,  0.25, 0.75, 1.0,
            0.5,  0.75, 1.25, 1.5,
            1.5,  1.75, 2.25, 2.5,
            2.0,  2.25, 2.75, 3.0,
        ];
        for (got, want) in up.as_slice().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert_close(&up, &resize_oracle(&v, 4, 4), 1e-12);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let v = LatentVolume::from_vec(2, 1, 2, 2, (0..8).map(|i| i as f64).collect()).unwrap();
        let out = resize_spatial(&v, 2, 2, ResizeMode::Bilinear).unwrap();
        assert_eq!(out, v);
        let out = resize_spatial(&v, 2, 2, ResizeMode::Nearest).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn nearest_values_come_from_input() {
        let v = LatentVolume::from_vec(1, 1, 3, 3, (0..9).map(|i| i as f64 * 1.5).collect()).unwrap();
        for &(h, w) in &[(1usize, 1usize), (2, 5), (7, 2), (6, 6)] {
            let out = resize_spatial(&v, h, w, ResizeMode::Nearest).unwrap();
            for value in out.as_slice() {
                assert!(v.as_slice().contains(value));
            }
        }
    }

    #[test]
    fn psnr_identity_is_infinite() {
        let v = LatentVolume::from_vec(1, 2, 1, 2, vec![0.5, -0.25, 1.0, 0.0]).unwrap();
        assert_eq!(psnr(&v, &v, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_known_value() {
        // MSE 0.25 against peak 1 is 10 * log10(4) dB.
        let a = LatentVolume::from_vec(1, 1, 1, 4, vec![0.0; 4]).unwrap();
        let b = LatentVolume::from_vec(1, 1, 1, 4, vec![0.5; 4]).unwrap();
        let got = psnr(&a, &b, 1.0).unwrap();
        assert!((got - 10.0 * 4.0f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let v = LatentVolume::from_vec(1, 1, 1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert_eq!(resize_spatial(&v, 2, 2, ResizeMode::Bilinear).unwrap_err(), VolumeError::NonFinite);
        let ok = LatentVolume::zeros(1, 1, 1, 2);
        assert_eq!(psnr(&v, &ok, 1.0).unwrap_err(), VolumeError::NonFinite);
    }

    #[test]
    fn frame_selection_and_broadcast() {
        let v = LatentVolume::from_vec(1, 3, 1, 2, (0..6).map(|i| i as f64).collect()).unwrap();
        let tail = v.select_frames(1, 2).unwrap();
        assert_eq!(tail.as_slice(), &[2.0, 3.0, 4.0, 5.0]);
        let one = v.select_frames(2, 1).unwrap();
        let wide = one.broadcast_frames(3).unwrap();
        assert_eq!(wide.as_slice(), &[4.0, 5.0, 4.0, 5.0, 4.0, 5.0]);
        assert_eq!(v.broadcast_frames(2).unwrap_err(), VolumeError::BadBroadcast { from: 3, to: 2 });
    }

    #[test]
    fn adjoint_matches_transpose_inner_product() {
        // <resize(v), g> must equal <v, adjoint(g)> for the same taps.
        let mut v = LatentVolume::zeros(2, 2, 3, 4);
        let mut g = LatentVolume::zeros(2, 2, 5, 2);
        for (i, slot) in v.as_mut_slice().iter_mut().enumerate() {
            *slot = (i as f64 * 0.37).sin();
        }
        for (i, slot) in g.as_mut_slice().iter_mut().enumerate() {
            *slot = (i as f64 * 0.73).cos();
        }
        for mode in [ResizeMode::Bilinear, ResizeMode::Nearest] {
            let fwd = resize_spatial(&v, 5, 2, mode).unwrap();
            let adj = resize_spatial_adjoint(&g, 3, 4, mode).unwrap();
            let lhs: f64 = fwd.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
            let rhs: f64 = v.as_slice().iter().zip(adj.as_slice()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        }
    }

    proptest! {
        #[test]
        fn bilinear_matches_direct_summation_oracle(
            h_in in 1usize..5, w_in in 1usize..5,
            h_out in 1usize..7, w_out in 1usize..7,
            seed in 0u64..1000,
        ) {
            let mut v = LatentVolume::zeros(2, 2, h_in, w_in);
            for (i, slot) in v.as_mut_slice().iter_mut().enumerate() {
                *slot = ((i as f64 + seed as f64) * 0.61).sin() * 3.0;
            }
            let got = resize_spatial(&v, h_out, w_out, ResizeMode::Bilinear).unwrap();
            let want = resize_oracle(&v, h_out, w_out);
            for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn constants_are_preserved(
            h_in in 1usize..5, w_in in 1usize..5,
            h_out in 1usize..7, w_out in 1usize..7,
            value in -10.0f64..10.0,
        ) {
            let mut v = LatentVolume::zeros(1, 2, h_in, w_in);
            v.as_mut_slice().fill(value);
            for mode in [ResizeMode::Bilinear, ResizeMode::Nearest] {
                let out = resize_spatial(&v, h_out, w_out, mode).unwrap();
                for got in out.as_slice() {
                    prop_assert!((got - value).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn resize_is_linear(
            h_out in 1usize..6, w_out in 1usize..6,
            alpha in -2.0f64..2.0,
        ) {
            let mut a = LatentVolume::zeros(1, 1, 3, 3);
            let mut b = LatentVolume::zeros(1, 1, 3, 3);
            for i in 0..9 {
                a.as_mut_slice()[i] = (i as f64 * 0.9).cos();
                b.as_mut_slice()[i] = (i as f64 * 1.3).sin();
            }
            let mut combo = a.clone();
            for (slot, y) in combo.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *slot += alpha * y;
            }
            let lhs = resize_spatial(&combo, h_out, w_out, ResizeMode::Bilinear).unwrap();
            let ra = resize_spatial(&a, h_out, w_out, ResizeMode::Bilinear).unwrap();
            let rb = resize_spatial(&b, h_out, w_out, ResizeMode::Bilinear).unwrap();
            for ((l, x), y) in lhs.as_slice().iter().zip(ra.as_slice()).zip(rb.as_slice()) {
                prop_assert!((l - (x + alpha * y)).abs() < 1e-12);
            }
        }
    }
}
