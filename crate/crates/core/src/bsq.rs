//! Binary spherical quantization of residual volumes.
//!
//! Each latent position is a d-vector. To quantize at bitwidth `b`, the
//! vector is (optionally) mapped to `b` channels by a learned linear adapter,
//! projected to the unit sphere, and reduced to its per-channel signs: bit
//! `i` is 1 when channel `i` is non-negative (sign of zero counts as +1).
//! The dequantized codeword places every channel at `±1/sqrt(b)`, which is
//! exactly the nearest point of the implicit `2^b`-codeword sphere codebook,
//! and the adapter's backprojection returns it to d channels. When `b = d`
//! the quantizer is parameter-free.
//!
//! A pyramid is encoded coarse-to-fine: at every scale the residual between
//! the input volume and the running reconstruction is downsampled, quantized,
//! and its upsampled dequantization added back. Scales may be dropped by a
//! stochastic quantizer-depth mask so the prefix must carry the content.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::schedule::ScaleSchedule;
use crate::volume::{resize_spatial, LatentVolume, ResizeMode, VolumeError};

/// Errors raised by quantization operations.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BsqError {
    #[error("volume error: {0}")]
    Volume(#[from] VolumeError),
    #[error("no adapter for bitwidth {bitwidth} (channels = {channels})")]
    MissingAdapter { bitwidth: u32, channels: usize },
    #[error("bitwidth {bitwidth} outside supported range 1..=64")]
    BitwidthRange { bitwidth: u32 },
    #[error("volume has {got} channels, quantizer expects {expected}")]
    ChannelMismatch { got: usize, expected: usize },
    #[error("schedule is empty")]
    EmptySchedule,
    #[error("schedule mixes latent durations")]
    MixedDurations,
    #[error("volume dims ({t}, {h}, {w}) do not match the schedule's finest scale ({st}, {sh}, {sw})")]
    DimsMismatch { t: usize, h: usize, w: usize, st: usize, sh: usize, sw: usize },
    #[error("code {index} dims do not match schedule scale")]
    CodeDimsMismatch { index: usize },
    #[error("{got} codes exceed the {len}-scale schedule")]
    TooManyCodes { got: usize, len: usize },
    #[error("depth mask length {got} does not match schedule length {len}")]
    MaskLength { got: usize, len: usize },
    #[error("depth mask must retain at least one scale")]
    NothingRetained,
    #[error("droppable count {n} must be below schedule length {len}")]
    DroppableRange { n: usize, len: usize },
}

/// Packed binary codes for one block: `t * h * w` positions at `bitwidth`
/// bits each. Each position occupies `ceil(bitwidth / 8)` bytes; bit `i`
/// lives at bit `i % 8` of byte `i / 8`, little-endian. Positions follow
/// `(t, h, w)` row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTensor {
    t: usize,
    h: usize,
    w: usize,
    bitwidth: u32,
    bits: Vec<u8>,
}

impl BitTensor {
    /// All-zero codes of the given shape.
    pub fn zeros(t: usize, h: usize, w: usize, bitwidth: u32) -> Self {
        let bytes = Self::bytes_per_code(bitwidth) * t * h * w;
        Self { t, h, w, bitwidth, bits: vec![0; bytes] }
    }

    /// Bytes used by one position's code.
    pub fn bytes_per_code(bitwidth: u32) -> usize {
        (bitwidth as usize).div_ceil(8)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.t, self.h, self.w)
    }

    pub fn bitwidth(&self) -> u32 {
        self.bitwidth
    }

    /// Number of positions (`t * h * w`).
    pub fn n_positions(&self) -> usize {
        self.t * self.h * self.w
    }

    /// Row-major position index for `(ti, y, x)`.
    #[inline]
    pub fn position(&self, ti: usize, y: usize, x: usize) -> usize {
        (ti * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get_bit(&self, pos: usize, bit: u32) -> bool {
        debug_assert!(bit < self.bitwidth);
        let base = pos * Self::bytes_per_code(self.bitwidth);
        self.bits[base + (bit / 8) as usize] >> (bit % 8) & 1 == 1
    }

    #[inline]
    pub fn set_bit(&mut self, pos: usize, bit: u32, value: bool) {
        debug_assert!(bit < self.bitwidth);
        let base = pos * Self::bytes_per_code(self.bitwidth);
        let byte = &mut self.bits[base + (bit / 8) as usize];
        let mask = 1u8 << (bit % 8);
        if value {
            *byte |= mask;
        } else {
            *byte &= !mask;
        }
    }

    #[inline]
    pub fn flip_bit(&mut self, pos: usize, bit: u32) {
        let base = pos * Self::bytes_per_code(self.bitwidth);
        self.bits[base + (bit / 8) as usize] ^= 1u8 << (bit % 8);
    }

    /// One position's code as a little-endian integer (bitwidth <= 64).
    pub fn code_u64(&self, pos: usize) -> u64 {
        let bytes = Self::bytes_per_code(self.bitwidth);
        let base = pos * bytes;
        let mut code = 0u64;
        for (i, &byte) in self.bits[base..base + bytes].iter().enumerate() {
            code |= (byte as u64) << (8 * i);
        }
        code
    }

    /// Overwrites one position's code from a little-endian integer.
    pub fn set_code_u64(&mut self, pos: usize, code: u64) {
        debug_assert!(self.bitwidth == 64 || code < (1u64 << self.bitwidth));
        let bytes = Self::bytes_per_code(self.bitwidth);
        let base = pos * bytes;
        for i in 0..bytes {
            self.bits[base + i] = (code >> (8 * i)) as u8;
        }
    }

    /// Raw packed bytes.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    /// Rebuilds from packed bytes produced by `as_bytes`.
    pub fn from_bytes(
        t: usize,
        h: usize,
        w: usize,
        bitwidth: u32,
        bits: Vec<u8>,
    ) -> Result<Self, BsqError> {
        if bitwidth == 0 || bitwidth > 64 {
            return Err(BsqError::BitwidthRange { bitwidth });
        }
        let expected = Self::bytes_per_code(bitwidth) * t * h * w;
        if bits.len() != expected {
            return Err(BsqError::CodeDimsMismatch { index: 0 });
        }
        Ok(Self { t, h, w, bitwidth, bits })
    }
}

/// Learned linear channel adapter between the d-channel latent space and a
/// b-channel quantization space (`b < d`): `project` is a `b x d` map applied
/// before quantization, `backproject` a `d x b` map applied after.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAdapter {
    pub bitwidth: u32,
    pub channels: usize,
    /// `b x d`, row-major.
    pub w_in: Vec<f64>,
    /// `d x b`, row-major.
    pub w_out: Vec<f64>,
}

impl ChannelAdapter {
    /// Random init: `w_in` rows are scaled Gaussian, `w_out` starts as the
    /// transpose so backprojection roughly inverts projection.
    pub fn init<R: Rng>(channels: usize, bitwidth: u32, rng: &mut R) -> Self {
        let b = bitwidth as usize;
        let scale = 1.0 / (channels as f64).sqrt();
        let mut w_in = vec![0.0; b * channels];
        for value in w_in.iter_mut() {
            let g: f64 = StandardNormal.sample(rng);
            *value = g * scale;
        }
        let mut w_out = vec![0.0; channels * b];
        for row in 0..channels {
            for col in 0..b {
                w_out[row * b + col] = w_in[col * channels + row];
            }
        }
        Self { bitwidth, channels, w_in, w_out }
    }

    /// `z = w_in * x`, d channels down to b.
    pub fn project(&self, x: &[f64], z: &mut [f64]) {
        let (b, d) = (self.bitwidth as usize, self.channels);
        debug_assert_eq!(x.len(), d);
        debug_assert_eq!(z.len(), b);
        for (row, slot) in z.iter_mut().enumerate() {
            let weights = &self.w_in[row * d..(row + 1) * d];
            *slot = weights.iter().zip(x).map(|(w, xv)| w * xv).sum();
        }
    }

    /// `y = w_out * q`, b channels back up to d.
    pub fn backproject(&self, q: &[f64], y: &mut [f64]) {
        let (b, d) = (self.bitwidth as usize, self.channels);
        debug_assert_eq!(q.len(), b);
        debug_assert_eq!(y.len(), d);
        for (row, slot) in y.iter_mut().enumerate() {
            let weights = &self.w_out[row * b..(row + 1) * b];
            *slot = weights.iter().zip(q).map(|(w, qv)| w * qv).sum();
        }
    }
}

/// Stochastic quantizer-depth mask: which scales of a pyramid are encoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SqdMask {
    pub retained: Vec<bool>,
}

impl SqdMask {
    /// Mask retaining every scale.
    pub fn all(len: usize) -> Self {
        Self { retained: vec![true; len] }
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    pub fn n_retained(&self) -> usize {
        self.retained.iter().filter(|&&r| r).count()
    }
}

/// Samples a depth mask: the last `n_droppable` scales are each dropped
/// independently with probability `drop_p`; everything earlier is always
/// retained, so at least one scale survives.
pub fn sample_sqd<R: Rng>(
    schedule: &ScaleSchedule,
    n_droppable: usize,
    drop_p: f64,
    rng: &mut R,
) -> Result<SqdMask, BsqError> {
    let len = schedule.tuples.len();
    if len == 0 {
        return Err(BsqError::EmptySchedule);
    }
    if n_droppable >= len {
        return Err(BsqError::DroppableRange { n: n_droppable, len });
    }
    let mut retained = vec![true; len];
    for slot in retained[len - n_droppable..].iter_mut() {
        *slot = rng.random::<f64>() >= drop_p;
    }
    Ok(SqdMask { retained })
}

/// Multi-scale binary spherical quantizer for d-channel volumes, holding one
/// channel adapter per sub-d bitwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    channels: usize,
    resize_mode: ResizeMode,
    adapters: BTreeMap<u32, ChannelAdapter>,
}

impl Quantizer {
    /// Parameter-free quantizer: only `bitwidth = channels` is usable.
    pub fn identity(channels: usize) -> Self {
        Self { channels, resize_mode: ResizeMode::Bilinear, adapters: BTreeMap::new() }
    }

    /// Quantizer with freshly-initialized adapters for every bitwidth in
    /// `bitwidths` that differs from `channels`.
    pub fn with_adapters<R: Rng>(channels: usize, bitwidths: &[u32], rng: &mut R) -> Self {
        let mut q = Self::identity(channels);
        for &bitwidth in bitwidths {
            if bitwidth as usize != channels {
                q.adapters.insert(bitwidth, ChannelAdapter::init(channels, bitwidth, rng));
            }
        }
        q
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn adapter(&self, bitwidth: u32) -> Option<&ChannelAdapter> {
        self.adapters.get(&bitwidth)
    }

    pub fn adapter_mut(&mut self, bitwidth: u32) -> Option<&mut ChannelAdapter> {
        self.adapters.get_mut(&bitwidth)
    }

    /// Bitwidths of the held adapters, ascending.
    pub fn adapter_bitwidths(&self) -> Vec<u32> {
        self.adapters.keys().copied().collect()
    }

    /// Replaces an adapter wholesale (checkpoint loading).
    pub fn insert_adapter(&mut self, adapter: ChannelAdapter) {
        self.adapters.insert(adapter.bitwidth, adapter);
    }

    fn check_bitwidth(&self, bitwidth: u32) -> Result<Option<&ChannelAdapter>, BsqError> {
        if bitwidth == 0 || bitwidth > 64 {
            return Err(BsqError::BitwidthRange { bitwidth });
        }
        if bitwidth as usize == self.channels {
            return Ok(None);
        }
        match self.adapters.get(&bitwidth) {
            Some(adapter) => Ok(Some(adapter)),
            None => Err(BsqError::MissingAdapter { bitwidth, channels: self.channels }),
        }
    }

    /// Quantizes one residual block at `bitwidth`. Returns the packed codes
    /// and the dequantized volume (d channels, same dims).
    pub fn quantize_block(
        &self,
        residual: &LatentVolume,
        bitwidth: u32,
    ) -> Result<(BitTensor, LatentVolume), BsqError> {
        let adapter = self.check_bitwidth(bitwidth)?;
        let (channels, t, h, w) = residual.shape();
        if channels != self.channels {
            return Err(BsqError::ChannelMismatch { got: channels, expected: self.channels });
        }
        if !residual.is_finite() {
            return Err(BsqError::Volume(VolumeError::NonFinite));
        }
        let b = bitwidth as usize;
        let mut codes = BitTensor::zeros(t, h, w, bitwidth);
        let mut dequant = LatentVolume::zeros(channels, t, h, w);
        let mut x = vec![0.0; channels];
        let mut z = vec![0.0; b];
        let mut q = vec![0.0; b];
        let mut y = vec![0.0; channels];
        let amplitude = 1.0 / (b as f64).sqrt();
        for ti in 0..t {
            for yy in 0..h {
                for xx in 0..w {
                    residual.position_vector(ti, yy, xx, &mut x);
                    match adapter {
                        Some(a) => a.project(&x, &mut z),
                        None => z.copy_from_slice(&x),
                    }
                    // Unit-sphere projection never moves a value across zero,
                    // so signs can be read straight off `z`; sign(0) = +1.
                    let pos = codes.position(ti, yy, xx);
                    for (i, &value) in z.iter().enumerate() {
                        let bit = value >= 0.0;
                        codes.set_bit(pos, i as u32, bit);
                        q[i] = if bit { amplitude } else { -amplitude };
                    }
                    match adapter {
                        Some(a) => a.backproject(&q, &mut y),
                        None => y.copy_from_slice(&q),
                    }
                    dequant.set_position_vector(ti, yy, xx, &y);
                }
            }
        }
        Ok((codes, dequant))
    }

    /// Dequantizes one block of codes back to a d-channel volume.
    pub fn dequantize_block(&self, codes: &BitTensor) -> Result<LatentVolume, BsqError> {
        let adapter = self.check_bitwidth(codes.bitwidth())?;
        let (t, h, w) = codes.dims();
        let b = codes.bitwidth() as usize;
        let amplitude = 1.0 / (b as f64).sqrt();
        let mut volume = LatentVolume::zeros(self.channels, t, h, w);
        let mut q = vec![0.0; b];
        let mut y = vec![0.0; self.channels];
        for ti in 0..t {
            for yy in 0..h {
                for xx in 0..w {
                    let pos = codes.position(ti, yy, xx);
                    for (i, slot) in q.iter_mut().enumerate() {
                        *slot = if codes.get_bit(pos, i as u32) { amplitude } else { -amplitude };
                    }
                    match adapter {
                        Some(a) => a.backproject(&q, &mut y),
                        None => y.copy_from_slice(&q),
                    }
                    volume.set_position_vector(ti, yy, xx, &y);
                }
            }
        }
        Ok(volume)
    }

    fn check_schedule(
        &self,
        schedule: &ScaleSchedule,
    ) -> Result<(usize, usize, usize), BsqError> {
        let first = schedule.tuples.first().ok_or(BsqError::EmptySchedule)?;
        if schedule.tuples.iter().any(|s| s.t != first.t) {
            return Err(BsqError::MixedDurations);
        }
        let (h, w) = schedule.largest().unwrap();
        Ok((first.t, h, w))
    }

    /// Encodes a pyramid: at every retained scale, quantize the downsampled
    /// residual and add its upsampled dequantization to the running
    /// reconstruction. Returns one code block per retained scale.
    pub fn encode_pyramid(
        &self,
        volume: &LatentVolume,
        schedule: &ScaleSchedule,
        sqd: &SqdMask,
    ) -> Result<Vec<BitTensor>, BsqError> {
        if sqd.len() != schedule.tuples.len() {
            return Err(BsqError::MaskLength { got: sqd.len(), len: schedule.tuples.len() });
        }
        if sqd.n_retained() == 0 {
            return Err(BsqError::NothingRetained);
        }
        let (t, h, w) = self.check_schedule(schedule)?;
        let (channels, vt, vh, vw) = volume.shape();
        if channels != self.channels {
            return Err(BsqError::ChannelMismatch { got: channels, expected: self.channels });
        }
        if (vt, vh, vw) != (t, h, w) {
            return Err(BsqError::DimsMismatch { t: vt, h: vh, w: vw, st: t, sh: h, sw: w });
        }
        let mut reconstruction = LatentVolume::zeros(channels, t, h, w);
        let mut codes = Vec::with_capacity(sqd.n_retained());
        for (tuple, &retained) in schedule.tuples.iter().zip(&sqd.retained) {
            if !retained {
                continue;
            }
            let residual = volume.sub(&reconstruction)?;
            let coarse = resize_spatial(&residual, tuple.h, tuple.w, self.resize_mode)?;
            let (block_codes, dequant) = self.quantize_block(&coarse, tuple.bitwidth)?;
            let fine = resize_spatial(&dequant, h, w, self.resize_mode)?;
            reconstruction.add_assign(&fine)?;
            codes.push(block_codes);
        }
        Ok(codes)
    }

    /// Decodes a prefix of code blocks against the schedule: codes map to
    /// the first `codes.len()` scales in order, and their upsampled
    /// dequantizations are summed at `target` resolution. An empty prefix
    /// decodes to zeros.
    pub fn decode_pyramid(
        &self,
        codes: &[BitTensor],
        schedule: &ScaleSchedule,
        target: (usize, usize),
    ) -> Result<LatentVolume, BsqError> {
        let (t, _, _) = self.check_schedule(schedule)?;
        if codes.len() > schedule.tuples.len() {
            return Err(BsqError::TooManyCodes { got: codes.len(), len: schedule.tuples.len() });
        }
        let mut reconstruction = LatentVolume::zeros(self.channels, t, target.0, target.1);
        for (index, (code, tuple)) in codes.iter().zip(&schedule.tuples).enumerate() {
            if code.dims() != (tuple.t, tuple.h, tuple.w) || code.bitwidth() != tuple.bitwidth {
                return Err(BsqError::CodeDimsMismatch { index });
            }
            let dequant = self.dequantize_block(code)?;
            let fine = resize_spatial(&dequant, target.0, target.1, self.resize_mode)?;
            reconstruction.add_assign(&fine)?;
        }
        Ok(reconstruction)
    }

    /// Projects one residual position to the unit quantization sphere.
    /// Returns the pre-quantization unit vector, or `None` for an exactly
    /// zero projection (its code is all-ones by the sign convention).
    fn unit_projection(&self, adapter: Option<&ChannelAdapter>, x: &[f64], u: &mut [f64]) -> bool {
        match adapter {
            Some(a) => a.project(x, u),
            None => u.copy_from_slice(x),
        }
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return false;
        }
        for value in u.iter_mut() {
            *value /= norm;
        }
        true
    }

    /// Commitment and entropy diagnostics for an encoded pyramid.
    ///
    /// Commitment is the mean over retained positions of the squared distance
    /// between the pre-quantization unit vector and its codeword. The entropy
    /// penalty uses the soft-bit relaxation `sigmoid(tau * u_i)`: it is the
    /// mean per-position bit entropy minus the entropy of the mean activation
    /// (per scale, position-weighted). The penalty is always <= 0 and reaches
    /// its maximum, 0, when every position of a scale emits the same
    /// distribution — the codebook-collapse signal.
    pub fn quantizer_loss(
        &self,
        volume: &LatentVolume,
        codes: &[BitTensor],
        schedule: &ScaleSchedule,
        tau: f64,
    ) -> Result<QuantizerLoss, BsqError> {
        let (t, h, w) = self.check_schedule(schedule)?;
        if codes.len() > schedule.tuples.len() {
            return Err(BsqError::TooManyCodes { got: codes.len(), len: schedule.tuples.len() });
        }
        let (channels, vt, vh, vw) = volume.shape();
        if channels != self.channels {
            return Err(BsqError::ChannelMismatch { got: channels, expected: self.channels });
        }
        if (vt, vh, vw) != (t, h, w) {
            return Err(BsqError::DimsMismatch { t: vt, h: vh, w: vw, st: t, sh: h, sw: w });
        }
        let mut reconstruction = LatentVolume::zeros(channels, t, h, w);
        let mut commitment_sum = 0.0;
        let mut conditional_sum = 0.0;
        let mut marginal_weighted = 0.0;
        let mut total_positions = 0usize;
        for (index, (code, tuple)) in codes.iter().zip(&schedule.tuples).enumerate() {
            if code.dims() != (tuple.t, tuple.h, tuple.w) || code.bitwidth() != tuple.bitwidth {
                return Err(BsqError::CodeDimsMismatch { index });
            }
            let adapter = self.check_bitwidth(tuple.bitwidth)?;
            let b = tuple.bitwidth as usize;
            let amplitude = 1.0 / (b as f64).sqrt();
            let residual = volume.sub(&reconstruction)?;
            let coarse = resize_spatial(&residual, tuple.h, tuple.w, self.resize_mode)?;
            let n_pos = tuple.tokens();
            let mut x = vec![0.0; channels];
            let mut u = vec![0.0; b];
            let mut mean_activation = vec![0.0; b];
            for ti in 0..tuple.t {
                for yy in 0..tuple.h {
                    for xx in 0..tuple.w {
                        coarse.position_vector(ti, yy, xx, &mut x);
                        if !self.unit_projection(adapter, &x, &mut u) {
                            u.fill(0.0);
                        }
                        let pos = code.position(ti, yy, xx);
                        for i in 0..b {
                            let q = if code.get_bit(pos, i as u32) { amplitude } else { -amplitude };
                            let diff = u[i] - q;
                            commitment_sum += diff * diff;
                            let p = sigmoid(tau * u[i]);
                            conditional_sum += binary_entropy(p);
                            mean_activation[i] += p / n_pos as f64;
                        }
                    }
                }
            }
            let marginal: f64 = mean_activation.iter().map(|&p| binary_entropy(p)).sum();
            marginal_weighted += marginal * n_pos as f64;
            total_positions += n_pos;
            // Keep the residual chain aligned with the given codes.
            let dequant = self.dequantize_block(code)?;
            let fine = resize_spatial(&dequant, h, w, self.resize_mode)?;
            reconstruction.add_assign(&fine)?;
        }
        if total_positions == 0 {
            return Ok(QuantizerLoss { commitment: 0.0, entropy_penalty: 0.0 });
        }
        let n = total_positions as f64;
        Ok(QuantizerLoss {
            commitment: commitment_sum / n,
            entropy_penalty: (conditional_sum - marginal_weighted) / n,
        })
    }
}

/// Output of `Quantizer::quantizer_loss`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerLoss {
    pub commitment: f64,
    pub entropy_penalty: f64,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + Float::exp(-x))
    } else {
        let e = Float::exp(x);
        e / (1.0 + e)
    }
}

/// Entropy of a Bernoulli(p), in nats; 0 at the endpoints.
#[inline]
pub(crate) fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -(p * Float::ln(p) + (1.0 - p) * Float::ln(1.0 - p))
}

pub mod train;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScaleTuple;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Schedule of identical scales for residual-stacking tests.
    fn flat_schedule(n: usize, t: usize, h: usize, w: usize, bitwidth: u32) -> ScaleSchedule {
        ScaleSchedule {
            tuples: (0..n)
                .map(|_| ScaleTuple { t, h, w, bitwidth, is_repeat: false })
                .collect(),
        }
    }

    fn random_volume(channels: usize, t: usize, h: usize, w: usize, seed: u64) -> LatentVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = LatentVolume::zeros(channels, t, h, w);
        for slot in v.as_mut_slice().iter_mut() {
            *slot = rng.random::<f64>() * 2.0 - 1.0;
        }
        v
    }

    /// Rescales every position vector to the given norm.
    fn set_position_norms(v: &mut LatentVolume, norm: f64) {
        let (channels, t, h, w) = v.shape();
        let mut x = vec![0.0; channels];
        for ti in 0..t {
            for y in 0..h {
                for xx in 0..w {
                    v.position_vector(ti, y, xx, &mut x);
                    let current = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if current > 0.0 {
                        for value in x.iter_mut() {
                            *value *= norm / current;
                        }
                    }
                    v.set_position_vector(ti, y, xx, &x);
                }
            }
        }
    }

    /// Exhaustive nearest-codeword search over all `2^b` sphere codewords.
    fn nearest_codeword_exhaustive(x: &[f64], b: u32) -> u64 {
        let amplitude = 1.0 / (b as f64).sqrt();
        let mut best = (f64::NEG_INFINITY, 0u64);
        for code in 0u64..(1u64 << b) {
            let mut dot = 0.0;
            for (i, &value) in x.iter().enumerate() {
                let q = if code >> i & 1 == 1 { amplitude } else { -amplitude };
                dot += value * q;
            }
            if dot > best.0 {
                best = (dot, code);
            }
        }
        best.1
    }

    #[test]
    fn codeword_vector_quantizes_to_itself() {
        let q = Quantizer::identity(4);
        let v = LatentVolume::from_vec(4, 1, 1, 1, vec![0.5, -0.5, 0.5, -0.5]).unwrap();
        let (codes, dequant) = q.quantize_block(&v, 4).unwrap();
        assert_eq!(codes.code_u64(0), 0b0101);
        assert_eq!(dequant.as_slice(), v.as_slice());
        let residual: f64 =
            v.sub(&dequant).unwrap().as_slice().iter().map(|d| d * d).sum();
        assert_eq!(residual, 0.0);
    }

    #[test]
    fn sign_quantization_matches_exhaustive_search() {
        for &b in &[2u32, 4, 8] {
            let q = Quantizer::identity(b as usize);
            let v = random_volume(b as usize, 2, 5, 5, 40 + b as u64);
            let (codes, _) = q.quantize_block(&v, b).unwrap();
            let mut x = vec![0.0; b as usize];
            for ti in 0..2 {
                for y in 0..5 {
                    for xx in 0..5 {
                        v.position_vector(ti, y, xx, &mut x);
                        let pos = codes.position(ti, y, xx);
                        assert_eq!(
                            codes.code_u64(pos),
                            nearest_codeword_exhaustive(&x, b),
                            "bitwidth {b} position {pos}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn zero_vector_codes_all_ones() {
        let q = Quantizer::identity(3);
        let v = LatentVolume::zeros(3, 1, 1, 1);
        let (codes, dequant) = q.quantize_block(&v, 3).unwrap();
        assert_eq!(codes.code_u64(0), 0b111);
        let amp = 1.0 / 3f64.sqrt();
        for value in dequant.as_slice() {
            assert!((value - amp).abs() < 1e-15);
        }
    }

    #[test]
    fn packed_layout_round_trips() {
        let mut codes = BitTensor::zeros(2, 3, 4, 11);
        assert_eq!(codes.as_bytes().len(), 2 * 2 * 3 * 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values: Vec<u64> = (0..codes.n_positions())
            .map(|_| rng.random::<u64>() & ((1 << 11) - 1))
            .collect();
        for (pos, &value) in values.iter().enumerate() {
            codes.set_code_u64(pos, value);
        }
        for (pos, &value) in values.iter().enumerate() {
            assert_eq!(codes.code_u64(pos), value);
            for bit in 0..11 {
                assert_eq!(codes.get_bit(pos, bit), value >> bit & 1 == 1);
            }
        }
        let rebuilt =
            BitTensor::from_bytes(2, 3, 4, 11, codes.as_bytes().to_vec()).unwrap();
        assert_eq!(rebuilt, codes);
    }

    #[test]
    fn dequantize_inverts_quantize_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = Quantizer::with_adapters(6, &[3], &mut rng);
        let v = random_volume(6, 1, 2, 2, 3);
        let (codes, dequant) = q.quantize_block(&v, 3).unwrap();
        let again = q.dequantize_block(&codes).unwrap();
        assert_eq!(again, dequant);
    }

    #[test]
    fn missing_adapter_is_an_error() {
        let q = Quantizer::identity(8);
        let v = random_volume(8, 1, 1, 1, 0);
        assert_eq!(
            q.quantize_block(&v, 4).unwrap_err(),
            BsqError::MissingAdapter { bitwidth: 4, channels: 8 }
        );
    }

    #[test]
    fn reconstruction_error_non_increasing_over_depth() {
        // Fixed-resolution schedule: every added scale quantizes what is left.
        let schedule = flat_schedule(6, 1, 4, 4, 8);
        let q = Quantizer::identity(8);
        let mut volume = random_volume(8, 1, 4, 4, 99);
        set_position_norms(&mut volume, 5.0);
        let codes = q.encode_pyramid(&volume, &schedule, &SqdMask::all(6)).unwrap();
        assert_eq!(codes.len(), 6);
        let mut previous = f64::INFINITY;
        for depth in 1..=6 {
            let recon = q.decode_pyramid(&codes[..depth], &schedule, (4, 4)).unwrap();
            let err: f64 =
                volume.sub(&recon).unwrap().as_slice().iter().map(|d| d * d).sum();
            assert!(
                err <= previous + 1e-12,
                "depth {depth}: error {err} grew from {previous}"
            );
            previous = err;
        }
    }

    #[test]
    fn empty_prefix_decodes_to_zeros() {
        let schedule = flat_schedule(3, 2, 2, 2, 4);
        let q = Quantizer::identity(4);
        let out = q.decode_pyramid(&[], &schedule, (2, 2)).unwrap();
        assert_eq!(out.shape(), (4, 2, 2, 2));
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropping_last_scale_equals_prefix_encoding() {
        let schedule = flat_schedule(4, 1, 3, 3, 8);
        let q = Quantizer::identity(8);
        let mut volume = random_volume(8, 1, 3, 3, 5);
        set_position_norms(&mut volume, 4.0);
        let full = q.encode_pyramid(&volume, &schedule, &SqdMask::all(4)).unwrap();
        let mut mask = SqdMask::all(4);
        mask.retained[3] = false;
        let dropped = q.encode_pyramid(&volume, &schedule, &mask).unwrap();
        assert_eq!(dropped.len(), 3);
        assert_eq!(&full[..3], &dropped[..]);
    }

    #[test]
    fn sqd_mask_shape_and_rates() {
        let schedule = flat_schedule(6, 1, 2, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        // drop_p = 0 retains everything; drop_p = 1 drops the whole tail.
        let none = sample_sqd(&schedule, 2, 0.0, &mut rng).unwrap();
        assert_eq!(none.retained, vec![true; 6]);
        let all = sample_sqd(&schedule, 2, 1.0, &mut rng).unwrap();
        assert_eq!(all.retained, vec![true, true, true, true, false, false]);
        assert!(all.n_retained() >= 1);
        // Monte Carlo drop rate of the droppable tail approaches drop_p.
        let mut dropped = 0usize;
        let trials = 4000;
        for _ in 0..trials {
            let mask = sample_sqd(&schedule, 2, 0.5, &mut rng).unwrap();
            assert!(mask.retained[..4].iter().all(|&r| r));
            dropped += mask.retained[4..].iter().filter(|&&r| !r).count();
        }
        let rate = dropped as f64 / (2 * trials) as f64;
        assert!((rate - 0.5).abs() < 0.03, "empirical drop rate {rate}");
        // Same seed, same masks.
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            sample_sqd(&schedule, 3, 0.5, &mut r1).unwrap(),
            sample_sqd(&schedule, 3, 0.5, &mut r2).unwrap()
        );
        // A mask may never cover the whole schedule.
        assert_eq!(
            sample_sqd(&schedule, 6, 0.5, &mut rng).unwrap_err(),
            BsqError::DroppableRange { n: 6, len: 6 }
        );
    }

    #[test]
    fn commitment_zero_on_codeword_volume() {
        let schedule = flat_schedule(1, 1, 2, 2, 4);
        let q = Quantizer::identity(4);
        let amp = 0.5;
        let data: Vec<f64> = (0..16).map(|i| if i % 3 == 0 { amp } else { -amp }).collect();
        let volume = LatentVolume::from_vec(4, 1, 2, 2, data).unwrap();
        let codes = q.encode_pyramid(&volume, &schedule, &SqdMask::all(1)).unwrap();
        let loss = q.quantizer_loss(&volume, &codes, &schedule, 10.0).unwrap();
        assert!(loss.commitment.abs() < 1e-24, "commitment {}", loss.commitment);
        assert!(loss.entropy_penalty.is_finite());
    }

    #[test]
    fn identical_positions_maximize_entropy_penalty() {
        let schedule = flat_schedule(1, 1, 4, 4, 4);
        let q = Quantizer::identity(4);
        // Every position carries the same vector: the batch collapses.
        let mut collapsed = LatentVolume::zeros(4, 1, 4, 4);
        for ti in 0..1 {
            for y in 0..4 {
                for x in 0..4 {
                    collapsed.set_position_vector(ti, y, x, &[0.3, -0.2, 0.1, 0.4]);
                }
            }
        }
        let codes = q.encode_pyramid(&collapsed, &schedule, &SqdMask::all(1)).unwrap();
        let collapsed_loss = q.quantizer_loss(&collapsed, &codes, &schedule, 10.0).unwrap();
        assert!(collapsed_loss.entropy_penalty.abs() < 1e-12);
        // A diverse batch sits strictly below the collapse ceiling.
        let diverse = random_volume(4, 1, 4, 4, 17);
        let codes = q.encode_pyramid(&diverse, &schedule, &SqdMask::all(1)).unwrap();
        let diverse_loss = q.quantizer_loss(&diverse, &codes, &schedule, 10.0).unwrap();
        assert!(diverse_loss.entropy_penalty < -1e-3);
    }

    #[test]
    fn entropy_terms_match_direct_estimator() {
        // Single-scale schedule holding 1000 positions at b = 4.
        let schedule = flat_schedule(1, 10, 10, 10, 4);
        let q = Quantizer::identity(4);
        let volume = random_volume(4, 10, 10, 10, 31);
        let codes = q.encode_pyramid(&volume, &schedule, &SqdMask::all(1)).unwrap();
        let tau = 10.0;
        let loss = q.quantizer_loss(&volume, &codes, &schedule, tau).unwrap();

        // Direct estimator: accumulate soft-bit activations position by
        // position, then assemble both entropy terms from those tallies.
        let n = 1000usize;
        let mut x = [0.0; 4];
        let mut activation_sum = [0.0f64; 4];
        let mut entropy_total = 0.0;
        for ti in 0..10 {
            for y in 0..10 {
                for xx in 0..10 {
                    volume.position_vector(ti, y, xx, &mut x);
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    for i in 0..4 {
                        let p = 1.0 / (1.0 + (-tau * x[i] / norm).exp());
                        activation_sum[i] += p;
                        entropy_total += -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
                    }
                }
            }
        }
        let conditional = entropy_total / n as f64;
        let marginal: f64 = activation_sum
            .iter()
            .map(|&s| {
                let p = s / n as f64;
                -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
            })
            .sum();
        let expected = conditional - marginal;
        assert!(
            (loss.entropy_penalty - expected).abs() < 1e-6,
            "{} vs {}",
            loss.entropy_penalty,
            expected
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sign_quantization_is_nearest_codeword(
            b in 2u32..9,
            seed in 0u64..500,
        ) {
            let q = Quantizer::identity(b as usize);
            let v = random_volume(b as usize, 1, 2, 2, seed);
            let (codes, _) = q.quantize_block(&v, b).unwrap();
            let mut x = vec![0.0; b as usize];
            for pos_y in 0..2 {
                for pos_x in 0..2 {
                    v.position_vector(0, pos_y, pos_x, &mut x);
                    let pos = codes.position(0, pos_y, pos_x);
                    prop_assert_eq!(codes.code_u64(pos), nearest_codeword_exhaustive(&x, b));
                }
            }
        }

        #[test]
        fn quantize_dequantize_round_trip_via_codes(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Quantizer::with_adapters(5, &[2, 3], &mut rng);
            for &b in &[2u32, 3, 5] {
                let v = random_volume(5, 1, 2, 3, seed + b as u64);
                let (codes, dequant) = q.quantize_block(&v, b).unwrap();
                prop_assert_eq!(q.dequantize_block(&codes).unwrap(), dequant);
            }
        }

        #[test]
        fn prefix_decode_is_cumulative(seed in 0u64..100, depth in 1usize..5) {
            let schedule = flat_schedule(4, 1, 3, 3, 6);
            let q = Quantizer::identity(6);
            let volume = random_volume(6, 1, 3, 3, seed);
            let codes = q.encode_pyramid(&volume, &schedule, &SqdMask::all(4)).unwrap();
            // Decoding a prefix equals summing the dequantized blocks.
            let recon = q.decode_pyramid(&codes[..depth], &schedule, (3, 3)).unwrap();
            let mut manual = LatentVolume::zeros(6, 1, 3, 3);
            for code in &codes[..depth] {
                manual.add_assign(&q.dequantize_block(code).unwrap()).unwrap();
            }
            for (a, b) in recon.as_slice().iter().zip(manual.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
