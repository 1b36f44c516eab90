//! Gradient-based training of the quantizer's channel adapters.
//!
//! The encode path is differentiable everywhere except the sign function,
//! which uses the straight-through convention: the codeword's gradient passes
//! to the pre-quantization unit vector unchanged. Reconstruction, commitment
//! (stop-gradient on the codeword), and the soft-bit entropy penalty all flow
//! back through the unit-sphere projection, the adapters, and the resampling
//! operators via their adjoints.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::bsq::{binary_entropy, sigmoid, BsqError, Quantizer, SqdMask};
use crate::optim::MomentOptimizer;
use crate::schedule::ScaleSchedule;
use crate::volume::{resize_spatial, resize_spatial_adjoint, LatentVolume};

/// Loss weights for adapter training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenizerLossWeights {
    pub recon: f64,
    pub commitment: f64,
    pub entropy: f64,
    /// Soft-bit temperature for the entropy terms.
    pub tau: f64,
}

impl Default for TokenizerLossWeights {
    fn default() -> Self {
        Self { recon: 1.0, commitment: 0.25, entropy: 0.1, tau: 10.0 }
    }
}

/// Loss values for one volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenizerLoss {
    pub recon: f64,
    pub commitment: f64,
    pub entropy_penalty: f64,
    pub total: f64,
}

/// Per-adapter gradients, keyed by bitwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub by_bitwidth: BTreeMap<u32, AdapterGrad>,
}

/// Gradient of one adapter's two matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub w_in: Vec<f64>,
    pub w_out: Vec<f64>,
}

impl AdapterGrads {
    /// Zero gradients matching the quantizer's adapters.
    pub fn zeros_like(quantizer: &Quantizer) -> Self {
        let by_bitwidth = quantizer
            .adapter_bitwidths()
            .into_iter()
            .map(|b| {
                let adapter = quantizer.adapter(b).unwrap();
                (
                    b,
                    AdapterGrad {
                        w_in: vec![0.0; adapter.w_in.len()],
                        w_out: vec![0.0; adapter.w_out.len()],
                    },
                )
            })
            .collect();
        Self { by_bitwidth }
    }

    /// `self += other * scale` (batch averaging).
    pub fn accumulate(&mut self, other: &AdapterGrads, scale: f64) {
        for (bitwidth, grad) in &other.by_bitwidth {
            let slot = self.by_bitwidth.get_mut(bitwidth).expect("adapter sets differ");
            for (a, b) in slot.w_in.iter_mut().zip(&grad.w_in) {
                *a += b * scale;
            }
            for (a, b) in slot.w_out.iter_mut().zip(&grad.w_out) {
                *a += b * scale;
            }
        }
    }
}

/// Saved forward state for one retained scale.
struct ScaleTrace {
    scale_index: usize,
    bitwidth: u32,
    t: usize,
    h: usize,
    w: usize,
    /// Coarse pre-projection residual, d channels.
    x: LatentVolume,
    /// Flattened per-position unit vectors (n_pos * b).
    u: Vec<f64>,
    /// Per-position projection norms (0 marks a zero projection).
    norms: Vec<f64>,
    /// Flattened per-position codewords (n_pos * b).
    q: Vec<f64>,
    /// Per-bit mean soft activation over the scale's positions.
    mean_activation: Vec<f64>,
}

/// Runs the differentiable encode path and returns the loss together with
/// the adapter gradients for one volume.
pub fn tokenizer_loss_and_grad(
    quantizer: &Quantizer,
    volume: &LatentVolume,
    schedule: &ScaleSchedule,
    sqd: &SqdMask,
    weights: &TokenizerLossWeights,
) -> Result<(TokenizerLoss, AdapterGrads), BsqError> {
    if sqd.len() != schedule.tuples.len() {
        return Err(BsqError::MaskLength { got: sqd.len(), len: schedule.tuples.len() });
    }
    if sqd.n_retained() == 0 {
        return Err(BsqError::NothingRetained);
    }
    let first = schedule.tuples.first().ok_or(BsqError::EmptySchedule)?;
    let (target_h, target_w) = schedule.largest().unwrap();
    let (channels, vt, vh, vw) = volume.shape();
    if channels != quantizer.channels() {
        return Err(BsqError::ChannelMismatch { got: channels, expected: quantizer.channels() });
    }
    if (vt, vh, vw) != (first.t, target_h, target_w) {
        return Err(BsqError::DimsMismatch {
            t: vt,
            h: vh,
            w: vw,
            st: first.t,
            sh: target_h,
            sw: target_w,
        });
    }

    // Forward pass, recording what the backward pass needs.
    let mode = crate::volume::ResizeMode::Bilinear;
    let mut reconstruction = LatentVolume::zeros(channels, vt, target_h, target_w);
    let mut traces: Vec<ScaleTrace> = Vec::new();
    let mut total_positions = 0usize;
    for (scale_index, (tuple, &retained)) in
        schedule.tuples.iter().zip(&sqd.retained).enumerate()
    {
        if !retained {
            continue;
        }
        let b = tuple.bitwidth as usize;
        let amplitude = 1.0 / (b as f64).sqrt();
        let residual = volume.sub(&reconstruction)?;
        let coarse = resize_spatial(&residual, tuple.h, tuple.w, mode)?;
        let n_pos = tuple.tokens();
        let adapter = quantizer.adapter(tuple.bitwidth);
        if adapter.is_none() && b != channels {
            return Err(BsqError::MissingAdapter { bitwidth: tuple.bitwidth, channels });
        }
        let mut trace = ScaleTrace {
            scale_index,
            bitwidth: tuple.bitwidth,
            t: tuple.t,
            h: tuple.h,
            w: tuple.w,
            x: coarse,
            u: vec![0.0; n_pos * b],
            norms: vec![0.0; n_pos],
            q: vec![0.0; n_pos * b],
            mean_activation: vec![0.0; b],
        };
        let mut xv = vec![0.0; channels];
        let mut y = vec![0.0; channels];
        let mut dequant = LatentVolume::zeros(channels, tuple.t, tuple.h, tuple.w);
        for ti in 0..tuple.t {
            for yy in 0..tuple.h {
                for xx in 0..tuple.w {
                    let pos = (ti * tuple.h + yy) * tuple.w + xx;
                    trace.x.position_vector(ti, yy, xx, &mut xv);
                    let u = &mut trace.u[pos * b..(pos + 1) * b];
                    match adapter {
                        Some(a) => a.project(&xv, u),
                        None => u.copy_from_slice(&xv),
                    }
                    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                    trace.norms[pos] = norm;
                    if norm > 0.0 {
                        for value in u.iter_mut() {
                            *value /= norm;
                        }
                    } else {
                        u.fill(0.0);
                    }
                    let q = &mut trace.q[pos * b..(pos + 1) * b];
                    for i in 0..b {
                        q[i] = if u[i] >= 0.0 { amplitude } else { -amplitude };
                        trace.mean_activation[i] += sigmoid(weights.tau * u[i]) / n_pos as f64;
                    }
                    match adapter {
                        Some(a) => a.backproject(q, &mut y),
                        None => y.copy_from_slice(q),
                    }
                    dequant.set_position_vector(ti, yy, xx, &y);
                }
            }
        }
        let fine = resize_spatial(&dequant, target_h, target_w, mode)?;
        reconstruction.add_assign(&fine)?;
        total_positions += n_pos;
        traces.push(trace);
    }

    // Loss terms.
    let n_elem = (channels * vt * target_h * target_w) as f64;
    let n_pos_total = total_positions as f64;
    let error = volume.sub(&reconstruction)?;
    let recon: f64 =
        error.as_slice().iter().map(|d| d * d).sum::<f64>() / n_elem;
    let mut commitment = 0.0;
    let mut conditional = 0.0;
    let mut marginal_weighted = 0.0;
    for trace in &traces {
        let b = trace.bitwidth as usize;
        let n_pos = trace.norms.len();
        for pos in 0..n_pos {
            for i in 0..b {
                let diff = trace.u[pos * b + i] - trace.q[pos * b + i];
                commitment += diff * diff;
                conditional += binary_entropy(sigmoid(weights.tau * trace.u[pos * b + i]));
            }
        }
        let marginal: f64 = trace.mean_activation.iter().map(|&p| binary_entropy(p)).sum();
        marginal_weighted += marginal * n_pos as f64;
    }
    commitment /= n_pos_total;
    let entropy_penalty = (conditional - marginal_weighted) / n_pos_total;
    let total = weights.recon * recon
        + weights.commitment * commitment
        + weights.entropy * entropy_penalty;

    // Backward pass: `g` carries dL/d(reconstruction_k) while walking the
    // scales in reverse.
    let mut grads = AdapterGrads::zeros_like(quantizer);
    let mut g = LatentVolume::zeros(channels, vt, target_h, target_w);
    for (slot, (&rec, &target)) in g
        .as_mut_slice()
        .iter_mut()
        .zip(reconstruction.as_slice().iter().zip(volume.as_slice()))
    {
        *slot = weights.recon * 2.0 * (rec - target) / n_elem;
    }
    let clamp = |p: f64| p.clamp(1e-12, 1.0 - 1e-12);
    for trace in traces.iter().rev() {
        let b = trace.bitwidth as usize;
        let adapter = quantizer.adapter(trace.bitwidth);
        // dL/dy through the upsample adjoint.
        let dy_vol = resize_spatial_adjoint(&g, trace.h, trace.w, mode)?;
        let mut dx_vol = LatentVolume::zeros(channels, trace.t, trace.h, trace.w);
        let mut dy = vec![0.0; channels];
        let mut dq = vec![0.0; b];
        let mut du = vec![0.0; b];
        let mut dz = vec![0.0; b];
        let mut dx = vec![0.0; channels];
        let mut xv = vec![0.0; channels];
        for ti in 0..trace.t {
            for yy in 0..trace.h {
                for xx in 0..trace.w {
                    let pos = (ti * trace.h + yy) * trace.w + xx;
                    let u = &trace.u[pos * b..(pos + 1) * b];
                    let q = &trace.q[pos * b..(pos + 1) * b];
                    dy_vol.position_vector(ti, yy, xx, &mut dy);
                    // y = w_out q: accumulate dW_out, push into dq.
                    match adapter {
                        Some(a) => {
                            let grad = grads.by_bitwidth.get_mut(&trace.bitwidth).unwrap();
                            for (grow, &dyr) in grad.w_out.chunks_exact_mut(b).zip(&dy) {
                                for (slot, &qc) in grow.iter_mut().zip(q) {
                                    *slot += dyr * qc;
                                }
                            }
                            dq.fill(0.0);
                            for (wrow, &dyr) in a.w_out.chunks_exact(b).zip(&dy) {
                                for (slot, &wv) in dq.iter_mut().zip(wrow) {
                                    *slot += wv * dyr;
                                }
                            }
                        }
                        None => dq.copy_from_slice(&dy),
                    }
                    // Straight-through sign, then commitment and entropy.
                    for i in 0..b {
                        let p = clamp(sigmoid(weights.tau * u[i]));
                        let p_bar = clamp(trace.mean_activation[i]);
                        let d_entropy = weights.tau
                            * p
                            * (1.0 - p)
                            * (Float::ln((1.0 - p) / p) - Float::ln((1.0 - p_bar) / p_bar))
                            / n_pos_total;
                        du[i] = dq[i]
                            + weights.commitment * 2.0 * (u[i] - q[i]) / n_pos_total
                            + weights.entropy * d_entropy;
                    }
                    // u = z/|z|: dz = (du - u (u . du)) / |z|.
                    let norm = trace.norms[pos];
                    if norm > 0.0 {
                        let dot: f64 = u.iter().zip(&du).map(|(a, b)| a * b).sum();
                        for i in 0..b {
                            dz[i] = (du[i] - u[i] * dot) / norm;
                        }
                    } else {
                        dz.fill(0.0);
                    }
                    // z = w_in x: accumulate dW_in, push into dx.
                    trace.x.position_vector(ti, yy, xx, &mut xv);
                    match adapter {
                        Some(a) => {
                            let grad = grads.by_bitwidth.get_mut(&trace.bitwidth).unwrap();
                            for (grow, &dzr) in grad.w_in.chunks_exact_mut(channels).zip(&dz) {
                                for (slot, &xc) in grow.iter_mut().zip(&xv) {
                                    *slot += dzr * xc;
                                }
                            }
                            dx.fill(0.0);
                            for (wrow, &dzr) in a.w_in.chunks_exact(channels).zip(&dz) {
                                for (slot, &wv) in dx.iter_mut().zip(wrow) {
                                    *slot += wv * dzr;
                                }
                            }
                        }
                        None => dx.copy_from_slice(&dz),
                    }
                    dx_vol.set_position_vector(ti, yy, xx, &dx);
                }
            }
        }
        // residual_k = down(volume - reconstruction_{k-1}): the adjoint of
        // the downsample feeds back negatively into the running gradient.
        let dresid = resize_spatial_adjoint(&dx_vol, target_h, target_w, mode)?;
        for (slot, d) in g.as_mut_slice().iter_mut().zip(dresid.as_slice()) {
            *slot -= d;
        }
        let _ = trace.scale_index;
    }

    Ok((TokenizerLoss { recon, commitment, entropy_penalty, total }, grads))
}

/// Moment-optimizer state for every adapter of a quantizer.
pub struct AdapterTrainer {
    opts: BTreeMap<u32, (MomentOptimizer<f64>, MomentOptimizer<f64>)>,
}

impl AdapterTrainer {
    pub fn new(quantizer: &Quantizer, lr: f64) -> Self {
        let opts = quantizer
            .adapter_bitwidths()
            .into_iter()
            .map(|b| {
                let adapter = quantizer.adapter(b).unwrap();
                (
                    b,
                    (
                        MomentOptimizer::new(adapter.w_in.len(), lr),
                        MomentOptimizer::new(adapter.w_out.len(), lr),
                    ),
                )
            })
            .collect();
        Self { opts }
    }

    /// Applies one update from accumulated gradients.
    pub fn step(&mut self, quantizer: &mut Quantizer, grads: &AdapterGrads) {
        for (bitwidth, grad) in &grads.by_bitwidth {
            let (opt_in, opt_out) = self.opts.get_mut(bitwidth).expect("adapter sets differ");
            let adapter = quantizer.adapter_mut(*bitwidth).expect("adapter sets differ");
            opt_in.step(&mut adapter.w_in, &grad.w_in);
            opt_out.step(&mut adapter.w_out, &grad.w_out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScaleTuple;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Single-scale schedule: with no later scale, no gradient re-enters
    /// through the sign function, so the straight-through surrogate plays no
    /// role and finite differences are exact.
    fn single_scale_schedule(bitwidth: u32) -> ScaleSchedule {
        ScaleSchedule {
            tuples: vec![ScaleTuple { t: 1, h: 2, w: 2, bitwidth, is_repeat: false }],
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

    /// Central finite difference of the total loss along one parameter.
    fn numeric_grad(
        quantizer: &Quantizer,
        volume: &LatentVolume,
        schedule: &ScaleSchedule,
        weights: &TokenizerLossWeights,
        bitwidth: u32,
        output_matrix: bool,
        index: usize,
    ) -> f64 {
        let step = 1e-6;
        let evaluate = |delta: f64| {
            let mut q = quantizer.clone();
            let adapter = q.adapter_mut(bitwidth).unwrap();
            if output_matrix {
                adapter.w_out[index] += delta;
            } else {
                adapter.w_in[index] += delta;
            }
            let sqd = SqdMask::all(schedule.tuples.len());
            let (loss, _) =
                tokenizer_loss_and_grad(&q, volume, schedule, &sqd, weights).unwrap();
            loss.total
        };
        (evaluate(step) - evaluate(-step)) / (2.0 * step)
    }

    #[test]
    fn output_matrix_gradient_matches_finite_differences() {
        // Only the reconstruction term touches w_out, and the codewords do
        // not depend on it, so the analytic gradient is exact.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let quantizer = Quantizer::with_adapters(5, &[3], &mut rng);
        let schedule = single_scale_schedule(3);
        let volume = random_volume(5, 1, 2, 2, 77);
        let weights = TokenizerLossWeights::default();
        let sqd = SqdMask::all(1);
        let (_, grads) =
            tokenizer_loss_and_grad(&quantizer, &volume, &schedule, &sqd, &weights).unwrap();
        let analytic = &grads.by_bitwidth[&3].w_out;
        for (index, &grad) in analytic.iter().enumerate() {
            let numeric =
                numeric_grad(&quantizer, &volume, &schedule, &weights, 3, true, index);
            let denom = grad.abs().max(numeric.abs()).max(1e-6);
            let rel = (grad - numeric).abs() / denom;
            assert!(rel < 1e-6, "w_out[{index}]: analytic {grad} vs numeric {numeric}");
        }
    }

    #[test]
    fn input_matrix_gradient_matches_finite_differences_on_smooth_terms() {
        // With the reconstruction weight off, the loss reaches w_in only
        // through the unit projection (commitment + entropy), which is
        // differentiable wherever no sign flips; the straight-through
        // surrogate plays no role and finite differences must agree.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let quantizer = Quantizer::with_adapters(5, &[3], &mut rng);
        let schedule = single_scale_schedule(3);
        let volume = random_volume(5, 1, 2, 2, 78);
        let weights =
            TokenizerLossWeights { recon: 0.0, commitment: 0.25, entropy: 0.1, tau: 10.0 };
        let sqd = SqdMask::all(1);
        let (_, grads) =
            tokenizer_loss_and_grad(&quantizer, &volume, &schedule, &sqd, &weights).unwrap();
        let analytic = &grads.by_bitwidth[&3].w_in;
        for (index, &grad) in analytic.iter().enumerate() {
            let numeric =
                numeric_grad(&quantizer, &volume, &schedule, &weights, 3, false, index);
            let denom = grad.abs().max(numeric.abs()).max(1e-6);
            let rel = (grad - numeric).abs() / denom;
            assert!(rel < 1e-5, "w_in[{index}]: analytic {grad} vs numeric {numeric}");
        }
    }

    #[test]
    fn training_reduces_reconstruction_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut quantizer = Quantizer::with_adapters(6, &[4], &mut rng);
        let schedule = ScaleSchedule {
            tuples: vec![
                ScaleTuple { t: 2, h: 1, w: 1, bitwidth: 4, is_repeat: false },
                ScaleTuple { t: 2, h: 2, w: 2, bitwidth: 4, is_repeat: false },
                ScaleTuple { t: 2, h: 3, w: 3, bitwidth: 4, is_repeat: false },
            ],
        };
        let volumes: Vec<LatentVolume> =
            (0..4).map(|i| random_volume(6, 2, 3, 3, 100 + i)).collect();
        let weights = TokenizerLossWeights::default();
        let mut trainer = AdapterTrainer::new(&quantizer, 3e-3);
        let sqd = SqdMask::all(3);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..80 {
            let mut batch_grads = AdapterGrads::zeros_like(&quantizer);
            let mut batch_loss = 0.0;
            for volume in &volumes {
                let (loss, grads) =
                    tokenizer_loss_and_grad(&quantizer, volume, &schedule, &sqd, &weights)
                        .unwrap();
                batch_grads.accumulate(&grads, 1.0 / volumes.len() as f64);
                batch_loss += loss.recon / volumes.len() as f64;
            }
            trainer.step(&mut quantizer, &batch_grads);
            first.get_or_insert(batch_loss);
            last = batch_loss;
        }
        let first = first.unwrap();
        assert!(
            last < first * 0.9,
            "reconstruction did not improve: {first} -> {last}"
        );
    }

    #[test]
    fn skipped_scales_carry_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let quantizer = Quantizer::with_adapters(4, &[2], &mut rng);
        // Two-bitwidth schedule: dropping the b=2 scale must zero its grads.
        let schedule = ScaleSchedule {
            tuples: vec![
                ScaleTuple { t: 1, h: 1, w: 1, bitwidth: 4, is_repeat: false },
                ScaleTuple { t: 1, h: 2, w: 2, bitwidth: 2, is_repeat: false },
            ],
        };
        let volume = random_volume(4, 1, 2, 2, 9);
        let sqd = SqdMask { retained: vec![true, false] };
        let (_, grads) = tokenizer_loss_and_grad(
            &quantizer,
            &volume,
            &schedule,
            &sqd,
            &TokenizerLossWeights::default(),
        )
        .unwrap();
        assert!(grads.by_bitwidth[&2].w_in.iter().all(|&g| g == 0.0));
        assert!(grads.by_bitwidth[&2].w_out.iter().all(|&g| g == 0.0));
    }
}
