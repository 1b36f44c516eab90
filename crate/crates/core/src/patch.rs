//! Patch transform between raw 8-bit RGB video and latent volumes.
//!
//! The fixed mode rearranges `pt x ph x pw` pixel patches into channel
//! vectors (values mapped to `[-1, 1]`), which is exactly invertible. The
//! learned mode additionally applies a linear map into a chosen latent
//! width and a second map back; its round-trip error is a reported metric,
//! never an invariant.

use alloc::vec::Vec;
use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::synth::RawVideo;
use crate::volume::LatentVolume;

/// Errors raised by patchify/unpatchify.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PatchError {
    #[error("video dims ({frames},{height},{width}) not divisible by patch ({pt},{ph},{pw})")]
    Divisibility { frames: usize, height: usize, width: usize, pt: usize, ph: usize, pw: usize },
    #[error("latent has {got} channels, transform expects {expected}")]
    Channels { got: usize, expected: usize },
    #[error("patch dims must be nonzero")]
    ZeroPatch,
}

/// Patch geometry (temporal, vertical, horizontal).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchDims {
    pub pt: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Default for PatchDims {
    /// Desk-scale default `2x4x4` (production target would be `4x16x16`).
    fn default() -> Self {
        Self { pt: 2, ph: 4, pw: 4 }
    }
}

impl PatchDims {
    /// Raw values per patch: `3 * pt * ph * pw`.
    pub fn raw_len(&self) -> usize {
        3 * self.pt * self.ph * self.pw
    }
}

/// Optional linear maps around the rearrangement.
#[derive(Debug, Clone, PartialEq)]
pub enum PatchMode {
    /// Pure rearrangement; latent channels equal the raw patch length.
    Fixed,
    /// `enc: raw_len x d` into the latent, `dec: d x raw_len` back.
    Learned { d: usize, enc: Vec<f64>, dec: Vec<f64> },
}

/// Converts raw video to latent volumes and back.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTransform {
    pub dims: PatchDims,
    pub mode: PatchMode,
}

fn to_unit(byte: u8) -> f64 {
    byte as f64 / 255.0 * 2.0 - 1.0
}

fn to_byte(value: f64) -> u8 {
    let scaled = (value + 1.0) * 0.5 * 255.0;
    Float::round(scaled.clamp(0.0, 255.0)) as u8
}

impl PatchTransform {
    /// Exactly invertible rearrangement at the given patch geometry.
    pub fn fixed(dims: PatchDims) -> Result<Self, PatchError> {
        if dims.pt == 0 || dims.ph == 0 || dims.pw == 0 {
            return Err(PatchError::ZeroPatch);
        }
        Ok(Self { dims, mode: PatchMode::Fixed })
    }

    /// Learned-linear mode with normal-initialized maps into width `d`.
    pub fn learned(dims: PatchDims, d: usize, seed: u64) -> Result<Self, PatchError> {
        if dims.pt == 0 || dims.ph == 0 || dims.pw == 0 || d == 0 {
            return Err(PatchError::ZeroPatch);
        }
        use rand::SeedableRng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = dims.raw_len();
        let scale_enc = 1.0 / (raw as f64).sqrt();
        let scale_dec = 1.0 / (d as f64).sqrt();
        let mut draw = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let v: f64 = rng.sample(StandardNormal);
                    v * scale
                })
                .collect()
        };
        let enc = draw(raw * d, scale_enc);
        let dec = draw(d * raw, scale_dec);
        Ok(Self { dims, mode: PatchMode::Learned { d, enc, dec } })
    }

    /// Latent channel count this transform produces.
    pub fn channels(&self) -> usize {
        match &self.mode {
            PatchMode::Fixed => self.dims.raw_len(),
            PatchMode::Learned { d, .. } => *d,
        }
    }

    fn check_dims(&self, video: &RawVideo) -> Result<(usize, usize, usize), PatchError> {
        let PatchDims { pt, ph, pw } = self.dims;
        if !video.frames.is_multiple_of(pt)
            || !video.height.is_multiple_of(ph)
            || !video.width.is_multiple_of(pw)
        {
            return Err(PatchError::Divisibility {
                frames: video.frames,
                height: video.height,
                width: video.width,
                pt,
                ph,
                pw,
            });
        }
        Ok((video.frames / pt, video.height / ph, video.width / pw))
    }

    /// Raw patch values at one latent position, in `[-1, 1]`, ordered
    /// channel-major then `dt, dy, dx`.
    fn patch_vector(&self, video: &RawVideo, ti: usize, y: usize, x: usize, out: &mut [f64]) {
        let PatchDims { pt, ph, pw } = self.dims;
        let mut i = 0;
        for cc in 0..3 {
            for dt in 0..pt {
                for dy in 0..ph {
                    for dx in 0..pw {
                        let o = video.offset(ti * pt + dt, y * ph + dy, x * pw + dx);
                        out[i] = to_unit(video.data[o + cc]);
                        i += 1;
                    }
                }
            }
        }
    }

    /// Raw video -> latent volume.
    pub fn patchify(&self, video: &RawVideo) -> Result<LatentVolume, PatchError> {
        let (t, h, w) = self.check_dims(video)?;
        let raw_len = self.dims.raw_len();
        let channels = self.channels();
        let mut latent = LatentVolume::zeros(channels, t, h, w);
        let mut raw = alloc::vec![0.0f64; raw_len];
        let mut vec = alloc::vec![0.0f64; channels];
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    self.patch_vector(video, ti, y, x, &mut raw);
                    match &self.mode {
                        PatchMode::Fixed => {
                            latent.set_position_vector(ti, y, x, &raw);
                        }
                        PatchMode::Learned { d, enc, .. } => {
                            for o in 0..*d {
                                let mut acc = 0.0;
                                for (j, &r) in raw.iter().enumerate() {
                                    acc += r * enc[j * d + o];
                                }
                                vec[o] = acc;
                            }
                            latent.set_position_vector(ti, y, x, &vec);
                        }
                    }
                }
            }
        }
        Ok(latent)
    }

    /// Latent volume -> raw video (exact inverse in fixed mode).
    pub fn unpatchify(&self, latent: &LatentVolume) -> Result<RawVideo, PatchError> {
        let (c, t, h, w) = latent.shape();
        if c != self.channels() {
            return Err(PatchError::Channels { got: c, expected: self.channels() });
        }
        let PatchDims { pt, ph, pw } = self.dims;
        let raw_len = self.dims.raw_len();
        let mut video = RawVideo::black(w * pw, h * ph, t * pt);
        let mut vec = alloc::vec![0.0f64; c];
        let mut raw = alloc::vec![0.0f64; raw_len];
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    latent.position_vector(ti, y, x, &mut vec);
                    let raw_vals: &[f64] = match &self.mode {
                        PatchMode::Fixed => &vec,
                        PatchMode::Learned { d, dec, .. } => {
                            for (o, slot) in raw.iter_mut().enumerate() {
                                let mut acc = 0.0;
                                for j in 0..*d {
                                    acc += vec[j] * dec[j * raw_len + o];
                                }
                                *slot = acc;
                            }
                            &raw
                        }
                    };
                    let mut i = 0;
                    for cc in 0..3 {
                        for dt in 0..pt {
                            for dy in 0..ph {
                                for dx in 0..pw {
                                    let o =
                                        video.offset(ti * pt + dt, y * ph + dy, x * pw + dx);
                                    video.data[o + cc] = to_byte(raw_vals[i]);
                                    i += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(video)
    }

    /// Mean squared pixel error (0..255 scale) of one round trip — the
    /// tracked metric for learned mode (zero in fixed mode).
    pub fn round_trip_mse(&self, video: &RawVideo) -> Result<f64, PatchError> {
        let back = self.unpatchify(&self.patchify(video)?)?;
        let mut err = 0.0f64;
        for (&a, &b) in video.data.iter().zip(&back.data) {
            let d = a as f64 - b as f64;
            err += d * d;
        }
        Ok(err / video.data.len() as f64)
    }

    /// Gradient-descent fit of the decoder map to invert the encoder on
    /// the given videos (least squares, so this is convex). No-op in
    /// fixed mode.
    pub fn fit_decoder(&mut self, videos: &[RawVideo], steps: usize, lr: f64) -> Result<(), PatchError> {
        let dims = self.dims;
        let raw_len = dims.raw_len();
        let (d, enc, dec) = match &mut self.mode {
            PatchMode::Fixed => return Ok(()),
            PatchMode::Learned { d, enc, dec } => (*d, enc.clone(), dec),
        };
        // Collect latent/raw training pairs.
        let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        let mut raw = alloc::vec![0.0f64; raw_len];
        for video in videos {
            let pt = dims.pt;
            let ph = dims.ph;
            let pw = dims.pw;
            if !video.frames.is_multiple_of(pt)
                || !video.height.is_multiple_of(ph)
                || !video.width.is_multiple_of(pw)
            {
                return Err(PatchError::Divisibility {
                    frames: video.frames,
                    height: video.height,
                    width: video.width,
                    pt,
                    ph,
                    pw,
                });
            }
            for ti in 0..video.frames / pt {
                for y in 0..video.height / ph {
                    for x in 0..video.width / pw {
                        let mut i = 0;
                        for cc in 0..3 {
                            for dt in 0..pt {
                                for dy in 0..ph {
                                    for dx in 0..pw {
                                        let o = video.offset(
                                            ti * pt + dt,
                                            y * ph + dy,
                                            x * pw + dx,
                                        );
                                        raw[i] = to_unit(video.data[o + cc]);
                                        i += 1;
                                    }
                                }
                            }
                        }
                        let mut latent = alloc::vec![0.0f64; d];
                        for (o, slot) in latent.iter_mut().enumerate() {
                            let mut acc = 0.0;
                            for (j, &r) in raw.iter().enumerate() {
                                acc += r * enc[j * d + o];
                            }
                            *slot = acc;
                        }
                        pairs.push((latent, raw.clone()));
                    }
                }
            }
        }
        if pairs.is_empty() {
            return Ok(());
        }
        let norm = 1.0 / pairs.len() as f64;
        // Mean squared latent norm bounds the least-squares curvature, so
        // scaling the step by it keeps any `lr <= 1` stable.
        let mean_sq: f64 =
            pairs.iter().map(|(z, _)| z.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
                * norm;
        let step_size = lr / (2.0 * mean_sq).max(1e-12);
        for _ in 0..steps {
            let mut grad = alloc::vec![0.0f64; d * raw_len];
            for (latent, target) in &pairs {
                for o in 0..raw_len {
                    let mut pred = 0.0;
                    for j in 0..d {
                        pred += latent[j] * dec[j * raw_len + o];
                    }
                    let err = (pred - target[o]) * 2.0 * norm;
                    for j in 0..d {
                        grad[j * raw_len + o] += err * latent[j];
                    }
                }
            }
            for (wv, g) in dec.iter_mut().zip(&grad) {
                *wv -= step_size * g;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_scene, sample_scene, SceneTemplate};
    use rand::SeedableRng;

    fn random_video(seed: u64, frames: usize, height: usize, width: usize) -> RawVideo {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut video = RawVideo::black(width, height, frames);
        for byte in video.data.iter_mut() {
            *byte = rng.random_range(0..=255u16) as u8;
        }
        video
    }

    #[test]
    fn fixed_mode_round_trip_is_exact() {
        let video = random_video(1, 4, 8, 8);
        let transform = PatchTransform::fixed(PatchDims::default()).unwrap();
        let latent = transform.patchify(&video).unwrap();
        assert_eq!(latent.shape(), (96, 2, 2, 2));
        let back = transform.unpatchify(&latent).unwrap();
        assert_eq!(back, video);
        assert_eq!(transform.round_trip_mse(&video).unwrap(), 0.0);
    }

    #[test]
    fn toy_patch_dims_give_96_channels() {
        let transform = PatchTransform::fixed(PatchDims::default()).unwrap();
        assert_eq!(transform.channels(), 96);
        // Default synthetic template patchifies into 9 latent frames.
        let template = SceneTemplate::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let video = render_scene(&sample_scene(&template, &mut rng));
        let latent = transform.patchify(&video).unwrap();
        assert_eq!(latent.shape(), (96, 9, 8, 8));
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        let video = random_video(3, 3, 8, 8); // 3 frames, pt = 2
        let transform = PatchTransform::fixed(PatchDims::default()).unwrap();
        assert!(matches!(
            transform.patchify(&video),
            Err(PatchError::Divisibility { .. })
        ));
    }

    #[test]
    fn values_map_into_unit_range() {
        let video = random_video(4, 2, 4, 4);
        let transform = PatchTransform::fixed(PatchDims::default()).unwrap();
        let latent = transform.patchify(&video).unwrap();
        assert!(latent.as_slice().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        // Extremes map exactly.
        assert_eq!(to_unit(0), -1.0);
        assert_eq!(to_unit(255), 1.0);
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
    }

    #[test]
    fn learned_mode_round_trip_improves_with_fitting() {
        let template = SceneTemplate { width: 16, height: 16, frames: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let videos: Vec<RawVideo> =
            (0..4).map(|_| render_scene(&sample_scene(&template, &mut rng))).collect();
        let mut transform = PatchTransform::learned(PatchDims::default(), 32, 6).unwrap();
        assert_eq!(transform.channels(), 32);
        let before = transform.round_trip_mse(&videos[0]).unwrap();
        transform.fit_decoder(&videos, 120, 0.9).unwrap();
        let after = transform.round_trip_mse(&videos[0]).unwrap();
        assert!(after.is_finite());
        assert!(after < before, "fit did not reduce error: {before} -> {after}");
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let transform = PatchTransform::fixed(PatchDims::default()).unwrap();
        let latent = LatentVolume::zeros(5, 1, 2, 2);
        assert!(matches!(
            transform.unpatchify(&latent),
            Err(PatchError::Channels { got: 5, expected: 96 })
        ));
    }
}
