//! Binary file containers: latent volumes (ISVL), token pyramids (ISTK),
//! checkpoints (ISCK), raw videos (ISRV), and training-pair dumps (ISBC).
//! All integers are little-endian; every container opens with a four-byte
//! magic so files are self-identifying.

use std::fs;
use std::path::Path;

use stpyr_core::bsq::BitTensor;
use stpyr_core::volume::LatentVolume;
use stpyr_core::synth::RawVideo;

/// Errors while reading or writing container files.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected}, found {found}")]
    Magic { expected: &'static str, found: String },
    #[error("unsupported {format} version {version}")]
    Version { format: &'static str, version: u32 },
    #[error("file truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("invalid field {what}: {value}")]
    Field { what: &'static str, value: u64 },
    #[error("volume rejected: {0}")]
    Volume(#[from] stpyr_core::volume::VolumeError),
    #[error("codes rejected: {0}")]
    Codes(#[from] stpyr_core::bsq::BsqError),
}

/// Byte-level cursor over a read buffer.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated { what })?;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated { what });
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn magic(&mut self, expected: &'static str) -> Result<(), FormatError> {
        let got = self.take(4, "magic")?;
        if got != expected.as_bytes() {
            return Err(FormatError::Magic {
                expected,
                found: String::from_utf8_lossy(got).into_owned(),
            });
        }
        Ok(())
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, FormatError> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    fn f32(&mut self, what: &'static str) -> Result<f32, FormatError> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes(b.try_into().expect("four bytes")))
    }
}

fn push_u32(out: &mut Vec<u8>, value: u32) {
    out.extend_from_slice(&value.to_le_bytes());
}

fn push_u16(out: &mut Vec<u8>, value: u16) {
    out.extend_from_slice(&value.to_le_bytes());
}

/// Reads a whole file, wrapping IO errors with the path.
pub fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(|source| FormatError::Io { path: path.display().to_string(), source })
}

/// Writes a whole file, wrapping IO errors with the path.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    fs::write(path, bytes)
        .map_err(|source| FormatError::Io { path: path.display().to_string(), source })
}

// ---------------------------------------------------------------- ISVL ----

/// Serializes one latent volume: magic `ISVL`, u32 version=1, u32 d/t/h/w,
/// then `d*t*h*w` f64 values in (c,t,h,w) row-major order.
pub fn encode_isvl(volume: &LatentVolume) -> Vec<u8> {
    let (d, t, h, w) = volume.shape();
    let mut out = Vec::with_capacity(24 + volume.as_slice().len() * 8);
    out.extend_from_slice(b"ISVL");
    push_u32(&mut out, 1);
    for dim in [d, t, h, w] {
        push_u32(&mut out, dim as u32);
    }
    for &value in volume.as_slice() {
        out.extend_from_slice(&value.to_le_bytes());
    }
    out
}

/// Parses one ISVL volume from the cursor position.
fn decode_isvl_at(reader: &mut Reader) -> Result<LatentVolume, FormatError> {
    reader.magic("ISVL")?;
    let version = reader.u32("ISVL version")?;
    if version != 1 {
        return Err(FormatError::Version { format: "ISVL", version });
    }
    let d = reader.u32("ISVL channels")? as usize;
    let t = reader.u32("ISVL frames")? as usize;
    let h = reader.u32("ISVL height")? as usize;
    let w = reader.u32("ISVL width")? as usize;
    let len = d
        .checked_mul(t)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or(FormatError::Field { what: "ISVL dims", value: d as u64 })?;
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(reader.f64("ISVL data")?);
    }
    Ok(LatentVolume::from_vec(d, t, h, w, data)?)
}

/// Parses a standalone ISVL buffer.
pub fn decode_isvl(bytes: &[u8]) -> Result<LatentVolume, FormatError> {
    decode_isvl_at(&mut Reader::new(bytes))
}

// ---------------------------------------------------------------- ISTK ----

/// One pyramid inside a token file: per-scale headers plus the codes of the
/// retained scales in schedule order.
#[derive(Debug, Clone, PartialEq)]
pub struct IstkPyramid {
    /// Per scale: (t, h, w, bitwidth, retained).
    pub scales: Vec<(usize, usize, usize, u32, bool)>,
    /// Codes of the retained scales, in schedule order.
    pub codes: Vec<BitTensor>,
}

/// A full token file: one entry per pyramid in sequence order.
#[derive(Debug, Clone, PartialEq)]
pub struct IstkFile {
    pub pyramids: Vec<IstkPyramid>,
}

impl IstkFile {
    /// All retained codes across pyramids, flat in sequence order.
    pub fn flat_codes(&self) -> Vec<BitTensor> {
        self.pyramids.iter().flat_map(|p| p.codes.iter().cloned()).collect()
    }
}

/// Serializes token pyramids: magic `ISTK`, u32 version=1, u32 pyramid
/// count, then per pyramid a u32 scale count, per scale (u16 t, u16 h,
/// u16 w, u16 bitwidth, u8 retained), then the packed code bytes of that
/// pyramid's retained scales in schedule order.
pub fn encode_istk(file: &IstkFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"ISTK");
    push_u32(&mut out, 1);
    push_u32(&mut out, file.pyramids.len() as u32);
    for pyramid in &file.pyramids {
        push_u32(&mut out, pyramid.scales.len() as u32);
        for &(t, h, w, bitwidth, retained) in &pyramid.scales {
            push_u16(&mut out, t as u16);
            push_u16(&mut out, h as u16);
            push_u16(&mut out, w as u16);
            push_u16(&mut out, bitwidth as u16);
            out.push(u8::from(retained));
        }
        for codes in &pyramid.codes {
            out.extend_from_slice(codes.as_bytes());
        }
    }
    out
}

/// Parses an ISTK buffer from the cursor position.
fn decode_istk_at(reader: &mut Reader) -> Result<IstkFile, FormatError> {
    reader.magic("ISTK")?;
    let version = reader.u32("ISTK version")?;
    if version != 1 {
        return Err(FormatError::Version { format: "ISTK", version });
    }
    let n_pyramids = reader.u32("ISTK pyramid count")? as usize;
    let mut pyramids = Vec::with_capacity(n_pyramids);
    for _ in 0..n_pyramids {
        let n_scales = reader.u32("ISTK scale count")? as usize;
        let mut scales = Vec::with_capacity(n_scales);
        for _ in 0..n_scales {
            let t = reader.u16("ISTK scale t")? as usize;
            let h = reader.u16("ISTK scale h")? as usize;
            let w = reader.u16("ISTK scale w")? as usize;
            let bitwidth = reader.u16("ISTK bitwidth")? as u32;
            let retained = match reader.u8("ISTK retained flag")? {
                0 => false,
                1 => true,
                other => {
                    return Err(FormatError::Field {
                        what: "ISTK retained flag",
                        value: other as u64,
                    })
                }
            };
            scales.push((t, h, w, bitwidth, retained));
        }
        let mut codes = Vec::new();
        for &(t, h, w, bitwidth, retained) in &scales {
            if !retained {
                continue;
            }
            let n_bytes = BitTensor::bytes_per_code(bitwidth) * t * h * w;
            let bytes = reader.take(n_bytes, "ISTK codes")?.to_vec();
            codes.push(BitTensor::from_bytes(t, h, w, bitwidth, bytes)?);
        }
        pyramids.push(IstkPyramid { scales, codes });
    }
    Ok(IstkFile { pyramids })
}

/// Parses a standalone ISTK buffer.
pub fn decode_istk(bytes: &[u8]) -> Result<IstkFile, FormatError> {
    decode_istk_at(&mut Reader::new(bytes))
}

// ---------------------------------------------------------------- ISCK ----

/// A checkpoint: the run configuration echoed as text plus named f32 blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct IsckFile {
    pub config_text: String,
    pub blobs: Vec<(String, Vec<f32>)>,
}

/// Serializes a checkpoint: magic `ISCK`, u32 version=1, u32 config byte
/// length + bytes, u32 blob count, then per blob u32 name length + name,
/// u32 value count, f32 values.
pub fn encode_isck(file: &IsckFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"ISCK");
    push_u32(&mut out, 1);
    push_u32(&mut out, file.config_text.len() as u32);
    out.extend_from_slice(file.config_text.as_bytes());
    push_u32(&mut out, file.blobs.len() as u32);
    for (name, values) in &file.blobs {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, values.len() as u32);
        for &value in values {
            out.extend_from_slice(&value.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint buffer.
pub fn decode_isck(bytes: &[u8]) -> Result<IsckFile, FormatError> {
    let mut reader = Reader::new(bytes);
    reader.magic("ISCK")?;
    let version = reader.u32("ISCK version")?;
    if version != 1 {
        return Err(FormatError::Version { format: "ISCK", version });
    }
    let config_len = reader.u32("ISCK config length")? as usize;
    let config_bytes = reader.take(config_len, "ISCK config")?;
    let config_text = String::from_utf8_lossy(config_bytes).into_owned();
    let n_blobs = reader.u32("ISCK blob count")? as usize;
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let name_len = reader.u32("ISCK name length")? as usize;
        let name = String::from_utf8_lossy(reader.take(name_len, "ISCK name")?).into_owned();
        let n_values = reader.u32("ISCK value count")? as usize;
        let mut values = Vec::with_capacity(n_values);
        for _ in 0..n_values {
            values.push(reader.f32("ISCK values")?);
        }
        blobs.push((name, values));
    }
    Ok(IsckFile { config_text, blobs })
}

// ---------------------------------------------------------------- ISRV ----

/// Serializes a raw video: magic `ISRV`, u32 version=1, u32 frames, u32
/// height, u32 width, then 8-bit RGB frames row-major.
pub fn encode_isrv(video: &RawVideo) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + video.data.len());
    out.extend_from_slice(b"ISRV");
    push_u32(&mut out, 1);
    push_u32(&mut out, video.frames as u32);
    push_u32(&mut out, video.height as u32);
    push_u32(&mut out, video.width as u32);
    out.extend_from_slice(&video.data);
    out
}

/// Parses a raw-video buffer.
pub fn decode_isrv(bytes: &[u8]) -> Result<RawVideo, FormatError> {
    let mut reader = Reader::new(bytes);
    reader.magic("ISRV")?;
    let version = reader.u32("ISRV version")?;
    if version != 1 {
        return Err(FormatError::Version { format: "ISRV", version });
    }
    let frames = reader.u32("ISRV frames")? as usize;
    let height = reader.u32("ISRV height")? as usize;
    let width = reader.u32("ISRV width")? as usize;
    let len = frames
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .and_then(|v| v.checked_mul(3))
        .ok_or(FormatError::Field { what: "ISRV dims", value: frames as u64 })?;
    let data = reader.take(len, "ISRV data")?.to_vec();
    Ok(RawVideo { width, height, frames, data })
}

// ---------------------------------------------------------------- ISBC ----

/// A training-pair dump: the label codes plus the per-block input volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct IsbcFile {
    pub labels: IstkFile,
    pub inputs: Vec<LatentVolume>,
}

/// Serializes a training-pair dump: magic `ISBC`, then the ISTK-format
/// labels, then one ISVL-format volume per retained scale (the block
/// inputs, in the same flat order as the labels).
pub fn encode_isbc(file: &IsbcFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"ISBC");
    out.extend_from_slice(&encode_istk(&file.labels));
    for input in &file.inputs {
        out.extend_from_slice(&encode_isvl(input));
    }
    out
}

/// Parses a training-pair dump; the input count equals the number of
/// retained scales in the embedded label file.
pub fn decode_isbc(bytes: &[u8]) -> Result<IsbcFile, FormatError> {
    let mut reader = Reader::new(bytes);
    reader.magic("ISBC")?;
    let labels = decode_istk_at(&mut reader)?;
    let n_inputs: usize = labels.pyramids.iter().map(|p| p.codes.len()).sum();
    let mut inputs = Vec::with_capacity(n_inputs);
    for _ in 0..n_inputs {
        inputs.push(decode_isvl_at(&mut reader)?);
    }
    Ok(IsbcFile { labels, inputs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(rng: &mut ChaCha8Rng, d: usize, t: usize, h: usize, w: usize) -> LatentVolume {
        let data: Vec<f64> = (0..d * t * h * w).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        LatentVolume::from_vec(d, t, h, w, data).unwrap()
    }

    fn random_codes(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize, bits: u32) -> BitTensor {
        let mut codes = BitTensor::zeros(t, h, w, bits);
        for pos in 0..codes.n_positions() {
            for bit in 0..bits {
                codes.set_bit(pos, bit, rng.random::<bool>());
            }
        }
        codes
    }

    #[test]
    fn isvl_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let volume = random_volume(&mut rng, 5, 2, 3, 4);
        let bytes = encode_isvl(&volume);
        assert_eq!(decode_isvl(&bytes).unwrap(), volume);
        assert_eq!(&bytes[..4], b"ISVL");
    }

    #[test]
    fn istk_round_trips_with_dropped_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let file = IstkFile {
            pyramids: vec![
                IstkPyramid {
                    scales: vec![(1, 1, 1, 16, true), (1, 2, 2, 16, true)],
                    codes: vec![
                        random_codes(&mut rng, 1, 1, 1, 16),
                        random_codes(&mut rng, 1, 2, 2, 16),
                    ],
                },
                IstkPyramid {
                    scales: vec![(4, 1, 1, 32, true), (4, 2, 2, 32, false), (4, 3, 3, 32, true)],
                    codes: vec![
                        random_codes(&mut rng, 4, 1, 1, 32),
                        random_codes(&mut rng, 4, 3, 3, 32),
                    ],
                },
            ],
        };
        let bytes = encode_istk(&file);
        let back = decode_istk(&bytes).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.flat_codes().len(), 4);
    }

    #[test]
    fn isck_round_trips() {
        let file = IsckFile {
            config_text: String::from("model.layers = 2\nmodel.heads = 2\n"),
            blobs: vec![
                (String::from("text_emb"), vec![0.5, -1.25, 3.0]),
                (String::from("head_w.16"), vec![0.0; 7]),
            ],
        };
        let bytes = encode_isck(&file);
        assert_eq!(decode_isck(&bytes).unwrap(), file);
    }

    #[test]
    fn isrv_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut video = RawVideo::black(6, 4, 2);
        for byte in video.data.iter_mut() {
            *byte = rng.random::<u8>();
        }
        let bytes = encode_isrv(&video);
        assert_eq!(decode_isrv(&bytes).unwrap(), video);
    }

    #[test]
    fn isbc_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels = IstkFile {
            pyramids: vec![IstkPyramid {
                scales: vec![(1, 1, 1, 4, true), (1, 2, 2, 4, true)],
                codes: vec![
                    random_codes(&mut rng, 1, 1, 1, 4),
                    random_codes(&mut rng, 1, 2, 2, 4),
                ],
            }],
        };
        let inputs =
            vec![random_volume(&mut rng, 4, 1, 2, 2), random_volume(&mut rng, 4, 1, 2, 2)];
        let file = IsbcFile { labels, inputs };
        let bytes = encode_isbc(&file);
        assert_eq!(decode_isbc(&bytes).unwrap(), file);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bytes = encode_isvl(&random_volume(&mut rng, 2, 1, 2, 2));
        bytes[0] = b'X';
        assert!(matches!(decode_isvl(&bytes), Err(FormatError::Magic { .. })));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bytes = encode_isvl(&random_volume(&mut rng, 2, 1, 2, 2));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_isvl(cut), Err(FormatError::Truncated { .. })));
    }

    #[test]
    fn bad_version_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bytes = encode_isvl(&random_volume(&mut rng, 2, 1, 2, 2));
        bytes[4] = 9;
        assert!(matches!(decode_isvl(&bytes), Err(FormatError::Version { .. })));
    }
}
