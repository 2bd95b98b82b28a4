//! Binary feature container and the synthetic feature generator.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PDSF"  u16 version  u32 count
//! count x { u32 frames  u32 dim  frames*dim f32 (row-major) }
//! optional: u32 count  count x u32 transcript length
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::config::FEATURE_DIM;
use crate::encoder::lengths::{MAX_FRAMES, MIN_FRAMES};
use crate::encoder::FeatureBatch;
use crate::error::{PdsError, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"PDSF";
pub const VERSION: u16 = 1;

/// Analysis window and hop of one frame, in seconds.
pub const WINDOW_SECONDS: f64 = 0.025;
pub const HOP_SECONDS: f64 = 0.010;

/// Frame/token ratio distribution of the paired transcripts.
pub const RATIO_MEAN: f64 = 35.0;
pub const RATIO_STD: f64 = 8.0;
pub const RATIO_RANGE: (f64, f64) = (10.0, 60.0);

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureItem {
    pub frames: u32,
    pub dim: u32,
    pub data: Vec<f32>,
}

impl FeatureItem {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(PdsError::config(format!(
                "item shape {:?} is not (frames, dim)",
                t.shape()
            )));
        }
        Ok(Self {
            frames: t.dim(0) as u32,
            dim: t.dim(1) as u32,
            data: t.data().iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.frames as usize, self.dim as usize],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("item data matches its header")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureFile {
    pub items: Vec<FeatureItem>,
    pub transcript_lengths: Option<Vec<u32>>,
}

fn read_array<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| PdsError::Format(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    read_array::<4>(r, what).map(u32::from_le_bytes)
}

impl FeatureFile {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn frame_counts(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.frames as usize).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.items.len() as u32).to_le_bytes())?;
        for item in &self.items {
            if item.data.len() != item.frames as usize * item.dim as usize {
                return Err(PdsError::Format(format!(
                    "item holds {} values for {} x {}",
                    item.data.len(),
                    item.frames,
                    item.dim
                )));
            }
            w.write_all(&item.frames.to_le_bytes())?;
            w.write_all(&item.dim.to_le_bytes())?;
            let bytes: Vec<u8> = item.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            w.write_all(&bytes)?;
        }
        if let Some(t) = &self.transcript_lengths {
            if t.len() != self.items.len() {
                return Err(PdsError::Format(format!(
                    "{} transcript lengths for {} items",
                    t.len(),
                    self.items.len()
                )));
            }
            w.write_all(&(t.len() as u32).to_le_bytes())?;
            for l in t {
                w.write_all(&l.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_array::<4>(r, "magic")? != MAGIC {
            return Err(PdsError::Format("not a PDSF feature file".into()));
        }
        let version = u16::from_le_bytes(read_array::<2>(r, "version")?);
        if version != VERSION {
            return Err(PdsError::Format(format!("unsupported version {version}")));
        }
        let count = read_u32(r, "item count")?;
        let mut items = Vec::with_capacity(count.min(1 << 16) as usize);
        for index in 0..count {
            let frames = read_u32(r, "frame count")?;
            let dim = read_u32(r, "dim")?;
            if frames == 0 || dim == 0 {
                return Err(PdsError::Format(format!(
                    "item {index} has shape {frames} x {dim}"
                )));
            }
            let n = frames as usize * dim as usize;
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)
                .map_err(|e| PdsError::Format(format!("truncated data of item {index}: {e}")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            items.push(FeatureItem { frames, dim, data });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let transcript_lengths = if rest.is_empty() {
            None
        } else {
            let mut cur = rest.as_slice();
            let n = read_u32(&mut cur, "transcript count")?;
            if n != count || cur.len() != 4 * n as usize {
                return Err(PdsError::Format(format!(
                    "transcript table of {} bytes does not hold {count} lengths",
                    rest.len()
                )));
            }
            Some(
                cur.chunks_exact(4)
                    .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        };
        Ok(Self {
            items,
            transcript_lengths,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Padded batch of the items at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<FeatureBatch> {
        let items = indices
            .iter()
            .map(|&i| {
                self.items
                    .get(i)
                    .map(FeatureItem::to_tensor)
                    .ok_or_else(|| {
                        PdsError::config(format!("item {i} out of range for {} items", self.len()))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureBatch::from_items(&items)
    }

    /// Consecutive batches of at most `batch_size` items.
    pub fn batches(&self, batch_size: usize) -> Result<Vec<FeatureBatch>> {
        if batch_size == 0 {
            return Err(PdsError::config("batch size must be positive"));
        }
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size).map(|c| self.batch(c)).collect()
    }
}

/// Distribution of generated frame counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LengthDist {
    Fixed { frames: usize },
    Uniform { min: usize, max: usize },
}

impl LengthDist {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = match *self {
            LengthDist::Fixed { frames } => (frames, frames),
            LengthDist::Uniform { min, max } => (min, max),
        };
        if lo > hi || lo < MIN_FRAMES || hi > MAX_FRAMES {
            return Err(PdsError::config(format!(
                "frame counts [{lo}, {hi}] must lie within [{MIN_FRAMES}, {MAX_FRAMES}]"
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        match *self {
            LengthDist::Fixed { frames } => frames,
            LengthDist::Uniform { min, max } => rng.random_range(min..=max),
        }
    }
}

/// Latent sinusoids per item; channels are random mixtures of them.
const COMPONENTS: usize = 6;
const MAX_FREQUENCY_HZ: f64 = 8.0;
const MIX_STD: f64 = 0.5;
const NOISE_STD: f64 = 0.05;

/// Mean of `sin(w t + phi)` over `[t0, t0 + len]`.
fn window_mean(w: f64, phi: f64, t0: f64, len: f64) -> f64 {
    ((w * t0 + phi).cos() - (w * (t0 + len) + phi).cos()) / (w * len)
}

fn synth_item(frames: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let offsets: Vec<f64> = (0..dim).map(|_| std.sample(rng)).collect();
    let mix: Vec<f64> = (0..dim * COMPONENTS)
        .map(|_| MIX_STD * std.sample(rng))
        .collect();
    let waves: Vec<(f64, f64)> = (0..COMPONENTS)
        .map(|_| {
            let f = rng.random_range(0.2..MAX_FREQUENCY_HZ);
            (
                2.0 * std::f64::consts::PI * f,
                rng.random_range(0.0..2.0 * std::f64::consts::PI),
            )
        })
        .collect();
    let mut data = Vec::with_capacity(frames * dim);
    let mut latent = [0.0; COMPONENTS];
    for i in 0..frames {
        let t0 = i as f64 * HOP_SECONDS;
        for (l, &(w, phi)) in latent.iter_mut().zip(&waves) {
            *l = window_mean(w, phi, t0, WINDOW_SECONDS);
        }
        for c in 0..dim {
            let mixed: f64 = latent
                .iter()
                .zip(&mix[c * COMPONENTS..])
                .map(|(l, m)| l * m)
                .sum();
            data.push(offsets[c] + mixed + NOISE_STD * std.sample(rng));
        }
    }
    Tensor::new(vec![frames, dim], data).expect("generated shape")
}

/// Transcript length for `frames` frames under a ratio drawn from the
/// truncated normal.
fn transcript_length(frames: usize, rng: &mut ChaCha8Rng) -> u32 {
    let normal = Normal::new(RATIO_MEAN, RATIO_STD).expect("valid ratio distribution");
    let ratio = loop {
        let r = normal.sample(rng);
        if (RATIO_RANGE.0..=RATIO_RANGE.1).contains(&r) {
            break r;
        }
    };
    ((frames as f64 / ratio).round() as u32).max(1)
}

/// Smooth band-limited 80-channel features with paired transcript lengths.
pub fn generate_synthetic_features(
    n_items: usize,
    lengths: LengthDist,
    seed: u64,
) -> Result<FeatureFile> {
    lengths.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n_items);
    let mut transcripts = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let frames = lengths.sample(&mut rng);
        items.push(FeatureItem::from_tensor(&synth_item(
            frames,
            FEATURE_DIM,
            &mut rng,
        ))?);
        transcripts.push(transcript_length(frames, &mut rng));
    }
    Ok(FeatureFile {
        items,
        transcript_lengths: Some(transcripts),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::representation_similarity;

    #[test]
    fn window_mean_matches_quadrature() {
        let (w, phi, t0, len) = (2.0 * std::f64::consts::PI * 3.3, 0.7, 1.23, 0.025);
        let n = 100_000;
        let quad: f64 = (0..n)
            .map(|k| (w * (t0 + (k as f64 + 0.5) * len / n as f64) + phi).sin())
            .sum::<f64>()
            / n as f64;
        assert!((window_mean(w, phi, t0, len) - quad).abs() < 1e-9);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let file =
            generate_synthetic_features(3, LengthDist::Uniform { min: 5, max: 40 }, 9).unwrap();
        let bytes = file.to_bytes().unwrap();
        let back = FeatureFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let bare = FeatureFile {
            transcript_lengths: None,
            ..file
        };
        let bytes = bare.to_bytes().unwrap();
        assert_eq!(
            FeatureFile::from_bytes(&bytes).unwrap().to_bytes().unwrap(),
            bytes
        );
    }

    #[test]
    fn header_layout() {
        let file = FeatureFile {
            items: vec![FeatureItem {
                frames: 1,
                dim: 2,
                data: vec![1.0, -2.0],
            }],
            transcript_lengths: Some(vec![7]),
        };
        let bytes = file.to_bytes().unwrap();
        let mut expected = b"PDSF".to_vec();
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&7u32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn corrupt_files_rejected() {
        let file = generate_synthetic_features(2, LengthDist::Fixed { frames: 6 }, 1).unwrap();
        let bytes = file.to_bytes().unwrap();
        assert!(FeatureFile::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(FeatureFile::from_bytes(b"WAVE\x01\x00").is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(FeatureFile::from_bytes(&v2).is_err());
    }

    #[test]
    fn generator_is_deterministic_and_bounded() {
        let dist = LengthDist::Uniform { min: 5, max: 3000 };
        let a = generate_synthetic_features(20, dist, 4).unwrap();
        let b = generate_synthetic_features(20, dist, 4).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert!(a
            .items
            .iter()
            .all(|i| (5..=3000).contains(&i.frames) && i.dim == 80));
        let c = generate_synthetic_features(20, dist, 5).unwrap();
        assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn invalid_bounds_rejected() {
        for dist in [
            LengthDist::Uniform { min: 4, max: 100 },
            LengthDist::Uniform { min: 10, max: 3001 },
            LengthDist::Uniform { min: 50, max: 20 },
            LengthDist::Fixed { frames: 0 },
        ] {
            assert!(matches!(
                generate_synthetic_features(1, dist, 0),
                Err(PdsError::Config(_))
            ));
        }
    }

    #[test]
    fn neighbouring_frames_are_similar() {
        let file =
            generate_synthetic_features(5, LengthDist::Uniform { min: 200, max: 800 }, 2).unwrap();
        for item in &file.items {
            let sim = representation_similarity(&item.to_tensor(), 1).unwrap();
            assert!(sim > 0.7, "{sim}");
        }
    }

    #[test]
    fn transcript_ratios_within_support() {
        let file = generate_synthetic_features(
            200,
            LengthDist::Uniform {
                min: 1000,
                max: 3000,
            },
            3,
        )
        .unwrap();
        let t = file.transcript_lengths.as_ref().unwrap();
        let ratios: Vec<f64> = file
            .items
            .iter()
            .zip(t)
            .map(|(i, &l)| i.frames as f64 / l as f64)
            .collect();
        assert!(ratios.iter().all(|&r| (9.5..=61.0).contains(&r)));
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean - RATIO_MEAN).abs() < 2.0, "{mean}");
    }
}
