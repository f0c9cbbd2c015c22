//! Toy dual encoders: a single linear map followed by L2 normalization,
//! small enough that every gradient can be checked against finite
//! differences.

use crate::error::{Error, Result};
use crate::kb::PairEncoder;
use crate::math::{dot, l2_normalize, norm, UnitVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Audio,
    Text,
}

/// y = normalize(W x). Rows index the embedding dimension.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    pub weights: Vec<Vec<f64>>, // d rows of d_in columns
    pub kind: EncoderKind,
}

impl ToyEncoder {
    pub fn new_random(d: usize, d_in: usize, kind: EncoderKind, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (d_in as f64).sqrt();
        let weights = (0..d)
            .map(|_| (0..d_in).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect())
            .collect();
        Self { weights, kind }
    }

    pub fn dim_out(&self) -> usize {
        self.weights.len()
    }

    pub fn dim_in(&self) -> usize {
        self.weights.first().map_or(0, |r| r.len())
    }

    pub fn forward(&self, x: &[f64]) -> Result<UnitVector> {
        if x.len() != self.dim_in() {
            return Err(Error::DimensionMismatch { left: self.dim_in(), right: x.len() });
        }
        let y: Vec<f64> = self.weights.iter().map(|row| dot(row, x)).collect();
        l2_normalize(&y)
    }

    /// Gradient of a scalar loss with respect to W, given the gradient with
    /// respect to the normalized output. Includes the normalization
    /// Jacobian (I - u u^T) / ||W x||.
    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.dim_in() || grad_out.len() != self.dim_out() {
            return Err(Error::DimensionMismatch { left: self.dim_in(), right: x.len() });
        }
        let y: Vec<f64> = self.weights.iter().map(|row| dot(row, x)).collect();
        let n = norm(&y);
        if n <= crate::math::ZERO_NORM_THRESHOLD {
            return Err(Error::ZeroNorm { norm: n });
        }
        let u: Vec<f64> = y.iter().map(|v| v / n).collect();
        let radial = dot(&u, grad_out);
        let d_y: Vec<f64> = grad_out.iter().zip(&u).map(|(g, ui)| (g - ui * radial) / n).collect();
        Ok(d_y.iter().map(|gy| x.iter().map(|xi| gy * xi).collect()).collect())
    }

    pub fn apply_update(&mut self, grad: &[Vec<f64>], learning_rate: f64) {
        for (row, grow) in self.weights.iter_mut().zip(grad) {
            for (w, g) in row.iter_mut().zip(grow) {
                *w -= learning_rate * g;
            }
        }
    }

    pub fn accumulate(acc: &mut [Vec<f64>], grad: &[Vec<f64>]) {
        for (arow, grow) in acc.iter_mut().zip(grad) {
            for (a, g) in arow.iter_mut().zip(grow) {
                *a += g;
            }
        }
    }
}

/// The audio/text encoder pair used for corpus encoding and training.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub audio: ToyEncoder,
    pub text: ToyEncoder,
}

impl DualEncoder {
    pub fn new_random(d: usize, d_in: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            audio: ToyEncoder::new_random(d, d_in, EncoderKind::Audio, rng),
            text: ToyEncoder::new_random(d, d_in, EncoderKind::Text, rng),
        }
    }
}

impl PairEncoder for DualEncoder {
    fn encode_audio(&self, features: &[f64]) -> Result<UnitVector> {
        self.audio.forward(features)
    }

    fn encode_text(&self, features: &[f64]) -> Result<UnitVector> {
        self.text.forward(features)
    }
}

pub mod weights_io {
    //! Binary encoder weights: header {magic "ASKW", version u32, d u32,
    //! d_in u32}, then row-major little-endian f32 for the audio map
    //! followed by the text map.

    use super::*;

    pub const MAGIC: [u8; 4] = *b"ASKW";
    pub const VERSION: u32 = 1;

    pub fn export(enc: &DualEncoder, w: &mut dyn Write) -> Result<()> {
        let d = enc.audio.dim_out();
        let d_in = enc.audio.dim_in();
        if enc.text.dim_out() != d || enc.text.dim_in() != d_in {
            return Err(Error::Snapshot("audio and text encoder shapes disagree".into()));
        }
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(d as u32).to_le_bytes())?;
        w.write_all(&(d_in as u32).to_le_bytes())?;
        for enc in [&enc.audio, &enc.text] {
            for row in &enc.weights {
                for &v in row {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn import(r: &mut dyn Read) -> Result<DualEncoder> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::Snapshot("bad weights magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != VERSION {
            return Err(Error::Snapshot("unsupported weights version".into()));
        }
        r.read_exact(&mut b4)?;
        let d = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let d_in = u32::from_le_bytes(b4) as usize;
        let mut read_map = |kind: EncoderKind| -> Result<ToyEncoder> {
            let mut weights = Vec::with_capacity(d);
            for _ in 0..d {
                let mut row = Vec::with_capacity(d_in);
                for _ in 0..d_in {
                    let mut b = [0u8; 4];
                    r.read_exact(&mut b)?;
                    row.push(f32::from_le_bytes(b) as f64);
                }
                weights.push(row);
            }
            Ok(ToyEncoder { weights, kind })
        };
        let audio = read_map(EncoderKind::Audio)?;
        let text = read_map(EncoderKind::Text)?;
        Ok(DualEncoder { audio, text })
    }

    pub fn write_file(enc: &DualEncoder, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            export(enc, &mut f)?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<DualEncoder> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        import(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::fd_gradient;

    fn identity_encoder(d: usize) -> ToyEncoder {
        let weights = (0..d)
            .map(|r| (0..d).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
            .collect();
        ToyEncoder { weights, kind: EncoderKind::Audio }
    }

    #[test]
    fn identity_weights_pass_unit_input_through() {
        let enc = identity_encoder(3);
        let x = [0.6, 0.0, 0.8];
        let u = enc.forward(&x).unwrap();
        for (a, b) in u.as_slice().iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_scale_invariant() {
        let mut rng = crate::rng::substream(1, "test-enc");
        let enc = ToyEncoder::new_random(4, 6, EncoderKind::Audio, &mut rng);
        let x: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.7).collect();
        let x3: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let a = enc.forward(&x).unwrap();
        let b = enc.forward(&x3).unwrap();
        for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_matvec_oracle() {
        let mut rng = crate::rng::substream(2, "test-enc");
        let enc = ToyEncoder::new_random(3, 5, EncoderKind::Text, &mut rng);
        let x: Vec<f64> = (0..5).map(|i| (i as f64).sin()).collect();
        let u = enc.forward(&x).unwrap();
        let mut y = vec![0.0; 3];
        for (r, row) in enc.weights.iter().enumerate() {
            for (c, w) in row.iter().enumerate() {
                y[r] += w * x[c];
            }
        }
        let n = norm(&y);
        for (a, b) in u.as_slice().iter().zip(&y) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_tangent_term_vanishes_for_parallel_grad() {
        let mut rng = crate::rng::substream(3, "test-enc");
        let enc = ToyEncoder::new_random(3, 4, EncoderKind::Audio, &mut rng);
        let x = [0.4, -0.2, 0.8, 0.1];
        let u = enc.forward(&x).unwrap();
        let dw = enc.backward(&x, u.as_slice()).unwrap();
        for row in dw {
            for v in row {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_zero_grad_gives_zero() {
        let mut rng = crate::rng::substream(4, "test-enc");
        let enc = ToyEncoder::new_random(3, 4, EncoderKind::Audio, &mut rng);
        let dw = enc.backward(&[1.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]).unwrap();
        for row in dw {
            for v in row {
                assert_eq!(v, 0.0);
            }
        }
    }

    // probe loss: p . normalize(W x) for a fixed random p
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = crate::rng::substream(5, "test-enc");
        let enc = ToyEncoder::new_random(3, 4, EncoderKind::Audio, &mut rng);
        let x = [0.9, -0.3, 0.2, 0.5];
        let probe = [0.3, -0.8, 0.5];

        let u = enc.forward(&x).unwrap();
        let analytic = enc.backward(&x, &probe).unwrap();
        drop(u);

        let flat: Vec<f64> = enc.weights.iter().flatten().copied().collect();
        let f = |w: &[f64]| {
            let weights: Vec<Vec<f64>> = w.chunks(4).map(|c| c.to_vec()).collect();
            let e = ToyEncoder { weights, kind: EncoderKind::Audio };
            dot(e.forward(&x).unwrap().as_slice(), &probe)
        };
        let fd = fd_gradient(f, &flat, 1e-5).unwrap();
        for (i, fd_v) in fd.iter().enumerate() {
            let a = analytic[i / 4][i % 4];
            let rel = (a - fd_v).abs() / fd_v.abs().max(1e-8);
            assert!(rel < 1e-4, "weight {i}: analytic {a} vs fd {fd_v}");
        }
    }

    #[test]
    fn weights_round_trip() {
        let mut rng = crate::rng::substream(6, "test-enc");
        let enc = DualEncoder::new_random(4, 7, &mut rng);
        let mut buf = Vec::new();
        weights_io::export(&enc, &mut buf).unwrap();
        let back = weights_io::import(&mut &buf[..]).unwrap();
        for (a, b) in enc.audio.weights.iter().zip(&back.audio.weights) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
