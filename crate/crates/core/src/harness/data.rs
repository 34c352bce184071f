//! Procedural paired video/caption data.
//!
//! Each pair is driven by a latent vector `z`. The video shows a fixed
//! "world" pattern per latent direction, mixed by `z`, whose strength peaks
//! around a per-item salient frame; other frames are mostly distractor noise.
//! The caption spells out a quantized `z`, one token per latent direction.

use serde::Serialize;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::tensor::{mix, Rng, Tensor};

/// Number of latent directions per pair.
pub const LATENT_DIM: usize = 8;

/// Seed of the pattern basis shared by every dataset.
const WORLD_SEED: u64 = 0x005e_ed0f_7a11;

const DISTRACTOR_STD: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Pair {
    /// `T×H×W×C`.
    #[serde(skip)]
    pub video: Tensor,
    pub caption: Vec<usize>,
    pub latent: Vec<f64>,
    /// Frame with the strongest signal.
    pub salient_frame: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub pairs: Vec<Pair>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// A dataset holding the pairs at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> SyntheticDataset {
        SyntheticDataset {
            seed: self.seed,
            pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect(),
        }
    }
}

/// Tokens available per latent direction.
fn bins(cfg: &ExperimentConfig) -> usize {
    (cfg.text.vocab - 1) / LATENT_DIM
}

fn bucket(z: f64, bins: usize) -> usize {
    let u = (z / 4.0 + 0.5) * bins as f64;
    (u.floor().max(0.0) as usize).min(bins - 1)
}

/// Builds `pairs` items deterministically from `seed`.
pub fn generate_dataset(seed: u64, pairs: usize, cfg: &ExperimentConfig) -> Result<SyntheticDataset> {
    if pairs < 2 {
        return Err(Error::Input(format!("need at least 2 pairs, got {pairs}")));
    }
    let v = &cfg.visual;
    let b = bins(cfg);
    if b < 2 {
        return Err(Error::Config(format!(
            "vocab {} leaves fewer than 2 tokens per latent direction",
            cfg.text.vocab
        )));
    }
    if cfg.text.max_len < LATENT_DIM + 1 {
        return Err(Error::Config(format!(
            "max_len {} cannot hold a {LATENT_DIM}-token caption plus EOS",
            cfg.text.max_len
        )));
    }
    let frame = v.height * v.width * v.channels;
    let mut world = Rng::new(WORLD_SEED);
    let basis: Vec<Vec<f64>> = (0..LATENT_DIM).map(|_| world.normal_vec(frame, 1.0)).collect();

    let mut rng = Rng::new(mix(seed, 0xda7a));
    let width = (v.frames as f64 / 4.0).max(0.75);
    let items = (0..pairs)
        .map(|_| {
            let latent = rng.normal_vec(LATENT_DIM, 1.0);
            let salient_frame = rng.below(v.frames);
            let mut data = Vec::with_capacity(v.frames * frame);
            for t in 0..v.frames {
                let dt = t as f64 - salient_frame as f64;
                let salience = (-0.5 * (dt / width).powi(2)).exp();
                for px in 0..frame {
                    let signal: f64 = latent.iter().zip(&basis).map(|(z, b)| z * b[px]).sum();
                    let noise = DISTRACTOR_STD * rng.normal();
                    data.push(salience * signal / (LATENT_DIM as f64).sqrt() + (1.0 - salience) * noise);
                }
            }
            let video = Tensor::new(&[v.frames, v.height, v.width, v.channels], data).expect("video shape");
            let caption = latent.iter().enumerate().map(|(i, &z)| i * b + bucket(z, b)).collect();
            Pair {
                video,
                caption,
                latent,
                salient_frame,
            }
        })
        .collect();
    Ok(SyntheticDataset { seed, pairs: items })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let cfg = ExperimentConfig::toy();
        let a = generate_dataset(3, 4, &cfg).unwrap();
        let b = generate_dataset(3, 4, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.pairs.iter().zip(&b.pairs).all(|(x, y)| x.video.bit_eq(&y.video)));
        let c = generate_dataset(4, 4, &cfg).unwrap();
        assert_ne!(a, c);
        for p in &a.pairs {
            assert_eq!(p.caption.len(), LATENT_DIM);
            assert!(p.caption.iter().all(|&t| t < cfg.text.eos()));
            assert_eq!(p.video.shape(), &[6, 8, 8, 3]);
        }
        assert!(generate_dataset(0, 1, &cfg).is_err());
        assert_eq!(generate_dataset(0, 2, &cfg).unwrap().len(), 2);
    }

    #[test]
    fn buckets_cover_range() {
        assert_eq!(bucket(-10.0, 7), 0);
        assert_eq!(bucket(10.0, 7), 6);
        assert_eq!(bucket(0.0, 7), 3);
    }
}
