//! Seeded bimodal data whose label structure forces fusion.
//!
//! Classes 0–7 are visible only in the text embedding and 8–15 only in the
//! image embedding. For each of the classes 16–22 a per-record random sign
//! `s` goes into the text side and `s·(2y − 1)` into the image side, so the
//! label is the agreement of the two signs and neither modality alone carries
//! any information about it.

use super::{Dataset, Record, N_CLASSES};
use crate::error::{Error, Result};
use crate::random::{Rng, Stream};

pub const TEXT_ONLY: std::ops::Range<usize> = 0..8;
pub const IMAGE_ONLY: std::ops::Range<usize> = 8..16;
pub const JOINT: std::ops::Range<usize> = 16..23;

/// Genre counts in the 25,959-movie MM-IMDb collection, alphabetical.
pub const MMIMDB_GENRE_COUNTS: [u32; N_CLASSES] = [
    3550, 2710, 997, 1343, 8592, 3838, 2082, 13967, 1668, 1933, 338, 1143, 2703, 1045, 841, 2057,
    5364, 1991, 471, 634, 5192, 1335, 705,
];
pub const MMIMDB_RECORDS: u32 = 25_959;

pub fn mmimdb_rates() -> [f64; N_CLASSES] {
    MMIMDB_GENRE_COUNTS.map(|c| c as f64 / MMIMDB_RECORDS as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n: usize,
    pub noise_sigma: f64,
    pub text_dim: usize,
    pub image_dim: usize,
    /// Per-class Bernoulli rates.
    pub rates: [f64; N_CLASSES],
}

impl SyntheticConfig {
    pub fn new(seed: u64, n: usize, noise_sigma: f64) -> Self {
        SyntheticConfig {
            seed,
            n,
            noise_sigma,
            text_dim: super::TEXT_DIM,
            image_dim: super::IMAGE_DIM,
            rates: mmimdb_rates(),
        }
    }
}

pub fn generate_synthetic(seed: u64, n: usize, noise_sigma: f64) -> Result<Dataset> {
    generate_synthetic_with(&SyntheticConfig::new(seed, n, noise_sigma))
}

const TEXT_LATENT: usize = TEXT_ONLY.end - TEXT_ONLY.start + JOINT.end - JOINT.start;
const IMAGE_LATENT: usize = IMAGE_ONLY.end - IMAGE_ONLY.start + JOINT.end - JOINT.start;

fn projection(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f64> {
    let sd = 1.0 / (cols as f64).sqrt();
    (0..rows * cols).map(|_| rng.normal(0.0, sd)).collect()
}

fn project(m: &[f64], u: &[f64], noise: impl FnMut() -> f64) -> Vec<f32> {
    let mut noise = noise;
    m.chunks_exact(u.len())
        .map(|row| (row.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() + noise()) as f32)
        .collect()
}

pub fn generate_synthetic_with(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.n < 1 {
        return Err(Error::contract("synthetic dataset needs n ≥ 1"));
    }
    if !(cfg.noise_sigma >= 0.0) || !cfg.noise_sigma.is_finite() {
        return Err(Error::contract(format!("noise_sigma {} must be ≥ 0", cfg.noise_sigma)));
    }
    if cfg.rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::contract("class rates must lie in [0, 1]"));
    }
    let root = Rng::for_stream(cfg.seed, Stream::Synthetic);
    let mut proj_rng = root.substream(1_000);
    let m_text = projection(&mut proj_rng, cfg.text_dim, TEXT_LATENT);
    let m_image = projection(&mut proj_rng, cfg.image_dim, IMAGE_LATENT);
    let mut rng = root.substream(1_001);
    let width = format!("{}", cfg.n - 1).len();

    let records = (0..cfg.n)
        .map(|i| {
            let labels: Vec<u8> = cfg.rates.iter().map(|&r| rng.bernoulli(r) as u8).collect();
            let pm = |c: usize| 2.0 * labels[c] as f64 - 1.0;
            let mut u_text: Vec<f64> = TEXT_ONLY.map(pm).collect();
            let mut u_image: Vec<f64> = IMAGE_ONLY.map(pm).collect();
            for c in JOINT {
                let s = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                u_text.push(s);
                u_image.push(s * pm(c));
            }
            let sigma = cfg.noise_sigma;
            let text_emb = project(&m_text, &u_text, || rng.normal(0.0, sigma));
            let image_emb = project(&m_image, &u_image, || rng.normal(0.0, sigma));
            Record {
                id: format!("syn{i:0width$}"),
                text_emb,
                image_emb,
                labels,
            }
        })
        .collect();
    let ds = Dataset {
        text_dim: cfg.text_dim,
        image_dim: cfg.image_dim,
        n_classes: N_CLASSES,
        records,
    };
    ds.warn_unlabelled();
    Ok(ds)
}

