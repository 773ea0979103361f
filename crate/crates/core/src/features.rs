//! Per-sample feature extraction and per-device averaged features.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::DeviceDataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExtractorKind {
    IdentityMean,
    RandomProjection,
}

/// Maps a raw sample to a fixed-dimension feature vector. Both kinds are linear.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureExtractor {
    /// The raw input, unchanged.
    IdentityMean { input_dim: usize },
    /// `P·x` with `P` a `d × input_dim` matrix of i.i.d. `N(0, 1/d)` entries.
    RandomProjection {
        input_dim: usize,
        out_dim: usize,
        seed: u64,
        /// Row-major `out_dim × input_dim`.
        matrix: Vec<f64>,
    },
}

impl FeatureExtractor {
    pub fn identity(input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::config("extractor input dimension must be positive"));
        }
        Ok(FeatureExtractor::IdentityMean { input_dim })
    }

    pub fn random_projection(input_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || out_dim == 0 {
            return Err(Error::config("projection dimensions must be positive"));
        }
        let std = 1.0 / (out_dim as f64).sqrt();
        let mut rng = rng::stream(seed);
        let matrix = (0..out_dim * input_dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(FeatureExtractor::RandomProjection {
            input_dim,
            out_dim,
            seed,
            matrix,
        })
    }

    pub fn build(kind: ExtractorKind, input_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        match kind {
            ExtractorKind::IdentityMean => Self::identity(input_dim),
            ExtractorKind::RandomProjection => Self::random_projection(input_dim, out_dim, seed),
        }
    }

    pub fn kind(&self) -> ExtractorKind {
        match self {
            FeatureExtractor::IdentityMean { .. } => ExtractorKind::IdentityMean,
            FeatureExtractor::RandomProjection { .. } => ExtractorKind::RandomProjection,
        }
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            FeatureExtractor::IdentityMean { input_dim }
            | FeatureExtractor::RandomProjection { input_dim, .. } => input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            FeatureExtractor::IdentityMean { input_dim } => input_dim,
            FeatureExtractor::RandomProjection { out_dim, .. } => out_dim,
        }
    }

    pub fn extract(&self, x: &[f64]) -> Result<FeatureVector> {
        if x.len() != self.input_dim() {
            return Err(Error::contract(format!(
                "sample has dimension {}, extractor expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(match self {
            FeatureExtractor::IdentityMean { .. } => FeatureVector(x.to_vec()),
            FeatureExtractor::RandomProjection {
                input_dim, matrix, ..
            } => FeatureVector(
                matrix
                    .chunks_exact(*input_dim)
                    .map(|row| row.iter().zip(x).map(|(p, v)| p * v).sum())
                    .collect(),
            ),
        })
    }

    /// Mean of the extracted features over every sample on the device.
    pub fn device_avg_feature(&self, data: &DeviceDataset) -> Result<FeatureVector> {
        if data.is_empty() {
            return Err(Error::contract(format!(
                "device {} has no samples to average",
                data.device_id
            )));
        }
        let mut sum = vec![0.0; self.output_dim()];
        for s in &data.samples {
            let f = self.extract(&s.input)?;
            for (acc, v) in sum.iter_mut().zip(&f.0) {
                *acc += v;
            }
        }
        let n = data.len() as f64;
        Ok(FeatureVector(sum.into_iter().map(|v| v / n).collect()))
    }
}
