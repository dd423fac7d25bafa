//! The six time-series augmentations used by the augmentation ablation.
//!
//! All methods preserve the input shape; cropping zero-fills the removed
//! regions to keep the sequence length. None of these run in the default
//! training path — the pretext tasks deliberately avoid augmentation — they
//! exist so the ablation harness can measure what augmentation costs.

use super::DataError;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMethod {
    /// Additive Gaussian noise.
    Jitter,
    /// Multiply each channel by a random scalar.
    Scaling,
    /// Permute channel order with independent sign flips.
    Rotation,
    /// Slice into segments and permute their order.
    Permutation,
    /// Zero random elements.
    Masking,
    /// Zero the left and right margins.
    Cropping,
}

impl AugmentMethod {
    pub const ALL: [AugmentMethod; 6] = [
        AugmentMethod::Jitter,
        AugmentMethod::Scaling,
        AugmentMethod::Rotation,
        AugmentMethod::Permutation,
        AugmentMethod::Masking,
        AugmentMethod::Cropping,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentMethod::Jitter => "jitter",
            AugmentMethod::Scaling => "scaling",
            AugmentMethod::Rotation => "rotation",
            AugmentMethod::Permutation => "permutation",
            AugmentMethod::Masking => "masking",
            AugmentMethod::Cropping => "cropping",
        }
    }

    pub fn parse(name: &str) -> Result<Self, DataError> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| DataError::UnknownMethod(name.to_string()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AugmentParams {
    pub jitter_sigma: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub segments: usize,
    pub mask_ratio: f64,
    pub crop_ratio: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            jitter_sigma: 0.1,
            scale_min: 0.8,
            scale_max: 1.2,
            segments: 4,
            mask_ratio: 0.1,
            crop_ratio: 0.2,
        }
    }
}

/// Apply one augmentation to a `[t x channels]` window. Draws consume `rng`
/// deterministically; the output always has the input's shape.
pub fn augment(
    x: &[f64],
    t: usize,
    channels: usize,
    method: AugmentMethod,
    params: &AugmentParams,
    rng: &mut RngStream,
) -> Result<Vec<f64>, DataError> {
    debug_assert_eq!(x.len(), t * channels);
    match method {
        AugmentMethod::Jitter => {
            if params.jitter_sigma < 0.0 {
                return Err(DataError::InvalidParam(format!(
                    "jitter sigma {} < 0",
                    params.jitter_sigma
                )));
            }
            if params.jitter_sigma == 0.0 {
                return Ok(x.to_vec());
            }
            Ok(x.iter().map(|&v| v + params.jitter_sigma * rng.normal()).collect())
        }
        AugmentMethod::Scaling => {
            if !(params.scale_min > 0.0 && params.scale_min <= params.scale_max) {
                return Err(DataError::InvalidParam(format!(
                    "scale range ({}, {})",
                    params.scale_min, params.scale_max
                )));
            }
            let scales: Vec<f64> = (0..channels)
                .map(|_| rng.range(params.scale_min, params.scale_max))
                .collect();
            let mut out = x.to_vec();
            for ti in 0..t {
                for c in 0..channels {
                    out[ti * channels + c] *= scales[c];
                }
            }
            Ok(out)
        }
        AugmentMethod::Rotation => {
            let mut perm: Vec<usize> = (0..channels).collect();
            rng.shuffle(&mut perm);
            let signs: Vec<f64> = (0..channels)
                .map(|_| if rng.uniform() < 0.5 { -1.0 } else { 1.0 })
                .collect();
            let mut out = vec![0.0; x.len()];
            for ti in 0..t {
                for c in 0..channels {
                    out[ti * channels + c] = signs[c] * x[ti * channels + perm[c]];
                }
            }
            Ok(out)
        }
        AugmentMethod::Permutation => {
            let segs = params.segments;
            if segs == 0 || segs > t {
                return Err(DataError::InvalidParam(format!(
                    "segment count {segs} for window of {t}"
                )));
            }
            // near-equal contiguous segments
            let base = t / segs;
            let extra = t % segs;
            let mut bounds = vec![0usize];
            for s in 0..segs {
                bounds.push(bounds[s] + base + usize::from(s < extra));
            }
            let mut order: Vec<usize> = (0..segs).collect();
            rng.shuffle(&mut order);
            let mut out = Vec::with_capacity(x.len());
            for &s in &order {
                out.extend_from_slice(&x[bounds[s] * channels..bounds[s + 1] * channels]);
            }
            Ok(out)
        }
        AugmentMethod::Masking => {
            if !(0.0..=1.0).contains(&params.mask_ratio) {
                return Err(DataError::InvalidParam(format!(
                    "mask ratio {}",
                    params.mask_ratio
                )));
            }
            Ok(x.iter()
                .map(|&v| if rng.uniform() < params.mask_ratio { 0.0 } else { v })
                .collect())
        }
        AugmentMethod::Cropping => {
            if !(0.0..1.0).contains(&params.crop_ratio) {
                return Err(DataError::InvalidParam(format!(
                    "crop ratio {}",
                    params.crop_ratio
                )));
            }
            let side = ((params.crop_ratio * t as f64) / 2.0).floor() as usize;
            let mut out = x.to_vec();
            for ti in (0..side).chain(t - side..t) {
                for c in 0..channels {
                    out[ti * channels + c] = 0.0;
                }
            }
            Ok(out)
        }
    }
}
