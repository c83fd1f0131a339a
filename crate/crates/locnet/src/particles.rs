//! Weighted particle sets: sampling, resampling, and summary statistics.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::agent::StateVec;
use crate::error::{Error, Result};

/// Weighted sample representation of a belief over one agent state.
///
/// Invariants enforced at construction: at least one sample, all samples of
/// equal dimension, weights nonnegative and finite with sum normalized to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    dim: usize,
    samples: Vec<StateVec>,
    weights: Vec<f64>,
}

impl ParticleSet {
    pub fn new(samples: Vec<StateVec>, weights: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyParticleSet);
        }
        if samples.len() != weights.len() {
            return Err(Error::MismatchedSampleCounts(samples.len(), weights.len()));
        }
        let dim = samples[0].dim();
        if samples.iter().any(|s| s.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: samples.iter().find(|s| s.dim() != dim).unwrap().dim(),
            });
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::InvalidWeights);
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 || !sum.is_finite() {
            return Err(Error::InvalidWeights);
        }
        let weights = weights.into_iter().map(|w| w / sum).collect();
        Ok(Self {
            dim,
            samples,
            weights,
        })
    }

    pub fn equal_weights(samples: Vec<StateVec>) -> Result<Self> {
        let w = vec![1.0; samples.len()];
        Self::new(samples, w)
    }

    /// Like [`ParticleSet::new`] but carries weights that already satisfy
    /// the normalization invariant through bit-exactly.
    pub fn from_normalized(samples: Vec<StateVec>, weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidWeights);
        }
        let set = Self::new(samples, weights.clone())?;
        Ok(Self { weights, ..set })
    }

    /// Single-sample set with weight 1; the particle form of a known state.
    pub fn point_mass(x: StateVec) -> Self {
        Self::equal_weights(vec![x]).unwrap()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, j: usize) -> &StateVec {
        &self.samples[j]
    }

    pub fn samples(&self) -> &[StateVec] {
        &self.samples
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Replaces the weights, renormalizing. Sample support is unchanged.
    pub fn reweighted(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.samples.clone(), weights)
    }
}

/// `J` equally weighted samples uniform over an axis-aligned box.
pub fn draw_uniform_prior<R: Rng>(
    j: usize,
    min: [f64; 2],
    max: [f64; 2],
    rng: &mut R,
) -> Result<ParticleSet> {
    if j == 0 {
        return Err(Error::EmptyParticleSet);
    }
    if !(max[0] > min[0]) || !(max[1] > min[1]) {
        return Err(Error::DegenerateBox);
    }
    let samples = (0..j)
        .map(|_| {
            StateVec::from([
                rng.random_range(min[0]..max[0]),
                rng.random_range(min[1]..max[1]),
            ])
        })
        .collect();
    ParticleSet::equal_weights(samples)
}

/// Weighted sample mean; the sample form of the MMSE estimate.
pub fn mmse_estimate(p: &ParticleSet) -> StateVec {
    let mut mean = StateVec::zeros(p.dim());
    for (s, &w) in p.samples().iter().zip(p.weights()) {
        for d in 0..p.dim() {
            mean[d] += w * s[d];
        }
    }
    mean
}

/// Trace of the weighted sample covariance `Σ w x xᵀ − μ μᵀ`.
pub fn cov_trace(p: &ParticleSet) -> f64 {
    let mean = mmse_estimate(p);
    let mut ex2 = 0.0;
    for (s, &w) in p.samples().iter().zip(p.weights()) {
        for d in 0..p.dim() {
            ex2 += w * s[d] * s[d];
        }
    }
    let mu2: f64 = mean.as_slice().iter().map(|m| m * m).sum();
    (ex2 - mu2).max(0.0)
}

/// Standard systematic resampling: `J` equally weighted copies of the input
/// samples, sample `j` copied `⌊J w_j + u⌋`-ish times on the systematic grid.
pub fn systematic_resample<R: Rng>(p: &ParticleSet, rng: &mut R) -> ParticleSet {
    let j = p.len();
    let u: f64 = rng.random::<f64>() / j as f64;
    let mut out = Vec::with_capacity(j);
    let mut cum = 0.0;
    let mut src = 0usize;
    for i in 0..j {
        let pos = u + i as f64 / j as f64;
        while cum + p.weights()[src] < pos && src + 1 < j {
            cum += p.weights()[src];
            src += 1;
        }
        out.push(*p.sample(src));
    }
    ParticleSet::equal_weights(out).expect("input set is nonempty")
}

/// Bandwidth of the Gaussian kernel used by [`kernel_resample`]:
/// Silverman-style `J^{-1/3} T/2` for unimodal beliefs, `σ0²` for annular
/// beliefs whose width is set by the measurement noise floor.
pub fn kernel_bandwidth(t: f64, j: usize, sigma0_2: f64) -> f64 {
    if t < 2.0 * sigma0_2 {
        (j as f64).powf(-1.0 / 3.0) * t / 2.0
    } else {
        sigma0_2
    }
}

/// Draws `J` samples from a Gaussian-kernel approximation of the belief.
/// Component selection is systematic, so a zero bandwidth degenerates to
/// [`systematic_resample`].
pub fn kernel_resample<R: Rng>(p: &ParticleSet, sigma0_2: f64, rng: &mut R) -> ParticleSet {
    let sigma_k = kernel_bandwidth(cov_trace(p), p.len(), sigma0_2).sqrt();
    let selected = systematic_resample(p, rng);
    let samples = selected
        .samples()
        .iter()
        .map(|s| {
            let mut out = *s;
            for d in 0..out.dim() {
                let z: f64 = rng.sample(StandardNormal);
                out[d] += sigma_k * z;
            }
            out
        })
        .collect();
    ParticleSet::equal_weights(samples).expect("input set is nonempty")
}

/// Which resampler to run at phase counter `n` for a belief with covariance
/// trace `t`. Kernel resampling fires every `L`th step, with `L` tightening
/// as the belief widens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleKind {
    Systematic,
    Kernel,
}

pub fn resample_schedule(t: f64, n: u32) -> ResampleKind {
    let l = if t < 80.0 {
        40
    } else if t < 1000.0 {
        20
    } else {
        10
    };
    if n % l == 0 {
        ResampleKind::Kernel
    } else {
        ResampleKind::Systematic
    }
}
