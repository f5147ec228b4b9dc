//! Label-preserving accelerometry transformations and seeded pipelines.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::Window;
use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];

/// Rodrigues rotation matrix for a unit `axis` (right-handed).
pub fn rotation_matrix(axis: [f64; 3], angle: f64) -> Mat3 {
    let [x, y, z] = axis;
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

/// Uniformly distributed direction on the unit sphere.
pub fn random_unit_axis<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn map_samples(window: &Window, f: impl Fn(&[f64; 3]) -> [f64; 3]) -> Window {
    window.with_samples(window.samples.iter().map(f).collect())
}

pub fn rotation3d(window: &Window, axis: [f64; 3], angle: f64) -> Result<Window> {
    let norm = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-9 || !angle.is_finite() {
        return Err(Error::Config(format!("rotation axis must have unit norm, got {norm}")));
    }
    let r = rotation_matrix(axis, angle);
    Ok(map_samples(window, |s| {
        let mut out = [0.0; 3];
        for (o, row) in out.iter_mut().zip(&r) {
            *o = row[0] * s[0] + row[1] * s[1] + row[2] * s[2];
        }
        out
    }))
}

/// Adds i.i.d. Gaussian noise with standard deviation `sigma`.
pub fn jitter<R: Rng + ?Sized>(window: &Window, sigma: f64, rng: &mut R) -> Result<Window> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("jitter sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(window.clone());
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let samples = window
        .samples
        .iter()
        .map(|s| [s[0] + noise.sample(rng), s[1] + noise.sample(rng), s[2] + noise.sample(rng)])
        .collect();
    Ok(window.with_samples(samples))
}

pub fn scale(window: &Window, factor: f64) -> Result<Window> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Config(format!("scale factor must be positive, got {factor}")));
    }
    Ok(map_samples(window, |s| [s[0] * factor, s[1] * factor, s[2] * factor]))
}

pub fn invert(window: &Window) -> Window {
    map_samples(window, |s| [-s[0], -s[1], -s[2]])
}

pub fn time_reverse(window: &Window) -> Window {
    window.with_samples(window.samples.iter().rev().copied().collect())
}

/// Output channel `i` takes input channel `perm[i]`.
pub fn channel_shuffle(window: &Window, perm: [usize; 3]) -> Result<Window> {
    let mut sorted = perm;
    sorted.sort_unstable();
    if sorted != [0, 1, 2] {
        return Err(Error::Config(format!("{perm:?} is not a permutation of the three axes")));
    }
    Ok(map_samples(window, |s| [s[perm[0]], s[perm[1]], s[perm[2]]]))
}

/// Resamples along a random smooth time map. Playback speed is drawn
/// log-uniformly in `[1/max_speed_ratio, max_speed_ratio]` at `knots + 2`
/// evenly spaced points and interpolated linearly in between; the result is
/// resampled back to the input length.
pub fn time_warp<R: Rng + ?Sized>(window: &Window, knots: usize, max_speed_ratio: f64, rng: &mut R) -> Result<Window> {
    if knots == 0 || !(max_speed_ratio >= 1.0) || !max_speed_ratio.is_finite() {
        return Err(Error::Config(format!(
            "time warp needs knots >= 1 and max_speed_ratio >= 1, got {knots} and {max_speed_ratio}"
        )));
    }
    let n = window.len();
    if n < 2 {
        return Ok(window.clone());
    }
    let log_r = max_speed_ratio.ln();
    let speeds: Vec<f64> = (0..knots + 2)
        .map(|_| if log_r > 0.0 { rng.random_range(-log_r..=log_r).exp() } else { 1.0 })
        .collect();
    let speed_at = |i: usize| {
        let pos = i as f64 / (n - 1) as f64 * (speeds.len() - 1) as f64;
        let k = (pos.floor() as usize).min(speeds.len() - 2);
        let frac = pos - k as f64;
        speeds[k] * (1.0 - frac) + speeds[k + 1] * frac
    };
    // Cumulative warped time, rescaled onto [0, n-1].
    let mut clock = vec![0.0; n];
    for i in 1..n {
        clock[i] = clock[i - 1] + 0.5 * (speed_at(i - 1) + speed_at(i));
    }
    let total = clock[n - 1];
    let samples = clock
        .iter()
        .map(|c| {
            let src = c / total * (n - 1) as f64;
            let lo = (src.floor() as usize).min(n - 2);
            let frac = src - lo as f64;
            let (a, b) = (window.samples[lo], window.samples[lo + 1]);
            [
                a[0] + frac * (b[0] - a[0]),
                a[1] + frac * (b[1] - a[1]),
                a[2] + frac * (b[2] - a[2]),
            ]
        })
        .collect();
    Ok(window.with_samples(samples))
}

fn window_std(window: &Window) -> f64 {
    let flat = window.flat();
    let n = flat.len() as f64;
    let mean = flat.iter().sum::<f64>() / n;
    (flat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentKind {
    /// Uniform random axis, angle uniform in `[0, max_angle)`.
    Rotation3d {
        #[serde(default = "full_turn")]
        max_angle: f64,
    },
    /// With `relative`, sigma is a fraction of the window's standard deviation.
    Jitter {
        sigma: f64,
        #[serde(default)]
        relative: bool,
    },
    Scale { min: f64, max: f64 },
    Invert,
    TimeReverse,
    /// Uniformly random axis permutation.
    ChannelShuffle,
    TimeWarp { knots: usize, max_speed_ratio: f64 },
}

fn full_turn() -> f64 {
    std::f64::consts::TAU
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    #[serde(flatten)]
    pub kind: AugmentKind,
    pub probability: f64,
}

impl AugmentationSpec {
    pub fn new(kind: AugmentKind, probability: f64) -> Self {
        Self { kind, probability }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.probability) {
            return bad(format!("augmentation probability {} outside [0, 1]", self.probability));
        }
        match self.kind {
            AugmentKind::Rotation3d { max_angle } if !(max_angle >= 0.0 && max_angle.is_finite()) => {
                bad(format!("rotation max_angle {max_angle} must be non-negative"))
            }
            AugmentKind::Jitter { sigma, .. } if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad(format!("jitter sigma {sigma} must be non-negative"))
            }
            AugmentKind::Scale { min, max } if !(min > 0.0 && min <= max && max.is_finite()) => {
                bad(format!("scale range [{min}, {max}] must be positive and ordered"))
            }
            AugmentKind::TimeWarp { knots, max_speed_ratio } if knots == 0 || !(max_speed_ratio >= 1.0) => {
                bad(format!("time warp knots {knots} / ratio {max_speed_ratio} invalid"))
            }
            _ => Ok(()),
        }
    }

    fn apply<R: Rng + ?Sized>(&self, w: &Window, rng: &mut R) -> Result<Window> {
        match self.kind {
            AugmentKind::Rotation3d { max_angle } => {
                let axis = random_unit_axis(rng);
                let angle = if max_angle > 0.0 { rng.random_range(0.0..max_angle) } else { 0.0 };
                rotation3d(w, axis, angle)
            }
            AugmentKind::Jitter { sigma, relative } => {
                let s = if relative { sigma * window_std(w) } else { sigma };
                jitter(w, s, rng)
            }
            AugmentKind::Scale { min, max } => {
                let f = if max > min { rng.random_range(min..=max) } else { min };
                scale(w, f)
            }
            AugmentKind::Invert => Ok(invert(w)),
            AugmentKind::TimeReverse => Ok(time_reverse(w)),
            AugmentKind::ChannelShuffle => {
                let mut perm = [0, 1, 2];
                perm.shuffle(rng);
                channel_shuffle(w, perm)
            }
            AugmentKind::TimeWarp { knots, max_speed_ratio } => time_warp(w, knots, max_speed_ratio, rng),
        }
    }
}

/// Ordered list of augmentations, each applied independently with its probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPipeline {
    pub specs: Vec<AugmentationSpec>,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for AugmentationPipeline {
    /// Random rotation always, relative jitter often, mild rescaling half the time.
    fn default() -> Self {
        Self {
            specs: vec![
                AugmentationSpec::new(AugmentKind::Rotation3d { max_angle: full_turn() }, 1.0),
                AugmentationSpec::new(AugmentKind::Jitter { sigma: 0.05, relative: true }, 0.8),
                AugmentationSpec::new(AugmentKind::Scale { min: 0.8, max: 1.2 }, 0.5),
            ],
            rng_seed: 0,
        }
    }
}

impl AugmentationPipeline {
    pub fn identity() -> Self {
        Self {
            specs: Vec::new(),
            rng_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.specs.iter().try_for_each(AugmentationSpec::validate)
    }

    /// Applies the pipeline with a fresh stream seeded from `rng_seed`.
    pub fn apply(&self, window: &Window) -> Result<Window> {
        self.apply_with_rng(window, &mut ChaCha8Rng::seed_from_u64(self.rng_seed))
    }

    /// Applies the pipeline drawing from a caller-owned stream.
    pub fn apply_with_rng<R: RngCore + ?Sized>(&self, window: &Window, rng: &mut R) -> Result<Window> {
        self.validate()?;
        let mut out = window.clone();
        for spec in &self.specs {
            // The coin is always drawn so later specs see a stable stream.
            let coin: f64 = rng.random();
            if coin < spec.probability {
                out = spec.apply(&out, rng)?;
            }
        }
        Ok(out)
    }
}
