//! The vertical-gradient prior and the mild/moderate/severe difficulty
//! tag that drives routing.

use crate::error::{PrnError, Result};
use crate::tensorops::Tensor;

/// Routing thresholds in prior units.
///
/// Naming follows the convention that `gamma_upper` is the *smaller* value
/// (the upper bound of the mild region) and `gamma_low` the larger (the
/// lower bound of the severe region): 0 <= gamma_upper <= gamma_low.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub gamma_upper: f32,
    pub gamma_low: f32,
}

impl Thresholds {
    pub fn new(gamma_upper: f32, gamma_low: f32) -> Result<Thresholds> {
        if !(gamma_upper.is_finite() && gamma_low.is_finite())
            || gamma_upper < 0.0
            || gamma_upper > gamma_low
        {
            return Err(PrnError::InvalidThresholds {
                upper: gamma_upper,
                low: gamma_low,
            });
        }
        Ok(Thresholds {
            gamma_upper,
            gamma_low,
        })
    }

    /// Degenerate pair that routes every patch through the full path.
    pub fn all_severe() -> Thresholds {
        Thresholds {
            gamma_upper: 0.0,
            gamma_low: 0.0,
        }
    }

    /// Degenerate pair that routes every patch through the early exit.
    pub fn all_mild() -> Thresholds {
        Thresholds {
            gamma_upper: f32::INFINITY,
            gamma_low: f32::INFINITY,
        }
    }
}

impl Default for Thresholds {
    /// Shipped defaults for 54x54 patches: (10, 30).
    fn default() -> Thresholds {
        Thresholds {
            gamma_upper: 10.0,
            gamma_low: 30.0,
        }
    }
}

/// Patch difficulty. Ordered: Mild < Moderate < Severe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DifficultyTag {
    Mild,
    Moderate,
    Severe,
}

impl DifficultyTag {
    pub const ALL: [DifficultyTag; 3] = [
        DifficultyTag::Mild,
        DifficultyTag::Moderate,
        DifficultyTag::Severe,
    ];

    pub fn index(self) -> usize {
        match self {
            DifficultyTag::Mild => 0,
            DifficultyTag::Moderate => 1,
            DifficultyTag::Severe => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DifficultyTag::Mild => "mild",
            DifficultyTag::Moderate => "moderate",
            DifficultyTag::Severe => "severe",
        }
    }
}

/// Which norm summarizes the vertical differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorNorm {
    /// Mean absolute difference.
    L1Mean,
    /// Root mean square difference.
    L2Mean,
}

/// Knobs for the prior computation. Defaults match the shipped thresholds:
/// L1 mean in 8-bit units, area-normalized to a 54x54 reference patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    pub norm: PriorNorm,
    /// Also count horizontal differences (off by default; the prior is
    /// defined on the vertical axis).
    pub use_both_axes: bool,
    /// Area the thresholds were tuned for; the prior of an (h, w) patch is
    /// scaled by reference_area / (h * w) so tags stay comparable across
    /// patch sizes.
    pub reference_area: f32,
}

impl Default for PriorConfig {
    fn default() -> PriorConfig {
        PriorConfig {
            norm: PriorNorm::L1Mean,
            use_both_axes: false,
            reference_area: 54.0 * 54.0,
        }
    }
}

/// Gradient prior of a single-channel patch with default config.
pub fn gradient_prior(patch: &Tensor) -> Result<f32> {
    gradient_prior_with(patch, &PriorConfig::default())
}

/// Gradient prior: norm of forward vertical differences, scaled to 8-bit
/// units and area-normalized. Always >= 0; 0 exactly for constant patches.
pub fn gradient_prior_with(patch: &Tensor, cfg: &PriorConfig) -> Result<f32> {
    let (n, c, h, w) = patch.shape();
    if n != 1 || c != 1 {
        return Err(PrnError::shape(
            "gradient_prior",
            "1x1xHxW patch".to_string(),
            format!("{:?}", patch.shape()),
        ));
    }
    if h < 2 {
        return Err(PrnError::PatchTooSmall {
            context: "gradient_prior",
            dim: h,
            min: 2,
        });
    }
    let data = patch.data();
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for y in 0..h - 1 {
        for x in 0..w {
            let d = (data[(y + 1) * w + x] - data[y * w + x]) as f64;
            acc += match cfg.norm {
                PriorNorm::L1Mean => d.abs(),
                PriorNorm::L2Mean => d * d,
            };
        }
    }
    count += (h - 1) * w;
    if cfg.use_both_axes {
        for y in 0..h {
            for x in 0..w - 1 {
                let d = (data[y * w + x + 1] - data[y * w + x]) as f64;
                acc += match cfg.norm {
                    PriorNorm::L1Mean => d.abs(),
                    PriorNorm::L2Mean => d * d,
                };
            }
        }
        count += h * (w - 1);
    }
    let mean = acc / count as f64;
    let magnitude = match cfg.norm {
        PriorNorm::L1Mean => mean,
        PriorNorm::L2Mean => mean.sqrt(),
    };
    let area_scale = cfg.reference_area as f64 / (h * w) as f64;
    Ok((magnitude * 255.0 * area_scale) as f32)
}

/// Total, mutually exclusive tagging. Boundaries are left-inclusive:
/// Mild when P <= gamma_upper, Moderate when gamma_upper < P <= gamma_low,
/// Severe when P > gamma_low.
pub fn classify(p: f32, t: &Thresholds) -> DifficultyTag {
    if p <= t.gamma_upper {
        DifficultyTag::Mild
    } else if p <= t.gamma_low {
        DifficultyTag::Moderate
    } else {
        DifficultyTag::Severe
    }
}

/// Binned prior counts, serializable to CSV for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorHistogram {
    pub bin_width: f32,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl PriorHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{}\n",
                i as f32 * self.bin_width,
                (i + 1) as f32 * self.bin_width,
                c
            ));
        }
        out
    }

    /// Index of the fullest bin.
    pub fn mode_bin(&self) -> usize {
        self.counts
            .iter()
            .enumerate()
            .max_by_key(|(_, &c)| c)
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Histogram of gradient priors over a patch set.
pub fn prior_histogram(patches: &[Tensor], bin_width: f32) -> Result<PriorHistogram> {
    if patches.is_empty() {
        return Err(PrnError::EmptyInput("prior_histogram"));
    }
    if bin_width <= 0.0 || bin_width.is_nan() {
        return Err(PrnError::InvalidConfig("bin_width must be > 0".into()));
    }
    let priors: Vec<f32> = patches
        .iter()
        .map(gradient_prior)
        .collect::<Result<_>>()?;
    histogram_of(&priors, bin_width)
}

/// Histogram over precomputed prior values.
pub fn histogram_of(priors: &[f32], bin_width: f32) -> Result<PriorHistogram> {
    if priors.is_empty() {
        return Err(PrnError::EmptyInput("histogram_of"));
    }
    let max = priors.iter().cloned().fold(0.0f32, f32::max);
    let bins = (max / bin_width).floor() as usize + 1;
    let mut counts = vec![0u64; bins];
    for &p in priors {
        let b = ((p / bin_width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(PriorHistogram {
        bin_width,
        counts,
        total: priors.len() as u64,
    })
}
