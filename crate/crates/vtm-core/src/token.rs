//! Domain types shared by all merging strategies: token tensors, partitions,
//! match results, and the merge configuration.

use serde::{Deserialize, Serialize};

use crate::autodiff::DenseArray;
use crate::error::{Error, Result};

/// Spatiotemporal grid a token tensor was produced from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Grid {
    pub fn tokens(&self) -> usize {
        self.frames * self.height * self.width
    }
}

/// (frame, row, col) position of a token on the original grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coord {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

/// A set of N tokens with C channels plus per-token metadata.
///
/// Tokens are stored flattened over (frame, row, col) in frame-major order.
/// `sizes` counts the original patches each token represents; fresh tensors
/// have all sizes equal to 1 and merging conserves their sum exactly.
#[derive(Debug, Clone)]
pub struct TokenTensor {
    pub features: DenseArray,
    pub coords: Vec<Coord>,
    pub sizes: Vec<u64>,
    pub motion: Vec<f32>,
    pub grid: Grid,
}

impl TokenTensor {
    /// Build a fresh tensor from a `[L*H*W, C]` feature matrix; coords are
    /// derived in frame-major order, sizes start at 1, motion at 0.
    pub fn from_features(features: DenseArray, grid: Grid) -> Result<Self> {
        let expected = grid.tokens();
        let (n, c) = features.dims2()?;
        if n != expected || c != grid.channels {
            return Err(Error::TokenInvariant {
                field: "features",
                message: format!(
                    "feature matrix is {n}x{c}, grid implies {expected}x{}",
                    grid.channels
                ),
            });
        }
        let mut coords = Vec::with_capacity(n);
        for frame in 0..grid.frames {
            for row in 0..grid.height {
                for col in 0..grid.width {
                    coords.push(Coord { frame, row, col });
                }
            }
        }
        Ok(Self {
            features,
            coords,
            sizes: vec![1; n],
            motion: vec![0.0; n],
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn total_size(&self) -> u64 {
        self.sizes.iter().sum()
    }

    /// Check every invariant; each violation produces a distinct error
    /// naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let (n, _) = self.features.dims2()?;
        if self.coords.len() != n {
            return Err(Error::TokenInvariant {
                field: "coords",
                message: format!("coord count mismatch: {} coords for {n} tokens", self.coords.len()),
            });
        }
        if self.sizes.len() != n {
            return Err(Error::TokenInvariant {
                field: "sizes",
                message: format!("size count mismatch: {} sizes for {n} tokens", self.sizes.len()),
            });
        }
        if self.motion.len() != n {
            return Err(Error::TokenInvariant {
                field: "motion",
                message: format!("motion count mismatch: {} values for {n} tokens", self.motion.len()),
            });
        }
        for (i, c) in self.coords.iter().enumerate() {
            if c.frame >= self.grid.frames || c.row >= self.grid.height || c.col >= self.grid.width
            {
                return Err(Error::TokenInvariant {
                    field: "coords",
                    message: format!(
                        "coordinate out of grid at token {i}: ({}, {}, {}) vs grid ({}, {}, {})",
                        c.frame, c.row, c.col, self.grid.frames, self.grid.height, self.grid.width
                    ),
                });
            }
        }
        for (i, &s) in self.sizes.iter().enumerate() {
            if s == 0 {
                return Err(Error::TokenInvariant {
                    field: "sizes",
                    message: format!("size must be positive at token {i}"),
                });
            }
        }
        for (i, &m) in self.motion.iter().enumerate() {
            if !(m >= 0.0) {
                return Err(Error::TokenInvariant {
                    field: "motion",
                    message: format!("motion must be non-negative and finite at token {i}, got {m}"),
                });
            }
        }
        if !self.features.all_finite() {
            return Err(Error::TokenInvariant {
                field: "features",
                message: "non-finite feature value".into(),
            });
        }
        Ok(())
    }
}

/// Disjoint, jointly exhaustive index sets of target and source tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionResult {
    pub target_idx: Vec<usize>,
    pub source_idx: Vec<usize>,
}

impl PartitionResult {
    /// Build from an ascending target list over `0..n`; sources are the
    /// complement, also ascending.
    pub fn from_targets(targets: &[usize], n: usize) -> Result<Self> {
        let mut is_target = vec![false; n];
        for &t in targets {
            if t >= n {
                return Err(Error::IndexOutOfRange {
                    index: t,
                    len: n,
                    context: "partition targets",
                });
            }
            if is_target[t] {
                return Err(Error::InvalidArg(format!("duplicate target index {t}")));
            }
            is_target[t] = true;
        }
        let target_idx: Vec<usize> = (0..n).filter(|&i| is_target[i]).collect();
        let source_idx: Vec<usize> = (0..n).filter(|&i| !is_target[i]).collect();
        Ok(Self {
            target_idx,
            source_idx,
        })
    }
}

/// Per-source match against the target set. `match_of[j] == SENTINEL` marks
/// a source excluded by R-limiting; it passes through the merge unmerged.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub match_of: Vec<i64>,
    pub score_of: Vec<f32>,
}

impl MatchResult {
    pub const SENTINEL: i64 = -1;

    pub fn matched_count(&self) -> usize {
        self.match_of.iter().filter(|&&m| m != Self::SENTINEL).count()
    }
}

/// Feature pooling used when tokens merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Unweighted mean of the target and its matched sources.
    #[default]
    Average,
    /// Mean weighted by token sizes.
    SizeWeighted,
    /// Mean weighted by motion magnitudes (epsilon-floored).
    MotionWeighted,
}

/// Target-selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Naive,
    Center,
    Boundary,
    Motion,
    Learnable,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::Naive => "naive",
            Strategy::Center => "center",
            Strategy::Boundary => "boundary",
            Strategy::Motion => "motion",
            Strategy::Learnable => "learnable",
        };
        f.write_str(s)
    }
}

/// Merge configuration: partition factor, merge budget, pooling, strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeConfig {
    /// Partition factor γ ≥ 2; target count is ⌊N/γ⌋.
    pub gamma: usize,
    /// Fraction of sources actually merged: R = ⌊r_fraction·|S|⌋.
    pub r_fraction: f64,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub strategy: Strategy,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            gamma: 6,
            r_fraction: 0.8,
            pooling: Pooling::Average,
            strategy: Strategy::Naive,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 2 {
            return Err(Error::Config(format!(
                "merge.gamma must be >= 2, got {}",
                self.gamma
            )));
        }
        if !(self.r_fraction > 0.0 && self.r_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "merge.r_fraction must be in (0, 1], got {}",
                self.r_fraction
            )));
        }
        Ok(())
    }

    /// Merge budget for a source set of the given size.
    pub fn r_for(&self, source_count: usize) -> usize {
        (self.r_fraction * source_count as f64).floor() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fresh(frames: usize, height: usize, width: usize, channels: usize) -> TokenTensor {
        let grid = Grid {
            frames,
            height,
            width,
            channels,
        };
        let n = grid.tokens();
        TokenTensor::from_features(DenseArray::zeros(vec![n, channels]), grid).unwrap()
    }

    #[test]
    fn fresh_grid_validates() {
        let t = fresh(2, 2, 2, 3);
        assert_eq!(t.len(), 8);
        assert!(t.sizes.iter().all(|&s| s == 1));
        t.validate().unwrap();
    }

    #[test]
    fn size_count_mismatch_detected() {
        let mut t = fresh(2, 2, 2, 3);
        t.sizes.pop();
        let err = t.validate().unwrap_err();
        assert!(err.to_string().contains("size count mismatch"), "{err}");
    }

    #[test]
    fn coord_out_of_grid_detected() {
        let mut t = fresh(2, 2, 2, 3);
        t.coords[3].row = 2; // == height
        let err = t.validate().unwrap_err();
        assert!(err.to_string().contains("coordinate out of grid"), "{err}");
    }

    #[test]
    fn partition_from_targets_complement() {
        let p = PartitionResult::from_targets(&[0, 4], 8).unwrap();
        assert_eq!(p.target_idx, vec![0, 4]);
        assert_eq!(p.source_idx, vec![1, 2, 3, 5, 6, 7]);
    }

    #[test]
    fn partition_rejects_bad_targets() {
        assert!(PartitionResult::from_targets(&[9], 8).is_err());
        assert!(PartitionResult::from_targets(&[1, 1], 8).is_err());
    }

    #[test]
    fn merge_config_defaults_and_validation() {
        let cfg = MergeConfig::default();
        assert_eq!(cfg.gamma, 6);
        assert!((cfg.r_fraction - 0.8).abs() < 1e-12);
        cfg.validate().unwrap();
        assert!(MergeConfig { gamma: 1, ..cfg }.validate().is_err());
        assert!(MergeConfig {
            r_fraction: 0.0,
            ..cfg
        }
        .validate()
        .is_err());
    }
}
