//! Pure importance-scoring functions, split into raw-score and normalization
//! stages so the incremental cache can store raw components.
//!
//! Frame-level signals (camera change, depth-gradient variance, recency) and
//! token-level signals (feature saliency, pooled confidences) each pass
//! through a logistic sigmoid, get weighted, and are normalized by the
//! maximum over the candidate set. The combined per-patch score mixes both
//! levels; special tokens instead receive a deterministic boost on top of
//! the frame score.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::domain::{Grid, FeatureGrid, Pose, ScoreWeights, TokenRef};

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("grid must be at least 2x2, got {rows}x{cols}")]
    DegenerateGrid { rows: usize, cols: usize },
    #[error("invalid time: t={t}, t_cur={t_cur}")]
    InvalidTime { t: u64, t_cur: u64 },
    #[error("empty input")]
    EmptyInput,
    #[error("special rank {rank} out of range for {specials} special tokens")]
    RankOutOfRange { rank: u32, specials: u32 },
    #[error("pooling target {th}x{tw} larger than source {sh}x{sw}")]
    PoolTargetTooLarge {
        sh: usize,
        sw: usize,
        th: usize,
        tw: usize,
    },
}

/// Standard logistic.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ── Frame-level raw scores ──────────────────────────────────────────────────

/// Raw (pre-sigmoid) frame-level components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameRawScores {
    pub cam: f64,
    pub geo: f64,
    pub temp: f64,
}

/// Camera change between consecutive poses: translation distance plus one
/// minus the absolute unit-quaternion dot product. Symmetric, nonnegative,
/// and invariant to quaternion sign (antipodal quaternions encode the same
/// rotation).
pub fn camera_change(pose: &Pose, prev: &Pose) -> f64 {
    let t = pose.translation();
    let p = prev.translation();
    let dt = ((t[0] - p[0]).powi(2) + (t[1] - p[1]).powi(2) + (t[2] - p[2]).powi(2)).sqrt();
    let qa = pose.unit_quaternion();
    let qb = prev.unit_quaternion();
    let dot: f64 = qa.iter().zip(qb.iter()).map(|(a, b)| a * b).sum();
    dt + 1.0 - dot.abs().min(1.0)
}

/// Population variance of the forward-difference gradient magnitude of a
/// depth grid. The trailing row/column difference is zero in that direction
/// (replicate-edge boundary).
pub fn depth_gradient_variance(depth: &Grid) -> Result<f64, ScoreError> {
    let (rows, cols) = (depth.rows(), depth.cols());
    if rows < 2 || cols < 2 {
        return Err(ScoreError::DegenerateGrid { rows, cols });
    }
    let n = (rows * cols) as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let here = depth.value(r, c) as f64;
            let dx = if c + 1 < cols {
                depth.value(r, c + 1) as f64 - here
            } else {
                0.0
            };
            let dy = if r + 1 < rows {
                depth.value(r + 1, c) as f64 - here
            } else {
                0.0
            };
            let g = (dx * dx + dy * dy).sqrt();
            sum += g;
            sum_sq += g * g;
        }
    }
    let mean = sum / n;
    Ok((sum_sq / n - mean * mean).max(0.0))
}

/// Linear recency schedule `t / t_cur` in `[0, 1]`.
pub fn temporal_recency(t: u64, t_cur: u64) -> Result<f64, ScoreError> {
    if t_cur == 0 || t == 0 || t > t_cur {
        return Err(ScoreError::InvalidTime { t, t_cur });
    }
    Ok(t as f64 / t_cur as f64)
}

/// Weighted sigmoid aggregate of one frame's raw components (the numerator
/// of the frame score, before max-division).
#[inline]
pub fn frame_aggregate(raw: &FrameRawScores, weights: &ScoreWeights) -> f64 {
    let s = &weights.sigmoid_scales;
    weights.w_cam * sigmoid(s.cam * raw.cam)
        + weights.w_geo * sigmoid(s.geo * raw.geo)
        + weights.w_temp * sigmoid(s.temp * raw.temp)
}

/// Frame-level scores: each frame's weighted sigmoid aggregate divided by
/// the maximum aggregate over all given frames plus `eps_norm`. Every output
/// lies in (0, 1); the argmax frame maps to `max / (max + eps)`.
pub fn frame_scores(
    raw: &BTreeMap<u64, FrameRawScores>,
    weights: &ScoreWeights,
) -> Result<BTreeMap<u64, f64>, ScoreError> {
    if raw.is_empty() {
        return Err(ScoreError::EmptyInput);
    }
    let aggregates: BTreeMap<u64, f64> = raw
        .iter()
        .map(|(&t, r)| (t, frame_aggregate(r, weights)))
        .collect();
    let max = aggregates.values().cloned().fold(f64::MIN, f64::max);
    Ok(aggregates
        .into_iter()
        .map(|(t, a)| (t, a / (max + weights.eps_norm)))
        .collect())
}

// ── Token-level raw scores ──────────────────────────────────────────────────

/// Raw token-level component grids at patch resolution, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRawScores {
    rows: usize,
    cols: usize,
    pub sal: Vec<f64>,
    pub depth_conf: Vec<f64>,
    pub point_conf: Vec<f64>,
}

impl PatchRawScores {
    pub fn new(
        rows: usize,
        cols: usize,
        sal: Vec<f64>,
        depth_conf: Vec<f64>,
        point_conf: Vec<f64>,
    ) -> Self {
        let n = rows * cols;
        assert!(
            sal.len() == n && depth_conf.len() == n && point_conf.len() == n,
            "component grids must share the patch shape"
        );
        Self {
            rows,
            cols,
            sal,
            depth_conf,
            point_conf,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }
}

/// Spatial gradient magnitude of the feature grid: per patch,
/// `sqrt(|dx F|^2 + |dy F|^2)` with channel-Euclidean norms, forward
/// differences, and replicate-edge boundary.
pub fn feature_saliency(features: &FeatureGrid) -> Result<Vec<f64>, ScoreError> {
    let (rows, cols) = (features.rows(), features.cols());
    if rows < 2 || cols < 2 {
        return Err(ScoreError::DegenerateGrid { rows, cols });
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let here = features.vector(r, c);
            let mut dx2 = 0.0f64;
            if c + 1 < cols {
                for (a, b) in features.vector(r, c + 1).iter().zip(here) {
                    let d = *a as f64 - *b as f64;
                    dx2 += d * d;
                }
            }
            let mut dy2 = 0.0f64;
            if r + 1 < rows {
                for (a, b) in features.vector(r + 1, c).iter().zip(here) {
                    let d = *a as f64 - *b as f64;
                    dy2 += d * d;
                }
            }
            out.push((dx2 + dy2).sqrt());
        }
    }
    Ok(out)
}

/// Adaptive average pooling to `target_rows x target_cols`: output cell
/// `(i, j)` averages input rows `[floor(i*H/H_p), ceil((i+1)*H/H_p))` and
/// the analogous columns. Windows partition-cover the input.
pub fn pool_confidence(
    conf: &Grid,
    target_rows: usize,
    target_cols: usize,
) -> Result<Vec<f64>, ScoreError> {
    let (rows, cols) = (conf.rows(), conf.cols());
    if target_rows == 0 || target_cols == 0 || target_rows > rows || target_cols > cols {
        return Err(ScoreError::PoolTargetTooLarge {
            sh: rows,
            sw: cols,
            th: target_rows,
            tw: target_cols,
        });
    }
    let bound = |i: usize, n: usize, t: usize| -> (usize, usize) {
        let lo = (i * n) / t;
        let hi = ((i + 1) * n).div_ceil(t);
        (lo, hi)
    };
    let mut out = Vec::with_capacity(target_rows * target_cols);
    for i in 0..target_rows {
        let (r0, r1) = bound(i, rows, target_rows);
        for j in 0..target_cols {
            let (c0, c1) = bound(j, cols, target_cols);
            let mut sum = 0.0f64;
            for r in r0..r1 {
                for c in c0..c1 {
                    sum += conf.value(r, c) as f64;
                }
            }
            out.push(sum / ((r1 - r0) * (c1 - c0)) as f64);
        }
    }
    Ok(out)
}

/// Weighted sigmoid aggregate of one patch's raw components.
#[inline]
pub fn token_aggregate(sal: f64, dc: f64, pc: f64, weights: &ScoreWeights) -> f64 {
    let s = &weights.sigmoid_scales;
    weights.w_sal * sigmoid(s.sal * sal)
        + weights.w_dc * sigmoid(s.dc * dc)
        + weights.w_pc * sigmoid(s.pc * pc)
}

/// Token-level scores: per-patch weighted sigmoid aggregates divided by a
/// single global maximum over every frame and patch in `raw`, plus
/// `eps_norm`. One normalizer for the whole candidate set, not per frame.
pub fn token_scores(
    raw: &BTreeMap<u64, PatchRawScores>,
    weights: &ScoreWeights,
) -> Result<BTreeMap<(u64, u32), f64>, ScoreError> {
    if raw.is_empty() {
        return Err(ScoreError::EmptyInput);
    }
    let mut aggregates: BTreeMap<(u64, u32), f64> = BTreeMap::new();
    let mut max = f64::MIN;
    for (&t, grids) in raw {
        for p in 0..grids.patch_count() {
            let a = token_aggregate(
                grids.sal[p],
                grids.depth_conf[p],
                grids.point_conf[p],
                weights,
            );
            max = max.max(a);
            aggregates.insert((t, p as u32), a);
        }
    }
    Ok(aggregates
        .into_iter()
        .map(|(k, a)| (k, a / (max + weights.eps_norm)))
        .collect())
}

// ── Combination, boost, renormalization ─────────────────────────────────────

/// Combined per-patch importance: `w_f * s_frame + w_k * s_token`.
#[inline]
pub fn combined_score(s_frame: f64, s_token: f64, weights: &ScoreWeights) -> f64 {
    weights.w_f * s_frame + weights.w_k * s_token
}

/// Deterministic special-token boost: `s_frame + delta_boost + eps_tb * rank`
/// with rank 0 for the camera token and k for register k. Strictly increasing
/// in rank, so same-frame specials order totally and reproducibly.
pub fn special_boost(
    s_frame: f64,
    rank: u32,
    specials_per_frame: u32,
    weights: &ScoreWeights,
) -> Result<f64, ScoreError> {
    if rank >= specials_per_frame {
        return Err(ScoreError::RankOutOfRange {
            rank,
            specials: specials_per_frame,
        });
    }
    Ok(s_frame + weights.delta_boost + weights.eps_tb * rank as f64)
}

/// Min-max renormalization over all candidate tokens, applied after boosting
/// and before top-K selection. Strictly monotone when max > min, so top-K
/// sets are invariant under it; when all scores are equal every output is
/// 1.0 (no token is distinguishable; the downstream tie-break decides).
pub fn final_renormalize(
    scores: &BTreeMap<TokenRef, f64>,
) -> Result<BTreeMap<TokenRef, f64>, ScoreError> {
    if scores.is_empty() {
        return Err(ScoreError::EmptyInput);
    }
    let min = scores.values().cloned().fold(f64::MAX, f64::min);
    let max = scores.values().cloned().fold(f64::MIN, f64::max);
    let range = max - min;
    Ok(scores
        .iter()
        .map(|(&k, &v)| (k, if range == 0.0 { 1.0 } else { (v - min) / range }))
        .collect())
}
