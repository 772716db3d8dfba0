//! Deterministic synthetic stream generation, experiment driving,
//! retention-coverage metrics, and rank-correlation analysis tooling.
//!
//! Streams are fully determined by their config and seed. The
//! `loiter_then_move` motion is the adversarial construction: a prefix of
//! near-identical poses over geometrically rich scenes, followed by a sweep
//! across weak texture. Recency and key-similarity policies discard the
//! distinctive early geometry; coverage metrics make the difference visible
//! without any reconstruction network.
//!
//! Coverage proxies stand in for reconstruction accuracy (out of scope
//! here): pose dispersion mirrors viewpoint coverage, depth-variance mass
//! mirrors structural retention, confidence mass mirrors estimate
//! reliability. Key vectors are synthetic (hash-seeded unit vectors
//! perturbed toward a pose embedding so nearby poses produce correlated
//! keys) and are never presented as model-faithful.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{BaselineEngine, BaselineError, PolicyConfig, uniform_budget_plan};
use crate::budget::BudgetPlan;
use crate::domain::{
    Appearance, CoreError, FeatureGrid, FrameMeta, Grid, KeyBlock, Pose, ScoreWeights,
    TokenKind, TokenLayout, TokenRef,
};
use crate::engine::{EngineError, EngineState, EvictionStepResult};
use crate::scoring::{ScoreError, camera_change, depth_gradient_variance, feature_saliency, pool_confidence};

/// Fixed seed battery used by sweeps and acceptance checks.
pub const BATTERY_SEEDS: [u64; 20] = [
    0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19,
];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid dims: {0}")]
    InvalidDims(String),
    #[error("stream length must be >= 2, got {0}")]
    LengthTooShort(usize),
    #[error("series length mismatch: {xs} vs {ys}")]
    LengthMismatch { xs: usize, ys: usize },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("constant input: rank correlation undefined")]
    ConstantInput,
    #[error("unknown signal {name:?}; valid signals: {valid}")]
    UnknownSignal { name: String, valid: String },
    #[error("stream frames must carry keys for signal {0:?}")]
    MissingStreamKeys(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

// ── Trajectory configuration ────────────────────────────────────────────────

/// Grid dimensions of a synthetic stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamDims {
    pub h: usize,
    pub w: usize,
    pub hp: usize,
    pub wp: usize,
    pub channels: usize,
}

impl Default for StreamDims {
    fn default() -> Self {
        Self {
            h: 32,
            w: 32,
            hp: 24,
            wp: 24,
            channels: 4,
        }
    }
}

/// Camera motion model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Orbit { radius: f64, step: f64 },
    Corridor { step: f64 },
    LoiterThenMove { loiter_span: usize, step: f64 },
    RandomWalk { step: f64 },
}

/// Depth texture family. `Mixed` draws per-frame among the others with
/// random amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthTexture {
    Flat,
    Ramp,
    Blobs,
    Mixed,
}

/// Full generator configuration. Same config and seed always produce a
/// bit-identical stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub length: usize,
    pub motion: Motion,
    pub depth_texture: DepthTexture,
    pub noise_seed: u64,
    #[serde(default)]
    pub dims: StreamDims,
    #[serde(default = "default_registers")]
    pub registers: u32,
    /// Key vector dimension; 0 disables key generation.
    #[serde(default)]
    pub key_dim: usize,
    #[serde(default = "default_conf_floor")]
    pub conf_floor: f64,
    #[serde(default = "default_conf_ceil")]
    pub conf_ceil: f64,
}

fn default_registers() -> u32 {
    4
}

fn default_conf_floor() -> f64 {
    0.4
}

fn default_conf_ceil() -> f64 {
    0.95
}

impl TrajectoryConfig {
    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(self.registers, self.dims.hp, self.dims.wp)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.length < 2 {
            return Err(SimError::LengthTooShort(self.length));
        }
        let d = &self.dims;
        if d.h < 2 || d.w < 2 {
            return Err(SimError::InvalidDims(format!(
                "depth grid must be at least 2x2, got {}x{}",
                d.h, d.w
            )));
        }
        if d.hp < 2 || d.wp < 2 || d.hp > d.h || d.wp > d.w {
            return Err(SimError::InvalidDims(format!(
                "patch grid {}x{} must be at least 2x2 and within {}x{}",
                d.hp, d.wp, d.h, d.w
            )));
        }
        if d.channels == 0 {
            return Err(SimError::InvalidDims("channels must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.conf_floor)
            || !(0.0..=1.0).contains(&self.conf_ceil)
            || self.conf_floor > self.conf_ceil
        {
            return Err(SimError::InvalidDims(format!(
                "confidence band [{}, {}] must sit inside [0, 1]",
                self.conf_floor, self.conf_ceil
            )));
        }
        Ok(())
    }
}

// ── Stream generation ───────────────────────────────────────────────────────

fn unit_quat(x: f64, y: f64, z: f64, w: f64) -> [f64; 4] {
    let n = (x * x + y * y + z * z + w * w).sqrt();
    [w / n, x / n, y / n, z / n]
}

fn hash_u64(a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 over the packed inputs; stable across platforms.
    let mut v = a
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b.rotate_left(17))
        .wrapping_add(c.rotate_left(43));
    v ^= v >> 30;
    v = v.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    v ^= v >> 27;
    v = v.wrapping_mul(0x94d0_49bb_1331_11eb);
    v ^ (v >> 31)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Deterministic synthetic stream: poses per the motion model, depth grids
/// per the texture family, confidence fields inside the configured band,
/// feature grids whose contrast follows the per-frame texture gain, and
/// optional per-token key vectors.
pub fn generate_stream(config: &TrajectoryConfig) -> Result<Vec<FrameMeta>, SimError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.noise_seed);
    let d = config.dims;
    let layout = config.layout();

    // Pose embedding basis for key synthesis, drawn once per stream.
    let key_basis: Option<(Vec<Vec<f64>>, Vec<f64>)> = (config.key_dim > 0).then(|| {
        let mut basis_rng = ChaCha8Rng::seed_from_u64(config.noise_seed ^ 0xa5a5_5a5a_dead_beef);
        let mat: Vec<Vec<f64>> = (0..config.key_dim)
            .map(|_| (0..7).map(|_| basis_rng.random_range(-1.0..1.0)).collect())
            .collect();
        let phase: Vec<f64> = (0..config.key_dim)
            .map(|_| basis_rng.random_range(0.0..TAU))
            .collect();
        (mat, phase)
    });

    let mut frames = Vec::with_capacity(config.length);
    for t in 1..=config.length as u64 {
        let i = (t - 1) as f64;

        // Pose.
        let jitter = |rng: &mut ChaCha8Rng, scale: f64| {
            [
                rng.random_range(-scale..scale),
                rng.random_range(-scale..scale),
                rng.random_range(-scale..scale),
            ]
        };
        let (translation, yaw, texture_gain) = match config.motion {
            Motion::Orbit { radius, step } => {
                let angle = step * i;
                (
                    [radius * angle.cos(), radius * angle.sin(), 0.0],
                    angle,
                    1.0,
                )
            }
            Motion::Corridor { step } => {
                let j = jitter(&mut rng, step * 0.01);
                ([step * i + j[0], j[1], j[2]], 0.0, 1.0)
            }
            Motion::LoiterThenMove { loiter_span, step } => {
                if (t as usize) <= loiter_span {
                    let j = jitter(&mut rng, step * 1e-4);
                    (j, 0.0, 1.0)
                } else {
                    let k = (t as usize - loiter_span) as f64;
                    let j = jitter(&mut rng, step * 0.01);
                    (
                        [step * k + j[0], 0.05 * (0.2 * k).sin() + j[1], j[2]],
                        0.02 * k,
                        0.12,
                    )
                }
            }
            Motion::RandomWalk { step } => {
                let dir = unit_vector(&mut rng, 3);
                let k = i + 1.0;
                (
                    [
                        step * k * dir[0] * 0.6 + step * i * 0.4,
                        step * k * dir[1] * 0.6,
                        step * k * dir[2] * 0.6,
                    ],
                    rng.random_range(-0.3..0.3),
                    1.0,
                )
            }
        };
        let eps_q = 1e-3;
        let quaternion = unit_quat(
            rng.random_range(-eps_q..eps_q),
            rng.random_range(-eps_q..eps_q),
            (yaw / 2.0).sin() + rng.random_range(-eps_q..eps_q),
            (yaw / 2.0).cos(),
        );
        let pose = Pose::new(translation, quaternion, 500.0).expect("generated pose is valid");

        // Depth texture.
        let texture = match config.depth_texture {
            DepthTexture::Mixed => match rng.random_range(0..10u32) {
                0..=1 => DepthTexture::Flat,
                2..=4 => DepthTexture::Ramp,
                _ => DepthTexture::Blobs,
            },
            other => other,
        };
        let amp = texture_gain
            * match config.depth_texture {
                DepthTexture::Mixed => rng.random_range(0.5..1.5),
                _ => 1.0,
            };
        let depth = match texture {
            DepthTexture::Flat => {
                let level = 2.0 + rng.random_range(0.0..0.5);
                Grid::constant(d.h, d.w, level as f32)
            }
            DepthTexture::Ramp => {
                let slope = amp * rng.random_range(0.05..0.2);
                let base = 2.0 + rng.random_range(0.0..0.5);
                Grid::from_fn(d.h, d.w, |_, c| (base + slope * c as f64) as f32)
            }
            DepthTexture::Blobs | DepthTexture::Mixed => {
                let blob_count = rng.random_range(3..=6usize);
                let blobs: Vec<(f64, f64, f64, f64)> = (0..blob_count)
                    .map(|_| {
                        (
                            rng.random_range(0.0..d.h as f64),
                            rng.random_range(0.0..d.w as f64),
                            amp * rng.random_range(0.8..2.5),
                            rng.random_range(1.0..3.0),
                        )
                    })
                    .collect();
                Grid::from_fn(d.h, d.w, |r, c| {
                    let mut v = 2.0;
                    for &(cy, cx, a, sigma) in &blobs {
                        let dr = r as f64 - cy;
                        let dc = c as f64 - cx;
                        v += a * (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp();
                    }
                    v as f32
                })
            }
        };

        // Confidence fields inside the configured band.
        let conf_grid = |rng: &mut ChaCha8Rng| {
            let base = rng.random_range(config.conf_floor..=config.conf_ceil);
            let wobble = 0.05f64.min((config.conf_ceil - config.conf_floor) / 2.0);
            let mut values = Vec::with_capacity(d.h * d.w);
            for _ in 0..d.h * d.w {
                let v = (base + rng.random_range(-wobble..=wobble))
                    .clamp(config.conf_floor, config.conf_ceil);
                values.push(v as f32);
            }
            Grid::new(d.h, d.w, values).expect("conf grid shape")
        };
        let depth_conf = conf_grid(&mut rng);
        let point_conf = conf_grid(&mut rng);

        // Feature grid: sinusoidal contrast scaled by the texture gain plus
        // low-amplitude noise.
        let mut features = Vec::with_capacity(d.hp * d.wp * d.channels);
        let channel_params: Vec<(f64, f64, f64, f64)> = (0..d.channels)
            .map(|_| {
                (
                    rng.random_range(0.3..1.5),
                    rng.random_range(0.3..1.5),
                    rng.random_range(0.0..TAU),
                    rng.random_range(0.0..TAU),
                )
            })
            .collect();
        for r in 0..d.hp {
            for c in 0..d.wp {
                for &(fr, fc, pr, pc) in &channel_params {
                    let v = texture_gain * (fr * r as f64 + pr).sin() * (fc * c as f64 + pc).cos()
                        + 0.02 * rng.random_range(-1.0..1.0);
                    features.push(v as f32);
                }
            }
        }
        let features = FeatureGrid::new(d.hp, d.wp, d.channels, features).expect("feature shape");

        // Synthetic keys: pose embedding plus a hash-seeded per-token unit
        // vector, normalized. Nearby poses give correlated keys.
        let keys = key_basis.as_ref().map(|(mat, phase)| {
            let uq = pose.unit_quaternion();
            // Translations are damped before the sinusoidal projection so
            // key similarity decays with pose distance instead of aliasing
            // over long sweeps.
            let pose_vec = [
                translation[0] * 0.12,
                translation[1] * 0.12,
                translation[2] * 0.12,
                uq[0],
                uq[1],
                uq[2],
                uq[3],
            ];
            let embed: Vec<f64> = mat
                .iter()
                .zip(phase)
                .map(|(row, ph)| {
                    (row.iter().zip(pose_vec.iter()).map(|(m, p)| m * p).sum::<f64>() + ph).sin()
                })
                .collect();
            let mut data = Vec::with_capacity(layout.tokens_per_frame() * config.key_dim);
            for token in layout.frame_tokens(t) {
                let rank = layout.kind_rank(token.kind) as u64;
                let mut token_rng =
                    ChaCha8Rng::seed_from_u64(hash_u64(config.noise_seed, t, rank));
                let noise = unit_vector(&mut token_rng, config.key_dim);
                let mut key: Vec<f64> = embed
                    .iter()
                    .zip(&noise)
                    .map(|(e, n)| e + 0.5 * n)
                    .collect();
                let norm: f64 = key.iter().map(|v| v * v).sum::<f64>().sqrt();
                for v in key.iter_mut() {
                    *v /= norm;
                }
                data.extend(key.iter().map(|&v| v as f32));
            }
            KeyBlock::new(config.key_dim, data).expect("key shape")
        });

        frames.push(FrameMeta {
            frame_index: t,
            pose,
            depth,
            depth_conf,
            point_conf,
            appearance: Appearance::Features(features),
            keys,
        });
    }
    Ok(frames)
}

// ── Experiment driving ──────────────────────────────────────────────────────

/// Per-layer coverage scalars over a final retained set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageScalars {
    /// Mean pairwise translation distance among retained frames.
    pub pose_dispersion: f64,
    /// Fraction of the stream's total depth-gradient-variance mass whose
    /// frames are still represented.
    pub retained_depth_variance_mass: f64,
    /// Fraction of total pooled-confidence mass carried by retained patches.
    pub retained_confidence_mass: f64,
    /// Fraction of all streamed special tokens still retained.
    pub special_survival_rate: f64,
}

/// Coverage over the final retained sets: scalars for the reference layer
/// (the max-budget layer by default) and averaged across layers, plus the
/// per-layer occupancy series (pre-append, post-append) and the reference
/// layer's per-step dispersion series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub reference_layer: usize,
    pub reference: CoverageScalars,
    pub layer_mean: CoverageScalars,
    pub per_layer_occupancy: Vec<Vec<(usize, usize)>>,
    pub reference_dispersion_series: Vec<f64>,
}

/// Step results plus coverage for one policy run.
#[derive(Debug)]
pub struct ExperimentResult {
    pub steps: Vec<EvictionStepResult>,
    pub coverage: CoverageReport,
    /// Total retained tokens after the final step (post-append).
    pub final_retained_tokens: usize,
}

enum PolicyEngine {
    Scored(Box<EngineState>),
    Baseline(BaselineEngine),
}

impl PolicyEngine {
    fn step(&mut self, frame: &FrameMeta) -> Result<EvictionStepResult, SimError> {
        match self {
            PolicyEngine::Scored(e) => Ok(e.step(frame.clone())?),
            PolicyEngine::Baseline(b) => Ok(b.step(frame)?),
        }
    }

    fn layer_tokens(&self, layer: usize) -> Vec<TokenRef> {
        match self {
            PolicyEngine::Scored(e) => e.layers()[layer].tokens(),
            PolicyEngine::Baseline(b) => b.layer_tokens(layer).to_vec(),
        }
    }

    fn layer_frames(&self, layer: usize) -> Vec<u64> {
        match self {
            PolicyEngine::Scored(e) => e.layers()[layer].frames().keys().copied().collect(),
            PolicyEngine::Baseline(b) => {
                let mut frames: Vec<u64> =
                    b.layer_tokens(layer).iter().map(|r| r.frame).collect();
                frames.dedup();
                frames
            }
        }
    }
}

/// Builds the policy engine, resolving `uniform_budget_ghost` to the scored
/// engine over a uniform split of the plan's total.
fn build_policy(
    policy: &PolicyConfig,
    plan: &BudgetPlan,
    layout: TokenLayout,
    weights: &ScoreWeights,
) -> Result<PolicyEngine, SimError> {
    Ok(match *policy {
        PolicyConfig::Ghost { mode, ablation } => PolicyEngine::Scored(Box::new(
            EngineState::new(plan.clone(), layout, *weights, mode, ablation)?,
        )),
        PolicyConfig::UniformBudgetGhost { mode, ablation } => {
            let uniform = uniform_budget_plan(plan.layer_count(), plan.total);
            PolicyEngine::Scored(Box::new(EngineState::new(
                uniform, layout, *weights, mode, ablation,
            )?))
        }
        PolicyConfig::KeySimilarity { .. }
        | PolicyConfig::SinkRecent { .. }
        | PolicyConfig::RecencyWindow => {
            PolicyEngine::Baseline(BaselineEngine::new(policy, plan, layout)?)
        }
    })
}

fn mean_pairwise_distance(frames: &[u64], stream: &[FrameMeta]) -> f64 {
    if frames.len() < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut pairs = 0u64;
    for (i, &a) in frames.iter().enumerate() {
        let ta = stream[(a - 1) as usize].pose.translation();
        for &b in &frames[i + 1..] {
            let tb = stream[(b - 1) as usize].pose.translation();
            sum += ((ta[0] - tb[0]).powi(2) + (ta[1] - tb[1]).powi(2) + (ta[2] - tb[2]).powi(2))
                .sqrt();
            pairs += 1;
        }
    }
    sum / pairs as f64
}

fn fraction(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        1.0
    } else {
        (num / den).clamp(0.0, 1.0)
    }
}

/// Drives a policy over the stream and reports per-step results plus
/// coverage on the final retained sets.
pub fn run_experiment(
    stream: &[FrameMeta],
    layout: TokenLayout,
    policy: &PolicyConfig,
    plan: &BudgetPlan,
    weights: &ScoreWeights,
) -> Result<ExperimentResult, SimError> {
    let mut engine = build_policy(policy, plan, layout, weights)?;
    let layer_count = plan.layer_count();
    let n = layout.tokens_per_frame();

    // Reference layer: max budget, ties to the lowest index. For the
    // uniform-budget variant the budgets are flat, so layer 0 wins.
    let effective_budgets: Vec<usize> = match policy {
        PolicyConfig::UniformBudgetGhost { .. } => {
            uniform_budget_plan(layer_count, plan.total).budgets
        }
        _ => plan.budgets.clone(),
    };
    let reference_layer = effective_budgets
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.cmp(b).then(ib.cmp(ia)))
        .map(|(i, _)| i)
        .unwrap_or(0);

    let mut steps = Vec::with_capacity(stream.len());
    let mut per_layer_occupancy: Vec<Vec<(usize, usize)>> =
        vec![Vec::with_capacity(stream.len()); layer_count];
    let mut dispersion_series = Vec::with_capacity(stream.len());

    for frame in stream {
        let result = engine.step(frame)?;
        for (layer, counts) in result.retained_counts.iter().enumerate() {
            let pre = counts.total();
            per_layer_occupancy[layer].push((pre, pre + n));
        }
        dispersion_series.push(mean_pairwise_distance(
            &engine.layer_frames(reference_layer),
            stream,
        ));
        steps.push(result);
    }

    // Stream totals for the mass fractions.
    let total_frames = stream.len() as f64;
    let specials_per_frame = layout.specials_per_frame() as f64;
    let mut geo_raw = BTreeMap::new();
    let mut conf_mass: BTreeMap<(u64, u32), f64> = BTreeMap::new();
    let mut geo_total = 0.0;
    let mut conf_total = 0.0;
    for frame in stream {
        let geo = depth_gradient_variance(&frame.depth)?;
        geo_total += geo;
        geo_raw.insert(frame.frame_index, geo);
        let dc = pool_confidence(&frame.depth_conf, layout.patch_rows, layout.patch_cols)?;
        let pc = pool_confidence(&frame.point_conf, layout.patch_rows, layout.patch_cols)?;
        for p in 0..dc.len() {
            let mass = (dc[p] + pc[p]) / 2.0;
            conf_total += mass;
            conf_mass.insert((frame.frame_index, p as u32), mass);
        }
    }

    let scalars_of = |layer: usize| -> CoverageScalars {
        let tokens = engine.layer_tokens(layer);
        let mut frames: Vec<u64> = tokens.iter().map(|r| r.frame).collect();
        frames.dedup();
        let geo_kept: f64 = frames.iter().map(|f| geo_raw[f]).sum();
        let conf_kept: f64 = tokens
            .iter()
            .filter_map(|r| match r.kind {
                TokenKind::Patch(p) => Some(conf_mass[&(r.frame, p)]),
                _ => None,
            })
            .sum();
        let specials_kept = tokens.iter().filter(|r| r.is_special()).count() as f64;
        CoverageScalars {
            pose_dispersion: mean_pairwise_distance(&frames, stream),
            retained_depth_variance_mass: fraction(geo_kept, geo_total),
            retained_confidence_mass: fraction(conf_kept, conf_total),
            special_survival_rate: fraction(specials_kept, total_frames * specials_per_frame),
        }
    };

    let per_layer: Vec<CoverageScalars> = (0..layer_count).map(scalars_of).collect();
    let mean = |f: fn(&CoverageScalars) -> f64| {
        per_layer.iter().map(f).sum::<f64>() / layer_count as f64
    };
    let layer_mean = CoverageScalars {
        pose_dispersion: mean(|s| s.pose_dispersion),
        retained_depth_variance_mass: mean(|s| s.retained_depth_variance_mass),
        retained_confidence_mass: mean(|s| s.retained_confidence_mass),
        special_survival_rate: mean(|s| s.special_survival_rate),
    };

    let final_retained_tokens = (0..layer_count)
        .map(|l| engine.layer_tokens(l).len())
        .sum();

    Ok(ExperimentResult {
        steps,
        coverage: CoverageReport {
            reference_layer,
            reference: per_layer[reference_layer],
            layer_mean,
            per_layer_occupancy,
            reference_dispersion_series: dispersion_series,
        },
        final_retained_tokens,
    })
}

// ── Rank correlation ────────────────────────────────────────────────────────

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_unstable_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Average rank over the tie run (1-based ranks).
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling. Constant input
/// makes the correlation undefined and is reported explicitly.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, SimError> {
    if xs.len() != ys.len() {
        return Err(SimError::LengthMismatch {
            xs: xs.len(),
            ys: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(SimError::TooFewSamples(xs.len()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(SimError::ConstantInput);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Named per-frame signals for correlation studies.
pub const SIGNAL_NAMES: [&str; 7] = [
    "camera_change",
    "depth_variance",
    "recency",
    "saliency_mean",
    "depth_conf_mean",
    "point_conf_mean",
    "key_similarity",
];

/// Per-frame series of a named signal over frames `1..T-1` (the final frame
/// serves as the key-similarity query and is excluded from every series so
/// they stay aligned).
pub fn signal_series(stream: &[FrameMeta], name: &str) -> Result<Vec<f64>, SimError> {
    let upto = stream.len().saturating_sub(1);
    let frames = &stream[..upto];
    match name {
        "camera_change" => Ok(frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                if i == 0 {
                    0.0
                } else {
                    camera_change(&f.pose, &stream[i - 1].pose)
                }
            })
            .collect()),
        "depth_variance" => frames
            .iter()
            .map(|f| Ok(depth_gradient_variance(&f.depth)?))
            .collect(),
        "recency" => Ok(frames
            .iter()
            .map(|f| f.frame_index as f64 / stream.len() as f64)
            .collect()),
        "saliency_mean" => frames
            .iter()
            .map(|f| {
                let sal: Vec<f64> = match &f.appearance {
                    Appearance::Features(grid) => feature_saliency(grid)?,
                    Appearance::Saliency(grid) => {
                        grid.data().iter().map(|&v| v as f64).collect()
                    }
                };
                Ok(sal.iter().sum::<f64>() / sal.len() as f64)
            })
            .collect(),
        "depth_conf_mean" => Ok(frames
            .iter()
            .map(|f| {
                let data = f.depth_conf.data();
                data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64
            })
            .collect()),
        "point_conf_mean" => Ok(frames
            .iter()
            .map(|f| {
                let data = f.point_conf.data();
                data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64
            })
            .collect()),
        "key_similarity" => {
            let query_block = stream
                .last()
                .and_then(|f| f.keys.as_ref())
                .ok_or_else(|| SimError::MissingStreamKeys(name.to_string()))?;
            // Query: normalized mean of the final frame's token keys.
            let dim = query_block.dim();
            let mut query = vec![0.0f64; dim];
            for i in 0..query_block.count() {
                for (q, &v) in query.iter_mut().zip(query_block.key(i)) {
                    *q += v as f64;
                }
            }
            let qn: f64 = query.iter().map(|v| v * v).sum::<f64>().sqrt();
            frames
                .iter()
                .map(|f| {
                    let block = f
                        .keys
                        .as_ref()
                        .ok_or_else(|| SimError::MissingStreamKeys(name.to_string()))?;
                    let mut sum = 0.0;
                    for i in 0..block.count() {
                        let key = block.key(i);
                        let dot: f64 = key
                            .iter()
                            .zip(&query)
                            .map(|(&k, &q)| k as f64 * q)
                            .sum();
                        let kn: f64 =
                            key.iter().map(|&k| (k as f64) * (k as f64)).sum::<f64>().sqrt();
                        sum += if kn > 0.0 && qn > 0.0 { dot / (kn * qn) } else { 0.0 };
                    }
                    Ok(sum / block.count() as f64)
                })
                .collect()
        }
        _ => Err(SimError::UnknownSignal {
            name: name.to_string(),
            valid: SIGNAL_NAMES.join(", "),
        }),
    }
}

/// Spearman rank correlation between two named per-frame signals.
pub fn correlation_study(stream: &[FrameMeta], a: &str, b: &str) -> Result<f64, SimError> {
    let xs = signal_series(stream, a)?;
    let ys = signal_series(stream, b)?;
    spearman(&xs, &ys)
}
