//! Online token eviction: maintains one [`LayerCache`] per transformer layer
//! against a [`BudgetPlan`], scoring candidates with the hierarchical
//! importance signals and retaining the top of each layer's budget.
//!
//! Per frame, each over-budget layer assembles scores from its cached raw
//! components plus the newly computed current-frame components (the
//! incremental path), normalizes over that joint candidate set, boosts
//! special tokens, selects the top `B` cached tokens, and prunes the raw
//! cache. The new frame's tokens are then appended to every layer, so
//! occupancy transiently overshoots by exactly one frame. Normalizers are
//! recomputed every step; only pre-sigmoid raw components are cached,
//! because the candidate set (and hence every maximum) changes per step.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{BudgetPlan, BudgetError};
use crate::domain::{
    Appearance, CoreError, FrameMeta, FrameRawEntry, Grid, LayerCache, PatchComponents, Pose,
    ScoreWeights, TokenLayout, TokenRef, validate_frame,
};
use crate::scoring::{
    FrameRawScores, PatchRawScores, ScoreError, camera_change, depth_gradient_variance,
    feature_saliency, frame_aggregate, pool_confidence, special_boost, token_aggregate,
};

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("frame index {frame} not greater than last seen {last}")]
    NonMonotoneFrame { frame: u64, last: u64 },
    #[error("frame index must be >= 1")]
    ZeroFrameIndex,
    #[error("unknown frame {0}")]
    UnknownFrame(u64),
    #[error("frame patch grid {got_rows}x{got_cols} does not match layout {rows}x{cols}")]
    LayoutMismatch {
        rows: usize,
        cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
}

/// Eviction mode: standard ranking, or strict protection where special
/// tokens never compete with patches and are always retained (unless the
/// budget cannot even hold the specials, in which case they compete among
/// themselves by boosted score).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionMode {
    Standard,
    StrictProtection,
}

/// Scoring ablations: knock out one signal (remaining frame weights are
/// renormalized proportionally), keep a single level, or drop the boost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    FrameOnly,
    TokenOnly,
    NoCam,
    NoGeo,
    NoTemp,
    NoBoost,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::FrameOnly,
        Ablation::TokenOnly,
        Ablation::NoCam,
        Ablation::NoGeo,
        Ablation::NoTemp,
        Ablation::NoBoost,
    ];

    /// Derives the effective weights for this ablation.
    pub fn apply(self, base: &ScoreWeights) -> ScoreWeights {
        let mut w = *base;
        match self {
            Ablation::Full => {}
            Ablation::FrameOnly => {
                w.w_f = 1.0;
                w.w_k = 0.0;
            }
            Ablation::TokenOnly => {
                w.w_f = 0.0;
                w.w_k = 1.0;
            }
            Ablation::NoCam => zero_and_renormalize(&mut w, 0),
            Ablation::NoGeo => zero_and_renormalize(&mut w, 1),
            Ablation::NoTemp => zero_and_renormalize(&mut w, 2),
            Ablation::NoBoost => w.delta_boost = 0.0,
        }
        w
    }
}

fn zero_and_renormalize(w: &mut ScoreWeights, which: usize) {
    let total = w.w_cam + w.w_geo + w.w_temp;
    let fields: [&mut f64; 3] = [&mut w.w_cam, &mut w.w_geo, &mut w.w_temp];
    let mut remaining = total;
    for (i, f) in fields.into_iter().enumerate() {
        if i == which {
            remaining -= *f;
            *f = 0.0;
        }
    }
    if remaining > 0.0 {
        let scale = total / remaining;
        if which != 0 {
            w.w_cam *= scale;
        }
        if which != 1 {
            w.w_geo *= scale;
        }
        if which != 2 {
            w.w_temp *= scale;
        }
    }
}

/// Raw-score computation counters. Frame evals count per-frame scalar
/// computations (camera change, depth variance); patch evals count
/// per-patch grid computations (saliency plus pooled confidences).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounter {
    pub frame_evals: u64,
    pub patch_evals: u64,
}

impl EvalCounter {
    pub fn total(&self) -> u64 {
        self.frame_evals + self.patch_evals
    }
}

/// Retained counts by token kind for one layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub camera: usize,
    pub registers: usize,
    pub patches: usize,
}

impl KindCounts {
    pub fn total(&self) -> usize {
        self.camera + self.registers + self.patches
    }
}

/// Outcome of one eviction step: per-layer evicted refs (canonical order)
/// and per-layer retained counts measured post-eviction, pre-append.
#[derive(Debug, Clone, PartialEq)]
pub struct EvictionStepResult {
    pub frame_index: u64,
    pub evicted: Vec<Vec<TokenRef>>,
    pub retained_counts: Vec<KindCounts>,
    pub step_time: Duration,
}

/// Geometry outputs that become available only after a forward pass; used
/// to lazily refresh a frame's stored metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutputs {
    pub pose: Pose,
    pub depth: Grid,
    pub depth_conf: Grid,
    pub point_conf: Grid,
}

/// Full raw components of one frame: frame-level scalars plus all patch
/// component grids.
#[derive(Debug, Clone, PartialEq)]
struct FrameRaw {
    cam: f64,
    geo: f64,
    patch: PatchRawScores,
}

impl FrameRaw {
    /// Full-frame cache entry (components indexable by patch id).
    fn to_entry(&self) -> FrameRawEntry {
        FrameRawEntry {
            cam: self.cam,
            geo: self.geo,
            patch_components: (0..self.patch.patch_count())
                .map(|p| PatchComponents {
                    sal: self.patch.sal[p],
                    dc: self.patch.depth_conf[p],
                    pc: self.patch.point_conf[p],
                })
                .collect(),
        }
    }
}

struct FrameRecord {
    meta: FrameMeta,
    prev_pose: Option<Pose>,
}

/// The online eviction engine: per-layer caches, retained frame metadata,
/// and the configuration that drives scoring.
pub struct EngineState {
    layers: Vec<LayerCache>,
    records: BTreeMap<u64, FrameRecord>,
    plan: BudgetPlan,
    weights: ScoreWeights,
    effective: ScoreWeights,
    mode: EvictionMode,
    ablation: Ablation,
    layout: TokenLayout,
    last_frame: Option<u64>,
    last_pose: Option<Pose>,
    evals: EvalCounter,
}

impl EngineState {
    pub fn new(
        plan: BudgetPlan,
        layout: TokenLayout,
        weights: ScoreWeights,
        mode: EvictionMode,
        ablation: Ablation,
    ) -> Result<Self, EngineError> {
        weights.validate()?;
        plan.validate()?;
        let layers = plan
            .budgets
            .iter()
            .enumerate()
            .map(|(i, &b)| LayerCache::new(i, b))
            .collect::<Result<Vec<_>, _>>()?;
        let effective = ablation.apply(&weights);
        Ok(Self {
            layers,
            records: BTreeMap::new(),
            plan,
            weights,
            effective,
            mode,
            ablation,
            layout,
            last_frame: None,
            last_pose: None,
            evals: EvalCounter::default(),
        })
    }

    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    pub fn plan(&self) -> &BudgetPlan {
        &self.plan
    }

    pub fn weights(&self) -> &ScoreWeights {
        &self.weights
    }

    pub fn effective_weights(&self) -> &ScoreWeights {
        &self.effective
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn mode(&self) -> EvictionMode {
        self.mode
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn eval_counter(&self) -> EvalCounter {
        self.evals
    }

    /// Frames currently backed by metadata (exactly those referenced by at
    /// least one layer after each step).
    pub fn metadata_frames(&self) -> Vec<u64> {
        self.records.keys().copied().collect()
    }

    pub fn holds_metadata(&self, frame: u64) -> bool {
        self.records.contains_key(&frame)
    }

    fn check_frame(&self, frame: &FrameMeta) -> Result<(), EngineError> {
        if frame.frame_index == 0 {
            return Err(EngineError::ZeroFrameIndex);
        }
        if let Some(last) = self.last_frame {
            if frame.frame_index <= last {
                return Err(EngineError::NonMonotoneFrame {
                    frame: frame.frame_index,
                    last,
                });
            }
        }
        let (rows, cols) = (self.layout.patch_rows, self.layout.patch_cols);
        if frame.patch_rows() != rows || frame.patch_cols() != cols {
            return Err(EngineError::LayoutMismatch {
                rows,
                cols,
                got_rows: frame.patch_rows(),
                got_cols: frame.patch_cols(),
            });
        }
        Ok(())
    }

    fn compute_raw(
        layout: &TokenLayout,
        evals: &mut EvalCounter,
        meta: &FrameMeta,
        prev_pose: Option<&Pose>,
    ) -> Result<FrameRaw, EngineError> {
        let cam = prev_pose.map_or(0.0, |p| camera_change(&meta.pose, p));
        let geo = depth_gradient_variance(&meta.depth)?;
        let (rows, cols) = (layout.patch_rows, layout.patch_cols);
        let sal = match &meta.appearance {
            Appearance::Features(f) => feature_saliency(f)?,
            Appearance::Saliency(g) => g.data().iter().map(|&v| v as f64).collect(),
        };
        let dc = pool_confidence(&meta.depth_conf, rows, cols)?;
        let pc = pool_confidence(&meta.point_conf, rows, cols)?;
        evals.frame_evals += 1;
        evals.patch_evals += (rows * cols) as u64;
        Ok(FrameRaw {
            cam,
            geo,
            patch: PatchRawScores::new(rows, cols, sal, dc, pc),
        })
    }

    /// One eviction step on the incremental path: cached raw scores are
    /// reused and only the incoming frame's raw scores are computed.
    pub fn step(&mut self, frame: FrameMeta) -> Result<EvictionStepResult, EngineError> {
        self.step_inner(frame, false)
    }

    /// Reference path with the same contract as [`EngineState::step`], but
    /// recomputing every retained frame's raw scores from stored metadata.
    pub fn step_full_recompute(
        &mut self,
        frame: FrameMeta,
    ) -> Result<EvictionStepResult, EngineError> {
        self.step_inner(frame, true)
    }

    fn step_inner(
        &mut self,
        frame: FrameMeta,
        full_recompute: bool,
    ) -> Result<EvictionStepResult, EngineError> {
        let start = Instant::now();
        self.check_frame(&frame)?;
        let frame = validate_frame(frame)?;
        let t_cur = frame.frame_index;

        let new_raw =
            Self::compute_raw(&self.layout, &mut self.evals, &frame, self.last_pose.as_ref())?;

        if full_recompute {
            // Refresh every layer's raw cache from metadata before scoring.
            let mut fresh: BTreeMap<u64, FrameRawEntry> = BTreeMap::new();
            for (&t, record) in &self.records {
                let raw = Self::compute_raw(
                    &self.layout,
                    &mut self.evals,
                    &record.meta,
                    record.prev_pose.as_ref(),
                )?;
                fresh.insert(t, raw.to_entry());
            }
            for layer in &mut self.layers {
                for (&t, entry) in &fresh {
                    layer.refresh_raw(t, entry);
                }
            }
        }

        let mut evicted = Vec::with_capacity(self.layers.len());
        let mut retained_counts = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let gone = evict_layer(
                layer,
                &new_raw,
                t_cur,
                &self.effective,
                self.mode,
                &self.layout,
            );
            let (camera, registers, patches) = layer.kind_counts();
            retained_counts.push(KindCounts {
                camera,
                registers,
                patches,
            });
            evicted.push(gone);
        }

        // Append the new frame's tokens to every layer, then garbage-collect
        // metadata down to the referenced frames.
        let entry = new_raw.to_entry();
        for layer in &mut self.layers {
            layer.append_frame(t_cur, &self.layout, entry.clone());
        }
        self.records.insert(
            t_cur,
            FrameRecord {
                prev_pose: self.last_pose.clone(),
                meta: frame,
            },
        );
        let layers = &self.layers;
        self.records
            .retain(|&t, _| layers.iter().any(|l| l.holds_frame(t)));

        self.last_pose = Some(self.records[&t_cur].meta.pose.clone());
        self.last_frame = Some(t_cur);

        Ok(EvictionStepResult {
            frame_index: t_cur,
            evicted,
            retained_counts,
            step_time: start.elapsed(),
        })
    }

    /// Replaces a frame's geometry outputs (pose, depth, confidences) and
    /// refreshes its raw scores so subsequent scoring sees the new values.
    /// Idempotent for identical payloads. Errs if the frame has been evicted
    /// from every layer.
    pub fn lazy_update_metadata(
        &mut self,
        frame_index: u64,
        outputs: FrameOutputs,
    ) -> Result<(), EngineError> {
        let record = self
            .records
            .get_mut(&frame_index)
            .ok_or(EngineError::UnknownFrame(frame_index))?;
        let mut meta = record.meta.clone();
        meta.pose = outputs.pose;
        meta.depth = outputs.depth;
        meta.depth_conf = outputs.depth_conf;
        meta.point_conf = outputs.point_conf;
        let meta = validate_frame(meta)?;
        record.meta = meta;
        let raw = Self::compute_raw(
            &self.layout,
            &mut self.evals,
            &record.meta,
            record.prev_pose.as_ref(),
        )?;
        if self.last_frame == Some(frame_index) {
            self.last_pose = Some(record.meta.pose.clone());
        }
        let entry = raw.to_entry();
        for layer in &mut self.layers {
            layer.refresh_raw(frame_index, &entry);
        }
        Ok(())
    }
}

/// Deterministic candidate ordering: score descending, then frame ascending,
/// then kind rank ascending (the derived [`TokenRef`] order).
#[inline]
fn candidate_cmp(a: &(TokenRef, f64), b: &(TokenRef, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// The `k` highest-scoring refs under the deterministic tie-break (score
/// descending, frame ascending, kind rank ascending). Returns everything
/// when `k` exceeds the candidate count.
pub fn select_topk(scores: &BTreeMap<TokenRef, f64>, k: usize) -> Vec<TokenRef> {
    let mut cand: Vec<(TokenRef, f64)> = scores.iter().map(|(&r, &s)| (r, s)).collect();
    cand.sort_unstable_by(candidate_cmp);
    cand.truncate(k);
    cand.into_iter().map(|(r, _)| r).collect()
}

fn evict_layer(
    cache: &mut LayerCache,
    new: &FrameRaw,
    t_cur: u64,
    weights: &ScoreWeights,
    mode: EvictionMode,
    layout: &TokenLayout,
) -> Vec<TokenRef> {
    let budget = cache.budget();
    if cache.len() <= budget {
        return Vec::new();
    }
    let t_cur_f = t_cur as f64;

    // Frame aggregates over the joint candidate set: this layer's retained
    // frames plus the incoming frame, sharing one normalizer.
    let mut frame_aggs: Vec<f64> = Vec::with_capacity(cache.frames().len());
    let mut fmax = f64::MIN;
    for (&t, entry) in cache.frames() {
        let agg = frame_aggregate(
            &FrameRawScores {
                cam: entry.raw.cam,
                geo: entry.raw.geo,
                temp: t as f64 / t_cur_f,
            },
            weights,
        );
        fmax = fmax.max(agg);
        frame_aggs.push(agg);
    }
    let new_frame_agg = frame_aggregate(
        &FrameRawScores {
            cam: new.cam,
            geo: new.geo,
            temp: 1.0,
        },
        weights,
    );
    fmax = fmax.max(new_frame_agg);

    // Token aggregates with one global maximum over every candidate patch.
    let mut patch_aggs: Vec<Vec<f64>> = Vec::with_capacity(cache.frames().len());
    let mut kmax = f64::MIN;
    for entry in cache.frames().values() {
        let aggs: Vec<f64> = entry
            .raw
            .patch_components
            .iter()
            .map(|c| token_aggregate(c.sal, c.dc, c.pc, weights))
            .collect();
        for &a in &aggs {
            kmax = kmax.max(a);
        }
        patch_aggs.push(aggs);
    }
    let new_patch_aggs: Vec<f64> = (0..new.patch.patch_count())
        .map(|p| {
            token_aggregate(
                new.patch.sal[p],
                new.patch.depth_conf[p],
                new.patch.point_conf[p],
                weights,
            )
        })
        .collect();
    for &a in &new_patch_aggs {
        kmax = kmax.max(a);
    }

    let eps = weights.eps_norm;
    let specials = layout.specials_per_frame();
    let boost = |sf: f64, rank: u32| special_boost(sf, rank, specials, weights).expect("rank in layout range");

    // Pre-renormalization scores. In strict mode specials are excluded from
    // the ranking and its min-max range; they are tracked separately so the
    // overflow regime can rank them among themselves.
    let mut ranked: Vec<(TokenRef, f64)> = Vec::with_capacity(cache.len());
    let mut protected: Vec<(TokenRef, f64)> = Vec::new();
    let mut lo = f64::MAX;
    let mut hi = f64::MIN;
    let strict = mode == EvictionMode::StrictProtection;

    for (fi, (&t, entry)) in cache.frames().iter().enumerate() {
        let sf = frame_aggs[fi] / (fmax + eps);
        let mut push_special = |token: TokenRef, rank: u32| {
            let phi = boost(sf, rank);
            if strict {
                protected.push((token, phi));
            } else {
                lo = lo.min(phi);
                hi = hi.max(phi);
                ranked.push((token, phi));
            }
        };
        if entry.camera {
            push_special(TokenRef::camera(t), 0);
        }
        for &k in &entry.registers {
            push_special(TokenRef::register(t, k), k);
        }
        for (pi, &p) in entry.patches.iter().enumerate() {
            let st = patch_aggs[fi][pi] / (kmax + eps);
            let phi = weights.w_f * sf + weights.w_k * st;
            lo = lo.min(phi);
            hi = hi.max(phi);
            ranked.push((TokenRef::patch(t, p), phi));
        }
    }

    // The incoming frame's candidates extend the min-max range but are not
    // selectable: its tokens are appended unconditionally after eviction.
    let sf_new = new_frame_agg / (fmax + eps);
    if !strict {
        for rank in 0..specials {
            let phi = boost(sf_new, rank);
            lo = lo.min(phi);
            hi = hi.max(phi);
        }
    }
    for &agg in &new_patch_aggs {
        let st = agg / (kmax + eps);
        let phi = weights.w_f * sf_new + weights.w_k * st;
        lo = lo.min(phi);
        hi = hi.max(phi);
    }

    // Final min-max renormalization (strictly monotone; all-equal scores
    // collapse to 1.0 and the tie-break decides alone).
    let range = hi - lo;
    for (_, phi) in ranked.iter_mut() {
        *phi = if range == 0.0 { 1.0 } else { (*phi - lo) / range };
    }

    let (retained, mut gone): (Vec<TokenRef>, Vec<TokenRef>) =
        if strict && protected.len() >= budget {
            // Overflow: specials alone fill the budget; they compete among
            // themselves by boosted score and every patch goes.
            protected.sort_unstable_by(candidate_cmp);
            (
                protected[..budget].iter().map(|&(r, _)| r).collect(),
                protected[budget..]
                    .iter()
                    .chain(ranked.iter())
                    .map(|&(r, _)| r)
                    .collect(),
            )
        } else {
            let slots = budget - protected.len();
            if ranked.len() > slots {
                ranked.select_nth_unstable_by(slots, candidate_cmp);
            }
            let cut = slots.min(ranked.len());
            (
                protected
                    .iter()
                    .chain(ranked[..cut].iter())
                    .map(|&(r, _)| r)
                    .collect(),
                ranked[cut..].iter().map(|&(r, _)| r).collect(),
            )
        };

    cache.retain_tokens(&retained);
    gone.sort_unstable();
    gone
}
