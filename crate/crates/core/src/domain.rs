//! Shared domain types: poses, per-frame geometry bundles, token identities,
//! per-layer caches, and scoring weights.
//!
//! Everything here is immutable after construction except [`LayerCache`],
//! which the eviction engine mutates under exclusive access.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Validation errors for domain types, each naming the offending field.
#[derive(Debug, Error, PartialEq)]
pub enum CoreError {
    #[error("zero-norm quaternion")]
    ZeroNormQuaternion,
    #[error("focal must be positive, got {0}")]
    NonPositiveFocal(f64),
    #[error("{field} out of range")]
    ConfidenceOutOfRange { field: &'static str },
    #[error("{field} dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch {
        field: &'static str,
        expected: String,
        got: String,
    },
    #[error("grid data length {len} does not match {rows}x{cols}")]
    GridShape { rows: usize, cols: usize, len: usize },
    #[error("feature grid data length {len} does not match {rows}x{cols}x{channels}")]
    FeatureGridShape {
        rows: usize,
        cols: usize,
        channels: usize,
        len: usize,
    },
    #[error("grid must be at least 1x1")]
    EmptyGrid,
    #[error("exactly one of features or saliency must be present")]
    AppearanceConflict,
    #[error("saliency must be nonnegative")]
    NegativeSaliency,
    #[error("weight {name} must be nonnegative, got {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("w_f + w_k must equal 1, got {0}")]
    WeightSum(f64),
    #[error("{name} must be positive, got {value}")]
    NonPositiveEpsilon { name: &'static str, value: f64 },
    #[error("register index {index} out of range 1..={registers}")]
    RegisterIndex { index: u32, registers: u32 },
    #[error("patch index {index} out of range for {patches} patches")]
    PatchIndex { index: u32, patches: u32 },
    #[error("layer budget must be positive")]
    ZeroBudget,
    #[error("key block length {len} is not a multiple of dim {dim}")]
    KeyShape { len: usize, dim: usize },
}

// ── Grids ───────────────────────────────────────────────────────────────────

/// Dense row-major `rows x cols` grid of `f32` scalars.
///
/// `f32` matches the on-disk trace encoding bit-for-bit; all scoring math
/// widens to `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, CoreError> {
        if rows == 0 || cols == 0 {
            return Err(CoreError::EmptyGrid);
        }
        if data.len() != rows * cols {
            return Err(CoreError::GridShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn constant(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn value(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Row-major `rows x cols x channels` feature grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    rows: usize,
    cols: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(
        rows: usize,
        cols: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, CoreError> {
        if rows == 0 || cols == 0 || channels == 0 {
            return Err(CoreError::EmptyGrid);
        }
        if data.len() != rows * cols * channels {
            return Err(CoreError::FeatureGridShape {
                rows,
                cols,
                channels,
                len: data.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            channels,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Channel vector of the patch at `(row, col)`.
    #[inline]
    pub fn vector(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.cols + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

// ── Pose ────────────────────────────────────────────────────────────────────

/// Camera pose: translation in scene units, orientation quaternion
/// (any nonzero norm; normalized on use), and focal length in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    translation: [f64; 3],
    quaternion: [f64; 4],
    focal: f64,
}

impl Pose {
    pub fn new(
        translation: [f64; 3],
        quaternion: [f64; 4],
        focal: f64,
    ) -> Result<Self, CoreError> {
        if quaternion.iter().map(|q| q * q).sum::<f64>() == 0.0 {
            return Err(CoreError::ZeroNormQuaternion);
        }
        if focal.is_nan() || focal <= 0.0 {
            return Err(CoreError::NonPositiveFocal(focal));
        }
        Ok(Self {
            translation,
            quaternion,
            focal,
        })
    }

    pub fn translation(&self) -> [f64; 3] {
        self.translation
    }

    pub fn quaternion(&self) -> [f64; 4] {
        self.quaternion
    }

    pub fn focal(&self) -> f64 {
        self.focal
    }

    /// Unit-normalized quaternion.
    pub fn unit_quaternion(&self) -> [f64; 4] {
        let norm = self
            .quaternion
            .iter()
            .map(|q| q * q)
            .sum::<f64>()
            .sqrt();
        [
            self.quaternion[0] / norm,
            self.quaternion[1] / norm,
            self.quaternion[2] / norm,
            self.quaternion[3] / norm,
        ]
    }
}

// ── FrameMeta ───────────────────────────────────────────────────────────────

/// Patch appearance signal: either a raw feature grid (saliency is derived
/// from its spatial gradient) or a precomputed nonnegative saliency grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Appearance {
    Features(FeatureGrid),
    Saliency(Grid),
}

impl Appearance {
    pub fn patch_rows(&self) -> usize {
        match self {
            Appearance::Features(f) => f.rows(),
            Appearance::Saliency(g) => g.rows(),
        }
    }

    pub fn patch_cols(&self) -> usize {
        match self {
            Appearance::Features(f) => f.cols(),
            Appearance::Saliency(g) => g.cols(),
        }
    }
}

/// Per-token key vectors for one frame, used only by key-similarity
/// baselines. `data` holds `count` unit vectors of `dim` floats in canonical
/// token order (camera, registers, patches).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyBlock {
    dim: usize,
    data: Vec<f32>,
}

impl KeyBlock {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self, CoreError> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(CoreError::KeyShape {
                len: data.len(),
                dim: dim.max(1),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn key(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Per-frame geometry bundle: pose, depth, confidence grids, and appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub frame_index: u64,
    pub pose: Pose,
    pub depth: Grid,
    pub depth_conf: Grid,
    pub point_conf: Grid,
    pub appearance: Appearance,
    pub keys: Option<KeyBlock>,
}

impl FrameMeta {
    pub fn patch_rows(&self) -> usize {
        self.appearance.patch_rows()
    }

    pub fn patch_cols(&self) -> usize {
        self.appearance.patch_cols()
    }
}

fn check_conf_grid(grid: &Grid, field: &'static str) -> Result<(), CoreError> {
    if grid.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(CoreError::ConfidenceOutOfRange { field });
    }
    Ok(())
}

/// Validates every [`FrameMeta`] invariant, returning the frame unchanged on
/// success. Errors name the offending field.
pub fn validate_frame(meta: FrameMeta) -> Result<FrameMeta, CoreError> {
    let (h, w) = (meta.depth.rows(), meta.depth.cols());
    let (hp, wp) = (meta.patch_rows(), meta.patch_cols());
    if hp > h || wp > w {
        return Err(CoreError::DimensionMismatch {
            field: "appearance",
            expected: format!("patch grid within {h}x{w}"),
            got: format!("{hp}x{wp}"),
        });
    }
    for (grid, field) in [(&meta.depth_conf, "depth_conf"), (&meta.point_conf, "point_conf")] {
        if grid.rows() != h || grid.cols() != w {
            return Err(CoreError::DimensionMismatch {
                field,
                expected: format!("{h}x{w}"),
                got: format!("{}x{}", grid.rows(), grid.cols()),
            });
        }
        check_conf_grid(grid, field)?;
    }
    if let Appearance::Saliency(sal) = &meta.appearance {
        if sal.data().iter().any(|&v| v < 0.0) {
            return Err(CoreError::NegativeSaliency);
        }
    }
    // Pose invariants are enforced at construction; re-check in case the
    // value was deserialized.
    Pose::new(
        meta.pose.translation(),
        meta.pose.quaternion(),
        meta.pose.focal(),
    )?;
    Ok(meta)
}

// ── Tokens ──────────────────────────────────────────────────────────────────

/// Kind of a cached token within its frame.
///
/// The derived ordering (camera, then registers by index, then patches by
/// index) coincides with the intra-frame rank order for every register
/// count, so [`TokenRef`]'s derived `Ord` is the canonical token order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Camera,
    Register(u32),
    Patch(u32),
}

/// Identity of one cached token: owning frame plus kind. Layer-agnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenRef {
    pub frame: u64,
    pub kind: TokenKind,
}

impl TokenRef {
    pub fn camera(frame: u64) -> Self {
        Self {
            frame,
            kind: TokenKind::Camera,
        }
    }

    pub fn register(frame: u64, index: u32) -> Self {
        Self {
            frame,
            kind: TokenKind::Register(index),
        }
    }

    pub fn patch(frame: u64, index: u32) -> Self {
        Self {
            frame,
            kind: TokenKind::Patch(index),
        }
    }

    pub fn is_special(&self) -> bool {
        !matches!(self.kind, TokenKind::Patch(_))
    }
}

/// Token layout shared by every frame of a stream: `registers` register
/// tokens plus one camera token (the specials), and a `patch_rows x
/// patch_cols` grid of patch tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub registers: u32,
    pub patch_rows: usize,
    pub patch_cols: usize,
}

impl TokenLayout {
    pub fn new(registers: u32, patch_rows: usize, patch_cols: usize) -> Self {
        Self {
            registers,
            patch_rows,
            patch_cols,
        }
    }

    /// Special tokens per frame: one camera plus the registers.
    pub fn specials_per_frame(&self) -> u32 {
        1 + self.registers
    }

    pub fn patches_per_frame(&self) -> u32 {
        (self.patch_rows * self.patch_cols) as u32
    }

    /// Total tokens per frame.
    pub fn tokens_per_frame(&self) -> usize {
        self.specials_per_frame() as usize + self.patches_per_frame() as usize
    }

    /// Intra-frame rank: camera 0, register k at k, patch p at specials + p.
    pub fn kind_rank(&self, kind: TokenKind) -> u32 {
        match kind {
            TokenKind::Camera => 0,
            TokenKind::Register(k) => k,
            TokenKind::Patch(p) => self.specials_per_frame() + p,
        }
    }

    pub fn validate_kind(&self, kind: TokenKind) -> Result<(), CoreError> {
        match kind {
            TokenKind::Camera => Ok(()),
            TokenKind::Register(k) => {
                if k >= 1 && k <= self.registers {
                    Ok(())
                } else {
                    Err(CoreError::RegisterIndex {
                        index: k,
                        registers: self.registers,
                    })
                }
            }
            TokenKind::Patch(p) => {
                if p < self.patches_per_frame() {
                    Ok(())
                } else {
                    Err(CoreError::PatchIndex {
                        index: p,
                        patches: self.patches_per_frame(),
                    })
                }
            }
        }
    }

    /// All token refs of one frame in canonical order.
    pub fn frame_tokens(&self, frame: u64) -> impl Iterator<Item = TokenRef> + '_ {
        let registers = self.registers;
        let patches = self.patches_per_frame();
        std::iter::once(TokenRef::camera(frame))
            .chain((1..=registers).map(move |k| TokenRef::register(frame, k)))
            .chain((0..patches).map(move |p| TokenRef::patch(frame, p)))
    }
}

// ── Score weights ───────────────────────────────────────────────────────────

/// Optional per-signal sigmoid input scales, all defaulting to 1 (the plain
/// logistic). Exposed for experimentation only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SigmoidScales {
    pub cam: f64,
    pub geo: f64,
    pub temp: f64,
    pub sal: f64,
    pub dc: f64,
    pub pc: f64,
}

impl Default for SigmoidScales {
    fn default() -> Self {
        Self {
            cam: 1.0,
            geo: 1.0,
            temp: 1.0,
            sal: 1.0,
            dc: 1.0,
            pc: 1.0,
        }
    }
}

/// Importance-scoring weights and epsilons.
///
/// Defaults are the tuned operating point: frame weights (0.55, 0.55, 0.25),
/// token weights (0.28, 0.45, 0.35), equal frame/token mixing, boost 0.3,
/// tiebreak 1e-6. The frame weights deliberately do not sum to 1; the
/// max-division in the frame score makes absolute scale irrelevant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreWeights {
    pub w_cam: f64,
    pub w_geo: f64,
    pub w_temp: f64,
    pub w_sal: f64,
    pub w_dc: f64,
    pub w_pc: f64,
    pub w_f: f64,
    pub w_k: f64,
    pub delta_boost: f64,
    pub eps_tb: f64,
    pub eps_norm: f64,
    pub sigmoid_scales: SigmoidScales,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            w_cam: 0.55,
            w_geo: 0.55,
            w_temp: 0.25,
            w_sal: 0.28,
            w_dc: 0.45,
            w_pc: 0.35,
            w_f: 0.5,
            w_k: 0.5,
            delta_boost: 0.3,
            eps_tb: 1e-6,
            eps_norm: 1e-8,
            sigmoid_scales: SigmoidScales::default(),
        }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<(), CoreError> {
        let named = [
            ("w_cam", self.w_cam),
            ("w_geo", self.w_geo),
            ("w_temp", self.w_temp),
            ("w_sal", self.w_sal),
            ("w_dc", self.w_dc),
            ("w_pc", self.w_pc),
            ("w_f", self.w_f),
            ("w_k", self.w_k),
            ("delta_boost", self.delta_boost),
        ];
        for (name, value) in named {
            if value.is_nan() || value < 0.0 {
                return Err(CoreError::NegativeWeight { name, value });
            }
        }
        if (self.w_f + self.w_k - 1.0).abs() > 1e-12 {
            return Err(CoreError::WeightSum(self.w_f + self.w_k));
        }
        for (name, value) in [("eps_tb", self.eps_tb), ("eps_norm", self.eps_norm)] {
            if value.is_nan() || value <= 0.0 {
                return Err(CoreError::NonPositiveEpsilon { name, value });
            }
        }
        Ok(())
    }
}

// ── LayerCache ──────────────────────────────────────────────────────────────

/// Cached raw components for one patch token (pre-sigmoid, pre-normalization).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchComponents {
    pub sal: f64,
    pub dc: f64,
    pub pc: f64,
}

/// Raw-score cache entry for one frame within one layer: the frame-level raw
/// components plus per-retained-patch components, aligned with the retained
/// patch list.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRawEntry {
    pub cam: f64,
    pub geo: f64,
    pub patch_components: Vec<PatchComponents>,
}

/// Tokens of one frame retained in one layer, with their cached raw scores.
/// `registers` and `patches` are sorted ascending; `raw.patch_components`
/// is aligned index-for-index with `patches`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTokens {
    pub camera: bool,
    pub registers: Vec<u32>,
    pub patches: Vec<u32>,
    pub raw: FrameRawEntry,
}

impl FrameTokens {
    pub fn token_count(&self) -> usize {
        usize::from(self.camera) + self.registers.len() + self.patches.len()
    }

    pub fn special_count(&self) -> usize {
        usize::from(self.camera) + self.registers.len()
    }
}

/// Ordered token store for one transformer layer plus its budget and the
/// incremental importance cache (per-frame raw score components).
///
/// Tokens are grouped by frame; the grouping keys ascend, and within a frame
/// the order is camera, registers, patches: the canonical insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    layer_index: usize,
    budget: usize,
    frames: BTreeMap<u64, FrameTokens>,
    len: usize,
}

impl LayerCache {
    pub fn new(layer_index: usize, budget: usize) -> Result<Self, CoreError> {
        if budget == 0 {
            return Err(CoreError::ZeroBudget);
        }
        Ok(Self {
            layer_index,
            budget,
            frames: BTreeMap::new(),
            len: 0,
        })
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Total retained tokens.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn frames(&self) -> &BTreeMap<u64, FrameTokens> {
        &self.frames
    }

    pub fn frame(&self, frame: u64) -> Option<&FrameTokens> {
        self.frames.get(&frame)
    }

    pub fn holds_frame(&self, frame: u64) -> bool {
        self.frames.contains_key(&frame)
    }

    /// Materializes the retained tokens in canonical order.
    pub fn tokens(&self) -> Vec<TokenRef> {
        let mut out = Vec::with_capacity(self.len);
        for (&frame, entry) in &self.frames {
            if entry.camera {
                out.push(TokenRef::camera(frame));
            }
            out.extend(entry.registers.iter().map(|&k| TokenRef::register(frame, k)));
            out.extend(entry.patches.iter().map(|&p| TokenRef::patch(frame, p)));
        }
        out
    }

    /// Retained (camera, register, patch) counts.
    pub fn kind_counts(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for entry in self.frames.values() {
            counts.0 += usize::from(entry.camera);
            counts.1 += entry.registers.len();
            counts.2 += entry.patches.len();
        }
        counts
    }

    /// Appends a full frame (all tokens, with its raw components). The frame
    /// index must exceed every stored index.
    pub fn append_frame(&mut self, frame: u64, layout: &TokenLayout, raw: FrameRawEntry) {
        debug_assert!(self.frames.keys().next_back().is_none_or(|&last| last < frame));
        debug_assert_eq!(raw.patch_components.len(), layout.patches_per_frame() as usize);
        let entry = FrameTokens {
            camera: true,
            registers: (1..=layout.registers).collect(),
            patches: (0..layout.patches_per_frame()).collect(),
            raw,
        };
        self.len += entry.token_count();
        self.frames.insert(frame, entry);
    }

    /// Replaces the retained set with `retained` (canonical-order refs drawn
    /// from the current contents), pruning raw-cache entries for everything
    /// else. Raw components survive only for retained patches.
    pub fn retain_tokens(&mut self, retained: &[TokenRef]) {
        let mut next: BTreeMap<u64, FrameTokens> = BTreeMap::new();
        for token in retained {
            let old = self
                .frames
                .get(&token.frame)
                .expect("retained token must reference a cached frame");
            let slot = next.entry(token.frame).or_insert_with(|| FrameTokens {
                camera: false,
                registers: Vec::new(),
                patches: Vec::new(),
                raw: FrameRawEntry {
                    cam: old.raw.cam,
                    geo: old.raw.geo,
                    patch_components: Vec::new(),
                },
            });
            match token.kind {
                TokenKind::Camera => slot.camera = true,
                TokenKind::Register(k) => slot.registers.push(k),
                TokenKind::Patch(p) => {
                    let pos = old
                        .patches
                        .binary_search(&p)
                        .expect("retained patch must be cached");
                    slot.patches.push(p);
                    slot.raw.patch_components.push(old.raw.patch_components[pos]);
                }
            }
        }
        for entry in next.values_mut() {
            entry.registers.sort_unstable();
            let mut paired: Vec<(u32, PatchComponents)> = entry
                .patches
                .iter()
                .copied()
                .zip(entry.raw.patch_components.iter().copied())
                .collect();
            paired.sort_unstable_by_key(|&(p, _)| p);
            entry.patches = paired.iter().map(|&(p, _)| p).collect();
            entry.raw.patch_components = paired.into_iter().map(|(_, c)| c).collect();
        }
        self.len = next.values().map(FrameTokens::token_count).sum();
        self.frames = next;
    }

    /// Overwrites the raw components cached for `frame`, keeping only the
    /// components of patches this layer still retains.
    pub fn refresh_raw(&mut self, frame: u64, raw: &FrameRawEntry) {
        if let Some(entry) = self.frames.get_mut(&frame) {
            entry.raw.cam = raw.cam;
            entry.raw.geo = raw.geo;
            entry.raw.patch_components = entry
                .patches
                .iter()
                .map(|&p| raw.patch_components[p as usize])
                .collect();
        }
    }
}
