//! Comparison eviction policies behind the same stepping interface as the
//! scoring engine: key-space similarity ranking, fixed sink plus recent
//! frames, pure recency, and uniform layer budgeting.
//!
//! None of these consult geometry. Key-similarity gives no privilege to
//! special tokens: the camera and register tokens compete on their own key
//! vectors exactly like patches.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::BudgetPlan;
use crate::domain::{FrameMeta, KeyBlock, TokenLayout, TokenRef};
use crate::engine::{Ablation, EvictionMode, EvictionStepResult, KindCounts};

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("frame {0} carries no key vectors")]
    MissingKeys(u64),
    #[error("key dim mismatch: query {query}, key {key}")]
    KeyDimMismatch { query: usize, key: usize },
    #[error("infeasible sink/window: sink {sink_size} + window {window} frames needs {needed} tokens, budget {budget}")]
    InfeasibleSinkWindow {
        sink_size: usize,
        window: usize,
        needed: usize,
        budget: usize,
    },
    #[error("frame index {frame} not greater than last seen {last}")]
    NonMonotoneFrame { frame: u64, last: u64 },
    #[error("key block of frame {frame} holds {got} keys, layout needs {expected}")]
    KeyCountMismatch {
        frame: u64,
        expected: usize,
        got: usize,
    },
}

/// Ranking direction for key-similarity eviction. The source material for
/// this baseline states the criterion both ways; both are implemented and
/// the retain-least-similar reading is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityDirection {
    RetainMostSimilar,
    RetainLeastSimilar,
}

/// Policy selection plus kind-specific parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyConfig {
    Ghost {
        mode: EvictionMode,
        ablation: Ablation,
    },
    /// Scoring identical to `Ghost`, but the plan is replaced by a uniform
    /// split of its total across layers.
    UniformBudgetGhost {
        mode: EvictionMode,
        ablation: Ablation,
    },
    KeySimilarity {
        direction: SimilarityDirection,
    },
    SinkRecent {
        sink_size: usize,
        window: usize,
    },
    RecencyWindow,
}

impl PolicyConfig {
    pub const NAMES: [&'static str; 5] = [
        "ghost",
        "uniform_budget_ghost",
        "key_similarity",
        "sink_recent",
        "recency_window",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PolicyConfig::Ghost { .. } => "ghost",
            PolicyConfig::UniformBudgetGhost { .. } => "uniform_budget_ghost",
            PolicyConfig::KeySimilarity { .. } => "key_similarity",
            PolicyConfig::SinkRecent { .. } => "sink_recent",
            PolicyConfig::RecencyWindow => "recency_window",
        }
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Ranks cached tokens by cosine similarity to the query key and retains
/// `budget` of them per `direction`. Every token must have a key; retained
/// refs come back in canonical order.
pub fn key_similarity_evict<'a>(
    tokens: &[TokenRef],
    budget: usize,
    query_key: &[f32],
    mut key_of: impl FnMut(&TokenRef) -> Option<&'a [f32]>,
    direction: SimilarityDirection,
) -> Result<Vec<TokenRef>, BaselineError> {
    let mut scored: Vec<(TokenRef, f64)> = Vec::with_capacity(tokens.len());
    for token in tokens {
        let key = key_of(token).ok_or(BaselineError::MissingKeys(token.frame))?;
        if key.len() != query_key.len() {
            return Err(BaselineError::KeyDimMismatch {
                query: query_key.len(),
                key: key.len(),
            });
        }
        scored.push((*token, cosine(query_key, key)));
    }
    scored.sort_unstable_by(|a, b| {
        let primary = match direction {
            SimilarityDirection::RetainMostSimilar => b.1.total_cmp(&a.1),
            SimilarityDirection::RetainLeastSimilar => a.1.total_cmp(&b.1),
        };
        primary.then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(budget);
    let mut retained: Vec<TokenRef> = scored.into_iter().map(|(r, _)| r).collect();
    retained.sort_unstable();
    Ok(retained)
}

/// Retains all tokens of the first `ceil(sink_size / tokens_per_frame)`
/// frames plus the most recent `window` frames; middle tokens are evicted
/// oldest-first until the budget holds.
pub fn sink_recent_evict(
    tokens: &[TokenRef],
    budget: usize,
    sink_size: usize,
    window: usize,
    tokens_per_frame: usize,
) -> Result<Vec<TokenRef>, BaselineError> {
    // The sink rounds up to whole frames, so feasibility is checked against
    // the effective pinned-token count.
    let needed = sink_size.div_ceil(tokens_per_frame) * tokens_per_frame
        + window * tokens_per_frame;
    if needed > budget {
        return Err(BaselineError::InfeasibleSinkWindow {
            sink_size,
            window,
            needed,
            budget,
        });
    }
    if tokens.len() <= budget {
        return Ok(tokens.to_vec());
    }
    let mut frames: Vec<u64> = tokens.iter().map(|r| r.frame).collect();
    frames.dedup();
    let sink_frames = sink_size.div_ceil(tokens_per_frame).min(frames.len());
    let recent_start = frames.len().saturating_sub(window).max(sink_frames);
    let sink_set = &frames[..sink_frames];
    let recent_set = &frames[recent_start..];

    let is_pinned = |f: u64| sink_set.contains(&f) || recent_set.contains(&f);
    let pinned: usize = tokens.iter().filter(|r| is_pinned(r.frame)).count();
    let mut middle_keep = budget.saturating_sub(pinned);

    // Walk canonical order; middle tokens survive newest-first, which means
    // skipping the oldest `middle_total - middle_keep` of them.
    let middle_total = tokens.len() - pinned;
    let mut middle_skip = middle_total - middle_keep.min(middle_total);
    let mut retained = Vec::with_capacity(budget.min(tokens.len()));
    for token in tokens {
        if is_pinned(token.frame) {
            retained.push(*token);
        } else if middle_skip > 0 {
            middle_skip -= 1;
        } else if middle_keep > 0 {
            retained.push(*token);
            middle_keep -= 1;
        }
    }
    Ok(retained)
}

/// Retains the `budget` most recent tokens in canonical order.
pub fn recency_window_evict(tokens: &[TokenRef], budget: usize) -> Vec<TokenRef> {
    let start = tokens.len().saturating_sub(budget);
    tokens[start..].to_vec()
}

/// Uniform allocation: `floor(b_total / layers)` per layer with the residual
/// assigned to layer 0.
pub fn uniform_budget_plan(layers: usize, b_total: usize) -> BudgetPlan {
    assert!(layers >= 1);
    let base = b_total / layers;
    let mut budgets = vec![base; layers];
    budgets[0] += b_total - base * layers;
    BudgetPlan {
        budgets,
        total: b_total,
        temperature: None,
        floor: base,
    }
}

// ── Stateful baseline driver ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
enum BaselineKind {
    KeySimilarity(SimilarityDirection),
    SinkRecent { sink_size: usize, window: usize },
    RecencyWindow,
}

struct BaselineLayer {
    budget: usize,
    tokens: Vec<TokenRef>,
}

/// Drives a baseline policy with the same evict-then-append stepping as the
/// scoring engine: layers over budget are pruned back to it, then the new
/// frame's tokens are appended everywhere.
pub struct BaselineEngine {
    kind: BaselineKind,
    layers: Vec<BaselineLayer>,
    layout: TokenLayout,
    keys: BTreeMap<u64, KeyBlock>,
    last_frame: Option<u64>,
}

impl BaselineEngine {
    pub fn new(
        config: &PolicyConfig,
        plan: &BudgetPlan,
        layout: TokenLayout,
    ) -> Result<Self, BaselineError> {
        let kind = match *config {
            PolicyConfig::KeySimilarity { direction } => BaselineKind::KeySimilarity(direction),
            PolicyConfig::SinkRecent { sink_size, window } => {
                let n = layout.tokens_per_frame();
                let needed = sink_size.div_ceil(n) * n + window * n;
                if let Some(&budget) = plan.budgets.iter().min() {
                    if needed > budget {
                        return Err(BaselineError::InfeasibleSinkWindow {
                            sink_size,
                            window,
                            needed,
                            budget,
                        });
                    }
                }
                BaselineKind::SinkRecent { sink_size, window }
            }
            PolicyConfig::RecencyWindow => BaselineKind::RecencyWindow,
            PolicyConfig::Ghost { .. } | PolicyConfig::UniformBudgetGhost { .. } => {
                unreachable!("scoring policies are driven by the engine, not the baselines")
            }
        };
        Ok(Self {
            kind,
            layers: plan
                .budgets
                .iter()
                .map(|&budget| BaselineLayer {
                    budget,
                    tokens: Vec::new(),
                })
                .collect(),
            layout,
            keys: BTreeMap::new(),
            last_frame: None,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_tokens(&self, layer: usize) -> &[TokenRef] {
        &self.layers[layer].tokens
    }

    pub fn layer_budget(&self, layer: usize) -> usize {
        self.layers[layer].budget
    }

    pub fn step(&mut self, frame: &FrameMeta) -> Result<EvictionStepResult, BaselineError> {
        let start = Instant::now();
        let t = frame.frame_index;
        if let Some(last) = self.last_frame {
            if t <= last {
                return Err(BaselineError::NonMonotoneFrame { frame: t, last });
            }
        }

        // Key-similarity needs this frame's keys: the query is the
        // normalized mean of the incoming frame's token keys.
        let query: Option<Vec<f32>> = if matches!(self.kind, BaselineKind::KeySimilarity(_)) {
            let block = frame.keys.as_ref().ok_or(BaselineError::MissingKeys(t))?;
            let expected = self.layout.tokens_per_frame();
            if block.count() != expected {
                return Err(BaselineError::KeyCountMismatch {
                    frame: t,
                    expected,
                    got: block.count(),
                });
            }
            let dim = block.dim();
            let mut mean = vec![0.0f64; dim];
            for i in 0..block.count() {
                for (m, &v) in mean.iter_mut().zip(block.key(i)) {
                    *m += v as f64;
                }
            }
            let norm: f64 = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            Some(
                mean.into_iter()
                    .map(|v| if norm > 0.0 { (v / norm) as f32 } else { 0.0 })
                    .collect(),
            )
        } else {
            None
        };

        let mut evicted = Vec::with_capacity(self.layers.len());
        let mut retained_counts = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            if layer.tokens.len() > layer.budget {
                let retained = match self.kind {
                    BaselineKind::KeySimilarity(direction) => {
                        let keys = &self.keys;
                        let layout = &self.layout;
                        key_similarity_evict(
                            &layer.tokens,
                            layer.budget,
                            query.as_deref().expect("query derived above"),
                            |r| {
                                keys.get(&r.frame)
                                    .map(|block| block.key(layout.kind_rank(r.kind) as usize))
                            },
                            direction,
                        )?
                    }
                    BaselineKind::SinkRecent { sink_size, window } => sink_recent_evict(
                        &layer.tokens,
                        layer.budget,
                        sink_size,
                        window,
                        self.layout.tokens_per_frame(),
                    )?,
                    BaselineKind::RecencyWindow => {
                        recency_window_evict(&layer.tokens, layer.budget)
                    }
                };
                let keep: std::collections::BTreeSet<TokenRef> =
                    retained.iter().copied().collect();
                let mut gone: Vec<TokenRef> = layer
                    .tokens
                    .iter()
                    .filter(|r| !keep.contains(r))
                    .copied()
                    .collect();
                gone.sort_unstable();
                layer.tokens = retained;
                evicted.push(gone);
            } else {
                evicted.push(Vec::new());
            }
            let mut counts = KindCounts::default();
            for token in &layer.tokens {
                match token.kind {
                    crate::domain::TokenKind::Camera => counts.camera += 1,
                    crate::domain::TokenKind::Register(_) => counts.registers += 1,
                    crate::domain::TokenKind::Patch(_) => counts.patches += 1,
                }
            }
            retained_counts.push(counts);
        }

        for layer in &mut self.layers {
            layer.tokens.extend(self.layout.frame_tokens(t));
        }
        if let Some(block) = &frame.keys {
            self.keys.insert(t, block.clone());
        }
        let layers = &self.layers;
        self.keys
            .retain(|&f, _| layers.iter().any(|l| l.tokens.iter().any(|r| r.frame == f)));
        self.last_frame = Some(t);

        Ok(EvictionStepResult {
            frame_index: t,
            evicted,
            retained_counts,
            step_time: start.elapsed(),
        })
    }
}
