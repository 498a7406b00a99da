//! The embedding index θ and the context perturbation δ.
//!
//! A query's tokens embed to a flat real vector θ(q) — the concatenation of
//! its per-token embedding rows (token + positional). Contexts enter through
//! a fixed window of `l_c` slots placed *before* the query: context tokens
//! are right-aligned against the query with PAD-left zero slots, and the
//! query always occupies positions `l_c..l_c+|q|`.
//!
//! Because the query block sits at the same positions (and thus picks up
//! the same positional rows) in both the lifted θ(q) and θ(c ⊕ q), the
//! perturbation δ(c, q) = θ(c ⊕ q) − θ_lifted(q) is exactly zero on the
//! query block and carries the context embeddings verbatim on the context
//! block. An empty context gives δ = 0.
//!
//! Fisher susceptibility uses the plain query-only index (positions
//! `0..|q|`, D = |q|·d); the quadratic estimator lives in the lifted space.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EmbeddedInput, ModelError, ModelParams};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Error, PartialEq)]
pub enum ReparamError {
    #[error("query must contain at least one token")]
    EmptyQuery,
    #[error("window of {needed} positions exceeds model maximum {max}")]
    WindowTooLong { needed: usize, max: usize },
    #[error("PAD tokens are reserved for layout and may not appear in token sequences")]
    UnexpectedPad,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Role of one position in a theta layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    Pad,
    Context,
    Query,
}

/// How a theta vector was produced; UNK substitutions and left-truncation
/// surface here rather than as errors.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThetaProvenance {
    pub unk_positions: Vec<usize>,
    pub truncated_left: usize,
}

/// Flat embedding-index vector with its recorded layout: `n` positions of
/// `embed_dim` values each, row-major, one [`SlotKind`] per position.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    values: Vec<f64>,
    embed_dim: usize,
    slots: Vec<SlotKind>,
    provenance: ThetaProvenance,
}

impl ThetaVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn n_positions(&self) -> usize {
        self.slots.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slots(&self) -> &[SlotKind] {
        &self.slots
    }

    pub fn provenance(&self) -> &ThetaProvenance {
        &self.provenance
    }

    pub fn as_matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.slots.len(), self.embed_dim), self.values.clone())
            .expect("layout invariant: D = positions × embed_dim")
    }

    /// Input with PAD slots masked out of attention — the form used when
    /// scoring real token sequences (Monte Carlo path).
    pub fn to_masked_input(&self) -> EmbeddedInput {
        EmbeddedInput::new(
            self.as_matrix(),
            self.slots.iter().map(|&s| s == SlotKind::Pad).collect(),
        )
        .expect("mask length matches positions")
    }

    /// Input with every slot live — the form used when θ is treated as a
    /// free parameter vector (Fisher / Taylor / quadratic paths), where the
    /// zero rows at padded slots are ordinary coordinates.
    pub fn to_dense_input(&self) -> EmbeddedInput {
        EmbeddedInput::dense(self.as_matrix())
    }

    /// Values of the positions with the given slot kind, concatenated.
    pub fn block(&self, kind: SlotKind) -> Vec<f64> {
        let d = self.embed_dim;
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == kind)
            .flat_map(|(i, _)| self.values[i * d..(i + 1) * d].iter().copied())
            .collect()
    }

    /// θ + t·δ in the same layout. Panics if the layouts differ; the pair
    /// always comes from the same `(c, q, l_c)` call sequence.
    pub fn perturbed(&self, delta: &DeltaVector, t: f64) -> ThetaVector {
        assert_eq!(self.dim(), delta.dim(), "layout mismatch between θ and δ");
        let values = self
            .values
            .iter()
            .zip(delta.values())
            .map(|(a, b)| a + t * b)
            .collect();
        ThetaVector {
            values,
            embed_dim: self.embed_dim,
            // perturbed context slots carry live values now
            slots: delta.slots.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaProvenance {
    EmpiricalFromContext,
    SyntheticGaussian,
    SyntheticFixed,
}

/// δ(c, q) in the lifted layout shared with its theta pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaVector {
    values: Vec<f64>,
    embed_dim: usize,
    slots: Vec<SlotKind>,
    provenance: DeltaProvenance,
}

impl DeltaVector {
    /// Wraps an externally constructed perturbation (Gaussian draws, fixed
    /// probes) in a given layout.
    pub fn synthetic(
        values: Vec<f64>,
        embed_dim: usize,
        slots: Vec<SlotKind>,
        provenance: DeltaProvenance,
    ) -> Self {
        assert_eq!(values.len(), slots.len() * embed_dim);
        Self { values, embed_dim, slots, provenance }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slots(&self) -> &[SlotKind] {
        &self.slots
    }

    pub fn provenance(&self) -> DeltaProvenance {
        self.provenance
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn block(&self, kind: SlotKind) -> Vec<f64> {
        let d = self.embed_dim;
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == kind)
            .flat_map(|(i, _)| self.values[i * d..(i + 1) * d].iter().copied())
            .collect()
    }

    pub fn scaled(&self, t: f64) -> DeltaVector {
        DeltaVector {
            values: self.values.iter().map(|v| v * t).collect(),
            embed_dim: self.embed_dim,
            slots: self.slots.clone(),
            provenance: self.provenance,
        }
    }
}

fn check_tokens(tokens: &[TokenId]) -> Result<Vec<usize>, ReparamError> {
    let mut unk = Vec::new();
    for (i, &t) in tokens.iter().enumerate() {
        if t == Vocabulary::PAD {
            return Err(ReparamError::UnexpectedPad);
        }
        if t == Vocabulary::UNK {
            unk.push(i);
        }
    }
    Ok(unk)
}

/// θ(q): the query's embedding rows at positions `0..|q|`, flattened.
pub fn embed_query(params: &ModelParams, query: &[TokenId]) -> Result<ThetaVector, ReparamError> {
    if query.is_empty() {
        return Err(ReparamError::EmptyQuery);
    }
    let unk_positions = check_tokens(query)?;
    if query.len() > params.config.max_seq_len {
        return Err(ReparamError::WindowTooLong {
            needed: query.len(),
            max: params.config.max_seq_len,
        });
    }
    let input = params.embed_tokens(query, 0)?;
    Ok(ThetaVector {
        values: input.rows.iter().copied().collect(),
        embed_dim: params.config.embed_dim,
        slots: vec![SlotKind::Query; query.len()],
        provenance: ThetaProvenance { unk_positions, truncated_left: 0 },
    })
}

/// θ(c ⊕ q) in the lifted layout: `l_c` context slots (PAD-left, context
/// right-aligned, truncated from the left if too long) followed by the
/// query at positions `l_c..`.
pub fn embed_context_query(
    params: &ModelParams,
    context: &[TokenId],
    query: &[TokenId],
    l_c: usize,
) -> Result<ThetaVector, ReparamError> {
    if query.is_empty() {
        return Err(ReparamError::EmptyQuery);
    }
    let mut unk_positions = check_tokens(query)?;
    let ctx_unk = check_tokens(context)?;

    let needed = l_c + query.len();
    if needed > params.config.max_seq_len {
        return Err(ReparamError::WindowTooLong {
            needed,
            max: params.config.max_seq_len,
        });
    }

    let truncated_left = context.len().saturating_sub(l_c);
    let kept = &context[truncated_left..];
    let pad_n = l_c - kept.len();

    let d = params.config.embed_dim;
    let n = l_c + query.len();
    let mut values = vec![0.0; n * d];
    let mut slots = vec![SlotKind::Pad; n];

    for (i, &t) in kept.iter().enumerate() {
        let pos = pad_n + i;
        slots[pos] = SlotKind::Context;
        write_embedding(params, t, pos, &mut values[pos * d..(pos + 1) * d]);
    }
    for (i, &t) in query.iter().enumerate() {
        let pos = l_c + i;
        slots[pos] = SlotKind::Query;
        write_embedding(params, t, pos, &mut values[pos * d..(pos + 1) * d]);
    }

    unk_positions.extend(ctx_unk.iter().filter(|&&i| i >= truncated_left).map(|&i| pad_n + i - truncated_left));
    unk_positions.sort_unstable();

    Ok(ThetaVector {
        values,
        embed_dim: d,
        slots,
        provenance: ThetaProvenance { unk_positions, truncated_left },
    })
}

/// θ(q) lifted into the `l_c`-window layout: zero PAD slots for the context
/// block, query rows at positions `l_c..` with those positions' positional
/// embeddings. Equal to `embed_context_query(&[], query, l_c)`.
pub fn lift_query(
    params: &ModelParams,
    query: &[TokenId],
    l_c: usize,
) -> Result<ThetaVector, ReparamError> {
    embed_context_query(params, &[], query, l_c)
}

/// δ(c, q) = θ(c ⊕ q) − θ_lifted(q), the perturbation the context induces
/// on the index. Under the aligned layout the query block is exactly zero.
pub fn delta(
    params: &ModelParams,
    context: &[TokenId],
    query: &[TokenId],
    l_c: usize,
) -> Result<DeltaVector, ReparamError> {
    let full = embed_context_query(params, context, query, l_c)?;
    let lifted = lift_query(params, query, l_c)?;
    let values = full
        .values
        .iter()
        .zip(&lifted.values)
        .map(|(a, b)| a - b)
        .collect();
    Ok(DeltaVector {
        values,
        embed_dim: full.embed_dim,
        slots: full.slots,
        provenance: DeltaProvenance::EmpiricalFromContext,
    })
}

fn write_embedding(params: &ModelParams, token: TokenId, position: usize, out: &mut [f64]) {
    let tok = params.token_embed.row(token as usize);
    let pos = params.pos_embed.row(position);
    for (o, (a, b)) in out.iter_mut().zip(tok.iter().zip(pos.iter())) {
        *o = a + b;
    }
}
