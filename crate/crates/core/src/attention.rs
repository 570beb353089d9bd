//! Score functions, normalization, and context combination for the three
//! attention variants.
//!
//! The temporal variants (`Att`, `AttY`) give every source position one
//! scalar weight per decoder step. The fine-grained variant (`AttY2D`) gives
//! every *dimension* of every annotation vector its own weight: scores are
//! normalized over source positions independently per dimension, and the
//! context vector is the dimension-wise weighted sum.

use std::fmt;

use crate::error::{Error, Result};
use crate::layers::{ffnn, FfnnIds};
use crate::numerics::{Graph, Tensor, TensorId};

/// Which score function and combination scheme the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Score from decoder state and annotation only.
    Att,
    /// Previous target word embedding fed to the score function.
    AttY,
    /// Fine-grained: one score per annotation dimension.
    AttY2D,
}

impl Variant {
    pub fn uses_target_embedding(self) -> bool {
        !matches!(self, Variant::Att)
    }

    pub fn is_fine_grained(self) -> bool {
        matches!(self, Variant::AttY2D)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Att => "att",
            Variant::AttY => "atty",
            Variant::AttY2D => "atty2d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "att" => Ok(Variant::Att),
            "atty" => Ok(Variant::AttY),
            "atty2d" => Ok(Variant::AttY2D),
            other => Err(Error::Format(format!(
                "unknown attention variant '{other}' (expected att, atty or atty2d)"
            ))),
        }
    }

    pub const ALL: [Variant; 3] = [Variant::Att, Variant::AttY, Variant::AttY2D];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The encoder's annotation vectors, stacked as the rows of `h: [T×D]`.
#[derive(Debug, Clone, Copy)]
pub struct AnnotationSet {
    pub h: TensorId,
    pub len: usize,
    pub dim: usize,
}

impl AnnotationSet {
    pub fn from_tensor(g: &Graph, h: TensorId) -> Result<Self> {
        let shape = g.value(h).shape();
        if shape.len() != 2 {
            return Err(Error::dimension("annotation_set", shape, &[]));
        }
        Ok(AnnotationSet {
            h,
            len: shape[0],
            dim: shape[1],
        })
    }
}

/// Attention weights for one decoder step, detached from the graph.
#[derive(Debug, Clone, PartialEq)]
pub enum AlphaSlice {
    /// `[T]`: one weight per source position.
    Temporal(Tensor),
    /// `[T×D]`: one weight per source position and dimension.
    FineGrained(Tensor),
}

impl AlphaSlice {
    pub fn source_len(&self) -> usize {
        match self {
            AlphaSlice::Temporal(t) => t.shape()[0],
            AlphaSlice::FineGrained(t) => t.shape()[0],
        }
    }
}

/// The full alignment across a decoded sentence: `[T'×T]` for temporal
/// variants, `[T'×T×D]` for the fine-grained one.
#[derive(Debug, Clone, PartialEq)]
pub enum AlignmentTensor {
    Temporal(Tensor),
    FineGrained(Tensor),
}

impl AlignmentTensor {
    /// Stacks per-step slices into the sentence-level tensor. All slices
    /// must share kind and extents.
    pub fn from_steps(slices: &[AlphaSlice]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Contract("alignment needs at least one step".into()))?;
        match first {
            AlphaSlice::Temporal(t0) => {
                let src = t0.shape()[0];
                let mut data = Vec::with_capacity(slices.len() * src);
                for s in slices {
                    match s {
                        AlphaSlice::Temporal(t) if t.shape() == [src] => {
                            data.extend_from_slice(t.data())
                        }
                        _ => return Err(Error::Contract("mixed alignment slices".into())),
                    }
                }
                Ok(AlignmentTensor::Temporal(Tensor::new(
                    data,
                    &[slices.len(), src],
                )?))
            }
            AlphaSlice::FineGrained(t0) => {
                let (src, dim) = (t0.shape()[0], t0.shape()[1]);
                let mut data = Vec::with_capacity(slices.len() * src * dim);
                for s in slices {
                    match s {
                        AlphaSlice::FineGrained(t) if t.shape() == [src, dim] => {
                            data.extend_from_slice(t.data())
                        }
                        _ => return Err(Error::Contract("mixed alignment slices".into())),
                    }
                }
                Ok(AlignmentTensor::FineGrained(Tensor::new(
                    data,
                    &[slices.len(), src, dim],
                )?))
            }
        }
    }

    pub fn is_fine_grained(&self) -> bool {
        matches!(self, AlignmentTensor::FineGrained(_))
    }

    pub fn tensor(&self) -> &Tensor {
        match self {
            AlignmentTensor::Temporal(t) | AlignmentTensor::FineGrained(t) => t,
        }
    }

    /// Number of decoder steps T'.
    pub fn target_len(&self) -> usize {
        self.tensor().shape()[0]
    }

    /// Number of source positions T.
    pub fn source_len(&self) -> usize {
        self.tensor().shape()[1]
    }

    /// Annotation dimension D; 1 for temporal alignments.
    pub fn dim(&self) -> usize {
        match self {
            AlignmentTensor::Temporal(_) => 1,
            AlignmentTensor::FineGrained(t) => t.shape()[2],
        }
    }

    /// Checks that every weight is strictly positive and that every
    /// normalization group sums to 1 within `tol`: per target step for
    /// temporal alignments, per (step, dimension) pair for fine-grained.
    pub fn validate_simplex(&self, tol: f64) -> Result<()> {
        let t = self.tensor();
        if t.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("alignment weight not positive".into()));
        }
        match self {
            AlignmentTensor::Temporal(t) => {
                let (steps, src) = (t.shape()[0], t.shape()[1]);
                for s in 0..steps {
                    let total: f64 = (0..src).map(|k| t.get(&[s, k])).sum();
                    if (total - 1.0).abs() > tol {
                        return Err(Error::Numeric(format!(
                            "temporal row {s} sums to {total}, not 1"
                        )));
                    }
                }
            }
            AlignmentTensor::FineGrained(t) => {
                let (steps, src, dim) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                for s in 0..steps {
                    for d in 0..dim {
                        let total: f64 = (0..src).map(|k| t.get(&[s, k, d])).sum();
                        if (total - 1.0).abs() > tol {
                            return Err(Error::Numeric(format!(
                                "fine-grained column (step {s}, dim {d}) sums to {total}, not 1"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

// ── score functions ─────────────────────────────────────────────────────

fn expect_output_dim(g: &Graph, f: &FfnnIds, want: usize, op: &'static str) -> Result<()> {
    let got = g.value(f.b2).numel();
    if got != want {
        return Err(Error::dimension(op, &[got], &[want]));
    }
    Ok(())
}

/// Scalar relevance score from the previous decoder state and one
/// annotation vector.
pub fn score_att(
    g: &mut Graph,
    f: &FfnnIds,
    z_prev: TensorId,
    h_t: TensorId,
) -> Result<TensorId> {
    expect_output_dim(g, f, 1, "score_att")?;
    let input = g.concat(&[z_prev, h_t])?;
    ffnn(g, f, input)
}

/// Scalar score with the previous target word embedding as extra input.
/// During training `y_prev` embeds the teacher-forced token; during decoding
/// it embeds the previously generated one.
pub fn score_atty(
    g: &mut Graph,
    f: &FfnnIds,
    z_prev: TensorId,
    h_t: TensorId,
    y_prev: TensorId,
) -> Result<TensorId> {
    expect_output_dim(g, f, 1, "score_atty")?;
    let input = g.concat(&[z_prev, h_t, y_prev])?;
    ffnn(g, f, input)
}

/// Fine-grained score: one network with D output nodes produces the scores
/// for all dimensions of `h_t` in a single forward pass.
pub fn score_atty2d(
    g: &mut Graph,
    f: &FfnnIds,
    z_prev: TensorId,
    h_t: TensorId,
    y_prev: TensorId,
) -> Result<TensorId> {
    let dim = g.value(h_t).numel();
    expect_output_dim(g, f, dim, "score_atty2d")?;
    let input = g.concat(&[z_prev, h_t, y_prev])?;
    ffnn(g, f, input)
}

// ── normalization ───────────────────────────────────────────────────────

/// Softmax over the source axis: weights are positive and sum to 1.
pub fn normalize_temporal(g: &mut Graph, scores: TensorId) -> Result<TensorId> {
    let shape = g.value(scores).shape();
    if shape.len() != 1 {
        return Err(Error::dimension("normalize_temporal", shape, &[]));
    }
    g.softmax_axis(scores, 0)
}

/// Independent softmax over the source axis for every dimension `d` of a
/// `[T×D]` score matrix.
pub fn normalize_dimensionwise(g: &mut Graph, scores: TensorId) -> Result<TensorId> {
    let shape = g.value(scores).shape();
    if shape.len() != 2 {
        return Err(Error::dimension("normalize_dimensionwise", shape, &[]));
    }
    g.softmax_axis(scores, 0)
}

// ── combination ─────────────────────────────────────────────────────────

/// Weighted sum of annotation vectors: `c = Σ_t α_t · h_t`.
pub fn combine_temporal(
    g: &mut Graph,
    alpha: TensorId,
    annotations: &AnnotationSet,
) -> Result<TensorId> {
    let len = g.value(alpha).numel();
    if g.value(alpha).rank() != 1 || len != annotations.len {
        return Err(Error::dimension(
            "combine_temporal",
            g.value(alpha).shape(),
            &[annotations.len],
        ));
    }
    let row = g.reshape(alpha, &[1, len])?;
    let ctx = g.matmul(row, annotations.h)?;
    g.reshape(ctx, &[annotations.dim])
}

/// Dimension-wise combination: `c_d = Σ_t α_{t,d} · h_{t,d}` — an
/// element-wise product summed over the source axis.
pub fn combine_finegrained(
    g: &mut Graph,
    alpha: TensorId,
    annotations: &AnnotationSet,
) -> Result<TensorId> {
    let shape = g.value(alpha).shape();
    if shape != [annotations.len, annotations.dim] {
        return Err(Error::dimension(
            "combine_finegrained",
            shape,
            &[annotations.len, annotations.dim],
        ));
    }
    let weighted = g.mul(alpha, annotations.h)?;
    g.sum_axis(weighted, 0)
}

// ── one full attention application ──────────────────────────────────────

/// Scores every source position, normalizes, and combines: returns the
/// context vector and the detached weight slice for this step.
pub fn attend(
    g: &mut Graph,
    variant: Variant,
    f: &FfnnIds,
    z_prev: TensorId,
    y_prev: Option<TensorId>,
    annotations: &AnnotationSet,
) -> Result<(TensorId, AlphaSlice)> {
    let y_prev = match (variant.uses_target_embedding(), y_prev) {
        (true, Some(y)) => Some(y),
        (true, None) => {
            return Err(Error::Contract(format!(
                "variant {variant} needs the previous target embedding"
            )))
        }
        (false, _) => None,
    };

    match variant {
        Variant::Att | Variant::AttY => {
            let mut scores = Vec::with_capacity(annotations.len);
            for t in 0..annotations.len {
                let h_t = g.row(annotations.h, t)?;
                let s = match variant {
                    Variant::Att => score_att(g, f, z_prev, h_t)?,
                    Variant::AttY => {
                        score_atty(g, f, z_prev, h_t, y_prev.expect("checked above"))?
                    }
                    Variant::AttY2D => unreachable!(),
                };
                scores.push(s);
            }
            let scores = g.concat(&scores)?;
            let alpha = normalize_temporal(g, scores)?;
            let ctx = combine_temporal(g, alpha, annotations)?;
            let slice = AlphaSlice::Temporal(g.value(alpha).clone());
            Ok((ctx, slice))
        }
        Variant::AttY2D => {
            let mut score_rows = Vec::with_capacity(annotations.len);
            for t in 0..annotations.len {
                let h_t = g.row(annotations.h, t)?;
                let s = score_atty2d(g, f, z_prev, h_t, y_prev.expect("checked above"))?;
                score_rows.push(s);
            }
            let scores = g.stack_rows(&score_rows)?;
            let alpha = normalize_dimensionwise(g, scores)?;
            let ctx = combine_finegrained(g, alpha, annotations)?;
            let slice = AlphaSlice::FineGrained(g.value(alpha).clone());
            Ok((ctx, slice))
        }
    }
}
