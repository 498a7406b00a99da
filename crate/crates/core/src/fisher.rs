//! Fisher information of the next-token distribution with respect to the
//! input embedding index, plus the two analytic identities the fast
//! susceptibility estimate rests on:
//!
//! * the second-order Taylor expansion of KL around θ,
//!   `KL(f(θ+δ) ‖ f(θ)) = ½ δᵀ J(θ) δ + O(‖δ‖³)`, and
//! * the closed form `E[δᵀJδ] = Tr(SJ) + mᵀJm` for δ with mean m and
//!   covariance S.
//!
//! The exact matrix `J = Σ_a p(a) g_a g_aᵀ` (full-vocabulary sum) is the
//! oracle path and is capped in dimension; the top-K truncated trace is the
//! production path. Truncated probabilities are *not* renormalized, so the
//! truncation bias is visible and bounded by `(1 − covered_mass)·max‖g‖²`.

use ndarray::Array2;
use thiserror::Error;

use crate::meter::CostMeter;
use crate::model::{InputEval, ModelError, ModelParams, NextTokenDistribution};
use crate::vocab::TokenId;

/// Largest index dimension for which the dense D×D matrix path is allowed.
pub const DEFAULT_FISHER_DIM_CAP: usize = 4096;

#[derive(Debug, Error)]
pub enum FisherError {
    #[error("distributions over different vocabularies: {p} vs {r}")]
    VocabMismatch { p: usize, r: usize },
    #[error("index dimension {dim} exceeds the dense-matrix cap {cap}; use the top-K trace estimator instead")]
    DimCapExceeded { dim: usize, cap: usize },
    #[error("K = {k} outside valid range 1..={vocab}")]
    KOutOfRange { k: usize, vocab: usize },
    #[error("vector length {got} does not match index dimension {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("covariance matrix is not symmetric within tolerance")]
    NotSymmetric,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A parametric family of next-token distributions indexed by a real
/// vector θ — the reparameterized view of a language model's input. The
/// Fisher machinery is written against this trait so that analytic test
/// families (e.g. a two-token softmax head) exercise the identical code
/// path as the transformer.
pub trait AnswerFamily {
    fn dim(&self) -> usize;
    fn vocab_size(&self) -> usize;
    /// One recorded forward pass at θ; gradients for any number of answers
    /// can then be taken from the same evaluation.
    fn eval(&self, theta: &[f64]) -> Result<Box<dyn FamilyEval + '_>, FisherError>;
}

pub trait FamilyEval {
    fn dist(&self) -> &NextTokenDistribution;
    /// ∂ log f(answer; θ) / ∂θ as a flat vector of length `dim()`.
    fn grad_log_prob(&mut self, answer: TokenId) -> Result<Vec<f64>, FisherError>;
}

/// The transformer viewed as an answer family over a fixed number of input
/// positions: θ is the flattened (positions × embed_dim) input matrix with
/// every slot live. Counts passes on the meter, when one is attached.
pub struct TransformerFamily<'a> {
    params: &'a ModelParams,
    n_positions: usize,
    meter: Option<&'a CostMeter>,
}

impl<'a> TransformerFamily<'a> {
    pub fn new(params: &'a ModelParams, n_positions: usize) -> Self {
        Self { params, n_positions, meter: None }
    }

    pub fn with_meter(mut self, meter: &'a CostMeter) -> Self {
        self.meter = Some(meter);
        self
    }
}

struct TransformerEval<'a> {
    eval: InputEval,
    meter: Option<&'a CostMeter>,
}

impl FamilyEval for TransformerEval<'_> {
    fn dist(&self) -> &NextTokenDistribution {
        self.eval.dist()
    }

    fn grad_log_prob(&mut self, answer: TokenId) -> Result<Vec<f64>, FisherError> {
        let g = self.eval.grad_log_prob(answer)?;
        if let Some(m) = self.meter {
            m.count_backward();
        }
        Ok(g.into_iter().collect())
    }
}

impl AnswerFamily for TransformerFamily<'_> {
    fn dim(&self) -> usize {
        self.n_positions * self.params.config.embed_dim
    }

    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn eval(&self, theta: &[f64]) -> Result<Box<dyn FamilyEval + '_>, FisherError> {
        if theta.len() != self.dim() {
            return Err(FisherError::DimMismatch {
                got: theta.len(),
                expected: self.dim(),
            });
        }
        let rows = Array2::from_shape_vec(
            (self.n_positions, self.params.config.embed_dim),
            theta.to_vec(),
        )
        .expect("dimension checked above");
        let input = crate::model::EmbeddedInput::dense(rows);
        let eval = self.params.eval_input(&input)?;
        if let Some(m) = self.meter {
            m.count_forward();
        }
        Ok(Box::new(TransformerEval { eval, meter: self.meter }))
    }
}

/// KL(p ‖ r) in nats: `Σ_a p(a)·(log p(a) − log r(a))` with `0·log(0/·) = 0`.
/// Returns `+∞` when p puts mass where r has none; no smoothing is applied.
pub fn kl_divergence(
    p: &NextTokenDistribution,
    r: &NextTokenDistribution,
) -> Result<f64, FisherError> {
    if p.len() != r.len() {
        return Err(FisherError::VocabMismatch { p: p.len(), r: r.len() });
    }
    let mut total = 0.0;
    for a in 0..p.len() {
        let pa = p.probs()[a];
        if pa == 0.0 {
            continue;
        }
        let lr = r.log_probs()[a];
        if lr == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        total += pa * (p.log_probs()[a] - lr);
    }
    Ok(total)
}

/// Dense symmetric Fisher matrix with its provenance metadata.
#[derive(Debug, Clone)]
pub struct FisherMatrix {
    matrix: Array2<f64>,
    query_id: Option<String>,
    /// answers retained; `None` means the exact full-vocabulary sum
    k: Option<usize>,
    covered_mass: f64,
}

impl FisherMatrix {
    /// Wraps an externally built symmetric matrix (synthetic test inputs).
    pub fn from_matrix(matrix: Array2<f64>) -> Result<Self, FisherError> {
        check_symmetric(&matrix)?;
        Ok(Self { matrix, query_id: None, k: None, covered_mass: 1.0 })
    }

    pub fn with_query_id(mut self, id: impl Into<String>) -> Self {
        self.query_id = Some(id.into());
        self
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn query_id(&self) -> Option<&str> {
        self.query_id.as_deref()
    }

    /// `None` for the exact full-vocabulary matrix.
    pub fn k(&self) -> Option<usize> {
        self.k
    }

    pub fn covered_mass(&self) -> f64 {
        self.covered_mass
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.matrix[[i, i]]).sum()
    }

    /// vᵀ J v.
    pub fn quadratic_form(&self, v: &[f64]) -> Result<f64, FisherError> {
        if v.len() != self.dim() {
            return Err(FisherError::DimMismatch { got: v.len(), expected: self.dim() });
        }
        let mut total = 0.0;
        for i in 0..v.len() {
            let mut row = 0.0;
            for j in 0..v.len() {
                row += self.matrix[[i, j]] * v[j];
            }
            total += v[i] * row;
        }
        Ok(total)
    }
}

fn check_symmetric(m: &Array2<f64>) -> Result<(), FisherError> {
    if m.nrows() != m.ncols() {
        return Err(FisherError::DimMismatch { got: m.ncols(), expected: m.nrows() });
    }
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[[i, j]] - m[[j, i]]).abs() > 1e-9 * (1.0 + scale) {
                return Err(FisherError::NotSymmetric);
            }
        }
    }
    Ok(())
}

/// Exact Fisher matrix `J(θ) = Σ_{a∈Σ} p(a) g_a g_aᵀ` over the *whole*
/// vocabulary; the oracle path, refused above `cap`.
pub fn fisher_matrix_exact(
    family: &dyn AnswerFamily,
    theta: &[f64],
    cap: usize,
) -> Result<FisherMatrix, FisherError> {
    let dim = family.dim();
    if dim > cap {
        return Err(FisherError::DimCapExceeded { dim, cap });
    }
    let mut eval = family.eval(theta)?;
    let probs = eval.dist().probs().to_vec();
    let mut matrix = Array2::zeros((dim, dim));
    let mut covered = 0.0;
    for (a, &pa) in probs.iter().enumerate() {
        covered += pa;
        if pa == 0.0 {
            continue;
        }
        let g = eval.grad_log_prob(a as TokenId)?;
        for i in 0..dim {
            let gi = pa * g[i];
            for j in i..dim {
                matrix[[i, j]] += gi * g[j];
            }
        }
    }
    // mirror the upper triangle so symmetry is exact
    for i in 0..dim {
        for j in (i + 1)..dim {
            matrix[[j, i]] = matrix[[i, j]];
        }
    }
    Ok(FisherMatrix { matrix, query_id: None, k: None, covered_mass: covered })
}

/// Top-K truncated trace of the Fisher matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEstimate {
    /// `Σ_{k=1..K} p(a_k) ‖g_{a_k}‖²`, un-renormalized
    pub value: f64,
    pub k: usize,
    /// probability mass of the retained answers
    pub covered_mass: f64,
}

/// Trace estimate from the K highest-probability answers (probability ties
/// break by ascending token id). Costs one forward plus K backwards.
pub fn fisher_trace_topk(
    family: &dyn AnswerFamily,
    theta: &[f64],
    k: usize,
) -> Result<TraceEstimate, FisherError> {
    let vocab = family.vocab_size();
    if k == 0 || k > vocab {
        return Err(FisherError::KOutOfRange { k, vocab });
    }
    let mut eval = family.eval(theta)?;
    let top = eval.dist().top_k(k);
    let probs = eval.dist().probs().to_vec();
    let mut value = 0.0;
    let mut covered = 0.0;
    for &a in &top {
        let pa = probs[a as usize];
        covered += pa;
        let g = eval.grad_log_prob(a)?;
        value += pa * g.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(TraceEstimate { value, k, covered_mass: covered })
}

/// `Σ_a p(a) (g_aᵀ v)²` — the quadratic form vᵀJv evaluated without
/// materializing J, by the full-vocabulary sum. The algebraic twin of
/// [`FisherMatrix::quadratic_form`]; the pair is kept as a cross-check.
pub fn fisher_quadratic_form(
    family: &dyn AnswerFamily,
    theta: &[f64],
    v: &[f64],
) -> Result<f64, FisherError> {
    if v.len() != family.dim() {
        return Err(FisherError::DimMismatch { got: v.len(), expected: family.dim() });
    }
    let mut eval = family.eval(theta)?;
    let probs = eval.dist().probs().to_vec();
    let mut total = 0.0;
    for (a, &pa) in probs.iter().enumerate() {
        if pa == 0.0 {
            continue;
        }
        let g = eval.grad_log_prob(a as TokenId)?;
        let dot: f64 = g.iter().zip(v).map(|(a, b)| a * b).sum();
        total += pa * dot * dot;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaylorGap {
    /// KL(f(θ + tδ) ‖ f(θ)) in nats
    pub kl: f64,
    /// ½ t² δᵀ J(θ) δ
    pub quad: f64,
    /// |kl − quad|
    pub gap: f64,
}

/// KL between the perturbed and base distributions against its quadratic
/// approximation, at each scale in `ts`. The quadratic form is computed
/// once; each scale costs one extra forward pass.
pub fn taylor_sweep(
    family: &dyn AnswerFamily,
    theta: &[f64],
    delta: &[f64],
    ts: &[f64],
) -> Result<Vec<TaylorGap>, FisherError> {
    if delta.len() != family.dim() {
        return Err(FisherError::DimMismatch { got: delta.len(), expected: family.dim() });
    }
    let base = family.eval(theta)?;
    let base_dist = base.dist().clone();
    drop(base);
    let quad_unit = fisher_quadratic_form(family, theta, delta)?;
    let mut out = Vec::with_capacity(ts.len());
    for &t in ts {
        let perturbed: Vec<f64> = theta.iter().zip(delta).map(|(a, b)| a + t * b).collect();
        let shifted = family.eval(&perturbed)?;
        let kl = kl_divergence(shifted.dist(), &base_dist)?;
        let quad = 0.5 * t * t * quad_unit;
        out.push(TaylorGap { kl, quad, gap: (kl - quad).abs() });
    }
    Ok(out)
}

pub fn taylor_gap(
    family: &dyn AnswerFamily,
    theta: &[f64],
    delta: &[f64],
    t: f64,
) -> Result<TaylorGap, FisherError> {
    Ok(taylor_sweep(family, theta, delta, &[t])?[0])
}

/// Closed form for `E[δᵀJδ]` when δ has mean `m` and covariance `s`:
/// `Tr(sJ) + mᵀJm`. With m = 0 and s = I this is the trace of J — the
/// sampling-free susceptibility surrogate.
pub fn quadratic_expectation_closed_form(
    j: &FisherMatrix,
    m: &[f64],
    s: &Array2<f64>,
) -> Result<f64, FisherError> {
    let d = j.dim();
    if m.len() != d {
        return Err(FisherError::DimMismatch { got: m.len(), expected: d });
    }
    if s.nrows() != d || s.ncols() != d {
        return Err(FisherError::DimMismatch { got: s.nrows(), expected: d });
    }
    check_symmetric(s)?;
    let mut trace_sj = 0.0;
    for i in 0..d {
        for k in 0..d {
            trace_sj += s[[i, k]] * j.matrix()[[k, i]];
        }
    }
    Ok(trace_sj + j.quadratic_form(m)?)
}

/// Least-squares slope of `ln y` against `ln x`; the scaling-order probe
/// used by the Taylor-remainder checks.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for &(x, y) in points {
        sx += x.ln();
        sy += y.ln();
    }
    let (mx, my) = (sx / n, sy / n);
    let mut num = 0.0;
    let mut den = 0.0;
    for &(x, y) in points {
        num += (x.ln() - mx) * (y.ln() - my);
        den += (x.ln() - mx) * (x.ln() - mx);
    }
    num / den
}
