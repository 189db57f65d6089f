//! Training objectives: masked cross-entropy for the discrete head, CCC loss
//! for each continuous attribute, and their weighted multi-task sum.
//!
//! Every loss takes a per-example presence mask. Masked examples are excluded
//! from every statistic and receive exactly zero gradient, which is what lets
//! corpora with different label types be mixed in one batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::softmax;
use crate::numerics::{Matrix, Real};

/// Lower clamp applied to probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Denominator guard of the CCC loss.
pub const CCC_EPS: f64 = 1e-8;

/// Number of discrete emotion classes (neutral, angry, happy, sad, disgust).
pub const NUM_CLASSES: usize = 5;

/// Number of continuous attributes (valence, arousal, dominance).
pub const NUM_ATTRIBUTES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grad: Matrix<T>,
    /// Set when the mask left too few examples for a meaningful value.
    pub degenerate: bool,
}

/// Softmax cross-entropy averaged over unmasked rows.
///
/// With no unmasked rows the loss is 0 with zero gradient and `degenerate`
/// set. Class ids of masked rows are ignored.
pub fn cross_entropy<T: Real>(logits: &Matrix<T>, targets: &[usize], mask: &[bool]) -> Result<LossOutput<T>> {
    let (b, k) = logits.shape();
    if targets.len() != b || mask.len() != b {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy: {b} logit rows, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let mut grad = Matrix::zeros(b, k);
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Ok(LossOutput {
            loss: T::zero(),
            grad,
            degenerate: true,
        });
    }
    let scale = T::one() / T::of(n as f64);
    let floor = T::of(PROB_FLOOR);
    let mut total = T::zero();
    for r in (0..b).filter(|&r| mask[r]) {
        let target = targets[r];
        if target >= k {
            return Err(Error::ClassOutOfRange { id: target, classes: k });
        }
        let p = softmax(logits.row(r));
        total -= p[target].max(floor).ln();
        for (j, (g, &pj)) in grad.row_mut(r).iter_mut().zip(&p).enumerate() {
            let onehot = if j == target { T::one() } else { T::zero() };
            *g = (pj - onehot) * scale;
        }
    }
    Ok(LossOutput {
        loss: total * scale,
        grad,
        degenerate: false,
    })
}

/// Population moments between ground truth `c` and prediction `ĉ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CccStats<T> {
    /// covariance of truth and prediction
    pub s_cc_hat: T,
    /// variance of the truth
    pub s_c_sq: T,
    /// variance of the prediction
    pub s_chat_sq: T,
    pub c_bar: T,
    pub chat_bar: T,
    pub n: usize,
}

impl<T: Real> CccStats<T> {
    /// Two-pass statistics over the unmasked entries, visited in index order.
    /// Returns `None` when no entry is unmasked.
    pub fn compute(pred: &[T], truth: &[T], mask: &[bool]) -> Option<Self> {
        let idx = || (0..pred.len()).filter(|&i| mask[i]);
        let n = idx().count();
        if n == 0 {
            return None;
        }
        let nf = T::of(n as f64);
        let mut sp = T::zero();
        let mut st = T::zero();
        for i in idx() {
            sp += pred[i];
            st += truth[i];
        }
        let chat_bar = sp / nf;
        let c_bar = st / nf;
        let (mut cov, mut vp, mut vt) = (T::zero(), T::zero(), T::zero());
        for i in idx() {
            let dp = pred[i] - chat_bar;
            let dt = truth[i] - c_bar;
            cov += dp * dt;
            vp += dp * dp;
            vt += dt * dt;
        }
        Some(CccStats {
            s_cc_hat: cov / nf,
            s_c_sq: vt / nf,
            s_chat_sq: vp / nf,
            c_bar,
            chat_bar,
            n,
        })
    }

    /// `s_c² + s_ĉ² + (c̄ − ĉ̄)²`, without any guard.
    pub fn denominator(&self) -> T {
        let dm = self.c_bar - self.chat_bar;
        self.s_c_sq + self.s_chat_sq + dm * dm
    }
}

/// `1 − 2 s_cĉ / (s_c² + s_ĉ² + (c̄ − ĉ̄)² + ε)` over unmasked entries, with its
/// gradient w.r.t. each prediction. Fewer than two unmasked entries gives
/// loss 1, zero gradient and `degenerate` set.
pub fn ccc_loss<T: Real>(pred: &[T], truth: &[T], mask: &[bool]) -> Result<LossOutput<T>> {
    let b = pred.len();
    if truth.len() != b || mask.len() != b {
        return Err(Error::InvalidArgument(format!(
            "ccc_loss: {b} predictions, {} targets, {} mask entries",
            truth.len(),
            mask.len()
        )));
    }
    let mut grad = Matrix::zeros(1, b);
    let stats = match CccStats::compute(pred, truth, mask) {
        Some(s) if s.n >= 2 => s,
        _ => {
            return Ok(LossOutput {
                loss: T::one(),
                grad,
                degenerate: true,
            })
        }
    };
    let two = T::of(2.0);
    let nf = T::of(stats.n as f64);
    let num = two * stats.s_cc_hat;
    let den = stats.denominator() + T::of(CCC_EPS);
    let mean_gap = stats.chat_bar - stats.c_bar;
    let g = grad.data_mut();
    for i in (0..b).filter(|&i| mask[i]) {
        // ∂num/∂ĉ_i = 2 (c_i − c̄) / n ; ∂den/∂ĉ_i = 2 (ĉ_i − ĉ̄) / n + 2 (ĉ̄ − c̄) / n
        let d_num = two * (truth[i] - stats.c_bar) / nf;
        let d_den = two * (pred[i] - stats.chat_bar + mean_gap) / nf;
        g[i] = -(d_num * den - num * d_den) / (den * den);
    }
    Ok(LossOutput {
        loss: T::one() - num / den,
        grad,
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousLoss<T> {
    /// Per-attribute CCC losses in column order (valence, arousal, dominance).
    pub terms: [T; NUM_ATTRIBUTES],
    pub grad: Matrix<T>,
    pub degenerate: bool,
}

impl<T: Real> ContinuousLoss<T> {
    pub fn total(&self) -> T {
        self.terms.iter().copied().sum()
    }
}

/// Sum of the per-column CCC losses of a `B x 3` prediction.
pub fn continuous_loss<T: Real>(pred: &Matrix<T>, truth: &Matrix<T>, mask: &[bool]) -> Result<ContinuousLoss<T>> {
    if pred.shape() != truth.shape() || pred.cols() != NUM_ATTRIBUTES {
        return Err(Error::shape("continuous_loss", pred.shape(), truth.shape()));
    }
    let b = pred.rows();
    let mut grad = Matrix::zeros(b, NUM_ATTRIBUTES);
    let mut terms = [T::zero(); NUM_ATTRIBUTES];
    let mut degenerate = false;
    for (col, term) in terms.iter_mut().enumerate() {
        let p: Vec<T> = (0..b).map(|r| pred.get(r, col)).collect();
        let t: Vec<T> = (0..b).map(|r| truth.get(r, col)).collect();
        let out = ccc_loss(&p, &t, mask)?;
        *term = out.loss;
        degenerate |= out.degenerate;
        for (r, &g) in out.grad.data().iter().enumerate() {
            grad.set(r, col, g);
        }
    }
    Ok(ContinuousLoss { terms, grad, degenerate })
}

/// Weights of the continuous (`alpha`) and discrete (`beta`) terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtlWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MtlWeights {
    fn default() -> Self {
        MtlWeights { alpha: 1.0, beta: 1.0 }
    }
}

impl MtlWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative, got alpha={alpha} beta={beta}"
            )));
        }
        Ok(MtlWeights { alpha, beta })
    }
}

/// `α (L_val + L_dom + L_aro) + β L_disc`, with `cont_terms` in
/// (valence, arousal, dominance) order.
pub fn multitask_loss<T: Real>(cont_terms: [T; NUM_ATTRIBUTES], disc_term: T, w: MtlWeights) -> T {
    let [val, aro, dom] = cont_terms;
    T::of(w.alpha) * (val + dom + aro) + T::of(w.beta) * disc_term
}
