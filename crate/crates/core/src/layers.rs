//! Differentiable building blocks with cached forward context.
//!
//! Every layer follows the same protocol: `forward` stores what `backward`
//! needs, `backward` consumes the upstream gradient, accumulates parameter
//! gradients into [`Param::grad`] and returns the gradient w.r.t. the input.

use crate::error::{Error, Result};
use crate::numerics::{xavier_init, Matrix, Real, Rng};

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Matrix<T>) -> Self {
        let (r, c) = value.shape();
        Param {
            value,
            grad: Matrix::zeros(r, c),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            value: self.value.cast(),
            grad: self.grad.cast(),
        }
    }
}

/// Train mode enables dropout; eval mode makes every layer deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected layer `y = x Wᵀ + b` applied row-wise.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    /// `out x in`
    pub weight: Param<T>,
    /// `1 x out`
    pub bias: Param<T>,
    cache: Option<Matrix<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(rng: &mut Rng, input: usize, output: usize) -> Self {
        Linear {
            weight: Param::new(xavier_init(rng, output, input)),
            bias: Param::new(Matrix::zeros(1, output)),
            cache: None,
        }
    }

    pub fn from_params(weight: Matrix<T>, bias: Matrix<T>) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.rows() {
            return Err(Error::shape("linear bias", weight.shape(), bias.shape()));
        }
        Ok(Linear {
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn forward(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let y = self.apply(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    /// Forward pass without caching.
    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("linear", x.shape(), self.weight.value.shape()));
        }
        let mut y = x.matmul_t(&self.weight.value)?;
        let b = self.bias.value.data();
        for r in 0..y.rows() {
            for (o, &bv) in y.row_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        let x = self.cache.as_ref().ok_or(Error::NoCache("linear"))?;
        if grad_out.rows() != x.rows() || grad_out.cols() != self.output_dim() {
            return Err(Error::shape("linear backward", grad_out.shape(), (x.rows(), self.output_dim())));
        }
        grad_out.t_matmul_acc(x, &mut self.weight.grad);
        let db = self.bias.grad.data_mut();
        for r in 0..grad_out.rows() {
            for (d, &g) in db.iter_mut().zip(grad_out.row(r)) {
                *d += g;
            }
        }
        grad_out.matmul(&self.weight.value)
    }
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActivationKind {
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl ActivationKind {
    pub fn leaky() -> Self {
        ActivationKind::LeakyRelu(DEFAULT_LEAKY_SLOPE)
    }
}

/// Pure elementwise activation.
pub fn activation_forward<T: Real>(kind: ActivationKind, x: &Matrix<T>) -> Matrix<T> {
    match kind {
        ActivationKind::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        ActivationKind::LeakyRelu(slope) => {
            let s = T::of(slope);
            x.map(|v| if v > T::zero() { v } else { s * v })
        }
        ActivationKind::Tanh => x.map(|v| v.tanh()),
    }
}

/// Derivative given the forward input. At exactly 0 the rectifiers take the
/// positive-side slope (1).
fn activation_derivative<T: Real>(kind: ActivationKind, input: T, output: T) -> T {
    match kind {
        ActivationKind::Relu => {
            if input >= T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        ActivationKind::LeakyRelu(slope) => {
            if input >= T::zero() {
                T::one()
            } else {
                T::of(slope)
            }
        }
        ActivationKind::Tanh => T::one() - output * output,
    }
}

#[derive(Clone, Debug)]
pub struct Activation<T> {
    pub kind: ActivationKind,
    cache: Option<(Matrix<T>, Matrix<T>)>,
}

impl<T: Real> Activation<T> {
    pub fn new(kind: ActivationKind) -> Self {
        Activation { kind, cache: None }
    }

    pub fn forward(&mut self, x: &Matrix<T>) -> Matrix<T> {
        let y = activation_forward(self.kind, x);
        self.cache = Some((x.clone(), y.clone()));
        y
    }

    pub fn backward(&mut self, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        let (x, y) = self.cache.as_ref().ok_or(Error::NoCache("activation"))?;
        if grad_out.shape() != x.shape() {
            return Err(Error::shape("activation backward", grad_out.shape(), x.shape()));
        }
        let data = grad_out
            .data()
            .iter()
            .zip(x.data().iter().zip(y.data()))
            .map(|(&g, (&xi, &yi))| g * activation_derivative(self.kind, xi, yi))
            .collect();
        Matrix::new(x.rows(), x.cols(), data)
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)` in train mode.
#[derive(Clone, Debug)]
pub struct Dropout<T> {
    pub rate: f64,
    mask: Option<Matrix<T>>,
}

impl<T: Real> Dropout<T> {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        Dropout { rate, mask: None }
    }

    pub fn forward(&mut self, x: &Matrix<T>, mode: Mode, rng: &mut Rng) -> Matrix<T> {
        if mode == Mode::Eval || self.rate == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = T::of(1.0 / (1.0 - self.rate));
        let data = (0..x.len())
            .map(|_| if rng.uniform() < self.rate { T::zero() } else { keep })
            .collect();
        let mask = Matrix::new(x.rows(), x.cols(), data).expect("mask shape");
        let y = x.hadamard(&mask).expect("mask shape");
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        match &self.mask {
            None => Ok(grad_out.clone()),
            Some(mask) => grad_out.hadamard(mask),
        }
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub const DEFAULT_ATTENTION_DIM: usize = 64;

#[derive(Clone, Debug)]
struct SapCache<T> {
    /// Valid frames of all utterances, packed back to back.
    frames: Matrix<T>,
    /// `[start, end)` of each utterance within `frames`.
    segments: Vec<(usize, usize)>,
    /// `tanh(W h + b)` per packed frame.
    hidden: Matrix<T>,
    alpha: Vec<T>,
    /// Padded-row index of each packed frame and the padded row count, when
    /// the input came through [`SelfAttentivePooling::forward`].
    scatter: Option<(Vec<usize>, usize)>,
}

/// Single-head additive self-attentive pooling over time:
/// `e_t = v · tanh(W h_t + b)`, `α = softmax(e)` over valid frames, output `Σ α_t h_t`.
///
/// Masked frames behave as if their score were `-∞`: they get weight exactly
/// zero and gradient exactly zero. Internally only valid frames are scored,
/// so padding never changes a single bit of the output.
#[derive(Clone, Debug)]
pub struct SelfAttentivePooling<T> {
    /// `d_att x d`
    pub w_att: Param<T>,
    /// `1 x d_att`
    pub b_att: Param<T>,
    /// `1 x d_att`
    pub v: Param<T>,
    cache: Option<SapCache<T>>,
}

impl<T: Real> SelfAttentivePooling<T> {
    pub fn new(rng: &mut Rng, dim: usize, attention_dim: usize) -> Self {
        SelfAttentivePooling {
            w_att: Param::new(xavier_init(rng, attention_dim, dim)),
            b_att: Param::new(Matrix::zeros(1, attention_dim)),
            v: Param::new(xavier_init(rng, 1, attention_dim)),
            cache: None,
        }
    }

    pub fn from_params(w_att: Matrix<T>, b_att: Matrix<T>, v: Matrix<T>) -> Result<Self> {
        let d_att = w_att.rows();
        if b_att.shape() != (1, d_att) || v.shape() != (1, d_att) {
            return Err(Error::shape("attention params", w_att.shape(), v.shape()));
        }
        Ok(SelfAttentivePooling {
            w_att: Param::new(w_att),
            b_att: Param::new(b_att),
            v: Param::new(v),
            cache: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_att.value.cols()
    }

    /// Pools one utterance `h` (`M x d`) into a `d`-vector.
    pub fn pool(&mut self, h: &Matrix<T>, frame_mask: &[bool]) -> Result<Vec<T>> {
        Ok(self.forward(h, &[frame_mask])?.into_data())
    }

    /// Pools a padded batch. `h` has `B * T` rows; utterance `b` owns rows
    /// `b*T..(b+1)*T` and `frame_masks[b]` (length `T`) marks its valid frames.
    pub fn forward(&mut self, h: &Matrix<T>, frame_masks: &[&[bool]]) -> Result<Matrix<T>> {
        let (rows, lengths) = valid_rows(h.rows(), frame_masks)?;
        let mut packed = Matrix::zeros(rows.len(), h.cols());
        for (i, &r) in rows.iter().enumerate() {
            packed.row_mut(i).copy_from_slice(h.row(r));
        }
        let out = self.forward_packed(&packed, &lengths)?;
        if let Some(c) = self.cache.as_mut() {
            c.scatter = Some((rows, h.rows()));
        }
        Ok(out)
    }

    /// Pools utterances stored back to back: utterance `b` owns the next
    /// `lengths[b]` rows of `frames`.
    pub fn forward_packed(&mut self, frames: &Matrix<T>, lengths: &[usize]) -> Result<Matrix<T>> {
        let d = self.dim();
        if frames.cols() != d {
            return Err(Error::shape("attention pooling", frames.shape(), self.w_att.value.shape()));
        }
        if lengths.is_empty() || lengths.iter().sum::<usize>() != frames.rows() {
            return Err(Error::InvalidArgument(format!(
                "{} frames do not match {} segment lengths",
                frames.rows(),
                lengths.len()
            )));
        }
        if lengths.contains(&0) {
            return Err(Error::NoValidFrames);
        }
        let mut segments = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            segments.push((start, start + len));
            start += len;
        }

        let mut hidden = frames.matmul_t(&self.w_att.value)?;
        let bias = self.b_att.value.data();
        for r in 0..hidden.rows() {
            for (z, &bv) in hidden.row_mut(r).iter_mut().zip(bias) {
                *z = (*z + bv).tanh();
            }
        }
        let v = self.v.value.data();
        let scores: Vec<T> = (0..hidden.rows())
            .map(|r| hidden.row(r).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect();

        let mut alpha = vec![T::zero(); scores.len()];
        let mut out = Matrix::zeros(lengths.len(), d);
        for (b, &(s, e)) in segments.iter().enumerate() {
            let weights = softmax(&scores[s..e]);
            let row = out.row_mut(b);
            for (i, &a) in weights.iter().enumerate() {
                alpha[s + i] = a;
                for (o, &x) in row.iter_mut().zip(frames.row(s + i)) {
                    *o += a * x;
                }
            }
        }

        self.cache = Some(SapCache {
            frames: frames.clone(),
            segments,
            hidden,
            alpha,
            scatter: None,
        });
        Ok(out)
    }

    /// Attention weights of the last forward: on the padded frame grid after
    /// [`forward`](Self::forward), packed after [`forward_packed`](Self::forward_packed).
    pub fn attention_weights(&self) -> Option<Vec<T>> {
        let c = self.cache.as_ref()?;
        match &c.scatter {
            None => Some(c.alpha.clone()),
            Some((rows, total)) => {
                let mut w = vec![T::zero(); *total];
                for (&r, &a) in rows.iter().zip(&c.alpha) {
                    w[r] = a;
                }
                Some(w)
            }
        }
    }

    /// Gradient w.r.t. the padded input (`B*T x d`) of the last [`forward`](Self::forward).
    pub fn backward(&mut self, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        let packed = self.backward_packed(grad_out)?;
        let c = self.cache.as_ref().expect("cache checked by backward_packed");
        let (rows, total) = c
            .scatter
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("last forward was packed; use backward_packed".into()))?;
        let mut grad_in = Matrix::zeros(*total, packed.cols());
        for (i, &r) in rows.iter().enumerate() {
            grad_in.row_mut(r).copy_from_slice(packed.row(i));
        }
        Ok(grad_in)
    }

    /// `grad_out` is `B x d`; returns the gradient w.r.t. the packed frames.
    pub fn backward_packed(&mut self, grad_out: &Matrix<T>) -> Result<Matrix<T>> {
        let c = self.cache.as_ref().ok_or(Error::NoCache("attention pooling"))?;
        let d = self.dim();
        if grad_out.shape() != (c.segments.len(), d) {
            return Err(Error::shape("attention backward", grad_out.shape(), (c.segments.len(), d)));
        }
        let d_att = self.w_att.value.rows();
        let n = c.frames.rows();
        let v = self.v.value.data();

        // through the softmax
        let mut d_score = vec![T::zero(); n];
        for (b, &(s, e)) in c.segments.iter().enumerate() {
            let g = grad_out.row(b);
            let d_alpha: Vec<T> = (s..e)
                .map(|i| c.frames.row(i).iter().zip(g).map(|(&x, &y)| x * y).sum())
                .collect();
            let dot: T = (s..e).map(|i| c.alpha[i] * d_alpha[i - s]).sum();
            for i in s..e {
                d_score[i] = c.alpha[i] * (d_alpha[i - s] - dot);
            }
        }

        // through v · tanh(z)
        let mut d_pre = Matrix::zeros(n, d_att);
        {
            let dv = self.v.grad.data_mut();
            for i in 0..n {
                let u = c.hidden.row(i);
                let ds = d_score[i];
                for (j, dz) in d_pre.row_mut(i).iter_mut().enumerate() {
                    dv[j] += ds * u[j];
                    *dz = ds * v[j] * (T::one() - u[j] * u[j]);
                }
            }
        }
        d_pre.t_matmul_acc(&c.frames, &mut self.w_att.grad);
        let db = self.b_att.grad.data_mut();
        for i in 0..n {
            for (d, &g) in db.iter_mut().zip(d_pre.row(i)) {
                *d += g;
            }
        }

        // dh = α g + d_pre W
        let mut grad_in = d_pre.matmul(&self.w_att.value)?;
        for (b, &(s, e)) in c.segments.iter().enumerate() {
            let g = grad_out.row(b);
            for i in s..e {
                let a = c.alpha[i];
                for (o, &gv) in grad_in.row_mut(i).iter_mut().zip(g) {
                    *o += a * gv;
                }
            }
        }
        Ok(grad_in)
    }
}

/// Row indices of valid frames in a padded `B*T` layout, and per-utterance counts.
pub fn valid_rows(total_rows: usize, frame_masks: &[&[bool]]) -> Result<(Vec<usize>, Vec<usize>)> {
    let batch = frame_masks.len();
    let t_max = if batch == 0 { 0 } else { total_rows / batch };
    if batch == 0 || t_max * batch != total_rows || frame_masks.iter().any(|m| m.len() != t_max) {
        return Err(Error::InvalidArgument(format!(
            "{total_rows} frames cannot be split into {batch} masks"
        )));
    }
    let mut rows = Vec::with_capacity(total_rows);
    let mut lengths = Vec::with_capacity(batch);
    for (b, mask) in frame_masks.iter().enumerate() {
        let before = rows.len();
        rows.extend(mask.iter().enumerate().filter(|(_, &m)| m).map(|(t, _)| b * t_max + t));
        if rows.len() == before {
            return Err(Error::NoValidFrames);
        }
        lengths.push(rows.len() - before);
    }
    Ok((rows, lengths))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_error, numeric_grad};

    fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::new(r, c, (0..r * c).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
    }

    fn weighted_sum(y: &Matrix<f64>, r: &Matrix<f64>) -> f64 {
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn linear_identity_and_analytic() {
        let mut lin = Linear::from_params(Matrix::<f32>::identity(3), Matrix::zeros(1, 3)).unwrap();
        let x = Matrix::from_rows(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, 4.0]]);
        assert_eq!(lin.forward(&x).unwrap(), x);
        let mut lin = Linear::from_params(Matrix::from_rows(&[&[2.0f32]]), Matrix::from_rows(&[&[1.0]])).unwrap();
        assert_eq!(lin.forward(&Matrix::from_rows(&[&[3.0]])).unwrap().data(), &[7.0]);
    }

    #[test]
    fn linear_backward_needs_forward() {
        let mut lin: Linear<f32> = Linear::new(&mut Rng::new(0), 2, 2);
        assert!(matches!(lin.backward(&Matrix::zeros(1, 2)), Err(Error::NoCache(_))));
        assert!(lin.forward(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = Rng::new(seed);
            let (n, i, o) = (rng.int_range(1, 4), rng.int_range(1, 5), rng.int_range(1, 5));
            let mut lin: Linear<f64> = Linear::new(&mut rng, i, o);
            lin.bias.value = random(&mut rng, 1, o);
            let x = random(&mut rng, n, i);
            let r = random(&mut rng, n, o);
            lin.forward(&x).unwrap();
            let dx = lin.backward(&r).unwrap();

            let base = lin.clone();
            let num_w = numeric_grad(
                |w| {
                    let l = Linear::from_params(Matrix::new(o, i, w.to_vec()).unwrap(), base.bias.value.clone()).unwrap();
                    weighted_sum(&l.apply(&x).unwrap(), &r)
                },
                base.weight.value.data(),
            );
            let num_b = numeric_grad(
                |b| {
                    let l = Linear::from_params(base.weight.value.clone(), Matrix::new(1, o, b.to_vec()).unwrap()).unwrap();
                    weighted_sum(&l.apply(&x).unwrap(), &r)
                },
                base.bias.value.data(),
            );
            let num_x = numeric_grad(
                |xs| weighted_sum(&base.apply(&Matrix::new(n, i, xs.to_vec()).unwrap()).unwrap(), &r),
                x.data(),
            );
            assert!(max_rel_error(lin.weight.grad.data(), &num_w) < 1e-4);
            assert!(max_rel_error(lin.bias.grad.data(), &num_b) < 1e-4);
            assert!(max_rel_error(dx.data(), &num_x) < 1e-4);
        }
    }

    #[test]
    fn activation_values() {
        let x = Matrix::from_rows(&[&[-1.0f32, 2.0]]);
        assert_eq!(activation_forward(ActivationKind::Relu, &x).data(), &[0.0, 2.0]);
        assert_eq!(activation_forward(ActivationKind::LeakyRelu(0.01), &x).data(), &[-0.01, 2.0]);
    }

    #[test]
    fn rectifier_kink_uses_positive_slope() {
        for kind in [ActivationKind::Relu, ActivationKind::leaky()] {
            let mut act = Activation::<f64>::new(kind);
            act.forward(&Matrix::from_rows(&[&[0.0]]));
            assert_eq!(act.backward(&Matrix::from_rows(&[&[1.0]])).unwrap().data(), &[1.0]);
        }
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = Rng::new(100 + seed);
            for kind in [ActivationKind::Relu, ActivationKind::leaky(), ActivationKind::Tanh] {
                // keep samples away from the kink
                let x = random(&mut rng, 3, 4).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
                let r = random(&mut rng, 3, 4);
                let mut act = Activation::new(kind);
                act.forward(&x);
                let dx = act.backward(&r).unwrap();
                let num = numeric_grad(
                    |xs| weighted_sum(&activation_forward(kind, &Matrix::new(3, 4, xs.to_vec()).unwrap()), &r),
                    x.data(),
                );
                assert!(max_rel_error(dx.data(), &num) < 1e-4, "{kind:?}");
            }
        }
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0f64, 0.0]), vec![0.5, 0.5]);
        assert_eq!(softmax(&[1000.0f64, 1000.0]), vec![0.5, 0.5]);
        let p = softmax(&[1.0f64, -3.0, 2.5, 0.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-7);
        let shifted = softmax(&[11.0f64, 7.0, 12.5, 10.0]);
        for (a, b) in p.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let x = Matrix::from_rows(&[&[1.0f32, 2.0, 3.0]]);
        let mut rng = Rng::new(0);
        assert_eq!(Dropout::new(0.0).forward(&x, Mode::Train, &mut rng), x);
        assert_eq!(Dropout::new(0.2).forward(&x, Mode::Eval, &mut rng), x);
    }

    #[test]
    fn dropout_train_mode_preserves_expectation() {
        let x = Matrix::from_rows(&[&[1.0f64, -2.0, 0.5, 4.0]]);
        let mut layer = Dropout::new(0.2);
        let mut rng = Rng::new(9);
        let mut acc = Matrix::zeros(1, 4);
        let trials = 10_000;
        for _ in 0..trials {
            let y = layer.forward(&x, Mode::Train, &mut rng);
            assert!(y.data().iter().zip(x.data()).all(|(&a, &b)| a == 0.0 || (a - b / 0.8).abs() < 1e-12));
            acc.add_assign(&y).unwrap();
        }
        for (m, &xv) in acc.data().iter().zip(x.data()) {
            let mean = m / trials as f64;
            assert!((mean - xv).abs() <= 0.02 * xv.abs(), "{mean} vs {xv}");
        }
    }

    #[test]
    fn dropout_backward_uses_mask() {
        let x = Matrix::from_rows(&[&[1.0f64; 8]]);
        let mut layer = Dropout::new(0.5);
        let y = layer.forward(&x, Mode::Train, &mut Rng::new(2));
        assert_eq!(layer.backward(&x).unwrap(), y);
    }

    #[test]
    fn sap_uniform_scores_give_mean() {
        let mut rng = Rng::new(4);
        let mut sap = SelfAttentivePooling::<f64>::new(&mut rng, 3, 5);
        sap.v.value.fill(0.0);
        let h = random(&mut rng, 4, 3);
        let mask = [true, true, false, true];
        let out = sap.pool(&h, &mask).unwrap();
        for c in 0..3 {
            let mean = (h.get(0, c) + h.get(1, c) + h.get(3, c)) / 3.0;
            assert!((out[c] - mean).abs() < 1e-12);
        }
        let w = sap.attention_weights().unwrap();
        assert_eq!(w[2], 0.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sap_single_frame_and_empty() {
        let mut rng = Rng::new(5);
        let mut sap = SelfAttentivePooling::<f32>::new(&mut rng, 2, 4);
        let h = Matrix::from_rows(&[&[1.5f32, -0.5], &[9.0, 9.0]]);
        assert_eq!(sap.pool(&h, &[true, false]).unwrap(), vec![1.5, -0.5]);
        assert_eq!(sap.attention_weights().unwrap(), vec![1.0, 0.0]);
        assert!(matches!(sap.pool(&h, &[false, false]), Err(Error::NoValidFrames)));
    }

    #[test]
    fn sap_masked_padding_is_bit_identical() {
        let mut rng = Rng::new(6);
        let mut sap = SelfAttentivePooling::<f32>::new(&mut rng, 4, 6);
        let h: Matrix<f32> = random(&mut rng, 5, 4).cast();
        let base = sap.pool(&h, &[true; 5]).unwrap();
        let mut padded = Matrix::zeros(8, 4);
        for r in 0..5 {
            padded.row_mut(r).copy_from_slice(h.row(r));
        }
        for r in 5..8 {
            padded.row_mut(r).copy_from_slice(h.row(r - 5));
        }
        let mask = [true, true, true, true, true, false, false, false];
        assert_eq!(sap.pool(&padded, &mask).unwrap(), base);
    }

    #[test]
    fn sap_backward_zero_and_masked() {
        let mut rng = Rng::new(8);
        let mut sap = SelfAttentivePooling::<f64>::new(&mut rng, 3, 4);
        assert!(matches!(sap.backward(&Matrix::zeros(1, 3)), Err(Error::NoCache(_))));
        let h = random(&mut rng, 8, 3);
        let masks: [&[bool]; 2] = [&[true, false, true, true], &[true, true, false, false]];
        sap.forward(&h, &masks).unwrap();
        let g = sap.backward(&Matrix::zeros(2, 3)).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.0));
        assert!(sap.w_att.grad.data().iter().chain(sap.v.grad.data()).all(|&x| x == 0.0));
        let g = sap.backward(&random(&mut rng, 2, 3)).unwrap();
        for r in [1, 6, 7] {
            assert!(g.row(r).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn sap_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = Rng::new(200 + seed);
            let d = rng.int_range(1, 4);
            let d_att = rng.int_range(1, 5);
            let t = rng.int_range(1, 5);
            let b = rng.int_range(1, 3);
            let mut sap = SelfAttentivePooling::<f64>::new(&mut rng, d, d_att);
            sap.b_att.value = random(&mut rng, 1, d_att);
            let h = random(&mut rng, b * t, d);
            let masks: Vec<Vec<bool>> = (0..b)
                .map(|_| {
                    let mut m: Vec<bool> = (0..t).map(|_| rng.uniform() < 0.7).collect();
                    m[0] = true;
                    m
                })
                .collect();
            let mrefs: Vec<&[bool]> = masks.iter().map(|m| m.as_slice()).collect();
            let r = random(&mut rng, b, d);
            sap.forward(&h, &mrefs).unwrap();
            let dh = sap.backward(&r).unwrap();
            let base = sap.clone();
            let eval = |p: &SelfAttentivePooling<f64>, h: &Matrix<f64>| {
                let mut p = p.clone();
                weighted_sum(&p.forward(h, &mrefs).unwrap(), &r)
            };
            let num_h = numeric_grad(|x| eval(&base, &Matrix::new(b * t, d, x.to_vec()).unwrap()), h.data());
            let num_w = numeric_grad(
                |x| {
                    let mut p = base.clone();
                    p.w_att.value = Matrix::new(d_att, d, x.to_vec()).unwrap();
                    eval(&p, &h)
                },
                base.w_att.value.data(),
            );
            let num_b = numeric_grad(
                |x| {
                    let mut p = base.clone();
                    p.b_att.value = Matrix::new(1, d_att, x.to_vec()).unwrap();
                    eval(&p, &h)
                },
                base.b_att.value.data(),
            );
            let num_v = numeric_grad(
                |x| {
                    let mut p = base.clone();
                    p.v.value = Matrix::new(1, d_att, x.to_vec()).unwrap();
                    eval(&p, &h)
                },
                base.v.value.data(),
            );
            assert!(max_rel_error(dh.data(), &num_h) < 1e-4, "seed {seed} h");
            assert!(max_rel_error(sap.w_att.grad.data(), &num_w) < 1e-4, "seed {seed} w");
            assert!(max_rel_error(sap.b_att.grad.data(), &num_b) < 1e-4, "seed {seed} b");
            assert!(max_rel_error(sap.v.grad.data(), &num_v) < 1e-4, "seed {seed} v");
        }
    }
}
