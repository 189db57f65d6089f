//! Central finite differences for verifying analytic gradients (64-bit only),
//! and a suite that checks every layer, loss and model variant.

use serde::Serialize;

use crate::data::{Batch, EmotionLabel, Example};
use crate::error::Result;
use crate::layers::{Activation, ActivationKind, Dropout, Linear, Mode, SelfAttentivePooling};
use crate::losses::{ccc_loss, continuous_loss, cross_entropy, multitask_loss, MtlWeights};
use crate::models::{Model, ModelConfig, ModelDims, ModelVariant};
use crate::numerics::{Matrix, Rng};

/// Step used for central differences.
pub const STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// `∂f/∂x_i ≈ (f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + STEP;
            let plus = f(&probe);
            probe[i] = x[i] - STEP;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * STEP)
        })
        .collect()
}

/// Largest entrywise `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}


/// Tolerance for whole-model checks.
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Tolerance for individual layers and losses.
pub const COMPONENT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckKind {
    Layer,
    Loss,
    Model,
}

impl CheckKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckKind::Layer => "layer",
            CheckKind::Loss => "loss",
            CheckKind::Model => "model",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub component: String,
    pub kind: CheckKind,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Variants to check; empty means all five.
    pub variants: Vec<ModelVariant>,
    /// Test hook: perturbs the analytic gradient of the named component.
    pub corrupt: Option<String>,
}

struct Suite<'a> {
    rows: Vec<CheckRow>,
    corrupt: Option<&'a str>,
}

impl Suite<'_> {
    fn record(&mut self, component: String, kind: CheckKind, analytic: &[f64], numeric: &[f64]) {
        let mut analytic = analytic.to_vec();
        if self.corrupt == Some(component.as_str()) {
            analytic[0] += 1.0;
        }
        let tolerance = match kind {
            CheckKind::Model => MODEL_TOLERANCE,
            _ => COMPONENT_TOLERANCE,
        };
        self.rows.push(CheckRow {
            max_rel_error: max_rel_error(&analytic, numeric),
            component,
            kind,
            tolerance,
        });
    }
}

fn normals(rng: &mut Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal(0.0, 1.0)).collect()).expect("shape")
}

fn dot(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_data(like: &Matrix<f64>, x: &[f64]) -> Matrix<f64> {
    Matrix::new(like.rows(), like.cols(), x.to_vec()).expect("shape")
}

fn check_layers(s: &mut Suite, rng: &mut Rng) -> Result<()> {
    let x = normals(rng, 4, 5);

    let mut lin = Linear::<f64>::new(rng, 5, 3);
    lin.bias.value = normals(rng, 1, 3);
    let r = normals(rng, 4, 3);
    lin.forward(&x)?;
    let dx = lin.backward(&r)?;
    let base = lin.clone();
    let f_w = |w: &[f64]| {
        let mut l = base.clone();
        l.weight.value = with_data(&base.weight.value, w);
        dot(&l.apply(&x).unwrap(), &r)
    };
    s.record("linear.weight".into(), CheckKind::Layer, lin.weight.grad.data(), &numeric_grad(f_w, base.weight.value.data()));
    let f_b = |b: &[f64]| {
        let mut l = base.clone();
        l.bias.value = with_data(&base.bias.value, b);
        dot(&l.apply(&x).unwrap(), &r)
    };
    s.record("linear.bias".into(), CheckKind::Layer, lin.bias.grad.data(), &numeric_grad(f_b, base.bias.value.data()));
    let f_x = |v: &[f64]| dot(&base.apply(&with_data(&x, v)).unwrap(), &r);
    s.record("linear.input".into(), CheckKind::Layer, dx.data(), &numeric_grad(f_x, x.data()));

    let r = normals(rng, 4, 5);
    for (name, kind) in [
        ("relu", ActivationKind::Relu),
        ("leaky_relu", ActivationKind::leaky()),
        ("tanh", ActivationKind::Tanh),
    ] {
        let mut act = Activation::new(kind);
        act.forward(&x);
        let dx = act.backward(&r)?;
        let f = |v: &[f64]| dot(&crate::layers::activation_forward(kind, &with_data(&x, v)), &r);
        s.record(format!("{name}.input"), CheckKind::Layer, dx.data(), &numeric_grad(f, x.data()));
    }

    let drop_seed = rng.int_range(0, 1 << 30) as u64;
    let mut drop = Dropout::<f64>::new(0.2);
    drop.forward(&x, Mode::Train, &mut Rng::new(drop_seed));
    let dx = drop.backward(&r)?;
    let f = |v: &[f64]| dot(&Dropout::new(0.2).forward(&with_data(&x, v), Mode::Train, &mut Rng::new(drop_seed)), &r);
    s.record("dropout.input".into(), CheckKind::Layer, dx.data(), &numeric_grad(f, x.data()));

    let lengths = [3usize, 1, 4];
    let frames = normals(rng, 8, 5);
    let mut sap = SelfAttentivePooling::<f64>::new(rng, 5, 4);
    sap.b_att.value = normals(rng, 1, 4);
    let r = normals(rng, 3, 5);
    sap.forward_packed(&frames, &lengths)?;
    let dx = sap.backward_packed(&r)?;
    let base = sap.clone();
    let eval = |m: &mut SelfAttentivePooling<f64>, f: &Matrix<f64>| dot(&m.forward_packed(f, &lengths).unwrap(), &r);
    let f_w = |v: &[f64]| {
        let mut m = base.clone();
        m.w_att.value = with_data(&base.w_att.value, v);
        eval(&mut m, &frames)
    };
    s.record("sap.w_att".into(), CheckKind::Layer, sap.w_att.grad.data(), &numeric_grad(f_w, base.w_att.value.data()));
    let f_b = |v: &[f64]| {
        let mut m = base.clone();
        m.b_att.value = with_data(&base.b_att.value, v);
        eval(&mut m, &frames)
    };
    s.record("sap.b_att".into(), CheckKind::Layer, sap.b_att.grad.data(), &numeric_grad(f_b, base.b_att.value.data()));
    let f_v = |v: &[f64]| {
        let mut m = base.clone();
        m.v.value = with_data(&base.v.value, v);
        eval(&mut m, &frames)
    };
    s.record("sap.v".into(), CheckKind::Layer, sap.v.grad.data(), &numeric_grad(f_v, base.v.value.data()));
    let f_x = |v: &[f64]| eval(&mut base.clone(), &with_data(&frames, v));
    s.record("sap.input".into(), CheckKind::Layer, dx.data(), &numeric_grad(f_x, frames.data()));
    Ok(())
}

fn check_losses(s: &mut Suite, rng: &mut Rng) -> Result<()> {
    let b = 7;
    let logits = normals(rng, b, 5);
    let targets: Vec<usize> = (0..b).map(|_| rng.int_range(0, 4)).collect();
    let mask = vec![true, true, false, true, true, false, true];
    let ce = cross_entropy(&logits, &targets, &mask)?;
    let f = |v: &[f64]| cross_entropy(&with_data(&logits, v), &targets, &mask).unwrap().loss;
    s.record("cross_entropy".into(), CheckKind::Loss, ce.grad.data(), &numeric_grad(f, logits.data()));

    let pred: Vec<f64> = (0..b).map(|_| rng.normal(4.0, 1.5)).collect();
    let truth: Vec<f64> = (0..b).map(|_| rng.normal(4.0, 1.0)).collect();
    let cl = ccc_loss(&pred, &truth, &mask)?;
    let f = |v: &[f64]| ccc_loss(v, &truth, &mask).unwrap().loss;
    s.record("ccc_loss".into(), CheckKind::Loss, cl.grad.data(), &numeric_grad(f, &pred));

    let pred = normals(rng, b, 3).map(|v| v + 4.0);
    let truth = normals(rng, b, 3).map(|v| v + 4.0);
    let cont = continuous_loss(&pred, &truth, &mask)?;
    let f = |v: &[f64]| continuous_loss(&with_data(&pred, v), &truth, &mask).unwrap().total();
    s.record("continuous_loss".into(), CheckKind::Loss, cont.grad.data(), &numeric_grad(f, pred.data()));

    // weighted sum over [logits | predictions]
    let w = MtlWeights::new(0.7, 1.3)?;
    let mut analytic = ce.grad.scale(w.beta).into_data();
    analytic.extend(cont.grad.scale(w.alpha).into_data());
    let mut x = logits.data().to_vec();
    x.extend_from_slice(pred.data());
    let split = logits.len();
    let f = |v: &[f64]| {
        let d = cross_entropy(&with_data(&logits, &v[..split]), &targets, &mask).unwrap().loss;
        let c = continuous_loss(&with_data(&pred, &v[split..]), &truth, &mask).unwrap();
        multitask_loss(c.terms, d, w)
    };
    s.record("multitask_loss".into(), CheckKind::Loss, &analytic, &numeric_grad(f, &x));
    Ok(())
}

/// Dims small enough for exhaustive finite differences.
pub fn tiny_dims() -> ModelDims {
    ModelDims {
        d_in: 6,
        d_enc: 5,
        encoder_layers: 1,
        mlp_hidden: 5,
        embedding: 4,
        d_att: 3,
    }
}

fn tiny_batch(rng: &mut Rng, d: usize) -> Result<Batch<f64>> {
    let examples: Vec<Example> = (0..3)
        .map(|i| {
            let t = rng.int_range(2, 5);
            Example {
                id: format!("g{i}"),
                frames: Matrix::new(t, d, (0..t * d).map(|_| rng.normal(0.0, 1.0) as f32).collect()).expect("shape"),
                label: EmotionLabel {
                    disc: Some(rng.int_range(0, 4)),
                    vad: Some([0.0; 3].map(|_| rng.uniform_range(1.0, 7.0) as f32)),
                },
                corpus: "gradcheck".into(),
            }
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    Batch::from_examples(&refs, 6)
}

fn model_loss(model: &mut Model<f64>, batch: &Batch<f64>, dropout_seed: u64) -> Result<(f64, Option<Matrix<f64>>, Option<Matrix<f64>>)> {
    let out = model.forward(batch, Mode::Train, &mut Rng::new(dropout_seed))?;
    let mut loss = 0.0;
    let (mut gl, mut gc) = (None, None);
    if let Some(l) = &out.logits {
        let ce = cross_entropy(l, &batch.disc, &batch.disc_mask)?;
        loss += ce.loss;
        gl = Some(ce.grad);
    }
    if let Some(c) = &out.c_hat {
        let cl = continuous_loss(c, &batch.vad, &batch.vad_mask)?;
        loss += cl.total();
        gc = Some(cl.grad);
    }
    Ok((loss, gl, gc))
}

fn check_model(s: &mut Suite, rng: &mut Rng, variant: ModelVariant) -> Result<()> {
    let dims = tiny_dims();
    let batch = tiny_batch(rng, dims.d_in)?;
    let mut model = Model::<f64>::build(ModelConfig::new(variant, dims), rng)?;
    // keeps the output ReLU of the continuous head in its linear region
    if let Some(h) = model.cont_head.as_mut() {
        h.bias.value.fill(2.0);
    }
    let dropout_seed = rng.int_range(0, 1 << 30) as u64;
    let (_, gl, gc) = model_loss(&mut model, &batch, dropout_seed)?;
    model.backward(gl.as_ref(), gc.as_ref())?;
    let base = model.clone();
    for (idx, (name, p)) in model.params().into_iter().enumerate() {
        let f = |x: &[f64]| {
            let mut m = base.clone();
            let slot = &mut m.params_mut()[idx].1.value;
            *slot = with_data(slot, x);
            model_loss(&mut m, &batch, dropout_seed).expect("forward").0
        };
        let num = numeric_grad(f, p.value.data());
        s.record(format!("{variant}/{name}"), CheckKind::Model, p.grad.data(), &num);
    }
    Ok(())
}

/// Checks every layer, loss and the requested model variants against central
/// finite differences. One row per parameter tensor for models.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckRow>> {
    let mut s = Suite {
        rows: Vec::new(),
        corrupt: opts.corrupt.as_deref(),
    };
    let mut rng = Rng::new(opts.seed);
    check_layers(&mut s, &mut rng)?;
    check_losses(&mut s, &mut rng)?;
    let variants = if opts.variants.is_empty() {
        ModelVariant::ALL.to_vec()
    } else {
        opts.variants.clone()
    };
    for v in variants {
        check_model(&mut s, &mut rng, v)?;
    }
    Ok(s.rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = numeric_grad(|v| v[0] * v[0] + 3.0 * v[0] * v[1], &[1.0, 2.0]);
        assert!(max_rel_error(&g, &[8.0, 3.0]) < 1e-8);
    }

    #[test]
    fn suite_passes_and_detects_corruption() {
        let rows = run_suite(&SuiteOptions {
            seed: 3,
            variants: vec![ModelVariant::HierCd],
            corrupt: Some("sap.v".into()),
        })
        .unwrap();
        for r in &rows {
            assert_eq!(r.passed(), r.component != "sap.v", "{r:?}");
        }
        assert!(rows.iter().any(|r| r.component == "hier-cd/disc.head.weight"));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(max_rel_error(&[0.0], &[0.0]), 0.0);
        assert!((max_rel_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
        assert!(max_rel_error(&[1e-12], &[-1e-12]) < 1e-5);
    }
}
