//! The five architecture variants assembled from [`crate::layers`].
//!
//! All variants share a per-frame encoder (linear + LeakyReLU stack). Each
//! task branch is self-attentive pooling followed by a two-layer MLP that
//! yields the task embedding (`E_D` or `E_C`), and a final head:
//!
//! | variant      | discrete head input | continuous head input |
//! |--------------|---------------------|-----------------------|
//! | `baseline-c` | -                   | `E_C`                 |
//! | `baseline-d` | `E_D`               | -                     |
//! | `mtl`        | `E_D`               | `E_C`                 |
//! | `hier-dc`    | `E_D`               | `[E_D ‖ E_C]`         |
//! | `hier-cd`    | `[E_C ‖ E_D]`       | `E_C`                 |
//!
//! The continuous head ends in a ReLU so predictions are non-negative; the
//! discrete head emits raw logits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::layers::{valid_rows, Activation, ActivationKind, Dropout, Linear, Mode, Param, SelfAttentivePooling};
use crate::losses::{NUM_ATTRIBUTES, NUM_CLASSES};
use crate::numerics::{Matrix, Real, Rng};

pub mod checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "baseline-c")]
    BaselineC,
    #[serde(rename = "baseline-d")]
    BaselineD,
    #[serde(rename = "mtl")]
    Multitask,
    #[serde(rename = "hier-dc")]
    HierDc,
    #[serde(rename = "hier-cd")]
    HierCd,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::BaselineC,
        ModelVariant::BaselineD,
        ModelVariant::Multitask,
        ModelVariant::HierDc,
        ModelVariant::HierCd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::BaselineC => "baseline-c",
            ModelVariant::BaselineD => "baseline-d",
            ModelVariant::Multitask => "mtl",
            ModelVariant::HierDc => "hier-dc",
            ModelVariant::HierCd => "hier-cd",
        }
    }

    pub fn has_disc(self) -> bool {
        self != ModelVariant::BaselineC
    }

    pub fn has_cont(self) -> bool {
        self != ModelVariant::BaselineD
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = ModelVariant::ALL.iter().map(|v| v.name()).collect();
            Error::InvalidArgument(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub d_in: usize,
    /// Width of every encoder layer.
    pub d_enc: usize,
    pub encoder_layers: usize,
    pub mlp_hidden: usize,
    /// Size of `E_C` / `E_D`.
    pub embedding: usize,
    pub d_att: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_in: 32,
            d_enc: 64,
            encoder_layers: 1,
            mlp_hidden: 64,
            embedding: 32,
            d_att: crate::layers::DEFAULT_ATTENTION_DIM,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_in", self.d_in),
            ("d_enc", self.d_enc),
            ("mlp_hidden", self.mlp_hidden),
            ("embedding", self.embedding),
            ("d_att", self.d_att),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("model dim `{name}` must be >= 1")));
            }
        }
        Ok(())
    }

    /// Feature width entering the branches.
    pub fn encoded_dim(&self) -> usize {
        if self.encoder_layers == 0 {
            self.d_in
        } else {
            self.d_enc
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub dims: ModelDims,
    pub dropout: f64,
    /// Block gradient from a hierarchical head into the auxiliary branch.
    pub hier_stop_gradient: bool,
}

impl ModelConfig {
    pub fn new(variant: ModelVariant, dims: ModelDims) -> Self {
        ModelConfig {
            variant,
            dims,
            dropout: 0.2,
            hier_stop_gradient: false,
        }
    }
}

/// Pooling + MLP producing one task embedding.
#[derive(Clone, Debug)]
pub struct Branch<T> {
    pub sap: SelfAttentivePooling<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    act1: Activation<T>,
    act2: Activation<T>,
    drop1: Dropout<T>,
    drop2: Dropout<T>,
}

impl<T: Real> Branch<T> {
    fn new(rng: &mut Rng, dims: &ModelDims, dropout: f64) -> Self {
        let d = dims.encoded_dim();
        Branch {
            sap: SelfAttentivePooling::new(rng, d, dims.d_att),
            fc1: Linear::new(rng, d, dims.mlp_hidden),
            fc2: Linear::new(rng, dims.mlp_hidden, dims.embedding),
            act1: Activation::new(ActivationKind::leaky()),
            act2: Activation::new(ActivationKind::leaky()),
            drop1: Dropout::new(dropout),
            drop2: Dropout::new(dropout),
        }
    }

    fn forward(&mut self, packed: &Matrix<T>, lengths: &[usize], mode: Mode, rng: &mut Rng) -> Result<Matrix<T>> {
        let pooled = self.sap.forward_packed(packed, lengths)?;
        let z = self.act1.forward(&self.fc1.forward(&pooled)?);
        let z = self.drop1.forward(&z, mode, rng);
        let z = self.act2.forward(&self.fc2.forward(&z)?);
        Ok(self.drop2.forward(&z, mode, rng))
    }

    fn backward(&mut self, grad: &Matrix<T>) -> Result<Matrix<T>> {
        let g = self.drop2.backward(grad)?;
        let g = self.fc2.backward(&self.act2.backward(&g)?)?;
        let g = self.drop1.backward(&g)?;
        let g = self.fc1.backward(&self.act1.backward(&g)?)?;
        self.sap.backward_packed(&g)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((format!("{prefix}.sap.w_att"), &self.sap.w_att));
        out.push((format!("{prefix}.sap.b_att"), &self.sap.b_att));
        out.push((format!("{prefix}.sap.v"), &self.sap.v));
        out.push((format!("{prefix}.fc1.weight"), &self.fc1.weight));
        out.push((format!("{prefix}.fc1.bias"), &self.fc1.bias));
        out.push((format!("{prefix}.fc2.weight"), &self.fc2.weight));
        out.push((format!("{prefix}.fc2.bias"), &self.fc2.bias));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((format!("{prefix}.sap.w_att"), &mut self.sap.w_att));
        out.push((format!("{prefix}.sap.b_att"), &mut self.sap.b_att));
        out.push((format!("{prefix}.sap.v"), &mut self.sap.v));
        out.push((format!("{prefix}.fc1.weight"), &mut self.fc1.weight));
        out.push((format!("{prefix}.fc1.bias"), &mut self.fc1.bias));
        out.push((format!("{prefix}.fc2.weight"), &mut self.fc2.weight));
        out.push((format!("{prefix}.fc2.bias"), &mut self.fc2.bias));
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer<T> {
    linear: Linear<T>,
    act: Activation<T>,
}

/// Outputs of one forward pass. Absent heads/branches are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    /// `B x 5` raw logits.
    pub logits: Option<Matrix<T>>,
    /// `B x 3`, non-negative.
    pub c_hat: Option<Matrix<T>>,
    pub e_c: Option<Matrix<T>>,
    pub e_d: Option<Matrix<T>>,
}

/// Parameters and cached activations of one model instance.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    config: ModelConfig,
    encoder: Vec<EncoderLayer<T>>,
    pub disc_branch: Option<Branch<T>>,
    pub cont_branch: Option<Branch<T>>,
    pub disc_head: Option<Linear<T>>,
    pub cont_head: Option<Linear<T>>,
    cont_act: Activation<T>,
    /// Utterance lengths of the last forward, `None` before any forward.
    cached_lengths: Option<Vec<usize>>,
}

impl<T: Real> Model<T> {
    /// Initialises a model; parameters are drawn in a fixed order from `rng`.
    pub fn build(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.dims.validate()?;
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} not in [0, 1)", config.dropout)));
        }
        let dims = &config.dims;
        let variant = config.variant;
        let mut encoder = Vec::with_capacity(dims.encoder_layers);
        let mut width = dims.d_in;
        for _ in 0..dims.encoder_layers {
            encoder.push(EncoderLayer {
                linear: Linear::new(rng, width, dims.d_enc),
                act: Activation::new(ActivationKind::leaky()),
            });
            width = dims.d_enc;
        }
        let disc_branch = variant.has_disc().then(|| Branch::new(rng, dims, config.dropout));
        let cont_branch = variant.has_cont().then(|| Branch::new(rng, dims, config.dropout));
        let e = dims.embedding;
        let disc_in = if variant == ModelVariant::HierCd { 2 * e } else { e };
        let cont_in = if variant == ModelVariant::HierDc { 2 * e } else { e };
        let disc_head = variant.has_disc().then(|| Linear::new(rng, disc_in, NUM_CLASSES));
        let cont_head = variant.has_cont().then(|| Linear::new(rng, cont_in, NUM_ATTRIBUTES));
        Ok(Model {
            config,
            encoder,
            disc_branch,
            cont_branch,
            disc_head,
            cont_head,
            cont_act: Activation::new(ActivationKind::Relu),
            cached_lengths: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn set_hier_stop_gradient(&mut self, on: bool) {
        self.config.hier_stop_gradient = on;
    }

    /// Named parameters in a fixed, documented order.
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &layer.linear.weight));
            out.push((format!("encoder.{i}.bias"), &layer.linear.bias));
        }
        if let Some(b) = &self.disc_branch {
            b.params("disc", &mut out);
        }
        if let Some(b) = &self.cont_branch {
            b.params("cont", &mut out);
        }
        if let Some(h) = &self.disc_head {
            out.push(("disc.head.weight".into(), &h.weight));
            out.push(("disc.head.bias".into(), &h.bias));
        }
        if let Some(h) = &self.cont_head {
            out.push(("cont.head.weight".into(), &h.weight));
            out.push(("cont.head.bias".into(), &h.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.{i}.weight"), &mut layer.linear.weight));
            out.push((format!("encoder.{i}.bias"), &mut layer.linear.bias));
        }
        if let Some(b) = &mut self.disc_branch {
            b.params_mut("disc", &mut out);
        }
        if let Some(b) = &mut self.cont_branch {
            b.params_mut("cont", &mut out);
        }
        if let Some(h) = &mut self.disc_head {
            out.push(("disc.head.weight".into(), &mut h.weight));
            out.push(("disc.head.bias".into(), &mut h.bias));
        }
        if let Some(h) = &mut self.cont_head {
            out.push(("cont.head.weight".into(), &mut h.weight));
            out.push(("cont.head.bias".into(), &mut h.bias));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut rng = Rng::new(0);
        let mut out = Model::<U>::build(self.config.clone(), &mut rng).expect("config already validated");
        for ((_, dst), (_, src)) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        out
    }

    /// Runs the model on a padded batch. `rng` drives dropout in train mode.
    pub fn forward(&mut self, batch: &Batch<T>, mode: Mode, rng: &mut Rng) -> Result<ForwardOutput<T>> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if batch.feature_dim() != self.config.dims.d_in {
            return Err(Error::InvalidArgument(format!(
                "batch feature dim {} does not match model input dim {}",
                batch.feature_dim(),
                self.config.dims.d_in
            )));
        }
        let (rows, lengths) = valid_rows(batch.features.rows(), &batch.frame_masks())?;
        let mut h = Matrix::zeros(rows.len(), batch.feature_dim());
        for (i, &r) in rows.iter().enumerate() {
            h.row_mut(i).copy_from_slice(batch.features.row(r));
        }
        for layer in &mut self.encoder {
            h = layer.act.forward(&layer.linear.forward(&h)?);
        }

        let e_d = match &mut self.disc_branch {
            Some(b) => Some(b.forward(&h, &lengths, mode, rng)?),
            None => None,
        };
        let e_c = match &mut self.cont_branch {
            Some(b) => Some(b.forward(&h, &lengths, mode, rng)?),
            None => None,
        };

        let variant = self.config.variant;
        let logits = match (&mut self.disc_head, &e_d) {
            (Some(head), Some(ed)) => Some(if variant == ModelVariant::HierCd {
                head.forward(&e_c.as_ref().expect("hier-cd has E_C").hcat(ed)?)?
            } else {
                head.forward(ed)?
            }),
            _ => None,
        };
        let c_hat = match (&mut self.cont_head, &e_c) {
            (Some(head), Some(ec)) => {
                let z = if variant == ModelVariant::HierDc {
                    head.forward(&e_d.as_ref().expect("hier-dc has E_D").hcat(ec)?)?
                } else {
                    head.forward(ec)?
                };
                Some(self.cont_act.forward(&z))
            }
            _ => None,
        };

        self.cached_lengths = Some(lengths);
        Ok(ForwardOutput { logits, c_hat, e_c, e_d })
    }

    /// Accumulates parameter gradients given loss gradients w.r.t. the logits
    /// and the continuous predictions of the last forward.
    pub fn backward(&mut self, grad_logits: Option<&Matrix<T>>, grad_c_hat: Option<&Matrix<T>>) -> Result<()> {
        if self.cached_lengths.is_none() {
            return Err(Error::NoCache("model"));
        }
        let variant = self.config.variant;
        let e = self.config.dims.embedding;
        let stop = self.config.hier_stop_gradient;
        let mut d_ed: Option<Matrix<T>> = None;
        let mut d_ec: Option<Matrix<T>> = None;
        let accumulate = |slot: &mut Option<Matrix<T>>, g: Matrix<T>| -> Result<()> {
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };

        if let (Some(g), Some(head)) = (grad_c_hat, self.cont_head.as_mut()) {
            let d_in = head.backward(&self.cont_act.backward(g)?)?;
            if variant == ModelVariant::HierDc {
                let (from_d, from_c) = d_in.hsplit(e);
                accumulate(&mut d_ec, from_c)?;
                if !stop {
                    accumulate(&mut d_ed, from_d)?;
                }
            } else {
                accumulate(&mut d_ec, d_in)?;
            }
        }
        if let (Some(g), Some(head)) = (grad_logits, self.disc_head.as_mut()) {
            let d_in = head.backward(g)?;
            if variant == ModelVariant::HierCd {
                let (from_c, from_d) = d_in.hsplit(e);
                accumulate(&mut d_ed, from_d)?;
                if !stop {
                    accumulate(&mut d_ec, from_c)?;
                }
            } else {
                accumulate(&mut d_ed, d_in)?;
            }
        }

        let mut d_h: Option<Matrix<T>> = None;
        if let (Some(g), Some(branch)) = (d_ed, self.disc_branch.as_mut()) {
            accumulate(&mut d_h, branch.backward(&g)?)?;
        }
        if let (Some(g), Some(branch)) = (d_ec, self.cont_branch.as_mut()) {
            accumulate(&mut d_h, branch.backward(&g)?)?;
        }
        if let Some(mut g) = d_h {
            for layer in self.encoder.iter_mut().rev() {
                g = layer.linear.backward(&layer.act.backward(&g)?)?;
            }
        }
        Ok(())
    }

    /// Eval-mode forward; class ids by argmax (ties to the lowest index).
    pub fn predict(&mut self, batch: &Batch<T>) -> Result<Prediction<T>> {
        let out = self.forward(batch, Mode::Eval, &mut Rng::new(0))?;
        Ok(Prediction {
            classes: out.logits.as_ref().map(argmax_rows),
            c_hat: out.c_hat,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub classes: Option<Vec<usize>>,
    pub c_hat: Option<Matrix<T>>,
}

/// Row-wise argmax; the first maximal entry wins.
pub fn argmax_rows<T: Real>(m: &Matrix<T>) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
