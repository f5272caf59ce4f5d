//! MLP embedding backbones, classifier heads and their checkpoint form.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::rng_for;
use crate::diffcore::{Gradients, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[fan_in × fan_out]`
    pub weight: Parameter,
    /// `[1 × fan_out]`
    pub bias: Parameter,
}

fn he_uniform(rows: usize, cols: usize, seed: u64, stream: u64) -> Tensor {
    let bound = libm::sqrt(6.0 / rows as f64);
    let mut rng = rng_for(seed, stream);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

/// Variables for one forward pass; frozen modules bind as constants.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps externally recorded variables, in the order `bind` would produce them.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Affine layers with ReLU between them; the last layer has no activation.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBackbone {
    layer_dims: Vec<usize>,
    layers: Vec<Linear>,
    frozen: bool,
}

impl EmbeddingBackbone {
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let layers = layer_dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear {
                weight: Parameter::new(he_uniform(w[0], w[1], seed, 0x1a7e_0000 + i as u64)),
                bias: Parameter::new(Tensor::zeros(&[1, w[1]])),
            })
            .collect();
        Ok(EmbeddingBackbone {
            layer_dims: layer_dims.to_vec(),
            layers,
            frozen: false,
        })
    }

    pub fn from_layers(layer_dims: &[usize], layers: Vec<Linear>) -> Result<Self> {
        validate_dims(layer_dims)?;
        if layers.len() != layer_dims.len() - 1 {
            return Err(Error::shape(
                "backbone",
                "layer count does not match layer_dims",
            ));
        }
        for (i, (l, w)) in layers.iter().zip(layer_dims.windows(2)).enumerate() {
            if l.weight.value.shape() != [w[0], w[1]] || l.bias.value.shape() != [1, w[1]] {
                return Err(Error::shape(
                    "backbone",
                    format!("layer {i} parameters do not match {}x{}", w[0], w[1]),
                ));
            }
        }
        Ok(EmbeddingBackbone {
            layer_dims: layer_dims.to_vec(),
            layers,
            frozen: false,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut vars = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            if self.frozen {
                vars.push(tape.constant(l.weight.value.clone()));
                vars.push(tape.constant(l.bias.value.clone()));
            } else {
                vars.push(tape.param(&l.weight));
                vars.push(tape.param(&l.bias));
            }
        }
        Bound { vars }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let d = tape.value(x).cols();
        if d != self.input_dim() {
            return Err(Error::shape(
                "forward_embed",
                format!("input dim {d}, backbone expects {}", self.input_dim()),
            ));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, pair) in bound.vars.chunks(2).enumerate() {
            h = tape.matmul(h, pair[0])?;
            h = tape.add_bias(h, pair[1])?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Gradient-free embedding of `x`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut frozen = self.clone();
        frozen.frozen = true;
        let bound = frozen.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = frozen.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Adds this pass's gradients; a frozen backbone discards them.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Gradients) {
        if self.frozen {
            return;
        }
        for (l, pair) in self.layers.iter_mut().zip(bound.vars.chunks(2)) {
            l.weight.accumulate(grads, pair[0]);
            l.bias.accumulate(grads, pair[1]);
        }
    }

    /// Trainable parameters; empty when frozen.
    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        if self.frozen {
            return Vec::new();
        }
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 || layer_dims.contains(&0) {
        return Err(Error::invalid(format!(
            "layer_dims {layer_dims:?} needs at least two positive entries"
        )));
    }
    Ok(())
}

/// Linear classifier over embeddings. Column `j` scores global class `classes[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    /// `[in_dim × classes]`
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    normalized: bool,
    classes: Vec<usize>,
    frozen: bool,
}

impl ClassifierHead {
    /// Plain heads get a zero bias; normalized (cosine) heads have none.
    pub fn init(in_dim: usize, classes: &[usize], normalized: bool, seed: u64) -> Result<Self> {
        if in_dim == 0 || classes.is_empty() {
            return Err(Error::invalid(
                "head needs a positive input dim and classes",
            ));
        }
        let weight = Parameter::new(he_uniform(in_dim, classes.len(), seed, 0x4ead));
        let bias = (!normalized).then(|| Parameter::new(Tensor::zeros(&[1, classes.len()])));
        ClassifierHead::from_parts(weight, bias, normalized, classes.to_vec())
    }

    pub fn from_parts(
        weight: Parameter,
        bias: Option<Parameter>,
        normalized: bool,
        classes: Vec<usize>,
    ) -> Result<Self> {
        let w = weight.value.shape();
        if w.len() != 2 || w[1] != classes.len() {
            return Err(Error::shape(
                "head",
                format!("weight {w:?} for {} classes", classes.len()),
            ));
        }
        if let Some(b) = &bias {
            if b.value.shape() != [1, classes.len()] {
                return Err(Error::shape("head", format!("bias {:?}", b.value.shape())));
            }
        }
        if normalized && bias.is_some() {
            return Err(Error::invalid("normalized head cannot carry a bias"));
        }
        Ok(ClassifierHead {
            weight,
            bias,
            normalized,
            classes,
            frozen: false,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn column_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut vars = Vec::with_capacity(2);
        let mut put = |p: &Parameter| {
            if self.frozen {
                tape.constant(p.value.clone())
            } else {
                tape.param(p)
            }
        };
        vars.push(put(&self.weight));
        if let Some(b) = &self.bias {
            vars.push(put(b));
        }
        Bound { vars }
    }

    /// Logits for features `f`. Feature dims that differ from the head's
    /// input dim are zero-padded or truncated, matching the zero-padding
    /// alignment used when comparing features of different widths.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, f: Var) -> Result<Var> {
        let f = tape.fit_cols(f, self.in_dim())?;
        if self.normalized {
            let wt = tape.transpose(bound.vars[0])?;
            tape.cosine_sim(f, wt)
        } else {
            let z = tape.matmul(f, bound.vars[0])?;
            match bound.vars.get(1) {
                Some(&b) => tape.add_bias(z, b),
                None => Ok(z),
            }
        }
    }

    pub fn logits(&self, f: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut frozen = self.clone();
        frozen.frozen = true;
        let bound = frozen.bind(&mut tape);
        let fv = tape.constant(f.clone());
        let out = frozen.forward(&mut tape, &bound, fv)?;
        Ok(tape.value(out).clone())
    }

    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Gradients) {
        if self.frozen {
            return;
        }
        self.weight.accumulate(grads, bound.vars[0]);
        if let Some(b) = &mut self.bias {
            b.accumulate(grads, bound.vars[1]);
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        if self.frozen {
            return Vec::new();
        }
        let mut out = alloc::vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
        out
    }
}

/// Backbone plus optional head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: EmbeddingBackbone,
    pub head: Option<ClassifierHead>,
}

impl Model {
    pub fn freeze(&mut self) {
        self.backbone.freeze();
        if let Some(h) = &mut self.head {
            h.freeze();
        }
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.backbone.embed(x)
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps = self.backbone.parameters_mut();
        if let Some(h) = &mut self.head {
            ps.extend(h.parameters_mut());
        }
        ps
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    /// FNV-1a over the bit patterns of every parameter value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let head_params = self
            .head
            .iter()
            .flat_map(|hd| core::iter::once(&hd.weight).chain(hd.bias.iter()));
        for p in self.backbone.parameters().chain(head_params) {
            for v in p.value.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn to_checkpoint(&self, metadata: CheckpointMeta) -> ModelCheckpoint {
        ModelCheckpoint {
            version: CHECKPOINT_VERSION,
            layer_dims: self.backbone.layer_dims.clone(),
            layers: self
                .backbone
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: l.weight.value.data().to_vec(),
                    bias: l.bias.value.data().to_vec(),
                })
                .collect(),
            head: self.head.as_ref().map(|h| HeadParams {
                in_dim: h.in_dim(),
                classes: h.classes.clone(),
                normalized: h.normalized,
                weight: h.weight.value.data().to_vec(),
                bias: h.bias.as_ref().map(|b| b.value.data().to_vec()),
            }),
            metadata,
        }
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: ck.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let corrupt = |e: Error| Error::CorruptCheckpoint(format!("{e}"));
        validate_dims(&ck.layer_dims).map_err(corrupt)?;
        if ck.layers.len() + 1 != ck.layer_dims.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} layers for layer_dims {:?}",
                ck.layers.len(),
                ck.layer_dims
            )));
        }
        let layers = ck
            .layers
            .iter()
            .zip(ck.layer_dims.windows(2))
            .map(|(l, w)| {
                Ok(Linear {
                    weight: Parameter::new(Tensor::matrix(w[0], w[1], l.weight.clone())?),
                    bias: Parameter::new(Tensor::matrix(1, w[1], l.bias.clone())?),
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(corrupt)?;
        let backbone = EmbeddingBackbone::from_layers(&ck.layer_dims, layers).map_err(corrupt)?;
        let head = match &ck.head {
            None => None,
            Some(h) => {
                let c = h.classes.len();
                let build = || -> Result<ClassifierHead> {
                    let weight = Parameter::new(Tensor::matrix(h.in_dim, c, h.weight.clone())?);
                    let bias = match &h.bias {
                        Some(b) => Some(Parameter::new(Tensor::matrix(1, c, b.clone())?)),
                        None => None,
                    };
                    ClassifierHead::from_parts(weight, bias, h.normalized, h.classes.clone())
                };
                Some(build().map_err(corrupt)?)
            }
        };
        Ok(Model { backbone, head })
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HeadParams {
    pub in_dim: usize,
    pub classes: Vec<usize>,
    pub normalized: bool,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CheckpointMeta {
    pub seed: u64,
    pub supervision: String,
    pub compat_method: String,
    /// Free-form description of the training split.
    pub split: String,
    /// Global class ids the model was trained on.
    pub classes: Vec<usize>,
}

/// Flattened, format-neutral model parameters.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelCheckpoint {
    pub version: u32,
    pub layer_dims: Vec<usize>,
    pub layers: Vec<LayerParams>,
    pub head: Option<HeadParams>,
    pub metadata: CheckpointMeta,
}
