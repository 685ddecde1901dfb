//! Layer zoo: specs, parameter sets, initialization and forward dispatch.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        #[serde(rename = "in")]
        in_features: usize,
        #[serde(rename = "out")]
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv {
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
    },
    Flatten,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
            bias: true,
        }
    }

    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            in_ch,
            out_ch,
            kh: kernel,
            kw: kernel,
            stride,
            padding,
            bias: true,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv { .. })
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
                bias,
            } => out_features * in_features + if bias { out_features } else { 0 },
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kh,
                kw,
                bias,
                ..
            } => out_ch * in_ch * kh * kw + if bias { out_ch } else { 0 },
            _ => 0,
        }
    }

    fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            } => Some(vec![out_features, in_features]),
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kh,
                kw,
                ..
            } => Some(vec![out_ch, in_ch, kh, kw]),
            _ => None,
        }
    }

    fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense {
                out_features,
                bias: true,
                ..
            } => Some(out_features),
            LayerSpec::Conv {
                out_ch, bias: true, ..
            } => Some(out_ch),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            } => {
                if input != [in_features] {
                    return Err(Error::dim(format!(
                        "dense expects [{in_features}], got {input:?}"
                    )));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kh,
                kw,
                stride,
                padding,
                ..
            } => {
                let [c, h, w] = input else {
                    return Err(Error::dim(format!("conv expects [C, H, W], got {input:?}")));
                };
                if *c != in_ch {
                    return Err(Error::dim(format!(
                        "conv expects {in_ch} channels, got {input:?}"
                    )));
                }
                let oh = crate::autodiff::window_out(*h, kh, stride, padding);
                let ow = crate::autodiff::window_out(*w, kw, stride, padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![out_ch, oh, ow]),
                    _ => Err(Error::dim(format!(
                        "conv kernel {kh}×{kw} (padding {padding}) exceeds input {input:?}"
                    ))),
                }
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool { k, stride } => {
                let [c, h, w] = input else {
                    return Err(Error::dim(format!("max_pool expects [C, H, W], got {input:?}")));
                };
                match (
                    crate::autodiff::window_out(*h, k, stride, 0),
                    crate::autodiff::window_out(*w, k, stride, 0),
                ) {
                    (Some(oh), Some(ow)) => Ok(vec![*c, oh, ow]),
                    _ => Err(Error::dim(format!("max_pool window {k} exceeds input {input:?}"))),
                }
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Weights and optional bias of one parameterized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub weight: Tensor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Tensor>,
}

impl ParamSet {
    pub fn scalar_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        std::iter::once(&self.weight).chain(self.bias.as_ref())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut())
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        ParamVars {
            weight: tape.leaf(self.weight.clone(), requires_grad),
            bias: self.bias.as_ref().map(|b| tape.leaf(b.clone(), requires_grad)),
        }
    }

    /// Checks that tensor shapes match what `spec` requires.
    pub fn check_against(&self, spec: &LayerSpec) -> Result<()> {
        let want = spec
            .weight_shape()
            .ok_or_else(|| Error::contract(format!("{} layer has no parameters", spec.name())))?;
        if self.weight.shape() != want.as_slice() {
            return Err(Error::dim(format!(
                "weight {:?} does not match {want:?}",
                self.weight.shape()
            )));
        }
        match (spec.bias_len(), &self.bias) {
            (None, None) => Ok(()),
            (Some(n), Some(b)) if b.shape() == [n] => Ok(()),
            _ => Err(Error::dim(format!("bias does not match {} layer", spec.name()))),
        }
    }
}

/// Tape handles of a bound [`ParamSet`].
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl ParamVars {
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        std::iter::once(self.weight).chain(self.bias)
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases.
pub fn init_params<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Result<ParamSet> {
    let shape = spec
        .weight_shape()
        .ok_or_else(|| Error::contract(format!("cannot initialize parameters of a {} layer", spec.name())))?;
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
        .map_err(|e| Error::contract(format!("bad init distribution: {e}")))?;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Ok(ParamSet {
        weight: Tensor::new(shape, data)?,
        bias: spec.bias_len().map(|n| Tensor::zeros(&[n])),
    })
}

/// Applies one layer to a batch. `params` must be present exactly for
/// parameterized kinds.
pub fn layer_forward(tape: &mut Tape, spec: &LayerSpec, params: Option<&ParamVars>, x: Var) -> Result<Var> {
    match (spec, params) {
        (LayerSpec::Dense { .. }, Some(p)) => tape.linear(x, p.weight, p.bias),
        (LayerSpec::Conv { stride, padding, .. }, Some(p)) => {
            let y = tape.conv2d(x, p.weight, *stride, *padding)?;
            match p.bias {
                Some(b) => tape.add_channel_bias(y, b),
                None => Ok(y),
            }
        }
        (LayerSpec::Relu, None) => Ok(tape.relu(x)),
        (LayerSpec::MaxPool { k, stride }, None) => tape.max_pool2d(x, *k, *stride),
        (LayerSpec::Flatten, None) => tape.flatten(x),
        (spec, Some(_)) => Err(Error::contract(format!(
            "{} layer takes no parameters",
            spec.name()
        ))),
        (spec, None) => Err(Error::contract(format!("{} layer needs parameters", spec.name()))),
    }
}

/// Whether a position's parameters are shared by all sub-models or drawn
/// per sampled model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Shared,
    Samplable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlot {
    #[serde(flatten)]
    pub spec: LayerSpec,
    /// Defaults to samplable for parameterized layers, shared otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
}

impl LayerSlot {
    pub fn placement(&self) -> Placement {
        match self.placement {
            Some(p) => p,
            None if self.spec.is_parameterized() => Placement::Samplable,
            None => Placement::Shared,
        }
    }

    pub fn is_samplable(&self) -> bool {
        self.placement() == Placement::Samplable
    }
}

impl From<LayerSpec> for LayerSlot {
    fn from(spec: LayerSpec) -> Self {
        Self {
            spec,
            placement: None,
        }
    }
}

/// A layer sequence plus the per-sample input shape it accepts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSlot>,
}

impl Architecture {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self {
            input_shape,
            layers: layers.into_iter().map(LayerSlot::from).collect(),
        }
    }

    /// Flatten, then dense layers with ReLU between them.
    pub fn mlp(input_shape: Vec<usize>, hidden: &[usize], classes: usize) -> Self {
        let mut layers = vec![LayerSpec::Flatten];
        let mut width: usize = input_shape.iter().product();
        for &h in hidden {
            layers.push(LayerSpec::dense(width, h));
            layers.push(LayerSpec::Relu);
            width = h;
        }
        layers.push(LayerSpec::dense(width, classes));
        Self::new(input_shape, layers)
    }

    /// Conv8-ReLU-Pool-Conv16-ReLU-Pool-Flatten-Dense.
    pub fn small_cnn(input_shape: Vec<usize>, classes: usize) -> Result<Self> {
        let [c, h, w] = input_shape[..] else {
            return Err(Error::dim(format!(
                "small_cnn expects [C, H, W], got {input_shape:?}"
            )));
        };
        let pooled = |v: usize| (v / 2) / 2;
        let layers = vec![
            LayerSpec::conv(c, 8, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool { k: 2, stride: 2 },
            LayerSpec::conv(8, 16, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool { k: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::dense(16 * pooled(h) * pooled(w), classes),
        ];
        let arch = Self::new(input_shape, layers);
        arch.validate()?;
        Ok(arch)
    }

    /// Per-sample shapes after each layer; the last entry is the output.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::contract("architecture has no layers"));
        }
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, slot) in self.layers.iter().enumerate() {
            if slot.placement == Some(Placement::Samplable) && !slot.spec.is_parameterized() {
                return Err(Error::contract(format!(
                    "layer {i} ({}) has no parameters and cannot be samplable",
                    slot.spec.name()
                )));
            }
            shape = slot
                .spec
                .output_shape(&shape)
                .map_err(|e| Error::dim(format!("layer {i} ({}): {e}", slot.spec.name())))?;
            shapes.push(shape.clone());
        }
        if shape.len() != 1 || shape[0] < 2 {
            return Err(Error::dim(format!(
                "architecture must end in a class-score vector of length ≥ 2, got {shape:?}"
            )));
        }
        Ok(shapes)
    }

    pub fn output_classes(&self) -> Result<usize> {
        Ok(self.validate()?.last().map_or(0, |s| s[0]))
    }

    /// Scalars in one plain (single sub-model) network.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|s| s.spec.param_count()).sum()
    }

    /// Number of samplable positions.
    pub fn samplable_count(&self) -> usize {
        self.layers.iter().filter(|s| s.is_samplable()).count()
    }
}
