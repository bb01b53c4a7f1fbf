//! Declarative layer graph. Forward passes, parameter lists and ledgers are
//! all derived from the same [`Graph`], so they cannot drift apart.

use std::fmt;

use super::params::{BoundParams, Init, ParamSpec};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Element};

pub type LayerId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Input,
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    /// Weight is stored `in × out × k × k`.
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Selu,
    Prelu {
        channels: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
    Add,
    Concat,
    /// `N×C×H×W → (N·C)×1×H×W`, so later layers see each channel as its own image.
    FoldChannels,
    /// Inverse of [`LayerKind::FoldChannels`].
    UnfoldChannels {
        channels: usize,
    },
    Softmax,
}

impl LayerKind {
    /// Layers that carry a weight matrix and count towards network depth.
    pub fn is_weighted(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. } | LayerKind::ConvTranspose2d { .. } | LayerKind::Dense { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<LayerId>,
    /// Variance gain of the fan-in normal weight init.
    pub init_gain: f64,
}

impl Layer {
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let spec = |suffix: &str, shape: Vec<usize>, init: Init| ParamSpec {
            name: format!("{}.{suffix}", self.name),
            shape,
            init,
        };
        match self.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                groups,
                ..
            } => {
                let per_group = in_channels / groups;
                vec![
                    spec(
                        "weight",
                        vec![out_channels, per_group, kernel, kernel],
                        Init::FanInNormal {
                            fan_in: per_group * kernel * kernel,
                            gain: self.init_gain,
                        },
                    ),
                    spec("bias", vec![out_channels], Init::Constant(0.0)),
                ]
            }
            LayerKind::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                spec(
                    "weight",
                    vec![in_channels, out_channels, kernel, kernel],
                    Init::FanInNormal {
                        fan_in: in_channels * kernel * kernel,
                        gain: self.init_gain,
                    },
                ),
                spec("bias", vec![out_channels], Init::Constant(0.0)),
            ],
            LayerKind::Dense {
                in_features,
                out_features,
            } => vec![
                spec(
                    "weight",
                    vec![in_features, out_features],
                    Init::FanInNormal {
                        fan_in: in_features,
                        gain: self.init_gain,
                    },
                ),
                spec("bias", vec![out_features], Init::Constant(0.0)),
            ],
            LayerKind::Prelu { channels } => {
                vec![spec("slope", vec![channels], Init::Constant(0.25))]
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    layers: Vec<Layer>,
}

impl Graph {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn output(&self) -> LayerId {
        self.layers.len() - 1
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.layers.iter().flat_map(Layer::param_specs).collect()
    }

    /// Number of weighted layers on the longest input → output path.
    pub fn weighted_depth(&self) -> usize {
        let mut depth = vec![0usize; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            let below = layer.inputs.iter().map(|&j| depth[j]).max().unwrap_or(0);
            depth[i] = below + layer.kind.is_weighted() as usize;
        }
        depth.last().copied().unwrap_or(0)
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, params: &BoundParams, x: Var) -> Result<Var> {
        self.forward_trace(tape, params, x)?
            .last()
            .copied()
            .ok_or_else(|| Error::invalid("forward", "empty graph"))
    }

    /// Like [`Graph::forward`] but returns the output of every layer, in layer order.
    pub fn forward_trace<E: Element>(&self, tape: &mut Tape<E>, params: &BoundParams, x: Var) -> Result<Vec<Var>> {
        let mut values: Vec<Var> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = |k: usize| values[layer.inputs[k]];
            let p = |suffix: &str| params.get(&format!("{}.{suffix}", layer.name));
            let out = match layer.kind {
                LayerKind::Input => x,
                LayerKind::Conv2d {
                    stride,
                    padding,
                    groups,
                    ..
                } => tape.conv2d(
                    input(0),
                    p("weight")?,
                    p("bias")?,
                    ConvSpec::new(stride, padding, groups),
                )?,
                LayerKind::ConvTranspose2d { stride, padding, .. } => tape.conv2d_transpose(
                    input(0),
                    p("weight")?,
                    p("bias")?,
                    ConvSpec::new(stride, padding, 1),
                )?,
                LayerKind::Dense { .. } => tape.dense(input(0), p("weight")?, p("bias")?)?,
                LayerKind::Selu => tape.selu(input(0)),
                LayerKind::Prelu { .. } => tape.prelu(input(0), p("slope")?)?,
                LayerKind::MaxPool { window, stride } => tape.maxpool2d(input(0), window, stride)?,
                LayerKind::GlobalAvgPool => tape.global_avg_pool(input(0))?,
                LayerKind::Flatten => {
                    let shape = tape.value(input(0)).shape().to_vec();
                    let rest = shape[1..].iter().product();
                    tape.reshape(input(0), &[shape[0], rest])?
                }
                LayerKind::Add => tape.add(input(0), input(1))?,
                LayerKind::Concat => {
                    let xs: Vec<Var> = layer.inputs.iter().map(|&j| values[j]).collect();
                    tape.concat_channels(&xs)?
                }
                LayerKind::FoldChannels => {
                    let (n, c, h, w) = tape.value(input(0)).dims4("fold_channels")?;
                    tape.reshape(input(0), &[n * c, 1, h, w])?
                }
                LayerKind::UnfoldChannels { channels } => {
                    let (nc, one, h, w) = tape.value(input(0)).dims4("unfold_channels")?;
                    if one != 1 || nc % channels != 0 {
                        return Err(Error::invalid(
                            "unfold_channels",
                            format!("cannot regroup {nc}×{one} planes into {channels} channels"),
                        ));
                    }
                    tape.reshape(input(0), &[nc / channels, channels, h, w])?
                }
                LayerKind::Softmax => tape.softmax(input(0))?,
            };
            values.push(out);
        }
        Ok(values)
    }
}

impl fmt::Display for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.layers.iter().enumerate() {
            writeln!(f, "{i:>3} {:<24} {:?} <- {:?}", l.name, l.kind, l.inputs)?;
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct GraphBuilder {
    layers: Vec<Layer>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a layer with init gain 1.
    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind, inputs: &[LayerId]) -> LayerId {
        self.push_with_gain(name, kind, inputs, 1.0)
    }

    pub fn push_with_gain(&mut self, name: impl Into<String>, kind: LayerKind, inputs: &[LayerId], gain: f64) -> LayerId {
        self.layers.push(Layer {
            name: name.into(),
            kind,
            inputs: inputs.to_vec(),
            init_gain: gain,
        });
        self.layers.len() - 1
    }

    pub fn finish(self) -> Graph {
        Graph {
            layers: self.layers,
        }
    }
}
