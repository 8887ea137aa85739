//! Network descriptions: an ordered list of layer descriptors wired into an
//! acyclic graph, plus shape inference and the parameter/FLOP counters used
//! by the complexity report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `[batch, channels, depth, height, width]`
    Dense,
    /// `[batch, channels, points]`
    Points,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerSpec {
    Input {
        channels: usize,
        layout: Layout,
    },
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    /// Transposed convolution. Second input is a reference node whose
    /// spatial dims fix the output size.
    Deconv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Relu,
    BatchNorm {
        channels: usize,
    },
    MaxPool3d {
        size: usize,
    },
    /// Nearest-neighbour resize to the spatial dims of the second input.
    Upsample,
    /// Channel concatenation; inputs with a single spatial position are
    /// broadcast over the others.
    Concat,
    Add,
    /// Per-position linear map over the channel axis.
    SharedMlp {
        in_channels: usize,
        out_channels: usize,
        bias: bool,
    },
    /// Max over every spatial position.
    MaxAggregate,
    /// `x[..k] <- x[..k] * (M + I)`, with `M` read from the second input
    /// (`k*k` channels, one position).
    InputTransform {
        k: usize,
    },
    /// Farthest-point sampling plus ball-query grouping. Output channels are
    /// the 3 centroid-relative coordinates followed by the input features.
    SetAbstraction {
        npoint: usize,
        radius: f64,
        nsample: usize,
    },
    /// Max over each group of `nsample` consecutive positions.
    GroupMax {
        nsample: usize,
    },
    /// Inverse-distance 3-nearest interpolation of the coarse (second) input
    /// onto the fine (first) input's points, optionally prefixed with the
    /// fine features.
    FeaturePropagation {
        use_skip: bool,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Input { .. } => "input",
            LayerSpec::Conv3d { .. } => "conv3d",
            LayerSpec::Deconv3d { .. } => "deconv3d",
            LayerSpec::Relu => "relu",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::MaxPool3d { .. } => "maxpool",
            LayerSpec::Upsample => "upsample",
            LayerSpec::Concat => "concat",
            LayerSpec::Add => "add",
            LayerSpec::SharedMlp { .. } => "shared_mlp",
            LayerSpec::MaxAggregate => "max_aggregate",
            LayerSpec::InputTransform { .. } => "input_transform",
            LayerSpec::SetAbstraction { .. } => "set_abstraction",
            LayerSpec::GroupMax { .. } => "group_max",
            LayerSpec::FeaturePropagation { .. } => "feature_propagation",
        }
    }

    fn arity(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            LayerSpec::Input { .. } => 0..=0,
            LayerSpec::Deconv3d { .. }
            | LayerSpec::Upsample
            | LayerSpec::Add
            | LayerSpec::InputTransform { .. }
            | LayerSpec::FeaturePropagation { .. } => 2..=2,
            LayerSpec::Concat => 2..=usize::MAX,
            _ => 1..=1,
        }
    }

    /// Learnable parameter count. BatchNorm counts its affine pair only.
    pub fn param_count(&self) -> u64 {
        match *self {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            }
            | LayerSpec::Deconv3d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                (in_channels * out_channels * kernel.pow(3)) as u64
                    + if bias { out_channels as u64 } else { 0 }
            }
            LayerSpec::SharedMlp {
                in_channels,
                out_channels,
                bias,
            } => (in_channels * out_channels) as u64 + if bias { out_channels as u64 } else { 0 },
            LayerSpec::BatchNorm { channels } => 2 * channels as u64,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub layer: LayerSpec,
    pub inputs: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Dense { channels: usize, dims: [usize; 3] },
    Points { channels: usize, n: usize },
}

impl Shape {
    pub fn channels(&self) -> usize {
        match *self {
            Shape::Dense { channels, .. } | Shape::Points { channels, .. } => channels,
        }
    }

    pub fn positions(&self) -> u64 {
        match *self {
            Shape::Dense { dims, .. } => dims.iter().map(|&d| d as u64).product(),
            Shape::Points { n, .. } => n as u64,
        }
    }

    fn with_channels(self, channels: usize) -> Shape {
        match self {
            Shape::Dense { dims, .. } => Shape::Dense { channels, dims },
            Shape::Points { n, .. } => Shape::Points { channels, n },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub classes: usize,
    /// Dense inputs must have spatial dims divisible by this at run time.
    pub spatial_multiple: usize,
    pub nodes: Vec<Node>,
    pub output: usize,
}

impl NetworkSpec {
    pub fn input_node(&self) -> Result<(usize, usize, Layout)> {
        self.nodes
            .iter()
            .enumerate()
            .find_map(|(i, n)| match n.layer {
                LayerSpec::Input { channels, layout } => Some((i, channels, layout)),
                _ => None,
            })
            .ok_or_else(|| Error::Shape(format!("network {} has no input node", self.name)))
    }

    pub fn layout(&self) -> Result<Layout> {
        Ok(self.input_node()?.2)
    }

    /// Structural checks: topological order, arity and a single input node.
    pub fn validate(&self) -> Result<()> {
        let mut inputs = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.layer.arity().contains(&node.inputs.len()) {
                return Err(Error::Shape(format!(
                    "node {} ({}) has {} inputs",
                    node.name,
                    node.layer.kind(),
                    node.inputs.len()
                )));
            }
            if let Some(&bad) = node.inputs.iter().find(|&&j| j >= i) {
                return Err(Error::Shape(format!(
                    "node {} reads node {bad} which is not earlier in the graph",
                    node.name
                )));
            }
            if matches!(node.layer, LayerSpec::Input { .. }) {
                inputs += 1;
            }
        }
        if inputs != 1 {
            return Err(Error::Shape(format!("expected one input node, found {inputs}")));
        }
        if self.output >= self.nodes.len() {
            return Err(Error::Shape("output node out of range".into()));
        }
        Ok(())
    }

    /// Per-node output shapes for one batch item of the given input shape.
    pub fn infer_shapes(&self, input: Shape) -> Result<Vec<Shape>> {
        self.validate()?;
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<Shape> = node.inputs.iter().map(|&j| shapes[j]).collect();
            let shape = node_shape(node, &ins, input)?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn count_params(&self) -> u64 {
        self.nodes.iter().map(|n| n.layer.param_count()).sum()
    }

    /// Multiply-accumulate count of conv/deconv/MLP/transform layers.
    pub fn count_macs(&self, input: Shape) -> Result<u64> {
        let shapes = self.infer_shapes(input)?;
        let mut total = 0u64;
        for (i, node) in self.nodes.iter().enumerate() {
            let out = shapes[i];
            total += match node.layer {
                LayerSpec::Conv3d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                }
                | LayerSpec::Deconv3d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => out.positions() * (kernel.pow(3) * in_channels * out_channels) as u64,
                LayerSpec::SharedMlp {
                    in_channels,
                    out_channels,
                    ..
                } => out.positions() * (in_channels * out_channels) as u64,
                LayerSpec::InputTransform { k } => out.positions() * (k * k) as u64,
                _ => 0,
            };
        }
        Ok(total)
    }

    /// FLOPs with a multiply-add counted as two operations.
    pub fn count_flops(&self, input: Shape) -> Result<u64> {
        Ok(2 * self.count_macs(input)?)
    }
}

fn node_shape(node: &Node, ins: &[Shape], input: Shape) -> Result<Shape> {
    let err = |msg: String| Error::Shape(format!("{} ({}): {msg}", node.name, node.layer.kind()));
    let expect_channels = |s: &Shape, c: usize| {
        if s.channels() != c {
            Err(err(format!("expected {c} input channels, got {}", s.channels())))
        } else {
            Ok(())
        }
    };
    let dense = |s: &Shape| match *s {
        Shape::Dense { dims, .. } => Ok(dims),
        _ => Err(err("needs a dense input".into())),
    };
    let points = |s: &Shape| match *s {
        Shape::Points { n, .. } => Ok(n),
        _ => Err(err("needs a point input".into())),
    };
    Ok(match node.layer {
        LayerSpec::Input { channels, layout } => {
            let ok = matches!(
                (layout, input),
                (Layout::Dense, Shape::Dense { .. }) | (Layout::Points, Shape::Points { .. })
            );
            if !ok || input.channels() != channels {
                return Err(err(format!("input shape {input:?} does not match")));
            }
            if input.positions() == 0 {
                return Err(err("empty input".into()));
            }
            input
        }
        LayerSpec::Conv3d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            expect_channels(&ins[0], in_channels)?;
            let dims = dense(&ins[0])?;
            let mut out = [0; 3];
            for a in 0..3 {
                let padded = dims[a] + 2 * padding;
                if padded < kernel {
                    return Err(err(format!("dim {} smaller than kernel", dims[a])));
                }
                out[a] = (padded - kernel) / stride + 1;
            }
            Shape::Dense {
                channels: out_channels,
                dims: out,
            }
        }
        LayerSpec::Deconv3d {
            in_channels,
            out_channels,
            ..
        } => {
            expect_channels(&ins[0], in_channels)?;
            dense(&ins[0])?;
            Shape::Dense {
                channels: out_channels,
                dims: dense(&ins[1])?,
            }
        }
        LayerSpec::Relu => ins[0],
        LayerSpec::BatchNorm { channels } => {
            expect_channels(&ins[0], channels)?;
            ins[0]
        }
        LayerSpec::MaxPool3d { size } => {
            let dims = dense(&ins[0])?;
            let out = dims.map(|d| d / size);
            if out.contains(&0) {
                return Err(err(format!("dims {dims:?} too small to pool by {size}")));
            }
            Shape::Dense {
                channels: ins[0].channels(),
                dims: out,
            }
        }
        LayerSpec::Upsample => Shape::Dense {
            channels: ins[0].channels(),
            dims: {
                dense(&ins[0])?;
                dense(&ins[1])?
            },
        },
        LayerSpec::Concat => {
            let channels = ins.iter().map(Shape::channels).sum();
            let widest = ins
                .iter()
                .copied()
                .max_by_key(Shape::positions)
                .expect("concat arity");
            for s in ins {
                let compatible = match (s, &widest) {
                    (Shape::Dense { dims: a, .. }, Shape::Dense { dims: b, .. }) => a == b,
                    (Shape::Points { n: a, .. }, Shape::Points { n: b, .. }) => a == b || *a == 1,
                    _ => false,
                };
                if !compatible {
                    return Err(err(format!("cannot concatenate {s:?} with {widest:?}")));
                }
            }
            widest.with_channels(channels)
        }
        LayerSpec::Add => {
            if ins[0] != ins[1] {
                return Err(err(format!("{:?} vs {:?}", ins[0], ins[1])));
            }
            ins[0]
        }
        LayerSpec::SharedMlp {
            in_channels,
            out_channels,
            ..
        } => {
            expect_channels(&ins[0], in_channels)?;
            ins[0].with_channels(out_channels)
        }
        LayerSpec::MaxAggregate => Shape::Points {
            channels: ins[0].channels(),
            n: {
                points(&ins[0])?;
                1
            },
        },
        LayerSpec::InputTransform { k } => {
            points(&ins[0])?;
            if ins[0].channels() < k {
                return Err(err(format!("needs at least {k} channels")));
            }
            if ins[1] != (Shape::Points { channels: k * k, n: 1 }) {
                return Err(err(format!("transform input {:?} is not {k}x{k}", ins[1])));
            }
            ins[0]
        }
        LayerSpec::SetAbstraction {
            npoint, nsample, ..
        } => {
            let n = points(&ins[0])?;
            if n < npoint {
                return Err(err(format!("{n} points is fewer than the {npoint} to sample")));
            }
            Shape::Points {
                channels: 3 + ins[0].channels(),
                n: npoint * nsample,
            }
        }
        LayerSpec::GroupMax { nsample } => {
            let n = points(&ins[0])?;
            if nsample == 0 || n % nsample != 0 {
                return Err(err(format!("{n} positions not a multiple of {nsample}")));
            }
            Shape::Points {
                channels: ins[0].channels(),
                n: n / nsample,
            }
        }
        LayerSpec::FeaturePropagation { use_skip } => {
            let n = points(&ins[0])?;
            points(&ins[1])?;
            let skip = if use_skip { ins[0].channels() } else { 0 };
            Shape::Points {
                channels: skip + ins[1].channels(),
                n,
            }
        }
    })
}

/// Incremental builder used by the architecture constructors.
#[derive(Debug)]
pub struct SpecBuilder {
    nodes: Vec<Node>,
}

impl SpecBuilder {
    pub fn new() -> Self {
        SpecBuilder { nodes: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, layer: LayerSpec, inputs: &[usize]) -> usize {
        self.nodes.push(Node {
            name: name.into(),
            layer,
            inputs: inputs.to_vec(),
        });
        self.nodes.len() - 1
    }

    pub fn finish(self, name: &str, classes: usize, spatial_multiple: usize) -> NetworkSpec {
        let output = self.nodes.len() - 1;
        NetworkSpec {
            name: name.to_string(),
            classes,
            spatial_multiple,
            nodes: self.nodes,
            output,
        }
    }
}

impl Default for SpecBuilder {
    fn default() -> Self {
        Self::new()
    }
}
