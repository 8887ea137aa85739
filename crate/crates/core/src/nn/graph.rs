//! Instantiated networks: parameter storage, a recorded forward pass and
//! reverse-mode gradient propagation over the layer graph.

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{conv_backward, conv_forward, deconv_backward, deconv_forward, ConvGeometry};
use super::point::{ball_query, farthest_point_sample, three_nn, PointCoords};
use super::scalar::{matmul, matmul_at, matmul_bt, Scalar};
use super::spec::{LayerSpec, Layout, NetworkSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalisation layers; running statistics updated.
    Train,
    /// Running statistics; nothing mutated.
    Eval,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Clone, Debug)]
struct RunningStats<T> {
    mean: Vec<T>,
    var: Vec<T>,
}

/// Network input: features plus, for point networks that group by
/// position, the point coordinates.
#[derive(Clone, Debug)]
pub struct NetInput<T> {
    pub features: Tensor<T>,
    pub coords: Option<PointCoords>,
}

impl<T> NetInput<T> {
    pub fn dense(features: Tensor<T>) -> Self {
        NetInput {
            features,
            coords: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Value<T> {
    pub data: Tensor<T>,
    pub coords: Option<Arc<PointCoords>>,
}

#[derive(Debug)]
enum Cache<T> {
    None,
    Norm { xhat: Vec<T>, inv_std: Vec<T> },
    Argmax(Vec<u32>),
    Group(Vec<u32>),
    Interp { idx: Vec<u32>, w: Vec<T> },
}

/// Everything recorded by a forward pass that the backward pass needs.
#[derive(Debug)]
pub struct Trace<T> {
    values: Vec<Value<T>>,
    caches: Vec<Cache<T>>,
    mode: Mode,
    output: usize,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.values[self.output].data
    }

    pub fn into_output(mut self) -> Tensor<T> {
        self.values.swap_remove(self.output).data
    }

    pub fn value(&self, node: usize) -> &Value<T> {
        &self.values[node]
    }
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    spec: NetworkSpec,
    params: Vec<Param<T>>,
    node_params: Vec<Range<usize>>,
    running: Vec<Option<RunningStats<T>>>,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

impl<T: Scalar> Network<T> {
    /// Instantiates parameters with fan-in scaled uniform initialisation
    /// (`U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases).
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut node_params = Vec::with_capacity(spec.nodes.len());
        let mut running = Vec::with_capacity(spec.nodes.len());
        for node in &spec.nodes {
            let start = params.len();
            let mut push = |suffix: &str, value: Tensor<T>| {
                let grad = Tensor::zeros(value.shape());
                params.push(Param {
                    name: format!("{}.{suffix}", node.name),
                    value,
                    grad,
                });
            };
            let mut stats = None;
            match node.layer {
                LayerSpec::Conv3d {
                    in_channels,
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => {
                    let bound = 1.0 / ((in_channels * kernel.pow(3)) as f64).sqrt();
                    push(
                        "weight",
                        uniform(
                            &mut rng,
                            &[out_channels, in_channels, kernel, kernel, kernel],
                            bound,
                        ),
                    );
                    if bias {
                        push("bias", uniform(&mut rng, &[out_channels], bound));
                    }
                }
                LayerSpec::Deconv3d {
                    in_channels,
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => {
                    let bound = 1.0 / ((out_channels * kernel.pow(3)) as f64).sqrt();
                    push(
                        "weight",
                        uniform(
                            &mut rng,
                            &[in_channels, out_channels, kernel, kernel, kernel],
                            bound,
                        ),
                    );
                    if bias {
                        push("bias", uniform(&mut rng, &[out_channels], bound));
                    }
                }
                LayerSpec::SharedMlp {
                    in_channels,
                    out_channels,
                    bias,
                } => {
                    let bound = 1.0 / (in_channels as f64).sqrt();
                    push(
                        "weight",
                        uniform(&mut rng, &[out_channels, in_channels], bound),
                    );
                    if bias {
                        push("bias", uniform(&mut rng, &[out_channels], bound));
                    }
                }
                LayerSpec::BatchNorm { channels } => {
                    push("gamma", Tensor::full(&[channels], T::one()));
                    push("beta", Tensor::zeros(&[channels]));
                    stats = Some(RunningStats {
                        mean: vec![T::zero(); channels],
                        var: vec![T::one(); channels],
                    });
                }
                _ => {}
            }
            node_params.push(start..params.len());
            running.push(stats);
        }
        Ok(Network {
            spec,
            params,
            node_params,
            running,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Named tensors that fully describe the trained state: parameters and
    /// normalisation running statistics.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for (node, stats) in self.spec.nodes.iter().zip(&self.running) {
            if let Some(s) = stats {
                let c = s.mean.len();
                out.push((
                    format!("{}.running_mean", node.name),
                    Tensor::from_vec(&[c], s.mean.clone()).expect("len"),
                ));
                out.push((
                    format!("{}.running_var", node.name),
                    Tensor::from_vec(&[c], s.var.clone()).expect("len"),
                ));
            }
        }
        out
    }

    pub fn load_state(&mut self, state: &[(String, Tensor<T>)]) -> Result<()> {
        let lookup = |name: &str| {
            state
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        for p in &mut self.params {
            let t = lookup(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        for (node, stats) in self.spec.nodes.iter().zip(&mut self.running) {
            if let Some(s) = stats {
                let m = lookup(&format!("{}.running_mean", node.name))?;
                let v = lookup(&format!("{}.running_var", node.name))?;
                if m.len() != s.mean.len() || v.len() != s.var.len() {
                    return Err(Error::Checkpoint(format!(
                        "running statistics of {} have the wrong length",
                        node.name
                    )));
                }
                s.mean = m.data().to_vec();
                s.var = v.data().to_vec();
            }
        }
        Ok(())
    }

    /// Forward pass. In [`Mode::Train`] normalisation running statistics are
    /// updated.
    pub fn forward(&mut self, input: &NetInput<T>, mode: Mode) -> Result<Trace<T>> {
        let mut running = std::mem::take(&mut self.running);
        let result = self.run(input, mode, Some(&mut running));
        self.running = running;
        result
    }

    /// Inference-mode forward pass; `&self` so tiles can share a network.
    pub fn predict(&self, input: &NetInput<T>) -> Result<Tensor<T>> {
        Ok(self.run(input, Mode::Eval, None)?.into_output())
    }

    fn check_input(&self, input: &NetInput<T>) -> Result<()> {
        let (_, channels, layout) = self.spec.input_node()?;
        let shape = input.features.shape();
        let rank = match layout {
            Layout::Dense => 5,
            Layout::Points => 3,
        };
        if shape.len() != rank || shape[1] != channels {
            return Err(Error::Shape(format!(
                "{} expects {rank}-d input with {channels} channels, got {shape:?}",
                self.spec.name
            )));
        }
        if layout == Layout::Dense {
            let m = self.spec.spatial_multiple.max(1);
            if shape[2..].iter().any(|&d| d == 0 || d % m != 0) {
                return Err(Error::Shape(format!(
                    "input spatial dims {:?} not divisible by {m}",
                    &shape[2..]
                )));
            }
        }
        if let Some(c) = &input.coords {
            if c.n != shape[2] || c.batch() != shape[0] {
                return Err(Error::Shape("coordinates do not match features".into()));
            }
        }
        Ok(())
    }

    fn run(
        &self,
        input: &NetInput<T>,
        mode: Mode,
        mut running: Option<&mut Vec<Option<RunningStats<T>>>>,
    ) -> Result<Trace<T>> {
        self.check_input(input)?;
        let n_nodes = self.spec.nodes.len();
        let mut values: Vec<Value<T>> = Vec::with_capacity(n_nodes);
        let mut caches = Vec::with_capacity(n_nodes);
        for (i, node) in self.spec.nodes.iter().enumerate() {
            let ins: Vec<&Value<T>> = node.inputs.iter().map(|&j| &values[j]).collect();
            let params = &self.params[self.node_params[i].clone()];
            let stats = match running.as_deref_mut() {
                Some(r) => r[i].as_mut().map(StatsRef::Mut),
                None => self.running[i].as_ref().map(StatsRef::Ref),
            };
            let (value, cache) = forward_node(&node.layer, &ins, params, stats, mode, input)
                .map_err(|e| match e {
                    Error::Shape(m) => Error::Shape(format!("{}: {m}", node.name)),
                    other => other,
                })?;
            values.push(value);
            caches.push(cache);
        }
        Ok(Trace {
            values,
            caches,
            mode,
            output: self.spec.output,
        })
    }

    /// Reverse-mode pass. Parameter gradients are accumulated into
    /// [`Param::grad`]; returns the gradient with respect to the input
    /// features when `input_grad` is set.
    pub fn backward(
        &mut self,
        trace: &Trace<T>,
        grad_output: Tensor<T>,
        input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let nodes = &self.spec.nodes;
        let (input_node, _, _) = self.spec.input_node()?;
        let mut needs = vec![false; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            needs[i] = if i == input_node {
                input_grad
            } else {
                !self.node_params[i].is_empty() || node.inputs.iter().any(|&j| needs[j])
            };
        }
        if grad_output.shape() != trace.output().shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} vs output {:?}",
                grad_output.shape(),
                trace.output().shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[trace.output] = Some(grad_output);
        for i in (0..nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    layer: nodes[i].name.clone(),
                });
            }
            if i == input_node {
                grads[i] = Some(g);
                continue;
            }
            let node = &nodes[i];
            let ins: Vec<&Value<T>> = node.inputs.iter().map(|&j| &trace.values[j]).collect();
            let want: Vec<bool> = node.inputs.iter().map(|&j| needs[j]).collect();
            let params = &mut self.params[self.node_params[i].clone()];
            let in_grads = backward_node(
                &node.layer,
                &ins,
                &trace.values[i],
                &trace.caches[i],
                params,
                trace.mode,
                &g,
                &want,
            )?;
            for (slot, (&j, ig)) in node.inputs.iter().zip(in_grads).enumerate() {
                let Some(ig) = ig else { continue };
                debug_assert!(want[slot]);
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&ig),
                    empty => *empty = Some(ig),
                }
            }
        }
        for p in &self.params {
            if !p.grad.all_finite() {
                return Err(Error::NonFinite {
                    layer: p.name.clone(),
                });
            }
        }
        Ok(if input_grad { grads[input_node].take() } else { None })
    }
}

enum StatsRef<'a, T> {
    Ref(&'a RunningStats<T>),
    Mut(&'a mut RunningStats<T>),
}

fn dims_of<T: Scalar>(t: &Tensor<T>) -> Result<[usize; 3]> {
    match t.shape() {
        [_, _, d, h, w] => Ok([*d, *h, *w]),
        s => Err(Error::Shape(format!("expected a dense 5-d tensor, got {s:?}"))),
    }
}

fn with_channels(shape: &[usize], channels: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[1] = channels;
    s
}

fn forward_node<T: Scalar>(
    layer: &LayerSpec,
    ins: &[&Value<T>],
    params: &[Param<T>],
    stats: Option<StatsRef<'_, T>>,
    mode: Mode,
    input: &NetInput<T>,
) -> Result<(Value<T>, Cache<T>)> {
    let passthrough = |data: Tensor<T>| Value {
        data,
        coords: ins.first().and_then(|v| v.coords.clone()),
    };
    Ok(match *layer {
        LayerSpec::Input { .. } => (
            Value {
                data: input.features.clone(),
                coords: input.coords.clone().map(Arc::new),
            },
            Cache::None,
        ),
        LayerSpec::Conv3d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let x = &ins[0].data;
            let g = ConvGeometry::new(dims_of(x)?, kernel, stride, padding)?;
            let b = x.batch();
            let mut shape = vec![b, out_channels];
            shape.extend_from_slice(&g.out_dims);
            let mut out = Tensor::zeros(&shape);
            let bias = params.get(1).map(|p| p.value.data());
            for bi in 0..b {
                conv_forward(
                    x.item(bi),
                    in_channels,
                    out_channels,
                    params[0].value.data(),
                    bias,
                    &g,
                    out.item_mut(bi),
                );
            }
            (passthrough(out), Cache::None)
        }
        LayerSpec::Deconv3d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let x = &ins[0].data;
            let large = dims_of(&ins[1].data)?;
            let g = ConvGeometry::transposed(dims_of(x)?, large, kernel, stride, padding)?;
            let b = x.batch();
            let mut shape = vec![b, out_channels];
            shape.extend_from_slice(&large);
            let mut out = Tensor::zeros(&shape);
            let bias = params.get(1).map(|p| p.value.data());
            for bi in 0..b {
                deconv_forward(
                    x.item(bi),
                    in_channels,
                    out_channels,
                    params[0].value.data(),
                    bias,
                    &g,
                    out.item_mut(bi),
                );
            }
            (passthrough(out), Cache::None)
        }
        LayerSpec::Relu => {
            let mut out = ins[0].data.clone();
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v = if *v > T::zero() { *v } else { T::zero() });
            (passthrough(out), Cache::None)
        }
        LayerSpec::BatchNorm { channels } => {
            let x = &ins[0].data;
            let (b, s) = (x.batch(), x.spatial());
            let gamma = params[0].value.data();
            let beta = params[1].value.data();
            let mut out = Tensor::zeros(x.shape());
            let mut xhat = vec![T::zero(); x.len()];
            let mut inv_std = vec![T::zero(); channels];
            let count = (b * s) as f64;
            let eps = T::from_f64_lossy(BN_EPS);
            for c in 0..channels {
                let (mean, var) = match mode {
                    Mode::Train => {
                        let mut sum = 0.0;
                        let mut sq = 0.0;
                        for bi in 0..b {
                            for &v in &x.item(bi)[c * s..(c + 1) * s] {
                                let v = v.as_f64();
                                sum += v;
                                sq += v * v;
                            }
                        }
                        let mean = sum / count;
                        let var = (sq / count - mean * mean).max(0.0);
                        (T::from_f64_lossy(mean), T::from_f64_lossy(var))
                    }
                    Mode::Eval => match &stats {
                        Some(StatsRef::Ref(r)) => (r.mean[c], r.var[c]),
                        Some(StatsRef::Mut(r)) => (r.mean[c], r.var[c]),
                        None => (T::zero(), T::one()),
                    },
                };
                let is = T::one() / (var + eps).sqrt();
                inv_std[c] = is;
                for bi in 0..b {
                    let off = bi * channels * s + c * s;
                    for k in off..off + s {
                        let h = (x.data()[k] - mean) * is;
                        xhat[k] = h;
                        out.data_mut()[k] = gamma[c] * h + beta[c];
                    }
                }
            }
            if mode == Mode::Train {
                if let Some(StatsRef::Mut(r)) = stats {
                    update_running(r, x, channels);
                }
            }
            (passthrough(out), Cache::Norm { xhat, inv_std })
        }
        LayerSpec::MaxPool3d { size } => {
            let x = &ins[0].data;
            let [d, h, w] = dims_of(x)?;
            let od = [d / size, h / size, w / size];
            let (b, c) = (x.batch(), x.channels());
            let mut out = Tensor::zeros(&[b, c, od[0], od[1], od[2]]);
            let mut arg = vec![0u32; out.len()];
            let in_len = d * h * w;
            let out_len = od[0] * od[1] * od[2];
            for bc in 0..b * c {
                let src = &x.data()[bc * in_len..(bc + 1) * in_len];
                for oz in 0..od[0] {
                    for oy in 0..od[1] {
                        for ox in 0..od[2] {
                            let mut best = (T::neg_infinity(), 0usize);
                            for kz in 0..size {
                                for ky in 0..size {
                                    for kx in 0..size {
                                        let idx = ((oz * size + kz) * h + oy * size + ky) * w
                                            + ox * size
                                            + kx;
                                        if src[idx] > best.0 {
                                            best = (src[idx], idx);
                                        }
                                    }
                                }
                            }
                            let o = bc * out_len + (oz * od[1] + oy) * od[2] + ox;
                            out.data_mut()[o] = best.0;
                            arg[o] = best.1 as u32;
                        }
                    }
                }
            }
            (passthrough(out), Cache::Argmax(arg))
        }
        LayerSpec::Upsample => {
            let x = &ins[0].data;
            let src = dims_of(x)?;
            let dst = dims_of(&ins[1].data)?;
            let (b, c) = (x.batch(), x.channels());
            let mut out = Tensor::zeros(&[b, c, dst[0], dst[1], dst[2]]);
            let map = nearest_map(src, dst);
            let (in_len, out_len) = (src.iter().product::<usize>(), map.len());
            for bc in 0..b * c {
                let s = &x.data()[bc * in_len..(bc + 1) * in_len];
                let o = &mut out.data_mut()[bc * out_len..(bc + 1) * out_len];
                for (ov, &m) in o.iter_mut().zip(&map) {
                    *ov = s[m];
                }
            }
            (passthrough(out), Cache::None)
        }
        LayerSpec::Concat => {
            let widest = ins
                .iter()
                .map(|v| v.data.spatial())
                .max()
                .unwrap_or(1);
            let b = ins[0].data.batch();
            let channels: usize = ins.iter().map(|v| v.data.channels()).sum();
            let template = ins
                .iter()
                .find(|v| v.data.spatial() == widest)
                .expect("nonempty");
            let mut out = Tensor::zeros(&with_channels(template.data.shape(), channels));
            for bi in 0..b {
                let dst = out.item_mut(bi);
                let mut c0 = 0;
                for v in ins {
                    let src = v.data.item(bi);
                    let (c, s) = (v.data.channels(), v.data.spatial());
                    for ci in 0..c {
                        let row = &mut dst[(c0 + ci) * widest..(c0 + ci + 1) * widest];
                        if s == widest {
                            row.copy_from_slice(&src[ci * s..(ci + 1) * s]);
                        } else {
                            row.fill(src[ci]);
                        }
                    }
                    c0 += c;
                }
            }
            let coords = ins.iter().find_map(|v| v.coords.clone());
            (Value { data: out, coords }, Cache::None)
        }
        LayerSpec::Add => {
            let mut out = ins[0].data.clone();
            out.add_assign(&ins[1].data);
            (passthrough(out), Cache::None)
        }
        LayerSpec::SharedMlp {
            in_channels,
            out_channels,
            ..
        } => {
            let x = &ins[0].data;
            let s = x.spatial();
            let mut out = Tensor::zeros(&with_channels(x.shape(), out_channels));
            for bi in 0..x.batch() {
                let o = out.item_mut(bi);
                matmul(out_channels, in_channels, s, params[0].value.data(), x.item(bi), o, false);
                if let Some(bias) = params.get(1) {
                    for (co, row) in o.chunks_mut(s).enumerate() {
                        row.iter_mut().for_each(|v| *v += bias.value.data()[co]);
                    }
                }
            }
            (passthrough(out), Cache::None)
        }
        LayerSpec::MaxAggregate => {
            let x = &ins[0].data;
            let (b, c, s) = (x.batch(), x.channels(), x.spatial());
            let mut out = Tensor::zeros(&[b, c, 1]);
            let mut arg = vec![0u32; b * c];
            for bc in 0..b * c {
                let row = &x.data()[bc * s..(bc + 1) * s];
                let (mut best, mut at) = (row[0], 0);
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        at = i;
                    }
                }
                out.data_mut()[bc] = best;
                arg[bc] = at as u32;
            }
            (Value { data: out, coords: None }, Cache::Argmax(arg))
        }
        LayerSpec::InputTransform { k } => {
            let x = &ins[0].data;
            let n = x.spatial();
            let mut out = x.clone();
            for bi in 0..x.batch() {
                let m = transform_matrix(ins[1].data.item(bi), k);
                let src = &x.item(bi)[..k * n];
                matmul_at(k, k, n, &m, src, &mut out.item_mut(bi)[..k * n], false);
            }
            (passthrough(out), Cache::None)
        }
        LayerSpec::SetAbstraction {
            npoint,
            radius,
            nsample,
        } => {
            let x = &ins[0].data;
            let coords = ins[0]
                .coords
                .as_ref()
                .ok_or_else(|| Error::Shape("set abstraction needs point coordinates".into()))?;
            let (b, c, n) = (x.batch(), x.channels(), x.spatial());
            if n < npoint {
                return Err(Error::Shape(format!(
                    "{n} points is fewer than the {npoint} to sample"
                )));
            }
            let m = npoint * nsample;
            let mut out = Tensor::zeros(&[b, 3 + c, m]);
            let mut groups = Vec::with_capacity(b * m);
            let mut centroid_xyz = Vec::with_capacity(b * npoint * 3);
            for bi in 0..b {
                let xyz = coords.item(bi);
                let centroids = farthest_point_sample(xyz, npoint);
                let idx = ball_query(xyz, &centroids, radius, nsample);
                let o = out.item_mut(bi);
                let src = x.item(bi);
                for (slot, &pi) in idx.iter().enumerate() {
                    let ci = centroids[slot / nsample];
                    for a in 0..3 {
                        o[a * m + slot] = T::from_f64_lossy(xyz[3 * pi + a] - xyz[3 * ci + a]);
                    }
                    for ch in 0..c {
                        o[(3 + ch) * m + slot] = src[ch * n + pi];
                    }
                }
                for &ci in &centroids {
                    centroid_xyz.extend_from_slice(&xyz[3 * ci..3 * ci + 3]);
                }
                groups.extend(idx.iter().map(|&i| i as u32));
            }
            (
                Value {
                    data: out,
                    coords: Some(Arc::new(PointCoords::new(npoint, centroid_xyz))),
                },
                Cache::Group(groups),
            )
        }
        LayerSpec::GroupMax { nsample } => {
            let x = &ins[0].data;
            let (b, c, s) = (x.batch(), x.channels(), x.spatial());
            let groups = s / nsample;
            let mut out = Tensor::zeros(&[b, c, groups]);
            let mut arg = vec![0u32; b * c * groups];
            for bc in 0..b * c {
                for gi in 0..groups {
                    let row = &x.data()[bc * s + gi * nsample..bc * s + (gi + 1) * nsample];
                    let (mut best, mut at) = (row[0], 0);
                    for (i, &v) in row.iter().enumerate().skip(1) {
                        if v > best {
                            best = v;
                            at = i;
                        }
                    }
                    out.data_mut()[bc * groups + gi] = best;
                    arg[bc * groups + gi] = (gi * nsample + at) as u32;
                }
            }
            (passthrough(out), Cache::Argmax(arg))
        }
        LayerSpec::FeaturePropagation { use_skip } => {
            let fine = &ins[0];
            let coarse = &ins[1];
            let (fc, cc) = (fine.coords.as_ref(), coarse.coords.as_ref());
            let (Some(fc), Some(cc)) = (fc, cc) else {
                return Err(Error::Shape("feature propagation needs point coordinates".into()));
            };
            let b = fine.data.batch();
            let nf = fc.n;
            let (c1, c2, nc) = (
                fine.data.channels(),
                coarse.data.channels(),
                coarse.data.spatial(),
            );
            let skip = if use_skip { c1 } else { 0 };
            let mut out = Tensor::zeros(&[b, skip + c2, nf]);
            let mut all_idx = Vec::with_capacity(b * nf * 3);
            let mut all_w = Vec::with_capacity(b * nf * 3);
            for bi in 0..b {
                let (idx, w) = three_nn(fc.item(bi), cc.item(bi));
                let o = out.item_mut(bi);
                if use_skip {
                    o[..c1 * nf].copy_from_slice(fine.data.item(bi));
                }
                let src = coarse.data.item(bi);
                for ch in 0..c2 {
                    let row = &mut o[(skip + ch) * nf..(skip + ch + 1) * nf];
                    let srow = &src[ch * nc..(ch + 1) * nc];
                    for (i, v) in row.iter_mut().enumerate() {
                        let mut acc = T::zero();
                        for t in 0..3 {
                            acc += T::from_f64_lossy(w[3 * i + t]) * srow[idx[3 * i + t]];
                        }
                        *v = acc;
                    }
                }
                all_idx.extend(idx.iter().map(|&i| i as u32));
                all_w.extend(w.iter().map(|&v| T::from_f64_lossy(v)));
            }
            (
                Value {
                    data: out,
                    coords: Some(fc.clone()),
                },
                Cache::Interp {
                    idx: all_idx,
                    w: all_w,
                },
            )
        }
    })
}

fn update_running<T: Scalar>(r: &mut RunningStats<T>, x: &Tensor<T>, channels: usize) {
    let (b, s) = (x.batch(), x.spatial());
    let count = (b * s) as f64;
    for c in 0..channels {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for bi in 0..b {
            for &v in &x.item(bi)[c * s..(c + 1) * s] {
                let v = v.as_f64();
                sum += v;
                sq += v * v;
            }
        }
        let mean = sum / count;
        let var = (sq / count - mean * mean).max(0.0);
        let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
        let m = T::from_f64_lossy(BN_MOMENTUM);
        r.mean[c] = (T::one() - m) * r.mean[c] + m * T::from_f64_lossy(mean);
        r.var[c] = (T::one() - m) * r.var[c] + m * T::from_f64_lossy(unbiased);
    }
}

/// Flat source index for every destination voxel of a nearest resize.
fn nearest_map(src: [usize; 3], dst: [usize; 3]) -> Vec<usize> {
    let axis = |a: usize| -> Vec<usize> { (0..dst[a]).map(|i| i * src[a] / dst[a]).collect() };
    let (mz, my, mx) = (axis(0), axis(1), axis(2));
    let mut map = Vec::with_capacity(dst.iter().product());
    for &z in &mz {
        for &y in &my {
            for &x in &mx {
                map.push((z * src[1] + y) * src[2] + x);
            }
        }
    }
    map
}

fn transform_matrix<T: Scalar>(raw: &[T], k: usize) -> Vec<T> {
    let mut m = raw[..k * k].to_vec();
    for i in 0..k {
        m[i * k + i] += T::one();
    }
    m
}

#[allow(clippy::too_many_arguments)]
fn backward_node<T: Scalar>(
    layer: &LayerSpec,
    ins: &[&Value<T>],
    out: &Value<T>,
    cache: &Cache<T>,
    params: &mut [Param<T>],
    mode: Mode,
    g: &Tensor<T>,
    want: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let zeros_like = |i: usize| Tensor::<T>::zeros(ins[i].data.shape());
    Ok(match *layer {
        LayerSpec::Input { .. } => vec![],
        LayerSpec::Conv3d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let x = &ins[0].data;
            let geom = ConvGeometry::new(dims_of(x)?, kernel, stride, padding)?;
            let mut dx = want[0].then(|| zeros_like(0));
            let (wp, rest) = params.split_at_mut(1);
            for bi in 0..x.batch() {
                conv_backward(
                    x.item(bi),
                    g.item(bi),
                    in_channels,
                    out_channels,
                    wp[0].value.data(),
                    &geom,
                    wp[0].grad.data_mut(),
                    rest.first_mut().map(|p| p.grad.data_mut()),
                    dx.as_mut().map(|d| d.item_mut(bi)),
                );
            }
            vec![dx]
        }
        LayerSpec::Deconv3d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let x = &ins[0].data;
            let geom =
                ConvGeometry::transposed(dims_of(x)?, dims_of(&ins[1].data)?, kernel, stride, padding)?;
            let mut dx = want[0].then(|| zeros_like(0));
            let (wp, rest) = params.split_at_mut(1);
            for bi in 0..x.batch() {
                deconv_backward(
                    x.item(bi),
                    g.item(bi),
                    in_channels,
                    out_channels,
                    wp[0].value.data(),
                    &geom,
                    wp[0].grad.data_mut(),
                    rest.first_mut().map(|p| p.grad.data_mut()),
                    dx.as_mut().map(|d| d.item_mut(bi)),
                );
            }
            vec![dx, None]
        }
        LayerSpec::Relu => {
            let mut dx = g.clone();
            for (d, &y) in dx.data_mut().iter_mut().zip(out.data.data()) {
                if y <= T::zero() {
                    *d = T::zero();
                }
            }
            vec![Some(dx)]
        }
        LayerSpec::BatchNorm { channels } => {
            let Cache::Norm { xhat, inv_std } = cache else {
                unreachable!("batchnorm cache")
            };
            let x = &ins[0].data;
            let (b, s) = (x.batch(), x.spatial());
            let n = T::from_usize((b * s).max(1)).expect("count");
            let mut dx = want[0].then(|| zeros_like(0));
            let gamma: Vec<T> = params[0].value.data().to_vec();
            for c in 0..channels {
                let mut sum_dy = T::zero();
                let mut sum_dy_xhat = T::zero();
                for bi in 0..b {
                    let off = bi * channels * s + c * s;
                    for k in off..off + s {
                        sum_dy += g.data()[k];
                        sum_dy_xhat += g.data()[k] * xhat[k];
                    }
                }
                params[0].grad.data_mut()[c] += sum_dy_xhat;
                params[1].grad.data_mut()[c] += sum_dy;
                if let Some(dx) = dx.as_mut() {
                    let scale = gamma[c] * inv_std[c];
                    for bi in 0..b {
                        let off = bi * channels * s + c * s;
                        for k in off..off + s {
                            dx.data_mut()[k] = match mode {
                                Mode::Train => {
                                    scale * (g.data()[k] - (sum_dy + xhat[k] * sum_dy_xhat) / n)
                                }
                                Mode::Eval => scale * g.data()[k],
                            };
                        }
                    }
                }
            }
            vec![dx]
        }
        LayerSpec::MaxPool3d { .. } => {
            let Cache::Argmax(arg) = cache else {
                unreachable!("pool cache")
            };
            let x = &ins[0].data;
            let mut dx = zeros_like(0);
            let in_len = x.spatial();
            let out_len = g.spatial();
            for bc in 0..x.batch() * x.channels() {
                for o in 0..out_len {
                    let k = bc * out_len + o;
                    dx.data_mut()[bc * in_len + arg[k] as usize] += g.data()[k];
                }
            }
            vec![Some(dx)]
        }
        LayerSpec::Upsample => {
            let x = &ins[0].data;
            let map = nearest_map(dims_of(x)?, dims_of(g)?);
            let mut dx = zeros_like(0);
            let (in_len, out_len) = (x.spatial(), map.len());
            for bc in 0..x.batch() * x.channels() {
                let src = &g.data()[bc * out_len..(bc + 1) * out_len];
                let dst = &mut dx.data_mut()[bc * in_len..(bc + 1) * in_len];
                for (&m, &v) in map.iter().zip(src) {
                    dst[m] += v;
                }
            }
            vec![Some(dx), None]
        }
        LayerSpec::Concat => {
            let widest = g.spatial();
            let mut c0 = 0;
            let mut grads = Vec::with_capacity(ins.len());
            for (slot, v) in ins.iter().enumerate() {
                let (c, s) = (v.data.channels(), v.data.spatial());
                if want[slot] {
                    let mut d = Tensor::zeros(v.data.shape());
                    for bi in 0..g.batch() {
                        let src = g.item(bi);
                        let dst = d.item_mut(bi);
                        for ci in 0..c {
                            let row = &src[(c0 + ci) * widest..(c0 + ci + 1) * widest];
                            if s == widest {
                                dst[ci * s..(ci + 1) * s].copy_from_slice(row);
                            } else {
                                dst[ci] = row.iter().copied().sum();
                            }
                        }
                    }
                    grads.push(Some(d));
                } else {
                    grads.push(None);
                }
                c0 += c;
            }
            grads
        }
        LayerSpec::Add => vec![
            want[0].then(|| g.clone()),
            want[1].then(|| g.clone()),
        ],
        LayerSpec::SharedMlp {
            in_channels,
            out_channels,
            ..
        } => {
            let x = &ins[0].data;
            let s = x.spatial();
            let mut dx = want[0].then(|| zeros_like(0));
            let (wp, rest) = params.split_at_mut(1);
            for bi in 0..x.batch() {
                let gi = g.item(bi);
                matmul_bt(out_channels, s, in_channels, gi, x.item(bi), wp[0].grad.data_mut(), true);
                if let Some(bias) = rest.first_mut() {
                    for (co, row) in gi.chunks(s).enumerate() {
                        bias.grad.data_mut()[co] += row.iter().copied().sum::<T>();
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    matmul_at(in_channels, out_channels, s, wp[0].value.data(), gi, dx.item_mut(bi), false);
                }
            }
            vec![dx]
        }
        LayerSpec::MaxAggregate => {
            let Cache::Argmax(arg) = cache else {
                unreachable!("aggregate cache")
            };
            let x = &ins[0].data;
            let s = x.spatial();
            let mut dx = zeros_like(0);
            for (bc, &a) in arg.iter().enumerate() {
                dx.data_mut()[bc * s + a as usize] += g.data()[bc];
            }
            vec![Some(dx)]
        }
        LayerSpec::InputTransform { k } => {
            let x = &ins[0].data;
            let n = x.spatial();
            let mut dx = want[0].then(|| g.clone());
            let mut dm = want[1].then(|| zeros_like(1));
            for bi in 0..x.batch() {
                let gk = &g.item(bi)[..k * n];
                if let Some(dx) = dx.as_mut() {
                    let m = transform_matrix(ins[1].data.item(bi), k);
                    matmul(k, k, n, &m, gk, &mut dx.item_mut(bi)[..k * n], false);
                }
                if let Some(dm) = dm.as_mut() {
                    matmul_bt(k, n, k, &x.item(bi)[..k * n], gk, dm.item_mut(bi), false);
                }
            }
            vec![dx, dm]
        }
        LayerSpec::SetAbstraction { .. } => {
            let Cache::Group(groups) = cache else {
                unreachable!("group cache")
            };
            let x = &ins[0].data;
            let (b, c, n) = (x.batch(), x.channels(), x.spatial());
            let m = g.spatial();
            let mut dx = zeros_like(0);
            for bi in 0..b {
                let gi = g.item(bi);
                let idx = &groups[bi * m..(bi + 1) * m];
                let dst = dx.item_mut(bi);
                for ch in 0..c {
                    let row = &gi[(3 + ch) * m..(4 + ch) * m];
                    for (slot, &pi) in idx.iter().enumerate() {
                        dst[ch * n + pi as usize] += row[slot];
                    }
                }
            }
            vec![Some(dx)]
        }
        LayerSpec::GroupMax { .. } => {
            let Cache::Argmax(arg) = cache else {
                unreachable!("group max cache")
            };
            let x = &ins[0].data;
            let s = x.spatial();
            let groups = g.spatial();
            let mut dx = zeros_like(0);
            for (k, &a) in arg.iter().enumerate() {
                let bc = k / groups;
                dx.data_mut()[bc * s + a as usize] += g.data()[k];
            }
            vec![Some(dx)]
        }
        LayerSpec::FeaturePropagation { use_skip } => {
            let Cache::Interp { idx, w } = cache else {
                unreachable!("interp cache")
            };
            let fine = &ins[0].data;
            let coarse = &ins[1].data;
            let b = g.batch();
            let nf = g.spatial();
            let c1 = fine.channels();
            let (c2, nc) = (coarse.channels(), coarse.spatial());
            let skip = if use_skip { c1 } else { 0 };
            let mut dfine = (want[0] && use_skip).then(|| zeros_like(0));
            let mut dcoarse = want[1].then(|| zeros_like(1));
            for bi in 0..b {
                let gi = g.item(bi);
                if let Some(d) = dfine.as_mut() {
                    d.item_mut(bi).copy_from_slice(&gi[..c1 * nf]);
                }
                if let Some(d) = dcoarse.as_mut() {
                    let dst = d.item_mut(bi);
                    let bidx = &idx[bi * nf * 3..(bi + 1) * nf * 3];
                    let bw = &w[bi * nf * 3..(bi + 1) * nf * 3];
                    for ch in 0..c2 {
                        let row = &gi[(skip + ch) * nf..(skip + ch + 1) * nf];
                        let drow = &mut dst[ch * nc..(ch + 1) * nc];
                        for (i, &v) in row.iter().enumerate() {
                            for t in 0..3 {
                                drow[bidx[3 * i + t] as usize] += bw[3 * i + t] * v;
                            }
                        }
                    }
                }
            }
            vec![dfine, dcoarse]
        }
    })
}
