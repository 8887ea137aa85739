//! Central finite-difference gradient oracle and the per-layer-type test
//! networks it is run against.

#![allow(dead_code)]

use ctscreen_core::nn::{
    LayerSpec, Layout, Mode, NetInput, Network, NetworkSpec, PointCoords, SpecBuilder, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Elements probed per tensor; larger tensors are subsampled.
const MAX_PROBES: usize = 48;

/// Scalar objective `sum(output * probe)`, so `probe` is the output gradient.
fn objective(net: &mut Network<f64>, input: &NetInput<f64>, probe: &[f64], mode: Mode) -> f64 {
    let trace = net.forward(input, mode).expect("forward");
    trace
        .output()
        .data()
        .iter()
        .zip(probe)
        .map(|(a, b)| a * b)
        .sum()
}

/// Norm-wise relative error between analytic and numeric gradients over
/// the probed elements.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn probes(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= MAX_PROBES {
        (0..len).collect()
    } else {
        (0..MAX_PROBES).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Returns `(tensor name, relative error)` for the input features and every
/// parameter tensor.
pub fn check_gradients(
    spec: NetworkSpec,
    input: NetInput<f64>,
    mode: Mode,
    seed: u64,
) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut net = Network::<f64>::new(spec, seed).expect("network");
    if mode == Mode::Eval {
        let state: Vec<(String, Tensor<f64>)> = net
            .state()
            .into_iter()
            .map(|(name, t)| {
                let t = if name.ends_with("running_var") {
                    let d = t.data().iter().map(|_| rng.random_range(0.5..2.0)).collect();
                    Tensor::from_vec(t.shape(), d).unwrap()
                } else if name.ends_with("running_mean") {
                    let d = t.data().iter().map(|_| rng.random_range(-0.5..0.5)).collect();
                    Tensor::from_vec(t.shape(), d).unwrap()
                } else {
                    t
                };
                (name, t)
            })
            .collect();
        net.load_state(&state).unwrap();
    }
    // Perturb affine parameters away from their identity initialisation.
    for p in net.params_mut() {
        if p.name.ends_with("gamma") || p.name.ends_with("beta") {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let trace = net.forward(&input, mode).expect("forward");
    let probe: Vec<f64> = (0..trace.output().len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let grad_out = Tensor::from_vec(trace.output().shape(), probe.clone()).unwrap();
    net.zero_grad();
    let dx = net
        .backward(&trace, grad_out, true)
        .expect("backward")
        .expect("input gradient");
    drop(trace);

    let mut results = Vec::new();
    let idx = probes(input.features.len(), &mut rng);
    let mut numeric = Vec::with_capacity(idx.len());
    for &i in &idx {
        let mut plus = input.clone();
        plus.features.data_mut()[i] += FD_STEP;
        let mut minus = input.clone();
        minus.features.data_mut()[i] -= FD_STEP;
        let f1 = objective(&mut net, &plus, &probe, mode);
        let f0 = objective(&mut net, &minus, &probe, mode);
        numeric.push((f1 - f0) / (2.0 * FD_STEP));
    }
    let analytic: Vec<f64> = idx.iter().map(|&i| dx.data()[i]).collect();
    results.push(("input".to_string(), rel_err(&analytic, &numeric)));

    for pi in 0..net.params().len() {
        let name = net.params()[pi].name.clone();
        let grad = net.params()[pi].grad.clone();
        let idx = probes(grad.len(), &mut rng);
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = net.params()[pi].value.data()[i];
            net.params_mut()[pi].value.data_mut()[i] = orig + FD_STEP;
            let f1 = objective(&mut net, &input, &probe, mode);
            net.params_mut()[pi].value.data_mut()[i] = orig - FD_STEP;
            let f0 = objective(&mut net, &input, &probe, mode);
            net.params_mut()[pi].value.data_mut()[i] = orig;
            numeric.push((f1 - f0) / (2.0 * FD_STEP));
        }
        let analytic: Vec<f64> = idx.iter().map(|&i| grad.data()[i]).collect();
        results.push((name, rel_err(&analytic, &numeric)));
    }
    results
}

pub const LAYER_KINDS: [&str; 15] = [
    "conv3d",
    "deconv3d",
    "relu",
    "batchnorm_train",
    "batchnorm_eval",
    "maxpool",
    "upsample",
    "concat",
    "add",
    "shared_mlp",
    "max_aggregate",
    "input_transform",
    "set_abstraction",
    "group_max",
    "feature_propagation",
];

fn dense_input(rng: &mut ChaCha8Rng, b: usize, c: usize, dims: [usize; 3]) -> NetInput<f64> {
    let n = b * c * dims.iter().product::<usize>();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    NetInput::dense(Tensor::from_vec(&[b, c, dims[0], dims[1], dims[2]], data).unwrap())
}

fn point_input(rng: &mut ChaCha8Rng, b: usize, c: usize, n: usize) -> NetInput<f64> {
    let data = (0..b * c * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let xyz = (0..b * n * 3).map(|_| rng.random_range(0.0..6.0)).collect();
    NetInput {
        features: Tensor::from_vec(&[b, c, n], data).unwrap(),
        coords: Some(PointCoords::new(n, xyz)),
    }
}

fn input_node(b: &mut SpecBuilder, channels: usize, layout: Layout) -> usize {
    b.add("input", LayerSpec::Input { channels, layout }, &[])
}

fn conv(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> LayerSpec {
    LayerSpec::Conv3d {
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride,
        padding,
        bias,
    }
}

fn mlp(cin: usize, cout: usize) -> LayerSpec {
    LayerSpec::SharedMlp {
        in_channels: cin,
        out_channels: cout,
        bias: true,
    }
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> [usize; 3] {
    [
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
    ]
}

/// A small random network exercising `kind`, with a matching random input
/// and the mode to check it in.
pub fn layer_case(kind: &str, seed: u64) -> (NetworkSpec, NetInput<f64>, Mode) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = SpecBuilder::new();
    let batch = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let mut mode = Mode::Train;
    let input = match kind {
        "conv3d" => {
            let kernel = [1, 2, 3][rng.random_range(0..3)];
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..=1);
            let d = dims(&mut rng, kernel.max(2), 6);
            let x = input_node(&mut b, c, Layout::Dense);
            let cout = rng.random_range(1..=3);
            b.add("conv", conv(c, cout, kernel, stride, padding, rng.random_bool(0.5)), &[x]);
            dense_input(&mut rng, batch, c, d)
        }
        "deconv3d" => {
            let d = dims(&mut rng, 2, 6);
            let x = input_node(&mut b, c, Layout::Dense);
            let mid = rng.random_range(1..=3);
            let down = b.add("down", conv(c, mid, 3, 2, 1, false), &[x]);
            let cout = rng.random_range(1..=3);
            b.add(
                "deconv",
                LayerSpec::Deconv3d {
                    in_channels: mid,
                    out_channels: cout,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    bias: rng.random_bool(0.5),
                },
                &[down, x],
            );
            dense_input(&mut rng, batch, c, d)
        }
        "relu" => {
            let x = input_node(&mut b, c, Layout::Dense);
            b.add("relu", LayerSpec::Relu, &[x]);
            {
                let d = dims(&mut rng, 1, 5);
                dense_input(&mut rng, batch, c, d)
            }
        }
        "batchnorm_train" | "batchnorm_eval" => {
            if kind == "batchnorm_eval" {
                mode = Mode::Eval;
            }
            let x = input_node(&mut b, c, Layout::Dense);
            b.add("bn", LayerSpec::BatchNorm { channels: c }, &[x]);
            let d = dims(&mut rng, 2, 4);
            dense_input(&mut rng, batch, c, d)
        }
        "maxpool" => {
            let x = input_node(&mut b, c, Layout::Dense);
            b.add("pool", LayerSpec::MaxPool3d { size: 2 }, &[x]);
            {
                let d = dims(&mut rng, 2, 6);
                dense_input(&mut rng, batch, c, d)
            }
        }
        "upsample" => {
            let x = input_node(&mut b, c, Layout::Dense);
            let p = b.add("pool", LayerSpec::MaxPool3d { size: 2 }, &[x]);
            let w = b.add("mix", conv(c, c, 1, 1, 0, true), &[p]);
            b.add("up", LayerSpec::Upsample, &[w, x]);
            {
                let d = dims(&mut rng, 2, 6);
                dense_input(&mut rng, batch, c, d)
            }
        }
        "concat" => {
            if rng.random_bool(0.5) {
                let x = input_node(&mut b, c, Layout::Dense);
                let cout = rng.random_range(1..=3);
                let y = b.add("conv", conv(c, cout, 1, 1, 0, true), &[x]);
                b.add("cat", LayerSpec::Concat, &[y, x]);
                {
                let d = dims(&mut rng, 1, 4);
                dense_input(&mut rng, batch, c, d)
            }
            } else {
                let x = input_node(&mut b, c, Layout::Points);
                let g = b.add("max", LayerSpec::MaxAggregate, &[x]);
                let g = b.add("fc", mlp(c, 2), &[g]);
                b.add("cat", LayerSpec::Concat, &[g, x]);
                let n = rng.random_range(2..=20);
                point_input(&mut rng, batch, c, n)
            }
        }
        "add" => {
            let x = input_node(&mut b, c, Layout::Dense);
            let y = b.add("conv", conv(c, c, 3, 1, 1, true), &[x]);
            b.add("add", LayerSpec::Add, &[y, x]);
            {
                let d = dims(&mut rng, 1, 4);
                dense_input(&mut rng, batch, c, d)
            }
        }
        "shared_mlp" => {
            let x = input_node(&mut b, c, Layout::Points);
            let cout = rng.random_range(1..=4);
            b.add("mlp", mlp(c, cout), &[x]);
            let n = rng.random_range(1..=30);
            point_input(&mut rng, batch, c, n)
        }
        "max_aggregate" => {
            let x = input_node(&mut b, c, Layout::Points);
            b.add("max", LayerSpec::MaxAggregate, &[x]);
            let n = rng.random_range(1..=30);
            point_input(&mut rng, batch, c, n)
        }
        "input_transform" => {
            let k = rng.random_range(1..=3);
            let c = k + rng.random_range(0..=2);
            let x = input_node(&mut b, c, Layout::Points);
            let g = b.add("max", LayerSpec::MaxAggregate, &[x]);
            let m = b.add("fc", mlp(c, k * k), &[g]);
            b.add("apply", LayerSpec::InputTransform { k }, &[x, m]);
            let n = rng.random_range(1..=20);
            point_input(&mut rng, batch, c, n)
        }
        "set_abstraction" | "group_max" => {
            let n = rng.random_range(4..=24);
            let npoint = rng.random_range(1..=n.min(6));
            let nsample = rng.random_range(1..=4);
            let x = input_node(&mut b, c, Layout::Points);
            let g = b.add(
                "sa",
                LayerSpec::SetAbstraction {
                    npoint,
                    radius: rng.random_range(1.0..4.0),
                    nsample,
                },
                &[x],
            );
            if kind == "group_max" {
                let h = b.add("mlp", mlp(c + 3, 2), &[g]);
                b.add("gmax", LayerSpec::GroupMax { nsample }, &[h]);
            }
            point_input(&mut rng, batch, c, n)
        }
        "feature_propagation" => {
            let n = rng.random_range(4..=24);
            let npoint = rng.random_range(1..=n.min(6));
            let nsample = rng.random_range(1..=3);
            let x = input_node(&mut b, c, Layout::Points);
            let g = b.add(
                "sa",
                LayerSpec::SetAbstraction {
                    npoint,
                    radius: rng.random_range(1.0..4.0),
                    nsample,
                },
                &[x],
            );
            let h = b.add("mlp", mlp(c + 3, 2), &[g]);
            let coarse = b.add("gmax", LayerSpec::GroupMax { nsample }, &[h]);
            b.add(
                "fp",
                LayerSpec::FeaturePropagation {
                    use_skip: rng.random_bool(0.5),
                },
                &[x, coarse],
            );
            point_input(&mut rng, batch, c, n)
        }
        other => panic!("unknown layer kind {other}"),
    };
    (b.finish(kind, 0, 1), input, mode)
}
