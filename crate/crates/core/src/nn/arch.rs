//! Builders for the four segmentation architectures.

use serde::{Deserialize, Serialize};

use super::spec::{LayerSpec, Layout, NetworkSpec, SpecBuilder};
use crate::error::{Error, Result};

/// Level width: `fvols * 2^l`, saturating after the fifth level.
pub fn level_width(fvols: usize, level: usize) -> usize {
    fvols << level.min(4)
}

fn conv(b: &mut SpecBuilder, name: &str, x: usize, cin: usize, cout: usize) -> usize {
    b.add(
        name,
        LayerSpec::Conv3d {
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: false,
        },
        &[x],
    )
}

/// conv -> ReLU -> batch norm
fn single_conv(b: &mut SpecBuilder, name: &str, x: usize, cin: usize, cout: usize) -> usize {
    let c = conv(b, &format!("{name}.conv"), x, cin, cout);
    let r = b.add(format!("{name}.relu"), LayerSpec::Relu, &[c]);
    b.add(
        format!("{name}.bn"),
        LayerSpec::BatchNorm { channels: cout },
        &[r],
    )
}

fn double_conv(
    b: &mut SpecBuilder,
    name: &str,
    x: usize,
    cin: usize,
    cout: usize,
    encoder: bool,
) -> usize {
    let mid = if encoder { (cout / 2).max(cin) } else { cout };
    let h = single_conv(b, &format!("{name}.1"), x, cin, mid);
    single_conv(b, &format!("{name}.2"), h, mid, cout)
}

/// Three convolutions; the first one's output is added back before the
/// final activation.
fn residual_block(b: &mut SpecBuilder, name: &str, x: usize, cin: usize, cout: usize) -> usize {
    let h1 = single_conv(b, &format!("{name}.1"), x, cin, cout);
    let h2 = single_conv(b, &format!("{name}.2"), h1, cout, cout);
    let c3 = conv(b, &format!("{name}.3.conv"), h2, cout, cout);
    let n3 = b.add(
        format!("{name}.3.bn"),
        LayerSpec::BatchNorm { channels: cout },
        &[c3],
    );
    let sum = b.add(format!("{name}.add"), LayerSpec::Add, &[n3, h1]);
    b.add(format!("{name}.relu"), LayerSpec::Relu, &[sum])
}

fn check_levels(levels: usize, fvols: usize, in_channels: usize, classes: usize) -> Result<()> {
    if levels < 2 {
        return Err(Error::InvalidArgument(format!(
            "U-Net needs at least 2 levels, got {levels}"
        )));
    }
    if fvols == 0 || in_channels == 0 || classes == 0 {
        return Err(Error::InvalidArgument(
            "fvols, input channels and classes must be positive".into(),
        ));
    }
    Ok(())
}

fn classifier(b: &mut SpecBuilder, x: usize, cin: usize, classes: usize) -> usize {
    b.add(
        "classifier",
        LayerSpec::Conv3d {
            in_channels: cin,
            out_channels: classes,
            kernel: 1,
            stride: 1,
            padding: 0,
            bias: true,
        },
        &[x],
    )
}

/// Plain 3D U-Net with `levels` resolution levels (`levels - 1` poolings),
/// nearest-neighbour upsampling and concatenation skips.
pub fn build_unet3d(
    levels: usize,
    fvols: usize,
    in_channels: usize,
    classes: usize,
) -> Result<NetworkSpec> {
    check_levels(levels, fvols, in_channels, classes)?;
    let mut b = SpecBuilder::new();
    let mut x = b.add(
        "input",
        LayerSpec::Input {
            channels: in_channels,
            layout: Layout::Dense,
        },
        &[],
    );
    let mut skips = Vec::with_capacity(levels);
    let mut cin = in_channels;
    for l in 0..levels {
        if l > 0 {
            x = b.add(format!("enc{l}.pool"), LayerSpec::MaxPool3d { size: 2 }, &[x]);
        }
        let w = level_width(fvols, l);
        x = double_conv(&mut b, &format!("enc{l}"), x, cin, w, true);
        skips.push(x);
        cin = w;
    }
    for l in (0..levels - 1).rev() {
        let w = level_width(fvols, l);
        let up = b.add(format!("dec{l}.up"), LayerSpec::Upsample, &[x, skips[l]]);
        let cat = b.add(format!("dec{l}.cat"), LayerSpec::Concat, &[skips[l], up]);
        x = double_conv(&mut b, &format!("dec{l}"), cat, w + cin, w, false);
        cin = w;
    }
    classifier(&mut b, x, cin, classes);
    Ok(b.finish("unet3d", classes, 1 << (levels - 1)))
}

/// Residual 3D U-Net: three-convolution residual blocks, learned transposed
/// convolution upsampling and additive skips.
pub fn build_residual_unet3d(
    levels: usize,
    fvols: usize,
    in_channels: usize,
    classes: usize,
) -> Result<NetworkSpec> {
    check_levels(levels, fvols, in_channels, classes)?;
    let mut b = SpecBuilder::new();
    let mut x = b.add(
        "input",
        LayerSpec::Input {
            channels: in_channels,
            layout: Layout::Dense,
        },
        &[],
    );
    let mut skips = Vec::with_capacity(levels);
    let mut cin = in_channels;
    for l in 0..levels {
        if l > 0 {
            x = b.add(format!("enc{l}.pool"), LayerSpec::MaxPool3d { size: 2 }, &[x]);
        }
        let w = level_width(fvols, l);
        x = residual_block(&mut b, &format!("enc{l}"), x, cin, w);
        skips.push(x);
        cin = w;
    }
    for l in (0..levels - 1).rev() {
        let w = level_width(fvols, l);
        let up = b.add(
            format!("dec{l}.deconv"),
            LayerSpec::Deconv3d {
                in_channels: cin,
                out_channels: w,
                kernel: 3,
                stride: 2,
                padding: 1,
                bias: true,
            },
            &[x, skips[l]],
        );
        let join = b.add(format!("dec{l}.join"), LayerSpec::Add, &[skips[l], up]);
        x = residual_block(&mut b, &format!("dec{l}"), join, w, w);
        cin = w;
    }
    classifier(&mut b, x, cin, classes);
    Ok(b.finish("res_unet3d", classes, 1 << (levels - 1)))
}

fn mlp(b: &mut SpecBuilder, name: &str, x: usize, cin: usize, cout: usize) -> usize {
    b.add(
        name,
        LayerSpec::SharedMlp {
            in_channels: cin,
            out_channels: cout,
            bias: true,
        },
        &[x],
    )
}

/// linear -> batch norm -> ReLU
fn mlp_bn_relu(b: &mut SpecBuilder, name: &str, x: usize, cin: usize, cout: usize) -> usize {
    let h = mlp(b, &format!("{name}.fc"), x, cin, cout);
    let n = b.add(
        format!("{name}.bn"),
        LayerSpec::BatchNorm { channels: cout },
        &[h],
    );
    b.add(format!("{name}.relu"), LayerSpec::Relu, &[n])
}

/// Transformation-predicting subnetwork; outputs `k*k` channels at a single
/// position (the residual from identity).
fn transform_net(b: &mut SpecBuilder, name: &str, x: usize, cin: usize, k: usize) -> usize {
    let h = mlp_bn_relu(b, &format!("{name}.c1"), x, cin, 64);
    let h = mlp_bn_relu(b, &format!("{name}.c2"), h, 64, 128);
    let h = mlp_bn_relu(b, &format!("{name}.c3"), h, 128, 1024);
    let g = b.add(format!("{name}.max"), LayerSpec::MaxAggregate, &[h]);
    let h = mlp_bn_relu(b, &format!("{name}.f1"), g, 1024, 512);
    let h = mlp_bn_relu(b, &format!("{name}.f2"), h, 512, 256);
    mlp(b, &format!("{name}.f3"), h, 256, k * k)
}

/// PointNet segmentation network on `n x in_channels` point rows whose
/// first three channels are coordinates.
pub fn build_pointnet(in_channels: usize, classes: usize) -> Result<NetworkSpec> {
    if in_channels < 3 || classes == 0 {
        return Err(Error::InvalidArgument(format!(
            "PointNet needs at least 3 input channels and one class, got {in_channels}/{classes}"
        )));
    }
    let mut b = SpecBuilder::new();
    let x = b.add(
        "input",
        LayerSpec::Input {
            channels: in_channels,
            layout: Layout::Points,
        },
        &[],
    );
    let t = transform_net(&mut b, "stn", x, in_channels, 3);
    let x = b.add("stn.apply", LayerSpec::InputTransform { k: 3 }, &[x, t]);
    let h = mlp_bn_relu(&mut b, "feat.c1", x, in_channels, 64);
    let t = transform_net(&mut b, "fstn", h, 64, 64);
    let pointfeat = b.add("fstn.apply", LayerSpec::InputTransform { k: 64 }, &[h, t]);
    let h = mlp_bn_relu(&mut b, "feat.c2", pointfeat, 64, 128);
    let h = mlp(&mut b, "feat.c3.fc", h, 128, 1024);
    let h = b.add("feat.c3.bn", LayerSpec::BatchNorm { channels: 1024 }, &[h]);
    let global = b.add("feat.max", LayerSpec::MaxAggregate, &[h]);
    let cat = b.add("seg.cat", LayerSpec::Concat, &[global, pointfeat]);
    let h = mlp_bn_relu(&mut b, "seg.c1", cat, 1088, 512);
    let h = mlp_bn_relu(&mut b, "seg.c2", h, 512, 256);
    let h = mlp_bn_relu(&mut b, "seg.c3", h, 256, 128);
    mlp(&mut b, "seg.out", h, 128, classes);
    Ok(b.finish("pointnet", classes, 1))
}

/// Sampling/grouping hyperparameters of the four set-abstraction levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pointnet2Config {
    pub npoint: [usize; 4],
    /// Ball-query radii in voxels.
    pub radius: [f64; 4],
    pub nsample: usize,
}

impl Default for Pointnet2Config {
    fn default() -> Self {
        Pointnet2Config {
            npoint: [1024, 256, 64, 16],
            radius: [4.0, 8.0, 16.0, 32.0],
            nsample: 32,
        }
    }
}

impl Pointnet2Config {
    pub fn validate(&self) -> Result<()> {
        if self.nsample == 0 || self.npoint.contains(&0) {
            return Err(Error::InvalidArgument(
                "PointNet++ npoint and nsample must be positive".into(),
            ));
        }
        if self.npoint.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument(format!(
                "PointNet++ npoint must be non-increasing, got {:?}",
                self.npoint
            )));
        }
        if self.radius.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidArgument("ball-query radii must be positive".into()));
        }
        Ok(())
    }
}

/// PointNet++ segmentation network: four set-abstraction levels, four
/// feature-propagation levels, per-point head.
pub fn build_pointnet2(
    in_channels: usize,
    classes: usize,
    cfg: &Pointnet2Config,
) -> Result<NetworkSpec> {
    cfg.validate()?;
    if in_channels == 0 || classes == 0 {
        return Err(Error::InvalidArgument(
            "PointNet++ needs input channels and classes".into(),
        ));
    }
    const SA: [[usize; 3]; 4] = [[32, 32, 64], [64, 64, 128], [128, 128, 256], [256, 256, 512]];
    let mut b = SpecBuilder::new();
    let x = b.add(
        "input",
        LayerSpec::Input {
            channels: in_channels,
            layout: Layout::Points,
        },
        &[],
    );
    let mut levels = vec![(x, in_channels)];
    for (i, widths) in SA.iter().enumerate() {
        let (src, c) = *levels.last().expect("nonempty");
        let name = format!("sa{}", i + 1);
        let mut h = b.add(
            format!("{name}.group"),
            LayerSpec::SetAbstraction {
                npoint: cfg.npoint[i],
                radius: cfg.radius[i],
                nsample: cfg.nsample,
            },
            &[src],
        );
        let mut cin = c + 3;
        for (j, &w) in widths.iter().enumerate() {
            h = mlp_bn_relu(&mut b, &format!("{name}.m{j}"), h, cin, w);
            cin = w;
        }
        let pooled = b.add(
            format!("{name}.max"),
            LayerSpec::GroupMax {
                nsample: cfg.nsample,
            },
            &[h],
        );
        levels.push((pooled, cin));
    }
    const FP: [&[usize]; 4] = [&[128, 128, 128], &[256, 128], &[256, 256], &[256, 256]];
    let (mut coarse, mut cc) = levels[4];
    for lvl in (0..4).rev() {
        let (fine, fc) = levels[lvl];
        let use_skip = lvl > 0;
        let name = format!("fp{}", lvl + 1);
        let mut h = b.add(
            format!("{name}.interp"),
            LayerSpec::FeaturePropagation { use_skip },
            &[fine, coarse],
        );
        let mut cin = cc + if use_skip { fc } else { 0 };
        for (j, &w) in FP[lvl].iter().enumerate() {
            h = mlp_bn_relu(&mut b, &format!("{name}.m{j}"), h, cin, w);
            cin = w;
        }
        coarse = h;
        cc = cin;
    }
    let h = mlp_bn_relu(&mut b, "head.c1", coarse, cc, 128);
    mlp(&mut b, "head.out", h, 128, classes);
    Ok(b.finish("pointnet2", classes, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::Shape;

    fn millions(n: u64) -> f64 {
        n as f64 / 1e6
    }

    #[test]
    fn unet_param_counts() {
        let p = |l, f| millions(build_unet3d(l, f, 1, 4).unwrap().count_params());
        assert!((p(4, 32) - 4.081).abs() < 0.001, "{}", p(4, 32));
        assert!((p(6, 32) - 51.863).abs() < 0.001, "{}", p(6, 32));
        assert!((p(6, 64) - 207.434).abs() < 0.001, "{}", p(6, 64));
    }

    #[test]
    fn residual_unet_param_counts() {
        let p = |l, f| millions(build_residual_unet3d(l, f, 1, 4).unwrap().count_params());
        assert!((p(4, 32) - 8.770).abs() < 0.001, "{}", p(4, 32));
        assert!((p(6, 32) - 84.869).abs() < 0.001, "{}", p(6, 32));
        assert!((p(6, 64) - 339.441).abs() < 0.001, "{}", p(6, 64));
    }

    #[test]
    fn point_model_param_counts() {
        let pn = millions(build_pointnet(4, 4).unwrap().count_params());
        assert!((pn - 3.528).abs() < 0.001, "{pn}");
        let pn2 = build_pointnet2(7, 4, &Pointnet2Config::default()).unwrap();
        assert!((millions(pn2.count_params()) - 0.967).abs() < 0.001);
    }

    #[test]
    fn unet_level_widths() {
        let spec = build_unet3d(4, 32, 1, 4).unwrap();
        let shapes = spec
            .infer_shapes(Shape::Dense {
                channels: 1,
                dims: [16, 16, 16],
            })
            .unwrap();
        for l in 0..4 {
            let i = spec
                .nodes
                .iter()
                .position(|n| n.name == format!("enc{l}.2.bn"))
                .unwrap();
            assert_eq!(shapes[i].channels(), 32 << l);
        }
        assert_eq!(
            shapes[spec.output],
            Shape::Dense {
                channels: 4,
                dims: [16, 16, 16]
            }
        );
    }

    #[test]
    fn pointnet_feature_flow() {
        let spec = build_pointnet(4, 4).unwrap();
        let shapes = spec
            .infer_shapes(Shape::Points { channels: 4, n: 50 })
            .unwrap();
        let width = |name: &str| {
            let i = spec.nodes.iter().position(|n| n.name == name).unwrap();
            shapes[i]
        };
        assert_eq!(width("fstn.apply"), Shape::Points { channels: 64, n: 50 });
        assert_eq!(width("feat.max"), Shape::Points { channels: 1024, n: 1 });
        assert_eq!(width("seg.cat"), Shape::Points { channels: 1088, n: 50 });
        assert_eq!(shapes[spec.output], Shape::Points { channels: 4, n: 50 });
    }

    #[test]
    fn pointnet2_rejects_too_few_points() {
        let spec = build_pointnet2(7, 4, &Pointnet2Config::default()).unwrap();
        assert!(spec
            .infer_shapes(Shape::Points { channels: 7, n: 512 })
            .is_err());
        let shapes = spec
            .infer_shapes(Shape::Points {
                channels: 7,
                n: 2048,
            })
            .unwrap();
        assert_eq!(shapes[spec.output], Shape::Points { channels: 4, n: 2048 });
    }

    #[test]
    fn rejects_single_level() {
        assert!(build_unet3d(1, 8, 1, 4).is_err());
        assert!(build_residual_unet3d(1, 8, 1, 4).is_err());
    }
}
