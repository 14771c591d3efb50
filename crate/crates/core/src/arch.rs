//! Architecture descriptors and the named model builders.
//!
//! An [`Architecture`] is a flat list of layer descriptors (residual blocks
//! nest their body). It carries no weights; parameter tensors live in a
//! `ParamStore` keyed by the names assigned here.

use crate::error::{Error, Result};

/// Shortcut branch of a residual block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Shortcut {
    Identity,
    /// Parameter-free projection: subsample spatially by `stride` (taking the
    /// top-left element of each window) and zero-pad channels up to `out_ch`.
    PadChannels { stride: usize, out_ch: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Conv2d {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    Relu,
    AvgPool2d {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Residual {
        name: String,
        body: Vec<Layer>,
        shortcut: Shortcut,
    },
}

/// Shape of an activation as it flows through the network (without batch dim).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl ActShape {
    pub fn elems(&self) -> usize {
        match *self {
            ActShape::Chw(c, h, w) => c * h * w,
            ActShape::Flat(f) => f,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub id: String,
    /// (channels, height, width) of one input sample.
    pub input_shape: (usize, usize, usize),
    pub classes: usize,
    pub layers: Vec<Layer>,
}

/// Kind of a parameter tensor, used to route weight decay and pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    /// Weight decay applies to conv/linear weights only, not BN or biases.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight)
    }
}

/// Declaration of one parameter tensor: (name, shape, kind).
pub type ParamDecl = (String, Vec<usize>, ParamKind);

pub fn compute_out_shape(layer: &Layer, input: ActShape) -> Result<ActShape> {
    match layer {
        Layer::Conv2d {
            name,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            ..
        } => {
            let ActShape::Chw(c, h, w) = input else {
                return Err(Error::Shape(format!("conv {name} expects spatial input")));
            };
            if c != *in_ch {
                return Err(Error::Shape(format!(
                    "conv {name} expects {in_ch} input channels, got {c}"
                )));
            }
            if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                return Err(Error::Shape(format!("conv {name}: kernel larger than input")));
            }
            let oh = (h + 2 * pad - kernel) / stride + 1;
            let ow = (w + 2 * pad - kernel) / stride + 1;
            Ok(ActShape::Chw(*out_ch, oh, ow))
        }
        Layer::BatchNorm { name, channels } => {
            let ActShape::Chw(c, _, _) = input else {
                return Err(Error::Shape(format!("batchnorm {name} expects spatial input")));
            };
            if c != *channels {
                return Err(Error::Shape(format!(
                    "batchnorm {name} expects {channels} channels, got {c}"
                )));
            }
            Ok(input)
        }
        Layer::Relu => Ok(input),
        Layer::AvgPool2d { kernel, stride } => {
            let ActShape::Chw(c, h, w) = input else {
                return Err(Error::Shape("avgpool expects spatial input".into()));
            };
            if h < *kernel || w < *kernel {
                return Err(Error::Shape("avgpool kernel larger than input".into()));
            }
            Ok(ActShape::Chw(c, (h - kernel) / stride + 1, (w - kernel) / stride + 1))
        }
        Layer::GlobalAvgPool => {
            let ActShape::Chw(c, _, _) = input else {
                return Err(Error::Shape("global avgpool expects spatial input".into()));
            };
            Ok(ActShape::Flat(c))
        }
        Layer::Flatten => Ok(ActShape::Flat(input.elems())),
        Layer::Linear {
            name,
            in_features,
            out_features,
            ..
        } => {
            let got = match input {
                ActShape::Flat(f) => f,
                ActShape::Chw(c, h, w) if h == 1 && w == 1 => c,
                other => {
                    return Err(Error::Shape(format!(
                        "linear {name} expects flat input, got {other:?}"
                    )))
                }
            };
            if got != *in_features {
                return Err(Error::Shape(format!(
                    "linear {name} expects {in_features} features, got {got}"
                )));
            }
            Ok(ActShape::Flat(*out_features))
        }
        Layer::Residual { name, body, shortcut } => {
            let mut s = input;
            for l in body {
                s = compute_out_shape(l, s)?;
            }
            let short = match shortcut {
                Shortcut::Identity => input,
                Shortcut::PadChannels { stride, out_ch } => {
                    let ActShape::Chw(_, h, w) = input else {
                        return Err(Error::Shape(format!("residual {name}: spatial input required")));
                    };
                    ActShape::Chw(*out_ch, (h - 1) / stride + 1, (w - 1) / stride + 1)
                }
            };
            if s != short {
                return Err(Error::Shape(format!(
                    "residual {name}: body output {s:?} does not match shortcut {short:?}"
                )));
            }
            Ok(s)
        }
    }
}

impl Architecture {
    /// Propagate shapes through every layer; errors if they do not compose.
    pub fn validate(&self) -> Result<ActShape> {
        let (c, h, w) = self.input_shape;
        let mut s = ActShape::Chw(c, h, w);
        for l in &self.layers {
            s = compute_out_shape(l, s)?;
        }
        if s != ActShape::Flat(self.classes) {
            return Err(Error::Shape(format!(
                "network output {s:?} does not match {} classes",
                self.classes
            )));
        }
        Ok(s)
    }

    /// Declarations of every parameter tensor in deterministic order.
    pub fn param_decls(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        collect_decls(&self.layers, &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_decls()
            .iter()
            .filter(|(_, _, kind)| kind.trainable())
            .map(|(_, shape, _)| shape.iter().product::<usize>())
            .sum()
    }
}

fn collect_decls(layers: &[Layer], out: &mut Vec<ParamDecl>) {
    for layer in layers {
        match layer {
            Layer::Conv2d {
                name,
                in_ch,
                out_ch,
                kernel,
                bias,
                ..
            } => {
                out.push((
                    format!("{name}.weight"),
                    vec![*out_ch, *in_ch, *kernel, *kernel],
                    ParamKind::ConvWeight,
                ));
                if *bias {
                    out.push((format!("{name}.bias"), vec![*out_ch], ParamKind::Bias));
                }
            }
            Layer::BatchNorm { name, channels } => {
                out.push((format!("{name}.gamma"), vec![*channels], ParamKind::BnGamma));
                out.push((format!("{name}.beta"), vec![*channels], ParamKind::BnBeta));
                out.push((
                    format!("{name}.running_mean"),
                    vec![*channels],
                    ParamKind::BnRunningMean,
                ));
                out.push((
                    format!("{name}.running_var"),
                    vec![*channels],
                    ParamKind::BnRunningVar,
                ));
            }
            Layer::Linear {
                name,
                in_features,
                out_features,
                bias,
            } => {
                out.push((
                    format!("{name}.weight"),
                    vec![*out_features, *in_features],
                    ParamKind::LinearWeight,
                ));
                if *bias {
                    out.push((format!("{name}.bias"), vec![*out_features], ParamKind::Bias));
                }
            }
            Layer::Residual { body, .. } => collect_decls(body, out),
            _ => {}
        }
    }
}

fn conv3x3(name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Layer {
    Layer::Conv2d {
        name: name.to_string(),
        in_ch,
        out_ch,
        kernel: 3,
        stride,
        pad: 1,
        bias: false,
    }
}

fn bn(name: &str, channels: usize) -> Layer {
    Layer::BatchNorm {
        name: name.to_string(),
        channels,
    }
}

/// CIFAR-style residual network with 6n+2 layers and parameter-free
/// pad-channel shortcuts at stage transitions.
fn resnet_cifar(id: &str, blocks_per_stage: usize, classes: usize) -> Architecture {
    let widths = [16usize, 32, 64];
    let mut layers = vec![conv3x3("conv1", 3, 16, 1), bn("bn1", 16), Layer::Relu];
    let mut in_ch = 16;
    for (stage, &width) in widths.iter().enumerate() {
        for block in 0..blocks_per_stage {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let name = format!("layer{}.{}", stage + 1, block);
            let body = vec![
                conv3x3(&format!("{name}.conv1"), in_ch, width, stride),
                bn(&format!("{name}.bn1"), width),
                Layer::Relu,
                conv3x3(&format!("{name}.conv2"), width, width, 1),
                bn(&format!("{name}.bn2"), width),
            ];
            let shortcut = if stride != 1 || in_ch != width {
                Shortcut::PadChannels { stride, out_ch: width }
            } else {
                Shortcut::Identity
            };
            layers.push(Layer::Residual { name, body, shortcut });
            in_ch = width;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear {
        name: "fc".into(),
        in_features: 64,
        out_features: classes,
        bias: true,
    });
    Architecture {
        id: id.to_string(),
        input_shape: (3, 32, 32),
        classes,
        layers,
    }
}

/// VGG-16 style CIFAR network: conv/BN/ReLU stacks with 2×2 average-pool
/// downsampling and a single linear classifier head.
fn vgg16_cifar(classes: usize) -> Architecture {
    let cfg: &[&[usize]] = &[
        &[64, 64],
        &[128, 128],
        &[256, 256, 256],
        &[512, 512, 512],
        &[512, 512, 512],
    ];
    let mut layers = Vec::new();
    let mut in_ch = 3;
    let mut idx = 0usize;
    for stage in cfg {
        for &width in *stage {
            idx += 1;
            layers.push(conv3x3(&format!("conv{idx}"), in_ch, width, 1));
            layers.push(bn(&format!("bn{idx}"), width));
            layers.push(Layer::Relu);
            in_ch = width;
        }
        layers.push(Layer::AvgPool2d { kernel: 2, stride: 2 });
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear {
        name: "fc".into(),
        in_features: 512,
        out_features: classes,
        bias: true,
    });
    Architecture {
        id: "vgg16-cifar".into(),
        input_shape: (3, 32, 32),
        classes,
        layers,
    }
}

/// Three-linear-layer MLP over 2 input features (synthetic 2-D datasets).
fn mlp_small(classes: usize) -> Architecture {
    Architecture {
        id: "mlp-small".into(),
        input_shape: (2, 1, 1),
        classes,
        layers: vec![
            Layer::Flatten,
            Layer::Linear {
                name: "fc1".into(),
                in_features: 2,
                out_features: 64,
                bias: true,
            },
            Layer::Relu,
            Layer::Linear {
                name: "fc2".into(),
                in_features: 64,
                out_features: 64,
                bias: true,
            },
            Layer::Relu,
            Layer::Linear {
                name: "fc3".into(),
                in_features: 64,
                out_features: classes,
                bias: true,
            },
        ],
    }
}

/// Build one of the named architectures.
pub fn build_architecture(name: &str, classes: usize) -> Result<Architecture> {
    let arch = match name {
        "mlp-small" => mlp_small(classes),
        "vgg16-cifar" => vgg16_cifar(classes),
        "resnet20" => resnet_cifar("resnet20", 3, classes),
        "resnet56" => resnet_cifar("resnet56", 9, classes),
        "resnet110" => resnet_cifar("resnet110", 18, classes),
        other => return Err(Error::Config(format!("unknown architecture '{other}'"))),
    };
    arch.validate()?;
    Ok(arch)
}
