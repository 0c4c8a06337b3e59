//! Executable network: a layer list with hand-written forward and backward
//! passes, plus the two shipped architectures (tinycnn for 28x28 single
//! channel inputs and a 20-layer residual net for 32x32 RGB).

use super::layers::{self, BnCache, BnState, Param, TAG_ACTIVATION, TAG_ERROR, TAG_WEIGHT};
use crate::error::{MlsError, Result};
use crate::format::Rounding;
use crate::quant::{MlsTensor, QuantConfig};
use crate::tensor::{RngStream, Tensor4};

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub id: u64,
    pub stride: usize,
    pub padding: usize,
    pub quantized: bool,
    pub weight: Param,
}

#[derive(Debug, Clone)]
pub struct FcLayer {
    pub weight: Param,
    pub bias: Param,
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub main: Vec<Layer>,
    pub shortcut: Vec<Layer>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(ConvLayer),
    BatchNorm(BnState),
    Relu,
    MaxPool2,
    GlobalAvgPool,
    FullyConnected(FcLayer),
    Residual(ResidualBlock),
}

pub enum Cache {
    QuantConv {
        qw: MlsTensor,
        qa: MlsTensor,
    },
    FloatConv {
        x: Tensor4,
    },
    BatchNorm(BnCache),
    Relu {
        pre: Tensor4,
    },
    MaxPool2 {
        argmax: Vec<usize>,
        in_dims: [usize; 4],
    },
    GlobalAvgPool {
        in_dims: [usize; 4],
    },
    Fc {
        x: Tensor4,
    },
    Residual {
        main: Vec<Cache>,
        shortcut: Vec<Cache>,
    },
}

/// Per-pass context: RNG coordinates, BN mode, and quantization behavior.
#[derive(Debug, Clone)]
pub struct PassCtx {
    pub seed: u64,
    pub step: u64,
    pub training: bool,
    pub quant: QuantConfig,
    /// skip quantization entirely (gradient-check / float-baseline mode)
    pub lossless: bool,
    /// dump conv operand tensors as blobs into this directory
    pub dump_dir: Option<std::path::PathBuf>,
}

impl PassCtx {
    /// Rounding used by this pass: the configured rule while training,
    /// nearest-even at evaluation time so reported accuracy is deterministic
    /// without an RNG coordinate.
    fn quant_cfg(&self) -> QuantConfig {
        let mut cfg = self.quant;
        if !self.training {
            cfg.rounding = Rounding::NearestEven;
        }
        cfg
    }

    fn dump(&self, name: &str, t: &Tensor4) {
        if let Some(dir) = &self.dump_dir {
            let _ = crate::tensor::write_tensor_blob_file(t, &dir.join(format!("{name}.mlst")));
        }
    }
}

impl Layer {
    fn forward(&mut self, x: &Tensor4, ctx: &PassCtx) -> Result<(Tensor4, Cache)> {
        match self {
            Layer::Conv(conv) => {
                if conv.quantized && !ctx.lossless {
                    let cfg = ctx.quant_cfg();
                    ctx.dump(&format!("layer{}_w", conv.id), &conv.weight.value);
                    ctx.dump(&format!("layer{}_a", conv.id), x);
                    let (z, qw, qa) = layers::quantconv_forward(
                        &conv.weight.value,
                        x,
                        &cfg,
                        conv.stride,
                        conv.padding,
                        &layers::operand_stream(ctx.seed, ctx.step, conv.id, TAG_WEIGHT),
                        &layers::operand_stream(ctx.seed, ctx.step, conv.id, TAG_ACTIVATION),
                    )?;
                    Ok((z, Cache::QuantConv { qw, qa }))
                } else {
                    let z = layers::conv2d(&conv.weight.value, x, conv.stride, conv.padding)?;
                    Ok((z, Cache::FloatConv { x: x.clone() }))
                }
            }
            Layer::BatchNorm(state) => {
                let (z, cache) = layers::bn_forward(x, state, ctx.training)?;
                Ok((z, Cache::BatchNorm(cache)))
            }
            Layer::Relu => Ok((layers::relu(x), Cache::Relu { pre: x.clone() })),
            Layer::MaxPool2 => {
                let (z, argmax) = layers::maxpool2_forward(x);
                Ok((
                    z,
                    Cache::MaxPool2 {
                        argmax,
                        in_dims: x.dims(),
                    },
                ))
            }
            Layer::GlobalAvgPool => Ok((
                layers::global_avg_pool_forward(x),
                Cache::GlobalAvgPool { in_dims: x.dims() },
            )),
            Layer::FullyConnected(fc) => {
                let z = layers::fc_forward(x, &fc.weight.value, &fc.bias.value)?;
                Ok((z, Cache::Fc { x: x.clone() }))
            }
            Layer::Residual(block) => {
                let (main_out, main_caches) = forward_stack(&mut block.main, x, ctx)?;
                let (short_out, short_caches) = forward_stack(&mut block.shortcut, x, ctx)?;
                Ok((
                    layers::ew_add(&main_out, &short_out)?,
                    Cache::Residual {
                        main: main_caches,
                        shortcut: short_caches,
                    },
                ))
            }
        }
    }

    /// Propagate the gradient, storing parameter gradients on the layer.
    /// Returns None when `need_input_grad` is false for a conv (first layer).
    fn backward(
        &mut self,
        dz: &Tensor4,
        cache: Cache,
        ctx: &PassCtx,
        need_input_grad: bool,
    ) -> Result<Option<Tensor4>> {
        match (self, cache) {
            (Layer::Conv(conv), Cache::QuantConv { qw, qa }) => {
                let cfg = ctx.quant_cfg();
                ctx.dump(&format!("layer{}_e", conv.id), dz);
                let (g, da, _qe) = layers::quantconv_backward(
                    dz,
                    &qw,
                    &qa,
                    &cfg,
                    conv.stride,
                    conv.padding,
                    &layers::operand_stream(ctx.seed, ctx.step, conv.id, TAG_ERROR),
                    need_input_grad,
                )?;
                conv.weight.grad = g;
                Ok(da)
            }
            (Layer::Conv(conv), Cache::FloatConv { x }) => {
                let [_, _, kh, kw] = conv.weight.value.dims();
                let [_, _, h, w] = x.dims();
                conv.weight.grad =
                    layers::conv2d_weight_grad(dz, &x, conv.stride, conv.padding, (kh, kw))?;
                if need_input_grad {
                    Ok(Some(layers::conv2d_input_grad(
                        dz,
                        &conv.weight.value,
                        conv.stride,
                        conv.padding,
                        (h, w),
                    )?))
                } else {
                    Ok(None)
                }
            }
            (Layer::BatchNorm(state), Cache::BatchNorm(cache)) => {
                let (dx, dgamma, dbeta) = layers::bn_backward(dz, &cache, state)?;
                let c = state.channels();
                state.gamma.grad = Tensor4::new([c, 1, 1, 1], dgamma)?;
                state.beta.grad = Tensor4::new([c, 1, 1, 1], dbeta)?;
                Ok(Some(dx))
            }
            (Layer::Relu, Cache::Relu { pre }) => Ok(Some(layers::relu_backward(dz, &pre))),
            (Layer::MaxPool2, Cache::MaxPool2 { argmax, in_dims }) => {
                Ok(Some(layers::maxpool2_backward(dz, &argmax, in_dims)))
            }
            (Layer::GlobalAvgPool, Cache::GlobalAvgPool { in_dims }) => {
                Ok(Some(layers::global_avg_pool_backward(dz, in_dims)))
            }
            (Layer::FullyConnected(fc), Cache::Fc { x }) => {
                let (dx, dw, db) = layers::fc_backward(dz, &x, &fc.weight.value)?;
                fc.weight.grad = dw;
                fc.bias.grad = db;
                Ok(Some(dx))
            }
            (Layer::Residual(block), Cache::Residual { main, shortcut }) => {
                let d_main = backward_stack(&mut block.main, dz, main, ctx)?;
                let d_short = backward_stack(&mut block.shortcut, dz, shortcut, ctx)?;
                Ok(Some(layers::ew_add(&d_main, &d_short)?))
            }
            _ => Err(MlsError::InvalidInput(
                "layer/cache mismatch in backward pass".into(),
            )),
        }
    }

    fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Param)) {
        match self {
            Layer::Conv(c) => f(&mut c.weight),
            Layer::BatchNorm(b) => {
                f(&mut b.gamma);
                f(&mut b.beta);
            }
            Layer::FullyConnected(fc) => {
                f(&mut fc.weight);
                f(&mut fc.bias);
            }
            Layer::Residual(block) => {
                for l in block.main.iter_mut().chain(block.shortcut.iter_mut()) {
                    l.visit_params_mut(f);
                }
            }
            _ => {}
        }
    }
}

fn forward_stack(
    layers_: &mut [Layer],
    x: &Tensor4,
    ctx: &PassCtx,
) -> Result<(Tensor4, Vec<Cache>)> {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(layers_.len());
    for layer in layers_.iter_mut() {
        let (next, cache) = layer.forward(&cur, ctx)?;
        caches.push(cache);
        cur = next;
    }
    Ok((cur, caches))
}

fn backward_stack(
    layers_: &mut [Layer],
    dout: &Tensor4,
    caches: Vec<Cache>,
    ctx: &PassCtx,
) -> Result<Tensor4> {
    let mut cur = dout.clone();
    for (layer, cache) in layers_.iter_mut().zip(caches).rev() {
        cur = layer
            .backward(&cur, cache, ctx, true)?
            .expect("inner layers always produce input gradients");
    }
    Ok(cur)
}

/// A sequential network (residual blocks nest their own branches).
pub struct Network {
    pub name: String,
    pub layers: Vec<Layer>,
    pub classes: usize,
}

impl Network {
    pub fn forward(&mut self, x: &Tensor4, ctx: &PassCtx) -> Result<(Tensor4, Vec<Cache>)> {
        forward_stack(&mut self.layers, x, ctx)
    }

    /// Backward from the logits gradient. The first layer's input gradient is
    /// not computed (there is nothing upstream of the data).
    pub fn backward(&mut self, dlogits: &Tensor4, caches: Vec<Cache>, ctx: &PassCtx) -> Result<()> {
        let mut cur = dlogits.clone();
        for (i, (layer, cache)) in self.layers.iter_mut().zip(caches).enumerate().rev() {
            match layer.backward(&cur, cache, ctx, i != 0)? {
                Some(dx) => cur = dx,
                None => {
                    debug_assert_eq!(i, 0);
                    break;
                }
            }
        }
        Ok(())
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut Param)) {
        for l in &mut self.layers {
            l.visit_params_mut(&mut f);
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params_mut(|p| n += p.value.len());
        n
    }
}

fn he_uniform(dims: [usize; 4], fan_in: usize, stream: &RngStream) -> Tensor4 {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|i| (stream.unit(i as u64) * 2.0 - 1.0) * bound)
        .collect();
    Tensor4::new(dims, data).unwrap()
}

struct Builder {
    seed: u64,
    next_id: u64,
}

impl Builder {
    fn conv(
        &mut self,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        padding: usize,
        quantized: bool,
    ) -> Layer {
        let id = self.next_id;
        self.next_id += 1;
        let stream = RngStream::new(self.seed, 0, 0x1000 + id);
        let weight = Param::new(
            format!("{name}.weight"),
            he_uniform([co, ci, k, k], ci * k * k, &stream),
        );
        Layer::Conv(ConvLayer {
            id,
            stride,
            padding,
            quantized,
            weight,
        })
    }

    fn fc(&mut self, name: &str, d_in: usize, d_out: usize) -> Layer {
        let id = self.next_id;
        self.next_id += 1;
        let stream = RngStream::new(self.seed, 0, 0x1000 + id);
        Layer::FullyConnected(FcLayer {
            weight: Param::new(
                format!("{name}.weight"),
                he_uniform([d_out, d_in, 1, 1], d_in, &stream),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor4::zeros([d_out, 1, 1, 1])),
        })
    }
}

/// Validate that every quantized conv's reduction windows fit the configured
/// intra-group accumulator; `input_hw` is the network input spatial size.
fn validate_acc_width(net: &Network, quant: &QuantConfig, input_hw: (usize, usize)) -> Result<()> {
    fn walk(
        layers_: &[Layer],
        quant: &QuantConfig,
        mut hw: (usize, usize),
    ) -> Result<(usize, usize)> {
        for l in layers_ {
            match l {
                Layer::Conv(c) => {
                    let [_, _, kh, kw] = c.weight.value.dims();
                    let out = (
                        (hw.0 + 2 * c.padding - kh) / c.stride + 1,
                        (hw.1 + 2 * c.padding - kw) / c.stride + 1,
                    );
                    if c.quantized {
                        // forward and input-grad reduce over the kernel window
                        // in one local accumulation; weight-grad maps tile into
                        // accumulator-sized chunks, so only the kernel binds
                        let wlen = (kh * kw) as u64;
                        if wlen > quant.max_window() {
                            return Err(MlsError::AccumulatorOverflow(format!(
                                "conv {} window {wlen} needs {} accumulator bits, have {}",
                                c.weight.name,
                                QuantConfig::required_acc_bits(quant.elem_fmt, wlen),
                                quant.intra_acc_bits
                            )));
                        }
                    }
                    hw = out;
                }
                Layer::MaxPool2 => hw = (hw.0 / 2, hw.1 / 2),
                Layer::GlobalAvgPool => hw = (1, 1),
                Layer::Residual(b) => {
                    let main_hw = walk(&b.main, quant, hw)?;
                    let short_hw = walk(&b.shortcut, quant, hw)?;
                    if !b.shortcut.is_empty() && main_hw != short_hw {
                        return Err(MlsError::ShapeMismatch(format!(
                            "residual branches disagree: {main_hw:?} vs {short_hw:?}"
                        )));
                    }
                    hw = main_hw;
                }
                _ => {}
            }
        }
        Ok(hw)
    }
    walk(&net.layers, quant, input_hw)?;
    Ok(())
}

/// Two conv blocks and a classifier head for 28x28 single-channel images.
/// The first conv and the fully connected head stay unquantized unless
/// `quantize_first` is set (the head never quantizes).
pub fn tinycnn(
    in_channels: usize,
    classes: usize,
    quant: &QuantConfig,
    quantize_first: bool,
    seed: u64,
) -> Result<Network> {
    let mut b = Builder { seed, next_id: 0 };
    let layers = vec![
        b.conv("conv1", in_channels, 16, 3, 1, 1, quantize_first),
        Layer::BatchNorm(BnState::new("bn1", 16)),
        Layer::Relu,
        Layer::MaxPool2,
        b.conv("conv2", 16, 16, 3, 1, 1, true),
        Layer::BatchNorm(BnState::new("bn2", 16)),
        Layer::Relu,
        Layer::MaxPool2,
        b.fc("fc", 16 * 7 * 7, classes),
    ];
    let net = Network {
        name: "tinycnn".into(),
        layers,
        classes,
    };
    validate_acc_width(&net, quant, (28, 28))?;
    Ok(net)
}

/// 20-layer residual network for 32x32 RGB images: a plain stem conv, three
/// stages of three residual blocks (16/32/64 channels), global average
/// pooling, and a plain classifier.
pub fn resnet20(
    classes: usize,
    quant: &QuantConfig,
    quantize_first: bool,
    seed: u64,
) -> Result<Network> {
    let mut b = Builder { seed, next_id: 0 };
    let mut layers = vec![
        b.conv("stem", 3, 16, 3, 1, 1, quantize_first),
        Layer::BatchNorm(BnState::new("stem.bn", 16)),
        Layer::Relu,
    ];
    let mut c_in = 16;
    for stage in 0..3 {
        let c_out = 16 << stage;
        for block in 0..3 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let name = format!("s{stage}b{block}");
            let main = vec![
                b.conv(&format!("{name}.conv1"), c_in, c_out, 3, stride, 1, true),
                Layer::BatchNorm(BnState::new(&format!("{name}.bn1"), c_out)),
                Layer::Relu,
                b.conv(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, true),
                Layer::BatchNorm(BnState::new(&format!("{name}.bn2"), c_out)),
            ];
            let shortcut = if stride != 1 || c_in != c_out {
                vec![
                    b.conv(&format!("{name}.down"), c_in, c_out, 1, stride, 0, true),
                    Layer::BatchNorm(BnState::new(&format!("{name}.down.bn"), c_out)),
                ]
            } else {
                Vec::new()
            };
            layers.push(Layer::Residual(ResidualBlock { main, shortcut }));
            layers.push(Layer::Relu);
            c_in = c_out;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(b.fc("fc", 64, classes));
    let net = Network {
        name: "resnet20-cifar".into(),
        layers,
        classes,
    };
    validate_acc_width(&net, quant, (32, 32))?;
    Ok(net)
}

/// Identity-shortcut residual blocks have no parameters on the shortcut, so an
/// empty stack behaves as the identity in both directions.
impl ResidualBlock {
    pub fn is_identity_shortcut(&self) -> bool {
        self.shortcut.is_empty()
    }
}
