//! Sequential CNN description, parameter storage and whole-model passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    conv2d_backward, conv2d_forward, conv_out_len, fc_backward, fc_forward, maxpool_backward, maxpool_forward,
    pool_out_len, relu_backward, relu_forward,
};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Fc {
        out_features: usize,
    },
}

/// Network input. When `crop` is set, the centre `crop × crop` window of the
/// `height × width` input is fed to the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub crop: Option<usize>,
}

impl InputSpec {
    pub fn per_sample(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn cropped_dims(&self) -> (usize, usize) {
        match self.crop {
            Some(c) => (c, c),
            None => (self.height, self.width),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Per-sample activation shape after each layer, checking that every
    /// layer composes with its predecessor.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let (h, w) = self.input.cropped_dims();
        if self.input.channels == 0 || h == 0 || w == 0 {
            return Err(Error::Shape("input dimensions must be positive".into()));
        }
        if h > self.input.height || w > self.input.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} larger than input {}x{}",
                self.input.height, self.input.width
            )));
        }
        let mut shape = vec![self.input.channels, h, w];
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (*layer, shape.as_slice()) {
                (LayerSpec::Conv { out_channels, kernel, stride, pad }, &[_, h, w]) => {
                    if out_channels == 0 {
                        return Err(Error::Shape(format!("layer {i}: zero output channels")));
                    }
                    vec![
                        out_channels,
                        conv_out_len(h, kernel, stride, pad)?,
                        conv_out_len(w, kernel, stride, pad)?,
                    ]
                }
                (LayerSpec::MaxPool { kernel, stride }, &[c, h, w]) => {
                    vec![c, pool_out_len(h, kernel, stride)?, pool_out_len(w, kernel, stride)?]
                }
                (LayerSpec::Relu, s) => s.to_vec(),
                (LayerSpec::Fc { out_features }, _) if out_features > 0 => vec![out_features],
                (l, s) => {
                    return Err(Error::Shape(format!("layer {i} ({l:?}) cannot follow activation {s:?}")));
                }
            };
            shapes.push(shape.clone());
        }
        match self.layers.last() {
            Some(LayerSpec::Fc { out_features }) if *out_features == self.num_classes => Ok(shapes),
            _ => Err(Error::Shape(format!(
                "final layer must be fc with {} outputs",
                self.num_classes
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        self.infer_shapes().map(|_| ())
    }

    /// Shapes of the learnable tensors in layer order: weight then bias for
    /// each conv and fc layer.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.infer_shapes()?;
        let (h, w) = self.input.cropped_dims();
        let mut in_shape = vec![self.input.channels, h, w];
        let mut out = Vec::new();
        for (layer, after) in self.layers.iter().zip(&shapes) {
            match *layer {
                LayerSpec::Conv { out_channels, kernel, .. } => {
                    out.push(vec![out_channels, in_shape[0], kernel, kernel]);
                    out.push(vec![out_channels]);
                }
                LayerSpec::Fc { out_features } => {
                    out.push(vec![out_features, in_shape.iter().product()]);
                    out.push(vec![out_features]);
                }
                _ => {}
            }
            in_shape = after.clone();
        }
        Ok(out)
    }

    pub fn count(&self, pred: impl Fn(&LayerSpec) -> bool) -> usize {
        self.layers.iter().filter(|l| pred(l)).count()
    }
}

const ALEXNET_WIDTHS: [usize; 7] = [96, 256, 384, 384, 256, 4096, 4096];

/// AlexNet-shaped stack: five convolutions, three max pools, three fully
/// connected layers, ReLU after everything but the classifier. Channel
/// widths are AlexNet's scaled by `width_scale` (rounded up). The input is
/// `input_size` square and centre-cropped by the 227/256 ratio.
pub fn build_alexnet_like(
    num_classes: usize,
    width_scale: f64,
    input_channels: usize,
    input_size: usize,
) -> Result<ModelConfig> {
    if !(width_scale > 0.0 && width_scale <= 1.0) {
        return Err(Error::InvalidConfig(format!("width_scale {width_scale} outside (0, 1]")));
    }
    if num_classes < 2 {
        return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
    }
    let w: Vec<usize> = ALEXNET_WIDTHS
        .iter()
        .map(|&c| ((c as f64 * width_scale) - 1e-9).ceil().max(1.0) as usize)
        .collect();
    let conv = |out_channels, kernel, stride, pad| LayerSpec::Conv { out_channels, kernel, stride, pad };
    let pool = LayerSpec::MaxPool { kernel: 3, stride: 2 };
    let layers = vec![
        conv(w[0], 11, 4, 0),
        LayerSpec::Relu,
        pool,
        conv(w[1], 5, 1, 2),
        LayerSpec::Relu,
        pool,
        conv(w[2], 3, 1, 1),
        LayerSpec::Relu,
        conv(w[3], 3, 1, 1),
        LayerSpec::Relu,
        conv(w[4], 3, 1, 1),
        LayerSpec::Relu,
        pool,
        LayerSpec::Fc { out_features: w[5] },
        LayerSpec::Relu,
        LayerSpec::Fc { out_features: w[6] },
        LayerSpec::Relu,
        LayerSpec::Fc { out_features: num_classes },
    ];
    let crop = (input_size * 227 + 128) / 256;
    let cfg = ModelConfig {
        input: InputSpec {
            channels: input_channels,
            height: input_size,
            width: input_size,
            crop: (crop < input_size).then_some(crop),
        },
        layers,
        num_classes,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Per-layer values kept from the forward pass for backpropagation.
pub struct ForwardCache<T> {
    /// Input of each layer (after the crop for layer 0).
    inputs: Vec<Tensor<T>>,
    argmax: Vec<Option<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    /// Weight and bias of every conv/fc layer, in layer order.
    pub params: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// He-uniform weights (`U(-√(6/fan_in), √(6/fan_in))`) and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_shapes()?
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let limit = (6.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| T::from_f64(rng.random_range(-limit..limit))).collect();
                Tensor::from_vec(&shape, data).expect("shape product")
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = config.param_shapes()?;
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(Error::Shape("parameter shapes do not match the model config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn crop(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let spec = self.config.input;
        let n = match input.shape() {
            &[n, c, h, w] if c == spec.channels && h == spec.height && w == spec.width => n,
            s => {
                return Err(Error::Shape(format!(
                    "model expects [N, {}, {}, {}], got {s:?}",
                    spec.channels, spec.height, spec.width
                )))
            }
        };
        let Some(side) = spec.crop else {
            return Ok(input.clone());
        };
        let top = (spec.height - side) / 2;
        let left = (spec.width - side) / 2;
        let mut out = Vec::with_capacity(n * spec.channels * side * side);
        for plane in input.data().chunks(spec.height * spec.width) {
            for y in top..top + side {
                out.extend_from_slice(&plane[y * spec.width + left..y * spec.width + left + side]);
            }
        }
        Tensor::from_vec(&[n, spec.channels, side, side], out)
    }

    fn forward_impl(&self, input: &Tensor<T>, mut cache: Option<&mut ForwardCache<T>>) -> Result<Tensor<T>> {
        let mut x = self.crop(input)?;
        let mut p = 0;
        for layer in &self.config.layers {
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(x.clone());
            }
            let mut argmax = None;
            x = match *layer {
                LayerSpec::Conv { stride, pad, .. } => {
                    let y = conv2d_forward(&x, &self.params[p], &self.params[p + 1], stride, pad)?;
                    p += 2;
                    y
                }
                LayerSpec::Relu => relu_forward(&x),
                LayerSpec::MaxPool { kernel, stride } => {
                    let (y, a) = maxpool_forward(&x, kernel, stride)?;
                    argmax = Some(a);
                    y
                }
                LayerSpec::Fc { .. } => {
                    let n = x.shape()[0];
                    let flat = x.reshape(&[n, self.params[p].shape()[1]])?;
                    let y = fc_forward(&flat, &self.params[p], &self.params[p + 1])?;
                    p += 2;
                    y
                }
            };
            if let Some(c) = cache.as_deref_mut() {
                c.argmax.push(argmax);
            }
        }
        Ok(x)
    }

    /// Logits for a batch `[N, C, H, W]`.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_impl(input, None)
    }

    pub fn forward_train(&self, input: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.config.layers.len()),
            argmax: Vec::with_capacity(self.config.layers.len()),
        };
        let out = self.forward_impl(input, Some(&mut cache))?;
        Ok((out, cache))
    }

    /// Parameter gradients given the gradient of the loss w.r.t. the logits.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];
        let mut p = self.params.len();
        let mut g = grad_logits.clone();
        for (i, layer) in self.config.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            g = match *layer {
                LayerSpec::Conv { stride, pad, .. } => {
                    p -= 2;
                    let (gi, gw, gb) = conv2d_backward(input, &self.params[p], &g, stride, pad)?;
                    grads[p] = Some(gw);
                    grads[p + 1] = Some(gb);
                    gi
                }
                LayerSpec::Relu => relu_backward(input, &g)?,
                LayerSpec::MaxPool { .. } => {
                    let argmax = cache.argmax[i].as_ref().expect("pool layer caches argmax");
                    maxpool_backward(&g, argmax, input.shape())?
                }
                LayerSpec::Fc { .. } => {
                    p -= 2;
                    let n = input.shape()[0];
                    let flat = input.clone().reshape(&[n, self.params[p].shape()[1]])?;
                    let (gi, gw, gb) = fc_backward(&flat, &self.params[p], &g)?;
                    grads[p] = Some(gw);
                    grads[p + 1] = Some(gb);
                    gi.reshape(input.shape())?
                }
            };
        }
        Ok(grads.into_iter().map(|g| g.expect("every parameter visited")).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }
}
