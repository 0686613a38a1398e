use rand::Rng;

use super::ops::{self, Activation, BatchNormCache, ConvGeometry, Mode};
use super::spec::{LayerSpec, NetworkSpec, Shape3};
use super::tensor::Tensor4;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

/// A validated spec with concrete parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<Shape3>,
    params: Vec<Vec<Param>>,
}

enum Cache {
    None,
    Pool(Vec<usize>),
    Dropout(Option<Vec<f64>>),
    BatchNorm(Option<BatchNormCache>),
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardPass {
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    pub activations: Vec<Tensor4>,
    caches: Vec<Cache>,
    /// Train-mode batchnorm running statistics, applied by [`Network::apply_bn_updates`].
    pub bn_updates: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl ForwardPass {
    pub fn output(&self) -> &Tensor4 {
        self.activations.last().expect("activations always hold the input")
    }
}

pub struct Gradients {
    /// Same layout as the network parameters; non-trainable entries are zero.
    pub params: Vec<Vec<Vec<f64>>>,
    pub input: Tensor4,
}

impl Network {
    /// Glorot-uniform weights, zero biases, unit batchnorm scale.
    pub fn init<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        let shapes = spec.shapes()?;
        let layout = spec.param_shapes()?;
        let mut params = Vec::with_capacity(layout.len());
        for (layer, shapes_i) in spec.layers.iter().zip(layout) {
            let (fan_in, fan_out) = match (layer, shapes_i.first().map(|p| &p.shape)) {
                (LayerSpec::Conv { .. }, Some(s)) => (s[1] * s[2] * s[3], s[0] * s[2] * s[3]),
                (LayerSpec::Tconv { .. }, Some(s)) => (s[0] * 4, s[1] * 4),
                (LayerSpec::Dense { .. }, Some(s)) => (s[0], s[1]),
                _ => (0, 0),
            };
            let limit = if fan_in + fan_out > 0 {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            } else {
                0.0
            };
            let layer_params = shapes_i
                .into_iter()
                .map(|ps| {
                    let n = ps.len();
                    let data = match ps.name {
                        "weight" => (0..n).map(|_| rng.gen_range(-limit..=limit)).collect(),
                        "gamma" | "running_var" => vec![1.0; n],
                        _ => vec![0.0; n],
                    };
                    Param {
                        name: ps.name,
                        shape: ps.shape,
                        data,
                        trainable: ps.trainable,
                    }
                })
                .collect();
            params.push(layer_params);
        }
        Ok(Network { spec, shapes, params })
    }

    /// Builds a network from explicit parameter values, checked against the spec.
    pub fn from_params(spec: NetworkSpec, values: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let shapes = spec.shapes()?;
        let layout = spec.param_shapes()?;
        if values.len() != layout.len() {
            return Err(Error::Bundle(format!(
                "{} parameter groups for {} layers",
                values.len(),
                layout.len()
            )));
        }
        let mut params = Vec::with_capacity(layout.len());
        for (i, (shapes_i, vals_i)) in layout.into_iter().zip(values).enumerate() {
            if shapes_i.len() != vals_i.len() {
                return Err(Error::Bundle(format!("layer {i}: wrong number of parameter tensors")));
            }
            let mut group = Vec::with_capacity(shapes_i.len());
            for (ps, data) in shapes_i.into_iter().zip(vals_i) {
                if data.len() != ps.len() {
                    return Err(Error::Bundle(format!(
                        "layer {i} {}: {} values for shape {:?}",
                        ps.name,
                        data.len(),
                        ps.shape
                    )));
                }
                group.push(Param {
                    name: ps.name,
                    shape: ps.shape,
                    data,
                    trainable: ps.trainable,
                });
            }
            params.push(group);
        }
        Ok(Network { spec, shapes, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn shapes(&self) -> &[Shape3] {
        &self.shapes
    }

    pub fn params(&self) -> &[Vec<Param>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Param>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(|p| p.data.len()).sum()
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for p in self.params.iter_mut().flatten() {
            p.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn apply_bn_updates(&mut self, updates: Vec<(usize, Vec<f64>, Vec<f64>)>) {
        for (layer, mean, var) in updates {
            self.params[layer][2].data = mean;
            self.params[layer][3].data = var;
        }
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let [c, h, w] = self.spec.input;
        if [x.c, x.h, x.w] != [c, h, w] {
            return Err(Error::Shape(format!(
                "input {:?} does not match network input {:?}",
                x.shape(),
                self.spec.input
            )));
        }
        if x.n == 0 {
            return Err(Error::Empty("forward on an empty batch".into()));
        }
        Ok(())
    }

    /// Runs layers `0..=last` (all layers when `last` is `None`).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Tensor4,
        mode: Mode,
        rng: &mut R,
        last: Option<usize>,
    ) -> Result<ForwardPass> {
        self.check_input(x)?;
        x.check_finite("network input")?;
        let end = last.map_or(self.spec.layers.len(), |l| (l + 1).min(self.spec.layers.len()));
        let mut activations = Vec::with_capacity(end + 1);
        activations.push(x.clone());
        let mut caches = Vec::with_capacity(end);
        let mut bn_updates = Vec::new();
        for i in 0..end {
            let input = &activations[i];
            let params = &self.params[i];
            let (out, cache) = match self.spec.layers[i] {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let g = ConvGeometry::new((input.c, input.h, input.w), filters, (kernel, kernel), stride, padding)?;
                    (ops::conv2d_forward(input, &params[0].data, &params[1].data, &g)?, Cache::None)
                }
                LayerSpec::Tconv { filters } => (
                    ops::tconv2d_forward(input, &params[0].data, &params[1].data, filters)?,
                    Cache::None,
                ),
                LayerSpec::Maxpool => {
                    let (out, route) = ops::maxpool2d_forward(input);
                    (out, Cache::Pool(route))
                }
                LayerSpec::Dense { .. } => (
                    ops::dense_forward(input, &params[0].data, &params[1].data)?,
                    Cache::None,
                ),
                LayerSpec::Relu => (ops::activation_forward(input, Activation::Relu), Cache::None),
                LayerSpec::Sigmoid => (ops::activation_forward(input, Activation::Sigmoid), Cache::None),
                LayerSpec::Dropout { rate } => {
                    let (out, scale) = ops::dropout_forward(input, rate, mode, rng)?;
                    (out, Cache::Dropout(scale))
                }
                LayerSpec::Batchnorm => {
                    let mut rm = params[2].data.clone();
                    let mut rv = params[3].data.clone();
                    let (out, cache) =
                        ops::batchnorm_forward(input, &params[0].data, &params[1].data, &mut rm, &mut rv, mode)?;
                    if mode == Mode::Train {
                        bn_updates.push((i, rm, rv));
                    }
                    (out, Cache::BatchNorm(cache))
                }
                LayerSpec::Flatten => {
                    let len = input.sample_len();
                    (Tensor4::from_vec(input.n, len, 1, 1, input.data.clone())?, Cache::None)
                }
                LayerSpec::ConcatSkip { source } => {
                    let skip = &activations[source + 1];
                    (concat_channels(input, skip)?, Cache::None)
                }
            };
            activations.push(out);
            caches.push(cache);
        }
        Ok(ForwardPass {
            activations,
            caches,
            bn_updates,
        })
    }

    /// Inference-mode forward over the whole network.
    pub fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut pass = self.forward(x, Mode::Infer, &mut rng, None)?;
        Ok(pass.activations.pop().expect("non-empty activations"))
    }

    /// Backpropagates `dy`, the gradient with respect to the output of layer
    /// `top`, down to the input.
    pub fn backward(&self, pass: &ForwardPass, top: usize, dy: Tensor4) -> Result<Gradients> {
        if top >= pass.caches.len() {
            return Err(Error::Shape(format!(
                "backward from layer {top} but the forward pass ran {} layers",
                pass.caches.len()
            )));
        }
        if dy.shape() != pass.activations[top + 1].shape() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} for layer output {:?}",
                dy.shape(),
                pass.activations[top + 1].shape()
            )));
        }
        let mut grads: Vec<Vec<Vec<f64>>> = self
            .params
            .iter()
            .map(|g| g.iter().map(|p| vec![0.0; p.data.len()]).collect())
            .collect();
        let mut pending: Vec<Option<Tensor4>> = vec![None; top + 1];
        let mut dy = dy;
        for i in (0..=top).rev() {
            if let Some(extra) = pending[i].take() {
                for (a, b) in dy.data.iter_mut().zip(&extra.data) {
                    *a += b;
                }
            }
            let x = &pass.activations[i];
            let params = &self.params[i];
            dy = match (&self.spec.layers[i], &pass.caches[i]) {
                (
                    LayerSpec::Conv {
                        filters,
                        kernel,
                        stride,
                        padding,
                    },
                    _,
                ) => {
                    let g = ConvGeometry::new((x.c, x.h, x.w), *filters, (*kernel, *kernel), *stride, *padding)?;
                    let r = ops::conv2d_backward(x, &params[0].data, &g, &dy)?;
                    grads[i][0] = r.dw;
                    grads[i][1] = r.db;
                    r.dx
                }
                (LayerSpec::Tconv { filters }, _) => {
                    let r = ops::tconv2d_backward(x, &params[0].data, *filters, &dy)?;
                    grads[i][0] = r.dw;
                    grads[i][1] = r.db;
                    r.dx
                }
                (LayerSpec::Dense { units }, _) => {
                    let r = ops::dense_backward(x, &params[0].data, *units, &dy)?;
                    grads[i][0] = r.dw;
                    grads[i][1] = r.db;
                    r.dx
                }
                (LayerSpec::Maxpool, Cache::Pool(route)) => ops::maxpool2d_backward(x.shape(), route, &dy),
                (LayerSpec::Relu, _) => {
                    ops::activation_backward(x, &pass.activations[i + 1], Activation::Relu, &dy)
                }
                (LayerSpec::Sigmoid, _) => {
                    ops::activation_backward(x, &pass.activations[i + 1], Activation::Sigmoid, &dy)
                }
                (LayerSpec::Dropout { .. }, Cache::Dropout(scale)) => ops::dropout_backward(scale.as_deref(), &dy),
                (LayerSpec::Batchnorm, Cache::BatchNorm(Some(cache))) => {
                    let (dx, dgamma, dbeta) = ops::batchnorm_backward(cache, &params[0].data, &dy);
                    grads[i][0] = dgamma;
                    grads[i][1] = dbeta;
                    dx
                }
                (LayerSpec::Batchnorm, Cache::BatchNorm(None)) => batchnorm_infer_backward(x, params, &dy, &mut grads[i]),
                (LayerSpec::Flatten, _) => x.with_data(dy.data),
                (LayerSpec::ConcatSkip { source }, _) => {
                    let (cur, skip) = split_channels(&dy, x.c)?;
                    match &mut pending[*source] {
                        Some(acc) => acc.data.iter_mut().zip(&skip.data).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(skip),
                    }
                    cur
                }
                _ => return Err(Error::Shape(format!("layer {i}: cache does not match layer kind"))),
            };
        }
        Ok(Gradients { params: grads, input: dy })
    }
}

fn batchnorm_infer_backward(x: &Tensor4, params: &[Param], dy: &Tensor4, grads: &mut [Vec<f64>]) -> Tensor4 {
    let (c, hw) = (x.c, x.h * x.w);
    let mut dx = dy.with_data(vec![0.0; dy.len()]);
    for n in 0..x.n {
        for ch in 0..c {
            let inv = 1.0 / (params[3].data[ch] + ops::BN_EPS).sqrt();
            let base = (n * c + ch) * hw;
            for i in base..base + hw {
                let xhat = (x.data[i] - params[2].data[ch]) * inv;
                grads[0][ch] += dy.data[i] * xhat;
                grads[1][ch] += dy.data[i];
                dx.data[i] = dy.data[i] * params[0].data[ch] * inv;
            }
        }
    }
    dx
}

/// `[a, b]` along the channel axis.
fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if a.n != b.n || a.h != b.h || a.w != b.w {
        return Err(Error::Shape(format!("concat {:?} with {:?}", a.shape(), b.shape())));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..a.n {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    Tensor4::from_vec(a.n, a.c + b.c, a.h, a.w, data)
}

fn split_channels(x: &Tensor4, first: usize) -> Result<(Tensor4, Tensor4)> {
    let hw = x.h * x.w;
    let (la, lb) = (first * hw, (x.c - first) * hw);
    let mut a = Vec::with_capacity(x.n * la);
    let mut b = Vec::with_capacity(x.n * lb);
    for n in 0..x.n {
        let s = x.sample(n);
        a.extend_from_slice(&s[..la]);
        b.extend_from_slice(&s[la..]);
    }
    Ok((
        Tensor4::from_vec(x.n, first, x.h, x.w, a)?,
        Tensor4::from_vec(x.n, x.c - first, x.h, x.w, b)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::ops::Padding;
    use crate::tinynet::spec::{build_mini_unet, Task};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unet_forward_shapes_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = build_mini_unet(2, 4, [1, 16, 16]).unwrap();
        let net = Network::init(spec, &mut rng).unwrap();
        let x = Tensor4::from_vec(2, 1, 16, 16, (0..512).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let y = net.infer(&x).unwrap();
        assert_eq!(y.shape(), [2, 1, 16, 16]);
        assert!(y.data.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(net.infer(&Tensor4::zeros(1, 1, 8, 8)).is_err());
    }

    #[test]
    fn skip_gradient_reaches_source() {
        let spec = NetworkSpec {
            input: [1, 4, 4],
            task: Task::Segmentation,
            layers: vec![
                LayerSpec::Conv {
                    filters: 2,
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Same,
                },
                LayerSpec::ConcatSkip { source: 0 },
                LayerSpec::conv1(1),
                LayerSpec::Sigmoid,
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Network::init(spec, &mut rng).unwrap();
        let x = Tensor4::from_vec(1, 1, 4, 4, (0..16).map(|v| v as f64 / 16.0).collect()).unwrap();
        let pass = net.forward(&x, Mode::Train, &mut rng, None).unwrap();
        assert_eq!(pass.activations[2].c, 4);
        let dy = pass.output().with_data(vec![1.0; 16]);
        let g = net.backward(&pass, 3, dy).unwrap();
        assert!(g.params[0][0].iter().any(|&v| v != 0.0));
    }
}
