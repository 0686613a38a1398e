use serde::{Deserialize, Serialize};

use super::ops::{conv_out_dim, Padding};
use crate::error::{Error, Result};

/// One layer of a sequential network with optional skip concatenations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    /// 2×2 stride-2 transposed convolution.
    Tconv { filters: usize },
    /// 2×2 stride-2 max pooling.
    Maxpool,
    Dense { units: usize },
    Relu,
    Sigmoid,
    Dropout { rate: f64 },
    Batchnorm,
    Flatten,
    /// Concatenates the output of layer `source` after the current channels.
    ConcatSkip { source: usize },
}

impl LayerSpec {
    pub fn conv3(filters: usize) -> Self {
        LayerSpec::Conv {
            filters,
            kernel: 3,
            stride: 1,
            padding: Padding::Same,
        }
    }

    pub fn conv1(filters: usize) -> Self {
        LayerSpec::Conv {
            filters,
            kernel: 1,
            stride: 1,
            padding: Padding::Valid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    Classification,
}

/// Per-sample shape `(channels, height, width)`.
pub type Shape3 = [usize; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input: Shape3,
    pub task: Task,
    pub layers: Vec<LayerSpec>,
}

/// Name and shape of one parameter tensor; `trainable` is false for
/// batchnorm running statistics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamShape {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl ParamShape {
    fn new(name: &'static str, shape: Vec<usize>, trainable: bool) -> Self {
        ParamShape { name, shape, trainable }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl NetworkSpec {
    /// Output shape of every layer, validating the whole stack.
    pub fn shapes(&self) -> Result<Vec<Shape3>> {
        let [c0, h0, w0] = self.input;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(Error::Shape(format!("input shape {:?} has a zero extent", self.input)));
        }
        let mut shapes: Vec<Shape3> = Vec::with_capacity(self.layers.len());
        let mut cur = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::Shape(format!("layer {i}: {msg}"));
            let [c, h, w] = cur;
            cur = match *layer {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    if filters == 0 {
                        return Err(bad("conv with zero filters".into()));
                    }
                    let (oh, _) = conv_out_dim(h, kernel, stride, padding).map_err(|e| bad(e.to_string()))?;
                    let (ow, _) = conv_out_dim(w, kernel, stride, padding).map_err(|e| bad(e.to_string()))?;
                    [filters, oh, ow]
                }
                LayerSpec::Tconv { filters } => {
                    if filters == 0 {
                        return Err(bad("tconv with zero filters".into()));
                    }
                    [filters, 2 * h, 2 * w]
                }
                LayerSpec::Maxpool => [c, h.div_ceil(2), w.div_ceil(2)],
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(bad("dense with zero units".into()));
                    }
                    [units, 1, 1]
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(bad(format!("dropout rate {rate} outside [0, 1)")));
                    }
                    cur
                }
                LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Batchnorm => cur,
                LayerSpec::Flatten => [c * h * w, 1, 1],
                LayerSpec::ConcatSkip { source } => {
                    let src = shapes
                        .get(source)
                        .ok_or_else(|| bad(format!("skip source {source} is not an earlier layer")))?;
                    if src[1] != h || src[2] != w {
                        return Err(bad(format!(
                            "skip source {source} is {}x{}, current is {h}x{w}",
                            src[1], src[2]
                        )));
                    }
                    [c + src[0], h, w]
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Validates the stack and the task-specific head.
    pub fn validate(&self) -> Result<Vec<Shape3>> {
        let shapes = self.shapes()?;
        let n = self.layers.len();
        if n < 2 || self.layers[n - 1] != LayerSpec::Sigmoid {
            return Err(Error::Shape("network must end in a sigmoid".into()));
        }
        let out = shapes[n - 1];
        match self.task {
            Task::Segmentation => {
                let head_ok = matches!(
                    self.layers[n - 2],
                    LayerSpec::Conv { filters: 1, kernel: 1, stride: 1, .. }
                );
                if !head_ok || out != [1, self.input[1], self.input[2]] {
                    return Err(Error::Shape(format!(
                        "segmentation head must be a 1x1 conv to one channel at input resolution, got {out:?}"
                    )));
                }
            }
            Task::Classification => {
                if self.layers[n - 2] != (LayerSpec::Dense { units: 1 }) {
                    return Err(Error::Shape("classification head must be dense(1) + sigmoid".into()));
                }
            }
        }
        Ok(shapes)
    }

    /// Parameter tensors of every layer, in layer order.
    pub fn param_shapes(&self) -> Result<Vec<Vec<ParamShape>>> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let [c, h, w] = if i == 0 { self.input } else { shapes[i - 1] };
                match *layer {
                    LayerSpec::Conv { filters, kernel, .. } => vec![
                        ParamShape::new("weight", vec![filters, c, kernel, kernel], true),
                        ParamShape::new("bias", vec![filters], true),
                    ],
                    LayerSpec::Tconv { filters } => vec![
                        ParamShape::new("weight", vec![c, filters, 2, 2], true),
                        ParamShape::new("bias", vec![filters], true),
                    ],
                    LayerSpec::Dense { units } => vec![
                        ParamShape::new("weight", vec![c * h * w, units], true),
                        ParamShape::new("bias", vec![units], true),
                    ],
                    LayerSpec::Batchnorm => vec![
                        ParamShape::new("gamma", vec![c], true),
                        ParamShape::new("beta", vec![c], true),
                        ParamShape::new("running_mean", vec![c], false),
                        ParamShape::new("running_var", vec![c], false),
                    ],
                    _ => Vec::new(),
                }
            })
            .collect())
    }

    pub fn flatten_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| *l == LayerSpec::Flatten)
    }

    /// Human-readable layer listing, one row per layer with activations
    /// folded into the preceding conv/dense row.
    pub fn describe(&self) -> Vec<String> {
        let [c, h, w] = self.input;
        let mut rows = vec![format!("Input: ({h}, {w}, {c})")];
        let mut i = 0;
        while i < self.layers.len() {
            let act = match self.layers.get(i + 1) {
                Some(LayerSpec::Relu) => Some("ReLU"),
                Some(LayerSpec::Sigmoid) => Some("Sigmoid"),
                _ => None,
            };
            let folds = matches!(self.layers[i], LayerSpec::Conv { .. } | LayerSpec::Dense { .. }) && act.is_some();
            let suffix = act.filter(|_| folds).map(|a| format!(", {a}")).unwrap_or_default();
            rows.push(match &self.layers[i] {
                LayerSpec::Conv { filters, kernel, stride, .. } => {
                    let s = if *stride == 1 { String::new() } else { format!(", stride {stride}") };
                    format!("Conv2D ({filters} filters, {kernel}x{kernel}{s}{suffix})")
                }
                LayerSpec::Tconv { filters } => format!("Conv2DTranspose ({filters} filters, 2x2, stride 2)"),
                LayerSpec::Maxpool => "MaxPooling2D (2x2)".to_string(),
                LayerSpec::Dense { units } => {
                    let noun = if *units == 1 { "neuron" } else { "neurons" };
                    format!("Dense ({units} {noun}{suffix})")
                }
                LayerSpec::Relu => "ReLU".to_string(),
                LayerSpec::Sigmoid => "Sigmoid".to_string(),
                LayerSpec::Dropout { rate } => format!("Dropout ({rate})"),
                LayerSpec::Batchnorm => "BatchNormalization".to_string(),
                LayerSpec::Flatten => "Flatten".to_string(),
                LayerSpec::ConcatSkip { source } => format!("Concatenate (skip from layer {source})"),
            });
            i += if folds { 2 } else { 1 };
        }
        rows
    }
}

/// Miniature U-Net: `depth` encoder levels of (conv3×3-ReLU)×2 + maxpool with
/// channels `base·2^l`, a bottleneck at `base·2^depth`, a mirrored decoder with
/// tconv upsampling and skip concatenation, and a 1×1 conv + sigmoid head.
pub fn build_mini_unet(depth: usize, base: usize, input: Shape3) -> Result<NetworkSpec> {
    let [_, h, w] = input;
    if depth == 0 || base == 0 {
        return Err(Error::param("unet", "depth and base channels must be >= 1"));
    }
    let div = 1usize << depth;
    if h % div != 0 || w % div != 0 {
        return Err(Error::Shape(format!(
            "input {h}x{w} is not divisible by 2^{depth} = {div}"
        )));
    }
    let mut layers = Vec::new();
    let mut skips = Vec::with_capacity(depth);
    for level in 0..depth {
        let ch = base << level;
        layers.extend([LayerSpec::conv3(ch), LayerSpec::Relu, LayerSpec::conv3(ch), LayerSpec::Relu]);
        skips.push(layers.len() - 1);
        layers.push(LayerSpec::Maxpool);
    }
    let bottom = base << depth;
    layers.extend([LayerSpec::conv3(bottom), LayerSpec::Relu, LayerSpec::conv3(bottom), LayerSpec::Relu]);
    for level in (0..depth).rev() {
        let ch = base << level;
        layers.extend([
            LayerSpec::Tconv { filters: ch },
            LayerSpec::ConcatSkip { source: skips[level] },
            LayerSpec::conv3(ch),
            LayerSpec::Relu,
            LayerSpec::conv3(ch),
            LayerSpec::Relu,
        ]);
    }
    layers.extend([LayerSpec::conv1(1), LayerSpec::Sigmoid]);
    let spec = NetworkSpec {
        input,
        task: Task::Segmentation,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

/// Miniature CNN classifier: per width (conv3×3-ReLU, optional batchnorm,
/// maxpool, dropout 0.3), then flatten, dense-ReLU, dropout 0.5, dense(1)-sigmoid.
pub fn build_mini_cnn(input: Shape3, widths: &[usize], dense: usize, batchnorm: bool) -> Result<NetworkSpec> {
    let [_, h, w] = input;
    if widths.is_empty() || widths.contains(&0) || dense == 0 {
        return Err(Error::param("cnn", "widths must be non-empty and all widths and dense units >= 1"));
    }
    let div = 1usize << widths.len();
    if h % div != 0 || w % div != 0 {
        return Err(Error::Shape(format!(
            "input {h}x{w} is not divisible by 2^{} = {div}",
            widths.len()
        )));
    }
    let mut layers = Vec::new();
    for &ch in widths {
        layers.extend([LayerSpec::conv3(ch), LayerSpec::Relu]);
        if batchnorm {
            layers.push(LayerSpec::Batchnorm);
        }
        layers.extend([LayerSpec::Maxpool, LayerSpec::Dropout { rate: 0.3 }]);
    }
    layers.extend([
        LayerSpec::Flatten,
        LayerSpec::Dense { units: dense },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: 0.5 },
        LayerSpec::Dense { units: 1 },
        LayerSpec::Sigmoid,
    ]);
    let spec = NetworkSpec {
        input,
        task: Task::Classification,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unet_shape_algebra() {
        let spec = build_mini_unet(3, 16, [1, 64, 64]).unwrap();
        let shapes = spec.validate().unwrap();
        assert_eq!(*shapes.last().unwrap(), [1, 64, 64]);
        let skip_res: Vec<usize> = spec
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::ConcatSkip { source } => Some(shapes[*source][1]),
                _ => None,
            })
            .collect();
        let mut sorted = skip_res.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![16, 32, 64]);
        assert!(build_mini_unet(3, 16, [1, 60, 64]).is_err());
    }

    #[test]
    fn cnn_shape_algebra() {
        let spec = build_mini_cnn([1, 32, 32], &[16, 32, 64, 128], 64, false).unwrap();
        let shapes = spec.shapes().unwrap();
        let fi = spec.flatten_index().unwrap();
        assert_eq!(shapes[fi], [512, 1, 1]);
        assert!(build_mini_cnn([1, 24, 32], &[16, 32, 64, 128], 64, false).is_err());
    }

    #[test]
    fn rejects_bad_stacks() {
        let bad_skip = NetworkSpec {
            input: [1, 8, 8],
            task: Task::Classification,
            layers: vec![LayerSpec::Maxpool, LayerSpec::ConcatSkip { source: 3 }],
        };
        assert!(bad_skip.shapes().is_err());
        let res_mismatch = NetworkSpec {
            input: [1, 8, 8],
            task: Task::Classification,
            layers: vec![LayerSpec::Relu, LayerSpec::Maxpool, LayerSpec::ConcatSkip { source: 0 }],
        };
        assert!(res_mismatch.shapes().is_err());
        let bad_rate = NetworkSpec {
            input: [1, 8, 8],
            task: Task::Classification,
            layers: vec![LayerSpec::Dropout { rate: 1.0 }],
        };
        assert!(bad_rate.shapes().is_err());
        let no_head = NetworkSpec {
            input: [1, 8, 8],
            task: Task::Classification,
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { units: 2 }, LayerSpec::Sigmoid],
        };
        assert!(no_head.validate().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = build_mini_cnn([1, 32, 32], &[4, 8], 16, true).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<NetworkSpec>(&text).unwrap(), spec);
    }
}
