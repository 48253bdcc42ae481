//! CNN layer taxonomy, shape-chain validation, and forward inference.
//!
//! Bias terms are modeled as their own layers: they have their own algebraic
//! relationship between input, output and parameters, and are detected and
//! recovered independently of the convolution or dense layer they follow.

use crate::error::{MilrError, Result};
use crate::linalg::{conv2d, conv_axis, matmul, Padding};
use crate::rng::SplitMix64;
use crate::tensor::{Dtype, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasAttach {
    Conv,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Input { shape: Vec<usize> },
    Conv2D { filters: Tensor, stride: usize, padding: Padding },
    Bias { params: Tensor, attach: BiasAttach },
    Dense { params: Tensor },
    ReLU,
    MaxPool { size: usize },
    Flatten,
}

impl LayerSpec {
    pub fn params(&self) -> Option<&Tensor> {
        match self {
            LayerSpec::Conv2D { filters, .. } => Some(filters),
            LayerSpec::Bias { params, .. } => Some(params),
            LayerSpec::Dense { params } => Some(params),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            LayerSpec::Conv2D { filters, .. } => Some(filters),
            LayerSpec::Bias { params, .. } => Some(params),
            LayerSpec::Dense { params } => Some(params),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Input { .. } => "input",
            LayerSpec::Conv2D { .. } => "conv2d",
            LayerSpec::Bias { .. } => "bias",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::ReLU => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Flatten => "flatten",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    dtype: Dtype,
}

fn infer_out_shape(idx: usize, spec: &LayerSpec, in_shape: &[usize]) -> Result<Vec<usize>> {
    let fail = |msg: String| MilrError::Construction { layer: idx, msg };
    match spec {
        LayerSpec::Input { shape } => Ok(shape.clone()),
        LayerSpec::Conv2D { filters, stride, padding } => {
            let fsh = filters.shape();
            if in_shape.len() != 3 {
                return Err(fail(format!("conv2d needs [h,w,z] input, got {in_shape:?}")));
            }
            if fsh.len() != 4 || fsh[0] != fsh[1] {
                return Err(fail(format!("conv2d filters must be [f,f,z,y], got {fsh:?}")));
            }
            if fsh[2] != in_shape[2] {
                return Err(fail(format!(
                    "filter channels {} != input channels {}",
                    fsh[2], in_shape[2]
                )));
            }
            let (gh, _, _) = conv_axis(in_shape[0], fsh[0], *stride, *padding)
                .map_err(|e| fail(e.to_string()))?;
            let (gw, _, _) = conv_axis(in_shape[1], fsh[0], *stride, *padding)
                .map_err(|e| fail(e.to_string()))?;
            Ok(vec![gh, gw, fsh[3]])
        }
        LayerSpec::Bias { params, attach } => {
            let c = params.len();
            match attach {
                BiasAttach::Conv => {
                    if in_shape.len() != 3 || in_shape[2] != c {
                        return Err(fail(format!(
                            "conv bias of length {c} incompatible with input {in_shape:?}"
                        )));
                    }
                }
                BiasAttach::Dense => {
                    if in_shape.len() != 1 || in_shape[0] != c {
                        return Err(fail(format!(
                            "dense bias of length {c} incompatible with input {in_shape:?}"
                        )));
                    }
                }
            }
            Ok(in_shape.to_vec())
        }
        LayerSpec::Dense { params } => {
            let psh = params.shape();
            if psh.len() != 2 {
                return Err(fail(format!("dense params must be [n,p], got {psh:?}")));
            }
            if in_shape.len() != 1 || in_shape[0] != psh[0] {
                return Err(fail(format!(
                    "dense expects input [{}], got {in_shape:?}",
                    psh[0]
                )));
            }
            Ok(vec![psh[1]])
        }
        LayerSpec::ReLU => Ok(in_shape.to_vec()),
        LayerSpec::MaxPool { size } => {
            if in_shape.len() != 3 {
                return Err(fail(format!("maxpool needs [h,w,z] input, got {in_shape:?}")));
            }
            if *size == 0 {
                return Err(fail("maxpool size must be >= 1".into()));
            }
            // Trailing remainder that does not tile evenly is dropped.
            let oh = in_shape[0] / size;
            let ow = in_shape[1] / size;
            if oh == 0 || ow == 0 {
                return Err(fail(format!(
                    "maxpool size {size} larger than input {in_shape:?}"
                )));
            }
            Ok(vec![oh, ow, in_shape[2]])
        }
        LayerSpec::Flatten => Ok(vec![in_shape.iter().product()]),
    }
}

/// Runs a single layer forward. With `linear` set, activation layers pass
/// data through unchanged (the behavior used by checkpoint construction and
/// recovery passes).
pub fn layer_forward(layer: &Layer, x: &Tensor, linear: bool) -> Result<Tensor> {
    if x.shape() != layer.in_shape {
        return Err(MilrError::shape(format!(
            "{} expected input {:?}, got {:?}",
            layer.spec.kind_name(),
            layer.in_shape,
            x.shape()
        )));
    }
    match &layer.spec {
        LayerSpec::Input { .. } => Ok(x.clone()),
        LayerSpec::Conv2D { filters, stride, padding } => conv2d(x, filters, *stride, *padding),
        LayerSpec::Bias { params, attach } => {
            let mut out = x.clone();
            match attach {
                BiasAttach::Conv => {
                    let c = params.len();
                    for i in 0..x.len() {
                        out.set(i, x.get(i) + params.get(i % c));
                    }
                }
                BiasAttach::Dense => {
                    for i in 0..x.len() {
                        out.set(i, x.get(i) + params.get(i));
                    }
                }
            }
            Ok(out)
        }
        LayerSpec::Dense { params } => {
            let row = x.reshaped(vec![1, x.len()])?;
            let out = matmul(&row, params)?;
            out.reshaped(vec![params.shape()[1]])
        }
        LayerSpec::ReLU => {
            if linear {
                return Ok(x.clone());
            }
            let mut out = x.clone();
            for i in 0..x.len() {
                let v = x.get(i);
                // max(0, v); NaN maps to 0 rather than trapping.
                out.set(i, if v > 0.0 { v } else { 0.0 });
            }
            Ok(out)
        }
        LayerSpec::MaxPool { size } => {
            let (h, w, c) = (layer.in_shape[0], layer.in_shape[1], layer.in_shape[2]);
            let (oh, ow) = (h / size, w / size);
            let mut out = Tensor::zeros(vec![oh, ow, c], x.dtype());
            for i in 0..oh {
                for j in 0..ow {
                    for k in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        for di in 0..*size {
                            for dj in 0..*size {
                                let v = x.get(((i * size + di) * w + (j * size + dj)) * c + k);
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        out.set((i * ow + j) * c + k, best);
                    }
                }
            }
            Ok(out)
        }
        LayerSpec::Flatten => x.reshaped(layer.out_shape.clone()),
    }
}

impl Network {
    /// Validates the whole shape chain; fails atomically naming the offending
    /// layer.
    pub fn new(specs: Vec<LayerSpec>, dtype: Dtype) -> Result<Self> {
        if specs.is_empty() {
            return Err(MilrError::Construction {
                layer: 0,
                msg: "network has no layers".into(),
            });
        }
        if !matches!(specs[0], LayerSpec::Input { .. }) {
            return Err(MilrError::Construction {
                layer: 0,
                msg: "first layer must be an input layer".into(),
            });
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape: Vec<usize> = Vec::new();
        for (idx, spec) in specs.into_iter().enumerate() {
            if let Some(p) = spec.params() {
                if p.dtype() != dtype {
                    return Err(MilrError::Construction {
                        layer: idx,
                        msg: format!("parameter dtype {:?} != network dtype {:?}", p.dtype(), dtype),
                    });
                }
            }
            let out = infer_out_shape(idx, &spec, &shape)?;
            let in_shape = if idx == 0 { out.clone() } else { shape };
            layers.push(Layer {
                spec,
                in_shape,
                out_shape: out.clone(),
            });
            shape = out;
        }
        Ok(Network { layers, dtype })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.layers[0].in_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.layers[self.layers.len() - 1].out_shape
    }

    pub fn layer(&self, idx: usize) -> &Layer {
        &self.layers[idx]
    }

    pub fn params_mut(&mut self, idx: usize) -> Option<&mut Tensor> {
        self.layers[idx].spec.params_mut()
    }

    /// Indices of layers that carry parameters.
    pub fn parameterized_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec.params().is_some())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.spec.params())
            .map(|p| p.len())
            .sum()
    }

    pub fn param_bytes(&self) -> usize {
        self.param_count() * self.dtype.byte_size()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_range(x, 0, self.layers.len(), false)
    }

    /// Runs layers `[from, to)`. `x` must match layer `from`'s input shape.
    pub fn forward_range(&self, x: &Tensor, from: usize, to: usize, linear: bool) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers[from..to] {
            cur = layer_forward(layer, &cur, linear)?;
        }
        Ok(cur)
    }

    /// Argmax class of the final output; ties break toward the lowest index.
    pub fn classify(&self, x: &Tensor) -> Result<usize> {
        let out = self.forward(x)?;
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for i in 0..out.len() {
            let v = out.get(i);
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        Ok(best)
    }

    pub fn classify_accuracy(&self, inputs: &[Tensor], labels: &[usize]) -> Result<f64> {
        if inputs.len() != labels.len() {
            return Err(MilrError::Domain(format!(
                "{} inputs vs {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if inputs.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for (x, &label) in inputs.iter().zip(labels) {
            if self.classify(x)? == label {
                hits += 1;
            }
        }
        Ok(hits as f64 / inputs.len() as f64)
    }
}

/// One row of the architecture summary, matching the published layer tables:
/// conv and dense rows fold in their bias parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableRow {
    pub name: &'static str,
    pub output_shape: Vec<usize>,
    pub trainable: usize,
}

impl Network {
    pub fn table_rows(&self) -> Vec<TableRow> {
        let mut rows = Vec::new();
        let mut i = 0;
        while i < self.layers.len() {
            let layer = &self.layers[i];
            match &layer.spec {
                LayerSpec::Conv2D { filters, .. } | LayerSpec::Dense { params: filters } => {
                    let mut trainable = filters.len();
                    if let Some(next) = self.layers.get(i + 1) {
                        if let LayerSpec::Bias { params, .. } = &next.spec {
                            trainable += params.len();
                        }
                    }
                    rows.push(TableRow {
                        name: if matches!(layer.spec, LayerSpec::Conv2D { .. }) {
                            "Conv. 2D"
                        } else {
                            "Dense"
                        },
                        output_shape: layer.out_shape.clone(),
                        trainable,
                    });
                }
                LayerSpec::MaxPool { .. } => rows.push(TableRow {
                    name: "Max Pooling",
                    output_shape: layer.out_shape.clone(),
                    trainable: 0,
                }),
                _ => {}
            }
            i += 1;
        }
        rows
    }
}

fn conv_block(
    rng: &mut SplitMix64,
    dtype: Dtype,
    f: usize,
    z: usize,
    y: usize,
    padding: Padding,
    out: &mut Vec<LayerSpec>,
) {
    out.push(LayerSpec::Conv2D {
        filters: rng.fill_tensor(&[f, f, z, y], dtype),
        stride: 1,
        padding,
    });
    out.push(LayerSpec::Bias {
        params: rng.fill_tensor(&[y], dtype),
        attach: BiasAttach::Conv,
    });
    out.push(LayerSpec::ReLU);
}

fn dense_block(rng: &mut SplitMix64, dtype: Dtype, n: usize, p: usize, out: &mut Vec<LayerSpec>) {
    out.push(LayerSpec::Dense {
        params: rng.fill_tensor(&[n, p], dtype),
    });
    out.push(LayerSpec::Bias {
        params: rng.fill_tensor(&[p], dtype),
        attach: BiasAttach::Dense,
    });
    out.push(LayerSpec::ReLU);
}

/// Builds one of the three reference architectures with seeded random
/// weights. Names: `mnist`, `cifar-small`, `cifar-large`.
pub fn builtin(name: &str, dtype: Dtype, seed: u64) -> Result<Network> {
    let mut rng = SplitMix64::new(seed);
    let mut specs = Vec::new();
    match name {
        "mnist" => {
            specs.push(LayerSpec::Input { shape: vec![28, 28, 1] });
            conv_block(&mut rng, dtype, 3, 1, 32, Padding::Valid, &mut specs);
            conv_block(&mut rng, dtype, 3, 32, 32, Padding::Valid, &mut specs);
            specs.push(LayerSpec::MaxPool { size: 2 });
            conv_block(&mut rng, dtype, 3, 32, 64, Padding::Valid, &mut specs);
            specs.push(LayerSpec::Flatten);
            dense_block(&mut rng, dtype, 10 * 10 * 64, 256, &mut specs);
            dense_block(&mut rng, dtype, 256, 10, &mut specs);
        }
        "cifar-small" => {
            specs.push(LayerSpec::Input { shape: vec![32, 32, 3] });
            conv_block(&mut rng, dtype, 3, 3, 32, Padding::Same, &mut specs);
            conv_block(&mut rng, dtype, 3, 32, 32, Padding::Same, &mut specs);
            specs.push(LayerSpec::MaxPool { size: 2 });
            conv_block(&mut rng, dtype, 3, 32, 64, Padding::Same, &mut specs);
            conv_block(&mut rng, dtype, 3, 64, 64, Padding::Same, &mut specs);
            specs.push(LayerSpec::MaxPool { size: 2 });
            conv_block(&mut rng, dtype, 3, 64, 128, Padding::Same, &mut specs);
            conv_block(&mut rng, dtype, 3, 128, 128, Padding::Same, &mut specs);
            conv_block(&mut rng, dtype, 3, 128, 128, Padding::Same, &mut specs);
            specs.push(LayerSpec::MaxPool { size: 2 });
            specs.push(LayerSpec::Flatten);
            dense_block(&mut rng, dtype, 4 * 4 * 128, 128, &mut specs);
            dense_block(&mut rng, dtype, 128, 10, &mut specs);
        }
        "cifar-large" => {
            specs.push(LayerSpec::Input { shape: vec![32, 32, 3] });
            conv_block(&mut rng, dtype, 5, 3, 96, Padding::Same, &mut specs);
            specs.push(LayerSpec::MaxPool { size: 2 });
            conv_block(&mut rng, dtype, 5, 96, 96, Padding::Same, &mut specs);
            specs.push(LayerSpec::MaxPool { size: 2 });
            conv_block(&mut rng, dtype, 5, 96, 80, Padding::Same, &mut specs);
            conv_block(&mut rng, dtype, 5, 80, 64, Padding::Same, &mut specs);
            conv_block(&mut rng, dtype, 5, 64, 64, Padding::Same, &mut specs);
            conv_block(&mut rng, dtype, 5, 64, 96, Padding::Same, &mut specs);
            specs.push(LayerSpec::Flatten);
            dense_block(&mut rng, dtype, 8 * 8 * 96, 256, &mut specs);
            dense_block(&mut rng, dtype, 256, 10, &mut specs);
        }
        other => {
            return Err(MilrError::Domain(format!("unknown builtin network {other:?}")));
        }
    }
    Network::new(specs, dtype)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_shape_chain_matches_table() {
        let net = builtin("mnist", Dtype::F32, 1).unwrap();
        let rows = net.table_rows();
        let expect: Vec<(&str, Vec<usize>, usize)> = vec![
            ("Conv. 2D", vec![26, 26, 32], 320),
            ("Conv. 2D", vec![24, 24, 32], 9_248),
            ("Max Pooling", vec![12, 12, 32], 0),
            ("Conv. 2D", vec![10, 10, 64], 18_496),
            ("Dense", vec![256], 1_638_656),
            ("Dense", vec![10], 2_570),
        ];
        assert_eq!(rows.len(), expect.len());
        for (row, (name, shape, trainable)) in rows.iter().zip(expect) {
            assert_eq!(row.name, name);
            assert_eq!(row.output_shape, shape);
            assert_eq!(row.trainable, trainable);
        }
        assert_eq!(net.param_count(), 1_669_290);
    }

    #[test]
    fn identity_dense_network() {
        let n = 3;
        let mut eye = Tensor::zeros(vec![n, n], Dtype::F64);
        for i in 0..n {
            eye.set(i * n + i, 1.0);
        }
        let net = Network::new(
            vec![
                LayerSpec::Input { shape: vec![n] },
                LayerSpec::Dense { params: eye },
            ],
            Dtype::F64,
        )
        .unwrap();
        let x = Tensor::from_f64(vec![3], vec![0.5, -1.0, 2.0]);
        assert!(net.forward(&x).unwrap().bit_eq(&x));
    }

    #[test]
    fn relu_and_maxpool_basics() {
        let net = Network::new(
            vec![LayerSpec::Input { shape: vec![3] }, LayerSpec::ReLU],
            Dtype::F64,
        )
        .unwrap();
        let y = net
            .forward(&Tensor::from_f64(vec![3], vec![-1.0, 0.0, 2.0]))
            .unwrap();
        assert_eq!(y.to_f64_vec(), vec![0.0, 0.0, 2.0]);

        let pool = Network::new(
            vec![
                LayerSpec::Input { shape: vec![2, 2, 1] },
                LayerSpec::MaxPool { size: 2 },
            ],
            Dtype::F64,
        )
        .unwrap();
        let y = pool
            .forward(&Tensor::from_f64(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        assert_eq!(y.to_f64_vec(), vec![4.0]);
    }

    #[test]
    fn forward_composes_across_split_points() {
        let net = builtin("mnist", Dtype::F32, 9).unwrap();
        let mut rng = SplitMix64::new(4);
        let x = rng.fill_tensor(&[28, 28, 1], Dtype::F32);
        let full = net.forward(&x).unwrap();
        for k in [3, 7, 11] {
            let mid = net.forward_range(&x, 0, k, false).unwrap();
            let rest = net.forward_range(&mid, k, net.len(), false).unwrap();
            assert!(rest.bit_eq(&full));
        }
    }

    #[test]
    fn shape_violation_names_layer() {
        let err = Network::new(
            vec![
                LayerSpec::Input { shape: vec![4] },
                LayerSpec::Dense {
                    params: Tensor::zeros(vec![5, 2], Dtype::F32),
                },
            ],
            Dtype::F32,
        )
        .unwrap_err();
        match err {
            MilrError::Construction { layer, .. } => assert_eq!(layer, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn self_consistent_labels_score_one() {
        let net = builtin("mnist", Dtype::F32, 77).unwrap();
        let mut rng = SplitMix64::new(8);
        let inputs: Vec<Tensor> = (0..5).map(|_| rng.fill_tensor(&[28, 28, 1], Dtype::F32)).collect();
        let labels: Vec<usize> = inputs.iter().map(|x| net.classify(x).unwrap()).collect();
        assert_eq!(net.classify_accuracy(&inputs, &labels).unwrap(), 1.0);
    }

    #[test]
    fn random_labels_near_chance() {
        let net = builtin("mnist", Dtype::F32, 123).unwrap();
        let mut rng = SplitMix64::new(55);
        let n = 1000;
        let inputs: Vec<Tensor> = (0..n).map(|_| rng.fill_tensor(&[28, 28, 1], Dtype::F32)).collect();
        let labels: Vec<usize> = (0..n).map(|_| (rng.next_u64() % 10) as usize).collect();
        let acc = net.classify_accuracy(&inputs, &labels).unwrap();
        assert!((0.05..=0.15).contains(&acc), "accuracy {acc}");
    }
}
