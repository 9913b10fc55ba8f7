//! Layer set, reference architectures, and the layer-wise quantization
//! policy. Forward passes come in two flavors: a taped pass for training
//! (see [`crate::autodiff`]) and the plain inference pass in this module.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ConvDims;
use crate::error::{Error, Result};
use crate::gm::{uniform_quantize, UniformQuantSpec};
use crate::tensor::{matmul_nn, matmul_nt, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Dense { in_dim: usize, out_dim: usize },
    Conv2d { ci: usize, co: usize, k: usize, stride: usize, pad: usize },
    BatchNorm { c: usize },
    Relu,
    AvgPool { k: usize },
    GlobalAvgPool,
    Flatten,
}

impl LayerKind {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

/// Ordered layer descriptors plus the input contract.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

impl ModelSpec {
    /// Walk the layer list and check adjacent shape compatibility.
    /// Returns the output shape (excluding the batch dimension).
    pub fn validate(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            shape = infer_output_shape(&shape, &layer.kind)
                .map_err(|e| Error::Config(format!("layer {}: {e}", layer.name)))?;
        }
        if shape != vec![self.classes] {
            return Err(Error::Config(format!(
                "model: output shape {:?} does not match {} classes",
                shape, self.classes
            )));
        }
        Ok(shape)
    }

    /// Total parameter count (weights, biases, batchnorm affine).
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Dense { in_dim, out_dim } => in_dim * out_dim + out_dim,
                LayerKind::Conv2d { ci, co, k, .. } => ci * co * k * k + co,
                LayerKind::BatchNorm { c } => 2 * c,
                _ => 0,
            })
            .sum()
    }

    /// Names of weight-bearing layers in order.
    pub fn weighted_layers(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.kind.has_weights())
            .map(|l| l.name.as_str())
            .collect()
    }
}

fn infer_output_shape(shape: &[usize], kind: &LayerKind) -> std::result::Result<Vec<usize>, String> {
    match kind {
        LayerKind::Dense { in_dim, out_dim } => {
            if shape != [*in_dim] {
                return Err(format!("dense expects [{in_dim}], got {shape:?}"));
            }
            Ok(vec![*out_dim])
        }
        LayerKind::Conv2d { ci, co, k, stride, pad } => {
            if shape.len() != 3 || shape[0] != *ci {
                return Err(format!("conv2d expects [{ci},H,W], got {shape:?}"));
            }
            let (h, w) = (shape[1], shape[2]);
            if h + 2 * pad < *k || w + 2 * pad < *k {
                return Err(format!("kernel {k} larger than padded {h}x{w}"));
            }
            Ok(vec![*co, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1])
        }
        LayerKind::BatchNorm { c } => {
            if shape.len() != 3 || shape[0] != *c {
                return Err(format!("batchnorm expects [{c},H,W], got {shape:?}"));
            }
            Ok(shape.to_vec())
        }
        LayerKind::Relu => Ok(shape.to_vec()),
        LayerKind::AvgPool { k } => {
            if shape.len() != 3 || shape[1] % k != 0 || shape[2] % k != 0 {
                return Err(format!("avgpool {k} does not tile {shape:?}"));
            }
            Ok(vec![shape[0], shape[1] / k, shape[2] / k])
        }
        LayerKind::GlobalAvgPool => {
            if shape.len() != 3 {
                return Err(format!("global avgpool expects [C,H,W], got {shape:?}"));
            }
            Ok(vec![shape[0]])
        }
        LayerKind::Flatten => Ok(vec![shape.iter().product()]),
    }
}

/// Which layers are quantized and with how many components.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantPolicy {
    pub bits: u8,
    pub k_plus_one: usize,
    pub skip: Vec<String>,
    pub act_bits: u8,
}

impl QuantPolicy {
    pub fn new(bits: u8, k_plus_one: Option<usize>) -> Result<Self> {
        if bits < 1 || bits > 8 {
            return Err(Error::Config(format!("policy: unsupported weight bit-width {bits}")));
        }
        let kp1 = k_plus_one.unwrap_or(1usize << bits);
        if kp1 < 2 {
            return Err(Error::Config("policy: need at least 2 components".into()));
        }
        if kp1 > (1usize << bits) {
            return Err(Error::Config(format!(
                "policy: {kp1} components do not fit in {bits} bits"
            )));
        }
        Ok(QuantPolicy { bits, k_plus_one: kp1, skip: Vec::new(), act_bits: 32 })
    }

    /// Standard policy for a model: first and last weighted layers are
    /// skipped, plus any extras.
    pub fn for_model(spec: &ModelSpec, bits: u8, k_plus_one: Option<usize>, extra_skip: &[String]) -> Result<Self> {
        let mut policy = QuantPolicy::new(bits, k_plus_one)?;
        let weighted = spec.weighted_layers();
        if weighted.len() < 2 {
            return Err(Error::Config("policy: model needs at least two weighted layers".into()));
        }
        policy.skip.push(weighted[0].to_string());
        policy.skip.push(weighted[weighted.len() - 1].to_string());
        for s in extra_skip {
            if !policy.skip.contains(s) {
                policy.skip.push(s.clone());
            }
        }
        Ok(policy)
    }

    pub fn is_quantized(&self, layer: &str) -> bool {
        !self.skip.iter().any(|s| s == layer)
    }

    /// Weighted layer names the policy quantizes, in model order.
    pub fn quantized_layers<'a>(&self, spec: &'a ModelSpec) -> Vec<&'a str> {
        spec.weighted_layers()
            .into_iter()
            .filter(|name| self.is_quantized(name))
            .collect()
    }
}

/// A named parameter or state tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Parameters plus batchnorm running statistics for one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<NamedTensor>,
    pub running: Vec<NamedTensor>,
}

impl Model {
    /// Glorot-uniform initialization from a fixed seed.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut running = Vec::new();
        for layer in &spec.layers {
            match &layer.kind {
                LayerKind::Dense { in_dim, out_dim } => {
                    let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
                    let w: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.random_range(-a..a)).collect();
                    params.push(NamedTensor {
                        name: format!("{}.w", layer.name),
                        tensor: Tensor::from_vec(&[*out_dim, *in_dim], w)?,
                    });
                    params.push(NamedTensor {
                        name: format!("{}.b", layer.name),
                        tensor: Tensor::zeros(&[*out_dim]),
                    });
                }
                LayerKind::Conv2d { ci, co, k, .. } => {
                    let fan_in = ci * k * k;
                    let fan_out = co * k * k;
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let w: Vec<f64> = (0..ci * co * k * k).map(|_| rng.random_range(-a..a)).collect();
                    params.push(NamedTensor {
                        name: format!("{}.w", layer.name),
                        tensor: Tensor::from_vec(&[*co, *ci, *k, *k], w)?,
                    });
                    params.push(NamedTensor {
                        name: format!("{}.b", layer.name),
                        tensor: Tensor::zeros(&[*co]),
                    });
                }
                LayerKind::BatchNorm { c } => {
                    params.push(NamedTensor {
                        name: format!("{}.scale", layer.name),
                        tensor: Tensor::from_vec(&[*c], vec![1.0; *c])?,
                    });
                    params.push(NamedTensor {
                        name: format!("{}.shift", layer.name),
                        tensor: Tensor::zeros(&[*c]),
                    });
                    running.push(NamedTensor {
                        name: format!("{}.running_mean", layer.name),
                        tensor: Tensor::zeros(&[*c]),
                    });
                    running.push(NamedTensor {
                        name: format!("{}.running_var", layer.name),
                        tensor: Tensor::from_vec(&[*c], vec![1.0; *c])?,
                    });
                }
                _ => {}
            }
        }
        Ok(Model { spec, params, running })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn running_stat(&self, name: &str) -> Option<&Tensor> {
        self.running.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn running_stat_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.running.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    /// Inference forward pass. `weight_override` substitutes weight tensors
    /// by parameter name (used for hard-quantized evaluation); batchnorm
    /// uses running statistics; `act` optionally quantizes every layer
    /// output at the calibrated ranges.
    pub fn forward_eval(
        &self,
        x: &Tensor,
        weight_override: Option<&BTreeMap<String, Vec<f64>>>,
        act: Option<&ActQuantizer>,
    ) -> Result<Tensor> {
        let mut cur = x.clone();
        if let Some(a) = act {
            cur = a.apply("input", cur)?;
        }
        for layer in &self.spec.layers {
            cur = self.layer_eval(layer, cur, weight_override)?;
            if let Some(a) = act {
                cur = a.apply(&layer.name, cur)?;
            }
        }
        Ok(cur)
    }

    fn layer_eval(
        &self,
        layer: &LayerSpec,
        x: Tensor,
        weight_override: Option<&BTreeMap<String, Vec<f64>>>,
    ) -> Result<Tensor> {
        let wname = format!("{}.w", layer.name);
        let pick_weights = |base: &Tensor| -> Vec<f64> {
            weight_override
                .and_then(|m| m.get(&wname).cloned())
                .unwrap_or_else(|| base.data().to_vec())
        };
        match &layer.kind {
            LayerKind::Dense { .. } => {
                let w = self.param(&wname).expect("dense weights");
                let b = self.param(&format!("{}.b", layer.name)).expect("dense bias");
                let wdata = pick_weights(w);
                let wt = Tensor::from_vec(w.shape(), wdata)?;
                dense_forward(&x, &wt, b).map_err(|e| named(e, &layer.name))
            }
            LayerKind::Conv2d { stride, pad, .. } => {
                let w = self.param(&wname).expect("conv weights");
                let b = self.param(&format!("{}.b", layer.name)).expect("conv bias");
                let wdata = pick_weights(w);
                let wt = Tensor::from_vec(w.shape(), wdata)?;
                conv2d_forward(&x, &wt, b, *stride, *pad).map_err(|e| named(e, &layer.name))
            }
            LayerKind::BatchNorm { .. } => {
                let scale = self.param(&format!("{}.scale", layer.name)).expect("bn scale");
                let shift = self.param(&format!("{}.shift", layer.name)).expect("bn shift");
                let mean = self
                    .running_stat(&format!("{}.running_mean", layer.name))
                    .expect("bn running mean");
                let var = self
                    .running_stat(&format!("{}.running_var", layer.name))
                    .expect("bn running var");
                batchnorm_forward(&x, scale, shift, mean, var).map_err(|e| named(e, &layer.name))
            }
            LayerKind::Relu => Ok(relu(&x)),
            LayerKind::AvgPool { k } => avgpool(&x, *k).map_err(|e| named(e, &layer.name)),
            LayerKind::GlobalAvgPool => global_avgpool(&x).map_err(|e| named(e, &layer.name)),
            LayerKind::Flatten => {
                let n = x.shape()[0];
                let rest: usize = x.shape()[1..].iter().product();
                x.reshaped(&[n, rest])
            }
        }
    }
}

fn named(e: Error, layer: &str) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{layer}: {m}")),
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Plain layer forwards (inference path and oracles)

pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || b.len() != ws[0] {
        return Err(Error::Config(format!(
            "dense: incompatible shapes x{xs:?} w{ws:?} b[{}]",
            b.len()
        )));
    }
    let (n, i, o) = (xs[0], xs[1], ws[0]);
    let mut y = vec![0.0; n * o];
    matmul_nt(x.data(), w.data(), &mut y, n, i, o);
    for row in y.chunks_exact_mut(o) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Tensor::from_vec(&[n, o], y)
}

/// im2col + matmul fast path.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || b.len() != ws[0] {
        return Err(Error::Config(format!(
            "conv2d: incompatible shapes x{xs:?} w{ws:?} b[{}]",
            b.len()
        )));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d: stride must be positive".into()));
    }
    let (batch, ci, h, iw) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, kh, kw) = (ws[0], ws[2], ws[3]);
    if h + 2 * pad < kh || iw + 2 * pad < kw {
        return Err(Error::Config("conv2d: kernel larger than padded input".into()));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (iw + 2 * pad - kw) / stride + 1;
    let dims = ConvDims { batch, ci, h, w: iw, co, kh, kw, stride, pad, oh, ow };
    let ckk = ci * kh * kw;
    let spatial = oh * ow;
    let mut cols = vec![0.0; ckk * spatial];
    let mut y = vec![0.0; batch * co * spatial];
    for n in 0..batch {
        cols.fill(0.0);
        im2col_single(
            &x.data()[n * ci * h * iw..(n + 1) * ci * h * iw],
            &dims,
            &mut cols,
        );
        let yslab = &mut y[n * co * spatial..(n + 1) * co * spatial];
        matmul_nn(w.data(), &cols, yslab, co, ckk, spatial);
        for (c, chunk) in yslab.chunks_exact_mut(spatial).enumerate() {
            let bv = b.data()[c];
            for v in chunk.iter_mut() {
                *v += bv;
            }
        }
    }
    Tensor::from_vec(&[batch, co, oh, ow], y)
}

fn im2col_single(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let spatial = d.oh * d.ow;
    for c in 0..d.ci {
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let row = ((c * d.kh + kh) * d.kw + kw) * spatial;
                for oh in 0..d.oh {
                    let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    for ow in 0..d.ow {
                        let iw = (ow * d.stride + kw) as isize - d.pad as isize;
                        if iw < 0 || iw >= d.w as isize {
                            continue;
                        }
                        cols[row + oh * d.ow + ow] = x[(c * d.h + ih as usize) * d.w + iw as usize];
                    }
                }
            }
        }
    }
}

/// Naive 6-loop convolution, the correctness oracle for the fast path and
/// for the packed runtime.
pub fn conv2d_naive(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || b.len() != ws[0] {
        return Err(Error::Config("conv2d_naive: incompatible shapes".into()));
    }
    let (batch, ci, h, iw) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (iw + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let wd = w.data();
    let mut y = vec![0.0; batch * co * oh * ow];
    for n in 0..batch {
        for c_out in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[c_out];
                    for c_in in 0..ci {
                        for dh in 0..kh {
                            for dw in 0..kw {
                                let ih = (i * stride + dh) as isize - pad as isize;
                                let jw = (j * stride + dw) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize || jw < 0 || jw >= iw as isize {
                                    continue;
                                }
                                acc += wd[((c_out * ci + c_in) * kh + dh) * kw + dw]
                                    * xd[((n * ci + c_in) * h + ih as usize) * iw + jw as usize];
                            }
                        }
                    }
                    y[((n * co + c_out) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[batch, co, oh, ow], y)
}

/// Inference-mode batchnorm with the given statistics.
pub fn batchnorm_forward(x: &Tensor, scale: &Tensor, shift: &Tensor, mean: &Tensor, var: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Config(format!("batchnorm: expected NCHW, got {xs:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if scale.len() != c || shift.len() != c || mean.len() != c || var.len() != c {
        return Err(Error::Config("batchnorm: stat length must equal channels".into()));
    }
    let plane = h * w;
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var.data()[ch] + 1e-5).sqrt();
            let (sc, sh, mu) = (scale.data()[ch], shift.data()[ch], mean.data()[ch]);
            let off = (b * c + ch) * plane;
            for i in 0..plane {
                y[off + i] = sc * (x.data()[off + i] - mu) * inv + sh;
            }
        }
    }
    Tensor::from_vec(xs, y)
}

pub fn relu(x: &Tensor) -> Tensor {
    let y: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::from_vec(x.shape(), y).unwrap()
}

pub fn avgpool(x: &Tensor, k: usize) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 || k == 0 || xs[2] % k != 0 || xs[3] % k != 0 {
        return Err(Error::Config(format!("avgpool: window {k} does not tile {xs:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut y = vec![0.0; n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            let ioff = (b * c + ch) * h * w;
            let ooff = (b * c + ch) * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for di in 0..k {
                        for dj in 0..k {
                            s += x.data()[ioff + (i * k + di) * w + (j * k + dj)];
                        }
                    }
                    y[ooff + i * ow + j] = s * inv;
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], y)
}

pub fn global_avgpool(x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Config(format!("global_avgpool: expected NCHW, got {xs:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let plane = h * w;
    let mut y = vec![0.0; n * c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            y[b * c + ch] = x.data()[off..off + plane].iter().sum::<f64>() / plane as f64;
        }
    }
    Tensor::from_vec(&[n, c], y)
}

// ---------------------------------------------------------------------------
// Reference architectures

/// Two hidden dense layers with relu.
pub fn build_mlp(in_dim: usize, hidden: usize, classes: usize) -> Result<ModelSpec> {
    if in_dim == 0 || hidden == 0 || classes < 2 {
        return Err(Error::Config(format!(
            "mlp: invalid dims in={in_dim} hidden={hidden} classes={classes}"
        )));
    }
    let layers = vec![
        LayerSpec { name: "fc1".into(), kind: LayerKind::Dense { in_dim, out_dim: hidden } },
        LayerSpec { name: "relu1".into(), kind: LayerKind::Relu },
        LayerSpec { name: "fc2".into(), kind: LayerKind::Dense { in_dim: hidden, out_dim: hidden } },
        LayerSpec { name: "relu2".into(), kind: LayerKind::Relu },
        LayerSpec { name: "fc3".into(), kind: LayerKind::Dense { in_dim: hidden, out_dim: classes } },
    ];
    let spec = ModelSpec { layers, input_shape: vec![in_dim], classes };
    spec.validate()?;
    Ok(spec)
}

/// Four conv blocks, global average pooling, and a dense head. Sized to
/// train in minutes on one CPU core.
pub fn build_cnn(classes: usize) -> Result<ModelSpec> {
    if classes < 2 {
        return Err(Error::Config(format!("cnn: invalid class count {classes}")));
    }
    let widths = [8usize, 16, 32, 32];
    let mut layers = Vec::new();
    let mut ci = 3usize;
    for (i, &co) in widths.iter().enumerate() {
        let n = i + 1;
        layers.push(LayerSpec {
            name: format!("conv{n}"),
            kind: LayerKind::Conv2d { ci, co, k: 3, stride: 1, pad: 1 },
        });
        layers.push(LayerSpec { name: format!("bn{n}"), kind: LayerKind::BatchNorm { c: co } });
        layers.push(LayerSpec { name: format!("relu{n}"), kind: LayerKind::Relu });
        if i < 3 {
            layers.push(LayerSpec { name: format!("pool{n}"), kind: LayerKind::AvgPool { k: 2 } });
        }
        ci = co;
    }
    layers.push(LayerSpec { name: "gap".into(), kind: LayerKind::GlobalAvgPool });
    layers.push(LayerSpec {
        name: "fc".into(),
        kind: LayerKind::Dense { in_dim: widths[3], out_dim: classes },
    });
    let spec = ModelSpec { layers, input_shape: vec![3, 32, 32], classes };
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Post-training activation quantization (optional path)

/// Per-site max-abs statistics collected over calibration batches.
#[derive(Debug, Clone, Default)]
pub struct ActCalibration {
    pub max_abs: BTreeMap<String, f64>,
}

impl ActCalibration {
    pub fn observe(&mut self, site: &str, x: &Tensor) {
        let m = x.data().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let e = self.max_abs.entry(site.to_string()).or_insert(0.0);
        if m > *e {
            *e = m;
        }
    }
}

/// Applies per-tensor symmetric uniform quantization at eval time.
#[derive(Debug, Clone)]
pub struct ActQuantizer {
    pub bits: u8,
    pub calib: ActCalibration,
}

impl ActQuantizer {
    pub fn apply(&self, site: &str, x: Tensor) -> Result<Tensor> {
        if self.bits >= 32 {
            return Ok(x);
        }
        let max_abs = self.calib.max_abs.get(site).copied().unwrap_or(0.0);
        quantize_activations_uniform(&x, max_abs, self.bits)
    }
}

/// Symmetric min-max uniform activation quantization. Zero calibrated range
/// (or a 32-bit setting) passes the tensor through untouched.
pub fn quantize_activations_uniform(x: &Tensor, max_abs: f64, bits: u8) -> Result<Tensor> {
    if bits >= 32 || max_abs == 0.0 {
        return Ok(x.clone());
    }
    let spec = UniformQuantSpec::from_range(max_abs, bits)?;
    let q = uniform_quantize(x.data(), &spec)?;
    Tensor::from_vec(x.shape(), q)
}

/// Collect calibration statistics by running eval forwards over batches.
pub fn calibrate_activations(
    model: &Model,
    weight_override: Option<&BTreeMap<String, Vec<f64>>>,
    batches: &[Tensor],
) -> Result<ActCalibration> {
    if batches.is_empty() {
        return Err(Error::Config("calibration needs at least one batch".into()));
    }
    let mut calib = ActCalibration::default();
    for x in batches {
        let mut cur = x.clone();
        calib.observe("input", &cur);
        for layer in &model.spec.layers {
            cur = model.layer_eval(layer, cur, weight_override)?;
            calib.observe(&layer.name, &cur);
        }
    }
    Ok(calib)
}
