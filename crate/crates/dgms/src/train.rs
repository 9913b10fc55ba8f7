//! The co-tuning loop: forward through soft-projected weights, backward into
//! both the full-precision weights and the mixture parameters, SGD with
//! momentum, one-cycle learning-rate scheduling, and the finite-difference
//! gradient checking harness.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnStats, NodeId, Tape};
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gm::{self, kmeans_init, GmInitOptions, LayerGm};
use crate::metrics::{self, CodebookAccounting};
use crate::model::{LayerKind, Model, QuantPolicy};
use crate::tensor::Tensor;

const BN_MOMENTUM: f64 = 0.1;

/// One-cycle schedule: linear warmup from `max_lr/100` to `max_lr` over the
/// warmup fraction of steps, then cosine decay back down to `max_lr/100`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneCycleSchedule {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
}

impl OneCycleSchedule {
    pub fn new(max_lr: f64, total_steps: usize, warmup_frac: f64) -> Result<Self> {
        if !(max_lr > 0.0) || !max_lr.is_finite() {
            return Err(Error::Config(format!("schedule: max_lr must be positive, got {max_lr}")));
        }
        if !(0.0..1.0).contains(&warmup_frac) {
            return Err(Error::Config(format!(
                "schedule: warmup fraction must be in [0,1), got {warmup_frac}"
            )));
        }
        Ok(OneCycleSchedule { max_lr, total_steps, warmup_frac })
    }

    pub fn lr(&self, step: usize) -> f64 {
        let floor = self.max_lr / 100.0;
        if self.total_steps == 0 {
            return self.max_lr;
        }
        let warm = (self.total_steps as f64 * self.warmup_frac).round() as usize;
        if step < warm {
            let t = (step + 1) as f64 / warm as f64;
            floor + (self.max_lr - floor) * t
        } else {
            let span = (self.total_steps - warm).max(1) as f64;
            let t = ((step - warm) as f64 / span).min(1.0);
            floor + (self.max_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Mixture state for the quantized layers plus the policy that selected them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantState {
    pub policy: QuantPolicy,
    pub gms: BTreeMap<String, LayerGm>,
}

/// Full training state: model parameters, optional quantization state,
/// momentum buffers, and run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub quant: Option<QuantState>,
    pub momentum: BTreeMap<String, Vec<f64>>,
    pub step: u64,
    pub seed: u64,
    pub skipped_steps: u64,
}

impl TrainState {
    pub fn new_fp32(model: Model, seed: u64) -> TrainState {
        TrainState { model, quant: None, momentum: BTreeMap::new(), step: 0, seed, skipped_steps: 0 }
    }

    /// Attach mixture state initialized by k-means over each quantized
    /// layer's current weights.
    pub fn quantize_kmeans(&mut self, policy: QuantPolicy, opts: &GmInitOptions) -> Result<()> {
        let mut gms = BTreeMap::new();
        for name in policy.quantized_layers(&self.model.spec) {
            let w = self
                .model
                .param(&format!("{name}.w"))
                .ok_or_else(|| Error::Config(format!("train: missing weights for layer {name}")))?;
            let gm = kmeans_init(w.data(), policy.k_plus_one, self.seed, opts)?;
            gms.insert(name.to_string(), gm);
        }
        self.quant = Some(QuantState { policy, gms });
        Ok(())
    }

    /// Attach imported mixture state (k-means skipped). Every quantized
    /// layer must be covered and each component count must fit the policy's
    /// bit-width.
    pub fn apply_gm(&mut self, policy: QuantPolicy, gms: BTreeMap<String, LayerGm>) -> Result<()> {
        for name in policy.quantized_layers(&self.model.spec) {
            let gm = gms
                .get(name)
                .ok_or_else(|| Error::Config(format!("transfer: no mixture state for layer {name}")))?;
            if gm.len() > (1usize << policy.bits) {
                return Err(Error::Config(format!(
                    "transfer: layer {name} has {} components which do not fit {} bits",
                    gm.len(),
                    policy.bits
                )));
            }
        }
        self.quant = Some(QuantState { policy, gms });
        Ok(())
    }

    /// Hard-quantized weight substitution for every quantized layer.
    pub fn hard_weight_override(&self) -> BTreeMap<String, Vec<f64>> {
        let mut map = BTreeMap::new();
        if let Some(q) = &self.quant {
            for (name, gm) in &q.gms {
                if let Some(w) = self.model.param(&format!("{name}.w")) {
                    map.insert(format!("{name}.w"), gm::hard_quantize(w.data(), gm));
                }
            }
        }
        map
    }

    /// Serialize parameters, running stats, momentum buffers, and metadata.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for p in &self.model.params {
            tensors.push((p.name.clone(), p.tensor.clone()));
        }
        for r in &self.model.running {
            tensors.push((r.name.clone(), r.tensor.clone()));
        }
        for (name, buf) in &self.momentum {
            tensors.push((
                format!("opt.m.{name}"),
                Tensor::from_vec(&[buf.len()], buf.clone()).unwrap(),
            ));
        }
        Checkpoint { seed: self.seed, step: self.step, tensors }
    }

    /// Rebuild state from a checkpoint against a freshly built model of the
    /// same architecture. Tensor shapes must match the spec.
    pub fn from_checkpoint(mut model: Model, ckpt: &Checkpoint) -> Result<TrainState> {
        for p in &mut model.params {
            let t = ckpt
                .tensor(&p.name)
                .ok_or_else(|| Error::Data(format!("checkpoint: missing tensor {}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Data(format!(
                    "checkpoint: tensor {} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t.clone();
        }
        for r in &mut model.running {
            let t = ckpt
                .tensor(&r.name)
                .ok_or_else(|| Error::Data(format!("checkpoint: missing tensor {}", r.name)))?;
            r.tensor = t.clone();
        }
        let mut momentum = BTreeMap::new();
        for (name, t) in &ckpt.tensors {
            if let Some(param) = name.strip_prefix("opt.m.") {
                momentum.insert(param.to_string(), t.data().to_vec());
            }
        }
        Ok(TrainState {
            model,
            quant: None,
            momentum,
            step: ckpt.step,
            seed: ckpt.seed,
            skipped_steps: 0,
        })
    }
}

/// Node bindings recorded by a quantized forward pass.
pub struct TapeBindings {
    pub params: Vec<(String, NodeId)>,
    pub bn_stats: Vec<(String, BnStats)>,
}

/// Forward pass with every policy-quantized layer computing through the
/// soft projection of its weights; other layers use the weights directly.
/// Returns the tape, the logits node, and leaf bindings for the backward
/// pass.
pub fn forward_quantized(x: &Tensor, state: &TrainState) -> Result<(Tape, NodeId, TapeBindings)> {
    let mut tape = Tape::new();
    let mut params = Vec::new();
    let mut bn_stats = Vec::new();
    let mut cur = tape.leaf(x.clone());
    for layer in &state.model.spec.layers {
        match &layer.kind {
            LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                let wname = format!("{}.w", layer.name);
                let bname = format!("{}.b", layer.name);
                let w = state.model.param(&wname).expect("weights").clone();
                let b = state.model.param(&bname).expect("bias").clone();
                let w_leaf = tape.leaf(w);
                params.push((wname.clone(), w_leaf));
                let b_leaf = tape.leaf(b);
                params.push((bname, b_leaf));

                let gm = state
                    .quant
                    .as_ref()
                    .filter(|q| q.policy.is_quantized(&layer.name))
                    .and_then(|q| q.gms.get(&layer.name));
                let w_used = match gm {
                    Some(gm) => {
                        let mu = tape.leaf(Tensor::from_vec(&[gm.len()], gm.mus().to_vec())?);
                        let pi = tape.leaf(Tensor::from_vec(&[gm.len()], gm.pi_param().to_vec())?);
                        let lg = tape.leaf(Tensor::from_vec(&[gm.len()], gm.log_gamma().to_vec())?);
                        let lt = tape.leaf(Tensor::from_vec(&[1], vec![gm.log_tau()])?);
                        params.push((format!("{}.gm.mu", layer.name), mu));
                        params.push((format!("{}.gm.pi", layer.name), pi));
                        params.push((format!("{}.gm.log_gamma", layer.name), lg));
                        params.push((format!("{}.gm.log_tau", layer.name), lt));
                        tape.soft_quantize(w_leaf, mu, pi, lg, lt, gm)?
                    }
                    None => w_leaf,
                };
                cur = match &layer.kind {
                    LayerKind::Dense { .. } => tape
                        .dense(cur, w_used, b_leaf)
                        .map_err(|e| rename(e, &layer.name))?,
                    LayerKind::Conv2d { stride, pad, .. } => tape
                        .conv2d(cur, w_used, b_leaf, *stride, *pad)
                        .map_err(|e| rename(e, &layer.name))?,
                    _ => unreachable!(),
                };
            }
            LayerKind::BatchNorm { .. } => {
                let sname = format!("{}.scale", layer.name);
                let hname = format!("{}.shift", layer.name);
                let s = state.model.param(&sname).expect("bn scale").clone();
                let h = state.model.param(&hname).expect("bn shift").clone();
                let s_leaf = tape.leaf(s);
                let h_leaf = tape.leaf(h);
                params.push((sname, s_leaf));
                params.push((hname, h_leaf));
                let (id, stats) = tape
                    .batchnorm(cur, s_leaf, h_leaf)
                    .map_err(|e| rename(e, &layer.name))?;
                bn_stats.push((layer.name.clone(), stats));
                cur = id;
            }
            LayerKind::Relu => cur = tape.relu(cur),
            LayerKind::AvgPool { k } => {
                cur = tape.avgpool(cur, *k).map_err(|e| rename(e, &layer.name))?
            }
            LayerKind::GlobalAvgPool => {
                cur = tape.global_avgpool(cur).map_err(|e| rename(e, &layer.name))?
            }
            LayerKind::Flatten => cur = tape.flatten(cur).map_err(|e| rename(e, &layer.name))?,
        }
    }
    Ok((tape, cur, TapeBindings { params, bn_stats }))
}

fn rename(e: Error, layer: &str) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("layer {layer}: {m}")),
        other => other,
    }
}

/// Mean cross-entropy over a logits tensor, standalone (no tape).
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = tape.cross_entropy(l, labels)?;
    Ok(tape.value(loss).item())
}

/// One SGD step with momentum. Weight decay applies only to the dense/conv
/// weight matrices, never to biases, batchnorm affine, or mixture
/// parameters. Returns false when the step was skipped because a gradient
/// was non-finite.
pub fn sgd_step(
    state: &mut TrainState,
    grads: &BTreeMap<String, Vec<f64>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<bool> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("sgd: learning rate must be positive, got {lr}")));
    }
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            state.skipped_steps += 1;
            state.step += 1;
            eprintln!("warning: non-finite gradient for {name}; step skipped");
            return Ok(false);
        }
    }

    let apply = |param: &mut [f64], g: &[f64], buf: &mut Vec<f64>, decay: f64| {
        if buf.len() != param.len() {
            *buf = vec![0.0; param.len()];
        }
        for i in 0..param.len() {
            let gi = g[i] + decay * param[i];
            buf[i] = momentum * buf[i] + gi;
            param[i] -= lr * buf[i];
        }
    };

    for (name, g) in grads {
        if let Some(gm_key) = name.find(".gm.") {
            let layer = &name[..gm_key];
            let group = &name[gm_key + 4..];
            let quant = state.quant.as_mut().expect("gm gradient without quant state");
            let gm = quant.gms.get_mut(layer).expect("gm gradient for unknown layer");
            let trainable = match group {
                "mu" => gm.train_mu,
                "pi" => gm.train_pi,
                "log_gamma" => gm.train_gamma,
                "log_tau" => gm.train_tau,
                other => return Err(Error::Config(format!("sgd: unknown gm group {other}"))),
            };
            if !trainable {
                continue;
            }
            let buf = state.momentum.entry(name.clone()).or_default();
            match group {
                "mu" => apply(gm.mu_mut(), g, buf, 0.0),
                "pi" => apply(gm.pi_param_mut(), g, buf, 0.0),
                "log_gamma" => apply(gm.log_gamma_mut(), g, buf, 0.0),
                "log_tau" => {
                    let mut v = [*gm.log_tau_mut()];
                    apply(&mut v, g, buf, 0.0);
                    *gm.log_tau_mut() = v[0];
                }
                _ => unreachable!(),
            }
        } else {
            let decay = if name.ends_with(".w") { weight_decay } else { 0.0 };
            let buf = state.momentum.entry(name.clone()).or_default();
            let param = state
                .model
                .param_mut(name)
                .ok_or_else(|| Error::Config(format!("sgd: unknown parameter {name}")))?;
            apply(param.data_mut(), g, buf, decay);
        }
    }
    if let Some(q) = &mut state.quant {
        for gm in q.gms.values_mut() {
            gm.clamp_floors();
        }
    }
    state.step += 1;
    Ok(true)
}

/// Per-epoch training diagnostics; the CSV columns are
/// `epoch,loss,top1,mse,cr`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub epoch: usize,
    pub loss: f64,
    pub top1: f64,
    pub mse: f64,
    pub cr: f64,
    pub nonzero: usize,
}

pub fn write_metrics_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,loss,top1,mse,cr")?;
    for r in reports {
        writeln!(f, "{},{:.6},{:.4},{:.6e},{:.4}", r.epoch, r.loss, r.top1, r.mse, r.cr)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub schedule: OneCycleSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch: usize, schedule: OneCycleSchedule) -> Self {
        TrainConfig { epochs, batch, schedule, momentum: 0.9, weight_decay: 5e-4 }
    }
}

fn validate_dataset(ds: &Dataset, model: &Model, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Data(format!("train: {what} dataset is empty")));
    }
    if ds.example_shape() != &model.spec.input_shape[..] {
        return Err(Error::Data(format!(
            "train: {what} example shape {:?} does not match model input {:?}",
            ds.example_shape(),
            model.spec.input_shape
        )));
    }
    if ds.classes != model.spec.classes {
        return Err(Error::Data(format!(
            "train: {what} has {} classes, model expects {}",
            ds.classes, model.spec.classes
        )));
    }
    Ok(())
}

/// Hard-quantized top-1 accuracy and mean loss over a dataset. For a state
/// without quantization this evaluates the plain weights.
pub fn evaluate(state: &TrainState, ds: &Dataset) -> Result<(f64, f64)> {
    evaluate_act(state, ds, None)
}

/// [`evaluate`] with optional post-training activation quantization.
pub fn evaluate_act(
    state: &TrainState,
    ds: &Dataset,
    act: Option<&crate::model::ActQuantizer>,
) -> Result<(f64, f64)> {
    validate_dataset(ds, &state.model, "eval")?;
    let over = state.hard_weight_override();
    let over = if over.is_empty() { None } else { Some(&over) };
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, labels) = ds.batch(chunk);
        let logits = state.model.forward_eval(&x, over, act)?;
        let c = logits.shape()[1];
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits.data()[i * c..(i + 1) * c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        loss_sum += cross_entropy_loss(&logits, &labels)? * labels.len() as f64;
        seen += labels.len();
    }
    Ok((correct as f64 / seen as f64, loss_sum / seen as f64))
}

fn epoch_metrics(state: &TrainState, epoch: usize, train_loss: f64, top1: f64) -> MetricsReport {
    match &state.quant {
        Some(q) => {
            let pairs: Vec<(Vec<f64>, Vec<f64>)> = q
                .gms
                .iter()
                .filter_map(|(name, gm)| {
                    state
                        .model
                        .param(&format!("{name}.w"))
                        .map(|w| (w.data().to_vec(), gm::hard_quantize(w.data(), gm)))
                })
                .collect();
            let refs: Vec<(&[f64], &[f64])> =
                pairs.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
            let mse = metrics::quantization_mse_layers(&refs).unwrap_or(0.0);
            let census = metrics::census_from_model(&state.model, &q.gms, &q.policy)
                .unwrap_or_default();
            let cr = metrics::compression_rate(&census, q.policy.bits, CodebookAccounting::Included);
            let nonzero = metrics::nonzero_params(&census);
            MetricsReport { epoch, loss: train_loss, top1, mse, cr, nonzero }
        }
        None => {
            let total: usize = state.model.params.iter().map(|p| p.tensor.len()).sum();
            MetricsReport { epoch, loss: train_loss, top1, mse: 0.0, cr: 1.0, nonzero: total }
        }
    }
}

/// Run the full co-tuning loop. Each step forwards through soft-projected
/// weights, backpropagates into weights and mixture parameters, and applies
/// SGD; epoch reports evaluate the hard-quantized model on the test split.
/// Zero epochs performs a single evaluation-only report.
pub fn train(
    state: &mut TrainState,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<MetricsReport>> {
    validate_dataset(test_ds, &state.model, "test")?;
    if cfg.epochs == 0 {
        let (top1, loss) = evaluate(state, test_ds)?;
        return Ok(vec![epoch_metrics(state, 0, loss, top1)]);
    }
    validate_dataset(train_ds, &state.model, "train")?;
    if cfg.batch == 0 {
        return Err(Error::Config("train: batch size must be positive".into()));
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(state.seed.wrapping_add(0x5u64 << 32));
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    for epoch in 1..=cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let (x, labels) = train_ds.batch(chunk);
            let (mut tape, logits, bindings) = forward_quantized(&x, state)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "train: non-finite loss {loss_val} at step {}",
                    state.step
                )));
            }
            loss_sum += loss_val * labels.len() as f64;
            seen += labels.len();

            let grads = tape.backward(loss);
            let mut grad_map = BTreeMap::new();
            for (name, node) in &bindings.params {
                if let Some(g) = &grads[*node] {
                    grad_map.insert(name.clone(), g.data().to_vec());
                }
            }
            // Update running statistics from the batch the op observed.
            for (layer, stats) in &bindings.bn_stats {
                if let Some(rm) = state.model.running_stat_mut(&format!("{layer}.running_mean")) {
                    for (r, m) in rm.data_mut().iter_mut().zip(&stats.mean) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                    }
                }
                if let Some(rv) = state.model.running_stat_mut(&format!("{layer}.running_var")) {
                    for (r, v) in rv.data_mut().iter_mut().zip(&stats.var) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                    }
                }
            }
            let lr = cfg.schedule.lr(state.step as usize);
            sgd_step(state, &grad_map, lr, cfg.momentum, cfg.weight_decay)?;
        }
        let (top1, _) = evaluate(state, test_ds)?;
        reports.push(epoch_metrics(state, epoch, loss_sum / seen as f64, top1));
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Gradient checking

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub batch: usize,
    /// Component count K+1; zero disables quantization (plain FP32 layer).
    pub k_plus_one: usize,
    pub tau: f64,
    pub gamma: f64,
    /// Central-difference step.
    pub h: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            in_dim: 5,
            out_dim: 4,
            batch: 6,
            k_plus_one: 4,
            tau: 0.05,
            gamma: 0.05,
            h: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (parameter group, floored relative error) pairs.
    pub groups: Vec<(String, f64)>,
    /// Set when the temperature is in the saturated regime where finite
    /// differences are unreliable; comparisons should not be enforced.
    pub ill_conditioned: bool,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Relative error with an absolute floor so near-zero gradients compare
/// absolutely at the 1e-3 scale.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Compare analytic gradients of a cross-entropy loss over one dense layer
/// (optionally soft-quantized) against central finite differences for every
/// parameter group.
pub fn grad_check(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ni, no, nb) = (cfg.in_dim, cfg.out_dim, cfg.batch);
    let x: Vec<f64> = (0..nb * ni).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..nb).map(|_| rng.random_range(0..no)).collect();
    let w0: Vec<f64> = (0..no * ni).map(|_| rng.random_range(-0.5..0.5)).collect();
    let b0: Vec<f64> = (0..no).map(|_| rng.random_range(-0.1..0.1)).collect();

    let gm0 = if cfg.k_plus_one >= 2 {
        let mut gm = kmeans_init(
            &w0,
            cfg.k_plus_one,
            seed,
            &GmInitOptions {
                gamma_init: crate::gm::GammaInit::Empirical(cfg.gamma),
                tau_init: cfg.tau,
                ..Default::default()
            },
        )?;
        gm.train_tau = true;
        Some(gm)
    } else {
        None
    };

    // Parameter vector layout: w, b, then mixture groups when present.
    let loss_fn = |w: &[f64], b: &[f64], gm: Option<&LayerGm>| -> Result<f64> {
        let mut tape = Tape::new();
        let xn = tape.leaf(Tensor::from_vec(&[nb, ni], x.clone())?);
        let wn = tape.leaf(Tensor::from_vec(&[no, ni], w.to_vec())?);
        let bn = tape.leaf(Tensor::from_vec(&[no], b.to_vec())?);
        let w_used = match gm {
            Some(gm) => {
                let mu = tape.leaf(Tensor::from_vec(&[gm.len()], gm.mus().to_vec())?);
                let pi = tape.leaf(Tensor::from_vec(&[gm.len()], gm.pi_param().to_vec())?);
                let lg = tape.leaf(Tensor::from_vec(&[gm.len()], gm.log_gamma().to_vec())?);
                let lt = tape.leaf(Tensor::from_vec(&[1], vec![gm.log_tau()])?);
                tape.soft_quantize(wn, mu, pi, lg, lt, gm)?
            }
            None => wn,
        };
        let y = tape.dense(xn, w_used, bn)?;
        let loss = tape.cross_entropy(y, &labels)?;
        Ok(tape.value(loss).item())
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let xn = tape.leaf(Tensor::from_vec(&[nb, ni], x.clone())?);
    let wn = tape.leaf(Tensor::from_vec(&[no, ni], w0.clone())?);
    let bn = tape.leaf(Tensor::from_vec(&[no], b0.clone())?);
    let mut gm_nodes = None;
    let w_used = match &gm0 {
        Some(gm) => {
            let mu = tape.leaf(Tensor::from_vec(&[gm.len()], gm.mus().to_vec())?);
            let pi = tape.leaf(Tensor::from_vec(&[gm.len()], gm.pi_param().to_vec())?);
            let lg = tape.leaf(Tensor::from_vec(&[gm.len()], gm.log_gamma().to_vec())?);
            let lt = tape.leaf(Tensor::from_vec(&[1], vec![gm.log_tau()])?);
            gm_nodes = Some((mu, pi, lg, lt));
            tape.soft_quantize(wn, mu, pi, lg, lt, gm)?
        }
        None => wn,
    };
    let y = tape.dense(xn, w_used, bn)?;
    let loss = tape.cross_entropy(y, &labels)?;
    let grads = tape.backward(loss);

    let h = cfg.h;
    let mut groups = Vec::new();

    let fd_group = |perturb: &mut dyn FnMut(usize, f64) -> Result<f64>, n: usize| -> Result<Vec<f64>> {
        (0..n)
            .map(|i| Ok((perturb(i, h)? - perturb(i, -h)?) / (2.0 * h)))
            .collect()
    };

    // Weights
    {
        let analytic = grads[wn].as_ref().expect("w grad").data().to_vec();
        let mut f = |i: usize, d: f64| -> Result<f64> {
            let mut w = w0.clone();
            w[i] += d;
            loss_fn(&w, &b0, gm0.as_ref())
        };
        let numeric = fd_group(&mut f, w0.len())?;
        let err = analytic.iter().zip(&numeric).map(|(a, n)| rel_err(*a, *n)).fold(0.0, f64::max);
        groups.push(("w".to_string(), err));
    }
    // Bias
    {
        let analytic = grads[bn].as_ref().expect("b grad").data().to_vec();
        let mut f = |i: usize, d: f64| -> Result<f64> {
            let mut b = b0.clone();
            b[i] += d;
            loss_fn(&w0, &b, gm0.as_ref())
        };
        let numeric = fd_group(&mut f, b0.len())?;
        let err = analytic.iter().zip(&numeric).map(|(a, n)| rel_err(*a, *n)).fold(0.0, f64::max);
        groups.push(("b".to_string(), err));
    }

    if let (Some(gm), Some((mu_n, pi_n, lg_n, lt_n))) = (&gm0, gm_nodes) {
        let kp1 = gm.len();
        // mu (skipping the frozen zero component)
        {
            let analytic = grads[mu_n].as_ref().expect("mu grad").data().to_vec();
            assert_eq!(analytic[0], 0.0, "zero component must not receive a gradient");
            let f = |i: usize, d: f64| -> Result<f64> {
                let mut g = gm.clone();
                g.mu_mut()[i] += d;
                loss_fn(&w0, &b0, Some(&g))
            };
            let mut err = 0.0f64;
            for i in 1..kp1 {
                let n = (f(i, h)? - f(i, -h)?) / (2.0 * h);
                err = err.max(rel_err(analytic[i], n));
            }
            groups.push(("mu".to_string(), err));
        }
        // pi logits
        {
            let analytic = grads[pi_n].as_ref().expect("pi grad").data().to_vec();
            let mut f = |i: usize, d: f64| -> Result<f64> {
                let mut g = gm.clone();
                g.pi_param_mut()[i] += d;
                loss_fn(&w0, &b0, Some(&g))
            };
            let numeric = fd_group(&mut f, kp1)?;
            let err =
                analytic.iter().zip(&numeric).map(|(a, n)| rel_err(*a, *n)).fold(0.0, f64::max);
            groups.push(("pi".to_string(), err));
        }
        // log gamma
        {
            let analytic = grads[lg_n].as_ref().expect("log_gamma grad").data().to_vec();
            let mut f = |i: usize, d: f64| -> Result<f64> {
                let mut g = gm.clone();
                g.log_gamma_mut()[i] += d;
                loss_fn(&w0, &b0, Some(&g))
            };
            let numeric = fd_group(&mut f, kp1)?;
            let err =
                analytic.iter().zip(&numeric).map(|(a, n)| rel_err(*a, *n)).fold(0.0, f64::max);
            groups.push(("log_gamma".to_string(), err));
        }
        // log tau
        {
            let analytic = grads[lt_n].as_ref().expect("log_tau grad").data()[0];
            let f = |d: f64| -> Result<f64> {
                let mut g = gm.clone();
                *g.log_tau_mut() += d;
                loss_fn(&w0, &b0, Some(&g))
            };
            let numeric = (f(h)? - f(-h)?) / (2.0 * h);
            groups.push(("log_tau".to_string(), rel_err(analytic, numeric)));
        }
    }

    Ok(GradCheckReport { groups, ill_conditioned: cfg.tau < 1e-5 })
}
