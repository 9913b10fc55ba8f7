//! Packed-codebook inference kernels and the benchmark harness.
//!
//! Kernels decode one byte of the index stream into 2 (4-bit) or 4 (2-bit)
//! centroid values through the extended codebook and accumulate in strict
//! element order with a single accumulator, so results are reproducible and
//! directly comparable against a dense reference running the same order.
//! The conv nest keeps output spatial iterations outermost: the gathered
//! input patch of a pixel is reused across all output channels and partial
//! sums stay local. Accumulation is f32 by default with an f64 mode for
//! oracle comparisons.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pack::{unpack_layer_f32, Layout, PackedLayer, PackedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccumMode {
    F32,
    F64,
}

/// Output-channel blocking knob for the conv nest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTiling {
    pub co_tile: usize,
}

impl Default for ConvTiling {
    fn default() -> Self {
        ConvTiling { co_tile: 8 }
    }
}

/// Iteration trace for the loop-order contract test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Image(usize),
    Pixel { oh: usize, ow: usize },
    Channel(usize),
}

#[inline]
fn decode_field(layer: &PackedLayer, elem: usize) -> f32 {
    let lanes = layer.lanes();
    let byte = layer.indices[elem / lanes] as usize;
    layer.extended[byte * lanes + elem % lanes]
}

/// Strict-order dot product between a packed weight row and a dense input
/// slice, decoding whole bytes through the extended codebook.
#[inline]
fn packed_row_dot(layer: &PackedLayer, row_start: usize, x: &[f32], mode: AccumMode) -> f32 {
    let lanes = layer.lanes();
    let ext = &layer.extended;
    let idx = &layer.indices;
    let end = row_start + x.len();
    match mode {
        AccumMode::F32 => {
            let mut acc = 0.0f32;
            let mut e = row_start;
            while e < end && e % lanes != 0 {
                acc += decode_field(layer, e) * x[e - row_start];
                e += 1;
            }
            while e + lanes <= end {
                let entry = &ext[(idx[e / lanes] as usize) * lanes..][..lanes];
                let xs = &x[e - row_start..e - row_start + lanes];
                for t in 0..lanes {
                    acc += entry[t] * xs[t];
                }
                e += lanes;
            }
            while e < end {
                acc += decode_field(layer, e) * x[e - row_start];
                e += 1;
            }
            acc
        }
        AccumMode::F64 => {
            let mut acc = 0.0f64;
            for e in row_start..end {
                acc += decode_field(layer, e) as f64 * x[e - row_start] as f64;
            }
            acc as f32
        }
    }
}

/// `y[n,o] = sum_i W[o,i] x[n,i] + bias[o]` over a packed dense layer.
pub fn packed_dense_matmul(
    x: &[f32],
    batch: usize,
    layer: &PackedLayer,
    mode: AccumMode,
) -> Result<Vec<f32>> {
    if layer.layout != Layout::RowMajor {
        return Err(Error::Config(format!(
            "packed_dense: layer {} has layout {:?}, expected RowMajor",
            layer.name, layer.layout
        )));
    }
    if layer.shape.len() != 2 {
        return Err(Error::Config(format!(
            "packed_dense: layer {} has shape {:?}, expected [O,I]",
            layer.name, layer.shape
        )));
    }
    let (o, i) = (layer.shape[0], layer.shape[1]);
    if x.len() != batch * i {
        return Err(Error::Config(format!(
            "packed_dense: input of {} values does not form {batch} rows of {i}",
            x.len()
        )));
    }
    if let Some(b) = &layer.bias {
        if b.len() != o {
            return Err(Error::Config(format!(
                "packed_dense: bias length {} != {o}",
                b.len()
            )));
        }
    }
    let mut y = vec![0.0f32; batch * o];
    for n in 0..batch {
        let xrow = &x[n * i..(n + 1) * i];
        for out in 0..o {
            let mut acc = packed_row_dot(layer, out * i, xrow, mode);
            if let Some(b) = &layer.bias {
                acc += b[out];
            }
            y[n * o + out] = acc;
        }
    }
    Ok(y)
}

/// Packed convolution. See [`packed_conv2d_traced`]; this is the production
/// entry point with the probe compiled out.
pub fn packed_conv2d(
    x: &[f32],
    batch: usize,
    h: usize,
    w: usize,
    layer: &PackedLayer,
    stride: usize,
    pad: usize,
    tiling: ConvTiling,
    mode: AccumMode,
) -> Result<Vec<f32>> {
    packed_conv2d_traced(x, batch, h, w, layer, stride, pad, tiling, mode, &mut |_| {})
}

/// Packed convolution with output spatial iterations outermost: for each
/// output pixel the input patch is gathered once and reused across every
/// output channel (blocked by `co_tile`); the reduction over the packed
/// weight row runs innermost.
#[allow(clippy::too_many_arguments)]
pub fn packed_conv2d_traced(
    x: &[f32],
    batch: usize,
    h: usize,
    w: usize,
    layer: &PackedLayer,
    stride: usize,
    pad: usize,
    tiling: ConvTiling,
    mode: AccumMode,
    probe: &mut dyn FnMut(TraceEvent),
) -> Result<Vec<f32>> {
    if layer.layout != Layout::OutputChannelMajor {
        return Err(Error::Config(format!(
            "packed_conv2d: layer {} has layout {:?}, expected OutputChannelMajor",
            layer.name, layer.layout
        )));
    }
    if layer.shape.len() != 4 {
        return Err(Error::Config(format!(
            "packed_conv2d: layer {} has shape {:?}, expected [CO,CI,KH,KW]",
            layer.name, layer.shape
        )));
    }
    let (co, ci, kh, kw) = (layer.shape[0], layer.shape[1], layer.shape[2], layer.shape[3]);
    if x.len() != batch * ci * h * w {
        return Err(Error::Config(format!(
            "packed_conv2d: input of {} values does not form {batch}x{ci}x{h}x{w}",
            x.len()
        )));
    }
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Config("packed_conv2d: invalid stride/pad for kernel".into()));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let ckk = ci * kh * kw;
    let co_tile = tiling.co_tile.max(1);

    let mut y = vec![0.0f32; batch * co * oh * ow];
    let mut patch = vec![0.0f32; ckk];
    for n in 0..batch {
        probe(TraceEvent::Image(n));
        let xim = &x[n * ci * h * w..(n + 1) * ci * h * w];
        for i in 0..oh {
            for j in 0..ow {
                probe(TraceEvent::Pixel { oh: i, ow: j });
                // Gather the input window once; padding reads as zero.
                let mut r = 0usize;
                for c in 0..ci {
                    for dh in 0..kh {
                        let ih = (i * stride + dh) as isize - pad as isize;
                        for dw in 0..kw {
                            let iw = (j * stride + dw) as isize - pad as isize;
                            patch[r] = if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize
                            {
                                0.0
                            } else {
                                xim[(c * h + ih as usize) * w + iw as usize]
                            };
                            r += 1;
                        }
                    }
                }
                let mut c0 = 0usize;
                while c0 < co {
                    let c1 = (c0 + co_tile).min(co);
                    for c in c0..c1 {
                        probe(TraceEvent::Channel(c));
                        let mut acc = packed_row_dot(layer, c * ckk, &patch, mode);
                        if let Some(b) = &layer.bias {
                            acc += b[c];
                        }
                        if let (Some(s), Some(t)) = (&layer.post_scale, &layer.post_shift) {
                            acc = s[c] * acc + t[c];
                        }
                        y[((n * co + c) * oh + i) * ow + j] = acc;
                    }
                    c0 = c1;
                }
            }
        }
    }
    Ok(y)
}

/// Dense f32 reference on unpacked weights with the same strict
/// accumulation order as the packed kernel.
pub fn dense_f32_reference(
    x: &[f32],
    batch: usize,
    weights: &[f32],
    bias: Option<&[f32]>,
    o: usize,
    i: usize,
) -> Vec<f32> {
    let mut y = vec![0.0f32; batch * o];
    for n in 0..batch {
        let xrow = &x[n * i..(n + 1) * i];
        for out in 0..o {
            let wrow = &weights[out * i..(out + 1) * i];
            let mut acc = 0.0f32;
            for t in 0..i {
                acc += wrow[t] * xrow[t];
            }
            if let Some(b) = bias {
                acc += b[out];
            }
            y[n * o + out] = acc;
        }
    }
    y
}

/// Conv f32 reference on unpacked weights: same patch gather and strict
/// reduction order as the packed kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_f32_reference(
    x: &[f32],
    batch: usize,
    h: usize,
    w: usize,
    weights: &[f32],
    bias: Option<&[f32]>,
    post: Option<(&[f32], &[f32])>,
    shape: &[usize],
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let (co, ci, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let ckk = ci * kh * kw;
    let mut y = vec![0.0f32; batch * co * oh * ow];
    let mut patch = vec![0.0f32; ckk];
    for n in 0..batch {
        let xim = &x[n * ci * h * w..(n + 1) * ci * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let mut r = 0usize;
                for c in 0..ci {
                    for dh in 0..kh {
                        let ih = (i * stride + dh) as isize - pad as isize;
                        for dw in 0..kw {
                            let iw = (j * stride + dw) as isize - pad as isize;
                            patch[r] = if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize
                            {
                                0.0
                            } else {
                                xim[(c * h + ih as usize) * w + iw as usize]
                            };
                            r += 1;
                        }
                    }
                }
                for c in 0..co {
                    let wrow = &weights[c * ckk..(c + 1) * ckk];
                    let mut acc = 0.0f32;
                    for t in 0..ckk {
                        acc += wrow[t] * patch[t];
                    }
                    if let Some(b) = bias {
                        acc += b[c];
                    }
                    if let Some((s, t)) = post {
                        acc = s[c] * acc + t[c];
                    }
                    y[((n * co + c) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    y
}

// ---------------------------------------------------------------------------
// Benchmark harness

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub batch: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Kernel threads. Only 1 is implemented; the flag exists so callers
    /// can assert the single-threaded default explicitly.
    pub threads: usize,
    /// Input spatial size used for conv layers.
    pub conv_hw: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { batch: 4, repeats: 20, seed: 0, threads: 1, conv_hw: 16 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub model: String,
    pub layer: String,
    pub path: &'static str,
    pub batch: usize,
    pub median_us: f64,
    pub iqr_us: f64,
    pub weight_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Set when `repeats` is too small for a stable median/IQR.
    pub low_confidence: bool,
    /// Largest relative difference seen in the pre-timing cross-check.
    pub max_rel_diff: f64,
}

fn median_iqr(mut xs: Vec<f64>) -> (f64, f64) {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    let q = |p: f64| -> f64 {
        if n == 1 {
            return xs[0];
        }
        let pos = p * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        xs[lo] + (xs[hi] - xs[lo]) * (pos - lo as f64)
    };
    (q(0.5), q(0.75) - q(0.25))
}

/// Time dense-FP32 vs packed kernels per layer on identical random inputs.
/// Outputs are cross-checked before any timing; warmup is 3 runs per path.
pub fn bench(model_name: &str, model: &PackedModel, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.threads != 1 {
        return Err(Error::Config("bench: only single-threaded timing is implemented".into()));
    }
    if cfg.repeats == 0 {
        return Err(Error::Config("bench: need at least one repeat".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    let mut max_rel_diff = 0.0f64;

    for layer in &model.layers {
        let n_elems = layer.elements();
        let dense_w = unpack_layer_f32(layer)?;
        let packed_bytes = layer.indices.len();
        let dense_bytes = n_elems * 4;

        let time_path = |f: &mut dyn FnMut() -> Vec<f32>| -> Vec<f64> {
            for _ in 0..3 {
                let _ = f();
            }
            (0..cfg.repeats)
                .map(|_| {
                    let t0 = Instant::now();
                    let out = f();
                    let dt = t0.elapsed().as_secs_f64() * 1e6;
                    std::hint::black_box(&out);
                    dt
                })
                .collect()
        };

        match layer.layout {
            Layout::RowMajor => {
                let (o, i) = (layer.shape[0], layer.shape[1]);
                let x: Vec<f32> =
                    (0..cfg.batch * i).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                let packed_out = packed_dense_matmul(&x, cfg.batch, layer, AccumMode::F32)?;
                let dense_out =
                    dense_f32_reference(&x, cfg.batch, &dense_w, layer.bias.as_deref(), o, i);
                for (a, b) in packed_out.iter().zip(&dense_out) {
                    let rel = (a - b).abs() as f64 / b.abs().max(1.0) as f64;
                    max_rel_diff = max_rel_diff.max(rel);
                }
                if max_rel_diff > 1e-5 {
                    return Err(Error::Numeric(format!(
                        "bench: layer {}: packed/dense cross-check diverged ({max_rel_diff:.2e})",
                        layer.name
                    )));
                }
                let packed_times = time_path(&mut || {
                    packed_dense_matmul(&x, cfg.batch, layer, AccumMode::F32).unwrap()
                });
                let dense_times = time_path(&mut || {
                    dense_f32_reference(&x, cfg.batch, &dense_w, layer.bias.as_deref(), o, i)
                });
                let (m, q) = median_iqr(dense_times);
                rows.push(BenchRow {
                    model: model_name.into(),
                    layer: layer.name.clone(),
                    path: "dense",
                    batch: cfg.batch,
                    median_us: m,
                    iqr_us: q,
                    weight_bytes: dense_bytes,
                });
                let (m, q) = median_iqr(packed_times);
                rows.push(BenchRow {
                    model: model_name.into(),
                    layer: layer.name.clone(),
                    path: "packed",
                    batch: cfg.batch,
                    median_us: m,
                    iqr_us: q,
                    weight_bytes: packed_bytes,
                });
            }
            Layout::OutputChannelMajor => {
                let (ci, kh) = (layer.shape[1], layer.shape[2]);
                let hw = cfg.conv_hw.max(kh);
                let pad = kh / 2;
                let x: Vec<f32> = (0..cfg.batch * ci * hw * hw)
                    .map(|_| rng.random_range(-1.0f32..1.0))
                    .collect();
                let tiling = ConvTiling::default();
                let packed_out =
                    packed_conv2d(&x, cfg.batch, hw, hw, layer, 1, pad, tiling, AccumMode::F32)?;
                let post = layer
                    .post_scale
                    .as_deref()
                    .zip(layer.post_shift.as_deref());
                let dense_out = conv2d_f32_reference(
                    &x,
                    cfg.batch,
                    hw,
                    hw,
                    &dense_w,
                    layer.bias.as_deref(),
                    post,
                    &layer.shape,
                    1,
                    pad,
                );
                for (a, b) in packed_out.iter().zip(&dense_out) {
                    let rel = (a - b).abs() as f64 / b.abs().max(1.0) as f64;
                    max_rel_diff = max_rel_diff.max(rel);
                }
                if max_rel_diff > 1e-5 {
                    return Err(Error::Numeric(format!(
                        "bench: layer {}: packed/dense cross-check diverged ({max_rel_diff:.2e})",
                        layer.name
                    )));
                }
                let packed_times = time_path(&mut || {
                    packed_conv2d(&x, cfg.batch, hw, hw, layer, 1, pad, tiling, AccumMode::F32)
                        .unwrap()
                });
                let dense_times = time_path(&mut || {
                    conv2d_f32_reference(
                        &x,
                        cfg.batch,
                        hw,
                        hw,
                        &dense_w,
                        layer.bias.as_deref(),
                        post,
                        &layer.shape,
                        1,
                        pad,
                    )
                });
                let (m, q) = median_iqr(dense_times);
                rows.push(BenchRow {
                    model: model_name.into(),
                    layer: layer.name.clone(),
                    path: "dense",
                    batch: cfg.batch,
                    median_us: m,
                    iqr_us: q,
                    weight_bytes: dense_bytes,
                });
                let (m, q) = median_iqr(packed_times);
                rows.push(BenchRow {
                    model: model_name.into(),
                    layer: layer.name.clone(),
                    path: "packed",
                    batch: cfg.batch,
                    median_us: m,
                    iqr_us: q,
                    weight_bytes: packed_bytes,
                });
            }
        }
    }
    let low_confidence = cfg.repeats < 4;
    if low_confidence {
        eprintln!(
            "warning: bench ran with {} repeat(s); medians are low-confidence",
            cfg.repeats
        );
    }
    Ok(BenchReport { rows, low_confidence, max_rel_diff })
}

pub fn write_bench_csv(path: &std::path::Path, report: &BenchReport) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "model,layer,path,batch,median_us,iqr_us,weight_bytes")?;
    for r in &report.rows {
        writeln!(
            f,
            "{},{},{},{},{:.3},{:.3},{}",
            r.model, r.layer, r.path, r.batch, r.median_us, r.iqr_us, r.weight_bytes
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gm::{GmComponent, LayerGm, PiMode};
    use crate::pack::{pack_layer, Layout};

    fn gm_from_mus(mus: &[f64]) -> LayerGm {
        let comps: Vec<GmComponent> = mus
            .iter()
            .map(|&mu| GmComponent { pi: 1.0 / mus.len() as f64, mu, gamma: 0.01 })
            .collect();
        LayerGm::from_components(&comps, 0.01, PiMode::Simplex).unwrap()
    }

    fn random_packed_dense(
        rng: &mut ChaCha8Rng,
        o: usize,
        i: usize,
        mus: &[f64],
        bits: u8,
    ) -> PackedLayer {
        let gm = gm_from_mus(mus);
        let w: Vec<f64> = (0..o * i).map(|_| mus[rng.random_range(0..mus.len())]).collect();
        pack_layer("fc", &w, &[o, i], &gm, bits, Layout::RowMajor).unwrap()
    }

    #[test]
    fn dense_gather_with_identity_codebook() {
        // Base (0,1); index rows selecting a permutation produce a gather.
        let gm = gm_from_mus(&[0.0, 1.0]);
        let w = vec![
            0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0, //
            1.0, 0.0, 0.0,
        ];
        let layer = pack_layer("p", &w, &[3, 3], &gm, 4, Layout::RowMajor).unwrap();
        let x = [7.0f32, -3.0, 2.5];
        let y = packed_dense_matmul(&x, 1, &layer, AccumMode::F32).unwrap();
        assert_eq!(y, vec![-3.0, 2.5, 7.0]);
    }

    #[test]
    fn dense_all_zero_indices_yield_bias() {
        let gm = gm_from_mus(&[0.0, 1.0]);
        let w = vec![0.0; 12];
        let mut layer = pack_layer("z", &w, &[3, 4], &gm, 4, Layout::RowMajor).unwrap();
        let x = [1.0f32; 4];
        let y = packed_dense_matmul(&x, 1, &layer, AccumMode::F32).unwrap();
        assert_eq!(y, vec![0.0; 3]);
        layer.bias = Some(vec![1.5, -2.0, 0.25]);
        let y = packed_dense_matmul(&x, 1, &layer, AccumMode::F32).unwrap();
        assert_eq!(y, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn dense_bit_exact_vs_fixed_order_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for bits in [2u8, 4] {
            for _ in 0..20 {
                let o = rng.random_range(1..9usize);
                let i = rng.random_range(1..17usize);
                let mus: Vec<f64> = std::iter::once(0.0)
                    .chain((0..3).map(|_| rng.random_range(-1.0..1.0)))
                    .collect();
                let layer = random_packed_dense(&mut rng, o, i, &mus, bits);
                let x: Vec<f32> =
                    (0..2 * i).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                let packed = packed_dense_matmul(&x, 2, &layer, AccumMode::F32).unwrap();
                let dense_w = unpack_layer_f32(&layer).unwrap();
                let reference = dense_f32_reference(&x, 2, &dense_w, None, o, i);
                for (a, b) in packed.iter().zip(&reference) {
                    assert_eq!(a.to_bits(), b.to_bits(), "accumulation order drifted");
                }
            }
        }
    }

    #[test]
    fn conv_matches_f64_oracle_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mus = [0.0, -0.4, 0.7, 1.1];
        let gm = gm_from_mus(&mus);
        let (co, ci, k) = (5usize, 3usize, 3usize);
        let w: Vec<f64> =
            (0..co * ci * k * k).map(|_| mus[rng.random_range(0..4)]).collect();
        let layer =
            pack_layer("c", &w, &[co, ci, k, k], &gm, 4, Layout::OutputChannelMajor).unwrap();
        let (h, wd) = (16usize, 16usize);
        let x: Vec<f32> =
            (0..2 * ci * h * wd).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let y =
            packed_conv2d(&x, 2, h, wd, &layer, 1, 1, ConvTiling::default(), AccumMode::F32)
                .unwrap();

        // f64 oracle through the naive 6-loop conv on unpacked weights.
        let xd: Vec<f64> = x.iter().map(|v| *v as f64).collect();
        let xt = crate::tensor::Tensor::from_vec(&[2, ci, h, wd], xd).unwrap();
        let wt = crate::tensor::Tensor::from_vec(&[co, ci, k, k], w.clone()).unwrap();
        let bt = crate::tensor::Tensor::zeros(&[co]);
        let want = crate::model::conv2d_naive(&xt, &wt, &bt, 1, 1).unwrap();
        for (a, b) in y.iter().zip(want.data()) {
            let rel = ((*a as f64) - b).abs() / b.abs().max(1.0);
            assert!(rel < 1e-5, "packed {a} vs oracle {b}");
        }
    }

    #[test]
    fn conv_1x1_all_ones_is_channel_sum() {
        let gm = gm_from_mus(&[0.0, 1.0]);
        let w = vec![1.0, 1.0, 1.0]; // co=1, ci=3, 1x1
        let layer = pack_layer("c", &w, &[1, 3, 1, 1], &gm, 4, Layout::OutputChannelMajor).unwrap();
        let x: Vec<f32> = vec![
            1.0, 2.0, 3.0, 4.0, // channel 0
            10.0, 20.0, 30.0, 40.0, // channel 1
            100.0, 200.0, 300.0, 400.0, // channel 2
        ];
        let y = packed_conv2d(&x, 1, 2, 2, &layer, 1, 0, ConvTiling::default(), AccumMode::F32)
            .unwrap();
        assert_eq!(y, vec![111.0, 222.0, 333.0, 444.0]);
    }

    #[test]
    fn conv_rejects_layout_mismatch() {
        let gm = gm_from_mus(&[0.0, 1.0]);
        let layer = pack_layer("c", &[0.0, 1.0], &[1, 2], &gm, 4, Layout::RowMajor).unwrap();
        let err = packed_conv2d(
            &[0.0; 2],
            1,
            1,
            2,
            &layer,
            1,
            0,
            ConvTiling::default(),
            AccumMode::F32,
        )
        .unwrap_err();
        assert!(err.to_string().contains("layout"), "{err}");
    }

    #[test]
    fn stream_padding_decodes_to_zero_and_kernels_ignore_it() {
        // 5 elements at 4 bits: final nibble is padding.
        let gm = gm_from_mus(&[0.0, 0.5]);
        let w = [0.5, 0.5, 0.5, 0.5, 0.5];
        let layer = pack_layer("t", &w, &[1, 5], &gm, 4, Layout::RowMajor).unwrap();
        assert_eq!(layer.pad, 1);
        // The pad field decodes to the zero centroid.
        let padded_elem = 5;
        assert_eq!(decode_field(&layer, padded_elem), 0.0);
        let x = [1.0f32; 5];
        let y = packed_dense_matmul(&x, 1, &layer, AccumMode::F32).unwrap();
        assert_eq!(y, vec![2.5]);
    }

    #[test]
    fn conv_loop_order_keeps_output_spatial_outermost() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mus = [0.0, 1.0, -1.0, 0.5];
        let gm = gm_from_mus(&mus);
        let (co, ci, k) = (5usize, 2usize, 3usize);
        let w: Vec<f64> =
            (0..co * ci * k * k).map(|_| mus[rng.random_range(0..4)]).collect();
        let layer =
            pack_layer("c", &w, &[co, ci, k, k], &gm, 4, Layout::OutputChannelMajor).unwrap();
        let (h, wd) = (4usize, 4usize);
        let x: Vec<f32> = (0..ci * h * wd).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let mut events = Vec::new();
        packed_conv2d_traced(
            &x,
            1,
            h,
            wd,
            &layer,
            1,
            1,
            ConvTiling { co_tile: 2 },
            AccumMode::F32,
            &mut |e| events.push(e),
        )
        .unwrap();

        // Pixels appear in row-major order, each exactly once, with the full
        // channel sweep nested inside before the next pixel begins.
        let mut pixel_seq = Vec::new();
        let mut channels_since_pixel = Vec::new();
        let mut per_pixel_channels = Vec::new();
        for e in &events {
            match e {
                TraceEvent::Image(_) => {}
                TraceEvent::Pixel { oh, ow } => {
                    if !channels_since_pixel.is_empty() {
                        per_pixel_channels.push(channels_since_pixel.clone());
                        channels_since_pixel.clear();
                    }
                    pixel_seq.push((*oh, *ow));
                }
                TraceEvent::Channel(c) => channels_since_pixel.push(*c),
            }
        }
        per_pixel_channels.push(channels_since_pixel);
        let want_pixels: Vec<(usize, usize)> =
            (0..h).flat_map(|i| (0..wd).map(move |j| (i, j))).collect();
        assert_eq!(pixel_seq, want_pixels);
        for chans in &per_pixel_channels {
            assert_eq!(chans, &(0..co).collect::<Vec<_>>());
        }
    }

    #[test]
    fn bench_smoke_and_low_confidence_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = random_packed_dense(&mut rng, 8, 16, &[0.0, 0.3, -0.2, 0.9], 4);
        let model = PackedModel { layers: vec![layer] };
        let report = bench(
            "test",
            &model,
            &BenchConfig { batch: 2, repeats: 1, ..Default::default() },
        )
        .unwrap();
        assert!(report.low_confidence);
        assert!(report.max_rel_diff <= 1e-5);
        assert_eq!(report.rows.len(), 2);
        // Weight-bytes estimate: N*b/8 packed vs N*4 dense.
        let dense_row = report.rows.iter().find(|r| r.path == "dense").unwrap();
        let packed_row = report.rows.iter().find(|r| r.path == "packed").unwrap();
        assert_eq!(dense_row.weight_bytes, 8 * 16 * 4);
        assert_eq!(packed_row.weight_bytes, 8 * 16 / 2);

        let ok = bench(
            "test",
            &model,
            &BenchConfig { batch: 2, repeats: 9, ..Default::default() },
        )
        .unwrap();
        assert!(!ok.low_confidence);
    }
}
