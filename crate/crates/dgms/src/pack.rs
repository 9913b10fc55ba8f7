//! Deployable form of a hard-quantized model: per-layer bit-packed index
//! streams plus codebooks, and the `QSMD` container format.
//!
//! Index packing is byte-aligned. At 4 bits a byte holds two indices, high
//! nibble first; at 2 bits it holds four, most-significant pair first. The
//! element count is padded up to the packing multiple with index 0 — the
//! zero centroid — so padded lanes contribute nothing to kernels. Each layer
//! carries two codebooks: the base table (K+1 centroids, kept at full f64
//! precision for audit and lossless unpacking) and the extended 256-entry
//! table whose entry `e` holds the 2 or 4 f32 centroid values selected by
//! the bit fields of `e`, letting kernels decode a whole byte at a time.
//! Exact byte layout in `docs/formats.md`.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gm::{hard_quantize, LayerGm};
use crate::model::LayerKind;
use crate::train::TrainState;

const QSMD_MAGIC: &[u8; 4] = b"QSMD";
const QSMD_VERSION: u16 = 1;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    RowMajor = 0,
    OutputChannelMajor = 1,
}

impl Layout {
    fn from_tag(tag: u8) -> Result<Layout> {
        match tag {
            0 => Ok(Layout::RowMajor),
            1 => Ok(Layout::OutputChannelMajor),
            other => Err(Error::Data(format!("packed: unknown layout tag {other}"))),
        }
    }
}

/// One bit-packed layer: index stream, codebooks, and shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedLayer {
    pub name: String,
    pub bits: u8,
    pub shape: Vec<usize>,
    pub layout: Layout,
    /// Number of padded index fields at the end of the stream.
    pub pad: u8,
    pub indices: Vec<u8>,
    /// Base codebook, K+1 centroids at full precision.
    pub base: Vec<f64>,
    /// Extended codebook: 256 entries of 8/bits f32 values each.
    pub extended: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    /// Folded batchnorm, applied per output channel after the kernel.
    pub post_scale: Option<Vec<f32>>,
    pub post_shift: Option<Vec<f32>>,
}

impl PackedLayer {
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    /// Values per packed byte (2 at 4 bits, 4 at 2 bits).
    pub fn lanes(&self) -> usize {
        (8 / self.bits) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PackedModel {
    pub layers: Vec<PackedLayer>,
}

fn check_bits(bits: u8) -> Result<()> {
    if bits != 2 && bits != 4 {
        return Err(Error::Config(format!("packed: bits must be 2 or 4, got {bits}")));
    }
    Ok(())
}

impl crate::gm::AdaptiveCodebook {
    /// Extended 256-entry table for this codebook at the given bit-width.
    pub fn extended(&self, bits: u8) -> Result<Vec<f32>> {
        build_extended_codebook(&self.values, bits)
    }
}

/// Full cross-product table: entry `e` holds the centroid values addressed
/// by the 8/bits fields of `e` (high field first). Base slots beyond K+1
/// read as 0.
pub fn build_extended_codebook(base: &[f64], bits: u8) -> Result<Vec<f32>> {
    check_bits(bits)?;
    let slots = 1usize << bits;
    if base.len() > slots {
        return Err(Error::Config(format!(
            "packed: {} centroids do not fit {bits}-bit indices",
            base.len()
        )));
    }
    let mut table = vec![0.0f32; slots];
    for (i, &v) in base.iter().enumerate() {
        table[i] = v as f32;
    }
    let lanes = (8 / bits) as usize;
    let mut ext = vec![0.0f32; 256 * lanes];
    for e in 0..256usize {
        for lane in 0..lanes {
            let shift = 8 - bits as usize * (lane + 1);
            let field = (e >> shift) & (slots - 1);
            ext[e * lanes + lane] = table[field];
        }
    }
    Ok(ext)
}

/// Pack component indices into bytes, high field first; returns the stream
/// and the number of padded fields (pad index is 0).
pub fn pack_indices(assign: &[usize], bits: u8) -> Result<(Vec<u8>, u8)> {
    check_bits(bits)?;
    let lanes = (8 / bits) as usize;
    let max = 1usize << bits;
    let padded = assign.len().div_ceil(lanes) * lanes;
    let pad = (padded - assign.len()) as u8;
    let mut bytes = vec![0u8; padded / lanes];
    for (i, &idx) in assign.iter().enumerate() {
        if idx >= max {
            return Err(Error::Config(format!(
                "packed: index {idx} at element {i} does not fit {bits} bits"
            )));
        }
        let shift = 8 - bits as usize * (i % lanes + 1);
        bytes[i / lanes] |= (idx as u8) << shift;
    }
    Ok((bytes, pad))
}

/// Decode `count` index fields from a packed stream.
pub fn unpack_indices(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<usize>> {
    check_bits(bits)?;
    let lanes = (8 / bits) as usize;
    if count > bytes.len() * lanes {
        return Err(Error::Data(format!(
            "packed: stream of {} bytes holds fewer than {count} fields",
            bytes.len()
        )));
    }
    let mask = (1usize << bits) - 1;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let shift = 8 - bits as usize * (i % lanes + 1);
        out.push(((bytes[i / lanes] as usize) >> shift) & mask);
    }
    Ok(out)
}

/// Convert a hard-quantized weight tensor into its packed form. Every value
/// must equal one of the mixture centroids exactly.
pub fn pack_layer(
    name: &str,
    weights: &[f64],
    shape: &[usize],
    gm: &LayerGm,
    bits: u8,
    layout: Layout,
) -> Result<PackedLayer> {
    check_bits(bits)?;
    if gm.len() > (1usize << bits) {
        return Err(Error::Config(format!(
            "packed: layer {name}: {} centroids do not fit {bits} bits",
            gm.len()
        )));
    }
    let n: usize = shape.iter().product();
    if n != weights.len() {
        return Err(Error::Config(format!(
            "packed: layer {name}: shape {shape:?} does not hold {} values",
            weights.len()
        )));
    }
    let base = gm.mus().to_vec();
    // Exact-value lookup; the first centroid owning a value wins.
    let mut lut: HashMap<u64, usize> = HashMap::new();
    for (k, &mu) in base.iter().enumerate() {
        lut.entry(mu.to_bits()).or_insert(k);
    }
    let mut assign = Vec::with_capacity(n);
    for (j, &w) in weights.iter().enumerate() {
        match lut.get(&w.to_bits()) {
            Some(&k) => assign.push(k),
            None => {
                return Err(Error::Config(format!(
                    "packed: layer {name}: value {w} at index {j} not found in codebook"
                )))
            }
        }
    }
    let (indices, pad) = pack_indices(&assign, bits)?;
    let extended = build_extended_codebook(&base, bits)?;
    Ok(PackedLayer {
        name: name.to_string(),
        bits,
        shape: shape.to_vec(),
        layout,
        pad,
        indices,
        base,
        extended,
        bias: None,
        post_scale: None,
        post_shift: None,
    })
}

/// Reconstruct the unpadded weight values at full precision via the base
/// codebook. Inverse of [`pack_layer`], bit-exact.
pub fn unpack_layer(layer: &PackedLayer) -> Result<Vec<f64>> {
    let idx = unpack_indices(&layer.indices, layer.bits, layer.elements())?;
    idx.iter()
        .map(|&k| {
            layer.base.get(k).copied().ok_or_else(|| {
                Error::Data(format!(
                    "packed: layer {}: index {k} outside base codebook",
                    layer.name
                ))
            })
        })
        .collect()
}

/// f32 view of the unpadded weights, the values the packed kernels see.
pub fn unpack_layer_f32(layer: &PackedLayer) -> Result<Vec<f32>> {
    Ok(unpack_layer(layer)?.into_iter().map(|v| v as f32).collect())
}

/// Export every quantized layer of a trained state into packed form.
/// Dense/conv biases ride along as f32; a batchnorm immediately following a
/// quantized conv is folded into a per-channel post-affine (the shared
/// codebook stays intact because weights themselves are untouched).
pub fn export_packed(state: &TrainState) -> Result<PackedModel> {
    let quant = state
        .quant
        .as_ref()
        .ok_or_else(|| Error::Config("export: state has no quantization to pack".into()))?;
    let bits = quant.policy.bits;
    check_bits(bits)?;
    let mut layers = Vec::new();
    let specs = &state.model.spec.layers;
    for (i, layer) in specs.iter().enumerate() {
        if !layer.kind.has_weights() || !quant.policy.is_quantized(&layer.name) {
            continue;
        }
        let gm = quant
            .gms
            .get(&layer.name)
            .ok_or_else(|| Error::Config(format!("export: no mixture state for {}", layer.name)))?;
        let w = state.model.param(&format!("{}.w", layer.name)).expect("weights");
        let hard = hard_quantize(w.data(), gm);
        let layout = match layer.kind {
            LayerKind::Conv2d { .. } => Layout::OutputChannelMajor,
            _ => Layout::RowMajor,
        };
        let mut packed = pack_layer(&layer.name, &hard, w.shape(), gm, bits, layout)?;
        if let Some(b) = state.model.param(&format!("{}.b", layer.name)) {
            packed.bias = Some(b.data().iter().map(|v| *v as f32).collect());
        }
        // Fold an immediately-following batchnorm.
        if let Some(next) = specs.get(i + 1) {
            if let LayerKind::BatchNorm { .. } = next.kind {
                let scale = state.model.param(&format!("{}.scale", next.name)).expect("bn scale");
                let shift = state.model.param(&format!("{}.shift", next.name)).expect("bn shift");
                let mean = state
                    .model
                    .running_stat(&format!("{}.running_mean", next.name))
                    .expect("bn mean");
                let var = state
                    .model
                    .running_stat(&format!("{}.running_var", next.name))
                    .expect("bn var");
                let mut ps = Vec::with_capacity(scale.len());
                let mut ph = Vec::with_capacity(scale.len());
                for c in 0..scale.len() {
                    let a = scale.data()[c] / (var.data()[c] + BN_EPS).sqrt();
                    ps.push(a as f32);
                    ph.push((shift.data()[c] - mean.data()[c] * a) as f32);
                }
                packed.post_scale = Some(ps);
                packed.post_shift = Some(ph);
            }
        }
        layers.push(packed);
    }
    Ok(PackedModel { layers })
}

fn push_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_packed_model(path: &Path, model: &PackedModel) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(QSMD_MAGIC);
    buf.extend_from_slice(&QSMD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for layer in &model.layers {
        check_bits(layer.bits)?;
        let nb = layer.name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(layer.bits);
        buf.push(layer.shape.len() as u8);
        for &d in &layer.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.push(layer.pad);
        buf.push(layer.layout as u8);
        match &layer.bias {
            Some(b) => {
                buf.push(1);
                buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
                push_f32s(&mut buf, b);
            }
            None => buf.push(0),
        }
        match (&layer.post_scale, &layer.post_shift) {
            (Some(s), Some(h)) if s.len() == h.len() => {
                buf.push(1);
                buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
                push_f32s(&mut buf, s);
                push_f32s(&mut buf, h);
            }
            (None, None) => buf.push(0),
            _ => return Err(Error::Config("packed: post-affine arrays out of sync".into())),
        }
        buf.extend_from_slice(&(layer.base.len() as u16).to_le_bytes());
        for v in &layer.base {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if layer.extended.len() != 256 * layer.lanes() {
            return Err(Error::Config(format!(
                "packed: layer {}: extended codebook has {} entries",
                layer.name,
                layer.extended.len()
            )));
        }
        push_f32s(&mut buf, &layer.extended);
        buf.extend_from_slice(&(layer.indices.len() as u64).to_le_bytes());
        buf.extend_from_slice(&layer.indices);
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data(format!(
                "packed: truncated while reading {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8v(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16v(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32v(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64v(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn read_packed_model(path: &Path) -> Result<PackedModel> {
    let buf = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != QSMD_MAGIC {
        return Err(Error::Data(format!(
            "packed: bad magic {magic:?} at offset 0 (expected \"QSMD\")"
        )));
    }
    let version = r.u16v("version")?;
    if version != QSMD_VERSION {
        return Err(Error::Data(format!("packed: unsupported version {version}")));
    }
    let count = r.u32v("layer count")? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16v("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::Data(format!("packed: non-utf8 layer name at offset {}", r.pos)))?;
        let bits = r.u8v("bits")?;
        check_bits(bits).map_err(|_| Error::Data(format!("packed: layer {name}: bad bits {bits}")))?;
        let ndims = r.u8v("rank")? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u32v("dim")? as usize);
        }
        let pad = r.u8v("pad")?;
        let layout = Layout::from_tag(r.u8v("layout")?)?;
        let bias = if r.u8v("bias flag")? == 1 {
            let n = r.u32v("bias length")? as usize;
            Some(r.f32s(n, "bias")?)
        } else {
            None
        };
        let (post_scale, post_shift) = if r.u8v("affine flag")? == 1 {
            let n = r.u32v("affine length")? as usize;
            (Some(r.f32s(n, "post scale")?), Some(r.f32s(n, "post shift")?))
        } else {
            (None, None)
        };
        let base_count = r.u16v("base codebook size")? as usize;
        if base_count == 0 || base_count > (1usize << bits) {
            return Err(Error::Data(format!(
                "packed: layer {name}: base codebook of {base_count} entries invalid for {bits} bits"
            )));
        }
        let base_raw = r.take(base_count * 8, "base codebook")?;
        let base: Vec<f64> = base_raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let lanes = (8 / bits) as usize;
        let extended = r.f32s(256 * lanes, "extended codebook")?;
        let index_len = r.u64v("index stream length")? as usize;
        let indices = r.take(index_len, "index stream")?.to_vec();

        let layer = PackedLayer {
            name,
            bits,
            shape,
            layout,
            pad,
            indices,
            base,
            extended,
            bias,
            post_scale,
            post_shift,
        };
        let n = layer.elements();
        if n.div_ceil(layer.lanes()) != layer.indices.len()
            || (layer.pad as usize) != layer.indices.len() * layer.lanes() - n
        {
            return Err(Error::Data(format!(
                "packed: layer {}: stream length/pad inconsistent with shape",
                layer.name
            )));
        }
        // Every index field, including padding, must address the base table.
        for (i, k) in unpack_indices(&layer.indices, layer.bits, n + layer.pad as usize)?
            .into_iter()
            .enumerate()
        {
            if k >= layer.base.len() {
                return Err(Error::Data(format!(
                    "packed: layer {}: field {i} holds index {k} outside base codebook",
                    layer.name
                )));
            }
        }
        layers.push(layer);
    }
    if r.pos != buf.len() {
        return Err(Error::Data(format!(
            "packed: {} trailing bytes at offset {}",
            buf.len() - r.pos,
            r.pos
        )));
    }
    Ok(PackedModel { layers })
}

/// Human-readable header dump for the `inspect` subcommand.
pub fn inspect_packed(model: &PackedModel) -> String {
    let mut out = String::new();
    out.push_str(&format!("QSMD v{QSMD_VERSION}: {} layer(s)\n", model.layers.len()));
    for l in &model.layers {
        out.push_str(&format!(
            "layer {:<12} bits={} shape={:?} layout={:?} pad={} elements={} index_bytes={} base={} bias={} affine={}\n",
            l.name,
            l.bits,
            l.shape,
            l.layout,
            l.pad,
            l.elements(),
            l.indices.len(),
            l.base.len(),
            l.bias.is_some(),
            l.post_scale.is_some(),
        ));
    }
    out
}
