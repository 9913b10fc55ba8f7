//! Checkpoint persistence.
//!
//! Model checkpoints are binary: magic `DGMS`, a version word, run metadata
//! (seed, step), and a tensor table of named little-endian f64 payloads.
//! Mixture state travels separately as a structured text document (one block
//! per layer) whose values are printed with 17 significant digits, enough to
//! reproduce every f64 bit-exactly; the raw trainable parameterization is
//! included alongside the distribution arrays so a reload restores training
//! state without drift. Both formats are documented in `docs/formats.md`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gm::{LayerGm, PiMode};
use crate::tensor::Tensor;

const CKPT_MAGIC: &[u8; 4] = b"DGMS";
const CKPT_VERSION: u32 = 1;
const GM_HEADER: &str = "DGMS-GM v1";

/// Serialized training state: tensors in a fixed order plus run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ckpt.seed.to_le_bytes());
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &ckpt.tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Config(format!("checkpoint: tensor name too long: {name}")));
        }
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(0); // dtype tag: f64
        let shape = tensor.shape();
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
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
                "checkpoint: truncated while reading {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::Data(format!(
            "checkpoint: bad magic {magic:?} at offset 0 (expected \"DGMS\")"
        )));
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::Data(format!(
            "checkpoint: unsupported version {version} (expected {CKPT_VERSION})"
        )));
    }
    let seed = r.u64("seed")?;
    let step = r.u64("step")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::Data(format!("checkpoint: non-utf8 name at offset {}", r.pos)))?;
        let dtype = r.u8("dtype tag")?;
        if dtype != 0 {
            return Err(Error::Data(format!(
                "checkpoint: unknown dtype tag {dtype} for {name}"
            )));
        }
        let ndims = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u32("dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 8, "payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Data(format!(
            "checkpoint: {} trailing bytes at offset {}",
            buf.len() - r.pos,
            r.pos
        )));
    }
    Ok(Checkpoint { seed, step, tensors })
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_array(out: &mut String, key: &str, values: &[f64]) {
    out.push_str(key);
    for v in values {
        out.push(' ');
        out.push_str(&fmt17(*v));
    }
    out.push('\n');
}

/// Write the per-layer mixture state. Layers are sorted by name so output
/// is canonical.
pub fn save_gm(path: &Path, gms: &BTreeMap<String, LayerGm>) -> Result<()> {
    let mut out = String::new();
    out.push_str(GM_HEADER);
    out.push('\n');
    out.push_str(&format!("layers {}\n", gms.len()));
    for (name, gm) in gms {
        let comps = gm.components();
        out.push_str(&format!("layer {name}\n"));
        out.push_str(&format!("k {}\n", gm.k()));
        out.push_str(&format!(
            "pi_mode {}\n",
            match gm.pi_mode() {
                PiMode::Simplex => "simplex",
                PiMode::Unconstrained => "unconstrained",
            }
        ));
        out.push_str(&format!("tau {}\n", fmt17(gm.tau())));
        write_array(&mut out, "pi", &comps.iter().map(|c| c.pi).collect::<Vec<_>>());
        write_array(&mut out, "mu", &comps.iter().map(|c| c.mu).collect::<Vec<_>>());
        write_array(&mut out, "gamma", &comps.iter().map(|c| c.gamma).collect::<Vec<_>>());
        // Raw trainable parameterization for bit-exact restore.
        write_array(&mut out, "pi_param", gm.pi_param());
        write_array(&mut out, "log_gamma", gm.log_gamma());
        out.push_str(&format!("log_tau {}\n", fmt17(gm.log_tau())));
        out.push_str(&format!("degenerate {}\n", gm.degenerate_components()));
        out.push_str("end\n");
    }
    fs::write(path, out)?;
    Ok(())
}

fn parse_f64(tok: &str, line_no: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::Data(format!("gm file: bad number {tok:?} on line {line_no}")))
}

fn parse_array(rest: &str, line_no: usize) -> Result<Vec<f64>> {
    rest.split_whitespace().map(|t| parse_f64(t, line_no)).collect()
}

pub fn load_gm(path: &Path) -> Result<BTreeMap<String, LayerGm>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == GM_HEADER => {}
        other => {
            return Err(Error::Data(format!(
                "gm file: bad header {:?} (expected {GM_HEADER:?})",
                other.map(|(_, l)| l).unwrap_or("")
            )))
        }
    }
    let declared = match lines.next() {
        Some((no, l)) if l.starts_with("layers ") => {
            l["layers ".len()..].trim().parse::<usize>().map_err(|_| {
                Error::Data(format!("gm file: bad layer count on line {}", no + 1))
            })?
        }
        _ => return Err(Error::Data("gm file: missing layer count".into())),
    };

    let mut gms = BTreeMap::new();
    let mut cur: Option<String> = None;
    let mut k: Option<usize> = None;
    let mut pi_mode = PiMode::Simplex;
    let mut tau: Option<f64> = None;
    let mut pi: Option<Vec<f64>> = None;
    let mut mu: Option<Vec<f64>> = None;
    let mut gamma: Option<Vec<f64>> = None;
    let mut pi_param: Option<Vec<f64>> = None;
    let mut log_gamma: Option<Vec<f64>> = None;
    let mut log_tau: Option<f64> = None;
    let mut degenerate = 0usize;

    for (no, line) in lines {
        let line_no = no + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, rest) = match line.split_once(' ') {
            Some((k, r)) => (k, r.trim()),
            None => (line, ""),
        };
        match key {
            "layer" => {
                if cur.is_some() {
                    return Err(Error::Data(format!(
                        "gm file: layer block not closed before line {line_no}"
                    )));
                }
                cur = Some(rest.to_string());
                k = None;
                pi_mode = PiMode::Simplex;
                tau = None;
                pi = None;
                mu = None;
                gamma = None;
                pi_param = None;
                log_gamma = None;
                log_tau = None;
                degenerate = 0;
            }
            "k" => k = Some(rest.parse().map_err(|_| Error::Data(format!("gm file: bad k on line {line_no}")))?),
            "pi_mode" => {
                pi_mode = match rest {
                    "simplex" => PiMode::Simplex,
                    "unconstrained" => PiMode::Unconstrained,
                    other => {
                        return Err(Error::Data(format!(
                            "gm file: unknown pi_mode {other:?} on line {line_no}"
                        )))
                    }
                }
            }
            "tau" => tau = Some(parse_f64(rest, line_no)?),
            "pi" => pi = Some(parse_array(rest, line_no)?),
            "mu" => mu = Some(parse_array(rest, line_no)?),
            "gamma" => gamma = Some(parse_array(rest, line_no)?),
            "pi_param" => pi_param = Some(parse_array(rest, line_no)?),
            "log_gamma" => log_gamma = Some(parse_array(rest, line_no)?),
            "log_tau" => log_tau = Some(parse_f64(rest, line_no)?),
            "degenerate" => {
                degenerate = rest
                    .parse()
                    .map_err(|_| Error::Data(format!("gm file: bad degenerate count on line {line_no}")))?
            }
            "end" => {
                let name = cur.take().ok_or_else(|| {
                    Error::Data(format!("gm file: stray end on line {line_no}"))
                })?;
                let k = k.ok_or_else(|| Error::Data(format!("gm file: layer {name}: missing k")))?;
                let tau = tau.ok_or_else(|| Error::Data(format!("gm file: layer {name}: missing tau")))?;
                let mu = mu.take().ok_or_else(|| Error::Data(format!("gm file: layer {name}: missing mu")))?;
                let pi = pi.take().ok_or_else(|| Error::Data(format!("gm file: layer {name}: missing pi")))?;
                let gamma = gamma
                    .take()
                    .ok_or_else(|| Error::Data(format!("gm file: layer {name}: missing gamma")))?;
                let kp1 = k + 1;
                if mu.len() != kp1 || pi.len() != kp1 || gamma.len() != kp1 {
                    return Err(Error::Data(format!(
                        "gm file: layer {name}: arrays must have k+1 = {kp1} entries"
                    )));
                }
                if !(tau > 0.0) {
                    return Err(Error::Data(format!(
                        "gm file: layer {name}: tau must be positive, got {tau}"
                    )));
                }
                for (i, &g) in gamma.iter().enumerate() {
                    if !(g > 0.0) || !g.is_finite() {
                        return Err(Error::Data(format!(
                            "gm file: layer {name}: gamma[{i}] = {g} must be positive"
                        )));
                    }
                }
                for (i, &p) in pi.iter().enumerate() {
                    if p < 0.0 || !p.is_finite() {
                        return Err(Error::Data(format!(
                            "gm file: layer {name}: pi[{i}] = {p} must be nonnegative"
                        )));
                    }
                }
                if mu[0] != 0.0 {
                    return Err(Error::Data(format!(
                        "gm file: layer {name}: mu[0] must be exactly 0, got {}",
                        mu[0]
                    )));
                }
                // Prefer the raw parameterization when present; otherwise
                // derive it from the distribution arrays.
                let pi_param = match pi_param.take() {
                    Some(p) if p.len() == kp1 => p,
                    Some(_) => {
                        return Err(Error::Data(format!(
                            "gm file: layer {name}: pi_param length mismatch"
                        )))
                    }
                    None => match pi_mode {
                        PiMode::Simplex => {
                            pi.iter().map(|p| p.max(crate::gm::PI_FLOOR).ln()).collect()
                        }
                        PiMode::Unconstrained => pi.clone(),
                    },
                };
                let log_gamma = match log_gamma.take() {
                    Some(g) if g.len() == kp1 => g,
                    Some(_) => {
                        return Err(Error::Data(format!(
                            "gm file: layer {name}: log_gamma length mismatch"
                        )))
                    }
                    None => gamma.iter().map(|g| g.ln()).collect(),
                };
                let log_tau = log_tau.take().unwrap_or_else(|| tau.ln());
                let gm = LayerGm::from_raw(mu, pi_param, log_gamma, log_tau, pi_mode, degenerate)?;
                gms.insert(name, gm);
            }
            other => {
                return Err(Error::Data(format!(
                    "gm file: unknown key {other:?} on line {line_no}"
                )))
            }
        }
    }
    if cur.is_some() {
        return Err(Error::Data("gm file: unterminated layer block".into()));
    }
    if gms.len() != declared {
        return Err(Error::Data(format!(
            "gm file: declared {declared} layers but found {}",
            gms.len()
        )));
    }
    Ok(gms)
}
