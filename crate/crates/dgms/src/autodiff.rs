//! Minimal reverse-mode differentiation over a flat tape.
//!
//! The op set is exactly what the reference models need: dense and conv2d
//! layers, batchnorm (training statistics), relu, average pooling, flatten,
//! cross-entropy, and the soft mixture projection with its analytic backward
//! into weights, centroids, mixing-weight logits, log-gammas, and the
//! log-temperature. There is no general graph compiler.

use crate::error::{Error, Result};
use crate::gm::{self, LayerGm, SoftQuantCache};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

pub type NodeId = usize;

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Batch statistics a batchnorm op computed, exposed so the trainer can
/// maintain running estimates for inference.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dims: ConvDims,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        x: NodeId,
    },
    AvgPool {
        x: NodeId,
        k: usize,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Flatten {
        x: NodeId,
    },
    SoftQuantize {
        w: NodeId,
        mu: NodeId,
        pi: NodeId,
        log_gamma: NodeId,
        log_tau: NodeId,
        gm: LayerGm,
        cache: SoftQuantCache,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward computation; node ids index into the tape.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// `y[n,o] = sum_i x[n,i] * w[o,i] + b[o]`
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.nodes[x].value.shape(),
            self.nodes[w].value.shape(),
            self.nodes[b].value.shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::Config(format!(
                "dense: incompatible shapes x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; n * o];
        matmul_nt(
            self.nodes[x].value.data(),
            self.nodes[w].value.data(),
            &mut y,
            n,
            i,
            o,
        );
        let bias = self.nodes[b].value.data();
        for row in y.chunks_exact_mut(o) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        Ok(self.push(Tensor::from_vec(&[n, o], y)?, Op::Dense { x, w, b }))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        let bs = self.nodes[b].value.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::Config(format!(
                "conv2d: incompatible shapes x{xs:?} w{ws:?} b{bs:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        let (batch, ci, h, iw) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || iw + 2 * pad < kw {
            return Err(Error::Config(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{iw} (pad {pad})"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (iw + 2 * pad - kw) / stride + 1;
        let dims = ConvDims { batch, ci, h, w: iw, co, kh, kw, stride, pad, oh, ow };

        let ckk = ci * kh * kw;
        let spatial = oh * ow;
        let mut cols = vec![0.0; batch * ckk * spatial];
        for n in 0..batch {
            im2col(
                &self.nodes[x].value.data()[n * ci * h * iw..(n + 1) * ci * h * iw],
                &dims,
                &mut cols[n * ckk * spatial..(n + 1) * ckk * spatial],
            );
        }

        let wdata = self.nodes[w].value.data();
        let bias = self.nodes[b].value.data();
        let mut y = vec![0.0; batch * co * spatial];
        for n in 0..batch {
            let yslab = &mut y[n * co * spatial..(n + 1) * co * spatial];
            matmul_nn(
                wdata,
                &cols[n * ckk * spatial..(n + 1) * ckk * spatial],
                yslab,
                co,
                ckk,
                spatial,
            );
            for (c, chunk) in yslab.chunks_exact_mut(spatial).enumerate() {
                let bv = bias[c];
                for v in chunk.iter_mut() {
                    *v += bv;
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[batch, co, oh, ow], y)?,
            Op::Conv2d { x, w, b, dims, cols },
        ))
    }

    /// Training-mode batchnorm over (N,H,W) per channel. Returns the node
    /// and the batch statistics for running-average updates.
    pub fn batchnorm(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<(NodeId, BnStats)> {
        let xs = self.nodes[x].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Config(format!("batchnorm: expected NCHW input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.nodes[scale].value.len() != c || self.nodes[shift].value.len() != c {
            return Err(Error::Config("batchnorm: scale/shift length must equal channels".into()));
        }
        let m = (n * h * w) as f64;
        let plane = h * w;
        let data = self.nodes[x].value.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for v in &data[off..off + plane] {
                    s += v;
                }
            }
            mean[ch] = s / m;
            let mut ss = 0.0;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for v in &data[off..off + plane] {
                    let d = v - mean[ch];
                    ss += d * d;
                }
            }
            var[ch] = ss / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let sc = self.nodes[scale].value.data().to_vec();
        let sh = self.nodes[shift].value.data().to_vec();
        let mut y = vec![0.0; data.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in 0..plane {
                    y[off + i] = sc[ch] * (data[off + i] - mean[ch]) * inv_std[ch] + sh[ch];
                }
            }
        }
        let stats = BnStats { mean: mean.clone(), var: var.clone() };
        let id = self.push(
            Tensor::from_vec(&xs, y)?,
            Op::BatchNorm { x, scale, shift, mean, inv_std },
        );
        Ok((id, stats))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.nodes[x].value.data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x].value.shape().to_vec();
        self.push(Tensor::from_vec(&shape, y).unwrap(), Op::Relu { x })
    }

    /// Non-overlapping k x k average pooling (window == stride == k).
    pub fn avgpool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Config(format!("avgpool: expected NCHW input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Config(format!("avgpool: window {k} does not tile {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let data = self.nodes[x].value.data();
        let mut y = vec![0.0; n * c * oh * ow];
        let inv = 1.0 / (k * k) as f64;
        for b in 0..n {
            for ch in 0..c {
                let ioff = (b * c + ch) * h * w;
                let ooff = (b * c + ch) * oh * ow;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut s = 0.0;
                        for di in 0..k {
                            for dj in 0..k {
                                s += data[ioff + (i * k + di) * w + (j * k + dj)];
                            }
                        }
                        y[ooff + i * ow + j] = s * inv;
                    }
                }
            }
        }
        Ok(self.push(Tensor::from_vec(&[n, c, oh, ow], y)?, Op::AvgPool { x, k }))
    }

    pub fn global_avgpool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Config(format!("global_avgpool: expected NCHW input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let plane = h * w;
        let data = self.nodes[x].value.data();
        let mut y = vec![0.0; n * c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                y[b * c + ch] = data[off..off + plane].iter().sum::<f64>() / plane as f64;
            }
        }
        Ok(self.push(Tensor::from_vec(&[n, c], y)?, Op::GlobalAvgPool { x }))
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x].value.shape().to_vec();
        if xs.is_empty() {
            return Err(Error::Config("flatten: scalar input".into()));
        }
        let n = xs[0];
        let rest: usize = xs[1..].iter().product();
        let data = self.nodes[x].value.data().to_vec();
        Ok(self.push(Tensor::from_vec(&[n, rest], data)?, Op::Flatten { x }))
    }

    /// Soft mixture projection of a weight tensor. The mixture parameters
    /// enter as leaves so gradients land in their slots; `gm` must be the
    /// state those leaves were created from.
    pub fn soft_quantize(
        &mut self,
        w: NodeId,
        mu: NodeId,
        pi: NodeId,
        log_gamma: NodeId,
        log_tau: NodeId,
        gm: &LayerGm,
    ) -> Result<NodeId> {
        if self.nodes[mu].value.len() != gm.len()
            || self.nodes[pi].value.len() != gm.len()
            || self.nodes[log_gamma].value.len() != gm.len()
            || self.nodes[log_tau].value.len() != 1
        {
            return Err(Error::Config("soft_quantize: mixture leaf shapes out of sync".into()));
        }
        let shape = self.nodes[w].value.shape().to_vec();
        let cache = gm::soft_quantize_cached(self.nodes[w].value.data(), gm);
        let out = Tensor::from_vec(&shape, cache.out.clone())?;
        Ok(self.push(
            out,
            Op::SoftQuantize { w, mu, pi, log_gamma, log_tau, gm: gm.clone(), cache },
        ))
    }

    /// Mean negative log-softmax of the true class, with log-sum-exp
    /// stabilization. Produces a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ls = self.nodes[logits].value.shape().to_vec();
        if ls.len() != 2 {
            return Err(Error::Config(format!("cross_entropy: expected [N,C] logits, got {ls:?}")));
        }
        let (n, c) = (ls[0], ls[1]);
        if n == 0 {
            return Err(Error::Config("cross_entropy: empty batch".into()));
        }
        if labels.len() != n {
            return Err(Error::Data(format!(
                "cross_entropy: {n} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("cross_entropy: label {bad} out of range (C={c})")));
        }
        let data = self.nodes[logits].value.data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * c + j] = e;
                sum += e;
            }
            for v in &mut probs[i * c..(i + 1) * c] {
                *v /= sum;
            }
            // -log softmax(true) = log(sum exp(shifted)) - shifted(true)
            loss += sum.ln() - (row[labels[i]] - max);
        }
        loss /= n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Reverse sweep from a scalar root; returns one gradient slot per node
    /// (None where no gradient flowed).
    pub fn backward(&self, root: NodeId) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        grads
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: &[f64]) {
        let slot = grads[id].get_or_insert_with(|| Tensor::zeros(self.nodes[id].value.shape()));
        for (g, d) in slot.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn accumulate_inputs(&self, id: NodeId, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let xs = self.nodes[*x].value.shape();
                let ws = self.nodes[*w].value.shape();
                let (n, i, o) = (xs[0], xs[1], ws[0]);
                let gy = g.data();
                let mut gx = vec![0.0; n * i];
                matmul_nn(gy, self.nodes[*w].value.data(), &mut gx, n, o, i);
                let mut gw = vec![0.0; o * i];
                matmul_tn(gy, self.nodes[*x].value.data(), &mut gw, o, n, i);
                let mut gb = vec![0.0; o];
                for row in gy.chunks_exact(o) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.add_grad(grads, *x, &gx);
                self.add_grad(grads, *w, &gw);
                self.add_grad(grads, *b, &gb);
            }
            Op::Conv2d { x, w, b, dims, cols } => {
                let d = *dims;
                let ckk = d.ci * d.kh * d.kw;
                let spatial = d.oh * d.ow;
                let gy = g.data();
                let wdata = self.nodes[*w].value.data();

                let mut gw = vec![0.0; d.co * ckk];
                let mut gx = vec![0.0; d.batch * d.ci * d.h * d.w];
                let mut gcols = vec![0.0; ckk * spatial];
                let mut gw_n = vec![0.0; d.co * ckk];
                for n in 0..d.batch {
                    let gslab = &gy[n * d.co * spatial..(n + 1) * d.co * spatial];
                    let cslab = &cols[n * ckk * spatial..(n + 1) * ckk * spatial];
                    matmul_nt(gslab, cslab, &mut gw_n, d.co, spatial, ckk);
                    for (acc, v) in gw.iter_mut().zip(&gw_n) {
                        *acc += v;
                    }
                    matmul_tn(wdata, gslab, &mut gcols, ckk, d.co, spatial);
                    col2im_add(
                        &gcols,
                        &d,
                        &mut gx[n * d.ci * d.h * d.w..(n + 1) * d.ci * d.h * d.w],
                    );
                }
                let mut gb = vec![0.0; d.co];
                for n in 0..d.batch {
                    for c in 0..d.co {
                        let off = (n * d.co + c) * spatial;
                        gb[c] += gy[off..off + spatial].iter().sum::<f64>();
                    }
                }
                self.add_grad(grads, *x, &gx);
                self.add_grad(grads, *w, &gw);
                self.add_grad(grads, *b, &gb);
            }
            Op::BatchNorm { x, scale, shift, mean, inv_std } => {
                let xs = self.nodes[*x].value.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plane = h * w;
                let m = (n * plane) as f64;
                let xd = self.nodes[*x].value.data();
                let sc = self.nodes[*scale].value.data();
                let gy = g.data();

                let mut gscale = vec![0.0; c];
                let mut gshift = vec![0.0; c];
                let mut gx = vec![0.0; xd.len()];
                for ch in 0..c {
                    // First pass: sums of dy and dy*xhat.
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        for i in 0..plane {
                            let xhat = (xd[off + i] - mean[ch]) * inv_std[ch];
                            sum_dy += gy[off + i];
                            sum_dy_xhat += gy[off + i] * xhat;
                        }
                    }
                    gscale[ch] = sum_dy_xhat;
                    gshift[ch] = sum_dy;
                    let k1 = sc[ch] * inv_std[ch];
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        for i in 0..plane {
                            let xhat = (xd[off + i] - mean[ch]) * inv_std[ch];
                            gx[off + i] =
                                k1 * (gy[off + i] - sum_dy / m - xhat * sum_dy_xhat / m);
                        }
                    }
                }
                self.add_grad(grads, *x, &gx);
                self.add_grad(grads, *scale, &gscale);
                self.add_grad(grads, *shift, &gshift);
            }
            Op::Relu { x } => {
                let xd = self.nodes[*x].value.data();
                let gx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xd)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.add_grad(grads, *x, &gx);
            }
            Op::AvgPool { x, k } => {
                let xs = self.nodes[*x].value.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                let gy = g.data();
                let mut gx = vec![0.0; n * c * h * w];
                for b in 0..n {
                    for ch in 0..c {
                        let ioff = (b * c + ch) * h * w;
                        let ooff = (b * c + ch) * oh * ow;
                        for i in 0..oh {
                            for j in 0..ow {
                                let gv = gy[ooff + i * ow + j] * inv;
                                for di in 0..*k {
                                    for dj in 0..*k {
                                        gx[ioff + (i * k + di) * w + (j * k + dj)] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                self.add_grad(grads, *x, &gx);
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.nodes[*x].value.shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let plane = h * w;
                let inv = 1.0 / plane as f64;
                let gy = g.data();
                let mut gx = vec![0.0; n * c * plane];
                for b in 0..n {
                    for ch in 0..c {
                        let gv = gy[b * c + ch] * inv;
                        let off = (b * c + ch) * plane;
                        for v in &mut gx[off..off + plane] {
                            *v += gv;
                        }
                    }
                }
                self.add_grad(grads, *x, &gx);
            }
            Op::Flatten { x } => {
                self.add_grad(grads, *x, g.data());
            }
            Op::SoftQuantize { w, mu, pi, log_gamma, log_tau, gm, cache } => {
                let out = gm::soft_quantize_backward(
                    self.nodes[*w].value.data(),
                    gm,
                    cache,
                    g.data(),
                );
                self.add_grad(grads, *w, &out.w);
                self.add_grad(grads, *mu, &out.mu);
                self.add_grad(grads, *pi, &out.pi_param);
                self.add_grad(grads, *log_gamma, &out.log_gamma);
                self.add_grad(grads, *log_tau, &[out.log_tau]);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let ls = self.nodes[*logits].value.shape();
                let (n, c) = (ls[0], ls[1]);
                let scale = g.item() / n as f64;
                let mut gl = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    gl[i * c + label] -= 1.0;
                }
                for v in &mut gl {
                    *v *= scale;
                }
                self.add_grad(grads, *logits, &gl);
            }
        }
    }
}

fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let spatial = d.oh * d.ow;
    for c in 0..d.ci {
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let row = ((c * d.kh + kh) * d.kw + kw) * spatial;
                for oh in 0..d.oh {
                    let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                    if ih < 0 || ih >= d.h as isize {
                        // Stays zero (cols is pre-zeroed).
                        continue;
                    }
                    let ih = ih as usize;
                    for ow in 0..d.ow {
                        let iw = (ow * d.stride + kw) as isize - d.pad as isize;
                        if iw < 0 || iw >= d.w as isize {
                            continue;
                        }
                        cols[row + oh * d.ow + ow] = x[(c * d.h + ih) * d.w + iw as usize];
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], d: &ConvDims, x: &mut [f64]) {
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
                    let ih = ih as usize;
                    for ow in 0..d.ow {
                        let iw = (ow * d.stride + kw) as isize - d.pad as isize;
                        if iw < 0 || iw >= d.w as isize {
                            continue;
                        }
                        x[(c * d.h + ih) * d.w + iw as usize] += cols[row + oh * d.ow + ow];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gm::{GmComponent, PiMode};

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let c = 7usize;
        let logits = tape.leaf(Tensor::from_vec(&[2, c], vec![0.3; 2 * c]).unwrap());
        let loss = tape.cross_entropy(logits, &[0, 4]).unwrap();
        assert!((tape.value(loss).item() - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_and_reference() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 30.0]).unwrap());
        let loss = tape.cross_entropy(logits, &[2]).unwrap();
        assert!(tape.value(loss).item() <= 1e-9);

        // -ln(e^3 / (e + e^2 + e^3))
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = tape.cross_entropy(logits, &[2]).unwrap();
        let want = -((3.0f64).exp() / (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp())).ln();
        assert!((want - 0.40761).abs() < 5e-6);
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_empty_and_bad_labels() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_vec(&[0, 3], vec![]).unwrap());
        assert!(tape.cross_entropy(logits, &[]).is_err());

        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_vec(&[1, 3], vec![0.0; 3]).unwrap());
        assert!(tape.cross_entropy(logits, &[3]).is_err());
    }

    #[test]
    fn dense_identity_passthrough() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = tape.leaf(Tensor::from_vec(&[3, 3], eye).unwrap());
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn dense_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let w = tape.leaf(Tensor::zeros(&[4, 5]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        assert!(tape.dense(x, w, b).is_err());
    }

    #[test]
    fn conv_identity_1x1_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    // Finite-difference check of every op in one small network.
    fn fd_loss(params: &[f64]) -> f64 {
        // params: 4 input pixels (1x1x2x2), 4 conv weights (1x1x2x2), 1 bias
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 2, 2], params[0..4].to_vec()).unwrap());
        let w = tape.leaf(Tensor::from_vec(&[1, 1, 2, 2], params[4..8].to_vec()).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[1], vec![params[8]]).unwrap());
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let r = tape.relu(y);
        let p = tape.avgpool(r, 1).unwrap();
        let gp = tape.global_avgpool(p).unwrap();
        let loss = tape.cross_entropy(gp, &[0]).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn conv_relu_pool_gradients_match_finite_differences() {
        let params: Vec<f64> = vec![0.5, -0.3, 0.8, 0.2, 0.4, -0.7, 0.1, 0.9, 0.05];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 2, 2], params[0..4].to_vec()).unwrap());
        let w = tape.leaf(Tensor::from_vec(&[1, 1, 2, 2], params[4..8].to_vec()).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[1], vec![params[8]]).unwrap());
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let r = tape.relu(y);
        let p = tape.avgpool(r, 1).unwrap();
        let gp = tape.global_avgpool(p).unwrap();
        let loss = tape.cross_entropy(gp, &[0]).unwrap();
        let grads = tape.backward(loss);

        let analytic: Vec<f64> = grads[x]
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .chain(grads[w].as_ref().unwrap().data())
            .chain(grads[b].as_ref().unwrap().data())
            .cloned()
            .collect();

        let h = 1e-6;
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            plus[i] += h;
            let mut minus = params.clone();
            minus[i] -= h;
            let fd = (fd_loss(&plus) - fd_loss(&minus)) / (2.0 * h);
            assert!(
                (a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1.0),
                "param {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn soft_quantize_constant_centroids_zero_weight_grad() {
        // All centroids equal: the projection is constant in w, so the
        // loss gradient with respect to every weight vanishes.
        let gm = LayerGm::from_components(
            &[
                GmComponent { pi: 0.5, mu: 0.0, gamma: 0.3 },
                GmComponent { pi: 0.5, mu: 0.0, gamma: 0.7 },
            ],
            0.05,
            PiMode::Simplex,
        )
        .unwrap();
        let w = [0.2, -0.4, 0.9];
        let cache = gm::soft_quantize_cached(&w, &gm);
        let grads = gm::soft_quantize_backward(&w, &gm, &cache, &[1.0, 1.0, 1.0]);
        for gw in grads.w {
            assert!(gw.abs() < 1e-14, "expected zero weight grad, got {gw}");
        }
        // Frozen zero component never receives a centroid gradient.
        assert_eq!(grads.mu[0], 0.0);
    }

    #[test]
    fn soft_quantize_on_tape_routes_gradients_to_mixture_leaves() {
        let gm = LayerGm::from_components(
            &[
                GmComponent { pi: 0.5, mu: 0.0, gamma: 0.2 },
                GmComponent { pi: 0.5, mu: 0.8, gamma: 0.2 },
            ],
            0.05,
            PiMode::Simplex,
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 3], vec![0.4, -1.0, 0.6]).unwrap());
        let w = tape.leaf(Tensor::from_vec(&[2, 3], vec![0.1, 0.7, -0.2, 0.75, 0.05, 0.3]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[2]));
        let mu = tape.leaf(Tensor::from_vec(&[2], gm.mus().to_vec()).unwrap());
        let pi = tape.leaf(Tensor::from_vec(&[2], gm.pi_param().to_vec()).unwrap());
        let lg = tape.leaf(Tensor::from_vec(&[2], gm.log_gamma().to_vec()).unwrap());
        let lt = tape.leaf(Tensor::from_vec(&[1], vec![gm.log_tau()]).unwrap());
        let q = tape.soft_quantize(w, mu, pi, lg, lt, &gm).unwrap();
        let y = tape.dense(x, q, b).unwrap();
        let loss = tape.cross_entropy(y, &[1]).unwrap();
        let grads = tape.backward(loss);
        for node in [w, mu, pi, lg, lt] {
            assert!(grads[node].is_some(), "missing gradient for node {node}");
        }
        assert_eq!(grads[mu].as_ref().unwrap().data()[0], 0.0);
    }
}
