//! Gaussian-mixture weight sharing: the uniform baseline quantizer, mixture
//! responsibilities, temperature-softmax soft indicators, soft/hard
//! projections, and k-means initialization.
//!
//! A layer's mixture has K+1 components; component 0 is the zero component,
//! whose centroid is pinned at exactly 0.0 and never updated. Assignments to
//! it are what produce sparsity.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floor for component standard deviations.
pub const GAMMA_MIN: f64 = 1e-4;
/// Floor for the temperature.
pub const TAU_MIN: f64 = 1e-6;
/// Floor applied to mixing weights before taking logs for the simplex
/// parameterization; keeps dead components representable.
pub const PI_FLOOR: f64 = 1e-12;

static GAMMA_CLAMP_WARNINGS: AtomicU64 = AtomicU64::new(0);

/// Number of times a below-floor gamma was clamped so far in this process.
pub fn gamma_clamp_warnings() -> u64 {
    GAMMA_CLAMP_WARNINGS.load(Ordering::Relaxed)
}

pub fn reset_gamma_clamp_warnings() {
    GAMMA_CLAMP_WARNINGS.store(0, Ordering::Relaxed);
}

fn clamp_gamma(gamma: f64) -> f64 {
    if gamma < GAMMA_MIN {
        GAMMA_CLAMP_WARNINGS.fetch_add(1, Ordering::Relaxed);
        GAMMA_MIN
    } else {
        gamma
    }
}

/// One mixture component: mixing weight, centroid, standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmComponent {
    pub pi: f64,
    pub mu: f64,
    pub gamma: f64,
}

/// How the mixing weights are parameterized during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiMode {
    /// Logits mapped through a softmax; weights always sum to 1.
    Simplex,
    /// Raw values trained directly, with no normalization.
    Unconstrained,
}

/// Gamma initialization mode for [`kmeans_init`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaInit {
    /// Pooled standard deviation of all weights around each centroid.
    Std,
    /// A fixed constant (0.01 tends to work best at low bit-widths).
    Empirical(f64),
}

/// Options for [`kmeans_init`].
#[derive(Debug, Clone)]
pub struct GmInitOptions {
    pub gamma_init: GammaInit,
    pub tau_init: f64,
    pub pi_mode: PiMode,
    pub max_iters: usize,
}

impl Default for GmInitOptions {
    fn default() -> Self {
        GmInitOptions {
            gamma_init: GammaInit::Empirical(0.01),
            tau_init: 0.01,
            pi_mode: PiMode::Simplex,
            max_iters: 100,
        }
    }
}

/// Per-layer mixture state. Centroids are stored directly; gammas and the
/// temperature are stored in log space so gradient updates preserve
/// positivity, and mixing weights are stored per [`PiMode`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGm {
    mu: Vec<f64>,
    pi_param: Vec<f64>,
    log_gamma: Vec<f64>,
    log_tau: f64,
    pi_mode: PiMode,
    /// Components that stayed empty during init (effective K reduction).
    degenerate: usize,
    pub train_mu: bool,
    pub train_pi: bool,
    pub train_gamma: bool,
    pub train_tau: bool,
}

impl LayerGm {
    /// Build a mixture from explicit components. `comps[0].mu` must be
    /// exactly zero; gammas below the floor are clamped (with a warning
    /// count), and the temperature must be positive.
    pub fn from_components(comps: &[GmComponent], tau: f64, pi_mode: PiMode) -> Result<Self> {
        if comps.is_empty() {
            return Err(Error::Config("gm: at least one component required".into()));
        }
        if comps[0].mu != 0.0 {
            return Err(Error::Config(format!(
                "gm: component 0 must sit at exactly 0, got {}",
                comps[0].mu
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::Numeric(format!("gm: tau must be positive, got {tau}")));
        }
        let mut mu = Vec::with_capacity(comps.len());
        let mut pi_param = Vec::with_capacity(comps.len());
        let mut log_gamma = Vec::with_capacity(comps.len());
        for (k, c) in comps.iter().enumerate() {
            if !c.mu.is_finite() || !c.gamma.is_finite() || !c.pi.is_finite() {
                return Err(Error::Numeric(format!("gm: non-finite parameter in component {k}")));
            }
            if c.gamma <= 0.0 {
                return Err(Error::Numeric(format!(
                    "gm: gamma must be positive, component {k} has {}",
                    c.gamma
                )));
            }
            if c.pi < 0.0 {
                return Err(Error::Numeric(format!(
                    "gm: mixing weight must be nonnegative, component {k} has {}",
                    c.pi
                )));
            }
            mu.push(c.mu);
            log_gamma.push(clamp_gamma(c.gamma).ln());
            pi_param.push(match pi_mode {
                PiMode::Simplex => c.pi.max(PI_FLOOR).ln(),
                PiMode::Unconstrained => c.pi,
            });
        }
        mu[0] = 0.0;
        // The TAU_MIN floor guards training updates (clamp_floors), not
        // explicit construction: arbitrarily small temperatures are valid
        // for evaluating the hard limit.
        Ok(LayerGm {
            mu,
            pi_param,
            log_gamma,
            log_tau: tau.ln(),
            pi_mode,
            degenerate: 0,
            train_mu: true,
            train_pi: true,
            train_gamma: true,
            train_tau: false,
        })
    }

    /// Number of components, K+1.
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// The component count parameter K.
    pub fn k(&self) -> usize {
        self.mu.len() - 1
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn pi_mode(&self) -> PiMode {
        self.pi_mode
    }

    pub fn degenerate_components(&self) -> usize {
        self.degenerate
    }

    /// Current mixing weights (normalized under the simplex mode).
    pub fn pis(&self) -> Vec<f64> {
        match self.pi_mode {
            PiMode::Simplex => {
                let mut p = self.pi_param.clone();
                softmax_in_place(&mut p);
                p
            }
            PiMode::Unconstrained => self.pi_param.clone(),
        }
    }

    /// Current standard deviations (always >= [`GAMMA_MIN`]).
    pub fn gammas(&self) -> Vec<f64> {
        self.log_gamma.iter().map(|g| g.exp()).collect()
    }

    pub fn mus(&self) -> &[f64] {
        &self.mu
    }

    /// Component view of the current state.
    pub fn components(&self) -> Vec<GmComponent> {
        let pis = self.pis();
        let gammas = self.gammas();
        self.mu
            .iter()
            .zip(pis.iter().zip(gammas.iter()))
            .map(|(&mu, (&pi, &gamma))| GmComponent { pi, mu, gamma })
            .collect()
    }

    pub fn codebook(&self) -> AdaptiveCodebook {
        AdaptiveCodebook {
            values: self.mu.clone(),
        }
    }

    // Raw parameter access for the optimizer. Index 0 of `mu` is frozen; the
    // trainer guarantees its gradient is zero so it never moves.
    pub fn mu_mut(&mut self) -> &mut [f64] {
        &mut self.mu
    }
    pub fn pi_param(&self) -> &[f64] {
        &self.pi_param
    }
    pub fn pi_param_mut(&mut self) -> &mut [f64] {
        &mut self.pi_param
    }
    pub fn log_gamma(&self) -> &[f64] {
        &self.log_gamma
    }
    pub fn log_gamma_mut(&mut self) -> &mut [f64] {
        &mut self.log_gamma
    }
    pub fn log_tau(&self) -> f64 {
        self.log_tau
    }
    pub fn log_tau_mut(&mut self) -> &mut f64 {
        &mut self.log_tau
    }

    /// Re-apply the positivity floors after a gradient step.
    pub fn clamp_floors(&mut self) {
        let g_floor = GAMMA_MIN.ln();
        for g in &mut self.log_gamma {
            if *g < g_floor {
                *g = g_floor;
            }
        }
        let t_floor = TAU_MIN.ln();
        if self.log_tau < t_floor {
            self.log_tau = t_floor;
        }
        self.mu[0] = 0.0;
    }

    /// Restore internal state exactly (used by the GM file loader).
    pub(crate) fn from_raw(
        mu: Vec<f64>,
        pi_param: Vec<f64>,
        log_gamma: Vec<f64>,
        log_tau: f64,
        pi_mode: PiMode,
        degenerate: usize,
    ) -> Result<Self> {
        if mu.is_empty() || mu.len() != pi_param.len() || mu.len() != log_gamma.len() {
            return Err(Error::Data("gm: inconsistent parameter array lengths".into()));
        }
        if mu[0] != 0.0 {
            return Err(Error::Data(format!(
                "gm: component 0 must sit at exactly 0, got {}",
                mu[0]
            )));
        }
        Ok(LayerGm {
            mu,
            pi_param,
            log_gamma,
            log_tau,
            pi_mode,
            degenerate,
            train_mu: true,
            train_pi: true,
            train_gamma: true,
            train_tau: false,
        })
    }
}

/// Adaptive centroid set of a layer; `values[0]` is always 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveCodebook {
    pub values: Vec<f64>,
}

impl AdaptiveCodebook {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("codebook: empty".into()));
        }
        if values[0] != 0.0 {
            return Err(Error::Config(format!(
                "codebook: value 0 must be exactly 0, got {}",
                values[0]
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("codebook: non-finite value {v}")));
        }
        Ok(AdaptiveCodebook { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Smallest bit-width that can index this codebook.
    pub fn min_bits(&self) -> u8 {
        let mut bits = 1u8;
        while (1usize << bits) < self.values.len() {
            bits += 1;
        }
        bits
    }
}

/// Symmetric uniform quantizer: step size, positive level count, saturation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformQuantSpec {
    pub delta: f64,
    pub k_max: usize,
}

impl UniformQuantSpec {
    pub fn new(delta: f64, k_max: usize) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::Config(format!("uniform: step size must be positive, got {delta}")));
        }
        if k_max == 0 {
            return Err(Error::Config("uniform: need at least one positive level".into()));
        }
        Ok(UniformQuantSpec { delta, k_max })
    }

    /// Symmetric spec covering `[-max_abs, max_abs]` at the given bit-width.
    pub fn from_range(max_abs: f64, bits: u8) -> Result<Self> {
        if bits < 2 || bits > 31 {
            return Err(Error::Config(format!("uniform: unsupported bit-width {bits}")));
        }
        let k_max = (1usize << (bits - 1)) - 1;
        UniformQuantSpec::new(max_abs / k_max as f64, k_max)
    }

    /// Saturation value `delta * k_max`.
    pub fn q_max(&self) -> f64 {
        self.delta * self.k_max as f64
    }
}

/// Linear quantization with round-half-up and symmetric saturation. Outputs
/// take values only in `{0, ±k·delta, k = 1..k_max}`.
pub fn uniform_quantize(w: &[f64], spec: &UniformQuantSpec) -> Result<Vec<f64>> {
    let q_max = spec.q_max();
    let mut out = Vec::with_capacity(w.len());
    for (j, &x) in w.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::Numeric(format!(
                "uniform_quantize: non-finite input {x} at index {j}"
            )));
        }
        let sign = if x < 0.0 { -1.0 } else { 1.0 };
        let mag = x.abs();
        let q = if mag <= q_max {
            spec.delta * (mag / spec.delta + 0.5).floor()
        } else {
            q_max
        };
        out.push(if q == 0.0 { 0.0 } else { sign * q });
    }
    Ok(out)
}

/// Gaussian density at `w` scaled by the component's mixing weight.
pub fn weighted_density(w: f64, comp: &GmComponent) -> f64 {
    let gamma = clamp_gamma(comp.gamma);
    let z = (w - comp.mu) / gamma;
    comp.pi * (-(z * z) / 2.0).exp() / (gamma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Column-stochastic matrix of shape (K+1) x M, stored with the K+1 entries
/// of each weight contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    k_plus_one: usize,
    m: usize,
    data: Vec<f64>,
}

impl ProbMatrix {
    fn zeros(k_plus_one: usize, m: usize) -> Self {
        ProbMatrix {
            k_plus_one,
            m,
            data: vec![0.0; k_plus_one * m],
        }
    }

    pub fn k_plus_one(&self) -> usize {
        self.k_plus_one
    }

    pub fn weights(&self) -> usize {
        self.m
    }

    /// Per-component values for weight `j`.
    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.k_plus_one..(j + 1) * self.k_plus_one]
    }

    fn column_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.k_plus_one..(j + 1) * self.k_plus_one]
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.data[j * self.k_plus_one + k]
    }
}

/// Numerically stable softmax (max subtraction) over a slice, in place.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

fn unweighted_densities(gm: &LayerGm, w: f64, out: &mut [f64]) {
    for (k, d) in out.iter_mut().enumerate() {
        let gamma = gm.log_gamma[k].exp();
        let z = (w - gm.mu[k]) / gamma;
        *d = (-(z * z) / 2.0).exp() / (gamma * (2.0 * std::f64::consts::PI).sqrt());
    }
}

/// Mixture responsibilities: a softmax over the weighted densities
/// `pi_k * N(w | mu_k, gamma_k^2)`, one column per weight.
pub fn responsibility(w: &[f64], gm: &LayerGm) -> ProbMatrix {
    let kp1 = gm.len();
    let pis = gm.pis();
    let mut out = ProbMatrix::zeros(kp1, w.len());
    let mut dens = vec![0.0; kp1];
    for (j, &wj) in w.iter().enumerate() {
        unweighted_densities(gm, wj, &mut dens);
        let col = out.column_mut(j);
        for k in 0..kp1 {
            col[k] = pis[k] * dens[k];
        }
        softmax_in_place(col);
    }
    out
}

/// Temperature-softmax of the responsibilities; approaches a one-hot
/// encoding as tau decreases.
pub fn soft_indicator(w: &[f64], gm: &LayerGm) -> ProbMatrix {
    let tau = gm.tau();
    let mut phi = responsibility(w, gm);
    for j in 0..w.len() {
        let col = phi.column_mut(j);
        for v in col.iter_mut() {
            *v /= tau;
        }
        softmax_in_place(col);
    }
    phi
}

/// Soft projection: the centroid expectation under the soft indicator.
/// Output lies in the convex hull of the centroids.
pub fn soft_quantize(w: &[f64], gm: &LayerGm) -> Vec<f64> {
    let s = soft_indicator(w, gm);
    let mut out = Vec::with_capacity(w.len());
    for j in 0..w.len() {
        let col = s.column(j);
        let mut acc = 0.0;
        for (k, &sk) in col.iter().enumerate() {
            acc += gm.mu[k] * sk;
        }
        out.push(acc);
    }
    out
}

fn argmax_tie_low(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Component index each weight is assigned to (argmax responsibility,
/// ties broken toward the smallest index).
pub fn hard_assign(w: &[f64], gm: &LayerGm) -> Vec<usize> {
    let kp1 = gm.len();
    let pis = gm.pis();
    let mut dens = vec![0.0; kp1];
    w.iter()
        .map(|&wj| {
            unweighted_densities(gm, wj, &mut dens);
            for (k, d) in dens.iter_mut().enumerate() {
                *d *= pis[k];
            }
            argmax_tie_low(&dens)
        })
        .collect()
}

/// One-hot region decision indicator.
pub fn hard_indicator(w: &[f64], gm: &LayerGm) -> ProbMatrix {
    let kp1 = gm.len();
    let mut out = ProbMatrix::zeros(kp1, w.len());
    for (j, &k) in hard_assign(w, gm).iter().enumerate() {
        out.column_mut(j)[k] = 1.0;
    }
    out
}

/// Hard projection: each weight snaps to its argmax component's centroid.
pub fn hard_quantize(w: &[f64], gm: &LayerGm) -> Vec<f64> {
    hard_assign(w, gm).iter().map(|&k| gm.mu[k]).collect()
}

/// Forward pass of the soft projection with everything the backward pass
/// needs retained: unweighted densities, responsibilities, soft indicators,
/// and the projected output.
pub struct SoftQuantCache {
    pub dens: ProbMatrix,
    pub phi: ProbMatrix,
    pub s: ProbMatrix,
    pub out: Vec<f64>,
}

pub fn soft_quantize_cached(w: &[f64], gm: &LayerGm) -> SoftQuantCache {
    let kp1 = gm.len();
    let tau = gm.tau();
    let pis = gm.pis();
    let mut dens = ProbMatrix::zeros(kp1, w.len());
    let mut phi = ProbMatrix::zeros(kp1, w.len());
    let mut s = ProbMatrix::zeros(kp1, w.len());
    let mut out = Vec::with_capacity(w.len());
    for (j, &wj) in w.iter().enumerate() {
        let dcol = dens.column_mut(j);
        unweighted_densities(gm, wj, dcol);
        {
            let (dcol, pcol) = (dens.column(j), phi.column_mut(j));
            for k in 0..kp1 {
                pcol[k] = pis[k] * dcol[k];
            }
            softmax_in_place(pcol);
        }
        {
            let (pcol, scol) = (phi.column(j), s.column_mut(j));
            for k in 0..kp1 {
                scol[k] = pcol[k] / tau;
            }
            softmax_in_place(scol);
        }
        let scol = s.column(j);
        let mut acc = 0.0;
        for (k, &sk) in scol.iter().enumerate() {
            acc += gm.mu[k] * sk;
        }
        out.push(acc);
    }
    SoftQuantCache { dens, phi, s, out }
}

/// Gradients of a scalar loss through the soft projection.
pub struct SoftQuantGrads {
    pub w: Vec<f64>,
    pub mu: Vec<f64>,
    pub pi_param: Vec<f64>,
    pub log_gamma: Vec<f64>,
    pub log_tau: f64,
}

/// Reverse-mode step through the soft projection. `upstream[j]` is the loss
/// gradient with respect to the projected weight j; returns gradients for
/// the full-precision weights and every mixture parameter group (component
/// 0's centroid gradient is pinned to zero).
pub fn soft_quantize_backward(
    w: &[f64],
    gm: &LayerGm,
    cache: &SoftQuantCache,
    upstream: &[f64],
) -> SoftQuantGrads {
    let kp1 = gm.len();
    let m = w.len();
    debug_assert_eq!(upstream.len(), m);
    let tau = gm.tau();
    let pis = gm.pis();
    let gammas = gm.gammas();

    let mut grad_w = vec![0.0; m];
    let mut grad_mu = vec![0.0; kp1];
    let mut grad_pi_value = vec![0.0; kp1];
    let mut grad_log_gamma = vec![0.0; kp1];
    let mut grad_log_tau = 0.0;

    let mut a = vec![0.0; kp1];
    let mut c = vec![0.0; kp1];
    for j in 0..m {
        let g = upstream[j];
        if g == 0.0 {
            continue;
        }
        let wj = w[j];
        let out_j = cache.out[j];
        let scol = cache.s.column(j);
        let pcol = cache.phi.column(j);
        let dcol = cache.dens.column(j);

        // d(out)/d(phi_i) and the phi-weighted mean used by both the
        // softmax Jacobian and the temperature gradient.
        let mut abar = 0.0;
        for k in 0..kp1 {
            a[k] = scol[k] * (gm.mu[k] - out_j) / tau;
            abar += a[k] * pcol[k];
        }
        // d(out)/d(density_k) through the responsibility softmax.
        for k in 0..kp1 {
            c[k] = pcol[k] * (a[k] - abar);
        }

        let mut gw = 0.0;
        for k in 0..kp1 {
            let diff = wj - gm.mu[k];
            let inv_var = 1.0 / (gammas[k] * gammas[k]);
            let dk = pis[k] * dcol[k];
            gw += c[k] * dk * (-diff) * inv_var;
            grad_mu[k] += g * (scol[k] + c[k] * dk * diff * inv_var);
            grad_log_gamma[k] += g * c[k] * dk * (diff * diff * inv_var - 1.0);
            grad_pi_value[k] += g * c[k] * dcol[k];
        }
        grad_w[j] = g * gw;
        grad_log_tau += g * (-abar);
    }

    // Component 0 is frozen at zero.
    grad_mu[0] = 0.0;

    let grad_pi_param = match gm.pi_mode {
        PiMode::Unconstrained => grad_pi_value,
        PiMode::Simplex => {
            // Chain through pi = softmax(logits).
            let inner: f64 = grad_pi_value.iter().zip(pis.iter()).map(|(g, p)| g * p).sum();
            grad_pi_value
                .iter()
                .zip(pis.iter())
                .map(|(g, p)| p * (g - inner))
                .collect()
        }
    };

    SoftQuantGrads {
        w: grad_w,
        mu: grad_mu,
        pi_param: grad_pi_param,
        log_gamma: grad_log_gamma,
        log_tau: grad_log_tau,
    }
}

/// One-dimensional k-means with farthest-point-style seeding, followed by
/// zero-pinning of the minimum-magnitude centroid. Components come back
/// ordered: the zero component first, the rest ascending by centroid.
pub fn kmeans_init(w: &[f64], k_plus_one: usize, seed: u64, opts: &GmInitOptions) -> Result<LayerGm> {
    if k_plus_one < 2 {
        return Err(Error::Config(format!(
            "kmeans_init: need at least 2 components, got {k_plus_one}"
        )));
    }
    if w.len() < k_plus_one {
        return Err(Error::Config(format!(
            "kmeans_init: {} weights cannot seed {} clusters",
            w.len(),
            k_plus_one
        )));
    }
    if let Some((j, x)) = w.iter().enumerate().find(|(_, x)| !x.is_finite()) {
        return Err(Error::Numeric(format!(
            "kmeans_init: non-finite weight {x} at index {j}"
        )));
    }
    if !(opts.tau_init > 0.0) {
        return Err(Error::Numeric(format!(
            "kmeans_init: tau must be positive, got {}",
            opts.tau_init
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = w.len();

    // k-means++ seeding: first centroid uniform, the rest by squared
    // distance. When every remaining distance is zero the data cannot fill
    // the cluster; fall back to repeating the farthest point (degenerate).
    let mut centroids = Vec::with_capacity(k_plus_one);
    centroids.push(w[rng.random_range(0..m)]);
    let mut dist2 = vec![0.0f64; m];
    while centroids.len() < k_plus_one {
        let mut total = 0.0;
        for (j, &x) in w.iter().enumerate() {
            let d = centroids
                .iter()
                .map(|&c| (x - c) * (x - c))
                .fold(f64::INFINITY, f64::min);
            dist2[j] = d;
            total += d;
        }
        if total <= 0.0 {
            // Farthest point is at distance zero; duplicate it.
            centroids.push(w[argmax_tie_low(&dist2)]);
            continue;
        }
        let target = rng.random_range(0.0..total);
        let mut acc = 0.0;
        let mut chosen = m - 1;
        for (j, &d) in dist2.iter().enumerate() {
            acc += d;
            if acc >= target {
                chosen = j;
                break;
            }
        }
        centroids.push(w[chosen]);
    }

    // Lloyd iterations with exact 1-D assignment.
    let mut assign = vec![0usize; m];
    let mut counts = vec![0usize; k_plus_one];
    let mut alive = vec![true; k_plus_one];
    for _ in 0..opts.max_iters {
        let mut changed = false;
        for (j, &x) in w.iter().enumerate() {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for (k, &c) in centroids.iter().enumerate() {
                if !alive[k] {
                    continue;
                }
                let d = (x - c) * (x - c);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            if assign[j] != best {
                assign[j] = best;
                changed = true;
            }
        }
        counts.fill(0);
        let mut sums = vec![0.0f64; k_plus_one];
        for (j, &x) in w.iter().enumerate() {
            counts[assign[j]] += 1;
            sums[assign[j]] += x;
        }
        let mut reseeded = false;
        for k in 0..k_plus_one {
            if !alive[k] {
                continue;
            }
            if counts[k] == 0 {
                // Re-seed an empty cluster at the farthest point from the
                // currently used centroids; if even that is distance zero
                // the cluster is unfillable and effective K shrinks.
                let mut far_j = 0;
                let mut far_d = -1.0;
                for (j, &x) in w.iter().enumerate() {
                    let d = centroids
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| alive[*i] && counts[*i] > 0)
                        .map(|(_, &c)| (x - c) * (x - c))
                        .fold(f64::INFINITY, f64::min);
                    if d > far_d {
                        far_d = d;
                        far_j = j;
                    }
                }
                if far_d > 0.0 {
                    centroids[k] = w[far_j];
                    reseeded = true;
                } else {
                    alive[k] = false;
                }
            } else {
                centroids[k] = sums[k] / counts[k] as f64;
            }
        }
        if !changed && !reseeded {
            break;
        }
    }

    let degenerate = alive.iter().filter(|&&a| !a).count();

    // Pin the minimum-magnitude centroid to exactly zero and order the
    // components deterministically: zero first, the rest ascending, dead
    // clusters last.
    let mut order: Vec<usize> = (0..k_plus_one).collect();
    let zero_k = order
        .iter()
        .cloned()
        .filter(|&k| alive[k])
        .min_by(|&a, &b| {
            centroids[a]
                .abs()
                .partial_cmp(&centroids[b].abs())
                .unwrap()
                .then(a.cmp(&b))
        })
        .expect("at least one live cluster");
    centroids[zero_k] = 0.0;
    order.sort_by(|&a, &b| {
        let rank = |k: usize| {
            if k == zero_k {
                0
            } else if alive[k] {
                1
            } else {
                2
            }
        };
        rank(a)
            .cmp(&rank(b))
            .then(centroids[a].partial_cmp(&centroids[b]).unwrap())
            .then(a.cmp(&b))
    });

    let mut comps = Vec::with_capacity(k_plus_one);
    for &k in &order {
        let pi = if alive[k] { counts[k] as f64 / m as f64 } else { 0.0 };
        let gamma = match opts.gamma_init {
            GammaInit::Empirical(v) => v,
            GammaInit::Std => {
                // Pooled deviation of all weights around this centroid.
                let ss: f64 = w.iter().map(|&x| (x - centroids[k]) * (x - centroids[k])).sum();
                let denom = (m as f64 - 1.0).max(1.0);
                (ss / denom).sqrt().max(GAMMA_MIN)
            }
        };
        comps.push(GmComponent {
            pi,
            mu: if alive[k] { centroids[k] } else { 0.0 },
            gamma,
        });
    }

    let mut gm = LayerGm::from_components(&comps, opts.tau_init, opts.pi_mode)?;
    gm.degenerate = degenerate;
    Ok(gm)
}
