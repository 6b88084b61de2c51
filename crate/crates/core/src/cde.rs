//! Conditional density models used to simulate conditional score samples and
//! to provide sigma(x) for the normalized score.
//!
//! Two backends share the [`CondDensity`] contract: a mixture density network
//! (the default) and a Nadaraya-Watson kernel estimator whose simple
//! structure makes it a useful reference on low-dimensional data. Fitted
//! models are immutable; sampling takes an explicit seed so concurrent
//! callers never contend on generator state.

use crate::data::Dataset;
use crate::diffmodels::tape::{Graph, NodeId};
use crate::diffmodels::{self, OptimizerConfig};
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const LN_2PI: f64 = 1.837877066409345;

/// Minimum reported conditional standard deviation.
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-3;

/// Conditional generative model of P(y | x).
pub trait CondDensity {
    /// n i.i.d. draws from the model's conditional law at `x`,
    /// deterministic given `seed`.
    fn sample_at(&self, x: &[f64], n: usize, seed: u64) -> Vec<f64>;

    /// Conditional standard deviation at `x` (always positive).
    fn cond_std(&self, x: &[f64]) -> f64;
}

/// Mixture density network settings.
#[derive(Debug, Clone, PartialEq)]
pub struct MdnConfig {
    /// Mixture component count M.
    pub components: usize,
    /// Trunk hidden widths; empty means heads read the raw features.
    pub hidden: Vec<usize>,
    pub sigma_floor: f64,
    pub leaky_slope: f64,
}

impl Default for MdnConfig {
    fn default() -> Self {
        MdnConfig {
            components: 5,
            hidden: vec![64, 64],
            sigma_floor: DEFAULT_SIGMA_FLOOR,
            leaky_slope: diffmodels::DEFAULT_LEAKY_SLOPE,
        }
    }
}

/// Mixture density network: a LeakyReLU trunk and one affine head emitting,
/// per input, M mixture logits, M means, and M pre-softplus spreads
/// (layout `[logits | mu | s]`).
#[derive(Debug, Clone, PartialEq)]
pub struct MdnModel {
    pub input_dim: usize,
    pub config: MdnConfig,
    pub params: Vec<f64>,
}

impl MdnModel {
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.config.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, 3 * self.config.components));
        dims
    }

    pub fn param_count(input_dim: usize, config: &MdnConfig) -> usize {
        let mut count = 0;
        let mut prev = input_dim;
        for &h in &config.hidden {
            count += prev * h + h;
            prev = h;
        }
        count + prev * 3 * config.components + 3 * config.components
    }

    /// Seeded init. Weights and biases are uniform on
    /// (-1/sqrt(fan_in), 1/sqrt(fan_in)); nonzero biases spread the trunk's
    /// hinge locations across the input range.
    pub fn init(input_dim: usize, config: MdnConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(Self::param_count(input_dim, &config));
        let mut prev = input_dim;
        let mut dims: Vec<(usize, usize)> = Vec::new();
        for &h in &config.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, 3 * config.components));
        for (fan_in, fan_out) in dims {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                params.push(rng.random_range(-bound..bound));
            }
        }
        MdnModel { input_dim, config, params }
    }

    /// Mixture parameters (pi, mu, sigma) at one input.
    pub fn mixture_at(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        assert_eq!(x.len(), self.input_dim);
        let m = self.config.components;
        let slope = self.config.leaky_slope;
        let dims = self.layer_dims();
        let n_layers = dims.len();
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let mut off = 0;
        for (li, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            next.clear();
            for o in 0..fan_out {
                let mut acc = self.params[off + fan_in * fan_out + o];
                let wrow = off + o * fan_in;
                for k in 0..fan_in {
                    acc += self.params[wrow + k] * cur[k];
                }
                if li + 1 < n_layers && acc < 0.0 {
                    acc *= slope;
                }
                next.push(acc);
            }
            off += fan_in * fan_out + fan_out;
            std::mem::swap(&mut cur, &mut next);
        }
        let max_logit = cur[..m].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut pi: Vec<f64> = cur[..m].iter().map(|l| (l - max_logit).exp()).collect();
        let z: f64 = pi.iter().sum();
        for p in &mut pi {
            *p /= z;
        }
        let mu = cur[m..2 * m].to_vec();
        let sigma: Vec<f64> = cur[2 * m..3 * m]
            .iter()
            .map(|&s| softplus(s) + self.config.sigma_floor)
            .collect();
        (pi, mu, sigma)
    }

    /// Mixture mean at one input.
    pub fn cond_mean(&self, x: &[f64]) -> f64 {
        let (pi, mu, _) = self.mixture_at(x);
        pi.iter().zip(&mu).map(|(p, m)| p * m).sum()
    }

    /// Build the forward trunk+head on a tape for a batch; returns the raw
    /// `[n, 3M]` head node. Parameters occupy offsets `0..params.len()`.
    fn head_graph(&self, g: &mut Graph, x: &[f64]) -> NodeId {
        let slope = self.config.leaky_slope;
        let dims = self.layer_dims();
        let n_layers = dims.len();
        let mut cur = g.constant(x);
        let mut off = 0;
        for (li, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            let w = g.param(off, fan_in * fan_out);
            let b = g.param(off + fan_in * fan_out, fan_out);
            cur = g.dense(w, b, cur, fan_in, fan_out);
            if li + 1 < n_layers {
                cur = g.leaky_relu(cur, slope);
            }
            off += fan_in * fan_out + fan_out;
        }
        cur
    }

    /// Mean negative log likelihood over a batch, built on a tape with
    /// log-sum-exp stabilization.
    pub fn nll_graph(&self, g: &mut Graph, x: &[f64], y: &[f64]) -> NodeId {
        let m = self.config.components;
        let heads = self.head_graph(g, x);
        let n = y.len();
        let mut per_sample = Vec::with_capacity(n);
        for i in 0..n {
            let hrow = g.row(heads, i, 3 * m);
            let logits = g.row(hrow, 0, m);
            let mu = g.row(hrow, 1, m);
            let s_raw = g.row(hrow, 2, m);
            let lse = g.log_sum_exp(logits);
            let log_pi = g.sub_scalar(logits, lse);
            let sp = g.softplus(s_raw);
            let sigma = g.scale(sp, 1.0, self.config.sigma_floor);
            let y_minus_mu = g.scale(mu, -1.0, y[i]);
            let z = g.div(y_minus_mu, sigma);
            let z2 = g.square(z);
            let a = g.scale(z2, -0.5, -0.5 * LN_2PI);
            let ln_sigma = g.ln(sigma);
            let log_normal = g.sub(a, ln_sigma);
            let lw = g.add(log_pi, log_normal);
            let lp = g.log_sum_exp(lw);
            per_sample.push(g.scale(lp, -1.0, 0.0));
        }
        let all = g.concat(&per_sample);
        g.mean(all)
    }
}

/// Mean negative log likelihood of a batch under the mixture, evaluated
/// directly (no tape) with log-sum-exp stabilization.
pub fn mdn_nll(mdn: &MdnModel, x: &[Vec<f64>], y: &[f64]) -> f64 {
    assert!(!y.is_empty(), "mdn_nll needs a nonempty batch");
    let mut total = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let (pi, mu, sigma) = mdn.mixture_at(xi);
        let mut lw: Vec<f64> = Vec::with_capacity(pi.len());
        for k in 0..pi.len() {
            let z = (yi - mu[k]) / sigma[k];
            lw.push(pi[k].ln() - 0.5 * z * z - sigma[k].ln() - 0.5 * LN_2PI);
        }
        let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + lw.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total -= lse;
    }
    total / y.len() as f64
}

/// Fit a mixture density network on the training split by minibatch descent
/// on the mean NLL.
pub fn fit_mdn(train: &Dataset, config: MdnConfig, cfg: &OptimizerConfig) -> Result<MdnModel> {
    assert!(config.components >= 1);
    let mut mdn = MdnModel::init(train.dim(), config, cfg.seed);
    let proto = mdn.clone();
    let d = train.dim();
    diffmodels::sgd_loop(&mut mdn.params, train.len(), cfg, |g, params, idx| {
        let m = MdnModel { params: params.to_vec(), ..proto.clone() };
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(train.row(i));
            y.push(train.y[i]);
        }
        m.nll_graph(g, &x, &y)
    })?;
    Ok(mdn)
}

impl CondDensity for MdnModel {
    fn sample_at(&self, x: &[f64], n: usize, seed: u64) -> Vec<f64> {
        let (pi, mu, sigma) = self.mixture_at(x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            let mut k = pi.len() - 1;
            for (j, &p) in pi.iter().enumerate() {
                acc += p;
                if u < acc {
                    k = j;
                    break;
                }
            }
            let z: f64 = StandardNormal.sample(&mut rng);
            out.push(mu[k] + sigma[k] * z);
        }
        out
    }

    fn cond_std(&self, x: &[f64]) -> f64 {
        let (pi, mu, sigma) = self.mixture_at(x);
        let mean: f64 = pi.iter().zip(&mu).map(|(p, m)| p * m).sum();
        let second: f64 = pi
            .iter()
            .zip(&mu)
            .zip(&sigma)
            .map(|((p, m), s)| p * (s * s + m * m))
            .sum();
        (second - mean * mean).max(0.0).sqrt().max(self.config.sigma_floor)
    }
}

// --- Nadaraya-Watson --------------------------------------------------------

/// Nadaraya-Watson kernel conditional density estimator with Gaussian kernels
/// on both the features (bandwidth h2) and the target (bandwidth h1).
#[derive(Debug, Clone, PartialEq)]
pub struct NwCde {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub h1: f64,
    pub h2: f64,
}

impl NwCde {
    /// Fit by retaining the training rows. Defaults both bandwidths to
    /// n^(-1/3) when not given.
    pub fn fit(train: &Dataset, h1: Option<f64>, h2: Option<f64>) -> NwCde {
        let default = (train.len() as f64).powf(-1.0 / 3.0);
        let h1 = h1.unwrap_or(default);
        let h2 = h2.unwrap_or(default);
        assert!(h1 > 0.0 && h2 > 0.0, "bandwidths must be positive");
        NwCde { x: train.x.clone(), y: train.y.clone(), h1, h2 }
    }

    /// Unnormalized feature-kernel weights at `x`.
    fn weights(&self, x: &[f64]) -> Vec<f64> {
        self.x
            .iter()
            .map(|xi| {
                let d2: f64 = xi.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * self.h2 * self.h2)).exp()
            })
            .collect()
    }

    /// Conditional density estimate at (x, y).
    pub fn density(&self, x: &[f64], y: f64) -> Result<f64> {
        let w = self.weights(x);
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Err(Error::OutsideSupport);
        }
        let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * self.h1);
        let mut acc = 0.0;
        for (wi, yi) in w.iter().zip(&self.y) {
            let z = (y - yi) / self.h1;
            acc += wi * norm * (-0.5 * z * z).exp();
        }
        Ok(acc / total)
    }
}

impl CondDensity for NwCde {
    /// Exact two-stage draw: a categorical over the normalized feature-kernel
    /// weights, then a Gaussian with std h1 around the chosen target.
    fn sample_at(&self, x: &[f64], n: usize, seed: u64) -> Vec<f64> {
        let mut w = self.weights(x);
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            // Degenerate query far outside the data; fall back to uniform
            // weights rather than panicking inside sampling loops.
            w.iter_mut().for_each(|v| *v = 1.0);
        }
        let total: f64 = w.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut k = self.y.len() - 1;
            for (j, wi) in w.iter().enumerate() {
                acc += wi;
                if u < acc {
                    k = j;
                    break;
                }
            }
            let z: f64 = StandardNormal.sample(&mut rng);
            out.push(self.y[k] + self.h1 * z);
        }
        out
    }

    /// Standard deviation of 1000 seeded draws, floored away from zero.
    fn cond_std(&self, x: &[f64]) -> f64 {
        let s = self.sample_at(x, 1000, 0x5ca1ab1e);
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        var.sqrt().max(DEFAULT_SIGMA_FLOOR)
    }
}

/// Concrete conditional-density backend (owned, serializable).
#[derive(Debug, Clone, PartialEq)]
pub enum CdeModel {
    Mdn(MdnModel),
    Nw(NwCde),
}

impl CondDensity for CdeModel {
    fn sample_at(&self, x: &[f64], n: usize, seed: u64) -> Vec<f64> {
        match self {
            CdeModel::Mdn(m) => m.sample_at(x, n, seed),
            CdeModel::Nw(m) => m.sample_at(x, n, seed),
        }
    }

    fn cond_std(&self, x: &[f64]) -> f64 {
        match self {
            CdeModel::Mdn(m) => m.cond_std(x),
            CdeModel::Nw(m) => m.cond_std(x),
        }
    }
}

impl CdeModel {
    /// Point prediction of the backend (mixture mean for the MDN, kernel
    /// regression mean for Nadaraya-Watson).
    pub fn cond_mean(&self, x: &[f64]) -> f64 {
        match self {
            CdeModel::Mdn(m) => m.cond_mean(x),
            CdeModel::Nw(m) => {
                let w = m.weights(x);
                let total: f64 = w.iter().sum();
                if total <= 0.0 {
                    return m.y.iter().sum::<f64>() / m.y.len() as f64;
                }
                w.iter().zip(&m.y).map(|(wi, yi)| wi * yi).sum::<f64>() / total
            }
        }
    }

    pub fn to_text(&self) -> String {
        use diffmodels::f64_to_hex as hex;
        let mut s = String::new();
        match self {
            CdeModel::Mdn(m) => {
                s.push_str("kscp-cde-mdn v1\n");
                s.push_str(&format!("input_dim={}\n", m.input_dim));
                s.push_str(&format!("components={}\n", m.config.components));
                let hidden: Vec<String> = m.config.hidden.iter().map(|h| h.to_string()).collect();
                s.push_str(&format!("hidden={}\n", hidden.join(",")));
                s.push_str(&format!("sigma_floor={}\n", hex(m.config.sigma_floor)));
                s.push_str(&format!("leaky_slope={}\n", hex(m.config.leaky_slope)));
                s.push_str(&format!("params={}\n", m.params.len()));
                for p in &m.params {
                    s.push_str(&hex(*p));
                    s.push('\n');
                }
            }
            CdeModel::Nw(m) => {
                s.push_str("kscp-cde-nw v1\n");
                s.push_str(&format!("h1={}\n", hex(m.h1)));
                s.push_str(&format!("h2={}\n", hex(m.h2)));
                s.push_str(&format!("dim={}\n", m.x[0].len()));
                s.push_str(&format!("rows={}\n", m.y.len()));
                for (xi, yi) in m.x.iter().zip(&m.y) {
                    let mut cells: Vec<String> = xi.iter().map(|v| hex(*v)).collect();
                    cells.push(hex(*yi));
                    s.push_str(&cells.join(","));
                    s.push('\n');
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<CdeModel> {
        use diffmodels::f64_from_hex as unhex;
        use diffmodels::KvLines;
        let first = text.lines().next().unwrap_or("").trim();
        let mut kv = KvLines::new(text);
        match first {
            "kscp-cde-mdn v1" => {
                kv.expect_header("kscp-cde-mdn v1")?;
                let input_dim: usize = kv
                    .next_kv("input_dim")?
                    .parse()
                    .map_err(|e| Error::Checkpoint(format!("bad input_dim: {e}")))?;
                let components: usize = kv
                    .next_kv("components")?
                    .parse()
                    .map_err(|e| Error::Checkpoint(format!("bad components: {e}")))?;
                let hidden = diffmodels::parse_hidden(kv.next_kv("hidden")?)?;
                let sigma_floor = unhex(kv.next_kv("sigma_floor")?)?;
                let leaky_slope = unhex(kv.next_kv("leaky_slope")?)?;
                let n: usize = kv
                    .next_kv("params")?
                    .parse()
                    .map_err(|e| Error::Checkpoint(format!("bad param count: {e}")))?;
                let mut params = Vec::with_capacity(n);
                for _ in 0..n {
                    params.push(unhex(kv.next_line()?)?);
                }
                let config = MdnConfig { components, hidden, sigma_floor, leaky_slope };
                if MdnModel::param_count(input_dim, &config) != params.len() {
                    return Err(Error::Checkpoint("mdn param count mismatch".into()));
                }
                Ok(CdeModel::Mdn(MdnModel { input_dim, config, params }))
            }
            "kscp-cde-nw v1" => {
                kv.expect_header("kscp-cde-nw v1")?;
                let h1 = unhex(kv.next_kv("h1")?)?;
                let h2 = unhex(kv.next_kv("h2")?)?;
                let dim: usize = kv
                    .next_kv("dim")?
                    .parse()
                    .map_err(|e| Error::Checkpoint(format!("bad dim: {e}")))?;
                let rows: usize = kv
                    .next_kv("rows")?
                    .parse()
                    .map_err(|e| Error::Checkpoint(format!("bad rows: {e}")))?;
                let mut x = Vec::with_capacity(rows);
                let mut y = Vec::with_capacity(rows);
                for _ in 0..rows {
                    let line = kv.next_line()?;
                    let cells: Vec<&str> = line.split(',').collect();
                    if cells.len() != dim + 1 {
                        return Err(Error::Checkpoint("nw row width mismatch".into()));
                    }
                    let mut row = Vec::with_capacity(dim);
                    for c in &cells[..dim] {
                        row.push(unhex(c)?);
                    }
                    x.push(row);
                    y.push(unhex(cells[dim])?);
                }
                Ok(CdeModel::Nw(NwCde { x, y, h1, h2 }))
            }
            other => Err(Error::Checkpoint(format!("unknown cde checkpoint header '{other}'"))),
        }
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, Dataset};
    use approx::assert_relative_eq;

    /// MDN with no trunk, one component: pi = 1, mu(x) = w*x + b_mu,
    /// sigma = softplus(b_s) + floor.
    fn handmade_mdn(w_mu: f64, b_mu: f64, sigma: f64) -> MdnModel {
        let config = MdnConfig { components: 1, hidden: vec![], ..MdnConfig::default() };
        // Head layout per output row: [logit | mu | s]; weights [3 x 1].
        let b_s = inv_softplus(sigma - config.sigma_floor);
        MdnModel {
            input_dim: 1,
            config,
            params: vec![
                0.0, w_mu, 0.0, // weights for logit, mu, s
                0.0, b_mu, b_s, // biases
            ],
        }
    }

    fn inv_softplus(v: f64) -> f64 {
        // softplus(x) = v  =>  x = ln(e^v - 1)
        (v.exp() - 1.0).ln()
    }

    #[test]
    fn nll_single_standard_normal_component() {
        // -log N(0; 0, 1) = 0.5 ln(2 pi) ~= 0.9189385.
        let mdn = handmade_mdn(0.0, 0.0, 1.0);
        let nll = mdn_nll(&mdn, &[vec![0.3]], &[0.0]);
        assert_relative_eq!(nll, 0.9189385332046727, epsilon = 1e-9);
    }

    #[test]
    fn duplicate_components_collapse() {
        let single = handmade_mdn(0.0, 0.5, 1.3);
        let config = MdnConfig { components: 2, hidden: vec![], ..MdnConfig::default() };
        let b_s = inv_softplus(1.3 - config.sigma_floor);
        let double = MdnModel {
            input_dim: 1,
            config,
            params: vec![
                0.0, 0.0, 0.0, 0.0, 0.0, 0.0, // weights for 2 logits, 2 mus, 2 ss
                0.7, 0.7, 0.5, 0.5, b_s, b_s, // equal biases -> pi = 1/2 each
            ],
        };
        let xs = vec![vec![0.1], vec![-2.0], vec![1.4]];
        let ys = vec![0.0, 1.0, -0.6];
        assert_relative_eq!(mdn_nll(&single, &xs, &ys), mdn_nll(&double, &xs, &ys), epsilon = 1e-12);
    }

    #[test]
    fn nll_translation_invariance() {
        let a = handmade_mdn(0.0, 0.0, 0.8);
        let b = handmade_mdn(0.0, 5.5, 0.8);
        let xs = vec![vec![0.0], vec![1.0]];
        let nll_a = mdn_nll(&a, &xs, &[0.2, -0.4]);
        let nll_b = mdn_nll(&b, &xs, &[0.2 + 5.5, -0.4 + 5.5]);
        assert_relative_eq!(nll_a, nll_b, epsilon = 1e-12);
    }

    #[test]
    fn nll_graph_matches_plain_and_finite_differences() {
        let mdn = MdnModel::init(1, MdnConfig { components: 3, hidden: vec![8], ..MdnConfig::default() }, 5);
        let xs = vec![vec![0.3], vec![-1.0], vec![2.2]];
        let flat: Vec<f64> = xs.iter().flatten().cloned().collect();
        let ys = vec![1.0, -0.2, 0.5];
        let mut g = Graph::new(&mdn.params);
        let root = mdn.nll_graph(&mut g, &flat, &ys);
        assert_relative_eq!(g.scalar(root), mdn_nll(&mdn, &xs, &ys), epsilon = 1e-10);

        // Spot-check the gradient against central differences.
        let grad = g.backward(root).unwrap();
        let h = 1e-6;
        for k in [0usize, 3, 7, mdn.params.len() - 1] {
            let mut p = mdn.params.clone();
            p[k] += h;
            let mp = MdnModel { params: p.clone(), ..mdn.clone() };
            let up = mdn_nll(&mp, &xs, &ys);
            p[k] -= 2.0 * h;
            let mm = MdnModel { params: p, ..mdn.clone() };
            let dn = mdn_nll(&mm, &xs, &ys);
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (grad[k] - fd).abs() / fd.abs().max(1.0) < 1e-4,
                "param {k}: {} vs fd {}",
                grad[k],
                fd
            );
        }
    }

    #[test]
    fn sampling_matches_closed_form_moments() {
        let mdn = handmade_mdn(1.0, 0.0, 1.0); // mu(x) = x, sigma = 1
        let samples = mdn.sample_at(&[5.0], 10_000, 7);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        assert!((mean - 5.0).abs() < 0.05, "sample mean {mean}");

        // Deterministic given the seed.
        let one = mdn.sample_at(&[5.0], 1, 42);
        let two = mdn.sample_at(&[5.0], 1, 42);
        assert_eq!(one, two);
    }

    #[test]
    fn mixture_sampling_consistency_three_sigma() {
        // Two-component mixture; empirical moments of 1e5 draws must match the
        // closed form within 3 Monte-Carlo standard errors.
        let config = MdnConfig { components: 2, hidden: vec![], ..MdnConfig::default() };
        let b_s = inv_softplus(0.5 - config.sigma_floor);
        let mdn = MdnModel {
            input_dim: 1,
            config,
            params: vec![
                0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                0.3, -0.3, 1.0, -1.0, b_s, b_s,
            ],
        };
        let (pi, mu, sigma) = mdn.mixture_at(&[0.0]);
        let mean_cf: f64 = pi.iter().zip(&mu).map(|(p, m)| p * m).sum();
        let std_cf = mdn.cond_std(&[0.0]);

        let n = 100_000;
        let s = mdn.sample_at(&[0.0], n, 11);
        let mean = s.iter().sum::<f64>() / n as f64;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let se_mean = std_cf / (n as f64).sqrt();
        assert!((mean - mean_cf).abs() < 3.0 * se_mean, "mean {mean} vs {mean_cf}");
        // SE of the sample std is roughly std/sqrt(2n) for near-Gaussian laws;
        // the mixture is not Gaussian so allow a small inflation.
        let se_std = std_cf / (2.0 * n as f64).sqrt() * 2.0;
        assert!(
            (var.sqrt() - std_cf).abs() < 3.0 * se_std,
            "std {} vs closed form {std_cf}",
            var.sqrt()
        );
        let _ = sigma;
    }

    #[test]
    fn cond_std_two_point_mixture() {
        // pi = 1/2 each, mu = +/-1, sigma -> 0: std = 1.
        let config = MdnConfig { components: 2, hidden: vec![], sigma_floor: 1e-6, ..MdnConfig::default() };
        let b_s = inv_softplus(1e-5);
        let mdn = MdnModel {
            input_dim: 1,
            config,
            params: vec![
                0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                0.0, 0.0, 1.0, -1.0, b_s, b_s,
            ],
        };
        assert_relative_eq!(mdn.cond_std(&[0.0]), 1.0, epsilon = 1e-4);
    }

    #[test]
    fn cond_std_single_component() {
        let mdn = handmade_mdn(0.0, 3.0, 2.0);
        assert_relative_eq!(mdn.cond_std(&[1.0]), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn variance_respects_total_variance_lower_bounds() {
        let config = MdnConfig { components: 2, hidden: vec![], ..MdnConfig::default() };
        let b_s1 = inv_softplus(0.7 - config.sigma_floor);
        let b_s2 = inv_softplus(1.9 - config.sigma_floor);
        let mdn = MdnModel {
            input_dim: 1,
            config,
            params: vec![
                0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                0.4, -0.4, 0.8, -0.3, b_s1, b_s2,
            ],
        };
        let (pi, _, sigma) = mdn.mixture_at(&[0.0]);
        let var = mdn.cond_std(&[0.0]).powi(2);
        let within: f64 = pi.iter().zip(&sigma).map(|(p, s)| p * s * s).sum();
        assert!(var >= within - 1e-12);
        assert!(var >= 0.0);
    }

    #[test]
    fn fit_recovers_standard_normal_entropy_on_independent_noise() {
        let train = data::gen_setting_two(2000, 3).unwrap();
        let cfg = OptimizerConfig {
            step_size: 3e-3,
            epochs: 400,
            batch_size: 256,
            clip_norm: Some(10.0),
            seed: 3,
        };
        let mdn = fit_mdn(
            &train,
            MdnConfig { components: 3, hidden: vec![16], ..MdnConfig::default() },
            &cfg,
        )
        .unwrap();
        let test = data::gen_setting_two(4000, 4).unwrap();
        let nll = mdn_nll(&mdn, &test.x, &test.y);
        assert!(
            (nll - 0.9189385).abs() < 0.05,
            "per-sample NLL {nll} vs standard normal entropy"
        );
    }

    #[test]
    fn single_component_cannot_match_two_on_bimodal_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 2000;
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            x.push(vec![rng.random_range(-1.0..1.0)]);
            let sign = if i % 2 == 0 { 2.0 } else { -2.0 };
            y.push(sign + 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        }
        let ds = Dataset::new(x, y).unwrap();
        let cfg = OptimizerConfig {
            step_size: 3e-3,
            epochs: 300,
            batch_size: 256,
            clip_norm: Some(10.0),
            seed: 5,
        };
        let m1 = fit_mdn(&ds, MdnConfig { components: 1, hidden: vec![], ..MdnConfig::default() }, &cfg).unwrap();
        let m2 = fit_mdn(&ds, MdnConfig { components: 2, hidden: vec![], ..MdnConfig::default() }, &cfg).unwrap();
        let nll1 = mdn_nll(&m1, &ds.x, &ds.y);
        let nll2 = mdn_nll(&m2, &ds.x, &ds.y);
        assert!(nll2 < nll1 - 0.3, "M=2 NLL {nll2} should beat M=1 NLL {nll1}");
    }

    #[test]
    fn nw_degenerate_bandwidth_reproduces_single_row() {
        let ds = Dataset::new(vec![vec![1.0]], vec![4.2]).unwrap();
        let nw = NwCde::fit(&ds, Some(1e-9), Some(0.5));
        let s = nw.sample_at(&[1.0], 20, 3);
        for v in s {
            assert!((v - 4.2).abs() < 1e-6);
        }
    }

    #[test]
    fn nw_density_single_row_is_target_kernel() {
        let ds = Dataset::new(vec![vec![0.0]], vec![1.0]).unwrap();
        let nw = NwCde::fit(&ds, Some(0.7), Some(0.5));
        // Density at x = x0 is exactly N(y; y0, h1^2).
        let normal_pdf = |y: f64| {
            let z = (y - 1.0) / 0.7;
            (-0.5 * z * z).exp() / ((2.0 * std::f64::consts::PI).sqrt() * 0.7)
        };
        for y in [-1.0, 0.5, 1.0, 2.3] {
            assert_relative_eq!(nw.density(&[0.0], y).unwrap(), normal_pdf(y), epsilon = 1e-12);
        }
    }

    #[test]
    fn nw_density_symmetric_between_two_rows() {
        let ds = Dataset::new(vec![vec![-1.0], vec![1.0]], vec![-2.0, 2.0]).unwrap();
        let nw = NwCde::fit(&ds, Some(0.5), Some(0.5));
        // Query midway: density must be symmetric in y.
        for y in [0.5, 1.0, 2.5] {
            assert_relative_eq!(
                nw.density(&[0.0], y).unwrap(),
                nw.density(&[0.0], -y).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn nw_density_integrates_to_one() {
        let ds = data::gen_setting_two(200, 8).unwrap();
        let nw = NwCde::fit(&ds, None, None);
        // Trapezoid quadrature over a wide y-grid.
        let lo = -8.0;
        let hi = 8.0;
        let m = 2001;
        let step = (hi - lo) / (m - 1) as f64;
        let mut total = 0.0;
        for i in 0..m {
            let y = lo + i as f64 * step;
            let d = nw.density(&[0.3], y).unwrap();
            let w = if i == 0 || i == m - 1 { 0.5 } else { 1.0 };
            total += w * d * step;
        }
        assert!((total - 1.0).abs() < 0.01, "integral {total}");
    }

    #[test]
    fn nw_far_query_errors() {
        let ds = Dataset::new(vec![vec![0.0]], vec![1.0]).unwrap();
        let nw = NwCde::fit(&ds, Some(0.1), Some(0.1));
        assert!(matches!(nw.density(&[1e4], 0.0), Err(Error::OutsideSupport)));
    }

    #[test]
    fn cde_checkpoints_round_trip() {
        let mdn = MdnModel::init(2, MdnConfig::default(), 17);
        let m = CdeModel::Mdn(mdn);
        let back = CdeModel::from_text(&m.to_text()).unwrap();
        assert_eq!(m, back);

        let ds = data::gen_setting_two(50, 12).unwrap();
        let nw = CdeModel::Nw(NwCde::fit(&ds, None, None));
        let back = CdeModel::from_text(&nw.to_text()).unwrap();
        assert_eq!(nw, back);
    }
}
