//! Differentiable regression models and the gradient machinery behind every
//! training objective in the crate.
//!
//! Three model kinds share one flat parameter layout: a plain linear map, a
//! LeakyReLU MLP with one output, and a two-headed quantile MLP whose outputs
//! are sorted at forward time so the lower head never crosses the upper one.
//! Training is plain minibatch gradient descent with optional global-norm
//! clipping; everything is seeded and reproducible.

pub mod tape;

use crate::data::Dataset;
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tape::{Graph, NodeId};

/// Model family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    Mlp,
    QuantileMlp,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Mlp => "mlp",
            ModelKind::QuantileMlp => "quantile-mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "mlp" => Ok(ModelKind::Mlp),
            "quantile-mlp" => Ok(ModelKind::QuantileMlp),
            other => Err(Error::InvalidConfig(format!("unknown model kind '{other}'"))),
        }
    }
}

/// Architecture description: kind, input width, hidden widths, activation slope.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Hidden layer widths; empty means a single affine layer.
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

impl ModelSpec {
    pub fn linear(input_dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Linear,
            input_dim,
            hidden: Vec::new(),
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            hidden,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    /// Two-headed quantile model; `hidden` may be empty for linear heads.
    pub fn quantile(input_dim: usize, hidden: Vec<usize>) -> Self {
        ModelSpec {
            kind: ModelKind::QuantileMlp,
            input_dim,
            hidden,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            ModelKind::QuantileMlp => 2,
            _ => 1,
        }
    }

    /// (fan_in, fan_out) of each affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim()));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be >= 1".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("hidden widths must be >= 1".into()));
        }
        if self.kind == ModelKind::Linear && !self.hidden.is_empty() {
            return Err(Error::InvalidConfig("linear models take no hidden layers".into()));
        }
        Ok(())
    }
}

/// Minibatch gradient-descent settings.
#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global-norm gradient clipping; `None` disables.
    pub clip_norm: Option<f64>,
    /// Seed for weight init and minibatch shuffling.
    pub seed: u64,
}

impl OptimizerConfig {
    /// Defaults for linear models: step 1e-2, 500 epochs, batch 256, clip 10.
    pub fn linear_default(seed: u64) -> Self {
        OptimizerConfig {
            step_size: 1e-2,
            epochs: 500,
            batch_size: 256,
            clip_norm: Some(10.0),
            seed,
        }
    }

    /// Defaults for MLPs: step 1e-3, 500 epochs, batch 256, clip 10.
    pub fn mlp_default(seed: u64) -> Self {
        OptimizerConfig {
            step_size: 1e-3,
            epochs: 500,
            batch_size: 256,
            clip_norm: Some(10.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig("step_size must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A parameterized model: spec plus a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffModel {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
}

impl DiffModel {
    /// Seeded init: weights uniform on (-1/sqrt(fan_in), 1/sqrt(fan_in)),
    /// biases zero.
    pub fn init(spec: ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(spec.param_count());
        for (fan_in, fan_out) in spec.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-bound..bound));
            }
            for _ in 0..fan_out {
                params.push(0.0);
            }
        }
        DiffModel { spec, params }
    }

    /// Raw forward for one row (unordered outputs for the quantile kind).
    fn forward_raw(&self, row: &[f64], out: &mut Vec<f64>) {
        assert_eq!(row.len(), self.spec.input_dim, "input dimension mismatch");
        let slope = self.spec.leaky_slope;
        let mut cur: Vec<f64> = row.to_vec();
        let mut next: Vec<f64> = Vec::new();
        let dims = self.spec.layer_dims();
        let n_layers = dims.len();
        let mut off = 0;
        for (li, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            next.clear();
            for o in 0..fan_out {
                let wrow = off + o * fan_in;
                let mut acc = self.params[off + fan_in * fan_out + o];
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
        out.clear();
        out.extend_from_slice(&cur);
    }

    /// Point prediction; panics for the quantile kind.
    pub fn predict_point(&self, row: &[f64]) -> f64 {
        assert_ne!(self.spec.kind, ModelKind::QuantileMlp, "quantile model has two outputs");
        let mut out = Vec::with_capacity(1);
        self.forward_raw(row, &mut out);
        out[0]
    }

    /// Ordered (lo, hi) quantile pair; panics for point kinds.
    pub fn predict_quantiles(&self, row: &[f64]) -> (f64, f64) {
        assert_eq!(self.spec.kind, ModelKind::QuantileMlp, "not a quantile model");
        let mut out = Vec::with_capacity(2);
        self.forward_raw(row, &mut out);
        if out[0] <= out[1] {
            (out[0], out[1])
        } else {
            (out[1], out[0])
        }
    }

    /// Build the forward pass on a tape. `x` is `[n, input_dim]` row-major;
    /// parameters are bound at offsets `0..self.params.len()` of the graph.
    /// Returns the raw `[n, output_dim]` node.
    pub fn forward_graph(&self, g: &mut Graph, x: &[f64]) -> NodeId {
        assert_eq!(x.len() % self.spec.input_dim, 0);
        let slope = self.spec.leaky_slope;
        let dims = self.spec.layer_dims();
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

    /// Ordered (lo, hi) head nodes for the quantile kind, from the raw
    /// `[n, 2]` output node.
    pub fn ordered_heads(&self, g: &mut Graph, raw: NodeId) -> (NodeId, NodeId) {
        let c0 = g.take_column(raw, 0, 2);
        let c1 = g.take_column(raw, 1, 2);
        let lo = g.min_pair(c0, c1);
        let hi = g.max_pair(c0, c1);
        (lo, hi)
    }
}

/// Mean-squared-error node over a batch: `x` rows against targets `y`.
pub fn mse_loss_graph(model: &DiffModel, g: &mut Graph, x: &[f64], y: &[f64]) -> NodeId {
    let pred = model.forward_graph(g, x);
    let yc = g.constant(y);
    let err = g.sub(yc, pred);
    let sq = g.square(err);
    g.mean(sq)
}

/// Mean pinball loss over a batch for the two-headed model:
/// pinball(y, lo; a_lo) + pinball(y, hi; a_hi) with
/// pinball(y, q; t) = max(t(y-q), (t-1)(y-q)).
///
/// Each head trains against its own level (head 0 low, head 1 high); this
/// keeps the per-head problem convex for linear heads. Prediction-time
/// sorting still guarantees lo <= hi wherever outputs are consumed, and at
/// the optimum the heads are ordered anyway.
pub fn pinball_loss_graph(
    model: &DiffModel,
    g: &mut Graph,
    x: &[f64],
    y: &[f64],
    alpha_lo: f64,
    alpha_hi: f64,
) -> NodeId {
    let raw = model.forward_graph(g, x);
    let lo = g.take_column(raw, 0, 2);
    let hi = g.take_column(raw, 1, 2);
    let yc = g.constant(y);
    let term = |g: &mut Graph, q: NodeId, tau: f64| {
        let e = g.sub(yc, q);
        let a = g.scale(e, tau, 0.0);
        let b = g.scale(e, tau - 1.0, 0.0);
        g.max_pair(a, b)
    };
    let p_lo = term(g, lo, alpha_lo);
    let p_hi = term(g, hi, alpha_hi);
    let both = g.add(p_lo, p_hi);
    g.mean(both)
}

/// Shuffle `0..n` in place with a seeded Fisher-Yates pass.
pub(crate) fn shuffled_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// One descent update with optional global-norm clipping.
pub(crate) fn apply_update(params: &mut [f64], grad: &[f64], step: f64, clip: Option<f64>) {
    let mut scale = step;
    if let Some(c) = clip {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > c {
            scale = step * c / norm;
        }
    }
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= scale * g;
    }
}

const DIVERGENCE_LIMIT: f64 = 1e8;

/// Minibatch gradient descent over `n_rows` rows. `build` assembles the
/// scalar loss node for one batch of row indices. Returns per-epoch mean
/// batch losses.
pub(crate) fn sgd_loop(
    params: &mut Vec<f64>,
    n_rows: usize,
    cfg: &OptimizerConfig,
    mut build: impl FnMut(&mut Graph, &[f64], &[usize]) -> NodeId,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut g = Graph::new(params);
    for epoch in 0..cfg.epochs {
        let idx = shuffled_indices(&mut rng, n_rows);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in idx.chunks(cfg.batch_size) {
            g.reset(params);
            let loss = build(&mut g, params, chunk);
            let lv = g.scalar(loss);
            if !lv.is_finite() || lv > DIVERGENCE_LIMIT {
                return Err(Error::Diverged { epoch, loss: lv });
            }
            let grad = g.backward(loss)?;
            apply_update(params, &grad, cfg.step_size, cfg.clip_norm);
            total += lv;
            batches += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    Ok(epoch_losses)
}

fn gather_rows(ds: &Dataset, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = ds.dim();
    let mut x = Vec::with_capacity(idx.len() * d);
    let mut y = Vec::with_capacity(idx.len());
    for &i in idx {
        x.extend_from_slice(ds.row(i));
        y.push(ds.y[i]);
    }
    (x, y)
}

/// Train a point model (linear or MLP) by minimizing MSE.
pub fn train_mse(mut model: DiffModel, train: &Dataset, cfg: &OptimizerConfig) -> Result<DiffModel> {
    assert_eq!(model.spec.output_dim(), 1, "train_mse needs a point model");
    assert_eq!(model.spec.input_dim, train.dim());
    let spec = model.spec.clone();
    sgd_loop(&mut model.params, train.len(), cfg, |g, params, idx| {
        let m = DiffModel { spec: spec.clone(), params: params.to_vec() };
        let (x, y) = gather_rows(train, idx);
        mse_loss_graph(&m, g, &x, &y)
    })?;
    Ok(model)
}

/// Train a two-headed quantile model by minimizing the summed pinball loss.
pub fn train_pinball(
    mut model: DiffModel,
    train: &Dataset,
    alpha_lo: f64,
    alpha_hi: f64,
    cfg: &OptimizerConfig,
) -> Result<DiffModel> {
    assert_eq!(model.spec.output_dim(), 2, "train_pinball needs a quantile model");
    assert!(0.0 < alpha_lo && alpha_lo <= alpha_hi && alpha_hi < 1.0);
    let spec = model.spec.clone();
    sgd_loop(&mut model.params, train.len(), cfg, |g, params, idx| {
        let m = DiffModel { spec: spec.clone(), params: params.to_vec() };
        let (x, y) = gather_rows(train, idx);
        pinball_loss_graph(&m, g, &x, &y, alpha_lo, alpha_hi)
    })?;
    Ok(model)
}

// --- checkpoint io ----------------------------------------------------------

pub(crate) fn f64_to_hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub(crate) fn f64_from_hex(s: &str) -> Result<f64> {
    u64::from_str_radix(s.trim(), 16)
        .map(f64::from_bits)
        .map_err(|e| Error::Checkpoint(format!("bad f64 hex '{s}': {e}")))
}

/// Serialize a model to a line-oriented text checkpoint. Floats are stored as
/// raw IEEE-754 bits so the round trip is bit-exact.
pub fn model_to_text(model: &DiffModel) -> String {
    let mut s = String::new();
    s.push_str("kscp-model v1\n");
    s.push_str(&format!("kind={}\n", model.spec.kind.as_str()));
    s.push_str(&format!("input_dim={}\n", model.spec.input_dim));
    let hidden: Vec<String> = model.spec.hidden.iter().map(|h| h.to_string()).collect();
    s.push_str(&format!("hidden={}\n", hidden.join(",")));
    s.push_str(&format!("leaky_slope={}\n", f64_to_hex(model.spec.leaky_slope)));
    s.push_str(&format!("params={}\n", model.params.len()));
    for p in &model.params {
        s.push_str(&f64_to_hex(*p));
        s.push('\n');
    }
    s
}

pub(crate) struct KvLines<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> KvLines<'a> {
    pub fn new(text: &'a str) -> Self {
        KvLines { lines: text.lines().enumerate() }
    }

    pub fn expect_header(&mut self, header: &str) -> Result<()> {
        match self.lines.next() {
            Some((_, l)) if l.trim() == header => Ok(()),
            other => Err(Error::Checkpoint(format!(
                "expected header '{header}', got {:?}",
                other.map(|(_, l)| l)
            ))),
        }
    }

    pub fn next_kv(&mut self, key: &str) -> Result<&'a str> {
        match self.lines.next() {
            Some((ln, l)) => {
                let (k, v) = l
                    .split_once('=')
                    .ok_or_else(|| Error::Checkpoint(format!("line {}: expected key=value", ln + 1)))?;
                if k != key {
                    return Err(Error::Checkpoint(format!("line {}: expected key '{key}', got '{k}'", ln + 1)));
                }
                Ok(v)
            }
            None => Err(Error::Checkpoint(format!("missing key '{key}'"))),
        }
    }

    pub fn next_line(&mut self) -> Result<&'a str> {
        self.lines
            .next()
            .map(|(_, l)| l)
            .ok_or_else(|| Error::Checkpoint("unexpected end of checkpoint".into()))
    }
}

pub(crate) fn parse_hidden(v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| Error::Checkpoint(format!("bad hidden width '{t}': {e}")))
        })
        .collect()
}

/// Parse a model checkpoint produced by [`model_to_text`].
pub fn model_from_text(text: &str) -> Result<DiffModel> {
    let mut kv = KvLines::new(text);
    kv.expect_header("kscp-model v1")?;
    let kind = ModelKind::parse(kv.next_kv("kind")?)?;
    let input_dim: usize = kv
        .next_kv("input_dim")?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("bad input_dim: {e}")))?;
    let hidden = parse_hidden(kv.next_kv("hidden")?)?;
    let leaky_slope = f64_from_hex(kv.next_kv("leaky_slope")?)?;
    let n: usize = kv
        .next_kv("params")?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("bad param count: {e}")))?;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        params.push(f64_from_hex(kv.next_line()?)?);
    }
    let spec = ModelSpec { kind, input_dim, hidden, leaky_slope };
    if spec.param_count() != params.len() {
        return Err(Error::Checkpoint(format!(
            "param count {} does not match spec ({})",
            params.len(),
            spec.param_count()
        )));
    }
    Ok(DiffModel { spec, params })
}
