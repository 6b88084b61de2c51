//! Nonconformity scores and their inversion into predictive intervals.
//!
//! Three score families share one interface: absolute residual, residual
//! normalized by a conditional standard deviation from a density model, and
//! the two-sided quantile score. Each has a plain evaluation path for frozen
//! models and a tape-building path so training objectives can differentiate
//! through the score.

use crate::cde::CondDensity;
use crate::diffmodels::tape::{Graph, NodeId};
use crate::diffmodels::{DiffModel, ModelKind};

/// Score family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Residual,
    Normalized,
    Quantile,
}

impl ScoreKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreKind::Residual => "residual",
            ScoreKind::Normalized => "normalized",
            ScoreKind::Quantile => "quantile",
        }
    }

    pub fn parse(s: &str) -> crate::Result<Self> {
        match s {
            "residual" => Ok(ScoreKind::Residual),
            "normalized" => Ok(ScoreKind::Normalized),
            "quantile" => Ok(ScoreKind::Quantile),
            other => Err(crate::Error::InvalidConfig(format!("unknown score kind '{other}'"))),
        }
    }

    /// Does this score need a conditional density model for sigma(x)?
    pub fn needs_cde(&self) -> bool {
        matches!(self, ScoreKind::Normalized)
    }

    /// Does this score need a two-output model?
    pub fn needs_quantile_model(&self) -> bool {
        matches!(self, ScoreKind::Quantile)
    }
}

/// Frozen model context a score evaluates against.
#[derive(Clone, Copy)]
pub struct ModelContext<'a> {
    pub model: &'a DiffModel,
    pub cde: Option<&'a dyn CondDensity>,
}

impl<'a> ModelContext<'a> {
    pub fn point(model: &'a DiffModel) -> Self {
        ModelContext { model, cde: None }
    }

    pub fn with_cde(model: &'a DiffModel, cde: &'a dyn CondDensity) -> Self {
        ModelContext { model, cde: Some(cde) }
    }

    fn sigma(&self, x: &[f64]) -> f64 {
        let cde = self.cde.expect("normalized score needs a conditional density model");
        let s = cde.cond_std(x);
        assert!(s > 0.0, "conditional std must be positive (floor guarantees this)");
        s
    }
}

/// A predictive interval. `lo > hi` encodes the empty set (possible only for
/// the quantile score with a negative calibration threshold); infinite
/// endpoints encode the full line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn full_line() -> Self {
        Interval { lo: f64::NEG_INFINITY, hi: f64::INFINITY }
    }

    pub fn is_full(&self) -> bool {
        self.lo == f64::NEG_INFINITY && self.hi == f64::INFINITY
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    pub fn contains(&self, y: f64) -> bool {
        y >= self.lo && y <= self.hi
    }

    /// Interval length: 0 for the empty set, +inf for the full line.
    pub fn size(&self) -> f64 {
        if self.is_full() {
            f64::INFINITY
        } else if self.is_empty() {
            0.0
        } else {
            self.hi - self.lo
        }
    }
}

/// Interval length; the free-function form of [`Interval::size`].
pub fn set_size(interval: &Interval) -> f64 {
    interval.size()
}

/// Evaluate the nonconformity score V(x, y) under a frozen context.
pub fn score(kind: ScoreKind, ctx: ModelContext<'_>, x: &[f64], y: f64) -> f64 {
    match kind {
        ScoreKind::Residual => (y - ctx.model.predict_point(x)).abs(),
        ScoreKind::Normalized => (y - ctx.model.predict_point(x)).abs() / ctx.sigma(x),
        ScoreKind::Quantile => {
            let (lo, hi) = ctx.model.predict_quantiles(x);
            (lo - y).max(y - hi)
        }
    }
}

/// Invert the score at threshold `q_star` into the interval {y : V(x,y) <= q*}.
pub fn invert(kind: ScoreKind, ctx: ModelContext<'_>, x: &[f64], q_star: f64) -> Interval {
    if q_star == f64::INFINITY {
        return Interval::full_line();
    }
    match kind {
        ScoreKind::Residual => {
            let f = ctx.model.predict_point(x);
            Interval { lo: f - q_star, hi: f + q_star }
        }
        ScoreKind::Normalized => {
            let f = ctx.model.predict_point(x);
            let s = ctx.sigma(x);
            Interval { lo: f - s * q_star, hi: f + s * q_star }
        }
        ScoreKind::Quantile => {
            // lo > hi (empty set) is possible when q* < -(hi-lo)/2.
            let (lo, hi) = ctx.model.predict_quantiles(x);
            Interval { lo: lo - q_star, hi: hi + q_star }
        }
    }
}

/// Build score nodes V(x_i, y_i) on a tape for a batch: `x` is `[n, d]`
/// row-major, `y` has length n. For the normalized kind, `sigma` carries the
/// per-row conditional stds (constants with respect to the model parameters).
pub fn scores_graph(
    kind: ScoreKind,
    model: &DiffModel,
    g: &mut Graph,
    x: &[f64],
    y: &[f64],
    sigma: Option<&[f64]>,
) -> NodeId {
    let yc = g.constant(y);
    match kind {
        ScoreKind::Residual => {
            let pred = model.forward_graph(g, x);
            let err = g.sub(yc, pred);
            g.abs(err)
        }
        ScoreKind::Normalized => {
            let s = sigma.expect("normalized scores_graph needs per-row sigma");
            assert_eq!(s.len(), y.len());
            let pred = model.forward_graph(g, x);
            let err = g.sub(yc, pred);
            let a = g.abs(err);
            let sc = g.constant(s);
            g.div(a, sc)
        }
        ScoreKind::Quantile => {
            assert_eq!(model.spec.kind, ModelKind::QuantileMlp);
            let raw = model.forward_graph(g, x);
            let (lo, hi) = model.ordered_heads(g, raw);
            let a = g.sub(lo, yc);
            let b = g.sub(yc, hi);
            g.max_pair(a, b)
        }
    }
}

/// Per-row conditional stds for the normalized kind, or `None` otherwise.
pub fn sigma_for_rows(
    kind: ScoreKind,
    cde: Option<&dyn CondDensity>,
    rows: &[&[f64]],
) -> Option<Vec<f64>> {
    if kind != ScoreKind::Normalized {
        return None;
    }
    let cde = cde.expect("normalized score needs a conditional density model");
    Some(rows.iter().map(|r| cde.cond_std(r)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmodels::ModelSpec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    struct FixedStd(f64);

    impl CondDensity for FixedStd {
        fn sample_at(&self, _x: &[f64], n: usize, _seed: u64) -> Vec<f64> {
            vec![0.0; n]
        }
        fn cond_std(&self, _x: &[f64]) -> f64 {
            self.0
        }
    }

    fn const_point_model(value: f64) -> DiffModel {
        DiffModel { spec: ModelSpec::linear(1), params: vec![0.0, value] }
    }

    fn const_quantile_model(lo: f64, hi: f64) -> DiffModel {
        DiffModel { spec: ModelSpec::quantile(1, vec![]), params: vec![0.0, 0.0, lo, hi] }
    }

    #[test]
    fn residual_and_normalized_by_hand() {
        let m = const_point_model(1.0);
        assert_relative_eq!(score(ScoreKind::Residual, ModelContext::point(&m), &[0.0], 3.0), 2.0);
        let cde = FixedStd(2.0);
        let ctx = ModelContext::with_cde(&m, &cde);
        assert_relative_eq!(score(ScoreKind::Normalized, ctx, &[0.0], 3.0), 1.0);
    }

    #[test]
    fn quantile_score_by_hand() {
        let m = const_quantile_model(1.0, 3.0);
        let ctx = ModelContext::point(&m);
        assert_relative_eq!(score(ScoreKind::Quantile, ctx, &[0.0], 0.0), 1.0);
        assert_relative_eq!(score(ScoreKind::Quantile, ctx, &[0.0], 2.0), -1.0);
        assert_relative_eq!(score(ScoreKind::Quantile, ctx, &[0.0], 4.0), 1.0);
    }

    #[test]
    fn invert_by_hand() {
        let m = const_point_model(2.0);
        let iv = invert(ScoreKind::Residual, ModelContext::point(&m), &[0.0], 1.5);
        assert_relative_eq!(iv.lo, 0.5);
        assert_relative_eq!(iv.hi, 3.5);
        assert_relative_eq!(iv.size(), 3.0);

        let mq = const_quantile_model(1.0, 3.0);
        let iv = invert(ScoreKind::Quantile, ModelContext::point(&mq), &[0.0], 0.5);
        assert_relative_eq!(iv.lo, 0.5);
        assert_relative_eq!(iv.hi, 3.5);
        // size = (hi - lo) + 2 q*.
        assert_relative_eq!(iv.size(), 2.0 + 1.0);

        let mz = const_point_model(0.0);
        let cde = FixedStd(2.0);
        let iv = invert(ScoreKind::Normalized, ModelContext::with_cde(&mz, &cde), &[0.0], 1.0);
        assert_relative_eq!(iv.lo, -2.0);
        assert_relative_eq!(iv.hi, 2.0);
    }

    #[test]
    fn sentinels() {
        let m = const_point_model(0.0);
        let iv = invert(ScoreKind::Residual, ModelContext::point(&m), &[0.0], f64::INFINITY);
        assert!(iv.is_full());
        assert_eq!(iv.size(), f64::INFINITY);
        assert!(iv.contains(1e300));

        let mq = const_quantile_model(1.0, 3.0);
        let iv = invert(ScoreKind::Quantile, ModelContext::point(&mq), &[0.0], -1.5);
        assert!(iv.is_empty());
        assert_eq!(iv.size(), 0.0);
        assert!(!iv.contains(2.0));
    }

    proptest! {
        // Round trip: y is inside the interval iff q* >= score(x, y).
        #[test]
        fn invert_round_trip(
            w in -2.0f64..2.0,
            b in -2.0f64..2.0,
            x in -3.0f64..3.0,
            y in -5.0f64..5.0,
            dq in -1.0f64..3.0,
            kind_sel in 0usize..3,
        ) {
            let (model, kind): (DiffModel, ScoreKind) = match kind_sel {
                0 => (DiffModel { spec: ModelSpec::linear(1), params: vec![w, b] }, ScoreKind::Residual),
                1 => (DiffModel { spec: ModelSpec::linear(1), params: vec![w, b] }, ScoreKind::Normalized),
                _ => (
                    DiffModel { spec: ModelSpec::quantile(1, vec![]), params: vec![w, 0.0, b, b + 1.0] },
                    ScoreKind::Quantile,
                ),
            };
            let cde = FixedStd(1.7);
            let ctx = if kind == ScoreKind::Normalized {
                ModelContext::with_cde(&model, &cde)
            } else {
                ModelContext::point(&model)
            };
            let v = score(kind, ctx, &[x], y);
            let q = v + dq;
            let iv = invert(kind, ctx, &[x], q);
            if dq >= 1e-12 {
                prop_assert!(iv.contains(y), "y={y} outside {iv:?} though q*={q} >= V={v}");
            } else if dq <= -1e-12 {
                prop_assert!(!iv.contains(y), "y={y} inside {iv:?} though q*={q} < V={v}");
            }
        }

        // Residual and normalized intervals are symmetric around f(x); all
        // kinds grow monotonically with q*.
        #[test]
        fn symmetry_and_monotonicity(
            w in -2.0f64..2.0,
            b in -2.0f64..2.0,
            x in -3.0f64..3.0,
            q1 in 0.0f64..2.0,
            dq in 0.0f64..2.0,
        ) {
            let model = DiffModel { spec: ModelSpec::linear(1), params: vec![w, b] };
            let ctx = ModelContext::point(&model);
            let f = model.predict_point(&[x]);
            let iv = invert(ScoreKind::Residual, ctx, &[x], q1);
            prop_assert!((f - iv.lo - (iv.hi - f)).abs() < 1e-10);
            let iv2 = invert(ScoreKind::Residual, ctx, &[x], q1 + dq);
            prop_assert!(iv2.lo <= iv.lo && iv2.hi >= iv.hi);
        }
    }
}
