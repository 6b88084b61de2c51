//! Split-conformal calibration: the order-statistic threshold, calibrated
//! predictors, and their serialization.

use crate::cde::{CdeModel, CondDensity};
use crate::data::Dataset;
use crate::diffmodels::{self, DiffModel};
use crate::scores::{self, Interval, ModelContext, ScoreKind};
use crate::{Error, Result};

/// Which order statistic the threshold uses.
///
/// `Ceiling` takes the k-th smallest calibration score with
/// k = ceil((n+1)(1-alpha)), the form under which the finite-sample coverage
/// guarantee is proved. `Floor` takes k = floor((n+1)(1-alpha)), matching a
/// common textual statement of the threshold; it can undercover by up to
/// 1/(n+1) and exists for exact-text replication only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantileRule {
    #[default]
    Ceiling,
    Floor,
}

/// Conformal threshold: the configured order statistic of the calibration
/// scores, or +inf when the rank exceeds n (the full-line sentinel).
pub fn conformal_quantile_with(scores: &[f64], alpha: f64, rule: QuantileRule) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let n = scores.len();
    assert!(n >= 1, "conformal quantile needs at least one score");
    let target = (n as f64 + 1.0) * (1.0 - alpha);
    let k = match rule {
        QuantileRule::Ceiling => target.ceil() as usize,
        QuantileRule::Floor => target.floor() as usize,
    };
    if k > n {
        return Ok(f64::INFINITY);
    }
    let k = k.max(1);
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(sorted[k - 1])
}

/// Conformal threshold under the guarantee-preserving ceiling rule.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    conformal_quantile_with(scores, alpha, QuantileRule::Ceiling)
}

/// A frozen model plus a calibrated score threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedPredictor {
    pub model: DiffModel,
    pub cde: Option<CdeModel>,
    pub kind: ScoreKind,
    pub q_star: f64,
    pub alpha: f64,
    pub n_calib: usize,
}

impl CalibratedPredictor {
    pub fn context(&self) -> ModelContext<'_> {
        match &self.cde {
            Some(cde) => ModelContext::with_cde(&self.model, cde as &dyn CondDensity),
            None => ModelContext::point(&self.model),
        }
    }

    /// Predictive interval {y : V(x, y) <= q*} at one input.
    pub fn predict_interval(&self, x: &[f64]) -> Interval {
        scores::invert(self.kind, self.context(), x, self.q_star)
    }

    /// Coverage test: V(x, y) <= q*.
    pub fn covers(&self, x: &[f64], y: f64) -> bool {
        if self.q_star == f64::INFINITY {
            return true;
        }
        scores::score(self.kind, self.context(), x, y) <= self.q_star
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("kscp-predictor v1\n");
        s.push_str(&format!("kind={}\n", self.kind.as_str()));
        s.push_str(&format!("alpha={}\n", diffmodels::f64_to_hex(self.alpha)));
        s.push_str(&format!("q_star={}\n", diffmodels::f64_to_hex(self.q_star)));
        s.push_str(&format!("n_calib={}\n", self.n_calib));
        let model_text = diffmodels::model_to_text(&self.model);
        s.push_str(&format!("model_lines={}\n", model_text.lines().count()));
        s.push_str(&model_text);
        match &self.cde {
            Some(cde) => {
                let cde_text = cde.to_text();
                s.push_str(&format!("cde_lines={}\n", cde_text.lines().count()));
                s.push_str(&cde_text);
            }
            None => s.push_str("cde_lines=0\n"),
        }
        s
    }

    pub fn from_text(text: &str) -> Result<CalibratedPredictor> {
        let mut kv = diffmodels::KvLines::new(text);
        kv.expect_header("kscp-predictor v1")?;
        let kind = ScoreKind::parse(kv.next_kv("kind")?)?;
        let alpha = diffmodels::f64_from_hex(kv.next_kv("alpha")?)?;
        let q_star = diffmodels::f64_from_hex(kv.next_kv("q_star")?)?;
        let n_calib: usize = kv
            .next_kv("n_calib")?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad n_calib: {e}")))?;
        let model_lines: usize = kv
            .next_kv("model_lines")?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad model_lines: {e}")))?;
        let mut model_text = String::new();
        for _ in 0..model_lines {
            model_text.push_str(kv.next_line()?);
            model_text.push('\n');
        }
        let model = diffmodels::model_from_text(&model_text)?;
        let cde_lines: usize = kv
            .next_kv("cde_lines")?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad cde_lines: {e}")))?;
        let cde = if cde_lines > 0 {
            let mut cde_text = String::new();
            for _ in 0..cde_lines {
                cde_text.push_str(kv.next_line()?);
                cde_text.push('\n');
            }
            Some(CdeModel::from_text(&cde_text)?)
        } else {
            None
        };
        Ok(CalibratedPredictor { model, cde, kind, q_star, alpha, n_calib })
    }
}

/// Score the calibration split with the frozen model and compute the
/// threshold under the ceiling rule.
pub fn calibrate(
    model: DiffModel,
    cde: Option<CdeModel>,
    kind: ScoreKind,
    calib: &Dataset,
    alpha: f64,
) -> Result<CalibratedPredictor> {
    calibrate_with(model, cde, kind, calib, alpha, QuantileRule::Ceiling)
}

pub fn calibrate_with(
    model: DiffModel,
    cde: Option<CdeModel>,
    kind: ScoreKind,
    calib: &Dataset,
    alpha: f64,
    rule: QuantileRule,
) -> Result<CalibratedPredictor> {
    assert!(!calib.is_empty(), "calibration split must be nonempty");
    let scores = calibration_scores(&model, cde.as_ref(), kind, calib);
    let q_star = conformal_quantile_with(&scores, alpha, rule)?;
    Ok(CalibratedPredictor { model, cde, kind, q_star, alpha, n_calib: calib.len() })
}

/// Scores of the calibration rows under a frozen model context.
pub fn calibration_scores(
    model: &DiffModel,
    cde: Option<&CdeModel>,
    kind: ScoreKind,
    calib: &Dataset,
) -> Vec<f64> {
    let ctx = match cde {
        Some(c) => ModelContext::with_cde(model, c as &dyn CondDensity),
        None => ModelContext::point(model),
    };
    (0..calib.len()).map(|i| scores::score(kind, ctx, calib.row(i), calib.y[i])).collect()
}
