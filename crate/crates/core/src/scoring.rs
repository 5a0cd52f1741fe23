//! Temperature-scaled cosine scoring and the partial-label losses.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::data::LabelVector;
use crate::decoupling::softmax_inplace;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower clamp applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Temperature used when neither config nor backend provide one.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Softmax probabilities over the `C` categories of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryScores<T> {
    p: Array1<T>,
}

impl<T: Scalar> CategoryScores<T> {
    pub fn new(p: Array1<T>) -> Self {
        Self { p }
    }

    pub fn values(&self) -> &Array1<T> {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    PAsl,
    PBce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
    /// Fixed softmax temperature; `None` defers to the backend, then 0.07.
    #[serde(default)]
    pub temperature: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::PAsl,
            gamma_pos: 1.0,
            gamma_neg: 2.0,
            margin: 0.05,
            temperature: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_pos >= 0.0 && self.gamma_neg >= 0.0) {
            return Err(Error::Config("focusing exponents must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config(format!("margin {} outside [0, 1)", self.margin)));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("temperature {t} must be positive")));
            }
        }
        if self.gamma_neg < self.gamma_pos {
            log::warn!(
                "gamma_neg={} < gamma_pos={}: easy negatives are down-weighted less than positives",
                self.gamma_neg,
                self.gamma_pos
            );
        }
        Ok(())
    }

    pub fn resolve_temperature(&self, backend: Option<f64>) -> f64 {
        self.temperature.or(backend).unwrap_or(DEFAULT_TEMPERATURE)
    }
}

fn floored_ln<T: Scalar>(x: T) -> (T, T) {
    // value and derivative of ln(max(x, floor))
    let floor = T::of(LOG_FLOOR);
    if x > floor {
        (x.ln(), x.recip())
    } else {
        (floor.ln(), T::zero())
    }
}

/// `base^gamma` and its derivative in `base`, with `0^0 = 1`.
fn focal<T: Scalar>(base: T, gamma: f64) -> (T, T) {
    if gamma == 0.0 {
        return (T::one(), T::zero());
    }
    let g = T::of(gamma);
    let value = base.powf(g);
    let deriv = if base > T::zero() {
        g * base.powf(g - T::one())
    } else if gamma >= 1.0 {
        if gamma == 1.0 { T::one() } else { T::zero() }
    } else {
        T::zero()
    };
    (value, deriv)
}

/// Asymmetric term for one annotated entry and its derivative in `p`.
/// Unknown entries (`y = 0`) give exactly zero.
pub fn pasl_term_grad<T: Scalar>(p: T, y: i8, cfg: &LossConfig) -> (T, T) {
    match y {
        1 => {
            let (w, dw) = focal(T::one() - p, cfg.gamma_pos);
            let (l, dl) = floored_ln(p);
            (w * l, -dw * l + w * dl)
        }
        -1 => {
            let shifted = p - T::of(cfg.margin);
            if shifted <= T::zero() {
                // below the threshold: p_bar = 0, zero subgradient
                return (T::zero(), T::zero());
            }
            let (w, dw) = focal(shifted, cfg.gamma_neg);
            let (l, dl) = floored_ln(T::one() - shifted);
            (w * l, dw * l - w * dl)
        }
        _ => (T::zero(), T::zero()),
    }
}

pub fn pasl_term<T: Scalar>(p: T, y: i8, cfg: &LossConfig) -> T {
    pasl_term_grad(p, y, cfg).0
}

/// Binary cross-entropy on an annotated entry, scaled by `1 / known_fraction`.
pub fn pbce_term_grad<T: Scalar>(p: T, y: i8, known_fraction: f64) -> Result<(T, T)> {
    if !(known_fraction > 0.0) {
        return Err(Error::invalid("known_fraction must be positive"));
    }
    let scale = T::of(known_fraction).recip();
    let (v, d) = match y {
        1 => floored_ln(p),
        -1 => {
            let (l, dl) = floored_ln(T::one() - p);
            (l, -dl)
        }
        _ => (T::zero(), T::zero()),
    };
    Ok((v * scale, d * scale))
}

pub fn pbce_term<T: Scalar>(p: T, y: i8, known_fraction: f64) -> Result<T> {
    Ok(pbce_term_grad(p, y, known_fraction)?.0)
}

/// Sum of per-category terms for one image and its gradient in `p`.
/// Images without any annotated entry contribute zero.
pub fn sample_terms<T: Scalar>(p: ArrayView1<'_, T>, labels: &LabelVector, cfg: &LossConfig) -> Result<(T, Array1<T>)> {
    if p.len() != labels.len() {
        return Err(Error::shape(format!("{} scores for {} labels", p.len(), labels.len())));
    }
    let mut grad = Array1::zeros(p.len());
    let mut total = T::zero();
    let kf = labels.known_fraction();
    if kf == 0.0 {
        return Ok((total, grad));
    }
    for (c, (&pc, &y)) in p.iter().zip(labels.values()).enumerate() {
        let (v, d) = match cfg.variant {
            LossVariant::PAsl => pasl_term_grad(pc, y, cfg),
            LossVariant::PBce => pbce_term_grad(pc, y, kf)?,
        };
        total += v;
        grad[c] = d;
    }
    Ok((total, grad))
}

/// `-(1/N) * sum_n sum_c term(p[n,c], y[n,c])`.
pub fn total_loss<T: Scalar>(scores: &[CategoryScores<T>], labels: &[LabelVector], cfg: &LossConfig) -> Result<T> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::shape(format!("{} score rows for {} label rows", scores.len(), labels.len())));
    }
    let mut acc = T::zero();
    let mut unknown_rows = 0;
    for (s, l) in scores.iter().zip(labels) {
        if l.known_count() == 0 {
            unknown_rows += 1;
        }
        acc += sample_terms(s.values().view(), l, cfg)?.0;
    }
    if unknown_rows == labels.len() {
        log::warn!("every label in the batch is unknown; loss is identically zero");
    }
    Ok(-acc / T::of(scores.len() as f64))
}

/// Cosine similarities and softmax scores for one image, kept for backprop.
#[derive(Debug, Clone)]
pub struct ScoreForward<T> {
    pub scores: Array1<T>,
    pub similarities: Array1<T>,
    v_norm: Array1<T>,
    t_norm: Array1<T>,
    temperature: T,
}

fn row_norms<T: Scalar>(m: ArrayView2<'_, T>, what: &str) -> Result<Array1<T>> {
    let norms: Array1<T> = m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(c) = norms.iter().position(|n| *n == T::zero()) {
        return Err(Error::ZeroNorm(format!("{what} of category {c}")));
    }
    Ok(norms)
}

impl<T: Scalar> ScoreForward<T> {
    /// Rows of `visual` and `text` are per-category features, `(C, d_t)`.
    pub fn new(visual: ArrayView2<'_, T>, text: ArrayView2<'_, T>, temperature: T) -> Result<Self> {
        if visual.dim() != text.dim() {
            return Err(Error::shape(format!("visual {:?} vs text {:?}", visual.dim(), text.dim())));
        }
        let v_norm = row_norms(visual, "visual feature")?;
        let t_norm = row_norms(text, "text embedding")?;
        let similarities: Array1<T> = visual
            .rows()
            .into_iter()
            .zip(text.rows())
            .zip(v_norm.iter().zip(&t_norm))
            .map(|((v, t), (&nv, &nt))| v.dot(&t) / (nv * nt))
            .collect();
        let mut scores = similarities.mapv(|s| s / temperature);
        softmax_inplace(scores.view_mut().into_dyn());
        Ok(Self {
            scores,
            similarities,
            v_norm,
            t_norm,
            temperature,
        })
    }

    /// `dL/dsimilarities` from `dL/dscores`.
    pub fn grad_similarities(&self, grad_scores: ArrayView1<'_, T>) -> Array1<T> {
        let inner = self.scores.dot(&grad_scores);
        Zip::from(&self.scores)
            .and(&grad_scores)
            .map_collect(|&p, &g| p * (g - inner) / self.temperature)
    }

    /// `(dL/dvisual, dL/dtext)` from `dL/dscores`.
    pub fn backward(&self, visual: ArrayView2<'_, T>, text: ArrayView2<'_, T>, grad_scores: ArrayView1<'_, T>) -> (Array2<T>, Array2<T>) {
        let gs = self.grad_similarities(grad_scores);
        let mut gv = Array2::zeros(visual.dim());
        let mut gt = Array2::zeros(text.dim());
        for c in 0..visual.nrows() {
            let (nv, nt, s, g) = (self.v_norm[c], self.t_norm[c], self.similarities[c], gs[c]);
            let (v, t) = (visual.row(c), text.row(c));
            let mut rv = gv.row_mut(c);
            rv.scaled_add(g / (nv * nt), &t);
            rv.scaled_add(-g * s / (nv * nv), &v);
            let mut rt = gt.row_mut(c);
            rt.scaled_add(g / (nv * nt), &v);
            rt.scaled_add(-g * s / (nt * nt), &t);
        }
        (gv, gt)
    }
}

/// Softmax over categories of temperature-scaled cosine similarities.
pub fn predict_scores<T: Scalar>(visual: ArrayView2<'_, T>, text: ArrayView2<'_, T>, temperature: T) -> Result<CategoryScores<T>> {
    Ok(CategoryScores::new(ScoreForward::new(visual, text, temperature)?.scores))
}
