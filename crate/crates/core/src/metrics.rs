//! Ranking and set-based multi-label metrics, binarization and report tables.
//!
//! Score and label matrices are laid out `(N_images, C)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabelVector;
use crate::error::{Error, Result};

/// Average precision of one class: mean over positives of the precision at
/// their rank. Ties keep input order. `None` when there are no positives.
pub fn average_precision<T: PartialOrd + Copy>(scores: &[T], labels: &[i8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if labels.iter().any(|&y| y != 1 && y != -1) {
        return Err(Error::InvalidLabels("evaluation labels must be fully annotated (+1/-1)".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| sum / hits as f64))
}

/// Conditions where a metric fell back to zero or a class was excluded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricFlag {
    ClassWithoutPositives { class: usize },
    ClassWithoutPredictions { class: usize },
    NoPredictedPositives,
    NoGroundTruthPositives,
    ZeroF1Denominator { metric: String },
    NoRankableClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Metrics {
    pub op: f64,
    pub cp: f64,
    pub or: f64,
    pub cr: f64,
    pub of1: f64,
    pub cf1: f64,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn harmonic(a: f64, b: f64) -> Option<f64> {
    (a + b > 0.0).then(|| 2.0 * a * b / (a + b))
}

/// Overall and per-class precision, recall and F1. Zero denominators give
/// zero and push a flag.
pub fn f1_metrics(pred: ArrayView2<'_, bool>, gt: ArrayView2<'_, i8>, flags: &mut Vec<MetricFlag>) -> Result<F1Metrics> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!("predictions {:?} vs labels {:?}", pred.dim(), gt.dim())));
    }
    if gt.iter().any(|&y| y != 1 && y != -1) {
        return Err(Error::InvalidLabels("evaluation labels must be fully annotated (+1/-1)".into()));
    }
    let c = gt.ncols();
    let (mut nc, mut np, mut ng) = (vec![0usize; c], vec![0usize; c], vec![0usize; c]);
    for (p_row, g_row) in pred.rows().into_iter().zip(gt.rows()) {
        for i in 0..c {
            let (p, g) = (p_row[i], g_row[i] == 1);
            np[i] += p as usize;
            ng[i] += g as usize;
            nc[i] += (p && g) as usize;
        }
    }
    let (snc, snp, sng) = (nc.iter().sum(), np.iter().sum(), ng.iter().sum());
    let op = ratio(snc, snp).unwrap_or_else(|| {
        flags.push(MetricFlag::NoPredictedPositives);
        0.0
    });
    let or = ratio(snc, sng).unwrap_or_else(|| {
        flags.push(MetricFlag::NoGroundTruthPositives);
        0.0
    });
    let (mut cp, mut cr) = (0.0, 0.0);
    for i in 0..c {
        cp += ratio(nc[i], np[i]).unwrap_or_else(|| {
            flags.push(MetricFlag::ClassWithoutPredictions { class: i });
            0.0
        });
        cr += ratio(nc[i], ng[i]).unwrap_or_else(|| {
            if !flags.contains(&MetricFlag::ClassWithoutPositives { class: i }) {
                flags.push(MetricFlag::ClassWithoutPositives { class: i });
            }
            0.0
        });
    }
    let (cp, cr) = if c > 0 { (cp / c as f64, cr / c as f64) } else { (0.0, 0.0) };
    let mut f1 = |a, b, name: &str| {
        harmonic(a, b).unwrap_or_else(|| {
            flags.push(MetricFlag::ZeroF1Denominator { metric: name.into() });
            0.0
        })
    };
    let of1 = f1(op, or, "OF1");
    let cf1 = f1(cp, cr, "CF1");
    Ok(F1Metrics { op, cp, or, cr, of1, cf1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum BinarizePolicy {
    /// Positive iff `p >= t`; `None` uses `1 / C`.
    Threshold {
        #[serde(default)]
        t: Option<f64>,
    },
    /// The `k` highest-scoring categories of each image are positive.
    TopK { k: usize },
}

impl Default for BinarizePolicy {
    fn default() -> Self {
        BinarizePolicy::TopK { k: 3 }
    }
}

impl BinarizePolicy {
    pub fn label(&self) -> String {
        match self {
            BinarizePolicy::Threshold { t: Some(t) } => format!("threshold({t})"),
            BinarizePolicy::Threshold { t: None } => "threshold(1/C)".into(),
            BinarizePolicy::TopK { k } => format!("top_k({k})"),
        }
    }
}

pub fn binarize<T: PartialOrd + Copy + num_traits::ToPrimitive>(scores: ArrayView2<'_, T>, policy: BinarizePolicy) -> Result<Array2<bool>> {
    let c = scores.ncols();
    match policy {
        BinarizePolicy::Threshold { t } => {
            let t = t.unwrap_or(1.0 / c as f64);
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::invalid(format!("threshold {t} outside (0, 1]")));
            }
            // compare in f64 so the inclusive boundary is exact for uniform scores
            Ok(scores.mapv(|p| p.to_f64().is_some_and(|p| p >= t || (p - t).abs() <= 1e-12 * t)))
        }
        BinarizePolicy::TopK { k } => {
            if k == 0 {
                return Err(Error::invalid("top_k needs k >= 1"));
            }
            let k = if k > c {
                log::warn!("top_k k={k} exceeds {c} categories; using k={c}");
                c
            } else {
                k
            };
            let mut out = Array2::from_elem(scores.dim(), false);
            for (row, mut dst) in scores.rows().into_iter().zip(out.rows_mut()) {
                let mut order: Vec<usize> = (0..c).collect();
                order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
                for &i in &order[..k] {
                    dst[i] = true;
                }
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMeta {
    pub proportion: f64,
    pub seed: u64,
    pub epoch: usize,
    pub dataset_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` for classes without positives; those are excluded from mAP.
    pub per_class_ap: Vec<Option<f64>>,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "OP")]
    pub op: f64,
    #[serde(rename = "CP")]
    pub cp: f64,
    #[serde(rename = "OR")]
    pub or: f64,
    #[serde(rename = "CR")]
    pub cr: f64,
    #[serde(rename = "OF1")]
    pub of1: f64,
    #[serde(rename = "CF1")]
    pub cf1: f64,
    pub policy: BinarizePolicy,
    pub meta: RunMeta,
    pub flags: Vec<MetricFlag>,
}

pub const CSV_HEADER: &str = "proportion,seed,epoch,mAP,OP,CP,OR,CR,OF1,CF1";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let m = &self.meta;
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            m.proportion, m.seed, m.epoch, self.map, self.op, self.cp, self.or, self.cr, self.of1, self.cf1
        )
    }

    pub fn to_csv(reports: &[MetricsReport]) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in reports {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Full report from an `(N, C)` score matrix and fully annotated labels.
pub fn evaluate_scores<T>(scores: ArrayView2<'_, T>, labels: &[LabelVector], policy: BinarizePolicy, meta: RunMeta) -> Result<MetricsReport>
where
    T: PartialOrd + Copy + Send + Sync + num_traits::ToPrimitive,
{
    if scores.nrows() != labels.len() || scores.nrows() == 0 {
        return Err(Error::shape(format!("{} score rows for {} label rows", scores.nrows(), labels.len())));
    }
    let c = scores.ncols();
    let mut gt = Array2::<i8>::zeros((labels.len(), c));
    for (mut row, l) in gt.rows_mut().into_iter().zip(labels) {
        if l.len() != c {
            return Err(Error::shape(format!("label length {} vs {c} scores", l.len())));
        }
        row.assign(&ArrayView1::from(l.values()));
    }
    let per_class_ap = (0..c)
        .into_par_iter()
        .map(|i| {
            let s: Vec<T> = scores.index_axis(Axis(1), i).to_vec();
            let y: Vec<i8> = gt.index_axis(Axis(1), i).to_vec();
            average_precision(&s, &y)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut flags: Vec<MetricFlag> = per_class_ap
        .iter()
        .enumerate()
        .filter(|(_, ap)| ap.is_none())
        .map(|(class, _)| MetricFlag::ClassWithoutPositives { class })
        .collect();
    let valid: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if valid.is_empty() {
        flags.push(MetricFlag::NoRankableClass);
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    let pred = binarize(scores, policy)?;
    let f = f1_metrics(pred.view(), gt.view(), &mut flags)?;
    Ok(MetricsReport {
        per_class_ap,
        map,
        op: f.op,
        cp: f.cp,
        or: f.or,
        cr: f.cr,
        of1: f.of1,
        cf1: f.cf1,
        policy,
        meta,
        flags,
    })
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }

    fn cell(&self) -> String {
        if self.n > 1 {
            format!("{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std)
        } else {
            format!("{:.1}", 100.0 * self.mean)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionSummary {
    pub proportion: f64,
    pub map: MeanStd,
    pub of1: MeanStd,
    pub cf1: MeanStd,
}

/// Cross-proportion summary: one entry per proportion plus the averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub proportions: Vec<ProportionSummary>,
    pub average_map: f64,
    pub average_of1: f64,
    pub average_cf1: f64,
}

pub fn aggregate_reports(reports: &[MetricsReport]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to aggregate"));
    }
    // key on the bit pattern so 0.1 and 0.1 group together without float Ord
    let mut groups: BTreeMap<u64, Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.meta.proportion.to_bits()).or_default().push(r);
    }
    let mut proportions: Vec<ProportionSummary> = groups
        .into_values()
        .map(|rs| {
            let pick = |f: fn(&MetricsReport) -> f64| MeanStd::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            ProportionSummary {
                proportion: rs[0].meta.proportion,
                map: pick(|r| r.map),
                of1: pick(|r| r.of1),
                cf1: pick(|r| r.cf1),
            }
        })
        .collect();
    proportions.sort_by(|a, b| a.proportion.total_cmp(&b.proportion));
    let avg = |f: fn(&ProportionSummary) -> f64| proportions.iter().map(f).sum::<f64>() / proportions.len() as f64;
    Ok(Summary {
        average_map: avg(|p| p.map.mean),
        average_of1: avg(|p| p.of1.mean),
        average_cf1: avg(|p| p.cf1.mean),
        proportions,
    })
}

type Column = (&'static str, fn(&ProportionSummary) -> MeanStd, fn(&Summary) -> f64);

const COLUMNS: [Column; 3] = [
    ("mAP", |p| p.map, |s| s.average_map),
    ("OF1", |p| p.of1, |s| s.average_of1),
    ("CF1", |p| p.cf1, |s| s.average_cf1),
];

impl Summary {
    /// Rows are metrics, columns are label proportions followed by `Avg.`.
    /// Values are percentages.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Metric |");
        for p in &self.proportions {
            let _ = write!(s, " {:.0}% |", 100.0 * p.proportion);
        }
        s.push_str(" Avg. |\n|---|");
        s.push_str(&"---|".repeat(self.proportions.len() + 1));
        s.push('\n');
        for (name, cell, avg) in COLUMNS {
            let _ = write!(s, "| {name} |");
            for p in &self.proportions {
                let _ = write!(s, " {} |", cell(p).cell());
            }
            let _ = writeln!(s, " {:.1} |", 100.0 * avg(self));
        }
        s
    }

    /// Long-form CSV: `metric,proportion,mean,std,n`, with `avg` rows last.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,proportion,mean,std,n\n");
        for (name, cell, avg) in COLUMNS {
            for p in &self.proportions {
                let m = cell(p);
                let _ = writeln!(s, "{name},{},{:.6},{:.6},{}", p.proportion, m.mean, m.std, m.n);
            }
            let _ = writeln!(s, "{name},avg,{:.6},,", avg(self));
        }
        s
    }
}
