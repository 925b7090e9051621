//! Metrics with insecure as the positive (alarm) class, the joint-decoder
//! baseline, and the leave-one-out studies.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{normalize, DatagenError, Dataset};
use crate::exec::Execution;
use crate::labeling::TASK_NAMES;
use crate::mtl::{train, HeadKind, ModelConfig, MtlError, MtlModel, Prediction, TrainConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty test set")]
    Empty,
    #[error("need at least {need} topologies, found {found}")]
    TooFewTopologies { need: usize, found: usize },
    #[error("predictions file: {0}")]
    Predictions(String),
    #[error(transparent)]
    Model(#[from] MtlError),
    #[error(transparent)]
    Data(#[from] DatagenError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// F-beta score; zero when both inputs are zero.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    /// Counts from secure bits; an insecure (false) bit is a positive.
    pub fn from_secure_bits(pred: impl Iterator<Item = bool>, truth: impl Iterator<Item = bool>) -> Self {
        let mut c = Confusion::default();
        for (p, t) in pred.zip(truth) {
            match (!p, !t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// With no predicted positives there are no false alarms: precision 1.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// With no actual positives nothing was missed: recall 1.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f2(&self) -> f64 {
        f_beta(self.precision(), self.recall(), 2.0)
    }

    pub fn tp_rate(&self) -> f64 {
        self.recall()
    }

    pub fn tn_rate(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f2: f64,
    pub confusion: Confusion,
}

impl From<Confusion> for LevelMetrics {
    fn from(c: Confusion) -> Self {
        LevelMetrics {
            precision: c.precision(),
            recall: c.recall(),
            f2: c.f2(),
            confusion: c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n: usize,
    pub active: [bool; 4],
    pub per_task: [LevelMetrics; 4],
    /// Conjunction of the active criteria on both sides.
    pub overall: LevelMetrics,
    /// Mean per-task F2 over active criteria.
    pub macro_f2: f64,
    pub tp_rate: f64,
    pub tn_rate: f64,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,precision,recall,f2,tp,fp,tn,fn\n");
        let mut row = |name: &str, m: &LevelMetrics| {
            let c = m.confusion;
            let _ = writeln!(
                s,
                "{name},{:.6},{:.6},{:.6},{},{},{},{}",
                m.precision, m.recall, m.f2, c.tp, c.fp, c.tn, c.fn_
            );
        };
        for (t, m) in self.per_task.iter().enumerate() {
            if self.active[t] {
                row(TASK_NAMES[t], m);
            }
        }
        row("overall", &self.overall);
        let _ = writeln!(s, "macro_f2,,,{:.6},,,,", self.macro_f2);
        let _ = writeln!(s, "tp_rate,{:.6},,,,,,", self.tp_rate);
        let _ = writeln!(s, "tn_rate,{:.6},,,,,,", self.tn_rate);
        s
    }
}

/// Metrics from predicted and true secure bits.
pub fn metrics_from_bits(pred: &[[bool; 4]], truth: &[[bool; 4]], active: [bool; 4]) -> Result<MetricsReport, EvalError> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(EvalError::Empty);
    }
    let per_task: [LevelMetrics; 4] = std::array::from_fn(|t| {
        Confusion::from_secure_bits(pred.iter().map(|p| p[t]), truth.iter().map(|y| y[t])).into()
    });
    let conj = |v: &[bool; 4]| (0..4).all(|t| !active[t] || v[t]);
    let overall_c = Confusion::from_secure_bits(pred.iter().map(conj), truth.iter().map(conj));
    let n_active = active.iter().filter(|&&a| a).count().max(1);
    let macro_f2 = (0..4).filter(|&t| active[t]).map(|t| per_task[t].f2).sum::<f64>() / n_active as f64;
    Ok(MetricsReport {
        n: pred.len(),
        active,
        per_task,
        overall: overall_c.into(),
        macro_f2,
        tp_rate: overall_c.tp_rate(),
        tn_rate: overall_c.tn_rate(),
    })
}

pub fn metrics_from_predictions(preds: &[Prediction], ds: &Dataset) -> Result<MetricsReport, EvalError> {
    let active = preds.first().map_or([true; 4], |p| p.active);
    let pred: Vec<[bool; 4]> = preds.iter().map(|p| p.label).collect();
    let truth: Vec<[bool; 4]> = ds.samples.iter().map(|s| s.y.bits()).collect();
    metrics_from_bits(&pred, &truth, active)
}

pub fn evaluate(model: &MtlModel, test_ds: &Dataset) -> Result<MetricsReport, EvalError> {
    if test_ds.is_empty() {
        return Err(EvalError::Empty);
    }
    let preds = model.predict_dataset(test_ds)?;
    metrics_from_predictions(&preds, test_ds)
}

/// Scores an external predictions CSV (`sample_id, p_static, p_ss, p_volt,
/// p_trans`, probabilities of the secure class) against a dataset.
pub fn evaluate_external(ds: &Dataset, path: impl AsRef<Path>, threshold: f64) -> Result<MetricsReport, EvalError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| EvalError::Predictions(e.to_string()))?;
    let mut by_id: HashMap<u64, [bool; 4]> = HashMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| EvalError::Predictions(e.to_string()))?;
        if rec.len() != 5 {
            return Err(EvalError::Predictions(format!("expected 5 columns, found {}", rec.len())));
        }
        let id: u64 = rec[0].trim().parse().map_err(|_| EvalError::Predictions("bad sample_id".into()))?;
        let mut bits = [false; 4];
        for t in 0..4 {
            let p: f64 = rec[t + 1]
                .trim()
                .parse()
                .map_err(|_| EvalError::Predictions("bad probability".into()))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(EvalError::Predictions(format!("probability {p} outside [0, 1]")));
            }
            bits[t] = p >= threshold;
        }
        if by_id.insert(id, bits).is_some() {
            return Err(EvalError::Predictions(format!("duplicate sample_id {id}")));
        }
    }
    let mut pred = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        pred.push(
            *by_id
                .get(&s.sample_id)
                .ok_or_else(|| EvalError::Predictions(format!("no prediction for sample {}", s.sample_id)))?,
        );
    }
    let truth: Vec<[bool; 4]> = ds.samples.iter().map(|s| s.y.bits()).collect();
    metrics_from_bits(&pred, &truth, [true; 4])
}

pub fn baseline_config(mcfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        head: HeadKind::Joint,
        ..mcfg.clone()
    }
}

/// Same encoder and losses, one decoder with four outputs.
pub fn train_single_task_baseline(
    train_ds: &Dataset,
    cfg: &TrainConfig,
    mcfg: &ModelConfig,
) -> Result<(MtlModel, crate::mtl::TrainReport), EvalError> {
    Ok(train(train_ds, cfg, &baseline_config(mcfg))?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryRow {
    pub excluded: String,
    pub mtl_f2: f64,
    pub baseline_f2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryTable {
    pub rows: Vec<CategoryRow>,
}

impl CategoryTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("excluded,mtl_overall_f2,baseline_overall_f2\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6}", r.excluded, r.mtl_f2, r.baseline_f2);
        }
        s
    }
}

fn fit_and_score(train_raw: &Dataset, test_raw: &Dataset, cfg: &TrainConfig, mcfg: &ModelConfig) -> Result<f64, EvalError> {
    let tr = normalize(train_raw, None)?;
    let te = normalize(test_raw, tr.norm_stats.as_ref())?;
    let (model, _) = train(&tr, cfg, mcfg)?;
    Ok(evaluate(&model, &te)?.overall.f2)
}

/// For each criterion, trains without its decoder and scores overall
/// security on the remaining three, for the multi-task model and the
/// joint-decoder baseline. Inputs are raw (unnormalised) splits.
pub fn leave_one_category_out(
    train_raw: &Dataset,
    test_raw: &Dataset,
    cfg: &TrainConfig,
    mcfg: &ModelConfig,
    exec: Execution,
) -> Result<CategoryTable, EvalError> {
    if test_raw.is_empty() {
        return Err(EvalError::Empty);
    }
    let runs = exec.map_indexed(8, |k| {
        let (t, baseline) = (k / 2, k % 2 == 1);
        let mut m = if baseline { baseline_config(mcfg) } else { mcfg.clone() };
        m.active_tasks = [true; 4];
        m.active_tasks[t] = false;
        fit_and_score(train_raw, test_raw, cfg, &m)
    });
    let mut scores = Vec::with_capacity(8);
    for r in runs {
        scores.push(r?);
    }
    Ok(CategoryTable {
        rows: (0..4)
            .map(|t| CategoryRow {
                excluded: TASK_NAMES[t].to_string(),
                mtl_f2: scores[2 * t],
                baseline_f2: scores[2 * t + 1],
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopologyRow {
    pub topology_id: u32,
    pub n_train: usize,
    pub n_test: usize,
    pub mtl_f2: f64,
    pub baseline_f2: f64,
    /// Held-out sample ids found in the training set; must be zero.
    pub leaked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopologyReport {
    pub rows: Vec<TopologyRow>,
    pub mtl_mean: f64,
    pub mtl_variance: f64,
    pub baseline_mean: f64,
    pub baseline_variance: f64,
}

impl TopologyReport {
    pub fn total_leaked(&self) -> usize {
        self.rows.iter().map(|r| r.leaked).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("topology_id,n_train,n_test,mtl_overall_f2,baseline_overall_f2,leaked_ids\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{}",
                r.topology_id, r.n_train, r.n_test, r.mtl_f2, r.baseline_f2, r.leaked
            );
        }
        let _ = writeln!(s, "mean,,,{:.6},{:.6},", self.mtl_mean, self.baseline_mean);
        let _ = writeln!(s, "variance,,,{:.6},{:.6},", self.mtl_variance, self.baseline_variance);
        s
    }
}

/// Population mean and variance.
pub fn mean_variance(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Holds out each topology in turn: train on the others, test on it.
pub fn leave_one_topology_out(
    ds_raw: &Dataset,
    cfg: &TrainConfig,
    mcfg: &ModelConfig,
    exec: Execution,
) -> Result<TopologyReport, EvalError> {
    let topos = ds_raw.topology_ids();
    if topos.len() < 3 {
        return Err(EvalError::TooFewTopologies {
            need: 3,
            found: topos.len(),
        });
    }
    let runs = exec.map_indexed(2 * topos.len(), |k| {
        let (held, baseline) = (topos[k / 2], k % 2 == 1);
        let train_raw = ds_raw.filter(|s| s.topology_id != held);
        let test_raw = ds_raw.filter(|s| s.topology_id == held);
        let m = if baseline { baseline_config(mcfg) } else { mcfg.clone() };
        fit_and_score(&train_raw, &test_raw, cfg, &m)
    });
    let mut scores = Vec::with_capacity(runs.len());
    for r in runs {
        scores.push(r?);
    }
    let rows: Vec<TopologyRow> = topos
        .iter()
        .enumerate()
        .map(|(i, &held)| {
            let train_ids: BTreeSet<u64> = ds_raw
                .samples
                .iter()
                .filter(|s| s.topology_id != held)
                .map(|s| s.sample_id)
                .collect();
            let test: Vec<u64> = ds_raw
                .samples
                .iter()
                .filter(|s| s.topology_id == held)
                .map(|s| s.sample_id)
                .collect();
            TopologyRow {
                topology_id: held,
                n_train: train_ids.len(),
                n_test: test.len(),
                mtl_f2: scores[2 * i],
                baseline_f2: scores[2 * i + 1],
                leaked: test.iter().filter(|id| train_ids.contains(id)).count(),
            }
        })
        .collect();
    let (mtl_mean, mtl_variance) = mean_variance(&rows.iter().map(|r| r.mtl_f2).collect::<Vec<_>>());
    let (baseline_mean, baseline_variance) = mean_variance(&rows.iter().map(|r| r.baseline_f2).collect::<Vec<_>>());
    Ok(TopologyReport {
        rows,
        mtl_mean,
        mtl_variance,
        baseline_mean,
        baseline_variance,
    })
}

/// Grouped bar chart as a standalone SVG document. Values are in [0, 1].
pub fn svg_bar_chart(title: &str, series: &[&str], groups: &[(String, Vec<f64>)]) -> String {
    const COLORS: [&str; 4] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];
    let (w, h, left, bottom, top) = (720.0, 360.0, 60.0, 60.0, 40.0);
    let plot_h = h - bottom - top;
    let group_w = (w - left - 20.0) / groups.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            w - 20.0,
            left - 6.0,
            y + 4.0
        );
    }
    for (g, (label, vals)) in groups.iter().enumerate() {
        let x0 = left + g as f64 * group_w + group_w * 0.1;
        for (k, v) in vals.iter().enumerate() {
            let v = v.clamp(0.0, 1.0);
            let bh = plot_h * v;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{} {:.4}</title></rect>"#,
                x0 + k as f64 * bar_w,
                top + plot_h - bh,
                bar_w * 0.95,
                bh,
                COLORS[k % COLORS.len()],
                escape(series.get(k).copied().unwrap_or("")),
                v
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + group_w * 0.4,
            h - bottom + 18.0,
            escape(label)
        );
    }
    for (k, name) in series.iter().enumerate() {
        let x = left + k as f64 * 140.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            h - 22.0,
            COLORS[k % COLORS.len()],
            x + 16.0,
            h - 12.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
