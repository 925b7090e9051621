use std::fs;
use std::path::{Path, PathBuf};

use gridmtl::datagen::{self, ClassCounts, Dataset, GenerationReport};
use gridmtl::evalharness::{self, MetricsReport};
use gridmtl::exec::Execution;
use gridmtl::grid;
use gridmtl::labeling::TASK_NAMES;
use gridmtl::mtl::{self, MtlModel, Weighting};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

/// File names under `output_dir`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Layout {
            dir: cfg.output_dir.clone(),
        }
    }

    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.csv")
    }

    pub fn split(&self, which: Split) -> PathBuf {
        self.dir.join(format!("{}.csv", which.name()))
    }

    pub fn generation_report(&self) -> PathBuf {
        self.dir.join("generation_report.json")
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.dir.join(format!("model_{name}.bin"))
    }

    pub fn train_log(&self, name: &str) -> PathBuf {
        self.dir.join(format!("train_{name}.csv"))
    }

    pub fn train_summary(&self, name: &str) -> PathBuf {
        self.dir.join(format!("train_{name}.json"))
    }

    pub fn metrics(&self, name: &str, split: Split) -> PathBuf {
        self.dir.join(format!("metrics_{name}_{}", split.name()))
    }

    pub fn leaveout(&self, mode: LeaveoutMode) -> PathBuf {
        self.dir.join(format!("leaveout_{}", mode.name()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeaveoutMode {
    Category,
    Topology,
}

impl LeaveoutMode {
    pub fn name(self) -> &'static str {
        match self {
            LeaveoutMode::Category => "category",
            LeaveoutMode::Topology => "topology",
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes pretty JSON and returns its digest.
fn write_json(path: &Path, v: &impl Serialize) -> Result<String, CliError> {
    let mut text = serde_json::to_string_pretty(v).map_err(runtime)?;
    text.push('\n');
    fs::write(path, &text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(text.as_bytes()))
}

fn write_text(path: &Path, text: &str) -> Result<String, CliError> {
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(text.as_bytes()))
}

fn read_data(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(runtime(format!("{} not found; run `generate` first", path.display())));
    }
    datagen::read_dataset(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<MtlModel, CliError> {
    if !path.exists() {
        return Err(runtime(format!("{} not found; run `train` first", path.display())));
    }
    MtlModel::load(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize)]
pub struct TopologyCounts {
    pub topology_id: u32,
    pub contingencies: usize,
    pub samples: usize,
    pub train: usize,
    pub test: usize,
    pub class_balance: ClassCounts,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateOutput {
    pub dataset_digest: String,
    pub train_digest: String,
    pub test_digest: String,
    pub report_digest: String,
    pub report: GenerationReport,
    pub per_topology: Vec<TopologyCounts>,
}

/// Raw dataset plus stratified train/test files and a JSON report.
pub fn generate(cfg: &RunConfig, exec: Execution) -> Result<GenerateOutput, CliError> {
    let (ds, report, train, test, n_cases) = build_dataset(cfg, exec)?;
    let out = Layout::new(cfg);
    fs::create_dir_all(&out.dir).map_err(|e| runtime(format!("{}: {e}", out.dir.display())))?;
    let dataset_digest = datagen::write_dataset(&ds, out.dataset()).map_err(runtime)?;
    let train_digest = datagen::write_dataset(&train, out.split(Split::Train)).map_err(runtime)?;
    let test_digest = datagen::write_dataset(&test, out.split(Split::Test)).map_err(runtime)?;
    let per_topology = n_cases
        .into_iter()
        .map(|(id, n_cases)| {
            let of = |d: &Dataset| d.samples.iter().filter(|s| s.topology_id == id).count();
            TopologyCounts {
                topology_id: id,
                contingencies: n_cases,
                samples: of(&ds),
                train: of(&train),
                test: of(&test),
                class_balance: ClassCounts::of(ds.samples.iter().filter(|s| s.topology_id == id).map(|s| s.y)),
            }
        })
        .collect::<Vec<_>>();
    let minority = report.class_balance.minority_fraction();
    let doc = json!({
        "config": cfg.to_json(),
        "seeds": cfg.seeds(),
        "generation": &report,
        "minority_fraction": TASK_NAMES.iter().zip(minority).map(|(n, f)| (n.to_string(), json!(f))).collect::<serde_json::Map<_, _>>(),
        "per_topology": &per_topology,
        "digests": {"dataset": &dataset_digest, "train": &train_digest, "test": &test_digest},
    });
    let report_digest = write_json(&out.generation_report(), &doc)?;
    info!(
        "generated {} samples ({} train, {} test); discarded {} power-flow, {} dynamics",
        ds.len(),
        train.len(),
        test.len(),
        report.discarded_power_flow,
        report.discarded_dynamics
    );
    Ok(GenerateOutput {
        dataset_digest,
        train_digest,
        test_digest,
        report_digest,
        report,
        per_topology,
    })
}

/// Raw data, report, train and test splits, and `(topology_id, contingencies)`.
type Built = (Dataset, GenerationReport, Dataset, Dataset, Vec<(u32, usize)>);

/// Generation and split without touching the filesystem.
pub fn build_dataset(cfg: &RunConfig, exec: Execution) -> Result<Built, CliError> {
    let net = cfg.network()?;
    let nets = grid::enumerate_topologies(&net, cfg.topologies).map_err(|e| CliError::Config(e.to_string()))?;
    let cases: Vec<_> = nets
        .iter()
        .map(|n| datagen::enumerate_contingencies(n, &cfg.contingencies, &cfg.sim))
        .collect();
    if let Some((n, _)) = nets.iter().zip(&cases).find(|(_, c)| c.is_empty()) {
        return Err(CliError::Config(format!(
            "topology {} has no contingency that keeps the grid connected",
            n.topology_id
        )));
    }
    let (mut ds, report) = datagen::generate_dataset(
        &nets,
        &cases,
        cfg.n_per_case,
        &cfg.sampler,
        &cfg.labels,
        &cfg.sim,
        exec,
    )
    .map_err(runtime)?;
    ds.config = cfg.to_json();
    ds.seed = cfg.seed;
    let (train, test) = datagen::split(&ds, cfg.test_fraction, cfg.seeds().split).map_err(runtime)?;
    let n_cases = nets.iter().zip(&cases).map(|(n, c)| (n.topology_id, c.len())).collect();
    Ok((ds, report, train, test, n_cases))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub weighting: Option<Weighting>,
    pub baseline: bool,
    pub name: Option<String>,
}

impl TrainOptions {
    pub fn model_name(&self, cfg: &RunConfig) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let mut n = if self.baseline { "baseline" } else { "mtl" }.to_string();
        if let Some(w) = self.weighting {
            if w != cfg.train.weighting {
                n.push_str(match w {
                    Weighting::Uniform => "_uniform",
                    Weighting::Adaptive => "_adaptive",
                });
            }
        }
        n
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutput {
    pub name: String,
    pub model_digest: String,
    pub report_digest: String,
    pub best_epoch: usize,
    pub epochs: usize,
    pub stopped_early: bool,
}

/// Fits on the raw training split using its own normalisation statistics.
pub fn fit(cfg: &RunConfig, train_raw: &Dataset, opts: &TrainOptions) -> Result<(MtlModel, mtl::TrainReport), CliError> {
    let norm = datagen::normalize(train_raw, None).map_err(runtime)?;
    let mut tcfg = cfg.train.clone();
    if let Some(w) = opts.weighting {
        tcfg.weighting = w;
    }
    if opts.baseline {
        evalharness::train_single_task_baseline(&norm, &tcfg, &cfg.model).map_err(runtime)
    } else {
        mtl::train(&norm, &tcfg, &cfg.model).map_err(runtime)
    }
}

pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutput, CliError> {
    let out = Layout::new(cfg);
    let train_path = out.split(Split::Train);
    let train_raw = read_data(&train_path)?;
    let name = opts.model_name(cfg);
    let (model, report) = fit(cfg, &train_raw, opts)?;
    let model_digest = model.save(out.model(&name)).map_err(runtime)?;
    report.write_csv(out.train_log(&name)).map_err(runtime)?;
    let summary = TrainOutput {
        name: name.clone(),
        model_digest,
        report_digest: report.digest(),
        best_epoch: report.best_epoch,
        epochs: report.rows.len().saturating_sub(1),
        stopped_early: report.stopped_early,
    };
    write_json(
        &out.train_summary(&name),
        &json!({
            "config": cfg.to_json(),
            "baseline": opts.baseline,
            "weighting": opts.weighting.unwrap_or(cfg.train.weighting),
            "n_train": report.n_train,
            "n_val": report.n_val,
            "train_dataset_digest": datagen::dataset_digest(&train_raw).map_err(runtime)?,
            "summary": &summary,
        }),
    )?;
    info!(
        "trained {name}: best epoch {} of {}, model {}",
        summary.best_epoch, summary.epochs, summary.model_digest
    );
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct EvaluateOptions {
    pub name: String,
    pub split: Split,
    /// CSV of `sample_id` and four secure probabilities, scored instead of a model.
    pub predictions: Option<PathBuf>,
    pub threshold: f64,
}

pub fn evaluate(cfg: &RunConfig, opts: &EvaluateOptions) -> Result<MetricsReport, CliError> {
    let out = Layout::new(cfg);
    let data_path = out.split(opts.split);
    let ds = read_data(&data_path)?;
    let (report, source) = match &opts.predictions {
        Some(p) => (
            evalharness::evaluate_external(&ds, p, opts.threshold).map_err(runtime)?,
            json!({"predictions": p.display().to_string()}),
        ),
        None => {
            let model = load_model(&out.model(&opts.name))?;
            let r = evalharness::evaluate(&model, &ds).map_err(runtime)?;
            (r, json!({"model": &opts.name, "model_digest": model.digest()}))
        }
    };
    let base = out.metrics(&opts.name, opts.split);
    write_text(&base.with_extension("csv"), &report.to_csv())?;
    write_json(
        &base.with_extension("json"),
        &json!({
            "config": cfg.to_json(),
            "source": source,
            "split": opts.split.name(),
            "dataset_digest": datagen::dataset_digest(&ds).map_err(runtime)?,
            "metrics": &report,
        }),
    )?;
    info!(
        "{} on {}: overall F2 {:.4}, macro F2 {:.4}",
        opts.name,
        opts.split.name(),
        report.overall.f2,
        report.macro_f2
    );
    Ok(report)
}

pub enum LeaveoutOutput {
    Category(evalharness::CategoryTable),
    Topology(evalharness::TopologyReport),
}

pub fn leaveout(cfg: &RunConfig, mode: LeaveoutMode, exec: Execution) -> Result<LeaveoutOutput, CliError> {
    let out = Layout::new(cfg);
    let base = out.leaveout(mode);
    let (csv, value, result) = match mode {
        LeaveoutMode::Category => {
            let train_raw = read_data(&out.split(Split::Train))?;
            let test_raw = read_data(&out.split(Split::Test))?;
            let t = evalharness::leave_one_category_out(&train_raw, &test_raw, &cfg.train, &cfg.model, exec)
                .map_err(runtime)?;
            (t.to_csv(), serde_json::to_value(&t).map_err(runtime)?, LeaveoutOutput::Category(t))
        }
        LeaveoutMode::Topology => {
            let ds = read_data(&out.dataset())?;
            let r = evalharness::leave_one_topology_out(&ds, &cfg.train, &cfg.model, exec).map_err(runtime)?;
            if r.total_leaked() != 0 {
                return Err(runtime(format!("{} held-out samples leaked into training", r.total_leaked())));
            }
            (r.to_csv(), serde_json::to_value(&r).map_err(runtime)?, LeaveoutOutput::Topology(r))
        }
    };
    write_text(&base.with_extension("csv"), &csv)?;
    write_json(
        &base.with_extension("json"),
        &json!({"config": cfg.to_json(), "mode": mode.name(), "result": value}),
    )?;
    Ok(result)
}

fn read_json(path: &Path) -> Option<Value> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn f64_at(v: &Value, ptr: &str) -> f64 {
    v.pointer(ptr).and_then(Value::as_f64).unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ReportOutput {
    pub markdown: String,
    pub plots: Vec<PathBuf>,
}

/// Collects every metrics and leave-out file under `output_dir` into
/// `report.md`, and optionally SVG bar charts.
pub fn report(cfg: &RunConfig, plots: bool) -> Result<ReportOutput, CliError> {
    let out = Layout::new(cfg);
    let mut names: Vec<(String, Value)> = Vec::new();
    let entries = fs::read_dir(&out.dir).map_err(|e| runtime(format!("{}: {e}", out.dir.display())))?;
    let mut files: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    files.sort();
    for f in &files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if f.extension().is_some_and(|e| e == "json") {
            if let Some(rest) = stem.strip_prefix("metrics_") {
                if let Some(v) = read_json(f) {
                    names.push((rest.to_string(), v));
                }
            }
        }
    }
    let category = read_json(&out.leaveout(LeaveoutMode::Category).with_extension("json"));
    let topology = read_json(&out.leaveout(LeaveoutMode::Topology).with_extension("json"));
    let generation = read_json(&out.generation_report());
    if names.is_empty() && category.is_none() && topology.is_none() && generation.is_none() {
        return Err(runtime(format!(
            "nothing to report in {}; run `evaluate` or `leaveout` first",
            out.dir.display()
        )));
    }

    let mut md = String::from("# Security assessment report\n\n");
    let mut result = ReportOutput::default();
    if let Some(g) = &generation {
        let n = f64_at(g, "/generation/class_balance/samples");
        md.push_str(&format!(
            "## Class balance\n\n{n} samples, {} overall secure.\n\n| criterion | secure | insecure | minority fraction |\n|---|---|---|---|\n",
            f64_at(g, "/generation/class_balance/overall_secure")
        ));
        for (t, task) in TASK_NAMES.iter().enumerate() {
            let secure = f64_at(g, &format!("/generation/class_balance/secure/{t}"));
            md.push_str(&format!(
                "| {task} | {secure} | {} | {:.3} |\n",
                n - secure,
                f64_at(g, &format!("/minority_fraction/{task}"))
            ));
        }
        md.push('\n');
    }
    if !names.is_empty() {
        md.push_str("## F2 by criterion\n\n| run | static | small_signal | voltage | transient | overall | TP rate | TN rate |\n|---|---|---|---|---|---|---|---|\n");
        for (name, v) in &names {
            let mut row = format!("| {name} |");
            for t in 0..4 {
                row.push_str(&format!(" {:.4} |", f64_at(v, &format!("/metrics/per_task/{t}/f2"))));
            }
            row.push_str(&format!(
                " {:.4} | {:.4} | {:.4} |\n",
                f64_at(v, "/metrics/overall/f2"),
                f64_at(v, "/metrics/tp_rate"),
                f64_at(v, "/metrics/tn_rate")
            ));
            md.push_str(&row);
        }
        md.push('\n');
        if plots {
            let series: Vec<&str> = names.iter().map(|(n, _)| n.as_str()).collect();
            let mut groups: Vec<(String, Vec<f64>)> = TASK_NAMES
                .iter()
                .enumerate()
                .map(|(t, task)| {
                    let ptr = format!("/metrics/per_task/{t}/f2");
                    (task.to_string(), names.iter().map(|(_, v)| f64_at(v, &ptr)).collect())
                })
                .collect();
            groups.push((
                "overall".into(),
                names.iter().map(|(_, v)| f64_at(v, "/metrics/overall/f2")).collect(),
            ));
            let p = out.dir.join("f2_by_criterion.svg");
            write_text(&p, &evalharness::svg_bar_chart("F2 by criterion", &series, &groups))?;
            result.plots.push(p);
        }
    }
    if let Some(v) = &category {
        md.push_str("## Leave one category out\n\n| excluded | MTL F2 | baseline F2 |\n|---|---|---|\n");
        let rows = v.pointer("/result/rows").and_then(Value::as_array).cloned().unwrap_or_default();
        let mut groups = Vec::new();
        for r in &rows {
            let name = r.get("excluded").and_then(Value::as_str).unwrap_or("?").to_string();
            let (a, b) = (f64_at(r, "/mtl_f2"), f64_at(r, "/baseline_f2"));
            md.push_str(&format!("| {name} | {a:.4} | {b:.4} |\n"));
            groups.push((name, vec![a, b]));
        }
        md.push('\n');
        if plots {
            let p = out.dir.join("leaveout_category.svg");
            write_text(
                &p,
                &evalharness::svg_bar_chart("Overall F2 with one criterion excluded", &["mtl", "baseline"], &groups),
            )?;
            result.plots.push(p);
        }
    }
    if let Some(v) = &topology {
        md.push_str("## Leave one topology out\n\n| topology | train | test | MTL F2 | baseline F2 |\n|---|---|---|---|---|\n");
        let rows = v.pointer("/result/rows").and_then(Value::as_array).cloned().unwrap_or_default();
        let mut groups = Vec::new();
        for r in &rows {
            let id = r.get("topology_id").and_then(Value::as_u64).unwrap_or_default();
            let (a, b) = (f64_at(r, "/mtl_f2"), f64_at(r, "/baseline_f2"));
            md.push_str(&format!(
                "| {id} | {} | {} | {a:.4} | {b:.4} |\n",
                r.get("n_train").and_then(Value::as_u64).unwrap_or_default(),
                r.get("n_test").and_then(Value::as_u64).unwrap_or_default()
            ));
            groups.push((id.to_string(), vec![a, b]));
        }
        md.push_str(&format!(
            "\nMTL mean {:.4}, variance {:.6}; baseline mean {:.4}, variance {:.6}\n",
            f64_at(v, "/result/mtl_mean"),
            f64_at(v, "/result/mtl_variance"),
            f64_at(v, "/result/baseline_mean"),
            f64_at(v, "/result/baseline_variance")
        ));
        if plots {
            let p = out.dir.join("leaveout_topology.svg");
            write_text(
                &p,
                &evalharness::svg_bar_chart("Overall F2 on a held-out topology", &["mtl", "baseline"], &groups),
            )?;
            result.plots.push(p);
        }
    }
    write_text(&out.dir.join("report.md"), &md)?;
    result.markdown = md;
    Ok(result)
}
