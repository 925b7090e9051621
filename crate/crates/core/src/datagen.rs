//! Operating-point sampling, labelled case generation, normalisation,
//! splitting and the dataset file format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::{
    eigenvalues, initialize_dynamics, linearize, simulate, simulate_undisturbed, Contingency,
    SimConfig,
};
use crate::exec::Execution;
use crate::grid::{BusKind, Network};
use crate::labeling::{label_all, LabelThresholds, LabelVector, LineLoading};
use crate::powerflow::{
    build_condition_vector, build_feature_vector, solve_power_flow_with_dispatch, FeatureLayout,
};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt dataset file: {0}")]
    Corrupt(String),
    #[error("unsupported dataset schema version {0}")]
    Version(u32),
    #[error("schema hash mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },
    #[error("dataset is empty")]
    Empty,
    #[error("{0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub load_scale_mean: f64,
    pub load_scale_std: f64,
    pub load_scale_bounds: (f64, f64),
    pub load_correlation: f64,
    pub pf_range: (f64, f64),
    pub seed: u64,
    /// Scale PV-unit dispatch with total load (capped at `p_max`); the slack
    /// unit absorbs the rest.
    pub scale_generation: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            load_scale_mean: 1.0,
            load_scale_std: 1.0 / 6.0,
            load_scale_bounds: (0.5, 1.5),
            load_correlation: 0.0,
            pf_range: (0.95, 1.0),
            seed: 0,
            scale_generation: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let (lo, hi) = self.load_scale_bounds;
        if !(lo >= 0.5 && hi <= 1.5 && lo <= hi) {
            return Err(DatagenError::Config(
                "load_scale_bounds must lie within [0.5, 1.5]".into(),
            ));
        }
        if !(self.load_scale_std >= 0.0) {
            return Err(DatagenError::Config("load_scale_std must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.load_correlation) {
            return Err(DatagenError::Config("load_correlation must be in [0, 1)".into()));
        }
        let (p0, p1) = self.pf_range;
        if !(p0 > 0.0 && p0 <= p1 && p1 <= 1.0) {
            return Err(DatagenError::Config("pf_range must lie within (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadDraw {
    pub load_p: Vec<f64>,
    pub load_q: Vec<f64>,
    /// Redraw budget ran out and the scales were clamped to the bounds.
    pub clamped: bool,
}

/// One seeded load draw. The result depends only on `(cfg.seed, draw_index)`.
pub fn sample_loads(net: &Network, cfg: &SamplerConfig, draw_index: u64) -> LoadDraw {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(draw_index);
    let n = net.n_bus();
    let (lo, hi) = cfg.load_scale_bounds;
    let rho = cfg.load_correlation;
    let mut scale = vec![0.0; n];
    let mut clamped = true;
    for _ in 0..MAX_REDRAWS {
        let common: f64 = rng.sample(StandardNormal);
        for s in scale.iter_mut() {
            let own: f64 = rng.sample(StandardNormal);
            let z = rho.sqrt() * common + (1.0 - rho).sqrt() * own;
            *s = cfg.load_scale_mean + cfg.load_scale_std * z;
        }
        if scale.iter().all(|s| (lo..=hi).contains(s)) {
            clamped = false;
            break;
        }
    }
    if clamped {
        for s in scale.iter_mut() {
            *s = s.clamp(lo, hi);
        }
    }
    let mut load_p = Vec::with_capacity(n);
    let mut load_q = Vec::with_capacity(n);
    for (b, s) in net.buses.iter().zip(&scale) {
        let pf: f64 = if cfg.pf_range.0 < cfg.pf_range.1 {
            rng.random_range(cfg.pf_range.0..=cfg.pf_range.1)
        } else {
            cfg.pf_range.0
        };
        let p = s * b.load_p_nominal;
        load_p.push(p);
        load_q.push(p * pf.acos().tan());
    }
    LoadDraw {
        load_p,
        load_q,
        clamped,
    }
}

/// Generator set-points for a load draw.
pub fn dispatch_for(net: &Network, load_p: &[f64], cfg: &SamplerConfig) -> Vec<f64> {
    let nominal = net.total_nominal_load_p();
    let ratio = if cfg.scale_generation && nominal > 0.0 {
        load_p.iter().sum::<f64>() / nominal
    } else {
        1.0
    };
    net.generators
        .iter()
        .map(|g| {
            let slack = net.buses[net.bus_index(g.bus).unwrap()].kind == BusKind::Slack;
            if slack {
                g.p_set
            } else {
                (g.p_set * ratio).min(g.p_max)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripPolicy {
    /// Trip the lowest-id eligible line at the faulted bus.
    LowestId,
    /// One contingency per eligible line at the faulted bus.
    AllIncident,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContingencyPolicy {
    pub trip: TripPolicy,
    /// Also emit the undisturbed case with contingency id 0.
    pub include_base_case: bool,
}

impl Default for ContingencyPolicy {
    fn default() -> Self {
        ContingencyPolicy {
            trip: TripPolicy::AllIncident,
            include_base_case: false,
        }
    }
}

/// A numbered contingency; `None` is the undisturbed base case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseContingency {
    pub id: u32,
    pub contingency: Option<Contingency>,
}

/// One three-phase fault next to each generator, cleared by tripping a line
/// whose loss keeps the grid connected. A generator on a radial bus has its
/// fault moved to the nearest neighbour that has such a line.
pub fn enumerate_contingencies(
    net: &Network,
    policy: &ContingencyPolicy,
    sim: &SimConfig,
) -> Vec<CaseContingency> {
    let eligible = net.non_bridge_lines();
    let trips = |bus: u32| -> Vec<u32> {
        net.incident_lines(bus)
            .into_iter()
            .filter(|l| eligible.contains(l))
            .collect()
    };
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    for g in &net.generators {
        let fault_bus = if !trips(g.bus).is_empty() {
            Some(g.bus)
        } else {
            let mut neighbours: Vec<u32> = net
                .incident_lines(g.bus)
                .into_iter()
                .map(|id| {
                    let l = &net.lines[net.line_index(id).unwrap()];
                    if l.from_bus == g.bus {
                        l.to_bus
                    } else {
                        l.from_bus
                    }
                })
                .collect();
            neighbours.sort_unstable();
            neighbours.into_iter().find(|&b| !trips(b).is_empty())
        };
        let Some(bus) = fault_bus else { continue };
        let lines = trips(bus);
        let chosen: Vec<u32> = match policy.trip {
            TripPolicy::LowestId => lines.into_iter().take(1).collect(),
            TripPolicy::AllIncident => lines,
        };
        for line in chosen {
            if !pairs.contains(&(bus, line)) {
                pairs.push((bus, line));
            }
        }
    }
    let mut out = Vec::new();
    if policy.include_base_case {
        out.push(CaseContingency {
            id: 0,
            contingency: None,
        });
    }
    for (i, (bus, line)) in pairs.into_iter().enumerate() {
        out.push(CaseContingency {
            id: i as u32 + 1,
            contingency: Some(Contingency {
                fault_bus: bus,
                fault_start_s: sim.fault_start_s,
                clearing_time_s: sim.clearing_time_s,
                tripped_line: line,
            }),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: u64,
    pub x: Vec<f64>,
    pub c: Vec<f64>,
    pub y: LabelVector,
    pub topology_id: u32,
    pub contingency_id: u32,
    pub draw_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub schema_hash: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub layout: FeatureLayout,
    pub schema_hash: String,
    pub samples: Vec<Sample>,
    pub norm_stats: Option<NormStats>,
    pub seed: u64,
    /// Echo of the configuration that produced the data.
    pub config: serde_json::Value,
    pub shuffled: bool,
}

impl Dataset {
    pub fn new(layout: FeatureLayout, samples: Vec<Sample>) -> Self {
        Dataset {
            schema_hash: layout.schema_hash(),
            layout,
            samples,
            norm_stats: None,
            seed: 0,
            config: serde_json::Value::Null,
            shuffled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same metadata, different samples.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Dataset {
            samples,
            ..self.clone()
        }
    }

    pub fn counts(&self) -> ClassCounts {
        ClassCounts::of(self.samples.iter().map(|s| s.y))
    }

    pub fn topology_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.samples.iter().map(|s| s.topology_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn filter(&self, keep: impl Fn(&Sample) -> bool) -> Self {
        self.with_samples(self.samples.iter().filter(|s| keep(s)).cloned().collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub samples: usize,
    /// Secure count per criterion in task order.
    pub secure: [usize; 4],
    pub overall_secure: usize,
}

impl ClassCounts {
    pub fn of(labels: impl Iterator<Item = LabelVector>) -> Self {
        let mut c = ClassCounts::default();
        for y in labels {
            c.samples += 1;
            for (cnt, b) in c.secure.iter_mut().zip(y.bits()) {
                *cnt += b as usize;
            }
            c.overall_secure += y.overall_secure() as usize;
        }
        c
    }

    /// Smaller of the two class fractions per criterion.
    pub fn minority_fraction(&self) -> [f64; 4] {
        let n = self.samples.max(1) as f64;
        self.secure.map(|s| {
            let f = s as f64 / n;
            f.min(1.0 - f)
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub topology_id: u32,
    pub contingency_id: u32,
    pub retained: usize,
    pub discarded: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub retained: usize,
    pub discarded_power_flow: usize,
    pub discarded_dynamics: usize,
    pub clamped_draws: usize,
    pub cases: Vec<CaseReport>,
    /// Cases where every draw was discarded.
    pub failed_cases: Vec<(u32, u32)>,
    pub class_balance: ClassCounts,
}

enum DrawResult {
    Ok {
        x: Vec<f64>,
        labels: Vec<(Vec<f64>, LabelVector)>,
        clamped: bool,
    },
    PowerFlow {
        clamped: bool,
    },
    Dynamics {
        clamped: bool,
    },
}

/// Labels one operating point under every contingency of its topology.
fn run_draw(
    net: &Network,
    cases: &[CaseContingency],
    draw_index: u64,
    cfg: &SamplerConfig,
    th: &LabelThresholds,
    sim: &SimConfig,
) -> DrawResult {
    let draw = sample_loads(net, cfg, draw_index);
    let clamped = draw.clamped;
    let dispatch = dispatch_for(net, &draw.load_p, cfg);
    let sol = match solve_power_flow_with_dispatch(net, &draw.load_p, &draw.load_q, &dispatch) {
        Ok(s) if s.converged => s,
        _ => return DrawResult::PowerFlow { clamped },
    };
    let Ok(x) = build_feature_vector(net, &sol, &draw.load_p, &draw.load_q) else {
        return DrawResult::PowerFlow { clamped };
    };
    let Ok(init) = initialize_dynamics(net, &sol) else {
        return DrawResult::Dynamics { clamped };
    };
    let Ok(modes) = eigenvalues(&linearize(&init, sim.omega_s)) else {
        return DrawResult::Dynamics { clamped };
    };
    let s_max: Vec<f64> = net.lines.iter().map(|l| l.rating_s_max).collect();
    let mut labels = Vec::with_capacity(cases.len());
    for case in cases {
        let traj = match &case.contingency {
            Some(cont) => match simulate(&init, cont, sim) {
                Ok(t) => t,
                Err(_) => return DrawResult::Dynamics { clamped },
            },
            None => simulate_undisturbed(&init, sim, &init.delta0, &vec![0.0; init.n_gen()]),
        };
        let Ok(c) = build_condition_vector(net, case.contingency.as_ref()) else {
            return DrawResult::Dynamics { clamped };
        };
        let flows = LineLoading {
            s_mean: traj.line_s_mean.clone(),
            s_max: s_max.clone(),
        };
        match label_all(&traj, &modes, &flows, th) {
            Ok(y) => labels.push((c.values, y)),
            Err(_) => return DrawResult::Dynamics { clamped },
        }
    }
    DrawResult::Ok {
        x: x.values,
        labels,
        clamped,
    }
}

/// Labels of one case, recomputed from scratch.
pub fn relabel(
    net: &Network,
    case: &CaseContingency,
    draw_index: u64,
    cfg: &SamplerConfig,
    th: &LabelThresholds,
    sim: &SimConfig,
) -> Option<(Vec<f64>, LabelVector)> {
    match run_draw(net, std::slice::from_ref(case), draw_index, cfg, th, sim) {
        DrawResult::Ok { x, mut labels, .. } => labels.pop().map(|(_, y)| (x, y)),
        _ => None,
    }
}

/// Generates `n_per_case` draws per topology, each labelled under every
/// contingency of that topology. Samples are ordered by topology, then
/// contingency, then draw, whatever the execution mode.
pub fn generate_dataset(
    nets: &[Network],
    contingencies: &[Vec<CaseContingency>],
    n_per_case: usize,
    cfg: &SamplerConfig,
    th: &LabelThresholds,
    sim: &SimConfig,
    exec: Execution,
) -> Result<(Dataset, GenerationReport), DatagenError> {
    cfg.validate()?;
    th.validate().map_err(|e| DatagenError::Config(e.to_string()))?;
    sim.validate().map_err(|e| DatagenError::Config(e.to_string()))?;
    if nets.is_empty() {
        return Err(DatagenError::Config("no topologies".into()));
    }
    if nets.len() != contingencies.len() {
        return Err(DatagenError::Config(format!(
            "{} topologies but {} contingency lists",
            nets.len(),
            contingencies.len()
        )));
    }
    let layout = FeatureLayout::for_network(&nets[0]);
    if let Some(net) = nets.iter().find(|n| FeatureLayout::for_network(n) != layout) {
        return Err(DatagenError::Config(format!(
            "topology {} has a different feature layout",
            net.topology_id
        )));
    }

    let results = exec.map_indexed(nets.len() * n_per_case, |k| {
        let (t, d) = (k / n_per_case, k % n_per_case);
        run_draw(&nets[t], &contingencies[t], d as u64, cfg, th, sim)
    });

    let mut report = GenerationReport::default();
    let mut samples = Vec::new();
    for (t, net) in nets.iter().enumerate() {
        let draws = &results[t * n_per_case..(t + 1) * n_per_case];
        for (ci, case) in contingencies[t].iter().enumerate() {
            let mut cr = CaseReport {
                topology_id: net.topology_id,
                contingency_id: case.id,
                ..Default::default()
            };
            for (d, r) in draws.iter().enumerate() {
                match r {
                    DrawResult::Ok { x, labels, .. } => {
                        let (c, y) = &labels[ci];
                        samples.push(Sample {
                            sample_id: samples.len() as u64,
                            x: x.clone(),
                            c: c.clone(),
                            y: *y,
                            topology_id: net.topology_id,
                            contingency_id: case.id,
                            draw_index: d as u64,
                        });
                        cr.retained += 1;
                    }
                    DrawResult::PowerFlow { .. } => {
                        report.discarded_power_flow += 1;
                        cr.discarded += 1;
                    }
                    DrawResult::Dynamics { .. } => {
                        report.discarded_dynamics += 1;
                        cr.discarded += 1;
                    }
                }
            }
            if cr.retained == 0 && n_per_case > 0 {
                report.failed_cases.push((net.topology_id, case.id));
            }
            report.cases.push(cr);
        }
        report.clamped_draws += draws
            .iter()
            .filter(|r| match r {
                DrawResult::Ok { clamped, .. }
                | DrawResult::PowerFlow { clamped }
                | DrawResult::Dynamics { clamped } => *clamped,
            })
            .count();
    }
    if report.clamped_draws > 0 {
        log::warn!("{} load draws hit the redraw limit and were clamped", report.clamped_draws);
    }
    report.retained = samples.len();
    let mut ds = Dataset::new(layout, samples);
    ds.seed = cfg.seed;
    report.class_balance = ds.counts();
    Ok((ds, report))
}

fn column_stats(ds: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let d = ds.layout.feature_dim();
    let n = ds.len() as f64;
    let mut mean = vec![0.0; d];
    for s in &ds.samples {
        for (m, v) in mean.iter_mut().zip(&s.x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for s in &ds.samples {
        for ((acc, v), m) in var.iter_mut().zip(&s.x).zip(&mean) {
            *acc += (v - m).powi(2);
        }
    }
    let mut std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    let first = &ds.samples[0].x;
    for j in 0..d {
        if ds.samples.iter().all(|s| s.x[j] == first[j]) {
            mean[j] = first[j];
            std[j] = 1.0;
        } else if !(std[j] > 0.0) {
            std[j] = 1.0;
        }
    }
    (mean, std)
}

/// Z-scores the features. Without `stats` they are computed from `ds`.
/// Constant columns keep `std = 1`, so they map to zero.
pub fn normalize(ds: &Dataset, stats: Option<&NormStats>) -> Result<Dataset, DatagenError> {
    if ds.is_empty() {
        return Err(DatagenError::Empty);
    }
    if ds.norm_stats.is_some() {
        return Err(DatagenError::Inconsistent("dataset is already normalized".into()));
    }
    let stats = match stats {
        Some(s) => {
            if s.schema_hash != ds.schema_hash {
                return Err(DatagenError::SchemaMismatch {
                    expected: ds.schema_hash.clone(),
                    found: s.schema_hash.clone(),
                });
            }
            s.clone()
        }
        None => {
            let (mean, std) = column_stats(ds);
            NormStats {
                schema_hash: ds.schema_hash.clone(),
                mean,
                std,
            }
        }
    };
    let samples = ds
        .samples
        .iter()
        .map(|s| Sample {
            x: stats.apply(&s.x),
            ..s.clone()
        })
        .collect();
    let mut out = ds.with_samples(samples);
    out.norm_stats = Some(stats);
    Ok(out)
}

pub fn denormalize(ds: &Dataset) -> Result<Dataset, DatagenError> {
    let stats = ds
        .norm_stats
        .as_ref()
        .ok_or_else(|| DatagenError::Inconsistent("dataset is not normalized".into()))?;
    let samples = ds
        .samples
        .iter()
        .map(|s| Sample {
            x: stats.invert(&s.x),
            ..s.clone()
        })
        .collect();
    let mut out = ds.with_samples(samples);
    out.norm_stats = None;
    Ok(out)
}

/// Stratified split per `(topology_id, overall_secure)`; both halves are
/// shuffled with `seed`.
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DatagenError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatagenError::Config("test_fraction must be in (0, 1)".into()));
    }
    let mut strata: BTreeMap<(u32, bool), Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        strata
            .entry((s.topology_id, s.y.overall_secure()))
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ((topo, secure), mut idx) in strata {
        idx.shuffle(&mut rng);
        if idx.len() < 2 {
            log::warn!("stratum (topology {topo}, secure {secure}) has one sample; kept in train");
            train.extend(idx);
            continue;
        }
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    // a topology with enough samples must reach the test side
    for topo in ds.topology_ids() {
        let total = ds.samples.iter().filter(|s| s.topology_id == topo).count();
        let in_test = test.iter().any(|&i| ds.samples[i].topology_id == topo);
        if total >= 5 && !in_test {
            if let Some(p) = train.iter().position(|&i| ds.samples[i].topology_id == topo) {
                test.push(train.remove(p));
            }
        }
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    let pick = |idx: &[usize]| {
        let mut out = ds.with_samples(idx.iter().map(|&i| ds.samples[i].clone()).collect());
        out.shuffled = true;
        out
    };
    Ok((pick(&train), pick(&test)))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    schema_version: u32,
    schema_hash: String,
    layout: FeatureLayout,
    norm_stats: Option<NormStats>,
    counts: ClassCounts,
    seed: u64,
    shuffled: bool,
    config: serde_json::Value,
    body_sha256: String,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// One-hot label expansion written to the file: two columns per criterion,
/// `[insecure, secure]`.
pub fn label_onehot(y: &LabelVector) -> [u8; 8] {
    let mut out = [0u8; 8];
    for (t, b) in y.bits().iter().enumerate() {
        out[2 * t + *b as usize] = 1;
    }
    out
}

pub fn header_columns(layout: &FeatureLayout) -> Vec<String> {
    let mut cols = layout.column_names();
    cols.extend((0..layout.cond_lines).map(|i| format!("c_line_{i}")));
    cols.extend((0..layout.cond_buses).map(|i| format!("c_bus_{i}")));
    cols.extend(["y_static", "y_ss", "y_volt", "y_trans"].map(String::from));
    for name in ["static", "ss", "volt", "trans"] {
        cols.push(format!("onehot_{name}_insecure"));
        cols.push(format!("onehot_{name}_secure"));
    }
    cols.extend(["topology_id", "contingency_id", "draw_index", "sample_id"].map(String::from));
    cols
}

/// Serialises a dataset: one JSON header line, then the CSV body.
pub fn dataset_bytes(ds: &Dataset) -> Result<Vec<u8>, DatagenError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| DatagenError::Inconsistent(e.to_string());
    w.write_record(header_columns(&ds.layout)).map_err(csv_err)?;
    for s in &ds.samples {
        let mut rec: Vec<String> = Vec::with_capacity(s.x.len() + s.c.len() + 16);
        rec.extend(s.x.iter().map(|&v| fmt_f64(v)));
        rec.extend(s.c.iter().map(|&v| fmt_f64(v)));
        rec.extend(s.y.bits().iter().map(|&b| (b as u8).to_string()));
        rec.extend(label_onehot(&s.y).iter().map(|b| b.to_string()));
        rec.push(s.topology_id.to_string());
        rec.push(s.contingency_id.to_string());
        rec.push(s.draw_index.to_string());
        rec.push(s.sample_id.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    let body = w
        .into_inner()
        .map_err(|e| DatagenError::Inconsistent(e.to_string()))?;
    let header = FileHeader {
        schema_version: DATASET_SCHEMA_VERSION,
        schema_hash: ds.schema_hash.clone(),
        layout: ds.layout.clone(),
        norm_stats: ds.norm_stats.clone(),
        counts: ds.counts(),
        seed: ds.seed,
        shuffled: ds.shuffled,
        config: ds.config.clone(),
        body_sha256: hex::encode(Sha256::digest(&body)),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<String, DatagenError> {
    let bytes = dataset_bytes(ds)?;
    fs::write(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset, DatagenError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DatagenError::Corrupt("missing header line".into()))?;
    let (head, body) = (&bytes[..nl], &bytes[nl + 1..]);
    let probe: serde_json::Value = serde_json::from_slice(head)
        .map_err(|e| DatagenError::Corrupt(format!("header: {e}")))?;
    match probe.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == DATASET_SCHEMA_VERSION as u64 => {}
        Some(v) => return Err(DatagenError::Version(v as u32)),
        None => return Err(DatagenError::Corrupt("header lacks schema_version".into())),
    }
    let header: FileHeader =
        serde_json::from_value(probe).map_err(|e| DatagenError::Corrupt(format!("header: {e}")))?;
    if hex::encode(Sha256::digest(body)) != header.body_sha256 {
        return Err(DatagenError::Corrupt("body digest mismatch".into()));
    }
    if header.layout.schema_hash() != header.schema_hash {
        return Err(DatagenError::Corrupt("layout does not match schema hash".into()));
    }
    let cols = header_columns(&header.layout);
    let (dx, dc) = (header.layout.feature_dim(), header.layout.cond_dim());
    let mut r = csv::Reader::from_reader(body);
    let found: Vec<String> = r
        .headers()
        .map_err(|e| DatagenError::Corrupt(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if found != cols {
        return Err(DatagenError::Corrupt("unexpected CSV columns".into()));
    }
    let bad = |what: &str| DatagenError::Corrupt(format!("bad {what} field"));
    let mut samples = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| DatagenError::Corrupt(e.to_string()))?;
        let f = |i: usize| rec.get(i).ok_or_else(|| bad("missing"));
        let num = |i: usize| -> Result<f64, DatagenError> {
            f(i)?.parse::<f64>().map_err(|_| bad("numeric"))
        };
        let x = (0..dx).map(num).collect::<Result<Vec<_>, _>>()?;
        let c = (dx..dx + dc).map(num).collect::<Result<Vec<_>, _>>()?;
        let mut bits = [false; 4];
        for (t, b) in bits.iter_mut().enumerate() {
            *b = match f(dx + dc + t)? {
                "0" => false,
                "1" => true,
                _ => return Err(bad("label")),
            };
        }
        let y = LabelVector::from_bits(bits);
        let o = dx + dc + 4;
        for (k, want) in label_onehot(&y).iter().enumerate() {
            if f(o + k)? != want.to_string() {
                return Err(DatagenError::Corrupt("one-hot does not match labels".into()));
            }
        }
        let int = |i: usize| -> Result<u64, DatagenError> { f(i)?.parse().map_err(|_| bad("integer")) };
        samples.push(Sample {
            x,
            c,
            y,
            topology_id: int(o + 8)? as u32,
            contingency_id: int(o + 9)? as u32,
            draw_index: int(o + 10)?,
            sample_id: int(o + 11)?,
        });
    }
    let ds = Dataset {
        schema_hash: header.schema_hash,
        layout: header.layout,
        samples,
        norm_stats: header.norm_stats,
        seed: header.seed,
        config: header.config,
        shuffled: header.shuffled,
    };
    if ds.counts() != header.counts {
        return Err(DatagenError::Corrupt("row counts do not match header".into()));
    }
    Ok(ds)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatagenError> {
    parse_dataset(&fs::read(path)?)
}

/// Hex sha256 of the serialised dataset.
pub fn dataset_digest(ds: &Dataset) -> Result<String, DatagenError> {
    Ok(hex::encode(Sha256::digest(dataset_bytes(ds)?)))
}
