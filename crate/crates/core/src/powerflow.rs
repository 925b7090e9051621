//! Newton-Raphson AC power flow in polar coordinates, plus assembly of the
//! feature and condition vectors fed to the classifier.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::Contingency;
use crate::grid::{BusKind, Network};

pub const TOLERANCE: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 30;

#[derive(Debug, Error, PartialEq)]
pub enum PowerFlowError {
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("negative load at bus index {0}")]
    NegativeLoad(usize),
    #[error("power flow did not converge ({0:?})")]
    NotConverged(SolveStatus),
    #[error("unknown {kind} id {id}")]
    UnknownElement { kind: &'static str, id: u32 },
    #[error("line {0} is out of service")]
    OutOfService(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    SingularJacobian,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    pub gen_p: Vec<f64>,
    pub gen_q: Vec<f64>,
    /// Complex power entering each line at its from end (zero when out of service).
    pub line_flow_from: Vec<Complex64>,
    /// Complex power entering each line at its to end.
    pub line_flow_to: Vec<Complex64>,
    pub converged: bool,
    pub status: SolveStatus,
    pub iterations: usize,
    pub max_mismatch: f64,
    /// Infinity norm of the mismatch before each iteration and after the last.
    pub mismatch_history: Vec<f64>,
}

impl PowerFlowSolution {
    pub fn voltages(&self) -> Vec<Complex64> {
        self.v_mag
            .iter()
            .zip(&self.v_ang)
            .map(|(&m, &a)| Complex64::from_polar(m, a))
            .collect()
    }

    pub fn line_flow_p(&self) -> Vec<f64> {
        self.line_flow_from.iter().map(|s| s.re).collect()
    }

    pub fn line_flow_q(&self) -> Vec<f64> {
        self.line_flow_from.iter().map(|s| s.im).collect()
    }
}

/// Bus admittance matrix over in-service lines and bus shunts.
pub fn build_admittance(net: &Network) -> DMatrix<Complex64> {
    let n = net.n_bus();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for line in net.in_service_lines() {
        let (f, t) = net.line_ends(line);
        let ys = line.series_impedance.inv();
        let ysh = Complex64::new(0.0, line.charging_susceptance / 2.0);
        y[(f, f)] += ys + ysh;
        y[(t, t)] += ys + ysh;
        y[(f, t)] -= ys;
        y[(t, f)] -= ys;
    }
    for (i, bus) in net.buses.iter().enumerate() {
        y[(i, i)] += bus.shunt_admittance;
    }
    y
}

/// Unknown ordering used by the mismatch function and Jacobian: angles of
/// every non-slack bus followed by magnitudes of every PQ bus.
#[derive(Debug, Clone)]
pub struct StateIndex {
    pub angle_buses: Vec<usize>,
    pub mag_buses: Vec<usize>,
}

impl StateIndex {
    pub fn new(net: &Network) -> Self {
        let angle_buses = (0..net.n_bus())
            .filter(|&i| net.buses[i].kind != BusKind::Slack)
            .collect();
        let mag_buses = (0..net.n_bus())
            .filter(|&i| net.buses[i].kind == BusKind::Pq)
            .collect();
        StateIndex {
            angle_buses,
            mag_buses,
        }
    }

    pub fn len(&self) -> usize {
        self.angle_buses.len() + self.mag_buses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Calculated bus injections `S_i = V_i conj(sum_k Y_ik V_k)`.
pub fn bus_injections(y: &DMatrix<Complex64>, vm: &[f64], va: &[f64]) -> Vec<Complex64> {
    let n = vm.len();
    let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
    (0..n)
        .map(|i| {
            let mut cur = Complex64::new(0.0, 0.0);
            for k in 0..n {
                cur += y[(i, k)] * v[k];
            }
            v[i] * cur.conj()
        })
        .collect()
}

/// Mismatch vector `[P_calc - P_spec (non-slack); Q_calc - Q_spec (PQ)]`.
pub fn mismatch(
    y: &DMatrix<Complex64>,
    idx: &StateIndex,
    vm: &[f64],
    va: &[f64],
    p_spec: &[f64],
    q_spec: &[f64],
) -> Vec<f64> {
    let s = bus_injections(y, vm, va);
    idx.angle_buses
        .iter()
        .map(|&i| s[i].re - p_spec[i])
        .chain(idx.mag_buses.iter().map(|&i| s[i].im - q_spec[i]))
        .collect()
}

/// Analytic Jacobian of [`mismatch`] with respect to `[va(angle buses); vm(PQ buses)]`.
pub fn jacobian(y: &DMatrix<Complex64>, idx: &StateIndex, vm: &[f64], va: &[f64]) -> DMatrix<f64> {
    let s = bus_injections(y, vm, va);
    let n = idx.len();
    let na = idx.angle_buses.len();
    let mut jac = DMatrix::zeros(n, n);
    // (dP or dQ of bus i) w.r.t. (theta or |V| of bus k)
    let d = |i: usize, k: usize| -> (f64, f64, f64, f64) {
        let (g, b) = (y[(i, k)].re, y[(i, k)].im);
        if i == k {
            let (p, q) = (s[i].re, s[i].im);
            let v2 = vm[i] * vm[i];
            (
                -q - b * v2,
                p / vm[i] + g * vm[i],
                p - g * v2,
                q / vm[i] - b * vm[i],
            )
        } else {
            let th = va[i] - va[k];
            let (sn, cs) = th.sin_cos();
            let vv = vm[i] * vm[k];
            (
                vv * (g * sn - b * cs),
                vm[i] * (g * cs + b * sn),
                -vv * (g * cs + b * sn),
                vm[i] * (g * sn - b * cs),
            )
        }
    };
    for (r, &i) in idx.angle_buses.iter().enumerate() {
        for (c, &k) in idx.angle_buses.iter().enumerate() {
            jac[(r, c)] = d(i, k).0;
        }
        for (c, &k) in idx.mag_buses.iter().enumerate() {
            jac[(r, na + c)] = d(i, k).1;
        }
    }
    for (r, &i) in idx.mag_buses.iter().enumerate() {
        for (c, &k) in idx.angle_buses.iter().enumerate() {
            jac[(na + r, c)] = d(i, k).2;
        }
        for (c, &k) in idx.mag_buses.iter().enumerate() {
            jac[(na + r, na + c)] = d(i, k).3;
        }
    }
    jac
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Solves with each generator at its scheduled `p_set`.
pub fn solve_power_flow(
    net: &Network,
    load_p: &[f64],
    load_q: &[f64],
) -> Result<PowerFlowSolution, PowerFlowError> {
    let dispatch: Vec<f64> = net.generators.iter().map(|g| g.p_set).collect();
    solve_power_flow_with_dispatch(net, load_p, load_q, &dispatch)
}

/// Flat-start Newton-Raphson. Failure to converge is reported through
/// [`PowerFlowSolution::status`]; errors are reserved for malformed input.
pub fn solve_power_flow_with_dispatch(
    net: &Network,
    load_p: &[f64],
    load_q: &[f64],
    gen_dispatch: &[f64],
) -> Result<PowerFlowSolution, PowerFlowError> {
    let n = net.n_bus();
    check_len("load_p", load_p.len(), n)?;
    check_len("load_q", load_q.len(), n)?;
    check_len("gen_dispatch", gen_dispatch.len(), net.n_gen())?;
    if let Some(i) = load_p.iter().position(|&p| p < 0.0) {
        return Err(PowerFlowError::NegativeLoad(i));
    }
    if let Some(i) = load_q.iter().position(|&q| q < 0.0) {
        return Err(PowerFlowError::NegativeLoad(i));
    }

    let y = build_admittance(net);
    let idx = StateIndex::new(net);
    let gen_bus = net.generator_bus_indices();

    let mut p_spec: Vec<f64> = load_p.iter().map(|p| -p).collect();
    let q_spec: Vec<f64> = load_q.iter().map(|q| -q).collect();
    let mut vm = vec![1.0; n];
    let mut va = vec![0.0; n];
    for (g, &b) in net.generators.iter().zip(&gen_bus) {
        vm[b] = g.v_set;
    }
    for (k, &b) in gen_bus.iter().enumerate() {
        p_spec[b] += gen_dispatch[k];
    }

    let na = idx.angle_buses.len();
    let mut f = mismatch(&y, &idx, &vm, &va, &p_spec, &q_spec);
    let mut norm = inf_norm(&f);
    let mut history = vec![norm];
    let mut iterations = 0;
    let mut status = SolveStatus::MaxIterations;
    loop {
        if !norm.is_finite() {
            status = SolveStatus::NonFinite;
            break;
        }
        if norm < TOLERANCE {
            status = SolveStatus::Converged;
            break;
        }
        if iterations == MAX_ITERATIONS {
            break;
        }
        let jac = jacobian(&y, &idx, &vm, &va);
        let rhs = DVector::from_iterator(f.len(), f.iter().map(|x| -x));
        let Some(dx) = jac.lu().solve(&rhs) else {
            status = SolveStatus::SingularJacobian;
            break;
        };
        if dx.iter().any(|v| !v.is_finite()) {
            status = SolveStatus::SingularJacobian;
            break;
        }
        for (r, &i) in idx.angle_buses.iter().enumerate() {
            va[i] += dx[r];
        }
        for (r, &i) in idx.mag_buses.iter().enumerate() {
            vm[i] += dx[na + r];
        }
        iterations += 1;
        f = mismatch(&y, &idx, &vm, &va, &p_spec, &q_spec);
        norm = inf_norm(&f);
        history.push(norm);
    }
    if status == SolveStatus::Converged && vm.iter().any(|&v| v <= 0.0) {
        status = SolveStatus::NonFinite;
    }

    let s = bus_injections(&y, &vm, &va);
    let slack = net.slack_index();
    let gen_p = gen_bus
        .iter()
        .enumerate()
        .map(|(k, &b)| if b == slack { s[b].re + load_p[b] } else { gen_dispatch[k] })
        .collect();
    let gen_q = gen_bus.iter().map(|&b| s[b].im + load_q[b]).collect();
    let (line_flow_from, line_flow_to) = branch_flows(net, &vm, &va);

    Ok(PowerFlowSolution {
        v_mag: vm,
        v_ang: va,
        gen_p,
        gen_q,
        line_flow_from,
        line_flow_to,
        converged: status == SolveStatus::Converged,
        status,
        iterations,
        max_mismatch: norm,
        mismatch_history: history,
    })
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), PowerFlowError> {
    if got == expected {
        Ok(())
    } else {
        Err(PowerFlowError::Dimension {
            what,
            got,
            expected,
        })
    }
}

/// Complex power entering each line at both ends, pi model.
pub fn branch_flows(net: &Network, vm: &[f64], va: &[f64]) -> (Vec<Complex64>, Vec<Complex64>) {
    let zero = Complex64::new(0.0, 0.0);
    net.lines
        .iter()
        .map(|line| {
            if !line.in_service {
                return (zero, zero);
            }
            let (f, t) = net.line_ends(line);
            let vf = Complex64::from_polar(vm[f], va[f]);
            let vt = Complex64::from_polar(vm[t], va[t]);
            let ys = line.series_impedance.inv();
            let ysh = Complex64::new(0.0, line.charging_susceptance / 2.0);
            let i_f = (ys + ysh) * vf - ys * vt;
            let i_t = (ys + ysh) * vt - ys * vf;
            (vf * i_f.conj(), vt * i_t.conj())
        })
        .unzip()
}

/// Sending-end apparent power of every line.
pub fn compute_line_flows(
    net: &Network,
    sol: &PowerFlowSolution,
) -> Result<Vec<f64>, PowerFlowError> {
    if !sol.converged {
        return Err(PowerFlowError::NotConverged(sol.status));
    }
    check_len("line flows", sol.line_flow_from.len(), net.n_line())?;
    Ok(sol.line_flow_from.iter().map(|s| s.norm()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    GenP,
    GenQ,
    LoadP,
    LoadQ,
    LineFlowP,
    LineFlowQ,
    BusVMag,
    BusVAng,
}

/// Ordered segment descriptor for the feature vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub segments: Vec<(Segment, usize)>,
    /// Condition vector length: lines then buses.
    pub cond_lines: usize,
    pub cond_buses: usize,
}

impl FeatureLayout {
    pub fn for_network(net: &Network) -> Self {
        let (g, l, f, v) = (net.n_gen(), net.n_bus(), net.n_line(), net.n_bus());
        FeatureLayout {
            segments: vec![
                (Segment::GenP, g),
                (Segment::GenQ, g),
                (Segment::LoadP, l),
                (Segment::LoadQ, l),
                (Segment::LineFlowP, f),
                (Segment::LineFlowQ, f),
                (Segment::BusVMag, v),
                (Segment::BusVAng, v),
            ],
            cond_lines: net.n_line(),
            cond_buses: net.n_bus(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.segments.iter().map(|(_, n)| n).sum()
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_lines + self.cond_buses
    }

    /// Short digest identifying the layout; models and datasets must agree on it.
    pub fn schema_hash(&self) -> String {
        let text = serde_json::to_string(self).expect("layout serializes");
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.feature_dim());
        for (seg, n) in &self.segments {
            let tag = serde_json::to_value(seg).unwrap();
            for i in 0..*n {
                names.push(format!("{}_{i}", tag.as_str().unwrap()));
            }
        }
        names
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub layout: FeatureLayout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector {
    pub values: Vec<f64>,
}

/// Pre-fault feature vector: generator P/Q, load P/Q, sending-end line P/Q,
/// bus voltage magnitude and angle, each segment in ascending element id.
pub fn build_feature_vector(
    net: &Network,
    sol: &PowerFlowSolution,
    load_p: &[f64],
    load_q: &[f64],
) -> Result<FeatureVector, PowerFlowError> {
    if !sol.converged {
        return Err(PowerFlowError::NotConverged(sol.status));
    }
    check_len("load_p", load_p.len(), net.n_bus())?;
    check_len("load_q", load_q.len(), net.n_bus())?;
    check_len("gen_p", sol.gen_p.len(), net.n_gen())?;
    check_len("v_mag", sol.v_mag.len(), net.n_bus())?;
    check_len("line flows", sol.line_flow_from.len(), net.n_line())?;
    let layout = FeatureLayout::for_network(net);
    let mut values = Vec::with_capacity(layout.feature_dim());
    values.extend_from_slice(&sol.gen_p);
    values.extend_from_slice(&sol.gen_q);
    values.extend_from_slice(load_p);
    values.extend_from_slice(load_q);
    values.extend(sol.line_flow_from.iter().map(|s| s.re));
    values.extend(sol.line_flow_from.iter().map(|s| s.im));
    values.extend_from_slice(&sol.v_mag);
    values.extend_from_slice(&sol.v_ang);
    debug_assert_eq!(values.len(), layout.feature_dim());
    Ok(FeatureVector { values, layout })
}

/// One-hot tripped line (by line position) followed by one-hot faulted bus;
/// all zeros for the no-contingency case.
pub fn build_condition_vector(
    net: &Network,
    contingency: Option<&Contingency>,
) -> Result<ConditionVector, PowerFlowError> {
    let mut values = vec![0.0; net.n_line() + net.n_bus()];
    if let Some(c) = contingency {
        let li = net.line_index(c.tripped_line).ok_or(PowerFlowError::UnknownElement {
            kind: "line",
            id: c.tripped_line,
        })?;
        if !net.lines[li].in_service {
            return Err(PowerFlowError::OutOfService(c.tripped_line));
        }
        let bi = net.bus_index(c.fault_bus).ok_or(PowerFlowError::UnknownElement {
            kind: "bus",
            id: c.fault_bus,
        })?;
        values[li] = 1.0;
        values[net.n_line() + bi] = 1.0;
    }
    Ok(ConditionVector { values })
}
