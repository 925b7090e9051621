//! Classical-machine transient simulation and small-signal linearization.
//!
//! Each generator is a constant EMF behind its transient reactance. Loads are
//! converted to constant impedances at the pre-fault operating point and the
//! network is Kron-reduced to the generator internal nodes, once per network
//! condition (pre-fault, fault-on, post-fault).
//!
//! State per machine is the rotor angle δ (rad) and the per-unit speed
//! deviation Δω:
//!
//! ```text
//! 2H · dΔω/dt = P_mech − P_elec(δ) − D·Δω
//!      dδ/dt = ω_s · Δω
//! ```

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Network;
use crate::powerflow::{build_admittance, PowerFlowSolution};

pub use crate::eigen::{eigenvalues, EigenError};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("power flow solution is not converged")]
    NotConverged,
    #[error("singular load-bus admittance matrix ({0} network)")]
    SingularNetwork(&'static str),
    #[error("contingency references unknown {kind} id {id}")]
    UnknownElement { kind: &'static str, id: u32 },
    #[error("contingency trips line {0}, which is out of service")]
    OutOfService(u32),
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("cannot write trajectory: {0}")]
    Io(#[from] std::io::Error),
}

/// A three-phase bus fault cleared by tripping one line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contingency {
    pub fault_bus: u32,
    pub fault_start_s: f64,
    pub clearing_time_s: f64,
    pub tripped_line: u32,
}

impl Contingency {
    pub fn clear_at(&self) -> f64 {
        self.fault_start_s + self.clearing_time_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt_s: f64,
    pub horizon_s: f64,
    pub fault_start_s: f64,
    pub clearing_time_s: f64,
    pub omega_s: f64,
    /// Shunt conductance placed at the faulted bus while the fault is on.
    pub fault_shunt_pu: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt_s: 1e-3,
            horizon_s: 10.0,
            fault_start_s: 1.0,
            clearing_time_s: 0.083,
            omega_s: 2.0 * PI * 60.0,
            fault_shunt_pu: 1e6,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.dt_s > 0.0) {
            return Err(DynamicsError::Config("dt_s must be positive".into()));
        }
        if !(self.clearing_time_s > 0.0) {
            return Err(DynamicsError::Config("clearing_time_s must be positive".into()));
        }
        if self.fault_start_s < 0.0 || self.horizon_s < self.fault_start_s + self.clearing_time_s {
            return Err(DynamicsError::Config(
                "horizon_s must cover fault_start_s + clearing_time_s".into(),
            ));
        }
        if !(self.omega_s > 0.0) || !(self.fault_shunt_pu > 0.0) {
            return Err(DynamicsError::Config("omega_s and fault_shunt_pu must be positive".into()));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon_s / self.dt_s).round() as usize
    }
}

/// A network condition reduced to the generator internal nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedNetwork {
    /// Row-major `n_gen × n_gen` reduced admittance.
    pub y_red: Vec<Complex64>,
    /// Row-major `n_bus × n_gen` map from internal EMFs to bus voltages.
    pub recovery: Vec<Complex64>,
    /// Line models in service under this condition.
    pub lines: Vec<LineModel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineModel {
    /// Position in the network's line list.
    pub index: usize,
    pub from: usize,
    pub to: usize,
    pub y_series: Complex64,
    pub y_half_shunt: Complex64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicInit {
    pub internal_emf: Vec<Complex64>,
    pub e_mag: Vec<f64>,
    pub delta0: Vec<f64>,
    pub p_mech: Vec<f64>,
    /// 2H per machine.
    pub inertia_m: Vec<f64>,
    pub damping: Vec<f64>,
    pub pre_fault: ReducedNetwork,
    n_bus: usize,
    n_line: usize,
    gen_bus: Vec<usize>,
    y_gen: Vec<Complex64>,
    /// Extended load-bus matrix `Y_bus + Y_load + Y_gen` of the pre-fault network.
    y_bb: DMatrix<Complex64>,
    bus_ids: Vec<u32>,
    line_ids: Vec<u32>,
    line_models: Vec<LineModel>,
}

impl DynamicInit {
    pub fn n_gen(&self) -> usize {
        self.delta0.len()
    }

    pub fn n_bus(&self) -> usize {
        self.n_bus
    }

    /// Electrical power of each machine at the given rotor angles.
    pub fn electrical_power(&self, net: &ReducedNetwork, delta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_gen()];
        electrical_power_into(net, &self.e_mag, delta, &mut out);
        out
    }

    /// Fault-on and post-fault reduced networks for a contingency.
    pub fn contingency_networks(
        &self,
        cont: &Contingency,
        fault_shunt: f64,
    ) -> Result<(ReducedNetwork, ReducedNetwork), DynamicsError> {
        let fb = self
            .bus_ids
            .iter()
            .position(|&id| id == cont.fault_bus)
            .ok_or(DynamicsError::UnknownElement {
                kind: "bus",
                id: cont.fault_bus,
            })?;
        let li = self
            .line_ids
            .iter()
            .position(|&id| id == cont.tripped_line)
            .ok_or(DynamicsError::UnknownElement {
                kind: "line",
                id: cont.tripped_line,
            })?;
        let lm = *self
            .line_models
            .iter()
            .find(|m| m.index == li)
            .ok_or(DynamicsError::OutOfService(cont.tripped_line))?;

        let mut faulted = self.y_bb.clone();
        faulted[(fb, fb)] += Complex64::new(fault_shunt, 0.0);
        let fault_on = self.reduce(&faulted, self.line_models.clone(), "fault-on")?;

        let mut post = self.y_bb.clone();
        post[(lm.from, lm.from)] -= lm.y_series + lm.y_half_shunt;
        post[(lm.to, lm.to)] -= lm.y_series + lm.y_half_shunt;
        post[(lm.from, lm.to)] += lm.y_series;
        post[(lm.to, lm.from)] += lm.y_series;
        let lines = self
            .line_models
            .iter()
            .filter(|m| m.index != li)
            .copied()
            .collect();
        let post_fault = self.reduce(&post, lines, "post-fault")?;
        Ok((fault_on, post_fault))
    }

    fn reduce(
        &self,
        y_bb: &DMatrix<Complex64>,
        lines: Vec<LineModel>,
        label: &'static str,
    ) -> Result<ReducedNetwork, DynamicsError> {
        kron_reduce(y_bb, &self.gen_bus, &self.y_gen, lines, label)
    }
}

fn kron_reduce(
    y_bb: &DMatrix<Complex64>,
    gen_bus: &[usize],
    y_gen: &[Complex64],
    lines: Vec<LineModel>,
    label: &'static str,
) -> Result<ReducedNetwork, DynamicsError> {
    let n = y_bb.nrows();
    let ng = gen_bus.len();
    let mut y_bg = DMatrix::from_element(n, ng, Complex64::new(0.0, 0.0));
    for (k, &b) in gen_bus.iter().enumerate() {
        y_bg[(b, k)] = -y_gen[k];
    }
    let x = y_bb
        .clone()
        .lu()
        .solve(&y_bg)
        .ok_or(DynamicsError::SingularNetwork(label))?;
    if x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(DynamicsError::SingularNetwork(label));
    }
    let mut y_red = vec![Complex64::new(0.0, 0.0); ng * ng];
    for k in 0..ng {
        for j in 0..ng {
            let diag = if j == k { y_gen[k] } else { Complex64::new(0.0, 0.0) };
            y_red[k * ng + j] = diag + y_gen[k] * x[(gen_bus[k], j)];
        }
    }
    let mut recovery = vec![Complex64::new(0.0, 0.0); n * ng];
    for b in 0..n {
        for j in 0..ng {
            recovery[b * ng + j] = -x[(b, j)];
        }
    }
    Ok(ReducedNetwork {
        y_red,
        recovery,
        lines,
    })
}

fn electrical_power_into(net: &ReducedNetwork, e_mag: &[f64], delta: &[f64], out: &mut [f64]) {
    let ng = e_mag.len();
    // P_i = Re(E_i conj(sum_j Y_ij E_j))
    for i in 0..ng {
        let mut acc = 0.0;
        for j in 0..ng {
            let y = net.y_red[i * ng + j];
            let (s, c) = (delta[i] - delta[j]).sin_cos();
            acc += e_mag[j] * (y.re * c + y.im * s);
        }
        out[i] = e_mag[i] * acc;
    }
}

/// Computes internal EMFs behind transient reactance, converts loads to
/// constant impedances and reduces the pre-fault network.
pub fn initialize_dynamics(
    net: &Network,
    sol: &PowerFlowSolution,
) -> Result<DynamicInit, DynamicsError> {
    if !sol.converged {
        return Err(DynamicsError::NotConverged);
    }
    let n = net.n_bus();
    let v = sol.voltages();
    let y_bus = build_admittance(net);
    let gen_bus = net.generator_bus_indices();

    // load = generation − network injection, exact at the solved voltages
    let mut s_load: Vec<Complex64> = (0..n)
        .map(|i| {
            let mut cur = Complex64::new(0.0, 0.0);
            for k in 0..n {
                cur += y_bus[(i, k)] * v[k];
            }
            -(v[i] * cur.conj())
        })
        .collect();
    for (k, &b) in gen_bus.iter().enumerate() {
        s_load[b] += Complex64::new(sol.gen_p[k], sol.gen_q[k]);
    }

    let y_gen: Vec<Complex64> = net
        .generators
        .iter()
        .map(|g| Complex64::new(0.0, g.transient_reactance_xd).inv())
        .collect();
    let mut y_bb = y_bus;
    for i in 0..n {
        y_bb[(i, i)] += s_load[i].conj() / v[i].norm_sqr();
    }
    for (k, &b) in gen_bus.iter().enumerate() {
        y_bb[(b, b)] += y_gen[k];
    }

    let internal_emf: Vec<Complex64> = net
        .generators
        .iter()
        .zip(&gen_bus)
        .enumerate()
        .map(|(k, (g, &b))| {
            let s = Complex64::new(sol.gen_p[k], sol.gen_q[k]);
            let i = (s / v[b]).conj();
            v[b] + Complex64::new(0.0, g.transient_reactance_xd) * i
        })
        .collect();

    let line_models: Vec<LineModel> = net
        .lines
        .iter()
        .enumerate()
        .filter(|(_, l)| l.in_service)
        .map(|(index, l)| {
            let (from, to) = net.line_ends(l);
            LineModel {
                index,
                from,
                to,
                y_series: l.series_impedance.inv(),
                y_half_shunt: Complex64::new(0.0, l.charging_susceptance / 2.0),
            }
        })
        .collect();

    let pre_fault = kron_reduce(&y_bb, &gen_bus, &y_gen, line_models.clone(), "pre-fault")?;
    let e_mag: Vec<f64> = internal_emf.iter().map(|e| e.norm()).collect();
    let delta0: Vec<f64> = internal_emf.iter().map(|e| e.arg()).collect();
    let mut p_mech = vec![0.0; net.n_gen()];
    electrical_power_into(&pre_fault, &e_mag, &delta0, &mut p_mech);

    Ok(DynamicInit {
        internal_emf,
        e_mag,
        delta0,
        p_mech,
        inertia_m: net.generators.iter().map(|g| 2.0 * g.inertia_h).collect(),
        damping: net.generators.iter().map(|g| g.damping_d).collect(),
        pre_fault,
        n_bus: n,
        n_line: net.n_line(),
        gen_bus,
        y_gen,
        y_bb,
        bus_ids: net.buses.iter().map(|b| b.id).collect(),
        line_ids: net.lines.iter().map(|l| l.id).collect(),
        line_models,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt_s: f64,
    pub time_s: Vec<f64>,
    /// `[step][generator]`, radians.
    pub delta: Vec<Vec<f64>>,
    /// `[step][generator]`, per-unit speed deviation.
    pub omega_dev: Vec<Vec<f64>>,
    /// `[step][bus]`, per-unit voltage magnitude.
    pub bus_v_mag: Vec<Vec<f64>>,
    /// Set when a non-finite state truncated the run.
    pub divergent: bool,
    /// Start of the window used for dwell and flow averaging; the fault-on
    /// interval lies before it.
    pub assess_from_s: f64,
    /// Mean sending-end apparent power per line over the assessment window.
    pub line_s_mean: Vec<f64>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.time_s.len()
    }

    /// CSV dump: `time, delta_0.., v_mag_0..`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DynamicsError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let ng = self.delta.first().map_or(0, |d| d.len());
        let nb = self.bus_v_mag.first().map_or(0, |v| v.len());
        let mut header = vec!["time".to_string()];
        header.extend((0..ng).map(|i| format!("delta_{i}")));
        header.extend((0..nb).map(|i| format!("v_mag_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.n_steps() {
            let mut row = vec![self.time_s[k].to_string()];
            row.extend(self.delta[k].iter().map(|x| x.to_string()));
            row.extend(self.bus_v_mag[k].iter().map(|x| x.to_string()));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Phase {
    Pre,
    FaultOn,
    Post,
}

struct Schedule<'a> {
    pre: &'a ReducedNetwork,
    fault_on: Option<&'a ReducedNetwork>,
    post: Option<&'a ReducedNetwork>,
    t_fault: f64,
    t_clear: f64,
}

impl<'a> Schedule<'a> {
    fn phase(&self, t: f64) -> Phase {
        match (self.fault_on, self.post) {
            (Some(_), Some(_)) if t >= self.t_clear => Phase::Post,
            (Some(_), Some(_)) if t >= self.t_fault => Phase::FaultOn,
            _ => Phase::Pre,
        }
    }

    fn network(&self, p: Phase) -> &'a ReducedNetwork {
        match p {
            Phase::Pre => self.pre,
            Phase::FaultOn => self.fault_on.unwrap(),
            Phase::Post => self.post.unwrap(),
        }
    }

    fn events(&self) -> Vec<f64> {
        if self.fault_on.is_some() {
            vec![self.t_fault, self.t_clear]
        } else {
            Vec::new()
        }
    }
}

struct Rhs<'a> {
    init: &'a DynamicInit,
    omega_s: f64,
    pe: Vec<f64>,
}

impl Rhs<'_> {
    fn eval(&mut self, net: &ReducedNetwork, state: &[f64], out: &mut [f64]) {
        let ng = self.init.n_gen();
        let (delta, omega) = state.split_at(ng);
        electrical_power_into(net, &self.init.e_mag, delta, &mut self.pe);
        for i in 0..ng {
            out[i] = self.omega_s * omega[i];
            out[ng + i] = (self.init.p_mech[i] - self.pe[i] - self.init.damping[i] * omega[i])
                / self.init.inertia_m[i];
        }
    }
}

fn rk4_step(rhs: &mut Rhs, net: &ReducedNetwork, state: &mut [f64], h: f64, work: &mut [Vec<f64>; 5]) {
    let n = state.len();
    let [k1, k2, k3, k4, tmp] = work;
    rhs.eval(net, state, k1);
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * h * k1[i];
    }
    rhs.eval(net, tmp, k2);
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * h * k2[i];
    }
    rhs.eval(net, tmp, k3);
    for i in 0..n {
        tmp[i] = state[i] + h * k3[i];
    }
    rhs.eval(net, tmp, k4);
    for i in 0..n {
        state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Simulates one contingency from the pre-fault equilibrium.
pub fn simulate(
    init: &DynamicInit,
    cont: &Contingency,
    cfg: &SimConfig,
) -> Result<Trajectory, DynamicsError> {
    let sim = SimConfig {
        fault_start_s: cont.fault_start_s,
        clearing_time_s: cont.clearing_time_s,
        ..cfg.clone()
    };
    sim.validate()?;
    let (fault_on, post) = init.contingency_networks(cont, cfg.fault_shunt_pu)?;
    let schedule = Schedule {
        pre: &init.pre_fault,
        fault_on: Some(&fault_on),
        post: Some(&post),
        t_fault: cont.fault_start_s,
        t_clear: cont.clear_at(),
    };
    Ok(integrate(init, &schedule, cfg, &init.delta0, &vec![0.0; init.n_gen()]))
}

/// Runs the pre-fault system without a disturbance, optionally from a
/// perturbed initial state.
pub fn simulate_undisturbed(
    init: &DynamicInit,
    cfg: &SimConfig,
    delta_start: &[f64],
    omega_start: &[f64],
) -> Trajectory {
    let schedule = Schedule {
        pre: &init.pre_fault,
        fault_on: None,
        post: None,
        t_fault: f64::INFINITY,
        t_clear: f64::INFINITY,
    };
    integrate(init, &schedule, cfg, delta_start, omega_start)
}

fn integrate(
    init: &DynamicInit,
    schedule: &Schedule,
    cfg: &SimConfig,
    delta_start: &[f64],
    omega_start: &[f64],
) -> Trajectory {
    let ng = init.n_gen();
    let nb = init.n_bus;
    let steps = cfg.n_steps();
    let dt = cfg.dt_s;
    let assess_from = if schedule.fault_on.is_some() {
        schedule.t_clear
    } else {
        0.0
    };
    let mut state: Vec<f64> = delta_start.iter().chain(omega_start).copied().collect();
    let mut rhs = Rhs {
        init,
        omega_s: cfg.omega_s,
        pe: vec![0.0; ng],
    };
    let mut work = [
        vec![0.0; 2 * ng],
        vec![0.0; 2 * ng],
        vec![0.0; 2 * ng],
        vec![0.0; 2 * ng],
        vec![0.0; 2 * ng],
    ];
    let events = schedule.events();

    let mut traj = Trajectory {
        dt_s: dt,
        time_s: Vec::with_capacity(steps + 1),
        delta: Vec::with_capacity(steps + 1),
        omega_dev: Vec::with_capacity(steps + 1),
        bus_v_mag: Vec::with_capacity(steps + 1),
        divergent: false,
        assess_from_s: assess_from,
        line_s_mean: vec![0.0; init.n_line],
    };
    let mut flow_samples = 0usize;
    let mut v_bus = vec![Complex64::new(0.0, 0.0); nb];

    let mut record = |t: f64, state: &[f64], traj: &mut Trajectory| {
        let net = schedule.network(schedule.phase(t));
        let (delta, omega) = state.split_at(ng);
        let emf: Vec<Complex64> = (0..ng)
            .map(|k| Complex64::from_polar(init.e_mag[k], delta[k]))
            .collect();
        for b in 0..nb {
            let row = &net.recovery[b * ng..(b + 1) * ng];
            v_bus[b] = row.iter().zip(&emf).map(|(r, e)| r * e).sum();
        }
        traj.time_s.push(t);
        traj.delta.push(delta.to_vec());
        traj.omega_dev.push(omega.to_vec());
        traj.bus_v_mag.push(v_bus.iter().map(|v| v.norm()).collect());
        if t >= assess_from {
            for lm in &net.lines {
                let (vf, vt) = (v_bus[lm.from], v_bus[lm.to]);
                let i_f = (lm.y_series + lm.y_half_shunt) * vf - lm.y_series * vt;
                traj.line_s_mean[lm.index] += (vf * i_f.conj()).norm();
            }
            flow_samples += 1;
        }
    };

    record(0.0, &state, &mut traj);
    for k in 0..steps {
        let t0 = k as f64 * dt;
        let t1 = (k + 1) as f64 * dt;
        let mut t = t0;
        for &te in events.iter().filter(|&&te| te > t0 && te < t1) {
            let net = schedule.network(schedule.phase(t));
            rk4_step(&mut rhs, net, &mut state, te - t, &mut work);
            t = te;
        }
        let net = schedule.network(schedule.phase(t));
        rk4_step(&mut rhs, net, &mut state, t1 - t, &mut work);
        if state.iter().any(|x| !x.is_finite()) {
            traj.divergent = true;
            break;
        }
        record(t1, &state, &mut traj);
    }
    if flow_samples > 0 {
        for s in &mut traj.line_s_mean {
            *s /= flow_samples as f64;
        }
    }
    traj
}

/// Synchronizing-torque Jacobian `∂P_elec/∂δ` at `delta` on a reduced network.
pub fn synchronizing_jacobian(init: &DynamicInit, net: &ReducedNetwork, delta: &[f64]) -> DMatrix<f64> {
    let ng = init.n_gen();
    let e = &init.e_mag;
    let mut k = DMatrix::zeros(ng, ng);
    for i in 0..ng {
        let mut diag = 0.0;
        for j in 0..ng {
            if i == j {
                continue;
            }
            let y = net.y_red[i * ng + j];
            let (s, c) = (delta[i] - delta[j]).sin_cos();
            // ∂/∂δ_j of E_i E_j (G cos δij + B sin δij)
            let kij = e[i] * e[j] * (y.re * s - y.im * c);
            k[(i, j)] = kij;
            diag -= kij;
        }
        k[(i, i)] = diag;
    }
    k
}

/// State matrix of the linearized swing equations, state `[δ; Δω]`.
pub fn linearize(init: &DynamicInit, omega_s: f64) -> DMatrix<f64> {
    let ng = init.n_gen();
    let k = synchronizing_jacobian(init, &init.pre_fault, &init.delta0);
    let mut a = DMatrix::zeros(2 * ng, 2 * ng);
    for i in 0..ng {
        a[(i, ng + i)] = omega_s;
        let m = init.inertia_m[i];
        for j in 0..ng {
            a[(ng + i, j)] = -k[(i, j)] / m;
        }
        a[(ng + i, ng + i)] = -init.damping[i] / m;
    }
    a
}

/// Damping ratio and frequency (Hz) of a mode. Real eigenvalues report
/// frequency 0 and ζ = +1 (decaying or zero) or −1 (growing).
pub fn mode_damping(lambda: Complex64) -> (f64, f64) {
    let freq = lambda.im.abs() / (2.0 * PI);
    if lambda.im == 0.0 {
        let zeta = if lambda.re > 0.0 { -1.0 } else { 1.0 };
        return (zeta, 0.0);
    }
    (-lambda.re / lambda.norm(), freq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::fixtures;
    use crate::powerflow::solve_power_flow;

    fn nominal(net: &Network) -> (Vec<f64>, Vec<f64>) {
        (
            net.buses.iter().map(|b| b.load_p_nominal).collect(),
            net.buses.iter().map(|b| b.load_q_nominal).collect(),
        )
    }

    fn nine_bus_init() -> (Network, DynamicInit) {
        let net = fixtures::nine_bus();
        let (p, q) = nominal(&net);
        let sol = solve_power_flow(&net, &p, &q).unwrap();
        let init = initialize_dynamics(&net, &sol).unwrap();
        (net, init)
    }

    #[test]
    fn equilibrium_holds() {
        let (_, init) = nine_bus_init();
        let pe = init.electrical_power(&init.pre_fault, &init.delta0);
        for (p, m) in pe.iter().zip(&init.p_mech) {
            assert!((p - m).abs() < 1e-8);
        }
    }

    #[test]
    fn initialization_is_deterministic() {
        let (_, a) = nine_bus_init();
        let (_, b) = nine_bus_init();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_dispatch_gives_equal_angles() {
        let mut net = fixtures::nine_bus();
        for g in &mut net.generators {
            g.p_set = 0.0;
        }
        for l in &mut net.lines {
            l.series_impedance.re = 0.0;
        }
        let z = vec![0.0; net.n_bus()];
        let sol = solve_power_flow(&net, &z, &z).unwrap();
        let init = initialize_dynamics(&net, &sol).unwrap();
        for d in &init.delta0 {
            assert!((d - init.delta0[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn undisturbed_run_stays_at_equilibrium() {
        let (_, init) = nine_bus_init();
        let cfg = SimConfig {
            horizon_s: 3.0,
            ..SimConfig::default()
        };
        let traj = simulate_undisturbed(&init, &cfg, &init.delta0, &vec![0.0; 3]);
        for row in &traj.delta {
            for (d, d0) in row.iter().zip(&init.delta0) {
                assert!((d - d0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn trajectory_time_grid_is_fixed() {
        let (_, init) = nine_bus_init();
        let cfg = SimConfig {
            horizon_s: 1.5,
            ..SimConfig::default()
        };
        let c = Contingency {
            fault_bus: 7,
            fault_start_s: 0.5,
            clearing_time_s: 0.083,
            tripped_line: 5,
        };
        let traj = simulate(&init, &c, &cfg).unwrap();
        assert_eq!(traj.n_steps(), cfg.n_steps() + 1);
        for w in traj.time_s.windows(2) {
            assert!((w[1] - w[0] - cfg.dt_s).abs() < 1e-12);
        }
        // the faulted bus collapses while the fault is on
        let k = (0.55 / cfg.dt_s) as usize;
        assert!(traj.bus_v_mag[k][6] < 1e-3);
        assert_eq!(traj.line_s_mean[4], 0.0);
    }

    #[test]
    fn bad_contingencies_are_rejected() {
        let (_, init) = nine_bus_init();
        let cfg = SimConfig::default();
        let c = Contingency {
            fault_bus: 70,
            fault_start_s: 1.0,
            clearing_time_s: 0.1,
            tripped_line: 5,
        };
        assert!(matches!(
            simulate(&init, &c, &cfg),
            Err(DynamicsError::UnknownElement { kind: "bus", .. })
        ));
        let c = Contingency {
            fault_bus: 7,
            clearing_time_s: 0.0,
            ..c
        };
        assert!(matches!(simulate(&init, &c, &cfg), Err(DynamicsError::Config(_))));
    }

    #[test]
    fn mode_damping_examples() {
        let (z, f) = mode_damping(Complex64::new(-0.1, PI));
        assert!((f - 0.5).abs() < 1e-12);
        assert!((z - 0.1 / (0.01 + PI * PI).sqrt()).abs() < 1e-12);
        assert!((z - 0.03182).abs() < 1e-5);
        let (z, f) = mode_damping(Complex64::new(-0.05, PI));
        assert!((f - 0.5).abs() < 1e-12);
        assert!((z - 0.0159).abs() < 1e-4);
        let (z, _) = mode_damping(Complex64::new(0.0, 3.0));
        assert_eq!(z, 0.0);
        assert_eq!(mode_damping(Complex64::new(-2.0, 0.0)), (1.0, 0.0));
        assert_eq!(mode_damping(Complex64::new(2.0, 0.0)), (-1.0, 0.0));
    }

    #[test]
    fn linearization_has_rigid_body_mode() {
        let (_, init) = nine_bus_init();
        let a = linearize(&init, SimConfig::default().omega_s);
        let k = synchronizing_jacobian(&init, &init.pre_fault, &init.delta0);
        for i in 0..3 {
            let row: f64 = (0..3).map(|j| k[(i, j)]).sum();
            assert!(row.abs() < 1e-10);
        }
        let eig = eigenvalues(&a).unwrap();
        assert!(eig.iter().any(|l| l.norm() < 1e-8), "{eig:?}");
    }
}
