//! Small hand-built networks with closed-form answers.

use gridmtl::grid::{Bus, BusKind, Generator, Line, Network};
use num_complex::Complex64;

pub fn bus(id: u32, kind: BusKind, p: f64, q: f64) -> Bus {
    Bus {
        id,
        kind,
        base_voltage_pu: 1.0,
        load_p_nominal: p,
        load_q_nominal: q,
        shunt_admittance: Complex64::new(0.0, 0.0),
    }
}

pub fn line(id: u32, from: u32, to: u32, r: f64, x: f64) -> Line {
    Line {
        id,
        from_bus: from,
        to_bus: to,
        series_impedance: Complex64::new(r, x),
        charging_susceptance: 0.0,
        rating_s_max: 5.0,
        in_service: true,
    }
}

pub fn generator(id: u32, bus: u32, p: f64, h: f64, d: f64, xd: f64) -> Generator {
    Generator {
        id,
        bus,
        p_set: p,
        v_set: 1.0,
        inertia_h: h,
        damping_d: d,
        transient_reactance_xd: xd,
        p_max: 10.0,
    }
}

/// Slack bus 1 at 1∠0 feeding a PQ load `p + jq` over `r + jx`.
pub fn two_bus(p: f64, q: f64, r: f64, x: f64) -> Network {
    Network::new(
        vec![bus(1, BusKind::Slack, 0.0, 0.0), bus(2, BusKind::Pq, p, q)],
        vec![line(1, 1, 2, r, x)],
        vec![generator(1, 1, 0.0, 5.0, 0.0, 0.2)],
        0,
        100.0,
    )
    .unwrap()
}

/// Closed-form receiving-end voltage `(|V|, angle)` of [`two_bus`].
pub fn two_bus_voltage(p: f64, q: f64, r: f64, x: f64) -> (f64, f64) {
    let b = 1.0 - 2.0 * (p * r + q * x);
    let z2 = r * r + x * x;
    let v2 = (b + (b * b - 4.0 * (p * p + q * q) * z2).sqrt()) / 2.0;
    let v = v2.sqrt();
    let ang = (q * r - p * x).atan2(v2 + p * r + q * x);
    (v, ang)
}

pub struct Smib {
    pub net: Network,
    pub p: f64,
    pub h: f64,
    pub xd: f64,
    pub x_inf: f64,
    pub x_line: f64,
}

/// Generator at bus 2 exporting `p` over two identical lossless lines to a
/// near-infinite machine at bus 1. No loads, no damping.
pub fn smib(p: f64) -> Smib {
    let (h, xd, x_inf, x_line) = (3.5, 0.3, 1e-3, 0.4);
    let net = Network::new(
        vec![bus(1, BusKind::Slack, 0.0, 0.0), bus(2, BusKind::Pv, 0.0, 0.0)],
        vec![line(1, 1, 2, 0.0, x_line), line(2, 1, 2, 0.0, x_line)],
        vec![generator(1, 1, 0.0, 1e6, 0.0, x_inf), generator(2, 2, p, h, 0.0, xd)],
        0,
        100.0,
    )
    .unwrap();
    Smib {
        net,
        p,
        h,
        xd,
        x_inf,
        x_line,
    }
}

/// Three machines on a lossless ring with no loads and no damping.
pub fn conservative_ring() -> Network {
    Network::new(
        vec![
            bus(1, BusKind::Slack, 0.0, 0.0),
            bus(2, BusKind::Pv, 0.0, 0.0),
            bus(3, BusKind::Pv, 0.0, 0.0),
        ],
        vec![
            line(1, 1, 2, 0.0, 0.2),
            line(2, 2, 3, 0.0, 0.25),
            line(3, 1, 3, 0.0, 0.3),
        ],
        vec![
            generator(1, 1, 0.0, 6.0, 0.0, 0.15),
            generator(2, 2, 0.8, 4.0, 0.0, 0.2),
            generator(3, 3, 0.3, 3.0, 0.0, 0.25),
        ],
        0,
        100.0,
    )
    .unwrap()
}
