//! Grid data model, JSON ingestion and topology variants.
//!
//! A [`Network`] is immutable once validated. Topology variants are produced
//! by [`remove_line`], which returns a new value and leaves its input intact.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("cannot read grid file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed grid file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported grid schema_version {0} (expected {SCHEMA_VERSION})")]
    SchemaVersion(u32),
    #[error("invalid network: {0}")]
    Validation(String),
    #[error("unknown line id {0}")]
    UnknownLine(u32),
    #[error("line {0} is already out of service")]
    InactiveLine(u32),
    #[error("removing line {0}: topology disconnects network")]
    Disconnects(u32),
    #[error("requested {requested} topologies but at most {max} are achievable")]
    TooManyTopologies { requested: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    #[serde(alias = "PV")]
    Pv,
    #[serde(alias = "PQ")]
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    #[serde(default = "one")]
    pub base_voltage_pu: f64,
    #[serde(default)]
    pub load_p_nominal: f64,
    #[serde(default)]
    pub load_q_nominal: f64,
    #[serde(default, with = "complex_obj")]
    pub shunt_admittance: Complex64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Line {
    pub id: u32,
    pub from_bus: u32,
    pub to_bus: u32,
    #[serde(with = "complex_obj")]
    pub series_impedance: Complex64,
    #[serde(default)]
    pub charging_susceptance: f64,
    pub rating_s_max: f64,
    #[serde(default = "yes")]
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub id: u32,
    pub bus: u32,
    pub p_set: f64,
    pub v_set: f64,
    pub inertia_h: f64,
    pub damping_d: f64,
    pub transient_reactance_xd: f64,
    pub p_max: f64,
}

/// A validated network. Element lists are sorted by ascending id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Network {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub topology_id: u32,
    pub base_mva: f64,
    #[serde(skip)]
    bus_index: HashMap<u32, usize>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    schema_version: u32,
    base_mva: f64,
    #[serde(default)]
    topology_id: u32,
    buses: Vec<Bus>,
    lines: Vec<Line>,
    generators: Vec<Generator>,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

pub(crate) mod complex_obj {
    use num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Obj {
        re: f64,
        im: f64,
    }

    pub fn serialize<S: Serializer>(z: &Complex64, s: S) -> Result<S::Ok, S::Error> {
        Obj { re: z.re, im: z.im }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Complex64, D::Error> {
        let o = Obj::deserialize(d)?;
        Ok(Complex64::new(o.re, o.im))
    }
}

/// Reads and validates a grid JSON file.
pub fn load_network(path: impl AsRef<Path>) -> Result<Network, GridError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_network(&text)
}

pub fn parse_network(text: &str) -> Result<Network, GridError> {
    let file: GridFile = serde_json::from_str(text)?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(GridError::SchemaVersion(file.schema_version));
    }
    Network::new(
        file.buses,
        file.lines,
        file.generators,
        file.topology_id,
        file.base_mva,
    )
}

impl Network {
    pub fn new(
        mut buses: Vec<Bus>,
        mut lines: Vec<Line>,
        mut generators: Vec<Generator>,
        topology_id: u32,
        base_mva: f64,
    ) -> Result<Self, GridError> {
        buses.sort_by_key(|b| b.id);
        lines.sort_by_key(|l| l.id);
        generators.sort_by_key(|g| g.id);
        let bus_index = buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        let net = Network {
            buses,
            lines,
            generators,
            topology_id,
            base_mva,
            bus_index,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<(), GridError> {
        let bad = |m: String| Err(GridError::Validation(m));
        if !(self.base_mva > 0.0) {
            return bad("base_mva must be positive".into());
        }
        if self.buses.is_empty() {
            return bad("network has no buses".into());
        }
        if let Some(d) = duplicate(self.buses.iter().map(|b| b.id)) {
            return bad(format!("duplicate bus id {d}"));
        }
        if let Some(d) = duplicate(self.lines.iter().map(|l| l.id)) {
            return bad(format!("duplicate line id {d}"));
        }
        if let Some(d) = duplicate(self.generators.iter().map(|g| g.id)) {
            return bad(format!("duplicate generator id {d}"));
        }
        match self.buses.iter().filter(|b| b.kind == BusKind::Slack).count() {
            0 => return bad("missing slack bus".into()),
            1 => {}
            _ => return bad("multiple slack buses".into()),
        }
        for b in &self.buses {
            if b.kind == BusKind::Pq && (b.load_p_nominal < 0.0 || b.load_q_nominal < 0.0) {
                return bad(format!("bus {} has a negative nominal load", b.id));
            }
            if !(b.base_voltage_pu > 0.0) {
                return bad(format!("bus {} has non-positive base voltage", b.id));
            }
        }
        for l in &self.lines {
            for end in [l.from_bus, l.to_bus] {
                if !self.bus_index.contains_key(&end) {
                    return bad(format!("line {} references unknown bus {end}", l.id));
                }
            }
            if l.from_bus == l.to_bus {
                return bad(format!("line {} connects bus {} to itself", l.id, l.from_bus));
            }
            if !(l.rating_s_max > 0.0) {
                return bad(format!("line {} has non-positive rating", l.id));
            }
            if l.series_impedance.re < 0.0 || l.series_impedance.norm() == 0.0 {
                return bad(format!("line {} has invalid series impedance", l.id));
            }
        }
        let mut gen_buses = BTreeSet::new();
        for g in &self.generators {
            let Some(&bi) = self.bus_index.get(&g.bus) else {
                return bad(format!("generator {} references unknown bus {}", g.id, g.bus));
            };
            if !gen_buses.insert(g.bus) {
                return bad(format!("more than one generator at bus {}", g.bus));
            }
            if self.buses[bi].kind == BusKind::Pq {
                return bad(format!("generator {} sits on PQ bus {}", g.id, g.bus));
            }
            if !(g.inertia_h > 0.0) {
                return bad(format!("generator {} needs inertia_h > 0", g.id));
            }
            if !(g.transient_reactance_xd > 0.0) {
                return bad(format!("generator {} needs transient_reactance_xd > 0", g.id));
            }
            if !(g.p_set >= 0.0 && g.p_set <= g.p_max) {
                return bad(format!("generator {} violates 0 <= p_set <= p_max", g.id));
            }
            if g.damping_d < 0.0 || !(g.v_set > 0.0) {
                return bad(format!("generator {} has invalid damping or v_set", g.id));
            }
        }
        for b in &self.buses {
            if b.kind != BusKind::Pq && !gen_buses.contains(&b.id) {
                return bad(format!("{:?} bus {} has no generator", b.kind, b.id));
            }
        }
        if !self.is_connected() {
            return bad("in-service line graph is disconnected".into());
        }
        Ok(())
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn n_line(&self) -> usize {
        self.lines.len()
    }

    pub fn n_gen(&self) -> usize {
        self.generators.len()
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.bus_index.get(&id).copied()
    }

    pub fn line_index(&self, id: u32) -> Option<usize> {
        self.lines.binary_search_by_key(&id, |l| l.id).ok()
    }

    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated network has a slack bus")
    }

    /// Bus index of every generator, in generator order.
    pub fn generator_bus_indices(&self) -> Vec<usize> {
        self.generators
            .iter()
            .map(|g| self.bus_index[&g.bus])
            .collect()
    }

    /// Endpoint bus indices of a line.
    pub fn line_ends(&self, line: &Line) -> (usize, usize) {
        (self.bus_index[&line.from_bus], self.bus_index[&line.to_bus])
    }

    pub fn in_service_lines(&self) -> impl Iterator<Item = &Line> {
        self.lines.iter().filter(|l| l.in_service)
    }

    pub fn is_connected(&self) -> bool {
        self.connected_without(None)
    }

    /// Connectivity of the in-service graph with one extra line ignored.
    pub fn connected_without(&self, skip_line: Option<u32>) -> bool {
        let n = self.n_bus();
        let mut adj = vec![Vec::new(); n];
        for l in self.in_service_lines().filter(|l| Some(l.id) != skip_line) {
            let (f, t) = self.line_ends(l);
            adj[f].push(t);
            adj[t].push(f);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == n
    }

    /// In-service lines whose removal keeps the network connected, ascending id.
    pub fn non_bridge_lines(&self) -> Vec<u32> {
        self.in_service_lines()
            .filter(|l| self.connected_without(Some(l.id)))
            .map(|l| l.id)
            .collect()
    }

    /// In-service lines incident to a bus, ascending id.
    pub fn incident_lines(&self, bus_id: u32) -> Vec<u32> {
        self.in_service_lines()
            .filter(|l| l.from_bus == bus_id || l.to_bus == bus_id)
            .map(|l| l.id)
            .collect()
    }

    pub fn total_nominal_load_p(&self) -> f64 {
        self.buses.iter().map(|b| b.load_p_nominal).sum()
    }

    pub fn to_json(&self) -> String {
        let file = GridFile {
            schema_version: SCHEMA_VERSION,
            base_mva: self.base_mva,
            topology_id: self.topology_id,
            buses: self.buses.clone(),
            lines: self.lines.clone(),
            generators: self.generators.clone(),
        };
        serde_json::to_string_pretty(&file).expect("network serializes")
    }

    pub(crate) fn with_topology_id(mut self, id: u32) -> Self {
        self.topology_id = id;
        self
    }
}

fn duplicate(ids: impl Iterator<Item = u32>) -> Option<u32> {
    let mut seen = BTreeSet::new();
    ids.into_iter().find(|&id| !seen.insert(id))
}

/// Takes a line out of service. The new network gets a topology id derived
/// from its parent id and the set of out-of-service lines.
pub fn remove_line(net: &Network, line_id: u32) -> Result<Network, GridError> {
    let idx = net.line_index(line_id).ok_or(GridError::UnknownLine(line_id))?;
    if !net.lines[idx].in_service {
        return Err(GridError::InactiveLine(line_id));
    }
    if !net.connected_without(Some(line_id)) {
        return Err(GridError::Disconnects(line_id));
    }
    let mut out = net.clone();
    out.lines[idx].in_service = false;
    let mut h = Sha256::new();
    h.update(net.topology_id.to_le_bytes());
    for l in out.lines.iter().filter(|l| !l.in_service) {
        h.update(l.id.to_le_bytes());
    }
    let d = h.finalize();
    out.topology_id = u32::from_le_bytes([d[0], d[1], d[2], d[3]]) & 0x7fff_ffff;
    Ok(out)
}

/// Base network followed by up to `k - 1` single-line-removal variants in
/// ascending line-id order. Variants are numbered `base + 1, base + 2, ...`.
pub fn enumerate_topologies(net: &Network, k: usize) -> Result<Vec<Network>, GridError> {
    if k == 0 {
        return Err(GridError::TooManyTopologies {
            requested: 0,
            max: net.non_bridge_lines().len() + 1,
        });
    }
    let candidates = net.non_bridge_lines();
    if k > candidates.len() + 1 {
        return Err(GridError::TooManyTopologies {
            requested: k,
            max: candidates.len() + 1,
        });
    }
    let mut out = vec![net.clone()];
    for (i, &line) in candidates.iter().take(k - 1).enumerate() {
        out.push(remove_line(net, line)?.with_topology_id(net.topology_id + 1 + i as u32));
    }
    Ok(out)
}

/// Bundled fixtures shipped with the crate.
pub mod fixtures {
    use super::{parse_network, Network};

    pub const THREE_BUS: &str = include_str!("../fixtures/three_bus.json");
    pub const NINE_BUS: &str = include_str!("../fixtures/wscc9.json");
    pub const THIRTY_NINE_BUS: &str = include_str!("../fixtures/ne39.json");

    pub fn three_bus() -> Network {
        parse_network(THREE_BUS).expect("bundled 3-bus fixture is valid")
    }

    pub fn nine_bus() -> Network {
        parse_network(NINE_BUS).expect("bundled 9-bus fixture is valid")
    }

    pub fn thirty_nine_bus() -> Network {
        parse_network(THIRTY_NINE_BUS).expect("bundled 39-bus fixture is valid")
    }
}
