//! Service versions spreading along trust links.
//!
//! Each node runs one active version per service. At every adoption tick a
//! node looks at the peers it trusts and switches to a strictly fitter
//! version once at least a fraction `theta` of them run it. Adoption
//! history is a stack, so any number of adoptions can be undone.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::engine::{RngStream, SimTime};
use crate::overlay::NodeId;
use crate::services::ServiceId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvolutionError {
    #[error("parent version {0} is unknown")]
    UnknownParent(VersionId),
    #[error("version {0} is unknown")]
    UnknownVersion(VersionId),
    #[error("version {0} already released")]
    DuplicateVersion(VersionId),
    #[error("rollback of {steps} with history depth {depth}")]
    HistoryUnderflow { depth: usize, steps: usize },
    #[error("node {0:?} has no state for this service")]
    NoState(NodeId),
    #[error("origin {0:?} is offline")]
    Offline(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VersionId(pub String);

impl VersionId {
    pub fn new(s: impl Into<String>) -> Self {
        VersionId(s.into())
    }
}

impl fmt::Display for VersionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Non-negative rational, compared exactly. Written `a/b` or `a`.
#[derive(Debug, Clone, Copy)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "zero denominator");
        Ratio { num, den }
    }

    pub fn whole(n: u64) -> Self {
        Ratio::new(n, 1)
    }

    /// `a/b >= self`, exactly.
    pub fn is_met_by(&self, a: u64, b: u64) -> bool {
        b > 0 && (a as u128) * (self.den as u128) >= (self.num as u128) * (b as u128)
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl PartialEq for Ratio {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ratio {}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ratio {
    fn cmp(&self, other: &Self) -> Ordering {
        ((self.num as u128) * (other.den as u128)).cmp(&((other.num as u128) * (self.den as u128)))
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Ratio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("expected `a/b` or `a` with non-negative integers, got {s:?}");
        let (n, d) = match s.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        let num = n.parse().map_err(|_| bad())?;
        let den: u64 = d.parse().map_err(|_| bad())?;
        if den == 0 {
            return Err(bad());
        }
        Ok(Ratio::new(num, den))
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VersionNode {
    pub version_id: VersionId,
    pub parent: Option<VersionId>,
    pub service_id: ServiceId,
    pub fitness: Ratio,
    pub released_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AdoptionState {
    pub node: NodeId,
    pub service_id: ServiceId,
    pub active: VersionId,
    pub history: Vec<VersionId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdoptionKind {
    Release,
    Adopt,
    Rollback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AdoptionEvent {
    pub at: SimTime,
    pub node: NodeId,
    pub service_id: ServiceId,
    pub from_version: VersionId,
    pub to_version: VersionId,
    pub kind: AdoptionKind,
    /// History entries popped; zero except for rollbacks.
    pub steps: usize,
}

/// Trust out-links per node: the peers whose choices it follows.
pub type TrustGraph = BTreeMap<NodeId, Vec<NodeId>>;

#[derive(Debug, Clone)]
pub struct Evolution {
    versions: BTreeMap<VersionId, VersionNode>,
    states: BTreeMap<(ServiceId, NodeId), AdoptionState>,
    trust: TrustGraph,
    theta: Ratio,
    log: Vec<AdoptionEvent>,
}

impl Evolution {
    pub fn new(trust: TrustGraph, theta: Ratio) -> Self {
        Evolution {
            versions: BTreeMap::new(),
            states: BTreeMap::new(),
            trust,
            theta,
            log: Vec::new(),
        }
    }

    pub fn theta(&self) -> Ratio {
        self.theta
    }

    pub fn trust(&self) -> &TrustGraph {
        &self.trust
    }

    pub fn set_trust(&mut self, node: NodeId, links: Vec<NodeId>) {
        self.trust.insert(node, links);
    }

    pub fn version(&self, id: &VersionId) -> Option<&VersionNode> {
        self.versions.get(id)
    }

    pub fn versions(&self) -> impl Iterator<Item = &VersionNode> {
        self.versions.values()
    }

    pub fn state(&self, service: &ServiceId, node: &NodeId) -> Option<&AdoptionState> {
        self.states.get(&(service.clone(), *node))
    }

    pub fn log(&self) -> &[AdoptionEvent] {
        &self.log
    }

    fn add_version(&mut self, v: VersionNode) -> Result<(), EvolutionError> {
        if self.versions.contains_key(&v.version_id) {
            return Err(EvolutionError::DuplicateVersion(v.version_id));
        }
        if let Some(p) = &v.parent {
            if !self.versions.contains_key(p) {
                return Err(EvolutionError::UnknownParent(p.clone()));
            }
        }
        self.versions.insert(v.version_id.clone(), v);
        Ok(())
    }

    /// Register a root version already running on `nodes`, with empty history.
    pub fn install(&mut self, v: VersionNode, nodes: impl IntoIterator<Item = NodeId>) -> Result<(), EvolutionError> {
        let (svc, vid) = (v.service_id.clone(), v.version_id.clone());
        self.add_version(v)?;
        for n in nodes {
            self.states.insert(
                (svc.clone(), n),
                AdoptionState {
                    node: n,
                    service_id: svc.clone(),
                    active: vid.clone(),
                    history: Vec::new(),
                },
            );
        }
        Ok(())
    }

    /// Release `v` at `origins`, which switch to it at once.
    pub fn release(
        &mut self,
        v: VersionNode,
        origins: &[NodeId],
        is_online: impl Fn(&NodeId) -> bool,
        now: SimTime,
    ) -> Result<(), EvolutionError> {
        if let Some(o) = origins.iter().find(|o| !is_online(o)) {
            return Err(EvolutionError::Offline(*o));
        }
        let (svc, vid) = (v.service_id.clone(), v.version_id.clone());
        self.add_version(v)?;
        for o in origins {
            self.switch(&svc, *o, vid.clone(), AdoptionKind::Release, now);
        }
        Ok(())
    }

    fn switch(&mut self, svc: &ServiceId, node: NodeId, to: VersionId, kind: AdoptionKind, at: SimTime) {
        let state = self
            .states
            .entry((svc.clone(), node))
            .or_insert_with(|| AdoptionState {
                node,
                service_id: svc.clone(),
                active: to.clone(),
                history: Vec::new(),
            });
        if state.active == to && kind != AdoptionKind::Release {
            return;
        }
        let from = std::mem::replace(&mut state.active, to.clone());
        state.history.push(from.clone());
        self.log.push(AdoptionEvent {
            at,
            node,
            service_id: svc.clone(),
            from_version: from,
            to_version: to,
            kind,
            steps: 0,
        });
    }

    fn fitness(&self, v: &VersionId) -> Ratio {
        self.versions[v].fitness
    }

    /// The version `node` would adopt given the current states.
    pub fn candidate(&self, svc: &ServiceId, node: &NodeId, is_online: &impl Fn(&NodeId) -> bool) -> Option<VersionId> {
        let state = self.states.get(&(svc.clone(), *node))?;
        let peers = self.trust.get(node)?;
        if peers.is_empty() {
            return None;
        }
        let mut on: BTreeMap<&VersionId, u64> = BTreeMap::new();
        for p in peers {
            if !is_online(p) {
                continue;
            }
            if let Some(s) = self.states.get(&(svc.clone(), *p)) {
                *on.entry(&s.active).or_default() += 1;
            }
        }
        let current = self.fitness(&state.active);
        on.into_iter()
            .filter(|(v, n)| {
                **v != state.active
                    && self.theta.is_met_by(*n, peers.len() as u64)
                    && self.fitness(v) > current
            })
            .map(|(v, _)| v)
            .max_by(|a, b| self.fitness(a).cmp(&self.fitness(b)).then(b.cmp(a)))
            .cloned()
    }

    /// One synchronous adoption tick: every online node decides from the
    /// states at the start of the tick. Returns the number of adoptions.
    pub fn tick(&mut self, is_online: impl Fn(&NodeId) -> bool, now: SimTime) -> usize {
        let decisions: Vec<(ServiceId, NodeId, VersionId)> = self
            .states
            .keys()
            .filter(|(_, n)| is_online(n))
            .filter_map(|(s, n)| self.candidate(s, n, &is_online).map(|v| (s.clone(), *n, v)))
            .collect();
        let count = decisions.len();
        for (s, n, v) in decisions {
            self.switch(&s, n, v, AdoptionKind::Adopt, now);
        }
        count
    }

    /// Step back `steps` adoptions on `node`.
    pub fn rollback(
        &mut self,
        svc: &ServiceId,
        node: NodeId,
        steps: usize,
        now: SimTime,
    ) -> Result<&AdoptionState, EvolutionError> {
        let state = self
            .states
            .get_mut(&(svc.clone(), node))
            .ok_or(EvolutionError::NoState(node))?;
        if steps == 0 || state.history.len() < steps {
            return Err(EvolutionError::HistoryUnderflow {
                depth: state.history.len(),
                steps,
            });
        }
        let keep = state.history.len() - steps;
        let target = state.history[keep].clone();
        state.history.truncate(keep);
        let from = std::mem::replace(&mut state.active, target.clone());
        self.log.push(AdoptionEvent {
            at: now,
            node,
            service_id: svc.clone(),
            from_version: from,
            to_version: target,
            kind: AdoptionKind::Rollback,
            steps,
        });
        Ok(&self.states[&(svc.clone(), node)])
    }

    /// Nodes whose active version of `svc` is `v`.
    pub fn adopters(&self, svc: &ServiceId, v: &VersionId) -> BTreeSet<NodeId> {
        self.states
            .values()
            .filter(|s| &s.service_id == svc && &s.active == v)
            .map(|s| s.node)
            .collect()
    }

    /// Rebuild states by replaying an adoption log over the installed roots.
    pub fn replay(&self, log: &[AdoptionEvent]) -> BTreeMap<(ServiceId, NodeId), AdoptionState> {
        let mut states: BTreeMap<(ServiceId, NodeId), AdoptionState> = BTreeMap::new();
        // Roots: the first `from` seen for each node, or the current active
        // version for nodes that never moved.
        for (k, s) in &self.states {
            let first = log
                .iter()
                .find(|e| e.node == k.1 && e.service_id == k.0)
                .map(|e| e.from_version.clone())
                .unwrap_or_else(|| s.active.clone());
            states.insert(
                k.clone(),
                AdoptionState {
                    node: k.1,
                    service_id: k.0.clone(),
                    active: first,
                    history: Vec::new(),
                },
            );
        }
        for e in log {
            let s = states.get_mut(&(e.service_id.clone(), e.node)).expect("logged node has a state");
            match e.kind {
                AdoptionKind::Rollback => {
                    let keep = s.history.len() - e.steps;
                    s.history.truncate(keep);
                }
                _ => s.history.push(s.active.clone()),
            }
            s.active = e.to_version.clone();
        }
        states
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        write_adoptions_csv(&self.log, out)
    }
}

pub fn write_adoptions_csv<W: std::io::Write>(log: &[AdoptionEvent], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["at", "node", "service_id", "from_version", "to_version", "kind", "steps"])?;
    for e in log {
        let kind = match e.kind {
            AdoptionKind::Release => "release",
            AdoptionKind::Adopt => "adopt",
            AdoptionKind::Rollback => "rollback",
        };
        w.write_record([
            e.at.ticks().to_string(),
            e.node.to_hex(),
            e.service_id.to_string(),
            e.from_version.to_string(),
            e.to_version.to_string(),
            kind.to_string(),
            e.steps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Ring over a seeded permutation of `nodes`: each node trusts the two
/// nodes before it. Strongly connected for three or more nodes.
pub fn trust_ring(nodes: &[NodeId], rng: &mut RngStream) -> TrustGraph {
    let mut order = nodes.to_vec();
    rng.shuffle(&mut order);
    let n = order.len();
    let mut g = TrustGraph::new();
    for (i, id) in order.iter().enumerate() {
        let mut links = Vec::new();
        for back in [1, 2] {
            if back < n {
                let p = order[(i + n - back) % n];
                if !links.contains(&p) {
                    links.push(p);
                }
            }
        }
        g.insert(*id, links);
    }
    g
}
