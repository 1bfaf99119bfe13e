//! Coordination layer: identity, membership under churn, latency-weighted
//! routing and distributed virtual super-peers.

mod dvsp;
mod identity;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{RngStream, SimTime};
use crate::resources::Resources;

pub use dvsp::{TxAbort, TxOutcome, VirtualSuperPeer};
pub use identity::{generate_identity, NodeId, PositionFingerprint};

/// Discrete geography label.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Region(pub u16);

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OverlayError {
    #[error("node {0:?} is already online")]
    DuplicateJoin(NodeId),
    #[error("node {0:?} is not online")]
    UnknownLeave(NodeId),
    #[error("node {0:?} is offline")]
    Offline(NodeId),
    #[error("no route to {0:?}")]
    Unreachable(NodeId),
    #[error("no online node in region {0}")]
    EmptyRegion(Region),
    #[error("super-peer for region {0} lacks quorum")]
    NoQuorum(Region),
}

/// Parameters of the alternating exponential online/offline process.
/// `mean_offline == 0` means the node never leaves on its own.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UptimeSchedule {
    pub mean_online: f64,
    pub mean_offline: f64,
}

impl UptimeSchedule {
    pub fn always_on() -> Self {
        UptimeSchedule {
            mean_online: f64::INFINITY,
            mean_offline: 0.0,
        }
    }

    pub fn is_always_on(&self) -> bool {
        self.mean_offline <= 0.0 || !self.mean_online.is_finite()
    }

    pub fn next_online(&self, rng: &mut RngStream) -> u64 {
        (rng.exponential(self.mean_online).ceil() as u64).max(1)
    }

    pub fn next_offline(&self, rng: &mut RngStream) -> u64 {
        (rng.exponential(self.mean_offline).ceil() as u64).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub id: NodeId,
    pub capacity: Resources,
    pub region: Region,
    pub uptime_schedule: UptimeSchedule,
    pub trust_links: BTreeSet<NodeId>,
    pub online: bool,
}

impl NodeRecord {
    pub fn new(id: NodeId, capacity: Resources, region: Region) -> Self {
        NodeRecord {
            id,
            capacity,
            region,
            uptime_schedule: UptimeSchedule::always_on(),
            trust_links: BTreeSet::new(),
            online: false,
        }
    }

    pub fn with_trust(mut self, links: impl IntoIterator<Item = NodeId>) -> Self {
        self.trust_links = links.into_iter().filter(|l| *l != self.id).collect();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Link {
    pub latency: u64,
    pub bandwidth: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OverlayConfig {
    /// Links per node inside its region.
    pub degree: usize,
    /// Neighbours below this count trigger repair links.
    pub min_degree: usize,
    /// Links between every pair of regions at bootstrap, and per joining node.
    pub inter_region_links: usize,
    /// Target super-peer size.
    pub dvsp_size: usize,
    pub intra_latency: (u64, u64),
    pub inter_latency: (u64, u64),
}

impl Default for OverlayConfig {
    fn default() -> Self {
        OverlayConfig {
            degree: 6,
            min_degree: 3,
            inter_region_links: 2,
            dvsp_size: 5,
            intra_latency: (5, 20),
            inter_latency: (50, 150),
        }
    }
}

/// Nodes whose neighbour sets (and fingerprints) changed, plus super-peers
/// that lost a member.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MembershipDelta {
    pub changed: BTreeSet<NodeId>,
    pub flagged: Vec<Region>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OverlayCounters {
    pub joins: u64,
    pub leaves: u64,
    pub repair_links: u64,
    pub reformations: u64,
}

struct ShortestPaths {
    /// Destination -> (summed base latency, bottleneck bandwidth).
    dist: HashMap<NodeId, (u64, u64)>,
}

pub struct Overlay {
    cfg: OverlayConfig,
    records: BTreeMap<NodeId, NodeRecord>,
    online_since: BTreeMap<NodeId, SimTime>,
    adj: BTreeMap<NodeId, BTreeMap<NodeId, Link>>,
    fingerprints: BTreeMap<NodeId, PositionFingerprint>,
    dvsps: BTreeMap<Region, VirtualSuperPeer>,
    flagged: BTreeSet<Region>,
    rng: RngStream,
    version: u64,
    paths: HashMap<NodeId, Rc<ShortestPaths>>,
    paths_version: u64,
    counters: OverlayCounters,
}

impl Overlay {
    pub fn new(cfg: OverlayConfig, rng: RngStream) -> Self {
        Overlay {
            cfg,
            records: BTreeMap::new(),
            online_since: BTreeMap::new(),
            adj: BTreeMap::new(),
            fingerprints: BTreeMap::new(),
            dvsps: BTreeMap::new(),
            flagged: BTreeSet::new(),
            rng,
            version: 0,
            paths: HashMap::new(),
            paths_version: 0,
            counters: OverlayCounters::default(),
        }
    }

    pub fn config(&self) -> &OverlayConfig {
        &self.cfg
    }

    pub fn counters(&self) -> OverlayCounters {
        self.counters
    }

    /// Bring every record online at once with a per-region circulant graph
    /// over a random node order, plus `inter_region_links` links between
    /// every pair of regions. Super-peers are formed for every region.
    pub fn bootstrap(&mut self, records: Vec<NodeRecord>, now: SimTime) {
        let mut by_region: BTreeMap<Region, Vec<NodeId>> = BTreeMap::new();
        for mut r in records {
            r.online = true;
            by_region.entry(r.region).or_default().push(r.id);
            self.online_since.insert(r.id, now);
            self.adj.entry(r.id).or_default();
            self.records.insert(r.id, r);
        }
        for ids in by_region.values_mut() {
            ids.sort();
            self.rng.shuffle(ids);
            let n = ids.len();
            let half = (self.cfg.degree / 2).max(1);
            for i in 0..n {
                for j in 1..=half.min(n.saturating_sub(1)) {
                    let (a, b) = (ids[i], ids[(i + j) % n]);
                    if a != b && !self.adj[&a].contains_key(&b) {
                        let lat = self.draw_latency(true);
                        self.link_unchecked(a, b, lat);
                    }
                }
            }
        }
        let regions: Vec<Region> = by_region.keys().copied().collect();
        for (i, ra) in regions.iter().enumerate() {
            for rb in &regions[i + 1..] {
                let a = self.rng.sample(&by_region[ra], self.cfg.inter_region_links);
                let b = self.rng.sample(&by_region[rb], self.cfg.inter_region_links);
                for (x, y) in a.into_iter().zip(b) {
                    if !self.adj[&x].contains_key(&y) {
                        let lat = self.draw_latency(false);
                        self.link_unchecked(x, y, lat);
                    }
                }
            }
        }
        let ids: Vec<NodeId> = self.adj.keys().copied().collect();
        for id in ids {
            self.refresh_fingerprint(id);
        }
        for region in regions {
            let _ = self.form_dvsp(region, now);
        }
        self.version += 1;
    }

    fn draw_latency(&mut self, intra: bool) -> u64 {
        let (lo, hi) = if intra {
            self.cfg.intra_latency
        } else {
            self.cfg.inter_latency
        };
        self.rng.range_inclusive(lo, hi.max(lo))
    }

    fn link_unchecked(&mut self, a: NodeId, b: NodeId, latency: u64) {
        let bw = self.records[&a]
            .capacity
            .bandwidth
            .min(self.records[&b].capacity.bandwidth);
        let link = Link {
            latency,
            bandwidth: bw,
        };
        self.adj.entry(a).or_default().insert(b, link);
        self.adj.entry(b).or_default().insert(a, link);
        self.version += 1;
    }

    /// Bring a node online without creating any links; for hand-built
    /// topologies.
    pub fn insert_online(&mut self, mut record: NodeRecord, now: SimTime) -> Result<(), OverlayError> {
        if self.adj.contains_key(&record.id) {
            return Err(OverlayError::DuplicateJoin(record.id));
        }
        record.online = true;
        let id = record.id;
        self.records.insert(id, record);
        self.online_since.insert(id, now);
        self.adj.insert(id, BTreeMap::new());
        self.refresh_fingerprint(id);
        self.version += 1;
        Ok(())
    }

    /// Add (or replace) a link between two online nodes.
    pub fn connect(&mut self, a: NodeId, b: NodeId, latency: u64) -> Result<(), OverlayError> {
        for n in [a, b] {
            if !self.adj.contains_key(&n) {
                return Err(OverlayError::Offline(n));
            }
        }
        if a != b {
            self.link_unchecked(a, b, latency);
            self.refresh_fingerprint(a);
            self.refresh_fingerprint(b);
        }
        Ok(())
    }

    fn refresh_fingerprint(&mut self, id: NodeId) {
        let set: BTreeSet<NodeId> = self
            .adj
            .get(&id)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default();
        self.fingerprints.insert(id, PositionFingerprint::of(&set));
    }

    fn online_in<'a>(&'a self, region: Region) -> impl Iterator<Item = NodeId> + 'a {
        self.adj
            .keys()
            .copied()
            .filter(move |id| self.records[id].region == region)
    }

    /// Link `id` to up to `want` random online nodes that are not yet its
    /// neighbours, preferring its own region when `same_region`.
    fn attach(&mut self, id: NodeId, want: usize, same_region: bool) -> Vec<NodeId> {
        if want == 0 {
            return Vec::new();
        }
        let region = self.records[&id].region;
        let existing = &self.adj[&id];
        let candidates: Vec<NodeId> = self
            .adj
            .keys()
            .copied()
            .filter(|c| *c != id && !existing.contains_key(c))
            .filter(|c| (self.records[c].region == region) == same_region)
            .collect();
        let picked = self.rng.sample(&candidates, want);
        for &p in &picked {
            let lat = self.draw_latency(same_region);
            self.link_unchecked(id, p, lat);
        }
        picked
    }

    pub fn join(&mut self, mut record: NodeRecord, now: SimTime) -> Result<MembershipDelta, OverlayError> {
        if self.adj.contains_key(&record.id) {
            return Err(OverlayError::DuplicateJoin(record.id));
        }
        let id = record.id;
        record.online = true;
        record.trust_links.remove(&id);
        self.records.insert(id, record);
        self.online_since.insert(id, now);
        self.adj.insert(id, BTreeMap::new());

        let mut changed = BTreeSet::from([id]);
        let local = self.attach(id, self.cfg.degree, true);
        let short = self.cfg.min_degree.saturating_sub(local.len());
        let remote = self.attach(id, self.cfg.inter_region_links.max(short), false);
        changed.extend(local);
        changed.extend(remote);
        for n in &changed {
            self.refresh_fingerprint(*n);
        }
        self.counters.joins += 1;
        self.version += 1;
        Ok(MembershipDelta {
            changed,
            flagged: Vec::new(),
        })
    }

    pub fn leave(&mut self, id: NodeId, _now: SimTime) -> Result<MembershipDelta, OverlayError> {
        let Some(links) = self.adj.remove(&id) else {
            return Err(OverlayError::UnknownLeave(id));
        };
        self.online_since.remove(&id);
        self.fingerprints.remove(&id);
        if let Some(r) = self.records.get_mut(&id) {
            r.online = false;
        }
        let mut changed: BTreeSet<NodeId> = links.keys().copied().collect();
        for n in links.keys() {
            if let Some(m) = self.adj.get_mut(n) {
                m.remove(&id);
            }
        }
        // Neighbours that fell below the minimum degree re-attach.
        for n in links.keys().copied().collect::<Vec<_>>() {
            let deg = self.adj[&n].len();
            if deg < self.cfg.min_degree {
                let need = self.cfg.min_degree - deg;
                let mut got = self.attach(n, need, true);
                if got.len() < need {
                    got.extend(self.attach(n, need - got.len(), false));
                }
                self.counters.repair_links += got.len() as u64;
                changed.extend(got);
            }
        }
        for n in &changed {
            self.refresh_fingerprint(*n);
        }
        let mut flagged = Vec::new();
        for (region, sp) in &self.dvsps {
            if sp.members.contains(&id) {
                flagged.push(*region);
            }
        }
        self.flagged.extend(flagged.iter().copied());
        self.counters.leaves += 1;
        self.version += 1;
        Ok(MembershipDelta { changed, flagged })
    }

    pub fn is_online(&self, id: &NodeId) -> bool {
        self.adj.contains_key(id)
    }

    pub fn record(&self, id: &NodeId) -> Option<&NodeRecord> {
        self.records.get(id)
    }

    pub fn records(&self) -> impl Iterator<Item = &NodeRecord> {
        self.records.values()
    }

    pub fn online_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.adj.keys().copied()
    }

    pub fn online_count(&self) -> usize {
        self.adj.len()
    }

    pub fn online_in_region(&self, region: Region) -> Vec<NodeId> {
        self.online_in(region).collect()
    }

    pub fn regions(&self) -> BTreeSet<Region> {
        self.records.values().map(|r| r.region).collect()
    }

    pub fn neighbors(&self, id: &NodeId) -> BTreeSet<NodeId> {
        self.adj
            .get(id)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn degree(&self, id: &NodeId) -> usize {
        self.adj.get(id).map_or(0, |m| m.len())
    }

    pub fn fingerprint(&self, id: &NodeId) -> Option<PositionFingerprint> {
        self.fingerprints.get(id).copied()
    }

    pub fn uptime(&self, id: &NodeId, now: SimTime) -> Option<u64> {
        self.online_since.get(id).map(|s| now.saturating_sub(*s))
    }

    pub fn topology_version(&self) -> u64 {
        self.version
    }

    /// Every online node reaches every other over online links.
    pub fn is_connected(&self) -> bool {
        self.is_connected_without(None)
    }

    /// Connectivity of the online graph with `removed` taken out.
    pub fn is_connected_without(&self, removed: Option<NodeId>) -> bool {
        let mut nodes = self.adj.keys().filter(|n| Some(**n) != removed);
        let Some(&start) = nodes.next() else {
            return true;
        };
        let total = self.adj.len() - usize::from(removed.is_some_and(|r| self.adj.contains_key(&r)));
        let mut seen = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some(n) = stack.pop() {
            for m in self.adj[&n].keys() {
                if Some(*m) != removed && seen.insert(*m) {
                    stack.push(*m);
                }
            }
        }
        seen.len() == total
    }

    fn shortest_paths(&mut self, from: NodeId) -> Rc<ShortestPaths> {
        if self.paths_version != self.version {
            self.paths.clear();
            self.paths_version = self.version;
        }
        if let Some(p) = self.paths.get(&from) {
            return Rc::clone(p);
        }
        let mut dist: HashMap<NodeId, (u64, u64)> = HashMap::new();
        let mut heap = BinaryHeap::new();
        dist.insert(from, (0, u64::MAX));
        heap.push(Reverse((0u64, from)));
        while let Some(Reverse((d, n))) = heap.pop() {
            if dist[&n].0 < d {
                continue;
            }
            let bottleneck = dist[&n].1;
            for (m, link) in &self.adj[&n] {
                let nd = d + link.latency;
                let better = match dist.get(m) {
                    None => true,
                    Some(&(old, _)) => nd < old,
                };
                if better {
                    dist.insert(*m, (nd, bottleneck.min(link.bandwidth)));
                    heap.push(Reverse((nd, *m)));
                }
            }
        }
        let p = Rc::new(ShortestPaths { dist });
        self.paths.insert(from, Rc::clone(&p));
        p
    }

    /// Ticks needed to move `size` bandwidth units from `from` to `to` along
    /// the lowest-latency path: summed hop latency plus `size / bottleneck`.
    pub fn path_delay(&mut self, from: NodeId, to: NodeId, size: u64) -> Result<u64, OverlayError> {
        if !self.is_online(&from) {
            return Err(OverlayError::Offline(from));
        }
        if from == to {
            return Ok(0);
        }
        if !self.is_online(&to) {
            return Err(OverlayError::Unreachable(to));
        }
        let paths = self.shortest_paths(from);
        let &(lat, bottleneck) = paths.dist.get(&to).ok_or(OverlayError::Unreachable(to))?;
        if size == 0 {
            return Ok(lat);
        }
        if bottleneck == 0 {
            return Err(OverlayError::Unreachable(to));
        }
        Ok(lat + size.div_ceil(bottleneck))
    }

    pub fn route(
        &mut self,
        from: NodeId,
        to: NodeId,
        size: u64,
        now: SimTime,
    ) -> Result<SimTime, OverlayError> {
        self.path_delay(from, to, size).map(|d| now + d)
    }

    /// Bottleneck bandwidth on the lowest-latency path.
    pub fn path_bandwidth(&mut self, from: NodeId, to: NodeId) -> Option<u64> {
        if from == to {
            return self.records.get(&from).map(|r| r.capacity.bandwidth);
        }
        if !self.is_online(&from) || !self.is_online(&to) {
            return None;
        }
        self.shortest_paths(from).dist.get(&to).map(|d| d.1)
    }
}

#[cfg(test)]
mod tests;
