//! Service repository, budgeted invocation and replica placement.
//!
//! Descriptors and code live in the replicated store under
//! `dsr:<service>@<version>`. A request is priced from the declared cost,
//! runs on the nearest warm instance (pulling one into existence when there
//! is none), and is metered against its declared budget: any resource over
//! budget terminates it at the point of exhaustion and it pays only for the
//! fraction it consumed. Push placement adds replicas where traffic comes
//! from and retires them after a cool-down once traffic moves away.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{RngStream, SimTime};
use crate::evolution::VersionId;
use crate::ledger::{Ledger, LedgerOp, MarketPrice, TransferReason};
use crate::overlay::{NodeId, Overlay, OverlayError, Region};
use crate::replication::{ObjectKey, Payload, ReplicatedStore, ReplicationError};
use crate::resource_repo::{RepoError, ResourceQuery, ResourceRepo, Weights};
use crate::resources::{ResourceKind, Resources};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServiceError {
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("unknown service {0}")]
    UnknownService(ServiceId),
    #[error("{account:?} cannot cover price {price}")]
    InsufficientFunds { account: NodeId, price: u64 },
    #[error("no host resolvable for {0}")]
    Unreachable(ServiceId),
    #[error(transparent)]
    Replication(#[from] ReplicationError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ServiceId(pub String);

impl ServiceId {
    pub fn new(s: impl Into<String>) -> Self {
        ServiceId(s.into())
    }
}

impl fmt::Display for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceDescriptor {
    pub service_id: ServiceId,
    pub version: VersionId,
    /// Per-request budget.
    pub declared_cost: Resources,
    /// Currency units per request paid by the developer.
    pub subsidy: u64,
    pub code_size: u64,
    pub min_replicas: usize,
}

impl ServiceDescriptor {
    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.min_replicas == 0 {
            return Err(ServiceError::InvalidDescriptor(format!(
                "{}: min_replicas must be at least 1",
                self.service_id
            )));
        }
        if self.service_id.0.is_empty() {
            return Err(ServiceError::InvalidDescriptor("empty service id".into()));
        }
        Ok(())
    }

    pub fn dsr_key(&self) -> ObjectKey {
        ObjectKey(format!("dsr:{}@{}", self.service_id, self.version))
    }
}

/// The account that funds a service's subsidy.
pub fn developer_account(svc: &ServiceId) -> NodeId {
    NodeId::for_account(&format!("dev:{svc}"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ServiceInstance {
    pub service_id: ServiceId,
    pub host: NodeId,
    pub region: Region,
    pub warm: bool,
    pub served_count: u64,
    pub deployed_at: SimTime,
    /// Code has arrived and requests can start.
    pub ready_at: SimTime,
    deploy_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Request {
    pub id: u64,
    pub requester: NodeId,
    pub service_id: ServiceId,
    pub actual_cost: Resources,
    pub issued_at: SimTime,
}

/// What a request costs and who pays which part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Quote {
    pub gross: u64,
    pub subsidy_part: u64,
    /// Requester's share: `gross - subsidy_part`.
    pub net: u64,
}

impl Quote {
    fn from_parts(gross: u64, subsidy_part: u64) -> Self {
        let subsidy_part = subsidy_part.min(gross);
        Quote {
            gross,
            subsidy_part,
            net: gross - subsidy_part,
        }
    }

    /// Pro-rata share for a request stopped after consuming `m.num/m.den`
    /// of its work. Rounds the gross up and the subsidy down.
    pub fn partial(&self, m: &Metering) -> Quote {
        if !m.terminated {
            return *self;
        }
        let gross = ((self.gross as u128 * m.num as u128).div_ceil(m.den as u128)) as u64;
        let subsidy = (self.subsidy_part as u128 * m.num as u128 / m.den as u128) as u64;
        Quote::from_parts(gross, subsidy)
    }
}

/// `gross = ceil(declared . prices)`, subsidy capped at the gross.
pub fn quote(desc: &ServiceDescriptor, prices: &MarketPrice) -> Quote {
    Quote::from_parts(prices.cost_of(&desc.declared_cost), desc.subsidy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Metering {
    pub terminated: bool,
    /// Fraction of the actual work done before the first budget ran out.
    pub num: u64,
    pub den: u64,
}

/// Meter `actual` against `declared`: terminated iff some resource exceeds
/// its budget, at the earliest exhaustion point over those resources.
pub fn meter(declared: &Resources, actual: &Resources) -> Metering {
    let mut m = Metering {
        terminated: false,
        num: 1,
        den: 1,
    };
    for k in ResourceKind::ALL {
        let (d, a) = (declared.get(k), actual.get(k));
        if a > d {
            let first = !m.terminated;
            // d/a < num/den
            if first || (d as u128) * (m.den as u128) < (m.num as u128) * (a as u128) {
                m = Metering {
                    terminated: true,
                    num: d,
                    den: a,
                };
            }
        }
    }
    m
}

/// Ledger ops settling `q` for work done by `host`. Zero-sum moves the
/// requester's and developer's shares to the host; with minting the host
/// is paid from the treasury and both shares are burned.
pub fn settlement_ops(
    requester: NodeId,
    host: NodeId,
    developer: NodeId,
    q: &Quote,
    minting: bool,
) -> Vec<LedgerOp> {
    let mut ops = Vec::new();
    if minting {
        if q.gross > 0 {
            ops.push(LedgerOp::Mint {
                to: host,
                amount: q.gross,
                reason: TransferReason::HostingReward,
            });
        }
        if q.net > 0 {
            ops.push(LedgerOp::Burn {
                from: requester,
                amount: q.net,
                reason: TransferReason::ServicePayment,
            });
        }
        if q.subsidy_part > 0 {
            ops.push(LedgerOp::Burn {
                from: developer,
                amount: q.subsidy_part,
                reason: TransferReason::Subsidy,
            });
        }
    } else {
        if q.net > 0 {
            ops.push(LedgerOp::Transfer {
                from: requester,
                to: host,
                amount: q.net,
                reason: TransferReason::ServicePayment,
            });
        }
        if q.subsidy_part > 0 {
            ops.push(LedgerOp::Transfer {
                from: developer,
                to: host,
                amount: q.subsidy_part,
                reason: TransferReason::Subsidy,
            });
        }
    }
    ops
}

/// FIFO service lanes of one host, one per compute unit of capacity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostLanes {
    free_at: Vec<SimTime>,
}

impl HostLanes {
    pub fn new(lanes: u64) -> Self {
        HostLanes {
            free_at: vec![SimTime::ZERO; lanes.max(1) as usize],
        }
    }

    pub fn lanes(&self) -> usize {
        self.free_at.len()
    }

    /// Start and finish of a job arriving at `arrival` lasting `duration`.
    pub fn admit(&mut self, arrival: SimTime, duration: u64) -> (SimTime, SimTime) {
        let (i, free) = self
            .free_at
            .iter()
            .copied()
            .enumerate()
            .min_by_key(|&(i, t)| (t, i))
            .expect("at least one lane");
        let start = if free > arrival { free } else { arrival };
        let end = start + duration;
        self.free_at[i] = end;
        (start, end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementConfig {
    /// Traffic-driven deployment; when off only the replica floor is kept.
    pub push: bool,
    /// Replicas per whole share of a service's traffic.
    pub kappa: u64,
    /// Consecutive surplus windows before a replica is retired.
    pub cooldown_windows: u32,
    /// Ticks between placement ticks; traffic is counted per window.
    pub window: u64,
    /// Replication factor of repository entries.
    pub r_dsr: usize,
    /// Downloading peers forward code to further peers.
    pub repeaters: bool,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        PlacementConfig {
            push: true,
            kappa: 4,
            cooldown_windows: 3,
            window: 10_000,
            r_dsr: 3,
            repeaters: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementAction {
    Deploy,
    Pull,
    Retire,
    Lost,
    Shortfall,
}

impl fmt::Display for PlacementAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlacementAction::Deploy => "deploy",
            PlacementAction::Pull => "pull",
            PlacementAction::Retire => "retire",
            PlacementAction::Lost => "lost",
            PlacementAction::Shortfall => "shortfall",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlacementRecord {
    pub at: SimTime,
    pub service_id: ServiceId,
    pub action: PlacementAction,
    pub host: Option<NodeId>,
    pub region: Option<Region>,
}

/// A request accepted for execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Dispatch {
    pub request_id: u64,
    pub host: NodeId,
    pub host_epoch: u64,
    pub quote: Quote,
    pub metering: Metering,
    /// Amount actually owed: the quote scaled by the metering.
    pub owed: Quote,
    pub start: SimTime,
    pub finish: SimTime,
    /// Response payload size.
    pub response_size: u64,
    pub pulled: bool,
}

/// A content push over a distribution tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub parent: BTreeMap<NodeId, NodeId>,
    pub arrival: BTreeMap<NodeId, SimTime>,
    pub egress: BTreeMap<NodeId, u64>,
}

impl Delivery {
    pub fn egress_of(&self, node: &NodeId) -> u64 {
        self.egress.get(node).copied().unwrap_or(0)
    }
}

/// Deliver `size` units from `origin` to `consumers`. With repeaters the
/// consumers form a binary tree under the origin (consumer `i` is fed by
/// position `(i-1)/2` of `[origin, consumers..]`); without, the origin
/// sends every copy. A consumer the tree parent cannot reach is fed by
/// the origin.
pub fn distribute(
    origin: NodeId,
    consumers: &[NodeId],
    size: u64,
    repeaters: bool,
    overlay: &mut Overlay,
    now: SimTime,
) -> Result<Delivery, OverlayError> {
    let mut d = Delivery {
        parent: BTreeMap::new(),
        arrival: BTreeMap::new(),
        egress: BTreeMap::new(),
    };
    d.arrival.insert(origin, now);
    let order: Vec<NodeId> = std::iter::once(origin).chain(consumers.iter().copied()).collect();
    for (i, c) in order.iter().enumerate().skip(1) {
        let tree_parent = if repeaters { order[(i - 1) / 2] } else { origin };
        let (p, delay) = match d.arrival.contains_key(&tree_parent) {
            true => match overlay.path_delay(tree_parent, *c, size) {
                Ok(x) => (tree_parent, x),
                Err(_) => (origin, overlay.path_delay(origin, *c, size)?),
            },
            false => (origin, overlay.path_delay(origin, *c, size)?),
        };
        let at = d.arrival[&p] + delay;
        d.parent.insert(*c, p);
        d.arrival.insert(*c, at);
        *d.egress.entry(p).or_default() += size;
    }
    Ok(d)
}

/// Default placement profile for service instances.
pub fn instance_weights() -> Weights {
    Weights::new(300, 400, 100, 200)
}

const DEPLOY_ATTEMPTS: usize = 5;

#[derive(Debug, Clone)]
pub struct ServiceLayer {
    cfg: PlacementConfig,
    catalog: BTreeMap<ServiceId, ServiceDescriptor>,
    instances: BTreeMap<ServiceId, Vec<ServiceInstance>>,
    traffic: BTreeMap<ServiceId, BTreeMap<Region, u64>>,
    surplus_streak: BTreeMap<(ServiceId, Region), u32>,
    lanes: BTreeMap<NodeId, HostLanes>,
    host_epoch: BTreeMap<NodeId, u64>,
    reserved: BTreeMap<NodeId, Resources>,
    placements: Vec<PlacementRecord>,
    egress: BTreeMap<NodeId, u64>,
    deploy_seq: u64,
    shortfalls: u64,
    rng: RngStream,
}

impl ServiceLayer {
    pub fn new(cfg: PlacementConfig, rng: RngStream) -> Self {
        ServiceLayer {
            cfg,
            catalog: BTreeMap::new(),
            instances: BTreeMap::new(),
            traffic: BTreeMap::new(),
            surplus_streak: BTreeMap::new(),
            lanes: BTreeMap::new(),
            host_epoch: BTreeMap::new(),
            reserved: BTreeMap::new(),
            placements: Vec::new(),
            egress: BTreeMap::new(),
            deploy_seq: 0,
            shortfalls: 0,
            rng,
        }
    }

    pub fn config(&self) -> &PlacementConfig {
        &self.cfg
    }

    pub fn descriptor(&self, svc: &ServiceId) -> Option<&ServiceDescriptor> {
        self.catalog.get(svc)
    }

    pub fn catalog(&self) -> impl Iterator<Item = &ServiceDescriptor> {
        self.catalog.values()
    }

    pub fn instances(&self, svc: &ServiceId) -> &[ServiceInstance] {
        self.instances.get(svc).map_or(&[], |v| v.as_slice())
    }

    pub fn warm_count(&self, svc: &ServiceId, overlay: &Overlay) -> usize {
        self.instances(svc)
            .iter()
            .filter(|i| i.warm && overlay.is_online(&i.host))
            .count()
    }

    pub fn placements(&self) -> &[PlacementRecord] {
        &self.placements
    }

    pub fn shortfalls(&self) -> u64 {
        self.shortfalls
    }

    pub fn egress(&self) -> &BTreeMap<NodeId, u64> {
        &self.egress
    }

    /// Resources held on `node` by instances.
    pub fn reserved(&self, node: &NodeId) -> Resources {
        self.reserved.get(node).copied().unwrap_or(Resources::ZERO)
    }

    pub fn host_epoch(&self, node: &NodeId) -> u64 {
        self.host_epoch.get(node).copied().unwrap_or(0)
    }

    fn log(&mut self, at: SimTime, svc: &ServiceId, action: PlacementAction, host: Option<NodeId>, region: Option<Region>) {
        self.placements.push(PlacementRecord {
            at,
            service_id: svc.clone(),
            action,
            host,
            region,
        });
    }

    /// Store the descriptor and code in the repository and deploy the
    /// replica floor. Publishing the same version again is a no-op.
    /// Returns whether a new entry was created.
    pub fn publish(
        &mut self,
        desc: ServiceDescriptor,
        store: &mut ReplicatedStore,
        repo: &mut ResourceRepo,
        overlay: &mut Overlay,
        now: SimTime,
    ) -> Result<bool, ServiceError> {
        desc.validate()?;
        let key = desc.dsr_key();
        if store.contains(&key) {
            return Ok(false);
        }
        store.create_placed(key.clone(), self.cfg.r_dsr, desc.code_size, None, repo, now)?;
        let bytes = serde_json::to_vec(&desc).expect("descriptor serialises");
        let dev = developer_account(&desc.service_id);
        store.put_all(&key, Payload::plain(bytes, dev, desc.code_size), dev, now)?;
        let svc = desc.service_id.clone();
        self.catalog.insert(svc.clone(), desc);
        self.ensure_floor(&svc, store, repo, overlay, now);
        Ok(true)
    }

    /// Pin an instance on a given host, outside the placement policy.
    pub fn pin(&mut self, svc: &ServiceId, host: NodeId, overlay: &Overlay, now: SimTime) -> Result<(), ServiceError> {
        let desc = self
            .catalog
            .get(svc)
            .ok_or_else(|| ServiceError::UnknownService(svc.clone()))?
            .clone();
        let region = overlay
            .record(&host)
            .map(|r| r.region)
            .ok_or_else(|| ServiceError::Unreachable(svc.clone()))?;
        self.add_instance(&desc, host, region, now, now);
        Ok(())
    }

    /// Resolve the current descriptor of `svc` from the repository as seen
    /// from `from`. Returns the descriptor and the replica that served it.
    pub fn resolve(
        &self,
        svc: &ServiceId,
        from: NodeId,
        store: &mut ReplicatedStore,
        overlay: &mut Overlay,
    ) -> Result<(ServiceDescriptor, NodeId), ServiceError> {
        let key = self
            .catalog
            .get(svc)
            .ok_or_else(|| ServiceError::UnknownService(svc.clone()))?
            .dsr_key();
        let (holder, payload) = store
            .get(&key, from, overlay)
            .map_err(|_| ServiceError::Unreachable(svc.clone()))?;
        let payload = payload.ok_or_else(|| ServiceError::Unreachable(svc.clone()))?;
        let desc = serde_json::from_slice(&payload.bytes).expect("stored descriptor parses");
        Ok((desc, holder))
    }

    fn add_instance(&mut self, desc: &ServiceDescriptor, host: NodeId, region: Region, now: SimTime, ready_at: SimTime) {
        self.deploy_seq += 1;
        self.instances
            .entry(desc.service_id.clone())
            .or_default()
            .push(ServiceInstance {
                service_id: desc.service_id.clone(),
                host,
                region,
                warm: true,
                served_count: 0,
                deployed_at: now,
                ready_at,
                deploy_seq: self.deploy_seq,
            });
        *self.reserved.entry(host).or_default() += Resources::new(0, desc.code_size, 0);
    }

    fn release_reservation(&mut self, host: &NodeId, code_size: u64) {
        if let Some(r) = self.reserved.get_mut(host) {
            *r = r.saturating_sub(&Resources::new(0, code_size, 0));
        }
    }

    /// Pick hosts for `count` new instances and ship code to them.
    #[allow(clippy::too_many_arguments)]
    fn deploy(
        &mut self,
        svc: &ServiceId,
        count: usize,
        region: Option<Region>,
        strict: bool,
        action: PlacementAction,
        store: &mut ReplicatedStore,
        repo: &mut ResourceRepo,
        overlay: &mut Overlay,
        now: SimTime,
    ) -> Vec<NodeId> {
        let Some(desc) = self.catalog.get(svc).cloned() else {
            return Vec::new();
        };
        let mut hosts: Vec<NodeId> = Vec::new();
        let mut exclude: Vec<NodeId> = self.instances(svc).iter().map(|i| i.host).collect();
        for _ in 0..DEPLOY_ATTEMPTS {
            let need = count - hosts.len();
            if need == 0 {
                break;
            }
            let base = ResourceQuery::new(Resources::new(1, desc.code_size, 0), need, instance_weights())
                .excluding(exclude.iter().copied());
            let q = match (region, strict) {
                (Some(r), true) => base.only_region(r),
                (r, _) => base.in_region(r),
            };
            let picked = match repo.query(&q, now, &mut self.rng) {
                Ok(p) => p,
                Err(RepoError::Insufficient { available, .. }) => available,
                Err(_) => Vec::new(),
            };
            if picked.is_empty() {
                break;
            }
            for h in picked {
                exclude.push(h);
                // A record can still look fresh for a while after its node left.
                if overlay.is_online(&h) {
                    hosts.push(h);
                }
            }
        }
        if hosts.is_empty() {
            return hosts;
        }
        // Ship code from the nearest repository replica of the first host.
        let key = desc.dsr_key();
        let Ok((holder, _)) = store.nearest_replica(&key, hosts[0], overlay) else {
            return Vec::new();
        };
        let consumers: Vec<NodeId> = hosts.iter().copied().filter(|h| *h != holder).collect();
        let Ok(delivery) = distribute(holder, &consumers, desc.code_size, self.cfg.repeaters, overlay, now) else {
            return Vec::new();
        };
        for (n, e) in &delivery.egress {
            *self.egress.entry(*n).or_default() += e;
        }
        for h in &hosts {
            let region = overlay.record(h).map(|r| r.region).unwrap_or(Region(0));
            let ready = delivery.arrival.get(h).copied().unwrap_or(now);
            self.add_instance(&desc, *h, region, now, ready);
            self.log(now, svc, action, Some(*h), Some(region));
            let free = repo
                .get(h)
                .map(|r| r.free_capacity.saturating_sub(&Resources::new(0, desc.code_size, 0)));
            if let Some(free) = free {
                repo.adjust_free(h, free);
            }
        }
        hosts
    }

    fn shortfall(&mut self, svc: &ServiceId, region: Option<Region>, now: SimTime) {
        self.shortfalls += 1;
        self.log(now, svc, PlacementAction::Shortfall, None, region);
    }

    /// Deploy until `svc` has `min_replicas` warm instances or no eligible
    /// host is left.
    pub fn ensure_floor(
        &mut self,
        svc: &ServiceId,
        store: &mut ReplicatedStore,
        repo: &mut ResourceRepo,
        overlay: &mut Overlay,
        now: SimTime,
    ) {
        let Some(min) = self.catalog.get(svc).map(|d| d.min_replicas) else {
            return;
        };
        let warm = self.warm_count(svc, overlay);
        if warm >= min {
            return;
        }
        let got = self.deploy(svc, min - warm, None, false, PlacementAction::Deploy, store, repo, overlay, now);
        if warm + got.len() < min {
            self.shortfall(svc, None, now);
        }
    }

    /// Accept `req` for execution: check funds, pick or pull an instance,
    /// queue the job on the host's lanes.
    #[allow(clippy::too_many_arguments)]
    pub fn dispatch(
        &mut self,
        req: &Request,
        ledger: Option<&Ledger>,
        prices: &MarketPrice,
        store: &mut ReplicatedStore,
        repo: &mut ResourceRepo,
        overlay: &mut Overlay,
        now: SimTime,
    ) -> Result<Dispatch, ServiceError> {
        let svc = &req.service_id;
        let desc = self
            .catalog
            .get(svc)
            .ok_or_else(|| ServiceError::UnknownService(svc.clone()))?
            .clone();
        let q = quote(&desc, prices);
        if let Some(ledger) = ledger {
            let ok = ledger.account(&req.requester).is_some_and(|a| a.can_pay(q.net));
            if !ok {
                return Err(ServiceError::InsufficientFunds {
                    account: req.requester,
                    price: q.net,
                });
            }
        }
        if let Some(r) = overlay.record(&req.requester).map(|r| r.region) {
            *self.traffic.entry(svc.clone()).or_default().entry(r).or_default() += 1;
        }
        let mut pulled = false;
        let mut best = self.nearest_instance(svc, req.requester, overlay);
        if best.is_none() {
            // Pull: resolve the entry, then place an instance near the requester.
            self.resolve(svc, req.requester, store, overlay)?;
            let region = overlay.record(&req.requester).map(|r| r.region);
            self.deploy(svc, 1, region, false, PlacementAction::Pull, store, repo, overlay, now);
            best = self.nearest_instance(svc, req.requester, overlay);
            pulled = true;
        }
        let (idx, delay) = best.ok_or_else(|| ServiceError::Unreachable(svc.clone()))?;
        let inst = &mut self.instances.get_mut(svc).unwrap()[idx];
        inst.served_count += 1;
        let (host, ready_at) = (inst.host, inst.ready_at);
        let metering = meter(&desc.declared_cost, &req.actual_cost);
        let done = |x: u64| (x as u128 * metering.num as u128).div_ceil(metering.den as u128) as u64;
        let duration = done(req.actual_cost.compute).max(1);
        let response_size = done(req.actual_cost.bandwidth);
        let arrival = (now + delay).max(ready_at);
        let cores = overlay.record(&host).map_or(1, |r| r.capacity.compute);
        let (start, finish) = self
            .lanes
            .entry(host)
            .or_insert_with(|| HostLanes::new(cores))
            .admit(arrival, duration);
        Ok(Dispatch {
            request_id: req.id,
            host,
            host_epoch: self.host_epoch(&host),
            quote: q,
            metering,
            owed: q.partial(&metering),
            start,
            finish,
            response_size,
            pulled,
        })
    }

    /// Index and request-path delay of the warm instance of `svc` closest to
    /// `from`; ties by host id.
    pub fn nearest_instance(&self, svc: &ServiceId, from: NodeId, overlay: &mut Overlay) -> Option<(usize, u64)> {
        let mut best: Option<(u64, NodeId, usize)> = None;
        for (i, inst) in self.instances(svc).iter().enumerate() {
            if !inst.warm || !overlay.is_online(&inst.host) {
                continue;
            }
            if let Ok(d) = overlay.path_delay(from, inst.host, 0) {
                if best.is_none_or(|b| (d, inst.host) < (b.0, b.1)) {
                    best = Some((d, inst.host, i));
                }
            }
        }
        best.map(|(d, _, i)| (i, d))
    }

    /// `node` went offline: its instances and queued work are gone. Each
    /// affected service is brought back to its floor at once.
    pub fn on_host_down(
        &mut self,
        node: NodeId,
        store: &mut ReplicatedStore,
        repo: &mut ResourceRepo,
        overlay: &mut Overlay,
        now: SimTime,
    ) {
        *self.host_epoch.entry(node).or_default() += 1;
        self.lanes.remove(&node);
        self.reserved.remove(&node);
        let mut affected = Vec::new();
        let mut lost = Vec::new();
        for (svc, list) in self.instances.iter_mut() {
            let before = list.len();
            list.retain(|i| {
                if i.host == node {
                    lost.push((svc.clone(), i.region));
                }
                i.host != node
            });
            if list.len() != before {
                affected.push(svc.clone());
            }
        }
        for (svc, region) in lost {
            self.log(now, &svc, PlacementAction::Lost, Some(node), Some(region));
        }
        for svc in affected {
            self.ensure_floor(&svc, store, repo, overlay, now);
        }
    }

    /// Per-region replica targets for `svc` given this window's traffic.
    ///
    /// The floor of `min_replicas` stays where the oldest live instances
    /// already are; any part of it not covered by live instances goes round
    /// robin over regions by descending traffic. Push adds
    /// `ceil(kappa * share)` per region on top.
    pub fn targets(
        &self,
        svc: &ServiceId,
        traffic: &BTreeMap<Region, u64>,
        regions: &[Region],
        overlay: &Overlay,
    ) -> BTreeMap<Region, usize> {
        let min = self.catalog.get(svc).map_or(0, |d| d.min_replicas);
        let mut out: BTreeMap<Region, usize> = regions.iter().map(|r| (*r, 0)).collect();
        let mut live: Vec<&ServiceInstance> = self
            .instances(svc)
            .iter()
            .filter(|i| overlay.is_online(&i.host))
            .collect();
        live.sort_by_key(|i| i.deploy_seq);
        for i in live.iter().take(min) {
            *out.entry(i.region).or_default() += 1;
        }
        let mut order: Vec<Region> = regions.to_vec();
        order.sort_by_key(|r| (std::cmp::Reverse(traffic.get(r).copied().unwrap_or(0)), *r));
        if !order.is_empty() {
            for i in 0..min.saturating_sub(live.len()) {
                *out.get_mut(&order[i % order.len()]).unwrap() += 1;
            }
        }
        let total: u64 = traffic.values().sum();
        if self.cfg.push && total > 0 {
            for (r, t) in out.iter_mut() {
                let share = traffic.get(r).copied().unwrap_or(0);
                let want = (self.cfg.kappa as u128 * share as u128).div_ceil(total as u128) as usize;
                *t = (*t).max(want);
            }
        }
        out
    }

    /// End of a traffic window: deploy towards the per-region targets and
    /// retire replicas that have been surplus for the cool-down period.
    pub fn placement_tick(
        &mut self,
        store: &mut ReplicatedStore,
        repo: &mut ResourceRepo,
        overlay: &mut Overlay,
        now: SimTime,
    ) {
        let traffic = std::mem::take(&mut self.traffic);
        let regions: Vec<Region> = overlay.regions().into_iter().collect();
        let services: Vec<ServiceId> = self.catalog.keys().cloned().collect();
        for svc in services {
            if !self.cfg.push {
                self.ensure_floor(&svc, store, repo, overlay, now);
                continue;
            }
            let empty = BTreeMap::new();
            let targets = self.targets(&svc, traffic.get(&svc).unwrap_or(&empty), &regions, overlay);
            for (region, target) in targets {
                let current = self
                    .instances(&svc)
                    .iter()
                    .filter(|i| i.region == region && overlay.is_online(&i.host))
                    .count();
                if current < target {
                    self.surplus_streak.remove(&(svc.clone(), region));
                    let got = self.deploy(&svc, target - current, Some(region), true, PlacementAction::Deploy, store, repo, overlay, now);
                    if current + got.len() < target {
                        self.shortfall(&svc, Some(region), now);
                    }
                } else if current > target {
                    let streak = self.surplus_streak.entry((svc.clone(), region)).or_default();
                    *streak += 1;
                    if *streak >= self.cfg.cooldown_windows {
                        self.surplus_streak.remove(&(svc.clone(), region));
                        self.retire(&svc, region, current - target, overlay, now);
                    }
                } else {
                    self.surplus_streak.remove(&(svc.clone(), region));
                }
            }
            self.ensure_floor(&svc, store, repo, overlay, now);
        }
    }

    /// Retire up to `n` instances of `svc` in `region`, newest first,
    /// never going below the floor.
    fn retire(&mut self, svc: &ServiceId, region: Region, n: usize, overlay: &Overlay, now: SimTime) {
        let (min, size) = match self.catalog.get(svc) {
            Some(d) => (d.min_replicas, d.code_size),
            None => return,
        };
        for _ in 0..n {
            if self.warm_count(svc, overlay) <= min {
                break;
            }
            let list = self.instances.get_mut(svc).unwrap();
            let Some(pos) = list
                .iter()
                .enumerate()
                .filter(|(_, i)| i.region == region && overlay.is_online(&i.host))
                .max_by_key(|(_, i)| i.deploy_seq)
                .map(|(p, _)| p)
            else {
                break;
            };
            let inst = list.remove(pos);
            self.release_reservation(&inst.host, size);
            self.log(now, svc, PlacementAction::Retire, Some(inst.host), Some(region));
        }
    }
}

pub fn write_placements_csv<W: std::io::Write>(log: &[PlacementRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["at", "service_id", "action", "host", "region"])?;
    for p in log {
        w.write_record([
            p.at.ticks().to_string(),
            p.service_id.to_string(),
            p.action.to_string(),
            p.host.map(|h| h.to_hex()).unwrap_or_default(),
            p.region.map(|r| r.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
