//! One simulated run: the community (or the vendor baseline) driven by a
//! scenario's workload and failures.

use std::collections::BTreeMap;

use super::audit::{self, Violation};
use super::config::{Mode, ScenarioConfig, Target, TrustKind};
use super::logs::*;
use super::metrics;
use super::workload::{self, WorkItem, WorkKind};
use crate::engine::{EventKind, RngStream, Scheduler, SimTime};
use crate::evolution::{trust_ring, Evolution, TrustGraph, VersionId, VersionNode};
use crate::ledger::{Ledger, LedgerOp, Market, MarketPrice, Price, TransferReason};
use crate::overlay::{generate_identity, NodeId, NodeRecord, Overlay, Region, TxOutcome, UptimeSchedule};
use crate::replication::{ObjectKey, Payload, ReplicatedStore, ReplicationError};
use crate::resource_repo::{NodeResourceRecord, RepoConfig, ResourceRepo};
use crate::resources::Resources;
use crate::services::{
    developer_account, settlement_ops, Dispatch, Quote, Request, ServiceDescriptor, ServiceError, ServiceId,
    ServiceLayer,
};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Ev {
    Work(usize),
    ExecDone(u64),
    VideoCheck(u64),
    Gossip,
    Placement,
    Market,
    ChurnDown(usize, u64),
    ChurnUp(usize, u64),
    Kill(usize),
    Restore(usize),
    Release(usize, usize),
}

impl EventKind for Ev {
    fn kind(&self) -> &'static str {
        match self {
            Ev::Work(_) => "work",
            Ev::ExecDone(_) => "exec-done",
            Ev::VideoCheck(_) => "video-check",
            Ev::Gossip => "gossip",
            Ev::Placement => "placement",
            Ev::Market => "market",
            Ev::ChurnDown(..) => "churn-down",
            Ev::ChurnUp(..) => "churn-up",
            Ev::Kill(_) => "kill",
            Ev::Restore(_) => "restore",
            Ev::Release(..) => "release",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Victim {
    Pop(usize),
    Vendor,
}

#[derive(Debug, Clone)]
struct Session {
    requester: NodeId,
    service: ServiceId,
    host: Option<NodeId>,
    epoch: u64,
    end: u64,
    last_check: u64,
    below_since: Option<u64>,
    delivered: u64,
    expected: u64,
    switches: u64,
    owed: Quote,
    start: u64,
}

/// Resource use since the last price update.
#[derive(Debug, Clone, Default)]
struct Usage {
    compute: u64,
    bandwidth: u64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: serde_json::Value,
    pub logs: Logs,
    pub meta: RunMeta,
    pub violations: Vec<Violation>,
    pub events: BTreeMap<String, u64>,
}

impl RunOutput {
    /// Canonical report text: sorted keys, two-space indent, trailing newline.
    pub fn report_json(&self) -> String {
        serde_json::to_string_pretty(&self.report).expect("report serialises") + "\n"
    }

    pub fn report_csv(&self) -> String {
        metrics::to_csv(&self.report)
    }
}

pub struct World {
    cfg: ScenarioConfig,
    sched: Scheduler<Ev>,
    overlay: Overlay,
    repo: ResourceRepo,
    ledger: Option<Ledger>,
    market: Market,
    store: ReplicatedStore,
    services: ServiceLayer,
    evolution: Option<Evolution>,
    nodes: Vec<NodeId>,
    records: Vec<NodeRecord>,
    regions: Vec<u16>,
    vendor: Option<NodeRecord>,
    churn: Vec<Option<UptimeSchedule>>,
    churn_rng: Vec<RngStream>,
    churn_gen: Vec<u64>,
    killed: Vec<u32>,
    vendor_killed: u32,
    victims: BTreeMap<usize, Vec<Victim>>,
    fail_rng: RngStream,
    release_rng: RngStream,
    link_rng: RngStream,
    latest: BTreeMap<ServiceId, VersionId>,
    work: Vec<WorkItem>,
    rows: Vec<Option<RequestRow>>,
    inflight: BTreeMap<u64, Dispatch>,
    sessions: BTreeMap<u64, Session>,
    on_host: BTreeMap<NodeId, u64>,
    status: BTreeMap<ServiceId, bool>,
    usage: Usage,
    logs: Logs,
}

/// Version ids are global to the adoption model, so they carry the service.
pub fn version_id(service: &str, version: &str) -> VersionId {
    VersionId::new(format!("{service}@{version}"))
}

fn page_key(page: u64) -> ObjectKey {
    ObjectKey::new(format!("page:{page}"))
}

impl World {
    /// Build the initial state and schedule every scripted event. The
    /// config must already be valid.
    pub fn new(cfg: &ScenarioConfig) -> World {
        let cfg = cfg.clone();
        let seed = cfg.seed;
        let vendor_mode = cfg.mode == Mode::Vendor;
        let regions = workload::population_regions(&cfg);
        let n = regions.len();

        let mut id_rng = RngStream::new(seed, "identities");
        let nodes: Vec<NodeId> = (0..n).map(|_| generate_identity(&mut id_rng)).collect();
        let mut records = Vec::with_capacity(n);
        let mut churn = Vec::with_capacity(n);
        {
            let mut i = 0;
            for class in &cfg.population.classes {
                let sched = if class.mean_online > 0 && cfg.failures.churn_multiplier > 0.0 {
                    Some(UptimeSchedule {
                        mean_online: class.mean_online as f64 / cfg.failures.churn_multiplier,
                        mean_offline: class.mean_offline as f64,
                    })
                } else {
                    None
                };
                for _ in 0..class.count {
                    let mut r = NodeRecord::new(nodes[i], class.capacity, Region(regions[i]));
                    if let Some(s) = sched {
                        r.uptime_schedule = s;
                    }
                    records.push(r);
                    churn.push(sched);
                    i += 1;
                }
            }
        }

        let mut overlay = Overlay::new(cfg.topology.overlay_config(), RngStream::new(seed, "overlay"));
        let mut link_rng = RngStream::new(seed, "vendor-links");
        let mut repo = ResourceRepo::new(RepoConfig {
            heartbeat_interval: cfg.topology.gossip_interval,
            ..RepoConfig::default()
        });
        let mut logs = Logs::default();
        let vendor = if vendor_mode {
            let v = NodeRecord::new(NodeId::for_account("vendor"), cfg.vendor.capacity, Region(cfg.vendor.region));
            overlay.insert_online(v.clone(), SimTime::ZERO).expect("fresh overlay");
            for r in &records {
                overlay.insert_online(r.clone(), SimTime::ZERO).expect("distinct ids");
                let lat = star_latency(&cfg, r.region, v.region, &mut link_rng);
                overlay.connect(r.id, v.id, lat).expect("both online");
            }
            repo.register(NodeResourceRecord::new(v.id, v.region, v.capacity, 1), SimTime::ZERO);
            logs.membership.push(MembershipRow {
                at: 0,
                node: v.id,
                event: "join",
                compute: v.capacity.compute,
                serving: 1,
            });
            Some(v)
        } else {
            overlay.bootstrap(records.clone(), SimTime::ZERO);
            for r in &records {
                repo.register(NodeResourceRecord::new(r.id, r.region, r.capacity, 1), SimTime::ZERO);
                logs.membership.push(MembershipRow {
                    at: 0,
                    node: r.id,
                    event: "join",
                    compute: r.capacity.compute,
                    serving: 1,
                });
            }
            for sp in overlay.dvsps() {
                logs.dvsp.push(DvspRow {
                    at: 0,
                    region: sp.region.0,
                    epoch: sp.epoch,
                    size: sp.size(),
                });
            }
            None
        };

        let ledger = if vendor_mode {
            None
        } else {
            let mut l = Ledger::new();
            let mut i = 0;
            for class in &cfg.population.classes {
                for _ in 0..class.count {
                    l.open_account(nodes[i], class.opening_balance, class.credit_limit)
                        .expect("distinct ids");
                    i += 1;
                }
            }
            for s in &cfg.services {
                l.open_account(developer_account(&ServiceId::new(&s.id)), s.developer_balance, 0)
                    .expect("distinct developers");
            }
            Some(l)
        };
        let market = Market::new(
            cfg.market.params(),
            MarketPrice::uniform(Price::from_units(cfg.market.initial)),
        );

        let mut placement = cfg.placement;
        if vendor_mode {
            placement.push = false;
            placement.r_dsr = 1;
        }
        let mut store = ReplicatedStore::new(RngStream::new(seed, "replication"));
        let mut services = ServiceLayer::new(placement, RngStream::new(seed, "services"));
        for s in &cfg.services {
            let desc = ServiceDescriptor {
                service_id: ServiceId::new(&s.id),
                version: VersionId::new(&s.version),
                declared_cost: s.declared,
                subsidy: s.subsidy,
                code_size: s.code_size,
                min_replicas: if vendor_mode { 1 } else { s.min_replicas },
            };
            services
                .publish(desc, &mut store, &mut repo, &mut overlay, SimTime::ZERO)
                .expect("validated descriptor");
        }
        if let Some(w) = &cfg.workload.wiki {
            let r = if vendor_mode { 1 } else { cfg.replication.r };
            let dev = developer_account(&ServiceId::new(&w.service));
            for p in 0..w.pages {
                let key = page_key(p);
                if store
                    .create_placed(key.clone(), r, w.page_size, None, &repo, SimTime::ZERO)
                    .is_ok()
                {
                    let body = Payload::plain(format!("page {p} v0"), dev, w.page_size);
                    let _ = store.put_all(&key, body, dev, SimTime::ZERO);
                }
            }
        }

        let mut latest = BTreeMap::new();
        let evolution = if vendor_mode {
            None
        } else {
            let trust: TrustGraph = match cfg.evolution.trust {
                TrustKind::Ring => trust_ring(&nodes, &mut RngStream::new(seed, "trust")),
                TrustKind::None => TrustGraph::new(),
            };
            let mut e = Evolution::new(trust, cfg.evolution.theta);
            for s in &cfg.services {
                let root = VersionNode {
                    version_id: version_id(&s.id, &s.version),
                    parent: None,
                    service_id: ServiceId::new(&s.id),
                    fitness: s.fitness,
                    released_at: SimTime::ZERO,
                };
                e.install(root, nodes.iter().copied()).expect("distinct versions");
                latest.insert(ServiceId::new(&s.id), version_id(&s.id, &s.version));
            }
            Some(e)
        };

        let work = workload::generate(&cfg);
        let churn_rng = (0..n).map(|i| RngStream::new(seed, &format!("churn:{i}"))).collect();
        let mut w = World {
            sched: Scheduler::new(),
            overlay,
            repo,
            ledger,
            market,
            store,
            services,
            evolution,
            records,
            regions,
            vendor,
            churn,
            churn_rng,
            churn_gen: vec![0; n],
            killed: vec![0; n],
            vendor_killed: 0,
            victims: BTreeMap::new(),
            fail_rng: RngStream::new(seed, "failures"),
            release_rng: RngStream::new(seed, "releases"),
            link_rng,
            latest,
            rows: vec![None; work.len()],
            work,
            inflight: BTreeMap::new(),
            sessions: BTreeMap::new(),
            on_host: BTreeMap::new(),
            status: BTreeMap::new(),
            usage: Usage::default(),
            logs,
            nodes,
            cfg,
        };
        w.update_status();
        w.schedule_initial();
        w
    }

    fn schedule_initial(&mut self) {
        let at = |t: u64| SimTime(t);
        for (i, e) in self.cfg.failures.events.iter().enumerate() {
            self.sched.schedule(at(e.at), Ev::Kill(i)).unwrap();
            if let Some(u) = e.until {
                self.sched.schedule(at(u), Ev::Restore(i)).unwrap();
            }
        }
        if self.cfg.mode == Mode::Community {
            for (s, spec) in self.cfg.services.iter().enumerate() {
                for (r, rel) in spec.releases.iter().enumerate() {
                    self.sched.schedule(at(rel.at), Ev::Release(s, r)).unwrap();
                }
            }
            self.sched.schedule(at(self.cfg.market.update_interval), Ev::Market).unwrap();
        }
        self.sched.schedule(at(self.cfg.topology.gossip_interval), Ev::Gossip).unwrap();
        self.sched.schedule(at(self.cfg.placement.window), Ev::Placement).unwrap();
        for i in 0..self.nodes.len() {
            if let Some(s) = self.churn[i] {
                let d = s.next_online(&mut self.churn_rng[i]);
                self.sched.schedule(at(d), Ev::ChurnDown(i, 0)).unwrap();
            }
        }
        for i in 0..self.work.len() {
            self.sched.schedule(at(self.work[i].at), Ev::Work(i)).unwrap();
        }
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn now(&self) -> SimTime {
        self.sched.now()
    }

    pub fn overlay(&self) -> &Overlay {
        &self.overlay
    }

    pub fn repo(&self) -> &ResourceRepo {
        &self.repo
    }

    pub fn store(&self) -> &ReplicatedStore {
        &self.store
    }

    pub fn services(&self) -> &ServiceLayer {
        &self.services
    }

    pub fn ledger(&self) -> Option<&Ledger> {
        self.ledger.as_ref()
    }

    pub fn evolution(&self) -> Option<&Evolution> {
        self.evolution.as_ref()
    }

    /// Population identities in scenario order.
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    /// Process every event up to and including `until`.
    pub fn run_until(&mut self, until: SimTime) {
        while let Some((_, _, ev)) = self.sched.next_event(until) {
            self.handle(ev);
        }
    }

    /// Take a population node down outside the failure script; it stays
    /// down for the rest of the run.
    pub fn kill_node(&mut self, id: NodeId) {
        if let Some(i) = self.nodes.iter().position(|n| *n == id) {
            self.killed[i] += 1;
            self.churn_gen[i] += 1;
            if self.overlay.is_online(&id) {
                self.go_down(Victim::Pop(i));
            }
            self.update_status();
        }
    }

    pub fn run(mut self) -> RunOutput {
        self.run_until(SimTime(self.cfg.horizon));
        self.finish()
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Work(i) => self.on_work(i),
            Ev::ExecDone(id) => self.on_exec_done(id),
            Ev::VideoCheck(id) => self.on_video_check(id),
            Ev::Gossip => self.on_gossip(),
            Ev::Placement => {
                let now = self.now();
                self.services
                    .placement_tick(&mut self.store, &mut self.repo, &mut self.overlay, now);
                self.update_status();
                self.sched.schedule_in(self.cfg.placement.window, Ev::Placement);
            }
            Ev::Market => self.on_market(),
            Ev::ChurnDown(i, gen) => {
                if gen == self.churn_gen[i] {
                    self.go_down(Victim::Pop(i));
                    self.update_status();
                    let d = self.churn[i].unwrap().next_offline(&mut self.churn_rng[i]);
                    self.sched.schedule_in(d, Ev::ChurnUp(i, gen));
                }
            }
            Ev::ChurnUp(i, gen) => {
                if gen == self.churn_gen[i] {
                    self.go_up(Victim::Pop(i));
                    self.update_status();
                    let d = self.churn[i].unwrap().next_online(&mut self.churn_rng[i]);
                    self.sched.schedule_in(d, Ev::ChurnDown(i, gen));
                }
            }
            Ev::Kill(e) => self.on_kill(e),
            Ev::Restore(e) => self.on_restore(e),
            Ev::Release(s, r) => self.on_release(s, r),
        }
    }

    fn victim_id(&self, v: Victim) -> NodeId {
        match v {
            Victim::Pop(i) => self.nodes[i],
            Victim::Vendor => self.vendor.as_ref().expect("vendor mode").id,
        }
    }

    fn go_down(&mut self, v: Victim) {
        let id = self.victim_id(v);
        let now = self.now();
        if self.overlay.leave(id, now).is_err() {
            return;
        }
        let serving = self.cfg.mode == Mode::Community || v == Victim::Vendor;
        if serving {
            let compute = self.overlay.record(&id).map_or(0, |r| r.capacity.compute);
            self.logs.membership.push(MembershipRow {
                at: now.ticks(),
                node: id,
                event: "leave",
                compute,
                serving: 1,
            });
            self.services
                .on_host_down(id, &mut self.store, &mut self.repo, &mut self.overlay, now);
        }
    }

    fn go_up(&mut self, v: Victim) {
        let id = self.victim_id(v);
        if self.overlay.is_online(&id) {
            return;
        }
        let now = self.now();
        match (self.cfg.mode, v) {
            (Mode::Community, Victim::Pop(i)) => {
                let _ = self.overlay.join(self.records[i].clone(), now);
            }
            (_, Victim::Pop(i)) => {
                let r = self.records[i].clone();
                let _ = self.overlay.insert_online(r.clone(), now);
                if let Some(vr) = self.vendor.clone() {
                    if self.overlay.is_online(&vr.id) {
                        let lat = star_latency(&self.cfg, r.region, vr.region, &mut self.link_rng);
                        let _ = self.overlay.connect(r.id, vr.id, lat);
                    }
                }
            }
            (_, Victim::Vendor) => {
                let vr = self.vendor.clone().expect("vendor mode");
                let _ = self.overlay.insert_online(vr.clone(), now);
                for r in self.records.clone() {
                    if self.overlay.is_online(&r.id) {
                        let lat = star_latency(&self.cfg, r.region, vr.region, &mut self.link_rng);
                        let _ = self.overlay.connect(r.id, vr.id, lat);
                    }
                }
            }
        }
        let serving = self.cfg.mode == Mode::Community || v == Victim::Vendor;
        if serving {
            let compute = self.overlay.record(&id).map_or(0, |r| r.capacity.compute);
            self.logs.membership.push(MembershipRow {
                at: now.ticks(),
                node: id,
                event: "join",
                compute,
                serving: 1,
            });
        }
    }

    fn resolve_target(&mut self, t: &Target) -> Vec<Victim> {
        match t {
            Target::Node(i) => vec![Victim::Pop(*i)],
            Target::Region(r) => (0..self.nodes.len())
                .filter(|i| self.regions[*i] == *r)
                .map(Victim::Pop)
                .collect(),
            Target::Random(f) => {
                let k = libm::round(f * self.nodes.len() as f64) as usize;
                let all: Vec<usize> = (0..self.nodes.len()).collect();
                let mut picked = self.fail_rng.sample(&all, k);
                picked.sort_unstable();
                picked.into_iter().map(Victim::Pop).collect()
            }
            Target::Vendor => vec![Victim::Vendor],
        }
    }

    fn on_kill(&mut self, e: usize) {
        let ev = self.cfg.failures.events[e].clone();
        let target = match self.cfg.mode {
            Mode::Vendor => ev.vendor_target.as_ref().unwrap_or(&ev.target),
            Mode::Community => &ev.target,
        };
        let victims = self.resolve_target(target);
        for v in &victims {
            match *v {
                Victim::Pop(i) => {
                    self.killed[i] += 1;
                    self.churn_gen[i] += 1;
                }
                Victim::Vendor => self.vendor_killed += 1,
            }
            if self.overlay.is_online(&self.victim_id(*v)) {
                self.go_down(*v);
            }
        }
        self.victims.insert(e, victims);
        self.update_status();
    }

    fn on_restore(&mut self, e: usize) {
        let victims = self.victims.remove(&e).unwrap_or_default();
        for v in victims {
            let free = match v {
                Victim::Pop(i) => {
                    self.killed[i] -= 1;
                    self.killed[i] == 0
                }
                Victim::Vendor => {
                    self.vendor_killed -= 1;
                    self.vendor_killed == 0
                }
            };
            if !free {
                continue;
            }
            self.go_up(v);
            if let Victim::Pop(i) = v {
                if let Some(s) = self.churn[i] {
                    let d = s.next_online(&mut self.churn_rng[i]);
                    let gen = self.churn_gen[i];
                    self.sched.schedule_in(d, Ev::ChurnDown(i, gen));
                }
            }
        }
        self.update_status();
    }

    fn on_release(&mut self, s: usize, r: usize) {
        let spec = self.cfg.services[s].clone();
        let rel = spec.releases[r].clone();
        let svc = ServiceId::new(&spec.id);
        let Some(evo) = self.evolution.as_mut() else {
            return;
        };
        let online: Vec<NodeId> = self
            .nodes
            .iter()
            .copied()
            .filter(|n| self.overlay.is_online(n))
            .collect();
        let origins = self.release_rng.sample(&online, rel.origins);
        let parent = rel
            .parent
            .map(|p| version_id(&spec.id, &p))
            .or_else(|| self.latest.get(&svc).cloned());
        let v = VersionNode {
            version_id: version_id(&spec.id, &rel.version),
            parent,
            service_id: svc.clone(),
            fitness: rel.fitness,
            released_at: self.sched.now(),
        };
        let overlay = &self.overlay;
        if evo
            .release(v, &origins, |n| overlay.is_online(n), self.sched.now())
            .is_ok()
        {
            self.latest.insert(svc, version_id(&spec.id, &rel.version));
        }
    }

    fn base_row(&self, item: &WorkItem) -> RequestRow {
        let declared = self
            .cfg
            .service(&item.service)
            .map_or(Resources::ZERO, |s| s.declared);
        RequestRow {
            id: item.id,
            kind: item.kind.as_str(),
            service: item.service.clone(),
            requester: item.requester,
            region: self.regions[item.requester],
            issued_at: item.at,
            outcome: Outcome::Pending,
            host: None,
            start: None,
            finish: None,
            completed_at: None,
            executed: 0,
            declared_compute: declared.compute,
            declared_storage: declared.storage,
            declared_bandwidth: declared.bandwidth,
            actual_compute: item.actual.compute,
            actual_storage: item.actual.storage,
            actual_bandwidth: item.actual.bandwidth,
            terminated: 0,
            pulled: 0,
            gross: 0,
            net: 0,
            subsidy: 0,
            debit: 0,
            credit: 0,
            subsidy_paid: 0,
            settled: 0,
            page: item.page,
        }
    }

    fn on_work(&mut self, i: usize) {
        let item = self.work[i].clone();
        let mut row = self.base_row(&item);
        let requester = self.nodes[item.requester];
        let now = self.now();
        if !self.overlay.is_online(&requester) {
            row.outcome = Outcome::Offline;
            self.rows[i] = Some(row);
            return;
        }
        let req = Request {
            id: item.id,
            requester,
            service_id: ServiceId::new(&item.service),
            actual_cost: item.actual,
            issued_at: now,
        };
        let res = self.services.dispatch(
            &req,
            self.ledger.as_ref(),
            self.market.prices(),
            &mut self.store,
            &mut self.repo,
            &mut self.overlay,
            now,
        );
        match res {
            Err(ServiceError::InsufficientFunds { .. }) => row.outcome = Outcome::RejectedFunds,
            Err(_) => row.outcome = Outcome::Unavailable,
            Ok(d) => {
                row.host = Some(d.host);
                row.start = Some(d.start.ticks());
                row.finish = Some(d.finish.ticks());
                row.terminated = d.metering.terminated as u8;
                row.pulled = d.pulled as u8;
                row.gross = d.owed.gross;
                row.net = d.owed.net;
                row.subsidy = d.owed.subsidy_part;
                self.usage.compute += d.finish - d.start;
                self.usage.bandwidth += d.response_size;
                if d.pulled {
                    self.update_status();
                }
                if item.kind == WorkKind::Video {
                    self.start_session(&item, requester, &d);
                } else {
                    self.sched.schedule(d.finish, Ev::ExecDone(item.id)).unwrap();
                    self.inflight.insert(item.id, d);
                }
            }
        }
        self.rows[i] = Some(row);
    }

    /// Storage step of a wiki request at `host`. Returns the extra delay or
    /// the failed outcome.
    fn wiki_io(&mut self, item: &WorkItem, host: NodeId) -> Result<u64, Outcome> {
        let Some(page) = item.page else {
            return Ok(0);
        };
        let size = self.cfg.workload.wiki.as_ref().map_or(1, |w| w.page_size);
        let key = page_key(page);
        let now = self.now();
        let (replica, there) = self
            .store
            .nearest_replica(&key, host, &mut self.overlay)
            .map_err(|_| Outcome::StorageUnavailable)?;
        match item.kind {
            WorkKind::WikiRead => {
                match self.store.read_at(&key, &replica, host) {
                    Ok(_) => {}
                    Err(ReplicationError::PrivacyViolation { .. }) => return Err(Outcome::PrivacyDenied),
                    Err(_) => return Err(Outcome::StorageUnavailable),
                }
                let back = self
                    .overlay
                    .path_delay(replica, host, size)
                    .map_err(|_| Outcome::StorageUnavailable)?;
                Ok(there + back)
            }
            _ => {
                let requester = self.nodes[item.requester];
                let body = Payload::plain(format!("page {page} r{}", item.id), requester, size);
                let ack = self
                    .store
                    .put(&key, body, host, &mut self.overlay, now)
                    .map_err(|_| Outcome::StorageUnavailable)?;
                let up = self
                    .overlay
                    .path_delay(host, ack.replica, size)
                    .map_err(|_| Outcome::StorageUnavailable)?;
                Ok(up + there)
            }
        }
    }

    fn on_exec_done(&mut self, id: u64) {
        let Some(d) = self.inflight.remove(&id) else {
            return;
        };
        let idx = id as usize;
        let item = self.work[idx].clone();
        let mut row = self.rows[idx].take().expect("issued");
        let now = self.now();
        let host = d.host;
        if !self.overlay.is_online(&host) || self.services.host_epoch(&host) != d.host_epoch {
            row.outcome = Outcome::HostFailed;
            let _ = self.repo.record_task(&host, false);
            self.rows[idx] = Some(row);
            return;
        }
        row.executed = 1;
        let requester = self.nodes[item.requester];
        let mut outcome = if d.metering.terminated {
            Outcome::Terminated
        } else {
            Outcome::Completed
        };
        let mut extra = 0;
        if !d.metering.terminated {
            match self.wiki_io(&item, host) {
                Ok(x) => extra = x,
                Err(o) => outcome = o,
            }
        }
        let _ = self.repo.record_task(&host, true);
        let back = if self.overlay.is_online(&requester) {
            self.overlay.path_delay(host, requester, d.response_size).ok()
        } else {
            None
        };
        match back {
            None => outcome = Outcome::Abandoned,
            Some(b) => {
                row.completed_at = Some(now.ticks() + extra + b);
                let svc = ServiceId::new(&item.service);
                self.settle(&mut row, requester, host, &svc, d.owed);
            }
        }
        row.outcome = outcome;
        self.rows[idx] = Some(row);
    }

    /// Settle `owed` for work `host` did for `requester` through the
    /// super-peer of the host's region, and record what actually moved.
    fn settle(&mut self, row: &mut RequestRow, requester: NodeId, host: NodeId, svc: &ServiceId, owed: Quote) {
        let minting = self.cfg.market.minting;
        let Some(ledger) = self.ledger.as_mut() else {
            return;
        };
        if owed.gross == 0 {
            return;
        }
        let ops: Vec<LedgerOp> = settlement_ops(requester, host, developer_account(svc), &owed, minting);
        let region = self.overlay.record(&host).map_or(Region(0), |r| r.region);
        let Some(sp) = self.overlay.coordinator_for(region).cloned() else {
            return;
        };
        let now = self.sched.now();
        if let Ok(TxOutcome::Commit(moved)) = self.overlay.execute_transaction(&sp, &ops, ledger, now) {
            row.settled = 1;
            for t in moved {
                match t.reason {
                    TransferReason::ServicePayment => row.debit += t.amount,
                    TransferReason::Subsidy => row.subsidy_paid += t.amount,
                    TransferReason::HostingReward => row.credit += t.amount,
                }
                if !t.is_mint() && !t.is_burn() && t.to == host {
                    row.credit += t.amount;
                }
            }
        }
    }

    fn start_session(&mut self, item: &WorkItem, requester: NodeId, d: &Dispatch) {
        let v = self.cfg.workload.video.clone().expect("video workload");
        let start = d.finish.ticks();
        *self.on_host.entry(d.host).or_default() += 1;
        self.sessions.insert(
            item.id,
            Session {
                requester,
                service: ServiceId::new(&item.service),
                host: Some(d.host),
                epoch: d.host_epoch,
                end: start + v.duration,
                last_check: start,
                below_since: None,
                delivered: 0,
                expected: 0,
                switches: 0,
                owed: d.owed,
                start,
            },
        );
        let first = start + v.check_interval.min(v.duration);
        self.sched.schedule(SimTime(first), Ev::VideoCheck(item.id)).unwrap();
    }

    fn release_host(&mut self, host: Option<NodeId>) {
        if let Some(h) = host {
            if let Some(c) = self.on_host.get_mut(&h) {
                *c -= 1;
                if *c == 0 {
                    self.on_host.remove(&h);
                }
            }
        }
    }

    fn on_video_check(&mut self, id: u64) {
        let v = self.cfg.workload.video.clone().expect("video workload");
        let now = self.now().ticks();
        let Some(mut s) = self.sessions.remove(&id) else {
            return;
        };
        if !self.overlay.is_online(&s.requester) {
            self.release_host(s.host);
            return self.end_session(id, s, Outcome::Abandoned, now);
        }
        let alive = s
            .host
            .is_some_and(|h| self.overlay.is_online(&h) && self.services.host_epoch(&h) == s.epoch);
        if !alive {
            self.release_host(s.host.take());
            let svc = s.service.clone();
            if let Some((i, _)) = self.services.nearest_instance(&svc, s.requester, &mut self.overlay) {
                let h = self.services.instances(&svc)[i].host;
                s.host = Some(h);
                s.epoch = self.services.host_epoch(&h);
                s.switches += 1;
                *self.on_host.entry(h).or_default() += 1;
            }
        }
        let rate = match s.host {
            Some(h) => {
                let path = self.overlay.path_bandwidth(h, s.requester).unwrap_or(0);
                let cap = self.overlay.record(&h).map_or(0, |r| r.capacity.bandwidth);
                let share = cap / self.on_host.get(&h).copied().unwrap_or(1).max(1);
                v.bitrate.min(path).min(share)
            }
            None => 0,
        };
        let span = now - s.last_check;
        s.delivered += rate * span;
        s.expected += v.bitrate * span;
        if (rate as f64) < v.floor * v.bitrate as f64 {
            let since = *s.below_since.get_or_insert(s.last_check);
            if now - since >= v.sustain {
                self.release_host(s.host);
                return self.end_session(id, s, Outcome::Degraded, now);
            }
        } else {
            s.below_since = None;
        }
        s.last_check = now;
        if now >= s.end {
            self.release_host(s.host);
            return self.end_session(id, s, Outcome::Completed, now);
        }
        let next = (now + v.check_interval).min(s.end);
        self.sched.schedule(SimTime(next), Ev::VideoCheck(id)).unwrap();
        self.sessions.insert(id, s);
    }

    fn end_session(&mut self, id: u64, s: Session, outcome: Outcome, now: u64) {
        let v = self.cfg.workload.video.as_ref().expect("video workload");
        self.logs.sessions.push(SessionRow {
            id,
            start: s.start,
            end: now,
            outcome,
            bitrate: v.bitrate,
            delivered: s.delivered,
            expected: s.expected,
            switches: s.switches,
        });
        let idx = id as usize;
        let mut row = self.rows[idx].take().expect("issued");
        row.outcome = outcome;
        if outcome != Outcome::Pending {
            row.executed = 1;
            row.completed_at = Some(now);
        }
        if outcome == Outcome::Completed {
            if let Some(h) = s.host {
                self.settle(&mut row, s.requester, h, &s.service, s.owed);
            }
        }
        self.rows[idx] = Some(row);
    }

    fn on_gossip(&mut self) {
        let now = self.now();
        let serving: Vec<(NodeId, Resources)> = match &self.vendor {
            Some(v) => vec![(v.id, v.capacity)],
            None => self.records.iter().map(|r| (r.id, r.capacity)).collect(),
        };
        for (id, cap) in serving {
            if self.overlay.is_online(&id) {
                let free = cap.saturating_sub(&self.services.reserved(&id));
                let _ = self.repo.heartbeat(&id, free, now);
            } else {
                let _ = self.repo.missed(&id);
            }
        }
        if self.cfg.mode == Mode::Community {
            for sp in self.overlay.maintain_dvsps(now) {
                self.logs.dvsp.push(DvspRow {
                    at: now.ticks(),
                    region: sp.region.0,
                    epoch: sp.epoch,
                    size: sp.size(),
                });
            }
            for region in self.overlay.regions() {
                let lost = self
                    .overlay
                    .dvsp(region)
                    .is_none_or(|sp| !self.overlay.has_quorum(sp));
                self.repo.set_region_lost(region, lost);
            }
        }
        self.store.gossip_round(&self.overlay, now);
        self.store.rereplicate(&self.overlay, &self.repo, now);
        if let Some(evo) = self.evolution.as_mut() {
            let overlay = &self.overlay;
            evo.tick(|n| overlay.is_online(n), now);
        }
        self.update_status();
        self.sched.schedule_in(self.cfg.topology.gossip_interval, Ev::Gossip);
    }

    fn on_market(&mut self) {
        let interval = self.cfg.market.update_interval;
        let mut supply = Resources::ZERO;
        for r in &self.records {
            if self.overlay.is_online(&r.id) {
                supply += Resources::new(
                    r.capacity.compute * interval,
                    r.capacity.storage,
                    r.capacity.bandwidth * interval,
                );
            }
        }
        let stored: u64 = self
            .store
            .keys()
            .filter_map(|k| self.store.replica_set(k))
            .map(|s| s.size * s.hosts.len() as u64)
            .sum();
        let usage = std::mem::take(&mut self.usage);
        let demand = Resources::new(usage.compute, stored, usage.bandwidth);
        let prices = self.market.update_prices(&demand, &supply);
        let unit = prices.cost_of(&Resources::new(1, 1, 1));
        let ids: Vec<NodeId> = self.repo.records().map(|r| r.id).collect();
        for id in ids {
            let _ = self.repo.set_projected_cost(&id, unit);
        }
        self.sched.schedule_in(interval, Ev::Market);
    }

    fn update_status(&mut self) {
        let now = self.sched.now().ticks();
        let ids: Vec<ServiceId> = self.services.catalog().map(|d| d.service_id.clone()).collect();
        for svc in ids {
            let up = self.services.warm_count(&svc, &self.overlay) > 0;
            if self.status.get(&svc) != Some(&up) {
                self.status.insert(svc.clone(), up);
                self.logs.status.push(StatusRow {
                    at: now,
                    service: svc.0.clone(),
                    available: up as u8,
                });
            }
        }
    }

    fn finish(mut self) -> RunOutput {
        let horizon = self.cfg.horizon;
        for (id, s) in std::mem::take(&mut self.sessions) {
            self.end_session(id, s, Outcome::Pending, horizon);
        }
        self.logs.sessions.sort_by_key(|s| s.id);
        let mut logs = std::mem::take(&mut self.logs);
        logs.requests = self.rows.iter().map(|r| r.clone().expect("every item fires")).collect();
        logs.writes = self
            .store
            .writes()
            .iter()
            .map(|w| WriteRow {
                key: w.key.0.clone(),
                writer: w.writer,
                seq: w.seq,
                written_at: w.written_at.ticks(),
                agreed_at: w.agreed_at.map(|t| t.ticks()),
                rounds: w.rounds_after_quiescence,
            })
            .collect();
        if let Some(l) = &self.ledger {
            logs.transfers = l.log().to_vec();
            let closing = l.balances();
            logs.accounts = l
                .opening_balances()
                .iter()
                .map(|(o, b)| AccountRow {
                    owner: *o,
                    opening: *b,
                    closing: closing[o],
                })
                .collect();
        }
        logs.placements = self.services.placements().to_vec();
        if let Some(e) = &self.evolution {
            logs.adoptions = e.log().to_vec();
        }
        logs.egress = self
            .services
            .egress()
            .iter()
            .map(|(n, b)| EgressRow { node: *n, bytes: *b })
            .collect();
        let meta = RunMeta {
            scenario: self.cfg.name.clone(),
            mode: self.cfg.mode.to_string(),
            seed: self.cfg.seed,
            horizon,
            population: self.nodes.len(),
            outage: self.cfg.failures.outage,
            root_versions: self
                .cfg
                .services
                .iter()
                .map(|s| (s.id.clone(), version_id(&s.id, &s.version).0))
                .collect(),
        };
        let report = metrics::compute(&logs, &meta);
        let violations = audit::run(&audit::Subject {
            logs: &logs,
            report: &report,
            ledger: self.ledger.as_ref(),
            store: &self.store,
            services: &self.services,
            overlay: &self.overlay,
            evolution: self.evolution.as_ref(),
        });
        RunOutput {
            report,
            logs,
            meta,
            violations,
            events: self.sched.summary().per_kind.clone(),
        }
    }
}

fn star_latency(cfg: &ScenarioConfig, a: Region, b: Region, rng: &mut RngStream) -> u64 {
    let [lo, hi] = if a == b {
        cfg.topology.intra_latency
    } else {
        cfg.topology.inter_latency
    };
    rng.range_inclusive(lo, hi)
}
