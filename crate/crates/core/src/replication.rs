//! Replicated key-value store with version vectors and anti-entropy gossip.
//!
//! Writes land on the writer's nearest online replica and spread by
//! push-pull exchanges between random replica pairs. The merge keeps the
//! state with the greatest [`Stamp`] and joins the version vectors. Stamps
//! only grow along causal history (a put always stamps above the state it
//! overwrites), so a dominating version vector always carries the greater
//! stamp, and concurrent states resolve last-writer-wins on
//! `(wall time, writer id)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{RngStream, SimTime};
use crate::overlay::{NodeId, Overlay, Region};
use crate::resource_repo::{RepoError, ResourceQuery, ResourceRepo, Weights};
use crate::resources::Resources;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReplicationError {
    #[error("writer {0:?} is offline")]
    Offline(NodeId),
    #[error("no online replica of {0}")]
    Unreachable(ObjectKey),
    #[error("unknown key {0}")]
    UnknownKey(ObjectKey),
    #[error("{reader:?} may not read encrypted {key}")]
    PrivacyViolation { key: ObjectKey, reader: NodeId },
    #[error("no host available for {0}")]
    NoHosts(ObjectKey),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectKey(pub String);

impl ObjectKey {
    pub fn new(s: impl Into<String>) -> Self {
        ObjectKey(s.into())
    }
}

impl fmt::Display for ObjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Opaque value. Encrypted payloads may only be read by their owner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    pub bytes: Vec<u8>,
    pub encrypted: bool,
    pub owner: NodeId,
    /// Storage units the value occupies.
    pub size: u64,
}

impl Payload {
    pub fn plain(bytes: impl Into<Vec<u8>>, owner: NodeId, size: u64) -> Self {
        Payload {
            bytes: bytes.into(),
            encrypted: false,
            owner,
            size,
        }
    }

    pub fn encrypted(bytes: impl Into<Vec<u8>>, owner: NodeId, size: u64) -> Self {
        Payload {
            bytes: bytes.into(),
            encrypted: true,
            owner,
            size,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionVector(BTreeMap<NodeId, u64>);

impl VersionVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: &NodeId) -> u64 {
        self.0.get(id).copied().unwrap_or(0)
    }

    pub fn set(&mut self, id: NodeId, counter: u64) {
        self.0.insert(id, counter);
    }

    /// Every entry of `self` is at least the matching entry of `other`.
    pub fn dominates(&self, other: &VersionVector) -> bool {
        other.0.iter().all(|(k, v)| self.get(k) >= *v)
    }

    pub fn concurrent(&self, other: &VersionVector) -> bool {
        !self.dominates(other) && !other.dominates(self)
    }

    pub fn join(&self, other: &VersionVector) -> VersionVector {
        let mut out = self.clone();
        for (k, v) in &other.0 {
            let e = out.0.entry(*k).or_default();
            *e = (*e).max(*v);
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &u64)> {
        self.0.iter()
    }
}

/// Last-writer stamp; ordered by wall time, then writer id, then the
/// writer's own sequence number.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Stamp {
    pub time: SimTime,
    pub writer: NodeId,
    pub seq: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicatedObject {
    pub value: Option<Payload>,
    pub vv: VersionVector,
    pub wall: Stamp,
}

impl ReplicatedObject {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn size(&self) -> u64 {
        self.value.as_ref().map_or(0, |p| p.size)
    }
}

/// The merge rule. Commutative, associative and idempotent.
pub fn merge(a: &ReplicatedObject, b: &ReplicatedObject) -> ReplicatedObject {
    let winner = if b.wall > a.wall { b } else { a };
    ReplicatedObject {
        value: winner.value.clone(),
        vv: a.vv.join(&b.vv),
        wall: winner.wall,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaSet {
    pub hosts: Vec<NodeId>,
    pub target: usize,
    pub states: BTreeMap<NodeId, ReplicatedObject>,
    /// Storage needed on a new host.
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PutAck {
    pub replica: NodeId,
    pub vv: VersionVector,
    pub stamp: Stamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WriteRecord {
    pub key: ObjectKey,
    pub writer: NodeId,
    pub seq: u64,
    pub written_at: SimTime,
    pub agreed_at: Option<SimTime>,
    /// Gossip rounds between the key's last write and agreement.
    pub rounds_after_quiescence: Option<u64>,
}

#[derive(Debug, Clone, Default)]
struct Pending {
    writes: Vec<usize>,
    round_of_last_write: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GossipReport {
    pub exchanges: u64,
    pub converged: Vec<ObjectKey>,
}

/// Host changes made by a re-replication pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Rereplication {
    pub added: Vec<(ObjectKey, NodeId)>,
    pub dropped: Vec<(ObjectKey, NodeId)>,
    pub shortfalls: u64,
}

#[derive(Debug, Clone)]
pub struct ReplicatedStore {
    objects: BTreeMap<ObjectKey, ReplicaSet>,
    /// State left on hosts that were dropped while offline; handed back
    /// when they return.
    orphans: BTreeMap<NodeId, BTreeMap<ObjectKey, ReplicatedObject>>,
    writer_seq: BTreeMap<(ObjectKey, NodeId), u64>,
    dirty: BTreeSet<ObjectKey>,
    pending: BTreeMap<ObjectKey, Pending>,
    writes: Vec<WriteRecord>,
    rounds: u64,
    privacy_violations: u64,
    rng: RngStream,
}

/// Placement profile for replica hosts: storage-bound, availability-heavy.
pub fn placement_weights() -> Weights {
    Weights::new(200, 500, 100, 200)
}

impl ReplicatedStore {
    pub fn new(rng: RngStream) -> Self {
        ReplicatedStore {
            objects: BTreeMap::new(),
            orphans: BTreeMap::new(),
            writer_seq: BTreeMap::new(),
            dirty: BTreeSet::new(),
            pending: BTreeMap::new(),
            writes: Vec::new(),
            rounds: 0,
            privacy_violations: 0,
            rng,
        }
    }

    pub fn rng(&mut self) -> &mut RngStream {
        &mut self.rng
    }

    /// Create a replica set on explicit hosts.
    pub fn create(&mut self, key: ObjectKey, hosts: Vec<NodeId>, target: usize, size: u64) {
        let states = hosts
            .iter()
            .map(|h| (*h, ReplicatedObject::empty()))
            .collect();
        self.objects.insert(
            key,
            ReplicaSet {
                hosts,
                target,
                states,
                size,
            },
        );
    }

    /// Create a replica set whose hosts come from a repository query.
    pub fn create_placed(
        &mut self,
        key: ObjectKey,
        target: usize,
        size: u64,
        region: Option<Region>,
        repo: &ResourceRepo,
        now: SimTime,
    ) -> Result<Vec<NodeId>, ReplicationError> {
        let q = ResourceQuery::new(Resources::new(0, size, 0), target, placement_weights())
            .in_region(region);
        let hosts = match repo.query(&q, now, &mut self.rng) {
            Ok(h) => h,
            Err(RepoError::Insufficient { available, .. }) if !available.is_empty() => available,
            Err(_) => return Err(ReplicationError::NoHosts(key)),
        };
        self.create(key, hosts.clone(), target, size);
        Ok(hosts)
    }

    pub fn contains(&self, key: &ObjectKey) -> bool {
        self.objects.contains_key(key)
    }

    pub fn replica_set(&self, key: &ObjectKey) -> Option<&ReplicaSet> {
        self.objects.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &ObjectKey> {
        self.objects.keys()
    }

    pub fn state_at(&self, key: &ObjectKey, host: &NodeId) -> Option<&ReplicatedObject> {
        self.objects.get(key)?.states.get(host)
    }

    pub fn writes(&self) -> &[WriteRecord] {
        &self.writes
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn privacy_violations(&self) -> u64 {
        self.privacy_violations
    }

    pub fn is_dirty(&self, key: &ObjectKey) -> bool {
        self.dirty.contains(key)
    }

    pub fn pending_keys(&self) -> usize {
        self.pending.len()
    }

    /// Keys hosted (as a live replica) on `node`.
    pub fn hosted_by(&self, node: &NodeId) -> Vec<ObjectKey> {
        self.objects
            .iter()
            .filter(|(_, s)| s.hosts.contains(node))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Lowest-latency online replica host as seen from `from`; ties by id.
    pub fn nearest_replica(
        &self,
        key: &ObjectKey,
        from: NodeId,
        overlay: &mut Overlay,
    ) -> Result<(NodeId, u64), ReplicationError> {
        let set = self
            .objects
            .get(key)
            .ok_or_else(|| ReplicationError::UnknownKey(key.clone()))?;
        let mut best: Option<(u64, NodeId)> = None;
        for h in &set.hosts {
            if let Ok(d) = overlay.path_delay(from, *h, 0) {
                if best.is_none_or(|b| (d, *h) < b) {
                    best = Some((d, *h));
                }
            }
        }
        best.map(|(d, h)| (h, d))
            .ok_or_else(|| ReplicationError::Unreachable(key.clone()))
    }

    /// Apply a write directly at `host`.
    pub fn apply_at(
        &mut self,
        key: &ObjectKey,
        host: NodeId,
        value: Payload,
        writer: NodeId,
        now: SimTime,
    ) -> Result<PutAck, ReplicationError> {
        let last_seq = self
            .writer_seq
            .get(&(key.clone(), writer))
            .copied()
            .unwrap_or(0);
        let set = self
            .objects
            .get_mut(key)
            .ok_or_else(|| ReplicationError::UnknownKey(key.clone()))?;
        let state = set
            .states
            .get_mut(&host)
            .ok_or_else(|| ReplicationError::Unreachable(key.clone()))?;
        let seq = last_seq.max(state.vv.get(&writer)) + 1;
        let mut stamp = Stamp {
            time: now,
            writer,
            seq,
        };
        if stamp <= state.wall {
            stamp.time = state.wall.time + 1;
        }
        state.vv.set(writer, seq);
        state.wall = stamp;
        state.value = Some(value);
        let ack = PutAck {
            replica: host,
            vv: state.vv.clone(),
            stamp,
        };
        self.writer_seq.insert((key.clone(), writer), seq);
        self.dirty.insert(key.clone());
        let idx = self.writes.len();
        self.writes.push(WriteRecord {
            key: key.clone(),
            writer,
            seq,
            written_at: now,
            agreed_at: None,
            rounds_after_quiescence: None,
        });
        let p = self.pending.entry(key.clone()).or_default();
        p.writes.push(idx);
        p.round_of_last_write = self.rounds;
        Ok(ack)
    }

    /// Write at the writer's nearest online replica.
    pub fn put(
        &mut self,
        key: &ObjectKey,
        value: Payload,
        writer: NodeId,
        overlay: &mut Overlay,
        now: SimTime,
    ) -> Result<PutAck, ReplicationError> {
        if !overlay.is_online(&writer) {
            return Err(ReplicationError::Offline(writer));
        }
        let (host, _) = self.nearest_replica(key, writer, overlay)?;
        let ack = self.apply_at(key, host, value, writer, now)?;
        self.check_agreement(key, overlay, now);
        Ok(ack)
    }

    /// Seed a value on every host at once (initial content, published code).
    pub fn put_all(&mut self, key: &ObjectKey, value: Payload, writer: NodeId, now: SimTime) -> Result<(), ReplicationError> {
        let hosts = self
            .objects
            .get(key)
            .ok_or_else(|| ReplicationError::UnknownKey(key.clone()))?
            .hosts
            .clone();
        let Some(first) = hosts.first() else {
            return Err(ReplicationError::NoHosts(key.clone()));
        };
        self.apply_at(key, *first, value, writer, now)?;
        let set = self.objects.get_mut(key).unwrap();
        let s = set.states[first].clone();
        for h in &hosts[1..] {
            set.states.insert(*h, s.clone());
        }
        self.dirty.remove(key);
        let vv = s.vv.clone();
        self.resolve_pending(key, &vv, now);
        Ok(())
    }

    /// Host-side read with the privacy gate applied.
    pub fn read_at(
        &mut self,
        key: &ObjectKey,
        host: &NodeId,
        reader: NodeId,
    ) -> Result<Option<Payload>, ReplicationError> {
        let state = self
            .objects
            .get(key)
            .ok_or_else(|| ReplicationError::UnknownKey(key.clone()))?
            .states
            .get(host)
            .ok_or_else(|| ReplicationError::Unreachable(key.clone()))?;
        match &state.value {
            Some(p) if p.encrypted && p.owner != reader => {
                self.privacy_violations += 1;
                Err(ReplicationError::PrivacyViolation {
                    key: key.clone(),
                    reader,
                })
            }
            v => Ok(v.clone()),
        }
    }

    /// Read from the reader's nearest online replica.
    pub fn get(
        &mut self,
        key: &ObjectKey,
        reader: NodeId,
        overlay: &mut Overlay,
    ) -> Result<(NodeId, Option<Payload>), ReplicationError> {
        let (host, _) = self.nearest_replica(key, reader, overlay)?;
        self.read_at(key, &host, reader).map(|v| (host, v))
    }

    /// Push-pull exchange between two replicas of `key`.
    pub fn exchange(&mut self, key: &ObjectKey, a: NodeId, b: NodeId) {
        if let Some(set) = self.objects.get_mut(key) {
            if let (Some(sa), Some(sb)) = (set.states.get(&a), set.states.get(&b)) {
                if sa == sb {
                    return;
                }
                let m = merge(sa, sb);
                set.states.insert(a, m.clone());
                set.states.insert(b, m);
            }
        }
    }

    fn online_hosts(&self, key: &ObjectKey, overlay: &Overlay) -> Vec<NodeId> {
        self.objects
            .get(key)
            .map(|s| {
                s.hosts
                    .iter()
                    .copied()
                    .filter(|h| overlay.is_online(h))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// All online replicas of `key` hold identical state.
    pub fn converged(&self, key: &ObjectKey, overlay: &Overlay) -> bool {
        let Some(set) = self.objects.get(key) else {
            return true;
        };
        let online = self.online_hosts(key, overlay);
        online
            .windows(2)
            .all(|w| set.states[&w[0]] == set.states[&w[1]])
    }

    /// Mark pending writes of `key` agreed if `agreed` reflects them. Writes
    /// stranded on offline replicas stay pending.
    fn resolve_pending(&mut self, key: &ObjectKey, agreed: &VersionVector, now: SimTime) -> bool {
        let Some(p) = self.pending.get_mut(key) else {
            return false;
        };
        let rounds = self.rounds - p.round_of_last_write;
        let mut any = false;
        p.writes.retain(|&i| {
            let w = &mut self.writes[i];
            if agreed.get(&w.writer) >= w.seq {
                w.agreed_at = Some(now);
                w.rounds_after_quiescence = Some(rounds);
                any = true;
                false
            } else {
                true
            }
        });
        if p.writes.is_empty() {
            self.pending.remove(key);
        }
        any
    }

    /// Version vector shared by the online replicas, if they agree.
    fn agreed_vv(&self, key: &ObjectKey, overlay: &Overlay) -> Option<VersionVector> {
        if !self.converged(key, overlay) {
            return None;
        }
        let first = *self.online_hosts(key, overlay).first()?;
        Some(self.objects[key].states[&first].vv.clone())
    }

    fn check_agreement(&mut self, key: &ObjectKey, overlay: &Overlay, now: SimTime) {
        if self.converged(key, overlay) {
            self.dirty.remove(key);
        }
        if let Some(vv) = self.agreed_vv(key, overlay) {
            self.resolve_pending(key, &vv, now);
        }
    }

    /// One anti-entropy round for a single key: each online replica, in
    /// host order, exchanges with one random other online replica.
    pub fn gossip_key(&mut self, key: &ObjectKey, overlay: &Overlay) -> u64 {
        let online = self.online_hosts(key, overlay);
        if online.len() < 2 {
            return 0;
        }
        let mut exchanges = 0;
        for (i, a) in online.iter().enumerate() {
            let mut j = self.rng.below(online.len() as u64 - 1) as usize;
            if j >= i {
                j += 1;
            }
            self.exchange(key, *a, online[j]);
            exchanges += 1;
        }
        exchanges
    }

    /// One anti-entropy round over every key that may be diverged; also
    /// hands orphaned state from returning nodes back to their sets.
    pub fn gossip_round(&mut self, overlay: &Overlay, now: SimTime) -> GossipReport {
        self.rounds += 1;
        self.absorb_orphans(overlay);
        let mut report = GossipReport::default();
        let keys: BTreeSet<ObjectKey> = self.dirty.iter().chain(self.pending.keys()).cloned().collect();
        for key in keys {
            report.exchanges += self.gossip_key(&key, overlay);
            if let Some(vv) = self.agreed_vv(&key, overlay) {
                self.dirty.remove(&key);
                if self.resolve_pending(&key, &vv, now) {
                    report.converged.push(key);
                }
            }
        }
        report
    }

    fn absorb_orphans(&mut self, overlay: &Overlay) {
        let back: Vec<NodeId> = self
            .orphans
            .keys()
            .copied()
            .filter(|n| overlay.is_online(n))
            .collect();
        for node in back {
            let held = self.orphans.remove(&node).unwrap_or_default();
            for (key, state) in held {
                let Some(set) = self.objects.get_mut(&key) else {
                    continue;
                };
                let target = set
                    .hosts
                    .iter()
                    .copied()
                    .find(|h| overlay.is_online(h));
                match target {
                    Some(h) => {
                        let merged = merge(&set.states[&h], &state);
                        if merged != set.states[&h] {
                            set.states.insert(h, merged);
                            self.dirty.insert(key);
                        }
                    }
                    None => {
                        self.orphans.entry(node).or_default().insert(key, state);
                    }
                }
            }
        }
    }

    /// Replace offline hosts so each set regains `min(target, online)`
    /// live replicas. New hosts copy the merge of the online replicas.
    pub fn rereplicate(
        &mut self,
        overlay: &Overlay,
        repo: &ResourceRepo,
        now: SimTime,
    ) -> Rereplication {
        let mut out = Rereplication::default();
        let keys: Vec<ObjectKey> = self.objects.keys().cloned().collect();
        for key in keys {
            let set = &self.objects[&key];
            let online: Vec<NodeId> = set
                .hosts
                .iter()
                .copied()
                .filter(|h| overlay.is_online(h))
                .collect();
            if online.len() >= set.target.min(overlay.online_count()) && online.len() == set.hosts.len() {
                continue;
            }
            if online.is_empty() {
                // Nothing to copy from; wait for a host to come back.
                continue;
            }
            let set = self.objects.get_mut(&key).unwrap();
            let offline: Vec<NodeId> = set
                .hosts
                .iter()
                .copied()
                .filter(|h| !overlay.is_online(h))
                .collect();
            for h in &offline {
                let state = set.states.remove(h).unwrap_or_default();
                if state.value.is_some() {
                    self.orphans.entry(*h).or_default().insert(key.clone(), state);
                }
                out.dropped.push((key.clone(), *h));
            }
            set.hosts.retain(|h| overlay.is_online(h));
            let need = set.target.saturating_sub(set.hosts.len());
            if need == 0 {
                continue;
            }
            let seed = set
                .hosts
                .iter()
                .map(|h| &set.states[h])
                .fold(ReplicatedObject::empty(), |acc, s| merge(&acc, s));
            let q = ResourceQuery::new(Resources::new(0, set.size, 0), need, placement_weights())
                .excluding(set.hosts.iter().copied());
            let fresh = match repo.query(&q, now, &mut self.rng) {
                Ok(v) => v,
                Err(RepoError::Insufficient { available, .. }) => {
                    out.shortfalls += 1;
                    available
                }
                Err(_) => Vec::new(),
            };
            let set = self.objects.get_mut(&key).unwrap();
            for h in fresh.into_iter().filter(|h| overlay.is_online(h)) {
                set.hosts.push(h);
                set.states.insert(h, seed.clone());
                out.added.push((key.clone(), h));
            }
            self.dirty.insert(key);
        }
        out
    }

    /// Merge of every replica and orphan of `key`: what the system still
    /// knows about it.
    pub fn surviving_state(&self, key: &ObjectKey) -> ReplicatedObject {
        let mut acc = ReplicatedObject::empty();
        if let Some(set) = self.objects.get(key) {
            for s in set.states.values() {
                acc = merge(&acc, s);
            }
        }
        for held in self.orphans.values() {
            if let Some(s) = held.get(key) {
                acc = merge(&acc, s);
            }
        }
        acc
    }

    /// Acknowledged writes no longer reflected in any surviving replica.
    pub fn lost_writes(&self) -> Vec<&WriteRecord> {
        self.writes
            .iter()
            .filter(|w| self.surviving_state(&w.key).vv.get(&w.writer) < w.seq)
            .collect()
    }
}
