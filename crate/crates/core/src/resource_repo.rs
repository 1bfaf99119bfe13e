//! Distributed resource repository.
//!
//! Nodes register once and then heartbeat every interval. The repository
//! keeps an EWMA of each node's availability and task success rate, drops
//! records that stop heartbeating for longer than the staleness horizon,
//! and answers profile queries by weighted sampling without replacement:
//! a node's chance of being picked is proportional to its score among the
//! eligible nodes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{RngStream, SimTime};
use crate::overlay::{NodeId, Region};
use crate::resources::Resources;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RepoError {
    #[error("node {0:?} is not registered")]
    UnknownNode(NodeId),
    #[error("query weights must sum to {WEIGHT_SCALE}, got {0}")]
    InvalidWeights(u32),
    #[error("query count must be at least 1")]
    ZeroCount,
    #[error("only {} of {requested} requested nodes are eligible", available.len())]
    Insufficient {
        requested: usize,
        available: Vec<NodeId>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepoConfig {
    /// EWMA smoothing per heartbeat interval.
    pub beta: f64,
    pub heartbeat_interval: u64,
    /// Records older than this many intervals are excluded from queries.
    pub staleness_intervals: u64,
}

impl Default for RepoConfig {
    fn default() -> Self {
        RepoConfig {
            beta: 0.1,
            heartbeat_interval: 1000,
            staleness_intervals: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeResourceRecord {
    pub id: NodeId,
    pub free_capacity: Resources,
    pub availability: f64,
    pub perf_history: f64,
    /// Currency units per normalised request at current prices.
    pub projected_cost: u64,
    pub region: Region,
    pub last_heartbeat: SimTime,
}

impl NodeResourceRecord {
    pub fn new(id: NodeId, region: Region, free_capacity: Resources, projected_cost: u64) -> Self {
        NodeResourceRecord {
            id,
            free_capacity,
            availability: 1.0,
            perf_history: 1.0,
            projected_cost,
            region,
            last_heartbeat: SimTime::ZERO,
        }
    }
}

/// Weights are integers out of [`WEIGHT_SCALE`], so "sums to one" is exact.
pub const WEIGHT_SCALE: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Weights {
    pub perf: u32,
    pub avail: u32,
    pub cost: u32,
    pub geo: u32,
}

impl Weights {
    pub fn new(perf: u32, avail: u32, cost: u32, geo: u32) -> Self {
        Weights {
            perf,
            avail,
            cost,
            geo,
        }
    }

    pub fn availability_only() -> Self {
        Weights::new(0, WEIGHT_SCALE, 0, 0)
    }

    pub fn validate(&self) -> Result<(), RepoError> {
        let sum = self.perf + self.avail + self.cost + self.geo;
        if sum != WEIGHT_SCALE {
            return Err(RepoError::InvalidWeights(sum));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceQuery {
    pub required: Resources,
    pub preferred_region: Option<Region>,
    pub count: usize,
    pub weights: Weights,
    /// Nodes that must not be returned (already hosting, say).
    pub exclude: BTreeSet<NodeId>,
    /// Treat `preferred_region` as a filter rather than a score term.
    pub strict_region: bool,
}

impl ResourceQuery {
    pub fn new(required: Resources, count: usize, weights: Weights) -> Self {
        ResourceQuery {
            required,
            preferred_region: None,
            count,
            weights,
            exclude: BTreeSet::new(),
            strict_region: false,
        }
    }

    pub fn in_region(mut self, region: Option<Region>) -> Self {
        self.preferred_region = region;
        self
    }

    pub fn only_region(mut self, region: Region) -> Self {
        self.preferred_region = Some(region);
        self.strict_region = true;
        self
    }

    pub fn excluding(mut self, ids: impl IntoIterator<Item = NodeId>) -> Self {
        self.exclude.extend(ids);
        self
    }
}

#[derive(Debug, Clone)]
pub struct ResourceRepo {
    cfg: RepoConfig,
    records: BTreeMap<NodeId, NodeResourceRecord>,
    /// Regions whose super-peer (and so their slice of the repository) is gone.
    lost_regions: BTreeSet<Region>,
}

impl ResourceRepo {
    pub fn new(cfg: RepoConfig) -> Self {
        ResourceRepo {
            cfg,
            records: BTreeMap::new(),
            lost_regions: BTreeSet::new(),
        }
    }

    pub fn config(&self) -> &RepoConfig {
        &self.cfg
    }

    pub fn register(&mut self, mut record: NodeResourceRecord, at: SimTime) -> &NodeResourceRecord {
        record.last_heartbeat = at;
        let id = record.id;
        self.records.insert(id, record);
        &self.records[&id]
    }

    pub fn get(&self, id: &NodeId) -> Option<&NodeResourceRecord> {
        self.records.get(id)
    }

    pub fn records(&self) -> impl Iterator<Item = &NodeResourceRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The node answered this interval: availability sample 1.
    pub fn heartbeat(
        &mut self,
        id: &NodeId,
        free_capacity: Resources,
        at: SimTime,
    ) -> Result<&NodeResourceRecord, RepoError> {
        let beta = self.cfg.beta;
        let r = self
            .records
            .get_mut(id)
            .ok_or(RepoError::UnknownNode(*id))?;
        r.availability = ewma(r.availability, 1.0, beta);
        r.free_capacity = free_capacity;
        r.last_heartbeat = at;
        Ok(r)
    }

    /// The node missed this interval's heartbeat: availability sample 0.
    pub fn missed(&mut self, id: &NodeId) -> Result<(), RepoError> {
        let beta = self.cfg.beta;
        let r = self
            .records
            .get_mut(id)
            .ok_or(RepoError::UnknownNode(*id))?;
        r.availability = ewma(r.availability, 0.0, beta);
        Ok(())
    }

    pub fn record_task(&mut self, id: &NodeId, success: bool) -> Result<(), RepoError> {
        let beta = self.cfg.beta;
        let r = self
            .records
            .get_mut(id)
            .ok_or(RepoError::UnknownNode(*id))?;
        r.perf_history = ewma(r.perf_history, if success { 1.0 } else { 0.0 }, beta);
        Ok(())
    }

    pub fn set_projected_cost(&mut self, id: &NodeId, cost: u64) -> Result<(), RepoError> {
        self.records
            .get_mut(id)
            .ok_or(RepoError::UnknownNode(*id))?
            .projected_cost = cost;
        Ok(())
    }

    pub fn adjust_free(&mut self, id: &NodeId, free_capacity: Resources) {
        if let Some(r) = self.records.get_mut(id) {
            r.free_capacity = free_capacity;
        }
    }

    pub fn set_region_lost(&mut self, region: Region, lost: bool) {
        if lost {
            self.lost_regions.insert(region);
        } else {
            self.lost_regions.remove(&region);
        }
    }

    pub fn is_fresh(&self, r: &NodeResourceRecord, now: SimTime) -> bool {
        now.saturating_sub(r.last_heartbeat)
            <= self.cfg.heartbeat_interval * self.cfg.staleness_intervals
            && !self.lost_regions.contains(&r.region)
    }

    /// Records that would pass the eligibility filter of `q` at `now`.
    pub fn eligible(&self, q: &ResourceQuery, now: SimTime) -> Vec<&NodeResourceRecord> {
        self.records
            .values()
            .filter(|r| !q.exclude.contains(&r.id))
            .filter(|r| !q.strict_region || q.preferred_region == Some(r.region))
            .filter(|r| r.free_capacity.covers(&q.required))
            .filter(|r| self.is_fresh(r, now))
            .collect()
    }

    /// Score of every eligible node, in id order.
    pub fn scores(&self, q: &ResourceQuery, now: SimTime) -> Vec<(NodeId, f64)> {
        let eligible = self.eligible(q, now);
        let max_cost = eligible.iter().map(|r| r.projected_cost).max().unwrap_or(0);
        eligible
            .into_iter()
            .map(|r| (r.id, score(r, q, max_cost)))
            .collect()
    }

    /// Exact probability that each eligible node is returned by a
    /// `count = 1` query.
    pub fn selection_probabilities(&self, q: &ResourceQuery, now: SimTime) -> Vec<(NodeId, f64)> {
        let scores = self.scores(q, now);
        let total: f64 = scores.iter().map(|s| s.1).sum();
        let n = scores.len() as f64;
        scores
            .into_iter()
            .map(|(id, s)| (id, if total > 0.0 { s / total } else { 1.0 / n }))
            .collect()
    }

    /// Filter, score and draw `q.count` nodes by weighted sampling without
    /// replacement. `Insufficient` carries every eligible node in draw order.
    pub fn query(
        &self,
        q: &ResourceQuery,
        now: SimTime,
        rng: &mut RngStream,
    ) -> Result<Vec<NodeId>, RepoError> {
        q.weights.validate()?;
        if q.count == 0 {
            return Err(RepoError::ZeroCount);
        }
        let mut pool = self.scores(q, now);
        let take = q.count.min(pool.len());
        let mut picked = Vec::with_capacity(take);
        for _ in 0..take {
            let i = draw_weighted(&pool, rng);
            picked.push(pool.remove(i).0);
        }
        if picked.len() < q.count {
            return Err(RepoError::Insufficient {
                requested: q.count,
                available: picked,
            });
        }
        Ok(picked)
    }
}

fn ewma(prev: f64, sample: f64, beta: f64) -> f64 {
    ((1.0 - beta) * prev + beta * sample).clamp(0.0, 1.0)
}

/// `w_perf*perf + w_avail*avail + w_cost*(1 - cost/max_cost) + w_geo*[region match]`.
pub fn score(r: &NodeResourceRecord, q: &ResourceQuery, max_cost: u64) -> f64 {
    let w = |x: u32| x as f64 / WEIGHT_SCALE as f64;
    let norm_cost = if max_cost == 0 {
        0.0
    } else {
        r.projected_cost as f64 / max_cost as f64
    };
    let geo = match q.preferred_region {
        Some(region) if region == r.region => 1.0,
        _ => 0.0,
    };
    w(q.weights.perf) * r.perf_history
        + w(q.weights.avail) * r.availability
        + w(q.weights.cost) * (1.0 - norm_cost)
        + w(q.weights.geo) * geo
}

/// Index drawn with probability proportional to weight; uniform when every
/// weight is zero.
fn draw_weighted(pool: &[(NodeId, f64)], rng: &mut RngStream) -> usize {
    let total: f64 = pool.iter().map(|p| p.1).sum();
    if total <= 0.0 {
        return rng.below(pool.len() as u64) as usize;
    }
    let mut target = rng.unit() * total;
    let mut last_positive = 0;
    for (i, (_, w)) in pool.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        last_positive = i;
        if target < *w {
            return i;
        }
        target -= w;
    }
    last_positive
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::overlay::generate_identity;

    fn ids(n: usize) -> Vec<NodeId> {
        let mut rng = RngStream::new(17, "repo-test");
        let mut v: Vec<NodeId> = (0..n).map(|_| generate_identity(&mut rng)).collect();
        v.sort();
        v
    }

    fn repo_with(avail: &[f64]) -> (ResourceRepo, Vec<NodeId>) {
        let v = ids(avail.len());
        let mut repo = ResourceRepo::new(RepoConfig::default());
        for (id, a) in v.iter().zip(avail) {
            let mut r = NodeResourceRecord::new(*id, Region(0), Resources::new(10, 10, 10), 5);
            r.availability = *a;
            repo.register(r, SimTime(0));
        }
        (repo, v)
    }

    #[test]
    fn first_heartbeat_initialises_availability() {
        let (mut repo, v) = repo_with(&[1.0]);
        let r = repo.heartbeat(&v[0], Resources::new(1, 1, 1), SimTime(1000)).unwrap();
        assert_eq!(r.availability, 1.0);
        assert_eq!(r.last_heartbeat, SimTime(1000));
    }

    #[test]
    fn heartbeat_unknown_node() {
        let (mut repo, _) = repo_with(&[]);
        let stranger = ids(1)[0];
        assert_eq!(
            repo.heartbeat(&stranger, Resources::ZERO, SimTime(0)).unwrap_err(),
            RepoError::UnknownNode(stranger)
        );
    }

    #[test]
    fn half_online_converges_to_closed_form() {
        // Alternating on/off samples settle into a two-point cycle with
        // high = 1/(2-b) and low = (1-b)/(2-b); both approach 1/2 as b -> 0.
        for beta in [0.1, 0.05, 0.01] {
            let mut repo = ResourceRepo::new(RepoConfig {
                beta,
                ..RepoConfig::default()
            });
            let id = ids(1)[0];
            repo.register(NodeResourceRecord::new(id, Region(0), Resources::ZERO, 0), SimTime(0));
            for i in 0..20_000u64 {
                if i % 2 == 0 {
                    repo.heartbeat(&id, Resources::ZERO, SimTime(i)).unwrap();
                } else {
                    repo.missed(&id).unwrap();
                }
            }
            let low = repo.get(&id).unwrap().availability;
            assert!((low - (1.0 - beta) / (2.0 - beta)).abs() < 1e-9);
            assert!((low - 0.5).abs() <= beta / 2.0 + 1e-9);
        }
    }

    #[test]
    fn single_eligible_node() {
        let (repo, v) = repo_with(&[0.5]);
        let q = ResourceQuery::new(Resources::new(1, 1, 1), 1, Weights::availability_only());
        let got = repo.query(&q, SimTime(10), &mut RngStream::new(1, "q")).unwrap();
        assert_eq!(got, vec![v[0]]);
    }

    #[test]
    fn no_eligible_nodes() {
        let (repo, _) = repo_with(&[0.5, 0.7]);
        let q = ResourceQuery::new(Resources::new(100, 0, 0), 1, Weights::availability_only());
        assert_eq!(
            repo.query(&q, SimTime(10), &mut RngStream::new(1, "q")),
            Err(RepoError::Insufficient {
                requested: 1,
                available: vec![]
            })
        );
    }

    #[test]
    fn insufficient_returns_all_eligible() {
        let (repo, v) = repo_with(&[0.5, 0.7]);
        let q = ResourceQuery::new(Resources::ZERO, 3, Weights::availability_only());
        match repo.query(&q, SimTime(10), &mut RngStream::new(1, "q")) {
            Err(RepoError::Insufficient { available, .. }) => {
                let got: BTreeSet<_> = available.into_iter().collect();
                assert_eq!(got, v.into_iter().collect());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stale_records_excluded() {
        let (mut repo, v) = repo_with(&[0.9, 0.9]);
        repo.heartbeat(&v[1], Resources::new(10, 10, 10), SimTime(5000)).unwrap();
        let q = ResourceQuery::new(Resources::ZERO, 2, Weights::availability_only());
        // Horizon is 3 intervals of 1000 ticks.
        let at = SimTime(3001);
        assert_eq!(repo.eligible(&q, at).len(), 1);
        assert_eq!(repo.eligible(&q, SimTime(3000)).len(), 2);
    }

    #[test]
    fn lost_region_records_excluded() {
        let (mut repo, _) = repo_with(&[0.9, 0.9]);
        let q = ResourceQuery::new(Resources::ZERO, 1, Weights::availability_only());
        repo.set_region_lost(Region(0), true);
        assert!(repo.eligible(&q, SimTime(1)).is_empty());
        repo.set_region_lost(Region(0), false);
        assert_eq!(repo.eligible(&q, SimTime(1)).len(), 2);
    }

    #[test]
    fn invalid_weights_rejected() {
        let (repo, _) = repo_with(&[0.9]);
        let q = ResourceQuery::new(Resources::ZERO, 1, Weights::new(500, 400, 0, 0));
        assert_eq!(
            repo.query(&q, SimTime(0), &mut RngStream::new(1, "q")),
            Err(RepoError::InvalidWeights(900))
        );
    }

    #[test]
    fn two_to_one_availability_gives_two_to_one_picks() {
        let (repo, v) = repo_with(&[0.9, 0.45]);
        let q = ResourceQuery::new(Resources::ZERO, 1, Weights::availability_only());
        let mut rng = RngStream::new(2024, "q");
        let mut first = 0u32;
        for _ in 0..10_000 {
            if repo.query(&q, SimTime(0), &mut rng).unwrap()[0] == v[0] {
                first += 1;
            }
        }
        let ratio = first as f64 / (10_000 - first) as f64;
        assert!((ratio - 2.0).abs() <= 0.1, "ratio {ratio}");
    }

    #[test]
    fn sampling_is_without_replacement() {
        let (repo, v) = repo_with(&[0.9, 0.1, 0.5, 0.3]);
        let q = ResourceQuery::new(Resources::ZERO, 4, Weights::availability_only());
        let mut got = repo.query(&q, SimTime(0), &mut RngStream::new(4, "q")).unwrap();
        got.sort();
        assert_eq!(got, v);
    }

    #[test]
    fn cost_and_geography_terms() {
        let v = ids(2);
        let mut repo = ResourceRepo::new(RepoConfig::default());
        repo.register(NodeResourceRecord::new(v[0], Region(0), Resources::ZERO, 10), SimTime(0));
        repo.register(NodeResourceRecord::new(v[1], Region(1), Resources::ZERO, 5), SimTime(0));
        let q = ResourceQuery::new(Resources::ZERO, 1, Weights::new(0, 0, 500, 500))
            .in_region(Some(Region(0)));
        let scores: BTreeMap<_, _> = repo.scores(&q, SimTime(0)).into_iter().collect();
        assert!((scores[&v[0]] - 0.5).abs() < 1e-12);
        assert!((scores[&v[1]] - 0.25).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn returned_nodes_are_eligible(
                caps in proptest::collection::vec((0u64..20, 0u64..20, 0u64..20, 0u64..6000), 1..12),
                need in (0u64..10, 0u64..10, 0u64..10),
                count in 1usize..6,
                seed in 0u64..500,
            ) {
                let v = ids(caps.len());
                let mut repo = ResourceRepo::new(RepoConfig::default());
                for (id, (c, s, b, hb)) in v.iter().zip(&caps) {
                    repo.register(NodeResourceRecord::new(*id, Region(0), Resources::new(*c, *s, *b), 1), SimTime(*hb));
                }
                let q = ResourceQuery::new(Resources::new(need.0, need.1, need.2), count, Weights::new(250, 250, 250, 250));
                let now = SimTime(6000);
                let got = match repo.query(&q, now, &mut RngStream::new(seed, "q")) {
                    Ok(v) => v,
                    Err(RepoError::Insufficient { available, .. }) => available,
                    Err(e) => return Err(TestCaseError::fail(e.to_string())),
                };
                let distinct: BTreeSet<_> = got.iter().collect();
                prop_assert_eq!(distinct.len(), got.len());
                for id in got {
                    let r = repo.get(&id).unwrap();
                    prop_assert!(r.free_capacity.covers(&q.required));
                    prop_assert!(now.saturating_sub(r.last_heartbeat) <= 3000);
                }
            }

            #[test]
            fn raising_a_score_never_lowers_its_probability(
                avail in proptest::collection::vec(0.0f64..1.0, 2..8),
                bump in 0.0f64..1.0,
                which in 0usize..8,
            ) {
                let (mut repo, v) = repo_with(&avail);
                let which = which % v.len();
                let q = ResourceQuery::new(Resources::ZERO, 1, Weights::new(300, 700, 0, 0));
                let p = |repo: &ResourceRepo| repo.selection_probabilities(&q, SimTime(0))
                    .into_iter().find(|(id, _)| *id == v[which]).unwrap().1;
                let before = p(&repo);
                let r = repo.records.get_mut(&v[which]).unwrap();
                r.availability = (r.availability + bump).min(1.0);
                prop_assert!(p(&repo) + 1e-12 >= before);
            }
        }
    }
}
