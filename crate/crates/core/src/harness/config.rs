//! Scenario files.
//!
//! A scenario is a TOML document. Every table is optional except
//! `[population]`; omitted keys take the defaults below. Unknown keys are
//! rejected so typos surface as errors instead of silently using defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::evolution::Ratio;
use crate::ledger::{MarketParams, Price};
use crate::overlay::OverlayConfig;
use crate::resources::Resources;
use crate::services::PlacementConfig;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Community,
    Vendor,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Community => "community",
            Mode::Vendor => "vendor",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "community" => Ok(Mode::Community),
            "vendor" => Ok(Mode::Vendor),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Simulated ticks (1 tick = 1 ms).
    pub horizon: u64,
    #[serde(default)]
    pub mode: Mode,
    pub population: PopulationSpec,
    #[serde(default)]
    pub topology: TopologySpec,
    #[serde(default)]
    pub market: MarketSpec,
    #[serde(default)]
    pub replication: ReplicationSpec,
    #[serde(default)]
    pub placement: PlacementConfig,
    #[serde(default)]
    pub evolution: EvolutionSpec,
    #[serde(default)]
    pub services: Vec<ServiceSpec>,
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub failures: FailureSpec,
    #[serde(default)]
    pub vendor: VendorSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub regions: u16,
    #[serde(rename = "class")]
    pub classes: Vec<NodeClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeClass {
    pub name: String,
    pub count: usize,
    pub capacity: Resources,
    /// Regions to spread the class over, round robin. Default: all.
    #[serde(default)]
    pub regions: Option<Vec<u16>>,
    /// Mean ticks online between departures; 0 means always on.
    #[serde(default)]
    pub mean_online: u64,
    #[serde(default)]
    pub mean_offline: u64,
    #[serde(default = "default_balance")]
    pub opening_balance: i64,
    #[serde(default)]
    pub credit_limit: u64,
}

fn default_balance() -> i64 {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologySpec {
    pub degree: usize,
    pub min_degree: usize,
    pub inter_region_links: usize,
    pub dvsp_size: usize,
    pub intra_latency: [u64; 2],
    pub inter_latency: [u64; 2],
    /// Ticks between gossip rounds; heartbeats, super-peer maintenance,
    /// anti-entropy and adoption ticks all run on this clock.
    pub gossip_interval: u64,
}

impl Default for TopologySpec {
    fn default() -> Self {
        let o = OverlayConfig::default();
        TopologySpec {
            degree: o.degree,
            min_degree: o.min_degree,
            inter_region_links: o.inter_region_links,
            dvsp_size: o.dvsp_size,
            intra_latency: [o.intra_latency.0, o.intra_latency.1],
            inter_latency: [o.inter_latency.0, o.inter_latency.1],
            gossip_interval: 1000,
        }
    }
}

impl TopologySpec {
    pub fn overlay_config(&self) -> OverlayConfig {
        OverlayConfig {
            degree: self.degree,
            min_degree: self.min_degree,
            inter_region_links: self.inter_region_links,
            dvsp_size: self.dvsp_size,
            intra_latency: (self.intra_latency[0], self.intra_latency[1]),
            inter_latency: (self.inter_latency[0], self.inter_latency[1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketSpec {
    pub alpha: f64,
    /// Whole currency units.
    pub p_min: u64,
    pub p_max: u64,
    pub initial: u64,
    /// Hosts are paid by minting; payers' shares are burned.
    pub minting: bool,
    pub update_interval: u64,
}

impl Default for MarketSpec {
    fn default() -> Self {
        MarketSpec {
            alpha: 0.5,
            p_min: 1,
            p_max: 1000,
            initial: 1,
            minting: false,
            update_interval: 10_000,
        }
    }
}

impl MarketSpec {
    pub fn params(&self) -> MarketParams {
        MarketParams {
            alpha: self.alpha,
            p_min: Price::from_units(self.p_min),
            p_max: Price::from_units(self.p_max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicationSpec {
    pub r: usize,
}

impl Default for ReplicationSpec {
    fn default() -> Self {
        ReplicationSpec { r: 3 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrustKind {
    /// Each node trusts the two before it on a seeded ring.
    #[default]
    Ring,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionSpec {
    pub theta: Ratio,
    pub trust: TrustKind,
}

impl Default for EvolutionSpec {
    fn default() -> Self {
        EvolutionSpec {
            theta: Ratio::new(1, 2),
            trust: TrustKind::Ring,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub id: String,
    #[serde(default = "default_version")]
    pub version: String,
    pub declared: Resources,
    #[serde(default)]
    pub subsidy: u64,
    pub code_size: u64,
    #[serde(default = "one")]
    pub min_replicas: usize,
    #[serde(default = "unit_ratio")]
    pub fitness: Ratio,
    #[serde(default = "default_dev_balance")]
    pub developer_balance: i64,
    #[serde(default)]
    pub releases: Vec<ReleaseSpec>,
}

fn default_version() -> String {
    "v1".into()
}

fn one() -> usize {
    1
}

fn unit_ratio() -> Ratio {
    Ratio::whole(1)
}

fn default_dev_balance() -> i64 {
    1_000_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReleaseSpec {
    pub version: String,
    #[serde(default)]
    pub parent: Option<String>,
    pub fitness: Ratio,
    pub at: u64,
    #[serde(default = "one")]
    pub origins: usize,
}

/// Per-resource actual cost as a fraction of the declared cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActualCostSpec {
    /// Uniform per-mille range of the declared cost.
    pub scale: [u64; 2],
    /// Chance a request overruns its budget.
    pub overrun_prob: f64,
    /// Per-mille range used for one randomly chosen resource on overrun.
    pub overrun_scale: [u64; 2],
}

impl Default for ActualCostSpec {
    fn default() -> Self {
        ActualCostSpec {
            scale: [500, 1000],
            overrun_prob: 0.0,
            overrun_scale: [1001, 1500],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CallStream {
    pub service: String,
    /// Poisson arrivals per 1000 ticks over the whole population.
    pub rate: f64,
    #[serde(default)]
    pub actual: ActualCostSpec,
    #[serde(default)]
    pub hot_region: Option<u16>,
    #[serde(default)]
    pub hot_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditStorm {
    pub start: u64,
    pub end: u64,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WikiSpec {
    pub service: String,
    pub pages: u64,
    #[serde(default = "default_zipf")]
    pub zipf_s: f64,
    /// Operations per 1000 ticks.
    pub rate: f64,
    #[serde(default = "default_read_fraction")]
    pub read_fraction: f64,
    #[serde(default = "default_page_size")]
    pub page_size: u64,
    #[serde(default)]
    pub actual: ActualCostSpec,
    #[serde(default)]
    pub hot_region: Option<u16>,
    #[serde(default)]
    pub hot_fraction: f64,
    #[serde(default)]
    pub edit_storm: Option<EditStorm>,
}

fn default_zipf() -> f64 {
    1.0
}

fn default_read_fraction() -> f64 {
    0.95
}

fn default_page_size() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoSpec {
    pub service: String,
    /// Session starts per 1000 ticks.
    pub rate: f64,
    /// Session length in ticks.
    pub duration: u64,
    /// Bandwidth units per tick.
    pub bitrate: u64,
    /// A session fails once delivered/bitrate stays below this...
    #[serde(default = "default_floor")]
    pub floor: f64,
    /// ...for this many ticks.
    #[serde(default = "default_sustain")]
    pub sustain: u64,
    #[serde(default = "default_check")]
    pub check_interval: u64,
    #[serde(default)]
    pub actual: ActualCostSpec,
}

fn default_floor() -> f64 {
    0.8
}

fn default_sustain() -> u64 {
    5000
}

fn default_check() -> u64 {
    1000
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    /// No new requests after this tick. Default: the horizon.
    pub stop_at: Option<u64>,
    pub calls: Vec<CallStream>,
    pub wiki: Option<WikiSpec>,
    pub video: Option<VideoSpec>,
}

/// What a scripted failure hits.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Population index.
    Node(usize),
    Region(u16),
    /// Fraction of the population, sampled once.
    Random(f64),
    Vendor,
}

impl FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("expected node:<i>, region:<r>, random:<fraction> or vendor, got {s:?}");
        if s == "vendor" {
            return Ok(Target::Vendor);
        }
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "node" => arg.parse().map(Target::Node).map_err(|_| bad()),
            "region" => arg.parse().map(Target::Region).map_err(|_| bad()),
            "random" => match arg.parse::<f64>() {
                Ok(f) if (0.0..=1.0).contains(&f) => Ok(Target::Random(f)),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Node(i) => write!(f, "node:{i}"),
            Target::Region(r) => write!(f, "region:{r}"),
            Target::Random(x) => write!(f, "random:{x}"),
            Target::Vendor => f.write_str("vendor"),
        }
    }
}

impl Serialize for Target {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Target {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureEvent {
    pub at: u64,
    /// Restore time; never restored when absent.
    #[serde(default)]
    pub until: Option<u64>,
    pub target: Target,
    /// Used instead of `target` in vendor mode.
    #[serde(default)]
    pub vendor_target: Option<Target>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailureSpec {
    /// Scales departure rates of churning nodes; 0 disables churn.
    pub churn_multiplier: f64,
    pub events: Vec<FailureEvent>,
    /// Window reported separately as outage availability.
    pub outage: Option<[u64; 2]>,
}

impl Default for FailureSpec {
    fn default() -> Self {
        FailureSpec {
            churn_multiplier: 1.0,
            events: Vec::new(),
            outage: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VendorSpec {
    pub capacity: Resources,
    pub region: u16,
}

impl Default for VendorSpec {
    fn default() -> Self {
        VendorSpec {
            capacity: Resources::new(64, 10_000_000, 100_000),
            region: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = match e.span() {
                Some(span) => {
                    let line = text[..span.start].matches('\n').count() + 1;
                    format!("line {line}")
                }
                None => "scenario".to_string(),
            };
            ConfigError::new(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(path.display().to_string(), e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    pub fn population_size(&self) -> usize {
        self.population.classes.iter().map(|c| c.count).sum()
    }

    pub fn service(&self, id: &str) -> Option<&ServiceSpec> {
        self.services.iter().find(|s| s.id == id)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |f: &str, m: String| Err(ConfigError::new(f, m));
        if self.horizon == 0 {
            return err("horizon", "must be positive".into());
        }
        let p = &self.population;
        if p.regions == 0 {
            return err("population.regions", "must be positive".into());
        }
        if self.population_size() == 0 {
            return err("population.class", "needs at least one node".into());
        }
        for (i, c) in p.classes.iter().enumerate() {
            if let Some(rs) = &c.regions {
                if rs.is_empty() {
                    return err(&format!("population.class[{i}].regions"), "must not be empty".into());
                }
                if let Some(r) = rs.iter().find(|r| **r >= p.regions) {
                    return err(
                        &format!("population.class[{i}].regions"),
                        format!("region {r} out of range 0..{}", p.regions),
                    );
                }
            }
            if c.mean_online > 0 && c.mean_offline == 0 {
                return err(&format!("population.class[{i}].mean_offline"), "must be positive when mean_online is set".into());
            }
        }
        let t = &self.topology;
        if t.gossip_interval == 0 {
            return err("topology.gossip_interval", "must be positive".into());
        }
        if t.degree < 2 {
            return err("topology.degree", "must be at least 2".into());
        }
        if t.dvsp_size == 0 {
            return err("topology.dvsp_size", "must be positive".into());
        }
        for (name, r) in [("topology.intra_latency", t.intra_latency), ("topology.inter_latency", t.inter_latency)] {
            if r[0] > r[1] {
                return err(name, format!("lower bound {} above upper bound {}", r[0], r[1]));
            }
        }
        let m = &self.market;
        if !(m.alpha >= 0.0 && m.alpha.is_finite()) {
            return err("market.alpha", "must be a non-negative number".into());
        }
        if m.p_min == 0 || m.p_min > m.p_max {
            return err("market.p_min", format!("need 0 < p_min <= p_max, got {} and {}", m.p_min, m.p_max));
        }
        if m.update_interval == 0 {
            return err("market.update_interval", "must be positive".into());
        }
        if self.replication.r == 0 {
            return err("replication.r", "must be positive".into());
        }
        let pl = &self.placement;
        if pl.window == 0 {
            return err("placement.window", "must be positive".into());
        }
        if pl.r_dsr == 0 {
            return err("placement.r_dsr", "must be positive".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, s) in self.services.iter().enumerate() {
            if !seen.insert(&s.id) {
                return err(&format!("services[{i}].id"), format!("duplicate service {:?}", s.id));
            }
            if s.min_replicas == 0 {
                return err(&format!("services[{i}].min_replicas"), "must be at least 1".into());
            }
            let mut versions = std::collections::BTreeSet::from([s.version.clone()]);
            for (j, r) in s.releases.iter().enumerate() {
                let f = format!("services[{i}].releases[{j}]");
                if let Some(p) = &r.parent {
                    if !versions.contains(p) {
                        return err(&format!("{f}.parent"), format!("unknown version {p:?}"));
                    }
                }
                if !versions.insert(r.version.clone()) {
                    return err(&format!("{f}.version"), format!("duplicate version {:?}", r.version));
                }
                if r.origins == 0 {
                    return err(&format!("{f}.origins"), "must be positive".into());
                }
            }
        }
        let known = |svc: &str, f: String| -> Result<(), ConfigError> {
            if self.service(svc).is_none() {
                return Err(ConfigError::new(f, format!("unknown service {svc:?}")));
            }
            Ok(())
        };
        let check_actual = |a: &ActualCostSpec, f: String| -> Result<(), ConfigError> {
            if a.scale[0] > a.scale[1] || a.overrun_scale[0] > a.overrun_scale[1] {
                return Err(ConfigError::new(f, "ranges must be [low, high]".to_string()));
            }
            if !(0.0..=1.0).contains(&a.overrun_prob) {
                return Err(ConfigError::new(f, "overrun_prob must be in [0, 1]".to_string()));
            }
            Ok(())
        };
        let check_hot = |hot: Option<u16>, frac: f64, f: String| -> Result<(), ConfigError> {
            if let Some(h) = hot {
                if h >= p.regions {
                    return Err(ConfigError::new(f, format!("region {h} out of range")));
                }
            }
            if !(0.0..=1.0).contains(&frac) {
                return Err(ConfigError::new(f, "hot_fraction must be in [0, 1]".to_string()));
            }
            Ok(())
        };
        for (i, c) in self.workload.calls.iter().enumerate() {
            let f = format!("workload.calls[{i}]");
            known(&c.service, format!("{f}.service"))?;
            if !(c.rate > 0.0 && c.rate.is_finite()) {
                return err(&format!("{f}.rate"), "must be positive".into());
            }
            check_actual(&c.actual, format!("{f}.actual"))?;
            check_hot(c.hot_region, c.hot_fraction, format!("{f}.hot_region"))?;
        }
        if let Some(w) = &self.workload.wiki {
            known(&w.service, "workload.wiki.service".into())?;
            if !(w.rate > 0.0 && w.rate.is_finite()) {
                return err("workload.wiki.rate", "must be positive".into());
            }
            if w.pages == 0 {
                return err("workload.wiki.pages", "must be positive".into());
            }
            if !(0.0..=1.0).contains(&w.read_fraction) {
                return err("workload.wiki.read_fraction", "must be in [0, 1]".into());
            }
            check_actual(&w.actual, "workload.wiki.actual".into())?;
            check_hot(w.hot_region, w.hot_fraction, "workload.wiki.hot_region".into())?;
        }
        if let Some(v) = &self.workload.video {
            known(&v.service, "workload.video.service".into())?;
            if !(v.rate > 0.0 && v.rate.is_finite()) {
                return err("workload.video.rate", "must be positive".into());
            }
            if v.check_interval == 0 || v.duration == 0 || v.bitrate == 0 {
                return err("workload.video", "duration, bitrate and check_interval must be positive".into());
            }
            check_actual(&v.actual, "workload.video.actual".into())?;
        }
        let n = self.population_size();
        for (i, e) in self.failures.events.iter().enumerate() {
            let f = format!("failures.events[{i}]");
            if let Some(u) = e.until {
                if u < e.at {
                    return err(&format!("{f}.until"), "restore before kill".into());
                }
            }
            for t in std::iter::once(&e.target).chain(e.vendor_target.as_ref()) {
                match t {
                    Target::Node(k) if *k >= n => {
                        return err(&format!("{f}.target"), format!("unknown target node {k} (population {n})"));
                    }
                    Target::Region(r) if *r >= p.regions => {
                        return err(&format!("{f}.target"), format!("unknown target region {r}"));
                    }
                    _ => {}
                }
            }
            let effective = match self.mode {
                Mode::Vendor => e.vendor_target.as_ref().unwrap_or(&e.target),
                Mode::Community => &e.target,
            };
            if *effective == Target::Vendor && self.mode == Mode::Community {
                return err(&format!("{f}.target"), "unknown target: no vendor node in community mode".into());
            }
        }
        if let Some([a, b]) = self.failures.outage {
            if a >= b {
                return err("failures.outage", "window must be [start, end) with start < end".into());
            }
        }
        if self.failures.churn_multiplier < 0.0 {
            return err("failures.churn_multiplier", "must be non-negative".into());
        }
        Ok(())
    }
}
