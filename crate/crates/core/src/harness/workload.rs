//! Request streams.
//!
//! Every stream is drawn up front from its own seeded generator and never
//! looks at the serving substrate, so both modes see the same requests.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::Serialize;

use super::config::{ActualCostSpec, ScenarioConfig};
use crate::engine::RngStream;
use crate::resources::{ResourceKind, Resources};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkKind {
    Call,
    WikiRead,
    WikiWrite,
    Video,
}

impl WorkKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WorkKind::Call => "call",
            WorkKind::WikiRead => "wiki_read",
            WorkKind::WikiWrite => "wiki_write",
            WorkKind::Video => "video",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WorkItem {
    pub id: u64,
    pub at: u64,
    pub kind: WorkKind,
    pub service: String,
    /// Population index of the requester.
    pub requester: usize,
    pub actual: Resources,
    pub page: Option<u64>,
}

/// Region of every population member, in population order.
pub fn population_regions(cfg: &ScenarioConfig) -> Vec<u16> {
    let all: Vec<u16> = (0..cfg.population.regions).collect();
    let mut out = Vec::with_capacity(cfg.population_size());
    for c in &cfg.population.classes {
        let rs = c.regions.as_deref().unwrap_or(&all);
        for j in 0..c.count {
            out.push(rs[j % rs.len()]);
        }
    }
    out
}

/// Draws a requester: with probability `hot_fraction` from the hot region,
/// otherwise from the whole population.
struct Picker<'a> {
    regions: &'a [u16],
    hot: Vec<usize>,
    hot_fraction: f64,
}

impl<'a> Picker<'a> {
    fn new(regions: &'a [u16], hot_region: Option<u16>, hot_fraction: f64) -> Self {
        let hot = match hot_region {
            Some(h) => (0..regions.len()).filter(|i| regions[*i] == h).collect(),
            None => Vec::new(),
        };
        Picker {
            regions,
            hot,
            hot_fraction,
        }
    }

    fn pick(&self, rng: &mut RngStream) -> usize {
        if !self.hot.is_empty() && rng.bernoulli(self.hot_fraction) {
            return self.hot[rng.below(self.hot.len() as u64) as usize];
        }
        rng.below(self.regions.len() as u64) as usize
    }
}

fn scaled(x: u64, permille: u64) -> u64 {
    (x as u128 * permille as u128).div_ceil(1000) as u64
}

/// Actual consumption of one request against a declared budget.
pub fn draw_actual(declared: &Resources, spec: &ActualCostSpec, rng: &mut RngStream) -> Resources {
    let mut out = Resources::ZERO;
    for k in ResourceKind::ALL {
        let p = rng.range_inclusive(spec.scale[0], spec.scale[1]);
        *out.get_mut(k) = scaled(declared.get(k), p);
    }
    if spec.overrun_prob > 0.0 && rng.bernoulli(spec.overrun_prob) {
        let kinds: Vec<ResourceKind> = ResourceKind::ALL
            .into_iter()
            .filter(|k| declared.get(*k) > 0)
            .collect();
        if !kinds.is_empty() {
            let k = kinds[rng.below(kinds.len() as u64) as usize];
            let p = rng.range_inclusive(spec.overrun_scale[0], spec.overrun_scale[1]);
            *out.get_mut(k) = scaled(declared.get(k), p);
        }
    }
    out
}

/// Arrival times of a Poisson process whose rate (per 1000 ticks) is
/// piecewise constant; `rate_at(t)` gives the rate and the end of the
/// piece containing `t`.
fn arrivals(stop: u64, rng: &mut RngStream, rate_at: impl Fn(f64) -> (f64, f64)) -> Vec<u64> {
    let mut out = Vec::new();
    let mut t = 0.0f64;
    while t < stop as f64 {
        let (rate, piece_end) = rate_at(t);
        if rate <= 0.0 {
            t = piece_end;
            continue;
        }
        let next = t + rng.exponential(1000.0 / rate);
        if next >= piece_end {
            // Memoryless: restart at the boundary under the new rate.
            t = piece_end;
            continue;
        }
        t = next;
        if t < stop as f64 {
            out.push(t as u64);
        }
    }
    out
}

/// Rate at `t` and the time it next changes.
type RateFn = Box<dyn Fn(f64) -> (f64, f64)>;

fn constant(rate: f64) -> impl Fn(f64) -> (f64, f64) {
    move |_| (rate, f64::INFINITY)
}

struct Draft {
    at: u64,
    stream: usize,
    seq: usize,
    kind: WorkKind,
    service: String,
    requester: usize,
    actual: Resources,
    page: Option<u64>,
}

/// Zipf page popularity over `pages` with exponent `s`.
fn zipf(pages: u64, s: f64) -> WeightedIndex<f64> {
    let w: Vec<f64> = (1..=pages).map(|k| 1.0 / libm::pow(k as f64, s)).collect();
    WeightedIndex::new(w).expect("positive weights")
}

/// The merged request stream of a scenario, ordered by arrival time and
/// numbered from zero.
pub fn generate(cfg: &ScenarioConfig) -> Vec<WorkItem> {
    let regions = population_regions(cfg);
    let stop = cfg.workload.stop_at.unwrap_or(cfg.horizon).min(cfg.horizon);
    let seed = cfg.seed;
    let mut drafts: Vec<Draft> = Vec::new();
    let mut stream = 0;

    for (i, c) in cfg.workload.calls.iter().enumerate() {
        let declared = cfg.service(&c.service).expect("validated").declared;
        let mut rng = RngStream::new(seed, &format!("workload:calls:{i}"));
        let picker = Picker::new(&regions, c.hot_region, c.hot_fraction);
        for (seq, at) in arrivals(stop, &mut rng, constant(c.rate)).into_iter().enumerate() {
            drafts.push(Draft {
                at,
                stream,
                seq,
                kind: WorkKind::Call,
                service: c.service.clone(),
                requester: picker.pick(&mut rng),
                actual: draw_actual(&declared, &c.actual, &mut rng),
                page: None,
            });
        }
        stream += 1;
    }

    if let Some(w) = &cfg.workload.wiki {
        let declared = cfg.service(&w.service).expect("validated").declared;
        let pages = zipf(w.pages, w.zipf_s);
        let picker = Picker::new(&regions, w.hot_region, w.hot_fraction);
        let read_rate = w.rate * w.read_fraction;
        let write_rate = w.rate * (1.0 - w.read_fraction);
        let storm = w.edit_storm.clone();
        let write_rate_at = move |t: f64| match &storm {
            Some(s) if t < s.start as f64 => (write_rate, s.start as f64),
            Some(s) if t < s.end as f64 => (write_rate * s.multiplier, s.end as f64),
            _ => (write_rate, f64::INFINITY),
        };
        let parts: [(WorkKind, &str, RateFn); 2] = [
            (WorkKind::WikiRead, "workload:wiki:read", Box::new(constant(read_rate))),
            (WorkKind::WikiWrite, "workload:wiki:write", Box::new(write_rate_at)),
        ];
        for (kind, label, rate) in parts {
            let mut rng = RngStream::new(seed, label);
            for (seq, at) in arrivals(stop, &mut rng, rate).into_iter().enumerate() {
                drafts.push(Draft {
                    at,
                    stream,
                    seq,
                    kind,
                    service: w.service.clone(),
                    requester: picker.pick(&mut rng),
                    actual: draw_actual(&declared, &w.actual, &mut rng),
                    page: Some(pages.sample(&mut rng) as u64),
                });
            }
            stream += 1;
        }
    }

    if let Some(v) = &cfg.workload.video {
        let declared = cfg.service(&v.service).expect("validated").declared;
        let mut rng = RngStream::new(seed, "workload:video");
        let picker = Picker::new(&regions, None, 0.0);
        for (seq, at) in arrivals(stop, &mut rng, constant(v.rate)).into_iter().enumerate() {
            drafts.push(Draft {
                at,
                stream,
                seq,
                kind: WorkKind::Video,
                service: v.service.clone(),
                requester: picker.pick(&mut rng),
                actual: draw_actual(&declared, &v.actual, &mut rng),
                page: None,
            });
        }
    }

    drafts.sort_by_key(|d| (d.at, d.stream, d.seq));
    drafts
        .into_iter()
        .enumerate()
        .map(|(id, d)| WorkItem {
            id: id as u64,
            at: d.at,
            kind: d.kind,
            service: d.service,
            requester: d.requester,
            actual: d.actual,
            page: d.page,
        })
        .collect()
}
