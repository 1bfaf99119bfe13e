//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::PathBuf;
use std::time::Instant;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use c3sim::evolution::{Evolution, Ratio, VersionId, VersionNode};
use c3sim::harness::config::Target;
use c3sim::harness::logs::Outcome;
use c3sim::harness::{self, ScenarioConfig, World};
use c3sim::ledger::{Ledger, MarketPrice, Price};
use c3sim::overlay::{generate_identity, NodeRecord, Overlay, OverlayConfig};
use c3sim::replication::{ObjectKey, Payload, ReplicatedStore};
use c3sim::resource_repo::{NodeResourceRecord, RepoConfig, ResourceQuery, ResourceRepo, Weights};
use c3sim::services::{
    developer_account, distribute, settlement_ops, PlacementConfig, Request, ServiceDescriptor, ServiceId,
    ServiceLayer,
};
use c3sim::{NodeId, Region, Resources, RngStream, SimTime};

const SEEDS: std::ops::RangeInclusive<u64> = 1..=10;

// AC3 floors.
const FLOOR_10PCT: f64 = 0.7;
const FLOOR_30PCT: f64 = 0.4;
// AC5
const CHI_DRAWS: usize = 10_000;
const CHI_ALPHA: f64 = 0.05;
const CHI_MIN_PASSING: usize = 9;
// AC7
const PUSH_P95_RATIO: f64 = 0.7;
// AC8
const ROLLBACK_SEQUENCES: u64 = 1_000;
// AC9
const DVSP_ROUNDS: u64 = 2;
// AC10
const CONSUMERS: usize = 16;

type Verdict = Result<String, String>;
type Check = (&'static str, fn() -> Verdict);

fn scenario(name: &str) -> ScenarioConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"));
    ScenarioConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn shipped() -> Vec<String> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| {
            let p = e.ok()?.path();
            let stem = p.file_stem()?.to_string_lossy().into_owned();
            (p.extension()? == "toml").then_some(stem)
        })
        .collect();
    v.sort();
    v
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ids(n: usize, seed: u64) -> Vec<NodeId> {
    let mut rng = RngStream::new(seed, "acceptance-ids");
    let mut v: Vec<NodeId> = (0..n).map(|_| generate_identity(&mut rng)).collect();
    v.sort();
    v
}

fn mesh(nodes: &[NodeId], capacity: Resources) -> Overlay {
    let mut o = Overlay::new(OverlayConfig::default(), RngStream::new(1, "acceptance-overlay"));
    for n in nodes {
        o.insert_online(NodeRecord::new(*n, capacity, Region(0)), SimTime(0)).unwrap();
    }
    for (i, a) in nodes.iter().enumerate() {
        for b in &nodes[i + 1..] {
            o.connect(*a, *b, 10).unwrap();
        }
    }
    o
}

fn ac1_determinism() -> Verdict {
    let names = ["wiki", "video", "diffusion"];
    for n in names {
        let cfg = scenario(n);
        let a = harness::run_scenario(&cfg).unwrap().report_json();
        let b = harness::run_scenario(&cfg).unwrap().report_json();
        ensure(a == b, format!("{n}: reports differ between runs"))?;
    }
    Ok(format!("{} scenarios x 2 runs byte-identical", names.len()))
}

fn ac2_conservation() -> Verdict {
    let cfg = scenario("conservation");
    ensure(!cfg.market.minting, "minting must be off")?;
    let run = harness::run_scenario(&cfg).unwrap();
    let logs = &run.logs;
    ensure(logs.requests.len() >= 100_000, format!("only {} requests", logs.requests.len()))?;
    let mut bal: BTreeMap<NodeId, i64> = logs.accounts.iter().map(|a| (a.owner, a.opening)).collect();
    for t in &logs.transfers {
        ensure(t.from != NodeId::TREASURY && t.to != NodeId::TREASURY, "mint or burn with minting off")?;
        *bal.get_mut(&t.from).ok_or("transfer from unknown account")? -= t.amount as i64;
        *bal.get_mut(&t.to).ok_or("transfer to unknown account")? += t.amount as i64;
    }
    let opening: i64 = logs.accounts.iter().map(|a| a.opening).sum();
    let closing: i64 = logs.accounts.iter().map(|a| a.closing).sum();
    ensure(closing == opening, format!("drift {}", closing - opening))?;
    for a in &logs.accounts {
        ensure(bal[&a.owner] == a.closing, format!("replay mismatch on {}", a.owner))?;
    }
    ensure(run.report["currency"]["drift"] == 0, "reported drift non-zero")?;
    Ok(format!(
        "{} requests, {} transfers, drift 0, replay exact",
        logs.requests.len(),
        logs.transfers.len()
    ))
}

fn outage_availability(cfg: &ScenarioConfig) -> Vec<f64> {
    let seeds: Vec<u64> = SEEDS.collect();
    harness::sweep(cfg, &seeds)
        .unwrap()
        .iter()
        .map(|r| {
            let (a, b) = (cfg.failures.outage.unwrap()[0], cfg.failures.outage.unwrap()[1]);
            let inw: Vec<_> = r
                .logs
                .requests
                .iter()
                .filter(|q| q.outcome != Outcome::Offline && q.issued_at >= a && q.issued_at < b)
                .collect();
            let done = inw.iter().filter(|q| q.outcome == Outcome::Completed).count();
            done as f64 / inw.len() as f64
        })
        .collect()
}

fn ac3_degradation() -> Verdict {
    let base = scenario("outage");
    ensure(base.population_size() == 200 && base.replication.r == 3, "fixture must be 200 nodes, r=3")?;
    ensure(base.services.iter().all(|s| s.min_replicas == 3), "fixture must have min_replicas=3")?;
    let mut vendor = base.clone();
    vendor.mode = harness::Mode::Vendor;
    let v = outage_availability(&vendor);
    ensure(v.iter().all(|x| *x == 0.0), format!("vendor window availability {v:?}"))?;
    let mut worst = Vec::new();
    for (frac, floor) in [(0.1, FLOOR_10PCT), (0.3, FLOOR_30PCT)] {
        let mut cfg = base.clone();
        cfg.failures.events[0].target = Target::Random(frac);
        let av = outage_availability(&cfg);
        let min = av.iter().cloned().fold(f64::INFINITY, f64::min);
        ensure(min >= floor, format!("{}% killed: min availability {min:.4} < {floor}", frac * 100.0))?;
        worst.push(format!("{:.0}%: min {min:.4} >= {floor}", frac * 100.0));
    }
    Ok(format!("vendor 0 on all seeds; {}", worst.join("; ")))
}

fn ac4_budget() -> Verdict {
    let nodes = ids(4, 4);
    let cap = Resources::new(4, 1000, 100);
    let mut overlay = mesh(&nodes, cap);
    let mut repo = ResourceRepo::new(RepoConfig::default());
    for n in &nodes {
        repo.register(NodeResourceRecord::new(*n, Region(0), cap, 1), SimTime(0));
    }
    let mut store = ReplicatedStore::new(RngStream::new(4, "acceptance-store"));
    let mut layer = ServiceLayer::new(PlacementConfig::default(), RngStream::new(4, "acceptance-services"));
    let declared = 10u64;
    let (subsidy, price) = (3u64, 2u64);
    let svc = ServiceId::new("meter");
    layer
        .publish(
            ServiceDescriptor {
                service_id: svc.clone(),
                version: VersionId::new("v1"),
                declared_cost: Resources::new(declared, 0, 0),
                subsidy,
                code_size: 10,
                min_replicas: 1,
            },
            &mut store,
            &mut repo,
            &mut overlay,
            SimTime(0),
        )
        .map_err(|e| e.to_string())?;
    let dev = developer_account(&svc);
    let mut ledger = Ledger::new();
    for n in &nodes {
        ledger.open_account(*n, 1_000_000, 0).unwrap();
    }
    ledger.open_account(dev, 1_000_000, 0).unwrap();
    let prices = MarketPrice::uniform(Price::from_units(price));
    let requester = nodes[0];
    let gross = declared * price;
    for actual in 0..=2 * declared {
        let req = Request {
            id: actual,
            requester,
            service_id: svc.clone(),
            actual_cost: Resources::new(actual, 0, 0),
            issued_at: SimTime(actual),
        };
        let d = layer
            .dispatch(&req, Some(&ledger), &prices, &mut store, &mut repo, &mut overlay, SimTime(actual))
            .map_err(|e| e.to_string())?;
        ensure(
            d.metering.terminated == (actual > declared),
            format!("actual {actual}: terminated={}", d.metering.terminated),
        )?;
        // Pro-rata charge for the fraction of work done before the cut.
        let (want_gross, want_sub) = if actual > declared {
            ((gross * declared).div_ceil(actual), subsidy * declared / actual)
        } else {
            (gross, subsidy)
        };
        ensure(
            d.owed.gross == want_gross && d.owed.subsidy_part == want_sub,
            format!("actual {actual}: owed {:?}", d.owed),
        )?;
        let before: BTreeMap<NodeId, i64> = ledger.balances();
        let ops = settlement_ops(requester, d.host, dev, &d.owed, false);
        ledger.apply_batch(&ops, SimTime(actual)).map_err(|e| e.to_string())?;
        let after = ledger.balances();
        let delta = |n: &NodeId| after[n] - before[n];
        if d.host != requester {
            let debit = -delta(&requester);
            let credit = delta(&d.host);
            let sub = -delta(&dev);
            ensure(
                credit == debit + sub && debit as u64 == want_gross - want_sub && sub as u64 == want_sub,
                format!("actual {actual}: debit {debit} credit {credit} subsidy {sub}"),
            )?;
        }
    }
    let mut checked = 0usize;
    for name in shipped() {
        let run = harness::run_scenario(&scenario(&name)).unwrap();
        for r in run.logs.requests.iter().filter(|r| r.settled == 1) {
            ensure(
                r.credit == r.debit + r.subsidy_paid,
                format!("{name} request {}: credit {} debit {} subsidy {}", r.id, r.credit, r.debit, r.subsidy_paid),
            )?;
            checked += 1;
        }
        for r in run.logs.requests.iter().filter(|r| r.host.is_some()) {
            let over = r.actual_compute > r.declared_compute
                || r.actual_storage > r.declared_storage
                || r.actual_bandwidth > r.declared_bandwidth;
            ensure(over == (r.terminated == 1), format!("{name} request {}: termination mismatch", r.id))?;
        }
    }
    Ok(format!("grid 0..={} exact; identity on {checked} settled requests", 2 * declared))
}

fn ac5_proportional() -> Verdict {
    let nodes = ids(3, 5);
    let avail = [0.2, 0.3, 0.5];
    let mut repo = ResourceRepo::new(RepoConfig::default());
    for (n, a) in nodes.iter().zip(avail) {
        let mut r = NodeResourceRecord::new(*n, Region(0), Resources::new(4, 100, 10), 1);
        r.availability = a;
        repo.register(r, SimTime(0));
    }
    let q = ResourceQuery::new(Resources::new(1, 0, 0), 1, Weights::availability_only());
    let total: f64 = avail.iter().sum();
    let chi = ChiSquared::new((nodes.len() - 1) as f64).unwrap();
    let mut ps = Vec::new();
    for seed in SEEDS {
        let mut rng = RngStream::new(seed, "acceptance-chi");
        let mut counts = [0u64; 3];
        for _ in 0..CHI_DRAWS {
            let got = repo.query(&q, SimTime(0), &mut rng).map_err(|e| e.to_string())?;
            counts[nodes.iter().position(|n| *n == got[0]).unwrap()] += 1;
        }
        let stat: f64 = counts
            .iter()
            .zip(avail)
            .map(|(o, a)| {
                let e = CHI_DRAWS as f64 * a / total;
                (*o as f64 - e).powi(2) / e
            })
            .sum();
        ps.push(1.0 - chi.cdf(stat));
    }
    let passing = ps.iter().filter(|p| **p > CHI_ALPHA).count();
    let summary = format!("{passing}/10 seeds with p > {CHI_ALPHA}");
    ensure(passing >= CHI_MIN_PASSING, summary.clone())?;
    Ok(summary)
}

fn ac6_consistency() -> Verdict {
    let hosts = ids(3, 6);
    let key = ObjectKey::new("doc");
    let pairs = [(0usize, 1usize), (0, 2), (1, 2)];
    let closure = [(0usize, 1usize), (1, 2), (0, 2), (0, 1)];
    let mut orderings = 0;
    // Tied wall clocks, then a strictly later second write.
    for (ta, tb) in [(10u64, 10u64), (10, 11), (11, 10)] {
        let writers = [hosts[0], hosts[1]];
        let winner = if ta != tb {
            if ta > tb { writers[0] } else { writers[1] }
        } else {
            writers[0].max(writers[1])
        };
        for code in 0..pairs.len().pow(4) {
            let mut seq = Vec::new();
            let mut c = code;
            for _ in 0..4 {
                seq.push(pairs[c % pairs.len()]);
                c /= pairs.len();
            }
            let mut s = ReplicatedStore::new(RngStream::new(6, "acceptance-store"));
            s.create(key.clone(), hosts.clone(), 3, 1);
            s.apply_at(&key, hosts[0], Payload::plain("a", writers[0], 1), writers[0], SimTime(ta))
                .map_err(|e| e.to_string())?;
            s.apply_at(&key, hosts[1], Payload::plain("b", writers[1], 1), writers[1], SimTime(tb))
                .map_err(|e| e.to_string())?;
            for (a, b) in seq.iter().chain(closure.iter()) {
                s.exchange(&key, hosts[*a], hosts[*b]);
            }
            let states: Vec<_> = hosts.iter().map(|h| s.state_at(&key, h).unwrap().clone()).collect();
            ensure(states.windows(2).all(|w| w[0] == w[1]), format!("ordering {seq:?} diverged"))?;
            let want: &[u8] = if winner == writers[0] { b"a" } else { b"b" };
            let got = states[0].value.as_ref().map(|p| p.bytes.as_slice());
            ensure(got == Some(want), format!("ordering {seq:?}: wrong winner"))?;
            ensure(
                states[0].vv.get(&writers[0]) == 1 && states[0].vv.get(&writers[1]) == 1,
                "merged version vector lost a write",
            )?;
            orderings += 1;
        }
    }
    let cfg = scenario("wiki");
    let r = cfg.replication.r as f64;
    let bound = 4 * r.log2().ceil() as u64;
    let run = harness::run_scenario(&cfg).unwrap();
    let writes = &run.logs.writes;
    ensure(!writes.is_empty(), "wiki produced no writes")?;
    let unagreed = writes.iter().filter(|w| w.agreed_at.is_none()).count();
    ensure(unagreed == 0, format!("{unagreed} of {} writes never agreed", writes.len()))?;
    let worst = writes.iter().filter_map(|w| w.rounds).max().unwrap_or(0);
    ensure(worst <= bound, format!("max rounds {worst} > {bound}"))?;
    Ok(format!(
        "{orderings} orderings agree; wiki {} writes agreed, max {worst} rounds <= {bound}",
        writes.len()
    ))
}

fn p95(run: &harness::RunOutput) -> u64 {
    let mut lat: Vec<u64> = run
        .logs
        .requests
        .iter()
        .filter(|r| r.outcome == Outcome::Completed)
        .map(|r| r.completed_at.unwrap() - r.issued_at)
        .collect();
    lat.sort_unstable();
    lat[(95 * lat.len()).div_ceil(100) - 1]
}

fn ac7_push() -> Verdict {
    let mut cfg = scenario("wiki");
    cfg.services[0].min_replicas = 1;
    let wiki = cfg.workload.wiki.as_mut().unwrap();
    wiki.hot_region = Some(0);
    wiki.hot_fraction = 0.9;
    let mut pull = cfg.clone();
    cfg.placement.push = true;
    pull.placement.push = false;
    let a = p95(&harness::run_scenario(&cfg).unwrap());
    let b = p95(&harness::run_scenario(&pull).unwrap());
    let ratio = a as f64 / b as f64;
    let summary = format!("push p95 {a} / pull p95 {b} = {ratio:.3} (limit {PUSH_P95_RATIO})");
    ensure(ratio <= PUSH_P95_RATIO, summary.clone())?;
    Ok(summary)
}

fn strongly_connected(g: &BTreeMap<NodeId, Vec<NodeId>>, nodes: &[NodeId]) -> bool {
    let reach = |start: NodeId, rev: bool| {
        let mut seen = BTreeSet::from([start]);
        let mut q = VecDeque::from([start]);
        while let Some(x) = q.pop_front() {
            let next: Vec<NodeId> = if rev {
                g.iter().filter(|(_, v)| v.contains(&x)).map(|(k, _)| *k).collect()
            } else {
                g.get(&x).cloned().unwrap_or_default()
            };
            for y in next {
                if seen.insert(y) {
                    q.push_back(y);
                }
            }
        }
        seen.len()
    };
    reach(nodes[0], false) == nodes.len() && reach(nodes[0], true) == nodes.len()
}

fn ac8_dominance() -> Verdict {
    let base = scenario("diffusion");
    ensure(base.population_size() == 50, "fixture must have 50 nodes")?;
    let release = base.services[0].releases[0].clone();
    ensure(release.origins == 1, "fitter version must start at one node")?;
    let svc = ServiceId::new(base.services[0].id.clone());
    let fitter = VersionId::new(format!("{}@{}", base.services[0].id, release.version));
    for seed in SEEDS {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let mut w = World::new(&cfg);
        w.run_until(SimTime(cfg.horizon));
        let evo = w.evolution().unwrap();
        ensure(strongly_connected(evo.trust(), w.nodes()), format!("seed {seed}: trust graph not strongly connected"))?;
        let n = evo.adopters(&svc, &fitter).len();
        ensure(n == w.nodes().len(), format!("seed {seed}: {n}/50 on the fitter version"))?;
    }

    // Rollback exactness against a stack model.
    let nodes = ids(1, 8);
    let node = nodes[0];
    let svc = ServiceId::new("s");
    for case in 0..ROLLBACK_SEQUENCES {
        let mut rng = RngStream::new(case, "acceptance-rollback");
        let mut evo = Evolution::new(BTreeMap::new(), Ratio::new(1, 2));
        let root = VersionId::new("v0");
        evo.install(
            VersionNode {
                version_id: root.clone(),
                parent: None,
                service_id: svc.clone(),
                fitness: Ratio::whole(0),
                released_at: SimTime(0),
            },
            [node],
        )
        .unwrap();
        let mut model: Vec<VersionId> = vec![root];
        let mut next = 1u64;
        for step in 0..rng.range_inclusive(1, 40) {
            let depth = model.len() as u64 - 1;
            if depth > 0 && rng.bernoulli(0.4) {
                let k = rng.range_inclusive(1, depth) as usize;
                evo.rollback(&svc, node, k, SimTime(step)).map_err(|e| e.to_string())?;
                model.truncate(model.len() - k);
            } else {
                let v = VersionId::new(format!("v{next}"));
                evo.release(
                    VersionNode {
                        version_id: v.clone(),
                        parent: model.last().cloned(),
                        service_id: svc.clone(),
                        fitness: Ratio::whole(next),
                        released_at: SimTime(step),
                    },
                    &[node],
                    |_| true,
                    SimTime(step),
                )
                .map_err(|e| e.to_string())?;
                next += 1;
                model.push(v);
            }
            let st = evo.state(&svc, &node).unwrap();
            ensure(
                st.active == *model.last().unwrap() && st.history == model[..model.len() - 1],
                format!("sequence {case} step {step}: state diverged from model"),
            )?;
        }
        let replayed = evo.replay(evo.log());
        ensure(
            replayed.get(&(svc.clone(), node)) == evo.state(&svc, &node),
            format!("sequence {case}: replay differs"),
        )?;
    }
    Ok(format!("100% adoption on seeds 1-10; {ROLLBACK_SEQUENCES} rollback sequences exact"))
}

fn ac9_dvsp() -> Verdict {
    let mut base = scenario("outage");
    base.failures.events.clear();
    base.failures.outage = None;
    let interval = base.topology.gossip_interval;
    let mut worst = 0;
    for seed in SEEDS {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let mut w = World::new(&cfg);
        let t0 = 50 * interval;
        w.run_until(SimTime(t0));
        let target_size = w.overlay().config().dvsp_size;
        let sp = w
            .overlay()
            .dvsps()
            .find(|sp| w.overlay().online_in_region(sp.region).len() > 2 * sp.size())
            .cloned()
            .ok_or("no region with spare nodes")?;
        ensure(sp.size() == target_size, format!("seed {seed}: super-peer not full before kill"))?;
        for m in sp.members.iter().take(sp.size() / 2) {
            w.kill_node(*m);
        }
        let mut restored_in = None;
        for round in 1..=DVSP_ROUNDS {
            w.run_until(SimTime(t0 + round * interval));
            let now = w.overlay().dvsps().find(|x| x.region == sp.region).unwrap();
            let all_up = now.members.iter().all(|m| w.overlay().is_online(m));
            if now.epoch > sp.epoch && now.size() == target_size && all_up {
                restored_in = Some(round);
                break;
            }
        }
        let r = restored_in.ok_or(format!("seed {seed}: not restored within {DVSP_ROUNDS} rounds"))?;
        worst = worst.max(r);
    }
    Ok(format!("restored within {worst} round(s) on seeds 1-10"))
}

fn ac10_repeaters() -> Verdict {
    let nodes = ids(CONSUMERS + 1, 10);
    let mut overlay = mesh(&nodes, Resources::new(4, 1000, 100));
    let code_size = 100;
    let (origin, consumers) = (nodes[0], &nodes[1..]);
    let tree = distribute(origin, consumers, code_size, true, &mut overlay, SimTime(0)).map_err(|e| e.to_string())?;
    let flat = distribute(origin, consumers, code_size, false, &mut overlay, SimTime(0)).map_err(|e| e.to_string())?;
    let (t, f) = (tree.egress_of(&origin), flat.egress_of(&origin));
    ensure(t <= 2 * code_size, format!("origin egress with repeaters {t}"))?;
    ensure(f == CONSUMERS as u64 * code_size, format!("origin egress without repeaters {f}"))?;
    ensure(
        consumers.iter().all(|c| tree.egress_of(c) <= 2 * code_size && tree.arrival.contains_key(c)),
        "a repeater fed more than two peers or a consumer was missed",
    )?;
    Ok(format!("origin egress {t} with repeaters, {f} without"))
}

fn main() {
    let checks: [Check; 10] = [
        ("AC1 determinism", ac1_determinism),
        ("AC2 currency conservation", ac2_conservation),
        ("AC3 graceful degradation", ac3_degradation),
        ("AC4 budget semantics", ac4_budget),
        ("AC5 proportional selection", ac5_proportional),
        ("AC6 eventual consistency", ac6_consistency),
        ("AC7 push placement", ac7_push),
        ("AC8 update dominance", ac8_dominance),
        ("AC9 super-peer resilience", ac9_dvsp),
        ("AC10 repeater egress", ac10_repeaters),
    ];
    let mut failed = 0;
    for (name, f) in checks {
        let t = Instant::now();
        let res = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(msg) => println!("PASS {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg} [{secs:.1}s]");
            }
        }
    }
    println!("{} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
