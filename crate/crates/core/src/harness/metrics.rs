//! The run report, computed from the logs only.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{json, Map, Value};

use super::logs::{Logs, Outcome, RunMeta};
use crate::evolution::AdoptionKind;
use crate::overlay::NodeId;
use crate::services::PlacementAction;

fn fraction(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Nearest-rank percentile of sorted values; 0 when empty.
pub fn percentile(sorted: &[u64], p: u64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (p as usize * sorted.len()).div_ceil(100).max(1);
    sorted[rank - 1]
}

fn availability(logs: &Logs, window: Option<[u64; 2]>) -> (u64, u64) {
    let mut issued = 0;
    let mut completed = 0;
    for r in &logs.requests {
        if r.outcome == Outcome::Offline {
            continue;
        }
        if let Some([a, b]) = window {
            if r.issued_at < a || r.issued_at >= b {
                continue;
            }
        }
        issued += 1;
        if r.outcome == Outcome::Completed {
            completed += 1;
        }
    }
    (issued, completed)
}

/// Largest number of services without a live instance at the same time.
pub fn cascade_size(logs: &Logs) -> usize {
    let mut down: BTreeSet<&str> = BTreeSet::new();
    let mut worst = 0;
    for s in &logs.status {
        if s.available == 0 {
            down.insert(&s.service);
        } else {
            down.remove(s.service.as_str());
        }
        worst = worst.max(down.len());
    }
    worst
}

/// Compute-ticks the serving nodes offered while online, up to `horizon`.
pub fn offered_compute(logs: &Logs, horizon: u64) -> u64 {
    let mut since: BTreeMap<NodeId, (u64, u64)> = BTreeMap::new();
    let mut total = 0u64;
    for m in logs.membership.iter().filter(|m| m.serving == 1) {
        match m.event {
            "join" => {
                since.insert(m.node, (m.at, m.compute));
            }
            _ => {
                if let Some((t, c)) = since.remove(&m.node) {
                    total += (m.at.min(horizon) - t.min(horizon)) * c;
                }
            }
        }
    }
    for (t, c) in since.values() {
        total += (horizon - (*t).min(horizon)) * c;
    }
    total
}

pub fn compute(logs: &Logs, meta: &RunMeta) -> Value {
    let community = meta.mode == "community";
    let mut report = Map::new();
    report.insert("scenario".into(), json!(meta.scenario));
    report.insert("mode".into(), json!(meta.mode));
    report.insert("seed".into(), json!(meta.seed));
    report.insert("horizon".into(), json!(meta.horizon));

    let (issued, completed) = availability(logs, None);
    let mut by_outcome: BTreeMap<&str, u64> = BTreeMap::new();
    for r in &logs.requests {
        *by_outcome.entry(r.outcome.as_str()).or_default() += 1;
    }
    report.insert(
        "requests".into(),
        json!({
            "generated": logs.requests.len(),
            "issued": issued,
            "completed": completed,
            "by_outcome": by_outcome,
        }),
    );
    report.insert("availability".into(), json!(fraction(completed, issued)));
    if let Some(w) = meta.outage {
        let (i, c) = availability(logs, Some(w));
        report.insert(
            "outage".into(),
            json!({"window": w, "issued": i, "completed": c, "availability": fraction(c, i)}),
        );
    }

    let mut lat: Vec<u64> = logs
        .requests
        .iter()
        .filter(|r| r.outcome == Outcome::Completed && r.kind != "video")
        .map(|r| r.completed_at.unwrap_or(r.issued_at) - r.issued_at)
        .collect();
    lat.sort_unstable();
    report.insert(
        "latency".into(),
        json!({
            "count": lat.len(),
            "p50": percentile(&lat, 50),
            "p95": percentile(&lat, 95),
            "p99": percentile(&lat, 99),
            "max": lat.last().copied().unwrap_or(0),
        }),
    );

    let minted: u64 = logs.transfers.iter().filter(|t| t.is_mint()).map(|t| t.amount).sum();
    let burned: u64 = logs.transfers.iter().filter(|t| t.is_burn()).map(|t| t.amount).sum();
    let opening: i64 = logs.accounts.iter().map(|a| a.opening).sum();
    let closing: i64 = logs.accounts.iter().map(|a| a.closing).sum();
    let drift = closing - opening - minted as i64 + burned as i64;
    let unsettled = logs
        .requests
        .iter()
        .filter(|r| community && r.executed == 1 && r.gross > 0 && r.settled == 0)
        .count();
    let identity = logs
        .requests
        .iter()
        .filter(|r| r.settled == 1 && r.credit != r.debit + r.subsidy_paid)
        .count();
    report.insert(
        "currency".into(),
        json!({
            "transfers": logs.transfers.len(),
            "velocity": logs.transfers.len() as f64 * 1e6 / meta.horizon as f64,
            "minted": minted,
            "burned": burned,
            "opening_total": opening,
            "closing_total": closing,
            "drift": drift,
            "unsettled": unsettled,
            "identity_violations": identity,
        }),
    );

    let consumed: u64 = logs
        .requests
        .iter()
        .filter(|r| r.executed == 1)
        .map(|r| r.finish.unwrap_or(0) - r.start.unwrap_or(0))
        .sum();
    let offered = offered_compute(logs, meta.horizon);
    report.insert(
        "utilisation".into(),
        json!(if offered == 0 { 0.0 } else { consumed as f64 / offered as f64 }),
    );
    report.insert("cascade_size".into(), json!(cascade_size(logs)));
    report.insert(
        "placement".into(),
        json!({
            "shortfalls": logs.placements.iter().filter(|p| p.action == PlacementAction::Shortfall).count(),
            "deploys": logs.placements.iter().filter(|p| p.action == PlacementAction::Deploy).count(),
            "pulls": logs.placements.iter().filter(|p| p.action == PlacementAction::Pull).count(),
            "retires": logs.placements.iter().filter(|p| p.action == PlacementAction::Retire).count(),
            "lost": logs.placements.iter().filter(|p| p.action == PlacementAction::Lost).count(),
        }),
    );

    let agreed: Vec<_> = logs.writes.iter().filter(|w| w.agreed_at.is_some()).collect();
    report.insert(
        "convergence".into(),
        json!({
            "writes": logs.writes.len(),
            "unconverged": logs.writes.len() - agreed.len(),
            "max_lag": agreed.iter().map(|w| w.agreed_at.unwrap() - w.written_at).max().unwrap_or(0),
            "max_rounds": agreed.iter().filter_map(|w| w.rounds).max().unwrap_or(0),
        }),
    );

    let delivered: u64 = logs.sessions.iter().map(|s| s.delivered).sum();
    let expected: u64 = logs.sessions.iter().map(|s| s.expected).sum();
    report.insert(
        "video".into(),
        json!({
            "sessions": logs.sessions.len(),
            "completed": logs.sessions.iter().filter(|s| s.outcome == Outcome::Completed).count(),
            "degraded": logs.sessions.iter().filter(|s| s.outcome == Outcome::Degraded).count(),
            "delivered_fraction": fraction(delivered, expected),
        }),
    );

    let mut adoption = Map::new();
    for (svc, root) in &meta.root_versions {
        let mut latest = root.clone();
        let mut active: BTreeMap<NodeId, String> = BTreeMap::new();
        for e in logs.adoptions.iter().filter(|e| e.service_id.0 == *svc) {
            if e.kind == AdoptionKind::Release {
                latest = e.to_version.0.clone();
            }
            active.insert(e.node, e.to_version.0.clone());
        }
        let moved_off = active.values().filter(|v| **v != latest).count();
        let on_latest = if latest == *root {
            meta.population - moved_off
        } else {
            active.values().filter(|v| **v == latest).count()
        };
        adoption.insert(
            svc.clone(),
            json!({"latest": latest, "fraction": fraction(on_latest as u64, meta.population as u64)}),
        );
    }
    report.insert("adoption".into(), Value::Object(adoption));

    report.insert(
        "dvsp_reformations".into(),
        json!(logs.dvsp.iter().filter(|d| d.epoch > 1).count()),
    );
    report.insert(
        "privacy_violations".into(),
        json!(logs.requests.iter().filter(|r| r.outcome == Outcome::PrivacyDenied).count()),
    );
    report.insert(
        "egress".into(),
        json!({
            "total": logs.egress.iter().map(|e| e.bytes).sum::<u64>(),
            "max_node": logs.egress.iter().map(|e| e.bytes).max().unwrap_or(0),
        }),
    );
    Value::Object(report)
}

/// Every numeric leaf under a key named like a fraction lies in [0, 1].
pub fn fractions_in_range(report: &Value) -> Vec<String> {
    let mut bad = Vec::new();
    fn walk(v: &Value, path: String, bad: &mut Vec<String>) {
        match v {
            Value::Object(m) => {
                for (k, x) in m {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    let is_fraction = matches!(
                        k.as_str(),
                        "availability" | "utilisation" | "fraction" | "delivered_fraction"
                    );
                    if is_fraction {
                        match x.as_f64() {
                            Some(f) if (0.0..=1.0).contains(&f) => {}
                            _ => bad.push(p.clone()),
                        }
                    }
                    walk(x, p, bad);
                }
            }
            Value::Array(a) => {
                for (i, x) in a.iter().enumerate() {
                    walk(x, format!("{path}[{i}]"), bad);
                }
            }
            _ => {}
        }
    }
    walk(report, String::new(), &mut bad);
    bad
}

/// Flatten a report to `key,value` rows with dotted keys.
pub fn to_csv(report: &Value) -> String {
    let mut rows = Vec::new();
    fn walk(v: &Value, path: String, rows: &mut Vec<(String, String)>) {
        match v {
            Value::Object(m) => {
                for (k, x) in m {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    walk(x, p, rows);
                }
            }
            Value::Array(a) => {
                for (i, x) in a.iter().enumerate() {
                    walk(x, format!("{path}.{i}"), rows);
                }
            }
            Value::String(s) => rows.push((path, s.clone())),
            other => rows.push((path, other.to_string())),
        }
    }
    walk(report, String::new(), &mut rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["key", "value"]).unwrap();
    for (k, v) in rows {
        w.write_record([k, v]).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}
