//! Post-run invariant checks behind `--check`.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::Value;

use super::logs::{Logs, Outcome};
use super::metrics::fractions_in_range;
use crate::evolution::{AdoptionKind, Evolution};
use crate::ledger::Ledger;
use crate::overlay::Overlay;
use crate::replication::ReplicatedStore;
use crate::services::{PlacementAction, ServiceLayer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub check: &'static str,
    pub detail: String,
}

/// End-of-run state the audits look at.
pub struct Subject<'a> {
    pub logs: &'a Logs,
    pub report: &'a Value,
    pub ledger: Option<&'a Ledger>,
    pub store: &'a ReplicatedStore,
    pub services: &'a ServiceLayer,
    pub overlay: &'a Overlay,
    pub evolution: Option<&'a Evolution>,
}

pub fn run(s: &Subject) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut v = |check: &'static str, detail: String| out.push(Violation { check, detail });

    if let Some(l) = s.ledger {
        let drift = l.total_balance() - l.opening_total() - l.minted() as i64 + l.burned() as i64;
        if drift != 0 {
            v("currency-drift", format!("balances drifted by {drift}"));
        }
        let replayed = Ledger::replay(l.opening_balances(), l.log());
        if replayed != l.balances() {
            v("ledger-replay", "replaying the transfer log does not reproduce balances".into());
        }
    }

    for r in &s.logs.requests {
        if r.settled == 1 && r.credit != r.debit + r.subsidy_paid {
            v(
                "payment-identity",
                format!("request {}: credit {} != debit {} + subsidy {}", r.id, r.credit, r.debit, r.subsidy_paid),
            );
        }
        if r.host.is_some() {
            let over = r.actual_compute > r.declared_compute
                || r.actual_storage > r.declared_storage
                || r.actual_bandwidth > r.declared_bandwidth;
            if over != (r.terminated == 1) {
                v("termination", format!("request {}: terminated={} but over-budget={over}", r.id, r.terminated));
            }
        }
        if r.outcome == Outcome::Completed && r.terminated == 1 {
            v("termination", format!("request {} completed past its budget", r.id));
        }
    }

    let lost = s.store.lost_writes();
    if !lost.is_empty() {
        v("durability", format!("{} acknowledged writes lost, first on {}", lost.len(), lost[0].key));
    }

    for path in fractions_in_range(s.report) {
        v("fraction-range", format!("{path} outside [0, 1]"));
    }

    if let Some(e) = s.evolution {
        for a in e.log().iter().filter(|a| a.kind == AdoptionKind::Adopt) {
            let f = |id| e.version(id).map(|v| v.fitness);
            if f(&a.to_version) < f(&a.from_version) {
                v(
                    "fitness-monotone",
                    format!("{} adopted {} over fitter {}", a.node, a.to_version, a.from_version),
                );
            }
        }
    }

    let mut shortfalls: BTreeMap<&str, u64> = BTreeMap::new();
    for p in s.logs.placements.iter().filter(|p| p.action == PlacementAction::Shortfall) {
        *shortfalls.entry(p.service_id.0.as_str()).or_default() += 1;
    }
    for d in s.services.catalog() {
        let warm = s.services.warm_count(&d.service_id, s.overlay);
        if warm < d.min_replicas && !shortfalls.contains_key(d.service_id.0.as_str()) {
            v(
                "replica-floor",
                format!("{} has {warm} of {} replicas and no shortfall on record", d.service_id, d.min_replicas),
            );
        }
    }
    out
}
