#!/usr/bin/env python3
"""Recompute a run report from its CSV logs and compare it with report.json.

usage: recompute_report.py <run-dir>

Exits 0 when every field matches exactly, 1 otherwise.
"""
import csv
import json
import sys
from collections import Counter
from pathlib import Path

TREASURY = "0" * 64


def rows(d, name):
    with open(d / name, newline="") as f:
        return list(csv.DictReader(f))


def fraction(num, den):
    return 1.0 if den == 0 else num / den


def percentile(sorted_vals, p):
    if not sorted_vals:
        return 0
    rank = max(1, -(-p * len(sorted_vals) // 100))
    return sorted_vals[rank - 1]


def availability(requests, window=None):
    issued = completed = 0
    for r in requests:
        if r["outcome"] == "offline":
            continue
        t = int(r["issued_at"])
        if window is not None and not (window[0] <= t < window[1]):
            continue
        issued += 1
        completed += r["outcome"] == "completed"
    return issued, completed


def offered_compute(membership, horizon):
    since = {}
    total = 0
    for m in membership:
        if m["serving"] != "1":
            continue
        at, node = int(m["at"]), m["node"]
        if m["event"] == "join":
            since[node] = (at, int(m["compute"]))
        elif node in since:
            t, c = since.pop(node)
            total += (min(at, horizon) - min(t, horizon)) * c
    for t, c in since.values():
        total += (horizon - min(t, horizon)) * c
    return total


def cascade(status):
    down, worst = set(), 0
    for s in status:
        if s["available"] == "0":
            down.add(s["service"])
        else:
            down.discard(s["service"])
        worst = max(worst, len(down))
    return worst


def recompute(d):
    meta = json.loads((d / "run.json").read_text())
    requests = rows(d, "requests.csv")
    transfers = rows(d, "transfers.csv")
    accounts = rows(d, "accounts.csv")
    placements = rows(d, "placements.csv")
    adoptions = rows(d, "adoptions.csv")
    writes = rows(d, "writes.csv")
    membership = rows(d, "membership.csv")
    status = rows(d, "service_status.csv")
    dvsp = rows(d, "dvsp.csv")
    sessions = rows(d, "sessions.csv")
    egress = rows(d, "egress.csv")
    horizon = meta["horizon"]
    community = meta["mode"] == "community"

    rep = {
        "scenario": meta["scenario"],
        "mode": meta["mode"],
        "seed": meta["seed"],
        "horizon": horizon,
    }
    issued, completed = availability(requests)
    rep["requests"] = {
        "generated": len(requests),
        "issued": issued,
        "completed": completed,
        "by_outcome": dict(Counter(r["outcome"] for r in requests)),
    }
    rep["availability"] = fraction(completed, issued)
    if meta["outage"] is not None:
        w = meta["outage"]
        i, c = availability(requests, w)
        rep["outage"] = {"window": w, "issued": i, "completed": c, "availability": fraction(c, i)}

    lat = sorted(
        int(r["completed_at"] or r["issued_at"]) - int(r["issued_at"])
        for r in requests
        if r["outcome"] == "completed" and r["kind"] != "video"
    )
    rep["latency"] = {
        "count": len(lat),
        "p50": percentile(lat, 50),
        "p95": percentile(lat, 95),
        "p99": percentile(lat, 99),
        "max": lat[-1] if lat else 0,
    }

    minted = sum(int(t["amount"]) for t in transfers if t["from"] == TREASURY)
    burned = sum(int(t["amount"]) for t in transfers if t["to"] == TREASURY)
    opening = sum(int(a["opening"]) for a in accounts)
    closing = sum(int(a["closing"]) for a in accounts)
    rep["currency"] = {
        "transfers": len(transfers),
        "velocity": len(transfers) * 1e6 / horizon,
        "minted": minted,
        "burned": burned,
        "opening_total": opening,
        "closing_total": closing,
        "drift": closing - opening - minted + burned,
        "unsettled": sum(
            1
            for r in requests
            if community and r["executed"] == "1" and int(r["gross"]) > 0 and r["settled"] == "0"
        ),
        "identity_violations": sum(
            1
            for r in requests
            if r["settled"] == "1" and int(r["credit"]) != int(r["debit"]) + int(r["subsidy_paid"])
        ),
    }

    consumed = sum(
        int(r["finish"] or 0) - int(r["start"] or 0) for r in requests if r["executed"] == "1"
    )
    offered = offered_compute(membership, horizon)
    rep["utilisation"] = 0.0 if offered == 0 else consumed / offered
    rep["cascade_size"] = cascade(status)
    actions = Counter(p["action"] for p in placements)
    rep["placement"] = {
        "shortfalls": actions["shortfall"],
        "deploys": actions["deploy"],
        "pulls": actions["pull"],
        "retires": actions["retire"],
        "lost": actions["lost"],
    }

    agreed = [w for w in writes if w["agreed_at"] != ""]
    rep["convergence"] = {
        "writes": len(writes),
        "unconverged": len(writes) - len(agreed),
        "max_lag": max((int(w["agreed_at"]) - int(w["written_at"]) for w in agreed), default=0),
        "max_rounds": max((int(w["rounds"]) for w in agreed if w["rounds"] != ""), default=0),
    }

    delivered = sum(int(s["delivered"]) for s in sessions)
    expected = sum(int(s["expected"]) for s in sessions)
    rep["video"] = {
        "sessions": len(sessions),
        "completed": sum(s["outcome"] == "completed" for s in sessions),
        "degraded": sum(s["outcome"] == "degraded" for s in sessions),
        "delivered_fraction": fraction(delivered, expected),
    }

    adoption = {}
    population = meta["population"]
    for svc, root in meta["root_versions"]:
        latest, active = root, {}
        for e in adoptions:
            if e["service_id"] != svc:
                continue
            if e["kind"] == "release":
                latest = e["to_version"]
            active[e["node"]] = e["to_version"]
        moved_off = sum(v != latest for v in active.values())
        on_latest = population - moved_off if latest == root else sum(v == latest for v in active.values())
        adoption[svc] = {"latest": latest, "fraction": fraction(on_latest, population)}
    rep["adoption"] = adoption

    rep["dvsp_reformations"] = sum(int(x["epoch"]) > 1 for x in dvsp)
    rep["privacy_violations"] = sum(r["outcome"] == "privacy_denied" for r in requests)
    sizes = [int(e["bytes"]) for e in egress]
    rep["egress"] = {"total": sum(sizes), "max_node": max(sizes, default=0)}
    return rep


def diff(a, b, path=""):
    out = []
    if isinstance(a, dict) and isinstance(b, dict):
        for k in sorted(set(a) | set(b)):
            p = f"{path}.{k}" if path else k
            if k not in a or k not in b:
                out.append(f"{p}: only in {'recomputed' if k in a else 'report'}")
            else:
                out += diff(a[k], b[k], p)
    elif a != b:
        out.append(f"{path}: recomputed {a!r} != report {b!r}")
    return out


def main():
    if len(sys.argv) != 2:
        print(__doc__.strip(), file=sys.stderr)
        return 2
    d = Path(sys.argv[1])
    mine = recompute(d)
    theirs = json.loads((d / "report.json").read_text())
    problems = diff(mine, theirs)
    for p in problems:
        print(p)
    if problems:
        return 1
    print(f"{d}: report matches logs")
    return 0


if __name__ == "__main__":
    sys.exit(main())
