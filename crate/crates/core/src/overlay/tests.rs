use super::*;
use crate::ledger::{Ledger, LedgerOp, TransferReason};

fn population(n: usize, regions: u16, seed: u64) -> Vec<NodeRecord> {
    let mut rng = RngStream::new(seed, "test-identity");
    (0..n)
        .map(|i| {
            NodeRecord::new(
                generate_identity(&mut rng),
                Resources::new(4, 100, 10),
                Region((i % regions as usize) as u16),
            )
        })
        .collect()
}

fn bootstrapped(n: usize, regions: u16, seed: u64) -> (Overlay, Vec<NodeRecord>) {
    let recs = population(n, regions, seed);
    let mut o = Overlay::new(OverlayConfig::default(), RngStream::new(seed, "overlay"));
    o.bootstrap(recs.clone(), SimTime(0));
    (o, recs)
}

fn view(o: &Overlay) -> Vec<(NodeId, BTreeSet<NodeId>, Option<PositionFingerprint>)> {
    o.online_nodes()
        .map(|n| (n, o.neighbors(&n), o.fingerprint(&n)))
        .collect()
}

#[test]
fn join_then_leave_restores_view() {
    let (mut o, _) = bootstrapped(40, 2, 1);
    let before = view(&o);
    let dvsps_before: Vec<_> = o.dvsps().cloned().collect();
    let newcomer = population(41, 2, 99).pop().unwrap();
    let delta = o.join(newcomer.clone(), SimTime(10)).unwrap();
    assert!(delta.changed.len() > 1);
    o.leave(newcomer.id, SimTime(11)).unwrap();
    assert_eq!(view(&o), before);
    assert_eq!(o.dvsps().cloned().collect::<Vec<_>>(), dvsps_before);
}

#[test]
fn duplicate_join_and_unknown_leave() {
    let (mut o, recs) = bootstrapped(10, 1, 2);
    assert_eq!(
        o.join(recs[0].clone(), SimTime(1)),
        Err(OverlayError::DuplicateJoin(recs[0].id))
    );
    let stranger = population(1, 1, 77).pop().unwrap();
    assert_eq!(
        o.leave(stranger.id, SimTime(1)),
        Err(OverlayError::UnknownLeave(stranger.id))
    );
}

#[test]
fn member_departure_bumps_epoch_next_round() {
    let (mut o, _) = bootstrapped(30, 1, 3);
    let sp = o.dvsp(Region(0)).unwrap().clone();
    let delta = o.leave(sp.members[0], SimTime(500)).unwrap();
    assert_eq!(delta.flagged, vec![Region(0)]);
    // One gossip round later.
    let reformed = o.maintain_dvsps(SimTime(1000));
    assert_eq!(reformed.len(), 1);
    let after = o.dvsp(Region(0)).unwrap();
    assert_eq!(after.epoch, sp.epoch + 1);
    assert_eq!(after.size(), 5);
    assert!(after.members.iter().all(|m| o.is_online(m)));
}

#[test]
fn non_member_departure_only_touches_neighbours() {
    let (mut o, recs) = bootstrapped(30, 1, 4);
    let sp = o.dvsp(Region(0)).unwrap().clone();
    let victim = recs.iter().find(|r| !sp.members.contains(&r.id)).unwrap().id;
    let neighbours = o.neighbors(&victim);
    let fps: BTreeMap<NodeId, _> = o.online_nodes().map(|n| (n, o.fingerprint(&n))).collect();
    let delta = o.leave(victim, SimTime(1)).unwrap();
    assert!(delta.flagged.is_empty());
    assert!(o.maintain_dvsps(SimTime(2)).is_empty());
    for n in o.online_nodes() {
        if o.fingerprint(&n) != fps[&n] {
            assert!(delta.changed.contains(&n), "unexpected fingerprint change");
        }
    }
    for n in &neighbours {
        assert_ne!(o.fingerprint(n), fps[n]);
    }
}

#[test]
fn dvsp_clamps_to_region_population() {
    let recs = population(3, 3, 5);
    let mut o = Overlay::new(OverlayConfig::default(), RngStream::new(5, "o"));
    o.bootstrap(recs, SimTime(0));
    let sp = o.form_dvsp(Region(1), SimTime(5)).unwrap();
    assert_eq!(sp.size(), 1);
    assert_eq!(sp.quorum(), 1);
    assert_eq!(o.form_dvsp(Region(9), SimTime(5)), Err(OverlayError::EmptyRegion(Region(9))));
}

#[test]
fn dvsp_prefers_longest_uptime() {
    let recs = population(8, 1, 6);
    let mut o = Overlay::new(OverlayConfig::default(), RngStream::new(6, "o"));
    for (i, r) in recs.iter().enumerate() {
        o.join(r.clone(), SimTime(i as u64 * 10)).unwrap();
    }
    let sp = o.form_dvsp(Region(0), SimTime(100)).unwrap();
    let expected: Vec<NodeId> = recs[..5].iter().map(|r| r.id).collect();
    assert_eq!(sp.members, expected);
}

#[test]
fn half_the_super_peer_killed_is_restored_in_one_round() {
    for seed in 1..=10 {
        let (mut o, _) = bootstrapped(60, 2, seed);
        let sp = o.dvsp(Region(0)).unwrap().clone();
        let kill = sp.size() / 2;
        for m in &sp.members[..kill] {
            o.leave(*m, SimTime(100)).unwrap();
        }
        assert!(o.has_quorum(o.dvsp(Region(0)).unwrap()));
        o.maintain_dvsps(SimTime(1000));
        let now = o.dvsp(Region(0)).unwrap();
        assert!(now.epoch > sp.epoch);
        assert_eq!(now.size(), 5);
    }
}

fn hand_built() -> (Overlay, Vec<NodeId>) {
    let recs = population(4, 1, 8);
    let mut o = Overlay::new(OverlayConfig::default(), RngStream::new(8, "o"));
    for r in &recs {
        o.insert_online(r.clone(), SimTime(0)).unwrap();
    }
    let ids: Vec<NodeId> = recs.iter().map(|r| r.id).collect();
    o.connect(ids[0], ids[1], 5).unwrap();
    o.connect(ids[1], ids[2], 7).unwrap();
    o.connect(ids[0], ids[2], 20).unwrap();
    (o, ids)
}

#[test]
fn route_cases() {
    let (mut o, ids) = hand_built();
    assert_eq!(o.route(ids[0], ids[0], 50, SimTime(9)), Ok(SimTime(9)));
    assert_eq!(o.route(ids[0], ids[2], 0, SimTime(100)), Ok(SimTime(112)));
    // Bottleneck bandwidth 10: 25 units add ceil(2.5) = 3 ticks.
    assert_eq!(o.route(ids[0], ids[2], 25, SimTime(100)), Ok(SimTime(115)));
    // ids[3] has no links.
    assert_eq!(
        o.route(ids[0], ids[3], 0, SimTime(0)),
        Err(OverlayError::Unreachable(ids[3]))
    );
    o.leave(ids[2], SimTime(1)).unwrap();
    assert_eq!(
        o.route(ids[0], ids[2], 0, SimTime(1)),
        Err(OverlayError::Unreachable(ids[2]))
    );
}

/// Floyd-Warshall over the online adjacency, independent of the Dijkstra path.
fn all_pairs(o: &Overlay) -> BTreeMap<(NodeId, NodeId), u64> {
    let nodes: Vec<NodeId> = o.online_nodes().collect();
    let n = nodes.len();
    let inf = u64::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for i in 0..n {
        d[i][i] = 0;
        for (m, link) in &o.adj[&nodes[i]] {
            let j = nodes.iter().position(|x| x == m).unwrap();
            d[i][j] = d[i][j].min(link.latency);
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    for i in 0..n {
        for j in 0..n {
            out.insert((nodes[i], nodes[j]), d[i][j]);
        }
    }
    out
}

#[test]
fn dijkstra_matches_floyd_warshall() {
    let (mut o, recs) = bootstrapped(48, 3, 12);
    for r in recs.iter().step_by(7) {
        o.leave(r.id, SimTime(5)).unwrap();
    }
    let oracle = all_pairs(&o);
    let nodes: Vec<NodeId> = o.online_nodes().collect();
    for a in &nodes {
        for b in &nodes {
            assert_eq!(o.path_delay(*a, *b, 0).unwrap(), oracle[&(*a, *b)]);
        }
    }
}

#[test]
fn single_deletion_keeps_overlay_connected() {
    let (o, recs) = bootstrapped(200, 4, 21);
    assert!(o.is_connected());
    for r in &recs {
        assert!(o.degree(&r.id) >= 3);
        assert!(o.is_connected_without(Some(r.id)));
    }
}

#[test]
fn churn_keeps_min_degree_and_connectivity() {
    let (mut o, recs) = bootstrapped(120, 3, 22);
    let mut rng = RngStream::new(22, "churn-test");
    let mut offline: Vec<NodeRecord> = Vec::new();
    for step in 0..300u64 {
        if !offline.is_empty() && rng.bernoulli(0.5) {
            let i = rng.below(offline.len() as u64) as usize;
            let r = offline.swap_remove(i);
            o.join(r, SimTime(step)).unwrap();
        } else {
            let online: Vec<NodeId> = o.online_nodes().collect();
            let victim = online[rng.below(online.len() as u64) as usize];
            o.leave(victim, SimTime(step)).unwrap();
            offline.push(recs.iter().find(|r| r.id == victim).unwrap().clone());
        }
        for n in o.online_nodes() {
            let expected = PositionFingerprint::of(&o.neighbors(&n));
            assert_eq!(o.fingerprint(&n), Some(expected));
        }
    }
    assert!(o.online_nodes().all(|n| o.degree(&n) >= 3));
}

fn ledger_for(ids: &[NodeId]) -> Ledger {
    let mut l = Ledger::new();
    for id in ids {
        l.open_account(*id, 10, 0).unwrap();
    }
    l
}

#[test]
fn empty_transaction_commits() {
    let (o, recs) = bootstrapped(10, 1, 30);
    let ids: Vec<NodeId> = recs.iter().map(|r| r.id).collect();
    let mut l = ledger_for(&ids);
    let before = l.clone();
    let sp = o.dvsp(Region(0)).unwrap().clone();
    let out = o.execute_transaction(&sp, &[], &mut l, SimTime(1)).unwrap();
    assert_eq!(out, TxOutcome::Commit(vec![]));
    assert_eq!(l, before);
}

#[test]
fn offline_receiver_aborts() {
    let (mut o, recs) = bootstrapped(10, 1, 31);
    let ids: Vec<NodeId> = recs.iter().map(|r| r.id).collect();
    let mut l = ledger_for(&ids);
    let sp = o.dvsp(Region(0)).unwrap().clone();
    let receiver = *ids.iter().find(|i| !sp.members.contains(i)).unwrap();
    o.leave(receiver, SimTime(1)).unwrap();
    let before = l.clone();
    let ops = [LedgerOp::Transfer {
        from: sp.members[0],
        to: receiver,
        amount: 3,
        reason: TransferReason::ServicePayment,
    }];
    let out = o.execute_transaction(&sp, &ops, &mut l, SimTime(2)).unwrap();
    assert_eq!(out, TxOutcome::Abort(TxAbort::ParticipantOffline(receiver)));
    assert_eq!(l, before);
}

#[test]
fn failing_third_op_rolls_back_everything() {
    let (o, recs) = bootstrapped(10, 1, 32);
    let ids: Vec<NodeId> = recs.iter().map(|r| r.id).collect();
    let mut l = ledger_for(&ids);
    let snapshot = l.snapshot();
    let sp = o.dvsp(Region(0)).unwrap().clone();
    let op = |from: usize, to: usize, amount: u64| LedgerOp::Transfer {
        from: ids[from],
        to: ids[to],
        amount,
        reason: TransferReason::ServicePayment,
    };
    let ops = [op(0, 1, 5), op(1, 2, 12), op(3, 4, 11)];
    let out = o.execute_transaction(&sp, &ops, &mut l, SimTime(3)).unwrap();
    assert!(matches!(out, TxOutcome::Abort(TxAbort::Rejected(_))));
    assert_eq!(l.snapshot(), snapshot);
}

#[test]
fn lost_quorum_refuses_to_coordinate() {
    let (mut o, recs) = bootstrapped(10, 1, 33);
    let ids: Vec<NodeId> = recs.iter().map(|r| r.id).collect();
    let mut l = ledger_for(&ids);
    let sp = o.dvsp(Region(0)).unwrap().clone();
    for m in &sp.members[..3] {
        o.leave(*m, SimTime(1)).unwrap();
    }
    assert_eq!(
        o.execute_transaction(&sp, &[], &mut l, SimTime(2)),
        Err(OverlayError::NoQuorum(Region(0)))
    );
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn transactions_are_all_or_nothing(
            seed in 0u64..1000,
            ops in proptest::collection::vec((0usize..6, 0usize..6, 0u64..25), 0..6)
        ) {
            let (o, recs) = bootstrapped(6, 1, seed);
            let ids: Vec<NodeId> = recs.iter().map(|r| r.id).collect();
            let mut l = ledger_for(&ids);
            let pre = l.balances();
            let ops: Vec<LedgerOp> = ops.into_iter().map(|(a, b, amount)| LedgerOp::Transfer {
                from: ids[a], to: ids[b], amount, reason: TransferReason::ServicePayment,
            }).collect();
            // Expected post-state computed by applying ops one at a time to a map.
            let mut expect = pre.clone();
            let mut ok = true;
            for op in &ops {
                if let LedgerOp::Transfer { from, to, amount, .. } = op {
                    if expect[from] - (*amount as i64) < 0 { ok = false; break; }
                    *expect.get_mut(from).unwrap() -= *amount as i64;
                    *expect.get_mut(to).unwrap() += *amount as i64;
                }
            }
            let sp = o.dvsp(Region(0)).unwrap().clone();
            let out = o.execute_transaction(&sp, &ops, &mut l, SimTime(1)).unwrap();
            prop_assert_eq!(out.is_commit(), ok);
            if ok { prop_assert_eq!(l.balances(), expect); } else { prop_assert_eq!(l.balances(), pre); }
        }
    }
}
