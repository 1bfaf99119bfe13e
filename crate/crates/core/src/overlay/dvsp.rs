//! Distributed virtual super-peers and the transactions they coordinate.

use std::collections::BTreeSet;

use serde::Serialize;

use super::{NodeId, Overlay, OverlayError, Region};
use crate::engine::SimTime;
use crate::ledger::{Ledger, LedgerError, LedgerOp, Transfer};

/// A coordinating role filled jointly by a set of online peers of one region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VirtualSuperPeer {
    pub region: Region,
    /// In selection order: longest uptime first.
    pub members: Vec<NodeId>,
    pub epoch: u64,
}

impl VirtualSuperPeer {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Members required for a coordination act: `floor(m/2) + 1`.
    pub fn quorum(&self) -> usize {
        self.members.len() / 2 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TxAbort {
    ParticipantOffline(NodeId),
    Rejected(LedgerError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TxOutcome {
    Commit(Vec<Transfer>),
    Abort(TxAbort),
}

impl TxOutcome {
    pub fn is_commit(&self) -> bool {
        matches!(self, TxOutcome::Commit(_))
    }
}

impl Overlay {
    /// Choose the `dvsp_size` longest-uptime online nodes of `region`
    /// (ties by ascending id) and bump the region's epoch.
    pub fn form_dvsp(&mut self, region: Region, now: SimTime) -> Result<VirtualSuperPeer, OverlayError> {
        let mut candidates: Vec<(u64, NodeId)> = self
            .online_in(region)
            .map(|id| (self.uptime(&id, now).unwrap_or(0), id))
            .collect();
        if candidates.is_empty() {
            return Err(OverlayError::EmptyRegion(region));
        }
        candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let members: Vec<NodeId> = candidates
            .into_iter()
            .take(self.cfg.dvsp_size.max(1))
            .map(|(_, id)| id)
            .collect();
        let epoch = self.dvsps.get(&region).map_or(0, |d| d.epoch) + 1;
        let sp = VirtualSuperPeer {
            region,
            members,
            epoch,
        };
        self.dvsps.insert(region, sp.clone());
        self.flagged.remove(&region);
        self.counters.reformations += 1;
        Ok(sp)
    }

    pub fn dvsp(&self, region: Region) -> Option<&VirtualSuperPeer> {
        self.dvsps.get(&region)
    }

    pub fn dvsps(&self) -> impl Iterator<Item = &VirtualSuperPeer> {
        self.dvsps.values()
    }

    pub fn is_flagged(&self, region: Region) -> bool {
        self.flagged.contains(&region)
    }

    fn needs_reformation(&self, region: Region) -> bool {
        let online = self.online_in(region).count();
        match self.dvsps.get(&region) {
            None => online > 0,
            Some(sp) => {
                self.flagged.contains(&region)
                    || sp.members.iter().any(|m| !self.is_online(m))
                    || sp.size() < online.min(self.cfg.dvsp_size.max(1))
            }
        }
    }

    /// Gossip-round maintenance: re-form every super-peer that lost a member
    /// or is below its attainable size. Returns the re-formed ones.
    pub fn maintain_dvsps(&mut self, now: SimTime) -> Vec<VirtualSuperPeer> {
        let mut out = Vec::new();
        for region in self.regions() {
            if !self.needs_reformation(region) {
                continue;
            }
            match self.form_dvsp(region, now) {
                Ok(sp) => out.push(sp),
                Err(_) => {
                    self.flagged.remove(&region);
                }
            }
        }
        out
    }

    pub fn online_members(&self, sp: &VirtualSuperPeer) -> usize {
        sp.members.iter().filter(|m| self.is_online(m)).count()
    }

    pub fn has_quorum(&self, sp: &VirtualSuperPeer) -> bool {
        !sp.members.is_empty() && self.online_members(sp) >= sp.quorum()
    }

    /// The super-peer of `region` if it holds quorum, else the first other
    /// region's super-peer that does.
    pub fn coordinator_for(&self, region: Region) -> Option<&VirtualSuperPeer> {
        if let Some(sp) = self.dvsps.get(&region) {
            if self.has_quorum(sp) {
                return Some(sp);
            }
        }
        self.dvsps.values().find(|sp| self.has_quorum(sp))
    }

    /// Prepare/commit of a batch of ledger ops under `coordinator`.
    ///
    /// Accounts that belong to overlay nodes must be online at prepare time;
    /// accounts with no overlay presence (developers) always participate.
    pub fn execute_transaction(
        &self,
        coordinator: &VirtualSuperPeer,
        ops: &[LedgerOp],
        ledger: &mut Ledger,
        now: SimTime,
    ) -> Result<TxOutcome, OverlayError> {
        if !self.has_quorum(coordinator) {
            return Err(OverlayError::NoQuorum(coordinator.region));
        }
        let parties: BTreeSet<NodeId> = ops.iter().flat_map(|op| op.parties()).collect();
        for p in parties {
            if self.records.contains_key(&p) && !self.is_online(&p) {
                return Ok(TxOutcome::Abort(TxAbort::ParticipantOffline(p)));
            }
        }
        match ledger.apply_batch(ops, now) {
            Ok(applied) => Ok(TxOutcome::Commit(applied)),
            Err(e) => Ok(TxOutcome::Abort(TxAbort::Rejected(e))),
        }
    }
}
