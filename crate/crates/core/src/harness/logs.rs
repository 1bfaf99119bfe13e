//! Event logs of a run. The report is computed from these alone.

use std::io;
use std::path::Path;

use serde::Serialize;

use crate::evolution::{write_adoptions_csv, AdoptionEvent};
use crate::ledger::{write_transfers_csv, Transfer};
use crate::overlay::NodeId;
use crate::services::{write_placements_csv, PlacementRecord};

/// Terminal state of one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Requester was offline when the request was due; never issued.
    Offline,
    /// Ran to the end within its budget and the response was delivered.
    Completed,
    /// Stopped on budget exhaustion.
    Terminated,
    RejectedFunds,
    /// No instance could be found or deployed.
    Unavailable,
    /// The host went down while the request was queued or running.
    HostFailed,
    /// No replica of the data it needed was reachable.
    StorageUnavailable,
    PrivacyDenied,
    /// The requester left before the response arrived.
    Abandoned,
    /// A video session whose throughput stayed below the floor.
    Degraded,
    /// Still in flight at the horizon.
    Pending,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Offline => "offline",
            Outcome::Completed => "completed",
            Outcome::Terminated => "terminated",
            Outcome::RejectedFunds => "rejected_funds",
            Outcome::Unavailable => "unavailable",
            Outcome::HostFailed => "host_failed",
            Outcome::StorageUnavailable => "storage_unavailable",
            Outcome::PrivacyDenied => "privacy_denied",
            Outcome::Abandoned => "abandoned",
            Outcome::Degraded => "degraded",
            Outcome::Pending => "pending",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestRow {
    pub id: u64,
    pub kind: &'static str,
    pub service: String,
    pub requester: usize,
    pub region: u16,
    pub issued_at: u64,
    pub outcome: Outcome,
    pub host: Option<NodeId>,
    pub start: Option<u64>,
    pub finish: Option<u64>,
    pub completed_at: Option<u64>,
    /// 1 if the host ran the job to its end (or budget cut-off).
    pub executed: u8,
    pub declared_compute: u64,
    pub declared_storage: u64,
    pub declared_bandwidth: u64,
    pub actual_compute: u64,
    pub actual_storage: u64,
    pub actual_bandwidth: u64,
    pub terminated: u8,
    pub pulled: u8,
    pub gross: u64,
    pub net: u64,
    pub subsidy: u64,
    /// Amounts moved by the committed settlement.
    pub debit: u64,
    pub credit: u64,
    pub subsidy_paid: u64,
    pub settled: u8,
    pub page: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WriteRow {
    pub key: String,
    pub writer: NodeId,
    pub seq: u64,
    pub written_at: u64,
    pub agreed_at: Option<u64>,
    pub rounds: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MembershipRow {
    pub at: u64,
    pub node: NodeId,
    pub event: &'static str,
    pub compute: u64,
    /// 1 if the node offers resources (is in the repository).
    pub serving: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatusRow {
    pub at: u64,
    pub service: String,
    pub available: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DvspRow {
    pub at: u64,
    pub region: u16,
    pub epoch: u64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionRow {
    pub id: u64,
    pub start: u64,
    pub end: u64,
    pub outcome: Outcome,
    pub bitrate: u64,
    pub delivered: u64,
    pub expected: u64,
    pub switches: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AccountRow {
    pub owner: NodeId,
    pub opening: i64,
    pub closing: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EgressRow {
    pub node: NodeId,
    pub bytes: u64,
}

/// Facts about the run the logs do not carry themselves.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMeta {
    pub scenario: String,
    pub mode: String,
    pub seed: u64,
    pub horizon: u64,
    pub population: usize,
    pub outage: Option<[u64; 2]>,
    /// Root version of each service, in catalog order.
    pub root_versions: Vec<(String, String)>,
}

#[derive(Debug, Clone, Default)]
pub struct Logs {
    pub requests: Vec<RequestRow>,
    pub transfers: Vec<Transfer>,
    pub accounts: Vec<AccountRow>,
    pub placements: Vec<PlacementRecord>,
    pub adoptions: Vec<AdoptionEvent>,
    pub writes: Vec<WriteRow>,
    pub membership: Vec<MembershipRow>,
    pub status: Vec<StatusRow>,
    pub dvsp: Vec<DvspRow>,
    pub sessions: Vec<SessionRow>,
    pub egress: Vec<EgressRow>,
}

fn write_rows<T: Serialize, W: io::Write>(rows: &[T], out: W, header: &[&str]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn file(dir: &Path, name: &str) -> io::Result<io::BufWriter<std::fs::File>> {
    Ok(io::BufWriter::new(std::fs::File::create(dir.join(name))?))
}

impl Logs {
    pub fn write_dir(&self, dir: &Path, meta: &RunMeta) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let to_io = |e: csv::Error| io::Error::other(e.to_string());
        write_rows(
            &self.requests,
            file(dir, "requests.csv")?,
            &[
                "id", "kind", "service", "requester", "region", "issued_at", "outcome", "host", "start", "finish",
                "completed_at", "executed", "declared_compute", "declared_storage", "declared_bandwidth",
                "actual_compute", "actual_storage", "actual_bandwidth", "terminated", "pulled", "gross", "net",
                "subsidy", "debit", "credit", "subsidy_paid", "settled", "page",
            ],
        )
        .map_err(to_io)?;
        write_transfers_csv(&self.transfers, file(dir, "transfers.csv")?).map_err(to_io)?;
        write_rows(&self.accounts, file(dir, "accounts.csv")?, &["owner", "opening", "closing"]).map_err(to_io)?;
        write_placements_csv(&self.placements, file(dir, "placements.csv")?).map_err(to_io)?;
        write_adoptions_csv(&self.adoptions, file(dir, "adoptions.csv")?).map_err(to_io)?;
        write_rows(
            &self.writes,
            file(dir, "writes.csv")?,
            &["key", "writer", "seq", "written_at", "agreed_at", "rounds"],
        )
        .map_err(to_io)?;
        write_rows(
            &self.membership,
            file(dir, "membership.csv")?,
            &["at", "node", "event", "compute", "serving"],
        )
        .map_err(to_io)?;
        write_rows(&self.status, file(dir, "service_status.csv")?, &["at", "service", "available"]).map_err(to_io)?;
        write_rows(&self.dvsp, file(dir, "dvsp.csv")?, &["at", "region", "epoch", "size"]).map_err(to_io)?;
        write_rows(
            &self.sessions,
            file(dir, "sessions.csv")?,
            &["id", "start", "end", "outcome", "bitrate", "delivered", "expected", "switches"],
        )
        .map_err(to_io)?;
        write_rows(&self.egress, file(dir, "egress.csv")?, &["node", "bytes"]).map_err(to_io)?;
        let meta_json = serde_json::to_string_pretty(meta).expect("meta serialises");
        std::fs::write(dir.join("run.json"), meta_json + "\n")?;
        Ok(())
    }
}
