use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::sync::Mutex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Model,
    Embedding,
    Config,
}

/// One simulated transfer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub sender: String,
    pub receiver: String,
    /// Device on the edge side of the transfer.
    pub device: usize,
    pub kind: PayloadKind,
    pub bytes: u64,
    pub round: u32,
}

/// Append-only transfer record. Appends may come from several threads;
/// [`CommLedger::entries`] returns them sorted by `(round, device, kind)`.
#[derive(Debug, Default)]
pub struct CommLedger {
    entries: Mutex<Vec<LedgerEntry>>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&self, entry: LedgerEntry) -> Result<()> {
        if entry.bytes == 0 {
            return Err(Error::Config("ledger entries must carry at least one byte".into()));
        }
        self.entries.lock().expect("ledger lock").push(entry);
        Ok(())
    }

    /// Records a device → server upload in `round`.
    pub fn upload(&self, device: usize, kind: PayloadKind, bytes: u64, round: u32) -> Result<()> {
        self.append(LedgerEntry {
            sender: format!("device-{device}"),
            receiver: "server".into(),
            device,
            kind,
            bytes,
            round,
        })
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        let mut e = self.entries.lock().expect("ledger lock").clone();
        e.sort_by_key(|x| (x.round, x.device, x.kind));
        e
    }

    pub fn from_entries(entries: Vec<LedgerEntry>) -> Self {
        CommLedger {
            entries: Mutex::new(entries),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries()).expect("ledger serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(Self::from_entries(serde_json::from_str(text)?))
    }
}

/// Total model bytes uploaded, `Σ_n |m_n|`.
pub fn comm_cost(ledger: &[LedgerEntry]) -> u64 {
    kind_bytes(ledger, PayloadKind::Model)
}

pub fn kind_bytes(ledger: &[LedgerEntry], kind: PayloadKind) -> u64 {
    ledger.iter().filter(|e| e.kind == kind).map(|e| e.bytes).sum()
}

/// Multi-round baseline: each of `rounds` rounds downloads and uploads a
/// `local_bytes` model for each of `devices` devices.
pub fn baseline_comm_cost(devices: u64, local_bytes: u64, rounds: u64) -> u64 {
    rounds * devices * 2 * local_bytes
}
