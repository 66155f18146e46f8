use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Profiling,
    VulnExtraction,
    Inspection,
    Verification,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Profiling,
        Stage::VulnExtraction,
        Stage::Inspection,
        Stage::Verification,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Profiling => "profiling",
            Stage::VulnExtraction => "vuln-extraction",
            Stage::Inspection => "inspection",
            Stage::Verification => "verification",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl Usage {
    pub fn new(input_tokens: u64, output_tokens: u64) -> Self {
        Self {
            input_tokens,
            output_tokens,
        }
    }

    pub fn add(&mut self, other: Usage) {
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
    }

    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

/// One backend round trip as recorded by the ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub stage: Stage,
    pub prompt_id: String,
    pub usage: Usage,
}

/// Serializable view of a ledger at one point in time.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub stages: BTreeMap<Stage, Usage>,
    pub exchanges: Vec<Exchange>,
}

impl LedgerSnapshot {
    pub fn total(&self) -> Usage {
        let mut t = Usage::default();
        for u in self.stages.values() {
            t.add(*u);
        }
        t
    }

    pub fn exchange_total(&self) -> Usage {
        let mut t = Usage::default();
        for e in &self.exchanges {
            t.add(e.usage);
        }
        t
    }

    pub fn stage(&self, stage: Stage) -> Usage {
        self.stages.get(&stage).copied().unwrap_or_default()
    }

    pub fn merge(&mut self, other: &LedgerSnapshot) {
        for (stage, usage) in &other.stages {
            self.stages.entry(*stage).or_default().add(*usage);
        }
        self.exchanges.extend(other.exchanges.iter().cloned());
    }

    /// Stage counters agree with the raw exchange log, per stage and overall.
    pub fn is_conserved(&self) -> bool {
        let mut per_stage: BTreeMap<Stage, Usage> = BTreeMap::new();
        for e in &self.exchanges {
            per_stage.entry(e.stage).or_default().add(e.usage);
        }
        let nonzero = |m: &BTreeMap<Stage, Usage>| -> BTreeMap<Stage, Usage> {
            m.iter()
                .filter(|(_, u)| u.total() > 0)
                .map(|(s, u)| (*s, *u))
                .collect()
        };
        nonzero(&per_stage) == nonzero(&self.stages) && self.total() == self.exchange_total()
    }
}

/// Per-stage token accounting shared by every component that talks to a
/// backend. Increments are serialized.
#[derive(Debug, Default)]
pub struct TokenLedger {
    inner: Mutex<LedgerSnapshot>,
}

impl TokenLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, stage: Stage, prompt_id: &str, usage: Usage) {
        let mut inner = self.inner.lock().expect("ledger poisoned");
        inner.stages.entry(stage).or_default().add(usage);
        inner.exchanges.push(Exchange {
            stage,
            prompt_id: prompt_id.to_string(),
            usage,
        });
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        self.inner.lock().expect("ledger poisoned").clone()
    }

    pub fn exchange_count(&self) -> usize {
        self.inner.lock().expect("ledger poisoned").exchanges.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_sums_match_exchanges() {
        let ledger = TokenLedger::new();
        ledger.record(Stage::Profiling, "a", Usage::new(10, 2));
        ledger.record(Stage::Inspection, "b", Usage::new(5, 5));
        ledger.record(Stage::Profiling, "c", Usage::new(1, 1));
        let snap = ledger.snapshot();
        assert_eq!(snap.stage(Stage::Profiling), Usage::new(11, 3));
        assert_eq!(snap.total(), snap.exchange_total());
        assert!(snap.is_conserved());
    }

    #[test]
    fn stage_names_serialize_kebab() {
        assert_eq!(
            serde_json::to_string(&Stage::VulnExtraction).unwrap(),
            "\"vuln-extraction\""
        );
    }
}
