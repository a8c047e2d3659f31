use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub interval: usize,
    pub cores: Vec<u32>,
    pub freq_idx: Vec<usize>,
    /// Model estimate for the applied allocation, when the policy has one.
    pub predicted_p99: Option<f64>,
    pub p_violation: Option<f64>,
    pub realized_p99: f64,
    pub trust_mode: String,
    pub action: String,
}

impl DecisionRecord {
    pub fn total_cores(&self) -> u32 {
        self.cores.iter().sum()
    }
}

pub struct DecisionLogWriter<W: Write> {
    out: csv::Writer<W>,
    n_tiers: usize,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl<W: Write> DecisionLogWriter<W> {
    pub fn new(out: W, tier_names: &[String]) -> Result<Self> {
        let mut out = csv::Writer::from_writer(out);
        let mut head = vec!["interval".to_string()];
        head.extend(tier_names.iter().map(|t| format!("cores_{t}")));
        head.extend(tier_names.iter().map(|t| format!("freq_{t}")));
        head.extend(["predicted_p99", "p_violation", "realized_p99", "trust_mode", "action"].map(String::from));
        out.write_record(&head)?;
        Ok(DecisionLogWriter {
            out,
            n_tiers: tier_names.len(),
        })
    }

    pub fn write(&mut self, r: &DecisionRecord) -> Result<()> {
        if r.cores.len() != self.n_tiers || r.freq_idx.len() != self.n_tiers {
            return Err(Error::input("decision record tier count differs from the log header"));
        }
        let mut row = vec![r.interval.to_string()];
        row.extend(r.cores.iter().map(u32::to_string));
        row.extend(r.freq_idx.iter().map(usize::to_string));
        row.push(opt(r.predicted_p99));
        row.push(opt(r.p_violation));
        row.push(r.realized_p99.to_string());
        row.push(r.trust_mode.clone());
        row.push(r.action.clone());
        self.out.write_record(&row)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("<decision log>", e))
    }
}
