use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{EngineError, GateMode, Strategy, Supervision};

/// Diagnostics of one enhancer update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub strategy: Strategy,
    pub supervision: Supervision,
    pub gate_mode: GateMode,
    pub loss_ip: f64,
    /// Sum over auxiliaries.
    pub loss_vr: f64,
    /// Smallest cosine over auxiliaries (0 without an auxiliary).
    pub cosine_s: f64,
    /// Every auxiliary contributed to the update.
    pub gate_open: bool,
    pub norm_g_ip: f64,
    /// Norm of the summed auxiliary gradients in enhancer space.
    pub norm_g_vr: f64,
    /// `⟨d, g_ip⟩` for the applied direction `d`.
    pub inner_product_check: f64,
}

/// Column order of `steps.csv`.
pub const STEP_COLUMNS: [&str; 12] = [
    "step",
    "epoch",
    "strategy",
    "supervision",
    "gate_mode",
    "loss_ip",
    "loss_vr",
    "cosine_s",
    "gate_open",
    "norm_g_ip",
    "norm_g_vr",
    "inner_product_check",
];

pub fn write_step_records<W: Write>(out: W, records: &[StepRecord]) -> Result<(), EngineError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(STEP_COLUMNS)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_step_records<R: std::io::Read>(input: R) -> Result<Vec<StepRecord>, EngineError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().ne(STEP_COLUMNS.iter().copied()) {
        return Err(EngineError::Config(format!("unexpected step columns {headers:?}")));
    }
    r.deserialize().map(|row| row.map_err(EngineError::from)).collect()
}
