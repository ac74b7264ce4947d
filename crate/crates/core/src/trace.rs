//! Line-delimited JSON trace: a header, optional per-iteration records,
//! one record per time step, and a closing summary. Every line is an
//! object whose `record` field names its kind.

use serde::{Deserialize, Serialize};
use std::io::{self, BufRead, Write};
use thiserror::Error;

use crate::config::ScenarioConfig;
use crate::evolution::{certify_trace, EvolutionTrace, StepRecord, Verdicts};
use crate::solver::{IterationRecord, SolverParams};

pub const TRACE_FORMAT: &str = "gradpoly-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    pub tolerance: f64,
    pub volume: f64,
    pub config: ScenarioConfig,
    /// Solver parameters after applying defaults.
    pub solver: SolverParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationEntry {
    pub step: usize,
    #[serde(flatten)]
    pub record: IterationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub steps: usize,
    pub total_dissipation: f64,
    pub final_energy: f64,
    pub final_energy_balance_residual: f64,
    pub verdicts: Verdicts,
}

impl TraceSummary {
    pub fn from_trace(trace: &EvolutionTrace, verdicts: Verdicts) -> Self {
        let last = trace.steps.last();
        Self {
            steps: trace.steps.len().saturating_sub(1),
            total_dissipation: last.map_or(0.0, |s| s.cumulative_dissipation),
            final_energy: last.map_or(0.0, |s| s.energy.total),
            final_energy_balance_residual: last.map_or(0.0, |s| s.energy_balance_residual),
            verdicts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceRecord {
    Header(TraceHeader),
    Iteration(IterationEntry),
    Step(StepRecord),
    Summary(TraceSummary),
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace is empty")]
    Empty,
    #[error("trace line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("trace has no header record")]
    MissingHeader,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, rec: &TraceRecord) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// A trace read back from disk.
#[derive(Debug, Clone)]
pub struct ParsedTrace {
    pub header: TraceHeader,
    pub trace: EvolutionTrace,
    pub iterations: Vec<IterationEntry>,
    pub summary: Option<TraceSummary>,
}

pub fn read_trace(r: impl BufRead) -> Result<ParsedTrace, TraceError> {
    let mut header = None;
    let mut steps = Vec::new();
    let mut iterations = Vec::new();
    let mut summary = None;
    let mut any = false;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        any = true;
        let rec: TraceRecord =
            serde_json::from_str(&line).map_err(|e| TraceError::Malformed { line: i + 1, message: e.to_string() })?;
        match rec {
            TraceRecord::Header(h) => {
                if h.format != TRACE_FORMAT || h.version != TRACE_VERSION {
                    return Err(TraceError::Malformed {
                        line: i + 1,
                        message: format!("unsupported trace format {} v{}", h.format, h.version),
                    });
                }
                header = Some(h);
            }
            TraceRecord::Iteration(it) => iterations.push(it),
            TraceRecord::Step(s) => steps.push(s),
            TraceRecord::Summary(s) => summary = Some(s),
        }
    }
    if !any {
        return Err(TraceError::Empty);
    }
    let header = header.ok_or(TraceError::MissingHeader)?;
    let trace = EvolutionTrace { tolerance: header.tolerance, volume: header.volume, steps };
    Ok(ParsedTrace { header, trace, iterations, summary })
}

/// Offline audit of a trace: verdicts recomputed from the step records,
/// compared with the ones recorded at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyReport {
    pub verdicts: Verdicts,
    pub recorded: Option<Verdicts>,
    pub matches_recorded: bool,
}

impl CertifyReport {
    pub fn passes(&self) -> bool {
        self.verdicts.all_pass() && self.matches_recorded
    }
}

pub fn certify(parsed: &ParsedTrace) -> CertifyReport {
    let mut verdicts = certify_trace(&parsed.trace);
    if parsed.trace.steps.len() != parsed.header.config.time.steps + 1 {
        verdicts.failures.push(format!(
            "trace holds {} step records, the scenario has {} steps",
            parsed.trace.steps.len(),
            parsed.header.config.time.steps + 1
        ));
    }
    let recorded = parsed.summary.as_ref().map(|s| s.verdicts.clone());
    let matches_recorded = recorded.as_ref().map_or(true, |r| *r == verdicts);
    CertifyReport { verdicts, recorded, matches_recorded }
}

/// One row per step of `summary.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub k: usize,
    pub t: f64,
    pub energy: f64,
    pub stored: f64,
    pub load: f64,
    pub dissipation_increment: f64,
    pub cumulative_dissipation: f64,
    pub lower: Option<f64>,
    pub middle: Option<f64>,
    pub upper: Option<f64>,
    pub lower_slack: Option<f64>,
    pub upper_slack: Option<f64>,
    pub stability_margin: f64,
    pub energy_balance_residual: f64,
    pub min_det: f64,
}

impl From<&StepRecord> for SummaryRow {
    fn from(s: &StepRecord) -> Self {
        let ts = s.two_sided.as_ref();
        Self {
            k: s.k,
            t: s.t,
            energy: s.energy.total,
            stored: s.energy.stored,
            load: s.energy.load_part,
            dissipation_increment: s.dissipation_increment,
            cumulative_dissipation: s.cumulative_dissipation,
            lower: ts.map(|x| x.lower),
            middle: ts.map(|x| x.middle),
            upper: ts.map(|x| x.upper),
            lower_slack: ts.map(|x| x.lower_slack),
            upper_slack: ts.map(|x| x.upper_slack),
            stability_margin: s.stability_margin,
            energy_balance_residual: s.energy_balance_residual,
            min_det: s.min_det,
        }
    }
}

pub fn write_summary_csv(steps: &[StepRecord], w: impl Write) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for s in steps {
        out.serialize(SummaryRow::from(s))?;
    }
    out.flush()?;
    Ok(())
}
