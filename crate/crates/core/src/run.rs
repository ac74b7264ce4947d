//! Scenario runs: evolution plus trace, summary table and field dumps in
//! an output directory.
//!
//! Layout of the output directory:
//!
//! ```text
//! scenario.toml          the configuration as run
//! trace.jsonl            header, [iteration...], step..., summary
//! summary.csv            one row per step
//! dumps/step_KKKK_deformation.gpf, dumps/step_KKKK_fractions.gpf
//! ```

use log::info;
use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::config::{ConfigError, ScenarioConfig};
use crate::dump::FieldDump;
use crate::evolution::{certify_trace, run_evolution, EvolutionError, EvolutionObserver, EvolutionTrace, StepRecord, Verdicts};
use crate::fields::{DeformationField, InternalStateField};
use crate::solver::IncrementResult;
use crate::trace::{write_summary_csv, IterationEntry, TraceHeader, TraceRecord, TraceSummary, TraceWriter, TRACE_FORMAT, TRACE_VERSION};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error("writing {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Record per-iteration solver diagnostics in the trace.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub trace: EvolutionTrace,
    pub verdicts: Verdicts,
    pub out_dir: PathBuf,
    pub trace_path: PathBuf,
    pub summary_path: PathBuf,
    pub dumps: Vec<PathBuf>,
}

pub const TRACE_FILE: &str = "trace.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "scenario.toml";

struct Recorder {
    writer: TraceWriter<BufWriter<File>>,
    trace_path: PathBuf,
    dump_dir: PathBuf,
    stride: usize,
    last_step: usize,
    dumps: Vec<PathBuf>,
    error: Option<RunError>,
}

impl Recorder {
    fn record(&mut self, rec: &TraceRecord) {
        if self.error.is_none() {
            if let Err(source) = self.writer.write(rec) {
                self.error = Some(RunError::Output { path: self.trace_path.clone(), source });
            }
        }
    }

    fn dump(&mut self, k: usize, y: &DeformationField, z: &InternalStateField) {
        let grid = y.grid();
        let ydata: Vec<f64> = y.values.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let parts = [
            (format!("step_{k:04}_deformation.gpf"), FieldDump::new("deformation", grid, 3, ydata)),
            (format!("step_{k:04}_fractions.gpf"), FieldDump::new("fractions", grid, z.components(), z.as_slice().to_vec())),
        ];
        for (name, d) in parts {
            let path = self.dump_dir.join(name);
            let res = File::create(&path).and_then(|f| d.write_to(BufWriter::new(f)));
            match res {
                Ok(()) => self.dumps.push(path),
                Err(source) => {
                    self.error.get_or_insert(RunError::Output { path, source });
                }
            }
        }
    }
}

impl EvolutionObserver for Recorder {
    fn on_step(&mut self, record: &StepRecord, y: &DeformationField, z: &InternalStateField) {
        self.record(&TraceRecord::Step(record.clone()));
        let k = record.k;
        if k == self.last_step || (self.stride > 0 && k % self.stride == 0) {
            self.dump(k, y, z);
        }
    }

    fn on_increment(&mut self, k: usize, result: &IncrementResult) {
        for it in &result.iteration_log {
            self.record(&TraceRecord::Iteration(IterationEntry { step: k, record: *it }));
        }
    }
}

fn out_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Output { path: path.to_path_buf(), source }
}

/// Run a validated scenario, writing every artifact under `opts.out_dir`.
pub fn run_scenario(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunReport, RunError> {
    let mut setup = cfg.setup()?;
    if opts.verbose {
        setup.solver.record_iterations = true;
    }
    let out = &opts.out_dir;
    let dump_dir = out.join("dumps");
    fs::create_dir_all(&dump_dir).map_err(out_err(&dump_dir))?;
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml_string()).map_err(out_err(&cfg_path))?;

    let trace_path = out.join(TRACE_FILE);
    let file = File::create(&trace_path).map_err(out_err(&trace_path))?;
    let mut rec = Recorder {
        writer: TraceWriter::new(BufWriter::new(file)),
        trace_path: trace_path.clone(),
        dump_dir,
        stride: cfg.dump_stride,
        last_step: cfg.time.steps,
        dumps: Vec::new(),
        error: None,
    };
    rec.record(&TraceRecord::Header(TraceHeader {
        format: TRACE_FORMAT.into(),
        version: TRACE_VERSION,
        tolerance: setup.certificate_tolerance(),
        volume: setup.grid.volume(),
        config: cfg.clone(),
        solver: setup.solver.clone(),
    }));
    info!("running {} steps on a {:?} grid into {}", cfg.time.steps, cfg.grid.nodes, out.display());
    let trace = run_evolution(&setup, &mut rec)?;
    let verdicts = certify_trace(&trace);
    rec.record(&TraceRecord::Summary(TraceSummary::from_trace(&trace, verdicts.clone())));
    if let Some(e) = rec.error.take() {
        return Err(e);
    }

    let summary_path = out.join(SUMMARY_FILE);
    let f = File::create(&summary_path).map_err(out_err(&summary_path))?;
    write_summary_csv(&trace.steps, BufWriter::new(f)).map_err(|e| RunError::Output {
        path: summary_path.clone(),
        source: io::Error::other(e),
    })?;
    Ok(RunReport { trace, verdicts, out_dir: out.clone(), trace_path, summary_path, dumps: rec.dumps })
}
