use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use gradpoly::config::parse_config;
use gradpoly::run::{run_scenario, RunOptions};
use gradpoly::trace::{certify, read_trace};

#[test]
fn written_trace_reads_back_identically() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/unloaded.toml");
    let mut cfg = parse_config(&path).unwrap();
    cfg.time.steps = 2;
    cfg.grid.nodes = [5, 5, 5];
    let dir = tempfile::tempdir().unwrap();
    let rep = run_scenario(&cfg, &RunOptions { out_dir: dir.path().to_path_buf(), verbose: true }).unwrap();
    assert!(rep.verdicts.all_pass(), "{:?}", rep.verdicts.failures);

    let parsed = read_trace(BufReader::new(File::open(&rep.trace_path).unwrap())).unwrap();
    assert_eq!(parsed.header.config, cfg);
    assert_eq!(parsed.trace.steps, rep.trace.steps);
    assert_eq!(parsed.trace.tolerance, rep.trace.tolerance);
    assert_eq!(parsed.summary.as_ref().unwrap().verdicts, rep.verdicts);
    // verbose runs log every solver iteration
    assert!(!parsed.iterations.is_empty());
    assert!(certify(&parsed).passes());

    let reread = gradpoly::config::parse_config(&dir.path().join("scenario.toml")).unwrap();
    assert_eq!(reread, cfg);
}
