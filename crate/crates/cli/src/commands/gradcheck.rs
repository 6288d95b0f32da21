use std::path::Path;

use lesionforge::gradsuite::{run_grad_suite, GradSuiteConfig};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::record::Recorder;

/// Runs the finite-difference suite on seeds `seed..seed+5`. The report is
/// printed and, when `out` is given, written there as text and JSON.
pub fn run(cfg: Option<&ExperimentConfig>, seed: u64, out: Option<&Path>, inject_fault: Option<String>) -> CliResult<()> {
    let suite = GradSuiteConfig {
        seeds: (seed..seed + 5).collect(),
        inject_fault,
    };
    let report = run_grad_suite(&suite)?;
    print!("{}", report.to_text());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mut rec = Recorder::new("gradcheck", dir);
        let stamp = cfg.map_or(format!("seed={seed}"), ExperimentConfig::stamp);
        let txt = dir.join("gradcheck.txt");
        std::fs::write(&txt, format!("# {stamp}\n{}", report.to_text())).map_err(|e| CliError::io(&txt, e))?;
        let json = dir.join("gradcheck.json");
        let body = serde_json::json!({
            "config_digest": cfg.map(ExperimentConfig::digest),
            "seed": seed,
            "report": report,
        });
        std::fs::write(&json, serde_json::to_string_pretty(&body).expect("report serializes") + "\n")
            .map_err(|e| CliError::io(&json, e))?;
        rec.output(&txt);
        rec.output(&json);
        rec.stage("suite");
        rec.finish(cfg, seed)?;
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.results.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
        Err(CliError::Failed(format!("gradient check failed: {}", failed.join(", "))))
    }
}
