//! The `check` command: acceptance criteria 1-13 from the core crate plus the
//! run-determinism criterion, which lives here because it exercises `run`.

use std::path::Path;

use wgf_core::acceptance::{run_criterion, CriterionReport, Suite};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::Result;
use crate::run_experiment;

pub const DETERMINISM_ID: u8 = 14;

/// Criteria of `suite` as run by the CLI; `all` adds determinism.
pub fn criteria(suite: Suite) -> Vec<u8> {
    let mut ids = suite.criteria().to_vec();
    if suite == Suite::All {
        ids.push(DETERMINISM_ID);
    }
    ids
}

/// Runs one criterion; an error becomes a failed report carrying the message.
pub fn check_criterion(id: u8) -> CriterionReport {
    let result = if id == DETERMINISM_ID {
        determinism()
    } else {
        run_criterion(id).map_err(Into::into)
    };
    result.unwrap_or_else(|e| CriterionReport {
        id,
        name: "criterion",
        passed: false,
        measured: format!("error: {e}"),
        required: "runs to completion".into(),
    })
}

/// Defaults scaled down to a few seconds per experiment; the code paths and
/// artifact set are unchanged.
pub fn smoke_config(kind: ExperimentKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(kind);
    cfg.eval_samples = cfg.eval_samples.min(500);
    if let Some(t) = &mut cfg.train {
        t.steps = 12;
        t.batch_n = 64;
        t.batch_m = 64;
        t.arch.hidden = vec![16; 2];
        if t.checkpoint_interval > 0 {
            t.checkpoint_interval = 4;
        }
    }
    if let Some(f) = &mut cfg.flow {
        f.num_steps = f.num_steps.min(5);
        f.target_batch = f.target_batch.min(64);
    }
    if let Some(g) = &mut cfg.guidance {
        g.particles = 64;
        g.weights = vec![0.0, 2.0];
    }
    if let Some(c) = &mut cfg.convergence {
        c.etas = vec![0.2, 0.1];
        c.particle_counts = vec![64, 128];
        c.trajectory_particles = 8;
    }
    if let Some(l) = &mut cfg.landscape {
        l.resolution = (5, 4);
        l.x_range = (-0.5, 3.5);
        l.eval_inputs = 32;
        l.eval_targets = 32;
        l.sinkhorn.iterations = 20;
    }
    if let Some(a) = &mut cfg.ablation {
        a.variants.truncate(3);
        a.w2_samples = 64;
    }
    if let Some(t) = &mut cfg.transfer {
        t.tracked_points = 8;
    }
    cfg
}

fn csv_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| crate::error::CliError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| crate::error::CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "csv") {
            let bytes = std::fs::read(&path).map_err(|e| crate::error::CliError::io(&path, e))?;
            files.push((
                path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                bytes,
            ));
        }
    }
    files.sort();
    Ok(files)
}

/// Runs every experiment twice at a fixed seed and compares the CSVs byte for byte.
pub fn determinism() -> Result<CriterionReport> {
    let scratch = tempfile::tempdir().map_err(|e| crate::error::CliError::io(Path::new("tempdir"), e))?;
    let mut mismatched = Vec::new();
    let mut compared = 0usize;
    for kind in ExperimentKind::ALL {
        let mut runs = Vec::new();
        for attempt in 0..2 {
            let mut cfg = smoke_config(kind);
            cfg.seed = 7;
            cfg.output_dir = scratch.path().join(format!("{}-{attempt}", kind.name()));
            let cfg = ExperimentConfig::resolve(&cfg.to_toml()?, None)?;
            run_experiment(&cfg)?;
            runs.push(csv_bytes(&cfg.output_dir)?);
        }
        compared += runs[0].len();
        if runs[0].is_empty() || runs[0] != runs[1] {
            mismatched.push(kind.name());
        }
    }
    Ok(CriterionReport {
        id: DETERMINISM_ID,
        name: "run determinism",
        passed: mismatched.is_empty(),
        measured: if mismatched.is_empty() {
            format!(
                "{compared} CSV files identical across two runs of all {} experiments",
                ExperimentKind::ALL.len()
            )
        } else {
            format!("differences in {}", mismatched.join(", "))
        },
        required: "byte-identical CSVs at seed 7".into(),
    })
}
