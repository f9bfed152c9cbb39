//! Result files written by the CLI.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cotrack::config::RunConfig;
use cotrack::harness::{AggregateReport, TimingRow, TrialRecord};
use cotrack::Result;
use serde::Serialize;

/// Tracks the files written by one command so they can be removed if the
/// command fails halfway.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<PathBuf>,
    created_dirs: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        let mut created_dirs = Vec::new();
        if !root.exists() {
            fs::create_dir_all(root)?;
            created_dirs.push(root.to_path_buf());
        }
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
            created_dirs,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            if !dir.exists() {
                fs::create_dir_all(dir)?;
                self.created_dirs.push(dir.to_path_buf());
            }
        }
        let mut f = fs::File::create(&path)?;
        self.written.push(path.clone());
        f.write_all(contents.as_bytes())?;
        Ok(path)
    }

    /// Deletes everything this command wrote.
    pub fn discard(self) {
        for p in self.written.iter().rev() {
            let _ = fs::remove_file(p);
        }
        for d in self.created_dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
}

fn header(config: &RunConfig, extra: &str) -> String {
    format!("# config_hash={} seed={}{extra}\n", config.hash(), config.seed)
}

pub fn trial_csv(config: &RunConfig, record: &TrialRecord) -> String {
    let mut out = header(
        config,
        &format!(" trial_seed={} variant={}", record.seed, record.variant),
    );
    if let Some(f) = &record.failure {
        out.push_str(&format!("# failed: {f}\n"));
    }
    out.push_str(
        "step,x,y,z,roll,pitch,yaw,ref_x,ref_y,ref_z,ref_roll,ref_pitch,ref_yaw,\
         error_norm,tracking_cost,input_cost,pose_cost,step_cost,pose_switch,fallback\n",
    );
    for s in &record.steps {
        let p = s.pose.to_vector();
        let r = s.reference.to_vector();
        let mut row = vec![s.k.to_string()];
        row.extend(p.iter().chain(r.iter()).map(|v| format!("{v:.9}")));
        row.extend(
            [s.error.norm(), s.tracking_cost, s.input_cost, s.pose_cost, s.cost()]
                .iter()
                .map(|v| format!("{v:.9e}")),
        );
        row.push(u8::from(s.pose_switch).to_string());
        row.push(u8::from(s.fallback).to_string());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct Report<'a> {
    config_hash: String,
    seed: u64,
    config: &'a RunConfig,
    variants: &'a [AggregateReport],
}

pub fn report_json(config: &RunConfig, reports: &[AggregateReport]) -> Result<String> {
    let report = Report {
        config_hash: config.hash(),
        seed: config.seed,
        config,
        variants: reports,
    };
    serde_json::to_string_pretty(&report).map_err(|e| std::io::Error::other(e).into())
}

/// Per-variant planner timing from a run.
pub fn run_timing_csv(config: &RunConfig, reports: &[AggregateReport]) -> String {
    let mut out = header(config, "");
    out.push_str("variant,plans,mean_seconds,median_seconds\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{:.6e},{:.6e}\n",
            r.variant, r.timing.plans, r.timing.mean_seconds, r.timing.median_seconds
        ));
    }
    out
}

pub fn bench_csv(config: &RunConfig, rows: &[TimingRow]) -> String {
    let mut out = header(config, "");
    out.push_str("candidates,horizon,width,plans,median_seconds,mean_seconds,p90_seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6e},{:.6e},{:.6e}\n",
            r.candidates, r.horizon, r.width, r.plans, r.median_seconds, r.mean_seconds, r.p90_seconds
        ));
    }
    out
}
