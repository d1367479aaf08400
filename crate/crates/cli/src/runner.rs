//! Sweep jobs in child processes, so a crash or runaway allocation in one
//! run cannot take down the sweep.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

use detm_core::sweep::{Job, JobOutput, JobRunner};
use detm_core::Error;

pub struct ProcessRunner {
    exe: PathBuf,
    job_dir: PathBuf,
    checkpoint_dir: PathBuf,
}

impl ProcessRunner {
    pub fn new(job_dir: PathBuf, checkpoint_dir: PathBuf) -> anyhow::Result<Self> {
        fs::create_dir_all(&job_dir)?;
        Ok(ProcessRunner {
            exe: std::env::current_exe()?,
            job_dir,
            checkpoint_dir,
        })
    }
}

fn failure(msg: String) -> Error {
    Error::Sweep(msg)
}

impl JobRunner for ProcessRunner {
    fn run(&self, job: &Job) -> detm_core::Result<JobOutput> {
        let spec = self.job_dir.join(format!("{}.json", job.key));
        fs::write(&spec, serde_json::to_string_pretty(job)?).map_err(|e| failure(format!("writing {}: {e}", spec.display())))?;
        let out = Command::new(&self.exe)
            .arg("run-job")
            .arg("--job")
            .arg(&spec)
            .arg("--checkpoint-dir")
            .arg(&self.checkpoint_dir)
            .output()
            .map_err(|e| failure(format!("spawning {}: {e}", self.exe.display())))?;
        if !out.status.success() {
            let stderr = String::from_utf8_lossy(&out.stderr);
            let last = stderr.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("no output");
            let reason = last.strip_prefix("error: ").unwrap_or(last);
            return Err(failure(format!("run exited with {}: {reason}", out.status)));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        Ok(serde_json::from_str(stdout.trim())?)
    }
}
