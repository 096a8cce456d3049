//! Append-only run logs. Each writer flushes after every batch of rows so an
//! interrupted run leaves a valid prefix.
//!
//! `log.csv` columns: iteration, loss, psnr, ssim, gaussians, maintain,
//! clone, split, prune, mean_reward, mean_advantage, clip_fraction,
//! baseline (empty when undefined).
//!
//! `lineage.csv` columns: step, iteration, parent, action, offspring (ids
//! joined by `;`).

use std::fs::{File, OpenOptions};
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use splatrl_core::density::Lineage;
use splatrl_core::trainer::LogRow;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub gaussians: usize,
    pub maintain: usize,
    pub clone: usize,
    pub split: usize,
    pub prune: usize,
    pub mean_reward: Option<f64>,
    pub mean_advantage: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub baseline: Option<f64>,
}

impl From<&LogRow> for LogRecord {
    fn from(r: &LogRow) -> Self {
        let [maintain, clone, split, prune] = r.actions;
        Self {
            iteration: r.iteration,
            loss: r.loss,
            psnr: r.psnr,
            ssim: r.ssim,
            gaussians: r.gaussians,
            maintain,
            clone,
            split,
            prune,
            mean_reward: r.mean_reward,
            mean_advantage: r.mean_advantage,
            clip_fraction: r.clip_fraction,
            baseline: r.baseline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageRecord {
    pub step: usize,
    pub iteration: usize,
    pub parent: u64,
    pub action: String,
    pub offspring: String,
}

fn open_append(path: &Path) -> Result<(File, bool)> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let f = OpenOptions::new().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok((f, fresh))
}

/// CSV writer that appends to an existing file without repeating the header.
pub struct Appender {
    w: csv::Writer<File>,
}

impl Appender {
    pub fn open(path: &Path) -> Result<Self> {
        let (f, fresh) = open_append(path)?;
        Ok(Self { w: csv::WriterBuilder::new().has_headers(fresh).from_writer(f) })
    }

    pub fn write<T: Serialize>(&mut self, rows: impl IntoIterator<Item = T>) -> Result<()> {
        for r in rows {
            self.w.serialize(r)?;
        }
        self.w.flush()?;
        Ok(())
    }
}

pub fn lineage_records(step: usize, iteration: usize, lineage: &Lineage) -> Vec<LineageRecord> {
    lineage
        .entries
        .iter()
        .map(|e| LineageRecord {
            step,
            iteration,
            parent: e.parent.0,
            action: e.action.name().to_string(),
            offspring: e.offspring.iter().map(|id| id.0.to_string()).collect::<Vec<_>>().join(";"),
        })
        .collect()
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn read_lineage(path: &Path) -> Result<Vec<LineageRecord>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn write_eval(path: &Path, rows: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
