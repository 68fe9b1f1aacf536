//! Per-step metrics rows and their append-only CSV files. `metrics.csv` holds
//! only deterministic values; wall-clock time goes to `timing.csv`.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Stage, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub stage: Stage,
    pub step: usize,
    pub loss_mse: Option<f64>,
    pub loss_perc: Option<f64>,
    pub loss_gan: Option<f64>,
    pub loss_rec: Option<f64>,
    pub loss_vq: Option<f64>,
    pub loss_rel: Option<f64>,
    pub loss_irr: Option<f64>,
    pub loss_qry: Option<f64>,
    pub loss_pen: Option<f64>,
    pub loss_eos: Option<f64>,
    pub loss_kl: Option<f64>,
    pub loss_total: f64,
    pub loss_disc: Option<f64>,
    pub threshold: Option<f64>,
    pub lambda_eos: Option<f64>,
    pub eos_mean: Option<f64>,
    pub eos_min: Option<usize>,
    pub eos_max: Option<usize>,
    pub query_frac: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub stage: Stage,
    pub step: usize,
    pub wall_ms: f64,
}

/// In-memory rows, optionally mirrored to `metrics.csv` / `timing.csv`.
#[derive(Debug, Default)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    pub timing: Vec<TimingRow>,
    dir: Option<PathBuf>,
    writers: Option<(csv::Writer<File>, csv::Writer<File>)>,
}

fn appender(path: &Path) -> Result<csv::Writer<File>, TrainError> {
    let io = |source| TrainError::Io { path: path.display().to_string(), source };
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    Ok(csv::WriterBuilder::new().has_headers(fresh).from_writer(file))
}

impl MetricsLog {
    pub fn memory() -> Self {
        Self::default()
    }

    /// Appends to the CSV files under `dir`, writing headers only when the
    /// files are new.
    pub fn to_dir(dir: impl Into<PathBuf>) -> Result<Self, TrainError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|source| TrainError::Io { path: dir.display().to_string(), source })?;
        let writers = (appender(&dir.join("metrics.csv"))?, appender(&dir.join("timing.csv"))?);
        Ok(Self { rows: Vec::new(), timing: Vec::new(), dir: Some(dir), writers: Some(writers) })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn push(&mut self, row: MetricsRow, wall_ms: f64) -> Result<(), TrainError> {
        let t = TimingRow { stage: row.stage, step: row.step, wall_ms };
        if let Some((m, w)) = &mut self.writers {
            let err = |e: csv::Error| TrainError::Config(format!("metrics write failed: {e}"));
            m.serialize(&row).map_err(err)?;
            w.serialize(&t).map_err(err)?;
            m.flush().and_then(|_| w.flush()).map_err(|source| TrainError::Io { path: "metrics".into(), source })?;
        }
        self.rows.push(row);
        self.timing.push(t);
        Ok(())
    }
}

/// Reads a metrics CSV back into rows.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>, TrainError> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))
}
