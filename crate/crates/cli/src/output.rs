//! Artifact writers. Every CSV has a header row, a fixed column order and
//! floats in `{:.16e}` (17 significant digits), so reruns are byte-identical.

use std::path::{Path, PathBuf};

use ndarray::ArrayView2;
use wgf_core::ParticleBatch;

use crate::error::{CliError, Result};

pub fn float(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_float(x: Option<f64>) -> String {
    x.map(float).unwrap_or_default()
}

fn coordinate_columns(d: usize) -> impl Iterator<Item = String> {
    (0..d).map(|k| format!("x{k}"))
}

/// Named scalar results, written in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics(Vec<(String, f64)>);

impl Metrics {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.0.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.0
    }
}

/// One recorded state of a particle trajectory.
pub struct Frame<'a> {
    pub step: usize,
    pub time: f64,
    pub particles: ArrayView2<'a, f64>,
    pub energy: Option<f64>,
}

/// Output directory of one run; remembers what it wrote.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.root.join(name);
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    pub fn write_csv<I>(&mut self, name: &str, header: &[String], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let path = self.root.join(name);
        let io = |e: csv::Error| match e.into_kind() {
            csv::ErrorKind::Io(e) => CliError::io(&path, e),
            other => CliError::io(&path, std::io::Error::other(format!("{other:?}"))),
        };
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&path)
            .map_err(io)?;
        w.write_record(header).map_err(io)?;
        for row in rows {
            debug_assert_eq!(row.len(), header.len());
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    /// samples.csv: `index, x0.., label`, indices running across all sets.
    pub fn samples(&mut self, sets: &[(&str, &ParticleBatch)]) -> Result<()> {
        let d = sets.first().map(|(_, b)| b.dim()).unwrap_or(0);
        let header: Vec<String> = std::iter::once("index".to_string())
            .chain(coordinate_columns(d))
            .chain(std::iter::once("label".to_string()))
            .collect();
        let mut index = 0usize;
        let mut rows = Vec::new();
        for (label, batch) in sets {
            for x in batch.positions().outer_iter() {
                let mut row = vec![index.to_string()];
                row.extend(x.iter().map(|&v| float(v)));
                row.push(label.to_string());
                rows.push(row);
                index += 1;
            }
        }
        self.write_csv("samples.csv", &header, rows)
    }

    pub fn metrics(&mut self, metrics: &Metrics) -> Result<()> {
        let header = vec!["name".to_string(), "value".to_string()];
        let rows = metrics.entries().iter().map(|(n, v)| vec![n.clone(), float(*v)]);
        self.write_csv("metrics.csv", &header, rows)
    }

    /// trajectory.csv: `step, time, particle_index, x0.., energy`; the energy is
    /// blank where it was not recorded.
    pub fn trajectory(&mut self, frames: &[Frame<'_>]) -> Result<()> {
        let d = frames.first().map(|f| f.particles.ncols()).unwrap_or(0);
        let header: Vec<String> = ["step", "time", "particle_index"]
            .iter()
            .map(|s| s.to_string())
            .chain(coordinate_columns(d))
            .chain(std::iter::once("energy".to_string()))
            .collect();
        let mut rows = Vec::new();
        for f in frames {
            for (i, x) in f.particles.outer_iter().enumerate() {
                let mut row = vec![f.step.to_string(), float(f.time), i.to_string()];
                row.extend(x.iter().map(|&v| float(v)));
                row.push(opt_float(f.energy));
                rows.push(row);
            }
        }
        self.write_csv("trajectory.csv", &header, rows)
    }
}

/// First `limit` rows as plot points.
pub fn plot_points(batch: &ParticleBatch, limit: usize) -> Vec<(f64, f64)> {
    let p = batch.positions();
    p.outer_iter()
        .take(limit)
        .map(|x| (x[0], if x.len() > 1 { x[1] } else { 0.0 }))
        .collect()
}
