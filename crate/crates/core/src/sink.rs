//! CSV output. Row order is the caller's; float formatting is the shortest
//! exact representation, so identical results produce identical bytes.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::metrics::{FlowDensityPoint, GroupSummary, ThroughputPoint, TripRecord};

fn csv_err(e: csv::Error) -> CoreError {
    CoreError::Io(std::io::Error::other(e))
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CoreError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trips(path: &Path, rows: &[TripRecord]) -> Result<(), CoreError> {
    write_rows(path, rows)
}

pub fn write_flow_density(path: &Path, rows: &[FlowDensityPoint]) -> Result<(), CoreError> {
    write_rows(path, rows)
}

pub fn write_throughput(path: &Path, rows: &[ThroughputPoint]) -> Result<(), CoreError> {
    write_rows(path, rows)
}

pub fn write_summary(path: &Path, rows: &[GroupSummary]) -> Result<(), CoreError> {
    write_rows(path, rows)
}

/// One trajectory row: route arc position, speed, and applied control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub vehicle: u32,
    pub lane: u8,
    pub p: f64,
    pub v: f64,
    pub u: f64,
}

/// Streaming writer for trajectory samples, which are too many to buffer.
pub struct TrajectoryWriter {
    w: csv::Writer<BufWriter<File>>,
}

impl TrajectoryWriter {
    pub fn create(path: &Path) -> Result<Self, CoreError> {
        Ok(TrajectoryWriter {
            w: csv::Writer::from_writer(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn write(&mut self, sample: &TrajectorySample) -> Result<(), CoreError> {
        self.w.serialize(sample).map_err(csv_err)
    }

    pub fn finish(mut self) -> Result<(), CoreError> {
        self.w.flush()?;
        Ok(())
    }
}
