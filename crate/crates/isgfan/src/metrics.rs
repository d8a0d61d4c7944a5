//! Training telemetry: a JSONL metrics stream and a per-batch attention
//! weight trace. Records carry no wall-clock fields, so identical runs
//! produce byte-identical streams.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::balancer::EffectiveWeights;
use crate::error::Result;
use crate::objectives::LossBundle;

/// One structured record of the metrics stream.
#[derive(Debug, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MetricRecord<'a> {
    Step {
        epoch: usize,
        step: usize,
        losses: &'a LossBundle,
        total: f64,
        weights: &'a EffectiveWeights,
        attention: &'a [f64],
        accepted_pseudo: usize,
        lr: f64,
    },
    Eval {
        epoch: usize,
        accuracy: f64,
        source_accuracy: f64,
    },
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, record: &MetricRecord<'_>) -> Result<()> {
        let line = serde_json::to_string(record).expect("records serialize");
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Per-batch attention weights: `epoch,batch,w_0,...,w_{C-1}`.
pub struct AttentionTrace {
    out: BufWriter<File>,
}

impl AttentionTrace {
    pub fn create(path: &Path, num_classes: usize) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        let header: Vec<String> = ["epoch".to_string(), "batch".to_string()]
            .into_iter()
            .chain((0..num_classes).map(|c| format!("w_{c}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        Ok(Self { out })
    }

    pub fn write(&mut self, epoch: usize, batch: usize, weights: &[f64]) -> Result<()> {
        let mut cols = vec![epoch.to_string(), batch.to_string()];
        cols.extend(weights.iter().map(|w| format!("{w:.9e}")));
        writeln!(self.out, "{}", cols.join(","))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
