//! CSV outputs: metrics (`name,bin,value`) and per-epoch loss curves.

use std::io::Write;

use anyhow::Result;
use camradar_core::eval::MetricsReport;
use camradar_core::pipeline::EpochSummary;

/// Undefined values (no ground truth, no true positives) are written as `nan`.
pub fn write_metrics_csv<W: Write>(report: &MetricsReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["name", "bin", "value"])?;
    for (name, bin, value) in report.rows() {
        let v = value.map_or_else(|| "nan".to_string(), |v| v.to_string());
        w.write_record([name, bin, v])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_loss_csv<W: Write>(history: &[EpochSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "steps", "frames", "lr", "in_box", "fusion", "centerness", "offset", "speed", "total"])?;
    for e in history {
        let l = &e.loss;
        let mut row = vec![e.epoch.to_string(), e.steps.to_string(), e.frames.to_string()];
        row.extend([e.last_lr, l.in_box, l.fusion, l.centerness, l.offset, l.speed, l.total].iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
