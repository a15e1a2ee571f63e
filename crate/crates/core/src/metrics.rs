//! CSV logs written during transfer.
//!
//! `metrics.csv` has one row per iteration with the columns
//! `iteration, epoch, l_ti, l_d, l_ent, l_div, l_im, l_pl, l_ma, l_ms, total,
//! zeta_0 .. zeta_{n-1}, lr`. `accuracy.csv` has one row per epoch with
//! `epoch, accuracy`. Floats are written in Rust's shortest round-trip form,
//! so parsing a cell gives back the exact logged value.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{FusedTargetModel, SourceModel};
use crate::synth::LabeledData;
use crate::transfer::{evaluate, IterationRecord, TransferObserver};

const LOSS_COLUMNS: [&str; 11] = [
    "iteration", "epoch", "l_ti", "l_d", "l_ent", "l_div", "l_im", "l_pl", "l_ma", "l_ms", "total",
];

pub fn loss_header(num_sources: usize) -> Vec<String> {
    LOSS_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..num_sources).map(|k| format!("zeta_{k}")))
        .chain(std::iter::once("lr".to_string()))
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(Path::new("<csv>"), e),
        other => Error::Contract(format!("csv: {other:?}")),
    }
}

/// Streams iteration records as CSV rows.
pub struct LossLog<W: Write> {
    out: csv::Writer<W>,
    num_sources: usize,
    rows: usize,
}

impl<W: Write> LossLog<W> {
    pub fn new(out: W, num_sources: usize) -> Result<Self> {
        let mut out = csv::Writer::from_writer(out);
        out.write_record(loss_header(num_sources)).map_err(csv_err)?;
        Ok(Self {
            out,
            num_sources,
            rows: 0,
        })
    }

    pub fn write(&mut self, r: &IterationRecord) -> Result<()> {
        if r.zeta.len() != self.num_sources {
            return Err(Error::Contract(format!(
                "record has {} weights, log expects {}",
                r.zeta.len(),
                self.num_sources
            )));
        }
        let p = &r.report;
        let mut row = vec![r.iteration.to_string(), r.epoch.to_string()];
        row.extend(
            [p.l_ti, p.l_d, p.l_ent, p.l_div, p.l_im, p.l_pl, p.l_ma, p.l_ms, p.total]
                .iter()
                .chain(&r.zeta)
                .chain(std::iter::once(&r.lr))
                .map(f64::to_string),
        );
        self.out.write_record(&row).map_err(csv_err)?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
        self.out
            .into_inner()
            .map_err(|e| Error::io(Path::new("<csv>"), e.into_error()))
    }
}

/// Streams `(epoch, accuracy)` rows.
pub struct AccuracyLog<W: Write> {
    out: csv::Writer<W>,
    rows: usize,
}

impl<W: Write> AccuracyLog<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut out = csv::Writer::from_writer(out);
        out.write_record(["epoch", "accuracy"]).map_err(csv_err)?;
        Ok(Self { out, rows: 0 })
    }

    pub fn write(&mut self, epoch: usize, accuracy: f64) -> Result<()> {
        self.out
            .write_record([epoch.to_string(), accuracy.to_string()])
            .map_err(csv_err)?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
        self.out
            .into_inner()
            .map_err(|e| Error::io(Path::new("<csv>"), e.into_error()))
    }
}

/// Observer that writes both logs during [`transfer`](crate::transfer::transfer).
///
/// Accuracy is scored against `labels` after every epoch; the labels are
/// never seen by the training loop itself.
pub struct MetricsRecorder<'a, W: Write> {
    pub losses: LossLog<W>,
    pub accuracy: AccuracyLog<W>,
    labels: &'a LabeledData,
}

impl<'a, W: Write> MetricsRecorder<'a, W> {
    pub fn new(loss_out: W, acc_out: W, num_sources: usize, labels: &'a LabeledData) -> Result<Self> {
        Ok(Self {
            losses: LossLog::new(loss_out, num_sources)?,
            accuracy: AccuracyLog::new(acc_out)?,
            labels,
        })
    }
}

impl MetricsRecorder<'_, File> {
    /// Creates `metrics.csv` and `accuracy.csv` in `dir`.
    pub fn create<'a>(dir: &Path, num_sources: usize, labels: &'a LabeledData) -> Result<MetricsRecorder<'a, File>> {
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p).map_err(|e| Error::io(&p, e))
        };
        MetricsRecorder::new(open("metrics.csv")?, open("accuracy.csv")?, num_sources, labels)
    }
}

impl<W: Write> TransferObserver for MetricsRecorder<'_, W> {
    fn on_iteration(&mut self, record: &IterationRecord, _models: &[SourceModel]) -> Result<()> {
        self.losses.write(record)
    }

    fn on_epoch_end(&mut self, epoch: usize, model: &FusedTargetModel) -> Result<()> {
        let acc = evaluate(model, self.labels)?;
        self.accuracy.write(epoch, acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{Lambdas, LossReport};

    fn record(i: usize) -> IterationRecord {
        let lambdas = Lambdas {
            ti: 0.3,
            d: 0.3,
            pl: 0.3,
        };
        IterationRecord {
            iteration: i,
            epoch: 1,
            report: LossReport::compose(0.1, 0.2, 0.3, 1.7, 0.4, lambdas),
            zeta: vec![0.25, 0.75],
            lr: 1e-3 / 3.0,
        }
    }

    #[test]
    fn header_and_rows() {
        let mut log = LossLog::new(Vec::new(), 2).unwrap();
        for i in 1..=3 {
            log.write(&record(i)).unwrap();
        }
        assert_eq!(log.rows(), 3);
        let text = String::from_utf8(log.finish().unwrap()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(
            lines[0],
            "iteration,epoch,l_ti,l_d,l_ent,l_div,l_im,l_pl,l_ma,l_ms,total,zeta_0,zeta_1,lr"
        );
        let cells: Vec<f64> = lines[1].split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells.len(), 14);
        assert_eq!(cells[13], 1e-3 / 3.0);
        assert_eq!(cells[6], 1.7 - 0.3);
    }

    #[test]
    fn wrong_source_count_is_rejected() {
        let mut log = LossLog::new(Vec::new(), 3).unwrap();
        assert!(log.write(&record(1)).is_err());
    }
}
