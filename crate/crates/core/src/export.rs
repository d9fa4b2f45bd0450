//! Delimited-text exports: estimates, interval reports, event logs and
//! experiment records. Floats are written in shortest round-trip form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddedDataset;
use crate::error::{Error, Result};
use crate::session::{AnnotationEvent, AnnotationSource, SoftLabelEstimate};
use crate::uncertainty::CiRow;

fn io_err(e: std::io::Error) -> Error {
    Error::io("<output>", e)
}

/// `id,p0..p{C-1},received_mass`
pub fn write_estimates<W: Write>(mut out: W, ids: &[String], estimate: &SoftLabelEstimate) -> Result<()> {
    if ids.len() != estimate.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} ids", estimate.len()),
            actual: format!("{}", ids.len()),
        });
    }
    let mut header = String::from("id");
    for c in 0..estimate.classes() {
        header.push_str(&format!(",p{c}"));
    }
    header.push_str(",received_mass");
    writeln!(out, "{header}").map_err(io_err)?;
    for (q, id) in ids.iter().enumerate() {
        let mut line = csv_field(id);
        for p in estimate.row(q) {
            line.push_str(&format!(",{p}"));
        }
        line.push_str(&format!(",{}", estimate.received[q]));
        writeln!(out, "{line}").map_err(io_err)?;
    }
    Ok(())
}

/// `id,class,lower,upper,method`
pub fn write_ci_report<W: Write>(mut out: W, ids: &[String], rows: &[CiRow]) -> Result<()> {
    writeln!(out, "id,class,lower,upper,method").map_err(io_err)?;
    for row in rows {
        let id = ids.get(row.point).ok_or(Error::OutOfRange {
            index: row.point,
            size: ids.len(),
        })?;
        writeln!(
            out,
            "{},{},{},{},{}",
            csv_field(id),
            row.class,
            row.interval.lower,
            row.interval.upper,
            row.interval.method.name()
        )
        .map_err(io_err)?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRow {
    sequence: u64,
    point_id: String,
    class: usize,
    source: AnnotationSource,
}

/// `sequence,point_id,class,source`
pub fn write_events<W: Write>(out: W, dataset: &EmbeddedDataset, events: &[AnnotationEvent]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for e in events {
        let point_id = dataset.ids().get(e.point).ok_or(Error::OutOfRange {
            index: e.point,
            size: dataset.len(),
        })?;
        wtr.serialize(EventRow {
            sequence: e.sequence,
            point_id: point_id.clone(),
            class: e.class,
            source: e.source,
        })
        .map_err(|e| Error::Unsupported(e.to_string()))?;
    }
    wtr.flush().map_err(io_err)
}

/// Reads an event log, resolving point ids against `dataset`.
pub fn read_events<R: Read>(input: R, dataset: &EmbeddedDataset) -> Result<Vec<AnnotationEvent>> {
    let index: std::collections::HashMap<&str, usize> =
        dataset.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut rdr = csv::Reader::from_reader(input);
    let mut events = Vec::new();
    for (row, rec) in rdr.deserialize::<EventRow>().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let point = *index.get(rec.point_id.as_str()).ok_or_else(|| Error::Parse {
            row,
            message: format!("unknown point id '{}'", rec.point_id),
        })?;
        events.push(AnnotationEvent {
            point,
            class: rec.class,
            sequence: rec.sequence,
            source: rec.source,
        });
    }
    Ok(events)
}

/// One line of an experiment table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub budget: usize,
    pub repetition: usize,
    pub rmse: f64,
    pub kl: f64,
    /// Wall-clock time; excluded from determinism comparisons.
    pub wall_ms: f64,
}

/// Writes `budget,repetition,rmse,kl,wall_ms` preceded by a `#` comment line
/// naming the generator and seed.
pub fn write_records<W: Write, T: Serialize>(mut out: W, comment: &str, records: &[T]) -> Result<()> {
    writeln!(out, "# {comment}").map_err(io_err)?;
    let mut wtr = csv::Writer::from_writer(out);
    for r in records {
        wtr.serialize(r).map_err(|e| Error::Unsupported(e.to_string()))?;
    }
    wtr.flush().map_err(io_err)
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<ExperimentRecord>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    rdr.deserialize()
        .enumerate()
        .map(|(row, r)| {
            r.map_err(|e| Error::Parse {
                row,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::RowMatrix;

    #[test]
    fn estimate_export_layout() {
        let est = SoftLabelEstimate {
            probabilities: RowMatrix::from_rows(&[[0.25, 0.75]]).unwrap(),
            received: vec![1.5],
        };
        let mut out = Vec::new();
        write_estimates(&mut out, &["a,b".to_string()], &est).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "id,p0,p1,received_mass\n\"a,b\",0.25,0.75,1.5\n");
    }

    #[test]
    fn events_round_trip() {
        let ds = EmbeddedDataset::new(
            vec!["x".into(), "y".into()],
            RowMatrix::from_rows(&[[0.0], [1.0]]).unwrap(),
            None,
            None,
        )
        .unwrap();
        let events = vec![
            AnnotationEvent { point: 1, class: 0, sequence: 0, source: AnnotationSource::Human },
            AnnotationEvent { point: 0, class: 1, sequence: 1, source: AnnotationSource::Simulated },
        ];
        let mut buf = Vec::new();
        write_events(&mut buf, &ds, &events).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("sequence,point_id,class,source\n0,y,0,human\n"));
        assert_eq!(read_events(&buf[..], &ds).unwrap(), events);
    }

    #[test]
    fn records_round_trip_with_comment() {
        let recs = vec![ExperimentRecord { budget: 10, repetition: 0, rmse: 0.1, kl: 0.2, wall_ms: 3.0 }];
        let mut buf = Vec::new();
        write_records(&mut buf, "rng=chacha8 seed=1", &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# rng=chacha8 seed=1\nbudget,repetition,rmse,kl,wall_ms\n"));
        assert_eq!(read_records(&buf[..]).unwrap(), recs);
    }
}
