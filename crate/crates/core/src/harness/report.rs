//! CSV output of round records.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::RoundRecord;

const PER_LAYER: [&str; 4] = ["d_fa_sq", "d_fs_sq", "theorem2_residual", "m_curr"];

fn real(v: f64) -> String {
    format!("{v:.8e}")
}

/// Column names for records with these layer names and class count.
pub fn csv_header(layer_names: &[String], num_classes: usize) -> Vec<String> {
    let mut h: Vec<String> = ["seed", "round", "test_accuracy", "test_loss"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for metric in PER_LAYER {
        h.extend(layer_names.iter().map(|l| format!("{metric}_{l}")));
    }
    h.push("client_drift".into());
    h.push("payload_bytes_total".into());
    h.extend((0..num_classes).map(|c| format!("pred_{c}")));
    h
}

fn row(r: &RoundRecord) -> Vec<String> {
    let mut out = vec![
        r.seed.to_string(),
        r.round.to_string(),
        real(r.test_accuracy),
        real(r.test_loss),
    ];
    out.extend(r.layers.iter().map(|l| real(l.d_fa_sq)));
    out.extend(r.layers.iter().map(|l| real(l.d_fs_sq)));
    out.extend(r.layers.iter().map(|l| real(l.theorem2_residual)));
    out.extend(r.layers.iter().map(|l| real(l.m_curr)));
    out.push(real(r.client_drift));
    out.push(r.payload_bytes_total.to_string());
    out.extend(r.prediction_counts.iter().map(u64::to_string));
    out
}

/// Write records to any sink. The header comes from `layer_names` and
/// `num_classes` so an empty run still has a well-formed header.
pub fn write_csv<W: Write>(
    sink: W,
    records: &[RoundRecord],
    layer_names: &[String],
    num_classes: usize,
) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(sink);
    let header = csv_header(layer_names, num_classes);
    w.write_record(&header)?;
    for r in records {
        let fields = row(r);
        if fields.len() != header.len() {
            return Err(csv::Error::from(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("round {} does not match the header layout", r.round),
            )));
        }
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(
    records: &[RoundRecord],
    layer_names: &[String],
    num_classes: usize,
    path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(
        std::io::BufWriter::new(file),
        records,
        layer_names,
        num_classes,
    )
    .map_err(|e| {
        let kind = match e.kind() {
            csv::ErrorKind::Io(io) => io.kind(),
            _ => std::io::ErrorKind::Other,
        };
        Error::io(path, std::io::Error::new(kind, e.to_string()))
    })
}
