//! Result tables.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Column order of every result CSV.
pub const RESULT_COLUMNS: [&str; 11] = [
    "experiment_id",
    "model",
    "regime",
    "manipulation",
    "magnitude",
    "finetune_fraction",
    "seed",
    "k",
    "manipulated_accuracy",
    "clean_accuracy",
    "wall_time_s",
];

/// One evaluated grid point. `finetune_fraction` is 0 before fine-tuning;
/// `clean_accuracy` is measured with the same (possibly fine-tuned) model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment_id: String,
    pub model: String,
    pub regime: String,
    pub manipulation: String,
    pub magnitude: f64,
    pub finetune_fraction: f64,
    pub seed: u64,
    /// `z` samples per class; empty for the baseline.
    pub k: Option<usize>,
    pub manipulated_accuracy: f64,
    pub clean_accuracy: f64,
    pub wall_time_s: f64,
}

impl ResultRow {
    pub fn is_finetuned(&self) -> bool {
        self.finetune_fraction > 0.0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ResultsError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("schema mismatch in {source_name}: header {found:?}, expected {expected:?}")]
    Schema {
        source_name: String,
        found: Vec<String>,
        expected: Vec<String>,
    },
    #[error("{0}")]
    Invalid(String),
}

pub fn write_rows<W: Write>(w: W, rows: &[ResultRow]) -> Result<(), ResultsError> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(RESULT_COLUMNS)?;
    for r in rows {
        if ![r.manipulated_accuracy, r.clean_accuracy].iter().all(|a| (0.0..=1.0).contains(a)) {
            return Err(ResultsError::Invalid(format!("accuracy outside [0, 1] in {r:?}")));
        }
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_csv(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<(), ResultsError> {
    write_rows(std::fs::File::create(path)?, rows)
}

/// Reads a result table, insisting on the exact header.
pub fn read_rows<R: Read>(r: R, source_name: &str) -> Result<Vec<ResultRow>, ResultsError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != RESULT_COLUMNS {
        return Err(ResultsError::Schema {
            source_name: source_name.to_string(),
            found: header,
            expected: RESULT_COLUMNS.iter().map(|s| s.to_string()).collect(),
        });
    }
    rdr.deserialize().map(|r| r.map_err(ResultsError::from)).collect()
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<ResultRow>, ResultsError> {
    let path = path.as_ref();
    read_rows(std::fs::File::open(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn row(model: &str, magnitude: f64, seed: u64, acc: f64) -> ResultRow {
        ResultRow {
            experiment_id: "e".into(),
            model: model.into(),
            regime: "clean".into(),
            manipulation: "child".into(),
            magnitude,
            finetune_fraction: 0.0,
            seed,
            k: None,
            manipulated_accuracy: acc,
            clean_accuracy: 0.9,
            wall_time_s: 0.25,
        }
    }

    #[test]
    fn round_trip_keeps_header_and_values() {
        let mut rows = vec![row("dnn", 0.5, 1, 0.75), row("cama-generic", 2.0, 2, 0.125)];
        rows[1].k = Some(16);
        rows[1].finetune_fraction = 0.5;
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&RESULT_COLUMNS.join(",")));
        assert!(text.contains("dnn,clean,child,0.5,0.0,1,,0.75"));
        assert_eq!(read_rows(buf.as_slice(), "mem").unwrap(), rows);
    }

    #[test]
    fn header_mismatch_is_a_schema_error() {
        let text = "experiment_id,model\ne,dnn\n";
        assert!(matches!(read_rows(text.as_bytes(), "x"), Err(ResultsError::Schema { .. })));
    }

    #[test]
    fn out_of_range_accuracy_is_rejected() {
        let mut buf = Vec::new();
        assert!(write_rows(&mut buf, &[row("dnn", 0.0, 0, 1.5)]).is_err());
    }
}
