//! File formats: numeric CSV with 17-significant-digit floats, and the
//! JSON interchange shapes used by the command-line tools.

use crate::align::AlignmentLoss;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::graph::{ProposalBatch, Stage};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Format a float with 17 significant digits (round-trips any f64).
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::InvalidInput(format!("not a number: `{s}`")))
}

/// One box per row: `x_min,y_min,x_max,y_max`. Lines starting with `#`
/// are skipped.
pub fn read_boxes_csv(path: &Path) -> Result<Vec<BBox>> {
    let text = std::fs::read_to_string(path)?;
    let mut boxes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::InvalidInput(format!(
                "{}:{}: expected 4 fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        boxes.push(BBox::new(
            parse_f64(fields[0])?,
            parse_f64(fields[1])?,
            parse_f64(fields[2])?,
            parse_f64(fields[3])?,
        )?);
    }
    if boxes.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no boxes found",
            path.display()
        )));
    }
    Ok(boxes)
}

pub fn write_boxes_csv(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(b.x_min),
            fmt_f64(b.y_min),
            fmt_f64(b.x_max),
            fmt_f64(b.y_max)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Row-major matrix CSV, no header.
pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut out = String::new();
    for row in m.rows() {
        let fields: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!("{what}: no rows")));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidInput(format!("{what}: ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat)
        .map_err(|e| Error::InvalidInput(format!("{what}: {e}")))
}

fn matrix_to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// JSON shape of a proposal batch on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProposalBatchFile {
    pub stage: Stage,
    /// `[x_min, y_min, x_max, y_max]` per proposal.
    pub boxes: Vec<[f64; 4]>,
    pub features: Vec<Vec<f64>>,
    pub confidences: Vec<Vec<f64>>,
}

impl ProposalBatchFile {
    pub fn from_batch(batch: &ProposalBatch) -> Self {
        ProposalBatchFile {
            stage: batch.stage(),
            boxes: batch
                .boxes()
                .iter()
                .map(|b| [b.x_min, b.y_min, b.x_max, b.y_max])
                .collect(),
            features: matrix_to_rows(batch.features()),
            confidences: matrix_to_rows(batch.confidences()),
        }
    }

    pub fn into_batch(self) -> Result<ProposalBatch> {
        let boxes = self
            .boxes
            .iter()
            .map(|&[x0, y0, x1, y1]| BBox::new(x0, y0, x1, y1))
            .collect::<Result<Vec<_>>>()?;
        ProposalBatch::new(
            boxes,
            rows_to_matrix(&self.features, "features")?,
            rows_to_matrix(&self.confidences, "confidences")?,
            self.stage,
        )
    }
}

pub fn read_proposal_batch(path: &Path) -> Result<ProposalBatch> {
    let text = std::fs::read_to_string(path)?;
    let file: ProposalBatchFile = serde_json::from_str(&text)?;
    file.into_batch()
}

pub fn write_proposal_batch(path: &Path, batch: &ProposalBatch) -> Result<()> {
    let file = ProposalBatchFile::from_batch(batch);
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// JSON shape of an alignment-loss record on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentLossFile {
    pub intra: f64,
    pub inter_ss: f64,
    pub inter_st: f64,
    pub inter_tt: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_f_source: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_f_target: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_p_source: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_p_target: Option<Vec<Vec<f64>>>,
}

impl AlignmentLossFile {
    pub fn from_loss(loss: &AlignmentLoss) -> Self {
        AlignmentLossFile {
            intra: loss.intra,
            inter_ss: loss.inter_ss,
            inter_st: loss.inter_st,
            inter_tt: loss.inter_tt,
            total: loss.total,
            grad_f_source: loss.grad_f_source.as_ref().map(matrix_to_rows),
            grad_f_target: loss.grad_f_target.as_ref().map(matrix_to_rows),
            grad_p_source: loss.grad_p_source.as_ref().map(matrix_to_rows),
            grad_p_target: loss.grad_p_target.as_ref().map(matrix_to_rows),
        }
    }
}

pub fn write_alignment_loss(path: &Path, loss: &AlignmentLoss) -> Result<()> {
    let file = AlignmentLossFile::from_loss(loss);
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Helper for assembling CSV lines with consistently formatted floats.
pub struct CsvWriter {
    buf: String,
}

impl CsvWriter {
    pub fn new() -> Self {
        CsvWriter { buf: String::new() }
    }

    pub fn comment(&mut self, text: &str) {
        self.buf.push_str("# ");
        self.buf.push_str(text);
        self.buf.push('\n');
    }

    pub fn row(&mut self, fields: &[String]) {
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    pub fn finish(self) -> String {
        self.buf
    }

    pub fn write(self, path: &Path) -> Result<()> {
        std::fs::write(path, self.buf)?;
        Ok(())
    }
}

impl Default for CsvWriter {
    fn default() -> Self {
        Self::new()
    }
}

/// Column-of-floats helper for mixed headers.
pub fn float_fields(values: &Array1<f64>) -> Vec<String> {
    values.iter().map(|&v| fmt_f64(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::tempdir;

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.0, -1.5, 1.0 / 3.0, 1e-300, 123456.789, f64::MIN_POSITIVE] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
    }

    #[test]
    fn boxes_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("boxes.csv");
        let boxes = vec![
            BBox::new(0.0, 0.5, 2.0, 2.5).unwrap(),
            BBox::new(-1.0, -1.0, 1.0 / 3.0, 4.0).unwrap(),
        ];
        write_boxes_csv(&path, &boxes).unwrap();
        let back = read_boxes_csv(&path).unwrap();
        assert_eq!(back, boxes);
    }

    #[test]
    fn bad_box_row_reports_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "1,2,3\n").unwrap();
        let err = read_boxes_csv(&path).unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");
    }

    #[test]
    fn proposal_batch_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("batch.json");
        let batch = ProposalBatch::new(
            vec![BBox::new(0.0, 0.0, 2.0, 2.0).unwrap()],
            array![[1.0, 2.0, 3.0]],
            array![[0.25, 0.75]],
            Stage::Rpn,
        )
        .unwrap();
        write_proposal_batch(&path, &batch).unwrap();
        let back = read_proposal_batch(&path).unwrap();
        assert_eq!(back.features(), batch.features());
        assert_eq!(back.confidences(), batch.confidences());
        assert_eq!(back.stage(), batch.stage());
    }
}
