//! Attention matrix export: one CSV and one 8-bit grayscale PGM per
//! (scale, block, head), darker pixels meaning higher attention.

use std::fs;
use std::path::{Path, PathBuf};

use crate::attention::AttentionRecord;
use crate::error::{Error, Result};

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// CSV, row-major, nine significant digits.
pub fn attention_csv(record: &AttentionRecord<f64>) -> String {
    let shape = record.matrix.shape();
    let (rows, cols) = (shape[0], shape[1]);
    let mut out = String::new();
    for r in 0..rows {
        let row: Vec<String> = (0..cols)
            .map(|c| format!("{:.8e}", record.matrix.data()[r * cols + c]))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Binary PGM (P5). Entries are mapped from [0, 1] to gray so that higher
/// attention renders darker.
pub fn attention_pgm(record: &AttentionRecord<f64>) -> Vec<u8> {
    let shape = record.matrix.shape();
    let (rows, cols) = (shape[0], shape[1]);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(record.matrix.data().iter().map(|&v| {
        let gray = 255.0 - (v.clamp(0.0, 1.0) * 255.0).round();
        gray as u8
    }));
    out
}

/// Writes every record under `out_dir`; returns the created paths.
pub fn export_attention_records(
    records: &[AttentionRecord<f64>],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut paths = Vec::new();
    for record in records {
        let stem = format!(
            "scale{}_block{}_head{}",
            record.scale, record.block, record.head
        );
        let csv_path = out_dir.join(format!("{stem}.csv"));
        write_file(&csv_path, attention_csv(record).as_bytes())?;
        let pgm_path = out_dir.join(format!("{stem}.pgm"));
        write_file(&pgm_path, &attention_pgm(record))?;
        paths.push(csv_path);
        paths.push(pgm_path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn record(matrix: Vec<f64>, l: usize) -> AttentionRecord<f64> {
        AttentionRecord {
            scale: 1,
            block: 0,
            head: 2,
            matrix: Tensor::from_vec(&[l, l], matrix).unwrap(),
        }
    }

    #[test]
    fn csv_rows_sum_to_one_and_have_nine_significant_digits() {
        let r = record(vec![0.25, 0.75, 0.5, 0.5], 2);
        let csv = attention_csv(&r);
        assert_eq!(csv.lines().count(), 2);
        for line in csv.lines() {
            let sum: f64 = line.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert!(csv.starts_with("2.50000000e-1"));
    }

    #[test]
    fn uniform_attention_renders_uniform_pgm() {
        let r = record(vec![0.25; 16], 4);
        let pgm = attention_pgm(&r);
        let header_end = pgm.iter().filter(|&&b| b == b'\n').count();
        assert!(header_end >= 3);
        let pixels = &pgm[pgm.len() - 16..];
        assert!(pixels.iter().all(|&p| p == pixels[0]));
        // darker when attention is higher
        let hot = record(vec![1.0, 0.0, 0.0, 1.0], 2);
        let hot_pgm = attention_pgm(&hot);
        let px = &hot_pgm[hot_pgm.len() - 4..];
        assert!(px[0] < px[1]);
    }

    #[test]
    fn export_writes_expected_file_count() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![record(vec![1.0], 1), {
            let mut r = record(vec![1.0], 1);
            r.head = 0;
            r
        }];
        let paths = export_attention_records(&records, dir.path()).unwrap();
        assert_eq!(paths.len(), 4);
        for p in paths {
            assert!(p.exists());
        }
    }
}
