//! Mean corner error, outlier filtering, latency measurement and the
//! comparison table.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::dataset::{AnnotationRecord, Sample};
use crate::image::ImageBuffer;
use crate::model::Model;
use crate::{DisplacementVector, Error, Real, Result};

pub const WARMUP_ITERATIONS: usize = 10;
pub const TIMED_ITERATIONS: usize = 100;

/// Mean over the four corners of the distance between predicted and true
/// corner positions. Corners only move vertically, so each distance is
/// `|pred_i − gt_i|`.
pub fn mce<T: Real>(pred: &DisplacementVector<T>, gt: &DisplacementVector<T>) -> T {
    pred.0.iter().zip(&gt.0).map(|(p, g)| (*p - *g).abs()).sum::<T>() / T::lit(4.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub samples: usize,
}

impl LatencyStats {
    pub fn from_millis(mut times: Vec<f64>) -> Option<Self> {
        if times.is_empty() {
            return None;
        }
        let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
        times.sort_by(f64::total_cmp);
        let n = times.len();
        let median_ms = if n % 2 == 1 { times[n / 2] } else { (times[n / 2 - 1] + times[n / 2]) / 2.0 };
        Some(Self { mean_ms, median_ms, samples: n })
    }
}

/// Forward-pass timing on one prepared input: `warmup` discarded runs, then
/// `iterations` timed ones.
pub fn measure_latency<T: Real>(model: &Model<T>, input: &ImageBuffer<T>, warmup: usize, iterations: usize) -> Result<LatencyStats> {
    for _ in 0..warmup {
        std::hint::black_box(model.forward(input)?);
    }
    let mut times = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        std::hint::black_box(model.forward(input)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    LatencyStats::from_millis(times).ok_or_else(|| Error::Config("latency needs at least one timed iteration".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageError {
    pub image_id: String,
    pub mce: f64,
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub per_image: Vec<ImageError>,
    /// Mean over included images.
    pub aggregate: f64,
    pub excluded: usize,
    pub latency: Option<LatencyStats>,
}

impl EvalResult {
    /// Aggregates per-image errors. With a threshold, images whose error is
    /// strictly above it are excluded from the mean but kept in the list.
    pub fn from_errors(errors: Vec<(String, f64)>, threshold: Option<f64>) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::EmptySplit);
        }
        let per_image: Vec<ImageError> = errors
            .into_iter()
            .map(|(image_id, mce)| ImageError { included: threshold.is_none_or(|t| mce <= t), image_id, mce })
            .collect();
        let included: Vec<f64> = per_image.iter().filter(|e| e.included).map(|e| e.mce).collect();
        let aggregate = if included.is_empty() { f64::NAN } else { included.iter().sum::<f64>() / included.len() as f64 };
        Ok(Self { excluded: per_image.len() - included.len(), per_image, aggregate, latency: None })
    }
}

/// External predictions at working resolution: `image_id d0 d1 d2 d3` per
/// line, `#` comments allowed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionFile {
    pub rows: Vec<(String, DisplacementVector<f64>)>,
}

impl PredictionFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(Error::parse(origin, i + 1, format!("expected 5 fields, found {}", fields.len())));
            }
            let d = DisplacementVector::from_str(&fields[1..].join(" "))
                .map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
            rows.push((fields[0].to_string(), d));
        }
        Ok(Self { rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        self.rows.iter().map(|(id, d)| format!("{id} {}\n", d.0.map(|v| v.to_string()).join(" "))).collect()
    }
}

/// Scores a prediction file against the records of a split, comparing at
/// `working_size`.
pub fn evaluate_predictions(
    file: &PredictionFile,
    records: &[AnnotationRecord],
    working_size: usize,
    threshold: Option<f64>,
) -> Result<EvalResult> {
    if records.is_empty() {
        return Err(Error::EmptySplit);
    }
    let by_id: HashMap<&str, &DisplacementVector<f64>> = file.rows.iter().map(|(id, d)| (id.as_str(), d)).collect();
    let errors = records
        .iter()
        .map(|r| {
            let pred = by_id.get(r.image_id.as_str()).ok_or_else(|| Error::MissingPrediction(r.image_id.clone()))?;
            Ok((r.image_id.clone(), mce(pred, &r.label_at(working_size, working_size)?)))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_errors(errors, threshold)
}

/// Runs `model` on every sample at its input size. Each forward pass is
/// timed on its own after [`WARMUP_ITERATIONS`] untimed passes; resizing is
/// done beforehand and is not part of the timing.
pub fn evaluate_model<T: Real>(model: &Model<T>, samples: &[Sample<T>], threshold: Option<f64>) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::EmptySplit);
    }
    let size = model.config.input_size;
    let inputs: Vec<ImageBuffer<T>> = samples.iter().map(|s| model.prepare(&s.image)).collect();
    for _ in 0..WARMUP_ITERATIONS {
        std::hint::black_box(model.forward(&inputs[0])?);
    }
    let mut times = Vec::with_capacity(samples.len());
    let mut errors = Vec::with_capacity(samples.len());
    for (s, input) in samples.iter().zip(&inputs) {
        let t = Instant::now();
        let pred = model.forward(input)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        let d = model.decode(&pred).cast::<f64>();
        errors.push((s.record.image_id.clone(), mce(&d, &s.record.label_at(size, size)?)));
    }
    let mut result = EvalResult::from_errors(errors, threshold)?;
    result.latency = LatencyStats::from_millis(times);
    Ok(result)
}

/// Mean corner error of always predicting zero displacement.
pub fn zero_baseline(records: &[AnnotationRecord], working_size: usize) -> Result<EvalResult> {
    let errors = records
        .iter()
        .map(|r| Ok((r.image_id.clone(), mce(&DisplacementVector::zero(), &r.label_at(working_size, working_size)?))))
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_errors(errors, None)
}

pub const METHOD_HEADER: &str = "Method";
pub const MCE_HEADER: &str = "Mean Corner Error (pixels)";
pub const LATENCY_HEADER: &str = "Inference Speed (ms)";

/// Aligned text table, one row per result in input order. Latency shows
/// the mean forward time, or `-` when not measured.
pub fn emit_report(rows: &[(&str, &EvalResult)]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Config("report needs at least one result".into()));
    }
    let cells: Vec<[String; 3]> = rows
        .iter()
        .map(|(name, r)| {
            let latency = r.latency.map_or_else(|| "-".to_string(), |l| format!("{:.3}", l.mean_ms));
            [name.to_string(), format!("{:.3}", r.aggregate), latency]
        })
        .collect();
    let header = [METHOD_HEADER, MCE_HEADER, LATENCY_HEADER];
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cols: [&str; 3]| {
        let _ = writeln!(out, "| {:<w0$} | {:>w1$} | {:>w2$} |", cols[0], cols[1], cols[2], w0 = widths[0], w1 = widths[1], w2 = widths[2]);
    };
    line(&mut out, header);
    let _ = writeln!(out, "|{}|{}|{}|", "-".repeat(widths[0] + 2), "-".repeat(widths[1] + 2), "-".repeat(widths[2] + 2));
    for row in &cells {
        line(&mut out, [&row[0], &row[1], &row[2]]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Side;

    #[test]
    fn mce_examples() {
        let z = DisplacementVector::<f64>::zero();
        assert_eq!(mce(&z, &z), 0.0);
        assert_eq!(mce(&DisplacementVector([2.0, -2.0, 2.0, 2.0]), &z), 2.0);
        assert_eq!(mce(&DisplacementVector([4.0, 0.0, 0.0, 0.0]), &z), 1.0);
    }

    #[test]
    fn threshold_excludes_without_altering_values() {
        let r = EvalResult::from_errors(vec![("a".into(), 1.0), ("b".into(), 50.0)], Some(45.0)).unwrap();
        assert_eq!(r.aggregate, 1.0);
        assert_eq!(r.excluded, 1);
        assert_eq!(r.per_image[1].mce, 50.0);
        let plain = EvalResult::from_errors(vec![("a".into(), 1.0), ("b".into(), 50.0)], None).unwrap();
        assert_eq!(plain.aggregate, 25.5);
        assert_eq!(plain.excluded, 0);
    }

    #[test]
    fn prediction_file_scoring() {
        let records = vec![
            AnnotationRecord::new("a", 448, 448, Side::Left, DisplacementVector([8.0, 0.0, 0.0, 4.0])).unwrap(),
            AnnotationRecord::new("b", 224, 224, Side::Right, DisplacementVector([0.0, 1.0, 1.0, 0.0])).unwrap(),
        ];
        let file = PredictionFile::parse("# baseline\na 4 0 0 2\nb 0 1 1 0\n", "p.txt").unwrap();
        let r = evaluate_predictions(&file, &records, 224, None).unwrap();
        assert!(r.aggregate < 1e-12);
        let short = PredictionFile::parse("a 4 0 0 2\n", "p.txt").unwrap();
        assert!(matches!(evaluate_predictions(&short, &records, 224, None), Err(Error::MissingPrediction(id)) if id == "b"));
        assert!(PredictionFile::parse("a 1 2 3\n", "p.txt").is_err());
        assert_eq!(PredictionFile::parse(&file.to_text(), "x").unwrap(), file);
    }

    #[test]
    fn report_layout() {
        let a = EvalResult::from_errors(vec![("x".into(), 1.5)], None).unwrap();
        let mut b = a.clone();
        b.latency = LatencyStats::from_millis(vec![2.0, 4.0, 3.0]);
        let text = emit_report(&[("first", &a), ("second", &b)]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains(MCE_HEADER) && lines[0].contains(LATENCY_HEADER));
        assert!(lines[2].contains("first") && lines[2].trim_end().ends_with("- |"));
        assert!(lines[3].contains("second") && lines[3].contains("3.000"));
        assert!(lines.iter().all(|l| l.chars().count() == lines[0].chars().count()));
    }
}
