//! Annotation records, split manifests, label rescaling and corner
//! statistics.
//!
//! A dataset directory holds `train.txt`, `val.txt` and `test.txt` plus one
//! `<image_id>.png` per record. Each manifest line is
//!
//! ```text
//! image_id side d0 d1 d2 d3 orig_w orig_h
//! ```
//!
//! with `side` one of `left`/`right` and displacements in original-resolution
//! pixels. Blank lines and lines starting with `#` are ignored.

mod synth;

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::geom::{displacement_to_homography, homography_to_displacement, rescale_homography, ScaleTransform};
use crate::image::ImageBuffer;
use crate::{DisplacementVector, Error, Real, Result, Side};

pub use synth::{
    generate_synthetic, synthetic_dataset, write_synthetic_dataset, DisplacementSampler, DisplacementSource,
    SampleSplits, SyntheticDatasetConfig, SyntheticSample, SyntheticSceneSpec,
};

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub orig_width: usize,
    pub orig_height: usize,
    pub side: Side,
    /// Original-resolution pixels.
    pub d: DisplacementVector<f64>,
}

impl AnnotationRecord {
    pub fn new(
        image_id: impl Into<String>,
        orig_width: usize,
        orig_height: usize,
        side: Side,
        d: DisplacementVector<f64>,
    ) -> Result<Self> {
        let r = Self { image_id: image_id.into(), orig_width, orig_height, side, d };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_id.is_empty() || self.image_id.chars().any(|c| c.is_whitespace() || c == '/' || c == '\\') {
            return Err(Error::InvariantViolation(format!("invalid image id `{}`", self.image_id)));
        }
        if self.orig_width == 0 || self.orig_height == 0 {
            return Err(Error::InvariantViolation(format!("{}: zero image dimension", self.image_id)));
        }
        if !self.d.is_finite() {
            return Err(Error::InvariantViolation(format!("{}: non-finite displacement", self.image_id)));
        }
        if !self.d.is_consistent_with(self.side) {
            return Err(Error::InvariantViolation(format!(
                "{}: side {} but displacement {} moves the other side",
                self.image_id, self.side, self.d
            )));
        }
        let bound = self.orig_height as f64 / 2.0;
        if self.d.max_abs() >= bound {
            return Err(Error::InvariantViolation(format!(
                "{}: |d| must stay below half the image height ({bound})",
                self.image_id
            )));
        }
        Ok(())
    }

    /// The label expressed for a `width × height` resize of the original
    /// image, via conjugation of the original homography with the scaling.
    pub fn label_at(&self, width: usize, height: usize) -> Result<DisplacementVector<f64>> {
        if width == self.orig_width && height == self.orig_height {
            return Ok(self.d);
        }
        let (ow, oh) = (self.orig_width as f64, self.orig_height as f64);
        let h = displacement_to_homography(&self.d, ow, oh)?;
        let s = ScaleTransform::between(ow, oh, width as f64, height as f64)?;
        let h_new = rescale_homography(&h, &s)?;
        let mut d = homography_to_displacement(&h_new, width as f64, height as f64)?.d;
        // The untouched side maps to itself exactly; keep those entries zero.
        for i in self.side.opposite().corners() {
            d.0[i] = 0.0;
        }
        Ok(d)
    }

    pub fn to_line(&self) -> String {
        format!("{} {} {} {} {}", self.image_id, self.side, self.d, self.orig_width, self.orig_height)
    }
}

impl fmt::Display for AnnotationRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

/// Parses one manifest line (no validation beyond syntax).
fn parse_fields(line: &str) -> std::result::Result<AnnotationRecord, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 8 {
        return Err(format!("expected 8 fields, found {}", fields.len()));
    }
    let side = Side::from_str(fields[1])?;
    let mut d = [0.0; 4];
    for (slot, f) in d.iter_mut().zip(&fields[2..6]) {
        *slot = f.parse::<f64>().map_err(|_| format!("invalid displacement `{f}`"))?;
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| format!("invalid dimension `{s}`"));
    Ok(AnnotationRecord {
        image_id: fields[0].to_string(),
        orig_width: dim(fields[6])?,
        orig_height: dim(fields[7])?,
        side,
        d: DisplacementVector(d),
    })
}

impl FromStr for AnnotationRecord {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let r = parse_fields(s.trim()).map_err(|m| Error::parse("<record>", 1, m))?;
        r.validate()?;
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }

    pub fn manifest_name(self) -> String {
        format!("{}.txt", self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub records: Vec<AnnotationRecord>,
}

impl DatasetSplit {
    pub fn new(name: SplitName) -> Self {
        Self { name, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

impl Default for Dataset {
    fn default() -> Self {
        Self {
            train: DatasetSplit::new(SplitName::Train),
            val: DatasetSplit::new(SplitName::Val),
            test: DatasetSplit::new(SplitName::Test),
        }
    }
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &DatasetSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, name: SplitName) -> &mut DatasetSplit {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Val => &mut self.val,
            SplitName::Test => &mut self.test,
        }
    }

    /// Checks every record and id uniqueness within and across splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for name in SplitName::ALL {
            for r in &self.split(name).records {
                r.validate()?;
                if !seen.insert(r.image_id.as_str()) {
                    return Err(Error::InvariantViolation(format!("duplicate image id `{}`", r.image_id)));
                }
            }
        }
        Ok(())
    }
}

/// Parses a manifest, reporting the first bad line.
pub fn parse_manifest(text: &str, origin: &str) -> Result<Vec<AnnotationRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let r = parse_fields(line).map_err(|m| Error::parse(origin, i + 1, m))?;
        r.validate().map_err(|e| match e {
            Error::InvariantViolation(m) => Error::InvariantViolation(format!("{origin}:{}: {m}", i + 1)),
            other => other,
        })?;
        if !seen.insert(r.image_id.clone()) {
            return Err(Error::InvariantViolation(format!("{origin}:{}: duplicate image id `{}`", i + 1, r.image_id)));
        }
        records.push(r);
    }
    Ok(records)
}

pub fn format_manifest(records: &[AnnotationRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

pub fn load_manifest(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text, &path.display().to_string())
}

/// Writes through a temporary file, fsyncs it and renames over `path`.
pub fn write_manifest_atomic(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("manifest")
    ));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(format_manifest(records).as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

/// Loads the three split manifests of a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut ds = Dataset::default();
    for name in SplitName::ALL {
        ds.split_mut(name).records = load_manifest(&dir.join(name.manifest_name()))?;
    }
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for name in SplitName::ALL {
        write_manifest_atomic(&dir.join(name.manifest_name()), &ds.split(name).records)?;
    }
    Ok(())
}

pub fn image_path(dir: impl AsRef<Path>, image_id: &str) -> PathBuf {
    dir.as_ref().join(format!("{image_id}.png"))
}

/// A record together with its decoded image.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub record: AnnotationRecord,
    pub image: ImageBuffer<T>,
}

impl<T: Real> Sample<T> {
    /// Image resized to `target × target` and the matching label.
    pub fn resized(&self, target: usize) -> Result<(ImageBuffer<T>, DisplacementVector<T>)> {
        let (img, d) = resize_record(&self.record, &self.image, target)?;
        Ok((img, d.cast()))
    }
}

/// Loads records of one split with their PNGs from `dir`.
pub fn load_samples<T: Real>(dir: impl AsRef<Path>, split: &DatasetSplit) -> Result<Vec<Sample<T>>> {
    split
        .records
        .iter()
        .map(|r| {
            let image = ImageBuffer::load_png(image_path(&dir, &r.image_id))?;
            Ok(Sample { record: r.clone(), image })
        })
        .collect()
}

/// Resizes `img` to a square `target` and rescales the label accordingly
/// (anisotropically when the original is not square).
pub fn resize_record<T: Real>(
    record: &AnnotationRecord,
    img: &ImageBuffer<T>,
    target: usize,
) -> Result<(ImageBuffer<T>, DisplacementVector<f64>)> {
    if target == 0 {
        return Err(Error::OutOfRange("resize target must be positive".into()));
    }
    let label = record.label_at(target, target)?;
    Ok((img.resize(target, target), label))
}

/// Per-corner mean absolute displacement plus side balance.
#[derive(Debug, Clone, PartialEq)]
pub struct CornerStats {
    pub per_corner_mean: [f64; 4],
    pub overall_mean: f64,
    pub left_count: usize,
    pub right_count: usize,
}

impl CornerStats {
    pub fn count(&self) -> usize {
        self.left_count + self.right_count
    }
}

impl fmt::Display for CornerStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.per_corner_mean;
        writeln!(f, "records = {}", self.count())?;
        writeln!(f, "left = {}", self.left_count)?;
        writeln!(f, "right = {}", self.right_count)?;
        writeln!(f, "mean_abs = {a} {b} {c} {d}")?;
        writeln!(f, "overall_mean_abs = {}", self.overall_mean)
    }
}

pub fn compute_stats(records: &[AnnotationRecord]) -> Result<CornerStats> {
    if records.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut sums = [0.0; 4];
    let (mut left, mut right) = (0, 0);
    for r in records {
        for (s, v) in sums.iter_mut().zip(r.d.0) {
            *s += v.abs();
        }
        match r.side {
            Side::Left => left += 1,
            Side::Right => right += 1,
        }
    }
    let n = records.len() as f64;
    let per_corner_mean = sums.map(|s| s / n);
    let record_means: f64 = records.iter().map(|r| r.d.0.iter().map(|v| v.abs()).sum::<f64>() / 4.0).sum();
    Ok(CornerStats { per_corner_mean, overall_mean: record_means / n, left_count: left, right_count: right })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, side: Side, d: [f64; 4]) -> AnnotationRecord {
        AnnotationRecord::new(id, 224, 224, side, DisplacementVector(d)).unwrap()
    }

    #[test]
    fn empty_manifests_give_empty_splits() {
        let dir = tempfile::tempdir().unwrap();
        for n in SplitName::ALL {
            fs::write(dir.path().join(n.manifest_name()), "").unwrap();
        }
        let ds = load_dataset(dir.path()).unwrap();
        assert!(ds.train.is_empty() && ds.val.is_empty() && ds.test.is_empty());
    }

    #[test]
    fn rejects_side_violation_and_out_of_range() {
        let bad = parse_manifest("a left 1 2 0 0 224 224\n", "m");
        assert!(matches!(bad, Err(Error::InvariantViolation(_))));
        let bad = parse_manifest("a left 112 0 0 0 224 224\n", "m");
        assert!(matches!(bad, Err(Error::InvariantViolation(_))));
        let bad = parse_manifest("ok right 0 1 1 0 224 224\na left 1 0\n", "m");
        match bad {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let dup = parse_manifest("a left 0 0 0 0 10 10\na left 0 0 0 0 10 10\n", "m");
        assert!(matches!(dup, Err(Error::InvariantViolation(_))));
    }

    #[test]
    fn duplicate_ids_across_splits_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = Dataset::default();
        ds.train.records.push(rec("a", Side::Left, [1.0, 0.0, 0.0, 2.0]));
        ds.test.records.push(rec("a", Side::Left, [1.0, 0.0, 0.0, 2.0]));
        save_dataset(dir.path(), &ds).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::InvariantViolation(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = Dataset::default();
        ds.train.records.push(rec("a", Side::Left, [10.125, 0.0, 0.0, -3.3]));
        ds.val.records.push(rec("b", Side::Right, [0.0, 1e-7, 99.75, 0.0]));
        ds.test.records.push(AnnotationRecord::new("c", 640, 480, Side::Left, DisplacementVector([0.1, 0.0, 0.0, 0.2])).unwrap());
        save_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn resize_labels() {
        let img = ImageBuffer::<f64>::zeros(448, 448, 1);
        let r = AnnotationRecord::new("a", 448, 448, Side::Left, DisplacementVector([20.0, 0.0, 0.0, 20.0])).unwrap();
        let (small, d) = resize_record(&r, &img, 224).unwrap();
        assert_eq!((small.width(), small.height()), (224, 224));
        for (got, want) in d.0.iter().zip([10.0, 0.0, 0.0, 10.0]) {
            assert!((got - want).abs() < 1e-9);
        }

        let z = AnnotationRecord::new("z", 300, 200, Side::Right, DisplacementVector::zero()).unwrap();
        assert_eq!(z.label_at(224, 224).unwrap(), DisplacementVector::zero());

        let r = AnnotationRecord::new("w", 640, 480, Side::Right, DisplacementVector([0.0, 30.0, -12.0, 0.0])).unwrap();
        let d = r.label_at(224, 224).unwrap();
        let s = 224.0 / 480.0;
        for (got, want) in d.0.iter().zip([0.0, 30.0 * s, -12.0 * s, 0.0]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn stats_examples() {
        let recs = [rec("a", Side::Left, [10.0, 0.0, 0.0, 10.0]), rec("b", Side::Right, [0.0, 20.0, 20.0, 0.0])];
        let s = compute_stats(&recs).unwrap();
        assert_eq!(s.per_corner_mean, [5.0, 10.0, 10.0, 5.0]);
        assert_eq!(s.overall_mean, 7.5);
        assert_eq!((s.left_count, s.right_count), (1, 1));

        let s = compute_stats(&[rec("z", Side::Left, [0.0; 4])]).unwrap();
        assert_eq!(s.per_corner_mean, [0.0; 4]);
        assert_eq!(s.overall_mean, 0.0);

        assert!(matches!(compute_stats(&[]), Err(Error::EmptySplit)));
    }
}
