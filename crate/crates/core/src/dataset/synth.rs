//! Procedural shelf scenes used as stand-in training data.
//!
//! A scene is a light wall with `shelf_rows` dark shelf boards, each carrying
//! a row of colored product boxes. The fronto-parallel render is distorted
//! with the inverse of the displacement homography, so rectifying with the
//! stored label recovers the render.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{image_path, save_dataset, AnnotationRecord, Dataset, Sample, SplitName};
use crate::geom::displacement_to_homography;
use crate::image::{ImageBuffer, ValidityMask};
use crate::rng::{rng_from, Rng};
use crate::warp::warp_image;
use crate::{DisplacementVector, Error, Real, Result, Side};

/// Per-corner magnitudes drawn from a normal truncated to `[0, max]` at a
/// reference resolution, with a uniform side and uniform signs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplacementSampler {
    pub mean: f64,
    pub std_dev: f64,
    pub max: f64,
    pub reference_height: f64,
}

impl Default for DisplacementSampler {
    fn default() -> Self {
        Self { mean: 19.0, std_dev: 8.0, max: 56.0, reference_height: 224.0 }
    }
}

impl DisplacementSampler {
    /// Draws a side-consistent displacement for a frame of `height` pixels.
    pub fn sample(&self, rng: &mut Rng, height: usize) -> (Side, DisplacementVector<f64>) {
        let side = if rng.random_bool(0.5) { Side::Left } else { Side::Right };
        let normal = Normal::new(self.mean, self.std_dev).expect("valid normal parameters");
        let scale = height as f64 / self.reference_height;
        let mut draw = || loop {
            let m: f64 = normal.sample(rng);
            if (0.0..=self.max).contains(&m) {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                return sign * m * scale;
            }
        };
        let (top, bottom) = (draw(), draw());
        (side, DisplacementVector::from_side(side, top, bottom))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DisplacementSource {
    Explicit { side: Side, d: DisplacementVector<f64> },
    Sampled(DisplacementSampler),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    /// Square output size in pixels.
    pub size: usize,
    pub shelf_rows: usize,
    pub products_per_row: usize,
    pub displacement: DisplacementSource,
}

impl SyntheticSceneSpec {
    pub fn new(seed: u64, size: usize) -> Self {
        Self {
            seed,
            size,
            shelf_rows: 4,
            products_per_row: 6,
            displacement: DisplacementSource::Sampled(DisplacementSampler::default()),
        }
    }

    pub fn with_displacement(mut self, side: Side, d: DisplacementVector<f64>) -> Self {
        self.displacement = DisplacementSource::Explicit { side, d };
        self
    }
}

/// A generated sample: the distorted input, its label and the undistorted
/// render it was made from.
#[derive(Debug, Clone)]
pub struct SyntheticSample<T> {
    pub image: ImageBuffer<T>,
    pub record: AnnotationRecord,
    /// Pixels of `image` that carry scene content rather than zero fill.
    pub mask: ValidityMask,
    pub fronto_parallel: ImageBuffer<T>,
}

struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    color: [f64; 3],
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Box-filtered rasterization: each pixel `(x, y)` covers
/// `[x−½, x+½] × [y−½, y+½]` and rectangles are composited in order.
fn rasterize(size: usize, background: [f64; 3], rects: &[Rect]) -> [Vec<f64>; 3] {
    let n = size * size;
    let mut planes = [vec![background[0]; n], vec![background[1]; n], vec![background[2]; n]];
    for r in rects {
        let xs = (r.x0 + 0.5).floor().max(0.0) as usize;
        let xe = ((r.x1 + 0.5).ceil().max(0.0) as usize).min(size);
        let ys = (r.y0 + 0.5).floor().max(0.0) as usize;
        let ye = ((r.y1 + 0.5).ceil().max(0.0) as usize).min(size);
        for y in ys..ye {
            let cy = overlap(y as f64 - 0.5, y as f64 + 0.5, r.y0, r.y1);
            if cy <= 0.0 {
                continue;
            }
            for x in xs..xe {
                let cov = cy * overlap(x as f64 - 0.5, x as f64 + 0.5, r.x0, r.x1);
                if cov <= 0.0 {
                    continue;
                }
                let i = y * size + x;
                for (plane, c) in planes.iter_mut().zip(r.color) {
                    plane[i] = plane[i] * (1.0 - cov) + c * cov;
                }
            }
        }
    }
    planes
}

fn render_scene(spec: &SyntheticSceneSpec, rng: &mut Rng) -> ImageBuffer<f64> {
    let s = spec.size as f64;
    let rows = spec.shelf_rows.max(1);
    let row_h = s / rows as f64;
    let board = (s / 22.0).max(1.5);
    let wall = 0.72 + 0.1 * rng.random::<f64>();
    let background = [wall, wall * 0.98, wall * 0.94];
    let mut rects = Vec::new();
    for r in 0..rows {
        let top = r as f64 * row_h - 0.5;
        let board_top = top + row_h - board;
        let mut x = -0.5 + rng.random::<f64>() * s / 20.0;
        let mean_w = s / spec.products_per_row.max(1) as f64;
        while x < s - 0.5 {
            let w = mean_w * (0.55 + 0.7 * rng.random::<f64>());
            let h = (row_h - board) * (0.45 + 0.5 * rng.random::<f64>());
            let hue: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let color = hue.map(|v| 0.12 + 0.8 * v);
            rects.push(Rect { x0: x, y0: board_top - h, x1: (x + w).min(s - 0.5), y1: board_top, color });
            // Label band across the box.
            let band_y = board_top - h * (0.35 + 0.3 * rng.random::<f64>());
            let light = color.map(|c| (c + 0.35).min(0.97));
            rects.push(Rect { x0: x + w * 0.15, y0: band_y - h * 0.08, x1: x + w * 0.85, y1: band_y + h * 0.08, color: light });
            x += w + s / 80.0 * rng.random::<f64>();
        }
        rects.push(Rect { x0: -0.5, y0: board_top, x1: s - 0.5, y1: board_top + board, color: [0.18, 0.17, 0.16] });
        rects.push(Rect {
            x0: -0.5,
            y0: board_top,
            x1: s - 0.5,
            y1: board_top + (board * 0.3).max(0.6),
            color: [0.93, 0.93, 0.9],
        });
    }
    let [r, g, b] = rasterize(spec.size, background, &rects).map(|p| blur(&p, spec.size));
    let mut data = r;
    data.extend(g);
    data.extend(b);
    let data = data.into_iter().map(|v: f64| quantize(v.clamp(0.0, 1.0))).collect();
    ImageBuffer::new(spec.size, spec.size, 3, data).expect("rendered scene is well formed")
}

/// Separable binomial `[1 4 6 4 1] / 16` blur with clamped borders. Softens
/// box edges so repeated bilinear resampling stays close to the render.
fn blur(plane: &[f64], size: usize) -> Vec<f64> {
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let at = |i: isize| i.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = (0..5).map(|k| K[k] * plane[y * size + at(x as isize + k as isize - 2)]).sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = (0..5).map(|k| K[k] * tmp[at(y as isize + k as isize - 2) * size + x]).sum();
        }
    }
    out
}

/// Snaps to the 8-bit level a PNG round trip would produce, so in-memory and
/// on-disk samples agree exactly.
fn quantize(v: f64) -> f64 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) / 255.0
}

/// Renders a scene and distorts it by `H(d)⁻¹`; deterministic in `spec.seed`.
pub fn generate_synthetic<T: Real>(spec: &SyntheticSceneSpec) -> Result<SyntheticSample<T>> {
    if spec.size < 2 {
        return Err(Error::OutOfRange("synthetic image size must be at least 2".into()));
    }
    let mut rng = rng_from(spec.seed, &[0x5CE4E]);
    let fronto = render_scene(spec, &mut rng);
    let (side, d) = match &spec.displacement {
        DisplacementSource::Explicit { side, d } => (*side, *d),
        DisplacementSource::Sampled(sampler) => sampler.sample(&mut rng, spec.size),
    };
    let record = AnnotationRecord::new(format!("syn{}", spec.seed), spec.size, spec.size, side, d)?;
    let s = spec.size as f64;
    let h = displacement_to_homography(&d, s, s)?;
    let (image, mask) = if d == DisplacementVector::zero() {
        (fronto.clone(), ValidityMask::filled(spec.size, spec.size, true))
    } else {
        let (warped, mask) = warp_image(&fronto, &h.invert()?, spec.size, spec.size)?;
        (ImageBuffer::new(spec.size, spec.size, 3, warped.data().iter().map(|v| quantize(*v)).collect())?, mask)
    };
    Ok(SyntheticSample { image: image.cast(), record, mask, fronto_parallel: fronto.cast() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDatasetConfig {
    pub seed: u64,
    pub size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub shelf_rows: usize,
    pub products_per_row: usize,
}

impl SyntheticDatasetConfig {
    pub fn new(seed: u64, size: usize, train: usize, val: usize, test: usize) -> Self {
        Self { seed, size, train, val, test, shelf_rows: 4, products_per_row: 6 }
    }

    fn count(&self, split: SplitName) -> usize {
        match split {
            SplitName::Train => self.train,
            SplitName::Val => self.val,
            SplitName::Test => self.test,
        }
    }
}

/// Generated samples for the three splits.
#[derive(Debug, Clone, Default)]
pub struct SampleSplits<T> {
    pub train: Vec<Sample<T>>,
    pub val: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
}

impl<T> SampleSplits<T> {
    pub fn split(&self, name: SplitName) -> &[Sample<T>] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Builds the whole synthetic dataset in memory. Image ids are
/// `<split>_<index>`; each sample's seed derives from the dataset seed, the
/// split and the index.
pub fn synthetic_dataset<T: Real>(cfg: &SyntheticDatasetConfig) -> Result<SampleSplits<T>> {
    let mut out = SampleSplits { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (k, name) in SplitName::ALL.into_iter().enumerate() {
        let mut samples = Vec::with_capacity(cfg.count(name));
        for i in 0..cfg.count(name) {
            let mut spec = SyntheticSceneSpec::new(crate::rng::derive_seed(cfg.seed, &[k as u64, i as u64]), cfg.size);
            spec.shelf_rows = cfg.shelf_rows;
            spec.products_per_row = cfg.products_per_row;
            let g = generate_synthetic::<T>(&spec)?;
            let mut record = g.record;
            record.image_id = format!("{}_{i:05}", name.as_str());
            samples.push(Sample { record, image: g.image });
        }
        match name {
            SplitName::Train => out.train = samples,
            SplitName::Val => out.val = samples,
            SplitName::Test => out.test = samples,
        }
    }
    Ok(out)
}

/// Writes PNGs and the three manifests of a synthetic dataset into `dir`.
pub fn write_synthetic_dataset(dir: impl AsRef<Path>, cfg: &SyntheticDatasetConfig) -> Result<Dataset> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let splits = synthetic_dataset::<f64>(cfg)?;
    let mut ds = Dataset::default();
    for name in SplitName::ALL {
        for s in splits.split(name) {
            s.image.save_png(image_path(dir, &s.record.image_id))?;
            ds.split_mut(name).records.push(s.record.clone());
        }
    }
    save_dataset(dir, &ds)?;
    Ok(ds)
}
