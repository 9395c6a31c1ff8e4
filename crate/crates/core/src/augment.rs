//! On-the-fly geometric augmentation: rectify a training sample with its own
//! label, then distort it again with a displacement drawn from the training
//! labels.

use rand::Rng as _;

use crate::dataset::AnnotationRecord;
use crate::image::{ImageBuffer, ValidityMask};
use crate::rng::{rng_from, Rng};
use crate::warp::{DisplacementWarp, WarpPlan};
use crate::{DisplacementVector, Error, Real, Result};

/// Multiset of training labels at working resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementPool {
    entries: Vec<DisplacementVector<f64>>,
}

impl DisplacementPool {
    pub fn new(entries: Vec<DisplacementVector<f64>>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptySplit);
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[DisplacementVector<f64>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Uniform draw over the entries.
    pub fn sample(&self, rng: &mut Rng) -> DisplacementVector<f64> {
        self.entries[rng.random_range(0..self.entries.len())]
    }
}

/// Rescales every training label to a square `working_size` frame.
pub fn build_pool(train: &[AnnotationRecord], working_size: usize) -> Result<DisplacementPool> {
    if train.is_empty() {
        return Err(Error::EmptySplit);
    }
    let entries = train.iter().map(|r| r.label_at(working_size, working_size)).collect::<Result<Vec<_>>>()?;
    DisplacementPool::new(entries)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub probability: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { probability: 0.5, seed: 0 }
    }
}

impl AugmentConfig {
    pub fn new(probability: f64, seed: u64) -> Result<Self> {
        let cfg = Self { probability, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!("augment.probability must lie in [0, 1], got {}", self.probability)));
        }
        Ok(())
    }

    /// Random stream for one sample in one epoch.
    pub fn rng_for(&self, epoch: usize, index: usize) -> Rng {
        rng_from(self.seed, &[0xA06, epoch as u64, index as u64])
    }
}

#[derive(Debug, Clone)]
pub struct Augmented<T> {
    pub image: ImageBuffer<T>,
    pub label: DisplacementVector<T>,
    pub applied: bool,
    /// Pixels whose value traces back to valid input content; the input
    /// mask when the sample passed through unchanged.
    pub mask: ValidityMask,
}

/// With probability `cfg.probability`, replaces the distortion of `img` by
/// one drawn from `pool`. The returned label is the drawn vector itself.
pub fn augment_sample<T: Real>(
    img: &ImageBuffer<T>,
    label: &DisplacementVector<T>,
    pool: &DisplacementPool,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<Augmented<T>> {
    let full = ValidityMask::filled(img.width(), img.height(), true);
    augment_sample_masked(img, &full, label, pool, cfg, rng)
}

/// [`augment_sample`] for an input that already has invalid (zero-filled)
/// pixels; they stay invalid in the returned mask.
pub fn augment_sample_masked<T: Real>(
    img: &ImageBuffer<T>,
    img_mask: &ValidityMask,
    label: &DisplacementVector<T>,
    pool: &DisplacementPool,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> Result<Augmented<T>> {
    let (w, h) = (img.width(), img.height());
    if !rng.random_bool(cfg.probability) {
        return Ok(Augmented { image: img.clone(), label: *label, applied: false, mask: img_mask.clone() });
    }
    let d_new = pool.sample(rng);
    let h_old = DisplacementWarp::new(label, w, h)?.solve.homography;
    let label = d_new.cast::<T>();
    let h_new_inv = DisplacementWarp::new(&label, w, h)?.solve.homography.invert()?;
    // Rectify-then-distort as one resampling pass: output pixel p reads the
    // source at H_old⁻¹·H_new·p. A pixel is valid only if its rectified
    // position H_new·p lies in the frame and the source footprint is valid.
    let in_frame = WarpPlan::new(&h_new_inv, w, h, w, h)?.mask();
    let (mut image, mask) = WarpPlan::new(&h_new_inv.compose(&h_old)?, w, h, w, h)?.apply_masked(img, img_mask)?;
    let mask = mask.intersect(&in_frame)?;
    image.zero_outside(&mask)?;
    Ok(Augmented { image, label, applied: true, mask })
}
