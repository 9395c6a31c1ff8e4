//! Displacement regressor: a small convolutional backbone predicting the
//! four corner displacements (or a side logit plus two values), the
//! composite corner + photometric loss and its exact parameter gradient.

mod checkpoint;
mod net;

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::image::{ImageBuffer, ValidityMask};
use crate::rng::rng_from;
use crate::warp::{photometric_l1, photometric_l1_grad, DisplacementWarp};
use crate::{DisplacementVector, Error, Real, Result, Side};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint};
use net::{Layout, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    FourPoint,
    ThreePoint,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::FourPoint => 4,
            HeadKind::ThreePoint => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::FourPoint => "four-point",
            HeadKind::ThreePoint => "three-point",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "four-point" => Ok(HeadKind::FourPoint),
            "three-point" => Ok(HeadKind::ThreePoint),
            _ => Err(Error::Config(format!("unknown head `{s}` (expected four-point or three-point)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub channels: usize,
    /// Output width of each stride-2 block.
    pub widths: Vec<usize>,
    pub head: HeadKind,
    /// Weight of the photometric term.
    pub photometric_weight: f64,
    /// Regress `2d/height` instead of raw pixels.
    pub normalize_targets: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            channels: 3,
            widths: vec![16, 32, 64, 96],
            head: HeadKind::FourPoint,
            photometric_weight: 1.0,
            normalize_targets: true,
        }
    }
}

const FINGERPRINT_TAG: &str = "planerect-net/1";

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size < 2 {
            return Err(Error::Config("input size must be at least 2".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("backbone widths must be a nonempty list of positive integers".into()));
        }
        if !(self.photometric_weight >= 0.0) {
            return Err(Error::Config("photometric weight must be non-negative".into()));
        }
        Ok(())
    }

    /// `Σ_l (9·c_{l−1}·c_l + c_l) + (c_L + 1)·outputs` with `c_0 = channels`.
    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    fn layout(&self) -> Layout {
        Layout::new(self.input_size, self.channels, &self.widths, self.head.outputs())
    }

    /// Architecture identity stored in checkpoints. The photometric weight
    /// only affects training and is left out.
    pub fn fingerprint(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!(
            "{FINGERPRINT_TAG} input={} channels={} widths={} head={} normalize={}",
            self.input_size,
            self.channels,
            widths.join(","),
            self.head,
            self.normalize_targets
        )
    }

    pub fn from_fingerprint(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed model fingerprint `{s}`"));
        let mut parts = s.split_whitespace();
        if parts.next() != Some(FINGERPRINT_TAG) {
            return Err(bad());
        }
        let mut cfg = ModelConfig::default();
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(bad)?;
            match k {
                "input" => cfg.input_size = v.parse().map_err(|_| bad())?,
                "channels" => cfg.channels = v.parse().map_err(|_| bad())?,
                "widths" => {
                    cfg.widths = v.split(',').map(|w| w.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                }
                "head" => cfg.head = v.parse()?,
                "normalize" => cfg.normalize_targets = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Flat parameter vector tagged with the architecture it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub fingerprint: String,
    pub values: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self { fingerprint: cfg.fingerprint(), values: vec![T::zero(); cfg.param_count()] }
    }

    /// He-normal convolution weights, small head weights, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let layout = cfg.layout();
        let mut rng = rng_from(seed, &[0x1417]);
        let mut values = vec![T::zero(); layout.total];
        for b in &layout.blocks {
            let std = (2.0 / (b.cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in &mut values[b.offset..b.offset + b.weight_len()] {
                *v = T::lit(normal.sample(&mut rng));
            }
        }
        let std = 0.1 / (layout.head_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for v in &mut values[layout.head_offset..layout.head_offset + layout.head_in * layout.head_out] {
            *v = T::lit(normal.sample(&mut rng));
        }
        Self { fingerprint: cfg.fingerprint(), values }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams { fingerprint: self.fingerprint.clone(), values: self.values.iter().map(|v| U::lit(v.to_f64_lossy())).collect() }
    }
}

/// Raw network output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prediction<T> {
    /// Per-corner values, normalized or in pixels depending on the config.
    FourPoint([T; 4]),
    /// Positive logit selects the right side; `values` are its top and
    /// bottom corner displacements.
    ThreePoint { side_logit: T, values: [T; 2] },
}

/// `2d/height`, failing when a component exceeds half the height.
pub fn normalize_targets<T: Real>(d: &DisplacementVector<T>, height: usize) -> Result<[T; 4]> {
    let half = T::lit(height as f64 / 2.0);
    if d.0.iter().any(|v| !(v.abs() <= half)) {
        return Err(Error::OutOfRange(format!("displacement {d} exceeds half the height {height}")));
    }
    Ok(d.0.map(|v| v / half))
}

pub fn denormalize<T: Real>(n: &[T; 4], height: usize) -> DisplacementVector<T> {
    let half = T::lit(height as f64 / 2.0);
    DisplacementVector(n.map(|v| v * half))
}

/// Mean squared error over the four corners.
pub fn corner_loss<T: Real>(pred: &[T; 4], gt: &[T; 4]) -> T {
    pred.iter().zip(gt).map(|(p, g)| (*p - *g) * (*p - *g)).sum::<T>() / T::lit(4.0)
}

/// Fills the chosen side's corners, leaving the other side at zero.
pub fn decode_three_point<T: Real>(side_logit: T, values: [T; 2]) -> (Side, DisplacementVector<T>) {
    let side = if side_logit > T::zero() { Side::Right } else { Side::Left };
    (side, DisplacementVector::from_side(side, values[0], values[1]))
}

/// Binary cross-entropy on the side plus mean squared error of the two
/// regressed values against the true side's displacements.
pub fn three_point_loss<T: Real>(side_logit: T, values: [T; 2], gt_side: Side, gt_values: [T; 2]) -> T {
    let y = if gt_side == Side::Right { T::one() } else { T::zero() };
    bce_with_logit(side_logit, y) + ((values[0] - gt_values[0]).powi(2) + (values[1] - gt_values[1]).powi(2)) / T::lit(2.0)
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn bce_with_logit<T: Real>(logit: T, y: T) -> T {
    softplus(logit) - y * logit
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Loss value, its parts and the gradient with respect to every parameter.
#[derive(Debug, Clone)]
pub struct LossBreakdown<T> {
    pub total: T,
    /// Corner regression term; for the three-point head it also holds the
    /// side classification loss.
    pub regression: T,
    pub photometric: T,
    pub gradient: Vec<T>,
}

/// How the photometric comparison decides which pixels count.
#[derive(Debug, Clone, Copy)]
pub enum MaskPolicy<'a> {
    /// Intersection of the validity masks of both warps.
    Joint,
    /// A caller-supplied mask; out-of-frame samples are clamped to the
    /// border. With the mask held fixed the loss is smooth in the
    /// parameters, which is what a finite-difference check needs.
    Fixed(&'a ValidityMask),
}

/// Configuration plus parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    layout: Layout,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        if params.fingerprint != config.fingerprint() {
            return Err(Error::FingerprintMismatch { expected: config.fingerprint(), found: params.fingerprint });
        }
        let layout = config.layout();
        if params.values.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} parameters, got {}",
                layout.total,
                params.values.len()
            )));
        }
        Ok(Self { config, params, layout })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Self::new(config, params)
    }

    /// Converts an arbitrary image to the network's input: resized to the
    /// working size and reduced to gray when the model is single-channel.
    pub fn prepare(&self, img: &ImageBuffer<T>) -> ImageBuffer<T> {
        let s = self.config.input_size;
        let img = if img.width() != s || img.height() != s { img.resize(s, s) } else { img.clone() };
        if self.config.channels == 1 && img.channels() == 3 {
            img.to_grayscale()
        } else {
            img
        }
    }

    fn check_input(&self, img: &ImageBuffer<T>) -> Result<()> {
        let s = self.config.input_size;
        if img.width() != s || img.height() != s || img.channels() != self.config.channels {
            return Err(Error::ShapeMismatch(format!(
                "model takes {s}×{s}×{}, got {}×{}×{}",
                self.config.channels,
                img.width(),
                img.height(),
                img.channels()
            )));
        }
        Ok(())
    }

    fn trace(&self, img: &ImageBuffer<T>) -> Result<Trace<T>> {
        self.check_input(img)?;
        let half = T::lit(0.5);
        let input = img.data().iter().map(|v| *v - half).collect();
        Ok(net::forward(&self.layout, &self.params.values, input))
    }

    pub fn forward(&self, img: &ImageBuffer<T>) -> Result<Prediction<T>> {
        let out = self.trace(img)?.output;
        Ok(match self.config.head {
            HeadKind::FourPoint => Prediction::FourPoint([out[0], out[1], out[2], out[3]]),
            HeadKind::ThreePoint => Prediction::ThreePoint { side_logit: out[0], values: [out[1], out[2]] },
        })
    }

    /// Predicted displacement in pixels at the working size.
    pub fn predict(&self, img: &ImageBuffer<T>) -> Result<DisplacementVector<T>> {
        Ok(self.decode(&self.forward(img)?))
    }

    pub fn decode(&self, p: &Prediction<T>) -> DisplacementVector<T> {
        let scale = self.output_scale();
        match *p {
            Prediction::FourPoint(o) => DisplacementVector(o.map(|v| v * scale)),
            Prediction::ThreePoint { side_logit, values } => decode_three_point(side_logit, values.map(|v| v * scale)).1,
        }
    }

    /// Pixels per output unit.
    fn output_scale(&self) -> T {
        if self.config.normalize_targets {
            T::lit(self.config.input_size as f64 / 2.0)
        } else {
            T::one()
        }
    }

    fn targets(&self, gt: &DisplacementVector<T>) -> Result<[T; 4]> {
        if self.config.normalize_targets {
            normalize_targets(gt, self.config.input_size)
        } else {
            Ok(gt.0)
        }
    }

    /// Composite loss for one prepared sample and its gradient.
    pub fn composite_loss(&self, img: &ImageBuffer<T>, gt: &DisplacementVector<T>, gt_side: Side) -> Result<LossBreakdown<T>> {
        self.composite_loss_with(img, gt, gt_side, MaskPolicy::Joint)
    }

    pub fn composite_loss_with(
        &self,
        img: &ImageBuffer<T>,
        gt: &DisplacementVector<T>,
        gt_side: Side,
        policy: MaskPolicy<'_>,
    ) -> Result<LossBreakdown<T>> {
        let trace = self.trace(img)?;
        let out = &trace.output;
        let target = self.targets(gt)?;
        let scale = self.output_scale();
        let mut g_out = vec![T::zero(); out.len()];

        let (regression, d_pred) = match self.config.head {
            HeadKind::FourPoint => {
                let o = [out[0], out[1], out[2], out[3]];
                for k in 0..4 {
                    g_out[k] = (o[k] - target[k]) / T::lit(2.0);
                }
                (corner_loss(&o, &target), DisplacementVector(o.map(|v| v * scale)))
            }
            HeadKind::ThreePoint => {
                let (logit, values) = (out[0], [out[1], out[2]]);
                let gt_values = DisplacementVector(target).side_values(gt_side);
                let y = if gt_side == Side::Right { T::one() } else { T::zero() };
                g_out[0] = sigmoid(logit) - y;
                g_out[1] = values[0] - gt_values[0];
                g_out[2] = values[1] - gt_values[1];
                let loss = three_point_loss(logit, values, gt_side, gt_values);
                (loss, decode_three_point(logit, values.map(|v| v * scale)).1)
            }
        };

        let lambda = T::lit(self.config.photometric_weight);
        let mut photometric = T::zero();
        if lambda > T::zero() {
            let (w, h) = (img.width(), img.height());
            let (pred_warp, gt_warp) = match policy {
                MaskPolicy::Joint => (DisplacementWarp::new(&d_pred, w, h)?, DisplacementWarp::new(gt, w, h)?),
                MaskPolicy::Fixed(_) => (DisplacementWarp::new_clamped(&d_pred, w, h)?, DisplacementWarp::new_clamped(gt, w, h)?),
            };
            let (a, ma) = pred_warp.plan.apply(img)?;
            let (b, mb) = gt_warp.plan.apply(img)?;
            let mask = match policy {
                MaskPolicy::Joint => ma.intersect(&mb)?,
                MaskPolicy::Fixed(m) => m.clone(),
            };
            photometric = photometric_l1(&a, &b, &mask)?;
            let mut upstream = photometric_l1_grad(&a, &b, &mask)?;
            upstream.iter_mut().for_each(|v| *v *= lambda);
            let g_d = pred_warp.backprop(img, &upstream)?;
            match self.config.head {
                HeadKind::FourPoint => {
                    for k in 0..4 {
                        g_out[k] += g_d[k] * scale;
                    }
                }
                HeadKind::ThreePoint => {
                    let side = if out[0] > T::zero() { Side::Right } else { Side::Left };
                    let [top, bottom] = side.corners();
                    g_out[1] += g_d[top] * scale;
                    g_out[2] += g_d[bottom] * scale;
                }
            }
        }

        let mut gradient = vec![T::zero(); self.layout.total];
        net::backward(&self.layout, &self.params.values, &trace, &g_out, &mut gradient);
        Ok(LossBreakdown { total: regression + lambda * photometric, regression, photometric, gradient })
    }

    /// Joint validity mask the photometric term would use for this sample.
    pub fn photometric_mask(&self, img: &ImageBuffer<T>, gt: &DisplacementVector<T>) -> Result<ValidityMask> {
        let d_pred = self.predict(img)?;
        let (w, h) = (img.width(), img.height());
        let ma = DisplacementWarp::new(&d_pred, w, h)?.plan.mask();
        let mb = DisplacementWarp::new(gt, w, h)?.plan.mask();
        ma.intersect(&mb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(head: HeadKind) -> ModelConfig {
        ModelConfig { input_size: 16, channels: 3, widths: vec![3, 4], head, photometric_weight: 1.0, normalize_targets: true }
    }

    fn scene(size: usize) -> ImageBuffer<f64> {
        ImageBuffer::from_fn(size, size, 3, |c, x, y| {
            let (x, y) = (x as f64, y as f64);
            0.5 + 0.25 * (0.5 * x + 0.3 * y + c as f64).sin() * (0.2 * y - 0.1 * x).cos()
        })
    }

    #[test]
    fn normalization_examples() {
        let n = normalize_targets(&DisplacementVector([112.0, 0.0, 0.0, -112.0]), 224).unwrap();
        assert_eq!(n, [1.0, 0.0, 0.0, -1.0]);
        assert_eq!(normalize_targets(&DisplacementVector::<f64>::zero(), 224).unwrap(), [0.0; 4]);
        assert!(matches!(normalize_targets(&DisplacementVector([0.0, 113.0, 0.0, 0.0]), 224), Err(Error::OutOfRange(_))));
        let d = DisplacementVector([3.140625, -7.5, 0.0, 21.25]);
        assert_eq!(denormalize(&normalize_targets(&d, 64).unwrap(), 64), d);
    }

    #[test]
    fn corner_loss_examples() {
        assert_eq!(corner_loss(&[0.3, -0.2, 0.1, 0.0], &[0.3, -0.2, 0.1, 0.0]), 0.0);
        assert_eq!(corner_loss(&[1.0, 0.0, 0.0, 0.0], &[0.0; 4]), 0.25);
    }

    #[test]
    fn three_point_decoding() {
        let (side, d) = decode_three_point(-3.0, [0.4, -0.2]);
        assert_eq!(side, Side::Left);
        assert_eq!(d, DisplacementVector([0.4, 0.0, 0.0, -0.2]));
        let (side, d) = decode_three_point(2.0, [1.0, 2.0]);
        assert_eq!(side, Side::Right);
        assert!(d.is_consistent_with(side));
        assert!(three_point_loss(20.0, [1.0, 2.0], Side::Right, [1.0, 2.0]) < 1e-8);
    }

    #[test]
    fn zero_params_predict_zero() {
        let cfg = tiny(HeadKind::FourPoint);
        let m = Model::new(cfg.clone(), ModelParams::<f64>::zeros(&cfg)).unwrap();
        assert_eq!(m.predict(&scene(16)).unwrap(), DisplacementVector::zero());
        assert!(matches!(m.forward(&scene(12)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn forward_is_deterministic_and_sized() {
        let m = Model::<f64>::init(tiny(HeadKind::ThreePoint), 4).unwrap();
        let a = m.forward(&scene(16)).unwrap();
        assert_eq!(a, m.forward(&scene(16)).unwrap());
        assert!(matches!(a, Prediction::ThreePoint { .. }));
        assert!(m.predict(&scene(16)).unwrap().inferred_side().is_some() || m.predict(&scene(16)).unwrap() == DisplacementVector::zero());
    }

    #[test]
    fn fingerprint_round_trip() {
        let cfg = tiny(HeadKind::ThreePoint);
        assert_eq!(ModelConfig::from_fingerprint(&cfg.fingerprint()).unwrap().fingerprint(), cfg.fingerprint());
        assert!(ModelConfig::from_fingerprint("something else").is_err());
        assert_eq!(cfg.param_count(), (9 * 3 * 3 + 3) + (9 * 3 * 4 + 4) + (4 + 1) * 3);
    }

    #[test]
    fn lambda_zero_is_pure_corner_loss() {
        let mut cfg = tiny(HeadKind::FourPoint);
        cfg.photometric_weight = 0.0;
        let m = Model::<f64>::init(cfg, 1).unwrap();
        let gt = DisplacementVector([1.5, 0.0, 0.0, -0.5]);
        let l = m.composite_loss(&scene(16), &gt, Side::Left).unwrap();
        let Prediction::FourPoint(o) = m.forward(&scene(16)).unwrap() else { unreachable!() };
        assert_eq!(l.total, corner_loss(&o, &normalize_targets(&gt, 16).unwrap()));
    }

    #[test]
    fn loss_vanishes_at_truth() {
        let cfg = tiny(HeadKind::FourPoint);
        let m = Model::new(cfg.clone(), ModelParams::<f64>::zeros(&cfg)).unwrap();
        let l = m.composite_loss(&scene(16), &DisplacementVector::zero(), Side::Left).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(l.gradient.iter().all(|g| *g == 0.0));
    }

    fn check_gradient(cfg: ModelConfig, seed: u64, gt: DisplacementVector<f64>, side: Side) {
        let m = Model::<f64>::init(cfg.clone(), seed).unwrap();
        let img = scene(cfg.input_size);
        let mask = m.photometric_mask(&img, &gt).unwrap().eroded(1);
        let l = m.composite_loss_with(&img, &gt, side, MaskPolicy::Fixed(&mask)).unwrap();
        let mut fd = vec![0.0; l.gradient.len()];
        for i in 0..fd.len() {
            let mut p = m.params.clone();
            p.values[i] += 1e-4;
            let up = Model::new(cfg.clone(), p.clone()).unwrap().composite_loss_with(&img, &gt, side, MaskPolicy::Fixed(&mask)).unwrap().total;
            p.values[i] -= 2e-4;
            let down = Model::new(cfg.clone(), p).unwrap().composite_loss_with(&img, &gt, side, MaskPolicy::Fixed(&mask)).unwrap().total;
            fd[i] = (up - down) / 2e-4;
        }
        let diff: f64 = l.gradient.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm <= 1e-3, "relative gradient error {}", diff / norm);
    }

    #[test]
    fn four_point_gradient_matches_differences() {
        check_gradient(tiny(HeadKind::FourPoint), 2, DisplacementVector([1.2, 0.0, 0.0, -0.8]), Side::Left);
    }

    #[test]
    fn three_point_gradient_matches_differences() {
        check_gradient(tiny(HeadKind::ThreePoint), 5, DisplacementVector([0.0, -1.0, 0.7, 0.0]), Side::Right);
    }
}
