//! AdamW training with a per-epoch cosine schedule, on-the-fly augmentation
//! and best-validation checkpoint selection.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::augment::{augment_sample_masked, build_pool, AugmentConfig, DisplacementPool};
use crate::dataset::Sample;
use crate::eval::mce;
use crate::image::{ImageBuffer, ValidityMask};
use crate::model::{HeadKind, Model, ModelConfig, ModelParams};
use crate::rng::rng_from;
use crate::{DisplacementVector, Error, Real, Result, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Published optimizer settings at 224×224.
    Paper,
    /// Reduced resolution and backbone for CPU runs.
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::Config(format!("unknown profile `{s}` (expected paper or desk)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Validate every this many epochs (the last epoch is always validated).
    pub eval_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 51,
            batch_size: 80,
            lr0: 1e-4,
            lr_min: 1e-6,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            eval_every: 1,
            augment: AugmentConfig { probability: 0.5, seed: 0 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr0) {
            return Err(Error::Config("need 0 < train.lr_min <= train.lr0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be non-negative".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be at least 1".into()));
        }
        self.augment.validate()
    }
}

/// Model and optimizer settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self { model: ModelConfig::default(), train: TrainConfig::default() },
            Profile::Desk => Self {
                model: ModelConfig { input_size: 56, widths: vec![8, 16, 32, 32], ..ModelConfig::default() },
                train: TrainConfig { epochs: 30, batch_size: 16, lr0: 2e-3, ..TrainConfig::default() },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// All settings as ordered `(key, value)` pairs.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let widths: Vec<String> = m.widths.iter().map(|w| w.to_string()).collect();
        vec![
            ("model.input_size", m.input_size.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.widths", widths.join(",")),
            ("model.head", m.head.to_string()),
            ("model.normalize_targets", m.normalize_targets.to_string()),
            ("loss.photometric_weight", m.photometric_weight.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr0", t.lr0.to_string()),
            ("train.lr_min", t.lr_min.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("augment.probability", t.augment.probability.to_string()),
            ("augment.seed", t.augment.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.input_size" => m.input_size = num(key, value)?,
            "model.channels" => m.channels = num(key, value)?,
            "model.widths" => m.widths = value.split(',').map(|w| num(key, w.trim())).collect::<Result<_>>()?,
            "model.head" => m.head = value.parse::<HeadKind>()?,
            "model.normalize_targets" => m.normalize_targets = num(key, value)?,
            "loss.photometric_weight" => m.photometric_weight = num(key, value)?,
            "train.epochs" => t.epochs = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.lr0" => t.lr0 = num(key, value)?,
            "train.lr_min" => t.lr_min = num(key, value)?,
            "train.weight_decay" => t.weight_decay = num(key, value)?,
            "train.beta1" => t.beta1 = num(key, value)?,
            "train.beta2" => t.beta2 = num(key, value)?,
            "train.seed" => t.seed = num(key, value)?,
            "train.eval_every" => t.eval_every = num(key, value)?,
            "augment.probability" => t.augment.probability = num(key, value)?,
            "augment.seed" => t.augment.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, i + 1, "expected `key = value`"))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        }
        self.validate()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Cosine annealing from `lr0` at epoch 0 to `lr_min` at the last epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.epochs <= 1 {
        return cfg.lr0;
    }
    let t = epoch as f64 / (cfg.epochs - 1) as f64;
    cfg.lr_min + (cfg.lr0 - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// Parameters plus AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub params: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub epoch: usize,
    pub batch: usize,
    pub best_val_mce: Option<f64>,
}

impl<T: Real> TrainState<T> {
    pub fn new(params: Vec<T>) -> Self {
        let n = params.len();
        Self { params, m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0, epoch: 0, batch: 0, best_val_mce: None }
    }
}

const ADAM_EPS: f64 = 1e-8;

/// One AdamW step with bias correction and decoupled weight decay:
/// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
pub fn optimizer_step<T: Real>(state: &mut TrainState<T>, grad: &[T], lr: f64, cfg: &TrainConfig) -> Result<()> {
    if grad.len() != state.params.len() {
        return Err(Error::ShapeMismatch(format!("{} gradients for {} parameters", grad.len(), state.params.len())));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { epoch: state.epoch, batch: state.batch });
    }
    state.step += 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powi(state.step as i32));
    let c2 = T::one() - T::lit(cfg.beta2.powi(state.step as i32));
    let (lr, wd, eps) = (T::lit(lr), T::lit(cfg.weight_decay), T::lit(ADAM_EPS));
    for i in 0..grad.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let p = state.params[i];
        state.params[i] = p - lr * (m_hat / (v_hat.sqrt() + eps) + wd * p);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mce: Option<f64>,
}

/// Run settings followed by one line per epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub metadata: Vec<(String, String)>,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

impl fmt::Display for History {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.metadata {
            writeln!(f, "# {k} = {v}")?;
        }
        for e in &self.epochs {
            let val = e.val_mce.map_or_else(|| "-".to_string(), |v| v.to_string());
            writeln!(f, "epoch = {}; lr = {}; train_loss = {}; val_mce = {val}", e.epoch, e.lr, e.train_loss)?;
        }
        Ok(())
    }
}

impl FromStr for History {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut h = History::default();
        for (i, line) in s.lines().enumerate() {
            let bad = |msg: &str| Error::parse("history", i + 1, msg);
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let (k, v) = meta.split_once('=').ok_or_else(|| bad("expected `# key = value`"))?;
                h.metadata.push((k.trim().to_string(), v.trim().to_string()));
                continue;
            }
            let fields = line
                .split(';')
                .map(|part| part.split_once('=').map(|(k, v)| (k.trim(), v.trim())))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("expected `key = value` fields"))?;
            let get = |k: &str| {
                fields.iter().find(|(key, _)| *key == k).map(|(_, v)| *v).ok_or_else(|| bad(&format!("missing `{k}`")))
            };
            let parse_f = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(&format!("bad `{k}`"))) };
            let val = get("val_mce")?;
            h.epochs.push(EpochRecord {
                epoch: get("epoch")?.parse().map_err(|_| bad("bad `epoch`"))?,
                lr: parse_f("lr")?,
                train_loss: parse_f("train_loss")?,
                val_mce: if val == "-" { None } else { Some(val.parse().map_err(|_| bad("bad `val_mce`"))?) },
            });
        }
        Ok(h)
    }
}

/// A sample converted to the network's input format.
#[derive(Debug, Clone)]
pub struct PreparedSample<T> {
    pub image: ImageBuffer<T>,
    pub label: DisplacementVector<T>,
    pub side: Side,
    /// Pixels carrying content rather than warp fill.
    pub mask: ValidityMask,
}

pub fn prepare_samples<T: Real>(model: &Model<T>, samples: &[Sample<T>]) -> Result<Vec<PreparedSample<T>>> {
    let s = model.config.input_size;
    samples
        .iter()
        .map(|smp| {
            let image = model.prepare(&smp.image);
            Ok(PreparedSample {
                mask: ValidityMask::from_zero_fill(&image),
                image,
                label: smp.record.label_at(s, s)?.cast(),
                side: smp.record.side,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters of the epoch with the lowest validation error (the final
    /// parameters when there is no validation split).
    pub best: ModelParams<T>,
    pub best_epoch: usize,
    pub last: ModelParams<T>,
    pub history: History,
}

/// Mean corner error of `model` over prepared samples.
pub fn mean_corner_error<T: Real>(model: &Model<T>, samples: &[PreparedSample<T>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut total = 0.0;
    for s in samples {
        total += mce(&model.predict(&s.image)?, &s.label).to_f64_lossy();
    }
    Ok(total / samples.len() as f64)
}

/// Trains from a seeded initialization. Per epoch: seeded shuffle,
/// per-sample augmentation, mini-batch gradient averaging in a fixed order,
/// one AdamW step per batch.
pub fn train<T: Real>(train: &[Sample<T>], val: &[Sample<T>], cfg: &RunConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit);
    }
    let model = Model::init(cfg.model.clone(), cfg.train.seed)?;
    let size = cfg.model.input_size;
    let records: Vec<_> = train.iter().map(|s| s.record.clone()).collect();
    let pool = build_pool(&records, size)?;
    let train_set = prepare_samples(&model, train)?;
    let val_set = prepare_samples(&model, val)?;
    train_prepared(model, &train_set, &val_set, &pool, cfg)
}

pub fn train_prepared<T: Real>(
    mut model: Model<T>,
    train_set: &[PreparedSample<T>],
    val_set: &[PreparedSample<T>],
    pool: &DisplacementPool,
    cfg: &RunConfig,
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() {
        return Err(Error::EmptySplit);
    }
    let tc = &cfg.train;
    let mut state = TrainState::new(model.params.values.clone());
    let mut history = History {
        metadata: cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        epochs: Vec::with_capacity(tc.epochs),
    };
    history.metadata.push(("data.train".into(), train_set.len().to_string()));
    history.metadata.push(("data.val".into(), val_set.len().to_string()));
    let mut best = (model.params.clone(), 0usize);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..tc.epochs {
        state.epoch = epoch;
        let lr = lr_at(epoch, tc);
        order.sort_unstable();
        order.shuffle(&mut rng_from(tc.seed, &[0x5417, epoch as u64]));
        let mut epoch_loss = 0.0;
        for (batch, chunk) in order.chunks(tc.batch_size).enumerate() {
            state.batch = batch;
            let mut grad = vec![T::zero(); state.params.len()];
            let mut batch_loss = T::zero();
            for &i in chunk {
                let s = &train_set[i];
                let a = augment_sample_masked(&s.image, &s.mask, &s.label, pool, &tc.augment, &mut tc.augment.rng_for(epoch, i))?;
                let side = if a.applied { a.label.inferred_side().unwrap_or(s.side) } else { s.side };
                let l = model.composite_loss(&a.image, &a.label, side)?;
                batch_loss += l.total;
                for (g, v) in grad.iter_mut().zip(&l.gradient) {
                    *g += *v;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            epoch_loss += batch_loss.to_f64_lossy();
            let inv = T::one() / T::lit(chunk.len() as f64);
            grad.iter_mut().for_each(|g| *g *= inv);
            optimizer_step(&mut state, &grad, lr, tc)?;
            model.params.values.clone_from(&state.params);
        }
        let validate = !val_set.is_empty() && (epoch % tc.eval_every == 0 || epoch + 1 == tc.epochs);
        let val_mce = if validate { Some(mean_corner_error(&model, val_set)?) } else { None };
        if let Some(v) = val_mce {
            if state.best_val_mce.is_none_or(|b| v < b) {
                state.best_val_mce = Some(v);
                best = (model.params.clone(), epoch);
            }
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        log::info!("epoch {epoch}: lr {lr:.3e} train_loss {train_loss:.5} val_mce {val_mce:?}");
        history.epochs.push(EpochRecord { epoch, lr, train_loss, val_mce });
    }
    if val_set.is_empty() {
        best = (model.params.clone(), tc.epochs - 1);
    }
    history.metadata.push(("best_epoch".into(), best.1.to_string()));
    Ok(TrainOutcome { best: best.0, best_epoch: best.1, last: model.params, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic_dataset, SyntheticDatasetConfig};

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert_eq!(lr_at(50, &cfg), 1e-6);
        assert!((lr_at(25, &cfg) - (1e-4 + 1e-6) / 2.0).abs() < 1e-18);
    }

    #[test]
    fn adamw_single_step() {
        let cfg = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
        let mut s = TrainState::new(vec![2.0f64]);
        optimizer_step(&mut s, &[1.0], 0.01, &cfg).unwrap();
        // m̂ = v̂ = 1 after bias correction.
        let expected = 2.0 - 0.01 * (1.0 / (1.0 + 1e-8) + 0.1 * 2.0);
        assert!((s.params[0] - expected).abs() < 1e-15);

        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut s = TrainState::new(vec![0.5f64, -1.0]);
        optimizer_step(&mut s, &[0.0, 0.0], 0.1, &cfg).unwrap();
        assert_eq!(s.params, vec![0.5, -1.0]);
        assert!(matches!(optimizer_step(&mut s, &[f64::NAN, 0.0], 0.1, &cfg), Err(Error::NonFiniteGradient { .. })));
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = RunConfig::profile(Profile::Desk);
        cfg.train.augment.probability = 0.0;
        let mut back = RunConfig::profile(Profile::Paper);
        back.apply_text(&cfg.to_text(), "cfg").unwrap();
        assert_eq!(back, cfg);
        assert!(back.apply_text("train.epochs = 0\n", "cfg").is_err());
        assert!(back.apply_text("nope = 1\n", "cfg").is_err());
    }

    fn tiny_run() -> (SyntheticDatasetConfig, RunConfig) {
        let data = SyntheticDatasetConfig::new(3, 16, 8, 2, 0);
        let mut cfg = RunConfig::profile(Profile::Desk);
        cfg.model.input_size = 16;
        cfg.model.widths = vec![4, 4];
        cfg.train.epochs = 2;
        cfg.train.batch_size = 4;
        (data, cfg)
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (data, mut cfg) = tiny_run();
        let splits = synthetic_dataset::<f64>(&data).unwrap();
        cfg.train.epochs = 1;
        cfg.train.batch_size = 8;
        cfg.train.lr0 = 1e-300;
        cfg.train.lr_min = 1e-300;
        cfg.train.weight_decay = 0.0;
        let out = train(&splits.train, &splits.val, &cfg).unwrap();
        let init = ModelParams::<f64>::init(&cfg.model, cfg.train.seed);
        let max_change = out.last.values.iter().zip(&init.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_change < 1e-290);
        assert_eq!(out.history.epochs.len(), 1);
    }

    #[test]
    fn runs_are_reproducible_and_record_settings() {
        let (data, cfg) = tiny_run();
        let splits = synthetic_dataset::<f64>(&data).unwrap();
        let a = train(&splits.train, &splits.val, &cfg).unwrap();
        let b = train(&splits.train, &splits.val, &cfg).unwrap();
        assert_eq!(a.last, b.last);
        assert_eq!(a.history, b.history);
        let parsed: History = a.history.to_string().parse().unwrap();
        assert_eq!(parsed.to_string(), a.history.to_string());

        let mut no_aug = cfg.clone();
        no_aug.train.augment.probability = 0.0;
        let c = train(&splits.train, &splits.val, &no_aug).unwrap();
        assert_eq!(c.history.meta("augment.probability"), Some("0"));
        assert_ne!(c.history.meta("augment.probability"), a.history.meta("augment.probability"));
    }
}
