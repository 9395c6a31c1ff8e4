use std::path::{Path, PathBuf};

use planerect::augment::{augment_sample_masked, build_pool, AugmentConfig};
use planerect::dataset::{
    compute_stats, generate_synthetic, image_path, load_dataset, load_manifest, load_samples, write_manifest_atomic,
    write_synthetic_dataset, AnnotationRecord, SplitName, SyntheticDatasetConfig, SyntheticSceneSpec,
};
use planerect::eval::{emit_report, evaluate_model, evaluate_predictions, measure_latency, zero_baseline, EvalResult, PredictionFile};
use planerect::model::{read_checkpoint, save_checkpoint, Model};
use planerect::train::{train as run_training, RunConfig};
use planerect::warp::warp_image;
use planerect::{
    displacement_to_homography, homography_to_displacement, rescale_homography, Homography, Image64, ImageBuffer, Real,
    ScaleTransform, ValidityMask,
};

use crate::{
    AugmentPreviewArgs, BenchArgs, CliError, CliResult, ConvertArgs, EvalArgs, Precision, RectifyArgs, ServeArgs, StatsArgs,
    SynthArgs, TrainArgs,
};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn convert(a: ConvertArgs) -> CliResult {
    let w = a.width.unwrap_or(a.size) as f64;
    let h = a.height.unwrap_or(a.size) as f64;
    if let Some(d) = a.d {
        let m = displacement_to_homography(&d, w, h)?;
        for row in m.matrix() {
            println!("{} {} {}", row[0], row[1], row[2]);
        }
    } else if let Some(m) = a.matrix {
        let r = homography_to_displacement(&m, w, h)?;
        println!("d = {}", r.d);
        println!("lossy = {}", r.lossy);
    }
    Ok(())
}

pub fn rectify(a: RectifyArgs) -> CliResult {
    let img = Image64::load_png(&a.image)?;
    let (w, h) = (img.width(), img.height());
    let homography: Homography<f64> = if let Some(d) = a.d {
        displacement_to_homography(&d, w as f64, h as f64)?
    } else if let Some(manifest) = &a.manifest {
        let id = a.image.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let record = load_manifest(manifest)?
            .into_iter()
            .find(|r| r.image_id == id)
            .ok_or_else(|| usage(format!("no record for `{id}` in {}", manifest.display())))?;
        displacement_to_homography(&record.label_at(w, h)?, w as f64, h as f64)?
    } else if let Some(ckpt) = &a.checkpoint {
        let model = load_model::<f64>(ckpt)?;
        let s = model.config.input_size as f64;
        let d = model.predict(&model.prepare(&img))?;
        let at_input = displacement_to_homography(&d, s, s)?;
        rescale_homography(&at_input, &ScaleTransform::between(s, s, w as f64, h as f64)?)?
    } else {
        unreachable!("clap requires one displacement source");
    };
    let (out, mask) = warp_image(&img, &homography, w, h)?;
    out.save_png(&a.out)?;
    println!("d = {}", homography_to_displacement(&homography, w as f64, h as f64)?.d);
    println!("valid_pixels = {} / {}", mask.count(), w * h);
    Ok(())
}

pub fn synth(a: SynthArgs) -> CliResult {
    if a.count == 0 {
        return Err(usage("--count must be positive"));
    }
    let held_out = a.count / 10;
    let cfg = SyntheticDatasetConfig::new(a.seed, a.size, a.count - 2 * held_out, held_out, held_out);
    let ds = write_synthetic_dataset(&a.out, &cfg)?;
    for name in SplitName::ALL {
        println!("{} = {}", name.as_str(), ds.split(name).len());
    }
    Ok(())
}

pub fn stats(a: StatsArgs) -> CliResult {
    let records = match (&a.manifest, &a.data) {
        (Some(m), _) => load_manifest(m)?,
        (None, Some(dir)) => load_manifest(&dir.join(a.split.manifest_name()))?,
        (None, None) => unreachable!("clap requires an input"),
    };
    print!("{}", compute_stats(&records)?);
    Ok(())
}

pub fn augment_preview(a: AugmentPreviewArgs) -> CliResult {
    let ds = load_dataset(&a.data)?;
    let record = SplitName::ALL
        .into_iter()
        .flat_map(|n| ds.split(n).records.iter())
        .find(|r| r.image_id == a.id)
        .ok_or_else(|| usage(format!("no image `{}` in {}", a.id, a.data.display())))?;
    let img = Image64::load_png(image_path(&a.data, &a.id))?.resize(a.size, a.size);
    let label = record.label_at(a.size, a.size)?;
    let pool = build_pool(&ds.train.records, a.size)?;
    let cfg = AugmentConfig::new(1.0, a.seed)?;
    let mask = ValidityMask::from_zero_fill(&img);
    std::fs::create_dir_all(&a.out)?;
    let mut records = Vec::with_capacity(a.count);
    for k in 0..a.count {
        let aug = augment_sample_masked(&img, &mask, &label, &pool, &cfg, &mut cfg.rng_for(0, k))?;
        let id = format!("{}_aug{k:03}", a.id);
        aug.image.save_png(image_path(&a.out, &id))?;
        let side = aug.label.inferred_side().unwrap_or(record.side);
        records.push(AnnotationRecord::new(id, a.size, a.size, side, aug.label)?);
    }
    let manifest = a.out.join("augmented.txt");
    write_manifest_atomic(&manifest, &records)?;
    println!("variants = {}", records.len());
    println!("manifest = {}", manifest.display());
    Ok(())
}

fn run_config(a: &TrainArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::profile(a.profile);
    if let Some(path) = &a.config {
        cfg.apply_text(&std::fs::read_to_string(path)?, &path.display().to_string())?;
    }
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr0 = v;
    }
    if let Some(v) = a.lr_min {
        t.lr_min = v;
    }
    if let Some(v) = a.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.augment_p {
        t.augment.probability = v;
    }
    let m = &mut cfg.model;
    if let Some(v) = a.photometric_weight {
        m.photometric_weight = v;
    }
    if let Some(v) = a.input_size {
        m.input_size = v;
    }
    if let Some(v) = a.head {
        m.head = v;
    }
    if a.no_normalize {
        m.normalize_targets = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> CliResult {
    let cfg = run_config(&a)?;
    match a.precision {
        Precision::F32 => train_with::<f32>(&a, &cfg),
        Precision::F64 => train_with::<f64>(&a, &cfg),
    }
}

fn train_with<T: Real>(a: &TrainArgs, cfg: &RunConfig) -> CliResult {
    let ds = load_dataset(&a.data)?;
    let train_set = load_samples::<T>(&a.data, &ds.train)?;
    let val_set = load_samples::<T>(&a.data, &ds.val)?;
    log::info!("training on {} images, validating on {}", train_set.len(), val_set.len());
    let outcome = run_training(&train_set, &val_set, cfg)?;
    save_checkpoint(&a.out, &outcome.best)?;
    let history = a.history.clone().unwrap_or_else(|| with_suffix(&a.out, ".history.txt"));
    std::fs::write(&history, outcome.history.to_string())?;
    println!("best_epoch = {}", outcome.best_epoch);
    if let Some(v) = outcome.history.epochs.get(outcome.best_epoch).and_then(|e| e.val_mce) {
        println!("best_val_mce = {v}");
    }
    println!("checkpoint = {}", a.out.display());
    println!("history = {}", history.display());
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_model<T: Real>(path: &Path) -> CliResult<Model<T>> {
    let (cfg, params) = read_checkpoint::<T>(path)?;
    Ok(Model::new(cfg, params)?)
}

pub fn eval(a: EvalArgs) -> CliResult {
    let ds = load_dataset(&a.data)?;
    let split = ds.split(a.split);
    let model = a.checkpoint.as_deref().map(load_model::<f64>).transpose()?;
    let working = match (&model, a.working_size) {
        (Some(m), Some(s)) if s != m.config.input_size => {
            return Err(usage(format!("--working-size {s} differs from the checkpoint input size {}", m.config.input_size)))
        }
        (Some(m), _) => m.config.input_size,
        (None, s) => s.unwrap_or(224),
    };
    let mut rows: Vec<(String, EvalResult)> = Vec::new();
    if let Some(model) = &model {
        let samples = load_samples::<f64>(&a.data, split)?;
        rows.push((a.name.clone().unwrap_or_else(|| "model".into()), evaluate_model(model, &samples, a.threshold)?));
    }
    if let Some(path) = &a.predictions {
        let file = PredictionFile::load(path)?;
        let name = a.name.clone().unwrap_or_else(|| path.file_stem().map_or("predictions".into(), |s| s.to_string_lossy().into_owned()));
        rows.push((name, evaluate_predictions(&file, &split.records, working, a.threshold)?));
    }
    if a.baseline {
        rows.push(("zero displacement".into(), zero_baseline(&split.records, working)?));
    }
    let table: Vec<(&str, &EvalResult)> = rows.iter().map(|(n, r)| (n.as_str(), r)).collect();
    print!("{}", emit_report(&table)?);
    for (name, r) in &rows {
        if r.excluded > 0 {
            println!("# {name}: {} of {} images excluded", r.excluded, r.per_image.len());
        }
        if a.per_image {
            for e in &r.per_image {
                println!("{name}\t{}\t{}\t{}", e.image_id, e.mce, if e.included { "included" } else { "excluded" });
            }
        }
    }
    Ok(())
}

pub fn bench(a: BenchArgs) -> CliResult {
    match a.precision {
        Precision::F32 => bench_with::<f32>(&a),
        Precision::F64 => bench_with::<f64>(&a),
    }
}

fn bench_with<T: Real>(a: &BenchArgs) -> CliResult {
    if a.iterations == 0 {
        return Err(usage("--iterations must be positive"));
    }
    let model = load_model::<T>(&a.checkpoint)?;
    let s = model.config.input_size;
    let img: ImageBuffer<T> = match &a.image {
        Some(p) => ImageBuffer::load_png(p)?,
        None => generate_synthetic(&SyntheticSceneSpec::new(0, s))?.image,
    };
    let input = model.prepare(&img);
    let stats = measure_latency(&model, &input, a.warmup, a.iterations)?;
    println!("input = {s}x{s}");
    println!("warmup = {}", a.warmup);
    println!("iterations = {}", stats.samples);
    println!("mean_ms = {:.4}", stats.mean_ms);
    println!("median_ms = {:.4}", stats.median_ms);
    Ok(())
}

pub fn serve(a: ServeArgs) -> CliResult {
    let cfg = planerect_service::ServiceConfig {
        images: a.images,
        store: a.store,
        checkpoint: a.checkpoint,
        working_size: a.working_size,
    };
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(planerect_service::serve(&cfg, (a.host, a.port).into()))?;
    Ok(())
}
