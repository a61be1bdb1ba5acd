use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{EncoderKind, ExperimentConfig, Precision};
use super::data::{check_leakage, FeaturePipeline, LabelSet, Split};
use super::metrics::{EpochRecord, MetricsReport, RunSettings, SplitMetrics, TimingReport, REPORT_SCHEMA};
use super::{write_file, HarnessError};
use crate::corpus::{cap_per_class, read_manifest};
use crate::encoder::{EncoderSource, ToyEncoderConfig};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, LossConfig, Model, ModelDims};
use crate::neuralcore::{Adam, AdamConfig, Gradients, Mode, ParamStore, Real, Tape};

pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: MetricsReport,
    pub timing: TimingReport,
    pub checkpoint: PathBuf,
}

fn encoder_source(
    kind: EncoderKind,
    seed: u64,
    width: usize,
    dir: Option<&Path>,
) -> Result<EncoderSource, HarnessError> {
    Ok(match kind {
        EncoderKind::Toy => EncoderSource::toy(ToyEncoderConfig {
            seed,
            width,
            ..ToyEncoderConfig::default()
        })?,
        EncoderKind::Precomputed => EncoderSource::precomputed(
            dir.ok_or_else(|| HarnessError::Config("the precomputed encoder needs encoder_dir".into()))?,
            width,
        ),
    })
}

/// Trains one model as configured, keeping the parameters of the epoch
/// with the best validation accuracy (earliest on ties). Writes the
/// checkpoint, `report.json` and `timing.json` under `config.out`.
pub fn train(config: &ExperimentConfig) -> Result<TrainOutcome, HarnessError> {
    match config.precision {
        Precision::F32 => train_with::<f32>(config),
        Precision::F64 => train_with::<f64>(config),
    }
}

fn train_with<F: Real>(config: &ExperimentConfig) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    let started = Instant::now();
    let manifest = |p: &Option<PathBuf>| p.clone().expect("validated");
    let mut train = Split::read("train", &manifest(&config.train_manifest))?;
    if let Some(cap) = config.cap_per_class {
        train.records = cap_per_class(&train.records, cap, config.seed);
    }
    let val = Split::read("val", &manifest(&config.val_manifest))?;
    let test = config
        .test_manifest
        .as_ref()
        .map(|p| Split::read("test", p))
        .transpose()?;
    let mut all = vec![&train, &val];
    all.extend(test.as_ref());
    check_leakage(&all, config.speaker_disjoint())?;

    let labels = LabelSet::from_records(&train.records);
    if let Some(c) = config.classes {
        if c != labels.len() {
            return Err(HarnessError::ClassCount {
                expected: c,
                found: labels.len(),
            });
        }
    }
    for s in &all {
        labels.check(s)?;
    }

    let encoder = encoder_source(
        config.encoder,
        config.encoder_seed,
        config.width,
        config.encoder_dir.as_deref(),
    )?;
    let pipeline = FeaturePipeline::new(config.kind, encoder, config.clip_seconds)?;
    let mut dims = ModelDims::new(labels.len(), config.width);
    dims.hidden = config.hidden;
    dims.dropout = config.dropout;
    let (model, mut store) = Model::build::<F>(config.kind, dims, config.seed)?;
    let loss = LossConfig {
        lambda: config.lambda,
        mode: config.loss_mode,
    };
    let mut adam = Adam::<F>::new(AdamConfig {
        lr: config.lr,
        clip_norm: (config.clip_norm > 0.0).then_some(config.clip_norm),
        ..AdamConfig::default()
    });
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(2);

    let t0 = Instant::now();
    let initial = evaluate_split(&model, &store, &labels, &pipeline, &val)?;
    let mut epoch_s = vec![t0.elapsed().as_secs_f64()];
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        train_nll: None,
        train_center: None,
        train_accuracy: None,
        val_accuracy: initial.accuracy,
        val_nll: initial.mean_nll,
    }];
    log::info!("epoch 0: val accuracy {:.4}", initial.accuracy);
    let mut best = (0usize, initial.accuracy, store.clone());
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.records.len()).collect();

    for epoch in 1..=config.epochs {
        let t = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut sum_loss, mut sum_nll, mut sum_center, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let mut grads = Gradients::for_store(&store);
            let mut stats = Vec::new();
            let scale = F::lit(1.0 / batch.len() as f64);
            for &i in batch {
                let rec = &train.records[i];
                let label = labels.index(&rec.label).expect("checked");
                let feats = pipeline.load::<F>(rec, &train.dir)?;
                let mut tape = Tape::with_params(&store);
                let parts = model.total_loss(&mut tape, feats.input(), label, loss, Mode::Train, &mut dropout_rng)?;
                sum_loss += tape.value(parts.total).item().as_f64();
                sum_nll += tape.value(parts.nll).item().as_f64();
                sum_center += tape.value(parts.center).item().as_f64();
                if tape.value(parts.log_probs).argmax() == label {
                    correct += 1;
                }
                tape.backward_scaled(parts.total, scale)?;
                tape.collect_param_grads(&mut grads);
                stats.extend(parts.bn_stats);
            }
            adam.step(&mut store, &mut grads);
            model.update_running_stats(&mut store, &stats);
        }
        let n = train.records.len() as f64;
        let v = evaluate_split(&model, &store, &labels, &pipeline, &val)?;
        epoch_s.push(t.elapsed().as_secs_f64());
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}, val acc {:.4} nll {:.4}",
            sum_loss / n,
            correct as f64 / n,
            v.accuracy,
            v.mean_nll
        );
        epochs.push(EpochRecord {
            epoch,
            train_loss: Some(sum_loss / n),
            train_nll: Some(sum_nll / n),
            train_center: Some(sum_center / n),
            train_accuracy: Some(correct as f64 / n),
            val_accuracy: v.accuracy,
            val_nll: v.mean_nll,
        });
        if v.accuracy > best.1 {
            best = (epoch, v.accuracy, store.clone());
        }
        if config.target_val_accuracy.is_some_and(|t| v.accuracy >= t) {
            stopped_early = epoch < config.epochs;
            break;
        }
    }

    let t = Instant::now();
    let (best_epoch, _, best_store) = best;
    let mut splits = BTreeMap::new();
    splits.insert("val".to_string(), evaluate_split(&model, &best_store, &labels, &pipeline, &val)?);
    if let Some(test) = &test {
        splits.insert("test".to_string(), evaluate_split(&model, &best_store, &labels, &pipeline, test)?);
    }
    let final_eval_s = t.elapsed().as_secs_f64();

    let mut extra = vec![
        ("dataset".to_string(), config.dataset.clone()),
        ("task".to_string(), config.task.to_string()),
        ("encoder".to_string(), config.encoder.to_string()),
        ("encoder_seed".to_string(), config.encoder_seed.to_string()),
        ("clip_seconds".to_string(), config.clip_seconds.to_string()),
        ("precision".to_string(), config.precision.to_string()),
        ("best_epoch".to_string(), best_epoch.to_string()),
    ];
    if let Some(d) = &config.encoder_dir {
        extra.push(("encoder_dir".to_string(), d.display().to_string()));
    }
    let meta = CheckpointMeta {
        kind: model.kind,
        dims: model.dims.clone(),
        loss,
        seed: config.seed,
        labels: labels.names().to_vec(),
        extra,
    };
    let checkpoint = config.out.join(CHECKPOINT_DIR);
    save_checkpoint(&checkpoint, &meta, &best_store)?;

    let report = MetricsReport {
        schema: REPORT_SCHEMA.to_string(),
        dataset: config.dataset.clone(),
        kind: config.kind,
        run: Some(RunSettings {
            task: config.task.to_string(),
            encoder: config.encoder.to_string(),
            encoder_seed: config.encoder_seed,
            width: config.width,
            hidden: config.hidden,
            lambda: config.lambda,
            loss_mode: config.loss_mode.to_string(),
            lr: config.lr,
            clip_norm: config.clip_norm,
            dropout: config.dropout,
            epochs: config.epochs,
            batch_size: config.batch_size,
            seed: config.seed,
            clip_seconds: config.clip_seconds,
            cap_per_class: config.cap_per_class,
            target_val_accuracy: config.target_val_accuracy,
            speaker_disjoint: config.speaker_disjoint(),
            precision: config.precision.to_string(),
        }),
        labels: labels.names().to_vec(),
        params: model.param_report(&best_store),
        epochs,
        best_epoch: Some(best_epoch),
        stopped_early,
        splits,
        workers: config.workers,
    };
    write_file(&config.out.join(REPORT_FILE), report.to_json().as_bytes())?;
    let timing = TimingReport {
        total_s: started.elapsed().as_secs_f64(),
        epoch_s,
        final_eval_s,
        workers: config.workers,
    };
    let mut timing_json = serde_json::to_string_pretty(&timing)?;
    timing_json.push('\n');
    write_file(&config.out.join(TIMING_FILE), timing_json.as_bytes())?;
    Ok(TrainOutcome {
        report,
        timing,
        checkpoint,
    })
}

/// Eval-mode predictions (no dropout, running batch-norm statistics) for
/// every clip of `split`.
pub fn evaluate_split<F: Real>(
    model: &Model,
    store: &ParamStore<F>,
    labels: &LabelSet,
    pipeline: &FeaturePipeline,
    split: &Split,
) -> Result<SplitMetrics, HarnessError> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut outcomes = Vec::with_capacity(split.records.len());
    for rec in &split.records {
        let label = labels.index(&rec.label).ok_or_else(|| HarnessError::UnknownLabel {
            label: rec.label.clone(),
            split: split.name.clone(),
        })?;
        let feats = pipeline.load::<F>(rec, &split.dir)?;
        let mut tape = Tape::with_params(store);
        let (r, _) = model.embed(&mut tape, feats.input(), Mode::Eval, None)?;
        let lp = model.classify(&mut tape, r, Mode::Eval, &mut unused, None)?;
        let lp = tape.value(lp);
        outcomes.push((label, lp.argmax(), -lp.data()[label].as_f64()));
    }
    Ok(SplitMetrics::from_outcomes(labels.len(), &outcomes))
}

/// Scores a saved checkpoint on a manifest. `encoder_dir` overrides the
/// embedding directory recorded in the checkpoint.
pub fn evaluate(ckpt: &Path, manifest: &Path, encoder_dir: Option<&Path>) -> Result<MetricsReport, HarnessError> {
    let text = std::fs::read_to_string(ckpt.join(crate::model::CHECKPOINT_META)).map_err(|source| {
        HarnessError::Io {
            path: ckpt.to_path_buf(),
            source,
        }
    })?;
    let meta = CheckpointMeta::from_text(&text)?;
    match meta.extra("precision") {
        Some("f64") => evaluate_with::<f64>(ckpt, manifest, encoder_dir),
        _ => evaluate_with::<f32>(ckpt, manifest, encoder_dir),
    }
}

fn evaluate_with<F: Real>(ckpt: &Path, manifest: &Path, encoder_dir: Option<&Path>) -> Result<MetricsReport, HarnessError> {
    let (model, store, meta) = load_checkpoint::<F>(ckpt)?;
    let parse = |key: &str, default: &str| meta.extra(key).unwrap_or(default).to_string();
    let encoder: EncoderKind = parse("encoder", "toy")
        .parse()
        .map_err(|e| HarnessError::Incompatible(format!("encoder: {e}")))?;
    let encoder_seed: u64 = parse("encoder_seed", "0")
        .parse()
        .map_err(|_| HarnessError::Incompatible("encoder_seed".into()))?;
    let clip_seconds: f64 = parse("clip_seconds", "8")
        .parse()
        .map_err(|_| HarnessError::Incompatible("clip_seconds".into()))?;
    let recorded_dir = meta.extra("encoder_dir").map(PathBuf::from);
    let dir = encoder_dir.map(Path::to_path_buf).or(recorded_dir);
    let source = encoder_source(encoder, encoder_seed, model.dims.width, dir.as_deref())?;
    let pipeline = FeaturePipeline::new(model.kind, source, clip_seconds)?;
    let labels = LabelSet::from_names(meta.labels.clone());
    let records = read_manifest(manifest)?;
    if records.is_empty() {
        return Err(HarnessError::EmptySplit("eval".into()));
    }
    let split = Split {
        name: "eval".into(),
        records,
        dir: manifest.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    labels.check(&split)?;
    let metrics = evaluate_split(&model, &store, &labels, &pipeline, &split)?;
    let mut splits = BTreeMap::new();
    splits.insert("eval".to_string(), metrics);
    Ok(MetricsReport {
        schema: REPORT_SCHEMA.to_string(),
        dataset: parse("dataset", "eval"),
        kind: model.kind,
        run: None,
        labels: labels.names().to_vec(),
        params: model.param_report(&store),
        epochs: Vec::new(),
        best_epoch: None,
        stopped_early: false,
        splits,
        workers: 1,
    })
}
