//! Acceptance suite: runs every criterion and prints one PASS/FAIL line per
//! criterion. Exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use mewehv::corpus::{
    compute_stats, detect_silences, segment_clips, speech_regions, split_by_key, AudioClip,
    ClipRecord, Gender, SegmentationConfig, SplitSpec,
};
use mewehv::encoder::{read_embedding_file, write_embedding_file, EncoderSource, ToyEncoderConfig};
use mewehv::features::{inverse_dct, Mfcc, MfccConfig};
use mewehv::harness::{make_toy_fusion_dataset, train, ExperimentConfig, FeaturePipeline, Task};
use mewehv::model::{
    nll_loss, ConvSpec, LossConfig, LossMode, Model, ModelDims, ModelError, ModelInput, ModelKind, ShapeTrace,
};
use mewehv::neuralcore::{
    param_gradient_check, param_gradient_check_where, Adam, AdamConfig, BatchNorm1d, Conv1d, Gradients, Linear,
    Lstm, Mode, NnError, ParamStore, SoftAttention, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn nn(e: ModelError) -> NnError {
    match e {
        ModelError::Nn(n) => n,
        other => NnError::InvalidArgument(other.to_string()),
    }
}

fn project(tape: &mut Tape<'_, f64>, out: Var, weights: &Tensor<f64>) -> Result<Var, NnError> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn shape_chain() -> Outcome {
    let (model, store) = Model::build::<f32>(ModelKind::MeWEHV, ModelDims::new(6, 1024), 0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mfcc = Tensor::<f32>::from_fn(&[128, 641], |_| rng.random_range(-1.0..1.0));
    let wave = Tensor::<f32>::from_fn(&[399, 1024], |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::with_params(&store);
    let mut trace = ShapeTrace::default();
    let input = ModelInput { mfcc: Some(&mfcc), wave: Some(&wave) };
    let (r, _) = model.embed(&mut tape, input, Mode::Eval, Some(&mut trace)).map_err(|e| e.to_string())?;
    model.classify(&mut tape, r, Mode::Eval, &mut rng, Some(&mut trace)).map_err(|e| e.to_string())?;
    // the rows with parameters, in table order
    let want: [(&str, &str, &[usize], &[usize]); 12] = [
        ("B1", "Conv1d", &[128, 641], &[128, 319]),
        ("B1", "BatchNorm1d", &[128, 319], &[128, 319]),
        ("B1", "Conv1d", &[128, 319], &[128, 316]),
        ("B1", "BatchNorm1d", &[128, 316], &[128, 316]),
        ("B1", "Conv1d", &[128, 316], &[128, 313]),
        ("B1", "BatchNorm1d", &[128, 313], &[128, 313]),
        ("L1", "LSTM", &[313, 128], &[313, 128]),
        ("A1", "SoftAttention", &[313, 128], &[128]),
        ("L2", "LSTM", &[399, 1024], &[399, 128]),
        ("A2", "SoftAttention", &[399, 128], &[128]),
        ("D", "Linear", &[256], &[256]),
        ("D", "Linear", &[256], &[6]),
    ];
    let got: Vec<_> = trace
        .rows
        .iter()
        .filter(|t| !matches!(t.layer, "ReLU" | "Dropout" | "LogSoftmax"))
        .collect();
    ensure!(got.len() == 12, "{} parameterized rows traced", got.len());
    for (g, w) in got.iter().zip(&want) {
        ensure!(
            (g.block, g.layer, g.input.as_slice(), g.output.as_slice()) == *w,
            "row {} {}: {:?} -> {:?}, want {:?} -> {:?}",
            g.block,
            g.layer,
            g.input,
            g.output,
            w.2,
            w.3
        );
    }
    Ok("12 of 12 rows match".into())
}

fn parameter_counts() -> Outcome {
    let (model, store) = Model::build::<f32>(ModelKind::MeWEHV, ModelDims::new(6, 1024), 0).map_err(|e| e.to_string())?;
    let report = model.param_report(&store);
    let counts: Vec<usize> = report.rows.iter().map(|r| r.count).collect();
    let want = [82048, 256, 65664, 256, 65664, 256, 132096, 16512, 590848, 16512, 65536, 1536];
    ensure!(counts == want, "per-layer counts {counts:?}");
    ensure!(report.total == 1_038_982, "total {}", report.total);
    ensure!(store.trainable_count() == report.total, "store holds {}", store.trainable_count());
    Ok(format!("12 layer counts, total {}", report.total))
}

fn gradients() -> Outcome {
    const STEP: f64 = 1e-5;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, err: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(err);
    };
    let check = |name: &str, r: Result<mewehv::neuralcore::ParamCheck, NnError>| {
        r.map(|c| c.max_relative_error).map_err(|e| format!("{name}: {e}"))
    };
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut s = ParamStore::new();
        let conv = Conv1d::new(&mut s, "conv", 3, 4, 3, 2, &mut rng).map_err(|e| e.to_string())?;
        *s.value_mut(conv.bias) = random(&[4], &mut rng);
        let x = s.add("x", random(&[3, 11], &mut rng), true).unwrap();
        let p = random(&[4, 5], &mut rng);
        note("conv1d", check("conv1d", param_gradient_check(&s, |t| {
            let xv = t.param(x)?;
            let y = conv.forward(t, xv)?;
            project(t, y, &p)
        }, STEP))?);

        let mut s = ParamStore::new();
        let bn = BatchNorm1d::new(&mut s, "bn", 3).map_err(|e| e.to_string())?;
        *s.value_mut(bn.gamma) = random(&[3], &mut rng);
        *s.value_mut(bn.beta) = random(&[3], &mut rng);
        let x = s.add("x", random(&[3, 6], &mut rng), true).unwrap();
        let p = random(&[3, 6], &mut rng);
        note("batchnorm", check("batchnorm", param_gradient_check(&s, |t| {
            let xv = t.param(x)?;
            let (y, _) = bn.forward(t, xv, Mode::Train)?;
            project(t, y, &p)
        }, STEP))?);

        let mut s = ParamStore::new();
        let lstm = Lstm::new(&mut s, "lstm", 4, 3, &mut rng).map_err(|e| e.to_string())?;
        *s.value_mut(lstm.b_ih) = random(&[12], &mut rng);
        let x = s.add("x", random(&[3, 4], &mut rng), true).unwrap();
        let p = random(&[3, 3], &mut rng);
        note("lstm", check("lstm", param_gradient_check(&s, |t| {
            let xv = t.param(x)?;
            let h = lstm.forward(t, xv)?;
            project(t, h, &p)
        }, STEP))?);

        let mut s = ParamStore::new();
        let att = SoftAttention::new(&mut s, "att", 4, &mut rng).map_err(|e| e.to_string())?;
        let h = s.add("h", random(&[5, 4], &mut rng), true).unwrap();
        let p = random(&[4], &mut rng);
        note("attention", check("attention", param_gradient_check(&s, |t| {
            let hv = t.param(h)?;
            let (pooled, _) = att.forward(t, hv)?;
            project(t, pooled, &p)
        }, STEP))?);

        let mut s = ParamStore::new();
        let lin = Linear::new(&mut s, "lin", 5, 3, &mut rng).map_err(|e| e.to_string())?;
        *s.value_mut(lin.bias) = random(&[3], &mut rng);
        let x = s.add("x", random(&[5], &mut rng), true).unwrap();
        let p = random(&[3], &mut rng);
        note("linear", check("linear", param_gradient_check(&s, |t| {
            let xv = t.param(x)?;
            let y = lin.forward(t, xv)?;
            project(t, y, &p)
        }, STEP))?);

        let (model, mut s) = Model::build::<f64>(ModelKind::MeWEHV, tiny_dims(), seed).map_err(|e| e.to_string())?;
        *s.value_mut(model.centers) = random(&[3, 6], &mut rng);
        let r = s.add("probe.r", random(&[6], &mut rng), true).unwrap();
        let label = seed as usize % 3;
        let only = |n: &str| n == "centers" || n == "probe.r";
        note("center loss", check("center loss", param_gradient_check_where(&s, |t| {
            let rv = t.param(r)?;
            model.center_loss(t, rv, label).map_err(nn)
        }, STEP, only))?);

        let mut s = ParamStore::new();
        let z = s.add("z", random(&[5], &mut rng).map(|v| 3.0 * v), true).unwrap();
        note("nll", check("nll", param_gradient_check(&s, |t| {
            let zv = t.param(z)?;
            let lp = t.log_softmax(zv)?;
            nll_loss(t, lp, label).map_err(nn)
        }, STEP))?);

        note("end-to-end", end_to_end_error(seed)?);
    }
    for (name, err) in &worst {
        let tol = if *name == "end-to-end" { 1e-3 } else { 1e-4 };
        ensure!(*err < tol, "{name}: max relative error {err:.2e} (limit {tol:.0e})");
    }
    Ok(worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", "))
}

fn tiny_dims() -> ModelDims {
    ModelDims {
        classes: 3,
        width: 4,
        n_mfcc: 3,
        convs: vec![
            ConvSpec { kernel: 5, stride: 2 },
            ConvSpec { kernel: 4, stride: 1 },
            ConvSpec { kernel: 4, stride: 1 },
        ],
        hidden: 3,
        dropout: 0.2,
    }
}

fn end_to_end_error(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let (model, mut store) = Model::build::<f64>(ModelKind::MeWEHV, tiny_dims(), seed).map_err(|e| e.to_string())?;
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let gamma = store.get(id).name.ends_with("gamma");
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::from_fn(&shape, |_| {
            if gamma { 1.0 + 0.5 * rng.random_range(-1.0..1.0) } else { 0.3 * rng.random_range(-1.0..1.0) }
        });
    }
    let mfcc = random(&[3, 22], &mut rng);
    let wave = random(&[4, 4], &mut rng);
    let label = seed as usize % 3;
    let loss = LossConfig { lambda: 0.5, mode: LossMode::Joint };
    let f = |tape: &mut Tape<'_, f64>| {
        let input = ModelInput { mfcc: Some(&mfcc), wave: Some(&wave) };
        let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(model.total_loss(tape, input, label, loss, Mode::Train, &mut drop_rng).map_err(nn)?.total)
    };
    // conv biases ahead of train-mode batch norm have an exactly zero
    // gradient; they are compared against zero instead
    let pre_bn = |n: &str| n.starts_with("b1.conv") && n.ends_with(".bias");
    let report = param_gradient_check_where(&store, f, 1e-5, |n| !pre_bn(n)).map_err(|e| e.to_string())?;
    let mut tape = Tape::with_params(&store);
    let total = f(&mut tape).map_err(|e| e.to_string())?;
    tape.backward(total).map_err(|e| e.to_string())?;
    let mut g = Gradients::for_store(&store);
    tape.collect_param_grads(&mut g);
    for (id, p) in store.iter().filter(|(_, p)| pre_bn(&p.name)) {
        let max = g.get(id).map_or(0.0, |t| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
        if max > 1e-12 {
            return Err(format!("{} gradient {max:e} should vanish", p.name));
        }
    }
    Ok(report.max_relative_error)
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_att, mut worst_lsm) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let dim = rng.random_range(1..16);
        let steps = rng.random_range(1..40);
        let mut s = ParamStore::<f64>::new();
        let att = SoftAttention::new(&mut s, "a", dim, &mut rng).map_err(|e| e.to_string())?;
        let scale = rng.random_range(0.1..20.0);
        let h = Tensor::from_fn(&[steps, dim], |_| scale * rng.random_range(-1.0..1.0));
        let mut tape = Tape::with_params(&s);
        let hv = tape.constant(h);
        let (_, w) = att.forward(&mut tape, hv).map_err(|e| e.to_string())?;
        worst_att = worst_att.max((tape.value(w).sum() - 1.0).abs());

        let n = rng.random_range(2..20);
        let z = tape.constant(Tensor::from_fn(&[n], |_| scale * 10.0 * rng.random_range(-1.0..1.0)));
        let lp = tape.log_softmax(z).map_err(|e| e.to_string())?;
        let sum: f64 = tape.value(lp).data().iter().map(|v| v.exp()).sum();
        worst_lsm = worst_lsm.max((sum - 1.0).abs());
    }
    ensure!(worst_att <= 1e-6, "attention weights off by {worst_att:e}");
    ensure!(worst_lsm <= 1e-6, "exp(log-softmax) off by {worst_lsm:e}");
    Ok(format!("1000 inputs each; worst deviations {worst_att:.1e}, {worst_lsm:.1e}"))
}

fn mfcc_conformance() -> Outcome {
    let cfg = MfccConfig::default();
    let mfcc = Mfcc::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let signal: Vec<f64> = (0..128_000).map(|_| rng.random_range(-0.5..0.5)).collect();
    let m = mfcc.compute_unit(&signal).map_err(|e| e.to_string())?;
    ensure!(m.shape() == [128, 641], "8-second clip gives {:?}", m.shape());
    let log_mel = mfcc.log_mel_unit(&signal).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for t in 0..m.n_frames {
        let back = inverse_dct(&m.column(t));
        let row = &log_mel[t * 128..(t + 1) * 128];
        let scale = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (b, l) in back.iter().zip(row) {
            worst = worst.max((b - l).abs() / scale);
        }
    }
    ensure!(worst < 1e-6, "inverse DCT relative error {worst:e}");
    for _ in 0..100 {
        let n = rng.random_range(1..40_000);
        let sig: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let frames = mfcc.compute_unit(&sig).map_err(|e| e.to_string())?.n_frames;
        ensure!(frames == 1 + n / cfg.hop_samples, "{n} samples gave {frames} frames");
    }
    Ok(format!("[128, 641]; round trip {worst:.1e}; 100 lengths"))
}

fn corpus_pipeline() -> Outcome {
    let cfg = SegmentationConfig::default();
    let sr = 16_000usize;
    let (mut kept_total, mut rejected_total) = (0, 0);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Vec::new();
        let mut planted = Vec::new();
        for _ in 0..rng.random_range(2..6) {
            s.extend(std::iter::repeat_n(0i16, rng.random_range(50..200) * 160));
            let len = rng.random_range(150..1_300) * 160;
            let start = s.len();
            s.extend((0..len).map(|i| (8000.0 * (i as f64 * 0.21).sin() + rng.random_range(-2000.0..2000.0)) as i16));
            planted.push(start..start + len);
        }
        s.extend(std::iter::repeat_n(0i16, sr));
        let clip = AudioClip::new(s).map_err(|e| e.to_string())?;
        let silences = detect_silences(&clip, &cfg).map_err(|e| e.to_string())?;
        let kept = speech_regions(clip.len(), &silences, &cfg);
        let want: Vec<_> = planted
            .iter()
            .filter(|r| (3.5..=12.0).contains(&(r.len() as f64 / sr as f64)))
            .cloned()
            .collect();
        ensure!(kept == want, "seed {seed}: segmented {kept:?}, planted {want:?}");
        let clips = segment_clips(&clip, &silences, &cfg);
        ensure!(clips.iter().all(|c| (3.5..=12.0).contains(&c.duration_s())), "clip length out of bounds");
        kept_total += kept.len();
        rejected_total += planted.len() - kept.len();
    }
    ensure!(rejected_total > 0, "no out-of-bounds region was planted");

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for m in 0..100 {
        let speakers = rng.random_range(3..40);
        let mut records = Vec::new();
        for s in 0..speakers {
            for c in 0..rng.random_range(1..6) {
                records.push(mock_record(&format!("m{m}s{s}c{c}"), &format!("s{s}"), s % 3, 5.0));
            }
        }
        let spec = SplitSpec::new([0.7, 0.15, 0.15], "speaker_id", m);
        let parts = split_by_key(&records, &spec).map_err(|e| e.to_string())?;
        let sets: Vec<BTreeSet<&str>> = [&parts.train, &parts.validation, &parts.test]
            .iter()
            .map(|p| p.iter().map(|r| r.speaker_id.as_str()).collect())
            .collect();
        ensure!(sets.iter().all(|s| !s.is_empty()), "manifest {m}: empty split");
        ensure!(
            sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2]),
            "manifest {m}: speaker shared between splits"
        );
        ensure!(
            parts.train.len() + parts.validation.len() + parts.test.len() == records.len(),
            "manifest {m}: clips lost"
        );
    }

    let mut mock = Vec::new();
    for s in 0..204 {
        for c in 0..(if s < 23 { 97 } else { 96 }) {
            mock.push(mock_record(&format!("s{s}_{c}"), &format!("s{s}"), s % 4, 8.0));
        }
    }
    let stats = compute_stats(&mock).map_err(|e| e.to_string())?;
    let avg = format!("{:.2}", stats.avg_clips_per_speaker);
    ensure!(stats.n_clips == 19_607 && stats.n_speakers == 204 && avg == "96.11", "stats {avg}");
    Ok(format!("{kept_total} planted clips recovered, {rejected_total} rejected; 100 splits disjoint; 19607/204 = {avg}"))
}

fn mock_record(id: &str, speaker: &str, label: usize, duration_s: f64) -> ClipRecord {
    ClipRecord {
        clip_id: id.into(),
        path: format!("{id}.wav"),
        speaker_id: speaker.into(),
        video_id: format!("{speaker}_v"),
        gender: Gender::Female,
        label: format!("l{label}"),
        duration_s,
    }
}

fn frozen_encoder() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let signal: Vec<f64> = (0..16_000).map(|i| 0.3 * (i as f64 * 0.05).sin() + rng.random_range(-0.1..0.1)).collect();
    let clip = AudioClip::from_unit(&signal).map_err(|e| e.to_string())?;
    clip.write_wav(&tmp.path().join("c.wav")).map_err(|e| e.to_string())?;
    let record = mock_record("c", "s", 0, 1.0);
    let record = ClipRecord { path: "c.wav".into(), ..record };
    let toy_cfg = ToyEncoderConfig { seed: 3, width: 16, ..ToyEncoderConfig::default() };
    let toy = EncoderSource::toy(toy_cfg).map_err(|e| e.to_string())?;
    let emb_dir = tmp.path().join("emb");
    std::fs::create_dir_all(&emb_dir).map_err(|e| e.to_string())?;
    let emb_path = EncoderSource::embedding_path(&emb_dir, "c");
    write_embedding_file(&toy.encode("c", &clip).map_err(|e| e.to_string())?, "c", &emb_path).map_err(|e| e.to_string())?;
    let file_before = std::fs::read(&emb_path).map_err(|e| e.to_string())?;

    for source in [toy, EncoderSource::precomputed(&emb_dir, 16)] {
        let before = source.encode("c", &clip).map_err(|e| e.to_string())?;
        let pipeline = FeaturePipeline::new(ModelKind::MeWEHV, source.clone(), 1.0).map_err(|e| e.to_string())?;
        let mut dims = ModelDims::new(2, 16);
        dims.hidden = 8;
        let (model, mut store) = Model::build::<f32>(ModelKind::MeWEHV, dims, 0).map_err(|e| e.to_string())?;
        let mut adam = Adam::<f32>::new(AdamConfig::default());
        let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
        let start = store.value(model.head.fc2.weight).clone();
        for _ in 0..100 {
            let feats = pipeline.load::<f32>(&record, tmp.path()).map_err(|e| e.to_string())?;
            let mut tape = Tape::with_params(&store);
            let parts = model
                .total_loss(&mut tape, feats.input(), 0, LossConfig::default(), Mode::Train, &mut drop_rng)
                .map_err(|e| e.to_string())?;
            tape.backward(parts.total).map_err(|e| e.to_string())?;
            let mut g = Gradients::for_store(&store);
            tape.collect_param_grads(&mut g);
            drop(tape);
            adam.step(&mut store, &mut g);
            model.update_running_stats(&mut store, &parts.bn_stats);
        }
        ensure!(store.value(model.head.fc2.weight) != &start, "training did not move the head");
        let after = source.encode("c", &clip).map_err(|e| e.to_string())?;
        let same = before.values().iter().zip(after.values()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(same && before.shape() == after.shape(), "encoder output changed");
    }
    ensure!(std::fs::read(&emb_path).map_err(|e| e.to_string())? == file_before, "embedding file changed");
    ensure!(read_embedding_file(&emb_path).is_ok(), "embedding file unreadable");
    Ok("toy and precomputed outputs bit-identical after 100 steps".into())
}

fn fusion_config(ds: &mewehv::harness::ToyDataset, kind: ModelKind, seed: u64, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        task: Task::Language,
        dataset: "toy-fusion".into(),
        train_manifest: Some(ds.train.clone()),
        val_manifest: Some(ds.val.clone()),
        kind,
        width: 64,
        hidden: 32,
        encoder_seed: seed,
        seed,
        epochs: 20,
        target_val_accuracy: (kind == ModelKind::MeWEHV).then_some(0.95),
        out: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn fusion_gain() -> Outcome {
    let seeds = [0u64, 1, 2];
    let results: Vec<Result<Vec<(ModelKind, f64, usize)>, String>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                scope.spawn(move || {
                    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
                    let ds = make_toy_fusion_dataset(&tmp.path().join("data"), seed, 256).map_err(|e| e.to_string())?;
                    let mut rows = Vec::new();
                    for kind in ModelKind::ALL {
                        let cfg = fusion_config(&ds, kind, seed, &tmp.path().join(kind.to_string()));
                        let out = train(&cfg).map_err(|e| format!("seed {seed} {kind}: {e}"))?;
                        let best = out.report.epochs.iter().map(|e| e.val_accuracy).fold(0.0, f64::max);
                        rows.push((kind, best, out.report.epochs.len() - 1));
                    }
                    Ok(rows)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err("panicked".into()))).collect()
    });
    let mut summary = Vec::new();
    let mut failures = Vec::new();
    for (seed, rows) in seeds.iter().zip(results) {
        for (kind, best, epochs) in rows? {
            let ok = match kind {
                ModelKind::MeWEHV => best >= 0.95,
                _ => best <= 0.65,
            };
            if !ok {
                failures.push(format!("seed {seed} {kind} best val {best:.3}"));
            }
            summary.push(format!("s{seed} {kind} {best:.3}/{epochs}ep"));
        }
    }
    ensure!(failures.is_empty(), "{}", failures.join("; "));
    Ok(summary.join(", "))
}

fn overfit_smoke() -> Outcome {
    let classes = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let source = EncoderSource::toy(ToyEncoderConfig { seed: 1, width: 64, ..ToyEncoderConfig::default() })
        .map_err(|e| e.to_string())?;
    let pipeline = FeaturePipeline::new(ModelKind::MeWEHV, source, 1.0).map_err(|e| e.to_string())?;
    let mut batch = Vec::new();
    for i in 0..32 {
        let f1 = 400.0 + 700.0 * (i % classes) as f64 + rng.random_range(-30.0..30.0);
        let f2 = rng.random_range(100.0..3000.0);
        let signal: Vec<f64> = (0..16_000)
            .map(|t| {
                let t = t as f64 / 16_000.0;
                0.2 * (2.0 * std::f64::consts::PI * f1 * t).sin()
                    + 0.1 * (2.0 * std::f64::consts::PI * f2 * t).sin()
                    + rng.random_range(-0.05..0.05)
            })
            .collect();
        let clip = AudioClip::from_unit(&signal).map_err(|e| e.to_string())?;
        let rec = mock_record(&format!("o{i}"), "s", i % classes, 1.0);
        batch.push((pipeline.features::<f32>(&rec, &clip).map_err(|e| e.to_string())?, i % classes));
    }
    let mut dims = ModelDims::new(classes, 64);
    dims.hidden = 64;
    let (model, mut store) = Model::build::<f32>(ModelKind::MeWEHV, dims, 0).map_err(|e| e.to_string())?;
    let eval = |store: &ParamStore<f32>, mode: Mode| -> Result<(f64, f64), String> {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(9);
        let (mut correct, mut nll) = (0, 0.0);
        for (f, label) in &batch {
            let mut tape = Tape::with_params(store);
            let (r, _) = model.embed(&mut tape, f.input(), mode, None).map_err(|e| e.to_string())?;
            let lp = model.classify(&mut tape, r, mode, &mut drop_rng, None).map_err(|e| e.to_string())?;
            let lp = tape.value(lp);
            correct += usize::from(lp.argmax() == *label);
            nll -= lp.data()[*label] as f64;
        }
        Ok((correct as f64 / batch.len() as f64, nll / batch.len() as f64))
    };
    let (_, nll0) = eval(&store, Mode::Train)?;
    let mut adam = Adam::<f32>::new(AdamConfig::default());
    let mut drop_rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let mut g = Gradients::for_store(&store);
        let mut stats = Vec::new();
        for (f, label) in &batch {
            let mut tape = Tape::with_params(&store);
            let parts = model
                .total_loss(&mut tape, f.input(), *label, LossConfig::default(), Mode::Train, &mut drop_rng)
                .map_err(|e| e.to_string())?;
            tape.backward_scaled(parts.total, 1.0 / batch.len() as f32).map_err(|e| e.to_string())?;
            tape.collect_param_grads(&mut g);
            stats.extend(parts.bn_stats);
        }
        adam.step(&mut store, &mut g);
        model.update_running_stats(&mut store, &stats);
    }
    let (acc, nll) = eval(&store, Mode::Train)?;
    let (eval_acc, eval_nll) = eval(&store, Mode::Eval)?;
    let reduction = 1.0 - nll / nll0;
    ensure!(acc == 1.0, "train accuracy {acc}, nll {nll0:.4} -> {nll:.4}");
    ensure!(reduction >= 0.9, "nll {nll0:.4} -> {nll:.4} ({:.1}% reduction)", 100.0 * reduction);
    Ok(format!(
        "train-mode accuracy 1.0, nll {nll0:.3} -> {nll:.4}; eval-mode accuracy {eval_acc:.3}, nll {eval_nll:.3}"
    ))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = make_toy_fusion_dataset(&tmp.path().join("data"), 4, 32).map_err(|e| e.to_string())?;
    let read_dir = |p: &Path| -> Result<BTreeMap<String, Vec<u8>>, String> {
        let mut out = BTreeMap::new();
        for e in std::fs::read_dir(p).map_err(|e| e.to_string())? {
            let p = e.map_err(|e| e.to_string())?.path();
            out.insert(p.display().to_string().rsplit('/').next().unwrap().to_string(), std::fs::read(&p).map_err(|e| e.to_string())?);
        }
        Ok(out)
    };
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let mut cfg = fusion_config(&ds, ModelKind::MeWEHV, 4, &tmp.path().join(run));
        cfg.test_manifest = Some(ds.test.clone());
        cfg.epochs = 2;
        cfg.target_val_accuracy = None;
        cfg.batch_size = 8;
        let out = train(&cfg).map_err(|e| e.to_string())?;
        let report = std::fs::read(tmp.path().join(run).join("report.json")).map_err(|e| e.to_string())?;
        outputs.push((report, read_dir(&out.checkpoint)?));
    }
    ensure!(outputs[0].0 == outputs[1].0, "reports differ");
    ensure!(outputs[0].1 == outputs[1].1, "checkpoints differ");
    Ok(format!("report.json and {} checkpoint files identical", outputs[0].1.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("shape-chain conformance", shape_chain),
        ("parameter-count conformance", parameter_counts),
        ("gradient correctness", gradients),
        ("normalization invariants", normalization),
        ("MFCC conformance", mfcc_conformance),
        ("corpus pipeline", corpus_pipeline),
        ("frozen-encoder guarantee", frozen_encoder),
        ("fusion-gain experiment", fusion_gain),
        ("overfit smoke test", overfit_smoke),
        ("determinism", determinism),
    ];
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (name, _) in &criteria {
            println!("{name}: test");
        }
        return;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.1} s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1} s): {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
