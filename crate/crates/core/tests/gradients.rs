//! Finite-difference checks of every layer's analytic gradient at 64-bit.

use mewehv::neuralcore::{
    finite_difference_check, param_gradient_check, BatchNorm1d, Conv1d, Linear, Lstm, Mode,
    ParamStore, SoftAttention, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const LAYER_TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Contracts an arbitrary output with fixed random weights so every output
/// element carries an order-one gradient.
fn project(tape: &mut Tape<'_, f64>, out: Var, weights: &Tensor<f64>) -> Result<Var, mewehv::neuralcore::NnError> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

#[test]
fn lstm_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "lstm", 4, 3, &mut rng).unwrap();
        // non-zero biases exercise the bias adjoints
        for id in [lstm.b_ih, lstm.b_hh] {
            *store.value_mut(id) = random(&[12], &mut rng);
        }
        let x = store.add("x", random(&[3, 4], &mut rng), true).unwrap();
        let proj = random(&[3, 3], &mut rng);
        let report = param_gradient_check(
            &store,
            |tape| {
                let xv = tape.param(x)?;
                let h = lstm.forward(tape, xv)?;
                project(tape, h, &proj)
            },
            STEP,
        )
        .unwrap();
        assert!(
            report.max_relative_error < LAYER_TOL,
            "seed {seed}: {report:?}"
        );
    }
}

#[test]
fn conv_relu_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "conv", 3, 4, 3, 2, &mut rng).unwrap();
        *store.value_mut(conv.bias) = random(&[4], &mut rng);
        let x = store.add("x", random(&[3, 11], &mut rng), true).unwrap();
        let proj = random(&[4, 5], &mut rng);
        let report = param_gradient_check(
            &store,
            |tape| {
                let xv = tape.param(x)?;
                let y = conv.forward(tape, xv)?;
                let y = tape.relu(y);
                project(tape, y, &proj)
            },
            STEP,
        )
        .unwrap();
        assert!(report.max_relative_error < LAYER_TOL, "seed {seed}: {report:?}");
    }
}

#[test]
fn batchnorm_train_and_eval_match_finite_differences() {
    for seed in 0..10 {
        for mode in [Mode::Train, Mode::Eval] {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let mut store = ParamStore::new();
            let bn = BatchNorm1d::new(&mut store, "bn", 3).unwrap();
            *store.value_mut(bn.gamma) = random(&[3], &mut rng);
            *store.value_mut(bn.beta) = random(&[3], &mut rng);
            *store.value_mut(bn.running_mean) = random(&[3], &mut rng);
            let x = store.add("x", random(&[3, 6], &mut rng), true).unwrap();
            let proj = random(&[3, 6], &mut rng);
            let report = param_gradient_check(
                &store,
                |tape| {
                    let xv = tape.param(x)?;
                    let (y, _) = bn.forward(tape, xv, mode)?;
                    project(tape, y, &proj)
                },
                STEP,
            )
            .unwrap();
            assert!(
                report.max_relative_error < LAYER_TOL,
                "seed {seed} {mode:?}: {report:?}"
            );
        }
    }
}

#[test]
fn soft_attention_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut store = ParamStore::new();
        let att = SoftAttention::new(&mut store, "att", 4, &mut rng).unwrap();
        let h = store.add("h", random(&[5, 4], &mut rng), true).unwrap();
        let proj = random(&[4], &mut rng);
        let report = param_gradient_check(
            &store,
            |tape| {
                let hv = tape.param(h)?;
                let (pooled, _) = att.forward(tape, hv)?;
                project(tape, pooled, &proj)
            },
            STEP,
        )
        .unwrap();
        assert!(report.max_relative_error < LAYER_TOL, "seed {seed}: {report:?}");
    }
}

#[test]
fn linear_and_log_softmax_match_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 5, 3, &mut rng).unwrap();
        *store.value_mut(lin.bias) = random(&[3], &mut rng);
        let x = store.add("x", random(&[5], &mut rng), true).unwrap();
        let label = (seed % 3) as usize;
        let report = param_gradient_check(
            &store,
            |tape| {
                let xv = tape.param(x)?;
                let y = lin.forward(tape, xv)?;
                let lp = tape.log_softmax(y)?;
                let picked = tape.pick(lp, label)?;
                Ok(tape.scale(picked, -1.0))
            },
            STEP,
        )
        .unwrap();
        assert!(report.max_relative_error < LAYER_TOL, "seed {seed}: {report:?}");
    }
}

#[test]
fn input_only_checks_through_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[3, 4], &mut rng);
    let w = random(&[4, 2], &mut rng);
    let err = finite_difference_check(
        |tape, v| {
            let wv = tape.constant(w.clone());
            let y = tape.matmul(v, wv, false, false)?;
            let y = tape.sigmoid(y);
            let t = tape.transpose(y)?;
            let r = tape.row(t, 1)?;
            let s = tape.softmax(r)?;
            let p = tape.pick(s, 0)?;
            let m = tape.mean(v);
            let p = tape.reshape(p, &[1])?;
            let m = tape.reshape(m, &[1])?;
            let c = tape.concat(&[p, m])?;
            Ok(tape.sum(c))
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(err < LAYER_TOL, "err = {err}");
}

#[test]
fn transposed_matmul_variants_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [3, 2] } else { [2, 3] };
        let b_shape = if tb { [4, 3] } else { [3, 4] };
        let mut store = ParamStore::new();
        let a = store.add("a", random(&a_shape, &mut rng), true).unwrap();
        let b = store.add("b", random(&b_shape, &mut rng), true).unwrap();
        let proj = random(&[2, 4], &mut rng);
        let report = param_gradient_check(
            &store,
            |tape| {
                let av = tape.param(a)?;
                let bv = tape.param(b)?;
                let y = tape.matmul(av, bv, ta, tb)?;
                project(tape, y, &proj)
            },
            STEP,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-8, "{ta} {tb}: {report:?}");
    }
}
