use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2], &[0.0, 0.0]));
    let y = tape.softmax(x);
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::randn(&[5, 9], 3.0, &mut rng));
    let y = tape.value(tape.softmax(x));
    for row in y.data().chunks(9) {
        assert!(row.iter().all(|&v| v >= 0.0));
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn matmul_identity_preserves_input() {
    let tape = Tape::<f64>::new();
    let eye = t64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    let a = t64(&[3, 3], &[2., -1., 3., 0., 5., 1., 7., 2., -4.]);
    let i = tape.constant(eye);
    let av = tape.constant(a.clone());
    let y = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(y), a);
}

#[test]
fn layer_norm_of_ramp() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.value(tape.layer_norm(x, 1e-6));
    let expect = 1.224744; // sqrt(3/2), epsilon-adjusted
    assert!((y.data()[0] + expect).abs() < 1e-4);
    assert!(y.data()[1].abs() < 1e-9);
    assert!((y.data()[2] - expect).abs() < 1e-4);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut store = ParamStore::new();
    let x = store.register("x", t64(&[1], &[3.0]));
    let tape = Tape::new();
    let xv = tape.param(&store, x);
    let sq = tape.mul(xv, xv).unwrap();
    let loss = tape.sum_all(sq);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn constant_loss_has_no_gradients() {
    let tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::scalar(5.0));
    let grads = tape.backward(c).unwrap();
    assert!(grads.is_empty());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2], &[1.0, 2.0]));
    assert!(matches!(
        tape.backward(x),
        Err(TensorError::NonScalarLoss { .. })
    ));
}

#[test]
fn gradients_accumulate_across_backward_calls() {
    let mut store = ParamStore::new();
    let x = store.register("x", t64(&[1], &[2.0]));
    for _ in 0..2 {
        let tape = Tape::new();
        let xv = tape.param(&store, x);
        let loss = tape.sum_all(tape.scale(xv, 3.0));
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&grads);
    }
    assert_eq!(store.grad(x).unwrap().data(), &[6.0]);
    store.clear_grads();
    assert!(store.grad(x).is_none());
}

#[test]
fn shape_mismatch_error_names_both_shapes() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let err = tape.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
}

#[test]
fn adam_first_step_moves_by_about_lr() {
    let mut store = ParamStore::new();
    let x = store.register("x", t64(&[1], &[1.0]));
    let tape = Tape::new();
    let xv = tape.param(&store, x);
    let loss = tape.sum_all(xv); // d loss / d x = 1
    store.accumulate(&tape.backward(loss).unwrap());
    let mut adam = AdamState::new(store.len());
    adam_step(&mut store, &mut adam, &[(&[x], 0.1)]).unwrap();
    let moved = 1.0 - store.value(x).data()[0];
    assert!((moved - 0.1).abs() < 1e-6, "moved {moved}");
    assert!(store.grad(x).is_none(), "gradients cleared after step");
}

#[test]
fn adam_zero_gradient_from_fresh_state_leaves_param() {
    let mut store = ParamStore::new();
    let x = store.register("x", t64(&[2], &[1.0, -2.0]));
    store.accumulate(&{
        let tape = Tape::new();
        let xv = tape.param(&store, x);
        let loss = tape.sum_all(tape.scale(xv, 0.0));
        tape.backward(loss).unwrap()
    });
    let mut adam = AdamState::new(store.len());
    adam_step(&mut store, &mut adam, &[(&[x], 0.5)]).unwrap();
    assert_eq!(store.value(x).data(), &[1.0, -2.0]);
}

#[test]
fn adam_steps_are_not_idempotent() {
    let mut store = ParamStore::new();
    let x = store.register("x", t64(&[1], &[0.0]));
    let mut adam = AdamState::new(store.len());
    let mut deltas = Vec::new();
    for _ in 0..2 {
        let before = store.value(x).data()[0];
        let tape = Tape::new();
        let xv = tape.param(&store, x);
        // constant gradient of 1 regardless of x
        let loss = tape.sum_all(xv);
        store.accumulate(&tape.backward(loss).unwrap());
        adam_step(&mut store, &mut adam, &[(&[x], 0.1)]).unwrap();
        deltas.push(store.value(x).data()[0] - before);
    }
    assert_ne!(deltas[0], deltas[1], "moment state must evolve");
}

#[test]
fn adam_missing_gradient_is_an_error() {
    let mut store = ParamStore::new();
    let x = store.register("weights", t64(&[1], &[0.0]));
    let mut adam = AdamState::new(store.len());
    let err = adam_step(&mut store, &mut adam, &[(&[x], 0.1)]).unwrap_err();
    assert!(err.to_string().contains("weights"));
}

#[test]
fn clip_rescales_to_max_norm() {
    let mut store = ParamStore::new();
    let x = store.register("x", t64(&[2], &[0.0, 0.0]));
    let tape = Tape::new();
    let xv = tape.param(&store, x);
    let w = tape.constant(t64(&[2], &[3.0, 4.0]));
    let loss = tape.sum_all(tape.mul(xv, w).unwrap());
    store.accumulate(&tape.backward(loss).unwrap());
    let norm = clip_global_norm(&mut store, &[x], 1.0);
    assert!((norm - 5.0).abs() < 1e-9);
    let g = store.grad(x).unwrap();
    let clipped: f64 = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((clipped - 1.0).abs() < 1e-6);
}

#[test]
fn clip_leaves_small_gradients_alone() {
    let mut store = ParamStore::new();
    let x = store.register("x", t64(&[1], &[0.0]));
    let tape = Tape::new();
    let xv = tape.param(&store, x);
    let loss = tape.sum_all(tape.scale(xv, 0.25));
    store.accumulate(&tape.backward(loss).unwrap());
    clip_global_norm(&mut store, &[x], 1.0);
    assert_eq!(store.grad(x).unwrap().data(), &[0.25]);
}

#[test]
fn dropout_zero_probability_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.dropout(x, 0.0, &mut rng);
    assert_eq!(x, y);
}

#[test]
fn dropout_keeps_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[10_000], 1.0));
    let y = tape.value(tape.dropout(x, 0.3, &mut rng));
    let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 10_000.0;
    assert!((kept - 0.7).abs() < 0.02);
    let scaled = y.data().iter().find(|&&v| v != 0.0).unwrap();
    assert!((scaled - 1.0 / 0.7).abs() < 1e-9);
}

#[test]
fn inference_tape_records_no_backward() {
    let mut store = ParamStore::new();
    let x = store.register("x", t64(&[1], &[1.0]));
    let tape = Tape::inference();
    let xv = tape.param(&store, x);
    let loss = tape.sum_all(xv);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.is_empty());
}
