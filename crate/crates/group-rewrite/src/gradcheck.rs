//! Central-difference verification of every autodiff primitive.
//!
//! Each check builds a scalar loss from one primitive (projected through a
//! random weight vector so the whole Jacobian is exercised), computes
//! analytic gradients with [`Tape::backward`], and compares against central
//! finite differences at 64-bit. Randomized pieces (dropout masks, gather
//! indices) are fixed per check so repeated forwards see the same function.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Tensor, Var};

/// Step size for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Default relative-error tolerance.
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub shape: Vec<usize>,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl CheckReport {
    fn status(&self) -> &'static str {
        if self.pass {
            "ok"
        } else {
            "FAIL"
        }
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<24} {:<14} max rel err {:.3e}  {}",
            self.name,
            format!("{:?}", self.shape),
            self.max_rel_err,
            self.status()
        )
    }
}

/// Relative error with a unit floor, so near-zero gradients compare on an
/// absolute scale.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Checks d(loss)/d(param) for every element of every parameter in `store`
/// against central differences of the rebuilt loss.
pub fn check_loss_fn(
    name: &str,
    shape: &[usize],
    store: &mut ParamStore<f64>,
    build: &dyn Fn(&Tape<f64>, &ParamStore<f64>) -> Var,
    tol: f64,
) -> CheckReport {
    let tape = Tape::new();
    let loss = build(&tape, store);
    assert_eq!(tape.value(loss).numel(), 1, "{name}: loss must be scalar");
    let grads = tape.backward(loss).expect("backward failed");

    let eval = |store: &ParamStore<f64>| -> f64 {
        let t = Tape::inference();
        let l = build(&t, store);
        t.value(l).item()
    };

    let mut max_rel = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).numel();
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = eval(store);
            store.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grads.get(id).map(|g| g.data()[i]).unwrap_or(0.0);
            max_rel = max_rel.max(rel_err(analytic, numeric));
        }
    }
    CheckReport { name: name.to_string(), shape: shape.to_vec(), max_rel_err: max_rel, pass: max_rel < tol }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 0.8, rng)
}

fn store_with(shapes: &[Vec<usize>], rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        store.register(format!("x{i}"), rand_tensor(s, rng));
    }
    store
}

/// Projects an output through fixed random weights to get a scalar loss.
fn project(tape: &Tape<f64>, y: Var, weights: &Tensor<f64>) -> Var {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w).expect("projection shapes match");
    tape.sum_all(prod)
}

/// Runs every primitive over several random shapes. `trials` controls how
/// many shapes each primitive sees.
pub fn run_primitive_checks(seed: u64, tol: f64, trials: usize) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for trial in 0..trials {
        let mut dims = || 1 + (trial * 3 + 2) % 5 + rngd(&mut rng, 3);
        let (r, c, k) = (dims(), dims(), dims());
        run_trial(&mut reports, &mut rng, tol, r, c, k);
    }
    reports
}

fn rngd(rng: &mut ChaCha8Rng, max: usize) -> usize {
    rng.gen_range(0..=max)
}

#[allow(clippy::too_many_arguments)]
fn run_trial(
    reports: &mut Vec<CheckReport>,
    rng: &mut ChaCha8Rng,
    tol: f64,
    r: usize,
    c: usize,
    k: usize,
) {
    // add / mul: same shape and trailing broadcast
    for (name, broadcast) in [("add", false), ("add_broadcast", true)] {
        let shapes: Vec<Vec<usize>> = if broadcast {
            vec![vec![r, c], vec![c]]
        } else {
            vec![vec![r, c], vec![r, c]]
        };
        let mut store = store_with(&shapes, rng);
        let w = rand_tensor(&[r, c], rng);
        reports.push(check_loss_fn(
            name,
            &[r, c],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let b = t.param(s, s.find("x1").unwrap());
                let y = t.add(a, b).unwrap();
                project(t, y, &w)
            },
            tol,
        ));
    }
    for (name, broadcast) in [("mul", false), ("mul_broadcast", true)] {
        let shapes: Vec<Vec<usize>> = if broadcast {
            vec![vec![r, c], vec![c]]
        } else {
            vec![vec![r, c], vec![r, c]]
        };
        let mut store = store_with(&shapes, rng);
        let w = rand_tensor(&[r, c], rng);
        reports.push(check_loss_fn(
            name,
            &[r, c],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let b = t.param(s, s.find("x1").unwrap());
                let y = t.mul(a, b).unwrap();
                project(t, y, &w)
            },
            tol,
        ));
    }

    // scale / add_scalar / sub
    {
        let mut store = store_with(&[vec![r, c]], rng);
        let w = rand_tensor(&[r, c], rng);
        reports.push(check_loss_fn(
            "scale_add_scalar",
            &[r, c],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let y = t.scale(a, -1.7);
                let y = t.add_scalar(y, 0.4);
                project(t, y, &w)
            },
            tol,
        ));
    }
    {
        let mut store = store_with(&[vec![r, c], vec![r, c]], rng);
        let w = rand_tensor(&[r, c], rng);
        reports.push(check_loss_fn(
            "sub",
            &[r, c],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let b = t.param(s, s.find("x1").unwrap());
                let y = t.sub(a, b).unwrap();
                project(t, y, &w)
            },
            tol,
        ));
    }

    // matmul: 2d x 2d, 3d x 2d, batched
    {
        let mut store = store_with(&[vec![r, k], vec![k, c]], rng);
        let w = rand_tensor(&[r, c], rng);
        reports.push(check_loss_fn(
            "matmul_2d",
            &[r, k],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let b = t.param(s, s.find("x1").unwrap());
                let y = t.matmul(a, b).unwrap();
                project(t, y, &w)
            },
            tol,
        ));
    }
    {
        let b_dim = 2;
        let mut store = store_with(&[vec![b_dim, r, k], vec![k, c]], rng);
        let w = rand_tensor(&[b_dim, r, c], rng);
        reports.push(check_loss_fn(
            "matmul_nd_2d",
            &[b_dim, r, k],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let b = t.param(s, s.find("x1").unwrap());
                let y = t.matmul(a, b).unwrap();
                project(t, y, &w)
            },
            tol,
        ));
    }
    {
        let b_dim = 2;
        let mut store = store_with(&[vec![b_dim, r, k], vec![b_dim, k, c]], rng);
        let w = rand_tensor(&[b_dim, r, c], rng);
        reports.push(check_loss_fn(
            "matmul_batched",
            &[b_dim, r, k],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let b = t.param(s, s.find("x1").unwrap());
                let y = t.matmul(a, b).unwrap();
                project(t, y, &w)
            },
            tol,
        ));
    }

    // row-wise ops
    for name in ["softmax", "log_softmax", "layer_norm", "gelu", "sigmoid"] {
        let mut store = store_with(&[vec![r, c.max(2)]], rng);
        let w = rand_tensor(&[r, c.max(2)], rng);
        let op = name;
        reports.push(check_loss_fn(
            name,
            &[r, c.max(2)],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let y = match op {
                    "softmax" => t.softmax(a),
                    "log_softmax" => t.log_softmax(a),
                    "layer_norm" => t.layer_norm(a, 1e-6),
                    "gelu" => t.gelu(a),
                    _ => t.sigmoid(a),
                };
                project(t, y, &w)
            },
            tol,
        ));
    }

    // log and clamp want positive, in-range inputs
    {
        let mut store = ParamStore::new();
        let vals = rand_tensor(&[r, c], rng).map(|v| v.abs() + 0.5);
        store.register("x0", vals);
        let w = rand_tensor(&[r, c], rng);
        reports.push(check_loss_fn(
            "log",
            &[r, c],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let y = t.log(a);
                project(t, y, &w)
            },
            tol,
        ));
    }
    {
        let mut store = store_with(&[vec![r, c]], rng);
        let w = rand_tensor(&[r, c], rng);
        reports.push(check_loss_fn(
            "clamp",
            &[r, c],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let y = t.clamp(a, -0.9, 0.9);
                project(t, y, &w)
            },
            tol,
        ));
    }

    // gathers
    {
        let rows = r + 2;
        let mut store = store_with(&[vec![rows, c]], rng);
        let picks: Vec<usize> = (0..r + 3).map(|_| rng.gen_range(0..rows)).collect();
        let w = rand_tensor(&[picks.len(), c], rng);
        reports.push(check_loss_fn(
            "index_select0",
            &[rows, c],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let y = t.index_select0(a, &picks).unwrap();
                project(t, y, &w)
            },
            tol,
        ));
    }
    {
        let k_rows = 3;
        let mut store = store_with(&[vec![k_rows, c]], rng);
        let tags: Vec<usize> = (0..r + 2).map(|_| rng.gen_range(0..=k_rows)).collect();
        let w = rand_tensor(&[tags.len(), c], rng);
        reports.push(check_loss_fn(
            "tag_lookup",
            &[k_rows, c],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let y = t.tag_lookup(a, &tags).unwrap();
                project(t, y, &w)
            },
            tol,
        ));
    }
    {
        let mut store = store_with(&[vec![r, c.max(2)]], rng);
        let picks: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c.max(2))).collect();
        let w = rand_tensor(&[r], rng);
        reports.push(check_loss_fn(
            "gather_last",
            &[r, c.max(2)],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let y = t.gather_last(a, &picks).unwrap();
                project(t, y, &w)
            },
            tol,
        ));
    }
    {
        let mut store = store_with(&[vec![r, c.max(2)]], rng);
        let picks: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c.max(2))).collect();
        let w = rand_tensor(&[r], rng);
        reports.push(check_loss_fn(
            "cross_entropy",
            &[r, c.max(2)],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let lp = t.log_softmax(a);
                let y = t.cross_entropy(lp, &picks).unwrap();
                project(t, y, &w)
            },
            tol,
        ));
    }

    // reductions
    {
        let mut store = store_with(&[vec![r, c]], rng);
        let w = rand_tensor(&[r], rng);
        reports.push(check_loss_fn(
            "sum_last",
            &[r, c],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let y = t.sum_last(a);
                project(t, y, &w)
            },
            tol,
        ));
    }
    {
        let mut store = store_with(&[vec![r, c]], rng);
        reports.push(check_loss_fn(
            "mean_all",
            &[r, c],
            &mut store,
            &|t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                t.mean_all(a)
            },
            tol,
        ));
    }

    // shape ops
    {
        let mut store = store_with(&[vec![r, c, 2]], rng);
        let w = rand_tensor(&[2, c, r], rng);
        reports.push(check_loss_fn(
            "permute",
            &[r, c, 2],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let y = t.permute(a, &[2, 1, 0]).unwrap();
                project(t, y, &w)
            },
            tol,
        ));
    }
    {
        let mut store = store_with(&[vec![r, c]], rng);
        let w = rand_tensor(&[r * c], rng);
        reports.push(check_loss_fn(
            "reshape",
            &[r, c],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let y = t.reshape(a, &[r * c]).unwrap();
                project(t, y, &w)
            },
            tol,
        ));
    }
    {
        let rows = r + 2;
        let start = 1;
        let end = rows - 1;
        let mut store = store_with(&[vec![rows, c]], rng);
        let w = rand_tensor(&[end - start, c], rng);
        reports.push(check_loss_fn(
            "slice0",
            &[rows, c],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let y = t.slice0(a, start, end).unwrap();
                project(t, y, &w)
            },
            tol,
        ));
    }
    {
        let mut store = store_with(&[vec![r, c], vec![r + 1, c]], rng);
        let w = rand_tensor(&[2 * r + 1, c], rng);
        reports.push(check_loss_fn(
            "concat",
            &[r, c],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let b = t.param(s, s.find("x1").unwrap());
                let y = t.concat(a, b, 0).unwrap();
                project(t, y, &w)
            },
            tol,
        ));
    }

    // masked_fill and dropout with fixed masks
    {
        let mut store = store_with(&[vec![r, c]], rng);
        let mask: Vec<bool> = (0..r * c).map(|_| rng.gen_bool(0.3)).collect();
        let w = rand_tensor(&[r, c], rng);
        reports.push(check_loss_fn(
            "masked_fill",
            &[r, c],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let y = t.masked_fill(a, &mask, -1e6).unwrap();
                let y = t.softmax(y);
                project(t, y, &w)
            },
            tol,
        ));
    }
    {
        let mut store = store_with(&[vec![r, c]], rng);
        let w = rand_tensor(&[r, c], rng);
        let mask_seed = rng.gen::<u64>();
        reports.push(check_loss_fn(
            "dropout",
            &[r, c],
            &mut store,
            &move |t, s| {
                let a = t.param(s, s.find("x0").unwrap());
                let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                let y = t.dropout(a, 0.4, &mut mask_rng);
                project(t, y, &w)
            },
            tol,
        ));
    }
}

/// End-to-end check of a 2-layer encoder / 2-layer decoder rewriter at
/// 64-bit: every parameter element of the composite network is verified
/// against central differences of a teacher-forced NLL loss.
pub fn run_composite_check(seed: u64, tol: f64) -> CheckReport {
    use crate::corpus::{EncodedInput, BOS_ID, SEP_ID};
    use crate::model::{FwdCtx, ModelConfig, RewriterModel};

    let config = ModelConfig {
        vocab_size: 14,
        d_model: 8,
        heads: 2,
        enc_layers: 2,
        extractor_layers: 1,
        dec_layers: 2,
        d_ff: 16,
        max_positions: 24,
        k_max: 2,
        dropout: 0.0,
    };
    let mut store: ParamStore<f64> = ParamStore::new();
    let model = RewriterModel::new(config, &mut store, seed).expect("valid config");
    let input = EncodedInput {
        token_ids: vec![2, 7, 8, 3, 2, 9, 10, 3],
        segment_ids: vec![0, 0, 0, 0, 1, 1, 1, 1],
        cls_positions: vec![0, 4],
        group_tags: vec![1, 1, 1, 1, 2, 2, 2, 2],
    };
    let prefix = [BOS_ID, 7, 8, SEP_ID, 9];
    let tags = [1usize, 1, 1, 1, 2];
    let targets = [7usize, 8, 3, 9, 5];
    let build = move |tape: &Tape<f64>, store: &ParamStore<f64>| -> Var {
        let mut ctx = FwdCtx::eval(tape, store);
        let mem = model.encode(&mut ctx, &input).expect("encode");
        let lp = model.decode_all(&mut ctx, &prefix, &tags, mem).expect("decode");
        let nll = tape.cross_entropy(lp, &targets).expect("nll");
        tape.mean_all(nll)
    };
    check_loss_fn("encoder_decoder_composite", &[2, 2], &mut store, &build, tol)
}
