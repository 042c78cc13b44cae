//! Finite-difference verification of tape gradients.
//!
//! Two independent routes compute the same derivative: the tape's analytic
//! backward pass, and central finite differences of the scalar loss under
//! entry-wise perturbation. The comparison is relative with an absolute
//! floor, since losses here are O(1) and finite differences carry roughly
//! `1e-10` of cancellation noise at the step sizes used.
//!
//! Graphs containing `relu` or `max_over_points` report those inputs as
//! fragile; inputs are regenerated until every fragile value sits away from
//! the kink (or the runner-up row), otherwise the finite-difference stencil
//! would straddle a non-differentiable point.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, ValueId};
use super::Tensor;
use crate::rng::rng_from_seed;

/// Per-op analytic-vs-finite-difference mismatch bound. Central differences
/// at `h ~ 1e-6` leave ~1e-10 of noise on O(1) losses, so 1e-4 is four
/// orders of magnitude of headroom.
pub const OP_TOLERANCE: f64 = 1e-4;

/// End-to-end bound for randomized multi-op graphs, looser because errors
/// compound across layers.
pub const GRAPH_TOLERANCE: f64 = 1e-3;

/// Outcome of a verification battery.
#[derive(Clone, Debug)]
pub struct GradCheckSummary {
    /// Total entry-wise derivative comparisons performed.
    pub comparisons: usize,
    /// Number of distinct cases (op instances or graphs).
    pub cases: usize,
    /// Worst relative mismatch observed.
    pub max_rel_err: f64,
}

/// A graph under test: the scalar loss plus the intermediates whose
/// non-smooth points the finite-difference stencil must avoid.
pub struct BuiltGraph {
    loss: ValueId,
    relu_inputs: Vec<ValueId>,
    pool_inputs: Vec<ValueId>,
}

impl BuiltGraph {
    fn plain(loss: ValueId) -> Self {
        BuiltGraph { loss, relu_inputs: Vec::new(), pool_inputs: Vec::new() }
    }
}

type Builder<'a> = Box<dyn Fn(&mut Tape, &[ValueId]) -> BuiltGraph + 'a>;

fn eval_loss(leaves: &[Tensor], build: &Builder) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let g = build(&mut tape, &ids);
    tape.value(g.loss).get(0, 0)
}

/// True when every relu input is at least `margin` from zero and every
/// pooled column's max beats its runner-up by at least `margin`.
fn graph_is_fd_safe(leaves: &[Tensor], build: &Builder, margin: f64) -> bool {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let g = build(&mut tape, &ids);
    for &rid in &g.relu_inputs {
        if tape.value(rid).as_slice().iter().any(|v| v.abs() < margin) {
            return false;
        }
    }
    for &pid in &g.pool_inputs {
        let t = tape.value(pid);
        if t.rows() < 2 {
            continue;
        }
        for j in 0..t.cols() {
            let mut top = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for i in 0..t.rows() {
                let v = t.get(i, j);
                if v > top {
                    second = top;
                    top = v;
                } else if v > second {
                    second = v;
                }
            }
            if top - second < margin {
                return false;
            }
        }
    }
    true
}

/// Compares analytic gradients against central finite differences for every
/// entry of every leaf. Returns (comparisons, worst relative error).
fn check_case(leaves: &[Tensor], build: &Builder) -> (usize, f64) {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let g = build(&mut tape, &ids);
    assert!(tape.value(g.loss).is_scalar(), "gradcheck losses must be scalar");
    let grads = tape.backward(g.loss).expect("fresh tape backward");

    let mut comparisons = 0;
    let mut worst: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[k], leaf.rows(), leaf.cols());
        for e in 0..leaf.len() {
            let h = 1e-6 * leaf.as_slice()[e].abs().max(1.0);
            let mut plus = leaves.to_vec();
            plus[k].as_mut_slice()[e] += h;
            let mut minus = leaves.to_vec();
            minus[k].as_mut_slice()[e] -= h;
            let fd = (eval_loss(&plus, build) - eval_loss(&minus, build)) / (2.0 * h);
            let ad = analytic.as_slice()[e];
            let denom = ad.abs().max(fd.abs()).max(1e-3);
            worst = worst.max((ad - fd).abs() / denom);
            comparisons += 1;
        }
    }
    (comparisons, worst)
}

/// Regenerates leaves with `gen` until the built graph is safe for the
/// stencil, then runs the comparison.
fn check_case_with_retry(
    rng: &mut ChaCha8Rng,
    gen_leaves: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: Builder,
) -> (usize, f64) {
    for _ in 0..64 {
        let leaves = gen_leaves(rng);
        if graph_is_fd_safe(&leaves, &build, 1e-4) {
            return check_case(&leaves, &build);
        }
    }
    panic!("could not generate a finite-difference-safe graph in 64 attempts");
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::new(rows, cols, data)
}

/// Uniform values with `|v| >= margin`.
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, margin: f64) -> Tensor {
    let mut t = rand_tensor(rng, rows, cols);
    for v in t.as_mut_slice() {
        while v.abs() < margin {
            *v = rng.gen_range(-2.0..2.0);
        }
    }
    t
}

/// Checks every primitive op in isolation (plus one short composite) against
/// finite differences.
pub fn op_battery(seed: u64) -> GradCheckSummary {
    let mut rng = rng_from_seed(seed);
    let mut comparisons = 0;
    let mut worst: f64 = 0.0;
    let mut cases = 0;

    let mut run = |rng: &mut ChaCha8Rng,
                   gen_leaves: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
                   build: Builder| {
        let (n, e) = check_case_with_retry(rng, gen_leaves, build);
        comparisons += n;
        worst = worst.max(e);
        cases += 1;
    };

    run(
        &mut rng,
        &|r| vec![rand_tensor(r, 3, 4), rand_tensor(r, 4, 2)],
        Box::new(|t, ids| {
            let y = t.matmul(ids[0], ids[1]);
            BuiltGraph::plain(t.sum_squares(y))
        }),
    );
    run(
        &mut rng,
        &|r| vec![rand_tensor(r, 3, 3), rand_tensor(r, 3, 3)],
        Box::new(|t, ids| {
            let y = t.add(ids[0], ids[1]);
            BuiltGraph::plain(t.sum_squares(y))
        }),
    );
    run(
        &mut rng,
        &|r| vec![rand_tensor(r, 3, 3), rand_tensor(r, 3, 3)],
        Box::new(|t, ids| {
            let y = t.sub(ids[0], ids[1]);
            BuiltGraph::plain(t.sum_squares(y))
        }),
    );
    run(
        &mut rng,
        &|r| vec![rand_tensor(r, 4, 3), rand_tensor(r, 1, 3)],
        Box::new(|t, ids| {
            let y = t.add_row(ids[0], ids[1]);
            BuiltGraph::plain(t.sum_squares(y))
        }),
    );
    run(
        &mut rng,
        &|r| vec![rand_tensor(r, 4, 3), rand_tensor_off_zero(r, 1, 3, 0.1)],
        Box::new(|t, ids| {
            let y = t.mul_row(ids[0], ids[1]);
            BuiltGraph::plain(t.sum_squares(y))
        }),
    );
    run(
        &mut rng,
        &|r| vec![rand_tensor(r, 3, 4)],
        Box::new(|t, ids| {
            let y = t.scale(ids[0], -1.7);
            BuiltGraph::plain(t.sum_squares(y))
        }),
    );
    run(
        &mut rng,
        &|r| vec![rand_tensor(r, 3, 4)],
        Box::new(|t, ids| {
            let y = t.relu(ids[0]);
            let loss = t.sum_squares(y);
            BuiltGraph { loss, relu_inputs: vec![ids[0]], pool_inputs: vec![] }
        }),
    );
    run(
        &mut rng,
        &|r| vec![rand_tensor(r, 3, 4)],
        Box::new(|t, ids| {
            let y = t.transpose(ids[0]);
            BuiltGraph::plain(t.sum_squares(y))
        }),
    );
    run(
        &mut rng,
        &|r| vec![rand_tensor(r, 2, 6)],
        Box::new(|t, ids| {
            let y = t.reshape(ids[0], 3, 4);
            BuiltGraph::plain(t.sum_squares(y))
        }),
    );
    run(
        &mut rng,
        &|r| vec![rand_tensor(r, 3, 2), rand_tensor(r, 3, 3)],
        Box::new(|t, ids| {
            let y = t.concat_cols(ids[0], ids[1]);
            BuiltGraph::plain(t.sum_squares(y))
        }),
    );
    run(
        &mut rng,
        &|r| vec![rand_tensor(r, 1, 4)],
        Box::new(|t, ids| {
            let y = t.broadcast_rows(ids[0], 5);
            BuiltGraph::plain(t.sum_squares(y))
        }),
    );
    run(
        &mut rng,
        &|r| vec![rand_tensor(r, 5, 3)],
        Box::new(|t, ids| {
            let y = t.max_over_points(ids[0]);
            let loss = t.sum_squares(y);
            BuiltGraph { loss, relu_inputs: vec![], pool_inputs: vec![ids[0]] }
        }),
    );
    run(
        &mut rng,
        &|r| {
            vec![rand_tensor(r, 6, 3), rand_tensor_off_zero(r, 1, 3, 0.2), rand_tensor(r, 1, 3)]
        },
        Box::new(|t, ids| {
            let (y, _) = t.batch_norm_train(ids[0], ids[1], ids[2], 1e-5);
            BuiltGraph::plain(t.sum_squares(y))
        }),
    );
    run(
        &mut rng,
        &|r| {
            vec![rand_tensor(r, 4, 3), rand_tensor_off_zero(r, 1, 3, 0.2), rand_tensor(r, 1, 3)]
        },
        Box::new(|t, ids| {
            let y = t.batch_norm_infer(
                ids[0],
                ids[1],
                ids[2],
                &[0.3, -0.2, 0.8],
                &[1.5, 0.7, 2.0],
                1e-5,
            );
            BuiltGraph::plain(t.sum_squares(y))
        }),
    );
    {
        let mask_seed = rng.gen::<u64>();
        run(
            &mut rng,
            &|r| vec![rand_tensor(r, 4, 4)],
            Box::new(move |t, ids| {
                let mut drng = rng_from_seed(mask_seed);
                let y = t.dropout(ids[0], 0.3, &mut drng);
                BuiltGraph::plain(t.sum_squares(y))
            }),
        );
    }
    run(
        &mut rng,
        &|r| vec![rand_tensor(r, 3, 3), rand_tensor(r, 3, 3)],
        Box::new(|t, ids| BuiltGraph::plain(t.mse(ids[0], ids[1]))),
    );
    run(
        &mut rng,
        &|r| vec![rand_tensor(r, 3, 5)],
        Box::new(|t, ids| BuiltGraph::plain(t.sum_squares(ids[0]))),
    );
    // Composite: affine -> relu -> batch norm -> pool -> mse.
    run(
        &mut rng,
        &|r| {
            vec![
                rand_tensor(r, 5, 3),
                rand_tensor_off_zero(r, 3, 4, 0.05),
                rand_tensor(r, 1, 4),
                rand_tensor_off_zero(r, 1, 4, 0.2),
                rand_tensor(r, 1, 4),
                rand_tensor(r, 1, 4),
            ]
        },
        Box::new(|t, ids| {
            let z = t.matmul(ids[0], ids[1]);
            let pre = t.add_row(z, ids[2]);
            let z = t.relu(pre);
            let (bn, _) = t.batch_norm_train(z, ids[3], ids[4], 1e-5);
            let p = t.max_over_points(bn);
            let loss = t.mse(p, ids[5]);
            BuiltGraph { loss, relu_inputs: vec![pre], pool_inputs: vec![bn] }
        }),
    );

    GradCheckSummary { comparisons, cases, max_rel_err: worst }
}

/// Randomized multi-layer graphs mixing every op family: affine layers,
/// either batch-norm mode, optional dropout, row scaling, max pooling with
/// broadcast and concatenation, and an mse head plus a quadratic penalty.
pub fn randomized_graphs(seed: u64, trials: usize) -> GradCheckSummary {
    let mut comparisons = 0;
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut rng = rng_from_seed(crate::rng::derive(seed, &[0x6A0D, trial as u64]));
        let s = rng.gen_range(3..7usize);
        let c0 = rng.gen_range(2..5usize);
        let h1 = rng.gen_range(2..6usize);
        let h2 = rng.gen_range(2..5usize);
        let bn_train_mode = rng.gen_bool(0.5);
        let dropout_rate = if rng.gen_bool(0.5) { 0.25 } else { 0.0 };
        let run_mean: Vec<f64> = (0..h1).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let run_var: Vec<f64> = (0..h1).map(|_| rng.gen_range(0.4..2.0)).collect();
        let mask_seed: u64 = rng.gen();

        let build: Builder = Box::new(move |t, ids| {
            let z = t.matmul(ids[0], ids[1]);
            let pre = t.add_row(z, ids[2]);
            let z = t.relu(pre);
            let z = if bn_train_mode {
                t.batch_norm_train(z, ids[3], ids[4], 1e-5).0
            } else {
                t.batch_norm_infer(z, ids[3], ids[4], &run_mean, &run_var, 1e-5)
            };
            let z = if dropout_rate > 0.0 {
                let mut drng = rng_from_seed(mask_seed);
                t.dropout(z, dropout_rate, &mut drng)
            } else {
                z
            };
            let m = t.matmul(z, ids[5]);
            let m = t.mul_row(m, ids[6]);
            let pooled = t.max_over_points(m);
            let rows = t.value(ids[0]).rows();
            let wide = t.broadcast_rows(pooled, rows);
            let cat = t.concat_cols(ids[0], wide);
            let out = t.matmul(cat, ids[7]);
            let data_term = t.mse(out, ids[8]);
            let penalty = t.sum_squares(ids[1]);
            let penalty = t.scale(penalty, 0.01);
            let loss = t.add(data_term, penalty);
            BuiltGraph { loss, relu_inputs: vec![pre], pool_inputs: vec![m] }
        });

        let gen_leaves = move |r: &mut ChaCha8Rng| {
            vec![
                rand_tensor(r, s, c0),
                rand_tensor_off_zero(r, c0, h1, 0.05),
                rand_tensor(r, 1, h1),
                rand_tensor_off_zero(r, 1, h1, 0.2), // gamma
                rand_tensor(r, 1, h1),               // beta
                rand_tensor_off_zero(r, h1, h2, 0.05),
                rand_tensor_off_zero(r, 1, h2, 0.1), // row scale
                rand_tensor_off_zero(r, c0 + h2, 3, 0.05),
                rand_tensor(r, s, 3), // mse target
            ]
        };

        let (n, e) = check_case_with_retry(&mut rng, gen_leaves, build);
        comparisons += n;
        worst = worst.max(e);
    }
    GradCheckSummary { comparisons, cases: trials, max_rel_err: worst }
}
