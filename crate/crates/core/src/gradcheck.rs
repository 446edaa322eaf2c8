//! The gradient-integrity suite behind the `gradcheck` subcommand: every
//! differentiable op plus both full models at tiny sizes, each compared to
//! central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::GcError;
use crate::gnn::{GnnConfig, GnnModel, GraphInputs};
use crate::lm::{MiniLm, MiniLmConfig, TokenSequence};
use crate::nn::ParamStore;
use crate::tensor::{finite_diff_check, Axis, Tensor};

pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn rand_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

const OP_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

/// Runs every check and returns one result per item.
pub fn run_all() -> Result<Vec<CheckResult>, GcError> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut results = Vec::new();
    let mut op = |name: &'static str, err: f64| {
        results.push(CheckResult { name, max_rel_error: err, tolerance: OP_TOL });
    };

    let x = rand_tensor(vec![3, 4], &mut rng);
    let b = rand_tensor(vec![4, 2], &mut rng);
    op(
        "matmul",
        finite_diff_check(
            |t, v| {
                let b = t.constant(b.clone());
                let y = t.matmul(v, b).unwrap();
                t.sum(y)
            },
            &x,
            1e-5,
        ),
    );

    let c = rand_tensor(vec![3, 4], &mut rng);
    op(
        "add_sub",
        finite_diff_check(
            |t, v| {
                let c = t.constant(c.clone());
                let y = t.add(v, c).unwrap();
                let z = t.sub(y, v).unwrap();
                let w = t.add(y, z).unwrap();
                t.sum(w)
            },
            &x,
            1e-5,
        ),
    );

    op(
        "mul_scale",
        finite_diff_check(
            |t, v| {
                let c = t.constant(c.clone());
                let y = t.mul(v, c).unwrap();
                let z = t.scale(y, 0.7);
                t.sum(z)
            },
            &x,
            1e-5,
        ),
    );

    let weights = rand_tensor(vec![3, 4], &mut rng);
    op(
        "softmax_rows",
        finite_diff_check(
            |t, v| {
                let s = t.softmax(v, Axis::Rows).unwrap();
                let w = t.constant(weights.clone());
                let y = t.mul(s, w).unwrap();
                t.sum(y)
            },
            &x,
            1e-5,
        ),
    );

    op(
        "layer_norm",
        finite_diff_check(
            |t, v| {
                let y = t.layer_norm(v, None, None, 1e-5).unwrap();
                let w = t.constant(weights.clone());
                let z = t.mul(y, w).unwrap();
                t.sum(z)
            },
            &x,
            1e-5,
        ),
    );

    // keep piecewise activations away from their kinks
    let off_kink = Tensor::new(
        vec![3, 4],
        x.data.iter().map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v }).collect(),
    );
    op(
        "relu",
        finite_diff_check(
            |t, v| {
                let y = t.relu(v);
                t.sum(y)
            },
            &off_kink,
            1e-6,
        ),
    );
    op(
        "leaky_relu",
        finite_diff_check(
            |t, v| {
                let y = t.leaky_relu(v, 0.2);
                t.sum(y)
            },
            &off_kink,
            1e-6,
        ),
    );
    op(
        "gelu",
        finite_diff_check(
            |t, v| {
                let y = t.gelu(v);
                t.sum(y)
            },
            &x,
            1e-5,
        ),
    );
    op(
        "tanh",
        finite_diff_check(
            |t, v| {
                let y = t.tanh(v);
                t.sum(y)
            },
            &x,
            1e-5,
        ),
    );

    op(
        "gather_scatter_concat",
        finite_diff_check(
            |t, v| {
                let g = t.gather_rows(v, &[2, 0]).unwrap();
                let base = t.constant(Tensor::zeros(vec![3, 4]));
                let s = t.scatter_rows(base, &[1, 2], g).unwrap();
                let cat = t.concat_cols(&[s, v]).unwrap();
                let w = t.constant(rand_tensor(vec![3, 8], &mut ChaCha8Rng::seed_from_u64(3)));
                let y = t.mul(cat, w).unwrap();
                t.sum(y)
            },
            &x,
            1e-5,
        ),
    );

    let logits = rand_tensor(vec![2, 3], &mut rng);
    op(
        "cross_entropy",
        finite_diff_check(|t, v| t.cross_entropy(v, &[2, 0]).unwrap(), &logits, 1e-6),
    );

    // full models
    let mut model_rng = ChaCha8Rng::seed_from_u64(23);
    let mut store = ParamStore::new();
    let lm = MiniLm::new(
        &mut store,
        MiniLmConfig { vocab_size: 30, dim: 8, layers: 2, heads: 2, ff_dim: 16, max_len: 12 },
        &mut model_rng,
    )?;
    let seq = TokenSequence { ids: vec![2, 7, 12, 19, 3] };
    let gc = rand_tensor(vec![1, 8], &mut rng);
    let lm_err = finite_diff_check(
        |t, v| {
            let h = lm.encode(t, &store, &seq, Some(v)).unwrap();
            t.sum(h)
        },
        &gc,
        1e-5,
    );
    results.push(CheckResult {
        name: "text_encoder_with_context_token",
        max_rel_error: lm_err,
        tolerance: MODEL_TOL,
    });

    let mut store = ParamStore::new();
    let gnn = GnnModel::new(&mut store, GnnConfig::default_for(5, 4), &mut model_rng)?;
    let mut a = Tensor::zeros(vec![6, 6]);
    for &(i, j) in &[(0usize, 1usize), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (1, 4)] {
        a.data[i * 6 + j] = 1.0;
    }
    let graph = GraphInputs::new(&a)?;
    let feats = rand_tensor(vec![6, 5], &mut rng);
    let gnn_err = finite_diff_check(
        |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let y = gnn.forward(t, &store, v, &graph, false, &mut rng).unwrap();
            t.sum(y)
        },
        &feats,
        1e-5,
    );
    results.push(CheckResult {
        name: "two_layer_gcn",
        max_rel_error: gnn_err,
        tolerance: MODEL_TOL,
    });

    Ok(results)
}
