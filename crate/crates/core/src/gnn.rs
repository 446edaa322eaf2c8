//! Graph components: symmetric-normalized adjacency, GCN and GAT layers,
//! and stacked models producing node representations.

use rand::Rng;

use crate::error::GcError;
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::{Axis, ParamId, Tape, Tensor, Var};

/// D^(-1/2) (A + I) D^(-1/2) over the symmetrized adjacency.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    pub matrix: Tensor,
}

pub fn normalize_adjacency(a: &Tensor) -> Result<NormalizedAdjacency, GcError> {
    let n = a.rows();
    if a.shape != vec![n, n] {
        return Err(GcError::Shape(format!(
            "adjacency must be square, got {:?}",
            a.shape
        )));
    }
    // symmetrize (citations are directed, propagation is not), add self-loops
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if a.data[i * n + j] != 0.0 || a.data[j * n + i] != 0.0 {
                m[i * n + j] = 1.0;
            }
        }
        m[i * n + i] = 1.0;
    }
    let deg: Vec<f64> = (0..n)
        .map(|i| m[i * n..(i + 1) * n].iter().sum::<f64>())
        .collect();
    for i in 0..n {
        for j in 0..n {
            if m[i * n + j] != 0.0 {
                m[i * n + j] /= (deg[i] * deg[j]).sqrt();
            }
        }
    }
    Ok(NormalizedAdjacency { matrix: Tensor::new(vec![n, n], m) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GnnKind {
    Gcn,
    Gat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

#[derive(Debug, Clone)]
pub struct GnnConfig {
    pub kind: GnnKind,
    /// Layer widths including the input dimension, e.g. [f, 128, 64].
    pub dims: Vec<usize>,
    /// Applied after every layer but the last.
    pub hidden_activation: Activation,
    /// Applied after the last layer: tanh when the output feeds the LM's
    /// context token (keeps the value range near token embeddings), identity
    /// when it feeds a classifier head directly.
    pub final_activation: Activation,
    pub dropout: f64,
}

impl GnnConfig {
    pub fn default_for(input_dim: usize, output_dim: usize) -> Self {
        // temporary tuning hooks, removed once the constants settle
        let hidden = std::env::var("GEN_GNN_HIDDEN")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(128);
        let dropout = std::env::var("GEN_GNN_DROPOUT")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0.1);
        GnnConfig {
            kind: GnnKind::Gcn,
            dims: vec![input_dim, hidden, output_dim],
            hidden_activation: Activation::Relu,
            final_activation: Activation::Tanh,
            dropout,
        }
    }
}

enum Layer {
    Gcn { weight: ParamId },
    Gat { weight: ParamId, attn: ParamId },
}

/// Stacked GCN or GAT layers over a fixed graph. Forward is always over the
/// full node set; batching selects output rows afterwards.
pub struct GnnModel {
    layers: Vec<Layer>,
    pub config: GnnConfig,
}

/// Graph structure constants used by the forward pass: the normalized
/// adjacency for GCN and the self-loop edge mask for GAT.
pub struct GraphInputs {
    pub normalized: Tensor,
    pub attention_mask: Tensor,
}

impl GraphInputs {
    /// `a` is the raw binary adjacency (directed edges allowed).
    pub fn new(a: &Tensor) -> Result<Self, GcError> {
        let norm = normalize_adjacency(a)?;
        let n = a.rows();
        // additive mask: 0 on neighbor-or-self entries, -1e30 elsewhere
        let mut mask = vec![-1e30; n * n];
        for i in 0..n {
            for j in 0..n {
                if norm.matrix.data[i * n + j] != 0.0 {
                    mask[i * n + j] = 0.0;
                }
            }
        }
        Ok(GraphInputs {
            normalized: norm.matrix,
            attention_mask: Tensor::new(vec![n, n], mask),
        })
    }
}

fn apply_activation(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Identity => x,
    }
}

impl GnnModel {
    pub fn new(store: &mut ParamStore, config: GnnConfig, rng: &mut impl Rng) -> Result<Self, GcError> {
        if config.dims.len() < 2 {
            return Err(GcError::Contract("GNN needs at least one layer".into()));
        }
        let mut layers = Vec::new();
        for l in 0..config.dims.len() - 1 {
            let (f_in, f_out) = (config.dims[l], config.dims[l + 1]);
            let weight =
                store.add_normal(format!("gnn.layer{l}.weight"), vec![f_in, f_out], ParamGroup::Gnn, rng);
            layers.push(match config.kind {
                GnnKind::Gcn => Layer::Gcn { weight },
                GnnKind::Gat => Layer::Gat {
                    weight,
                    attn: store.add_normal(
                        format!("gnn.layer{l}.attn"),
                        vec![2 * f_out, 1],
                        ParamGroup::Gnn,
                        rng,
                    ),
                },
            });
        }
        Ok(GnnModel { layers, config })
    }

    pub fn output_dim(&self) -> usize {
        *self.config.dims.last().unwrap()
    }

    pub fn input_dim(&self) -> usize {
        self.config.dims[0]
    }

    /// Full-graph forward: returns the [n x output_dim] node representations.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        graph: &GraphInputs,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Var, GcError> {
        let n = graph.normalized.rows();
        if tape.value(features).rows() != n {
            return Err(GcError::Shape(format!(
                "feature rows {} != graph nodes {}",
                tape.value(features).rows(),
                n
            )));
        }
        let mut x = features;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Gcn { weight } => {
                    let w = store.bind(tape, *weight);
                    let xw = tape.matmul(x, w)?;
                    let adj = tape.constant(graph.normalized.clone());
                    tape.matmul(adj, xw)?
                }
                Layer::Gat { weight, attn } => {
                    let w = store.bind(tape, *weight);
                    let xw = tape.matmul(x, w)?; // [n x f']
                    let f_out = tape.value(xw).cols();
                    let attn_var = store.bind(tape, *attn);
                    let a_src_idx: Vec<usize> = (0..f_out).collect();
                    let a_dst_idx: Vec<usize> = (f_out..2 * f_out).collect();
                    let a_src = tape.gather_rows(attn_var, &a_src_idx)?; // [f' x 1]
                    let a_dst = tape.gather_rows(attn_var, &a_dst_idx)?;
                    let s_src = tape.matmul(xw, a_src)?; // [n x 1]
                    let s_dst = tape.matmul(xw, a_dst)?;
                    let ones_row = tape.constant(Tensor::new(vec![1, n], vec![1.0; n]));
                    let ones_col = tape.constant(Tensor::new(vec![n, 1], vec![1.0; n]));
                    let src_mat = tape.matmul(s_src, ones_row)?; // broadcast down columns
                    let dst_t = tape.transpose(s_dst);
                    let dst_mat = tape.matmul(ones_col, dst_t)?; // broadcast across rows
                    let logits = tape.add(src_mat, dst_mat)?;
                    let logits = tape.leaky_relu(logits, 0.2);
                    let mask = tape.constant(graph.attention_mask.clone());
                    let masked = tape.add(logits, mask)?;
                    let alpha = tape.softmax(masked, Axis::Cols)?;
                    tape.matmul(alpha, xw)?
                }
            };
            let act = if l == last { self.config.final_activation } else { self.config.hidden_activation };
            x = apply_activation(tape, x, act);
            if l != last && self.config.dropout > 0.0 {
                x = tape.dropout(x, self.config.dropout, training, rng)?;
            }
        }
        Ok(x)
    }
}
