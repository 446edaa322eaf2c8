//! Text/graph fusion architectures. A single model couples the transformer
//! encoder with a graph network in one of several wirings; persistent
//! representation banks carry per-document text (T) and graph (N) vectors
//! across batches so the full-graph GNN can run on stale rows cheaply.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::GcError;
use crate::gnn::{Activation, GnnConfig, GnnKind, GnnModel, GraphInputs};
use crate::lm::{random_gc_vector, MiniLm, MiniLmConfig, TokenSequence};
use crate::nn::{Linear, ParamGroup, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// How the text encoder and graph network are connected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wiring {
    /// Transformer classifier, graph ignored.
    LmOnly,
    /// GNN over TF-IDF features, text encoder absent.
    GnnOnly,
    /// Encode text and graph separately, merge the two vectors at the head.
    Late,
    /// GNN output is injected into the encoder as an extra context token.
    Early,
    /// GNN runs on top of the encoder outputs; the head reads GNN rows.
    Composed,
    /// Like Composed, but GNN outputs also loop back as context tokens.
    Looped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Merger {
    Concat,
    Add,
    Max,
}

impl Merger {
    pub fn name(self) -> &'static str {
        match self {
            Merger::Concat => "concat",
            Merger::Add => "add",
            Merger::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Result<Self, GcError> {
        match s {
            "concat" => Ok(Merger::Concat),
            "add" => Ok(Merger::Add),
            "max" => Ok(Merger::Max),
            _ => Err(GcError::Config(format!("unknown merger '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub wiring: Wiring,
    pub gnn_kind: GnnKind,
    pub merger: Merger,
    pub skip_connection: bool,
    pub freeze_lm: bool,
    pub freeze_gnn: bool,
    /// Replace GNN outputs with fixed per-document Gaussian vectors
    /// (early fusion only); isolates the effect of injecting any token.
    pub random_n: bool,
    /// Late/early fusion feed the GNN a static feature matrix V. By default
    /// V is the TF-IDF matrix; with this flag V is a frozen copy of the
    /// encoder's initial document representations instead. Not part of the
    /// variant name.
    pub v_from_lm: bool,
}

impl ArchitectureSpec {
    pub fn lm_only() -> Self {
        ArchitectureSpec {
            wiring: Wiring::LmOnly,
            gnn_kind: GnnKind::Gcn,
            merger: Merger::Concat,
            skip_connection: false,
            freeze_lm: false,
            freeze_gnn: false,
            random_n: false,
            v_from_lm: false,
        }
    }

    pub fn gnn_only(kind: GnnKind) -> Self {
        ArchitectureSpec { wiring: Wiring::GnnOnly, gnn_kind: kind, ..Self::lm_only() }
    }

    pub fn has_lm(&self) -> bool {
        self.wiring != Wiring::GnnOnly
    }

    pub fn has_gnn(&self) -> bool {
        !matches!(self.wiring, Wiring::LmOnly) && !self.random_n
    }

    /// Whether the wiring keeps a persistent text bank.
    pub fn uses_t_bank(&self) -> bool {
        matches!(self.wiring, Wiring::Late | Wiring::Composed | Wiring::Looped)
            || (self.wiring == Wiring::Early && !self.random_n)
    }

    pub fn validate(&self) -> Result<(), GcError> {
        let err = |msg: &str| Err(GcError::Config(msg.into()));
        if self.random_n && self.wiring != Wiring::Early {
            return err("random context vectors only apply to early fusion");
        }
        if self.random_n && self.freeze_gnn {
            return err("random context vectors leave no GNN to freeze");
        }
        if self.skip_connection && self.wiring != Wiring::Early {
            return err("skip connection only applies to early fusion");
        }
        if self.wiring == Wiring::Looped && (self.freeze_lm || self.freeze_gnn) {
            return err("looped wiring requires both components trainable");
        }
        if self.wiring == Wiring::LmOnly && self.freeze_gnn {
            return err("no GNN to freeze in a text-only model");
        }
        if self.wiring == Wiring::GnnOnly && (self.freeze_lm || self.freeze_gnn) {
            return err("freezing is not supported for the graph-only model");
        }
        if self.wiring == Wiring::LmOnly && self.freeze_lm {
            return err("freezing the only trainable component");
        }
        if self.v_from_lm && !matches!(self.wiring, Wiring::Late | Wiring::Early) {
            return err("encoder-derived static features only apply to late/early fusion");
        }
        if self.v_from_lm && self.random_n {
            return err("random context vectors use no static features");
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        match self.wiring {
            Wiring::LmOnly => "lm_only".into(),
            Wiring::GnnOnly => match self.gnn_kind {
                GnnKind::Gcn => "gnn_gcn".into(),
                GnnKind::Gat => "gnn_gat".into(),
            },
            Wiring::Late => format!("late_{}", self.merger.name()),
            Wiring::Early => {
                let mut s = String::from("early");
                if self.freeze_gnn {
                    s.push_str("_frozen");
                }
                if self.skip_connection {
                    s.push_str("_skip_");
                    s.push_str(self.merger.name());
                }
                if self.random_n {
                    s.push_str("_random");
                }
                s
            }
            Wiring::Composed => "composed".into(),
            Wiring::Looped => "looped".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self, GcError> {
        let base = Self::lm_only();
        let spec = match s {
            "lm_only" => base,
            "gnn_gcn" => Self::gnn_only(GnnKind::Gcn),
            "gnn_gat" => Self::gnn_only(GnnKind::Gat),
            "composed" => ArchitectureSpec { wiring: Wiring::Composed, ..base },
            "looped" => ArchitectureSpec { wiring: Wiring::Looped, ..base },
            _ if s.starts_with("late_") => ArchitectureSpec {
                wiring: Wiring::Late,
                merger: Merger::parse(&s["late_".len()..])?,
                ..base
            },
            _ if s.starts_with("early") => {
                let mut spec = ArchitectureSpec { wiring: Wiring::Early, ..base };
                let mut rest = &s["early".len()..];
                if let Some(r) = rest.strip_prefix("_frozen") {
                    spec.freeze_gnn = true;
                    rest = r;
                }
                if let Some(r) = rest.strip_prefix("_skip_") {
                    spec.skip_connection = true;
                    let merger_len = r.find('_').unwrap_or(r.len());
                    spec.merger = Merger::parse(&r[..merger_len])?;
                    rest = &r[merger_len..];
                }
                if let Some(r) = rest.strip_prefix("_random") {
                    spec.random_n = true;
                    spec.freeze_gnn = false;
                    rest = r;
                }
                if !rest.is_empty() {
                    return Err(GcError::Config(format!("unknown variant '{s}'")));
                }
                spec
            }
            _ => return Err(GcError::Config(format!("unknown variant '{s}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The 14 variants trained by the default comparison grid.
    pub fn default_grid() -> Vec<ArchitectureSpec> {
        [
            "lm_only",
            "gnn_gcn",
            "gnn_gat",
            "late_concat",
            "late_add",
            "late_max",
            "early",
            "early_frozen",
            "early_skip_concat",
            "early_skip_max",
            "early_frozen_skip_concat",
            "early_frozen_skip_max",
            "composed",
            "looped",
        ]
        .iter()
        .map(|s| Self::parse(s).expect("grid variant"))
        .collect()
    }
}

/// Tokenized texts, graph constants, and TF-IDF features for one corpus.
pub struct PreparedCorpus {
    pub sequences: Vec<TokenSequence>,
    pub graph: GraphInputs,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl PreparedCorpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Per-document representation banks. Rows hold the latest forward values;
/// they enter later tapes as constants, so no gradient ever flows into them.
#[derive(Debug, Clone, PartialEq)]
pub struct Banks {
    pub t: Tensor,
    pub n: Tensor,
    /// Static features V consumed by the late/early fusion GNN; fixed for
    /// the whole run.
    pub v: Tensor,
    pub random_gc: Option<Tensor>,
}

impl Banks {
    pub fn empty() -> Self {
        Banks {
            t: Tensor::zeros(vec![0, 0]),
            n: Tensor::zeros(vec![0, 0]),
            v: Tensor::zeros(vec![0, 0]),
            random_gc: None,
        }
    }
}

/// A batch forward pass: classification logits plus the freshly computed
/// bank rows, which the caller writes back after the step.
pub struct StepOutput {
    pub logits: Var,
    pub fresh_t: Option<Tensor>,
    pub fresh_n: Option<Tensor>,
}

const GNN_HEAD_DIM: usize = 64;

pub struct FusionModel {
    pub spec: ArchitectureSpec,
    pub lm: Option<MiniLm>,
    pub gnn: Option<GnnModel>,
    pub classifier: Linear,
    pub num_classes: usize,
}

impl FusionModel {
    pub fn new(
        store: &mut ParamStore,
        spec: ArchitectureSpec,
        lm_config: MiniLmConfig,
        feature_dim: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, GcError> {
        spec.validate()?;
        let d = lm_config.dim;
        let lm = if spec.has_lm() { Some(MiniLm::new(store, lm_config, rng)?) } else { None };
        let gnn = if spec.has_gnn() {
            let config = match spec.wiring {
                // output feeds the classifier head directly
                Wiring::GnnOnly => GnnConfig {
                    kind: spec.gnn_kind,
                    final_activation: Activation::Identity,
                    ..GnnConfig::default_for(feature_dim, GNN_HEAD_DIM)
                },
                Wiring::Composed => GnnConfig {
                    kind: spec.gnn_kind,
                    final_activation: Activation::Identity,
                    ..GnnConfig::default_for(d, GNN_HEAD_DIM)
                },
                // static features in, bounded (tanh) d-dim rows out, so the
                // output can merge with or re-enter the encoder
                Wiring::Late | Wiring::Early => {
                    let in_dim = if spec.v_from_lm { d } else { feature_dim };
                    GnnConfig { kind: spec.gnn_kind, ..GnnConfig::default_for(in_dim, d) }
                }
                _ => GnnConfig { kind: spec.gnn_kind, ..GnnConfig::default_for(d, d) },
            };
            Some(GnnModel::new(store, config, rng)?)
        } else {
            None
        };
        let head_in = match spec.wiring {
            Wiring::LmOnly => d,
            Wiring::GnnOnly | Wiring::Composed => GNN_HEAD_DIM,
            Wiring::Late => match spec.merger {
                Merger::Concat => 2 * d,
                _ => d,
            },
            Wiring::Early => {
                if spec.skip_connection && spec.merger == Merger::Concat {
                    2 * d
                } else {
                    d
                }
            }
            Wiring::Looped => d,
        };
        let classifier = Linear::new(store, "head", head_in, num_classes, ParamGroup::Classifier, rng);
        Ok(FusionModel { spec, lm, gnn, classifier, num_classes })
    }

    pub fn dim(&self) -> usize {
        self.lm.as_ref().map(|lm| lm.config.dim).unwrap_or(GNN_HEAD_DIM)
    }

    fn lm_ref(&self) -> &MiniLm {
        self.lm.as_ref().expect("wiring with a text encoder")
    }

    fn gnn_ref(&self) -> &GnnModel {
        self.gnn.as_ref().expect("wiring with a graph network")
    }

    fn merge(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var, GcError> {
        match self.spec.merger {
            Merger::Concat => tape.concat_cols(&[a, b]),
            Merger::Add => tape.add(a, b),
            Merger::Max => {
                // max(a, b) = a + relu(b - a)
                let diff = tape.sub(b, a)?;
                let pos = tape.relu(diff);
                tape.add(a, pos)
            }
        }
    }

    fn encode_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        corpus: &PreparedCorpus,
        batch: &[usize],
        gc_source: Option<Var>,
    ) -> Result<Var, GcError> {
        let seqs: Vec<&TokenSequence> = batch.iter().map(|&i| &corpus.sequences[i]).collect();
        self.lm_ref().encode_batch(tape, store, &seqs, gc_source)
    }

    /// Fill the banks with plain forward passes before training starts.
    /// This happens exactly once per run; afterwards rows are refreshed only
    /// by the batches that visit them.
    pub fn initialize_banks(
        &self,
        store: &ParamStore,
        corpus: &PreparedCorpus,
        rng: &mut impl Rng,
    ) -> Result<Banks, GcError> {
        let mut banks = Banks::empty();
        let d = self.dim();
        if self.spec.uses_t_bank() {
            let mut t = Tensor::zeros(vec![corpus.len(), d]);
            let lm = self.lm_ref();
            let all: Vec<usize> = (0..corpus.len()).collect();
            for chunk in all.chunks(32) {
                let mut tape = Tape::new();
                let seqs: Vec<&TokenSequence> =
                    chunk.iter().map(|&i| &corpus.sequences[i]).collect();
                let v = lm.encode_batch(&mut tape, store, &seqs, None)?;
                let rows = tape.value(v);
                for (k, &i) in chunk.iter().enumerate() {
                    t.data[i * d..(i + 1) * d].copy_from_slice(rows.row(k));
                }
            }
            banks.t = t;
        }
        if matches!(self.spec.wiring, Wiring::Late | Wiring::Early) && !self.spec.random_n {
            banks.v =
                if self.spec.v_from_lm { banks.t.clone() } else { corpus.features.clone() };
        }
        if self.spec.has_gnn() && self.spec.wiring != Wiring::GnnOnly {
            let mut tape = Tape::new();
            let feats = match self.spec.wiring {
                Wiring::Late | Wiring::Early => tape.constant(banks.v.clone()),
                _ => tape.constant(banks.t.clone()),
            };
            let n = self.gnn_ref().forward(&mut tape, store, feats, &corpus.graph, false, rng)?;
            banks.n = tape.value(n).clone();
        }
        if self.spec.random_n {
            let mut gc = Tensor::zeros(vec![corpus.len(), d]);
            for i in 0..corpus.len() {
                let row = random_gc_vector(d, rng);
                gc.data[i * d..(i + 1) * d].copy_from_slice(&row.data);
            }
            banks.random_gc = Some(gc);
        }
        Ok(banks)
    }

    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        corpus: &PreparedCorpus,
        banks: &Banks,
        batch: &[usize],
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<StepOutput, GcError> {
        if batch.is_empty() {
            return Err(GcError::Contract("empty batch".into()));
        }
        match self.spec.wiring {
            Wiring::LmOnly => {
                let t = self.encode_batch(tape, store, corpus, batch, None)?;
                let logits = self.classifier.forward(tape, store, t)?;
                Ok(StepOutput { logits, fresh_t: None, fresh_n: None })
            }
            Wiring::GnnOnly => {
                let feats = tape.constant(corpus.features.clone());
                let n_all = self.gnn_ref().forward(tape, store, feats, &corpus.graph, training, rng)?;
                let n_b = tape.gather_rows(n_all, batch)?;
                let logits = self.classifier.forward(tape, store, n_b)?;
                Ok(StepOutput { logits, fresh_t: None, fresh_n: None })
            }
            Wiring::Late => {
                let t = self.encode_batch(tape, store, corpus, batch, None)?;
                let v = tape.constant(banks.v.clone());
                let n_all = self.gnn_ref().forward(tape, store, v, &corpus.graph, training, rng)?;
                let n_b = tape.gather_rows(n_all, batch)?;
                let n_b = branch_dropout(tape, n_b, training, rng)?;
                let merged = self.merge(tape, t, n_b)?;
                let logits = self.classifier.forward(tape, store, merged)?;
                Ok(StepOutput {
                    logits,
                    fresh_t: Some(tape.value(t).clone()),
                    fresh_n: Some(tape.value(n_b).clone()),
                })
            }
            Wiring::Early => {
                let n_b = if self.spec.random_n {
                    let gc = banks.random_gc.as_ref().expect("random vectors initialized");
                    let all = tape.constant(gc.clone());
                    tape.gather_rows(all, batch)?
                } else {
                    let v = tape.constant(banks.v.clone());
                    let n_all =
                        self.gnn_ref().forward(tape, store, v, &corpus.graph, training, rng)?;
                    tape.gather_rows(n_all, batch)?
                };
                let n_b = branch_dropout(tape, n_b, training, rng)?;
                let t = self.encode_batch(tape, store, corpus, batch, Some(n_b))?;
                let head_in = if self.spec.skip_connection { self.merge(tape, t, n_b)? } else { t };
                let logits = self.classifier.forward(tape, store, head_in)?;
                let fresh_t = self.spec.uses_t_bank().then(|| tape.value(t).clone());
                let fresh_n = (!self.spec.random_n).then(|| tape.value(n_b).clone());
                Ok(StepOutput { logits, fresh_t, fresh_n })
            }
            Wiring::Composed => {
                let t = self.encode_batch(tape, store, corpus, batch, None)?;
                let bank_t = tape.constant(banks.t.clone());
                let full_t = tape.scatter_rows(bank_t, batch, t)?;
                let n_all = self.gnn_ref().forward(tape, store, full_t, &corpus.graph, training, rng)?;
                let n_b = tape.gather_rows(n_all, batch)?;
                let logits = self.classifier.forward(tape, store, n_b)?;
                Ok(StepOutput {
                    logits,
                    fresh_t: Some(tape.value(t).clone()),
                    fresh_n: Some(tape.value(n_b).clone()),
                })
            }
            Wiring::Looped => {
                let bank_n = tape.constant(banks.n.clone());
                let gc_b = tape.gather_rows(bank_n, batch)?;
                let t = self.encode_batch(tape, store, corpus, batch, Some(gc_b))?;
                let bank_t = tape.constant(banks.t.clone());
                let full_t = tape.scatter_rows(bank_t, batch, t)?;
                let n_all = self.gnn_ref().forward(tape, store, full_t, &corpus.graph, training, rng)?;
                let n_b = tape.gather_rows(n_all, batch)?;
                let logits = self.classifier.forward(tape, store, n_b)?;
                Ok(StepOutput {
                    logits,
                    fresh_t: Some(tape.value(t).clone()),
                    fresh_n: Some(tape.value(n_b).clone()),
                })
            }
        }
    }

    /// Write fresh batch rows back into the banks. Rows outside the batch
    /// keep their exact previous bytes.
    pub fn apply_bank_update(&self, banks: &mut Banks, batch: &[usize], out: &StepOutput) {
        if let Some(t) = &out.fresh_t {
            let d = t.cols();
            for (k, &i) in batch.iter().enumerate() {
                banks.t.data[i * d..(i + 1) * d].copy_from_slice(t.row(k));
            }
        }
        if let Some(n) = &out.fresh_n {
            let d = n.cols();
            for (k, &i) in batch.iter().enumerate() {
                banks.n.data[i * d..(i + 1) * d].copy_from_slice(n.row(k));
            }
        }
    }
}

/// Per-document standard-normal rows used by the random-context ablation.
pub fn random_rows(n: usize, dim: usize, rng: &mut impl Rng) -> Tensor {
    let data: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![n, dim], data)
}
