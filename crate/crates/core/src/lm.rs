//! Word-level text encoder: vocabulary, tokenizer, transformer stack with
//! [CLS] pooling, and injection of a graph-context vector as the second
//! token of the input sequence.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::GcError;
use crate::nn::{EmbeddingTable, ParamGroup, ParamStore, TransformerBlock};
use crate::tensor::{Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const RESERVED: usize = 4;
// magnitude of the injected graph-context row relative to its unit-variance
// normalization; keeps it comparable to freshly initialized embeddings
const GC_SCALE: f64 = 0.05;

const VOCAB_HEADER: &str = "gcfuse-vocab v1 PAD UNK CLS SEP";

/// Word-to-id map with fixed reserved ids. Built from the training split only.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Builds from training texts; corpus words get ids starting at 4.
    pub fn build<S: AsRef<str>>(train_texts: &[S]) -> Self {
        let mut vocab = Vocabulary::default();
        for text in train_texts {
            for word in split_words(text.as_ref()) {
                if !vocab.token_to_id.contains_key(&word) {
                    let id = RESERVED + vocab.tokens.len();
                    vocab.token_to_id.insert(word.clone(), id);
                    vocab.tokens.push(word);
                }
            }
        }
        vocab
    }

    pub fn size(&self) -> usize {
        RESERVED + self.tokens.len()
    }

    pub fn id_of(&self, word: &str) -> usize {
        *self.token_to_id.get(word).unwrap_or(&UNK)
    }

    /// One token per line; line number = id - 4. Header carries the version
    /// and reserved-token names.
    pub fn save(&self, path: &Path) -> Result<(), GcError> {
        let mut out = String::with_capacity(self.tokens.len() * 8);
        out.push_str(VOCAB_HEADER);
        out.push('\n');
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| GcError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self, GcError> {
        let file = std::fs::File::open(path).map_err(|e| GcError::io(path.display().to_string(), e))?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| GcError::io(path.display().to_string(), e))?
            .unwrap_or_default();
        if header != VOCAB_HEADER {
            return Err(GcError::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: format!("unexpected vocabulary header '{header}'"),
            });
        }
        let mut vocab = Vocabulary::default();
        for (i, line) in lines.enumerate() {
            let word = line.map_err(|e| GcError::io(path.display().to_string(), e))?;
            vocab.token_to_id.insert(word.clone(), RESERVED + i);
            vocab.tokens.push(word);
        }
        Ok(vocab)
    }
}

/// Lowercase and split on non-alphanumeric characters.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token ids wrapped as [CLS] ... [SEP], truncated to max_len.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut ids = vec![CLS];
    for w in split_words(text) {
        if ids.len() == max_len - 1 {
            break;
        }
        ids.push(vocab.id_of(&w));
    }
    ids.push(SEP);
    TokenSequence { ids }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniLmConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl Default for MiniLmConfig {
    fn default() -> Self {
        MiniLmConfig { vocab_size: 0, dim: 64, layers: 4, heads: 4, ff_dim: 256, max_len: 128 }
    }
}

/// Transformer text encoder pooled at the [CLS] position.
pub struct MiniLm {
    pub embedding: EmbeddingTable,
    blocks: Vec<TransformerBlock>,
    pub config: MiniLmConfig,
}

impl MiniLm {
    pub fn new(store: &mut ParamStore, config: MiniLmConfig, rng: &mut impl Rng) -> Result<Self, GcError> {
        let embedding = EmbeddingTable::new(
            store,
            "lm.embedding",
            config.vocab_size,
            config.max_len,
            config.dim,
            ParamGroup::Lm,
            rng,
        );
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            blocks.push(TransformerBlock::new(
                store,
                &format!("lm.block{l}"),
                config.dim,
                config.heads,
                config.ff_dim,
                ParamGroup::Lm,
                rng,
            )?);
        }
        Ok(MiniLm { embedding, blocks, config })
    }

    /// Inserts the graph-context vector as row 1 (after [CLS]); body tokens
    /// shift down one position and take the positional embedding of their new
    /// position. The context row is normalized to token-embedding scale; the
    /// rest of the sequence is untouched. If the insert would overflow
    /// max_len, the last body token is dropped, never the context row.
    pub fn inject_gc_token(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embedded: Var,
        gc_vector: Var,
        seq_len: usize,
    ) -> Result<Var, GcError> {
        if tape.value(gc_vector).len() != self.config.dim {
            return Err(GcError::Shape(format!(
                "graph-context vector length {} != model dim {}",
                tape.value(gc_vector).len(),
                self.config.dim
            )));
        }
        let len = if seq_len + 1 > self.config.max_len { seq_len - 1 } else { seq_len };
        let pos = store.bind(tape, self.embedding.positional);

        let cls_row = tape.gather_rows(embedded, &[0])?;
        let pos1 = tape.gather_rows(pos, &[1])?;
        // normalize the context row and shrink it to token-embedding scale
        // (embeddings initialize at std 0.02) so it neither vanishes nor
        // dominates attention; the rest of the sequence stays untouched
        let gc_norm = tape.layer_norm(gc_vector, None, None, 1e-5)?;
        // temporary tuning hook, removed once the constant settles
        let gc_scale = std::env::var("GEN_GC_SCALE")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(GC_SCALE);
        let gc_scaled = tape.scale(gc_norm, gc_scale);
        let gc_row = tape.add(gc_scaled, pos1)?;

        let mut parts = vec![cls_row, gc_row];
        if len > 1 {
            let body: Vec<usize> = (1..len).collect();
            let old_pos: Vec<usize> = (1..len).collect();
            let new_pos: Vec<usize> = (2..len + 1).collect();
            let body_rows = tape.gather_rows(embedded, &body)?;
            let old = tape.gather_rows(pos, &old_pos)?;
            let new = tape.gather_rows(pos, &new_pos)?;
            let stripped = tape.sub(body_rows, old)?;
            let shifted = tape.add(stripped, new)?;
            parts.push(shifted);
        }
        tape.concat_rows(&parts)
    }

    /// Token + positional embedding, optional graph-context injection, the
    /// encoder stack, and the final hidden state at position 0 ([CLS]).
    /// Returns a [1 x dim] var.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &TokenSequence,
        gc_vector: Option<Var>,
    ) -> Result<Var, GcError> {
        let len = seq.len();
        if len > self.config.max_len {
            return Err(GcError::Contract(format!(
                "sequence length {} exceeds max_len {}",
                len, self.config.max_len
            )));
        }
        let tok = self.embedding.lookup(tape, store, &seq.ids)?;
        let pos_table = store.bind(tape, self.embedding.positional);
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.gather_rows(pos_table, &positions)?;
        let mut x = tape.add(tok, pos)?;
        if let Some(gc) = gc_vector {
            x = self.inject_gc_token(tape, store, x, gc, len)?;
        }
        for block in &self.blocks {
            x = block.forward(tape, store, x, None)?;
        }
        tape.gather_rows(x, &[0])
    }

    /// Batched `encode`: sequences are embedded individually, packed
    /// row-wise, and sent through the packed encoder stack. `gc_rows`, when
    /// given, holds one context vector per sequence. Returns [b x dim], one
    /// [CLS] state per sequence, identical row for row to per-document
    /// `encode` calls.
    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seqs: &[&TokenSequence],
        gc_rows: Option<Var>,
    ) -> Result<Var, GcError> {
        let table = store.bind(tape, self.embedding.table);
        let pos_table = store.bind(tape, self.embedding.positional);
        let mut parts = Vec::with_capacity(seqs.len());
        let mut lens = Vec::with_capacity(seqs.len());
        for (k, seq) in seqs.iter().enumerate() {
            let len = seq.len();
            if len > self.config.max_len {
                return Err(GcError::Contract(format!(
                    "sequence length {} exceeds max_len {}",
                    len, self.config.max_len
                )));
            }
            let tok = tape.gather_rows(table, &seq.ids)?;
            let positions: Vec<usize> = (0..len).collect();
            let pos = tape.gather_rows(pos_table, &positions)?;
            let mut x = tape.add(tok, pos)?;
            if let Some(gc) = gc_rows {
                let row = tape.gather_rows(gc, &[k])?;
                x = self.inject_gc_token(tape, store, x, row, len)?;
            }
            lens.push(tape.value(x).rows());
            parts.push(x);
        }
        let mut x = tape.concat_rows(&parts)?;
        for block in &self.blocks {
            x = block.forward_packed(tape, store, x, &lens)?;
        }
        let mut cls = Vec::with_capacity(lens.len());
        let mut offset = 0;
        for len in lens {
            cls.push(offset);
            offset += len;
        }
        tape.gather_rows(x, &cls)
    }
}

/// One fixed standard-normal vector per document for the random-context
/// ablation; sampled once and stored for the whole run.
pub fn random_gc_vector(dim: usize, rng: &mut impl Rng) -> Tensor {
    let data: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![1, dim], data)
}
