//! Document-graph data model: corpus file ingestion, TF-IDF vectorization,
//! seeded splits, and the synthetic citation-graph generator.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::GcError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub label: usize,
}

/// Documents, labels, and the directed citation edge list. Self-edges are
/// excluded; self-loops appear only through adjacency normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentGraph {
    pub documents: Vec<Document>,
    pub edges: Vec<(usize, usize)>,
    pub num_classes: usize,
    pub label_names: Vec<String>,
}

impl DocumentGraph {
    pub fn new(
        documents: Vec<Document>,
        edges: Vec<(usize, usize)>,
        label_names: Vec<String>,
    ) -> Result<Self, GcError> {
        let n = documents.len();
        let num_classes = label_names.len();
        for d in &documents {
            if d.label >= num_classes {
                return Err(GcError::Integrity(format!(
                    "document '{}' has label {} outside [0, {})",
                    d.id, d.label, num_classes
                )));
            }
        }
        for &(i, j) in &edges {
            if i >= n || j >= n {
                return Err(GcError::Integrity(format!("edge ({i}, {j}) out of range for {n} documents")));
            }
            if i == j {
                return Err(GcError::Integrity(format!("self-edge on document index {i}")));
            }
        }
        Ok(DocumentGraph { documents, edges, num_classes, label_names })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.documents.iter().map(|d| d.label).collect()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.documents.iter().map(|d| d.text.as_str()).collect()
    }

    /// Binary adjacency with A[i][j] = 1 iff (i, j) is an edge.
    pub fn adjacency(&self) -> Tensor {
        let n = self.len();
        let mut a = Tensor::zeros(vec![n, n]);
        for &(i, j) in &self.edges {
            a.data[i * n + j] = 1.0;
        }
        a
    }

    /// Fraction of edges whose endpoints share a class.
    pub fn measured_homophily(&self) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        let intra = self
            .edges
            .iter()
            .filter(|&&(i, j)| self.documents[i].label == self.documents[j].label)
            .count();
        intra as f64 / self.edges.len() as f64
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.len()];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }
}

const CORPUS_HEADER_PREFIX: &str = "#labels";

/// Writes the line-delimited corpus format: one label-map header line, then
/// one tab-separated record per document (id, label, comma-joined refs, text).
pub fn write_corpus(graph: &DocumentGraph, path: &Path) -> Result<(), GcError> {
    let mut out = String::new();
    out.push_str(CORPUS_HEADER_PREFIX);
    for (i, name) in graph.label_names.iter().enumerate() {
        out.push_str(&format!(" {name}={i}"));
    }
    out.push('\n');
    let mut refs: Vec<Vec<&str>> = vec![Vec::new(); graph.len()];
    for &(i, j) in &graph.edges {
        refs[i].push(&graph.documents[j].id);
    }
    for (d, r) in graph.documents.iter().zip(&refs) {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            d.id,
            graph.label_names[d.label],
            r.join(","),
            d.text
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| GcError::io(path.display().to_string(), e))
}

pub fn load_corpus(path: &Path) -> Result<DocumentGraph, GcError> {
    let file = std::fs::File::open(path).map_err(|e| GcError::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let parse_err = |line: usize, msg: String| GcError::Parse {
        path: path.display().to_string(),
        line: line + 1,
        msg,
    };

    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        Some((i, Err(e))) => return Err(parse_err(i, e.to_string())),
        None => return Err(GcError::Integrity("empty corpus".into())),
    };
    if !header.starts_with(CORPUS_HEADER_PREFIX) {
        return Err(parse_err(0, format!("expected '{CORPUS_HEADER_PREFIX}' header, got '{header}'")));
    }
    let mut label_map: HashMap<String, usize> = HashMap::new();
    let mut label_names: Vec<(usize, String)> = Vec::new();
    for part in header[CORPUS_HEADER_PREFIX.len()..].split_whitespace() {
        let (name, idx) = part
            .split_once('=')
            .ok_or_else(|| parse_err(0, format!("bad label mapping '{part}'")))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| parse_err(0, format!("bad class index in '{part}'")))?;
        label_map.insert(name.to_string(), idx);
        label_names.push((idx, name.to_string()));
    }
    label_names.sort();
    let label_names: Vec<String> = label_names.into_iter().map(|(_, n)| n).collect();

    let mut documents = Vec::new();
    let mut raw_refs: Vec<Vec<String>> = Vec::new();
    let mut id_to_index: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in lines {
        let line = line.map_err(|e| parse_err(lineno, e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.splitn(4, '\t');
        let id = fields
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| parse_err(lineno, "missing id field".into()))?;
        let label = fields
            .next()
            .ok_or_else(|| parse_err(lineno, "missing label field".into()))?;
        let refs = fields
            .next()
            .ok_or_else(|| parse_err(lineno, "missing refs field".into()))?;
        let text = fields
            .next()
            .ok_or_else(|| parse_err(lineno, "missing text field".into()))?;
        let label = match label_map.get(label) {
            Some(&l) => l,
            None => label
                .parse::<usize>()
                .map_err(|_| parse_err(lineno, format!("unknown label '{label}'")))?,
        };
        if id_to_index.insert(id.to_string(), documents.len()).is_some() {
            return Err(GcError::Integrity(format!("duplicate document id '{id}'")));
        }
        documents.push(Document { id: id.to_string(), text: text.to_string(), label });
        raw_refs.push(
            refs.split(',')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect(),
        );
    }
    if documents.is_empty() {
        return Err(GcError::Integrity("empty corpus".into()));
    }
    let mut edges = Vec::new();
    for (i, refs) in raw_refs.iter().enumerate() {
        for r in refs {
            let &j = id_to_index.get(r).ok_or_else(|| {
                GcError::Integrity(format!(
                    "document '{}' references unknown id '{}'",
                    documents[i].id, r
                ))
            })?;
            if i == j {
                continue; // self-citations carry no graph signal
            }
            edges.push((i, j));
        }
    }
    DocumentGraph::new(documents, edges, label_names)
}

/// Smoothed TF-IDF with an L2-normalized row per document. The term
/// vocabulary is the top `vocab_cap` terms by document frequency in the fit
/// corpus (ties broken alphabetically); idf(t) = ln((1+n)/(1+df(t))) + 1.
#[derive(Debug, Clone)]
pub struct TfidfVectorizer {
    terms: Vec<String>,
    term_to_index: HashMap<String, usize>,
    idf: Vec<f64>,
}

impl TfidfVectorizer {
    pub fn fit<S: AsRef<str>>(texts: &[S], vocab_cap: usize) -> Result<Self, GcError> {
        if texts.is_empty() {
            return Err(GcError::Contract("TF-IDF fit on empty corpus".into()));
        }
        let mut df: HashMap<String, usize> = HashMap::new();
        for t in texts {
            let mut seen: Vec<String> = crate::lm::split_words(t.as_ref());
            seen.sort();
            seen.dedup();
            for w in seen {
                *df.entry(w).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = df.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(vocab_cap);
        let n = texts.len() as f64;
        let mut terms = Vec::with_capacity(ranked.len());
        let mut idf = Vec::with_capacity(ranked.len());
        let mut term_to_index = HashMap::new();
        for (i, (term, d)) in ranked.into_iter().enumerate() {
            idf.push(((1.0 + n) / (1.0 + d as f64)).ln() + 1.0);
            term_to_index.insert(term.clone(), i);
            terms.push(term);
        }
        Ok(TfidfVectorizer { terms, term_to_index, idf })
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn transform<S: AsRef<str>>(&self, texts: &[S]) -> Tensor {
        let f = self.dim();
        let mut out = Tensor::zeros(vec![texts.len(), f]);
        for (r, text) in texts.iter().enumerate() {
            let row = &mut out.data[r * f..(r + 1) * f];
            for w in crate::lm::split_words(text.as_ref()) {
                if let Some(&i) = self.term_to_index.get(&w) {
                    row[i] += self.idf[i];
                }
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        out
    }
}

/// Disjoint 70/10/20 index partition from a seeded shuffle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

pub fn make_split(n: usize, seed: u64) -> Result<Split, GcError> {
    if n < 10 {
        return Err(GcError::Contract(format!("split needs at least 10 documents, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let n_test = n / 5;
    let n_val = n / 10;
    let test = idx[..n_test].to_vec();
    let validation = idx[n_test..n_test + n_val].to_vec();
    let train = idx[n_test + n_val..].to_vec();
    Ok(Split { train, validation, test, seed })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n: usize,
    pub num_classes: usize,
    pub homophily: f64,
    pub text_signal: f64,
    pub graph_signal: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 600,
            num_classes: 3,
            homophily: 0.85,
            text_signal: 0.7,
            graph_signal: 0.5,
            seed: 0,
        }
    }
}

// generator internals
const WORDS_PER_CLASS: usize = 30;
const NOISE_WORDS: usize = 60;
const DOC_LEN_MIN: usize = 10;
const DOC_LEN_MAX: usize = 14;
const AVG_DEGREE: f64 = 4.0;
// fraction of text_signal carried by the bag-of-words channel; the rest of
// the text evidence sits in word order, which bag-of-words features miss
const UNIGRAM_SCALE: f64 = 0.25;

/// Synthetic citation corpus. Labels are uniform; an expected `homophily`
/// fraction of edges is intra-class. Texts carry the class through two
/// channels: the position of a fixed marker word within the leading slots
/// (readable only by a sequence model) and a weak class-conditional unigram
/// distribution scaled by `text_signal` (readable by bag-of-words features).
/// With probability `graph_signal` a document's text is drawn from the class
/// of a random neighbor instead of its own, so its true label is recoverable
/// only through the graph.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<DocumentGraph, GcError> {
    let c = config.num_classes;
    let n = config.n;
    if n == 0 || c == 0 || n < c {
        return Err(GcError::Contract(format!(
            "invalid synthetic size: n = {n}, classes = {c}"
        )));
    }
    for (name, v) in [
        ("homophily", config.homophily),
        ("text_signal", config.text_signal),
        ("graph_signal", config.graph_signal),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(GcError::Contract(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    // temporary tuning hooks, removed once constants settle
    let unigram_scale: f64 = std::env::var("GEN_UNIGRAM_SCALE")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(UNIGRAM_SCALE);
    let avg_degree: f64 = std::env::var("GEN_AVG_DEGREE")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(AVG_DEGREE);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    // guarantee every class is populated
    for class in 0..c {
        labels[class] = class;
    }

    // edges: decide intra vs cross first, then sample a conforming pair, so
    // the intra fraction is unbiased at `homophily` regardless of class sizes
    let mut by_class = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let target_edges = ((n as f64) * avg_degree / 2.0) as usize;
    let mut edge_set = std::collections::HashSet::new();
    let mut edges = Vec::with_capacity(target_edges);
    let mut guard = 0;
    while edges.len() < target_edges && guard < target_edges * 100 {
        guard += 1;
        let i = rng.gen_range(0..n);
        let j = if c == 1 || rng.gen_bool(config.homophily) {
            let pool = &by_class[labels[i]];
            pool[rng.gen_range(0..pool.len())]
        } else {
            let other = (labels[i] + 1 + rng.gen_range(0..c - 1)) % c;
            let pool = &by_class[other];
            pool[rng.gen_range(0..pool.len())]
        };
        if i == j {
            continue;
        }
        let key = (i.min(j), i.max(j));
        if !edge_set.insert(key) {
            continue;
        }
        edges.push((i, j));
    }

    let mut neighbor_lists = vec![Vec::new(); n];
    for &(i, j) in &edges {
        neighbor_lists[i].push(j);
        neighbor_lists[j].push(i);
    }

    let mut documents = Vec::with_capacity(n);
    for i in 0..n {
        // text class: usually the label; with probability graph_signal the
        // class of a random neighbor, which makes the text misleading exactly
        // when that neighbor belongs to another class
        let text_class = if config.graph_signal > 0.0
            && !neighbor_lists[i].is_empty()
            && rng.gen_bool(config.graph_signal)
        {
            labels[neighbor_lists[i][rng.gen_range(0..neighbor_lists[i].len())]]
        } else {
            labels[i]
        };
        let len = rng.gen_range(DOC_LEN_MIN..=DOC_LEN_MAX);
        let mut words = Vec::with_capacity(len);
        // order channel: the marker word sits in slot text_class of the
        // first num_classes positions; every document contains it exactly
        // once, so its identity alone says nothing about the class
        for slot in 0..c.min(len) {
            if slot == text_class {
                words.push("mk".to_string());
            } else {
                words.push(format!("nw{}", rng.gen_range(0..NOISE_WORDS)));
            }
        }
        // unigram channel, deliberately weak (see UNIGRAM_SCALE)
        for _ in words.len()..len {
            if rng.gen_bool(config.text_signal * unigram_scale) {
                words.push(format!("c{}w{}", text_class, rng.gen_range(0..WORDS_PER_CLASS)));
            } else {
                words.push(format!("nw{}", rng.gen_range(0..NOISE_WORDS)));
            }
        }
        documents.push(Document {
            id: format!("d{i:05}"),
            text: words.join(" "),
            label: labels[i],
        });
    }
    let label_names = (0..c).map(|k| format!("class{k}")).collect();
    DocumentGraph::new(documents, edges, label_names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_graph() -> DocumentGraph {
        DocumentGraph::new(
            vec![
                Document { id: "a".into(), text: "alpha beta".into(), label: 0 },
                Document { id: "b".into(), text: "beta gamma".into(), label: 1 },
                Document { id: "c".into(), text: "gamma delta".into(), label: 0 },
            ],
            vec![(0, 1), (1, 2)],
            vec!["neg".into(), "pos".into()],
        )
        .unwrap()
    }

    #[test]
    fn adjacency_matches_edges() {
        let g = tiny_graph();
        let a = g.adjacency();
        assert_eq!(a.data.iter().filter(|v| **v != 0.0).count(), 2);
        assert_eq!(a.data[0 * 3 + 1], 1.0);
        assert_eq!(a.data[1 * 3 + 2], 1.0);
    }

    #[test]
    fn corpus_roundtrip() {
        let g = tiny_graph();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        write_corpus(&g, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(g, loaded);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");

        std::fs::write(&path, "").unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("empty corpus"), "{err}");

        std::fs::write(&path, "#labels x=0\na\tx\t\thello\nb\tx\tzzz\tworld\n").unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("zzz") && err.contains('b'), "{err}");

        std::fs::write(&path, "#labels x=0\nmalformed-line-without-tabs\n").unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains(":2"), "parse error should carry the line number: {err}");
    }

    #[test]
    fn tfidf_hand_example() {
        let v = TfidfVectorizer::fit(&["a b", "a c"], 100).unwrap();
        let x = v.transform(&["a b"]);
        // terms sorted by df desc then alphabetically: a, b, c
        assert_eq!(v.terms, vec!["a", "b", "c"]);
        assert!((x.data[0] - 0.5797).abs() < 5e-5, "{}", x.data[0]);
        assert!((x.data[1] - 0.8148).abs() < 5e-5, "{}", x.data[1]);
        assert_eq!(x.data[2], 0.0);
    }

    #[test]
    fn tfidf_single_document_and_empty_row() {
        let v = TfidfVectorizer::fit(&["a b c"], 100).unwrap();
        // idf = ln(2/2)+1 = 1 for every present term
        for i in &v.idf {
            assert!((i - 1.0).abs() < 1e-15);
        }
        let x = v.transform(&["a b c"]);
        let norm: f64 = x.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);

        let zero = v.transform(&["unseen words only"]);
        assert!(zero.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tfidf_rows_unit_or_zero_norm() {
        let config = SyntheticConfig { n: 50, ..SyntheticConfig::default() };
        let g = generate_synthetic(&config).unwrap();
        let texts: Vec<&str> = g.texts();
        let v = TfidfVectorizer::fit(&texts, 2000).unwrap();
        let x = v.transform(&texts);
        for r in 0..x.rows() {
            let norm: f64 = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = make_split(10, 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (7, 1, 2));
        assert_eq!(s, make_split(10, 3).unwrap());
        assert!(make_split(9, 0).is_err());

        let s = make_split(1000, 7).unwrap();
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.validation)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn every_index_reaches_test_across_seeds() {
        let n = 1000;
        let mut hit = vec![false; n];
        for seed in 0..10 {
            for &i in &make_split(n, seed).unwrap().test {
                hit[i] = true;
            }
        }
        let frac = hit.iter().filter(|h| **h).count() as f64 / n as f64;
        assert!(frac > 0.85, "test coverage across seeds {frac}");
    }

    #[test]
    fn synthetic_determinism_and_homophily() {
        let config = SyntheticConfig { n: 300, homophily: 0.9, ..SyntheticConfig::default() };
        let g1 = generate_synthetic(&config).unwrap();
        let g2 = generate_synthetic(&config).unwrap();
        assert_eq!(g1, g2);
        let h = g1.measured_homophily();
        assert!((0.85..=0.95).contains(&h), "measured homophily {h}");

        let pure = SyntheticConfig { n: 100, homophily: 1.0, ..SyntheticConfig::default() };
        let g = generate_synthetic(&pure).unwrap();
        assert_eq!(g.measured_homophily(), 1.0);
    }

    #[test]
    fn marker_slot_encodes_the_class() {
        let config =
            SyntheticConfig { n: 120, graph_signal: 0.0, ..SyntheticConfig::default() };
        let g = generate_synthetic(&config).unwrap();
        for (doc, &label) in g.documents.iter().zip(g.labels().iter()) {
            let words: Vec<&str> = doc.text.split(' ').collect();
            let slot = words.iter().position(|&w| w == "mk").unwrap();
            assert_eq!(slot, label, "doc {}", doc.id);
            assert_eq!(words.iter().filter(|&&w| w == "mk").count(), 1);
        }
    }

    #[test]
    fn unigram_channel_is_weak_but_informative() {
        // nearest-centroid over TF-IDF is a bag-of-words linear classifier;
        // it should see the unigram channel but not the word-order channel
        let config = SyntheticConfig {
            n: 300,
            text_signal: 1.0,
            graph_signal: 0.0,
            ..SyntheticConfig::default()
        };
        let g = generate_synthetic(&config).unwrap();
        let split = make_split(g.len(), 0).unwrap();
        let texts: Vec<&str> = g.texts();
        let train_texts: Vec<&str> = split.train.iter().map(|&i| texts[i]).collect();
        let v = TfidfVectorizer::fit(&train_texts, 2000).unwrap();
        let x = v.transform(&texts);
        let labels = g.labels();
        let f = v.dim();
        let mut centroids = vec![vec![0.0; f]; g.num_classes];
        let mut counts = vec![0usize; g.num_classes];
        for &i in &split.train {
            counts[labels[i]] += 1;
            for (cj, xv) in centroids[labels[i]].iter_mut().zip(x.row(i)) {
                *cj += xv;
            }
        }
        for (cent, cnt) in centroids.iter_mut().zip(&counts) {
            cent.iter_mut().for_each(|v| *v /= *cnt as f64);
        }
        let mut correct = 0;
        for &i in &split.test {
            let best = (0..g.num_classes)
                .max_by(|&a, &b| {
                    let sa: f64 = centroids[a].iter().zip(x.row(i)).map(|(c, v)| c * v).sum();
                    let sb: f64 = centroids[b].iter().zip(x.row(i)).map(|(c, v)| c * v).sum();
                    sa.partial_cmp(&sb).unwrap()
                })
                .unwrap();
            if best == labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / split.test.len() as f64;
        assert!(acc > 0.45, "bag-of-words accuracy {acc} not above chance");
        assert!(acc < 0.95, "bag-of-words accuracy {acc} should miss the order channel");
    }
}
