use std::collections::HashMap;

use gcfuse::data::{generate_synthetic, make_split, SyntheticConfig};

#[test]
fn split_difficulty() {
    let graph = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let n = graph.len();
    let labels = graph.labels();
    let texts = graph.texts();
    let adj = graph.adjacency();
    let mut nbrs: Vec<Vec<usize>> = vec![vec![]; n];
    for i in 0..n {
        for j in 0..n {
            if adj.data[i * n + j] != 0.0 || adj.data[j * n + i] != 0.0 {
                if i != j {
                    nbrs[i].push(j);
                }
            }
        }
    }
    let mut flipped = vec![false; n];
    let mut graph_hard = vec![false; n];
    for i in 0..n {
        let words: Vec<&str> = texts[i].split_whitespace().collect();
        let slot = words.iter().take(3).position(|&w| w == "mk");
        if let Some(s) = slot {
            flipped[i] = s != labels[i];
        }
        let mut votes: HashMap<usize, usize> = HashMap::new();
        for &nb in &nbrs[i] {
            *votes.entry(labels[nb]).or_default() += 1;
        }
        let best = votes.iter().max_by_key(|(_, &c)| c);
        let maj_ok = match best {
            Some((&l, &c)) => {
                l == labels[i] && votes.iter().all(|(&l2, &c2)| l2 == l || c2 < c)
            }
            None => false,
        };
        graph_hard[i] = (flipped[i] && !maj_ok) || (!flipped[i] && !maj_ok);
    }
    let unfix: usize = (0..n).filter(|&i| flipped[i] && graph_hard[i]).count();
    println!("total flipped {} unfixable {unfix}", flipped.iter().filter(|&&f| f).count());
    for seed in 0..10u64 {
        let split = make_split(n, seed).unwrap();
        let t = &split.test;
        let flips = t.iter().filter(|&&i| flipped[i]).count();
        let hard = t.iter().filter(|&&i| graph_hard[i]).count();
        let unfixable = t.iter().filter(|&&i| flipped[i] && graph_hard[i]).count();
        println!(
            "seed {seed}: test {} docs, flipped {flips}, graph-hard {hard}, unfixable flips {unfixable}",
            t.len()
        );
    }
}

use gcfuse::config::RunConfig;
use gcfuse::gnn::{GnnConfig, GnnModel, Activation};
use gcfuse::nn::{ParamGroup, ParamStore, Linear};
use gcfuse::tensor::Tape;
use gcfuse::train::{balanced_error, prepare_corpus, Adam, AdamConfig};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[test]
fn gnn_pretrain_train_error() {
    let config = RunConfig::default();
    let graph = generate_synthetic(&config.synthetic).unwrap();
    for seed in [0u64, 2, 4] {
        let (corpus, split, _) = prepare_corpus(&config, &graph, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gnn = GnnModel::new(
            &mut store,
            GnnConfig { ..GnnConfig::default_for(corpus.features.cols(), 64) },
            &mut rng,
        )
        .unwrap();
        let head = Linear::new(&mut store, "head", 64, corpus.num_classes, ParamGroup::Gnn, &mut rng);
        let mut adam = Adam::new(AdamConfig::default());
        let eval = |store: &ParamStore, idx: &[usize], rng: &mut ChaCha8Rng| {
            let mut tape = Tape::new();
            let feats = tape.constant(corpus.features.clone());
            let n = gnn.forward(&mut tape, store, feats, &corpus.graph, false, rng).unwrap();
            let logits = head.forward(&mut tape, store, n).unwrap();
            let t = tape.value(logits).clone();
            let preds: Vec<usize> = idx
                .iter()
                .map(|&i| {
                    let row = t.row(i);
                    (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap()
                })
                .collect();
            let labels: Vec<usize> = idx.iter().map(|&i| corpus.labels[i]).collect();
            balanced_error(&preds, &labels, corpus.num_classes).unwrap()
        };
        for epoch in 1..=30 {
            let mut order = split.train.clone();
            order.shuffle(&mut rng);
            for chunk in order.chunks(32) {
                let mut tape = Tape::new();
                let feats = tape.constant(corpus.features.clone());
                let n = gnn.forward(&mut tape, &store, feats, &corpus.graph, true, &mut rng).unwrap();
                let nb = tape.gather_rows(n, chunk).unwrap();
                let logits = head.forward(&mut tape, &store, nb).unwrap();
                let labels: Vec<usize> = chunk.iter().map(|&i| corpus.labels[i]).collect();
                let loss = tape.cross_entropy(logits, &labels).unwrap();
                let grads = tape.backward(loss).unwrap();
                adam.step(&mut store, &tape.accumulated_param_grads(&grads));
            }
            if epoch % 5 == 0 || epoch <= 3 {
                let tr = eval(&store, &split.train, &mut rng);
                let va = eval(&store, &split.validation, &mut rng);
                let te = eval(&store, &split.test, &mut rng);
                println!("seed {seed} epoch {epoch}: train {tr:.2} val {va:.2} test {te:.2}");
            }
        }
    }
}
