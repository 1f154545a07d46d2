use std::collections::BTreeMap;

use wordalign::corpus::{read_corpus_jsonl, read_gold_pharaoh, write_corpus_jsonl, write_pharaoh, SentenceEmbeddings};
use wordalign::metrics::corpus_aer;
use wordalign::trainer::{train, TrainConfig, TrainMode};
use wordalign::{
    align_corpus, AlignmentSet, ContextualEmbedder, EmbeddingStore, EncoderConfig, EncoderModel, SentencePair,
    Side,
};

fn corpus() -> Vec<SentencePair> {
    type Row<'a> = (&'a [u32], &'a [usize], &'a [u32], &'a [usize], &'a str);
    let rows: [Row; 4] = [
        (&[5, 6, 7], &[0, 1, 1], &[8, 9], &[0, 1], "0-0 1-1"),
        (&[10, 11], &[0, 1], &[12, 13, 14], &[0, 1, 2], "0-0 1-1 1?2"),
        (&[15, 16, 17, 18], &[0, 1, 2, 3], &[19, 20, 21, 22], &[0, 1, 2, 3], "0-0 1-1 2-2 3-3"),
        (&[23], &[0], &[24, 25], &[0, 0], "0-0"),
    ];
    rows
        .iter()
        .enumerate()
        .map(|(k, (sx, wx, sy, wy, gold))| {
            let side = |ids: &[u32], words: &[usize]| {
                let tokens = ids.iter().map(|i| format!("t{i}")).collect();
                Side::new(tokens, Some(ids.to_vec()), words.to_vec())
            };
            SentencePair::new(format!("p{k}"), side(sx, wx), side(sy, wy))
                .with_gold(AlignmentSet::parse_pharaoh(gold, 0).unwrap())
                .with_lang(if k % 2 == 0 { "xx-yy" } else { "zz-yy" })
        })
        .collect()
}

fn model(seed: u64) -> EncoderModel {
    let mut m = EncoderModel::random(EncoderConfig::tiny(), seed).unwrap();
    m.init_adapters(seed + 1);
    m
}

#[test]
fn saved_model_and_store_reproduce_alignments() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = corpus();
    let m = model(3);
    let layers = m.available_layers();
    let direct: Vec<Vec<AlignmentSet>> = layers
        .iter()
        .map(|&l| align_corpus(&m, &pairs, l, 0.1).into_iter().map(Result::unwrap).collect())
        .collect();

    m.save(dir.path().join("m.acwt")).unwrap();
    let loaded = EncoderModel::load(dir.path().join("m.acwt")).unwrap();

    let mut store = EmbeddingStore::new();
    for p in &pairs {
        let mut emb = SentenceEmbeddings { src: BTreeMap::new(), tgt: BTreeMap::new() };
        for (&l, (hx, hy)) in layers.iter().zip(m.embed_pair(p, &layers).unwrap()) {
            emb.src.insert(l, hx);
            emb.tgt.insert(l, hy);
        }
        store.insert(p.id.clone(), emb);
    }
    store.write(dir.path().join("e.acwt")).unwrap();
    let store = EmbeddingStore::read(dir.path().join("e.acwt")).unwrap();
    assert_eq!(store.layers(), layers);

    for (k, &l) in layers.iter().enumerate() {
        for embedder in [&loaded as &dyn ContextualEmbedder, &store] {
            let got: Vec<AlignmentSet> =
                align_corpus(embedder, &pairs, l, 0.1).into_iter().map(Result::unwrap).collect();
            assert_eq!(got, direct[k], "layer {l}");
        }
    }
}

#[test]
fn files_round_trip_through_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = corpus();
    write_corpus_jsonl(dir.path().join("c.jsonl"), &pairs).unwrap();
    let back = read_corpus_jsonl(dir.path().join("c.jsonl")).unwrap();
    assert!(back.warnings.is_empty());
    assert_eq!(back.pairs, pairs);

    let golds: Vec<AlignmentSet> = pairs.iter().map(|p| p.gold.clone().unwrap()).collect();
    write_pharaoh(dir.path().join("g.txt"), &golds).unwrap();
    assert_eq!(read_gold_pharaoh(dir.path().join("g.txt"), 0).unwrap(), golds);

    let sure_only: Vec<AlignmentSet> = golds
        .iter()
        .map(|g| {
            let mut s = AlignmentSet::new();
            g.sure_pairs().for_each(|(i, j)| s.insert_sure(i, j));
            s
        })
        .collect();
    let report = corpus_aer(&sure_only, &golds).unwrap();
    assert_eq!(report.total.aer, 0.0);
    assert_eq!(report.per_pair.len(), pairs.len());
}

#[test]
fn self_supervised_training_round_trips_adapters() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = corpus();
    let mut m = model(5);
    let before = m.adapters().clone();
    let config = TrainConfig {
        batch_size: 2,
        max_steps: 4,
        learning_rate: 1e-3,
        mode: TrainMode::SelfSupervised,
        extract_layer: 2,
        ..TrainConfig::default()
    };
    let state = train(&mut m, &pairs, &config).unwrap();
    assert_eq!(state.losses.len(), 4);
    assert!(state.losses.iter().all(|l| l.is_finite()));
    assert_ne!(m.adapters(), &before);

    m.save_adapters(dir.path().join("a.acwt")).unwrap();
    let mut other = model(5);
    other.load_adapters(dir.path().join("a.acwt")).unwrap();
    assert_eq!(other.adapters(), m.adapters());
    let a: Vec<_> = align_corpus(&m, &pairs, 2, 0.1).into_iter().map(Result::unwrap).collect();
    let b: Vec<_> = align_corpus(&other, &pairs, 2, 0.1).into_iter().map(Result::unwrap).collect();
    assert_eq!(a, b);
}
