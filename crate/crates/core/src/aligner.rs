//! Alignment induction from contextual embeddings.
//!
//! The similarity matrix `S = h_x · h_yᵀ` is softmax-normalized along rows
//! (source → target probabilities) and along columns (target → source). A
//! subword pair is aligned when both probabilities exceed the threshold, and
//! two words are aligned when any of their subwords are.

use rayon::prelude::*;

use crate::alignment::{AlignmentMatrix, AlignmentSet};
use crate::corpus::{EmbeddingStore, SentencePair, Side};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::tensor::{col_softmax, matmul_nt, row_softmax, Tensor};

/// Default probability threshold.
pub const DEFAULT_THRESHOLD: f32 = 0.1;
/// Default layer for alignment extraction (0 is the embedding layer).
pub const DEFAULT_LAYER: usize = 6;

/// `S[i][j] = hx[i] · hy[j]`.
pub fn similarity(hx: &Tensor, hy: &Tensor) -> Result<Tensor> {
    matmul_nt(hx, hy)
}

/// Row-normalized and column-normalized versions of `s`, both indexed `[i][j]`.
pub fn alignment_probabilities(s: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((row_softmax(s)?, col_softmax(s)?))
}

/// Subword alignment: `(row_softmax(S) > c) ∧ (col_softmax(S) > c)`.
pub fn extract_subword_alignment(s: &Tensor, threshold: f32) -> Result<AlignmentMatrix> {
    let (forward, backward) = alignment_probabilities(s)?;
    Ok(threshold_intersection(&forward, &backward, threshold))
}

pub(crate) fn threshold_intersection(
    forward: &Tensor,
    backward: &Tensor,
    threshold: f32,
) -> AlignmentMatrix {
    AlignmentMatrix::from_fn(forward.rows(), forward.cols(), |i, j| {
        forward.get(i, j) > threshold && backward.get(i, j) > threshold
    })
}

/// Word pair `(u, v)` is linked iff some subword pair mapping to it is set.
pub fn merge_to_words(
    a: &AlignmentMatrix,
    src_word_map: &[usize],
    tgt_word_map: &[usize],
) -> Result<AlignmentSet> {
    if src_word_map.len() != a.rows() || tgt_word_map.len() != a.cols() {
        return Err(Error::Data(format!(
            "word maps of length {}x{} do not match a {}x{} subword alignment",
            src_word_map.len(),
            tgt_word_map.len(),
            a.rows(),
            a.cols()
        )));
    }
    Ok(a.ones()
        .map(|(i, j)| (src_word_map[i], tgt_word_map[j]))
        .collect())
}

/// A source of content-subword embeddings (special tokens already removed).
pub trait ContextualEmbedder: Sync {
    /// Layers this source can provide, ascending.
    fn available_layers(&self) -> Vec<usize>;

    /// `(source, target)` embeddings at each requested layer, in request order.
    fn embed_pair(&self, pair: &SentencePair, layers: &[usize]) -> Result<Vec<(Tensor, Tensor)>>;
}

fn side_ids<'a>(pair: &SentencePair, side: &'a Side, name: &str) -> Result<&'a [u32]> {
    side.ids.as_deref().ok_or_else(|| {
        Error::Data(format!(
            "pair `{}`: {name} token ids are required to run the encoder",
            pair.id
        ))
    })
}

impl EncoderModel {
    /// Encodes a sentence wrapped in the special tokens and returns the
    /// content rows of each requested layer.
    pub fn embed_sentence(&self, ids: &[u32], layers: &[usize]) -> Result<Vec<Tensor>> {
        let depth = layers.iter().copied().max().unwrap_or(0);
        let (seq, content) = self.config().with_special_tokens(ids);
        let hidden = self.encode_upto(&seq, depth)?;
        Ok(layers
            .iter()
            .map(|&l| {
                hidden
                    .layer(l)
                    .expect("depth covers every requested layer")
                    .slice_rows(content.start, content.end)
            })
            .collect())
    }
}

impl ContextualEmbedder for EncoderModel {
    fn available_layers(&self) -> Vec<usize> {
        (0..=self.config().num_layers).collect()
    }

    fn embed_pair(&self, pair: &SentencePair, layers: &[usize]) -> Result<Vec<(Tensor, Tensor)>> {
        let src = self.embed_sentence(side_ids(pair, &pair.src, "source")?, layers)?;
        let tgt = self.embed_sentence(side_ids(pair, &pair.tgt, "target")?, layers)?;
        Ok(src.into_iter().zip(tgt).collect())
    }
}

impl ContextualEmbedder for EmbeddingStore {
    fn available_layers(&self) -> Vec<usize> {
        self.layers()
    }

    fn embed_pair(&self, pair: &SentencePair, layers: &[usize]) -> Result<Vec<(Tensor, Tensor)>> {
        let entry = self
            .get(&pair.id)
            .ok_or_else(|| Error::Data(format!("no embeddings for pair `{}`", pair.id)))?;
        layers
            .iter()
            .map(|&l| {
                let get = |side: &std::collections::BTreeMap<usize, Tensor>, expected: usize, name: &str| {
                    let t = side.get(&l).ok_or_else(|| {
                        Error::Data(format!("no layer {l} embeddings for pair `{}`", pair.id))
                    })?;
                    if t.rows() != expected {
                        return Err(Error::Data(format!(
                            "pair `{}`: {name} embeddings have {} rows for {} subwords",
                            pair.id,
                            t.rows(),
                            expected
                        )));
                    }
                    Ok(t.clone())
                };
                Ok((
                    get(&entry.src, pair.src.len(), "source")?,
                    get(&entry.tgt, pair.tgt.len(), "target")?,
                ))
            })
            .collect()
    }
}

pub(crate) fn check_nonempty(pair: &SentencePair) -> Result<()> {
    for (side, name) in [(&pair.src, "source"), (&pair.tgt, "target")] {
        if side.is_empty() {
            return Err(Error::Data(format!(
                "pair `{}`: empty sentence ({name} has no content subwords)",
                pair.id
            )));
        }
    }
    Ok(())
}

/// Similarity → extraction → merge, for embeddings already computed.
pub fn align_embeddings(
    hx: &Tensor,
    hy: &Tensor,
    pair: &SentencePair,
    threshold: f32,
) -> Result<AlignmentSet> {
    let s = similarity(hx, hy)?;
    let a = extract_subword_alignment(&s, threshold)?;
    merge_to_words(&a, &pair.src.word_map, &pair.tgt.word_map)
}

/// Aligns one pair at `layer`.
pub fn align_pair<E: ContextualEmbedder + ?Sized>(
    embedder: &E,
    pair: &SentencePair,
    layer: usize,
    threshold: f32,
) -> Result<AlignmentSet> {
    check_nonempty(pair)?;
    let (hx, hy) = embedder
        .embed_pair(pair, &[layer])?
        .pop()
        .expect("one layer requested");
    align_embeddings(&hx, &hy, pair, threshold)
}

/// Aligns every pair in parallel; results keep input order.
pub fn align_corpus<E: ContextualEmbedder + ?Sized>(
    embedder: &E,
    pairs: &[SentencePair],
    layer: usize,
    threshold: f32,
) -> Vec<Result<AlignmentSet>> {
    pairs
        .par_iter()
        .map(|p| align_pair(embedder, p, layer, threshold))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use proptest::prelude::*;

    /// Straight triple-loop evaluation of the thresholded intersection.
    fn naive_extract(s: &Tensor, c: f32) -> AlignmentMatrix {
        let (n, m) = s.dims2().unwrap();
        let mut out = AlignmentMatrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                let row_max = (0..m).map(|k| s.get(i, k)).fold(f32::MIN, f32::max);
                let row_sum: f64 = (0..m).map(|k| ((s.get(i, k) - row_max) as f64).exp()).sum();
                let p_row = (((s.get(i, j) - row_max) as f64).exp() / row_sum) as f32;
                let col_max = (0..n).map(|k| s.get(k, j)).fold(f32::MIN, f32::max);
                let col_sum: f64 = (0..n).map(|k| ((s.get(k, j) - col_max) as f64).exp()).sum();
                let p_col = (((s.get(i, j) - col_max) as f64).exp() / col_sum) as f32;
                out.set(i, j, p_row > c && p_col > c);
            }
        }
        out
    }

    #[test]
    fn similarity_examples() {
        let s = similarity(&Tensor::from_rows(&[[1.0, 0.0]]), &Tensor::from_rows(&[[0.0, 1.0]])).unwrap();
        assert_eq!(s.data(), &[0.0]);
        let s = similarity(&Tensor::from_rows(&[[1.0, 2.0]]), &Tensor::from_rows(&[[3.0, 4.0]])).unwrap();
        assert_eq!(s.data(), &[11.0]);
        let h = Tensor::from_rows(&[[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]]);
        let s = similarity(&h, &h).unwrap();
        assert_eq!(s, s.transpose());
        assert!(similarity(&h, &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn extraction_example() {
        let s = Tensor::from_rows(&[[0.9, 0.1], [0.2, 0.8]]);
        let a = extract_subword_alignment(&s, 0.4).unwrap();
        assert_eq!(a, AlignmentMatrix::from_fn(2, 2, |i, j| i == j));
        let one = extract_subword_alignment(&Tensor::from_rows(&[[-3.0]]), 1.0 - 1e-6).unwrap();
        assert!(one.get(0, 0));
    }

    #[test]
    fn threshold_is_strict() {
        // both probabilities are exactly 0.5
        let a = extract_subword_alignment(&Tensor::from_rows(&[[0.0, 0.0], [0.0, 0.0]]), 0.5).unwrap();
        assert_eq!(a.count(), 0);
    }

    #[test]
    fn merge_examples() {
        let a = AlignmentMatrix::from_fn(2, 2, |i, j| i == j);
        let set = merge_to_words(&a, &[0, 1], &[0, 1]).unwrap();
        assert_eq!(set.to_pharaoh(), "0-0 1-1");
        let a = AlignmentMatrix::from_fn(2, 1, |_, _| true);
        assert_eq!(merge_to_words(&a, &[0, 0], &[0]).unwrap().to_pharaoh(), "0-0");
        assert!(merge_to_words(&AlignmentMatrix::zeros(2, 2), &[0, 1], &[0, 1])
            .unwrap()
            .is_empty());
        assert!(merge_to_words(&a, &[0], &[0]).is_err());
    }

    fn tiny_pair(id: &str, src: &[u32], tgt: &[u32]) -> SentencePair {
        let side = |ids: &[u32]| {
            Side::from_words(ids.iter().map(|i| format!("t{i}"))).with_ids(ids.to_vec())
        };
        SentencePair::new(id, side(src), side(tgt))
    }

    #[test]
    fn identical_single_word_aligns() {
        let model = EncoderModel::random(EncoderConfig::tiny(), 11).unwrap();
        let p = tiny_pair("a", &[7], &[7]);
        let set = align_pair(&model, &p, 2, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(set.to_pharaoh(), "0-0");
    }

    #[test]
    fn empty_target_is_rejected() {
        let model = EncoderModel::random(EncoderConfig::tiny(), 11).unwrap();
        let p = tiny_pair("a", &[7], &[]);
        let err = align_pair(&model, &p, 2, DEFAULT_THRESHOLD).unwrap_err();
        assert!(err.to_string().contains("empty sentence"), "{err}");
    }

    #[test]
    fn missing_ids_is_a_data_error() {
        let model = EncoderModel::random(EncoderConfig::tiny(), 11).unwrap();
        let p = SentencePair::new("a", Side::from_words(["x"]), Side::from_words(["y"]));
        assert!(matches!(align_pair(&model, &p, 1, 0.1), Err(Error::Data(_))));
    }

    #[test]
    fn pipeline_matches_manual_composition() {
        let model = EncoderModel::random(EncoderConfig::tiny(), 5).unwrap();
        let src = Side::new(
            vec!["a".into(), "b".into(), "c".into()],
            Some(vec![5, 6, 7]),
            vec![0, 0, 1],
        );
        let tgt = Side::new(vec!["x".into(), "y".into()], Some(vec![9, 10]), vec![0, 1]);
        let p = SentencePair::new("m", src, tgt);
        for layer in 0..=2 {
            let got = align_pair(&model, &p, layer, 0.1).unwrap();
            let full_x = model.encode(&[1, 5, 6, 7, 2]).unwrap();
            let full_y = model.encode(&[1, 9, 10, 2]).unwrap();
            let hx = full_x.layer(layer).unwrap().slice_rows(1, 4);
            let hy = full_y.layer(layer).unwrap().slice_rows(1, 3);
            let s = similarity(&hx, &hy).unwrap();
            let a = extract_subword_alignment(&s, 0.1).unwrap();
            let want = merge_to_words(&a, &[0, 0, 1], &[0, 1]).unwrap();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn store_embedder_checks_row_counts() {
        use crate::corpus::SentenceEmbeddings;
        let mut store = EmbeddingStore::new();
        let mut e = SentenceEmbeddings::default();
        e.src.insert(6, Tensor::from_rows(&[[1.0, 0.0]]));
        e.tgt.insert(6, Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        store.insert("a", e);
        let ok = SentencePair::new("a", Side::from_words(["x"]), Side::from_words(["y", "z"]));
        assert_eq!(align_pair(&store, &ok, 6, 0.1).unwrap().to_pharaoh(), "0-0 0-1");
        let bad = SentencePair::new("a", Side::from_words(["x", "w"]), Side::from_words(["y", "z"]));
        assert!(align_pair(&store, &bad, 6, 0.1).is_err());
        assert!(align_pair(&store, &ok, 5, 0.1).is_err());
        let unknown = SentencePair::new("b", Side::from_words(["x"]), Side::from_words(["y"]));
        assert!(align_pair(&store, &unknown, 6, 0.1).is_err());
    }

    fn matrix_strategy() -> impl Strategy<Value = Tensor> {
        (1usize..=6, 1usize..=6).prop_flat_map(|(n, m)| {
            proptest::collection::vec(-4.0f32..4.0, n * m)
                .prop_map(move |d| Tensor::matrix(n, m, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matches_naive_loop(s in matrix_strategy(), c in prop::sample::select(vec![0.0f32, 0.1, 0.4, 0.9])) {
            prop_assert_eq!(extract_subword_alignment(&s, c).unwrap(), naive_extract(&s, c));
        }

        #[test]
        fn swap_symmetry(s in matrix_strategy(), c in 0.0f32..0.95) {
            let a = extract_subword_alignment(&s, c).unwrap();
            prop_assert_eq!(extract_subword_alignment(&s.transpose(), c).unwrap(), a.transpose());
        }

        #[test]
        fn monotone_in_threshold(s in matrix_strategy(), c1 in 0.0f32..0.95, c2 in 0.0f32..0.95) {
            let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
            let a_lo = extract_subword_alignment(&s, lo).unwrap();
            let a_hi = extract_subword_alignment(&s, hi).unwrap();
            prop_assert!(a_hi.is_subset_of(&a_lo));
        }

        #[test]
        fn merge_never_grows(s in matrix_strategy(), seed in any::<u64>()) {
            let (n, m) = s.dims2().unwrap();
            let a = extract_subword_alignment(&s, 0.1).unwrap();
            // word maps grouping consecutive subwords pseudo-randomly
            let group = |len: usize, salt: u64| {
                let mut map = vec![0usize; len];
                for k in 1..len {
                    let step = ((seed >> ((k as u64 + salt) % 60)) & 1) as usize;
                    map[k] = map[k - 1] + step;
                }
                map
            };
            let set = merge_to_words(&a, &group(n, 0), &group(m, 7)).unwrap();
            prop_assert!(set.len() <= a.count());
        }

        #[test]
        fn shift_invariance(s in matrix_strategy(), shifts in proptest::collection::vec(-3i32..=3, 12), global in -5i32..=5) {
            // integer entries keep every shifted matrix exactly representable
            let (n, m) = s.dims2().unwrap();
            let base = Tensor::matrix(n, m, s.data().iter().map(|v| v.round()).collect()).unwrap();
            let shifted = |f: &dyn Fn(usize, usize) -> f32| {
                let data = (0..n * m).map(|k| base.data()[k] + f(k / m, k % m)).collect();
                Tensor::matrix(n, m, data).unwrap()
            };
            let by_row = shifted(&|i, _| shifts[i] as f32);
            let by_col = shifted(&|_, j| shifts[6 + j] as f32);
            let everywhere = shifted(&|_, _| global as f32);
            prop_assert_eq!(row_softmax(&by_row).unwrap(), row_softmax(&base).unwrap());
            prop_assert_eq!(col_softmax(&by_col).unwrap(), col_softmax(&base).unwrap());
            for c in [0.0, 0.1, 0.4] {
                prop_assert_eq!(
                    extract_subword_alignment(&everywhere, c).unwrap(),
                    extract_subword_alignment(&base, c).unwrap()
                );
            }
        }
    }
}
