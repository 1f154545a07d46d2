//! Alignment error rate and embedding-space diagnostics.
//!
//! AER follows the usual sure/possible definition:
//! `1 − (|A∩S| + |A∩P|) / (|A| + |S|)`, precision `|A∩P| / |A|`, recall
//! `|A∩S| / |S|`. Corpus figures pool link counts before dividing.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aligner::{align_embeddings, check_nonempty, ContextualEmbedder};
use crate::alignment::AlignmentSet;
use crate::corpus::{SentencePair, Side};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LinkCounts {
    /// |A|
    pub predicted: usize,
    /// |S|
    pub sure: usize,
    /// |P|
    pub possible: usize,
    /// |A∩S|
    pub predicted_sure: usize,
    /// |A∩P|
    pub predicted_possible: usize,
}

impl LinkCounts {
    pub fn of(pred: &AlignmentSet, gold: &AlignmentSet) -> Self {
        let mut c = LinkCounts {
            predicted: pred.len(),
            sure: gold.sure_len(),
            possible: gold.len(),
            ..Default::default()
        };
        for (i, j) in pred.pairs() {
            if gold.contains(i, j) {
                c.predicted_possible += 1;
                if gold.is_sure(i, j) {
                    c.predicted_sure += 1;
                }
            }
        }
        c
    }

    pub fn add(&mut self, other: &LinkCounts) {
        self.predicted += other.predicted;
        self.sure += other.sure;
        self.possible += other.possible;
        self.predicted_sure += other.predicted_sure;
        self.predicted_possible += other.predicted_possible;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub counts: LinkCounts,
    pub aer: f64,
    pub precision: f64,
    pub recall: f64,
    /// Set when `|A| + |S| = 0`; AER is then reported as 0.
    pub degenerate: bool,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    pub fn from_counts(counts: LinkCounts) -> Self {
        let den = counts.predicted + counts.sure;
        let degenerate = den == 0;
        let aer = if degenerate {
            0.0
        } else {
            1.0 - (counts.predicted_sure + counts.predicted_possible) as f64 / den as f64
        };
        EvalReport {
            counts,
            aer,
            precision: ratio(counts.predicted_possible, counts.predicted),
            recall: ratio(counts.predicted_sure, counts.sure),
            degenerate,
        }
    }
}

/// Scores one prediction. Flags on predicted links are ignored.
pub fn aer(pred: &AlignmentSet, gold: &AlignmentSet) -> EvalReport {
    EvalReport::from_counts(LinkCounts::of(pred, gold))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusReport {
    pub per_pair: Vec<EvalReport>,
    pub total: EvalReport,
}

pub fn corpus_aer(preds: &[AlignmentSet], golds: &[AlignmentSet]) -> Result<CorpusReport> {
    if preds.len() != golds.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} gold alignments",
            preds.len(),
            golds.len()
        )));
    }
    let mut total = LinkCounts::default();
    let per_pair = preds
        .iter()
        .zip(golds)
        .map(|(p, g)| {
            let c = LinkCounts::of(p, g);
            total.add(&c);
            EvalReport::from_counts(c)
        })
        .collect();
    Ok(CorpusReport {
        per_pair,
        total: EvalReport::from_counts(total),
    })
}

impl CorpusReport {
    /// `id,aer,precision,recall,pred,sure,possible,pred_sure,pred_possible`
    /// with one row per pair and a final `corpus` row.
    pub fn to_csv(&self, ids: &[String]) -> String {
        let mut out = String::from("id,aer,precision,recall,pred,sure,possible,pred_sure,pred_possible\n");
        let row = |out: &mut String, id: &str, r: &EvalReport| {
            let c = r.counts;
            let _ = writeln!(
                out,
                "{id},{:.6},{:.6},{:.6},{},{},{},{},{}",
                r.aer, r.precision, r.recall, c.predicted, c.sure, c.possible, c.predicted_sure, c.predicted_possible
            );
        };
        for (id, r) in ids.iter().zip(&self.per_pair) {
            row(&mut out, id, r);
        }
        row(&mut out, "corpus", &self.total);
        out
    }

    pub fn to_table(&self) -> String {
        let t = &self.total;
        let c = t.counts;
        let mut out = String::new();
        let _ = writeln!(out, "pairs      {:>10}", self.per_pair.len());
        let _ = writeln!(out, "AER        {:>10.2}", 100.0 * t.aer);
        let _ = writeln!(out, "precision  {:>10.2}", 100.0 * t.precision);
        let _ = writeln!(out, "recall     {:>10.2}", 100.0 * t.recall);
        let _ = writeln!(out, "|A|        {:>10}", c.predicted);
        let _ = writeln!(out, "|S|        {:>10}", c.sure);
        let _ = writeln!(out, "|P|        {:>10}", c.possible);
        let _ = writeln!(out, "|A∩S|      {:>10}", c.predicted_sure);
        let _ = writeln!(out, "|A∩P|      {:>10}", c.predicted_possible);
        if t.degenerate {
            let _ = writeln!(out, "warning: no predicted and no sure links, AER defined as 0");
        }
        out
    }
}

fn gold_of(pair: &SentencePair) -> Result<&AlignmentSet> {
    pair.gold
        .as_ref()
        .ok_or_else(|| Error::Data(format!("pair `{}` has no gold alignment", pair.id)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub layer: usize,
    pub total: EvalReport,
    pub by_lang: BTreeMap<String, EvalReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSweep {
    pub rows: Vec<SweepRow>,
}

impl LayerSweep {
    /// Layer with the lowest corpus AER (earliest on ties).
    pub fn best_layer(&self) -> Option<usize> {
        self.rows
            .iter()
            .min_by(|a, b| a.total.aer.total_cmp(&b.total.aer))
            .map(|r| r.layer)
    }

    pub fn languages(&self) -> Vec<String> {
        self.rows
            .first()
            .map(|r| r.by_lang.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// `layer,aer,<lang>...` with AER as a fraction.
    pub fn to_csv(&self) -> String {
        let langs = self.languages();
        let mut out = String::from("layer,aer");
        for l in &langs {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{:.6}", r.layer, r.total.aer);
            for l in &langs {
                let _ = write!(out, ",{:.6}", r.by_lang[l].aer);
            }
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let langs = self.languages();
        let mut out = format!("{:>5} {:>8}", "layer", "avg");
        for l in &langs {
            let _ = write!(out, " {l:>8}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:>5} {:>8.1}", r.layer, 100.0 * r.total.aer);
            for l in &langs {
                let _ = write!(out, " {:>8.1}", 100.0 * r.by_lang[l].aer);
            }
            out.push('\n');
        }
        out
    }
}

/// Corpus AER at every layer the embedder provides.
pub fn layer_sweep<E: ContextualEmbedder + ?Sized>(
    embedder: &E,
    pairs: &[SentencePair],
    threshold: f32,
) -> Result<LayerSweep> {
    let layers = embedder.available_layers();
    let per_pair: Vec<Vec<LinkCounts>> = pairs
        .par_iter()
        .map(|pair| {
            let gold = gold_of(pair)?;
            check_nonempty(pair)?;
            embedder
                .embed_pair(pair, &layers)?
                .iter()
                .map(|(hx, hy)| Ok(LinkCounts::of(&align_embeddings(hx, hy, pair, threshold)?, gold)))
                .collect()
        })
        .collect::<Result<_>>()?;

    let rows = layers
        .iter()
        .enumerate()
        .map(|(k, &layer)| {
            let mut total = LinkCounts::default();
            let mut by_lang: BTreeMap<String, LinkCounts> = BTreeMap::new();
            for (pair, counts) in pairs.iter().zip(&per_pair) {
                total.add(&counts[k]);
                let lang = pair.lang.clone().unwrap_or_else(|| "unk".into());
                by_lang.entry(lang).or_default().add(&counts[k]);
            }
            SweepRow {
                layer,
                total: EvalReport::from_counts(total),
                by_lang: by_lang
                    .into_iter()
                    .map(|(l, c)| (l, EvalReport::from_counts(c)))
                    .collect(),
            }
        })
        .collect();
    Ok(LayerSweep { rows })
}

/// Cosine similarity in `f64`; 0 when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Word vectors as the mean of each word's subword rows.
pub fn word_embeddings(subwords: &Tensor, side: &Side) -> Vec<Vec<f32>> {
    let d = subwords.cols();
    let words = side.num_words();
    let mut sums = vec![vec![0.0f64; d]; words];
    let mut counts = vec![0usize; words];
    for (row, &w) in side.word_map.iter().enumerate() {
        counts[w] += 1;
        for (acc, &v) in sums[w].iter_mut().zip(subwords.row(row)) {
            *acc += v as f64;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|v| (v / c as f64) as f32).collect())
        .collect()
}

/// Mean cosine of gold-aligned word pairs (`s_bi`) and of word pairs built
/// from a random permutation of each sentence (`s_mono`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RepAnalysis {
    pub layer: usize,
    pub s_bi: f64,
    pub s_mono: f64,
    pub bi_pairs: usize,
    pub mono_pairs: usize,
}

/// Runs the analysis at one layer.
pub fn rep_analysis<E: ContextualEmbedder + ?Sized>(
    embedder: &E,
    pairs: &[SentencePair],
    layer: usize,
    seed: u64,
) -> Result<RepAnalysis> {
    Ok(rep_analysis_layers(embedder, pairs, &[layer], seed)?[0])
}

/// Runs the analysis at several layers, sharing the permutations across layers.
///
/// Permutations come from one seeded generator that walks the pairs in order,
/// source side before target side; sentences with fewer than two words are
/// skipped. Every gold link (sure or possible) counts toward `s_bi`.
pub fn rep_analysis_layers<E: ContextualEmbedder + ?Sized>(
    embedder: &E,
    pairs: &[SentencePair],
    layers: &[usize],
    seed: u64,
) -> Result<Vec<RepAnalysis>> {
    for p in pairs {
        gold_of(p)?;
        check_nonempty(p)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms: Vec<[Option<Vec<usize>>; 2]> = pairs
        .iter()
        .map(|p| {
            [&p.src, &p.tgt].map(|side| {
                let n = side.num_words();
                (n >= 2).then(|| {
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut rng);
                    perm
                })
            })
        })
        .collect();

    // per pair, per layer: (bi_sum, bi_n, mono_sum, mono_n)
    let sums: Vec<Vec<(f64, usize, f64, usize)>> = pairs
        .par_iter()
        .zip(&perms)
        .map(|(pair, perm)| {
            let gold = gold_of(pair)?;
            embedder
                .embed_pair(pair, layers)?
                .iter()
                .map(|(hx, hy)| {
                    let wx = word_embeddings(hx, &pair.src);
                    let wy = word_embeddings(hy, &pair.tgt);
                    let mut acc = (0.0, 0, 0.0, 0);
                    for (i, j) in gold.pairs() {
                        acc.0 += cosine(&wx[i], &wy[j]);
                        acc.1 += 1;
                    }
                    for (words, perm) in [(&wx, &perm[0]), (&wy, &perm[1])] {
                        if let Some(perm) = perm {
                            for (i, &pi) in perm.iter().enumerate() {
                                acc.2 += cosine(&words[i], &words[pi]);
                                acc.3 += 1;
                            }
                        }
                    }
                    Ok(acc)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    Ok(layers
        .iter()
        .enumerate()
        .map(|(k, &layer)| {
            let (mut bi, mut nbi, mut mono, mut nmono) = (0.0, 0, 0.0, 0);
            for s in &sums {
                bi += s[k].0;
                nbi += s[k].1;
                mono += s[k].2;
                nmono += s[k].3;
            }
            RepAnalysis {
                layer,
                s_bi: if nbi == 0 { 0.0 } else { bi / nbi as f64 },
                s_mono: if nmono == 0 { 0.0 } else { mono / nmono as f64 },
                bi_pairs: nbi,
                mono_pairs: nmono,
            }
        })
        .collect())
}

/// `layer,s_bi,s_mono`
pub fn rep_analysis_csv(rows: &[RepAnalysis]) -> String {
    let mut out = String::from("layer,s_bi,s_mono\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6}", r.layer, r.s_bi, r.s_mono);
    }
    out
}
