//! Adapter fine-tuning.
//!
//! Each pair contributes `−L` where `L` rewards probability mass on the
//! labelled subword pairs in both softmax directions. Labels are either the
//! gold links expanded to subwords or, in self-supervised mode, the model's
//! own thresholded alignments recomputed at every step.

mod adamw;
mod loss;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aligner::{align_corpus, check_nonempty, similarity, threshold_intersection};
use crate::alignment::{AlignmentMatrix, AlignmentSet};
use crate::corpus::{SentencePair, Side};
use crate::encoder::{AdapterGrads, AdapterSet, EncoderModel};
use crate::error::{Error, Result};
use crate::metrics::corpus_aer;
use crate::tensor::{col_softmax, matmul, row_softmax, Tensor};

pub use adamw::AdamW;
pub use loss::{alignment_loss, gold_to_subword, negative_loss_grad};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Supervised,
    SelfSupervised,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(TrainMode::Supervised),
            "self_supervised" | "self-supervised" => Ok(TrainMode::SelfSupervised),
            other => Err(Error::Config(format!(
                "unknown mode `{other}`, expected supervised or self_supervised"
            ))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Supervised => "supervised",
            TrainMode::SelfSupervised => "self_supervised",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Threshold for pseudo-labels and for validation alignments.
    pub threshold: f32,
    pub extract_layer: usize,
    /// Validate every this many steps (requires a validation set).
    pub validate_every: Option<usize>,
    /// Restore the adapters with the lowest validation AER after training.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 40,
            max_steps: 1500,
            seed: 0,
            mode: TrainMode::Supervised,
            threshold: 0.1,
            extract_layer: 6,
            validate_every: None,
            keep_best: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} must lie in [0, 1)", self.threshold)));
        }
        if self.validate_every == Some(0) {
            return Err(Error::Config("validation interval must be positive".into()));
        }
        Ok(())
    }
}

/// What the subword labels of a pair come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Labels<'a> {
    Gold(&'a AlignmentSet),
    Pseudo { threshold: f32 },
}

fn ids<'a>(pair: &SentencePair, side: &'a Side) -> Result<&'a [u32]> {
    side.ids
        .as_deref()
        .ok_or_else(|| Error::Data(format!("pair `{}` has no token ids", pair.id)))
}

fn labels_for(
    labels: Labels<'_>,
    pair: &SentencePair,
    sxy: &Tensor,
    syx_t: &Tensor,
) -> Result<AlignmentMatrix> {
    match labels {
        Labels::Gold(gold) => gold_to_subword(gold, &pair.src.word_map, &pair.tgt.word_map),
        Labels::Pseudo { threshold } => Ok(threshold_intersection(sxy, syx_t, threshold)),
    }
}

/// Subword labels from the model's current alignments at `layer`.
pub fn make_pseudo_labels(
    model: &EncoderModel,
    pair: &SentencePair,
    layer: usize,
    threshold: f32,
) -> Result<AlignmentMatrix> {
    check_nonempty(pair)?;
    let hx = model.embed_sentence(ids(pair, &pair.src)?, &[layer])?.remove(0);
    let hy = model.embed_sentence(ids(pair, &pair.tgt)?, &[layer])?.remove(0);
    let s = similarity(&hx, &hy)?;
    Ok(threshold_intersection(&row_softmax(&s)?, &col_softmax(&s)?, threshold))
}

/// `L` for one pair, forward only.
pub fn pair_objective(
    model: &EncoderModel,
    pair: &SentencePair,
    labels: Labels<'_>,
    layer: usize,
) -> Result<f64> {
    check_nonempty(pair)?;
    let hx = model.embed_sentence(ids(pair, &pair.src)?, &[layer])?.remove(0);
    let hy = model.embed_sentence(ids(pair, &pair.tgt)?, &[layer])?.remove(0);
    let s = similarity(&hx, &hy)?;
    let (sxy, syx_t) = (row_softmax(&s)?, col_softmax(&s)?);
    let target = labels_for(labels, pair, &sxy, &syx_t)?;
    alignment_loss(&sxy, &syx_t, &target)
}

/// `L` for one pair and the gradient of `−L` with respect to every adapter.
/// Pseudo-labels are treated as constants.
pub fn pair_gradient(
    model: &EncoderModel,
    pair: &SentencePair,
    labels: Labels<'_>,
    layer: usize,
) -> Result<(f64, AdapterGrads)> {
    check_nonempty(pair)?;
    let config = model.config();
    let (seq_x, range_x) = config.with_special_tokens(ids(pair, &pair.src)?);
    let (seq_y, range_y) = config.with_special_tokens(ids(pair, &pair.tgt)?);
    let (hid_x, tape_x) = model.encode_with_tape(&seq_x, layer)?;
    let (hid_y, tape_y) = model.encode_with_tape(&seq_y, layer)?;
    let hx = hid_x.last().slice_rows(range_x.start, range_x.end);
    let hy = hid_y.last().slice_rows(range_y.start, range_y.end);

    let s = similarity(&hx, &hy)?;
    let (sxy, syx_t) = (row_softmax(&s)?, col_softmax(&s)?);
    let target = labels_for(labels, pair, &sxy, &syx_t)?;
    let value = alignment_loss(&sxy, &syx_t, &target)?;
    let g_s = negative_loss_grad(&sxy, &syx_t, &target)?;

    let embed_grad = |rows: usize, range: std::ops::Range<usize>, g: Tensor| {
        let mut full = Tensor::zeros(&[rows, config.hidden_dim]);
        for (k, r) in range.enumerate() {
            full.row_mut(r).copy_from_slice(g.row(k));
        }
        full
    };
    let g_x = embed_grad(seq_x.len(), range_x, matmul(&g_s, &hy)?);
    let g_y = embed_grad(seq_y.len(), range_y, matmul(&g_s.transpose(), &hx)?);
    let mut grads = model.backward(&tape_x, &g_x)?;
    grads.add_assign(&model.backward(&tape_y, &g_y)?)?;
    Ok((value, grads))
}

/// Seeded epoch-wise shuffling; batches wrap across epoch boundaries.
#[derive(Clone, Debug)]
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Batcher { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub optimizer: AdamW,
    pub batcher: Batcher,
    /// Batch mean of `−L` after each step, indexed by step − 1.
    pub losses: Vec<f64>,
    /// `(step, AER)` for every validation run, step 0 included.
    pub validation: Vec<(usize, f64)>,
    pub best: Option<(usize, f64)>,
}

impl TrainState {
    /// `step,loss`
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (k, l) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "{},{l}", k + 1);
        }
        out
    }

    /// `step,aer`
    pub fn validation_csv(&self) -> String {
        let mut out = String::from("step,aer\n");
        for (s, a) in &self.validation {
            let _ = writeln!(out, "{s},{a}");
        }
        out
    }
}

/// Trains with no validation set.
pub fn train(model: &mut EncoderModel, pairs: &[SentencePair], config: &TrainConfig) -> Result<TrainState> {
    train_with_validation(model, pairs, &[], config)
}

fn validation_aer(model: &EncoderModel, valid: &[SentencePair], config: &TrainConfig) -> Result<f64> {
    let preds = align_corpus(model, valid, config.extract_layer, config.threshold)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let golds: Vec<AlignmentSet> = valid.iter().map(|p| p.gold.clone().unwrap_or_default()).collect();
    Ok(corpus_aer(&preds, &golds)?.total.aer)
}

pub fn train_with_validation(
    model: &mut EncoderModel,
    pairs: &[SentencePair],
    valid: &[SentencePair],
    config: &TrainConfig,
) -> Result<TrainState> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    if config.extract_layer > model.config().num_layers {
        return Err(Error::Config(format!(
            "extract layer {} exceeds the model's {} layers",
            config.extract_layer,
            model.config().num_layers
        )));
    }
    for p in pairs {
        check_nonempty(p)?;
        if config.mode == TrainMode::Supervised && p.gold.is_none() {
            return Err(Error::Data(format!(
                "supervised training needs gold alignments, pair `{}` has none",
                p.id
            )));
        }
    }
    if config.validate_every.is_some() || config.keep_best {
        if valid.is_empty() {
            return Err(Error::Config("validation requested without a validation set".into()));
        }
        if let Some(p) = valid.iter().find(|p| p.gold.is_none()) {
            return Err(Error::Data(format!("validation pair `{}` has no gold alignment", p.id)));
        }
    }

    let mut state = TrainState {
        step: 0,
        optimizer: AdamW::new(model.adapters(), config.learning_rate),
        batcher: Batcher::new(pairs.len(), config.seed),
        losses: Vec::with_capacity(config.max_steps),
        validation: Vec::new(),
        best: None,
    };
    let validating = !valid.is_empty() && (config.validate_every.is_some() || config.keep_best);
    let mut best_adapters: Option<AdapterSet> = None;
    let mut run_validation = |model: &EncoderModel, state: &mut TrainState| -> Result<()> {
        let aer = validation_aer(model, valid, config)?;
        log::info!("step {}: validation AER {:.4}", state.step, aer);
        state.validation.push((state.step, aer));
        if state.best.is_none_or(|(_, b)| aer < b) {
            state.best = Some((state.step, aer));
            if config.keep_best {
                best_adapters = Some(model.adapters().clone());
            }
        }
        Ok(())
    };
    if validating {
        run_validation(model, &mut state)?;
    }

    while state.step < config.max_steps {
        let batch = state.batcher.next_batch(config.batch_size);
        let frozen: &EncoderModel = model;
        let results: Vec<(f64, AdapterGrads)> = batch
            .par_iter()
            .map(|&k| {
                let pair = &pairs[k];
                let labels = match config.mode {
                    TrainMode::Supervised => Labels::Gold(pair.gold.as_ref().expect("checked above")),
                    TrainMode::SelfSupervised => Labels::Pseudo { threshold: config.threshold },
                };
                pair_gradient(frozen, pair, labels, config.extract_layer)
            })
            .collect::<Result<_>>()?;

        let mut grads = model.adapters().zeros_like();
        let mut total = 0.0;
        for (value, g) in &results {
            total -= value;
            grads.add_assign(g)?;
        }
        let b = batch.len() as f64;
        grads.scale_in_place((1.0 / b) as f32);
        state.optimizer.step(model.adapters_mut(), &grads)?;
        state.step += 1;
        state.losses.push(total / b);
        log::debug!("step {}: loss {:.6}", state.step, total / b);

        let due = config
            .validate_every
            .is_some_and(|every| state.step.is_multiple_of(every) || state.step == config.max_steps);
        if validating && due {
            run_validation(model, &mut state)?;
        }
    }
    if let Some(best) = best_adapters {
        model.set_adapters(best)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aligner::{extract_subword_alignment, ContextualEmbedder};
    use crate::encoder::EncoderConfig;

    fn pair(id: &str, src: &[u32], tgt: &[u32], gold: &str) -> SentencePair {
        let side = |ids: &[u32]| Side::from_words(ids.iter().map(|i| format!("w{i}"))).with_ids(ids.to_vec());
        SentencePair::new(id, side(src), side(tgt)).with_gold(AlignmentSet::parse_pharaoh(gold, 0).unwrap())
    }

    fn corpus() -> Vec<SentencePair> {
        vec![
            pair("a", &[5, 6, 7], &[5, 6, 7], "0-0 1-1 2-2"),
            pair("b", &[8, 9], &[9, 8], "0-1 1-0"),
            pair("c", &[10, 11, 12, 13], &[10, 12], "0-0 2-1"),
        ]
    }

    fn model() -> EncoderModel {
        let mut m = EncoderModel::random(EncoderConfig::tiny(), 1).unwrap();
        m.init_adapters(2);
        m
    }

    fn config(steps: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 2,
            max_steps: steps,
            extract_layer: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_leave_the_model_alone() {
        let mut m = model();
        let before = m.clone();
        let state = train(&mut m, &corpus(), &config(0)).unwrap();
        assert_eq!(m, before);
        assert!(state.losses.is_empty());
    }

    #[test]
    fn only_adapters_change_and_runs_repeat() {
        let mut a = model();
        let before = a.clone();
        let sa = train(&mut a, &corpus(), &config(5)).unwrap();
        assert_eq!(a.base(), before.base());
        assert_ne!(a.adapters(), before.adapters());
        let mut b = model();
        let sb = train(&mut b, &corpus(), &config(5)).unwrap();
        assert_eq!(sa.loss_csv(), sb.loss_csv());
        assert_eq!(a, b);
        assert_eq!(sa.losses.len(), 5);
        assert!(sa.loss_csv().starts_with("step,loss\n1,"));
    }

    #[test]
    fn input_errors() {
        let mut m = model();
        assert!(matches!(train(&mut m, &[], &config(1)), Err(Error::Data(_))));
        let mut no_gold = corpus();
        no_gold[1].gold = None;
        let err = train(&mut m, &no_gold, &config(1)).unwrap_err();
        assert!(err.to_string().contains("`b`"));
        let cfg = TrainConfig { mode: TrainMode::SelfSupervised, ..config(1) };
        assert!(train(&mut m, &no_gold, &cfg).is_ok());
        let cfg = TrainConfig { extract_layer: 3, ..config(1) };
        assert!(matches!(train(&mut m, &corpus(), &cfg), Err(Error::Config(_))));
        let cfg = TrainConfig { batch_size: 0, ..config(1) };
        assert!(train(&mut m, &corpus(), &cfg).is_err());
        let cfg = TrainConfig { keep_best: true, ..config(1) };
        assert!(train(&mut m, &corpus(), &cfg).is_err());
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut b = Batcher::new(5, 3);
        let mut seen = b.next_batch(3);
        seen.extend(b.next_batch(2));
        seen.sort();
        assert_eq!(seen, [0, 1, 2, 3, 4]);
        assert_eq!(b.next_batch(7).len(), 7);
        let mut again = Batcher::new(5, 3);
        let mut first = Batcher::new(5, 3);
        assert_eq!(again.next_batch(12), first.next_batch(12));
    }

    #[test]
    fn pseudo_labels_match_extraction_at_identity() {
        let m = model();
        for p in corpus() {
            let labels = make_pseudo_labels(&m, &p, 2, 0.1).unwrap();
            let (hx, hy) = m.embed_pair(&p, &[2]).unwrap().remove(0);
            let expect = extract_subword_alignment(&similarity(&hx, &hy).unwrap(), 0.1).unwrap();
            assert_eq!(labels, expect);
            let mut zero = m.clone();
            zero.zero_adapters();
            assert_eq!(make_pseudo_labels(&zero, &p, 2, 0.1).unwrap(), labels);
        }
    }

    #[test]
    fn forward_and_gradient_paths_agree_on_value() {
        let m = model();
        for p in corpus() {
            let gold = p.gold.as_ref().unwrap();
            let a = pair_objective(&m, &p, Labels::Gold(gold), 2).unwrap();
            let (b, _) = pair_gradient(&m, &p, Labels::Gold(gold), 2).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn keep_best_restores_best_adapters() {
        let mut m = model();
        let cfg = TrainConfig { validate_every: Some(2), keep_best: true, ..config(4) };
        let valid = corpus();
        let state = train_with_validation(&mut m, &corpus(), &valid, &cfg).unwrap();
        assert_eq!(state.validation.iter().map(|v| v.0).collect::<Vec<_>>(), [0, 2, 4]);
        let (_, best) = state.best.unwrap();
        assert_eq!(validation_aer(&m, &valid, &cfg).unwrap(), best);
    }
}
