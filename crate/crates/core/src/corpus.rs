//! Parallel corpora (JSONL), gold alignments (Pharaoh) and precomputed
//! embeddings (`ACWT`).
//!
//! One JSON object per corpus line:
//!
//! ```json
//! {"id":"p1","lang":"de-en","src":["▁das","▁haus"],"tgt":["▁the","▁ho","use"],
//!  "src_ids":[17,40],"tgt_ids":[9,11,12],"src_words":[0,1],"tgt_words":[0,1,1],
//!  "gold":"0-0 1-1"}
//! ```
//!
//! `lang`, `src_ids`, `tgt_ids` and `gold` are optional. Word maps give the
//! 0-based word index of each subword; they start at 0 and never skip a word.
//! Readers reject malformed input and report the line it came from.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentSet;
use crate::container::TensorFile;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One side of a sentence pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Side {
    pub tokens: Vec<String>,
    pub ids: Option<Vec<u32>>,
    pub word_map: Vec<usize>,
}

impl Side {
    pub fn new(tokens: Vec<String>, ids: Option<Vec<u32>>, word_map: Vec<usize>) -> Self {
        Side {
            tokens,
            ids,
            word_map,
        }
    }

    /// One subword per word.
    pub fn from_words<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let word_map = (0..tokens.len()).collect();
        Side {
            tokens,
            ids: None,
            word_map,
        }
    }

    pub fn with_ids(mut self, ids: Vec<u32>) -> Self {
        self.ids = Some(ids);
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_words(&self) -> usize {
        self.word_map.last().map_or(0, |&w| w + 1)
    }

    pub fn validate(&self, side: &str) -> std::result::Result<(), String> {
        if self.word_map.len() != self.tokens.len() {
            return Err(format!(
                "{side} word map has {} entries for {} subwords",
                self.word_map.len(),
                self.tokens.len()
            ));
        }
        if let Some(ids) = &self.ids {
            if ids.len() != self.tokens.len() {
                return Err(format!(
                    "{side} has {} token ids for {} subwords",
                    ids.len(),
                    self.tokens.len()
                ));
            }
        }
        validate_word_map(&self.word_map).map_err(|e| format!("{side} word map {e}"))
    }
}

/// Word maps must start at 0 and step by 0 or 1.
pub fn validate_word_map(map: &[usize]) -> std::result::Result<(), String> {
    let mut expected_max = 0usize;
    for (k, &w) in map.iter().enumerate() {
        let ok = if k == 0 {
            w == 0
        } else {
            w == expected_max || w == expected_max + 1
        };
        if !ok {
            return Err(format!(
                "is not contiguous and non-decreasing from 0 (entry {k} is {w})"
            ));
        }
        expected_max = w;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub id: String,
    /// Language pair tag such as `de-en`, used for per-language breakdowns.
    pub lang: Option<String>,
    pub src: Side,
    pub tgt: Side,
    pub gold: Option<AlignmentSet>,
}

impl SentencePair {
    pub fn new(id: impl Into<String>, src: Side, tgt: Side) -> Self {
        SentencePair {
            id: id.into(),
            lang: None,
            src,
            tgt,
            gold: None,
        }
    }

    pub fn with_gold(mut self, gold: AlignmentSet) -> Self {
        self.gold = Some(gold);
        self
    }

    pub fn with_lang(mut self, lang: impl Into<String>) -> Self {
        self.lang = Some(lang.into());
        self
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.src.validate("source")?;
        self.tgt.validate("target")?;
        if let Some(gold) = &self.gold {
            if let Some((i, j)) = gold.max_indices() {
                if i >= self.src.num_words() || j >= self.tgt.num_words() {
                    return Err(format!(
                        "gold link {i}-{j} outside sentence of {}x{} words",
                        self.src.num_words(),
                        self.tgt.num_words()
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lang: Option<String>,
    src: Vec<String>,
    tgt: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    src_ids: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tgt_ids: Option<Vec<u32>>,
    src_words: Vec<usize>,
    tgt_words: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold: Option<String>,
}

impl Record {
    fn into_pair(self) -> std::result::Result<SentencePair, String> {
        let gold = self
            .gold
            .map(|g| AlignmentSet::parse_pharaoh(&g, 0))
            .transpose()?;
        let pair = SentencePair {
            id: self.id,
            lang: self.lang,
            src: Side::new(self.src, self.src_ids, self.src_words),
            tgt: Side::new(self.tgt, self.tgt_ids, self.tgt_words),
            gold,
        };
        pair.validate()?;
        Ok(pair)
    }

    fn from_pair(p: &SentencePair) -> Self {
        Record {
            id: p.id.clone(),
            lang: p.lang.clone(),
            src: p.src.tokens.clone(),
            tgt: p.tgt.tokens.clone(),
            src_ids: p.src.ids.clone(),
            tgt_ids: p.tgt.ids.clone(),
            src_words: p.src.word_map.clone(),
            tgt_words: p.tgt.word_map.clone(),
            gold: p.gold.as_ref().map(AlignmentSet::to_pharaoh),
        }
    }
}

/// Parsed corpus plus anything worth telling the operator about.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<SentencePair>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ReadOptions {
    /// Drop invalid records with a warning instead of failing.
    pub skip_bad: bool,
}

pub fn read_corpus_jsonl(path: impl AsRef<Path>) -> Result<Corpus> {
    read_corpus_jsonl_with(path, ReadOptions::default())
}

pub fn read_corpus_jsonl_with(path: impl AsRef<Path>, opts: ReadOptions) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus_jsonl(&text, &path.display().to_string(), opts)
}

/// Parses JSONL text; `context` names the source in messages.
pub fn parse_corpus_jsonl(text: &str, context: &str, opts: ReadOptions) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Record>(line)
            .map_err(|e| (true, e.to_string()))
            .and_then(|r| r.into_pair().map_err(|e| (false, e)))
            .and_then(|p| match seen.get(&p.id) {
                Some(first) => Err((false, format!("duplicate id `{}` (first seen on line {first})", p.id))),
                None => Ok(p),
            });
        match parsed {
            Ok(p) => {
                seen.insert(p.id.clone(), lineno);
                corpus.pairs.push(p);
            }
            Err((syntax, msg)) => {
                let context = format!("{context}:{lineno}");
                if opts.skip_bad {
                    corpus.warnings.push(format!("{context}: skipped record: {msg}"));
                } else if syntax {
                    return Err(Error::format(context, msg));
                } else {
                    return Err(Error::Data(format!("{context}: {msg}")));
                }
            }
        }
    }
    if corpus.pairs.is_empty() {
        corpus.warnings.push(format!("{context}: corpus is empty"));
    }
    for w in &corpus.warnings {
        log::warn!("{w}");
    }
    Ok(corpus)
}

pub fn corpus_to_jsonl(pairs: &[SentencePair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(&Record::from_pair(p)).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_corpus_jsonl(path: impl AsRef<Path>, pairs: &[SentencePair]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, corpus_to_jsonl(pairs)).map_err(|e| Error::io(path, e))
}

/// One alignment set per line; blank lines are valid (unaligned pairs).
pub fn read_gold_pharaoh(path: impl AsRef<Path>, index_base: usize) -> Result<Vec<AlignmentSet>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(k, line)| {
            AlignmentSet::parse_pharaoh(line, index_base)
                .map_err(|msg| Error::format(format!("{}:{}", path.display(), k + 1), msg))
        })
        .collect()
}

pub fn write_pharaoh(path: impl AsRef<Path>, sets: &[AlignmentSet]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for s in sets {
        writeln!(out, "{s}").expect("writing to a Vec cannot fail");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-layer content-subword embeddings for one sentence pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SentenceEmbeddings {
    pub src: BTreeMap<usize, Tensor>,
    pub tgt: BTreeMap<usize, Tensor>,
}

/// Precomputed embeddings keyed by pair id, stored as
/// `sent/{id}/{src|tgt}/layer{k}` tensors of shape `subwords × d`.
/// Rows cover content subwords only; special tokens are already removed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingStore {
    entries: IndexMap<String, SentenceEmbeddings>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, emb: SentenceEmbeddings) {
        self.entries.insert(id.into(), emb);
    }

    pub fn get(&self, id: &str) -> Option<&SentenceEmbeddings> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Layers present for every pair (all pairs carry the same set once validated).
    pub fn layers(&self) -> Vec<usize> {
        self.entries
            .values()
            .next()
            .map(|e| e.src.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn hidden_dim(&self) -> Option<usize> {
        self.entries
            .values()
            .flat_map(|e| e.src.values())
            .next()
            .map(Tensor::cols)
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = Vec::new();
        for (id, e) in &self.entries {
            for (side, layers) in [("src", &e.src), ("tgt", &e.tgt)] {
                for (k, t) in layers {
                    f.push((format!("sent/{id}/{side}/layer{k}"), t.clone()));
                }
            }
        }
        f.into_iter().collect()
    }

    pub fn from_tensor_file(file: &TensorFile, context: &str) -> Result<Self> {
        let mut entries: IndexMap<String, SentenceEmbeddings> = IndexMap::new();
        let mut dim: Option<usize> = None;
        for (name, t) in file.iter() {
            let (id, side, layer) = parse_embedding_name(name)
                .ok_or_else(|| Error::format(context, format!("unexpected tensor name `{name}`")))?;
            let (_, d) = t.dims2().map_err(|_| {
                Error::format(context, format!("tensor `{name}` must be rank 2, got {:?}", t.shape()))
            })?;
            match dim {
                None => dim = Some(d),
                Some(expected) if expected != d => {
                    return Err(Error::format(
                        context,
                        format!("tensor `{name}` has width {d}, earlier tensors have {expected}"),
                    ))
                }
                _ => {}
            }
            let e = entries.entry(id.to_string()).or_default();
            let slot = if side == "src" { &mut e.src } else { &mut e.tgt };
            slot.insert(layer, t.clone());
        }
        let mut reference: Option<Vec<usize>> = None;
        for (id, e) in &entries {
            let src: Vec<usize> = e.src.keys().copied().collect();
            let tgt: Vec<usize> = e.tgt.keys().copied().collect();
            if src.is_empty() || tgt.is_empty() {
                let missing = if src.is_empty() { "src" } else { "tgt" };
                return Err(Error::format(context, format!("pair `{id}` has no {missing} embeddings")));
            }
            if src != tgt {
                return Err(Error::format(
                    context,
                    format!("pair `{id}` has layers {src:?} for src but {tgt:?} for tgt"),
                ));
            }
            match &reference {
                None => reference = Some(src),
                Some(r) if *r != src => {
                    return Err(Error::format(
                        context,
                        format!("pair `{id}` has layers {src:?}, earlier pairs have {r:?}"),
                    ))
                }
                _ => {}
            }
        }
        Ok(EmbeddingStore { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_tensor_file(&TensorFile::read(path)?, &path.display().to_string())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor_file().write(path)
    }
}

fn parse_embedding_name(name: &str) -> Option<(&str, &str, usize)> {
    let rest = name.strip_prefix("sent/")?;
    let (rest, layer) = rest.rsplit_once('/')?;
    let layer = layer.strip_prefix("layer")?.parse().ok()?;
    let (id, side) = rest.rsplit_once('/')?;
    if id.is_empty() || !(side == "src" || side == "tgt") {
        return None;
    }
    Some((id, side, layer))
}
