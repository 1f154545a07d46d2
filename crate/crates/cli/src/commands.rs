use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use wordalign::aligner::{align_corpus, similarity};
use wordalign::corpus::{read_corpus_jsonl_with, read_gold_pharaoh, Corpus, ReadOptions};
use wordalign::metrics::{corpus_aer, layer_sweep, rep_analysis_csv, rep_analysis_layers};
use wordalign::trainer::{train_with_validation, TrainConfig};
use wordalign::{
    AlignmentSet, ContextualEmbedder, EmbeddingStore, EncoderConfig, EncoderModel, Error, Result,
    SentencePair, DEFAULT_LAYER,
};

use crate::picture::{curves_ppm, heatmap_pgm};
use crate::settings::{effective, write_echo};
use crate::{AnalyzeArgs, Cli, Command, EvalArgs, ExtractArgs, InitArgs, Source, TrainArgs};

pub fn run(cli: Cli, matches: &ArgMatches) -> Result<()> {
    let mut settings = effective(matches);
    let workers = match &cli.command {
        Command::Extract(a) => a.common.workers,
        Command::Train(a) => a.common.workers,
        Command::Eval(a) => a.common.workers,
        Command::Analyze(a) => a.common.workers,
        Command::Init(a) => a.common.workers,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| match cli.command {
        Command::Extract(a) => extract(a, &mut settings),
        Command::Train(a) => train(a, &mut settings),
        Command::Eval(a) => eval(a, &mut settings),
        Command::Analyze(a) => analyze(a, &mut settings),
        Command::Init(a) => init(a, &mut settings),
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(io_err(&path))?;
    Ok(path)
}

fn read_corpus(path: &Path, skip_bad: bool) -> Result<Corpus> {
    let corpus = read_corpus_jsonl_with(path, ReadOptions { skip_bad })?;
    for w in &corpus.warnings {
        log::warn!("{w}");
    }
    Ok(corpus)
}

enum Loaded {
    Model(Box<EncoderModel>),
    Store(EmbeddingStore),
}

impl Loaded {
    fn open(source: &Source) -> Result<Self> {
        match (&source.model, &source.embeddings) {
            (Some(m), _) => {
                let mut model = EncoderModel::load(m)?;
                if let Some(a) = &source.adapters {
                    model.load_adapters(a)?;
                }
                Ok(Loaded::Model(Box::new(model)))
            }
            (None, Some(e)) => Ok(Loaded::Store(EmbeddingStore::read(e)?)),
            (None, None) => Err(Error::Config("one of --model or --embeddings is required".into())),
        }
    }

    fn embedder(&self) -> &dyn ContextualEmbedder {
        match self {
            Loaded::Model(m) => m.as_ref(),
            Loaded::Store(s) => s,
        }
    }

    fn resolve_layer(&self, requested: Option<usize>) -> Result<usize> {
        let layer = requested.unwrap_or(match self {
            Loaded::Model(m) => m.config().extract_layer,
            Loaded::Store(_) => DEFAULT_LAYER,
        });
        let available = self.embedder().available_layers();
        if !available.contains(&layer) {
            return Err(Error::Config(format!(
                "layer {layer} is not available (have {})",
                available.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(layer)
    }
}

fn extract(args: ExtractArgs, settings: &mut BTreeMap<String, String>) -> Result<()> {
    let out = &args.common.out;
    let source = Loaded::open(&args.source)?;
    let layer = source.resolve_layer(args.layer)?;
    settings.insert("layer".into(), layer.to_string());
    let corpus = read_corpus(&args.corpus, args.skip_bad)?;

    let mut text = String::new();
    let mut skipped = String::new();
    for (pair, result) in corpus
        .pairs
        .iter()
        .zip(align_corpus(source.embedder(), &corpus.pairs, layer, args.threshold))
    {
        match result {
            Ok(set) => text.push_str(&set.to_pharaoh()),
            Err(e) if args.skip_bad => {
                log::warn!("skipping pair `{}`: {e}", pair.id);
                skipped.push_str(&format!("{}\t{e}\n", pair.id));
            }
            Err(e) => return Err(e),
        }
        text.push('\n');
    }
    prepare_out(out)?;
    write(out, "alignments.txt", text)?;
    if !skipped.is_empty() {
        write(out, "skipped.txt", skipped)?;
    }
    write_echo(out, settings)
}

fn train(args: TrainArgs, settings: &mut BTreeMap<String, String>) -> Result<()> {
    let out = &args.common.out;
    let mut model = EncoderModel::load(&args.model)?;
    match &args.adapters {
        Some(a) => model.load_adapters(a)?,
        None => model.init_adapters(args.seed),
    }
    let layer = args.layer.unwrap_or(model.config().extract_layer);
    settings.insert("layer".into(), layer.to_string());
    let config = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch_size,
        max_steps: args.steps,
        seed: args.seed,
        mode: args.mode,
        threshold: args.threshold,
        extract_layer: layer,
        validate_every: args.validate_every,
        keep_best: args.keep_best,
    };
    let corpus = read_corpus(&args.corpus, args.skip_bad)?;
    let valid = match &args.valid {
        Some(v) => read_corpus(v, args.skip_bad)?.pairs,
        None => Vec::new(),
    };
    let state = train_with_validation(&mut model, &corpus.pairs, &valid, &config)?;

    prepare_out(out)?;
    model.save_adapters(out.join("adapters.acwt"))?;
    write(out, "loss.csv", state.loss_csv())?;
    if !state.validation.is_empty() {
        write(out, "validation.csv", state.validation_csv())?;
    }
    if let Some(last) = state.losses.last() {
        println!("step {}: loss {last:.6}", state.step);
    }
    if let Some((step, aer)) = state.best {
        println!("best validation AER {aer:.4} at step {step}");
    }
    write_echo(out, settings)
}

fn eval(args: EvalArgs, settings: &mut BTreeMap<String, String>) -> Result<()> {
    let out = &args.common.out;
    let preds = read_gold_pharaoh(&args.pred, 0)?;
    let (golds, ids): (Vec<AlignmentSet>, Vec<String>) = match (&args.gold, &args.corpus) {
        (Some(g), _) => {
            let golds = read_gold_pharaoh(g, args.gold_index_base as usize)?;
            let ids = (1..=golds.len()).map(|k| k.to_string()).collect();
            (golds, ids)
        }
        (None, Some(c)) => {
            let corpus = read_corpus(c, false)?;
            let golds = corpus
                .pairs
                .iter()
                .map(|p| {
                    p.gold
                        .clone()
                        .ok_or_else(|| Error::Data(format!("pair `{}` has no gold alignment", p.id)))
                })
                .collect::<Result<_>>()?;
            (golds, corpus.pairs.into_iter().map(|p| p.id).collect())
        }
        (None, None) => return Err(Error::Config("one of --gold or --corpus is required".into())),
    };
    let report = corpus_aer(&preds, &golds)?;
    if report.total.degenerate {
        log::warn!("no predicted and no sure gold links, AER defined as 0");
    }
    prepare_out(out)?;
    write(out, "report.csv", report.to_csv(&ids))?;
    let table = report.to_table();
    write(out, "report.txt", &table)?;
    print!("{table}");
    write_echo(out, settings)
}

fn heatmap_csv(values: &wordalign::Tensor, pair: &SentencePair) -> String {
    let quote = |s: &str| format!("\"{}\"", s.replace('"', "\"\""));
    let mut out = String::from("\"\"");
    for t in &pair.tgt.tokens {
        out.push(',');
        out.push_str(&quote(t));
    }
    out.push('\n');
    for (i, s) in pair.src.tokens.iter().enumerate() {
        out.push_str(&quote(s));
        for v in values.row(i) {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    out
}

/// Cosine similarity between every source and target subword.
fn cosine_matrix(hx: &wordalign::Tensor, hy: &wordalign::Tensor) -> Result<wordalign::Tensor> {
    let unit = |t: &wordalign::Tensor| {
        let mut t = t.clone();
        for i in 0..t.rows() {
            let row = t.row_mut(i);
            let norm = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
            }
        }
        t
    };
    similarity(&unit(hx), &unit(hy))
}

fn analyze(args: AnalyzeArgs, settings: &mut BTreeMap<String, String>) -> Result<()> {
    let out = &args.common.out;
    let source = Loaded::open(&args.source)?;
    let embedder = source.embedder();
    let layer = source.resolve_layer(args.layer)?;
    settings.insert("layer".into(), layer.to_string());
    let corpus = read_corpus(&args.corpus, false)?;
    let pairs = &corpus.pairs;

    let sweep = layer_sweep(embedder, pairs, args.threshold)?;
    let layers = embedder.available_layers();
    let rep = rep_analysis_layers(embedder, pairs, &layers, args.seed)?;

    prepare_out(out)?;
    write(out, "layer_sweep.csv", sweep.to_csv())?;
    let table = sweep.to_table();
    write(out, "layer_sweep.txt", &table)?;
    write(out, "rep_analysis.csv", rep_analysis_csv(&rep))?;
    let s_bi: Vec<f64> = rep.iter().map(|r| r.s_bi).collect();
    let s_mono: Vec<f64> = rep.iter().map(|r| r.s_mono).collect();
    write(out, "curves.ppm", curves_ppm(&[(&s_bi, [200, 30, 30]), (&s_mono, [30, 60, 200])], 640, 360))?;

    if args.heatmaps > 0 {
        let dir = out.join("heatmaps");
        prepare_out(&dir)?;
        for (k, pair) in pairs.iter().take(args.heatmaps).enumerate() {
            let (hx, hy) = embedder.embed_pair(pair, &[layer])?.remove(0);
            let cos = cosine_matrix(&hx, &hy)?;
            write(&dir, &format!("{k:04}.pgm"), heatmap_pgm(&cos, -1.0, 1.0, 16))?;
            write(&dir, &format!("{k:04}.csv"), heatmap_csv(&cos, pair))?;
        }
    }
    print!("{table}");
    if let Some(best) = sweep.best_layer() {
        println!("best layer: {best}");
    }
    write_echo(out, settings)
}

fn init(args: InitArgs, settings: &mut BTreeMap<String, String>) -> Result<()> {
    let out = &args.common.out;
    let special = |id: u32| (args.vocab > 2).then_some(id);
    let extract_layer = args.extract_layer.unwrap_or(args.layers);
    settings.insert("extract-layer".into(), extract_layer.to_string());
    let config = EncoderConfig {
        num_layers: args.layers,
        hidden_dim: args.hidden,
        num_heads: args.heads,
        ffn_dim: args.ffn,
        adapter_dim: args.adapter_dim,
        vocab_size: args.vocab,
        max_positions: args.max_positions,
        type_vocab_size: 2,
        extract_layer,
        cls_id: special(1),
        sep_id: special(2),
    };
    let model = EncoderModel::random(config, args.seed)?;
    prepare_out(out)?;
    model.save(out.join("model.acwt"))?;
    write_echo(out, settings)
}
