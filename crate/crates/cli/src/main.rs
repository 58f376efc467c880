use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use deepgru::bpe::{learn_bpe, BpeModel};
use deepgru::gradcheck::check_model;
use deepgru::io::{
    load_checkpoint, load_corpus, parse_config_over, read_features, read_lines, read_text, save_checkpoint,
    write_atomic,
};
use deepgru::metrics::bleu4;
use deepgru::model::Example;
use deepgru::search::{translate_all, validation_bleu, Combine, DEFAULT_BEAM};
use deepgru::toy::{try_generate, ToySpec};
use deepgru::trainer::{format_log, train, TrainConfig};
use deepgru::vocab::Vocab;
use deepgru::{seeded, Batch, Model, ModelConfig, Variant};

#[derive(Parser)]
#[command(name = "deepgru", version, about = "Multimodal NMT with conditional-GRU decoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn BPE merges from one or more text files.
    LearnBpe {
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        merges: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Segment a text file with learned merges.
    ApplyBpe {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Build a vocabulary file (specials first) from tokenised text.
    BuildVocab {
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    Train(TrainArgs),
    Translate(TranslateArgs),
    /// Corpus BLEU-4 of a hypothesis file against a reference file.
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Finite-difference check of a randomly initialised desk-size model.
    Gradcheck {
        #[arg(long, value_enum, default_value = "deepgru")]
        variant: VariantArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        no_biases: bool,
    },
    /// Write a synthetic copy-task corpus and feature files.
    MakeToyData(ToyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Baseline,
    Deepgru,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Baseline => Variant::Baseline,
            VariantArg::Deepgru => Variant::DeepGru,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CombineArg {
    Arithmetic,
    Geometric,
}

/// Train a model; the best checkpoint by validation BLEU is kept.
#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// `key = value` settings applied over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_updates: Option<usize>,
    #[arg(long)]
    train_src: PathBuf,
    #[arg(long)]
    train_tgt: PathBuf,
    #[arg(long)]
    train_feat: PathBuf,
    #[arg(long)]
    valid_src: PathBuf,
    #[arg(long)]
    valid_tgt: PathBuf,
    #[arg(long)]
    valid_feat: PathBuf,
    #[arg(long)]
    src_bpe: Option<PathBuf>,
    #[arg(long)]
    tgt_bpe: Option<PathBuf>,
    /// Vocabularies; built from the (segmented) training side when absent.
    #[arg(long)]
    src_vocab: Option<PathBuf>,
    #[arg(long)]
    tgt_vocab: Option<PathBuf>,
    /// Checkpoint path. Vocabularies are written next to it.
    #[arg(long)]
    output: PathBuf,
    /// Validation log: update, mean training loss, validation BLEU.
    #[arg(long)]
    log: Option<PathBuf>,
}

/// Translate source sentences with one model or an ensemble.
#[derive(Args)]
struct TranslateArgs {
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    beam: usize,
    /// Fixed length cap; defaults to twice the source length plus five.
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, value_enum, default_value = "arithmetic")]
    combine: CombineArg,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    feats: PathBuf,
    #[arg(long)]
    src_bpe: Option<PathBuf>,
    /// Defaults to the vocabularies stored next to the first model.
    #[arg(long)]
    src_vocab: Option<PathBuf>,
    #[arg(long)]
    tgt_vocab: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    /// Pairs held out as `valid.*`; the rest go to `train.*`.
    #[arg(long, default_value_t = 0)]
    valid: usize,
    #[arg(long, default_value_t = 30)]
    vocab: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    #[arg(long, default_value_t = 32)]
    feat_dim: usize,
    /// Probability of corrupting each source word.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Features encode the target words instead of random noise.
    #[arg(long)]
    informative: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn vocab_paths(checkpoint: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = checkpoint.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".src.vocab"), with(".tgt.vocab"))
}

fn load_bpe(path: &Option<PathBuf>) -> Result<Option<BpeModel>> {
    Ok(path.as_deref().map(BpeModel::load).transpose()?)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        cfg = parse_config_over(&read_text(path)?, cfg).with_context(|| format!("{}", path.display()))?;
    }
    if let Some(v) = a.variant {
        cfg.model.variant = v.into();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.max_updates {
        cfg.max_updates = n;
    }

    let (src_bpe, tgt_bpe) = (load_bpe(&a.src_bpe)?, load_bpe(&a.tgt_bpe)?);
    let vocabs = match (&a.src_vocab, &a.tgt_vocab) {
        (Some(s), Some(t)) => Some((Vocab::load(s)?, Vocab::load(t)?)),
        (None, None) => None,
        _ => bail!("give both --src-vocab and --tgt-vocab or neither"),
    };
    let bpe = (src_bpe.as_ref(), tgt_bpe.as_ref());
    let data = load_corpus(&a.train_src, &a.train_tgt, &a.train_feat, bpe, vocabs)?;
    let valid = load_corpus(
        &a.valid_src,
        &a.valid_tgt,
        &a.valid_feat,
        bpe,
        Some((data.src_vocab.clone(), data.tgt_vocab.clone())),
    )?;
    if valid.feat_dim() != data.feat_dim() {
        bail!("training and validation features differ in dimension");
    }
    cfg.model.src_vocab = data.src_vocab.len();
    cfg.model.tgt_vocab = data.tgt_vocab.len();
    cfg.model.feat_dim = data.feat_dim();
    cfg.validate()?;

    eprintln!(
        "training {} on {} pairs (vocab {}/{}, {} features)",
        cfg.model.variant,
        data.len(),
        cfg.model.src_vocab,
        cfg.model.tgt_vocab,
        cfg.model.feat_dim
    );
    let mut rng = seeded(cfg.seed);
    let model = Model::init(cfg.model, &mut rng)?;
    let output = a.output.clone();
    let outcome = train(
        &cfg,
        model,
        &data,
        &mut rng,
        &mut |m| validation_bleu(m, &valid),
        &mut |m, adam, entry| {
            eprintln!(
                "update {}: loss {:.4}, validation BLEU {:.4} (new best)",
                entry.update, entry.loss, entry.val_bleu
            );
            save_checkpoint(&output, &cfg, m, Some(adam))
        },
    )?;
    save_checkpoint(&a.output, &cfg, &outcome.best, Some(&outcome.best_adam))?;
    let (sv, tv) = vocab_paths(&a.output);
    data.src_vocab.save(&sv)?;
    data.tgt_vocab.save(&tv)?;
    if let Some(log) = &a.log {
        write_atomic(log, format_log(&outcome.log).as_bytes())?;
    }
    eprintln!(
        "{} updates, {} validations{}",
        outcome.updates,
        outcome.evaluations,
        if outcome.stopped_early { ", stopped early" } else { "" }
    );
    Ok(())
}

fn cmd_translate(a: TranslateArgs) -> Result<()> {
    let checkpoints = a
        .models
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<deepgru::Result<Vec<_>>>()?;
    let models: Vec<&Model> = checkpoints.iter().map(|c| &c.model).collect();
    let (default_src, default_tgt) = vocab_paths(&a.models[0]);
    let src_vocab = Vocab::load(a.src_vocab.as_deref().unwrap_or(&default_src))?;
    let tgt_vocab = Vocab::load(a.tgt_vocab.as_deref().unwrap_or(&default_tgt))?;
    for (m, path) in models.iter().zip(&a.models) {
        if m.config.src_vocab != src_vocab.len() || m.config.tgt_vocab != tgt_vocab.len() {
            bail!("{} does not match the vocabularies", path.display());
        }
    }

    let bpe = load_bpe(&a.src_bpe)?;
    let lines = read_lines(&a.input)?;
    let features = read_features(&a.feats)?;
    if features.shape()[0] != lines.len() {
        bail!(
            "{} has {} rows but {} has {} lines",
            a.feats.display(),
            features.shape()[0],
            a.input.display(),
            lines.len()
        );
    }
    let src: Vec<Vec<usize>> = lines
        .iter()
        .map(|l| match &bpe {
            Some(b) => src_vocab.encode(&b.apply_line(l)),
            None => src_vocab.encode(l),
        })
        .collect();
    let combine = match a.combine {
        CombineArg::Arithmetic => Combine::Arithmetic,
        CombineArg::Geometric => Combine::Geometric,
    };
    let out = translate_all(&models, &src, &features, &tgt_vocab, a.beam, a.max_len, combine)?;
    let text: String = out.iter().map(|l| format!("{l}\n")).collect();
    write_atomic(&a.output, text.as_bytes())?;
    Ok(())
}

fn cmd_gradcheck(variant: Variant, seed: u64, eps: f64, tol: f64, biases: bool) -> Result<()> {
    let cfg = ModelConfig {
        biases,
        ..ModelConfig::desk(variant, 30, 30)
    };
    let model = Model::init(cfg, &mut seeded(seed))?;
    let feats: Vec<Vec<f64>> = (0..2)
        .map(|r| (0..cfg.feat_dim).map(|i| ((i + 7 * r) as f64 * 0.61).sin()).collect())
        .collect();
    let pairs: [(&[usize], &[usize]); 2] = [(&[4, 9, 17], &[5, 22, 8]), (&[12, 6], &[29])];
    let examples: Vec<Example> = pairs
        .iter()
        .zip(&feats)
        .map(|(&(src, tgt), f)| Example { src, tgt, features: f })
        .collect();
    let report = check_model(&model, &Batch::new(&examples)?, eps, tol)?;
    println!("{report}");
    if !report.passed() {
        bail!("gradient check failed: max relative error {:.3e}", report.max_rel_err());
    }
    Ok(())
}

fn cmd_toy(a: ToyArgs) -> Result<()> {
    let spec = ToySpec {
        pairs: a.pairs,
        vocab: a.vocab,
        min_len: a.min_len,
        max_len: a.max_len,
        feat_dim: a.feat_dim,
        noise: a.noise,
        seed: a.seed,
    };
    let data = try_generate(&spec, a.informative)?;
    if !a.output_dir.is_dir() {
        bail!("{} is not a directory", a.output_dir.display());
    }
    if a.valid == 0 {
        data.write(&a.output_dir, "train")?;
    } else {
        let (train, valid) = data.split(a.valid)?;
        train.write(&a.output_dir, "train")?;
        valid.write(&a.output_dir, "valid")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::LearnBpe { input, merges, output } => {
            let mut text = String::new();
            for p in &input {
                text.push_str(&read_text(p)?);
                text.push('\n');
            }
            let model = learn_bpe(&text, merges)?;
            model.save(&output)?;
            eprintln!("{} merges, {} subwords", model.merges().len(), model.vocab().len());
        }
        Command::ApplyBpe { codes, input, output } => {
            let bpe = BpeModel::load(&codes)?;
            let text: String = read_lines(&input)?
                .iter()
                .map(|l| format!("{}\n", bpe.apply_line(l)))
                .collect();
            write_atomic(&output, text.as_bytes())?;
        }
        Command::BuildVocab { input, output } => {
            let mut lines = Vec::new();
            for p in &input {
                lines.extend(read_lines(p)?);
            }
            let vocab = Vocab::build(lines.iter().flat_map(|l| l.split_whitespace()));
            vocab.save(&output)?;
            eprintln!("{} tokens", vocab.len());
        }
        Command::Train(a) => cmd_train(a)?,
        Command::Translate(a) => cmd_translate(a)?,
        Command::Score { hyp, reference } => {
            let h = read_lines(&hyp)?;
            let r = read_lines(&reference)?;
            println!("{}", bleu4(&h, &r)?);
        }
        Command::Gradcheck {
            variant,
            seed,
            eps,
            tol,
            no_biases,
        } => cmd_gradcheck(variant.into(), seed, eps, tol, !no_biases)?,
        Command::MakeToyData(a) => cmd_toy(a)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
