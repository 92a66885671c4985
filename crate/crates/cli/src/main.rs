//! `thm`: data preparation, training, decoding and diagnostics.

mod plot;
mod settings;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thm_core::data::{encode_corpus, gen_synthetic, length_filter, BpeModel, ParallelCorpus, Task};
use thm_core::eval::{corpus_bleu, translate};
use thm_core::gradcheck::Coverage;
use thm_core::model::{count_parameters, Arch, Checkpoint, Model, ModelConfig};
use thm_core::train::{
    model_gradcheck, select_best, topk_selection, ExperimentData, RunRecord, TrainConfig, Trainer, BPE_FILE, LOSS_LOG,
};
use thm_core::Rng;

use settings::{Failure, Outcome, Settings};

#[derive(Parser)]
#[command(name = "thm", version, about = "Crossed co-attention translation models and a Transformer baseline")]
#[command(after_help = "Config files hold key=value lines; keys are flag names with '-' written as '_'. \
Flags override the file and unknown keys are rejected.\n\
Exit codes: 0 success, 1 usage error, 2 data or shape error, 3 training divergence.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic copy/reverse/sort corpora (train, dev and test splits)
    MakeSynth(MakeSynth),
    /// Learn a joint BPE model from a parallel corpus
    LearnBpe(LearnBpe),
    /// Segment a text file with a BPE model
    ApplyBpe(ApplyBpe),
    /// Train a model, writing checkpoints and a loss log
    Train(Box<Train>),
    /// Translate a source file with a checkpoint
    Translate(Translate),
    /// Corpus BLEU of a hypothesis file against a reference file
    Bleu(Bleu),
    /// Compare model gradients with central finite differences
    Gradcheck(Gradcheck),
    /// Count the parameters of a preset
    ParamCount(ParamCount),
    /// Pick the best epoch from a loss log and report its top-k rank
    SelectModel(SelectModel),
    /// Turn a loss log into a gnuplot data file or an SVG chart
    PlotLoss(PlotLoss),
}

#[derive(Args)]
struct Common {
    /// key=value settings file
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn p(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|x| x.display().to_string())
}

#[derive(Args)]
struct MakeSynth {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// copy, reverse or sort
    #[arg(long)]
    task: Option<String>,
    /// Output directory for {train,dev,test}.{src,tgt}
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of distinct symbols
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    train_pairs: Option<usize>,
    /// Pairs in each of dev and test
    #[arg(long)]
    eval_pairs: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct LearnBpe {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long)]
    tgt: Option<PathBuf>,
    /// Output model file
    #[arg(long)]
    out: Option<PathBuf>,
    /// Target vocabulary size, special tokens included
    #[arg(long)]
    vocab: Option<usize>,
}

#[derive(Args)]
struct ApplyBpe {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    bpe: Option<PathBuf>,
    /// Input text, one sentence per line
    #[arg(long)]
    src: Option<PathBuf>,
    /// Output file; standard output when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Training source file
    #[arg(long)]
    src: Option<PathBuf>,
    /// Training target file
    #[arg(long)]
    tgt: Option<PathBuf>,
    #[arg(long)]
    dev_src: Option<PathBuf>,
    #[arg(long)]
    dev_tgt: Option<PathBuf>,
    #[arg(long)]
    test_src: Option<PathBuf>,
    #[arg(long)]
    test_tgt: Option<PathBuf>,
    /// Run directory for checkpoints, bpe.model and loss.log
    #[arg(long)]
    out: Option<PathBuf>,
    /// thm-base, thm-big, transformer-base, transformer-big, tiny or transformer-tiny
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Existing BPE model; learned from the training corpus when absent
    #[arg(long)]
    bpe: Option<PathBuf>,
    /// Vocabulary size when learning BPE
    #[arg(long)]
    bpe_vocab: Option<usize>,
    /// Continue from this checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    lr_scale: Option<f64>,
    #[arg(long)]
    token_budget: Option<usize>,
    #[arg(long)]
    accum_steps: Option<usize>,
    /// Stop once dev BLEU reaches this value
    #[arg(long)]
    stop_dev_bleu: Option<f64>,
    /// Drop training pairs longer than this many words
    #[arg(long)]
    filter_len: Option<usize>,
    /// Drop training pairs whose length ratio exceeds this
    #[arg(long)]
    ratio_limit: Option<f64>,
}

#[derive(Args)]
struct Translate {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// BPE model; defaults to bpe.model next to the checkpoint
    #[arg(long)]
    bpe: Option<PathBuf>,
    #[arg(long)]
    src: Option<PathBuf>,
    /// Output file; standard output when absent
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    /// Length-normalization exponent for beam search
    #[arg(long)]
    alpha: Option<f64>,
    /// Longest output in subword tokens
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct Bleu {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    hyp: Option<PathBuf>,
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preset: Option<String>,
    /// Entries checked per parameter; 0 checks every entry
    #[arg(long)]
    samples: Option<usize>,
    /// Finite-difference step
    #[arg(long)]
    step: Option<f64>,
    /// Largest accepted relative error
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args)]
struct ParamCount {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    vocab: Option<usize>,
}

#[derive(Args)]
struct SelectModel {
    #[command(flatten)]
    common: Common,
    /// Loss log written by train
    #[arg(long)]
    log: Option<PathBuf>,
    /// Comma-separated k values
    #[arg(long)]
    k: Option<String>,
}

#[derive(Args)]
struct PlotLoss {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    log: Option<PathBuf>,
    /// .svg for a chart, anything else for a gnuplot data file
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_output(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn make_synth(a: MakeSynth) -> Outcome {
    let mut st = Settings::new(
        a.common.config.as_deref(),
        vec![
            ("seed", s(&a.seed)),
            ("task", a.task.clone()),
            ("out", p(&a.out)),
            ("vocab", s(&a.vocab)),
            ("train_pairs", s(&a.train_pairs)),
            ("eval_pairs", s(&a.eval_pairs)),
            ("min_len", s(&a.min_len)),
            ("max_len", s(&a.max_len)),
        ],
    )?;
    let seed: u64 = st.require("seed")?;
    let task: String = st.or("task", "copy".to_string())?;
    let task: Task = task.parse().map_err(|e: thm_core::Error| Failure::Usage(e.to_string()))?;
    let out = st.path("out")?;
    let vocab = st.or("vocab", 20)?;
    let n_train = st.or("train_pairs", 2000)?;
    let n_eval = st.or("eval_pairs", 200)?;
    let lens = (st.or("min_len", 3)?, st.or("max_len", 12)?);
    st.finish()?;
    fs::create_dir_all(&out)?;
    for (i, (split, n)) in [("train", n_train), ("dev", n_eval), ("test", n_eval)].into_iter().enumerate() {
        let c = gen_synthetic(task, vocab, n, lens, &mut Rng::derive(seed, i as u64))?;
        c.write(&out.join(format!("{split}.src")), &out.join(format!("{split}.tgt")))?;
    }
    println!("wrote {n_train} train and {n_eval} dev/test pairs to {}", out.display());
    Ok(())
}

fn learn_bpe(a: LearnBpe) -> Outcome {
    let mut st = Settings::new(
        a.common.config.as_deref(),
        vec![("src", p(&a.src)), ("tgt", p(&a.tgt)), ("out", p(&a.out)), ("vocab", s(&a.vocab))],
    )?;
    let (src, tgt, out): (PathBuf, PathBuf, PathBuf) = (st.path("src")?, st.path("tgt")?, st.path("out")?);
    let vocab = st.or("vocab", 8000)?;
    st.finish()?;
    let corpus = ParallelCorpus::read(&src, &tgt)?;
    let bpe = thm_core::data::learn_bpe(&corpus, vocab)?;
    bpe.save(&out)?;
    println!("vocabulary {} ({} merges)", bpe.vocab_size(), bpe.merges().len());
    Ok(())
}

fn apply_bpe(a: ApplyBpe) -> Outcome {
    let mut st = Settings::new(
        a.common.config.as_deref(),
        vec![("bpe", p(&a.bpe)), ("src", p(&a.src)), ("out", p(&a.out))],
    )?;
    let (bpe, src): (PathBuf, PathBuf) = (st.path("bpe")?, st.path("src")?);
    let out: Option<PathBuf> = st.get("out")?;
    st.finish()?;
    let bpe = BpeModel::load(&bpe)?;
    let text: String = fs::read_to_string(&src)?
        .lines()
        .map(|l| bpe.segment(l).join(" ") + "\n")
        .collect();
    write_output(out.as_deref(), &text)
}

fn read_split(st: &mut Settings, src: &str, tgt: &str) -> Outcome<ParallelCorpus> {
    let s: Option<PathBuf> = st.get(src)?;
    let t: Option<PathBuf> = st.get(tgt)?;
    match (s, t) {
        (Some(s), Some(t)) => Ok(ParallelCorpus::read(&s, &t)?),
        (None, None) => Ok(ParallelCorpus::default()),
        _ => Err(Failure::Usage(format!("--{} and --{} go together", src.replace('_', "-"), tgt.replace('_', "-")))),
    }
}

fn train(a: Train) -> Outcome {
    let mut st = Settings::new(
        a.common.config.as_deref(),
        vec![
            ("seed", s(&a.seed)),
            ("src", p(&a.src)),
            ("tgt", p(&a.tgt)),
            ("dev_src", p(&a.dev_src)),
            ("dev_tgt", p(&a.dev_tgt)),
            ("test_src", p(&a.test_src)),
            ("test_tgt", p(&a.test_tgt)),
            ("out", p(&a.out)),
            ("preset", a.preset.clone()),
            ("epochs", s(&a.epochs)),
            ("bpe", p(&a.bpe)),
            ("bpe_vocab", s(&a.bpe_vocab)),
            ("resume", p(&a.resume)),
            ("warmup", s(&a.warmup)),
            ("lr_scale", s(&a.lr_scale)),
            ("token_budget", s(&a.token_budget)),
            ("accum_steps", s(&a.accum_steps)),
            ("stop_dev_bleu", s(&a.stop_dev_bleu)),
            ("filter_len", s(&a.filter_len)),
            ("ratio_limit", s(&a.ratio_limit)),
        ],
    )?;
    let seed: u64 = st.require("seed")?;
    let out = st.path("out")?;
    let train = read_split(&mut st, "src", "tgt")?;
    if train.is_empty() {
        return Err(Failure::Usage("--src and --tgt name the training corpus".into()));
    }
    let dev = read_split(&mut st, "dev_src", "dev_tgt")?;
    let test = read_split(&mut st, "test_src", "test_tgt")?;
    let train = length_filter(&train, st.or("filter_len", 250)?, st.or("ratio_limit", 1.5)?)?;
    let resume_from: Option<PathBuf> = st.get("resume")?;
    let bpe_path: Option<PathBuf> = st.get("bpe")?;
    let bpe_vocab = st.or("bpe_vocab", 8000)?;
    let preset: String = st.or("preset", "tiny".to_string())?;
    let mut model_keys = st.split_off(ModelConfig::KEYS);
    let mut train_keys = st.split_off(TrainConfig::KEYS);
    st.finish()?;
    if model_keys.contains_key("vocab_size") {
        return Err(Failure::Usage("vocab_size is taken from the BPE model".into()));
    }

    let bpe = match (&bpe_path, &resume_from) {
        (Some(b), _) => BpeModel::load(b)?,
        (None, Some(ck)) => BpeModel::load(&ck.parent().unwrap_or(Path::new(".")).join(BPE_FILE))?,
        (None, None) => thm_core::data::learn_bpe(&train, bpe_vocab)?,
    };
    let data = ExperimentData {
        train: encode_corpus(&bpe, &train),
        dev: encode_corpus(&bpe, &dev),
        test: encode_corpus(&bpe, &test),
        bpe,
    };

    let mut trainer = match &resume_from {
        Some(ck) => {
            let mut t = Trainer::from_checkpoint(&Checkpoint::load(ck)?)?;
            let mut requested = t.model.config.clone();
            requested.apply_overrides(&mut model_keys).map_err(|e| Failure::Usage(e.to_string()))?;
            if requested != t.model.config {
                return Err(Failure::Usage("model settings differ from the checkpoint".into()));
            }
            if t.config.seed != seed {
                return Err(Failure::Usage(format!("checkpoint was trained with seed {}", t.config.seed)));
            }
            let epochs = t.config.epochs;
            t.config.apply_overrides(&mut train_keys).map_err(|e| Failure::Usage(e.to_string()))?;
            if t.config.epochs == epochs && t.config.epochs <= t.state.epoch {
                return Err(Failure::Usage(format!("checkpoint already has {} epochs; pass --epochs", t.state.epoch)));
            }
            t.config.validate()?;
            t
        }
        None => {
            let mut mc = ModelConfig::preset(&preset)?;
            mc.apply_overrides(&mut model_keys).map_err(|e| Failure::Usage(e.to_string()))?;
            mc.vocab_size = data.bpe.vocab_size();
            let mut tc = TrainConfig::default();
            tc.apply_overrides(&mut train_keys).map_err(|e| Failure::Usage(e.to_string()))?;
            tc.seed = seed;
            Trainer::new(mc, tc)?
        }
    };
    fs::create_dir_all(&out)?;
    data.bpe.save(&out.join(BPE_FILE))?;
    fs::write(out.join(LOSS_LOG), trainer.record.to_loss_log())?;
    println!("epoch train_loss valid_loss dev_bleu test_bleu");
    while trainer.state.epoch < trainer.config.epochs {
        let row = trainer.run_epoch(&data, Some(&out))?;
        println!(
            "{} {:.4} {:.4} {:.2} {:.2}",
            row.epoch, row.train_loss, row.valid_loss, row.dev_bleu, row.test_bleu
        );
        if trainer.config.stop_dev_bleu.is_some_and(|t| row.dev_bleu >= t) {
            break;
        }
    }
    Ok(())
}

fn translate_cmd(a: Translate) -> Outcome {
    let mut st = Settings::new(
        a.common.config.as_deref(),
        vec![
            ("checkpoint", p(&a.checkpoint)),
            ("bpe", p(&a.bpe)),
            ("src", p(&a.src)),
            ("out", p(&a.out)),
            ("beam", s(&a.beam)),
            ("alpha", s(&a.alpha)),
            ("max_len", s(&a.max_len)),
        ],
    )?;
    let ckpt = st.path("checkpoint")?;
    let src = st.path("src")?;
    let bpe: Option<PathBuf> = st.get("bpe")?;
    let out: Option<PathBuf> = st.get("out")?;
    let beam = st.or("beam", 1)?;
    let alpha = st.or("alpha", if beam > 1 { 0.6 } else { 0.0 })?;
    let max_len: Option<usize> = st.get("max_len")?;
    st.finish()?;
    if beam == 0 {
        return Err(Failure::Usage("--beam must be at least 1".into()));
    }
    let model = Model::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
    let bpe = BpeModel::load(&bpe.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join(BPE_FILE)))?;
    if bpe.vocab_size() != model.config.vocab_size {
        return Err(Failure::Core(thm_core::Error::data(format!(
            "BPE vocabulary {} does not match the model's {}",
            bpe.vocab_size(),
            model.config.vocab_size
        ))));
    }
    let lines: Vec<Vec<usize>> = fs::read_to_string(&src)?.lines().map(|l| bpe.encode(l)).collect();
    let nonempty: Vec<Vec<usize>> = lines.iter().filter(|l| !l.is_empty()).cloned().collect();
    let limit = max_len.unwrap_or(model.config.max_len - 1);
    let mut outs = translate(&model, &nonempty, beam, alpha, limit, 64)?.into_iter();
    let text: String = lines
        .iter()
        .map(|l| if l.is_empty() { String::new() } else { bpe.decode(&outs.next().unwrap_or_default()) } + "\n")
        .collect();
    write_output(out.as_deref(), &text)
}

fn bleu(a: Bleu) -> Outcome {
    let mut st = Settings::new(a.common.config.as_deref(), vec![("hyp", p(&a.hyp)), ("ref", p(&a.reference))])?;
    let (hyp, reference): (PathBuf, PathBuf) = (st.path("hyp")?, st.path("ref")?);
    st.finish()?;
    let h = fs::read_to_string(&hyp)?;
    let r = fs::read_to_string(&reference)?;
    let h: Vec<&str> = h.lines().collect();
    let r: Vec<&str> = r.lines().collect();
    println!("{:.2}", corpus_bleu(&h, &r)?);
    Ok(())
}

fn gradcheck(a: Gradcheck) -> Outcome {
    let mut st = Settings::new(
        a.common.config.as_deref(),
        vec![
            ("seed", s(&a.seed)),
            ("preset", a.preset.clone()),
            ("samples", s(&a.samples)),
            ("step", s(&a.step)),
            ("tolerance", s(&a.tolerance)),
        ],
    )?;
    let seed: u64 = st.require("seed")?;
    let preset: String = st.or("preset", "tiny".to_string())?;
    let samples = st.or("samples", 8)?;
    let h = st.or("step", 1e-5)?;
    let tol = st.or("tolerance", 1e-4)?;
    let mut model_keys = st.split_off(ModelConfig::KEYS);
    st.finish()?;
    let mut cfg = ModelConfig::preset(&preset)?;
    cfg.apply_overrides(&mut model_keys).map_err(|e| Failure::Usage(e.to_string()))?;
    let coverage = if samples == 0 {
        Coverage::All
    } else {
        Coverage::Sample { per_param: samples, seed }
    };
    let report = model_gradcheck(cfg, seed, h, coverage)?;
    let checked: usize = report.params.iter().map(|p| p.checked).sum();
    let worst = report.worst().map_or("-", |p| p.name.as_str());
    let line = format!(
        "max relative error {:.3e} at {worst} ({checked} entries in {} tensors)",
        report.max_rel_error(),
        report.params.len()
    );
    if report.passes(tol) {
        println!("{line}");
        Ok(())
    } else {
        Err(Failure::Check(format!("{line} exceeds {tol:e}")))
    }
}

fn param_count(a: ParamCount) -> Outcome {
    let mut st = Settings::new(
        a.common.config.as_deref(),
        vec![("preset", a.preset.clone()), ("vocab", s(&a.vocab))],
    )?;
    let preset: String = st.require("preset")?;
    let vocab: Option<usize> = st.get("vocab")?;
    st.finish()?;
    let mut cfg = ModelConfig::preset(&preset)?;
    if let Some(v) = vocab {
        cfg.vocab_size = v;
    }
    let c = count_parameters(&cfg);
    println!("preset {preset}");
    println!("embedding {}", c.embedding);
    println!("encoder {}", c.encoder);
    println!("decoder {}", c.decoder);
    println!("total {}", c.total());
    if cfg.arch == Arch::Thm {
        let base = ModelConfig { arch: Arch::Transformer, ..cfg };
        let b = count_parameters(&base).total();
        println!("transformer {b}");
        println!("ratio {:.4}", c.total() as f64 / b as f64);
    }
    Ok(())
}

fn parse_ks(text: &str) -> Outcome<Vec<usize>> {
    text.split(',')
        .map(|k| k.trim().parse().map_err(|_| Failure::Usage(format!("bad k value {k:?}"))))
        .collect()
}

fn select_model(a: SelectModel) -> Outcome {
    let mut st = Settings::new(a.common.config.as_deref(), vec![("log", p(&a.log)), ("k", a.k.clone())])?;
    let log = st.path("log")?;
    let ks = parse_ks(&st.or("k", "1,3,5,10".to_string())?)?;
    st.finish()?;
    let record = RunRecord::from_loss_log(&fs::read_to_string(&log)?)?;
    let best = select_best(&record)?;
    let row = record.rows[best - 1];
    println!("best epoch {best} dev_bleu {:.2} test_bleu {:.2}", row.dev_bleu, row.test_bleu);
    for k in ks {
        if k == 0 {
            return Err(Failure::Usage("k must be at least 1".into()));
        }
        println!("top{k} {}", topk_selection(&record, k)?);
    }
    Ok(())
}

fn plot_loss(a: PlotLoss) -> Outcome {
    let mut st = Settings::new(a.common.config.as_deref(), vec![("log", p(&a.log)), ("out", p(&a.out))])?;
    let (log, out): (PathBuf, PathBuf) = (st.path("log")?, st.path("out")?);
    st.finish()?;
    let record = RunRecord::from_loss_log(&fs::read_to_string(&log)?)?;
    let text = if out.extension().is_some_and(|e| e == "svg") {
        plot::svg(&record)
    } else {
        plot::gnuplot_data(&record)
    };
    fs::write(&out, text)?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::MakeSynth(a) => make_synth(a),
        Command::LearnBpe(a) => learn_bpe(a),
        Command::ApplyBpe(a) => apply_bpe(a),
        Command::Train(a) => train(*a),
        Command::Translate(a) => translate_cmd(a),
        Command::Bleu(a) => bleu(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ParamCount(a) => param_count(a),
        Command::SelectModel(a) => select_model(a),
        Command::PlotLoss(a) => plot_loss(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("thm: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
