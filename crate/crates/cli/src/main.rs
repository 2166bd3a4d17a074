use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use seqtag_core::checkpoint::Checkpoint;
use seqtag_core::corpus::{
    label_histogram, load_corpus, positives_only, write_conll, write_conll_predictions, Format, Keep, Split, TagSet,
    DEFAULT_STRONG, DEFAULT_WEAK,
};
use seqtag_core::detector::{train_detector, Detector, DetectorConfig, Selection, Weighting};
use seqtag_core::embeddings::{load_pretrained, sniff_dim};
use seqtag_core::metrics::report;
use seqtag_core::pipeline::{Mode, Pipeline};
use seqtag_core::synth::{clustered_vectors, default_frequencies, SynthSpec, VectorSpec};
use seqtag_core::tagger::{train_tagger, Tagger, TrainConfig};
use seqtag_core::{EmbeddingMatrix, Error};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "seqtag", version, about = "Imbalance-aware named-entity tagging")]
struct Cli {
    /// `key = value` file; keys are the long flag names. Flags win over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-type token counts and the strong/weak ratio of a corpus.
    Stats(StatsArgs),
    /// Writes a synthetic imbalanced corpus and matching word vectors.
    Synth(SynthArgs),
    /// Trains a tagger or the rare-class detector.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Tags a corpus with a single, double or adaptive pipeline.
    Predict(PredictArgs),
    /// Scores predictions against gold tags.
    Evaluate(EvaluateArgs),
}

#[derive(Subcommand, Debug)]
enum TrainCommand {
    /// Bi-LSTM-CRF tagger on all, strong or weak types.
    Tagger(TaggerArgs),
    /// Sentence-level weak-entity detector.
    Detector(DetectorArgs),
}

#[derive(Args, Debug)]
struct TagsetArgs {
    /// Comma-separated strong entity types.
    #[arg(long)]
    strong_types: Option<String>,
    /// Comma-separated weak entity types.
    #[arg(long)]
    weak_types: Option<String>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    corpus: Option<PathBuf>,
    /// conll | conll-3col | csv
    #[arg(long)]
    format: Option<String>,
    #[command(flatten)]
    tags: TagsetArgs,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    /// Target strong/weak token ratio.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    /// Standard deviation of word vectors around their type centroid.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct CommonTrain {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training log (CSV); defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    tags: TagsetArgs,
}

#[derive(Args, Debug)]
struct TaggerArgs {
    #[command(flatten)]
    common: CommonTrain,
    /// all | strong | weak
    #[arg(long)]
    keep: Option<String>,
    /// With keep=weak, train on every sentence instead of weak-bearing ones.
    #[arg(long)]
    all_sentences: bool,
}

#[derive(Args, Debug)]
struct DetectorArgs {
    #[command(flatten)]
    common: CommonTrain,
    /// Train on all positives plus an equal sample of negatives.
    #[arg(long)]
    balanced: bool,
    /// Uniform class weights instead of inverse frequencies.
    #[arg(long)]
    unweighted: bool,
    /// Comma-separated convolution widths.
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    filters: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// acc1 | acc1-precise
    #[arg(long)]
    select: Option<String>,
    /// Keep the learning rate as given under class weighting.
    #[arg(long)]
    no_rescale_lr: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    /// single | double | adaptive
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    single: Option<PathBuf>,
    #[arg(long)]
    strong: Option<PathBuf>,
    #[arg(long)]
    weak: Option<PathBuf>,
    #[arg(long)]
    detector: Option<PathBuf>,
    /// Defaults to the vectors recorded in the first checkpoint.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Output file (conll-3col); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tags: TagsetArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// conll-3col predictions.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Gold corpus; the gold column of `--pred` when absent.
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long)]
    gold_format: Option<String>,
    /// Print CSV instead of a table.
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tags: TagsetArgs,
}

/// Resolved settings: flag, then config file, then default. Every value read
/// is recorded so the config hash covers exactly what the command used.
struct Settings {
    command: &'static str,
    file: BTreeMap<String, String>,
    base: Option<PathBuf>,
    used: BTreeMap<String, String>,
    consumed: BTreeSet<String>,
}

impl Settings {
    fn new(command: &'static str, config: Option<&Path>) -> Result<Self, Error> {
        let mut file = BTreeMap::new();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
                file.insert(k.trim().replace('_', "-"), v.trim().to_string());
            }
        }
        Ok(Settings {
            command,
            file,
            base: config.and_then(Path::parent).map(Path::to_path_buf),
            used: BTreeMap::new(),
            consumed: BTreeSet::new(),
        })
    }

    fn value<T>(&mut self, key: &str, cli: Option<T>, default: T) -> Result<T, Error>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match (cli, self.file.get(key)) {
            (Some(v), _) => v,
            (None, Some(raw)) => raw
                .parse()
                .map_err(|e| Error::Config(format!("config key {key}: {e}")))?,
            (None, None) => default,
        };
        self.used.insert(key.to_string(), v.to_string());
        self.consumed.insert(key.to_string());
        Ok(v)
    }

    fn flag(&mut self, key: &str, cli: bool) -> Result<bool, Error> {
        self.value(key, cli.then_some(true), false)
    }

    fn path(&mut self, key: &str, cli: Option<PathBuf>) -> Option<PathBuf> {
        let p = cli.or_else(|| {
            self.file.get(key).map(|v| {
                let p = PathBuf::from(v);
                match &self.base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p,
                }
            })
        });
        if let Some(p) = &p {
            self.used.insert(key.to_string(), p.display().to_string());
        }
        self.consumed.insert(key.to_string());
        p
    }

    fn required_path(&mut self, key: &str, cli: Option<PathBuf>) -> Result<PathBuf, Error> {
        self.path(key, cli)
            .ok_or_else(|| Error::Config(format!("{} needs --{key}", self.command)))
    }

    /// Output locations do not change results and are left out of the hash.
    fn output(&mut self, key: &str, cli: Option<PathBuf>) -> Option<PathBuf> {
        let p = self.path(key, cli);
        self.used.remove(key);
        p
    }

    fn tagset(&mut self, args: &TagsetArgs) -> Result<TagSet, Error> {
        let strong = self.value("strong-types", args.strong_types.clone(), DEFAULT_STRONG.join(","))?;
        let weak = self.value("weak-types", args.weak_types.clone(), DEFAULT_WEAK.join(","))?;
        TagSet::with_partition(&split_list(&strong), &split_list(&weak))
    }

    fn format(&mut self, cli: Option<String>) -> Result<Format, Error> {
        self.value("format", cli, "conll".to_string())?.parse()
    }

    fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        h.update(b"\n");
        for (k, v) in &self.used {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    fn header(&self, seed: impl Display) -> String {
        format!("# seqtag {VERSION} config={} seed={seed}", self.hash())
    }

    fn warn_unused(&self) {
        for k in self.file.keys().filter(|k| !self.consumed.contains(*k)) {
            log::warn!("config key {k} is not used by {}", self.command);
        }
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect()
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>, Error> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix, Error> {
    if !path.exists() {
        return Err(Error::Config(format!("embeddings {} not found", path.display())));
    }
    load_pretrained(path, sniff_dim(path)?)
}

fn read_corpus(path: &Path, format: Format, tagset: TagSet, split: Split) -> Result<seqtag_core::Corpus, Error> {
    if !path.exists() {
        return Err(Error::Config(format!("corpus {} not found", path.display())));
    }
    load_corpus(path, format, tagset, split)
}

fn stats(args: StatsArgs, config: Option<&Path>) -> Result<(), Error> {
    let mut s = Settings::new("stats", config)?;
    let path = s.required_path("corpus", args.corpus)?;
    let format = s.format(args.format)?;
    let tagset = s.tagset(&args.tags)?;
    let corpus = read_corpus(&path, format, tagset, Split::Train)?;
    let hist = label_histogram(&corpus);
    let mut out = open_out(None)?;
    writeln!(out, "{}", s.header("none"))?;
    writeln!(out, "sentences {} tokens {}", corpus.len(), corpus.num_tokens())?;
    out.write_all(hist.render_table().as_bytes())?;
    match hist.strong_weak_ratio(&corpus.tagset) {
        Some(r) => writeln!(out, "strong/weak ratio {r:.2}")?,
        None => writeln!(out, "strong/weak ratio undefined (no weak tokens)")?,
    }
    s.warn_unused();
    Ok(out.flush()?)
}

fn synth(args: SynthArgs, config: Option<&Path>) -> Result<(), Error> {
    let mut s = Settings::new("synth", config)?;
    let dir = s
        .output("out", args.out)
        .ok_or_else(|| Error::Config("synth needs --out".into()))?;
    let d = SynthSpec::default();
    let seed = s.value("seed", args.seed, 0)?;
    let spec = SynthSpec {
        seed,
        train_sentences: s.value("train-size", args.train_size, d.train_sentences)?,
        val_sentences: s.value("val-size", args.val_size, d.val_sentences)?,
        test_sentences: s.value("test-size", args.test_size, d.test_sentences)?,
        frequencies: default_frequencies(s.value("ratio", args.ratio, 50.0)?),
        ..d
    };
    let dv = VectorSpec::default();
    let vspec = VectorSpec {
        dim: s.value("dim", args.dim, dv.dim)?,
        noise: s.value("noise", args.noise, dv.noise)?,
        seed,
        ..dv
    };
    let corpus = spec.generate()?;
    let emb = clustered_vectors(&corpus, &vspec)?;
    std::fs::create_dir_all(&dir)?;
    let header = s.header(seed);
    for (name, c) in [("train", &corpus.train), ("val", &corpus.val), ("test", &corpus.test)] {
        let mut w = BufWriter::new(File::create(dir.join(format!("{name}.conll")))?);
        writeln!(w, "{header}")?;
        write_conll(c, &mut w)?;
        w.flush()?;
    }
    let mut w = BufWriter::new(File::create(dir.join("vectors.txt"))?);
    writeln!(w, "{header}")?;
    emb.write_text(&mut w)?;
    w.flush()?;
    s.warn_unused();
    Ok(())
}

struct Prepared {
    settings: Settings,
    train: seqtag_core::Corpus,
    val: seqtag_core::Corpus,
    emb: EmbeddingMatrix,
    emb_path: PathBuf,
    out: PathBuf,
    log: PathBuf,
    config: TrainConfig,
}

fn prepare(command: &'static str, args: CommonTrain, config: Option<&Path>, d: TrainConfig) -> Result<Prepared, Error> {
    let mut s = Settings::new(command, config)?;
    let train_path = s.required_path("train", args.train)?;
    let val_path = s.required_path("val", args.val)?;
    let emb_path = s.required_path("embeddings", args.embeddings)?;
    let format = s.format(args.format)?;
    let tagset = s.tagset(&args.tags)?;
    let out = s
        .output("out", args.out)
        .ok_or_else(|| Error::Config(format!("{command} needs --out")))?;
    let log = s.output("log", args.log).unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    let config = TrainConfig {
        hidden: s.value("hidden", args.hidden, d.hidden)?,
        lr: s.value("lr", args.lr, d.lr)?,
        epochs: s.value("epochs", args.epochs, d.epochs)?,
        clip: s.value("clip", args.clip, d.clip)?,
        seed: s.value("seed", args.seed, d.seed)?,
    };
    config.validate()?;
    let train = read_corpus(&train_path, format, tagset.clone(), Split::Train)?;
    let val = read_corpus(&val_path, format, tagset, Split::Val)?;
    let emb = load_embeddings(&emb_path)?;
    let emb_path = std::fs::canonicalize(&emb_path)?;
    Ok(Prepared {
        settings: s,
        train,
        val,
        emb,
        emb_path,
        out,
        log,
        config,
    })
}

fn finish(p: &Prepared, ck: Checkpoint, log_csv: &str) -> Result<(), Error> {
    let seed = p.config.seed;
    ck.with_meta("embeddings", p.emb_path.display())
        .with_meta("config", p.settings.hash())
        .with_meta("seed", seed)
        .with_meta("version", VERSION)
        .save(&p.out)?;
    let mut w = BufWriter::new(File::create(&p.log)?);
    writeln!(w, "{}", p.settings.header(seed))?;
    w.write_all(log_csv.as_bytes())?;
    w.flush()?;
    p.settings.warn_unused();
    Ok(())
}

fn train_tagger_cmd(args: TaggerArgs, config: Option<&Path>) -> Result<(), Error> {
    let mut p = prepare("train tagger", args.common, config, TrainConfig::default())?;
    let keep: Keep = p.settings.value("keep", args.keep, "all".to_string())?.parse()?;
    let all_sentences = p.settings.flag("all-sentences", args.all_sentences)?;
    let (train, val) = if keep == Keep::Weak && !all_sentences {
        (positives_only(&p.train), positives_only(&p.val))
    } else {
        (p.train.clone(), p.val.clone())
    };
    log::info!("training {keep} tagger on {} sentences", train.len());
    let (tagger, log) = train_tagger(&train, &val, keep, &p.emb, &p.config)?;
    finish(&p, tagger.to_checkpoint(), &log.to_csv())
}

fn train_detector_cmd(args: DetectorArgs, config: Option<&Path>) -> Result<(), Error> {
    let mut p = prepare("train detector", args.common, config, TrainConfig::default())?;
    let d = DetectorConfig::default();
    let s = &mut p.settings;
    let widths = s.value("widths", args.widths, "2,3,4".to_string())?;
    let widths = split_list(&widths)
        .iter()
        .map(|w| w.parse().map_err(|_| Error::Config(format!("bad convolution width {w:?}"))))
        .collect::<Result<Vec<usize>, _>>()?;
    let dc = DetectorConfig {
        train: p.config.clone(),
        widths,
        filters: s.value("filters", args.filters, d.filters)?,
        weighting: if s.flag("unweighted", args.unweighted)? {
            Weighting::Unweighted
        } else {
            Weighting::Weighted
        },
        balanced: s.flag("balanced", args.balanced)?,
        threshold: s.value("threshold", args.threshold, d.threshold)?,
        selection: s.value::<Selection>("select", args.select.map(|v| v.parse()).transpose()?, d.selection)?,
        rescale_lr: !s.flag("no-rescale-lr", args.no_rescale_lr)?,
    };
    let (det, log) = train_detector(&p.train, &p.val, &p.emb, &dc)?;
    let ck = det.to_checkpoint().with_meta("threshold", dc.threshold);
    finish(&p, ck, &log.to_csv())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Error> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })
}

fn predict(args: PredictArgs, config: Option<&Path>) -> Result<(), Error> {
    let mut s = Settings::new("predict", config)?;
    let input = s.required_path("input", args.input)?;
    let format = s.format(args.format)?;
    let tagset = s.tagset(&args.tags)?;
    let mode: Mode = s.value("mode", args.mode, "adaptive".to_string())?.parse()?;
    let threshold = s.value("threshold", args.threshold, 0.5)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut need = |key: &'static str, cli: Option<PathBuf>| -> Result<Checkpoint, Error> {
        let p = s
            .path(key, cli)
            .ok_or_else(|| Error::Config(format!("mode {mode} needs --{key}")))?;
        load_checkpoint(&p)
    };
    let checkpoints: Vec<Checkpoint> = match mode {
        Mode::Single => vec![need("single", args.single)?],
        Mode::Double => vec![need("strong", args.strong)?, need("weak", args.weak)?],
        Mode::Adaptive => vec![
            need("strong", args.strong)?,
            need("weak", args.weak)?,
            need("detector", args.detector)?,
        ],
    };
    let emb_path = match s.path("embeddings", args.embeddings) {
        Some(p) => p,
        None => PathBuf::from(
            checkpoints[0]
                .meta("embeddings")
                .map_err(|_| Error::Config("no --embeddings and none recorded in the checkpoint".into()))?,
        ),
    };
    let emb = load_embeddings(&emb_path)?;
    let tagger = |i: usize| Tagger::from_checkpoint(&checkpoints[i]);
    let pipeline = match mode {
        Mode::Single => Pipeline::single(tagger(0)?),
        Mode::Double => Pipeline::double(tagger(0)?, tagger(1)?),
        Mode::Adaptive => Pipeline::adaptive(
            tagger(0)?,
            tagger(1)?,
            Detector::from_checkpoint(&checkpoints[2])?,
            threshold,
        ),
    };
    let seed = checkpoints[0].meta("seed").unwrap_or("none").to_string();
    let corpus = read_corpus(&input, format, tagset, Split::Test)?;
    let preds: Vec<Vec<String>> = pipeline
        .predict_corpus(&emb, &corpus)?
        .into_iter()
        .map(|o| o.tags)
        .collect();
    let out_path = s.output("out", args.out);
    let mut out = open_out(out_path.as_deref())?;
    writeln!(out, "{}", s.header(seed))?;
    write_conll_predictions(&corpus, &preds, &mut out)?;
    s.warn_unused();
    Ok(out.flush()?)
}

/// The `seed=` field of a seqtag header on the first line of `path`.
fn recorded_seed(path: &Path) -> Option<String> {
    let mut first = String::new();
    BufReader::new(File::open(path).ok()?).read_line(&mut first).ok()?;
    if !first.starts_with("# seqtag") {
        return None;
    }
    first
        .split_whitespace()
        .find_map(|f| f.strip_prefix("seed="))
        .map(str::to_string)
}

fn evaluate(args: EvaluateArgs, config: Option<&Path>) -> Result<(), Error> {
    let mut s = Settings::new("evaluate", config)?;
    let pred_path = s.required_path("pred", args.pred)?;
    let gold_path = s.path("gold", args.gold);
    let gold_format: Format = s.value("gold-format", args.gold_format, "conll".to_string())?.parse()?;
    let csv = s.flag("csv", args.csv)?;
    let tagset = s.tagset(&args.tags)?;
    let pred = read_corpus(&pred_path, Format::Conll3, tagset.clone(), Split::Test)?;
    let gold = match &gold_path {
        Some(g) => read_corpus(g, gold_format, tagset, Split::Test)?,
        None => read_corpus(&pred_path, Format::Conll3Gold, tagset, Split::Test)?,
    };
    let r = report(&pred, &gold)?;
    let seed = recorded_seed(&pred_path).unwrap_or_else(|| "none".into());
    let out_path = s.output("out", args.out);
    let mut out = open_out(out_path.as_deref())?;
    writeln!(out, "{}", s.header(seed))?;
    out.write_all(if csv { r.render_csv() } else { r.render_table() }.as_bytes())?;
    s.warn_unused();
    Ok(out.flush()?)
}

fn run(cli: Cli) -> Result<(), Error> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Stats(a) => stats(a, config),
        Command::Synth(a) => synth(a, config),
        Command::Train(TrainCommand::Tagger(a)) => train_tagger_cmd(a, config),
        Command::Train(TrainCommand::Detector(a)) => train_detector_cmd(a, config),
        Command::Predict(a) => predict(a, config),
        Command::Evaluate(a) => evaluate(a, config),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Training { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("seqtag: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
