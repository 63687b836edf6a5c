//! Command implementations behind the `mtlg2p` binary.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the JSON
//! file given with `--config` (flat dotted keys such as `"train.lr_initial"`
//! or `"model.hidden_dim"`), then command-line flags. File paths are given
//! as flags only.
//!
//! Exit codes: 0 success, 1 runtime or input error, 2 usage error, 3
//! gradient check failed.

use crate::checkpoint::{load_checkpoint, read_checkpoint_manifest};
use crate::decode::{beam_search, generate_dictionary, DecodeConfig};
use crate::lexicon::{
    build_vocabs, detect_flag_column, downsample_balanced, encode_all, parse_lexicon, parse_wordlist,
    split_train_valid, tag_entries, ClassCounts, LexiconEntry, Matching, UnknownPolicy, Vocabulary,
};
use crate::metrics::{
    asr_wer_aer, classifier_metrics, g2p_wer, parse_hypothesis_transcripts, parse_reference_transcripts, per,
    ClassifierMetrics, Normalization,
};
use crate::model::{batch_loss, init_params, Bound, LossWeighting, Mode, Model, ModelConfig};
use crate::numcore::{finite_difference_gradcheck, Fault, GradcheckReport, Real};
use crate::train::{fit, RunFiles, TrainConfig};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_GRADCHECK_FAILED: i32 = 3;

/// Gradient checks pass below this maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

const GRADCHECK_WEIGHT_SCALE: f64 = 10.0;

#[derive(Debug, Parser)]
#[command(name = "mtlg2p", version, about = "Multitask grapheme-to-phoneme conversion with Anglicism detection")]
pub struct Cli {
    /// JSON file with flat dotted configuration keys; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tag, split and optionally downsample lexicons into a training directory.
    Prepare(PrepareArgs),
    /// Train a model on a prepared directory.
    Train(TrainArgs),
    /// Generate a pronunciation dictionary for a word list.
    Apply(ApplyArgs),
    /// Score a model against a reference lexicon.
    Evaluate(EvaluateArgs),
    /// Word and Anglicism error rates of ASR transcripts.
    ScoreAsr(ScoreAsrArgs),
    /// Compare analytic and numeric gradients of the full loss on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Lexicon TSV; repeat to concatenate several sources.
    #[arg(long = "lexicon", required = true)]
    pub lexicons: Vec<PathBuf>,
    /// Anglicism word list; overrides any flag column.
    #[arg(long)]
    pub wordlist: Option<PathBuf>,
    /// Match word-list entries case-sensitively.
    #[arg(long)]
    pub case_sensitive: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Balance the training set 50/50 by sampling negatives.
    #[arg(long)]
    pub downsample: bool,
    /// Size of the random validation split.
    #[arg(long, default_value_t = 3000, conflicts_with = "valid_file")]
    pub valid_count: usize,
    /// Use this lexicon as validation set instead of splitting.
    #[arg(long)]
    pub valid_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and the run log.
    #[arg(long)]
    pub out: PathBuf,
    /// Decoder weight of the combined loss; absent means the plain sum.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_floor: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Disable gradient clipping.
    #[arg(long, conflicts_with = "clip_norm")]
    pub no_clip: bool,
    #[arg(long, value_parser = ["sgd", "adam"])]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub classifier_hidden1: Option<usize>,
    #[arg(long)]
    pub classifier_hidden2: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Skip validation entries with symbols unknown to the training vocabulary.
    #[arg(long)]
    pub skip_unknown: bool,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// One word per line.
    #[arg(long)]
    pub words: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Add the Anglicism probability and a 0/1 flag column.
    #[arg(long)]
    pub emit_flags: bool,
    /// Skipped-word report; defaults to `<out>.skipped.json`.
    #[arg(long)]
    pub skip_report: Option<PathBuf>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub lexicon: PathBuf,
    /// JSON report destination; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub skip_unknown: bool,
}

#[derive(Debug, Args)]
pub struct ScoreAsrArgs {
    /// Reference transcripts; Anglicisms carry a `*` prefix.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub hypothesis: PathBuf,
    /// Treat hyphens as word boundaries.
    #[arg(long)]
    pub map_hyphens: bool,
    #[arg(long)]
    pub ignore_case: bool,
    /// JSON report destination.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds to check, starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0.7)]
    pub alpha: f64,
    /// Scale the sigmoid backward rule; the check must then fail.
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

/// Parses arguments and runs the command; returns the process exit code.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&a).map(|_| EXIT_OK),
        Command::Train(a) => cmd_train(&a, file).map(|_| EXIT_OK),
        Command::Apply(a) => cmd_apply(&a, file).map(|_| EXIT_OK),
        Command::Evaluate(a) => cmd_evaluate(&a, file).map(|_| EXIT_OK),
        Command::ScoreAsr(a) => cmd_score_asr(&a).map(|_| EXIT_OK),
        Command::Gradcheck(a) => cmd_gradcheck(&a).map(|ok| if ok { EXIT_OK } else { EXIT_GRADCHECK_FAILED }),
    }
}

/// Fully resolved settings of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides`; both are flat dotted keys.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let flat: BTreeMap<String, Value> = serde_json::from_str(&text)
                .map_err(|e| Error::contract(format!("{}: config must be a flat JSON object: {e}", path.display())))?;
            for (k, v) in flat {
                set_dotted(&mut tree, &k, v)?;
            }
        }
        for (k, v) in overrides {
            set_dotted(&mut tree, k, v.clone())?;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::contract(format!("config: {e}")))?;
        cfg.train.validate()?;
        cfg.decode.validate()?;
        Ok(cfg)
    }
}

fn set_dotted(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let unknown = || Error::contract(format!("unknown config key {key:?}"));
    let (section, field) = key.split_once('.').ok_or_else(unknown)?;
    let slot = tree
        .get_mut(section)
        .and_then(|s| s.as_object_mut())
        .ok_or_else(unknown)?;
    if !slot.contains_key(field) {
        return Err(unknown());
    }
    slot.insert(field.to_owned(), value);
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn hashes(paths: &[&Path]) -> Result<Value> {
    let mut m = serde_json::Map::new();
    for p in paths {
        m.insert(p.display().to_string(), sha256_file(p)?.into());
    }
    Ok(Value::Object(m))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn echo(command: &str, config: &Value, inputs: &Value) {
    log::info!("{command}: config {config}");
    log::info!("{command}: inputs {inputs}");
}

/// Reads a lexicon whose flag column is detected from its first line.
fn read_lexicon(path: &Path) -> Result<(Vec<LexiconEntry>, usize)> {
    let flags = detect_flag_column(path)?;
    let parsed = parse_lexicon(path, flags)?;
    Ok((parsed.entries, parsed.duplicates))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepareManifest {
    pub seed: u64,
    pub inputs: Value,
    pub wordlist: Option<String>,
    pub duplicates_dropped: usize,
    pub tagged: Option<ClassCounts>,
    pub downsampled: bool,
    pub train_before_downsampling: ClassCounts,
    pub train: ClassCounts,
    pub valid: ClassCounts,
    pub graphemes: usize,
    pub phonemes: usize,
}

pub fn cmd_prepare(a: &PrepareArgs) -> Result<PrepareManifest> {
    let mut all_inputs: Vec<&Path> = a.lexicons.iter().map(PathBuf::as_path).collect();
    all_inputs.extend(a.wordlist.as_deref());
    all_inputs.extend(a.valid_file.as_deref());
    let inputs = hashes(&all_inputs)?;
    echo(
        "prepare",
        &json!({"downsample": a.downsample, "valid_count": a.valid_count, "seed": a.seed, "case_sensitive": a.case_sensitive}),
        &inputs,
    );

    let mut entries = Vec::new();
    let mut duplicates = 0;
    let mut seen = std::collections::HashSet::new();
    for p in &a.lexicons {
        let (list, dups) = read_lexicon(p)?;
        duplicates += dups;
        for e in list {
            if seen.insert((e.word.clone(), e.phonemes.clone())) {
                entries.push(e);
            } else {
                duplicates += 1;
            }
        }
    }
    let matching = if a.case_sensitive { Matching::CaseSensitive } else { Matching::CaseInsensitive };
    let wordlist = a.wordlist.as_deref().map(|p| parse_wordlist(p, matching)).transpose()?;
    let tag = |entries: &mut Vec<LexiconEntry>, what: &str| -> Result<Option<ClassCounts>> {
        match &wordlist {
            Some(w) => Ok(Some(tag_entries(entries, w))),
            None => match entries.iter().find(|e| e.anglicism.is_none()) {
                Some(e) => Err(Error::contract(format!(
                    "{what}: entry {:?} has no flag column and no --wordlist was given",
                    e.word
                ))),
                None => Ok(None),
            },
        }
    };
    let tagged = tag(&mut entries, "lexicon")?;

    let (train, mut valid) = match &a.valid_file {
        Some(vf) => {
            let (v, _) = read_lexicon(vf)?;
            (entries, v)
        }
        None => {
            let split = split_train_valid(&entries, a.valid_count, a.seed)?;
            (split.train, split.valid)
        }
    };
    if a.valid_file.is_some() {
        tag(&mut valid, "validation lexicon")?;
    }
    let before = ClassCounts::of(&train);
    let train = if a.downsample { downsample_balanced(&train, a.seed)? } else { train };
    let vocab = build_vocabs(&train)?;

    create_dir(&a.out)?;
    write_text(&a.out.join("train.tsv"), &crate::lexicon::write_lexicon(&train, true))?;
    write_text(&a.out.join("valid.tsv"), &crate::lexicon::write_lexicon(&valid, true))?;
    write_json(&a.out.join("vocab.json"), &vocab)?;
    let manifest = PrepareManifest {
        seed: a.seed,
        inputs,
        wordlist: a.wordlist.as_ref().map(|p| p.display().to_string()),
        duplicates_dropped: duplicates,
        tagged,
        downsampled: a.downsample,
        train_before_downsampling: before,
        train: ClassCounts::of(&train),
        valid: ClassCounts::of(&valid),
        graphemes: vocab.graphemes.len(),
        phonemes: vocab.phonemes.len(),
    };
    write_json(&a.out.join("manifest.json"), &manifest)?;
    log::info!(
        "prepare: train {} ({:.2} % Anglicisms), valid {} ({:.2} %)",
        manifest.train.total,
        manifest.train.ratio,
        manifest.valid.total,
        manifest.valid.ratio
    );
    Ok(manifest)
}

fn train_overrides(a: &TrainArgs) -> Vec<(String, Value)> {
    let mut o: Vec<(String, Value)> = Vec::new();
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            o.push((k.to_owned(), v));
        }
    };
    put("model.alpha", a.alpha.map(Value::from));
    put("train.max_epochs", a.epochs.map(Value::from));
    put("train.batch_size", a.batch_size.map(Value::from));
    put("train.lr_initial", a.lr.map(Value::from));
    put("train.lr_floor", a.lr_floor.map(Value::from));
    put("train.patience", a.patience.map(Value::from));
    put("train.seed", a.seed.map(Value::from));
    put("train.clip_norm", a.clip_norm.map(Value::from));
    put("train.clip_norm", a.no_clip.then_some(Value::Null));
    put("train.optimizer", a.optimizer.clone().map(Value::from));
    put("model.embed_dim", a.embed_dim.map(Value::from));
    put("model.hidden_dim", a.hidden_dim.map(Value::from));
    put("model.layers", a.layers.map(Value::from));
    put("model.classifier_hidden1", a.classifier_hidden1.map(Value::from));
    put("model.classifier_hidden2", a.classifier_hidden2.map(Value::from));
    put("model.dropout", a.dropout.map(Value::from));
    put("decode.beam_width", a.beam_width.map(Value::from));
    o
}

/// Decoding quality and classifier metrics of a model on a lexicon, as in
/// one row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub entries: usize,
    pub skipped: usize,
    pub per: f64,
    pub wer: f64,
    pub classifier: Option<ClassifierMetrics>,
    /// PER over flagged entries, when the lexicon has flags and any exist.
    pub per_anglicism: Option<f64>,
    pub per_other: Option<f64>,
    pub beam_width: usize,
}

impl EvalSummary {
    pub fn table_row(&self) -> String {
        let mut row = format!("PER {:6.2} | WER {:6.2}", self.per, self.wer);
        if let Some(c) = &self.classifier {
            row.push_str(&format!(
                " | Accu. {:6.2} | Prec. {:6.2} | Recall {:6.2} | F1 {:6.2}",
                c.accuracy, c.precision, c.recall, c.f1
            ));
        }
        row
    }
}

/// Decodes every entry with beam search and scores it.
pub fn evaluate_entries<T: Real>(
    model: &Model<T>,
    entries: &[LexiconEntry],
    cfg: &DecodeConfig,
    policy: UnknownPolicy,
) -> Result<EvalSummary> {
    let mut pairs = Vec::with_capacity(entries.len());
    let mut flagged = Vec::new();
    let mut probs = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    let mut skipped = 0;
    for e in entries {
        match beam_search(model, &e.word, cfg) {
            Ok(d) => {
                pairs.push((e.phonemes.clone(), d.phonemes));
                flagged.push(e.anglicism);
                probs.push(d.anglicism_probability);
                labels.push(e.is_anglicism());
            }
            Err(err @ Error::UnknownGrapheme { .. }) if policy == UnknownPolicy::Skip => {
                log::warn!("skipping: {err}");
                skipped += 1;
            }
            Err(err) => return Err(err),
        }
    }
    if pairs.is_empty() {
        return Err(Error::contract("no entry could be evaluated"));
    }
    let has_flags = flagged.iter().all(Option::is_some);
    let subset = |want: bool| -> Result<Option<f64>> {
        let sel: Vec<_> = pairs
            .iter()
            .zip(&flagged)
            .filter(|(_, f)| **f == Some(want))
            .map(|(p, _)| p.clone())
            .collect();
        if sel.is_empty() {
            Ok(None)
        } else {
            per(&sel).map(Some)
        }
    };
    Ok(EvalSummary {
        entries: pairs.len(),
        skipped,
        per: per(&pairs)?,
        wer: g2p_wer(&pairs)?,
        classifier: if has_flags { Some(classifier_metrics(&probs, &labels, cfg.threshold)?) } else { None },
        per_anglicism: if has_flags { subset(true)? } else { None },
        per_other: if has_flags { subset(false)? } else { None },
        beam_width: cfg.beam_width,
    })
}

pub fn cmd_train(a: &TrainArgs, config_file: Option<&Path>) -> Result<EvalSummary> {
    let train_path = a.data.join("train.tsv");
    let valid_path = a.data.join("valid.tsv");
    let vocab_path = a.data.join("vocab.json");
    let mut inputs = vec![train_path.as_path(), valid_path.as_path(), vocab_path.as_path()];
    inputs.extend(config_file);
    let hashes = hashes(&inputs)?;
    let cfg = RunConfig::resolve(config_file, &train_overrides(a))?;

    let vocab: Vocabulary = serde_json::from_str(
        &std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?,
    )?;
    let (train_entries, _) = read_lexicon(&train_path)?;
    let (valid_entries, _) = read_lexicon(&valid_path)?;
    let (train, _, _) = encode_all(&train_entries, &vocab, UnknownPolicy::Error)?;
    let policy = if a.skip_unknown { UnknownPolicy::Skip } else { UnknownPolicy::Error };
    let (valid, kept, skipped) = encode_all(&valid_entries, &vocab, policy)?;
    let model_cfg = ModelConfig {
        grapheme_vocab: vocab.graphemes.len(),
        phoneme_vocab: vocab.phonemes.len(),
        ..cfg.model.clone()
    };
    model_cfg.validate()?;
    let resolved = RunConfig {
        model: model_cfg.clone(),
        ..cfg.clone()
    };
    let echo_value = json!({
        "config": resolved,
        "inputs": hashes,
        "valid_skipped": skipped.len(),
    });
    echo("train", &serde_json::to_value(&resolved)?, &hashes);
    log::info!("train: loss weighting {}", model_cfg.weighting());

    create_dir(&a.out)?;
    let mut model: Model<f32> = Model::new(model_cfg, vocab, cfg.train.seed)?;
    let files = RunFiles { dir: a.out.clone() };
    let outcome = fit(&mut model, &train, &valid, &cfg.train, echo_value, Some(&files))?;
    if let Some(best) = outcome.best {
        model.params = best;
    }
    let valid_kept: Vec<LexiconEntry> = kept.iter().map(|&i| valid_entries[i].clone()).collect();
    let summary = evaluate_entries(&model, &valid_kept, &cfg.decode, UnknownPolicy::Error)?;
    write_json(&a.out.join("summary.json"), &summary)?;
    println!(
        "epochs {} | best epoch {} | {}",
        outcome.state.epoch,
        outcome.state.best_epoch.map_or("-".into(), |e| e.to_string()),
        summary.table_row()
    );
    Ok(summary)
}

/// A checkpoint at whichever precision it was saved in.
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

pub fn load_any(path: &Path) -> Result<AnyModel> {
    let m = read_checkpoint_manifest(path)?;
    Ok(if m.precision == f64::TAG {
        AnyModel::F64(load_checkpoint(path)?)
    } else {
        AnyModel::F32(load_checkpoint(path)?)
    })
}

fn decode_overrides(beam_width: Option<usize>, threshold: Option<f64>) -> Vec<(String, Value)> {
    let mut o = Vec::new();
    if let Some(b) = beam_width {
        o.push(("decode.beam_width".to_owned(), Value::from(b)));
    }
    if let Some(t) = threshold {
        o.push(("decode.threshold".to_owned(), Value::from(t)));
    }
    o
}

pub fn cmd_apply(a: &ApplyArgs, config_file: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::resolve(config_file, &decode_overrides(a.beam_width, a.threshold))?;
    let hashes = hashes(&[a.model.as_path(), a.words.as_path()])?;
    echo("apply", &serde_json::to_value(&cfg.decode)?, &hashes);
    let words = parse_wordlist(&a.words, Matching::CaseSensitive)?;
    let label = a
        .model
        .file_name()
        .map_or_else(|| a.model.display().to_string(), |n| n.to_string_lossy().into_owned());
    let dict = match load_any(&a.model)? {
        AnyModel::F32(m) => generate_dictionary(&m, words.words(), &cfg.decode)?,
        AnyModel::F64(m) => generate_dictionary(&m, words.words(), &cfg.decode)?,
    };
    write_text(&a.out, &dict.to_tsv(&label, &cfg.decode, a.emit_flags))?;
    let report_path = a.skip_report.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".skipped.json");
        PathBuf::from(p)
    });
    write_json(&report_path, &json!({"words": words.len(), "emitted": dict.rows.len(), "skipped": dict.skipped}))?;
    log::info!("apply: {} rows, {} skipped", dict.rows.len(), dict.skipped.len());
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs, config_file: Option<&Path>) -> Result<EvalSummary> {
    let cfg = RunConfig::resolve(config_file, &decode_overrides(a.beam_width, None))?;
    let hashes = hashes(&[a.model.as_path(), a.lexicon.as_path()])?;
    echo("evaluate", &serde_json::to_value(&cfg.decode)?, &hashes);
    let (entries, _) = read_lexicon(&a.lexicon)?;
    let policy = if a.skip_unknown { UnknownPolicy::Skip } else { UnknownPolicy::Error };
    let summary = match load_any(&a.model)? {
        AnyModel::F32(m) => evaluate_entries(&m, &entries, &cfg.decode, policy)?,
        AnyModel::F64(m) => evaluate_entries(&m, &entries, &cfg.decode, policy)?,
    };
    let report = json!({"inputs": hashes, "summary": summary});
    match &a.out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    eprintln!("{}", summary.table_row());
    Ok(summary)
}

pub fn cmd_score_asr(a: &ScoreAsrArgs) -> Result<crate::metrics::AsrReport> {
    let hashes = hashes(&[a.reference.as_path(), a.hypothesis.as_path()])?;
    let norm = Normalization {
        map_hyphens: a.map_hyphens,
        ignore_case: a.ignore_case,
    };
    echo("score-asr", &serde_json::to_value(norm)?, &hashes);
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let refs = parse_reference_transcripts(&read(&a.reference)?, &a.reference)?;
    let hyps = parse_hypothesis_transcripts(&read(&a.hypothesis)?, &a.hypothesis)?;
    let report = asr_wer_aer(&refs, &hyps, norm)?;
    println!(
        "WER {:.2} % (S {} D {} I {} / {} words) | AER {:.2} % ({} of {} Anglicisms recognized)",
        report.wer,
        report.substitutions,
        report.deletions,
        report.insertions,
        report.reference_words,
        report.aer,
        report.anglicisms_recognized,
        report.anglicisms_total
    );
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    Ok(report)
}

/// Checks the full multitask loss of a tiny 64-bit model (hidden size 8,
/// seven graphemes and seven phonemes, a batch of two words) against finite
/// differences. Dropout is active with a fixed mask.
pub fn gradcheck_model(seed: u64, weighting: LossWeighting, corrupt: bool) -> Result<GradcheckReport> {
    let entries = [
        LexiconEntry::new("abca", &["p", "q"], Some(true)),
        LexiconEntry::new("ed", &["r", "s", "p"], Some(false)),
    ];
    let vocab = build_vocabs(&entries)?;
    let (examples, _, _) = encode_all(&entries, &vocab, UnknownPolicy::Error)?;
    let batch = crate::lexicon::Batch::from_examples(&examples, &[0, 1]);
    let cfg = ModelConfig {
        embed_dim: 6,
        hidden_dim: 8,
        classifier_hidden1: 6,
        classifier_hidden2: 5,
        alpha: match weighting {
            LossWeighting::Unweighted => None,
            LossWeighting::Alpha(a) => Some(a),
        },
        ..ModelConfig::for_vocab(&vocab)
    };
    let params = init_params::<f64>(&cfg, seed)?;
    // Wider weights than the training init keep gradients well above the
    // finite-difference noise floor. Biases keep their init.
    let mut tensors: Vec<_> = params
        .tensors()
        .into_iter()
        .map(|t| {
            let mut t = t.clone();
            if t.shape().len() == 2 {
                t.data_mut().iter_mut().for_each(|x| *x *= GRADCHECK_WEIGHT_SCALE);
            }
            t
        })
        .collect();
    let layers = cfg.layers;
    finite_difference_gradcheck(
        |tape, leaves| {
            if corrupt {
                tape.inject_fault(Fault::SigmoidBackward);
            }
            let bound = Bound::from_vars(leaves.to_vec(), layers);
            let mode = Mode::Train { seed, step: 0 };
            Ok(batch_loss(tape, &bound, &cfg, &batch, mode)?.total)
        },
        &mut tensors,
        1e-5,
    )
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let mut all_pass = true;
    for seed in a.seed..a.seed + a.seeds.max(1) {
        for w in [LossWeighting::Unweighted, LossWeighting::Alpha(a.alpha)] {
            let r = gradcheck_model(seed, w, a.corrupt_backward)?;
            let pass = r.max_rel_error < GRADCHECK_TOLERANCE;
            all_pass &= pass;
            println!(
                "seed {seed} loss {w}: max relative error {:.3e} over {} coordinates: {}",
                r.max_rel_error,
                r.coordinates,
                if pass { "PASS" } else { "FAIL" }
            );
        }
    }
    Ok(all_pass)
}
