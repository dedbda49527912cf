//! The `palign` command line.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use palign::decoding::DecodeParams;
use palign::eval::{compare_decoders, BleuMode, Chatbot, CompareOptions, PerplexityMode, Strategy};
use palign::io::{write_atomic, write_jsonl};
use palign::lm::{LmConfig, LmModel, Stage};
use palign::nn::Schedule;
use palign::pipeline::{
    finetune_lm, generate_preference_candidates, load_dialog_pairs, load_preferences, loss_curve_csv, DialogPair,
    PreferenceExample, TrainConfig,
};
use palign::reward::{embed_examples, precision_curve_csv, train_reward, RewardConfig, RewardNet, RewardTrainConfig};
use palign::tokenizer::{train_bpe, Vocabulary};
use palign::{Error, Result};

use crate::annotations::{tasks_from_candidates, unix_now};
use crate::store::{DataDir, DATA_DIR_ENV};

#[derive(Debug, Parser)]
#[command(name = "palign", version, about = "Preference-aligned chatbot pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the tokenizer, initialise a model and adapt it to the base corpus.
    TrainLm(TrainLmArgs),
    /// Adapt a phase-1 model to the closed-domain pairs.
    Finetune(FinetuneArgs),
    /// Sample k answers per question into an annotation queue.
    GenCandidates(GenCandidatesArgs),
    /// Train the reward network on a preference dataset.
    TrainReward(TrainRewardArgs),
    /// Interactive terminal chat.
    Chat(ChatArgs),
    /// Compare decoding strategies with BLEU and perplexity.
    Evaluate(EvaluateArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// `none` or `noam`.
    #[arg(long, value_parser = parse_schedule)]
    pub schedule: Option<Schedule>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub epochs: Option<f64>,
    #[arg(long)]
    pub l1_factor: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_schedule(s: &str) -> std::result::Result<Schedule, String> {
    match s {
        "none" => Ok(Schedule::None),
        "noam" => Ok(Schedule::Noam),
        other => Err(format!("unknown schedule {other:?} (expected none or noam)")),
    }
}

impl TrainFlags {
    fn apply(&self, base: TrainConfig) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            schedule: self.schedule.unwrap_or(base.schedule),
            warmup_steps: self.warmup_steps.unwrap_or(base.warmup_steps),
            epochs: self.epochs.unwrap_or(base.epochs),
            l1_factor: self.l1_factor.unwrap_or(base.l1_factor),
            seed: self.seed.unwrap_or(base.seed),
        }
    }
}

#[derive(Debug, Args)]
pub struct DecodeFlags {
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, visible_alias = "n")]
    pub num_candidates: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl DecodeFlags {
    fn apply(&self, base: DecodeParams) -> DecodeParams {
        DecodeParams {
            temperature: self.temperature.unwrap_or(base.temperature),
            max_len: self.max_len.unwrap_or(base.max_len),
            num_candidates: self.num_candidates.unwrap_or(base.num_candidates),
            top_k: self.top_k.unwrap_or(base.top_k),
            top_p: self.top_p.unwrap_or(base.top_p),
            beam_width: self.beam_width.unwrap_or(base.beam_width),
            seed: self.seed.unwrap_or(base.seed),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainLmArgs {
    /// Open-domain dialog pairs (JSON Lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Extra pairs whose text the tokenizer should also cover, e.g. the closed-domain set.
    #[arg(long)]
    pub tokenizer_extra: Vec<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub vocab_size: usize,
    #[arg(long)]
    pub vocab_out: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub max_context: Option<usize>,
    #[arg(long)]
    pub ff_width: Option<usize>,
    #[arg(long)]
    pub untied: bool,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Phase-1 checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Closed-domain dialog pairs (JSON Lines).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct GenCandidatesArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Dialog pairs whose contexts are the questions (JSON Lines).
    #[arg(long)]
    pub questions: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Annotation queue to write (JSON Lines of tasks).
    #[arg(long)]
    pub out: PathBuf,
    /// Prefix of the task ids; defaults to one derived from the current time.
    #[arg(long)]
    pub batch: Option<String>,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Debug, Args)]
pub struct TrainRewardArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Preference examples (JSON Lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Gold dialog pairs used as the all-positive validation set.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub reward: Option<PathBuf>,
    #[arg(long, default_value = "reward")]
    pub strategy: Strategy,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub reward: Option<PathBuf>,
    /// Question/reference pairs (JSON Lines); repeated contexts pool their references.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "sampling,reward,beam")]
    pub strategies: Vec<Strategy>,
    /// `self-generated` or `reference`.
    #[arg(long, default_value = "self-generated", value_parser = parse_ppl_mode)]
    pub perplexity_mode: PerplexityMode,
    /// `corpus` or `sentence-mean`.
    #[arg(long, default_value = "corpus", value_parser = parse_bleu_mode)]
    pub bleu_mode: BleuMode,
    /// Report JSON destination.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-question CSV destination.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

fn parse_ppl_mode(s: &str) -> std::result::Result<PerplexityMode, String> {
    match s {
        "self-generated" => Ok(PerplexityMode::SelfGenerated),
        "reference" => Ok(PerplexityMode::Reference),
        other => Err(format!("unknown perplexity mode {other:?}")),
    }
}

fn parse_bleu_mode(s: &str) -> std::result::Result<BleuMode, String> {
    match s {
        "corpus" => Ok(BleuMode::Corpus),
        "sentence-mean" => Ok(BleuMode::SentenceMean),
        other => Err(format!("unknown BLEU mode {other:?}")),
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[arg(long, env = DATA_DIR_ENV, default_value = "palign-data")]
    pub data_dir: PathBuf,
}

fn log_progress(label: &str) -> impl FnMut(f64) + '_ {
    let mut last = -1i64;
    move |f| {
        let pct = (f * 100.0).floor() as i64;
        if pct / 10 != last / 10 {
            eprintln!("{label}: {pct}%");
            last = pct;
        }
    }
}

fn train_lm_cmd(a: &TrainLmArgs) -> Result<()> {
    let base = load_dialog_pairs(&a.data)?;
    let mut extra: Vec<DialogPair> = Vec::new();
    for p in &a.tokenizer_extra {
        extra.extend(load_dialog_pairs(p)?);
    }
    let texts: Vec<&str> = base.iter().chain(&extra).flat_map(|p| [p.context.as_str(), p.response.as_str()]).collect();
    let vocab = train_bpe(texts, a.vocab_size)?;
    vocab.save(&a.vocab_out)?;
    eprintln!("vocabulary: {} tokens -> {}", vocab.size(), a.vocab_out.display());
    let d = LmConfig::default();
    let config = LmConfig {
        vocab_size: vocab.size(),
        d_model: a.d_model.unwrap_or(d.d_model),
        n_layers: a.n_layers.unwrap_or(d.n_layers),
        n_heads: a.n_heads.unwrap_or(d.n_heads),
        max_context: a.max_context.unwrap_or(d.max_context),
        ff_width: a.ff_width.unwrap_or(d.ff_width),
        tie_embeddings: !a.untied,
    };
    let train = a.train.apply(TrainConfig::phase1());
    let mut lm = LmModel::new(config, train.seed)?;
    let mut progress = log_progress("phase 1");
    let curve = palign::pipeline::finetune_lm_with_progress(&mut lm, &vocab, &base, &train, Stage::Phase1, &mut progress)?;
    lm.save(&a.out, &vocab_ref(&a.vocab_out))?;
    if let Some(path) = &a.curve {
        write_atomic(path, loss_curve_csv(&curve).as_bytes())?;
    }
    eprintln!("phase 1: {} steps, final loss {:.4} -> {}", curve.len(), last_loss(&curve), a.out.display());
    Ok(())
}

fn vocab_ref(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |f| f.to_string_lossy().into_owned())
}

fn last_loss(curve: &[palign::pipeline::LossPoint]) -> f64 {
    curve.last().map_or(f64::NAN, |p| p.loss)
}

fn finetune_cmd(a: &FinetuneArgs) -> Result<()> {
    let (mut lm, _) = LmModel::load(&a.model)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let pairs = load_dialog_pairs(&a.data)?;
    let train = a.train.apply(TrainConfig::phase2());
    let curve = finetune_lm(&mut lm, &vocab, &pairs, &train, Stage::Phase2)?;
    lm.save(&a.out, &vocab_ref(&a.vocab))?;
    if let Some(path) = &a.curve {
        write_atomic(path, loss_curve_csv(&curve).as_bytes())?;
    }
    eprintln!("phase 2: {} steps, final loss {:.4} -> {}", curve.len(), last_loss(&curve), a.out.display());
    Ok(())
}

fn gen_candidates_cmd(a: &GenCandidatesArgs) -> Result<()> {
    let (lm, _) = LmModel::load(&a.model)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let questions: Vec<String> = load_dialog_pairs(&a.questions)?.into_iter().map(|p| p.context).collect();
    let params = a.decode.apply(DecodeParams::plain(1.0, 200, 0));
    let candidates = generate_preference_candidates(&lm, &vocab, &questions, a.k, &params)?;
    let batch = a.batch.clone().unwrap_or_else(|| format!("b{}", unix_now()));
    let tasks = tasks_from_candidates(&candidates, &batch);
    write_jsonl(&a.out, &tasks)?;
    eprintln!("{} questions x {} answers -> {} tasks in {}", questions.len(), a.k, tasks.len(), a.out.display());
    Ok(())
}

fn train_reward_cmd(a: &TrainRewardArgs) -> Result<()> {
    let (lm, _) = LmModel::load(&a.model)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let train = embed_examples(&lm, &vocab, &load_preferences(&a.data)?)?;
    let validation = match &a.validation {
        Some(p) => {
            let gold: Vec<PreferenceExample> = load_dialog_pairs(p)?
                .into_iter()
                .map(|g| PreferenceExample { question: g.context, answer: g.response, score: 1.0 })
                .collect();
            embed_examples(&lm, &vocab, &gold)?
        }
        None => Vec::new(),
    };
    let d = RewardTrainConfig::default();
    let config = RewardTrainConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        seed: a.seed.unwrap_or(d.seed),
    };
    let mut net = RewardNet::new(RewardConfig::new(lm.config().d_model), config.seed)?;
    let curve = train_reward(&mut net, &train, &validation, &config)?;
    net.save(&a.out)?;
    if let Some(path) = &a.curve {
        write_atomic(path, precision_curve_csv(&curve).as_bytes())?;
    }
    if let Some(last) = curve.last() {
        let val = last.val_precision.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        eprintln!(
            "{} examples, {} epochs: train precision {:.3}, validation precision {val} -> {}",
            train.len(),
            curve.len(),
            last.train_precision,
            a.out.display()
        );
    }
    Ok(())
}

fn chat_cmd(a: &ChatArgs) -> Result<()> {
    let (lm, _) = LmModel::load(&a.model)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let reward = a.reward.as_deref().map(RewardNet::load).transpose()?;
    if a.strategy == Strategy::Reward && reward.is_none() {
        return Err(Error::Usage("--strategy reward needs --reward".into()));
    }
    let bot = Chatbot { lm: &lm, reward: reward.as_ref(), vocab: &vocab };
    let mut params = a.decode.apply(DecodeParams::default());
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    loop {
        print!("> ");
        out.flush()?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            break;
        }
        let question = line.trim();
        if question.is_empty() {
            continue;
        }
        if question == "/quit" {
            break;
        }
        let answer = bot.answer(question, a.strategy, &params)?;
        match answer.score {
            Some(s) => println!("{} [{s:.3}]", answer.text),
            None => println!("{}", answer.text),
        }
        params.seed = params.seed.wrapping_add(1);
    }
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let (lm, _) = LmModel::load(&a.model)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let reward = a.reward.as_deref().map(RewardNet::load).transpose()?;
    let pairs = load_dialog_pairs(&a.data)?;
    let mut questions: Vec<String> = Vec::new();
    let mut references: Vec<Vec<String>> = Vec::new();
    for p in pairs {
        match questions.iter().position(|q| *q == p.context) {
            Some(i) => references[i].push(p.response),
            None => {
                questions.push(p.context);
                references.push(vec![p.response]);
            }
        }
    }
    let bot = Chatbot { lm: &lm, reward: reward.as_ref(), vocab: &vocab };
    let options = CompareOptions {
        perplexity_mode: a.perplexity_mode,
        bleu_mode: a.bleu_mode,
        lm_checkpoint: Some(a.model.display().to_string()),
        reward_checkpoint: a.reward.as_ref().map(|p| p.display().to_string()),
    };
    let params = a.decode.apply(DecodeParams::default());
    let report = compare_decoders(&bot, &questions, &references, &a.strategies, &params, &options)?;
    write_atomic(&a.out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    if let Some(path) = &a.csv {
        write_atomic(path, report.to_csv()?.as_bytes())?;
    }
    print!("{}", report.render_table());
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> Result<()> {
    let dir = DataDir::open(&a.data_dir)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(crate::api::serve(dir, &a.addr))?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainLm(a) => train_lm_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::GenCandidates(a) => gen_candidates_cmd(a),
        Command::TrainReward(a) => train_reward_cmd(a),
        Command::Chat(a) => chat_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

/// Parses the process arguments and runs. Usage errors exit with 2, failures with 1.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
