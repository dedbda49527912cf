//! Pipeline stages run as background jobs against a data directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use palign::decoding::DecodeParams;
use palign::eval::{compare_decoders, BleuMode, Chatbot, CompareOptions, PerplexityMode, Strategy};
use palign::io::{write_atomic, write_jsonl};
use palign::lm::{LmConfig, LmModel, Stage};
use palign::pipeline::{
    finetune_lm_with_progress, generate_preference_candidates, load_dialog_pairs, load_preferences, loss_curve_csv,
    PreferenceExample, TrainConfig,
};
use palign::reward::{embed_examples, precision_curve_csv, train_reward_with_progress, RewardConfig, RewardNet, RewardTrainConfig};
use palign::tokenizer::{train_bpe, Vocabulary};
use palign::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::annotations::{tasks_from_candidates, unix_now};
use crate::store::{promote, DataDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobKind {
    FinetunePhase1,
    FinetunePhase2,
    GenCandidates,
    TrainReward,
    Evaluate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: f64,
    pub artifacts: Vec<String>,
    pub error: Option<String>,
    pub config: serde_json::Value,
    pub created_at: u64,
    pub finished_at: Option<u64>,
}

/// Tokenizer training, model init and base-corpus adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase1Job {
    pub vocab_size: usize,
    pub lm: LmConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for Phase1Job {
    fn default() -> Self {
        Self { vocab_size: 512, lm: LmConfig::default(), train: TrainConfig::phase1(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase2Job {
    pub train: TrainConfig,
}

impl Default for Phase2Job {
    fn default() -> Self {
        Self { train: TrainConfig::phase2() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenCandidatesJob {
    pub k: usize,
    pub params: DecodeParams,
}

impl Default for GenCandidatesJob {
    fn default() -> Self {
        Self { k: 5, params: DecodeParams::plain(1.0, 200, 0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRewardJob {
    pub train: RewardTrainConfig,
    pub hidden: [usize; 2],
}

impl Default for TrainRewardJob {
    fn default() -> Self {
        Self { train: RewardTrainConfig::default(), hidden: RewardConfig::new(1).hidden }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateJob {
    pub strategies: Vec<Strategy>,
    pub params: DecodeParams,
    pub perplexity_mode: PerplexityMode,
    pub bleu_mode: BleuMode,
}

impl Default for EvaluateJob {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            params: DecodeParams::default(),
            perplexity_mode: PerplexityMode::default(),
            bleu_mode: BleuMode::default(),
        }
    }
}

fn parse<T: DeserializeOwned>(config: &serde_json::Value) -> Result<T> {
    let value = if config.is_null() { serde_json::json!({}) } else { config.clone() };
    serde_json::from_value(value).map_err(|e| Error::InvalidInput(format!("job config: {e}")))
}

/// Checks that `config` parses and validates for `kind`.
pub fn validate_config(kind: JobKind, config: &serde_json::Value) -> Result<()> {
    match kind {
        JobKind::FinetunePhase1 => parse::<Phase1Job>(config)?.train.validate(),
        JobKind::FinetunePhase2 => parse::<Phase2Job>(config)?.train.validate(),
        JobKind::GenCandidates => {
            let job: GenCandidatesJob = parse(config)?;
            if job.k == 0 {
                return Err(Error::InvalidInput("k must be at least 1".into()));
            }
            job.params.validate()
        }
        JobKind::TrainReward => {
            let job: TrainRewardJob = parse(config)?;
            if job.train.batch_size == 0 {
                return Err(Error::InvalidInput("batch_size must be at least 1".into()));
            }
            Ok(())
        }
        JobKind::Evaluate => {
            let job: EvaluateJob = parse(config)?;
            if job.strategies.is_empty() {
                return Err(Error::InvalidInput("no strategies selected".into()));
            }
            job.params.validate()
        }
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{what} not found at {}", path.display())))
    }
}

fn load_lm(dir: &DataDir, path: &Path) -> Result<(LmModel, Vocabulary)> {
    require(path, "model checkpoint")?;
    require(&dir.vocab(), "vocabulary")?;
    let (lm, _) = LmModel::load(path)?;
    Ok((lm, Vocabulary::load(&dir.vocab())?))
}

fn gold_as_preferences(dir: &DataDir) -> Result<Vec<PreferenceExample>> {
    Ok(load_dialog_pairs(&dir.gold_dataset())?
        .into_iter()
        .map(|g| PreferenceExample { question: g.context, answer: g.response, score: 1.0 })
        .collect())
}

/// Runs one job to completion. Outputs are written under the job's staging
/// directory and moved into place only once everything succeeded. Returns the
/// artifact paths relative to the data directory.
pub fn execute(
    dir: &DataDir,
    job_id: &str,
    kind: JobKind,
    config: &serde_json::Value,
    progress: &mut dyn FnMut(f64),
) -> Result<Vec<String>> {
    validate_config(kind, config)?;
    let staging = dir.staging(job_id);
    fs::create_dir_all(&staging)?;
    let outcome = execute_staged(dir, &staging, job_id, kind, config, progress);
    fs::remove_dir_all(&staging)?;
    if outcome.is_ok() {
        progress(1.0);
    }
    outcome
}

fn execute_staged(
    dir: &DataDir,
    staging: &Path,
    job_id: &str,
    kind: JobKind,
    config: &serde_json::Value,
    progress: &mut dyn FnMut(f64),
) -> Result<Vec<String>> {
    // (staged file, final destination)
    let mut moves: Vec<(String, std::path::PathBuf)> = Vec::new();
    match kind {
        JobKind::FinetunePhase1 => {
            let job: Phase1Job = parse(config)?;
            require(&dir.base_dataset(), "base dataset")?;
            let base = load_dialog_pairs(&dir.base_dataset())?;
            let gold = if dir.gold_dataset().exists() { load_dialog_pairs(&dir.gold_dataset())? } else { Vec::new() };
            let texts: Vec<&str> = base.iter().chain(&gold).flat_map(|p| [p.context.as_str(), p.response.as_str()]).collect();
            let vocab = train_bpe(texts, job.vocab_size)?;
            let mut lm = LmModel::new(LmConfig { vocab_size: vocab.size(), ..job.lm }, job.seed)?;
            let curve = finetune_lm_with_progress(&mut lm, &vocab, &base, &job.train, Stage::Phase1, progress)?;
            vocab.save(&staging.join("vocab.txt"))?;
            lm.save(&staging.join("phase1.paln"), "vocab.txt")?;
            write_atomic(&staging.join("phase1.csv"), loss_curve_csv(&curve).as_bytes())?;
            moves.push(("vocab.txt".into(), dir.vocab()));
            moves.push(("phase1.paln".into(), dir.phase1_checkpoint()));
            moves.push(("phase1.json".into(), LmModel::sidecar_path(&dir.phase1_checkpoint())));
            moves.push(("phase1.csv".into(), dir.curve("phase1")));
        }
        JobKind::FinetunePhase2 => {
            let job: Phase2Job = parse(config)?;
            let (mut lm, vocab) = load_lm(dir, &dir.phase1_checkpoint())?;
            require(&dir.gold_dataset(), "gold dataset")?;
            let gold = load_dialog_pairs(&dir.gold_dataset())?;
            let curve = finetune_lm_with_progress(&mut lm, &vocab, &gold, &job.train, Stage::Phase2, progress)?;
            lm.save(&staging.join("lm.paln"), "vocab.txt")?;
            write_atomic(&staging.join("phase2.csv"), loss_curve_csv(&curve).as_bytes())?;
            moves.push(("lm.paln".into(), dir.lm_checkpoint()));
            moves.push(("lm.json".into(), LmModel::sidecar_path(&dir.lm_checkpoint())));
            moves.push(("phase2.csv".into(), dir.curve("phase2")));
        }
        JobKind::GenCandidates => {
            let job: GenCandidatesJob = parse(config)?;
            let (lm, vocab) = load_lm(dir, &dir.lm_checkpoint())?;
            require(&dir.gold_dataset(), "gold dataset")?;
            let questions: Vec<String> = load_dialog_pairs(&dir.gold_dataset())?.into_iter().map(|g| g.context).collect();
            let candidates = generate_preference_candidates(&lm, &vocab, &questions, job.k, &job.params)?;
            let tasks = tasks_from_candidates(&candidates, job_id);
            write_jsonl(&staging.join("tasks.jsonl"), &tasks)?;
            moves.push(("tasks.jsonl".into(), dir.tasks()));
        }
        JobKind::TrainReward => {
            let job: TrainRewardJob = parse(config)?;
            let (lm, vocab) = load_lm(dir, &dir.lm_checkpoint())?;
            require(&dir.preferences(), "preference dataset")?;
            let train = embed_examples(&lm, &vocab, &load_preferences(&dir.preferences())?)?;
            let validation = if dir.gold_dataset().exists() {
                embed_examples(&lm, &vocab, &gold_as_preferences(dir)?)?
            } else {
                Vec::new()
            };
            let cfg = RewardConfig { hidden: job.hidden, ..RewardConfig::new(lm.config().d_model) };
            let mut net = RewardNet::new(cfg, job.train.seed)?;
            let curve = train_reward_with_progress(&mut net, &train, &validation, &job.train, progress)?;
            net.save(&staging.join("reward.paln"))?;
            write_atomic(&staging.join("reward.csv"), precision_curve_csv(&curve).as_bytes())?;
            moves.push(("reward.paln".into(), dir.reward_checkpoint()));
            moves.push(("reward.json".into(), RewardNet::sidecar_path(&dir.reward_checkpoint())));
            moves.push(("reward.csv".into(), dir.curve("reward")));
        }
        JobKind::Evaluate => {
            let job: EvaluateJob = parse(config)?;
            let (lm, vocab) = load_lm(dir, &dir.lm_checkpoint())?;
            let reward = if job.strategies.contains(&Strategy::Reward) {
                require(&dir.reward_checkpoint(), "reward checkpoint")?;
                Some(RewardNet::load(&dir.reward_checkpoint())?)
            } else {
                None
            };
            require(&dir.gold_dataset(), "gold dataset")?;
            let gold = load_dialog_pairs(&dir.gold_dataset())?;
            let mut grouped: BTreeMap<String, Vec<String>> = BTreeMap::new();
            let mut questions = Vec::new();
            for g in &gold {
                if !grouped.contains_key(&g.context) {
                    questions.push(g.context.clone());
                }
                grouped.entry(g.context.clone()).or_default().push(g.response.clone());
            }
            let references: Vec<Vec<String>> = questions.iter().map(|q| grouped[q].clone()).collect();
            let bot = Chatbot { lm: &lm, reward: reward.as_ref(), vocab: &vocab };
            let options = CompareOptions {
                perplexity_mode: job.perplexity_mode,
                bleu_mode: job.bleu_mode,
                lm_checkpoint: Some("checkpoints/lm.paln".into()),
                reward_checkpoint: reward.as_ref().map(|_| "checkpoints/reward.paln".into()),
            };
            let report = compare_decoders(&bot, &questions, &references, &job.strategies, &job.params, &options)?;
            write_atomic(&staging.join("eval.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
            write_atomic(&staging.join("eval.csv"), report.to_csv()?.as_bytes())?;
            moves.push(("eval.json".into(), dir.report("eval.json")));
            moves.push(("eval.csv".into(), dir.report("eval.csv")));
        }
    }
    let mut artifacts = Vec::with_capacity(moves.len());
    for (name, dest) in &moves {
        promote(&staging.join(name), dest)?;
        artifacts.push(dest.strip_prefix(dir.root()).unwrap_or(dest).display().to_string());
    }
    Ok(artifacts)
}

/// Job records, persisted one JSON file per job. At most one job runs.
#[derive(Debug, Default)]
pub struct JobTable {
    jobs: BTreeMap<u64, JobRecord>,
    next: u64,
    running: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum SubmitError {
    #[error("job {0} is still running")]
    Busy(String),
    #[error(transparent)]
    Invalid(#[from] Error),
}

fn numeric(id: &str) -> Option<u64> {
    id.strip_prefix("job-")?.parse().ok()
}

impl JobTable {
    /// Loads persisted records. Jobs left queued or running by a previous
    /// process are marked failed, and their staging output is discarded.
    pub fn open(dir: &DataDir) -> Result<Self> {
        let mut table = Self::default();
        for entry in fs::read_dir(dir.jobs())? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let mut rec: JobRecord = serde_json::from_str(&fs::read_to_string(&path)?)?;
                if matches!(rec.status, JobStatus::Queued | JobStatus::Running) {
                    rec.status = JobStatus::Failed;
                    rec.error = Some("interrupted by a service restart".into());
                    rec.finished_at = Some(unix_now());
                    write_atomic(&path, serde_json::to_string_pretty(&rec)?.as_bytes())?;
                }
                if let Some(n) = numeric(&rec.id) {
                    table.next = table.next.max(n + 1);
                    table.jobs.insert(n, rec);
                }
            }
        }
        dir.clear_staging()?;
        Ok(table)
    }

    pub fn list(&self) -> Vec<JobRecord> {
        self.jobs.values().cloned().collect()
    }

    pub fn get(&self, id: &str) -> Option<&JobRecord> {
        self.jobs.get(&numeric(id)?)
    }

    pub fn running(&self) -> Option<&str> {
        self.running.as_deref()
    }

    fn persist(dir: &DataDir, rec: &JobRecord) -> Result<()> {
        write_atomic(&dir.jobs().join(format!("{}.json", rec.id)), serde_json::to_string_pretty(rec)?.as_bytes())
    }

    /// Registers a job in the running state, or refuses while another runs.
    pub fn start(&mut self, dir: &DataDir, kind: JobKind, config: serde_json::Value) -> Result<JobRecord, SubmitError> {
        if let Some(id) = &self.running {
            return Err(SubmitError::Busy(id.clone()));
        }
        validate_config(kind, &config)?;
        let n = self.next;
        let rec = JobRecord {
            id: format!("job-{n}"),
            kind,
            status: JobStatus::Running,
            progress: 0.0,
            artifacts: Vec::new(),
            error: None,
            config,
            created_at: unix_now(),
            finished_at: None,
        };
        Self::persist(dir, &rec)?;
        self.next += 1;
        self.running = Some(rec.id.clone());
        self.jobs.insert(n, rec.clone());
        Ok(rec)
    }

    pub fn set_progress(&mut self, id: &str, fraction: f64) {
        if let Some(rec) = numeric(id).and_then(|n| self.jobs.get_mut(&n)) {
            rec.progress = fraction.clamp(0.0, 1.0);
        }
    }

    pub fn finish(&mut self, dir: &DataDir, id: &str, outcome: Result<Vec<String>>) -> Result<JobRecord> {
        let rec = numeric(id)
            .and_then(|n| self.jobs.get_mut(&n))
            .ok_or_else(|| Error::InvalidInput(format!("no job {id}")))?;
        match outcome {
            Ok(artifacts) => {
                rec.status = JobStatus::Done;
                rec.progress = 1.0;
                rec.artifacts = artifacts;
            }
            Err(e) => {
                rec.status = JobStatus::Failed;
                rec.error = Some(e.to_string());
            }
        }
        rec.finished_at = Some(unix_now());
        if self.running.as_deref() == Some(id) {
            self.running = None;
        }
        let rec = rec.clone();
        Self::persist(dir, &rec)?;
        Ok(rec)
    }
}
