//! The training loop: one *session* trains a selected sub-model on one
//! cached corpus until battery, patience, or the epoch budget stops it;
//! a *run* chains sessions over rounds, reloading the best-WER checkpoint
//! between rounds so improvements compound while the cache is rebuilt
//! fresh each time.
//!
//! Every session follows the same shape: snapshot the device, pick a
//! sub-model category from the RAM ratio (or skip if resources are too
//! tight), freeze everything below the trainable suffix, standardise
//! features with statistics from the session's own training split, then
//! alternate mini-batch CTC updates with a full validation decode. The
//! best validation WER seen so far — not the last — is what gets
//! checkpointed.

pub mod checkpoint;
pub mod stopping;

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, CorpusPreset, SessionCache, SpeakerProfile, Utterance};
use crate::ctc::{self, CtcError};
use crate::ctc_eval::{labels_to_text, pooled_wer, TextError};
use crate::device::{DeviceError, DeviceProfile};
use crate::features::{log_mel, FeatureError, FeatureMatrix};
use crate::net::{AdamHyper, Gradients, NetError, ToyAcousticModel};
use crate::seeding;
use crate::topology::{select_training_mode, SelectionThresholds, SubModelSpec, TopologyError};

use checkpoint::{config_hash, save_checkpoint, CheckpointError, CheckpointMeta};
use stopping::{PatienceMode, StopReason, StoppingConfig, StoppingError, StoppingMachine};

/// Variance floor applied when standardising features, so a constant mel
/// bin cannot produce a division by ~zero.
pub const FEATURE_STD_FLOOR: f64 = 1e-6;

/// Header of the per-epoch CSV log.
pub const EPOCH_CSV_HEADER: &str =
    "round,epoch,submodel,train_loss,val_wer,battery_pct,ram_ratio,stop_reason";

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("session cache is unusable: {0}")]
    EmptyCache(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Stopping(#[from] StoppingError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Knobs for one training run. Defaults mirror the small-device setting:
/// conservative learning rate, small batches, a 20% battery floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Epoch budget T per session.
    pub max_epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub thresholds: SelectionThresholds,
    /// Battery percentage b at or below which training stops.
    pub battery_floor_pct: f64,
    /// Patience p: epochs without improvement tolerated before stopping.
    pub patience: u64,
    pub patience_mode: PatienceMode,
    /// Number of personalisation rounds chained in one run.
    pub rounds: u64,
    /// Mini-batch gradients are clipped to this global L2 norm.
    pub grad_clip_norm: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            max_epochs: 8,
            batch_size: 5,
            learning_rate: 1e-5,
            thresholds: SelectionThresholds::default(),
            battery_floor_pct: 20.0,
            patience: 2,
            patience_mode: PatienceMode::default(),
            rounds: 1,
            grad_clip_norm: 5.0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        if self.batch_size == 0 {
            return Err(SessionError::InvalidConfig("batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(SessionError::InvalidConfig(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.rounds == 0 {
            return Err(SessionError::InvalidConfig("rounds must be ≥ 1".into()));
        }
        if !(self.grad_clip_norm.is_finite() && self.grad_clip_norm > 0.0) {
            return Err(SessionError::InvalidConfig(format!(
                "grad_clip_norm must be positive and finite, got {}",
                self.grad_clip_norm
            )));
        }
        self.thresholds.validate()?;
        // The stopping parameters share validation with the state machine.
        self.stopping_config().validate().map_err(|e| match e {
            StoppingError::Invalid(msg) => SessionError::InvalidConfig(msg),
        })
    }

    pub fn stopping_config(&self) -> StoppingConfig {
        StoppingConfig {
            max_epochs: self.max_epochs,
            patience: self.patience,
            battery_floor_pct: self.battery_floor_pct,
            mode: self.patience_mode,
        }
    }
}

/// What ended up in the `stop_reason` CSV column for a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogStopReason {
    /// Training continued after this epoch.
    None,
    Battery,
    Patience,
    MaxEpochs,
    /// The whole session was skipped: RAM ratio below every threshold.
    Skipped,
}

impl From<StopReason> for LogStopReason {
    fn from(r: StopReason) -> Self {
        match r {
            StopReason::Battery => LogStopReason::Battery,
            StopReason::Patience => LogStopReason::Patience,
            StopReason::MaxEpochs => LogStopReason::MaxEpochs,
        }
    }
}

impl fmt::Display for LogStopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LogStopReason::None => "none",
            LogStopReason::Battery => "battery",
            LogStopReason::Patience => "patience",
            LogStopReason::MaxEpochs => "max_epochs",
            LogStopReason::Skipped => "skipped",
        };
        f.write_str(s)
    }
}

/// One CSV row. Epoch numbers are 1-based; `epoch == 0` marks a session
/// that ran no epochs at all (battery dead on arrival, or skipped).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub round: u64,
    pub epoch: u64,
    pub submodel: Option<crate::topology::Category>,
    pub train_loss: Option<f64>,
    pub val_wer: Option<f64>,
    pub battery_pct: f64,
    pub ram_ratio: f64,
    pub stop_reason: LogStopReason,
}

impl EpochLog {
    /// The row as a CSV line (no trailing newline). Floats use six
    /// decimals; absent values are empty cells.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let submodel = self
            .submodel
            .map(|c| c.to_string())
            .unwrap_or_else(|| "none".to_string());
        format!(
            "{},{},{},{},{},{:.6},{:.6},{}",
            self.round,
            self.epoch,
            submodel,
            opt(self.train_loss),
            opt(self.val_wer),
            self.battery_pct,
            self.ram_ratio,
            self.stop_reason,
        )
    }
}

/// Renders header + rows with LF line endings, trailing newline included.
pub fn logs_to_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for log in logs {
        out.push_str(&log.csv_row());
        out.push('\n');
    }
    out
}

pub fn write_epoch_csv(path: &Path, logs: &[EpochLog]) -> Result<(), std::io::Error> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(logs_to_csv(logs).as_bytes())
}

/// How a session ended.
#[derive(Debug, Clone, PartialEq)]
pub enum SessionStatus {
    Completed { stop_reason: StopReason },
    /// No sub-model fit the available RAM; nothing was trained.
    Skipped { ram_ratio: f64 },
}

/// Everything a caller learns from one session.
#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub round: u64,
    pub status: SessionStatus,
    pub submodel: Option<SubModelSpec>,
    /// Pooled validation WER before any update this session.
    pub initial_wer: Option<f64>,
    /// Best (lowest) pooled validation WER reached, and the epoch that
    /// reached it.
    pub best_wer: Option<f64>,
    pub best_epoch: Option<u64>,
    pub epochs_run: u64,
    /// Path of the best-WER checkpoint, if any epoch improved on +inf.
    pub checkpoint_path: Option<PathBuf>,
    pub logs: Vec<EpochLog>,
}

/// Per-session inputs that the round loop varies.
#[derive(Debug)]
pub struct SessionContext<'a> {
    pub device: &'a DeviceProfile,
    pub config: &'a SessionConfig,
    /// 1-based round number; only used for naming and logging.
    pub round: u64,
    /// Device time index at which this session starts. Battery and RAM
    /// are read at `start_time + epochs_run_so_far`, so consecutive
    /// rounds see a monotone battery.
    pub start_time: u64,
    pub checkpoint_dir: &'a Path,
    /// Seed the corpus for this session was built from; recorded in
    /// checkpoint metadata so evaluation can rebuild the exact data.
    pub corpus_seed: u64,
    /// Base seed for the per-epoch shuffle streams.
    pub shuffle_seed: u64,
}

struct PreparedUtterance<'a> {
    utterance: &'a Utterance,
    feats: FeatureMatrix,
    labels: Vec<usize>,
}

/// Featurises a split and standardises it with the given statistics.
fn prepare_split<'a>(
    utterances: &[&'a Utterance],
    mean: &[f64],
    std: &[f64],
) -> Result<Vec<PreparedUtterance<'a>>, SessionError> {
    utterances
        .iter()
        .map(|u| {
            let mut feats = log_mel(&u.clip)?;
            feats.apply_normalisation(mean, std);
            Ok(PreparedUtterance {
                utterance: u,
                feats,
                labels: u.transcript.labels(),
            })
        })
        .collect()
}

/// Per-bin mean and standard deviation over every frame of the training
/// split (population variance, floored at [`FEATURE_STD_FLOOR`]).
fn feature_statistics(features: &[FeatureMatrix]) -> (Vec<f64>, Vec<f64>) {
    let n_mels = features[0].n_mels();
    let mut mean = vec![0.0; n_mels];
    let mut count = 0usize;
    for feats in features {
        for frame in feats.frames() {
            for (i, &v) in frame.iter().enumerate() {
                mean[i] += v;
            }
        }
        count += feats.n_frames();
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; n_mels];
    for feats in features {
        for frame in feats.frames() {
            for (i, &v) in frame.iter().enumerate() {
                let d = v - mean[i];
                var[i] += d * d;
            }
        }
    }
    let std = var
        .iter()
        .map(|&v| (v / count as f64).sqrt().max(FEATURE_STD_FLOOR))
        .collect();
    (mean, std)
}

/// Pooled WER of the model over an already-featurised split.
fn evaluate_split(
    model: &ToyAcousticModel,
    split: &[PreparedUtterance<'_>],
) -> Result<f64, SessionError> {
    let mut hyps = Vec::with_capacity(split.len());
    for p in split {
        let (logits, _) = model.forward(&p.feats)?;
        hyps.push(labels_to_text(&ctc::greedy_decode(&logits)));
    }
    let pairs = split
        .iter()
        .zip(&hyps)
        .map(|(p, h)| (&p.utterance.transcript, h.as_str()));
    Ok(pooled_wer(pairs)?)
}

/// Runs one training session against an already-built cache.
///
/// The model is mutated in place; its best state (by validation WER) is
/// additionally persisted to `round-{round}-best.ckpt` under the context's
/// checkpoint directory. Optimiser state never survives across sessions.
pub fn run_session(
    model: &mut ToyAcousticModel,
    cache: &SessionCache,
    ctx: &SessionContext<'_>,
) -> Result<SessionOutcome, SessionError> {
    ctx.config.validate()?;
    ctx.device.validate()?;
    let train_utts: Vec<&Utterance> = cache.train().collect();
    let val_utts: Vec<&Utterance> = cache.validation().collect();
    if train_utts.is_empty() {
        return Err(SessionError::EmptyCache(
            "no utterances in the training split".into(),
        ));
    }
    if val_utts.is_empty() {
        return Err(SessionError::EmptyCache(
            "no utterances in the validation split".into(),
        ));
    }

    // Resource check and sub-model selection at session start.
    let start_snap = ctx.device.snapshot(ctx.start_time);
    let topology = model.topology();
    let selected = select_training_mode(&start_snap, &ctx.config.thresholds, &topology)?;
    let spec = match selected {
        Some(spec) => spec,
        None => {
            let ram_ratio = start_snap.ram_ratio();
            log::info!(
                "round {}: skipped, ram ratio {ram_ratio:.4} below every threshold",
                ctx.round
            );
            let logs = vec![EpochLog {
                round: ctx.round,
                epoch: 0,
                submodel: None,
                train_loss: None,
                val_wer: None,
                battery_pct: start_snap.battery_pct,
                ram_ratio,
                stop_reason: LogStopReason::Skipped,
            }];
            return Ok(SessionOutcome {
                round: ctx.round,
                status: SessionStatus::Skipped { ram_ratio },
                submodel: None,
                initial_wer: None,
                best_wer: None,
                best_epoch: None,
                epochs_run: 0,
                checkpoint_path: None,
                logs,
            });
        }
    };
    model.apply_submodel(&spec)?;
    log::info!(
        "round {}: training {} sub-model ({} of {} layers, {:.1}% of parameters)",
        ctx.round,
        spec.category,
        spec.trainable_layer_count,
        topology.layers().len(),
        spec.param_fraction * 100.0
    );

    // Featurise once; statistics come from the training split only.
    let raw_train: Vec<FeatureMatrix> = train_utts
        .iter()
        .map(|u| log_mel(&u.clip))
        .collect::<Result<_, _>>()?;
    let (mean, std) = feature_statistics(&raw_train);
    let train = prepare_split(&train_utts, &mean, &std)?;
    let val = prepare_split(&val_utts, &mean, &std)?;

    let initial_wer = evaluate_split(model, &val)?;
    log::info!("round {}: initial validation WER {initial_wer:.4}", ctx.round);

    // Fresh optimiser per session: checkpoints carry no Adam moments.
    model.reset_adam();
    let hyper = AdamHyper {
        lr: ctx.config.learning_rate,
        ..AdamHyper::default()
    };

    let mut machine = StoppingMachine::new(ctx.config.stopping_config())?;
    let mut logs: Vec<EpochLog> = Vec::new();
    let mut checkpoint_path: Option<PathBuf> = None;

    loop {
        let snap = ctx.device.snapshot(ctx.start_time + machine.epochs_run());
        if machine.before_epoch(snap.battery_pct).is_some() {
            break;
        }
        let epoch = machine.epochs_run() + 1;

        // Deterministic per-(round, epoch) shuffle stream.
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = seeding::rng_from(
            ctx.shuffle_seed,
            &format!("shuffle-r{}-e{}", ctx.round, epoch),
        );
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch in order.chunks(ctx.config.batch_size) {
            let mut grads = Gradients::default();
            let mut used = 0usize;
            for &idx in batch {
                let p = &train[idx];
                let (logits, fwd_cache) = model.forward(&p.feats)?;
                let result = match ctc::ctc_loss_grad(&logits, &p.labels) {
                    Ok(r) => r,
                    Err(CtcError::InfeasibleAlignment { frames, required }) => {
                        log::warn!(
                            "utterance {} skipped: {frames} frames cannot align {required} \
                             extended labels",
                            p.utterance.id
                        );
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                grads.accumulate(&model.backward(&fwd_cache, &result.grad_logits)?);
                loss_sum += result.loss;
                loss_count += 1;
                used += 1;
            }
            if used == 0 {
                continue;
            }
            grads.scale(1.0 / used as f64);
            grads.clip_to_global_norm(ctx.config.grad_clip_norm);
            model.adam_step(&grads, &hyper)?;
        }
        let train_loss = (loss_count > 0).then(|| loss_sum / loss_count as f64);

        let val_wer = evaluate_split(model, &val)?;
        let after = machine.after_epoch(val_wer);
        if after.new_best {
            let path = ctx
                .checkpoint_dir
                .join(format!("round-{}-best.ckpt", ctx.round));
            let meta = CheckpointMeta {
                format_version: checkpoint::CHECKPOINT_VERSION,
                round: ctx.round,
                epoch,
                val_wer,
                submodel: spec.category,
                config_hash: config_hash(ctx.config, model.config()),
                net_config: model.config().clone(),
                corpus_seed: ctx.corpus_seed,
                feature_mean: mean.clone(),
                feature_std: std.clone(),
            };
            save_checkpoint(model, &meta, &path)?;
            checkpoint_path = Some(path);
        }
        log::info!(
            "round {} epoch {epoch}: loss {} WER {val_wer:.4}{}",
            ctx.round,
            train_loss.map(|l| format!("{l:.4}")).unwrap_or_default(),
            if after.new_best { " (new best)" } else { "" }
        );
        logs.push(EpochLog {
            round: ctx.round,
            epoch,
            submodel: Some(spec.category),
            train_loss,
            val_wer: Some(val_wer),
            battery_pct: snap.battery_pct,
            ram_ratio: snap.ram_ratio(),
            stop_reason: LogStopReason::None,
        });
        if after.stop.is_some() {
            break;
        }
    }

    let stop_reason = machine
        .stop_reason()
        .expect("loop only exits once the machine has stopped");
    match logs.last_mut() {
        Some(last) => last.stop_reason = stop_reason.into(),
        None => {
            // Battery was at or below the floor before the first epoch:
            // emit a marker row so the session is visible in the log.
            logs.push(EpochLog {
                round: ctx.round,
                epoch: 0,
                submodel: Some(spec.category),
                train_loss: None,
                val_wer: None,
                battery_pct: start_snap.battery_pct,
                ram_ratio: start_snap.ram_ratio(),
                stop_reason: stop_reason.into(),
            });
        }
    }
    let (best_epoch, best_wer) = match machine.best() {
        Some((e, w)) => (Some(e), Some(w)),
        None => (None, None),
    };
    Ok(SessionOutcome {
        round: ctx.round,
        status: SessionStatus::Completed { stop_reason },
        submodel: Some(spec),
        initial_wer: Some(initial_wer),
        best_wer,
        best_epoch,
        epochs_run: machine.epochs_run(),
        checkpoint_path,
        logs,
    })
}

/// Inputs for a multi-round run.
#[derive(Debug)]
pub struct RunContext<'a> {
    pub device: &'a DeviceProfile,
    pub config: &'a SessionConfig,
    pub checkpoint_dir: &'a Path,
    /// Root seed: corpus seeds, shuffle seeds, and speaker seeds all
    /// derive from it, so one value pins the whole run.
    pub base_seed: u64,
    /// Utterances per session cache (training + validation together).
    pub n_utterances: usize,
    pub preset: &'a CorpusPreset,
    pub speakers: &'a [SpeakerProfile],
    pub word_list: &'a [&'a str],
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub outcomes: Vec<SessionOutcome>,
    /// The last best-WER checkpoint saved across all rounds.
    pub final_checkpoint: Option<PathBuf>,
    /// Concatenated epoch logs from every round, in order.
    pub logs: Vec<EpochLog>,
}

/// Chains `config.rounds` sessions. Before every round after the first, the
/// model is reset to the best checkpoint of the previous rounds, so each
/// round continues from the lowest-WER weights rather than wherever the
/// last epoch happened to leave them. Each round builds (and afterwards
/// clears) a fresh session cache with its own derived corpus seed.
pub fn run_rounds(
    model: &mut ToyAcousticModel,
    ctx: &RunContext<'_>,
) -> Result<RunReport, SessionError> {
    ctx.config.validate()?;
    let shuffle_seed = seeding::derive_seed(ctx.base_seed, "shuffle");
    let mut outcomes = Vec::new();
    let mut logs = Vec::new();
    let mut final_checkpoint: Option<PathBuf> = None;

    for round in 1..=ctx.config.rounds {
        if round > 1 {
            if let Some(path) = &final_checkpoint {
                checkpoint::load_into_model(path, model)?;
                log::info!("round {round}: resumed from {}", path.display());
            }
        }
        let corpus_seed = seeding::derive_seed(ctx.base_seed, &format!("corpus-round-{round}"));
        let mut cache = crate::corpus::build_session(
            ctx.speakers,
            ctx.word_list,
            corpus_seed,
            ctx.n_utterances,
            ctx.preset,
        )?;
        let session_ctx = SessionContext {
            device: ctx.device,
            config: ctx.config,
            round,
            start_time: (round - 1) * ctx.config.max_epochs,
            checkpoint_dir: ctx.checkpoint_dir,
            corpus_seed,
            shuffle_seed,
        };
        let outcome = run_session(model, &cache, &session_ctx)?;
        if let Some(path) = &outcome.checkpoint_path {
            final_checkpoint = Some(path.clone());
        }
        logs.extend(outcome.logs.iter().cloned());
        outcomes.push(outcome);
        cache.clear()?;
    }
    Ok(RunReport {
        outcomes,
        final_checkpoint,
        logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_session, CorpusPreset, SpeakerProfile};
    use crate::net::NetConfig;
    use crate::topology::Category;

    fn test_speaker(seed: u64) -> SpeakerProfile {
        SpeakerProfile {
            speaker_id: "spk-test".into(),
            base_freq_hz: 280.0,
            freq_step_hz: 140.0,
            char_duration_s: 0.08,
            noise_std: 0.003,
            seed,
        }
    }

    fn quick_preset() -> CorpusPreset {
        CorpusPreset {
            name: "quick".into(),
            words_min: 1,
            words_max: 2,
            duration_min_s: 0.1,
            duration_max_s: 3.0,
        }
    }

    fn words() -> Vec<&'static str> {
        vec!["cab", "ace", "bad", "bed", "dab"]
    }

    /// Ample RAM and battery: nothing interferes with the epoch budget.
    fn roomy_device() -> DeviceProfile {
        DeviceProfile {
            name: "roomy".into(),
            total_ram_mb: 4096,
            ram_trajectory: vec![(0, 4096)],
            battery_start_pct: 100.0,
            battery_drain_per_epoch_pct: 0.0,
        }
    }

    fn tiny_config(max_epochs: u64) -> SessionConfig {
        SessionConfig {
            max_epochs,
            batch_size: 2,
            learning_rate: 1e-3,
            patience: 10,
            ..SessionConfig::default()
        }
    }

    #[test]
    fn skipped_session_reports_and_logs() {
        let device = DeviceProfile {
            name: "starved".into(),
            total_ram_mb: 4096,
            ram_trajectory: vec![(0, 100)],
            battery_start_pct: 100.0,
            battery_drain_per_epoch_pct: 1.0,
        };
        let mut model = ToyAcousticModel::init(NetConfig::grad_check(1)).unwrap();
        let cache = build_session(&[test_speaker(7)], &words(), 11, 4, &quick_preset()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(2);
        let ctx = SessionContext {
            device: &device,
            config: &cfg,
            round: 1,
            start_time: 0,
            checkpoint_dir: dir.path(),
            corpus_seed: 11,
            shuffle_seed: 3,
        };
        let out = run_session(&mut model, &cache, &ctx).unwrap();
        assert!(matches!(out.status, SessionStatus::Skipped { .. }));
        assert_eq!(out.epochs_run, 0);
        assert!(out.checkpoint_path.is_none());
        assert_eq!(out.logs.len(), 1);
        let row = &out.logs[0];
        assert_eq!(row.epoch, 0);
        assert_eq!(row.stop_reason, LogStopReason::Skipped);
        assert_eq!(row.submodel, None);
        assert!(row.csv_row().starts_with("1,0,none,,,"));
    }

    #[test]
    fn dead_battery_at_start_emits_marker_row() {
        let device = DeviceProfile {
            name: "flat".into(),
            total_ram_mb: 4096,
            ram_trajectory: vec![(0, 4096)],
            battery_start_pct: 10.0,
            battery_drain_per_epoch_pct: 1.0,
        };
        let mut model = ToyAcousticModel::init(NetConfig::grad_check(1)).unwrap();
        let cache = build_session(&[test_speaker(7)], &words(), 11, 4, &quick_preset()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(2);
        let ctx = SessionContext {
            device: &device,
            config: &cfg,
            round: 1,
            start_time: 0,
            checkpoint_dir: dir.path(),
            corpus_seed: 11,
            shuffle_seed: 3,
        };
        let out = run_session(&mut model, &cache, &ctx).unwrap();
        assert!(matches!(
            out.status,
            SessionStatus::Completed {
                stop_reason: StopReason::Battery
            }
        ));
        assert_eq!(out.epochs_run, 0);
        assert_eq!(out.logs.len(), 1);
        assert_eq!(out.logs[0].epoch, 0);
        assert_eq!(out.logs[0].stop_reason, LogStopReason::Battery);
        // Selection happened before the battery check, so the category is
        // known even though nothing was trained.
        assert_eq!(out.logs[0].submodel, Some(Category::Heavy));
    }

    #[test]
    fn session_trains_checkpoints_and_logs() {
        let mut model = ToyAcousticModel::init(NetConfig::grad_check(5)).unwrap();
        let cache = build_session(&[test_speaker(7)], &words(), 23, 4, &quick_preset()).unwrap();
        let device = roomy_device();
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(2);
        let ctx = SessionContext {
            device: &device,
            config: &cfg,
            round: 1,
            start_time: 0,
            checkpoint_dir: dir.path(),
            corpus_seed: 23,
            shuffle_seed: 3,
        };
        let out = run_session(&mut model, &cache, &ctx).unwrap();
        assert!(matches!(
            out.status,
            SessionStatus::Completed {
                stop_reason: StopReason::MaxEpochs
            }
        ));
        assert_eq!(out.epochs_run, 2);
        assert_eq!(out.logs.len(), 2);
        assert_eq!(out.logs[0].stop_reason, LogStopReason::None);
        assert_eq!(out.logs[1].stop_reason, LogStopReason::MaxEpochs);
        assert!(out.initial_wer.is_some());
        assert!(out.best_wer.is_some());

        // The checkpoint must carry the WER of its own epoch, the corpus
        // seed, and feature statistics of the right width.
        let path = out.checkpoint_path.expect("an epoch improved on +inf");
        let (meta, _) = checkpoint::load_checkpoint(&path).unwrap();
        assert_eq!(meta.round, 1);
        assert_eq!(meta.epoch, out.best_epoch.unwrap());
        assert_eq!(meta.val_wer, out.best_wer.unwrap());
        assert_eq!(meta.corpus_seed, 23);
        assert_eq!(meta.feature_mean.len(), 80);
        assert_eq!(meta.feature_std.len(), 80);
        assert!(meta.feature_std.iter().all(|&s| s >= FEATURE_STD_FLOOR));
        assert_eq!(meta.submodel, Category::Heavy);
        assert_eq!(
            meta.config_hash,
            checkpoint::config_hash(&cfg, model.config())
        );
    }

    #[test]
    fn sessions_are_deterministic() {
        let device = roomy_device();
        let cfg = tiny_config(2);
        let run = || {
            let mut model = ToyAcousticModel::init(NetConfig::grad_check(5)).unwrap();
            let cache =
                build_session(&[test_speaker(7)], &words(), 23, 4, &quick_preset()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let ctx = SessionContext {
                device: &device,
                config: &cfg,
                round: 1,
                start_time: 0,
                checkpoint_dir: dir.path(),
                corpus_seed: 23,
                shuffle_seed: 3,
            };
            let out = run_session(&mut model, &cache, &ctx).unwrap();
            (logs_to_csv(&out.logs), model.export_tensors())
        };
        let (csv1, tensors1) = run();
        let (csv2, tensors2) = run();
        assert_eq!(csv1, csv2);
        assert_eq!(tensors1, tensors2);
    }

    #[test]
    fn run_rounds_reloads_best_checkpoint_between_rounds() {
        let device = roomy_device();
        let mut cfg = tiny_config(2);
        cfg.rounds = 2;
        let mut model = ToyAcousticModel::init(NetConfig::grad_check(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let speakers = [test_speaker(7)];
        let word_list = words();
        let preset = quick_preset();
        let ctx = RunContext {
            device: &device,
            config: &cfg,
            checkpoint_dir: dir.path(),
            base_seed: 42,
            n_utterances: 4,
            preset: &preset,
            speakers: &speakers,
            word_list: &word_list,
        };
        let report = run_rounds(&mut model, &ctx).unwrap();
        assert_eq!(report.outcomes.len(), 2);
        // Round 2 starts where round 1's trajectory left the clock.
        assert_eq!(report.outcomes[1].logs[0].round, 2);
        assert_eq!(
            report.logs.len(),
            report.outcomes.iter().map(|o| o.logs.len()).sum::<usize>()
        );
        // Both rounds trained, so the final checkpoint is round 2's.
        let final_path = report.final_checkpoint.expect("checkpoints were saved");
        assert!(final_path.ends_with("round-2-best.ckpt"));
        let (meta, _) = checkpoint::load_checkpoint(&final_path).unwrap();
        assert_eq!(meta.round, 2);
        // Distinct corpus seed per round.
        assert_eq!(
            meta.corpus_seed,
            seeding::derive_seed(42, "corpus-round-2")
        );
    }

    #[test]
    fn battery_is_monotone_across_rounds() {
        let device = DeviceProfile {
            name: "draining".into(),
            total_ram_mb: 4096,
            ram_trajectory: vec![(0, 4096)],
            battery_start_pct: 100.0,
            battery_drain_per_epoch_pct: 10.0,
        };
        let mut cfg = tiny_config(2);
        cfg.rounds = 3;
        let mut model = ToyAcousticModel::init(NetConfig::grad_check(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let speakers = [test_speaker(7)];
        let word_list = words();
        let preset = quick_preset();
        let ctx = RunContext {
            device: &device,
            config: &cfg,
            checkpoint_dir: dir.path(),
            base_seed: 42,
            n_utterances: 4,
            preset: &preset,
            speakers: &speakers,
            word_list: &word_list,
        };
        let report = run_rounds(&mut model, &ctx).unwrap();
        let batteries: Vec<f64> = report.logs.iter().map(|l| l.battery_pct).collect();
        assert!(
            batteries.windows(2).all(|w| w[1] <= w[0]),
            "battery must never rise: {batteries:?}"
        );
        // Round 1 starts at 100%; round 2 starts 2 epochs later at 80%.
        assert_eq!(report.outcomes[0].logs[0].battery_pct, 100.0);
        assert_eq!(report.outcomes[1].logs[0].battery_pct, 80.0);
    }

    #[test]
    fn csv_format_is_exact() {
        let log = EpochLog {
            round: 1,
            epoch: 3,
            submodel: Some(Category::Medium),
            train_loss: Some(1.25),
            val_wer: Some(0.5),
            battery_pct: 87.5,
            ram_ratio: 0.662475,
            stop_reason: LogStopReason::None,
        };
        assert_eq!(
            log.csv_row(),
            "1,3,medium,1.250000,0.500000,87.500000,0.662475,none"
        );
        let rendered = logs_to_csv(&[log]);
        assert!(rendered.starts_with(EPOCH_CSV_HEADER));
        assert!(rendered.ends_with('\n'));
        assert!(!rendered.contains('\r'));
    }

    #[test]
    fn empty_cache_is_rejected() {
        let mut model = ToyAcousticModel::init(NetConfig::grad_check(1)).unwrap();
        let cache = SessionCache::default();
        let device = roomy_device();
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(1);
        let ctx = SessionContext {
            device: &device,
            config: &cfg,
            round: 1,
            start_time: 0,
            checkpoint_dir: dir.path(),
            corpus_seed: 1,
            shuffle_seed: 1,
        };
        assert!(matches!(
            run_session(&mut model, &cache, &ctx),
            Err(SessionError::EmptyCache(_))
        ));
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut cfg = SessionConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = SessionConfig::default();
        cfg.learning_rate = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SessionConfig::default();
        cfg.rounds = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = SessionConfig::default();
        cfg.max_epochs = 0;
        assert!(cfg.validate().is_err());
        assert!(SessionConfig::default().validate().is_ok());
    }

    #[test]
    fn feature_statistics_standardise_training_split() {
        let frames_a = vec![vec![1.0, -2.0], vec![3.0, 2.0]];
        let frames_b = vec![vec![5.0, 0.0], vec![7.0, 0.0]];
        let fa = FeatureMatrix::from_frames(frames_a).unwrap();
        let fb = FeatureMatrix::from_frames(frames_b).unwrap();
        let (mean, std) = feature_statistics(&[fa.clone(), fb.clone()]);
        assert_eq!(mean, vec![4.0, 0.0]);
        // Population variance of [1,3,5,7] is 5; of [-2,2,0,0] is 2.
        assert!((std[0] - 5.0_f64.sqrt()).abs() < 1e-12);
        assert!((std[1] - 2.0_f64.sqrt()).abs() < 1e-12);

        let mut norm = fa;
        norm.apply_normalisation(&mean, &std);
        assert!((norm.frames()[0][0] - (1.0 - 4.0) / 5.0_f64.sqrt()).abs() < 1e-12);

        // A constant bin gets the floor, not a zero divisor.
        let fc = FeatureMatrix::from_frames(vec![vec![2.0], vec![2.0]]).unwrap();
        let (_, std) = feature_statistics(&[fc]);
        assert_eq!(std, vec![FEATURE_STD_FLOOR]);
    }
}
