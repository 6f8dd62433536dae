//! Command implementations behind the `odtc` binary: corpus generation,
//! topology inspection, training runs, checkpoint evaluation, and the
//! stopping-rule simulator. The experiment config is one JSON file;
//! command-line flags override individual values so a single artifact
//! can describe a reproducible run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_session, default_speakers, CorpusPreset, SessionCache, Split, SpeakerProfile, WORD_LIST,
};
use crate::ctc;
use crate::ctc_eval::{labels_to_text, levenshtein, pooled_wer};
use crate::device::DeviceProfile;
use crate::features::log_mel;
use crate::net::{NetConfig, ToyAcousticModel};
use crate::seeding;
use crate::session::checkpoint::load_checkpoint;
use crate::session::stopping::{self, PatienceMode, StoppingConfig};
use crate::session::{
    run_rounds, write_epoch_csv, RunContext, RunReport, SessionConfig, SessionStatus,
};
use crate::topology::{extract_submodel, Category, ModelTopology, SelectionThresholds};

/// The full-scale reference topology, bundled into the binary so
/// `inspect-topology` works without any files on disk.
pub const PAPER_MIRROR_MANIFEST: &str = include_str!("../manifests/paper_mirror.manifest");

/// One JSON file describing an experiment end to end. Every field has a
/// default, so `{}` is a valid config; flags override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed. Model init, corpus content, and shuffling all derive
    /// their own streams from it.
    pub seed: u64,
    /// Utterances per session cache (training + validation together).
    pub n_utterances: usize,
    /// Corpus preset name: "short" or "paper-faithful".
    pub preset: String,
    /// Name of the device profile to simulate.
    pub device: String,
    /// Extra device profiles; searched by name before the built-ins.
    pub devices: Vec<DeviceProfile>,
    /// Speakers to synthesise. Empty means the four defaults.
    pub speakers: Vec<SpeakerProfile>,
    /// Vocabulary transcripts are sampled from. Empty means the built-in
    /// forty-word list.
    pub words: Vec<String>,
    /// Acoustic model architecture; absent means the toy default.
    pub net: Option<NetConfig>,
    pub session: SessionConfig,
    /// Output root for checkpoints, CSV logs, and generated corpora.
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            n_utterances: 80,
            preset: "short".into(),
            device: "roomy".into(),
            devices: Vec::new(),
            speakers: Vec::new(),
            words: Vec::new(),
            net: None,
            session: SessionConfig::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Values that flags may override after the file is read.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub rounds: Option<u64>,
    pub n: Option<usize>,
    pub device: Option<String>,
    pub patience_mode: Option<PatienceMode>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config '{}'", path.display()))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("config '{}' is not valid", path.display()))?;
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(rounds) = o.rounds {
            self.session.rounds = rounds;
        }
        if let Some(n) = o.n {
            self.n_utterances = n;
        }
        if let Some(device) = &o.device {
            self.device = device.clone();
        }
        if let Some(mode) = o.patience_mode {
            self.session.patience_mode = mode;
        }
    }

    /// Checks every reference and fills the defaults in, producing a
    /// config ready to run.
    pub fn resolve(&self) -> anyhow::Result<ResolvedExperiment> {
        let preset = match self.preset.as_str() {
            "short" => CorpusPreset::short(),
            "paper-faithful" => CorpusPreset::paper_faithful(),
            other => bail!("unknown preset '{other}' (expected 'short' or 'paper-faithful')"),
        };
        preset.validate()?;
        let device = self
            .devices
            .iter()
            .chain(builtin_devices().iter())
            .find(|d| d.name == self.device)
            .cloned()
            .ok_or_else(|| {
                let known: Vec<String> = self
                    .devices
                    .iter()
                    .chain(builtin_devices().iter())
                    .map(|d| d.name.clone())
                    .collect();
                anyhow::anyhow!(
                    "unknown device '{}' (known: {})",
                    self.device,
                    known.join(", ")
                )
            })?;
        device.validate()?;
        let speakers = if self.speakers.is_empty() {
            default_speakers(&preset, self.seed)
        } else {
            self.speakers.clone()
        };
        for s in &speakers {
            s.validate()?;
        }
        let words: Vec<String> = if self.words.is_empty() {
            WORD_LIST.iter().map(|w| w.to_string()).collect()
        } else {
            self.words.clone()
        };
        for w in &words {
            if w.is_empty() || !w.chars().all(|c| c.is_ascii_lowercase()) {
                bail!("word '{w}' is not lowercase a-z");
            }
        }
        let net = self
            .net
            .clone()
            .unwrap_or_else(|| NetConfig::toy_default(self.seed));
        net.validate()?;
        self.session.validate()?;
        Ok(ResolvedExperiment {
            seed: self.seed,
            n_utterances: self.n_utterances,
            preset,
            device,
            speakers,
            words,
            net,
            session: self.session.clone(),
            out_dir: self.out_dir.clone(),
        })
    }
}

/// A config with every reference checked and every default filled in.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub seed: u64,
    pub n_utterances: usize,
    pub preset: CorpusPreset,
    pub device: DeviceProfile,
    pub speakers: Vec<SpeakerProfile>,
    pub words: Vec<String>,
    pub net: NetConfig,
    pub session: SessionConfig,
    pub out_dir: PathBuf,
}

/// Built-in device profiles, named for the behaviour they induce under
/// the default thresholds (0.5 / 0.35 / 0.15, battery floor 20%).
pub fn builtin_devices() -> Vec<DeviceProfile> {
    let flat = |name: &str, available: u64| DeviceProfile {
        name: name.into(),
        total_ram_mb: 4096,
        ram_trajectory: vec![(0, available)],
        battery_start_pct: 100.0,
        battery_drain_per_epoch_pct: 0.25,
    };
    vec![
        // 75% free RAM: Heavy every round.
        flat("roomy", 3072),
        // ~40% free: Medium.
        flat("moderate", 1638),
        // ~20% free: Light.
        flat("tight", 820),
        // ~10% free: below every threshold, training is skipped.
        flat("starved", 409),
        // Heavy selection but 30%/epoch battery drain: stops on battery.
        DeviceProfile {
            name: "draining".into(),
            total_ram_mb: 4096,
            ram_trajectory: vec![(0, 3072)],
            battery_start_pct: 100.0,
            battery_drain_per_epoch_pct: 30.0,
        },
    ]
}

/// `30_240_000` → `"30.24 M"`. Truncates (not rounds) to two decimals,
/// matching how the reference parameter table quotes sizes.
pub fn format_params_m(count: u64) -> String {
    let m = count as f64 / 1e6;
    format!("{:.2} M", (m * 100.0).floor() / 100.0)
}

/// Fractions ≥ 10% print with no decimals, smaller ones with one.
pub fn format_fraction_pct(fraction: f64) -> String {
    let pct = fraction * 100.0;
    if pct >= 10.0 {
        format!("{pct:.0} %")
    } else {
        format!("{pct:.1} %")
    }
}

/// The `inspect-topology` table: one row per category with its trainable
/// window, parameter count, and share of the full model. Categories whose
/// smallest window still exceeds their cap are reported, not omitted.
pub fn topology_table(
    topology: &ModelTopology,
    thresholds: &SelectionThresholds,
) -> anyhow::Result<String> {
    let mut out = String::new();
    out.push_str(&format!(
        "{} layers, {} parameters total\n",
        topology.layers().len(),
        topology.total_params()
    ));
    out.push_str("sub-model  window                  layers  params     fraction\n");
    for category in [Category::Heavy, Category::Medium, Category::Light] {
        match extract_submodel(topology, category, thresholds) {
            Ok(spec) => {
                let (first, last) = topology.window_names(&spec);
                out.push_str(&format!(
                    "{:<10} {:<23} {:<7} {:<10} {}\n",
                    category.to_string(),
                    format!("{first}..{last}"),
                    spec.trainable_layer_count,
                    format_params_m(spec.trainable_params),
                    format_fraction_pct(spec.param_fraction),
                ));
            }
            Err(e) => {
                out.push_str(&format!("{:<10} infeasible: {e}\n", category.to_string()));
            }
        }
    }
    Ok(out)
}

pub fn cmd_inspect_topology(manifest: Option<&Path>) -> anyhow::Result<String> {
    let topology = match manifest {
        Some(path) => ModelTopology::from_manifest_file(path)?,
        None => ModelTopology::from_manifest_str(PAPER_MIRROR_MANIFEST)?,
    };
    topology_table(&topology, &SelectionThresholds::default())
}

/// Synthesises one session cache per speaker and materialises each under
/// `out/<speaker_id>/` (WAV files plus a TSV manifest).
pub fn cmd_gen_corpus(exp: &ResolvedExperiment, out: &Path) -> anyhow::Result<()> {
    let word_refs: Vec<&str> = exp.words.iter().map(String::as_str).collect();
    for speaker in &exp.speakers {
        let rng_seed = seeding::derive_seed(exp.seed, &format!("gen-corpus-{}", speaker.speaker_id));
        let mut cache = build_session(
            std::slice::from_ref(speaker),
            &word_refs,
            rng_seed,
            exp.n_utterances,
            &exp.preset,
        )?;
        let dir = out.join(&speaker.speaker_id);
        cache.materialise(&dir)?;
        let train = cache.train().count();
        let val = cache.validation().count();
        println!(
            "speaker {}: {} utterances ({train} train / {val} validation) -> {}",
            speaker.speaker_id,
            cache.len(),
            dir.display()
        );
    }
    println!("corpus written under {}", out.display());
    Ok(())
}

/// Runs the full multi-round training loop, writes the epoch CSV and
/// checkpoints under the output directory, and prints a per-round summary.
///
/// Resource skips and battery/patience stops are successful outcomes —
/// the loop behaving as designed — so they exit 0.
pub fn cmd_train(exp: &ResolvedExperiment, out: &Path) -> anyhow::Result<RunReport> {
    let checkpoint_dir = out.join("checkpoints");
    let mut model = ToyAcousticModel::init(exp.net.clone())?;
    let word_list: Vec<&str> = exp.words.iter().map(String::as_str).collect();
    let ctx = RunContext {
        device: &exp.device,
        config: &exp.session,
        checkpoint_dir: &checkpoint_dir,
        base_seed: exp.seed,
        n_utterances: exp.n_utterances,
        preset: &exp.preset,
        speakers: &exp.speakers,
        word_list: &word_list,
    };
    let report = run_rounds(&mut model, &ctx)?;

    let csv_path = out.join("epochs.csv");
    write_epoch_csv(&csv_path, &report.logs)?;

    for outcome in &report.outcomes {
        match &outcome.status {
            SessionStatus::Skipped { ram_ratio } => {
                println!(
                    "round {} skipped: insufficient resources (ram ratio {ram_ratio:.4})",
                    outcome.round
                );
            }
            SessionStatus::Completed { stop_reason } => {
                let submodel = outcome
                    .submodel
                    .as_ref()
                    .map(|s| s.category.to_string())
                    .unwrap_or_else(|| "none".into());
                let best = match (outcome.best_wer, outcome.best_epoch) {
                    (Some(w), Some(e)) => format!("best_wer={w:.6} (epoch {e})"),
                    _ => "no epochs ran".into(),
                };
                println!(
                    "round {}: submodel={submodel} epochs={} initial_wer={} {best} stop={stop_reason}",
                    outcome.round,
                    outcome.epochs_run,
                    outcome
                        .initial_wer
                        .map(|w| format!("{w:.6}"))
                        .unwrap_or_default(),
                );
            }
        }
    }
    match &report.final_checkpoint {
        Some(path) => println!("best checkpoint: {}", path.display()),
        None => println!("no checkpoint saved"),
    }
    println!("epoch log: {}", csv_path.display());
    Ok(report)
}

/// Which utterances `eval` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Validation,
    All,
}

impl EvalSplit {
    fn admits(self, split: Split) -> bool {
        match self {
            EvalSplit::Train => split == Split::Train,
            EvalSplit::Validation => split == Split::Validation,
            EvalSplit::All => true,
        }
    }
}

/// Loads a checkpoint, rebuilds (or reads) the corpus it was trained
/// against, and reports pooled WER on the chosen split plus a
/// per-utterance CSV. Feature statistics come from the checkpoint
/// metadata, never recomputed, so results match training exactly.
pub fn cmd_eval(
    exp: &ResolvedExperiment,
    checkpoint: &Path,
    manifest_dir: Option<&Path>,
    split: EvalSplit,
    csv_out: Option<&Path>,
) -> anyhow::Result<f64> {
    let (meta, tensors) = load_checkpoint(checkpoint)?;
    let mut model = ToyAcousticModel::init(meta.net_config.clone())?;
    model.import_tensors(&tensors)?;

    let cache = match manifest_dir {
        Some(dir) => SessionCache::load_manifest(dir)?,
        None => {
            let word_refs: Vec<&str> = exp.words.iter().map(String::as_str).collect();
            build_session(
                &exp.speakers,
                &word_refs,
                meta.corpus_seed,
                exp.n_utterances,
                &exp.preset,
            )?
        }
    };
    let selected: Vec<_> = cache
        .utterances()
        .iter()
        .filter(|u| split.admits(u.split))
        .collect();
    if selected.is_empty() {
        bail!("no utterances in the requested split");
    }

    let mut rows = Vec::with_capacity(selected.len());
    let mut pairs = Vec::with_capacity(selected.len());
    for u in &selected {
        let mut feats = log_mel(&u.clip)?;
        feats.apply_normalisation(&meta.feature_mean, &meta.feature_std);
        let (logits, _) = model.forward(&feats)?;
        let hyp = labels_to_text(&ctc::greedy_decode(&logits));
        let ref_words = u.transcript.words();
        let hyp_words: Vec<&str> = hyp.split_whitespace().collect();
        let distance = levenshtein(&ref_words, &hyp_words);
        rows.push(format!(
            "{},{},{},{},{},{},{},{:.6}",
            u.id,
            u.speaker_id,
            u.split,
            u.transcript.text(),
            hyp,
            distance,
            ref_words.len(),
            distance as f64 / ref_words.len() as f64,
        ));
        pairs.push((&u.transcript, hyp));
    }
    let wer = pooled_wer(pairs.iter().map(|(t, h)| (*t, h.as_str())))?;

    if let Some(path) = csv_out {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut text =
            String::from("id,speaker,split,reference,hypothesis,edit_distance,ref_words,wer\n");
        for row in &rows {
            text.push_str(row);
            text.push('\n');
        }
        fs::write(path, text)?;
        println!("per-utterance report: {}", path.display());
    }
    println!(
        "pooled WER ({} utterances, checkpoint round {} epoch {}): {wer:.6}",
        selected.len(),
        meta.round,
        meta.epoch
    );
    Ok(wer)
}

/// Replays a scripted WER sequence (with a linear battery model) through
/// the stopping rule and prints the per-epoch trace.
pub fn cmd_simulate_stopping(
    wers: &[f64],
    battery_start_pct: f64,
    battery_drain_per_epoch_pct: f64,
    battery_floor_pct: f64,
    max_epochs: Option<u64>,
    patience: u64,
    mode: PatienceMode,
) -> anyhow::Result<String> {
    if wers.is_empty() {
        bail!("--wers needs at least one value");
    }
    let cfg = StoppingConfig {
        max_epochs: max_epochs.unwrap_or(wers.len() as u64),
        patience,
        battery_floor_pct,
        mode,
    };
    let (machine, patience_trace) =
        stopping::replay(cfg, wers, battery_start_pct, battery_drain_per_epoch_pct)?;

    let mut out = format!(
        "mode={mode} max_epochs={} patience={} battery_floor={}\n",
        cfg.max_epochs, cfg.patience, cfg.battery_floor_pct
    );
    out.push_str("epoch,wer,battery_pct,patience\n");
    for (i, &p) in patience_trace.iter().enumerate() {
        let battery =
            (battery_start_pct - i as f64 * battery_drain_per_epoch_pct).max(0.0);
        out.push_str(&format!(
            "{},{:.6},{battery:.6},{p}\n",
            i + 1,
            wers[i]
        ));
    }
    match machine.stop_reason() {
        Some(reason) => {
            let best = machine
                .best()
                .map(|(e, w)| format!(" best_epoch={e} best_wer={w:.6}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "stopped: reason={reason} epochs_run={}{best}\n",
                machine.epochs_run()
            ));
        }
        None => {
            out.push_str(&format!(
                "not stopped after {} scripted epochs\n",
                machine.epochs_run()
            ));
        }
    }
    Ok(out)
}
