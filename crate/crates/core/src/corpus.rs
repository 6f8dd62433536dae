//! Synthetic tone-coded speech corpus and the per-session utterance cache.
//!
//! Each character is rendered as a fixed-duration sine whose frequency
//! encodes the symbol (`'a'` at the speaker's base frequency, each later
//! letter one `freq_step_hz` higher; space is silence), so a small acoustic
//! model can genuinely learn the transcription task in minutes while the
//! full pipeline — features → CTC → WER — stays identical to real speech.
//! Per-speaker parameters (base frequency, step, speaking rate, noise) play
//! the role of accents across simulated speakers.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc_eval::{self, Transcript, MAX_LABEL_LEN};
use crate::features::{AudioClip, FeatureError, HOP_SAMPLES, SAMPLE_RATE_HZ};
use crate::seeding;

/// Peak amplitude of a rendered tone before noise.
pub const TONE_AMPLITUDE: f64 = 0.3;
/// Linear fade in/out per character: 10 ms at 16 kHz.
pub const FADE_SAMPLES: usize = 160;
/// Hard cap on rendered utterance length.
pub const MAX_UTTERANCE_S: f64 = 12.0;
/// Name of the cache manifest file inside a materialised corpus directory.
pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Default word pool for transcript sampling; 40 words of 3–7 letters
/// covering all 26 letters.
pub const WORD_LIST: [&str; 40] = [
    "able", "bank", "cold", "dark", "each", "fast", "gold", "hand", "iron", "jump", "kind",
    "lake", "mind", "nest", "open", "park", "quiz", "rain", "salt", "tree", "under", "vast",
    "wind", "expo", "yard", "zero", "bright", "clever", "dawn", "early", "frost", "globe",
    "humble", "invite", "jacket", "kernel", "lumen", "margin", "noble", "orbit",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid speaker '{0}': {1}")]
    InvalidSpeaker(String, String),
    #[error(
        "transcript of {chars} chars at {char_duration_s} s/char exceeds the {max_s} s cap"
    )]
    TranscriptTooLongForDuration {
        chars: usize,
        char_duration_s: f64,
        max_s: f64,
    },
    #[error("character {0:?} cannot be rendered (alphabet is a–z and space)")]
    UnrenderableCharacter(char),
    #[error("empty transcript text")]
    EmptyTranscript,
    #[error("word list is empty")]
    EmptyWordList,
    #[error("no speaker profiles given")]
    NoSpeakers,
    #[error("session size {0} too small: need at least 4 for a 3:1 split")]
    SessionTooSmall(usize),
    #[error("invalid corpus preset: {0}")]
    InvalidPreset(String),
    #[error(
        "could not sample a transcript within {min_s}–{max_s} s for speaker '{speaker}' after \
         {attempts} attempts"
    )]
    DurationRetriesExhausted {
        speaker: String,
        min_s: f64,
        max_s: f64,
        attempts: usize,
    },
    #[error("manifest line {line}: {message}")]
    ManifestParse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Text(#[from] ctc_eval::TextError),
}

/// One simulated speaker. The synthesis scheme maps symbol index i (a=0 …
/// z=25) to a sine at `base_freq_hz + i·freq_step_hz`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub base_freq_hz: f64,
    pub freq_step_hz: f64,
    /// Seconds of audio per character (speaking rate).
    pub char_duration_s: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SpeakerProfile {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |msg: String| Err(CorpusError::InvalidSpeaker(self.speaker_id.clone(), msg));
        if self.speaker_id.is_empty() {
            return fail("empty speaker_id".into());
        }
        if !(self.base_freq_hz > 0.0 && self.freq_step_hz > 0.0) {
            return fail("base frequency and step must be positive".into());
        }
        let top = self.base_freq_hz + 27.0 * self.freq_step_hz;
        if top >= f64::from(SAMPLE_RATE_HZ) / 2.0 {
            return fail(format!("symbol frequencies reach {top} Hz, at or above Nyquist"));
        }
        let min_duration = 2.0 * HOP_SAMPLES as f64 / f64::from(SAMPLE_RATE_HZ);
        if self.char_duration_s < min_duration {
            return fail(format!(
                "char_duration_s {} below two hop lengths ({min_duration})",
                self.char_duration_s
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Fundamental frequency for one character; `None` for space.
    pub fn char_frequency_hz(&self, c: char) -> Option<f64> {
        if c == ' ' {
            return None;
        }
        let index = (c as u32).checked_sub('a' as u32)?;
        if index >= 26 {
            return None;
        }
        Some(self.base_freq_hz + f64::from(index) * self.freq_step_hz)
    }
}

/// Renders tone-coded audio for `text` (characters in a–z or space).
/// Deterministic given (profile.seed, text): the noise stream is seeded
/// from both. Samples are quantised to the 16-bit grid so a WAV round trip
/// is bit-identical.
pub fn synthesize(profile: &SpeakerProfile, text: &str) -> Result<AudioClip, CorpusError> {
    profile.validate()?;
    if text.is_empty() {
        return Err(CorpusError::EmptyTranscript);
    }
    if let Some(bad) = text.chars().find(|&c| c != ' ' && !c.is_ascii_lowercase()) {
        return Err(CorpusError::UnrenderableCharacter(bad));
    }
    let chars: Vec<char> = text.chars().collect();
    let duration_s = chars.len() as f64 * profile.char_duration_s;
    if duration_s > MAX_UTTERANCE_S {
        return Err(CorpusError::TranscriptTooLongForDuration {
            chars: chars.len(),
            char_duration_s: profile.char_duration_s,
            max_s: MAX_UTTERANCE_S,
        });
    }
    let spc = (profile.char_duration_s * f64::from(SAMPLE_RATE_HZ)).round() as usize;
    let mut samples = vec![0.0f64; chars.len() * spc];
    for (ci, &c) in chars.iter().enumerate() {
        let Some(freq) = profile.char_frequency_hz(c) else {
            continue; // space: leave silence
        };
        let seg = &mut samples[ci * spc..(ci + 1) * spc];
        let omega = 2.0 * std::f64::consts::PI * freq / f64::from(SAMPLE_RATE_HZ);
        for (n, s) in seg.iter_mut().enumerate() {
            *s = TONE_AMPLITUDE * (omega * n as f64).sin();
        }
        let fade = FADE_SAMPLES.min(spc / 2);
        for n in 0..fade {
            let ramp = n as f64 / fade as f64;
            seg[n] *= ramp;
            seg[spc - 1 - n] *= ramp;
        }
    }
    if profile.noise_std > 0.0 {
        let mut rng = seeding::rng_from(profile.seed, text);
        let normal = Normal::new(0.0, profile.noise_std)
            .expect("validated noise_std is finite and non-negative");
        for s in &mut samples {
            *s += normal.sample(&mut rng);
        }
    }
    for s in &mut samples {
        *s = (s.clamp(-1.0, 1.0) * 32767.0).round() / 32767.0;
    }
    Ok(AudioClip::new(samples, SAMPLE_RATE_HZ)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
        })
    }
}

/// One cached utterance: rendered audio plus its reference transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub clip: AudioClip,
    pub transcript: Transcript,
    pub split: Split,
    pub speaker_id: String,
}

/// Transcript sampling and duration bounds for one corpus flavour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusPreset {
    pub name: String,
    pub words_min: usize,
    pub words_max: usize,
    pub duration_min_s: f64,
    pub duration_max_s: f64,
}

impl CorpusPreset {
    /// Desk-scale default: 3–6 words, roughly 1–3 s at the default rate.
    pub fn short() -> Self {
        CorpusPreset {
            name: "short".into(),
            words_min: 3,
            words_max: 6,
            duration_min_s: 0.5,
            duration_max_s: 4.0,
        }
    }

    /// Full-length utterances of 7–12 s (pair with slow-rate speakers).
    pub fn paper_faithful() -> Self {
        CorpusPreset {
            name: "paper-faithful".into(),
            words_min: 5,
            words_max: 9,
            duration_min_s: 7.0,
            duration_max_s: 12.0,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.words_min == 0 || self.words_min > self.words_max {
            return Err(CorpusError::InvalidPreset(format!(
                "need 1 <= words_min <= words_max, got {}..{}",
                self.words_min, self.words_max
            )));
        }
        if !(self.duration_min_s > 0.0
            && self.duration_min_s < self.duration_max_s
            && self.duration_max_s <= MAX_UTTERANCE_S)
        {
            return Err(CorpusError::InvalidPreset(format!(
                "need 0 < min < max <= {MAX_UTTERANCE_S} s, got {}..{}",
                self.duration_min_s, self.duration_max_s
            )));
        }
        Ok(())
    }
}

/// Four default speakers matched to a preset's duration band.
pub fn default_speakers(preset: &CorpusPreset, base_seed: u64) -> Vec<SpeakerProfile> {
    let rate = if preset.name == "paper-faithful" { 0.22 } else { 0.08 };
    let params: [(&str, f64, f64, f64); 4] = [
        ("spk-a", 280.0, 140.0, 0.003),
        ("spk-b", 300.0, 140.0, 0.004),
        ("spk-c", 320.0, 138.0, 0.003),
        ("spk-d", 260.0, 142.0, 0.005),
    ];
    params
        .iter()
        .map(|&(id, base, step, noise)| SpeakerProfile {
            speaker_id: id.to_string(),
            base_freq_hz: base,
            freq_step_hz: step,
            char_duration_s: rate,
            noise_std: noise,
            seed: seeding::derive_seed(base_seed, id),
        })
        .collect()
}

/// The per-session utterance store: N utterances, split 3:1 into train and
/// validation, cleared in full once the session ends.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionCache {
    utterances: Vec<Utterance>,
    materialised_dir: Option<PathBuf>,
}

impl SessionCache {
    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn train(&self) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(|u| u.split == Split::Train)
    }

    pub fn validation(&self) -> impl Iterator<Item = &Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.split == Split::Validation)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Writes all clips as WAV files plus a tab-separated manifest
    /// (id, path, transcript, split, speaker_id) into `dir`.
    pub fn materialise(&mut self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for utt in &self.utterances {
            let file = format!("{}.wav", utt.id);
            utt.clip.to_wav(&dir.join(&file))?;
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                utt.id,
                file,
                utt.transcript.text(),
                utt.split,
                utt.speaker_id
            ));
        }
        let mut f = fs::File::create(dir.join(MANIFEST_FILE))?;
        f.write_all(manifest.as_bytes())?;
        self.materialised_dir = Some(dir.to_path_buf());
        Ok(())
    }

    /// Loads a cache previously written by `materialise`.
    pub fn load_manifest(dir: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let mut utterances = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(CorpusError::ManifestParse {
                    line: idx + 1,
                    message: format!("expected 5 tab-separated fields, got {}", fields.len()),
                });
            }
            let split = match fields[3] {
                "train" => Split::Train,
                "validation" => Split::Validation,
                other => {
                    return Err(CorpusError::ManifestParse {
                        line: idx + 1,
                        message: format!("unknown split '{other}'"),
                    })
                }
            };
            utterances.push(Utterance {
                id: fields[0].to_string(),
                clip: AudioClip::from_wav(&dir.join(fields[1]))?,
                transcript: ctc_eval::normalise(fields[2])?,
                split,
                speaker_id: fields[4].to_string(),
            });
        }
        Ok(SessionCache {
            utterances,
            materialised_dir: Some(dir.to_path_buf()),
        })
    }

    /// Empties the cache and deletes any files it wrote: the stored data is
    /// removed once a session completes, so the next session starts fresh.
    pub fn clear(&mut self) -> Result<(), CorpusError> {
        if let Some(dir) = self.materialised_dir.take() {
            let remove = |path: PathBuf| match fs::remove_file(&path) {
                Ok(()) => Ok(()),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
                Err(e) => Err(CorpusError::Io(e)),
            };
            for utt in &self.utterances {
                remove(dir.join(format!("{}.wav", utt.id)))?;
            }
            remove(dir.join(MANIFEST_FILE))?;
        }
        self.utterances.clear();
        Ok(())
    }
}

const TRANSCRIPT_ATTEMPTS: usize = 200;

/// Samples a transcript of `words_min..=words_max` words whose rendered
/// duration for `speaker` lands inside the preset band. `root_word` (for
/// validation utterances) is inserted at a random position, guaranteeing
/// whole-word overlap with the training split.
fn sample_transcript<R: Rng>(
    rng: &mut R,
    word_list: &[&str],
    preset: &CorpusPreset,
    speaker: &SpeakerProfile,
    root_word: Option<&str>,
) -> Result<String, CorpusError> {
    for _ in 0..TRANSCRIPT_ATTEMPTS {
        let n_words = rng.gen_range(preset.words_min..=preset.words_max);
        let mut words: Vec<&str> = (0..n_words)
            .map(|_| *word_list.choose(rng).expect("word list checked non-empty"))
            .collect();
        if let Some(root) = root_word {
            let at = rng.gen_range(0..words.len());
            words[at] = root;
        }
        let text = words.join(" ");
        let duration = text.chars().count() as f64 * speaker.char_duration_s;
        if duration >= preset.duration_min_s
            && duration <= preset.duration_max_s
            && text.chars().count() <= MAX_LABEL_LEN
        {
            return Ok(text);
        }
    }
    Err(CorpusError::DurationRetriesExhausted {
        speaker: speaker.speaker_id.clone(),
        min_s: preset.duration_min_s,
        max_s: preset.duration_max_s,
        attempts: TRANSCRIPT_ATTEMPTS,
    })
}

/// Builds one session's cache: `n` utterances in a 3:1 train/validation
/// split (60/20 at the default N=80), speakers assigned round-robin,
/// transcripts sampled from `word_list`. Every validation transcript
/// reuses one whole word from a training transcript, mirroring validation
/// text being derived from root words seen in training.
pub fn build_session(
    profiles: &[SpeakerProfile],
    word_list: &[&str],
    rng_seed: u64,
    n: usize,
    preset: &CorpusPreset,
) -> Result<SessionCache, CorpusError> {
    if profiles.is_empty() {
        return Err(CorpusError::NoSpeakers);
    }
    for p in profiles {
        p.validate()?;
    }
    if word_list.is_empty() {
        return Err(CorpusError::EmptyWordList);
    }
    preset.validate()?;
    if n < 4 {
        return Err(CorpusError::SessionTooSmall(n));
    }
    let n_val = n / 4;
    let n_train = n - n_val;

    let mut rng = seeding::rng_from(rng_seed, "corpus-build");
    let tag = seeding::derive_seed(rng_seed, "session-id") & 0xffff_ffff;

    let mut utterances = Vec::with_capacity(n);
    for idx in 0..n_train {
        let speaker = &profiles[idx % profiles.len()];
        let text = sample_transcript(&mut rng, word_list, preset, speaker, None)?;
        utterances.push(Utterance {
            id: format!("s{tag:08x}-t{idx:03}"),
            clip: synthesize(speaker, &text)?,
            transcript: ctc_eval::normalise(&text)?,
            split: Split::Train,
            speaker_id: speaker.speaker_id.clone(),
        });
    }
    for idx in 0..n_val {
        let speaker = &profiles[(n_train + idx) % profiles.len()];
        // Root word: one whole word reused from a training transcript.
        let donor = rng.gen_range(0..n_train);
        let donor_words = utterances[donor].transcript.words();
        let root = *donor_words
            .choose(&mut rng)
            .expect("training transcripts are non-empty");
        let root = root.to_string();
        let text = sample_transcript(&mut rng, word_list, preset, speaker, Some(&root))?;
        utterances.push(Utterance {
            id: format!("s{tag:08x}-v{idx:03}"),
            clip: synthesize(speaker, &text)?,
            transcript: ctc_eval::normalise(&text)?,
            split: Split::Validation,
            speaker_id: speaker.speaker_id.clone(),
        });
    }
    Ok(SessionCache {
        utterances,
        materialised_dir: None,
    })
}
