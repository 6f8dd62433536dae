//! The epoch-gating state machine: battery floor, WER patience, and the
//! epoch budget, separated from training so scripted WER/battery sequences
//! can be replayed through it directly.
//!
//! Two patience flavours are provided. `NoImprovement` stops after `p`
//! consecutive epochs without a new best validation WER — the stated intent
//! of patience-based early stopping. `PaperLiteral` reproduces a quirkier
//! rule some descriptions print: patience increments when the current WER is
//! ≤ the previous epoch's WER (with the previous value starting at 0), which
//! counts improvements rather than stalls. Both are kept so the literal rule
//! stays testable against hand-derived traces.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum WER decrease that counts as an improvement.
pub const IMPROVEMENT_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum StoppingError {
    #[error("invalid stopping config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatienceMode {
    #[default]
    NoImprovement,
    PaperLiteral,
}

impl fmt::Display for PatienceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatienceMode::NoImprovement => "no_improvement",
            PatienceMode::PaperLiteral => "paper_literal",
        })
    }
}

/// Why a session's training loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Battery,
    Patience,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Battery => "battery",
            StopReason::Patience => "patience",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingConfig {
    /// Epoch budget T.
    pub max_epochs: u64,
    /// Patience p.
    pub patience: u64,
    /// Battery floor b, in percent.
    pub battery_floor_pct: f64,
    pub mode: PatienceMode,
}

impl StoppingConfig {
    pub fn validate(&self) -> Result<(), StoppingError> {
        if self.max_epochs < 1 {
            return Err(StoppingError::Invalid("max_epochs must be ≥ 1".into()));
        }
        if self.patience < 1 {
            return Err(StoppingError::Invalid("patience must be ≥ 1".into()));
        }
        if !(0.0..=100.0).contains(&self.battery_floor_pct) {
            return Err(StoppingError::Invalid(format!(
                "battery floor {} outside [0, 100]",
                self.battery_floor_pct
            )));
        }
        Ok(())
    }
}

/// Outcome of feeding one epoch's validation WER into the machine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AfterEpoch {
    /// True when this epoch set a new best WER (best weights should be
    /// checkpointed now).
    pub new_best: bool,
    pub stop: Option<StopReason>,
}

/// Gates each epoch in order: epoch budget first, then battery, then —
/// after the epoch has run — the patience rule.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingMachine {
    cfg: StoppingConfig,
    epochs_run: u64,
    past_wer: f64,
    best_wer: Option<f64>,
    best_epoch: Option<u64>,
    patience: u64,
    reason: Option<StopReason>,
}

impl StoppingMachine {
    pub fn new(cfg: StoppingConfig) -> Result<Self, StoppingError> {
        cfg.validate()?;
        Ok(StoppingMachine {
            cfg,
            epochs_run: 0,
            past_wer: 0.0,
            best_wer: None,
            best_epoch: None,
            patience: 0,
            reason: None,
        })
    }

    /// Checks whether the next epoch may run, given the battery level read
    /// at its start. The epoch budget is checked before the battery, so a
    /// drained battery is only ever reported while budget remains.
    /// Returns `None` to proceed, or the stop reason.
    pub fn before_epoch(&mut self, battery_pct: f64) -> Option<StopReason> {
        if self.reason.is_some() {
            return self.reason;
        }
        if self.epochs_run >= self.cfg.max_epochs {
            self.reason = Some(StopReason::MaxEpochs);
        } else if battery_pct <= self.cfg.battery_floor_pct {
            self.reason = Some(StopReason::Battery);
        }
        self.reason
    }

    /// Feeds the epoch's validation WER in; updates best tracking and the
    /// patience counter per the configured mode.
    pub fn after_epoch(&mut self, wer: f64) -> AfterEpoch {
        if self.reason.is_some() {
            return AfterEpoch {
                new_best: false,
                stop: self.reason,
            };
        }
        self.epochs_run += 1;
        let epoch = self.epochs_run;
        // Best tracking is identical in both modes: the best weights are
        // the minimum-WER epoch regardless of how stopping is decided.
        let new_best = match self.best_wer {
            None => true,
            Some(best) => wer < best - IMPROVEMENT_EPS,
        };
        if new_best {
            self.best_wer = Some(wer);
            self.best_epoch = Some(epoch);
        }
        match self.cfg.mode {
            PatienceMode::NoImprovement => {
                if new_best {
                    self.patience = 0;
                } else {
                    self.patience += 1;
                    if self.patience >= self.cfg.patience {
                        self.reason = Some(StopReason::Patience);
                    }
                }
            }
            PatienceMode::PaperLiteral => {
                // Verbatim rule: compare against the previous epoch's WER
                // (initialised to 0), increment when current ≤ past.
                if wer <= self.past_wer {
                    self.patience += 1;
                    if self.patience >= self.cfg.patience {
                        self.reason = Some(StopReason::Patience);
                    }
                } else {
                    self.patience = 0;
                }
                self.past_wer = wer;
            }
        }
        AfterEpoch {
            new_best,
            stop: self.reason,
        }
    }

    pub fn epochs_run(&self) -> u64 {
        self.epochs_run
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.reason
    }

    /// `(E, best WER)` — the epoch whose weights are C_WER.
    pub fn best(&self) -> Option<(u64, f64)> {
        self.best_epoch.zip(self.best_wer)
    }

    pub fn current_patience(&self) -> u64 {
        self.patience
    }
}

/// Replays scripted WER and battery sequences through the machine without
/// any model: battery is `start − drain·k` before epoch k+1, and epoch k
/// reports `wers[k]`. Returns the machine after the run plus the patience
/// value observed after each epoch.
pub fn replay(
    cfg: StoppingConfig,
    wers: &[f64],
    battery_start_pct: f64,
    battery_drain_per_epoch_pct: f64,
) -> Result<(StoppingMachine, Vec<u64>), StoppingError> {
    let mut machine = StoppingMachine::new(cfg)?;
    let mut patience_trace = Vec::new();
    loop {
        let k = machine.epochs_run();
        let battery = (battery_start_pct - battery_drain_per_epoch_pct * k as f64).max(0.0);
        if machine.before_epoch(battery).is_some() {
            break;
        }
        let Some(&wer) = wers.get(k as usize) else {
            // Script exhausted before any stop criterion fired.
            break;
        };
        let after = machine.after_epoch(wer);
        patience_trace.push(machine.current_patience());
        if after.stop.is_some() {
            break;
        }
    }
    Ok((machine, patience_trace))
}
