//! Simulated device resources: scripted RAM trajectories and a linear
//! battery drain model, sampled once per training epoch.
//!
//! Time is discrete and epoch-indexed; one tick corresponds to one training
//! epoch, which is when the session loop reads resources.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DeviceError {
    #[error("profile '{profile}': available RAM {available} MB exceeds total {total} MB")]
    AvailableExceedsTotal {
        profile: String,
        available: u64,
        total: u64,
    },
    #[error("profile '{0}': RAM trajectory must be non-empty and start at time 0")]
    TrajectoryMissingOrigin(String),
    #[error("profile '{0}': RAM trajectory time indices must be strictly increasing")]
    TrajectoryNotIncreasing(String),
    #[error("profile '{profile}': battery start {value} outside [0, 100]")]
    BatteryOutOfRange { profile: String, value: f64 },
    #[error("profile '{profile}': battery drain {value} must be a non-negative finite number")]
    InvalidDrain { profile: String, value: f64 },
    #[error("profile '{0}': total RAM must be positive")]
    ZeroTotalRam(String),
}

/// A scripted device: fixed total RAM, a step function for available RAM,
/// and a linear per-epoch battery drain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DeviceProfile {
    pub name: String,
    pub total_ram_mb: u64,
    /// Step function for available RAM: (time_index, available_ram_mb)
    /// pairs, strictly increasing in time, first entry at time 0.
    pub ram_trajectory: Vec<(u64, u64)>,
    pub battery_start_pct: f64,
    pub battery_drain_per_epoch_pct: f64,
}

/// Resources observed at one time index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceSnapshot {
    pub time_index: u64,
    pub total_ram_mb: u64,
    pub available_ram_mb: u64,
    pub battery_pct: f64,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<(), DeviceError> {
        if self.total_ram_mb == 0 {
            return Err(DeviceError::ZeroTotalRam(self.name.clone()));
        }
        match self.ram_trajectory.first() {
            Some(&(0, _)) => {}
            _ => return Err(DeviceError::TrajectoryMissingOrigin(self.name.clone())),
        }
        for pair in self.ram_trajectory.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(DeviceError::TrajectoryNotIncreasing(self.name.clone()));
            }
        }
        for &(_, available) in &self.ram_trajectory {
            if available > self.total_ram_mb {
                return Err(DeviceError::AvailableExceedsTotal {
                    profile: self.name.clone(),
                    available,
                    total: self.total_ram_mb,
                });
            }
        }
        if !(0.0..=100.0).contains(&self.battery_start_pct) {
            return Err(DeviceError::BatteryOutOfRange {
                profile: self.name.clone(),
                value: self.battery_start_pct,
            });
        }
        if !self.battery_drain_per_epoch_pct.is_finite() || self.battery_drain_per_epoch_pct < 0.0
        {
            return Err(DeviceError::InvalidDrain {
                profile: self.name.clone(),
                value: self.battery_drain_per_epoch_pct,
            });
        }
        Ok(())
    }

    /// Resources at `time_index`: available RAM is the trajectory value at
    /// the greatest listed time ≤ `time_index`; battery drains linearly and
    /// clamps at zero. Pure: same inputs always give the same snapshot.
    pub fn snapshot(&self, time_index: u64) -> ResourceSnapshot {
        let available_ram_mb = self
            .ram_trajectory
            .iter()
            .take_while(|&&(t, _)| t <= time_index)
            .last()
            .map(|&(_, ram)| ram)
            .unwrap_or(0);
        let battery_pct =
            (self.battery_start_pct - time_index as f64 * self.battery_drain_per_epoch_pct).max(0.0);
        ResourceSnapshot {
            time_index,
            total_ram_mb: self.total_ram_mb,
            available_ram_mb,
            battery_pct,
        }
    }
}

impl ResourceSnapshot {
    /// Available over total RAM, in [0, 1].
    pub fn ram_ratio(&self) -> f64 {
        self.available_ram_mb as f64 / self.total_ram_mb as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn phone() -> DeviceProfile {
        DeviceProfile {
            name: "phone-8gb".into(),
            total_ram_mb: 8192,
            ram_trajectory: vec![(0, 5427)],
            battery_start_pct: 100.0,
            battery_drain_per_epoch_pct: 3.0,
        }
    }

    #[test]
    fn snapshot_frozen_examples() {
        let p = phone();
        p.validate().unwrap();
        let s0 = p.snapshot(0);
        assert_eq!(
            (s0.total_ram_mb, s0.available_ram_mb, s0.battery_pct),
            (8192, 5427, 100.0)
        );
        assert_eq!(p.snapshot(5).battery_pct, 85.0);

        let steep = DeviceProfile {
            battery_drain_per_epoch_pct: 50.0,
            ..phone()
        };
        assert_eq!(steep.snapshot(3).battery_pct, 0.0);
    }

    #[test]
    fn ram_ratio_frozen_examples() {
        let p = phone();
        // 5427/8192 is exactly representable: both are powers-of-two scaled.
        assert_eq!(p.snapshot(0).ram_ratio(), 0.6624755859375);
        let full = DeviceProfile {
            ram_trajectory: vec![(0, 8192)],
            ..phone()
        };
        assert_eq!(full.snapshot(0).ram_ratio(), 1.0);
        let empty = DeviceProfile {
            ram_trajectory: vec![(0, 0)],
            ..phone()
        };
        assert_eq!(empty.snapshot(0).ram_ratio(), 0.0);
    }

    #[test]
    fn trajectory_is_a_step_function() {
        let p = DeviceProfile {
            ram_trajectory: vec![(0, 5427), (3, 2048), (10, 8000)],
            ..phone()
        };
        p.validate().unwrap();
        assert_eq!(p.snapshot(0).available_ram_mb, 5427);
        assert_eq!(p.snapshot(2).available_ram_mb, 5427);
        assert_eq!(p.snapshot(3).available_ram_mb, 2048);
        assert_eq!(p.snapshot(9).available_ram_mb, 2048);
        assert_eq!(p.snapshot(10).available_ram_mb, 8000);
        assert_eq!(p.snapshot(1_000_000).available_ram_mb, 8000);
    }

    #[test]
    fn validation_rejects_bad_profiles() {
        let missing_origin = DeviceProfile {
            ram_trajectory: vec![(1, 100)],
            ..phone()
        };
        assert!(matches!(
            missing_origin.validate(),
            Err(DeviceError::TrajectoryMissingOrigin(_))
        ));
        let over_total = DeviceProfile {
            ram_trajectory: vec![(0, 9000)],
            ..phone()
        };
        assert!(matches!(
            over_total.validate(),
            Err(DeviceError::AvailableExceedsTotal { .. })
        ));
        let not_increasing = DeviceProfile {
            ram_trajectory: vec![(0, 100), (2, 200), (2, 300)],
            ..phone()
        };
        assert!(matches!(
            not_increasing.validate(),
            Err(DeviceError::TrajectoryNotIncreasing(_))
        ));
        let bad_battery = DeviceProfile {
            battery_start_pct: 101.0,
            ..phone()
        };
        assert!(matches!(
            bad_battery.validate(),
            Err(DeviceError::BatteryOutOfRange { .. })
        ));
    }

    proptest! {
        #[test]
        fn snapshot_is_pure_and_battery_non_increasing(
            t1 in 0u64..500,
            t2 in 0u64..500,
            drain in 0.0f64..10.0,
        ) {
            let p = DeviceProfile { battery_drain_per_epoch_pct: drain, ..phone() };
            prop_assert_eq!(p.snapshot(t1), p.snapshot(t1));
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(p.snapshot(hi).battery_pct <= p.snapshot(lo).battery_pct);
            let ratio = p.snapshot(t1).ram_ratio();
            prop_assert!((0.0..=1.0).contains(&ratio));
        }
    }
}
