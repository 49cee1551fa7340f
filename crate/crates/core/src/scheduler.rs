//! Per-cell arbitration of the shared radio resource between communication
//! and sensing.
//!
//! The cell's resources are collapsed into one normalized scalar with
//! capacity 1. Under capacity both demands are granted; over capacity the
//! resource is split in proportion to weight-scaled demand, a share above
//! its demand is capped and the surplus goes once to the other side.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::ChannelModel;

pub const CAPACITY: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedulerError {
    #[error("sensing share is zero; no measurements possible")]
    SensingStarved,
    #[error("share must lie in [0, 1], got {0}")]
    InvalidShare(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResourceState {
    pub cell_id: String,
    pub comm_demand: f64,
    pub sensing_demand: f64,
    pub w_comm: f64,
    pub w_sens: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shares {
    pub comm: f64,
    pub sensing: f64,
}

pub fn allocate(state: &CellResourceState) -> Shares {
    let (dc, ds) = (state.comm_demand.max(0.0), state.sensing_demand.max(0.0));
    if dc + ds <= CAPACITY {
        return Shares { comm: dc, sensing: ds };
    }
    let total = state.w_comm * dc + state.w_sens * ds;
    let raw_sensing = state.w_sens * ds / total;
    let raw_comm = state.w_comm * dc / total;
    if raw_sensing > ds {
        // Sensing is capped at its demand; comm takes the surplus.
        Shares { comm: dc.min(CAPACITY - ds), sensing: ds }
    } else if raw_comm > dc {
        Shares { comm: dc, sensing: ds.min(CAPACITY - dc) }
    } else {
        Shares { comm: (CAPACITY - raw_sensing).min(dc), sensing: raw_sensing }
    }
}

/// How a sensing share affects the measurement pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensingEffect {
    pub effective_std: f64,
    /// Share fell below the configured minimum: every other round is skipped.
    pub halve_refresh: bool,
}

/// Noise grows as `1/sqrt(share)`, modeling lost integration time.
pub fn effective_noise_std(noise_std: f64, share: f64) -> Result<f64, SchedulerError> {
    if !(0.0..=1.0).contains(&share) {
        return Err(SchedulerError::InvalidShare(share));
    }
    if share == 0.0 {
        return Err(SchedulerError::SensingStarved);
    }
    Ok(noise_std / share.sqrt())
}

pub fn apply_sensing_share(noise_std: f64, share: f64, min_share: f64) -> Result<SensingEffect, SchedulerError> {
    let effective_std = effective_noise_std(noise_std, share)?;
    Ok(SensingEffect { effective_std, halve_refresh: share < min_share })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CommEffect {
    Channel(ChannelModel),
    /// No communication resource granted; transfers wait for reallocation.
    Stalled,
}

pub fn apply_comm_share(share: f64, channel: &ChannelModel) -> Result<CommEffect, SchedulerError> {
    if !(0.0..=1.0).contains(&share) {
        return Err(SchedulerError::InvalidShare(share));
    }
    if share == 0.0 {
        return Ok(CommEffect::Stalled);
    }
    Ok(CommEffect::Channel(channel.with_bandwidth(channel.bandwidth * share)))
}
