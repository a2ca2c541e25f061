//! Controller contract and the two baseline controllers.

use serde::{Deserialize, Serialize};

use crate::demand::FutureDemand;

/// What the controller sees at the start of a control cycle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Observation {
    pub clock: f64,
    /// Protected-region density, veh/lane-km.
    pub inner_density: f64,
    /// Feeder density including vehicles held at the meters, veh/lane-km.
    pub feeder_density: f64,
    /// Vehicles on protected links now.
    pub protected_count: f64,
    /// Vehicles on protected links at the previous decision.
    pub prev_protected_count: f64,
    /// Total perimeter rate applied during the previous cycle, veh/h.
    pub prev_total_rate: f64,
    pub future: FutureDemand,
}

impl Observation {
    pub fn is_valid(&self) -> bool {
        let vals = [
            self.clock,
            self.inner_density,
            self.feeder_density,
            self.protected_count,
            self.prev_protected_count,
            self.prev_total_rate,
            self.future.n12,
            self.future.n22,
            self.future.n21,
            self.future.n11,
        ];
        vals.iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// One homogeneous decision for all meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MeterCommand {
    /// Meters inactive: queued vehicles enter as soon as storage allows.
    Bypass,
    /// Per-meter release rate, veh/h.
    Rate(f64),
}

/// Per-meter rate bounds and how many meters share the decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateBounds {
    pub min_rate: f64,
    pub max_rate: f64,
    pub meters: usize,
}

impl RateBounds {
    pub fn clamp(&self, rate: f64) -> f64 {
        if rate.is_nan() {
            return self.min_rate;
        }
        rate.clamp(self.min_rate, self.max_rate)
    }

    pub fn total_min(&self) -> f64 {
        self.min_rate * self.meters as f64
    }

    pub fn total_max(&self) -> f64 {
        self.max_rate * self.meters as f64
    }
}

impl Default for RateBounds {
    fn default() -> Self {
        RateBounds {
            min_rate: crate::net::DEFAULT_MIN_RATE,
            max_rate: crate::net::DEFAULT_MAX_RATE,
            meters: 24,
        }
    }
}

pub trait Controller {
    fn name(&self) -> &str;

    fn decide(&mut self, obs: &Observation) -> MeterCommand;

    /// Clears internal history before a new run.
    fn reset(&mut self) {}
}

/// No perimeter control.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoControl;

impl Controller for NoControl {
    fn name(&self) -> &str {
        "npc"
    }

    fn decide(&mut self, _obs: &Observation) -> MeterCommand {
        MeterCommand::Bypass
    }
}

/// Always applies the same per-meter rate.
#[derive(Debug, Clone, Copy)]
pub struct FixedRate(pub f64);

impl Controller for FixedRate {
    fn name(&self) -> &str {
        "fixed"
    }

    fn decide(&mut self, _obs: &Observation) -> MeterCommand {
        MeterCommand::Rate(self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiParams {
    pub kp: f64,
    pub ki: f64,
    /// Target protected accumulation, vehicles.
    pub set_point: f64,
    pub bounds: RateBounds,
}

impl Default for PiParams {
    fn default() -> Self {
        PiParams {
            kp: 36.88,
            ki: 1.24,
            set_point: 2700.0,
            bounds: RateBounds::default(),
        }
    }
}

/// Total perimeter inflow from the incremental PI law, clamped to the total
/// bounds, then split evenly across meters. Quantities are veh/h and vehicles.
pub fn pi_decide(params: &PiParams, obs: &Observation) -> f64 {
    let total = obs.prev_total_rate
        - params.kp * (obs.protected_count - obs.prev_protected_count)
        + params.ki * (params.set_point - obs.protected_count);
    let b = &params.bounds;
    let total = if total.is_nan() {
        b.total_min()
    } else {
        total.clamp(b.total_min(), b.total_max())
    };
    total / b.meters as f64
}

/// PI regulator on protected accumulation.
#[derive(Debug, Clone)]
pub struct PiController {
    pub params: PiParams,
}

impl PiController {
    pub fn new(params: PiParams) -> Self {
        PiController { params }
    }
}

impl Controller for PiController {
    fn name(&self) -> &str {
        "pi"
    }

    fn decide(&mut self, obs: &Observation) -> MeterCommand {
        MeterCommand::Rate(pi_decide(&self.params, obs))
    }
}
