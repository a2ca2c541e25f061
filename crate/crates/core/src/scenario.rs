//! A scenario is everything needed to reproduce a run except the controller:
//! grid geometry, demand profile, engine settings and control cycle.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ctrl::{Controller, PiParams, RateBounds};
use crate::demand::{generate_trips, DemandProfile};
use crate::error::PpoError;
use crate::metrics::{self, Snapshot, Tts};
use crate::net::{build_grid, GridSpec, Network};
use crate::sim::{CycleSummary, SimConfig, SimState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub grid: GridSpec,
    pub demand: DemandProfile,
    pub sim: SimConfig,
    /// Control cycle, seconds.
    pub cycle: f64,
    /// Runs stop after `max_time_factor` demand horizons.
    pub max_time_factor: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            grid: GridSpec::default(),
            demand: DemandProfile::default(),
            sim: SimConfig::default(),
            cycle: 96.0,
            max_time_factor: 2.0,
        }
    }
}

/// Outcome of one controller on one seed.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub tts: Tts,
    pub cycles: Vec<CycleSummary>,
    /// `(trip id, exit time)` in completion order.
    pub completions: Vec<(usize, f64)>,
    pub trips: usize,
    pub truncated: bool,
    pub end_time: f64,
    pub gridlock_moves: usize,
}

impl RunResult {
    /// Snapshots at every cycle boundary, including the final state.
    pub fn snapshot_trace(&self) -> Vec<Snapshot> {
        let mut trace: Vec<Snapshot> = self.cycles.iter().map(|c| c.before).collect();
        if let Some(last) = self.cycles.last() {
            trace.push(last.after);
        }
        trace
    }
}

impl Scenario {
    /// 3×3 single-lane protected grid with 8 feeders, loaded so that an
    /// uncontrolled perimeter overloads the region.
    pub fn desk() -> Self {
        Scenario {
            grid: GridSpec {
                rows: 3,
                cols: 3,
                link_length: 150.0,
                lanes: 1,
                feeder_count: 8,
                internal_od_count: 16,
                cycle: 96.0,
            },
            demand: DemandProfile::new(2.0, 4_400, 2_200).expect("valid peakedness"),
            ..Scenario::default()
        }
    }

    /// PI regulator tuned for [`Scenario::desk`]: the set-point is the
    /// critical accumulation read off the uncontrolled MFD.
    pub fn desk_pi(meters: usize) -> PiParams {
        PiParams {
            kp: 10.0,
            ki: 2.0,
            set_point: 150.0,
            bounds: RateBounds {
                meters,
                ..RateBounds::default()
            },
        }
    }

    pub fn max_time(&self) -> f64 {
        self.max_time_factor * self.demand.horizon()
    }

    pub fn network(&self) -> Result<Arc<Network>, PpoError> {
        Ok(Arc::new(build_grid(&self.grid)?))
    }

    pub fn bounds(&self, net: &Network) -> RateBounds {
        let m = net.meters().first();
        RateBounds {
            min_rate: m.map_or(crate::net::DEFAULT_MIN_RATE, |m| m.min_rate),
            max_rate: m.map_or(crate::net::DEFAULT_MAX_RATE, |m| m.max_rate),
            meters: net.meters().len(),
        }
    }

    /// Fresh engine for `seed`: the seed drives both trip generation and
    /// route choice.
    pub fn sim_state(&self, net: &Arc<Network>, seed: u64) -> Result<SimState, PpoError> {
        self.sim_state_split(net, seed, seed)
    }

    /// Fresh engine whose trip table and route choices come from separate
    /// seeds.
    pub fn sim_state_split(
        &self,
        net: &Arc<Network>,
        trip_seed: u64,
        route_seed: u64,
    ) -> Result<SimState, PpoError> {
        let trips = generate_trips(&self.demand, net, trip_seed)?;
        let config = SimConfig {
            seed: route_seed,
            ..self.sim
        };
        Ok(SimState::init(Arc::clone(net), trips, config)?.with_forecast(self.demand.clone()))
    }

    pub fn run(
        &self,
        net: &Arc<Network>,
        controller: &mut dyn Controller,
        seed: u64,
    ) -> Result<RunResult, PpoError> {
        controller.reset();
        let mut state = self.sim_state(net, seed)?;
        let out = state.run_to_end(controller, self.cycle, self.max_time())?;
        Ok(finish(seed, &state, out.cycles, out.truncated))
    }
}

pub(crate) fn finish(seed: u64, state: &SimState, cycles: Vec<CycleSummary>, truncated: bool) -> RunResult {
    let tts = metrics::tts(state.records(), state.clock).expect("engine records are consistent");
    RunResult {
        seed,
        tts,
        cycles,
        completions: state.completed().to_vec(),
        trips: state.trips().len(),
        truncated,
        end_time: state.clock,
        gridlock_moves: state.gridlock_moves(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctrl::NoControl;

    #[test]
    fn zero_demand_scenario_has_zero_tts() {
        let mut s = Scenario::desk();
        s.demand = DemandProfile::new(2.0, 0, 0).unwrap();
        let net = s.network().unwrap();
        let r = s.run(&net, &mut NoControl, 1).unwrap();
        assert_eq!(r.tts.total_h, 0.0);
        assert!(r.cycles.is_empty());
    }

    #[test]
    fn snapshot_trace_has_final_state() {
        let mut s = Scenario::desk();
        s.demand = DemandProfile::new(2.0, 100, 50).unwrap();
        let net = s.network().unwrap();
        let r = s.run(&net, &mut NoControl, 1).unwrap();
        let trace = r.snapshot_trace();
        assert_eq!(trace.len(), r.cycles.len() + 1);
        assert_eq!(trace.last().unwrap().completed, 150);
    }
}
