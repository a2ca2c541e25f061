//! Peaked demand profile, seeded trip tables and future-demand integrals.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DemandError;
use crate::net::{Network, NodeId};

pub const INTERVALS: usize = 9;
pub const DEFAULT_INTERVAL_LENGTH: f64 = 900.0;
pub const DEFAULT_ENDOGENOUS: u64 = 11_000;
pub const DEFAULT_EXOGENOUS: u64 = 6_000;
pub const DEFAULT_PEAKEDNESS: f64 = 2.0;

/// `[r^0, r^1, r^2, r^3, r^4, r^3, r^2, r^1, r^0]`.
pub fn interval_weights(r: f64) -> Result<[f64; INTERVALS], DemandError> {
    if !(r >= 1.0) || !r.is_finite() {
        return Err(DemandError::Domain(format!("peakedness must be >= 1, got {r}")));
    }
    let mut w = [0.0; INTERVALS];
    for (i, slot) in w.iter_mut().enumerate() {
        let k = 4 - (i as i32 - 4).abs();
        *slot = r.powi(k);
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripClass {
    /// Feeder origin to internal destination (q12).
    Exogenous,
    /// Internal origin to internal destination (q22).
    Endogenous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub id: usize,
    pub origin: NodeId,
    pub destination: NodeId,
    #[serde(rename = "generation_time_s")]
    pub generation_time: f64,
    pub class: TripClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandProfile {
    pub interval_length: f64,
    pub peakedness: f64,
    pub weights: [f64; INTERVALS],
    pub total_endogenous: u64,
    pub total_exogenous: u64,
}

impl Default for DemandProfile {
    fn default() -> Self {
        DemandProfile::new(DEFAULT_PEAKEDNESS, DEFAULT_ENDOGENOUS, DEFAULT_EXOGENOUS)
            .expect("default peakedness is valid")
    }
}

/// Vehicles expected in the next window, by OD class.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FutureDemand {
    pub n12: f64,
    pub n22: f64,
    pub n21: f64,
    pub n11: f64,
}

impl DemandProfile {
    pub fn new(r: f64, total_endogenous: u64, total_exogenous: u64) -> Result<Self, DemandError> {
        Ok(DemandProfile {
            interval_length: DEFAULT_INTERVAL_LENGTH,
            peakedness: r,
            weights: interval_weights(r)?,
            total_endogenous,
            total_exogenous,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.interval_length * INTERVALS as f64
    }

    fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Constant (q12, q22) rates in veh/s during interval `i`.
    pub fn rates(&self, i: usize) -> (f64, f64) {
        let sum = self.weight_sum();
        if sum <= 0.0 || i >= INTERVALS {
            return (0.0, 0.0);
        }
        let share = self.weights[i] / sum / self.interval_length;
        (
            self.total_exogenous as f64 * share,
            self.total_endogenous as f64 * share,
        )
    }

    /// Integrates the piecewise-constant rates over `[t, t + window)`.
    pub fn future_demand(&self, t: f64, window: f64) -> Result<FutureDemand, DemandError> {
        if !(window > 0.0) {
            return Err(DemandError::Domain(format!("window must be > 0, got {window}")));
        }
        if !(t >= 0.0) {
            return Err(DemandError::Domain(format!("time must be >= 0, got {t}")));
        }
        let mut out = FutureDemand::default();
        let end = t + window;
        for i in 0..INTERVALS {
            let lo = i as f64 * self.interval_length;
            let hi = lo + self.interval_length;
            let overlap = end.min(hi) - t.max(lo);
            if overlap > 0.0 {
                let (q12, q22) = self.rates(i);
                out.n12 += q12 * overlap;
                out.n22 += q22 * overlap;
            }
        }
        Ok(out)
    }

    /// Largest single-class arrival count over any control-cycle-aligned window.
    pub fn max_cycle_demand(&self, cycle: f64) -> f64 {
        let mut best: f64 = 0.0;
        let mut t = 0.0;
        while t < self.horizon() {
            let n = self.future_demand(t, cycle).expect("cycle > 0");
            best = best.max(n.n12).max(n.n22);
            t += cycle;
        }
        best
    }

    /// Multiplies both totals by `factor`, rounding to whole vehicles.
    pub fn scale(&self, factor: f64) -> Result<Self, DemandError> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(DemandError::Domain(format!("scale factor must be > 0, got {factor}")));
        }
        Ok(DemandProfile {
            total_endogenous: (self.total_endogenous as f64 * factor).round() as u64,
            total_exogenous: (self.total_exogenous as f64 * factor).round() as u64,
            ..self.clone()
        })
    }

    /// Replaces the weights, keeping the totals.
    pub fn with_peakedness(&self, r: f64) -> Result<Self, DemandError> {
        Ok(DemandProfile {
            peakedness: r,
            weights: interval_weights(r)?,
            ..self.clone()
        })
    }
}

/// Splits `total` into integers proportional to `shares` so that they sum to
/// `total` exactly. Ties in the fractional parts go to the lower index.
pub fn largest_remainder(total: u64, shares: &[f64]) -> Vec<u64> {
    let sum: f64 = shares.iter().sum();
    if shares.is_empty() || sum <= 0.0 {
        return vec![0; shares.len()];
    }
    let exact: Vec<f64> = shares.iter().map(|s| total as f64 * s / sum).collect();
    let mut counts: Vec<u64> = exact.iter().map(|e| e.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned) as usize) {
        counts[i] += 1;
    }
    counts
}

/// Per-interval trip counts of one class.
pub fn interval_counts(profile: &DemandProfile, total: u64) -> Vec<u64> {
    largest_remainder(total, &profile.weights)
}

/// Generates the seeded trip table, sorted by generation time.
pub fn generate_trips(
    profile: &DemandProfile,
    net: &Network,
    seed: u64,
) -> Result<Vec<Trip>, DemandError> {
    let internal = net.internal_od();
    let endo_pairs: Vec<(NodeId, NodeId)> = internal
        .iter()
        .flat_map(|&d| internal.iter().filter(move |&&o| o != d).map(move |&o| (o, d)))
        .collect();
    let exo_pairs: Vec<(NodeId, NodeId)> = net
        .feeder_origins()
        .iter()
        .flat_map(|&o| internal.iter().map(move |&d| (o, d)))
        .collect();
    let wants_endo = profile.total_endogenous > 0;
    let wants_exo = profile.total_exogenous > 0;
    if (wants_endo && endo_pairs.is_empty()) || (wants_exo && exo_pairs.is_empty()) {
        return Err(DemandError::NoPairs);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trips = Vec::with_capacity((profile.total_endogenous + profile.total_exogenous) as usize);
    let classes = [
        (TripClass::Exogenous, profile.total_exogenous, &exo_pairs),
        (TripClass::Endogenous, profile.total_endogenous, &endo_pairs),
    ];
    for (class, total, pairs) in classes {
        for (i, &count) in interval_counts(profile, total).iter().enumerate() {
            let start = i as f64 * profile.interval_length;
            let base = count / pairs.len() as u64;
            let extra = (count % pairs.len() as u64) as usize;
            let mut lucky: Vec<usize> = (0..pairs.len()).collect();
            lucky.shuffle(&mut rng);
            let mut per_pair = vec![base; pairs.len()];
            for &p in &lucky[..extra] {
                per_pair[p] += 1;
            }
            for (p, &n) in per_pair.iter().enumerate() {
                for _ in 0..n {
                    let (origin, destination) = pairs[p];
                    trips.push(Trip {
                        id: 0,
                        origin,
                        destination,
                        generation_time: start + rng.gen::<f64>() * profile.interval_length,
                        class,
                    });
                }
            }
        }
    }
    trips.sort_by(|a, b| {
        a.generation_time
            .total_cmp(&b.generation_time)
            .then(a.origin.cmp(&b.origin))
            .then(a.destination.cmp(&b.destination))
    });
    for (i, t) in trips.iter_mut().enumerate() {
        t.id = i;
    }
    Ok(trips)
}

pub fn write_trips_csv<W: Write>(trips: &[Trip], out: W) -> Result<(), DemandError> {
    let mut w = csv::Writer::from_writer(out);
    for t in trips {
        w.serialize(t).map_err(|e| DemandError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| DemandError::Csv(e.to_string()))
}

pub fn read_trips_csv<R: Read>(input: R) -> Result<Vec<Trip>, DemandError> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<Result<Vec<Trip>, _>>()
        .map_err(|e| DemandError::Csv(e.to_string()))
}
