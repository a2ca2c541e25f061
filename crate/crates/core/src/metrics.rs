//! Densities, completion rate, total time spent and MFD series.

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;
use crate::sim::TripRecord;

/// Aggregate state at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Snapshot {
    pub clock: f64,
    pub protected_count: usize,
    pub protected_lane_km: f64,
    pub feeder_count: usize,
    pub feeder_lane_km: f64,
    /// Vehicles held at internal origins because their stub was full.
    pub internal_waiting: usize,
    /// Vehicles held at the meters.
    pub meter_waiting: usize,
    pub completed: usize,
    pub generated: usize,
    /// Cumulative vehicle-km driven on protected links.
    pub protected_vkt: f64,
}

/// Protected vehicles per protected lane-km.
pub fn inner_density(s: &Snapshot) -> Result<f64, MetricsError> {
    if !(s.protected_lane_km > 0.0) {
        return Err(MetricsError::ZeroLength("protected"));
    }
    Ok(s.protected_count as f64 / s.protected_lane_km)
}

/// Feeder vehicles per feeder lane-km, optionally counting the vehicles
/// held at the meters.
pub fn feeder_density(s: &Snapshot, include_virtual: bool) -> Result<f64, MetricsError> {
    if !(s.feeder_lane_km > 0.0) {
        return Err(MetricsError::ZeroLength("feeder"));
    }
    let extra = if include_virtual { s.meter_waiting } else { 0 };
    Ok((s.feeder_count + extra) as f64 / s.feeder_lane_km)
}

/// Completed trips per second over `window` seconds.
pub fn completion_rate(completed: usize, window: f64) -> f64 {
    if !(window > 0.0) {
        return 0.0;
    }
    completed as f64 / window
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Tts {
    pub total_h: f64,
    pub inside_h: f64,
    pub outside_h: f64,
    pub unfinished: usize,
}

/// Total time spent in hours. Finished trips count `exit - generation`;
/// unfinished ones accrue up to `horizon_end`. The split follows where each
/// vehicle was: protected links and internal origins count inside, feeder
/// links and meter queues outside.
pub fn tts(records: &[TripRecord], horizon_end: f64) -> Result<Tts, MetricsError> {
    let mut out = Tts::default();
    let (mut total, mut inside, mut outside) = (0.0, 0.0, 0.0);
    for r in records {
        match r.exit_time {
            Some(exit) => {
                if exit < r.generation_time {
                    return Err(MetricsError::ExitBeforeGeneration(r.trip_id));
                }
                total += exit - r.generation_time;
                inside += r.inside_s;
                outside += r.outside_s;
            }
            None => {
                if horizon_end <= r.generation_time {
                    continue;
                }
                out.unfinished += 1;
                total += horizon_end - r.generation_time;
                let open = (horizon_end - r.open_since).max(0.0);
                let (i, o) = if r.open_inside { (open, 0.0) } else { (0.0, open) };
                inside += r.inside_s + i;
                outside += r.outside_s + o;
            }
        }
    }
    out.total_h = total / 3600.0;
    out.inside_h = inside / 3600.0;
    out.outside_h = outside / 3600.0;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MfdPhase {
    Loading,
    Unloading,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfdPoint {
    pub window_start: f64,
    /// Mean protected density over the window, veh/lane-km.
    pub density: f64,
    /// Protected vehicle-km per lane-km per hour.
    pub production: f64,
    pub phase: MfdPhase,
}

/// Groups a snapshot trace into windows of `aggregation` seconds. The trace
/// must be in time order; windows with fewer than two snapshots are skipped.
pub fn mfd_series(trace: &[Snapshot], aggregation: f64) -> Vec<MfdPoint> {
    let Some(first) = trace.first() else {
        return Vec::new();
    };
    let mut points = Vec::new();
    let mut start = 0;
    while start < trace.len() {
        let w0 = first.clock + ((trace[start].clock - first.clock) / aggregation).floor() * aggregation;
        let mut end = start;
        while end + 1 < trace.len() && trace[end + 1].clock < w0 + aggregation {
            end += 1;
        }
        // the window's last sample closes at the next window's first sample
        let close = (end + 1).min(trace.len() - 1);
        let span_h = (trace[close].clock - trace[start].clock) / 3600.0;
        let lane_km = trace[start].protected_lane_km;
        if close > start && span_h > 0.0 && lane_km > 0.0 {
            let density = trace[start..=end]
                .iter()
                .map(|s| s.protected_count as f64 / lane_km)
                .sum::<f64>()
                / (end - start + 1) as f64;
            let vkt = trace[close].protected_vkt - trace[start].protected_vkt;
            points.push(MfdPoint {
                window_start: w0,
                density,
                production: vkt / lane_km / span_h,
                phase: MfdPhase::Loading,
            });
        }
        start = end + 1;
    }
    let peak = points
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.density.total_cmp(&b.1.density).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i);
    if let Some(peak) = peak {
        for p in &mut points[peak + 1..] {
            p.phase = MfdPhase::Unloading;
        }
    }
    points
}

/// Production at the maximum-density point divided by the peak production.
pub fn production_ratio_at_max_density(points: &[MfdPoint]) -> Option<f64> {
    let at_max = points.iter().max_by(|a, b| a.density.total_cmp(&b.density))?;
    let peak = points.iter().map(|p| p.production).fold(0.0, f64::max);
    (peak > 0.0).then(|| at_max.production / peak)
}

/// Mean loading and unloading production over density bins of width
/// `bin` that both phases visit. `None` when no bin is shared.
pub fn hysteresis(points: &[MfdPoint], bin: f64) -> Option<(f64, f64)> {
    use std::collections::BTreeMap;
    let mut bins: BTreeMap<i64, ([f64; 2], [usize; 2])> = BTreeMap::new();
    for p in points {
        let k = (p.density / bin).floor() as i64;
        let e = bins.entry(k).or_insert(([0.0; 2], [0; 2]));
        let j = (p.phase == MfdPhase::Unloading) as usize;
        e.0[j] += p.production;
        e.1[j] += 1;
    }
    let shared: Vec<_> = bins.values().filter(|(_, n)| n[0] > 0 && n[1] > 0).collect();
    if shared.is_empty() {
        return None;
    }
    let m = shared.len() as f64;
    let load = shared.iter().map(|(s, n)| s[0] / n[0] as f64).sum::<f64>() / m;
    let unload = shared.iter().map(|(s, n)| s[1] / n[1] as f64).sum::<f64>() / m;
    Some((load, unload))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(protected: usize, lane_km: f64) -> Snapshot {
        Snapshot {
            protected_count: protected,
            protected_lane_km: lane_km,
            feeder_lane_km: 8.16,
            ..Default::default()
        }
    }

    #[test]
    fn critical_density_arithmetic() {
        assert_eq!(inner_density(&snap(0, 10.0)).unwrap(), 0.0);
        assert!((inner_density(&snap(350, 10.0)).unwrap() - 35.0).abs() < 1e-12);
        assert!(inner_density(&snap(1, 0.0)).is_err());
    }

    #[test]
    fn feeder_density_with_and_without_queue() {
        let mut s = snap(0, 10.0);
        assert_eq!(feeder_density(&s, false).unwrap(), 0.0);
        // 24 feeders * 170 m * 2 lanes = 8.16 lane-km
        s.feeder_count = 408;
        assert!((feeder_density(&s, false).unwrap() - 50.0).abs() < 1e-12);
        s.meter_waiting = 51;
        let diff = feeder_density(&s, true).unwrap() - feeder_density(&s, false).unwrap();
        assert!((diff - 51.0 / 8.16).abs() < 1e-12);
        s.feeder_lane_km = 0.0;
        assert!(feeder_density(&s, true).is_err());
    }

    #[test]
    fn completion_rate_cases() {
        assert_eq!(completion_rate(96, 96.0), 1.0);
        assert_eq!(completion_rate(0, 96.0), 0.0);
    }

    fn rec(id: usize, gen: f64, exit: Option<f64>) -> TripRecord {
        TripRecord {
            trip_id: id,
            generation_time: gen,
            exit_time: exit,
            inside_s: exit.map_or(0.0, |e| e - gen),
            outside_s: 0.0,
            open_since: gen,
            open_inside: true,
        }
    }

    #[test]
    fn tts_cases() {
        assert_eq!(tts(&[], 100.0).unwrap().total_h, 0.0);
        let t = tts(&[rec(0, 0.0, Some(3600.0))], 7200.0).unwrap();
        assert_eq!(t.total_h, 1.0);
        let mut bad = rec(1, 10.0, Some(5.0));
        bad.inside_s = 0.0;
        assert_eq!(tts(&[bad], 100.0), Err(MetricsError::ExitBeforeGeneration(1)));
    }

    #[test]
    fn unfinished_trips_accrue_to_horizon() {
        let recs = [rec(0, 0.0, None), rec(1, 1800.0, None), rec(2, 9000.0, None)];
        let a = tts(&recs, 3600.0).unwrap();
        assert!((a.total_h - 1.5).abs() < 1e-12);
        assert_eq!(a.unfinished, 2);
        let b = tts(&recs, 7200.0).unwrap();
        assert!(b.total_h > a.total_h);
        assert!((b.inside_h + b.outside_h - b.total_h).abs() < 1e-12);
    }

    #[test]
    fn empty_run_mfd() {
        assert!(mfd_series(&[], 300.0).is_empty());
        let trace: Vec<Snapshot> = (0..10)
            .map(|k| Snapshot {
                clock: 96.0 * k as f64,
                protected_lane_km: 5.0,
                ..Default::default()
            })
            .collect();
        let pts = mfd_series(&trace, 192.0);
        assert_eq!(pts.len(), 5);
        assert!(pts.iter().all(|p| p.density == 0.0 && p.production == 0.0));
    }

    #[test]
    fn mfd_window_arithmetic() {
        // 2 lane-km, 10 vehicles, 3 veh-km per 96 s
        let trace: Vec<Snapshot> = (0..5)
            .map(|k| Snapshot {
                clock: 96.0 * k as f64,
                protected_count: 10,
                protected_lane_km: 2.0,
                protected_vkt: 3.0 * k as f64,
                ..Default::default()
            })
            .collect();
        let pts = mfd_series(&trace, 192.0);
        assert_eq!(pts.len(), 2);
        assert!((pts[0].density - 5.0).abs() < 1e-12);
        let expected = 6.0 / 2.0 / (192.0 / 3600.0);
        assert!((pts[0].production - expected).abs() < 1e-9);
    }

    #[test]
    fn phases_split_at_density_peak() {
        let mk = |d: f64, p: f64| MfdPoint {
            window_start: 0.0,
            density: d,
            production: p,
            phase: MfdPhase::Loading,
        };
        let mut pts = vec![mk(10.0, 100.0), mk(30.0, 150.0), mk(50.0, 40.0), mk(30.0, 90.0), mk(10.0, 70.0)];
        let peak = 2;
        for p in &mut pts[peak + 1..] {
            p.phase = MfdPhase::Unloading;
        }
        let (load, unload) = hysteresis(&pts, 5.0).unwrap();
        assert!((load - 125.0).abs() < 1e-12);
        assert!((unload - 80.0).abs() < 1e-12);
        assert!((production_ratio_at_max_density(&pts).unwrap() - 40.0 / 150.0).abs() < 1e-12);
    }
}
