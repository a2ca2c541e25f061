//! Library computations against brute-force reimplementations.

use perimeter_core::demand::{generate_trips, interval_weights, largest_remainder, DemandProfile, TripClass};
use perimeter_core::metrics::{feeder_density, inner_density};
use perimeter_core::net::Region;
use perimeter_core::ppo::{gae, normalize};
use perimeter_core::scenario::Scenario;
use perimeter_core::sim::VehiclePhase;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL: f64 = 1e-9;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REL * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn densities_match_a_recount_over_vehicles() {
    let scenario = Scenario::desk();
    let net = scenario.network().unwrap();
    let protected_km: f64 = net.links().iter().filter(|l| l.region == Region::Protected).map(|l| l.length * l.lanes as f64 / 1000.0).sum();
    let feeder_km: f64 = net.links().iter().filter(|l| l.region == Region::Feeder).map(|l| l.length * l.lanes as f64 / 1000.0).sum();

    for (seed, rate) in [(1u64, None), (2, Some(120.0))] {
        let mut state = scenario.sim_state(&net, seed).unwrap();
        let mut checked = 0;
        while state.clock < 4000.0 {
            for _ in 0..37 {
                state.step().unwrap();
            }
            if let Some(r) = rate {
                state.set_meter_rate(r);
            }
            let (mut inside, mut feeder, mut held) = (0usize, 0usize, 0usize);
            for v in state.vehicles() {
                match v.phase {
                    VehiclePhase::Traversing | VehiclePhase::Queued => match net.link(v.current_link()).region {
                        Region::Protected => inside += 1,
                        Region::Feeder => feeder += 1,
                    },
                    VehiclePhase::Waiting => held += 1,
                    VehiclePhase::Done => {}
                }
            }
            let snap = state.snapshot();
            assert_eq!(held, snap.internal_waiting + snap.meter_waiting);
            assert!(close(inner_density(&snap).unwrap(), inside as f64 / protected_km));
            assert!(close(feeder_density(&snap, false).unwrap(), feeder as f64 / feeder_km));
            assert!(close(
                feeder_density(&snap, true).unwrap(),
                (feeder + snap.meter_waiting) as f64 / feeder_km
            ));
            checked += 1;
        }
        assert!(checked > 100);
    }
}

/// Per-second Riemann sum of the rates, looked up by which interval each
/// second falls in.
fn riemann(profile: &DemandProfile, t: f64, window: f64) -> (f64, f64) {
    let w = interval_weights(profile.peakedness).unwrap();
    let sum: f64 = w.iter().sum();
    let (mut n12, mut n22) = (0.0, 0.0);
    let mut s = t;
    while s < t + window - 1e-12 {
        let idx = (s / 900.0).floor() as usize;
        if idx < 9 {
            let share = w[idx] / sum / 900.0;
            n12 += profile.total_exogenous as f64 * share;
            n22 += profile.total_endogenous as f64 * share;
        }
        s += 1.0;
    }
    (n12, n22)
}

#[test]
fn future_demand_matches_riemann_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..300 {
        let r = rng.gen_range(1.0..3.0);
        let profile = DemandProfile::new(r, rng.gen_range(0..20_000), rng.gen_range(0..10_000)).unwrap();
        // Integer start and window keep every second inside one interval.
        let t = rng.gen_range(0..9000) as f64;
        let window = rng.gen_range(1..2000) as f64;
        let f = profile.future_demand(t, window).unwrap();
        let (n12, n22) = riemann(&profile, t, window);
        assert!(close(f.n12, n12), "n12 {} vs {}", f.n12, n12);
        assert!(close(f.n22, n22), "n22 {} vs {}", f.n22, n22);
        assert_eq!((f.n21, f.n11), (0.0, 0.0));
    }
}

#[test]
fn future_demand_straddling_an_interval_boundary() {
    let profile = DemandProfile::default();
    let f = profile.future_demand(900.0 - 40.0, 96.0).unwrap();
    let (q12a, q22a) = profile.rates(0);
    let (q12b, q22b) = profile.rates(1);
    assert!(close(f.n12, 40.0 * q12a + 56.0 * q12b));
    assert!(close(f.n22, 40.0 * q22a + 56.0 * q22b));
}

/// Hands out leftover units one at a time, each to the unused entry with
/// the largest fraction, scanning from index 0 so ties go low.
fn brute_remainder(total: u64, shares: &[f64]) -> Vec<u64> {
    let sum: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|s| total as f64 * s / sum).collect();
    let mut counts: Vec<u64> = exact.iter().map(|e| e.floor() as u64).collect();
    let left = total - counts.iter().sum::<u64>();
    let mut used = vec![false; shares.len()];
    for _ in 0..left {
        let mut pick = None;
        for i in 0..shares.len() {
            if used[i] {
                continue;
            }
            let fi = exact[i] - exact[i].floor();
            match pick {
                None => pick = Some(i),
                Some(j) => {
                    let fj = exact[j] - exact[j].floor();
                    if fi > fj {
                        pick = Some(i);
                    }
                }
            }
        }
        let i = pick.unwrap();
        used[i] = true;
        counts[i] += 1;
    }
    counts
}

#[test]
fn largest_remainder_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..2000 {
        let n = rng.gen_range(1..12);
        let shares: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0_f64).round().max(0.5)).collect();
        let total = rng.gen_range(0..50_000);
        let got = largest_remainder(total, &shares);
        assert_eq!(got, brute_remainder(total, &shares), "shares {shares:?} total {total}");
        assert_eq!(got.iter().sum::<u64>(), total);
    }
}

#[test]
fn peak_interval_count_for_default_profile() {
    let w = interval_weights(2.0).unwrap();
    let counts = largest_remainder(11_000, &w);
    assert_eq!(counts.iter().sum::<u64>(), 11_000);
    let exact = 11_000.0 * 16.0 / 46.0;
    assert!((counts[4] as f64 - exact).abs() < 1.0);
    assert_eq!(counts[4], 3826);
}

#[test]
fn generated_trips_follow_interval_counts() {
    let scenario = Scenario::desk();
    let net = scenario.network().unwrap();
    let profile = scenario.demand.with_peakedness(1.5).unwrap();
    let trips = generate_trips(&profile, &net, 9).unwrap();
    let w = interval_weights(1.5).unwrap();
    for (class, total) in [
        (TripClass::Endogenous, profile.total_endogenous),
        (TripClass::Exogenous, profile.total_exogenous),
    ] {
        let expected = largest_remainder(total, &w);
        let mut got = vec![0u64; 9];
        for t in trips.iter().filter(|t| t.class == class) {
            got[(t.generation_time / 900.0).floor() as usize] += 1;
        }
        assert_eq!(got, expected);
    }
}

/// GAE straight from its definition: a double sum of discounted TD errors.
fn brute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let v = |i: usize| if i < n { values[i] } else { 0.0 };
    (0..n)
        .map(|t| {
            (t..n)
                .map(|l| {
                    let delta = rewards[l] + gamma * v(l + 1) - values[l];
                    (gamma * lambda).powi((l - t) as i32) * delta
                })
                .sum()
        })
        .collect()
}

#[test]
fn gae_matches_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.gen_range(1..80);
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let gamma = rng.gen_range(0.5..1.0);
        let lambda = rng.gen_range(0.0..=1.0);
        let (adv, ret) = gae(&rewards, &values, gamma, lambda).unwrap();
        let brute = brute_gae(&rewards, &values, gamma, lambda);
        for t in 0..n {
            assert!(close(adv[t], brute[t]), "{} vs {}", adv[t], brute[t]);
            assert!(close(ret[t], brute[t] + values[t]));
        }
    }
}

#[test]
fn gae_with_unit_lambda_is_discounted_return_minus_value() {
    let rewards = [1.0, 0.5, 2.0, -1.0];
    let values = [0.3, -0.2, 0.7, 0.1];
    let gamma: f64 = 0.9;
    let (adv, _) = gae(&rewards, &values, gamma, 1.0).unwrap();
    for t in 0..4 {
        let g: f64 = (t..4).map(|l| gamma.powi((l - t) as i32) * rewards[l]).sum();
        assert!(close(adv[t], g - values[t]));
    }
}

#[test]
fn normalized_advantages_have_zero_mean_unit_std() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut xs: Vec<f64> = (0..500).map(|_| rng.gen_range(-10.0..30.0)).collect();
    normalize(&mut xs);
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-12);
}
