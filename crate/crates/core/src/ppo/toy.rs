//! A small single-reservoir plant with a known optimal release policy.
//!
//! Vehicles arrive into a waiting queue `w` and are released into a
//! reservoir of accumulation `n` at `u = min(w, a·u_max)`. The reservoir
//! discharges at `g(n) = n(n_jam - n)/k`, peaking at half the jam
//! accumulation. Reward per step is the normalized discharge.

use super::{Env, EnvStep};
use crate::error::PpoError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyPlant {
    pub n_jam: f64,
    pub k: f64,
    pub u_max: f64,
    pub arrival: f64,
    pub arrival_steps: usize,
    pub horizon: usize,
}

impl Default for ToyPlant {
    fn default() -> Self {
        ToyPlant {
            n_jam: 40.0,
            k: 50.0,
            u_max: 20.0,
            arrival: 12.0,
            arrival_steps: 20,
            horizon: 50,
        }
    }
}

impl ToyPlant {
    pub fn outflow(&self, n: f64) -> f64 {
        (n * (self.n_jam - n) / self.k).max(0.0)
    }

    pub fn peak_outflow(&self) -> f64 {
        self.outflow(self.n_jam / 2.0)
    }

    /// One transition from `(n, w)` with release `u`, already feasible.
    /// Returns the new state and the discharge.
    pub fn transition(&self, n: f64, w: f64, u: f64, t: usize) -> (f64, f64, f64) {
        let g = self.outflow(n).min(n);
        let arrivals = if t < self.arrival_steps { self.arrival } else { 0.0 };
        ((n + u - g).clamp(0.0, self.n_jam), w - u + arrivals, g)
    }

    /// Discounted return of a release rule `u = f(n, w)`; the rule's output
    /// is clipped to what is feasible.
    pub fn discounted_return(&self, gamma: f64, mut rule: impl FnMut(f64, f64) -> f64) -> f64 {
        let (mut n, mut w, mut ret, mut disc) = (0.0, self.arrival, 0.0, 1.0);
        for t in 0..self.horizon {
            let u = rule(n, w).clamp(0.0, w.min(self.u_max));
            let (n2, w2, g) = self.transition(n, w, u, t + 1);
            ret += disc * g / self.peak_outflow();
            disc *= gamma;
            n = n2;
            w = w2;
        }
        ret
    }

    /// Best return over fill-to-target rules: release just enough to bring
    /// the accumulation back to `theta`, for `theta` on a 0.1 grid.
    pub fn best_threshold_return(&self, gamma: f64) -> (f64, f64) {
        let mut best = (f64::NEG_INFINITY, 0.0);
        let steps = (self.n_jam * 10.0).round() as usize;
        for i in 0..=steps {
            let theta = i as f64 / 10.0;
            let r = self.discounted_return(gamma, |n, _| theta - n + self.outflow(n));
            if r > best.0 {
                best = (r, theta);
            }
        }
        best
    }
}

/// [`ToyPlant`] as an episodic environment. State is `[n/n_jam, w/250]`.
#[derive(Debug, Clone)]
pub struct ToyEnv {
    pub plant: ToyPlant,
    n: f64,
    w: f64,
    t: usize,
}

impl ToyEnv {
    pub fn new(plant: ToyPlant) -> Self {
        ToyEnv {
            plant,
            n: 0.0,
            w: 0.0,
            t: 0,
        }
    }

    fn state(&self) -> Vec<f64> {
        vec![self.n / self.plant.n_jam, self.w / 250.0]
    }
}

impl Env for ToyEnv {
    fn state_dim(&self) -> usize {
        2
    }

    fn reset(&mut self, _episode: u64) -> Result<Vec<f64>, PpoError> {
        self.n = 0.0;
        self.w = self.plant.arrival;
        self.t = 0;
        Ok(self.state())
    }

    fn step(&mut self, action: f64) -> Result<EnvStep, PpoError> {
        let u = (action.clamp(0.0, 1.0) * self.plant.u_max).min(self.w);
        self.t += 1;
        let (n, w, g) = self.plant.transition(self.n, self.w, u, self.t);
        self.n = n;
        self.w = w;
        Ok(EnvStep {
            state: self.state(),
            reward: g / self.plant.peak_outflow(),
            done: self.t >= self.plant.horizon,
            truncated: false,
            applied: u,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outflow_peaks_mid_jam() {
        let p = ToyPlant::default();
        assert_eq!(p.peak_outflow(), 8.0);
        assert_eq!(p.outflow(0.0), 0.0);
        assert_eq!(p.outflow(40.0), 0.0);
    }

    #[test]
    fn env_matches_rule_evaluation() {
        let p = ToyPlant::default();
        let mut env = ToyEnv::new(p);
        env.reset(0).unwrap();
        let mut ret = 0.0;
        let mut disc = 1.0;
        loop {
            let s = env.step(0.5).unwrap();
            ret += disc * s.reward;
            disc *= 0.95;
            if s.done {
                break;
            }
        }
        let rule = p.discounted_return(0.95, |_, _| 10.0);
        assert!((ret - rule).abs() < 1e-12);
    }

    #[test]
    fn threshold_beats_naive_rules() {
        let p = ToyPlant::default();
        let (best, theta) = p.best_threshold_return(0.95);
        let full = p.discounted_return(0.95, |_, _| f64::INFINITY);
        let half = p.discounted_return(0.95, |_, _| 10.0);
        assert!(full < 0.9 * best && half < 0.9 * best);
        assert!((theta - 20.0).abs() < 1e-9);
    }
}
