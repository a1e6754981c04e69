//! Small deterministic continuous-control tasks.
//!
//! Dynamics are pure functions of `(state, action)`; the only randomness is
//! the initial state drawn by [`Environment::reset`] from a seed. Episodes
//! end at a fixed horizon.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BracError, Result};
use crate::rng::{seeded, BracRng};
use crate::tensor::Tensor;

pub trait Environment: Send + Sync {
    fn name(&self) -> EnvName;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_low(&self) -> Vec<f64>;
    fn action_high(&self) -> Vec<f64>;
    fn horizon(&self) -> usize;

    /// Reproducible initial state.
    fn reset(&self, seed: u64) -> Vec<f64>;

    /// Next state and reward; out-of-range actions are clipped first.
    fn dynamics(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64);

    fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        let (lo, hi) = (self.action_low(), self.action_high());
        action
            .iter()
            .zip(lo.iter().zip(&hi))
            .map(|(&a, (&l, &h))| a.clamp(l, h))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvName {
    #[serde(rename = "pointmass2d")]
    PointMass2D,
    Pendulum,
}

impl EnvName {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::PointMass2D => "pointmass2d",
            EnvName::Pendulum => "pendulum",
        }
    }

    pub fn build(self) -> Box<dyn Environment> {
        match self {
            EnvName::PointMass2D => Box::new(PointMass2D::default()),
            EnvName::Pendulum => Box::new(PendulumSwingup::default()),
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvName {
    type Err = BracError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointmass2d" => Ok(EnvName::PointMass2D),
            "pendulum" => Ok(EnvName::Pendulum),
            other => Err(BracError::Config(format!(
                "unknown environment {other:?} (expected pointmass2d or pendulum)"
            ))),
        }
    }
}

/// Planar point mass pushed towards the origin.
///
/// State `(px, py, vx, vy)`, action a force in `[-1, 1]²`. Velocity is
/// updated first and clipped to `±1` per axis, then position moves with the
/// new velocity.
#[derive(Clone, Debug)]
pub struct PointMass2D {
    pub goal: [f64; 2],
    /// Reset positions are uniform in `[lo, hi]²`.
    pub start_box: (f64, f64),
    pub horizon: usize,
}

impl Default for PointMass2D {
    fn default() -> Self {
        Self {
            goal: [0.0, 0.0],
            start_box: (-1.0, 1.0),
            horizon: 100,
        }
    }
}

const PM_DT: f64 = 0.1;

impl Environment for PointMass2D {
    fn name(&self) -> EnvName {
        EnvName::PointMass2D
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn action_low(&self) -> Vec<f64> {
        vec![-1.0; 2]
    }

    fn action_high(&self) -> Vec<f64> {
        vec![1.0; 2]
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&self, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        let (lo, hi) = self.start_box;
        vec![rng.gen_range(lo..hi), rng.gen_range(lo..hi), 0.0, 0.0]
    }

    fn dynamics(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64) {
        let a = self.clip_action(action);
        let mut next = state.to_vec();
        for i in 0..2 {
            next[2 + i] = (state[2 + i] + PM_DT * a[i]).clamp(-1.0, 1.0);
            next[i] = state[i] + PM_DT * next[2 + i];
        }
        let dist = ((next[0] - self.goal[0]).powi(2) + (next[1] - self.goal[1]).powi(2)).sqrt();
        let effort = a[0] * a[0] + a[1] * a[1];
        (next, -dist - 0.01 * effort)
    }
}

/// Torque-limited rigid pendulum; angle 0 is upright.
///
/// State `(cos θ, sin θ, θ̇)`. Angular velocity is updated first with
/// `θ̈ = 3g/(2l)·sin θ + 3/(ml²)·u` and clipped to `±8`, then `θ` advances
/// with the new velocity (semi-implicit Euler).
#[derive(Clone, Debug)]
pub struct PendulumSwingup {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub dt: f64,
    pub max_torque: f64,
    pub max_speed: f64,
    pub horizon: usize,
}

impl Default for PendulumSwingup {
    fn default() -> Self {
        Self {
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            dt: 0.05,
            max_torque: 2.0,
            max_speed: 8.0,
            horizon: 200,
        }
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn normalize_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

impl PendulumSwingup {
    pub fn angle(state: &[f64]) -> f64 {
        state[1].atan2(state[0])
    }

    /// Mechanical energy per unit `ml²/3`: `θ̇²/2 + (3g/2l)·cos θ`.
    pub fn energy(&self, state: &[f64]) -> f64 {
        0.5 * state[2] * state[2] + 1.5 * self.gravity / self.length * Self::angle(state).cos()
    }
}

impl Environment for PendulumSwingup {
    fn name(&self) -> EnvName {
        EnvName::Pendulum
    }

    fn state_dim(&self) -> usize {
        3
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_low(&self) -> Vec<f64> {
        vec![-self.max_torque]
    }

    fn action_high(&self) -> Vec<f64> {
        vec![self.max_torque]
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&self, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        let theta: f64 = rng.gen_range(-PI..PI);
        let speed: f64 = rng.gen_range(-1.0..1.0);
        vec![theta.cos(), theta.sin(), speed]
    }

    fn dynamics(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64) {
        let u = self.clip_action(action)[0];
        let theta = Self::angle(state);
        let speed = state[2];
        let cost = normalize_angle(theta).powi(2) + 0.1 * speed * speed + 0.001 * u * u;
        let accel = 1.5 * self.gravity / self.length * theta.sin()
            + 3.0 / (self.mass * self.length * self.length) * u;
        let new_speed = (speed + accel * self.dt).clamp(-self.max_speed, self.max_speed);
        let new_theta = theta + new_speed * self.dt;
        (vec![new_theta.cos(), new_theta.sin(), new_speed], -cost)
    }
}

/// One transition of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Tracks the time index so `done` can be raised at the horizon.
pub struct Episode<'a> {
    env: &'a dyn Environment,
    state: Vec<f64>,
    t: usize,
}

impl<'a> Episode<'a> {
    pub fn new(env: &'a dyn Environment, seed: u64) -> Self {
        Self {
            state: env.reset(seed),
            env,
            t: 0,
        }
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn is_over(&self) -> bool {
        self.t >= self.env.horizon()
    }

    pub fn step(&mut self, action: &[f64]) -> StepOutcome {
        let (next, reward) = self.env.dynamics(&self.state, action);
        self.t += 1;
        self.state = next.clone();
        StepOutcome {
            next_state: next,
            reward,
            done: self.is_over(),
        }
    }
}

/// Anything that maps a batch of states to a batch of actions.
pub trait ActionSelector {
    fn select(&self, states: &Tensor, rng: &mut BracRng) -> Tensor;
}

impl<F> ActionSelector for F
where
    F: Fn(&Tensor, &mut BracRng) -> Tensor,
{
    fn select(&self, states: &Tensor, rng: &mut BracRng) -> Tensor {
        self(states, rng)
    }
}

/// Uniform actions over the environment bounds.
pub struct UniformRandom {
    low: Vec<f64>,
    high: Vec<f64>,
}

impl UniformRandom {
    pub fn for_env(env: &dyn Environment) -> Self {
        Self {
            low: env.action_low(),
            high: env.action_high(),
        }
    }

    pub fn draw(&self, rng: &mut BracRng) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(&l, &h)| rng.gen_range(l..h))
            .collect()
    }
}

impl ActionSelector for UniformRandom {
    fn select(&self, states: &Tensor, rng: &mut BracRng) -> Tensor {
        let data = (0..states.rows()).flat_map(|_| self.draw(rng)).collect();
        Tensor::from_vec(states.rows(), self.low.len(), data)
    }
}

/// Hand-written controllers that solve each task reasonably well; they
/// anchor the "partially trained" threshold.
pub struct ReferenceController {
    env: EnvName,
}

impl ReferenceController {
    pub fn new(env: EnvName) -> Self {
        Self { env }
    }

    pub fn act(&self, state: &[f64]) -> Vec<f64> {
        match self.env {
            EnvName::PointMass2D => (0..2)
                .map(|i| (-2.0 * state[i] - 2.5 * state[2 + i]).clamp(-1.0, 1.0))
                .collect(),
            EnvName::Pendulum => {
                let pend = PendulumSwingup::default();
                let theta = normalize_angle(PendulumSwingup::angle(state));
                let speed = state[2];
                let u = if theta.cos() > 0.85 {
                    -(10.0 * theta + 2.0 * speed)
                } else {
                    let top = 1.5 * pend.gravity / pend.length;
                    let e = pend.energy(state);
                    // Pump energy towards the upright level.
                    let dir = if speed.abs() < 1e-3 { 1.0 } else { speed.signum() };
                    2.0 * (top - e).signum() * dir
                };
                vec![u.clamp(-pend.max_torque, pend.max_torque)]
            }
        }
    }
}

impl ActionSelector for ReferenceController {
    fn select(&self, states: &Tensor, _rng: &mut BracRng) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..states.rows()).map(|r| self.act(states.row(r))).collect();
        Tensor::from_rows(&rows).expect("uniform action width")
    }
}

/// Returns of whole episodes started from `seeds`, run in lockstep so the
/// selector sees one batch per time step.
pub fn batched_returns(
    env: &dyn Environment,
    selector: &dyn ActionSelector,
    seeds: &[u64],
    rng: &mut BracRng,
) -> Vec<f64> {
    let sd = env.state_dim();
    let mut states: Vec<Vec<f64>> = seeds.iter().map(|&s| env.reset(s)).collect();
    let mut returns = vec![0.0; seeds.len()];
    if seeds.is_empty() {
        return returns;
    }
    for _ in 0..env.horizon() {
        let batch = Tensor::from_vec(
            states.len(),
            sd,
            states.iter().flatten().copied().collect(),
        );
        let actions = selector.select(&batch, rng);
        for (i, s) in states.iter_mut().enumerate() {
            let (next, r) = env.dynamics(s, actions.row(i));
            returns[i] += r;
            *s = next;
        }
    }
    returns
}

/// Sum of rewards over one episode.
pub fn episode_return(
    env: &dyn Environment,
    selector: &dyn ActionSelector,
    seed: u64,
    rng: &mut BracRng,
) -> f64 {
    batched_returns(env, selector, &[seed], rng)[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_reproducible_and_seed_sensitive() {
        for name in [EnvName::PointMass2D, EnvName::Pendulum] {
            let env = name.build();
            assert_eq!(env.reset(11), env.reset(11));
            assert_ne!(env.reset(11), env.reset(12));
        }
    }

    #[test]
    fn pointmass_start_stays_in_box() {
        let env = PointMass2D::default();
        let (lo, hi) = env.start_box;
        for seed in 0..10_000 {
            let s = env.reset(seed);
            assert!(s[0] >= lo && s[0] < hi && s[1] >= lo && s[1] < hi);
            assert_eq!(&s[2..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn pointmass_goal_is_a_fixed_point() {
        let env = PointMass2D::default();
        let (next, r) = env.dynamics(&[0.0, 0.0, 0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(next, vec![0.0; 4]);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn pointmass_one_push_from_rest() {
        let env = PointMass2D::default();
        let (next, _) = env.dynamics(&[0.5, -0.2, 0.0, 0.0], &[1.0, 0.0]);
        assert!((next[2] - 0.1).abs() < 1e-15 && next[3] == 0.0);
        assert!((next[0] - 0.51).abs() < 1e-15 && next[1] == -0.2);
    }

    #[test]
    fn out_of_range_actions_are_clipped() {
        for name in [EnvName::PointMass2D, EnvName::Pendulum] {
            let env = name.build();
            let s = env.reset(5);
            let big: Vec<f64> = (0..env.action_dim()).map(|i| 7.0 - 20.0 * i as f64).collect();
            assert_eq!(env.dynamics(&s, &big), env.dynamics(&s, &env.clip_action(&big)));
        }
    }

    #[test]
    fn pendulum_state_stays_on_unit_circle() {
        let env = PendulumSwingup::default();
        let mut s = env.reset(3);
        for t in 0..5_000 {
            let u = [((t as f64) * 0.37).sin() * 3.0];
            s = env.dynamics(&s, &u).0;
            assert!((s[0] * s[0] + s[1] * s[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pendulum_energy_is_bounded_without_torque() {
        let env = PendulumSwingup::default();
        for seed in 0..5 {
            let mut s = env.reset(seed);
            let e0 = env.energy(&s);
            let mut worst: f64 = 0.0;
            for _ in 0..10_000 {
                s = env.dynamics(&s, &[0.0]).0;
                worst = worst.max((env.energy(&s) - e0).abs());
            }
            // Semi-implicit Euler keeps a shadow energy; the drift stays a
            // small fraction of the potential range (2 * 15).
            assert!(worst < 0.1 * 30.0, "seed {seed}: energy drift {worst}");
        }
    }

    #[test]
    fn zero_horizon_episode_returns_zero() {
        let env = PointMass2D {
            horizon: 0,
            ..Default::default()
        };
        let mut rng = seeded(0);
        let r = episode_return(&env, &UniformRandom::for_env(&env), 1, &mut rng);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn random_policy_return_is_negative() {
        let env = PointMass2D::default();
        let mut rng = seeded(0);
        for seed in 0..20 {
            assert!(episode_return(&env, &UniformRandom::for_env(&env), seed, &mut rng) < 0.0);
        }
    }

    #[test]
    fn controller_beats_random_on_pointmass() {
        let env = PointMass2D::default();
        let mut rng = seeded(0);
        let seeds: Vec<u64> = (0..20).collect();
        let ctrl = batched_returns(&env, &ReferenceController::new(EnvName::PointMass2D), &seeds, &mut rng);
        let rand = batched_returns(&env, &UniformRandom::for_env(&env), &seeds, &mut rng);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&ctrl) - mean(&rand) >= 20.0, "{} vs {}", mean(&ctrl), mean(&rand));
    }

    #[test]
    fn controller_swings_pendulum_up() {
        let env = PendulumSwingup::default();
        let mut rng = seeded(0);
        let seeds: Vec<u64> = (0..20).collect();
        let ctrl = batched_returns(&env, &ReferenceController::new(EnvName::Pendulum), &seeds, &mut rng);
        let rand = batched_returns(&env, &UniformRandom::for_env(&env), &seeds, &mut rng);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&ctrl) > mean(&rand) + 300.0, "{} vs {}", mean(&ctrl), mean(&rand));
    }
}
