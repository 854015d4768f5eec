//! Analytic continuous-control task families.
//!
//! Tasks within a family share dynamics and differ only in the reward:
//! a goal on the unit circle, a target speed, or a heading direction.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("unknown task family `{0}` (valid: PointRobotGoal, LineVel, DirWorld)")]
    UnknownFamily(String),
    #[error("action has {got} dimensions, family expects {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error("action contains a non-finite value")]
    NonFiniteAction,
    #[error("episode already reached its horizon of {0} steps")]
    PastHorizon(usize),
    #[error("task counts must be at least 1 (got train={train}, test={test})")]
    InvalidCount { train: usize, test: usize },
    #[error("task {task_id} does not belong to family {family}")]
    FamilyMismatch { task_id: usize, family: Family },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    /// 2-D point mass steered toward a goal on the unit circle.
    PointRobotGoal,
    /// 1-D velocity tracking of a target speed.
    LineVel,
    /// 2-D mass rewarded for velocity along a heading.
    DirWorld,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::PointRobotGoal, Family::LineVel, Family::DirWorld];

    pub fn obs_dim(self) -> usize {
        match self {
            Family::PointRobotGoal => 2,
            Family::LineVel => 2,
            Family::DirWorld => 4,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            Family::PointRobotGoal => 2,
            Family::LineVel => 1,
            Family::DirWorld => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::PointRobotGoal => "PointRobotGoal",
            Family::LineVel => "LineVel",
            Family::DirWorld => "DirWorld",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match key.as_str() {
            "pointrobotgoal" | "pointrobot" => Ok(Family::PointRobotGoal),
            "linevel" => Ok(Family::LineVel),
            "dirworld" => Ok(Family::DirWorld),
            _ => Err(EnvError::UnknownFamily(s.to_string())),
        }
    }
}

/// One MDP inside a family.
///
/// `params` is the goal `(x, y)`, the target speed `[v]`, or the unit heading `(dx, dy)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: Family,
    pub params: Vec<f64>,
    pub task_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub step_index: usize,
    pub horizon: usize,
}

impl EnvState {
    pub fn done(&self) -> bool {
        self.step_index >= self.horizon
    }
}

/// One step of experience. Serialized as `[[s...], [a...], [s_next...], r]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "TransitionRepr", into = "TransitionRepr")]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
    pub r: f64,
}

type TransitionRepr = (Vec<f64>, Vec<f64>, Vec<f64>, f64);

impl From<TransitionRepr> for Transition {
    fn from((s, a, s_next, r): TransitionRepr) -> Self {
        Self { s, a, s_next, r }
    }
}

impl From<Transition> for TransitionRepr {
    fn from(t: Transition) -> Self {
        (t.s, t.a, t.s_next, t.r)
    }
}

impl Transition {
    /// `s ⊕ a ⊕ s' ⊕ r`, the encoder input row.
    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.s.len() * 2 + self.a.len() + 1);
        f.extend_from_slice(&self.s);
        f.extend_from_slice(&self.a);
        f.extend_from_slice(&self.s_next);
        f.push(self.r);
        f
    }
}

/// Shared dynamics constants for every family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub horizon: usize,
    pub dt: f64,
    pub drag: f64,
    /// LineVel target speeds are drawn uniformly from this range.
    pub speed_range: (f64, f64),
    /// Half-width of the uniform start-position jitter for LineVel and DirWorld.
    pub start_jitter: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: 60,
            dt: 0.1,
            drag: 0.95,
            speed_range: (0.5, 1.5),
            start_jitter: 0.05,
        }
    }
}

impl EnvConfig {
    fn sample_params(&self, family: Family, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match family {
            Family::PointRobotGoal | Family::DirWorld => {
                let theta = rng.gen_range(0.0..TAU);
                vec![theta.cos(), theta.sin()]
            }
            Family::LineVel => vec![rng.gen_range(self.speed_range.0..=self.speed_range.1)],
        }
    }

    /// Draws disjoint train and test task sets from the family's uniform distribution.
    pub fn sample_tasks(
        &self,
        family: Family,
        n_train: usize,
        n_test: usize,
        seed: u64,
    ) -> Result<(Vec<TaskSpec>, Vec<TaskSpec>), EnvError> {
        if n_train == 0 || n_test == 0 {
            return Err(EnvError::InvalidCount {
                train: n_train,
                test: n_test,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen: Vec<Vec<f64>> = Vec::new();
        let mut draw = |rng: &mut ChaCha8Rng, count: usize| {
            let mut out = Vec::with_capacity(count);
            while out.len() < count {
                let params = self.sample_params(family, rng);
                if seen.contains(&params) {
                    continue;
                }
                seen.push(params.clone());
                out.push(TaskSpec {
                    family,
                    params,
                    task_id: out.len(),
                });
            }
            out
        };
        let train = draw(&mut rng, n_train);
        let test = draw(&mut rng, n_test);
        Ok((train, test))
    }

    pub fn reset(&self, task: &TaskSpec, seed: u64) -> EnvState {
        let observation = match task.family {
            Family::PointRobotGoal => vec![0.0, 0.0],
            Family::LineVel => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                vec![rng.gen_range(-self.start_jitter..=self.start_jitter), 0.0]
            }
            Family::DirWorld => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = rng.gen_range(-self.start_jitter..=self.start_jitter);
                let y = rng.gen_range(-self.start_jitter..=self.start_jitter);
                vec![x, y, 0.0, 0.0]
            }
        };
        EnvState {
            observation,
            step_index: 0,
            horizon: self.horizon,
        }
    }

    /// Advances one step; actions are clipped to [-1, 1] per dimension.
    pub fn step(
        &self,
        task: &TaskSpec,
        state: &EnvState,
        action: &[f64],
    ) -> Result<(EnvState, f64), EnvError> {
        if state.done() {
            return Err(EnvError::PastHorizon(state.horizon));
        }
        let expected = task.family.action_dim();
        if action.len() != expected {
            return Err(EnvError::ActionDim {
                expected,
                got: action.len(),
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction);
        }
        let a: Vec<f64> = action.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
        let obs = &state.observation;
        let (next, reward) = match task.family {
            Family::PointRobotGoal => {
                let x = obs[0] + self.dt * a[0];
                let y = obs[1] + self.dt * a[1];
                let r = -((x - task.params[0]).powi(2) + (y - task.params[1]).powi(2)).sqrt();
                (vec![x, y], r)
            }
            Family::LineVel => {
                let v = self.drag * obs[1] + self.dt * a[0];
                let x = obs[0] + self.dt * v;
                (vec![x, v], -(v - task.params[0]).abs())
            }
            Family::DirWorld => {
                let vx = self.drag * obs[2] + self.dt * a[0];
                let vy = self.drag * obs[3] + self.dt * a[1];
                let x = obs[0] + self.dt * vx;
                let y = obs[1] + self.dt * vy;
                let r = vx * task.params[0] + vy * task.params[1];
                (vec![x, y, vx, vy], r)
            }
        };
        Ok((
            EnvState {
                observation: next,
                step_index: state.step_index + 1,
                horizon: state.horizon,
            },
            reward,
        ))
    }

    /// Hand-designed near-optimal controller, before the environment's clipping.
    pub fn optimal_action(&self, task: &TaskSpec, state: &EnvState) -> Vec<f64> {
        let obs = &state.observation;
        match task.family {
            Family::PointRobotGoal => (0..2)
                .map(|i| ((task.params[i] - obs[i]) / self.dt).clamp(-1.0, 1.0))
                .collect(),
            Family::LineVel => vec![((task.params[0] - obs[1]) / self.dt).clamp(-1.0, 1.0)],
            Family::DirWorld => task.params.clone(),
        }
    }

    /// Runs a full episode with `policy`, returning the transitions in order.
    pub fn rollout(
        &self,
        task: &TaskSpec,
        seed: u64,
        mut policy: impl FnMut(&EnvState) -> Vec<f64>,
    ) -> Result<Vec<Transition>, EnvError> {
        let mut state = self.reset(task, seed);
        let mut out = Vec::with_capacity(self.horizon);
        while !state.done() {
            let action = policy(&state);
            let (next, r) = self.step(task, &state, &action)?;
            let a = action.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
            out.push(Transition {
                s: state.observation.clone(),
                a,
                s_next: next.observation.clone(),
                r,
            });
            state = next;
        }
        Ok(out)
    }
}

/// Undiscounted return of a transition sequence.
pub fn episode_return(transitions: &[Transition]) -> f64 {
    transitions.iter().map(|t| t.r).sum()
}
