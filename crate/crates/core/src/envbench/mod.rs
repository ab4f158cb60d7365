//! A point-mass reaching task, its expert, datasets, closed-loop evaluation,
//! and the decoder throughput benchmark.
//!
//! The agent moves a point in 3-D toward one of eight goals and must close
//! its gripper on arrival. Observations become synthetic prefix tokens: a
//! quantized goal displacement and distance bucket stand in for vision, the
//! quantized position for proprioception, and the goal id for language.

mod bench;
mod dataset;
mod eval;

pub use bench::{bench_throughput, BenchReport, BenchRow};
pub use dataset::{gen_dataset, tokenize_dataset, Dataset, Sample};
pub use eval::{evaluate, evaluate_policy, EvalReport};

use rand::Rng;

use crate::codec::{ActionChunk, ActionSpec, DimKind, Prefix, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::kv::KeyValues;

/// Number of reserved prefix ids the observation encoder uses.
pub const PREFIX_IDS: u32 = 254;
/// Translation, rotation, gripper.
pub const ACTION_DIM: usize = 7;
/// `BOS` + 9 visual + 3 proprio + 3 language tokens.
pub const PREFIX_LEN: usize = 16;

const DISP_LEVELS: usize = 64;
// The expert's action saturates beyond this displacement, so resolution is
// spent where it changes the action; each axis has its own ids.
const DISP_RANGE: f64 = 0.4;
const DIST_LEVELS: usize = 16;
const DIST_STEP: f64 = 0.025;
const POS_LEVELS: usize = 32;
const POS_RANGE: f64 = 1.2;

// Offsets into the reserved prefix range.
const OFF_DISP: u32 = 0;
const OFF_DIST: u32 = OFF_DISP + 3 * DISP_LEVELS as u32;
const OFF_SIGN: u32 = OFF_DIST + DIST_LEVELS as u32;
const OFF_SCENE: u32 = OFF_SIGN + 2;
const OFF_POS: u32 = OFF_SCENE + 2;
const OFF_GOAL: u32 = OFF_POS + POS_LEVELS as u32;
const OFF_WORD: u32 = OFF_GOAL + 8;
const _: () = assert!(OFF_WORD + 2 == PREFIX_IDS);

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    /// Per-axis translation limit per step, meters.
    pub step_cap: f64,
    /// Proportional gain of the expert.
    pub gain: f64,
    pub goal_tolerance: f64,
    /// The expert closes the gripper inside this distance.
    pub grip_threshold: f64,
    /// Episode length in environment steps.
    pub horizon: usize,
    /// Timesteps per action chunk.
    pub chunk: usize,
    /// Start positions are uniform in `[-start_range, start_range]^3`.
    pub start_range: f64,
    /// Goals sit at the corners `(±goal_offset)^3`.
    pub goal_offset: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            step_cap: 0.12,
            gain: 0.6,
            goal_tolerance: 0.08,
            grip_threshold: 0.2,
            horizon: 40,
            chunk: 2,
            start_range: 1.0,
            goal_offset: 0.5,
        }
    }
}

impl EnvConfig {
    pub fn goal(&self, id: usize) -> [f64; 3] {
        let g = self.goal_offset;
        [0, 1, 2].map(|axis| if id >> axis & 1 == 1 { g } else { -g })
    }

    pub fn action_len(&self) -> usize {
        self.chunk * ACTION_DIM
    }

    pub fn to_text(&self) -> String {
        format!(
            "step_cap={:?}\ngain={:?}\ngoal_tolerance={:?}\ngrip_threshold={:?}\nhorizon={}\nchunk={}\nstart_range={:?}\ngoal_offset={:?}\n",
            self.step_cap,
            self.gain,
            self.goal_tolerance,
            self.grip_threshold,
            self.horizon,
            self.chunk,
            self.start_range,
            self.goal_offset
        )
    }

    pub(crate) fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        Ok(Self {
            step_cap: kv.take("step_cap")?,
            gain: kv.take("gain")?,
            goal_tolerance: kv.take("goal_tolerance")?,
            grip_threshold: kv.take("grip_threshold")?,
            horizon: kv.take("horizon")?,
            chunk: kv.take("chunk")?,
            start_range: kv.take("start_range")?,
            goal_offset: kv.take("goal_offset")?,
        })
    }
}

/// Translation dims fitted from data, rotation dims on fixed uniform bins
/// (the expert never rotates), and the binary gripper.
pub fn action_spec() -> ActionSpec {
    let mut dims = vec![DimKind::Continuous; 3];
    dims.extend([DimKind::Fixed { lo: -1.0, hi: 1.0 }; 3]);
    dims.push(DimKind::Categorical);
    ActionSpec { dims }
}

pub fn vocab() -> Vocab {
    Vocab::new(PREFIX_IDS)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointMassEnv {
    pub config: EnvConfig,
    pub pos: [f64; 3],
    pub goal_id: usize,
    pub gripper_closed: bool,
    pub t: usize,
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn quantize(v: f64, range: f64, levels: usize) -> u32 {
    let k = ((v + range) / (2.0 * range) * levels as f64).floor();
    k.clamp(0.0, (levels - 1) as f64) as u32
}

impl PointMassEnv {
    pub fn new(config: EnvConfig, start: [f64; 3], goal_id: usize) -> Self {
        Self {
            config,
            pos: start,
            goal_id,
            gripper_closed: false,
            t: 0,
        }
    }

    /// Uniform start and goal.
    pub fn sample<R: Rng + ?Sized>(config: EnvConfig, rng: &mut R) -> Self {
        let r = config.start_range;
        let start = [0; 3].map(|_| rng.random_range(-r..=r));
        let goal = rng.random_range(0..8);
        Self::new(config, start, goal)
    }

    pub fn goal(&self) -> [f64; 3] {
        self.config.goal(self.goal_id)
    }

    pub fn distance(&self) -> f64 {
        dist(&self.pos, &self.goal())
    }

    pub fn success(&self) -> bool {
        self.gripper_closed && self.distance() < self.config.goal_tolerance
    }

    pub fn done(&self) -> bool {
        self.success() || self.t >= self.config.horizon
    }

    /// Applies one `D`-dimensional action. Translation is clipped to the
    /// step cap; rotation is ignored by the point mass.
    pub fn step(&mut self, action: &[f64]) -> Result<()> {
        if action.len() != ACTION_DIM {
            return Err(Error::DimensionMismatch {
                expected: ACTION_DIM,
                got: action.len(),
            });
        }
        let cap = self.config.step_cap;
        for (p, a) in self.pos.iter_mut().zip(&action[..3]) {
            *p += a.clamp(-cap, cap);
        }
        self.gripper_closed = action[6] > 0.5;
        self.t += 1;
        Ok(())
    }

    /// The expert's next action from the current state.
    pub fn expert_action(&self) -> [f64; ACTION_DIM] {
        let (cap, gain) = (self.config.step_cap, self.config.gain);
        let goal = self.goal();
        let mut a = [0.0; ACTION_DIM];
        for i in 0..3 {
            a[i] = cap * (gain * (goal[i] - self.pos[i]) / cap).tanh();
        }
        a[6] = if self.distance() < self.config.grip_threshold { 1.0 } else { 0.0 };
        a
    }

    /// The expert's next `chunk` actions, rolled forward on a copy.
    pub fn expert_chunk(&self) -> ActionChunk {
        let mut sim = self.clone();
        let mut values = Vec::with_capacity(self.config.action_len());
        for _ in 0..self.config.chunk {
            let a = sim.expert_action();
            values.extend_from_slice(&a);
            sim.step(&a).expect("expert action has D entries");
        }
        ActionChunk::new(self.config.chunk, ACTION_DIM, values).expect("chunk shape")
    }

    /// Observation tokens for the current state.
    pub fn observe(&self) -> Prefix {
        let v = |off: u32| Vocab::PREFIX_BASE + off;
        let goal = self.goal();
        let mut t: Vec<TokenId> = vec![Vocab::BOS];
        for i in 0..3 {
            let level = quantize(goal[i] - self.pos[i], DISP_RANGE, DISP_LEVELS);
            t.push(v(OFF_DISP + (i * DISP_LEVELS) as u32 + level));
        }
        let bucket = ((self.distance() / DIST_STEP).floor() as usize).min(DIST_LEVELS - 1);
        t.push(v(OFF_DIST + bucket as u32));
        for g in goal {
            t.push(v(OFF_SIGN + u32::from(g > 0.0)));
        }
        t.push(v(OFF_SCENE));
        t.push(v(OFF_SCENE + 1));
        for p in self.pos {
            t.push(v(OFF_POS + quantize(p, POS_RANGE, POS_LEVELS)));
        }
        t.push(v(OFF_WORD));
        t.push(v(OFF_GOAL + self.goal_id as u32));
        t.push(v(OFF_WORD + 1));
        debug_assert_eq!(t.len(), PREFIX_LEN);
        Prefix::new(t, 9, 3).expect("prefix starts with BOS")
    }
}
