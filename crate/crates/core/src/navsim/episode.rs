//! Perception adapters, episode rollout and the trial protocol.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::downsample_bicubic;
use crate::error::{Error, Result};
use crate::navsim::fsm::{fsm_step, Mode, NavConfig, NavState};
use crate::navsim::world::{render_image, render_labels, Cell, Grid, Pose, ViewSpec, World};
use crate::segnet::predict_labels;
use crate::trainer::SegPipeline;
use crate::types::LabelMap;

/// Source of segmentation maps for the current view.
pub trait Perception {
    fn name(&self) -> String;

    fn perceive(&mut self, grid: &Grid, pose: &Pose, view: &ViewSpec) -> Result<LabelMap>;
}

/// Ground-truth labels of the rendered view.
pub struct OraclePerception;

impl Perception for OraclePerception {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn perceive(&mut self, grid: &Grid, pose: &Pose, view: &ViewSpec) -> Result<LabelMap> {
        Ok(render_labels(grid, pose, view))
    }
}

/// Ground truth with each pixel replaced by a uniform random class with probability `p`.
pub struct NoisyPerception {
    p: f64,
    num_classes: usize,
    rng: ChaCha8Rng,
}

impl NoisyPerception {
    pub fn new(p: f64, num_classes: usize, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) || num_classes == 0 {
            return Err(Error::Config(format!(
                "noise probability {p} outside [0, 1] or no classes"
            )));
        }
        Ok(Self {
            p,
            num_classes,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl Perception for NoisyPerception {
    fn name(&self) -> String {
        format!("noisy:{}", self.p)
    }

    fn perceive(&mut self, grid: &Grid, pose: &Pose, view: &ViewSpec) -> Result<LabelMap> {
        let clean = render_labels(grid, pose, view);
        let data = clean
            .data()
            .iter()
            .map(|&v| {
                if self.rng.gen_bool(self.p) {
                    self.rng.gen_range(0..self.num_classes) as u8
                } else {
                    v
                }
            })
            .collect();
        LabelMap::new(clean.height(), clean.width(), data)
    }
}

/// The same class everywhere.
pub struct ConstantPerception(pub u8);

impl Perception for ConstantPerception {
    fn name(&self) -> String {
        format!("constant:{}", self.0)
    }

    fn perceive(&mut self, _grid: &Grid, _pose: &Pose, view: &ViewSpec) -> Result<LabelMap> {
        Ok(LabelMap::filled(view.size, view.size, self.0))
    }
}

/// Render, downsample to the model input size, super-resolve and segment.
pub struct ModelPerception<P> {
    pub pipeline: P,
    pub lr_size: usize,
}

impl<P: SegPipeline> Perception for ModelPerception<P> {
    fn name(&self) -> String {
        "checkpoint".into()
    }

    fn perceive(&mut self, grid: &Grid, pose: &Pose, view: &ViewSpec) -> Result<LabelMap> {
        if grid.num_classes() > self.pipeline.num_classes() {
            return Err(Error::Config(format!(
                "world {} uses {} classes, the model predicts {}",
                grid.name,
                grid.num_classes(),
                self.pipeline.num_classes()
            )));
        }
        let hr = render_image(&render_labels(grid, pose, view));
        let lr = downsample_bicubic(&hr, self.lr_size)?;
        let (_, logits) = self.pipeline.infer(&lr)?;
        let seg = predict_labels(&logits);
        if seg.height() != view.size {
            return Err(Error::Shape(format!(
                "model output {}×{} does not match the {}-pixel view",
                seg.height(),
                seg.width(),
                view.size
            )));
        }
        Ok(seg)
    }
}

/// One replay line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Pose at which the view was taken.
    pub pose: Pose,
    /// Mode after the step.
    pub mode: Mode,
    pub waypoints: Vec<Cell>,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub world: String,
    pub start: String,
    pub target: String,
    pub perception: String,
    pub repeat: usize,
    pub seed: u64,
    pub status: Mode,
    pub steps: usize,
    pub trajectory: Vec<StepRecord>,
    /// View segmentation at every step.
    #[serde(skip)]
    pub segmentations: Vec<LabelMap>,
}

impl EpisodeRecord {
    pub fn success(&self) -> bool {
        self.status == Mode::DoneSuccess
    }

    /// Replay as JSON lines.
    pub fn replay_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.trajectory {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Rolls out from `world.pose` until a terminal mode.
pub fn run_episode(
    world: &World,
    perception: &mut dyn Perception,
    cfg: &NavConfig,
) -> Result<EpisodeRecord> {
    cfg.validate()?;
    let mut state = NavState::new(world.pose, cfg.max_steps);
    let mut trajectory = Vec::new();
    let mut segmentations = Vec::new();
    while !state.mode.is_terminal() {
        let seg = perception.perceive(&world.grid, &state.pose, &cfg.view)?;
        let next = fsm_step(&state, &seg, world, cfg)?;
        trajectory.push(StepRecord {
            step: trajectory.len(),
            pose: state.pose,
            mode: next.mode,
            waypoints: next.waypoints.iter().map(|w| w.cell).collect(),
            success: next.mode == Mode::DoneSuccess,
        });
        segmentations.push(seg);
        state = next;
    }
    let start = world
        .grid
        .starts
        .iter()
        .find(|s| s.pose == world.pose)
        .map_or_else(|| "custom".to_string(), |s| s.name.clone());
    Ok(EpisodeRecord {
        world: world.grid.name.clone(),
        start,
        target: world
            .grid
            .class_name(world.target)
            .unwrap_or("unknown")
            .to_string(),
        perception: perception.name(),
        repeat: 0,
        seed: world.seed,
        status: state.mode,
        steps: state.step_count,
        trajectory,
        segmentations,
    })
}

/// One trial of the protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub start: usize,
    pub target: String,
    pub repeat: usize,
    pub seed: u64,
}

/// `targets × starts × repeats` trials, repeat-major so that any prefix covers
/// the target/start grid as evenly as possible.
pub fn protocol_trials(grid: &Grid, repeats: usize) -> Vec<TrialSpec> {
    let mut out = Vec::new();
    for repeat in 0..repeats {
        for target in &grid.targets {
            for start in 0..grid.starts.len() {
                let seed = grid
                    .seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add(out.len() as u64);
                out.push(TrialSpec {
                    start,
                    target: target.clone(),
                    repeat,
                    seed,
                });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub successes: usize,
    pub trials: usize,
}

impl Tally {
    pub fn rate(&self) -> Option<f64> {
        (self.trials > 0).then(|| self.successes as f64 / self.trials as f64)
    }
}

/// Success counts by target (rows) and start (columns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessTable {
    pub world: String,
    pub perception: String,
    pub targets: Vec<String>,
    pub starts: Vec<String>,
    pub cells: Vec<Vec<Tally>>,
    pub total: Tally,
}

impl SuccessTable {
    pub fn from_records(grid: &Grid, perception: &str, records: &[EpisodeRecord]) -> Self {
        let targets = grid.targets.clone();
        let starts: Vec<String> = grid.starts.iter().map(|s| s.name.clone()).collect();
        let mut cells = vec![vec![Tally::default(); starts.len()]; targets.len()];
        let mut total = Tally::default();
        for r in records {
            let (Some(ti), Some(si)) = (
                targets.iter().position(|t| *t == r.target),
                starts.iter().position(|s| *s == r.start),
            ) else {
                continue;
            };
            let ok = usize::from(r.success());
            cells[ti][si].trials += 1;
            cells[ti][si].successes += ok;
            total.trials += 1;
            total.successes += ok;
        }
        Self {
            world: grid.name.clone(),
            perception: perception.to_string(),
            targets,
            starts,
            cells,
            total,
        }
    }

    /// Plain-text table with per-cell `successes/trials`.
    pub fn render(&self) -> String {
        let mut out = format!("{} ({})\n", self.world, self.perception);
        let _ = write!(out, "{:<12}", "target");
        for s in &self.starts {
            let _ = write!(out, " {s:>10}");
        }
        out.push('\n');
        for (t, row) in self.targets.iter().zip(&self.cells) {
            let _ = write!(out, "{t:<12}");
            for c in row {
                let _ = write!(out, " {:>10}", format!("{}/{}", c.successes, c.trials));
            }
            out.push('\n');
        }
        let rate = self
            .total
            .rate()
            .map_or("n/a".to_string(), |r| format!("{:.1}%", 100.0 * r));
        let _ = writeln!(
            out,
            "success rate {rate} ({}/{})",
            self.total.successes, self.total.trials
        );
        out
    }
}

/// Runs the first `limit` protocol trials (all if `None`) on `grid`.
pub fn run_protocol(
    grid: &Grid,
    cfg: &NavConfig,
    repeats: usize,
    limit: Option<usize>,
    perception: &mut dyn FnMut(&TrialSpec) -> Result<Box<dyn Perception>>,
) -> Result<(Vec<EpisodeRecord>, SuccessTable)> {
    let trials = protocol_trials(grid, repeats);
    let n = limit.unwrap_or(trials.len()).min(trials.len());
    let mut records = Vec::with_capacity(n);
    let mut name = String::from("none");
    for t in &trials[..n] {
        let world = grid.world(t.start, &t.target, t.seed)?;
        let mut p = perception(t)?;
        name = p.name();
        let mut rec = run_episode(&world, p.as_mut(), cfg)?;
        rec.repeat = t.repeat;
        records.push(rec);
    }
    let table = SuccessTable::from_records(grid, &name, &records);
    Ok((records, table))
}
