//! Coverage, floor-following and object-goal state machine.
//!
//! Every step consumes the segmentation of the current view and performs at
//! most one action: a 90° right turn or a one-cell move. Motion between
//! chosen cells follows shortest floor paths of the true grid; perception
//! only decides where to go.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::navsim::planner::{check_success, detect_branch_points, plan_floor_waypoints};
use crate::navsim::world::{Cell, Grid, Heading, Pose, ViewSpec, World};
use crate::types::LabelMap;

/// Views taken while looking around.
pub const COVERAGE_VIEWS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Coverage,
    FloorNav,
    ObjectGoal,
    DoneSuccess,
    DoneFailure,
}

impl Mode {
    pub fn is_terminal(self) -> bool {
        matches!(self, Mode::DoneSuccess | Mode::DoneFailure)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavConfig {
    pub view: ViewSpec,
    /// Waypoint row spacing in pixels; `None` means an eighth of the image height.
    #[serde(default)]
    pub interval: Option<usize>,
    /// Branch deviation threshold in view cells.
    pub dev_threshold_cells: f64,
    pub max_steps: usize,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            view: ViewSpec { cells: 5, size: 32 },
            interval: None,
            dev_threshold_cells: 1.0,
            max_steps: 200,
        }
    }
}

impl NavConfig {
    pub fn validate(&self) -> Result<()> {
        self.view.validate()?;
        if self.dev_threshold_cells.is_nan()
            || self.dev_threshold_cells < 0.0
            || self.max_steps == 0
            || self.interval == Some(0)
        {
            return Err(Error::Config(format!(
                "navigation needs a non-negative threshold, positive interval and step budget: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn interval_px(&self) -> usize {
        self.interval.unwrap_or((self.view.size / 8).max(1))
    }

    pub fn dev_threshold_px(&self) -> f64 {
        self.dev_threshold_cells * self.view.size as f64 / self.view.cells as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Waypoint {
    pub cell: Cell,
    /// Reached by popping the branch stack; arrival triggers a look-around.
    pub branch: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NavState {
    pub mode: Mode,
    pub pose: Pose,
    pub waypoints: VecDeque<Waypoint>,
    pub branches: Vec<Cell>,
    pub step_count: usize,
    pub max_steps: usize,
    /// Views taken in the current look-around.
    pub coverage_views: usize,
    /// Pose from which the target is approached.
    pub goal: Option<Pose>,
    visited: BTreeSet<Cell>,
    abandoned: BTreeSet<Cell>,
    /// Cells where a look-around has started.
    looked: BTreeSet<Cell>,
}

impl NavState {
    pub fn new(pose: Pose, max_steps: usize) -> Self {
        Self {
            mode: Mode::Coverage,
            pose,
            waypoints: VecDeque::new(),
            branches: Vec::new(),
            step_count: 0,
            max_steps,
            coverage_views: 0,
            goal: None,
            visited: BTreeSet::new(),
            abandoned: BTreeSet::new(),
            looked: BTreeSet::new(),
        }
    }

    pub fn visited(&self) -> &BTreeSet<Cell> {
        &self.visited
    }

    fn fresh(&self, c: Cell) -> bool {
        c != self.pose.cell && !self.visited.contains(&c) && !self.abandoned.contains(&c)
    }

    fn move_to(&mut self, h: Heading) {
        self.pose = Pose {
            cell: self.pose.cell.step(h),
            heading: h,
        };
        self.visited.insert(self.pose.cell);
    }

    fn turn_right(&mut self) {
        self.pose.heading = self.pose.heading.right();
    }
}

/// Advances one step. Terminal states are rejected.
pub fn fsm_step(
    state: &NavState,
    seg: &LabelMap,
    world: &World,
    cfg: &NavConfig,
) -> Result<NavState> {
    if state.mode.is_terminal() {
        return Err(Error::Invalid(format!(
            "episode already finished in {:?}",
            state.mode
        )));
    }
    let mut s = state.clone();
    if check_success(seg, world.target) {
        s.mode = Mode::DoneSuccess;
        return Ok(s);
    }
    if s.step_count >= s.max_steps {
        s.mode = Mode::DoneFailure;
        return Ok(s);
    }
    s.step_count += 1;
    s.visited.insert(s.pose.cell);

    let target_visible = seg.count(world.target) > 0;
    if target_visible && s.mode != Mode::ObjectGoal {
        s.mode = Mode::ObjectGoal;
        s.goal = None;
    }
    if s.mode == Mode::ObjectGoal {
        if object_goal_act(&mut s, seg, world, &cfg.view, target_visible) {
            return Ok(s);
        }
        s.mode = Mode::FloorNav;
    }
    match s.mode {
        Mode::Coverage => coverage_act(&mut s, seg, &world.grid, cfg),
        Mode::FloorNav => floor_act(&mut s, seg, &world.grid, cfg),
        _ => {}
    }
    Ok(s)
}

fn coverage_act(s: &mut NavState, seg: &LabelMap, grid: &Grid, cfg: &NavConfig) {
    s.looked.insert(s.pose.cell);
    push_branches(s, seg, grid, cfg);
    let far = plan_floor_waypoints(seg, grid.floor_class, cfg.interval_px())
        .last()
        .map(|&(y, x)| cfg.view.world_cell_of_pixel(&s.pose, y, x));
    if let Some(c) = far {
        if s.fresh(c) && !s.branches.contains(&c) {
            s.branches.push(c);
        }
    }
    s.coverage_views += 1;
    s.turn_right();
    if s.coverage_views >= COVERAGE_VIEWS {
        s.coverage_views = 0;
        s.mode = Mode::FloorNav;
    }
}

fn push_branches(s: &mut NavState, seg: &LabelMap, grid: &Grid, cfg: &NavConfig) {
    for (y, x) in detect_branch_points(seg, grid.floor_class, cfg.dev_threshold_px()) {
        let c = cfg.view.world_cell_of_pixel(&s.pose, y, x);
        if s.fresh(c) && !s.branches.contains(&c) {
            s.branches.push(c);
        }
    }
}

fn floor_act(s: &mut NavState, seg: &LabelMap, grid: &Grid, cfg: &NavConfig) {
    push_branches(s, seg, grid, cfg);
    if s.waypoints.is_empty() {
        for (y, x) in plan_floor_waypoints(seg, grid.floor_class, cfg.interval_px()) {
            let c = cfg.view.world_cell_of_pixel(&s.pose, y, x);
            if s.fresh(c) && !s.waypoints.iter().any(|w| w.cell == c) {
                s.waypoints.push_back(Waypoint {
                    cell: c,
                    branch: false,
                });
            }
        }
    }
    loop {
        let wp = match s.waypoints.front() {
            Some(&w) => w,
            None if !s.looked.contains(&s.pose.cell) => {
                // Out of forward waypoints: look around before backtracking.
                s.mode = Mode::Coverage;
                s.coverage_views = 0;
                coverage_act(s, seg, grid, cfg);
                return;
            }
            None => match s.branches.pop() {
                Some(c) if s.fresh(c) => {
                    s.waypoints.push_back(Waypoint {
                        cell: c,
                        branch: true,
                    });
                    continue;
                }
                Some(_) => continue,
                None => {
                    s.mode = Mode::DoneFailure;
                    return;
                }
            },
        };
        if !s.fresh(wp.cell) {
            s.waypoints.pop_front();
            continue;
        }
        let Some(h) = grid.next_step(s.pose.cell, wp.cell) else {
            s.abandoned.insert(wp.cell);
            s.waypoints.pop_front();
            continue;
        };
        s.move_to(h);
        if s.pose.cell == wp.cell {
            s.waypoints.pop_front();
            if wp.branch {
                s.waypoints.clear();
                s.mode = Mode::Coverage;
                s.coverage_views = 0;
            }
        }
        return;
    }
}

/// Nearest visible target cell in the view column of the target centroid.
fn target_cell(seg: &LabelMap, target: u8, pose: &Pose, view: &ViewSpec) -> Option<Cell> {
    let (mut n, mut sx) = (0usize, 0usize);
    for y in 0..seg.height() {
        for x in 0..seg.width() {
            if seg.get(y, x) == target {
                n += 1;
                sx += x;
            }
        }
    }
    if n == 0 {
        return None;
    }
    let col = view.cell_of_pixel(0, sx / n).1;
    let mut best: Option<((usize, usize), (usize, usize))> = None;
    for y in 0..seg.height() {
        for x in 0..seg.width() {
            if seg.get(y, x) != target {
                continue;
            }
            let (vr, vc) = view.cell_of_pixel(y, x);
            let key = (vc.abs_diff(col), view.cells - vr);
            if best.is_none_or(|(k, _)| key < k) {
                best = Some((key, (vr, vc)));
            }
        }
    }
    best.map(|(_, (vr, vc))| view.world_cell(pose, vr, vc))
}

/// Reachable floor pose facing `t`, nearest by path length; ties keep the current heading.
fn approach_pose(grid: &Grid, from: &Pose, t: Cell) -> Option<Pose> {
    let dist = grid.distances_from(from.cell);
    let mut headings = vec![from.heading];
    headings.extend(Heading::ALL.into_iter().filter(|&h| h != from.heading));
    headings
        .into_iter()
        .filter_map(|h| {
            let (dr, dc) = h.forward();
            let a = Cell::new(t.row - dr, t.col - dc);
            dist.get(&a).map(|&d| {
                (
                    d,
                    Pose {
                        cell: a,
                        heading: h,
                    },
                )
            })
        })
        .min_by_key(|(d, _)| *d)
        .map(|(_, p)| p)
}

/// Returns false when there is nothing left to pursue.
fn object_goal_act(
    s: &mut NavState,
    seg: &LabelMap,
    world: &World,
    view: &ViewSpec,
    target_visible: bool,
) -> bool {
    let grid = &world.grid;
    let at_goal = s.goal.is_some_and(|g| g == s.pose);
    if target_visible && (s.goal.is_none() || at_goal) {
        let goal = target_cell(seg, world.target, &s.pose, view)
            .and_then(|t| approach_pose(grid, &s.pose, t));
        match goal {
            Some(g) if g == s.pose => {
                // Already facing the target without enough coverage: keep scanning.
                s.goal = None;
                s.turn_right();
                return true;
            }
            Some(g) => s.goal = Some(g),
            None => {
                s.goal = None;
                return false;
            }
        }
    }
    let Some(g) = s.goal else { return false };
    if s.pose == g {
        s.goal = None;
        return false;
    }
    if s.pose.cell == g.cell {
        s.pose.heading = g.heading;
        return true;
    }
    match grid.next_step(s.pose.cell, g.cell) {
        Some(h) => {
            s.move_to(h);
            true
        }
        None => {
            s.goal = None;
            false
        }
    }
}
