//! Simulated indoor navigation driven by segmentation maps.
//!
//! A robot in a grid world sees a front view rendered from the grid, receives
//! a segmentation of it from a [`Perception`] adapter and runs a state machine
//! with three behaviours: look around, follow floor waypoints, approach the
//! target. An episode succeeds once the target covers more than 40% of a view.

pub mod episode;
pub mod fsm;
pub mod planner;
pub mod world;

pub use episode::{
    protocol_trials, run_episode, run_protocol, ConstantPerception, EpisodeRecord, ModelPerception,
    NoisyPerception, OraclePerception, Perception, StepRecord, SuccessTable, Tally, TrialSpec,
};
pub use fsm::{fsm_step, Mode, NavConfig, NavState, Waypoint};
pub use planner::{check_success, detect_branch_points, plan_floor_waypoints, SUCCESS_FRACTION};
pub use world::{render_image, render_labels, Cell, Grid, Heading, Pose, Start, ViewSpec, World};

use crate::error::Result;

/// Solvable worlds shipped with the crate as `(file stem, text)`.
pub const BUNDLED_WORLDS: [(&str, &str); 10] = [
    ("l_corridor", include_str!("../../worlds/l_corridor.txt")),
    (
        "long_corridor",
        include_str!("../../worlds/long_corridor.txt"),
    ),
    ("open_hall", include_str!("../../worlds/open_hall.txt")),
    (
        "painting_hall",
        include_str!("../../worlds/painting_hall.txt"),
    ),
    (
        "protocol_office",
        include_str!("../../worlds/protocol_office.txt"),
    ),
    (
        "scripted_12x12",
        include_str!("../../worlds/scripted_12x12.txt"),
    ),
    ("side_room", include_str!("../../worlds/side_room.txt")),
    ("t_junction", include_str!("../../worlds/t_junction.txt")),
    ("two_rooms", include_str!("../../worlds/two_rooms.txt")),
    ("u_loop", include_str!("../../worlds/u_loop.txt")),
];

/// Parses every bundled world.
pub fn bundled_worlds() -> Result<Vec<Grid>> {
    BUNDLED_WORLDS
        .iter()
        .map(|(_, text)| Grid::parse(text))
        .collect()
}
