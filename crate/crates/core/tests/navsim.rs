use proptest::prelude::*;
use ulrseg::navsim::{
    bundled_worlds, check_success, detect_branch_points, fsm_step, plan_floor_waypoints,
    render_labels, run_episode, run_protocol, Cell, ConstantPerception, Grid, Heading, Mode,
    NavConfig, NavState, NoisyPerception, OraclePerception, Perception, Pose, StepRecord,
    TrialSpec, World, SUCCESS_FRACTION,
};
use ulrseg::LabelMap;

const FLOOR: u8 = 1;

fn grid(name: &str) -> Grid {
    bundled_worlds()
        .unwrap()
        .into_iter()
        .find(|g| g.name == name)
        .unwrap()
}

fn scripted() -> World {
    grid("scripted_12x12").world(0, "sofa", 0).unwrap()
}

fn oracle(_: &TrialSpec) -> ulrseg::Result<Box<dyn Perception>> {
    Ok(Box::new(OraclePerception))
}

#[test]
fn corridor_waypoints_follow_the_centre_column() {
    let seg = LabelMap::from_fn(9, 9, |_, x| u8::from((3..=5).contains(&x)));
    assert_eq!(
        plan_floor_waypoints(&seg, FLOOR, 4),
        vec![(8, 4), (4, 4), (0, 4)]
    );
    assert!(plan_floor_waypoints(&LabelMap::filled(9, 9, 0), FLOOR, 4).is_empty());
}

#[test]
fn l_shaped_floor_waypoints_match_hand_enumerated_spans() {
    // A vertical leg in columns 2..=4 and a foot in rows 8..=11 reaching column 10.
    let seg = LabelMap::from_fn(12, 12, |y, x| {
        u8::from((2..=4).contains(&x) || (y >= 8 && (2..=10).contains(&x)))
    });
    // Rows 11 and 8 span 2..=10, rows 5 and 2 span 2..=4.
    assert_eq!(
        plan_floor_waypoints(&seg, FLOOR, 3),
        vec![(11, 6), (8, 6), (5, 3), (2, 3)]
    );
    // Interval 4 samples rows 11, 7, 3.
    assert_eq!(
        plan_floor_waypoints(&seg, FLOOR, 4),
        vec![(11, 6), (7, 3), (3, 3)]
    );
}

#[test]
fn split_rows_follow_the_span_nearest_the_previous_waypoint() {
    // Two corridors; the bottom row joins them so the first midpoint is central.
    let seg = LabelMap::from_fn(9, 11, |y, x| {
        u8::from(y == 8 || x <= 1 || (6..=8).contains(&x))
    });
    assert_eq!(
        plan_floor_waypoints(&seg, FLOOR, 4),
        vec![(8, 5), (4, 7), (0, 7)]
    );
}

#[test]
fn straight_corridor_has_no_branches() {
    let seg = LabelMap::from_fn(12, 12, |_, x| u8::from((4..=6).contains(&x)));
    assert!(detect_branch_points(&seg, FLOOR, 0.0).is_empty());
    // A slanted corridor fits exactly as well.
    let slant = LabelMap::from_fn(12, 12, |y, x| u8::from(x >= y / 2 && x <= y / 2 + 2));
    assert!(detect_branch_points(&slant, FLOOR, 1.0).is_empty());
}

#[test]
fn alcove_yields_one_branch_inside_it() {
    // Corridor columns 4..=6 with a 3-pixel alcove on rows 5 and 6.
    let seg = LabelMap::from_fn(12, 12, |y, x| {
        u8::from((4..=6).contains(&x) || ((5..=6).contains(&y) && (4..=9).contains(&x)))
    });
    // Left edges are all 4. Right edges are 6 on ten rows and 9 on rows 5, 6,
    // symmetric about the mean row, so the fitted right line is x = 6.5. Only
    // column 9 lies more than 2 outside it (2.5); column 8 is 1.5 out.
    assert_eq!(detect_branch_points(&seg, FLOOR, 2.0), vec![(5, 9)]);
    assert_eq!(detect_branch_points(&seg, FLOOR, 1.0).len(), 1);
    assert!(detect_branch_points(&seg, FLOOR, 2.5).is_empty());
    assert!(detect_branch_points(&seg, FLOOR, 50.0).is_empty());
    // One floor row cannot define a line.
    let row = LabelMap::from_fn(12, 12, |y, _| u8::from(y == 3));
    assert!(detect_branch_points(&row, FLOOR, 0.0).is_empty());
}

#[test]
fn success_threshold_is_strict() {
    let mut seg = LabelMap::filled(20, 20, 0);
    for i in 0..160 {
        seg.set(i / 20, i % 20, 3);
    }
    assert_eq!(160.0 / 400.0, SUCCESS_FRACTION);
    assert!(!check_success(&seg, 3));
    seg.set(8, 0, 3);
    assert!(check_success(&seg, 3));
    let mut seg = LabelMap::filled(20, 20, 0);
    for i in 0..180 {
        seg.set(i / 20, i % 20, 3);
    }
    assert!(check_success(&seg, 3));
    assert!(!check_success(&LabelMap::filled(20, 20, 0), 3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn more_target_pixels_never_undo_success(
        data in proptest::collection::vec(0u8..4, 100),
        extra in proptest::collection::vec(0usize..100, 1..40),
    ) {
        let mut seg = LabelMap::new(10, 10, data).unwrap();
        let mut before = check_success(&seg, 2);
        for i in extra {
            seg.set(i / 10, i % 10, 2);
            let now = check_success(&seg, 2);
            prop_assert!(!before || now);
            before = now;
        }
    }
}

#[test]
fn visible_target_switches_to_object_goal() {
    let world = scripted();
    let cfg = NavConfig::default();
    // From the corridor mouth the sofa fills two view columns beyond two floor cells.
    let pose = Pose {
        cell: Cell::new(8, 5),
        heading: Heading::N,
    };
    let seg = render_labels(&world.grid, &pose, &cfg.view);
    assert!(seg.count(world.target) > 0 && !check_success(&seg, world.target));
    let next = fsm_step(&NavState::new(pose, 200), &seg, &world, &cfg).unwrap();
    assert_eq!(next.mode, Mode::ObjectGoal);
    assert_eq!(next.step_count, 1);
}

#[test]
fn nothing_to_follow_ends_in_failure() {
    let world = scripted();
    let cfg = NavConfig::default();
    let walls = LabelMap::filled(cfg.view.size, cfg.view.size, world.grid.wall_class);
    let mut state = NavState::new(world.pose, 200);
    let mut modes = Vec::new();
    while !state.mode.is_terminal() {
        state = fsm_step(&state, &walls, &world, &cfg).unwrap();
        assert!(state.waypoints.is_empty() && state.branches.is_empty());
        modes.push(state.mode);
    }
    assert_eq!(state.mode, Mode::DoneFailure);
    assert_eq!(state.pose.cell, world.pose.cell);
    assert!(modes.len() <= 6, "{modes:?}");
    assert!(fsm_step(&state, &walls, &world, &cfg).is_err());
}

#[test]
fn exhausted_budget_ends_in_failure() {
    let world = grid("protocol_office").world(0, "painting", 0).unwrap();
    let full = run_episode(&world, &mut OraclePerception, &NavConfig::default()).unwrap();
    assert!(full.success() && full.steps > 2);
    let cfg = NavConfig {
        max_steps: full.steps - 1,
        ..NavConfig::default()
    };
    let rec = run_episode(&world, &mut OraclePerception, &cfg).unwrap();
    assert_eq!(rec.status, Mode::DoneFailure);
    assert_eq!(rec.steps, full.steps - 1);
}

#[test]
fn scripted_world_succeeds_and_replays() {
    let world = scripted();
    let cfg = NavConfig::default();
    let rec = run_episode(&world, &mut OraclePerception, &cfg).unwrap();
    assert!(rec.success());
    assert!(rec.steps <= 60, "took {} steps", rec.steps);
    let replay: Vec<StepRecord> = rec
        .replay_jsonl()
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(replay, rec.trajectory);
    assert_eq!(replay.len(), rec.segmentations.len());
    for (i, (step, seg)) in replay.iter().zip(&rec.segmentations).enumerate() {
        assert_eq!(step.step, i);
        assert_eq!(*seg, render_labels(&world.grid, &step.pose, &cfg.view));
        assert_eq!(step.success, check_success(seg, world.target));
        if let Some(prev) = i.checked_sub(1).map(|j| &replay[j]) {
            assert!(prev.pose.cell.manhattan(step.pose.cell) <= 1);
            assert!(!prev.mode.is_terminal());
        }
    }
    let last = replay.last().unwrap();
    assert!(last.success && last.mode == Mode::DoneSuccess);
    let line: serde_json::Value =
        serde_json::from_str(rec.replay_jsonl().unwrap().lines().next().unwrap()).unwrap();
    for key in ["step", "pose", "mode", "waypoints", "success"] {
        assert!(line.get(key).is_some());
    }
}

#[test]
fn episodes_are_deterministic() {
    let world = scripted();
    let cfg = NavConfig::default();
    let a = run_episode(&world, &mut OraclePerception, &cfg).unwrap();
    let b = run_episode(&world, &mut OraclePerception, &cfg).unwrap();
    assert_eq!(a, b);
    let noisy = |seed| {
        run_episode(
            &world,
            &mut NoisyPerception::new(0.2, 6, seed).unwrap(),
            &cfg,
        )
        .unwrap()
    };
    let (n1, n2) = (noisy(4), noisy(4));
    assert_eq!(n1, n2);
    assert_eq!(n1.segmentations, n2.segmentations);
    let clean = run_episode(&world, &mut NoisyPerception::new(0.0, 6, 4).unwrap(), &cfg).unwrap();
    assert_eq!((clean.trajectory, clean.status), (a.trajectory, a.status));
    assert!(NoisyPerception::new(1.5, 6, 0).is_err());
}

#[test]
fn oracle_trajectories_stay_on_the_floor() {
    let cfg = NavConfig::default();
    for g in bundled_worlds().unwrap() {
        let (records, _) = run_protocol(&g, &cfg, 1, None, &mut oracle).unwrap();
        for r in &records {
            for s in &r.trajectory {
                assert!(g.is_floor(s.pose.cell), "{}: pose {:?}", g.name, s.pose);
                for w in &s.waypoints {
                    assert!(g.is_floor(*w), "{}: waypoint {w:?}", g.name);
                }
            }
        }
    }
}

#[test]
fn constant_wrong_class_fails() {
    let cfg = NavConfig::default();
    for g in bundled_worlds().unwrap() {
        let world = g.world(0, &g.targets[0], 0).unwrap();
        let wrong = (0..g.num_classes() as u8)
            .find(|&k| k != world.target && k != g.floor_class)
            .unwrap();
        let rec = run_episode(&world, &mut ConstantPerception(wrong), &cfg).unwrap();
        assert_eq!(rec.status, Mode::DoneFailure, "{}", g.name);
    }
}

#[test]
fn oracle_solves_every_bundled_world_for_every_seed() {
    let cfg = NavConfig::default();
    let worlds = bundled_worlds().unwrap();
    assert_eq!(worlds.len(), 10);
    for g in &worlds {
        for seed in 0..10 {
            for target in &g.targets {
                for start in 0..g.starts.len() {
                    let rec = run_episode(
                        &g.world(start, target, seed).unwrap(),
                        &mut OraclePerception,
                        &cfg,
                    )
                    .unwrap();
                    assert!(
                        rec.success(),
                        "{} start {start} target {target} seed {seed}",
                        g.name
                    );
                }
            }
        }
    }
}

#[test]
fn forty_trial_protocol_table() {
    let g = grid("protocol_office");
    assert_eq!((g.targets.len(), g.starts.len()), (4, 2));
    let (records, table) = run_protocol(&g, &NavConfig::default(), 5, None, &mut oracle).unwrap();
    assert_eq!(records.len(), 40);
    assert_eq!(table.cells.len(), 4);
    for row in &table.cells {
        assert_eq!(row.len(), 2);
        assert!(row.iter().all(|c| c.trials == 5));
    }
    assert_eq!(table.total.trials, 40);
    assert_eq!(table.total.rate(), Some(1.0));
    let text = table.render();
    assert!(text.contains("success rate 100.0% (40/40)"), "{text}");
    for t in &g.targets {
        assert!(text.contains(t.as_str()));
    }
    let (_, again) = run_protocol(&g, &NavConfig::default(), 5, None, &mut oracle).unwrap();
    assert_eq!(again, table);
    let (prefix, small) = run_protocol(&g, &NavConfig::default(), 5, Some(8), &mut oracle).unwrap();
    assert_eq!(prefix.len(), 8);
    assert!(small.cells.iter().flatten().all(|c| c.trials == 1));
}

#[test]
fn world_files_round_trip_and_reject_bad_input() {
    for g in bundled_worlds().unwrap() {
        assert_eq!(Grid::parse(&g.to_text()).unwrap(), g);
    }
    let base = "world w\nclass # 0 wall\nclass . 1 floor\nclass s 2 sofa\ntarget sofa\ngrid\n";
    assert!(Grid::parse(&format!("{base}#####\n#..s#\n#####\n")).is_ok());
    assert!(Grid::parse(&format!("{base}#####\n#.#.#\n#s###\n")).is_err());
    assert!(Grid::parse(&format!("{base}#####\n#...#\n#####\n")).is_err());
    assert!(Grid::parse(&format!("{base}#####\n#.x.#\n#####\n")).is_err());
    assert!(Grid::parse(&format!("{base}#####\n#.s.\n#####\n")).is_err());
}
