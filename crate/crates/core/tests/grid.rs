use std::fs;

use brac_core::data::collect;
use brac_core::envs::{EnvName, ReferenceController};
use brac_core::harness::{load_records, run_grid, select_best, GridDataset, GridSpec};
use brac_core::policies::{clone_behavior, CloneConfig};
use brac_core::rng::seeded;
use brac_core::trainer::{Algo, TrainerConfig};

fn datasets() -> Vec<GridDataset> {
    let env = EnvName::PointMass2D.build();
    let ctrl = ReferenceController::new(EnvName::PointMass2D);
    ["none", "gauss:0.3"]
        .iter()
        .enumerate()
        .map(|(i, noise)| {
            let noise = noise.parse().unwrap();
            let data = collect(env.as_ref(), &ctrl, noise, 400, &mut seeded(i as u64)).unwrap();
            let cfg = CloneConfig {
                steps: 30,
                batch_size: 32,
                learning_rate: 1e-3,
                hidden: vec![8],
            };
            let behavior = clone_behavior(&data, &cfg, &mut seeded(10 + i as u64)).unwrap().policy;
            GridDataset {
                tag: data.noise_tag().to_string(),
                data,
                behavior,
            }
        })
        .collect()
}

fn base() -> TrainerConfig {
    let mut cfg = TrainerConfig::preset(Algo::KlVp, 1.0, 2);
    cfg.policy_hidden = vec![8];
    cfg.q_hidden = vec![8];
    cfg.batch_size = 16;
    cfg.total_steps = 6;
    cfg.eval_interval = Some(3);
    cfg.eval.episodes = 2;
    cfg.divergence.n_samples = 2;
    cfg
}

fn grid() -> GridSpec {
    GridSpec {
        learning_rates: vec![1e-4, 1e-3],
        strengths: vec![0.3, 3.0],
        seeds: 2,
        base_seed: 7,
    }
}

#[test]
fn grid_runs_every_cell_and_resumes() {
    let env = EnvName::PointMass2D.build();
    let ds = datasets();
    let dir = tempfile::tempdir().unwrap();
    let first = run_grid(&grid(), &base(), &ds, env.as_ref(), 2, Some(dir.path())).unwrap();
    assert_eq!(first.records.len(), 16);
    assert_eq!(first.executed, 16);
    assert_eq!(load_records(dir.path()).unwrap(), first.records);

    // Simulate an interrupted run by removing some finished cells.
    let mut files: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    for f in &files[..5] {
        fs::remove_file(f).unwrap();
    }
    let resumed = run_grid(&grid(), &base(), &ds, env.as_ref(), 1, Some(dir.path())).unwrap();
    assert_eq!(resumed.executed, 5);
    assert_eq!(resumed.records, first.records);

    let again = run_grid(&grid(), &base(), &ds, env.as_ref(), 1, None).unwrap();
    assert_eq!(again.executed, 16);
    assert_eq!(again.records, first.records);
    let (lr, s) = select_best(&first.records).unwrap();
    assert!(grid().learning_rates.contains(&lr) && grid().strengths.contains(&s));
}

#[test]
fn changed_configuration_is_not_reused() {
    let env = EnvName::PointMass2D.build();
    let ds = datasets();
    let dir = tempfile::tempdir().unwrap();
    let small = GridSpec {
        learning_rates: vec![1e-3],
        strengths: vec![1.0],
        seeds: 1,
        base_seed: 0,
    };
    run_grid(&small, &base(), &ds, env.as_ref(), 1, Some(dir.path())).unwrap();
    let mut other = base();
    other.total_steps = 3;
    let rerun = run_grid(&small, &other, &ds, env.as_ref(), 1, Some(dir.path())).unwrap();
    assert_eq!(rerun.executed, 2);
}
