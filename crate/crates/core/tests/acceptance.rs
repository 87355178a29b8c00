//! End-to-end acceptance suite. Each criterion prints one PASS or FAIL line.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use placelab::dataset::{generate_dataset, make_step_targets, Dataset, DatasetConfig, PairKind, Split, TaskCounts};
use placelab::diffusion::{sample_poses, DenoiseOptions, OracleRefiner, Refiner};
use placelab::eval::{coverage_curve, coverage_from_claims, evaluate, EvalContext, EvalOptions, Prediction, SlotPose, Tolerances};
use placelab::geometry::{geodesic_distance, sample_uniform_rotation, slerp, RigidTransform, UnitQuaternion, Vec3};
use placelab::model::train::{train, LossRow, TrainConfig};
use placelab::model::{grad_check, grad_check_linear, prepare_pair, sample_frame, ModelConfig, PoseModel};
use placelab::pointcloud::{farthest_point_sample, sample_mesh_surface, PointCloud};
use placelab::procgen::{generate_object, Category, ProcgenConfig, SlotType};
use placelab::proposer::{propose_heuristic, propose_oracle, HeuristicConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes around libtest's capture so the lines land in the test log.
fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn criterion(id: u32, name: &str, check: impl FnOnce() -> String) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(check));
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            report(&format!("criterion {id} [{name}]: PASS ({detail}; {secs:.1} s)"));
            true
        }
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            report(&format!("criterion {id} [{name}]: FAIL ({msg}; {secs:.1} s)"));
            false
        }
    }
}

fn geometry_suite() -> String {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let a = sample_uniform_rotation(&mut rng);
        let b = sample_uniform_rotation(&mut rng);
        assert!(geodesic_distance(&slerp(&a, &b, 0.0), &a) < 1e-12, "slerp(0) differs from q0");
        assert!(geodesic_distance(&slerp(&a, &b, 1.0), &b) < 1e-12, "slerp(1) differs from q1");
        let total = geodesic_distance(&a, &b);
        for alpha in [0.1, 0.25, 0.5, 0.8] {
            let d = geodesic_distance(&a, &slerp(&a, &b, alpha));
            assert!((d - alpha * total).abs() < 1e-9, "geodesic not proportional at {alpha}");
        }
    }
    let n = 100_000;
    let mean = (0..n).map(|_| sample_uniform_rotation(&mut rng).angle()).sum::<f64>() / n as f64;
    assert!((mean - 2.2074).abs() < 0.02, "mean angle {mean}");
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    format!("mean uniform angle {mean:.4} rad")
}

/// Brute force: each pick scans all candidates against all picked points.
fn greedy_oracle(points: &[Vec3], k: usize, start: usize) -> Vec<usize> {
    let mut picked = vec![start];
    while picked.len() < k {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, p) in points.iter().enumerate() {
            let d = picked.iter().map(|&j| p.distance(points[j])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        picked.push(best.1);
    }
    picked
}

fn fps_matches_oracle() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..100 {
        let n = rng.gen_range(1..=64);
        let points: Vec<Vec3> = (0..n).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let k = rng.gen_range(1..=n);
        let start = rng.gen_range(0..n);
        let pc = PointCloud::new(points.clone(), "object");
        assert_eq!(farthest_point_sample(&pc, k, start).unwrap(), greedy_oracle(&points, k, start), "cloud {case}");
    }
    "100 clouds".into()
}

fn schedule_telescopes() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t = Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
        let t_init = RigidTransform::new(sample_uniform_rotation(&mut rng), t);
        let product = make_step_targets(&t_init, 5).iter().fold(RigidTransform::IDENTITY, |acc, s| s.delta.compose(&acc));
        let expected = t_init.inverse();
        let r = geodesic_distance(&product.rotation, &expected.rotation);
        let d = product.translation.distance(expected.translation);
        assert!(r < 1e-9 && d < 1e-9, "rotation {r:e}, translation {d:e}");
        worst = worst.max(r).max(d);
    }
    format!("worst residual {worst:.1e}")
}

fn mixed_dataset(per_task: usize, seed: u64) -> Dataset {
    let cfg = DatasetConfig {
        train: TaskCounts { hanging: per_task, stacking: per_task, vial_insertion: per_task, other_insertion: per_task },
        val: TaskCounts::default(),
        ..DatasetConfig::default()
    };
    generate_dataset(&cfg, &ProcgenConfig::default(), seed).unwrap()
}

fn sample_scenes<'a>(
    ds: &'a Dataset,
    scenes: impl Iterator<Item = &'a placelab::dataset::SceneRecord>,
    refiner: &dyn Fn(&placelab::dataset::SceneRecord) -> Box<dyn Refiner + 'a>,
    options: &DenoiseOptions,
    samples: usize,
    seed: u64,
) -> Vec<Prediction> {
    let mut out = Vec::new();
    for scene in scenes {
        let base = ds.base_of(scene);
        let locations: Vec<Vec3> = propose_oracle(base, &RigidTransform::IDENTITY, &[]).unwrap().iter().map(|p| p.location).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ scene.index as u64);
        let r = refiner(scene);
        let s = sample_poses(r.as_ref(), scene, &locations, samples, options, false, &mut rng).unwrap();
        out.extend(s.samples.into_iter().map(|p| Prediction {
            scene_index: scene.index,
            proposal_index: p.proposal_index,
            sample_index: p.sample_index,
            location: p.location,
            transform: p.transform,
            trace: None,
        }));
    }
    out
}

fn oracle_end_to_end() -> String {
    let start = Instant::now();
    let ds = mixed_dataset(25, 4);
    for kind in [SlotType::Insert, SlotType::Stack, SlotType::Hang] {
        assert!(ds.scenes.iter().any(|s| ds.base_of(s).slots[s.sample.slot_index].slot_type == kind), "no {kind:?} scene");
    }
    let oracle = |scene: &placelab::dataset::SceneRecord| -> Box<dyn Refiner> {
        Box::new(OracleRefiner::new(ds.base_of(scene), ds.target_of(scene), &scene.p_c).unwrap())
    };
    let preds = sample_scenes(&ds, ds.scenes.iter(), &oracle, &DenoiseOptions::default(), 1, 4);
    let out = evaluate(&preds, &ds, &Tolerances::default(), &EvalOptions::default()).unwrap();
    let s = &out.summary;
    assert_eq!(s.scenes, 100);
    assert_eq!(s.success_rate, 1.0, "success {}", s.success_rate);
    assert_eq!(s.final_coverage, 1.0, "coverage {}", s.final_coverage);
    assert!(s.median_translation_error < 1e-6, "median translation {}", s.median_translation_error);
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    format!("{} predictions, median translation error {:.1e} m", s.predictions, s.median_translation_error)
}

fn differentiation() -> String {
    let linear = grad_check_linear(6, 5, 8, 1e-6, 5);
    assert!(linear < 1e-8, "linear {linear:e}");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = RigidTransform::new(sample_uniform_rotation(&mut rng), Vec3::new(0.1, -0.05, 0.2));
    let cloud = |rng: &mut ChaCha8Rng, n: usize| PointCloud::new((0..n).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect(), "crop");
    let mut worst: f64 = 0.0;
    for config in [
        ModelConfig { points_per_cloud: 16, feature_dim: 8, self_blocks: 1, cross_blocks: 1, decoder_hidden: vec![16, 8], ..ModelConfig::default() },
        ModelConfig::default(),
    ] {
        let n = config.points_per_cloud;
        let model = PoseModel::new_random_head(config, 6).unwrap();
        let (target, base) = (cloud(&mut rng, 2 * n), cloud(&mut rng, 2 * n));
        let pair = prepare_pair(&target, &base, n, sample_frame(&target, &base, n).unwrap()).unwrap();
        let r = grad_check(&model, &pair, 3, &gt, 60, 1e-5, 7).unwrap();
        assert!(r.max_relative_error < 1e-4, "{} params: {r:?}", model.param_count());
        worst = worst.max(r.max_relative_error);
    }
    format!("linear {linear:.1e}, models {worst:.1e}")
}

fn coverage_oracle() -> String {
    let curve = coverage_from_claims(&[Some(1), Some(1), Some(3)], 10);
    assert_eq!(curve.points, vec![(1, 0.1), (2, 0.1), (3, 0.2)]);
    let curve = coverage_from_claims(&[None, Some(0), Some(2), Some(0), Some(1), None], 3);
    let third = 1.0 / 3.0;
    assert_eq!(curve.points.iter().map(|p| p.1).collect::<Vec<_>>(), vec![0.0, third, 2.0 * third, 2.0 * third, 1.0, 1.0]);
    assert!(curve.is_monotone());

    // poses against four slots on a line: a hit, a near miss, a tilted hit, a repeat
    let slots = (0..4)
        .map(|i| SlotPose { slot_index: i, ideal: RigidTransform::from_translation(Vec3::new(0.05 * i as f64, 0.0, 0.0)), clearance: 0.004 })
        .collect();
    let ctx = EvalContext { slots };
    let at = |x: f64, tilt: f64| RigidTransform::new(UnitQuaternion::rot_y(tilt), Vec3::new(x, 0.0, 0.0));
    let preds = [at(0.001, 0.0), at(0.0555, 0.0), at(0.1, 0.3), at(0.151, 0.1), at(0.0, 0.05)];
    let curve = coverage_curve(&preds, &ctx, &Tolerances::default(), None, true);
    assert_eq!(curve.points.iter().map(|p| p.1).collect::<Vec<_>>(), vec![0.25, 0.25, 0.25, 0.5, 0.5]);
    assert!(curve.is_monotone());
    "hand curves reproduced".into()
}

/// Held-out peg insertion set shared by the learning criteria.
fn toy_dataset() -> Dataset {
    let cfg = DatasetConfig {
        train: TaskCounts { other_insertion: 200, ..TaskCounts::default() },
        val: TaskCounts { other_insertion: 50, ..TaskCounts::default() },
        pair_kinds: vec![PairKind::PegInHolePlate],
        ..DatasetConfig::default()
    };
    generate_dataset(&cfg, &ProcgenConfig::default(), 42).unwrap()
}

struct ToyRun {
    early: f64,
    late: f64,
    /// Held-out success with the five schedule steps only.
    success: f64,
    /// Held-out success with the default 45 repeated steps appended.
    success_repeated: f64,
    train_time: Duration,
    total_time: Duration,
}

/// Mean total loss over `[from, from + width)`.
fn window_mean(rows: &[LossRow], from: usize, width: usize) -> f64 {
    let w = &rows[from..(from + width).min(rows.len())];
    w.iter().map(|r| r.total).sum::<f64>() / w.len() as f64
}

fn toy_run(ds: &Dataset, regression: bool) -> ToyRun {
    let start = Instant::now();
    let model = PoseModel::new(ModelConfig { regression_mode: regression, ..ModelConfig::default() }, 1).unwrap();
    let config = TrainConfig::default();
    assert_eq!((config.batch_size, config.total_iterations), (16, 2000));
    let out = train(ds, model, &config, |_| {}).unwrap();
    let train_time = start.elapsed();
    let n = out.losses.len();
    let early = window_mean(&out.losses, 50, 50);
    let late = window_mean(&out.losses, n - 50, 50);
    let model = out.model;
    let learned = |_: &placelab::dataset::SceneRecord| -> Box<dyn Refiner + '_> { Box::new(model.clone()) };
    let held_out = |options: &DenoiseOptions| {
        let preds = sample_scenes(ds, ds.split(Split::Val), &learned, options, 4, 6);
        evaluate(&preds, ds, &Tolerances::default(), &EvalOptions::default()).unwrap().summary.success_rate
    };
    let schedule_only = DenoiseOptions { total_steps: 5, ..DenoiseOptions::default() };
    let success = held_out(&schedule_only);
    let success_repeated = held_out(&DenoiseOptions::default());
    ToyRun { early, late, success, success_repeated, train_time, total_time: start.elapsed() }
}

fn toy_learning(run: &ToyRun) -> String {
    let detail = format!(
        "loss {:.3} -> {:.3}, held-out success {:.2} (5 steps), {:.2} (50 steps), train {:.0} s, total {:.0} s",
        run.early,
        run.late,
        run.success,
        run.success_repeated,
        run.train_time.as_secs_f64(),
        run.total_time.as_secs_f64()
    );
    assert!(run.late <= 0.5 * run.early, "{detail}");
    assert!(run.success >= 0.70, "{detail}");
    assert!(run.total_time < Duration::from_secs(30 * 60), "{detail}");
    detail
}

fn regression_ablation(diffusion: &ToyRun, regression: &ToyRun) -> String {
    let detail = format!("regression {:.2} vs diffusion {:.2}", regression.success, diffusion.success);
    assert!(regression.success < diffusion.success, "{detail}");
    detail
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_placelab")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn same_bytes(a: &Path, b: &Path) {
    let (x, y) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert!(x == y, "{} and {} differ", a.display(), b.display());
}

fn cli_determinism() -> String {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("small.toml");
    std::fs::write(
        &config,
        "[dataset]\npair_kinds = [\"peg_in_hole_plate\", \"vial_in_vial_plate\"]\n\
         [dataset.train]\nhanging = 0\nstacking = 0\nvial_insertion = 3\nother_insertion = 3\n\
         [dataset.val]\nhanging = 0\nstacking = 0\nvial_insertion = 1\nother_insertion = 1\n\
         [model]\npoints_per_cloud = 16\nfeature_dim = 8\nself_blocks = 1\ncross_blocks = 1\ndecoder_hidden = [16]\n\
         [train]\nbatch_size = 2\nwarmup_epochs = 2\ntotal_iterations = 6\n\
         [proposer]\nsamples = 2\n",
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    let p = |name: &str| root.join(name).to_str().unwrap().to_string();
    for run in ["a", "b"] {
        let (data, model, preds) = (p(&format!("data_{run}")), p(&format!("train_{run}")), p(&format!("infer_{run}")));
        run_cli(&["gen", "--config", cfg, "--out", &data, "--seed", "17"]);
        run_cli(&["train", "--dataset", &data, "--config", cfg, "--out", &model, "--seed", "5"]);
        let ck = format!("{model}/checkpoint.bin");
        run_cli(&["infer", "--dataset", &data, "--checkpoint", &ck, "--config", cfg, "--out", &preds, "--seed", "9", "--split", "all"]);
    }
    for file in ["data_{}/manifest.json", "data_{}/scenes.jsonl", "train_{}/checkpoint.bin", "train_{}/loss.csv", "infer_{}/preds.json"] {
        same_bytes(&root.join(file.replace("{}", "a")), &root.join(file.replace("{}", "b")));
    }
    "manifest, scenes, checkpoint, loss curve and predictions identical".into()
}

fn heuristic_recall() -> String {
    let config = HeuristicConfig::default();
    let reach = 1.5 * config.grid_cell;
    let (mut found, mut total) = (0, 0);
    for seed in 0..100 {
        let (mesh, plate) = generate_object(Category::VialPlate, seed, &ProcgenConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = sample_mesh_surface(&mesh, 40_000, &mut rng).unwrap();
        let props = propose_heuristic(&cloud, SlotType::Insert, &config).unwrap();
        for slot in &plate.slots {
            total += 1;
            if props.iter().any(|p| p.location.distance(slot.center) <= reach) {
                found += 1;
            }
        }
    }
    let recall = found as f64 / total as f64;
    assert!(recall >= 0.9, "recall {recall:.3} ({found}/{total})");
    format!("recall {recall:.3} over {total} slots")
}

#[test]
fn acceptance() {
    let mut passed = vec![
        criterion(1, "geometry suite", geometry_suite),
        criterion(2, "FPS matches greedy oracle", fps_matches_oracle),
        criterion(3, "schedule telescoping", schedule_telescopes),
        criterion(4, "oracle end-to-end", oracle_end_to_end),
        criterion(5, "differentiation", differentiation),
    ];
    let ds = toy_dataset();
    let mut diffusion = None;
    passed.push(criterion(6, "toy learning run", || toy_learning(diffusion.insert(toy_run(&ds, false)))));
    passed.push(criterion(7, "coverage oracle", coverage_oracle));
    passed.push(criterion(8, "regression ablation", || {
        let regression = toy_run(&ds, true);
        regression_ablation(diffusion.as_ref().expect("criterion 6 produced no run"), &regression)
    }));
    passed.push(criterion(9, "determinism", cli_determinism));
    passed.push(criterion(10, "heuristic proposer recall", heuristic_recall));
    let failed: Vec<usize> = passed.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
