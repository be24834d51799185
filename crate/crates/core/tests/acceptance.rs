use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use uhimap::cube::{CubeData, HyperCube};
use uhimap::geodesy::{ecef_to_geodetic, geodetic_to_ecef, LocalFrame};
use uhimap::geom::{PinholeIntrinsics, Pose, PushBroomIntrinsics, TimedPose, Trajectory};
use uhimap::georef::{
    georeference_full, pnp_register, umeyama_align, FixedPointReprojectionCost, GeorefOptions, PnpObservation, PnpOptions, PositionCost,
    ReprojectionCost, Similarity,
};
use uhimap::io::{self, OrthoFiles, PlyEncoding, SurveyManifest};
use uhimap::optim::{check_jacobian, is_monotone_non_increasing, solve_lm, LinearSolver, Loss, Manifold, Problem, SolverOptions};
use uhimap::ortho::{rasterize_cloud, RasterOptions};
use uhimap::par::Execution;
use uhimap::pipeline::{
    compare_orthos, run_ortho, run_pipeline, run_raycast, run_refine, BandSelection, OrthoArgs, PipelineArgs, RaycastArgs, RefineArgs,
};
use uhimap::raycast::{build_hyper_cloud, intersect_brute_force, raycast_scanline, Bvh, HyperCloud, TriMesh};
use uhimap::refine::{refine_extrinsics, Correspondence, RefineOptions, ScanlineCost};
use uhimap::sim::{simulate_survey, SimConfig, Survey, Terrain, TextureSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> Outcome;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn simulate(cfg: &SimConfig) -> Survey {
    simulate_survey(cfg, Execution::Parallel).expect("simulation")
}

fn write_bundle(survey: &Survey, dir: &Path) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    io::write_bundle(&survey.bundle, dir).unwrap()
}

fn position_rmse(a: &Trajectory, b: &Trajectory) -> f64 {
    assert_eq!(a.len(), b.len());
    let s: f64 = a
        .samples()
        .iter()
        .zip(b.samples())
        .map(|(x, y)| {
            assert!((x.t - y.t).abs() < 1e-9);
            (x.pose.translation() - y.pose.translation()).norm_squared()
        })
        .sum();
    (s / a.len() as f64).sqrt()
}

/// Regular `n × n` grid of quads split into two triangles each, `down(n, e)` deep.
fn grid_mesh(n: usize, step: f64, down: impl Fn(f64, f64) -> f64) -> TriMesh {
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for i in 0..=n {
        for j in 0..=n {
            let (x, y) = (i as f64 * step, j as f64 * step);
            vertices.push(Vector3::new(x, y, down(x, y)));
        }
    }
    let mut faces = Vec::with_capacity(2 * n * n);
    let v = |i: usize, j: usize| (i * (n + 1) + j) as u32;
    for i in 0..n {
        for j in 0..n {
            faces.push([v(i, j), v(i + 1, j), v(i + 1, j + 1)]);
            faces.push([v(i, j), v(i + 1, j + 1), v(i, j + 1)]);
        }
    }
    TriMesh::new(vertices, faces, None).unwrap().0
}

fn egg_crate(n: usize) -> TriMesh {
    let step = 0.01;
    grid_mesh(n, step, |x, y| 5.0 + 0.1 * (x * 4.0).sin() * (y * 4.0).sin())
}

fn zero_noise_fixed_point() -> Outcome {
    let mut cfg = SimConfig::default();
    cfg.seed = 101;
    cfg.scene.terrain = Terrain::Plane { depth: 5.0 };
    cfg.scene.resolution = 0.02;
    cfg.trajectory.duration = 60.0;
    cfg.sensors.bands = 8;
    cfg.noise.pixel = 0.0;
    cfg.noise.ins = 0.0;
    cfg.noise.spectral = 0.0;
    cfg.map.similarity_scale = Some(0.37);
    let survey = simulate(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_bundle(&survey, &dir.path().join("bundle"));
    let out = dir.path().join("out");
    let start = Instant::now();
    let report = run_pipeline(&PipelineArgs::new(manifest, &out), Execution::Parallel).expect("pipeline");
    let elapsed = start.elapsed().as_secs_f64();

    let traj = io::read_trajectory(&out.join("trajectory.txt")).unwrap();
    let rmse = position_rmse(&traj, &survey.truth.trajectory);
    let expected = survey.truth.expected_scale();
    let scale = report.summary.real_value("scale").unwrap();
    let scale_err = (scale - expected).abs() / expected;
    let cloud = io::read_cloud(&out.join("cloud.hsc")).unwrap();
    let surface = cloud
        .positions
        .iter()
        .map(|p| (p.z - survey.scene.down(p.x, p.y)).abs())
        .fold(0.0, f64::max);
    let pass = rmse <= 1e-4 && scale_err <= 1e-4 && surface <= 1e-4 && !cloud.is_empty() && elapsed < 120.0;
    Outcome::new(
        pass,
        format!(
            "keyframe rmse {rmse:.2e} m, scale error {scale_err:.2e}, surface error {surface:.2e} m over {} points, pipeline {elapsed:.1} s",
            cloud.len()
        ),
    )
}

fn noisy_georeferencing() -> Outcome {
    let mut worst_rmse = 0.0f64;
    let mut worst_scale = 0.0f64;
    let mut failures = Vec::new();
    for seed in 0..10u64 {
        let mut cfg = SimConfig::default();
        cfg.seed = 200 + seed;
        cfg.scene.resolution = 0.1;
        cfg.scene.texture = TextureSpec::Constant { level: 0.5 };
        cfg.trajectory.duration = 120.0;
        cfg.trajectory.speed = 0.5;
        cfg.sensors.uhi_width = 16;
        cfg.sensors.uhi_focal = 8.0;
        cfg.sensors.bands = 1;
        cfg.noise.ins = 0.3;
        cfg.noise.pixel = 0.5;
        cfg.map.stored_pixel_sigma = 0.5;
        let survey = simulate(&cfg);
        let b = &survey.bundle;
        let [lat, lon, alt] = cfg.map.ned_origin;
        let opts = GeorefOptions {
            origin: Some((lat, lon, alt)),
            ..Default::default()
        };
        let result = match georeference_full(&b.map, &b.fixes, &opts) {
            Ok(r) => r,
            Err(e) => {
                failures.push(format!("seed {}: {e}", cfg.seed));
                continue;
            }
        };
        let anchored = result.anchors.keyframes();
        let truth = survey.truth.trajectory.samples();
        let sq: f64 = anchored
            .iter()
            .map(|id| (result.map.keyframes[id].pose.translation() - truth[*id as usize].pose.translation()).norm_squared())
            .sum();
        let rmse = (sq / anchored.len() as f64).sqrt();
        let ids: Vec<u64> = b.map.keyframes.keys().copied().collect();
        let src: Vec<Vector3<f64>> = ids.iter().map(|id| *b.map.keyframes[id].pose.translation()).collect();
        let dst: Vec<Vector3<f64>> = ids.iter().map(|id| *result.map.keyframes[id].pose.translation()).collect();
        let scale = umeyama_align(&src, &dst).unwrap().scale;
        let scale_err = (scale / survey.truth.expected_scale() - 1.0).abs();
        worst_rmse = worst_rmse.max(rmse);
        worst_scale = worst_scale.max(scale_err);
        if rmse > 0.3 || scale_err > 0.01 {
            failures.push(format!("seed {}: rmse {rmse:.3} m, scale error {scale_err:.4}", cfg.seed));
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "10 seeds, worst anchored rmse {worst_rmse:.3} m, worst scale error {:.3}%{}",
            worst_scale * 100.0,
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

fn raycast_oracles() -> Outcome {
    let mesh = egg_crate(224);
    let faces = mesh.num_faces();
    let bvh = Bvh::build(&mesh).unwrap();
    let mut r = rng(3);
    let mut mismatches = 0;
    let mut hits = 0;
    for _ in 0..10_000 {
        let o = Vector3::new(r.random_range(-0.2..2.44), r.random_range(-0.2..2.44), r.random_range(3.0..6.0));
        let d = Vector3::new(r.random_range(-0.6..0.6), r.random_range(-0.6..0.6), r.random_range(-0.3..1.0)).normalize();
        let a = bvh.intersect(&o, &d).map(|h| (h.t.to_bits(), h.face));
        let b = intersect_brute_force(&mesh, &o, &d).map(|h| (h.t.to_bits(), h.face));
        hits += a.is_some() as usize;
        mismatches += (a != b) as usize;
    }

    let h = 3.0;
    let floor = TriMesh::new(
        vec![
            Vector3::new(-10.0, -10.0, h),
            Vector3::new(10.0, -10.0, h),
            Vector3::new(10.0, 10.0, h),
            Vector3::new(-10.0, 10.0, h),
        ],
        vec![[0, 1, 2], [0, 2, 3]],
        None,
    )
    .unwrap()
    .0;
    let floor_bvh = Bvh::build(&floor).unwrap();
    let lens = PushBroomIntrinsics {
        focal: 1000.0,
        principal: 959.5,
        width: 1920,
        band_count: 1,
    };
    let line = raycast_scanline(0, &Pose::identity(), &lens, &floor_bvh).unwrap();
    let mut worst = 0.0f64;
    let mut missing = 0;
    for (u, hit) in line.hits.iter().enumerate() {
        let theta = ((u as f64 - lens.principal) / lens.focal).atan();
        match hit {
            Some(hit) => worst = worst.max((hit.t - h / theta.cos()).abs()),
            None => missing += 1,
        }
    }
    let pass = faces >= 100_000 && mismatches == 0 && hits > 1000 && missing == 0 && worst <= 1e-9;
    Outcome::new(
        pass,
        format!(
            "{mismatches} mismatches on 10000 rays ({hits} hits) over {faces} faces; flat floor worst |t - h/cos| {worst:.1e} m over {} columns, {missing} missing",
            line.hits.len()
        ),
    )
}

struct Refinement {
    rotation_deg: f64,
    translation_m: f64,
    pre_px: f64,
    post_px: f64,
}

fn refine_on_truth(seed: u64) -> Refinement {
    let mut cfg = SimConfig::default();
    cfg.seed = seed;
    cfg.trajectory.duration = 20.0;
    cfg.sensors.bands = 4;
    cfg.sensors.trel_error = [2.0, 0.05];
    let survey = simulate(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest_path = write_bundle(&survey, &d.join("bundle"));
    let bundle_dir = manifest_path.parent().unwrap();
    let m = &survey.bundle.manifest;
    let traj = d.join("truth.txt");
    io::write_trajectory(&survey.truth.trajectory, &traj).unwrap();
    let cube = bundle_dir.join(&m.cube);
    let mesh = bundle_dir.join(&m.mesh);
    let gsd = 0.005;
    let exec = Execution::Parallel;
    let raycast = |trel: &Path, out: &Path| {
        run_raycast(
            &RaycastArgs {
                cube: cube.clone(),
                traj: traj.clone(),
                mesh: mesh.clone(),
                trel: trel.to_path_buf(),
                out_cloud: out.to_path_buf(),
            },
            exec,
        )
        .unwrap()
    };
    let ortho = |input: &Path, grid_from: Option<&Path>, out: &Path| {
        run_ortho(
            &OrthoArgs {
                input: input.to_path_buf(),
                gsd,
                bands: BandSelection::RgbProxy,
                grid_from: grid_from.map(Path::to_path_buf),
                out: out.to_path_buf(),
            },
            exec,
        )
        .unwrap()
    };
    raycast(&bundle_dir.join(&m.trel), &d.join("cloud0.hsc"));
    ortho(&d.join("cloud0.hsc"), None, &d.join("hs0.hdr"));
    ortho(&mesh, Some(&d.join("hs0.hdr")), &d.join("rgb.hdr"));
    let report = run_refine(
        &RefineArgs {
            rgb_ortho: d.join("rgb.hdr"),
            hs_ortho: d.join("hs0.hdr"),
            cube: cube.clone(),
            traj: traj.clone(),
            trel_init: bundle_dir.join(&m.trel),
            out_trel: d.join("trel.txt"),
            export_matches: None,
            match_nm: 550.0,
        },
        exec,
    )
    .unwrap();
    raycast(&d.join("trel.txt"), &d.join("cloud1.hsc"));
    ortho(&d.join("cloud1.hsc"), Some(&d.join("rgb.hdr")), &d.join("hs1.hdr"));
    let rgb = io::read_ortho(&OrthoFiles::beside(&d.join("rgb.hdr"))).unwrap();
    let hs = io::read_ortho(&OrthoFiles::beside(&d.join("hs1.hdr"))).unwrap();
    let post = compare_orthos(&rgb, &hs, 550.0, exec).unwrap();
    let refined = io::read_pose(&d.join("trel.txt")).unwrap();
    Refinement {
        rotation_deg: refined.angle_to(&survey.truth.t_rel).to_degrees(),
        translation_m: refined.distance_to(&survey.truth.t_rel),
        pre_px: report.real_value("mean_displacement_px").unwrap(),
        post_px: post.mean_displacement_px,
    }
}

fn extrinsic_refinement() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in [301, 302, 303] {
        let r = refine_on_truth(seed);
        let ok = r.rotation_deg <= 0.5 && r.translation_m <= 0.01 && r.post_px < r.pre_px;
        pass &= ok;
        parts.push(format!(
            "seed {seed}: {:.3} deg, {:.1} mm, displacement {:.2} -> {:.2} px",
            r.rotation_deg,
            r.translation_m * 1e3,
            r.pre_px,
            r.post_px
        ));
    }
    Outcome::new(pass, parts.join("; "))
}

fn random_pose(r: &mut ChaCha8Rng, angle: f64, offset: f64) -> Pose {
    let axis = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
    let rot = UnitQuaternion::from_scaled_axis(axis.normalize() * r.random_range(0.0..angle));
    let t = Vector3::new(r.random_range(-offset..=offset), r.random_range(-offset..=offset), r.random_range(-offset..=offset));
    Pose::new(rot, t)
}

fn distorted_camera() -> PinholeIntrinsics {
    PinholeIntrinsics {
        k1: -0.12,
        k2: 0.03,
        p1: 1e-3,
        p2: -5e-4,
        ..PinholeIntrinsics::ideal(500.0, 505.0, 480.0, 270.0, 960, 540)
    }
}

fn jacobian_errors(r: &mut ChaCha8Rng) -> [f64; 4] {
    let camera = distorted_camera();
    let lens = PushBroomIntrinsics {
        focal: 1000.0,
        principal: 959.5,
        width: 1920,
        band_count: 4,
    };
    let mut worst = [0.0f64; 4];
    for _ in 0..500 {
        let pose = random_pose(r, 3.0, 5.0);
        let pc = Vector3::new(r.random_range(-0.8..0.8), r.random_range(-0.5..0.5), 1.0) * r.random_range(0.5..20.0);
        let world = pose.apply(&pc);
        let observed = Vector2::new(r.random_range(0.0..960.0), r.random_range(0.0..540.0));
        let pp = pose.to_params();
        let wp = [world.x, world.y, world.z];
        let e = check_jacobian(&ReprojectionCost { camera, observed }, &[Manifold::Pose, Manifold::Euclidean(3)], &[&pp, &wp]).unwrap();
        worst[0] = worst[0].max(e);
        let e = check_jacobian(&FixedPointReprojectionCost { camera, observed, world }, &[Manifold::Pose], &[&pp]).unwrap();
        worst[1] = worst[1].max(e);
        let target = world + Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let e = check_jacobian(&PositionCost { target }, &[Manifold::Pose], &[&pp]).unwrap();
        worst[2] = worst[2].max(e);
        let t_rel = random_pose(r, 0.3, 0.2);
        let point = t_rel.apply(&(Vector3::new(r.random_range(-0.9..0.9), r.random_range(-0.1..0.1), 1.0) * r.random_range(0.5..10.0)));
        let cost = ScanlineCost {
            lens,
            point,
            column: r.random_range(0.0..1920.0),
        };
        let e = check_jacobian(&cost, &[Manifold::Pose], &[&t_rel.to_params()]).unwrap();
        worst[3] = worst[3].max(e);
    }
    worst
}

/// Small bundle adjustment over the first keyframes of a simulated survey,
/// started from perturbed truth.
fn bundle_problem(survey: &Survey, keyframes: u64, r: &mut ChaCha8Rng) -> Problem {
    let map = &survey.bundle.map;
    let truth = survey.truth.trajectory.samples();
    let mut problem = Problem::new();
    let poses: Vec<_> = (0..keyframes)
        .map(|k| problem.add_pose_block(&truth[k as usize].pose.compose(&random_pose(r, 0.01, 0.02))))
        .collect();
    let mut points = std::collections::BTreeMap::new();
    for o in map.observations.iter().filter(|o| o.keyframe < keyframes) {
        let id = *points.entry(o.landmark).or_insert_with(|| {
            let p = survey.truth.landmarks[&o.landmark];
            let b = problem.add_point_block(&(p + Vector3::new(r.random_range(-0.02..0.02), r.random_range(-0.02..0.02), 0.0)));
            problem.set_eliminate(b, true);
            b
        });
        problem
            .add_residual_block(
                Box::new(ReprojectionCost {
                    camera: map.camera,
                    observed: o.pixel,
                }),
                &[poses[o.keyframe as usize], id],
                Some(DMatrix::from_diagonal_element(2, 2, 1.0 / o.sigma)),
                Loss::Huber(2.0),
            )
            .unwrap();
    }
    for k in (0..keyframes).step_by(5) {
        problem
            .add_residual_block(
                Box::new(PositionCost {
                    target: *truth[k as usize].pose.translation(),
                }),
                &[poses[k as usize]],
                Some(DMatrix::from_diagonal_element(3, 3, 1.0 / 0.05)),
                Loss::Trivial,
            )
            .unwrap();
    }
    problem
}

fn pnp_histories(r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let camera = distorted_camera();
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut out = Vec::new();
    for _ in 0..20 {
        let truth = random_pose(r, 0.5, 1.0);
        let obs: Vec<PnpObservation> = (0..40)
            .map(|_| {
                let pc = Vector3::new(r.random_range(-0.7..0.7), r.random_range(-0.4..0.4), 1.0) * r.random_range(2.0..10.0);
                let px = camera.project(&pc).unwrap();
                PnpObservation {
                    world: truth.apply(&pc),
                    pixel: px + Vector2::new(noise.sample(r), noise.sample(r)),
                    sigma: 0.5,
                }
            })
            .collect();
        let init = truth.compose(&random_pose(r, 0.05, 0.1));
        for exec in [Execution::Sequential, Execution::Parallel] {
            let opts = PnpOptions {
                solver: SolverOptions { exec, ..Default::default() },
                ..Default::default()
            };
            out.push(pnp_register(&camera, &obs, &init, &opts).unwrap().1.cost_history);
        }
    }
    out
}

fn refine_histories(r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let lens = PushBroomIntrinsics {
        focal: 1000.0,
        principal: 959.5,
        width: 1920,
        band_count: 1,
    };
    let times: Vec<f64> = (0..300).map(|s| s as f64 / 30.0).collect();
    let traj = Trajectory::new(
        (0..=10)
            .map(|i| TimedPose {
                t: i as f64,
                pose: Pose::new(UnitQuaternion::from_euler_angles(0.01 * i as f64, -0.02, 0.005 * i as f64), Vector3::new(0.1 * i as f64, 0.0, 0.0)),
            })
            .collect(),
    )
    .unwrap();
    let mut out = Vec::new();
    for _ in 0..10 {
        let t_rel = random_pose(r, 0.02, 0.1);
        let corr: Vec<Correspondence> = (0..200)
            .map(|_| {
                let s = r.random_range(0..times.len());
                let u = r.random_range(0..1920u32);
                let pose = traj.interpolate(times[s]).unwrap().compose(&t_rel);
                Correspondence {
                    world: pose.apply(&(lens.ray(u as f64).unwrap() * r.random_range(1.0..3.0))),
                    scanline: s as u32,
                    column: u,
                    score: 1.0,
                }
            })
            .collect();
        let init = t_rel.compose(&random_pose(r, 0.035, 0.05));
        for linear_solver in [LinearSolver::Dense, LinearSolver::Auto] {
            let mut opts = RefineOptions::default();
            opts.solver.linear_solver = linear_solver;
            let (_, report) = refine_extrinsics(&corr, &traj, &times, &lens, &init, &opts).unwrap();
            out.push(report.solve.cost_history);
        }
    }
    out
}

fn numerical_hygiene() -> Outcome {
    let mut r = rng(5);
    let worst = jacobian_errors(&mut r);

    let mut cfg = SimConfig::default();
    cfg.seed = 55;
    cfg.scene.resolution = 0.05;
    cfg.trajectory.duration = 10.0;
    cfg.sensors.uhi_width = 16;
    cfg.sensors.uhi_focal = 8.0;
    cfg.sensors.bands = 1;
    cfg.noise.ins = 0.3;
    let survey = simulate(&cfg);
    let mut histories = Vec::new();
    let mut problem_jacobian = 0.0f64;
    for linear_solver in [LinearSolver::Auto, LinearSolver::Dense] {
        for exec in [Execution::Sequential, Execution::Parallel] {
            let mut problem = bundle_problem(&survey, 20, &mut rng(6));
            problem_jacobian = problem_jacobian.max(problem.check_jacobians().unwrap());
            let opts = SolverOptions {
                linear_solver,
                exec,
                ..Default::default()
            };
            histories.push(solve_lm(&mut problem, &opts).unwrap().cost_history);
        }
    }
    let [lat, lon, alt] = cfg.map.ned_origin;
    for linear_solver in [LinearSolver::Auto, LinearSolver::Dense] {
        let mut opts = GeorefOptions {
            origin: Some((lat, lon, alt)),
            ..Default::default()
        };
        opts.solver.linear_solver = linear_solver;
        let result = georeference_full(&survey.bundle.map, &survey.bundle.fixes, &opts).unwrap();
        histories.push(result.report.bundle.cost_history);
    }
    histories.extend(pnp_histories(&mut r));
    histories.extend(refine_histories(&mut r));
    let monotone = histories.iter().filter(|h| is_monotone_non_increasing(h)).count();
    let jac = worst.iter().copied().fold(problem_jacobian, f64::max);
    Outcome::new(
        jac <= 1e-5 && monotone == histories.len(),
        format!(
            "jacobian error reprojection {:.1e}, fixed point {:.1e}, position {:.1e}, scanline {:.1e}, assembled problem {:.1e}; {monotone}/{} solves monotone",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            problem_jacobian,
            histories.len()
        ),
    )
}

fn geodesy_and_alignment() -> Outcome {
    let mut r = rng(6);
    let mut worst_geo = 0.0f64;
    let a = 6_378_137.0;
    let b = a * (1.0 - 1.0 / 298.257_223_563);
    for (lat, lon, p) in [(0.0, 0.0, Vector3::new(a, 0.0, 0.0)), (90.0, 0.0, Vector3::new(0.0, 0.0, b)), (0.0, 90.0, Vector3::new(0.0, a, 0.0))] {
        worst_geo = worst_geo.max((geodetic_to_ecef(lat, lon, 0.0) - p).norm());
    }
    let mut cases: Vec<(f64, f64, f64)> = vec![(90.0, 0.0, 0.0), (-90.0, 45.0, 100.0), (0.0, 180.0, 0.0), (10.0, -180.0, -50.0), (89.999_999, 179.999_999, 10.0)];
    for _ in 0..20_000 {
        cases.push((r.random_range(-90.0..=90.0), r.random_range(-180.0..=180.0), r.random_range(-1000.0..10_000.0)));
    }
    for &(lat, lon, alt) in &cases {
        let p = geodetic_to_ecef(lat, lon, alt);
        let (la, lo, al) = ecef_to_geodetic(&p);
        worst_geo = worst_geo.max((geodetic_to_ecef(la, lo, al) - p).norm());
        let frame = LocalFrame::new(lat, lon, alt).unwrap();
        let ned = Vector3::new(r.random_range(-5e3..5e3), r.random_range(-5e3..5e3), r.random_range(-500.0..500.0));
        let (la, lo, al) = frame.ned_to_geodetic(&ned);
        worst_geo = worst_geo.max((frame.geodetic_to_ned(la, lo, al) - ned).norm());
    }

    let mut worst_align = 0.0f64;
    for _ in 0..1000 {
        let truth = Similarity {
            scale: r.random_range(0.05..20.0),
            rotation: random_pose(&mut r, std::f64::consts::PI, 0.0).rotation().to_owned(),
            translation: Vector3::new(r.random_range(-1e3..1e3), r.random_range(-1e3..1e3), r.random_range(-1e3..1e3)),
        };
        let n = r.random_range(3..50);
        let src: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(r.random_range(-10.0..10.0), r.random_range(-10.0..10.0), r.random_range(-10.0..10.0)))
            .collect();
        let dst: Vec<Vector3<f64>> = src.iter().map(|p| truth.apply(p)).collect();
        let s = umeyama_align(&src, &dst).unwrap();
        let err = [
            (s.scale - truth.scale).abs() / truth.scale,
            s.rotation.angle_to(&truth.rotation),
            (s.translation - truth.translation).norm() / truth.translation.norm().max(1.0),
        ];
        worst_align = err.iter().copied().fold(worst_align, f64::max);
    }
    Outcome::new(
        worst_geo <= 1e-6 && worst_align <= 1e-9,
        format!(
            "{} geodetic/NED round trips worst {worst_geo:.1e} m; 1000 noiseless alignments worst relative error {worst_align:.1e}",
            cases.len()
        ),
    )
}

fn mutate(seed: &[u8], r: &mut ChaCha8Rng) -> Vec<u8> {
    let mut v = seed.to_vec();
    for _ in 0..r.random_range(1..8) {
        let n = v.len().max(1);
        match r.random_range(0..6) {
            0 if !v.is_empty() => {
                let i = r.random_range(0..v.len());
                v[i] = r.random();
            }
            1 => v.truncate(r.random_range(0..n)),
            2 => {
                let i = r.random_range(0..=v.len());
                let alphabet = b"0123456789 -+.eE\n\r\t#{}=,[]\"nai";
                v.insert(i, alphabet[r.random_range(0..alphabet.len())]);
            }
            3 if !v.is_empty() => {
                let i = r.random_range(0..v.len());
                v.remove(i);
            }
            4 if v.len() >= 8 => {
                let i = r.random_range(0..=v.len() - 8);
                let x: u64 = [0, u64::MAX, 0x7ff0_0000_0000_0000, 0x7ff8_0000_0000_0000, 1 << 31, r.random()][r.random_range(0..6)];
                v[i..i + 8].copy_from_slice(&x.to_le_bytes());
            }
            _ => {
                let i = r.random_range(0..=v.len());
                let j = r.random_range(i..=v.len().min(i + 32));
                let chunk = v[i..j].to_vec();
                v.splice(i..i, chunk);
            }
        }
    }
    v
}

type Reader<'a> = Box<dyn Fn(&mut ChaCha8Rng) -> bool + 'a>;

fn mutated(seed: &[u8], parse: fn(&[u8]) -> bool) -> Reader<'_> {
    Box::new(move |r| parse(&mutate(seed, r)))
}

struct Corpus {
    survey: Survey,
    trajectory: Trajectory,
    correspondences: Vec<Correspondence>,
    cloud: HyperCloud,
    ortho: uhimap::ortho::OrthoImage,
    u16_cube: HyperCube,
}

fn corpus() -> Corpus {
    let mut cfg = SimConfig::default();
    cfg.seed = 77;
    cfg.scene.resolution = 0.05;
    cfg.trajectory.duration = 3.0;
    cfg.sensors.uhi_width = 24;
    cfg.sensors.uhi_focal = 12.0;
    cfg.sensors.bands = 3;
    cfg.map.landmark_density = 20.0;
    let survey = simulate(&cfg);
    let b = &survey.bundle;
    let lens = b.cube.lens.unwrap();
    let bvh = Bvh::build(&b.mesh).unwrap();
    let (cloud, _) = build_hyper_cloud(&b.cube, &survey.truth.trajectory, &b.t_rel, &lens, &bvh, Execution::Sequential).unwrap();
    let ortho = rasterize_cloud(&cloud, 0.02, &[0, 1, 2], None, &RasterOptions::default()).unwrap();
    let mut r = rng(8);
    let correspondences = (0..50)
        .map(|_| Correspondence {
            world: Vector3::new(r.random_range(-10.0..10.0), r.random_range(-10.0..10.0), r.random_range(0.0..10.0)),
            scanline: r.random_range(0..1000),
            column: r.random_range(0..1920),
            score: r.random_range(-1.0..1.0),
        })
        .collect();
    let u16_cube = HyperCube::new(
        5,
        4,
        2,
        CubeData::U16((0..40).map(|_| r.random()).collect()),
        vec![450.0, 650.0],
        vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
    )
    .unwrap();
    Corpus {
        trajectory: survey.truth.trajectory.clone(),
        survey,
        correspondences,
        cloud,
        ortho,
        u16_cube,
    }
}

fn format_robustness() -> Outcome {
    let c = corpus();
    let b = &c.survey.bundle;
    let mut lossless = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            lossless.push(name.to_string());
        }
    };
    let map_text = io::render_sparse_map(&b.map);
    check("map", io::parse_sparse_map(map_text.as_bytes()).ok().as_ref() == Some(&b.map));
    let fixes_text = io::render_fixes(&b.fixes);
    check("fixes", io::parse_fixes(fixes_text.as_bytes()).ok().as_deref() == Some(&b.fixes[..]));
    let traj_text = io::render_trajectory(&c.trajectory);
    check("trajectory", io::parse_trajectory(traj_text.as_bytes()).ok().as_ref() == Some(&c.trajectory));
    let pose_text = io::render_pose(&b.t_rel);
    check("pose", io::parse_pose(pose_text.as_bytes()).ok() == Some(b.t_rel));
    let corr_text = io::render_correspondences(&c.correspondences);
    check("correspondences", io::parse_correspondences(corr_text.as_bytes()).ok().as_deref() == Some(&c.correspondences[..]));
    let ply_ascii = io::encode_ply(&b.mesh, PlyEncoding::Ascii);
    check("ply ascii", io::decode_ply(&ply_ascii).ok().as_ref() == Some(&b.mesh));
    let ply_binary = io::encode_ply(&b.mesh, PlyEncoding::BinaryLittleEndian);
    check("ply binary", io::decode_ply(&ply_binary).ok().as_ref() == Some(&b.mesh));
    let cloud_bytes = io::encode_cloud(&c.cloud);
    check("cloud", io::decode_cloud(&cloud_bytes).ok().as_ref() == Some(&c.cloud));
    let (ch, cd, ct) = io::encode_hypercube(&b.cube);
    check("cube", io::decode_hypercube(ch.as_bytes(), &cd, ct.as_bytes()).ok().as_ref() == Some(&b.cube));
    let (uh, ud, ut) = io::encode_hypercube(&c.u16_cube);
    check("u16 cube", io::decode_hypercube(uh.as_bytes(), &ud, ut.as_bytes()).ok().as_ref() == Some(&c.u16_cube));
    let (oh, od, ow) = io::encode_ortho(&c.ortho);
    check("ortho", io::decode_ortho(oh.as_bytes(), &od, ow.as_bytes()).ok().as_ref() == Some(&c.ortho));
    let manifest = SurveyManifest {
        clock_offset: -0.25,
        ned_origin: Some([63.44, 10.4, 12.0]),
        ..Default::default()
    };
    let manifest_text = toml::to_string(&manifest).unwrap();
    check("manifest", io::parse_manifest(manifest_text.as_bytes()).ok().as_ref() == Some(&manifest));

    let text = mutated;
    let readers: Vec<(&str, usize, Reader)> = vec![
        ("map", map_text.len(), text(map_text.as_bytes(), |x| io::parse_sparse_map(x).is_ok())),
        ("fixes", fixes_text.len(), text(fixes_text.as_bytes(), |x| io::parse_fixes(x).is_ok())),
        ("trajectory", traj_text.len(), text(traj_text.as_bytes(), |x| io::parse_trajectory(x).is_ok())),
        ("pose", pose_text.len(), text(pose_text.as_bytes(), |x| io::parse_pose(x).is_ok())),
        ("correspondences", corr_text.len(), text(corr_text.as_bytes(), |x| io::parse_correspondences(x).is_ok())),
        ("ply ascii", ply_ascii.len(), text(&ply_ascii, |x| io::decode_ply(x).is_ok())),
        ("ply binary", ply_binary.len(), text(&ply_binary, |x| io::decode_ply(x).is_ok())),
        ("cloud", cloud_bytes.len(), text(&cloud_bytes, |x| io::decode_cloud(x).is_ok())),
        ("manifest", manifest_text.len(), text(manifest_text.as_bytes(), |x| io::parse_manifest(x).is_ok())),
        (
            "cube",
            ch.len() + cd.len() + ct.len(),
            Box::new(|r: &mut ChaCha8Rng| {
                let pick = r.random_range(0..4);
                let h = if pick & 1 == 0 { mutate(ch.as_bytes(), r) } else { ch.clone().into_bytes() };
                let d = if pick == 1 { mutate(&cd, r) } else { cd.clone() };
                let t = if pick >= 2 { mutate(ct.as_bytes(), r) } else { ct.clone().into_bytes() };
                io::decode_hypercube(&h, &d, &t).is_ok()
            }),
        ),
        (
            "ortho",
            oh.len() + od.len() + ow.len(),
            Box::new(|r: &mut ChaCha8Rng| {
                let pick = r.random_range(0..4);
                let h = if pick & 1 == 0 { mutate(oh.as_bytes(), r) } else { oh.clone().into_bytes() };
                let d = if pick == 1 { mutate(&od, r) } else { od.clone() };
                let w = if pick >= 2 { mutate(ow.as_bytes(), r) } else { ow.clone().into_bytes() };
                io::decode_ortho(&h, &d, &w).is_ok()
            }),
        ),
    ];

    const CASES: usize = 10_000;
    let mut r = rng(9);
    let mut crashes = Vec::new();
    let mut oversized = Vec::new();
    let mut accepted = 0usize;
    let hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    for (name, size, read) in &readers {
        if *size > 1 << 20 {
            oversized.push(format!("{name} {size} B"));
        }
        let mut crashed = 0;
        for _ in 0..CASES {
            match panic::catch_unwind(AssertUnwindSafe(|| read(&mut r))) {
                Ok(ok) => accepted += ok as usize,
                Err(_) => crashed += 1,
            }
        }
        let noise: Vec<u8> = (0..r.random_range(0..4096)).map(|_| r.random()).collect();
        let all = panic::catch_unwind(|| {
            let _ = io::parse_sparse_map(&noise);
            let _ = io::parse_fixes(&noise);
            let _ = io::parse_trajectory(&noise);
            let _ = io::parse_pose(&noise);
            let _ = io::parse_correspondences(&noise);
            let _ = io::decode_ply(&noise);
            let _ = io::decode_cloud(&noise);
            let _ = io::decode_hypercube(&noise, &noise, &noise);
            let _ = io::decode_ortho(&noise, &noise, &noise);
            let _ = io::parse_manifest(&noise);
        });
        crashed += all.is_err() as usize;
        if crashed > 0 {
            crashes.push(format!("{name}: {crashed}"));
        }
    }
    panic::set_hook(hook);
    let pass = crashes.is_empty() && lossless.is_empty() && oversized.is_empty();
    Outcome::new(
        pass,
        format!(
            "{} formats x {CASES} mutated inputs, {accepted} accepted, crashes [{}]; 12 round trips, lossy [{}]{}",
            readers.len(),
            crashes.join(", "),
            lossless.join(", "),
            if oversized.is_empty() { String::new() } else { format!("; oversized seeds [{}]", oversized.join(", ")) }
        ),
    )
}

fn long_transect() -> Outcome {
    let mut cfg = SimConfig::default();
    cfg.seed = 801;
    cfg.scene.resolution = 0.02;
    cfg.scene.texture = TextureSpec::Noise { scale: 0.3 };
    cfg.trajectory.duration = 120.0;
    cfg.trajectory.speed = 0.85;
    cfg.trajectory.altitude = 2.0;
    cfg.trajectory.altitude_sway = [0.3, 13.0];
    cfg.noise.ins = 0.05;
    let survey = simulate(&cfg);
    let summary = survey.summary();
    let truth = survey.truth.trajectory.samples();
    let length = (truth.last().unwrap().pose.translation() - truth[0].pose.translation()).norm();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_bundle(&survey, &dir.path().join("bundle"));
    drop(survey);
    let mut args = PipelineArgs::new(manifest, dir.path().join("out"));
    args.gsd = 0.03;
    let start = Instant::now();
    let result = run_pipeline(&args, Execution::Parallel);
    let elapsed = start.elapsed().as_secs_f64();
    let sizes = format!(
        "{length:.1} m, {} keyframes, {} scanlines, pipeline {elapsed:.1} s",
        summary.keyframes, summary.scanlines
    );
    match result {
        Ok(report) => {
            let pre = report.summary.real_value("pre_refinement_displacement_px").unwrap_or(f64::NAN);
            let post = report.summary.real_value("post_refinement_displacement_px").unwrap_or(f64::NAN);
            let pass = length >= 100.0 && summary.keyframes >= 2500 && summary.scanlines >= 3000 && elapsed < 600.0;
            Outcome::new(pass, format!("{sizes}, displacement {pre:.2} -> {post:.2} px"))
        }
        Err(e) => Outcome::new(false, format!("{sizes}, failed: {e}")),
    }
}

fn raycast_throughput() -> Outcome {
    let mesh = egg_crate(224);
    let bvh = Bvh::build(&mesh).unwrap();
    let lens = PushBroomIntrinsics {
        focal: 1000.0,
        principal: 959.5,
        width: 1920,
        band_count: 1,
    };
    // line along north, moving east one millimeter per scanline
    let rays: Vec<Vector3<f64>> = (0..lens.width).map(|u| lens.ray(u as f64).unwrap()).collect();
    let lines = 1000;
    let mut best = 0.0f64;
    let mut hits = 0;
    for _ in 0..3 {
        hits = 0;
        let start = Instant::now();
        for s in 0..lines {
            let o = Vector3::new(1.12, 0.6 + s as f64 * 1e-3, 4.0);
            for d in &rays {
                hits += bvh.intersect(&o, d).is_some() as usize;
            }
        }
        best = best.max((lines * rays.len()) as f64 / start.elapsed().as_secs_f64());
    }
    let total = lines * rays.len();
    Outcome::new(
        best >= 1e6 && hits == total,
        format!("{:.2} M rays/s on {} faces, {hits}/{total} hits", best / 1e6, mesh.num_faces()),
    )
}

const CHECKS: [(&str, &str, Check); 9] = [
    ("1", "zero-noise end-to-end fixed point", zero_noise_fixed_point),
    ("2", "noisy geo-referencing over 10 seeds", noisy_georeferencing),
    ("3", "raycast oracle equivalence", raycast_oracles),
    ("4", "extrinsic refinement", extrinsic_refinement),
    ("5", "numerical hygiene", numerical_hygiene),
    ("6", "geodesy round trips and alignment", geodesy_and_alignment),
    ("7", "format robustness", format_robustness),
    ("8", "long transect", long_transect),
    ("9", "raycast throughput", raycast_throughput),
];

fn main() -> ExitCode {
    let selected: BTreeSet<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, check) in CHECKS {
        if !selected.is_empty() && !selected.contains(id) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        failed += !outcome.pass as usize;
        println!(
            "{} [{id}] {name}: {} ({:.1} s)",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance check(s) failed");
        ExitCode::FAILURE
    }
}
