//! Checks shared by the integration suites and the acceptance target. Each
//! returns `Err(reason)` instead of panicking so the acceptance runner can
//! report it.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use apc::clients::oracle::{cube_bounds, oracle_suite, OracleOptions, OracleScene, TruthObject};
use apc::clients::refine::{build_grid, DEFAULT_THRESHOLD, DEFAULT_TOP_K, GRID_CELL, GRID_GUTTER};
use apc::clients::{
    refine_detection, Caches, ClientError, Clients, DepthEstimator, Detector, OrientationEstimator, RawDepth,
    RefineSettings, ReplayStore, ScoredBox, ScriptedVlm, Segmenter, Session,
};
use apc::eval::{circular_eval, exact_match, permutations, Match, Verdict};
use apc::geometry::{transform_scene, viewer_frame, PixelMask};
use apc::pipeline::{build_abstraction, Mode, PipelineConfig, PipelineError};
use apc::prompt::{
    numerical_prompt, objects_prompt, perspective_prompt, rephrase_prompt, visual_prompt, NumericalOptions, Task,
};
use apc::render::{assign_colors, normalize_layout, render_cubes, visible_set, ColorName, RenderSettings};
use apc::runner::{run_benchmark, run_to_dir, Backend, RunManifest, RunOptions, RunOutput, MANIFEST_FILE, RESULTS_FILE};
use apc::synth::{gen_task, probe_sweep, BenchmarkItem};
use apc::{CameraModel, Frame, ObjectAbstraction, PixelRect, RgbImage, SceneAbstraction, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check<T = ()> = Result<T, String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

// ---------------------------------------------------------------- pipeline runs

pub fn oracle_run(items: &[BenchmarkItem], mode: Mode, options: OracleOptions) -> Check<RunOutput> {
    let opts = RunOptions {
        pipeline: PipelineConfig::with_mode(mode),
        jobs: jobs(),
        ..RunOptions::default()
    };
    run_benchmark(items, &Backend::Oracle(options), &opts).map_err(|e| e.to_string())
}

/// Every item correct under CircularEval, with no failures.
pub fn perfect(output: &RunOutput, what: &str) -> Check<usize> {
    let records = output.records();
    let wrong: Vec<&str> = records
        .iter()
        .filter(|r| r.circular != Verdict::Correct)
        .map(|r| r.id.as_str())
        .collect();
    ensure(wrong.is_empty(), || {
        format!("{what}: {} of {} items wrong, first {:?}", wrong.len(), records.len(), &wrong[..wrong.len().min(5)])
    })?;
    ensure(output.failures() == 0, || format!("{what}: {} failed items", output.failures()))?;
    Ok(records.len())
}

/// Shape of the angle curve for the camera-frame answerer on the left/right
/// probe, and a flat curve for the full pipeline.
pub fn fig5_shape(seed: u64) -> Check<String> {
    let items = probe_sweep(Task::LeftRight, seed);
    ensure(items.len() == 1200, || format!("probe has {} items", items.len()))?;

    let ego = oracle_run(
        &items,
        Mode::Direct,
        OracleOptions {
            egocentric: true,
            ..OracleOptions::default()
        },
    )?;
    let report = ego.report().ok_or("empty egocentric report")?;
    ensure(report.buckets.len() == 20 && report.buckets.iter().all(|b| b.count == 60), || {
        format!("expected 20 buckets of 60, got {:?}", report.buckets.iter().map(|b| b.count).collect::<Vec<_>>())
    })?;
    let at = |t: f64| report.bucket(t).map(|b| b.accuracy);
    ensure(at(0.0) == Some(1.0), || format!("egocentric accuracy at 0 is {:?}", at(0.0)))?;
    ensure(at(180.0) == Some(0.0), || format!("egocentric accuracy at 180 is {:?}", at(180.0)))?;

    // fold +-theta together and walk outwards from 0
    let mut by_abs: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for b in &report.buckets {
        let slot = by_abs.entry(b.theta_bucket.abs().round() as i64).or_default();
        slot.0 += b.accuracy * b.count as f64;
        slot.1 += b.count;
    }
    let curve: Vec<(i64, f64)> = by_abs.into_iter().map(|(k, (c, n))| (k, c / n as f64)).collect();
    let rises = curve.windows(2).filter(|w| w[1].1 > w[0].1 + 1e-12).count();
    ensure(rises <= 1, || format!("egocentric curve rises {rises} times: {curve:?}"))?;

    let full = oracle_run(&items, Mode::Visual, OracleOptions::default())?;
    let full_report = full.report().ok_or("empty pipeline report")?;
    let flat = full_report.buckets.iter().all(|b| b.accuracy == 1.0);
    ensure(flat && full.failures() == 0, || {
        format!(
            "pipeline curve not flat at 1.0: {:?}",
            full_report.buckets.iter().map(|b| (b.theta_bucket, b.accuracy)).collect::<Vec<_>>()
        )
    })?;
    let shape: Vec<String> = curve.iter().map(|(k, a)| format!("{k}:{a:.2}")).collect();
    Ok(format!("egocentric |theta| curve {}", shape.join(" ")))
}

// ---------------------------------------------------------------- geometry

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        // stay clear of the up axis so the primary frame is used
        if n > 0.2 && n <= 1.0 && (v.y / n).abs() < 0.98 {
            return v / n;
        }
    }
}

pub fn random_camera_scene(rng: &mut ChaCha8Rng) -> SceneAbstraction {
    let n = rng.random_range(2..=7);
    let mut objects: Vec<ObjectAbstraction> = (0..n)
        .map(|i| {
            let p = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-2.0..2.0), rng.random_range(-5.0..10.0));
            ObjectAbstraction::new(format!("obj{i}"), p, random_unit(rng))
        })
        .collect();
    objects.push(ObjectAbstraction::camera());
    SceneAbstraction::new(objects, Frame::CameraEgocentric).expect("random scene is valid")
}

/// Distances, reference placement and the inverse round trip on random
/// scenes. Returns the worst deviation seen.
pub fn rigid_suite(trials: usize, seed: u64) -> Check<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let scene = random_camera_scene(&mut rng);
        let k = rng.random_range(0..scene.len() - 1);
        let reference = scene.objects()[k].clone();
        let viewed = transform_scene(&scene, &reference.label).map_err(|e| format!("trial {t}: {e}"))?;
        ensure(viewed.frame() == &Frame::ViewerEgocentric(reference.label.clone()), || {
            format!("trial {t}: wrong frame")
        })?;

        let a = scene.objects();
        let b = viewed.objects();
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                let d0 = (a[i].position - a[j].position).norm();
                let d1 = (b[i].position - b[j].position).norm();
                worst = worst.max((d0 - d1).abs());
            }
        }
        let r = viewed.object(&reference.label).unwrap();
        worst = worst.max(r.position.norm()).max((r.orientation - Vec3::z()).norm());

        let frame = viewer_frame(&reference.position, &reference.orientation, &Vec3::y()).map_err(|e| e.to_string())?;
        let rot = frame.rotation();
        worst = worst
            .max((rot.transpose() * rot - nalgebra::Matrix3::identity()).amax())
            .max((rot.determinant() - 1.0).abs());
        // the reference also lands on the origin when mapped like any other point
        worst = worst
            .max(frame.apply_point(&reference.position).norm())
            .max((frame.apply_direction(&reference.orientation) - Vec3::z()).norm());

        let back = frame.inverse();
        for (orig, moved) in a.iter().zip(b) {
            if orig.label == reference.label {
                continue;
            }
            worst = worst
                .max((back.apply_point(&moved.position) - orig.position).norm())
                .max((back.apply_direction(&moved.orientation) - orig.orientation).norm());
        }
        ensure(worst <= 1e-9, || format!("trial {t}: deviation {worst:e}"))?;
    }
    Ok(worst)
}

// ---------------------------------------------------------------- renderer

pub fn random_viewer_scene(rng: &mut ChaCha8Rng) -> SceneAbstraction {
    loop {
        let n = rng.random_range(1..=9);
        let mut objects = vec![ObjectAbstraction::new("viewer", Vec3::zeros(), Vec3::z())];
        for i in 0..n {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let x = side * rng.random_range(0.02..3.0);
            let p = Vec3::new(x, rng.random_range(-1.0..1.0), rng.random_range(-3.0..6.0));
            objects.push(ObjectAbstraction::new(format!("obj{i}"), p, random_unit(rng)));
        }
        let mut cam = ObjectAbstraction::camera();
        cam.position = Vec3::new(rng.random_range(-2.0..2.0), 0.0, rng.random_range(-4.0..4.0));
        cam.orientation = random_unit(rng);
        objects.push(cam);
        if objects.iter().any(|o| !o.is_camera && o.label != "viewer" && o.position.z > 0.0) {
            return SceneAbstraction::new(objects, Frame::ViewerEgocentric("viewer".into())).expect("valid scene");
        }
    }
}

/// Independent pinhole model: principal point at the image center, focal
/// length from the vertical field of view.
fn pinhole(settings: &RenderSettings, p: &Vec3) -> (f64, f64) {
    let f = (settings.height as f64 / 2.0) / (settings.vfov_deg.to_radians() / 2.0).tan();
    (
        settings.width as f64 / 2.0 + f * p.x / p.z,
        settings.height as f64 / 2.0 - f * p.y / p.z,
    )
}

pub fn renderer_suite(scenes: usize, seed: u64) -> Check<String> {
    let settings = RenderSettings::default();
    let camera = settings.camera();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_px = 0.0f64;
    let mut probed = 0usize;
    for s in 0..scenes {
        let scene = random_viewer_scene(&mut rng);
        let fail = |m: String| format!("scene {s}: {m}");
        let colors = assign_colors(&scene).map_err(|e| fail(e.to_string()))?;
        let normalized = normalize_layout(&scene, &settings).map_err(|e| fail(e.to_string()))?;
        let out = render_cubes(&normalized, &colors, &settings).map_err(|e| fail(e.to_string()))?;
        let visible = visible_set(&scene).map_err(|e| fail(e.to_string()))?;

        let rendered: Vec<&str> = out.rendered.iter().map(|r| r.label.as_str()).collect();
        ensure(rendered.len() == visible.len(), || fail(format!("{} rendered, {} visible", rendered.len(), visible.len())))?;
        ensure(rendered.iter().all(|l| visible.iter().any(|v| v == l)), || fail("rendered label not visible".into()))?;

        let rgbs: Vec<[u8; 3]> = rendered.iter().map(|l| colors.get(l).expect("coloured").rgb()).collect();
        let unique: HashSet<[u8; 3]> = rgbs.iter().copied().collect();
        ensure(unique.len() == rgbs.len(), || fail("two labels share a colour".into()))?;
        let allowed: HashSet<ColorName> = rendered.iter().map(|l| colors.get(l).unwrap()).collect();
        for (_, _, c) in out.image.pixels() {
            if c == settings.background {
                continue;
            }
            match ColorName::from_shade(c) {
                Some(name) if allowed.contains(&name) => {}
                _ => return Err(fail(format!("pixel colour {c:?} belongs to no rendered cube"))),
            }
        }

        for r in &out.rendered {
            let before = scene.object(&r.label).unwrap().position;
            let after = normalized.object(&r.label).unwrap().position;
            let (u, v) = pinhole(&settings, &after);
            let err = (r.centroid[0] - u).hypot(r.centroid[1] - v);
            worst_px = worst_px.max(err);
            ensure(err <= 2.0, || fail(format!("{} centroid off by {err:.2} px", r.label)))?;
            let side = r.centroid[0] - settings.width as f64 / 2.0;
            ensure(side.signum() == before.x.signum(), || {
                fail(format!("{} at x={:.3} drawn at u-offset {side:.2}", r.label, before.x))
            })?;

            // unoccluded cubes must show one of their shades at the centroid
            let mine = cube_bounds(&camera, &after, settings.cube_edge);
            let covered = out.rendered.iter().filter(|o| o.label != r.label).any(|o| {
                let p = normalized.object(&o.label).unwrap().position;
                p.z < after.z
                    && matches!((cube_bounds(&camera, &p, settings.cube_edge), mine), (Some(a), Some(b)) if a.intersection(&b).is_some())
            });
            let (pu, pv) = (r.centroid[0].floor(), r.centroid[1].floor());
            if !covered && pu >= 0.0 && pv >= 0.0 && pu < settings.width as f64 && pv < settings.height as f64 {
                probed += 1;
                let c = out.image.get(pu as u32, pv as u32);
                ensure(colors.get(&r.label).unwrap().shades().contains(&c), || {
                    fail(format!("{} centroid pixel shows {c:?}", r.label))
                })?;
            }
        }

        let again = render_cubes(&normalize_layout(&scene.clone(), &settings).unwrap(), &colors, &settings).unwrap();
        ensure(again.image.digest() == out.image.digest(), || fail("render is not deterministic".into()))?;
    }
    Ok(format!("worst centroid error {worst_px:.2e} px, {probed} centroid pixels probed"))
}

// ---------------------------------------------------------------- abstraction

/// Oracle round trip on synthetic scenes drawn from all four tasks.
/// Returns the worst position error relative to object distance.
pub fn abstraction_accuracy(scenes: usize, seed: u64) -> Check<f64> {
    let pools: Vec<Vec<BenchmarkItem>> = [Task::LeftRight, Task::Closer, Task::Visibility, Task::Facing]
        .into_iter()
        .map(|t| gen_task(t, seed))
        .collect();
    let config = PipelineConfig::default();
    let mut worst = 0.0f64;
    for k in 0..scenes {
        let pool = &pools[k % pools.len()];
        let item = &pool[(k / pools.len() * 7) % pool.len()];
        let synthetic = item.scene.as_ref().ok_or("synthetic item without scene")?;
        let oracle = Arc::new(synthetic.oracle_scene().map_err(|e| e.to_string())?);
        let clients = oracle_suite(oracle.clone(), OracleOptions::default());
        let caches = Caches::default();
        let mut session = Session::live(&clients, &caches);
        let labels: Vec<String> = synthetic.objects.iter().map(|o| o.label.clone()).collect();
        let scene = build_abstraction(&mut session, &oracle.image(), oracle.camera(), &labels, &config)
            .map_err(|e| format!("{}: {e}", item.id))?;
        ensure(scene.len() == labels.len() + 1 && scene.camera().is_camera, || {
            format!("{}: expected {} objects plus the camera", item.id, labels.len())
        })?;
        for truth in synthetic.truth_objects() {
            let got = scene.object(&truth.label).ok_or_else(|| format!("{}: {} missing", item.id, truth.label))?;
            let rel = (got.position - truth.position).norm() / truth.position.norm();
            worst = worst.max(rel);
            ensure(rel <= 0.02, || format!("{}: {} off by {:.2}%", item.id, truth.label, rel * 100.0))?;
            let dir = (got.orientation - truth.orientation.normalize()).norm();
            ensure(dir <= 1e-6, || format!("{}: {} orientation off by {dir:e}", item.id, truth.label))?;
        }
    }
    Ok(worst)
}

/// A cube hidden directly behind another one: detected (its box is
/// geometric) but with no visible pixel.
pub fn occluded_scene() -> OracleScene {
    let camera = CameraModel::from_vertical_fov(200, 200, 60.0).unwrap();
    let cube = |label: &str, z: f64| TruthObject {
        label: label.into(),
        position: Vec3::new(0.0, 0.0, z),
        orientation: -Vec3::z(),
        edge: 0.3,
    };
    OracleScene::new(camera, vec![cube("mug", 2.0), cube("lamp", 4.0)])
}

pub fn mask_empty_fixture() -> Check {
    let oracle = Arc::new(occluded_scene());
    let clients = oracle_suite(oracle.clone(), OracleOptions::default());
    let caches = Caches::default();
    let mut session = Session::live(&clients, &caches);
    let labels = vec!["mug".to_string(), "lamp".to_string()];
    match build_abstraction(&mut session, &oracle.image(), oracle.camera(), &labels, &PipelineConfig::default()) {
        Err(PipelineError::MaskEmpty(l)) if l == "lamp" => Ok(()),
        other => Err(format!("expected MaskEmpty(lamp), got {other:?}")),
    }
}

/// Services that see one box at the image center at a fixed depth.
pub struct FlatWorld {
    pub depth_m: f32,
}

impl Detector for FlatWorld {
    fn detect(&self, _: &RgbImage, label: &str) -> Result<Vec<ScoredBox>, ClientError> {
        Ok(vec![ScoredBox {
            rect: PixelRect::new(40.0, 40.0, 60.0, 60.0),
            confidence: 0.9,
            label: label.into(),
        }])
    }
}

impl Segmenter for FlatWorld {
    fn segment(&self, _: &RgbImage, rect: &PixelRect) -> Result<PixelMask, ClientError> {
        let mut px = Vec::new();
        for v in rect.y0 as u32..rect.y1 as u32 {
            for u in rect.x0 as u32..rect.x1 as u32 {
                px.push((u, v));
            }
        }
        Ok(PixelMask::new(px))
    }
}

impl DepthEstimator for FlatWorld {
    fn depth(&self, image: &RgbImage) -> Result<RawDepth, ClientError> {
        Ok(RawDepth {
            width: image.width(),
            height: image.height(),
            values: vec![self.depth_m; (image.width() * image.height()) as usize],
        })
    }
}

impl OrientationEstimator for FlatWorld {
    fn orient(&self, _: &RgbImage) -> Result<Vec3, ClientError> {
        Ok(-Vec3::z())
    }
}

pub fn flat_clients(depth_m: f32, vlm: Arc<ScriptedVlm>) -> Clients {
    let w = Arc::new(FlatWorld { depth_m });
    Clients {
        vlm,
        judge: Arc::new(ScriptedVlm::new(["no"])),
        detector: w.clone(),
        segmenter: w.clone(),
        depth: w.clone(),
        orient: w,
    }
}

/// 2 cm away the whole mask falls in the first 5 cm depth bin, whose center
/// (2.5 cm) puts every point outside the +-10% window.
pub fn all_filtered_fixture() -> Check {
    let clients = flat_clients(0.02, Arc::new(ScriptedVlm::new(["unused"])));
    let caches = Caches::default();
    let mut session = Session::live(&clients, &caches);
    let camera = CameraModel::from_vertical_fov(100, 100, 60.0).unwrap();
    let image = RgbImage::new(100, 100, [255, 255, 255]);
    match build_abstraction(&mut session, &image, &camera, &["mug".to_string()], &PipelineConfig::default()) {
        Err(PipelineError::AllFiltered { label, .. }) if label == "mug" => Ok(()),
        other => Err(format!("expected AllFiltered(mug), got {other:?}")),
    }
}

// ---------------------------------------------------------------- eval

pub fn circular_exhaustive() -> Check<usize> {
    let mut cases = 0;
    for n in 1..=4usize {
        for bits in 0..(1u32 << n) {
            let verdicts: Vec<Verdict> = (0..n)
                .map(|i| if bits >> i & 1 == 1 { Verdict::Correct } else { Verdict::Incorrect })
                .collect();
            let expected = if verdicts.iter().fold(true, |acc, v| acc && *v == Verdict::Correct) {
                Verdict::Correct
            } else {
                Verdict::Incorrect
            };
            ensure(circular_eval(&verdicts) == expected, || format!("circular_eval({verdicts:?})"))?;
            cases += 1;
        }
    }
    Ok(cases)
}

/// (response, options, answer index, expected)
pub fn exact_match_table() -> Vec<(&'static str, Vec<String>, usize, Match)> {
    let lr = || vec!["left".to_string(), "right".to_string()];
    let three = || vec!["mug".to_string(), "lamp".to_string(), "toy duck".to_string()];
    vec![
        ("left", lr(), 0, Match::Correct),
        ("B", lr(), 0, Match::Incorrect),
        ("The object is to the left.", lr(), 0, Match::Undecided),
        ("A", lr(), 0, Match::Correct),
        ("2", lr(), 1, Match::Correct),
        ("  Right. ", lr(), 1, Match::Correct),
        ("right", lr(), 0, Match::Incorrect),
        ("Toy Duck", three(), 2, Match::Correct),
        ("", lr(), 0, Match::Undecided),
    ]
}

pub fn eval_suite() -> Check<String> {
    let combos = circular_exhaustive()?;
    let table = exact_match_table();
    for (response, options, answer, expected) in &table {
        let got = exact_match(response, options, *answer);
        ensure(got == *expected, || format!("exact_match({response:?}, {options:?}, {answer}) = {got:?}"))?;
    }
    for n in 2..=4usize {
        let opts: Vec<usize> = (0..n).collect();
        let perms = permutations(&opts).map_err(|e| e.to_string())?;
        let expected: Vec<Vec<usize>> = (0..n).map(|k| (0..n).map(|i| (i + k) % n).collect()).collect();
        ensure(perms == expected, || format!("permutations of {n}: {perms:?}"))?;
    }
    Ok(format!("{combos} verdict combinations, {} exact-match cases", table.len()))
}

// ---------------------------------------------------------------- templates

pub const ANCHORS: [&str; 4] = [
    "++camera++",
    "[Detect]",
    "The x-axis is to the right, the y-axis is up, and the z-axis is forward.",
    "Please only return the answer.",
];

pub fn golden_inputs() -> Vec<(&'static str, String)> {
    let scene = SceneAbstraction::new(
        vec![
            ObjectAbstraction::new("car", Vec3::zeros(), Vec3::z()),
            ObjectAbstraction::new("tree", Vec3::new(1.0, 0.0, 2.0), Vec3::x()),
            ObjectAbstraction::new("person", Vec3::new(-0.5, 0.25, 3.126), -Vec3::z()),
            ObjectAbstraction {
                position: Vec3::new(0.0, 0.0, -4.0),
                ..ObjectAbstraction::camera()
            },
        ],
        Frame::ViewerEgocentric("car".into()),
    )
    .expect("valid scene");
    vec![
        ("objects", objects_prompt("From the woman's perspective, is the tree on the left or right?")),
        (
            "perspective",
            perspective_prompt(
                "From the woman's perspective, is the tree on the left or right?",
                &["woman".to_string(), "tree".to_string()],
            ),
        ),
        ("rephrase", rephrase_prompt("From the car's perspective, which is on the right side: the person or the tree?")),
        ("visual", visual_prompt("Which is on the right side: the red box or the green box?")),
        (
            "numerical",
            numerical_prompt(&scene, "Which is on the right side: the person or the tree?", NumericalOptions::default())
                .expect("viewer-frame scene"),
        ),
    ]
}

pub fn template_goldens() -> Check<String> {
    let mut joined = String::new();
    for (name, text) in golden_inputs() {
        let path = golden_dir().join(format!("{name}.txt"));
        let golden = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(golden == text, || {
            let at = golden.bytes().zip(text.bytes()).take_while(|(a, b)| a == b).count();
            format!("{name} differs from its golden file at byte {at}")
        })?;
        joined.push_str(&golden);
    }
    for a in ANCHORS {
        ensure(joined.contains(a), || format!("anchor {a:?} missing"))?;
    }
    Ok("5 prompts byte-identical".into())
}

// ---------------------------------------------------------------- refinement

pub const CELL_COLORS: [[u8; 3]; 8] = [
    [200, 0, 0],
    [0, 200, 0],
    [0, 0, 200],
    [200, 200, 0],
    [0, 200, 200],
    [200, 0, 200],
    [90, 90, 90],
    [10, 120, 60],
];

/// Eight candidates in scrambled order, each a uniformly coloured square.
pub fn refine_candidates() -> (RgbImage, Vec<ScoredBox>) {
    let confidences = [0.3, 0.9, 0.1, 0.7, 0.5, 0.8, 0.6, 0.12];
    let mut image = RgbImage::new(400, 60, [255, 255, 255]);
    let mut boxes = Vec::new();
    for (i, c) in confidences.iter().enumerate() {
        let x0 = i as u32 * 50;
        image.fill_rect(x0 + 5, 10, 40, 40, CELL_COLORS[i]);
        boxes.push(ScoredBox {
            rect: PixelRect::new(x0 as f64 + 5.0, 10.0, x0 as f64 + 45.0, 50.0),
            confidence: *c,
            label: "mug".into(),
        });
    }
    (image, boxes)
}

fn refine_with(reply: &str, image: &RgbImage, candidates: &[ScoredBox]) -> (Result<ScoredBox, ClientError>, Arc<ScriptedVlm>) {
    let vlm = Arc::new(ScriptedVlm::new([reply]));
    let clients = flat_clients(1.0, vlm.clone());
    let caches = Caches::default();
    let mut session = Session::live(&clients, &caches);
    let out = refine_detection(&mut session, image, "mug", candidates, &RefineSettings::default());
    (out, vlm)
}

pub fn refinement_suite() -> Check<String> {
    let d = RefineSettings::default();
    ensure(d.threshold == 0.15 && d.top_k == 5, || format!("defaults are {d:?}"))?;
    ensure(DEFAULT_THRESHOLD == 0.15 && DEFAULT_TOP_K == 5, || "default constants changed".into())?;

    let (image, candidates) = refine_candidates();
    let (picked, vlm) = refine_with("3", &image, &candidates);
    let picked = picked.map_err(|e| e.to_string())?;
    // survivors by confidence: 0.9, 0.8, 0.7, 0.6, 0.5 (0.3 is cut by top-k)
    ensure(picked.confidence == 0.7 && picked.rect == candidates[3].rect, || {
        format!("picked {picked:?}, expected the 0.7 candidate")
    })?;
    let requests = vlm.requests();
    ensure(requests.len() == 1, || format!("{} VLM calls for five crops", requests.len()))?;
    let grid = requests[0].images().next().ok_or("refinement request carries no image")?;
    ensure(grid.width() == 5 * GRID_CELL + 6 * GRID_GUTTER, || format!("grid is {} px wide", grid.width()))?;
    ensure(requests[0].text().contains("5 numbered crops"), || "prompt does not state the crop count".into())?;
    // third cell shows the third survivor's colour
    let x = GRID_GUTTER + 2 * (GRID_CELL + GRID_GUTTER) + GRID_CELL / 2;
    let y = grid.height() - GRID_GUTTER - GRID_CELL / 2;
    ensure(grid.get(x, y) == CELL_COLORS[3], || format!("cell 3 shows {:?}", grid.get(x, y)))?;
    let expected_grid = build_grid(&image, &[1, 5, 3, 6, 4].map(|i| candidates[i].rect)).map_err(|e| e.to_string())?;
    ensure(grid == &expected_grid, || "grid does not tile the survivors in confidence order".into())?;

    let single = [ScoredBox {
        confidence: 0.9,
        ..candidates[0].clone()
    }];
    let (one, vlm) = refine_with("3", &image, &single);
    ensure(one.as_ref().map(|b| b.confidence) == Ok(0.9), || format!("single survivor gave {one:?}"))?;
    ensure(vlm.requests().is_empty(), || "single survivor still queried the VLM".into())?;

    let weak: Vec<ScoredBox> = [0.10, 0.12]
        .iter()
        .map(|c| ScoredBox {
            confidence: *c,
            ..candidates[0].clone()
        })
        .collect();
    let (none, vlm) = refine_with("1", &image, &weak);
    ensure(matches!(none, Err(ClientError::NoDetection(_))), || format!("weak candidates gave {none:?}"))?;
    ensure(vlm.requests().is_empty(), || "NoDetection path queried the VLM".into())?;

    let edge = [0.15, 0.15].map(|c| ScoredBox {
        confidence: c,
        ..candidates[0].clone()
    });
    let (at_threshold, _) = refine_with("1", &image, &edge);
    ensure(matches!(at_threshold, Err(ClientError::NoDetection(_))), || "confidence equal to s survived".into())?;
    Ok("index 3 of 5, short-circuit and threshold cases".into())
}

// ---------------------------------------------------------------- determinism

pub fn determinism_items(seed: u64) -> Vec<BenchmarkItem> {
    let mut items: Vec<BenchmarkItem> = gen_task(Task::LeftRight, seed).into_iter().take(6).collect();
    items.extend(gen_task(Task::Visibility, seed).into_iter().take(4));
    items.extend(gen_task(Task::Facing, seed).into_iter().take(3));
    items
}

fn read(path: &Path) -> Check<Vec<u8>> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Record one run, replay it twice, and compare the files byte for byte.
pub fn determinism(root: &Path, seed: u64) -> Check<String> {
    let items = determinism_items(seed);
    let pipeline = PipelineConfig::with_mode(Mode::Visual);
    let options = || RunOptions {
        pipeline: pipeline.clone(),
        jobs: jobs(),
        ..RunOptions::default()
    };
    let live = Backend::Oracle(OracleOptions::default());
    let recorded_dir = root.join("recorded");
    run_to_dir(&recorded_dir, &items, &live, options(), RunManifest::new("run", live.name(), seed, jobs(), pipeline.clone()), None)
        .map_err(|e| e.to_string())?;
    let recorded = RunManifest::load(&recorded_dir.join(MANIFEST_FILE)).map_err(|e| e.to_string())?;

    let mut outputs = Vec::new();
    for name in ["replay-a", "replay-b"] {
        let store = ReplayStore::load_dir(&recorded_dir).map_err(|e| e.to_string())?;
        let backend = Backend::Replay(Arc::new(store));
        let dir = root.join(name);
        let manifest = RunManifest::new("run", backend.name(), seed, jobs(), pipeline.clone());
        let out = run_to_dir(&dir, &items, &backend, options(), manifest, Some(&recorded)).map_err(|e| e.to_string())?;
        ensure(out.failures() == 0, || format!("{name}: {} replayed items failed", out.failures()))?;
        outputs.push(dir);
    }
    let results = |d: &Path| read(&d.join(RESULTS_FILE));
    let manifest = |d: &Path| read(&d.join(MANIFEST_FILE));
    ensure(results(&outputs[0])? == results(&outputs[1])?, || "replayed results differ".into())?;
    ensure(manifest(&outputs[0])? == manifest(&outputs[1])?, || "replayed manifests differ".into())?;
    ensure(results(&recorded_dir)? == results(&outputs[0])?, || "replay differs from the recorded run".into())?;
    RunManifest::load(&outputs[0].join(MANIFEST_FILE))
        .and_then(|m| m.validate())
        .map_err(|e| e.to_string())?;
    Ok(format!("{} items, results and manifests byte-identical", items.len()))
}
