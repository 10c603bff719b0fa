use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use congeal::dataio::{read_field, read_json, read_mask, read_ppm, write_json, write_ppm, Manifest, PointSet};
use congeal::eval::{pck, procrustes_align, PckConfig, PoseReport};
use congeal::field::VoxelField;
use congeal::geometry::CameraPose;
use congeal::pipeline::{
    align_all, build_report, export_candidates, import_candidates, load_context, poses_for, read_poses, write_dataset,
    write_outputs, AlignConfig, ImageInput, Stages, SynthJob,
};
use congeal::pose_fit::CandidateBank;
use congeal::raster::tight_bbox;
use congeal::synth::SynthSpec;
use congeal::warp::{transfer_keypoint, transfer_pixels, MappingContext};
use log::info;
use serde::Serialize;

use crate::args::*;
use crate::config;
use crate::failure::{Classify, CliResult, Failure};

pub fn run(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth => synth(g),
        Command::Align(a) => align(g, &a.inputs, &a.candidates, Stages::ALL, None),
        Command::InitPose(a) if a.export_candidates => export(g, &a.inputs),
        Command::InitPose(a) => {
            let stages = Stages {
                init: true,
                refine: false,
                congeal: false,
            };
            align(g, &a.inputs, &a.candidates, stages, None)
        }
        Command::RefinePose(a) => {
            let stages = Stages {
                init: false,
                refine: true,
                congeal: false,
            };
            align(g, &a.inputs, &CandidateArgs::none(), stages, Some(&a.poses))
        }
        Command::Congeal(a) => {
            let stages = Stages {
                init: false,
                refine: false,
                congeal: true,
            };
            align(g, &a.inputs, &CandidateArgs::none(), stages, Some(&a.poses))
        }
        Command::Uncongeal(a) => uncongeal(g, a),
        Command::Transfer(a) => transfer(g, a),
        Command::Edit(a) => edit(g, a),
        Command::EvalPose(a) => eval_pose(g, a),
        Command::EvalPck(a) => eval_pck(g, a),
    }
}

impl CandidateArgs {
    fn none() -> Self {
        Self {
            candidate_features: None,
            candidate_renders: None,
        }
    }
}

fn out_dir(g: &GlobalArgs) -> CliResult<&Path> {
    g.out
        .as_deref()
        .ok_or_else(|| Failure::Usage("this command needs --out".into()))
}

/// Writes `value` to `<out>/<name>` when `--out` is given, else prints it.
fn emit<T: Serialize>(g: &GlobalArgs, name: &str, value: &T) -> CliResult<()> {
    match &g.out {
        Some(dir) => {
            fs::create_dir_all(dir).runtime()?;
            write_json(dir.join(name), value).runtime()
        }
        None => {
            let text = serde_json::to_string_pretty(value).runtime()?;
            match writeln!(std::io::stdout().lock(), "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Runtime(e.to_string())),
                _ => Ok(()),
            }
        }
    }
}

fn align_config(g: &GlobalArgs) -> CliResult<AlignConfig> {
    let mut cfg = config::load(&AlignConfig::default(), g.config.as_deref(), &g.overrides)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.validate().usage()?;
    Ok(cfg)
}

fn load_manifest(path: &Path) -> CliResult<Manifest> {
    let m = Manifest::load(path).usage()?;
    if m.images.is_empty() {
        return Err(Failure::Usage(format!("{}: manifest lists no images", path.display())));
    }
    Ok(m)
}

fn load_field(path: &Path) -> CliResult<VoxelField> {
    read_field(path).usage()
}

fn synth(g: &GlobalArgs) -> CliResult<()> {
    let base = SynthJob {
        scene: SynthSpec::box_and_sphere(128, 0.05, 0),
        views: Default::default(),
        dataset: Default::default(),
    };
    let mut job = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            let job: SynthJob = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            config::load(&job, None, &g.overrides)?
        }
        None => config::load(&base, None, &g.overrides)?,
    };
    if let Some(seed) = g.seed {
        job.scene.seed = seed;
    }
    job.scene.validate().usage()?;
    let out = out_dir(g)?;
    let ds = job.generate().runtime()?;
    let manifest = write_dataset(out, &ds).runtime()?;
    info!("wrote {} views to {}", ds.views.len(), manifest.display());
    Ok(())
}

fn candidate_bank(
    field: &VoxelField,
    cfg: &AlignConfig,
    cand: &CandidateArgs,
    out: &Path,
) -> CliResult<CandidateBank> {
    let grid = cfg.grid_for(field);
    match &cand.candidate_features {
        Some(features) => {
            let renders = cand.candidate_renders.clone().unwrap_or_else(|| out.join("candidates"));
            import_candidates(&grid, &cfg.init, &renders, features).usage()
        }
        None => {
            let t = Instant::now();
            let bank = CandidateBank::render(field, &grid, &cfg.init).runtime()?;
            info!("rendered {} candidates in {:.1}s", grid.len(), t.elapsed().as_secs_f64());
            Ok(bank)
        }
    }
}

fn export(g: &GlobalArgs, inputs: &Inputs) -> CliResult<()> {
    let cfg = align_config(g)?;
    let field = load_field(&inputs.field)?;
    load_manifest(&inputs.manifest)?;
    let dir = out_dir(g)?.join("candidates");
    let index = export_candidates(&field, &cfg.grid_for(&field), &cfg.init, &dir).runtime()?;
    info!("exported {} candidate renders to {}", index.renders.len(), dir.display());
    Ok(())
}

fn align(
    g: &GlobalArgs,
    inputs: &Inputs,
    cand: &CandidateArgs,
    stages: Stages,
    start: Option<&PathBuf>,
) -> CliResult<()> {
    let cfg = align_config(g)?;
    let out = out_dir(g)?;
    let field = load_field(&inputs.field)?;
    let manifest = load_manifest(&inputs.manifest)?;
    let starts: Vec<Option<CameraPose>> = match start {
        Some(p) => poses_for(&manifest, &read_poses(p).usage()?),
        None => vec![None; manifest.images.len()],
    };
    let t = Instant::now();
    let bank = if stages.init {
        Some(candidate_bank(&field, &cfg, cand, out)?)
    } else {
        None
    };
    let loaded: Vec<_> = manifest.images.iter().map(ImageInput::load).collect();
    let ids: Vec<String> = manifest.images.iter().map(|e| e.id.clone()).collect();
    let outcomes = align_all(&field, bank.as_ref(), &loaded, &ids, &starts, stages, &cfg);
    let report = build_report(&outcomes, t.elapsed().as_secs_f64());
    write_outputs(out, &outcomes, &report).runtime()?;
    if let Some(e) = &report.evaluation {
        info!(
            "pose error vs ground truth: {:.3} deg, {:.4} units",
            e.rotation_deg_mean, e.translation_mean
        );
    }
    info!("{} of {} images aligned", report.succeeded, outcomes.len());
    if report.succeeded == 0 {
        return Err(Failure::Runtime("every image failed; see report.json".into()));
    }
    Ok(())
}

fn contexts(run: &RunArgs) -> CliResult<(Manifest, Vec<(String, MappingContext)>)> {
    let manifest = load_manifest(&run.manifest)?;
    let poses = read_poses(run.run.join("poses.json")).usage()?;
    let mut out = Vec::new();
    for e in &manifest.images {
        if poses.iter().any(|p| p.id == e.id) {
            out.push((e.id.clone(), load_context(&run.run, e, &poses).usage()?));
        }
    }
    Ok((manifest, out))
}

fn find<'a>(ctx: &'a [(String, MappingContext)], id: &str) -> CliResult<&'a MappingContext> {
    ctx.iter()
        .find(|(i, _)| i == id)
        .map(|(_, c)| c)
        .ok_or_else(|| Failure::Usage(format!("image {id:?} has no alignment in the run directory")))
}

fn uncongeal(g: &GlobalArgs, a: &UncongealArgs) -> CliResult<()> {
    let points: Vec<[f64; 3]> = read_json(&a.points).usage()?;
    let (_, ctx) = contexts(&a.run)?;
    let sets: Vec<PointSet> = ctx
        .iter()
        .map(|(id, c)| PointSet {
            image_id: id.clone(),
            points: points.iter().map(|p| c.project(&(*p).into()).ok()).collect(),
        })
        .collect();
    emit(g, "uncongeal.json", &sets)
}

fn transfer(g: &GlobalArgs, a: &TransferArgs) -> CliResult<()> {
    let source: PointSet = read_json(&a.keypoints).usage()?;
    let (_, ctx) = contexts(&a.run)?;
    let (s, t) = (find(&ctx, &source.image_id)?, find(&ctx, &a.target)?);
    let result = PointSet {
        image_id: a.target.clone(),
        points: source
            .points
            .iter()
            .map(|u| u.and_then(|u| transfer_keypoint(s, t, u).ok()))
            .collect(),
    };
    emit(g, &format!("transfer_{}.json", a.target), &result)
}

fn edit(g: &GlobalArgs, a: &EditArgs) -> CliResult<()> {
    let out = out_dir(g)?;
    let (manifest, ctx) = contexts(&a.run)?;
    let (s, t) = (find(&ctx, &a.source)?, find(&ctx, &a.target)?);
    let entry = |id: &str| manifest.images.iter().find(|e| e.id == id).expect("context implies entry");
    let source_image = read_ppm(a.image.as_ref().unwrap_or(&entry(&a.source).image_path)).usage()?;
    let target_image = read_ppm(&entry(&a.target).image_path).usage()?;
    let region = read_mask(&a.region).usage()?;
    let edited = transfer_pixels(&source_image, s, &target_image, t, &region).runtime()?;
    fs::create_dir_all(out).runtime()?;
    let path = out.join(format!("{}_edit.ppm", a.target));
    write_ppm(&path, &edited).runtime()?;
    info!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct PoseEvaluation {
    ids: Vec<String>,
    missing: Vec<String>,
    #[serde(flatten)]
    report: PoseReport,
}

fn eval_pose(g: &GlobalArgs, a: &EvalPoseArgs) -> CliResult<()> {
    let pred = read_poses(&a.pred).usage()?;
    let gt = read_poses(&a.gt).usage()?;
    let (mut ids, mut missing, mut p, mut q) = (vec![], vec![], vec![], vec![]);
    for r in &gt {
        match pred.iter().find(|x| x.id == r.id) {
            Some(x) => {
                ids.push(r.id.clone());
                p.push(x.pose.camera_to_world());
                q.push(r.pose.camera_to_world());
            }
            None => missing.push(r.id.clone()),
        }
    }
    let alignment = procrustes_align(&p, &q).runtime()?;
    emit(
        g,
        "pose_eval.json",
        &PoseEvaluation {
            ids,
            missing,
            report: alignment.report,
        },
    )
}

#[derive(Serialize)]
struct PckEvaluation {
    pck: f64,
    alpha: f64,
    radius: f64,
    evaluated: usize,
}

fn parse_bbox(s: &str) -> CliResult<(f64, f64)> {
    let parsed = s
        .split_once(['x', 'X'])
        .and_then(|(h, w)| Some((h.trim().parse::<f64>().ok()?, w.trim().parse::<f64>().ok()?)));
    match parsed {
        Some((h, w)) if h > 0.0 && w > 0.0 => Ok((h, w)),
        _ => Err(Failure::Usage(format!("--bbox {s:?} is not HxW with positive sizes"))),
    }
}

fn eval_pck(g: &GlobalArgs, a: &EvalPckArgs) -> CliResult<()> {
    let pred: PointSet = read_json(&a.pred).usage()?;
    let gt: PointSet = read_json(&a.gt).usage()?;
    if pred.points.len() != gt.points.len() {
        return Err(Failure::Usage(format!(
            "{} predictions for {} ground-truth points",
            pred.points.len(),
            gt.points.len()
        )));
    }
    let bbox = match (&a.bbox, &a.mask) {
        (Some(b), _) => parse_bbox(b)?,
        (None, Some(m)) => {
            let r = tight_bbox(&read_mask(m).usage()?, 0.5).usage()?;
            (r.height() as f64, r.width() as f64)
        }
        (None, None) => return Err(Failure::Usage("eval-pck needs --bbox or --mask".into())),
    };
    let (p, q): (Vec<_>, Vec<_>) = pred
        .points
        .iter()
        .zip(&gt.points)
        .filter_map(|(p, q)| q.map(|q| (*p, q)))
        .unzip();
    let cfg = PckConfig { alpha: a.alpha, bbox };
    let value = pck(&p, &q, &cfg).usage()?;
    emit(
        g,
        "pck.json",
        &PckEvaluation {
            pck: value,
            alpha: a.alpha,
            radius: cfg.radius(),
            evaluated: q.len(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;
    use congeal::dataio::write_pgm;
    use congeal::pipeline::KeypointFile;
    use congeal::raster::Image;
    use serde_json::Value;

    fn exec(args: &[&str]) -> CliResult<()> {
        let cli = Cli::try_parse_from(std::iter::once("congeal").chain(args.iter().copied()))
            .map_err(|e| Failure::Usage(e.to_string()))?;
        run(&cli)
    }

    fn ok(args: &[&str]) {
        if let Err(e) = exec(args) {
            panic!("{args:?}: {e}");
        }
    }

    fn code(args: &[&str]) -> u8 {
        exec(args).err().map_or(0, |f| f.exit_code())
    }

    fn s(p: &Path) -> String {
        p.to_string_lossy().into_owned()
    }

    fn small_dataset(dir: &Path) -> (String, String) {
        ok(&[
            "synth",
            "--out",
            &s(dir),
            "--set",
            "scene.resolution=40",
            "--set",
            "views.count=3",
            "--set",
            "views.width=32",
            "--set",
            "views.height=32",
        ]);
        (s(&dir.join("field").join("field.json")), s(&dir.join("manifest.json")))
    }

    #[test]
    fn end_to_end_workflow() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let run_dir = tmp.path().join("run");
        let out = tmp.path().join("out");
        let (field, manifest) = small_dataset(&data);
        for name in ["poses.json", "keypoints.json", "views/view_002_nocs.tnsr"] {
            assert!(data.join(name).exists(), "{name} missing");
        }
        ok(&[
            "align",
            "--field",
            &field,
            "--manifest",
            &manifest,
            "--out",
            &s(&run_dir),
            "--set",
            "refine.iterations=20",
            "--set",
            "warp.iterations=300",
        ]);
        let report: Value = read_json(run_dir.join("report.json")).unwrap();
        assert_eq!(report["images"].as_array().unwrap().len(), 3);
        assert!(run_dir.join("warps").join("view_000.tnsr").exists());

        let gt = s(&data.join("poses.json"));
        ok(&["eval-pose", "--pred", &gt, "--gt", &gt, "--out", &s(&out)]);
        let v: Value = read_json(out.join("pose_eval.json")).unwrap();
        assert!(v["rotation_deg_mean"].as_f64().unwrap() < 1e-6);
        assert!(v["translation_mean"].as_f64().unwrap() < 1e-9);

        // Transfer into the same image should land where it started.
        let kp: KeypointFile = read_json(data.join("keypoints.json")).unwrap();
        let source = PointSet {
            image_id: "view_000".into(),
            points: kp.keypoints.iter().map(|k| k.projections[0]).collect(),
        };
        let kp_path = tmp.path().join("kp.json");
        write_json(&kp_path, &source).unwrap();
        let run_args = ["--run", &s(&run_dir), "--manifest", &manifest];
        let mut args = vec!["transfer", "--keypoints", &kp_path.to_str().unwrap(), "--target", "view_000"];
        let out_s = s(&out);
        args.extend(run_args);
        args.extend(["--out", &out_s]);
        ok(&args);
        let moved: PointSet = read_json(out.join("transfer_view_000.json")).unwrap();
        let dists: Vec<f64> = source
            .points
            .iter()
            .zip(&moved.points)
            .filter_map(|(a, b)| Some((a.as_ref()?, b.as_ref()?)))
            .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
            .collect();
        assert!(!dists.is_empty());
        let close = dists.iter().filter(|d| **d <= 2.0).count();
        assert!(close * 10 >= dists.len() * 9, "{close}/{} within 2 px", dists.len());

        let mask = s(&data.join("views").join("view_000_mask.pgm"));
        let pred = s(&out.join("transfer_view_000.json"));
        ok(&["eval-pck", "--pred", &pred, "--gt", &s(&kp_path), "--mask", &mask, "--out", &out_s]);
        let v: Value = read_json(out.join("pck.json")).unwrap();
        assert!(v["pck"].as_f64().unwrap() >= 90.0);
        assert_eq!(v["evaluated"].as_u64().unwrap() as usize, source.points.iter().flatten().count());

        let pts = tmp.path().join("pts.json");
        fs::write(&pts, "[[0.5, 0.5, 0.5], [0.1, 0.2, 0.9]]").unwrap();
        let mut args = vec!["uncongeal", "--points", pts.to_str().unwrap(), "--out", &out_s];
        args.extend(run_args);
        ok(&args);
        let sets: Vec<PointSet> = read_json(out.join("uncongeal.json")).unwrap();
        assert_eq!(sets.len(), 3);
        assert!(sets.iter().all(|p| p.points.len() == 2));

        let region = tmp.path().join("region.pgm");
        write_pgm(&region, &Image::filled(32, 32, 1, 1.0)).unwrap();
        let mut args = vec!["edit", "--source", "view_001", "--target", "view_000", "--out", &out_s];
        let region_s = s(&region);
        args.extend(["--region", &region_s]);
        args.extend(run_args);
        ok(&args);
        assert!(out.join("view_000_edit.ppm").exists());

        // Blank masks make every image fail.
        let blank = tmp.path().join("blank.pgm");
        write_pgm(&blank, &Image::zeros(32, 32, 1)).unwrap();
        let mut m: Value = read_json(&manifest).unwrap();
        for entry in m["images"].as_array_mut().unwrap() {
            for key in ["image_path", "features_path", "pose_path"] {
                let rel = entry[key].as_str().unwrap().to_string();
                entry[key] = s(&data.join(rel)).into();
            }
            entry["mask_path"] = s(&blank).into();
        }
        let blank_manifest = tmp.path().join("blank_manifest.json");
        write_json(&blank_manifest, &m).unwrap();
        let failed_run = s(&tmp.path().join("failed"));
        let args = ["align", "--field", &field, "--manifest", &s(&blank_manifest), "--out", &failed_run];
        assert_eq!(code(&args), 1);
        let report: Value = read_json(tmp.path().join("failed").join("report.json")).unwrap();
        assert!(report["images"].as_array().unwrap().iter().all(|i| i["status"] == "failed"));
    }

    #[test]
    fn usage_errors_exit_with_two() {
        let tmp = tempfile::tempdir().unwrap();
        let (field, manifest) = small_dataset(&tmp.path().join("data"));
        let bad = tmp.path().join("bad.json");
        fs::write(&bad, "{ not json").unwrap();
        let empty = tmp.path().join("empty.json");
        fs::write(&empty, r#"{"images": []}"#).unwrap();
        let no_shapes = tmp.path().join("job.json");
        fs::write(&no_shapes, r#"{"scene": {"primitives": []}}"#).unwrap();
        let (bad, empty, no_shapes) = (s(&bad), s(&empty), s(&no_shapes));
        let out = s(&tmp.path().join("o"));

        assert_eq!(code(&["align", "--field", &field, "--manifest", &manifest, "--config", &bad]), 2);
        assert_eq!(code(&["align", "--field", &field, "--manifest", &empty, "--out", &out]), 2);
        assert_eq!(code(&["synth", "--config", &no_shapes, "--out", &out]), 2);
        assert_eq!(code(&["synth", "--set", "views.count=2"]), 2);
        assert_eq!(code(&["align", "--field", &field, "--manifest", &manifest, "--set", "refine.nope=1"]), 2);
        assert_eq!(code(&["align", "--field", "/nonexistent/field.json", "--manifest", &manifest]), 2);
        assert_eq!(code(&["eval-pck", "--pred", &bad, "--gt", &bad, "--bbox", "10x10"]), 2);
        assert_eq!(code(&["eval-pck", "--pred", &bad, "--gt", &bad, "--bbox", "10x"]), 2);
        let err = Cli::try_parse_from(["congeal", "frobnicate"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = Cli::try_parse_from(["congeal", "align", "--field", "f.json"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
