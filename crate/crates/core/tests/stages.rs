use congeal::geometry::{camera_from_spherical, geodesic_angle};
use congeal::metric::iou_distance;
use congeal::pose_fit::{init_pose, refine_pose, CandidateGrid, InitConfig, OptimConfig};
use congeal::raster::{FeatureImage, Image};
use congeal::render::{render, Channels, RenderConfig};
use congeal::synth::{make_field, SynthSpec};
use congeal::warp::{fit_forward_warp, WarpConfig};

fn pattern(w: usize, h: usize, shift: f64) -> FeatureImage {
    let mut img = Image::from_fn(w, h, 4, |c, r, o| {
        let (x, y) = ((c as f64 + 0.5 + shift) / w as f64, (r as f64 + 0.5) / h as f64);
        o[0] = (6.0 * x).sin();
        o[1] = (5.0 * y + 1.0).cos();
        o[2] = (4.0 * (x + y)).sin();
        o[3] = 0.5;
    });
    for px in img.data_mut().chunks_exact_mut(4) {
        let n = px.iter().map(|v| v * v).sum::<f64>().sqrt();
        px.iter_mut().for_each(|v| *v /= n);
    }
    img
}

#[test]
fn warp_recovers_a_horizontal_shift() {
    let (w, h) = (32, 32);
    let rendered = pattern(w, h, 0.0);
    let real = pattern(w, h, 2.0);
    let cfg = WarpConfig {
        lambda_l2: 0.01,
        lambda_smooth: 0.1,
        iterations: 1500,
        ..Default::default()
    };
    let fit = fit_forward_warp(&real, &rendered, &cfg).unwrap();
    assert!(fit.objective < fit.initial_objective);
    let (mut dx, mut dy) = (Vec::new(), Vec::new());
    for row in 4..h - 4 {
        for col in 4..w - 6 {
            let d = fit.warp.displacement.pixel(col, row);
            dx.push(d[0] * w as f64);
            dy.push((d[1] * h as f64).abs());
        }
    }
    dx.sort_by(f64::total_cmp);
    let median = dx[dx.len() / 2];
    assert!(dy.iter().all(|d| *d < 0.5));
    assert!((median - 2.0).abs() < 0.3, "median shift {median} px");
}

#[test]
fn warp_fit_never_exceeds_the_zero_warp() {
    let rendered = pattern(16, 16, 0.0);
    let real = pattern(16, 16, 0.0);
    let fit = fit_forward_warp(&real, &rendered, &WarpConfig { iterations: 50, ..Default::default() }).unwrap();
    assert!(fit.objective <= fit.initial_objective);
}

#[test]
fn init_selects_the_matching_candidate() {
    let field = make_field(&SynthSpec::box_and_sphere(32, 0.0, 1)).unwrap();
    let grid = CandidateGrid::uniform(1, 8, 4, (40.0, 40.0), 3.0);
    let cfg = InitConfig {
        render_size: (32, 32),
        ..Default::default()
    };
    let target_pose = camera_from_spherical(grid.azimuths[3], grid.elevations[1], 3.0, 40.0, 32, 32);
    let r = render(&field, &target_pose, &cfg.render, Channels::MASK.with_features()).unwrap();
    let est = init_pose(&field, r.features.as_ref().unwrap(), &r.mask, &grid, &cfg).unwrap();
    assert_eq!(est.candidate_index, Some(3 * 4 + 1));
    assert!(est.score < 1e-9);
}

#[test]
fn refinement_improves_a_perturbed_pose() {
    let field = make_field(&SynthSpec::box_and_sphere(48, 0.0, 1)).unwrap();
    let truth = camera_from_spherical(20.0, 30.0, 3.0, 40.0, 40, 40);
    let render_cfg = RenderConfig::default();
    let target = render(&field, &truth, &render_cfg, Channels::MASK).unwrap().mask;
    let start = camera_from_spherical(26.0, 26.0, 3.0, 42.0, 40, 40);
    let before = iou_distance(&render(&field, &start, &render_cfg, Channels::MASK).unwrap().mask, &target).unwrap();
    let cfg = OptimConfig {
        learning_rate: 5e-3,
        iterations: 150,
        ..Default::default()
    };
    let est = refine_pose(&field, &target, &start, &cfg, &render_cfg).unwrap();
    assert!(est.score < 0.5 * before, "{} vs {before}", est.score);
    let err = geodesic_angle(&est.pose.extrinsics.rotation, &truth.extrinsics.rotation);
    let err0 = geodesic_angle(&start.extrinsics.rotation, &truth.extrinsics.rotation);
    assert!(err < err0);
}
