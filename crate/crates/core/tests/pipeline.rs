use aft_core::kinematics::{tip_position, RobotConfig, SegmentConfig};
use aft_core::matching::{gated_scores, score_matrix, visible_reference_points, ScoreParams};
use aft_core::reconstruct::{compute_metrics, process_frame, PipelineParams};
use aft_core::refmodel::{build_reference_model, read_model, write_model, ReferenceModel};
use aft_core::sim::*;

struct Fixture {
    surface: Surface,
    model: ReferenceModel,
    camera: aft_core::camera::CameraModel,
}

fn fixture() -> Fixture {
    let geometry = RobotGeometry::default();
    let surface = generate_surface(&geometry, 1).unwrap();
    let views = reference_views(&surface, 8, 0.05, 2).unwrap();
    let model = build_reference_model(&surface.points, &views, &geometry.rest_config(), 2000, 4, 3).unwrap();
    let camera = viewpoint_camera("front", 0.7, geometry.length).unwrap();
    Fixture { surface, model, camera }
}

fn bent() -> RobotConfig {
    RobotConfig::new(vec![SegmentConfig::new(1.0, 0.3, 0.2), SegmentConfig::new(1.5, 0.5, 0.2)])
}

#[test]
fn gated_scores_agree_with_the_dense_matrix() {
    let f = fixture();
    let mut model = f.model.clone();
    model
        .set_current_config(RobotConfig::new(vec![SegmentConfig::new(0.8, 0.3, 0.2), SegmentConfig::new(1.2, 0.5, 0.2)]))
        .unwrap();
    let frame = render_frame(&f.surface, &bent(), &f.camera, &OcclusionBar::none(), &NoiseSpec::default(), 0, 0.0).unwrap();
    let params = ScoreParams::default();
    let visible = visible_reference_points(&model, &f.camera, &Default::default());
    let rows: Vec<_> = visible.iter().map(|&i| &model.points[i]).collect();
    let dense = score_matrix(&rows, &frame.points, &params).unwrap();
    let gated = gated_scores(&model, &visible, &frame.points, &params).unwrap();
    // Descriptors are compared in f32, so entries at the floor may land either side.
    let tol = 1e-5;
    for (i, row) in gated.rows.iter().enumerate() {
        assert!(row.windows(2).all(|w| w[0].0 < w[1].0));
        let mut k = 0;
        for j in 0..dense.ncols() {
            let d = dense[(i, j)];
            if k < row.len() && row[k].0 == j {
                assert!((row[k].1 - d).abs() < tol, "({i},{j}): {} vs {d}", row[k].1);
                k += 1;
            } else {
                assert!(d <= params.score_floor + tol, "({i},{j}) dropped at {d}");
            }
        }
    }
}

#[test]
fn empty_frame_is_a_tracking_loss_and_leaves_the_model_alone() {
    let f = fixture();
    let mut model = f.model.clone();
    let before = model.clone();
    let frame = ObservedFrame { timestamp: 0.0, points: Vec::new(), truth: None };
    let result = process_frame(&mut model, &frame, &f.camera, &PipelineParams::default()).unwrap();
    assert!(result.tracking_lost);
    assert_eq!(result.config, before.current_config);
    assert_eq!(model, before);
}

#[test]
fn short_sequence_tracks_within_a_percent() {
    let f = fixture();
    let plant = PressurePlant::default();
    let truth = make_trajectory(&TrajectoryKind::RandomPressures { n_sets: 1 }, 10, 7, &plant).unwrap();
    let mut model = f.model.clone();
    let params = PipelineParams::default();
    let noise = NoiseSpec { seed: 3, ..NoiseSpec::default() };
    for (k, config) in truth.iter().enumerate() {
        let frame = render_frame(&f.surface, config, &f.camera, &OcclusionBar::none(), &noise, k as u64, 0.4 * k as f64).unwrap();
        let result = process_frame(&mut model, &frame, &f.camera, &params).unwrap();
        assert!(!result.tracking_lost, "frame {k}");
        let m = compute_metrics(&result.config, config, 8).unwrap();
        assert!(m.tip_error < 0.01, "frame {k}: tip error {}", m.tip_error);
        assert_eq!(result.tip, tip_position(&result.config));
    }
}

#[test]
fn processing_is_deterministic() {
    let f = fixture();
    let frame = render_frame(&f.surface, &bent(), &f.camera, &OcclusionBar::none(), &NoiseSpec::default(), 0, 0.0).unwrap();
    let params = PipelineParams::default();
    let (mut a, mut b) = (f.model.clone(), f.model.clone());
    let ra = process_frame(&mut a, &frame, &f.camera, &params).unwrap();
    let rb = process_frame(&mut b, &frame, &f.camera, &params).unwrap();
    assert_eq!(ra.config, rb.config);
    assert_eq!(ra.pair_counts, rb.pair_counts);
    assert_eq!(ra.transforms, rb.transforms);
    assert_eq!(a, b);
}

#[test]
fn model_and_frame_files_round_trip() {
    let f = fixture();
    let mut buf = Vec::new();
    write_model(&mut buf, &f.model).unwrap();
    assert_eq!(read_model(&mut buf.as_slice()).unwrap(), f.model);

    let frame = render_frame(&f.surface, &bent(), &f.camera, &OcclusionBar::none(), &NoiseSpec::default(), 4, 1.6).unwrap();
    let mut buf = Vec::new();
    write_frame(&mut buf, &frame).unwrap();
    assert_eq!(read_frame(&mut buf.as_slice()).unwrap(), frame);
}

#[test]
fn truncated_model_file_is_rejected() {
    let f = fixture();
    let mut buf = Vec::new();
    write_model(&mut buf, &f.model).unwrap();
    buf.truncate(buf.len() / 2);
    assert!(read_model(&mut buf.as_slice()).is_err());
}
