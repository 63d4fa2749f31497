use stillbox_core::inference::{compute_metrics, multi_shift_infer, BaselinePredictor, InferenceConfig};
use stillbox_core::scenegen::{near_far_scene, render_sequence};
use nalgebra::Vector2;
use stillbox_core::{DepthMap, Foe, PinholeCamera};

fn l1(pred: &DepthMap, truth: &DepthMap) -> f64 {
    let p: Vec<f64> = pred.data.iter().map(|&v| v as f64).collect();
    let t: Vec<f64> = truth.data.iter().map(|&v| v as f64).collect();
    compute_metrics(&p, &t).unwrap().l1
}

#[test]
fn fusion_beats_each_single_shift_on_near_far_scene() {
    let cfg = InferenceConfig::default();
    let scene = near_far_scene(3.0, 80.0, 0.3, cfg.buffer_length);
    let camera = PinholeCamera::from_fov(128, 128, 90.0).unwrap();
    let frames = render_sequence(&scene, &camera).unwrap();
    let truth = frames.last().unwrap().depth.clone();
    let near = truth.data.iter().filter(|&&z| (z - 3.0).abs() < 1e-3).count();
    let far = truth.data.iter().filter(|&&z| (z - 80.0).abs() < 1e-2).count();
    assert!(near > 6000 && far > 6000, "near {near} far {far}");

    let buffer: Vec<_> = frames.into_iter().map(|f| f.image).collect();
    let predictor = BaselinePredictor { camera, nominal_displacement: cfg.nominal_displacement, foe: Some(Foe::AtInfinity { direction: Vector2::new(1.0, 0.0) }) };
    let out = multi_shift_infer(&buffer, &[1, 3], &predictor, 9.0, &cfg).unwrap();
    let fused = l1(&out.fused, &truth);
    let singles: Vec<f64> = out.per_shift.iter().map(|(_, m)| l1(m, &truth)).collect();
    println!("fused {fused:.3} singles {singles:?}");
    assert!(fused <= singles.iter().cloned().fold(f64::INFINITY, f64::min), "fused {fused} singles {singles:?}");
}
