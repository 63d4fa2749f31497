#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stillbox_core::scenegen::{generate_and_render, RenderedFrame, Scene, SceneParams};
use stillbox_core::{PinholeCamera, Translation};

/// Forward motion tilted up to `max_tilt_deg` off the optical axis.
pub fn forward_direction(seed: u64, max_tilt_deg: f64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let tilt = rng.random_range(0.0..max_tilt_deg).to_radians();
    let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    [tilt.sin() * azimuth.cos(), tilt.sin() * azimuth.sin(), tilt.cos()]
}

pub struct PairScene {
    pub scene: Scene,
    pub frames: Vec<RenderedFrame>,
    pub camera: PinholeCamera,
}

impl PairScene {
    /// Displacement between reference frame `t` and frame `t + shift`.
    pub fn translation(&self, t: usize, shift: usize) -> Translation {
        Translation::from_vector(self.scene.camera_position(t) - self.scene.camera_position(t + shift))
    }
}

pub fn render_scene(seed: u64, size: usize, direction: [f64; 3]) -> PairScene {
    let params = SceneParams { fixed_direction: Some(direction), ..SceneParams::with_seed(seed) };
    let (scene, frames) = generate_and_render(&params, size).unwrap();
    let camera = PinholeCamera::from_fov(size, size, params.fov_deg).unwrap();
    PairScene { scene, frames, camera }
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut e = k;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
                e += 1;
            }
            for &i in &idx[k..=e] {
                r[i] = (k + e) as f64 / 2.0;
            }
            k = e + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
