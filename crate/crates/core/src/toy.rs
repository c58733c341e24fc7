//! Synthetic dynamic sequences: a textured blob drifting through the voxel grid.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{quantize_u8, PointCloudFrame, Voxel};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub frames: usize,
    pub points: usize,
    pub seed: u64,
    /// Voxels travelled per frame.
    pub velocity: [f64; 3],
    /// Rotation about the vertical axis per frame, in radians.
    pub spin: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            frames: 5,
            points: 512,
            seed: 0,
            velocity: [1.3, 0.6, -0.4],
            spin: 0.05,
        }
    }
}

/// Smooth RGB texture over directions on the unit sphere.
#[derive(Clone, Debug)]
struct Texture {
    linear: [[f64; 3]; 3],
    quadratic: [f64; 3],
    wave: [f64; 3],
    phase: f64,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut linear = [[0.0; 3]; 3];
        for row in &mut linear {
            for v in row.iter_mut() {
                *v = rng.random_range(-45.0..45.0);
            }
        }
        Self {
            linear,
            quadratic: [0; 3].map(|_| rng.random_range(-25.0..25.0)),
            wave: [0; 3].map(|_| rng.random_range(-15.0..15.0)),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn color(&self, u: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let lin: f64 = self.linear[c].iter().zip(&u).map(|(a, b)| a * b).sum();
            let quad = self.quadratic[c] * u[0] * u[1];
            let wave = self.wave[c] * (2.0 * u[2] + self.phase).sin();
            *o = f64::from(quantize_u8(128.0 + lin + quad + wave));
        }
        out
    }
}

fn fibonacci_sphere(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let theta = golden * i as f64;
            [r * theta.cos(), r * theta.sin(), z]
        })
        .collect()
}

/// Rounds to voxels, moving a colliding point to the nearest free voxel.
fn voxelize(points: &[[f64; 3]]) -> Vec<Voxel> {
    let mut offsets: Vec<Voxel> = Vec::new();
    for dx in -2..=2 {
        for dy in -2..=2 {
            for dz in -2..=2 {
                offsets.push([dx, dy, dz]);
            }
        }
    }
    offsets.sort_by_key(|o| (o[0] * o[0] + o[1] * o[1] + o[2] * o[2], *o));
    let mut used = HashSet::with_capacity(points.len());
    points
        .iter()
        .map(|p| {
            let base = p.map(|c| c.round() as i32);
            let v = offsets
                .iter()
                .map(|o| [base[0] + o[0], base[1] + o[1], base[2] + o[2]])
                .find(|v| !used.contains(v))
                .expect("a free voxel within two steps");
            used.insert(v);
            v
        })
        .collect()
}

/// Clean RGB frames of a blob translating and spinning with a texture
/// attached to its surface.
pub fn toy_sequence(config: &ToyConfig) -> Result<Vec<PointCloudFrame>> {
    if config.frames == 0 || config.points == 0 {
        return Err(Error::InvalidConfig("toy sequences need at least one frame and one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let texture = Texture::random(&mut rng);
    let radius = 2.0 * (config.points as f64 / (4.0 * std::f64::consts::PI)).sqrt();
    let start: [f64; 3] = [0; 3].map(|_| rng.random_range(100.0..200.0));
    let tilt = rng.random_range(0.0..std::f64::consts::TAU);
    let directions = fibonacci_sphere(config.points);
    let colors: Vec<[f64; 3]> = directions.iter().map(|&u| texture.color(u)).collect();
    (0..config.frames)
        .map(|t| {
            let angle = tilt + config.spin * t as f64;
            let (s, c) = angle.sin_cos();
            let center: [f64; 3] = std::array::from_fn(|i| start[i] + config.velocity[i] * t as f64);
            let points: Vec<[f64; 3]> = directions
                .iter()
                .map(|u| {
                    let rotated = [c * u[0] - s * u[1], s * u[0] + c * u[1], u[2]];
                    std::array::from_fn(|i| center[i] + radius * rotated[i])
                })
                .collect();
            let geometry = voxelize(&points);
            let attributes = Matrix::from_rows(&colors.iter().map(|c| c.to_vec()).collect::<Vec<_>>());
            PointCloudFrame::new(geometry, attributes, t)
        })
        .collect()
}
