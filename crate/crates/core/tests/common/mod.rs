#![allow(dead_code)]

use bqe_core::data::PointCloudFrame;
use bqe_core::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod gradcheck;
pub mod oracles;

pub const FD_STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Distinct random voxels inside a `side³` cube.
pub fn random_geometry(n: usize, side: i32, rng: &mut ChaCha8Rng) -> Vec<[i32; 3]> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v = [0; 3].map(|_| rng.random_range(0..side));
        if seen.insert(v) {
            out.push(v);
        }
    }
    out
}

pub fn random_frame(n: usize, channels: usize, index: usize, rng: &mut ChaCha8Rng) -> PointCloudFrame {
    let geometry = random_geometry(n, 12, rng);
    let attrs = Matrix::from_fn(n, channels, |_, _| rng.random_range(0.0..255.0_f64).round());
    PointCloudFrame::new(geometry, attrs, index).unwrap()
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct FdReport {
    /// Largest relative error over differentiable coordinates.
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates whose central differences at `h/2`, `h` and `2h`
    /// disagree with each other, i.e. a LeakyReLU kink lies within `2h`.
    pub kinks: usize,
}

impl FdReport {
    /// Below `tol` with at most one coordinate in fifty on a kink.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel < tol && self.kinks * 50 <= self.checked
    }

    pub fn assert_below(&self, tol: f64, what: &str) {
        eprintln!(
            "{what}: max rel {:.3e} over {} coords, {} kinks",
            self.max_rel, self.checked, self.kinks
        );
        assert!(self.max_rel < tol, "{what}: max relative error {:e} (>= {tol:e})", self.max_rel);
        assert!(
            self.kinks * 50 <= self.checked,
            "{what}: {} of {} coordinates sit on kinks",
            self.kinks,
            self.checked
        );
    }
}

fn central(work: &mut [Matrix], t: usize, e: usize, h: f64, loss: &impl Fn(&[Matrix]) -> f64) -> f64 {
    let orig = work[t].data()[e];
    work[t].data_mut()[e] = orig + h;
    let up = loss(work);
    work[t].data_mut()[e] = orig - h;
    let down = loss(work);
    work[t].data_mut()[e] = orig;
    (up - down) / (2.0 * h)
}

/// Compares `analytic` with central differences of `loss` at step
/// [`FD_STEP`] over the listed `(tensor, entry)` coordinates.
///
/// The relative error is `|a − n| / max(|a|, |n|, floor)`, where `floor`
/// puts the absolute tolerance at the roundoff level of the difference
/// quotient, `64·ε·max(|L|, 1)/h`, divided by `tol`.
pub fn fd_check(values: &[Matrix], analytic: &[Matrix], coords: &[(usize, usize)], tol: f64, loss: impl Fn(&[Matrix]) -> f64) -> FdReport {
    let mut work = values.to_vec();
    let l0 = loss(&work).abs().max(1.0);
    let noise = 64.0 * f64::EPSILON * l0 / FD_STEP;
    let floor = noise / tol;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(floor);
    let mut report = FdReport {
        max_rel: 0.0,
        checked: coords.len(),
        kinks: 0,
    };
    for &(t, e) in coords {
        let a = analytic[t].data()[e];
        let n = central(&mut work, t, e, FD_STEP, &loss);
        let err = rel(a, n);
        if err >= tol {
            let half = central(&mut work, t, e, 0.5 * FD_STEP, &loss);
            let double = central(&mut work, t, e, 2.0 * FD_STEP, &loss);
            if rel(half, n) >= tol || rel(double, n) >= tol {
                report.kinks += 1;
                continue;
            }
        }
        report.max_rel = report.max_rel.max(err);
    }
    report
}

/// Every coordinate of every tensor.
pub fn all_coords(values: &[Matrix]) -> Vec<(usize, usize)> {
    values
        .iter()
        .enumerate()
        .flat_map(|(t, m)| (0..m.len()).map(move |e| (t, e)))
        .collect()
}

/// Up to `per_tensor` random coordinates from each tensor.
pub fn sampled_coords(values: &[Matrix], per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (t, m) in values.iter().enumerate() {
        if m.len() <= per_tensor {
            out.extend((0..m.len()).map(|e| (t, e)));
        } else {
            out.extend((0..per_tensor).map(|_| (t, rng.random_range(0..m.len()))));
        }
    }
    out
}
