mod common;

use bqe_core::data::{make_window, PointCloudFrame, TemporalWindow};
use bqe_core::rmc::{compensate_window, recolor};
use bqe_core::tensor::Matrix;
use common::*;
use proptest::prelude::*;

/// Hand-written inverse-distance weighting over the `k` nearest reference points.
fn idw_oracle(reference: &PointCloudFrame, target: &[[i32; 3]], k: usize) -> Matrix {
    let c = reference.channels();
    let mut out = Matrix::zeros(target.len(), c);
    for (i, t) in target.iter().enumerate() {
        let mut d: Vec<(f64, usize)> = reference
            .geometry()
            .iter()
            .enumerate()
            .map(|(j, g)| {
                let s: i64 = (0..3).map(|a| i64::from(g[a] - t[a]).pow(2)).sum();
                ((s as f64).sqrt(), j)
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if d[0].0 == 0.0 {
            out.row_mut(i).copy_from_slice(reference.attributes().row(d[0].1));
            continue;
        }
        let mut num = vec![0.0; c];
        let mut den = 0.0;
        for &(dist, j) in d.iter().take(k) {
            den += 1.0 / dist;
            for (n, a) in num.iter_mut().zip(reference.attributes().row(j)) {
                *n += a / dist;
            }
        }
        out.row_mut(i).iter_mut().zip(num).for_each(|(o, n)| *o = n / den);
    }
    out
}

#[test]
fn matches_hand_idw_on_random_clouds() {
    let mut r = rng(1);
    for k in [1, 2, 3, 5] {
        let reference = random_frame(60, 3, 0, &mut r);
        let target = random_geometry(45, 12, &mut r);
        let got = recolor(&reference, &target, k).unwrap();
        assert!(
            got.frame.attributes().max_abs_diff(&idw_oracle(&reference, &target, k)) < 1e-9,
            "k={k}"
        );
        assert_eq!(got.frame.geometry(), target.as_slice());
    }
}

#[test]
fn equidistant_pair_gives_the_mean() {
    let reference = PointCloudFrame::new(vec![[0, 0, 0], [0, 0, 2]], Matrix::column(&[100.0, 200.0]), 0).unwrap();
    let v = recolor(&reference, &[[0, 0, 1]], 2).unwrap();
    assert!((v.frame.attributes().get(0, 0) - 150.0).abs() < 1e-12);
}

#[test]
fn recolouring_is_idempotent_on_equal_geometry() {
    let mut r = rng(2);
    let f = random_frame(40, 1, 3, &mut r);
    let once = recolor(&f, f.geometry(), 3).unwrap().frame;
    let twice = recolor(&once, f.geometry(), 3).unwrap().frame;
    assert_eq!(once.attributes(), f.attributes());
    assert_eq!(twice.attributes(), f.attributes());
}

#[test]
fn compensated_window_shares_target_geometry() {
    let mut r = rng(3);
    let seq: Vec<_> = (0..5).map(|i| random_frame(50, 1, i, &mut r)).collect();
    let window = make_window(&seq, 2, 2).unwrap();
    let out = compensate_window(&window, 3).unwrap();
    assert_eq!(out.len(), 5);
    assert!(out.is_aligned());
    assert!(out.frames().iter().all(|f| f.geometry() == seq[2].geometry()));
    assert_eq!(out.target(), window.target());
    let sources: Vec<usize> = out.frames().iter().map(|f| f.frame_index).collect();
    assert_eq!(sources, vec![0, 1, 2, 3, 4]);
}

#[test]
fn identical_window_is_unchanged() {
    let mut r = rng(4);
    let f = random_frame(30, 1, 0, &mut r);
    let window = TemporalWindow::new(vec![f.clone(), f.clone(), f.clone()], 1).unwrap();
    assert_eq!(compensate_window(&window, 3).unwrap(), window);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn translation_leaves_transfer_unchanged(seed in 0u64..500, dx in -50i32..50, dy in -50i32..50, dz in -50i32..50) {
        let mut r = rng(seed);
        let reference = random_frame(40, 1, 0, &mut r);
        let target = random_geometry(25, 12, &mut r);
        let shift = |g: &[[i32; 3]]| -> Vec<[i32; 3]> { g.iter().map(|v| [v[0] + dx, v[1] + dy, v[2] + dz]).collect() };
        let moved = PointCloudFrame::new(shift(reference.geometry()), reference.attributes().clone(), 0).unwrap();
        let a = recolor(&reference, &target, 3).unwrap();
        let b = recolor(&moved, &shift(&target), 3).unwrap();
        prop_assert!(a.frame.attributes().max_abs_diff(b.frame.attributes()) < 1e-9);
    }
}
