mod common;

use bqe_core::metrics::{bd_rate, component_curve, delta_psnr, psnr, read_rd_csv, write_rd_csv, ycbcr_psnr, RDCurve, RdRow, PEAK};
use bqe_core::tensor::Matrix;
use bqe_core::Error;
use common::oracles::bd_oracle;
use proptest::prelude::*;

fn anchor() -> RDCurve {
    RDCurve::new(vec![(0.5, 35.0), (1.0, 38.0), (2.0, 41.0), (4.0, 44.0)]).unwrap()
}

#[test]
fn psnr_examples() {
    let a = Matrix::column(&[0.0, 100.0, 200.0]);
    assert_eq!(psnr(&a, &a, PEAK).unwrap(), f64::INFINITY);
    assert!((psnr(&a, &a.map(|v| v + 2.55), PEAK).unwrap() - 40.0).abs() < 1e-9);
    assert!(psnr(&a, &a.map(|v| v - 255.0), PEAK).unwrap().abs() < 1e-12);
    assert!(matches!(psnr(&a, &Matrix::column(&[1.0]), PEAK), Err(Error::ShapeMismatch(_))));
}

#[test]
fn delta_psnr_examples() {
    let original = Matrix::column(&[10.0, 20.0, 30.0]);
    let decoded = original.map(|v| v + 4.0);
    assert_eq!(delta_psnr(&decoded, &decoded, &original).unwrap(), 0.0);
    assert_eq!(delta_psnr(&original, &decoded, &original).unwrap(), f64::INFINITY);
    let better = original.map(|v| v + 2.0);
    let want = 20.0 * 2f64.log10();
    assert!((delta_psnr(&better, &decoded, &original).unwrap() - want).abs() < 1e-9);
}

#[test]
fn ycbcr_aggregate_examples() {
    assert!((ycbcr_psnr(40.0, 42.0, 44.0) - 40.75).abs() < 1e-12);
    assert_eq!(ycbcr_psnr(37.5, 37.5, 37.5), 37.5);
    let dancer = ycbcr_psnr(0.461, 0.153, 0.254);
    assert!((dancer - 0.396625).abs() < 1e-12);
    assert!((dancer - 0.396).abs() < 1e-3);
}

#[test]
fn identical_curves_have_zero_bd_rate() {
    assert_eq!(bd_rate(&anchor(), &anchor()).unwrap(), 0.0);
}

#[test]
fn scaled_rates_give_a_constant_bd_rate() {
    let got = bd_rate(&anchor(), &anchor().scale_rate(1.1).unwrap()).unwrap();
    assert!((got - 10.0).abs() < 1e-6, "{got}");
    let got = bd_rate(&anchor(), &anchor().scale_rate(0.8).unwrap()).unwrap();
    assert!((got + 20.0).abs() < 1e-6, "{got}");
}

#[test]
fn shifted_curve_matches_the_grid_oracle() {
    let test = anchor().shift_psnr(1.0).unwrap();
    let got = bd_rate(&anchor(), &test).unwrap();
    let oracle = bd_oracle(&anchor(), &test);
    assert!((got - oracle).abs() < 0.05, "{got} vs {oracle}");
    // Both fits are exactly linear here: log2 rate = (psnr − 38)/3.
    assert!((got - (2f64.powf(-1.0 / 3.0) - 1.0) * 100.0).abs() < 1e-6);
}

#[test]
fn bd_rate_errors() {
    let three = RDCurve::new(vec![(1.0, 30.0), (2.0, 33.0), (3.0, 35.0)]).unwrap();
    assert!(matches!(bd_rate(&three, &anchor()), Err(Error::TooFewRdPoints(3))));
    let far = anchor().shift_psnr(20.0).unwrap();
    assert!(matches!(bd_rate(&anchor(), &far), Err(Error::NoPsnrOverlap)));
    assert!(RDCurve::new(vec![(0.0, 30.0)]).is_err());
    assert!(RDCurve::new(vec![(1.0, 30.0), (1.0, 31.0)]).is_err());
    assert!(RDCurve::new(vec![(1.0, f64::INFINITY)]).is_err());
    let (curve, dropped) = RDCurve::new_dropping_infinite(vec![(1.0, 30.0), (2.0, f64::INFINITY)]).unwrap();
    assert_eq!((curve.len(), dropped), (1, 1));
}

#[test]
fn rd_csv_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        RdRow {
            bpip: 0.25,
            psnr: [30.1, 35.2, 36.3],
        },
        RdRow {
            bpip: 0.5,
            psnr: [32.5, 37.0, 38.125],
        },
    ];
    let path = dir.path().join("rd.csv");
    write_rd_csv(&rows, &path).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("bpip,psnr_y,psnr_cb,psnr_cr\n"));
    assert_eq!(read_rd_csv(&path).unwrap(), rows);
    let (cb, _) = component_curve(&rows, 1).unwrap();
    assert_eq!(cb.points(), &[(0.25, 35.2), (0.5, 37.0)]);

    for bad in [
        "rate,psnr\n1,2\n",
        "bpip,psnr_y,psnr_cb,psnr_cr\n1,2,3\n",
        "bpip,psnr_y,psnr_cb,psnr_cr\n1,x,3,4\n",
        "",
    ] {
        std::fs::write(&path, bad).unwrap();
        assert!(matches!(read_rd_csv(&path), Err(Error::MalformedCsv { .. })), "{bad:?}");
    }
}

fn curve_strategy() -> impl Strategy<Value = RDCurve> {
    (
        0.1f64..1.0,
        prop::collection::vec(0.5f64..1.5, 4..7),
        25.0f64..35.0,
        prop::collection::vec(1.0f64..4.0, 4..7),
    )
        .prop_map(|(r0, rate_steps, p0, psnr_steps)| {
            let n = rate_steps.len().min(psnr_steps.len());
            let mut r = r0;
            let mut p = p0;
            let pts = (0..n)
                .map(|i| {
                    r *= 1.0 + rate_steps[i];
                    p += psnr_steps[i];
                    (r, p)
                })
                .collect();
            RDCurve::new(pts).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rate_scaling_is_exact(curve in curve_strategy(), s in 0.2f64..5.0) {
        let got = bd_rate(&curve, &curve.scale_rate(s).unwrap()).unwrap();
        prop_assert!((got - (s - 1.0) * 100.0).abs() < 1e-6);
        prop_assert_eq!(bd_rate(&curve, &curve).unwrap(), 0.0);
    }

    #[test]
    fn bd_rate_is_antisymmetric(curve in curve_strategy(), s in 0.5f64..2.0, db in -0.5f64..0.5) {
        let other = curve.scale_rate(s).unwrap().shift_psnr(db).unwrap();
        let ab = bd_rate(&curve, &other).unwrap();
        let ba = bd_rate(&other, &curve).unwrap();
        let predicted = -ba / (1.0 + ba / 100.0);
        prop_assert!((ab - predicted).abs() < 1e-6 * ab.abs().max(1.0), "{} vs {}", ab, predicted);
    }

    #[test]
    fn psnr_is_symmetric_and_monotone(d1 in 0.1f64..50.0, extra in 0.1f64..50.0) {
        let a = Matrix::column(&[10.0, 80.0, 150.0]);
        let near = a.map(|v| v + d1);
        let far = a.map(|v| v + d1 + extra);
        prop_assert_eq!(psnr(&a, &near, PEAK).unwrap(), psnr(&near, &a, PEAK).unwrap());
        prop_assert!(psnr(&a, &far, PEAK).unwrap() < psnr(&a, &near, PEAK).unwrap());
    }
}
