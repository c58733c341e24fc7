use bqe_core::metrics::RDCurve;
use bqe_core::tensor::Matrix;

/// Cubic through four points in Lagrange form, evaluated directly.
fn lagrange(points: &[(f64, f64)], x: f64) -> f64 {
    let mut total = 0.0;
    for (i, &(xi, yi)) in points.iter().enumerate() {
        let mut term = yi;
        for (j, &(xj, _)) in points.iter().enumerate() {
            if i != j {
                term *= (x - xj) / (xi - xj);
            }
        }
        total += term;
    }
    total
}

/// Trapezoid integration of the log-rate gap on a 10⁴-interval grid.
pub fn bd_oracle(a: &RDCurve, b: &RDCurve) -> f64 {
    let fit = |c: &RDCurve| -> Vec<(f64, f64)> { c.points().iter().map(|&(r, p)| (p, r.log10())).collect() };
    let (fa, fb) = (fit(a), fit(b));
    let range = |f: &[(f64, f64)]| {
        f.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.0), h.max(p.0)))
    };
    let (la, ha) = range(&fa);
    let (lb, hb) = range(&fb);
    let (lo, hi) = (la.max(lb), ha.min(hb));
    let steps = 10_000;
    let h = (hi - lo) / steps as f64;
    let gap = |x: f64| lagrange(&fb, x) - lagrange(&fa, x);
    let mut area = 0.5 * (gap(lo) + gap(hi));
    for i in 1..steps {
        area += gap(lo + i as f64 * h);
    }
    let mean = area * h / (hi - lo);
    (10f64.powf(mean) - 1.0) * 100.0
}

/// Sorts every support point by (squared distance, index): the reference answer.
pub fn knn_oracle(query: &Matrix, support: &Matrix, k: usize) -> Vec<Vec<(usize, f64)>> {
    (0..query.rows())
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..support.rows())
                .map(|j| {
                    let d2: f64 = (0..3).map(|c| (query.get(i, c) - support.get(j, c)).powi(2)).sum();
                    (d2, j)
                })
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|(d2, j)| (j, d2.sqrt())).collect()
        })
        .collect()
}
