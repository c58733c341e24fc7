//! PSNR, the 6:1:1 YCbCr aggregate and Bjøntegaard BD-rate.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const PEAK: f64 = 255.0;

/// PSNR in dB; `f64::INFINITY` when the signals are identical.
pub fn psnr(a: &Matrix, b: &Matrix, peak: f64) -> Result<f64> {
    let mse = crate::objectives::bqe_loss(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn delta_psnr(enhanced: &Matrix, decoded: &Matrix, original: &Matrix) -> Result<f64> {
    let after = psnr(enhanced, original, PEAK)?;
    let before = psnr(decoded, original, PEAK)?;
    if after == before {
        return Ok(0.0);
    }
    Ok(after - before)
}

pub fn ycbcr_psnr(y: f64, cb: f64, cr: f64) -> f64 {
    (6.0 * y + cb + cr) / 8.0
}

/// Rate-distortion points sorted by strictly increasing rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RDCurve {
    points: Vec<(f64, f64)>,
}

impl RDCurve {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points
            .iter()
            .any(|&(r, p)| r.is_nan() || r <= 0.0 || !r.is_finite() || !p.is_finite())
        {
            return Err(Error::InvalidRdCurve("rates must be positive and PSNRs finite".into()));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if points.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidRdCurve("duplicate rate".into()));
        }
        Ok(Self { points })
    }

    /// Drops points with non-finite PSNR and reports how many were dropped.
    pub fn new_dropping_infinite(points: Vec<(f64, f64)>) -> Result<(Self, usize)> {
        let before = points.len();
        let kept: Vec<_> = points.into_iter().filter(|p| p.1.is_finite()).collect();
        let dropped = before - kept.len();
        Ok((Self::new(kept)?, dropped))
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn scale_rate(&self, s: f64) -> Result<Self> {
        Self::new(self.points.iter().map(|&(r, p)| (r * s, p)).collect())
    }

    pub fn shift_psnr(&self, db: f64) -> Result<Self> {
        Self::new(self.points.iter().map(|&(r, p)| (r, p + db)).collect())
    }

    fn psnr_range(&self) -> (f64, f64) {
        self.points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, p)| (lo.min(p), hi.max(p)))
    }
}

/// Cubic least-squares fit of `log10(rate)` against normalised PSNR.
struct LogRateFit {
    coeffs: [f64; 4],
    center: f64,
    scale: f64,
}

impl LogRateFit {
    fn new(curve: &RDCurve) -> Result<Self> {
        let n = curve.len();
        let (lo, hi) = curve.psnr_range();
        let center = 0.5 * (lo + hi);
        let scale = if hi > lo { 0.5 * (hi - lo) } else { 1.0 };
        let a = DMatrix::from_fn(n, 4, |i, j| ((curve.points[i].1 - center) / scale).powi(j as i32));
        let b = DVector::from_fn(n, |i, _| curve.points[i].0.log10());
        let svd = a.svd(true, true);
        let x = svd
            .solve(&b, 1e-12)
            .map_err(|e| Error::InvalidRdCurve(format!("cubic fit failed: {e}")))?;
        Ok(Self {
            coeffs: [x[0], x[1], x[2], x[3]],
            center,
            scale,
        })
    }

    /// Integral of the fitted log-rate over PSNR in `[lo, hi]`.
    fn integrate(&self, lo: f64, hi: f64) -> f64 {
        let antiderivative = |x: f64| {
            let u = (x - self.center) / self.scale;
            self.coeffs
                .iter()
                .enumerate()
                .map(|(j, c)| c * u.powi(j as i32 + 1) / (j as f64 + 1.0))
                .sum::<f64>()
        };
        self.scale * (antiderivative(hi) - antiderivative(lo))
    }
}

/// Average rate change of `test` against `anchor` at equal PSNR, in percent.
pub fn bd_rate(anchor: &RDCurve, test: &RDCurve) -> Result<f64> {
    for c in [anchor, test] {
        if c.len() < 4 {
            return Err(Error::TooFewRdPoints(c.len()));
        }
    }
    let (a_lo, a_hi) = anchor.psnr_range();
    let (t_lo, t_hi) = test.psnr_range();
    let lo = a_lo.max(t_lo);
    let hi = a_hi.min(t_hi);
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return Err(Error::NoPsnrOverlap);
    }
    let fa = LogRateFit::new(anchor)?;
    let ft = LogRateFit::new(test)?;
    let mean_diff = (ft.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo);
    Ok((10f64.powf(mean_diff) - 1.0) * 100.0)
}

/// One row of an RD CSV: a rate and the Y, Cb, Cr PSNRs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdRow {
    pub bpip: f64,
    pub psnr: [f64; 3],
}

pub const RD_HEADER: &str = "bpip,psnr_y,psnr_cb,psnr_cr";

pub fn read_rd_csv(path: &Path) -> Result<Vec<RdRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::MalformedCsv {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| malformed("empty file".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns != RD_HEADER.split(',').collect::<Vec<_>>() {
        return Err(malformed(format!("expected header `{RD_HEADER}`, found `{header}`")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| malformed(format!("row {}: {e}", i + 1)))?;
            if fields.len() != 4 {
                return Err(malformed(format!("row {}: expected 4 fields, found {}", i + 1, fields.len())));
            }
            Ok(RdRow {
                bpip: fields[0],
                psnr: [fields[1], fields[2], fields[3]],
            })
        })
        .collect()
}

pub fn write_rd_csv(rows: &[RdRow], path: &Path) -> Result<()> {
    let mut out = String::from(RD_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.bpip, r.psnr[0], r.psnr[1], r.psnr[2]));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::UnwritablePath {
        path: path.to_path_buf(),
        source: e,
    })?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// The curve of one component (0 = Y, 1 = Cb, 2 = Cr), dropping infinite points.
pub fn component_curve(rows: &[RdRow], component: usize) -> Result<(RDCurve, usize)> {
    RDCurve::new_dropping_infinite(rows.iter().map(|r| (r.bpip, r.psnr[component])).collect())
}
