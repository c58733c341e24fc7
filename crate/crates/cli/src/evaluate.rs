//! Anchor-versus-test comparison of rate–PSNR CSVs.

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use bqe_core::metrics::{bd_rate, component_curve, read_rd_csv, ycbcr_psnr, RDCurve, RdRow};
use clap::Args;
use plotters::prelude::*;
use serde::Serialize;

use crate::run::Recorder;
use crate::GlobalArgs;

const COMPONENTS: [&str; 3] = ["y", "cb", "cr"];

#[derive(Args, Debug)]
pub struct Evaluate {
    #[arg(long)]
    pub anchor: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Writes `report.json`, one SVG per component and copies of both CSVs.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowDelta {
    pub anchor_bpip: f64,
    pub test_bpip: f64,
    /// Test minus anchor, per component.
    pub delta: [f64; 3],
    /// 6:1:1 aggregate of the deltas.
    pub delta_ycbcr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub rows: Vec<RowDelta>,
    pub mean_delta: [f64; 3],
    pub mean_delta_ycbcr: f64,
    /// Per-component BD-rate in percent; `None` when it cannot be computed.
    pub bd_rate: [Option<f64>; 3],
    pub notes: Vec<String>,
}

pub fn compare(anchor: &[RdRow], test: &[RdRow]) -> Result<Report> {
    ensure!(!anchor.is_empty(), "anchor CSV has no rows");
    ensure!(
        anchor.len() == test.len(),
        "anchor has {} rate points but test has {}",
        anchor.len(),
        test.len()
    );
    let rows: Vec<RowDelta> = anchor
        .iter()
        .zip(test)
        .map(|(a, t)| {
            let delta = std::array::from_fn(|c| t.psnr[c] - a.psnr[c]);
            RowDelta {
                anchor_bpip: a.bpip,
                test_bpip: t.bpip,
                delta,
                delta_ycbcr: ycbcr_psnr(delta[0], delta[1], delta[2]),
            }
        })
        .collect();
    let n = rows.len() as f64;
    let mean_delta = std::array::from_fn(|c| rows.iter().map(|r| r.delta[c]).sum::<f64>() / n);
    let mut notes = Vec::new();
    let mut bd = [None; 3];
    for (c, slot) in bd.iter_mut().enumerate() {
        let (a, dropped_a) = component_curve(anchor, c)?;
        let (t, dropped_t) = component_curve(test, c)?;
        if dropped_a + dropped_t > 0 {
            notes.push(format!(
                "{}: dropped {} points with infinite PSNR",
                COMPONENTS[c],
                dropped_a + dropped_t
            ));
        }
        match bd_rate(&a, &t) {
            Ok(v) => *slot = Some(v),
            Err(e) => notes.push(format!("{}: BD-rate unavailable: {e}", COMPONENTS[c])),
        }
    }
    Ok(Report {
        rows,
        mean_delta,
        mean_delta_ycbcr: ycbcr_psnr(mean_delta[0], mean_delta[1], mean_delta[2]),
        bd_rate: bd,
        notes,
    })
}

pub fn render(report: &Report) -> String {
    let mut out = String::from("rate    anchor_bpip  test_bpip   ΔY        ΔCb       ΔCr       ΔYCbCr\n");
    for (i, r) in report.rows.iter().enumerate() {
        out.push_str(&format!(
            "R{:<6} {:<12.6} {:<11.6} {:+.4}   {:+.4}   {:+.4}   {:+.4}\n",
            i + 1,
            r.anchor_bpip,
            r.test_bpip,
            r.delta[0],
            r.delta[1],
            r.delta[2],
            r.delta_ycbcr
        ));
    }
    let m = report.mean_delta;
    out.push_str(&format!(
        "mean                            {:+.4}   {:+.4}   {:+.4}   {:+.4}\n",
        m[0], m[1], m[2], report.mean_delta_ycbcr
    ));
    let bd: Vec<String> = report
        .bd_rate
        .iter()
        .zip(COMPONENTS)
        .map(|(v, c)| match v {
            Some(v) => format!("{c} {v:+.3}%"),
            None => format!("{c} n/a"),
        })
        .collect();
    out.push_str(&format!("BD-rate: {}\n", bd.join(", ")));
    for n in &report.notes {
        out.push_str(&format!("note: {n}\n"));
    }
    out
}

fn bounds(curves: &[&RDCurve]) -> ((f64, f64), (f64, f64)) {
    let pts = curves.iter().flat_map(|c| c.points().iter());
    let (mut x, mut y) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
    for &(r, p) in pts {
        x = (x.0.min(r), x.1.max(r));
        y = (y.0.min(p), y.1.max(p));
    }
    let pad = |(lo, hi): (f64, f64)| {
        let m = ((hi - lo) * 0.05).max(1e-3);
        (lo - m, hi + m)
    };
    (pad(x), pad(y))
}

fn plot_component(path: &Path, name: &str, anchor: &RDCurve, test: &RDCurve) -> Result<()> {
    let ((x0, x1), (y0, y1)) = bounds(&[anchor, test]);
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("rate-PSNR ({name})"), ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)?;
    chart.configure_mesh().x_desc("bits per input point").y_desc("PSNR (dB)").draw()?;
    for (curve, colour, label) in [(anchor, BLUE, "anchor"), (test, RED, "test")] {
        let pts = curve.points().to_vec();
        chart
            .draw_series(LineSeries::new(pts.clone(), colour.stroke_width(2)))?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], colour));
        chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 4, colour.filled())))?;
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw()?;
    root.present()?;
    Ok(())
}

impl Evaluate {
    pub fn run(&self, _global: &GlobalArgs, recorder: &mut Recorder) -> Result<()> {
        let anchor = read_rd_csv(&self.anchor)?;
        let test = read_rd_csv(&self.test)?;
        recorder.input(&self.anchor);
        recorder.input(&self.test);
        let report = compare(&anchor, &test)?;
        print!("{}", render(&report));
        if let Some(dir) = &self.out_dir {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let json = dir.join("report.json");
            std::fs::write(&json, serde_json::to_string_pretty(&report)? + "\n")?;
            recorder.output(&json);
            for (src, name) in [(&self.anchor, "anchor.csv"), (&self.test, "test.csv")] {
                let dst = dir.join(name);
                std::fs::copy(src, &dst).with_context(|| format!("copying {}", src.display()))?;
                recorder.output(&dst);
            }
            for (c, name) in COMPONENTS.iter().enumerate() {
                let (a, _) = component_curve(&anchor, c)?;
                let (t, _) = component_curve(&test, c)?;
                if a.is_empty() || t.is_empty() {
                    continue;
                }
                let svg = dir.join(format!("rd_{name}.svg"));
                plot_component(&svg, name, &a, &t).map_err(|e| anyhow::anyhow!("plotting {}: {e}", svg.display()))?;
                recorder.output(&svg);
            }
            recorder.default_path(dir.join("run.json"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(scale: f64, shift: f64) -> Vec<RdRow> {
        [(0.5, 35.0), (1.0, 38.0), (2.0, 41.0), (4.0, 44.0)]
            .iter()
            .map(|&(r, p)| RdRow {
                bpip: r * scale,
                psnr: [p + shift, p + 5.0 + shift, p + 6.0 + shift],
            })
            .collect()
    }

    #[test]
    fn identical_inputs_give_zero_deltas() {
        let r = compare(&rows(1.0, 0.0), &rows(1.0, 0.0)).unwrap();
        assert!(r.rows.iter().all(|row| row.delta == [0.0; 3] && row.delta_ycbcr == 0.0));
        assert_eq!(r.bd_rate, [Some(0.0); 3]);
    }

    #[test]
    fn scaled_rates_and_shifted_psnr() {
        let r = compare(&rows(1.0, 0.0), &rows(1.1, 0.0)).unwrap();
        assert!(r.bd_rate.iter().all(|v| (v.unwrap() - 10.0).abs() < 1e-6));
        let r = compare(&rows(1.0, 0.0), &rows(1.0, 0.5)).unwrap();
        assert!(r.rows.iter().all(|row| (row.delta_ycbcr - 0.5).abs() < 1e-12));
        assert!(r.bd_rate[0].unwrap() < 0.0);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(compare(&rows(1.0, 0.0), &rows(1.0, 0.0)[..3]).is_err());
    }

    #[test]
    fn too_few_points_become_a_note() {
        let r = compare(&rows(1.0, 0.0)[..3], &rows(1.0, 0.0)[..3]).unwrap();
        assert_eq!(r.bd_rate, [None; 3]);
        assert_eq!(r.notes.len(), 3);
        assert!(render(&r).contains("BD-rate: y n/a"));
    }
}
