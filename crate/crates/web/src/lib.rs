//! Browser demo: soft labels, a degradable toy cloud and a BD-rate calculator.

use bqe_core::data::rgb_to_ycbcr;
use bqe_core::metrics::{bd_rate, psnr, RDCurve};
use bqe_core::objectives::{qp_centers, soft_label_at, DistortionGrouping};
use bqe_core::rmc::recolor;
use bqe_core::toy::{toy_sequence, ToyConfig};
use bqe_core::training::degrade;
use bqe_core::PointCloudFrame;
use wasm_bindgen::prelude::*;

fn grouping(sigma: f64) -> DistortionGrouping {
    DistortionGrouping {
        sigma,
        ..DistortionGrouping::default()
    }
}

/// Soft label `[L, M, H]` for a (possibly fractional) QP under the default grouping.
#[wasm_bindgen]
pub fn soft_label(qp: f64, sigma: f64) -> Result<Vec<f64>, String> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err("sigma must be positive".into());
    }
    soft_label_at(qp, &grouping(sigma)).map(|g| g.to_vec()).map_err(|e| e.to_string())
}

/// Group centres `[L, M, H]` of the default grouping.
#[wasm_bindgen]
pub fn group_centers() -> Vec<f64> {
    qp_centers(&DistortionGrouping::default())
        .expect("default groups are non-empty")
        .to_vec()
}

fn parse_curve(text: &str) -> Result<RDCurve, String> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split([',', ' ', '\t']).filter(|f| !f.is_empty()).collect();
        let [rate, db] = fields[..] else {
            return Err(format!("line {}: expected `rate,psnr`", i + 1));
        };
        let parse = |s: &str| s.parse::<f64>().map_err(|_| format!("line {}: `{s}` is not a number", i + 1));
        points.push((parse(rate)?, parse(db)?));
    }
    RDCurve::new(points).map_err(|e| e.to_string())
}

/// BD-rate in percent of `test` against `anchor`, each given as `rate,psnr` lines.
#[wasm_bindgen]
pub fn bd_rate_text(anchor: &str, test: &str) -> Result<f64, String> {
    let a = parse_curve(anchor).map_err(|e| format!("anchor: {e}"))?;
    let t = parse_curve(test).map_err(|e| format!("test: {e}"))?;
    bd_rate(&a, &t).map_err(|e| e.to_string())
}

fn luma(frame: &PointCloudFrame) -> Result<PointCloudFrame, String> {
    rgb_to_ycbcr(frame).and_then(|f| f.channel(0)).map_err(|e| e.to_string())
}

fn luma_psnr(a: &PointCloudFrame, b: &PointCloudFrame) -> Result<f64, String> {
    psnr(luma(a)?.attributes(), luma(b)?.attributes(), 255.0).map_err(|e| e.to_string())
}

/// Two consecutive frames of a synthetic sequence; the second one is shown.
#[wasm_bindgen]
pub struct ToyScene {
    previous: PointCloudFrame,
    current: PointCloudFrame,
}

#[wasm_bindgen]
impl ToyScene {
    #[wasm_bindgen(constructor)]
    pub fn new(points: usize, seed: u64) -> Result<ToyScene, String> {
        let config = ToyConfig {
            frames: 2,
            points,
            seed,
            ..ToyConfig::default()
        };
        let mut frames = toy_sequence(&config).map_err(|e| e.to_string())?;
        let current = frames.pop().expect("two frames");
        let previous = frames.pop().expect("two frames");
        Ok(ToyScene { previous, current })
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    /// Positions as `x, y, z` triples, centred on the cloud's mean.
    pub fn positions(&self) -> Vec<f32> {
        let g = self.current.geometry();
        let n = g.len().max(1) as f64;
        let mean: [f64; 3] = std::array::from_fn(|i| g.iter().map(|v| f64::from(v[i])).sum::<f64>() / n);
        g.iter()
            .flat_map(|v| (0..3).map(move |i| (f64::from(v[i]) - mean[i]) as f32))
            .collect()
    }

    fn view(&self, qp: Option<i32>) -> Result<PointCloudFrame, String> {
        match qp {
            Some(qp) => degrade(&self.current, qp, &[qp]).map_err(|e| e.to_string()),
            None => Ok(self.current.clone()),
        }
    }

    /// RGB bytes per point; `qp` of zero or below shows the clean frame.
    pub fn colors(&self, qp: i32) -> Result<Vec<u8>, String> {
        let frame = self.view((qp > 0).then_some(qp))?;
        Ok(frame
            .attributes()
            .data()
            .iter()
            .map(|&v| v.round().clamp(0.0, 255.0) as u8)
            .collect())
    }

    /// Luma PSNR of the frame degraded at `qp` against the clean frame.
    pub fn degraded_psnr(&self, qp: i32) -> Result<f64, String> {
        luma_psnr(&self.view(Some(qp))?, &self.current)
    }

    /// Colours of the previous frame recoloured onto this geometry with `k` neighbours.
    pub fn recolored(&self, k: usize) -> Result<Vec<u8>, String> {
        let v = recolor(&self.previous, self.current.geometry(), k).map_err(|e| e.to_string())?;
        Ok(v.frame
            .attributes()
            .data()
            .iter()
            .map(|&c| c.round().clamp(0.0, 255.0) as u8)
            .collect())
    }

    /// Luma PSNR of the recoloured previous frame against this frame.
    pub fn recolor_psnr(&self, k: usize) -> Result<f64, String> {
        let v = recolor(&self.previous, self.current.geometry(), k).map_err(|e| e.to_string())?;
        luma_psnr(&v.frame, &self.current)
    }
}
