//! Dataset assembly with a synthetic distortion oracle and the two-stage
//! training procedure: QE first, then the rest of the network with QE frozen.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_window, rgb_to_ycbcr, Component, PointCloudFrame, TemporalWindow};
use crate::error::{Error, Result};
use crate::model::{bqe_loss_and_grad, prepare_window, qe_loss_and_grad, BqeParams, ModelConfig, PreparedWindow, QeParams, QualityVector};
use crate::neighborhood::generate_patches;
use crate::objectives::{level_of, soft_label, DistortionGrouping};
use crate::parallel::map_indexed;
use crate::ply::load_ply;
use crate::rmc::compensate_window;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stage-1 overrides; the stage-2 values apply when unset.
    pub qe_epochs: Option<usize>,
    pub qe_learning_rate: Option<f64>,
    /// Stops stage 2 after this many optimiser steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub patch_size: usize,
    pub patch_stride: f64,
    /// Trailing fraction of each sequence held out for validation.
    pub validation_fraction: f64,
    pub qps: Vec<i32>,
    pub grouping: DistortionGrouping,
    pub model: ModelConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let grouping = DistortionGrouping::default();
        Self {
            epochs: 50,
            batch_size: 10,
            learning_rate: 1e-4,
            qe_epochs: None,
            qe_learning_rate: None,
            max_steps: None,
            seed: 0,
            patch_size: 2048,
            patch_stride: 0.5,
            validation_fraction: 0.2,
            qps: grouping.all_qps(),
            grouping,
            model: ModelConfig::default(),
        }
    }
}

impl TrainingConfig {
    /// Desk-scale schedule for the synthetic sequences: toy widths, one
    /// patch per 512-point frame, full-batch steps at a larger learning rate.
    pub fn toy() -> Self {
        Self {
            epochs: 200,
            batch_size: 15,
            learning_rate: 2e-3,
            qe_epochs: Some(300),
            qe_learning_rate: Some(3e-3),
            max_steps: Some(200),
            patch_size: 512,
            qps: vec![51, 40, 22],
            model: ModelConfig::toy(),
            ..Self::default()
        }
    }

    pub fn radius(&self) -> usize {
        self.model.radius
    }

    pub fn k(&self) -> usize {
        self.model.k
    }

    pub fn sigma(&self) -> f64 {
        self.grouping.sigma
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::InvalidConfig("epochs, batch_size and patch_size must be positive".into()));
        }
        for lr in [Some(self.learning_rate), self.qe_learning_rate].into_iter().flatten() {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::InvalidConfig(format!("learning rate {lr} must be finite and non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidConfig("validation_fraction must be in [0, 1)".into()));
        }
        if self.grouping.sigma.is_nan() || self.grouping.sigma <= 0.0 {
            return Err(Error::InvalidConfig("sigma must be positive".into()));
        }
        if let Some(q) = self.qps.iter().find(|&&q| level_of(q, &self.grouping).is_none()) {
            return Err(Error::UnknownQp(*q));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("training config serialises")
    }
}

/// Quantiser step for a QP: doubles every six QPs, 1 at QP 22.
pub fn quantization_step(qp: i32) -> f64 {
    2f64.powf(f64::from(qp - 22) / 6.0)
}

/// Synthetic codec stand-in: uniform attribute quantisation at the QP's
/// step, clamped to `[0, 255]`. Geometry is untouched.
pub fn degrade(frame: &PointCloudFrame, qp: i32, qps: &[i32]) -> Result<PointCloudFrame> {
    if !qps.contains(&qp) {
        return Err(Error::UnknownQp(qp));
    }
    let step = quantization_step(qp);
    let attrs = frame.attributes().map(|a| ((a / step).round() * step).clamp(0.0, 255.0));
    Ok(frame.with_attributes(attrs)?.with_qp(Some(qp)))
}

/// One degraded patch window paired with its clean target attributes.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    /// Compensated window, every frame on the target patch geometry.
    pub window: TemporalWindow,
    pub original: Matrix,
    pub qp: i32,
    pub frame_index: usize,
}

/// Frame indices used for training and for validation: the trailing
/// `validation_fraction` of the sequence is held out.
pub fn split_frames(len: usize, validation_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let held_out = ((len as f64) * validation_fraction).round() as usize;
    let held_out = held_out.min(len.saturating_sub(1));
    let cut = len - held_out;
    ((0..cut).collect(), (cut..len).collect())
}

/// Converts RGB frames to the requested component; one-channel frames pass through.
pub fn component_frames(frames: &[PointCloudFrame], component: Component) -> Result<Vec<PointCloudFrame>> {
    frames
        .iter()
        .map(|f| match f.channels() {
            1 => Ok(f.clone()),
            3 => rgb_to_ycbcr(f)?.channel(component.channel()),
            found => Err(Error::WrongChannelCount { expected: 3, found }),
        })
        .collect()
}

/// Samples from a clean sequence and its degraded versions, one per
/// (target frame, QP, patch), for the targets listed.
pub fn samples_from_degraded(
    clean: &[PointCloudFrame],
    degraded: &[(i32, Vec<PointCloudFrame>)],
    targets: &[usize],
    config: &TrainingConfig,
) -> Result<Vec<TrainingSample>> {
    for (qp, seq) in degraded {
        if seq.len() != clean.len() {
            return Err(Error::InvalidConfig(format!(
                "QP {qp}: {} degraded frames for {} clean frames",
                seq.len(),
                clean.len()
            )));
        }
        for (c, d) in clean.iter().zip(seq) {
            if !c.same_geometry(d) {
                return Err(Error::GeometryMismatch);
            }
        }
    }
    let jobs: Vec<(usize, usize)> = targets.iter().flat_map(|&t| (0..degraded.len()).map(move |q| (t, q))).collect();
    let built = map_indexed(jobs.len(), |j| -> Result<Vec<TrainingSample>> {
        let (t, q) = jobs[j];
        let (qp, seq) = &degraded[q];
        let window = compensate_window(&make_window(seq, t, config.radius())?, config.model.recolor_k)?;
        let patches = generate_patches(&seq[t], config.patch_size, config.patch_stride)?;
        patches
            .patches
            .iter()
            .map(|idx| {
                let frames = window.frames().iter().map(|f| f.subset(idx)).collect();
                let window = TemporalWindow::new(frames, config.radius())?;
                Ok(TrainingSample {
                    window,
                    original: clean[t].attributes().select_rows(idx),
                    qp: *qp,
                    frame_index: t,
                })
            })
            .collect()
    });
    let mut samples = Vec::new();
    for b in built {
        samples.extend(b?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    samples.shuffle(&mut rng);
    Ok(samples)
}

/// Degrades every sequence at every QP with the synthetic oracle and cuts
/// patch samples for all frames.
pub fn build_dataset(sequences: &[Vec<PointCloudFrame>], qps: &[i32], config: &TrainingConfig) -> Result<Vec<TrainingSample>> {
    build_dataset_for(sequences, qps, config, |len| (0..len).collect())
}

/// Training and validation sets split by [`split_frames`].
pub fn build_split(
    sequences: &[Vec<PointCloudFrame>],
    qps: &[i32],
    config: &TrainingConfig,
) -> Result<(Vec<TrainingSample>, Vec<TrainingSample>)> {
    let frac = config.validation_fraction;
    let train = build_dataset_for(sequences, qps, config, |len| split_frames(len, frac).0)?;
    let val = build_dataset_for(sequences, qps, config, |len| split_frames(len, frac).1)?;
    Ok((train, val))
}

fn build_dataset_for(
    sequences: &[Vec<PointCloudFrame>],
    qps: &[i32],
    config: &TrainingConfig,
    targets: impl Fn(usize) -> Vec<usize>,
) -> Result<Vec<TrainingSample>> {
    if sequences.is_empty() || sequences.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptySequence);
    }
    let mut all = Vec::new();
    for seq in sequences {
        let degraded = qps
            .iter()
            .map(|&qp| Ok((qp, seq.iter().map(|f| degrade(f, qp, qps)).collect::<Result<Vec<_>>>()?)))
            .collect::<Result<Vec<_>>>()?;
        all.extend(samples_from_degraded(seq, &degraded, &targets(seq.len()), config)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    all.shuffle(&mut rng);
    Ok(all)
}

/// One row of a pre-degraded pair manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub clean_path: PathBuf,
    pub degraded_path: PathBuf,
    pub qp: i32,
    pub frame_index: usize,
}

pub const MANIFEST_HEADER: &str = "clean_path,degraded_path,qp,frame_index";

/// Reads `clean_path,degraded_path,qp,frame_index` rows. Relative paths
/// resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let malformed = |reason: String| Error::MalformedCsv {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == MANIFEST_HEADER => {}
        other => return Err(malformed(format!("expected header `{MANIFEST_HEADER}`, found {other:?}"))),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(malformed(format!("row {}: expected 4 fields", i + 1)));
            }
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            Ok(ManifestEntry {
                clean_path: resolve(f[0]),
                degraded_path: resolve(f[1]),
                qp: f[2].parse().map_err(|e| malformed(format!("row {}: qp: {e}", i + 1)))?,
                frame_index: f[3].parse().map_err(|e| malformed(format!("row {}: frame_index: {e}", i + 1)))?,
            })
        })
        .collect()
}

/// Writes a manifest with paths relative to its directory where possible.
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut out = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{}\n",
            rel(&e.clean_path),
            rel(&e.degraded_path),
            e.qp,
            e.frame_index
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::UnwritablePath {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Degraded copies of a sequence, one per QP.
pub type DegradedSequences = Vec<(i32, Vec<PointCloudFrame>)>;

/// Loads manifest pairs as a clean sequence plus one degraded sequence per QP.
pub fn load_pairs(entries: &[ManifestEntry], component: Component) -> Result<(Vec<PointCloudFrame>, DegradedSequences)> {
    let mut frames: Vec<usize> = entries.iter().map(|e| e.frame_index).collect();
    frames.sort_unstable();
    frames.dedup();
    let mut qps: Vec<i32> = entries.iter().map(|e| e.qp).collect();
    qps.sort_unstable();
    qps.dedup();
    if frames.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut clean = Vec::with_capacity(frames.len());
    for &t in &frames {
        let entry = entries.iter().find(|e| e.frame_index == t).expect("frame listed");
        let mut f = component_frames(&[load_ply(&entry.clean_path)?], component)?.remove(0);
        f.frame_index = t;
        clean.push(f);
    }
    let mut degraded = Vec::with_capacity(qps.len());
    for &qp in &qps {
        let mut seq = Vec::with_capacity(frames.len());
        for (pos, &t) in frames.iter().enumerate() {
            let entry = entries
                .iter()
                .find(|e| e.frame_index == t && e.qp == qp)
                .ok_or_else(|| Error::InvalidConfig(format!("manifest lacks frame {t} at QP {qp}")))?;
            let f = component_frames(&[load_ply(&entry.degraded_path)?], component)?.remove(0);
            if f.geometry() != clean[pos].geometry() {
                return Err(Error::GeometryMismatch);
            }
            // Share the clean geometry so windows stay aligned.
            let mut f = clean[pos].with_attributes(f.attributes().clone())?.with_qp(Some(qp));
            f.frame_index = t;
            seq.push(f);
        }
        degraded.push((qp, seq));
    }
    Ok((clean, degraded))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let zeros: Vec<Matrix> = shapes.into_iter().map(|(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn for_store(learning_rate: f64, store: &crate::params::ParamStore) -> Self {
        Self::new(learning_rate, store.values().iter().map(Matrix::shape))
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Qe,
    Bqe,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Qe => "qe",
            Stage::Bqe => "bqe",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// Mean per-sample loss over the epoch, measured before each update.
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Mean batch loss of every optimiser step.
    pub steps: Vec<f64>,
    pub warnings: Vec<String>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,stage,loss,seconds\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.stage.as_str(), r.loss, r.seconds));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::UnwritablePath {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn append(&mut self, other: TrainingLog) {
        self.epochs.extend(other.epochs);
        self.steps.extend(other.steps);
        self.warnings.extend(other.warnings);
    }
}

#[derive(Clone, Debug)]
pub struct Trained<P> {
    pub params: P,
    pub log: TrainingLog,
}

/// Compensated, normalised windows of a dataset, computed once.
pub fn prepare_samples(dataset: &[TrainingSample], model: &ModelConfig) -> Result<Vec<PreparedWindow>> {
    map_indexed(dataset.len(), |i| prepare_window(&dataset[i].window, model))
        .into_iter()
        .collect()
}

/// Owners of a parameter store that the optimiser updates in place.
trait Trainable: Sync {
    fn store_mut(&mut self) -> &mut crate::params::ParamStore;
}

impl Trainable for QeParams {
    fn store_mut(&mut self) -> &mut crate::params::ParamStore {
        &mut self.store
    }
}

impl Trainable for BqeParams {
    fn store_mut(&mut self) -> &mut crate::params::ParamStore {
        &mut self.store
    }
}

/// Minibatch loop. `loss_grad` returns the per-sample loss and gradient;
/// batch gradients are averaged in sample order.
#[allow(clippy::too_many_arguments)]
fn optimise<P: Trainable>(
    model: &mut P,
    n_samples: usize,
    epochs: usize,
    learning_rate: f64,
    stage: Stage,
    max_steps: Option<usize>,
    config: &TrainingConfig,
    loss_grad: impl Fn(&P, usize) -> (f64, Vec<Matrix>) + Sync + Send,
) -> Result<TrainingLog> {
    let mut log = TrainingLog::default();
    let mut adam = Adam::for_store(learning_rate, model.store_mut());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e00 ^ stage as u64);
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut steps = 0usize;
    for epoch in 0..epochs {
        if max_steps.is_some_and(|m| steps >= m) {
            break;
        }
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            if max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let current: &P = model;
            let results = map_indexed(batch.len(), |i| loss_grad(current, batch[i]));
            let store = model.store_mut();
            let mut grads: Vec<Matrix> = store.values().iter().map(|v| Matrix::zeros(v.rows(), v.cols())).collect();
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "{} loss {loss} at epoch {epoch}, step {steps}",
                        stage.as_str()
                    )));
                }
                batch_loss += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.add_assign(gi);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.scale_in_place(scale));
            adam.step(store.values_mut(), &grads);
            if store.values().iter().any(|v| !v.all_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite {} parameters after step {steps}",
                    stage.as_str()
                )));
            }
            log.steps.push(batch_loss * scale);
            total += batch_loss;
            seen += batch.len();
            steps += 1;
        }
        if seen > 0 {
            log.epochs.push(EpochRecord {
                epoch,
                stage,
                loss: total / seen as f64,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(log)
}

/// Stage 1: fits the QE head to Gaussian soft labels of each sample's QP.
pub fn train_qe(dataset: &[TrainingSample], config: &TrainingConfig) -> Result<Trained<QeParams>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut warnings = Vec::new();
    let mut levels: Vec<usize> = dataset
        .iter()
        .map(|s| level_of(s.qp, &config.grouping).ok_or(Error::UnknownQp(s.qp)))
        .collect::<Result<_>>()?;
    levels.sort_unstable();
    levels.dedup();
    if levels.len() < 2 {
        warnings.push("dataset spans a single distortion level; QE reduces to fitting a constant label".to_string());
    }
    let labels: Vec<[f64; 3]> = dataset.iter().map(|s| soft_label(s.qp, &config.grouping)).collect::<Result<_>>()?;
    let prepared = prepare_samples(dataset, &config.model)?;
    let mut qe = QeParams::new(&config.model)?;
    let mut log = optimise(
        &mut qe,
        dataset.len(),
        config.qe_epochs.unwrap_or(config.epochs),
        config.qe_learning_rate.unwrap_or(config.learning_rate),
        Stage::Qe,
        None,
        config,
        |qe, i| qe_loss_and_grad(qe, &prepared[i], &labels[i]),
    )?;
    log.warnings.extend(warnings);
    Ok(Trained { params: qe, log })
}

/// Stage 2: trains everything but QE against the clean targets. QE is
/// evaluated once per sample and never updated.
pub fn train_bqe(dataset: &[TrainingSample], qe: Option<QeParams>, config: &TrainingConfig) -> Result<Trained<BqeParams>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut params = BqeParams::new(&config.model)?;
    params = match (config.model.ablation.no_qe, qe) {
        (true, None) => params,
        (true, Some(_)) => return Err(Error::InvalidConfig("no-qe ablation was given a QE head".into())),
        (false, Some(qe)) => params.with_qe(qe)?,
        (false, None) => return Err(Error::InvalidConfig("stage 2 needs a pre-trained QE head".into())),
    };
    let prepared = prepare_samples(dataset, &config.model)?;
    let qualities: Vec<QualityVector> = map_indexed(prepared.len(), |i| params.quality(&prepared[i]));
    let log = optimise(
        &mut params,
        dataset.len(),
        config.epochs,
        config.learning_rate,
        Stage::Bqe,
        config.max_steps,
        config,
        |params, i| bqe_loss_and_grad(params, &prepared[i], &dataset[i].original, qualities[i]),
    )?;
    Ok(Trained { params, log })
}
