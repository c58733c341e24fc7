//! Pipeline subcommands.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use bqe_core::checkpoint::{load_model, load_qe, save_model, save_qe};
use bqe_core::data::{rgb_to_ycbcr, ycbcr_to_rgb};
use bqe_core::metrics::delta_psnr;
use bqe_core::model::{enhance_frame, prepare_window, qe_quality, Ablation, PatchConfig};
use bqe_core::neighborhood::generate_patches;
use bqe_core::objectives::level_of;
use bqe_core::ply::{load_ply, save_ply};
use bqe_core::rmc::recolor;
use bqe_core::toy::{toy_sequence, ToyConfig};
use bqe_core::training::{
    component_frames, degrade, load_pairs, read_manifest, samples_from_degraded, split_frames, train_bqe, train_qe, write_manifest,
    ManifestEntry, TrainingConfig, TrainingSample,
};
use bqe_core::{Component, PointCloudFrame};
use clap::Args;
use serde::Serialize;

use crate::run::Recorder;
use crate::GlobalArgs;

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:04}.ply")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// `.ply` files in `dir`, sorted by name.
pub fn list_plys(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")));
    files.sort();
    ensure!(!files.is_empty(), "no .ply files in {}", dir.display());
    Ok(files)
}

fn load_sequence(files: &[PathBuf], recorder: &mut Recorder) -> Result<Vec<PointCloudFrame>> {
    files
        .iter()
        .enumerate()
        .map(|(t, p)| {
            recorder.input(p);
            let mut f = load_ply(p).with_context(|| format!("loading {}", p.display()))?;
            f.frame_index = t;
            Ok(f)
        })
        .collect()
}

/// Parses `A..B` (half open), `A..=B` or a single index against a sequence length.
pub fn parse_range(text: &str, len: usize) -> Result<std::ops::Range<usize>> {
    let parse = |s: &str, default: usize| -> Result<usize> {
        if s.is_empty() {
            Ok(default)
        } else {
            s.trim().parse().with_context(|| format!("bad frame index `{s}`"))
        }
    };
    let range = if let Some((a, b)) = text.split_once("..=") {
        parse(a, 0)?..parse(b, len.saturating_sub(1))? + 1
    } else if let Some((a, b)) = text.split_once("..") {
        parse(a, 0)?..parse(b, len)?
    } else {
        let t = parse(text, 0)?;
        t..t + 1
    };
    ensure!(
        range.start < range.end && range.end <= len,
        "frame range `{text}` is empty or exceeds the {len} frames available"
    );
    Ok(range)
}

#[derive(Args, Debug)]
pub struct MakeToyData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub frames: usize,
    #[arg(long, default_value_t = 512)]
    pub points: usize,
    /// Degradation levels; defaults to the configured QP list.
    #[arg(long, value_delimiter = ',')]
    pub qps: Option<Vec<i32>>,
}

impl MakeToyData {
    pub fn run(&self, global: &GlobalArgs, recorder: &mut Recorder) -> Result<()> {
        let config = global.training_config()?;
        let qps = self.qps.clone().unwrap_or(config.qps.clone());
        ensure!(!qps.is_empty(), "no QPs given");
        let toy = ToyConfig {
            frames: self.frames,
            points: self.points,
            seed: config.seed,
            ..ToyConfig::default()
        };
        let clean = toy_sequence(&toy)?;
        let clean_dir = self.out.join("clean");
        create_dir(&clean_dir)?;
        let mut entries = Vec::new();
        for frame in &clean {
            let path = clean_dir.join(frame_name(frame.frame_index));
            save_ply(frame, &path)?;
            recorder.output(&path);
        }
        for &qp in &qps {
            let dir = self.out.join(format!("qp{qp}"));
            create_dir(&dir)?;
            for frame in &clean {
                let path = dir.join(frame_name(frame.frame_index));
                save_ply(&degrade(frame, qp, &qps)?, &path)?;
                recorder.output(&path);
                entries.push(ManifestEntry {
                    clean_path: clean_dir.join(frame_name(frame.frame_index)),
                    degraded_path: path,
                    qp,
                    frame_index: frame.frame_index,
                });
            }
        }
        let pairs = self.out.join("pairs.csv");
        write_manifest(&entries, &pairs)?;
        recorder.output(&pairs);
        recorder.default_path(self.out.join("run.json"));
        println!(
            "wrote {} clean and {} degraded frames ({} points each) to {}",
            clean.len(),
            entries.len(),
            self.points,
            self.out.display()
        );
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Recolor {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reference points blended per target point; defaults to the model setting.
    #[arg(long)]
    pub k: Option<usize>,
}

impl Recolor {
    pub fn run(&self, global: &GlobalArgs, recorder: &mut Recorder) -> Result<()> {
        let config = global.training_config()?;
        let reference = load_ply(&self.reference)?;
        let target = load_ply(&self.target)?;
        recorder.input(&self.reference);
        recorder.input(&self.target);
        let virtual_frame = recolor(&reference, target.geometry(), self.k.unwrap_or(config.model.recolor_k))?;
        let mut out = virtual_frame.frame;
        out.frame_index = target.frame_index;
        save_ply(&out, &self.out)?;
        recorder.output(&self.out);
        recorder.default_path(self.out.with_extension("run.json"));
        println!("recoloured {} target points from {} reference points", out.len(), reference.len());
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Patch {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Points per patch; defaults to the configured patch size.
    #[arg(long)]
    pub size: Option<usize>,
    /// Stride as a fraction of the patch size.
    #[arg(long)]
    pub stride: Option<f64>,
}

#[derive(Serialize)]
struct PatchIndex<'a> {
    source: &'a Path,
    origin_n: usize,
    patch_size: usize,
    stride: f64,
    patches: &'a [Vec<usize>],
}

impl Patch {
    pub fn run(&self, global: &GlobalArgs, recorder: &mut Recorder) -> Result<()> {
        let config = global.training_config()?;
        let (size, stride) = (self.size.unwrap_or(config.patch_size), self.stride.unwrap_or(config.patch_stride));
        let frame = load_ply(&self.input)?;
        recorder.input(&self.input);
        let set = generate_patches(&frame, size, stride)?;
        create_dir(&self.out_dir)?;
        for (i, idx) in set.patches.iter().enumerate() {
            let path = self.out_dir.join(format!("patch_{i:04}.ply"));
            save_ply(&frame.subset(idx), &path)?;
            recorder.output(&path);
        }
        let index_path = self.out_dir.join("patches.json");
        let index = PatchIndex {
            source: &self.input,
            origin_n: set.origin_n,
            patch_size: size,
            stride,
            patches: &set.patches,
        };
        std::fs::write(&index_path, serde_json::to_string(&index)? + "\n")?;
        recorder.output(&index_path);
        recorder.default_path(self.out_dir.join("run.json"));
        println!("{} patches of up to {size} points over {} points", set.len(), set.origin_n);
        Ok(())
    }
}

/// Loads a pair manifest and cuts training and validation samples.
fn load_split(pairs: &Path, config: &TrainingConfig, recorder: &mut Recorder) -> Result<(Vec<TrainingSample>, Vec<TrainingSample>)> {
    let entries = read_manifest(pairs)?;
    recorder.input(pairs);
    for e in &entries {
        recorder.input(&e.degraded_path);
    }
    let mut clean_paths: Vec<&PathBuf> = entries.iter().map(|e| &e.clean_path).collect();
    clean_paths.sort();
    clean_paths.dedup();
    for p in clean_paths {
        recorder.input(p);
    }
    let (clean, degraded) = load_pairs(&entries, config.model.component)?;
    let (train, val) = split_frames(clean.len(), config.validation_fraction);
    Ok((
        samples_from_degraded(&clean, &degraded, &train, config)?,
        samples_from_degraded(&clean, &degraded, &val, config)?,
    ))
}

fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("log.csv")
}

#[derive(Args, Debug)]
pub struct TrainQe {
    /// Pair manifest (`clean_path,degraded_path,qp,frame_index`).
    #[arg(long)]
    pub pairs: PathBuf,
    /// Output QE checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}

impl TrainQe {
    pub fn run(&self, global: &GlobalArgs, recorder: &mut Recorder) -> Result<()> {
        let config = global.training_config()?;
        let (train, val) = load_split(&self.pairs, &config, recorder)?;
        let trained = train_qe(&train, &config)?;
        for w in &trained.log.warnings {
            eprintln!("warning: {w}");
        }
        save_qe(&trained.params, &self.out)?;
        trained.log.write_csv(&log_path(&self.out))?;
        recorder.output(&self.out);
        recorder.log(log_path(&self.out));
        recorder.default_path(self.out.with_extension("run.json"));
        let last = trained.log.epochs.last().map_or(f64::NAN, |e| e.loss);
        println!("QE trained on {} samples: final loss {last:.4}", train.len());
        if !val.is_empty() {
            let mut correct = 0;
            for s in &val {
                let p = qe_quality(&trained.params, &prepare_window(&s.window, &config.model)?);
                correct += usize::from(Some(p.argmax()) == level_of(s.qp, &config.grouping));
            }
            println!("held-out level accuracy {correct}/{}", val.len());
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Train {
    #[arg(long)]
    pub pairs: PathBuf,
    /// Stage-1 checkpoint; required unless the QE ablation is selected.
    #[arg(long)]
    pub qe: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated switches: no-tcca, no-pe, no-na, no-qe.
    #[arg(long, default_value = "none")]
    pub ablation: Ablation,
    /// Shorthand for `--ablation no-qe`.
    #[arg(long)]
    pub no_qe: bool,
}

impl Train {
    pub fn run(&self, global: &GlobalArgs, recorder: &mut Recorder) -> Result<()> {
        let mut config = global.training_config()?;
        config.model.ablation = self.ablation;
        config.model.ablation.no_qe |= self.no_qe;
        let qe = match (&self.qe, config.model.ablation.no_qe) {
            (Some(_), true) => bail!("--qe conflicts with the no-qe ablation"),
            (None, false) => bail!("stage 2 needs a QE checkpoint from `train-qe` (or pass --no-qe)"),
            (None, true) => None,
            (Some(path), false) => {
                recorder.input(path);
                let qe = load_qe(path).with_context(|| format!("loading {}", path.display()))?;
                check_component(qe.config.component, config.model.component, path)?;
                Some(qe)
            }
        };
        let (train, val) = load_split(&self.pairs, &config, recorder)?;
        let trained = train_bqe(&train, qe, &config)?;
        save_model(&trained.params, &self.out)?;
        trained.log.write_csv(&log_path(&self.out))?;
        recorder.output(&self.out);
        recorder.log(log_path(&self.out));
        recorder.default_path(self.out.with_extension("run.json"));
        let last = trained.log.epochs.last().map_or(f64::NAN, |e| e.loss);
        println!(
            "trained on {} samples in {} steps: final loss {last:.4}",
            train.len(),
            trained.log.steps.len()
        );
        if !val.is_empty() {
            let mut gains = Vec::new();
            for s in &val {
                let prepared = prepare_window(&s.window, &config.model)?;
                let out = bqe_core::model::enhance_prepared(&trained.params, &prepared, trained.params.quality(&prepared))?;
                gains.push(delta_psnr(out.attributes(), s.window.target().attributes(), &s.original)?);
            }
            print_mean_gain("held-out", &gains);
        }
        Ok(())
    }
}

fn check_component(checkpoint: Component, requested: Component, path: &Path) -> Result<()> {
    ensure!(
        checkpoint == requested,
        "{} was trained on component {} but --component is {}",
        path.display(),
        checkpoint.as_str(),
        requested.as_str()
    );
    Ok(())
}

fn print_mean_gain(what: &str, gains: &[f64]) {
    let finite: Vec<f64> = gains.iter().copied().filter(|g| g.is_finite()).collect();
    if finite.is_empty() {
        println!("{what} mean ΔPSNR: undefined (lossless inputs)");
    } else {
        println!(
            "{what} mean ΔPSNR {:+.3} dB over {} frames",
            finite.iter().sum::<f64>() / finite.len() as f64,
            finite.len()
        );
    }
}

#[derive(Args, Debug)]
pub struct Enhance {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of decoded frames, ordered by file name.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Frames to enhance: `A..B`, `A..=B` or a single index. Defaults to all.
    #[arg(long)]
    pub frames: Option<String>,
    /// Clean frames with matching names, for per-frame ΔPSNR.
    #[arg(long)]
    pub originals: Option<PathBuf>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub stride: Option<f64>,
}

/// Replaces the enhanced component and returns a frame in the input's colour space.
fn merge_component(decoded: &PointCloudFrame, enhanced: &PointCloudFrame, component: Component) -> Result<PointCloudFrame> {
    if decoded.channels() == 1 {
        return Ok(decoded.with_attributes(enhanced.attributes().clone())?);
    }
    let ycc = rgb_to_ycbcr(decoded)?;
    let mut attrs = ycc.attributes().clone();
    for r in 0..attrs.rows() {
        attrs.set(r, component.channel(), enhanced.attributes().get(r, 0));
    }
    Ok(ycbcr_to_rgb(&ycc.with_attributes(attrs)?)?)
}

impl Enhance {
    pub fn run(&self, global: &GlobalArgs, recorder: &mut Recorder) -> Result<()> {
        let config = global.training_config()?;
        let params = load_model(&self.checkpoint).with_context(|| format!("loading {}", self.checkpoint.display()))?;
        recorder.input(&self.checkpoint);
        check_component(params.config.component, global.component, &self.checkpoint)?;
        let files = list_plys(&self.input)?;
        let decoded = load_sequence(&files, recorder)?;
        let component = params.config.component;
        let channel = component_frames(&decoded, component)?;
        let range = match &self.frames {
            Some(text) => parse_range(text, decoded.len())?,
            None => 0..decoded.len(),
        };
        let originals = match &self.originals {
            Some(dir) => {
                let files = list_plys(dir)?;
                ensure!(
                    files.len() == decoded.len(),
                    "{} has {} frames but {} has {}",
                    dir.display(),
                    files.len(),
                    self.input.display(),
                    decoded.len()
                );
                Some(component_frames(&load_sequence(&files, recorder)?, component)?)
            }
            None => None,
        };
        let patches = PatchConfig {
            patch_size: self.patch_size.unwrap_or(config.patch_size),
            stride: self.stride.unwrap_or(config.patch_stride),
        };
        create_dir(&self.out)?;
        let mut gains = Vec::new();
        for t in range {
            let enhanced = enhance_frame(&channel, t, &params, patches)?;
            let name = files[t].file_name().expect("listed files have names");
            let path = self.out.join(name);
            save_ply(&merge_component(&decoded[t], &enhanced, component)?, &path)?;
            recorder.output(&path);
            match &originals {
                Some(orig) => {
                    ensure!(orig[t].same_geometry(&decoded[t]), "original frame {t} has a different geometry");
                    let gain = delta_psnr(enhanced.attributes(), channel[t].attributes(), orig[t].attributes())?;
                    println!("{} ΔPSNR({}) {gain:+.3} dB", name.to_string_lossy(), component.as_str());
                    gains.push(gain);
                }
                None => println!("{} enhanced ({} points)", name.to_string_lossy(), enhanced.len()),
            }
        }
        if originals.is_some() {
            print_mean_gain("sequence", &gains);
        }
        recorder.default_path(self.out.join("run.json"));
        Ok(())
    }
}
