//! The full enhancement network: temporal fusion, a progressive trunk with
//! shallow/medium/deep taps, the quality-estimation head, quality-weighted
//! fusion of the taps and a residual reconstruction head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Aggregation, Dcna, FeatureMap, KvAxis, Neighborhood, Tcca, TccaConfig, TemporalFusion, TemporalMlp};
use crate::autograd::{Graph, Var};
use crate::data::{Component, PointCloudFrame, TemporalWindow};
use crate::error::{Error, Result};
use crate::neighborhood::{knn, NeighborIndex};
use crate::params::{Bound, Linear, ParamStore};
use crate::rmc::compensate_window;
use crate::tensor::Matrix;

/// Architecture switches mirroring the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Replace TCCA by a pointwise MLP over the stacked window.
    pub no_tcca: bool,
    /// Drop the distance encoding inside NA blocks.
    pub no_pe: bool,
    /// Replace NA blocks by pointwise MLPs.
    pub no_na: bool,
    /// Remove the QE head and fuse with `p = [0, 0, 1]`.
    pub no_qe: bool,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    /// Parses `none`, `no-tcca`, `no-pe`, `no-na` or `no-qe` (comma separated).
    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.replace('_', "-").as_str() {
                "none" | "full" => {}
                "no-tcca" => a.no_tcca = true,
                "no-pe" => a.no_pe = true,
                "no-na" => a.no_na = true,
                "no-qe" => a.no_qe = true,
                other => return Err(Error::InvalidConfig(format!("unknown ablation `{other}`"))),
            }
        }
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QeConfig {
    pub width: usize,
    pub growth: usize,
    pub na_per_dcna: usize,
    pub dcna_count: usize,
}

impl Default for QeConfig {
    fn default() -> Self {
        Self {
            width: 32,
            growth: 16,
            na_per_dcna: 2,
            dcna_count: 1,
        }
    }
}

/// Network hyperparameters. Everything a checkpoint needs to rebuild the layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub component: Component,
    /// Attribute channels per point.
    pub attr_width: usize,
    /// Temporal radius `R`; the window holds `2R+1` frames.
    pub radius: usize,
    /// Neighbours per NA block.
    pub k: usize,
    /// Reference points blended per target point during recolouring.
    pub recolor_k: usize,
    pub tcca_hidden: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub tcca_out: usize,
    pub kv_axis: KvAxis,
    pub trunk_width: usize,
    pub growth: usize,
    pub na_per_dcna: usize,
    /// Cumulative DCNA counts of the shallow, medium and deep taps.
    pub stage_depths: [usize; 3],
    /// Width `c_f` of every tap.
    pub branch_width: usize,
    pub qe: QeConfig,
    pub ablation: Ablation,
    /// Attribute normalisation: the network sees `a / attr_scale`.
    pub attr_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            component: Component::Y,
            attr_width: 1,
            radius: 2,
            k: 20,
            recolor_k: crate::rmc::DEFAULT_RECOLOR_K,
            tcca_hidden: 32,
            d_k: 64,
            d_v: 64,
            tcca_out: 8,
            kv_axis: KvAxis::Token,
            trunk_width: 64,
            growth: 32,
            na_per_dcna: 2,
            stage_depths: [1, 2, 3],
            branch_width: 64,
            qe: QeConfig::default(),
            ablation: Ablation::default(),
            attr_scale: 255.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small widths for desk-scale experiments and tests.
    pub fn toy() -> Self {
        Self {
            k: 8,
            tcca_hidden: 16,
            d_k: 8,
            d_v: 8,
            tcca_out: 4,
            trunk_width: 16,
            growth: 8,
            na_per_dcna: 1,
            branch_width: 16,
            qe: QeConfig {
                width: 16,
                growth: 8,
                na_per_dcna: 1,
                dcna_count: 1,
            },
            ..Self::default()
        }
    }

    pub fn frames(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn validate(&self) -> Result<()> {
        let [s, m, d] = self.stage_depths;
        if !(s >= 1 && s < m && m < d) {
            return Err(Error::InvalidConfig(format!(
                "stage depths {:?} must be strictly increasing from 1",
                self.stage_depths
            )));
        }
        let positive = [
            ("attr_width", self.attr_width),
            ("k", self.k),
            ("recolor_k", self.recolor_k),
            ("tcca_hidden", self.tcca_hidden),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("tcca_out", self.tcca_out),
            ("trunk_width", self.trunk_width),
            ("growth", self.growth),
            ("na_per_dcna", self.na_per_dcna),
            ("branch_width", self.branch_width),
            ("qe.width", self.qe.width),
            ("qe.growth", self.qe.growth),
            ("qe.na_per_dcna", self.qe.na_per_dcna),
            ("qe.dcna_count", self.qe.dcna_count),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.attr_scale.is_nan() || self.attr_scale <= 0.0 {
            return Err(Error::InvalidConfig("attr_scale must be positive".into()));
        }
        Ok(())
    }

    fn aggregation(&self) -> Aggregation {
        if self.ablation.no_na {
            Aggregation::Pointwise
        } else {
            Aggregation::Neighborhood
        }
    }
}

/// `[p_L, p_M, p_H]` on the probability simplex.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityVector(pub [f64; 3]);

impl QualityVector {
    pub const HIGH_ONLY: QualityVector = QualityVector([0.0, 0.0, 1.0]);

    pub fn new(p: [f64; 3]) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::NonSimplexWeights(p));
        }
        Ok(Self(p))
    }

    pub fn low(&self) -> f64 {
        self.0[0]
    }

    pub fn medium(&self) -> f64 {
        self.0[1]
    }

    pub fn high(&self) -> f64 {
        self.0[2]
    }

    /// Index of the most likely level (0 = low, 1 = medium, 2 = high).
    pub fn argmax(&self) -> usize {
        crate::objectives::argmax3(&self.0)
    }
}

/// Quality-estimation network.
#[derive(Clone, Debug)]
pub struct QeNet {
    pub stem: Linear,
    pub stacks: Vec<Dcna>,
    pub pointwise: Linear,
    pub fc: Linear,
}

impl QeNet {
    fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let q = &config.qe;
        let stem = Linear::new(store, "qe.stem", config.attr_width + 3, q.width, rng);
        let stacks = (0..q.dcna_count)
            .map(|i| {
                Dcna::new(
                    store,
                    &format!("qe.dcna{i}"),
                    q.width,
                    q.growth,
                    q.na_per_dcna,
                    q.width,
                    config.aggregation(),
                    !config.ablation.no_pe,
                    rng,
                )
            })
            .collect();
        let pointwise = Linear::new(store, "qe.pointwise", q.width, q.width, rng);
        let fc = Linear::new(store, "qe.fc", q.width, 3, rng);
        Self {
            stem,
            stacks,
            pointwise,
            fc,
        }
    }

    /// Returns the `1×3` probability row.
    pub fn forward(&self, g: &mut Graph, p: &mut Bound, attrs: Var, geometry: Var, nbh: &Neighborhood) -> Var {
        let x = g.concat_cols(&[attrs, geometry]);
        let mut h = self.stem.forward_act(g, p, x);
        for stack in &self.stacks {
            h = stack.forward(g, p, h, nbh);
        }
        let h = self.pointwise.forward_act(g, p, h);
        let pooled = g.mean_rows(h);
        let logits = self.fc.forward(g, p, pooled);
        g.row_softmax(logits)
    }
}

/// Trained (or freshly initialised) QE parameters.
#[derive(Clone, Debug)]
pub struct QeParams {
    pub config: ModelConfig,
    pub net: QeNet,
    pub store: ParamStore,
}

impl QeParams {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5145_5f69_6e69_7400);
        let mut store = ParamStore::new();
        let net = QeNet::new(&mut store, config, &mut rng);
        Ok(Self {
            config: config.clone(),
            net,
            store,
        })
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }
}

/// Enhancement network except the QE head.
#[derive(Clone, Debug)]
pub struct BqeNet {
    pub fusion: TemporalFusion,
    pub stem: Linear,
    pub trunk: Vec<Dcna>,
    pub taps: [Linear; 3],
    pub head: Linear,
    pub stage_depths: [usize; 3],
}

/// Everything needed to run the model: θ without QE, plus the QE head.
#[derive(Clone, Debug)]
pub struct BqeParams {
    pub config: ModelConfig,
    pub net: BqeNet,
    pub store: ParamStore,
    pub qe: Option<QeParams>,
}

impl BqeParams {
    /// Fresh parameters. The head starts at zero, so the untrained model is
    /// the identity on attributes.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let tcca_cfg = TccaConfig {
            attr_width: config.attr_width,
            frames: config.frames(),
            hidden: config.tcca_hidden,
            d_k: config.d_k,
            d_v: config.d_v,
            out_width: config.tcca_out,
            kv_axis: config.kv_axis,
        };
        let fusion = if config.ablation.no_tcca {
            TemporalFusion::Mlp(TemporalMlp::new(&mut store, "fusion.mlp", tcca_cfg, &mut rng))
        } else {
            TemporalFusion::Attention(Tcca::new(&mut store, "fusion.tcca", tcca_cfg, &mut rng)?)
        };
        let c = config.trunk_width;
        let stem = Linear::new(&mut store, "trunk.stem", config.tcca_out + 3, c, &mut rng);
        let trunk = (0..config.stage_depths[2])
            .map(|i| {
                Dcna::new(
                    &mut store,
                    &format!("trunk.dcna{i}"),
                    c,
                    config.growth,
                    config.na_per_dcna,
                    c,
                    config.aggregation(),
                    !config.ablation.no_pe,
                    &mut rng,
                )
            })
            .collect();
        let taps = ["low", "medium", "high"].map(|name| Linear::new(&mut store, &format!("tap.{name}"), c, config.branch_width, &mut rng));
        let head = Linear::zeros(&mut store, "head", config.branch_width, config.attr_width);
        let qe = if config.ablation.no_qe {
            None
        } else {
            Some(QeParams::new(config)?)
        };
        Ok(Self {
            config: config.clone(),
            net: BqeNet {
                fusion,
                stem,
                trunk,
                taps,
                head,
                stage_depths: config.stage_depths,
            },
            store,
            qe,
        })
    }

    /// Replaces the QE head, e.g. with a pre-trained one.
    pub fn with_qe(mut self, qe: QeParams) -> Result<Self> {
        if self.config.ablation.no_qe {
            return Err(Error::InvalidConfig("the no-qe ablation has no QE head".into()));
        }
        let fresh = QeParams::new(&self.config)?;
        if fresh.store.len() != qe.store.len()
            || fresh
                .store
                .values()
                .iter()
                .zip(qe.store.values())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::InvalidConfig("QE layout does not match the model configuration".into()));
        }
        self.qe = Some(qe);
        Ok(self)
    }

    /// Quality vector for the target of a prepared window.
    pub fn quality(&self, prepared: &PreparedWindow) -> QualityVector {
        match &self.qe {
            Some(qe) => qe_quality(qe, prepared),
            None => QualityVector::HIGH_ONLY,
        }
    }
}

/// A window after compensation and normalisation, with its neighbourhood.
#[derive(Clone, Debug)]
pub struct PreparedWindow {
    pub target: PointCloudFrame,
    pub target_norm: Matrix,
    pub frames_norm: Vec<Matrix>,
    pub geometry_norm: Matrix,
    pub neighbors: NeighborIndex,
    pub target_position: usize,
}

impl PreparedWindow {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }
}

/// Coordinates centred on their mean and divided by their RMS radius.
pub fn normalize_geometry(geometry: &Matrix) -> Matrix {
    let n = geometry.rows().max(1) as f64;
    let mean = geometry.col_sums().map(|v| v / n);
    let mut centred = geometry.clone();
    let mut sq = 0.0;
    for r in 0..centred.rows() {
        for (v, m) in centred.row_mut(r).iter_mut().zip(mean.data()) {
            *v -= m;
            sq += *v * *v;
        }
    }
    let rms = (sq / n).sqrt();
    if rms > 0.0 {
        centred.scale_in_place(1.0 / rms);
    }
    centred
}

/// Per-column zero mean and unit variance; columns with standard deviation
/// below `floor` are divided by `floor` instead.
pub fn standardize_columns(m: &Matrix, floor: f64) -> Matrix {
    let n = m.rows().max(1) as f64;
    let mean = m.col_sums().map(|v| v / n);
    let mut out = m.clone();
    let mut var = vec![0.0; m.cols()];
    for r in 0..out.rows() {
        for ((v, mu), s) in out.row_mut(r).iter_mut().zip(mean.data()).zip(var.iter_mut()) {
            *v -= mu;
            *s += *v * *v;
        }
    }
    let inv: Vec<f64> = var.iter().map(|s| 1.0 / (s / n).sqrt().max(floor)).collect();
    for r in 0..out.rows() {
        for (v, s) in out.row_mut(r).iter_mut().zip(&inv) {
            *v *= s;
        }
    }
    out
}

/// Compensates `window` onto its target geometry, normalises attributes and
/// coordinates and builds the target neighbourhood.
pub fn prepare_window(window: &TemporalWindow, config: &ModelConfig) -> Result<PreparedWindow> {
    if window.radius() != config.radius {
        return Err(Error::InvalidConfig(format!(
            "model radius {} but window radius {}",
            config.radius,
            window.radius()
        )));
    }
    let target = window.target();
    if target.is_empty() {
        return Err(Error::EmptyFrame);
    }
    if target.channels() != config.attr_width {
        return Err(Error::WidthMismatch(format!(
            "model expects {} attribute channels, got {}",
            config.attr_width,
            target.channels()
        )));
    }
    let aligned = if window.is_aligned() {
        window.clone()
    } else {
        compensate_window(window, config.recolor_k)?
    };
    let inv = 1.0 / config.attr_scale;
    let frames_norm: Vec<Matrix> = aligned.frames().iter().map(|f| f.attributes().map(|v| v * inv)).collect();
    let geometry = target.geometry_matrix();
    let k = config.k.min(target.len());
    let neighbors = knn(&geometry, &geometry, k)?;
    Ok(PreparedWindow {
        target: target.clone(),
        target_norm: frames_norm[aligned.target_position()].clone(),
        frames_norm,
        geometry_norm: normalize_geometry(&geometry),
        neighbors,
        target_position: aligned.target_position(),
    })
}

/// Prepares a single frame for the QE head.
pub fn prepare_frame(frame: &PointCloudFrame, config: &ModelConfig) -> Result<PreparedWindow> {
    let single = ModelConfig {
        radius: 0,
        ..config.clone()
    };
    prepare_window(&TemporalWindow::new(vec![frame.clone()], 0)?, &single)
}

/// Tape handles produced by [`forward_graph`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub fused_input: Var,
    pub branches: [Var; 3],
    pub fusion: Var,
    /// Enhanced attributes in attribute units.
    pub enhanced: Var,
}

/// Records the enhancement network on `g` for a fixed quality vector.
pub fn forward_graph(params: &BqeParams, g: &mut Graph, p: &mut Bound, prepared: &PreparedWindow, quality: QualityVector) -> ForwardVars {
    let net = &params.net;
    let nbh = Neighborhood::from_index(&prepared.neighbors, prepared.len()).expect("neighbours built on the target");
    let frames: Vec<Var> = prepared.frames_norm.iter().map(|m| g.constant(m.clone())).collect();
    let target = frames[prepared.target_position];
    let geometry = g.constant(prepared.geometry_norm.clone());
    let fused_input = net.fusion.forward(g, p, target, &frames, geometry).features;
    let branches = progressive_graph(net, g, p, fused_input, &nbh);
    let fusion = fuse_graph(g, &branches, &quality);
    let residual = net.head.forward(g, p, fusion);
    let residual = g.scale(residual, params.config.attr_scale);
    let raw = g.constant(prepared.target.attributes().clone());
    let enhanced = g.add(raw, residual);
    ForwardVars {
        fused_input,
        branches,
        fusion,
        enhanced,
    }
}

fn progressive_graph(net: &BqeNet, g: &mut Graph, p: &mut Bound, fused_input: Var, nbh: &Neighborhood) -> [Var; 3] {
    // Each tap sits after the last DCNA of its stage.
    let depths = net.stage_depths;
    let mut h = net.stem.forward_act(g, p, fused_input);
    let mut taps = [None; 3];
    for (i, stack) in net.trunk.iter().enumerate() {
        h = stack.forward(g, p, h, nbh);
        for (slot, &depth) in depths.iter().enumerate() {
            if depth == i + 1 {
                taps[slot] = Some(net.taps[slot].forward_act(g, p, h));
            }
        }
    }
    taps.map(|t| t.expect("every tap is reached"))
}

fn fuse_graph(g: &mut Graph, branches: &[Var; 3], quality: &QualityVector) -> Var {
    let mut acc: Option<Var> = None;
    for (&b, &w) in branches.iter().zip(&quality.0) {
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 { b } else { g.scale(b, w) };
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    acc.unwrap_or_else(|| g.scale(branches[0], 0.0))
}

/// QE probabilities for a prepared target (QE frozen, no gradients).
pub fn qe_quality(qe: &QeParams, prepared: &PreparedWindow) -> QualityVector {
    let mut g = Graph::new();
    let mut p = Bound::frozen(&qe.store);
    let probs = qe_graph(qe, &mut g, &mut p, prepared);
    let v = g.value(probs).data();
    QualityVector([v[0], v[1], v[2]])
}

pub fn qe_graph(qe: &QeParams, g: &mut Graph, p: &mut Bound, prepared: &PreparedWindow) -> Var {
    let nbh = Neighborhood::from_index(&prepared.neighbors, prepared.len()).expect("neighbours built on the target");
    let attrs = g.constant(standardize_columns(prepared.target.attributes(), 1.0));
    let geometry = g.constant(prepared.geometry_norm.clone());
    qe.net.forward(g, p, attrs, geometry, &nbh)
}

/// Estimates the distortion level of a frame.
pub fn qe_forward(target: &PointCloudFrame, qe: &QeParams) -> Result<QualityVector> {
    if target.is_empty() {
        return Err(Error::EmptyFrame);
    }
    let prepared = prepare_frame(target, &qe.config)?;
    Ok(qe_quality(qe, &prepared))
}

/// Shallow, medium and deep tap features of equal shape.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchFeatures {
    pub low: FeatureMap,
    pub medium: FeatureMap,
    pub high: FeatureMap,
}

/// Runs the shared trunk on fused features, building neighbourhoods on the
/// bound geometry.
pub fn progressive_forward(features: &FeatureMap, params: &BqeParams) -> Result<BranchFeatures> {
    let expected = params.config.tcca_out + 3;
    if features.width() != expected {
        return Err(Error::WidthMismatch(format!(
            "trunk expects {expected} channels, got {}",
            features.width()
        )));
    }
    let k = params.config.k.min(features.len());
    let neighbors = knn(&features.geometry, &features.geometry, k)?;
    let nbh = Neighborhood::from_index(&neighbors, features.len())?;
    let mut g = Graph::new();
    let mut p = Bound::frozen(&params.store);
    let x = g.constant(features.values.clone());
    let taps = progressive_graph(&params.net, &mut g, &mut p, x, &nbh);
    let map = |v: Var| FeatureMap::new(g.value(v).clone(), features.geometry.clone());
    Ok(BranchFeatures {
        low: map(taps[0])?,
        medium: map(taps[1])?,
        high: map(taps[2])?,
    })
}

/// `p_L·F_L + p_M·F_M + p_H·F_H`.
pub fn adaptive_fuse(branches: &BranchFeatures, quality: &QualityVector) -> Result<FeatureMap> {
    QualityVector::new(quality.0)?;
    let shape = branches.low.values.shape();
    if branches.medium.values.shape() != shape
        || branches.high.values.shape() != shape
        || branches.medium.geometry != branches.low.geometry
        || branches.high.geometry != branches.low.geometry
    {
        return Err(Error::ShapeMismatch("branch features differ in shape or geometry".into()));
    }
    let mut g = Graph::new();
    let vars = [&branches.low, &branches.medium, &branches.high].map(|b| g.constant(b.values.clone()));
    let fused = fuse_graph(&mut g, &vars, quality);
    FeatureMap::new(g.value(fused).clone(), branches.low.geometry.clone())
}

/// Enhances the target of `window`; geometry is passed through untouched.
pub fn bqe_forward(window: &TemporalWindow, params: &BqeParams) -> Result<PointCloudFrame> {
    let prepared = prepare_window(window, &params.config)?;
    let quality = params.quality(&prepared);
    enhance_prepared(params, &prepared, quality)
}

pub fn enhance_prepared(params: &BqeParams, prepared: &PreparedWindow, quality: QualityVector) -> Result<PointCloudFrame> {
    let mut g = Graph::new();
    let mut p = Bound::frozen(&params.store);
    let vars = forward_graph(params, &mut g, &mut p, prepared, quality);
    prepared.target.with_attributes(g.value(vars.enhanced).clone())
}

/// Eq.-(9)-style loss and its gradient with respect to every non-QE parameter.
pub fn bqe_loss_and_grad(params: &BqeParams, prepared: &PreparedWindow, original: &Matrix, quality: QualityVector) -> (f64, Vec<Matrix>) {
    let mut g = Graph::new();
    let mut p = Bound::trainable(&params.store);
    let vars = forward_graph(params, &mut g, &mut p, prepared, quality);
    let target = g.constant(original.clone());
    let loss = g.mse(vars.enhanced, target);
    let value = g.value(loss).get(0, 0);
    let grads = g.backward(loss);
    (value, p.grads(&grads))
}

/// Loss only, for evaluation and finite differences.
pub fn bqe_loss_value(params: &BqeParams, prepared: &PreparedWindow, original: &Matrix, quality: QualityVector) -> f64 {
    let mut g = Graph::new();
    let mut p = Bound::frozen(&params.store);
    let vars = forward_graph(params, &mut g, &mut p, prepared, quality);
    let target = g.constant(original.clone());
    let loss = g.mse(vars.enhanced, target);
    g.value(loss).get(0, 0)
}

/// Soft-label cross entropy of the QE head and its parameter gradient.
pub fn qe_loss_and_grad(qe: &QeParams, prepared: &PreparedWindow, label: &[f64; 3]) -> (f64, Vec<Matrix>) {
    let mut g = Graph::new();
    let mut p = Bound::trainable(&qe.store);
    let probs = qe_graph(qe, &mut g, &mut p, prepared);
    let loss = g.soft_cross_entropy(probs, label);
    let value = g.value(loss).get(0, 0);
    let grads = g.backward(loss);
    (value, p.grads(&grads))
}

pub fn qe_loss_value(qe: &QeParams, prepared: &PreparedWindow, label: &[f64; 3]) -> f64 {
    let mut g = Graph::new();
    let mut p = Bound::frozen(&qe.store);
    let probs = qe_graph(qe, &mut g, &mut p, prepared);
    let loss = g.soft_cross_entropy(probs, label);
    g.value(loss).get(0, 0)
}

/// Patch settings used at inference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub stride: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_size: 2048,
            stride: 0.5,
        }
    }
}

/// Enhances frame `t` of a decoded sequence: builds its clamped window,
/// compensates it on full frames, enhances every patch and averages overlaps.
pub fn enhance_frame(sequence: &[PointCloudFrame], t: usize, params: &BqeParams, patches: PatchConfig) -> Result<PointCloudFrame> {
    let window = crate::data::make_window(sequence, t, params.config.radius)?;
    let aligned = compensate_window(&window, params.config.recolor_k)?;
    let target = aligned.target();
    let set = crate::neighborhood::generate_patches(target, patches.patch_size, patches.stride)?;
    let outputs = crate::parallel::map_indexed(set.len(), |i| -> Result<(Vec<usize>, Matrix)> {
        let idx = &set.patches[i];
        let frames = aligned.frames().iter().map(|f| f.subset(idx)).collect();
        let sub = TemporalWindow::new(frames, params.config.radius)?;
        Ok((idx.clone(), bqe_forward(&sub, params)?.attributes().clone()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let fused = crate::neighborhood::fuse_patches(&outputs, target.len())?;
    target.with_attributes(fused)
}
