//! Learned building blocks: neighbourhood attention (NA), densely connected
//! NA stacks (DCNA) and temporal cross-attention over a window (TCCA).

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::TemporalWindow;
use crate::error::{Error, Result};
use crate::neighborhood::NeighborIndex;
use crate::params::{Bound, Linear, Mlp, ParamStore};
use crate::tensor::Matrix;

/// Per-point features together with the coordinates they describe.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Matrix,
    pub geometry: Matrix,
}

impl FeatureMap {
    pub fn new(values: Matrix, geometry: Matrix) -> Result<Self> {
        if values.rows() != geometry.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows for {} points",
                values.rows(),
                geometry.rows()
            )));
        }
        Ok(Self { values, geometry })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }
}

/// Neighbour lists flattened into gather indices and a distance column
/// (`n·k × 1`) ready for the tape.
#[derive(Clone, Debug)]
pub struct Neighborhood {
    pub k: usize,
    pub n: usize,
    pub center: Rc<Vec<usize>>,
    pub neighbors: Rc<Vec<usize>>,
    pub distances: Matrix,
}

impl Neighborhood {
    pub fn from_index(index: &NeighborIndex, n: usize) -> Result<Self> {
        let k = index.k();
        if index.queries() != n {
            return Err(Error::ShapeMismatch(format!(
                "neighbour index has {} queries for {n} points",
                index.queries()
            )));
        }
        if let Some(&bad) = index.flat_indices().iter().find(|&&j| j >= n) {
            return Err(Error::NeighborOutOfRange { index: bad, n });
        }
        let center = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        Ok(Self {
            k,
            n,
            center: Rc::new(center),
            neighbors: Rc::new(index.flat_indices().to_vec()),
            distances: Matrix::column(index.flat_distances()),
        })
    }
}

/// How an NA block aggregates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Softmax-weighted pooling over the k nearest neighbours.
    Neighborhood,
    /// A per-point MLP that ignores neighbours.
    Pointwise,
}

/// One NA block.
#[derive(Clone, Debug)]
pub struct NaBlock {
    pub in_width: usize,
    pub out_width: usize,
    pub aggregation: Aggregation,
    pub transform: [Linear; 2],
    pub pos_encoding: Option<Linear>,
}

/// Output of [`NaBlock::forward`].
#[derive(Clone, Copy, Debug)]
pub struct NaOutput {
    pub features: Var,
    /// `n·k × c1` softmax weights (absent for pointwise blocks).
    pub weights: Option<Var>,
}

impl NaBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_width: usize,
        out_width: usize,
        aggregation: Aggregation,
        pos_encoding: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let first_in = match aggregation {
            Aggregation::Neighborhood => 2 * in_width,
            Aggregation::Pointwise => in_width,
        };
        let transform = [
            Linear::new(store, &format!("{name}.t0"), first_in, out_width, rng),
            Linear::new(store, &format!("{name}.t1"), out_width, out_width, rng),
        ];
        let pos_encoding = (pos_encoding && aggregation == Aggregation::Neighborhood)
            .then(|| Linear::new(store, &format!("{name}.pe"), 1, out_width, rng));
        Self {
            in_width,
            out_width,
            aggregation,
            transform,
            pos_encoding,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Bound, x: Var, nbh: &Neighborhood) -> NaOutput {
        match self.aggregation {
            Aggregation::Pointwise => {
                let h = self.transform[0].forward_act(g, p, x);
                let h = self.transform[1].forward_act(g, p, h);
                NaOutput {
                    features: h,
                    weights: None,
                }
            }
            Aggregation::Neighborhood => {
                let center = g.gather(x, nbh.center.clone());
                let neighbor = g.gather(x, nbh.neighbors.clone());
                let composite = g.concat_cols(&[center, neighbor]);
                let h = self.transform[0].forward_act(g, p, composite);
                let h = self.transform[1].forward_act(g, p, h);
                let logits = match &self.pos_encoding {
                    Some(pe) => {
                        let w = g.constant(nbh.distances.clone());
                        let enc = pe.forward(g, p, w);
                        g.add(h, enc)
                    }
                    None => h,
                };
                let weights = g.group_softmax(logits, nbh.k);
                let weighted = g.mul(weights, h);
                NaOutput {
                    features: g.group_sum(weighted, nbh.k),
                    weights: Some(weights),
                }
            }
        }
    }
}

/// Runs one NA block on a feature map.
pub fn na_forward(features: &FeatureMap, block: &NaBlock, store: &ParamStore, neighbors: &NeighborIndex) -> Result<FeatureMap> {
    if features.width() != block.in_width {
        return Err(Error::WidthMismatch(format!(
            "NA block expects {} channels, got {}",
            block.in_width,
            features.width()
        )));
    }
    let nbh = Neighborhood::from_index(neighbors, features.len())?;
    let mut g = Graph::new();
    let mut p = Bound::frozen(store);
    let x = g.constant(features.values.clone());
    let out = block.forward(&mut g, &mut p, x, &nbh);
    FeatureMap::new(g.value(out.features).clone(), features.geometry.clone())
}

/// Densely connected NA blocks: block `b` sees the input concatenated with
/// every earlier block output, and a pointwise transition maps the full
/// concatenation to the output width.
#[derive(Clone, Debug)]
pub struct Dcna {
    pub in_width: usize,
    pub out_width: usize,
    pub blocks: Vec<NaBlock>,
    pub transition: Linear,
}

impl Dcna {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_width: usize,
        growth: usize,
        n_blocks: usize,
        out_width: usize,
        aggregation: Aggregation,
        pos_encoding: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(n_blocks >= 1, "a DCNA stack needs at least one block");
        let blocks = (0..n_blocks)
            .map(|b| {
                NaBlock::new(
                    store,
                    &format!("{name}.na{b}"),
                    in_width + b * growth,
                    growth,
                    aggregation,
                    pos_encoding,
                    rng,
                )
            })
            .collect();
        let transition = Linear::new(store, &format!("{name}.transition"), in_width + n_blocks * growth, out_width, rng);
        Self {
            in_width,
            out_width,
            blocks,
            transition,
        }
    }

    /// Checks that block widths chain under dense concatenation.
    pub fn validate(&self) -> Result<()> {
        let mut width = self.in_width;
        for (b, block) in self.blocks.iter().enumerate() {
            if block.in_width != width {
                return Err(Error::WidthMismatch(format!(
                    "DCNA block {b} expects {} channels but receives {width}",
                    block.in_width
                )));
            }
            width += block.out_width;
        }
        if self.transition.in_width != width {
            return Err(Error::WidthMismatch(format!(
                "DCNA transition expects {} channels but receives {width}",
                self.transition.in_width
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Bound, x: Var, nbh: &Neighborhood) -> Var {
        let mut dense = vec![x];
        for block in &self.blocks {
            let input = g.concat_cols(&dense);
            dense.push(block.forward(g, p, input, nbh).features);
        }
        let all = g.concat_cols(&dense);
        self.transition.forward_act(g, p, all)
    }
}

pub fn dcna_forward(features: &FeatureMap, dcna: &Dcna, store: &ParamStore, neighbors: &NeighborIndex) -> Result<FeatureMap> {
    dcna.validate()?;
    if features.width() != dcna.in_width {
        return Err(Error::WidthMismatch(format!(
            "DCNA expects {} channels, got {}",
            dcna.in_width,
            features.width()
        )));
    }
    let nbh = Neighborhood::from_index(neighbors, features.len())?;
    let mut g = Graph::new();
    let mut p = Bound::frozen(store);
    let x = g.constant(features.values.clone());
    let out = dcna.forward(&mut g, &mut p, x, &nbh);
    FeatureMap::new(g.value(out).clone(), features.geometry.clone())
}

/// Axis along which the window attributes are stacked to form keys and values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvAxis {
    /// Every frame contributes `n` extra key/value tokens.
    Token,
    /// Frames are stacked as channels of `n` tokens.
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TccaConfig {
    pub attr_width: usize,
    pub frames: usize,
    pub hidden: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub out_width: usize,
    pub kv_axis: KvAxis,
}

/// Temporal cross-attention: the target frame forms the queries, the
/// compensated window forms keys and values.
#[derive(Clone, Debug)]
pub struct Tcca {
    pub config: TccaConfig,
    pub proj_q: Mlp,
    pub proj_k: Mlp,
    pub proj_v: Mlp,
    pub proj_o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct TccaOutput {
    /// `n × (out_width + 3)`: attended features plus the skip, then geometry.
    pub features: Var,
    /// Row-stochastic attention matrix.
    pub attention: Option<Var>,
}

impl Tcca {
    pub fn new(store: &mut ParamStore, name: &str, config: TccaConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.out_width != config.attr_width && config.attr_width != 1 {
            return Err(Error::WidthMismatch(format!(
                "skip connection needs out_width == attr_width or a single attribute channel (out {}, attr {})",
                config.out_width, config.attr_width
            )));
        }
        let kv_in = match config.kv_axis {
            KvAxis::Token => config.attr_width,
            KvAxis::Channel => config.attr_width * config.frames,
        };
        let h = config.hidden;
        Ok(Self {
            proj_q: Mlp::new(store, &format!("{name}.q"), &[config.attr_width, h, h, config.d_k], rng),
            proj_k: Mlp::new(store, &format!("{name}.k"), &[kv_in, h, h, config.d_k], rng),
            proj_v: Mlp::new(store, &format!("{name}.v"), &[kv_in, h, h, config.d_v], rng),
            proj_o: Linear::new(store, &format!("{name}.o"), config.d_v, config.out_width, rng),
            config,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Bound, target: Var, window: &[Var], geometry: Var) -> TccaOutput {
        let kv_in = match self.config.kv_axis {
            KvAxis::Token => g.concat_rows(window),
            KvAxis::Channel => g.concat_cols(window),
        };
        let q = self.proj_q.forward(g, p, target);
        let k = self.proj_k.forward(g, p, kv_in);
        let v = self.proj_v.forward(g, p, kv_in);
        let logits = g.matmul_nt(q, k);
        let logits = g.scale(logits, 1.0 / (self.config.d_k as f64).sqrt());
        let attention = g.row_softmax(logits);
        let attended = g.matmul(attention, v);
        let ft = self.proj_o.forward(g, p, attended);
        let features = skip_and_geometry(g, ft, target, geometry, self.config.out_width);
        TccaOutput {
            features,
            attention: Some(attention),
        }
    }
}

/// `Concat(F_t + skip(target), geometry)`, broadcasting a single-channel target.
fn skip_and_geometry(g: &mut Graph, ft: Var, target: Var, geometry: Var, out_width: usize) -> Var {
    let skip = if g.value(target).cols() == out_width {
        target
    } else {
        g.broadcast_cols(target, out_width)
    };
    let fused = g.add(ft, skip);
    g.concat_cols(&[fused, geometry])
}

/// Pointwise replacement for TCCA: an MLP over the channel-stacked window.
#[derive(Clone, Debug)]
pub struct TemporalMlp {
    pub config: TccaConfig,
    pub mlp: Mlp,
}

impl TemporalMlp {
    pub fn new(store: &mut ParamStore, name: &str, config: TccaConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = config.hidden;
        Self {
            mlp: Mlp::new(store, name, &[config.attr_width * config.frames, h, h, config.out_width], rng),
            config,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Bound, target: Var, window: &[Var], geometry: Var) -> TccaOutput {
        let stacked = g.concat_cols(window);
        let ft = self.mlp.forward(g, p, stacked);
        TccaOutput {
            features: skip_and_geometry(g, ft, target, geometry, self.config.out_width),
            attention: None,
        }
    }
}

/// TCCA or its MLP ablation.
#[derive(Clone, Debug)]
pub enum TemporalFusion {
    Attention(Tcca),
    Mlp(TemporalMlp),
}

impl TemporalFusion {
    pub fn config(&self) -> &TccaConfig {
        match self {
            TemporalFusion::Attention(t) => &t.config,
            TemporalFusion::Mlp(m) => &m.config,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Bound, target: Var, window: &[Var], geometry: Var) -> TccaOutput {
        match self {
            TemporalFusion::Attention(t) => t.forward(g, p, target, window, geometry),
            TemporalFusion::Mlp(m) => m.forward(g, p, target, window, geometry),
        }
    }
}

/// Result of [`tcca_forward`].
#[derive(Clone, Debug)]
pub struct TccaResult {
    pub features: FeatureMap,
    pub attention: Option<Matrix>,
}

/// Fuses a compensated window on raw attributes and geometry.
pub fn tcca_forward(window: &TemporalWindow, fusion: &TemporalFusion, store: &ParamStore) -> Result<TccaResult> {
    if !window.is_aligned() {
        return Err(Error::GeometryMismatch);
    }
    let cfg = fusion.config();
    if window.len() != cfg.frames {
        return Err(Error::WidthMismatch(format!(
            "fusion expects {} frames, window has {}",
            cfg.frames,
            window.len()
        )));
    }
    if window.target().channels() != cfg.attr_width {
        return Err(Error::WidthMismatch(format!(
            "fusion expects {} attribute channels, got {}",
            cfg.attr_width,
            window.target().channels()
        )));
    }
    let geometry = window.target().geometry_matrix();
    let mut g = Graph::new();
    let mut p = Bound::frozen(store);
    let frames: Vec<Var> = window.frames().iter().map(|f| g.constant(f.attributes().clone())).collect();
    let target = frames[window.target_position()];
    let geo = g.constant(geometry.clone());
    let out = fusion.forward(&mut g, &mut p, target, &frames, geo);
    Ok(TccaResult {
        features: FeatureMap::new(g.value(out.features).clone(), geometry)?,
        attention: out.attention.map(|a| g.value(a).clone()),
    })
}
