//! Network builders, the composed FCN + classifier forward pass and the
//! parameter ledger.

mod build;
pub mod checkpoint;
pub mod graph;
pub mod params;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use build::{build_aggrescnn, build_baseline_cnn, build_fcn};
pub use graph::{Graph, Layer, LayerKind};
pub use params::{BoundParams, Init, ParamSpec, ParamStore};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    BaselineCnn,
    AggresCnn,
    FcnOnly,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::BaselineCnn => "baseline_cnn",
            Variant::AggresCnn => "aggres_cnn",
            Variant::FcnOnly => "fcn_only",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline_cnn" => Ok(Variant::BaselineCnn),
            "aggres_cnn" => Ok(Variant::AggresCnn),
            "fcn_only" => Ok(Variant::FcnOnly),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected baseline_cnn, aggres_cnn or fcn_only)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Plain three-stage CNN used as the comparison classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    pub hidden: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![32, 64, 128],
            kernel: 5,
            pool: 4,
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_channels: usize,
    pub input_size: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub cardinality: usize,
    pub use_fcn: bool,
    pub fcn_down_channels: Vec<usize>,
    pub baseline: BaselineConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::canonical(Variant::AggresCnn, 2)
    }
}

impl ModelConfig {
    /// Full-size configuration at 512×512.
    pub fn canonical(variant: Variant, input_channels: usize) -> Self {
        Self {
            variant,
            input_channels,
            input_size: 512,
            stem_channels: 16,
            stage_channels: vec![32, 64, 128, 256],
            blocks_per_stage: 2,
            cardinality: 32,
            use_fcn: false,
            fcn_down_channels: vec![32, 64, 128, 256],
            baseline: BaselineConfig::default(),
        }
    }

    pub fn with_fcn(mut self, on: bool) -> Self {
        self.use_fcn = on;
        self
    }

    pub fn with_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    /// Narrow widths for fast tests; topology is unchanged.
    pub fn tiny(variant: Variant, input_channels: usize, input_size: usize) -> Self {
        Self {
            variant,
            input_channels,
            input_size,
            stem_channels: 2,
            stage_channels: vec![4, 8],
            blocks_per_stage: 2,
            cardinality: 2,
            use_fcn: false,
            fcn_down_channels: vec![2, 4, 4, 4],
            baseline: BaselineConfig {
                conv_channels: vec![2, 3, 4],
                kernel: 5,
                pool: 2,
                hidden: 4,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.input_channels) {
            return Err(Error::Config(format!("input_channels must be 1 or 2, got {}", self.input_channels)));
        }
        if self.input_size == 0 {
            return Err(Error::Config("input_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerRow {
    pub layer: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

/// Per-layer parameter counts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamLedger {
    pub rows: Vec<LedgerRow>,
}

impl ParamLedger {
    pub fn from_graph(graph: &Graph) -> Self {
        let rows = graph
            .layers()
            .iter()
            .filter_map(|layer| {
                let specs = layer.param_specs();
                let first = specs.first()?;
                Some(LedgerRow {
                    layer: layer.name.clone(),
                    shape: first.shape.clone(),
                    count: specs.iter().map(ParamSpec::len).sum(),
                })
            })
            .collect();
        Self { rows }
    }

    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.count).sum()
    }

    /// Sum over rows whose layer name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> usize {
        self.rows
            .iter()
            .filter(|r| r.layer.starts_with(prefix))
            .map(|r| r.count)
            .sum()
    }

    fn extend(&mut self, other: ParamLedger) {
        self.rows.extend(other.rows);
    }
}

impl fmt::Display for ParamLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:<20}  {:>10}", "layer", "shape", "params")?;
        for r in &self.rows {
            let shape = r.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            writeln!(f, "{:<width$}  {:<20}  {:>10}", r.layer, shape, r.count)?;
        }
        write!(f, "{:<width$}  {:<20}  {:>10}", "total", "", self.total())
    }
}

/// A built network: optional FCN preprocessor followed by a classifier.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    fcn: Option<Graph>,
    classifier: Option<Graph>,
}

impl Model {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let fcn = (config.use_fcn || config.variant == Variant::FcnOnly)
            .then(|| build_fcn(config))
            .transpose()?;
        let classifier = match config.variant {
            Variant::AggresCnn => Some(build_aggrescnn(config)?),
            Variant::BaselineCnn => Some(build_baseline_cnn(config)?),
            Variant::FcnOnly => None,
        };
        Ok(Self {
            config: config.clone(),
            fcn,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fcn(&self) -> Option<&Graph> {
        self.fcn.as_ref()
    }

    pub fn classifier(&self) -> Option<&Graph> {
        self.classifier.as_ref()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.fcn
            .iter()
            .chain(self.classifier.iter())
            .flat_map(Graph::param_specs)
            .collect()
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        ParamStore::initialize(&self.param_specs(), seed)
    }

    pub fn ledger(&self) -> ParamLedger {
        let mut ledger = ParamLedger::default();
        for g in self.fcn.iter().chain(self.classifier.iter()) {
            ledger.extend(ParamLedger::from_graph(g));
        }
        ledger
    }

    /// Weighted layers on the classifier's longest path (FCN excluded).
    pub fn depth(&self) -> usize {
        self.classifier.as_ref().map_or(0, Graph::weighted_depth)
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        let c = &self.config;
        [batch, c.input_channels, c.input_size, c.input_size]
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::Rank {
                op: "forward",
                expected: 4,
                shape: shape.to_vec(),
            });
        }
        let want = self.input_shape(shape[0]);
        for (i, dim) in ["channels", "height", "width"].into_iter().enumerate() {
            if shape[i + 1] != want[i + 1] {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    dim,
                    expected: want[i + 1],
                    actual: shape[i + 1],
                });
            }
        }
        Ok(())
    }

    /// Records the forward pass on `tape`; returns class probabilities
    /// (or the FCN image for [`Variant::FcnOnly`]).
    pub fn forward<E: Element>(&self, tape: &mut Tape<E>, params: &BoundParams, x: Var) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        let mut h = x;
        if let Some(fcn) = &self.fcn {
            h = fcn.forward(tape, params, h)?;
        }
        if let Some(cls) = &self.classifier {
            h = cls.forward(tape, params, h)?;
        }
        Ok(h)
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }
}

/// Parameter ledger of the model described by `config`.
pub fn count_params(config: &ModelConfig) -> Result<ParamLedger> {
    Ok(Model::build(config)?.ledger())
}

/// Published trainable-parameter count for a canonical configuration, if one
/// exists. `FcnOnly` is the FCN alone and does not depend on the channel count.
pub fn published_param_count(variant: Variant, input_channels: usize, use_fcn: bool) -> Option<usize> {
    match (variant, input_channels, use_fcn) {
        (Variant::BaselineCnn, 1, false) => Some(930_146),
        (Variant::BaselineCnn, 2, false) => Some(930_946),
        (Variant::AggresCnn, 1, false) => Some(291_874),
        (Variant::AggresCnn, 2, false) => Some(292_114),
        (Variant::AggresCnn, 1, true) => Some(683_410),
        (Variant::AggresCnn, 2, true) => Some(683_650),
        (Variant::BaselineCnn, 1, true) => Some(1_321_682),
        (Variant::BaselineCnn, 2, true) => Some(1_322_482),
        (Variant::FcnOnly, _, _) => Some(391_536),
        _ => None,
    }
}
