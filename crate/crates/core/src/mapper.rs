//! The trainable mapping network: frozen vision features in, LM prefix
//! embeddings out.
//!
//! The default (`transformer`) variant projects every input row with one
//! shared affine map `D_i -> D_h`, prepends `l_out` learned constant rows,
//! runs a bidirectional pre-norm encoder of width `D_h`, keeps the outputs at
//! the constant positions and lifts them with one shared affine map
//! `D_h -> D_o`. The ablation variants swap that pipeline for a per-position
//! linear map, a two-layer MLP on a pooled vector, or the encoder without
//! constants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{Attention, Checkpoint, ParameterSet, Tape, Tensor, Var};

/// Standard deviation of the learned constant embeddings at init.
pub const CONSTANT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Transformer,
    Linear,
    Mlp,
    NoConstants,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Transformer => "transformer",
            Variant::Linear => "linear",
            Variant::Mlp => "mlp",
            Variant::NoConstants => "no_constants",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Variant::Transformer),
            "linear" => Ok(Variant::Linear),
            "mlp" => Ok(Variant::Mlp),
            "no_constants" => Ok(Variant::NoConstants),
            other => Err(Error::config("variant", format!("unknown variant `{other}`"))),
        }
    }
}

/// Which part of the encoder output the mapper consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureMode {
    /// Summary row followed by the flattened spatial grid.
    Grid,
    /// The summary row alone.
    Global,
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureMode::Grid => "grid",
            FeatureMode::Global => "global",
        })
    }
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(FeatureMode::Grid),
            "global" => Ok(FeatureMode::Global),
            other => Err(Error::config("features", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Size {
    Small,
    Medium,
    Large,
}

impl Size {
    pub const ALL: [Size; 3] = [Size::Small, Size::Medium, Size::Large];

    /// `(depth, d_hidden)`
    pub fn dims(self) -> (usize, usize) {
        match self {
            Size::Small => (2, 128),
            Size::Medium => (4, 256),
            Size::Large => (8, 512),
        }
    }
}

impl FromStr for Size {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Size::Small),
            "medium" => Ok(Size::Medium),
            "large" => Ok(Size::Large),
            other => Err(Error::config("size", format!("unknown size `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MapperConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub l_in: usize,
    pub l_out: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub variant: Variant,
    pub features: FeatureMode,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self::medium()
    }
}

impl MapperConfig {
    /// Full-scale base configuration: 257 ViT-L/14 rows of width 1024 into 32
    /// prefix rows of width 4096.
    pub fn medium() -> Self {
        Self {
            d_in: 1024,
            d_hidden: 256,
            d_out: 4096,
            l_in: 257,
            l_out: 32,
            depth: 4,
            heads: 8,
            ffn_ratio: 2,
            variant: Variant::Transformer,
            features: FeatureMode::Grid,
        }
    }

    pub fn sized(size: Size) -> Self {
        let (depth, d_hidden) = size.dims();
        Self {
            depth,
            d_hidden,
            ..Self::medium()
        }
    }

    /// Desk-scale default matching the toy backbones: a 3x3 grid (10 rows of
    /// width 32) mapped into 11 prefix rows of width 64.
    pub fn toy() -> Self {
        Self {
            d_in: 32,
            d_hidden: 32,
            d_out: 64,
            l_in: 10,
            l_out: 11,
            depth: 2,
            heads: 4,
            ffn_ratio: 2,
            variant: Variant::Transformer,
            features: FeatureMode::Grid,
        }
    }

    /// Switches variant and applies the length it implies.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self.normalize();
        self
    }

    pub fn with_features(mut self, features: FeatureMode) -> Self {
        self.features = features;
        self.normalize();
        self
    }

    /// Forces `l_out` for variants whose output length follows the input.
    pub fn normalize(&mut self) {
        if matches!(self.variant, Variant::Linear | Variant::NoConstants) {
            self.l_out = self.rows_consumed();
        }
    }

    /// Number of input rows the network actually reads.
    pub fn rows_consumed(&self) -> usize {
        match self.features {
            FeatureMode::Grid => self.l_in,
            FeatureMode::Global => 1,
        }
    }

    pub fn output_len(&self) -> usize {
        match self.variant {
            Variant::Transformer | Variant::Mlp => self.l_out,
            Variant::Linear | Variant::NoConstants => self.rows_consumed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_in", self.d_in),
            ("d_hidden", self.d_hidden),
            ("d_out", self.d_out),
            ("l_in", self.l_in),
            ("l_out", self.l_out),
            ("heads", self.heads),
            ("ffn_ratio", self.ffn_ratio),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        let uses_encoder = matches!(self.variant, Variant::Transformer | Variant::NoConstants);
        if uses_encoder {
            if self.depth == 0 {
                return Err(Error::config("depth", "encoder needs at least one layer"));
            }
            if !self.d_hidden.is_multiple_of(self.heads) {
                return Err(Error::config(
                    "d_hidden",
                    format!("{} is not divisible by {} heads", self.d_hidden, self.heads),
                ));
            }
        }
        if self.output_len() != self.l_out {
            return Err(Error::config(
                "l_out",
                format!(
                    "{} variant emits {} rows but l_out is {}",
                    self.variant,
                    self.output_len(),
                    self.l_out
                ),
            ));
        }
        Ok(())
    }

    /// Header lines (`mapper.<field>`, value) for checkpoints and manifests.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("d_in", self.d_in.to_string()),
            ("d_hidden", self.d_hidden.to_string()),
            ("d_out", self.d_out.to_string()),
            ("l_in", self.l_in.to_string()),
            ("l_out", self.l_out.to_string()),
            ("depth", self.depth.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_ratio", self.ffn_ratio.to_string()),
            ("variant", self.variant.to_string()),
            ("features", self.features.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("mapper.{k}"), v))
        .collect()
    }

    /// Applies one `mapper.<field>` (or bare `<field>`) assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let field = key.strip_prefix("mapper.").unwrap_or(key);
        let int = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::config(field, format!("`{v}` is not a non-negative integer")))
        };
        match field {
            "d_in" => self.d_in = int(value)?,
            "d_hidden" => self.d_hidden = int(value)?,
            "d_out" => self.d_out = int(value)?,
            "l_in" => self.l_in = int(value)?,
            "l_out" => self.l_out = int(value)?,
            "depth" => self.depth = int(value)?,
            "heads" => self.heads = int(value)?,
            "ffn_ratio" => self.ffn_ratio = int(value)?,
            "variant" => self.variant = value.parse()?,
            "features" => self.features = value.parse()?,
            "size" => {
                let (depth, d_hidden) = value.parse::<Size>()?.dims();
                self.depth = depth;
                self.d_hidden = d_hidden;
            }
            other => return Err(Error::config(other, "unknown mapper field")),
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::medium();
        for (k, v) in pairs {
            if k.starts_with("mapper.") {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Closed-form trainable parameter count of `init_mapper(cfg, _)`.
pub fn count_parameters(cfg: &MapperConfig) -> usize {
    let (di, dh, d_o, lo) = (cfg.d_in, cfg.d_hidden, cfg.d_out, cfg.l_out);
    let encoder = || {
        (di * dh + dh) + cfg.depth * nn::block_param_count(dh, cfg.ffn_ratio) + 2 * dh + (dh * d_o + d_o)
    };
    match cfg.variant {
        Variant::Transformer => encoder() + lo * dh,
        Variant::NoConstants => encoder(),
        Variant::Linear => di * d_o + d_o,
        Variant::Mlp => (di * di + di) + (di * lo * d_o + lo * d_o),
    }
}

/// Fresh trainable weights for `cfg`, deterministic in `seed`.
pub fn init_mapper(cfg: &MapperConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParameterSet::new();
    match cfg.variant {
        Variant::Transformer | Variant::NoConstants => {
            nn::init_affine(&mut ps, "down", cfg.d_in, cfg.d_hidden, &mut rng)?;
            if cfg.variant == Variant::Transformer {
                ps.insert(
                    "constants",
                    Tensor::randn(&[cfg.l_out, cfg.d_hidden], CONSTANT_INIT_STD, &mut rng),
                    false,
                )?;
            }
            for i in 0..cfg.depth {
                nn::init_block(&mut ps, &format!("layers.{i}"), cfg.d_hidden, cfg.ffn_ratio, &mut rng)?;
            }
            nn::init_norm(&mut ps, "final_ln", cfg.d_hidden)?;
            nn::init_affine(&mut ps, "up", cfg.d_hidden, cfg.d_out, &mut rng)?;
        }
        Variant::Linear => nn::init_affine(&mut ps, "proj", cfg.d_in, cfg.d_out, &mut rng)?,
        Variant::Mlp => {
            nn::init_affine(&mut ps, "mlp.hidden", cfg.d_in, cfg.d_in, &mut rng)?;
            nn::init_affine(&mut ps, "mlp.out", cfg.d_in, cfg.l_out * cfg.d_out, &mut rng)?;
        }
    }
    Ok(ps)
}

/// Encoder output for one image: summary row, then grid rows in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures(pub Tensor);

/// Prefix embeddings for the language model, `[output_len x d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedPrefix(pub Tensor);

/// Records the mapper on `tape` for a batch of feature matrices
/// (`[l_in x d_in]` each) and returns one prefix per input.
pub fn forward(
    tape: &mut Tape,
    cfg: &MapperConfig,
    params: &ParameterSet,
    feats: &[Var],
) -> Result<Vec<Var>> {
    if feats.is_empty() {
        return Ok(Vec::new());
    }
    for &f in feats {
        if tape.shape(f) != [cfg.l_in, cfg.d_in] {
            return Err(Error::shape(
                "map_features",
                format!(
                    "features {:?}, expected [{}, {}]",
                    tape.shape(f),
                    cfg.l_in,
                    cfg.d_in
                ),
            ));
        }
    }
    let rows = cfg.rows_consumed();
    let inputs = feats
        .iter()
        .map(|&f| match cfg.features {
            FeatureMode::Grid => Ok(f),
            FeatureMode::Global => tape.slice_rows(f, 0, 1),
        })
        .collect::<Result<Vec<_>>>()?;

    match cfg.variant {
        Variant::Linear => {
            let stacked = tape.concat_rows(&inputs)?;
            let out = nn::affine(tape, params, "proj", stacked)?;
            split_rows(tape, out, feats.len(), rows)
        }
        Variant::Mlp => {
            let pooled = inputs
                .iter()
                .map(|&x| match cfg.features {
                    FeatureMode::Global => Ok(x),
                    FeatureMode::Grid if rows > 1 => {
                        let grid = tape.slice_rows(x, 1, rows - 1)?;
                        tape.mean_rows(grid)
                    }
                    FeatureMode::Grid => Ok(x),
                })
                .collect::<Result<Vec<_>>>()?;
            let stacked = tape.concat_rows(&pooled)?;
            let h = nn::affine(tape, params, "mlp.hidden", stacked)?;
            let h = tape.gelu(h);
            let out = nn::affine(tape, params, "mlp.out", h)?;
            (0..feats.len())
                .map(|e| {
                    let row = tape.slice_rows(out, e, 1)?;
                    tape.reshape(row, &[cfg.l_out, cfg.d_out])
                })
                .collect()
        }
        Variant::Transformer | Variant::NoConstants => {
            let stacked = tape.concat_rows(&inputs)?;
            let projected = nn::affine(tape, params, "down", stacked)?;
            let constants = match cfg.variant {
                Variant::Transformer => Some(tape.param(params, "constants")?),
                _ => None,
            };
            let n_const = constants.map_or(0, |_| cfg.l_out);
            let seq_len = n_const + rows;
            let mut parts = Vec::with_capacity(feats.len() * 2);
            for e in 0..feats.len() {
                if let Some(c) = constants {
                    parts.push(c);
                }
                parts.push(tape.slice_rows(projected, e * rows, rows)?);
            }
            let mut x = tape.concat_rows(&parts)?;
            let attn = Attention {
                heads: cfg.heads,
                causal: false,
                segments: (0..feats.len()).map(|e| (e * seq_len, seq_len)).collect(),
            };
            for i in 0..cfg.depth {
                x = nn::block(tape, params, &format!("layers.{i}"), x, &attn)?;
            }
            let x = nn::norm(tape, params, "final_ln", x)?;
            let keep = cfg.output_len();
            let kept = if n_const > 0 {
                let slices = (0..feats.len())
                    .map(|e| tape.slice_rows(x, e * seq_len, keep))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat_rows(&slices)?
            } else {
                x
            };
            let out = nn::affine(tape, params, "up", kept)?;
            split_rows(tape, out, feats.len(), keep)
        }
    }
}

fn split_rows(tape: &mut Tape, x: Var, n: usize, rows: usize) -> Result<Vec<Var>> {
    if n == 1 {
        return Ok(vec![x]);
    }
    (0..n).map(|e| tape.slice_rows(x, e * rows, rows)).collect()
}

/// Maps one feature matrix outside of any training graph.
pub fn map_features(
    cfg: &MapperConfig,
    params: &ParameterSet,
    feats: &VisualFeatures,
) -> Result<MappedPrefix> {
    let mut tape = Tape::new();
    let f = tape.constant(feats.0.clone());
    let out = forward(&mut tape, cfg, params, &[f])?;
    Ok(MappedPrefix(tape.value(out[0]).clone()))
}

/// A mapper configuration with its weights, as saved after training.
#[derive(Debug, Clone, PartialEq)]
pub struct Mapper {
    pub cfg: MapperConfig,
    pub params: ParameterSet,
    /// Trained (and evaluated) on zeroed images.
    pub blind: bool,
}

impl Mapper {
    pub fn init(cfg: MapperConfig, seed: u64, blind: bool) -> Result<Self> {
        Ok(Self {
            params: init_mapper(&cfg, seed)?,
            cfg,
            blind,
        })
    }

    pub fn map(&self, feats: &VisualFeatures) -> Result<MappedPrefix> {
        map_features(&self.cfg, &self.params, feats)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.params.clone()).with("component", "mapper");
        for (k, v) in self.cfg.to_pairs() {
            ck.set(k, v);
        }
        ck.set("blind", self.blind);
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let cfg = MapperConfig::from_pairs(ck.header.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        let blind = match ck.get("blind") {
            Some("true") => true,
            Some("false") | None => false,
            Some(other) => return Err(Error::Checkpoint(format!("blind={other}"))),
        };
        let expected = init_mapper(&cfg, 0)?;
        for (name, p) in expected.iter() {
            let got = ck.params.get(name)?;
            if got.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, config implies {:?}",
                    got.shape(),
                    p.tensor.shape()
                )));
            }
        }
        if ck.params.len() != expected.len() {
            return Err(Error::Checkpoint("unexpected extra mapper tensors".into()));
        }
        Ok(Self {
            cfg,
            params: ck.params,
            blind,
        })
    }
}
