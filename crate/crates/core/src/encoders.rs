//! Volume, slice, and text encoders with their connectors, plus the named
//! parameter store shared by every stage of the pipeline.
//!
//! The 3D path embeds non-overlapping voxel patches, optionally mixes
//! across tokens, average-pools the patch grid, and runs a per-token MLP
//! connector. The 2D path does the same per slice without pooling. The text
//! path is a bag of learned embeddings. The 3D encoder group stays frozen
//! after initialization; everything else can train depending on the stage.

use std::collections::HashMap;
use std::fmt;

use crate::decoder::DecoderConfig;
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Tensor, TensorError};
use crate::volume::Volume;

/// Rng stream used to draw initial parameter values.
const PARAM_STREAM: u64 = 0x7061_7261;

/// Errors raised by configuration checks and encoder forward passes.
#[derive(Debug)]
pub enum EncoderError {
    /// A configuration whose dimensions cannot work together.
    BadConfig(String),
    /// The volume's dimensions disagree with the model configuration.
    VolumeDims {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    /// A slice index at or past the configured depth.
    SliceIndex { index: usize, bound: usize },
    /// An empty token sequence where at least one token is required.
    EmptyText,
    /// A checkpoint or caller handed over parameters that do not match the
    /// configuration's layout.
    ParamMismatch { detail: String },
    /// Underlying tensor-shape failure.
    Tensor(TensorError),
}

impl fmt::Display for EncoderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderError::BadConfig(detail) => write!(f, "bad model config: {detail}"),
            EncoderError::VolumeDims { expected, got } => write!(
                f,
                "volume dims {}x{}x{} do not match configured {}x{}x{}",
                got.0, got.1, got.2, expected.0, expected.1, expected.2
            ),
            EncoderError::SliceIndex { index, bound } => {
                write!(f, "slice index {index} out of range for depth {bound}")
            }
            EncoderError::EmptyText => write!(f, "text encoder needs at least one token"),
            EncoderError::ParamMismatch { detail } => {
                write!(f, "parameter layout mismatch: {detail}")
            }
            EncoderError::Tensor(err) => write!(f, "tensor error: {err}"),
        }
    }
}

impl std::error::Error for EncoderError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            EncoderError::Tensor(err) => Some(err),
            _ => None,
        }
    }
}

impl From<TensorError> for EncoderError {
    fn from(err: TensorError) -> Self {
        EncoderError::Tensor(err)
    }
}

/// Patch and embedding geometry of the encoders.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// 3D patch depth.
    pub n1: usize,
    /// 3D patch height.
    pub h1: usize,
    /// 3D patch width.
    pub w1: usize,
    /// Pooling factor applied to each 3D patch-grid axis by the connector.
    pub pool: usize,
    /// Shared hidden dimension of 3D and 2D tokens.
    pub d: usize,
    /// Number of 2D tokens per slice (square patches).
    pub l2d: usize,
    /// Text embedding dimension.
    pub dt: usize,
    /// Enable the cross-token mixing layer in both image encoders.
    pub mixing: bool,
}

/// Full model geometry: expected volume dimensions plus encoder and decoder
/// settings.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Expected volume depth (slice count).
    pub n: usize,
    /// Expected volume height.
    pub h: usize,
    /// Expected volume width.
    pub w: usize,
    /// Encoder geometry.
    pub enc: EncoderConfig,
    /// Decoder geometry.
    pub dec: DecoderConfig,
}

impl ModelConfig {
    /// The default small configuration used throughout training and tests.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            n: 32,
            h: 64,
            w: 64,
            enc: EncoderConfig {
                n1: 4,
                h1: 16,
                w1: 16,
                pool: 1,
                d: 32,
                l2d: 16,
                dt: 32,
                mixing: false,
            },
            dec: DecoderConfig {
                d_dec: 32,
                vocab: 64,
                max_len: 12,
            },
        }
    }

    /// Check every dimensional invariant.
    pub fn validate(&self) -> Result<(), EncoderError> {
        let e = &self.enc;
        let bad = |detail: String| Err(EncoderError::BadConfig(detail));
        if self.n == 0 || self.h == 0 || self.w == 0 {
            return bad(format!("volume dims must be positive, got {}x{}x{}", self.n, self.h, self.w));
        }
        if e.n1 == 0 || e.h1 == 0 || e.w1 == 0 || e.pool == 0 {
            return bad("patch extents and pool factor must be positive".into());
        }
        if e.d == 0 || e.dt == 0 || e.l2d == 0 {
            return bad("embedding dimensions and token counts must be positive".into());
        }
        if self.n % (e.n1 * e.pool) != 0 {
            return bad(format!("depth {}: {}x{} patch-pool must divide it", self.n, e.n1, e.pool));
        }
        if self.h % (e.h1 * e.pool) != 0 {
            return bad(format!("height {}: {}x{} patch-pool must divide it", self.h, e.h1, e.pool));
        }
        if self.w % (e.w1 * e.pool) != 0 {
            return bad(format!("width {}: {}x{} patch-pool must divide it", self.w, e.w1, e.pool));
        }
        let side = self.patch2d_side();
        if side == 0 || side * side * e.l2d != self.h * self.w {
            return bad(format!(
                "l2d {} does not tile a {}x{} slice with square patches",
                e.l2d, self.h, self.w
            ));
        }
        if self.h % side != 0 || self.w % side != 0 {
            return bad(format!("2D patch side {side} must divide {}x{}", self.h, self.w));
        }
        if self.dec.d_dec == 0 {
            return bad("decoder width must be positive".into());
        }
        if self.dec.vocab < 2 {
            return bad(format!("vocabulary size must be at least 2, got {}", self.dec.vocab));
        }
        if self.dec.max_len == 0 {
            return bad("generation cap must be at least 1".into());
        }
        Ok(())
    }

    /// 3D patch-grid extents before pooling.
    pub fn grid(&self) -> [usize; 3] {
        [self.n / self.enc.n1, self.h / self.enc.h1, self.w / self.enc.w1]
    }

    /// Number of 3D patches before pooling.
    pub fn l1(&self) -> usize {
        let [a, b, c] = self.grid();
        a * b * c
    }

    /// 3D patch-grid extents after pooling.
    pub fn pooled_grid(&self) -> [usize; 3] {
        let [a, b, c] = self.grid();
        [a / self.enc.pool, b / self.enc.pool, c / self.enc.pool]
    }

    /// Number of 3D tokens after pooling.
    pub fn l_v(&self) -> usize {
        let [a, b, c] = self.pooled_grid();
        a * b * c
    }

    /// 3D tokens per slice after depth replication.
    pub fn slice_tokens(&self) -> usize {
        let [_, b, c] = self.pooled_grid();
        b * c
    }

    /// Depth replication factor mapping pooled layers onto slices.
    pub fn repeat_factor(&self) -> usize {
        self.enc.n1 * self.enc.pool
    }

    /// Flattened 3D patch length.
    pub fn patch3d_len(&self) -> usize {
        self.enc.n1 * self.enc.h1 * self.enc.w1
    }

    /// Side of the square 2D patches (0 when no integer side exists).
    pub fn patch2d_side(&self) -> usize {
        let area = self.h * self.w / self.enc.l2d.max(1);
        let side = (area as f64).sqrt().round() as usize;
        if side > 0 && side * side == area {
            side
        } else {
            0
        }
    }

    /// Flattened 2D patch length.
    pub fn patch2d_len(&self) -> usize {
        let side = self.patch2d_side();
        side * side
    }
}

/// The named parameter groups of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Enc3d,
    Enc2d,
    Conn3d,
    Conn2d,
    TextEnc,
    ScorerMlp,
    Decoder,
}

impl ParamGroup {
    /// Stable lowercase name used in checkpoints and reports.
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Enc3d => "enc3d",
            ParamGroup::Enc2d => "enc2d",
            ParamGroup::Conn3d => "conn3d",
            ParamGroup::Conn2d => "conn2d",
            ParamGroup::TextEnc => "text_enc",
            ParamGroup::ScorerMlp => "scorer_mlp",
            ParamGroup::Decoder => "decoder",
        }
    }

    /// All groups in storage order.
    pub fn all() -> [ParamGroup; 7] {
        [
            ParamGroup::Enc3d,
            ParamGroup::Enc2d,
            ParamGroup::Conn3d,
            ParamGroup::Conn2d,
            ParamGroup::TextEnc,
            ParamGroup::ScorerMlp,
            ParamGroup::Decoder,
        ]
    }

    /// Inverse of [`ParamGroup::as_str`].
    pub fn parse(name: &str) -> Option<ParamGroup> {
        ParamGroup::all().into_iter().find(|g| g.as_str() == name)
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    /// Owning group.
    pub group: ParamGroup,
    /// Name within the group, e.g. `fc1.w`.
    pub name: String,
    /// Current values.
    pub tensor: Tensor,
    /// Fan-in used for the init scale.
    pub fan_in: usize,
}

/// Expected name, shape, and fan-in of one parameter under a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub group: ParamGroup,
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

/// The expected parameter layout of a configuration, in storage order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let e = &cfg.enc;
    let (d, dt, dd, v) = (e.d, e.dt, cfg.dec.d_dec, cfg.dec.vocab);
    let l1 = cfg.l1();
    let p3 = cfg.patch3d_len();
    let p2 = cfg.patch2d_len();
    let mut specs = Vec::new();
    let mut push = |group, name, shape: Vec<usize>, fan_in| {
        specs.push(ParamSpec { group, name, shape, fan_in });
    };

    push(ParamGroup::Enc3d, "patch.w", vec![p3, d], p3);
    push(ParamGroup::Enc3d, "patch.b", vec![d], p3);
    if e.mixing {
        push(ParamGroup::Enc3d, "mix.w", vec![l1, l1], l1);
        push(ParamGroup::Enc3d, "mix.b", vec![l1], l1);
    }

    push(ParamGroup::Enc2d, "patch.w", vec![p2, d], p2);
    push(ParamGroup::Enc2d, "patch.b", vec![d], p2);
    if e.mixing {
        push(ParamGroup::Enc2d, "mix.w", vec![e.l2d, e.l2d], e.l2d);
        push(ParamGroup::Enc2d, "mix.b", vec![e.l2d], e.l2d);
    }

    for group in [ParamGroup::Conn3d, ParamGroup::Conn2d] {
        push(group, "fc1.w", vec![d, d], d);
        push(group, "fc1.b", vec![d], d);
        push(group, "fc2.w", vec![d, d], d);
        push(group, "fc2.b", vec![d], d);
    }

    push(ParamGroup::TextEnc, "embed", vec![v, dt], dt);

    push(ParamGroup::ScorerMlp, "fc1.w", vec![dt, d], dt);
    push(ParamGroup::ScorerMlp, "fc1.b", vec![d], dt);
    push(ParamGroup::ScorerMlp, "fc2.w", vec![d, d], d);
    push(ParamGroup::ScorerMlp, "fc2.b", vec![d], d);

    push(ParamGroup::Decoder, "vis.w", vec![d, dd], d);
    push(ParamGroup::Decoder, "vis.b", vec![dd], d);
    push(ParamGroup::Decoder, "embed", vec![v, dd], dd);
    for name in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
        push(ParamGroup::Decoder, name, vec![dd, dd], dd);
    }
    for name in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
        push(ParamGroup::Decoder, name, vec![dd], dd);
    }
    push(ParamGroup::Decoder, "ff1.w", vec![dd, 2 * dd], dd);
    push(ParamGroup::Decoder, "ff1.b", vec![2 * dd], dd);
    push(ParamGroup::Decoder, "ff2.w", vec![2 * dd, dd], 2 * dd);
    push(ParamGroup::Decoder, "ff2.b", vec![dd], 2 * dd);
    push(ParamGroup::Decoder, "out.w", vec![dd, v], dd);
    push(ParamGroup::Decoder, "out.b", vec![v], dd);
    specs
}

/// All model weights, addressable by group and name.
#[derive(Debug, Clone)]
pub struct ModelParams {
    cfg: ModelConfig,
    seed: u64,
    entries: Vec<ParamEntry>,
    index: HashMap<(ParamGroup, String), usize>,
}

impl ModelParams {
    /// Fresh parameters: every tensor drawn uniformly from
    /// `±1/sqrt(fan_in)` under a stream derived from `seed`.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<ModelParams, EncoderError> {
        cfg.validate()?;
        let mut rng = Rng::derived(seed, PARAM_STREAM);
        let mut entries = Vec::new();
        for spec in param_layout(&cfg) {
            let bound = 1.0 / (spec.fan_in as f64).sqrt();
            let numel: usize = spec.shape.iter().product();
            let data: Vec<f64> = (0..numel).map(|_| rng.uniform(-bound, bound)).collect();
            entries.push(ParamEntry {
                group: spec.group,
                name: spec.name.to_owned(),
                tensor: Tensor::new(spec.shape, data)?,
                fan_in: spec.fan_in,
            });
        }
        Self::from_parts(cfg, seed, entries)
    }

    /// Assemble parameters from explicit entries (checkpoint loading).
    /// The entries must match the configuration's layout exactly.
    pub fn from_parts(
        cfg: ModelConfig,
        seed: u64,
        entries: Vec<ParamEntry>,
    ) -> Result<ModelParams, EncoderError> {
        cfg.validate()?;
        let layout = param_layout(&cfg);
        if layout.len() != entries.len() {
            return Err(EncoderError::ParamMismatch {
                detail: format!("expected {} tensors, got {}", layout.len(), entries.len()),
            });
        }
        let mut index = HashMap::new();
        for (i, (spec, entry)) in layout.iter().zip(&entries).enumerate() {
            if spec.group != entry.group || spec.name != entry.name {
                return Err(EncoderError::ParamMismatch {
                    detail: format!(
                        "tensor {i}: expected {}/{}, got {}/{}",
                        spec.group.as_str(),
                        spec.name,
                        entry.group.as_str(),
                        entry.name
                    ),
                });
            }
            if spec.shape != entry.tensor.shape() {
                return Err(EncoderError::ParamMismatch {
                    detail: format!(
                        "tensor {}/{}: expected shape {:?}, got {:?}",
                        spec.group.as_str(),
                        spec.name,
                        spec.shape,
                        entry.tensor.shape()
                    ),
                });
            }
            index.insert((entry.group, entry.name.clone()), i);
        }
        Ok(ModelParams { cfg, seed, entries, index })
    }

    /// The configuration these parameters were built for.
    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    /// The seed the initial values were drawn from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// All entries in storage order.
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Position of a named tensor.
    pub fn index_of(&self, group: ParamGroup, name: &str) -> Option<usize> {
        self.index.get(&(group, name.to_owned())).copied()
    }

    /// One tensor by storage position.
    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].tensor
    }

    /// Mutable access for optimizer updates.
    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].tensor
    }

    /// Register every tensor on `tape`; groups listed in `trainable` become
    /// gradient-tracked parameters, everything else enters as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: &[ParamGroup]) -> Binding<'_> {
        let ids = self
            .entries
            .iter()
            .map(|entry| {
                if trainable.contains(&entry.group) {
                    tape.param(entry.tensor.clone())
                } else {
                    tape.leaf(entry.tensor.clone())
                }
            })
            .collect();
        Binding { params: self, ids }
    }
}

/// Tape registration of a parameter set: node ids in storage order.
pub struct Binding<'p> {
    params: &'p ModelParams,
    ids: Vec<NodeId>,
}

impl Binding<'_> {
    /// Node id of a named tensor. Panics on a name that is not part of the
    /// layout; that is a wiring bug, not a runtime condition.
    pub fn get(&self, group: ParamGroup, name: &str) -> NodeId {
        let index = self
            .params
            .index_of(group, name)
            .unwrap_or_else(|| panic!("no parameter {}/{name} in layout", group.as_str()));
        self.ids[index]
    }

    /// Node ids with their storage positions, for gradient collection.
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// The parameter store this binding was built from.
    pub fn params(&self) -> &ModelParams {
        self.params
    }
}

fn check_dims(cfg: &ModelConfig, vol: &Volume) -> Result<(), EncoderError> {
    if vol.dims() != (cfg.n, cfg.h, cfg.w) {
        return Err(EncoderError::VolumeDims {
            expected: (cfg.n, cfg.h, cfg.w),
            got: vol.dims(),
        });
    }
    Ok(())
}

/// Flatten a volume into 3D patch rows: `[l1, n1*h1*w1]`, patches ordered by
/// (depth, height, width) grid position, voxels within a patch row-major.
pub fn extract_3d_patches(cfg: &ModelConfig, vol: &Volume) -> Result<Tensor, EncoderError> {
    check_dims(cfg, vol)?;
    let e = &cfg.enc;
    let [gn, gh, gw] = cfg.grid();
    let mut data = Vec::with_capacity(cfg.l1() * cfg.patch3d_len());
    for az in 0..gn {
        for ay in 0..gh {
            for ax in 0..gw {
                for dz in 0..e.n1 {
                    for dy in 0..e.h1 {
                        for dx in 0..e.w1 {
                            data.push(vol.voxel(
                                az * e.n1 + dz,
                                ay * e.h1 + dy,
                                ax * e.w1 + dx,
                            ));
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![cfg.l1(), cfg.patch3d_len()], data)?)
}

/// Flatten one slice into 2D patch rows: `[l2d, side*side]`.
pub fn extract_2d_patches(
    cfg: &ModelConfig,
    vol: &Volume,
    slice: usize,
) -> Result<Tensor, EncoderError> {
    check_dims(cfg, vol)?;
    if slice >= cfg.n {
        return Err(EncoderError::SliceIndex { index: slice, bound: cfg.n });
    }
    let side = cfg.patch2d_side();
    let mut data = Vec::with_capacity(cfg.enc.l2d * side * side);
    for py in 0..cfg.h / side {
        for px in 0..cfg.w / side {
            for dy in 0..side {
                for dx in 0..side {
                    data.push(vol.voxel(slice, py * side + dy, px * side + dx));
                }
            }
        }
    }
    Ok(Tensor::new(vec![cfg.enc.l2d, side * side], data)?)
}

fn mix_tokens(
    tape: &mut Tape,
    bind: &Binding<'_>,
    group: ParamGroup,
    tokens: NodeId,
) -> Result<NodeId, EncoderError> {
    let flipped = tape.transpose(tokens)?;
    let mixed = tape.affine(flipped, bind.get(group, "mix.w"), bind.get(group, "mix.b"))?;
    let squashed = tape.tanh(mixed);
    Ok(tape.transpose(squashed)?)
}

/// Frozen-side 3D feature extraction: patch embedding, optional mixing, and
/// grid pooling. Returns `[l_v, d]` tokens, before the connector.
pub fn encode_3d_stem(
    tape: &mut Tape,
    bind: &Binding<'_>,
    cfg: &ModelConfig,
    vol: &Volume,
) -> Result<NodeId, EncoderError> {
    let patches = extract_3d_patches(cfg, vol)?;
    let p = tape.leaf(patches);
    let mut tokens = tape.affine(
        p,
        bind.get(ParamGroup::Enc3d, "patch.w"),
        bind.get(ParamGroup::Enc3d, "patch.b"),
    )?;
    if cfg.enc.mixing {
        tokens = mix_tokens(tape, bind, ParamGroup::Enc3d, tokens)?;
    }
    Ok(tape.pool_grid(tokens, cfg.grid(), cfg.enc.pool)?)
}

/// The 3D connector MLP applied to each token row.
pub fn connect_3d(
    tape: &mut Tape,
    bind: &Binding<'_>,
    tokens: NodeId,
) -> Result<NodeId, EncoderError> {
    connector(tape, bind, ParamGroup::Conn3d, tokens)
}

/// Full 3D branch: stem plus connector, yielding `[l_v, d]`.
pub fn encode_3d(
    tape: &mut Tape,
    bind: &Binding<'_>,
    cfg: &ModelConfig,
    vol: &Volume,
) -> Result<NodeId, EncoderError> {
    let stem = encode_3d_stem(tape, bind, cfg, vol)?;
    connect_3d(tape, bind, stem)
}

/// 2D feature extraction for one slice: patch embedding plus optional
/// mixing. Returns `[l2d, d]` tokens, before the connector.
pub fn encode_2d_stem(
    tape: &mut Tape,
    bind: &Binding<'_>,
    cfg: &ModelConfig,
    vol: &Volume,
    slice: usize,
) -> Result<NodeId, EncoderError> {
    let patches = extract_2d_patches(cfg, vol, slice)?;
    let p = tape.leaf(patches);
    let mut tokens = tape.affine(
        p,
        bind.get(ParamGroup::Enc2d, "patch.w"),
        bind.get(ParamGroup::Enc2d, "patch.b"),
    )?;
    if cfg.enc.mixing {
        tokens = mix_tokens(tape, bind, ParamGroup::Enc2d, tokens)?;
    }
    Ok(tokens)
}

/// The 2D connector MLP applied to each token row.
pub fn connect_2d(
    tape: &mut Tape,
    bind: &Binding<'_>,
    tokens: NodeId,
) -> Result<NodeId, EncoderError> {
    connector(tape, bind, ParamGroup::Conn2d, tokens)
}

/// Full 2D branch for one slice: stem plus connector, yielding `[l2d, d]`.
pub fn encode_2d(
    tape: &mut Tape,
    bind: &Binding<'_>,
    cfg: &ModelConfig,
    vol: &Volume,
    slice: usize,
) -> Result<NodeId, EncoderError> {
    let stem = encode_2d_stem(tape, bind, cfg, vol, slice)?;
    connect_2d(tape, bind, stem)
}

fn connector(
    tape: &mut Tape,
    bind: &Binding<'_>,
    group: ParamGroup,
    tokens: NodeId,
) -> Result<NodeId, EncoderError> {
    let h = tape.affine(tokens, bind.get(group, "fc1.w"), bind.get(group, "fc1.b"))?;
    let h = tape.tanh(h);
    Ok(tape.affine(h, bind.get(group, "fc2.w"), bind.get(group, "fc2.b"))?)
}

/// Bag-of-embeddings text encoder: the mean of the tokens' embedding rows,
/// yielding a `[dt]` vector.
pub fn encode_text(
    tape: &mut Tape,
    bind: &Binding<'_>,
    tokens: &[usize],
) -> Result<NodeId, EncoderError> {
    if tokens.is_empty() {
        return Err(EncoderError::EmptyText);
    }
    let rows = tape.embed_rows(bind.get(ParamGroup::TextEnc, "embed"), tokens)?;
    Ok(tape.mean_pool(rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.n = 8;
        cfg.h = 16;
        cfg.w = 16;
        cfg.enc.n1 = 2;
        cfg.enc.h1 = 4;
        cfg.enc.w1 = 4;
        cfg.enc.d = 6;
        cfg.enc.l2d = 4;
        cfg.enc.dt = 5;
        cfg.dec.d_dec = 8;
        cfg.dec.vocab = 12;
        cfg
    }

    fn noise_volume(cfg: &ModelConfig, seed: u64) -> Volume {
        let mut vol = Volume::zeros(cfg.n, cfg.h, cfg.w).unwrap();
        let mut rng = Rng::new(seed);
        for z in 0..cfg.n {
            for y in 0..cfg.h {
                for x in 0..cfg.w {
                    *vol.voxel_mut(z, y, x) = rng.uniform(-1.0, 1.0);
                }
            }
        }
        vol
    }

    #[test]
    fn shape_laws_hold_over_a_config_grid() {
        let mut checked = 0;
        for (n, h, w) in [(8, 16, 16), (8, 32, 32), (16, 16, 16), (16, 32, 16)] {
            for (n1, h1, w1) in [(2, 4, 4), (4, 8, 8)] {
                for pool in [1, 2] {
                    let mut cfg = tiny_config();
                    cfg.n = n;
                    cfg.h = h;
                    cfg.w = w;
                    cfg.enc.n1 = n1;
                    cfg.enc.h1 = h1;
                    cfg.enc.w1 = w1;
                    cfg.enc.pool = pool;
                    cfg.enc.l2d = 4;
                    if cfg.validate().is_err() {
                        continue;
                    }
                    let expected_l1 = (n / n1) * (h / h1) * (w / w1);
                    let expected_lv =
                        (n / (n1 * pool)) * (h / (h1 * pool)) * (w / (w1 * pool));
                    assert_eq!(cfg.l1(), expected_l1);
                    assert_eq!(cfg.l_v(), expected_lv);
                    assert_eq!(
                        cfg.slice_tokens(),
                        (h / (h1 * pool)) * (w / (w1 * pool))
                    );

                    let params = ModelParams::init(cfg.clone(), 3).unwrap();
                    let mut tape = Tape::new();
                    let bind = params.bind(&mut tape, &[]);
                    let vol = noise_volume(&cfg, 1);
                    let z3d = encode_3d(&mut tape, &bind, &cfg, &vol).unwrap();
                    assert_eq!(tape.value(z3d).shape(), &[expected_lv, cfg.enc.d]);
                    checked += 1;
                }
            }
        }
        assert!(checked >= 10, "only {checked} configs were checkable");
    }

    #[test]
    fn encode_3d_is_block_local_without_mixing() {
        let cfg = tiny_config();
        let params = ModelParams::init(cfg.clone(), 11).unwrap();
        let base = noise_volume(&cfg, 2);

        let run = |vol: &Volume| {
            let mut tape = Tape::new();
            let bind = params.bind(&mut tape, &[]);
            let z = encode_3d(&mut tape, &bind, &cfg, vol).unwrap();
            tape.value(z).clone()
        };
        let reference = run(&base);

        let block_span = cfg.repeat_factor();
        let layer_rows = cfg.slice_tokens();
        let touched_layer = 1;
        let mut poked = base.clone();
        for z in touched_layer * block_span..(touched_layer + 1) * block_span {
            for y in 0..cfg.h {
                for x in 0..cfg.w {
                    *poked.voxel_mut(z, y, x) += 0.5;
                }
            }
        }
        let changed = run(&poked);

        let d = cfg.enc.d;
        for row in 0..cfg.l_v() {
            let layer = row / layer_rows;
            let same = (0..d).all(|c| {
                reference.data()[row * d + c] == changed.data()[row * d + c]
            });
            if layer == touched_layer {
                assert!(!same, "token {row} in the touched depth layer never moved");
            } else {
                assert!(same, "token {row} outside the touched depth layer moved");
            }
        }
    }

    #[test]
    fn encode_2d_depends_only_on_its_slice() {
        let cfg = tiny_config();
        let params = ModelParams::init(cfg.clone(), 7).unwrap();
        let base = noise_volume(&cfg, 3);
        let mut poked = base.clone();
        for y in 0..cfg.h {
            for x in 0..cfg.w {
                *poked.voxel_mut(5, y, x) = 9.0;
            }
        }

        let run = |vol: &Volume, j: usize| {
            let mut tape = Tape::new();
            let bind = params.bind(&mut tape, &[]);
            let z = encode_2d(&mut tape, &bind, &cfg, vol, j).unwrap();
            tape.value(z).clone()
        };
        assert_eq!(run(&base, 2).data(), run(&poked, 2).data());
        assert_ne!(run(&base, 5).data(), run(&poked, 5).data());

        let mut tape = Tape::new();
        let bind = params.bind(&mut tape, &[]);
        assert!(matches!(
            encode_2d(&mut tape, &bind, &cfg, &base, cfg.n),
            Err(EncoderError::SliceIndex { .. })
        ));
    }

    #[test]
    fn text_encoder_is_a_bag_of_embeddings() {
        let cfg = tiny_config();
        let params = ModelParams::init(cfg.clone(), 5).unwrap();
        let embed_index = params.index_of(ParamGroup::TextEnc, "embed").unwrap();
        let table = params.tensor(embed_index).clone();

        let run = |ids: &[usize]| {
            let mut tape = Tape::new();
            let bind = params.bind(&mut tape, &[]);
            let z = encode_text(&mut tape, &bind, ids).unwrap();
            tape.value(z).clone()
        };

        let single = run(&[3]);
        let dt = cfg.enc.dt;
        assert_eq!(single.data(), &table.data()[3 * dt..4 * dt]);

        let fwd = run(&[1, 4, 2]);
        let rev = run(&[2, 1, 4]);
        for (a, b) in fwd.data().iter().zip(rev.data()) {
            assert!((a - b).abs() <= 1e-12, "token order changed the bag: {a} vs {b}");
        }
        assert_eq!(run(&[5, 5]).data(), run(&[5]).data());

        let mut tape = Tape::new();
        let bind = params.bind(&mut tape, &[]);
        assert!(matches!(
            encode_text(&mut tape, &bind, &[]),
            Err(EncoderError::EmptyText)
        ));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = tiny_config();
        let a = ModelParams::init(cfg.clone(), 42).unwrap();
        let b = ModelParams::init(cfg.clone(), 42).unwrap();
        let c = ModelParams::init(cfg.clone(), 43).unwrap();
        for (ea, eb) in a.entries().iter().zip(b.entries()) {
            assert_eq!(ea.tensor.data(), eb.tensor.data(), "{}/{}", ea.group.as_str(), ea.name);
        }
        assert!(
            a.entries()
                .iter()
                .zip(c.entries())
                .any(|(ea, ec)| ea.tensor.data() != ec.tensor.data()),
            "different seeds produced identical parameters"
        );
        for entry in a.entries() {
            let bound = 1.0 / (entry.fan_in as f64).sqrt();
            assert!(
                entry.tensor.data().iter().all(|x| x.abs() <= bound),
                "{}/{} exceeds its init bound",
                entry.group.as_str(),
                entry.name
            );
        }
        let groups: std::collections::BTreeSet<ParamGroup> =
            a.entries().iter().map(|e| e.group).collect();
        assert_eq!(groups.len(), ParamGroup::all().len());
    }

    #[test]
    fn zero_volume_with_zero_biases_gives_zero_tokens() {
        for mixing in [false, true] {
            let mut cfg = tiny_config();
            cfg.enc.mixing = mixing;
            let mut params = ModelParams::init(cfg.clone(), 4).unwrap();
            for i in 0..params.entries().len() {
                if params.entries()[i].name.ends_with(".b") {
                    let t = params.tensor_mut(i);
                    for x in t.data_mut() {
                        *x = 0.0;
                    }
                }
            }
            let vol = Volume::zeros(cfg.n, cfg.h, cfg.w).unwrap();
            let mut tape = Tape::new();
            let bind = params.bind(&mut tape, &[]);
            let z3d = encode_3d(&mut tape, &bind, &cfg, &vol).unwrap();
            assert!(tape.value(z3d).data().iter().all(|&x| x == 0.0));
            let z2d = encode_2d(&mut tape, &bind, &cfg, &vol, 0).unwrap();
            assert!(tape.value(z2d).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn mixing_layer_changes_the_features() {
        let mut plain = tiny_config();
        plain.enc.mixing = false;
        let mut mixed = tiny_config();
        mixed.enc.mixing = true;
        let vol = noise_volume(&plain, 9);

        let run = |cfg: &ModelConfig| {
            let params = ModelParams::init(cfg.clone(), 21).unwrap();
            let mut tape = Tape::new();
            let bind = params.bind(&mut tape, &[]);
            let z = encode_3d(&mut tape, &bind, cfg, &vol).unwrap();
            tape.value(z).clone()
        };
        assert_ne!(run(&plain).data(), run(&mixed).data());
    }

    #[test]
    fn binding_routes_gradients_only_to_trainable_groups() {
        let cfg = tiny_config();
        let params = ModelParams::init(cfg.clone(), 6).unwrap();
        let vol = noise_volume(&cfg, 4);
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape, &[ParamGroup::Conn3d]);
        let z = encode_3d(&mut tape, &bind, &cfg, &vol).unwrap();
        let root = tape.sum(z);
        tape.backward(root).unwrap();
        let conn_w = bind.get(ParamGroup::Conn3d, "fc2.w");
        let enc_w = bind.get(ParamGroup::Enc3d, "patch.w");
        let grads = tape.grad(conn_w).unwrap();
        assert!(grads.iter().any(|&g| g != 0.0));
        assert!(tape.grad(enc_w).is_none());
    }

    #[test]
    fn config_validation_rejects_broken_geometry() {
        let mut ragged = tiny_config();
        ragged.n = 9;
        assert!(matches!(ragged.validate(), Err(EncoderError::BadConfig(_))));

        let mut bad2d = tiny_config();
        bad2d.enc.l2d = 3;
        assert!(matches!(bad2d.validate(), Err(EncoderError::BadConfig(_))));

        let mut tiny_vocab = tiny_config();
        tiny_vocab.dec.vocab = 1;
        assert!(matches!(tiny_vocab.validate(), Err(EncoderError::BadConfig(_))));

        assert!(ModelConfig::desk().validate().is_ok());
        assert_eq!(ModelConfig::desk().l_v(), 128);
        assert_eq!(ModelConfig::desk().slice_tokens(), 16);
        assert_eq!(ModelConfig::desk().repeat_factor(), 4);

        let cfg = tiny_config();
        let params = ModelParams::init(cfg.clone(), 1).unwrap();
        let mut entries = params.entries().to_vec();
        entries.swap(0, 1);
        assert!(matches!(
            ModelParams::from_parts(cfg.clone(), 1, entries),
            Err(EncoderError::ParamMismatch { .. })
        ));

        let wrong_vol = Volume::zeros(4, 16, 16).unwrap();
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape, &[]);
        assert!(matches!(
            encode_3d(&mut tape, &bind, &cfg, &wrong_vol),
            Err(EncoderError::VolumeDims { .. })
        ));
    }
}
