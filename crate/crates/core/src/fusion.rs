//! Fusing the 3D and 2D branches under a slice-scoring strategy.
//!
//! The 3D tokens are replicated along depth so every slice owns a local 3D
//! context; each slice's context is averaged together with its 2D tokens
//! into a summary vector, scored against a text-derived query, and the
//! softmax of those scores weights the per-slice 2D features into one
//! aggregate. Alternative strategies swap the scoring rule or drop one
//! branch entirely for comparison runs.

use std::fmt;
use std::str::FromStr;

use crate::encoders::{
    connect_2d, connect_3d, encode_2d_stem, encode_3d_stem, encode_text, Binding, EncoderError,
    ModelConfig, ModelParams, ParamGroup,
};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Tensor, TensorError};
use crate::volume::Volume;

/// Rng streams separating the stochastic baseline score draws.
const GAUSSIAN_STREAM: u64 = 0x6761_7573;
const RANDOM_STREAM: u64 = 0x7261_6e64;

/// Errors raised while running the fusion pipeline.
#[derive(Debug)]
pub enum FusionError {
    /// A strategy name that is not part of the fixed set.
    UnknownStrategy { name: String },
    /// Failure in an encoder stage.
    Encoder(EncoderError),
    /// Underlying tensor-shape failure.
    Tensor(TensorError),
}

impl fmt::Display for FusionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionError::UnknownStrategy { name } => write!(
                f,
                "unknown strategy '{name}' (expected one of: {})",
                Strategy::all()
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
            FusionError::Encoder(err) => write!(f, "encoder error: {err}"),
            FusionError::Tensor(err) => write!(f, "tensor error: {err}"),
        }
    }
}

impl std::error::Error for FusionError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            FusionError::Encoder(err) => Some(err),
            FusionError::Tensor(err) => Some(err),
            _ => None,
        }
    }
}

impl From<EncoderError> for FusionError {
    fn from(err: EncoderError) -> Self {
        FusionError::Encoder(err)
    }
}

impl From<TensorError> for FusionError {
    fn from(err: TensorError) -> Self {
        FusionError::Tensor(err)
    }
}

/// How per-slice 2D features are weighted into the fused token set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Text-guided scoring of each slice's combined 3D and 2D summary.
    Tgis,
    /// Uniform slice weights.
    Avg,
    /// Random weights from a softmaxed standard normal draw.
    Gaussian,
    /// Random weights from normalized uniform draws.
    Random,
    /// Elementwise maximum over slices instead of a weighted sum.
    Maxpool,
    /// 3D branch alone; the 2D branch is skipped.
    ThreeDOnly,
    /// Uniformly aggregated 2D branch alone; the 3D branch is skipped.
    TwoDOnly,
}

impl Strategy {
    /// Stable lowercase name used on the command line and in reports.
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Tgis => "tgis",
            Strategy::Avg => "avg",
            Strategy::Gaussian => "gaussian",
            Strategy::Random => "random",
            Strategy::Maxpool => "maxpool",
            Strategy::ThreeDOnly => "3d_only",
            Strategy::TwoDOnly => "2d_only",
        }
    }

    /// All strategies, the text-guided one first.
    pub fn all() -> [Strategy; 7] {
        [
            Strategy::Tgis,
            Strategy::Avg,
            Strategy::Gaussian,
            Strategy::Random,
            Strategy::Maxpool,
            Strategy::ThreeDOnly,
            Strategy::TwoDOnly,
        ]
    }

    /// Whether this strategy produces an explicit slice-score vector.
    pub fn has_scores(self) -> bool {
        !matches!(self, Strategy::Maxpool | Strategy::ThreeDOnly)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Strategy, FusionError> {
        Strategy::all()
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| FusionError::UnknownStrategy { name: s.to_owned() })
    }
}

/// Replicate the pooled 3D tokens along depth: slice `j` receives the rows
/// of its containing depth layer, as a `[slice_tokens, d]` view per slice.
pub fn transform_3d(
    tape: &mut Tape,
    cfg: &ModelConfig,
    z3d: NodeId,
) -> Result<Vec<NodeId>, FusionError> {
    let [pn, ph, pw] = cfg.pooled_grid();
    let st = ph * pw;
    let d = cfg.enc.d;
    let wide = tape.reshape(z3d, vec![pn, st * d])?;
    let repeated = tape.repeat_blocks(wide, cfg.repeat_factor())?;
    let flat = tape.reshape(repeated, vec![cfg.n * st, d])?;
    (0..cfg.n)
        .map(|j| tape.slice_rows(flat, j * st, st).map_err(FusionError::from))
        .collect()
}

/// Reference implementation of [`transform_3d`] by direct index arithmetic,
/// for cross-checking. Bitwise identical to the tape version.
pub fn transform_3d_naive(cfg: &ModelConfig, z3d: &Tensor) -> Vec<Tensor> {
    let st = cfg.slice_tokens();
    let d = cfg.enc.d;
    let f = cfg.repeat_factor();
    (0..cfg.n)
        .map(|j| {
            let layer = j / f;
            let mut data = Vec::with_capacity(st * d);
            for r in 0..st {
                let src = (layer * st + r) * d;
                data.extend_from_slice(&z3d.data()[src..src + d]);
            }
            Tensor::new(vec![st, d], data).expect("slice shape is consistent")
        })
        .collect()
}

/// One slice's summary vector: the mean over its local 3D rows and 2D rows
/// stacked together, yielding `[d]`.
pub fn slice_features(
    tape: &mut Tape,
    local3d: NodeId,
    z2d: NodeId,
) -> Result<NodeId, FusionError> {
    let both = tape.concat_rows(local3d, z2d)?;
    Ok(tape.mean_pool(both)?)
}

/// The text query in feature space: a two-layer MLP over the text embedding,
/// yielding `[d]`.
pub fn scorer_query(
    tape: &mut Tape,
    bind: &Binding<'_>,
    z_text: NodeId,
) -> Result<NodeId, FusionError> {
    let dt = tape.value(z_text).numel();
    let row = tape.reshape(z_text, vec![1, dt])?;
    let grp = ParamGroup::ScorerMlp;
    let h = tape.affine(row, bind.get(grp, "fc1.w"), bind.get(grp, "fc1.b"))?;
    let h = tape.tanh(h);
    let q = tape.affine(h, bind.get(grp, "fc2.w"), bind.get(grp, "fc2.b"))?;
    let d = tape.value(q).numel();
    Ok(tape.reshape(q, vec![d])?)
}

/// Softmax of the dot products between the query and each slice summary:
/// a probability vector over slices.
pub fn relevance_scores(
    tape: &mut Tape,
    query: NodeId,
    features: &[NodeId],
) -> Result<NodeId, FusionError> {
    let stacked = tape.stack_vecs(features)?;
    let d = tape.value(query).numel();
    let column = tape.reshape(query, vec![d, 1])?;
    let logits = tape.matmul(stacked, column)?;
    let flat = tape.reshape(logits, vec![features.len()])?;
    Ok(tape.softmax(flat)?)
}

/// Host-side score vector for the strategies that do not learn their
/// weights, or `None` for the strategies without an explicit score vector.
/// Stochastic draws derive from `sample_seed`, so one sample keeps the same
/// weights across epochs.
pub fn baseline_scores(strategy: Strategy, n: usize, sample_seed: u64) -> Option<Tensor> {
    match strategy {
        Strategy::Avg | Strategy::TwoDOnly => {
            Some(Tensor::vector(vec![1.0 / n as f64; n]))
        }
        Strategy::Gaussian => {
            let mut rng = Rng::derived(sample_seed, GAUSSIAN_STREAM);
            let draws: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let peak = draws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = draws.iter().map(|&x| (x - peak).exp()).collect();
            let total: f64 = exps.iter().sum();
            Some(Tensor::vector(exps.into_iter().map(|e| e / total).collect()))
        }
        Strategy::Random => {
            let mut rng = Rng::derived(sample_seed, RANDOM_STREAM);
            let draws: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 1.0)).collect();
            let total: f64 = draws.iter().sum();
            Some(Tensor::vector(draws.into_iter().map(|x| x / total).collect()))
        }
        Strategy::Tgis | Strategy::Maxpool | Strategy::ThreeDOnly => None,
    }
}

/// Weighted sum of the per-slice 2D features under a score vector.
pub fn aggregate_2d(
    tape: &mut Tape,
    scores: NodeId,
    z2ds: &[NodeId],
) -> Result<NodeId, FusionError> {
    Ok(tape.weighted_sum(scores, z2ds)?)
}

/// Fused token set: the 3D tokens followed by the aggregated 2D tokens.
pub fn fuse(tape: &mut Tape, z3d: NodeId, agg2d: NodeId) -> Result<NodeId, FusionError> {
    Ok(tape.concat_rows(z3d, agg2d)?)
}

/// Per-sample inputs to the fusion pipeline. The optional stems are cached
/// pre-connector activations; when present they are re-entered as constants
/// instead of being recomputed from the volume.
pub struct PipelineInput<'a> {
    /// The volume to encode.
    pub volume: &'a Volume,
    /// Instruction token ids (used by the text-guided strategy).
    pub instruction: &'a [usize],
    /// Seed for the stochastic baseline score draws.
    pub sample_seed: u64,
    /// Cached 3D stem `[l_v, d]`, pre-connector.
    pub stem3d: Option<&'a Tensor>,
    /// Cached per-slice 2D stems `[l2d, d]`, pre-connector.
    pub stems2d: Option<&'a [Tensor]>,
}

/// What the fusion pipeline hands to the decoder.
pub struct FusionOutput {
    /// Fused visual tokens `[m, d]`; `m` depends on the strategy.
    pub fused: NodeId,
    /// Slice scores `[n]`, for the strategies that have them.
    pub scores: Option<NodeId>,
}

fn full_3d(
    tape: &mut Tape,
    bind: &Binding<'_>,
    cfg: &ModelConfig,
    input: &PipelineInput<'_>,
) -> Result<NodeId, FusionError> {
    let stem = match input.stem3d {
        Some(t) => tape.leaf(t.clone()),
        None => encode_3d_stem(tape, bind, cfg, input.volume)?,
    };
    Ok(connect_3d(tape, bind, stem)?)
}

fn full_2d_per_slice(
    tape: &mut Tape,
    bind: &Binding<'_>,
    cfg: &ModelConfig,
    input: &PipelineInput<'_>,
) -> Result<Vec<NodeId>, FusionError> {
    let mut z2ds = Vec::with_capacity(cfg.n);
    for j in 0..cfg.n {
        let stem = match input.stems2d {
            Some(ts) => tape.leaf(ts[j].clone()),
            None => encode_2d_stem(tape, bind, cfg, input.volume, j)?,
        };
        z2ds.push(connect_2d(tape, bind, stem)?);
    }
    Ok(z2ds)
}

/// Run the full visual side of the model for one sample under `strategy`.
pub fn run_pipeline(
    tape: &mut Tape,
    bind: &Binding<'_>,
    cfg: &ModelConfig,
    strategy: Strategy,
    input: &PipelineInput<'_>,
) -> Result<FusionOutput, FusionError> {
    match strategy {
        Strategy::ThreeDOnly => {
            let z3d = full_3d(tape, bind, cfg, input)?;
            Ok(FusionOutput { fused: z3d, scores: None })
        }
        Strategy::TwoDOnly => {
            let z2ds = full_2d_per_slice(tape, bind, cfg, input)?;
            let weights = baseline_scores(strategy, cfg.n, input.sample_seed)
                .expect("uniform strategy always has scores");
            let scores = tape.leaf(weights);
            let agg = aggregate_2d(tape, scores, &z2ds)?;
            Ok(FusionOutput { fused: agg, scores: Some(scores) })
        }
        Strategy::Maxpool => {
            let z3d = full_3d(tape, bind, cfg, input)?;
            let z2ds = full_2d_per_slice(tape, bind, cfg, input)?;
            let agg = tape.max_elem_over(&z2ds)?;
            let fused = fuse(tape, z3d, agg)?;
            Ok(FusionOutput { fused, scores: None })
        }
        Strategy::Avg | Strategy::Gaussian | Strategy::Random => {
            let z3d = full_3d(tape, bind, cfg, input)?;
            let z2ds = full_2d_per_slice(tape, bind, cfg, input)?;
            let weights = baseline_scores(strategy, cfg.n, input.sample_seed)
                .expect("weighted baseline always has scores");
            let scores = tape.leaf(weights);
            let agg = aggregate_2d(tape, scores, &z2ds)?;
            let fused = fuse(tape, z3d, agg)?;
            Ok(FusionOutput { fused, scores: Some(scores) })
        }
        Strategy::Tgis => {
            let z3d = full_3d(tape, bind, cfg, input)?;
            let z2ds = full_2d_per_slice(tape, bind, cfg, input)?;
            let z_text = encode_text(tape, bind, input.instruction)?;
            let query = scorer_query(tape, bind, z_text)?;
            let locals = transform_3d(tape, cfg, z3d)?;
            let features = locals
                .iter()
                .zip(&z2ds)
                .map(|(&loc, &z2d)| slice_features(tape, loc, z2d))
                .collect::<Result<Vec<_>, _>>()?;
            let scores = relevance_scores(tape, query, &features)?;
            let agg = aggregate_2d(tape, scores, &z2ds)?;
            let fused = fuse(tape, z3d, agg)?;
            Ok(FusionOutput { fused, scores: Some(scores) })
        }
    }
}

/// Text-guided slice scores for one volume and instruction, as plain
/// numbers. Convenience wrapper for exports and attention inspection.
pub fn attention_profile(
    params: &ModelParams,
    volume: &Volume,
    instruction: &[usize],
) -> Result<Vec<f64>, FusionError> {
    let cfg = params.cfg().clone();
    let mut tape = Tape::new();
    let bind = params.bind(&mut tape, &[]);
    let input = PipelineInput {
        volume,
        instruction,
        sample_seed: 0,
        stem3d: None,
        stems2d: None,
    };
    let out = run_pipeline(&mut tape, &bind, &cfg, Strategy::Tgis, &input)?;
    let scores = out.scores.expect("the text-guided strategy always has scores");
    Ok(tape.value(scores).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ModelParams;

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
    fn strategy_names_round_trip() {
        for s in Strategy::all() {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!(matches!(
            "median".parse::<Strategy>(),
            Err(FusionError::UnknownStrategy { .. })
        ));
    }

    #[test]
    fn relevance_matches_the_hand_worked_case() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
        let f1 = tape.leaf(Tensor::vector(vec![2.0, 3.0]));
        let f2 = tape.leaf(Tensor::vector(vec![0.0, 5.0]));
        let scores = relevance_scores(&mut tape, q, &[f1, f2]).unwrap();
        let got = tape.value(scores).data().to_vec();
        let e2 = 2.0f64.exp();
        let expected = [e2 / (e2 + 1.0), 1.0 / (e2 + 1.0)];
        assert!((got[0] - expected[0]).abs() < 1e-12);
        assert!((got[1] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn equal_features_give_uniform_scores() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::vector(vec![0.3, -0.8, 0.5]));
        let f = Tensor::vector(vec![1.0, 2.0, -1.5]);
        let items: Vec<NodeId> = (0..5).map(|_| tape.leaf(f.clone())).collect();
        let scores = relevance_scores(&mut tape, q, &items).unwrap();
        for &s in tape.value(scores).data() {
            assert!((s - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn transform_replicates_depth_layers_in_order() {
        let cfg = tiny_config();
        let d = cfg.enc.d;
        let lv = cfg.l_v();
        let data: Vec<f64> = (0..lv * d).map(|i| i as f64).collect();
        let z = Tensor::new(vec![lv, d], data).unwrap();

        let mut tape = Tape::new();
        let zid = tape.leaf(z.clone());
        let slices = transform_3d(&mut tape, &cfg, zid).unwrap();
        let naive = transform_3d_naive(&cfg, &z);
        assert_eq!(slices.len(), cfg.n);
        let f = cfg.repeat_factor();
        let st = cfg.slice_tokens();
        for (j, (&sid, nat)) in slices.iter().zip(&naive).enumerate() {
            let got = tape.value(sid);
            assert_eq!(got.shape(), &[st, d]);
            assert_eq!(got.data(), nat.data(), "slice {j} disagrees with the oracle");
            let layer = j / f;
            assert_eq!(got.data()[0], (layer * st * d) as f64);
        }
        for b in 0..cfg.n / f {
            let first = tape.value(slices[b * f]).data().to_vec();
            for o in 1..f {
                assert_eq!(tape.value(slices[b * f + o]).data(), &first[..]);
            }
        }
    }

    #[test]
    fn aggregation_respects_one_hot_and_uniform_weights() {
        let mut tape = Tape::new();
        let items: Vec<Tensor> = (0..4)
            .map(|i| Tensor::new(vec![2, 3], (0..6).map(|j| (i * 6 + j) as f64).collect()).unwrap())
            .collect();
        let ids: Vec<NodeId> = items.iter().map(|t| tape.leaf(t.clone())).collect();

        let hot = tape.leaf(Tensor::vector(vec![0.0, 0.0, 1.0, 0.0]));
        let picked = aggregate_2d(&mut tape, hot, &ids).unwrap();
        assert_eq!(tape.value(picked).data(), items[2].data());

        let flat = tape.leaf(Tensor::vector(vec![0.25; 4]));
        let mean = aggregate_2d(&mut tape, flat, &ids).unwrap();
        for (e, got) in tape.value(mean).data().iter().enumerate() {
            let want: f64 = items.iter().map(|t| t.data()[e]).sum::<f64>() / 4.0;
            assert!((got - want).abs() < 1e-12);
        }

        let peak = tape.max_elem_over(&ids).unwrap();
        assert_eq!(tape.value(peak).data(), items[3].data());
    }

    #[test]
    fn baseline_scores_are_deterministic_probability_vectors() {
        for strategy in [Strategy::Avg, Strategy::Gaussian, Strategy::Random] {
            let a = baseline_scores(strategy, 16, 7).unwrap();
            let b = baseline_scores(strategy, 16, 7).unwrap();
            assert_eq!(a.data(), b.data(), "{strategy} is not reproducible");
            let total: f64 = a.data().iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "{strategy} scores sum to {total}");
            assert!(a.data().iter().all(|&x| x >= 0.0));
        }
        let g = baseline_scores(Strategy::Gaussian, 16, 7).unwrap();
        let r = baseline_scores(Strategy::Random, 16, 7).unwrap();
        assert_ne!(g.data(), r.data());
        let g2 = baseline_scores(Strategy::Gaussian, 16, 8).unwrap();
        assert_ne!(g.data(), g2.data());
        assert!(baseline_scores(Strategy::Maxpool, 16, 7).is_none());
        assert!(baseline_scores(Strategy::ThreeDOnly, 16, 7).is_none());
    }

    #[test]
    fn pipeline_output_shapes_follow_the_strategy() {
        let cfg = tiny_config();
        let params = ModelParams::init(cfg.clone(), 12).unwrap();
        let vol = noise_volume(&cfg, 1);
        let instr = [1, 2, 3];
        for strategy in Strategy::all() {
            let mut tape = Tape::new();
            let bind = params.bind(&mut tape, &[]);
            let input = PipelineInput {
                volume: &vol,
                instruction: &instr,
                sample_seed: 5,
                stem3d: None,
                stems2d: None,
            };
            let out = run_pipeline(&mut tape, &bind, &cfg, strategy, &input).unwrap();
            let rows = match strategy {
                Strategy::ThreeDOnly => cfg.l_v(),
                Strategy::TwoDOnly => cfg.enc.l2d,
                _ => cfg.l_v() + cfg.enc.l2d,
            };
            assert_eq!(tape.value(out.fused).shape(), &[rows, cfg.enc.d], "{strategy}");
            assert_eq!(out.scores.is_some(), strategy.has_scores(), "{strategy}");
            if let Some(s) = out.scores {
                let sv = tape.value(s);
                assert_eq!(sv.shape(), &[cfg.n]);
                let total: f64 = sv.data().iter().sum();
                assert!((total - 1.0).abs() < 1e-9, "{strategy} scores sum to {total}");
            }
        }
    }

    #[test]
    fn cached_stems_reproduce_the_uncached_pipeline() {
        let cfg = tiny_config();
        let params = ModelParams::init(cfg.clone(), 3).unwrap();
        let vol = noise_volume(&cfg, 2);
        let instr = [4, 1];

        let mut warm = Tape::new();
        let bind = params.bind(&mut warm, &[]);
        let stem3d = encode_3d_stem(&mut warm, &bind, &cfg, &vol).unwrap();
        let stem3d = warm.value(stem3d).clone();
        let stems2d: Vec<Tensor> = (0..cfg.n)
            .map(|j| {
                let id = encode_2d_stem(&mut warm, &bind, &cfg, &vol, j).unwrap();
                warm.value(id).clone()
            })
            .collect();

        let run = |stem3d: Option<&Tensor>, stems2d: Option<&[Tensor]>| {
            let mut tape = Tape::new();
            let bind = params.bind(&mut tape, &[]);
            let input = PipelineInput {
                volume: &vol,
                instruction: &instr,
                sample_seed: 9,
                stem3d,
                stems2d,
            };
            let out = run_pipeline(&mut tape, &bind, &cfg, Strategy::Tgis, &input).unwrap();
            (
                tape.value(out.fused).clone(),
                tape.value(out.scores.unwrap()).clone(),
            )
        };
        let (fused_cold, scores_cold) = run(None, None);
        let (fused_warm, scores_warm) = run(Some(&stem3d), Some(&stems2d));
        assert_eq!(fused_cold.data(), fused_warm.data());
        assert_eq!(scores_cold.data(), scores_warm.data());
    }

    #[test]
    fn block_permutation_permutes_scores_bitwise() {
        let cfg = tiny_config();
        assert!(!cfg.enc.mixing);
        let params = ModelParams::init(cfg.clone(), 44).unwrap();
        let vol = noise_volume(&cfg, 6);
        let f = cfg.repeat_factor();
        let blocks = cfg.n / f;
        let perm = [2usize, 0, 3, 1];
        assert_eq!(perm.len(), blocks);

        let mut shuffled = Volume::zeros(cfg.n, cfg.h, cfg.w).unwrap();
        for b in 0..blocks {
            for o in 0..f {
                let dst = b * f + o;
                let src = perm[b] * f + o;
                for y in 0..cfg.h {
                    for x in 0..cfg.w {
                        *shuffled.voxel_mut(dst, y, x) = vol.voxel(src, y, x);
                    }
                }
            }
        }

        let score = |v: &Volume| {
            let mut tape = Tape::new();
            let bind = params.bind(&mut tape, &[]);
            let input = PipelineInput {
                volume: v,
                instruction: &[2, 5, 1],
                sample_seed: 0,
                stem3d: None,
                stems2d: None,
            };
            let out = run_pipeline(&mut tape, &bind, &cfg, Strategy::Tgis, &input).unwrap();
            tape.value(out.scores.unwrap()).data().to_vec()
        };
        let base = score(&vol);
        let moved = score(&shuffled);
        for b in 0..blocks {
            for o in 0..f {
                let got = moved[b * f + o];
                let want = base[perm[b] * f + o];
                assert!(
                    got == want,
                    "slice {} score {got} != source slice {} score {want}",
                    b * f + o,
                    perm[b] * f + o
                );
            }
        }
    }

    #[test]
    fn instructions_steer_the_text_guided_scores() {
        let cfg = tiny_config();
        let mut distinct_pairs = 0;
        for seed in 0..12u64 {
            let params = ModelParams::init(cfg.clone(), 100 + seed).unwrap();
            let vol = noise_volume(&cfg, 200 + seed);
            let score = |instr: &[usize]| {
                let mut tape = Tape::new();
                let bind = params.bind(&mut tape, &[]);
                let input = PipelineInput {
                    volume: &vol,
                    instruction: instr,
                    sample_seed: seed,
                    stem3d: None,
                    stems2d: None,
                };
                let out = run_pipeline(&mut tape, &bind, &cfg, Strategy::Tgis, &input).unwrap();
                tape.value(out.scores.unwrap()).data().to_vec()
            };
            let a = score(&[1, 2, 3]);
            let b = score(&[7, 8]);
            let gap = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            if gap > 0.0 {
                distinct_pairs += 1;
            }
        }
        assert!(
            distinct_pairs >= 10,
            "only {distinct_pairs} of 12 instruction pairs moved the scores"
        );
    }

    #[test]
    fn scorer_gradients_reach_text_and_scorer_parameters() {
        let cfg = tiny_config();
        let params = ModelParams::init(cfg.clone(), 9).unwrap();
        let vol = noise_volume(&cfg, 3);
        let mut tape = Tape::new();
        let bind = params.bind(
            &mut tape,
            &[ParamGroup::TextEnc, ParamGroup::ScorerMlp, ParamGroup::Conn2d],
        );
        let input = PipelineInput {
            volume: &vol,
            instruction: &[2, 3],
            sample_seed: 1,
            stem3d: None,
            stems2d: None,
        };
        let out = run_pipeline(&mut tape, &bind, &cfg, Strategy::Tgis, &input).unwrap();
        let root = tape.sum(out.fused);
        tape.backward(root).unwrap();

        for (group, name) in [
            (ParamGroup::TextEnc, "embed"),
            (ParamGroup::ScorerMlp, "fc1.w"),
            (ParamGroup::ScorerMlp, "fc2.w"),
            (ParamGroup::Conn2d, "fc1.w"),
        ] {
            let g = tape
                .grad(bind.get(group, name))
                .unwrap_or_else(|| panic!("{}/{name} has no gradient", group.as_str()));
            assert!(
                g.iter().any(|&x| x != 0.0),
                "{}/{name} gradient is all zero",
                group.as_str()
            );
        }
        assert!(tape.grad(bind.get(ParamGroup::Enc3d, "patch.w")).is_none());
    }
}
