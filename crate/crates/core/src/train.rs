//! Optimizer, staged training, gradient checking, evaluation, and the
//! strategy-comparison driver.
//!
//! Training runs in two stages. The first stage updates only the two
//! connector MLPs on free-form report samples; the second unfreezes the 2D
//! encoder, the text encoder, the slice scorer, and the decoder and trains
//! on the full task mix. The 3D encoder never trains, which lets its
//! pre-connector activations be cached per volume for every step.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::{generate_greedy, nll, DecoderError};
use crate::encoders::{
    encode_2d_stem, encode_3d_stem, Binding, EncoderError, ModelConfig, ModelParams, ParamGroup,
};
use crate::fusion::{run_pipeline, FusionError, PipelineInput, Strategy};
use crate::ioutil::atomic_write;
use crate::metrics::{accuracy, bleu, rouge_l, MetricsError};
use crate::rng::Rng;
use crate::synth::{Dataset, FormatKind, SynthError, TaskKind};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Tensor, TensorError};
use crate::volume::{Volume, VolumeError};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Central-difference step for gradient checking.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Pass threshold on the worst relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Minimum number of parameter entries probed per check.
pub const GRADCHECK_TARGET: usize = 200;

/// Rng stream for the gradient-check probe sample.
const GRADCHECK_STREAM: u64 = 0x6763_6b21;

/// Errors raised by training, evaluation, and checking.
#[derive(Debug)]
pub enum TrainError {
    /// A training configuration that violates its invariants.
    BadConfig(String),
    /// No eligible samples for the requested stage.
    EmptyDataset,
    /// The loss left the reals; training aborted.
    NanLoss { step: usize },
    /// The dataset vocabulary does not fit the model's token capacity.
    VocabMismatch { data_words: usize, capacity: usize },
    /// Dataset failure.
    Synth(SynthError),
    /// Pipeline failure.
    Fusion(FusionError),
    /// Decoder failure.
    Decoder(DecoderError),
    /// Encoder or parameter-layout failure.
    Encoder(EncoderError),
    /// Tensor-shape failure.
    Tensor(TensorError),
    /// Volume-shape failure.
    Volume(VolumeError),
    /// Metric aggregation failure.
    Metrics(MetricsError),
    /// Filesystem failure.
    Io { path: PathBuf, source: io::Error },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::BadConfig(detail) => write!(f, "bad train config: {detail}"),
            TrainError::EmptyDataset => write!(f, "no eligible samples for this stage"),
            TrainError::NanLoss { step } => {
                write!(f, "loss became non-finite at step {step}; aborting")
            }
            TrainError::VocabMismatch { data_words, capacity } => write!(
                f,
                "dataset vocabulary has {data_words} words but the model only embeds {capacity}"
            ),
            TrainError::Synth(err) => write!(f, "dataset error: {err}"),
            TrainError::Fusion(err) => write!(f, "pipeline error: {err}"),
            TrainError::Decoder(err) => write!(f, "decoder error: {err}"),
            TrainError::Encoder(err) => write!(f, "encoder error: {err}"),
            TrainError::Tensor(err) => write!(f, "tensor error: {err}"),
            TrainError::Volume(err) => write!(f, "volume error: {err}"),
            TrainError::Metrics(err) => write!(f, "metrics error: {err}"),
            TrainError::Io { path, source } => {
                write!(f, "io error at {}: {source}", path.display())
            }
        }
    }
}

impl std::error::Error for TrainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            TrainError::Synth(err) => Some(err),
            TrainError::Fusion(err) => Some(err),
            TrainError::Decoder(err) => Some(err),
            TrainError::Encoder(err) => Some(err),
            TrainError::Tensor(err) => Some(err),
            TrainError::Volume(err) => Some(err),
            TrainError::Metrics(err) => Some(err),
            TrainError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<SynthError> for TrainError {
    fn from(err: SynthError) -> Self {
        TrainError::Synth(err)
    }
}

impl From<FusionError> for TrainError {
    fn from(err: FusionError) -> Self {
        TrainError::Fusion(err)
    }
}

impl From<DecoderError> for TrainError {
    fn from(err: DecoderError) -> Self {
        TrainError::Decoder(err)
    }
}

impl From<EncoderError> for TrainError {
    fn from(err: EncoderError) -> Self {
        TrainError::Encoder(err)
    }
}

impl From<TensorError> for TrainError {
    fn from(err: TensorError) -> Self {
        TrainError::Tensor(err)
    }
}

impl From<VolumeError> for TrainError {
    fn from(err: VolumeError) -> Self {
        TrainError::Volume(err)
    }
}

impl From<MetricsError> for TrainError {
    fn from(err: MetricsError) -> Self {
        TrainError::Metrics(err)
    }
}

/// The two training stages and their freeze schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Connector alignment on free-form report samples.
    Pretrain,
    /// Instruction tuning on the full task mix.
    Finetune,
}

impl Stage {
    /// Stable lowercase name used on the command line.
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    /// Inverse of [`Stage::as_str`].
    pub fn parse(name: &str) -> Option<Stage> {
        match name {
            "pretrain" => Some(Stage::Pretrain),
            "finetune" => Some(Stage::Finetune),
            _ => None,
        }
    }

    /// Parameter groups updated in this stage. The 3D encoder is never
    /// listed: it stays frozen for the model's whole life.
    pub fn trainable_groups(self) -> &'static [ParamGroup] {
        match self {
            Stage::Pretrain => &[ParamGroup::Conn3d, ParamGroup::Conn2d],
            Stage::Finetune => &[
                ParamGroup::Enc2d,
                ParamGroup::Conn3d,
                ParamGroup::Conn2d,
                ParamGroup::TextEnc,
                ParamGroup::ScorerMlp,
                ParamGroup::Decoder,
            ],
        }
    }

    /// Default epoch count for this stage when a config leaves it unset.
    pub fn default_epochs(self) -> usize {
        match self {
            Stage::Pretrain => 1,
            Stage::Finetune => 2,
        }
    }
}

/// Settings for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Which stage's freeze schedule to apply.
    pub stage: Stage,
    /// Fusion strategy used in the forward pass.
    pub strategy: Strategy,
    /// Adam learning rate. Must be non-negative; zero is allowed for
    /// degenerate no-op runs.
    pub lr: f64,
    /// Samples per optimizer step.
    pub batch_size: usize,
    /// Full passes over the eligible samples.
    pub epochs: usize,
    /// Seed for per-sample stochastic baseline weights.
    pub seed: u64,
}

impl TrainConfig {
    /// Check the numeric invariants.
    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(TrainError::BadConfig(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// One optimizer step of the loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based optimizer step index.
    pub step: usize,
    /// Mean per-token loss over the step's batch.
    pub loss: f64,
}

/// Adam optimizer state, one moment pair per parameter tensor.
pub struct Adam {
    lr: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Fresh state shaped after `params`.
    pub fn new(params: &ModelParams, lr: f64) -> Adam {
        let sizes: Vec<usize> = params.entries().iter().map(|e| e.tensor.numel()).collect();
        Adam {
            lr,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Apply one update. `grads` is indexed by entry position; `None` means
    /// the entry saw no gradient and is left untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Vec<f64>>]) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = params.tensor_mut(i).data_mut();
            for j in 0..g.len() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                data[j] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Forward pass and loss for one sample on an existing tape.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss(
    tape: &mut Tape,
    bind: &Binding<'_>,
    cfg: &ModelConfig,
    strategy: Strategy,
    volume: &Volume,
    instruction: &[usize],
    answer: &[usize],
    sample_seed: u64,
    stem3d: Option<&Tensor>,
    stems2d: Option<&[Tensor]>,
) -> Result<NodeId, TrainError> {
    let input = PipelineInput {
        volume,
        instruction,
        sample_seed,
        stem3d,
        stems2d,
    };
    let out = run_pipeline(tape, bind, cfg, strategy, &input)?;
    Ok(nll(tape, bind, cfg, out.fused, instruction, answer)?)
}

fn check_vocab_fits(data: &Dataset, params: &ModelParams) -> Result<(), TrainError> {
    let data_words = data.vocab().len();
    let capacity = params.cfg().dec.vocab;
    if data_words > capacity {
        return Err(TrainError::VocabMismatch { data_words, capacity });
    }
    Ok(())
}

/// Pre-connector activation caches, keyed by volume path. The 3D stem is
/// always valid because the 3D encoder never trains; the per-slice 2D stems
/// are only kept while the 2D encoder is frozen.
struct StemCaches {
    stem3d: HashMap<PathBuf, Tensor>,
    stems2d: Option<HashMap<PathBuf, Vec<Tensor>>>,
}

impl StemCaches {
    fn new(cache_2d: bool) -> StemCaches {
        StemCaches {
            stem3d: HashMap::new(),
            stems2d: cache_2d.then(HashMap::new),
        }
    }

    fn stem3d(
        &mut self,
        params: &ModelParams,
        cfg: &ModelConfig,
        path: &Path,
        vol: &Volume,
    ) -> Result<Tensor, TrainError> {
        if let Some(t) = self.stem3d.get(path) {
            return Ok(t.clone());
        }
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape, &[]);
        let id = encode_3d_stem(&mut tape, &bind, cfg, vol)?;
        let t = tape.value(id).clone();
        self.stem3d.insert(path.to_owned(), t.clone());
        Ok(t)
    }

    fn stems2d(
        &mut self,
        params: &ModelParams,
        cfg: &ModelConfig,
        path: &Path,
        vol: &Volume,
    ) -> Result<Option<Vec<Tensor>>, TrainError> {
        let Some(map) = self.stems2d.as_mut() else {
            return Ok(None);
        };
        if let Some(ts) = map.get(path) {
            return Ok(Some(ts.clone()));
        }
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape, &[]);
        let mut ts = Vec::with_capacity(cfg.n);
        for j in 0..cfg.n {
            let id = encode_2d_stem(&mut tape, &bind, cfg, vol, j)?;
            ts.push(tape.value(id).clone());
        }
        map.insert(path.to_owned(), ts.clone());
        Ok(Some(ts))
    }
}

fn eligible_indices(data: &Dataset, stage: Stage) -> Vec<usize> {
    (0..data.len())
        .filter(|&i| match stage {
            Stage::Pretrain => data.records()[i].task_kind == TaskKind::Report,
            Stage::Finetune => true,
        })
        .collect()
}

/// Run one training stage over `data`, updating `params` in place. Returns
/// the per-step loss trace.
pub fn train_stage(
    data: &Dataset,
    params: &mut ModelParams,
    tcfg: &TrainConfig,
) -> Result<Vec<StepRecord>, TrainError> {
    tcfg.validate()?;
    check_vocab_fits(data, params)?;
    let eligible = eligible_indices(data, tcfg.stage);
    if eligible.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let cfg = params.cfg().clone();
    let trainable = tcfg.stage.trainable_groups();
    let strategy_uses_2d_stems = !matches!(tcfg.strategy, Strategy::ThreeDOnly);
    let cache_2d = strategy_uses_2d_stems && !trainable.contains(&ParamGroup::Enc2d);
    let mut caches = StemCaches::new(cache_2d);
    let mut optimizer = Adam::new(params, tcfg.lr);
    let mut trace = Vec::new();
    let mut step = 0usize;

    for _epoch in 0..tcfg.epochs {
        for batch in eligible.chunks(tcfg.batch_size) {
            step += 1;
            let mut acc: Vec<Option<Vec<f64>>> = vec![None; params.entries().len()];
            let mut batch_loss = 0.0;
            for &idx in batch {
                let record = data.record(idx)?;
                let path = data.root().join(&record.volume_path);
                let vol = data.load_windowed(idx)?;
                let instruction = data.instruction_ids(idx)?;
                let answer = data.answer_ids(idx)?;
                let stem3 = caches.stem3d(params, &cfg, &path, &vol)?;
                let stems2 = caches.stems2d(params, &cfg, &path, &vol)?;

                let mut tape = Tape::new();
                let bind = params.bind(&mut tape, trainable);
                let loss = sample_loss(
                    &mut tape,
                    &bind,
                    &cfg,
                    tcfg.strategy,
                    &vol,
                    &instruction,
                    &answer,
                    tcfg.seed.wrapping_add(idx as u64),
                    Some(&stem3),
                    stems2.as_deref(),
                )?;
                let loss_value = tape.value(loss).data()[0];
                if !loss_value.is_finite() {
                    return Err(TrainError::NanLoss { step });
                }
                batch_loss += loss_value;
                tape.backward(loss)?;
                for (i, &id) in bind.ids().iter().enumerate() {
                    if let Some(g) = tape.grad(id) {
                        match &mut acc[i] {
                            Some(sum) => {
                                for (s, &x) in sum.iter_mut().zip(g) {
                                    *s += x;
                                }
                            }
                            None => acc[i] = Some(g.to_vec()),
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for grad in acc.iter_mut().flatten() {
                for x in grad.iter_mut() {
                    *x *= scale;
                }
            }
            optimizer.step(params, &acc);
            trace.push(StepRecord { step, loss: batch_loss * scale });
        }
    }
    Ok(trace)
}

/// Write a loss trace as a two-column CSV.
pub fn write_loss_csv(path: &Path, trace: &[StepRecord]) -> Result<(), TrainError> {
    let mut text = String::from("step,loss\n");
    for rec in trace {
        text.push_str(&format!("{},{}\n", rec.step, rec.loss));
    }
    atomic_write(path, text.as_bytes()).map_err(|source| TrainError::Io {
        path: path.to_owned(),
        source,
    })
}

// ---- gradient checking ----

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Number of parameter entries probed.
    pub checked: usize,
    /// Worst relative error seen.
    pub max_rel_err: f64,
    /// `group/name[index]` of the worst entry, when any were probed.
    pub worst: Option<String>,
}

impl GradcheckReport {
    /// Whether the check passed at the standard tolerance.
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRADCHECK_TOL
    }
}

/// A deterministic probe sample for gradient checking.
struct ProbeSample {
    volume: Volume,
    instruction: Vec<usize>,
    answer: Vec<usize>,
    stem3d: Tensor,
}

fn probe_sample(
    params: &ModelParams,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<ProbeSample, TrainError> {
    let mut rng = Rng::derived(seed, GRADCHECK_STREAM);
    let mut volume = Volume::zeros(cfg.n, cfg.h, cfg.w)?;
    for z in 0..cfg.n {
        for y in 0..cfg.h {
            for x in 0..cfg.w {
                *volume.voxel_mut(z, y, x) = rng.uniform(0.0, 1.0);
            }
        }
    }
    let vocab = cfg.dec.vocab;
    let instruction: Vec<usize> = (0..4).map(|_| 1 + rng.below(vocab - 1)).collect();
    let answer: Vec<usize> = (0..3).map(|_| 1 + rng.below(vocab - 1)).collect();

    let mut tape = Tape::new();
    let bind = params.bind(&mut tape, &[]);
    let id = encode_3d_stem(&mut tape, &bind, cfg, &volume)?;
    let stem3d = tape.value(id).clone();
    Ok(ProbeSample { volume, instruction, answer, stem3d })
}

fn probe_loss(params: &ModelParams, cfg: &ModelConfig, sample: &ProbeSample) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let bind = params.bind(&mut tape, &[]);
    let loss = sample_loss(
        &mut tape,
        &bind,
        cfg,
        Strategy::Tgis,
        &sample.volume,
        &sample.instruction,
        &sample.answer,
        0,
        Some(&sample.stem3d),
        None,
    )?;
    Ok(tape.value(loss).data()[0])
}

/// Analytic gradients of the probe loss for every entry in `groups`,
/// indexed by entry position (`None` for untouched entries).
fn analytic_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    sample: &ProbeSample,
    groups: &[ParamGroup],
) -> Result<Vec<Option<Vec<f64>>>, TrainError> {
    let mut tape = Tape::new();
    let bind = params.bind(&mut tape, groups);
    let loss = sample_loss(
        &mut tape,
        &bind,
        cfg,
        Strategy::Tgis,
        &sample.volume,
        &sample.instruction,
        &sample.answer,
        0,
        Some(&sample.stem3d),
        None,
    )?;
    tape.backward(loss)?;
    Ok(bind
        .ids()
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()))
        .collect())
}

/// Draw at least `target` distinct (entry, index) probes covering every
/// trainable entry at least once.
fn choose_probes(
    params: &ModelParams,
    groups: &[ParamGroup],
    target: usize,
    rng: &mut Rng,
) -> Vec<(usize, usize)> {
    let entries: Vec<usize> = params
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| groups.contains(&e.group))
        .map(|(i, _)| i)
        .collect();
    let mut chosen: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); params.entries().len()];
    let mut total = 0usize;
    let capacity: usize = entries.iter().map(|&i| params.tensor(i).numel()).sum();
    while total < target.min(capacity) {
        for &i in &entries {
            let numel = params.tensor(i).numel();
            if chosen[i].len() >= numel {
                continue;
            }
            if chosen[i].insert(rng.below(numel)) {
                total += 1;
            }
        }
    }
    let mut probes = Vec::with_capacity(total);
    for &i in &entries {
        for &j in &chosen[i] {
            probes.push((i, j));
        }
    }
    probes
}

/// Compare `analytic` against central differences at the given probes.
/// Public so a deliberately corrupted gradient table can be shown to fail.
pub fn fd_compare(
    params: &mut ModelParams,
    sample_seed: u64,
    probes: &[(usize, usize)],
    analytic: &[Option<Vec<f64>>],
) -> Result<GradcheckReport, TrainError> {
    let cfg = params.cfg().clone();
    let sample = probe_sample(params, &cfg, sample_seed)?;
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    for &(entry, index) in probes {
        let original = params.tensor(entry).data()[index];
        params.tensor_mut(entry).data_mut()[index] = original + GRADCHECK_STEP;
        let plus = probe_loss(params, &cfg, &sample)?;
        params.tensor_mut(entry).data_mut()[index] = original - GRADCHECK_STEP;
        let minus = probe_loss(params, &cfg, &sample)?;
        params.tensor_mut(entry).data_mut()[index] = original;

        let fd = (plus - minus) / (2.0 * GRADCHECK_STEP);
        let a = analytic[entry].as_ref().map_or(0.0, |g| g[index]);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
        if rel > max_rel_err {
            max_rel_err = rel;
            let e = &params.entries()[entry];
            worst = Some(format!("{}/{}[{index}]", e.group.as_str(), e.name));
        }
    }
    Ok(GradcheckReport { checked: probes.len(), max_rel_err, worst })
}

/// Full gradient check over the given trainable groups.
pub fn gradcheck_groups(
    cfg: &ModelConfig,
    seed: u64,
    groups: &[ParamGroup],
) -> Result<GradcheckReport, TrainError> {
    cfg.validate()?;
    let mut params = ModelParams::init(cfg.clone(), seed)?;
    let sample = probe_sample(&params, cfg, seed)?;
    let analytic = analytic_gradients(&params, cfg, &sample, groups)?;
    let mut rng = Rng::derived(seed, GRADCHECK_STREAM ^ 0x5051);
    let probes = choose_probes(&params, groups, GRADCHECK_TARGET, &mut rng);
    fd_compare(&mut params, seed, &probes, &analytic)
}

/// Gradient check across every group that ever trains.
pub fn gradcheck(cfg: &ModelConfig, seed: u64) -> Result<GradcheckReport, TrainError> {
    gradcheck_groups(cfg, seed, Stage::Finetune.trainable_groups())
}

// ---- evaluation ----

/// One aggregated evaluation figure. Values are percentages in [0, 100].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task_kind: TaskKind,
    pub format_kind: FormatKind,
    pub metric: String,
    pub value: f64,
    pub n_samples: usize,
}

/// Greedy-decode every sample and aggregate metrics per task and format:
/// exact-match accuracy for choice answers, sentence-mean BLEU and ROUGE-L
/// for free-form answers.
pub fn run_eval(
    data: &Dataset,
    params: &ModelParams,
    strategy: Strategy,
) -> Result<Vec<EvalRecord>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_vocab_fits(data, params)?;
    let cfg = params.cfg().clone();
    let mut caches = StemCaches::new(false);

    let mut outputs: HashMap<(TaskKind, FormatKind), Vec<(Vec<usize>, Vec<usize>)>> =
        HashMap::new();
    for idx in 0..data.len() {
        let record = data.record(idx)?;
        let path = data.root().join(&record.volume_path);
        let vol = data.load_windowed(idx)?;
        let instruction = data.instruction_ids(idx)?;
        let answer = data.answer_ids(idx)?;
        let stem3 = caches.stem3d(params, &cfg, &path, &vol)?;

        let mut tape = Tape::new();
        let bind = params.bind(&mut tape, &[]);
        let input = PipelineInput {
            volume: &vol,
            instruction: &instruction,
            sample_seed: idx as u64,
            stem3d: Some(&stem3),
            stems2d: None,
        };
        let out = run_pipeline(&mut tape, &bind, &cfg, strategy, &input)?;
        let fused = tape.value(out.fused).clone();
        drop(tape);
        let predicted = generate_greedy(params, &cfg, &fused, &instruction)?;
        outputs
            .entry((record.task_kind, record.format_kind))
            .or_default()
            .push((predicted, answer));
    }

    let mut records = Vec::new();
    for kind in TaskKind::all() {
        for format in [FormatKind::Choice, FormatKind::FreeForm] {
            let Some(pairs) = outputs.get(&(kind, format)) else {
                continue;
            };
            let n = pairs.len();
            match format {
                FormatKind::Choice => {
                    let preds: Vec<Vec<usize>> = pairs.iter().map(|(p, _)| p.clone()).collect();
                    let refs: Vec<Vec<usize>> = pairs.iter().map(|(_, r)| r.clone()).collect();
                    let acc = accuracy(&preds, &refs)?;
                    records.push(EvalRecord {
                        task_kind: kind,
                        format_kind: format,
                        metric: "accuracy".into(),
                        value: acc * 100.0,
                        n_samples: n,
                    });
                }
                FormatKind::FreeForm => {
                    let mean_bleu = pairs
                        .iter()
                        .map(|(p, r)| bleu(p, r, 4))
                        .sum::<f64>()
                        / n as f64;
                    let mean_rouge = pairs
                        .iter()
                        .map(|(p, r)| rouge_l(p, r))
                        .sum::<f64>()
                        / n as f64;
                    records.push(EvalRecord {
                        task_kind: kind,
                        format_kind: format,
                        metric: "bleu".into(),
                        value: mean_bleu * 100.0,
                        n_samples: n,
                    });
                    records.push(EvalRecord {
                        task_kind: kind,
                        format_kind: format,
                        metric: "rouge_l".into(),
                        value: mean_rouge * 100.0,
                        n_samples: n,
                    });
                }
            }
        }
    }
    Ok(records)
}

/// Write evaluation records as JSON lines.
pub fn write_eval_report(path: &Path, records: &[EvalRecord]) -> Result<(), TrainError> {
    let mut text = String::new();
    for rec in records {
        text.push_str(&serde_json::to_string(rec).expect("eval record serializes"));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes()).map_err(|source| TrainError::Io {
        path: path.to_owned(),
        source,
    })
}

// ---- strategy comparison ----

/// Shared schedule for every run of a strategy comparison.
#[derive(Debug, Clone)]
pub struct AblationSchedule {
    pub lr: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
}

impl AblationSchedule {
    /// The default desk-scale schedule.
    pub fn desk() -> AblationSchedule {
        AblationSchedule {
            lr: 1e-3,
            batch_size: 32,
            pretrain_epochs: 1,
            finetune_epochs: 2,
        }
    }
}

/// Per-kind headline metric of one trained run, plus pooled summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub strategy: String,
    pub seed: u64,
    /// Headline value per task kind (accuracy for choice kinds, BLEU for
    /// the report kind), percentages, in task-kind declaration order.
    pub per_kind: [f64; 4],
    /// Exact-match accuracy pooled over every choice sample, percent.
    pub choice_accuracy: f64,
    /// Mean of the four per-kind headline values, percent.
    pub combined: f64,
}

/// One row of the strategy-comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    pub task_kind: String,
    pub metric: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub seeds: usize,
}

/// Everything a strategy comparison produces.
#[derive(Debug, Clone)]
pub struct AblationOutcome {
    /// Aggregated rows, one per (strategy, task kind).
    pub rows: Vec<AblationRow>,
    /// The underlying per-seed runs.
    pub runs: Vec<AblationRun>,
}

fn kind_headline(records: &[EvalRecord], kind: TaskKind) -> (String, f64) {
    match kind {
        TaskKind::Report => {
            let value = records
                .iter()
                .find(|r| r.task_kind == kind && r.metric == "bleu")
                .map_or(0.0, |r| r.value);
            ("bleu".into(), value)
        }
        _ => {
            let value = records
                .iter()
                .find(|r| {
                    r.task_kind == kind
                        && r.format_kind == FormatKind::Choice
                        && r.metric == "accuracy"
                })
                .map_or(0.0, |r| r.value);
            ("accuracy".into(), value)
        }
    }
}

fn pooled_choice_accuracy(records: &[EvalRecord]) -> f64 {
    let mut weighted = 0.0;
    let mut count = 0usize;
    for r in records {
        if r.format_kind == FormatKind::Choice && r.metric == "accuracy" {
            weighted += r.value * r.n_samples as f64;
            count += r.n_samples;
        }
    }
    if count == 0 {
        0.0
    } else {
        weighted / count as f64
    }
}

/// Train and evaluate every (strategy, seed) pair from a fresh model and
/// aggregate the headline metrics across seeds.
pub fn run_ablation(
    train_data: &Dataset,
    eval_data: &Dataset,
    cfg: &ModelConfig,
    strategies: &[Strategy],
    seeds: &[u64],
    schedule: &AblationSchedule,
) -> Result<AblationOutcome, TrainError> {
    let mut runs = Vec::new();
    for &strategy in strategies {
        for &seed in seeds {
            let mut params = ModelParams::init(cfg.clone(), seed)?;
            for (stage, epochs) in [
                (Stage::Pretrain, schedule.pretrain_epochs),
                (Stage::Finetune, schedule.finetune_epochs),
            ] {
                let tcfg = TrainConfig {
                    stage,
                    strategy,
                    lr: schedule.lr,
                    batch_size: schedule.batch_size,
                    epochs,
                    seed,
                };
                train_stage(train_data, &mut params, &tcfg)?;
            }
            let records = run_eval(eval_data, &params, strategy)?;
            let per_kind: Vec<f64> = TaskKind::all()
                .iter()
                .map(|&k| kind_headline(&records, k).1)
                .collect();
            let per_kind: [f64; 4] = per_kind.try_into().expect("four task kinds");
            let combined = per_kind.iter().sum::<f64>() / 4.0;
            runs.push(AblationRun {
                strategy: strategy.as_str().to_owned(),
                seed,
                per_kind,
                choice_accuracy: pooled_choice_accuracy(&records),
                combined,
            });
        }
    }

    let mut rows = Vec::new();
    for &strategy in strategies {
        for (k, kind) in TaskKind::all().into_iter().enumerate() {
            let values: Vec<f64> = runs
                .iter()
                .filter(|r| r.strategy == strategy.as_str())
                .map(|r| r.per_kind[k])
                .collect();
            let metric = if kind == TaskKind::Report { "bleu" } else { "accuracy" };
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            rows.push(AblationRow {
                strategy: strategy.as_str().to_owned(),
                task_kind: kind.as_str().to_owned(),
                metric: metric.to_owned(),
                mean,
                min: values.iter().cloned().fold(f64::INFINITY, f64::min),
                max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                seeds: values.len(),
            });
        }
    }
    Ok(AblationOutcome { rows, runs })
}

/// Write comparison rows as JSON lines.
pub fn write_ablation_rows(path: &Path, rows: &[AblationRow]) -> Result<(), TrainError> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).expect("ablation row serializes"));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes()).map_err(|source| TrainError::Io {
        path: path.to_owned(),
        source,
    })
}
