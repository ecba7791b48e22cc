//! Synthetic volume/question generator and the on-disk dataset layout.
//!
//! A dataset directory holds `vocab.txt`, `manifest.jsonl`, and one `.mvol`
//! file per sample. Scenes come in four kinds cycling by scene index:
//! locate, count, texture, report. Every scene yields a pair of samples
//! (indices `2s` and `2s + 1`) sharing identical voxel content but phrased
//! either as a letter-choice question plus a free-form question, or as two
//! free-form report prompts.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ioutil::atomic_write;
use crate::rng::Rng;
use crate::volume::{Volume, VolumeError};

/// Token id reserved for the end-of-sequence marker.
pub const END_TOKEN: usize = 0;

/// Number of consecutive slices forming one depth band.
pub const BAND_DEPTH: usize = 4;

/// Upper limit on bands, matching the available choice letters.
pub const MAX_BANDS: usize = 8;

/// Maximum number of blobs a count scene may contain.
pub const MAX_COUNT: usize = 4;

const CHOICE_LETTERS: [&str; MAX_BANDS] = ["A", "B", "C", "D", "E", "F", "G", "H"];
const COUNT_WORDS: [&str; MAX_COUNT] = ["one", "two", "three", "four"];

const BACKGROUND_HU: f64 = -700.0;
const NOISE_SIGMA_HU: f64 = 40.0;
const BLOB_AMP_HU: f64 = 700.0;
const BLOB_SIGMA_XY: f64 = 9.0;
const BLOB_SIGMA_Z: f64 = 1.1;
const PATTERN_AMP_HU: f64 = 60.0;
const PATTERN_CUTOFF: f64 = 0.30;
const COUNT_AMP_LO_HU: f64 = 250.0;
const COUNT_AMP_HI_HU: f64 = 700.0;

/// Errors raised while generating or loading a dataset.
#[derive(Debug)]
pub enum SynthError {
    /// Filesystem failure, tagged with the path involved.
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Generation settings that cannot produce a valid dataset.
    BadConfig(String),
    /// A word outside the builtin vocabulary.
    UnknownWord(String),
    /// A token id with no vocabulary entry.
    BadToken { id: usize, vocab_len: usize },
    /// A malformed manifest or vocabulary line.
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    /// Volume-level failure while reading or writing voxel data.
    Volume(VolumeError),
    /// A sample index past the end of the manifest.
    SampleOutOfRange { index: usize, len: usize },
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::Io { path, source } => {
                write!(f, "io error at {}: {source}", path.display())
            }
            SynthError::BadConfig(detail) => write!(f, "bad generation config: {detail}"),
            SynthError::UnknownWord(word) => write!(f, "word not in vocabulary: {word:?}"),
            SynthError::BadToken { id, vocab_len } => {
                write!(f, "token id {id} outside vocabulary of {vocab_len} entries")
            }
            SynthError::Parse { path, line, detail } => {
                write!(f, "parse error at {}:{line}: {detail}", path.display())
            }
            SynthError::Volume(err) => write!(f, "volume error: {err}"),
            SynthError::SampleOutOfRange { index, len } => {
                write!(f, "sample index {index} out of range for {len} samples")
            }
        }
    }
}

impl std::error::Error for SynthError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            SynthError::Io { source, .. } => Some(source),
            SynthError::Volume(err) => Some(err),
            _ => None,
        }
    }
}

impl From<VolumeError> for SynthError {
    fn from(err: VolumeError) -> Self {
        SynthError::Volume(err)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> SynthError {
    SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The question family a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Locate,
    Count,
    Texture,
    Report,
}

impl TaskKind {
    /// Stable lowercase name, as stored in manifests and result tables.
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Locate => "locate",
            TaskKind::Count => "count",
            TaskKind::Texture => "texture",
            TaskKind::Report => "report",
        }
    }

    /// All kinds in scene-cycle order.
    pub fn all() -> [TaskKind; 4] {
        [
            TaskKind::Locate,
            TaskKind::Count,
            TaskKind::Texture,
            TaskKind::Report,
        ]
    }
}

/// Whether the sample expects a single choice letter or free-form words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatKind {
    Choice,
    FreeForm,
}

impl FormatKind {
    /// Stable lowercase name, as stored in manifests and result tables.
    pub fn as_str(self) -> &'static str {
        match self {
            FormatKind::Choice => "choice",
            FormatKind::FreeForm => "free_form",
        }
    }
}

/// One manifest line: a question about one volume file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Volume file path, relative to the manifest's directory.
    pub volume_path: String,
    /// Question text, whitespace-tokenized over the builtin vocabulary.
    pub instruction: String,
    /// Expected answer text.
    pub answer: String,
    /// Question family.
    pub task_kind: TaskKind,
    /// Answer format.
    pub format_kind: FormatKind,
    /// Slice indices a well-placed attention profile should favor.
    pub ground_truth_slices: Vec<usize>,
}

/// Fixed word list shared by the generator, trainer, and scorer.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// The builtin vocabulary. Id 0 is always the end-of-sequence marker.
    pub fn builtin() -> Vocab {
        let mut words: Vec<&str> = vec!["<end>"];
        words.extend([
            "which", "band", "contains", "the", "bright", "blob", "how", "many", "blobs", "are",
            "present", "what", "pattern", "is", "on", "pick", "a", "letter", "answer", "in",
            "words", "respond", "by", "describe", "report", "volume", "findings",
        ]);
        words.extend(CHOICE_LETTERS);
        words.extend([
            "band0", "band1", "band2", "band3", "band4", "band5", "band6", "band7",
        ]);
        words.extend(COUNT_WORDS);
        words.extend(["checker", "stripes", "with"]);
        Vocab::from_words(words.into_iter().map(str::to_owned).collect())
            .expect("builtin vocabulary is duplicate-free")
    }

    fn from_words(words: Vec<String>) -> Result<Vocab, String> {
        let mut index = HashMap::new();
        for (id, word) in words.iter().enumerate() {
            if word.is_empty() || word.chars().any(char::is_whitespace) {
                return Err(format!("invalid vocabulary word {word:?}"));
            }
            if index.insert(word.clone(), id).is_some() {
                return Err(format!("duplicate vocabulary word {word:?}"));
            }
        }
        Ok(Vocab { words, index })
    }

    /// Number of entries.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    /// True when the vocabulary has no entries.
    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// All words in id order.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Id of one word, if present.
    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Whitespace-tokenize `text` into ids. Every word must be known.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, SynthError> {
        text.split_whitespace()
            .map(|word| {
                self.index
                    .get(word)
                    .copied()
                    .ok_or_else(|| SynthError::UnknownWord(word.to_owned()))
            })
            .collect()
    }

    /// Join ids back into text. Fails on ids outside the vocabulary.
    pub fn decode(&self, ids: &[usize]) -> Result<String, SynthError> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            let word = self.words.get(id).ok_or(SynthError::BadToken {
                id,
                vocab_len: self.words.len(),
            })?;
            parts.push(word.as_str());
        }
        Ok(parts.join(" "))
    }

    /// Write one word per line.
    pub fn write(&self, path: &Path) -> Result<(), SynthError> {
        let mut text = self.words.join("\n");
        text.push('\n');
        atomic_write(path, text.as_bytes()).map_err(|e| io_err(path, e))
    }

    /// Read a word-per-line vocabulary file.
    pub fn read(path: &Path) -> Result<Vocab, SynthError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let words: Vec<String> = text.lines().map(str::to_owned).collect();
        Vocab::from_words(words).map_err(|detail| SynthError::Parse {
            path: path.to_path_buf(),
            line: 0,
            detail,
        })
    }
}

/// Settings for dataset generation.
#[derive(Debug, Clone)]
pub struct GenConfig {
    /// Total number of samples (manifest lines and volume files). Must be even.
    pub n_samples: usize,
    /// Slice count per volume. Must be a positive multiple of [`BAND_DEPTH`].
    pub depth: usize,
    /// Slice height in voxels.
    pub height: usize,
    /// Slice width in voxels.
    pub width: usize,
    /// Master seed; scene `s` draws from the derived stream `s`.
    pub seed: u64,
}

impl GenConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if self.n_samples == 0 || self.n_samples % 2 != 0 {
            return Err(SynthError::BadConfig(format!(
                "n_samples must be a positive even number, got {}",
                self.n_samples
            )));
        }
        if self.depth == 0 || self.depth % BAND_DEPTH != 0 {
            return Err(SynthError::BadConfig(format!(
                "depth must be a positive multiple of {BAND_DEPTH}, got {}",
                self.depth
            )));
        }
        let bands = self.depth / BAND_DEPTH;
        if bands > MAX_BANDS {
            return Err(SynthError::BadConfig(format!(
                "depth {} implies {bands} bands; at most {MAX_BANDS} are supported",
                self.depth
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(SynthError::BadConfig(format!(
                "height and width must be at least 16, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    fn bands(&self) -> usize {
        self.depth / BAND_DEPTH
    }
}

/// Counts reported after generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenSummary {
    /// Manifest lines written.
    pub samples: usize,
    /// Volume files written.
    pub volumes: usize,
    /// Samples per task kind, in [`TaskKind::all`] order.
    pub per_kind: [usize; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlobPattern {
    Checker,
    Stripes,
}

impl BlobPattern {
    fn word(self) -> &'static str {
        match self {
            BlobPattern::Checker => "checker",
            BlobPattern::Stripes => "stripes",
        }
    }
}

struct Blob {
    band: usize,
    z_center: usize,
    y_center: f64,
    x_center: f64,
    amp: f64,
}

/// A fully drawn scene: voxel data plus the facts questions ask about.
struct Scene {
    volume: Volume,
    kind: TaskKind,
    /// Band of the single bright blob (locate/texture/report scenes).
    band: usize,
    /// Blob count (count scenes; 1 otherwise).
    count: usize,
    /// Bands occupied by blobs, ascending.
    bands_used: Vec<usize>,
    pattern: BlobPattern,
}

fn draw_blob(rng: &mut Rng, cfg: &GenConfig, band: usize, amp: f64) -> Blob {
    let offset = 1 + rng.below(BAND_DEPTH - 2);
    let y_center = rng.uniform(cfg.height as f64 * 0.25, cfg.height as f64 * 0.75);
    let x_center = rng.uniform(cfg.width as f64 * 0.25, cfg.width as f64 * 0.75);
    Blob {
        band,
        z_center: band * BAND_DEPTH + offset,
        y_center,
        x_center,
        amp,
    }
}

fn paint_blob(volume: &mut Volume, blob: &Blob) {
    let (depth, height, width) = volume.dims();
    for z in 0..depth {
        let dz = z as f64 - blob.z_center as f64;
        let z_env = (-dz * dz / (2.0 * BLOB_SIGMA_Z * BLOB_SIGMA_Z)).exp();
        if z_env < 1e-6 {
            continue;
        }
        for y in 0..height {
            let dy = y as f64 - blob.y_center;
            for x in 0..width {
                let dx = x as f64 - blob.x_center;
                let xy_env =
                    (-(dx * dx + dy * dy) / (2.0 * BLOB_SIGMA_XY * BLOB_SIGMA_XY)).exp();
                *volume.voxel_mut(z, y, x) += blob.amp * z_env * xy_env;
            }
        }
    }
}

fn paint_pattern(volume: &mut Volume, blob: &Blob, pattern: BlobPattern, phase: usize) {
    let (_, height, width) = volume.dims();
    let z = blob.z_center;
    for y in 0..height {
        let dy = y as f64 - blob.y_center;
        for x in 0..width {
            let dx = x as f64 - blob.x_center;
            let xy_env = (-(dx * dx + dy * dy) / (2.0 * BLOB_SIGMA_XY * BLOB_SIGMA_XY)).exp();
            if xy_env < PATTERN_CUTOFF {
                continue;
            }
            let parity = match pattern {
                BlobPattern::Checker => x + y + phase,
                BlobPattern::Stripes => y + phase,
            };
            let sign = if parity % 2 == 0 { 1.0 } else { -1.0 };
            *volume.voxel_mut(z, y, x) += sign * PATTERN_AMP_HU * xy_env;
        }
    }
}

fn distinct_bands(rng: &mut Rng, bands: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..bands).collect();
    for i in 0..k {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

fn build_scene(cfg: &GenConfig, scene_index: usize) -> Result<Scene, SynthError> {
    let mut rng = Rng::derived(cfg.seed, scene_index as u64);
    let kind = TaskKind::all()[scene_index % 4];

    // Draw every scene fact before touching voxels so fact streams do not
    // depend on the volume dimensions.
    let (blobs, pattern, count) = match kind {
        TaskKind::Count => {
            let k = 1 + rng.below(MAX_COUNT.min(cfg.bands()));
            let bands = distinct_bands(&mut rng, cfg.bands(), k);
            let blobs: Vec<Blob> = bands
                .iter()
                .map(|&band| {
                    let amp = rng.uniform(COUNT_AMP_LO_HU, COUNT_AMP_HI_HU);
                    draw_blob(&mut rng, cfg, band, amp)
                })
                .collect();
            (blobs, BlobPattern::Checker, k)
        }
        _ => {
            let band = rng.below(cfg.bands());
            let blob = draw_blob(&mut rng, cfg, band, BLOB_AMP_HU);
            let pattern = if rng.below(2) == 0 {
                BlobPattern::Checker
            } else {
                BlobPattern::Stripes
            };
            (vec![blob], pattern, 1)
        }
    };
    let phase = rng.below(2);

    let mut volume = Volume::zeros(cfg.depth, cfg.height, cfg.width)?;
    for z in 0..cfg.depth {
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                *volume.voxel_mut(z, y, x) = BACKGROUND_HU + NOISE_SIGMA_HU * rng.normal();
            }
        }
    }
    for blob in &blobs {
        paint_blob(&mut volume, blob);
    }
    if kind != TaskKind::Count {
        paint_pattern(&mut volume, &blobs[0], pattern, phase);
    }

    let mut bands_used: Vec<usize> = blobs.iter().map(|b| b.band).collect();
    bands_used.sort_unstable();
    Ok(Scene {
        volume,
        kind,
        band: blobs[0].band,
        count,
        bands_used,
        pattern,
    })
}

fn band_slices(band: usize) -> Vec<usize> {
    (band * BAND_DEPTH..(band + 1) * BAND_DEPTH).collect()
}

fn scene_ground_truth(scene: &Scene) -> Vec<usize> {
    match scene.kind {
        TaskKind::Count => scene
            .bands_used
            .iter()
            .flat_map(|&band| band_slices(band))
            .collect(),
        _ => band_slices(scene.band),
    }
}

/// The two question/answer phrasings a scene yields, in sample order.
fn scene_questions(scene: &Scene) -> [(String, String, FormatKind); 2] {
    match scene.kind {
        TaskKind::Locate => [
            (
                "which band contains the bright blob pick a letter".to_owned(),
                CHOICE_LETTERS[scene.band].to_owned(),
                FormatKind::Choice,
            ),
            (
                "which band contains the bright blob answer in words".to_owned(),
                format!("in band{}", scene.band),
                FormatKind::FreeForm,
            ),
        ],
        TaskKind::Count => [
            (
                "how many blobs are present respond by letter".to_owned(),
                CHOICE_LETTERS[scene.count - 1].to_owned(),
                FormatKind::Choice,
            ),
            (
                "how many blobs are present respond by words".to_owned(),
                format!("{} blobs", COUNT_WORDS[scene.count - 1]),
                FormatKind::FreeForm,
            ),
        ],
        TaskKind::Texture => [
            (
                "what pattern is on the bright blob pick a letter".to_owned(),
                match scene.pattern {
                    BlobPattern::Checker => "A".to_owned(),
                    BlobPattern::Stripes => "B".to_owned(),
                },
                FormatKind::Choice,
            ),
            (
                "what pattern is on the bright blob answer in words".to_owned(),
                format!("{} pattern", scene.pattern.word()),
                FormatKind::FreeForm,
            ),
        ],
        TaskKind::Report => {
            let answer = format!(
                "blob in band{} with {} pattern",
                scene.band,
                scene.pattern.word()
            );
            [
                (
                    "describe the volume findings".to_owned(),
                    answer.clone(),
                    FormatKind::FreeForm,
                ),
                (
                    "report the volume findings".to_owned(),
                    answer,
                    FormatKind::FreeForm,
                ),
            ]
        }
    }
}

fn volume_file_name(sample_index: usize) -> String {
    format!("vol_{sample_index:06}.mvol")
}

/// Generate a dataset directory: `vocab.txt`, `manifest.jsonl`, and one
/// volume file per sample. Returns counts of what was written.
pub fn generate_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<GenSummary, SynthError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    Vocab::builtin().write(&out_dir.join("vocab.txt"))?;

    let vocab = Vocab::builtin();
    let scenes = cfg.n_samples / 2;
    let mut manifest = String::new();
    let mut per_kind = [0usize; 4];
    for s in 0..scenes {
        let scene = build_scene(cfg, s)?;
        let ground_truth = scene_ground_truth(&scene);
        let questions = scene_questions(&scene);
        for (half, (instruction, answer, format_kind)) in questions.into_iter().enumerate() {
            let sample_index = 2 * s + half;
            let file_name = volume_file_name(sample_index);
            scene.volume.write_mvol(&out_dir.join(&file_name))?;
            // Catch text/vocabulary drift at generation time, not at training.
            vocab.encode(&instruction)?;
            vocab.encode(&answer)?;
            let record = SampleRecord {
                volume_path: file_name,
                instruction,
                answer,
                task_kind: scene.kind,
                format_kind,
                ground_truth_slices: ground_truth.clone(),
            };
            let line = serde_json::to_string(&record).map_err(|e| SynthError::Parse {
                path: out_dir.join("manifest.jsonl"),
                line: sample_index + 1,
                detail: e.to_string(),
            })?;
            manifest.push_str(&line);
            manifest.push('\n');
            per_kind[scene_kind_index(scene.kind)] += 1;
        }
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    atomic_write(&manifest_path, manifest.as_bytes()).map_err(|e| io_err(&manifest_path, e))?;
    Ok(GenSummary {
        samples: cfg.n_samples,
        volumes: cfg.n_samples,
        per_kind,
    })
}

fn scene_kind_index(kind: TaskKind) -> usize {
    TaskKind::all()
        .iter()
        .position(|&k| k == kind)
        .expect("kind is one of the four variants")
}

/// A loaded dataset: manifest records plus the vocabulary, with volumes
/// read from disk on demand.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    records: Vec<SampleRecord>,
    vocab: Vocab,
}

impl Dataset {
    /// Load `manifest_path` plus the `vocab.txt` sitting next to it.
    pub fn load(manifest_path: &Path) -> Result<Dataset, SynthError> {
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let vocab = Vocab::read(&root.join("vocab.txt"))?;
        let file = fs::File::open(manifest_path).map_err(|e| io_err(manifest_path, e))?;
        let reader = std::io::BufReader::new(file);
        let mut records = Vec::new();
        for (line_no, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| io_err(manifest_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SampleRecord =
                serde_json::from_str(&line).map_err(|e| SynthError::Parse {
                    path: manifest_path.to_path_buf(),
                    line: line_no + 1,
                    detail: e.to_string(),
                })?;
            vocab.encode(&record.instruction)?;
            vocab.encode(&record.answer)?;
            records.push(record);
        }
        if records.is_empty() {
            return Err(SynthError::Parse {
                path: manifest_path.to_path_buf(),
                line: 0,
                detail: "manifest holds no samples".to_owned(),
            });
        }
        Ok(Dataset {
            root,
            records,
            vocab,
        })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// True when the dataset holds no samples.
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// All manifest records in file order.
    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    /// One manifest record.
    pub fn record(&self, index: usize) -> Result<&SampleRecord, SynthError> {
        self.records.get(index).ok_or(SynthError::SampleOutOfRange {
            index,
            len: self.records.len(),
        })
    }

    /// The vocabulary stored with the dataset.
    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Directory holding the manifest and volume files.
    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Read one sample's raw volume from disk.
    pub fn load_volume(&self, index: usize) -> Result<Volume, SynthError> {
        let record = self.record(index)?;
        Ok(Volume::read_mvol(&self.root.join(&record.volume_path))?)
    }

    /// Read one sample's volume and apply the standard intensity window.
    pub fn load_windowed(&self, index: usize) -> Result<Volume, SynthError> {
        Ok(self.load_volume(index)?.hu_window()?)
    }

    /// Tokenized instruction for one sample.
    pub fn instruction_ids(&self, index: usize) -> Result<Vec<usize>, SynthError> {
        self.vocab.encode(&self.record(index)?.instruction)
    }

    /// Tokenized answer for one sample.
    pub fn answer_ids(&self, index: usize) -> Result<Vec<usize>, SynthError> {
        self.vocab.encode(&self.record(index)?.answer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(n_samples: usize, seed: u64) -> GenConfig {
        GenConfig {
            n_samples,
            depth: 16,
            height: 32,
            width: 32,
            seed,
        }
    }

    #[test]
    fn builtin_vocab_is_stable_and_round_trips() {
        let vocab = Vocab::builtin();
        assert_eq!(vocab.id_of("<end>"), Some(END_TOKEN));
        assert!(vocab.len() >= 40 && vocab.len() <= 64, "len {}", vocab.len());
        let ids: Vec<usize> = (0..vocab.len()).collect();
        let text = vocab.decode(&ids).unwrap();
        assert_eq!(vocab.encode(&text).unwrap(), ids);
        assert!(matches!(
            vocab.encode("which zeppelin"),
            Err(SynthError::UnknownWord(w)) if w == "zeppelin"
        ));
        assert!(matches!(
            vocab.decode(&[vocab.len()]),
            Err(SynthError::BadToken { .. })
        ));
    }

    #[test]
    fn vocab_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = Vocab::builtin();
        vocab.write(&path).unwrap();
        let reread = Vocab::read(&path).unwrap();
        assert_eq!(reread.words(), vocab.words());

        std::fs::write(dir.path().join("dup.txt"), "a\nb\na\n").unwrap();
        assert!(matches!(
            Vocab::read(&dir.path().join("dup.txt")),
            Err(SynthError::Parse { .. })
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = tiny_config(8, 77);
        generate_dataset(&cfg, dir_a.path()).unwrap();
        generate_dataset(&cfg, dir_b.path()).unwrap();
        let manifest_a = std::fs::read(dir_a.path().join("manifest.jsonl")).unwrap();
        let manifest_b = std::fs::read(dir_b.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest_a, manifest_b);
        let vol_a = std::fs::read(dir_a.path().join("vol_000003.mvol")).unwrap();
        let vol_b = std::fs::read(dir_b.path().join("vol_000003.mvol")).unwrap();
        assert_eq!(vol_a, vol_b);

        let other = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_config(8, 78), other.path()).unwrap();
        let vol_c = std::fs::read(other.path().join("vol_000003.mvol")).unwrap();
        assert_ne!(vol_a, vol_c, "different seeds must change voxel data");
    }

    #[test]
    fn sample_counts_match_and_pairs_share_voxels() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(16, 5);
        let summary = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(summary.samples, 16);
        assert_eq!(summary.volumes, 16);
        assert_eq!(summary.per_kind, [4, 4, 4, 4]);

        let dataset = Dataset::load(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(dataset.len(), 16);
        let mvol_files = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .path()
                    .extension()
                    .is_some_and(|ext| ext == "mvol")
            })
            .count();
        assert_eq!(mvol_files, 16);

        for s in 0..8 {
            let first = dataset.record(2 * s).unwrap();
            let second = dataset.record(2 * s + 1).unwrap();
            assert_eq!(first.task_kind, TaskKind::all()[s % 4]);
            assert_eq!(second.task_kind, first.task_kind);
            assert_ne!(first.volume_path, second.volume_path);
            assert_eq!(first.ground_truth_slices, second.ground_truth_slices);
            let bytes_a = std::fs::read(dir.path().join(&first.volume_path)).unwrap();
            let bytes_b = std::fs::read(dir.path().join(&second.volume_path)).unwrap();
            assert_eq!(bytes_a, bytes_b, "paired samples must share voxel content");
            if first.task_kind == TaskKind::Report {
                assert_eq!(first.format_kind, FormatKind::FreeForm);
                assert_eq!(second.format_kind, FormatKind::FreeForm);
                assert_ne!(first.instruction, second.instruction);
                assert_eq!(first.answer, second.answer);
            } else {
                assert_eq!(first.format_kind, FormatKind::Choice);
                assert_eq!(second.format_kind, FormatKind::FreeForm);
            }
        }
    }

    #[test]
    fn locate_blob_stands_out_from_noise() {
        for seed in [1, 2, 3] {
            let cfg = tiny_config(8, seed);
            let scene = build_scene(&cfg, 0).unwrap();
            assert_eq!(scene.kind, TaskKind::Locate);
            let truth = scene_ground_truth(&scene);
            assert_eq!(truth, band_slices(scene.band));

            // Peak voxel of the blob sits far outside the noise band.
            let mut peak = f64::NEG_INFINITY;
            let mut peak_z = 0;
            let (depth, height, width) = scene.volume.dims();
            for z in 0..depth {
                for y in 0..height {
                    for x in 0..width {
                        let v = scene.volume.voxel(z, y, x);
                        if v > peak {
                            peak = v;
                            peak_z = z;
                        }
                    }
                }
            }
            assert!(
                peak - BACKGROUND_HU >= 5.0 * NOISE_SIGMA_HU,
                "blob peak {peak} too close to background"
            );
            assert!(
                truth.contains(&peak_z),
                "peak slice {peak_z} outside ground-truth band {truth:?}"
            );
        }
    }

    #[test]
    fn count_scene_answer_matches_blob_bands() {
        let mut seen_counts = std::collections::HashSet::new();
        for seed in 0..12u64 {
            let cfg = tiny_config(8, seed);
            // Scene index 1 is always a count scene.
            let scene = build_scene(&cfg, 1).unwrap();
            assert_eq!(scene.kind, TaskKind::Count);
            assert!(scene.count >= 1 && scene.count <= MAX_COUNT);
            assert_eq!(scene.bands_used.len(), scene.count);
            let mut dedup = scene.bands_used.clone();
            dedup.dedup();
            assert_eq!(dedup.len(), scene.count, "blob bands must be distinct");
            assert_eq!(scene_ground_truth(&scene).len(), scene.count * BAND_DEPTH);
            let [choice, free] = scene_questions(&scene);
            assert_eq!(choice.1, CHOICE_LETTERS[scene.count - 1]);
            assert!(free.1.starts_with(COUNT_WORDS[scene.count - 1]));
            seen_counts.insert(scene.count);
        }
        assert!(seen_counts.len() >= 3, "counts barely vary: {seen_counts:?}");
    }

    #[test]
    fn texture_pattern_alternates_only_on_center_slice() {
        // Find a checker texture scene, then compare horizontal total
        // variation at the blob center on the patterned slice vs a
        // neighboring band slice.
        let mut checked = false;
        for seed in 0..20u64 {
            let cfg = tiny_config(8, seed);
            let scene = build_scene(&cfg, 2).unwrap();
            assert_eq!(scene.kind, TaskKind::Texture);
            if scene.pattern != BlobPattern::Checker {
                continue;
            }
            let truth = scene_ground_truth(&scene);
            let center = find_peak_slice(&scene.volume, &truth);
            let other = if truth.contains(&(center + 2)) {
                center + 2
            } else {
                center - 2
            };
            let tv_center = horizontal_variation(&scene.volume, center);
            let tv_other = horizontal_variation(&scene.volume, other);
            assert!(
                tv_center > 1.5 * tv_other,
                "checker slice variation {tv_center} not above plain slice {tv_other}"
            );
            checked = true;
            break;
        }
        assert!(checked, "no checker scene found in 20 seeds");
    }

    fn find_peak_slice(volume: &Volume, candidates: &[usize]) -> usize {
        let (_, height, width) = volume.dims();
        let mut best = (f64::NEG_INFINITY, candidates[0]);
        for &z in candidates {
            let mut sum = 0.0;
            for y in 0..height {
                for x in 0..width {
                    sum += volume.voxel(z, y, x);
                }
            }
            if sum > best.0 {
                best = (sum, z);
            }
        }
        best.1
    }

    fn horizontal_variation(volume: &Volume, z: usize) -> f64 {
        let (_, height, width) = volume.dims();
        let mut total = 0.0;
        for y in 0..height {
            for x in 1..width {
                total += (volume.voxel(z, y, x) - volume.voxel(z, y, x - 1)).abs();
            }
        }
        total
    }

    #[test]
    fn dataset_loader_round_trips_tokens_and_volumes() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_config(8, 9), dir.path()).unwrap();
        let dataset = Dataset::load(&dir.path().join("manifest.jsonl")).unwrap();
        for i in 0..dataset.len() {
            let instruction = dataset.instruction_ids(i).unwrap();
            let answer = dataset.answer_ids(i).unwrap();
            assert!(!instruction.is_empty());
            assert!(!answer.is_empty());
            assert!(!instruction.contains(&END_TOKEN));
            assert!(!answer.contains(&END_TOKEN));
            let text = dataset.vocab().decode(&answer).unwrap();
            assert_eq!(text, dataset.record(i).unwrap().answer);
        }
        let raw = dataset.load_volume(0).unwrap();
        assert!(!raw.is_windowed());
        let windowed = dataset.load_windowed(0).unwrap();
        assert!(windowed.is_windowed());
        assert!(windowed.voxels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(
            dataset.record(dataset.len()),
            Err(SynthError::SampleOutOfRange { .. })
        ));
    }

    #[test]
    fn generation_rejects_bad_configs() {
        let dir = tempfile::tempdir().unwrap();
        let mut odd = tiny_config(7, 0);
        odd.n_samples = 7;
        assert!(matches!(
            generate_dataset(&odd, dir.path()),
            Err(SynthError::BadConfig(_))
        ));
        let mut ragged = tiny_config(8, 0);
        ragged.depth = 10;
        assert!(matches!(
            generate_dataset(&ragged, dir.path()),
            Err(SynthError::BadConfig(_))
        ));
        let mut deep = tiny_config(8, 0);
        deep.depth = 64;
        assert!(matches!(
            generate_dataset(&deep, dir.path()),
            Err(SynthError::BadConfig(_))
        ));
    }
}
