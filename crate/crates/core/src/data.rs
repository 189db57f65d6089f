//! Feature and label I/O, the synthetic corpus generator, label-regime mixing
//! across corpora and padded batching.
//!
//! # EMOF feature files
//!
//! ```text
//! magic   b"EMOF"             4 bytes
//! version u16 = 1             little-endian
//! frames  u32 (T)             little-endian
//! dims    u32 (D)             little-endian
//! data    T * D f32           little-endian, row-major (frame by frame)
//! ```
//!
//! # Manifests
//!
//! JSON lines, one utterance per line:
//! `{"id","path","vad":[v,a,d]|null,"disc":0-4|null,"split","corpus"}`.
//! Relative paths are resolved against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{NUM_ATTRIBUTES, NUM_CLASSES};
use crate::numerics::{Matrix, Real, Rng, Stream};

pub const FEATURE_MAGIC: &[u8; 4] = b"EMOF";
pub const FEATURE_VERSION: u16 = 1;
const FEATURE_HEADER_LEN: usize = 4 + 2 + 4 + 4;

/// Utterances longer than this are rejected at load.
pub const DEFAULT_MAX_FRAMES: usize = 2000;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["neutral", "angry", "happy", "sad", "disgust"];

/// One utterance's frame-level features (`T x D`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub frames: Matrix<f32>,
}

pub fn encode_features(frames: &Matrix<f32>) -> Result<Vec<u8>> {
    if frames.rows() == 0 || frames.cols() == 0 {
        return Err(Error::InvalidArgument("feature matrix must be non-empty".into()));
    }
    if !frames.is_finite() {
        return Err(Error::InvalidArgument("feature matrix has non-finite entries".into()));
    }
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * frames.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(frames.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.cols() as u32).to_le_bytes());
    for v in frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Matrix<f32>> {
    let fail = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(fail(bytes.len(), format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let t = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    if t == 0 || d == 0 {
        return Err(fail(6, format!("empty feature matrix {t}x{d}")));
    }
    let expected = FEATURE_HEADER_LEN + 4 * t * d;
    if bytes.len() != expected {
        return Err(fail(
            bytes.len().min(expected),
            format!("expected {expected} bytes for {t}x{d} frames, found {}", bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(t * d);
    for (i, c) in bytes[FEATURE_HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(fail(FEATURE_HEADER_LEN + 4 * i, "non-finite value".into()));
        }
        data.push(v);
    }
    Matrix::new(t, d, data)
}

pub fn write_features(seq: &FeatureSequence, path: &Path) -> Result<()> {
    let bytes = encode_features(&seq.frames)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an EMOF file; the utterance id is the file stem.
pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let frames = decode_features(&bytes, path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FeatureSequence { id, frames })
}

/// Discrete class and/or continuous (valence, arousal, dominance) annotation.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct EmotionLabel {
    pub disc: Option<usize>,
    pub vad: Option<[f32; NUM_ATTRIBUTES]>,
}

impl EmotionLabel {
    pub fn validate(&self) -> Result<()> {
        if self.disc.is_none() && self.vad.is_none() {
            return Err(Error::Data("label has neither a class nor a VAD triple".into()));
        }
        if let Some(k) = self.disc {
            if k >= NUM_CLASSES {
                return Err(Error::ClassOutOfRange { id: k, classes: NUM_CLASSES });
            }
        }
        if let Some(vad) = self.vad {
            if vad.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Data(format!("VAD values must be finite and >= 0, got {vad:?}")));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.disc.is_none() && self.vad.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}` (train|valid|test)"))),
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub path: PathBuf,
    pub vad: Option<[f32; NUM_ATTRIBUTES]>,
    pub disc: Option<usize>,
    pub split: Split,
    pub corpus: String,
}

impl ManifestRecord {
    pub fn label(&self) -> EmotionLabel {
        EmotionLabel {
            disc: self.disc,
            vad: self.vad,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            records.push(rec);
        }
        let manifest = Manifest {
            records,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for rec in &self.records {
            if !seen.insert(rec.id.as_str()) {
                return Err(Error::Data(format!("duplicate utterance id `{}`", rec.id)));
            }
            rec.label()
                .validate()
                .map_err(|e| Error::Data(format!("utterance `{}`: {e}", rec.id)))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rec: &ManifestRecord) -> PathBuf {
        if rec.path.is_absolute() {
            rec.path.clone()
        } else {
            self.base_dir.join(&rec.path)
        }
    }

    /// Loads every record of `split` (all records when `None`) with its features.
    pub fn load(&self, split: Option<Split>, max_frames: usize) -> Result<Vec<Example>> {
        self.records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(|rec| {
                let path = self.resolve(rec);
                let seq = read_features(&path)?;
                if seq.frames.rows() > max_frames {
                    return Err(Error::Data(format!(
                        "utterance `{}` has {} frames, over the {max_frames}-frame cap",
                        rec.id,
                        seq.frames.rows()
                    )));
                }
                Ok(Example {
                    id: rec.id.clone(),
                    frames: seq.frames,
                    label: rec.label(),
                    corpus: rec.corpus.clone(),
                })
            })
            .collect()
    }
}

/// An utterance held in memory together with its (possibly partial) label.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub frames: Matrix<f32>,
    pub label: EmotionLabel,
    pub corpus: String,
}

impl Example {
    pub fn feature_dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Class prototypes on the 1..7 VAD scale, rows in [`CLASS_NAMES`] order.
pub const DEFAULT_PROTOTYPES: [[f64; NUM_ATTRIBUTES]; NUM_CLASSES] = [
    [4.0, 4.0, 4.0],
    [2.0, 6.0, 6.0],
    [6.0, 6.0, 4.5],
    [2.0, 2.0, 2.5],
    [2.5, 4.5, 4.0],
];

pub const VAD_RANGE: (f64, f64) = (1.0, 7.0);

/// Settings for [`gen_synthetic`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    pub d_in: usize,
    pub seed: u64,
    /// Std-dev of the VAD label around its class prototype.
    pub sigma_label: f64,
    /// Std-dev of per-frame feature noise.
    pub sigma_frame: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub prototypes: [[f64; NUM_ATTRIBUTES]; NUM_CLASSES],
    /// Seed of the shared VAD-to-feature projection; defaults to `seed`.
    /// Corpora generated with the same projection seed share a feature space.
    pub projection_seed: Option<u64>,
    pub corpus: String,
    /// Train/valid/test fractions.
    pub split_ratios: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 200,
            d_in: 32,
            seed: 0,
            sigma_label: 0.5,
            sigma_frame: 1.0,
            min_frames: 20,
            max_frames: 80,
            prototypes: DEFAULT_PROTOTYPES,
            projection_seed: None,
            corpus: "synth".into(),
            split_ratios: [0.8, 0.1, 0.1],
        }
    }
}

/// Per-split counts: train and valid are rounded, test takes the remainder.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be >= 0 and sum to 1")));
    }
    let train = (((n as f64) * ratios[0]).round() as usize).min(n);
    let valid = (((n as f64) * ratios[1]).round() as usize).min(n - train);
    Ok([train, valid, n - train - valid])
}

/// Fixed `d_in x 4` matrix mapping `[v, a, d, 1]` to feature space.
pub fn synthetic_projection(d_in: usize, projection_seed: u64) -> Matrix<f64> {
    let mut rng = Rng::substream(projection_seed, Stream::Projection);
    let data = (0..d_in * 4).map(|_| rng.normal(0.0, 0.5)).collect();
    Matrix::new(d_in, 4, data).expect("projection shape")
}

/// Synthetic corpus where discrete classes occupy regions of VAD space.
///
/// Per utterance: class `k` uniform; `vad = prototype(k) + N(0, σ_label)`
/// clipped to `[1, 7]`; `T ~ U[min_frames, max_frames]`; every frame is
/// `A [vad, 1] + N(0, σ_frame)`. Both labels are recorded.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Vec<(Example, Split)>> {
    if cfg.n == 0 || cfg.d_in == 0 {
        return Err(Error::InvalidArgument("synthetic corpus needs n >= 1 and d_in >= 1".into()));
    }
    if cfg.min_frames == 0 || cfg.min_frames > cfg.max_frames {
        return Err(Error::InvalidArgument(format!(
            "bad frame range {}..={}",
            cfg.min_frames, cfg.max_frames
        )));
    }
    if !(cfg.sigma_label >= 0.0 && cfg.sigma_frame >= 0.0) {
        return Err(Error::InvalidArgument("noise levels must be >= 0".into()));
    }
    let counts = split_counts(cfg.n, cfg.split_ratios)?;
    let projection = synthetic_projection(cfg.d_in, cfg.projection_seed.unwrap_or(cfg.seed));
    let mut rng = Rng::substream(cfg.seed, Stream::Corpus);
    let width = cfg.n.to_string().len().max(4);

    let mut out = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let class = rng.int_range(0, NUM_CLASSES - 1);
        let mut vad = [0.0f64; NUM_ATTRIBUTES];
        for (j, v) in vad.iter_mut().enumerate() {
            *v = rng
                .normal(cfg.prototypes[class][j], cfg.sigma_label)
                .clamp(VAD_RANGE.0, VAD_RANGE.1);
        }
        let t = rng.int_range(cfg.min_frames, cfg.max_frames);
        let clean: Vec<f64> = (0..cfg.d_in)
            .map(|r| {
                let a = projection.row(r);
                a[0] * vad[0] + a[1] * vad[1] + a[2] * vad[2] + a[3]
            })
            .collect();
        let mut frames = Matrix::zeros(t, cfg.d_in);
        for f in 0..t {
            for (x, &c) in frames.row_mut(f).iter_mut().zip(&clean) {
                *x = rng.normal(c, cfg.sigma_frame) as f32;
            }
        }
        let split = if i < counts[0] {
            Split::Train
        } else if i < counts[0] + counts[1] {
            Split::Valid
        } else {
            Split::Test
        };
        out.push((
            Example {
                id: format!("{}_{:0width$}", cfg.corpus, i),
                frames,
                label: EmotionLabel {
                    disc: Some(class),
                    vad: Some(vad.map(|v| v as f32)),
                },
                corpus: cfg.corpus.clone(),
            },
            split,
        ));
    }
    Ok(out)
}

/// Writes `manifest.jsonl` and `features/<id>.emof` under `dir`.
pub fn write_corpus(dir: &Path, corpus: &[(Example, Split)]) -> Result<Manifest> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut records = Vec::with_capacity(corpus.len());
    for (ex, split) in corpus {
        let rel = PathBuf::from("features").join(format!("{}.emof", ex.id));
        write_features(
            &FeatureSequence {
                id: ex.id.clone(),
                frames: ex.frames.clone(),
            },
            &dir.join(&rel),
        )?;
        records.push(ManifestRecord {
            id: ex.id.clone(),
            path: rel,
            vad: ex.label.vad,
            disc: ex.label.disc,
            split: *split,
            corpus: ex.corpus.clone(),
        });
    }
    let manifest = Manifest {
        records,
        base_dir: dir.to_path_buf(),
    };
    let mpath = dir.join("manifest.jsonl");
    let mut f = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    f.write_all(manifest.to_jsonl()?.as_bytes()).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Index of the prototype nearest (Euclidean) to `vad`; ties go to the lower index.
pub fn nearest_prototype(vad: [f64; NUM_ATTRIBUTES], prototypes: &[[f64; NUM_ATTRIBUTES]; NUM_CLASSES]) -> usize {
    let dist = |p: &[f64; 3]| p.iter().zip(&vad).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut best = 0;
    for k in 1..NUM_CLASSES {
        if dist(&prototypes[k]) < dist(&prototypes[best]) {
            best = k;
        }
    }
    best
}

/// Which label types one corpus contributes to training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecipe {
    pub corpus: String,
    pub use_cont: bool,
    pub use_disc: bool,
    /// Random subsample down to this many examples.
    #[serde(default)]
    pub max_examples: Option<usize>,
}

/// Deterministic size-exact random subsample (order of survivors preserved).
pub fn subsample(examples: &[Example], size: usize, seed: u64) -> Vec<Example> {
    if size >= examples.len() {
        return examples.to_vec();
    }
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    Rng::substream(seed, Stream::Subsample).shuffle(&mut idx);
    let mut keep = idx[..size].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| examples[i].clone()).collect()
}

/// Applies per-corpus label recipes. Masks can only hide labels; examples
/// left with no label are dropped; corpora absent from the recipe are dropped.
///
/// With `equalize`, every corpus is subsampled to the size of the smallest
/// one after masking.
pub fn mix_corpora(examples: &[Example], recipe: &[CorpusRecipe], equalize: bool, seed: u64) -> Result<Vec<Example>> {
    let mut groups: BTreeMap<&str, Vec<Example>> = BTreeMap::new();
    for ex in examples {
        groups.entry(ex.corpus.as_str()).or_default();
    }
    for r in recipe {
        if !groups.contains_key(r.corpus.as_str()) {
            return Err(Error::Data(format!(
                "recipe names unknown corpus `{}` (known: {})",
                r.corpus,
                groups.keys().copied().collect::<Vec<_>>().join(", ")
            )));
        }
    }
    let mut per_corpus: Vec<Vec<Example>> = Vec::with_capacity(recipe.len());
    for r in recipe {
        let mut kept: Vec<Example> = examples
            .iter()
            .filter(|ex| ex.corpus == r.corpus)
            .filter_map(|ex| {
                let label = EmotionLabel {
                    disc: ex.label.disc.filter(|_| r.use_disc),
                    vad: ex.label.vad.filter(|_| r.use_cont),
                };
                (!label.is_empty()).then(|| Example {
                    label,
                    ..ex.clone()
                })
            })
            .collect();
        if let Some(m) = r.max_examples {
            kept = subsample(&kept, m, seed);
        }
        per_corpus.push(kept);
    }
    if equalize {
        let min = per_corpus.iter().map(Vec::len).min().unwrap_or(0);
        for (i, group) in per_corpus.iter_mut().enumerate() {
            *group = subsample(group, min, seed.wrapping_add(i as u64));
        }
    }
    Ok(per_corpus.into_iter().flatten().collect())
}

/// Padded batch. Utterance `b` owns feature rows `b*t_max..(b+1)*t_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T = f32> {
    pub ids: Vec<String>,
    /// `(B * t_max) x D`, zero-padded.
    pub features: Matrix<T>,
    pub t_max: usize,
    pub frame_mask: Vec<Vec<bool>>,
    pub disc: Vec<usize>,
    pub disc_mask: Vec<bool>,
    /// `B x 3`, zero where absent.
    pub vad: Matrix<T>,
    pub vad_mask: Vec<bool>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn frame_masks(&self) -> Vec<&[bool]> {
        self.frame_mask.iter().map(Vec::as_slice).collect()
    }

    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch {
            ids: self.ids.clone(),
            features: self.features.cast(),
            t_max: self.t_max,
            frame_mask: self.frame_mask.clone(),
            disc: self.disc.clone(),
            disc_mask: self.disc_mask.clone(),
            vad: self.vad.cast(),
            vad_mask: self.vad_mask.clone(),
        }
    }

    /// Pads `examples` to a common length, optionally at least `min_len` frames.
    pub fn from_examples(examples: &[&Example], min_len: usize) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot batch zero examples".into()))?;
        let d = first.feature_dim();
        let t_max = examples.iter().map(|e| e.frames.rows()).max().unwrap_or(0).max(min_len);
        let b = examples.len();
        let mut features = Matrix::zeros(b * t_max, d);
        let mut frame_mask = Vec::with_capacity(b);
        let mut disc = vec![0; b];
        let mut disc_mask = vec![false; b];
        let mut vad = Matrix::zeros(b, NUM_ATTRIBUTES);
        let mut vad_mask = vec![false; b];
        for (i, ex) in examples.iter().enumerate() {
            if ex.feature_dim() != d {
                return Err(Error::Data(format!(
                    "utterance `{}` has feature dim {}, expected {d}",
                    ex.id,
                    ex.feature_dim()
                )));
            }
            if ex.frames.rows() == 0 {
                return Err(Error::NoValidFrames);
            }
            for t in 0..ex.frames.rows() {
                for (dst, &src) in features.row_mut(i * t_max + t).iter_mut().zip(ex.frames.row(t)) {
                    *dst = T::of(src as f64);
                }
            }
            frame_mask.push((0..t_max).map(|t| t < ex.frames.rows()).collect());
            if let Some(k) = ex.label.disc {
                disc[i] = k;
                disc_mask[i] = true;
            }
            if let Some(v) = ex.label.vad {
                for (j, &x) in v.iter().enumerate() {
                    vad.set(i, j, T::of(x as f64));
                }
                vad_mask[i] = true;
            }
        }
        Ok(Batch {
            ids: examples.iter().map(|e| e.id.clone()).collect(),
            features,
            t_max,
            frame_mask,
            disc,
            disc_mask,
            vad,
            vad_mask,
        })
    }
}

/// Index groups for one epoch; the final group may be short.
pub fn batch_order(n: usize, batch_size: usize, rng: &mut Rng, shuffle: bool) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be >= 1");
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        rng.shuffle(&mut idx);
    }
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Lazily assembled padded batches for one epoch.
pub fn make_batches<'a>(
    examples: &'a [Example],
    batch_size: usize,
    rng: &mut Rng,
    shuffle: bool,
) -> impl Iterator<Item = Result<Batch<f32>>> + 'a {
    batch_order(examples.len(), batch_size, rng, shuffle)
        .into_iter()
        .map(move |group| {
            let refs: Vec<&Example> = group.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&refs, 0)
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ccc;

    #[test]
    fn feature_round_trip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.emof");
        let frames = Matrix::new(3, 2, vec![1.5f32, -0.0, f32::MIN_POSITIVE, 7.25, -3.0, 1e-30]).unwrap();
        write_features(&FeatureSequence { id: "u".into(), frames: frames.clone() }, &path).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.id, "u");
        let bits = |m: &Matrix<f32>| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.frames), bits(&frames));

        let tiny = encode_features(&Matrix::new(1, 1, vec![0.5]).unwrap()).unwrap();
        assert_eq!(tiny.len(), 18);
    }

    #[test]
    fn feature_decode_errors() {
        let p = Path::new("x.emof");
        let mut good = encode_features(&Matrix::new(2, 2, vec![1.0f32; 4]).unwrap()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        let err = decode_features(&bad, p).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_features(&bad, p), Err(Error::Format { offset: 4, .. })));
        good.truncate(good.len() - 3);
        let err = decode_features(&good, p).unwrap_err();
        assert!(err.to_string().contains("expected 30 bytes"), "{err}");
        assert!(decode_features(&good[..5], p).is_err());
        assert!(encode_features(&Matrix::new(1, 1, vec![f32::NAN]).unwrap()).is_err());
    }

    #[test]
    fn split_count_arithmetic() {
        assert_eq!(split_counts(10, [0.8, 0.1, 0.1]).unwrap(), [8, 1, 1]);
        assert_eq!(split_counts(1400, [5.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0]).unwrap(), [1000, 200, 200]);
        assert!(split_counts(10, [0.5, 0.1, 0.1]).is_err());
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = SynthConfig { n: 12, d_in: 5, seed: 3, ..Default::default() };
        assert_eq!(gen_synthetic(&cfg).unwrap(), gen_synthetic(&cfg).unwrap());
        let other = SynthConfig { seed: 4, ..cfg.clone() };
        assert_ne!(gen_synthetic(&cfg).unwrap(), gen_synthetic(&other).unwrap());
    }

    #[test]
    fn noiseless_generator_is_class_determined() {
        let cfg = SynthConfig {
            n: 30,
            d_in: 6,
            seed: 1,
            sigma_label: 0.0,
            sigma_frame: 0.0,
            ..Default::default()
        };
        let corpus = gen_synthetic(&cfg).unwrap();
        let mut by_class: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
        for (ex, _) in &corpus {
            let first = ex.frames.row(0).to_vec();
            for t in 1..ex.frames.rows() {
                assert_eq!(ex.frames.row(t), first.as_slice());
            }
            let k = ex.label.disc.unwrap();
            let vad = ex.label.vad.unwrap().map(f64::from);
            assert_eq!(nearest_prototype(vad, &DEFAULT_PROTOTYPES), k);
            assert_eq!(vad, DEFAULT_PROTOTYPES[k]);
            let prev = by_class.entry(k).or_insert_with(|| first.clone());
            assert_eq!(prev, &first);
        }
    }

    /// Least-squares decode of VAD from utterance-mean frames. Calibrates the
    /// default noise levels: the signal must be recoverable.
    #[test]
    fn least_squares_oracle_recovers_vad_at_default_noise() {
        let cfg = SynthConfig { n: 600, d_in: 32, seed: 17, split_ratios: [0.5, 0.0, 0.5], ..Default::default() };
        let corpus = gen_synthetic(&cfg).unwrap();
        let design = |ex: &Example| -> Vec<f64> {
            let mut row = vec![1.0];
            for c in 0..ex.frames.cols() {
                let s: f64 = (0..ex.frames.rows()).map(|t| ex.frames.get(t, c) as f64).sum();
                row.push(s / ex.frames.rows() as f64);
            }
            row
        };
        let train: Vec<&Example> = corpus.iter().filter(|(_, s)| *s == Split::Train).map(|(e, _)| e).collect();
        let test: Vec<&Example> = corpus.iter().filter(|(_, s)| *s == Split::Test).map(|(e, _)| e).collect();
        let p = cfg.d_in + 1;
        let x = Matrix::new(train.len(), p, train.iter().flat_map(|e| design(e)).collect()).unwrap();
        let y = Matrix::new(train.len(), 3, train.iter().flat_map(|e| e.label.vad.unwrap().map(f64::from)).collect()).unwrap();
        // normal equations with a tiny ridge, solved by Gauss-Jordan
        let mut xtx = x.t_matmul(&x).unwrap();
        for i in 0..p {
            xtx.set(i, i, xtx.get(i, i) + 1e-6);
        }
        let xty = x.t_matmul(&y).unwrap();
        let beta = solve(xtx, xty);
        let xt = Matrix::new(test.len(), p, test.iter().flat_map(|e| design(e)).collect()).unwrap();
        let pred = xt.matmul(&beta).unwrap();
        for j in 0..3 {
            let pj: Vec<f64> = (0..test.len()).map(|i| pred.get(i, j)).collect();
            let tj: Vec<f64> = test.iter().map(|e| e.label.vad.unwrap()[j] as f64).collect();
            let c = ccc(&pj, &tj).unwrap().value;
            assert!(c > 0.95, "attribute {j}: ccc {c}");
        }
    }

    fn solve(mut a: Matrix<f64>, mut b: Matrix<f64>) -> Matrix<f64> {
        let n = a.rows();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a.get(i, col).abs().total_cmp(&a.get(j, col).abs())).unwrap();
            for c in 0..n {
                let (x, y) = (a.get(col, c), a.get(piv, c));
                a.set(col, c, y);
                a.set(piv, c, x);
            }
            for c in 0..b.cols() {
                let (x, y) = (b.get(col, c), b.get(piv, c));
                b.set(col, c, y);
                b.set(piv, c, x);
            }
            let d = a.get(col, col);
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a.get(r, col) / d;
                for c in 0..n {
                    a.set(r, c, a.get(r, c) - f * a.get(col, c));
                }
                for c in 0..b.cols() {
                    b.set(r, c, b.get(r, c) - f * b.get(col, c));
                }
            }
        }
        for r in 0..n {
            let d = a.get(r, r);
            for c in 0..b.cols() {
                b.set(r, c, b.get(r, c) / d);
            }
        }
        b
    }

    fn two_corpora() -> Vec<Example> {
        let a = SynthConfig { n: 20, d_in: 4, seed: 1, corpus: "A".into(), ..Default::default() };
        let b = SynthConfig { n: 30, d_in: 4, seed: 2, corpus: "B".into(), ..Default::default() };
        gen_synthetic(&a).unwrap().into_iter().chain(gen_synthetic(&b).unwrap()).map(|(e, _)| e).collect()
    }

    fn recipe(corpus: &str, use_cont: bool, use_disc: bool) -> CorpusRecipe {
        CorpusRecipe { corpus: corpus.into(), use_cont, use_disc, max_examples: None }
    }

    #[test]
    fn mixing_hides_labels() {
        let all = two_corpora();
        let mixed = mix_corpora(&all, &[recipe("A", true, false)], false, 0).unwrap();
        assert_eq!(mixed.len(), 20);
        assert!(mixed.iter().all(|e| e.label.disc.is_none() && e.label.vad.is_some()));

        let row5 = mix_corpora(&all, &[recipe("A", true, false), recipe("B", true, false)], false, 0).unwrap();
        assert_eq!(row5.len(), 50);
        assert!(row5.iter().all(|e| e.label.disc.is_none()));

        let row7 = mix_corpora(&all, &[recipe("A", true, false), recipe("B", false, true)], false, 0).unwrap();
        for ex in &row7 {
            let orig = all.iter().find(|o| o.id == ex.id).unwrap();
            // never reveals
            assert!(ex.label.disc.is_none() || ex.label.disc == orig.label.disc);
            assert!(ex.label.vad.is_none() || ex.label.vad == orig.label.vad);
        }
        assert!(mix_corpora(&all, &[recipe("C", true, true)], false, 0).is_err());
        let none = mix_corpora(&all, &[recipe("A", false, false)], false, 0).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn subsampling_is_deterministic_and_exact() {
        let all = two_corpora();
        let b: Vec<Example> = all.iter().filter(|e| e.corpus == "B").cloned().collect();
        let s1 = subsample(&b, 20, 9);
        assert_eq!(s1.len(), 20);
        assert_eq!(s1, subsample(&b, 20, 9));
        let eq = mix_corpora(&all, &[recipe("A", true, false), recipe("B", false, true)], true, 4).unwrap();
        assert_eq!(eq.iter().filter(|e| e.corpus == "A").count(), 20);
        assert_eq!(eq.iter().filter(|e| e.corpus == "B").count(), 20);
    }

    #[test]
    fn batching_covers_epoch_and_pads() {
        let all = two_corpora();
        let sizes: Vec<usize> = make_batches(&all, 8, &mut Rng::new(1), true).map(|b| b.unwrap().len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), all.len());
        let ids = |seed| -> Vec<Vec<String>> {
            make_batches(&all, 8, &mut Rng::new(seed), true).map(|b| b.unwrap().ids).collect()
        };
        assert_eq!(ids(5), ids(5));
        assert_ne!(ids(5), ids(6));

        let batch = make_batches(&all, 50, &mut Rng::new(0), false).next().unwrap().unwrap();
        for (i, ex) in all.iter().enumerate() {
            let len = ex.frames.rows();
            assert!(batch.frame_mask[i][..len].iter().all(|&m| m));
            assert!(batch.frame_mask[i][len..].iter().all(|&m| !m));
            for t in len..batch.t_max {
                assert!(batch.features.row(i * batch.t_max + t).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn manifest_round_trip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = gen_synthetic(&SynthConfig { n: 5, d_in: 3, ..Default::default() }).unwrap();
        write_corpus(dir.path(), &corpus).unwrap();
        let m = Manifest::read(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(m.records.len(), 5);
        let loaded = m.load(None, DEFAULT_MAX_FRAMES).unwrap();
        for (a, (b, _)) in loaded.iter().zip(&corpus) {
            assert_eq!(a, b);
        }
        assert!(m.load(None, 10).is_err());

        let mut dup = m.clone();
        dup.records.push(dup.records[0].clone());
        assert!(dup.validate().is_err());
    }
}
