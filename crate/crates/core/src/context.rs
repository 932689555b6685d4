//! External context streams for the gate predictors.
//!
//! Each stream is a `T_c × D_c` array produced by a provider: the frontend
//! features themselves (`front`), a per-speaker embedding (`spk`), a shallow
//! acoustic-event feature sequence (`event`) and a binary typological
//! language vector (`lang2vec`). The synthetic providers here stand in for
//! pretrained extractors; [`ContextSource`] can read real extractor output
//! from disk instead.
//!
//! Embedding file layout (little-endian):
//!
//! ```text
//! magic   4 bytes "CTXE"
//! version u32     1
//! rows    u32
//! cols    u32
//! data    rows × cols f64, row-major
//! ```
//!
//! Files are looked up as `<dir>/<utterance id>.<stream name>.bin`.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{layers::Linear, params::ParamBuilder, ModelConfig};
use crate::tensor::{RngState, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Front,
    Spk,
    Event,
    Lang2vec,
}

impl StreamKind {
    pub const ALL: [StreamKind; 4] = [
        StreamKind::Front,
        StreamKind::Spk,
        StreamKind::Event,
        StreamKind::Lang2vec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Front => "front",
            StreamKind::Spk => "spk",
            StreamKind::Event => "event",
            StreamKind::Lang2vec => "lang2vec",
        }
    }

    /// Raw width of this stream under `cfg`.
    pub fn raw_dim(self, cfg: &ModelConfig) -> usize {
        match self {
            StreamKind::Front => cfg.feature_dim,
            StreamKind::Spk => cfg.speaker_dim,
            StreamKind::Event => cfg.event_dim,
            StreamKind::Lang2vec => cfg.lang_dim,
        }
    }
}

/// Ordered set of context streams, written `front+spk+event`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ContextConfig {
    pub streams: Vec<StreamKind>,
}

impl ContextConfig {
    pub fn new(streams: Vec<StreamKind>) -> Result<Self> {
        if streams.is_empty() {
            return Err(Error::Parameter(
                "context configuration needs at least one stream".into(),
            ));
        }
        for (i, s) in streams.iter().enumerate() {
            if streams[..i].contains(s) {
                return Err(Error::Parameter(format!(
                    "stream {} listed twice",
                    s.name()
                )));
            }
        }
        Ok(Self { streams })
    }

    pub fn contains(&self, kind: StreamKind) -> bool {
        self.streams.contains(&kind)
    }
}

impl FromStr for ContextConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let streams = s
            .split('+')
            .map(|p| {
                let p = p.trim();
                StreamKind::ALL
                    .into_iter()
                    .find(|k| k.name() == p)
                    .ok_or_else(|| Error::Parameter(format!("unknown context stream {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(streams)
    }
}

impl fmt::Display for ContextConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.streams.iter().map(|s| s.name()).collect();
        f.write_str(&names.join("+"))
    }
}

impl TryFrom<String> for ContextConfig {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ContextConfig> for String {
    fn from(c: ContextConfig) -> String {
        c.to_string()
    }
}

/// A synthetic utterance: frame features plus the labels and identities the
/// providers and analyses need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUtterance {
    pub id: usize,
    pub frames: usize,
    pub feature_dim: usize,
    /// Row-major `frames × feature_dim`.
    pub features: Vec<f64>,
    /// 1 = speech, 0 = silence.
    pub frame_labels: Vec<u8>,
    pub targets: Vec<usize>,
    pub speaker_id: usize,
    pub event_id: usize,
    pub language_id: usize,
}

impl SyntheticUtterance {
    pub fn features_tensor(&self) -> Tensor {
        Tensor::new(&[self.frames, self.feature_dim], self.features.clone())
            .expect("consistent utterance")
    }

    /// Mean squared feature value per frame.
    pub fn frame_energy(&self) -> Vec<f64> {
        self.features
            .chunks(self.feature_dim)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>() / self.feature_dim as f64)
            .collect()
    }
}

/// One raw context stream.
#[derive(Debug, Clone)]
pub struct RawStream {
    pub kind: StreamKind,
    pub data: Tensor,
}

/// Raw streams in configuration order.
#[derive(Debug, Clone)]
pub struct ContextBundle {
    pub streams: Vec<RawStream>,
}

impl ContextBundle {
    pub fn kinds(&self) -> Vec<StreamKind> {
        self.streams.iter().map(|s| s.kind).collect()
    }

    /// Each stream averaged over time to a single row.
    pub fn pooled(&self) -> Result<Self> {
        let streams = self
            .streams
            .iter()
            .map(|s| {
                Ok(RawStream {
                    kind: s.kind,
                    data: s.data.mean_rows()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { streams })
    }
}

const SPK_LABEL: u64 = 0x5350_4b00;
const EVENT_LABEL: u64 = 0x4556_4e00;
const LANG_LABEL: u64 = 0x4c41_4e00;
const JITTER_LABEL: u64 = 0x4a49_5400;

fn gaussian_vec(rng: &mut RngState, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Deterministic stand-ins for pretrained context extractors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticContext {
    pub seed: u64,
    pub speaker_dim: usize,
    pub event_dim: usize,
    pub lang_dim: usize,
    pub n_languages: usize,
    pub speaker_jitter: f64,
    pub event_noise: f64,
}

impl SyntheticContext {
    /// Rows of the raw `kind` stream for an utterance of `frames` frames.
    pub fn rows(kind: StreamKind, frames: usize) -> usize {
        match kind {
            StreamKind::Front => frames,
            StreamKind::Event => (frames / 2).max(1),
            StreamKind::Spk | StreamKind::Lang2vec => 1,
        }
    }

    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        Self {
            seed,
            speaker_dim: cfg.speaker_dim,
            event_dim: cfg.event_dim,
            lang_dim: cfg.lang_dim,
            n_languages: cfg.n_languages,
            speaker_jitter: 0.01,
            event_noise: 0.02,
        }
    }

    fn rng(&self, label: u64, id: usize) -> RngState {
        RngState::new(self.seed).fork(label ^ (id as u64).wrapping_mul(0x1000_0001))
    }

    /// Clean unit-norm embedding of a speaker.
    pub fn speaker_basis(&self, speaker_id: usize) -> Vec<f64> {
        unit(gaussian_vec(
            &mut self.rng(SPK_LABEL, speaker_id),
            self.speaker_dim,
        ))
    }

    pub fn event_basis(&self, event_id: usize) -> Vec<f64> {
        unit(gaussian_vec(
            &mut self.rng(EVENT_LABEL, event_id),
            self.event_dim,
        ))
    }

    /// `1 × speaker_dim`: speaker basis plus per-utterance jitter.
    pub fn make_speaker_context(&self, utt: &SyntheticUtterance) -> Result<Tensor> {
        let mut v = self.speaker_basis(utt.speaker_id);
        let mut rng = self.rng(JITTER_LABEL ^ SPK_LABEL, utt.id);
        for x in v.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *x += self.speaker_jitter * n;
        }
        Tensor::new(&[1, self.speaker_dim], v)
    }

    /// `max(1, T/2) × event_dim`: event basis scaled by the energy of each
    /// pair of frames, plus small noise.
    pub fn make_event_context(&self, utt: &SyntheticUtterance) -> Result<Tensor> {
        let rows = Self::rows(StreamKind::Event, utt.frames);
        let energy = utt.frame_energy();
        let basis = self.event_basis(utt.event_id);
        let mut rng = self.rng(JITTER_LABEL ^ EVENT_LABEL, utt.id);
        let mut data = Vec::with_capacity(rows * self.event_dim);
        for r in 0..rows {
            let frames: Vec<f64> = energy.iter().skip(2 * r).take(2).copied().collect();
            let e = frames.iter().sum::<f64>() / frames.len().max(1) as f64;
            for b in &basis {
                let n: f64 = StandardNormal.sample(&mut rng);
                data.push(e * b + self.event_noise * n);
            }
        }
        Tensor::new(&[rows, self.event_dim], data)
    }

    /// `1 × lang_dim` binary vector; the low bits spell out the language id.
    pub fn make_lang_vector(&self, language_id: usize) -> Result<Tensor> {
        if language_id >= self.n_languages {
            return Err(Error::Parameter(format!(
                "language id {language_id} not among {} configured languages",
                self.n_languages
            )));
        }
        let code_bits = usize::BITS as usize - self.n_languages.leading_zeros() as usize;
        if code_bits > self.lang_dim {
            return Err(Error::Parameter(
                "lang_dim too small to encode every language".into(),
            ));
        }
        let mut rng = self.rng(LANG_LABEL, language_id);
        let v = (0..self.lang_dim)
            .map(|i| {
                if i < code_bits {
                    ((language_id >> i) & 1) as f64
                } else {
                    (rng.uniform() < 0.5) as u8 as f64
                }
            })
            .collect();
        Tensor::new(&[1, self.lang_dim], v)
    }
}

/// Resolves context streams for an utterance, preferring files in `dir`.
#[derive(Debug, Clone)]
pub struct ContextSource {
    pub synthetic: SyntheticContext,
    pub dir: Option<PathBuf>,
}

impl ContextSource {
    pub fn synthetic(synthetic: SyntheticContext) -> Self {
        Self {
            synthetic,
            dir: None,
        }
    }

    pub fn stream(&self, utt: &SyntheticUtterance, kind: StreamKind) -> Result<Tensor> {
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{}.{}.bin", utt.id, kind.name()));
            if path.exists() {
                return read_embedding(&path);
            }
        }
        match kind {
            StreamKind::Front => Ok(utt.features_tensor()),
            StreamKind::Spk => self.synthetic.make_speaker_context(utt),
            StreamKind::Event => self.synthetic.make_event_context(utt),
            StreamKind::Lang2vec => self.synthetic.make_lang_vector(utt.language_id),
        }
    }

    pub fn bundle(
        &self,
        utt: &SyntheticUtterance,
        config: &ContextConfig,
    ) -> Result<ContextBundle> {
        let streams = config
            .streams
            .iter()
            .map(|&kind| {
                Ok(RawStream {
                    kind,
                    data: self.stream(utt, kind)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ContextBundle { streams })
    }
}

/// Matches a stream to `t` rows: repeats the final row when short, drops the
/// tail when long.
pub fn align_length(raw: &Tensor, t: usize) -> Result<Tensor> {
    let (rows, _) = raw.dims2()?;
    if rows == 0 {
        return Err(Error::Contract("context stream has no rows".into()));
    }
    if rows == t {
        return Ok(raw.clone());
    }
    let idx: Vec<usize> = (0..t).map(|i| i.min(rows - 1)).collect();
    raw.gather_rows(&idx)
}

/// Learned per-stream projections to the common context width.
#[derive(Debug, Clone)]
pub struct ContextAligner {
    pub projections: Vec<(StreamKind, Linear)>,
}

impl ContextAligner {
    pub fn new(pb: &mut ParamBuilder<'_>, kinds: &[StreamKind], cfg: &ModelConfig) -> Result<Self> {
        let mut s = pb.scope("align");
        let projections = kinds
            .iter()
            .map(|&k| {
                Ok((
                    k,
                    Linear::new(&mut s, k.name(), k.raw_dim(cfg), cfg.context_dim, true)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { projections })
    }

    /// Projects and length-aligns every stream: `D^C_0` tensors of `t × D`.
    pub fn align(&self, bundle: &ContextBundle, t: usize) -> Result<Vec<Tensor>> {
        if bundle.streams.is_empty() {
            return Err(Error::Contract("empty context bundle".into()));
        }
        bundle
            .streams
            .iter()
            .map(|s| {
                let proj = self
                    .projections
                    .iter()
                    .find(|(k, _)| *k == s.kind)
                    .map(|(_, p)| p)
                    .ok_or_else(|| {
                        Error::Contract(format!("no projection for stream {}", s.kind.name()))
                    })?;
                let (_, cols) = s.data.dims2()?;
                if cols != proj.d_in() {
                    return Err(Error::Dimension {
                        op: "align_context",
                        lhs: s.data.shape().to_vec(),
                        rhs: vec![proj.d_in()],
                    });
                }
                align_length(&proj.forward(&s.data)?, t)
            })
            .collect()
    }
}

/// Stacks `D^C` tensors of `T × D` into one `T × D^C × D` array.
pub fn stack_context(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("empty context".into()))?;
    let (t, d) = first.dims2()?;
    let dc = parts.len();
    let mut out = vec![0.0; t * dc * d];
    for (c, p) in parts.iter().enumerate() {
        if p.dims2()? != (t, d) {
            return Err(Error::Dimension {
                op: "stack_context",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        let pd = p.data();
        for ti in 0..t {
            out[(ti * dc + c) * d..(ti * dc + c + 1) * d]
                .copy_from_slice(&pd[ti * d..(ti + 1) * d]);
        }
    }
    Tensor::new(&[t, dc, d], out)
}

const EMB_MAGIC: &[u8; 4] = b"CTXE";
pub const EMBEDDING_FILE_VERSION: u32 = 1;

pub fn write_embedding(path: &Path, t: &Tensor) -> Result<()> {
    let (rows, cols) = t.dims2()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(EMB_MAGIC)?;
    f.write_all(&EMBEDDING_FILE_VERSION.to_le_bytes())?;
    f.write_all(&(rows as u32).to_le_bytes())?;
    f.write_all(&(cols as u32).to_le_bytes())?;
    for v in t.data().iter() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_embedding(path: &Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut head = [0u8; 16];
    f.read_exact(&mut head)?;
    if &head[0..4] != EMB_MAGIC {
        return Err(Error::Format(format!(
            "{} is not an embedding file",
            path.display()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != EMBEDDING_FILE_VERSION {
        return Err(Error::Format(format!(
            "unsupported embedding file version {}",
            word(4)
        )));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let mut bytes = vec![0u8; rows * cols * 8];
    f.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&[rows, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(frames: usize, speaker: usize, id: usize, energy: f64) -> SyntheticUtterance {
        SyntheticUtterance {
            id,
            frames,
            feature_dim: 4,
            features: vec![energy.sqrt(); frames * 4],
            frame_labels: vec![1; frames],
            targets: vec![5],
            speaker_id: speaker,
            event_id: 1,
            language_id: 0,
        }
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn provider() -> SyntheticContext {
        SyntheticContext::new(&ModelConfig::default(), 11)
    }

    #[test]
    fn row_layout_matches_generated_streams() {
        let src = ContextSource::synthetic(provider());
        for frames in [1, 2, 7, 20] {
            let u = utt(frames, 0, 3, 1.0);
            for kind in StreamKind::ALL {
                let rows = src.stream(&u, kind).unwrap().shape()[0];
                assert_eq!(
                    rows,
                    SyntheticContext::rows(kind, frames),
                    "{kind:?} {frames}"
                );
            }
        }
    }

    #[test]
    fn speaker_embeddings_cluster_by_speaker() {
        let p = provider();
        let a = p.make_speaker_context(&utt(4, 3, 0, 1.0)).unwrap().to_vec();
        let b = p.make_speaker_context(&utt(4, 3, 1, 1.0)).unwrap().to_vec();
        assert!(cos(&a, &b) > 0.99);
        let basis = p.speaker_basis(3);
        let norm: f64 = basis.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn different_speakers_are_nearly_orthogonal_on_average() {
        let p = SyntheticContext {
            speaker_dim: 256,
            ..provider()
        };
        let n = 40;
        let mut total = 0.0;
        for i in 0..n {
            total += cos(&p.speaker_basis(i), &p.speaker_basis(i + n));
        }
        // Random unit vectors in 256 dims: cosine has sd 1/16, mean over 40 pairs sd 0.01.
        assert!((total / n as f64).abs() < 0.05);
    }

    #[test]
    fn event_stream_halves_length() {
        let p = provider();
        let e = p.make_event_context(&utt(10, 0, 0, 1.0)).unwrap();
        assert_eq!(e.shape(), &[5, p.event_dim]);
        let e = p.make_event_context(&utt(1, 0, 0, 1.0)).unwrap();
        assert_eq!(e.shape()[0], 1);
    }

    #[test]
    fn silent_event_stream_is_near_zero() {
        let p = provider();
        let e = p.make_event_context(&utt(10, 0, 0, 0.0)).unwrap();
        assert!(e.to_vec().iter().all(|v| v.abs() < 0.2));
    }

    #[test]
    fn lang_vectors_distinct_and_stable() {
        let p = provider();
        let vs: Vec<Vec<f64>> = (0..p.n_languages)
            .map(|l| p.make_lang_vector(l).unwrap().to_vec())
            .collect();
        for v in &vs {
            assert_eq!(v.len(), p.lang_dim);
            assert!(v.iter().all(|x| *x == 0.0 || *x == 1.0));
        }
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                let ham = vs[i].iter().zip(&vs[j]).filter(|(a, b)| a != b).count();
                assert!(ham >= 1);
            }
        }
        assert_eq!(p.make_lang_vector(1).unwrap().to_vec(), vs[1]);
        assert!(matches!(p.make_lang_vector(99), Err(Error::Parameter(_))));
    }

    #[test]
    fn align_length_rules() {
        let one = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let a = align_length(&one, 5).unwrap();
        assert_eq!(a.to_vec(), [1.0, 2.0].repeat(5));
        let eight = Tensor::new(&[8, 1], (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(
            align_length(&eight, 5).unwrap().to_vec(),
            vec![0.0, 1.0, 2.0, 3.0, 4.0]
        );
        assert_eq!(align_length(&eight, 8).unwrap().to_vec(), eight.to_vec());
        assert!(matches!(
            align_length(&Tensor::zeros(&[0, 2]), 3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn context_config_parses_table_grid() {
        for s in [
            "front",
            "front+spk",
            "front+event",
            "front+spk+event",
            "lang2vec",
            "front+event+lang2vec",
        ] {
            let c: ContextConfig = s.parse().unwrap();
            assert_eq!(c.to_string(), s);
        }
        assert!("front+mfcc".parse::<ContextConfig>().is_err());
        assert!("spk+spk".parse::<ContextConfig>().is_err());
    }

    #[test]
    fn embedding_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_rows(&[vec![1.5, -2.0, 3.25]]).unwrap();
        let path = dir.path().join("0.spk.bin");
        write_embedding(&path, &t).unwrap();
        assert_eq!(read_embedding(&path).unwrap().to_vec(), t.to_vec());

        let src = ContextSource {
            synthetic: provider(),
            dir: Some(dir.path().to_path_buf()),
        };
        let loaded = src.stream(&utt(4, 0, 0, 1.0), StreamKind::Spk).unwrap();
        assert_eq!(loaded.to_vec(), t.to_vec());
    }

    #[test]
    fn stacking_interleaves_streams() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let s = stack_context(&[a, b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.to_vec(), vec![1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
    }
}
