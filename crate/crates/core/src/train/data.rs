//! Synthetic speech-like tasks.
//!
//! Vocabulary layout for `n` languages:
//!
//! ```text
//! 0            end of sequence
//! 1 ..= n      start-of-sequence token of each target language
//! n+1 ..       content tokens; even offsets start a word, odd offsets continue one
//! ```
//!
//! Each content token is rendered as a 2-3 frame burst of a fixed ±1 pattern;
//! silence frames are low-level noise. A word is one word-initial token
//! followed by 0-2 continuation tokens whose identities are fixed by the
//! initial token, so only word starts and word boundaries have to be heard.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::context::SyntheticUtterance;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::RngState;

pub const EOS: usize = 0;

/// Shortest silence run inside an utterance.
pub const PAUSE_FRAMES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Targets are the spoken tokens.
    AsrLike,
    /// Targets are the spoken tokens mapped through a per-language permutation.
    StLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_languages: usize,
    pub n_speakers: usize,
    pub n_events: usize,
    /// Fraction of frames that are silence, drawn uniformly from this range.
    pub silence_ratio: (f64, f64),
    /// Words per utterance (inclusive range).
    pub words: (usize, usize),
    /// Maximum tokens per utterance.
    pub max_tokens: usize,
    pub speech_noise: f64,
    pub silence_noise: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::AsrLike,
            n_languages: 3,
            n_speakers: 8,
            n_events: 4,
            silence_ratio: (0.2, 0.4),
            words: (2, 3),
            max_tokens: 6,
            speech_noise: 0.1,
            silence_noise: 0.05,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (lo, hi) = self.silence_ratio;
        if !(0.0..1.0).contains(&lo) || !(0.0..1.0).contains(&hi) || lo > hi {
            return Err(Error::Parameter(format!(
                "silence ratio range ({lo}, {hi}) invalid"
            )));
        }
        if self.words.0 == 0 || self.words.0 > self.words.1 {
            return Err(Error::Parameter("word count range invalid".into()));
        }
        if self.n_languages != cfg.n_languages {
            return Err(Error::Parameter(
                "task and model disagree on the number of languages".into(),
            ));
        }
        if Vocab::new(cfg.vocab_size, self.n_languages).words() == 0 {
            return Err(Error::Parameter(
                "vocabulary leaves no word-initial tokens".into(),
            ));
        }
        let worst = self.max_tokens * 3;
        let frames = (worst as f64 / (1.0 - hi)).ceil() as usize + 1;
        if frames > cfg.max_frames {
            return Err(Error::Parameter(format!(
                "utterances can reach {frames} frames, above max_frames {}",
                cfg.max_frames
            )));
        }
        Ok(())
    }
}

/// Token id helpers for the layout above.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub size: usize,
    pub n_languages: usize,
}

impl Vocab {
    pub fn new(size: usize, n_languages: usize) -> Self {
        Self { size, n_languages }
    }

    pub fn bos(&self, language_id: usize) -> usize {
        1 + language_id
    }

    pub fn first_content(&self) -> usize {
        1 + self.n_languages
    }

    pub fn is_content(&self, id: usize) -> bool {
        id >= self.first_content() && id < self.size
    }

    /// Number of word-initial tokens (the same as continuation tokens).
    pub fn words(&self) -> usize {
        self.size.saturating_sub(self.first_content()) / 2
    }

    pub fn word_initial(&self, k: usize) -> usize {
        self.first_content() + 2 * k
    }

    pub fn continuation(&self, k: usize) -> usize {
        self.first_content() + 2 * k + 1
    }

    /// Surface form; word-initial tokens carry a leading space.
    pub fn surface(&self, id: usize) -> String {
        if id == EOS {
            "</s>".into()
        } else if id < self.first_content() {
            format!("<lang{}>", id - 1)
        } else if (id - self.first_content()).is_multiple_of(2) {
            format!(" t{id}")
        } else {
            format!("t{id}")
        }
    }
}

/// Word-initial tokens are exactly the surfaces that begin with a space.
pub fn starts_word(surface: &str) -> bool {
    surface.starts_with(' ')
}

fn shuffle(v: &mut [usize], rng: &mut RngState) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Generates `n` utterances; identical arguments give identical data.
pub fn generate_dataset(
    task: &TaskSpec,
    cfg: &ModelConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<SyntheticUtterance>> {
    if n == 0 {
        return Err(Error::Parameter("dataset size must be at least 1".into()));
    }
    task.validate(cfg)?;
    let vocab = Vocab::new(cfg.vocab_size, task.n_languages);
    let n_words = vocab.words();
    let f = cfg.feature_dim;
    let root = RngState::new(seed);

    // Fixed per-task structure: token patterns, continuation chains, language maps.
    let mut srng = root.fork(0x5354_5255);
    let patterns: Vec<Vec<f64>> = (0..cfg.vocab_size)
        .map(|_| {
            (0..2 * f)
                .map(|_| if srng.uniform() < 0.5 { -1.0 } else { 1.0 })
                .collect()
        })
        .collect();
    let chains: Vec<[usize; 2]> = (0..n_words)
        .map(|_| [srng.random_range(0..n_words), srng.random_range(0..n_words)])
        .collect();
    let maps: Vec<(Vec<usize>, Vec<usize>)> = (0..task.n_languages)
        .map(|l| {
            let mut a: Vec<usize> = (0..n_words).collect();
            let mut b = a.clone();
            if task.kind == TaskKind::StLike && l > 0 {
                shuffle(&mut a, &mut srng);
                shuffle(&mut b, &mut srng);
            }
            (a, b)
        })
        .collect();
    let speech = Normal::new(0.0, task.speech_noise.max(1e-12)).expect("finite noise");
    let silence = Normal::new(0.0, task.silence_noise.max(1e-12)).expect("finite noise");

    (0..n)
        .map(|id| {
            let mut rng = root.fork(id as u64 + 1);
            let language_id = rng.random_range(0..task.n_languages);
            let speaker_id = rng.random_range(0..task.n_speakers.max(1));
            let event_id = rng.random_range(0..task.n_events.max(1));

            let mut spoken: Vec<(usize, usize, bool)> = Vec::new();
            let words = rng.random_range(task.words.0..=task.words.1);
            for _ in 0..words {
                let w = rng.random_range(0..n_words);
                let conts = rng.random_range(0..=2usize);
                if spoken.len() + 1 + conts > task.max_tokens && !spoken.is_empty() {
                    break;
                }
                spoken.push((vocab.word_initial(w), w, true));
                for c in chains[w].iter().take(conts) {
                    spoken.push((vocab.continuation(*c), *c, false));
                }
            }
            spoken.truncate(task.max_tokens.max(1));
            let targets: Vec<usize> = spoken
                .iter()
                .map(|&(_, k, initial)| {
                    let (a, b) = &maps[language_id];
                    if initial {
                        vocab.word_initial(a[k])
                    } else {
                        vocab.continuation(b[k])
                    }
                })
                .collect();

            let spans: Vec<usize> = spoken
                .iter()
                .map(|_| rng.random_range(2..=3usize))
                .collect();
            let speech_frames: usize = spans.iter().sum();
            let ratio = if task.silence_ratio.1 > task.silence_ratio.0 {
                rng.random_range(task.silence_ratio.0..task.silence_ratio.1)
            } else {
                task.silence_ratio.0
            };
            let silent = (ratio * speech_frames as f64 / (1.0 - ratio)).round() as usize;
            // Pauses fall at the utterance edges and between words only.
            let slots: Vec<usize> = std::iter::once(0)
                .chain((1..spoken.len()).filter(|&i| spoken[i].2))
                .chain(std::iter::once(spoken.len()))
                .collect();
            // Silence comes in runs of at least PAUSE_FRAMES frames.
            let mut gaps = vec![0usize; spoken.len() + 1];
            let runs = silent / PAUSE_FRAMES;
            for r in 0..runs {
                let extra = if r == 0 { silent % PAUSE_FRAMES } else { 0 };
                gaps[slots[rng.random_range(0..slots.len())]] += PAUSE_FRAMES + extra;
            }
            if runs == 0 && silent > 0 {
                gaps[slots[rng.random_range(0..slots.len())]] += silent;
            }
            let gain = 0.8
                + 0.4
                    * RngState::new(seed ^ 0x5350)
                        .fork(speaker_id as u64)
                        .uniform();

            let mut features = Vec::new();
            let mut labels = Vec::new();
            let push_silence =
                |k: usize, features: &mut Vec<f64>, labels: &mut Vec<u8>, rng: &mut RngState| {
                    for _ in 0..k {
                        features.extend((0..f).map(|_| silence.sample(rng)));
                        labels.push(0);
                    }
                };
            for (i, &(tok, _, _)) in spoken.iter().enumerate() {
                push_silence(gaps[i], &mut features, &mut labels, &mut rng);
                for j in 0..spans[i] {
                    let row = &patterns[tok][(j % 2) * f..(j % 2 + 1) * f];
                    features.extend(row.iter().map(|p| gain * p + speech.sample(&mut rng)));
                    labels.push(1);
                }
            }
            push_silence(gaps[spoken.len()], &mut features, &mut labels, &mut rng);

            Ok(SyntheticUtterance {
                id,
                frames: labels.len(),
                feature_dim: f,
                features,
                frame_labels: labels,
                targets,
                speaker_id,
                event_id,
                language_id,
            })
        })
        .collect()
}
