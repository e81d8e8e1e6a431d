//! Conversation corpus: JSONL loading/saving and a synthetic generator.
//!
//! One JSON object per line describes a conversation. An optional first
//! line without an `id` field is a header carrying label names, the
//! neutral class index, and the vocabulary size; without it, label names
//! are generic and the vocabulary is inferred from the data.
//!
//! The generator plants recoverable structure: a class marker token at
//! the front of every emotional utterance, a class event token inside the
//! cause utterance, and class-specific shifts on the audio and vision
//! features of both. Same-class event tokens are kept far enough apart
//! that the cause of an emotion is unambiguous within its offset range.

use std::io::{BufRead, BufReader, Write};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::SynthConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub tokens: Vec<usize>,
    /// `audio_len × audio_dim` feature rows.
    pub audio: Array2<f64>,
    /// `vision_len × vision_dim` feature rows.
    pub vision: Array2<f64>,
    pub emotion: usize,
    /// Index of the utterance that caused this emotion, when annotated.
    pub cause_id: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub split: Split,
    pub utterances: Vec<Utterance>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub conversations: Vec<Conversation>,
    pub label_names: Vec<String>,
    pub neutral_index: usize,
    pub vocab_size: usize,
    pub audio_dim: usize,
    pub vision_dim: usize,
}

impl Corpus {
    pub fn by_split(&self, split: Split) -> Vec<&Conversation> {
        self.conversations
            .iter()
            .filter(|c| c.split == split)
            .collect()
    }

    pub fn n_labels(&self) -> usize {
        self.label_names.len()
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderRow {
    label_names: Vec<String>,
    neutral_index: usize,
    vocab_size: usize,
}

#[derive(Serialize, Deserialize)]
struct UtteranceRow {
    tokens: Vec<usize>,
    audio: Vec<Vec<f64>>,
    vision: Vec<Vec<f64>>,
    emotion: usize,
    cause_id: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct ConversationRow {
    id: String,
    split: Split,
    utterances: Vec<UtteranceRow>,
}

fn rows_to_array(rows: &[Vec<f64>], what: &str, line: usize) -> Result<Array2<f64>> {
    if rows.is_empty() {
        return Err(Error::Corpus {
            line,
            msg: format!("{what} features are empty"),
        });
    }
    let width = rows[0].len();
    if width == 0 {
        return Err(Error::Corpus {
            line,
            msg: format!("{what} feature rows are zero-width"),
        });
    }
    let mut out = Array2::zeros((rows.len(), width));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(Error::Corpus {
                line,
                msg: format!("{what} row {i} has width {}, expected {width}", row.len()),
            });
        }
        for (j, &v) in row.iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

fn array_to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn save_jsonl(corpus: &Corpus, path: &str) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let header = HeaderRow {
        label_names: corpus.label_names.clone(),
        neutral_index: corpus.neutral_index,
        vocab_size: corpus.vocab_size,
    };
    let mut emit = |line: String| -> Result<()> {
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))
    };
    emit(serde_json::to_string(&header)?)?;
    for conv in &corpus.conversations {
        let row = ConversationRow {
            id: conv.id.clone(),
            split: conv.split,
            utterances: conv
                .utterances
                .iter()
                .map(|u| UtteranceRow {
                    tokens: u.tokens.clone(),
                    audio: array_to_rows(&u.audio),
                    vision: array_to_rows(&u.vision),
                    emotion: u.emotion,
                    cause_id: u.cause_id,
                })
                .collect(),
        };
        emit(serde_json::to_string(&row)?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: &str) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut header: Option<HeaderRow> = None;
    let mut conversations = Vec::new();
    let mut max_token = 0usize;
    let mut max_emotion = 0usize;
    let mut audio_dim = 0usize;
    let mut vision_dim = 0usize;

    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Corpus {
            line: lineno,
            msg: e.to_string(),
        })?;
        let is_header = value.get("id").is_none();
        if is_header {
            if idx != 0 {
                return Err(Error::Corpus {
                    line: lineno,
                    msg: "header row allowed only as the first line".into(),
                });
            }
            header = Some(serde_json::from_value(value).map_err(|e| Error::Corpus {
                line: lineno,
                msg: format!("bad header: {e}"),
            })?);
            continue;
        }
        let row: ConversationRow = serde_json::from_value(value).map_err(|e| Error::Corpus {
            line: lineno,
            msg: e.to_string(),
        })?;
        if row.utterances.is_empty() {
            return Err(Error::Corpus {
                line: lineno,
                msg: format!("conversation {} has no utterances", row.id),
            });
        }
        let n = row.utterances.len();
        let mut utterances = Vec::with_capacity(n);
        for (ui, u) in row.utterances.into_iter().enumerate() {
            if let Some(c) = u.cause_id {
                if c >= n {
                    return Err(Error::Corpus {
                        line: lineno,
                        msg: format!(
                            "utterance {ui} cause_id {c} outside conversation of {n}"
                        ),
                    });
                }
            }
            for &t in &u.tokens {
                max_token = max_token.max(t);
            }
            max_emotion = max_emotion.max(u.emotion);
            let audio = rows_to_array(&u.audio, "audio", lineno)?;
            let vision = rows_to_array(&u.vision, "vision", lineno)?;
            if audio_dim == 0 {
                audio_dim = audio.ncols();
            } else if audio.ncols() != audio_dim {
                return Err(Error::Corpus {
                    line: lineno,
                    msg: format!(
                        "audio width {} differs from corpus width {audio_dim}",
                        audio.ncols()
                    ),
                });
            }
            if vision_dim == 0 {
                vision_dim = vision.ncols();
            } else if vision.ncols() != vision_dim {
                return Err(Error::Corpus {
                    line: lineno,
                    msg: format!(
                        "vision width {} differs from corpus width {vision_dim}",
                        vision.ncols()
                    ),
                });
            }
            utterances.push(Utterance {
                tokens: u.tokens,
                audio,
                vision,
                emotion: u.emotion,
                cause_id: u.cause_id,
            });
        }
        conversations.push(Conversation {
            id: row.id,
            split: row.split,
            utterances,
        });
    }

    if conversations.is_empty() {
        return Err(Error::Corpus {
            line: 0,
            msg: "no conversations in file".into(),
        });
    }

    let (label_names, neutral_index, vocab_size) = match header {
        Some(h) => {
            if h.neutral_index >= h.label_names.len() {
                return Err(Error::Corpus {
                    line: 1,
                    msg: "header neutral_index outside label_names".into(),
                });
            }
            if h.vocab_size <= max_token {
                return Err(Error::Corpus {
                    line: 1,
                    msg: format!(
                        "header vocab_size {} but token {max_token} appears",
                        h.vocab_size
                    ),
                });
            }
            (h.label_names, h.neutral_index, h.vocab_size)
        }
        None => {
            let names = (0..=max_emotion).map(|i| format!("label_{i}")).collect();
            (names, 0, max_token + 1)
        }
    };
    let n_labels: usize = label_names.len();
    for conv in &conversations {
        for (ui, u) in conv.utterances.iter().enumerate() {
            if u.emotion >= n_labels {
                return Err(Error::Corpus {
                    line: 0,
                    msg: format!(
                        "conversation {} utterance {ui} emotion {} outside {n_labels} labels",
                        conv.id, u.emotion
                    ),
                });
            }
        }
    }

    Ok(Corpus {
        conversations,
        label_names,
        neutral_index,
        vocab_size,
        audio_dim,
        vision_dim,
    })
}

/// Token layout the generator plants, exposed so tests can verify that
/// planted structure determines the labels.
pub struct TokenScheme {
    pub n_filler: usize,
    /// Marker token per non-neutral class slot.
    pub markers: Vec<usize>,
    /// Event token per non-neutral class slot.
    pub events: Vec<usize>,
    /// Emotion id for each non-neutral class slot.
    pub class_emotions: Vec<usize>,
}

impl TokenScheme {
    pub fn new(cfg: &SynthConfig) -> TokenScheme {
        let k = cfg.n_emotions - 1;
        let n_filler = cfg.vocab_size - 2 * k;
        let markers = (0..k).map(|c| n_filler + 2 * c).collect();
        let events = (0..k).map(|c| n_filler + 2 * c + 1).collect();
        let class_emotions = (0..k)
            .map(|c| if c < cfg.neutral_index { c } else { c + 1 })
            .collect();
        TokenScheme {
            n_filler,
            markers,
            events,
            class_emotions,
        }
    }
}

const EMOTION_NAMES: [&str; 8] = [
    "joy", "sadness", "anger", "fear", "surprise", "disgust", "excited", "frustrated",
];

fn label_names(n_emotions: usize, neutral_index: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(n_emotions);
    let mut next = 0usize;
    for i in 0..n_emotions {
        if i == neutral_index {
            names.push("neutral".to_string());
        } else {
            let name = EMOTION_NAMES
                .get(next)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("emotion_{next}"));
            names.push(name);
            next += 1;
        }
    }
    names
}

/// Fixed per-class feature shift, independent of the corpus seed. `salt`
/// separates the emotion-site pattern from the cause-site pattern.
fn class_shift(class: usize, dim: usize, salt: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + salt * 1000 + class as u64);
    (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

/// Smooth signature of the absolute utterance index, added to every
/// feature row so position is recoverable from the features alone.
fn position_signature(index: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|k| 0.8 * ((index + 1) as f64 * (k + 1) as f64 * 0.7).sin())
        .collect()
}

fn feature_block(
    rng: &mut ChaCha8Rng,
    rows: usize,
    dim: usize,
    noise_std: f64,
    index: usize,
    shift: Option<&[f64]>,
) -> Array2<f64> {
    let noise = Normal::new(0.0, noise_std).expect("std must be finite");
    let sig = position_signature(index, dim);
    let mut out = Array2::zeros((rows, dim));
    for i in 0..rows {
        for j in 0..dim {
            let mut v = noise.sample(rng) + sig[j];
            if let Some(s) = shift {
                v += s[j];
            }
            out[(i, j)] = v;
        }
    }
    out
}

/// Generate a corpus as a pure function of the config.
pub fn generate(cfg: &SynthConfig) -> Corpus {
    let scheme = TokenScheme::new(cfg);
    let k = scheme.markers.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // same-class events this close or closer would make causes ambiguous
    let min_event_gap = 2 * cfg.cause_offset_range + 1;

    let mut conversations = Vec::with_capacity(cfg.conversations);
    for ci in 0..cfg.conversations {
        let n = rng.gen_range(cfg.min_utterances..=cfg.max_utterances);
        // class hosted by each utterance's event token, if any
        let mut host: Vec<Option<usize>> = vec![None; n];
        let mut emotions: Vec<usize> = vec![cfg.neutral_index; n];
        let mut causes: Vec<Option<usize>> = vec![None; n];

        // Emotions arrive in runs: an event utterance opens a run of its
        // class, and following utterances keep that emotion (pointing back
        // at the event) while the event stays within the offset range.
        let mut run: Option<(usize, usize)> = None;
        for i in 0..n {
            if let Some((c, j)) = run {
                if i - j <= cfg.cause_offset_range && rng.gen_bool(cfg.emotion_inertia) {
                    emotions[i] = scheme.class_emotions[c];
                    causes[i] = Some(j);
                    continue;
                }
                run = None;
            }
            if rng.gen_range(0.0..1.0) >= cfg.emotion_density {
                continue;
            }
            // classes whose previous event sits too close would make the
            // new cause ambiguous from the inputs
            let eligible: Vec<usize> = (0..k)
                .filter(|&c| {
                    host.iter()
                        .enumerate()
                        .all(|(j2, h)| *h != Some(c) || i - j2 >= min_event_gap)
                })
                .collect();
            if let Some(&c) = eligible.as_slice().choose(&mut rng) {
                host[i] = Some(c);
                emotions[i] = scheme.class_emotions[c];
                causes[i] = Some(i);
                run = Some((c, i));
            }
        }
        if !emotions.iter().any(|&e| e != cfg.neutral_index) {
            // every conversation carries at least one emotion-cause pair
            let c = rng.gen_range(0..k);
            host[0] = Some(c);
            emotions[0] = scheme.class_emotions[c];
            causes[0] = Some(0);
        }

        let mut utterances = Vec::with_capacity(n);
        for i in 0..n {
            let mut tokens: Vec<usize> = (0..cfg.tokens_per_utterance)
                .map(|_| rng.gen_range(0..scheme.n_filler))
                .collect();
            let emo = emotions[i];
            if emo != cfg.neutral_index {
                let c = scheme.class_emotions.iter().position(|&e| e == emo).unwrap();
                tokens[0] = scheme.markers[c];
            }
            if let Some(c) = host[i] {
                tokens[1] = scheme.events[c];
            }
            let emo_shift = (emo != cfg.neutral_index).then(|| {
                let c = scheme.class_emotions.iter().position(|&e| e == emo).unwrap();
                (class_shift(c, cfg.audio_dim, 1), class_shift(c, cfg.vision_dim, 2))
            });
            let cause_shift = host[i].map(|c| {
                (class_shift(c, cfg.audio_dim, 3), class_shift(c, cfg.vision_dim, 4))
            });
            let combine = |a: Option<&[f64]>, b: Option<&[f64]>, dim: usize| -> Option<Vec<f64>> {
                if a.is_none() && b.is_none() {
                    return None;
                }
                let mut out = vec![0.0; dim];
                for s in [a, b].into_iter().flatten() {
                    for (o, v) in out.iter_mut().zip(s) {
                        *o += v;
                    }
                }
                Some(out)
            };
            let audio_shift = combine(
                emo_shift.as_ref().map(|s| s.0.as_slice()),
                cause_shift.as_ref().map(|s| s.0.as_slice()),
                cfg.audio_dim,
            );
            let vision_shift = combine(
                emo_shift.as_ref().map(|s| s.1.as_slice()),
                cause_shift.as_ref().map(|s| s.1.as_slice()),
                cfg.vision_dim,
            );
            let audio = feature_block(
                &mut rng,
                cfg.audio_len,
                cfg.audio_dim,
                cfg.noise_std,
                i,
                audio_shift.as_deref(),
            );
            let vision = feature_block(
                &mut rng,
                cfg.vision_len,
                cfg.vision_dim,
                cfg.noise_std,
                i,
                vision_shift.as_deref(),
            );
            utterances.push(Utterance {
                tokens,
                audio,
                vision,
                emotion: emo,
                cause_id: causes[i],
            });
        }
        conversations.push(Conversation {
            id: format!("conv_{ci:04}"),
            split: Split::Train,
            utterances,
        });
    }

    // split assignment by shuffled conversation index
    let mut order: Vec<usize> = (0..cfg.conversations).collect();
    order.shuffle(&mut rng);
    let n_train = (cfg.train_fraction * cfg.conversations as f64).round() as usize;
    let n_valid = (cfg.valid_fraction * cfg.conversations as f64).round() as usize;
    for (pos, &ci) in order.iter().enumerate() {
        conversations[ci].split = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }

    Corpus {
        conversations,
        label_names: label_names(cfg.n_emotions, cfg.neutral_index),
        neutral_index: cfg.neutral_index,
        vocab_size: cfg.vocab_size,
        audio_dim: cfg.audio_dim,
        vision_dim: cfg.vision_dim,
    }
}
