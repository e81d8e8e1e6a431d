//! Causal prompt construction.
//!
//! Every utterance is wrapped in the same template, e.g.
//! `for conversation , the emotion category of [X] is [M1] , the reason
//! for this emotion is [M2]`. `[X]` is a fixed-width span holding the
//! utterance content (tokens for the text branch, aligned feature rows
//! for audio and vision), `[M1]` is the emotion mask slot and `[M2]` the
//! cause mask slot. All three modality branches share the template word
//! and mask-token embeddings; they differ only in what fills `[X]`.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorRef};

/// Token ids: corpus tokens keep their own ids, specials and template
/// words are appended after them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub corpus_vocab: usize,
    pub pad: usize,
    pub m1: usize,
    pub m2: usize,
    /// Template word ids, ordered for deterministic serialization.
    pub words: BTreeMap<String, usize>,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Segment {
    Words(Vec<usize>),
    XSlot,
    M1Slot,
    M2Slot,
}

/// Parsed template plus derived positions. The prompt length is fixed per
/// configuration, so every utterance produces the same shape.
#[derive(Clone, Debug)]
pub struct PromptLayout {
    pub vocab: Vocab,
    pub x_capacity: usize,
    /// Total prompt length in token positions.
    pub len: usize,
    /// First position of the `[X]` span; the span is `x_start .. x_start + x_capacity`.
    pub x_start: usize,
    pub m1_pos: usize,
    pub m2_pos: usize,
    segments: Vec<Segment>,
}

impl PromptLayout {
    pub fn build(template: &str, x_capacity: usize, corpus_vocab: usize) -> Result<PromptLayout> {
        let pad = corpus_vocab;
        let m1 = corpus_vocab + 1;
        let m2 = corpus_vocab + 2;
        let mut words: BTreeMap<String, usize> = BTreeMap::new();
        let mut next_id = corpus_vocab + 3;

        let mut segments: Vec<Segment> = Vec::new();
        let mut counts = (0usize, 0usize, 0usize);
        for piece in template.split_whitespace() {
            let seg = match piece {
                "[X]" => {
                    counts.0 += 1;
                    Segment::XSlot
                }
                "[M1]" => {
                    counts.1 += 1;
                    Segment::M1Slot
                }
                "[M2]" => {
                    counts.2 += 1;
                    Segment::M2Slot
                }
                word => {
                    let id = *words.entry(word.to_string()).or_insert_with(|| {
                        let id = next_id;
                        next_id += 1;
                        id
                    });
                    if let Some(Segment::Words(ids)) = segments.last_mut() {
                        ids.push(id);
                        continue;
                    }
                    Segment::Words(vec![id])
                }
            };
            segments.push(seg);
        }
        if counts != (1, 1, 1) {
            return Err(Error::Config(format!(
                "template must contain [X], [M1], [M2] exactly once (found {}, {}, {})",
                counts.0, counts.1, counts.2
            )));
        }

        let mut pos = 0usize;
        let (mut x_start, mut m1_pos, mut m2_pos) = (0usize, 0usize, 0usize);
        for seg in &segments {
            match seg {
                Segment::Words(ids) => pos += ids.len(),
                Segment::XSlot => {
                    x_start = pos;
                    pos += x_capacity;
                }
                Segment::M1Slot => {
                    m1_pos = pos;
                    pos += 1;
                }
                Segment::M2Slot => {
                    m2_pos = pos;
                    pos += 1;
                }
            }
        }

        Ok(PromptLayout {
            vocab: Vocab {
                corpus_vocab,
                pad,
                m1,
                m2,
                words,
                size: next_id,
            },
            x_capacity,
            len: pos,
            x_start,
            m1_pos,
            m2_pos,
            segments,
        })
    }

    /// Token ids and key-validity for one utterance's prompt. Utterance
    /// tokens are right-truncated to the span capacity; shorter spans are
    /// filled with padding, which is the only invalid key position.
    pub fn tokens_for(&self, utterance: &[usize]) -> (Vec<usize>, Vec<bool>) {
        let mut ids = Vec::with_capacity(self.len);
        let mut valid = Vec::with_capacity(self.len);
        for seg in &self.segments {
            match seg {
                Segment::Words(ws) => {
                    ids.extend_from_slice(ws);
                    valid.extend(std::iter::repeat(true).take(ws.len()));
                }
                Segment::XSlot => {
                    for k in 0..self.x_capacity {
                        match utterance.get(k) {
                            Some(&t) => {
                                debug_assert!(t < self.vocab.corpus_vocab);
                                ids.push(t);
                                valid.push(true);
                            }
                            None => {
                                ids.push(self.vocab.pad);
                                valid.push(false);
                            }
                        }
                    }
                }
                Segment::M1Slot => {
                    ids.push(self.vocab.m1);
                    valid.push(true);
                }
                Segment::M2Slot => {
                    ids.push(self.vocab.m2);
                    valid.push(true);
                }
            }
        }
        (ids, valid)
    }
}

/// Mean-pooling buckets that shrink `rows` feature rows to `capacity`:
/// bucket `k` covers rows `floor(k*rows/cap) .. floor((k+1)*rows/cap)`.
pub fn pool_buckets(rows: usize, capacity: usize) -> Vec<(usize, usize)> {
    debug_assert!(rows >= capacity && capacity > 0);
    (0..capacity)
        .map(|k| (k * rows / capacity, (k + 1) * rows / capacity))
        .collect()
}

/// Matrix form of [`pool_buckets`]: `capacity × rows`, each row averaging
/// one bucket.
fn pool_matrix(rows: usize, capacity: usize) -> Array2<f64> {
    let mut p = Array2::zeros((capacity, rows));
    for (k, (lo, hi)) in pool_buckets(rows, capacity).into_iter().enumerate() {
        let w = 1.0 / (hi - lo) as f64;
        for r in lo..hi {
            p[(k, r)] = w;
        }
    }
    p
}

/// Fit projected modality features into the `[X]` span: project to model
/// width, then mean-pool down or zero-pad up to the span capacity.
pub fn align_features(
    tape: &Tape,
    features: TensorRef,
    projection: TensorRef,
    capacity: usize,
) -> TensorRef {
    let rows = tape.shape(features).0;
    let projected = tape.matmul(features, projection);
    if rows > capacity {
        let p = tape.leaf(pool_matrix(rows, capacity));
        tape.matmul(p, projected)
    } else if rows == capacity {
        projected
    } else {
        let fill = tape.zeros(capacity - rows, tape.shape(projected).1);
        tape.concat_rows(&[projected, fill])
    }
}
