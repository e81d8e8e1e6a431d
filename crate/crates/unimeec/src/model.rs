//! Full model assembly: encoder branches, context graph, and the two
//! classification heads, with prediction helpers.
//!
//! The emotion head scores every emotion class; the cause head scores
//! absolute utterance positions up to the configured conversation cap.
//! Positions at or beyond the current conversation length are excluded
//! from the softmax, so their probability is exactly zero.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::corpus::{Corpus, Utterance};
use crate::encoder::{init_params as init_encoder, Encoder, ModelDims, TrainNoise};
use crate::error::{Error, Result};
use crate::metrics::{argmax, UttOutcome};
use crate::prompt::PromptLayout;
use crate::tensor::{ParamStore, Session, TensorRef};
use crate::thc::{init_params as init_thc, Thc};

/// Logits for one conversation: one row per utterance.
pub struct ConvLogits {
    /// `V × n_emotions`.
    pub emotion: TensorRef,
    /// `V × max_conv_len`; only the first `V` columns are meaningful.
    pub cause: TensorRef,
}

pub struct Model {
    pub cfg: Config,
    pub layout: PromptLayout,
    pub dims: ModelDims,
    pub store: ParamStore,
    pub labels: Vec<String>,
    pub neutral_index: usize,
}

impl Model {
    /// Build a freshly initialized model sized to a corpus.
    pub fn new(cfg: &Config, corpus: &Corpus) -> Result<Model> {
        if corpus.n_labels() != cfg.model.n_emotions {
            return Err(Error::Config(format!(
                "corpus has {} labels but model expects {}",
                corpus.n_labels(),
                cfg.model.n_emotions
            )));
        }
        if corpus.neutral_index != cfg.model.neutral_index {
            return Err(Error::Config(format!(
                "corpus neutral index {} differs from model {}",
                corpus.neutral_index, cfg.model.neutral_index
            )));
        }
        for conv in &corpus.conversations {
            if conv.utterances.len() > cfg.model.max_conv_len {
                return Err(Error::Config(format!(
                    "conversation {} has {} utterances, cap is {}",
                    conv.id,
                    conv.utterances.len(),
                    cfg.model.max_conv_len
                )));
            }
        }
        let dims = ModelDims {
            corpus_vocab: corpus.vocab_size,
            audio_dim: corpus.audio_dim,
            vision_dim: corpus.vision_dim,
        };
        Ok(Model::from_parts(
            cfg.clone(),
            dims,
            corpus.label_names.clone(),
            corpus.neutral_index,
        )?)
    }

    /// Build from explicit dimensions (used by checkpoint loading and
    /// gradient checking).
    pub fn from_parts(
        cfg: Config,
        dims: ModelDims,
        labels: Vec<String>,
        neutral_index: usize,
    ) -> Result<Model> {
        cfg.validate()?;
        let layout = PromptLayout::build(&cfg.prompt.template, cfg.prompt.x_capacity, dims.corpus_vocab)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        init_encoder(&mut store, &cfg.model, &layout, &dims, &mut rng);
        init_thc(&mut store, &cfg.thc, cfg.model.d_model, &mut rng);
        let d = cfg.model.d_model;
        store.insert(
            "heads.emotion.w",
            crate::encoder::init_matrix(&mut rng, d, cfg.model.n_emotions),
        );
        store.insert("heads.emotion.b", Array2::zeros((1, cfg.model.n_emotions)));
        store.insert(
            "heads.cause.w",
            crate::encoder::init_matrix(&mut rng, d, cfg.model.max_conv_len),
        );
        store.insert("heads.cause.b", Array2::zeros((1, cfg.model.max_conv_len)));
        Ok(Model {
            cfg,
            layout,
            dims,
            store,
            labels,
            neutral_index,
        })
    }

    /// Forward one conversation to logits on the session's tape.
    pub fn forward(
        &self,
        sess: &Session,
        utterances: &[Utterance],
        noise: &mut Option<TrainNoise>,
    ) -> ConvLogits {
        let encoder = Encoder {
            cfg: &self.cfg.model,
            abl: &self.cfg.ablation,
            layout: &self.layout,
        };
        let fused = encoder.forward_conversation(sess, utterances, noise);
        let thc = Thc {
            cfg: &self.cfg.thc,
            abl: &self.cfg.ablation,
            d_model: self.cfg.model.d_model,
        };
        let slots = thc.forward(sess, &fused);
        let t = &sess.tape;
        let emotion = t.add_row(
            t.matmul(slots.m1, sess.param("heads.emotion.w")),
            sess.param("heads.emotion.b"),
        );
        let cause = t.add_row(
            t.matmul(slots.m2, sess.param("heads.cause.w")),
            sess.param("heads.cause.b"),
        );
        ConvLogits { emotion, cause }
    }

    /// Evaluate one conversation to concrete predictions.
    pub fn predict(&self, utterances: &[Utterance]) -> Vec<UttOutcome> {
        let sess = Session::new(&self.store);
        let logits = self.forward(&sess, utterances, &mut None);
        let emo = sess.tape.value(logits.emotion);
        let cause = sess.tape.value(logits.cause);
        let v = utterances.len();
        (0..v)
            .map(|i| {
                let emo_row: Vec<f64> = emo.row(i).to_vec();
                // cause classes beyond the conversation length are invalid
                let cause_row: Vec<f64> = cause.row(i).to_vec().into_iter().take(v).collect();
                UttOutcome {
                    gold_emotion: utterances[i].emotion,
                    pred_emotion: argmax(&emo_row),
                    gold_cause: utterances[i].cause_id,
                    pred_cause: argmax(&cause_row),
                }
            })
            .collect()
    }
}
