//! Training objective and optimization: the two mask-prediction losses,
//! a warmup/decay schedule, Adam with per-prefix learning rates, the
//! training loop, and a finite-difference gradient check over every
//! parameter entry.
//!
//! The emotion loss averages cross-entropy over all utterances; the
//! cause loss averages over utterances that carry a non-neutral emotion
//! with an annotated cause. The total is their plain sum.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::rc::Rc;

use crate::config::Config;
use crate::corpus::{Conversation, Corpus, Split, Utterance};
use crate::encoder::TrainNoise;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport, PairMode, UttOutcome};
use crate::model::{ConvLogits, Model};
use crate::tensor::{GradAccum, ParamStore, Session, TensorRef};

/// Summed (not averaged) losses for one conversation, with the counts
/// needed to average over a batch.
pub struct LossParts {
    pub merc_sum: TensorRef,
    pub merc_count: usize,
    pub mecpe_sum: Option<TensorRef>,
    pub mecpe_count: usize,
}

/// Cross-entropy sums for one conversation's logits.
pub fn conversation_loss(
    sess: &Session,
    logits: &ConvLogits,
    utterances: &[Utterance],
    neutral: usize,
    use_mecpe: bool,
) -> LossParts {
    let t = &sess.tape;
    let v = utterances.len();

    let emotion_targets: Rc<Vec<Option<usize>>> =
        Rc::new(utterances.iter().map(|u| Some(u.emotion)).collect());
    let n_emotions = t.shape(logits.emotion).1;
    let merc_sum = t.ce_rows_sum(logits.emotion, emotion_targets, n_emotions);

    let cause_targets: Vec<Option<usize>> = utterances
        .iter()
        .map(|u| {
            if use_mecpe && u.emotion != neutral {
                u.cause_id
            } else {
                None
            }
        })
        .collect();
    let mecpe_count = cause_targets.iter().filter(|c| c.is_some()).count();
    let mecpe_sum = (mecpe_count > 0)
        .then(|| t.ce_rows_sum(logits.cause, Rc::new(cause_targets), v));

    LossParts {
        merc_sum,
        merc_count: v,
        mecpe_sum,
        mecpe_count,
    }
}

/// Batch-averaged losses assembled on the tape: the emotion term, the
/// cause term (when any row carries one), and their sum.
pub struct BatchLoss {
    pub l_merc: TensorRef,
    pub l_mecpe: Option<TensorRef>,
    pub total: TensorRef,
    pub merc_count: usize,
    pub mecpe_count: usize,
}

pub fn batch_loss(sess: &Session, parts: &[LossParts]) -> BatchLoss {
    let t = &sess.tape;
    let merc_count: usize = parts.iter().map(|p| p.merc_count).sum();
    let mecpe_count: usize = parts.iter().map(|p| p.mecpe_count).sum();
    assert!(merc_count > 0, "batch without utterances");

    let mut merc = parts[0].merc_sum;
    for p in &parts[1..] {
        merc = t.add(merc, p.merc_sum);
    }
    let l_merc = t.scale(merc, 1.0 / merc_count as f64);

    let mut mecpe: Option<TensorRef> = None;
    for p in parts {
        if let Some(s) = p.mecpe_sum {
            mecpe = Some(match mecpe {
                Some(acc) => t.add(acc, s),
                None => s,
            });
        }
    }
    let l_mecpe = mecpe.map(|s| t.scale(s, 1.0 / mecpe_count as f64));
    // without cause rows the total IS the emotion loss, not a sum with 0
    let total = match l_mecpe {
        Some(m) => t.add(l_merc, m),
        None => l_merc,
    };
    BatchLoss {
        l_merc,
        l_mecpe,
        total,
        merc_count,
        mecpe_count,
    }
}

/// Linear warmup to the base rate, then linear decay to zero.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    /// Multiplier for 1-indexed step `t`, clamped to non-negative.
    pub fn factor(&self, t: usize) -> f64 {
        if self.warmup > 0 && t <= self.warmup {
            t as f64 / self.warmup as f64
        } else if self.total <= self.warmup {
            1.0
        } else {
            ((self.total as f64 - t as f64) / (self.total as f64 - self.warmup as f64)).max(0.0)
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with two learning-rate groups selected by parameter name prefix.
pub struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: usize,
    lr_encoder: f64,
    lr_rest: f64,
    schedule: Schedule,
}

impl Adam {
    pub fn new(store: &ParamStore, lr_encoder: f64, lr_rest: f64, schedule: Schedule) -> Adam {
        let zeros = |_: ()| -> Vec<Array2<f64>> {
            (0..store.len())
                .map(|i| Array2::zeros(store.value_at(i).dim()))
                .collect()
        };
        Adam {
            m: zeros(()),
            v: zeros(()),
            t: 0,
            lr_encoder,
            lr_rest,
            schedule,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Apply accumulated gradients. Fails without touching any weight if
    /// a gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, accum: &GradAccum) -> Result<()> {
        if let Some(name) = accum.find_non_finite(store) {
            return Err(Error::NonFiniteGradient {
                param: name.to_string(),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let factor = self.schedule.factor(self.t);
        for idx in 0..store.len() {
            if !store.trainable_at(idx) {
                continue;
            }
            let base = if store.name_at(idx).starts_with("encoder.") {
                self.lr_encoder
            } else {
                self.lr_rest
            };
            let lr = base * factor;
            let g = accum.at(idx);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let w = store.value_at_mut(idx);
            ndarray::Zip::from(w)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                });
        }
        Ok(())
    }
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub l_merc: f64,
    pub l_mecpe: f64,
}

pub struct Trainer {
    pub model: Model,
    opt: Adam,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// `total_steps` sizes the decay schedule; pass the planned number of
    /// optimizer steps (batches per epoch times epochs). The warmup span
    /// is the configured fraction of that plan.
    pub fn new(model: Model, total_steps: usize) -> Trainer {
        let tr = &model.cfg.train;
        let schedule = Schedule {
            warmup: (tr.warmup_fraction * total_steps as f64).round() as usize,
            total: total_steps,
        };
        let opt = Adam::new(&model.store, tr.lr_encoder, tr.lr_rest, schedule);
        let rng = ChaCha8Rng::seed_from_u64(tr.seed.wrapping_add(1));
        Trainer { model, opt, rng }
    }

    pub fn planned_steps(cfg: &Config, n_train: usize) -> usize {
        let bs = cfg.train.batch_size;
        cfg.train.epochs * n_train.div_ceil(bs)
    }

    /// One pass over the training conversations in a fresh shuffled
    /// order, stepping the optimizer once per batch.
    pub fn run_epoch(&mut self, train: &[&Conversation]) -> Result<EpochStats> {
        assert!(!train.is_empty(), "empty training split");
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);

        let mut merc_sum = 0.0;
        let mut merc_count = 0usize;
        let mut mecpe_sum = 0.0;
        let mut mecpe_count = 0usize;

        let bs = self.model.cfg.train.batch_size;
        let dropout = self.model.cfg.model.dropout;
        for chunk in order.chunks(bs) {
            let mut accum = GradAccum::new(&self.model.store);
            let batch;
            {
                let sess = Session::new(&self.model.store);
                let mut parts = Vec::with_capacity(chunk.len());
                for &ci in chunk {
                    let utts = &train[ci].utterances;
                    let mut noise = (dropout > 0.0).then_some(TrainNoise {
                        rng: &mut self.rng,
                        rate: dropout,
                    });
                    let logits = self.model.forward(&sess, utts, &mut noise);
                    parts.push(conversation_loss(
                        &sess,
                        &logits,
                        utts,
                        self.model.neutral_index,
                        self.model.cfg.ablation.use_mecpe,
                    ));
                }
                batch = {
                    let b = batch_loss(&sess, &parts);
                    sess.backward_into(b.total, &mut accum)?;
                    (
                        sess.tape.scalar(b.l_merc),
                        b.l_mecpe.map(|m| sess.tape.scalar(m)),
                        b.merc_count,
                        b.mecpe_count,
                    )
                };
            }
            self.opt.step(&mut self.model.store, &accum)?;

            let (lm, lme, mc, mec) = batch;
            merc_sum += lm * mc as f64;
            merc_count += mc;
            if let Some(l) = lme {
                mecpe_sum += l * mec as f64;
                mecpe_count += mec;
            }
        }

        Ok(EpochStats {
            l_merc: merc_sum / merc_count as f64,
            l_mecpe: if mecpe_count == 0 {
                0.0
            } else {
                mecpe_sum / mecpe_count as f64
            },
        })
    }

    pub fn evaluate(&self, convs: &[&Conversation], mode: PairMode) -> MetricReport {
        evaluate_model(&self.model, convs, mode)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_merc: f64,
    pub l_mecpe: f64,
    /// Weighted F1 on the validation split; absent when the corpus has
    /// no validation conversations.
    pub valid_wf1: Option<f64>,
}

pub struct FitOutcome {
    /// The trained model; when a validation split exists these are the
    /// weights of the best validation epoch, otherwise the final ones.
    pub model: Model,
    pub log: Vec<EpochRecord>,
}

/// Train a fresh model on the corpus's train split. Tracks validation
/// weighted F1 when a validation split exists, keeping the best-epoch
/// weights and stopping early after `patience` epochs without a new
/// best (`patience = 0` disables early stopping).
pub fn fit(cfg: &Config, corpus: &Corpus) -> Result<FitOutcome> {
    fit_with(cfg, corpus, |_| Ok(()))
}

/// [`fit`] with a per-epoch observer, called with each record as soon as
/// the epoch finishes (for streaming logs).
pub fn fit_with(
    cfg: &Config,
    corpus: &Corpus,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<FitOutcome> {
    let train = corpus.by_split(Split::Train);
    let valid = corpus.by_split(Split::Valid);
    if train.is_empty() {
        return Err(Error::Config("corpus has no training conversations".into()));
    }
    if cfg.train.patience > 0 && valid.is_empty() {
        return Err(Error::Config(
            "early stopping needs a validation split (patience > 0, no valid conversations)"
                .into(),
        ));
    }

    let model = Model::new(cfg, corpus)?;
    let total_steps = Trainer::planned_steps(cfg, train.len());
    let mut trainer = Trainer::new(model, total_steps);

    let mut log = Vec::with_capacity(cfg.train.epochs);
    let mut best: Option<(f64, Vec<Array2<f64>>)> = None;
    let mut since_best = 0usize;
    for epoch in 1..=cfg.train.epochs {
        let stats = trainer.run_epoch(&train)?;
        let valid_wf1 = (!valid.is_empty())
            .then(|| trainer.evaluate(&valid, PairMode::Strict).wf1);
        let record = EpochRecord {
            epoch,
            l_merc: stats.l_merc,
            l_mecpe: stats.l_mecpe,
            valid_wf1,
        };
        on_epoch(&record)?;
        log.push(record);
        if let Some(wf1) = valid_wf1 {
            // strictly-better keeps the earliest best epoch, so ties are
            // deterministic
            if best.as_ref().map_or(true, |(b, _)| wf1 > *b) {
                let store = &trainer.model.store;
                let snap = (0..store.len()).map(|i| store.value_at(i).clone()).collect();
                best = Some((wf1, snap));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.train.patience > 0 && since_best >= cfg.train.patience {
                    break;
                }
            }
        }
    }

    let mut model = trainer.model;
    if let Some((_, snap)) = best {
        for (i, values) in snap.into_iter().enumerate() {
            *model.store.value_at_mut(i) = values;
        }
    }
    Ok(FitOutcome { model, log })
}

pub fn evaluate_model(model: &Model, convs: &[&Conversation], mode: PairMode) -> MetricReport {
    let outcomes: Vec<Vec<UttOutcome>> = convs
        .iter()
        .map(|c| model.predict(&c.utterances))
        .collect();
    evaluate(&outcomes, &model.labels, model.neutral_index, mode)
}

/// Worst relative error found by [`gradient_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params_checked: usize,
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Compare tape gradients against central finite differences for every
/// entry of every trainable parameter, on the full two-task loss over a
/// generated batch.
pub fn gradient_check(
    cfg: &Config,
    conversations: &[Conversation],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let corpus = crate::corpus::Corpus {
        conversations: conversations.to_vec(),
        label_names: (0..cfg.model.n_emotions).map(|i| format!("label_{i}")).collect(),
        neutral_index: cfg.model.neutral_index,
        vocab_size: cfg.synth.vocab_size,
        audio_dim: cfg.synth.audio_dim,
        vision_dim: cfg.synth.vision_dim,
    };
    let mut model = Model::new(cfg, &corpus)?;

    let loss_of = |model: &Model| -> Result<f64> {
        let sess = Session::new(&model.store);
        let mut parts = Vec::new();
        for conv in &corpus.conversations {
            let logits = model.forward(&sess, &conv.utterances, &mut None);
            parts.push(conversation_loss(
                &sess,
                &logits,
                &conv.utterances,
                model.neutral_index,
                model.cfg.ablation.use_mecpe,
            ));
        }
        Ok(sess.tape.scalar(batch_loss(&sess, &parts).total))
    };

    // analytic gradients in one backward pass
    let mut accum = GradAccum::new(&model.store);
    {
        let sess = Session::new(&model.store);
        let mut parts = Vec::new();
        for conv in &corpus.conversations {
            let logits = model.forward(&sess, &conv.utterances, &mut None);
            parts.push(conversation_loss(
                &sess,
                &logits,
                &conv.utterances,
                model.neutral_index,
                model.cfg.ablation.use_mecpe,
            ));
        }
        let total = batch_loss(&sess, &parts).total;
        sess.backward_into(total, &mut accum)?;
    }

    let mut max_rel_err = 0.0f64;
    let mut worst_param = String::new();
    let mut entries = 0usize;
    let n_params = model.store.len();
    for idx in 0..n_params {
        let name = model.store.name_at(idx).to_string();
        let dim = model.store.value_at(idx).dim();
        for i in 0..dim.0 {
            for j in 0..dim.1 {
                let orig = model.store.value_at(idx)[(i, j)];
                model.store.value_at_mut(idx)[(i, j)] = orig + step;
                let plus = loss_of(&model)?;
                model.store.value_at_mut(idx)[(i, j)] = orig - step;
                let minus = loss_of(&model)?;
                model.store.value_at_mut(idx)[(i, j)] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let analytic = accum.at(idx)[(i, j)];
                let denom = analytic.abs().max(numeric.abs()).max(1e-3);
                let rel = (analytic - numeric).abs() / denom;
                if rel > max_rel_err {
                    max_rel_err = rel;
                    worst_param = format!("{name}[{i},{j}]");
                }
                entries += 1;
            }
        }
    }

    Ok(GradCheckReport {
        params_checked: n_params,
        entries_checked: entries,
        max_rel_err,
        worst_param,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.model.d_model = 16;
        cfg.model.n_heads = 2;
        cfg.model.d_ffn = 32;
        cfg.model.max_conv_len = 6;
        cfg.thc.heads = vec![1, 4];
        cfg.prompt.x_capacity = 4;
        cfg.train.batch_size = 2;
        cfg.train.epochs = 2;
        cfg.synth.conversations = 4;
        cfg.synth.vocab_size = 14;
        cfg.synth.min_utterances = 2;
        cfg.synth.max_utterances = 4;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn schedule_ramps_and_decays() {
        let s = Schedule { warmup: 4, total: 10 };
        assert!((s.factor(1) - 0.25).abs() < 1e-15);
        assert!((s.factor(4) - 1.0).abs() < 1e-15);
        assert!((s.factor(7) - 0.5).abs() < 1e-15);
        assert!((s.factor(10) - 0.0).abs() < 1e-15);
        assert_eq!(s.factor(12), 0.0, "past the end the rate clamps to zero");
        let nw = Schedule { warmup: 0, total: 10 };
        assert!((nw.factor(1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_moves_toward_minimum() {
        // minimize sum of squares of a single 1×3 parameter
        let mut store = ParamStore::new();
        store.insert("heads.w", ndarray::array![[5.0, -3.0, 2.0]]);
        let mut opt = Adam::new(
            &store,
            1e-1,
            1e-1,
            Schedule { warmup: 0, total: 10_000 },
        );
        for _ in 0..2000 {
            let mut accum = GradAccum::new(&store);
            {
                let sess = Session::new(&store);
                let w = sess.param("heads.w");
                let sq = sess.tape.matmul_nt(w, w);
                let loss = sess.tape.sum_all(sq);
                sess.backward_into(loss, &mut accum).unwrap();
            }
            opt.step(&mut store, &accum).unwrap();
        }
        for &w in store.get("heads.w").iter() {
            assert!(w.abs() < 1e-2, "weight {w} did not shrink");
        }
    }

    #[test]
    fn encoder_prefix_gets_its_own_rate() {
        let mut store = ParamStore::new();
        store.insert("encoder.w", ndarray::array![[1.0]]);
        store.insert("heads.w", ndarray::array![[1.0]]);
        let mut opt = Adam::new(
            &store,
            3e-4,
            1e-4,
            Schedule { warmup: 0, total: 1_000_000 },
        );
        let mut accum = GradAccum::new(&store);
        {
            let sess = Session::new(&store);
            let both = sess.tape.add(sess.param("encoder.w"), sess.param("heads.w"));
            let loss = sess.tape.sum_all(both);
            sess.backward_into(loss, &mut accum).unwrap();
        }
        opt.step(&mut store, &accum).unwrap();
        // first Adam step moves by lr * schedule regardless of gradient scale
        let f = Schedule { warmup: 0, total: 1_000_000 }.factor(1);
        let enc_move = 1.0 - store.get("encoder.w")[(0, 0)];
        let rest_move = 1.0 - store.get("heads.w")[(0, 0)];
        assert!((enc_move - 3e-4 * f).abs() < 1e-9);
        assert!((rest_move - 1e-4 * f).abs() < 1e-9);
        assert!((enc_move / rest_move - 3.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_aborts_step_without_update() {
        let mut store = ParamStore::new();
        store.insert("w", ndarray::array![[1.0]]);
        let mut accum = GradAccum::new(&store);
        let before = store.get("w").clone();
        {
            let sess = Session::new(&store);
            let w = sess.param("w");
            let inf = sess.tape.leaf(ndarray::array![[f64::INFINITY]]);
            let prod = sess.tape.matmul(w, inf);
            let loss = sess.tape.sum_all(prod);
            // the accumulation step itself refuses non-finite gradients,
            // so a poisoned batch can never reach the optimizer
            assert!(sess.backward_into(loss, &mut accum).is_err());
        }
        assert_eq!(store.get("w"), &before, "failed backward must not move weights");
    }

    #[test]
    fn loss_separates_tasks_and_counts() {
        let cfg = tiny_cfg();
        let corpus = generate(&cfg.synth);
        let model = Model::new(&cfg, &corpus).unwrap();
        let conv = &corpus.conversations[0];
        let sess = Session::new(&model.store);
        let logits = model.forward(&sess, &conv.utterances, &mut None);
        let parts = conversation_loss(
            &sess,
            &logits,
            &conv.utterances,
            model.neutral_index,
            true,
        );
        assert_eq!(parts.merc_count, conv.utterances.len());
        let expected_pairs = conv
            .utterances
            .iter()
            .filter(|u| u.emotion != model.neutral_index && u.cause_id.is_some())
            .count();
        assert_eq!(parts.mecpe_count, expected_pairs);
        let batch = batch_loss(&sess, &[parts]);
        let merc = sess.tape.scalar(batch.l_merc);
        let mecpe = batch.l_mecpe.map(|m| sess.tape.scalar(m)).unwrap_or(0.0);
        let total = sess.tape.scalar(batch.total);
        assert!((total - (merc + mecpe)).abs() < 1e-12);
        assert!(merc > 0.0);
    }

    #[test]
    fn disabling_cause_objective_leaves_pure_emotion_loss() {
        let mut cfg = tiny_cfg();
        cfg.ablation.use_mecpe = false;
        let corpus = generate(&cfg.synth);
        let model = Model::new(&cfg, &corpus).unwrap();
        let conv = &corpus.conversations[0];
        let sess = Session::new(&model.store);
        let logits = model.forward(&sess, &conv.utterances, &mut None);
        let parts = conversation_loss(
            &sess,
            &logits,
            &conv.utterances,
            model.neutral_index,
            cfg.ablation.use_mecpe,
        );
        assert_eq!(parts.mecpe_count, 0);
        assert!(parts.mecpe_sum.is_none());
        let batch = batch_loss(&sess, &[parts]);
        assert!(batch.l_mecpe.is_none());
        // bit-exact: the total IS the emotion term
        assert_eq!(
            sess.tape.scalar(batch.total),
            sess.tape.scalar(batch.l_merc)
        );
    }

    #[test]
    fn one_epoch_reduces_training_loss() {
        let cfg = tiny_cfg();
        let corpus = generate(&cfg.synth);
        let model = Model::new(&cfg, &corpus).unwrap();
        let train = corpus.by_split(crate::corpus::Split::Train);
        let steps = Trainer::planned_steps(&cfg, train.len());
        let mut trainer = Trainer::new(model, steps * 20);
        let first = trainer.run_epoch(&train).unwrap();
        let mut last = first;
        for _ in 0..15 {
            last = trainer.run_epoch(&train).unwrap();
        }
        assert!(
            last.l_merc < first.l_merc,
            "emotion loss {} -> {}",
            first.l_merc,
            last.l_merc
        );
    }

    #[test]
    fn single_conversation_loss_never_increases_early() {
        let mut cfg = tiny_cfg();
        cfg.train.batch_size = 1;
        cfg.train.warmup_fraction = 0.0;
        cfg.train.lr_encoder = 1e-3;
        cfg.train.lr_rest = 1e-3;
        cfg.synth.conversations = 1;
        cfg.validate().unwrap();
        let corpus = generate(&cfg.synth);
        let model = Model::new(&cfg, &corpus).unwrap();
        let train = corpus.by_split(crate::corpus::Split::Train);
        let mut trainer = Trainer::new(model, 100_000);
        let mut prev = f64::INFINITY;
        for step in 0..20 {
            let s = trainer.run_epoch(&train).unwrap();
            let total = s.l_merc + s.l_mecpe;
            assert!(
                total <= prev + 1e-9,
                "loss rose at step {step}: {prev} -> {total}"
            );
            prev = total;
        }
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let cfg = tiny_cfg();
        let corpus = generate(&cfg.synth);
        let run = || {
            let model = Model::new(&cfg, &corpus).unwrap();
            let train = corpus.by_split(crate::corpus::Split::Train);
            let mut trainer = Trainer::new(model, 100);
            let mut stats = Vec::new();
            for _ in 0..3 {
                let s = trainer.run_epoch(&train).unwrap();
                stats.push((s.l_merc, s.l_mecpe));
            }
            let report = trainer.evaluate(&train, PairMode::Strict);
            (stats, serde_json::to_string(&report).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fit_writes_one_record_per_epoch() {
        let mut cfg = tiny_cfg();
        cfg.train.epochs = 1;
        cfg.synth.conversations = 2;
        cfg.validate().unwrap();
        let corpus = generate(&cfg.synth);
        let out = fit(&cfg, &corpus).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.log[0].epoch, 1);
        assert!(out.log[0].valid_wf1.is_none(), "no validation split configured");
        assert!(out.log[0].l_merc.is_finite());
        let line = serde_json::to_string(&out.log[0]).unwrap();
        assert!(line.starts_with(r#"{"epoch":1,"l_merc":"#), "{line}");
        assert!(line.contains(r#""valid_wf1":null"#), "{line}");
    }

    #[test]
    fn early_stop_needs_and_uses_a_validation_split() {
        let mut cfg = tiny_cfg();
        cfg.train.patience = 2;
        assert!(fit(&cfg, &generate(&cfg.synth)).is_err());

        cfg.synth.train_fraction = 0.5;
        cfg.synth.valid_fraction = 0.5;
        cfg.synth.conversations = 8;
        cfg.train.epochs = 30;
        cfg.validate().unwrap();
        let corpus = generate(&cfg.synth);
        let out = fit(&cfg, &corpus).unwrap();
        assert!(out.log.iter().all(|r| r.valid_wf1.is_some()));
        // with such a tiny budget the metric plateaus long before 30 epochs
        assert!(out.log.len() < 30, "ran {} epochs", out.log.len());
    }

    #[test]
    fn gradient_check_on_minimal_model() {
        // a very small end-to-end check; the full-size one runs in the
        // acceptance suite
        let mut cfg = tiny_cfg();
        cfg.model.d_model = 8;
        cfg.model.n_heads = 2;
        cfg.model.d_ffn = 12;
        cfg.model.n_text_layers = 1;
        cfg.thc.layers = 1;
        cfg.thc.heads = vec![2];
        cfg.synth.conversations = 1;
        cfg.synth.min_utterances = 2;
        cfg.synth.max_utterances = 3;
        cfg.synth.audio_dim = 3;
        cfg.synth.vision_dim = 3;
        cfg.synth.audio_len = 5;
        cfg.synth.vision_len = 2;
        cfg.validate().unwrap();
        let corpus = generate(&cfg.synth);
        let report = gradient_check(&cfg, &corpus.conversations, 1e-5, 1e-3).unwrap();
        assert!(
            report.passed(),
            "worst {} rel err {}",
            report.worst_param,
            report.max_rel_err
        );
        assert!(report.entries_checked > 1000);
    }
}
