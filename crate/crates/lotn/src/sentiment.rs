//! The attention-based bidirectional review-sentiment classifier that gets
//! pretrained, frozen, and transferred: BiLSTM encoder, bilinear attention
//! against the mean hidden state, linear + softmax readout.

use lotn_autograd::{bilstm, ops, Adam, AutogradError, BiLstmParams, LstmParams, ParameterStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::corpus::{make_review_batches, ReviewBatch, ReviewExample, Vocab};

#[derive(Debug, Error)]
pub enum SentimentError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("encoder must be frozen first (pretrain or load a checkpoint)")]
    NotFrozen,
    #[error("empty {0} set")]
    EmptyDataset(&'static str),
    #[error("bad sentiment checkpoint: {0}")]
    BadCheckpoint(String),
}

pub type Result<T> = std::result::Result<T, SentimentError>;

#[derive(Debug, Clone)]
pub struct PretrainSettings {
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for PretrainSettings {
    fn default() -> PretrainSettings {
        PretrainSettings {
            hidden: 200,
            lr: 0.001,
            batch_size: 25,
            dropout: 0.5,
            patience: 3,
            max_epochs: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug)]
pub struct SentimentClassifier {
    pub encoder: BiLstmParams,
    /// Bilinear attention weight, `[2h, 2h]`.
    pub w_u: Tensor,
    /// Attention bias, scalar.
    pub b_u: Tensor,
    /// Output layer, `[2h, 2]` plus bias.
    pub w_out: Tensor,
    pub b_out: Tensor,
    word_dim: usize,
    hidden: usize,
    frozen: bool,
}

impl SentimentClassifier {
    pub fn init<R: Rng>(word_dim: usize, hidden: usize, rng: &mut R) -> SentimentClassifier {
        let d = 2 * hidden;
        let bound = 1.0 / (d as f64).sqrt();
        SentimentClassifier {
            encoder: BiLstmParams::init(word_dim, hidden, rng),
            w_u: Tensor::uniform(vec![d, d], -bound, bound, rng).requiring_grad(),
            b_u: Tensor::uniform(vec![1], -bound, bound, rng).requiring_grad(),
            w_out: Tensor::uniform(vec![d, 2], -bound, bound, rng).requiring_grad(),
            b_out: Tensor::uniform(vec![2], -bound, bound, rng).requiring_grad(),
            word_dim,
            hidden,
            frozen: false,
        }
    }

    pub fn word_dim(&self) -> usize {
        self.word_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn params(&self) -> Vec<(&'static str, Tensor)> {
        vec![
            ("enc.fwd.w", self.encoder.fwd.w.clone()),
            ("enc.fwd.b", self.encoder.fwd.b.clone()),
            ("enc.bwd.w", self.encoder.bwd.w.clone()),
            ("enc.bwd.b", self.encoder.bwd.b.clone()),
            ("attn.w_u", self.w_u.clone()),
            ("attn.b_u", self.b_u.clone()),
            ("out.w", self.w_out.clone()),
            ("out.b", self.b_out.clone()),
        ]
    }

    /// Embeds and encodes a padded id matrix; one `[b, 2h]` tensor per step.
    pub fn encode<R: Rng>(
        &self,
        tape: &Tape,
        vocab: &Vocab,
        token_ids: &[Vec<usize>],
        step_mask: &[Vec<bool>],
        dropout_p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Vec<Tensor>> {
        let t_max = token_ids[0].len();
        let mut steps = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let ids: Vec<usize> = token_ids.iter().map(|row| row[t]).collect();
            let x = ops::embedding_gather(tape, vocab.embeddings(), &ids)?;
            steps.push(ops::dropout(tape, &x, dropout_p, train, rng)?);
        }
        Ok(bilstm(tape, &self.encoder, &steps, step_mask)?)
    }

    /// Eqs. 1-3 over encoded steps: bilinear scores against the mean
    /// unmasked hidden state, masked softmax, attention-weighted sum.
    /// Returns (r `[b, 2h]`, alpha `[b, T]`).
    pub fn attend(
        &self,
        tape: &Tape,
        hidden_states: &[Tensor],
        step_mask: &[Vec<bool>],
        lengths: &[usize],
    ) -> Result<(Tensor, Tensor)> {
        let b = hidden_states[0].rows();
        let t_max = hidden_states.len();

        let mut sum = Tensor::zeros(vec![b, 2 * self.hidden]);
        for (h, mask) in hidden_states.iter().zip(step_mask) {
            let keep: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            sum = ops::add(tape, &sum, &ops::scale_rows(tape, h, &keep)?)?;
        }
        let inv_len: Vec<f64> = lengths.iter().map(|&l| 1.0 / l as f64).collect();
        let h_avg = ops::scale_rows(tape, &sum, &inv_len)?;

        let m = ops::matmul(tape, &h_avg, &self.w_u)?;
        let scores: Vec<Tensor> = hidden_states
            .iter()
            .map(|h| ops::add(tape, &ops::rowwise_dot(tape, h, &m)?, &self.b_u))
            .collect::<std::result::Result<_, _>>()?;
        let score_refs: Vec<&Tensor> = scores.iter().collect();
        let stacked = ops::stack_cols(tape, &score_refs)?;

        let mut flat_mask = vec![false; b * t_max];
        for (t, mask) in step_mask.iter().enumerate() {
            for (r, &valid) in mask.iter().enumerate() {
                flat_mask[r * t_max + t] = valid;
            }
        }
        let alpha = ops::softmax_rows(tape, &stacked, Some(&flat_mask))?;

        let mut r = Tensor::zeros(vec![b, 2 * self.hidden]);
        for (t, h) in hidden_states.iter().enumerate() {
            let weight = ops::col(tape, &alpha, t)?;
            r = ops::add(tape, &r, &ops::mul_rows(tape, h, &weight)?)?;
        }
        Ok((r, alpha))
    }

    fn batch_probs<R: Rng>(
        &self,
        tape: &Tape,
        vocab: &Vocab,
        batch: &ReviewBatch,
        dropout_p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Tensor> {
        let step_mask = batch.step_mask();
        let hs = self.encode(tape, vocab, &batch.token_ids, &step_mask, dropout_p, train, rng)?;
        let (r, _alpha) = self.attend(tape, &hs, &step_mask, &batch.lengths)?;
        let logits = ops::add(tape, &ops::matmul(tape, &r, &self.w_out)?, &self.b_out)?;
        Ok(ops::softmax_rows(tape, &logits, None)?)
    }

    /// Cross-entropy of one batch: per-review losses summed, then averaged
    /// over the batch.
    pub fn batch_loss<R: Rng>(
        &self,
        tape: &Tape,
        vocab: &Vocab,
        batch: &ReviewBatch,
        dropout_p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Tensor> {
        let probs = self.batch_probs(tape, vocab, batch, dropout_p, train, rng)?;
        let mask = vec![true; batch.size()];
        let ce = ops::cross_entropy_masked(tape, &probs, &batch.polarities, &mask)?;
        Ok(ops::scale(tape, &ce, 1.0 / batch.size() as f64))
    }

    /// Eval-mode polarity distribution for one review.
    pub fn classify(&self, vocab: &Vocab, tokens: &[String]) -> Result<Vec<f64>> {
        let batch = single_review_batch(vocab, tokens);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in eval mode
        let probs = self.batch_probs(&tape, vocab, &batch, 0.0, false, &mut rng)?;
        Ok(probs.to_vec())
    }

    pub fn accuracy(&self, vocab: &Vocab, reviews: &[ReviewExample], batch_size: usize) -> Result<f64> {
        if reviews.is_empty() {
            return Err(SentimentError::EmptyDataset("evaluation"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut correct = 0usize;
        for batch in make_review_batches(reviews, vocab, batch_size, None) {
            let tape = Tape::new();
            let probs = self.batch_probs(&tape, vocab, &batch, 0.0, false, &mut rng)?;
            let v = probs.to_vec();
            for (row, &gold) in batch.polarities.iter().enumerate() {
                let pred = usize::from(v[row * 2 + 1] > v[row * 2]);
                correct += usize::from(pred == gold);
            }
        }
        Ok(correct as f64 / reviews.len() as f64)
    }

    /// Frozen forward pass over one unpadded sentence: hidden states
    /// `[n, 2h]` and the attention distribution over its tokens.
    pub fn encode_frozen(&self, vocab: &Vocab, tokens: &[String]) -> Result<(Tensor, Vec<f64>)> {
        if !self.frozen {
            return Err(SentimentError::NotFrozen);
        }
        if tokens.is_empty() {
            return Err(SentimentError::EmptyDataset("sentence"));
        }
        let batch = single_review_batch(vocab, tokens);
        let step_mask = batch.step_mask();
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hs = self.encode(&tape, vocab, &batch.token_ids, &step_mask, 0.0, false, &mut rng)?;
        let (_r, alpha) = self.attend(&tape, &hs, &step_mask, &batch.lengths)?;

        let n = tokens.len();
        let width = 2 * self.hidden;
        let mut flat = Vec::with_capacity(n * width);
        for h in &hs {
            flat.extend(h.values().iter());
        }
        let matrix = Tensor::from_vec(vec![n, width], flat).expect("consistent dims");
        Ok((matrix, alpha.to_vec()))
    }

    /// Replaces parameter values with a snapshot (same order as `params`).
    fn load_values(&self, snapshot: &[Vec<f64>]) {
        for ((_, param), values) in self.params().iter().zip(snapshot) {
            param.set_values(values);
        }
    }

    /// Rebuilds this classifier with non-trainable tensors.
    pub fn freeze(self) -> SentimentClassifier {
        let frozen_t =
            |t: &Tensor| Tensor::from_vec(t.shape().to_vec(), t.to_vec()).expect("same shape");
        SentimentClassifier {
            encoder: BiLstmParams {
                fwd: LstmParams::from_tensors(
                    self.word_dim,
                    self.hidden,
                    frozen_t(&self.encoder.fwd.w),
                    frozen_t(&self.encoder.fwd.b),
                )
                .expect("shape preserved"),
                bwd: LstmParams::from_tensors(
                    self.word_dim,
                    self.hidden,
                    frozen_t(&self.encoder.bwd.w),
                    frozen_t(&self.encoder.bwd.b),
                )
                .expect("shape preserved"),
            },
            w_u: frozen_t(&self.w_u),
            b_u: frozen_t(&self.b_u),
            w_out: frozen_t(&self.w_out),
            b_out: frozen_t(&self.b_out),
            word_dim: self.word_dim,
            hidden: self.hidden,
            frozen: true,
        }
    }

    pub fn to_checkpoint(&self, vocab: &Vocab, extra_meta: Vec<(String, String)>) -> Checkpoint {
        let mut meta = vec![
            ("word_dim".to_string(), self.word_dim.to_string()),
            ("hidden".to_string(), self.hidden.to_string()),
        ];
        meta.extend(extra_meta);
        let mut params: Vec<(String, Tensor)> =
            self.params().into_iter().map(|(n, t)| (n.to_string(), t)).collect();
        params.push(("embeddings".to_string(), vocab.embeddings().clone()));
        Checkpoint { kind: "sentiment".into(), meta, tokens: vocab.tokens().to_vec(), params }
    }

    /// Restores a frozen classifier and its vocabulary.
    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<(Vocab, SentimentClassifier)> {
        if ck.kind != "sentiment" {
            return Err(SentimentError::BadCheckpoint(format!(
                "kind {:?} is not a sentiment checkpoint",
                ck.kind
            )));
        }
        let parse = |key: &str| -> Result<usize> {
            ck.meta
                .iter()
                .find(|(k, _)| k == key)
                .and_then(|(_, v)| v.parse().ok())
                .ok_or_else(|| SentimentError::BadCheckpoint(format!("missing meta {key}")))
        };
        let word_dim = parse("word_dim")?;
        let hidden = parse("hidden")?;
        let mut take = |name: &str| -> Result<Tensor> {
            ck.take_param(name)
                .ok_or_else(|| SentimentError::BadCheckpoint(format!("missing param {name}")))
        };
        let fwd_w = take("enc.fwd.w")?;
        let fwd_b = take("enc.fwd.b")?;
        let bwd_w = take("enc.bwd.w")?;
        let bwd_b = take("enc.bwd.b")?;
        let w_u = take("attn.w_u")?;
        let b_u = take("attn.b_u")?;
        let w_out = take("out.w")?;
        let b_out = take("out.b")?;
        let embeddings = take("embeddings")?;
        let bad = |e: AutogradError| SentimentError::BadCheckpoint(e.to_string());
        let encoder = BiLstmParams {
            fwd: LstmParams::from_tensors(word_dim, hidden, fwd_w, fwd_b).map_err(bad)?,
            bwd: LstmParams::from_tensors(word_dim, hidden, bwd_w, bwd_b).map_err(bad)?,
        };
        if embeddings.cols() != word_dim {
            return Err(SentimentError::BadCheckpoint(format!(
                "{}-dim embeddings for word_dim {word_dim}",
                embeddings.cols()
            )));
        }
        let vocab = Vocab::from_parts(ck.tokens, embeddings);
        Ok((
            vocab,
            SentimentClassifier {
                encoder,
                w_u,
                b_u,
                w_out,
                b_out,
                word_dim,
                hidden,
                frozen: true,
            },
        ))
    }
}

fn single_review_batch(vocab: &Vocab, tokens: &[String]) -> ReviewBatch {
    ReviewBatch {
        token_ids: vec![vocab.ids_for(tokens)],
        mask: vec![vec![true; tokens.len()]],
        lengths: vec![tokens.len()],
        polarities: vec![0],
    }
}

/// Trains with Adam and early stopping on dev accuracy; returns the
/// best-dev classifier, frozen, with its epoch history.
pub fn pretrain(
    train: &[ReviewExample],
    dev: &[ReviewExample],
    vocab: &Vocab,
    settings: &PretrainSettings,
    seed: u64,
) -> Result<(SentimentClassifier, Vec<EpochStats>)> {
    if train.is_empty() {
        return Err(SentimentError::EmptyDataset("train"));
    }
    if dev.is_empty() {
        return Err(SentimentError::EmptyDataset("dev"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = SentimentClassifier::init(vocab.dim(), settings.hidden, &mut rng);
    let mut store = ParameterStore::new();
    for (name, t) in model.params() {
        store.register(name, &t).expect("unique parameter names");
    }
    let mut adam = Adam::new(settings.lr);

    let mut history = Vec::new();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_snapshot: Vec<Vec<f64>> = Vec::new();
    let mut stale = 0usize;

    for epoch in 0..settings.max_epochs {
        let shuffle: u64 = rng.random();
        let mut loss_sum = 0.0;
        let batches = make_review_batches(train, vocab, settings.batch_size, Some(shuffle));
        let n_batches = batches.len();
        for batch in batches {
            let tape = Tape::new();
            let loss =
                model.batch_loss(&tape, vocab, &batch, settings.dropout, true, &mut rng)?;
            loss_sum += loss.item();
            tape.backward(&loss)?;
            adam.step(&store).map_err(SentimentError::Autograd)?;
        }
        let dev_accuracy = model.accuracy(vocab, dev, settings.batch_size)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            dev_accuracy,
        });
        if dev_accuracy > best_acc {
            best_acc = dev_accuracy;
            best_snapshot = model.params().iter().map(|(_, t)| t.to_vec()).collect();
            stale = 0;
        } else {
            stale += 1;
            if stale >= settings.patience {
                break;
            }
        }
    }
    model.load_values(&best_snapshot);
    Ok((model.freeze(), history))
}
