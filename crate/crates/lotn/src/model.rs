//! The target-oriented taggers: a position-embedding BiLSTM base model,
//! its two single-transfer ablations, and the full network that fuses the
//! frozen sentiment encoder's hidden states and learns from transformed
//! attention as an auxiliary signal.

use lotn_autograd::{bilstm, ops, Adam, AutogradError, BiLstmParams, ParameterStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::corpus::{make_towe_batches, split_validation, Bio, ToweBatch, ToweExample, Vocab};
use crate::eval::{exact_match_prf, extract_spans, EvalError, EvalReport, Span};
use crate::sentiment::{SentimentClassifier, SentimentError};
use crate::transform::{transform, TransformError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Sentiment(#[from] SentimentError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("bad model checkpoint: {0}")]
    BadCheckpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which pieces of the transfer machinery are wired in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Position-embedding BiLSTM alone.
    Base,
    /// Fuses the frozen encoder's hidden states; no auxiliary head.
    PlusEncoder,
    /// Auxiliary head on the un-fused tagger states; no fusion.
    PlusAuxiliary,
    /// Fusion and auxiliary learning together.
    Lotn,
}

impl Variant {
    pub fn uses_encoder(self) -> bool {
        matches!(self, Variant::PlusEncoder | Variant::Lotn)
    }

    pub fn uses_aux(self) -> bool {
        matches!(self, Variant::PlusAuxiliary | Variant::Lotn)
    }

    /// True when the variant needs a frozen sentiment classifier at all.
    pub fn needs_frozen(self) -> bool {
        self != Variant::Base
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::PlusEncoder => "+encoder",
            Variant::PlusAuxiliary => "+auxiliary",
            Variant::Lotn => "lotn",
        }
    }

    pub const ALL: [Variant; 4] =
        [Variant::Base, Variant::PlusEncoder, Variant::PlusAuxiliary, Variant::Lotn];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Variant, String> {
        match s {
            "base" => Ok(Variant::Base),
            "+encoder" => Ok(Variant::PlusEncoder),
            "+auxiliary" => Ok(Variant::PlusAuxiliary),
            "lotn" => Ok(Variant::Lotn),
            other => Err(format!(
                "unknown variant {other:?} (expected base, +encoder, +auxiliary, or lotn)"
            )),
        }
    }
}

/// Static per-example outputs of the frozen classifier: hidden states for
/// fusion and binary pseudo-labels from the attention transform. Computed
/// once before training — the encoder is frozen, so they never change.
#[derive(Debug)]
pub struct FrozenArtifacts {
    /// One `[n, 2*sc_hidden]` constant per example.
    pub h_sc: Vec<Tensor>,
    /// One 0/1 label per token per example.
    pub pseudo_labels: Vec<Vec<u8>>,
}

pub fn precompute_artifacts(
    frozen: &SentimentClassifier,
    vocab: &Vocab,
    examples: &[ToweExample],
) -> Result<FrozenArtifacts> {
    let mut h_sc = Vec::with_capacity(examples.len());
    let mut pseudo_labels = Vec::with_capacity(examples.len());
    for ex in examples {
        let (h, alpha) = frozen.encode_frozen(vocab, &ex.tokens)?;
        let latent = transform(&alpha, ex.target_span, ex.len())?;
        h_sc.push(h);
        pseudo_labels.push(latent.labels);
    }
    Ok(FrozenArtifacts { h_sc, pseudo_labels })
}

#[derive(Debug)]
pub struct ToweModel {
    pub variant: Variant,
    pub lambda: f64,
    /// Position embedding table, `[l_cap, pos_dim]`, trainable.
    pub e_pos: Tensor,
    pub encoder: BiLstmParams,
    pub w_tag: Tensor,
    pub b_tag: Tensor,
    /// `(w_aux, b_aux)` for the variants that learn latent opinions.
    pub aux: Option<(Tensor, Tensor)>,
    word_dim: usize,
    pos_dim: usize,
    hidden: usize,
    l_cap: usize,
    /// Width of the frozen encoder states this model fuses (0 when unfused).
    sc_width: usize,
}

impl ToweModel {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        variant: Variant,
        lambda: f64,
        word_dim: usize,
        pos_dim: usize,
        hidden: usize,
        l_cap: usize,
        sc_width: usize,
        rng: &mut R,
    ) -> Result<ToweModel> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(ModelError::Config(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        if variant.uses_encoder() && sc_width == 0 {
            return Err(ModelError::Config(format!(
                "variant {variant} fuses frozen encoder states but sc_width is 0"
            )));
        }
        let sc_width = if variant.uses_encoder() { sc_width } else { 0 };
        let width = 2 * hidden + sc_width;
        let bound = 1.0 / (width as f64).sqrt();
        let head = |classes: usize, rng: &mut R| {
            (
                Tensor::uniform(vec![width, classes], -bound, bound, rng).requiring_grad(),
                Tensor::uniform(vec![classes], -bound, bound, rng).requiring_grad(),
            )
        };
        let e_pos = Tensor::uniform(vec![l_cap, pos_dim], -0.01, 0.01, rng).requiring_grad();
        let encoder = BiLstmParams::init(word_dim + pos_dim, hidden, rng);
        let (w_tag, b_tag) = head(3, rng);
        let aux = variant.uses_aux().then(|| head(2, rng));
        Ok(ToweModel {
            variant,
            lambda,
            e_pos,
            encoder,
            w_tag,
            b_tag,
            aux,
            word_dim,
            pos_dim,
            hidden,
            l_cap,
            sc_width,
        })
    }

    pub fn word_dim(&self) -> usize {
        self.word_dim
    }

    pub fn pos_dim(&self) -> usize {
        self.pos_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn l_cap(&self) -> usize {
        self.l_cap
    }

    /// Width of the per-token feature the heads consume.
    pub fn width(&self) -> usize {
        self.w_tag.rows()
    }

    pub fn params(&self) -> Vec<(&'static str, Tensor)> {
        let mut out = vec![
            ("e_pos", self.e_pos.clone()),
            ("enc.fwd.w", self.encoder.fwd.w.clone()),
            ("enc.fwd.b", self.encoder.fwd.b.clone()),
            ("enc.bwd.w", self.encoder.bwd.w.clone()),
            ("enc.bwd.b", self.encoder.bwd.b.clone()),
            ("tag.w", self.w_tag.clone()),
            ("tag.b", self.b_tag.clone()),
        ];
        if let Some((w, b)) = &self.aux {
            out.push(("aux.w", w.clone()));
            out.push(("aux.b", b.clone()));
        }
        out
    }

    fn load_values(&self, snapshot: &[Vec<f64>]) {
        for ((_, param), values) in self.params().iter().zip(snapshot) {
            param.set_values(values);
        }
    }

    /// Eq. 4 per step: word vector and position vector concatenated, with
    /// dropout on the result at train time.
    fn embed_steps<R: Rng>(
        &self,
        tape: &Tape,
        vocab: &Vocab,
        token_ids: &[Vec<usize>],
        positions: &[Vec<usize>],
        dropout_p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Vec<Tensor>> {
        let t_max = token_ids[0].len();
        let mut steps = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let word_ids: Vec<usize> = token_ids.iter().map(|row| row[t]).collect();
            let pos_ids: Vec<usize> = positions.iter().map(|row| row[t]).collect();
            let words = ops::embedding_gather(tape, vocab.embeddings(), &word_ids)?;
            let pos = ops::embedding_gather(tape, &self.e_pos, &pos_ids)?;
            let e = ops::concat_last(tape, &[&words, &pos])?;
            steps.push(ops::dropout(tape, &e, dropout_p, train, rng)?);
        }
        Ok(steps)
    }

    /// Per-step feature tensors `[b, width]`: BiLSTM states, concatenated
    /// with the frozen encoder's states (Eq. 6) for the fused variants.
    #[allow(clippy::too_many_arguments)]
    pub fn features<R: Rng>(
        &self,
        tape: &Tape,
        vocab: &Vocab,
        token_ids: &[Vec<usize>],
        positions: &[Vec<usize>],
        step_mask: &[Vec<bool>],
        h_sc_steps: Option<&[Tensor]>,
        dropout_p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Vec<Tensor>> {
        let steps = self.embed_steps(tape, vocab, token_ids, positions, dropout_p, train, rng)?;
        let h = bilstm(tape, &self.encoder, &steps, step_mask)?;
        if !self.variant.uses_encoder() {
            return Ok(h);
        }
        let h_sc = h_sc_steps.ok_or_else(|| {
            ModelError::Config(format!(
                "variant {} needs frozen encoder states for fusion",
                self.variant
            ))
        })?;
        if h_sc.len() != h.len() {
            return Err(ModelError::Config(format!(
                "{} frozen steps for {} tagger steps",
                h_sc.len(),
                h.len()
            )));
        }
        h.iter()
            .zip(h_sc)
            .map(|(ht, hsc)| Ok(ops::concat_last(tape, &[ht, hsc])?))
            .collect()
    }

    /// Eq. 13: per-token distribution over {O, B, I}.
    pub fn tag_predict(&self, tape: &Tape, features: &Tensor) -> Result<Tensor> {
        let logits = ops::add(tape, &ops::matmul(tape, features, &self.w_tag)?, &self.b_tag)?;
        Ok(ops::softmax_rows(tape, &logits, None)?)
    }

    /// Eq. 11: per-token distribution over {not-opinion, opinion}.
    pub fn aux_predict(&self, tape: &Tape, features: &Tensor) -> Result<Tensor> {
        let (w, b) = self.aux.as_ref().ok_or_else(|| {
            ModelError::Config(format!("variant {} has no auxiliary head", self.variant))
        })?;
        let logits = ops::add(tape, &ops::matmul(tape, features, w)?, b)?;
        Ok(ops::softmax_rows(tape, &logits, None)?)
    }

    /// Builds the constant `[b, sc_width]` step tensors a batch fuses with,
    /// zero-padded past each sentence's end.
    pub fn gather_frozen_steps(
        &self,
        artifacts: &FrozenArtifacts,
        batch: &ToweBatch,
    ) -> Vec<Tensor> {
        let b = batch.size();
        let width = self.sc_width;
        (0..batch.max_len())
            .map(|t| {
                let mut vals = vec![0.0; b * width];
                for (row, &ex_id) in batch.example_ids.iter().enumerate() {
                    if t < batch.lengths[row] {
                        let h = &artifacts.h_sc[ex_id];
                        vals[row * width..(row + 1) * width]
                            .copy_from_slice(&h.values()[t * width..(t + 1) * width]);
                    }
                }
                Tensor::from_vec(vec![b, width], vals).expect("sized to fit")
            })
            .collect()
    }

    /// Eq. 15 over one batch: per-token cross-entropies summed within each
    /// sentence, averaged over sentences; `J = L_t + lambda * L_a`, with the
    /// auxiliary path skipped entirely when unused or `lambda = 0`.
    pub fn batch_loss<R: Rng>(
        &self,
        tape: &Tape,
        vocab: &Vocab,
        batch: &ToweBatch,
        artifacts: Option<&FrozenArtifacts>,
        dropout_p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<LossBreakdown> {
        let step_mask = batch.step_mask();
        let h_sc_steps = if self.variant.uses_encoder() {
            let a = artifacts.ok_or_else(|| {
                ModelError::Config(format!(
                    "variant {} needs precomputed frozen encoder states",
                    self.variant
                ))
            })?;
            Some(self.gather_frozen_steps(a, batch))
        } else {
            None
        };
        let feats = self.features(
            tape,
            vocab,
            &batch.token_ids,
            &batch.positions,
            &step_mask,
            h_sc_steps.as_deref(),
            dropout_p,
            train,
            rng,
        )?;

        let b = batch.size();
        let mut tag_sum: Option<Tensor> = None;
        for (t, f) in feats.iter().enumerate() {
            let probs = self.tag_predict(tape, f)?;
            let labels: Vec<usize> = batch.labels.iter().map(|row| row[t]).collect();
            let ce = ops::cross_entropy_masked(tape, &probs, &labels, &step_mask[t])?;
            tag_sum = Some(match tag_sum {
                None => ce,
                Some(acc) => ops::add(tape, &acc, &ce)?,
            });
        }
        let l_t = ops::scale(tape, &tag_sum.expect("at least one step"), 1.0 / b as f64);

        let run_aux = self.variant.uses_aux() && self.lambda > 0.0;
        if !run_aux {
            let tag = l_t.item();
            return Ok(LossBreakdown { j: l_t, tag, aux: None });
        }
        let artifacts = artifacts.ok_or_else(|| {
            ModelError::Config(format!(
                "variant {} with lambda {} needs precomputed pseudo-labels",
                self.variant, self.lambda
            ))
        })?;
        let mut aux_sum: Option<Tensor> = None;
        for (t, f) in feats.iter().enumerate() {
            let probs = self.aux_predict(tape, f)?;
            let labels: Vec<usize> = batch
                .example_ids
                .iter()
                .enumerate()
                .map(|(row, &ex_id)| {
                    if t < batch.lengths[row] {
                        artifacts.pseudo_labels[ex_id][t] as usize
                    } else {
                        0
                    }
                })
                .collect();
            let ce = ops::cross_entropy_masked(tape, &probs, &labels, &step_mask[t])?;
            aux_sum = Some(match aux_sum {
                None => ce,
                Some(acc) => ops::add(tape, &acc, &ce)?,
            });
        }
        let l_a = ops::scale(tape, &aux_sum.expect("at least one step"), 1.0 / b as f64);
        let j = ops::add(tape, &l_t, &ops::scale(tape, &l_a, self.lambda))?;
        Ok(LossBreakdown { j, tag: l_t.item(), aux: Some(l_a.item()) })
    }

    /// Eval-mode tag distributions for every example, `[n, 3]` row-major.
    pub fn predict_distributions(
        &self,
        vocab: &Vocab,
        examples: &[ToweExample],
        artifacts: Option<&FrozenArtifacts>,
        batch_size: usize,
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in eval mode
        let mut out: Vec<Vec<Vec<f64>>> = vec![Vec::new(); examples.len()];
        for batch in make_towe_batches(examples, vocab, batch_size, None) {
            let tape = Tape::new();
            let step_mask = batch.step_mask();
            let h_sc_steps = match (self.variant.uses_encoder(), artifacts) {
                (false, _) => None,
                (true, Some(a)) => Some(self.gather_frozen_steps(a, &batch)),
                (true, None) => {
                    return Err(ModelError::Config(format!(
                        "variant {} needs precomputed frozen encoder states",
                        self.variant
                    )));
                }
            };
            let feats = self.features(
                &tape,
                vocab,
                &batch.token_ids,
                &batch.positions,
                &step_mask,
                h_sc_steps.as_deref(),
                0.0,
                false,
                &mut rng,
            )?;
            let mut dists: Vec<Vec<Vec<f64>>> =
                vec![Vec::with_capacity(batch.max_len()); batch.size()];
            for f in &feats {
                let probs = self.tag_predict(&tape, f)?;
                let pv = probs.to_vec();
                for row in 0..batch.size() {
                    dists[row].push(pv[row * 3..(row + 1) * 3].to_vec());
                }
            }
            for (row, &ex_id) in batch.example_ids.iter().enumerate() {
                dists[row].truncate(batch.lengths[row]);
                out[ex_id] = std::mem::take(&mut dists[row]);
            }
        }
        Ok(out)
    }

    /// Decoded spans for every example.
    pub fn predict_spans(
        &self,
        vocab: &Vocab,
        examples: &[ToweExample],
        artifacts: Option<&FrozenArtifacts>,
        batch_size: usize,
    ) -> Result<Vec<Vec<Span>>> {
        Ok(self
            .predict_distributions(vocab, examples, artifacts, batch_size)?
            .iter()
            .map(|dists| decode(dists).1)
            .collect())
    }

    /// Exact-match P/R/F1 of decoded spans against gold.
    pub fn evaluate(
        &self,
        vocab: &Vocab,
        examples: &[ToweExample],
        artifacts: Option<&FrozenArtifacts>,
        batch_size: usize,
    ) -> Result<EvalReport> {
        let pred = self.predict_spans(vocab, examples, artifacts, batch_size)?;
        let gold = gold_spans(examples);
        Ok(exact_match_prf(&pred, &gold)?)
    }

    pub fn to_checkpoint(
        &self,
        vocab: &Vocab,
        frozen: Option<&SentimentClassifier>,
        extra_meta: Vec<(String, String)>,
    ) -> Checkpoint {
        let mut meta = vec![
            ("variant".to_string(), self.variant.to_string()),
            ("lambda".to_string(), format!("{:?}", self.lambda)),
            ("word_dim".to_string(), self.word_dim.to_string()),
            ("pos_dim".to_string(), self.pos_dim.to_string()),
            ("hidden".to_string(), self.hidden.to_string()),
            ("l_cap".to_string(), self.l_cap.to_string()),
        ];
        let mut params: Vec<(String, Tensor)> =
            self.params().into_iter().map(|(n, t)| (n.to_string(), t)).collect();
        params.push(("embeddings".to_string(), vocab.embeddings().clone()));
        if let Some(sc) = frozen {
            meta.push(("sc_hidden".to_string(), sc.hidden().to_string()));
            for (name, t) in sc.params() {
                params.push((format!("sc.{name}"), t));
            }
        }
        meta.extend(extra_meta);
        Checkpoint { kind: "towe".into(), meta, tokens: vocab.tokens().to_vec(), params }
    }

    /// Rebuilds the model, vocabulary, and (for transfer variants) the
    /// frozen classifier from one self-contained checkpoint.
    pub fn from_checkpoint(
        mut ck: Checkpoint,
    ) -> Result<(Vocab, ToweModel, Option<SentimentClassifier>)> {
        if ck.kind != "towe" {
            return Err(ModelError::BadCheckpoint(format!(
                "kind {:?} is not a tagger checkpoint",
                ck.kind
            )));
        }
        let meta = |key: &str| -> Result<String> {
            ck.meta_value(key)
                .map(String::from)
                .ok_or_else(|| ModelError::BadCheckpoint(format!("missing meta {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            meta(key)?
                .parse()
                .map_err(|_| ModelError::BadCheckpoint(format!("meta {key} is not a number")))
        };
        let variant: Variant = meta("variant")?.parse().map_err(ModelError::BadCheckpoint)?;
        let lambda: f64 = meta("lambda")?
            .parse()
            .map_err(|_| ModelError::BadCheckpoint("meta lambda is not a number".into()))?;
        let (word_dim, pos_dim, hidden, l_cap) =
            (num("word_dim")?, num("pos_dim")?, num("hidden")?, num("l_cap")?);
        let sc_hidden = if variant.needs_frozen() { Some(num("sc_hidden")?) } else { None };

        let mut take = |name: &str| -> Result<Tensor> {
            ck.take_param(name)
                .ok_or_else(|| ModelError::BadCheckpoint(format!("missing param {name}")))
        };
        let e_pos = take("e_pos")?.requiring_grad();
        let fwd_w = take("enc.fwd.w")?.requiring_grad();
        let fwd_b = take("enc.fwd.b")?.requiring_grad();
        let bwd_w = take("enc.bwd.w")?.requiring_grad();
        let bwd_b = take("enc.bwd.b")?.requiring_grad();
        let w_tag = take("tag.w")?.requiring_grad();
        let b_tag = take("tag.b")?.requiring_grad();
        let aux = if variant.uses_aux() {
            Some((take("aux.w")?.requiring_grad(), take("aux.b")?.requiring_grad()))
        } else {
            None
        };
        let embeddings = take("embeddings")?;
        if embeddings.cols() != word_dim {
            return Err(ModelError::BadCheckpoint(format!(
                "{}-dim embeddings for word_dim {word_dim}",
                embeddings.cols()
            )));
        }

        let frozen = if let Some(sc_hidden) = sc_hidden {
            let mut sc_params = Vec::new();
            for name in
                ["enc.fwd.w", "enc.fwd.b", "enc.bwd.w", "enc.bwd.b", "attn.w_u", "attn.b_u", "out.w", "out.b"]
            {
                sc_params.push((name.to_string(), take(&format!("sc.{name}"))?));
            }
            sc_params.push(("embeddings".to_string(), embeddings.clone()));
            let sub = Checkpoint {
                kind: "sentiment".into(),
                meta: vec![
                    ("word_dim".to_string(), word_dim.to_string()),
                    ("hidden".to_string(), sc_hidden.to_string()),
                ],
                tokens: ck.tokens.clone(),
                params: sc_params,
            };
            let (_, sc) = SentimentClassifier::from_checkpoint(sub)
                .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
            Some(sc)
        } else {
            None
        };

        let bad = |e: AutogradError| ModelError::BadCheckpoint(e.to_string());
        let encoder = BiLstmParams {
            fwd: lotn_autograd::LstmParams::from_tensors(word_dim + pos_dim, hidden, fwd_w, fwd_b)
                .map_err(bad)?,
            bwd: lotn_autograd::LstmParams::from_tensors(word_dim + pos_dim, hidden, bwd_w, bwd_b)
                .map_err(bad)?,
        };
        let sc_width = w_tag.rows().saturating_sub(2 * hidden);
        let vocab = Vocab::from_parts(ck.tokens, embeddings);
        Ok((
            vocab,
            ToweModel {
                variant,
                lambda,
                e_pos,
                encoder,
                w_tag,
                b_tag,
                aux,
                word_dim,
                pos_dim,
                hidden,
                l_cap,
                sc_width,
            },
            frozen,
        ))
    }
}

#[derive(Debug)]
pub struct LossBreakdown {
    /// The differentiable joint objective.
    pub j: Tensor,
    /// `L_t` as a number.
    pub tag: f64,
    /// `L_a` as a number, when the auxiliary path ran.
    pub aux: Option<f64>,
}

/// Per-token argmax with ties broken toward the lower label id
/// (O < B < I), then span extraction with the I-after-O repair.
pub fn decode(dists: &[Vec<f64>]) -> (Vec<Bio>, Vec<Span>) {
    let tags: Vec<Bio> = dists
        .iter()
        .map(|row| {
            let mut best = 0;
            for (k, &p) in row.iter().enumerate().skip(1) {
                if p > row[best] {
                    best = k;
                }
            }
            Bio::from_label(best).expect("three classes")
        })
        .collect();
    let spans = extract_spans(&tags);
    (tags, spans)
}

pub fn gold_spans(examples: &[ToweExample]) -> Vec<Vec<Span>> {
    examples.iter().map(|ex| extract_spans(&ex.bio_labels)).collect()
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub lambda: f64,
    /// Fraction of the training file held out as the early-stopping split.
    pub dev_fraction: f64,
    pub pos_dim: usize,
    pub hidden: usize,
    /// Size of the position table; indices were clipped below this at parse.
    pub l_cap: usize,
}

impl Default for TrainSettings {
    fn default() -> TrainSettings {
        TrainSettings {
            lr: 0.001,
            batch_size: 25,
            dropout: 0.5,
            patience: 5,
            max_epochs: 100,
            lambda: 0.2,
            dev_fraction: 0.2,
            pos_dim: 300,
            hidden: 200,
            l_cap: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TagEpochStats {
    pub epoch: usize,
    pub train_j: f64,
    pub train_tag: f64,
    pub train_aux: Option<f64>,
    pub dev_f1: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ToweModel,
    pub history: Vec<TagEpochStats>,
    pub best_dev_f1: f64,
}

/// Splits off a dev set, then trains; the standard entry point.
pub fn train(
    variant: Variant,
    examples: &[ToweExample],
    vocab: &Vocab,
    frozen: Option<&SentimentClassifier>,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainOutcome> {
    if examples.len() < 2 {
        return Err(ModelError::Config(format!(
            "need at least 2 examples to split off a dev set, got {}",
            examples.len()
        )));
    }
    let (train_ex, dev_ex) = split_validation(examples, settings.dev_fraction, seed);
    train_on(variant, &train_ex, &dev_ex, vocab, frozen, settings, seed)
}

/// Trains on an explicit (train, dev) split with Adam and early stopping
/// on dev span-F1; returns the best-dev model.
pub fn train_on(
    variant: Variant,
    train_ex: &[ToweExample],
    dev_ex: &[ToweExample],
    vocab: &Vocab,
    frozen: Option<&SentimentClassifier>,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainOutcome> {
    if train_ex.is_empty() || dev_ex.is_empty() {
        return Err(ModelError::Config("empty train or dev set".into()));
    }
    let frozen = match (variant.needs_frozen(), frozen) {
        (true, None) => {
            return Err(ModelError::Config(format!(
                "variant {variant} requires a pretrained sentiment checkpoint"
            )));
        }
        (true, Some(sc)) => {
            if !sc.is_frozen() {
                return Err(ModelError::Config("sentiment classifier is not frozen".into()));
            }
            Some(sc)
        }
        (false, _) => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sc_width = frozen.map_or(0, |sc| 2 * sc.hidden());
    let model = ToweModel::init(
        variant,
        settings.lambda,
        vocab.dim(),
        settings.pos_dim,
        settings.hidden,
        settings.l_cap,
        sc_width,
        &mut rng,
    )?;
    train_model(model, train_ex, dev_ex, vocab, frozen, settings, &mut rng)
}

/// The inner loop, for callers that built the model themselves.
pub fn train_model(
    model: ToweModel,
    train_ex: &[ToweExample],
    dev_ex: &[ToweExample],
    vocab: &Vocab,
    frozen: Option<&SentimentClassifier>,
    settings: &TrainSettings,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    let needs_artifacts = model.variant.uses_encoder() || (model.variant.uses_aux() && model.lambda > 0.0);
    let (train_art, dev_art) = if needs_artifacts {
        let sc = frozen.ok_or_else(|| {
            ModelError::Config(format!(
                "variant {} requires a pretrained sentiment checkpoint",
                model.variant
            ))
        })?;
        (
            Some(precompute_artifacts(sc, vocab, train_ex)?),
            Some(precompute_artifacts(sc, vocab, dev_ex)?),
        )
    } else {
        (None, None)
    };

    let mut store = ParameterStore::new();
    for (name, t) in model.params() {
        store.register(name, &t).expect("unique parameter names");
    }
    let mut adam = Adam::new(settings.lr);

    let mut history = Vec::new();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_snapshot: Vec<Vec<f64>> = Vec::new();
    let mut stale = 0usize;

    for epoch in 0..settings.max_epochs {
        let shuffle: u64 = rng.random();
        let batches = make_towe_batches(train_ex, vocab, settings.batch_size, Some(shuffle));
        let n_batches = batches.len();
        let (mut j_sum, mut tag_sum, mut aux_sum) = (0.0, 0.0, 0.0);
        let mut aux_seen = false;
        for batch in batches {
            let tape = Tape::new();
            let loss = model.batch_loss(
                &tape,
                vocab,
                &batch,
                train_art.as_ref(),
                settings.dropout,
                true,
                rng,
            )?;
            j_sum += loss.j.item();
            tag_sum += loss.tag;
            if let Some(a) = loss.aux {
                aux_sum += a;
                aux_seen = true;
            }
            tape.backward(&loss.j)?;
            adam.step(&store).map_err(ModelError::Autograd)?;
        }
        let dev_f1 = model
            .evaluate(vocab, dev_ex, dev_art.as_ref(), settings.batch_size)?
            .f1;
        history.push(TagEpochStats {
            epoch,
            train_j: j_sum / n_batches as f64,
            train_tag: tag_sum / n_batches as f64,
            train_aux: aux_seen.then_some(aux_sum / n_batches as f64),
            dev_f1,
        });
        if dev_f1 > best_f1 {
            best_f1 = dev_f1;
            best_snapshot = model.params().iter().map(|(_, t)| t.to_vec()).collect();
            stale = 0;
            if best_f1 >= 1.0 {
                break;
            }
        } else {
            stale += 1;
            if stale >= settings.patience {
                break;
            }
        }
    }
    model.load_values(&best_snapshot);
    Ok(TrainOutcome { model, history, best_dev_f1: best_f1 })
}
