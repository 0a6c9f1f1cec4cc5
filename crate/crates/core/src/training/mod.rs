//! Objectives, minibatch SGD with dev-perplexity learning-rate halving,
//! and fine-tuning on parallel data.

mod agreement;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use agreement::{agreement_mse, agreement_mul, Agreement};

use crate::corpus::{supervision_matrix, PartiallyAlignedPair, Sentence, SupervisionMatrix};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{forward_backward, Dropout, ExampleRef, ModelParams, Objective};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub agreement: Agreement,
    pub minibatch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    pub halve_on_dev_increase: bool,
    /// Global gradient-norm clipping threshold.
    pub clip_norm: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda: 0.3,
            agreement: Agreement::Mse,
            minibatch: 16,
            lr: 0.1,
            epochs: 20,
            dropout: 0.2,
            seed: 1,
            halve_on_dev_increase: true,
            clip_norm: 5.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::Validation(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Validation(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.minibatch == 0 {
            return Err(Error::Validation("minibatch must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            lambda: self.lambda,
            agreement: self.agreement,
        }
    }
}

/// An id-encoded training sentence pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    /// One per prediction (`tgt.len() + 1`, the last is the end symbol).
    pub gates: Vec<bool>,
    /// `None` disables the agreement term (parallel data).
    pub supervision: Option<SupervisionMatrix>,
}

impl TrainingExample {
    /// Fully parallel pair: every gate open, no agreement term.
    pub fn parallel(src: Vec<usize>, tgt: Vec<usize>) -> Self {
        let gates = vec![true; tgt.len() + 1];
        TrainingExample {
            src,
            tgt,
            gates,
            supervision: None,
        }
    }

    /// Partially aligned pair: gates open exactly on aligned target words.
    pub fn partial(pair: &PartiallyAlignedPair, vocab: &Vocabulary) -> Self {
        let sup = supervision_matrix(pair);
        let mut gates: Vec<bool> = (0..sup.rows()).map(|i| sup.row_is_aligned(i)).collect();
        gates.push(false);
        TrainingExample {
            src: vocab.src.encode(&pair.source),
            tgt: vocab.tgt.encode(&pair.target),
            gates,
            supervision: Some(sup),
        }
    }

    pub fn from_tokens(src: &[String], tgt: &[String], vocab: &Vocabulary) -> Self {
        TrainingExample::parallel(vocab.src.encode(src), vocab.tgt.encode(tgt))
    }

    pub fn as_ref(&self) -> ExampleRef<'_> {
        ExampleRef {
            src: &self.src,
            tgt: &self.tgt,
            gates: &self.gates,
            supervision: self.supervision.as_ref(),
        }
    }
}

/// Encodes tokenized parallel pairs, skipping pairs with an empty source.
pub fn encode_parallel(pairs: &[(Sentence, Sentence)], vocab: &Vocabulary) -> Vec<TrainingExample> {
    pairs
        .iter()
        .filter(|(s, _)| !s.is_empty())
        .map(|(s, t)| TrainingExample::from_tokens(s, t, vocab))
        .collect()
}

#[derive(Debug, Clone)]
pub struct SentenceLoss {
    /// Sentence objective: gated log-likelihood plus `λ·Δ`.
    pub objective: f64,
    pub log_likelihood: f64,
    pub agreement: f64,
    /// Gradient of `-objective`.
    pub grads: ModelParams,
}

/// Gated log-likelihood plus weighted attention agreement, with gradients.
pub fn sentence_loss(ex: &TrainingExample, params: &ModelParams, cfg: &TrainingConfig) -> Result<SentenceLoss> {
    let mut grads = params.zeros_like();
    let parts = forward_backward(params, ex.as_ref(), cfg.objective(), None, Some(&mut grads))?;
    if !parts.loss.is_finite() {
        return Err(Error::NonFiniteLoss(parts.loss));
    }
    Ok(SentenceLoss {
        objective: -parts.loss,
        log_likelihood: -parts.nll,
        agreement: parts.agreement,
        grads,
    })
}

/// Negative log-likelihood of a parallel pair with every gate open, and its gradient.
pub fn baseline_loss(src: &[usize], tgt: &[usize], params: &ModelParams) -> Result<(f64, ModelParams)> {
    let ex = TrainingExample::parallel(src.to_vec(), tgt.to_vec());
    let mut grads = params.zeros_like();
    let parts = forward_backward(
        params,
        ex.as_ref(),
        Objective::likelihood_only(),
        None,
        Some(&mut grads),
    )?;
    Ok((parts.nll, grads))
}

/// `exp(total NLL / predictions)` in eval mode. `None` for an empty set.
pub fn perplexity(params: &ModelParams, examples: &[TrainingExample], exec: Exec) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let parts = exec.map(examples, |ex| {
        forward_backward(params, ex.as_ref(), Objective::likelihood_only(), None, None)
    });
    let (mut nll, mut tokens) = (0.0, 0usize);
    for p in parts {
        let p = p?;
        nll += p.nll;
        tokens += p.tokens;
    }
    Ok(Some((nll / tokens as f64).exp()))
}

/// Halves the learning rate after any epoch whose dev perplexity is
/// higher than the previous epoch's.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    lr: f64,
    enabled: bool,
    last: Option<f64>,
}

impl LrSchedule {
    pub fn new(lr: f64, enabled: bool) -> Self {
        LrSchedule {
            lr,
            enabled,
            last: None,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records the dev perplexity at the end of an epoch and returns the
    /// rate for the next one.
    pub fn observe(&mut self, dev_ppl: Option<f64>) -> f64 {
        if let (Some(prev), Some(now)) = (self.last, dev_ppl) {
            if self.enabled && now > prev {
                self.lr /= 2.0;
            }
        }
        if dev_ppl.is_some() {
            self.last = dev_ppl;
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Rate used during this epoch.
    pub lr: f64,
    /// Mean per-sentence loss over the epoch.
    pub train_loss: f64,
    pub dev_perplexity: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: ModelParams,
    /// Parameters after the epoch with the lowest dev perplexity (the last
    /// epoch when there is no dev set).
    pub best: ModelParams,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochLog>,
}

/// One SGD update from an already averaged gradient.
pub fn sgd_step(params: &mut ModelParams, grads: &mut ModelParams, lr: f64, clip_norm: f64) {
    let norm = grads.sq_norm().sqrt();
    if clip_norm > 0.0 && norm > clip_norm {
        grads.scale(clip_norm / norm);
    }
    params.add_scaled(grads, -lr);
}

/// Minibatch SGD over `dataset` with the dev set driving rate halving and
/// best-model selection. A step follows the gradient of the minibatch mean
/// of per-sentence losses.
pub fn train(
    dataset: &[TrainingExample],
    dev: &[TrainingExample],
    params: ModelParams,
    cfg: &TrainingConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    train_with(dataset, params, cfg, exec, |p, _| perplexity(p, dev, exec))
}

/// Like [`train`], with dev perplexity supplied by `dev_ppl(params, epoch)`.
pub fn train_with<F>(
    dataset: &[TrainingExample],
    mut params: ModelParams,
    cfg: &TrainingConfig,
    exec: Exec,
    mut dev_ppl: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&ModelParams, usize) -> Result<Option<f64>>,
{
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            best: params.clone(),
            last: params,
            best_epoch: None,
            log: Vec::new(),
        });
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let objective = cfg.objective();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut schedule = LrSchedule::new(cfg.lr, cfg.halve_on_dev_increase);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.minibatch).enumerate() {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.next_u64()).collect();
            let results = exec.map_range(batch.len(), |k| {
                let mut g = params.zeros_like();
                let dropout = (cfg.dropout > 0.0).then_some(Dropout {
                    rate: cfg.dropout,
                    seed: seeds[k],
                });
                forward_backward(&params, dataset[batch[k]].as_ref(), objective, dropout, Some(&mut g)).map(|p| (p, g))
            });
            let mut grads: Option<ModelParams> = None;
            for r in results {
                let (parts, g) = r?;
                if !parts.loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch: b,
                        value: parts.loss,
                    });
                }
                epoch_loss += parts.loss;
                match grads.as_mut() {
                    Some(acc) => acc.add_scaled(&g, 1.0),
                    None => grads = Some(g),
                }
            }
            let mut grads = grads.expect("non-empty batch");
            grads.scale(1.0 / batch.len() as f64);
            if !grads.sq_norm().is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    value: f64::NAN,
                });
            }
            sgd_step(&mut params, &mut grads, lr, cfg.clip_norm);
        }

        let dev = dev_ppl(&params, epoch)?;
        log.push(EpochLog {
            epoch,
            lr,
            train_loss: epoch_loss / dataset.len() as f64,
            dev_perplexity: dev,
        });
        if let Some(ppl) = dev {
            if best.as_ref().is_none_or(|(b, _, _)| ppl < *b) {
                best = Some((ppl, epoch, params.clone()));
            }
        }
        schedule.observe(dev);
    }

    let (best, best_epoch) = match best {
        Some((_, e, p)) => (p, Some(e)),
        None => (params.clone(), Some(cfg.epochs)),
    };
    Ok(TrainOutcome {
        last: params,
        best,
        best_epoch,
        log,
    })
}

/// Largest tolerated fraction of unknown tokens when fine-tuning a
/// checkpoint on new parallel data.
pub const MAX_FINE_TUNE_OOV: f64 = 0.5;

/// Continues training a converged model on parallel pairs with the plain
/// likelihood objective (all gates open, no agreement term).
pub fn fine_tune(
    params: ModelParams,
    vocab: &Vocabulary,
    parallel: &[(Sentence, Sentence)],
    dev: &[(Sentence, Sentence)],
    cfg: &TrainingConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    if params.config.src_vocab != vocab.src.len() || params.config.tgt_vocab != vocab.tgt.len() {
        return Err(Error::VocabMismatch(format!(
            "model expects {}/{} words, vocabulary has {}/{}",
            params.config.src_vocab,
            params.config.tgt_vocab,
            vocab.src.len(),
            vocab.tgt.len()
        )));
    }
    let src_oov = vocab.src.oov_rate(parallel.iter().map(|(s, _)| s.as_slice()));
    let tgt_oov = vocab.tgt.oov_rate(parallel.iter().map(|(_, t)| t.as_slice()));
    if src_oov > MAX_FINE_TUNE_OOV || tgt_oov > MAX_FINE_TUNE_OOV {
        return Err(Error::VocabMismatch(format!(
            "corpus is {:.0}% / {:.0}% out of the checkpoint vocabulary",
            100.0 * src_oov,
            100.0 * tgt_oov
        )));
    }
    let examples = encode_parallel(parallel, vocab);
    if examples.is_empty() {
        return Ok(TrainOutcome {
            best: params.clone(),
            last: params,
            best_epoch: None,
            log: Vec::new(),
        });
    }
    let dev = encode_parallel(dev, vocab);
    train(&examples, &dev, params, cfg, exec)
}
