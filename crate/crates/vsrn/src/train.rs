//! Training harness: adaptive-moment optimizer, the epoch loop with its
//! two-phase learning-rate schedule and best-validation snapshot rule, and
//! the evaluation orchestration (folds and score-average ensembling).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::corpus::{CorpusItem, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::eval::{
    ensemble_scores, fold_average, full_report, similarity_matrix, RetrievalReport,
};
use crate::global::order_regions;
use crate::model::{batch_loss, encode_items, BatchItem, ModelDims, ModelParams};
use crate::objectives::LossBreakdown;
use crate::tensor::Tape;

/// Global-norm gradient clip applied before every optimizer step.
const GRAD_CLIP_NORM: f64 = 2.0;

/// Adaptive-moment estimation with bias correction.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update from the gradients currently stored in `params`.
    pub fn step(&mut self, lr: f64, params: &mut ModelParams) {
        self.step_count += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let (beta1, beta2, epsilon) = (self.beta1, self.beta2, self.epsilon);
        let first = &mut self.first;
        let second = &mut self.second;
        params.for_each_mut(|name, tensor| {
            let n = tensor.numel();
            let m = first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let grad = tensor.grad().expect("model parameters carry gradients").to_vec();
            let values = tensor.values_mut();
            for j in 0..n {
                m[j] = beta1 * m[j] + (1.0 - beta1) * grad[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * grad[j] * grad[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                values[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        });
    }
}

/// Scale all gradients so their global norm is at most `max_norm`; returns
/// the pre-clip norm.
pub fn clip_global_norm(params: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = params.grad_norm_squared().sqrt();
    if norm > max_norm {
        params.scale_grads(max_norm / norm);
    }
    norm
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub matching_loss: f64,
    pub generation_loss: f64,
    pub val_rsum: f64,
}

impl EpochLog {
    pub fn format_line(&self) -> String {
        format!(
            "epoch {} lr {:.6} L_M {:.6} L_G {:.6} val_rsum {:.4}",
            self.epoch, self.lr, self.matching_loss, self.generation_loss, self.val_rsum
        )
    }
}

/// Result of a training run: the best-validation snapshot and the full log.
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Two-phase schedule: the initial rate through `decay_epoch`, the decayed
/// rate afterwards.
pub fn learning_rate(config: &TrainConfig, epoch: usize) -> f64 {
    if epoch <= config.decay_epoch {
        config.lr_initial
    } else {
        config.lr_decayed
    }
}

/// Train on the corpus's train split, evaluating the validation split after
/// every epoch and returning the snapshot with the highest validation rsum
/// (earliest epoch on ties).
pub fn train(config: &TrainConfig, corpus: &SyntheticCorpus) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.train_items().is_empty() {
        return Err(Error::Parameter("corpus has no training items".into()));
    }
    if corpus.val_items().len() < 10 {
        return Err(Error::Parameter(format!(
            "validation split needs at least 10 items for recall at 10, got {}",
            corpus.val_items().len()
        )));
    }
    if corpus.feature_dim != config.feature_dim {
        return Err(Error::Config(format!(
            "config feature_dim {} does not match corpus feature_dim {}",
            config.feature_dim, corpus.feature_dim
        )));
    }

    let dims = ModelDims {
        feature_dim: config.feature_dim,
        joint_dim: config.joint_dim,
        vocab_size: corpus.vocab.size(),
        rrr_layers: config.rrr_layers,
    };
    let mut model = ModelParams::init(dims, config.seed);
    let mut adam = Adam::new();
    let mut shuffle_rng =
        ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));

    let train_items = corpus.train_items();
    let orders: Vec<Vec<usize>> = train_items
        .iter()
        .enumerate()
        .map(|(index, item)| {
            order_regions(&item.regions, config.ordering.strategy(config.seed, index))
        })
        .collect();

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, u32, Vec<(String, crate::tensor::Tensor)>)> = None;

    for epoch in 1..=config.epochs {
        let lr = learning_rate(config, epoch);
        let mut indices: Vec<usize> = (0..train_items.len()).collect();
        indices.shuffle(&mut shuffle_rng);

        let mut epoch_matching = 0.0;
        let mut epoch_generation = 0.0;
        let mut batches = 0usize;
        for (batch_index, chunk) in indices.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let ids = model.bind(&mut tape);
            let items: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&i| BatchItem {
                    regions: &train_items[i].regions,
                    caption: &train_items[i].caption,
                    order: orders[i].clone(),
                })
                .collect();
            let loss = match batch_loss(&mut tape, &ids, &items, config) {
                Ok(loss) => loss,
                Err(Error::Contract(msg)) => {
                    return Err(Error::Contract(format!(
                        "bad loss at epoch {epoch}, batch {batch_index}: {msg}"
                    )))
                }
                Err(other) => return Err(other),
            };
            let LossBreakdown {
                matching,
                generation,
                total,
            } = loss.breakdown;
            if !total.is_finite() {
                return Err(Error::Contract(format!(
                    "loss is not finite at epoch {epoch}, batch {batch_index}: \
                     matching {matching}, generation {generation}"
                )));
            }
            tape.backward(loss.total)?;
            model.accumulate_grads(&tape, &ids)?;
            clip_global_norm(&mut model, GRAD_CLIP_NORM);
            adam.step(lr, &mut model);
            model.zero_grads();

            epoch_matching += matching;
            epoch_generation += generation;
            batches += 1;
        }

        let val_report = evaluate_single(&model, config, corpus.val_items())?;
        let val_rsum = val_report.rsum();
        log.push(EpochLog {
            epoch,
            lr,
            matching_loss: epoch_matching / batches as f64,
            generation_loss: epoch_generation / batches as f64,
            val_rsum,
        });
        let improved = best.as_ref().is_none_or(|(rsum, _, _)| val_rsum > *rsum);
        if improved {
            best = Some((val_rsum, epoch as u32, model.named_clone()));
        }
    }

    let (val_rsum, epoch, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best: Checkpoint {
            config: config.clone(),
            epoch,
            val_rsum,
            params,
        },
        log,
    })
}

/// Evaluate one model on a list of items (single fold).
pub fn evaluate_single(
    model: &ModelParams,
    config: &TrainConfig,
    items: &[CorpusItem],
) -> Result<RetrievalReport> {
    evaluate_models(&[(model, config)], items, 1)
}

/// Evaluation protocol: split the items into `folds` contiguous equal-size
/// folds, ensemble the models' similarity matrices per fold by averaging
/// scores, and average the per-fold reports.
pub fn evaluate_models(
    models: &[(&ModelParams, &TrainConfig)],
    items: &[CorpusItem],
    folds: usize,
) -> Result<RetrievalReport> {
    if models.is_empty() {
        return Err(Error::Parameter("need at least one model".into()));
    }
    if folds == 0 || items.is_empty() {
        return Err(Error::Parameter(
            "need at least one fold and one item".into(),
        ));
    }
    if items.len() % folds != 0 {
        return Err(Error::Parameter(format!(
            "{} items cannot split into {folds} equal folds",
            items.len()
        )));
    }
    let fold_size = items.len() / folds;
    let mut reports = Vec::with_capacity(folds);
    for fold in items.chunks(fold_size) {
        let pairs: Vec<(&crate::region::RegionSet, &crate::text::TokenSequence)> =
            fold.iter().map(|item| (&item.regions, &item.caption)).collect();
        let mut matrices = Vec::with_capacity(models.len());
        for (model, config) in models {
            let (images, captions) = encode_items(model, config, &pairs)?;
            matrices.push(similarity_matrix(&images, &captions, 1)?);
        }
        let combined = ensemble_scores(&matrices)?;
        reports.push(full_report(&combined)?);
    }
    fold_average(&reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, CorpusSpec};

    fn tiny_corpus(seed: u64) -> SyntheticCorpus {
        generate_synthetic_corpus(&CorpusSpec {
            n_train: 12,
            n_val: 10,
            n_test: 10,
            n_concepts: 10,
            concepts_per_item: 2,
            k_regions: 3,
            feature_dim: 8,
            canvas_width: 32,
            canvas_height: 32,
            seed,
        })
        .unwrap()
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            joint_dim: 8,
            feature_dim: 8,
            rrr_layers: 1,
            batch_size: 6,
            epochs,
            decay_epoch: epochs.min(2),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let corpus = tiny_corpus(1);
        let mut config = tiny_config(2);
        config.lr_initial = 0.0;
        config.lr_decayed = 0.0;
        let outcome = train(&config, &corpus).unwrap();

        let dims = ModelDims {
            feature_dim: config.feature_dim,
            joint_dim: config.joint_dim,
            vocab_size: corpus.vocab.size(),
            rrr_layers: config.rrr_layers,
        };
        let fresh = ModelParams::init(dims, config.seed).named_clone();
        assert_eq!(outcome.best.params.len(), fresh.len());
        for ((name_a, a), (name_b, b)) in outcome.best.params.iter().zip(&fresh) {
            assert_eq!(name_a, name_b);
            let bits = |t: &crate::tensor::Tensor| {
                t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            };
            assert_eq!(bits(a), bits(b), "{name_a} changed under zero lr");
        }
    }

    #[test]
    fn learning_rate_schedule_is_exact() {
        let config = TrainConfig {
            epochs: 30,
            decay_epoch: 15,
            lr_initial: 2e-4,
            lr_decayed: 2e-5,
            ..TrainConfig::default()
        };
        for epoch in 1..=30 {
            let expect = if epoch <= 15 { 2e-4 } else { 2e-5 };
            assert_eq!(learning_rate(&config, epoch), expect);
        }
    }

    #[test]
    fn training_is_reproducible_per_seed() {
        let corpus = tiny_corpus(2);
        let config = tiny_config(3);
        let a = train(&config, &corpus).unwrap();
        let b = train(&config, &corpus).unwrap();
        assert_eq!(a.log, b.log);
        for ((_, ta), (_, tb)) in a.best.params.iter().zip(&b.best.params) {
            assert_eq!(ta.values(), tb.values());
        }
    }

    #[test]
    fn disabled_generation_loss_is_exactly_zero_and_decoder_frozen() {
        let corpus = tiny_corpus(3);
        let mut config = tiny_config(3);
        config.use_generation_loss = false;
        let outcome = train(&config, &corpus).unwrap();
        assert!(outcome.log.iter().all(|e| e.generation_loss == 0.0));

        let dims = ModelDims {
            feature_dim: config.feature_dim,
            joint_dim: config.joint_dim,
            vocab_size: corpus.vocab.size(),
            rrr_layers: config.rrr_layers,
        };
        let fresh = ModelParams::init(dims, config.seed);
        let trained = outcome.best.to_model().unwrap();
        assert_eq!(
            trained.text.decoder.w_z.values(),
            fresh.text.decoder.w_z.values()
        );
        assert_eq!(trained.text.output_w.values(), fresh.text.output_w.values());
        assert_ne!(
            trained.text.encoder.w_z.values(),
            fresh.text.encoder.w_z.values()
        );
    }

    #[test]
    fn snapshot_takes_max_val_rsum_earliest_on_ties() {
        let corpus = tiny_corpus(4);
        let config = tiny_config(4);
        let outcome = train(&config, &corpus).unwrap();
        let best_epoch = outcome.best.epoch as usize;
        let best_rsum = outcome.best.val_rsum;
        for entry in &outcome.log {
            if entry.epoch < best_epoch {
                assert!(entry.val_rsum < best_rsum);
            } else {
                assert!(entry.val_rsum <= best_rsum);
            }
        }
    }

    #[test]
    fn exploding_step_aborts_with_batch_diagnostic() {
        let corpus = tiny_corpus(5);
        let mut config = tiny_config(3);
        config.lr_initial = 1e300;
        config.lr_decayed = 1e300;
        let msg = match train(&config, &corpus) {
            Err(err) => err.to_string(),
            Ok(_) => panic!("training should abort on a non-finite loss"),
        };
        assert!(msg.contains("epoch") && msg.contains("batch"), "{msg}");
    }

    #[test]
    fn fold_split_must_be_exact() {
        let corpus = tiny_corpus(6);
        let config = tiny_config(1);
        let dims = ModelDims {
            feature_dim: config.feature_dim,
            joint_dim: config.joint_dim,
            vocab_size: corpus.vocab.size(),
            rrr_layers: config.rrr_layers,
        };
        let model = ModelParams::init(dims, 0);
        assert!(matches!(
            evaluate_models(&[(&model, &config)], corpus.test_items(), 3),
            Err(Error::Parameter(_))
        ));
    }
}
