//! End-to-end finite-difference checks of the model losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corruption::{span_corruption_example, CorruptionConfig};
use crate::model::{init_params, Forward, ModelConfig};
use crate::retrieval::{contrastive_loss, RetrievalPair};
use crate::tensor::{grad_check, GradCheckOptions, GradReport, Params};
use crate::train::data::random_tokens;
use crate::train::{seq2seq_loss, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Span-corruption cross-entropy through encoder and decoder.
    Seq2seq,
    /// In-batch Chamfer contrastive loss through the encoder.
    Contrastive,
}

/// Randomizes norm scales and `decal.v` so their gradients are generic;
/// at their initial values several of them sit at symmetric points.
fn perturb(params: &mut Params<f64>, rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for (name, t) in params.iter_mut() {
        if name.ends_with("norm") || name == "decal.v" {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
}

/// Gradient check of a freshly initialized float64 model on a small
/// seeded batch.
pub fn model_grad_check(cfg: &ModelConfig, objective: Objective, seed: u64, opts: &GradCheckOptions) -> Result<GradReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Params<f64> = init_params(cfg, &mut rng)?;
    perturb(&mut params, &mut rng);
    match objective {
        Objective::Seq2seq => {
            let corruption = CorruptionConfig::default();
            let batch = (0..2)
                .map(|_| span_corruption_example(&random_tokens(11, 26, &mut rng), &corruption, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            grad_check(&params, opts, |g, b| {
                let (loss, _) = seq2seq_loss(&mut Forward::new(cfg, b), g, &batch)?;
                Ok::<_, TrainError>(loss)
            })
        }
        Objective::Contrastive => {
            let batch: Vec<RetrievalPair> = (0..2)
                .map(|_| {
                    let passage = random_tokens(10, 26, &mut rng);
                    RetrievalPair {
                        query: passage[2..6].to_vec(),
                        passage,
                    }
                })
                .collect();
            grad_check(&params, opts, |g, b| {
                let (loss, _) = contrastive_loss(&mut Forward::new(cfg, b), g, &batch).map_err(|e| TrainError::Data(e.to_string()))?;
                Ok::<_, TrainError>(loss)
            })
        }
    }
}
