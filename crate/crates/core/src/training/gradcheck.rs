//! Finite-difference check of the full model objective at toy sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_losses, Encoded, LossNeeds};
use crate::data::{DomainLabel, OpinionLabel, Position, Sentence, Sentiment, UnifiedTag};
use crate::diffcore::gradcheck::{finite_difference_check, CheckOptions, GradCheckReport};
use crate::embeddings::{EmbeddingMatrix, Vocabulary};
use crate::error::Result;
use crate::model::{Model, ModelConfig, ModelMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDims {
    pub mode: ModelMode,
    pub tokens: usize,
    pub dim: usize,
    pub k: usize,
    pub hops: usize,
    pub rho: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for ToyDims {
    fn default() -> Self {
        ToyDims {
            mode: ModelMode::AdSal,
            tokens: 3,
            dim: 4,
            k: 2,
            hops: 2,
            rho: 1.0,
            gamma: 1.0,
            seed: 0,
        }
    }
}

impl ToyDims {
    /// Model settings for the check: every size equal to `dim`, dropout off,
    /// embeddings trainable so that the table is checked too.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            embed_dim: self.dim,
            boundary_hidden: self.dim,
            unified_hidden: self.dim,
            k: self.k,
            hops: self.hops,
            dropout: 0.0,
            tune_embeddings: true,
            detach_selector: false,
            ..ModelConfig::default()
        }
    }
}

fn toy_sentence(t: usize, domain: DomainLabel, rng: &mut ChaCha8Rng) -> Sentence {
    let tokens: Vec<String> = (0..t).map(|i| format!("{domain:?}{i}")).collect();
    let mut s = Sentence::unlabeled(tokens, domain);
    s.unified_tags = Some(
        (0..t)
            .map(|_| match rng.gen_range(0..3) {
                0 => UnifiedTag::O,
                1 => UnifiedTag::Aspect(Position::S, Sentiment::Pos),
                _ => UnifiedTag::Aspect(Position::S, Sentiment::Neg),
            })
            .collect(),
    );
    s.opinion_labels = (0..t)
        .map(|_| {
            if rng.gen_bool(0.5) {
                OpinionLabel::Opinion
            } else {
                OpinionLabel::NotOpinion
            }
        })
        .collect();
    s
}

/// Step size for [`check_model_gradients`]: large enough to keep roundoff
/// well below the smallest gradients, small enough to stay off the relu kinks.
pub const MODEL_CHECK_EPS: f64 = 1e-4;

/// Check `L_M + rho L_O + gamma L_D` on one labeled source sentence and one
/// target sentence. The reversal layer is run with lambda = -1, which makes
/// it the identity, and the selective weights are not detached, so the
/// analytic gradient is the exact derivative of the objective's forward value.
/// Every parameter is redrawn from U(-1, 1) before checking.
pub fn check_model_gradients(dims: &ToyDims, opts: &CheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(dims.seed);
    let cfg = dims.model_config();
    let src = toy_sentence(dims.tokens, DomainLabel::Source, &mut rng);
    let tgt = toy_sentence(dims.tokens, DomainLabel::Target, &mut rng);
    let vocab = Vocabulary::from_sentences([&src, &tgt]);
    let emb: EmbeddingMatrix<f64> = EmbeddingMatrix::random(&vocab, cfg.embed_dim, &mut rng);
    let (mut model, mut store) = Model::init(&cfg, &emb, &mut rng)?;
    model.config.lambda = -1.0;
    // Small default initial values make the stacked activations nearly
    // degenerate at toy sizes; check at a generic point instead.
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.value_mut(id).data_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
    let src = Encoded::new(&src, &vocab);
    let tgt = Encoded::new(&tgt, &vocab);
    let (rho, gamma) = (dims.rho, dims.gamma);
    let needs = LossNeeds {
        main: true,
        opinion: true,
        domain: true,
    };
    finite_difference_check(
        &mut store,
        |g| {
            let l = batch_losses(g, &model, &[&src], &[&tgt], needs)?;
            let mut root = l.main.expect("one labeled sentence");
            if let Some(o) = l.opinion {
                let w = g.scale(o, rho);
                root = g.add(root, w)?;
            }
            if let Some(d) = l.domain {
                let w = g.scale(d, gamma);
                root = g.add(root, w)?;
            }
            Ok(root)
        },
        opts,
    )
}
