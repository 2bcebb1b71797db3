//! Losses, the two-stage update, the epoch loop and multi-seed suites.

mod config;
mod gradcheck;
mod suite;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{Alternation, Schedule, TrainingConfig};
pub use gradcheck::{check_model_gradients, ToyDims, MODEL_CHECK_EPS};
pub use suite::{mean_std, run_suite, RunSummary, SuiteReport, BEST_CHECKPOINT, LOG_FILE};

use crate::adversarial::sal_loss;
use crate::data::{unified_to_boundary, Batch, DomainLabel, MixedBatches, Sentence, TransferPair};
use crate::diffcore::checkpoint::Checkpoint;
use crate::diffcore::{
    adam_step, clip_global_norm, AdamState, Gradients, Graph, NodeId, ParamStore, Partition, Real,
};
use crate::embeddings::{EmbeddingMatrix, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_corpus, CorpusEval};
use crate::memory::DmiCache;
use crate::model::{Model, ModelMode, Needs};

pub const FEATURE_AND_PREDICTOR: [Partition; 2] = [Partition::Feature, Partition::WordPredictor];
pub const DISCRIMINATOR_AND_FEATURE: [Partition; 2] = [Partition::Discriminator, Partition::Feature];

// Independent random streams per concern.
const STREAM_INIT: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_BATCH: u64 = 3;
const STREAM_OOV: u64 = 4;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// A sentence mapped to vocabulary rows and label indices.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub unified: Option<Vec<usize>>,
    pub boundary: Option<Vec<usize>>,
    pub opinion: Vec<usize>,
    pub domain: DomainLabel,
}

impl Encoded {
    pub fn new(s: &Sentence, vocab: &Vocabulary) -> Self {
        Encoded {
            ids: vocab.encode(&s.tokens),
            unified: s.unified_tags.as_ref().map(|t| t.iter().map(|x| x.index()).collect()),
            boundary: s
                .unified_tags
                .as_ref()
                .map(|t| unified_to_boundary(t).iter().map(|x| x.index()).collect()),
            opinion: s.opinion_labels.iter().map(|o| o.index()).collect(),
            domain: s.domain,
        }
    }
}

/// Main-task loss of one sentence: summed word cross-entropies of the
/// boundary and unified heads.
fn sentence_main_loss<F: Real>(
    g: &mut Graph<'_, F>,
    boundary_logits: NodeId,
    unified_logits: NodeId,
    s: &Encoded,
    index: usize,
) -> Result<NodeId> {
    let (Some(u), Some(b)) = (&s.unified, &s.boundary) else {
        return Err(Error::Unlabeled(index));
    };
    let lb = g.cross_entropy_rows(boundary_logits, b)?;
    let lu = g.cross_entropy_rows(unified_logits, u)?;
    let lb = g.sum(lb);
    let lu = g.sum(lu);
    g.add(lb, lu)
}

fn sum_nodes<F: Real>(g: &mut Graph<'_, F>, nodes: &[NodeId]) -> Result<Option<NodeId>> {
    let mut it = nodes.iter().copied();
    let Some(mut acc) = it.next() else { return Ok(None) };
    for n in it {
        acc = g.add(acc, n)?;
    }
    Ok(Some(acc))
}

fn mean<F: Real>(g: &mut Graph<'_, F>, nodes: &[NodeId]) -> Result<Option<NodeId>> {
    let n = nodes.len();
    Ok(sum_nodes(g, nodes)?.map(|s| g.scale(s, F::of(1.0 / n as f64))))
}

/// Loss nodes of one forward pass over a batch.
pub struct BatchLosses {
    /// Mean over labeled sentences of the boundary + unified loss.
    pub main: Option<NodeId>,
    /// Mean over all sentences of the opinion loss.
    pub opinion: Option<NodeId>,
    /// Mean over all sentences of the (weighted) domain loss.
    pub domain: Option<NodeId>,
}

/// Which losses a pass needs.
#[derive(Clone, Copy, Debug)]
pub struct LossNeeds {
    pub main: bool,
    pub opinion: bool,
    pub domain: bool,
}

/// Build the requested losses for `labeled` (tagged sentences) and
/// `unlabeled` sentences in one graph.
pub fn batch_losses<F: Real>(
    g: &mut Graph<'_, F>,
    model: &Model,
    labeled: &[&Encoded],
    unlabeled: &[&Encoded],
    needs: LossNeeds,
) -> Result<BatchLosses> {
    let mode = model.config.mode;
    let opinion = needs.opinion && mode.uses_dmi();
    let domain = needs.domain && mode.is_adversarial();
    let mut cache = DmiCache::default();
    let mut main = Vec::new();
    let mut op = Vec::new();
    let mut dom = Vec::new();
    let all = labeled.iter().map(|s| (true, *s)).chain(unlabeled.iter().map(|s| (false, *s)));
    for (i, (is_labeled, s)) in all.enumerate() {
        let want_main = needs.main && is_labeled;
        if !(want_main || opinion || domain) {
            continue;
        }
        let out = model.forward(
            g,
            &mut cache,
            &s.ids,
            Needs {
                unified: want_main,
                opinion,
                domain,
            },
        )?;
        if want_main {
            let u = out.unified_logits.expect("requested");
            main.push(sentence_main_loss(g, out.boundary_logits, u, s, i)?);
        }
        if opinion {
            let z = out.opinion_logits.expect("dmi mode");
            let ce = g.cross_entropy_rows(z, &s.opinion)?;
            op.push(g.sum(ce));
        }
        if domain {
            let z = out.domain_logits.expect("adversarial mode");
            let selector = if mode.is_selective() { out.selector() } else { None };
            dom.push(sal_loss(g, z, s.domain, selector, model.config.detach_selector)?);
        }
    }
    Ok(BatchLosses {
        main: mean(g, &main)?,
        opinion: mean(g, &op)?,
        domain: mean(g, &dom)?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub loss_main: f64,
    pub loss_opinion: f64,
    pub loss_domain: f64,
    /// Global gradient norm before and after clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage1: StageMetrics,
    pub stage2: Option<StageMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_main: f64,
    pub loss_opinion: f64,
    pub loss_domain: f64,
    pub max_clipped_norm: f64,
    pub val_ad_f1: f64,
    pub val_ads_f1: f64,
    pub best: bool,
}

/// Metadata stored with every checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainingConfig,
    pub seed: u64,
    pub epoch: usize,
    pub vocab: Vocabulary,
}

/// A model ready for inference, restored from a checkpoint.
pub struct LoadedModel<F> {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub store: ParamStore<F>,
}

impl<F: Real> LoadedModel<F> {
    pub fn from_checkpoint(ck: Checkpoint<F>) -> Result<Self> {
        let mut meta: CheckpointMeta =
            serde_json::from_str(&ck.meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        meta.vocab.reindex();
        let model = Model::bind(&meta.config.model, &ck.params)?;
        Ok(LoadedModel {
            meta,
            model,
            store: ck.params,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(crate::diffcore::checkpoint::load(path)?)
    }
}

/// Gradients of the trainable members of `subset` from a graph after
/// `backward`. Members the graph never touched get zeros.
pub fn collect_grads(g: &Graph<'_, f32>, subset: &[Partition]) -> Gradients<f32> {
    let store = g.store();
    let mut grads = Gradients::zeros_for(store, subset);
    for id in store.select(subset) {
        if let Some(gr) = g.param_node(id).and_then(|n| g.grad(n)) {
            grads.accumulate(store, id, gr);
        }
    }
    grads
}

fn check_finite(g: &Graph<'_, f32>, root: NodeId, what: &str) -> Result<()> {
    if g.scalar(root).is_finite() {
        return Ok(());
    }
    let (node, op) = g
        .first_non_finite()
        .map_or((root.index(), "unknown"), |(n, op)| (n.index(), op));
    Err(Error::NonFinite {
        what: what.to_string(),
        node,
        op,
    })
}

/// Best-so-far snapshot kept in memory during training.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub epoch: usize,
    pub val_ads_f1: f64,
    pub checkpoint: Checkpoint<f32>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub records: Vec<EpochRecord>,
    /// `None` only when no epoch ran.
    pub best: Option<Snapshot>,
}

/// Training state for one seed.
pub struct Trainer {
    pub config: TrainingConfig,
    pub seed: u64,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub vocab: Vocabulary,
    task_opt: AdamState<f32>,
    adv_opt: AdamState<f32>,
    labeled: Vec<Encoded>,
    unlabeled: Vec<Encoded>,
    validation: Vec<Sentence>,
    batches: MixedBatches,
    dropout_rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    /// Set up vocabulary, embeddings and parameters. Without `embeddings`
    /// every word vector is drawn at random.
    pub fn new(
        pair: &TransferPair,
        config: &TrainingConfig,
        seed: u64,
        embeddings: Option<&std::path::Path>,
    ) -> Result<Self> {
        config.validate()?;
        let mode = config.model.mode;
        if pair.source_train.is_empty() {
            return Err(Error::EmptyCorpus("source training corpus"));
        }
        if pair.target_train.is_empty() {
            return Err(Error::EmptyCorpus("target training corpus"));
        }
        // The in-domain reference learns from target labels and selects on them.
        let (labeled_sents, validation) = if mode == ModelMode::BaseTo {
            let t = pair.target_train_supervised()?;
            (t.clone(), t)
        } else {
            (pair.source_train.clone(), pair.source_test.clone())
        };
        if let Some(i) = labeled_sents.iter().position(|s| s.unified_tags.is_none()) {
            return Err(Error::Unlabeled(i));
        }
        let vocab = Vocabulary::from_sentences(
            pair.source_train.iter().chain(&pair.target_train).chain(&pair.source_test),
        );
        let mut oov = stream(seed, STREAM_OOV);
        let emb: EmbeddingMatrix<f32> = match embeddings {
            Some(p) => EmbeddingMatrix::load_word2vec_text(p, &vocab, config.model.embed_dim, &mut oov)?,
            None => EmbeddingMatrix::random(&vocab, config.model.embed_dim, &mut oov),
        };
        let (model, store) = Model::init(&config.model, &emb, &mut stream(seed, STREAM_INIT))?;
        let labeled: Vec<Encoded> = labeled_sents.iter().map(|s| Encoded::new(s, &vocab)).collect();
        let unlabeled: Vec<Encoded> = pair.target_train.iter().map(|s| Encoded::new(s, &vocab)).collect();
        let batch_seed = stream(seed, STREAM_BATCH).next_u64();
        let batches = MixedBatches::new(labeled.len(), unlabeled.len(), config.batch_size, batch_seed)?;
        let adam = config.adam();
        Ok(Trainer {
            config: config.clone(),
            seed,
            task_opt: AdamState::new(adam, &store),
            adv_opt: AdamState::new(adam, &store),
            model,
            store,
            vocab,
            labeled,
            unlabeled,
            validation,
            batches,
            dropout_rng: stream(seed, STREAM_DROPOUT),
            epoch: 0,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches.batches_per_epoch()
    }

    pub fn next_batch(&mut self) -> Batch {
        self.batches.next_batch()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn validation(&self) -> &[Sentence] {
        &self.validation
    }

    fn graph_rng(&mut self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.dropout_rng.gen())
    }

    fn pick<'a>(items: &'a [Encoded], idx: &[usize]) -> Vec<&'a Encoded> {
        idx.iter().map(|&i| &items[i]).collect()
    }

    fn apply(
        store: &mut ParamStore<f32>,
        opt: &mut AdamState<f32>,
        mut grads: Gradients<f32>,
        subset: &[Partition],
        clip: f64,
        m: &mut StageMetrics,
    ) -> Result<()> {
        m.grad_norm = grads.global_norm();
        clip_global_norm(&mut grads, clip);
        m.clipped_norm = grads.global_norm();
        adam_step(store, opt, &mut grads, subset)
    }

    /// Minimize the task losses over the feature and predictor parameters.
    pub fn stage_one(&mut self, batch: &Batch) -> Result<StageMetrics> {
        let rng = self.graph_rng();
        let labeled = Self::pick(&self.labeled, &batch.source);
        let unlabeled = Self::pick(&self.unlabeled, &batch.target);
        let mut m = StageMetrics::default();
        let grads = {
            let mut g = Graph::training(&self.store, rng);
            let needs = LossNeeds {
                main: true,
                opinion: true,
                domain: false,
            };
            let l = batch_losses(&mut g, &self.model, &labeled, &unlabeled, needs)?;
            let main = l.main.ok_or(Error::EmptyCorpus("labeled half of the batch"))?;
            let root = match l.opinion {
                Some(o) => {
                    let w = g.scale(o, self.config.rho as f32);
                    g.add(main, w)?
                }
                None => main,
            };
            check_finite(&g, root, "task loss")?;
            m.loss_main = g.scalar(main) as f64;
            m.loss_opinion = l.opinion.map_or(0.0, |o| g.scalar(o) as f64);
            g.backward(root)?;
            collect_grads(&g, &FEATURE_AND_PREDICTOR)
        };
        Self::apply(
            &mut self.store,
            &mut self.task_opt,
            grads,
            &FEATURE_AND_PREDICTOR,
            self.config.clip,
            &mut m,
        )?;
        Ok(m)
    }

    /// Minimize the domain loss over the discriminator; through the reversal
    /// layer the feature parameters move to increase it.
    /// Returns `None` outside the adversarial modes.
    pub fn stage_two(&mut self, batch: &Batch) -> Result<Option<StageMetrics>> {
        if !self.config.model.mode.is_adversarial() {
            return Ok(None);
        }
        let rng = self.graph_rng();
        let labeled = Self::pick(&self.labeled, &batch.source);
        let unlabeled = Self::pick(&self.unlabeled, &batch.target);
        let mut m = StageMetrics::default();
        let grads = {
            let mut g = Graph::training(&self.store, rng);
            let needs = LossNeeds {
                main: false,
                opinion: false,
                domain: true,
            };
            let l = batch_losses(&mut g, &self.model, &labeled, &unlabeled, needs)?;
            let root = l.domain.expect("adversarial mode with a non-empty batch");
            check_finite(&g, root, "domain loss")?;
            m.loss_domain = g.scalar(root) as f64;
            g.backward(root)?;
            collect_grads(&g, &DISCRIMINATOR_AND_FEATURE)
        };
        let opt = if self.config.shared_adam {
            &mut self.task_opt
        } else {
            &mut self.adv_opt
        };
        Self::apply(
            &mut self.store,
            opt,
            grads,
            &DISCRIMINATOR_AND_FEATURE,
            self.config.clip,
            &mut m,
        )?;
        Ok(Some(m))
    }

    /// One update of `L_M + rho * L_O + gamma * L_D` over every partition.
    pub fn joint_step(&mut self, batch: &Batch) -> Result<StageMetrics> {
        let rng = self.graph_rng();
        let labeled = Self::pick(&self.labeled, &batch.source);
        let unlabeled = Self::pick(&self.unlabeled, &batch.target);
        let mut m = StageMetrics::default();
        let grads = {
            let mut g = Graph::training(&self.store, rng);
            let needs = LossNeeds {
                main: true,
                opinion: true,
                domain: true,
            };
            let l = batch_losses(&mut g, &self.model, &labeled, &unlabeled, needs)?;
            let mut root = l.main.ok_or(Error::EmptyCorpus("labeled half of the batch"))?;
            m.loss_main = g.scalar(root) as f64;
            if let Some(o) = l.opinion {
                m.loss_opinion = g.scalar(o) as f64;
                let w = g.scale(o, self.config.rho as f32);
                root = g.add(root, w)?;
            }
            if let Some(d) = l.domain {
                m.loss_domain = g.scalar(d) as f64;
                let w = g.scale(d, self.config.gamma as f32);
                root = g.add(root, w)?;
            }
            check_finite(&g, root, "joint loss")?;
            g.backward(root)?;
            collect_grads(&g, &Partition::ALL)
        };
        Self::apply(
            &mut self.store,
            &mut self.task_opt,
            grads,
            &Partition::ALL,
            self.config.clip,
            &mut m,
        )?;
        Ok(m)
    }

    /// Both stages on one batch, or the joint update.
    pub fn step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        match self.config.schedule {
            Schedule::Joint => Ok(StepMetrics {
                stage1: self.joint_step(batch)?,
                stage2: None,
            }),
            Schedule::Alternating => {
                let stage1 = self.stage_one(batch)?;
                let stage2 = self.stage_two(batch)?;
                Ok(StepMetrics { stage1, stage2 })
            }
        }
    }

    /// One epoch of updates; returns the per-batch metrics.
    pub fn run_epoch(&mut self) -> Result<Vec<StepMetrics>> {
        let batches: Vec<Batch> = (0..self.batches_per_epoch()).map(|_| self.next_batch()).collect();
        let out = match (self.config.schedule, self.config.alternation) {
            (Schedule::Alternating, Alternation::Epoch) => {
                let firsts = batches.iter().map(|b| self.stage_one(b)).collect::<Result<Vec<_>>>()?;
                let mut out = Vec::with_capacity(batches.len());
                for (b, stage1) in batches.iter().zip(firsts) {
                    let stage2 = self.stage_two(b)?;
                    out.push(StepMetrics { stage1, stage2 });
                }
                out
            }
            _ => batches.iter().map(|b| self.step(b)).collect::<Result<_>>()?,
        };
        self.epoch += 1;
        Ok(out)
    }

    pub fn evaluate(&self, sentences: &[Sentence]) -> Result<CorpusEval> {
        evaluate_corpus(&self.model, &self.store, &self.vocab, sentences)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config: self.config.clone(),
            seed: self.seed,
            epoch: self.epoch,
            vocab: self.vocab.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint {
            meta: serde_json::to_string(&self.meta()).expect("plain data"),
            params: self.store.clone(),
            optimizers: vec![self.task_opt.clone(), self.adv_opt.clone()],
        }
    }

    /// Train for the configured number of epochs, validating after each one.
    /// The snapshot with the strictly highest validation ADS F1 is kept, so
    /// ties go to the earlier epoch. Each record is passed to `on_epoch`.
    pub fn fit(&mut self, mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>) -> Result<FitOutcome> {
        let mut records = Vec::new();
        let mut best: Option<Snapshot> = None;
        for _ in 0..self.config.epochs {
            let steps = self.run_epoch()?;
            let n = steps.len() as f64;
            let avg = |f: &dyn Fn(&StepMetrics) -> f64| steps.iter().map(f).sum::<f64>() / n;
            let val = self.evaluate(&self.validation)?;
            let improved = best.as_ref().map_or(true, |b| val.ads.micro_f1 > b.val_ads_f1);
            let record = EpochRecord {
                epoch: self.epoch,
                loss_main: avg(&|s| s.stage1.loss_main),
                loss_opinion: avg(&|s| s.stage1.loss_opinion),
                loss_domain: avg(&|s| s.stage2.map_or(s.stage1.loss_domain, |d| d.loss_domain)),
                max_clipped_norm: steps
                    .iter()
                    .flat_map(|s| [Some(s.stage1.clipped_norm), s.stage2.map(|d| d.clipped_norm)])
                    .flatten()
                    .fold(0.0, f64::max),
                val_ad_f1: val.ad.micro_f1,
                val_ads_f1: val.ads.micro_f1,
                best: improved,
            };
            if improved {
                best = Some(Snapshot {
                    epoch: self.epoch,
                    val_ads_f1: val.ads.micro_f1,
                    checkpoint: self.checkpoint(),
                });
            }
            on_epoch(&record)?;
            records.push(record);
        }
        Ok(FitOutcome { records, best })
    }
}
