//! Stacked bidirectional LSTM tagger with boundary, unified and opinion heads.

mod lstm;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use lstm::{BiLstm, LstmDirection};

use crate::adversarial::{AlignSite, Discriminator};
use crate::data::{BoundaryTag, UnifiedTag};
use crate::diffcore::{Graph, NodeId, ParamId, ParamStore, Partition, Real, Tensor};
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::memory::{run_dmi, DmiCache, DmiParams, DmiTrace};

pub(crate) fn uniform<F: Real>(shape: &[usize], range: f64, rng: &mut impl Rng) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.gen_range(-range..range))).collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

/// The ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelMode {
    /// Base tagger trained on source labels only.
    #[serde(rename = "BASE_SO")]
    BaseSo,
    /// Base tagger trained on target labels (in-domain reference).
    #[serde(rename = "BASE_TO")]
    BaseTo,
    /// Base tagger with dual memory interaction, no adversary.
    #[serde(rename = "BASE_DMI")]
    BaseDmi,
    /// Unweighted adversarial alignment of the aspect correlation vectors.
    #[serde(rename = "AD_AL")]
    AdAl,
    /// Attention-weighted adversarial alignment of the aspect correlation vectors.
    #[serde(rename = "AD_SAL")]
    AdSal,
    /// Attention-weighted alignment of the unified tagger's hidden states.
    #[serde(rename = "ADS_SAL")]
    AdsSal,
}

impl ModelMode {
    pub const ALL: [ModelMode; 6] = [
        ModelMode::BaseSo,
        ModelMode::BaseTo,
        ModelMode::BaseDmi,
        ModelMode::AdAl,
        ModelMode::AdSal,
        ModelMode::AdsSal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelMode::BaseSo => "BASE_SO",
            ModelMode::BaseTo => "BASE_TO",
            ModelMode::BaseDmi => "BASE_DMI",
            ModelMode::AdAl => "AD_AL",
            ModelMode::AdSal => "AD_SAL",
            ModelMode::AdsSal => "ADS_SAL",
        }
    }

    pub fn uses_dmi(self) -> bool {
        !matches!(self, ModelMode::BaseSo | ModelMode::BaseTo)
    }

    pub fn align_site(self) -> Option<AlignSite> {
        match self {
            ModelMode::AdAl | ModelMode::AdSal => Some(AlignSite::Low),
            ModelMode::AdsSal => Some(AlignSite::High),
            _ => None,
        }
    }

    pub fn is_adversarial(self) -> bool {
        self.align_site().is_some()
    }

    pub fn is_selective(self) -> bool {
        matches!(self, ModelMode::AdSal | ModelMode::AdsSal)
    }
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        ModelMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub embed_dim: usize,
    /// Total (both directions) hidden size of the boundary tagger.
    pub boundary_hidden: usize,
    /// Total hidden size of the unified tagger.
    pub unified_hidden: usize,
    /// Number of bilinear slices.
    pub k: usize,
    pub hops: usize,
    pub dropout: f64,
    /// Gradient reversal strength.
    pub lambda: f64,
    /// Feed `[h_B; r_a]` rather than `r_a` alone to the unified tagger.
    pub unified_input_concat: bool,
    /// Learn the initial memories; when false they start at zero.
    pub learned_memory_init: bool,
    /// Treat the attention selector as a constant in the domain loss.
    pub detach_selector: bool,
    pub tune_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: ModelMode::AdSal,
            embed_dim: 100,
            boundary_hidden: 100,
            unified_hidden: 100,
            k: 50,
            hops: 2,
            dropout: 0.5,
            lambda: 0.1,
            unified_input_concat: false,
            learned_memory_init: true,
            detach_selector: true,
            tune_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.boundary_hidden == 0 || self.boundary_hidden % 2 != 0 {
            return bad("boundary_hidden must be a positive even number");
        }
        if self.unified_hidden == 0 || self.unified_hidden % 2 != 0 {
            return bad("unified_hidden must be a positive even number");
        }
        if self.embed_dim == 0 || self.k == 0 {
            return bad("embed_dim and k must be positive");
        }
        if self.hops == 0 {
            return bad("hops must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be nonnegative");
        }
        Ok(())
    }

    fn unified_input_dim(&self) -> usize {
        match (self.mode.uses_dmi(), self.unified_input_concat) {
            (false, _) => self.boundary_hidden,
            (true, false) => 2 * self.k,
            (true, true) => self.boundary_hidden + 2 * self.k,
        }
    }

    fn boundary_input_dim(&self) -> usize {
        if self.mode.uses_dmi() {
            2 * self.k
        } else {
            self.boundary_hidden
        }
    }
}

/// Affine layer `x W^T + b` over rows.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn register<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        input: usize,
        output: usize,
        partition: Partition,
        rng: &mut impl Rng,
    ) -> Result<()> {
        store.add(&format!("{prefix}.w"), uniform(&[output, input], 0.2, rng), partition)?;
        store.add(&format!("{prefix}.b"), Tensor::zeros(&[output]), partition)?;
        Ok(())
    }

    fn bind<F: Real>(store: &ParamStore<F>, prefix: &str) -> Result<Self> {
        Ok(Linear {
            w: store.id(&format!("{prefix}.w"))?,
            b: store.id(&format!("{prefix}.b"))?,
        })
    }

    pub fn apply<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let z = g.matmul_nt(x, w)?;
        g.add_row(z, b)
    }
}

/// Which optional outputs a forward pass should build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Needs {
    pub unified: bool,
    pub opinion: bool,
    pub domain: bool,
}

impl Needs {
    pub const ALL: Needs = Needs {
        unified: true,
        opinion: true,
        domain: true,
    };
}

/// Node ids produced by one sentence's forward pass.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub h_b: NodeId,
    /// `[T, 5]`
    pub boundary_logits: NodeId,
    pub h_u: Option<NodeId>,
    /// `[T, 13]`
    pub unified_logits: Option<NodeId>,
    /// `[T, 2]`
    pub opinion_logits: Option<NodeId>,
    /// `[T, 2]`
    pub domain_logits: Option<NodeId>,
    pub dmi: Option<DmiTrace>,
}

impl Outputs {
    /// Final-hop aspect attention, the domain loss selector.
    pub fn selector(&self) -> Option<NodeId> {
        self.dmi.as_ref().map(|t| t.last().alpha_a)
    }
}

/// Parameter handles for one configured model. The values live in a
/// [`ParamStore`]; the same handles work for any store built by
/// [`Model::init`] with this configuration (including a cast copy).
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: ParamId,
    pub lstm_b: BiLstm,
    pub lstm_u: BiLstm,
    pub dmi: Option<DmiParams>,
    pub boundary: Linear,
    pub unified: Linear,
    pub opinion: Option<Linear>,
    pub discriminator: Option<Discriminator>,
}

pub const EMBED: &str = "embed.table";

impl Model {
    /// Register freshly initialized parameters for `config` into a new store.
    /// Weight matrices, bilinear slices and initial memories are drawn from
    /// U(-0.2, 0.2); biases start at zero.
    pub fn init<F: Real>(
        config: &ModelConfig,
        embeddings: &EmbeddingMatrix<F>,
        rng: &mut impl Rng,
    ) -> Result<(Model, ParamStore<F>)> {
        config.validate()?;
        if embeddings.dim() != config.embed_dim {
            return Err(Error::Config(format!(
                "embedding dimension {} does not match embed_dim {}",
                embeddings.dim(),
                config.embed_dim
            )));
        }
        let mut store = ParamStore::new();
        store.insert(
            EMBED,
            embeddings.table.clone(),
            Partition::Feature,
            config.tune_embeddings,
        )?;
        BiLstm::register(&mut store, "lstm_b", config.embed_dim, config.boundary_hidden, rng)?;
        if config.mode.uses_dmi() {
            DmiParams::register(&mut store, config.boundary_hidden, config.k, config.learned_memory_init, rng)?;
        }
        BiLstm::register(&mut store, "lstm_u", config.unified_input_dim(), config.unified_hidden, rng)?;
        let wp = Partition::WordPredictor;
        Linear::register(&mut store, "head.boundary", config.boundary_input_dim(), BoundaryTag::COUNT, wp, rng)?;
        Linear::register(&mut store, "head.unified", config.unified_hidden, UnifiedTag::COUNT, wp, rng)?;
        if config.mode.uses_dmi() {
            Linear::register(&mut store, "head.opinion", 2 * config.k, 2, wp, rng)?;
        }
        match config.mode.align_site() {
            Some(AlignSite::Low) => Discriminator::register(&mut store, 2 * config.k, rng)?,
            Some(AlignSite::High) => Discriminator::register(&mut store, config.unified_hidden, rng)?,
            None => {}
        }
        let model = Model::bind(config, &store)?;
        Ok((model, store))
    }

    /// Look up the parameter handles for `config` in an existing store.
    pub fn bind<F: Real>(config: &ModelConfig, store: &ParamStore<F>) -> Result<Model> {
        let dmi = if config.mode.uses_dmi() {
            Some(DmiParams::bind(store)?)
        } else {
            None
        };
        Ok(Model {
            config: config.clone(),
            embed: store.id(EMBED)?,
            lstm_b: BiLstm::bind(store, "lstm_b")?,
            lstm_u: BiLstm::bind(store, "lstm_u")?,
            dmi,
            boundary: Linear::bind(store, "head.boundary")?,
            unified: Linear::bind(store, "head.unified")?,
            opinion: if config.mode.uses_dmi() {
                Some(Linear::bind(store, "head.opinion")?)
            } else {
                None
            },
            discriminator: if config.mode.is_adversarial() {
                Some(Discriminator::bind(store)?)
            } else {
                None
            },
        })
    }

    /// Forward pass for one sentence given its vocabulary rows.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        cache: &mut DmiCache,
        token_ids: &[usize],
        needs: Needs,
    ) -> Result<Outputs> {
        let cfg = &self.config;
        let rate = F::of(cfg.dropout);
        let table = g.param(self.embed);
        let e = g.gather(table, token_ids)?;
        let e = g.dropout(e, rate);
        let h_b = self.lstm_b.apply(g, e)?;

        let (features, dmi) = match &self.dmi {
            Some(p) => {
                let trace = run_dmi(g, p, cache, h_b, cfg.hops, rate)?;
                (trace.last().r_a, Some(trace))
            }
            None => (h_b, None),
        };
        let boundary_logits = self.boundary.apply(g, features)?;

        let want_h_u = needs.unified || (needs.domain && cfg.mode.align_site() == Some(AlignSite::High));
        let h_u = if want_h_u {
            let input = if dmi.is_some() && cfg.unified_input_concat {
                g.concat(h_b, features)?
            } else {
                features
            };
            let h = self.lstm_u.apply(g, input)?;
            Some(g.dropout(h, rate))
        } else {
            None
        };
        let unified_logits = match (needs.unified, h_u) {
            (true, Some(h)) => Some(self.unified.apply(g, h)?),
            _ => None,
        };
        let opinion_logits = match (&self.opinion, &dmi, needs.opinion) {
            (Some(head), Some(tr), true) => Some(head.apply(g, tr.last().r_o)?),
            _ => None,
        };
        let domain_logits = match (&self.discriminator, needs.domain) {
            (Some(d), true) => {
                let site = match cfg.mode.align_site() {
                    Some(AlignSite::High) => h_u.expect("built above"),
                    _ => features,
                };
                Some(d.logits(g, site, F::of(cfg.lambda))?)
            }
            _ => None,
        };
        Ok(Outputs {
            h_b,
            boundary_logits,
            h_u,
            unified_logits,
            opinion_logits,
            domain_logits,
            dmi,
        })
    }

    /// Parameters of one partition that are registered for this model.
    pub fn partition_ids<F: Real>(&self, store: &ParamStore<F>, subset: &[Partition]) -> Vec<ParamId> {
        store.select(subset)
    }
}

/// Row-wise argmax of a `[T, C]` score matrix; ties go to the lowest index.
pub fn argmax_rows<F: Real>(values: &[F], classes: usize) -> Vec<usize> {
    values
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn decode_unified<F: Real>(logits: &[F]) -> Vec<UnifiedTag> {
    argmax_rows(logits, UnifiedTag::COUNT)
        .into_iter()
        .map(|i| UnifiedTag::from_index(i).expect("13 classes"))
        .collect()
}

pub fn decode_boundary<F: Real>(logits: &[F]) -> Vec<BoundaryTag> {
    argmax_rows(logits, BoundaryTag::COUNT)
        .into_iter()
        .map(|i| BoundaryTag::from_index(i).expect("5 classes"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::Vocabulary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(mode: ModelMode) -> ModelConfig {
        ModelConfig {
            mode,
            embed_dim: 4,
            boundary_hidden: 6,
            unified_hidden: 4,
            k: 2,
            hops: 2,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn build(cfg: &ModelConfig) -> (Model, ParamStore<f64>) {
        let vocab = Vocabulary::from_tokens(["a", "b", "c"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = EmbeddingMatrix::random(&vocab, cfg.embed_dim, &mut rng);
        Model::init(cfg, &emb, &mut rng).unwrap()
    }

    #[test]
    fn mode_names_round_trip() {
        for m in ModelMode::ALL {
            assert_eq!(m.as_str().parse::<ModelMode>().unwrap(), m);
        }
        assert_eq!("ad-sal".parse::<ModelMode>().unwrap(), ModelMode::AdSal);
        assert!(matches!("CRF".parse::<ModelMode>(), Err(Error::UnknownMode(_))));
    }

    #[test]
    fn base_so_wiring() {
        let cfg = small(ModelMode::BaseSo);
        let (m, s) = build(&cfg);
        let mut g = Graph::new(&s);
        let out = m.forward(&mut g, &mut DmiCache::default(), &[2, 3, 4, 1], Needs::ALL).unwrap();
        assert_eq!(g.shape(out.boundary_logits), &[4, 5]);
        assert_eq!(g.shape(out.unified_logits.unwrap()), &[4, 13]);
        assert!(out.opinion_logits.is_none() && out.domain_logits.is_none() && out.dmi.is_none());
        assert!(!s.contains("disc.w") && !s.contains("dmi.g_a"));
    }

    #[test]
    fn ad_sal_wiring() {
        let cfg = small(ModelMode::AdSal);
        let (m, s) = build(&cfg);
        let mut g = Graph::new(&s);
        let out = m.forward(&mut g, &mut DmiCache::default(), &[2, 3, 4, 1], Needs::ALL).unwrap();
        assert_eq!(g.shape(out.opinion_logits.unwrap()), &[4, 2]);
        assert_eq!(g.shape(out.domain_logits.unwrap()), &[4, 2]);
        let tr = out.dmi.unwrap();
        assert_eq!(tr.hops.len(), 2);
        assert_eq!(g.shape(tr.hops[0].alpha_a), &[4]);
        assert_eq!(s.value(s.id("disc.w").unwrap()).shape(), &[2, 2 * cfg.k]);
    }

    #[test]
    fn ads_sal_discriminates_unified_states() {
        let cfg = ModelConfig {
            mode: ModelMode::AdsSal,
            ..ModelConfig::default()
        };
        let vocab = Vocabulary::from_tokens(["a"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = EmbeddingMatrix::<f32>::random(&vocab, 100, &mut rng);
        let (_, s) = Model::init(&cfg, &emb, &mut rng).unwrap();
        assert_eq!(s.value(s.id("disc.w").unwrap()).shape(), &[2, 100]);
    }

    #[test]
    fn zero_weights_give_zero_states_and_uniform_heads() {
        let cfg = small(ModelMode::BaseSo);
        let (m, mut s) = build(&cfg);
        for id in s.ids().collect::<Vec<_>>() {
            if s.name(id) != EMBED {
                s.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let mut g = Graph::new(&s);
        let out = m.forward(&mut g, &mut DmiCache::default(), &[2, 3], Needs::ALL).unwrap();
        assert!(g.value(out.h_b).iter().all(|&x| x == 0.0));
        let p = g.softmax(out.boundary_logits, 1).unwrap();
        assert!(g.value(p).iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let p = g.softmax(out.unified_logits.unwrap(), 1).unwrap();
        assert!(g.value(p).iter().all(|&x| (x - 1.0 / 13.0).abs() < 1e-15));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax_rows(&[0.5, 0.5, 0.1, 0.2, 0.9, 0.9], 3), vec![0, 1]);
        let mut logits = vec![0.0; 13];
        logits[3] = 1.0;
        logits[7] = 1.0;
        assert_eq!(decode_unified(&logits), vec![UnifiedTag::from_index(3).unwrap()]);
        let biased = [10.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(decode_boundary(&biased), vec![BoundaryTag::B]);
    }
}
