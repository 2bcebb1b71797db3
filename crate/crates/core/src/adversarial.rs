//! Word-level domain discriminator behind a gradient reversal layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DomainLabel;
use crate::diffcore::{Graph, NodeId, ParamId, ParamStore, Partition, Real, Tensor};
use crate::error::Result;
use crate::model::uniform;

/// Which representation the discriminator sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignSite {
    /// The final-hop aspect correlation vectors.
    Low,
    /// The unified tagger's hidden states.
    High,
}

#[derive(Clone, Copy, Debug)]
pub struct Discriminator {
    pub w: ParamId,
    pub b: ParamId,
}

impl Discriminator {
    pub fn register<F: Real>(store: &mut ParamStore<F>, input: usize, rng: &mut impl Rng) -> Result<()> {
        store.add("disc.w", uniform(&[2, input], 0.2, rng), Partition::Discriminator)?;
        store.add("disc.b", Tensor::zeros(&[2]), Partition::Discriminator)?;
        Ok(())
    }

    pub fn bind<F: Real>(store: &ParamStore<F>) -> Result<Self> {
        Ok(Discriminator {
            w: store.id("disc.w")?,
            b: store.id("disc.b")?,
        })
    }

    /// Domain logits `[T, 2]` for `feature [T, n]`. The forward pass is a plain
    /// affine map; the gradient flowing back into `feature` is scaled by `-lambda`.
    pub fn logits<F: Real>(&self, g: &mut Graph<'_, F>, feature: NodeId, lambda: F) -> Result<NodeId> {
        let x = g.grad_reverse(feature, lambda);
        let w = g.param(self.w);
        let b = g.param(self.b);
        let z = g.matmul_nt(x, w)?;
        g.add_row(z, b)
    }
}

/// Per-sentence domain loss: word cross-entropies against the sentence's
/// domain label, summed with weights `selector` (one per word) or with unit
/// weights when `selector` is `None`. With `detach_selector` the weights are
/// constants, so the loss sends no gradient into the attention that produced them.
pub fn sal_loss<F: Real>(
    g: &mut Graph<'_, F>,
    logits: NodeId,
    domain: DomainLabel,
    selector: Option<NodeId>,
    detach_selector: bool,
) -> Result<NodeId> {
    let t = g.shape(logits)[0];
    let labels = vec![domain.index(); t];
    let ce = g.cross_entropy_rows(logits, &labels)?;
    match selector {
        None => Ok(g.sum(ce)),
        Some(alpha) => {
            let alpha = if detach_selector { g.detach(alpha) } else { alpha };
            let weighted = g.mul(ce, alpha)?;
            Ok(g.sum(weighted))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_disc(n: usize) -> (ParamStore<f64>, Discriminator) {
        let mut s = ParamStore::new();
        s.add("disc.w", Tensor::zeros(&[2, n]), Partition::Discriminator).unwrap();
        s.add("disc.b", Tensor::zeros(&[2]), Partition::Discriminator).unwrap();
        let d = Discriminator::bind(&s).unwrap();
        (s, d)
    }

    #[test]
    fn one_word_uniform_loss_is_ln2() {
        let (s, d) = zero_disc(3);
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap());
        let z = d.logits(&mut g, x, 0.1).unwrap();
        let p = g.softmax(z, 1).unwrap();
        assert_eq!(g.value(p), &[0.5, 0.5]);
        let a = g.constant(Tensor::vector(vec![1.0]));
        let l = sal_loss(&mut g, z, DomainLabel::Source, Some(a), true).unwrap();
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn zero_weight_word_contributes_nothing() {
        let (s, d) = zero_disc(1);
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap(), true);
        let z = d.logits(&mut g, x, 1.0).unwrap();
        let a = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let l = sal_loss(&mut g, z, DomainLabel::Target, Some(a), true).unwrap();
        g.backward(l).unwrap();
        let gx = g.grad(x).unwrap();
        assert_eq!(gx[0], 0.0);
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn unweighted_equals_unit_weights() {
        let mut s = ParamStore::new();
        s.add("disc.w", Tensor::new(vec![2, 1], vec![0.3, -0.2]).unwrap(), Partition::Discriminator)
            .unwrap();
        s.add("disc.b", Tensor::vector(vec![0.1, 0.0]), Partition::Discriminator).unwrap();
        let d = Discriminator::bind(&s).unwrap();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::new(vec![2, 1], vec![0.5, 2.0]).unwrap());
        let z = d.logits(&mut g, x, 0.1).unwrap();
        let plain = sal_loss(&mut g, z, DomainLabel::Source, None, true).unwrap();
        let ones = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let weighted = sal_loss(&mut g, z, DomainLabel::Source, Some(ones), true).unwrap();
        assert_eq!(g.scalar(plain), g.scalar(weighted));
    }
}
