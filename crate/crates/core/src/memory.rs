//! Global-local memory interaction and the multi-hop dual memory interaction.
//!
//! Each word state `h_i` is fused with a global memory `m` by a residual
//! transform `h̃_i = h_i + relu(W [h_i; m] + b)` and then correlated with it
//! through `K` bilinear slices, `r_i[k] = mᵀ G_k h̃_i`. Two memories (aspect
//! and opinion) give two correlation vectors per word; attention over them
//! refines the memories from hop to hop.

use rand::Rng;
use serde::Serialize;

use crate::diffcore::{Graph, NodeId, ParamId, ParamStore, Partition, Real, Tensor};
use crate::error::Result;
use crate::model::uniform;

/// Residual transform `h + relu(W [h; m] + b)` with `W [d, 2d]`.
#[derive(Clone, Copy, Debug)]
pub struct Residual {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct DmiParams {
    pub aspect: Residual,
    pub opinion: Residual,
    /// `[K, d, d]` slices for aspect-aspect, opinion-opinion and the shared
    /// aspect-opinion cross term (used transposed on the opinion side).
    pub g_a: ParamId,
    pub g_o: ParamId,
    pub g_ao: ParamId,
    /// `[1, 2K]` attention scorers.
    pub attn_a: ParamId,
    pub attn_o: ParamId,
    /// Initial memories `[d]`; `None` starts both from zero.
    pub init: Option<(ParamId, ParamId)>,
    pub dim: usize,
    pub k: usize,
}

impl DmiParams {
    pub fn register<F: Real>(
        store: &mut ParamStore<F>,
        dim: usize,
        k: usize,
        learned_init: bool,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let f = Partition::Feature;
        for side in ["a", "o"] {
            store.add(&format!("dmi.{side}.w"), uniform(&[dim, 2 * dim], 0.2, rng), f)?;
            store.add(&format!("dmi.{side}.b"), Tensor::zeros(&[dim]), f)?;
        }
        for name in ["dmi.g_a", "dmi.g_o", "dmi.g_ao"] {
            store.add(name, uniform(&[k, dim, dim], 0.2, rng), f)?;
        }
        store.add("dmi.attn_a", uniform(&[1, 2 * k], 0.2, rng), f)?;
        store.add("dmi.attn_o", uniform(&[1, 2 * k], 0.2, rng), f)?;
        if learned_init {
            store.add("dmi.m_a", uniform(&[dim], 0.2, rng), f)?;
            store.add("dmi.m_o", uniform(&[dim], 0.2, rng), f)?;
        }
        Ok(())
    }

    pub fn bind<F: Real>(store: &ParamStore<F>) -> Result<Self> {
        let g_a = store.id("dmi.g_a")?;
        let shape = store.value(g_a).shape();
        let init = if store.contains("dmi.m_a") {
            Some((store.id("dmi.m_a")?, store.id("dmi.m_o")?))
        } else {
            None
        };
        Ok(DmiParams {
            aspect: Residual {
                w: store.id("dmi.a.w")?,
                b: store.id("dmi.a.b")?,
            },
            opinion: Residual {
                w: store.id("dmi.o.w")?,
                b: store.id("dmi.o.b")?,
            },
            g_a,
            g_o: store.id("dmi.g_o")?,
            g_ao: store.id("dmi.g_ao")?,
            attn_a: store.id("dmi.attn_a")?,
            attn_o: store.id("dmi.attn_o")?,
            init,
            dim: shape[1],
            k: shape[0],
        })
    }
}

/// Residual transform of every row of `h [T, d]` against memory `m [d]`.
pub fn residual<F: Real>(g: &mut Graph<'_, F>, h: NodeId, m: NodeId, p: Residual) -> Result<NodeId> {
    let t = g.shape(h)[0];
    let w = g.param(p.w);
    let b = g.param(p.b);
    let mb = g.broadcast_rows(m, t)?;
    let hm = g.concat(h, mb)?;
    let z = g.matmul_nt(hm, w)?;
    let z = g.add_row(z, b)?;
    let z = g.relu(z);
    g.add(h, z)
}

/// `r[t, k] = mᵀ G_k h̃_t` (with `G_kᵀ` when `transposed`), where `h̃` is
/// the residual transform of `h` against `m`. Returns `[T, K]`.
pub fn glmi<F: Real>(
    g: &mut Graph<'_, F>,
    h: NodeId,
    m: NodeId,
    p: Residual,
    slices: ParamId,
    transposed: bool,
) -> Result<NodeId> {
    let ht = residual(g, h, m, p)?;
    let gk = g.param(slices);
    g.bilinear(m, gk, ht, transposed)
}

/// Node ids for one hop.
#[derive(Clone, Copy, Debug)]
pub struct Hop {
    pub m_a: NodeId,
    pub m_o: NodeId,
    /// `[T, 2K]`, after dropout.
    pub r_a: NodeId,
    pub r_o: NodeId,
    /// `[T]` attention distributions.
    pub alpha_a: NodeId,
    pub alpha_o: NodeId,
}

#[derive(Clone, Debug)]
pub struct DmiTrace {
    pub hops: Vec<Hop>,
    /// Memories after the last update (one past the final hop).
    pub m_a: NodeId,
    pub m_o: NodeId,
}

impl DmiTrace {
    pub fn last(&self) -> &Hop {
        self.hops.last().expect("at least one hop")
    }
}

/// Per-graph cache of the parts of the first hop that depend only on
/// parameters, shared by every sentence in the batch.
#[derive(Default)]
pub struct DmiCache {
    first: Option<FirstHop>,
}

#[derive(Clone, Copy)]
struct Split {
    w_h: NodeId,
    // W_m m + b for the initial memory
    bias: NodeId,
}

#[derive(Clone, Copy)]
struct FirstHop {
    m_a: NodeId,
    m_o: NodeId,
    a: Split,
    o: Split,
    w_am: NodeId,
    w_om: NodeId,
    b_a: NodeId,
    b_o: NodeId,
    proj: [NodeId; 4],
}

fn split_residual<F: Real>(g: &mut Graph<'_, F>, p: Residual, dim: usize) -> Result<(NodeId, NodeId, NodeId)> {
    let w = g.param(p.w);
    let w_h = g.slice(w, 0, dim)?;
    let w_m = g.slice(w, dim, dim)?;
    let b = g.param(p.b);
    Ok((w_h, w_m, b))
}

fn projections<F: Real>(g: &mut Graph<'_, F>, p: &DmiParams, m_a: NodeId, m_o: NodeId) -> Result<[NodeId; 4]> {
    let g_a = g.param(p.g_a);
    let g_o = g.param(p.g_o);
    let g_ao = g.param(p.g_ao);
    Ok([
        g.bilinear_project(m_a, g_a, false)?,
        g.bilinear_project(m_o, g_ao, false)?,
        g.bilinear_project(m_o, g_o, false)?,
        g.bilinear_project(m_a, g_ao, true)?,
    ])
}

impl DmiCache {
    fn first<F: Real>(&mut self, g: &mut Graph<'_, F>, p: &DmiParams) -> Result<FirstHop> {
        if let Some(f) = self.first {
            return Ok(f);
        }
        let (m_a, m_o) = match p.init {
            Some((a, o)) => (g.param(a), g.param(o)),
            None => {
                let z = g.constant(Tensor::zeros(&[p.dim]));
                (z, z)
            }
        };
        let (aw_h, w_am, b_a) = split_residual(g, p.aspect, p.dim)?;
        let (ow_h, w_om, b_o) = split_residual(g, p.opinion, p.dim)?;
        let ba = g.matvec(w_am, m_a)?;
        let ba = g.add(ba, b_a)?;
        let bo = g.matvec(w_om, m_o)?;
        let bo = g.add(bo, b_o)?;
        let proj = projections(g, p, m_a, m_o)?;
        let f = FirstHop {
            m_a,
            m_o,
            a: Split { w_h: aw_h, bias: ba },
            o: Split { w_h: ow_h, bias: bo },
            w_am,
            w_om,
            b_a,
            b_o,
            proj,
        };
        self.first = Some(f);
        Ok(f)
    }
}

fn transform<F: Real>(g: &mut Graph<'_, F>, h: NodeId, s: Split) -> Result<NodeId> {
    let z = g.matmul_nt(h, s.w_h)?;
    let z = g.add_row(z, s.bias)?;
    let z = g.relu(z);
    g.add(h, z)
}

fn attend<F: Real>(g: &mut Graph<'_, F>, r: NodeId, scorer: ParamId) -> Result<NodeId> {
    let t = g.shape(r)[0];
    let w = g.param(scorer);
    let s = g.matmul_nt(r, w)?;
    let s = g.reshape(s, &[t])?;
    g.softmax(s, 0)
}

/// Run `hops` rounds of dual memory interaction over `h [T, d]`.
/// `dropout` is applied to both correlation vectors at every hop.
pub fn run_dmi<F: Real>(
    g: &mut Graph<'_, F>,
    p: &DmiParams,
    cache: &mut DmiCache,
    h: NodeId,
    hops: usize,
    dropout: F,
) -> Result<DmiTrace> {
    assert!(hops >= 1, "at least one hop");
    let first = cache.first(g, p)?;
    let (mut m_a, mut m_o) = (first.m_a, first.m_o);
    let mut trace = Vec::with_capacity(hops);
    for l in 0..hops {
        let (sa, so, proj) = if l == 0 {
            (first.a, first.o, first.proj)
        } else {
            let ba = g.matvec(first.w_am, m_a)?;
            let ba = g.add(ba, first.b_a)?;
            let bo = g.matvec(first.w_om, m_o)?;
            let bo = g.add(bo, first.b_o)?;
            (
                Split { w_h: first.a.w_h, bias: ba },
                Split { w_h: first.o.w_h, bias: bo },
                projections(g, p, m_a, m_o)?,
            )
        };
        let ht_a = transform(g, h, sa)?;
        let ht_o = transform(g, h, so)?;
        let aa = g.matmul_nt(ht_a, proj[0])?;
        let ao = g.matmul_nt(ht_o, proj[1])?;
        let oo = g.matmul_nt(ht_o, proj[2])?;
        let oa = g.matmul_nt(ht_a, proj[3])?;
        let r_a = g.concat(aa, ao)?;
        let r_o = g.concat(oo, oa)?;
        let r_a = g.dropout(r_a, dropout);
        let r_o = g.dropout(r_o, dropout);
        let alpha_a = attend(g, r_a, p.attn_a)?;
        let alpha_o = attend(g, r_o, p.attn_o)?;
        trace.push(Hop {
            m_a,
            m_o,
            r_a,
            r_o,
            alpha_a,
            alpha_o,
        });
        let da = g.vecmat(alpha_a, h)?;
        let do_ = g.vecmat(alpha_o, h)?;
        m_a = g.add(m_a, da)?;
        m_o = g.add(m_o, do_)?;
    }
    Ok(DmiTrace {
        hops: trace,
        m_a,
        m_o,
    })
}

/// Attention weights of one sentence, for inspection.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionDump {
    pub tokens: Vec<String>,
    /// One entry per hop, in order.
    pub hops: Vec<HopAttention>,
    pub predicted: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HopAttention {
    pub hop: usize,
    pub aspect: Vec<f64>,
    pub opinion: Vec<f64>,
}

impl AttentionDump {
    pub fn from_trace<F: Real>(
        g: &Graph<'_, F>,
        trace: &DmiTrace,
        tokens: Vec<String>,
        predicted: Vec<String>,
    ) -> Self {
        let read = |id: NodeId| g.value(id).iter().map(|x| x.f64()).collect();
        AttentionDump {
            tokens,
            hops: trace
                .hops
                .iter()
                .enumerate()
                .map(|(l, hop)| HopAttention {
                    hop: l + 1,
                    aspect: read(hop.alpha_a),
                    opinion: read(hop.alpha_o),
                })
                .collect(),
            predicted,
        }
    }

    /// Plain-text heat table: one row per token, one column pair per hop.
    pub fn render_table(&self) -> String {
        use std::fmt::Write;
        let width = self.tokens.iter().map(|t| t.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:width$}", "token");
        for h in &self.hops {
            let _ = write!(s, "  a{0:<5} o{0:<5}", h.hop);
        }
        s.push_str("  tag\n");
        for (i, tok) in self.tokens.iter().enumerate() {
            let _ = write!(s, "{tok:width$}");
            for h in &self.hops {
                let _ = write!(s, "  {:.4} {:.4}", h.aspect[i], h.opinion[i]);
            }
            let tag = self.predicted.get(i).map(String::as_str).unwrap_or("");
            let _ = writeln!(s, "  {tag}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_store(w_zero: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let d = 2;
        let k = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        DmiParams::register(&mut s, d, k, true, &mut rng).unwrap();
        if w_zero {
            for name in ["dmi.attn_a", "dmi.attn_o"] {
                let id = s.id(name).unwrap();
                s.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        s
    }

    #[test]
    fn glmi_hand_example() {
        // W = 0 makes the residual transform the identity.
        let mut s = ParamStore::<f64>::new();
        let w = s.add("w", Tensor::zeros(&[2, 4]), Partition::Feature).unwrap();
        let b = s.add("b", Tensor::zeros(&[2]), Partition::Feature).unwrap();
        let gk = s
            .add("g", Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), Partition::Feature)
            .unwrap();
        let mut g = Graph::new(&s);
        let h = g.constant(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let m = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let r = glmi(&mut g, h, m, Residual { w, b }, gk, false).unwrap();
        assert_eq!(g.value(r), &[2.0]);
        let zero = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let r0 = glmi(&mut g, h, zero, Residual { w, b }, gk, false).unwrap();
        assert_eq!(g.value(r0), &[0.0]);
    }

    #[test]
    fn singleton_sentence_attends_fully() {
        let s = tiny_store(false);
        let p = DmiParams::bind(&s).unwrap();
        let mut g = Graph::new(&s);
        let h = g.constant(Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap());
        let tr = run_dmi(&mut g, &p, &mut DmiCache::default(), h, 1, 0.0).unwrap();
        let hop = tr.last();
        assert_eq!(g.value(hop.alpha_a), &[1.0]);
        let m1 = s.value(p.init.unwrap().0).data().to_vec();
        let m2 = g.value(tr.m_a);
        assert!((m2[0] - (m1[0] + 0.3)).abs() < 1e-15);
        assert!((m2[1] - (m1[1] - 0.7)).abs() < 1e-15);
    }

    #[test]
    fn zero_scorer_gives_uniform_attention() {
        let s = tiny_store(true);
        let p = DmiParams::bind(&s).unwrap();
        let mut g = Graph::new(&s);
        let h = g.constant(Tensor::new(vec![4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
        let tr = run_dmi(&mut g, &p, &mut DmiCache::default(), h, 2, 0.0).unwrap();
        for hop in &tr.hops {
            assert!(g.value(hop.alpha_o).iter().all(|&a| (a - 0.25).abs() < 1e-15));
        }
        // two hops of uniform attention add twice the mean row
        let m1 = s.value(p.init.unwrap().1).data().to_vec();
        let m3 = g.value(tr.m_o);
        assert!((m3[0] - (m1[0] + 2.0 * 4.0)).abs() < 1e-12);
        assert!((m3[1] - (m1[1] + 2.0 * 5.0)).abs() < 1e-12);
    }

    #[test]
    fn dump_table_lists_every_token() {
        let d = AttentionDump {
            tokens: vec!["the".into(), "pizza".into()],
            hops: vec![HopAttention {
                hop: 1,
                aspect: vec![0.25, 0.75],
                opinion: vec![0.5, 0.5],
            }],
            predicted: vec!["O".into(), "S-POS".into()],
        };
        let t = d.render_table();
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("0.7500"));
    }
}
