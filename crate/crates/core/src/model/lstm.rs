use crate::diffcore::{Graph, NodeId, ParamId, ParamStore, Partition, Real};
use crate::error::Result;

use super::uniform;

/// One recurrent direction. Gate rows are laid out as input, forget,
/// output, candidate, each `hidden` wide.
#[derive(Clone, Copy, Debug)]
pub struct LstmDirection {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BiLstm {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

impl LstmDirection {
    fn register<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<()> {
        store.add(&format!("{prefix}.w_x"), uniform(&[4 * hidden, input], 0.2, rng), Partition::Feature)?;
        store.add(&format!("{prefix}.w_h"), uniform(&[4 * hidden, hidden], 0.2, rng), Partition::Feature)?;
        store.add(&format!("{prefix}.b"), crate::diffcore::Tensor::zeros(&[4 * hidden]), Partition::Feature)?;
        Ok(())
    }

    fn bind<F: Real>(store: &ParamStore<F>, prefix: &str) -> Result<Self> {
        let w_h = store.id(&format!("{prefix}.w_h"))?;
        Ok(LstmDirection {
            w_x: store.id(&format!("{prefix}.w_x"))?,
            w_h,
            b: store.id(&format!("{prefix}.b"))?,
            hidden: store.value(w_h).shape()[1],
        })
    }

    /// Run over the rows of `x [T, in]` in the given order, starting from zero
    /// hidden and cell states. Returns one hidden vector per visited row.
    fn run<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId, order: impl Iterator<Item = usize>) -> Result<Vec<NodeId>> {
        let h = self.hidden;
        let w_x = g.param(self.w_x);
        let w_h = g.param(self.w_h);
        let b = g.param(self.b);
        let xw = g.matmul_nt(x, w_x)?;
        let xw = g.add_row(xw, b)?;
        let mut prev: Option<(NodeId, NodeId)> = None;
        let mut out = Vec::new();
        for t in order {
            let mut pre = g.row(xw, t)?;
            if let Some((h_prev, _)) = prev {
                let rec = g.matvec(w_h, h_prev)?;
                pre = g.add(pre, rec)?;
            }
            let i = g.slice(pre, 0, h)?;
            let i = g.sigmoid(i);
            let f = g.slice(pre, h, h)?;
            let f = g.sigmoid(f);
            let o = g.slice(pre, 2 * h, h)?;
            let o = g.sigmoid(o);
            let cand = g.slice(pre, 3 * h, h)?;
            let cand = g.tanh(cand);
            let mut c = g.mul(i, cand)?;
            if let Some((_, c_prev)) = prev {
                let keep = g.mul(f, c_prev)?;
                c = g.add(c, keep)?;
            }
            let tc = g.tanh(c);
            let h_t = g.mul(o, tc)?;
            out.push(h_t);
            prev = Some((h_t, c));
        }
        Ok(out)
    }
}

impl BiLstm {
    pub fn register<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        input: usize,
        hidden_total: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<()> {
        let h = hidden_total / 2;
        LstmDirection::register(store, &format!("{prefix}.fwd"), input, h, rng)?;
        LstmDirection::register(store, &format!("{prefix}.bwd"), input, h, rng)
    }

    pub fn bind<F: Real>(store: &ParamStore<F>, prefix: &str) -> Result<Self> {
        Ok(BiLstm {
            forward: LstmDirection::bind(store, &format!("{prefix}.fwd"))?,
            backward: LstmDirection::bind(store, &format!("{prefix}.bwd"))?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    /// `x [T, in] -> [T, 2h]`, each row the forward state followed by the
    /// backward state at that position.
    pub fn apply<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let t = g.shape(x)[0];
        let fwd = self.forward.run(g, x, 0..t)?;
        let mut bwd = self.backward.run(g, x, (0..t).rev())?;
        bwd.reverse();
        let f = g.stack(&fwd)?;
        let b = g.stack(&bwd)?;
        g.concat(f, b)
    }
}
