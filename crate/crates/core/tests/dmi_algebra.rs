use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdabsa::diffcore::{Graph, ParamStore, Tensor};
use xdabsa::memory::{run_dmi, DmiCache, DmiParams};

struct Case {
    t: usize,
    d: usize,
    k: usize,
    hops: usize,
    store: ParamStore<f64>,
    h: Vec<f64>,
}

fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, d, k, hops) = (
        rng.gen_range(1..7),
        rng.gen_range(1..6),
        rng.gen_range(1..4),
        rng.gen_range(1..4),
    );
    let mut store = ParamStore::new();
    DmiParams::register(&mut store, d, k, rng.gen_bool(0.8), &mut rng).unwrap();
    // Nonzero biases and larger weights exercise both relu branches.
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.value_mut(id).data_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
    let h = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Case { t, d, k, hops, store, h }
}

fn val<'a>(s: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    s.value(s.id(name).unwrap()).data()
}

/// Straight-line evaluation of every hop with plain loops.
struct Oracle {
    alpha_a: Vec<Vec<f64>>,
    alpha_o: Vec<Vec<f64>>,
    r_a: Vec<Vec<f64>>,
    r_o: Vec<Vec<f64>>,
    m_a: Vec<f64>,
    m_o: Vec<f64>,
}

fn oracle(c: &Case) -> Oracle {
    let (t, d, k) = (c.t, c.d, c.k);
    let s = &c.store;
    let zero = vec![0.0; d];
    let (mut ma, mut mo) = if s.contains("dmi.m_a") {
        (val(s, "dmi.m_a").to_vec(), val(s, "dmi.m_o").to_vec())
    } else {
        (zero.clone(), zero)
    };
    let row = |i: usize| &c.h[i * d..(i + 1) * d];
    let resid = |side: &str, h: &[f64], m: &[f64]| -> Vec<f64> {
        let w = val(s, &format!("dmi.{side}.w"));
        let b = val(s, &format!("dmi.{side}.b"));
        (0..d)
            .map(|r| {
                let mut z = b[r];
                for j in 0..d {
                    z += w[r * 2 * d + j] * h[j] + w[r * 2 * d + d + j] * m[j];
                }
                h[r] + z.max(0.0)
            })
            .collect()
    };
    // mᵀ G_k x, or xᵀ G_k m when swapped.
    let form = |g: &str, m: &[f64], x: &[f64], swap: bool| -> Vec<f64> {
        let gv = val(s, g);
        (0..k)
            .map(|kk| {
                let mut acc = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        let gab = gv[kk * d * d + a * d + b];
                        acc += if swap { x[a] * gab * m[b] } else { m[a] * gab * x[b] };
                    }
                }
                acc
            })
            .collect()
    };
    let softmax = |z: Vec<f64>| {
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|x| (x - mx).exp()).collect();
        let sum: f64 = e.iter().sum();
        e.into_iter().map(|x| x / sum).collect::<Vec<_>>()
    };
    let mut out = Oracle {
        alpha_a: vec![],
        alpha_o: vec![],
        r_a: vec![],
        r_o: vec![],
        m_a: vec![],
        m_o: vec![],
    };
    for _ in 0..c.hops {
        let mut ra = Vec::new();
        let mut ro = Vec::new();
        for i in 0..t {
            let ha = resid("a", row(i), &ma);
            let ho = resid("o", row(i), &mo);
            let mut a = form("dmi.g_a", &ma, &ha, false);
            a.extend(form("dmi.g_ao", &mo, &ho, false));
            let mut o = form("dmi.g_o", &mo, &ho, false);
            o.extend(form("dmi.g_ao", &ma, &ha, true));
            ra.push(a);
            ro.push(o);
        }
        let score = |r: &[Vec<f64>], w: &[f64]| r.iter().map(|ri| ri.iter().zip(w).map(|(x, y)| x * y).sum()).collect();
        let aa = softmax(score(&ra, val(s, "dmi.attn_a")));
        let ao = softmax(score(&ro, val(s, "dmi.attn_o")));
        for i in 0..t {
            for j in 0..d {
                ma[j] += aa[i] * row(i)[j];
                mo[j] += ao[i] * row(i)[j];
            }
        }
        out.alpha_a.push(aa);
        out.alpha_o.push(ao);
        out.r_a = ra.concat().chunks(2 * k).map(|x| x.to_vec()).collect();
        out.r_o = ro.concat().chunks(2 * k).map(|x| x.to_vec()).collect();
    }
    out.m_a = ma;
    out.m_o = mo;
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matches_dense_oracle_on_random_configurations() {
    for seed in 0..200 {
        let c = case(seed);
        let p = DmiParams::bind(&c.store).unwrap();
        let mut g = Graph::new(&c.store);
        let h = g.constant(Tensor::new(vec![c.t, c.d], c.h.clone()).unwrap());
        let tr = run_dmi(&mut g, &p, &mut DmiCache::default(), h, c.hops, 0.0).unwrap();
        let o = oracle(&c);
        assert_eq!(tr.hops.len(), c.hops);
        for (l, hop) in tr.hops.iter().enumerate() {
            assert!(close(g.value(hop.alpha_a), &o.alpha_a[l], 1e-12), "seed {seed} hop {l}");
            assert!(close(g.value(hop.alpha_o), &o.alpha_o[l], 1e-12), "seed {seed} hop {l}");
        }
        let last = tr.last();
        assert!(close(g.value(last.r_a), &o.r_a.concat(), 1e-10), "seed {seed}");
        assert!(close(g.value(last.r_o), &o.r_o.concat(), 1e-10), "seed {seed}");
        assert!(close(g.value(tr.m_a), &o.m_a, 1e-12));
        assert!(close(g.value(tr.m_o), &o.m_o, 1e-12));
    }
}

#[test]
fn permuting_tokens_permutes_attention_and_keeps_memory() {
    for seed in 0..50 {
        let c = case(1000 + seed);
        let p = DmiParams::bind(&c.store).unwrap();
        let perm: Vec<usize> = (0..c.t).rev().collect();
        let hp: Vec<f64> = perm.iter().flat_map(|&i| c.h[i * c.d..(i + 1) * c.d].to_vec()).collect();
        let mut g = Graph::new(&c.store);
        let h1 = g.constant(Tensor::new(vec![c.t, c.d], c.h.clone()).unwrap());
        let h2 = g.constant(Tensor::new(vec![c.t, c.d], hp).unwrap());
        let mut cache = DmiCache::default();
        let a = run_dmi(&mut g, &p, &mut cache, h1, c.hops, 0.0).unwrap();
        let b = run_dmi(&mut g, &p, &mut cache, h2, c.hops, 0.0).unwrap();
        for (ha, hb) in a.hops.iter().zip(&b.hops) {
            let x = g.value(ha.alpha_a);
            let y = g.value(hb.alpha_a);
            for (j, &i) in perm.iter().enumerate() {
                assert!((x[i] - y[j]).abs() < 1e-12);
            }
        }
        assert!(close(g.value(a.m_a), g.value(b.m_a), 1e-12));
        assert!(close(g.value(a.m_o), g.value(b.m_o), 1e-12));
    }
}

#[test]
fn hops_share_parameter_nodes() {
    let c = case(7);
    let p = DmiParams::bind(&c.store).unwrap();
    let mut g = Graph::new(&c.store);
    let h = g.constant(Tensor::new(vec![c.t, c.d], c.h.clone()).unwrap());
    let before = g.len();
    run_dmi(&mut g, &p, &mut DmiCache::default(), h, 3, 0.0).unwrap();
    let n = g.param_node(p.g_a).unwrap();
    // Requesting the parameter again returns the node created during the run.
    assert_eq!(g.param(p.g_a), n);
    assert!(n.index() >= before);
}
