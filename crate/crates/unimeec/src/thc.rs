//! Hierarchical context graph over a conversation.
//!
//! Three levels of `V` nodes each: bottom holds fused utterance vectors,
//! middle holds cause-slot vectors, top holds emotion-slot vectors. Five
//! typed edges connect them inside a locality window: utterance-utterance,
//! cause-cause, emotion-emotion, utterance-to-cause, and emotion-cause
//! (the latter with distinct weights per direction). Updates are
//! synchronous: every level-`n+1` state is computed from level-`n`
//! states only, so information travels at most one hop per layer and the
//! bottom level never reads the levels above it.
//!
//! Neighbor messages are either summed plainly or weighted by per-edge-type
//! multi-head attention; degree normalization is never applied.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

use crate::config::{AblationConfig, ThcConfig, WindowMode};
use crate::encoder::{init_matrix, FusedUtterance};
use crate::tensor::{ParamStore, Session, TensorRef};

const EDGE_SITES: [&str; 6] = ["uu", "cc", "ee", "uc", "ec_c", "ec_e"];
const ATT_SLOPE: f64 = 0.2;

/// Register graph parameters for every layer and edge type. Attention
/// parameters are always allocated so the checkpoint layout does not
/// depend on the attention switch.
pub fn init_params(
    store: &mut ParamStore,
    cfg: &ThcConfig,
    d_model: usize,
    rng: &mut ChaCha8Rng,
) {
    for n in 0..cfg.layers {
        let p = format!("thc.l{n}");
        for site in EDGE_SITES {
            store.insert(&format!("{p}.w_{site}"), init_matrix(rng, d_model, d_model));
        }
        let heads = cfg.heads[n];
        let dh = d_model / heads;
        for site in EDGE_SITES {
            for h in 0..heads {
                store.insert(&format!("{p}.att.{site}.h{h}.al"), init_matrix(rng, dh, 1));
                store.insert(&format!("{p}.att.{site}.h{h}.ar"), init_matrix(rng, dh, 1));
            }
        }
        store.insert(&format!("{p}.bias"), Array2::zeros((1, d_model)));
    }
}

/// 0/1 window adjacency over `v` nodes. Closed-interval mode connects
/// every `|i-j| <= w` pair including self; literal mode connects exactly
/// the offsets `i-w` and `i+w`, which includes self only at `w = 0`.
/// Without windowing the graph is complete.
pub fn window_adjacency(v: usize, w: usize, mode: WindowMode, use_window: bool) -> Array2<f64> {
    let mut a = Array2::zeros((v, v));
    for i in 0..v {
        for j in 0..v {
            let dist = i.abs_diff(j);
            let connected = if !use_window {
                true
            } else {
                match mode {
                    WindowMode::Interval => dist <= w,
                    WindowMode::Literal => dist == w,
                }
            };
            if connected {
                a[(i, j)] = 1.0;
            }
        }
    }
    a
}

/// Final slot states after the graph: one row per utterance.
pub struct GraphSlots {
    /// Emotion-slot states (top level).
    pub m1: TensorRef,
    /// Cause-slot states (middle level).
    pub m2: TensorRef,
    /// Utterance states (bottom level).
    pub u: TensorRef,
}

pub struct Thc<'a> {
    pub cfg: &'a ThcConfig,
    pub abl: &'a AblationConfig,
    pub d_model: usize,
}

impl<'a> Thc<'a> {
    /// One typed-edge aggregation: transform source states, then either
    /// sum neighbor messages or weight them with multi-head attention
    /// scored against the target states.
    #[allow(clippy::too_many_arguments)]
    fn aggregate(
        &self,
        sess: &Session,
        layer: usize,
        site: &str,
        src: TensorRef,
        tgt: TensorRef,
        adj: &Rc<Array2<f64>>,
        heads: usize,
    ) -> TensorRef {
        let t = &sess.tape;
        let w = sess.param(&format!("thc.l{layer}.w_{site}"));
        let z = t.matmul(src, w);
        if !self.cfg.attention.is_on() {
            let a = t.leaf((**adj).clone());
            return t.matmul(a, z);
        }
        // scores act on the transformed states of both endpoints
        let zt = if src == tgt { z } else { t.matmul(tgt, w) };
        let dh = self.d_model / heads;
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let zh = t.slice_cols(z, h * dh, (h + 1) * dh);
            let th = t.slice_cols(zt, h * dh, (h + 1) * dh);
            let al = sess.param(&format!("thc.l{layer}.att.{site}.h{h}.al"));
            let ar = sess.param(&format!("thc.l{layer}.att.{site}.h{h}.ar"));
            let left = t.matmul(th, al);
            let right = t.matmul(zh, ar);
            let scores = t.leaky_relu(t.outer_sum(left, right), ATT_SLOPE);
            let alpha = t.softmax_rows_adj(scores, adj.clone());
            parts.push(t.matmul(alpha, zh));
        }
        t.concat_cols(&parts)
    }

    fn update(
        &self,
        sess: &Session,
        layer: usize,
        terms: &[TensorRef],
    ) -> TensorRef {
        let t = &sess.tape;
        let mut sum = terms[0];
        for &term in &terms[1..] {
            sum = t.add(sum, term);
        }
        let biased = t.add_row(sum, sess.param(&format!("thc.l{layer}.bias")));
        t.relu(biased)
    }

    /// Run the graph over a conversation's fused states.
    pub fn forward(&self, sess: &Session, fused: &[FusedUtterance]) -> GraphSlots {
        let t = &sess.tape;
        let v = fused.len();
        let u_rows: Vec<TensorRef> = fused.iter().map(|f| f.h_u).collect();
        let c_rows: Vec<TensorRef> = fused.iter().map(|f| f.h_m2).collect();
        let e_rows: Vec<TensorRef> = fused.iter().map(|f| f.h_m1).collect();
        let mut u = t.concat_rows(&u_rows);
        let mut c = t.concat_rows(&c_rows);
        let mut e = t.concat_rows(&e_rows);

        if !self.abl.use_thc {
            return GraphSlots { m1: e, m2: c, u };
        }

        let adj = Rc::new(window_adjacency(
            v,
            self.cfg.window,
            self.cfg.window_mode,
            self.abl.use_window,
        ));

        if !self.abl.use_hierarchy {
            return self.forward_flat(sess, u, c, e, v);
        }

        for n in 0..self.cfg.layers {
            let heads = self.cfg.heads[n];
            let agg = |site: &str, src, tgt| self.aggregate(sess, n, site, src, tgt, &adj, heads);
            // bottom reads only the bottom level
            let u_next = self.update(sess, n, &[agg("uu", u, u)]);
            // middle reads its own level, the top level, and the bottom
            let c_next = self.update(
                sess,
                n,
                &[agg("cc", c, c), agg("ec_c", e, c), agg("uc", u, c)],
            );
            // top reads its own level and the middle
            let e_next = self.update(sess, n, &[agg("ee", e, e), agg("ec_e", c, e)]);
            u = u_next;
            c = c_next;
            e = e_next;
        }
        GraphSlots { m1: e, m2: c, u }
    }

    /// Flattened variant: all `3V` nodes form one level with a single
    /// edge type reusing the utterance-utterance parameters; connectivity
    /// is window distance on the underlying utterance index.
    fn forward_flat(
        &self,
        sess: &Session,
        u: TensorRef,
        c: TensorRef,
        e: TensorRef,
        v: usize,
    ) -> GraphSlots {
        let t = &sess.tape;
        let base = window_adjacency(v, self.cfg.window, self.cfg.window_mode, self.abl.use_window);
        let mut adj = Array2::zeros((3 * v, 3 * v));
        for bi in 0..3 {
            for bj in 0..3 {
                for i in 0..v {
                    for j in 0..v {
                        adj[(bi * v + i, bj * v + j)] = base[(i, j)];
                    }
                }
            }
        }
        let adj = Rc::new(adj);

        let mut x = t.concat_rows(&[u, c, e]);
        for n in 0..self.cfg.layers {
            let term = self.aggregate(sess, n, "uu", x, x, &adj, self.cfg.heads[n]);
            x = self.update(sess, n, &[term]);
        }
        GraphSlots {
            u: t.slice_rows(x, 0, v),
            m2: t.slice_rows(x, v, 2 * v),
            m1: t.slice_rows(x, 2 * v, 3 * v),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AblationConfig, Switch, ThcConfig};
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    const D: usize = 8;

    fn graph_cfg(layers: usize, window: usize) -> ThcConfig {
        ThcConfig {
            layers,
            window,
            heads: vec![2; layers],
            attention: Switch::On,
            window_mode: WindowMode::Interval,
        }
    }

    fn store_for(cfg: &ThcConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(&mut store, cfg, D, &mut rng);
        store
    }

    fn random_states(rng: &mut ChaCha8Rng, v: usize) -> Vec<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        (0..v)
            .map(|_| {
                let mut row = || Array2::from_shape_fn((1, D), |_| rng.gen_range(-1.0..1.0));
                (row(), row(), row())
            })
            .collect()
    }

    fn run(
        cfg: &ThcConfig,
        abl: &AblationConfig,
        store: &ParamStore,
        states: &[(Array2<f64>, Array2<f64>, Array2<f64>)],
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let sess = Session::new(store);
        let fused: Vec<FusedUtterance> = states
            .iter()
            .map(|(u, c, e)| FusedUtterance {
                h_u: sess.tape.leaf(u.clone()),
                h_m2: sess.tape.leaf(c.clone()),
                h_m1: sess.tape.leaf(e.clone()),
            })
            .collect();
        let thc = Thc {
            cfg,
            abl,
            d_model: D,
        };
        let out = thc.forward(&sess, &fused);
        (
            sess.tape.value(out.u),
            sess.tape.value(out.m2),
            sess.tape.value(out.m1),
        )
    }

    #[test]
    fn window_adjacency_oracles() {
        // interval w=1 over 4 nodes: tridiagonal with self-loops
        let a = window_adjacency(4, 1, WindowMode::Interval, true);
        let manual = array![
            [1.0, 1.0, 0.0, 0.0],
            [1.0, 1.0, 1.0, 0.0],
            [0.0, 1.0, 1.0, 1.0],
            [0.0, 0.0, 1.0, 1.0]
        ];
        assert_eq!(a, manual);

        // literal w=1: only the immediate offsets, no self-loop
        let a = window_adjacency(3, 1, WindowMode::Literal, true);
        assert_eq!(
            a,
            array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]
        );

        // literal w=0 degenerates to self-loops only
        let a = window_adjacency(3, 0, WindowMode::Literal, true);
        assert_eq!(
            a,
            array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        );

        // windowing off connects everything regardless of mode
        let a = window_adjacency(3, 1, WindowMode::Literal, false);
        assert_eq!(a, Array2::<f64>::ones((3, 3)));
    }

    #[test]
    fn bottom_level_ignores_upper_levels() {
        let cfg = graph_cfg(2, 1);
        let abl = AblationConfig::default();
        let store = store_for(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let states = random_states(&mut rng, 4);
        let (u_before, _, _) = run(&cfg, &abl, &store, &states);

        let mut changed = states.clone();
        for (_, c, e) in changed.iter_mut() {
            *c = Array2::from_shape_fn((1, D), |_| rng.gen_range(-1.0..1.0));
            *e = Array2::from_shape_fn((1, D), |_| rng.gen_range(-1.0..1.0));
        }
        let (u_after, _, _) = run(&cfg, &abl, &store, &changed);
        assert_eq!(u_before, u_after, "bottom states must not read upper levels");
    }

    #[test]
    fn information_travels_one_window_per_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for &(layers, w) in &[(1usize, 1usize), (1, 2), (2, 1), (2, 2)] {
            let cfg = graph_cfg(layers, w);
            let abl = AblationConfig::default();
            let store = store_for(&cfg, 5);
            let v = 2 * layers * w + 3;
            let states = random_states(&mut rng, v);
            let (u0, c0, e0) = run(&cfg, &abl, &store, &states);

            // perturb the last utterance; anything farther than layers*w
            // away must be bit-identical
            let mut changed = states.clone();
            let j = v - 1;
            changed[j] = (
                Array2::from_shape_fn((1, D), |_| rng.gen_range(-1.0..1.0)),
                Array2::from_shape_fn((1, D), |_| rng.gen_range(-1.0..1.0)),
                Array2::from_shape_fn((1, D), |_| rng.gen_range(-1.0..1.0)),
            );
            let (u1, c1, e1) = run(&cfg, &abl, &store, &changed);
            let reach = layers * w;
            for i in 0..v {
                let same = j.abs_diff(i) > reach;
                for (a, b) in [(&u0, &u1), (&c0, &c1), (&e0, &e1)] {
                    let eq = a.row(i) == b.row(i);
                    if same {
                        assert!(eq, "row {i} changed at distance {} > {reach}", j.abs_diff(i));
                    }
                }
                if i == j {
                    assert_ne!(u0.row(i), u1.row(i), "perturbed row must change");
                }
            }
        }
    }

    #[test]
    fn plain_sum_matches_hand_computed_neighbors() {
        // attention off, identity weights, zero bias: each bottom state
        // becomes ReLU of the sum of its windowed neighbors
        let cfg = ThcConfig {
            layers: 1,
            window: 1,
            heads: vec![1],
            attention: Switch::Off,
            window_mode: WindowMode::Interval,
        };
        let mut store = store_for(&cfg, 7);
        let eye = Array2::<f64>::eye(D);
        store.get_mut("thc.l0.w_uu").assign(&eye);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let states = random_states(&mut rng, 3);
        let (u, _, _) = run(&cfg, &AblationConfig::default(), &store, &states);

        let s: Vec<&Array2<f64>> = states.iter().map(|(u, _, _)| u).collect();
        let expect_row0 = (s[0] + s[1]).mapv(|x: f64| x.max(0.0));
        let expect_row1 = (&(s[0] + s[1]) + s[2]).mapv(|x: f64| x.max(0.0));
        for j in 0..D {
            assert!((u[(0, j)] - expect_row0[(0, j)]).abs() < 1e-12);
            assert!((u[(1, j)] - expect_row1[(0, j)]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_over_single_neighbor_equals_plain_sum() {
        // with exactly one neighbor the attention weight is forced to 1,
        // so both modes agree
        let mk = |attention| ThcConfig {
            layers: 1,
            window: 0,
            heads: vec![2],
            attention,
            window_mode: WindowMode::Interval,
        };
        let cfg_on = mk(Switch::On);
        let cfg_off = mk(Switch::Off);
        let store = store_for(&cfg_on, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let states = random_states(&mut rng, 3);
        let on = run(&cfg_on, &AblationConfig::default(), &store, &states);
        let off = run(&cfg_off, &AblationConfig::default(), &store, &states);
        assert_eq!(on.0, off.0);
        assert_eq!(on.1, off.1);
        assert_eq!(on.2, off.2);
    }

    #[test]
    fn graph_off_passes_slots_through() {
        let cfg = graph_cfg(2, 1);
        let abl = AblationConfig {
            use_thc: false,
            ..AblationConfig::default()
        };
        let store = store_for(&cfg, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let states = random_states(&mut rng, 3);
        let (u, c, e) = run(&cfg, &abl, &store, &states);
        for (i, (su, sc, se)) in states.iter().enumerate() {
            assert_eq!(u.row(i), su.row(0));
            assert_eq!(c.row(i), sc.row(0));
            assert_eq!(e.row(i), se.row(0));
        }
    }

    #[test]
    fn flattened_graph_mixes_levels_but_keeps_locality() {
        let cfg = graph_cfg(1, 1);
        let abl = AblationConfig {
            use_hierarchy: false,
            ..AblationConfig::default()
        };
        let store = store_for(&cfg, 25);
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let states = random_states(&mut rng, 5);
        let (u0, _, _) = run(&cfg, &abl, &store, &states);

        // flattened: perturbing an emotion slot CAN reach the utterance
        // level in one layer (single shared edge type)
        let mut changed = states.clone();
        changed[0].2 = Array2::from_shape_fn((1, D), |_| rng.gen_range(-1.0..1.0));
        let (u1, _, _) = run(&cfg, &abl, &store, &changed);
        assert_ne!(u0.row(0), u1.row(0), "flat graph must mix levels");

        // but utterance-index locality still applies: distance 2 > w=1
        for i in 2..5 {
            assert_eq!(u0.row(i), u1.row(i), "row {i} beyond window changed");
        }
    }

    #[test]
    fn isolated_node_in_literal_mode_goes_to_relu_of_bias() {
        // V=1 with literal w=1: no neighbors at offsets ±1, so the sum is
        // empty and the update is ReLU(bias)
        let cfg = ThcConfig {
            layers: 1,
            window: 1,
            heads: vec![1],
            attention: Switch::On,
            window_mode: WindowMode::Literal,
        };
        let mut store = store_for(&cfg, 29);
        let mut bias = Array2::zeros((1, D));
        for j in 0..D {
            bias[(0, j)] = if j % 2 == 0 { 0.5 } else { -0.5 };
        }
        store.get_mut("thc.l0.bias").assign(&bias);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let states = random_states(&mut rng, 1);
        let (u, c, e) = run(&cfg, &AblationConfig::default(), &store, &states);
        let expect = bias.mapv(|x: f64| x.max(0.0));
        assert_eq!(u.row(0), expect.row(0));
        assert_eq!(c.row(0), expect.row(0));
        assert_eq!(e.row(0), expect.row(0));
    }
}
