//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its value and the indices of its inputs. [`Tape::backward`] walks the
//! nodes in reverse, accumulating gradients. All tensors are rank-2
//! (`Array2<f64>`); vectors are `1×d` or `d×1` matrices.
//!
//! Parameters live outside the tape in a [`ParamStore`]. A [`Session`]
//! binds store entries to tape leaves for one forward/backward pass and
//! moves the resulting leaf gradients into a [`GradAccum`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorRef(usize);

enum Op {
    Leaf,
    /// Row lookup: `out[r] = table[ids[r]]`.
    Gather {
        table: TensorRef,
        ids: Rc<Vec<usize>>,
    },
    MatMul(TensorRef, TensorRef),
    /// `a · bᵀ`.
    MatMulNT(TensorRef, TensorRef),
    Add(TensorRef, TensorRef),
    /// Matrix plus a `1×d` row broadcast over all rows.
    AddRow(TensorRef, TensorRef),
    Scale(TensorRef, f64),
    Relu(TensorRef),
    LeakyRelu(TensorRef, f64),
    Gelu(TensorRef),
    /// Row-wise softmax over the columns where `valid` is true; other
    /// columns are exactly zero. A shared mask applies to every row.
    SoftmaxRowsMasked {
        a: TensorRef,
        valid: Rc<Vec<bool>>,
    },
    /// Row-wise softmax where row `i` is taken over the columns `j` with
    /// `adj[(i,j)] != 0`. Rows with no valid column come out all-zero.
    SoftmaxRowsAdj {
        a: TensorRef,
        adj: Rc<Array2<f64>>,
    },
    SliceRows {
        a: TensorRef,
        r0: usize,
        r1: usize,
    },
    SliceCols {
        a: TensorRef,
        c0: usize,
        c1: usize,
    },
    ConcatRows(Vec<TensorRef>),
    ConcatCols(Vec<TensorRef>),
    /// Column means over all rows, producing `1×d`.
    MeanRows(TensorRef),
    /// Sum of all entries, producing `1×1`.
    SumAll(TensorRef),
    /// Copy of `base` with rows `at .. at+block.nrows` replaced by `block`.
    SubstituteRows {
        base: TensorRef,
        block: TensorRef,
        at: usize,
    },
    /// `out[i][j] = a[i][0] + b[j][0]` from column vectors `a` (m×1), `b` (n×1).
    OuterSum(TensorRef, TensorRef),
    /// Summed cross-entropy over the rows that carry a target, with only
    /// the first `valid_cols` columns treated as real classes. Output `1×1`.
    CeRowsSum {
        logits: TensorRef,
        targets: Rc<Vec<Option<usize>>>,
        valid_cols: usize,
    },
    /// Elementwise product with a fixed mask (inverted-dropout scaling
    /// baked into the mask values).
    Dropout {
        a: TensorRef,
        mask: Rc<Array2<f64>>,
    },
    /// Per-row normalization to zero mean and unit variance, then an
    /// elementwise affine with `gain` and `bias` rows.
    LayerNorm {
        x: TensorRef,
        gain: TensorRef,
        bias: TensorRef,
        eps: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op) -> TensorRef {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        TensorRef(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Array2<f64>) -> TensorRef {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> TensorRef {
        self.leaf(Array2::zeros((rows, cols)))
    }

    /// Clone of the node's current value.
    pub fn value(&self, t: TensorRef) -> Array2<f64> {
        self.nodes.borrow()[t.0].value.clone()
    }

    pub fn shape(&self, t: TensorRef) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        let d = nodes[t.0].value.dim();
        (d.0, d.1)
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, t: TensorRef) -> f64 {
        let nodes = self.nodes.borrow();
        debug_assert_eq!(nodes[t.0].value.dim(), (1, 1));
        nodes[t.0].value[(0, 0)]
    }

    fn with_value<R>(&self, t: TensorRef, f: impl FnOnce(&Array2<f64>) -> R) -> R {
        f(&self.nodes.borrow()[t.0].value)
    }

    pub fn gather(&self, table: TensorRef, ids: &[usize]) -> TensorRef {
        let out = self.with_value(table, |tv| {
            let mut out = Array2::zeros((ids.len(), tv.ncols()));
            for (r, &id) in ids.iter().enumerate() {
                assert!(id < tv.nrows(), "gather id {} out of range {}", id, tv.nrows());
                out.row_mut(r).assign(&tv.row(id));
            }
            out
        });
        self.push(
            out,
            Op::Gather {
                table,
                ids: Rc::new(ids.to_vec()),
            },
        )
    }

    pub fn matmul(&self, a: TensorRef, b: TensorRef) -> TensorRef {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
            av.dot(bv)
        };
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&self, a: TensorRef, b: TensorRef) -> TensorRef {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(av.ncols(), bv.ncols(), "matmul_nt inner dims");
            av.dot(&bv.t())
        };
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn add(&self, a: TensorRef, b: TensorRef) -> TensorRef {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(av.dim(), bv.dim(), "add shapes");
            av + bv
        };
        self.push(out, Op::Add(a, b))
    }

    /// Broadcast-add a `1×d` row vector to every row of `a`.
    pub fn add_row(&self, a: TensorRef, row: TensorRef) -> TensorRef {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, rv) = (&nodes[a.0].value, &nodes[row.0].value);
            assert_eq!(rv.nrows(), 1, "add_row expects 1×d row");
            assert_eq!(av.ncols(), rv.ncols(), "add_row widths");
            av + &rv.row(0)
        };
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&self, a: TensorRef, c: f64) -> TensorRef {
        let out = self.with_value(a, |av| av * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn relu(&self, a: TensorRef) -> TensorRef {
        let out = self.with_value(a, |av| av.mapv(|x| x.max(0.0)));
        self.push(out, Op::Relu(a))
    }

    pub fn leaky_relu(&self, a: TensorRef, slope: f64) -> TensorRef {
        let out = self.with_value(a, |av| av.mapv(|x| if x > 0.0 { x } else { slope * x }));
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn gelu(&self, a: TensorRef) -> TensorRef {
        let out = self.with_value(a, |av| av.mapv(gelu_tanh));
        self.push(out, Op::Gelu(a))
    }

    pub fn softmax_rows_masked(&self, a: TensorRef, valid: Rc<Vec<bool>>) -> TensorRef {
        let out = self.with_value(a, |av| {
            assert_eq!(av.ncols(), valid.len(), "mask width");
            let mut out = Array2::zeros(av.dim());
            for (i, row) in av.outer_iter().enumerate() {
                softmax_into(
                    row.iter().copied(),
                    |j| valid[j],
                    av.ncols(),
                    &mut out.row_mut(i),
                );
            }
            out
        });
        self.push(out, Op::SoftmaxRowsMasked { a, valid })
    }

    pub fn softmax_rows_adj(&self, a: TensorRef, adj: Rc<Array2<f64>>) -> TensorRef {
        let out = self.with_value(a, |av| {
            assert_eq!(av.dim(), adj.dim(), "adjacency shape");
            let mut out = Array2::zeros(av.dim());
            for (i, row) in av.outer_iter().enumerate() {
                softmax_into(
                    row.iter().copied(),
                    |j| adj[(i, j)] != 0.0,
                    av.ncols(),
                    &mut out.row_mut(i),
                );
            }
            out
        });
        self.push(out, Op::SoftmaxRowsAdj { a, adj })
    }

    pub fn slice_rows(&self, a: TensorRef, r0: usize, r1: usize) -> TensorRef {
        let out = self.with_value(a, |av| {
            assert!(r0 <= r1 && r1 <= av.nrows(), "row slice bounds");
            av.slice(s![r0..r1, ..]).to_owned()
        });
        self.push(out, Op::SliceRows { a, r0, r1 })
    }

    pub fn slice_cols(&self, a: TensorRef, c0: usize, c1: usize) -> TensorRef {
        let out = self.with_value(a, |av| {
            assert!(c0 <= c1 && c1 <= av.ncols(), "col slice bounds");
            av.slice(s![.., c0..c1]).to_owned()
        });
        self.push(out, Op::SliceCols { a, c0, c1 })
    }

    pub fn concat_rows(&self, parts: &[TensorRef]) -> TensorRef {
        assert!(!parts.is_empty());
        let out = {
            let nodes = self.nodes.borrow();
            let ncols = nodes[parts[0].0].value.ncols();
            let nrows: usize = parts.iter().map(|p| nodes[p.0].value.nrows()).sum();
            let mut out = Array2::zeros((nrows, ncols));
            let mut at = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                assert_eq!(v.ncols(), ncols, "concat_rows widths");
                out.slice_mut(s![at..at + v.nrows(), ..]).assign(v);
                at += v.nrows();
            }
            out
        };
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&self, parts: &[TensorRef]) -> TensorRef {
        assert!(!parts.is_empty());
        let out = {
            let nodes = self.nodes.borrow();
            let nrows = nodes[parts[0].0].value.nrows();
            let ncols: usize = parts.iter().map(|p| nodes[p.0].value.ncols()).sum();
            let mut out = Array2::zeros((nrows, ncols));
            let mut at = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                assert_eq!(v.nrows(), nrows, "concat_cols heights");
                out.slice_mut(s![.., at..at + v.ncols()]).assign(v);
                at += v.ncols();
            }
            out
        };
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn mean_rows(&self, a: TensorRef) -> TensorRef {
        let out = self.with_value(a, |av| {
            let n = av.nrows() as f64;
            let mut out = Array2::zeros((1, av.ncols()));
            out.row_mut(0).assign(&(av.sum_axis(Axis(0)) / n));
            out
        });
        self.push(out, Op::MeanRows(a))
    }

    pub fn sum_all(&self, a: TensorRef) -> TensorRef {
        let out = self.with_value(a, |av| Array2::from_elem((1, 1), av.sum()));
        self.push(out, Op::SumAll(a))
    }

    pub fn substitute_rows(&self, base: TensorRef, block: TensorRef, at: usize) -> TensorRef {
        let out = {
            let nodes = self.nodes.borrow();
            let (bv, kv) = (&nodes[base.0].value, &nodes[block.0].value);
            assert_eq!(bv.ncols(), kv.ncols(), "substitute widths");
            assert!(at + kv.nrows() <= bv.nrows(), "substitute bounds");
            let mut out = bv.clone();
            out.slice_mut(s![at..at + kv.nrows(), ..]).assign(kv);
            out
        };
        self.push(out, Op::SubstituteRows { base, block, at })
    }

    pub fn outer_sum(&self, a: TensorRef, b: TensorRef) -> TensorRef {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(av.ncols(), 1, "outer_sum expects column vectors");
            assert_eq!(bv.ncols(), 1, "outer_sum expects column vectors");
            let mut out = Array2::zeros((av.nrows(), bv.nrows()));
            for i in 0..av.nrows() {
                for j in 0..bv.nrows() {
                    out[(i, j)] = av[(i, 0)] + bv[(j, 0)];
                }
            }
            out
        };
        self.push(out, Op::OuterSum(a, b))
    }

    /// Summed cross-entropy over rows with a target; only the first
    /// `valid_cols` columns count as classes. Rows whose target is `None`
    /// contribute nothing and receive no gradient.
    pub fn ce_rows_sum(
        &self,
        logits: TensorRef,
        targets: Rc<Vec<Option<usize>>>,
        valid_cols: usize,
    ) -> TensorRef {
        let out = self.with_value(logits, |lv| {
            assert_eq!(lv.nrows(), targets.len(), "targets per row");
            assert!(valid_cols >= 1 && valid_cols <= lv.ncols(), "valid_cols range");
            let mut total = 0.0;
            for (r, tgt) in targets.iter().enumerate() {
                if let Some(t) = tgt {
                    assert!(*t < valid_cols, "target {} outside valid classes", t);
                    let row = lv.row(r);
                    let lse = log_sum_exp(row.iter().take(valid_cols).copied());
                    total += lse - row[*t];
                }
            }
            Array2::from_elem((1, 1), total)
        });
        self.push(
            out,
            Op::CeRowsSum {
                logits,
                targets,
                valid_cols,
            },
        )
    }

    pub fn layer_norm(&self, x: TensorRef, gain: TensorRef, bias: TensorRef, eps: f64) -> TensorRef {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (
                &nodes[x.0].value,
                &nodes[gain.0].value,
                &nodes[bias.0].value,
            );
            assert_eq!(gv.nrows(), 1, "layer_norm gain is 1×d");
            assert_eq!(bv.nrows(), 1, "layer_norm bias is 1×d");
            assert_eq!(xv.ncols(), gv.ncols(), "layer_norm widths");
            assert_eq!(xv.ncols(), bv.ncols(), "layer_norm widths");
            let mut out = Array2::zeros(xv.dim());
            for (i, row) in xv.outer_iter().enumerate() {
                let (mean, var) = row_moments(&row);
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..xv.ncols() {
                    out[(i, j)] = (row[j] - mean) * inv * gv[(0, j)] + bv[(0, j)];
                }
            }
            out
        };
        self.push(out, Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn dropout(&self, a: TensorRef, mask: Rc<Array2<f64>>) -> TensorRef {
        let out = self.with_value(a, |av| {
            assert_eq!(av.dim(), mask.dim(), "dropout mask shape");
            av * &*mask
        });
        self.push(out, Op::Dropout { a, mask })
    }

    /// Backpropagate from a `1×1` root node, returning gradients for every
    /// node that influences it.
    pub fn backward(&self, root: TensorRef) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            // leaves keep their gradient; interior grads are consumed
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let go = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Gather { table, ids } => {
                    let tv_dim = nodes[table.0].value.dim();
                    let g = slot(&mut grads, table.0, tv_dim);
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = g.row_mut(id);
                        dst += &go.row(r);
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let ga = go.dot(&bv.t());
                    let gb = av.t().dot(&go);
                    add_into(&mut grads, a.0, ga);
                    add_into(&mut grads, b.0, gb);
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let ga = go.dot(bv);
                    let gb = go.t().dot(av);
                    add_into(&mut grads, a.0, ga);
                    add_into(&mut grads, b.0, gb);
                }
                Op::Add(a, b) => {
                    add_into(&mut grads, a.0, go.clone());
                    add_into(&mut grads, b.0, go);
                }
                Op::AddRow(a, row) => {
                    let grow = go.sum_axis(Axis(0)).insert_axis(Axis(0));
                    add_into(&mut grads, a.0, go);
                    add_into(&mut grads, row.0, grow);
                }
                Op::Scale(a, c) => add_into(&mut grads, a.0, &go * *c),
                Op::Relu(a) => {
                    let av = &nodes[a.0].value;
                    let ga = ndarray::Zip::from(&go)
                        .and(av)
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    add_into(&mut grads, a.0, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let av = &nodes[a.0].value;
                    let ga = ndarray::Zip::from(&go)
                        .and(av)
                        .map_collect(|&g, &x| if x > 0.0 { g } else { g * slope });
                    add_into(&mut grads, a.0, ga);
                }
                Op::Gelu(a) => {
                    let av = &nodes[a.0].value;
                    let ga = ndarray::Zip::from(&go)
                        .and(av)
                        .map_collect(|&g, &x| g * gelu_tanh_deriv(x));
                    add_into(&mut grads, a.0, ga);
                }
                Op::SoftmaxRowsMasked { a, valid } => {
                    let y = &node.value;
                    let ga = softmax_backward(y, &go, |_i, j| valid[j]);
                    add_into(&mut grads, a.0, ga);
                }
                Op::SoftmaxRowsAdj { a, adj } => {
                    let y = &node.value;
                    let ga = softmax_backward(y, &go, |i, j| adj[(i, j)] != 0.0);
                    add_into(&mut grads, a.0, ga);
                }
                Op::SliceRows { a, r0, r1 } => {
                    let dim = nodes[a.0].value.dim();
                    let g = slot(&mut grads, a.0, dim);
                    let mut dst = g.slice_mut(s![*r0..*r1, ..]);
                    dst += &go;
                }
                Op::SliceCols { a, c0, c1 } => {
                    let dim = nodes[a.0].value.dim();
                    let g = slot(&mut grads, a.0, dim);
                    let mut dst = g.slice_mut(s![.., *c0..*c1]);
                    dst += &go;
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let n = nodes[p.0].value.nrows();
                        add_into(&mut grads, p.0, go.slice(s![at..at + n, ..]).to_owned());
                        at += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let n = nodes[p.0].value.ncols();
                        add_into(&mut grads, p.0, go.slice(s![.., at..at + n]).to_owned());
                        at += n;
                    }
                }
                Op::MeanRows(a) => {
                    let av = &nodes[a.0].value;
                    let n = av.nrows() as f64;
                    let mut ga = Array2::zeros(av.dim());
                    for mut row in ga.outer_iter_mut() {
                        row.assign(&(&go.row(0) / n));
                    }
                    add_into(&mut grads, a.0, ga);
                }
                Op::SumAll(a) => {
                    let av = &nodes[a.0].value;
                    let ga = Array2::from_elem(av.dim(), go[(0, 0)]);
                    add_into(&mut grads, a.0, ga);
                }
                Op::SubstituteRows { base, block, at } => {
                    let nb = nodes[block.0].value.nrows();
                    let mut gbase = go.clone();
                    gbase.slice_mut(s![*at..*at + nb, ..]).fill(0.0);
                    add_into(&mut grads, base.0, gbase);
                    add_into(&mut grads, block.0, go.slice(s![*at..*at + nb, ..]).to_owned());
                }
                Op::OuterSum(a, b) => {
                    let ga = go.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let gb = go.sum_axis(Axis(0)).insert_axis(Axis(1));
                    add_into(&mut grads, a.0, ga);
                    add_into(&mut grads, b.0, gb);
                }
                Op::CeRowsSum {
                    logits,
                    targets,
                    valid_cols,
                } => {
                    let lv = &nodes[logits.0].value;
                    let scale = go[(0, 0)];
                    let mut gl = Array2::zeros(lv.dim());
                    for (r, tgt) in targets.iter().enumerate() {
                        if let Some(t) = tgt {
                            let row = lv.row(r);
                            let lse = log_sum_exp(row.iter().take(*valid_cols).copied());
                            for j in 0..*valid_cols {
                                let p = (row[j] - lse).exp();
                                let delta = if j == *t { 1.0 } else { 0.0 };
                                gl[(r, j)] = scale * (p - delta);
                            }
                        }
                    }
                    add_into(&mut grads, logits.0, gl);
                }
                Op::Dropout { a, mask } => {
                    add_into(&mut grads, a.0, &go * &**mask);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xv = &nodes[x.0].value;
                    let gv = &nodes[gain.0].value;
                    let d = xv.ncols();
                    let mut gx = Array2::zeros(xv.dim());
                    let mut ggain = Array2::zeros((1, d));
                    let mut gbias = Array2::zeros((1, d));
                    for (i, row) in xv.outer_iter().enumerate() {
                        let (mean, var) = row_moments(&row);
                        let inv = 1.0 / (var + eps).sqrt();
                        // g = go∘gain routed through the normalized value
                        let mut g_mean = 0.0;
                        let mut gxhat_dot = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            let g = go[(i, j)] * gv[(0, j)];
                            ggain[(0, j)] += go[(i, j)] * xhat;
                            gbias[(0, j)] += go[(i, j)];
                            g_mean += g;
                            gxhat_dot += g * xhat;
                        }
                        g_mean /= d as f64;
                        gxhat_dot /= d as f64;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            let g = go[(i, j)] * gv[(0, j)];
                            gx[(i, j)] = inv * (g - g_mean - xhat * gxhat_dot);
                        }
                    }
                    add_into(&mut grads, x.0, gx);
                    add_into(&mut grads, gain.0, ggain);
                    add_into(&mut grads, bias.0, gbias);
                }
            }
        }
        Gradients { grads }
    }
}

fn add_into(grads: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
    match &mut grads[idx] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

fn slot(grads: &mut [Option<Array2<f64>>], idx: usize, dim: (usize, usize)) -> &mut Array2<f64> {
    grads[idx].get_or_insert_with(|| Array2::zeros(dim))
}

fn row_moments(row: &ndarray::ArrayView1<f64>) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.sum() / d;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, var)
}

fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = xs.map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Masked softmax into `out`; all-invalid rows stay zero.
fn softmax_into(
    row: impl Iterator<Item = f64> + Clone,
    valid: impl Fn(usize) -> bool,
    ncols: usize,
    out: &mut ndarray::ArrayViewMut1<f64>,
) {
    let mut m = f64::NEG_INFINITY;
    for (j, x) in row.clone().enumerate() {
        if valid(j) && x > m {
            m = x;
        }
    }
    if m == f64::NEG_INFINITY {
        return;
    }
    let mut z = 0.0;
    let exps: Vec<f64> = row
        .enumerate()
        .map(|(j, x)| {
            if valid(j) {
                let e = (x - m).exp();
                z += e;
                e
            } else {
                0.0
            }
        })
        .collect();
    for j in 0..ncols {
        out[j] = exps[j] / z;
    }
}

fn softmax_backward(
    y: &Array2<f64>,
    go: &Array2<f64>,
    valid: impl Fn(usize, usize) -> bool,
) -> Array2<f64> {
    let mut ga = Array2::zeros(y.dim());
    for i in 0..y.nrows() {
        let mut dot = 0.0;
        for j in 0..y.ncols() {
            dot += go[(i, j)] * y[(i, j)];
        }
        for j in 0..y.ncols() {
            if valid(i, j) {
                ga[(i, j)] = y[(i, j)] * (go[(i, j)] - dot);
            }
        }
    }
    ga
}

/// Gradients produced by [`Tape::backward`]. Interior-node gradients are
/// consumed during the sweep; only leaf gradients are retained.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the given leaf, if it influenced the root.
    pub fn get(&self, t: TensorRef) -> Option<&Array2<f64>> {
        self.grads[t.0].as_ref()
    }
}

/// Named parameter tensors with deterministic iteration order.
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

struct ParamEntry {
    name: String,
    value: Array2<f64>,
    trainable: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable: true,
        });
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        let idx = self.index_of(name);
        self.entries[idx].trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn index_of(&self, name: &str) -> usize {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self.entries[self.index_of(name)].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let idx = self.index_of(name);
        &mut self.entries[idx].value
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn name_at(&self, idx: usize) -> &str {
        &self.entries[idx].name
    }

    pub fn value_at(&self, idx: usize) -> &Array2<f64> {
        &self.entries[idx].value
    }

    pub fn value_at_mut(&mut self, idx: usize) -> &mut Array2<f64> {
        &mut self.entries[idx].value
    }

    pub fn trainable_at(&self, idx: usize) -> bool {
        self.entries[idx].trainable
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Per-parameter gradient buffers accumulated over one or more passes.
pub struct GradAccum {
    grads: Vec<Array2<f64>>,
}

impl GradAccum {
    pub fn new(store: &ParamStore) -> Self {
        GradAccum {
            grads: store
                .entries
                .iter()
                .map(|e| Array2::zeros(e.value.dim()))
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn get(&self, store: &ParamStore, name: &str) -> &Array2<f64> {
        &self.grads[store.index_of(name)]
    }

    pub fn at(&self, idx: usize) -> &Array2<f64> {
        &self.grads[idx]
    }

    /// First parameter holding a non-finite gradient, if any.
    pub fn find_non_finite<'s>(&self, store: &'s ParamStore) -> Option<&'s str> {
        for (idx, g) in self.grads.iter().enumerate() {
            if g.iter().any(|x| !x.is_finite()) {
                return Some(store.name_at(idx));
            }
        }
        None
    }
}

/// One forward/backward pass: a tape plus bindings from store parameters
/// to tape leaves.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bindings: RefCell<Vec<(usize, TensorRef)>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bindings: RefCell::new(Vec::new()),
        }
    }

    /// Bind a named parameter as a tape leaf. Repeated calls for the same
    /// name on one session return the same leaf.
    pub fn param(&self, name: &str) -> TensorRef {
        let idx = self.store.index_of(name);
        if let Some(&(_, t)) = self.bindings.borrow().iter().find(|(i, _)| *i == idx) {
            return t;
        }
        let t = self.tape.leaf(self.store.entries[idx].value.clone());
        self.bindings.borrow_mut().push((idx, t));
        t
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Backward from `root`, adding each trainable parameter's gradient
    /// into `accum`. Fails if any produced gradient is non-finite.
    pub fn backward_into(&self, root: TensorRef, accum: &mut GradAccum) -> Result<()> {
        let grads = self.tape.backward(root);
        for &(idx, t) in self.bindings.borrow().iter() {
            if !self.store.entries[idx].trainable {
                continue;
            }
            if let Some(g) = grads.get(t) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        param: self.store.entries[idx].name.clone(),
                    });
                }
                accum.grads[idx] += g;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Central finite-difference check of `build` (leaves -> scalar loss)
    /// against tape gradients. `build` is re-run on fresh tapes for the
    /// numeric side, so it must be deterministic.
    pub fn fd_check(
        inputs: &[Array2<f64>],
        tol: f64,
        build: impl Fn(&Tape, &[TensorRef]) -> TensorRef,
    ) {
        let h = 1e-5;
        let tape = Tape::new();
        let leaves: Vec<TensorRef> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
        let loss = build(&tape, &leaves);
        let grads = tape.backward(loss);

        let eval = |inputs: &[Array2<f64>]| -> f64 {
            let tape = Tape::new();
            let leaves: Vec<TensorRef> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
            tape.scalar(build(&tape, &leaves))
        };

        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(leaves[k])
                .cloned()
                .unwrap_or_else(|| Array2::zeros(input.dim()));
            for ((i, j), _) in input.indexed_iter() {
                let mut plus = inputs.to_vec();
                plus[k][(i, j)] += h;
                let mut minus = inputs.to_vec();
                minus[k][(i, j)] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[(i, j)];
                let denom = a.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (a - numeric).abs() / denom <= tol,
                    "input {k} entry ({i},{j}): analytic {a} vs numeric {numeric}"
                );
            }
        }
    }
}
