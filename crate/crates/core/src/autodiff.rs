//! Dense f64 tensors with reverse-mode differentiation on a define-by-run
//! tape.
//!
//! The tape is rebuilt for every forward pass: leaves are staged, ops are
//! recorded in execution order, and [`Tape::backward`] walks the nodes in
//! reverse exactly once, accumulating gradients into `requires_grad`
//! leaves. Everything is 64-bit; the op set is only what a small
//! encoder-decoder transformer needs, with broadcasting limited to
//! row-vector and scalar addition.
//!
//! Shape or index violations are programming errors and panic with a
//! message naming the offending shapes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dense row-major f64 tensor. After `backward`, leaves created with
/// `requires_grad` carry their gradient in `grad`.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Rows/cols view for ops that act on the last dimension.
    fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("rank-0 tensor has no last dim");
        let rows = self.numel() / cols.max(1);
        (rows, cols)
    }
}

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    MatMul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Softmax { a: TensorId },
    LogSoftmax { a: TensorId },
    LayerNorm { a: TensorId, gain: TensorId, shift: TensorId, inv_std: Vec<f64>, mean: Vec<f64> },
    Relu { a: TensorId },
    Embed { table: TensorId, ids: Vec<usize> },
    Dropout { a: TensorId, mask: Vec<f64> },
    SliceCols { a: TensorId, from: usize },
    ConcatCols { parts: Vec<TensorId> },
    Sum { a: TensorId },
    Mean { a: TensorId },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Define-by-run tape: records ops during the forward pass, replays their
/// derivative rules in reverse on `backward`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let cr = &mut c[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                cr[j] += av * br[j];
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    /// Gradient of the last `backward` with respect to `id`, if any.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn scalar(&self, id: TensorId) -> f64 {
        let t = self.tensor(id);
        assert!(
            t.numel() == 1,
            "expected scalar, got tensor of shape {:?}",
            t.shape
        );
        t.data[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> TensorId {
        debug_assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        debug_assert!(
            data.iter().all(|x| x.is_finite()),
            "non-finite value produced by forward op"
        );
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            op,
        });
        id
    }

    /// Stage a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op: Op::Leaf,
        });
        id
    }

    /// Constant leaf: participates in the forward pass, never receives grad.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        self.leaf(data, shape, false)
    }

    /// Elementwise add. `b` may share `a`'s shape, be a vector matching the
    /// last dimension (broadcast over rows), or be a scalar.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        let (rows, cols) = ta.rows_cols();
        let data = if ta.shape == tb.shape {
            ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect()
        } else if tb.numel() == cols && tb.shape.len() == 1 {
            let mut out = ta.data.clone();
            for r in 0..rows {
                for j in 0..cols {
                    out[r * cols + j] += tb.data[j];
                }
            }
            out
        } else if tb.numel() == 1 {
            ta.data.iter().map(|x| x + tb.data[0]).collect()
        } else {
            panic!(
                "add: shape mismatch between {:?} and {:?}",
                ta.shape, tb.shape
            );
        };
        let shape = ta.shape.clone();
        self.push(shape, data, Op::Add { a, b })
    }

    /// Elementwise subtract, same shape only.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        assert_eq!(
            ta.shape, tb.shape,
            "sub: shape mismatch between {:?} and {:?}",
            ta.shape, tb.shape
        );
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let shape = ta.shape.clone();
        self.push(shape, data, Op::Sub { a, b })
    }

    /// Elementwise multiply, same shape only.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        assert_eq!(
            ta.shape, tb.shape,
            "mul: shape mismatch between {:?} and {:?}",
            ta.shape, tb.shape
        );
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        self.push(shape, data, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let ta = self.tensor(a);
        let data = ta.data.iter().map(|x| x * c).collect();
        let shape = ta.shape.clone();
        self.push(shape, data, Op::Scale { a, c })
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        assert!(
            ta.shape.len() == 2 && tb.shape.len() == 2,
            "matmul: expected 2-D operands, got {:?} and {:?}",
            ta.shape,
            tb.shape
        );
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let (k2, n) = (tb.shape[0], tb.shape[1]);
        assert_eq!(
            k, k2,
            "matmul: inner dimensions differ between {:?} and {:?}",
            ta.shape, tb.shape
        );
        let data = matmul_raw(&ta.data, &tb.data, m, k, n);
        self.push(vec![m, n], data, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let ta = self.tensor(a);
        assert!(
            ta.shape.len() == 2,
            "transpose: expected 2-D operand, got {:?}",
            ta.shape
        );
        let (rows, cols) = (ta.shape[0], ta.shape[1]);
        let data = transpose_raw(&ta.data, rows, cols);
        self.push(vec![cols, rows], data, Op::Transpose { a })
    }

    /// Softmax over the last dimension, max-subtracted for stability.
    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let ta = self.tensor(a);
        let (rows, cols) = ta.rows_cols();
        assert!(cols >= 1, "softmax: empty last dimension in {:?}", ta.shape);
        let mut data = vec![0.0; ta.numel()];
        for r in 0..rows {
            let row = &ta.data[r * cols..(r + 1) * cols];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let shape = ta.shape.clone();
        self.push(shape, data, Op::Softmax { a })
    }

    /// Log-softmax over the last dimension via max-subtracted log-sum-exp.
    pub fn log_softmax(&mut self, a: TensorId) -> TensorId {
        let ta = self.tensor(a);
        let (rows, cols) = ta.rows_cols();
        assert!(
            cols >= 1,
            "log_softmax: empty last dimension in {:?}",
            ta.shape
        );
        let mut data = vec![0.0; ta.numel()];
        for r in 0..rows {
            let row = &ta.data[r * cols..(r + 1) * cols];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            for (o, &x) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let shape = ta.shape.clone();
        self.push(shape, data, Op::LogSoftmax { a })
    }

    /// Layer normalization over the last dimension, then affine gain/shift.
    pub fn layer_norm(
        &mut self,
        a: TensorId,
        gain: TensorId,
        shift: TensorId,
        eps: f64,
    ) -> TensorId {
        let (ta, tg, ts) = (self.tensor(a), self.tensor(gain), self.tensor(shift));
        let (rows, cols) = ta.rows_cols();
        assert!(
            cols >= 1,
            "layer_norm: empty last dimension in {:?}",
            ta.shape
        );
        assert!(eps > 0.0, "layer_norm: eps must be positive");
        assert!(
            tg.numel() == cols && ts.numel() == cols,
            "layer_norm: gain/shift shapes {:?}/{:?} do not match last dim {} of {:?}",
            tg.shape,
            ts.shape,
            cols,
            ta.shape
        );
        let mut data = vec![0.0; ta.numel()];
        let mut means = vec![0.0; rows];
        let mut inv_stds = vec![0.0; rows];
        for r in 0..rows {
            let row = &ta.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            inv_stds[r] = inv_std;
            for j in 0..cols {
                data[r * cols + j] = (row[j] - mean) * inv_std * tg.data[j] + ts.data[j];
            }
        }
        let shape = ta.shape.clone();
        self.push(
            shape,
            data,
            Op::LayerNorm {
                a,
                gain,
                shift,
                inv_std: inv_stds,
                mean: means,
            },
        )
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let ta = self.tensor(a);
        let data = ta.data.iter().map(|&x| x.max(0.0)).collect();
        let shape = ta.shape.clone();
        self.push(shape, data, Op::Relu { a })
    }

    /// Gather rows of `table` (`[v, d]`) by id, producing `[ids.len(), d]`.
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> TensorId {
        let tt = self.tensor(table);
        assert!(
            tt.shape.len() == 2,
            "embed: expected 2-D table, got {:?}",
            tt.shape
        );
        let (v, d) = (tt.shape[0], tt.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embed: id {id} out of range for table with {v} rows");
            data.extend_from_slice(&tt.data[id * d..(id + 1) * d]);
        }
        self.push(
            vec![ids.len(), d],
            data,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Inverted dropout: kept entries are scaled by 1/(1-rate) so the
    /// evaluation path needs no rescaling. `rate == 0` is the identity.
    pub fn dropout(&mut self, a: TensorId, rate: f64, rng: &mut ChaCha8Rng) -> TensorId {
        assert!((0.0..1.0).contains(&rate), "dropout: rate {rate} not in [0, 1)");
        let n = self.tensor(a).numel();
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rate > 0.0 && rng.gen::<f64>() < rate {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let ta = self.tensor(a);
        let data = ta.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = ta.shape.clone();
        self.push(shape, data, Op::Dropout { a, mask })
    }

    /// Columns `[from, to)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: TensorId, from: usize, to: usize) -> TensorId {
        let ta = self.tensor(a);
        assert!(
            ta.shape.len() == 2,
            "slice_cols: expected 2-D operand, got {:?}",
            ta.shape
        );
        let (rows, cols) = (ta.shape[0], ta.shape[1]);
        assert!(
            from < to && to <= cols,
            "slice_cols: range {from}..{to} out of bounds for {cols} columns"
        );
        let width = to - from;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&ta.data[r * cols + from..r * cols + to]);
        }
        self.push(vec![rows, width], data, Op::SliceCols { a, from })
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let rows = self.tensor(parts[0]).shape[0];
        let total: usize = parts
            .iter()
            .map(|&p| {
                let t = self.tensor(p);
                assert!(
                    t.shape.len() == 2 && t.shape[0] == rows,
                    "concat_cols: incompatible part shape {:?}, expected {rows} rows",
                    t.shape
                );
                t.shape[1]
            })
            .sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.tensor(p);
                let c = t.shape[1];
                data.extend_from_slice(&t.data[r * c..(r + 1) * c]);
            }
        }
        self.push(
            vec![rows, total],
            data,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s = self.tensor(a).data.iter().sum();
        self.push(vec![1], vec![s], Op::Sum { a })
    }

    /// Mean of all entries, as a `[1]` tensor.
    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let t = self.tensor(a);
        let m = t.data.iter().sum::<f64>() / t.numel() as f64;
        self.push(vec![1], vec![m], Op::Mean { a })
    }

    /// Cross-entropy of fixed target rows `q` against `logits` rows:
    /// `-sum(q * log_softmax(logits)) / logits_rows` when `mean_over_rows`,
    /// else the plain sum. Composite of recorded primitives, so it is
    /// differentiable without a dedicated backward rule.
    pub fn cross_entropy_rows(
        &mut self,
        logits: TensorId,
        q: TensorId,
        mean_over_rows: bool,
    ) -> TensorId {
        let (rows, _) = self.tensor(logits).rows_cols();
        let lp = self.log_softmax(logits);
        let prod = self.mul(q, lp);
        let total = self.sum(prod);
        let scale = if mean_over_rows {
            -1.0 / rows as f64
        } else {
            -1.0
        };
        self.scale(total, scale)
    }

    /// Label-smoothed cross-entropy of a single logit row against `target`.
    /// The smoothed target is `(1-alpha)*onehot(target) + alpha/v * ones`,
    /// spreading mass over every token including the target.
    pub fn label_smoothed_xent(
        &mut self,
        logits: TensorId,
        target: usize,
        alpha: f64,
        vocab_size: usize,
    ) -> TensorId {
        let t = self.tensor(logits);
        let v = *t.shape.last().expect("logits need a last dimension");
        assert_eq!(t.numel(), v, "label_smoothed_xent expects a single row");
        assert_eq!(
            v, vocab_size,
            "label_smoothed_xent: logits row has {v} entries, vocab_size is {vocab_size}"
        );
        assert!((0.0..1.0).contains(&alpha), "alpha {alpha} not in [0, 1)");
        assert!(
            target < v,
            "label_smoothed_xent: target {target} out of range for vocabulary of {v}"
        );
        let q = smoothed_target_row(target, alpha, v);
        let qt = self.constant(q, vec![v]);
        self.cross_entropy_rows(logits, qt, false)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate into every
    /// tensor on the path; leaves staged without `requires_grad` keep
    /// `grad = None`.
    pub fn backward(&mut self, loss: TensorId) {
        assert!(
            self.tensor(loss).numel() == 1,
            "backward: loss must be scalar, got shape {:?}",
            self.tensor(loss).shape
        );
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].tensor.requires_grad {
                    accumulate(&mut self.nodes[i].tensor.grad, &g);
                }
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    add_into(&mut grads, a, &g);
                    let tb = &self.nodes[b.0].tensor;
                    if tb.numel() == g.len() {
                        add_into(&mut grads, b, &g);
                    } else {
                        // Broadcast add: reduce over rows (or everything).
                        let bn = tb.numel();
                        let mut gb = vec![0.0; bn];
                        if bn == 1 {
                            gb[0] = g.iter().sum();
                        } else {
                            for (idx, &gv) in g.iter().enumerate() {
                                gb[idx % bn] += gv;
                            }
                        }
                        add_into(&mut grads, b, &gb);
                    }
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    add_into(&mut grads, a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    add_into(&mut grads, b, &neg);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].tensor.data)
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].tensor.data)
                        .map(|(gv, av)| gv * av)
                        .collect();
                    add_into(&mut grads, a, &da);
                    add_into(&mut grads, b, &db);
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    let da: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                    add_into(&mut grads, a, &da);
                }
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = {
                        let s = &self.nodes[a.0].tensor.shape;
                        (s[0], s[1])
                    };
                    let n2 = self.nodes[b.0].tensor.shape[1];
                    let bt = transpose_raw(&self.nodes[b.0].tensor.data, k, n2);
                    let da = matmul_raw(&g, &bt, m, n2, k);
                    let at = transpose_raw(&self.nodes[a.0].tensor.data, m, k);
                    let db = matmul_raw(&at, &g, k, m, n2);
                    add_into(&mut grads, a, &da);
                    add_into(&mut grads, b, &db);
                }
                Op::Transpose { a } => {
                    let a = *a;
                    let s = &self.nodes[i].tensor.shape;
                    let da = transpose_raw(&g, s[0], s[1]);
                    add_into(&mut grads, a, &da);
                }
                Op::Softmax { a } => {
                    let a = *a;
                    let out = &self.nodes[i].tensor;
                    let (rows, cols) = out.rows_cols();
                    let mut da = vec![0.0; out.numel()];
                    for r in 0..rows {
                        let p = &out.data[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = p.iter().zip(gr).map(|(pv, gv)| pv * gv).sum();
                        for j in 0..cols {
                            da[r * cols + j] = p[j] * (gr[j] - dot);
                        }
                    }
                    add_into(&mut grads, a, &da);
                }
                Op::LogSoftmax { a } => {
                    let a = *a;
                    let out = &self.nodes[i].tensor;
                    let (rows, cols) = out.rows_cols();
                    let mut da = vec![0.0; out.numel()];
                    for r in 0..rows {
                        let ls = &out.data[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..cols {
                            da[r * cols + j] = gr[j] - ls[j].exp() * gsum;
                        }
                    }
                    add_into(&mut grads, a, &da);
                }
                Op::LayerNorm {
                    a,
                    gain,
                    shift,
                    inv_std,
                    mean,
                } => {
                    let (a, gain, shift) = (*a, *gain, *shift);
                    let x = &self.nodes[a.0].tensor;
                    let (rows, cols) = x.rows_cols();
                    let gdat = &self.nodes[gain.0].tensor.data;
                    let mut da = vec![0.0; x.numel()];
                    let mut dgain = vec![0.0; cols];
                    let mut dshift = vec![0.0; cols];
                    for r in 0..rows {
                        let xr = &x.data[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let (mu, is) = (mean[r], inv_std[r]);
                        let mut sum_gg = 0.0;
                        let mut sum_ggx = 0.0;
                        for j in 0..cols {
                            let xhat = (xr[j] - mu) * is;
                            let gg = gr[j] * gdat[j];
                            dgain[j] += gr[j] * xhat;
                            dshift[j] += gr[j];
                            sum_gg += gg;
                            sum_ggx += gg * xhat;
                        }
                        let inv_n = 1.0 / cols as f64;
                        for j in 0..cols {
                            let xhat = (xr[j] - mu) * is;
                            let gg = gr[j] * gdat[j];
                            da[r * cols + j] =
                                is * (gg - inv_n * sum_gg - xhat * inv_n * sum_ggx);
                        }
                    }
                    add_into(&mut grads, a, &da);
                    add_into(&mut grads, gain, &dgain);
                    add_into(&mut grads, shift, &dshift);
                }
                Op::Relu { a } => {
                    let a = *a;
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].tensor.data)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    add_into(&mut grads, a, &da);
                }
                Op::Embed { table, ids } => {
                    let table = *table;
                    let d = self.nodes[table.0].tensor.shape[1];
                    let vn = self.nodes[table.0].tensor.numel();
                    let mut dt = vec![0.0; vn];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[row * d + j];
                        }
                    }
                    add_into(&mut grads, table, &dt);
                }
                Op::Dropout { a, mask } => {
                    let a = *a;
                    let da: Vec<f64> = g.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                    add_into(&mut grads, a, &da);
                }
                Op::SliceCols { a, from } => {
                    let (a, from) = (*a, *from);
                    let src = &self.nodes[a.0].tensor;
                    let (rows, cols) = (src.shape[0], src.shape[1]);
                    let width = self.nodes[i].tensor.shape[1];
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for j in 0..width {
                            da[r * cols + from + j] = g[r * width + j];
                        }
                    }
                    add_into(&mut grads, a, &da);
                }
                Op::ConcatCols { parts } => {
                    let rows = self.nodes[i].tensor.shape[0];
                    let total = self.nodes[i].tensor.shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.nodes[p.0].tensor.shape[1];
                        let mut dp = vec![0.0; rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        add_into(&mut grads, p, &dp);
                        offset += c;
                    }
                }
                Op::Sum { a } => {
                    let a = *a;
                    let da = vec![g[0]; self.nodes[a.0].tensor.numel()];
                    add_into(&mut grads, a, &da);
                }
                Op::Mean { a } => {
                    let a = *a;
                    let n2 = self.nodes[a.0].tensor.numel();
                    let da = vec![g[0] / n2 as f64; n2];
                    add_into(&mut grads, a, &da);
                }
            }
        }
    }
}

/// The smoothed target distribution used by label smoothing.
pub fn smoothed_target_row(target: usize, alpha: f64, v: usize) -> Vec<f64> {
    let mut q = vec![alpha / v as f64; v];
    q[target] += 1.0 - alpha;
    q
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(existing) => {
            for (e, &gv) in existing.iter_mut().zip(g) {
                *e += gv;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: TensorId, g: &[f64]) {
    accumulate(&mut grads[id.0], g);
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// One parameter's finite-difference comparison.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    /// Worst relative error across sampled coordinates, where relative
    /// error is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_err >= self.tol)
    }
}

/// Checks analytic gradients against central finite differences
/// `(f(p+h) - f(p-h)) / 2h`.
///
/// `f` must be a deterministic scalar function of the staged leaves. When
/// `coords_per_param` is `Some(k)`, `k` seeded coordinates are sampled per
/// parameter; `None` checks every coordinate.
pub fn gradcheck<F>(
    f: F,
    params: &[(String, Vec<f64>, Vec<usize>)],
    h: f64,
    tol: f64,
    coords_per_param: Option<usize>,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    assert!(h > 0.0, "gradcheck: h must be positive");
    let stage = |values: &[Vec<f64>], requires_grad: bool| -> (Tape, Vec<TensorId>) {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = params
            .iter()
            .zip(values)
            .map(|((_, _, shape), v)| tape.leaf(v.clone(), shape.clone(), requires_grad))
            .collect();
        (tape, ids)
    };

    let base: Vec<Vec<f64>> = params.iter().map(|(_, v, _)| v.clone()).collect();

    // Analytic pass.
    let (mut tape, ids) = stage(&base, true);
    let loss = f(&mut tape, &ids);
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, (_, v, _))| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; v.len()])
        })
        .collect();

    let eval = |values: &[Vec<f64>]| -> f64 {
        let (mut tape, ids) = stage(values, false);
        let loss = f(&mut tape, &ids);
        tape.scalar(loss)
    };

    let mut rng = crate::rng::stream(seed, "gradcheck", 0);
    let mut out = Vec::with_capacity(params.len());
    for (pi, (name, values, _)) in params.iter().enumerate() {
        let coords: Vec<usize> = match coords_per_param {
            Some(k) if k < values.len() => {
                (0..k).map(|_| rng.gen_range(0..values.len())).collect()
            }
            _ => (0..values.len()).collect(),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            coords_checked: coords.len(),
        };
        for &c in &coords {
            let mut plus = base.clone();
            plus[pi][c] += h;
            let mut minus = base.clone();
            minus[pi][c] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[pi][c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_coord = c;
                check.analytic_at_worst = a;
                check.numeric_at_worst = numeric;
            }
        }
        out.push(check);
    }
    GradCheckReport { params: out, tol }
}
