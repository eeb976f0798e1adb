//! Generic differentiable ops recorded on a [`Tape`].

use std::rc::Rc;

use super::{LeafKind, NodeId, OpRecord, SavedTensor, Tape};
use crate::error::{LorsError, Result};
use crate::tensor::{self, DenseMatrix, RngState};

impl Tape {
    /// Returns the operand for capture by a backward closure, plus a saved
    /// entry when the operand is an activation (counted) rather than a
    /// parameter or constant (held by the model, not counted).
    fn keep(&self, id: NodeId, label: &str) -> (Rc<DenseMatrix>, Option<SavedTensor>) {
        let value = self.value_rc(id);
        match self.leaf_kind(id) {
            Some(LeafKind::Param) | Some(LeafKind::Constant) => (value, None),
            _ => (Rc::clone(&value), Some(SavedTensor::new(label, value))),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.counters.matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        let mut saved = Vec::new();
        // grad a needs b, grad b needs a.
        let kept_b = need_a.then(|| self.keep(b, "rhs"));
        let kept_a = need_b.then(|| self.keep(a, "lhs"));
        let kb = kept_b.map(|(v, s)| {
            saved.extend(s);
            v
        });
        let ka = kept_a.map(|(v, s)| {
            saved.extend(s);
            v
        });
        self.record(OpRecord {
            name: "matmul".into(),
            inputs: vec![a, b],
            output: out,
            saved,
            backward: Box::new(move |g, cc| {
                let ga = match &kb {
                    Some(b) => Some(cc.matmul(g, &b.transpose())?),
                    None => None,
                };
                let gb = match &ka {
                    Some(a) => Some(cc.matmul(&a.transpose(), g)?),
                    None => None,
                };
                Ok(vec![ga, gb])
            }),
        })
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.counters.hadamard(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        let mut saved = Vec::new();
        let kb = need_a.then(|| self.keep(b, "rhs")).map(|(v, s)| {
            saved.extend(s);
            v
        });
        let ka = need_b.then(|| self.keep(a, "lhs")).map(|(v, s)| {
            saved.extend(s);
            v
        });
        self.record(OpRecord {
            name: "hadamard".into(),
            inputs: vec![a, b],
            output: out,
            saved,
            backward: Box::new(move |g, cc| {
                let ga = match &kb {
                    Some(b) => Some(cc.hadamard(g, b)?),
                    None => None,
                };
                let gb = match &ka {
                    Some(a) => Some(cc.hadamard(g, a)?),
                    None => None,
                };
                Ok(vec![ga, gb])
            }),
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.counters.add(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        self.record(OpRecord {
            name: "add".into(),
            inputs: vec![a, b],
            output: out,
            saved: vec![],
            backward: Box::new(|g, _| Ok(vec![Some(g.clone()), Some(g.clone())])),
        })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.counters.sub(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        self.record(OpRecord {
            name: "sub".into(),
            inputs: vec![a, b],
            output: out,
            saved: vec![],
            backward: Box::new(|g, cc| Ok(vec![Some(g.clone()), Some(cc.scale(g, -1.0))])),
        })
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let out = self.counters.scale(&self.nodes[a.0].value, s);
        self.record(OpRecord {
            name: "scale".into(),
            inputs: vec![a],
            output: out,
            saved: vec![],
            backward: Box::new(move |g, cc| Ok(vec![Some(cc.scale(g, s))])),
        })
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).transpose();
        self.record(OpRecord {
            name: "transpose".into(),
            inputs: vec![a],
            output: out,
            saved: vec![],
            backward: Box::new(|g, _| Ok(vec![Some(g.transpose())])),
        })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.counters_mut().add_elementwise(out.elements());
        let kept = Rc::new(out.clone());
        let saved = vec![SavedTensor::new("relu_out", Rc::clone(&kept))];
        self.record(OpRecord {
            name: "relu".into(),
            inputs: vec![a],
            output: out,
            saved,
            backward: Box::new(move |g, cc| {
                cc.add_elementwise(g.elements());
                Ok(vec![Some(g.zip_map(&kept, "relu_backward", |gv, y| if y > 0.0 { gv } else { 0.0 })?)])
            }),
        })
    }

    /// `y + bias` with `bias` an `rows×1` column broadcast over columns.
    pub fn add_bias(&mut self, y: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = self.counters.add_bias(&self.nodes[y.0].value, &self.nodes[bias.0].value)?;
        self.record(OpRecord {
            name: "add_bias".into(),
            inputs: vec![y, bias],
            output: out,
            saved: vec![],
            backward: Box::new(|g, cc| Ok(vec![Some(g.clone()), Some(cc.row_sums(g))])),
        })
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value_rc(a);
        self.counters_mut().add_elementwise(v.elements());
        let (rows, cols) = v.shape();
        self.record(OpRecord {
            name: "sum".into(),
            inputs: vec![a],
            output: DenseMatrix::filled(1, 1, v.sum()),
            saved: vec![],
            backward: Box::new(move |g, _| Ok(vec![Some(DenseMatrix::filled(rows, cols, g.get(0, 0)))])),
        })
    }

    /// `‖a‖²_F / 2`.
    pub fn half_sq_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value_rc(a);
        let value = 0.5 * v.data().iter().map(|x| x * x).sum::<f64>();
        let (kept, saved) = self.keep(a, "input");
        self.record(OpRecord {
            name: "half_sq_norm".into(),
            inputs: vec![a],
            output: DenseMatrix::filled(1, 1, value),
            saved: saved.into_iter().collect(),
            backward: Box::new(move |g, cc| {
                let s = g.get(0, 0);
                Ok(vec![Some(if s == 1.0 { (*kept).clone() } else { cc.scale(&kept, s) })])
            }),
        })
    }

    /// Mean squared error over every entry: `Σ (p − t)² / n`.
    pub fn mse(&mut self, pred: NodeId, target: &DenseMatrix) -> Result<NodeId> {
        let diff = tensor::sub(self.value(pred), target)?;
        let n = diff.len() as f64;
        let value = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
        self.counters_mut().add_elementwise(2 * diff.elements());
        let diff = Rc::new(diff);
        self.record(OpRecord {
            name: "mse".into(),
            inputs: vec![pred],
            output: DenseMatrix::filled(1, 1, value),
            saved: vec![SavedTensor::new("residual", Rc::clone(&diff))],
            backward: Box::new(move |g, cc| {
                cc.add_elementwise(diff.elements());
                let s = 2.0 * g.get(0, 0) / n;
                Ok(vec![Some(diff.map(|d| d * s))])
            }),
        })
    }

    /// Mean softmax cross-entropy of `logits` (`K×L`, one column per sample).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = self.value_rc(logits);
        let (k, l) = z.shape();
        if labels.len() != l {
            return Err(LorsError::shape("softmax_cross_entropy", (k, l), (1, labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&c| c >= k) {
            return Err(LorsError::arg(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = DenseMatrix::zeros(k, l);
        let mut loss = 0.0;
        for j in 0..l {
            let max = (0..k).map(|i| z.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..k).map(|i| (z.get(i, j) - max).exp()).sum();
            for i in 0..k {
                probs.set(i, j, (z.get(i, j) - max).exp() / denom);
            }
            loss -= (z.get(labels[j], j) - max) - denom.ln();
        }
        self.counters_mut().add_elementwise(3 * z.elements());
        let probs = Rc::new(probs);
        let labels = labels.to_vec();
        self.record(OpRecord {
            name: "softmax_cross_entropy".into(),
            inputs: vec![logits],
            output: DenseMatrix::filled(1, 1, loss / l as f64),
            saved: vec![SavedTensor::new("probs", Rc::clone(&probs))],
            backward: Box::new(move |g, cc| {
                cc.add_elementwise(probs.elements());
                let s = g.get(0, 0) / l as f64;
                let mut grad = (*probs).clone();
                for (j, &c) in labels.iter().enumerate() {
                    grad.set(c, j, grad.get(c, j) - 1.0);
                }
                Ok(vec![Some(tensor::scale(&grad, s))])
            }),
        })
    }

    /// Expands a `1×C` row into the `r×C` block-diagonal layout
    /// `[diag(b₁) … diag(b_{C/r})]`: entry `(p, j)` is `b[j]` when `j mod r == p`.
    pub fn block_diag_expand(&mut self, b: NodeId, r: usize) -> Result<NodeId> {
        let v = self.value_rc(b);
        let (rows, c) = v.shape();
        if rows != 1 || r == 0 || c % r != 0 {
            return Err(LorsError::arg(format!("block_diag_expand needs a 1xC row with r | C, got {rows}x{c}, r={r}")));
        }
        let out = DenseMatrix::from_fn(r, c, |p, j| if j % r == p { v.get(0, j) } else { 0.0 });
        self.record(OpRecord {
            name: "block_diag_expand".into(),
            inputs: vec![b],
            output: out,
            saved: vec![],
            backward: Box::new(move |g, _| Ok(vec![Some(DenseMatrix::from_fn(1, c, |_, j| g.get(j % r, j)))])),
        })
    }

    /// Tiles the columns of `a` (`R×r`) `times` times: entry `(i, j)` is `a[i, j mod r]`.
    pub fn tile_columns(&mut self, a: NodeId, times: usize) -> Result<NodeId> {
        let v = self.value_rc(a);
        let (rows, r) = v.shape();
        if times == 0 {
            return Err(LorsError::arg("tile_columns needs times >= 1"));
        }
        let out = DenseMatrix::from_fn(rows, r * times, |i, j| v.get(i, j % r));
        self.record(OpRecord {
            name: "tile_columns".into(),
            inputs: vec![a],
            output: out,
            saved: vec![],
            backward: Box::new(move |g, cc| {
                cc.add_elementwise(g.elements());
                let mut ga = DenseMatrix::zeros(rows, r);
                for i in 0..rows {
                    for j in 0..r * times {
                        ga[(i, j % r)] += g.get(i, j);
                    }
                }
                Ok(vec![Some(ga)])
            }),
        })
    }

    /// Stacks a `1×C` row `times` times into `times×C`.
    pub fn repeat_rows(&mut self, b: NodeId, times: usize) -> Result<NodeId> {
        let v = self.value_rc(b);
        let (rows, c) = v.shape();
        if rows != 1 || times == 0 {
            return Err(LorsError::arg("repeat_rows needs a 1xC row and times >= 1"));
        }
        let out = DenseMatrix::from_fn(times, c, |_, j| v.get(0, j));
        self.record(OpRecord {
            name: "repeat_rows".into(),
            inputs: vec![b],
            output: out,
            saved: vec![],
            backward: Box::new(move |g, cc| {
                cc.add_elementwise(g.elements());
                let mut gb = DenseMatrix::zeros(1, c);
                for i in 0..times {
                    for j in 0..c {
                        gb[(0, j)] += g.get(i, j);
                    }
                }
                Ok(vec![Some(gb)])
            }),
        })
    }

    /// Inverted dropout. With `p == 0` no node is recorded and `x` is returned.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut RngState) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(LorsError::arg(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let v = self.value_rc(x);
        let keep = 1.0 / (1.0 - p);
        let mask = DenseMatrix::from_fn(v.rows(), v.cols(), |_, _| if rng.bernoulli(p) { 0.0 } else { keep });
        let out = tensor::hadamard(&v, &mask)?;
        self.counters_mut().add_elementwise(out.elements());
        let mask = Rc::new(mask);
        self.record(OpRecord {
            name: "dropout".into(),
            inputs: vec![x],
            output: out,
            saved: vec![SavedTensor::new("dropout_mask", Rc::clone(&mask))],
            backward: Box::new(move |g, cc| {
                cc.add_elementwise(g.elements());
                Ok(vec![Some(tensor::hadamard(g, &mask)?)])
            }),
        })
    }
}
