//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A [`Tape`] records every primitive operation as a node holding its op kind,
//! parent ids and cached forward value. Ids are assigned in construction
//! order, so parents always precede children and the graph is acyclic by
//! construction. [`Tape::backward`] walks the node list once in reverse,
//! accumulating gradients for every ancestor of the root into a [`GradMap`].
//!
//! The primitive catalog is fixed: matmul, add, row-broadcast bias add, sub,
//! scalar-mul, elementwise mul, relu, row softmax, log, exp, square, sum,
//! mean, batchnorm and dropout. Everything else in the crate composes from
//! these, which keeps the finite-difference oracle exhaustive.

use crate::error::{Error, Result};
use crate::nn::DropoutMask;
use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_raw, Tensor};

/// Identifier of a node on a tape. Only meaningful for the tape that issued it.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Cached per-node payload for batchnorm backward.
#[derive(Clone, Debug)]
struct BnPayload {
    xhat: Tensor,
    inv_std: Vec<f64>,
    /// True when the forward normalized with batch statistics (training);
    /// false when it used frozen running statistics (eval).
    batch_stats: bool,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `[n×d] + [d]`, the only broadcast in the catalog.
    AddBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    Relu(NodeId),
    Softmax(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Dropout {
        x: NodeId,
        mask: Tensor,
        scale: f64,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        payload: BnPayload,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradient of a scalar root with respect to every ancestor node.
///
/// Indexed by [`NodeId`]; nodes the root does not depend on have no entry.
/// Each stored gradient has the same shape as its node's forward value.
#[derive(Clone, Debug)]
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor) {
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }
}

#[derive(Default, Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Records an input, constant or parameter value.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// New leaf holding `id`'s current value: severs the gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.leaf(v)
    }

    fn shape2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(Error::contract(format!("{op} requires a 2-D tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape2(a, "matmul")?;
        let (br, _bc) = self.shape2(b, "matmul")?;
        if ac != br {
            return Err(Error::shapes(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let _ = ar;
        let v = matmul_raw(self.value(a), self.value(b));
        Ok(self.push(Op::MatMul(a, b), v))
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shapes(
                op_name,
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    /// `a[n×d] + bias[d]`, the bias broadcast across rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_n, d) = self.shape2(a, "add_bias")?;
        let bs = self.value(bias).shape();
        if bs != [d] {
            return Err(Error::shapes("add_bias", self.value(a).shape(), bs));
        }
        let av = self.value(a);
        let bv = self.value(bias);
        let mut data = av.data().to_vec();
        for (i, slot) in data.iter_mut().enumerate() {
            *slot += bv.data()[i % d];
        }
        let v = Tensor::raw(av.shape().to_vec(), data);
        Ok(self.push(Op::AddBias(a, bias), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scalar_mul(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).map(|x| x * factor);
        self.push(Op::ScalarMul(a, factor), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v)
    }

    /// Row-wise softmax of `[n×K]` logits with per-row max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, k) = self.shape2(a, "softmax")?;
        if k < 2 {
            return Err(Error::contract(format!(
                "softmax requires at least 2 classes, got {k}"
            )));
        }
        let av = self.value(a);
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            let row = &av.data()[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * k..(i + 1) * k];
            let mut sum = 0.0;
            for j in 0..k {
                let e = (row[j] - max).exp();
                out[j] = e;
                sum += e;
            }
            for slot in out.iter_mut() {
                *slot /= sum;
            }
        }
        let v = Tensor::raw(vec![n, k], data);
        Ok(self.push(Op::Softmax(a), v))
    }

    /// Natural log. Callers are responsible for keeping inputs positive
    /// (the loss helpers clamp probabilities first).
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    /// Sum of all entries, a `[1]` scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), v)
    }

    /// Mean of all entries, a `[1]` scalar.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(Op::Mean(a), v)
    }

    /// Inverted dropout: `x ⊙ mask / (1 − rate)`. The mask must match `x`'s
    /// shape and hold only 0/1 entries; gradient flows only through kept
    /// entries. `rate` 0 applies the mask without rescaling.
    pub fn dropout(&mut self, x: NodeId, mask: &DropoutMask, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if mask.tensor().shape() != self.value(x).shape() {
            return Err(Error::shapes(
                "dropout",
                self.value(x).shape(),
                mask.tensor().shape(),
            ));
        }
        let scale = 1.0 / (1.0 - rate);
        let v = self.value(x).zip_map(mask.tensor(), |a, m| a * m * scale);
        Ok(self.push(
            Op::Dropout {
                x,
                mask: mask.tensor().clone(),
                scale,
            },
            v,
        ))
    }

    /// Batch normalization of `[n×d]` activations.
    ///
    /// In training mode the batch mean and (biased) variance normalize the
    /// activations and the running statistics advance by `momentum`; in eval
    /// mode the frozen running statistics are used and nothing is mutated.
    /// Both modes add `eps` inside the square root, which also covers
    /// zero-variance features and `n = 1` batches.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &mut Tensor,
        running_var: &mut Tensor,
        momentum: f64,
        eps: f64,
        training: bool,
    ) -> Result<NodeId> {
        let (n, d) = self.shape2(x, "batchnorm")?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [d] {
                return Err(Error::contract(format!(
                    "batchnorm {name} must have shape [{d}], got {:?}",
                    self.value(id).shape()
                )));
            }
        }
        let xv = self.value(x);
        let (mean, var): (Vec<f64>, Vec<f64>) = if training {
            let mut mean = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    mean[j] += xv.data()[i * d + j];
                }
            }
            for m in &mut mean {
                *m /= n as f64;
            }
            let mut var = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    let c = xv.data()[i * d + j] - mean[j];
                    var[j] += c * c;
                }
            }
            for v in &mut var {
                *v /= n as f64;
            }
            (mean, var)
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                xhat[i * d + j] = (xv.data()[i * d + j] - mean[j]) * inv_std[j];
            }
        }
        let xhat = Tensor::raw(vec![n, d], xhat);

        if training {
            for j in 0..d {
                running_mean.data_mut()[j] =
                    (1.0 - momentum) * running_mean.data()[j] + momentum * mean[j];
                running_var.data_mut()[j] =
                    (1.0 - momentum) * running_var.data()[j] + momentum * var[j];
            }
        }

        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = gv.data()[j] * xhat.data()[i * d + j] + bv.data()[j];
            }
        }
        let value = Tensor::raw(vec![n, d], out);
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                payload: BnPayload {
                    xhat,
                    inv_std,
                    batch_stats: training,
                },
            },
            value,
        ))
    }

    /// Reverse accumulation from a scalar root. Returns the gradient of the
    /// root with respect to every node it depends on.
    pub fn backward(&self, root: NodeId) -> Result<GradMap> {
        if !self.value(root).is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut gm = GradMap {
            grads: vec![None; self.nodes.len()],
        };
        gm.grads[root.0] = Some(Tensor::ones(self.value(root).shape()));

        for idx in (0..=root.0).rev() {
            let Some(grad) = gm.grads[idx].clone() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = matmul_a_bt(&grad, self.value(*b));
                    let db = matmul_at_b(self.value(*a), &grad);
                    gm.accumulate(*a, da);
                    gm.accumulate(*b, db);
                }
                Op::Add(a, b) => {
                    gm.accumulate(*a, grad.clone());
                    gm.accumulate(*b, grad);
                }
                Op::AddBias(a, bias) => {
                    let d = self.value(*bias).numel();
                    let mut db = vec![0.0; d];
                    for (i, &g) in grad.data().iter().enumerate() {
                        db[i % d] += g;
                    }
                    gm.accumulate(*a, grad.clone());
                    gm.accumulate(*bias, Tensor::raw(vec![d], db));
                }
                Op::Sub(a, b) => {
                    gm.accumulate(*a, grad.clone());
                    gm.accumulate(*b, grad.map(|g| -g));
                }
                Op::Mul(a, b) => {
                    let da = grad.zip_map(self.value(*b), |g, y| g * y);
                    let db = grad.zip_map(self.value(*a), |g, x| g * x);
                    gm.accumulate(*a, da);
                    gm.accumulate(*b, db);
                }
                Op::ScalarMul(a, factor) => {
                    gm.accumulate(*a, grad.map(|g| g * factor));
                }
                Op::Relu(a) => {
                    let da = grad.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    gm.accumulate(*a, da);
                }
                Op::Softmax(a) => {
                    // dx = y ⊙ (dy − ⟨y, dy⟩_row)
                    let y = &self.nodes[idx].value;
                    let (n, k) = (y.rows(), y.cols());
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        let yr = &y.data()[i * k..(i + 1) * k];
                        let gr = &grad.data()[i * k..(i + 1) * k];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..k {
                            da[i * k + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    gm.accumulate(*a, Tensor::raw(vec![n, k], da));
                }
                Op::Log(a) => {
                    let da = grad.zip_map(self.value(*a), |g, x| g / x);
                    gm.accumulate(*a, da);
                }
                Op::Exp(a) => {
                    let da = grad.zip_map(&self.nodes[idx].value, |g, e| g * e);
                    gm.accumulate(*a, da);
                }
                Op::Square(a) => {
                    let da = grad.zip_map(self.value(*a), |g, x| 2.0 * x * g);
                    gm.accumulate(*a, da);
                }
                Op::Sum(a) => {
                    let g = grad.data()[0];
                    gm.accumulate(*a, Tensor::full(self.value(*a).shape(), g));
                }
                Op::Mean(a) => {
                    let g = grad.data()[0] / self.value(*a).numel() as f64;
                    gm.accumulate(*a, Tensor::full(self.value(*a).shape(), g));
                }
                Op::Dropout { x, mask, scale } => {
                    let da = grad.zip_map(mask, |g, m| g * m * scale);
                    gm.accumulate(*x, da);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    payload,
                } => {
                    let xhat = &payload.xhat;
                    let (n, d) = (xhat.rows(), xhat.cols());
                    let gv = self.value(*gamma);

                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            let g = grad.data()[i * d + j];
                            dgamma[j] += g * xhat.data()[i * d + j];
                            dbeta[j] += g;
                        }
                    }

                    let dx = if payload.batch_stats {
                        // Full backward through the batch statistics:
                        // dx = inv_std/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat⊙xhat))
                        let mut s1 = vec![0.0; d];
                        let mut s2 = vec![0.0; d];
                        for i in 0..n {
                            for j in 0..d {
                                let dxhat = grad.data()[i * d + j] * gv.data()[j];
                                s1[j] += dxhat;
                                s2[j] += dxhat * xhat.data()[i * d + j];
                            }
                        }
                        let mut dx = vec![0.0; n * d];
                        for i in 0..n {
                            for j in 0..d {
                                let dxhat = grad.data()[i * d + j] * gv.data()[j];
                                dx[i * d + j] = payload.inv_std[j] / n as f64
                                    * (n as f64 * dxhat - s1[j] - xhat.data()[i * d + j] * s2[j]);
                            }
                        }
                        dx
                    } else {
                        // Running statistics are constants.
                        let mut dx = vec![0.0; n * d];
                        for i in 0..n {
                            for j in 0..d {
                                dx[i * d + j] =
                                    grad.data()[i * d + j] * gv.data()[j] * payload.inv_std[j];
                            }
                        }
                        dx
                    };
                    gm.accumulate(*x, Tensor::raw(vec![n, d], dx));
                    gm.accumulate(*gamma, Tensor::raw(vec![d], dgamma));
                    gm.accumulate(*beta, Tensor::raw(vec![d], dbeta));
                }
            }
        }
        Ok(gm)
    }

    // ---- composed helpers -------------------------------------------------

    /// `max(x, floor)` composed as `relu(x − floor) + floor`. Gradient is 1
    /// where the input exceeds the floor and 0 where it was clamped.
    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let c = self.leaf(Tensor::full(&shape, floor));
        let shifted = self.sub(x, c).expect("same shape by construction");
        let r = self.relu(shifted);
        self.add(r, c).expect("same shape by construction")
    }

    /// `min(x, ceil)` composed as `ceil − relu(ceil − x)`.
    pub fn clamp_max(&mut self, x: NodeId, ceil: f64) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let c = self.leaf(Tensor::full(&shape, ceil));
        let shifted = self.sub(c, x).expect("same shape by construction");
        let r = self.relu(shifted);
        self.sub(c, r).expect("same shape by construction")
    }

    /// Column means of `[n×d]` as a `[1×d]` node, composed via matmul with a
    /// constant `1/n` row.
    pub fn col_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, _d) = self.shape2(x, "col_mean")?;
        let w = self.leaf(Tensor::full(&[1, n], 1.0 / n as f64));
        self.matmul(w, x)
    }

    /// Rows `start..start+len` of a 2-D node, composed as a matmul with a
    /// constant selector matrix.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, _d) = self.shape2(x, "slice_rows")?;
        if start + len > n || len == 0 {
            return Err(Error::contract(format!(
                "row slice {start}..{} out of range for {n} rows",
                start + len
            )));
        }
        let mut sel = vec![0.0; len * n];
        for i in 0..len {
            sel[i * n + start + i] = 1.0;
        }
        let s = self.leaf(Tensor::raw(vec![len, n], sel));
        self.matmul(s, x)
    }
}
