//! Reverse-mode differentiation over tensor primitives.
//!
//! A `Tape` is an append-only record of operations. Forward methods compute
//! the value eagerly, push a node describing how it was produced, and hand
//! back a `NodeId`. `backward` replays the record once in reverse,
//! accumulating adjoints per node. Topological order is the append order.
//!
//! Routing coefficients enter the graph as constants (`weighted_vote_sum`):
//! gradients flow through the weighted sum and squash but not through the
//! coefficient updates, which keeps the record acyclic.

use super::{ops, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type NodeId = usize;

/// Stabilizer for vector norms: ||s||_eps = sqrt(||s||^2 + EPS) removes the
/// non-differentiable point at zero.
pub const NORM_EPS: f64 = 1e-8;

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// a + c * b
    AddScaled {
        a: NodeId,
        b: NodeId,
        c: T,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Conv {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    },
    ConvTranspose {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    /// x[N,K] @ w[K,M] + b[M]
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    Reshape {
        x: NodeId,
    },
    /// Squash over the last axis.
    Squash {
        x: NodeId,
    },
    /// Euclidean norm over the last axis (axis dropped).
    VecNorm {
        x: NodeId,
    },
    /// s[n,j,:] = sum_i coeffs[n, group_of[i], j] * votes[n,i,j,:]
    /// Coefficients are constants: no gradient flows into them.
    WeightedVoteSum {
        votes: NodeId,
        coeffs: Tensor<T>,
        group_of: Vec<usize>,
    },
    /// votes[N,I,J,D] -> [N,I,D] picking class j* per sample.
    SelectClassVotes {
        votes: NodeId,
        classes: Vec<usize>,
    },
    /// Concatenate a constant block along the last axis.
    ConcatLastConst {
        x: NodeId,
        constant: Tensor<T>,
    },
    CropCenter {
        x: NodeId,
    },
    /// Elementwise multiply by a constant tensor (masking).
    MulConst {
        x: NodeId,
        c: Tensor<T>,
    },
    /// Total sum to a scalar.
    Sum {
        x: NodeId,
    },
    MarginLoss {
        lengths: NodeId,
        targets: Vec<usize>,
        m_plus: T,
        m_minus: T,
        lambda: T,
    },
    /// sum((x - target)^2) to a scalar.
    SumSqDiff {
        x: NodeId,
        target: Tensor<T>,
    },
}

/// Adjoints per node after a backward pass.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a node; zeros if nothing flowed to it.
    pub fn get(&self, id: NodeId, like: &Tensor<T>) -> Tensor<T> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(like.dims()).expect("valid dims"),
        }
    }

    pub fn get_opt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id].as_ref()
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.dims() != tb.dims() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(ta.dims(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: T) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.dims() != tb.dims() {
            return Err(Error::shape("add_scaled", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + c * y)
            .collect();
        let value = Tensor::from_vec(ta.dims(), data)?;
        Ok(self.push(value, Op::AddScaled { a, b, c }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(|v| v.maximum(T::ZERO));
        self.push(value, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x]
            .value
            .map(|v| T::ONE / (T::ONE + (-v).exp()));
        self.push(value, Op::Sigmoid { x })
    }

    pub fn conv(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, stride: usize) -> Result<NodeId> {
        let value = ops::conv_forward(
            &self.nodes[input].value,
            &self.nodes[kernel].value,
            stride,
            &self.nodes[bias].value,
        )?;
        Ok(self.push(
            value,
            Op::Conv {
                input,
                kernel,
                bias,
                stride,
            },
        ))
    }

    pub fn conv_transpose(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        let value = ops::conv_transpose_forward(
            &self.nodes[input].value,
            &self.nodes[kernel].value,
            stride,
            &self.nodes[bias].value,
        )?;
        Ok(self.push(
            value,
            Op::ConvTranspose {
                input,
                kernel,
                bias,
                stride,
            },
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::matmul_batched(&self.nodes[a].value, &self.nodes[b].value)?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (tx, tw, tb) = (
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        );
        let (xd, wd) = (tx.dims(), tw.dims());
        if xd.len() != 2 || wd.len() != 2 || xd[1] != wd[0] || tb.dims() != [wd[1]] {
            return Err(Error::shape(
                "affine",
                "x[N,K], w[K,M], b[M]",
                format!("{} {} {}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let mut value = ops::matmul_batched(tx, tw)?;
        let m = wd[1];
        for row in value.data_mut().chunks_mut(m) {
            for (v, &bv) in row.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        Ok(self.push(value, Op::Affine { x, w, b }))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let value = ops::permute(&self.nodes[x].value, perm)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let value = self.nodes[x].value.reshaped(dims)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    pub fn squash(&mut self, x: NodeId) -> NodeId {
        let value = squash_forward(&self.nodes[x].value);
        self.push(value, Op::Squash { x })
    }

    pub fn vec_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        let dims = t.dims();
        let d = dims[dims.len() - 1];
        let out_dims = if dims.len() == 1 { vec![1] } else { dims[..dims.len() - 1].to_vec() };
        let mut data = Vec::with_capacity(t.numel() / d);
        for row in t.data().chunks(d) {
            let q: T = row.iter().map(|&v| v * v).sum();
            data.push(q.sqrt());
        }
        let value = Tensor::from_vec(&out_dims, data)?;
        Ok(self.push(value, Op::VecNorm { x }))
    }

    /// Weighted sum of prediction vectors with constant coefficients.
    /// votes [N,I,J,D], coeffs [N,G,J] -> s [N,J,D].
    pub fn weighted_vote_sum(
        &mut self,
        votes: NodeId,
        coeffs: Tensor<T>,
        group_of: &[usize],
    ) -> Result<NodeId> {
        let v = &self.nodes[votes].value;
        let [n, i_cnt, j_cnt, d] = *v.dims() else {
            return Err(Error::shape("weighted_vote_sum votes", "[N,I,J,D]", v.shape()));
        };
        let [cn, g_cnt, cj] = *coeffs.dims() else {
            return Err(Error::shape("weighted_vote_sum coeffs", "[N,G,J]", coeffs.shape()));
        };
        if cn != n || cj != j_cnt || group_of.len() != i_cnt {
            return Err(Error::shape(
                "weighted_vote_sum",
                format!("coeffs [{n},G,{j_cnt}] with {i_cnt} group entries"),
                format!("{} with {}", coeffs.shape(), group_of.len()),
            ));
        }
        if group_of.iter().any(|&g| g >= g_cnt) {
            return Err(Error::InvalidArgument("group id out of range".into()));
        }
        let mut out = Tensor::zeros(&[n, j_cnt, d])?;
        {
            let vd = v.data();
            let cd = coeffs.data();
            let od = out.data_mut();
            for nn in 0..n {
                for ii in 0..i_cnt {
                    let g = group_of[ii];
                    for jj in 0..j_cnt {
                        let c = cd[(nn * g_cnt + g) * j_cnt + jj];
                        let src = ((nn * i_cnt + ii) * j_cnt + jj) * d;
                        let dst = (nn * j_cnt + jj) * d;
                        for dd in 0..d {
                            od[dst + dd] += c * vd[src + dd];
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::WeightedVoteSum {
                votes,
                coeffs,
                group_of: group_of.to_vec(),
            },
        ))
    }

    /// Pick each sample's votes for one class: [N,I,J,D] -> [N,I,D].
    pub fn select_class_votes(&mut self, votes: NodeId, classes: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[votes].value;
        let [n, i_cnt, j_cnt, d] = *v.dims() else {
            return Err(Error::shape("select_class_votes", "[N,I,J,D]", v.shape()));
        };
        if classes.len() != n {
            return Err(Error::shape("select_class_votes classes", n, classes.len()));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= j_cnt) {
            return Err(Error::InvalidArgument(format!(
                "class {bad} out of range (J={j_cnt})"
            )));
        }
        let mut out = Tensor::zeros(&[n, i_cnt, d])?;
        for nn in 0..n {
            let j = classes[nn];
            for ii in 0..i_cnt {
                let src = ((nn * i_cnt + ii) * j_cnt + j) * d;
                let dst = (nn * i_cnt + ii) * d;
                out.data_mut()[dst..dst + d].copy_from_slice(&v.data()[src..src + d]);
            }
        }
        Ok(self.push(
            out,
            Op::SelectClassVotes {
                votes,
                classes: classes.to_vec(),
            },
        ))
    }

    /// Concatenate a constant tensor along the last axis.
    pub fn concat_last_const(&mut self, x: NodeId, constant: Tensor<T>) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        let (xd, cd) = (t.dims(), constant.dims());
        if xd.len() != cd.len() || xd[..xd.len() - 1] != cd[..cd.len() - 1] {
            return Err(Error::shape(
                "concat_last_const",
                format!("{} with matching leading dims", t.shape()),
                constant.shape(),
            ));
        }
        let (c1, c2) = (xd[xd.len() - 1], cd[cd.len() - 1]);
        let mut out_dims = xd.to_vec();
        *out_dims.last_mut().unwrap() = c1 + c2;
        let rows = t.numel() / c1;
        let mut data = Vec::with_capacity(rows * (c1 + c2));
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * c1..(r + 1) * c1]);
            data.extend_from_slice(&constant.data()[r * c2..(r + 1) * c2]);
        }
        let value = Tensor::from_vec(&out_dims, data)?;
        Ok(self.push(value, Op::ConcatLastConst { x, constant }))
    }

    pub fn crop_center(&mut self, x: NodeId, target_sp: &[usize]) -> Result<NodeId> {
        let value = ops::crop_center(&self.nodes[x].value, target_sp)?;
        Ok(self.push(value, Op::CropCenter { x }))
    }

    pub fn mul_const(&mut self, x: NodeId, c: Tensor<T>) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        if t.dims() != c.dims() {
            return Err(Error::shape("mul_const", t.shape(), c.shape()));
        }
        let data = t.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let value = Tensor::from_vec(t.dims(), data)?;
        Ok(self.push(value, Op::MulConst { x, c }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total: T = self.nodes[x].value.data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    /// Mean over the batch of the per-class hinge-squared margin loss.
    pub fn margin_loss(
        &mut self,
        lengths: NodeId,
        targets: &[usize],
        m_plus: T,
        m_minus: T,
        lambda: T,
    ) -> Result<NodeId> {
        let t = &self.nodes[lengths].value;
        let [n, j_cnt] = *t.dims() else {
            return Err(Error::shape("margin_loss lengths", "[N,J]", t.shape()));
        };
        if targets.len() != n {
            return Err(Error::shape("margin_loss targets", n, targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= j_cnt) {
            return Err(Error::InvalidArgument(format!(
                "target {bad} out of range (J={j_cnt})"
            )));
        }
        let mut total = T::ZERO;
        for nn in 0..n {
            for jj in 0..j_cnt {
                let l = t.data()[nn * j_cnt + jj];
                if targets[nn] == jj {
                    let h = (m_plus - l).maximum(T::ZERO);
                    total += h * h;
                } else {
                    let h = (l - m_minus).maximum(T::ZERO);
                    total += lambda * h * h;
                }
            }
        }
        total /= T::from_f64(n as f64);
        Ok(self.push(
            Tensor::scalar(total),
            Op::MarginLoss {
                lengths,
                targets: targets.to_vec(),
                m_plus,
                m_minus,
                lambda,
            },
        ))
    }

    pub fn sum_sq_diff(&mut self, x: NodeId, target: Tensor<T>) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        if t.dims() != target.dims() {
            return Err(Error::shape("sum_sq_diff", t.shape(), target.shape()));
        }
        let total: T = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(Tensor::scalar(total), Op::SumSqDiff { x, target }))
    }

    /// Reverse accumulation from a scalar loss node. Visits every node at
    /// most once, in reverse append order, seeding d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got {}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(T::ONE));

        for id in (0..=loss).rev() {
            let Some(g_out) = grads[id].take() else {
                continue;
            };
            self.backward_node(id, &g_out, &mut grads)?;
            grads[id] = Some(g_out);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        match &mut grads[id] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            None => grads[id] = Some(delta),
        }
    }

    fn backward_node(
        &self,
        id: NodeId,
        g_out: &Tensor<T>,
        grads: &mut Vec<Option<Tensor<T>>>,
    ) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, g_out.clone());
                Self::accumulate(grads, *b, g_out.clone());
            }
            Op::AddScaled { a, b, c } => {
                Self::accumulate(grads, *a, g_out.clone());
                Self::accumulate(grads, *b, g_out.map(|v| v * *c));
            }
            Op::Relu { x } => {
                let xin = &self.nodes[*x].value;
                let data = xin
                    .data()
                    .iter()
                    .zip(g_out.data())
                    .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
                    .collect();
                Self::accumulate(grads, *x, Tensor::from_vec(xin.dims(), data)?);
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[id].value;
                let data = y
                    .data()
                    .iter()
                    .zip(g_out.data())
                    .map(|(&v, &g)| g * v * (T::ONE - v))
                    .collect();
                Self::accumulate(grads, *x, Tensor::from_vec(y.dims(), data)?);
            }
            Op::Conv {
                input,
                kernel,
                bias,
                stride,
            } => {
                let g = ops::conv_backward(
                    &self.nodes[*input].value,
                    &self.nodes[*kernel].value,
                    *stride,
                    g_out,
                )?;
                Self::accumulate(grads, *input, g.d_input);
                Self::accumulate(grads, *kernel, g.d_kernel);
                Self::accumulate(grads, *bias, g.d_bias);
            }
            Op::ConvTranspose {
                input,
                kernel,
                bias,
                stride,
            } => {
                let g = ops::conv_transpose_backward(
                    &self.nodes[*input].value,
                    &self.nodes[*kernel].value,
                    *stride,
                    g_out,
                )?;
                Self::accumulate(grads, *input, g.d_input);
                Self::accumulate(grads, *kernel, g.d_kernel);
                Self::accumulate(grads, *bias, g.d_bias);
            }
            Op::Matmul { a, b } => {
                let (da, db) = ops::matmul_batched_backward(
                    &self.nodes[*a].value,
                    &self.nodes[*b].value,
                    g_out,
                )?;
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::Affine { x, w, b } => {
                let (tx, tw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (dx, dw) = ops::matmul_batched_backward(tx, tw, g_out)?;
                let m = tw.dims()[1];
                let mut db = Tensor::zeros(&[m])?;
                for row in g_out.data().chunks(m) {
                    for (acc, &g) in db.data_mut().iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *w, dw);
                Self::accumulate(grads, *b, db);
            }
            Op::Permute { x, perm } => {
                let inv = ops::inverse_permutation(perm);
                Self::accumulate(grads, *x, ops::permute(g_out, &inv)?);
            }
            Op::Reshape { x } => {
                let src_dims = self.nodes[*x].value.dims().to_vec();
                Self::accumulate(grads, *x, g_out.reshaped(&src_dims)?);
            }
            Op::Squash { x } => {
                let xin = &self.nodes[*x].value;
                Self::accumulate(grads, *x, squash_backward(xin, g_out));
            }
            Op::VecNorm { x } => {
                let xin = &self.nodes[*x].value;
                let dims = xin.dims();
                let d = dims[dims.len() - 1];
                let mut dx = Tensor::zeros(dims)?;
                for (r, (row, drow)) in xin
                    .data()
                    .chunks(d)
                    .zip(dx.data_mut().chunks_mut(d))
                    .enumerate()
                {
                    let q: T = row.iter().map(|&v| v * v).sum();
                    let denom = (q + T::from_f64(NORM_EPS)).sqrt();
                    let g = g_out.data()[r];
                    for (o, &v) in drow.iter_mut().zip(row) {
                        *o = g * v / denom;
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::WeightedVoteSum {
                votes,
                coeffs,
                group_of,
            } => {
                let v = &self.nodes[*votes].value;
                let [n, i_cnt, j_cnt, d] = *v.dims() else { unreachable!() };
                let g_cnt = coeffs.dims()[1];
                let mut dv = Tensor::zeros(v.dims())?;
                let (cd, od, dvd) = (coeffs.data(), g_out.data(), dv.data_mut());
                for nn in 0..n {
                    for ii in 0..i_cnt {
                        let g = group_of[ii];
                        for jj in 0..j_cnt {
                            let c = cd[(nn * g_cnt + g) * j_cnt + jj];
                            let src = (nn * j_cnt + jj) * d;
                            let dst = ((nn * i_cnt + ii) * j_cnt + jj) * d;
                            for dd in 0..d {
                                dvd[dst + dd] += c * od[src + dd];
                            }
                        }
                    }
                }
                Self::accumulate(grads, *votes, dv);
            }
            Op::SelectClassVotes { votes, classes } => {
                let v = &self.nodes[*votes].value;
                let [n, i_cnt, j_cnt, d] = *v.dims() else { unreachable!() };
                let mut dv = Tensor::zeros(v.dims())?;
                for nn in 0..n {
                    let j = classes[nn];
                    for ii in 0..i_cnt {
                        let dst = ((nn * i_cnt + ii) * j_cnt + j) * d;
                        let src = (nn * i_cnt + ii) * d;
                        dv.data_mut()[dst..dst + d].copy_from_slice(&g_out.data()[src..src + d]);
                    }
                }
                Self::accumulate(grads, *votes, dv);
            }
            Op::ConcatLastConst { x, constant } => {
                let t = &self.nodes[*x].value;
                let c1 = *t.dims().last().unwrap();
                let c2 = *constant.dims().last().unwrap();
                let rows = t.numel() / c1;
                let mut data = Vec::with_capacity(t.numel());
                for r in 0..rows {
                    data.extend_from_slice(&g_out.data()[r * (c1 + c2)..r * (c1 + c2) + c1]);
                }
                Self::accumulate(grads, *x, Tensor::from_vec(t.dims(), data)?);
            }
            Op::CropCenter { x } => {
                let src_dims = self.nodes[*x].value.dims().to_vec();
                Self::accumulate(grads, *x, ops::pad_center_to(g_out, &src_dims)?);
            }
            Op::MulConst { x, c } => {
                let data = g_out
                    .data()
                    .iter()
                    .zip(c.data())
                    .map(|(&g, &cv)| g * cv)
                    .collect();
                Self::accumulate(grads, *x, Tensor::from_vec(c.dims(), data)?);
            }
            Op::Sum { x } => {
                let g = g_out.item();
                let dims = self.nodes[*x].value.dims();
                Self::accumulate(grads, *x, Tensor::filled(dims, g)?);
            }
            Op::MarginLoss {
                lengths,
                targets,
                m_plus,
                m_minus,
                lambda,
            } => {
                let t = &self.nodes[*lengths].value;
                let [n, j_cnt] = *t.dims() else { unreachable!() };
                let scale = g_out.item() / T::from_f64(n as f64);
                let two = T::from_f64(2.0);
                let mut dl = Tensor::zeros(t.dims())?;
                for nn in 0..n {
                    for jj in 0..j_cnt {
                        let l = t.data()[nn * j_cnt + jj];
                        let g = if targets[nn] == jj {
                            -two * (*m_plus - l).maximum(T::ZERO)
                        } else {
                            *lambda * two * (l - *m_minus).maximum(T::ZERO)
                        };
                        dl.data_mut()[nn * j_cnt + jj] = scale * g;
                    }
                }
                Self::accumulate(grads, *lengths, dl);
            }
            Op::SumSqDiff { x, target } => {
                let t = &self.nodes[*x].value;
                let g = g_out.item();
                let two = T::from_f64(2.0);
                let data = t
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| g * two * (a - b))
                    .collect();
                Self::accumulate(grads, *x, Tensor::from_vec(t.dims(), data)?);
            }
        }
        Ok(())
    }
}

/// squash(s) = (||s||^2 / (1 + ||s||^2)) * (s / ||s||_eps) over the last
/// axis. The eps only enters the denominator, so squash(0) = 0 exactly.
pub fn squash_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let dims = x.dims();
    let d = dims[dims.len() - 1];
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let q: T = row.iter().map(|&v| v * v).sum();
        let norm_eps = (q + T::from_f64(NORM_EPS)).sqrt();
        let factor = q / ((T::ONE + q) * norm_eps);
        for v in row.iter_mut() {
            *v *= factor;
        }
    }
    out
}

/// Jacobian-vector product of [`squash_forward`].
pub fn squash_backward<T: Scalar>(x: &Tensor<T>, g_out: &Tensor<T>) -> Tensor<T> {
    let dims = x.dims();
    let d = dims[dims.len() - 1];
    let mut dx = Tensor::zeros(dims).expect("valid dims");
    let eps = T::from_f64(NORM_EPS);
    let two = T::from_f64(2.0);
    let half = T::from_f64(0.5);
    for ((row, grow), drow) in x
        .data()
        .chunks(d)
        .zip(g_out.data().chunks(d))
        .zip(dx.data_mut().chunks_mut(d))
    {
        let q: T = row.iter().map(|&v| v * v).sum();
        let ne = (q + eps).sqrt();
        let denom = (T::ONE + q) * ne;
        let f = q / denom;
        // d f / d q
        let ddenom_dq = ne + (T::ONE + q) * half / ne;
        let dfdq = (denom - q * ddenom_dq) / (denom * denom);
        let dot: T = grow.iter().zip(row).map(|(&g, &v)| g * v).sum();
        for ((o, &g), &v) in drow.iter_mut().zip(grow).zip(row) {
            *o = f * g + two * v * dot * dfdq;
        }
    }
    dx
}
