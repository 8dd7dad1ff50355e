//! Define-by-run gradient tape.
//!
//! Every forward call appends a node holding its output value and enough
//! saved state to apply its adjoint. Nodes are appended in execution order,
//! so walking the node list backwards is a reverse topological order.

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom, ConvMode, Switch};
use super::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Conv { input: Var, filters: Var, geom: ConvGeom },
    ConvTranspose { input: Var, filters: Var, geom: ConvGeom },
    MaxPool { input: Var, switches: Vec<Switch>, dims: [usize; 4] },
    UnpoolSwitch { input: Var, switches: Vec<Switch>, dims: [usize; 4] },
    Upsample { input: Var, k: usize, dims: [usize; 4] },
    MeanPool { input: Var, k: usize, dims: [usize; 4] },
    Mask { input: Var, mask: Vec<bool> },
    BatchNormTrain { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Softmax { input: Var, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    NegPart(Var),
    Sum(Var),
    SumRows(Var),
    LogFloor { input: Var, floor: T },
    AddRow { input: Var },
    Gather { input: Var, indices: Vec<usize> },
    WeightedSum(Vec<(Var, T)>),
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch-norm behaviour for one call.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T: Real> {
    /// Normalize with the batch's own per-channel statistics.
    Train { eps: T },
    /// Normalize with stored running statistics.
    Eval { mean: &'a [T], var: &'a [T], eps: T },
}

/// Per-channel batch statistics observed in a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T: Real = f32> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
}

/// Exponential moving averages of batch statistics, used by eval-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Real = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    /// Mean 0, variance 1 for every channel.
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: T) -> Result<()> {
        if batch.mean.len() != self.mean.len() || batch.var.len() != self.var.len() {
            return Err(Error::dim(format!(
                "batch statistics for {} channels, running statistics for {}",
                batch.mean.len(),
                self.mean.len()
            )));
        }
        let keep = momentum;
        let take = T::one() - momentum;
        self.mean.iter_mut().zip(&batch.mean).for_each(|(r, &b)| *r = keep * *r + take * b);
        self.var.iter_mut().zip(&batch.var).for_each(|(r, &b)| *r = keep * *r + take * b);
        Ok(())
    }

    pub fn mode(&self, eps: T) -> BatchNormMode<'_, T> {
        BatchNormMode::Eval { mean: &self.mean, var: &self.var, eps }
    }
}

/// Operation record for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by the [`Var`] of each leaf.
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn dims4<T: Real>(t: &Tensor<T>) -> Result<[usize; 4]> {
    let (n, h, w, c) = t.nhwc()?;
    Ok([n, h, w, c])
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a = *a + d),
        None => *slot = Some(delta),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        value.set_requires_grad(false);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn filter_dims(&self, filters: Var) -> Result<[usize; 4]> {
        match self.shape(filters) {
            &[co, kh, kw, ci] => Ok([co, kh, kw, ci]),
            s => Err(Error::dim(format!("filters must be [out, kh, kw, in], got {s:?}"))),
        }
    }

    /// Stride-one cross-correlation of an NHWC batch with `[out, kh, kw, in]` filters.
    pub fn conv2d(&mut self, input: Var, filters: Var, mode: ConvMode) -> Result<Var> {
        let [n, h, w, c] = dims4(self.value(input))?;
        let [co, kh, kw, ci] = self.filter_dims(filters)?;
        if ci != c {
            return Err(Error::dim(format!("filters expect {ci} input channels, input has {c}")));
        }
        self.value(input).ensure_finite("conv2d input")?;
        let geom = ConvGeom::from_input(n, h, w, c, co, kh, kw, mode)?;
        let out = kernels::conv_forward(self.value(input).data(), self.value(filters).data(), &geom);
        let value = Tensor::new(vec![n, geom.ho, geom.wo, co], out)?;
        let needs = self.any_grad(&[input, filters]);
        Ok(self.push(value, Op::Conv { input, filters, geom }, needs))
    }

    /// Exact adjoint of [`Tape::conv2d`] with respect to its input: maps a
    /// tensor in the convolution's output space back to its input space
    /// (deconvolution with the transposed filters).
    pub fn conv2d_transpose(&mut self, input: Var, filters: Var, mode: ConvMode) -> Result<Var> {
        let [n, ho, wo, c] = dims4(self.value(input))?;
        let [co, kh, kw, ci] = self.filter_dims(filters)?;
        if co != c {
            return Err(Error::dim(format!("filters produce {co} channels, transposed input has {c}")));
        }
        self.value(input).ensure_finite("conv2d_transpose input")?;
        let geom = ConvGeom::from_output(n, ho, wo, ci, co, kh, kw, mode)?;
        let out = kernels::conv_backward_input(self.value(input).data(), self.value(filters).data(), &geom);
        let value = Tensor::new(vec![n, geom.h, geom.w, ci], out)?;
        let needs = self.any_grad(&[input, filters]);
        Ok(self.push(value, Op::ConvTranspose { input, filters, geom }, needs))
    }

    /// Non-overlapping 2×2 max-pooling. Returns the argmax switch of every
    /// pooled cell; ties resolve to the first of UL, UR, LL, LR.
    pub fn maxpool2x2(&mut self, input: Var) -> Result<(Var, Vec<Switch>)> {
        let dims @ [n, h, w, c] = dims4(self.value(input))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("max-pooling needs even extents, got {h}×{w}")));
        }
        let (out, switches) = kernels::maxpool2x2(self.value(input).data(), n, h, w, c);
        let value = Tensor::new(vec![n, h / 2, w / 2, c], out)?;
        let needs = self.any_grad(&[input]);
        let var = self.push(value, Op::MaxPool { input, switches: switches.clone(), dims }, needs);
        Ok((var, switches))
    }

    /// Max-pooling with externally fixed switches: reads each block at its
    /// switch position.
    pub fn maxpool2x2_fixed(&mut self, input: Var, switches: &[Switch]) -> Result<Var> {
        let dims @ [n, h, w, c] = dims4(self.value(input))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("max-pooling needs even extents, got {h}×{w}")));
        }
        if switches.len() != n * (h / 2) * (w / 2) * c {
            return Err(Error::dim(format!("{} switches for {} pooled cells", switches.len(), n * h * w * c / 4)));
        }
        let out = kernels::gather_switch(self.value(input).data(), switches, n, h, w, c);
        let value = Tensor::new(vec![n, h / 2, w / 2, c], out)?;
        let needs = self.any_grad(&[input]);
        Ok(self.push(value, Op::MaxPool { input, switches: switches.to_vec(), dims }, needs))
    }

    /// Inverse of 2×2 pooling that writes each value at its switch position.
    pub fn unpool_switch(&mut self, input: Var, switches: &[Switch]) -> Result<Var> {
        let [n, ho, wo, c] = dims4(self.value(input))?;
        if switches.len() != n * ho * wo * c {
            return Err(Error::dim(format!("{} switches for {} cells", switches.len(), n * ho * wo * c)));
        }
        let dims = [n, 2 * ho, 2 * wo, c];
        let out = kernels::unpool_switch(self.value(input).data(), switches, n, 2 * ho, 2 * wo, c);
        let value = Tensor::new(dims.to_vec(), out)?;
        let needs = self.any_grad(&[input]);
        Ok(self.push(value, Op::UnpoolSwitch { input, switches: switches.to_vec(), dims }, needs))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nn(&mut self, input: Var, k: usize) -> Result<Var> {
        let dims @ [n, h, w, c] = dims4(self.value(input))?;
        if k == 0 {
            return Err(Error::dim("upsampling factor must be positive"));
        }
        let out = kernels::upsample_nn(self.value(input).data(), n, h, w, c, k);
        let value = Tensor::new(vec![n, h * k, w * k, c], out)?;
        let needs = self.any_grad(&[input]);
        Ok(self.push(value, Op::Upsample { input, k, dims }, needs))
    }

    /// Non-overlapping k×k average pooling.
    pub fn meanpool(&mut self, input: Var, k: usize) -> Result<Var> {
        let dims @ [n, h, w, c] = dims4(self.value(input))?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::dim(format!("mean-pool extent {k} does not divide {h}×{w}")));
        }
        let inv = T::one() / T::from_usize(k * k).unwrap();
        let out: Vec<T> = kernels::block_sum(self.value(input).data(), n, h, w, c, k).into_iter().map(|v| v * inv).collect();
        let value = Tensor::new(vec![n, h / k, w / k, c], out)?;
        let needs = self.any_grad(&[input]);
        Ok(self.push(value, Op::MeanPool { input, k, dims }, needs))
    }

    /// Rectification. The returned mask is 1 exactly where the input is positive.
    pub fn relu(&mut self, input: Var) -> (Var, Vec<bool>) {
        let x = self.value(input);
        let mask: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect())
            .expect("same shape");
        let needs = self.any_grad(&[input]);
        let var = self.push(value, Op::Mask { input, mask: mask.clone() }, needs);
        (var, mask)
    }

    /// Elementwise multiplication by a fixed binary mask.
    pub fn apply_mask(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(input);
        if mask.len() != x.len() {
            return Err(Error::dim(format!("mask has {} entries, tensor {:?} has {}", mask.len(), x.shape(), x.len())));
        }
        let data = x.data().iter().zip(mask).map(|(&v, &m)| if m { v } else { T::zero() }).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let needs = self.any_grad(&[input]);
        Ok(self.push(value, Op::Mask { input, mask: mask.to_vec() }, needs))
    }

    /// Per-channel batch normalization over every axis but the last, followed
    /// by a learned per-channel scale and shift. Train mode also returns the
    /// batch statistics so the caller can update its running averages.
    pub fn batchnorm(&mut self, input: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_, T>) -> Result<(Var, Option<BatchStats<T>>)> {
        let x = self.value(input);
        let c = *x.shape().last().ok_or_else(|| Error::dim("batch norm on a scalar"))?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim(format!(
                "batch norm over {c} channels given {} scales and {} shifts",
                self.value(gamma).len(),
                self.value(beta).len()
            )));
        }
        let rows = x.len() / c;
        if rows == 0 {
            return Err(Error::dim("batch norm over an empty batch"));
        }
        let (mean, var, eps, train) = match mode {
            BatchNormMode::Train { eps } => {
                let mut mean = vec![T::zero(); c];
                for row in x.data().chunks_exact(c) {
                    mean.iter_mut().zip(row).for_each(|(m, &v)| *m = *m + v);
                }
                let inv_rows = T::one() / T::from_usize(rows).unwrap();
                mean.iter_mut().for_each(|m| *m = *m * inv_rows);
                let mut var = vec![T::zero(); c];
                for row in x.data().chunks_exact(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *s = *s + d * d;
                    }
                }
                var.iter_mut().for_each(|s| *s = *s * inv_rows);
                (mean, var, eps, true)
            }
            BatchNormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim(format!("running stats for {} channels, input has {c}", mean.len())));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.any_grad(&[input, gamma, beta]);
        let op = if train {
            Op::BatchNormTrain { input, gamma, beta, xhat, inv_std }
        } else {
            Op::BatchNormEval { input, gamma, beta, xhat, inv_std }
        };
        let var_id = self.push(value, op, needs);
        Ok((var_id, train.then_some(BatchStats { mean, var })))
    }

    /// Softmax over the last axis, computed after subtracting the row maximum.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let cols = *x.shape().last().ok_or_else(|| Error::dim("softmax of a scalar"))?;
        if cols == 0 {
            return Err(Error::dim("softmax over zero classes"));
        }
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - max).exp();
                total = total + e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e = *e / total);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.any_grad(&[input]);
        Ok(self.push(value, Op::Softmax { input, cols }, needs))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, input: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(input).map(f);
        let needs = self.any_grad(&[input]);
        self.push(value, op, needs)
    }

    pub fn scale(&mut self, input: Var, s: T) -> Var {
        self.unary(input, |v| v * s, Op::Scale(input, s))
    }

    pub fn square(&mut self, input: Var) -> Var {
        self.unary(input, |v| v * v, Op::Square(input))
    }

    /// `max(0, -x)` elementwise.
    pub fn neg_part(&mut self, input: Var) -> Var {
        self.unary(input, |v| if v < T::zero() { -v } else { T::zero() }, Op::NegPart(input))
    }

    /// `ln(max(x, floor))` elementwise.
    pub fn log_floor(&mut self, input: Var, floor: T) -> Var {
        self.unary(input, move |v| v.max(floor).ln(), Op::LogFloor { input, floor })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().fold(T::zero(), |a, &b| a + b);
        let needs = self.any_grad(&[input]);
        self.push(Tensor::new(vec![], vec![total]).expect("scalar"), Op::Sum(input), needs)
    }

    /// Sum over all axes but the leading one, giving a rank-1 tensor.
    pub fn sum_rows(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let rows = *x.shape().first().ok_or_else(|| Error::dim("sum_rows on a scalar"))?;
        let width = x.len().checked_div(rows).unwrap_or(0);
        let data = if width == 0 {
            vec![T::zero(); rows]
        } else {
            x.data().chunks_exact(width).map(|r| r.iter().fold(T::zero(), |a, &b| a + b)).collect()
        };
        let value = Tensor::new(vec![rows], data)?;
        let needs = self.any_grad(&[input]);
        Ok(self.push(value, Op::SumRows(input), needs))
    }

    /// Adds a constant row vector to every row (last axis) of the input.
    pub fn add_row(&mut self, input: Var, row: &[T]) -> Result<Var> {
        let x = self.value(input);
        let cols = *x.shape().last().ok_or_else(|| Error::dim("add_row on a scalar"))?;
        if cols != row.len() {
            return Err(Error::dim(format!("row of {} values added to rows of {cols}", row.len())));
        }
        let data = x.data().chunks_exact(cols).flat_map(|r| r.iter().zip(row).map(|(&a, &b)| a + b)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let needs = self.any_grad(&[input]);
        Ok(self.push(value, Op::AddRow { input }, needs))
    }

    /// Picks elements by flat index into a rank-1 result.
    pub fn gather(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(Error::dim(format!("gather index {bad} out of range for {} values", x.len())));
        }
        let data = indices.iter().map(|&i| x.data()[i]).collect();
        let value = Tensor::new(vec![indices.len()], data)?;
        let needs = self.any_grad(&[input]);
        Ok(self.push(value, Op::Gather { input, indices: indices.to_vec() }, needs))
    }

    /// `Σ wᵢ·sᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            total = total + w * T::from_f64_lossy(self.value(v).scalar()?);
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let needs = self.any_grad(&vars);
        Ok(self.push(Tensor::new(vec![], vec![total])?, Op::WeightedSum(terms.to_vec()), needs))
    }

    /// Reverse pass from a scalar node. Leaves with `requires_grad` receive
    /// gradients; intermediate adjoints are dropped once consumed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract(format!("node {} is not on this tape", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        for (i, slot) in grads.iter().enumerate() {
            if let Some(g) = slot {
                if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient at node {i}, element {j}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], target: Var, delta: impl FnOnce() -> Vec<T>) {
        if self.nodes[target.0].needs_grad {
            accumulate(&mut grads[target.0], delta());
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { input, filters, geom } => {
                let (x, w) = (self.value(*input).data(), self.value(*filters).data());
                self.send(grads, *input, || kernels::conv_backward_input(g, w, geom));
                self.send(grads, *filters, || kernels::conv_backward_filter(g, x, geom));
            }
            Op::ConvTranspose { input, filters, geom } => {
                let (z, w) = (self.value(*input).data(), self.value(*filters).data());
                self.send(grads, *input, || kernels::conv_forward(g, w, geom));
                self.send(grads, *filters, || kernels::conv_backward_filter(z, g, geom));
            }
            Op::MaxPool { input, switches, dims: [n, h, w, c] } => {
                self.send(grads, *input, || kernels::unpool_switch(g, switches, *n, *h, *w, *c));
            }
            Op::UnpoolSwitch { input, switches, dims: [n, h, w, c] } => {
                self.send(grads, *input, || kernels::gather_switch(g, switches, *n, *h, *w, *c));
            }
            Op::Upsample { input, k, dims: [n, h, w, c] } => {
                self.send(grads, *input, || kernels::block_sum(g, *n, h * k, w * k, *c, *k));
            }
            Op::MeanPool { input, k, dims: [n, h, w, c] } => {
                let inv = T::one() / T::from_usize(k * k).unwrap();
                self.send(grads, *input, || {
                    kernels::upsample_nn(g, *n, h / k, w / k, *c, *k).into_iter().map(|v| v * inv).collect()
                });
            }
            Op::Mask { input, mask } => {
                self.send(grads, *input, || g.iter().zip(mask).map(|(&d, &m)| if m { d } else { T::zero() }).collect());
            }
            Op::BatchNormTrain { input, gamma, beta, xhat, inv_std } => {
                let c = inv_std.len();
                let rows = T::from_usize(g.len() / c).unwrap();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_g[ch] = sum_g[ch] + gr[ch];
                        sum_gx[ch] = sum_gx[ch] + gr[ch] * xr[ch];
                    }
                }
                let gam = self.value(*gamma).data();
                self.send(grads, *input, || {
                    let mut dx = Vec::with_capacity(g.len());
                    for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch] / rows;
                            dx.push(k * (rows * gr[ch] - sum_g[ch] - xr[ch] * sum_gx[ch]));
                        }
                    }
                    dx
                });
                self.send(grads, *gamma, || sum_gx.clone());
                self.send(grads, *beta, || sum_g.clone());
            }
            Op::BatchNormEval { input, gamma, beta, xhat, inv_std } => {
                let c = inv_std.len();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_g[ch] = sum_g[ch] + gr[ch];
                        sum_gx[ch] = sum_gx[ch] + gr[ch] * xr[ch];
                    }
                }
                let gam = self.value(*gamma).data();
                self.send(grads, *input, || {
                    g.chunks_exact(c).flat_map(|gr| (0..c).map(move |ch| gr[ch] * gam[ch] * inv_std[ch])).collect()
                });
                self.send(grads, *gamma, || sum_gx);
                self.send(grads, *beta, || sum_g);
            }
            Op::Softmax { input, cols } => {
                let q = node.value.data();
                self.send(grads, *input, || {
                    let mut dx = Vec::with_capacity(g.len());
                    for (gr, qr) in g.chunks_exact(*cols).zip(q.chunks_exact(*cols)) {
                        let dot = gr.iter().zip(qr).fold(T::zero(), |a, (&x, &y)| a + x * y);
                        dx.extend(gr.iter().zip(qr).map(|(&x, &y)| y * (x - dot)));
                    }
                    dx
                });
            }
            Op::Add(a, b) => {
                self.send(grads, *a, || g.to_vec());
                self.send(grads, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, || g.to_vec());
                self.send(grads, *b, || g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.send(grads, *a, || g.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                self.send(grads, *b, || g.iter().zip(av).map(|(&d, &x)| d * x).collect());
            }
            Op::Scale(input, s) => {
                self.send(grads, *input, || g.iter().map(|&d| d * *s).collect());
            }
            Op::Square(input) => {
                let x = self.value(*input).data();
                let two = T::one() + T::one();
                self.send(grads, *input, || g.iter().zip(x).map(|(&d, &v)| two * v * d).collect());
            }
            Op::NegPart(input) => {
                let x = self.value(*input).data();
                self.send(grads, *input, || g.iter().zip(x).map(|(&d, &v)| if v < T::zero() { -d } else { T::zero() }).collect());
            }
            Op::Sum(input) => {
                let n = self.value(*input).len();
                self.send(grads, *input, || vec![g[0]; n]);
            }
            Op::SumRows(input) => {
                let n = self.value(*input).len();
                let width = if g.is_empty() { 0 } else { n / g.len() };
                self.send(grads, *input, || g.iter().flat_map(|&d| std::iter::repeat_n(d, width)).collect());
            }
            Op::LogFloor { input, floor } => {
                let x = self.value(*input).data();
                self.send(grads, *input, || {
                    g.iter().zip(x).map(|(&d, &v)| if v > *floor { d / v } else { T::zero() }).collect()
                });
            }
            Op::AddRow { input } => {
                self.send(grads, *input, || g.to_vec());
            }
            Op::Gather { input, indices } => {
                let n = self.value(*input).len();
                self.send(grads, *input, || {
                    let mut dx = vec![T::zero(); n];
                    for (&i, &d) in indices.iter().zip(g) {
                        dx[i] = dx[i] + d;
                    }
                    dx
                });
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.send(grads, v, || vec![g[0] * w]);
                }
            }
        }
        Ok(())
    }
}
