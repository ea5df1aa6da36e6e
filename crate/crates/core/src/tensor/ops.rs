use super::{numel, Element, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

/// Maps every flat index of `out` onto the flat index of a singleton-broadcast
/// operand. `None` means the shapes are identical.
fn broadcast_map(out: &[usize], operand: &[usize]) -> Result<Option<Vec<usize>>> {
    if out == operand {
        return Ok(None);
    }
    if out.len() != operand.len()
        || out.iter().zip(operand).any(|(&o, &b)| b != o && b != 1)
    {
        return Err(shape_err!("cannot broadcast {:?} onto {:?}", operand, out));
    }
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for ax in (0..rank).rev() {
        strides[ax] = if operand[ax] == 1 { 0 } else { acc };
        acc *= operand[ax];
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(Some(map))
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err!("axis {} out of range for shape {:?}", axis, shape));
    }
    Ok(())
}

impl<E: Element> Tensor<E> {
    /// `self op other`, where `other` may broadcast along singleton axes.
    pub fn elementwise(&self, op: BinaryOp, other: &Tensor<E>) -> Result<Tensor<E>> {
        let map = broadcast_map(self.shape(), other.shape())?;
        let a = self.data();
        let b = other.data();
        let bi = |i: usize| map.as_ref().map_or(i, |m| m[i]);
        let data: Vec<E> = match (op, &map) {
            (BinaryOp::Add, None) => a.iter().zip(b).map(|(x, y)| *x + *y).collect(),
            (BinaryOp::Sub, None) => a.iter().zip(b).map(|(x, y)| *x - *y).collect(),
            (BinaryOp::Mul, None) => a.iter().zip(b).map(|(x, y)| *x * *y).collect(),
            (BinaryOp::Add, Some(_)) => (0..a.len()).map(|i| a[i] + b[bi(i)]).collect(),
            (BinaryOp::Sub, Some(_)) => (0..a.len()).map(|i| a[i] - b[bi(i)]).collect(),
            (BinaryOp::Mul, Some(_)) => (0..a.len()).map(|i| a[i] * b[bi(i)]).collect(),
        };
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        let (lhs, rhs) = (self.clone(), other.clone());
        let b_len = other.numel();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            name,
            &[self, other],
            move |g| {
                let ga = lhs.requires_grad().then(|| match op {
                    BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                    BinaryOp::Mul => {
                        let b = rhs.data();
                        match &map {
                            None => g.iter().zip(b).map(|(g, b)| *g * *b).collect(),
                            Some(m) => g.iter().zip(m).map(|(g, &j)| *g * b[j]).collect(),
                        }
                    }
                });
                if !rhs.requires_grad() {
                    return vec![ga, None];
                }
                let gb_full: Vec<E> = match op {
                    BinaryOp::Add => g.to_vec(),
                    BinaryOp::Sub => g.iter().map(|g| -*g).collect(),
                    BinaryOp::Mul => g.iter().zip(lhs.data()).map(|(g, a)| *g * *a).collect(),
                };
                let gb = match &map {
                    None => gb_full,
                    Some(m) => {
                        let mut acc = vec![E::zero(); b_len];
                        for (v, &j) in gb_full.iter().zip(m) {
                            acc[j] += *v;
                        }
                        acc
                    }
                };
                vec![ga, Some(gb)]
            },
        ))
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.elementwise(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.elementwise(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.elementwise(BinaryOp::Mul, other)
    }

    pub fn mul_scalar(&self, s: E) -> Tensor<E> {
        let data = self.data().iter().map(|v| *v * s).collect();
        Tensor::from_op(data, self.shape().to_vec(), "mul_scalar", &[self], move |g| {
            vec![Some(g.iter().map(|g| *g * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: E) -> Tensor<E> {
        let data = self.data().iter().map(|v| *v + s).collect();
        Tensor::from_op(data, self.shape().to_vec(), "add_scalar", &[self], |g| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn activation(&self, kind: Activation) -> Tensor<E> {
        let one = E::one();
        let out: Vec<E> = match kind {
            Activation::Sigmoid => self.data().iter().map(|&x| sigmoid(x)).collect(),
            Activation::Tanh => self.data().iter().map(|x| x.tanh()).collect(),
            Activation::Relu => self.data().iter().map(|&x| x.max(E::zero())).collect(),
        };
        let (name, saved) = match kind {
            Activation::Sigmoid => ("sigmoid", out.clone()),
            Activation::Tanh => ("tanh", out.clone()),
            Activation::Relu => ("relu", self.to_vec()),
        };
        Tensor::from_op(out, self.shape().to_vec(), name, &[self], move |g| {
            let gx = match kind {
                Activation::Sigmoid => {
                    g.iter().zip(&saved).map(|(g, &y)| *g * y * (one - y)).collect()
                }
                Activation::Tanh => g.iter().zip(&saved).map(|(g, &y)| *g * (one - y * y)).collect(),
                Activation::Relu => g
                    .iter()
                    .zip(&saved)
                    .map(|(g, &x)| if x > E::zero() { *g } else { E::zero() })
                    .collect(),
            };
            vec![Some(gx)]
        })
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        self.activation(Activation::Sigmoid)
    }

    pub fn tanh(&self) -> Tensor<E> {
        self.activation(Activation::Tanh)
    }

    pub fn relu(&self) -> Tensor<E> {
        self.activation(Activation::Relu)
    }

    /// Sum or mean over `axes`. Reduced axes are kept as extent 1 when
    /// `keep_dims`, otherwise dropped.
    pub fn reduce(&self, op: Reduce, axes: &[usize], keep_dims: bool) -> Result<Tensor<E>> {
        if self.numel() == 0 {
            return Err(Error::Degenerate("reduction over an empty tensor".into()));
        }
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            check_axis(self.shape(), ax)?;
            reduced[ax] = true;
        }
        let kept: Vec<usize> = self
            .shape()
            .iter()
            .zip(&reduced)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let out_shape: Vec<usize> = if keep_dims {
            kept.clone()
        } else {
            self.shape()
                .iter()
                .zip(&reduced)
                .filter(|(_, &r)| !r)
                .map(|(&d, _)| d)
                .collect()
        };
        let count: usize = self
            .shape()
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        // The kept-dims shape broadcasts onto the input, which gives the
        // input -> output index map.
        let map = broadcast_map(self.shape(), &kept)?;
        let out_len = numel(&kept);
        let mut out = vec![E::zero(); out_len];
        match &map {
            None => out.copy_from_slice(self.data()),
            Some(m) => {
                for (v, &j) in self.data().iter().zip(m) {
                    out[j] += *v;
                }
            }
        }
        let scale = match op {
            Reduce::Sum => E::one(),
            Reduce::Mean => E::one() / E::from_usize(count).unwrap(),
        };
        if op == Reduce::Mean {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let in_len = self.numel();
        Ok(Tensor::from_op(out, out_shape, "reduce", &[self], move |g| {
            let gx = match &map {
                None => g.iter().map(|g| *g * scale).collect(),
                Some(m) => (0..in_len).map(|i| g[m[i]] * scale).collect(),
            };
            vec![Some(gx)]
        }))
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce(Reduce::Sum, &axes, false)
            .unwrap_or_else(|_| Tensor::scalar(E::zero()))
    }

    pub fn mean_all(&self) -> Result<Tensor<E>> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce(Reduce::Mean, &axes, false)
    }

    /// Mean squared error over all elements. The target must not track
    /// gradients.
    pub fn mse_loss(&self, target: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() != target.shape() {
            return Err(shape_err!(
                "mse_loss shapes differ: {:?} vs {:?}",
                self.shape(),
                target.shape()
            ));
        }
        if target.requires_grad() {
            return Err(Error::Config("mse_loss target must not require grad".into()));
        }
        if self.numel() == 0 {
            return Err(Error::Degenerate("mse_loss over an empty tensor".into()));
        }
        let n = E::from_usize(self.numel()).unwrap();
        let diff: Vec<E> = self
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| *p - *t)
            .collect();
        let loss = diff.iter().map(|d| *d * *d).sum::<E>() / n;
        let two = E::one() + E::one();
        Ok(Tensor::from_op(vec![loss], Vec::new(), "mse_loss", &[self], move |g| {
            let s = g[0] * two / n;
            vec![Some(diff.iter().map(|d| *d * s).collect())]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if numel(shape) != self.numel() {
            return Err(shape_err!("cannot reshape {:?} to {:?}", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            "reshape",
            &[self],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<E>> {
        check_axis(self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        if start > end || end > len {
            return Err(shape_err!(
                "slice {}..{} out of range for axis {} of {:?}",
                start,
                end,
                axis,
                self.shape()
            ));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        let src = self.data();
        for o in 0..outer {
            let base = (o * len + start) * inner;
            data.extend_from_slice(&src[base..base + width * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = width;
        let in_len = self.numel();
        Ok(Tensor::from_op(data, shape, "slice", &[self], move |g| {
            let mut gx = vec![E::zero(); in_len];
            for o in 0..outer {
                let base = (o * len + start) * inner;
                let gb = o * width * inner;
                gx[base..base + width * inner].copy_from_slice(&g[gb..gb + width * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Index `index` along `axis`, dropping that axis.
    pub fn select(&self, axis: usize, index: usize) -> Result<Tensor<E>> {
        let s = self.slice(axis, index, index + 1)?;
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        s.reshape(&shape)
    }

    /// Last entry along axis 0 (e.g. the final time step of a sequence).
    pub fn last(&self) -> Result<Tensor<E>> {
        match self.shape().first() {
            Some(&n) if n > 0 => self.select(0, n - 1),
            _ => Err(shape_err!("last() on shape {:?}", self.shape())),
        }
    }

    pub fn concat(parts: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        check_axis(first.shape(), axis)?;
        for p in parts {
            let same_rank = p.rank() == first.rank();
            let compatible = same_rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(shape_err!(
                    "concat along axis {}: {:?} vs {:?}",
                    axis,
                    p.shape(),
                    first.shape()
                ));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                let base = o * l * inner;
                data.extend_from_slice(&p.data()[base..base + l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let refs: Vec<&Tensor<E>> = parts.iter().collect();
        Ok(Tensor::from_op(data, shape, "concat", &refs, move |g| {
            let mut grads: Vec<Vec<E>> =
                lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("stack of zero tensors"))?;
        if let Some(p) = parts.iter().find(|p| p.shape() != first.shape()) {
            return Err(shape_err!("stack: {:?} vs {:?}", p.shape(), first.shape()));
        }
        let step = first.numel();
        let mut data = Vec::with_capacity(step * parts.len());
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(first.shape());
        let refs: Vec<&Tensor<E>> = parts.iter().collect();
        let n = parts.len();
        Ok(Tensor::from_op(data, shape, "stack", &refs, move |g| {
            (0..n).map(|i| Some(g[i * step..(i + 1) * step].to_vec())).collect()
        }))
    }

    /// Repeats the tensor `times` along a new leading axis.
    pub fn repeat(&self, times: usize) -> Result<Tensor<E>> {
        if times == 0 {
            return Err(shape_err!("repeat count must be positive"));
        }
        let step = self.numel();
        let mut data = Vec::with_capacity(step * times);
        for _ in 0..times {
            data.extend_from_slice(self.data());
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape());
        Ok(Tensor::from_op(data, shape, "repeat", &[self], move |g| {
            let mut gx = g[..step].to_vec();
            for r in 1..times {
                gx.iter_mut()
                    .zip(&g[r * step..(r + 1) * step])
                    .for_each(|(a, b)| *a += *b);
            }
            vec![Some(gx)]
        }))
    }

    /// Splits the tensor into its entries along axis 0.
    pub fn unstack(&self) -> Result<Vec<Tensor<E>>> {
        let n = *self
            .shape()
            .first()
            .ok_or_else(|| shape_err!("unstack of a scalar"))?;
        (0..n).map(|i| self.select(0, i)).collect()
    }
}

#[inline]
pub(crate) fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}
