//! Operation tape and differentiable variables.

use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mm, mm_nt, mm_tn, stable_sigmoid, stable_softplus, Tensor, TensorError};

type BackwardFn = Box<dyn Fn(&[Tensor], &Tensor) -> Vec<(usize, Tensor)>>;

struct OpRecord {
    out: usize,
    backward: BackwardFn,
}

#[derive(Default)]
struct TapeInner {
    values: Vec<Tensor>,
    requires_grad: Vec<bool>,
    ops: Vec<OpRecord>,
    grads: Vec<Option<Tensor>>,
}

impl TapeInner {
    fn push(&mut self, value: Tensor, requires_grad: bool) -> usize {
        let id = self.values.len();
        self.values.push(value);
        self.requires_grad.push(requires_grad);
        id
    }
}

/// Records one forward pass; single-writer, replayed once by [`Tape::backward`].
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// A handle to one tensor on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable leaf; `backward` will accumulate its gradient.
    pub fn var(&self, value: Tensor) -> Var {
        let id = self.inner.borrow_mut().push(value, true);
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// A non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var {
        let id = self.inner.borrow_mut().push(value, false);
        Var {
            tape: self.clone(),
            id,
        }
    }

    pub fn scalar_const(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Registers an output computed outside the standard op set, together
    /// with the closure that maps its output gradient to input-gradient
    /// contributions. Inputs must live on this tape.
    pub(crate) fn custom_op(
        &self,
        inputs: &[&Var],
        value: Tensor,
        backward: BackwardFn,
    ) -> Result<Var, TensorError> {
        for v in inputs {
            if !Rc::ptr_eq(&self.inner, &v.tape.inner) {
                return Err(TensorError::TapeMismatch);
            }
        }
        let needs = inputs.iter().any(|v| v.requires_grad());
        let mut inner = self.inner.borrow_mut();
        let id = inner.push(value, needs);
        if needs {
            inner.ops.push(OpRecord { out: id, backward });
        }
        Ok(Var {
            tape: self.clone(),
            id,
        })
    }

    /// Accumulates `d loss / d leaf` for every recorded tensor reachable from
    /// `loss`, walking the ops in exact reverse recording order. The op list
    /// is consumed; values and gradients stay readable.
    pub fn backward(&self, loss: &Var) -> Result<(), TensorError> {
        if !Rc::ptr_eq(&self.inner, &loss.tape.inner) {
            return Err(TensorError::TapeMismatch);
        }
        let mut inner = self.inner.borrow_mut();
        if inner.values[loss.id].len() != 1 {
            return Err(TensorError::NonScalarLoss(
                inner.values[loss.id].shape().to_vec(),
            ));
        }
        let n = inner.values.len();
        inner.grads = vec![None; n];
        let seed_shape = inner.values[loss.id].shape().to_vec();
        inner.grads[loss.id] = Some(Tensor::filled(&seed_shape, 1.0));

        let TapeInner {
            values, ops, grads, ..
        } = &mut *inner;
        let recorded = std::mem::take(ops);
        for op in recorded.iter().rev() {
            let gout = match &grads[op.out] {
                Some(g) => g.clone(),
                None => continue,
            };
            for (id, contrib) in (op.backward)(values, &gout) {
                match &mut grads[id] {
                    Some(g) => g.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    pub fn grad(&self, var: &Var) -> Option<Tensor> {
        self.inner.borrow().grads.get(var.id)?.clone()
    }
}

impl Var {
    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().values[self.id].clone()
    }

    /// Reads the value in place, avoiding a clone.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().values[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().values[self.id].shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().requires_grad[self.id]
    }

    /// Gradient accumulated by the last `backward` call, if any reached here.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(self)
    }

    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }

    fn same_tape(&self, other: &Var) -> Result<(), TensorError> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch)
        }
    }

    fn unary(
        &self,
        value: Tensor,
        backward: impl Fn(&[Tensor], &Tensor) -> Vec<(usize, Tensor)> + 'static,
    ) -> Var {
        self.tape
            .custom_op(&[self], value, Box::new(backward))
            .expect("unary op on own tape")
    }

    /// Matrix product; `rhs` must be rank-2 and match this tensor's trailing
    /// dimension. Leading dimensions are preserved.
    pub fn matmul(&self, rhs: &Var) -> Result<Var, TensorError> {
        self.same_tape(rhs)?;
        let (value, a_id, b_id, dims) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.id];
            let b = &inner.values[rhs.id];
            if b.shape().len() != 2 || a.cols() != b.rows() {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out_shape = a.shape().to_vec();
            *out_shape.last_mut().unwrap() = n;
            let value = Tensor::from_vec(&out_shape, mm(a.data(), b.data(), m, k, n))?;
            (value, self.id, rhs.id, (m, k, n))
        };
        let (need_a, need_b) = (self.requires_grad(), rhs.requires_grad());
        let (m, k, n) = dims;
        self.tape.custom_op(
            &[self, rhs],
            value,
            Box::new(move |values, gout| {
                let mut contribs = Vec::new();
                if need_a {
                    let b = &values[b_id];
                    let ga = mm_nt(gout.data(), b.data(), m, n, k);
                    let shape = values[a_id].shape().to_vec();
                    contribs.push((a_id, Tensor::from_vec(&shape, ga).unwrap()));
                }
                if need_b {
                    let a = &values[a_id];
                    let gb = mm_tn(a.data(), gout.data(), m, k, n);
                    let shape = values[b_id].shape().to_vec();
                    contribs.push((b_id, Tensor::from_vec(&shape, gb).unwrap()));
                }
                contribs
            }),
        )
    }

    fn zip_elementwise(
        &self,
        rhs: &Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        backward: impl Fn(&[Tensor], &Tensor) -> Vec<(usize, Tensor)> + 'static,
    ) -> Result<Var, TensorError> {
        self.same_tape(rhs)?;
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.values[self.id];
            let b = &inner.values[rhs.id];
            if a.shape() != b.shape() {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(a.shape(), data)?
        };
        self.tape.custom_op(&[self, rhs], value, Box::new(backward))
    }

    pub fn add(&self, rhs: &Var) -> Result<Var, TensorError> {
        let (a_id, b_id) = (self.id, rhs.id);
        let (need_a, need_b) = (self.requires_grad(), rhs.requires_grad());
        self.zip_elementwise(rhs, "add", |x, y| x + y, move |_, gout| {
            let mut c = Vec::new();
            if need_a {
                c.push((a_id, gout.clone()));
            }
            if need_b {
                c.push((b_id, gout.clone()));
            }
            c
        })
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var, TensorError> {
        let (a_id, b_id) = (self.id, rhs.id);
        let (need_a, need_b) = (self.requires_grad(), rhs.requires_grad());
        self.zip_elementwise(rhs, "sub", |x, y| x - y, move |_, gout| {
            let mut c = Vec::new();
            if need_a {
                c.push((a_id, gout.clone()));
            }
            if need_b {
                let data = gout.data().iter().map(|g| -g).collect();
                c.push((b_id, Tensor::from_vec(gout.shape(), data).unwrap()));
            }
            c
        })
    }

    pub fn mul_elementwise(&self, rhs: &Var) -> Result<Var, TensorError> {
        let (a_id, b_id) = (self.id, rhs.id);
        let (need_a, need_b) = (self.requires_grad(), rhs.requires_grad());
        self.zip_elementwise(rhs, "mul_elementwise", |x, y| x * y, move |values, gout| {
            let mut c = Vec::new();
            if need_a {
                let b = &values[b_id];
                let data = gout.data().iter().zip(b.data()).map(|(g, y)| g * y).collect();
                c.push((a_id, Tensor::from_vec(gout.shape(), data).unwrap()));
            }
            if need_b {
                let a = &values[a_id];
                let data = gout.data().iter().zip(a.data()).map(|(g, x)| g * x).collect();
                c.push((b_id, Tensor::from_vec(gout.shape(), data).unwrap()));
            }
            c
        })
    }

    pub fn scalar_mul(&self, c: f64) -> Var {
        let value = self.with_value(|t| {
            let data = t.data().iter().map(|v| v * c).collect();
            Tensor::from_vec(t.shape(), data).unwrap()
        });
        let a_id = self.id;
        self.unary(value, move |_, gout| {
            let data = gout.data().iter().map(|g| g * c).collect();
            vec![(a_id, Tensor::from_vec(gout.shape(), data).unwrap())]
        })
    }

    /// Adds a single-row bias to every row.
    pub fn add_row_broadcast(&self, bias: &Var) -> Result<Var, TensorError> {
        self.same_tape(bias)?;
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.values[self.id];
            let b = &inner.values[bias.id];
            if b.rows() != 1 || b.cols() != x.cols() {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row_broadcast",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let cols = x.cols();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + b.data()[i % cols])
                .collect();
            Tensor::from_vec(x.shape(), data)?
        };
        let (x_id, b_id) = (self.id, bias.id);
        let (need_x, need_b) = (self.requires_grad(), bias.requires_grad());
        self.tape.custom_op(
            &[self, bias],
            value,
            Box::new(move |values, gout| {
                let mut c = Vec::new();
                if need_x {
                    c.push((x_id, gout.clone()));
                }
                if need_b {
                    let shape = values[b_id].shape().to_vec();
                    let cols = gout.cols();
                    let mut sums = vec![0.0; cols];
                    for (i, g) in gout.data().iter().enumerate() {
                        sums[i % cols] += g;
                    }
                    c.push((b_id, Tensor::from_vec(&shape, sums).unwrap()));
                }
                c
            }),
        )
    }

    pub fn relu(&self) -> Var {
        let value = self.with_value(|t| {
            let data = t.data().iter().map(|&v| v.max(0.0)).collect();
            Tensor::from_vec(t.shape(), data).unwrap()
        });
        let a_id = self.id;
        self.unary(value, move |values, gout| {
            let x = &values[a_id];
            let data = gout
                .data()
                .iter()
                .zip(x.data())
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect();
            vec![(a_id, Tensor::from_vec(gout.shape(), data).unwrap())]
        })
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.with_value(|t| {
            let data = t.data().iter().map(|&v| stable_sigmoid(v)).collect();
            Tensor::from_vec(t.shape(), data).unwrap()
        });
        let a_id = self.id;
        self.unary(value, move |values, gout| {
            let x = &values[a_id];
            let data = gout
                .data()
                .iter()
                .zip(x.data())
                .map(|(g, &v)| {
                    let s = stable_sigmoid(v);
                    g * s * (1.0 - s)
                })
                .collect();
            vec![(a_id, Tensor::from_vec(gout.shape(), data).unwrap())]
        })
    }

    pub fn softplus(&self) -> Var {
        let value = self.with_value(|t| {
            let data = t.data().iter().map(|&v| stable_softplus(v)).collect();
            Tensor::from_vec(t.shape(), data).unwrap()
        });
        let a_id = self.id;
        self.unary(value, move |values, gout| {
            let x = &values[a_id];
            let data = gout
                .data()
                .iter()
                .zip(x.data())
                .map(|(g, &v)| g * stable_sigmoid(v))
                .collect();
            vec![(a_id, Tensor::from_vec(gout.shape(), data).unwrap())]
        })
    }

    /// Natural log with the argument clamped from below at `floor`; the
    /// gradient is zero wherever the clamp engaged.
    pub fn ln_clamped(&self, floor: f64) -> Var {
        let value = self.with_value(|t| {
            let data = t.data().iter().map(|&v| v.max(floor).ln()).collect();
            Tensor::from_vec(t.shape(), data).unwrap()
        });
        let a_id = self.id;
        self.unary(value, move |values, gout| {
            let x = &values[a_id];
            let data = gout
                .data()
                .iter()
                .zip(x.data())
                .map(|(g, &v)| if v >= floor { g / v } else { 0.0 })
                .collect();
            vec![(a_id, Tensor::from_vec(gout.shape(), data).unwrap())]
        })
    }

    /// Scales every row to unit L2 norm; rows with norm ≤ `eps` become zero
    /// rows and receive zero gradient.
    pub fn l2_normalize_rows(&self, eps: f64) -> Var {
        let value = self.with_value(|t| {
            let cols = t.cols();
            let mut data = Vec::with_capacity(t.len());
            for r in 0..t.rows() {
                let row = t.row(r);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm <= eps {
                    data.extend(std::iter::repeat(0.0).take(cols));
                } else {
                    data.extend(row.iter().map(|v| v / norm));
                }
            }
            Tensor::from_vec(t.shape(), data).unwrap()
        });
        let a_id = self.id;
        self.unary(value, move |values, gout| {
            let x = &values[a_id];
            let cols = x.cols();
            let mut data = vec![0.0; x.len()];
            for r in 0..x.rows() {
                let row = x.row(r);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm <= eps {
                    continue;
                }
                let g = gout.row(r);
                let dot: f64 = g
                    .iter()
                    .zip(row)
                    .map(|(gv, xv)| gv * xv / norm)
                    .sum();
                let out_row = &mut data[r * cols..(r + 1) * cols];
                for ((o, gv), xv) in out_row.iter_mut().zip(g).zip(row) {
                    *o = (gv - (xv / norm) * dot) / norm;
                }
            }
            vec![(a_id, Tensor::from_vec(x.shape(), data).unwrap())]
        })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Var {
        let value = self.with_value(|t| {
            let cols = t.cols();
            let mut data = Vec::with_capacity(t.len());
            for r in 0..t.rows() {
                let row = t.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                data.extend(exps.iter().map(|e| e / sum));
                debug_assert_eq!(cols, row.len());
            }
            Tensor::from_vec(t.shape(), data).unwrap()
        });
        let out_id_holder = self.tape.inner.borrow().values.len();
        let a_id = self.id;
        self.unary(value, move |values, gout| {
            let y = &values[out_id_holder];
            let cols = y.cols();
            let mut data = vec![0.0; y.len()];
            for r in 0..y.rows() {
                let yr = y.row(r);
                let gr = gout.row(r);
                let s: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                let out_row = &mut data[r * cols..(r + 1) * cols];
                for ((o, yv), gv) in out_row.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - s);
                }
            }
            vec![(a_id, Tensor::from_vec(y.shape(), data).unwrap())]
        })
    }

    /// Inverted dropout: in training mode kept entries are scaled by
    /// `1/(1-rate)`; in eval mode this is the identity.
    pub fn dropout(&self, rate: f64, training: bool, seed: u64) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::DropoutRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 - rate;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (value, factors) = self.with_value(|t| {
            let factors: Rc<Vec<f64>> = Rc::new(
                (0..t.len())
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            );
            let data = t.data().iter().zip(factors.iter()).map(|(v, f)| v * f).collect();
            (Tensor::from_vec(t.shape(), data).unwrap(), factors)
        });
        let a_id = self.id;
        Ok(self.unary(value, move |_, gout| {
            let data = gout
                .data()
                .iter()
                .zip(factors.iter())
                .map(|(g, f)| g * f)
                .collect();
            vec![(a_id, Tensor::from_vec(gout.shape(), data).unwrap())]
        }))
    }

    /// Gathers the given rows into a new matrix; gradient scatters back.
    pub fn select_rows(&self, idx: &[usize]) -> Var {
        let idx: Rc<Vec<usize>> = Rc::new(idx.to_vec());
        let value = self.with_value(|t| {
            let cols = t.cols();
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &r in idx.iter() {
                data.extend_from_slice(t.row(r));
            }
            Tensor::from_vec(&[idx.len(), cols], data).unwrap()
        });
        let a_id = self.id;
        self.unary(value, move |values, gout| {
            let x = &values[a_id];
            let cols = x.cols();
            let mut data = vec![0.0; x.len()];
            for (i, &r) in idx.iter().enumerate() {
                let g = gout.row(i);
                let out_row = &mut data[r * cols..(r + 1) * cols];
                for (o, gv) in out_row.iter_mut().zip(g) {
                    *o += gv;
                }
            }
            vec![(a_id, Tensor::from_vec(x.shape(), data).unwrap())]
        })
    }

    /// Sums each row, producing an `[rows, 1]` column.
    pub fn row_sum(&self) -> Var {
        let value = self.with_value(|t| {
            let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
            Tensor::from_vec(&[t.rows(), 1], data).unwrap()
        });
        let a_id = self.id;
        self.unary(value, move |values, gout| {
            let x = &values[a_id];
            let cols = x.cols();
            let mut data = Vec::with_capacity(x.len());
            for r in 0..x.rows() {
                data.extend(std::iter::repeat(gout.data()[r]).take(cols));
            }
            vec![(a_id, Tensor::from_vec(x.shape(), data).unwrap())]
        })
    }

    /// Sums every element into a scalar.
    pub fn sum_all(&self) -> Var {
        let value = self.with_value(|t| Tensor::scalar(t.data().iter().sum()));
        let a_id = self.id;
        self.unary(value, move |values, gout| {
            let shape = values[a_id].shape().to_vec();
            vec![(a_id, Tensor::filled(&shape, gout.item()))]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.with_value(|t| t.reshape(shape))?;
        let a_id = self.id;
        Ok(self.unary(value, move |values, gout| {
            let shape = values[a_id].shape().to_vec();
            vec![(a_id, gout.reshape(&shape).unwrap())]
        }))
    }
}
