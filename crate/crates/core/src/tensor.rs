//! Minimal reverse-mode autodiff over [`ndarray`] arrays.
//!
//! A [`Var`] wraps a dynamic-dimension array plus an optional backward
//! closure. Ops build a DAG; [`Var::backward`] walks it in reverse
//! topological order and accumulates gradients into trainable leaves.
//! Graphs are rebuilt every step and dropped with the loss value, while
//! parameters live on as leaves owned by the layers.
//!
//! Frozen subgraphs are pruned at construction: an op whose inputs all have
//! `needs_grad == false` yields a constant, so e.g. a frozen feature
//! extractor contributes no tape at all. A frozen layer *inside* an active
//! graph (the stage-II decoder) still propagates gradients through itself
//! while its own parameters collect nothing.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn, Slice};
use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn<S> = Box<dyn Fn(&ArrayD<S>, &[Var<S>]) -> Vec<Option<ArrayD<S>>>>;

struct VarInner<S: Scalar> {
    id: u64,
    value: RefCell<ArrayD<S>>,
    grad: RefCell<Option<ArrayD<S>>>,
    trainable: Cell<bool>,
    needs_grad: bool,
    parents: Vec<Var<S>>,
    backward: Option<BackwardFn<S>>,
}

/// A node in the autodiff graph.
#[derive(Clone)]
pub struct Var<S: Scalar> {
    inner: Rc<VarInner<S>>,
}

impl<S: Scalar> Var<S> {
    fn new_leaf(value: ArrayD<S>, trainable: bool) -> Self {
        Var {
            inner: Rc::new(VarInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                trainable: Cell::new(trainable),
                needs_grad: trainable,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    fn new_op(value: ArrayD<S>, parents: Vec<Var<S>>, backward: BackwardFn<S>) -> Self {
        if parents.iter().any(|p| p.needs_grad()) {
            Var {
                inner: Rc::new(VarInner {
                    id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                    value: RefCell::new(value),
                    grad: RefCell::new(None),
                    trainable: Cell::new(false),
                    needs_grad: true,
                    parents,
                    backward: Some(backward),
                }),
            }
        } else {
            Var::new_leaf(value, false)
        }
    }

    /// Trainable leaf (a parameter).
    pub fn param(value: ArrayD<S>) -> Self {
        Var::new_leaf(value, true)
    }

    /// Non-trainable leaf (an input or a constant).
    pub fn constant(value: ArrayD<S>) -> Self {
        Var::new_leaf(value, false)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn value(&self) -> Ref<'_, ArrayD<S>> {
        self.inner.value.borrow()
    }

    pub fn to_array(&self) -> ArrayD<S> {
        self.inner.value.borrow().clone()
    }

    /// Scalar payload of a 0-d (or single-element) var.
    pub fn scalar(&self) -> S {
        let v = self.inner.value.borrow();
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar var");
        *v.iter().next().expect("empty var")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.value.borrow().shape().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        if self.inner.backward.is_none() {
            self.inner.trainable.get()
        } else {
            self.inner.needs_grad
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.inner.trainable.get()
    }

    /// Flip the trainable flag of a leaf. Takes effect for graphs built
    /// afterwards; freezing mid-graph is not supported.
    pub fn set_trainable(&self, trainable: bool) {
        debug_assert!(self.inner.backward.is_none(), "set_trainable on op node");
        self.inner.trainable.set(trainable);
    }

    /// Constant copy of this var's value, cut off from the graph.
    pub fn detach(&self) -> Var<S> {
        Var::constant(self.to_array())
    }

    /// Overwrite the stored value (optimizer updates).
    pub fn assign(&self, value: ArrayD<S>) {
        debug_assert_eq!(value.shape(), self.inner.value.borrow().shape());
        *self.inner.value.borrow_mut() = value;
    }

    /// In-place update of the stored value.
    pub fn update<F: FnOnce(&mut ArrayD<S>)>(&self, f: F) {
        f(&mut self.inner.value.borrow_mut());
    }

    pub fn grad(&self) -> Option<ArrayD<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn take_grad(&self) -> Option<ArrayD<S>> {
        self.inner.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Reverse-mode sweep from a scalar output. Gradients accumulate into
    /// the `grad` slots of trainable leaves.
    pub fn backward(&self) {
        assert_eq!(
            self.inner.value.borrow().len(),
            1,
            "backward() requires a scalar output"
        );
        let topo = self.topo_order();
        let mut grads: HashMap<u64, ArrayD<S>> = HashMap::new();
        let seed = ArrayD::ones(self.inner.value.borrow().raw_dim());
        grads.insert(self.inner.id, seed);

        for var in topo.iter().rev() {
            let Some(g) = grads.remove(&var.inner.id) else {
                continue;
            };
            match &var.inner.backward {
                None => {
                    if var.inner.trainable.get() {
                        let mut slot = var.inner.grad.borrow_mut();
                        match slot.as_mut() {
                            Some(acc) => *acc += &g,
                            None => *slot = Some(g),
                        }
                    }
                }
                Some(backward) => {
                    let parent_grads = backward(&g, &var.inner.parents);
                    debug_assert_eq!(parent_grads.len(), var.inner.parents.len());
                    for (parent, pg) in var.inner.parents.iter().zip(parent_grads) {
                        if let Some(pg) = pg {
                            debug_assert_eq!(pg.shape(), parent.shape().as_slice());
                            grads
                                .entry(parent.inner.id)
                                .and_modify(|acc| *acc += &pg)
                                .or_insert(pg);
                        }
                    }
                }
            }
        }
    }

    /// Iterative post-order DFS; the returned list is a topological order
    /// with parents before children.
    fn topo_order(&self) -> Vec<Var<S>> {
        let mut topo = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Var<S>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((var, child_idx)) = stack.pop() {
            if child_idx < var.inner.parents.len() {
                let parent = var.inner.parents[child_idx].clone();
                stack.push((var, child_idx + 1));
                if parent.needs_grad() && visited.insert(parent.inner.id) {
                    stack.push((parent, 0));
                }
            } else {
                topo.push(var);
            }
        }
        topo
    }
}

fn unary_grad<S: Scalar>(parent: &Var<S>, g: Option<ArrayD<S>>) -> Vec<Option<ArrayD<S>>> {
    if parent.needs_grad() {
        vec![g]
    } else {
        vec![None]
    }
}

// ---------------------------------------------------------------------------
// Elementwise algebra
// ---------------------------------------------------------------------------

pub fn add<S: Scalar>(a: &Var<S>, b: &Var<S>) -> Var<S> {
    assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
    let value = (&*a.value() + &*b.value()).into_dyn();
    Var::new_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            vec![
                parents[0].needs_grad().then(|| g.clone()),
                parents[1].needs_grad().then(|| g.clone()),
            ]
        }),
    )
}

pub fn mul<S: Scalar>(a: &Var<S>, b: &Var<S>) -> Var<S> {
    assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
    let value = (&*a.value() * &*b.value()).into_dyn();
    Var::new_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            vec![
                parents[0].needs_grad().then(|| g * &*parents[1].value()),
                parents[1].needs_grad().then(|| g * &*parents[0].value()),
            ]
        }),
    )
}

pub fn scale<S: Scalar>(a: &Var<S>, factor: S) -> Var<S> {
    let value = a.value().mapv(|x| x * factor);
    Var::new_op(
        value,
        vec![a.clone()],
        Box::new(move |g, parents| unary_grad(&parents[0], Some(g.mapv(|x| x * factor)))),
    )
}

pub fn relu<S: Scalar>(a: &Var<S>) -> Var<S> {
    let value = a.value().mapv(|x| if x > S::zero() { x } else { S::zero() });
    Var::new_op(
        value,
        vec![a.clone()],
        Box::new(move |g, parents| {
            let x = parents[0].value();
            let dx = ndarray::Zip::from(g)
                .and(&*x)
                .map_collect(|&gi, &xi| if xi > S::zero() { gi } else { S::zero() });
            unary_grad(&parents[0], Some(dx))
        }),
    )
}

/// Mean over all elements, yielding a 0-d var.
pub fn mean_all<S: Scalar>(a: &Var<S>) -> Var<S> {
    let n = a.value().len();
    let inv = S::from_usize(n).recip();
    let value = ArrayD::from_elem(IxDyn(&[]), a.value().iter().fold(S::zero(), |s, &x| s + x) * inv);
    Var::new_op(
        value,
        vec![a.clone()],
        Box::new(move |g, parents| {
            let go = *g.iter().next().unwrap() * inv;
            let dx = ArrayD::from_elem(parents[0].value().raw_dim(), go);
            unary_grad(&parents[0], Some(dx))
        }),
    )
}

// ---------------------------------------------------------------------------
// Linear layer primitive
// ---------------------------------------------------------------------------

/// `y = x · wᵀ + b` with `x: (n, in)`, `w: (out, in)`, `b: (out)`.
pub fn linear<S: Scalar>(x: &Var<S>, w: &Var<S>, b: &Var<S>) -> Var<S> {
    let xv = x.value();
    let wv = w.value();
    let bv = b.value();
    let x2 = xv.view().into_dimensionality::<ndarray::Ix2>().expect("linear: x rank");
    let w2 = wv.view().into_dimensionality::<ndarray::Ix2>().expect("linear: w rank");
    let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().expect("linear: b rank");
    assert_eq!(x2.ncols(), w2.ncols(), "linear: inner dim");
    assert_eq!(w2.nrows(), b1.len(), "linear: bias dim");
    let mut y = x2.dot(&w2.t());
    y += &b1;
    drop(xv);
    drop(wv);
    drop(bv);
    Var::new_op(
        y.into_dyn(),
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g, parents| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let dx = parents[0].needs_grad().then(|| {
                let wv = parents[1].value();
                let w2 = wv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                g2.dot(&w2).into_dyn()
            });
            let dw = parents[1].needs_grad().then(|| {
                let xv = parents[0].value();
                let x2 = xv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                g2.t().dot(&x2).into_dyn()
            });
            let db = parents[2]
                .needs_grad()
                .then(|| g2.sum_axis(Axis(0)).into_dyn());
            vec![dx, dw, db]
        }),
    )
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Gather conv patches: `(c·kh·kw, oh·ow)` for one sample.
fn im2col<S: Scalar>(
    x: &ndarray::ArrayView3<S>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<S> {
    let (c, h, w) = x.dim();
    let mut col = Array2::<S>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut out_row = col.row_mut(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        out_row[oi * ow + oj] = x[(ci, ii as usize, jj as usize)];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the adjoint of [`im2col`].
fn col2im<S: Scalar>(
    col: &Array2<S>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<S> {
    let mut x = ndarray::Array3::<S>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let col_row = col.row(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        x[(ci, ii as usize, jj as usize)] += col_row[oi * ow + oj];
                    }
                }
            }
        }
    }
    x
}

/// Plain-array conv forward shared by the autodiff op and the no-grad
/// inference path.
pub(crate) fn conv2d_raw<S: Scalar>(
    x: &Array4<S>,
    w: &Array4<S>,
    b: &Array1<S>,
    stride: usize,
    pad: usize,
) -> Array4<S> {
    let (n, c, h, wd) = x.dim();
    let (oc, wc, kh, kw) = w.dim();
    assert_eq!(c, wc, "conv2d: channel mismatch");
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let w2 = w.view().into_shape_with_order((oc, wc * kh * kw)).unwrap();
    let mut y = Array4::<S>::zeros((n, oc, oh, ow));
    for ni in 0..n {
        let col = im2col(&x.index_axis(Axis(0), ni), kh, kw, stride, pad, oh, ow);
        let yn = w2.dot(&col);
        let mut dst = y.index_axis_mut(Axis(0), ni);
        for o in 0..oc {
            let bias = b[o];
            let src = yn.row(o);
            let mut plane = dst.index_axis_mut(Axis(0), o);
            for oi in 0..oh {
                for oj in 0..ow {
                    plane[(oi, oj)] = src[oi * ow + oj] + bias;
                }
            }
        }
    }
    y
}

/// 2-D convolution, `x: (n, c, h, w)`, `w: (oc, c, kh, kw)`, `b: (oc)`.
pub fn conv2d<S: Scalar>(x: &Var<S>, w: &Var<S>, b: &Var<S>, stride: usize, pad: usize) -> Var<S> {
    let value = {
        let xv = x.value();
        let wv = w.value();
        let bv = b.value();
        let x4 = xv.view().into_dimensionality::<ndarray::Ix4>().expect("conv2d: x rank");
        let w4 = wv.view().into_dimensionality::<ndarray::Ix4>().expect("conv2d: w rank");
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().expect("conv2d: b rank");
        conv2d_raw(&x4.to_owned(), &w4.to_owned(), &b1.to_owned(), stride, pad)
    };
    Var::new_op(
        value.into_dyn(),
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |g, parents| {
            let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let (n, oc, oh, ow) = g4.dim();
            let xv = parents[0].value();
            let x4 = xv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let wv = parents[1].value();
            let w4 = wv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let (_, c, h, wd) = x4.dim();
            let (_, _, kh, kw) = w4.dim();
            let w2 = w4.into_shape_with_order((oc, c * kh * kw)).unwrap();

            let want_dx = parents[0].needs_grad();
            let want_dw = parents[1].needs_grad();
            let want_db = parents[2].needs_grad();

            let mut dx = want_dx.then(|| Array4::<S>::zeros((n, c, h, wd)));
            let mut dw2 = want_dw.then(|| Array2::<S>::zeros((oc, c * kh * kw)));

            for ni in 0..n {
                let gn = g4
                    .index_axis(Axis(0), ni)
                    .into_shape_with_order((oc, oh * ow))
                    .unwrap()
                    .to_owned();
                if want_dw {
                    let col = im2col(&x4.index_axis(Axis(0), ni), kh, kw, stride, pad, oh, ow);
                    *dw2.as_mut().unwrap() += &gn.dot(&col.t());
                }
                if want_dx {
                    let dcol = w2.t().dot(&gn);
                    let dxn = col2im(&dcol, c, h, wd, kh, kw, stride, pad, oh, ow);
                    dx.as_mut()
                        .unwrap()
                        .index_axis_mut(Axis(0), ni)
                        .assign(&dxn);
                }
            }
            let db = want_db.then(|| {
                let mut acc = Array1::<S>::zeros(oc);
                for o in 0..oc {
                    acc[o] = g4.index_axis(Axis(1), o).sum();
                }
                acc.into_dyn()
            });
            vec![
                dx.map(|d| d.into_dyn()),
                dw2.map(|d| {
                    d.into_shape_with_order((oc, c, kh, kw))
                        .unwrap()
                        .into_dyn()
                }),
                db,
            ]
        }),
    )
}

// ---------------------------------------------------------------------------
// Spatial ops
// ---------------------------------------------------------------------------

pub(crate) fn upsample_nearest_raw<S: Scalar>(x: &Array4<S>, k: usize) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<S>::zeros((n, c, h * k, w * k));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h * k {
                for j in 0..w * k {
                    y[(ni, ci, i, j)] = x[(ni, ci, i / k, j / k)];
                }
            }
        }
    }
    y
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_nearest<S: Scalar>(x: &Var<S>, k: usize) -> Var<S> {
    assert!(k >= 1);
    let value = {
        let xv = x.value();
        let x4 = xv.view().into_dimensionality::<ndarray::Ix4>().expect("upsample: rank");
        upsample_nearest_raw(&x4.to_owned(), k)
    };
    Var::new_op(
        value.into_dyn(),
        vec![x.clone()],
        Box::new(move |g, parents| {
            if !parents[0].needs_grad() {
                return vec![None];
            }
            let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let (n, c, hk, wk) = g4.dim();
            let (h, w) = (hk / k, wk / k);
            let mut dx = Array4::<S>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    for i in 0..hk {
                        for j in 0..wk {
                            dx[(ni, ci, i / k, j / k)] += g4[(ni, ci, i, j)];
                        }
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// Concatenate along the channel axis of `(n, c, h, w)` inputs.
pub fn concat_channels<S: Scalar>(xs: &[&Var<S>]) -> Var<S> {
    assert!(!xs.is_empty());
    let views: Vec<ArrayD<S>> = xs.iter().map(|x| x.to_array()).collect();
    let value = ndarray::concatenate(
        Axis(1),
        &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
    )
    .expect("concat_channels: incompatible shapes");
    let widths: Vec<usize> = views.iter().map(|v| v.shape()[1]).collect();
    Var::new_op(
        value,
        xs.iter().map(|&x| x.clone()).collect(),
        Box::new(move |g, parents| {
            let mut out = Vec::with_capacity(parents.len());
            let mut start = 0usize;
            for (parent, &width) in parents.iter().zip(&widths) {
                let slice = g
                    .slice_axis(Axis(1), Slice::from(start..start + width))
                    .to_owned();
                out.push(parent.needs_grad().then_some(slice));
                start += width;
            }
            out
        }),
    )
}

pub(crate) fn global_avg_pool_raw<S: Scalar>(x: &Array4<S>) -> Array2<S> {
    let (n, c, h, w) = x.dim();
    let inv = S::from_usize(h * w).recip();
    let mut y = Array2::<S>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            y[(ni, ci)] = x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum() * inv;
        }
    }
    y
}

/// Global average pooling `(n, c, h, w) -> (n, c)`.
pub fn global_avg_pool<S: Scalar>(x: &Var<S>) -> Var<S> {
    let value = {
        let xv = x.value();
        let x4 = xv.view().into_dimensionality::<ndarray::Ix4>().expect("gap: rank");
        global_avg_pool_raw(&x4.to_owned())
    };
    Var::new_op(
        value.into_dyn(),
        vec![x.clone()],
        Box::new(move |g, parents| {
            if !parents[0].needs_grad() {
                return vec![None];
            }
            let shape = parents[0].shape();
            let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let inv = S::from_usize(h * w).recip();
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut dx = Array4::<S>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    dx.index_axis_mut(Axis(0), ni)
                        .index_axis_mut(Axis(0), ci)
                        .fill(g2[(ni, ci)] * inv);
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

// ---------------------------------------------------------------------------
// Batch normalization (1-d, over rows of (n, c))
// ---------------------------------------------------------------------------

/// Training-mode batch norm over `(n, c)` with batch statistics. Returns the
/// normalized output plus the batch mean and (biased) variance so the caller
/// can maintain running statistics.
pub fn batchnorm1d_train<S: Scalar>(
    x: &Var<S>,
    gamma: &Var<S>,
    beta: &Var<S>,
    eps: S,
) -> (Var<S>, Array1<S>, Array1<S>) {
    let (mean, var, xhat, y) = {
        let xv = x.value();
        let x2 = xv.view().into_dimensionality::<ndarray::Ix2>().expect("bn: rank");
        let n = x2.nrows();
        let inv_n = S::from_usize(n).recip();
        let mean = x2.sum_axis(Axis(0)) * inv_n;
        let centered = &x2 - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) * inv_n;
        let inv_std = var.mapv(|v| (v + eps).sqrt().recip());
        let xhat = &centered * &inv_std;
        let gv = gamma.value();
        let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let bv = beta.value();
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let y = &xhat * &g1 + &b1;
        (mean, var, xhat, y)
    };
    let eps_c = eps;
    let xhat_c = xhat.clone();
    let var_c = var.clone();
    let out = Var::new_op(
        y.into_dyn(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, parents| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let n = g2.nrows();
            let inv_n = S::from_usize(n).recip();
            let gv = parents[1].value();
            let gamma1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let inv_std = var_c.mapv(|v| (v + eps_c).sqrt().recip());

            let dxhat = &g2 * &gamma1;
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * &xhat_c).sum_axis(Axis(0));

            let dx = parents[0].needs_grad().then(|| {
                let mut dx = Array2::<S>::zeros(g2.dim());
                for i in 0..n {
                    for c in 0..g2.ncols() {
                        let term = dxhat[(i, c)] * S::from_usize(n)
                            - sum_dxhat[c]
                            - xhat_c[(i, c)] * sum_dxhat_xhat[c];
                        dx[(i, c)] = term * inv_n * inv_std[c];
                    }
                }
                dx.into_dyn()
            });
            let dgamma = parents[1]
                .needs_grad()
                .then(|| (&g2 * &xhat_c).sum_axis(Axis(0)).into_dyn());
            let dbeta = parents[2]
                .needs_grad()
                .then(|| g2.sum_axis(Axis(0)).into_dyn());
            vec![dx, dgamma, dbeta]
        }),
    );
    (out, mean, var)
}

/// Eval-mode batch norm using fixed statistics.
pub fn batchnorm1d_eval<S: Scalar>(
    x: &Var<S>,
    gamma: &Var<S>,
    beta: &Var<S>,
    running_mean: &Array1<S>,
    running_var: &Array1<S>,
    eps: S,
) -> Var<S> {
    let inv_std = running_var.mapv(|v| (v + eps).sqrt().recip());
    let mean = running_mean.clone();
    let value = {
        let xv = x.value();
        let x2 = xv.view().into_dimensionality::<ndarray::Ix2>().expect("bn: rank");
        let xhat = (&x2 - &mean) * &inv_std;
        let gv = gamma.value();
        let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let bv = beta.value();
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        (&xhat * &g1 + &b1).into_dyn()
    };
    let inv_std_c = inv_std.clone();
    let mean_c = mean;
    Var::new_op(
        value,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, parents| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let gv = parents[1].value();
            let gamma1 = gv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let dx = parents[0]
                .needs_grad()
                .then(|| ((&g2 * &gamma1) * &inv_std_c).into_dyn());
            let dgamma = parents[1].needs_grad().then(|| {
                let xv = parents[0].value();
                let x2 = xv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let xhat = (&x2 - &mean_c) * &inv_std_c;
                (&g2 * &xhat).sum_axis(Axis(0)).into_dyn()
            });
            let dbeta = parents[2]
                .needs_grad()
                .then(|| g2.sum_axis(Axis(0)).into_dyn());
            vec![dx, dgamma, dbeta]
        }),
    )
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Probability floor applied inside the pixel loss log.
pub const PROB_FLOOR: f64 = 1e-7;

/// Per-pixel two-class focal loss over `(n, 2, h, w)` logits against binary
/// `(n, h, w)` targets, reduced by mean. `alpha = None` weights both classes
/// by one, so `gamma = 0` reduces to plain cross-entropy.
pub fn pixel_focal_loss<S: Scalar>(
    logits: &Var<S>,
    targets: &ndarray::Array3<u8>,
    alpha_anomalous: Option<S>,
    gamma: S,
) -> Var<S> {
    let floor = S::from_f64(PROB_FLOOR);
    let one = S::one();
    let (value, cache) = {
        let lv = logits.value();
        let l4 = lv.view().into_dimensionality::<ndarray::Ix4>().expect("focal: rank");
        let (n, ch, h, w) = l4.dim();
        assert_eq!(ch, 2, "focal: logits must have 2 channels");
        assert_eq!(targets.dim(), (n, h, w), "focal: target shape");
        let mut total = S::zero();
        // p0/p1 probabilities cached for the backward pass
        let mut probs = Array4::<S>::zeros((n, 2, h, w));
        for ni in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let z0 = l4[(ni, 0, i, j)];
                    let z1 = l4[(ni, 1, i, j)];
                    let m = if z0 > z1 { z0 } else { z1 };
                    let e0 = (z0 - m).exp();
                    let e1 = (z1 - m).exp();
                    let denom = e0 + e1;
                    let p0 = e0 / denom;
                    let p1 = e1 / denom;
                    probs[(ni, 0, i, j)] = p0;
                    probs[(ni, 1, i, j)] = p1;
                    let t = targets[(ni, i, j)];
                    debug_assert!(t <= 1, "focal: non-binary target");
                    let (pt, at) = if t == 1 {
                        (p1, alpha_anomalous.unwrap_or(one))
                    } else {
                        (p0, alpha_anomalous.map(|a| one - a).unwrap_or(one))
                    };
                    let pc = if pt > floor { pt } else { floor };
                    total += -(at * (one - pt).powf(gamma) * pc.ln());
                }
            }
        }
        let count = S::from_usize(n * h * w);
        (
            ArrayD::from_elem(IxDyn(&[]), total / count),
            probs,
        )
    };
    let targets_c = targets.clone();
    Var::new_op(
        value,
        vec![logits.clone()],
        Box::new(move |g, parents| {
            if !parents[0].needs_grad() {
                return vec![None];
            }
            let go = *g.iter().next().unwrap();
            let (n, _, h, w) = cache.dim();
            let count = S::from_usize(n * h * w);
            let scale = go / count;
            let mut dz = Array4::<S>::zeros((n, 2, h, w));
            for ni in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let t = targets_c[(ni, i, j)] as usize;
                        let pt = cache[(ni, t, i, j)];
                        let at = if t == 1 {
                            alpha_anomalous.unwrap_or(one)
                        } else {
                            alpha_anomalous.map(|a| one - a).unwrap_or(one)
                        };
                        let pc = if pt > floor { pt } else { floor };
                        // d loss / d p_t, respecting the log floor
                        let focal_term = if gamma > S::zero() {
                            -gamma * (one - pt).powf(gamma - one) * pc.ln()
                        } else {
                            S::zero()
                        };
                        let log_term = if pt > floor {
                            (one - pt).powf(gamma) / pt
                        } else {
                            S::zero()
                        };
                        let dl_dpt = -at * (focal_term + log_term);
                        for cls in 0..2 {
                            let delta = if cls == t { one } else { S::zero() };
                            let dpt_dz = pt * (delta - cache[(ni, cls, i, j)]);
                            dz[(ni, cls, i, j)] = scale * dl_dpt * dpt_dz;
                        }
                    }
                }
            }
            vec![Some(dz.into_dyn())]
        }),
    )
}

/// Negative cosine similarity averaged over rows: `mean_i -(p̂_i · ẑ_i)`.
///
/// `z` is treated as a constant; no gradient flows through it. 1-d inputs
/// are promoted to a single row. Zero-norm rows raise a numeric error.
pub fn cosine_loss<S: Scalar>(p: &Var<S>, z: &Var<S>) -> Result<Var<S>> {
    let (pv2, zv2) = {
        let pv = p.to_array();
        let zv = z.to_array();
        let promote = |a: ArrayD<S>| -> Array2<S> {
            match a.ndim() {
                1 => {
                    let d = a.len();
                    a.into_shape_with_order((1, d)).unwrap()
                }
                2 => a.into_dimensionality::<ndarray::Ix2>().unwrap(),
                _ => panic!("cosine_loss: rank must be 1 or 2"),
            }
        };
        (promote(pv), promote(zv))
    };
    if pv2.dim() != zv2.dim() {
        return Err(Error::argument("z", "cosine_loss: shape mismatch"));
    }
    let n = pv2.nrows();
    let inv_n = S::from_usize(n).recip();
    let mut total = S::zero();
    let mut p_norms = Array1::<S>::zeros(n);
    let mut z_hat = Array2::<S>::zeros(zv2.dim());
    let mut p_hat = Array2::<S>::zeros(pv2.dim());
    for i in 0..n {
        let prow = pv2.row(i);
        let zrow = zv2.row(i);
        let pn = prow.mapv(|v| v * v).sum().sqrt();
        let zn = zrow.mapv(|v| v * v).sum().sqrt();
        if pn == S::zero() || zn == S::zero() {
            return Err(Error::Numeric("cosine_loss: zero-norm input".into()));
        }
        p_norms[i] = pn;
        let ph = prow.mapv(|v| v / pn);
        let zh = zrow.mapv(|v| v / zn);
        total += -(ph.dot(&zh));
        p_hat.row_mut(i).assign(&ph);
        z_hat.row_mut(i).assign(&zh);
    }
    let value = ArrayD::from_elem(IxDyn(&[]), total * inv_n);
    let orig_p_shape = p.shape();
    Ok(Var::new_op(
        value,
        vec![p.clone()],
        Box::new(move |g, parents| {
            if !parents[0].needs_grad() {
                return vec![None];
            }
            let go = *g.iter().next().unwrap();
            let n = p_hat.nrows();
            let inv_n = S::from_usize(n).recip();
            let mut dp = Array2::<S>::zeros(p_hat.dim());
            for i in 0..n {
                let ph = p_hat.row(i);
                let zh = z_hat.row(i);
                let cos = ph.dot(&zh);
                let pn = p_norms[i];
                for d in 0..ph.len() {
                    dp[(i, d)] = -go * inv_n * (zh[d] - cos * ph[d]) / pn;
                }
            }
            let dp = dp.into_dyn();
            let dp = if orig_p_shape.len() == 1 {
                dp.into_shape_with_order(IxDyn(&orig_p_shape)).unwrap()
            } else {
                dp
            };
            vec![Some(dp)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array3};
    use rand::Rng;

    /// Central finite difference of a scalar-valued function of one leaf.
    fn finite_diff<F: Fn() -> f64>(param: &Var<f64>, f: F, eps: f64) -> ArrayD<f64> {
        let shape = param.shape();
        let mut grad = ArrayD::<f64>::zeros(IxDyn(&shape));
        let len = param.value().len();
        for idx in 0..len {
            let orig = param.value().as_slice().unwrap()[idx];
            param.update(|v| v.as_slice_mut().unwrap()[idx] = orig + eps);
            let f_plus = f();
            param.update(|v| v.as_slice_mut().unwrap()[idx] = orig - eps);
            let f_minus = f();
            param.update(|v| v.as_slice_mut().unwrap()[idx] = orig);
            grad.as_slice_mut().unwrap()[idx] = (f_plus - f_minus) / (2.0 * eps);
        }
        grad
    }

    fn assert_close(a: &ArrayD<f64>, b: &ArrayD<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                ((x - y) / denom).abs() < tol,
                "gradient mismatch: {x} vs {y}"
            );
        }
    }

    fn random_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = crate::rng::rng_from(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let x = Var::param(random_array(&[3, 4], 1));
        let w = Var::param(random_array(&[5, 4], 2));
        let b = Var::param(random_array(&[5], 3));
        let f = || {
            let y = linear(&x, &w, &b);
            mean_all(&relu(&y)).scalar()
        };
        let loss = mean_all(&relu(&linear(&x, &w, &b)));
        loss.backward();
        assert_close(&w.grad().unwrap(), &finite_diff(&w, f, 1e-6), 1e-6);
        assert_close(&x.grad().unwrap(), &finite_diff(&x, f, 1e-6), 1e-6);
        assert_close(&b.grad().unwrap(), &finite_diff(&b, f, 1e-6), 1e-6);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = Var::param(random_array(&[2, 3, 6, 6], 4));
        let w = Var::param(random_array(&[4, 3, 3, 3], 5));
        let b = Var::param(random_array(&[4], 6));
        let f = || {
            let y = conv2d(&x, &w, &b, 2, 1);
            mean_all(&relu(&y)).scalar()
        };
        let loss = mean_all(&relu(&conv2d(&x, &w, &b, 2, 1)));
        loss.backward();
        assert_close(&w.grad().unwrap(), &finite_diff(&w, f, 1e-6), 1e-5);
        assert_close(&x.grad().unwrap(), &finite_diff(&x, f, 1e-6), 1e-5);
        assert_close(&b.grad().unwrap(), &finite_diff(&b, f, 1e-6), 1e-5);
    }

    #[test]
    fn upsample_concat_pool_gradients() {
        let x = Var::param(random_array(&[1, 2, 3, 3], 7));
        let y = Var::param(random_array(&[1, 2, 6, 6], 8));
        let f = || {
            let up = upsample_nearest(&x, 2);
            let cat = concat_channels(&[&up, &y]);
            mean_all(&global_avg_pool(&relu(&cat))).scalar()
        };
        let loss = {
            let up = upsample_nearest(&x, 2);
            let cat = concat_channels(&[&up, &y]);
            mean_all(&global_avg_pool(&relu(&cat)))
        };
        loss.backward();
        assert_close(&x.grad().unwrap(), &finite_diff(&x, f, 1e-6), 1e-6);
        assert_close(&y.grad().unwrap(), &finite_diff(&y, f, 1e-6), 1e-6);
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let x = Var::param(random_array(&[6, 3], 9));
        let gamma = Var::param(random_array(&[3], 10).mapv(|v| v + 2.0));
        let beta = Var::param(random_array(&[3], 11));
        let f = || {
            let (y, _, _) = batchnorm1d_train(&x, &gamma, &beta, 1e-5);
            mean_all(&relu(&y)).scalar()
        };
        let (y, _, _) = batchnorm1d_train(&x, &gamma, &beta, 1e-5);
        let loss = mean_all(&relu(&y));
        loss.backward();
        assert_close(&x.grad().unwrap(), &finite_diff(&x, f, 1e-5), 1e-4);
        assert_close(&gamma.grad().unwrap(), &finite_diff(&gamma, f, 1e-5), 1e-5);
        assert_close(&beta.grad().unwrap(), &finite_diff(&beta, f, 1e-5), 1e-5);
    }

    #[test]
    fn focal_loss_gradients_match_finite_differences() {
        let logits = Var::param(random_array(&[1, 2, 4, 4], 12));
        let mut rng = crate::rng::rng_from(13);
        let targets = Array3::from_shape_fn((1, 4, 4), |_| rng.random_range(0..2u8));
        let tc = targets.clone();
        let f = move || pixel_focal_loss(&logits.clone(), &tc, Some(0.75), 2.0).scalar();
        let loss = pixel_focal_loss(&logits, &targets, Some(0.75), 2.0);
        loss.backward();
        assert_close(&logits.grad().unwrap(), &finite_diff(&logits, f, 1e-6), 1e-5);
    }

    #[test]
    fn cosine_loss_gradients_match_finite_differences() {
        let p = Var::param(random_array(&[3, 5], 14));
        let z = Var::constant(random_array(&[3, 5], 15));
        let zc = z.clone();
        let pc = p.clone();
        let f = move || cosine_loss(&pc, &zc).unwrap().scalar();
        let loss = cosine_loss(&p, &z).unwrap();
        loss.backward();
        assert_close(&p.grad().unwrap(), &finite_diff(&p, f, 1e-6), 1e-6);
    }

    #[test]
    fn cosine_loss_rejects_zero_norm() {
        let p = Var::constant(arr1(&[0.0f64, 0.0]).into_dyn());
        let z = Var::constant(arr1(&[1.0f64, 0.0]).into_dyn());
        assert!(cosine_loss(&p, &z).is_err());
        assert!(cosine_loss(&z, &p).is_err());
    }

    #[test]
    fn frozen_inputs_prune_the_graph() {
        let x = Var::constant(random_array(&[2, 3], 16));
        let w = Var::param(random_array(&[2, 3], 17));
        w.set_trainable(false);
        let y = mul(&x, &w);
        // both inputs frozen: result is a constant leaf
        assert!(!y.needs_grad());
        w.set_trainable(true);
        let y = mul(&x, &w);
        assert!(y.needs_grad());
        mean_all(&y).backward();
        assert!(w.grad().is_some());
        assert!(x.grad().is_none());
    }

    #[test]
    fn grad_flows_through_frozen_layer_to_earlier_params() {
        // mimics stage II: trainable extractor under a frozen head
        let x = Var::param(random_array(&[2, 3], 18));
        let w = Var::param(random_array(&[4, 3], 19));
        let b = Var::param(random_array(&[4], 20));
        w.set_trainable(false);
        b.set_trainable(false);
        let loss = mean_all(&relu(&linear(&x, &w, &b)));
        loss.backward();
        assert!(x.grad().is_some());
        assert!(w.grad().is_none());
        assert!(b.grad().is_none());
    }

    #[test]
    fn detach_blocks_gradients() {
        let x = Var::param(random_array(&[2, 2], 21));
        let d = x.detach();
        assert!(!d.needs_grad());
        let loss = mean_all(&mul(&d, &d));
        // graph is constant-only; backward on a reachable trainable path only
        assert!(!loss.needs_grad());
    }

    #[test]
    fn add_and_scale_compose() {
        let a = Var::param(arr2(&[[1.0f64, 2.0], [3.0, 4.0]]).into_dyn());
        let b = Var::param(arr2(&[[0.5f64, 0.5], [0.5, 0.5]]).into_dyn());
        let y = add(&scale(&a, 2.0), &b);
        let loss = mean_all(&y);
        loss.backward();
        assert_eq!(loss.scalar(), (2.0 * (1.0 + 2.0 + 3.0 + 4.0) + 2.0) / 4.0);
        assert!(a
            .grad()
            .unwrap()
            .iter()
            .all(|&g| (g - 0.5).abs() < 1e-12));
    }
}
