//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] records one forward computation as a list of nodes, each
//! holding its value and a backward closure that scatters the incoming
//! gradient to its parents. [`Graph::backward`] walks the tape in reverse
//! creation order. Values are `f32` dynamic-dimensional arrays; every op
//! produces a standard-layout array so raw-slice access is always valid.
//!
//! Parameters enter the graph through [`Graph::param`], which caches one
//! leaf per `(tag, slot)` pair so that a parameter used several times in a
//! forward pass (e.g. a generator applied twice in a cycle loss)
//! accumulates its gradient at a single node.

use std::collections::HashMap;

use ndarray::{ArcArray, ArrayD, IxDyn};

use super::store::ParamStore;

/// Shared value tensor: cheap to clone into backward closures.
pub type Ten = ArcArray<f32, IxDyn>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&ArrayD<f32>, &mut GradSink)>;

struct Node {
    value: Ten,
    bw: Option<BackwardFn>,
}

/// Gradient accumulator indexed by node id.
pub struct GradSink {
    grads: Vec<Option<ArrayD<f32>>>,
}

impl GradSink {
    /// Accumulate `g` into the slot for node `id`.
    pub fn add(&mut self, id: usize, g: ArrayD<f32>) {
        match &mut self.grads[id] {
            Some(acc) => {
                let a = acc.as_slice_memory_order_mut().expect("grad layout");
                let b = g.as_slice_memory_order().expect("grad layout");
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<ArrayD<f32>>>,
    param_cache: HashMap<(u32, usize), Val>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, value: ArrayD<f32>, bw: Option<BackwardFn>) -> Val {
        self.nodes.push(Node {
            value: value.into_shared(),
            bw,
        });
        Val(self.nodes.len() - 1)
    }

    /// Leaf node with no gradient flow upstream (network inputs, detached
    /// values, constants).
    pub fn input(&mut self, value: ArrayD<f32>) -> Val {
        self.push(value, None)
    }

    /// Re-enter a value already on the tape as a fresh leaf, blocking
    /// gradient flow into whatever produced it.
    pub fn detach(&mut self, v: Val) -> Val {
        let value = self.value(v).to_owned();
        self.input(value)
    }

    /// Leaf bound to a parameter slot. Cached per `(tag, slot)` so repeated
    /// uses share one node.
    pub fn param(&mut self, tag: u32, store: &ParamStore, slot: usize) -> Val {
        if let Some(v) = self.param_cache.get(&(tag, slot)) {
            return *v;
        }
        self.nodes.push(Node {
            value: store.value(slot).clone(),
            bw: None,
        });
        let v = Val(self.nodes.len() - 1);
        self.param_cache.insert((tag, slot), v);
        v
    }

    pub fn value(&self, v: Val) -> &Ten {
        &self.nodes[v.0].value
    }

    /// Scalar payload of a 0-d (or single-element) node.
    pub fn scalar(&self, v: Val) -> f32 {
        let t = self.value(v);
        debug_assert!(t.len() == 1);
        t.as_slice_memory_order().unwrap()[0]
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Run reverse-mode accumulation from `loss` (a single-element node).
    /// Gradients of leaf nodes (inputs and parameters) are retained and can
    /// be read with [`Graph::grad`]; intermediate gradients are freed as the
    /// sweep passes them.
    pub fn backward(&mut self, loss: Val) {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward expects a scalar loss node"
        );
        let n = self.nodes.len();
        let mut sink = GradSink {
            grads: (0..n).map(|_| None).collect(),
        };
        sink.grads[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].value.raw_dim()));
        for id in (0..=loss.0).rev() {
            let Some(bw) = self.nodes[id].bw.take() else {
                continue; // leaf: keep its gradient
            };
            let Some(g) = sink.grads[id].take() else {
                continue; // no gradient reached this node
            };
            bw(&g, &mut sink);
        }
        self.grads = sink.grads;
    }

    /// Gradient of a leaf node after [`Graph::backward`].
    pub fn grad(&self, v: Val) -> Option<&ArrayD<f32>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Drain accumulated parameter gradients for one tag as
    /// `(slot, gradient)` pairs, sorted by slot for determinism.
    pub fn take_grads(&mut self, tag: u32) -> Vec<(usize, ArrayD<f32>)> {
        let mut keys: Vec<(usize, Val)> = self
            .param_cache
            .iter()
            .filter(|((t, _), _)| *t == tag)
            .map(|((_, slot), v)| (*slot, *v))
            .collect();
        keys.sort_by_key(|(slot, _)| *slot);
        keys.into_iter()
            .filter_map(|(slot, v)| self.grads[v.0].take().map(|g| (slot, g)))
            .collect()
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Val, b: Val) -> Val {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let out = &*ta + &*tb;
        let (ia, ib) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(ia, g.clone());
                sink.add(ib, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Val {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        assert_eq!(ta.shape(), tb.shape(), "sub: shape mismatch");
        let out = &*ta - &*tb;
        let (ia, ib) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(ia, g.clone());
                sink.add(ib, g.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Val {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let out = &*ta * &*tb;
        let (ia, ib) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(ia, g * &*tb);
                sink.add(ib, g * &*ta);
            })),
        )
    }

    /// Elementwise add with `b` broadcast against `a`. `b` must have the
    /// same rank with each dimension equal to `a`'s or 1.
    pub fn add_bc(&mut self, a: Val, b: Val) -> Val {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let bshape: Vec<usize> = tb.shape().to_vec();
        assert_eq!(ta.ndim(), tb.ndim(), "add_bc: rank mismatch");
        let out = &*ta + &tb.broadcast(ta.raw_dim()).expect("add_bc: broadcast");
        let (ia, ib) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(ia, g.clone());
                sink.add(ib, reduce_to_shape(g, &bshape));
            })),
        )
    }

    /// Elementwise multiply with `b` broadcast against `a` (same rank rule
    /// as [`Graph::add_bc`]).
    pub fn mul_bc(&mut self, a: Val, b: Val) -> Val {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let bshape: Vec<usize> = tb.shape().to_vec();
        assert_eq!(ta.ndim(), tb.ndim(), "mul_bc: rank mismatch");
        let out = &*ta * &tb.broadcast(ta.raw_dim()).expect("mul_bc: broadcast");
        let (ia, ib) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gb = g * &tb.broadcast(g.raw_dim()).unwrap();
                sink.add(ia, gb);
                let ga = g * &*ta;
                sink.add(ib, reduce_to_shape(&ga, &bshape));
            })),
        )
    }

    pub fn scale(&mut self, a: Val, c: f32) -> Val {
        let ta = self.value(a).clone();
        let out = ta.mapv(|x| x * c);
        let ia = a.0;
        self.push(
            out,
            Some(Box::new(move |g, sink| sink.add(ia, g.mapv(|x| x * c)))),
        )
    }

    pub fn add_scalar(&mut self, a: Val, c: f32) -> Val {
        let ta = self.value(a).clone();
        let out = ta.mapv(|x| x + c);
        let ia = a.0;
        self.push(out, Some(Box::new(move |g, sink| sink.add(ia, g.clone()))))
    }

    pub fn relu(&mut self, a: Val) -> Val {
        let ta = self.value(a).clone();
        let out = ta.mapv(|x| x.max(0.0));
        let ia = a.0;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dg = g.clone();
                let d = dg.as_slice_memory_order_mut().unwrap();
                let x = ta.as_slice_memory_order().unwrap();
                for (di, xi) in d.iter_mut().zip(x) {
                    if *xi <= 0.0 {
                        *di = 0.0;
                    }
                }
                sink.add(ia, dg);
            })),
        )
    }

    pub fn leaky_relu(&mut self, a: Val, slope: f32) -> Val {
        let ta = self.value(a).clone();
        let out = ta.mapv(|x| if x > 0.0 { x } else { slope * x });
        let ia = a.0;
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dg = g.clone();
                let d = dg.as_slice_memory_order_mut().unwrap();
                let x = ta.as_slice_memory_order().unwrap();
                for (di, xi) in d.iter_mut().zip(x) {
                    if *xi <= 0.0 {
                        *di *= slope;
                    }
                }
                sink.add(ia, dg);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Val) -> Val {
        let ta = self.value(a).clone();
        let out = ta.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let ia = a.0;
        let y = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dg = g.clone();
                let d = dg.as_slice_memory_order_mut().unwrap();
                let ys = y.as_slice_memory_order().unwrap();
                for (di, yi) in d.iter_mut().zip(ys) {
                    *di *= yi * (1.0 - yi);
                }
                sink.add(ia, dg);
            })),
        )
    }

    pub fn tanh(&mut self, a: Val) -> Val {
        let ta = self.value(a).clone();
        let out = ta.mapv(f32::tanh);
        let ia = a.0;
        let y = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dg = g.clone();
                let d = dg.as_slice_memory_order_mut().unwrap();
                let ys = y.as_slice_memory_order().unwrap();
                for (di, yi) in d.iter_mut().zip(ys) {
                    *di *= 1.0 - yi * yi;
                }
                sink.add(ia, dg);
            })),
        )
    }

    // ---- reductions and losses ------------------------------------------

    pub fn mean_all(&mut self, a: Val) -> Val {
        let ta = self.value(a).clone();
        let n = ta.len() as f32;
        let m = ta.sum() / n;
        let ia = a.0;
        let shape = ta.raw_dim();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), m),
            Some(Box::new(move |g, sink| {
                let s = g.as_slice_memory_order().unwrap()[0] / n;
                sink.add(ia, ArrayD::from_elem(shape.clone(), s));
            })),
        )
    }

    pub fn sum_all(&mut self, a: Val) -> Val {
        let ta = self.value(a).clone();
        let s = ta.sum();
        let ia = a.0;
        let shape = ta.raw_dim();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            Some(Box::new(move |g, sink| {
                let s = g.as_slice_memory_order().unwrap()[0];
                sink.add(ia, ArrayD::from_elem(shape.clone(), s));
            })),
        )
    }

    /// Mean squared deviation from a constant target: `mean((a - c)^2)`.
    pub fn mse_const(&mut self, a: Val, c: f32) -> Val {
        let ta = self.value(a).clone();
        let n = ta.len() as f32;
        let loss = ta.iter().map(|x| (x - c) * (x - c)).sum::<f32>() / n;
        let ia = a.0;
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Some(Box::new(move |g, sink| {
                let s = g.as_slice_memory_order().unwrap()[0];
                sink.add(ia, ta.mapv(|x| s * 2.0 * (x - c) / n));
            })),
        )
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Val, b: Val) -> Val {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        assert_eq!(ta.shape(), tb.shape(), "mse: shape mismatch");
        let n = ta.len() as f32;
        let loss = ta
            .iter()
            .zip(tb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f32>()
            / n;
        let (ia, ib) = (a.0, b.0);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Some(Box::new(move |g, sink| {
                let s = g.as_slice_memory_order().unwrap()[0];
                let d: ArrayD<f32> = (&*ta - &*tb).mapv(|x| s * 2.0 * x / n);
                sink.add(ia, d.clone());
                sink.add(ib, d.mapv(|x| -x));
            })),
        )
    }

    // ---- shape ops -------------------------------------------------------

    pub fn reshape(&mut self, a: Val, dims: &[usize]) -> Val {
        let ta = self.value(a).clone();
        assert_eq!(
            ta.len(),
            dims.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let out = reshaped(&ta, dims);
        let ia = a.0;
        let orig: Vec<usize> = ta.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(ia, reshaped_owned(g.clone(), &orig));
            })),
        )
    }

    /// Materialized axis permutation (output is standard layout).
    pub fn permute(&mut self, a: Val, axes: &[usize]) -> Val {
        let ta = self.value(a).clone();
        let out = ta
            .to_owned()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let ia = a.0;
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let back = g
                    .clone()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                sink.add(ia, back);
            })),
        )
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat_axis1(&mut self, parts: &[Val]) -> Val {
        assert!(!parts.is_empty());
        let tensors: Vec<Ten> = parts.iter().map(|v| self.value(*v).clone()).collect();
        let views: Vec<_> = tensors.iter().map(|t| t.view()).collect();
        let out = ndarray::concatenate(ndarray::Axis(1), &views)
            .expect("concat_axis1: incompatible shapes")
            .as_standard_layout()
            .to_owned();
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let widths: Vec<usize> = tensors.iter().map(|t| t.shape()[1]).collect();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut start = 0usize;
                for (id, w) in ids.iter().zip(&widths) {
                    let sl = g
                        .slice_axis(ndarray::Axis(1), ndarray::Slice::from(start..start + w))
                        .as_standard_layout()
                        .to_owned();
                    sink.add(*id, sl);
                    start += w;
                }
            })),
        )
    }

    /// Select one channel from a `(B, C, ...)` tensor, dropping axis 1.
    pub fn select_channel(&mut self, a: Val, channel: usize) -> Val {
        let ta = self.value(a).clone();
        let out = ta
            .index_axis(ndarray::Axis(1), channel)
            .as_standard_layout()
            .to_owned();
        let ia = a.0;
        let shape: Vec<usize> = ta.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = ArrayD::<f32>::zeros(IxDyn(&shape));
                dx.index_axis_mut(ndarray::Axis(1), channel).assign(g);
                sink.add(ia, dx);
            })),
        )
    }

    // ---- linear algebra ---------------------------------------------------

    /// Affine map on rows: `x (N, Din) · w (Din, Dout) + b (Dout)`.
    pub fn linear(&mut self, x: Val, w: Val, b: Val) -> Val {
        let (tx, tw, tb) = (
            self.value(x).clone(),
            self.value(w).clone(),
            self.value(b).clone(),
        );
        let x2 = tx.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let w2 = tw.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut y = x2.dot(&w2);
        let bv = tb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for mut row in y.rows_mut() {
            row += &bv;
        }
        let (ix, iw, ib) = (x.0, w.0, b.0);
        self.push(
            y.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let x2 = tx.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let w2 = tw.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                sink.add(ix, g2.dot(&w2.t()).into_dyn());
                sink.add(iw, x2.t().dot(&g2).into_dyn());
                sink.add(ib, g2.sum_axis(ndarray::Axis(0)).into_dyn());
            })),
        )
    }

    /// Batched matrix product: `a (N, M, K) · b (N, K, P) -> (N, M, P)`.
    pub fn matmul_batched(&mut self, a: Val, b: Val) -> Val {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1]);
        let (n, m, p) = (sa[0], sa[1], sb[2]);
        let mut out = ArrayD::<f32>::zeros(IxDyn(&[n, m, p]));
        for i in 0..n {
            let ai = ta
                .index_axis(ndarray::Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let bi = tb
                .index_axis(ndarray::Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            out.index_axis_mut(ndarray::Axis(0), i).assign(&ai.dot(&bi));
        }
        let (ia, ib) = (a.0, b.0);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let n = g.shape()[0];
                let mut da = ArrayD::<f32>::zeros(ta.raw_dim());
                let mut db = ArrayD::<f32>::zeros(tb.raw_dim());
                for i in 0..n {
                    let gi = g
                        .index_axis(ndarray::Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    let ai = ta
                        .index_axis(ndarray::Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    let bi = tb
                        .index_axis(ndarray::Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    da.index_axis_mut(ndarray::Axis(0), i)
                        .assign(&gi.dot(&bi.t()));
                    db.index_axis_mut(ndarray::Axis(0), i)
                        .assign(&ai.t().dot(&gi));
                }
                sink.add(ia, da);
                sink.add(ib, db);
            })),
        )
    }

    pub fn transpose_last2(&mut self, a: Val) -> Val {
        let nd = self.value(a).ndim();
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(a, &axes)
    }

    // ---- softmax family ----------------------------------------------------

    /// Softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, a: Val) -> Val {
        let ta = self.value(a).clone();
        let d = *ta.shape().last().unwrap();
        let mut out = ta.to_owned();
        {
            let s = out.as_slice_memory_order_mut().unwrap();
            for row in s.chunks_mut(d) {
                softmax_row(row);
            }
        }
        let ia = a.0;
        let y = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                let dxs = dx.as_slice_memory_order_mut().unwrap();
                let ys = y.as_slice_memory_order().unwrap();
                for (grow, yrow) in dxs.chunks_mut(d).zip(ys.chunks(d)) {
                    let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gi, yi) in grow.iter_mut().zip(yrow) {
                        *gi = yi * (*gi - dot);
                    }
                }
                sink.add(ia, dx);
            })),
        )
    }

    /// Softmax over axis 1 of a `(B, C, ...)` tensor.
    pub fn softmax_axis1(&mut self, a: Val) -> Val {
        let ta = self.value(a).clone();
        let (b, c, r) = split_bcr(ta.shape());
        let mut out = ta.to_owned();
        {
            let s = out.as_slice_memory_order_mut().unwrap();
            for bi in 0..b {
                for ri in 0..r {
                    softmax_lane(s, bi, c, r, ri);
                }
            }
        }
        let ia = a.0;
        let y = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                let dxs = dx.as_slice_memory_order_mut().unwrap();
                let ys = y.as_slice_memory_order().unwrap();
                for bi in 0..b {
                    for ri in 0..r {
                        let base = bi * c * r + ri;
                        let mut dot = 0.0f32;
                        for ci in 0..c {
                            let k = base + ci * r;
                            dot += dxs[k] * ys[k];
                        }
                        for ci in 0..c {
                            let k = base + ci * r;
                            dxs[k] = ys[k] * (dxs[k] - dot);
                        }
                    }
                }
                sink.add(ia, dx);
            })),
        )
    }

    /// Log-softmax over axis 1 of a `(B, C, ...)` tensor.
    pub fn log_softmax_axis1(&mut self, a: Val) -> Val {
        let ta = self.value(a).clone();
        let (b, c, r) = split_bcr(ta.shape());
        let mut out = ta.to_owned();
        {
            let s = out.as_slice_memory_order_mut().unwrap();
            for bi in 0..b {
                for ri in 0..r {
                    let base = bi * c * r + ri;
                    let mut mx = f32::NEG_INFINITY;
                    for ci in 0..c {
                        mx = mx.max(s[base + ci * r]);
                    }
                    let mut z = 0.0f32;
                    for ci in 0..c {
                        z += (s[base + ci * r] - mx).exp();
                    }
                    let lz = z.ln() + mx;
                    for ci in 0..c {
                        s[base + ci * r] -= lz;
                    }
                }
            }
        }
        let ia = a.0;
        let logp = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dx = g.clone();
                let dxs = dx.as_slice_memory_order_mut().unwrap();
                let lp = logp.as_slice_memory_order().unwrap();
                for bi in 0..b {
                    for ri in 0..r {
                        let base = bi * c * r + ri;
                        let mut gsum = 0.0f32;
                        for ci in 0..c {
                            gsum += dxs[base + ci * r];
                        }
                        for ci in 0..c {
                            let k = base + ci * r;
                            dxs[k] -= lp[k].exp() * gsum;
                        }
                    }
                }
                sink.add(ia, dx);
            })),
        )
    }

    /// Mean negative log-likelihood of integer targets under `log_p`
    /// (`(B, C, ...)` against targets of shape `(B, ...)` holding class
    /// indices as floats).
    pub fn nll_target(&mut self, log_p: Val, target: &ArrayD<f32>) -> Val {
        let tl = self.value(log_p).clone();
        let (b, c, r) = split_bcr(tl.shape());
        assert_eq!(target.len(), b * r, "nll_target: target size mismatch");
        let lp = tl.as_slice_memory_order().unwrap();
        let tg: Vec<usize> = target
            .as_slice_memory_order()
            .unwrap()
            .iter()
            .map(|x| {
                let k = x.round() as usize;
                assert!(k < c, "nll_target: class index out of range");
                k
            })
            .collect();
        let n = (b * r) as f32;
        let mut loss = 0.0f32;
        for bi in 0..b {
            for ri in 0..r {
                let k = tg[bi * r + ri];
                loss -= lp[bi * c * r + k * r + ri];
            }
        }
        loss /= n;
        let ia = log_p.0;
        let shape = tl.raw_dim();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Some(Box::new(move |g, sink| {
                let s = g.as_slice_memory_order().unwrap()[0];
                let mut dx = ArrayD::<f32>::zeros(shape.clone());
                let d = dx.as_slice_memory_order_mut().unwrap();
                for bi in 0..b {
                    for ri in 0..r {
                        let k = tg[bi * r + ri];
                        d[bi * c * r + k * r + ri] = -s / n;
                    }
                }
                sink.add(ia, dx);
            })),
        )
    }

    /// Soft Dice loss `1 - 2·Σ(p·g) / (Σp + Σg + eps)` with sums pooled over
    /// the whole tensor. `p` holds foreground probabilities, `target` the
    /// binary reference.
    pub fn dice_loss(&mut self, p: Val, target: &ArrayD<f32>, eps: f32) -> Val {
        let tp = self.value(p).clone();
        assert_eq!(tp.shape(), target.shape(), "dice_loss: shape mismatch");
        let ps = tp.as_slice_memory_order().unwrap();
        let gs = target.as_slice_memory_order().unwrap();
        let mut inter = 0.0f32;
        let mut psum = 0.0f32;
        let mut gsum = 0.0f32;
        for (pi, gi) in ps.iter().zip(gs) {
            inter += pi * gi;
            psum += pi;
            gsum += gi;
        }
        let num = 2.0 * inter;
        let den = psum + gsum + eps;
        let loss = 1.0 - num / den;
        let ia = p.0;
        let tgt = target.clone();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Some(Box::new(move |g, sink| {
                let s = g.as_slice_memory_order().unwrap()[0];
                let mut dx = tgt.clone();
                let d = dx.as_slice_memory_order_mut().unwrap();
                for di in d.iter_mut() {
                    *di = s * (num - 2.0 * *di * den) / (den * den);
                }
                sink.add(ia, dx);
            })),
        )
    }

    /// Class-weighted cross-entropy over a batch of logit rows:
    /// `mean_b w[label_b] · (-log softmax(logits_b)[label_b])`.
    pub fn weighted_ce(&mut self, logits: Val, labels: &[usize], weights: &[f32]) -> Val {
        let tl = self.value(logits).clone();
        let shape = tl.shape().to_vec();
        assert_eq!(shape.len(), 2, "weighted_ce: logits must be (B, C)");
        let (b, c) = (shape[0], shape[1]);
        assert_eq!(labels.len(), b);
        assert_eq!(weights.len(), c);
        let ls = tl.as_slice_memory_order().unwrap();
        let mut probs = vec![0.0f32; b * c];
        let mut loss = 0.0f32;
        for bi in 0..b {
            let row = &ls[bi * c..(bi + 1) * c];
            let p = &mut probs[bi * c..(bi + 1) * c];
            p.copy_from_slice(row);
            softmax_row(p);
            let l = labels[bi];
            assert!(l < c, "weighted_ce: label out of range");
            loss -= weights[l] * p[l].max(1e-30).ln();
        }
        loss /= b as f32;
        let ia = logits.0;
        let labels = labels.to_vec();
        let weights = weights.to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Some(Box::new(move |g, sink| {
                let s = g.as_slice_memory_order().unwrap()[0];
                let mut dx = ArrayD::<f32>::zeros(IxDyn(&[b, c]));
                let d = dx.as_slice_memory_order_mut().unwrap();
                for bi in 0..b {
                    let l = labels[bi];
                    let w = weights[l];
                    for ci in 0..c {
                        let p = probs[bi * c + ci];
                        let ind = if ci == l { 1.0 } else { 0.0 };
                        d[bi * c + ci] = s * w * (p - ind) / b as f32;
                    }
                }
                sink.add(ia, dx);
            })),
        )
    }
}

/// Softmax one contiguous row in place.
fn softmax_row(row: &mut [f32]) {
    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut z = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn softmax_lane(s: &mut [f32], b: usize, c: usize, r: usize, ri: usize) {
    let base = b * c * r + ri;
    let mut mx = f32::NEG_INFINITY;
    for ci in 0..c {
        mx = mx.max(s[base + ci * r]);
    }
    let mut z = 0.0f32;
    for ci in 0..c {
        let k = base + ci * r;
        s[k] = (s[k] - mx).exp();
        z += s[k];
    }
    for ci in 0..c {
        s[base + ci * r] /= z;
    }
}

/// View a `(B, C, ...)` shape as `(batch, channels, rest)`.
pub(crate) fn split_bcr(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected at least (B, C) dimensions");
    let b = shape[0];
    let c = shape[1];
    let r: usize = shape[2..].iter().product::<usize>().max(1);
    (b, c, r)
}

/// Sum `g` down to `shape` (same rank, broadcast dims of size 1).
fn reduce_to_shape(g: &ArrayD<f32>, shape: &[usize]) -> ArrayD<f32> {
    let mut out = g.to_owned();
    for (ax, (&gd, &sd)) in g.shape().iter().zip(shape).enumerate() {
        if sd == 1 && gd != 1 {
            out = out
                .sum_axis(ndarray::Axis(ax))
                .insert_axis(ndarray::Axis(ax));
        }
    }
    out.as_standard_layout().to_owned()
}

fn reshaped(t: &Ten, dims: &[usize]) -> ArrayD<f32> {
    t.to_owned()
        .into_shape_with_order(IxDyn(dims))
        .expect("reshape: non-contiguous source")
}

fn reshaped_owned(t: ArrayD<f32>, dims: &[usize]) -> ArrayD<f32> {
    t.as_standard_layout()
        .to_owned()
        .into_shape_with_order(IxDyn(dims))
        .expect("reshape: non-contiguous source")
}
