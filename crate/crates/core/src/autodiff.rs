//! Tape-based reverse-mode differentiation over single-sample tensors.
//!
//! A [`Graph`] is built for one sample at a time and is not shared across
//! threads; batch parallelism happens one level up (see [`crate::parallel`]).
//! Image activations are `[C, H, W]`, token matrices are `[rows, cols]`.

use std::cell::RefCell;

use crate::tensor::{gemm, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Gradients of leaf variables produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn op<'g, F>(&'g self, value: Tensor, parents: &[Var<'g>], backward: F) -> Var<'g>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
        })
    }

    /// Reverse pass from a scalar root with unit seed.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let seed = {
            let nodes = self.nodes.borrow();
            Tensor::full(nodes[root.id].value.shape(), 1.0)
        };
        self.backward_with(root, seed)
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `root`) back to
    /// every leaf. The graph can be reused for further reverse passes.
    pub fn backward_with(&self, root: Var<'_>, seed: Tensor) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.shape(), seed.shape(), "seed shape");
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let flags: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &flags);
            for ((&p, pg), &needed) in node.parents.iter().zip(parent_grads).zip(&flags) {
                if !needed {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Softmax with max-subtraction.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.h_out * g.w_out;
    let mut cols = vec![0.0; g.c_in * g.k * g.k * p];
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.h_out * g.w_out;
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Bin boundaries of adaptive average pooling (floor start, ceil end).
pub(crate) fn adaptive_bins(size: usize, k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .map(|i| ((i * size) / k, ((i + 1) * size).div_ceil(k)))
        .collect()
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = a.zip_map(&b, |x, y| x + y);
        self.graph
            .op(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = a.zip_map(&b, |x, y| x - y);
        self.graph
            .op(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.scale(-1.0))])
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph.op(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |u, v| u * v)),
                need[1].then(|| g.zip_map(&a, |u, v| u * v)),
            ]
        })
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let out = self.value().scale(c);
        self.graph.op(out, &[self], move |g, _| vec![Some(g.scale(c))])
    }

    pub fn silu(self) -> Var<'g> {
        let x = self.value();
        let out = x.map(|v| v * sigmoid(v));
        self.graph.op(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |u, v| {
                let s = sigmoid(v);
                u * s * (1.0 + v * (1.0 - s))
            }))]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = x.reshape(shape);
        self.graph.op(out, &[self], move |g, _| vec![Some(g.reshape(&old))])
    }

    /// 2-D convolution of a `[C_in, H, W]` map with `[C_out, C_in, k, k]`
    /// weights and optional `[C_out]` bias, zero padding.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, pad: usize) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape(), w.shape());
        assert_eq!(xs.len(), 3, "conv2d input must be [C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O,I,k,k]");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let geom = ConvGeom {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            k: ws[2],
            stride,
            pad,
            h_out: (xs[1] + 2 * pad - ws[2]) / stride + 1,
            w_out: (xs[2] + 2 * pad - ws[2]) / stride + 1,
        };
        let c_out = ws[0];
        let ckk = geom.c_in * geom.k * geom.k;
        let p = geom.h_out * geom.w_out;
        let mut out = vec![0.0; c_out * p];
        if let Some(b) = &bias {
            let b = b.value();
            assert_eq!(b.shape(), [c_out], "conv2d bias shape");
            for (o, &bv) in b.data().iter().enumerate() {
                out[o * p..(o + 1) * p].fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if geom.is_pointwise() {
            gemm(c_out, ckk, p, w.data(), false, x.data(), false, beta, &mut out);
        } else {
            let cols = im2col(x.data(), &geom);
            gemm(c_out, ckk, p, w.data(), false, &cols, false, beta, &mut out);
        }
        let out = Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let in_shape = xs.to_vec();
        let w_shape = ws.to_vec();
        self.graph.op(out, &parents, move |g, need| {
            let gd = g.data();
            let dx = need[0].then(|| {
                let mut dcols = vec![0.0; ckk * p];
                gemm(ckk, c_out, p, w.data(), true, gd, false, 0.0, &mut dcols);
                let dx = if geom.is_pointwise() { dcols } else { col2im(&dcols, &geom) };
                Tensor::from_parts(in_shape.clone(), dx)
            });
            let dw = need[1].then(|| {
                let mut dw = vec![0.0; c_out * ckk];
                if geom.is_pointwise() {
                    gemm(c_out, p, ckk, gd, false, x.data(), true, 0.0, &mut dw);
                } else {
                    let cols = im2col(x.data(), &geom);
                    gemm(c_out, p, ckk, gd, false, &cols, true, 0.0, &mut dw);
                }
                Tensor::from_parts(w_shape.clone(), dw)
            });
            let mut grads = vec![dx, dw];
            if need.len() == 3 {
                grads.push(need[2].then(|| {
                    Tensor::from_parts(vec![c_out], gd.chunks(p).map(|r| r.iter().sum()).collect())
                }));
            }
            grads
        })
    }

    /// Group normalization of a `[C, H, W]` map with per-channel affine.
    pub fn group_norm(self, groups: usize, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Var<'g> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 3, "group_norm input must be [C,H,W]");
        let c = s[0];
        assert!(groups > 0 && c.is_multiple_of(groups), "group_norm: {c} channels, {groups} groups");
        let hw = s[1] * s[2];
        let per_group = (c / groups) * hw;
        let gam = gamma.value();
        let bet = beta.value();
        assert_eq!(gam.shape(), [c]);
        assert_eq!(bet.shape(), [c]);
        let xd = x.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; groups];
        for gi in 0..groups {
            let seg = &xd[gi * per_group..(gi + 1) * per_group];
            let mean = seg.iter().sum::<f64>() / per_group as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[gi] = is;
            for (o, v) in xhat[gi * per_group..(gi + 1) * per_group].iter_mut().zip(seg) {
                *o = (v - mean) * is;
            }
        }
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            let (gv, bv) = (gam.data()[ch], bet.data()[ch]);
            for i in ch * hw..(ch + 1) * hw {
                out[i] = gv * xhat[i] + bv;
            }
        }
        let out = Tensor::from_parts(s.clone(), out);
        self.graph.op(out, &[self, gamma, beta], move |g, need| {
            let gd = g.data();
            let gv = gam.data();
            let dx = need[0].then(|| {
                let mut dx = vec![0.0; gd.len()];
                for gi in 0..groups {
                    let range = gi * per_group..(gi + 1) * per_group;
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for i in range.clone() {
                        let d = gd[i] * gv[i / hw];
                        mean_dxhat += d;
                        mean_dxhat_xhat += d * xhat[i];
                    }
                    mean_dxhat /= per_group as f64;
                    mean_dxhat_xhat /= per_group as f64;
                    for i in range {
                        let d = gd[i] * gv[i / hw];
                        dx[i] = inv_std[gi] * (d - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                    }
                }
                Tensor::from_parts(s.clone(), dx)
            });
            let dgamma = need[1].then(|| {
                Tensor::from_parts(
                    vec![c],
                    (0..c)
                        .map(|ch| (ch * hw..(ch + 1) * hw).map(|i| gd[i] * xhat[i]).sum())
                        .collect(),
                )
            });
            let dbeta = need[2]
                .then(|| Tensor::from_parts(vec![c], gd.chunks(hw).map(|r| r.iter().sum()).collect()));
            vec![dx, dgamma, dbeta]
        })
    }

    /// `[C, H, W] + [C]` broadcast over the spatial axes.
    pub fn add_channel(self, v: Var<'g>) -> Var<'g> {
        let x = self.value();
        let b = v.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 3);
        assert_eq!(b.shape(), [s[0]], "add_channel shape mismatch");
        let hw = s[1] * s[2];
        let mut out = x.data().to_vec();
        for (ch, chunk) in out.chunks_mut(hw).enumerate() {
            let bv = b.data()[ch];
            chunk.iter_mut().for_each(|o| *o += bv);
        }
        let out = Tensor::from_parts(s.clone(), out);
        let c = s[0];
        self.graph.op(out, &[self, v], move |g, need| {
            vec![
                need[0].then(|| g.clone()),
                need[1].then(|| Tensor::from_parts(vec![c], g.data().chunks(hw).map(|r| r.iter().sum()).collect())),
            ]
        })
    }

    /// Affine map `W x + b` of a vector `[D]` with `W: [O, D]`, `b: [O]`.
    pub fn linear(self, weight: Var<'g>, bias: Var<'g>) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let d = x.len();
        let ws = w.shape().to_vec();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[1], d, "linear: weight expects {} inputs, got {d}", ws[1]);
        let o = ws[0];
        assert_eq!(b.shape(), [o], "linear bias shape");
        let mut out = b.data().to_vec();
        gemm(o, d, 1, w.data(), false, x.data(), false, 1.0, &mut out);
        let out = Tensor::from_parts(vec![o], out);
        let x_shape = x.shape().to_vec();
        self.graph.op(out, &[self, weight, bias], move |g, need| {
            let dx = need[0].then(|| {
                let mut dx = vec![0.0; d];
                gemm(d, o, 1, w.data(), true, g.data(), false, 0.0, &mut dx);
                Tensor::from_parts(x_shape.clone(), dx)
            });
            let dw = need[1].then(|| {
                let mut dw = vec![0.0; o * d];
                gemm(o, 1, d, g.data(), false, x.data(), false, 0.0, &mut dw);
                Tensor::from_parts(vec![o, d], dw)
            });
            vec![dx, dw, need[2].then(|| g.clone())]
        })
    }

    /// `[M, K] x [K, N]`.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
        let out = Tensor::from_parts(vec![m, n], out);
        self.graph.op(out, &[self, other], move |g, need| {
            let da = need[0].then(|| {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, b.data(), true, 0.0, &mut da);
                Tensor::from_parts(vec![m, k], da)
            });
            let db = need[1].then(|| {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g.data(), false, 0.0, &mut db);
                Tensor::from_parts(vec![k, n], db)
            });
            vec![da, db]
        })
    }

    pub fn transpose(self) -> Var<'g> {
        fn tr(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
            let mut t = vec![0.0; a.len()];
            for i in 0..rows {
                for j in 0..cols {
                    t[j * rows + i] = a[i * cols + j];
                }
            }
            t
        }
        let a = self.value();
        let s = a.shape().to_vec();
        assert_eq!(s.len(), 2);
        let (r, c) = (s[0], s[1]);
        let out = Tensor::from_parts(vec![c, r], tr(r, c, a.data()));
        self.graph
            .op(out, &[self], move |g, _| vec![Some(Tensor::from_parts(vec![r, c], tr(c, r, g.data())))])
    }

    /// Row-wise softmax of a `[M, N]` matrix.
    pub fn softmax_rows(self) -> Var<'g> {
        let a = self.value();
        let s = a.shape().to_vec();
        assert_eq!(s.len(), 2);
        let n = s[1];
        let y: Vec<f64> = a.data().chunks(n).flat_map(softmax).collect();
        let yt = Tensor::from_parts(s.clone(), y);
        let out = yt.clone();
        self.graph.op(out, &[self], move |g, _| {
            let mut dx = vec![0.0; yt.len()];
            for ((dr, yr), gr) in dx.chunks_mut(n).zip(yt.data().chunks(n)).zip(g.data().chunks(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - dot);
                }
            }
            vec![Some(Tensor::from_parts(s.clone(), dx))]
        })
    }

    /// `[M, N] + [N]` broadcast over rows.
    pub fn add_row_bias(self, bias: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = bias.value();
        let s = a.shape().to_vec();
        assert_eq!(s.len(), 2);
        let n = s[1];
        assert_eq!(b.shape(), [n], "add_row_bias shape");
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b.data()).for_each(|(o, bv)| *o += bv);
        }
        let out = Tensor::from_parts(s, out);
        self.graph.op(out, &[self, bias], move |g, need| {
            let db = need[1].then(|| {
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                Tensor::from_parts(vec![n], db)
            });
            vec![need[0].then(|| g.clone()), db]
        })
    }

    /// Rows `start..end` of a `[M, N]` matrix.
    pub fn slice_rows(self, start: usize, end: usize) -> Var<'g> {
        let a = self.value();
        let s = a.shape().to_vec();
        assert!(s.len() == 2 && start <= end && end <= s[0]);
        let n = s[1];
        let out = Tensor::from_parts(vec![end - start, n], a.data()[start * n..end * n].to_vec());
        self.graph.op(out, &[self], move |g, _| {
            let mut d = vec![0.0; s[0] * n];
            d[start * n..end * n].copy_from_slice(g.data());
            vec![Some(Tensor::from_parts(s.clone(), d))]
        })
    }

    /// Column-wise concatenation of `[M, N_i]` matrices.
    pub fn concat_cols(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty());
        let graph = parts[0].graph;
        let vals: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let m = vals[0].shape()[0];
        let widths: Vec<usize> = vals
            .iter()
            .map(|v| {
                assert_eq!(v.shape().len(), 2);
                assert_eq!(v.shape()[0], m, "concat_cols row mismatch");
                v.shape()[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (v, &w) in vals.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![m, total], out);
        graph.op(out, parts, move |g, need| {
            let gd = g.data();
            let mut offset = 0;
            widths
                .iter()
                .zip(need)
                .map(|(&w, &nd)| {
                    let start = offset;
                    offset += w;
                    nd.then(|| {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&gd[r * total + start..r * total + start + w]);
                        }
                        Tensor::from_parts(vec![m, w], d)
                    })
                })
                .collect()
        })
    }

    /// Concatenation along the leading axis (channels for `[C, H, W]`).
    pub fn concat0(self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        assert_eq!(sa[1..], sb[1..], "concat0 trailing shape mismatch");
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let mut out = a.data().to_vec();
        out.extend_from_slice(b.data());
        let out = Tensor::from_parts(shape, out);
        let split = a.len();
        self.graph.op(out, &[self, other], move |g, need| {
            let gd = g.data();
            vec![
                need[0].then(|| Tensor::from_parts(sa.clone(), gd[..split].to_vec())),
                need[1].then(|| Tensor::from_parts(sb.clone(), gd[split..].to_vec())),
            ]
        })
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample2(self) -> Var<'g> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = x.data()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::from_parts(vec![c, 2 * h, 2 * w], out);
        self.graph.op(out, &[self], move |g, _| {
            let mut d = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        d[(ch * h + y / 2) * w + xx / 2] += g.data()[(ch * 2 * h + y) * 2 * w + xx];
                    }
                }
            }
            vec![Some(Tensor::from_parts(s.clone(), d))]
        })
    }

    /// Adaptive average pooling of `[C, H, W]` to `[C, k, k]`. Requires
    /// `k <= H` and `k <= W` (checked by callers).
    pub fn adaptive_avg_pool(self, k: usize) -> Var<'g> {
        let x = self.value();
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(k >= 1 && k <= h && k <= w, "adaptive_avg_pool: k={k} for {h}x{w}");
        let rows = adaptive_bins(h, k);
        let cols = adaptive_bins(w, k);
        let mut out = vec![0.0; c * k * k];
        for ch in 0..c {
            for (i, &(y0, y1)) in rows.iter().enumerate() {
                for (j, &(x0, x1)) in cols.iter().enumerate() {
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += x.data()[(ch * h + y) * w + xx];
                        }
                    }
                    out[(ch * k + i) * k + j] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let out = Tensor::from_parts(vec![c, k, k], out);
        self.graph.op(out, &[self], move |g, _| {
            let mut d = vec![0.0; c * h * w];
            for ch in 0..c {
                for (i, &(y0, y1)) in rows.iter().enumerate() {
                    for (j, &(x0, x1)) in cols.iter().enumerate() {
                        let share = g.data()[(ch * k + i) * k + j] / ((y1 - y0) * (x1 - x0)) as f64;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                d[(ch * h + y) * w + xx] += share;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(s.clone(), d))]
        })
    }

    /// Mean over the rows of `[M, N]`, giving `[N]`.
    pub fn mean_rows(self) -> Var<'g> {
        let a = self.value();
        let s = a.shape().to_vec();
        assert_eq!(s.len(), 2);
        let (m, n) = (s[0], s[1]);
        let mut out = vec![0.0; n];
        for row in a.data().chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let out = Tensor::from_parts(vec![n], out);
        self.graph.op(out, &[self], move |g, _| {
            let mut d = Vec::with_capacity(m * n);
            for _ in 0..m {
                d.extend(g.data().iter().map(|v| v / m as f64));
            }
            vec![Some(Tensor::from_parts(s.clone(), d))]
        })
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.graph
            .op(out, &[self], move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))])
    }

    /// Mean squared error against a constant target.
    pub fn mse(self, target: &Tensor) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.shape(), target.shape(), "mse shape mismatch");
        let n = x.len() as f64;
        let diff = x.zip_map(target, |a, b| a - b);
        let out = Tensor::scalar(diff.data().iter().map(|d| d * d).sum::<f64>() / n);
        self.graph
            .op(out, &[self], move |g, _| vec![Some(diff.scale(2.0 * g.data()[0] / n))])
    }

    /// Softmax cross-entropy of a logit vector against class `label`.
    pub fn cross_entropy(self, label: usize) -> Var<'g> {
        let z = self.value();
        assert!(label < z.len(), "label {label} out of range");
        let loss = log_sum_exp(z.data()) - z.data()[label];
        let mut p = softmax(z.data());
        p[label] -= 1.0;
        let dz = Tensor::from_parts(z.shape().to_vec(), p);
        self.graph
            .op(Tensor::scalar(loss), &[self], move |g, _| vec![Some(dz.scale(g.data()[0]))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` at `x` against the graph gradient.
    fn check<F>(x: Tensor, f: F)
    where
        F: for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
    {
        let g = Graph::new();
        let v = g.leaf(x.clone());
        let out = f(&g, v);
        let grads = g.backward(out);
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let h = 1e-5;
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let g = Graph::new();
                let v = g.constant(xp);
                f(&g, v).value().data()[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "coord {i}: analytic {a}, numeric {numeric}");
        }
    }

    fn t(shape: &[usize], seed: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i as f64 + seed) * 1.7).sin()).collect()).unwrap()
    }

    #[test]
    fn conv_gradients() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
            check(t(&[2, 5, 5], 0.3), |g, x| {
                let w = g.constant(t(&[3, 2, k, k], 1.1));
                let b = g.constant(t(&[3], 2.0));
                x.conv2d(w, Some(b), stride, pad).mul(g.constant(t(&[3, 5usize.div_ceil(stride), 5usize.div_ceil(stride)], 4.0))).sum()
            });
            check(t(&[3, 2, k, k], 0.9), |g, w| {
                let x = g.constant(t(&[2, 5, 5], 0.3));
                x.conv2d(w, None, stride, pad).silu().sum()
            });
        }
    }

    #[test]
    fn group_norm_gradients() {
        let weights = t(&[4, 3, 3], 7.0);
        check(t(&[4, 3, 3], 0.1), move |g, x| {
            let gamma = g.constant(t(&[4], 1.0));
            let beta = g.constant(t(&[4], 2.0));
            x.group_norm(2, gamma, beta, 1e-5).mul(g.constant(weights.clone())).sum()
        });
        check(t(&[4], 0.5), |g, gamma| {
            let x = g.constant(t(&[4, 3, 3], 0.1));
            let beta = g.constant(t(&[4], 2.0));
            x.group_norm(4, gamma, beta, 1e-5).silu().sum()
        });
    }

    #[test]
    fn attention_style_chain_gradients() {
        check(t(&[3, 4], 0.2), |g, x| {
            let wk = g.constant(t(&[4, 4], 1.3));
            let q = x.matmul(wk);
            let scores = q.matmul(x.transpose()).scale(0.5).softmax_rows();
            let mixed = scores.matmul(x);
            let top = mixed.slice_rows(0, 2);
            let cat = Var::concat_cols(&[top, top.scale(2.0)]);
            let pooled = cat.mean_rows();
            pooled
                .linear(g.constant(t(&[2, 8], 0.4)), g.constant(t(&[2], 0.6)))
                .cross_entropy(1)
        });
    }

    #[test]
    fn spatial_op_gradients() {
        check(t(&[2, 3, 3], 0.0), |g, x| {
            let up = x.upsample2();
            let cat = up.concat0(up.scale(-0.5));
            let biased = cat.add_channel(g.constant(t(&[4], 3.0)));
            biased.adaptive_avg_pool(4).silu().reshape(&[4, 16]).add_row_bias(g.constant(t(&[16], 1.0))).mse(&t(&[4, 16], 9.0))
        });
    }

    #[test]
    fn adaptive_bins_cover_axis() {
        assert_eq!(adaptive_bins(5, 3), vec![(0, 2), (1, 4), (3, 5)]);
        assert_eq!(adaptive_bins(4, 4), vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        assert_eq!(adaptive_bins(4, 1), vec![(0, 4)]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.leaf(Tensor::scalar(3.0));
        let grads = g.backward(a.mul(b));
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[2.0]);
    }
}
