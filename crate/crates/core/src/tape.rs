//! Reverse-mode autodiff over dynamic-dimension arrays.
//!
//! A `Tape` records every operation as a node holding the forward value and
//! a backward closure that maps the output gradient to per-parent gradient
//! contributions. Nodes only reference earlier nodes, so one reverse sweep
//! in creation order is a valid topological backward pass.
//!
//! The op set is exactly what the diarization model needs: dense matmul,
//! batched matmul, elementwise arithmetic, the activations, layer/group
//! norm, softmax, time convolutions, row L2-normalization and the two
//! fused loss kernels. Every op's gradient is pinned by a finite-difference
//! test in this module.

use crate::numeric::Real;
use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};
use std::rc::Rc;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<F> = Box<dyn Fn(&ArrayD<F>) -> Vec<(Var, ArrayD<F>)>>;

struct Node<F: Real> {
    value: Rc<ArrayD<F>>,
    grad: Option<ArrayD<F>>,
    back: Option<BackFn<F>>,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn as2<F: Real>(a: &ArrayD<F>) -> Array2<F> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("2-d value")
        .to_owned()
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf. Whether its gradient is read afterwards is the
    /// caller's business; inputs and parameters use the same entry point.
    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> Rc<ArrayD<F>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    /// Gradient of the last `backward` target w.r.t. `v` (zeros if unused).
    pub fn grad(&self, v: Var) -> ArrayD<F> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => ArrayD::zeros(self.nodes[v.0].value.raw_dim()),
        }
    }

    fn push(&mut self, value: ArrayD<F>, back: Option<BackFn<F>>) -> Var {
        // Ops assume standard layout (they reshape freely); transposes and
        // axis-1 concatenations can produce other layouts, so fix it here.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node {
            value: Rc::new(value),
            grad: None,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> Rc<ArrayD<F>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    /// Reverse sweep seeding d(target)/d(target) = 1. `target` must be a
    /// single-element node (a loss).
    pub fn backward(&mut self, target: Var) {
        assert_eq!(
            self.nodes[target.0].value.len(),
            1,
            "backward target must be scalar"
        );
        let seed = ArrayD::ones(self.nodes[target.0].value.raw_dim());
        self.nodes[target.0].grad = Some(seed);
        for i in (0..self.nodes.len()).rev() {
            let Some(back) = self.nodes[i].back.take() else {
                continue;
            };
            let Some(mut g) = self.nodes[i].grad.clone() else {
                continue;
            };
            // Accumulated grads can inherit non-standard strides (e.g. from
            // a transpose backward); closures reshape, so standardize here.
            if !g.is_standard_layout() {
                g = g.as_standard_layout().into_owned();
            }
            for (parent, contrib) in back(&g) {
                match &mut self.nodes[parent.0].grad {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &*self.val(a) + &*self.val(b);
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a, g.clone()), (b, g.clone())]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = &*self.val(a) - &*self.val(b);
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a, g.clone()), (b, g.mapv(|x| -x))]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.val(a);
        let vb = self.val(b);
        let out = &*va * &*vb;
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a, g * &*vb), (b, g * &*va)]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kk = F::c(k);
        let out = self.val(a).mapv(|x| x * kk);
        self.push(
            out,
            Some(Box::new(move |g| vec![(a, g.mapv(|x| x * kk))])),
        )
    }

    /// Elementwise product with a non-differentiated constant
    /// (broadcastable to `a`'s shape).
    pub fn mul_const(&mut self, a: Var, c: ArrayD<F>) -> Var {
        let va = self.val(a);
        let cb = c
            .broadcast(va.raw_dim())
            .expect("mul_const broadcast")
            .to_owned();
        let out = &*va * &cb;
        self.push(out, Some(Box::new(move |g| vec![(a, g * &cb)])))
    }

    /// Broadcast-add a bias over the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let va = self.val(a);
        let vb = self.val(bias);
        let d = *va.shape().last().expect("non-scalar");
        assert_eq!(vb.len(), d, "bias length");
        let b1 = vb.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut out = (*va).clone();
        for mut row in out.rows_mut() {
            row += &b1;
        }
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut db = Array1::<F>::zeros(d);
                let g2 = g.view().into_shape_with_order((g.len() / d, d)).unwrap();
                for row in g2.rows() {
                    db += &row;
                }
                vec![(a, g.clone()), (bias, db.into_dyn())]
            })),
        )
    }

    // ---- linear algebra ----

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.val(a);
        let vb = self.val(b);
        let a2 = as2(&va);
        let b2 = as2(&vb);
        let out = a2.dot(&b2).into_dyn();
        self.push(
            out,
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let a2 = as2(&va);
                let b2 = as2(&vb);
                vec![
                    (a, g2.dot(&b2.t()).into_dyn()),
                    (b, a2.t().dot(&g2).into_dyn()),
                ]
            })),
        )
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let out = as2(&self.val(a)).t().to_owned().into_dyn();
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a, as2(g).t().to_owned().into_dyn())]
            })),
        )
    }

    /// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n].
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let va = self.val(a);
        let vb = self.val(b);
        let a3 = va.view().into_dimensionality::<Ix3>().expect("bmm lhs 3-d");
        let b3 = vb.view().into_dimensionality::<Ix3>().expect("bmm rhs 3-d");
        let (bs, m, _k) = a3.dim();
        let n = b3.dim().2;
        let mut out = ndarray::Array3::<F>::zeros((bs, m, n));
        for i in 0..bs {
            out.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = va.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = vb.view().into_dimensionality::<Ix3>().unwrap();
                let mut da = ArrayD::<F>::zeros(va.raw_dim());
                let mut db = ArrayD::<F>::zeros(vb.raw_dim());
                {
                    let mut da3 = da.view_mut().into_dimensionality::<Ix3>().unwrap();
                    let mut db3 = db.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for i in 0..g3.dim().0 {
                        let gi = g3.index_axis(Axis(0), i);
                        da3.index_axis_mut(Axis(0), i)
                            .assign(&gi.dot(&b3.index_axis(Axis(0), i).t()));
                        db3.index_axis_mut(Axis(0), i)
                            .assign(&a3.index_axis(Axis(0), i).t().dot(&gi));
                    }
                }
                vec![(a, da), (b, db)]
            })),
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = self.val(a);
        let old = va.shape().to_vec();
        let out = va
            .to_shape(IxDyn(shape))
            .expect("reshape size mismatch")
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |g| {
                vec![(a, g.to_shape(IxDyn(&old)).unwrap().to_owned())]
            })),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let va = self.val(a);
        let axes_v = axes.to_vec();
        let out = va
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut inverse = vec![0usize; axes_v.len()];
                for (i, &ax) in axes_v.iter().enumerate() {
                    inverse[ax] = i;
                }
                let back = g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                vec![(a, back)]
            })),
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let va = self.val(a);
        let vb = self.val(b);
        let a2 = as2(&va);
        let b2 = as2(&vb);
        let p = a2.ncols();
        let out = ndarray::concatenate(Axis(1), &[a2.view(), b2.view()])
            .unwrap()
            .into_dyn();
        self.push(
            out,
            Some(Box::new(move |g| {
                let g2 = as2(g);
                vec![
                    (a, g2.slice(ndarray::s![.., ..p]).to_owned().into_dyn()),
                    (b, g2.slice(ndarray::s![.., p..]).to_owned().into_dyn()),
                ]
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let va = self.val(a);
        let rows = va.shape()[0];
        let out = as2(&va)
            .slice(ndarray::s![lo..hi, ..])
            .to_owned()
            .into_dyn();
        let cols = va.shape()[1];
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut da = Array2::<F>::zeros((rows, cols));
                da.slice_mut(ndarray::s![lo..hi, ..]).assign(&as2(g));
                vec![(a, da.into_dyn())]
            })),
        )
    }

    /// Concatenate 2-D values along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let values: Vec<Rc<ArrayD<F>>> = parts.iter().map(|&p| self.val(p)).collect();
        let views: Vec<Array2<F>> = values.iter().map(|v| as2(v)).collect();
        let out = ndarray::concatenate(
            Axis(0),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .unwrap()
        .into_dyn();
        let splits: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
        let parts_v = parts.to_vec();
        self.push(
            out,
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let mut lo = 0;
                parts_v
                    .iter()
                    .zip(&splits)
                    .map(|(&p, &n)| {
                        let piece = g2.slice(ndarray::s![lo..lo + n, ..]).to_owned().into_dyn();
                        lo += n;
                        (p, piece)
                    })
                    .collect()
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let va = self.val(a);
        let full = va.shape()[1];
        let out = as2(&va)
            .slice(ndarray::s![.., lo..hi])
            .to_owned()
            .into_dyn();
        let rows = va.shape()[0];
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut da = Array2::<F>::zeros((rows, full));
                da.slice_mut(ndarray::s![.., lo..hi]).assign(&as2(g));
                vec![(a, da.into_dyn())]
            })),
        )
    }

    /// Stack per-slot matrices [T x D] into [T x S x D].
    pub fn stack_slots(&mut self, parts: &[Var]) -> Var {
        let values: Vec<Rc<ArrayD<F>>> = parts.iter().map(|&p| self.val(p)).collect();
        let views: Vec<_> = values
            .iter()
            .map(|v| v.view().into_dimensionality::<Ix2>().unwrap())
            .collect();
        let out = ndarray::stack(Axis(1), &views.iter().map(|v| v.view()).collect::<Vec<_>>())
            .unwrap()
            .into_dyn();
        let parts_v = parts.to_vec();
        self.push(
            out,
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                parts_v
                    .iter()
                    .enumerate()
                    .map(|(s, &p)| (p, g3.index_axis(Axis(1), s).to_owned().into_dyn()))
                    .collect()
            })),
        )
    }

    /// Select slot `s` from [T x S x D] as [T x D].
    pub fn slot(&mut self, h: Var, s: usize) -> Var {
        let vh = self.val(h);
        let h3 = vh.view().into_dimensionality::<Ix3>().expect("3-d");
        let out = h3.index_axis(Axis(1), s).to_owned().into_dyn();
        let dim = vh.raw_dim();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut dh = ArrayD::<F>::zeros(dim.clone());
                dh.view_mut()
                    .into_dimensionality::<Ix3>()
                    .unwrap()
                    .index_axis_mut(Axis(1), s)
                    .assign(&g.view().into_dimensionality::<Ix2>().unwrap());
                vec![(h, dh)]
            })),
        )
    }

    // ---- reductions / broadcasts over rows ----

    pub fn row_sum(&mut self, a: Var) -> Var {
        let va = self.val(a);
        let a2 = as2(&va);
        let cols = a2.ncols();
        let out = a2.sum_axis(Axis(1)).insert_axis(Axis(1)).into_dyn();
        self.push(
            out,
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let da = g2
                    .broadcast((g2.nrows(), cols))
                    .unwrap()
                    .to_owned()
                    .into_dyn();
                vec![(a, da)]
            })),
        )
    }

    /// Divide each row of `a` [m x n] by column vector `d` [m x 1].
    pub fn div_bycol(&mut self, a: Var, d: Var) -> Var {
        let va = self.val(a);
        let vd = self.val(d);
        let out = &*va / &*vd;
        self.push(
            out,
            Some(Box::new(move |g| {
                let da = g / &*vd;
                let prod = (g * &*va) / &(&*vd * &*vd);
                let dd = prod
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1))
                    .mapv(|x| -x)
                    .into_dyn();
                vec![(a, da), (d, dd)]
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = self.val(a);
        let s = va.iter().copied().sum::<F>();
        let dim = va.raw_dim();
        let out = ArrayD::from_elem(IxDyn(&[1]), s);
        self.push(
            out,
            Some(Box::new(move |g| {
                let gv = g[[0]];
                vec![(a, ArrayD::from_elem(dim.clone(), gv))]
            })),
        )
    }

    // ---- activations ----

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.val(a).mapv(sigmoid_scalar);
        let out_rc = Rc::new(out);
        let cap = Rc::clone(&out_rc);
        self.nodes.push(Node {
            value: out_rc,
            grad: None,
            back: Some(Box::new(move |g| {
                vec![(a, g * &cap.mapv(|y| y * (F::one() - y)))]
            })),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let va = self.val(a);
        let out = va.mapv(|x| x * sigmoid_scalar(x));
        self.push(
            out,
            Some(Box::new(move |g| {
                let d = va.mapv(|x| {
                    let s = sigmoid_scalar(x);
                    s * (F::one() + x * (F::one() - s))
                });
                vec![(a, g * &d)]
            })),
        )
    }

    /// y = max(1, |r|), the attention-row magnitude clamp. Non-smooth at
    /// |r| = 1 (measure zero); subgradient 0 inside the clamp.
    pub fn max1_abs(&mut self, r: Var) -> Var {
        let vr = self.val(r);
        let out = vr.mapv(|x| x.abs().max(F::one()));
        self.push(
            out,
            Some(Box::new(move |g| {
                let d = vr.mapv(|x| {
                    if x.abs() > F::one() {
                        x.signum()
                    } else {
                        F::zero()
                    }
                });
                vec![(r, g * &d)]
            })),
        )
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let va = self.val(a);
        let d = *va.shape().last().unwrap();
        let mut out = (*va).clone();
        {
            let mut o2 = out
                .view_mut()
                .into_shape_with_order((va.len() / d, d))
                .unwrap();
            for mut row in o2.rows_mut() {
                let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
                row.mapv_inplace(|x| (x - m).exp());
                let s = row.sum();
                row.mapv_inplace(|x| x / s);
            }
        }
        let out_rc = Rc::new(out);
        let cap = Rc::clone(&out_rc);
        self.nodes.push(Node {
            value: out_rc,
            grad: None,
            back: Some(Box::new(move |g| {
                let mut da = g.clone();
                {
                    let y2 = cap.view().into_shape_with_order((cap.len() / d, d)).unwrap();
                    let mut d2 = da
                        .view_mut()
                        .into_shape_with_order((cap.len() / d, d))
                        .unwrap();
                    for (mut drow, yrow) in d2.rows_mut().into_iter().zip(y2.rows()) {
                        let dot = drow
                            .iter()
                            .zip(yrow.iter())
                            .map(|(&a, &b)| a * b)
                            .sum::<F>();
                        for (dv, &yv) in drow.iter_mut().zip(yrow.iter()) {
                            *dv = yv * (*dv - dot);
                        }
                    }
                }
                vec![(a, da)]
            })),
        });
        Var(self.nodes.len() - 1)
    }

    // ---- normalizations ----

    /// Layer norm over the last axis with learnable scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        self.norm_groups(x, gamma, beta, 1, eps)
    }

    /// Group norm over the last axis split into `n_groups` equal groups.
    /// One group per head realizes the retention-layer group norm.
    pub fn norm_groups(&mut self, x: Var, gamma: Var, beta: Var, n_groups: usize, eps: f64) -> Var {
        let vx = self.val(x);
        let vgm = self.val(gamma);
        let vbt = self.val(beta);
        let d = *vx.shape().last().unwrap();
        assert_eq!(d % n_groups, 0, "channels divisible by groups");
        let gsize = d / n_groups;
        let rows = vx.len() / d;
        let epsf = F::c(eps);

        let x2 = vx.view().into_shape_with_order((rows, d)).unwrap();
        let g1 = vgm.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = vbt.view().into_dimensionality::<Ix1>().unwrap();

        let mut xhat = Array2::<F>::zeros((rows, d));
        let mut inv_std = Array2::<F>::zeros((rows, n_groups));
        for r in 0..rows {
            for gi in 0..n_groups {
                let lo = gi * gsize;
                let hi = lo + gsize;
                let seg = x2.slice(ndarray::s![r, lo..hi]);
                let mean = seg.sum() / F::c(gsize as f64);
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>()
                    / F::c(gsize as f64);
                let istd = F::one() / (var + epsf).sqrt();
                inv_std[[r, gi]] = istd;
                for c in lo..hi {
                    xhat[[r, c]] = (x2[[r, c]] - mean) * istd;
                }
            }
        }
        let mut out = xhat.clone();
        for mut row in out.rows_mut() {
            row.zip_mut_with(&g1, |o, &g| *o *= g);
            row += &b1;
        }
        let out = out.into_shape_with_order(vx.raw_dim()).unwrap();
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let xdim = vx.raw_dim();
        self.push(
            out,
            Some(Box::new(move |g| {
                let g2v = g.view().into_shape_with_order((rows, d)).unwrap();
                let gm1 = vgm.view().into_dimensionality::<Ix1>().unwrap();
                let mut dgamma = Array1::<F>::zeros(d);
                let mut dbeta = Array1::<F>::zeros(d);
                let mut dx = Array2::<F>::zeros((rows, d));
                for r in 0..rows {
                    for c in 0..d {
                        dgamma[c] += g2v[[r, c]] * xhat[[r, c]];
                        dbeta[c] += g2v[[r, c]];
                    }
                    for gi in 0..n_groups {
                        let lo = gi * gsize;
                        let hi = lo + gsize;
                        // dxhat = g * gamma restricted to the group
                        let mut mean_dxh = F::zero();
                        let mut mean_dxh_xh = F::zero();
                        for c in lo..hi {
                            let dxh = g2v[[r, c]] * gm1[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[[r, c]];
                        }
                        let n = F::c(gsize as f64);
                        mean_dxh /= n;
                        mean_dxh_xh /= n;
                        for c in lo..hi {
                            let dxh = g2v[[r, c]] * gm1[c];
                            dx[[r, c]] =
                                inv_std[[r, gi]] * (dxh - mean_dxh - xhat[[r, c]] * mean_dxh_xh);
                        }
                    }
                }
                vec![
                    (x, dx.into_shape_with_order(xdim.clone()).unwrap().into_dyn()),
                    (gamma, dgamma.into_dyn()),
                    (beta, dbeta.into_dyn()),
                ]
            })),
        )
    }

    /// Row-wise L2 normalization: y_r = x_r / max(||x_r||, eps).
    pub fn l2norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.val(x);
        let d = *vx.shape().last().unwrap();
        let rows = vx.len() / d;
        let epsf = F::c(eps);
        let x2 = vx.view().into_shape_with_order((rows, d)).unwrap();
        let mut norms = Array1::<F>::zeros(rows);
        let mut out = x2.to_owned();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(epsf);
            norms[r] = n;
            row.mapv_inplace(|v| v / n);
        }
        let out = out.into_shape_with_order(vx.raw_dim()).unwrap();
        let out_rc = Rc::new(out);
        let cap = Rc::clone(&out_rc);
        let xdim = vx.raw_dim();
        self.nodes.push(Node {
            value: out_rc,
            grad: None,
            back: Some(Box::new(move |g| {
                let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                let y2 = cap.view().into_shape_with_order((rows, d)).unwrap();
                let mut dx = Array2::<F>::zeros((rows, d));
                for r in 0..rows {
                    let dot = g2
                        .row(r)
                        .iter()
                        .zip(y2.row(r).iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<F>();
                    for c in 0..d {
                        dx[[r, c]] = (g2[[r, c]] - y2[[r, c]] * dot) / norms[r];
                    }
                }
                vec![(x, dx.into_shape_with_order(xdim.clone()).unwrap().into_dyn())]
            })),
        });
        Var(self.nodes.len() - 1)
    }

    // ---- time convolutions ----

    /// Full 1-D convolution along axis 0: x [T x Cin], w [K x Cin x Cout],
    /// zero padding `pad_l`/`pad_r`. Output length T + pad_l + pad_r - K + 1.
    pub fn conv1d_time(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        pad_l: usize,
        pad_r: usize,
    ) -> Var {
        let vx = self.val(x);
        let vw = self.val(w);
        let vb = self.val(bias);
        let x2 = as2(&vx);
        let w3 = vw.view().into_dimensionality::<Ix3>().expect("w [K,Cin,Cout]");
        let b1 = vb.view().into_dimensionality::<Ix1>().unwrap();
        let (t, cin) = x2.dim();
        let (k, wcin, cout) = w3.dim();
        assert_eq!(cin, wcin, "conv channel mismatch");
        let t_out = t + pad_l + pad_r + 1 - k;
        let mut out = Array2::<F>::zeros((t_out, cout));
        for to in 0..t_out {
            for kk in 0..k {
                let ti = (to + kk) as isize - pad_l as isize;
                if ti < 0 || ti >= t as isize {
                    continue;
                }
                let xrow = x2.row(ti as usize);
                let wk = w3.index_axis(Axis(0), kk);
                // out[to] += xrow @ wk
                for i in 0..cin {
                    let xv = xrow[i];
                    if xv == F::zero() {
                        continue;
                    }
                    for o in 0..cout {
                        out[[to, o]] += xv * wk[[i, o]];
                    }
                }
            }
            for o in 0..cout {
                out[[to, o]] += b1[o];
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let x2 = as2(&vx);
                let w3 = vw.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = Array2::<F>::zeros((t, cin));
                let mut dw = ndarray::Array3::<F>::zeros((k, cin, cout));
                let db = g2.sum_axis(Axis(0));
                for to in 0..t_out {
                    let grow = g2.row(to);
                    for kk in 0..k {
                        let ti = (to + kk) as isize - pad_l as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        let ti = ti as usize;
                        let wk = w3.index_axis(Axis(0), kk);
                        for i in 0..cin {
                            let mut acc = F::zero();
                            for o in 0..cout {
                                acc += grow[o] * wk[[i, o]];
                                dw[[kk, i, o]] += x2[[ti, i]] * grow[o];
                            }
                            dx[[ti, i]] += acc;
                        }
                    }
                }
                vec![
                    (x, dx.into_dyn()),
                    (w, dw.into_dyn()),
                    (bias, db.into_dyn()),
                ]
            })),
        )
    }

    /// Depthwise causal 1-D convolution: x [T x C], w [K x C], left pad K-1.
    pub fn conv1d_depthwise_causal(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let vx = self.val(x);
        let vw = self.val(w);
        let vb = self.val(bias);
        let x2 = as2(&vx);
        let w2 = as2(&vw);
        let b1 = vb.view().into_dimensionality::<Ix1>().unwrap();
        let (t, c) = x2.dim();
        let k = w2.nrows();
        let mut out = Array2::<F>::zeros((t, c));
        for to in 0..t {
            for kk in 0..k {
                let ti = to as isize - (k - 1 - kk) as isize;
                if ti < 0 {
                    continue;
                }
                let ti = ti as usize;
                for ch in 0..c {
                    out[[to, ch]] += x2[[ti, ch]] * w2[[kk, ch]];
                }
            }
            for ch in 0..c {
                out[[to, ch]] += b1[ch];
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let x2 = as2(&vx);
                let w2 = as2(&vw);
                let mut dx = Array2::<F>::zeros((t, c));
                let mut dw = Array2::<F>::zeros((k, c));
                let db = g2.sum_axis(Axis(0));
                for to in 0..t {
                    for kk in 0..k {
                        let ti = to as isize - (k - 1 - kk) as isize;
                        if ti < 0 {
                            continue;
                        }
                        let ti = ti as usize;
                        for ch in 0..c {
                            dx[[ti, ch]] += g2[[to, ch]] * w2[[kk, ch]];
                            dw[[kk, ch]] += g2[[to, ch]] * x2[[ti, ch]];
                        }
                    }
                }
                vec![
                    (x, dx.into_dyn()),
                    (w, dw.into_dyn()),
                    (bias, db.into_dyn()),
                ]
            })),
        )
    }

    // ---- fused loss kernels ----

    /// Mean binary cross-entropy from logits, restricted to `mask`:
    /// sum(mask * (softplus(z) - y*z)) / norm. Numerically stable form of
    /// BCE(sigmoid(z), y).
    pub fn bce_logits(&mut self, z: Var, labels: ArrayD<F>, mask: ArrayD<F>, norm: f64) -> Var {
        let vz = self.val(z);
        assert_eq!(vz.shape(), labels.shape());
        assert_eq!(vz.shape(), mask.shape());
        let nf = F::c(norm);
        let mut acc = F::zero();
        for ((&zv, &yv), &mv) in vz.iter().zip(labels.iter()).zip(mask.iter()) {
            if mv == F::zero() {
                continue;
            }
            acc += mv * (softplus_scalar(zv) - yv * zv);
        }
        let out = ArrayD::from_elem(IxDyn(&[1]), acc / nf);
        self.push(
            out,
            Some(Box::new(move |g| {
                let gv = g[[0]] / nf;
                let mut dz = (*vz).clone();
                for ((zv, &yv), &mv) in dz.iter_mut().zip(labels.iter()).zip(mask.iter()) {
                    *zv = mv * (sigmoid_scalar(*zv) - yv) * gv;
                }
                vec![(z, dz)]
            })),
        )
    }

    /// Pairwise similarity loss: mean over `pairs` of
    /// (e_j . e_k - target)^2. Rows of `e` are assumed unit-normalized by
    /// an upstream op; this kernel differentiates the raw dot products.
    pub fn pair_dot_mse(&mut self, e: Var, pairs: Vec<(usize, usize)>, targets: Vec<F>) -> Var {
        assert_eq!(pairs.len(), targets.len());
        let ve = self.val(e);
        let e2 = as2(&ve);
        let n = pairs.len().max(1);
        let nf = F::c(n as f64);
        let mut acc = F::zero();
        for (&(j, k), &t) in pairs.iter().zip(targets.iter()) {
            let dot = e2
                .row(j)
                .iter()
                .zip(e2.row(k).iter())
                .map(|(&a, &b)| a * b)
                .sum::<F>();
            let d = dot - t;
            acc += d * d;
        }
        let out = ArrayD::from_elem(IxDyn(&[1]), acc / nf);
        self.push(
            out,
            Some(Box::new(move |g| {
                let gv = g[[0]];
                let e2 = as2(&ve);
                let mut de = Array2::<F>::zeros(e2.dim());
                let two = F::c(2.0);
                for (&(j, k), &t) in pairs.iter().zip(targets.iter()) {
                    let dot = e2
                        .row(j)
                        .iter()
                        .zip(e2.row(k).iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<F>();
                    let coef = two * (dot - t) * gv / nf;
                    for c in 0..e2.ncols() {
                        de[[j, c]] += coef * e2[[k, c]];
                        de[[k, c]] += coef * e2[[j, c]];
                    }
                }
                vec![(e, de.into_dyn())]
            })),
        )
    }
}

pub fn sigmoid_scalar<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn softplus_scalar<F: Real>(x: F) -> F {
    // max(x, 0) + ln(1 + exp(-|x|))
    x.max(F::zero()) + (F::one() + (-x.abs()).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        use rand_distr::{Distribution, StandardNormal};
        ArrayD::from_shape_fn(IxDyn(shape), |_| StandardNormal.sample(rng))
    }

    /// Finite-difference check: builds the graph twice per perturbed entry.
    fn check_grads(
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
        inputs: &[ArrayD<f64>],
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.backward(out);
        let analytic: Vec<ArrayD<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();

        let eval = |perturbed: &[ArrayD<f64>]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
            let o = build(&mut t, &vs);
            t.value(o)[[0]]
        };

        let h = 1e-5;
        for (i, base) in inputs.iter().enumerate() {
            for idx in 0..base.len() {
                let mut plus = inputs.to_vec();
                plus[i].as_slice_mut().unwrap()[idx] += h;
                let mut minus = inputs.to_vec();
                minus[i].as_slice_mut().unwrap()[idx] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ana = analytic[i].as_slice().unwrap()[idx];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1.0);
                assert!(
                    err < tol,
                    "input {i} elem {idx}: numeric {num} vs analytic {ana} (err {err})"
                );
            }
        }
    }

    #[test]
    fn grad_elementwise_and_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]);
        let m = randn(&mut rng, &[4, 5]);
        check_grads(
            |t, v| {
                let s = t.add(v[0], v[1]);
                let p = t.mul(s, v[1]);
                let q = t.matmul(p, v[2]);
                let sq = t.mul(q, q);
                t.sum_all(sq)
            },
            &[a, b, m],
            1e-6,
        );
    }

    #[test]
    fn grad_bias_scale_sub_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, &[4, 3]);
        let b = randn(&mut rng, &[3]);
        let c = randn(&mut rng, &[3, 4]);
        check_grads(
            |t, v| {
                let x = t.add_bias(v[0], v[1]);
                let xt = t.transpose2(x);
                let d = t.sub(xt, v[2]);
                let d = t.scale(d, 0.7);
                let d = t.mul(d, d);
                t.sum_all(d)
            },
            &[a, b, c],
            1e-6,
        );
    }

    #[test]
    fn grad_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, &[5, 4]);
        check_grads(
            |t, v| {
                let s = t.sigmoid(v[0]);
                let w = t.swish(s);
                let sm = t.softmax_last(w);
                let sq = t.mul(sm, sm);
                t.sum_all(sq)
            },
            &[a],
            1e-6,
        );
    }

    #[test]
    fn grad_row_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&mut rng, &[4, 6]);
        let d = randn(&mut rng, &[4, 1]).mapv(|x: f64| x.abs() + 0.5);
        check_grads(
            |t, v| {
                let r = t.row_sum(v[0]);
                let m = t.max1_abs(r);
                let q = t.div_bycol(v[0], m);
                let q = t.div_bycol(q, v[1]);
                let q = t.mul(q, q);
                t.sum_all(q)
            },
            &[a, d],
            1e-5,
        );
    }

    #[test]
    fn grad_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[3, 8]);
        let gm = randn(&mut rng, &[8]);
        let bt = randn(&mut rng, &[8]);
        check_grads(
            |t, v| {
                let ln = t.layer_norm(v[0], v[1], v[2], 1e-5);
                let gn = t.norm_groups(ln, v[1], v[2], 2, 1e-5);
                let l2 = t.l2norm_rows(gn, 1e-12);
                let sq = t.mul(l2, l2);
                let s = t.sum_all(sq);
                // make the scalar sensitive to direction, not just norm
                let lin = t.sum_all(l2);
                let both = t.mul(s, lin);
                t.sum_all(both)
            },
            &[x, gm, bt],
            1e-5,
        );
    }

    #[test]
    fn grad_shape_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = randn(&mut rng, &[2, 3, 4]);
        let b = randn(&mut rng, &[2, 4, 3]);
        check_grads(
            |t, v| {
                let p = t.bmm(v[0], v[1]);
                let p = t.permute(p, &[1, 0, 2]);
                let p = t.reshape(p, &[3, 6]);
                let p = t.mul(p, p);
                t.sum_all(p)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn grad_concat_slice_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn(&mut rng, &[4, 3]);
        let b = randn(&mut rng, &[4, 2]);
        check_grads(
            |t, v| {
                let c = t.concat_cols(v[0], v[1]);
                let s1 = t.slice_cols(c, 1, 4);
                let st = t.stack_slots(&[s1, s1]);
                let x0 = t.slot(st, 0);
                let x1 = t.slot(st, 1);
                let m = t.mul(x0, x1);
                t.sum_all(m)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn grad_convolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[6, 3]);
        let w = randn(&mut rng, &[5, 3, 2]);
        let b = randn(&mut rng, &[2]);
        let wd = randn(&mut rng, &[4, 3]);
        let bd = randn(&mut rng, &[3]);
        check_grads(
            |t, v| {
                let y = t.conv1d_time(v[0], v[1], v[2], 2, 2);
                let y = t.mul(y, y);
                t.sum_all(y)
            },
            &[x.clone(), w, b],
            1e-6,
        );
        check_grads(
            |t, v| {
                let y = t.conv1d_depthwise_causal(v[0], v[1], v[2]);
                let y = t.mul(y, y);
                t.sum_all(y)
            },
            &[x, wd, bd],
            1e-6,
        );
    }

    #[test]
    fn grad_loss_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = randn(&mut rng, &[4, 3]);
        let labels = ArrayD::from_shape_fn(IxDyn(&[4, 3]), |i| {
            if (i[0] + i[1]) % 2 == 0 {
                1.0
            } else {
                0.0
            }
        });
        let mut mask = ArrayD::ones(IxDyn(&[4, 3]));
        mask[[3, 2]] = 0.0;
        let lb = labels.clone();
        let mk = mask.clone();
        check_grads(
            move |t, v| t.bce_logits(v[0], lb.clone(), mk.clone(), 11.0),
            &[z],
            1e-6,
        );

        let e = randn(&mut rng, &[5, 4]);
        let pairs = vec![(0, 1), (0, 4), (2, 3), (1, 3)];
        let targets = vec![1.0, 0.0, 0.5, 0.25];
        check_grads(
            move |t, v| t.pair_dot_mse(v[0], pairs.clone(), targets.clone()),
            &[e],
            1e-6,
        );
    }

    #[test]
    fn unused_branches_have_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 1.0));
        let b = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 2.0));
        let _dead = tape.mul(b, b);
        let live = tape.mul(a, a);
        let loss = tape.sum_all(live);
        tape.backward(loss);
        assert_eq!(tape.grad(b).iter().copied().sum::<f64>(), 0.0);
        assert_eq!(tape.grad(a)[[0, 0]], 2.0);
    }

    #[test]
    fn mul_const_broadcasts_column() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 3]), 1.0));
        let col = ArrayD::from_shape_vec(IxDyn(&[2, 1]), vec![2.0, 3.0]).unwrap();
        let y = tape.mul_const(a, col);
        assert_eq!(tape.value(y)[[1, 2]], 3.0);
        let s = tape.sum_all(y);
        tape.backward(s);
        assert_eq!(tape.grad(a)[[0, 0]], 2.0);
        assert_eq!(tape.grad(a)[[1, 1]], 3.0);
    }
}
