//! Reverse-mode automatic differentiation on a per-sample tape.
//!
//! All arithmetic is f64. A [`Tape`] records one forward computation; calling
//! [`Tape::backward`] on a scalar root walks the recorded nodes in reverse
//! and accumulates gradients for every leaf that was marked as requiring
//! them. Tapes are cheap and single-threaded by design: batch parallelism
//! builds one tape per sample and merges the resulting gradients in a fixed
//! order, which keeps training bit-reproducible.
//!
//! Nodes whose ancestors are all constant record no backward closure, so
//! frozen submodels (e.g. a frozen text encoder or denoiser backbone) cost
//! nothing on the backward pass.

use std::cell::RefCell;

use ndarray::{s, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};

/// Dynamic-rank f64 tensor used throughout the graph.
pub type Arr = ArrayD<f64>;

type BackwardFn = Box<dyn Fn(&[Node], &Arr) -> Vec<(usize, Arr)>>;

struct Node {
    value: Arr,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Arr> {
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }
}

fn scalar_arr(x: f64) -> Arr {
    ArrayD::from_elem(IxDyn(&[]), x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Arr, needs_grad: bool, backward: Option<BackwardFn>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            needs_grad,
            backward,
        });
        nodes.len() - 1
    }

    /// Leaf with gradient tracking controlled by `needs_grad`.
    pub fn leaf(&self, value: Arr, needs_grad: bool) -> Var<'_> {
        Var {
            tape: self,
            idx: self.push(value, needs_grad, None),
        }
    }

    /// Constant leaf; gradients never flow into it.
    pub fn constant(&self, value: Arr) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(scalar_arr(x))
    }

    /// Rebuild a handle from a node index (used by parameter bindings).
    pub fn var_at(&self, idx: usize) -> Var<'_> {
        debug_assert!(idx < self.len());
        Var { tape: self, idx }
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].needs_grad
    }

    fn value_clone(&self, idx: usize) -> Arr {
        self.nodes.borrow()[idx].value.clone()
    }

    fn with_value<R>(&self, idx: usize, f: impl FnOnce(&Arr) -> R) -> R {
        f(&self.nodes.borrow()[idx].value)
    }

    /// Run reverse accumulation from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert!(
            nodes[root.idx].value.ndim() == 0,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Arr>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.idx] = Some(scalar_arr(1.0));
        for i in (0..=root.idx).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue; // leaf: keep its accumulated gradient
            };
            let Some(g) = grads[i].take() else {
                continue; // not on any path to the root
            };
            for (parent, contrib) in backward(&nodes, &g) {
                if !nodes[parent].needs_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn index(&self) -> usize {
        self.idx
    }

    pub fn value(&self) -> Arr {
        self.tape.value_clone(self.idx)
    }

    pub fn scalar_value(&self) -> f64 {
        self.tape.with_value(self.idx, |v| {
            debug_assert_eq!(v.ndim(), 0);
            v[[]]
        })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.idx, |v| v.shape().to_vec())
    }

    fn unary(
        &self,
        value: Arr,
        back: impl Fn(&Arr, &Arr) -> Arr + 'static, // (self value, upstream) -> grad
    ) -> Var<'t> {
        let needs = self.tape.needs(self.idx);
        let parent = self.idx;
        let backward: Option<BackwardFn> = needs.then(|| {
            Box::new(move |nodes: &[Node], g: &Arr| vec![(parent, back(&nodes[parent].value, g))])
                as BackwardFn
        });
        Var {
            tape: self.tape,
            idx: self.tape.push(value, needs, backward),
        }
    }

    // ---- elementwise ----

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| {
            self.tape.with_value(other.idx, |b| a + b)
        });
        let (ia, ib) = (self.idx, other.idx);
        let (na, nb) = (self.tape.needs(ia), self.tape.needs(ib));
        let needs = na || nb;
        let backward: Option<BackwardFn> = needs.then(|| {
            Box::new(move |_: &[Node], g: &Arr| {
                let mut out = Vec::with_capacity(2);
                if na {
                    out.push((ia, g.clone()));
                }
                if nb {
                    out.push((ib, g.clone()));
                }
                out
            }) as BackwardFn
        });
        Var {
            tape: self.tape,
            idx: self.tape.push(v, needs, backward),
        }
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| {
            self.tape.with_value(other.idx, |b| a - b)
        });
        let (ia, ib) = (self.idx, other.idx);
        let (na, nb) = (self.tape.needs(ia), self.tape.needs(ib));
        let needs = na || nb;
        let backward: Option<BackwardFn> = needs.then(|| {
            Box::new(move |_: &[Node], g: &Arr| {
                let mut out = Vec::with_capacity(2);
                if na {
                    out.push((ia, g.clone()));
                }
                if nb {
                    out.push((ib, -g));
                }
                out
            }) as BackwardFn
        });
        Var {
            tape: self.tape,
            idx: self.tape.push(v, needs, backward),
        }
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| {
            self.tape.with_value(other.idx, |b| a * b)
        });
        let (ia, ib) = (self.idx, other.idx);
        let (na, nb) = (self.tape.needs(ia), self.tape.needs(ib));
        let needs = na || nb;
        let backward: Option<BackwardFn> = needs.then(|| {
            Box::new(move |nodes: &[Node], g: &Arr| {
                let mut out = Vec::with_capacity(2);
                if na {
                    out.push((ia, g * &nodes[ib].value));
                }
                if nb {
                    out.push((ib, g * &nodes[ia].value));
                }
                out
            }) as BackwardFn
        });
        Var {
            tape: self.tape,
            idx: self.tape.push(v, needs, backward),
        }
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(self.tape.with_value(self.idx, |a| -a), |_, g| -g)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(self.tape.with_value(self.idx, |a| a + c), |_, g| g.clone())
    }

    pub fn mul_scalar(&self, c: f64) -> Var<'t> {
        self.unary(self.tape.with_value(self.idx, |a| a * c), move |_, g| g * c)
    }

    /// Multiply an arbitrary-shape tensor by a 0-d scalar var.
    pub fn scale_by(&self, s: Var<'t>) -> Var<'t> {
        let sv = s.scalar_value();
        let v = self.tape.with_value(self.idx, |a| a * sv);
        let (ia, is) = (self.idx, s.idx);
        let (na, ns) = (self.tape.needs(ia), self.tape.needs(is));
        let needs = na || ns;
        let backward: Option<BackwardFn> = needs.then(|| {
            Box::new(move |nodes: &[Node], g: &Arr| {
                let mut out = Vec::with_capacity(2);
                if na {
                    out.push((ia, g * nodes[is].value[[]]));
                }
                if ns {
                    let d = (g * &nodes[ia].value).sum();
                    out.push((is, scalar_arr(d)));
                }
                out
            }) as BackwardFn
        });
        Var {
            tape: self.tape,
            idx: self.tape.push(v, needs, backward),
        }
    }

    pub fn recip(&self) -> Var<'t> {
        self.unary(self.tape.with_value(self.idx, |a| 1.0 / a), |x, g| {
            let y = 1.0 / x;
            g * &(-&y * &y)
        })
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(
            self.tape.with_value(self.idx, |a| a.mapv(f64::sqrt)),
            |x, g| {
                let y = x.mapv(f64::sqrt);
                g / &(y * 2.0)
            },
        )
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(
            self.tape.with_value(self.idx, |a| a.mapv(f64::exp)),
            |x, g| g * &x.mapv(f64::exp),
        )
    }

    pub fn silu(&self) -> Var<'t> {
        fn sigmoid(x: f64) -> f64 {
            1.0 / (1.0 + (-x).exp())
        }
        self.unary(
            self.tape.with_value(self.idx, |a| a.mapv(|x| x * sigmoid(x))),
            |x, g| {
                let d = x.mapv(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                g * &d
            },
        )
    }

    // ---- reductions ----

    pub fn sum(&self) -> Var<'t> {
        self.unary(
            self.tape.with_value(self.idx, |a| scalar_arr(a.sum())),
            |x, g| Arr::from_elem(x.raw_dim(), g[[]]),
        )
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.tape.with_value(self.idx, |a| a.len()) as f64;
        self.unary(
            self.tape.with_value(self.idx, |a| scalar_arr(a.sum() / n)),
            move |x, g| Arr::from_elem(x.raw_dim(), g[[]] / n),
        )
    }

    /// Mean over axis 0 of a 2-d matrix, yielding a row vector.
    pub fn mean_rows(&self) -> Var<'t> {
        let m = self.tape.with_value(self.idx, |a| a.shape()[0]) as f64;
        self.unary(
            self.tape.with_value(self.idx, |a| {
                a.view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .mean_axis(Axis(0))
                    .unwrap()
                    .into_dyn()
            }),
            move |x, g| {
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                let mut dx = Arr::zeros(IxDyn(&[rows, cols]));
                for i in 0..rows {
                    for j in 0..cols {
                        dx[[i, j]] = g[[j]] / m;
                    }
                }
                dx
            },
        )
    }

    pub fn dot(&self, other: Var<'t>) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| {
            self.tape.with_value(other.idx, |b| {
                let a = a.view().into_dimensionality::<Ix1>().unwrap();
                let b = b.view().into_dimensionality::<Ix1>().unwrap();
                scalar_arr(a.dot(&b))
            })
        });
        let (ia, ib) = (self.idx, other.idx);
        let (na, nb) = (self.tape.needs(ia), self.tape.needs(ib));
        let needs = na || nb;
        let backward: Option<BackwardFn> = needs.then(|| {
            Box::new(move |nodes: &[Node], g: &Arr| {
                let gv = g[[]];
                let mut out = Vec::with_capacity(2);
                if na {
                    out.push((ia, &nodes[ib].value * gv));
                }
                if nb {
                    out.push((ib, &nodes[ia].value * gv));
                }
                out
            }) as BackwardFn
        });
        Var {
            tape: self.tape,
            idx: self.tape.push(v, needs, backward),
        }
    }

    // ---- matrix ops ----

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| {
            self.tape.with_value(other.idx, |b| {
                let a = a.view().into_dimensionality::<Ix2>().unwrap();
                let b = b.view().into_dimensionality::<Ix2>().unwrap();
                a.dot(&b).into_dyn()
            })
        });
        let (ia, ib) = (self.idx, other.idx);
        let (na, nb) = (self.tape.needs(ia), self.tape.needs(ib));
        let needs = na || nb;
        let backward: Option<BackwardFn> = needs.then(|| {
            Box::new(move |nodes: &[Node], g: &Arr| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a = nodes[ia].value.view().into_dimensionality::<Ix2>().unwrap();
                let b = nodes[ib].value.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = Vec::with_capacity(2);
                if na {
                    out.push((ia, g2.dot(&b.t()).into_dyn()));
                }
                if nb {
                    out.push((ib, a.t().dot(&g2).into_dyn()));
                }
                out
            }) as BackwardFn
        });
        Var {
            tape: self.tape,
            idx: self.tape.push(v, needs, backward),
        }
    }

    pub fn transpose(&self) -> Var<'t> {
        self.unary(
            self.tape.with_value(self.idx, |a| {
                a.view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .t()
                    .to_owned()
                    .into_dyn()
            }),
            |_, g| {
                g.view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .t()
                    .to_owned()
                    .into_dyn()
            },
        )
    }

    /// Broadcast-add a length-n bias to every row of an m×n matrix.
    pub fn add_bias_row(&self, bias: Var<'t>) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| {
            self.tape.with_value(bias.idx, |b| {
                let a = a.view().into_dimensionality::<Ix2>().unwrap();
                let b = b.view().into_dimensionality::<Ix1>().unwrap();
                (&a + &b).into_dyn()
            })
        });
        let (ia, ib) = (self.idx, bias.idx);
        let (na, nb) = (self.tape.needs(ia), self.tape.needs(ib));
        let needs = na || nb;
        let backward: Option<BackwardFn> = needs.then(|| {
            Box::new(move |_: &[Node], g: &Arr| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = Vec::with_capacity(2);
                if na {
                    out.push((ia, g.clone()));
                }
                if nb {
                    out.push((ib, g2.sum_axis(Axis(0)).into_dyn()));
                }
                out
            }) as BackwardFn
        });
        Var {
            tape: self.tape,
            idx: self.tape.push(v, needs, backward),
        }
    }

    /// Columns `[start, start+len)` of a 2-d matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'t> {
        self.unary(
            self.tape.with_value(self.idx, |a| {
                a.view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .slice(s![.., start..start + len])
                    .to_owned()
                    .into_dyn()
            }),
            move |x, g| {
                let mut dx = Arr::zeros(x.raw_dim());
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut view = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                view.slice_mut(s![.., start..start + len]).assign(&g2);
                dx
            },
        )
    }

    /// Rows `[start, start+len)` of a 2-d matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Var<'t> {
        self.unary(
            self.tape.with_value(self.idx, |a| {
                a.view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .slice(s![start..start + len, ..])
                    .to_owned()
                    .into_dyn()
            }),
            move |x, g| {
                let mut dx = Arr::zeros(x.raw_dim());
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut view = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                view.slice_mut(s![start..start + len, ..]).assign(&g2);
                dx
            },
        )
    }

    /// Row i of a 2-d matrix as a vector.
    pub fn row(&self, i: usize) -> Var<'t> {
        self.unary(
            self.tape.with_value(self.idx, |a| {
                a.view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .row(i)
                    .to_owned()
                    .into_dyn()
            }),
            move |x, g| {
                let mut dx = Arr::zeros(x.raw_dim());
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                dx.view_mut()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .row_mut(i)
                    .assign(&g1);
                dx
            },
        )
    }

    /// View a length-n vector as a 1×n matrix.
    pub fn as_row_matrix(&self) -> Var<'t> {
        let n = self.tape.with_value(self.idx, |a| a.len());
        self.unary(
            self.tape.with_value(self.idx, |a| {
                a.clone().into_shape_with_order(IxDyn(&[1, n])).unwrap()
            }),
            move |_, g| g.clone().into_shape_with_order(IxDyn(&[n])).unwrap(),
        )
    }

    /// Element i of a vector as a 0-d scalar.
    pub fn pick(&self, i: usize) -> Var<'t> {
        self.unary(
            self.tape.with_value(self.idx, |a| scalar_arr(a[[i]])),
            move |x, g| {
                let mut dx = Arr::zeros(x.raw_dim());
                dx[[i]] = g[[]];
                dx
            },
        )
    }

    /// Gather vector elements at `ids` (duplicates accumulate on backward).
    pub fn gather(&self, ids: &[usize]) -> Var<'t> {
        let ids = ids.to_vec();
        let v = self.tape.with_value(self.idx, |a| {
            Arr::from_shape_vec(IxDyn(&[ids.len()]), ids.iter().map(|&i| a[[i]]).collect())
                .unwrap()
        });
        let ids_b = ids.clone();
        self.unary_with_value(v, move |x, g| {
            let mut dx = Arr::zeros(x.raw_dim());
            for (j, &i) in ids_b.iter().enumerate() {
                dx[[i]] += g[[j]];
            }
            dx
        })
    }

    fn unary_with_value(
        &self,
        value: Arr,
        back: impl Fn(&Arr, &Arr) -> Arr + 'static,
    ) -> Var<'t> {
        let needs = self.tape.needs(self.idx);
        let parent = self.idx;
        let backward: Option<BackwardFn> = needs.then(|| {
            Box::new(move |nodes: &[Node], g: &Arr| vec![(parent, back(&nodes[parent].value, g))])
                as BackwardFn
        });
        Var {
            tape: self.tape,
            idx: self.tape.push(value, needs, backward),
        }
    }

    /// Embedding lookup: rows of a |V|×d table at token ids.
    pub fn gather_rows(&self, ids: &[usize]) -> Var<'t> {
        let ids_v = ids.to_vec();
        let v = self.tape.with_value(self.idx, |a| {
            let t = a.view().into_dimensionality::<Ix2>().unwrap();
            let d = t.shape()[1];
            let mut out = ndarray::Array2::<f64>::zeros((ids_v.len(), d));
            for (j, &i) in ids_v.iter().enumerate() {
                out.row_mut(j).assign(&t.row(i));
            }
            out.into_dyn()
        });
        let ids_b = ids.to_vec();
        self.unary_with_value(v, move |x, g| {
            let mut dx = Arr::zeros(x.raw_dim());
            let mut dx2 = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            for (j, &i) in ids_b.iter().enumerate() {
                let mut row = dx2.row_mut(i);
                row += &g2.row(j);
            }
            dx
        })
    }

    // ---- softmax family ----

    /// Row-wise softmax of a 2-d matrix.
    pub fn softmax_rows(&self) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| {
            let a = a.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = a.to_owned();
            for mut row in out.rows_mut() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|x| (x - m).exp());
                let s = row.sum();
                row.mapv_inplace(|x| x / s);
            }
            out.into_dyn()
        });
        let y = v.clone();
        self.unary_with_value(v, move |_, g| {
            let y2 = y.view().into_dimensionality::<Ix2>().unwrap();
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = ndarray::Array2::<f64>::zeros(y2.raw_dim());
            for i in 0..y2.shape()[0] {
                let yi = y2.row(i);
                let gi = g2.row(i);
                let dotv = yi.dot(&gi);
                let mut di = dx.row_mut(i);
                for j in 0..yi.len() {
                    di[j] = yi[j] * (gi[j] - dotv);
                }
            }
            dx.into_dyn()
        })
    }

    /// Softmax of a 1-d vector.
    pub fn softmax_vec(&self) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| {
            let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e = a.mapv(|x| (x - m).exp());
            let s = e.sum();
            e / s
        });
        let vc = v.clone();
        self.unary_with_value(v, move |_, g| {
            let dotv = (&vc * g).sum();
            &vc * &(g - dotv)
        })
    }

    /// Numerically stable log-sum-exp of a 1-d vector.
    pub fn log_sum_exp(&self) -> Var<'t> {
        self.unary(
            self.tape.with_value(self.idx, |a| {
                let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                scalar_arr(m + a.mapv(|x| (x - m).exp()).sum().ln())
            }),
            |x, g| {
                let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e = x.mapv(|v| (v - m).exp());
                let s = e.sum();
                e * (g[[]] / s)
            },
        )
    }

    // ---- shape ops ----

    /// Concatenate 2-d matrices along rows.
    pub fn concat_rows(&self, other: Var<'t>) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| {
            self.tape.with_value(other.idx, |b| {
                let a = a.view().into_dimensionality::<Ix2>().unwrap();
                let b = b.view().into_dimensionality::<Ix2>().unwrap();
                ndarray::concatenate(Axis(0), &[a, b]).unwrap().into_dyn()
            })
        });
        let (ia, ib) = (self.idx, other.idx);
        let (na, nb) = (self.tape.needs(ia), self.tape.needs(ib));
        let rows_a = self.tape.with_value(ia, |a| a.shape()[0]);
        let needs = na || nb;
        let backward: Option<BackwardFn> = needs.then(|| {
            Box::new(move |_: &[Node], g: &Arr| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = Vec::with_capacity(2);
                if na {
                    out.push((ia, g2.slice(s![..rows_a, ..]).to_owned().into_dyn()));
                }
                if nb {
                    out.push((ib, g2.slice(s![rows_a.., ..]).to_owned().into_dyn()));
                }
                out
            }) as BackwardFn
        });
        Var {
            tape: self.tape,
            idx: self.tape.push(v, needs, backward),
        }
    }

    /// Concatenate 1-d vectors.
    pub fn concat_vec(&self, other: Var<'t>) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| {
            self.tape.with_value(other.idx, |b| {
                let mut out = Vec::with_capacity(a.len() + b.len());
                out.extend(a.iter());
                out.extend(b.iter());
                Arr::from_shape_vec(IxDyn(&[out.len()]), out).unwrap()
            })
        });
        let (ia, ib) = (self.idx, other.idx);
        let (na, nb) = (self.tape.needs(ia), self.tape.needs(ib));
        let len_a = self.tape.with_value(ia, |a| a.len());
        let needs = na || nb;
        let backward: Option<BackwardFn> = needs.then(|| {
            Box::new(move |_: &[Node], g: &Arr| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut out = Vec::with_capacity(2);
                if na {
                    out.push((ia, g1.slice(s![..len_a]).to_owned().into_dyn()));
                }
                if nb {
                    out.push((ib, g1.slice(s![len_a..]).to_owned().into_dyn()));
                }
                out
            }) as BackwardFn
        });
        Var {
            tape: self.tape,
            idx: self.tape.push(v, needs, backward),
        }
    }

    /// Concatenate 2-d matrices along columns.
    pub fn concat_cols(vars: &[Var<'t>]) -> Var<'t> {
        assert!(!vars.is_empty());
        let tape = vars[0].tape;
        let views: Vec<Arr> = vars.iter().map(|v| v.value()).collect();
        let v2: Vec<_> = views
            .iter()
            .map(|v| v.view().into_dimensionality::<Ix2>().unwrap())
            .collect();
        let value = ndarray::concatenate(Axis(1), &v2).unwrap().into_dyn();
        let idxs: Vec<usize> = vars.iter().map(|v| v.idx).collect();
        let widths: Vec<usize> = views.iter().map(|v| v.shape()[1]).collect();
        let needs_each: Vec<bool> = idxs.iter().map(|&i| tape.needs(i)).collect();
        let needs = needs_each.iter().any(|&b| b);
        let backward: Option<BackwardFn> = needs.then(|| {
            Box::new(move |_: &[Node], g: &Arr| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = Vec::new();
                let mut off = 0;
                for (j, &w) in widths.iter().enumerate() {
                    if needs_each[j] {
                        out.push((idxs[j], g2.slice(s![.., off..off + w]).to_owned().into_dyn()));
                    }
                    off += w;
                }
                out
            }) as BackwardFn
        });
        Var {
            tape,
            idx: tape.push(value, needs, backward),
        }
    }

    /// Concatenate 3-d maps along the channel axis.
    pub fn concat_channels(&self, other: Var<'t>) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| {
            self.tape.with_value(other.idx, |b| {
                let a = a.view().into_dimensionality::<Ix3>().unwrap();
                let b = b.view().into_dimensionality::<Ix3>().unwrap();
                ndarray::concatenate(Axis(0), &[a, b]).unwrap().into_dyn()
            })
        });
        let (ia, ib) = (self.idx, other.idx);
        let (na, nb) = (self.tape.needs(ia), self.tape.needs(ib));
        let ch_a = self.tape.with_value(ia, |a| a.shape()[0]);
        let needs = na || nb;
        let backward: Option<BackwardFn> = needs.then(|| {
            Box::new(move |_: &[Node], g: &Arr| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut out = Vec::with_capacity(2);
                if na {
                    out.push((ia, g3.slice(s![..ch_a, .., ..]).to_owned().into_dyn()));
                }
                if nb {
                    out.push((ib, g3.slice(s![ch_a.., .., ..]).to_owned().into_dyn()));
                }
                out
            }) as BackwardFn
        });
        Var {
            tape: self.tape,
            idx: self.tape.push(v, needs, backward),
        }
    }

    /// Stack 0-d scalars into a vector.
    pub fn stack_scalars(vars: &[Var<'t>]) -> Var<'t> {
        assert!(!vars.is_empty());
        let tape = vars[0].tape;
        let value = Arr::from_shape_vec(
            IxDyn(&[vars.len()]),
            vars.iter().map(|v| v.scalar_value()).collect(),
        )
        .unwrap();
        let idxs: Vec<usize> = vars.iter().map(|v| v.idx).collect();
        let needs_each: Vec<bool> = idxs.iter().map(|&i| tape.needs(i)).collect();
        let needs = needs_each.iter().any(|&b| b);
        let backward: Option<BackwardFn> = needs.then(|| {
            Box::new(move |_: &[Node], g: &Arr| {
                let mut out = Vec::new();
                for (j, &i) in idxs.iter().enumerate() {
                    if needs_each[j] {
                        out.push((i, scalar_arr(g[[j]])));
                    }
                }
                out
            }) as BackwardFn
        });
        Var {
            tape,
            idx: tape.push(value, needs, backward),
        }
    }

    /// C×H×W feature map to (H·W)×C token matrix (row = spatial position).
    pub fn to_tokens(&self) -> Var<'t> {
        self.unary(
            self.tape.with_value(self.idx, |a| {
                let a = a.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = a.dim();
                let mut out = ndarray::Array2::<f64>::zeros((h * w, c));
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            out[[hi * w + wi, ci]] = a[[ci, hi, wi]];
                        }
                    }
                }
                out.into_dyn()
            }),
            |x, g| {
                let (c, h, w) = x.view().into_dimensionality::<Ix3>().unwrap().dim();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            dx[[ci, hi, wi]] = g2[[hi * w + wi, ci]];
                        }
                    }
                }
                dx.into_dyn()
            },
        )
    }

    /// Inverse of [`Var::to_tokens`].
    pub fn from_tokens(&self, c: usize, h: usize, w: usize) -> Var<'t> {
        self.unary(
            self.tape.with_value(self.idx, |a| {
                let a = a.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = ndarray::Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            out[[ci, hi, wi]] = a[[hi * w + wi, ci]];
                        }
                    }
                }
                out.into_dyn()
            }),
            move |_, g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array2::<f64>::zeros((h * w, c));
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            dx[[hi * w + wi, ci]] = g3[[ci, hi, wi]];
                        }
                    }
                }
                dx.into_dyn()
            },
        )
    }

    /// 2× nearest-neighbor spatial upsampling of a C×H×W map.
    pub fn upsample2x(&self) -> Var<'t> {
        self.unary(
            self.tape.with_value(self.idx, |a| {
                let a = a.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = a.dim();
                let mut out = ndarray::Array3::<f64>::zeros((c, h * 2, w * 2));
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            let v = a[[ci, hi, wi]];
                            out[[ci, 2 * hi, 2 * wi]] = v;
                            out[[ci, 2 * hi, 2 * wi + 1]] = v;
                            out[[ci, 2 * hi + 1, 2 * wi]] = v;
                            out[[ci, 2 * hi + 1, 2 * wi + 1]] = v;
                        }
                    }
                }
                out.into_dyn()
            }),
            |x, g| {
                let (c, h, w) = x.view().into_dimensionality::<Ix3>().unwrap().dim();
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            dx[[ci, hi, wi]] = g3[[ci, 2 * hi, 2 * wi]]
                                + g3[[ci, 2 * hi, 2 * wi + 1]]
                                + g3[[ci, 2 * hi + 1, 2 * wi]]
                                + g3[[ci, 2 * hi + 1, 2 * wi + 1]];
                        }
                    }
                }
                dx.into_dyn()
            },
        )
    }

    /// Global average pool of a C×H×W map to a length-C vector.
    pub fn global_avg_pool(&self) -> Var<'t> {
        self.unary(
            self.tape.with_value(self.idx, |a| {
                let a = a.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = a.dim();
                let mut out = ndarray::Array1::<f64>::zeros(c);
                for ci in 0..c {
                    out[ci] = a.index_axis(Axis(0), ci).sum() / (h * w) as f64;
                }
                out.into_dyn()
            }),
            |x, g| {
                let (c, h, w) = x.view().into_dimensionality::<Ix3>().unwrap().dim();
                let scale = 1.0 / (h * w) as f64;
                let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    dx.index_axis_mut(Axis(0), ci).fill(g[[ci]] * scale);
                }
                dx.into_dyn()
            },
        )
    }

    /// 2-d convolution: x C_in×H×W, w C_out×C_in×kh×kw, bias C_out.
    pub fn conv2d(&self, weight: Var<'t>, bias: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let (ix, iw, ib) = (self.idx, weight.idx, bias.idx);
        let v = self.tape.with_value(ix, |x| {
            self.tape.with_value(iw, |w| {
                self.tape
                    .with_value(ib, |b| conv2d_forward(x, w, b, stride, pad))
            })
        });
        let (nx, nw, nb) = (
            self.tape.needs(ix),
            self.tape.needs(iw),
            self.tape.needs(ib),
        );
        let needs = nx || nw || nb;
        let backward: Option<BackwardFn> = needs.then(|| {
            Box::new(move |nodes: &[Node], g: &Arr| {
                conv2d_backward(
                    &nodes[ix].value,
                    &nodes[iw].value,
                    g,
                    stride,
                    pad,
                    (nx.then_some(ix), nw.then_some(iw), nb.then_some(ib)),
                )
            }) as BackwardFn
        });
        Var {
            tape: self.tape,
            idx: self.tape.push(v, needs, backward),
        }
    }
}

fn conv2d_forward(x: &Arr, w: &Arr, b: &Arr, stride: usize, pad: usize) -> Arr {
    let x = x.view().into_dimensionality::<Ix3>().unwrap();
    let w = w.view().into_dimensionality::<Ix4>().unwrap();
    let b = b.view().into_dimensionality::<Ix1>().unwrap();
    let (cin, h, wd) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = ndarray::Array3::<f64>::zeros((cout, ho, wo));
    for co in 0..cout {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = b[co];
                for ci in 0..cin {
                    for khi in 0..kh {
                        let ihs = oh * stride + khi;
                        if ihs < pad || ihs - pad >= h {
                            continue;
                        }
                        let ih = ihs - pad;
                        for kwi in 0..kw {
                            let iws = ow * stride + kwi;
                            if iws < pad || iws - pad >= wd {
                                continue;
                            }
                            acc += w[[co, ci, khi, kwi]] * x[[ci, ih, iws - pad]];
                        }
                    }
                }
                out[[co, oh, ow]] = acc;
            }
        }
    }
    out.into_dyn()
}

fn conv2d_backward(
    x: &Arr,
    w: &Arr,
    g: &Arr,
    stride: usize,
    pad: usize,
    (xi, wi, bi): (Option<usize>, Option<usize>, Option<usize>),
) -> Vec<(usize, Arr)> {
    let x = x.view().into_dimensionality::<Ix3>().unwrap();
    let w = w.view().into_dimensionality::<Ix4>().unwrap();
    let g = g.view().into_dimensionality::<Ix3>().unwrap();
    let (cin, h, wd) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (_, ho, wo) = g.dim();
    let mut out = Vec::new();
    if let Some(bi) = bi {
        let mut db = ndarray::Array1::<f64>::zeros(cout);
        for co in 0..cout {
            db[co] = g.index_axis(Axis(0), co).sum();
        }
        out.push((bi, db.into_dyn()));
    }
    if let Some(wi) = wi {
        let mut dw = ndarray::Array4::<f64>::zeros((cout, cin, kh, kw));
        for co in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let gv = g[[co, oh, ow]];
                    for ci in 0..cin {
                        for khi in 0..kh {
                            let ihs = oh * stride + khi;
                            if ihs < pad || ihs - pad >= h {
                                continue;
                            }
                            for kwi in 0..kw {
                                let iws = ow * stride + kwi;
                                if iws < pad || iws - pad >= wd {
                                    continue;
                                }
                                dw[[co, ci, khi, kwi]] += gv * x[[ci, ihs - pad, iws - pad]];
                            }
                        }
                    }
                }
            }
        }
        out.push((wi, dw.into_dyn()));
    }
    if let Some(xi) = xi {
        let mut dx = ndarray::Array3::<f64>::zeros((cin, h, wd));
        for co in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let gv = g[[co, oh, ow]];
                    for ci in 0..cin {
                        for khi in 0..kh {
                            let ihs = oh * stride + khi;
                            if ihs < pad || ihs - pad >= h {
                                continue;
                            }
                            for kwi in 0..kw {
                                let iws = ow * stride + kwi;
                                if iws < pad || iws - pad >= wd {
                                    continue;
                                }
                                dx[[ci, ihs - pad, iws - pad]] += gv * w[[co, ci, khi, kwi]];
                            }
                        }
                    }
                }
            }
        }
        out.push((xi, dx.into_dyn()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, Array3, Array4};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        let n: usize = shape.iter().product();
        Arr::from_shape_vec(
            IxDyn(shape),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Central finite differences on every element of `inputs[which]`.
    fn check_grads<F>(inputs: &[Arr], which: usize, f: F)
    where
        F: Fn(&Tape, &[Var<'_>]) -> f64 + Copy,
    {
        fn eval<F2: Fn(&Tape, &[Var<'_>]) -> f64>(vals: &[Arr], f: F2) -> f64 {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = vals.iter().map(|v| tape.leaf(v.clone(), true)).collect();
            f(&tape, &vars)
        }
        let tape2 = Tape::new();
        let vars2: Vec<Var<'_>> = inputs.iter().map(|v| tape2.leaf(v.clone(), true)).collect();
        let loss = f(&tape2, &vars2);
        assert!(loss.is_finite());
        // the last node pushed is the root scalar
        let root = Var {
            tape: &tape2,
            idx: tape2.len() - 1,
        };
        let grads = tape2.backward(root);
        let analytic = grads
            .get(vars2[which])
            .cloned()
            .unwrap_or_else(|| Arr::zeros(inputs[which].raw_dim()));

        let h = 1e-6;
        for i in 0..inputs[which].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[which].as_slice_mut().unwrap()[i] += h;
            minus[which].as_slice_mut().unwrap()[i] -= h;
            let lp = eval(&plus, f);
            let lm = eval(&minus, f);
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[i];
            if an.abs() < 1e-8 && fd.abs() < 1e-8 {
                continue; // both zero up to fd cancellation noise
            }
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((an - fd) / denom).abs() < 1e-5,
                "grad mismatch at {i}: analytic {an}, fd {fd}"
            );
        }
    }

    #[test]
    fn matmul_and_bias_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4, 5]);
        let bias = randn(&mut rng, &[5]);
        for which in 0..3 {
            check_grads(&[a.clone(), b.clone(), bias.clone()], which, |_t, v| {
                let y = v[0].matmul(v[1]).add_bias_row(v[2]).silu();
                y.mean().scalar_value()
            });
        }
    }

    #[test]
    fn softmax_lse_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = randn(&mut rng, &[4, 6]);
        check_grads(&[z.clone()], 0, |_t, v| {
            let y = v[0].softmax_rows();
            // non-symmetric weighting so the gradient is informative
            let w = v[0].tape.constant(
                Arr::from_shape_vec(
                    IxDyn(&[4, 6]),
                    (0..24).map(|i| (i as f64) * 0.1).collect(),
                )
                .unwrap(),
            );
            y.mul(w).sum().scalar_value()
        });
        let z1 = randn(&mut rng, &[7]);
        check_grads(&[z1], 0, |_t, v| v[0].log_sum_exp().scalar_value());
    }

    #[test]
    fn conv_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[2, 6, 6]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let b = randn(&mut rng, &[3]);
        for which in 0..3 {
            check_grads(&[x.clone(), w.clone(), b.clone()], which, |_t, v| {
                let y = v[0].conv2d(v[1], v[2], 2, 1).silu();
                y.mean().scalar_value()
            });
        }
    }

    #[test]
    fn shape_ops_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[2, 4, 4]);
        check_grads(&[x.clone()], 0, |_t, v| {
            let tok = v[0].to_tokens();
            let back = tok.from_tokens(2, 4, 4);
            let up = back.upsample2x();
            up.global_avg_pool().dot(up.global_avg_pool()).scalar_value()
        });
        let a = randn(&mut rng, &[3, 5]);
        let b = randn(&mut rng, &[2, 5]);
        for which in 0..2 {
            check_grads(&[a.clone(), b.clone()], which, |_t, v| {
                let c = v[0].concat_rows(v[1]);
                let m = c.mean_rows();
                m.dot(m).scalar_value()
            });
        }
    }

    #[test]
    fn gather_and_pick_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table = randn(&mut rng, &[6, 3]);
        check_grads(&[table.clone()], 0, |_t, v| {
            let seq = v[0].gather_rows(&[1, 1, 4]);
            let pooled = seq.mean_rows();
            pooled.dot(pooled).scalar_value()
        });
        let vec = randn(&mut rng, &[5]);
        check_grads(&[vec.clone()], 0, |_t, v| {
            let s = v[0].softmax_vec();
            let kept = s.gather(&[3, 0]);
            let total = kept.sum();
            kept.scale_by(total.recip()).pick(0).scalar_value()
        });
    }

    #[test]
    fn scalar_chain_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = randn(&mut rng, &[4]);
        let w = randn(&mut rng, &[4]);
        for which in 0..2 {
            check_grads(&[u.clone(), w.clone()], which, |_t, v| {
                // cosine-similarity-shaped composite
                let d = v[0].dot(v[1]);
                let nu = v[0].dot(v[0]).sqrt();
                let nw = v[1].dot(v[1]).sqrt();
                d.mul(nu.mul(nw).recip()).scalar_value()
            });
        }
    }

    #[test]
    fn frozen_leaves_are_pruned() {
        let tape = Tape::new();
        let a = tape.leaf(Array2::<f64>::ones((3, 3)).into_dyn(), false);
        let b = tape.leaf(Array2::<f64>::ones((3, 3)).into_dyn(), true);
        let y = a.matmul(b).sum();
        let grads = tape.backward(y);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn conv_shapes() {
        let x = Array3::<f64>::zeros((3, 32, 32)).into_dyn();
        let w = Array4::<f64>::zeros((16, 3, 3, 3)).into_dyn();
        let b = Array1::<f64>::zeros(16).into_dyn();
        let tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
        let y = xv.conv2d(wv, bv, 2, 1);
        assert_eq!(y.shape(), vec![16, 16, 16]);
    }
}
