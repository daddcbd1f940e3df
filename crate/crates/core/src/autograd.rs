//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every model in this crate (both retriever encoders and the reader) is
//! written against [`Graph`]. A graph borrows a [`ParamStore`] immutably, so
//! forward passes never copy parameter tensors; gradients come back indexed
//! by parameter id and are applied by the optimizer afterwards.

use ndarray::{s, Array2, Axis};

use crate::params::ParamStore;

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Select {
        x: Var,
        row: usize,
        cols: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    KlDiv {
        logits: Var,
        target: Vec<f64>,
        probs: Vec<f64>,
    },
    WeightedSum {
        x: Var,
        weights: Mat,
    },
    Sum(Vec<Var>),
}

struct Node {
    value: Option<Mat>,
    op: Op,
}

/// Tape of operations recorded during one forward pass.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.store.tensor(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input that is not a stored parameter.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf; repeated calls for the same id return the same node.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    /// Adds a non-differentiable constant (broadcast if it is a single row).
    pub fn add_const(&mut self, a: Var, c: &Mat) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::AddConst(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalisation with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Mat::zeros((rows, cols));
        let mut rstd = Vec::with_capacity(rows);
        for (i, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * r;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.outer_iter_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        self.push(out, Op::Softmax(a))
    }

    /// Picks rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros((rows.len(), t.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&t.row(r));
        }
        self.push(
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out =
            ndarray::concatenate(Axis(0), &views).expect("column count mismatch in concat_rows");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row count mismatch in concat_cols");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols { x, start })
    }

    /// Gathers `x[row, cols[..]]` into a `1 × cols.len()` row.
    pub fn select(&mut self, x: Var, row: usize, cols: &[usize]) -> Var {
        let xv = self.value(x);
        let out = Mat::from_shape_fn((1, cols.len()), |(_, j)| xv[[row, cols[j]]]);
        self.push(
            out,
            Op::Select {
                x,
                row,
                cols: cols.to_vec(),
            },
        )
    }

    /// Summed token-level cross-entropy of `logits` (one row per position)
    /// against integer targets. Returns a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per logit row");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (i, mut row) in probs.outer_iter_mut().enumerate() {
            let lse = log_sum_exp(row.iter().copied());
            loss += lse - row[targets[i]];
            row.mapv_inplace(|v| (v - lse).exp());
        }
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// `KL(target ‖ softmax(logits))` for a `1 × n` logit row and a fixed
    /// target distribution.
    pub fn kl_div(&mut self, logits: Var, target: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), (1, target.len()), "kl_div expects a single row");
        let lse = log_sum_exp(lv.iter().copied());
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(target.len());
        for (&t, &s) in target.iter().zip(lv.iter()) {
            let log_p = s - lse;
            if t > 0.0 {
                loss += t * (t.ln() - log_p);
            }
            probs.push(log_p.exp());
        }
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::KlDiv {
                logits,
                target: target.to_vec(),
                probs,
            },
        )
    }

    /// `Σ x ∘ weights` as a `1 × 1` node (used to project tensors to scalars
    /// in gradient checks).
    pub fn weighted_sum(&mut self, x: Var, weights: &Mat) -> Var {
        let total = (self.value(x) * weights).sum();
        self.push(
            Mat::from_elem((1, 1), total),
            Op::WeightedSum {
                x,
                weights: weights.clone(),
            },
        )
    }

    /// Element-wise sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "sum of nothing");
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            out += self.value(p);
        }
        self.push(out, Op::Sum(parts.to_vec()))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones(self.value(root).raw_dim()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::Gelu(a) => {
                    let mut da = g;
                    da.zip_mut_with(self.value(*a), |d, &x| *d *= gelu_grad(x));
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gamma);
                    let dgamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * gv;
                    let cols = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.raw_dim());
                    for i in 0..xhat.nrows() {
                        let dr = dxhat.row(i);
                        let xr = xhat.row(i);
                        let mean_d = dr.sum() / cols;
                        let mean_dx = dr.dot(&xr) / cols;
                        for j in 0..xhat.ncols() {
                            dx[[i, j]] = rstd[i] * (dr[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let mut da = &g * y;
                    for (mut drow, yrow) in da.outer_iter_mut().zip(y.outer_iter()) {
                        let s = drow.sum();
                        drow.zip_mut_with(&yrow, |d, &yv| *d -= yv * s);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Gather { table, rows } => {
                    let mut dt = Mat::zeros(self.value(*table).raw_dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = dt.row_mut(r);
                        dst += &g.row(i);
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        accumulate(
                            &mut grads,
                            p,
                            g.slice(s![offset..offset + n, ..]).to_owned(),
                        );
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        accumulate(
                            &mut grads,
                            p,
                            g.slice(s![.., offset..offset + n]).to_owned(),
                        );
                        offset += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let mut dx = Mat::zeros(self.value(*x).raw_dim());
                    dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Mat::zeros(self.value(*x).raw_dim());
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Select { x, row, cols } => {
                    let mut dx = Mat::zeros(self.value(*x).raw_dim());
                    for (j, &c) in cols.iter().enumerate() {
                        dx[[*row, c]] += g[[0, j]];
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g[[0, 0]];
                    let mut dl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        dl[[i, t]] -= 1.0;
                    }
                    dl *= scale;
                    accumulate(&mut grads, *logits, dl);
                }
                Op::KlDiv {
                    logits,
                    target,
                    probs,
                } => {
                    let scale = g[[0, 0]];
                    let mass: f64 = target.iter().sum();
                    let dl = Mat::from_shape_fn((1, target.len()), |(_, j)| {
                        scale * (probs[j] * mass - target[j])
                    });
                    accumulate(&mut grads, *logits, dl);
                }
                Op::WeightedSum { x, weights } => {
                    accumulate(&mut grads, *x, weights * g[[0, 0]]);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        accumulate(&mut grads, p, g.clone());
                    }
                }
            }
        }

        let mut param_grads: Vec<Option<Mat>> = vec![None; self.store.len()];
        for (id, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                param_grads[id] = grads[v.0].take();
            }
        }
        Gradients {
            nodes: grads,
            params: param_grads,
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of a non-parameter leaf.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: usize) -> Option<&Mat> {
        self.params.get(id).and_then(|g| g.as_ref())
    }

    pub fn into_params(self) -> Vec<Option<Mat>> {
        self.params
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Numerically stable `ln Σ exp(v)`; `-inf` for an empty input.
pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks d(out)/d(input) for a graph builder against central differences.
    fn check<F>(inputs: Vec<Mat>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let store = ParamStore::default();
        let loss_of = |inputs: &[Mat]| {
            let mut g = Graph::new(&store);
            let vars: Vec<_> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
            let out = build(&mut g, &vars);
            g.scalar(out)
        };
        let mut g = Graph::new(&store);
        let vars: Vec<_> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let eps = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Mat::zeros(input.raw_dim()));
            for idx in 0..input.len() {
                let (r, c) = (idx / input.ncols(), idx % input.ncols());
                let mut plus = inputs.clone();
                plus[k][[r, c]] += eps;
                let mut minus = inputs.clone();
                minus[k][[r, c]] -= eps;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let a = analytic[[r, c]];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {k} [{r},{c}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn primitive_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&mut rng, 3, 4);
        let w2 = random(&mut rng, 4, 5);
        check(
            vec![random(&mut rng, 3, 5), random(&mut rng, 5, 4)],
            |g, v| {
                let m = g.matmul(v[0], v[1]);
                g.weighted_sum(m, &w)
            },
        );
        check(
            vec![random(&mut rng, 3, 5), random(&mut rng, 4, 5)],
            |g, v| {
                let m = g.matmul_bt(v[0], v[1]);
                let m = g.gelu(m);
                g.weighted_sum(m, &w)
            },
        );
        check(
            vec![
                random(&mut rng, 4, 5),
                random(&mut rng, 1, 5),
                random(&mut rng, 1, 5),
            ],
            |g, v| {
                let m = g.layer_norm(v[0], v[1], v[2]);
                let m = g.softmax(m);
                g.weighted_sum(m, &w2)
            },
        );
        check(
            vec![random(&mut rng, 6, 5), random(&mut rng, 1, 5)],
            |g, v| {
                let rows = g.gather(v[0], &[2, 0, 2, 5]);
                let rows = g.add_row(rows, v[1]);
                let a = g.slice_cols(rows, 1, 3);
                let b = g.slice_rows(rows, 1, 2);
                let c = g.concat_cols(&[a, a]);
                let d = g.concat_rows(&[b, b]);
                let c = g.slice_cols(c, 0, 5);
                let e = g.mul(c, d);
                let e = g.scale(e, 0.7);
                g.weighted_sum(e, &w2)
            },
        );
        check(vec![random(&mut rng, 3, 6)], |g, v| {
            let ce = g.cross_entropy(v[0], &[1, 5, 0]);
            let sel = g.select(v[0], 1, &[4, 2, 0]);
            let kl = g.kl_div(sel, &[0.2, 0.0, 0.8]);
            let k2 = g.scale(kl, 3.0);
            g.sum(&[ce, k2])
        });
    }

    #[test]
    fn parameters_are_shared_nodes() {
        let mut store = ParamStore::default();
        let id = store.insert("w", Mat::from_elem((2, 2), 1.5));
        let mut g = Graph::new(&store);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let m = g.mul(a, b);
        let s = g.weighted_sum(m, &Mat::ones((2, 2)));
        let grads = g.backward(s);
        assert_eq!(grads.param(id).unwrap(), &Mat::from_elem((2, 2), 3.0));
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(v.iter().copied()) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(std::iter::empty()), f64::NEG_INFINITY);
    }
}
