use indexmap::IndexMap;

use super::store::ParamStore;
use super::tensor::{self, Scalar, Tensor2};
use super::{NumericsError, Result};

/// Additive attention-mask value for disallowed positions.
pub const MASK_NEG: f64 = -1e9;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: Option<usize> },
    Embed { table: Var, ids: Vec<usize> },
    Transpose(Var),
    Scale(Var, f64),
    SliceCols { x: Var, start: usize, end: usize },
    ConcatCols(Vec<Var>),
    CausalMask(Var),
    MeanScalars(Vec<Var>),
    MeanRows(Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    value: Tensor2<T>,
    op: Op,
}

/// Eager reverse-mode tape. Every op computes its value immediately and
/// records enough to run `backward` once from a scalar loss. Parameters
/// are pulled in by name from a [`ParamStore`]; using the same name twice
/// returns the same node, so gradients from all uses accumulate.
///
/// Names must be unique across all stores feeding a single graph (main
/// network, adapter, and hypernetwork parameters use disjoint prefixes).
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    grads: Vec<Option<Tensor2<T>>>,
    checked: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: IndexMap::new(), grads: Vec::new(), checked: false }
    }

    /// Checked mode validates every intermediate for NaN/inf. Slow; meant
    /// for debugging and the gradient-check harness.
    pub fn with_checking(checked: bool) -> Self {
        Graph { checked, ..Self::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor2<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` was on the
    /// path to the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor2<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2<T>, op: Op) -> Result<Var> {
        if self.checked {
            value.assert_finite(op_name(&op))?;
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant leaf: participates in the forward pass, receives no gradient.
    pub fn input(&mut self, value: Tensor2<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf holding a copy of the named parameter.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        self.nodes.push(Node { value, op: Op::Param });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        self.push(value, Op::Add(a, b))
    }

    /// Broadcast-add a 1xN bias to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.add_row(&self.nodes[bias.0].value)?;
        self.push(value, Op::AddRow(a, bias))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = tensor::relu(&self.nodes[a.0].value);
        self.push(value, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = tensor::softmax_rows(&self.nodes[a.0].value);
        self.push(value, Op::SoftmaxRows(a))
    }

    /// `gain` and `bias` must be 1xN rows matching the columns of `x`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let g = self.nodes[gain.0].value.to_tensor1();
        let b = self.nodes[bias.0].value.to_tensor1();
        let value = tensor::layer_norm(&self.nodes[x.0].value, &g, &b, eps)?;
        self.push(value, Op::LayerNorm { x, gain, bias, eps })
    }

    /// Scalar (1x1) mean token-level negative log-likelihood.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var> {
        let loss = tensor::cross_entropy(&self.nodes[logits.0].value, targets, ignore)?;
        let value = Tensor2::from_vec(1, 1, vec![loss])?;
        self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), ignore })
    }

    /// Gathers `table` rows by id; the gradient scatters back additively.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        let mut value = Tensor2::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(NumericsError::IndexOutOfRange {
                    op: "embed",
                    index: id,
                    len: t.rows(),
                });
            }
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(value, Op::Embed { table, ids: ids.to_vec() })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.scale(T::from_f64(s));
        self.push(value, Op::Scale(a, s))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if start > end || end > src.cols() {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                len: src.cols(),
            });
        }
        let mut value = Tensor2::zeros(src.rows(), end - start);
        for r in 0..src.rows() {
            value.row_mut(r).copy_from_slice(&src.row(r)[start..end]);
        }
        self.push(value, Op::SliceCols { x: a, start, end })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::Invalid("concat_cols: empty input".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut cols = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: (rows, 0),
                    right: v.shape(),
                });
            }
            cols += v.cols();
        }
        let mut value = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                value.row_mut(r)[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Adds `MASK_NEG` to every entry above the diagonal so position i can
    /// only attend to positions <= i after the softmax.
    pub fn causal_mask(&mut self, scores: Var) -> Result<Var> {
        let src = &self.nodes[scores.0].value;
        let mut value = src.clone();
        let neg = T::from_f64(MASK_NEG);
        for r in 0..value.rows() {
            for c in (r + 1)..value.cols() {
                let v = value.get(r, c) + neg;
                value.set(r, c, v);
            }
        }
        self.push(value, Op::CausalMask(scores))
    }

    /// Mean of several 1x1 scalars, as a 1x1 scalar.
    pub fn mean_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::Invalid("mean_scalars: empty input".into()));
        }
        let mut sum = T::zero();
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape() != (1, 1) {
                return Err(NumericsError::ShapeMismatch {
                    op: "mean_scalars",
                    left: (1, 1),
                    right: v.shape(),
                });
            }
            sum += v.data()[0];
        }
        let value = Tensor2::from_vec(1, 1, vec![sum / T::from_f64(parts.len() as f64)])?;
        self.push(value, Op::MeanScalars(parts.to_vec()))
    }

    /// Column-wise mean over rows: RxC -> 1xC.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if src.rows() == 0 {
            return Err(NumericsError::Invalid("mean_rows: empty input".into()));
        }
        let mut value = Tensor2::zeros(1, src.cols());
        for r in 0..src.rows() {
            for (o, &v) in value.row_mut(0).iter_mut().zip(src.row(r)) {
                *o += v;
            }
        }
        let inv = T::from_f64(1.0 / src.rows() as f64);
        for o in value.data_mut() {
            *o *= inv;
        }
        self.push(value, Op::MeanRows(a))
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let value = Tensor2::from_vec(rows, cols, src.data().to_vec())?;
        self.push(value, Op::Reshape(a))
    }

    /// Reverse sweep from a scalar loss. Gradients for every reachable node
    /// are available via [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(NumericsError::Invalid(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor2::from_vec(1, 1, vec![T::one()])?);

        for id in (0..=loss.0).rev() {
            let Some(gout) = self.grads[id].take() else { continue };
            // Put it back for callers; ops below read `gout` directly.
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let da = gout.matmul_nt(&self.nodes[b.0].value)?;
                    let db = self.nodes[a.0].value.matmul_tn(&gout)?;
                    self.acc(a, da)?;
                    self.acc(b, db)?;
                }
                Op::Add(a, b) => {
                    self.acc(a, gout.clone())?;
                    self.acc(b, gout.clone())?;
                }
                Op::AddRow(a, bias) => {
                    let mut dbias = Tensor2::zeros(1, gout.cols());
                    for r in 0..gout.rows() {
                        for (o, &g) in dbias.row_mut(0).iter_mut().zip(gout.row(r)) {
                            *o += g;
                        }
                    }
                    self.acc(a, gout.clone())?;
                    self.acc(bias, dbias)?;
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let mut da = gout.clone();
                    for (d, &v) in da.data_mut().iter_mut().zip(x.data()) {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    self.acc(a, da)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let mut da = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = gout.row(r);
                        let mut dot = T::zero();
                        for (&yv, &gv) in yr.iter().zip(gr) {
                            dot += yv * gv;
                        }
                        for ((d, &yv), &gv) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    self.acc(a, da)?;
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (dx, dg, db) = self.layer_norm_backward(x, gain, eps, &gout)?;
                    self.acc(x, dx)?;
                    self.acc(gain, dg)?;
                    self.acc(bias, db)?;
                }
                Op::CrossEntropy { logits, targets, ignore } => {
                    let g = gout.data()[0];
                    let lv = &self.nodes[logits.0].value;
                    let probs = tensor::softmax_rows(lv);
                    let count = targets.iter().filter(|&&t| Some(t) != ignore).count();
                    let scale = g / T::from_f64(count as f64);
                    let mut dl = Tensor2::zeros(lv.rows(), lv.cols());
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == ignore {
                            continue;
                        }
                        let pr = probs.row(r);
                        let dr = dl.row_mut(r);
                        for (d, &p) in dr.iter_mut().zip(pr) {
                            *d = p * scale;
                        }
                        dr[t] -= scale;
                    }
                    self.acc(logits, dl)?;
                }
                Op::Embed { table, ids } => {
                    let t = &self.nodes[table.0].value;
                    let mut dt = Tensor2::zeros(t.rows(), t.cols());
                    for (r, &idx) in ids.iter().enumerate() {
                        for (o, &g) in dt.row_mut(idx).iter_mut().zip(gout.row(r)) {
                            *o += g;
                        }
                    }
                    self.acc(table, dt)?;
                }
                Op::Transpose(a) => {
                    self.acc(a, gout.transpose())?;
                }
                Op::Scale(a, s) => {
                    self.acc(a, gout.scale(T::from_f64(s)))?;
                }
                Op::SliceCols { x, start, end } => {
                    let src = &self.nodes[x.0].value;
                    let mut dx = Tensor2::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        dx.row_mut(r)[start..end].copy_from_slice(gout.row(r));
                    }
                    self.acc(x, dx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in &parts {
                        let w = self.nodes[p.0].value.cols();
                        let mut dp = Tensor2::zeros(gout.rows(), w);
                        for r in 0..gout.rows() {
                            dp.row_mut(r).copy_from_slice(&gout.row(r)[at..at + w]);
                        }
                        at += w;
                        self.acc(p, dp)?;
                    }
                }
                Op::CausalMask(a) => {
                    self.acc(a, gout.clone())?;
                }
                Op::MeanScalars(parts) => {
                    let share = gout.data()[0] / T::from_f64(parts.len() as f64);
                    for &p in &parts {
                        self.acc(p, Tensor2::from_vec(1, 1, vec![share])?)?;
                    }
                }
                Op::MeanRows(a) => {
                    let src = &self.nodes[a.0].value;
                    let inv = T::from_f64(1.0 / src.rows() as f64);
                    let mut da = Tensor2::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        for (d, &g) in da.row_mut(r).iter_mut().zip(gout.row(0)) {
                            *d = g * inv;
                        }
                    }
                    self.acc(a, da)?;
                }
                Op::Reshape(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    self.acc(a, Tensor2::from_vec(r, c, gout.data().to_vec())?)?;
                }
            }
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn layer_norm_backward(
        &self,
        x: Var,
        gain: Var,
        eps: f64,
        gout: &Tensor2<T>,
    ) -> Result<(Tensor2<T>, Tensor2<T>, Tensor2<T>)> {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let n = T::from_f64(xv.cols() as f64);
        let eps = T::from_f64(eps);
        let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
        let mut dg = Tensor2::zeros(1, xv.cols());
        let mut db = Tensor2::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let grow = gout.row(r);
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean = mean / n;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var / n;
            let inv_std = (var + eps).sqrt().recip();

            // dxhat, plus accumulation into the affine params.
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            let mut dxhat = vec![T::zero(); xv.cols()];
            for c in 0..xv.cols() {
                let xhat = (row[c] - mean) * inv_std;
                let d = grow[c] * gv.data()[c];
                dxhat[c] = d;
                sum_dxhat += d;
                sum_dxhat_xhat += d * xhat;
                dg.data_mut()[c] += grow[c] * xhat;
                db.data_mut()[c] += grow[c];
            }
            let mean_dxhat = sum_dxhat / n;
            let mean_dxhat_xhat = sum_dxhat_xhat / n;
            for c in 0..xv.cols() {
                let xhat = (row[c] - mean) * inv_std;
                dx.row_mut(r)[c] = inv_std * (dxhat[c] - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
        Ok((dx, dg, db))
    }

    fn acc(&mut self, v: Var, delta: Tensor2<T>) -> Result<()> {
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }

    /// Adds the gradient of every parameter node whose name exists in
    /// `store` into that store. Names absent from `store` are skipped so
    /// one graph can serve several stores (e.g. a frozen main network next
    /// to a trainable hypernetwork). Returns how many were exported.
    pub fn export_grads(&self, store: &mut ParamStore<T>) -> Result<usize> {
        let mut exported = 0;
        for (name, &var) in &self.params {
            if !store.contains(name) {
                continue;
            }
            if let Some(g) = self.grad(var) {
                let g = g.clone();
                store.accumulate_grad(name, &g)?;
                exported += 1;
            }
        }
        Ok(exported)
    }

    /// Names of parameters touched by this graph, in first-use order.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "input",
        Op::Param => "param",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Relu(_) => "relu",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Embed { .. } => "embed",
        Op::Transpose(_) => "transpose",
        Op::Scale(..) => "scale",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(_) => "concat_cols",
        Op::CausalMask(_) => "causal_mask",
        Op::MeanScalars(_) => "mean_scalars",
        Op::MeanRows(_) => "mean_rows",
        Op::Reshape(_) => "reshape",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    /// Central-difference derivative of `f` w.r.t. each element of the
    /// named parameter, for op-level spot checks.
    fn numeric_grad(
        store: &mut ParamStore<f64>,
        name: &str,
        mut f: impl FnMut(&ParamStore<f64>) -> f64,
    ) -> Tensor2<f64> {
        let eps = 1e-6;
        let shape = store.value(name).unwrap().shape();
        let mut out = Tensor2::zeros(shape.0, shape.1);
        for i in 0..out.len() {
            let orig = store.value(name).unwrap().data()[i];
            store.get_mut(name).unwrap().value.data_mut()[i] = orig + eps;
            let hi = f(store);
            store.get_mut(name).unwrap().value.data_mut()[i] = orig - eps;
            let lo = f(store);
            store.get_mut(name).unwrap().value.data_mut()[i] = orig;
            out.data_mut()[i] = (hi - lo) / (2.0 * eps);
        }
        out
    }

    fn rand_store(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore<f64> {
        let mut rng = Rng::new(seed);
        let mut s = ParamStore::new();
        for &(name, r, c) in shapes {
            let data: Vec<f64> = (0..r * c).map(|_| rng.range_f64(-1.0, 1.0)).collect();
            s.insert_matrix(name, Tensor2::from_vec(r, c, data).unwrap()).unwrap();
        }
        s
    }

    fn assert_close(a: &Tensor2<f64>, b: &Tensor2<f64>, tol: f64, what: &str) {
        assert_eq!(a.shape(), b.shape(), "{what}: shape");
        for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
            let rel = (x - y).abs() / (x.abs() + y.abs()).max(1e-8);
            assert!(rel < tol, "{what}[{i}]: analytic {x} vs numeric {y} (rel {rel:.3e})");
        }
    }

    #[test]
    fn matmul_chain_gradients() {
        let mut store = rand_store(&[("a", 3, 4), ("b", 4, 2)], 1);
        let f = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let a = g.param(s, "a").unwrap();
            let b = g.param(s, "b").unwrap();
            let c = g.matmul(a, b).unwrap();
            let r = g.relu(c).unwrap();
            let m = g.mean_rows(r).unwrap();
            // Reduce to a scalar: transpose to 2x1, mean over rows again.
            let t = g.transpose(m).unwrap();
            let out = g.mean_rows(t).unwrap();
            g.value(out).data()[0]
        };
        let mut g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let b = g.param(&store, "b").unwrap();
        let c = g.matmul(a, b).unwrap();
        let r = g.relu(c).unwrap();
        let m = g.mean_rows(r).unwrap();
        let t = g.transpose(m).unwrap();
        let out = g.mean_rows(t).unwrap();
        g.backward(out).unwrap();

        for name in ["a", "b"] {
            let var = if name == "a" { a } else { b };
            let num = numeric_grad(&mut store, name, f);
            assert_close(g.grad(var).unwrap(), &num, 1e-5, name);
        }
    }

    #[test]
    fn softmax_cross_entropy_gradients() {
        let mut store = rand_store(&[("w", 4, 6)], 2);
        let targets = [1usize, 5, 0, 2];
        let f = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let w = g.param(s, "w").unwrap();
            let loss = g.cross_entropy(w, &targets, None).unwrap();
            g.value(loss).data()[0]
        };
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let loss = g.cross_entropy(w, &targets, None).unwrap();
        g.backward(loss).unwrap();
        let num = numeric_grad(&mut store, "w", f);
        assert_close(g.grad(w).unwrap(), &num, 1e-6, "cross_entropy");
    }

    #[test]
    fn cross_entropy_ignores_padding_rows() {
        let mut store = rand_store(&[("w", 4, 6)], 3);
        let targets = [1usize, 0, 0, 2];
        let f = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let w = g.param(s, "w").unwrap();
            let loss = g.cross_entropy(w, &targets, Some(0)).unwrap();
            g.value(loss).data()[0]
        };
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let loss = g.cross_entropy(w, &targets, Some(0)).unwrap();
        g.backward(loss).unwrap();
        let num = numeric_grad(&mut store, "w", f);
        let analytic = g.grad(w).unwrap();
        assert_close(analytic, &num, 1e-6, "cross_entropy ignore");
        // Ignored rows get exactly zero gradient.
        assert!(analytic.row(1).iter().all(|&v| v == 0.0));
        assert!(analytic.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_gradients() {
        let mut store = rand_store(&[("x", 3, 5), ("g", 1, 5), ("b", 1, 5)], 4);
        let targets = [2usize, 0, 4];
        let f = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let x = g.param(s, "x").unwrap();
            let gain = g.param(s, "g").unwrap();
            let bias = g.param(s, "b").unwrap();
            let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
            let loss = g.cross_entropy(y, &targets, None).unwrap();
            g.value(loss).data()[0]
        };
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let gain = g.param(&store, "g").unwrap();
        let bias = g.param(&store, "b").unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let loss = g.cross_entropy(y, &targets, None).unwrap();
        g.backward(loss).unwrap();
        for (name, var) in [("x", x), ("g", gain), ("b", bias)] {
            let num = numeric_grad(&mut store, name, f);
            assert_close(g.grad(var).unwrap(), &num, 1e-5, name);
        }
    }

    #[test]
    fn softmax_attention_block_gradients() {
        // softmax(mask(q k^T / sqrt(d))) v feeding a cross entropy, the same
        // shape of computation the decoder self-attention uses.
        let mut store = rand_store(&[("q", 3, 4), ("k", 3, 4), ("v", 3, 6)], 5);
        let targets = [1usize, 2, 3];
        let run = |s: &ParamStore<f64>, want_grads: bool| {
            let mut g = Graph::new();
            let q = g.param(s, "q").unwrap();
            let k = g.param(s, "k").unwrap();
            let v = g.param(s, "v").unwrap();
            let kt = g.transpose(k).unwrap();
            let scores = g.matmul(q, kt).unwrap();
            let scaled = g.scale(scores, 0.5).unwrap();
            let masked = g.causal_mask(scaled).unwrap();
            let attn = g.softmax_rows(masked).unwrap();
            let out = g.matmul(attn, v).unwrap();
            let loss = g.cross_entropy(out, &targets, None).unwrap();
            if want_grads {
                g.backward(loss).unwrap();
            }
            (g, q, k, v, loss)
        };
        let (g, q, k, v, _) = run(&store, true);
        for (name, var) in [("q", q), ("k", k), ("v", v)] {
            let num = numeric_grad(&mut store, name, |s| {
                let (g, _, _, _, loss) = run(s, false);
                g.value(loss).data()[0]
            });
            assert_close(g.grad(var).unwrap(), &num, 1e-4, name);
        }
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor2::zeros(3, 3));
        let masked = g.causal_mask(x).unwrap();
        let attn = g.softmax_rows(masked).unwrap();
        let a = g.value(attn);
        // Row 0 attends only to position 0; row 1 splits over 0..=1.
        assert!((a.get(0, 0) - 1.0).abs() < 1e-9);
        assert!(a.get(0, 1) < 1e-9 && a.get(0, 2) < 1e-9);
        assert!((a.get(1, 0) - 0.5).abs() < 1e-9);
        assert!((a.get(2, 2) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn embed_slice_concat_gradients() {
        let mut store = rand_store(&[("emb", 7, 6)], 6);
        let ids = [2usize, 5, 2];
        let targets = [0usize, 1, 2];
        let run = |s: &ParamStore<f64>, want_grads: bool| {
            let mut g = Graph::new();
            let emb = g.param(s, "emb").unwrap();
            let x = g.embed(emb, &ids).unwrap();
            let left = g.slice_cols(x, 0, 3).unwrap();
            let right = g.slice_cols(x, 3, 6).unwrap();
            let back = g.concat_cols(&[right, left]).unwrap();
            let loss = g.cross_entropy(back, &targets, None).unwrap();
            if want_grads {
                g.backward(loss).unwrap();
            }
            (g, emb, loss)
        };
        let (g, emb, _) = run(&store, true);
        let num = numeric_grad(&mut store, "emb", |s| {
            let (g, _, loss) = run(s, false);
            g.value(loss).data()[0]
        });
        assert_close(g.grad(emb).unwrap(), &num, 1e-5, "emb");
        // Row 2 was used twice, so its gradient is the sum of both uses;
        // unused rows stay exactly zero.
        let ga = g.grad(emb).unwrap();
        assert!(ga.row(0).iter().all(|&v| v == 0.0));
        assert!(ga.row(6).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reused_param_accumulates_gradient() {
        // loss = mean(x @ x^T) uses "x" twice through the cache.
        let mut store = rand_store(&[("x", 2, 3)], 7);
        let run = |s: &ParamStore<f64>, want: bool| {
            let mut g = Graph::new();
            let x = g.param(s, "x").unwrap();
            let x2 = g.param(s, "x").unwrap();
            assert_eq!(x, x2);
            let xt = g.transpose(x2).unwrap();
            let sq = g.matmul(x, xt).unwrap();
            let m = g.mean_rows(sq).unwrap();
            let t = g.transpose(m).unwrap();
            let out = g.mean_rows(t).unwrap();
            if want {
                g.backward(out).unwrap();
            }
            (g, x, out)
        };
        let (g, x, _) = run(&store, true);
        let num = numeric_grad(&mut store, "x", |s| {
            let (g, _, out) = run(s, false);
            g.value(out).data()[0]
        });
        assert_close(g.grad(x).unwrap(), &num, 1e-5, "x");
    }

    #[test]
    fn mean_scalars_and_reshape_gradients() {
        let mut store = rand_store(&[("w", 2, 6)], 8);
        let t1 = [1usize, 3];
        let t2 = [0usize];
        let run = |s: &ParamStore<f64>, want: bool| {
            let mut g = Graph::new();
            let w = g.param(s, "w").unwrap();
            let wide = g.reshape(w, 3, 4).unwrap();
            let top = g.slice_cols(wide, 0, 4).unwrap();
            let l1 = g.cross_entropy(top, &[t1[0], t1[1], 0], Some(0)).unwrap();
            let row = g.reshape(w, 1, 12).unwrap();
            let narrow = g.slice_cols(row, 0, 4).unwrap();
            let l2 = g.cross_entropy(narrow, &t2, None).unwrap();
            let loss = g.mean_scalars(&[l1, l2]).unwrap();
            if want {
                g.backward(loss).unwrap();
            }
            (g, w, loss)
        };
        let (g, w, _) = run(&store, true);
        let num = numeric_grad(&mut store, "w", |s| {
            let (g, _, loss) = run(s, false);
            g.value(loss).data()[0]
        });
        assert_close(g.grad(w).unwrap(), &num, 1e-5, "w");
    }

    #[test]
    fn export_grads_routes_by_store() {
        let main = rand_store(&[("core.w", 2, 2)], 9);
        let mut aux = rand_store(&[("extra.w", 2, 2)], 10);
        let mut g = Graph::new();
        let a = g.param(&main, "core.w").unwrap();
        let b = g.param(&aux, "extra.w").unwrap();
        let c = g.matmul(a, b).unwrap();
        let loss = g.cross_entropy(c, &[0, 1], None).unwrap();
        g.backward(loss).unwrap();

        let n = g.export_grads(&mut aux).unwrap();
        assert_eq!(n, 1);
        let got = &aux.get("extra.w").unwrap().grad;
        assert!(got.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor2::zeros(2, 2));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn checked_mode_flags_non_finite() {
        let mut g = Graph::<f64>::with_checking(true);
        let x = g.input(Tensor2::from_vec(1, 2, vec![800.0, 0.0]).unwrap());
        // exp(800) overflows in the softmax numerator only without the
        // max-subtraction; with it the result is finite, so drive a real
        // overflow through matmul instead.
        let big = g.input(Tensor2::from_vec(2, 1, vec![f64::MAX, f64::MAX]).unwrap());
        assert!(g.matmul(x, big).is_err());
    }
}
