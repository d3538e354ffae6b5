use super::kernels;
use super::{ensure_finite, NumericsError, Tensor};

/// Handle into a [`GradTape`]. Ids are only meaningful on the tape that
/// issued them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

struct BackwardStep {
    parents: Vec<TensorId>,
    /// Maps the gradient at this node to one contribution per parent, in
    /// `parents` order. Parents that do not need gradient get an empty vec.
    apply: Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>,
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    step: Option<BackwardStep>,
}

/// Reverse-mode gradient tape. Nodes are appended in creation order, so
/// walking ids in reverse visits each node once in reverse topological order.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

type OpResult = Result<TensorId, NumericsError>;

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t` as a leaf; its `requires_grad` flag is honored.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value: t, grad: None, step: None });
        id
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, mut t: Tensor) -> TensorId {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. this node, if any.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        step: Option<BackwardStep>,
    ) -> OpResult {
        ensure_finite(op, &data)?;
        let mut value = Tensor::new(shape, data)?;
        value.set_requires_grad(requires_grad);
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, grad: None, step: if requires_grad { step } else { None } });
        Ok(id)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].value.requires_grad()
    }

    fn want2(&self, op: &'static str, a: TensorId, b: TensorId) -> (bool, bool, bool) {
        let _ = op;
        let (na, nb) = (self.needs(a), self.needs(b));
        (na, nb, na || nb)
    }

    /// Runs reverse-mode accumulation from a scalar output. Afterwards every
    /// `requires_grad` leaf holds a gradient of its own shape.
    pub fn backward(&mut self, out: TensorId) -> Result<(), NumericsError> {
        if !self.nodes[out.0].value.is_scalar() {
            return Err(NumericsError::NonScalarOutput {
                op: "backward",
                shape: self.nodes[out.0].value.shape().to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let Some(step) = self.nodes[i].step.as_ref() else { continue };
            let contribs = (step.apply)(&g);
            debug_assert_eq!(contribs.len(), step.parents.len());
            let parents = step.parents.clone();
            for (pid, contrib) in parents.iter().zip(contribs) {
                if contrib.is_empty() {
                    continue;
                }
                let slot = &mut grads[pid.0];
                match slot {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    None => *slot = Some(contrib),
                }
            }
        }
        for i in 0..n {
            let node = &mut self.nodes[i];
            let is_leaf = node.step.is_none();
            if let Some(g) = grads[i].take() {
                ensure_finite("backward", &g)?;
                node.grad = Some(g);
            } else if is_leaf && node.value.requires_grad() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> OpResult {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", av.shape(), bv.shape()),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = kernels::matmul(av.data(), bv.data(), m, k, n);
        let (na, nb, any) = self.want2("matmul", a, b);
        let step = any.then(|| {
            let ad = av.data().to_vec();
            let bd = bv.data().to_vec();
            BackwardStep {
                parents: vec![a, b],
                apply: Box::new(move |g| {
                    let da = if na {
                        // dA = G * B^T
                        let mut bt = vec![0.0; k * n];
                        for r in 0..k {
                            for c in 0..n {
                                bt[c * k + r] = bd[r * n + c];
                            }
                        }
                        kernels::matmul(g, &bt, m, n, k)
                    } else {
                        Vec::new()
                    };
                    let db = if nb {
                        // dB = A^T * G
                        let mut at = vec![0.0; m * k];
                        for r in 0..m {
                            for c in 0..k {
                                at[c * m + r] = ad[r * k + c];
                            }
                        }
                        kernels::matmul(&at, g, k, m, n)
                    } else {
                        Vec::new()
                    };
                    vec![da, db]
                }),
            }
        });
        self.push("matmul", vec![m, n], out, na || nb, step)
    }

    pub fn transpose(&mut self, x: TensorId) -> OpResult {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "transpose",
                detail: format!("{:?}", xv.shape()),
            });
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv.at(i, j);
            }
        }
        let needs = self.needs(x);
        let step = needs.then(|| BackwardStep {
            parents: vec![x],
            apply: Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                vec![dx]
            }),
        });
        self.push("transpose", vec![c, r], out, needs, step)
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
        fwd: impl Fn(f64, f64) -> f64,
        back: impl Fn(&[f64], &[f64], &[f64], bool, bool) -> (Vec<f64>, Vec<f64>) + 'static,
    ) -> OpResult {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NumericsError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
            });
        }
        let shape = av.shape().to_vec();
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(&x, &y)| fwd(x, y)).collect();
        let (na, nb, any) = self.want2(op, a, b);
        let step = any.then(|| {
            let ad = av.data().to_vec();
            let bd = bv.data().to_vec();
            BackwardStep {
                parents: vec![a, b],
                apply: Box::new(move |g| {
                    let (da, db) = back(g, &ad, &bd, na, nb);
                    vec![da, db]
                }),
            }
        });
        self.push(op, shape, out, na || nb, step)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> OpResult {
        self.binary_same_shape(
            "add",
            a,
            b,
            |x, y| x + y,
            |g, _, _, na, nb| {
                (
                    if na { g.to_vec() } else { Vec::new() },
                    if nb { g.to_vec() } else { Vec::new() },
                )
            },
        )
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> OpResult {
        self.binary_same_shape(
            "sub",
            a,
            b,
            |x, y| x - y,
            |g, _, _, na, nb| {
                (
                    if na { g.to_vec() } else { Vec::new() },
                    if nb { g.iter().map(|v| -v).collect() } else { Vec::new() },
                )
            },
        )
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> OpResult {
        self.binary_same_shape(
            "mul",
            a,
            b,
            |x, y| x * y,
            |g, ad, bd, na, nb| {
                (
                    if na { g.iter().zip(bd).map(|(gv, y)| gv * y).collect() } else { Vec::new() },
                    if nb { g.iter().zip(ad).map(|(gv, x)| gv * x).collect() } else { Vec::new() },
                )
            },
        )
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> OpResult {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let out: Vec<f64> = xv.data().iter().map(|&v| v * c).collect();
        let needs = self.needs(x);
        let step = needs.then(|| BackwardStep {
            parents: vec![x],
            apply: Box::new(move |g| vec![g.iter().map(|v| v * c).collect()]),
        });
        self.push("scale", shape, out, needs, step)
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> OpResult {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let out: Vec<f64> = xv.data().iter().map(|&v| v + c).collect();
        let needs = self.needs(x);
        let step = needs
            .then(|| BackwardStep { parents: vec![x], apply: Box::new(|g| vec![g.to_vec()]) });
        self.push("add_scalar", shape, out, needs, step)
    }

    pub fn exp(&mut self, x: TensorId) -> OpResult {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let out: Vec<f64> = xv.data().iter().map(|&v| v.exp()).collect();
        let needs = self.needs(x);
        let step = needs.then(|| {
            let outc = out.clone();
            BackwardStep {
                parents: vec![x],
                apply: Box::new(move |g| vec![g.iter().zip(&outc).map(|(gv, o)| gv * o).collect()]),
            }
        });
        self.push("exp", shape, out, needs, step)
    }

    /// Clamps to `[lo, hi]`; gradient passes through strictly inside the
    /// interval and is zero outside.
    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> OpResult {
        if !(lo < hi) {
            return Err(NumericsError::InvalidArgument {
                op: "clamp",
                detail: format!("lo {lo} must be below hi {hi}"),
            });
        }
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let out: Vec<f64> = xv.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        let needs = self.needs(x);
        let step = needs.then(|| {
            let xd = xv.data().to_vec();
            BackwardStep {
                parents: vec![x],
                apply: Box::new(move |g| {
                    vec![g
                        .iter()
                        .zip(&xd)
                        .map(|(gv, &v)| if v > lo && v < hi { *gv } else { 0.0 })
                        .collect()]
                }),
            }
        });
        self.push("clamp", shape, out, needs, step)
    }

    pub fn gelu(&mut self, x: TensorId) -> OpResult {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let out: Vec<f64> = xv.data().iter().map(|&v| kernels::gelu(v)).collect();
        let needs = self.needs(x);
        let step = needs.then(|| {
            let xd = xv.data().to_vec();
            BackwardStep {
                parents: vec![x],
                apply: Box::new(move |g| {
                    vec![g.iter().zip(&xd).map(|(gv, &v)| gv * kernels::gelu_grad(v)).collect()]
                }),
            }
        });
        self.push("gelu", shape, out, needs, step)
    }

    /// Adds a `[1, d]` (or `[d]`) row vector to every row of `x`.
    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> OpResult {
        let (xv, rv) = (self.value(x), self.value(row));
        let d = xv.cols();
        if rv.numel() != d || xv.shape().len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                detail: format!("{:?} + {:?}", xv.shape(), rv.shape()),
            });
        }
        let n = xv.rows();
        let rd = rv.data().to_vec();
        let mut out = xv.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += rd[j];
            }
        }
        let (nx, nr, any) = self.want2("add_row", x, row);
        let step = any.then(|| BackwardStep {
            parents: vec![x, row],
            apply: Box::new(move |g| {
                let dx = if nx { g.to_vec() } else { Vec::new() };
                let dr = if nr {
                    let mut acc = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            acc[j] += g[i * d + j];
                        }
                    }
                    acc
                } else {
                    Vec::new()
                };
                vec![dx, dr]
            }),
        });
        self.push("add_row", vec![n, d], out, nx || nr, step)
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> OpResult {
        let xv = self.value(x);
        let total: f64 = xv.data().iter().sum();
        let numel = xv.numel();
        let needs = self.needs(x);
        let step = needs.then(|| BackwardStep {
            parents: vec![x],
            apply: Box::new(move |g| vec![vec![g[0]; numel]]),
        });
        self.push("sum_all", vec![1], vec![total], needs, step)
    }

    pub fn mean_all(&mut self, x: TensorId) -> OpResult {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean along an axis of a 2-D tensor. Axis 0 yields `[1, cols]`,
    /// axis 1 yields `[rows, 1]`.
    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> OpResult {
        let xv = self.value(x);
        if xv.shape().len() != 2 || axis > 1 {
            return Err(NumericsError::InvalidArgument {
                op: "mean_axis",
                detail: format!("axis {axis} on shape {:?}", xv.shape()),
            });
        }
        let (r, c) = (xv.rows(), xv.cols());
        let (out_shape, out) = if axis == 0 {
            let mut acc = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    acc[j] += xv.at(i, j);
                }
            }
            acc.iter_mut().for_each(|v| *v /= r as f64);
            (vec![1, c], acc)
        } else {
            let mut acc = vec![0.0; r];
            for i in 0..r {
                for j in 0..c {
                    acc[i] += xv.at(i, j);
                }
            }
            acc.iter_mut().for_each(|v| *v /= c as f64);
            (vec![r, 1], acc)
        };
        let needs = self.needs(x);
        let step = needs.then(|| BackwardStep {
            parents: vec![x],
            apply: Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                if axis == 0 {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[j] / r as f64;
                        }
                    }
                } else {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[i] / c as f64;
                        }
                    }
                }
                vec![dx]
            }),
        });
        self.push("mean_axis", out_shape, out, needs, step)
    }

    // ── Softmax family ──────────────────────────────────────────────────

    /// Softmax along `axis` of a 1-D or 2-D tensor.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> OpResult {
        let xv = self.value(x);
        let dims = xv.shape().len();
        if dims > 2 || axis >= dims {
            return Err(NumericsError::InvalidArgument {
                op: "softmax",
                detail: format!("axis {axis} on shape {:?}", xv.shape()),
            });
        }
        let (r, c) = if dims == 1 { (1, xv.cols()) } else { (xv.rows(), xv.cols()) };
        let row_wise = dims == 1 || axis == 1;
        let shape = xv.shape().to_vec();
        let mut out = vec![0.0; r * c];
        if row_wise {
            for i in 0..r {
                let src = &xv.data()[i * c..(i + 1) * c];
                kernels::softmax_slice(src, &mut out[i * c..(i + 1) * c]);
            }
        } else {
            let mut col = vec![0.0; r];
            let mut sm = vec![0.0; r];
            for j in 0..c {
                for i in 0..r {
                    col[i] = xv.at(i, j);
                }
                kernels::softmax_slice(&col, &mut sm);
                for i in 0..r {
                    out[i * c + j] = sm[i];
                }
            }
        }
        let needs = self.needs(x);
        let step = needs.then(|| {
            let s = out.clone();
            BackwardStep {
                parents: vec![x],
                apply: Box::new(move |g| {
                    let mut dx = vec![0.0; r * c];
                    if row_wise {
                        for i in 0..r {
                            let sl = &s[i * c..(i + 1) * c];
                            let gl = &g[i * c..(i + 1) * c];
                            let dot: f64 = sl.iter().zip(gl).map(|(sv, gv)| sv * gv).sum();
                            for j in 0..c {
                                dx[i * c + j] = sl[j] * (gl[j] - dot);
                            }
                        }
                    } else {
                        for j in 0..c {
                            let mut dot = 0.0;
                            for i in 0..r {
                                dot += s[i * c + j] * g[i * c + j];
                            }
                            for i in 0..r {
                                dx[i * c + j] = s[i * c + j] * (g[i * c + j] - dot);
                            }
                        }
                    }
                    vec![dx]
                }),
            }
        });
        self.push("softmax", shape, out, needs, step)
    }

    /// Row-wise softmax of a square score matrix restricted to `j <= i`;
    /// entries above the diagonal are exactly zero and receive no gradient.
    pub fn causal_softmax(&mut self, x: TensorId) -> OpResult {
        let xv = self.value(x);
        if xv.shape().len() != 2 || xv.rows() != xv.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "causal_softmax",
                detail: format!("{:?} is not square", xv.shape()),
            });
        }
        let n = xv.rows();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let src = &xv.data()[i * n..i * n + i + 1];
            kernels::softmax_slice(src, &mut out[i * n..i * n + i + 1]);
        }
        let needs = self.needs(x);
        let step = needs.then(|| {
            let s = out.clone();
            BackwardStep {
                parents: vec![x],
                apply: Box::new(move |g| {
                    let mut dx = vec![0.0; n * n];
                    for i in 0..n {
                        let sl = &s[i * n..i * n + i + 1];
                        let gl = &g[i * n..i * n + i + 1];
                        let dot: f64 = sl.iter().zip(gl).map(|(sv, gv)| sv * gv).sum();
                        for j in 0..=i {
                            dx[i * n + j] = sl[j] * (gl[j] - dot);
                        }
                    }
                    vec![dx]
                }),
            }
        });
        self.push("causal_softmax", vec![n, n], out, needs, step)
    }

    // ── Normalization ───────────────────────────────────────────────────

    /// Per-row layer normalization with learnable gain and bias of length
    /// `cols`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> OpResult {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if xv.shape().len() != 2 || gv.numel() != d || bv.numel() != d {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            });
        }
        let n = xv.rows();
        let gd = gv.data().to_vec();
        let bd = bv.data().to_vec();
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[i * d + j] = xh;
                out[i * d + j] = gd[j] * xh + bd[j];
            }
        }
        let (nx, ng) = (self.needs(x), self.needs(gamma));
        let nb = self.needs(beta);
        let any = nx || ng || nb;
        let step = any.then(|| BackwardStep {
            parents: vec![x, gamma, beta],
            apply: Box::new(move |g| {
                let mut dx = if nx { vec![0.0; n * d] } else { Vec::new() };
                let mut dg = if ng { vec![0.0; d] } else { Vec::new() };
                let mut db = if nb { vec![0.0; d] } else { Vec::new() };
                for i in 0..n {
                    let gl = &g[i * d..(i + 1) * d];
                    let xl = &xhat[i * d..(i + 1) * d];
                    if ng {
                        for j in 0..d {
                            dg[j] += gl[j] * xl[j];
                        }
                    }
                    if nb {
                        for j in 0..d {
                            db[j] += gl[j];
                        }
                    }
                    if nx {
                        let mut mean_dy = 0.0;
                        let mut mean_dy_xhat = 0.0;
                        for j in 0..d {
                            let dy = gl[j] * gd[j];
                            mean_dy += dy;
                            mean_dy_xhat += dy * xl[j];
                        }
                        mean_dy /= d as f64;
                        mean_dy_xhat /= d as f64;
                        for j in 0..d {
                            let dy = gl[j] * gd[j];
                            dx[i * d + j] = inv_std[i] * (dy - mean_dy - xl[j] * mean_dy_xhat);
                        }
                    }
                }
                vec![dx, dg, db]
            }),
        });
        self.push("layer_norm", vec![n, d], out, any, step)
    }

    // ── Gather / scatter ────────────────────────────────────────────────

    /// Looks up `ids` rows of an embedding table; gradient scatter-adds back
    /// into the table rows.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> OpResult {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "embedding",
                detail: format!("table {:?}", tv.shape()),
            });
        }
        let (v, d) = (tv.rows(), tv.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumericsError::InvalidArgument {
                op: "embedding",
                detail: format!("id {bad} out of range for table with {v} rows"),
            });
        }
        if ids.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "embedding",
                detail: "empty id list".into(),
            });
        }
        let n = ids.len();
        let mut out = vec![0.0; n * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(tv.row(id));
        }
        let needs = self.needs(table);
        let step = needs.then(|| {
            let ids = ids.to_vec();
            BackwardStep {
                parents: vec![table],
                apply: Box::new(move |g| {
                    let mut dt = vec![0.0; v * d];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[i * d + j];
                        }
                    }
                    vec![dt]
                }),
            }
        });
        self.push("embedding", vec![n, d], out, needs, step)
    }

    fn log_softmax_gather(
        &mut self,
        op: &'static str,
        logits: TensorId,
        targets: &[(usize, usize)],
        sign: f64,
        normalize: bool,
    ) -> OpResult {
        let lv = self.value(logits);
        if lv.shape().len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op,
                detail: format!("logits {:?}", lv.shape()),
            });
        }
        let (n, v) = (lv.rows(), lv.cols());
        if targets.is_empty() {
            return Err(NumericsError::InvalidArgument { op, detail: "empty target list".into() });
        }
        if let Some(&(r, c)) = targets.iter().find(|&&(r, c)| r >= n || c >= v) {
            return Err(NumericsError::InvalidArgument {
                op,
                detail: format!("target ({r}, {c}) out of range for logits {n}x{v}"),
            });
        }
        let scale = if normalize { 1.0 / targets.len() as f64 } else { 1.0 };
        let mut probs = vec![0.0; n * v];
        for i in 0..n {
            kernels::softmax_slice(&lv.data()[i * v..(i + 1) * v], &mut probs[i * v..(i + 1) * v]);
        }
        let mut total = 0.0;
        for &(r, c) in targets {
            total += sign * scale * probs[r * v + c].ln();
        }
        let needs = self.needs(logits);
        let step = needs.then(|| {
            let targets = targets.to_vec();
            BackwardStep {
                parents: vec![logits],
                apply: Box::new(move |g| {
                    // d(log p[c])/dlogits = onehot(c) - softmax(row)
                    let mut dl = vec![0.0; n * v];
                    for &(r, c) in &targets {
                        let coeff = g[0] * sign * scale;
                        for j in 0..v {
                            dl[r * v + j] -= coeff * probs[r * v + j];
                        }
                        dl[r * v + c] += coeff;
                    }
                    vec![dl]
                }),
            }
        });
        self.push(op, vec![1], vec![total], needs, step)
    }

    /// Mean negative log-likelihood of `(row, class)` targets under row-wise
    /// softmax of the logits.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[(usize, usize)]) -> OpResult {
        self.log_softmax_gather("cross_entropy", logits, targets, -1.0, true)
    }

    /// Sum of log-probabilities of `(row, class)` targets under row-wise
    /// softmax of the logits.
    pub fn log_prob_sum(&mut self, logits: TensorId, targets: &[(usize, usize)]) -> OpResult {
        self.log_softmax_gather("log_prob_sum", logits, targets, 1.0, false)
    }

    // ── Shape surgery ───────────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> OpResult {
        if parts.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "concat_rows",
                detail: "no parts".into(),
            });
        }
        let d = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.shape().len() != 2 || pv.cols() != d {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("part {:?} vs width {d}", pv.shape()),
                });
            }
            rows += pv.rows();
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let needs_each: Vec<bool> = parts.iter().map(|&p| self.needs(p)).collect();
        let any = needs_each.iter().any(|&b| b);
        let step = any.then(|| {
            let sizes: Vec<usize> = parts.iter().map(|&p| self.value(p).numel()).collect();
            let needs_each = needs_each.clone();
            BackwardStep {
                parents: parts.to_vec(),
                apply: Box::new(move |g| {
                    let mut offset = 0;
                    let mut outs = Vec::with_capacity(sizes.len());
                    for (sz, need) in sizes.iter().zip(&needs_each) {
                        if *need {
                            outs.push(g[offset..offset + sz].to_vec());
                        } else {
                            outs.push(Vec::new());
                        }
                        offset += sz;
                    }
                    outs
                }),
            }
        });
        self.push("concat_rows", vec![rows, d], out, any, step)
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, end: usize) -> OpResult {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start >= end || end > xv.rows() {
            return Err(NumericsError::InvalidArgument {
                op: "slice_rows",
                detail: format!("rows {start}..{end} of {:?}", xv.shape()),
            });
        }
        let (r, d) = (xv.rows(), xv.cols());
        let out = xv.data()[start * d..end * d].to_vec();
        let needs = self.needs(x);
        let step = needs.then(|| BackwardStep {
            parents: vec![x],
            apply: Box::new(move |g| {
                let mut dx = vec![0.0; r * d];
                dx[start * d..end * d].copy_from_slice(g);
                vec![dx]
            }),
        });
        self.push("slice_rows", vec![end - start, d], out, needs, step)
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, end: usize) -> OpResult {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start >= end || end > xv.cols() {
            return Err(NumericsError::InvalidArgument {
                op: "slice_cols",
                detail: format!("cols {start}..{end} of {:?}", xv.shape()),
            });
        }
        let (r, c) = (xv.rows(), xv.cols());
        let w = end - start;
        let mut out = vec![0.0; r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w].copy_from_slice(&xv.data()[i * c + start..i * c + end]);
        }
        let needs = self.needs(x);
        let step = needs.then(|| BackwardStep {
            parents: vec![x],
            apply: Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![dx]
            }),
        });
        self.push("slice_cols", vec![r, w], out, needs, step)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> OpResult {
        if parts.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "concat_cols",
                detail: "no parts".into(),
            });
        }
        let r = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.shape().len() != 2 || pv.rows() != r {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("part {:?} vs {r} rows", pv.shape()),
                });
            }
            widths.push(pv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for i in 0..r {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let needs_each: Vec<bool> = parts.iter().map(|&p| self.needs(p)).collect();
        let any = needs_each.iter().any(|&b| b);
        let step = any.then(|| {
            let widths = widths.clone();
            let needs_each = needs_each.clone();
            BackwardStep {
                parents: parts.to_vec(),
                apply: Box::new(move |g| {
                    let mut outs = Vec::with_capacity(widths.len());
                    let mut offset = 0;
                    for (&w, need) in widths.iter().zip(&needs_each) {
                        if *need {
                            let mut dp = vec![0.0; r * w];
                            for i in 0..r {
                                dp[i * w..(i + 1) * w].copy_from_slice(
                                    &g[i * total + offset..i * total + offset + w],
                                );
                            }
                            outs.push(dp);
                        } else {
                            outs.push(Vec::new());
                        }
                        offset += w;
                    }
                    outs
                }),
            }
        });
        self.push("concat_cols", vec![r, total], out, any, step)
    }

    /// Stacks `reps` copies of `x` along rows; gradient sums over copies.
    pub fn tile_rows(&mut self, x: TensorId, reps: usize) -> OpResult {
        if reps == 0 {
            return Err(NumericsError::InvalidArgument {
                op: "tile_rows",
                detail: "zero repetitions".into(),
            });
        }
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "tile_rows",
                detail: format!("{:?}", xv.shape()),
            });
        }
        let (r, d) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(reps * r * d);
        for _ in 0..reps {
            out.extend_from_slice(xv.data());
        }
        let needs = self.needs(x);
        let step = needs.then(|| BackwardStep {
            parents: vec![x],
            apply: Box::new(move |g| {
                let mut dx = vec![0.0; r * d];
                for t in 0..reps {
                    for i in 0..r * d {
                        dx[i] += g[t * r * d + i];
                    }
                }
                vec![dx]
            }),
        });
        self.push("tile_rows", vec![reps * r, d], out, needs, step)
    }

    /// Centered moving average with replicate padding, applied per column
    /// within each consecutive block of `block` rows. `window` must be odd
    /// and no larger than `block`.
    pub fn moving_average_rows(&mut self, x: TensorId, block: usize, window: usize) -> OpResult {
        let xv = self.value(x);
        if xv.shape().len() != 2 || block == 0 || xv.rows() % block != 0 {
            return Err(NumericsError::InvalidArgument {
                op: "moving_average_rows",
                detail: format!("block {block} does not divide {:?}", xv.shape()),
            });
        }
        if window % 2 == 0 || window == 0 || window > block {
            return Err(NumericsError::InvalidArgument {
                op: "moving_average_rows",
                detail: format!("window {window} must be odd and at most block {block}"),
            });
        }
        let (r, d) = (xv.rows(), xv.cols());
        let half = (window / 2) as isize;
        let mut out = vec![0.0; r * d];
        for b in (0..r).step_by(block) {
            for i in 0..block {
                for j in 0..d {
                    let mut acc = 0.0;
                    for o in -half..=half {
                        let p = (i as isize + o).clamp(0, block as isize - 1) as usize;
                        acc += xv.at(b + p, j);
                    }
                    out[(b + i) * d + j] = acc / window as f64;
                }
            }
        }
        let needs = self.needs(x);
        let step = needs.then(|| BackwardStep {
            parents: vec![x],
            apply: Box::new(move |g| {
                let mut dx = vec![0.0; r * d];
                for b in (0..r).step_by(block) {
                    for i in 0..block {
                        for j in 0..d {
                            let gv = g[(b + i) * d + j] / window as f64;
                            for o in -half..=half {
                                let p = (i as isize + o).clamp(0, block as isize - 1) as usize;
                                dx[(b + p) * d + j] += gv;
                            }
                        }
                    }
                }
                vec![dx]
            }),
        });
        self.push("moving_average_rows", vec![r, d], out, needs, step)
    }
}
