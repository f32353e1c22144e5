//! Dense numerical core: parameter storage, a reverse-mode tape over
//! vector-valued primitives, multi-layer perceptrons and Adam.
//!
//! Everything is `f64`. Reductions always run in index order so that a
//! forward or backward pass is a deterministic function of its inputs.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All trainable tensors of a model in one flat buffer. Matrices are row-major.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    data: Vec<f64>,
    shapes: Vec<ParamShape>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, rows: usize, cols: usize) -> ParamId {
        let id = ParamId(self.shapes.len() as u32);
        self.shapes.push(ParamShape {
            offset: self.data.len(),
            rows,
            cols,
        });
        self.data.resize(self.data.len() + rows * cols, 0.0);
        id
    }

    pub fn shape(&self, id: ParamId) -> ParamShape {
        self.shapes[id.0 as usize]
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        let s = self.shape(id);
        &self.data[s.offset..s.offset + s.len()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let s = self.shape(id);
        &mut self.data[s.offset..s.offset + s.len()]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn shapes(&self) -> &[ParamShape] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Consistency of the layout with the buffer, used after deserialization.
    pub fn check_layout(&self) -> Result<()> {
        let mut expected = 0;
        for s in &self.shapes {
            if s.offset != expected {
                return Err(Error::ModelFormat(
                    "parameter layout is not contiguous".into(),
                ));
            }
            expected += s.len();
        }
        if expected != self.data.len() {
            return Err(Error::Dimension {
                context: "parameter buffer",
                expected,
                actual: self.data.len(),
            });
        }
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

#[inline]
fn leaky_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

fn matvec_into(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o = dot(&w[r * cols..(r + 1) * cols], x);
    }
}

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: u32,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Input,
    Param,
    MatVec(u32, u32),
    Add(u32, u32),
    /// n-ary elementwise sum over `args[start..end]`; empty means zeros.
    Sum(u32, u32),
    /// concatenation of `args[start..end]`
    Concat(u32, u32),
    LeakyRelu(u32),
    Exp(u32),
    Div(u32, u32),
    Max(u32, u32),
    SumReduce(u32),
    Scale(u32, f64),
    Clamp(u32, f64, f64),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    /// offset into `vals` (or into the parameter buffer for `Param`)
    off: usize,
    len: usize,
    rows: usize,
    cols: usize,
}

/// Records vector-valued primitives for reverse-mode differentiation.
///
/// Parameters are read in place from a borrowed [`ParamStore`]; their
/// gradients land in a buffer with the same layout as the store.
pub struct Tape<'p> {
    id: u64,
    store: &'p ParamStore,
    vals: Vec<f64>,
    nodes: Vec<Node>,
    args: Vec<u32>,
    param_vars: Vec<Option<u32>>,
    grad: Vec<f64>,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    nodes: Vec<(usize, usize, bool)>,
    vals: Vec<f64>,
    params: Vec<f64>,
}

impl Gradients {
    /// Gradient with respect to any recorded value (including parameters).
    pub fn wrt(&self, v: Var) -> Result<&[f64]> {
        if v.tape != self.tape || v.idx as usize >= self.nodes.len() {
            return Err(Error::NotOnTape(v.idx as usize));
        }
        let (off, len, is_param) = self.nodes[v.idx as usize];
        Ok(if is_param {
            &self.params[off..off + len]
        } else {
            &self.vals[off..off + len]
        })
    }

    /// Flat gradient buffer aligned with the parameter store.
    pub fn params(&self) -> &[f64] {
        &self.params
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            store,
            vals: Vec::new(),
            nodes: Vec::new(),
            args: Vec::new(),
            param_vars: vec![None; store.shapes.len()],
            grad: Vec::new(),
        }
    }

    /// Forgets all recorded operations but keeps allocations. Variables from
    /// before the reset become invalid.
    pub fn reset(&mut self) {
        self.id = TAPE_IDS.fetch_add(1, Ordering::Relaxed);
        self.vals.clear();
        self.nodes.clear();
        self.args.clear();
        self.param_vars.iter_mut().for_each(|p| *p = None);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<u32> {
        if v.tape == self.id && (v.idx as usize) < self.nodes.len() {
            Ok(v.idx)
        } else {
            Err(Error::NotOnTape(v.idx as usize))
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        Ok(&self.nodes[self.idx(v)? as usize])
    }

    fn value_of(&self, n: &Node) -> &[f64] {
        match n.op {
            Op::Param => &self.store.data[n.off..n.off + n.len],
            _ => &self.vals[n.off..n.off + n.len],
        }
    }

    pub fn value(&self, v: Var) -> Result<&[f64]> {
        Ok(self.value_of(self.node(v)?))
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let val = self.value(v)?;
        if val.len() != 1 {
            return Err(Error::Dimension {
                context: "scalar value",
                expected: 1,
                actual: val.len(),
            });
        }
        Ok(val[0])
    }

    fn push(&mut self, op: Op, len: usize, rows: usize, cols: usize) -> (Var, usize) {
        let off = self.vals.len();
        self.vals.resize(off + len, 0.0);
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            op,
            off,
            len,
            rows,
            cols,
        });
        (Var { tape: self.id, idx }, off)
    }

    pub fn input(&mut self, x: &[f64]) -> Var {
        let (v, off) = self.push(Op::Input, x.len(), x.len(), 1);
        self.vals[off..off + x.len()].copy_from_slice(x);
        v
    }

    /// Matrix leaf (row-major), differentiable like any input.
    pub fn input_matrix(&mut self, data: &[f64], rows: usize, cols: usize) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                context: "matrix input",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        let (v, off) = self.push(Op::Input, data.len(), rows, cols);
        self.vals[off..off + data.len()].copy_from_slice(data);
        Ok(v)
    }

    /// The parameter as a leaf. Recorded once per tape; the value is not copied.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(idx) = self.param_vars[id.0 as usize] {
            return Var { tape: self.id, idx };
        }
        let s = self.store.shape(id);
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            op: Op::Param,
            off: s.offset,
            len: s.len(),
            rows: s.rows,
            cols: s.cols,
        });
        self.param_vars[id.0 as usize] = Some(idx);
        Var { tape: self.id, idx }
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wi, xi) = (self.idx(w)?, self.idx(x)?);
        let wn = self.nodes[wi as usize];
        let xn = self.nodes[xi as usize];
        if wn.cols != xn.len {
            return Err(Error::Dimension {
                context: "matvec",
                expected: wn.cols,
                actual: xn.len,
            });
        }
        let (v, off) = self.push(Op::MatVec(wi, xi), wn.rows, wn.rows, 1);
        let (rows, cols) = (wn.rows, wn.cols);
        let mut out = std::mem::take(&mut self.vals);
        {
            let (head, tail) = out.split_at_mut(off);
            let wv: &[f64] = match wn.op {
                Op::Param => &self.store.data[wn.off..wn.off + wn.len],
                _ => &head[wn.off..wn.off + wn.len],
            };
            let xv = &head[xn.off..xn.off + xn.len];
            matvec_into(wv, rows, cols, xv, &mut tail[..rows]);
        }
        self.vals = out;
        Ok(v)
    }

    fn binary_same_len(
        &mut self,
        a: Var,
        b: Var,
        context: &'static str,
    ) -> Result<(u32, u32, usize)> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (la, lb) = (self.nodes[ai as usize].len, self.nodes[bi as usize].len);
        if la != lb {
            return Err(Error::Dimension {
                context,
                expected: la,
                actual: lb,
            });
        }
        Ok((ai, bi, la))
    }

    fn elementwise2(
        &mut self,
        op: Op,
        ai: u32,
        bi: u32,
        len: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Var {
        let (v, off) = self.push(op, len, len, 1);
        let an = self.nodes[ai as usize];
        let bn = self.nodes[bi as usize];
        for i in 0..len {
            let x = self.value_of(&an)[i];
            let y = self.value_of(&bn)[i];
            self.vals[off + i] = f(x, y);
        }
        v
    }

    fn elementwise1(&mut self, op: Op, ai: u32, f: impl Fn(f64) -> f64) -> Var {
        let an = self.nodes[ai as usize];
        let (v, off) = self.push(op, an.len, an.len, 1);
        for i in 0..an.len {
            let x = self.value_of(&an)[i];
            self.vals[off + i] = f(x);
        }
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, len) = self.binary_same_len(a, b, "add")?;
        Ok(self.elementwise2(Op::Add(ai, bi), ai, bi, len, |x, y| x + y))
    }

    /// Elementwise division `a / b`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, len) = self.binary_same_len(a, b, "div")?;
        Ok(self.elementwise2(Op::Div(ai, bi), ai, bi, len, |x, y| x / y))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, len) = self.binary_same_len(a, b, "max")?;
        Ok(self.elementwise2(
            Op::Max(ai, bi),
            ai,
            bi,
            len,
            |x, y| if x >= y { x } else { y },
        ))
    }

    /// Elementwise sum of any number of equally sized vectors. With no
    /// operands the result is the zero vector of length `len`.
    pub fn sum(&mut self, vars: &[Var], len: usize) -> Result<Var> {
        let start = self.args.len() as u32;
        for &v in vars {
            let i = self.idx(v)?;
            if self.nodes[i as usize].len != len {
                self.args.truncate(start as usize);
                return Err(Error::Dimension {
                    context: "sum",
                    expected: len,
                    actual: self.nodes[i as usize].len,
                });
            }
            self.args.push(i);
        }
        let end = self.args.len() as u32;
        let (v, off) = self.push(Op::Sum(start, end), len, len, 1);
        for k in start..end {
            let n = self.nodes[self.args[k as usize] as usize];
            for i in 0..len {
                let x = self.value_of(&n)[i];
                self.vals[off + i] += x;
            }
        }
        Ok(v)
    }

    pub fn concat(&mut self, vars: &[Var]) -> Result<Var> {
        let start = self.args.len() as u32;
        let mut len = 0;
        for &v in vars {
            let i = self.idx(v)?;
            len += self.nodes[i as usize].len;
            self.args.push(i);
        }
        let end = self.args.len() as u32;
        let (v, off) = self.push(Op::Concat(start, end), len, len, 1);
        let mut pos = off;
        for k in start..end {
            let n = self.nodes[self.args[k as usize] as usize];
            for i in 0..n.len {
                let x = self.value_of(&n)[i];
                self.vals[pos + i] = x;
            }
            pos += n.len;
        }
        Ok(v)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        Ok(self.elementwise1(Op::LeakyRelu(ai), ai, leaky))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        Ok(self.elementwise1(Op::Exp(ai), ai, f64::exp))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let ai = self.idx(a)?;
        Ok(self.elementwise1(Op::Scale(ai, k), ai, |x| k * x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ai = self.idx(a)?;
        Ok(self.elementwise1(Op::Clamp(ai, lo, hi), ai, |x| x.clamp(lo, hi)))
    }

    /// Sum of all elements, as a length-1 vector.
    pub fn sum_reduce(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let an = self.nodes[ai as usize];
        let total = self.value_of(&an).iter().fold(0.0, |acc, x| acc + x);
        let (v, off) = self.push(Op::SumReduce(ai), 1, 1, 1);
        self.vals[off] = total;
        Ok(v)
    }

    /// Reverse pass from a scalar output. Returns gradients for every
    /// recorded value and a flat parameter-gradient buffer.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        let mut params = vec![0.0; self.store.len()];
        self.backward_into(output, 1.0, &mut params)?;
        Ok(Gradients {
            tape: self.id,
            nodes: self
                .nodes
                .iter()
                .map(|n| (n.off, n.len, matches!(n.op, Op::Param)))
                .collect(),
            vals: self.grad.clone(),
            params,
        })
    }

    /// Reverse pass seeded with `seed`, accumulating parameter gradients
    /// into `param_grads` (same layout as the store).
    pub fn backward_into(&mut self, output: Var, seed: f64, param_grads: &mut [f64]) -> Result<()> {
        let out = self.idx(output)? as usize;
        if self.nodes[out].len != 1 {
            return Err(Error::Dimension {
                context: "backward output",
                expected: 1,
                actual: self.nodes[out].len,
            });
        }
        if param_grads.len() != self.store.len() {
            return Err(Error::Dimension {
                context: "parameter gradient buffer",
                expected: self.store.len(),
                actual: param_grads.len(),
            });
        }
        self.grad.clear();
        self.grad.resize(self.vals.len(), 0.0);
        self.grad[self.nodes[out].off] = seed;

        let store = self.store;
        let vals = &self.vals;
        let nodes = &self.nodes;
        let args = &self.args;
        let value = |n: &Node| -> &[f64] {
            match n.op {
                Op::Param => &store.data[n.off..n.off + n.len],
                _ => &vals[n.off..n.off + n.len],
            }
        };

        for i in (0..=out).rev() {
            let node = nodes[i];
            if matches!(node.op, Op::Input | Op::Param) {
                continue;
            }
            let (lo, hi) = self.grad.split_at_mut(node.off);
            let g = &hi[..node.len];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            // Gradient slot of an operand: parameter buffer or the arena below `node`.
            macro_rules! slot {
                ($n:expr) => {{
                    let n: &Node = $n;
                    match n.op {
                        Op::Param => &mut param_grads[n.off..n.off + n.len],
                        _ => &mut lo[n.off..n.off + n.len],
                    }
                }};
            }
            let y = &vals[node.off..node.off + node.len];
            match node.op {
                Op::Input | Op::Param => unreachable!(),
                Op::MatVec(w, x) => {
                    let (wn, xn) = (&nodes[w as usize], &nodes[x as usize]);
                    let (rows, cols) = (wn.rows, wn.cols);
                    let wv = value(wn);
                    let xv = value(xn);
                    {
                        let dw = slot!(wn);
                        for r in 0..rows {
                            let gr = g[r];
                            if gr != 0.0 {
                                for (d, xc) in dw[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                                    *d += gr * xc;
                                }
                            }
                        }
                    }
                    let dx = slot!(xn);
                    for r in 0..rows {
                        let gr = g[r];
                        if gr != 0.0 {
                            for (d, wc) in dx.iter_mut().zip(&wv[r * cols..(r + 1) * cols]) {
                                *d += wc * gr;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for k in [a, b] {
                        for (d, gi) in slot!(&nodes[k as usize]).iter_mut().zip(g) {
                            *d += gi;
                        }
                    }
                }
                Op::Sum(s, e) => {
                    for k in s..e {
                        for (d, gi) in slot!(&nodes[args[k as usize] as usize]).iter_mut().zip(g) {
                            *d += gi;
                        }
                    }
                }
                Op::Concat(s, e) => {
                    let mut pos = 0;
                    for k in s..e {
                        let n = &nodes[args[k as usize] as usize];
                        for (d, gi) in slot!(n).iter_mut().zip(&g[pos..pos + n.len]) {
                            *d += gi;
                        }
                        pos += n.len;
                    }
                }
                Op::LeakyRelu(a) => {
                    let an = &nodes[a as usize];
                    let av = value(an);
                    for ((d, gi), x) in slot!(an).iter_mut().zip(g).zip(av) {
                        *d += gi * leaky_grad(*x);
                    }
                }
                Op::Exp(a) => {
                    for ((d, gi), yi) in slot!(&nodes[a as usize]).iter_mut().zip(g).zip(y) {
                        *d += gi * yi;
                    }
                }
                Op::Scale(a, k) => {
                    for (d, gi) in slot!(&nodes[a as usize]).iter_mut().zip(g) {
                        *d += k * gi;
                    }
                }
                Op::Clamp(a, l, h) => {
                    let an = &nodes[a as usize];
                    let av = value(an);
                    for ((d, gi), x) in slot!(an).iter_mut().zip(g).zip(av) {
                        if *x >= l && *x <= h {
                            *d += gi;
                        }
                    }
                }
                Op::Div(a, b) => {
                    let (an, bn) = (&nodes[a as usize], &nodes[b as usize]);
                    let (av, bv) = (value(an), value(bn));
                    for ((d, gi), bi) in slot!(an).iter_mut().zip(g).zip(bv) {
                        *d += gi / bi;
                    }
                    for (((d, gi), ai), bi) in slot!(bn).iter_mut().zip(g).zip(av).zip(bv) {
                        *d -= gi * ai / (bi * bi);
                    }
                }
                Op::Max(a, b) => {
                    let (an, bn) = (&nodes[a as usize], &nodes[b as usize]);
                    let (av, bv) = (value(an), value(bn));
                    {
                        let da = slot!(an);
                        for k in 0..node.len {
                            if av[k] >= bv[k] {
                                da[k] += g[k];
                            }
                        }
                    }
                    let db = slot!(bn);
                    for k in 0..node.len {
                        if av[k] < bv[k] {
                            db[k] += g[k];
                        }
                    }
                }
                Op::SumReduce(a) => {
                    let g0 = g[0];
                    for d in slot!(&nodes[a as usize]).iter_mut() {
                        *d += g0;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Dense layer: `y = W x + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

/// Multi-layer perceptron with LeakyReLU(0.01) between layers and an
/// identity output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Allocates layers of sizes `dims[0] -> dims[1] -> ...` with weights
    /// drawn from `Uniform(±sqrt(6 / fan_in))` and zero biases.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dims: &[usize],
        rng: &mut R,
    ) -> Result<Mlp> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "invalid MLP dimensions {dims:?}"
            )));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weight = store.alloc(fan_out, fan_in);
            let bias = store.alloc(fan_out, 1);
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in store.get_mut(weight) {
                *w = rng.random_range(-bound..bound);
            }
            layers.push(Layer {
                weight,
                bias,
                inputs: fan_in,
                outputs: fan_out,
            });
        }
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    /// Forward pass without recording. Performs the same floating-point
    /// operations in the same order as [`Mlp::forward_taped`].
    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                context: "mlp input",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.outputs];
            matvec_into(
                store.get(layer.weight),
                layer.outputs,
                layer.inputs,
                &cur,
                &mut out,
            );
            for (o, b) in out.iter_mut().zip(store.get(layer.bias)) {
                *o += b;
            }
            if i != last {
                out.iter_mut().for_each(|v| *v = leaky(*v));
            }
            cur = out;
        }
        Ok(cur)
    }

    pub fn forward_taped(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let n = tape.node(x)?.len;
        if n != self.input_dim() {
            return Err(Error::Dimension {
                context: "mlp input",
                expected: self.input_dim(),
                actual: n,
            });
        }
        let mut cur = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(layer.weight);
            let b = tape.param(layer.bias);
            let wx = tape.matvec(w, cur)?;
            cur = tape.add(wx, b)?;
            if i != last {
                cur = tape.leaky_relu(cur)?;
            }
        }
        Ok(cur)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_lr(1e-3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    /// One bias-corrected Adam update. Non-finite gradients reject the
    /// step and leave both parameters and state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension {
                context: "adam step",
                expected: self.m.len(),
                actual: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient coordinate {i} is {}",
                grads[i]
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_gradient_shared_operand() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input_matrix(&[3.0], 1, 1).unwrap();
        let sq = tape.matvec(x, x).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(tape.scalar(sq).unwrap(), 9.0);
        assert_eq!(g.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_routes_identical_gradient() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(&[1.0, 2.0]);
        let b = tape.input(&[-4.0, 0.5]);
        let s = tape.sum(&[a, b], 2).unwrap();
        let w = tape.input_matrix(&[0.3, -0.7], 1, 2).unwrap();
        let out = tape.matvec(w, s).unwrap();
        let g = tape.backward(out).unwrap();
        assert_eq!(g.wrt(a).unwrap(), g.wrt(b).unwrap());
        assert_eq!(g.wrt(a).unwrap(), &[0.3, -0.7]);
    }

    #[test]
    fn empty_sum_is_zero_vector() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let z = tape.sum(&[], 3).unwrap();
        assert_eq!(tape.value(z).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_tie_goes_to_first() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(&[2.0]);
        let b = tape.input(&[2.0]);
        let m = tape.max(a, b).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(a).unwrap(), &[1.0]);
        assert_eq!(g.wrt(b).unwrap(), &[0.0]);
    }

    #[test]
    fn leaky_relu_at_zero_uses_negative_side() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(&[0.0]);
        let r = tape.leaky_relu(a).unwrap();
        let g = tape.backward(r).unwrap();
        assert_eq!(g.wrt(a).unwrap(), &[LEAKY_SLOPE]);
    }

    #[test]
    fn foreign_variable_rejected() {
        let store = ParamStore::new();
        let mut t1 = Tape::new(&store);
        let mut t2 = Tape::new(&store);
        let x = t1.input(&[1.0]);
        let _ = t2.input(&[1.0]);
        assert!(matches!(t2.backward(x), Err(Error::NotOnTape(_))));
        t1.reset();
        assert!(t1.value(x).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(&[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mlp_zero_weights_gives_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut store, &[3, 2], &mut rng).unwrap();
        store.get_mut(mlp.layers[0].weight).fill(0.0);
        store
            .get_mut(mlp.layers[0].bias)
            .copy_from_slice(&[0.25, -1.5]);
        assert_eq!(
            mlp.forward(&store, &[9.0, -2.0, 4.0]).unwrap(),
            vec![0.25, -1.5]
        );
    }

    #[test]
    fn mlp_single_weight() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut store, &[1, 1], &mut rng).unwrap();
        store.get_mut(mlp.layers[0].weight)[0] = 2.0;
        assert_eq!(mlp.forward(&store, &[3.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn mlp_dimension_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut store, &[3, 4, 1], &mut rng).unwrap();
        assert!(matches!(
            mlp.forward(&store, &[1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![0.5, -1.0];
        let mut st = AdamState::new(2, AdamConfig::with_lr(0.1));
        for _ in 0..5 {
            st.step(&mut p, &[0.0, 0.0]).unwrap();
        }
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn adam_first_step() {
        // t = 1, g = 1: m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let mut p = vec![0.0];
        let mut st = AdamState::new(1, AdamConfig::with_lr(0.01));
        st.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] - (-0.01)).abs() < 1e-6);
        assert!((p[0] - (-0.01 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::new(2, AdamConfig::with_lr(0.01));
        let mut prev = p.clone();
        for _ in 0..500 {
            prev.clone_from(&p);
            st.step(&mut p, &[3.0, -0.2]).unwrap();
        }
        assert!(((p[0] - prev[0]) + 0.01).abs() < 1e-6);
        assert!(((p[1] - prev[1]) - 0.01).abs() < 1e-6);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![1.0];
        let mut st = AdamState::new(1, AdamConfig::default());
        assert!(matches!(
            st.step(&mut p, &[f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(p, vec![1.0]);
        assert_eq!(st.step, 0);
    }
}
