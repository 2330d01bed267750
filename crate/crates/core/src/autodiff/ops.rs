use super::{grad_slot, Mode, Node, Op, Tape, Var};
use crate::array::Array;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{gemm, sum_lanes, MatView, Scalar};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

impl MatMulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || Error::shape("matmul", a, b);
        let split = |s: &[usize]| -> Option<(Option<usize>, usize, usize)> {
            match *s {
                [r, c] => Some((None, r, c)),
                [bt, r, c] => Some((Some(bt), r, c)),
                _ => None,
            }
        };
        let (ba, m, k) = split(a).ok_or_else(err)?;
        let (bb, k2, n) = split(b).ok_or_else(err)?;
        if k != k2 {
            return Err(err());
        }
        let batch = match (ba, bb) {
            (None, None) => 1,
            (Some(x), None) | (None, Some(x)) => x,
            (Some(x), Some(y)) if x == y || y == 1 => x,
            (Some(1), Some(y)) => y,
            _ => return Err(err()),
        };
        Ok(Self {
            batch,
            m,
            k,
            n,
            a_batched: ba.is_some_and(|x| x == batch && batch > 1),
            b_batched: bb.is_some_and(|y| y == batch && batch > 1),
        })
    }

    fn out_shape(&self, rank3: bool) -> Vec<usize> {
        if rank3 {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }
}

fn suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl<T: Scalar> Tape<T> {
    /// Matrix product over the last two axes; a rank-2 operand (or batch
    /// extent 1) broadcasts across the other operand's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let plan = MatMulPlan::new(av.shape(), bv.shape())?;
        let rank3 = av.rank() == 3 || bv.rank() == 3;
        let MatMulPlan { batch, m, k, n, .. } = plan;
        let mut out = vec![T::zero(); batch * m * n];
        if plan.a_batched && !plan.b_batched {
            gemm(av.data(), MatView::new(batch * m, k), bv.data(), MatView::new(k, n), &mut out, false);
        } else {
            for bi in 0..batch {
                let ao = if plan.a_batched { bi * m * k } else { 0 };
                let bo = if plan.b_batched { bi * k * n } else { 0 };
                gemm(
                    &av.data()[ao..ao + m * k],
                    MatView::new(m, k),
                    &bv.data()[bo..bo + k * n],
                    MatView::new(k, n),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let value = Array::from_vec(&plan.out_shape(rank3), out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let value = transpose_last2(av).ok_or_else(|| Error::shape("transpose", av.shape(), &[]))?;
        Ok(self.push(value, Op::Transpose { a }, &[a]))
    }

    /// Elementwise sum; a shape that is a suffix of the other broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if suffix_of(self.shape(b), self.shape(a)) { (a, b) } else { (b, a) };
        let (av, bv) = (self.value(a), self.value(b));
        if !suffix_of(bv.shape(), av.shape()) {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        let w = bv.len();
        if w > 0 {
            for chunk in out.data_mut().chunks_mut(w) {
                for (o, x) in chunk.iter_mut().zip(bv.data()) {
                    *o += *x;
                }
            }
        }
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x * *y).collect();
        let value = Array::from_vec(av.shape(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale { a, factor }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array::scalar(self.value(a).sum());
        self.push(value, Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Array::scalar(av.sum() / T::of(av.len().max(1) as f64));
        self.push(value, Op::Mean { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(value, Op::Relu { a }, &[a])
    }

    /// Sets entries above the (offset) diagonal of the last two axes to -inf.
    /// With `q` query rows and `k >= q` key columns, row `i` keeps columns
    /// `0..=i + (k - q)`.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (tq, tk) = last_two(av.shape()).ok_or_else(|| Error::shape("causal_mask", av.shape(), &[]))?;
        if tq > tk {
            return Err(Error::shape("causal_mask", av.shape(), &[tq, tk]));
        }
        let offset = tk - tq;
        let mut value = av.clone();
        for (r, row) in value.data_mut().chunks_mut(tk).enumerate() {
            let i = r % tq;
            for x in &mut row[i + offset + 1..] {
                *x = T::neg_infinity();
            }
        }
        Ok(self.push(value, Op::CausalMask { a }, &[a]))
    }

    /// Softmax over the last axis with max subtraction. `-inf` entries are
    /// treated as masked; NaN, `+inf` or fully masked rows are errors.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        if d == 0 {
            return Err(Error::Contract("softmax over empty axis".into()));
        }
        let mut value = av.clone();
        for row in value.data_mut().chunks_mut(d) {
            softmax_in_place(row).ok_or_else(|| Error::NonFinite("softmax_rows input".into()))?;
        }
        Ok(self.push(value, Op::Softmax { a }, &[a]))
    }

    /// Normalizes each feature row to zero mean and unit variance
    /// (epsilon 1e-5 under the square root), then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let inv_d = T::one() / T::of(d as f64);
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Array::from_vec(xv.shape(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Row gather from `table` (`[rows, width]`); output shape is
    /// `index_shape ++ [width]`.
    pub fn embed(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let [vocab, width] = *tv.shape() else {
            return Err(Error::shape("embed", tv.shape(), index_shape));
        };
        if index_shape.iter().product::<usize>() != indices.len() || index_shape.len() > 2 {
            return Err(Error::shape("embed", index_shape, &[indices.len()]));
        }
        let mut out = Vec::with_capacity(indices.len() * width);
        for &ix in indices {
            if ix >= vocab {
                return Err(Error::Vocabulary { index: ix, vocab });
            }
            out.extend_from_slice(tv.row(ix));
        }
        let mut shape = index_shape.to_vec();
        shape.push(width);
        let value = Array::from_vec(&shape, out)?;
        Ok(self.push(value, Op::Embed { table, indices: indices.to_vec() }, &[table]))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Evaluation mode and `rate == 0` return `a` unchanged.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut Rng, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let scale = T::of(1.0 / (1.0 - rate));
        let av = self.value(a);
        let mut keep = vec![false; av.len()];
        rng.fill_keep(&mut keep, rate);
        let data = av.data().iter().zip(&keep).map(|(&x, &k)| if k { x * scale } else { T::zero() }).collect();
        let value = Array::from_vec(av.shape(), data)?;
        Ok(self.push(value, Op::Dropout { a, keep, scale }, &[a]))
    }

    /// Concatenation along the feature (last) axis.
    pub fn concat_features(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let lead = self.shape(*first);
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_features", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![T::zero(); rows * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let pv = self.value(*p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let value = Array::from_vec(&shape, out)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, parts))
    }

    pub fn slice_features(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        if av.rank() == 0 || start + len > d {
            return Err(Error::shape("slice_features", av.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Array::from_vec(&shape, out)?;
        Ok(self.push(value, Op::SliceFeatures { a, start }, &[a]))
    }

    /// Slice of the sequence axis (second to last) of a `[batch, seq, feat]`
    /// or `[seq, feat]` array.
    pub fn slice_positions(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (t, d) = last_two(av.shape()).ok_or_else(|| Error::shape("slice_positions", av.shape(), &[]))?;
        if start + len > t {
            return Err(Error::shape("slice_positions", av.shape(), &[start, len]));
        }
        let batch = av.len() / (t * d).max(1);
        let mut out = Vec::with_capacity(batch * len * d);
        for b in 0..batch {
            let base = b * t * d;
            out.extend_from_slice(&av.data()[base + start * d..base + (start + len) * d]);
        }
        let mut shape = av.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = len;
        let value = Array::from_vec(&shape, out)?;
        Ok(self.push(value, Op::SlicePositions { a, start }, &[a]))
    }

    /// Mean negative log-likelihood of `targets` under softmax(`logits`),
    /// one target per logits row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.last_dim();
        if lv.rows() != targets.len() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
            if t >= vocab {
                return Err(Error::Vocabulary { index: t, vocab });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("cross_entropy logits".into()));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let target_logit = row[t];
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            total += (z.ln() + max - target_logit).as_f64();
            let inv = T::one() / z;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let loss = T::of(total / targets.len().max(1) as f64);
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross_entropy loss".into()));
        }
        let value = Array::scalar(loss);
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits]))
    }

    /// Mean binary cross-entropy of sigmoid(`logits`) against `targets` in
    /// [0, 1], computed in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(Error::shape("bce_with_logits", lv.shape(), &[targets.len()]));
        }
        let mut total = 0.0;
        for (&z, &y) in lv.data().iter().zip(targets) {
            if !(0.0..=1.0).contains(&y) {
                return Err(Error::Contract(format!("bce target {y} outside [0, 1]")));
            }
            let z = z.as_f64();
            if !z.is_finite() {
                return Err(Error::NonFinite("bce logits".into()));
            }
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let value = Array::scalar(T::of(total / targets.len().max(1) as f64));
        let targets = targets.iter().map(|&y| T::of(y)).collect();
        Ok(self.push(value, Op::BceWithLogits { logits, targets }, &[logits]))
    }

    pub(super) fn backprop_node(&self, i: usize, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => backprop_matmul(nodes, *a, *b, g, grads),
            Op::Transpose { a } => {
                if let Some(da) = grad_slot(grads, nodes, *a) {
                    da.add_assign(&transpose_last2(g).expect("rank checked in forward"));
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = grad_slot(grads, nodes, *a) {
                    da.add_assign(g);
                }
                if let Some(db) = grad_slot(grads, nodes, *b) {
                    let w = db.len();
                    if w > 0 {
                        for chunk in g.data().chunks(w) {
                            for (d, x) in db.data_mut().iter_mut().zip(chunk) {
                                *d += *x;
                            }
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if let Some(da) = grad_slot(grads, nodes, *a) {
                    for ((d, gi), bi) in da.data_mut().iter_mut().zip(g.data()).zip(bv) {
                        *d += *gi * *bi;
                    }
                }
                if let Some(db) = grad_slot(grads, nodes, *b) {
                    for ((d, gi), ai) in db.data_mut().iter_mut().zip(g.data()).zip(av) {
                        *d += *gi * *ai;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(da) = grad_slot(grads, nodes, *a) {
                    for (d, gi) in da.data_mut().iter_mut().zip(g.data()) {
                        *d += *gi * *factor;
                    }
                }
            }
            Op::Sum { a } | Op::Mean { a } => {
                let n = val(*a).len().max(1);
                let gi = if matches!(nodes[i].op, Op::Mean { .. }) { g.item() / T::of(n as f64) } else { g.item() };
                if let Some(da) = grad_slot(grads, nodes, *a) {
                    da.data_mut().iter_mut().for_each(|d| *d += gi);
                }
            }
            Op::Relu { a } => {
                let av = val(*a).data();
                if let Some(da) = grad_slot(grads, nodes, *a) {
                    for ((d, gi), x) in da.data_mut().iter_mut().zip(g.data()).zip(av) {
                        if *x > T::zero() {
                            *d += *gi;
                        }
                    }
                }
            }
            Op::CausalMask { a } => {
                let out = &nodes[i].value;
                if let Some(da) = grad_slot(grads, nodes, *a) {
                    for ((d, gi), o) in da.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        if *o != T::neg_infinity() {
                            *d += *gi;
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let y = &nodes[i].value;
                let d = y.last_dim();
                if let Some(da) = grad_slot(grads, nodes, *a) {
                    for ((dx, yr), gr) in da.data_mut().chunks_mut(d).zip(y.data().chunks(d)).zip(g.data().chunks(d)) {
                        let c: T = yr.iter().zip(gr).map(|(y, g)| *y * *g).sum();
                        for ((dxi, yi), gi) in dx.iter_mut().zip(yr).zip(gr) {
                            *dxi += *yi * (*gi - c);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = val(*gain).data();
                let d = gv.len();
                let inv_d = T::one() / T::of(d as f64);
                if let Some(dg) = grad_slot(grads, nodes, *gain) {
                    for (gr, hr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for ((acc, gi), hi) in dg.data_mut().iter_mut().zip(gr).zip(hr) {
                            *acc += *gi * *hi;
                        }
                    }
                }
                if let Some(db) = grad_slot(grads, nodes, *bias) {
                    for gr in g.data().chunks(d) {
                        for (acc, gi) in db.data_mut().iter_mut().zip(gr) {
                            *acc += *gi;
                        }
                    }
                }
                if let Some(dx) = grad_slot(grads, nodes, *x) {
                    let mut dh = vec![T::zero(); d];
                    for (r, ((dxr, gr), hr)) in
                        dx.data_mut().chunks_mut(d).zip(g.data().chunks(d)).zip(xhat.chunks(d)).enumerate()
                    {
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let m1 = dh.iter().copied().sum::<T>() * inv_d;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| *a * *b).sum::<T>() * inv_d;
                        for j in 0..d {
                            dxr[j] += rstd[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Embed { table, indices } => {
                if let Some(dt) = grad_slot(grads, nodes, *table) {
                    let w = dt.last_dim();
                    for (r, &ix) in indices.iter().enumerate() {
                        let src = &g.data()[r * w..(r + 1) * w];
                        for (d, s) in dt.data_mut()[ix * w..(ix + 1) * w].iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::Dropout { a, keep, scale } => {
                if let Some(da) = grad_slot(grads, nodes, *a) {
                    for ((d, gi), k) in da.data_mut().iter_mut().zip(g.data()).zip(keep) {
                        if *k {
                            *d += *gi * *scale;
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let total = g.last_dim();
                let rows = g.rows();
                let mut off = 0;
                for p in parts {
                    let w = val(*p).last_dim();
                    if let Some(dp) = grad_slot(grads, nodes, *p) {
                        for r in 0..rows {
                            let src = &g.data()[r * total + off..r * total + off + w];
                            for (d, s) in dp.data_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceFeatures { a, start } => {
                if let Some(da) = grad_slot(grads, nodes, *a) {
                    let d = da.last_dim();
                    let len = g.last_dim();
                    for r in 0..g.rows() {
                        for (dst, s) in da.data_mut()[r * d + start..r * d + start + len].iter_mut().zip(g.row(r)) {
                            *dst += *s;
                        }
                    }
                }
            }
            Op::SlicePositions { a, start } => {
                if let Some(da) = grad_slot(grads, nodes, *a) {
                    let (t, d) = last_two(da.shape()).expect("rank checked in forward");
                    let (len, _) = last_two(g.shape()).expect("rank checked in forward");
                    let batch = da.len() / (t * d).max(1);
                    for b in 0..batch {
                        let dst = &mut da.data_mut()[b * t * d + start * d..b * t * d + (start + len) * d];
                        for (x, s) in dst.iter_mut().zip(&g.data()[b * len * d..(b + 1) * len * d]) {
                            *x += *s;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if let Some(dl) = grad_slot(grads, nodes, *logits) {
                    let vocab = dl.last_dim();
                    let s = g.item() / T::of(targets.len().max(1) as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut dl.data_mut()[r * vocab..(r + 1) * vocab];
                        for (d, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *d += *p * s;
                        }
                        row[t] -= s;
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = val(*logits).data();
                if let Some(dl) = grad_slot(grads, nodes, *logits) {
                    let s = g.item() / T::of(targets.len().max(1) as f64);
                    for ((d, z), y) in dl.data_mut().iter_mut().zip(lv).zip(targets) {
                        let p = T::one() / (T::one() + (-*z).exp());
                        *d += (p - *y) * s;
                    }
                }
            }
            Op::Attention(saved) => saved.backprop(nodes, g, grads),
        }
    }
}

fn backprop_matmul<T: Scalar>(nodes: &[Node<T>], a: Var, b: Var, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
    let plan = MatMulPlan::new(av.shape(), bv.shape()).expect("validated in forward");
    let MatMulPlan { batch, m, k, n, a_batched, b_batched } = plan;
    let gd = g.data();
    if let Some(da) = grad_slot(grads, nodes, a) {
        if a_batched && !b_batched {
            gemm(gd, MatView::new(batch * m, n), bv.data(), MatView::new(k, n).t(), da.data_mut(), true);
        } else {
            for bi in 0..batch {
                let ao = if a_batched { bi * m * k } else { 0 };
                let bo = if b_batched { bi * k * n } else { 0 };
                gemm(
                    &gd[bi * m * n..(bi + 1) * m * n],
                    MatView::new(m, n),
                    &bv.data()[bo..bo + k * n],
                    MatView::new(k, n).t(),
                    &mut da.data_mut()[ao..ao + m * k],
                    true,
                );
            }
        }
    }
    if let Some(db) = grad_slot(grads, nodes, b) {
        if a_batched && !b_batched {
            gemm(av.data(), MatView::new(batch * m, k).t(), gd, MatView::new(batch * m, n), db.data_mut(), true);
        } else {
            for bi in 0..batch {
                let ao = if a_batched { bi * m * k } else { 0 };
                let bo = if b_batched { bi * k * n } else { 0 };
                gemm(
                    &av.data()[ao..ao + m * k],
                    MatView::new(m, k).t(),
                    &gd[bi * m * n..(bi + 1) * m * n],
                    MatView::new(m, n),
                    &mut db.data_mut()[bo..bo + k * n],
                    true,
                );
            }
        }
    }
}

fn last_two(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [.., r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn transpose_last2<T: Scalar>(a: &Array<T>) -> Option<Array<T>> {
    let (r, c) = last_two(a.shape())?;
    let batch = a.len() / (r * c).max(1);
    let mut out = vec![T::zero(); a.len()];
    for b in 0..batch {
        let src = &a.data()[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = a.shape().to_vec();
    let n = shape.len();
    shape.swap(n - 2, n - 1);
    Array::from_vec(&shape, out).ok()
}

/// In-place softmax of one row. Returns `None` for NaN/+inf input or a row
/// with no finite entry.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) -> Option<()> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return None;
    }
    for v in row.iter_mut() {
        *v -= max;
    }
    T::exp_in_place(row);
    // NaN input survives max (which skips it) but poisons the sum
    let z = sum_lanes(row);
    if !z.is_finite() {
        return None;
    }
    let inv = T::one() / z;
    for v in row.iter_mut() {
        *v *= inv;
    }
    Some(())
}
