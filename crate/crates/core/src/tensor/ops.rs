//! Forward builders and backward kernels for the tape primitives.
//!
//! Kernels are bit-exact per example: convolution and dense layers compute
//! each example independently, so a tensor's forward value and input
//! gradient do not depend on which batch it sits in or on the number of
//! worker threads. Parameter-gradient reductions sum fixed example chunks in
//! index order, which keeps them deterministic run to run. Large buffers are
//! recycled through the element type's pool.

use rayon::prelude::*;

use super::tape::{Op, Reduction, Tape, Tensor, TensorError, TensorResult};
use super::Real;

/// Examples per partial buffer in parameter-gradient reductions. Fixed so
/// the floating-point summation tree never depends on thread count.
const GRAD_CHUNK: usize = 32;

/// Below this weight size a dense layer uses direct loops instead of GEMM;
/// m=1 GEMM calls spend more time packing than multiplying.
const DIRECT_LINEAR_LIMIT: usize = 1 << 18;

impl<F: Real> Tape<F> {
    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> TensorResult<Tensor> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let av = &self.nodes[a.id].value;
        let bv = &self.nodes[b.id].value;
        let mut out = F::pool().scratch(av.len());
        for ((o, &x), &y) in out.iter_mut().zip(av).zip(bv) {
            *o = f(x, y);
        }
        let needs = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(out, a.shape().to_vec(), needs, op))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add { a: a.id, b: b.id })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a: a.id, b: b.id })
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a: a.id, b: b.id })
    }

    pub fn scale(&mut self, a: &Tensor, c: F) -> Tensor {
        let av = &self.nodes[a.id].value;
        let mut out = F::pool().scratch(av.len());
        for (o, &x) in out.iter_mut().zip(av) {
            *o = x * c;
        }
        let needs = self.needs(a.id);
        self.push(out, a.shape().to_vec(), needs, Op::Scale { a: a.id, c })
    }

    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let s: F = self.nodes[a.id].value.iter().copied().sum();
        let needs = self.needs(a.id);
        self.push(vec![s], vec![1], needs, Op::Sum { a: a.id })
    }

    pub fn mean(&mut self, a: &Tensor) -> Tensor {
        let n = F::from_f64(a.len() as f64);
        let s: F = self.nodes[a.id].value.iter().copied().sum();
        let needs = self.needs(a.id);
        self.push(vec![s / n], vec![1], needs, Op::Mean { a: a.id })
    }

    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        let zero = F::zero();
        let av = &self.nodes[a.id].value;
        let mut out = F::pool().scratch(av.len());
        for (o, &x) in out.iter_mut().zip(av) {
            *o = if x > zero { x } else { zero };
        }
        let needs = self.needs(a.id);
        self.push(out, a.shape().to_vec(), needs, Op::Relu { a: a.id })
    }

    /// Collapse `[N, d1, d2, ...]` into `[N, d1·d2·...]`.
    pub fn flatten(&mut self, a: &Tensor) -> TensorResult<Tensor> {
        if a.shape().is_empty() {
            return Err(TensorError::BadShape {
                op: "flatten",
                expected: "at least one dimension".into(),
                got: a.shape().to_vec(),
            });
        }
        let n = a.shape()[0];
        let rest: usize = a.shape()[1..].iter().product();
        let av = &self.nodes[a.id].value;
        let mut out = F::pool().scratch(av.len());
        out.copy_from_slice(av);
        let needs = self.needs(a.id);
        Ok(self.push(out, vec![n, rest], needs, Op::Flatten { a: a.id }))
    }

    /// Dense affine map: `x [N, I] × w [I, O] + b [O]`.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
        let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if bs != [ws[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: ws.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let (n, i, o) = (xs[0], xs[1], ws[1]);
        let xv = &self.nodes[x.id].value;
        let wv = &self.nodes[w.id].value;
        let bv = &self.nodes[b.id].value;
        let mut out = F::pool().scratch(n * o);
        // Per-example kernels keep results batch-independent. Small layers
        // run a direct axpy loop; large ones amortize a GEMM's packing cost.
        let direct = i * o < DIRECT_LINEAR_LIMIT;
        out.par_chunks_mut(o).enumerate().for_each(|(e, row)| {
            let xe = &xv[e * i..(e + 1) * i];
            if direct {
                row.copy_from_slice(bv);
                for (ii, &xi) in xe.iter().enumerate() {
                    let wrow = &wv[ii * o..(ii + 1) * o];
                    for (r, &wj) in row.iter_mut().zip(wrow) {
                        *r = *r + xi * wj;
                    }
                }
            } else {
                unsafe {
                    F::gemm(
                        1,
                        i,
                        o,
                        F::one(),
                        xe.as_ptr(),
                        i as isize,
                        1,
                        wv.as_ptr(),
                        o as isize,
                        1,
                        F::zero(),
                        row.as_mut_ptr(),
                        o as isize,
                        1,
                    );
                }
                for (r, &bj) in row.iter_mut().zip(bv) {
                    *r = *r + bj;
                }
            }
        });
        let needs = self.needs(x.id) || self.needs(w.id) || self.needs(b.id);
        Ok(self.push(
            out,
            vec![n, o],
            needs,
            Op::Linear {
                x: x.id,
                w: w.id,
                b: b.id,
            },
        ))
    }

    /// 2-D convolution with zero padding: `x [N, C, H, W]`, `w [Cout, C, kh, kw]`,
    /// `b [Cout]`.
    pub fn conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: usize,
        pad: usize,
    ) -> TensorResult<Tensor> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if b.shape() != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: ws.to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::BadShape {
                op: "conv2d",
                expected: format!("kernel {kh}x{kw} to fit input with pad {pad}, stride >= 1"),
                got: xs.to_vec(),
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };

        let xv = &self.nodes[x.id].value;
        let wv = &self.nodes[w.id].value;
        let bv = &self.nodes[b.id].value;
        let in_plane = c * h * wd;
        let mut out = F::pool().scratch(n * cout * oh * ow);
        out.par_chunks_mut(cout * oh * ow)
            .enumerate()
            .for_each(|(e, out_e)| {
                conv_forward(&xv[e * in_plane..(e + 1) * in_plane], wv, bv, &geom, cout, out_e);
            });

        let needs = self.needs(x.id) || self.needs(w.id) || self.needs(b.id);
        Ok(self.push(
            out,
            vec![n, cout, oh, ow],
            needs,
            Op::Conv2d {
                x: x.id,
                w: w.id,
                b: b.id,
                stride,
                pad,
            },
        ))
    }

    /// 2×2 max pooling with stride 2. Spatial dimensions must be even.
    pub fn max_pool2x2(&mut self, a: &Tensor) -> TensorResult<Tensor> {
        let s = a.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(TensorError::BadShape {
                op: "max_pool2x2",
                expected: "[N, C, H, W] with even H and W".into(),
                got: s.to_vec(),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let v = &self.nodes[a.id].value;
        let mut out = F::pool().scratch(n * c * oh * ow);
        let mut argmax = vec![0u32; n * c * oh * ow];
        for (o, (val, arg)) in out.iter_mut().zip(argmax.iter_mut()).enumerate() {
            let ox = o % ow;
            let oy = (o / ow) % oh;
            let plane = o / (ow * oh); // combined (example, channel) index
            let base = plane * h * w + (oy * 2) * w + ox * 2;
            // First maximum wins on ties.
            let mut best_idx = base;
            let mut best = v[base];
            for &idx in &[base + 1, base + w, base + w + 1] {
                if v[idx] > best {
                    best = v[idx];
                    best_idx = idx;
                }
            }
            *val = best;
            *arg = best_idx as u32;
        }
        let needs = self.needs(a.id);
        Ok(self.push(
            out,
            vec![n, c, oh, ow],
            needs,
            Op::MaxPool2x2 { a: a.id, argmax },
        ))
    }

    /// Row-wise log-softmax over `[N, K]`.
    pub fn log_softmax(&mut self, a: &Tensor) -> TensorResult<Tensor> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(TensorError::BadShape {
                op: "log_softmax",
                expected: "[N, K]".into(),
                got: s.to_vec(),
            });
        }
        let k = s[1];
        let av = &self.nodes[a.id].value;
        let mut out = F::pool().scratch(av.len());
        out.copy_from_slice(av);
        for row in out.chunks_mut(k) {
            log_softmax_row(row);
        }
        let needs = self.needs(a.id);
        Ok(self.push(out, s.to_vec(), needs, Op::LogSoftmax { a: a.id }))
    }

    /// Cross-entropy of logits `[N, K]` against integer labels.
    pub fn cross_entropy(
        &mut self,
        logits: &Tensor,
        labels: &[usize],
        reduction: Reduction,
    ) -> TensorResult<Tensor> {
        let s = logits.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::BadShape {
                op: "cross_entropy",
                expected: format!("[{}, K] logits", labels.len()),
                got: s.to_vec(),
            });
        }
        let (n, k) = (s[0], s[1]);
        for &y in labels {
            if y >= k {
                return Err(TensorError::LabelOutOfRange {
                    op: "cross_entropy",
                    label: y,
                    classes: k,
                });
            }
        }
        let mut probs = self.nodes[logits.id].value.clone();
        let mut total = F::zero();
        for (row, &y) in probs.chunks_mut(k).zip(labels) {
            log_softmax_row(row);
            total = total - row[y];
            for p in row.iter_mut() {
                *p = p.exp();
            }
        }
        let value = match reduction {
            Reduction::Sum => total,
            Reduction::Mean => total / F::from_f64(n as f64),
        };
        let needs = self.needs(logits.id);
        Ok(self.push(
            vec![value],
            vec![1],
            needs,
            Op::CrossEntropy {
                logits: logits.id,
                labels: labels.to_vec(),
                reduction,
                probs,
            },
        ))
    }

    /// KL divergence `KL(softmax(p) ‖ softmax(q))` between logit rows,
    /// reduced over the batch. Gradients flow into both operands.
    pub fn kl_div_logits(
        &mut self,
        p: &Tensor,
        q: &Tensor,
        reduction: Reduction,
    ) -> TensorResult<Tensor> {
        if p.shape() != q.shape() || p.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "kl_div_logits",
                lhs: p.shape().to_vec(),
                rhs: q.shape().to_vec(),
            });
        }
        let (n, k) = (p.shape()[0], p.shape()[1]);
        let mut log_p = self.nodes[p.id].value.clone();
        let mut log_q = self.nodes[q.id].value.clone();
        for row in log_p.chunks_mut(k) {
            log_softmax_row(row);
        }
        for row in log_q.chunks_mut(k) {
            log_softmax_row(row);
        }
        let mut row_kl = vec![F::zero(); n];
        for ((lp, lq), kl) in log_p
            .chunks(k)
            .zip(log_q.chunks(k))
            .zip(row_kl.iter_mut())
        {
            let mut acc = F::zero();
            for (&a, &b) in lp.iter().zip(lq) {
                acc = acc + a.exp() * (a - b);
            }
            *kl = acc;
        }
        let total: F = row_kl.iter().copied().sum();
        let value = match reduction {
            Reduction::Sum => total,
            Reduction::Mean => total / F::from_f64(n as f64),
        };
        let needs = self.needs(p.id) || self.needs(q.id);
        Ok(self.push(
            vec![value],
            vec![1],
            needs,
            Op::KlDivLogits {
                p: p.id,
                q: q.id,
                reduction,
                log_p,
                log_q,
                row_kl,
            },
        ))
    }

    /// Margin loss `max_{i≠y} z_i − z_y` per row, reduced over the batch.
    pub fn cw_margin(
        &mut self,
        logits: &Tensor,
        labels: &[usize],
        reduction: Reduction,
    ) -> TensorResult<Tensor> {
        let s = logits.shape();
        if s.len() != 2 || s[0] != labels.len() || s[1] < 2 {
            return Err(TensorError::BadShape {
                op: "cw_margin",
                expected: format!("[{}, K>=2] logits", labels.len()),
                got: s.to_vec(),
            });
        }
        let (n, k) = (s[0], s[1]);
        for &y in labels {
            if y >= k {
                return Err(TensorError::LabelOutOfRange {
                    op: "cw_margin",
                    label: y,
                    classes: k,
                });
            }
        }
        let v = &self.nodes[logits.id].value;
        let mut best = vec![0u32; n];
        let mut total = F::zero();
        for (e, (&y, row)) in labels.iter().zip(v.chunks(k)).enumerate() {
            let mut bi = usize::MAX;
            let mut bv = F::neg_infinity();
            for (i, &z) in row.iter().enumerate() {
                if i != y && z > bv {
                    bv = z;
                    bi = i;
                }
            }
            best[e] = bi as u32;
            total = total + bv - row[y];
        }
        let value = match reduction {
            Reduction::Sum => total,
            Reduction::Mean => total / F::from_f64(n as f64),
        };
        let needs = self.needs(logits.id);
        Ok(self.push(
            vec![value],
            vec![1],
            needs,
            Op::CwMargin {
                logits: logits.id,
                labels: labels.to_vec(),
                reduction,
                best,
            },
        ))
    }

    pub(crate) fn backward_node(&mut self, id: usize) {
        if matches!(self.nodes[id].op, Op::Leaf) {
            return; // leaf gradients stay queryable after backward
        }
        let dy = match self.grads[id].take() {
            Some(g) => g,
            None => return,
        };
        let pool = F::pool();
        // Move the op out so its saved buffers can be read while gradient
        // buffers are written; restored before returning.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if self.needs(*a) {
                    self.accumulate_ref(*a, &dy);
                }
                if self.needs(*b) {
                    self.accumulate_ref(*b, &dy);
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    self.accumulate_ref(*a, &dy);
                }
                if self.needs(*b) {
                    let mut neg = pool.scratch(dy.len());
                    for (n, &g) in neg.iter_mut().zip(&dy) {
                        *n = -g;
                    }
                    self.accumulate(*b, neg);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let mut da = pool.scratch(dy.len());
                    for ((d, &g), &y) in da.iter_mut().zip(&dy).zip(&self.nodes[b].value) {
                        *d = g * y;
                    }
                    self.accumulate(a, da);
                }
                if self.needs(b) {
                    let mut db = pool.scratch(dy.len());
                    for ((d, &g), &x) in db.iter_mut().zip(&dy).zip(&self.nodes[a].value) {
                        *d = g * x;
                    }
                    self.accumulate(b, db);
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                if self.needs(a) {
                    let mut da = pool.scratch(dy.len());
                    for (d, &g) in da.iter_mut().zip(&dy) {
                        *d = g * c;
                    }
                    self.accumulate(a, da);
                }
            }
            Op::Sum { a } => {
                let a = *a;
                if self.needs(a) {
                    let n = self.nodes[a].value.len();
                    let mut da = pool.scratch(n);
                    da.fill(dy[0]);
                    self.accumulate(a, da);
                }
            }
            Op::Mean { a } => {
                let a = *a;
                if self.needs(a) {
                    let n = self.nodes[a].value.len();
                    let g = dy[0] / F::from_f64(n as f64);
                    let mut da = pool.scratch(n);
                    da.fill(g);
                    self.accumulate(a, da);
                }
            }
            Op::Relu { a } => {
                let a = *a;
                if self.needs(a) {
                    let zero = F::zero();
                    let mut da = pool.scratch(dy.len());
                    for ((d, &g), &x) in da.iter_mut().zip(&dy).zip(&self.nodes[a].value) {
                        *d = if x > zero { g } else { zero };
                    }
                    self.accumulate(a, da);
                }
            }
            Op::Flatten { a } => {
                if self.needs(*a) {
                    self.accumulate_ref(*a, &dy);
                }
            }
            Op::Linear { x, w, b } => self.backward_linear(*x, *w, *b, &dy),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let geom = {
                    let xs = &self.nodes[*x].shape;
                    let ws = &self.nodes[*w].shape;
                    let os = &self.nodes[id].shape;
                    ConvGeom {
                        c: xs[1],
                        h: xs[2],
                        w: xs[3],
                        kh: ws[2],
                        kw: ws[3],
                        stride: *stride,
                        pad: *pad,
                        oh: os[2],
                        ow: os[3],
                    }
                };
                self.backward_conv2d(*x, *w, *b, geom, &dy);
            }
            Op::MaxPool2x2 { a, argmax } => {
                let a = *a;
                if self.needs(a) {
                    let mut da = pool.zeroed(self.nodes[a].value.len());
                    for (&g, &idx) in dy.iter().zip(argmax) {
                        da[idx as usize] = da[idx as usize] + g;
                    }
                    self.accumulate(a, da);
                }
            }
            Op::LogSoftmax { a } => {
                let a = *a;
                if self.needs(a) {
                    let out = &self.nodes[id].value;
                    let k = *self.nodes[id].shape.last().unwrap();
                    let mut da = pool.scratch(out.len());
                    for ((drow, lsrow), row) in
                        dy.chunks(k).zip(out.chunks(k)).zip(da.chunks_mut(k))
                    {
                        let gsum: F = drow.iter().copied().sum();
                        for ((d, &g), &ls) in row.iter_mut().zip(drow).zip(lsrow) {
                            *d = g - ls.exp() * gsum;
                        }
                    }
                    self.accumulate(a, da);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                reduction,
                probs,
            } => {
                let logits = *logits;
                if self.needs(logits) {
                    let k = probs.len() / labels.len();
                    let g = match reduction {
                        Reduction::Sum => dy[0],
                        Reduction::Mean => dy[0] / F::from_f64(labels.len() as f64),
                    };
                    let mut da = pool.scratch(probs.len());
                    da.copy_from_slice(probs);
                    for (row, &y) in da.chunks_mut(k).zip(labels) {
                        row[y] = row[y] - F::one();
                        for v in row.iter_mut() {
                            *v = *v * g;
                        }
                    }
                    self.accumulate(logits, da);
                }
            }
            Op::KlDivLogits {
                p,
                q,
                reduction,
                log_p,
                log_q,
                row_kl,
            } => {
                let (p, q) = (*p, *q);
                let k = log_p.len() / row_kl.len();
                let g = match reduction {
                    Reduction::Sum => dy[0],
                    Reduction::Mean => dy[0] / F::from_f64(row_kl.len() as f64),
                };
                if self.needs(p) {
                    // d/dp_j = p_j · ((log p_j − log q_j) − KL_row)
                    let mut da = pool.scratch(log_p.len());
                    for ((row, (lp, lq)), &kl) in da
                        .chunks_mut(k)
                        .zip(log_p.chunks(k).zip(log_q.chunks(k)))
                        .zip(row_kl)
                    {
                        for ((d, &a), &b) in row.iter_mut().zip(lp).zip(lq) {
                            *d = g * a.exp() * (a - b - kl);
                        }
                    }
                    self.accumulate(p, da);
                }
                if self.needs(q) {
                    // d/dq_j = softmax(q)_j − softmax(p)_j
                    let mut da = pool.scratch(log_q.len());
                    for (row, (lp, lq)) in
                        da.chunks_mut(k).zip(log_p.chunks(k).zip(log_q.chunks(k)))
                    {
                        for ((d, &a), &b) in row.iter_mut().zip(lp).zip(lq) {
                            *d = g * (b.exp() - a.exp());
                        }
                    }
                    self.accumulate(q, da);
                }
            }
            Op::CwMargin {
                logits,
                labels,
                reduction,
                best,
            } => {
                let logits = *logits;
                if self.needs(logits) {
                    let len = self.nodes[logits].value.len();
                    let k = len / labels.len();
                    let g = match reduction {
                        Reduction::Sum => dy[0],
                        Reduction::Mean => dy[0] / F::from_f64(labels.len() as f64),
                    };
                    let mut da = pool.zeroed(len);
                    for (e, (&y, &bi)) in labels.iter().zip(best.iter()).enumerate() {
                        da[e * k + bi as usize] = da[e * k + bi as usize] + g;
                        da[e * k + y] = da[e * k + y] - g;
                    }
                    self.accumulate(logits, da);
                }
            }
        }
        self.nodes[id].op = op;
        pool.give(dy);
    }

    fn backward_linear(&mut self, x: usize, w: usize, b: usize, dy: &[F]) {
        let (n, i) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
        let o = self.nodes[w].shape[1];
        if self.needs(x) {
            let wv = &self.nodes[w].value;
            let direct = i * o < DIRECT_LINEAR_LIMIT;
            let mut dx = F::pool().scratch(n * i);
            dx.par_chunks_mut(i).enumerate().for_each(|(e, row)| {
                let de = &dy[e * o..(e + 1) * o];
                if direct {
                    // dx_i = dot(dy, w[i, :]); w rows are contiguous.
                    for (ii, r) in row.iter_mut().enumerate() {
                        let wrow = &wv[ii * o..(ii + 1) * o];
                        let mut s = F::zero();
                        for (&d, &wj) in de.iter().zip(wrow) {
                            s = s + d * wj;
                        }
                        *r = s;
                    }
                } else {
                    unsafe {
                        F::gemm(
                            1,
                            o,
                            i,
                            F::one(),
                            de.as_ptr(),
                            o as isize,
                            1,
                            wv.as_ptr(),
                            1,
                            o as isize,
                            F::zero(),
                            row.as_mut_ptr(),
                            i as isize,
                            1,
                        );
                    }
                }
            });
            self.accumulate(x, dx);
        }
        if self.needs(w) {
            let xv = &self.nodes[x].value;
            let dw = ordered_chunk_sum(n, i * o, |range, acc| {
                for e in range {
                    let xe = &xv[e * i..(e + 1) * i];
                    let de = &dy[e * o..(e + 1) * o];
                    for (ii, &xi) in xe.iter().enumerate() {
                        let row = &mut acc[ii * o..(ii + 1) * o];
                        for (r, &d) in row.iter_mut().zip(de) {
                            *r = *r + xi * d;
                        }
                    }
                }
            });
            self.accumulate(w, dw);
        }
        if self.needs(b) {
            let db = ordered_chunk_sum(n, o, |range, acc| {
                for e in range {
                    for (a, &d) in acc.iter_mut().zip(&dy[e * o..(e + 1) * o]) {
                        *a = *a + d;
                    }
                }
            });
            self.accumulate(b, db);
        }
    }

    fn backward_conv2d(&mut self, x: usize, w: usize, b: usize, geom: ConvGeom, dy: &[F]) {
        let n = self.nodes[x].shape[0];
        let cout = self.nodes[w].shape[0];
        let positions = geom.oh * geom.ow;
        let in_plane = geom.c * geom.h * geom.w;
        if self.needs(x) {
            let wv = &self.nodes[w].value;
            let mut dx = F::pool().zeroed(n * in_plane);
            dx.par_chunks_mut(in_plane)
                .enumerate()
                .for_each(|(e, dx_e)| {
                    conv_backward_input(
                        &dy[e * cout * positions..(e + 1) * cout * positions],
                        wv,
                        &geom,
                        cout,
                        dx_e,
                    );
                });
            self.accumulate(x, dx);
        }
        if self.needs(w) {
            let xv = &self.nodes[x].value;
            let patch = geom.c * geom.kh * geom.kw;
            let dw = ordered_chunk_sum(n, cout * patch, |range, acc| {
                for e in range {
                    conv_backward_weight(
                        &xv[e * in_plane..(e + 1) * in_plane],
                        &dy[e * cout * positions..(e + 1) * cout * positions],
                        &geom,
                        cout,
                        acc,
                    );
                }
            });
            self.accumulate(w, dw);
        }
        if self.needs(b) {
            let db = ordered_chunk_sum(n, cout, |range, acc| {
                for e in range {
                    for co in 0..cout {
                        let start = e * cout * positions + co * positions;
                        let s: F = dy[start..start + positions].iter().copied().sum();
                        acc[co] = acc[co] + s;
                    }
                }
            });
            self.accumulate(b, db);
        }
    }
}

/// Sum per-example contributions into one buffer using fixed example chunks
/// evaluated in parallel, then combined in chunk order. The summation tree is
/// a function of `n` alone, never of the thread schedule.
fn ordered_chunk_sum<F: Real>(
    n: usize,
    len: usize,
    fill: impl Fn(std::ops::Range<usize>, &mut [F]) + Sync,
) -> Vec<F> {
    let chunk_starts: Vec<usize> = (0..n).step_by(GRAD_CHUNK).collect();
    let partials: Vec<Vec<F>> = chunk_starts
        .par_iter()
        .map(|&start| {
            let mut acc = F::pool().zeroed(len);
            fill(start..(start + GRAD_CHUNK).min(n), &mut acc);
            acc
        })
        .collect();
    let mut total = F::pool().zeroed(len);
    for p in partials {
        for (t, v) in total.iter_mut().zip(&p) {
            *t = *t + *v;
        }
        F::pool().give(p);
    }
    total
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// Output-row bounds for which the shifted input index stays in range,
    /// for stride 1: `o + k - pad ∈ [0, extent)`.
    fn valid_span(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k);
        let hi = (extent + self.pad).saturating_sub(k).min(out_extent);
        (lo, hi.max(lo))
    }
}

/// Direct convolution, one example. Accumulation order per element is fixed
/// by the (ci, ky, kx) loop nest.
fn conv_forward<F: Real>(x: &[F], w: &[F], b: &[F], g: &ConvGeom, cout: usize, out: &mut [F]) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for co in 0..cout {
        let out_c = &mut out[co * out_plane..(co + 1) * out_plane];
        for v in out_c.iter_mut() {
            *v = b[co];
        }
        for ci in 0..g.c {
            let x_c = &x[ci * in_plane..(ci + 1) * in_plane];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w[((co * g.c + ci) * g.kh + ky) * g.kw + kx];
                    if g.stride == 1 {
                        let (oy_lo, oy_hi) = g.valid_span(ky, g.h, g.oh);
                        let (ox_lo, ox_hi) = g.valid_span(kx, g.w, g.ow);
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - g.pad;
                            let ix0 = ox_lo + kx - g.pad;
                            let orow = &mut out_c[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                            let xrow = &x_c[iy * g.w + ix0..iy * g.w + ix0 + orow.len()];
                            for (o, &xv) in orow.iter_mut().zip(xrow) {
                                *o = *o + wv * xv;
                            }
                        }
                    } else {
                        for oy in 0..g.oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for ox in 0..g.ow {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let o = oy * g.ow + ox;
                                out_c[o] = out_c[o] + wv * x_c[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dL/dx for one example: the forward loops with read and write sides swapped.
fn conv_backward_input<F: Real>(dy: &[F], w: &[F], g: &ConvGeom, cout: usize, dx: &mut [F]) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for co in 0..cout {
        let dy_c = &dy[co * out_plane..(co + 1) * out_plane];
        for ci in 0..g.c {
            let dx_c = &mut dx[ci * in_plane..(ci + 1) * in_plane];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w[((co * g.c + ci) * g.kh + ky) * g.kw + kx];
                    if g.stride == 1 {
                        let (oy_lo, oy_hi) = g.valid_span(ky, g.h, g.oh);
                        let (ox_lo, ox_hi) = g.valid_span(kx, g.w, g.ow);
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - g.pad;
                            let ix0 = ox_lo + kx - g.pad;
                            let drow = &dy_c[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                            let xrow = &mut dx_c[iy * g.w + ix0..iy * g.w + ix0 + drow.len()];
                            for (xg, &d) in xrow.iter_mut().zip(drow) {
                                *xg = *xg + wv * d;
                            }
                        }
                    } else {
                        for oy in 0..g.oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for ox in 0..g.ow {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let i = iy as usize * g.w + ix as usize;
                                dx_c[i] = dx_c[i] + wv * dy_c[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dL/dw contribution of one example, added into `acc` (`[Cout, C, kh, kw]`).
fn conv_backward_weight<F: Real>(x: &[F], dy: &[F], g: &ConvGeom, cout: usize, acc: &mut [F]) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for co in 0..cout {
        let dy_c = &dy[co * out_plane..(co + 1) * out_plane];
        for ci in 0..g.c {
            let x_c = &x[ci * in_plane..(ci + 1) * in_plane];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let mut s = F::zero();
                    if g.stride == 1 {
                        let (oy_lo, oy_hi) = g.valid_span(ky, g.h, g.oh);
                        let (ox_lo, ox_hi) = g.valid_span(kx, g.w, g.ow);
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - g.pad;
                            let ix0 = ox_lo + kx - g.pad;
                            let drow = &dy_c[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                            let xrow = &x_c[iy * g.w + ix0..iy * g.w + ix0 + drow.len()];
                            for (&d, &xv) in drow.iter().zip(xrow) {
                                s = s + d * xv;
                            }
                        }
                    } else {
                        for oy in 0..g.oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for ox in 0..g.ow {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                s = s + dy_c[oy * g.ow + ox] * x_c[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                    let wi = ((co * g.c + ci) * g.kh + ky) * g.kw + kx;
                    acc[wi] = acc[wi] + s;
                }
            }
        }
    }
}

/// In-place log-softmax over one row, max-shifted for stability.
fn log_softmax_row<F: Real>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = *v - m;
        sum = sum + v.exp();
    }
    let lse = sum.ln();
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}
