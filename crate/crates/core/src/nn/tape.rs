//! Reverse-mode differentiation over a recorded list of operations.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters enter as
//! leaves that remember their slot in a [`ParamSet`]; frozen parameters
//! enter as constants, so no gradient is ever computed for them.

use rand::Rng;

use super::kernels::{self, FreqPadding};
use super::{NdArray, NnError, ParamSet, Real};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<F> {
    Input,
    Param(usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: FreqPadding,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    MaxPoolFreq {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    MeanTimeFreq(Var),
    TimeSlice {
        x: Var,
        t: usize,
    },
    MatMul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Softmax(Var),
    Bce {
        probs: Var,
        targets: Vec<usize>,
        floor: F,
    },
    Mean(Var),
    WeightedSum {
        x: Var,
        weights: Vec<F>,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::MaxPoolFreq { .. } => "max_pool_freq",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Dropout { .. } => "dropout",
            Op::MeanTimeFreq(_) => "mean_time_freq",
            Op::TimeSlice { .. } => "time_slice",
            Op::MatMul(..) => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Softmax(_) => "softmax",
            Op::Bce { .. } => "bce",
            Op::Mean(_) => "mean",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    value: NdArray<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode normalization, for updating
/// running averages outside the tape.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads<F> {
    grads: Vec<Option<NdArray<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&NdArray<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NdArray<F> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: NdArray<F>, op: Op<F>, needs_grad: bool) -> Result<Var, NnError> {
        if !value.is_finite() {
            return Err(NnError::NonFinite(op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant leaf.
    pub fn input(&mut self, value: NdArray<F>) -> Result<Var, NnError> {
        self.push(value, Op::Input, false)
    }

    /// A leaf whose gradient is wanted (used to differentiate w.r.t. inputs).
    pub fn input_with_grad(&mut self, value: NdArray<F>) -> Result<Var, NnError> {
        self.push(value, Op::Input, true)
    }

    /// A parameter leaf. Frozen parameters and buffers enter as constants.
    pub fn param(&mut self, params: &ParamSet<F>, name: &str) -> Result<Var, NnError> {
        let idx = params.index_of(name)?;
        let (_, p) = params.by_index(idx);
        let trainable = p.is_trainable();
        self.push(p.value.clone(), Op::Param(idx), trainable)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: FreqPadding) -> Result<Var, NnError> {
        let y = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), pad)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(y, Op::Conv2d { x, w, b, pad }, ng)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NnError::Shape(format!(
                "{}: {:?} vs {:?}",
                op.name(),
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let y = NdArray::from_vec(av.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(y, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NnError> {
        let y = self.value(x).map(kernels::sigmoid);
        let ng = self.needs(x);
        self.push(y, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NnError> {
        let y = self.value(x).map(F::tanh);
        let ng = self.needs(x);
        self.push(y, Op::Tanh(x), ng)
    }

    /// `(W*X + b) ⊙ σ(V*X + c)`.
    pub fn glu_conv(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        v: Var,
        c: Var,
        pad: FreqPadding,
    ) -> Result<Var, NnError> {
        let lin = self.conv2d(x, w, b, pad)?;
        let gate_in = self.conv2d(x, v, c, pad)?;
        let gate = self.sigmoid(gate_in)?;
        self.mul(lin, gate)
    }

    pub fn max_pool_freq(&mut self, x: Var, pool: usize) -> Result<Var, NnError> {
        let (y, argmax) = kernels::max_pool_freq(self.value(x), pool)?;
        let ng = self.needs(x);
        self.push(y, Op::MaxPoolFreq { x, argmax }, ng)
    }

    /// Per-channel normalization of a `(batch, channels, time, freq)` array.
    ///
    /// With `running = None` the batch's own statistics are used (training)
    /// and returned; otherwise the supplied `(mean, var)` are treated as
    /// constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[F], &[F])>,
    ) -> Result<(Var, Option<BatchStats<F>>), NnError> {
        let xv = self.value(x);
        let (b, c, t, f) = xv.dims4()?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(NnError::Shape(format!(
                    "normalization affine shape {:?} for {c} channels",
                    self.value(p).shape()
                )));
            }
        }
        let plane = t * f;
        let n = b * plane;
        let eps = F::of(BN_EPS);
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(NnError::Shape("running statistics length".into()));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut mean = vec![F::zero(); c];
                let mut var = vec![F::zero(); c];
                let xd = xv.data();
                for ch in 0..c {
                    let mut s = F::zero();
                    for bi in 0..b {
                        let base = (bi * c + ch) * plane;
                        s += xd[base..base + plane].iter().copied().sum();
                    }
                    let m = s / F::of(n as f64);
                    let mut sq = F::zero();
                    for bi in 0..b {
                        let base = (bi * c + ch) * plane;
                        sq += xd[base..base + plane].iter().map(|&v| (v - m) * (v - m)).sum();
                    }
                    mean[ch] = m;
                    var[ch] = sq / F::of(n as f64);
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: n,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![F::zero(); xv.len()];
        let mut y = NdArray::zeros(xv.shape());
        {
            let xd = xv.data();
            let yd = y.data_mut();
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * plane;
                    for i in base..base + plane {
                        let h = (xd[i] - mean[ch]) * inv_std[ch];
                        xhat[i] = h;
                        yd[i] = gd[ch] * h + bd[ch];
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let var_out = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: running.is_none(),
            },
            ng,
        )?;
        Ok((var_out, stats))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<F>) -> Result<Var, NnError> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(NnError::Shape("dropout mask length".into()));
        }
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let y = NdArray::from_vec(xv.shape(), data)?;
        let ng = self.needs(x);
        self.push(y, Op::Dropout { x, mask }, ng)
    }

    /// `(batch, channels, time, freq)` → `(batch, channels)` by averaging.
    pub fn mean_time_freq(&mut self, x: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        let (b, c, t, f) = xv.dims4()?;
        let plane = t * f;
        let scale = F::of(1.0 / plane as f64);
        let data = xv
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<F>() * scale)
            .collect();
        let y = NdArray::from_vec(&[b, c], data)?;
        let ng = self.needs(x);
        self.push(y, Op::MeanTimeFreq(x), ng)
    }

    /// Picks time step `t` of a `(batch, channels, time, 1)` array as `(batch, channels)`.
    pub fn time_slice(&mut self, x: Var, t: usize) -> Result<Var, NnError> {
        let xv = self.value(x);
        let (b, c, tt, f) = xv.dims4()?;
        if f != 1 || t >= tt {
            return Err(NnError::Shape(format!(
                "time_slice({t}) on {:?} needs freq extent 1",
                xv.shape()
            )));
        }
        let data = (0..b * c).map(|bc| xv.data()[bc * tt + t]).collect();
        let y = NdArray::from_vec(&[b, c], data)?;
        let ng = self.needs(x);
        self.push(y, Op::TimeSlice { x, t }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(y, Op::MatMul(a, b), ng)
    }

    /// Adds a length-`cols` bias to every row of a `(rows, cols)` array.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NnError> {
        let (_, cols) = self.value(x).dims2()?;
        if self.value(bias).shape() != [cols] {
            return Err(NnError::Shape(format!(
                "bias {:?} for {cols} columns",
                self.value(bias).shape()
            )));
        }
        let bd = self.value(bias).data().to_vec();
        let mut y = self.value(x).clone();
        for row in y.data_mut().chunks_mut(cols) {
            for (v, &bv) in row.iter_mut().zip(&bd) {
                *v += bv;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(y, Op::AddBias { x, bias }, ng)
    }

    /// Row-wise softmax over exactly two units.
    pub fn softmax2(&mut self, x: Var) -> Result<Var, NnError> {
        let (_, cols) = self.value(x).dims2()?;
        if cols != 2 {
            return Err(NnError::Shape(format!("softmax2 needs 2 units, got {cols}")));
        }
        if !self.value(x).is_finite() {
            return Err(NnError::NonFinite("softmax2 logits"));
        }
        let y = kernels::softmax_rows(self.value(x))?;
        let ng = self.needs(x);
        self.push(y, Op::Softmax(x), ng)
    }

    /// Mean negative log-probability of the target class, with the
    /// probability clamped from below at `floor`.
    pub fn bce(&mut self, probs: Var, targets: &[usize], floor: f64) -> Result<Var, NnError> {
        let (rows, cols) = self.value(probs).dims2()?;
        if cols != 2 {
            return Err(NnError::Shape(format!("bce needs 2 columns, got {cols}")));
        }
        if targets.len() != rows {
            return Err(NnError::Shape(format!(
                "{} targets for {rows} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t > 1) {
            return Err(NnError::Label(bad));
        }
        let floor = F::of(floor);
        let pd = self.value(probs).data();
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -(pd[i * 2 + t].max(floor)).ln())
            .sum::<F>()
            / F::of(rows as f64);
        let ng = self.needs(probs);
        self.push(
            NdArray::scalar(loss),
            Op::Bce {
                probs,
                targets: targets.to_vec(),
                floor,
            },
            ng,
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        let m = xv.sum() / F::of(xv.len() as f64);
        let ng = self.needs(x);
        self.push(NdArray::scalar(m), Op::Mean(x), ng)
    }

    /// `Σ x_i w_i` for fixed weights; a convenient scalar objective.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<F>) -> Result<Var, NnError> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(NnError::Shape("weighted_sum weights length".into()));
        }
        let s = xv.data().iter().zip(&weights).map(|(&a, &w)| a * w).sum();
        let ng = self.needs(x);
        self.push(NdArray::scalar(s), Op::WeightedSum { x, weights }, ng)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>, NnError> {
        if loss.0 >= self.nodes.len() {
            return Err(NnError::NoForward);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NnError::NonScalarLoss(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<NdArray<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(NdArray::full(self.nodes[loss.0].value.shape(), F::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Grads { grads })
    }

    /// Back-propagates and adds parameter gradients into `params`.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet<F>) -> Result<(), NnError> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(idx) = node.op {
                if let Some(g) = &grads.grads[i] {
                    let p = params.by_index_mut(idx);
                    if p.is_trainable() {
                        p.grad.add_assign(g);
                    }
                }
            }
        }
        Ok(())
    }

    fn slot<'a>(&self, grads: &'a mut [Option<NdArray<F>>], v: Var) -> Option<&'a mut NdArray<F>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| NdArray::zeros(shape)))
    }

    fn accumulate(&self, grads: &mut [Option<NdArray<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if let Some(g) = self.slot(grads, v) {
            f(g.data_mut());
        }
    }

    fn backprop_node(
        &self,
        i: usize,
        dy: &NdArray<F>,
        grads: &mut [Option<NdArray<F>>],
    ) -> Result<(), NnError> {
        let node = &self.nodes[i];
        let y = &node.value;
        let dyd = dy.data();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            &Op::Conv2d { x, w, b, pad } => {
                let mut dx = self.slot(grads, x).map(|g| std::mem::replace(g, NdArray::zeros(&[1])));
                let mut dw = self.slot(grads, w).map(|g| std::mem::replace(g, NdArray::zeros(&[1])));
                let mut db = self.slot(grads, b).map(|g| std::mem::replace(g, NdArray::zeros(&[1])));
                kernels::conv2d_backward(
                    self.value(x),
                    self.value(w),
                    self.value(b),
                    pad,
                    dy,
                    dx.as_mut(),
                    dw.as_mut(),
                    db.as_mut(),
                )?;
                for (v, g) in [(x, dx), (w, dw), (b, db)] {
                    if let Some(g) = g {
                        grads[v.0] = Some(g);
                    }
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |g| add_to(g, dyd));
                self.accumulate(grads, b, |g| add_to(g, dyd));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |g| add_to(g, dyd));
                self.accumulate(grads, b, |g| {
                    for (gv, &d) in g.iter_mut().zip(dyd) {
                        *gv -= d;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |g| {
                    for ((gv, &d), &o) in g.iter_mut().zip(dyd).zip(bd) {
                        *gv += d * o;
                    }
                });
                self.accumulate(grads, b, |g| {
                    for ((gv, &d), &o) in g.iter_mut().zip(dyd).zip(ad) {
                        *gv += d * o;
                    }
                });
            }
            &Op::Sigmoid(x) => {
                let yd = y.data();
                self.accumulate(grads, x, |g| {
                    for ((gv, &d), &s) in g.iter_mut().zip(dyd).zip(yd) {
                        *gv += d * s * (F::one() - s);
                    }
                });
            }
            &Op::Tanh(x) => {
                let yd = y.data();
                self.accumulate(grads, x, |g| {
                    for ((gv, &d), &t) in g.iter_mut().zip(dyd).zip(yd) {
                        *gv += d * (F::one() - t * t);
                    }
                });
            }
            Op::MaxPoolFreq { x, argmax } => {
                self.accumulate(grads, *x, |g| {
                    for (&src, &d) in argmax.iter().zip(dyd) {
                        g[src] += d;
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (b, c, t, f) = y.dims4()?;
                let plane = t * f;
                let n = F::of((b * plane) as f64);
                let gd = self.value(*gamma).data();
                let mut sum_dy = vec![F::zero(); c];
                let mut sum_dy_xhat = vec![F::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        for k in base..base + plane {
                            sum_dy[ch] += dyd[k];
                            sum_dy_xhat[ch] += dyd[k] * xhat[k];
                        }
                    }
                }
                self.accumulate(grads, *gamma, |g| add_to(g, &sum_dy_xhat));
                self.accumulate(grads, *beta, |g| add_to(g, &sum_dy));
                self.accumulate(grads, *x, |g| {
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * plane;
                            let scale = gd[ch] * inv_std[ch];
                            for k in base..base + plane {
                                g[k] += if *batch_stats {
                                    scale * (dyd[k] - sum_dy[ch] / n - xhat[k] * sum_dy_xhat[ch] / n)
                                } else {
                                    scale * dyd[k]
                                };
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |g| {
                    for ((gv, &d), &m) in g.iter_mut().zip(dyd).zip(mask) {
                        *gv += d * m;
                    }
                });
            }
            &Op::MeanTimeFreq(x) => {
                let (_, _, t, f) = self.value(x).dims4()?;
                let plane = t * f;
                let scale = F::of(1.0 / plane as f64);
                self.accumulate(grads, x, |g| {
                    for (chunk, &d) in g.chunks_mut(plane).zip(dyd) {
                        for gv in chunk {
                            *gv += d * scale;
                        }
                    }
                });
            }
            &Op::TimeSlice { x, t } => {
                let (_, _, tt, _) = self.value(x).dims4()?;
                self.accumulate(grads, x, |g| {
                    for (bc, &d) in dyd.iter().enumerate() {
                        g[bc * tt + t] += d;
                    }
                });
            }
            &Op::MatMul(a, b) => {
                let (n, k) = self.value(a).dims2()?;
                let (_, m) = self.value(b).dims2()?;
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |g| {
                    for r in 0..n {
                        for p in 0..k {
                            let brow = &bd[p * m..(p + 1) * m];
                            let drow = &dyd[r * m..(r + 1) * m];
                            g[r * k + p] += brow.iter().zip(drow).map(|(&x, &y)| x * y).sum();
                        }
                    }
                });
                self.accumulate(grads, b, |g| {
                    for r in 0..n {
                        let drow = &dyd[r * m..(r + 1) * m];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            for (gv, &d) in g[p * m..(p + 1) * m].iter_mut().zip(drow) {
                                *gv += av * d;
                            }
                        }
                    }
                });
            }
            &Op::AddBias { x, bias } => {
                let (_, cols) = y.dims2()?;
                self.accumulate(grads, x, |g| add_to(g, dyd));
                self.accumulate(grads, bias, |g| {
                    for row in dyd.chunks(cols) {
                        add_to(g, row);
                    }
                });
            }
            &Op::Softmax(x) => {
                let (_, cols) = y.dims2()?;
                let yd = y.data();
                self.accumulate(grads, x, |g| {
                    for ((grow, prow), drow) in g.chunks_mut(cols).zip(yd.chunks(cols)).zip(dyd.chunks(cols)) {
                        let dot: F = prow.iter().zip(drow).map(|(&p, &d)| p * d).sum();
                        for ((gv, &p), &d) in grow.iter_mut().zip(prow).zip(drow) {
                            *gv += p * (d - dot);
                        }
                    }
                });
            }
            Op::Bce {
                probs,
                targets,
                floor,
            } => {
                let pd = self.value(*probs).data();
                let scale = dyd[0] / F::of(targets.len() as f64);
                self.accumulate(grads, *probs, |g| {
                    for (r, &t) in targets.iter().enumerate() {
                        let p = pd[r * 2 + t];
                        if p > *floor {
                            g[r * 2 + t] -= scale / p;
                        }
                    }
                });
            }
            &Op::Mean(x) => {
                let len = self.value(x).len();
                let d = dyd[0] / F::of(len as f64);
                self.accumulate(grads, x, |g| g.iter_mut().for_each(|gv| *gv += d));
            }
            Op::WeightedSum { x, weights } => {
                let d = dyd[0];
                self.accumulate(grads, *x, |g| {
                    for (gv, &w) in g.iter_mut().zip(weights) {
                        *gv += d * w;
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_to<F: Real>(g: &mut [F], d: &[F]) {
    for (gv, &dv) in g.iter_mut().zip(d) {
        *gv += dv;
    }
}
