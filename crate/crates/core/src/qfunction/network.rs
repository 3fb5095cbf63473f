use rand::distributions::{Distribution, Uniform};

use super::{ConvGeom, DenseGeom, NetArch, NetError, Plan, Real};
use crate::rng::stream;

/// Network parameters stored as one flat array in layer declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct QParams<T> {
    arch: NetArch,
    plan: Plan,
    data: Vec<T>,
}

/// One training sample: observation, taken action and regression target.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a, T> {
    pub input: &'a [T],
    pub action: usize,
    pub target: T,
}

/// Scratch buffers for forward and backward passes.
#[derive(Clone, Debug)]
pub struct Workspace<T> {
    /// Unrolled receptive fields of each conv layer, one row per output
    /// position, laid out like a filter.
    patches: Vec<Vec<T>>,
    d_patches: Vec<Vec<T>>,
    convs: Vec<Vec<T>>,
    fc: Vec<T>,
    q: Vec<T>,
    d_convs: Vec<Vec<T>>,
    d_fc: Vec<T>,
    dq: Vec<T>,
}

impl<T: Real> Workspace<T> {
    pub fn new(plan: &Plan) -> Self {
        let patch_len = |c: &ConvGeom| c.out_size * c.out_size * c.in_channels * c.kernel * c.kernel;
        Self {
            patches: plan.convs.iter().map(|c| vec![T::zero(); patch_len(c)]).collect(),
            d_patches: plan.convs.iter().map(|c| vec![T::zero(); patch_len(c)]).collect(),
            convs: plan.convs.iter().map(|c| vec![T::zero(); c.out_len()]).collect(),
            fc: vec![T::zero(); plan.fc.outputs],
            q: vec![T::zero(); plan.head.outputs],
            d_convs: plan.convs.iter().map(|c| vec![T::zero(); c.out_len()]).collect(),
            d_fc: vec![T::zero(); plan.fc.outputs],
            dq: vec![T::zero(); plan.head.outputs],
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[inline]
fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Dot product with eight independent accumulators.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += a·x`
#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y = *y + a * *x;
    }
}

fn im2col<T: Real>(g: &ConvGeom, input: &[T], patches: &mut [T]) {
    let (k, s, n_in, n_out) = (g.kernel, g.stride, g.in_size, g.out_size);
    let per_filter = g.in_channels * k * k;
    for oy in 0..n_out {
        for ox in 0..n_out {
            let patch = &mut patches[(oy * n_out + ox) * per_filter..][..per_filter];
            for c in 0..g.in_channels {
                for ky in 0..k {
                    let start = c * n_in * n_in + (oy * s + ky) * n_in + ox * s;
                    patch[(c * k + ky) * k..][..k].copy_from_slice(&input[start..start + k]);
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: adds every patch entry back onto its input cell.
fn col2im_add<T: Real>(g: &ConvGeom, patches: &[T], d_input: &mut [T]) {
    let (k, s, n_in, n_out) = (g.kernel, g.stride, g.in_size, g.out_size);
    let per_filter = g.in_channels * k * k;
    for oy in 0..n_out {
        for ox in 0..n_out {
            let patch = &patches[(oy * n_out + ox) * per_filter..][..per_filter];
            for c in 0..g.in_channels {
                for ky in 0..k {
                    let start = c * n_in * n_in + (oy * s + ky) * n_in + ox * s;
                    axpy(&mut d_input[start..start + k], T::one(), &patch[(c * k + ky) * k..][..k]);
                }
            }
        }
    }
}

fn conv_forward<T: Real>(g: &ConvGeom, params: &[T], input: &[T], patches: &mut [T], out: &mut [T]) {
    im2col(g, input, patches);
    let per_filter = g.in_channels * g.kernel * g.kernel;
    let positions = g.out_size * g.out_size;
    for o in 0..g.out_channels {
        let w = &params[g.w_off + o * per_filter..][..per_filter];
        let bias = params[g.b_off + o];
        for p in 0..positions {
            out[o * positions + p] = relu(bias + dot(w, &patches[p * per_filter..][..per_filter]));
        }
    }
}

/// Accumulates parameter gradients of one conv layer given the gradient
/// w.r.t. its pre-activations, and optionally the gradient w.r.t. its input.
fn conv_backward<T: Real>(
    g: &ConvGeom,
    params: &[T],
    patches: &[T],
    d_pre: &[T],
    grads: &mut [T],
    d_input: Option<(&mut [T], &mut [T])>,
) {
    let per_filter = g.in_channels * g.kernel * g.kernel;
    let positions = g.out_size * g.out_size;
    let mut d_input = d_input.map(|(di, dp)| {
        dp.iter_mut().for_each(|v| *v = T::zero());
        (di, dp)
    });
    for o in 0..g.out_channels {
        let w_off = g.w_off + o * per_filter;
        for p in 0..positions {
            let d = d_pre[o * positions + p];
            if d == T::zero() {
                continue;
            }
            grads[g.b_off + o] = grads[g.b_off + o] + d;
            axpy(&mut grads[w_off..w_off + per_filter], d, &patches[p * per_filter..][..per_filter]);
            if let Some((_, dp)) = d_input.as_mut() {
                axpy(&mut dp[p * per_filter..][..per_filter], d, &params[w_off..w_off + per_filter]);
            }
        }
    }
    if let Some((di, dp)) = d_input {
        col2im_add(g, dp, di);
    }
}

fn dense_forward<T: Real>(g: &DenseGeom, params: &[T], input: &[T], out: &mut [T], activate: bool) {
    for (o, slot) in out.iter_mut().enumerate().take(g.outputs) {
        let row = &params[g.w_off + o * g.inputs..g.w_off + (o + 1) * g.inputs];
        let acc = params[g.b_off + o] + dot(row, input);
        *slot = if activate { relu(acc) } else { acc };
    }
}

fn dense_backward<T: Real>(
    g: &DenseGeom,
    params: &[T],
    input: &[T],
    d_pre: &[T],
    grads: &mut [T],
    mut d_input: Option<&mut [T]>,
) {
    for (o, &d) in d_pre.iter().enumerate().take(g.outputs) {
        if d == T::zero() {
            continue;
        }
        grads[g.b_off + o] = grads[g.b_off + o] + d;
        let w_start = g.w_off + o * g.inputs;
        axpy(&mut grads[w_start..w_start + g.inputs], d, input);
        if let Some(di) = d_input.as_deref_mut() {
            axpy(di, d, &params[w_start..w_start + g.inputs]);
        }
    }
}

/// Zeroes gradient entries whose forward activation was clipped by ReLU.
fn relu_mask<T: Real>(grad: &mut [T], activation: &[T]) {
    for (g, a) in grad.iter_mut().zip(activation) {
        if *a <= T::zero() {
            *g = T::zero();
        }
    }
}

impl<T: Real> QParams<T> {
    /// He-uniform weights, zero biases.
    pub fn init(arch: &NetArch, seed: u64) -> Result<Self, NetError> {
        let plan = arch.plan()?;
        let mut data = vec![T::zero(); plan.param_count];
        let mut rng = stream(seed);
        let mut fill = |off: usize, len: usize, fan_in: usize| {
            let limit = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            for w in &mut data[off..off + len] {
                *w = T::from_f64(dist.sample(&mut rng));
            }
        };
        for c in &plan.convs {
            fill(c.w_off, c.w_len(), c.in_channels * c.kernel * c.kernel);
        }
        for d in [&plan.fc, &plan.head] {
            fill(d.w_off, d.inputs * d.outputs, d.inputs);
        }
        Ok(Self { arch: arch.clone(), plan, data })
    }

    pub fn zeros(arch: &NetArch) -> Result<Self, NetError> {
        let plan = arch.plan()?;
        let data = vec![T::zero(); plan.param_count];
        Ok(Self { arch: arch.clone(), plan, data })
    }

    pub fn from_data(arch: &NetArch, data: Vec<T>) -> Result<Self, NetError> {
        let plan = arch.plan()?;
        if data.len() != plan.param_count {
            return Err(NetError::Shape { expected: plan.param_count, got: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NetError::Numeric("parameters"));
        }
        Ok(Self { arch: arch.clone(), plan, data })
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn workspace(&self) -> Workspace<T> {
        Workspace::new(&self.plan)
    }

    pub fn cast<U: Real>(&self) -> QParams<U> {
        QParams {
            arch: self.arch.clone(),
            plan: self.plan.clone(),
            data: self.data.iter().map(|v| U::from_f64(Real::to_f64(*v))).collect(),
        }
    }

    fn check_input(&self, input: &[T]) -> Result<(), NetError> {
        let expected = self.arch.input_len();
        if input.len() != expected {
            return Err(NetError::Shape { expected, got: input.len() });
        }
        Ok(())
    }

    /// Forward pass into `ws`; returns the action values.
    pub fn forward_with<'w>(&self, input: &[T], ws: &'w mut Workspace<T>) -> Result<&'w [T], NetError> {
        self.check_input(input)?;
        self.forward_unchecked(input, ws);
        Ok(&ws.q)
    }

    fn forward_unchecked(&self, input: &[T], ws: &mut Workspace<T>) {
        for (l, g) in self.plan.convs.iter().enumerate() {
            let (done, rest) = ws.convs.split_at_mut(l);
            let src = if l == 0 { input } else { &done[l - 1] };
            conv_forward(g, &self.data, src, &mut ws.patches[l], &mut rest[0]);
        }
        let flat = ws.convs.last().map_or(input, |v| v.as_slice());
        dense_forward(&self.plan.fc, &self.data, flat, &mut ws.fc, true);
        dense_forward(&self.plan.head, &self.data, &ws.fc, &mut ws.q, false);
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>, NetError> {
        let mut ws = self.workspace();
        Ok(self.forward_with(input, &mut ws)?.to_vec())
    }

    pub fn forward_batch(&self, inputs: &[&[T]]) -> Result<Vec<Vec<T>>, NetError> {
        let mut ws = self.workspace();
        inputs.iter().map(|x| self.forward_with(x, &mut ws).map(<[T]>::to_vec)).collect()
    }

    /// Post-ReLU outputs of every convolution layer.
    pub fn conv_activations(&self, input: &[T]) -> Result<Vec<Vec<T>>, NetError> {
        let mut ws = self.workspace();
        self.forward_with(input, &mut ws)?;
        Ok(ws.convs)
    }

    fn backward_unchecked(&self, input: &[T], ws: &mut Workspace<T>, grads: &mut [T]) {
        let plan = &self.plan;
        ws.d_fc.iter_mut().for_each(|v| *v = T::zero());
        dense_backward(&plan.head, &self.data, &ws.fc, &ws.dq, grads, Some(&mut ws.d_fc));
        relu_mask(&mut ws.d_fc, &ws.fc);

        let n = plan.convs.len();
        if n == 0 {
            dense_backward(&plan.fc, &self.data, input, &ws.d_fc, grads, None);
            return;
        }
        let last = &mut ws.d_convs[n - 1];
        last.iter_mut().for_each(|v| *v = T::zero());
        dense_backward(&plan.fc, &self.data, &ws.convs[n - 1], &ws.d_fc, grads, Some(last));
        relu_mask(last, &ws.convs[n - 1]);

        for l in (0..n).rev() {
            let g = &plan.convs[l];
            if l == 0 {
                conv_backward(g, &self.data, &ws.patches[0], &ws.d_convs[0], grads, None);
            } else {
                let (lower, upper) = ws.d_convs.split_at_mut(l);
                let d_in = &mut lower[l - 1];
                d_in.iter_mut().for_each(|v| *v = T::zero());
                let scratch = Some((d_in.as_mut_slice(), ws.d_patches[l].as_mut_slice()));
                conv_backward(g, &self.data, &ws.patches[l], &upper[0], grads, scratch);
                relu_mask(d_in, &ws.convs[l - 1]);
            }
        }
    }

    /// Mean squared TD loss `(1/b) Σ (Q(o, a) - y)²` and its exact gradient,
    /// written into `grads` (overwritten).
    pub fn loss_and_grad(
        &self,
        batch: &[Sample<'_, T>],
        grads: &mut [T],
        ws: &mut Workspace<T>,
    ) -> Result<T, NetError> {
        if batch.is_empty() {
            return Err(NetError::EmptyBatch);
        }
        if grads.len() != self.data.len() {
            return Err(NetError::Shape { expected: self.data.len(), got: grads.len() });
        }
        for s in batch {
            self.check_input(s.input)?;
            if s.action >= self.plan.head.outputs {
                return Err(NetError::Shape { expected: self.plan.head.outputs, got: s.action });
            }
            if !s.target.is_finite() {
                return Err(NetError::Numeric("targets"));
            }
            if s.input.iter().any(|v| !v.is_finite()) {
                return Err(NetError::Numeric("inputs"));
            }
        }
        grads.iter_mut().for_each(|g| *g = T::zero());
        let scale = T::from_f64(2.0 / batch.len() as f64);
        let mut loss = T::zero();
        for s in batch {
            self.forward_unchecked(s.input, ws);
            let diff = ws.q[s.action] - s.target;
            loss = loss + diff * diff;
            ws.dq.iter_mut().for_each(|v| *v = T::zero());
            ws.dq[s.action] = scale * diff;
            self.backward_unchecked(s.input, ws, grads);
        }
        let loss = loss / T::from_f64(batch.len() as f64);
        if !loss.is_finite() {
            return Err(NetError::Numeric("loss"));
        }
        Ok(loss)
    }

    /// Loss only.
    pub fn loss(&self, batch: &[Sample<'_, T>]) -> Result<T, NetError> {
        if batch.is_empty() {
            return Err(NetError::EmptyBatch);
        }
        let mut ws = self.workspace();
        let mut total = T::zero();
        for s in batch {
            let q = self.forward_with(s.input, &mut ws)?;
            let diff = q[s.action] - s.target;
            total = total + diff * diff;
        }
        Ok(total / T::from_f64(batch.len() as f64))
    }

    /// ReLU on/off pattern of every hidden unit for `input`.
    pub fn activation_pattern(&self, input: &[T]) -> Result<Vec<bool>, NetError> {
        let mut ws = self.workspace();
        self.forward_with(input, &mut ws)?;
        Ok(ws.convs.iter().flatten().chain(ws.fc.iter()).map(|v| *v > T::zero()).collect())
    }
}
