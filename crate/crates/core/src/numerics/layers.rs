use rand::Rng;

use super::{NumericsError, ParamSlot, Result, Scalar, Tensor};

/// Token embedding table `[vocab x dim]`.
#[derive(Debug, Clone)]
pub struct Embedding<T = f32> {
    pub table: ParamSlot<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(table: ParamSlot<T>) -> Self {
        Embedding { table }
    }

    pub fn vocab(&self) -> usize {
        self.table.value.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.value.cols()
    }

    /// Looks up one row per id. Rows flagged in `zero_rows` are emitted as
    /// zeros and receive no gradient.
    pub fn forward(&self, ids: &[u32], zero_rows: Option<&[bool]>) -> Result<Tensor<T>> {
        let (v, d) = (self.vocab(), self.dim());
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= v {
                return Err(NumericsError::Index { index: id, rows: v });
            }
            if zero_rows.is_some_and(|z| z[i]) {
                continue;
            }
            out.row_mut(i).copy_from_slice(self.table.value.row(id));
        }
        Ok(out)
    }

    pub fn backward(&mut self, ids: &[u32], zero_rows: Option<&[bool]>, dout: &Tensor<T>) {
        for (i, &id) in ids.iter().enumerate() {
            if zero_rows.is_some_and(|z| z[i]) {
                continue;
            }
            let g = self.table.grad.row_mut(id as usize);
            for (a, &b) in g.iter_mut().zip(dout.row(i)) {
                *a = *a + b;
            }
        }
    }
}

/// 1-D convolution over packed sequences with zero "same" padding; the
/// padding never crosses sequence boundaries. Weights are `[kernel x cin x cout]`.
#[derive(Debug, Clone)]
pub struct Conv1d<T = f32> {
    pub weight: ParamSlot<T>,
    pub bias: ParamSlot<T>,
}

/// Unfolded input (`[rows x kernel*cin]`) kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Conv1dCache<T = f32> {
    cols: Tensor<T>,
    seq_len: usize,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(weight: ParamSlot<T>, bias: ParamSlot<T>) -> Self {
        assert_eq!(weight.shape().len(), 3);
        assert_eq!(weight.shape()[0] % 2, 1, "odd kernel");
        Conv1d { weight, bias }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn cin(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn cout(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, input: &Tensor<T>, seq_len: usize) -> Result<(Tensor<T>, Conv1dCache<T>)> {
        let (n, cin, cout, kw) = (input.rows(), self.cin(), self.cout(), self.kernel());
        if input.cols() != cin || seq_len == 0 || n % seq_len != 0 {
            return Err(NumericsError::Shape(format!(
                "conv1d input {:?} with seq_len {seq_len}, expected {cin} channels",
                input.shape()
            )));
        }
        let half = kw / 2;
        let width = kw * cin;
        let mut cols = Tensor::zeros(&[n, width]);
        let src = input.data();
        let dst = cols.data_mut();
        for r in 0..n {
            let t = r % seq_len;
            for j in 0..kw {
                let s = t + j;
                if s < half || s - half >= seq_len {
                    continue;
                }
                let from = r + j - half;
                dst[r * width + j * cin..r * width + (j + 1) * cin].copy_from_slice(&src[from * cin..(from + 1) * cin]);
            }
        }
        let mut out = Tensor::zeros(&[n, cout]);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(self.bias.value.data());
        }
        T::gemm(
            n,
            width,
            cout,
            T::one(),
            cols.data(),
            false,
            self.weight.value.data(),
            false,
            T::one(),
            out.data_mut(),
        );
        Ok((out, Conv1dCache { cols, seq_len }))
    }

    /// Accumulates weight and bias gradients; returns the input gradient when
    /// `input_grad` is set.
    pub fn backward(&mut self, cache: &Conv1dCache<T>, dout: &Tensor<T>, input_grad: bool) -> Option<Tensor<T>> {
        let (n, cin, cout, kw) = (dout.rows(), self.cin(), self.cout(), self.kernel());
        let width = kw * cin;
        T::gemm(
            width,
            n,
            cout,
            T::one(),
            cache.cols.data(),
            true,
            dout.data(),
            false,
            T::one(),
            self.weight.grad.data_mut(),
        );
        let bg = self.bias.grad.data_mut();
        for r in 0..n {
            for (a, &b) in bg.iter_mut().zip(dout.row(r)) {
                *a = *a + b;
            }
        }
        if !input_grad {
            return None;
        }
        let mut dcols = Tensor::zeros(&[n, width]);
        T::gemm(
            n,
            cout,
            width,
            T::one(),
            dout.data(),
            false,
            self.weight.value.data(),
            true,
            T::zero(),
            dcols.data_mut(),
        );
        let half = kw / 2;
        let seq_len = cache.seq_len;
        let mut dinput = Tensor::zeros(&[n, cin]);
        let dst = dinput.data_mut();
        let src = dcols.data();
        for r in 0..n {
            let t = r % seq_len;
            for j in 0..kw {
                let s = t + j;
                if s < half || s - half >= seq_len {
                    continue;
                }
                let to = r + j - half;
                let block = &src[r * width + j * cin..r * width + (j + 1) * cin];
                for (a, &b) in dst[to * cin..(to + 1) * cin].iter_mut().zip(block) {
                    *a = *a + b;
                }
            }
        }
        Some(dinput)
    }
}

/// Per-row layer normalization over channels followed by an affine map.
#[derive(Debug, Clone)]
pub struct LayerNorm<T = f32> {
    pub gain: ParamSlot<T>,
    pub shift: ParamSlot<T>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T = f32> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub const EPS: f64 = 1e-5;

    pub fn new(name: &str, channels: usize) -> Self {
        let mut gain = ParamSlot::zeros(format!("{name}.gain"), &[channels], false);
        gain.value.fill(T::one());
        LayerNorm { gain, shift: ParamSlot::zeros(format!("{name}.shift"), &[channels], false), eps: Self::EPS }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerNormCache<T>)> {
        let c = self.gain.value.len();
        if x.cols() != c {
            return Err(NumericsError::Shape(format!("layernorm over {c} channels got {:?}", x.shape())));
        }
        let n = x.rows();
        let cf = T::lit(c as f64);
        let eps = T::lit(self.eps);
        let mut xhat = Tensor::zeros(&[n, c]);
        let mut out = Tensor::zeros(&[n, c]);
        let mut inv_std = Vec::with_capacity(n);
        let (g, b) = (self.gain.value.data(), self.shift.value.data());
        for r in 0..n {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let o = out.row_mut(r);
            for i in 0..c {
                o[i] = xh[i] * g[i] + b[i];
            }
        }
        Ok((out, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dout: &Tensor<T>) -> Tensor<T> {
        let c = self.gain.value.len();
        let n = dout.rows();
        let cf = T::lit(c as f64);
        let g = self.gain.value.data().to_vec();
        let mut dx = Tensor::zeros(&[n, c]);
        let mut dxhat = vec![T::zero(); c];
        for r in 0..n {
            let dy = dout.row(r);
            let xh = cache.xhat.row(r);
            {
                let gg = self.gain.grad.data_mut();
                for i in 0..c {
                    gg[i] = gg[i] + dy[i] * xh[i];
                }
            }
            {
                let sg = self.shift.grad.data_mut();
                for i in 0..c {
                    sg[i] = sg[i] + dy[i];
                }
            }
            let mut sum = T::zero();
            let mut dot = T::zero();
            for i in 0..c {
                dxhat[i] = dy[i] * g[i];
                sum = sum + dxhat[i];
                dot = dot + dxhat[i] * xh[i];
            }
            let scale = cache.inv_std[r] / cf;
            let d = dx.row_mut(r);
            for i in 0..c {
                d[i] = scale * (cf * dxhat[i] - sum - xh[i] * dot);
            }
        }
        dx
    }
}

/// Affine map `y = x W + b` with `W: [in x out]`.
#[derive(Debug, Clone)]
pub struct Linear<T = f32> {
    pub weight: ParamSlot<T>,
    pub bias: ParamSlot<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: ParamSlot<T>, bias: ParamSlot<T>) -> Self {
        assert_eq!(weight.shape().len(), 2);
        Linear { weight, bias }
    }

    pub fn din(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dout(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, din, dout) = (x.rows(), self.din(), self.dout());
        if x.cols() != din {
            return Err(NumericsError::Shape(format!("linear {din}->{dout} got input {:?}", x.shape())));
        }
        let mut out = Tensor::zeros(&[n, dout]);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(self.bias.value.data());
        }
        T::gemm(n, din, dout, T::one(), x.data(), false, self.weight.value.data(), false, T::one(), out.data_mut());
        Ok(out)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, input_grad: bool) -> Option<Tensor<T>> {
        let (n, din, dout) = (x.rows(), self.din(), self.dout());
        T::gemm(din, n, dout, T::one(), x.data(), true, dy.data(), false, T::one(), self.weight.grad.data_mut());
        let bg = self.bias.grad.data_mut();
        for r in 0..n {
            for (a, &b) in bg.iter_mut().zip(dy.row(r)) {
                *a = *a + b;
            }
        }
        if !input_grad {
            return None;
        }
        let mut dx = Tensor::zeros(&[n, din]);
        T::gemm(n, dout, din, T::one(), dy.data(), false, self.weight.value.data(), true, T::zero(), dx.data_mut());
        Some(dx)
    }
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

/// `y` is the forward output; the subgradient at 0 is taken as 0.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Inverted dropout. Returns the per-element multiplier (0 or `1/(1-p)`) in
/// train mode, `None` in eval mode where the op is the identity.
pub fn dropout_forward<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    p: f64,
    train: bool,
    rng: &mut R,
) -> (Tensor<T>, Option<Vec<T>>) {
    if !train || p <= 0.0 {
        return (x.clone(), None);
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len()).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
    let mut y = x.clone();
    for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
        *v = *v * m;
    }
    (y, Some(mask))
}

pub fn dropout_backward<T: Scalar>(dy: &Tensor<T>, mask: Option<&[T]>) -> Tensor<T> {
    let mut dx = dy.clone();
    if let Some(mask) = mask {
        for (v, &m) in dx.data_mut().iter_mut().zip(mask) {
            *v = *v * m;
        }
    }
    dx
}

/// Mean over the rows of `x` (`[L x C]`) flagged valid.
pub fn mean_pool_forward<T: Scalar>(x: &Tensor<T>, valid: &[bool]) -> Result<Vec<T>> {
    assert_eq!(x.rows(), valid.len());
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(NumericsError::EmptyPool);
    }
    let mut out = vec![T::zero(); x.cols()];
    for (r, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
        for (a, &b) in out.iter_mut().zip(x.row(r)) {
            *a = *a + b;
        }
    }
    let inv = T::one() / T::lit(count as f64);
    out.iter_mut().for_each(|v| *v = *v * inv);
    Ok(out)
}

pub fn mean_pool_backward<T: Scalar>(dy: &[T], valid: &[bool]) -> Tensor<T> {
    let count = valid.iter().filter(|&&v| v).count().max(1);
    let inv = T::one() / T::lit(count as f64);
    let mut dx = Tensor::zeros(&[valid.len(), dy.len()]);
    for (r, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
        for (a, &b) in dx.row_mut(r).iter_mut().zip(dy) {
            *a = b * inv;
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct XentOutput<T = f32> {
    /// Mean cross-entropy over the supplied rows.
    pub loss: f64,
    /// Gradient of `loss` with respect to the logits.
    pub dlogits: Tensor<T>,
    /// Whether the row argmax equals its target.
    pub correct: Vec<bool>,
}

/// Softmax cross-entropy averaged over the rows of `logits` (one row per
/// scored position). Consumes the logits and reuses their buffer for the
/// gradient.
pub fn softmax_xent<T: Scalar>(logits: Tensor<T>, targets: &[u32]) -> Result<XentOutput<T>> {
    let n = logits.rows();
    if targets.len() != n {
        return Err(NumericsError::Shape(format!("{} target ids for {n} logit rows", targets.len())));
    }
    let v = logits.cols();
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(NumericsError::Index { index: t as usize, rows: v });
    }
    let mut grad = logits;
    let inv_n = if n > 0 { T::one() / T::lit(n as f64) } else { T::zero() };
    let mut total = 0.0f64;
    let mut correct = Vec::with_capacity(n);
    for (r, &t) in targets.iter().enumerate() {
        let row = grad.row_mut(r);
        let t = t as usize;
        let (mut arg, mut max) = (0usize, row[0]);
        for (i, &x) in row.iter().enumerate().skip(1) {
            if x > max {
                max = x;
                arg = i;
            }
        }
        correct.push(arg == t);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum = sum + *x;
        }
        let p_t = row[t] / sum;
        total -= p_t.to_f64().unwrap().ln();
        let inv_sum = T::one() / sum;
        for x in row.iter_mut() {
            *x = *x * inv_sum * inv_n;
        }
        row[t] = row[t] - inv_n;
    }
    Ok(XentOutput { loss: if n > 0 { total / n as f64 } else { 0.0 }, dlogits: grad, correct })
}

pub fn gather_rows<T: Scalar>(x: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let c = x.cols();
    let mut out = Tensor::zeros(&[rows.len(), c]);
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(x.row(r));
    }
    out
}

/// Adjoint of [`gather_rows`].
pub fn scatter_rows<T: Scalar>(dy: &Tensor<T>, rows: &[usize], total_rows: usize) -> Tensor<T> {
    let c = dy.cols();
    let mut out = Tensor::zeros(&[total_rows, c]);
    for (i, &r) in rows.iter().enumerate() {
        for (a, &b) in out.row_mut(r).iter_mut().zip(dy.row(i)) {
            *a = *a + b;
        }
    }
    out
}
