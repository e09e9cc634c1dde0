//! Dense feed-forward networks with hand-written reverse mode.
//!
//! Parameters live in one flat buffer. Layer `l` occupies a contiguous block
//! holding its `(d_out × d_in)` row-major weight matrix followed by its bias
//! vector, so an [`MlpGrad`] is just another flat buffer with the same layout
//! and inner products between gradients are plain dot products.
//!
//! Batched inputs and outputs are flat row-major `(batch × dim)` buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::matrix::{gemm, Strides};
use crate::numeric::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    /// relu'(0) is taken as 0.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    hidden_activation: Activation,
    output_activation: Activation,
    data: Vec<f64>,
}

/// Gradient with the same flat layout as the [`MlpParams`] it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpGrad {
    data: Vec<f64>,
}

/// Post-activation values of every layer for a batch; entry 0 is the input.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    batch: usize,
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }

    pub fn output(&self) -> &[f64] {
        self.activations.last().unwrap()
    }

    pub fn into_output(mut self) -> Vec<f64> {
        self.activations.pop().unwrap()
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl MlpParams {
    pub fn zeros(
        layer_dims: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidInput("an MLP needs at least one layer".into()));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidInput(format!("zero-width layer in {layer_dims:?}")));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            hidden_activation,
            output_activation,
            data: vec![0.0; param_count(layer_dims)],
        })
    }

    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn init_uniform(
        layer_dims: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut p = Self::zeros(layer_dims, hidden_activation, output_activation)?;
        for l in 0..p.num_layers() {
            let bound = 1.0 / (p.layer_dims[l] as f64).sqrt();
            let (w, b) = p.layer_mut(l);
            w.iter_mut().for_each(|v| *v = rng.uniform_in(-bound, bound));
            b.iter_mut().for_each(|v| *v = rng.uniform_in(-bound, bound));
        }
        Ok(p)
    }

    /// Weights uniform in `±bound`, biases zero.
    pub fn init_uniform_bounded(
        layer_dims: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        bound: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut p = Self::zeros(layer_dims, hidden_activation, output_activation)?;
        for l in 0..p.num_layers() {
            let (w, _) = p.layer_mut(l);
            w.iter_mut().for_each(|v| *v = rng.uniform_in(-bound, bound));
        }
        Ok(p)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Offset of layer `l`'s block and its `(d_in, d_out)`.
    fn layer_offset(&self, l: usize) -> (usize, usize, usize) {
        let off = param_count(&self.layer_dims[..=l]);
        (off, self.layer_dims[l], self.layer_dims[l + 1])
    }

    /// `(weights, bias)` of layer `l`; weights are `(d_out × d_in)` row-major.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (off, din, dout) = self.layer_offset(l);
        let block = &self.data[off..off + dout * din + dout];
        block.split_at(dout * din)
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (off, din, dout) = self.layer_offset(l);
        let block = &mut self.data[off..off + dout * din + dout];
        block.split_at_mut(dout * din)
    }

    /// Index range of layer `l`'s weight matrix inside the flat buffer.
    pub fn weight_range(&self, l: usize) -> std::ops::Range<usize> {
        let (off, din, dout) = self.layer_offset(l);
        off..off + dout * din
    }

    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layer_dims[l + 1], self.layer_dims[l])
    }

    fn activation_for(&self, l: usize) -> Activation {
        if l + 1 == self.num_layers() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    /// Forward pass for a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let cache = self.forward_batch(input, 1)?;
        Ok((cache.output().to_vec(), cache))
    }

    /// Output only; skips keeping the activation trace.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(input, 1)?.into_output())
    }

    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<ForwardCache> {
        let din = self.input_dim();
        if inputs.len() != batch * din {
            return Err(Error::Dimension(format!(
                "forward input length {} != batch {batch} × input dim {din}",
                inputs.len()
            )));
        }
        let mut activations = Vec::with_capacity(self.num_layers() + 1);
        activations.push(inputs.to_vec());
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let (dout, din) = self.layer_shape(l);
            let act = self.activation_for(l);
            let x = activations.last().unwrap();
            let mut y = Vec::with_capacity(batch * dout);
            for _ in 0..batch {
                y.extend_from_slice(b);
            }
            // y += x · Wᵀ
            gemm(batch, din, dout, x, Strides(din, 1), w, Strides(1, din), 1.0, &mut y);
            if act != Activation::Identity {
                y.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            activations.push(y);
        }
        Ok(ForwardCache { batch, activations })
    }

    fn check_backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<()> {
        if cache.activations.len() != self.num_layers() + 1
            || cache.activations[0].len() != cache.batch * self.input_dim()
        {
            return Err(Error::Dimension("forward cache does not belong to these parameters".into()));
        }
        if output_grad.len() != cache.batch * self.output_dim() {
            return Err(Error::Dimension(format!(
                "output grad length {} != batch {} × output dim {}",
                output_grad.len(),
                cache.batch,
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Reverse pass. Returns the parameter gradient summed over the batch and
    /// the per-sample input gradients.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<(MlpGrad, Vec<f64>)> {
        self.check_backward(cache, output_grad)?;
        let mut grad = MlpGrad::zeros_like(self);
        let input_grad = self.backward_into(cache, output_grad, 0..cache.batch, Some(&mut grad.data));
        Ok((grad, input_grad))
    }

    /// Per-sample input gradients only; skips the parameter gradient.
    pub fn input_grad(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<Vec<f64>> {
        self.check_backward(cache, output_grad)?;
        Ok(self.backward_into(cache, output_grad, 0..cache.batch, None))
    }

    /// One gradient per batch element, each equal to `backward` on that
    /// sample alone.
    pub fn per_sample_backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<Vec<MlpGrad>> {
        self.check_backward(cache, output_grad)?;
        Ok((0..cache.batch)
            .map(|s| {
                let mut g = MlpGrad::zeros_like(self);
                self.backward_into(cache, output_grad, s..s + 1, Some(&mut g.data));
                g
            })
            .collect())
    }

    fn backward_into(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
        samples: std::ops::Range<usize>,
        mut grad: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let n_layers = self.num_layers();
        let dlast = self.output_dim();
        let out_act = self.activation_for(n_layers - 1);
        let y_last = &cache.activations[n_layers];
        let count = samples.len();
        let mut delta: Vec<f64> = Vec::with_capacity(count * dlast);
        for s in samples.clone() {
            for o in 0..dlast {
                let i = s * dlast + o;
                delta.push(output_grad[i] * out_act.derivative_from_output(y_last[i]));
            }
        }
        for l in (0..n_layers).rev() {
            let (dout, din) = self.layer_shape(l);
            let (off, _, _) = self.layer_offset(l);
            let (w, _) = self.layer(l);
            let x = &cache.activations[l];
            let xs = &x[samples.start * din..samples.end * din];
            if let Some(grad) = grad.as_deref_mut() {
                let (gw, gb) = grad[off..off + dout * din + dout].split_at_mut(dout * din);
                // gW += Δᵀ · X
                gemm(dout, count, din, &delta, Strides(1, dout), xs, Strides(din, 1), 1.0, gw);
                for ds in delta.chunks_exact(dout) {
                    for (g, d) in gb.iter_mut().zip(ds) {
                        *g += d;
                    }
                }
            }
            // Δ_prev = Δ · W
            let mut prev = vec![0.0; count * din];
            gemm(count, dout, din, &delta, Strides(dout, 1), w, Strides(din, 1), 0.0, &mut prev);
            if l > 0 {
                let act = self.activation_for(l - 1);
                for (k, s) in samples.clone().enumerate() {
                    let ys = &x[s * din..(s + 1) * din];
                    for i in 0..din {
                        prev[k * din + i] *= act.derivative_from_output(ys[i]);
                    }
                }
            }
            delta = prev;
        }
        delta
    }

    /// Polyak averaging toward `source`: `self ← (1−τ)·self + τ·source`.
    pub fn soft_update_from(&mut self, source: &MlpParams, tau: f64) {
        assert_eq!(self.data.len(), source.data.len(), "soft update shape");
        for (t, s) in self.data.iter_mut().zip(&source.data) {
            *t = (1.0 - tau) * *t + tau * s;
        }
    }
}

/// Forward the batch, ask `loss_grad` for `∂loss_i/∂output_i` of every
/// sample, and return each sample's parameter gradient.
pub fn per_sample_grads(
    params: &MlpParams,
    inputs: &[f64],
    batch: usize,
    mut loss_grad: impl FnMut(usize, &[f64]) -> Vec<f64>,
) -> Result<Vec<MlpGrad>> {
    if batch == 0 {
        return Err(Error::InvalidInput("per-sample gradients of an empty batch".into()));
    }
    let cache = params.forward_batch(inputs, batch)?;
    let dout = params.output_dim();
    let mut out_grad = Vec::with_capacity(batch * dout);
    for i in 0..batch {
        let g = loss_grad(i, &cache.output()[i * dout..(i + 1) * dout]);
        if g.len() != dout {
            return Err(Error::Dimension(format!("loss grad length {} != output dim {dout}", g.len())));
        }
        out_grad.extend(g);
    }
    params.per_sample_backward(&cache, &out_grad)
}

impl MlpGrad {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            data: vec![0.0; params.num_params()],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s · other`
    pub fn add_scaled(&mut self, other: &MlpGrad, s: f64) {
        assert_eq!(self.data.len(), other.data.len(), "gradient shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn dot(&self, other: &MlpGrad) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matches(&self, params: &MlpParams) -> bool {
        self.data.len() == params.num_params()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot product lengths");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain nested-loop evaluator written independently of `forward_batch`.
    fn reference_forward(p: &MlpParams, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in 0..p.num_layers() {
            let (w, b) = p.layer(l);
            let (dout, din) = p.layer_shape(l);
            let act = if l + 1 == p.num_layers() {
                p.output_activation()
            } else {
                p.hidden_activation()
            };
            let mut next = Vec::new();
            for o in 0..dout {
                let mut z = 0.0;
                for i in 0..din {
                    z += w[o * din + i] * h[i];
                }
                z += b[o];
                next.push(match act {
                    Activation::Identity => z,
                    Activation::Relu => z.max(0.0),
                    Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
                    Activation::Tanh => (z.exp() - (-z).exp()) / (z.exp() + (-z).exp()),
                });
            }
            h = next;
        }
        h
    }

    fn loss_of(p: &MlpParams, x: &[f64], weights: &[f64]) -> f64 {
        reference_forward(p, x).iter().zip(weights).map(|(y, w)| y * w).sum()
    }

    #[test]
    fn zero_net_outputs_zero() {
        let p = MlpParams::zeros(&[3, 5, 2], Activation::Relu, Activation::Identity).unwrap();
        let (y, _) = p.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn affine_one_by_one() {
        let mut p = MlpParams::zeros(&[1, 1], Activation::Identity, Activation::Identity).unwrap();
        p.as_mut_slice().copy_from_slice(&[2.0, 1.0]);
        let (y, cache) = p.forward(&[3.0]).unwrap();
        assert_eq!(y, vec![7.0]);
        let (g, gin) = p.backward(&cache, &[1.0]).unwrap();
        assert_eq!(g.as_slice(), &[3.0, 1.0]);
        assert_eq!(gin, vec![2.0]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = MlpParams::zeros(&[3, 2], Activation::Relu, Activation::Identity).unwrap();
        assert!(matches!(p.forward(&[1.0, 2.0]), Err(Error::Dimension(_))));
        let (_, cache) = p.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(p.backward(&cache, &[1.0]).is_err());
    }

    #[test]
    fn forward_matches_reference_evaluator() {
        let mut rng = Rng::new(11);
        let p = MlpParams::init_uniform(&[4, 8, 2], Activation::Tanh, Activation::Sigmoid, &mut rng).unwrap();
        for _ in 0..10 {
            let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let (y, _) = p.forward(&x).unwrap();
            let r = reference_forward(&p, &x);
            for (a, b) in y.iter().zip(&r) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_output_grad_gives_zero_grad() {
        let mut rng = Rng::new(2);
        let p = MlpParams::init_uniform(&[3, 4, 2], Activation::Relu, Activation::Tanh, &mut rng).unwrap();
        let (_, cache) = p.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (g, gin) = p.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
        assert!(gin.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(5);
        for (hidden, out) in [
            (Activation::Relu, Activation::Identity),
            (Activation::Sigmoid, Activation::Tanh),
            (Activation::Tanh, Activation::Sigmoid),
        ] {
            let p = MlpParams::init_uniform(&[3, 5, 1], hidden, out, &mut rng).unwrap();
            let x = [0.3, -0.7, 1.1];
            let (_, cache) = p.forward(&x).unwrap();
            let (g, gin) = p.backward(&cache, &[1.0]).unwrap();
            let h = 1e-5;
            for i in 0..p.num_params() {
                let mut pp = p.clone();
                pp.as_mut_slice()[i] += h;
                let mut pm = p.clone();
                pm.as_mut_slice()[i] -= h;
                let fd = (loss_of(&pp, &x, &[1.0]) - loss_of(&pm, &x, &[1.0])) / (2.0 * h);
                let a = g.as_slice()[i];
                assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-6), "param {i}: {a} vs {fd}");
            }
            for j in 0..3 {
                let mut xp = x;
                xp[j] += h;
                let mut xm = x;
                xm[j] -= h;
                let fd = (loss_of(&p, &xp, &[1.0]) - loss_of(&p, &xm, &[1.0])) / (2.0 * h);
                assert!((gin[j] - fd).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn per_sample_singleton_equals_backward() {
        let mut rng = Rng::new(8);
        let p = MlpParams::init_uniform(&[2, 3, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let x = [0.5, -0.25];
        let (_, cache) = p.forward(&x).unwrap();
        let (g, _) = p.backward(&cache, &[1.0, -2.0]).unwrap();
        let per = per_sample_grads(&p, &x, 1, |_, _| vec![1.0, -2.0]).unwrap();
        assert_eq!(per.len(), 1);
        assert_eq!(per[0], g);
        let twins = per_sample_grads(&p, &[0.5, -0.25, 0.5, -0.25], 2, |_, _| vec![1.0, -2.0]).unwrap();
        assert_eq!(twins[0], twins[1]);
        assert!(per_sample_grads(&p, &[], 0, |_, _| vec![]).is_err());
    }

    #[test]
    fn soft_update_moves_toward_source() {
        let mut a = MlpParams::zeros(&[1, 1], Activation::Identity, Activation::Identity).unwrap();
        let mut b = a.clone();
        b.as_mut_slice().copy_from_slice(&[1.0, 2.0]);
        a.soft_update_from(&b, 0.25);
        assert_eq!(a.as_slice(), &[0.25, 0.5]);
    }
}
