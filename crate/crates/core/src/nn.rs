//! Dense rectified-linear networks with hand-written reverse-mode gradients
//! and an Adam optimizer.
//!
//! Weights are stored `(fan_in, fan_out)` so a batch `X (B x in)` maps to
//! `X W + b`. All hidden layers use ReLU; the final layer is linear and its
//! interpretation (Gaussian head, Q-value, ...) belongs to the caller.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::{from_f64_vec, sigmoid, softplus, to_f64_vec, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetwork<S> {
    layers: Vec<Layer<S>>,
}

/// Activations recorded by [`DenseNetwork::forward_cached`]; `activations[l]`
/// is the input to layer `l` (post-ReLU for `l > 0`).
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    activations: Vec<Array2<S>>,
}

/// Parameter gradients with the same shapes as the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub layers: Vec<Layer<S>>,
}

impl<S: Scalar> DenseNetwork<S> {
    /// He-style uniform initialisation: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`
    /// for weights, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        Self::validate_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((w[0], w[1]), |_| S::lit(rng.gen_range(-bound..bound)));
                Layer {
                    weight,
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::validate_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer<S>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_dim("layer chaining", pair[0].weight.ncols(), pair[1].weight.nrows())?;
        }
        for l in &layers {
            check_dim("layer bias", l.weight.ncols(), l.bias.len())?;
        }
        Ok(Self { layers })
    }

    fn validate_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.ncols()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.weight.ncols()));
        sizes
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[S]) -> Result<Vec<S>> {
        check_dim("network input", self.input_dim(), input.len())?;
        let mut x = Array1::from(input.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.dot(&layer.weight) + &layer.bias;
            if i < last {
                z.mapv_inplace(relu);
            }
            x = z;
        }
        Ok(x.to_vec())
    }

    /// Batched forward pass; rows are samples.
    pub fn forward_batch(&self, input: ArrayView2<S>) -> Result<Array2<S>> {
        check_dim("network input", self.input_dim(), input.ncols())?;
        let last = self.layers.len() - 1;
        let mut x = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.dot(&layer.weight) + &layer.bias;
            if i < last {
                z.mapv_inplace(relu);
            }
            x = z;
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: ArrayView2<S>) -> Result<(Array2<S>, ForwardCache<S>)> {
        check_dim("network input", self.input_dim(), input.ncols())?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.dot(&layer.weight) + &layer.bias;
            if i < last {
                z.mapv_inplace(relu);
            }
            activations.push(x);
            x = z;
        }
        Ok((x, ForwardCache { activations }))
    }

    /// Reverse pass. `upstream` is dLoss/dOutput for the cached batch.
    /// Returns parameter gradients and dLoss/dInput.
    pub fn backward(
        &self,
        cache: &ForwardCache<S>,
        upstream: ArrayView2<S>,
    ) -> Result<(Gradients<S>, Array2<S>)> {
        check_dim("upstream gradient", self.output_dim(), upstream.ncols())?;
        check_dim(
            "upstream batch",
            cache.activations[0].nrows(),
            upstream.nrows(),
        )?;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a = &cache.activations[l];
            let gw = a.t().dot(&delta).as_standard_layout().into_owned();
            let gb = delta.sum_axis(Axis(0));
            grads.push(Layer {
                weight: gw,
                bias: gb,
            });
            let mut next = delta.dot(&layer.weight.t());
            if l > 0 {
                Zip::from(&mut next).and(a).for_each(|d, &act| {
                    if act <= S::zero() {
                        *d = S::zero();
                    }
                });
            }
            delta = next;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta))
    }

    /// Single-sample convenience wrapper around forward + backward.
    pub fn backward_single(&self, input: &[S], upstream: &[S]) -> Result<Gradients<S>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Config(e.to_string()))?;
        let up = ArrayView2::from_shape((1, upstream.len()), upstream)
            .map_err(|e| Error::Config(e.to_string()))?;
        let (_, cache) = self.forward_cached(x)?;
        Ok(self.backward(&cache, up)?.0)
    }

    pub fn flat_params(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[S]) -> Result<()> {
        check_dim("flat parameters", self.param_count(), params.len())?;
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    /// Polyak averaging: `self <- tau * source + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, source: &Self, tau: S) {
        let keep = S::one() - tau;
        for (dst, src) in self.layers.iter_mut().zip(&source.layers) {
            Zip::from(&mut dst.weight)
                .and(&src.weight)
                .for_each(|d, &s| *d = tau * s + keep * *d);
            Zip::from(&mut dst.bias)
                .and(&src.bias)
                .for_each(|d, &s| *d = tau * s + keep * *d);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }

    pub fn to_dump(&self) -> NetworkDump {
        NetworkDump {
            sizes: self.sizes(),
            params: to_f64_vec(&self.flat_params()),
        }
    }

    pub fn from_dump(dump: &NetworkDump) -> Result<Self> {
        let mut net = Self::zeros(&dump.sizes)?;
        net.set_flat_params(&from_f64_vec(&dump.params))?;
        Ok(net)
    }
}

/// Central-difference gradient of `loss` with respect to every parameter of
/// `net`, in [`DenseNetwork::flat_params`] order.
pub fn numerical_gradient<S: Scalar>(
    net: &DenseNetwork<S>,
    step: S,
    mut loss: impl FnMut(&DenseNetwork<S>) -> S,
) -> Vec<S> {
    let mut probe = net.clone();
    let mut params = net.flat_params();
    let two = S::lit(2.0);
    (0..params.len())
        .map(|i| {
            let orig = params[i];
            params[i] = orig + step;
            probe.set_flat_params(&params).expect("same shape");
            let up = loss(&probe);
            params[i] = orig - step;
            probe.set_flat_params(&params).expect("same shape");
            let down = loss(&probe);
            params[i] = orig;
            (up - down) / (two * step)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both vectors vanish.
pub fn relative_error<S: Scalar>(a: &[S], b: &[S]) -> S {
    let norm = |v: &mut dyn Iterator<Item = S>| v.fold(S::zero(), |acc, x| acc + x * x).sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(&x, &y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == S::zero() {
        S::zero()
    } else {
        diff / scale
    }
}

#[inline]
fn relu<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x
    } else {
        S::zero()
    }
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(net: &DenseNetwork<S>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            Zip::from(&mut a.weight).and(&b.weight).for_each(|x, &y| *x = *x + y);
            Zip::from(&mut a.bias).and(&b.bias).for_each(|x, &y| *x = *x + y);
        }
    }
}

/// Flat parameter dump used by model and policy checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDump {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Smooth two-sided clamp of a raw output into `(lo, hi)`:
/// `y = min(hi, lo + softplus(hi - softplus(hi - x) - lo))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftClamp {
    pub lo: f64,
    pub hi: f64,
}

impl SoftClamp {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("clamp bounds must satisfy lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    /// Clamped value and its derivative with respect to the raw input.
    #[inline]
    pub fn apply<S: Scalar>(&self, raw: S) -> (S, S) {
        let lo = S::lit(self.lo);
        let hi = S::lit(self.hi);
        let upper = hi - softplus(hi - raw);
        // softplus(z) > z, so the composition can overshoot `hi` by ~e^-(hi-lo).
        let value = (lo + softplus(upper - lo)).min(hi);
        let deriv = sigmoid(hi - raw) * sigmoid(upper - lo);
        (value, deriv)
    }
}

/// Output head whose raw vector is `[mean.., raw_logvar..]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianHead {
    pub logvar: SoftClamp,
}

impl Default for GaussianHead {
    fn default() -> Self {
        Self {
            logvar: SoftClamp { lo: -10.0, hi: 4.0 },
        }
    }
}

impl GaussianHead {
    pub fn new(lv_min: f64, lv_max: f64) -> Result<Self> {
        Ok(Self {
            logvar: SoftClamp::new(lv_min, lv_max)?,
        })
    }

    /// Splits one raw output row of width `2d` into `(mean, logvar)`.
    pub fn split<S: Scalar>(&self, raw: &[S]) -> (Vec<S>, Vec<S>) {
        let d = raw.len() / 2;
        let mean = raw[..d].to_vec();
        let logvar = raw[d..].iter().map(|&r| self.logvar.apply(r).0).collect();
        (mean, logvar)
    }

    pub fn variance_bounds(&self) -> (f64, f64) {
        (self.logvar.lo.exp(), self.logvar.hi.exp())
    }
}

/// Adam with bias-corrected moments. Moments are kept per tensor, in the
/// order the caller presents them on every step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(lr: f64) -> Self {
        Self::with_constants(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_constants(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr: S::lit(lr),
            beta1: S::lit(beta1),
            beta2: S::lit(beta2),
            eps: S::lit(eps),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn second_moments(&self) -> impl Iterator<Item = &S> {
        self.v.iter().flatten()
    }

    /// One update over a list of parameter tensors and matching gradients.
    pub fn step(&mut self, params: &mut [&mut [S]], grads: &[&[S]]) -> Result<()> {
        check_dim("adam tensor count", params.len(), grads.len())?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        check_dim("adam tensor count", self.m.len(), params.len())?;
        for (p, g) in params.iter().zip(grads) {
            check_dim("adam tensor", p.len(), g.len())?;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (S::one() - b1) * gi;
                v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_network(&mut self, net: &mut DenseNetwork<S>, grads: &Gradients<S>) -> Result<()> {
        check_dim("gradient layers", net.layers.len(), grads.layers.len())?;
        let mut params: Vec<&mut [S]> = Vec::with_capacity(2 * net.layers.len());
        for l in &mut net.layers {
            params.push(l.weight.as_slice_mut().expect("standard layout"));
            params.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        let mut gs: Vec<&[S]> = Vec::with_capacity(2 * grads.layers.len());
        for l in &grads.layers {
            gs.push(l.weight.as_slice().expect("standard layout"));
            gs.push(l.bias.as_slice().expect("standard layout"));
        }
        self.step(&mut params, &gs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = DenseNetwork::<f64>::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_is_identity() {
        let net = DenseNetwork::from_layers(vec![Layer {
            weight: Array2::<f64>::eye(3),
            bias: Array1::zeros(3),
        }])
        .unwrap();
        assert_eq!(net.forward(&[0.5, -1.0, 2.0]).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn two_layer_matches_hand_rolled_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = DenseNetwork::<f64>::new(&[3, 4, 2], &mut rng).unwrap();
        let x = [0.3, -0.7, 1.1];
        let l = net.layers();
        let mut hidden = [0.0; 4];
        for j in 0..4 {
            let mut acc = l[0].bias[j];
            for i in 0..3 {
                acc += x[i] * l[0].weight[[i, j]];
            }
            hidden[j] = acc.max(0.0);
        }
        let mut expected = [0.0; 2];
        for k in 0..2 {
            let mut acc = l[1].bias[k];
            for j in 0..4 {
                acc += hidden[j] * l[1].weight[[j, k]];
            }
            expected[k] = acc;
        }
        let out = net.forward(&x).unwrap();
        for k in 0..2 {
            assert!((out[k] - expected[k]).abs() < 1e-12);
        }
        let batch = net.forward_batch(array![[0.3, -0.7, 1.1]].view()).unwrap();
        assert!((batch[[0, 1]] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let net = DenseNetwork::<f64>::zeros(&[3, 2]).unwrap();
        assert!(matches!(
            net.forward(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn linear_weight_gradient_equals_input() {
        let net = DenseNetwork::<f64>::zeros(&[3, 2]).unwrap();
        let x = [0.5, -2.0, 4.0];
        // loss = output[1]
        let g = net.backward_single(&x, &[0.0, 1.0]).unwrap();
        for j in 0..3 {
            assert_eq!(g.layers[0].weight[[j, 1]], x[j]);
            assert_eq!(g.layers[0].weight[[j, 0]], 0.0);
        }
        assert_eq!(g.layers[0].bias[1], 1.0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseNetwork::<f64>::new(&[2, 8, 8, 3], &mut rng).unwrap();
        let g = net.backward_single(&[0.1, 0.2], &[0.0; 3]).unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = DenseNetwork::<f64>::new(&[3, 6, 5, 2], &mut rng).unwrap();
        let x = array![[0.2, -0.4, 0.9], [1.0, 0.3, -0.5]];
        let weights = array![[0.7, -1.3], [0.2, 0.5]];
        let loss = |n: &DenseNetwork<f64>| (n.forward_batch(x.view()).unwrap() * &weights).sum();
        let (_, cache) = net.forward_cached(x.view()).unwrap();
        let (g, _) = net.backward(&cache, weights.view()).unwrap();
        let analytic = g.flatten();
        let mut params = net.flat_params();
        let h = 1e-5;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            net.set_flat_params(&params).unwrap();
            let up = loss(&net);
            params[i] = orig - h;
            net.set_flat_params(&params).unwrap();
            let down = loss(&net);
            params[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!((analytic[i] - numeric).abs() / denom < 1e-4, "param {i}");
        }
    }

    #[test]
    fn adam_zero_gradient_and_zero_lr_leave_params() {
        let mut p = vec![1.0f64, -2.0];
        let mut adam = AdamState::new(1e-3);
        for _ in 0..10 {
            adam.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0]);

        let mut adam = AdamState::new(0.0);
        adam.step(&mut [&mut p], &[&[3.0, -1.0]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is
        // lr * g / (|g| + eps) ~= lr.
        let mut p = vec![0.5f64];
        let mut adam = AdamState::new(0.01);
        adam.step(&mut [&mut p], &[&[2.0]]).unwrap();
        let expected = 0.5 - 0.01 * 2.0 / (2.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!(adam.second_moments().all(|&v| v >= 0.0));
    }

    #[test]
    fn soft_clamp_stays_inside_bounds() {
        let c = SoftClamp::new(-10.0, 4.0).unwrap();
        for &raw in &[-1e6f64, -50.0, -10.0, 0.0, 4.0, 50.0, 1e6] {
            let (v, d) = c.apply(raw);
            assert!(v >= -10.0 && v <= 4.0, "raw={raw} v={v}");
            assert!(d >= 0.0 && d <= 1.0);
        }
        let (mid, d) = c.apply(-3.0f64);
        assert!((mid + 3.0).abs() < 1e-2);
        assert!(d > 0.95);
    }

    #[test]
    fn dump_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNetwork::<f32>::new(&[2, 3, 1], &mut rng).unwrap();
        let back = DenseNetwork::<f32>::from_dump(&net.to_dump()).unwrap();
        assert_eq!(net, back);
    }
}
