//! Small fully connected value network with hand-written reverse mode and Adam.
//!
//! Parameters live in one flat vector, layer after layer, each layer stored as
//! its weight matrix (row-major, `out × in`) followed by its bias. Hidden
//! layers use ReLU; the output layer is linear and scalar.

use crate::error::{Error, Result};
use crate::rng::SeededRng;

const MAGIC: &[u8; 4] = b"PMLP";

#[derive(Clone, Debug, PartialEq)]
pub struct MlpCritic {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl MlpCritic {
    /// Weights uniform in `±1/√fan_in`, zero biases.
    pub fn new(input_dim: usize, hidden: &[usize], rng: &mut SeededRng) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut params = Vec::with_capacity(param_count(&sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0].max(1) as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| (2.0 * rng.uniform() - 1.0) * bound));
            params.extend(std::iter::repeat(0.0).take(w[1]));
        }
        Self { sizes, params }
    }

    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let params = vec![0.0; param_count(&sizes)];
        Self { sizes, params }
    }

    /// `sizes` runs from the input width to the scalar output (last entry 1).
    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || *sizes.last().unwrap() != 1 {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        if params.len() != param_count(&sizes) {
            return Err(Error::Config(format!(
                "{} parameters for layer sizes {sizes:?}, expected {}",
                params.len(),
                param_count(&sizes)
            )));
        }
        Ok(Self { sizes, params })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.sizes[0] {
            return Err(Error::Config(format!(
                "critic expects {} inputs, got {}",
                self.sizes[0],
                input.len()
            )));
        }
        Ok(())
    }

    /// Pre-activation outputs of every layer.
    fn activations(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let n_layers = self.sizes.len() - 1;
        let mut pre = Vec::with_capacity(n_layers);
        let mut offset = 0;
        let mut current: Vec<f64> = input.to_vec();
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let bias = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &weights[o * fan_in..(o + 1) * fan_in];
                    bias[o] + row.iter().zip(&current).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            current = if l + 1 < n_layers {
                z.iter().map(|&v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
        }
        pre
    }

    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        self.check_input(input)?;
        Ok(self.activations(input).last().unwrap()[0])
    }

    /// Gradient of `output · output_grad` w.r.t. every parameter.
    pub fn backward(&self, input: &[f64], output_grad: f64) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.accumulate_backward(input, output_grad, &mut grad)?;
        Ok(grad)
    }

    /// Add the gradient of `output · output_grad` into `grad`; returns the output.
    pub fn accumulate_backward(
        &self,
        input: &[f64],
        output_grad: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_input(input)?;
        if grad.len() != self.params.len() {
            return Err(Error::Config("gradient buffer has the wrong length".into()));
        }
        let pre = self.activations(input);
        let output = pre.last().unwrap()[0];
        if output_grad == 0.0 {
            return Ok(output);
        }
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for w in self.sizes.windows(2) {
            offsets.push(offset);
            offset += w[0] * w[1] + w[1];
        }
        // delta = dL/dz for the current layer
        let mut delta = vec![output_grad];
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let layer_input: Vec<f64> = if l == 0 {
                input.to_vec()
            } else {
                pre[l - 1].iter().map(|&v| v.max(0.0)).collect()
            };
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                for (g, x) in row.iter_mut().zip(&layer_input) {
                    *g += d * x;
                }
                grad[off + fan_in * fan_out + o] += d;
            }
            if l > 0 {
                let weights = &self.params[off..off + fan_in * fan_out];
                let mut prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, w) in prev.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                        *p += d * w;
                    }
                }
                for (p, z) in prev.iter_mut().zip(&pre[l - 1]) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok(output)
    }

    /// Multiply the output layer's weights and bias by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let fan_in = self.sizes[self.sizes.len() - 2];
        let n = self.params.len();
        for p in &mut self.params[n - fan_in - 1..] {
            *p *= factor;
        }
    }

    /// Little-endian dump: magic, layer count, layer sizes (u32), then f64 parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.sizes.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.sizes.len() as u32).to_le_bytes());
        for &s in &self.sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for &p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::Input(format!("malformed critic file: {what}"));
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing header"));
        }
        let read_u32 = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("truncated header"))
        };
        let n_sizes = read_u32(4)? as usize;
        let sizes = (0..n_sizes)
            .map(|k| read_u32(8 + 4 * k).map(|s| s as usize))
            .collect::<Result<Vec<_>>>()?;
        let start = 8 + 4 * n_sizes;
        let body = &bytes[start..];
        if body.len() % 8 != 0 {
            return Err(bad("parameter block is not a whole number of f64"));
        }
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_parts(sizes, params)
    }
}

/// Adam optimiser state with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn second_moments(&self) -> &[f64] {
        &self.v
    }

    /// One bias-corrected Adam descent step on `params`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "adam state for {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    state.step(params, grads)
}
