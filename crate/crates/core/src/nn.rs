//! Dense feed-forward networks with reverse-mode gradients and Adam.
//!
//! Batches are row-major `n × width` buffers. Weights are row-major
//! `out × in`, so a layer computes `Z = X Wᵀ + b`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    None,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::None => z,
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::None => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
    /// Bumped on every parameter update; caches from older versions are stale.
    #[serde(default)]
    version: u64,
}

/// Activations recorded by a forward pass, input first.
#[derive(Debug, Clone)]
pub struct Cache {
    rows: usize,
    version: u64,
    acts: Vec<Vec<f64>>,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache has at least the input")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Gradients with the same shapes as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Grads {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    /// Parameter-ordered views: `w0, b0, w1, b1, ...`.
    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn scale(&mut self, k: f64) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// `c (m×n) = a (m×k) · b (k×n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides passed by callers address only elements of `a`
    // (m×k), `b` (k×n) and `c` (m×n), whose lengths are checked by callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Orthogonal `rows × cols` matrix (orthonormal rows or columns, whichever
/// is fewer) times `gain`, by Gram-Schmidt on a Gaussian draw.
pub fn orthogonal<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (n, d) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for q in &basis {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain * if rows <= cols { basis[r][c] } else { basis[c][r] };
        }
    }
    out
}

impl DenseNet {
    /// Network with zero parameters. `sizes` lists input width then each
    /// layer's width; `activations` has one entry per layer.
    pub fn zeros(sizes: &[usize], activations: &[Activation]) -> Self {
        assert_eq!(sizes.len(), activations.len() + 1, "one activation per layer");
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| Layer {
                inputs: w[0],
                outputs: w[1],
                weights: vec![0.0; w[0] * w[1]],
                bias: vec![0.0; w[1]],
                activation,
            })
            .collect();
        DenseNet { layers, version: 0 }
    }

    /// Orthogonal initialization with per-layer gains, zero biases.
    pub fn orthogonal<R: Rng>(
        sizes: &[usize],
        activations: &[Activation],
        gains: &[f64],
        rng: &mut R,
    ) -> Self {
        let mut net = DenseNet::zeros(sizes, activations);
        for (layer, &g) in net.layers.iter_mut().zip(gains) {
            layer.weights = orthogonal(layer.outputs, layer.inputs, g, rng);
        }
        net
    }

    pub fn input_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameter-ordered mutable views: `w0, b0, w1, b1, ...`.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    /// Marks parameters as changed, invalidating earlier caches.
    pub fn touch(&mut self) {
        self.version += 1;
    }

    /// Forward pass over `rows` stacked inputs.
    pub fn forward_batch(&self, x: &[f64], rows: usize) -> Result<Cache, NnError> {
        let width = self.input_size();
        if x.len() != rows * width {
            return Err(NnError::Dimension {
                expected: rows * width,
                got: x.len(),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let input = acts.last().expect("non-empty");
            let (i, o) = (layer.inputs as isize, layer.outputs);
            let mut z = vec![0.0; rows * o];
            gemm(rows, layer.inputs, o, input, i, 1, &layer.weights, 1, i, &mut z, 0.0);
            for row in z.chunks_exact_mut(o) {
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v = layer.activation.apply(*v + b);
                }
            }
            acts.push(z);
        }
        Ok(Cache {
            rows,
            version: self.version,
            acts,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Cache, NnError> {
        self.forward_batch(x, 1)
    }

    /// Output only, for a single input.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward(x)?.output().to_vec())
    }

    /// Reverse pass. Returns parameter gradients summed over the batch and
    /// the gradient with respect to the input batch.
    pub fn backward(&self, cache: &Cache, grad_out: &[f64]) -> Result<(Grads, Vec<f64>), NnError> {
        if cache.version != self.version || cache.acts.len() != self.layers.len() + 1 {
            return Err(NnError::StaleCache);
        }
        let rows = cache.rows;
        if grad_out.len() != rows * self.output_size() {
            return Err(NnError::Dimension {
                expected: rows * self.output_size(),
                got: grad_out.len(),
            });
        }
        let mut grads = Grads::zeros_like(self);
        let mut delta = grad_out.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let (i, o) = (layer.inputs, layer.outputs);
            let out = &cache.acts[li + 1];
            let input = &cache.acts[li];
            for (d, a) in delta.iter_mut().zip(out) {
                *d *= layer.activation.slope(*a);
            }
            // dW = deltaᵀ · input
            gemm(o, rows, i, &delta, 1, o as isize, input, i as isize, 1, &mut grads.weights[li], 0.0);
            let db = &mut grads.bias[li];
            for row in delta.chunks_exact(o) {
                db.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
            // dX = delta · W
            let mut dx = vec![0.0; rows * i];
            gemm(rows, o, i, &delta, o as isize, 1, &layer.weights, i as isize, 1, &mut dx, 0.0);
            delta = dx;
        }
        Ok((grads, delta))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("network serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NnError> {
        let net: DenseNet =
            serde_json::from_str(text).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        for (k, l) in net.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(NnError::Checkpoint(format!("layer {k} has inconsistent shapes")));
            }
            if k > 0 && net.layers[k - 1].outputs != l.inputs {
                return Err(NnError::Checkpoint(format!("layer {k} input width mismatch")));
            }
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Accumulators for parameter tensors of the given lengths.
    pub fn new(shapes: &[usize]) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_net(net: &DenseNet) -> Self {
        let shapes: Vec<usize> = net
            .layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .collect();
        AdamState::new(&shapes)
    }

    /// One bias-corrected Adam update. Rejects the whole update, leaving
    /// parameters and moments untouched, if any gradient is non-finite.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<(), NnError> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(NnError::Dimension {
                expected: self.first.len(),
                got: params.len().min(grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(NnError::Dimension {
                    expected: m.len(),
                    got: p.len().min(g.len()),
                });
            }
        }
        if !grads.iter().all(|g| g.iter().all(|x| x.is_finite())) {
            return Err(NnError::NonFiniteGradient);
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Adam step on a network; gradients are of a loss to be minimized.
pub fn adam_step(net: &mut DenseNet, grads: &Grads, state: &mut AdamState, lr: f64) -> Result<(), NnError> {
    let g = grads.slices();
    state.update(&mut net.param_slices_mut(), &g, lr)?;
    net.touch();
    Ok(())
}
