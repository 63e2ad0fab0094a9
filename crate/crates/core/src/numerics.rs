//! Dense linear algebra, layer forward/backward rules, the adaptive-moment
//! optimizer, the seeded random stream and a central-difference gradient
//! checker.
//!
//! Everything is `f64`. Input feature vectors are hashed bag-of-words and
//! mostly zero, so the dense layer skips zero inputs in both directions.

use std::ops::Deref;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `W x`, visiting only the non-zero entries of `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::invalid(format!(
                "matvec: input has length {}, matrix has {} columns",
                x.len(),
                self.cols
            )));
        }
        let nz = nonzero_indices(x);
        let dense = nz.len() * 2 > x.len();
        Ok((0..self.rows)
            .map(|r| {
                let row = self.row(r);
                if dense {
                    dot(row, x)
                } else {
                    nz.iter().map(|&j| row[j] * x[j]).sum()
                }
            })
            .collect())
    }

    /// `Wᵀ g`.
    pub fn matvec_transposed(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.rows {
            return Err(Error::invalid(format!(
                "transposed matvec: input has length {}, matrix has {} rows",
                g.len(),
                self.rows
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * gr;
            }
        }
        Ok(out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn nonzero_indices(x: &[f64]) -> Vec<usize> {
    x.iter()
        .enumerate()
        .filter_map(|(i, &v)| (v != 0.0).then_some(i))
        .collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Checks the simplex constraint (tolerance 1e-9) before wrapping.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::invalid("empty probability vector"));
        }
        if p.iter().any(|&x| !x.is_finite() || !(0.0..=1.0).contains(&x)) {
            return Err(Error::invalid(format!("entries outside [0,1]: {p:?}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("entries sum to {s}, not 1")));
        }
        Ok(Self(p))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbabilityVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbabilityVector> {
    if logits.len() < 2 {
        return Err(Error::invalid(format!(
            "softmax needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("softmax of non-finite logits"));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbabilityVector(exps.into_iter().map(|e| e / total).collect()))
}

/// `-ln p[target]` and its gradient with respect to the logits that
/// produced `p` (`p - onehot(target)`).
pub fn cross_entropy(p: &ProbabilityVector, target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= p.len() {
        return Err(Error::invalid(format!(
            "target {target} out of range for {} classes",
            p.len()
        )));
    }
    // p[target] can underflow to exactly zero for extreme logits.
    let loss = -p[target].max(f64::MIN_POSITIVE).ln();
    let mut grad = p.to_vec();
    grad[target] -= 1.0;
    Ok((loss.max(0.0), grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Fully connected layer `y = act(W x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// What [`Dense::backward`] needs from the forward pass.
#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Vec<f64>,
    nonzero: Vec<usize>,
    pre_activation: Vec<f64>,
    output: Vec<f64>,
}

impl DenseCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn pre_activation(&self) -> &[f64] {
        &self.pre_activation
    }
}

/// Parameter gradients of one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseGrads {
    pub fn zeros_like(layer: &Dense) -> Self {
        Self {
            weight: Matrix::zeros(layer.weight.rows, layer.weight.cols),
            bias: vec![0.0; layer.bias.len()],
        }
    }
}

impl Dense {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if weight.rows != bias.len() {
            return Err(Error::invalid(format!(
                "bias length {} does not match {} output rows",
                bias.len(),
                weight.rows
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights drawn from `rng`, zero biases.
    pub fn glorot(inputs: usize, outputs: usize, activation: Activation, rng: &mut RandomStream) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.uniform(-limit, limit))
            .collect();
        Self {
            weight: Matrix {
                rows: outputs,
                cols: inputs,
                data,
            },
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, DenseCache)> {
        let mut pre = self.weight.matvec(x)?;
        for (z, b) in pre.iter_mut().zip(&self.bias) {
            *z += b;
        }
        let out: Vec<f64> = pre.iter().map(|&z| self.activation.apply(z)).collect();
        let cache = DenseCache {
            input: x.to_vec(),
            nonzero: nonzero_indices(x),
            pre_activation: pre,
            output: out.clone(),
        };
        Ok((out, cache))
    }

    /// Gradient with respect to the pre-activation.
    fn local_grad(&self, cache: &DenseCache, upstream: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != self.outputs() {
            return Err(Error::invalid(format!(
                "upstream gradient has length {}, layer has {} outputs",
                upstream.len(),
                self.outputs()
            )));
        }
        if cache.pre_activation.len() != self.outputs() || cache.input.len() != self.inputs() {
            return Err(Error::State("cache does not belong to this layer".into()));
        }
        Ok(upstream
            .iter()
            .zip(cache.pre_activation.iter().zip(&cache.output))
            .map(|(&g, (&z, &y))| g * self.activation.derivative(z, y))
            .collect())
    }

    /// Full chain-rule gradients `(dW, db, dx)`.
    pub fn backward(&self, cache: Option<&DenseCache>, upstream: &[f64]) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
        let cache = cache.ok_or_else(|| Error::State("backward called without a forward cache".into()))?;
        let mut grads = DenseGrads::zeros_like(self);
        let mut gx = vec![0.0; self.inputs()];
        self.accumulate_backward(
            cache,
            upstream,
            Some(&mut grads.weight),
            Some(&mut grads.bias),
            Some(&mut gx),
        )?;
        Ok((grads.weight, grads.bias, gx))
    }

    /// Adds this example's gradients into whichever of `grad_w`/`grad_b`
    /// are given and, when requested, writes the input gradient into
    /// `grad_x`. Only weight columns for non-zero inputs are touched.
    pub fn accumulate_backward(
        &self,
        cache: &DenseCache,
        upstream: &[f64],
        grad_w: Option<&mut Matrix>,
        grad_b: Option<&mut [f64]>,
        grad_x: Option<&mut [f64]>,
    ) -> Result<()> {
        let delta = self.local_grad(cache, upstream)?;
        if let Some(gb) = grad_b {
            for (b, d) in gb.iter_mut().zip(&delta) {
                *b += d;
            }
        }
        if let Some(gw) = grad_w {
            let cols = self.weight.cols;
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut gw.data[r * cols..(r + 1) * cols];
                for &j in &cache.nonzero {
                    row[j] += d * cache.input[j];
                }
            }
        }
        if let Some(gx) = grad_x {
            let t = self.weight.matvec_transposed(&delta)?;
            gx.copy_from_slice(&t);
        }
        Ok(())
    }
}

/// Hyper-parameters of the adaptive-moment optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer over a fixed list of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One update. Tensors with `frozen[i] == true` are left untouched,
    /// moments included. Every gradient is checked for finiteness before
    /// anything is modified.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], frozen: &[bool]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() || frozen.len() != params.len() {
            return Err(Error::invalid("optimizer tensor count mismatch"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != p.len() {
                return Err(Error::invalid(format!("optimizer shape mismatch at tensor {i}")));
            }
            if !frozen[i] && g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence(format!("non-finite gradient in tensor {i}")));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if frozen[i] {
                continue;
            }
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                if m[j] == 0.0 {
                    continue;
                }
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Deterministic, platform-independent random stream (ChaCha8).
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// An independent stream for a named purpose under the same seed.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform integer in `0..n` by rejection sampling.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Fisher-Yates.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Symmetric relative error used by the gradient checks. Pairs where both
/// sides are below `floor` in magnitude count as agreeing.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(close(&p, &[1.0 / 3.0; 3], 1e-15));

        let p = softmax(&[2f64.ln(), 0.0, 0.0]).unwrap();
        assert!(close(&p, &[0.5, 0.25, 0.25], 1e-15));

        let p = softmax(&[100.0, 0.0, 0.0]).unwrap();
        assert!(p[0] == 1.0 && p[1] < 1e-40 && p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[1.0]).is_err());
        assert!(softmax(&[1.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let p = ProbabilityVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&p, 0).unwrap().0, 0.0);

        let p = ProbabilityVector::uniform(3);
        let (l, _) = cross_entropy(&p, 2).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);

        let p = ProbabilityVector::new(vec![0.5, 0.25, 0.25]).unwrap();
        let (_, g) = cross_entropy(&p, 0).unwrap();
        assert_eq!(g, vec![-0.5, 0.25, 0.25]);

        assert!(cross_entropy(&p, 3).is_err());
    }

    #[test]
    fn dense_forward_examples() {
        let x = [0.3, -1.2, 2.0];
        let id = Dense::new(Matrix::identity(3), vec![0.0; 3], Activation::Identity).unwrap();
        assert_eq!(id.forward(&x).unwrap().0, x.to_vec());

        for act in [Activation::Identity, Activation::Relu, Activation::Tanh] {
            let c = vec![-0.5, 0.7];
            let layer = Dense::new(Matrix::zeros(2, 3), c.clone(), act).unwrap();
            let y = layer.forward(&x).unwrap().0;
            assert_eq!(y, c.iter().map(|&v| act.apply(v)).collect::<Vec<_>>());
        }

        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let layer = Dense::new(w, vec![0.0, 0.0], Activation::Relu).unwrap();
        assert_eq!(layer.forward(&[1.0, 1.0]).unwrap().0, vec![3.0, 7.0]);

        assert!(layer.forward(&[1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn dense_backward_identity_is_chain_rule() {
        let w = Matrix::from_rows(&[&[1.0, 2.0, -1.0], &[0.5, -3.0, 4.0]]).unwrap();
        let layer = Dense::new(w.clone(), vec![0.1, 0.2], Activation::Identity).unwrap();
        let x = [1.0, 0.0, -2.0];
        let g = [0.7, -1.3];
        let (_, cache) = layer.forward(&x).unwrap();
        let (gw, gb, gx) = layer.backward(Some(&cache), &g).unwrap();
        assert_eq!(gx, w.matvec_transposed(&g).unwrap());
        assert_eq!(gb, g.to_vec());
        for (r, gr) in g.iter().enumerate() {
            for (c, xc) in x.iter().enumerate() {
                assert_eq!(gw.get(r, c), gr * xc);
            }
        }
    }

    #[test]
    fn relu_dead_units_have_zero_gradient() {
        let w = Matrix::from_rows(&[&[-1.0, -1.0], &[-2.0, -0.5]]).unwrap();
        let layer = Dense::new(w, vec![-0.1, -0.1], Activation::Relu).unwrap();
        let (_, cache) = layer.forward(&[1.0, 2.0]).unwrap();
        let (gw, gb, gx) = layer.backward(Some(&cache), &[1.0, 1.0]).unwrap();
        assert!(gw.as_slice().iter().all(|&v| v == 0.0));
        assert!(gb.iter().all(|&v| v == 0.0));
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_without_cache_is_state_error() {
        let layer = Dense::new(Matrix::zeros(1, 1), vec![0.0], Activation::Tanh).unwrap();
        assert!(matches!(layer.backward(None, &[1.0]), Err(Error::State(_))));
    }

    /// Every activation against central differences of `sum(g * y)`.
    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = RandomStream::new(11);
        for act in [Activation::Identity, Activation::Relu, Activation::Tanh] {
            let layer = Dense::glorot(5, 4, act, &mut rng);
            let x: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let g: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let (_, cache) = layer.forward(&x).unwrap();
            let (gw, gb, gx) = layer.backward(Some(&cache), &g).unwrap();

            let objective = |l: &Dense, x: &[f64]| dot(&l.forward(x).unwrap().0, &g);
            let nw = finite_diff_gradient(
                |w| {
                    let mut l = layer.clone();
                    l.weight.as_mut_slice().copy_from_slice(w);
                    objective(&l, &x)
                },
                layer.weight.as_slice(),
                1e-5,
            );
            let nb = finite_diff_gradient(
                |b| {
                    let mut l = layer.clone();
                    l.bias.copy_from_slice(b);
                    objective(&l, &x)
                },
                &layer.bias,
                1e-5,
            );
            let nx = finite_diff_gradient(|x| objective(&layer, x), &x, 1e-5);
            for (a, n) in gw
                .as_slice()
                .iter()
                .chain(&gb)
                .chain(&gx)
                .zip(nw.iter().chain(&nb).chain(&nx))
            {
                assert!(relative_error(*a, *n, 1e-9) < 1e-4, "{act:?}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut opt = Adam::new(AdamConfig::default(), &[3]);
        let mut p = vec![1.0, -2.0, 3.0];
        let before = p.clone();
        opt.step(&mut [&mut p], &[&[0.0; 3]], &[false]).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate_times_sign() {
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &[3]);
        let mut p = vec![0.0; 3];
        opt.step(&mut [&mut p], &[&[2.5, -0.3, 40.0]], &[false]).unwrap();
        let expect = [-0.01, 0.01, -0.01];
        assert!(close(&p, &expect, 1e-8), "{p:?}");
    }

    #[test]
    fn adam_minimizes_a_parabola() {
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &[1]);
        let mut x = vec![3.0];
        let mut reached = None;
        for step in 1..=500 {
            let g = [2.0 * x[0]];
            opt.step(&mut [&mut x], &[&g], &[false]).unwrap();
            if x[0].abs() < 1e-3 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "x = {}", x[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_and_respects_freeze() {
        let mut opt = Adam::new(AdamConfig::default(), &[2, 2]);
        let mut a = vec![1.0, 1.0];
        let mut b = vec![1.0, 1.0];
        let err = opt.step(&mut [&mut a, &mut b], &[&[f64::NAN, 0.0], &[1.0, 1.0]], &[false, false]);
        assert!(matches!(err, Err(Error::Divergence(_))));
        assert_eq!(opt.steps(), 0);

        opt.step(&mut [&mut a, &mut b], &[&[1.0, 1.0], &[1.0, 1.0]], &[true, false])
            .unwrap();
        assert_eq!(a, vec![1.0, 1.0]);
        assert_ne!(b, vec![1.0, 1.0]);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_gradient(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-4);
        let g = finite_diff_gradient(|_| 4.2, &[1.0, 2.0, 3.0], 1e-5);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn random_stream_is_reproducible() {
        let mut a = RandomStream::new(99);
        let mut b = RandomStream::new(99);
        for _ in 0..1_000_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = RandomStream::derive(99, 1);
        let mut d = RandomStream::new(99);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_sums_to_one_and_is_shift_invariant(
                logits in prop::collection::vec(-50.0f64..50.0, 2..8),
                shift in -100.0f64..100.0,
            ) {
                let p = softmax(&logits).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
                let q = softmax(&shifted).unwrap();
                for (a, b) in p.iter().zip(q.iter()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn cross_entropy_is_non_negative(
                logits in prop::collection::vec(-20.0f64..20.0, 2..6),
                t in 0usize..6,
            ) {
                let p = softmax(&logits).unwrap();
                let t = t % p.len();
                let (l, _) = cross_entropy(&p, t).unwrap();
                prop_assert!(l >= 0.0);
                prop_assert_eq!(l == 0.0, p[t] == 1.0);
            }
        }
    }
}
