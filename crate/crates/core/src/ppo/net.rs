//! Shared-trunk MLP with a policy head and a value head.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::PpoError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// Shape `(outputs, inputs)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense { w: Array2::zeros((outputs, inputs)), b: Array1::zeros(outputs) }
    }

    pub fn orthogonal<R: Rng>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        Dense { w: orthogonal(outputs, inputs, gain, rng), b: Array1::zeros(outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.w.nrows()
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }
}

/// Random matrix with orthonormal rows or columns (whichever are fewer),
/// scaled by `gain`. Gram-Schmidt on Gaussian samples.
fn orthogonal<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<f64> {
    let (k, n) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut q = Array2::<f64>::zeros((k, n));
    let mut i = 0;
    while i < k {
        let mut v: Array1<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for j in 0..i {
            let proj = v.dot(&q.row(j));
            v.scaled_add(-proj, &q.row(j));
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            q.row_mut(i).assign(&(v / norm));
            i += 1;
        }
    }
    let q = if rows <= cols { q } else { q.reversed_axes().as_standard_layout().to_owned() };
    q * gain
}

/// Network parameters; gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub trunk: Vec<Dense>,
    pub policy_head: Dense,
    pub value_head: Dense,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Array2<f64>,
    /// Post-tanh output of every trunk layer.
    pub hidden: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
    pub values: Array1<f64>,
}

impl PolicyParams {
    /// Orthogonal init: trunk gain sqrt(2), policy head 0.01, value head 1.
    pub fn new<R: Rng>(input_len: usize, hidden: &[usize], num_actions: usize, rng: &mut R) -> Self {
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut prev = input_len;
        for &h in hidden {
            trunk.push(Dense::orthogonal(prev, h, 2f64.sqrt(), rng));
            prev = h;
        }
        PolicyParams {
            trunk,
            policy_head: Dense::orthogonal(prev, num_actions, 0.01, rng),
            value_head: Dense::orthogonal(prev, 1, 1.0, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.inputs(), d.outputs());
        PolicyParams {
            trunk: self.trunk.iter().map(z).collect(),
            policy_head: z(&self.policy_head),
            value_head: z(&self.value_head),
        }
    }

    pub fn input_len(&self) -> usize {
        self.trunk.first().unwrap_or(&self.policy_head).inputs()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.trunk.iter().map(Dense::outputs).collect()
    }

    pub fn num_actions(&self) -> usize {
        self.policy_head.outputs()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks that consecutive layers fit together.
    pub fn validate(&self) -> Result<(), PpoError> {
        let check = |d: &Dense, inputs: usize| {
            if d.inputs() != inputs || d.b.len() != d.outputs() {
                return Err(PpoError::Shape(format!(
                    "layer expects {inputs} inputs and {} biases, got {} and {}",
                    d.outputs(),
                    d.inputs(),
                    d.b.len()
                )));
            }
            Ok(d.outputs())
        };
        let mut prev = self.input_len();
        for d in &self.trunk {
            prev = check(d, prev)?;
        }
        check(&self.policy_head, prev)?;
        check(&self.value_head, prev)?;
        if self.value_head.outputs() != 1 {
            return Err(PpoError::Shape("value head must have one output".into()));
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.trunk.len() + 4);
        for d in self.trunk.iter().chain([&self.policy_head, &self.value_head]) {
            out.push(d.w.as_slice().expect("standard layout"));
            out.push(d.b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.trunk.len() + 4);
        for d in self.trunk.iter_mut().chain([&mut self.policy_head, &mut self.value_head]) {
            out.push(d.w.as_slice_mut().expect("standard layout"));
            out.push(d.b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut at = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[at..at + t.len()]);
            at += t.len();
        }
    }

    pub fn forward_batch(&self, input: &Array2<f64>) -> ForwardCache {
        let mut hidden = Vec::with_capacity(self.trunk.len());
        let mut x = input;
        for d in &self.trunk {
            hidden.push(d.forward(x).mapv_into(f64::tanh));
            x = hidden.last().unwrap();
        }
        let logits = self.policy_head.forward(x);
        let values = self.value_head.forward(x).index_axis_move(Axis(1), 0);
        ForwardCache { input: input.clone(), hidden, logits, values }
    }

    /// Logits and value for a single observation.
    pub fn forward(&self, obs: &[f64]) -> (Vec<f64>, f64) {
        let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row vector");
        let c = self.forward_batch(&x);
        (c.logits.row(0).to_vec(), c.values[0])
    }

    /// Gradient of a scalar loss given its derivatives w.r.t. logits and values.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Array2<f64>, d_values: &Array1<f64>) -> PolicyParams {
        let last = cache.hidden.last().unwrap_or(&cache.input);
        let d_v = d_values.view().insert_axis(Axis(1));
        let head = |g: ndarray::ArrayView2<f64>| Dense { w: g.t().dot(last), b: g.sum_axis(Axis(0)) };
        let policy_head = head(d_logits.view());
        let value_head = head(d_v);
        let mut dh = d_logits.dot(&self.policy_head.w) + d_v.dot(&self.value_head.w);

        let mut trunk = Vec::with_capacity(self.trunk.len());
        for (i, d) in self.trunk.iter().enumerate().rev() {
            let h = &cache.hidden[i];
            let da = dh * &h.mapv(|y| 1.0 - y * y);
            let x = if i == 0 { &cache.input } else { &cache.hidden[i - 1] };
            trunk.push(Dense { w: da.t().dot(x), b: da.sum_axis(Axis(0)) });
            dh = da.dot(&d.w);
        }
        trunk.reverse();
        PolicyParams { trunk, policy_head, value_head }
    }
}
