//! One-hidden-layer tanh perceptron producing per-action soft Q values.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::soft::{SoftQFunction, State};

/// `Q(s) = output_scale · (W2 tanh(W1 z + b1) + b2)` with the fixed input
/// normalisation `z = (s − input_offset) ⊙ input_scale`.
///
/// Parameters live in one flat vector laid out as `W1 | b1 | W2 | b2`, with
/// both weight matrices row-major (`W1` is `hidden × input`).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpQ {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub action_count: usize,
    pub params: Vec<f64>,
    pub input_offset: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_scale: f64,
}

/// Activations retained from a forward pass for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl MlpQ {
    pub fn param_count(input_dim: usize, hidden_dim: usize, action_count: usize) -> usize {
        hidden_dim * input_dim + hidden_dim + action_count * hidden_dim + action_count
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, action_count: usize) -> Self {
        // backward() keeps its scratch buffers on the stack
        assert!(input_dim <= 16 && hidden_dim <= 256, "perceptron too wide");
        Self {
            input_dim,
            hidden_dim,
            action_count,
            params: vec![0.0; Self::param_count(input_dim, hidden_dim, action_count)],
            input_offset: vec![0.0; input_dim],
            input_scale: vec![1.0; input_dim],
            output_scale: 1.0,
        }
    }

    /// Uniform `[−1/√fan_in, 1/√fan_in]` initialisation, biases included.
    pub fn init(input_dim: usize, hidden_dim: usize, action_count: usize, seed: u64) -> Self {
        let mut model = Self::zeros(input_dim, hidden_dim, action_count);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = hidden_dim * input_dim + hidden_dim;
        let bound1 = 1.0 / (input_dim as f64).sqrt();
        let bound2 = 1.0 / (hidden_dim as f64).sqrt();
        for (i, p) in model.params.iter_mut().enumerate() {
            let bound = if i < first { bound1 } else { bound2 };
            *p = rng.gen_range(-bound..bound);
        }
        model
    }

    pub fn with_normalisation(mut self, offset: Vec<f64>, scale: Vec<f64>, output_scale: f64) -> Self {
        assert_eq!(offset.len(), self.input_dim);
        assert_eq!(scale.len(), self.input_dim);
        self.input_offset = offset;
        self.input_scale = scale;
        self.output_scale = output_scale;
        self
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden_dim * self.input_dim;
        let w2 = b1 + self.hidden_dim;
        let b2 = w2 + self.action_count * self.hidden_dim;
        (b1, w2, b2)
    }

    pub fn new_cache(&self) -> MlpCache {
        MlpCache {
            input: vec![0.0; self.input_dim],
            hidden: vec![0.0; self.hidden_dim],
            output: vec![0.0; self.action_count],
        }
    }

    /// Forward pass into `cache`; the Q values end up in `cache.output`.
    pub fn forward_into(&self, s: &[f64], cache: &mut MlpCache) -> Result<()> {
        if s.len() != self.input_dim {
            return Err(invalid(format!(
                "state has {} components, model expects {}",
                s.len(),
                self.input_dim
            )));
        }
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        for i in 0..self.input_dim {
            cache.input[i] = (s[i] - self.input_offset[i]) * self.input_scale[i];
        }
        for h in 0..self.hidden_dim {
            let row = &p[h * self.input_dim..(h + 1) * self.input_dim];
            let pre: f64 = row.iter().zip(&cache.input).map(|(w, x)| w * x).sum::<f64>() + p[b1 + h];
            cache.hidden[h] = pre.tanh();
        }
        for a in 0..self.action_count {
            let row = &p[w2 + a * self.hidden_dim..w2 + (a + 1) * self.hidden_dim];
            let out: f64 = row.iter().zip(&cache.hidden).map(|(w, x)| w * x).sum::<f64>() + p[b2 + a];
            cache.output[a] = self.output_scale * out;
        }
        Ok(())
    }

    pub fn forward(&self, s: &[f64]) -> Result<Vec<f64>> {
        let mut cache = self.new_cache();
        self.forward_into(s, &mut cache)?;
        Ok(cache.output)
    }

    /// Accumulates `∂L/∂params` into `grad_params` given `∂L/∂Q` and, when
    /// requested, writes `∂L/∂s` into `grad_state`.
    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_output: &[f64],
        grad_params: &mut [f64],
        grad_state: Option<&mut [f64]>,
    ) {
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let mut grad_hidden = [0.0f64; 256];
        let grad_hidden = &mut grad_hidden[..self.hidden_dim];
        for a in 0..self.action_count {
            let g = grad_output[a] * self.output_scale;
            if g == 0.0 {
                continue;
            }
            grad_params[b2 + a] += g;
            let base = w2 + a * self.hidden_dim;
            for h in 0..self.hidden_dim {
                grad_params[base + h] += g * cache.hidden[h];
                grad_hidden[h] += g * p[base + h];
            }
        }
        let mut grad_input = [0.0f64; 16];
        for h in 0..self.hidden_dim {
            let t = cache.hidden[h];
            let g = grad_hidden[h] * (1.0 - t * t);
            if g == 0.0 {
                continue;
            }
            grad_params[b1 + h] += g;
            let base = h * self.input_dim;
            for i in 0..self.input_dim {
                grad_params[base + i] += g * cache.input[i];
                grad_input[i] += g * p[base + i];
            }
        }
        if let Some(gs) = grad_state {
            for i in 0..self.input_dim {
                gs[i] = grad_input[i] * self.input_scale[i];
            }
        }
    }
}

impl SoftQFunction for MlpQ {
    fn q_values(&self, s: &State) -> Result<Vec<f64>> {
        match s {
            State::Continuous(x) => self.forward(x),
            State::Discrete(_) => Err(invalid("perceptron Q needs a continuous state")),
        }
    }
}
