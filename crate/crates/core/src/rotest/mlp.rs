//! Fully connected ReLU networks with hand-written reverse mode.
//!
//! Batches are column-major: an input of `d` features and `b` samples is a
//! `d × b` matrix.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    fn zeros(input: usize, output: usize) -> Self {
        Layer {
            weight: DMatrix::zeros(output, input),
            bias: DVector::zeros(output),
        }
    }
}

/// Affine layers with ReLU between them and a linear output.
///
/// Every mutation stamps a fresh generation so that a [`ForwardCache`] taken
/// before the change is rejected by [`mlp_backward`].
#[derive(Debug, Clone)]
pub struct MlpParams {
    layers: Vec<Layer>,
    generation: u64,
}

impl PartialEq for MlpParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl MlpParams {
    /// He-initialized weights (std `√(2/fan_in)`), zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive std");
                Layer {
                    weight: DMatrix::from_fn(w[1], w[0], |_, _| normal.sample(rng)),
                    bias: DVector::zeros(w[1]),
                }
            })
            .collect();
        Ok(MlpParams {
            layers,
            generation: next_generation(),
        })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        Ok(MlpParams {
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
            generation: next_generation(),
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("layers", "network needs at least one layer"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: l.weight.nrows(),
                    actual: l.bias.len(),
                });
            }
            if k > 0 && l.weight.ncols() != layers[k - 1].weight.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: layers[k - 1].weight.nrows(),
                    actual: l.weight.ncols(),
                });
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid("layers", "non-finite parameter"));
            }
        }
        Ok(MlpParams {
            layers,
            generation: next_generation(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation = next_generation();
        &mut self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weight.nrows()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::invalid("sizes", "need input and output sizes"));
    }
    if sizes.contains(&0) {
        return Err(Error::invalid("sizes", "layer sizes must be positive"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DropoutMode {
    Eval,
    /// Inverted dropout on hidden activations with drop probability `p`.
    Train {
        p: f64,
    },
}

/// Activations recorded by [`mlp_forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// Input of each layer (post-ReLU, post-dropout for hidden layers).
    inputs: Vec<DMatrix<f64>>,
    /// Hidden pre-activations.
    pre_activations: Vec<DMatrix<f64>>,
    /// Scaled dropout masks, one per hidden layer when training.
    masks: Vec<Option<DMatrix<f64>>>,
}

pub fn mlp_forward<R: Rng + ?Sized>(
    params: &MlpParams,
    input: &DMatrix<f64>,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<(DMatrix<f64>, ForwardCache)> {
    if input.nrows() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            actual: input.nrows(),
        });
    }
    let keep = match mode {
        DropoutMode::Eval => 1.0,
        DropoutMode::Train { p } => {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid("dropout", "must lie in [0, 1)"));
            }
            1.0 - p
        }
    };
    let n_layers = params.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre_activations = Vec::with_capacity(n_layers - 1);
    let mut masks = Vec::with_capacity(n_layers - 1);
    let mut h = input.clone();
    for (k, layer) in params.layers.iter().enumerate() {
        let mut z = &layer.weight * &h;
        for mut col in z.column_iter_mut() {
            col += &layer.bias;
        }
        inputs.push(h);
        if k + 1 == n_layers {
            return Ok((
                z,
                ForwardCache {
                    generation: params.generation,
                    inputs,
                    pre_activations,
                    masks,
                },
            ));
        }
        let mut a = z.map(|v| v.max(0.0));
        let mask = (keep < 1.0).then(|| {
            DMatrix::from_fn(a.nrows(), a.ncols(), |_, _| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
        });
        if let Some(m) = &mask {
            a.component_mul_assign(m);
        }
        pre_activations.push(z);
        masks.push(mask);
        h = a;
    }
    unreachable!("network has at least one layer")
}

/// Gradients with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub layers: Vec<Layer>,
}

impl MlpGradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGradients {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.ncols(), l.weight.nrows()))
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.norm_squared() + l.bias.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm {
            self.scale(max_norm / n);
        }
        n
    }
}

/// Reverse-mode pass; returns parameter gradients and the input gradient.
pub fn mlp_backward(
    params: &MlpParams,
    cache: &ForwardCache,
    output_grad: &DMatrix<f64>,
) -> Result<(MlpGradients, DMatrix<f64>)> {
    if cache.generation != params.generation {
        return Err(Error::StaleCache);
    }
    let batch = cache.inputs[0].ncols();
    if output_grad.nrows() != params.output_dim() || output_grad.ncols() != batch {
        return Err(Error::DimensionMismatch {
            expected: params.output_dim() * batch,
            actual: output_grad.len(),
        });
    }
    let mut grads = Vec::with_capacity(params.layers.len());
    let mut g = output_grad.clone();
    for k in (0..params.layers.len()).rev() {
        let layer = &params.layers[k];
        let h = &cache.inputs[k];
        grads.push(Layer {
            weight: &g * h.transpose(),
            bias: g.column_sum(),
        });
        let mut g_in = layer.weight.tr_mul(&g);
        if k > 0 {
            if let Some(m) = &cache.masks[k - 1] {
                g_in.component_mul_assign(m);
            }
            g_in.zip_apply(&cache.pre_activations[k - 1], |gv, z| {
                if z <= 0.0 {
                    *gv = 0.0;
                }
            });
        }
        g = g_in;
    }
    grads.reverse();
    Ok((MlpGradients { layers: grads }, g))
}

/// Adam with decoupled weight decay on the weight matrices (biases are not decayed).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: i32,
    first: Vec<Layer>,
    second: Vec<Layer>,
}

impl AdamW {
    pub fn new(
        params: &MlpParams,
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        weight_decay: f64,
    ) -> Self {
        let z = MlpGradients::zeros_like(params).layers;
        AdamW {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            weight_decay,
            step: 0,
            first: z.clone(),
            second: z,
        }
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpGradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps, lr, wd) = (
            self.beta1,
            self.beta2,
            self.epsilon,
            self.learning_rate,
            self.weight_decay,
        );
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64, decay: bool| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let adam = (*m / bc1) / ((*v / bc2).sqrt() + eps);
            let decay_term = if decay { wd * *p } else { 0.0 };
            *p -= lr * (adam + decay_term);
        };
        for (((layer, g), m), v) in params
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((p, g), m), v) in layer
                .weight
                .iter_mut()
                .zip(g.weight.iter())
                .zip(m.weight.iter_mut())
                .zip(v.weight.iter_mut())
            {
                update(p, *g, m, v, true);
            }
            for (((p, g), m), v) in layer
                .bias
                .iter_mut()
                .zip(g.bias.iter())
                .zip(m.bias.iter_mut())
                .zip(v.bias.iter_mut())
            {
                update(p, *g, m, v, false);
            }
        }
    }
}
