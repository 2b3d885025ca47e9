//! Fully connected network representing `u(t, x)`.
//!
//! The spatial gradient `Du` comes from forward propagation of the input
//! Jacobian: starting from the rows of the identity that select the `x`
//! inputs, each layer maps `J ← (J·W) ⊙ act′(pre)`. The `d` Jacobian rows of a
//! batch are stacked as `d` blocks of `M` rows so each layer needs a single
//! matmul. Everything is recorded on the tape, so losses that depend on `Du`
//! differentiate with first-order reverse mode only.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ad::{Activation, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Optional affine map applied to the raw `[t, x]` input: `(input − shift) ⊙ scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputScaling {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    layer_sizes: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    activation: Activation,
    scaling: Option<InputScaling>,
}

fn validate_layer_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "layer sizes need at least an input and an output, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::Config(format!(
            "layer sizes must be >= 1, got {layer_sizes:?}"
        )));
    }
    if layer_sizes[0] < 2 {
        return Err(Error::Config(
            "input layer must hold t and at least one x coordinate".into(),
        ));
    }
    if *layer_sizes.last().unwrap() != 1 {
        return Err(Error::Config(format!(
            "output layer must have width 1, got {}",
            layer_sizes.last().unwrap()
        )));
    }
    Ok(())
}

impl NetParams {
    /// Glorot-uniform weights and zero biases, deterministic in `seed`.
    pub fn init(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_layer_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let data = (0..fan_in * fan_out)
                .map(|_| dist.sample(&mut rng))
                .collect();
            weights.push(Tensor::from_vec(fan_in, fan_out, data)?);
            biases.push(Tensor::zeros(1, fan_out));
        }
        Ok(NetParams {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activation,
            scaling: None,
        })
    }

    /// Assembles parameters from explicit tensors, checking every shape.
    pub fn from_parts(
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Contract(format!(
                "{} weight tensors vs {} bias tensors",
                weights.len(),
                biases.len()
            )));
        }
        let mut layer_sizes = vec![weights[0].rows()];
        for (k, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.rows() != *layer_sizes.last().unwrap() {
                return Err(Error::shape(
                    "layer chain",
                    weights[k.saturating_sub(1)].shape(),
                    w.shape(),
                ));
            }
            if b.shape() != (1, w.cols()) {
                return Err(Error::shape("bias", w.shape(), b.shape()));
            }
            layer_sizes.push(w.cols());
        }
        validate_layer_sizes(&layer_sizes)?;
        Ok(NetParams {
            layer_sizes,
            weights,
            biases,
            activation,
            scaling: None,
        })
    }

    pub fn with_scaling(mut self, scaling: InputScaling) -> Result<Self> {
        let n = self.layer_sizes[0];
        if scaling.shift.len() != n || scaling.scale.len() != n {
            return Err(Error::Config(format!(
                "input scaling needs {n} shift and scale entries, got {} and {}",
                scaling.shift.len(),
                scaling.scale.len()
            )));
        }
        self.scaling = Some(scaling);
        Ok(self)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn scaling(&self) -> Option<&InputScaling> {
        self.scaling.as_ref()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    /// Spatial dimension `d` (the input holds `t` plus `d` coordinates).
    pub fn state_dim(&self) -> usize {
        self.layer_sizes[0] - 1
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Parameters in canonical order: `W0, b0, W1, b1, …`.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundNet<'t> {
        self.bind_with(tape, true)
    }

    /// Places parameters on the tape as constants (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundNet<'t> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundNet<'t> {
        let place = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundNet {
            tape,
            weights: self.weights.iter().map(place).collect(),
            biases: self.biases.iter().map(place).collect(),
            layer_sizes: self.layer_sizes.clone(),
            activation: self.activation,
            scaling: self.scaling.clone(),
        }
    }

    /// `u` at each row of `(t, x)`, evaluated off-tape.
    pub fn eval_u(&self, t: &Tensor, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let net = self.bind_frozen(&tape);
        let u = net.forward_u(tape.constant(t.clone()), tape.constant(x.clone()))?;
        let out = tape.value(u).clone();
        Ok(out)
    }

    /// `(u, Du)` at each row of `(t, x)`, evaluated off-tape.
    pub fn eval_u_grad(&self, t: &Tensor, x: &Tensor) -> Result<NetOutput> {
        let tape = Tape::new();
        let net = self.bind_frozen(&tape);
        let (u, du) = net.forward_u_grad(tape.constant(t.clone()), tape.constant(x.clone()))?;
        let out = NetOutput {
            u: tape.value(u).clone(),
            du: tape.value(du).clone(),
        };
        Ok(out)
    }
}

/// Solution values `u` (M×1) and spatial gradients `Du` (M×d).
#[derive(Clone, Debug, PartialEq)]
pub struct NetOutput {
    pub u: Tensor,
    pub du: Tensor,
}

/// Network parameters placed on a specific tape.
pub struct BoundNet<'t> {
    tape: &'t Tape,
    weights: Vec<Var>,
    biases: Vec<Var>,
    layer_sizes: Vec<usize>,
    activation: Activation,
    scaling: Option<InputScaling>,
}

impl<'t> BoundNet<'t> {
    /// Parameter handles in canonical order (`W0, b0, W1, b1, …`).
    pub fn vars(&self) -> Vec<Var> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }

    pub fn state_dim(&self) -> usize {
        self.layer_sizes[0] - 1
    }

    fn check_inputs(&self, t: Var, x: Var) -> Result<usize> {
        let (tm, tc) = self.tape.shape(t);
        let (xm, xc) = self.tape.shape(x);
        if tc != 1 || tm != xm || xc != self.state_dim() {
            return Err(Error::shape("network input", (tm, tc), (xm, xc)));
        }
        Ok(xm)
    }

    fn input(&self, t: Var, x: Var, rows: usize) -> Result<Var> {
        let tape = self.tape;
        let z = tape.concat_cols(t, x)?;
        match &self.scaling {
            None => Ok(z),
            Some(s) => {
                let neg_shift: Vec<f64> = s.shift.iter().map(|v| -v).collect();
                let shift = tape.constant(Tensor::from_vec(1, neg_shift.len(), neg_shift)?);
                let centered = tape.add_row(z, shift)?;
                let scale = tape.constant(Tensor::broadcast_row(&s.scale, rows));
                tape.mul(centered, scale)
            }
        }
    }

    /// `u(t, x)` for an M×1 time column and M×d states.
    pub fn forward_u(&self, t: Var, x: Var) -> Result<Var> {
        let rows = self.check_inputs(t, x)?;
        let tape = self.tape;
        let mut h = self.input(t, x, rows)?;
        let last = self.weights.len() - 1;
        for k in 0..=last {
            let pre = tape.add_row(tape.matmul(h, self.weights[k])?, self.biases[k])?;
            h = if k < last {
                tape.activation(pre, self.activation)?
            } else {
                pre
            };
        }
        Ok(h)
    }

    /// `(u, Du)` for an M×1 time column and M×d states.
    pub fn forward_u_grad(&self, t: Var, x: Var) -> Result<(Var, Var)> {
        let rows = self.check_inputs(t, x)?;
        let tape = self.tape;
        let d = self.state_dim();

        // Block j of the seed selects input column 1 + j for every sample.
        let width = d + 1;
        let mut seed = Tensor::zeros(d * rows, width);
        for j in 0..d {
            let s = self.scaling.as_ref().map_or(1.0, |s| s.scale[1 + j]);
            for r in 0..rows {
                seed.set(j * rows + r, 1 + j, s);
            }
        }
        let seed = tape.constant(seed);

        let mut h = self.input(t, x, rows)?;
        let mut jac = seed;
        let last = self.weights.len() - 1;
        for k in 0..=last {
            let w = self.weights[k];
            let pre = tape.add_row(tape.matmul(h, w)?, self.biases[k])?;
            let jac_pre = tape.matmul(jac, w)?;
            if k < last {
                h = tape.activation(pre, self.activation)?;
                let slope = tape.activation_derivative(pre, self.activation)?;
                let slope = tape.tile_rows(slope, d)?;
                jac = tape.mul(jac_pre, slope)?;
            } else {
                let du = tape.unstack_rows(jac_pre, d)?;
                return Ok((pre, du));
            }
        }
        unreachable!("network has at least one layer")
    }
}

/// Anything that yields `(Y, Z) = (u, Du)` along a batch of states.
///
/// The network is the usual implementation; closed-form solutions implement it
/// too, which lets rollouts and losses be checked against exact answers.
pub trait SolutionModel {
    fn state_dim(&self) -> usize;

    /// Returns `(u, Du)` at time `t` for the M×d states `x`.
    fn value_and_gradient(&self, tape: &Tape, t: f64, x: Var) -> Result<(Var, Var)>;
}

impl SolutionModel for BoundNet<'_> {
    fn state_dim(&self) -> usize {
        BoundNet::state_dim(self)
    }

    fn value_and_gradient(&self, tape: &Tape, t: f64, x: Var) -> Result<(Var, Var)> {
        debug_assert!(
            std::ptr::eq(tape, self.tape),
            "network bound to a different tape"
        );
        let rows = tape.shape(x).0;
        let t = tape.constant(Tensor::filled(rows, 1, t));
        self.forward_u_grad(t, x)
    }
}
