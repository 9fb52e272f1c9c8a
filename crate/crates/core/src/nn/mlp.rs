//! Weight-normalised multilayer perceptrons.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Matrix, NnError, ParamTree, ParamVars, Tape, Var};

/// Standard deviation of the direction vectors drawn before
/// data-dependent initialisation.
pub const DIRECTION_INIT_STD: f64 = 0.05;

/// Floor added to per-unit variances during data-dependent init.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }

    fn apply_matrix(self, x: &Matrix) -> Matrix {
        match self {
            Activation::Tanh => x.map_slice(super::tape::tanh_slice),
            Activation::Identity => x.clone(),
        }
    }
}

/// One dense layer with effective weight `g · v / ‖v‖` per output row.
///
/// The fields are indices into the [`ParamTree`] the layer was built in.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightNormLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub v: usize,
    pub g: usize,
    pub b: usize,
}

impl WeightNormLayer {
    pub fn forward(&self, tape: &mut Tape, params: &ParamVars, x: Var) -> Result<Var, NnError> {
        let w = tape.weight_norm(params.get(self.v), params.get(self.g))?;
        tape.affine(x, w, params.get(self.b))
    }

    /// Effective weight matrix `out_dim × in_dim`.
    pub fn effective_weight(&self, tree: &ParamTree) -> Matrix {
        let v = tree.values(self.v);
        let g = tree.values(self.g);
        let mut w = Matrix::zeros(self.out_dim, self.in_dim);
        for r in 0..self.out_dim {
            let row = &v[r * self.in_dim..(r + 1) * self.in_dim];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for c in 0..self.in_dim {
                w.set(r, c, g[r] * row[c] / norm);
            }
        }
        w
    }

    /// Sets `g = 0, b = 0`, making the layer output identically zero.
    pub fn zero_output(&self, tree: &mut ParamTree) {
        tree.values_mut(self.g).fill(0.0);
        tree.values_mut(self.b).fill(0.0);
    }
}

/// A chain of [`WeightNormLayer`]s with a hidden activation; the final
/// layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<WeightNormLayer>,
    activation: Activation,
}

impl Mlp {
    /// Registers parameters `"{prefix}/layer{k}/{v,g,b}"` in `tree` for the
    /// dimension chain `sizes = [in, hidden.., out]`.
    ///
    /// Directions are drawn from N(0, 0.05²), gains start at 1 and biases at 0.
    pub fn build<R: Rng + ?Sized>(
        tree: &mut ParamTree,
        prefix: &str,
        sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NnError::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (k, pair) in sizes.windows(2).enumerate() {
            let (i, o) = (pair[0], pair[1]);
            let v = tree.insert(
                format!("{prefix}/layer{k}/v"),
                vec![o, i],
                random_directions(o * i, rng),
            )?;
            let g = tree.insert(format!("{prefix}/layer{k}/g"), vec![o], vec![1.0; o])?;
            let b = tree.insert(format!("{prefix}/layer{k}/b"), vec![o], vec![0.0; o])?;
            layers.push(WeightNormLayer { in_dim: i, out_dim: o, v, g, b });
        }
        Ok(Self { layers, activation })
    }

    /// Rebuilds the layer indices for a tree that already holds parameters
    /// under `prefix` (e.g. one read from a checkpoint).
    pub fn attach(tree: &ParamTree, prefix: &str, activation: Activation) -> Result<Self, NnError> {
        let mut layers = Vec::new();
        for k in 0.. {
            let Some(v) = tree.index_of(&format!("{prefix}/layer{k}/v")) else { break };
            let find = |s: &str| {
                tree.index_of(&format!("{prefix}/layer{k}/{s}"))
                    .ok_or_else(|| NnError::MissingParam(format!("{prefix}/layer{k}/{s}")))
            };
            let (g, b) = (find("g")?, find("b")?);
            let &[o, i] = tree.shape(v) else {
                return Err(NnError::Shape(format!("{prefix}/layer{k}/v must be a matrix")));
            };
            if tree.shape(g) != [o] || tree.shape(b) != [o] {
                return Err(NnError::Shape(format!("{prefix}/layer{k}: gain/bias shape mismatch")));
            }
            layers.push(WeightNormLayer { in_dim: i, out_dim: o, v, g, b });
        }
        if layers.is_empty() {
            return Err(NnError::MissingParam(format!("{prefix}/layer0/v")));
        }
        if layers.windows(2).any(|w| w[0].out_dim != w[1].in_dim) {
            return Err(NnError::Shape(format!("{prefix}: layer dimensions do not chain")));
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[WeightNormLayer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Recorded forward pass over a `batch × in_dim` input.
    pub fn forward(&self, tape: &mut Tape, params: &ParamVars, input: Var) -> Result<Var, NnError> {
        let width = tape.value(input).cols();
        if width != self.in_dim() {
            return Err(NnError::Shape(format!(
                "mlp expects {} input columns, got {width}",
                self.in_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut x = input;
        for (k, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, params, x)?;
            if k < last {
                x = self.activation.apply(tape, x);
            }
        }
        Ok(x)
    }

    /// Untracked forward pass returning the pre-activation of every layer.
    fn preactivations(&self, tree: &ParamTree, input: &Matrix) -> Vec<Matrix> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut h = x.matmul_t(&layer.effective_weight(tree));
            add_bias(&mut h, tree.values(layer.b));
            x = if k + 1 < self.layers.len() { self.activation.apply_matrix(&h) } else { h.clone() };
            out.push(h);
        }
        out
    }

    /// Untracked forward pass.
    pub fn forward_plain(&self, tree: &ParamTree, input: &Matrix) -> Result<Matrix, NnError> {
        if input.cols() != self.in_dim() {
            return Err(NnError::Shape(format!(
                "mlp expects {} input columns, got {}",
                self.in_dim(),
                input.cols()
            )));
        }
        Ok(self.preactivations(tree, input).pop().expect("at least one layer"))
    }

    /// Data-dependent initialisation: redraws every direction from
    /// N(0, 0.05²), then for each layer in turn sets gain and bias so that
    /// its pre-activations on `batch` have zero mean and unit variance per
    /// unit.
    pub fn data_dependent_init<R: Rng + ?Sized>(
        &self,
        tree: &mut ParamTree,
        batch: &Matrix,
        rng: &mut R,
    ) -> Result<(), NnError> {
        if batch.rows() < 2 {
            return Err(NnError::Shape(format!(
                "data-dependent init needs at least 2 rows, got {}",
                batch.rows()
            )));
        }
        if batch.cols() != self.in_dim() {
            return Err(NnError::Shape(format!(
                "init batch has {} columns, mlp expects {}",
                batch.cols(),
                self.in_dim()
            )));
        }
        for layer in &self.layers {
            let fresh = random_directions(layer.out_dim * layer.in_dim, rng);
            tree.values_mut(layer.v).copy_from_slice(&fresh);
        }
        let last = self.layers.len() - 1;
        let mut x = batch.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut h = x.matmul_t(&layer.effective_weight(tree));
            add_bias(&mut h, tree.values(layer.b));
            let (mean, var) = column_moments(&h);
            for o in 0..layer.out_dim {
                let std = (var[o] + VARIANCE_FLOOR).sqrt();
                let g = tree.values(layer.g)[o];
                let b = tree.values(layer.b)[o];
                tree.values_mut(layer.g)[o] = g / std;
                tree.values_mut(layer.b)[o] = (b - mean[o]) / std;
                for r in 0..h.rows() {
                    let v = h.get(r, o);
                    h.set(r, o, (v - mean[o]) / std);
                }
            }
            x = if k < last { self.activation.apply_matrix(&h) } else { h };
        }
        Ok(())
    }

    /// Zeroes the gain and bias of the final layer so the net outputs 0.
    pub fn zero_output(&self, tree: &mut ParamTree) {
        self.layers[self.layers.len() - 1].zero_output(tree);
    }
}

fn random_directions<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, DIRECTION_INIT_STD).expect("valid normal");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn add_bias(h: &mut Matrix, b: &[f64]) {
    let cols = h.cols();
    for chunk in h.as_mut_slice().chunks_mut(cols) {
        for (x, bi) in chunk.iter_mut().zip(b) {
            *x += bi;
        }
    }
}

/// Per-column mean and population variance.
pub fn column_moments(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = m.rows() as f64;
    let mut mean = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (acc, v) in mean.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|x| *x /= n);
    let mut var = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for ((acc, v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    var.iter_mut().for_each(|x| *x /= n);
    (mean, var)
}
