use crate::error::{Error, Result};
use crate::ndcore::{leaky_relu, leaky_relu_backward, Matrix, Param, Rng};

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    LeakyRelu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub leaky_slope: f64,
}

impl MlpSpec {
    /// LeakyReLU hidden layers and a linear output.
    pub fn new(layer_dims: Vec<usize>, leaky_slope: f64) -> Self {
        Self {
            layer_dims,
            hidden_activation: Activation::LeakyRelu,
            output_activation: Activation::Linear,
            leaky_slope,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Contract(format!(
                "an MLP needs at least input and output dims, got {:?}",
                self.layer_dims
            )));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::Contract(format!(
                "zero-width layer in {:?}",
                self.layer_dims
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Contract(format!(
                "leaky slope {} outside (0, 1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

/// Affine map `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

/// Values saved by a forward pass: the input to each layer and its
/// pre-activation.
#[derive(Clone, Debug)]
pub struct MlpCache {
    pub inputs: Vec<Matrix>,
    pub pre: Vec<Matrix>,
}

impl MlpCache {
    /// Smallest `|pre-activation|` over LeakyReLU units, the distance to the
    /// nearest kink. Used by finite-difference checks to avoid kinks.
    pub fn min_abs_kink_distance(&self, spec: &MlpSpec) -> f64 {
        let n = self.pre.len();
        self.pre
            .iter()
            .enumerate()
            .filter(|(l, _)| spec.activation_of(*l, n) == Activation::LeakyRelu)
            .flat_map(|(_, m)| m.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

impl MlpSpec {
    fn activation_of(&self, layer: usize, n_layers: usize) -> Activation {
        if layer + 1 == n_layers {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }
}

/// Feed-forward network of [`Linear`] layers with hand-derived backward.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Weights `N(0, 0.02²)`, biases zero.
    pub fn init(spec: MlpSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims
            .windows(2)
            .map(|w| Linear {
                weight: Param::new(Matrix::from_fn(w[0], w[1], |_, _| INIT_STD * rng.normal())),
                bias: Param::new(Matrix::zeros(1, w[1])),
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn activate(&self, layer: usize, pre: &Matrix) -> Matrix {
        match self.spec.activation_of(layer, self.layers.len()) {
            Activation::Linear => pre.clone(),
            Activation::LeakyRelu => leaky_relu(pre, self.spec.leaky_slope),
        }
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension {
                op: "mlp_forward",
                left: x.shape(),
                right: (self.input_dim(), self.output_dim()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut p = cur.matmul(&layer.weight.value)?;
            p.add_row_broadcast(&layer.bias.value)?;
            let out = self.activate(l, &p);
            inputs.push(cur);
            pre.push(p);
            cur = out;
        }
        Ok((cur, MlpCache { inputs, pre }))
    }

    /// Forward pass without keeping a cache.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut p = cur.matmul(&layer.weight.value)?;
            p.add_row_broadcast(&layer.bias.value)?;
            cur = self.activate(l, &p);
        }
        Ok(cur)
    }

    /// Gradient at a layer's pre-activation from the gradient at its output.
    fn through_activation(&self, layer: usize, pre: &Matrix, grad: Matrix) -> Result<Matrix> {
        match self.spec.activation_of(layer, self.layers.len()) {
            Activation::Linear => Ok(grad),
            Activation::LeakyRelu => leaky_relu_backward(pre, &grad, self.spec.leaky_slope),
        }
    }

    /// Backpropagates `grad_out`, accumulating parameter gradients, and
    /// returns the gradient with respect to the input.
    pub fn backward(&mut self, cache: &MlpCache, grad_out: &Matrix) -> Result<Matrix> {
        self.backward_impl(cache, grad_out, true, true)
    }

    /// Accumulates parameter gradients without forming the input gradient.
    pub fn backward_params(&mut self, cache: &MlpCache, grad_out: &Matrix) -> Result<()> {
        self.backward_impl(cache, grad_out, true, false).map(drop)
    }

    /// Input gradient only; parameter gradient buffers are left untouched.
    pub fn backward_input(&self, cache: &MlpCache, grad_out: &Matrix) -> Result<Matrix> {
        let mut g = grad_out.clone();
        for l in (0..self.layers.len()).rev() {
            g = self.through_activation(l, &cache.pre[l], g)?;
            g = g.matmul_nt(&self.layers[l].weight.value)?;
        }
        Ok(g)
    }

    fn backward_impl(
        &mut self,
        cache: &MlpCache,
        grad_out: &Matrix,
        params: bool,
        input: bool,
    ) -> Result<Matrix> {
        if grad_out.shape() != cache.pre.last().map_or((0, 0), Matrix::shape) {
            return Err(Error::Dimension {
                op: "mlp_backward",
                left: grad_out.shape(),
                right: cache.pre.last().map_or((0, 0), Matrix::shape),
            });
        }
        let mut g = grad_out.clone();
        for l in (0..self.layers.len()).rev() {
            g = self.through_activation(l, &cache.pre[l], g)?;
            if params {
                let dw = cache.inputs[l].matmul_tn(&g)?;
                let layer = &mut self.layers[l];
                layer.weight.grad.add_assign(&dw)?;
                layer.bias.grad.add_assign(&g.sum_rows())?;
            }
            if l == 0 && !input {
                break;
            }
            g = g.matmul_nt(&self.layers[l].weight.value)?;
        }
        Ok(g)
    }

    /// Backward signal at every layer's pre-activation for a scalar-output
    /// network with unit upstream gradient per row: `∂out/∂pre_l`.
    pub fn preactivation_signals(&self, cache: &MlpCache) -> Result<Vec<Matrix>> {
        let n = self.layers.len();
        let rows = cache.inputs[0].rows();
        let mut signals = vec![Matrix::zeros(0, 0); n];
        let mut g = Matrix::filled(rows, self.output_dim(), 1.0);
        for l in (0..n).rev() {
            g = self.through_activation(l, &cache.pre[l], g)?;
            if l > 0 {
                let next = g.matmul_nt(&self.layers[l].weight.value)?;
                signals[l] = std::mem::replace(&mut g, next);
            } else {
                signals[0] = std::mem::replace(&mut g, Matrix::zeros(0, 0));
            }
        }
        Ok(signals)
    }

    /// Directional derivatives of each layer's output along `direction`
    /// (an input-space tangent per row), holding activation slopes fixed.
    /// Entry `l` is the tangent of layer `l`'s output; `tangents[l-1]`
    /// (or `direction` for `l = 0`) is what layer `l` consumes.
    pub fn forward_tangents(&self, cache: &MlpCache, direction: &Matrix) -> Result<Vec<Matrix>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut t = direction.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let tp = t.matmul(&layer.weight.value)?;
            t = self.through_activation(l, &cache.pre[l], tp)?;
            out.push(t.clone());
        }
        Ok(out)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// `(name, param)` pairs, `prefix.l{i}.w` / `prefix.l{i}.b`.
    pub fn named_params<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (String, &'a Param)> {
        self.layers.iter().enumerate().flat_map(move |(i, l)| {
            [
                (format!("{prefix}.l{i}.w"), &l.weight),
                (format!("{prefix}.l{i}.b"), &l.bias),
            ]
        })
    }

    pub fn named_params_mut<'a>(
        &'a mut self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (String, &'a mut Param)> {
        self.layers.iter_mut().enumerate().flat_map(move |(i, l)| {
            [
                (format!("{prefix}.l{i}.w"), &mut l.weight),
                (format!("{prefix}.l{i}.b"), &mut l.bias),
            ]
        })
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Param::zero_grad);
    }

    pub fn grads_are_zero(&self) -> bool {
        self.params().all(|p| p.grad.data().iter().all(|&g| g == 0.0))
    }
}
