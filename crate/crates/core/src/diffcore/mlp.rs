//! Fully-connected networks with exact forward-mode and reverse-mode derivatives.

use rand::Rng;
use rand_distr::StandardNormal;

use super::graph::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::stream;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Largest dense Jacobian [`Mlp::full_jacobian`] will assemble.
pub const MAX_JACOBIAN_ENTRIES: usize = 10_000_000;

/// Hidden-layer nonlinearity. The output layer is always affine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => super::graph::softplus(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `p` and output `a`.
    fn derivative(self, p: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Softplus => super::graph::sigmoid(p),
            Activation::Identity => 1.0,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Softplus => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Softplus),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "softplus" => Some(Activation::Softplus),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    activation: Activation,
}

/// Per-layer parameter gradients, ordered like [`Mlp::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl MlpGrads {
    pub fn into_flat(self) -> Vec<Tensor> {
        self.weights.into_iter().zip(self.biases).flat_map(|(w, b)| [w, b]).collect()
    }
}

/// Graph handles for an MLP's parameters.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl MlpVars {
    pub fn flat(&self) -> Vec<Var> {
        self.weights.iter().zip(&self.biases).flat_map(|(&w, &b)| [w, b]).collect()
    }
}

/// Intermediate graph values of a forward pass.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    pub pre: Vec<Var>,
    pub post: Vec<Var>,
    pub output: Var,
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Config(format!("an MLP needs at least 2 layer sizes, got {dims:?}")));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("zero-width layer in {dims:?}")));
    }
    Ok(())
}

impl Mlp {
    /// Gaussian weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn init(seed: u64, dims: &[usize], activation: Activation) -> Result<Self> {
        check_dims(dims)?;
        let mut rng = stream(seed, "mlp-init");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            weights.push(Tensor::matrix(fan_out, fan_in, data)?);
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self { dims: dims.to_vec(), weights, biases, activation })
    }

    pub fn from_parts(weights: Vec<Tensor>, biases: Vec<Tensor>, activation: Activation) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Config("weights and biases must be nonempty and paired".into()));
        }
        let mut dims = vec![weights[0].cols()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.shape().len() != 2 || w.cols() != *dims.last().unwrap() {
                return shape_err(format!("layer weight {:?} does not follow width {}", w.shape(), dims.last().unwrap()));
            }
            if b.len() != w.rows() {
                return shape_err(format!("bias of length {} for weight {:?}", b.len(), w.shape()));
            }
            dims.push(w.rows());
        }
        let biases = biases.into_iter().map(|b| Tensor::vector(b.into_data())).collect();
        Ok(Self { dims, weights, biases, activation })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    /// Parameters in `[w0, b0, w1, b1, ..]` order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    /// Multiplies the final layer by `c`, scaling the whole map by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        let last = out.weights.len() - 1;
        out.weights[last] = out.weights[last].scale(c);
        out.biases[last] = out.biases[last].scale(c);
        out
    }

    fn check_input(&self, x: &Tensor, what: &str) -> Result<()> {
        if x.cols() != self.input_dim() {
            return shape_err(format!("{what}: input width {} but network expects {}", x.cols(), self.input_dim()));
        }
        Ok(())
    }

    fn is_hidden(&self, layer: usize) -> bool {
        layer + 1 < self.weights.len()
    }

    fn affine(&self, layer: usize, x: &[f64], rows: usize) -> Vec<f64> {
        let w = &self.weights[layer];
        let (o, k) = (w.rows(), w.cols());
        let mut out = vec![0.0; rows * o];
        matmul_nt(x, w.data(), &mut out, rows, k, o);
        let b = self.biases[layer].data();
        for row in out.chunks_mut(o) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        out
    }

    /// Forward pass keeping `(pre-activation, output)` for every layer.
    fn forward_cache(&self, x: &Tensor) -> Vec<(Vec<f64>, Vec<f64>)> {
        let rows = x.rows();
        let mut cache: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(self.weights.len());
        for layer in 0..self.weights.len() {
            let input = cache.last().map(|c| c.1.as_slice()).unwrap_or(x.data());
            let pre = self.affine(layer, input, rows);
            let post = if self.is_hidden(layer) {
                pre.iter().map(|&p| self.activation.apply(p)).collect()
            } else {
                pre.clone()
            };
            cache.push((pre, post));
        }
        cache
    }

    fn output_tensor(&self, like: &Tensor, data: Vec<f64>, width: usize) -> Tensor {
        if like.shape().len() == 1 {
            Tensor::vector(data)
        } else {
            Tensor::matrix(like.rows(), width, data).expect("row count preserved")
        }
    }

    /// Evaluates the network on a vector or on each row of a matrix.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x, "forward")?;
        let rows = x.rows();
        let mut cur = x.data().to_vec();
        for layer in 0..self.weights.len() {
            cur = self.affine(layer, &cur, rows);
            if self.is_hidden(layer) {
                cur.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        Ok(self.output_tensor(x, cur, self.output_dim()))
    }

    /// Forward-mode directional derivative `J(x) v`, row by row.
    pub fn jvp(&self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        self.check_input(x, "jvp")?;
        x.check_same_shape(v, "jvp tangent")?;
        let rows = x.rows();
        let mut primal = x.data().to_vec();
        let mut tangent = v.data().to_vec();
        for layer in 0..self.weights.len() {
            let w = &self.weights[layer];
            let (o, k) = (w.rows(), w.cols());
            let pre = self.affine(layer, &primal, rows);
            let mut tpre = vec![0.0; rows * o];
            matmul_nt(&tangent, w.data(), &mut tpre, rows, k, o);
            if self.is_hidden(layer) {
                let post: Vec<f64> = pre.iter().map(|&p| self.activation.apply(p)).collect();
                for ((t, &p), &a) in tpre.iter_mut().zip(&pre).zip(&post) {
                    *t *= self.activation.derivative(p, a);
                }
                primal = post;
            } else {
                primal = pre;
            }
            tangent = tpre;
        }
        Ok(self.output_tensor(x, tangent, self.output_dim()))
    }

    /// Reverse-mode product `J(x)^T u`, row by row.
    pub fn vjp(&self, x: &Tensor, u: &Tensor) -> Result<Tensor> {
        self.check_input(x, "vjp")?;
        if u.rows() != x.rows() || u.cols() != self.output_dim() {
            return shape_err(format!("vjp: cotangent {:?} for input {:?}", u.shape(), x.shape()));
        }
        let (delta, _) = self.backprop(x, u, false);
        Ok(self.output_tensor(x, delta, self.input_dim()))
    }

    /// Returns the input cotangent and, optionally, parameter gradients.
    fn backprop(&self, x: &Tensor, u: &Tensor, want_params: bool) -> (Vec<f64>, Option<MlpGrads>) {
        let rows = x.rows();
        let cache = self.forward_cache(x);
        let mut delta = u.data().to_vec();
        let mut gw = Vec::new();
        let mut gb = Vec::new();
        for layer in (0..self.weights.len()).rev() {
            let w = &self.weights[layer];
            let (o, k) = (w.rows(), w.cols());
            if self.is_hidden(layer) {
                let (pre, post) = &cache[layer];
                for ((d, &p), &a) in delta.iter_mut().zip(pre).zip(post) {
                    *d *= self.activation.derivative(p, a);
                }
            }
            if want_params {
                let input = if layer == 0 { x.data() } else { cache[layer - 1].1.as_slice() };
                let mut g = vec![0.0; o * k];
                matmul_tn(&delta, input, &mut g, rows, o, k);
                gw.push(Tensor::matrix(o, k, g).unwrap());
                let mut b = vec![0.0; o];
                for row in delta.chunks(o) {
                    for (s, d) in b.iter_mut().zip(row) {
                        *s += d;
                    }
                }
                gb.push(Tensor::vector(b));
            }
            let mut next = vec![0.0; rows * k];
            matmul_nn(&delta, w.data(), &mut next, rows, o, k);
            delta = next;
        }
        let grads = want_params.then(|| {
            gw.reverse();
            gb.reverse();
            MlpGrads { weights: gw, biases: gb }
        });
        (delta, grads)
    }

    /// Dense `d_out x d_in` Jacobian at a single point, assembled from JVPs
    /// against the standard basis.
    pub fn full_jacobian(&self, x: &[f64]) -> Result<Tensor> {
        let (din, dout) = (self.input_dim(), self.output_dim());
        if din * dout > MAX_JACOBIAN_ENTRIES {
            return Err(Error::Capacity(format!("{dout}x{din} Jacobian exceeds {MAX_JACOBIAN_ENTRIES} entries")));
        }
        if x.len() != din {
            return shape_err(format!("full_jacobian: point of length {} for input width {din}", x.len()));
        }
        let xs = Tensor::matrix(din, din, (0..din).flat_map(|_| x.iter().copied()).collect())?;
        let cols = self.jvp(&xs, &Tensor::identity(din))?;
        Ok(cols.transpose())
    }

    /// Exact gradients of `<upstream, forward(x)>` with respect to every parameter.
    pub fn param_grads(&self, x: &Tensor, upstream: &Tensor) -> Result<MlpGrads> {
        self.check_input(x, "param_grads")?;
        if upstream.rows() != x.rows() || upstream.cols() != self.output_dim() {
            return shape_err(format!("param_grads: upstream {:?} for input {:?}", upstream.shape(), x.shape()));
        }
        Ok(self.backprop(x, upstream, true).1.expect("requested"))
    }

    /// Registers the parameters as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> MlpVars {
        let weights = self.weights.iter().map(|w| g.param(w.clone())).collect();
        let biases = self
            .biases
            .iter()
            .map(|b| g.param(b.clone().reshape(vec![1, b.len()]).unwrap()))
            .collect();
        MlpVars { weights, biases }
    }

    /// Registers the parameters as constants (no gradient).
    pub fn bind_frozen(&self, g: &mut Graph) -> MlpVars {
        let weights = self.weights.iter().map(|w| g.constant(w.clone())).collect();
        let biases = self
            .biases
            .iter()
            .map(|b| g.constant(b.clone().reshape(vec![1, b.len()]).unwrap()))
            .collect();
        MlpVars { weights, biases }
    }

    pub fn forward_graph(&self, g: &mut Graph, vars: &MlpVars, x: Var) -> Result<MlpTrace> {
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let mut cur = x;
        for layer in 0..self.weights.len() {
            let lin = g.matmul_nt(cur, vars.weights[layer])?;
            let p = g.add_row(lin, vars.biases[layer])?;
            let a = if self.is_hidden(layer) {
                match self.activation {
                    Activation::Tanh => g.tanh(p),
                    Activation::Softplus => g.softplus(p),
                    Activation::Identity => p,
                }
            } else {
                p
            };
            pre.push(p);
            post.push(a);
            cur = a;
        }
        Ok(MlpTrace { pre, post, output: cur })
    }

    /// Activation derivatives at each hidden layer, as graph values.
    /// `None` marks layers whose derivative is identically one.
    pub fn derivative_factors(&self, g: &mut Graph, trace: &MlpTrace) -> Vec<Option<Var>> {
        (0..self.weights.len())
            .map(|layer| {
                if !self.is_hidden(layer) {
                    return None;
                }
                match self.activation {
                    Activation::Tanh => {
                        let a = trace.post[layer];
                        let sq = g.mul(a, a).expect("same shape");
                        Some(g.affine(sq, -1.0, 1.0))
                    }
                    Activation::Softplus => Some(g.sigmoid(trace.pre[layer])),
                    Activation::Identity => None,
                }
            })
            .collect()
    }

    /// Tangent pass recorded on the graph, so it can itself be differentiated.
    /// `factors` must have one row per tangent row.
    pub fn jvp_graph(&self, g: &mut Graph, vars: &MlpVars, factors: &[Option<Var>], tangent: Var) -> Result<Var> {
        let mut cur = tangent;
        for layer in 0..self.weights.len() {
            cur = g.matmul_nt(cur, vars.weights[layer])?;
            if let Some(f) = factors[layer] {
                cur = g.mul(cur, f)?;
            }
        }
        Ok(cur)
    }

    /// Adjoint pass recorded on the graph.
    pub fn vjp_graph(&self, g: &mut Graph, vars: &MlpVars, factors: &[Option<Var>], cotangent: Var) -> Result<Var> {
        let mut cur = cotangent;
        for layer in (0..self.weights.len()).rev() {
            if let Some(f) = factors[layer] {
                cur = g.mul(cur, f)?;
            }
            cur = g.matmul(cur, vars.weights[layer])?;
        }
        Ok(cur)
    }

    /// Collects parameter gradients, in [`Self::params`] order.
    pub fn collect_grads(&self, grads: &super::graph::Gradients, vars: &MlpVars) -> MlpGrads {
        let weights = self.weights.iter().zip(&vars.weights).map(|(w, &v)| grads.wrt(v, w)).collect();
        let biases = self
            .biases
            .iter()
            .zip(&vars.biases)
            .map(|(b, &v)| {
                let t = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&[1, b.len()]));
                Tensor::vector(t.into_data())
            })
            .collect();
        MlpGrads { weights, biases }
    }
}
