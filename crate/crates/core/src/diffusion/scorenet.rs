use rand::Rng;

use super::schedule::{time_features, NoiseSchedule};
use crate::diffcore::{Activation, Graph, Mlp, MlpTrace, MlpVars, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Noise prediction together with the bottleneck features that produced it.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub eps: Tensor,
    pub features: Option<Tensor>,
}

/// Anything that predicts the noise in `x_t` at timestep `t`.
pub trait EpsPredictor {
    fn data_dim(&self) -> usize;

    /// `x` holds one latent per row; all rows share timestep `t`.
    fn predict(&self, x: &Tensor, t: usize) -> Result<Prediction>;
}

/// Encoder/decoder noise predictor. The encoder output is the semantic
/// feature `h_t`; both halves see the time features concatenated to their
/// input.
///
/// With the prior skip enabled the prediction is
/// `sqrt(1 - ab_t) x_t + decoder(h_t, t)`: the first term is the exact noise
/// posterior mean for standardized Gaussian data, so the decoder only has to
/// model the departure from it through the bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet {
    pub encoder: Mlp,
    pub decoder: Mlp,
    time_dim: usize,
    horizon: usize,
    /// `sqrt(1 - ab_t)` indexed by timestep.
    skip: Option<Vec<f64>>,
}

/// Graph handles for one [`ScoreNet`] forward pass.
pub struct ScoreNetGraph {
    pub enc_vars: MlpVars,
    pub dec_vars: MlpVars,
    pub enc_trace: MlpTrace,
    pub dec_trace: MlpTrace,
    eps: Var,
}

impl ScoreNetGraph {
    pub fn features(&self) -> Var {
        self.enc_trace.output
    }

    pub fn eps(&self) -> Var {
        self.eps
    }
}

/// Architecture of a [`ScoreNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNetSpec {
    pub data_dim: usize,
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub horizon: usize,
    pub activation: Activation,
}

impl ScoreNet {
    pub fn init(seed: u64, spec: &ScoreNetSpec) -> Result<Self> {
        if spec.feature_dim >= spec.data_dim {
            return Err(Error::Config(format!(
                "feature dimension {} must be below data dimension {}",
                spec.feature_dim, spec.data_dim
            )));
        }
        time_features(0, spec.horizon.max(1), spec.time_dim)?;
        let mut enc_dims = vec![spec.data_dim + spec.time_dim];
        enc_dims.extend(&spec.hidden);
        enc_dims.push(spec.feature_dim);
        let mut dec_dims = vec![spec.feature_dim + spec.time_dim];
        dec_dims.extend(&spec.hidden);
        dec_dims.push(spec.data_dim);
        let mut rng = stream(seed, "scorenet");
        let encoder = Mlp::init(rng.gen(), &enc_dims, spec.activation)?;
        let decoder = Mlp::init(rng.gen(), &dec_dims, spec.activation)?;
        Ok(Self { encoder, decoder, time_dim: spec.time_dim, horizon: spec.horizon, skip: None })
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp, time_dim: usize, horizon: usize) -> Result<Self> {
        if encoder.input_dim() <= time_dim || decoder.input_dim() != encoder.output_dim() + time_dim {
            return shape_err(format!(
                "encoder {:?} and decoder {:?} do not fit time dimension {time_dim}",
                encoder.dims(),
                decoder.dims()
            ));
        }
        if decoder.output_dim() != encoder.input_dim() - time_dim {
            return shape_err("decoder output must match the data dimension");
        }
        Ok(Self { encoder, decoder, time_dim, horizon, skip: None })
    }

    /// Enables the prior skip term using the noise levels of `sched`.
    pub fn with_prior_skip(mut self, sched: &NoiseSchedule) -> Result<Self> {
        if sched.steps() != self.horizon {
            return Err(Error::Config(format!("schedule has {} steps, network expects {}", sched.steps(), self.horizon)));
        }
        self.skip = Some((0..=self.horizon).map(|t| (1.0 - sched.alpha_bar(t)).sqrt()).collect());
        Ok(self)
    }

    pub fn prior_skip(&self) -> bool {
        self.skip.is_some()
    }

    fn skip_term(&self, x: &Tensor, ts: &[usize]) -> Option<Tensor> {
        let c = self.skip.as_ref()?;
        let mut out = x.as_matrix();
        for (i, &t) in ts.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= c[t]);
        }
        Some(out)
    }

    pub fn time_dim(&self) -> usize {
        self.time_dim
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    /// Time feature block for each row.
    pub fn time_block(&self, ts: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ts.len() * self.time_dim);
        for &t in ts {
            data.extend(time_features(t, self.horizon, self.time_dim)?);
        }
        Tensor::matrix(ts.len(), self.time_dim, data)
    }

    /// Encoder input `[x_t, features(t)]` for each row.
    pub fn encoder_input(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        if x.cols() != self.data_dim() || x.rows() != ts.len() {
            return shape_err(format!("encoder input {:?} with {} timesteps", x.shape(), ts.len()));
        }
        x.as_matrix().concat_cols(&self.time_block(ts)?)
    }

    /// Semantic features `h` for rows with per-row timesteps.
    pub fn features(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.encoder.forward(&self.encoder_input(x, ts)?)
    }

    pub fn predict_rows(&self, x: &Tensor, ts: &[usize]) -> Result<Prediction> {
        let tb = self.time_block(ts)?;
        let h = self.encoder.forward(&x.as_matrix().concat_cols(&tb)?)?;
        let mut eps = self.decoder.forward(&h.concat_cols(&tb)?)?;
        if let Some(s) = self.skip_term(x, ts) {
            eps.add_assign(&s);
        }
        Ok(Prediction { eps, features: Some(h) })
    }

    /// Records a forward pass with trainable parameters.
    pub fn forward_graph(&self, g: &mut Graph, x: &Tensor, ts: &[usize]) -> Result<ScoreNetGraph> {
        let enc_vars = self.encoder.bind(g);
        let dec_vars = self.decoder.bind(g);
        let tb = self.time_block(ts)?;
        let input = g.constant(x.as_matrix().concat_cols(&tb)?);
        let enc_trace = self.encoder.forward_graph(g, &enc_vars, input)?;
        let tbv = g.constant(tb);
        let dec_in = g.concat_cols(enc_trace.output, tbv)?;
        let dec_trace = self.decoder.forward_graph(g, &dec_vars, dec_in)?;
        let eps = match self.skip_term(x, ts) {
            Some(s) => {
                let s = g.constant(s);
                g.add(dec_trace.output, s)?
            }
            None => dec_trace.output,
        };
        Ok(ScoreNetGraph { enc_vars, dec_vars, enc_trace, dec_trace, eps })
    }
}

impl EpsPredictor for ScoreNet {
    fn data_dim(&self) -> usize {
        self.encoder.input_dim() - self.time_dim
    }

    fn predict(&self, x: &Tensor, t: usize) -> Result<Prediction> {
        let ts = vec![t; x.rows()];
        let mut p = self.predict_rows(x, &ts)?;
        if x.shape().len() == 1 {
            p.eps = Tensor::vector(p.eps.into_data());
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec() -> ScoreNetSpec {
        ScoreNetSpec {
            data_dim: 6,
            feature_dim: 3,
            hidden: vec![8],
            time_dim: 4,
            horizon: 100,
            activation: Activation::Tanh,
        }
    }

    #[test]
    fn bottleneck_must_be_narrower() {
        let mut spec = small_spec();
        spec.feature_dim = 6;
        assert!(ScoreNet::init(0, &spec).is_err());
    }

    #[test]
    fn graph_forward_matches_value_forward() {
        let net = ScoreNet::init(3, &small_spec()).unwrap();
        let x = Tensor::matrix(2, 6, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        let ts = [10, 90];
        let want = net.predict_rows(&x, &ts).unwrap();
        let mut g = Graph::new();
        let sg = net.forward_graph(&mut g, &x, &ts).unwrap();
        assert_eq!(g.value(sg.eps()), &want.eps);
        assert_eq!(g.value(sg.features()), want.features.as_ref().unwrap());
        assert_eq!(net.params().len(), 8);
    }

    #[test]
    fn prior_skip_adds_scaled_input() {
        let sched = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
        let plain = ScoreNet::init(3, &small_spec()).unwrap();
        let net = plain.clone().with_prior_skip(&sched).unwrap();
        let x = Tensor::matrix(2, 6, (0..12).map(|i| i as f64 * 0.2 - 1.0).collect()).unwrap();
        let ts = [7, 100];
        let a = plain.predict_rows(&x, &ts).unwrap().eps;
        let b = net.predict_rows(&x, &ts).unwrap().eps;
        for (i, &t) in ts.iter().enumerate() {
            let c = (1.0 - sched.alpha_bar(t)).sqrt();
            for j in 0..6 {
                assert!((b.at(i, j) - a.at(i, j) - c * x.at(i, j)).abs() < 1e-14);
            }
        }
        let mut g = Graph::new();
        let sg = net.forward_graph(&mut g, &x, &ts).unwrap();
        assert_eq!(g.value(sg.eps()), &b);
        assert!(plain.with_prior_skip(&NoiseSchedule::linear(50, 1e-3, 0.05).unwrap()).is_err());
    }
}
