use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{AttnRecord, ModelError, Param, ParamRole};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Parameter initialization schemes.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// Uniform in ±sqrt(6 / fan_in).
    KaimingUniform { fan_in: usize },
    /// Normal, std 0.02, redrawn beyond two standard deviations.
    TruncNormal,
    Zeros,
    Ones,
}

pub(crate) enum Mode<'m, S> {
    /// Creates parameters as they are first requested.
    Init { rng: ChaCha8Rng, params: Vec<Param<S>> },
    /// Reads parameters from an existing model.
    Run { params: &'m [Param<S>], trainable: bool },
}

/// Forward-pass context shared by every architecture: parameter access,
/// layer bookkeeping and XAI hook capture.
pub(crate) struct Ctx<'g, 'm, S: Scalar> {
    pub g: &'g mut Graph<S>,
    pub mode: Mode<'m, S>,
    pub layers: Vec<String>,
    pub hook: Option<(String, Var)>,
    pub attention: Vec<AttnRecord>,
    run_index: usize,
}

impl<'g, 'm, S: Scalar> Ctx<'g, 'm, S> {
    pub fn new(g: &'g mut Graph<S>, mode: Mode<'m, S>) -> Self {
        Self {
            g,
            mode,
            layers: Vec::new(),
            hook: None,
            attention: Vec::new(),
            run_index: 0,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, role: ParamRole) -> Result<Var, ModelError> {
        let (value, requires_grad) = match &mut self.mode {
            Mode::Init { rng, params } => {
                let value = sample(rng, shape, init);
                params.push(Param {
                    name: name.to_string(),
                    role,
                    value: value.clone(),
                });
                (value, false)
            }
            Mode::Run { params, trainable } => {
                // parameters are requested in creation order, so the cursor
                // normally hits; fall back to a search otherwise
                let p = match params.get(self.run_index) {
                    Some(p) if p.name == name => p,
                    _ => params
                        .iter()
                        .find(|p| p.name == name)
                        .ok_or_else(|| ModelError::MissingParam(name.to_string()))?,
                };
                self.run_index += 1;
                if p.value.shape() != shape {
                    return Err(ModelError::ParamShape {
                        name: name.to_string(),
                        expected: shape.to_vec(),
                        got: p.value.shape().to_vec(),
                    });
                }
                (p.value.clone(), *trainable && role != ParamRole::Buffer)
            }
        };
        Ok(self.g.named_leaf(name, value, requires_grad))
    }

    pub fn layer(&mut self, name: impl Into<String>) {
        self.layers.push(name.into());
    }

    pub fn set_hook(&mut self, name: &str, v: Var) {
        self.layers.push(format!("{name} [hook]"));
        self.hook = Some((name.to_string(), v));
    }
}

fn sample<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = match init {
        Init::KaimingUniform { fan_in } => {
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| S::narrow(rng.gen_range(-bound..bound))).collect()
        }
        Init::TruncNormal => (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break S::narrow(0.02 * z);
                }
            })
            .collect(),
        Init::Zeros => vec![S::zero(); n],
        Init::Ones => vec![S::one(); n],
    };
    Tensor::new(shape.to_vec(), data).expect("parameter shape")
}
