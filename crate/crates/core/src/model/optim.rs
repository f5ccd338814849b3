use serde::{Deserialize, Serialize};

use super::ToyModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Moment estimates carried between Adam steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub step: u64,
    pub m: ToyModelParams,
    pub v: ToyModelParams,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Optimizer {
    Sgd,
    Adam(AdamMoments),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ToyModelParams) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => Self::Adam(AdamMoments {
                step: 0,
                m: params.zeros_like(),
                v: params.zeros_like(),
            }),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Self::Sgd => OptimizerKind::Sgd,
            Self::Adam(_) => OptimizerKind::Adam,
        }
    }

    /// Applies one descent step. A zero learning rate leaves `params` untouched.
    pub fn step(&mut self, params: &mut ToyModelParams, grad: &ToyModelParams, lr: f64) {
        match self {
            Self::Sgd => {
                if lr != 0.0 {
                    params.add_scaled(grad, -lr);
                }
            }
            Self::Adam(state) => {
                state.step += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
                let tensors = params
                    .tensors_mut()
                    .into_iter()
                    .zip(grad.tensors())
                    .zip(state.m.tensors_mut())
                    .zip(state.v.tensors_mut());
                for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in tensors {
                    ndarray::Zip::from(&mut p)
                        .and(&g)
                        .and(&mut m)
                        .and(&mut v)
                        .for_each(|p, &g, m, v| {
                            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                            if lr != 0.0 {
                                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPSILON);
                            }
                        });
                }
            }
        }
    }
}
