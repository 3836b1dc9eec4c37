use rand::Rng;
use serde::{Deserialize, Serialize};
use unas_autodiff::{Array, Tape, Var};

use crate::error::{Error, Result};

/// Shape-preserving operations on `[batch, d]` features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Zero,
    Identity,
    /// `tanh(x W + b)`.
    LinearTanh,
    /// `d -> ceil(d/2) -> d` with a tanh in between.
    Bottleneck,
    /// `x * s + b`.
    ScaleShift,
    /// `d -> 4d -> d` with relu; the high-capacity op.
    WideMlp,
    /// Residual block `x + relu(x W1 + b1) W2` of hidden width
    /// `expansion * d`.
    Residual {
        expansion: usize,
    },
}

impl OpKind {
    /// Maps an op label to its implementation. Labels `mbE_kK` of the mobile
    /// space become residual blocks of expansion `E`; the kernel size is only
    /// a label here. `skip` is the identity.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "zero" | "none" => Self::Zero,
            "identity" | "skip" | "skip_connect" => Self::Identity,
            "linear_tanh" => Self::LinearTanh,
            "bottleneck" => Self::Bottleneck,
            "scale_shift" => Self::ScaleShift,
            "wide_mlp" => Self::WideMlp,
            other => {
                let expansion = other
                    .strip_prefix("mb")
                    .and_then(|r| r.split('_').next())
                    .and_then(|e| e.parse().ok())
                    .filter(|&e: &usize| e > 0)
                    .ok_or_else(|| Error::Config(format!("unknown operation `{other}`")))?;
                Self::Residual { expansion }
            }
        })
    }

    /// Shapes of the weight arrays.
    pub fn param_shapes(self, d: usize) -> Vec<Vec<usize>> {
        match self {
            Self::Zero | Self::Identity => vec![],
            Self::LinearTanh => vec![vec![d, d], vec![d]],
            Self::Bottleneck => {
                let h = d.div_ceil(2);
                vec![vec![d, h], vec![h], vec![h, d], vec![d]]
            }
            Self::ScaleShift => vec![vec![d], vec![d]],
            Self::WideMlp => vec![vec![d, 4 * d], vec![4 * d], vec![4 * d, d], vec![d]],
            Self::Residual { expansion } => {
                let h = expansion * d;
                vec![vec![d, h], vec![h], vec![h, d]]
            }
        }
    }

    /// Matrices get `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; biases start at 0
    /// and scales at 1.
    pub fn init<R: Rng + ?Sized>(self, d: usize, rng: &mut R) -> Vec<Array> {
        let mut out: Vec<Array> = self
            .param_shapes(d)
            .into_iter()
            .map(|shape| match shape.as_slice() {
                [fan_in, fan_out] => {
                    let bound = 1.0 / (*fan_in as f64).sqrt();
                    let data = (0..fan_in * fan_out)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect();
                    Array::matrix(*fan_in, *fan_out, data)
                }
                _ => Array::zeros(&shape),
            })
            .collect();
        if self == Self::ScaleShift {
            out[0] = Array::full(&[d], 1.0);
        }
        out
    }

    pub fn apply(self, tape: &mut Tape, x: Var, w: &[Var]) -> Result<Var> {
        Ok(match self {
            Self::Zero => tape.constant(Array::zeros(tape.value(x).shape())),
            Self::Identity => x,
            Self::LinearTanh => {
                let h = tape.matmul(x, w[0])?;
                let h = tape.add_row(h, w[1])?;
                tape.tanh(h)
            }
            Self::Bottleneck => {
                let h = tape.matmul(x, w[0])?;
                let h = tape.add_row(h, w[1])?;
                let h = tape.tanh(h);
                let o = tape.matmul(h, w[2])?;
                tape.add_row(o, w[3])?
            }
            Self::ScaleShift => {
                let h = tape.mul_row(x, w[0])?;
                tape.add_row(h, w[1])?
            }
            Self::WideMlp => {
                let h = tape.matmul(x, w[0])?;
                let h = tape.add_row(h, w[1])?;
                let h = tape.relu(h);
                let o = tape.matmul(h, w[2])?;
                tape.add_row(o, w[3])?
            }
            Self::Residual { .. } => {
                let h = tape.matmul(x, w[0])?;
                let h = tape.add_row(h, w[1])?;
                let h = tape.relu(h);
                let o = tape.matmul(h, w[2])?;
                tape.add(x, o)?
            }
        })
    }
}
