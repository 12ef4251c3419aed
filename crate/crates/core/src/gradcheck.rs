//! Central finite-difference checks of every differentiable operation, the
//! network blocks and the training loss.
//!
//! Each case draws seeded inputs (rounded to `f32` so both precisions see the
//! same point), reduces the output to a scalar with a random projection and
//! compares the tape gradient against `(L(x + h) - L(x - h)) / 2h` evaluated
//! in `f64`. The error of one case is
//! `|g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-12)` over the checked elements.

use alloc::{format, string::String, vec::Vec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BceWeights, Tape, Var};
use crate::error::Result;
use crate::loss::{combined_loss, LossConfig};
use crate::network::{UNet3d, UNetConfig};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub precision: Precision,
    /// Number of seeds per case.
    pub seeds: usize,
    pub base_seed: u64,
    /// Elements checked per input tensor; larger tensors are subsampled.
    pub max_elements: usize,
    pub step: f64,
    /// Negates the LeakyReLU adjoint to prove the suite notices.
    #[serde(skip)]
    pub inject_fault: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            seeds: 5,
            base_seed: 0,
            max_elements: 24,
            step: 1e-6,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    pub seed: u64,
    pub rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub precision: Precision,
    pub results: Vec<CaseResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CaseResult::passed)
    }

    /// Largest error per case name, in suite order.
    pub fn worst(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for r in &self.results {
            match out.iter_mut().find(|(n, _)| *n == r.name) {
                Some((_, e)) => *e = e.max(r.rel_err),
                None => out.push((r.name.clone(), r.rel_err)),
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal,
    /// Magnitude in `[0.1, 1.1]`, random sign: keeps kinks out of reach.
    AwayFromZero,
    /// Distinct values at least 0.05 apart, so max-pool never ties.
    Spread,
    /// In `[0.05, 0.95]`.
    Prob,
    Binary,
}

struct Input {
    shape: Vec<usize>,
    init: Init,
    grad: bool,
}

fn input(shape: &[usize], init: Init, grad: bool) -> Input {
    Input {
        shape: shape.to_vec(),
        init,
        grad,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Case {
    Conv3d { kernel: usize, bias: bool },
    MaxPool3d,
    Upsample,
    InstanceNorm,
    LeakyRelu,
    Relu,
    Sigmoid,
    GlobalAvgPool,
    Linear,
    Add,
    Mul,
    Scale,
    MulChannelwise,
    Concat,
    Bce { weighted: bool },
    SoftDice,
    CombinedLoss,
    Chain,
    SeBlock,
    ConvBlock,
    UNet,
}

impl Case {
    pub fn all() -> Vec<Case> {
        use Case::*;
        alloc::vec![
            Conv3d {
                kernel: 3,
                bias: true
            },
            Conv3d {
                kernel: 3,
                bias: false
            },
            Conv3d {
                kernel: 1,
                bias: true
            },
            MaxPool3d,
            Upsample,
            InstanceNorm,
            LeakyRelu,
            Relu,
            Sigmoid,
            GlobalAvgPool,
            Linear,
            Add,
            Mul,
            Scale,
            MulChannelwise,
            Concat,
            Bce { weighted: false },
            Bce { weighted: true },
            SoftDice,
            CombinedLoss,
            Chain,
            SeBlock,
            ConvBlock,
            UNet,
        ]
    }

    pub fn name(&self) -> String {
        match self {
            Case::Conv3d { kernel, bias } => {
                format!("conv3d_k{kernel}{}", if *bias { "" } else { "_nobias" })
            }
            Case::MaxPool3d => "maxpool3d".into(),
            Case::Upsample => "upsample_trilinear".into(),
            Case::InstanceNorm => "instance_norm".into(),
            Case::LeakyRelu => "leaky_relu".into(),
            Case::Relu => "relu".into(),
            Case::Sigmoid => "sigmoid".into(),
            Case::GlobalAvgPool => "global_avg_pool".into(),
            Case::Linear => "linear".into(),
            Case::Add => "add".into(),
            Case::Mul => "mul".into(),
            Case::Scale => "scale".into(),
            Case::MulChannelwise => "mul_channelwise".into(),
            Case::Concat => "concat_channels".into(),
            Case::Bce { weighted } => {
                format!("bce_{}", if *weighted { "weighted" } else { "unit" })
            }
            Case::SoftDice => "soft_dice".into(),
            Case::CombinedLoss => "combined_loss".into(),
            Case::Chain => "conv_norm_act_pool_up_chain".into(),
            Case::SeBlock => "se_block".into(),
            Case::ConvBlock => "conv_block".into(),
            Case::UNet => "unet_2level".into(),
        }
    }

    fn net_config(&self) -> Option<UNetConfig> {
        let base = UNetConfig {
            levels: 2,
            base_channels: 2,
            patch_size: 8,
            ..UNetConfig::desk()
        };
        match self {
            Case::SeBlock => Some(UNetConfig {
                base_channels: 4,
                se_reduction: 2,
                ..base
            }),
            Case::ConvBlock => Some(UNetConfig {
                base_channels: 3,
                se_reduction: 2,
                ..base
            }),
            Case::UNet => Some(base),
            _ => None,
        }
    }

    fn inputs(&self) -> Vec<Input> {
        use Init::*;
        match self {
            Case::Conv3d { kernel: k, bias } => {
                let mut v = alloc::vec![
                    input(&[2, 2, 4, 5, 3], Normal, true),
                    input(&[3, 2, *k, *k, *k], Normal, true)
                ];
                if *bias {
                    v.push(input(&[3], Normal, true));
                }
                v
            }
            Case::MaxPool3d => alloc::vec![input(&[1, 2, 4, 6, 4], Spread, true)],
            Case::Upsample => alloc::vec![input(&[1, 2, 3, 2, 4], Normal, true)],
            Case::InstanceNorm => alloc::vec![
                input(&[2, 3, 3, 3, 4], Normal, true),
                input(&[3], Normal, true),
                input(&[3], Normal, true),
            ],
            Case::LeakyRelu | Case::Relu => {
                alloc::vec![input(&[2, 3, 3, 3, 3], AwayFromZero, true)]
            }
            Case::Sigmoid | Case::Scale => alloc::vec![input(&[2, 3, 3, 3, 3], Normal, true)],
            Case::GlobalAvgPool => alloc::vec![input(&[2, 3, 2, 3, 4], Normal, true)],
            Case::Linear => alloc::vec![
                input(&[2, 4], Normal, true),
                input(&[3, 4], Normal, true),
                input(&[3], Normal, true)
            ],
            Case::Add | Case::Mul => alloc::vec![
                input(&[1, 2, 3, 3, 3], Normal, true),
                input(&[1, 2, 3, 3, 3], Normal, true)
            ],
            Case::MulChannelwise => alloc::vec![
                input(&[2, 3, 2, 2, 3], Normal, true),
                input(&[2, 3], Normal, true)
            ],
            Case::Concat => alloc::vec![
                input(&[1, 2, 2, 3, 2], Normal, true),
                input(&[1, 3, 2, 3, 2], Normal, true)
            ],
            Case::Bce { .. } | Case::SoftDice => alloc::vec![
                input(&[1, 1, 3, 3, 3], Prob, true),
                input(&[1, 1, 3, 3, 3], Binary, false)
            ],
            Case::CombinedLoss => alloc::vec![
                input(&[1, 1, 4, 4, 4], Normal, true),
                input(&[1, 1, 4, 4, 4], Binary, false)
            ],
            Case::Chain => alloc::vec![
                input(&[1, 2, 4, 4, 4], Normal, true),
                input(&[2, 2, 3, 3, 3], Normal, true),
                input(&[2], Normal, true),
                input(&[2], Normal, true),
            ],
            Case::SeBlock | Case::ConvBlock | Case::UNet => {
                unreachable!("network cases draw their inputs from the model")
            }
        }
    }

    /// Builds the case output from its input variables.
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        match self {
            Case::Conv3d { bias, .. } => tape.conv3d(v[0], v[1], bias.then(|| v[2])),
            Case::MaxPool3d => tape.maxpool3d(v[0]),
            Case::Upsample => tape.upsample_trilinear(v[0]),
            Case::InstanceNorm => tape.instance_norm(v[0], v[1], v[2], 1e-5),
            Case::LeakyRelu => Ok(tape.leaky_relu(v[0], 0.01)),
            Case::Relu => Ok(tape.relu(v[0])),
            Case::Sigmoid => Ok(tape.sigmoid(v[0])),
            Case::GlobalAvgPool => tape.global_avg_pool(v[0]),
            Case::Linear => tape.linear(v[0], v[1], Some(v[2])),
            Case::Add => tape.add(v[0], v[1]),
            Case::Mul => tape.mul(v[0], v[1]),
            Case::Scale => Ok(tape.scale(v[0], -1.7)),
            Case::MulChannelwise => tape.mul_channelwise(v[0], v[1]),
            Case::Concat => tape.concat_channels(v[0], v[1]),
            Case::Bce { weighted } => {
                let w = if *weighted {
                    BceWeights::Class {
                        positive: 0.9,
                        negative: 0.1,
                    }
                } else {
                    BceWeights::Unit
                };
                tape.bce(v[0], v[1], w)
            }
            Case::SoftDice => tape.soft_dice(v[0], v[1], 1.0),
            Case::CombinedLoss => {
                let cfg = LossConfig {
                    eps: 1.0,
                    weighted: true,
                    n0: 90,
                    n1: 10,
                };
                Ok(combined_loss(tape, v[0], v[1], &cfg)?.total)
            }
            Case::Chain => {
                let y = tape.conv3d(v[0], v[1], None)?;
                let y = tape.instance_norm(y, v[2], v[3], 1e-5)?;
                let y = tape.leaky_relu(y, 0.01);
                let y = tape.maxpool3d(y)?;
                let y = tape.upsample_trilinear(y)?;
                Ok(tape.sigmoid(y))
            }
            Case::SeBlock | Case::ConvBlock | Case::UNet => {
                let cfg = self.net_config().expect("network case");
                let net = UNet3d::<T>::new(cfg.clone(), 0)?;
                let (x, params) = (v[0], &v[1..]);
                match self {
                    Case::SeBlock => net
                        .encoder_block(0)
                        .se()
                        .expect("se enabled")
                        .forward(tape, params, x),
                    Case::ConvBlock => net.encoder_block(0).forward(tape, params, x, &cfg),
                    _ => net.forward(tape, params, x),
                }
            }
        }
    }
}

fn draw(init: Init, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = match init {
        Init::Normal => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        Init::AwayFromZero => (0..n)
            .map(|_| {
                let m = rng.gen_range(0.1..1.1);
                if rng.gen::<bool>() {
                    m
                } else {
                    -m
                }
            })
            .collect(),
        Init::Spread => {
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            order
                .into_iter()
                .map(|k| k as f64 * 0.05 - 0.025 * n as f64 + rng.gen_range(0.0..0.01))
                .collect()
        }
        Init::Prob => (0..n).map(|_| rng.gen_range(0.05..0.95)).collect(),
        Init::Binary => {
            let mut v: Vec<f64> = (0..n)
                .map(|_| (rng.gen::<f64>() < 0.4) as u8 as f64)
                .collect();
            v[0] = 1.0;
            v
        }
    };
    v.into_iter().map(|x| x as f32 as f64).collect()
}

struct Prepared {
    values: Vec<Tensor<f64>>,
    grad: Vec<bool>,
    projection: Tensor<f64>,
}

fn prepare(case: &Case, seed: u64) -> Result<Prepared> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut values, mut grad) = (Vec::new(), Vec::new());
    if let Some(cfg) = case.net_config() {
        let net = UNet3d::<f64>::new(cfg.clone(), seed)?;
        let p = cfg.patch_size;
        let blk = net.encoder_block(0);
        let x_shape = match case {
            Case::SeBlock => [2, blk.out_channels, 2, 3, 2],
            Case::ConvBlock => [2, blk.in_channels, 4, 3, 5],
            _ => [1, cfg.in_channels, p, p, p],
        };
        let n = x_shape.iter().product();
        values.push(Tensor::from_vec(&x_shape, draw(Init::Normal, n, &mut rng))?);
        grad.push(true);
        let prefix = match case {
            Case::SeBlock => "enc0.se.",
            Case::ConvBlock => "enc0.",
            _ => "",
        };
        for (name, t) in net.params().names().iter().zip(net.params().tensors()) {
            let noise = draw(Init::Normal, t.len(), &mut rng);
            let data = t
                .data()
                .iter()
                .zip(noise)
                .map(|(a, e)| ((a + 0.1 * e) as f32) as f64)
                .collect();
            values.push(Tensor::from_vec(t.shape(), data)?);
            grad.push(name.starts_with(prefix));
        }
    } else {
        for inp in case.inputs() {
            let n = inp.shape.iter().product();
            values.push(Tensor::from_vec(&inp.shape, draw(inp.init, n, &mut rng))?);
            grad.push(inp.grad);
        }
    }
    let out_shape = {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = case.forward(&mut tape, &vars)?;
        tape.value(out).shape().to_vec()
    };
    let n = out_shape.iter().product();
    let projection = Tensor::from_vec(&out_shape, draw(Init::Normal, n, &mut rng))?;
    Ok(Prepared {
        values,
        grad,
        projection,
    })
}

fn projected<T: Scalar>(
    case: &Case,
    tape: &mut Tape<T>,
    vars: &[Var],
    projection: &Tensor<T>,
) -> Result<Var> {
    let out = case.forward(tape, vars)?;
    let r = tape.constant(projection.clone());
    let y = tape.mul(out, r)?;
    Ok(tape.sum(y))
}

fn analytic<T: Scalar>(case: &Case, prep: &Prepared, fault: bool) -> Result<Vec<Option<Vec<f64>>>> {
    let mut tape = Tape::<T>::new();
    tape.inject_sign_fault(fault);
    let vars: Vec<Var> = prep
        .values
        .iter()
        .zip(&prep.grad)
        .map(|(t, g)| tape.leaf(t.cast(), *g))
        .collect();
    let loss = projected(case, &mut tape, &vars, &prep.projection.cast())?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(&prep.grad)
        .zip(&prep.values)
        .map(|((v, g), t)| {
            g.then(|| match tape.grad(*v) {
                Some(d) => d.iter().map(|x| x.as_f64()).collect(),
                None => alloc::vec![0.0; t.len()],
            })
        })
        .collect())
}

fn loss_at(case: &Case, prep: &Prepared, values: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
    let l = projected(case, &mut tape, &vars, &prep.projection)?;
    Ok(tape.value(l).data()[0])
}

/// Runs one case at one seed.
pub fn check_case(case: &Case, seed: u64, cfg: &GradcheckConfig) -> Result<CaseResult> {
    let prep = prepare(case, seed)?;
    let grads = match cfg.precision {
        Precision::F32 => analytic::<f32>(case, &prep, cfg.inject_fault)?,
        Precision::F64 => analytic::<f64>(case, &prep, cfg.inject_fault)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1B5_4A32_D192_ED03);
    let mut values = prep.values.clone();
    let (mut diff2, mut a2, mut n2, mut checked) = (0.0, 0.0, 0.0, 0);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let len = values[i].len();
        let mut idx: Vec<usize> = (0..len).collect();
        if len > cfg.max_elements {
            for k in 0..cfg.max_elements {
                idx.swap(k, rng.gen_range(k..len));
            }
            idx.truncate(cfg.max_elements);
        }
        for j in idx {
            let x0 = values[i].data()[j];
            values[i].data_mut()[j] = x0 + cfg.step;
            let up = loss_at(case, &prep, &values)?;
            values[i].data_mut()[j] = x0 - cfg.step;
            let down = loss_at(case, &prep, &values)?;
            values[i].data_mut()[j] = x0;
            let num = (up - down) / (2.0 * cfg.step);
            diff2 += (g[j] - num) * (g[j] - num);
            a2 += g[j] * g[j];
            n2 += num * num;
            checked += 1;
        }
    }
    let denom = libm::sqrt(a2).max(libm::sqrt(n2)).max(1e-12);
    Ok(CaseResult {
        name: case.name(),
        seed,
        rel_err: libm::sqrt(diff2) / denom,
        tolerance: cfg.precision.tolerance(),
        checked,
    })
}

/// Every case at `cfg.seeds` seeds.
pub fn run_suite(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut results = Vec::new();
    for case in Case::all() {
        for s in 0..cfg.seeds as u64 {
            results.push(check_case(&case, cfg.base_seed.wrapping_add(s), cfg)?);
        }
    }
    Ok(GradcheckReport {
        precision: cfg.precision,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_cases_pass_in_both_precisions() {
        for precision in [Precision::F32, Precision::F64] {
            let cfg = GradcheckConfig {
                precision,
                ..Default::default()
            };
            for case in [Case::LeakyRelu, Case::Sigmoid, Case::Linear, Case::SoftDice] {
                let r = check_case(&case, 3, &cfg).unwrap();
                assert!(r.passed(), "{:?}", r);
                assert!(r.checked > 0);
            }
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let cfg = GradcheckConfig {
            inject_fault: true,
            ..Default::default()
        };
        let r = check_case(&Case::LeakyRelu, 0, &cfg).unwrap();
        assert!(!r.passed());
        assert!(r.rel_err > 0.5);
    }

    #[test]
    fn worst_groups_by_name() {
        let mk = |name: &str, e| CaseResult {
            name: name.into(),
            seed: 0,
            rel_err: e,
            tolerance: 1.0,
            checked: 1,
        };
        let rep = GradcheckReport {
            precision: Precision::F64,
            results: alloc::vec![mk("a", 0.1), mk("b", 0.2), mk("a", 0.3)],
        };
        assert_eq!(
            rep.worst(),
            alloc::vec![("a".into(), 0.3), ("b".into(), 0.2)]
        );
    }
}
