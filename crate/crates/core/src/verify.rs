//! Self-check suites run by `mdsvm verify`.
//!
//! * `gradcheck`: finite-difference checks of every differentiable op and of
//!   the composed blocks.
//! * `oracle`: scan, snake and surface-distance kernels against brute-force
//!   reference implementations.
//! * `pipeline`: block extraction and merge invariants on random cases.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Combine, Conv3dOptions, CustomOp, Graph, Norm, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{
    check_gradients, check_store_gradients, random_projection, random_tensor, GradCheckConfig, GradCheckResult,
};
use crate::losses::{dice_loss, focal_loss, DEFAULT_SMOOTH, FOCAL_ALPHA, FOCAL_GAMMA};
use crate::metrics::{directed_exhaustive, extract_surface, surface_distances, DistanceMethod};
use crate::network::{Network, NetworkConfig};
use crate::params::ParamStore;
use crate::pipeline::blocks::{extract_blocks, merge_blocks, BlockIndex};
use crate::pipeline::infer::{two_stage_infer, InferConfig, Segmenter};
use crate::snake::{cumulate_offsets, predict_offsets, snake_conv_axis, Axis, MdsConvBlock, SnakeKernelSpec};
use crate::ssm::{RvmLayer, ScanStrategy, VssmBlock};
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, Volume};

/// Relative-error bound for single ops and blocks.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for the end-to-end toy network.
pub const NETWORK_TOLERANCE: f64 = 1e-3;
/// Largest tolerated share of coordinates whose step straddles a kink.
pub const MAX_KINK_FRACTION: f64 = 0.1;

pub const SUITES: [&str; 3] = ["gradcheck", "oracle", "pipeline"];

/// Deliberate bugs used to show that the suites catch them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Negates the Dice-loss gradient.
    DiceSignFlip,
}

/// One line of a verification table.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(suite: &'static str, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            suite,
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

pub fn format_table(checks: &[Check]) -> String {
    let mut s = String::new();
    for c in checks {
        let mark = if c.passed { "PASS" } else { "FAIL" };
        s.push_str(&format!("{mark}\t{}\t{}\t{}\n", c.suite, c.name, c.detail));
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    s.push_str(&format!("{} checks, {} failed\n", checks.len(), failed));
    s
}

/// Runs one named suite (or `all`).
pub fn run_suite(name: &str, seeds: u64, fault: Fault) -> Result<Vec<Check>> {
    match name {
        "gradcheck" => Ok(gradient_suite(seeds, fault)?
            .iter()
            .map(GradSummary::to_check)
            .collect()),
        "oracle" => oracle_suite(seeds),
        "pipeline" => pipeline_suite(seeds),
        "all" => {
            let mut out = Vec::new();
            for s in SUITES {
                out.extend(run_suite(s, seeds, fault)?);
            }
            Ok(out)
        }
        other => Err(Error::Config(format!(
            "unknown suite '{other}' (expected one of gradcheck, oracle, pipeline, all)"
        ))),
    }
}

// ---- gradient suite ----

type GradFn = Box<dyn Fn(u64) -> Result<GradCheckResult>>;

pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    run: GradFn,
}

impl GradCase {
    pub fn run(&self, seed: u64) -> Result<GradCheckResult> {
        (self.run)(seed)
    }
}

/// Result of one case merged over all seeds.
#[derive(Clone, Debug)]
pub struct GradSummary {
    pub name: &'static str,
    pub tolerance: f64,
    pub seeds: u64,
    pub result: GradCheckResult,
}

impl GradSummary {
    pub fn kink_fraction(&self) -> f64 {
        self.result.kinks as f64 / self.result.checked.max(1) as f64
    }

    pub fn passed(&self) -> bool {
        self.result.max_rel_error < self.tolerance && self.kink_fraction() <= MAX_KINK_FRACTION
    }

    pub fn to_check(&self) -> Check {
        let r = &self.result;
        let mut detail = format!(
            "max rel err {:.3e} (< {:.0e}), {} coords, {} kinks, {} seeds",
            r.max_rel_error, self.tolerance, r.checked, r.kinks, self.seeds
        );
        if let (false, Some(w)) = (self.passed(), &r.worst) {
            detail.push_str(&format!(
                "; worst {}[{}] analytic {:.6e} numeric {:.6e}",
                w.name, w.index, w.analytic, w.numeric
            ));
        }
        Check::new("gradcheck", self.name, self.passed(), detail)
    }
}

fn cfg(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    }
}

fn sampled(seed: u64, coords: usize) -> GradCheckConfig {
    GradCheckConfig {
        seed,
        max_coords: Some(coords),
        ..GradCheckConfig::default()
    }
}

fn rt(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(shape.to_vec(), seed, 1.0)
}

/// Random values in `[lo, lo + 1]`.
fn positive(shape: &[usize], seed: u64, lo: f64) -> Tensor {
    let t = rt(shape, seed);
    let d = t.data().iter().map(|v| lo + 0.5 * (v + 1.0)).collect();
    Tensor::new(shape.to_vec(), d).expect("shape")
}

fn binary(shape: &[usize], seed: u64) -> Tensor {
    let t = rt(shape, seed);
    let d = t.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    Tensor::new(shape.to_vec(), d).expect("shape")
}

/// Adds uniform noise in `[-scale, scale]` to every parameter.
pub fn perturb_store(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-scale..=scale);
        }
    }
}

fn unary(name: &'static str, f: fn(&mut Graph, Var) -> Var, domain: fn(u64) -> Tensor) -> GradCase {
    GradCase {
        name,
        tolerance: OP_TOLERANCE,
        run: Box::new(move |seed| {
            check_gradients(
                |g, v| {
                    let y = f(g, v[0]);
                    random_projection(g, y, seed ^ 0xA5)
                },
                &[domain(seed)],
                cfg(seed),
            )
        }),
    }
}

fn binary_op(name: &'static str, f: fn(&mut Graph, Var, Var) -> Result<Var>, rhs: fn(u64) -> Tensor) -> GradCase {
    GradCase {
        name,
        tolerance: OP_TOLERANCE,
        run: Box::new(move |seed| {
            check_gradients(
                |g, v| {
                    let y = f(g, v[0], v[1])?;
                    random_projection(g, y, seed ^ 0xA5)
                },
                &[rt(&[2, 3, 2], seed), rhs(seed + 1000)],
                cfg(seed),
            )
        }),
    }
}

/// Case running `f` on random tensors of the given shapes.
fn graph_case(
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Clone + 'static,
) -> GradCase {
    GradCase {
        name,
        tolerance: OP_TOLERANCE,
        run: Box::new(move |seed| {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(k, s)| rt(s, seed * 31 + k as u64))
                .collect();
            let f = f.clone();
            check_gradients(
                move |g, v| {
                    let y = f(g, v)?;
                    random_projection(g, y, seed ^ 0xA5)
                },
                &inputs,
                cfg(seed),
            )
        }),
    }
}

/// Soft Dice with a negated backward pass.
struct FlippedDice {
    target: Tensor,
    smooth: f64,
}

impl CustomOp for FlippedDice {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let p = inputs[0];
        let t = self.target.data();
        let inter: f64 = p.data().iter().zip(t).map(|(a, b)| a * b).sum();
        let union = p.sum() + self.target.sum() + self.smooth;
        let num = 2.0 * inter + self.smooth;
        let go = grad.data()[0];
        let d = t
            .iter()
            .map(|&ti| go * (2.0 * ti * union - num) / (union * union))
            .collect();
        vec![Tensor::new(p.shape().to_vec(), d).expect("shape")]
    }
}

fn flipped_dice(g: &mut Graph, probs: Var, target: &Tensor, smooth: f64) -> Result<Var> {
    let p = g.value(probs);
    let inter: f64 = p.data().iter().zip(target.data()).map(|(a, b)| a * b).sum();
    let value = 1.0 - (2.0 * inter + smooth) / (p.sum() + target.sum() + smooth);
    let op = FlippedDice {
        target: target.clone(),
        smooth,
    };
    Ok(g.custom(&[probs], Tensor::scalar(value), Box::new(op)))
}

fn store_case(
    name: &'static str,
    tolerance: f64,
    build: impl Fn(u64) -> Result<(ParamStore, Vec<Tensor>)> + 'static,
    forward: impl Fn(&mut crate::params::Bound, &[Var]) -> Result<Var> + Clone + 'static,
    coords: usize,
) -> GradCase {
    GradCase {
        name,
        tolerance,
        run: Box::new(move |seed| {
            let (store, inputs) = build(seed)?;
            let fwd = forward.clone();
            check_store_gradients(
                &store,
                &inputs,
                move |ctx, v| {
                    let y = fwd(ctx, v)?;
                    random_projection(&mut ctx.graph, y, seed ^ 0xA5)
                },
                sampled(seed, coords),
            )
        }),
    }
}

/// The toy configuration used by the end-to-end gradient check.
pub fn gradcheck_network_config() -> NetworkConfig {
    NetworkConfig {
        ladder: vec![4, 8],
        c_max: 2,
        state_dim: 4,
        ..NetworkConfig::toy()
    }
}

/// Every gradient case, ops first, then composed blocks.
pub fn gradient_cases(fault: Fault) -> Vec<GradCase> {
    let gen = |s: u64| rt(&[2, 3, 2], s);
    let mut cases = vec![
        binary_op("add", |g, a, b| g.add(a, b), gen),
        binary_op("sub", |g, a, b| g.sub(a, b), gen),
        binary_op("mul", |g, a, b| g.mul(a, b), gen),
        binary_op("div", |g, a, b| g.div(a, b), |s| positive(&[2, 3, 2], s, 0.5)),
        binary_op("combine_hadamard", |g, a, b| g.combine(a, b, Combine::Hadamard), gen),
        unary("add_scalar", |g, x| g.add_scalar(x, 0.7), gen),
        unary("mul_scalar", |g, x| g.mul_scalar(x, -1.3), gen),
        unary("neg", |g, x| g.neg(x), gen),
        unary("exp", |g, x| g.exp(x), gen),
        unary("log", |g, x| g.log(x), |s| positive(&[2, 3, 2], s, 0.3)),
        unary("sigmoid", |g, x| g.sigmoid(x), gen),
        unary("tanh", |g, x| g.tanh(x), gen),
        unary("softplus", |g, x| g.softplus(x), gen),
        unary(
            "pow_scalar",
            |g, x| g.pow_scalar(x, 2.5),
            |s| positive(&[2, 3, 2], s, 0.3),
        ),
        unary("relu", |g, x| g.relu(x), gen),
        unary("silu", |g, x| g.silu(x), gen),
        unary("sum", |g, x| g.sum(x), gen),
        unary("mean", |g, x| g.mean(x), gen),
        graph_case("reshape", vec![vec![2, 3, 4]], |g, v| g.reshape(v[0], [4, 6])),
        graph_case("permute", vec![vec![2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])),
        graph_case("concat", vec![vec![2, 2, 3], vec![2, 1, 3]], |g, v| {
            g.concat(&[v[0], v[1]], 1)
        }),
        graph_case(
            "combine_concat",
            vec![vec![1, 2, 2, 2, 1], vec![1, 3, 2, 2, 1]],
            |g, v| g.combine(v[0], v[1], Combine::Concat),
        ),
        graph_case("scale_last", vec![vec![3, 4], vec![4]], |g, v| g.scale_last(v[0], v[1])),
        graph_case("linear", vec![vec![2, 3, 4], vec![5, 4], vec![5]], |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        }),
        graph_case(
            "conv3d_3x3x3",
            vec![vec![2, 3, 4, 5, 3], vec![5, 3, 3, 3, 3], vec![5]],
            |g, v| g.conv3d(v[0], v[1], Some(v[2]), Conv3dOptions::padded(1)),
        ),
        graph_case(
            "conv3d_1x1x1",
            vec![vec![1, 4, 3, 3, 2], vec![6, 4, 1, 1, 1], vec![6]],
            |g, v| g.conv3d(v[0], v[1], Some(v[2]), Conv3dOptions::default()),
        ),
        graph_case(
            "conv3d_strided_dilated_grouped",
            vec![vec![1, 4, 5, 6, 5], vec![4, 2, 3, 2, 3], vec![4]],
            |g, v| {
                let opts = Conv3dOptions {
                    stride: [2, 1, 2],
                    padding: [1, 0, 1],
                    dilation: [1, 2, 1],
                    groups: 2,
                };
                g.conv3d(v[0], v[1], Some(v[2]), opts)
            },
        ),
        graph_case(
            "dwconv3d",
            vec![vec![1, 3, 4, 4, 3], vec![3, 1, 3, 3, 3], vec![3]],
            |g, v| g.dwconv3d(v[0], v[1], Some(v[2])),
        ),
        graph_case(
            "conv_transpose3d",
            vec![vec![1, 3, 2, 3, 2], vec![3, 2, 2, 2, 2], vec![2]],
            |g, v| g.conv_transpose3d(v[0], v[1], Some(v[2])),
        ),
        GradCase {
            name: "group_norm",
            tolerance: OP_TOLERANCE,
            run: Box::new(|seed| {
                check_gradients(
                    |g, v| {
                        let y = g.normalize(v[0], Norm::Group(2), v[1], v[2])?;
                        random_projection(g, y, seed ^ 0xA5)
                    },
                    &[
                        rt(&[2, 4, 3, 2, 2], seed),
                        positive(&[4], seed + 1, 0.5),
                        rt(&[4], seed + 2),
                    ],
                    cfg(seed),
                )
            }),
        },
        GradCase {
            name: "layer_norm",
            tolerance: OP_TOLERANCE,
            run: Box::new(|seed| {
                check_gradients(
                    |g, v| {
                        let y = g.normalize(v[0], Norm::Layer, v[1], v[2])?;
                        random_projection(g, y, seed ^ 0xA5)
                    },
                    &[rt(&[5, 6], seed), positive(&[6], seed + 1, 0.5), rt(&[6], seed + 2)],
                    cfg(seed),
                )
            }),
        },
        GradCase {
            name: "grid_sample_trilinear",
            tolerance: OP_TOLERANCE,
            run: Box::new(|seed| {
                let coords = random_tensor([1, 7, 3], seed + 1, 3.5);
                let coords = Tensor::new([1, 7, 3], coords.data().iter().map(|c| c + 2.0).collect())?;
                check_gradients(
                    |g, v| {
                        let y = g.grid_sample_trilinear(v[0], v[1])?;
                        random_projection(g, y, seed ^ 0xA5)
                    },
                    &[rt(&[1, 2, 4, 3, 5], seed), coords],
                    cfg(seed),
                )
            }),
        },
        graph_case("upsample_trilinear", vec![vec![1, 2, 2, 3, 2]], |g, v| {
            g.upsample_trilinear(v[0])
        }),
        graph_case("pool_max3d", vec![vec![1, 2, 4, 4, 2]], |g, v| g.pool_max3d(v[0])),
        GradCase {
            name: "cumulate_offsets",
            tolerance: OP_TOLERANCE,
            run: Box::new(|seed| {
                let mut total = GradCheckResult::default();
                for axis in Axis::ALL {
                    let spec = SnakeKernelSpec::new(axis, 2, 1, 1);
                    let r = check_gradients(
                        |g, v| {
                            let offsets = crate::snake::SnakeKernelOffsets { raw: v[0], spec };
                            let y = cumulate_offsets(g, &offsets)?;
                            random_projection(g, y, seed ^ 0xA5)
                        },
                        &[rt(&[1, spec.offset_channels(), 2, 3, 2], seed + axis.index() as u64)],
                        cfg(seed),
                    )?;
                    total.merge(&r);
                }
                Ok(total)
            }),
        },
    ];
    for (name, strategy) in [
        ("selective_scan_sequential", ScanStrategy::Sequential),
        ("selective_scan_chunked", ScanStrategy::Chunked(3)),
    ] {
        cases.push(GradCase {
            name,
            tolerance: OP_TOLERANCE,
            run: Box::new(move |seed| {
                let (bt, l, e, n) = (2, 7, 3, 4);
                let a = positive(&[e, n], seed + 2, 0.1);
                let a = Tensor::new([e, n], a.data().iter().map(|v| -v).collect())?;
                let inputs = [
                    rt(&[bt, l, e], seed),
                    positive(&[bt, l, e], seed + 1, 0.05),
                    a,
                    rt(&[bt, l, n], seed + 3),
                    rt(&[bt, l, n], seed + 4),
                    rt(&[e], seed + 5),
                ];
                check_gradients(
                    |g, v| {
                        let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], Some(v[5]), strategy)?;
                        random_projection(g, y, seed ^ 0xA5)
                    },
                    &inputs,
                    cfg(seed),
                )
            }),
        });
    }
    cases.push(GradCase {
        name: "dice_loss",
        tolerance: OP_TOLERANCE,
        run: Box::new(move |seed| {
            let target = binary(&[1, 1, 4, 4, 4], seed + 7);
            check_gradients(
                |g, v| {
                    let p = g.sigmoid(v[0]);
                    match fault {
                        Fault::None => dice_loss(g, p, &target, DEFAULT_SMOOTH),
                        Fault::DiceSignFlip => flipped_dice(g, p, &target, DEFAULT_SMOOTH),
                    }
                },
                &[rt(&[1, 1, 4, 4, 4], seed)],
                cfg(seed),
            )
        }),
    });
    cases.push(GradCase {
        name: "focal_loss",
        tolerance: OP_TOLERANCE,
        run: Box::new(|seed| {
            let target = binary(&[1, 1, 4, 4, 4], seed + 7);
            check_gradients(
                |g, v| {
                    let p = g.sigmoid(v[0]);
                    focal_loss(g, p, &target, FOCAL_GAMMA, FOCAL_ALPHA)
                },
                &[rt(&[1, 1, 4, 4, 4], seed)],
                cfg(seed),
            )
        }),
    });
    cases.push(GradCase {
        name: "snake_conv_axis",
        tolerance: OP_TOLERANCE,
        run: Box::new(|seed| {
            let mut total = GradCheckResult::default();
            for axis in Axis::ALL {
                let spec = SnakeKernelSpec::new(axis, 2, 2, 3);
                let inputs = [
                    rt(&[1, 2, 4, 4, 4], seed),
                    random_tensor([spec.offset_channels(), 2, 3, 3, 3], seed + 1, 0.3),
                    rt(&[3, 2, spec.taps()], seed + 2),
                ];
                let r = check_gradients(
                    |g, v| {
                        let offsets = predict_offsets(g, v[0], spec, v[1], None)?;
                        let coords = cumulate_offsets(g, &offsets)?;
                        let y = snake_conv_axis(g, v[0], spec, v[2], None, coords)?;
                        random_projection(g, y, seed ^ 0xA5)
                    },
                    &inputs,
                    sampled(seed, 48),
                )?;
                total.merge(&r);
            }
            Ok(total)
        }),
    });
    cases.push(store_case(
        "mdsconv_block",
        OP_TOLERANCE,
        |seed| {
            let block = MdsConvBlock::new("blk", 2, 4, 4);
            let mut store = ParamStore::new();
            block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
            perturb_store(&mut store, seed + 1, 0.2);
            Ok((store, vec![rt(&[1, 2, 6, 6, 6], seed + 2)]))
        },
        |ctx, v| MdsConvBlock::new("blk", 2, 4, 4).forward(ctx, v[0]),
        12,
    ));
    cases.push(store_case(
        "vssm_block",
        OP_TOLERANCE,
        |seed| {
            let block = VssmBlock::new("v", 4, 2, 4);
            let mut store = ParamStore::new();
            block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
            perturb_store(&mut store, seed + 1, 0.2);
            Ok((store, vec![rt(&[8, 4], seed + 2)]))
        },
        |ctx, v| VssmBlock::new("v", 4, 2, 4).forward(ctx, v[0], [2, 2, 2]),
        16,
    ));
    cases.push(store_case(
        "rvm_layer",
        OP_TOLERANCE,
        |seed| {
            let layer = RvmLayer::new("r", 4, 4, 2, 4);
            let mut store = ParamStore::new();
            layer.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
            perturb_store(&mut store, seed + 1, 0.2);
            Ok((store, vec![rt(&[1, 4, 2, 2, 2], seed + 2)]))
        },
        |ctx, v| RvmLayer::new("r", 4, 4, 2, 4).forward(ctx, v[0]),
        16,
    ));
    cases.push(store_case(
        "toy_network_2_level",
        NETWORK_TOLERANCE,
        |seed| {
            let mut net = Network::build(gradcheck_network_config(), seed)?;
            perturb_store(net.params_mut(), seed + 1, 0.1);
            Ok((net.params().clone(), vec![rt(&[1, 1, 8, 8, 8], seed + 2)]))
        },
        |ctx, v| {
            let net = Network::from_params(gradcheck_network_config(), ctx.store().clone())?;
            net.forward(ctx, v[0])
        },
        6,
    ));
    cases
}

/// Runs every gradient case over seeds `0..seeds`.
pub fn gradient_suite(seeds: u64, fault: Fault) -> Result<Vec<GradSummary>> {
    gradient_cases(fault)
        .iter()
        .map(|case| {
            let mut result = GradCheckResult::default();
            for seed in 0..seeds {
                result.merge(&case.run(seed)?);
            }
            Ok(GradSummary {
                name: case.name,
                tolerance: case.tolerance,
                seeds,
                result,
            })
        })
        .collect()
}

// ---- oracle suite ----

/// Straightforward per-step recurrence on `[L, E]` operands.
pub fn scan_unroll(u: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: Option<&Tensor>) -> Tensor {
    let (l, e) = (u.shape()[0], u.shape()[1]);
    let n = a.shape()[1];
    let mut y = Tensor::zeros([l, e]);
    for ch in 0..e {
        let mut h = vec![0.0; n];
        for t in 0..l {
            let (ut, dt) = (u.at(&[t, ch]), delta.at(&[t, ch]));
            let mut acc = 0.0;
            for (k, hk) in h.iter_mut().enumerate() {
                *hk = (dt * a.at(&[ch, k])).exp() * *hk + dt * b.at(&[t, k]) * ut;
                acc += c.at(&[t, k]) * *hk;
            }
            let skip = d.map_or(0.0, |d| d.data()[ch] * ut);
            y.set(&[t, ch], acc + skip);
        }
    }
    y
}

struct ScanInstance {
    u: Tensor,
    delta: Tensor,
    a: Tensor,
    b: Tensor,
    c: Tensor,
    d: Tensor,
}

fn random_scan(rng: &mut ChaCha8Rng) -> ScanInstance {
    let l = rng.random_range(1..=64);
    let e = rng.random_range(1..=8);
    let n = rng.random_range(1..=16);
    let seed = rng.random();
    let a = positive(&[e, n], seed + 2, 0.01);
    ScanInstance {
        u: rt(&[l, e], seed),
        delta: positive(&[l, e], seed + 1, 0.001),
        a: Tensor::new([e, n], a.data().iter().map(|v| -v).collect()).expect("shape"),
        b: rt(&[l, n], seed + 3),
        c: rt(&[l, n], seed + 4),
        d: rt(&[e], seed + 5),
    }
}

fn run_scan(s: &ScanInstance, strategy: ScanStrategy) -> Result<Tensor> {
    let mut g = Graph::new();
    let v: Vec<Var> = [&s.u, &s.delta, &s.a, &s.b, &s.c, &s.d]
        .into_iter()
        .map(|t| g.constant(t.clone()))
        .collect();
    let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], Some(v[5]), strategy)?;
    Ok(g.value(y).clone())
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `sum_t w[t] * x(p + (t - c) e_axis)` with indices clamped to the volume.
pub fn clamped_line_conv(x: &Tensor, w: &Tensor, axis: usize) -> Tensor {
    let s = x.shape();
    let (cout, cin, taps) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let c = (taps / 2) as isize;
    let mut out = Tensor::zeros([s[0], cout, s[2], s[3], s[4]]);
    for b in 0..s[0] {
        for o in 0..cout {
            for h in 0..s[2] {
                for wv in 0..s[3] {
                    for d in 0..s[4] {
                        let mut acc = 0.0;
                        for i in 0..cin {
                            for t in 0..taps {
                                let mut p = [h, wv, d];
                                let q = p[axis] as isize + t as isize - c;
                                p[axis] = q.clamp(0, s[2 + axis] as isize - 1) as usize;
                                acc += w.at(&[o, i, t]) * x.at(&[b, i, p[0], p[1], p[2]]);
                            }
                        }
                        out.set(&[b, o, h, wv, d], acc);
                    }
                }
            }
        }
    }
    out
}

fn zero_offset_snake(x: &Tensor, w: &Tensor, axis: Axis) -> Result<Tensor> {
    let (cout, cin, taps) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let spec = SnakeKernelSpec::new(axis, taps / 2, cin, cout);
    let s = x.shape();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let raw = g.constant(Tensor::zeros([s[0], spec.offset_channels(), s[2], s[3], s[4]]));
    let wv = g.constant(w.clone());
    let coords = cumulate_offsets(&mut g, &crate::snake::SnakeKernelOffsets { raw, spec })?;
    let y = snake_conv_axis(&mut g, xv, spec, wv, None, coords)?;
    Ok(g.value(y).clone())
}

/// Random sparse label volume with extents up to `max_side`.
pub fn random_label(rng: &mut ChaCha8Rng, shape: [usize; 3], density: f64) -> LabelVolume {
    LabelVolume::from_fn(shape, |_, _, _| rng.random_bool(density)).expect("shape")
}

/// Exhaustive `(HD, AHD)` from explicit pairwise distances.
pub fn brute_force_hd(a: &LabelVolume, b: &LabelVolume) -> Result<(f64, f64)> {
    let (sa, sb) = (extract_surface(a), extract_surface(b));
    let ab = directed_exhaustive(&sa, &sb)?;
    let ba = directed_exhaustive(&sb, &sa)?;
    Ok((ab.max.max(ba.max), ab.mean.max(ba.mean)))
}

pub fn oracle_suite(instances: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0A);
    let reps = (instances * 10).max(10);

    let (mut worst_unroll, mut worst_chunk) = (0.0f64, 0.0f64);
    for _ in 0..reps {
        let s = random_scan(&mut rng);
        let seq = run_scan(&s, ScanStrategy::Sequential)?;
        let oracle = scan_unroll(&s.u, &s.delta, &s.a, &s.b, &s.c, Some(&s.d));
        worst_unroll = worst_unroll.max(max_abs_diff(&seq, &oracle));
        let chunk = rng.random_range(1..=16);
        worst_chunk = worst_chunk.max(max_abs_diff(&seq, &run_scan(&s, ScanStrategy::Chunked(chunk))?));
    }
    out.push(Check::new(
        "oracle",
        "scan_vs_unroll",
        worst_unroll <= 1e-12,
        format!("max |diff| {worst_unroll:.3e} over {reps} instances"),
    ));
    out.push(Check::new(
        "oracle",
        "scan_chunked_vs_sequential",
        worst_chunk <= 1e-9,
        format!("max |diff| {worst_chunk:.3e}"),
    ));

    let l = 12;
    let u = rt(&[l, 1], 5);
    let s = ScanInstance {
        u: u.clone(),
        delta: Tensor::ones([l, 1]),
        a: Tensor::zeros([1, 1]),
        b: Tensor::ones([l, 1]),
        c: Tensor::ones([l, 1]),
        d: Tensor::zeros([1]),
    };
    let y = run_scan(&s, ScanStrategy::Sequential)?;
    let mut run = 0.0;
    let exact = u.data().iter().zip(y.data()).all(|(x, y)| {
        run += x;
        run == *y
    });
    out.push(Check::new(
        "oracle",
        "scan_cumulative_sum",
        exact,
        "A = 0 reduces to a running sum",
    ));

    let mut worst_snake = 0.0f64;
    for _ in 0..reps {
        let seed = rng.random();
        let shape = [
            1,
            rng.random_range(1..=2),
            rng.random_range(1..=5),
            rng.random_range(1..=5),
            rng.random_range(1..=5),
        ];
        let half = rng.random_range(1..=4);
        let axis = Axis::ALL[rng.random_range(0..3)];
        let x = rt(&shape, seed);
        let w = rt(&[2, shape[1], 2 * half + 1], seed + 1);
        let y = zero_offset_snake(&x, &w, axis)?;
        worst_snake = worst_snake.max(max_abs_diff(&y, &clamped_line_conv(&x, &w, axis.index())));
    }
    out.push(Check::new(
        "oracle",
        "snake_zero_offset",
        worst_snake <= 1e-10,
        format!("max |diff| {worst_snake:.3e}"),
    ));

    let mut mismatches = 0;
    for _ in 0..reps {
        let shape = [
            rng.random_range(2..=16),
            rng.random_range(2..=16),
            rng.random_range(2..=16),
        ];
        let density = rng.random_range(0.02..0.4);
        let a = random_label(&mut rng, shape, density);
        let b = random_label(&mut rng, shape, density);
        if a.count() == 0 || b.count() == 0 {
            continue;
        }
        let fast = surface_distances(&a, &b, DistanceMethod::Indexed)?;
        let slow = surface_distances(&a, &b, DistanceMethod::Exhaustive)?;
        if fast != slow {
            mismatches += 1;
        }
    }
    out.push(Check::new(
        "oracle",
        "hausdorff_indexed_vs_exhaustive",
        mismatches == 0,
        format!("{mismatches} mismatching pairs"),
    ));

    let a = LabelVolume::from_points([8, 8, 8], &[[0, 0, 0]])?;
    let b = LabelVolume::from_points([8, 8, 8], &[[3, 4, 0]])?;
    let (hd, ahd) = (
        crate::metrics::hausdorff(&a, &b)?,
        crate::metrics::average_hausdorff(&a, &b)?,
    );
    out.push(Check::new(
        "oracle",
        "hausdorff_hand_cases",
        hd == 5.0 && ahd == 5.0 && crate::metrics::hausdorff(&a, &a)? == 0.0,
        format!("HD {hd}, AHD {ahd}"),
    ));
    let a2 = a.clone().with_spacing(Some([2.0; 3]))?;
    let b2 = b.clone().with_spacing(Some([2.0; 3]))?;
    let hd2 = crate::metrics::hausdorff(&a2, &b2)?;
    out.push(Check::new(
        "oracle",
        "hausdorff_spacing_scaling",
        hd2 == 2.0 * hd,
        format!("HD at spacing 2: {hd2}"),
    ));
    Ok(out)
}

// ---- pipeline suite ----

/// Thresholds intensity: probability 0.9 above 0.5, else 0.1.
pub struct ThresholdSegmenter;

impl Segmenter for ThresholdSegmenter {
    fn segment(&self, v: &Volume) -> Result<Volume> {
        let data = v.data().iter().map(|&x| if x > 0.5 { 0.9 } else { 0.1 }).collect();
        Volume::new(v.shape(), data, v.spacing())
    }
}

/// Random intensity volume plus a blobby coarse probability map.
pub fn random_pipeline_case(rng: &mut ChaCha8Rng) -> Result<(Volume, Volume, usize)> {
    let side = 8;
    let shape = [
        side * rng.random_range(2..=4),
        side * rng.random_range(2..=4),
        side * rng.random_range(1..=3),
    ];
    let coarse_shape = [shape[0] / 2, shape[1] / 2, shape[2] / 2];
    let image = Volume::from_fn(shape, |_, _, _| rng.random::<f32>())?;
    let blobs: Vec<[f64; 4]> = (0..rng.random_range(0..=3))
        .map(|_| {
            [
                rng.random_range(0.0..coarse_shape[0] as f64),
                rng.random_range(0.0..coarse_shape[1] as f64),
                rng.random_range(0.0..coarse_shape[2] as f64),
                rng.random_range(0.5..2.5),
            ]
        })
        .collect();
    let coarse = Volume::from_fn(coarse_shape, |h, w, d| {
        let inside = blobs.iter().any(|b| {
            let dist2 = (h as f64 - b[0]).powi(2) + (w as f64 - b[1]).powi(2) + (d as f64 - b[2]).powi(2);
            dist2 <= b[3] * b[3]
        });
        if inside {
            0.8
        } else {
            0.2
        }
    })?;
    Ok((image, coarse, side))
}

/// Pure-lookup stage-1 stand-in returning a fixed probability map.
struct FixedCoarse(Volume);

impl Segmenter for FixedCoarse {
    fn segment(&self, _: &Volume) -> Result<Volume> {
        Ok(self.0.clone())
    }
}

pub fn pipeline_suite(cases: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x91);
    let reps = (cases * 5).max(5);
    let (mut incomplete, mut not_conserved, mut leaked, mut order_dependent) = (0, 0, 0, 0);
    for _ in 0..reps {
        let (image, coarse, side) = random_pipeline_case(&mut rng)?;
        let shape = image.shape();
        let ex = extract_blocks(&coarse, &image, 0.5, side)?;
        let idx: Vec<BlockIndex> = ex.blocks.iter().map(|(i, _)| *i).collect();
        let covered = |p: [usize; 3]| idx.iter().any(|b| b.contains(p));

        for h in 0..shape[0] {
            for w in 0..shape[1] {
                for d in 0..shape[2] {
                    if ex.dilated.get(h, w, d) && !covered([h, w, d]) {
                        incomplete += 1;
                    }
                }
            }
        }

        let grid: Vec<(BlockIndex, Volume)> = (0..shape[0] / side)
            .flat_map(|i| (0..shape[1] / side).flat_map(move |j| (0..shape[2] / side).map(move |k| [i, j, k])))
            .filter(|_| rng.random_bool(0.6))
            .map(|[i, j, k]| {
                let b = BlockIndex {
                    origin: [i * side, j * side, k * side],
                    side,
                    source: shape,
                };
                crate::pipeline::blocks::crop(&image, &b).map(|v| (b, v))
            })
            .collect::<Result<_>>()?;
        let merged = merge_blocks(&grid, shape, 0.5)?;
        for h in 0..shape[0] {
            for w in 0..shape[1] {
                for d in 0..shape[2] {
                    let inside = grid.iter().any(|(b, _)| b.contains([h, w, d]));
                    let expect = inside && image.get(h, w, d) > 0.5;
                    if merged.get(h, w, d) != expect {
                        not_conserved += 1;
                    }
                }
            }
        }

        let cfg = InferConfig {
            coarse_shape: coarse.shape(),
            block_side: side,
            threshold: 0.5,
        };
        let out = two_stage_infer(&image, &FixedCoarse(coarse.clone()), &ThresholdSegmenter, &cfg)?;
        for h in 0..shape[0] {
            for w in 0..shape[1] {
                for d in 0..shape[2] {
                    if out.label.get(h, w, d) && !out.blocks.iter().any(|b| b.contains([h, w, d])) {
                        leaked += 1;
                    }
                }
            }
        }

        let pieces: Vec<(BlockIndex, Volume)> = ex
            .blocks
            .iter()
            .map(|(i, v)| ThresholdSegmenter.segment(v).map(|p| (*i, p)))
            .collect::<Result<_>>()?;
        let reference = merge_blocks(&pieces, shape, 0.5)?;
        let mut shuffled = pieces.clone();
        shuffled.shuffle(&mut rng);
        if merge_blocks(&shuffled, shape, 0.5)? != reference {
            order_dependent += 1;
        }
    }
    Ok(vec![
        Check::new(
            "pipeline",
            "extraction_completeness",
            incomplete == 0,
            format!("{incomplete} uncovered dilated voxels over {reps} cases"),
        ),
        Check::new(
            "pipeline",
            "merge_conservation",
            not_conserved == 0,
            format!("{not_conserved} altered voxels"),
        ),
        Check::new(
            "pipeline",
            "guidance_only",
            leaked == 0,
            format!("{leaked} voxels outside blocks"),
        ),
        Check::new(
            "pipeline",
            "block_order_invariance",
            order_dependent == 0,
            format!("{order_dependent} order-dependent merges"),
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_flipped_dice_gradient_is_caught() {
        let cases = gradient_cases(Fault::DiceSignFlip);
        let dice = cases.iter().find(|c| c.name == "dice_loss").unwrap();
        let r = dice.run(0).unwrap();
        assert!(r.max_rel_error > 1.0, "{r:?}");
        let clean = gradient_cases(Fault::None);
        let dice = clean.iter().find(|c| c.name == "dice_loss").unwrap();
        assert!(dice.run(0).unwrap().max_rel_error < OP_TOLERANCE);
    }

    #[test]
    fn unknown_suite_is_a_config_error() {
        assert!(matches!(run_suite("bogus", 1, Fault::None), Err(Error::Config(_))));
    }

    #[test]
    fn unroll_matches_closed_form_single_step() {
        let t = |v: f64| Tensor::new([1, 1], vec![v]).unwrap();
        let y = scan_unroll(&t(3.0), &t(0.5), &t(-1.0), &t(1.0), &t(2.0), Some(&Tensor::zeros([1])));
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn oracle_and_pipeline_suites_pass() {
        for c in oracle_suite(1).unwrap().iter().chain(&pipeline_suite(1).unwrap()) {
            assert!(c.passed, "{c:?}");
        }
    }
}
