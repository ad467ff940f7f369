//! Selective state-space layers: the scan, the dual-branch vision state
//! space module (VSSM) and the residual visual Mamba layer (RVM).
//!
//! Sequences are `[B, L, C]` with `L = H * W * D` in row-major `(h, w, d)`
//! order; the scan runs forward along that order only.

pub mod scan;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Norm, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{init, Bound, ParamStore};
use crate::tensor::Tensor;
pub use scan::ScanStrategy;

/// Selective-scan parameters: `A = -exp(a_log)`, input-dependent `B_t`,
/// `C_t` (linear in `u_t`) and `delta_t = softplus(W u_t + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    pub prefix: String,
    pub channels: usize,
    pub state_dim: usize,
    /// Include the `D * u_t` skip term.
    pub skip: bool,
    pub strategy: ScanStrategy,
}

impl SsmParams {
    pub fn new(prefix: impl Into<String>, channels: usize, state_dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
            state_dim,
            skip: true,
            strategy: ScanStrategy::Sequential,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let (e, n) = (self.channels, self.state_dim);
        if e == 0 || n == 0 {
            return Err(Error::Config("SSM needs positive channel and state sizes".into()));
        }
        store.insert(self.name("b_proj.weight"), init::lecun_uniform(&[n, e], e, rng))?;
        store.insert(self.name("c_proj.weight"), init::lecun_uniform(&[n, e], e, rng))?;
        store.insert(self.name("dt_proj.weight"), init::lecun_uniform(&[e, e], e, rng))?;
        // step sizes start log-uniform in [1e-3, 1e-1]
        let dt_bias = Tensor::from_fn([e], |_| {
            let dt: f64 = (rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
            dt + (-(-dt).exp_m1()).ln()
        });
        store.insert(self.name("dt_proj.bias"), dt_bias)?;
        store.insert(
            self.name("a_log"),
            Tensor::from_fn([e, n], |i| ((i % n) as f64 + 1.0).ln()),
        )?;
        if self.skip {
            store.insert(self.name("d"), Tensor::ones([e]))?;
        }
        Ok(())
    }

    /// Runs the scan on `u: [B, L, E]`.
    pub fn forward(&self, ctx: &mut Bound, u: Var) -> Result<Var> {
        let wb = ctx.param(&self.name("b_proj.weight"))?;
        let wc = ctx.param(&self.name("c_proj.weight"))?;
        let wdt = ctx.param(&self.name("dt_proj.weight"))?;
        let bdt = ctx.param(&self.name("dt_proj.bias"))?;
        let a_log = ctx.param(&self.name("a_log"))?;
        let d = if self.skip {
            Some(ctx.param(&self.name("d"))?)
        } else {
            None
        };
        let g = &mut ctx.graph;
        let b = g.linear(u, wb, None)?;
        let c = g.linear(u, wc, None)?;
        let dt = g.linear(u, wdt, Some(bdt))?;
        let dt = g.softplus(dt);
        let a = g.exp(a_log);
        let a = g.neg(a);
        g.selective_scan(u, dt, a, b, c, d, self.strategy)
    }
}

/// Free-standing scan on raw operands, mirroring [`Graph::selective_scan`].
#[allow(clippy::too_many_arguments)]
pub fn selective_scan(
    g: &mut Graph,
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Option<Var>,
    strategy: ScanStrategy,
) -> Result<Var> {
    g.selective_scan(u, delta, a, b, c, d, strategy)
}

/// Dual-branch block:
/// `W1 = LN(SSM(SiLU(DWConv(Linear(x)))))`, `W2 = SiLU(Linear(x))`,
/// `out = Linear(W1 * W2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VssmBlock {
    pub prefix: String,
    pub channels: usize,
    pub expand: usize,
    pub ssm: SsmParams,
}

impl VssmBlock {
    pub fn new(prefix: impl Into<String>, channels: usize, expand: usize, state_dim: usize) -> Self {
        let prefix = prefix.into();
        let ssm = SsmParams::new(format!("{prefix}.ssm"), channels * expand, state_dim);
        Self {
            prefix,
            channels,
            expand,
            ssm,
        }
    }

    pub fn expanded(&self) -> usize {
        self.channels * self.expand
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let (c, e) = (self.channels, self.expanded());
        store.insert(self.name("in.weight"), init::lecun_uniform(&[e, c], c, rng))?;
        store.insert(self.name("in.bias"), Tensor::zeros([e]))?;
        store.insert(self.name("dw.weight"), init::he_uniform(&[e, 1, 3, 3, 3], 27, rng))?;
        store.insert(self.name("dw.bias"), Tensor::zeros([e]))?;
        self.ssm.init(store, rng)?;
        store.insert(self.name("ln.gain"), Tensor::ones([e]))?;
        store.insert(self.name("ln.bias"), Tensor::zeros([e]))?;
        store.insert(self.name("gate.weight"), init::lecun_uniform(&[e, c], c, rng))?;
        store.insert(self.name("gate.bias"), Tensor::zeros([e]))?;
        store.insert(self.name("out.weight"), init::lecun_uniform(&[c, e], e, rng))?;
        store.insert(self.name("out.bias"), Tensor::zeros([c]))?;
        Ok(())
    }

    /// `w_in: [B, L, C]` (or `[L, C]`) with `L = H * W * D`.
    pub fn forward(&self, ctx: &mut Bound, w_in: Var, spatial: [usize; 3]) -> Result<Var> {
        let shape = ctx.graph.shape(w_in).to_vec();
        let (batch, len, c) = match *shape.as_slice() {
            [l, c] => (1, l, c),
            [b, l, c] => (b, l, c),
            _ => return Err(shape_err("vssm_forward", "rank", format!("{shape:?}"))),
        };
        if c != self.channels {
            return Err(shape_err(
                "vssm_forward",
                "C",
                format!("{c} vs block {}", self.channels),
            ));
        }
        let [h, w, d] = spatial;
        if h * w * d != len {
            return Err(Error::Contract(format!(
                "vssm_forward: sequence length {len} does not match spatial shape {spatial:?}"
            )));
        }
        let e = self.expanded();
        let x = ctx.graph.reshape(w_in, [batch, len, c])?;

        let (wi, bi) = (ctx.param(&self.name("in.weight"))?, ctx.param(&self.name("in.bias"))?);
        let (wd, bd) = (ctx.param(&self.name("dw.weight"))?, ctx.param(&self.name("dw.bias"))?);
        let g = &mut ctx.graph;
        let x1 = g.linear(x, wi, Some(bi))?;
        let x1 = g.reshape(x1, [batch, h, w, d, e])?;
        let x1 = g.permute(x1, &[0, 4, 1, 2, 3])?;
        let x1 = g.dwconv3d(x1, wd, Some(bd))?;
        let x1 = g.permute(x1, &[0, 2, 3, 4, 1])?;
        let x1 = g.reshape(x1, [batch, len, e])?;
        let u = g.silu(x1);
        let y = self.ssm.forward(ctx, u)?;
        let (lg, lb) = (ctx.param(&self.name("ln.gain"))?, ctx.param(&self.name("ln.bias"))?);
        let w1 = ctx.graph.normalize(y, Norm::Layer, lg, lb)?;

        let (wg, bg) = (
            ctx.param(&self.name("gate.weight"))?,
            ctx.param(&self.name("gate.bias"))?,
        );
        let w2 = ctx.graph.linear(x, wg, Some(bg))?;
        let w2 = ctx.graph.silu(w2);

        let gated = ctx.graph.mul(w1, w2)?;
        let (wo, bo) = (ctx.param(&self.name("out.weight"))?, ctx.param(&self.name("out.bias"))?);
        let out = ctx.graph.linear(gated, wo, Some(bo))?;
        ctx.graph.reshape(out, shape)
    }
}

pub fn vssm_forward(ctx: &mut Bound, w_in: Var, block: &VssmBlock, spatial: [usize; 3]) -> Result<Var> {
    block.forward(ctx, w_in, spatial)
}

/// `Y = VSSM(LN(x)) + s * x`, `out = Projection(LN(Y))`.
#[derive(Clone, Debug, PartialEq)]
pub struct RvmLayer {
    pub prefix: String,
    pub channels: usize,
    pub out_channels: usize,
    pub vssm: VssmBlock,
}

impl RvmLayer {
    pub fn new(
        prefix: impl Into<String>,
        channels: usize,
        out_channels: usize,
        expand: usize,
        state_dim: usize,
    ) -> Self {
        let prefix = prefix.into();
        let vssm = VssmBlock::new(format!("{prefix}.vssm"), channels, expand, state_dim);
        Self {
            prefix,
            channels,
            out_channels,
            vssm,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let (c, co) = (self.channels, self.out_channels);
        store.insert(self.name("ln1.gain"), Tensor::ones([c]))?;
        store.insert(self.name("ln1.bias"), Tensor::zeros([c]))?;
        self.vssm.init(store, rng)?;
        store.insert(self.name("scale"), Tensor::ones([c]))?;
        store.insert(self.name("ln2.gain"), Tensor::ones([c]))?;
        store.insert(self.name("ln2.bias"), Tensor::zeros([c]))?;
        store.insert(self.name("proj.weight"), init::lecun_uniform(&[co, c], c, rng))?;
        store.insert(self.name("proj.bias"), Tensor::zeros([co]))?;
        Ok(())
    }

    /// `x: [B, C, H, W, D]` -> `[B, C_out, H, W, D]`.
    pub fn forward(&self, ctx: &mut Bound, x: Var) -> Result<Var> {
        let s = ctx.graph.shape(x).to_vec();
        if s.len() != 5 || s[1] != self.channels {
            return Err(shape_err(
                "rvm_forward",
                "C",
                format!("input {s:?}, layer expects {}", self.channels),
            ));
        }
        let (b, c, spatial) = (s[0], s[1], [s[2], s[3], s[4]]);
        let len = spatial.iter().product::<usize>();
        let g = &mut ctx.graph;
        let seq = g.permute(x, &[0, 2, 3, 4, 1])?;
        let seq = g.reshape(seq, [b, len, c])?;
        let (g1, b1) = (ctx.param(&self.name("ln1.gain"))?, ctx.param(&self.name("ln1.bias"))?);
        let normed = ctx.graph.normalize(seq, Norm::Layer, g1, b1)?;
        let mixed = self.vssm.forward(ctx, normed, spatial)?;
        let scale = ctx.param(&self.name("scale"))?;
        let residual = ctx.graph.scale_last(seq, scale)?;
        let y = ctx.graph.add(mixed, residual)?;
        let (g2, b2) = (ctx.param(&self.name("ln2.gain"))?, ctx.param(&self.name("ln2.bias"))?);
        let y = ctx.graph.normalize(y, Norm::Layer, g2, b2)?;
        let (wp, bp) = (
            ctx.param(&self.name("proj.weight"))?,
            ctx.param(&self.name("proj.bias"))?,
        );
        let out = ctx.graph.linear(y, wp, Some(bp))?;
        let out = ctx
            .graph
            .reshape(out, [b, spatial[0], spatial[1], spatial[2], self.out_channels])?;
        ctx.graph.permute(out, &[0, 4, 1, 2, 3])
    }
}

pub fn rvm_forward(ctx: &mut Bound, x: Var, layer: &RvmLayer) -> Result<Var> {
    layer.forward(ctx, x)
}
