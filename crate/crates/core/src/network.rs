//! Five-level (in general `n`-level) assembly: MDSConv encoder with an RVM
//! bottleneck, a nested dense skip lattice, RVM decoder steps and a sigmoid
//! head.
//!
//! Notation: `X[i][0]` is the encoder output at level `i`; lattice node
//! `X[i][j]` (j >= 1) convolves `concat(X[i][0..j], Up(X[i+1][j-1]))`. The
//! skip feature handed to the decoder at level `l` is the deepest node on that
//! row, `X[l][n-1-l]`, or `X[l][0]` when dense skips are disabled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Conv3dOptions, Norm, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{init, Bound, ParamStore};
use crate::snake::{gn_groups, MdsConvBlock};
use crate::ssm::{RvmLayer, ScanStrategy};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Channel widths per level, each double the previous one.
    pub ladder: Vec<usize>,
    pub in_channels: usize,
    pub out_classes: usize,
    /// Snake kernel half length; taps = 2 * c_max + 1.
    pub c_max: usize,
    pub offset_scale: f64,
    /// VSSM expansion factor.
    pub expand: usize,
    pub state_dim: usize,
    /// Nested skip lattice; `false` gives plain U-Net skips.
    pub dense_skips: bool,
    /// Restore resolution with a stride-2 transposed conv instead of
    /// trilinear upsampling before the head.
    pub transposed_head: bool,
    pub scan: ScanStrategy,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            ladder: vec![16, 32, 64, 128, 256],
            in_channels: 1,
            out_classes: 1,
            c_max: 4,
            offset_scale: 1.0,
            expand: 2,
            state_dim: 16,
            dense_skips: true,
            transposed_head: false,
            scan: ScanStrategy::Sequential,
        }
    }
}

impl NetworkConfig {
    /// Reduced ladder used for desk-scale experiments.
    pub fn toy() -> Self {
        Self {
            ladder: vec![4, 8, 16, 32, 64],
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.ladder.len()
    }

    /// Every spatial extent must be a multiple of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.ladder.len() < 2 {
            return cfg(format!("channel ladder needs at least 2 levels, got {:?}", self.ladder));
        }
        if self.ladder[0] == 0 || self.ladder.windows(2).any(|w| w[1] != 2 * w[0]) {
            return cfg(format!(
                "channel ladder must double at every level, got {:?}",
                self.ladder
            ));
        }
        for &c in &self.ladder {
            gn_groups(c)?;
        }
        if self.in_channels == 0 || self.out_classes == 0 {
            return cfg("input channels and output classes must be positive".into());
        }
        if self.expand == 0 || self.state_dim == 0 {
            return cfg("expand and state_dim must be positive".into());
        }
        if !(self.offset_scale > 0.0 && self.offset_scale.is_finite()) {
            return cfg(format!("offset_scale must be positive, got {}", self.offset_scale));
        }
        if let ScanStrategy::Chunked(0) = self.scan {
            return cfg("scan chunk length must be positive".into());
        }
        Ok(())
    }

    /// Checks that `[H, W, D]` survives `levels - 1` halvings.
    pub fn check_spatial(&self, spatial: &[usize]) -> Result<()> {
        let k = self.divisor();
        for (axis, &n) in ["H", "W", "D"].iter().zip(spatial) {
            if n == 0 || n % k != 0 {
                return Err(shape_err(
                    "network",
                    *axis,
                    format!("extent {n} is not a multiple of {k}"),
                ));
            }
        }
        Ok(())
    }

    /// Scalar parameter total; independent of the seed.
    pub fn parameter_count(&self) -> Result<usize> {
        Ok(Network::build(self.clone(), 0)?.parameter_count())
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    encoder: Vec<MdsConvBlock>,
    bottleneck: RvmLayer,
    decoder: Vec<RvmLayer>,
    params: ParamStore,
}

fn rvm(prefix: String, channels: usize, out: usize, cfg: &NetworkConfig) -> RvmLayer {
    let mut layer = RvmLayer::new(prefix, channels, out, cfg.expand, cfg.state_dim);
    layer.vssm.ssm.strategy = cfg.scan;
    layer
}

fn skip_name(i: usize, j: usize, part: &str) -> String {
    format!("skip.{i}_{j}.{part}")
}

impl Network {
    /// Deterministic initialisation from `seed`.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut net = Self::skeleton(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        net.init_params(&mut store, &mut rng)?;
        net.params = store;
        Ok(net)
    }

    /// Builds the layer descriptors around an existing parameter set, checking
    /// that names and shapes match the configuration exactly.
    pub fn from_params(config: NetworkConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::build(config, 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Format(format!("missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self { params, ..reference })
    }

    fn skeleton(config: NetworkConfig) -> Self {
        let n = config.levels();
        let l = &config.ladder;
        let encoder = (0..n - 1)
            .map(|i| {
                let cin = if i == 0 { config.in_channels } else { l[i - 1] };
                let mut b = MdsConvBlock::new(format!("enc.{i}"), cin, l[i], config.c_max);
                b.offset_scale = config.offset_scale;
                b
            })
            .collect();
        let bottleneck = rvm("bottleneck".into(), l[n - 2], l[n - 1], &config);
        let decoder = (2..n)
            .map(|i| rvm(format!("dec.{i}"), l[i], l[i - 1], &config))
            .collect();
        Self {
            config,
            encoder,
            bottleneck,
            decoder,
            params: ParamStore::new(),
        }
    }

    fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let cfg = &self.config;
        let (n, l) = (cfg.levels(), &cfg.ladder);
        for block in &self.encoder {
            block.init(store, rng)?;
        }
        self.bottleneck.init(store, rng)?;
        if cfg.dense_skips {
            for i in 0..n - 1 {
                for j in 1..n - i {
                    let cin = j * l[i] + l[i + 1];
                    store.insert(
                        skip_name(i, j, "weight"),
                        init::he_uniform(&[l[i], cin, 3, 3, 3], cin * 27, rng),
                    )?;
                    store.insert(skip_name(i, j, "bias"), Tensor::zeros([l[i]]))?;
                    store.insert(skip_name(i, j, "gn.gain"), Tensor::ones([l[i]]))?;
                    store.insert(skip_name(i, j, "gn.bias"), Tensor::zeros([l[i]]))?;
                }
            }
        }
        for layer in &self.decoder {
            layer.init(store, rng)?;
        }
        store.insert("dec.1.weight", init::he_uniform(&[l[0], l[1], 3, 3, 3], l[1] * 27, rng))?;
        store.insert("dec.1.bias", Tensor::zeros([l[0]]))?;
        if cfg.transposed_head {
            store.insert(
                "head.up.weight",
                init::he_uniform(&[l[0], l[0], 2, 2, 2], l[0] * 8, rng),
            )?;
            store.insert("head.up.bias", Tensor::zeros([l[0]]))?;
        }
        let k = cfg.out_classes;
        store.insert("head.weight", init::he_uniform(&[k, l[0], 3, 3, 3], l[0] * 27, rng))?;
        store.insert("head.bias", Tensor::zeros([k]))?;
        Ok(())
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn encoder_blocks(&self) -> &[MdsConvBlock] {
        &self.encoder
    }

    pub fn bottleneck(&self) -> &RvmLayer {
        &self.bottleneck
    }

    /// Decoder RVM layers for levels `2..n`, lowest level first.
    pub fn decoder_layers(&self) -> &[RvmLayer] {
        &self.decoder
    }

    /// Fresh graph context over this network's parameters.
    pub fn bind(&self, track: bool) -> Bound<'_> {
        Bound::new(&self.params, track)
    }

    /// Per-level features; the last entry is the bottleneck output.
    pub fn encoder_forward(&self, ctx: &mut Bound, x: Var) -> Result<Vec<Var>> {
        let s = ctx.graph.shape(x).to_vec();
        if s.len() != 5 {
            return Err(shape_err(
                "encoder_forward",
                "rank",
                format!("expected [B, C, H, W, D], got {s:?}"),
            ));
        }
        if s[1] != self.config.in_channels {
            return Err(shape_err(
                "encoder_forward",
                "C",
                format!("{} vs {}", s[1], self.config.in_channels),
            ));
        }
        self.config.check_spatial(&s[2..])?;
        let mut feats = Vec::with_capacity(self.config.levels());
        let mut h = x;
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = ctx.graph.pool_max3d(h)?;
            }
            h = block.forward(ctx, h)?;
            feats.push(h);
        }
        let pooled = ctx.graph.pool_max3d(h)?;
        feats.push(self.bottleneck.forward(ctx, pooled)?);
        Ok(feats)
    }

    /// Skip features per level (the bottleneck entry passes through).
    pub fn dense_skip(&self, ctx: &mut Bound, feats: &[Var]) -> Result<Vec<Var>> {
        let n = self.config.levels();
        if feats.len() != n {
            return Err(Error::Contract(format!(
                "dense_skip: expected {n} feature maps, got {}",
                feats.len()
            )));
        }
        if !self.config.dense_skips {
            return Ok(feats.to_vec());
        }
        // rows[i][j] = X[i][j]
        let mut rows: Vec<Vec<Var>> = feats.iter().map(|&f| vec![f]).collect();
        for j in 1..n {
            // column j only needs column j - 1
            for i in 0..n - j {
                let up = ctx.graph.upsample_trilinear(rows[i + 1][j - 1])?;
                let mut parts = rows[i][..j].to_vec();
                parts.push(up);
                let cat = ctx.graph.concat(&parts, 1)?;
                let w = ctx.param(&skip_name(i, j, "weight"))?;
                let b = ctx.param(&skip_name(i, j, "bias"))?;
                let y = ctx.graph.conv3d(cat, w, Some(b), Conv3dOptions::padded(1))?;
                let gg = ctx.param(&skip_name(i, j, "gn.gain"))?;
                let gb = ctx.param(&skip_name(i, j, "gn.bias"))?;
                let groups = gn_groups(self.config.ladder[i])?;
                let y = ctx.graph.normalize(y, Norm::Group(groups), gg, gb)?;
                let y = ctx.graph.relu(y);
                rows[i].push(y);
            }
        }
        Ok(rows.into_iter().map(|r| *r.last().expect("row is nonempty")).collect())
    }

    fn add_at_level(&self, ctx: &mut Bound, level: usize, skip: Var, p: Var) -> Result<Var> {
        let (a, b) = (ctx.graph.shape(skip).to_vec(), ctx.graph.shape(p).to_vec());
        if a != b {
            return Err(Error::Contract(format!(
                "decoder level {level}: skip {a:?} and decoder path {b:?} do not match"
            )));
        }
        ctx.graph.add(skip, p)
    }

    /// Decoder over skip features (last entry = bottleneck); returns
    /// probabilities `[B, classes, H, W, D]`.
    pub fn decoder_forward(&self, ctx: &mut Bound, skips: &[Var]) -> Result<Var> {
        let n = self.config.levels();
        if skips.len() != n {
            return Err(Error::Contract(format!(
                "decoder_forward: expected {n} skips, got {}",
                skips.len()
            )));
        }
        let mut p: Option<Var> = None;
        for level in (2..n).rev() {
            let h = match p {
                Some(p) => self.add_at_level(ctx, level, skips[level], p)?,
                None => skips[level],
            };
            let y = self.decoder[level - 2].forward(ctx, h)?;
            p = Some(ctx.graph.upsample_trilinear(y)?);
        }
        let h = match p {
            Some(p) => self.add_at_level(ctx, 1, skips[1], p)?,
            None => skips[1],
        };
        let (w, b) = (ctx.param("dec.1.weight")?, ctx.param("dec.1.bias")?);
        let q = ctx.graph.conv3d(h, w, Some(b), Conv3dOptions::padded(1))?;
        let up = if self.config.transposed_head {
            let (w, b) = (ctx.param("head.up.weight")?, ctx.param("head.up.bias")?);
            ctx.graph.conv_transpose3d(q, w, Some(b))?
        } else {
            ctx.graph.upsample_trilinear(q)?
        };
        let h = self.add_at_level(ctx, 0, skips[0], up)?;
        let (w, b) = (ctx.param("head.weight")?, ctx.param("head.bias")?);
        let logits = ctx.graph.conv3d(h, w, Some(b), Conv3dOptions::padded(1))?;
        Ok(ctx.graph.sigmoid(logits))
    }

    /// Full forward pass inside an existing context.
    pub fn forward(&self, ctx: &mut Bound, x: Var) -> Result<Var> {
        let feats = self.encoder_forward(ctx, x)?;
        let skips = self.dense_skip(ctx, &feats)?;
        self.decoder_forward(ctx, &skips)
    }

    /// Inference on a `[B, C, H, W, D]` tensor.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut ctx = self.bind(false);
        let xv = ctx.graph.constant(x.clone());
        let y = self.forward(&mut ctx, xv)?;
        Ok(ctx.graph.value(y).clone())
    }
}
