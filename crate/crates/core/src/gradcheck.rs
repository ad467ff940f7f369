//! Central finite-difference checks of analytic gradients.
//!
//! The function under test maps a list of input tensors to a scalar via a
//! graph. For each checked coordinate the central difference
//! `(f(x + h) - f(x - h)) / 2h` is compared with the backward pass using
//! `|a - n| / max(|a|, |n|, floor)`.
//!
//! Piecewise-smooth ops (ReLU, max pooling, border clamping, trilinear cell
//! boundaries) have kinks. When the central difference disagrees but the
//! analytic value matches one of the one-sided slopes, and those slopes differ
//! from each other, the step straddles a kink: the coordinate is counted in
//! `kinks` and excluded from the error. When a step straddles several kinks at
//! once, the coordinate is re-differenced with steps `h/10` and `h/100`; if
//! either agrees within [`REFINED_TOLERANCE`] the coordinate is also counted
//! as a kink and the refined error is kept. A wrong gradient disagrees at
//! every step size, so neither rule can hide it.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use indexmap::IndexMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Agreement required after the step is refined around a kink.
pub const REFINED_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Absolute floor in the relative-error denominator.
    pub floor: f64,
    /// Check at most this many coordinates per input (all when `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Coordinate with the largest error.
#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckResult {
    pub max_rel_error: f64,
    pub worst: Option<Worst>,
    pub checked: usize,
    pub kinks: usize,
}

impl GradCheckResult {
    pub fn merge(&mut self, other: &GradCheckResult) {
        if other.worst.is_some() && (self.worst.is_none() || other.max_rel_error > self.max_rel_error) {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.clone();
        }
        self.checked += other.checked;
        self.kinks += other.kinks;
    }
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Shared loop: `eval(slot, index, delta)` returns `f` with that coordinate shifted.
fn compare<E>(
    slots: &[(String, &Tensor)],
    analytic: &[Tensor],
    f0: f64,
    cfg: GradCheckConfig,
    mut eval: E,
) -> Result<GradCheckResult>
where
    E: FnMut(usize, usize, f64) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut res = GradCheckResult::default();
    let h = cfg.step;
    for (k, (name, value)) in slots.iter().enumerate() {
        let n = value.len();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let fp = eval(k, i, h)?;
            let fm = eval(k, i, -h)?;
            if !(fp.is_finite() && fm.is_finite()) {
                return Err(Error::NonFinite(format!("{name}[{i}]: f(x +- h) not finite")));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[k].data()[i];
            res.checked += 1;
            let mut err = rel(a, numeric, cfg.floor);
            if err > REFINED_TOLERANCE {
                let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
                let straddles = rel(right, left, cfg.floor) > 1e-2;
                let one_sided = rel(a, right, cfg.floor).min(rel(a, left, cfg.floor));
                if straddles && one_sided < 1e-2 {
                    res.kinks += 1;
                    err = 0.0;
                } else {
                    // Several kinks inside one step (a shared bias moving many
                    // sample points): a correct gradient is recovered by
                    // shrinking the step, a wrong one is not.
                    for div in [10.0, 100.0] {
                        let hk = h / div;
                        let refined = (eval(k, i, hk)? - eval(k, i, -hk)?) / (2.0 * hk);
                        let e = rel(a, refined, cfg.floor);
                        if e < REFINED_TOLERANCE {
                            res.kinks += 1;
                            err = e;
                            break;
                        }
                    }
                }
            }
            if res.worst.is_none() || err > res.max_rel_error {
                res.max_rel_error = res.max_rel_error.max(err);
                res.worst = Some(Worst {
                    name: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(res)
}

/// Evaluates `f` on fresh leaves built from `inputs`.
fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Analytic gradients of `f` with respect to every input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out).item()?;
    g.backward(out)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    Ok((value, grads))
}

/// Compares analytic and numeric gradients of scalar `f` at `inputs`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], cfg: GradCheckConfig) -> Result<GradCheckResult>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (f0, grads) = analytic_gradients(&f, inputs)?;
    let slots: Vec<(String, &Tensor)> = inputs
        .iter()
        .enumerate()
        .map(|(k, t)| (format!("input{k}"), t))
        .collect();
    let mut work = inputs.to_vec();
    compare(&slots, &grads, f0, cfg, |k, i, d| {
        let x = inputs[k].data()[i];
        work[k].data_mut()[i] = x + d;
        let v = eval(&f, &work);
        work[k].data_mut()[i] = x;
        v
    })
}

/// Like [`check_gradients`] but also differentiates every parameter of
/// `store` that `f` binds through the [`Bound`] context.
pub fn check_store_gradients<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    f: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckResult>
where
    F: Fn(&mut Bound, &[Var]) -> Result<Var>,
{
    let run =
        |store: &ParamStore, inputs: &[Tensor], track: bool| -> Result<(f64, Vec<Tensor>, IndexMap<String, Tensor>)> {
            let mut ctx = Bound::new(store, track);
            let vars: Vec<Var> = inputs.iter().map(|t| ctx.graph.leaf(t.clone(), track)).collect();
            let out = f(&mut ctx, &vars)?;
            let value = ctx.graph.value(out).item()?;
            if !track {
                return Ok((value, Vec::new(), IndexMap::new()));
            }
            ctx.graph.backward(out)?;
            let gx = vars
                .iter()
                .zip(inputs)
                .map(|(&v, t)| {
                    ctx.graph
                        .grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
                })
                .collect();
            Ok((value, gx, ctx.grads()))
        };
    let (f0, gx, gp) = run(store, inputs, true)?;
    let mut slots: Vec<(String, &Tensor)> = inputs
        .iter()
        .enumerate()
        .map(|(k, t)| (format!("input{k}"), t))
        .collect();
    let mut analytic = gx;
    for (name, t) in store.iter() {
        slots.push((name.to_string(), t));
        analytic.push(
            gp.get(name)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())),
        );
    }
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut work_store = store.clone();
    let mut work_inputs = inputs.to_vec();
    let n_in = inputs.len();
    compare(&slots, &analytic, f0, cfg, |k, i, d| {
        if k < n_in {
            let x = inputs[k].data()[i];
            work_inputs[k].data_mut()[i] = x + d;
            let v = run(&work_store, &work_inputs, false);
            work_inputs[k].data_mut()[i] = x;
            v.map(|r| r.0)
        } else {
            let name = &names[k - n_in];
            let x = store.get(name)?.data()[i];
            work_store.get_mut(name)?.data_mut()[i] = x + d;
            let v = run(&work_store, &work_inputs, false);
            work_store.get_mut(name)?.data_mut()[i] = x;
            v.map(|r| r.0)
        }
    })
}

/// `sum(r * y)` with fixed pseudo-random weights `r`, turning any tensor into
/// a scalar whose gradient exercises every output element.
pub fn random_projection(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = g.constant(random_tensor(shape, seed, 1.0));
    let prod = g.mul(y, r)?;
    Ok(g.sum(prod))
}

/// Uniform values in `[-scale, scale]`.
pub fn random_tensor(shape: impl Into<Vec<usize>>, seed: u64, scale: f64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..=scale))
}
