//! Selective state-space scan kernels.
//!
//! Per channel `e` with state `h in R^N`, `h_0 = 0`:
//!
//! ```text
//! h_t = exp(delta_t[e] * A[e]) * h_{t-1} + delta_t[e] * B_t * u_t[e]
//! y_t[e] = <C_t, h_t> + D[e] * u_t[e]
//! ```
//!
//! `u`, `delta`: `[batch, L, E]`; `A`: `[E, N]`; `B`, `C`: `[batch, L, N]`;
//! `D`: `[E]`.

use crate::error::{shape_err, Error, Result};

/// How the forward recurrence is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScanStrategy {
    /// One pass over `t`.
    #[default]
    Sequential,
    /// Independent zero-state scans per chunk of the given length, joined by
    /// propagating chunk-boundary states through cumulative decay products.
    Chunked(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

/// Borrowed operands of one scan.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a> {
    pub dims: ScanDims,
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d: Option<&'a [f64]>,
}

impl<'a> ScanInputs<'a> {
    /// Validates operand shapes (`u` of rank 2 is treated as batch 1).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        u: (&'a [usize], &'a [f64]),
        delta: (&'a [usize], &'a [f64]),
        a: (&'a [usize], &'a [f64]),
        b: (&'a [usize], &'a [f64]),
        c: (&'a [usize], &'a [f64]),
        d: Option<(&'a [usize], &'a [f64])>,
    ) -> Result<Self> {
        let (batch, len, channels) = match *u.0 {
            [l, e] => (1, l, e),
            [bt, l, e] => (bt, l, e),
            _ => return Err(shape_err("selective_scan", "u", format!("{:?}", u.0))),
        };
        if len == 0 {
            return Err(Error::Contract("selective_scan: empty sequence".into()));
        }
        if delta.0 != u.0 {
            return Err(shape_err(
                "selective_scan",
                "delta",
                format!("{:?} vs u {:?}", delta.0, u.0),
            ));
        }
        let state = match *a.0 {
            [e, n] if e == channels => n,
            _ => return Err(shape_err("selective_scan", "A", format!("{:?}", a.0))),
        };
        for (name, t) in [("B", b.0), ("C", c.0)] {
            let ok = match *t {
                [l, n] => batch == 1 && l == len && n == state,
                [bt, l, n] => bt == batch && l == len && n == state,
                _ => false,
            };
            if !ok {
                return Err(shape_err("selective_scan", name, format!("{t:?}")));
            }
        }
        if let Some((ds, _)) = d {
            if ds != [channels] {
                return Err(shape_err("selective_scan", "D", format!("{ds:?}")));
            }
        }
        let inputs = Self {
            dims: ScanDims {
                batch,
                len,
                channels,
                state,
            },
            u: u.1,
            delta: delta.1,
            a: a.1,
            b: b.1,
            c: c.1,
            d: d.map(|d| d.1),
        };
        for (name, v) in [
            ("u", inputs.u),
            ("delta", inputs.delta),
            ("A", inputs.a),
            ("B", inputs.b),
            ("C", inputs.c),
        ] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Contract(format!("selective_scan: non-finite value in {name}")));
            }
        }
        Ok(inputs)
    }

    #[inline]
    fn seq(&self, bt: usize, t: usize, e: usize) -> usize {
        (bt * self.dims.len + t) * self.dims.channels + e
    }

    #[inline]
    fn state_row(&self, bt: usize, t: usize) -> usize {
        (bt * self.dims.len + t) * self.dims.state
    }

    fn skip(&self, e: usize) -> f64 {
        self.d.map_or(0.0, |d| d[e])
    }
}

pub fn scan_forward(inp: &ScanInputs, strategy: ScanStrategy) -> Vec<f64> {
    match strategy {
        ScanStrategy::Sequential => scan_sequential(inp),
        ScanStrategy::Chunked(chunk) => scan_chunked(inp, chunk.max(1)),
    }
}

fn scan_sequential(inp: &ScanInputs) -> Vec<f64> {
    let ScanDims {
        batch,
        len,
        channels,
        state,
    } = inp.dims;
    let mut y = vec![0.0; batch * len * channels];
    let mut h = vec![0.0; state];
    for bt in 0..batch {
        for e in 0..channels {
            h.fill(0.0);
            let a_row = &inp.a[e * state..][..state];
            for t in 0..len {
                let i = inp.seq(bt, t, e);
                let (dt, ut) = (inp.delta[i], inp.u[i]);
                let r = inp.state_row(bt, t);
                let (b_t, c_t) = (&inp.b[r..r + state], &inp.c[r..r + state]);
                let mut acc = 0.0;
                for n in 0..state {
                    h[n] = (dt * a_row[n]).exp() * h[n] + dt * b_t[n] * ut;
                    acc += c_t[n] * h[n];
                }
                y[i] = acc + inp.skip(e) * ut;
            }
        }
    }
    y
}

fn scan_chunked(inp: &ScanInputs, chunk: usize) -> Vec<f64> {
    let ScanDims {
        batch,
        len,
        channels,
        state,
    } = inp.dims;
    let mut y = vec![0.0; batch * len * channels];
    let n_chunks = len.div_ceil(chunk);
    // per chunk: end-of-chunk zero-start state and total decay
    let mut local_end = vec![0.0; n_chunks * state];
    let mut decay_end = vec![0.0; n_chunks * state];
    let mut carry_in = vec![0.0; n_chunks * state];
    let mut h = vec![0.0; state];
    let mut p = vec![0.0; state];
    for bt in 0..batch {
        for e in 0..channels {
            let a_row = &inp.a[e * state..][..state];
            // phase 1: chunk-local scans (independent across chunks)
            for k in 0..n_chunks {
                h.fill(0.0);
                p.fill(1.0);
                for t in k * chunk..((k + 1) * chunk).min(len) {
                    let i = inp.seq(bt, t, e);
                    let (dt, ut) = (inp.delta[i], inp.u[i]);
                    let r = inp.state_row(bt, t);
                    let (b_t, c_t) = (&inp.b[r..r + state], &inp.c[r..r + state]);
                    let mut acc = 0.0;
                    for n in 0..state {
                        let a = (dt * a_row[n]).exp();
                        h[n] = a * h[n] + dt * b_t[n] * ut;
                        p[n] *= a;
                        acc += c_t[n] * h[n];
                    }
                    y[i] = acc + inp.skip(e) * ut;
                }
                local_end[k * state..][..state].copy_from_slice(&h);
                decay_end[k * state..][..state].copy_from_slice(&p);
            }
            // phase 2: propagate boundary states
            for k in 1..n_chunks {
                for n in 0..state {
                    let prev = carry_in[(k - 1) * state + n];
                    carry_in[k * state + n] = local_end[(k - 1) * state + n] + decay_end[(k - 1) * state + n] * prev;
                }
            }
            // phase 3: add the decayed incoming state to each output
            for k in 1..n_chunks {
                let hin = &carry_in[k * state..][..state];
                p.fill(1.0);
                for t in k * chunk..((k + 1) * chunk).min(len) {
                    let i = inp.seq(bt, t, e);
                    let dt = inp.delta[i];
                    let r = inp.state_row(bt, t);
                    let c_t = &inp.c[r..r + state];
                    let mut acc = 0.0;
                    for n in 0..state {
                        p[n] *= (dt * a_row[n]).exp();
                        acc += c_t[n] * p[n] * hin[n];
                    }
                    y[i] += acc;
                }
            }
        }
    }
    y
}

/// Gradients of a scan with respect to every operand.
pub struct ScanGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

/// Reverse-mode pass. States are recomputed per channel rather than stored.
pub fn scan_backward(inp: &ScanInputs, gy: &[f64]) -> ScanGrads {
    let ScanDims {
        batch,
        len,
        channels,
        state,
    } = inp.dims;
    let mut g = ScanGrads {
        u: vec![0.0; inp.u.len()],
        delta: vec![0.0; inp.delta.len()],
        a: vec![0.0; inp.a.len()],
        b: vec![0.0; inp.b.len()],
        c: vec![0.0; inp.c.len()],
        d: vec![0.0; channels],
    };
    let mut hs = vec![0.0; len * state];
    let mut gh = vec![0.0; state];
    for bt in 0..batch {
        for e in 0..channels {
            let a_row = &inp.a[e * state..][..state];
            let mut prev = vec![0.0; state];
            for t in 0..len {
                let i = inp.seq(bt, t, e);
                let (dt, ut) = (inp.delta[i], inp.u[i]);
                let r = inp.state_row(bt, t);
                let ht = &mut hs[t * state..][..state];
                for n in 0..state {
                    ht[n] = (dt * a_row[n]).exp() * prev[n] + dt * inp.b[r + n] * ut;
                }
                prev.copy_from_slice(ht);
            }
            gh.fill(0.0);
            let skip = inp.skip(e);
            for t in (0..len).rev() {
                let i = inp.seq(bt, t, e);
                let (dt, ut, gt) = (inp.delta[i], inp.u[i], gy[i]);
                let r = inp.state_row(bt, t);
                g.u[i] += gt * skip;
                g.d[e] += gt * ut;
                let (mut gu, mut gdt) = (0.0, 0.0);
                for n in 0..state {
                    let h_t = hs[t * state + n];
                    let h_prev = if t > 0 { hs[(t - 1) * state + n] } else { 0.0 };
                    g.c[r + n] += gt * h_t;
                    gh[n] += gt * inp.c[r + n];
                    let a = (dt * a_row[n]).exp();
                    let da = gh[n] * h_prev;
                    gdt += da * a * a_row[n] + gh[n] * inp.b[r + n] * ut;
                    g.a[e * state + n] += da * a * dt;
                    g.b[r + n] += gh[n] * dt * ut;
                    gu += gh[n] * dt * inp.b[r + n];
                    gh[n] *= a;
                }
                g.u[i] += gu;
                g.delta[i] += gdt;
            }
        }
    }
    g
}
