//! Structured state space duality.
//!
//! A scalar-gated selective recurrence
//!
//! ```text
//! h_t = a_t h_{t-1} + B_t x_t^T,    y_t = C_t h_t
//! ```
//!
//! equals the masked quadratic form `Y = (L o C B^T) X` with the
//! 1-semiseparable mask `L[i, j] = a_{j+1} ... a_i`. [`quadratic_form`]
//! materializes `L`; [`chunked_scan`] is quadratic inside fixed-size chunks
//! and carries a decayed state across chunk boundaries, so its cost is linear
//! in sequence length. Both operate on `log a` to keep long products stable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::rng::{self, StreamRng};
use crate::rope::RopeTable;
use crate::tensor::Tensor;

/// Source of positional information inside an SSD layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    /// Rotate B and C with RoPE over the state dimension.
    Rope,
    /// Only the cumulative product of the selective gate `a_t`.
    GateOnly,
    /// Depthwise causal conv on the x path plus a per-head `D` skip.
    ConvPlusD,
}

impl PositionalMode {
    pub const ALL: [PositionalMode; 3] = [PositionalMode::Rope, PositionalMode::GateOnly, PositionalMode::ConvPlusD];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsdConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_state: usize,
    pub chunk_len: usize,
    #[serde(default = "default_conv_width")]
    pub conv_width: usize,
}

fn default_conv_width() -> usize {
    4
}

impl Default for SsdConfig {
    fn default() -> Self {
        SsdConfig {
            d_model: 128,
            n_heads: 2,
            head_dim: 64,
            d_state: 64,
            chunk_len: 64,
            conv_width: 4,
        }
    }
}

impl SsdConfig {
    pub fn inner_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self, mode: PositionalMode) -> Result<()> {
        let pos = |f: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("ssd.{f}"), "must be >= 1"))
            } else {
                Ok(())
            }
        };
        pos("d_model", self.d_model)?;
        pos("n_heads", self.n_heads)?;
        pos("head_dim", self.head_dim)?;
        pos("d_state", self.d_state)?;
        pos("chunk_len", self.chunk_len)?;
        pos("conv_width", self.conv_width)?;
        if mode == PositionalMode::Rope && self.d_state % 2 != 0 {
            return Err(Error::config("ssd.d_state", "rope mode needs an even state dimension"));
        }
        Ok(())
    }

    /// Closed-form parameter count of one layer in `mode`.
    pub fn param_count(&self, mode: PositionalMode) -> usize {
        let (d, hp, s, h) = (self.d_model, self.inner_dim(), self.d_state, self.n_heads);
        let base = d * hp + 2 * d * s + d * h + h + h + hp * d;
        match mode {
            PositionalMode::ConvPlusD => base + hp * self.conv_width + h,
            _ => base,
        }
    }
}

fn check_ssd_shapes<T: Real>(g: &Graph<'_, T>, x: Var, b: Var, c: Var, log_a: Var) -> Result<(usize, usize, usize, usize, usize)> {
    let sx = g.shape(x);
    let sb = g.shape(b);
    if sx.len() != 4 || sb.len() != 4 || g.shape(c) != sb || sb[..3] != sx[..3] || g.shape(log_a) != &sx[..3] {
        return Err(Error::dim("ssd", sx, sb));
    }
    Ok((sx[0], sx[1], sx[2], sx[3], sb[3]))
}

/// `Y = (L o C B^T) X` with `L = exp(segsum(log_a))`.
///
/// Shapes: `x [b, l, h, p]`, `b, c [b, l, h, s]`, `log_a [b, l, h]`.
pub fn quadratic_form<T: Real>(g: &mut Graph<'_, T>, x: Var, b: Var, c: Var, log_a: Var) -> Result<Var> {
    check_ssd_shapes(g, x, b, c, log_a)?;
    let xh = g.permute(x, &[0, 2, 1, 3])?;
    let bh = g.permute(b, &[0, 2, 1, 3])?;
    let ch = g.permute(c, &[0, 2, 1, 3])?;
    let la = g.permute(log_a, &[0, 2, 1])?;
    let y = masked_block(g, xh, bh, ch, la)?;
    g.permute(y, &[0, 2, 1, 3])
}

/// Shared intra-block step: `((C B^T) o exp(segsum(la))) X` over the last
/// two axes of arbitrarily batched inputs.
fn masked_block<T: Real>(g: &mut Graph<'_, T>, x: Var, b: Var, c: Var, la: Var) -> Result<Var> {
    let ss = g.segsum(la)?;
    let mask = g.exp(ss);
    let bt = g.transpose(b)?;
    let scores = g.matmul(c, bt)?;
    let m = g.mul(scores, mask)?;
    g.matmul(m, x)
}

/// Chunked evaluation of the same operator, linear in `l` for a fixed
/// `chunk_len`. Sequences are zero-padded up to a chunk multiple; padding
/// sits after every real position so it never reaches a real output.
pub fn chunked_scan<T: Real>(g: &mut Graph<'_, T>, x: Var, b: Var, c: Var, log_a: Var, chunk_len: usize) -> Result<Var> {
    if chunk_len == 0 {
        return Err(Error::config("ssd.chunk_len", "must be >= 1"));
    }
    let (bs, l, h, p, s) = check_ssd_shapes(g, x, b, c, log_a)?;
    let q = chunk_len.min(l.max(1));
    let nc = l.div_ceil(q);
    let lp = nc * q;
    let (x, b, c, log_a) = if lp > l {
        let pad = |g: &mut Graph<'_, T>, v: Var| -> Result<Var> {
            let mut shape = g.shape(v).to_vec();
            shape[1] = lp - l;
            let z = g.constant(Tensor::zeros(&shape));
            g.concat(&[v, z], 1)
        };
        (pad(g, x)?, pad(g, b)?, pad(g, c)?, pad(g, log_a)?)
    } else {
        (x, b, c, log_a)
    };

    let to_chunks = |g: &mut Graph<'_, T>, v: Var, last: usize| -> Result<Var> {
        let t = g.permute(v, &[0, 2, 1, 3])?;
        g.reshape(t, &[bs, h, nc, q, last])
    };
    let xh = to_chunks(g, x, p)?;
    let bh = to_chunks(g, b, s)?;
    let ch = to_chunks(g, c, s)?;
    let la = g.permute(log_a, &[0, 2, 1])?;
    let la = g.reshape(la, &[bs, h, nc, q])?;

    let mut y = masked_block(g, xh, bh, ch, la)?;

    if nc > 1 {
        let cum = g.cumsum(la, 3)?;
        let total = g.slice(cum, 3, q - 1, 1)?;
        let total_b = g.broadcast_to(total, &[bs, h, nc, q])?;
        let rem = g.sub(total_b, cum)?;
        let decay_to_end = g.exp(rem);
        let decay_to_end = g.reshape(decay_to_end, &[bs, h, nc, q, 1])?;
        let decay_to_end = g.broadcast_to(decay_to_end, &[bs, h, nc, q, p])?;
        let xw = g.mul(xh, decay_to_end)?;
        let bt = g.transpose(bh)?;
        // per-chunk end states [b, h, nc, s, p]
        let states = g.matmul(bt, xw)?;
        let states = g.reshape(states, &[bs * h, nc, s * p])?;
        let total = g.reshape(total, &[bs * h, nc])?;
        let entering = g.decay_scan(states, total)?;
        let entering = g.reshape(entering, &[bs, h, nc, s, p])?;
        let off = g.matmul(ch, entering)?;
        let decay_in = g.exp(cum);
        let decay_in = g.reshape(decay_in, &[bs, h, nc, q, 1])?;
        let decay_in = g.broadcast_to(decay_in, &[bs, h, nc, q, p])?;
        let off = g.mul(off, decay_in)?;
        y = g.add(y, off)?;
    }

    let y = g.reshape(y, &[bs, h, lp, p])?;
    let y = g.permute(y, &[0, 2, 1, 3])?;
    if lp > l {
        g.slice(y, 1, 0, l)
    } else {
        Ok(y)
    }
}

fn log_gate<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if let Some(bad) = a.data().iter().find(|&&v| !(v > T::ZERO && v <= T::ONE)) {
        return Err(Error::Input(format!("gate value {bad} outside (0, 1]")));
    }
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v.ln()).collect())
}

/// Eager quadratic form with gates `a` in `(0, 1]`.
pub fn ssd_quadratic<T: Real>(x: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    let la = log_gate(a)?;
    let mut g = Graph::new();
    let (xv, bv, cv, lv) = (g.constant(x.clone()), g.constant(b.clone()), g.constant(c.clone()), g.constant(la));
    let y = quadratic_form(&mut g, xv, bv, cv, lv)?;
    Ok(g.tensor(y))
}

/// Eager chunked scan with gates `a` in `(0, 1]`.
pub fn ssd_chunked<T: Real>(x: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>, a: &Tensor<T>, chunk_len: usize) -> Result<Tensor<T>> {
    let la = log_gate(a)?;
    let mut g = Graph::new();
    let (xv, bv, cv, lv) = (g.constant(x.clone()), g.constant(b.clone()), g.constant(c.clone()), g.constant(la));
    let y = chunked_scan(&mut g, xv, bv, cv, lv, chunk_len)?;
    Ok(g.tensor(y))
}

/// Eager segment sum.
pub fn segsum<T: Real>(a_log: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(a_log.clone());
    let y = g.segsum(v)?;
    Ok(g.tensor(y))
}

/// Parameter handles of one SSD layer. No projection carries a bias; the
/// only bias is the `dt` offset inside the softplus.
#[derive(Clone, Debug)]
pub struct SsdLayer {
    pub config: SsdConfig,
    pub mode: PositionalMode,
    pub w_x: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_dt: ParamId,
    pub b_dt: ParamId,
    pub a_log: ParamId,
    pub conv: Option<ParamId>,
    pub d_skip: Option<ParamId>,
    pub w_out: ParamId,
}

/// Intermediate values captured during a forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct SsdTrace {
    pub b: Var,
    pub c: Var,
    pub log_a: Var,
    pub y: Var,
}

/// Inverse of softplus: `ln(e^y - 1)`.
fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsdLayer {
    pub const DT_MIN: f64 = 1e-3;
    pub const DT_MAX: f64 = 1e-1;
    pub const A_MIN: f64 = 1.0;
    pub const A_MAX: f64 = 16.0;

    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, config: &SsdConfig, mode: PositionalMode, rng: &mut StreamRng, init_std: f64) -> Result<Self> {
        use rand::Rng;
        config.validate(mode)?;
        let (d, hp, s, h) = (config.d_model, config.inner_dim(), config.d_state, config.n_heads);
        let mat = |store: &mut ParamStore<T>, rng: &mut StreamRng, name: &str, r: usize, c: usize| {
            store.add(format!("{prefix}.{name}"), rng::normal(rng, &[r, c], init_std), true)
        };
        let w_x = mat(store, rng, "w_x", d, hp);
        let w_b = mat(store, rng, "w_b", d, s);
        let w_c = mat(store, rng, "w_c", d, s);
        let w_dt = mat(store, rng, "w_dt", d, h);
        let (lo, hi) = (Self::DT_MIN.ln(), Self::DT_MAX.ln());
        let b_dt = Tensor::from_fn(&[h], |_| T::from_f64(inv_softplus(rng.gen_range(lo..hi).exp())));
        let b_dt = store.add(format!("{prefix}.b_dt"), b_dt, false);
        let a_log = rng::uniform(rng, &[h], Self::A_MIN.ln(), Self::A_MAX.ln());
        let a_log = store.add(format!("{prefix}.a_log"), a_log, false);
        let (conv, d_skip) = if mode == PositionalMode::ConvPlusD {
            let bound = 1.0 / (config.conv_width as f64).sqrt();
            let w = rng::uniform(rng, &[hp, config.conv_width], -bound, bound);
            let conv = store.add(format!("{prefix}.conv"), w, true);
            let dsk = store.add(format!("{prefix}.d_skip"), Tensor::full(&[h], T::ONE), false);
            (Some(conv), Some(dsk))
        } else {
            (None, None)
        };
        let w_out = mat(store, rng, "w_out", hp, d);
        Ok(SsdLayer {
            config: config.clone(),
            mode,
            w_x,
            w_b,
            w_c,
            w_dt,
            b_dt,
            a_log,
            conv,
            d_skip,
            w_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, rope: &RopeTable) -> Result<Var> {
        self.forward_traced(g, x, rope, None)
    }

    /// `x [b, l, d_model] -> [b, l, d_model]`.
    pub fn forward_traced<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, rope: &RopeTable, trace: Option<&mut SsdTrace>) -> Result<Var> {
        let cfg = &self.config;
        cfg.validate(self.mode)?;
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != cfg.d_model {
            return Err(Error::dim("ssd_layer", &shape, &[cfg.d_model]));
        }
        let (bs, l) = (shape[0], shape[1]);
        let (h, p, s) = (cfg.n_heads, cfg.head_dim, cfg.d_state);

        let mut xs = g.matmul(x, self.w_x.var())?;
        if let Some(conv) = self.conv {
            xs = g.causal_conv(xs, conv.var())?;
        }
        let mut b = g.matmul(x, self.w_b.var())?;
        let mut c = g.matmul(x, self.w_c.var())?;
        b = g.reshape(b, &[bs, l, 1, s])?;
        c = g.reshape(c, &[bs, l, 1, s])?;
        if self.mode == PositionalMode::Rope {
            if rope.head_dim() != s {
                return Err(Error::config("ssd.d_state", format!("rope table has dim {}, state has {s}", rope.head_dim())));
            }
            b = rope.apply_seq(g, b)?;
            c = rope.apply_seq(g, c)?;
        }
        let b = g.broadcast_to(b, &[bs, l, h, s])?;
        let c = g.broadcast_to(c, &[bs, l, h, s])?;

        let dt = g.matmul(x, self.w_dt.var())?;
        let bias = g.reshape(self.b_dt.var(), &[1, 1, h])?;
        let bias = g.broadcast_to(bias, &[bs, l, h])?;
        let dt = g.add(dt, bias)?;
        let dt = g.softplus(dt);
        let rate = g.exp(self.a_log.var());
        let rate = g.reshape(rate, &[1, 1, h])?;
        let rate = g.broadcast_to(rate, &[bs, l, h])?;
        let prod = g.mul(dt, rate)?;
        let log_a = g.neg(prod);

        let xs4 = g.reshape(xs, &[bs, l, h, p])?;
        let mut y = chunked_scan(g, xs4, b, c, log_a, cfg.chunk_len)?;
        if let Some(d_skip) = self.d_skip {
            let dd = g.reshape(d_skip.var(), &[1, 1, h, 1])?;
            let dd = g.broadcast_to(dd, &[bs, l, h, p])?;
            let skip = g.mul(xs4, dd)?;
            y = g.add(y, skip)?;
        }
        if let Some(t) = trace {
            *t = SsdTrace { b, c, log_a, y };
        }
        let y = g.reshape(y, &[bs, l, h * p])?;
        g.matmul(y, self.w_out.var())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_sum_case() {
        let x = Tensor::<f64>::new(vec![1, 3, 1, 1], vec![1., 2., 3.]).unwrap();
        let ones = Tensor::<f64>::full(&[1, 3, 1, 1], 1.0);
        let a = Tensor::<f64>::full(&[1, 3, 1], 1.0);
        let y = ssd_quadratic(&x, &ones, &ones, &a).unwrap();
        assert_eq!(y.data(), &[1., 3., 6.]);
        for q in [1, 2, 3] {
            let y = ssd_chunked(&x, &ones, &ones, &a, q).unwrap();
            assert_eq!(y.data(), &[1., 3., 6.], "chunk {q}");
        }
    }

    #[test]
    fn vanishing_gate_keeps_only_diagonal() {
        let mut r = rng::stream(5, "t");
        let x: Tensor<f64> = rng::normal(&mut r, &[1, 5, 1, 2], 1.0);
        let b: Tensor<f64> = rng::normal(&mut r, &[1, 5, 1, 3], 1.0);
        let c: Tensor<f64> = rng::normal(&mut r, &[1, 5, 1, 3], 1.0);
        let a = Tensor::<f64>::full(&[1, 5, 1], 1e-300);
        let y = ssd_quadratic(&x, &b, &c, &a).unwrap();
        for t in 0..5 {
            let cb: f64 = (0..3).map(|i| c.data()[t * 3 + i] * b.data()[t * 3 + i]).sum();
            for j in 0..2 {
                assert!((y.data()[t * 2 + j] - cb * x.data()[t * 2 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gates_outside_unit_interval_are_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        let a = Tensor::<f64>::new(vec![1, 2, 1], vec![0.5, 0.0]).unwrap();
        assert!(ssd_quadratic(&x, &x, &x, &a).is_err());
        let a = Tensor::<f64>::new(vec![1, 2, 1], vec![1.5, 0.5]).unwrap();
        assert!(ssd_chunked(&x, &x, &x, &a, 1).is_err());
    }

    #[test]
    fn zero_chunk_is_config_error() {
        let x = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        let a = Tensor::<f64>::full(&[1, 2, 1], 0.5);
        assert!(matches!(ssd_chunked(&x, &x, &x, &a, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn rope_mode_needs_even_state() {
        let cfg = SsdConfig {
            d_model: 4,
            n_heads: 1,
            head_dim: 2,
            d_state: 3,
            chunk_len: 2,
            conv_width: 4,
        };
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::stream(0, "x");
        assert!(SsdLayer::init(&mut store, "l", &cfg, PositionalMode::Rope, &mut r, 0.02).is_err());
        assert!(SsdLayer::init(&mut store, "l", &cfg, PositionalMode::GateOnly, &mut r, 0.02).is_ok());
    }

    #[test]
    fn init_ranges() {
        let cfg = SsdConfig::default();
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::stream(0, "x");
        let layer = SsdLayer::init(&mut store, "l", &cfg, PositionalMode::Rope, &mut r, 0.02).unwrap();
        for &v in store.get(layer.a_log).tensor.data() {
            assert!((1.0..=16.0).contains(&v.exp()));
        }
        for &v in store.get(layer.b_dt).tensor.data() {
            let dt = Real::softplus(v);
            assert!((1e-3..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
        assert_eq!(store.numel(), cfg.param_count(PositionalMode::Rope));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        for mode in PositionalMode::ALL {
            let cfg = SsdConfig {
                d_model: 8,
                n_heads: 2,
                head_dim: 4,
                d_state: 4,
                chunk_len: 3,
                conv_width: 4,
            };
            let mut store = ParamStore::<f64>::new();
            let mut r = rng::stream(0, "x");
            let layer = SsdLayer::init(&mut store, "l", &cfg, mode, &mut r, 0.5).unwrap();
            let rope = RopeTable::new(10_000.0, 4, 16).unwrap();
            let mut g = store.bind();
            let x = g.constant(Tensor::zeros(&[2, 7, 8]));
            let y = layer.forward(&mut g, x, &rope).unwrap();
            assert!(g.value(y).iter().all(|&v| v == 0.0), "{mode:?}");
        }
    }
}
