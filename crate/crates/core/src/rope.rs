//! Rotary position encoding.
//!
//! Frequencies follow `theta_i = base^(-2(i-1)/d)` for `i = 1..=d/2`; pair
//! `(x_{2i}, x_{2i+1})` at position `p` is rotated by `p * theta_{i+1}`.
//! The same table serves attention's Q/K and the state space layer's C/B.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Precomputed `cos(p * theta_i)` / `sin(p * theta_i)` for
/// `p < max_positions`, `i < head_dim / 2`.
#[derive(Clone, Debug)]
pub struct RopeTable {
    base: f64,
    head_dim: usize,
    max_positions: usize,
    thetas: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(base: f64, head_dim: usize, max_positions: usize) -> Result<Self> {
        if head_dim < 2 || head_dim % 2 != 0 {
            return Err(Error::config("rope.head_dim", format!("must be even and >= 2, got {head_dim}")));
        }
        if max_positions == 0 {
            return Err(Error::config("rope.max_positions", "must be >= 1"));
        }
        if !(base > 0.0) {
            return Err(Error::config("rope.base", "must be positive"));
        }
        let half = head_dim / 2;
        let thetas: Vec<f64> = (1..=half)
            .map(|i| base.powf(-2.0 * (i as f64 - 1.0) / head_dim as f64))
            .collect();
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for p in 0..max_positions {
            for &th in &thetas {
                let angle = p as f64 * th;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(RopeTable {
            base,
            head_dim,
            max_positions,
            thetas,
            cos,
            sin,
        })
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn cos(&self, position: usize, pair: usize) -> f64 {
        self.cos[position * self.head_dim / 2 + pair]
    }

    pub fn sin(&self, position: usize, pair: usize) -> f64 {
        self.sin[position * self.head_dim / 2 + pair]
    }

    fn rows<T: Real>(&self, positions: &[usize]) -> Result<(Vec<T>, Vec<T>)> {
        let half = self.head_dim / 2;
        let mut c = Vec::with_capacity(positions.len() * half);
        let mut s = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            if p >= self.max_positions {
                return Err(Error::Range(format!(
                    "position {p} outside rope table of {} positions",
                    self.max_positions
                )));
            }
            c.extend(self.cos[p * half..(p + 1) * half].iter().map(|&x| T::from_f64(x)));
            s.extend(self.sin[p * half..(p + 1) * half].iter().map(|&x| T::from_f64(x)));
        }
        Ok((c, s))
    }

    /// Rotates `x [batch, len, heads, head_dim]`; `positions` has one entry
    /// per sequence index.
    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, positions: &[usize]) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.head_dim || shape[1] != positions.len() {
            return Err(Error::dim("apply_rope", &shape, &[positions.len(), self.head_dim]));
        }
        let (c, s) = self.rows(positions)?;
        g.rotate_pairs(x, c, s)
    }

    /// Convenience wrapper with positions `0..len`.
    pub fn apply_seq<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let len = g.shape(x).get(1).copied().unwrap_or(0);
        let positions: Vec<usize> = (0..len).collect();
        self.apply(g, x, &positions)
    }
}

/// Eager form of [`RopeTable::apply`].
pub fn apply_rope<T: Real>(x: &Tensor<T>, table: &RopeTable, positions: &[usize]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = table.apply(&mut g, v, positions)?;
    Ok(g.tensor(y))
}
