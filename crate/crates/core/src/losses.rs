//! Triplet margin loss, gram-matrix style losses and their weighted hybrid.
//!
//! The per-layer style term is negated: it equals `K` when the positive and
//! negative representations coincide and decreases as they diverge, so
//! minimizing it pushes the two items apart in style space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardOutput;
use crate::tensor::{Graph, Tensor, Var};

/// Added under the square root of the euclidean distance so its gradient
/// stays finite at zero.
pub const DISTANCE_EPS: f32 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    SquaredEuclidean,
    Euclidean,
}

/// Which representation of a tapped layer the style loss compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleMode {
    /// The dense style-head output.
    AuxVector,
    /// The gram matrix itself.
    RawGram,
}

/// How the per-layer scale `K_l` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlPolicy {
    /// `K_l = m_l`, the spatial size of the tapped layer.
    EqualToMl,
    Constant(f32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossParams {
    /// Triplet margin.
    pub alpha: f32,
    /// Style-term offset; a layer's style loss equals this at zero difference.
    pub k: f32,
    pub k_l_policy: KlPolicy,
    pub w1: f32,
    pub w2: f32,
    pub style_mode: StyleMode,
    pub distance: DistanceKind,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            k: 2.0,
            k_l_policy: KlPolicy::EqualToMl,
            w1: 1.0,
            w2: 1.0,
            style_mode: StyleMode::AuxVector,
            distance: DistanceKind::Euclidean,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config(format!("loss.{key}: {msg}")));
        for (key, v) in [("alpha", self.alpha), ("k", self.k), ("w1", self.w1), ("w2", self.w2)] {
            if !v.is_finite() {
                return bad(key, "must be finite");
            }
        }
        if self.alpha < 0.0 {
            return bad("alpha", "must be >= 0");
        }
        if self.w1 < 0.0 {
            return bad("w1", "must be >= 0");
        }
        if self.w2 < 0.0 {
            return bad("w2", "must be >= 0");
        }
        if self.w1 + self.w2 <= 0.0 {
            return bad("w2", "w1 + w2 must be positive");
        }
        if let KlPolicy::Constant(c) = self.k_l_policy {
            if !c.is_finite() {
                return bad("k_l_policy", "constant must be finite");
            }
        }
        Ok(())
    }

    pub fn k_l(&self, m_l: usize) -> f64 {
        match self.k_l_policy {
            KlPolicy::EqualToMl => m_l as f64,
            KlPolicy::Constant(c) => c as f64,
        }
    }
}

/// Scalar values of each term of one hybrid loss evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f32,
    pub triplet: f32,
    /// One entry per tapped layer; empty when no style outputs were given.
    pub style: Vec<f32>,
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

pub fn distance(g: &mut Graph, e1: Var, e2: Var, kind: DistanceKind) -> Result<Var> {
    same_shape(g, e1, e2, "distance")?;
    let diff = g.sub(e1, e2)?;
    let sq = g.sum_squares(diff)?;
    match kind {
        DistanceKind::SquaredEuclidean => Ok(sq),
        DistanceKind::Euclidean => g.sqrt(sq, DISTANCE_EPS),
    }
}

/// `max(alpha + d(A,P) - d(A,N), 0)`
pub fn triplet_loss(g: &mut Graph, a: Var, p: Var, n: Var, params: &LossParams) -> Result<Var> {
    same_shape(g, a, p, "triplet_loss")?;
    same_shape(g, a, n, "triplet_loss")?;
    let dap = distance(g, a, p, params.distance)?;
    let dan = distance(g, a, n, params.distance)?;
    let gap = g.sub(dap, dan)?;
    let shifted = g.add_scalar(gap, params.alpha)?;
    g.relu(shifted)
}

fn style_norm(n_l: usize, m_l: usize) -> f64 {
    let (n, m) = (n_l as f64, m_l as f64);
    1.0 / (4.0 * n * n * m * m)
}

/// Classic style loss `1/(4 n^2 m^2) * sum (gm1 - gm2)^2`, evaluated
/// outside any graph.
pub fn style_loss_reference(gm1: &Tensor, gm2: &Tensor, n_l: usize, m_l: usize) -> Result<f64> {
    if gm1.shape() != gm2.shape() {
        return Err(Error::dim(format!(
            "style_loss_reference: shapes {:?} and {:?} differ",
            gm1.shape(),
            gm2.shape()
        )));
    }
    if n_l == 0 || m_l == 0 {
        return Err(Error::Contract("n_l and m_l must be positive".into()));
    }
    let ss: f64 = gm1
        .data()
        .iter()
        .zip(gm2.data())
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum();
    Ok(style_norm(n_l, m_l) * ss)
}

/// Negated per-layer style loss `K - K_l/(4 n^2 m^2) * sum (P - N)^2`.
pub fn layer_style_loss(
    g: &mut Graph,
    rep_p: Var,
    rep_n: Var,
    n_l: usize,
    m_l: usize,
    params: &LossParams,
) -> Result<Var> {
    same_shape(g, rep_p, rep_n, "layer_style_loss")?;
    if n_l == 0 || m_l == 0 {
        return Err(Error::Contract("n_l and m_l must be positive".into()));
    }
    let factor = (params.k_l(m_l) * style_norm(n_l, m_l)) as f32;
    let diff = g.sub(rep_p, rep_n)?;
    let ss = g.sum_squares(diff)?;
    let scaled = g.scale(ss, -factor)?;
    g.add_scalar(scaled, params.k)
}

/// `w1 * triplet + w2 * sum_l style_l(P, N)` for one triplet.
///
/// A term whose weight is zero is left out of the total entirely, so the
/// reductions are exact. Style terms are still evaluated for the breakdown
/// whenever the outputs carry aux heads.
pub fn hybrid_loss(
    g: &mut Graph,
    a: &ForwardOutput,
    p: &ForwardOutput,
    n: &ForwardOutput,
    params: &LossParams,
) -> Result<(Var, LossBreakdown)> {
    if a.aux.len() != p.aux.len() || p.aux.len() != n.aux.len() {
        return Err(Error::Contract(format!(
            "aux output counts differ: {}, {}, {}",
            a.aux.len(),
            p.aux.len(),
            n.aux.len()
        )));
    }
    let trip = triplet_loss(g, a.embedding, p.embedding, n.embedding, params)?;
    let mut style_vars = Vec::with_capacity(p.aux.len());
    for (pa, na) in p.aux.iter().zip(&n.aux) {
        if (pa.n_l, pa.m_l) != (na.n_l, na.m_l) {
            return Err(Error::Contract("positive and negative taps disagree on layer sizes".into()));
        }
        let (rp, rn) = match params.style_mode {
            StyleMode::AuxVector => (pa.style_vector, na.style_vector),
            StyleMode::RawGram => (pa.raw_gram, na.raw_gram),
        };
        style_vars.push(layer_style_loss(g, rp, rn, pa.n_l, pa.m_l, params)?);
    }

    let weighted_trip = if params.w1 != 0.0 {
        Some(g.scale(trip, params.w1)?)
    } else {
        None
    };
    let weighted_style = if params.w2 != 0.0 && !style_vars.is_empty() {
        let mut sum = style_vars[0];
        for v in &style_vars[1..] {
            sum = g.add(sum, *v)?;
        }
        Some(g.scale(sum, params.w2)?)
    } else {
        None
    };
    let total = match (weighted_trip, weighted_style) {
        (Some(t), Some(s)) => g.add(t, s)?,
        (Some(t), None) => t,
        (None, Some(s)) => s,
        (None, None) => g.scale(trip, 0.0)?,
    };
    let breakdown = LossBreakdown {
        total: g.value(total).item()?,
        triplet: g.value(trip).item()?,
        style: style_vars
            .iter()
            .map(|v| g.value(*v).item())
            .collect::<Result<_>>()?,
    };
    Ok((total, breakdown))
}
