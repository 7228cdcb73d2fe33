//! 3 x 6 x 3 x 3 box partition of the non-failing cart-pole region.
//!
//! Angle edges are configured in degrees and compared in radians.
//! Bins are half-open `[lo, hi)`; the outermost bins extend to the failure
//! limits and are closed there, so every non-failing state has exactly one
//! cell. The cell index is mixed radix with the cart position outermost and
//! the angular velocity innermost.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::env::{is_failure, ContinuousState, PhysicsParams};
use crate::error::{Error, Result};

pub const X_BINS: usize = 3;
pub const THETA_BINS: usize = 6;
pub const X_DOT_BINS: usize = 3;
pub const THETA_DOT_BINS: usize = 3;
pub const NUM_STATES: usize = X_BINS * THETA_BINS * X_DOT_BINS * THETA_DOT_BINS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiscreteStateId(u16);

impl DiscreteStateId {
    pub fn new(index: usize) -> Option<Self> {
        (index < NUM_STATES).then_some(Self(index as u16))
    }

    pub fn from_bins(bins: BinTuple) -> Option<Self> {
        let BinTuple { x, theta, x_dot, theta_dot } = bins;
        if x >= X_BINS || theta >= THETA_BINS || x_dot >= X_DOT_BINS || theta_dot >= THETA_DOT_BINS {
            return None;
        }
        Self::new(
            x * THETA_BINS * X_DOT_BINS * THETA_DOT_BINS
                + theta * X_DOT_BINS * THETA_DOT_BINS
                + x_dot * THETA_DOT_BINS
                + theta_dot,
        )
    }

    pub fn bins(self) -> BinTuple {
        let mut rest = self.0 as usize;
        let theta_dot = rest % THETA_DOT_BINS;
        rest /= THETA_DOT_BINS;
        let x_dot = rest % X_DOT_BINS;
        rest /= X_DOT_BINS;
        let theta = rest % THETA_BINS;
        BinTuple { x: rest / THETA_BINS, theta, x_dot, theta_dot }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = DiscreteStateId> {
        (0..NUM_STATES).map(|i| DiscreteStateId(i as u16))
    }
}

impl fmt::Display for DiscreteStateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinTuple {
    pub x: usize,
    pub theta: usize,
    pub x_dot: usize,
    pub theta_dot: usize,
}

/// Interior bin edges. Angles are in degrees, everything else SI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinBoundaries {
    pub x_edges: [f64; X_BINS - 1],
    pub theta_edges_deg: [f64; THETA_BINS - 1],
    pub x_dot_edges: [f64; X_DOT_BINS - 1],
    pub theta_dot_edges_deg: [f64; THETA_DOT_BINS - 1],
}

impl Default for BinBoundaries {
    fn default() -> Self {
        default_bounds()
    }
}

pub fn default_bounds() -> BinBoundaries {
    BinBoundaries {
        x_edges: [-0.8, 0.8],
        theta_edges_deg: [-6.0, -1.0, 0.0, 1.0, 6.0],
        x_dot_edges: [-0.5, 0.5],
        theta_dot_edges_deg: [-50.0, 50.0],
    }
}

impl BinBoundaries {
    pub fn validate(&self) -> Result<()> {
        let lists: [(&str, &[f64]); 4] = [
            ("x_edges", &self.x_edges),
            ("theta_edges_deg", &self.theta_edges_deg),
            ("x_dot_edges", &self.x_dot_edges),
            ("theta_dot_edges_deg", &self.theta_dot_edges_deg),
        ];
        for (name, edges) in lists {
            if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidConfig(format!(
                    "bounds.{name} must be finite and strictly increasing"
                )));
            }
        }
        Ok(())
    }
}

fn bin_of(value: f64, edges: &[f64]) -> usize {
    edges.iter().take_while(|&&edge| value >= edge).count()
}

fn bin_of_angle(radians: f64, edges_deg: &[f64]) -> usize {
    edges_deg.iter().take_while(|&&edge| radians >= edge.to_radians()).count()
}

/// Cell containing `state`. Failing states have no cell.
pub fn discretize(
    state: &ContinuousState,
    bounds: &BinBoundaries,
    params: &PhysicsParams,
) -> Result<DiscreteStateId> {
    if is_failure(state, params) {
        return Err(Error::FailingState);
    }
    let bins = BinTuple {
        x: bin_of(state.x, &bounds.x_edges),
        theta: bin_of_angle(state.theta, &bounds.theta_edges_deg),
        x_dot: bin_of(state.x_dot, &bounds.x_dot_edges),
        theta_dot: bin_of_angle(state.theta_dot, &bounds.theta_dot_edges_deg),
    };
    Ok(DiscreteStateId::from_bins(bins).expect("bin counts follow edge counts"))
}
