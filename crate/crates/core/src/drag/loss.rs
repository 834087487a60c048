//! Tape builders for the loss terms shared by every drag method.

use crate::autodiff::{Tape, Var};
use crate::domain::Point;
use crate::drag::geometry::sample_on_tape;
use crate::error::{DragError, Result};

/// What a point's moved samples are compared against.
#[derive(Debug, Clone)]
pub enum Reference {
    /// Stop-gradient samples of the same feature tensor at these positions.
    Detached(Vec<Point>),
    /// Constant position-major `n x C` feature values.
    Fixed(Vec<f64>),
}

/// One point's share of the feature-displacement sum.
#[derive(Debug, Clone)]
pub struct PointTerm {
    pub index: usize,
    pub weight: f64,
    /// Positions `q + step * d`, already clamped onto the grid.
    pub moved: Vec<Point>,
    pub reference: Reference,
}

/// Recorded displacement term with per-point values.
#[derive(Debug, Clone)]
pub struct Displacement {
    pub total: Var,
    /// Unweighted L1 mismatch per point index.
    pub per_point: Vec<(usize, f64)>,
}

/// `sum_i weight_i * sum_q |F(moved_q) - ref_q|_1` over the given points.
pub fn displacement_term(
    tape: &Tape,
    features: Var,
    dims: (usize, usize, usize),
    terms: &[PointTerm],
) -> Result<Displacement> {
    if terms.is_empty() {
        return Err(DragError::NoActivePoints);
    }
    let mut total: Option<Var> = None;
    let mut per_point = Vec::with_capacity(terms.len());
    for term in terms {
        let moved = sample_on_tape(tape, features, dims, &term.moved);
        let reference = match &term.reference {
            Reference::Detached(at) => {
                let live = sample_on_tape(tape, features, dims, at);
                tape.detach(live)
            }
            Reference::Fixed(values) => tape.constant(values.clone()),
        };
        let diff = tape.sub(moved, reference);
        let l1 = tape.abs_sum(diff);
        per_point.push((term.index, tape.scalar(l1)));
        let weighted = if term.weight == 1.0 { l1 } else { tape.scale(l1, term.weight) };
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted),
            None => weighted,
        });
    }
    Ok(Displacement {
        total: total.expect("terms is non-empty"),
        per_point,
    })
}

/// `lambda * |(x - anchor) * weights|_1` with `anchor` and `weights` constant.
pub fn anchored_l1(tape: &Tape, x: Var, anchor: &[f64], weights: &[f64], lambda: f64) -> Var {
    let anchor = tape.constant(anchor.to_vec());
    let weights = tape.constant(weights.to_vec());
    let diff = tape.sub(x, anchor);
    let masked = tape.mul(diff, weights);
    let l1 = tape.abs_sum(masked);
    tape.scale(l1, lambda)
}
