//! Nodal length by marching squares and the Leray measure by ε-windows.
//!
//! Cells wrap across the torus: cell `(j, k)` spans
//! `[j/M, (j+1)/M] × [k/M, (k+1)/M]` and reads its far corners from row or
//! column `0` when `j` or `k` equals `M − 1`. Segment endpoints are reported in
//! unwrapped coordinates inside the cell, so they lie in `[0, 1]²`.
//!
//! Corner values that are exactly zero are nudged by `+1e−12 · max|T|` before
//! classification. Saddle cells are resolved by the sign of the bilinear
//! interpolant at the cell center.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldGrid;
use crate::lattice::Frequency;

/// Smallest grid accepted by [`marching_squares_length`].
pub const MIN_NODAL_GRID: usize = 8;

pub type Point2 = (f64, f64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: Point2,
    pub end: Point2,
    /// Originating cell `(j, k)`.
    pub cell: (usize, usize),
}

impl Segment {
    pub fn length(&self) -> f64 {
        (self.end.0 - self.start.0).hypot(self.end.1 - self.start.1)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodalSegments {
    pub segments: Vec<Segment>,
    pub total_length: f64,
}

/// Axis-aligned sub-rectangle `[x0, x1) × [y0, y1)` of the unit square.
///
/// A clipped segment belongs to the region when its midpoint satisfies the
/// half-open bounds, so pieces lying on a shared edge count for exactly one side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Region {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x0 < x1 && y0 < y1) {
            return Err(Error::InvalidArgument(format!("empty region {x0},{y0},{x1},{y1}")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    fn intersects_cell(&self, lo: Point2, hi: Point2) -> bool {
        lo.0 <= self.x1 && hi.0 >= self.x0 && lo.1 <= self.y1 && hi.1 >= self.y0
    }

    /// Liang–Barsky clip to the closed rectangle, then the half-open midpoint test.
    fn clip(&self, a: Point2, b: Point2) -> Option<(Point2, Point2)> {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let mut t0: f64 = 0.0;
        let mut t1: f64 = 1.0;
        for (p, q) in [
            (-dx, a.0 - self.x0),
            (dx, self.x1 - a.0),
            (-dy, a.1 - self.y0),
            (dy, self.y1 - a.1),
        ] {
            if p == 0.0 {
                if q < 0.0 {
                    return None;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
            }
        }
        if t0 > t1 {
            return None;
        }
        let s = (a.0 + t0 * dx, a.1 + t0 * dy);
        let e = (a.0 + t1 * dx, a.1 + t1 * dy);
        let mid = (0.5 * (s.0 + e.0), 0.5 * (s.1 + e.1));
        let inside = mid.0 >= self.x0 && mid.0 < self.x1 && mid.1 >= self.y0 && mid.1 < self.y1;
        inside.then_some((s, e))
    }
}

/// Emit the zero-crossing segments of every cell, in row-major cell order.
fn for_each_segment(grid: &FieldGrid, mut emit: impl FnMut(Point2, Point2, (usize, usize))) {
    let m = grid.resolution();
    let raw = grid.values();
    let max_abs = raw.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let nudge = 1e-12 * max_abs;
    let vals: Vec<f64> = raw.iter().map(|&v| if v == 0.0 { v + nudge } else { v }).collect();
    let h = 1.0 / m as f64;

    for j in 0..m {
        let jn = (j + 1) % m;
        let x_lo = j as f64 * h;
        let x_hi = (j + 1) as f64 * h;
        for k in 0..m {
            let kn = (k + 1) % m;
            let v00 = vals[j * m + k];
            let v10 = vals[jn * m + k];
            let v11 = vals[jn * m + kn];
            let v01 = vals[j * m + kn];
            let (p00, p10, p11, p01) = (v00 > 0.0, v10 > 0.0, v11 > 0.0, v01 > 0.0);
            if p00 == p10 && p10 == p11 && p11 == p01 {
                continue;
            }
            let y_lo = k as f64 * h;
            let y_hi = (k + 1) as f64 * h;
            let cross = |va: f64, vb: f64, a: Point2, b: Point2| -> Point2 {
                let t = va / (va - vb);
                (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
            };
            let c00 = (x_lo, y_lo);
            let c10 = (x_hi, y_lo);
            let c11 = (x_hi, y_hi);
            let c01 = (x_lo, y_hi);
            // Edges: 0 bottom (00–10), 1 right (10–11), 2 top (01–11), 3 left (00–01).
            let edge = |e: usize| -> Option<Point2> {
                match e {
                    0 if p00 != p10 => Some(cross(v00, v10, c00, c10)),
                    1 if p10 != p11 => Some(cross(v10, v11, c10, c11)),
                    2 if p01 != p11 => Some(cross(v01, v11, c01, c11)),
                    3 if p00 != p01 => Some(cross(v00, v01, c00, c01)),
                    _ => None,
                }
            };
            let cell = (j, k);
            if p00 == p11 && p10 == p01 {
                let center = 0.25 * (v00 + v10 + v11 + v01);
                let (e0, e1, e2, e3) = (edge(0).unwrap(), edge(1).unwrap(), edge(2).unwrap(), edge(3).unwrap());
                if (center > 0.0) == p00 {
                    emit(e0, e1, cell);
                    emit(e2, e3, cell);
                } else {
                    emit(e3, e0, cell);
                    emit(e1, e2, cell);
                }
            } else {
                let mut found = (0..4).filter_map(edge);
                let a = found.next().expect("two crossings");
                let b = found.next().expect("two crossings");
                emit(a, b, cell);
            }
        }
    }
}

/// Total (or region-restricted) nodal length by marching squares.
pub fn marching_squares_length(grid: &FieldGrid, region: Option<&Region>) -> Result<NodalSegments> {
    let m = grid.resolution();
    if m < MIN_NODAL_GRID {
        return Err(Error::GridTooSmall {
            got: m,
            need: MIN_NODAL_GRID,
        });
    }
    let h = 1.0 / m as f64;
    let mut out = NodalSegments::default();
    for_each_segment(grid, |a, b, cell| {
        let seg = match region {
            None => Some((a, b)),
            Some(r) => {
                let lo = (cell.0 as f64 * h, cell.1 as f64 * h);
                let hi = (lo.0 + h, lo.1 + h);
                if r.intersects_cell(lo, hi) {
                    r.clip(a, b)
                } else {
                    None
                }
            }
        };
        if let Some((start, end)) = seg {
            let s = Segment { start, end, cell };
            out.total_length += s.length();
            out.segments.push(s);
        }
    });
    Ok(out)
}

/// Total nodal length without materializing the segment list.
pub fn nodal_length(grid: &FieldGrid) -> Result<f64> {
    let m = grid.resolution();
    if m < MIN_NODAL_GRID {
        return Err(Error::GridTooSmall {
            got: m,
            need: MIN_NODAL_GRID,
        });
    }
    let mut total = 0.0;
    for_each_segment(grid, |a, b, _| total += (b.0 - a.0).hypot(b.1 - a.1));
    Ok(total)
}

/// `(1/2ε) · #{grid points with |T| < ε} / M²`.
pub fn leray_estimate(grid: &FieldGrid, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let hits = grid.values().iter().filter(|v| v.abs() < epsilon).count();
    Ok(hits as f64 / grid.values().len() as f64 / (2.0 * epsilon))
}

/// [`leray_estimate`] for each ε, in input order.
pub fn leray_epsilon_sweep(grid: &FieldGrid, epsilons: &[f64]) -> Result<Vec<(f64, f64)>> {
    epsilons.iter().map(|&e| Ok((e, leray_estimate(grid, e)?))).collect()
}

/// Default window `ε = 10/M`.
pub fn default_epsilon(m: usize) -> f64 {
    10.0 / m as f64
}

/// Expected nodal length `√E_n / (2√2)`.
pub fn expected_nodal_length(freq: Frequency) -> f64 {
    freq.energy().sqrt() / (2.0 * 2f64.sqrt())
}
