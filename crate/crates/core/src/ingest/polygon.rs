//! Annotation polygons in level-0 pixel coordinates and their raster masks.
//!
//! A pixel `(px, py)` belongs to a polygon's mask when its center
//! `(px + 0.5, py + 0.5)` lies inside the polygon under the even-odd rule,
//! with crossings treated half-open (`left <= x < right`). Every raster query
//! in the crate goes through [`Polygon::row_intervals`] so masks agree exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct Polygon {
    vertices: Vec<[f64; 2]>,
}

/// Integer pixel bounding box, `x1`/`y1` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBounds {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl Polygon {
    pub fn new(mut vertices: Vec<[f64; 2]>) -> Result<Self> {
        if vertices.len() > 3 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        if vertices.len() < 3 {
            return Err(Error::invalid(format!(
                "polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("polygon vertex is not finite"));
        }
        let poly = Polygon { vertices };
        if poly.area() <= 0.0 {
            return Err(Error::invalid("polygon has zero area"));
        }
        if poly.self_intersects() {
            return Err(Error::invalid("polygon is self-intersecting"));
        }
        Ok(poly)
    }

    pub fn rect(x: f64, y: f64, width: f64, height: f64) -> Result<Self> {
        Polygon::new(vec![
            [x, y],
            [x + width, y],
            [x + width, y + height],
            [x, y + height],
        ])
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    fn edges(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Unsigned shoelace area.
    pub fn area(&self) -> f64 {
        let twice: f64 = self.edges().map(|(a, b)| a[0] * b[1] - b[0] * a[1]).sum();
        twice.abs() / 2.0
    }

    pub fn bounds(&self) -> PixelBounds {
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &[x, y] in &self.vertices {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        PixelBounds {
            x0: x0.floor() as i64,
            y0: y0.floor() as i64,
            x1: x1.ceil() as i64,
            y1: y1.ceil() as i64,
        }
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.vertices.iter().all(|&[x, y]| {
            (0.0..=f64::from(width)).contains(&x) && (0.0..=f64::from(height)).contains(&y)
        })
    }

    fn self_intersects(&self) -> bool {
        let n = self.vertices.len();
        let edges: Vec<_> = self.edges().collect();
        for i in 0..n {
            for j in (i + 1)..n {
                // adjacent edges share a vertex by construction
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                if segments_intersect(edges[i].0, edges[i].1, edges[j].0, edges[j].1) {
                    return true;
                }
            }
        }
        false
    }

    /// Sorted x-crossings of the horizontal line `y` with the polygon outline.
    fn crossings(&self, y: f64) -> Vec<f64> {
        let mut xs: Vec<f64> = self
            .edges()
            .filter(|(a, b)| (a[1] <= y && y < b[1]) || (b[1] <= y && y < a[1]))
            .map(|(a, b)| a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]))
            .collect();
        xs.sort_by(f64::total_cmp);
        xs
    }

    /// Half-open pixel column ranges `[start, end)` of the mask on row `py`.
    pub fn row_intervals(&self, py: i64) -> Vec<(i64, i64)> {
        let xs = self.crossings(py as f64 + 0.5);
        xs.chunks_exact(2)
            .filter_map(|pair| {
                let start = (pair[0] - 0.5).ceil() as i64;
                let end = (pair[1] - 0.5).ceil() as i64;
                (end > start).then_some((start, end))
            })
            .collect()
    }

    pub fn contains_pixel(&self, px: i64, py: i64) -> bool {
        self.row_intervals(py)
            .iter()
            .any(|&(a, b)| a <= px && px < b)
    }

    /// Number of mask pixels.
    pub fn pixel_count(&self) -> u64 {
        let b = self.bounds();
        (b.y0..b.y1)
            .flat_map(|py| self.row_intervals(py))
            .map(|(a, b)| (b - a) as u64)
            .sum()
    }
}

impl TryFrom<Vec<[f64; 2]>> for Polygon {
    type Error = Error;

    fn try_from(v: Vec<[f64; 2]>) -> Result<Self> {
        Polygon::new(v)
    }
}

impl From<Polygon> for Vec<[f64; 2]> {
    fn from(p: Polygon) -> Self {
        p.vertices
    }
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

fn segments_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}
