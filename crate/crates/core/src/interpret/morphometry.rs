//! Per-nucleus shape measurements from binary masks.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::segment::Mask;

/// Feature order used by every matrix, report and CSV.
pub const FEATURE_NAMES: [&str; 8] = [
    "major_axis",
    "minor_axis",
    "area",
    "orientation",
    "circumference",
    "density",
    "circularity",
    "rectangularity",
];

pub const N_FEATURES: usize = FEATURE_NAMES.len();

/// Index of `density` in [`FEATURE_NAMES`].
pub const DENSITY: usize = 5;
/// Index of `orientation` in [`FEATURE_NAMES`].
pub const ORIENTATION: usize = 3;

/// Relative eigenvalue gap below which a mask has no defined orientation.
pub const ISOTROPY_TOL: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NucleusFeatures {
    pub major_axis: f64,
    pub minor_axis: f64,
    pub area: f64,
    /// Degrees in [-90, 90), image coordinates (y down); `None` when the
    /// second moments are isotropic.
    pub orientation: Option<f64>,
    pub circumference: f64,
    pub circularity: f64,
    pub rectangularity: f64,
    /// The minor axis was below one pixel and has been floored.
    pub minor_floored: bool,
}

impl NucleusFeatures {
    /// Value of feature `i` in [`FEATURE_NAMES`] order; density is a patch
    /// property and is supplied by the caller.
    pub fn value(&self, i: usize, density: f64) -> Option<f64> {
        match i {
            0 => Some(self.major_axis),
            1 => Some(self.minor_axis),
            2 => Some(self.area),
            3 => self.orientation,
            4 => Some(self.circumference),
            5 => Some(density),
            6 => Some(self.circularity),
            7 => Some(self.rectangularity),
            _ => None,
        }
    }
}

/// Second central moments `(mu20, mu02, mu11)` of the pixel centres.
fn moments(px: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = px.len() as f64;
    let cx = px.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = px.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut m20, mut m02, mut m11) = (0.0, 0.0, 0.0);
    for &(x, y) in px {
        m20 += (x - cx) * (x - cx);
        m02 += (y - cy) * (y - cy);
        m11 += (x - cx) * (y - cy);
    }
    (m20 / n, m02 / n, m11 / n)
}

/// Wraps degrees into [-90, 90).
pub fn wrap_axial(deg: f64) -> f64 {
    let r = (deg + 90.0).rem_euclid(180.0) - 90.0;
    if r >= 90.0 {
        r - 180.0
    } else {
        r
    }
}

/// Midpoints of the outer crack boundary in traversal order (pixel-centre
/// coordinates).
fn boundary_midpoints(mask: &Mask) -> Vec<(f64, f64)> {
    // directed crack edges with the foreground on the right in y-down
    // coordinates; vertices are pixel corners
    let mut next: HashMap<(i64, i64), Vec<(i64, i64)>> = HashMap::new();
    let (w, h) = (i64::from(mask.width), i64::from(mask.height));
    let mut n_edges = 0;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let mut add = |a: (i64, i64), b: (i64, i64)| {
                next.entry(a).or_default().push(b);
                n_edges += 1;
            };
            if !mask.get(x, y - 1) {
                add((x, y), (x + 1, y));
            }
            if !mask.get(x + 1, y) {
                add((x + 1, y), (x + 1, y + 1));
            }
            if !mask.get(x, y + 1) {
                add((x + 1, y + 1), (x, y + 1));
            }
            if !mask.get(x - 1, y) {
                add((x, y + 1), (x, y));
            }
        }
    }
    let mut used: HashMap<((i64, i64), (i64, i64)), bool> = HashMap::new();
    let mut best: Vec<(f64, f64)> = Vec::new();
    let mut best_area = 0.0f64;
    let mut starts: Vec<(i64, i64)> = next.keys().copied().collect();
    starts.sort_unstable();
    for s in starts {
        for &t in &next[&s].clone() {
            if used.contains_key(&(s, t)) {
                continue;
            }
            let mut loop_pts = Vec::new();
            let (mut a, mut b) = (s, t);
            let mut guard = 0;
            loop {
                used.insert((a, b), true);
                loop_pts.push((
                    (a.0 + b.0) as f64 / 2.0 - 0.5,
                    (a.1 + b.1) as f64 / 2.0 - 0.5,
                ));
                let d = (b.0 - a.0, b.1 - a.1);
                let outs = &next[&b];
                let c = if outs.len() == 1 {
                    outs[0]
                } else {
                    // pinch vertex: cross over so that diagonal neighbours
                    // stay on one contour (8-connectivity)
                    let cross_over = (b.0 + d.1, b.1 - d.0);
                    *outs.iter().find(|&&o| o == cross_over).unwrap_or(&outs[0])
                };
                a = b;
                b = c;
                guard += 1;
                if (a, b) == (s, t) || guard > n_edges {
                    break;
                }
            }
            let area = shoelace(&loop_pts).abs();
            if area > best_area {
                best_area = area;
                best = loop_pts;
            }
        }
    }
    best.into_iter()
        .map(|(x, y)| (x + f64::from(mask.x0), y + f64::from(mask.y0)))
        .collect()
}

fn shoelace(p: &[(f64, f64)]) -> f64 {
    let n = p.len();
    (0..n)
        .map(|i| p[i].0 * p[(i + 1) % n].1 - p[(i + 1) % n].0 * p[i].1)
        .sum::<f64>()
        / 2.0
}

/// Boundary length: crack midpoints smoothed once with a [1/4, 1/2, 1/4]
/// kernel, then summed as a closed polygon.
pub fn perimeter(mask: &Mask) -> f64 {
    let p = boundary_midpoints(mask);
    let n = p.len();
    if n < 2 {
        return 0.0;
    }
    let s: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let (a, b, c) = (p[(i + n - 1) % n], p[i], p[(i + 1) % n]);
            (
                0.25 * a.0 + 0.5 * b.0 + 0.25 * c.0,
                0.25 * a.1 + 0.5 * b.1 + 0.25 * c.1,
            )
        })
        .collect();
    (0..n)
        .map(|i| (s[(i + 1) % n].0 - s[i].0).hypot(s[(i + 1) % n].1 - s[i].1))
        .sum()
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull (monotone chain), counter-clockwise without repeats.
pub fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Smallest area of a rectangle enclosing the mask's pixel squares, over
/// orientations aligned with a hull edge.
pub fn min_bounding_rect_area(mask: &Mask) -> f64 {
    let mut corners = Vec::new();
    for (x, y) in mask.pixels() {
        let (x, y) = (f64::from(x), f64::from(y));
        corners.extend([(x, y), (x + 1.0, y), (x, y + 1.0), (x + 1.0, y + 1.0)]);
    }
    let hull = convex_hull(corners);
    let n = hull.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        let (a, b) = (hull[i], hull[(i + 1) % n]);
        let len = (b.0 - a.0).hypot(b.1 - a.1);
        if len == 0.0 {
            continue;
        }
        let (ux, uy) = ((b.0 - a.0) / len, (b.1 - a.1) / len);
        let (mut lo_u, mut hi_u, mut lo_v, mut hi_v) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for p in &hull {
            let u = p.0 * ux + p.1 * uy;
            let v = -p.0 * uy + p.1 * ux;
            lo_u = lo_u.min(u);
            hi_u = hi_u.max(u);
            lo_v = lo_v.min(v);
            hi_v = hi_v.max(v);
        }
        best = best.min((hi_u - lo_u) * (hi_v - lo_v));
    }
    best
}

/// Shape features of one nucleus; `None` for an empty mask.
pub fn nucleus_morphometry(mask: &Mask) -> Option<NucleusFeatures> {
    let px: Vec<(f64, f64)> = mask
        .pixels()
        .into_iter()
        .map(|(x, y)| (f64::from(x), f64::from(y)))
        .collect();
    if px.is_empty() {
        return None;
    }
    let area = px.len() as f64;
    let (m20, m02, m11) = moments(&px);
    let half_diff = ((m20 - m02) / 2.0).hypot(m11);
    let mean = (m20 + m02) / 2.0;
    let (l1, l2) = (mean + half_diff, (mean - half_diff).max(0.0));
    let major_axis = 4.0 * l1.sqrt();
    let raw_minor = 4.0 * l2.sqrt();
    let minor_floored = raw_minor < 1.0;
    let minor_axis = raw_minor.max(1.0);
    let orientation = ((l1 - l2) / (l1 + l2) >= ISOTROPY_TOL)
        .then(|| wrap_axial(0.5 * (2.0 * m11).atan2(m20 - m02).to_degrees()));
    let circumference = perimeter(mask);
    let circularity = 4.0 * std::f64::consts::PI * area / (circumference * circumference);
    let rectangularity = (area / min_bounding_rect_area(mask)).min(1.0);
    Some(NucleusFeatures {
        major_axis,
        minor_axis,
        area,
        orientation,
        circumference,
        circularity,
        rectangularity,
        minor_floored,
    })
}

/// Morphometry of one patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMorphometry {
    pub origin: (u32, u32),
    /// Nuclei per 256 x 256 pixels of patch.
    pub density: f64,
    pub nuclei: Vec<NucleusFeatures>,
}

impl PatchMorphometry {
    pub fn new(origin: (u32, u32), patch_width: u32, patch_height: u32, masks: &[Mask]) -> Self {
        let nuclei: Vec<NucleusFeatures> = masks.iter().filter_map(nucleus_morphometry).collect();
        let scale = 65536.0 / (f64::from(patch_width) * f64::from(patch_height));
        PatchMorphometry {
            origin,
            density: nuclei.len() as f64 * scale,
            nuclei,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn disk(r: f64) -> Mask {
        let c = r + 2.0;
        Mask::rasterize((2.0 * c) as u32, (2.0 * c) as u32, |x, y| {
            (x - c).hypot(y - c) <= r
        })
    }

    fn ellipse(a: f64, b: f64, deg: f64) -> Mask {
        let (s, c) = deg.to_radians().sin_cos();
        let m = a + 3.0;
        Mask::rasterize((2.0 * m) as u32, (2.0 * m) as u32, |x, y| {
            let (dx, dy) = (x - m, y - m);
            let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        })
    }

    #[test]
    fn disk_is_round() {
        let f = nucleus_morphometry(&disk(20.0)).unwrap();
        assert!((0.95..=1.02).contains(&f.circularity), "{}", f.circularity);
        assert!(f.orientation.is_none());
        assert!((f.major_axis - 40.0).abs() < 1.0 && (f.minor_axis - 40.0).abs() < 1.0);
    }

    #[test]
    fn square_is_rectangular() {
        let m = Mask::rasterize(34, 34, |x, y| {
            (2.0..32.0).contains(&x) && (2.0..32.0).contains(&y)
        });
        assert_eq!(m.area(), 900);
        let f = nucleus_morphometry(&m).unwrap();
        assert!((f.rectangularity - 1.0).abs() <= 0.02);
        assert!(
            (f.circularity - PI / 4.0).abs() <= 0.03,
            "{}",
            f.circularity
        );
    }

    #[test]
    fn rotated_ellipse_matches_generator() {
        let f = nucleus_morphometry(&ellipse(30.0, 10.0, 30.0)).unwrap();
        assert!((f.orientation.unwrap() - 30.0).abs() <= 2.0);
        assert!((f.major_axis / 60.0 - 1.0).abs() < 0.05);
        assert!((f.minor_axis / 20.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn thin_line_floors_minor_axis() {
        let m = Mask::from_pixels(&(0..50).map(|x| (x, 3)).collect::<Vec<_>>());
        let f = nucleus_morphometry(&m).unwrap();
        assert!(f.minor_floored && f.minor_axis == 1.0 && f.major_axis > f.minor_axis);
        assert!(f.orientation.unwrap().abs() < 1e-9);
    }

    #[test]
    fn rotation_shifts_orientation() {
        let m = ellipse(14.0, 6.0, 20.0);
        let (a, b) = (
            nucleus_morphometry(&m).unwrap(),
            nucleus_morphometry(&m.rotate90()).unwrap(),
        );
        let expect = wrap_axial(a.orientation.unwrap() + 90.0);
        assert!((b.orientation.unwrap() - expect).abs() < 1e-9);
        assert!((a.circularity / b.circularity - 1.0).abs() < 0.02);
        assert_eq!(a.area, b.area);
    }

    #[test]
    fn axial_wrapping() {
        assert_eq!(wrap_axial(90.0), -90.0);
        assert_eq!(wrap_axial(-90.0), -90.0);
        assert_eq!(wrap_axial(120.0), -60.0);
        assert_eq!(wrap_axial(-100.0), 80.0);
    }
}
