//! Classical nucleus segmentation: hematoxylin colour deconvolution, Otsu
//! threshold, hole filling and distance-transform watershed.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use image::RgbImage;
use serde::{Deserialize, Serialize};

/// Binary mask stored over its bounding box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl Mask {
    /// Mask over the bounding box of `pixels` (global coordinates).
    pub fn from_pixels(pixels: &[(u32, u32)]) -> Self {
        if pixels.is_empty() {
            return Mask {
                x0: 0,
                y0: 0,
                width: 0,
                height: 0,
                data: Vec::new(),
            };
        }
        let x0 = pixels.iter().map(|p| p.0).min().expect("non-empty");
        let y0 = pixels.iter().map(|p| p.1).min().expect("non-empty");
        let x1 = pixels.iter().map(|p| p.0).max().expect("non-empty");
        let y1 = pixels.iter().map(|p| p.1).max().expect("non-empty");
        let (width, height) = (x1 - x0 + 1, y1 - y0 + 1);
        let mut data = vec![false; (width * height) as usize];
        for &(x, y) in pixels {
            data[((y - y0) * width + (x - x0)) as usize] = true;
        }
        Mask {
            x0,
            y0,
            width,
            height,
            data,
        }
    }

    /// Mask of the pixel centres for which `inside(x + 0.5, y + 0.5)` holds.
    pub fn rasterize(width: u32, height: u32, inside: impl Fn(f64, f64) -> bool) -> Self {
        let mut px = Vec::new();
        for y in 0..height {
            for x in 0..width {
                if inside(f64::from(x) + 0.5, f64::from(y) + 0.5) {
                    px.push((x, y));
                }
            }
        }
        Mask::from_pixels(&px)
    }

    /// Local lookup; outside the box is background.
    pub fn get(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && x < i64::from(self.width)
            && y < i64::from(self.height)
            && self.data[(y as u32 * self.width + x as u32) as usize]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Global coordinates of the foreground pixels, row-major.
    pub fn pixels(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.area());
        for y in 0..self.height {
            for x in 0..self.width {
                if self.data[(y * self.width + x) as usize] {
                    out.push((self.x0 + x, self.y0 + y));
                }
            }
        }
        out
    }

    /// Rotation `(x, y) -> (h - 1 - y, x)` of the local box, which turns
    /// image-coordinate angles by +90 degrees.
    pub fn rotate90(&self) -> Mask {
        let px: Vec<(u32, u32)> = self
            .pixels()
            .into_iter()
            .map(|(x, y)| (self.height - 1 - (y - self.y0), x - self.x0))
            .collect();
        Mask::from_pixels(&px)
    }
}

/// Pluggable nucleus segmentation.
pub trait Segmenter: Send + Sync {
    fn segment(&self, patch: &RgbImage) -> Vec<Mask>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicalSegmenter {
    /// Components below this many pixels are discarded.
    pub min_area: usize,
    /// Minimum dynamic (in pixels of distance) of a watershed marker.
    pub h: f64,
    /// Minimum gap between the Otsu class means in hematoxylin optical
    /// density; below it the patch is treated as blank.
    pub min_contrast: f64,
}

impl Default for ClassicalSegmenter {
    fn default() -> Self {
        ClassicalSegmenter {
            min_area: 40,
            h: 2.0,
            min_contrast: 0.1,
        }
    }
}

/// Hematoxylin optical density per pixel (Ruifrok-Johnston H-E-DAB vectors).
pub fn hematoxylin(img: &RgbImage) -> Vec<f64> {
    let rgb_from_hed = [[0.65, 0.70, 0.29], [0.07, 0.99, 0.11], [0.27, 0.57, 0.78]];
    let unit = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let m = [
        unit(rgb_from_hed[0]),
        unit(rgb_from_hed[1]),
        unit(rgb_from_hed[2]),
    ];
    // first column of the inverse stain matrix
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv_col0 = [
        (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det,
        (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det,
        (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det,
    ];
    img.pixels()
        .map(|p| {
            (0..3)
                .map(|c| {
                    let od = -((f64::from(p[c]) + 1.0) / 256.0).log10();
                    od * inv_col0[c]
                })
                .sum::<f64>()
                .max(0.0)
        })
        .collect()
}

/// Otsu threshold over a 256-bin histogram; returns `(threshold, mean_low,
/// mean_high)` or `None` for a constant image.
pub fn otsu(values: &[f64]) -> Option<(f64, f64, f64)> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return None;
    }
    let bins = 256;
    let width = (hi - lo) / bins as f64;
    let mut hist = vec![0f64; bins];
    let mut sums = vec![0f64; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        hist[b] += 1.0;
        sums[b] += v;
    }
    let total = values.len() as f64;
    let total_sum: f64 = sums.iter().sum();
    let (mut w0, mut s0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for b in 0..bins - 1 {
        w0 += hist[b];
        s0 += sums[b];
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let between = w0 * w1 * (s0 / w0 - (total_sum - s0) / w1).powi(2);
        if between > best.0 {
            best = (between, b);
        }
    }
    let t = lo + width * (best.1 + 1) as f64;
    let (mut n0, mut m0, mut n1, mut m1) = (0.0f64, 0.0, 0.0f64, 0.0);
    for &v in values {
        if v >= t {
            n1 += 1.0;
            m1 += v;
        } else {
            n0 += 1.0;
            m0 += v;
        }
    }
    Some((t, m0 / n0.max(1.0), m1 / n1.max(1.0)))
}

const N4: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
const N8: [(i64, i64); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];

fn neighbors(
    i: usize,
    w: usize,
    h: usize,
    offsets: &'static [(i64, i64)],
) -> impl Iterator<Item = usize> {
    let (x, y) = ((i % w) as i64, (i / w) as i64);
    offsets.iter().filter_map(move |&(dx, dy)| {
        let (nx, ny) = (x + dx, y + dy);
        (nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64)
            .then(|| ny as usize * w + nx as usize)
    })
}

/// Fills background regions (4-connected) that do not reach the border.
pub fn fill_holes(fg: &mut [bool], w: usize, h: usize) {
    let mut outside = vec![false; fg.len()];
    let mut queue = VecDeque::new();
    for i in 0..fg.len() {
        let (x, y) = (i % w, i / w);
        if !fg[i] && (x == 0 || y == 0 || x == w - 1 || y == h - 1) {
            outside[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for n in neighbors(i, w, h, &N4) {
            if !fg[n] && !outside[n] {
                outside[n] = true;
                queue.push_back(n);
            }
        }
    }
    for i in 0..fg.len() {
        if !outside[i] {
            fg[i] = true;
        }
    }
}

/// Exact squared Euclidean distance in one dimension (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s =
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance from each foreground pixel to the nearest background
/// pixel; pixels beyond the image border do not count as background.
pub fn distance_transform(fg: &[bool], w: usize, h: usize) -> Vec<f64> {
    let mut g: Vec<f64> = fg
        .iter()
        .map(|&b| if b { f64::INFINITY } else { 0.0 })
        .collect();
    let mut col = vec![0f64; h];
    let mut out = vec![0f64; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            col[y] = g[y * w + x];
        }
        edt_1d(&col, &mut out[..h]);
        for y in 0..h {
            g[y * w + x] = out[y];
        }
    }
    let mut row = vec![0f64; w];
    for y in 0..h {
        row.copy_from_slice(&g[y * w..(y + 1) * w]);
        edt_1d(&row, &mut out[..w]);
        g[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    g.into_iter().map(f64::sqrt).collect()
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Regional maxima of `dist` inside `fg` whose dynamic is at least `h`; one
/// seed pixel per retained maximum. The highest maximum of every connected
/// component is always kept.
pub fn h_maxima_seeds(dist: &[f64], fg: &[bool], w: usize, hgt: usize, h: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.len()).filter(|&i| fg[i]).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    const NONE: usize = usize::MAX;
    let mut parent = vec![NONE; dist.len()];
    // per root: peak pixel
    let mut peak = vec![NONE; dist.len()];
    let mut seeds = Vec::new();
    for &p in &order {
        parent[p] = p;
        peak[p] = p;
        let seen: Vec<usize> = neighbors(p, w, hgt, &N8)
            .filter(|&n| parent[n] != NONE)
            .collect();
        let mut roots: Vec<usize> = seen.into_iter().map(|n| find(&mut parent, n)).collect();
        roots.sort_unstable();
        roots.dedup();
        if roots.is_empty() {
            continue;
        }
        roots.sort_by(|&a, &b| {
            dist[peak[b]]
                .total_cmp(&dist[peak[a]])
                .then(peak[a].cmp(&peak[b]))
        });
        let keep = roots[0];
        for &r in &roots[1..] {
            if dist[peak[r]] - dist[p] >= h {
                seeds.push(peak[r]);
            }
            parent[r] = keep;
        }
        parent[p] = keep;
    }
    for &p in &order {
        if find(&mut parent, p) == p {
            seeds.push(peak[p]);
        }
    }
    seeds.sort_unstable();
    seeds
}

/// Marker-controlled watershed flooding `-dist` within `fg` (8-connected),
/// first-in-first-out among equal priorities. Returns labels (0 =
/// unassigned) numbered from 1 in seed order.
pub fn watershed(dist: &[f64], fg: &[bool], w: usize, h: usize, seeds: &[usize]) -> Vec<u32> {
    let mut labels = vec![0u32; dist.len()];
    let mut heap = BinaryHeap::new();
    let mut counter = 0u64;
    let key = |d: f64| (d * 1e9).round() as i64;
    for (k, &s) in seeds.iter().enumerate() {
        labels[s] = k as u32 + 1;
        heap.push((key(dist[s]), Reverse(counter), s));
        counter += 1;
    }
    while let Some((_, _, i)) = heap.pop() {
        for n in neighbors(i, w, h, &N8) {
            if fg[n] && labels[n] == 0 {
                labels[n] = labels[i];
                heap.push((key(dist[n]), Reverse(counter), n));
                counter += 1;
            }
        }
    }
    labels
}

impl ClassicalSegmenter {
    /// Foreground mask of hematoxylin-rich pixels after hole filling.
    pub fn foreground(&self, patch: &RgbImage) -> Option<Vec<bool>> {
        let hema = hematoxylin(patch);
        let (t, m0, m1) = otsu(&hema)?;
        if m1 - m0 < self.min_contrast {
            return None;
        }
        let mut fg: Vec<bool> = hema.iter().map(|&v| v >= t).collect();
        fill_holes(&mut fg, patch.width() as usize, patch.height() as usize);
        Some(fg)
    }

    /// Splits a foreground mask into labelled nuclei.
    pub fn split(&self, fg: &[bool], w: usize, h: usize) -> Vec<Mask> {
        let dist = distance_transform(fg, w, h);
        let seeds = h_maxima_seeds(&dist, fg, w, h, self.h);
        let labels = watershed(&dist, fg, w, h, &seeds);
        let mut groups: Vec<Vec<(u32, u32)>> = vec![Vec::new(); seeds.len()];
        for (i, &l) in labels.iter().enumerate() {
            if l > 0 {
                groups[l as usize - 1].push(((i % w) as u32, (i / w) as u32));
            }
        }
        let mut masks: Vec<Mask> = groups
            .into_iter()
            .filter(|g| g.len() >= self.min_area)
            .map(|g| Mask::from_pixels(&g))
            .collect();
        masks.sort_by_key(|m| (m.y0, m.x0));
        masks
    }
}

impl Segmenter for ClassicalSegmenter {
    fn segment(&self, patch: &RgbImage) -> Vec<Mask> {
        match self.foreground(patch) {
            Some(fg) => self.split(&fg, patch.width() as usize, patch.height() as usize),
            None => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn disks(w: u32, h: u32, centres: &[(f64, f64, f64)]) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let (px, py) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
            if centres
                .iter()
                .any(|&(cx, cy, r)| (px - cx).hypot(py - cy) <= r)
            {
                Rgb([70, 40, 120])
            } else {
                Rgb([255, 255, 255])
            }
        })
    }

    #[test]
    fn five_disjoint_disks() {
        let img = disks(
            128,
            128,
            &[
                (20.0, 20.0, 7.0),
                (60.0, 20.0, 8.0),
                (100.0, 30.0, 6.0),
                (30.0, 90.0, 9.0),
                (90.0, 100.0, 7.0),
            ],
        );
        assert_eq!(ClassicalSegmenter::default().segment(&img).len(), 5);
    }

    #[test]
    fn blank_patch_is_empty() {
        let img = RgbImage::from_pixel(64, 64, Rgb([255, 255, 255]));
        assert!(ClassicalSegmenter::default().segment(&img).is_empty());
    }

    #[test]
    fn overlapping_pair_is_split() {
        let r = 12.0;
        let img = disks(96, 64, &[(30.0, 32.0, r), (30.0 + 1.5 * r, 32.0, r)]);
        let masks = ClassicalSegmenter::default().segment(&img);
        assert_eq!(masks.len(), 2);
        let total: usize = masks.iter().map(Mask::area).sum();
        assert!(masks.iter().all(|m| m.area() * 3 > total));
    }

    #[test]
    fn edt_matches_brute_force() {
        let (w, h) = (13, 9);
        let fg: Vec<bool> = (0..w * h).map(|i| (i * 7 + i / w) % 5 != 0).collect();
        let d = distance_transform(&fg, w, h);
        for i in 0..w * h {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let brute = (0..w * h)
                .filter(|&j| !fg[j])
                .map(|j| ((j % w) as f64 - x).hypot((j / w) as f64 - y))
                .fold(f64::INFINITY, f64::min);
            assert!(
                (d[i] - brute).abs() < 1e-12,
                "pixel {i}: {} vs {brute}",
                d[i]
            );
        }
    }

    #[test]
    fn holes_are_filled() {
        let (w, h) = (7, 7);
        let mut fg: Vec<bool> = (0..49)
            .map(|i| {
                let (x, y) = (i % 7, i / 7);
                (1..=5).contains(&x) && (1..=5).contains(&y) && !(x == 3 && y == 3)
            })
            .collect();
        fill_holes(&mut fg, w, h);
        assert!(fg[3 * 7 + 3]);
        assert!(!fg[0]);
    }
}
