//! SLIC superpixels.
//!
//! Localized k-means in (Lab colour, x, y) with grid-initialised centres,
//! followed by connectivity enforcement: undersized 4-connected fragments are
//! merged into their largest neighbour and every label is made contiguous.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlicParams {
    pub target_segments: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            target_segments: 50,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

/// Integer label per pixel, with labels `0..n_segments` all present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    labels: Vec<usize>,
    n_segments: usize,
}

impl SegmentationMap {
    /// Build from raw labels, renumbering them densely in order of first
    /// appearance (raster order).
    pub fn from_labels(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(Error::config(format!(
                "label field of length {} does not fit {height}x{width}",
                labels.len()
            )));
        }
        let mut remap = std::collections::HashMap::new();
        let labels: Vec<usize> = labels
            .into_iter()
            .map(|l| {
                let next = remap.len();
                *remap.entry(l).or_insert(next)
            })
            .collect();
        Ok(Self {
            height,
            width,
            n_segments: remap.len(),
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_segments];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    /// Run-length encoding in raster order as `(label, run)` pairs.
    pub fn to_rle(&self) -> SegmentationRle {
        let mut runs: Vec<[usize; 2]> = Vec::new();
        for &l in &self.labels {
            match runs.last_mut() {
                Some(r) if r[0] == l => r[1] += 1,
                _ => runs.push([l, 1]),
            }
        }
        SegmentationRle {
            height: self.height,
            width: self.width,
            n_segments: self.n_segments,
            runs,
        }
    }

    pub fn from_rle(rle: &SegmentationRle) -> Result<Self> {
        let mut labels = Vec::with_capacity(rle.height * rle.width);
        for &[l, n] in &rle.runs {
            labels.extend(std::iter::repeat_n(l, n));
        }
        let map = Self::from_labels(rle.height, rle.width, labels)?;
        if map.n_segments != rle.n_segments {
            return Err(Error::config("run-length encoding has inconsistent segment count"));
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationRle {
    pub height: usize,
    pub width: usize,
    pub n_segments: usize,
    pub runs: Vec<[usize; 2]>,
}

/// Pixel indices of every segment; set `i` holds the pixels labelled `i`.
pub fn segment_pixel_sets(seg: &SegmentationMap) -> Vec<Vec<usize>> {
    let mut sets = vec![Vec::new(); seg.n_segments];
    for (p, &l) in seg.labels.iter().enumerate() {
        sets[l].push(p);
    }
    sets
}

fn linear_rgb_to_lab(r: f64, g: f64, b: f64) -> [f64; 3] {
    // Linear RGB -> XYZ (D65) -> CIELAB.
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let f = |t: f64| {
        const E: f64 = 216.0 / 24389.0;
        const K: f64 = 24389.0 / 27.0;
        if t > E {
            t.cbrt()
        } else {
            (K * t + 16.0) / 116.0
        }
    };
    let fx = f(x / 0.950_47);
    let fy = f(y);
    let fz = f(z / 1.088_83);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Colour features per pixel: Lab for RGB input, scaled intensity for grey.
fn features(image: &ImageTensor) -> Vec<[f64; 3]> {
    let n = image.shape().pixels();
    if image.channels() == 1 {
        return image
            .channel(0)
            .iter()
            .map(|&v| [100.0 * v as f64, 0.0, 0.0])
            .collect();
    }
    let (r, g, b) = (image.channel(0), image.channel(1), image.channel(2));
    (0..n)
        .map(|i| linear_rgb_to_lab(r[i] as f64, g[i] as f64, b[i] as f64))
        .collect()
}

#[derive(Clone, Copy)]
struct Center {
    color: [f64; 3],
    y: f64,
    x: f64,
}

/// Rows and columns of the initial centre grid for about `k` cells.
fn grid_dims(h: usize, w: usize, k: usize) -> (usize, usize) {
    let rows = ((k as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, h);
    let cols = ((k as f64 / rows as f64).round() as usize).clamp(1, w);
    (rows, cols)
}

pub fn slic_segment(image: &ImageTensor, params: &SlicParams) -> Result<SegmentationMap> {
    let (h, w) = (image.height(), image.width());
    let n = h * w;
    let k = params.target_segments;
    if k == 0 || k > n {
        return Err(Error::config(format!(
            "target_segments {k} must be between 1 and the pixel count {n}"
        )));
    }
    if !(params.compactness > 0.0) || params.iterations == 0 {
        return Err(Error::config("SLIC compactness and iterations must be positive"));
    }
    let feat = features(image);
    let (rows, cols) = grid_dims(h, w, k);
    let step_y = h as f64 / rows as f64;
    let step_x = w as f64 / cols as f64;
    let step = (step_x * step_y).sqrt();

    let grad = |y: usize, x: usize| -> f64 {
        let at = |yy: usize, xx: usize| feat[yy * w + xx];
        let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
        let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let dist = |a: [f64; 3], b: [f64; 3]| {
            (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>()
        };
        dist(at(y, x1), at(y, x0)) + dist(at(y1, x), at(y0, x))
    };

    let mut centers = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let cy = ((r as f64 + 0.5) * step_y) as usize;
            let cx = ((c as f64 + 0.5) * step_x) as usize;
            let (cy, cx) = (cy.min(h - 1), cx.min(w - 1));
            // Nudge to the lowest-gradient pixel of the 3x3 neighbourhood.
            let mut best = (grad(cy, cx), cy, cx);
            for yy in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                for xx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                    let gv = grad(yy, xx);
                    if gv < best.0 {
                        best = (gv, yy, xx);
                    }
                }
            }
            let (_, y, x) = best;
            centers.push(Center {
                color: feat[y * w + x],
                y: y as f64,
                x: x as f64,
            });
        }
    }

    let spatial = (params.compactness / step).powi(2);
    let radius = step.ceil() as isize;
    let mut labels = vec![usize::MAX; n];
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..params.iterations {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let y0 = (c.y.round() as isize - radius).max(0) as usize;
            let y1 = ((c.y.round() as isize + radius) as usize).min(h - 1);
            let x0 = (c.x.round() as isize - radius).max(0) as usize;
            let x1 = ((c.x.round() as isize + radius) as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * w + x;
                    let f = feat[p];
                    let dc = (0..3).map(|k| (f[k] - c.color[k]).powi(2)).sum::<f64>();
                    let ds = (y as f64 - c.y).powi(2) + (x as f64 - c.x).powi(2);
                    let d = dc + ds * spatial;
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = ci;
                    }
                }
            }
        }
        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for (p, &l) in labels.iter().enumerate() {
            if l == usize::MAX {
                continue;
            }
            let a = &mut acc[l];
            for k in 0..3 {
                a[k] += feat[p][k];
            }
            a[3] += (p / w) as f64;
            a[4] += (p % w) as f64;
            a[5] += 1.0;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                c.color = [a[0] / a[5], a[1] / a[5], a[2] / a[5]];
                c.y = a[3] / a[5];
                c.x = a[4] / a[5];
            }
        }
    }

    // Pixels outside every search window join the nearest centre.
    for p in 0..n {
        if labels[p] == usize::MAX {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            labels[p] = centers
                .iter()
                .enumerate()
                .map(|(i, c)| (i, (c.y - y).powi(2) + (c.x - x).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .unwrap();
        }
    }

    let min_size = ((n as f64 / centers.len() as f64) / 4.0).floor() as usize;
    let labels = enforce_connectivity(h, w, &labels, min_size);
    SegmentationMap::from_labels(h, w, labels)
}

/// Split labels into 4-connected components and merge components smaller
/// than `min_size` into their largest adjacent component.
fn enforce_connectivity(h: usize, w: usize, labels: &[usize], min_size: usize) -> Vec<usize> {
    let n = h * w;
    let mut comp = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let lab = labels[start];
        comp[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if comp[q] == usize::MAX && labels[q] == lab {
                    comp[q] = id;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        sizes.push(size);
    }

    let nc = sizes.len();
    let mut adjacency: Vec<std::collections::BTreeSet<usize>> = vec![Default::default(); nc];
    for p in 0..n {
        let (y, x) = (p / w, p % w);
        if x + 1 < w && comp[p] != comp[p + 1] {
            adjacency[comp[p]].insert(comp[p + 1]);
            adjacency[comp[p + 1]].insert(comp[p]);
        }
        if y + 1 < h && comp[p] != comp[p + w] {
            adjacency[comp[p]].insert(comp[p + w]);
            adjacency[comp[p + w]].insert(comp[p]);
        }
    }

    let mut parent: Vec<usize> = (0..nc).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut merged_size = sizes.clone();
    let mut order: Vec<usize> = (0..nc).collect();
    order.sort_by_key(|&c| (sizes[c], c));
    for c in order {
        let root = find(&mut parent, c);
        if merged_size[root] >= min_size.max(1) {
            continue;
        }
        let mut best: Option<(usize, usize)> = None;
        for &nb in &adjacency[c] {
            let r = find(&mut parent, nb);
            if r == root {
                continue;
            }
            let cand = (merged_size[r], usize::MAX - r);
            if best.is_none_or(|b| cand > (b.0, usize::MAX - b.1)) {
                best = Some((merged_size[r], r));
            }
        }
        if let Some((_, target)) = best {
            parent[root] = target;
            merged_size[target] += merged_size[root];
        }
    }
    (0..n).map(|p| find(&mut parent, comp[p])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn is_partition(seg: &SegmentationMap) -> bool {
        let sets = segment_pixel_sets(seg);
        let mut seen = vec![false; seg.height() * seg.width()];
        for s in &sets {
            if s.is_empty() {
                return false;
            }
            for &p in s {
                if seen[p] {
                    return false;
                }
                seen[p] = true;
            }
        }
        seen.into_iter().all(|v| v)
    }

    #[test]
    fn single_segment() {
        let img = ImageTensor::filled(Shape::new(3, 10, 12), 0.4).unwrap();
        let p = SlicParams {
            target_segments: 1,
            ..Default::default()
        };
        let seg = slic_segment(&img, &p).unwrap();
        assert_eq!(seg.n_segments(), 1);
        assert!(seg.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn too_many_segments_rejected() {
        let img = ImageTensor::filled(Shape::new(1, 3, 3), 0.4).unwrap();
        let p = SlicParams {
            target_segments: 10,
            ..Default::default()
        };
        assert!(matches!(slic_segment(&img, &p), Err(Error::Config(_))));
    }

    #[test]
    fn pixel_sets_small_map() {
        let seg = SegmentationMap::from_labels(2, 2, vec![0, 0, 1, 1]).unwrap();
        let sets = segment_pixel_sets(&seg);
        assert_eq!(sets, vec![vec![0, 1], vec![2, 3]]);
        let one = SegmentationMap::from_labels(2, 3, vec![4; 6]).unwrap();
        assert_eq!(segment_pixel_sets(&one), vec![vec![0, 1, 2, 3, 4, 5]]);
        assert!(is_partition(&seg));
    }

    #[test]
    fn rle_round_trip() {
        let seg = SegmentationMap::from_labels(2, 3, vec![0, 0, 1, 2, 2, 1]).unwrap();
        let rle = seg.to_rle();
        assert_eq!(rle.runs, vec![[0, 2], [1, 1], [2, 2], [1, 1]]);
        assert_eq!(SegmentationMap::from_rle(&rle).unwrap(), seg);
    }

    #[test]
    fn grid_dims_cover_target() {
        assert_eq!(grid_dims(64, 64, 16), (4, 4));
        assert_eq!(grid_dims(64, 64, 2), (1, 2));
        assert_eq!(grid_dims(64, 64, 50), (7, 7));
    }

    #[test]
    fn lab_white_point() {
        let lab = linear_rgb_to_lab(1.0, 1.0, 1.0);
        assert!((lab[0] - 100.0).abs() < 1e-3);
        assert!(lab[1].abs() < 1e-2 && lab[2].abs() < 1e-2);
        let black = linear_rgb_to_lab(0.0, 0.0, 0.0);
        assert!(black[0].abs() < 1e-9);
    }

    #[test]
    fn merging_removes_specks() {
        // A lone pixel of label 1 inside label 0 gets absorbed.
        let mut labels = vec![0; 25];
        labels[12] = 1;
        let out = enforce_connectivity(5, 5, &labels, 4);
        assert!(out.iter().all(|&l| l == out[0]));
    }

    #[test]
    fn disconnected_label_is_split() {
        let labels = vec![0, 1, 0, 0, 1, 0, 0, 1, 0];
        let out = enforce_connectivity(3, 3, &labels, 1);
        let seg = SegmentationMap::from_labels(3, 3, out).unwrap();
        assert_eq!(seg.n_segments(), 3);
    }
}
