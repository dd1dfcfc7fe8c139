//! SLIC superpixels, superpoint grouping through the camera, and the pooled
//! region descriptors used by the contrastive objective.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::geometry::CorrespondenceMap;
use crate::tensor::{Real, Tensor};

/// Pixel-to-segment labels of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelPartition {
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub segments: usize,
}

/// Jointly visible point indices per segment; empty groups are kept so that
/// group `i` always pairs with segment `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpointGroups {
    pub groups: Vec<Vec<usize>>,
}

impl SuperpointGroups {
    /// Ids of groups with at least one point.
    pub fn nonempty(&self) -> Vec<usize> {
        (0..self.groups.len())
            .filter(|&i| !self.groups[i].is_empty())
            .collect()
    }
}

/// Linear RGB (0..1) to CIELAB under D65.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let (xn, yn, zn) = (0.950_47, 1.0, 1.088_83);
    let f = |t: f64| {
        let d = 6.0 / 29.0;
        if t > d * d * d {
            t.cbrt()
        } else {
            t / (3.0 * d * d) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x / xn), f(y / yn), f(z / zn));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

#[derive(Clone, Copy, Debug)]
struct Center {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

fn lab_image<T: Real>(image: &Tensor<T>) -> Result<(Vec<[f64; 3]>, usize, usize)> {
    let (c, h, w) = image.dims3()?;
    ensure!(c == 3, Shape, "SLIC needs a 3-channel image, got {}", c);
    let hw = h * w;
    let d = image.data();
    let lab = (0..hw)
        .map(|p| rgb_to_lab([d[p].as_f64(), d[hw + p].as_f64(), d[2 * hw + p].as_f64()]))
        .collect();
    Ok((lab, h, w))
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Grid of at most `k` seeds, roughly `s` apart.
fn grid_dims(h: usize, w: usize, k: usize) -> (usize, usize) {
    let s = ((h * w) as f64 / k as f64).sqrt();
    let mut nx = ((w as f64 / s).round() as usize).clamp(1, w);
    let mut ny = ((h as f64 / s).round() as usize).clamp(1, h);
    while nx * ny > k {
        if nx * h >= ny * w && nx > 1 {
            nx -= 1;
        } else if ny > 1 {
            ny -= 1;
        } else {
            nx -= 1;
        }
    }
    (nx, ny)
}

fn gradient_at(lab: &[[f64; 3]], h: usize, w: usize, x: usize, y: usize) -> f64 {
    let at = |xx: usize, yy: usize| &lab[yy * w + xx];
    let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
    let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
    dist2(at(xr, y), at(xl, y)) + dist2(at(x, yd), at(x, yu))
}

/// SLIC over an RGB image (`3 x h x w`, linear 0..1).
pub fn slic<T: Real>(image: &Tensor<T>, k: usize, compactness: f64, iters: usize) -> Result<SuperpixelPartition> {
    let (lab, h, w) = lab_image(image)?;
    ensure!(k >= 1, Argument, "K must be at least 1");
    ensure!(iters >= 1, Argument, "iterations must be at least 1");
    ensure!(k <= h * w, Argument, "K = {} exceeds the {} pixels", k, h * w);
    ensure!(compactness >= 0.0, Argument, "compactness must be non-negative");
    let s = ((h * w) as f64 / k as f64).sqrt();
    let (nx, ny) = grid_dims(h, w, k);

    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let gx = (((i as f64 + 0.5) * w as f64 / nx as f64) as usize).min(w - 1);
            let gy = (((j as f64 + 0.5) * h as f64 / ny as f64) as usize).min(h - 1);
            let mut best = (f64::INFINITY, gx, gy);
            for yy in gy.saturating_sub(1)..=(gy + 1).min(h - 1) {
                for xx in gx.saturating_sub(1)..=(gx + 1).min(w - 1) {
                    let gr = gradient_at(&lab, h, w, xx, yy);
                    if gr < best.0 {
                        best = (gr, xx, yy);
                    }
                }
            }
            centers.push(Center {
                lab: lab[best.2 * w + best.1],
                x: best.1 as f64,
                y: best.2 as f64,
            });
        }
    }

    let spatial = (compactness / s).powi(2);
    let dist = |c: &Center, p: usize| {
        let (x, y) = ((p % w) as f64, (p / w) as f64);
        dist2(&c.lab, &lab[p]) + ((x - c.x).powi(2) + (y - c.y).powi(2)) * spatial
    };
    let mut labels = vec![usize::MAX; h * w];
    let mut best = vec![f64::INFINITY; h * w];
    for _ in 0..iters {
        labels.fill(usize::MAX);
        best.fill(f64::INFINITY);
        for (id, c) in centers.iter().enumerate() {
            let x0 = (c.x - s).floor().max(0.0) as usize;
            let x1 = ((c.x + s).ceil() as usize).min(w - 1);
            let y0 = (c.y - s).floor().max(0.0) as usize;
            let y1 = ((c.y + s).ceil() as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * w + x;
                    let d = dist(c, p);
                    if d < best[p] {
                        best[p] = d;
                        labels[p] = id;
                    }
                }
            }
        }
        for p in 0..h * w {
            if labels[p] == usize::MAX {
                let (mut bd, mut bi) = (f64::INFINITY, 0);
                for (id, c) in centers.iter().enumerate() {
                    let d = dist(c, p);
                    if d < bd {
                        bd = d;
                        bi = id;
                    }
                }
                labels[p] = bi;
            }
        }
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for (p, &l) in labels.iter().enumerate() {
            let acc = &mut sums[l];
            for i in 0..3 {
                acc[i] += lab[p][i];
            }
            acc[3] += (p % w) as f64;
            acc[4] += (p / w) as f64;
            acc[5] += 1.0;
        }
        for (c, acc) in centers.iter_mut().zip(&sums) {
            if acc[5] > 0.0 {
                let n = acc[5];
                c.lab = [acc[0] / n, acc[1] / n, acc[2] / n];
                c.x = acc[3] / n;
                c.y = acc[4] / n;
            }
        }
    }
    enforce_connectivity(&mut labels, h, w);
    let segments = relabel(&mut labels);
    Ok(SuperpixelPartition {
        labels,
        height: h,
        width: w,
        segments,
    })
}

fn neighbours(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (p % w, p / w);
    [
        (x > 0).then(|| p - 1),
        (x + 1 < w).then(|| p + 1),
        (y > 0).then(|| p - w),
        (y + 1 < h).then(|| p + w),
    ]
    .into_iter()
    .flatten()
}

/// 4-connected components of equal labels, numbered in scan order.
fn components(labels: &[usize], h: usize, w: usize) -> (Vec<usize>, Vec<usize>) {
    let mut comp = vec![usize::MAX; labels.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            for q in neighbours(p, h, w) {
                if comp[q] == usize::MAX && labels[q] == labels[p] {
                    comp[q] = id;
                    queue.push_back(q);
                }
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// Keeps each label's largest component and merges every other component
/// into the largest segment touching it.
fn enforce_connectivity(labels: &mut [usize], h: usize, w: usize) {
    loop {
        let (comp, sizes) = components(labels, h, w);
        let n_labels = labels.iter().max().map_or(0, |&m| m + 1);
        let mut main = vec![usize::MAX; n_labels];
        let mut comp_label = vec![0; sizes.len()];
        for (p, &c) in comp.iter().enumerate() {
            comp_label[c] = labels[p];
        }
        for (c, &l) in comp_label.iter().enumerate() {
            if main[l] == usize::MAX || sizes[c] > sizes[main[l]] {
                main[l] = c;
            }
        }
        let mut is_main: Vec<bool> = (0..sizes.len()).map(|c| main[comp_label[c]] == c).collect();
        if is_main.iter().all(|&m| m) {
            return;
        }
        let mut seg_size = vec![0usize; n_labels];
        for &l in labels.iter() {
            seg_size[l] += 1;
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); sizes.len()];
        for (p, &c) in comp.iter().enumerate() {
            members[c].push(p);
        }
        let mut merged_any = false;
        for c in 0..sizes.len() {
            if is_main[c] {
                continue;
            }
            let mut target: Option<usize> = None;
            for &p in &members[c] {
                for q in neighbours(p, h, w) {
                    let qc = comp[q];
                    if qc == c || !is_main[qc] {
                        continue;
                    }
                    let l = labels[q];
                    target = match target {
                        Some(t) if seg_size[t] > seg_size[l] || (seg_size[t] == seg_size[l] && t < l) => Some(t),
                        _ => Some(l),
                    };
                }
            }
            if let Some(t) = target {
                let old = comp_label[c];
                for &p in &members[c] {
                    labels[p] = t;
                }
                seg_size[old] -= members[c].len();
                seg_size[t] += members[c].len();
                // the orphan now belongs to the main body of `t`
                is_main[c] = true;
                comp_label[c] = t;
                merged_any = true;
            }
        }
        if !merged_any {
            return;
        }
    }
}

/// Renumbers labels `0..k` by first appearance in scan order; returns `k`.
fn relabel(labels: &mut [usize]) -> usize {
    let n = labels.iter().max().map_or(0, |&m| m + 1);
    let mut map = vec![usize::MAX; n];
    let mut next = 0;
    for l in labels.iter_mut() {
        if map[*l] == usize::MAX {
            map[*l] = next;
            next += 1;
        }
        *l = map[*l];
    }
    next
}

/// Groups every jointly visible point under its nearest pixel's segment.
pub fn group_superpoints(
    partition: &SuperpixelPartition,
    corr: &CorrespondenceMap,
) -> Result<SuperpointGroups> {
    ensure!(
        partition.height == corr.height && partition.width == corr.width,
        Shape,
        "partition is {}x{}, correspondences target {}x{}",
        partition.height,
        partition.width,
        corr.height,
        corr.width
    );
    let mut groups = vec![Vec::new(); partition.segments];
    for i in 0..corr.len() {
        if let Some(px) = corr.pixel_index(i) {
            groups[partition.labels[px]].push(i);
        }
    }
    Ok(SuperpointGroups { groups })
}

impl<T: Real> Graph<T> {
    /// Mean image feature per segment, for the listed segment ids (`ids.len() x c`).
    pub fn pool_pixels(&self, features: Var, partition: &SuperpixelPartition, ids: &[usize]) -> Result<Var> {
        let all = self.segment_mean_pixels(features, &partition.labels, partition.segments)?;
        self.gather_rows(all, ids)
    }

    /// Mean point feature (rows of `points`) per listed group; every listed
    /// group must be non-empty.
    pub fn pool_points(&self, points: Var, groups: &SuperpointGroups, ids: &[usize]) -> Result<Var> {
        let n = self.shape(points)[0];
        let mut seg = vec![None; n];
        for (row, &gid) in ids.iter().enumerate() {
            let members = groups
                .groups
                .get(gid)
                .ok_or_else(|| Error::Index(format!("group {gid} out of range")))?;
            ensure!(!members.is_empty(), Argument, "group {} is empty", gid);
            for &p in members {
                ensure!(p < n, Index, "point {} out of {}", p, n);
                seg[p] = Some(row);
            }
        }
        self.segment_mean_rows(points, &seg, ids.len())
    }
}

/// Mean image feature of every segment (`k x c`).
pub fn pool_pixels<T: Real>(features: &Tensor<T>, partition: &SuperpixelPartition) -> Result<Tensor<T>> {
    let g = Graph::new();
    let f = g.constant(features.clone());
    let ids: Vec<usize> = (0..partition.segments).collect();
    let out = g.pool_pixels(f, partition, &ids)?;
    Ok((*g.value(out)).clone())
}

/// Mean point feature of every non-empty group, with the emitted group ids.
pub fn pool_points<T: Real>(points: &Tensor<T>, groups: &SuperpointGroups) -> Result<(Tensor<T>, Vec<usize>)> {
    let g = Graph::new();
    let p = g.constant(points.clone());
    let ids = groups.nonempty();
    let out = g.pool_points(p, groups, &ids)?;
    Ok(((*g.value(out)).clone(), ids))
}

#[derive(Serialize, Deserialize)]
struct PartitionHeader {
    height: usize,
    width: usize,
    segments: usize,
    dtype: String,
    file: String,
}

/// Writes `<stem>.i32` (little-endian labels, row-major) and `<stem>.json`.
pub fn export_partition(partition: &SuperpixelPartition, dir: &Path, stem: &str) -> Result<()> {
    let raw = dir.join(format!("{stem}.i32"));
    let mut bytes = Vec::with_capacity(partition.labels.len() * 4);
    for &l in &partition.labels {
        bytes.extend_from_slice(&(l as i32).to_le_bytes());
    }
    std::fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    let header = PartitionHeader {
        height: partition.height,
        width: partition.width,
        segments: partition.segments,
        dtype: "i32le".into(),
        file: format!("{stem}.i32"),
    };
    let json = dir.join(format!("{stem}.json"));
    std::fs::write(&json, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&json, e))
}

/// Reads a partition written by [`export_partition`].
pub fn import_partition(dir: &Path, stem: &str) -> Result<SuperpixelPartition> {
    let json = dir.join(format!("{stem}.json"));
    let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: PartitionHeader = serde_json::from_str(&text)?;
    let raw = dir.join(&header.file);
    let bytes = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    ensure!(
        bytes.len() == header.height * header.width * 4,
        Data,
        "partition file has {} bytes for {}x{}",
        bytes.len(),
        header.height,
        header.width
    );
    let mut labels = Vec::with_capacity(bytes.len() / 4);
    for c in bytes.chunks_exact(4) {
        let v = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        ensure!(
            v >= 0 && (v as usize) < header.segments,
            Data,
            "label {} outside 0..{}",
            v,
            header.segments
        );
        labels.push(v as usize);
    }
    Ok(SuperpixelPartition {
        labels,
        height: header.height,
        width: header.width,
        segments: header.segments,
    })
}
