//! Greedy graph-merging superpixels in the spirit of entropy-rate
//! segmentation: edges of the 4-neighbour graph carry a colour-similarity
//! weight, and merges are taken best-first with that weight scaled by a
//! balance factor that shrinks as the merged region grows. Stopping at exactly
//! K components gives K connected regions by construction.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use image::RgbImage;

use crate::{PriorError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelConfig {
    /// Gaussian width on RGB distance; `None` uses the mean neighbour distance.
    pub sigma: Option<f64>,
    /// Strength of the size-balance penalty.
    pub balance: f64,
}

impl Default for SuperpixelConfig {
    fn default() -> Self {
        Self {
            sigma: None,
            balance: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelMap {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    /// Row-major region ids in `[0, count)`.
    pub ids: Vec<u32>,
}

impl SuperpixelMap {
    #[inline]
    pub fn id_at(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.count];
        for &id in &self.ids {
            s[id as usize] += 1;
        }
        s
    }

    /// True when every region is non-empty and 4-connected.
    pub fn is_valid_partition(&self) -> bool {
        if self.ids.len() != self.width * self.height || self.ids.iter().any(|&i| i as usize >= self.count) {
            return false;
        }
        let sizes = self.sizes();
        if sizes.contains(&0) {
            return false;
        }
        // Flood each region from its first pixel and compare with its size.
        let mut seen = vec![false; self.ids.len()];
        let mut started = vec![false; self.count];
        let mut stack = Vec::new();
        for start in 0..self.ids.len() {
            let id = self.ids[start];
            if started[id as usize] {
                continue;
            }
            started[id as usize] = true;
            let mut reached = 0;
            seen[start] = true;
            stack.push(start);
            while let Some(p) = stack.pop() {
                reached += 1;
                let (x, y) = (p % self.width, p / self.width);
                for q in neighbours(x, y, self.width, self.height) {
                    if !seen[q] && self.ids[q] == id {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
            if reached != sizes[id as usize] {
                return false;
            }
        }
        true
    }
}

fn neighbours(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let mut out = [usize::MAX; 4];
    if x > 0 {
        out[0] = y * w + x - 1;
    }
    if x + 1 < w {
        out[1] = y * w + x + 1;
    }
    if y > 0 {
        out[2] = (y - 1) * w + x;
    }
    if y + 1 < h {
        out[3] = (y + 1) * w + x;
    }
    out.into_iter().filter(|&q| q != usize::MAX)
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    edge: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Candidate {
    fn cmp(&self, o: &Self) -> Ordering {
        // Max-heap on gain; lower edge index wins ties for determinism.
        self.gain.total_cmp(&o.gain).then_with(|| o.edge.cmp(&self.edge))
    }
}

struct Dsu {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }
    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let p = self.parent[a as usize];
            self.parent[a as usize] = self.parent[p as usize];
            a = p;
        }
        a
    }
    fn union(&mut self, a: u32, b: u32) {
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] { (a, b) } else { (b, a) };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
    }
}

pub fn superpixels(image: &RgbImage, k: usize) -> Result<SuperpixelMap> {
    superpixels_with(image, k, &SuperpixelConfig::default())
}

pub fn superpixels_with(image: &RgbImage, k: usize, cfg: &SuperpixelConfig) -> Result<SuperpixelMap> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let n = w * h;
    if k == 0 || k > n {
        return Err(PriorError::BadSuperpixelCount { k, max: n });
    }

    let px: Vec<[f64; 3]> = image.pixels().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
    let dist2 = |a: usize, b: usize| -> f64 { (0..3).map(|c| (px[a][c] - px[b][c]).powi(2)).sum() };

    let mut edges: Vec<(u32, u32)> = Vec::with_capacity(2 * n);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                edges.push((p as u32, (p + 1) as u32));
            }
            if y + 1 < h {
                edges.push((p as u32, (p + w) as u32));
            }
        }
    }
    let d2: Vec<f64> = edges.iter().map(|&(a, b)| dist2(a as usize, b as usize)).collect();
    let sigma = cfg
        .sigma
        .unwrap_or_else(|| {
            if d2.is_empty() {
                1.0
            } else {
                d2.iter().map(|v| v.sqrt()).sum::<f64>() / d2.len() as f64
            }
        })
        .max(1.0);
    let weight: Vec<f64> = d2.iter().map(|v| (-v / (2.0 * sigma * sigma)).exp()).collect();

    // The balance factor depends on the merged size relative to the target
    // region size, so gains only ever decrease and lazy re-evaluation is exact.
    let target = n as f64 / k as f64;
    let gain = |e: usize, merged: u32| weight[e] * (-cfg.balance * merged as f64 / target).exp();

    let mut dsu = Dsu::new(n);
    let mut heap: BinaryHeap<Candidate> = (0..edges.len()).map(|e| Candidate { gain: gain(e, 2), edge: e }).collect();
    let mut components = n;
    while components > k {
        let Some(top) = heap.pop() else { break };
        let (a, b) = edges[top.edge];
        let (ra, rb) = (dsu.find(a), dsu.find(b));
        if ra == rb {
            continue;
        }
        let fresh = gain(top.edge, dsu.size[ra as usize] + dsu.size[rb as usize]);
        let next_best = heap.peek().map(|c| c.gain).unwrap_or(f64::NEG_INFINITY);
        if fresh + 1e-15 < top.gain && fresh < next_best {
            heap.push(Candidate { gain: fresh, edge: top.edge });
            continue;
        }
        dsu.union(ra, rb);
        components -= 1;
    }

    // Relabel roots to dense ids in raster order of first appearance.
    let mut label = vec![u32::MAX; n];
    let mut ids = Vec::with_capacity(n);
    let mut next = 0u32;
    for p in 0..n {
        let r = dsu.find(p as u32) as usize;
        if label[r] == u32::MAX {
            label[r] = next;
            next += 1;
        }
        ids.push(label[r]);
    }
    Ok(SuperpixelMap {
        width: w,
        height: h,
        count: next as usize,
        ids,
    })
}
