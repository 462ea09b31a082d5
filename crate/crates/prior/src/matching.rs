//! Lattice keypoint matching by normalized cross-correlation.
//!
//! Two-level pyramid: a wide search at half resolution, then a small
//! refinement at full resolution. A match is kept only when its score clears
//! `tau` and matching back from the found location lands within one pixel of
//! the keypoint.

use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;

use crate::{GrayPlane, PriorError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    /// Lattice spacing in pixels.
    pub stride: usize,
    /// Odd patch side length.
    pub patch: usize,
    /// Search radius at the coarse level, in coarse pixels.
    pub radius: usize,
    /// Fine-level search radius around the upsampled coarse hit.
    pub refine_radius: usize,
    pub tau: f64,
    /// Max forward-backward disagreement, in pixels (per axis).
    pub max_fb_error: usize,
    /// Patches flatter than this luma std are not matched.
    pub min_std: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            patch: 9,
            radius: 16,
            refine_radius: 2,
            tau: 0.8,
            max_fb_error: 1,
            min_std: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub xa: usize,
    pub ya: usize,
    pub xb: usize,
    pub yb: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchSet {
    pub width: usize,
    pub height: usize,
    /// Number of lattice keypoints that were tried.
    pub keypoints: usize,
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            keypoints: 0,
            matches: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn retained_fraction(&self) -> f64 {
        if self.keypoints == 0 {
            0.0
        } else {
            self.matches.len() as f64 / self.keypoints as f64
        }
    }

    /// Debug dump: one `xa ya xb yb score` line per match.
    pub fn to_dump(&self) -> String {
        let mut s = String::new();
        for m in &self.matches {
            let _ = writeln!(s, "{} {} {} {} {:.6}", m.xa, m.ya, m.xb, m.yb, m.score);
        }
        s
    }

    pub fn write_dump(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_dump()).map_err(|source| PriorError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Anything that can relate pixels across an image pair.
pub trait Matcher {
    fn match_pair(&self, a: &RgbImage, b: &RgbImage) -> Result<MatchSet>;
}

#[derive(Clone, Debug, Default)]
pub struct NccMatcher {
    pub config: MatchConfig,
}

impl NccMatcher {
    pub fn new(config: MatchConfig) -> Self {
        Self { config }
    }
}

impl Matcher for NccMatcher {
    fn match_pair(&self, a: &RgbImage, b: &RgbImage) -> Result<MatchSet> {
        dense_match(a, b, &self.config)
    }
}

pub fn dense_match(a: &RgbImage, b: &RgbImage, cfg: &MatchConfig) -> Result<MatchSet> {
    if a.dimensions() != b.dimensions() {
        return Err(PriorError::SizeMismatch {
            a: a.dimensions(),
            b: b.dimensions(),
        });
    }
    if cfg.patch % 2 == 0 || cfg.patch == 0 || cfg.stride == 0 {
        return Err(PriorError::Invalid(format!(
            "patch must be odd and stride positive (patch={}, stride={})",
            cfg.patch, cfg.stride
        )));
    }
    let pa = Pyramid::new(GrayPlane::from_rgb(a));
    let pb = Pyramid::new(GrayPlane::from_rgb(b));
    let (w, h) = (pa.fine.plane.width, pa.fine.plane.height);
    let r = cfg.patch / 2;
    let mut out = MatchSet::empty(w, h);
    if w < cfg.patch || h < cfg.patch {
        return Ok(out);
    }

    let mut y = r;
    while y + r < h {
        let mut x = r;
        while x + r < w {
            out.keypoints += 1;
            if let Some((xb, yb, score)) = track(&pa, &pb, x, y, cfg) {
                if score >= cfg.tau {
                    let back = track(&pb, &pa, xb, yb, cfg);
                    let consistent = back.is_some_and(|(bx, by, _)| {
                        bx.abs_diff(x) <= cfg.max_fb_error && by.abs_diff(y) <= cfg.max_fb_error
                    });
                    if consistent {
                        out.matches.push(Match { xa: x, ya: y, xb, yb, score });
                    }
                }
            }
            x += cfg.stride;
        }
        y += cfg.stride;
    }
    Ok(out)
}

/// Coarse-to-fine search for the patch around `(x, y)` of `src` inside `dst`.
fn track(src: &Pyramid, dst: &Pyramid, x: usize, y: usize, cfg: &MatchConfig) -> Option<(usize, usize, f64)> {
    let r = cfg.patch / 2;
    let tmpl = Template::new(&src.fine.plane, x, y, r, cfg.min_std)?;

    // Coarse pass; patch centre is clamped into the valid range on tiny images.
    let cw = src.coarse.plane.width;
    let ch = src.coarse.plane.height;
    let (gx, gy) = if cw > 2 * r && ch > 2 * r {
        let cx = (x / 2).clamp(r, cw - 1 - r);
        let cy = (y / 2).clamp(r, ch - 1 - r);
        match Template::new(&src.coarse.plane, cx, cy, r, 0.0) {
            Some(ct) => {
                let (bx, by, _) = search(&ct, &dst.coarse, cx, cy, cfg.radius)?;
                (
                    x as isize + 2 * (bx as isize - cx as isize),
                    y as isize + 2 * (by as isize - cy as isize),
                )
            }
            None => (x as isize, y as isize),
        }
    } else {
        (x as isize, y as isize)
    };

    let fw = dst.fine.plane.width as isize;
    let fh = dst.fine.plane.height as isize;
    let ri = r as isize;
    let gx = gx.clamp(ri, fw - 1 - ri) as usize;
    let gy = gy.clamp(ri, fh - 1 - ri) as usize;
    search(&tmpl, &dst.fine, gx, gy, cfg.refine_radius)
}

/// Best NCC position within `radius` of `(cx, cy)`. Ties go to the smaller
/// displacement, then raster order.
fn search(t: &Template, dst: &Level, cx: usize, cy: usize, radius: usize) -> Option<(usize, usize, f64)> {
    let r = t.r;
    let w = dst.plane.width;
    let h = dst.plane.height;
    if w <= 2 * r || h <= 2 * r {
        return None;
    }
    let x0 = cx.saturating_sub(radius).max(r);
    let x1 = (cx + radius).min(w - 1 - r);
    let y0 = cy.saturating_sub(radius).max(r);
    let y1 = (cy + radius).min(h - 1 - r);
    let n = t.weights.len() as f64;
    let side = 2 * r + 1;
    let mut best: Option<(usize, usize, f64, usize)> = None;
    for v in y0..=y1 {
        for u in x0..=x1 {
            let (s, s2) = dst.window_sums(u, v, r);
            let var = s2 - s * s / n;
            if var <= 1e-12 {
                continue;
            }
            let mut dot = 0.0f64;
            for (j, row) in t.weights.chunks_exact(side).enumerate() {
                let base = (v + j - r) * w + (u - r);
                let src = &dst.plane.data[base..base + side];
                for (a, b) in row.iter().zip(src) {
                    dot += a * *b as f64;
                }
            }
            let score = dot / (t.norm * var.sqrt());
            let disp = u.abs_diff(cx).pow(2) + v.abs_diff(cy).pow(2);
            let better = match best {
                None => true,
                Some((_, _, bs, bd)) => score > bs + 1e-12 || ((score - bs).abs() <= 1e-12 && disp < bd),
            };
            if better {
                best = Some((u, v, score, disp));
            }
        }
    }
    best.map(|(u, v, s, _)| (u, v, s.clamp(-1.0, 1.0)))
}

/// Zero-mean patch weights and their norm.
struct Template {
    r: usize,
    weights: Vec<f64>,
    norm: f64,
}

impl Template {
    fn new(p: &GrayPlane, x: usize, y: usize, r: usize, min_std: f64) -> Option<Self> {
        if x < r || y < r || x + r >= p.width || y + r >= p.height {
            return None;
        }
        let mut weights = Vec::with_capacity((2 * r + 1).pow(2));
        for yy in y - r..=y + r {
            for xx in x - r..=x + r {
                weights.push(p.at(xx, yy) as f64);
            }
        }
        let n = weights.len() as f64;
        let mean = weights.iter().sum::<f64>() / n;
        weights.iter_mut().for_each(|v| *v -= mean);
        let ss: f64 = weights.iter().map(|v| v * v).sum();
        if ss <= 1e-12 || (ss / n).sqrt() < min_std {
            return None;
        }
        Some(Self {
            r,
            weights,
            norm: ss.sqrt(),
        })
    }
}

/// A plane plus integral images of values and squares.
struct Level {
    plane: GrayPlane,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Level {
    fn new(plane: GrayPlane) -> Self {
        let (w, h) = (plane.width, plane.height);
        let mut sum = vec![0.0; (w + 1) * (h + 1)];
        let mut sq = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let (mut rs, mut rq) = (0.0, 0.0);
            for x in 0..w {
                let v = plane.at(x, y) as f64;
                rs += v;
                rq += v * v;
                sum[(y + 1) * (w + 1) + x + 1] = sum[y * (w + 1) + x + 1] + rs;
                sq[(y + 1) * (w + 1) + x + 1] = sq[y * (w + 1) + x + 1] + rq;
            }
        }
        Self { plane, sum, sq }
    }

    fn window_sums(&self, x: usize, y: usize, r: usize) -> (f64, f64) {
        let s = self.plane.width + 1;
        let (x0, y0, x1, y1) = (x - r, y - r, x + r + 1, y + r + 1);
        let rect = |t: &[f64]| t[y1 * s + x1] - t[y0 * s + x1] - t[y1 * s + x0] + t[y0 * s + x0];
        (rect(&self.sum), rect(&self.sq))
    }
}

struct Pyramid {
    fine: Level,
    coarse: Level,
}

impl Pyramid {
    fn new(plane: GrayPlane) -> Self {
        let coarse = Level::new(plane.downsample());
        Self {
            fine: Level::new(plane),
            coarse,
        }
    }
}
