//! Integer-only raster primitives.

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    splitmix(a ^ splitmix(b))
}

pub(crate) type Rgb = [u8; 3];

/// Per-pixel deterministic texture: a hash of (seed, x, y) mapped to `[-amp, amp]`.
#[derive(Clone, Copy)]
pub(crate) struct Texture {
    pub seed: u64,
    pub amp: i32,
}

impl Texture {
    #[inline]
    fn offset(&self, x: i32, y: i32) -> i32 {
        if self.amp == 0 {
            return 0;
        }
        let h = mix(self.seed, ((x as u32 as u64) << 32) | y as u32 as u64);
        (h % (2 * self.amp as u64 + 1)) as i32 - self.amp
    }
}

pub(crate) struct Canvas {
    pub width: i32,
    pub height: i32,
    pub rgb: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Self {
        let n = (width * height) as usize;
        Self {
            width: width as i32,
            height: height as i32,
            rgb: vec![0; 3 * n],
            labels: vec![0; n],
        }
    }

    #[inline]
    pub fn paint(&mut self, x: i32, y: i32, color: Rgb, label: u8, tex: Texture) {
        if x < 0 || y < 0 || x >= self.width || y >= self.height {
            return;
        }
        let i = (y * self.width + x) as usize;
        let o = tex.offset(x, y);
        for c in 0..3 {
            self.rgb[3 * i + c] = (color[c] as i32 + o).clamp(0, 255) as u8;
        }
        self.labels[i] = label;
    }

    /// Paints every pixel of the half-open box `[x0,x1)×[y0,y1)` that satisfies `inside`.
    #[allow(clippy::too_many_arguments)]
    pub fn fill(
        &mut self,
        x0: i32,
        y0: i32,
        x1: i32,
        y1: i32,
        inside: impl Fn(i32, i32) -> bool,
        color: impl Fn(i32, i32) -> Rgb,
        label: u8,
        tex: Texture,
    ) {
        for y in y0.max(0)..y1.min(self.height) {
            for x in x0.max(0)..x1.min(self.width) {
                if inside(x, y) {
                    self.paint(x, y, color(x, y), label, tex);
                }
            }
        }
    }

    pub fn rect(&mut self, x0: i32, y0: i32, x1: i32, y1: i32, color: Rgb, label: u8, tex: Texture) {
        self.fill(x0, y0, x1, y1, |_, _| true, |_, _| color, label, tex);
    }

    /// Axis-aligned ellipse centred at `(cx, cy)` with radii `rx`, `ry`.
    #[allow(clippy::too_many_arguments)]
    pub fn ellipse(&mut self, cx: i32, cy: i32, rx: i32, ry: i32, color: Rgb, label: u8, tex: Texture) {
        let (rx, ry) = (rx.max(1) as i64, ry.max(1) as i64);
        let inside = move |x: i32, y: i32| {
            let dx = (x - cx) as i64;
            let dy = (y - cy) as i64;
            (dx * ry) * (dx * ry) + (dy * rx) * (dy * rx) <= (rx * ry) * (rx * ry)
        };
        self.fill(
            cx - rx as i32,
            cy - ry as i32,
            cx + rx as i32 + 1,
            cy + ry as i32 + 1,
            inside,
            |_, _| color,
            label,
            tex,
        );
    }

    /// Rectangle `[x0,x1)×[y0,y1)` with corners rounded by radius `r`.
    #[allow(clippy::too_many_arguments)]
    pub fn rounded_rect(&mut self, x0: i32, y0: i32, x1: i32, y1: i32, r: i32, color: Rgb, label: u8, tex: Texture) {
        let r = r.max(0).min((x1 - x0) / 2).min((y1 - y0) / 2);
        let inside = move |x: i32, y: i32| {
            let cx = x.clamp(x0 + r, x1 - 1 - r);
            let cy = y.clamp(y0 + r, y1 - 1 - r);
            let (dx, dy) = ((x - cx) as i64, (y - cy) as i64);
            dx * dx + dy * dy <= (r as i64) * (r as i64)
        };
        self.fill(x0, y0, x1, y1, inside, |_, _| color, label, tex);
    }

    /// Vertical capsule: a `w`-wide stadium spanning rows `[top, bottom)`.
    #[allow(clippy::too_many_arguments)]
    pub fn capsule(&mut self, cx: i32, top: i32, bottom: i32, w: i32, color: Rgb, label: u8, tex: Texture) {
        let r = (w / 2).max(1);
        let (a, b) = (top + r, (bottom - 1 - r).max(top + r));
        let inside = move |x: i32, y: i32| {
            let cy = y.clamp(a, b);
            let (dx, dy) = ((x - cx) as i64, (y - cy) as i64);
            dx * dx + dy * dy <= (r as i64) * (r as i64)
        };
        self.fill(cx - r, top, cx + r + 1, bottom, inside, |_, _| color, label, tex);
    }

    /// Multiplies every channel by `gain_q10 / 1024`, rounding to nearest.
    pub fn apply_gain(&mut self, gain_q10: u32) {
        if gain_q10 == 1024 {
            return;
        }
        for v in &mut self.rgb {
            *v = ((*v as u32 * gain_q10 + 512) >> 10).min(255) as u8;
        }
    }
}

/// Integer interpolation `a + (b − a)·num/den` per channel.
pub(crate) fn lerp(a: Rgb, b: Rgb, num: i32, den: i32) -> Rgb {
    let den = den.max(1);
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (a[c] as i32 + (b[c] as i32 - a[c] as i32) * num / den) as u8;
    }
    out
}

/// Shifts every channel by the same signed offset.
pub(crate) fn shade(c: Rgb, delta: i32) -> Rgb {
    [
        (c[0] as i32 + delta).clamp(0, 255) as u8,
        (c[1] as i32 + delta).clamp(0, 255) as u8,
        (c[2] as i32 + delta).clamp(0, 255) as u8,
    ]
}
