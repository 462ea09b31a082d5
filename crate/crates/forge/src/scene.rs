use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classes::{BUILDING, CAR, PERSON, ROAD, SKY, VEGETATION};
use crate::draw::{lerp, mix, shade, Canvas, Rgb, Texture};

/// Which synthetic city a scene is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Style {
    Source,
    Target,
}

impl Style {
    fn tag(self) -> u64 {
        match self {
            Style::Source => 0x5eed_0001,
            Style::Target => 0x5eed_0002,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Style::Source => "source",
            Style::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "source" => Some(Style::Source),
            "target" => Some(Style::Target),
            _ => None,
        }
    }
}

/// Everything that determines a scene. Identical specs render identical bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub seed: u64,
    pub style: Style,
    pub width: u32,
    pub height: u32,
    /// Overrides the style's random car count.
    pub cars: Option<u32>,
    /// Overrides the style's random pedestrian count.
    pub persons: Option<u32>,
    /// Maximum brightness change of the partner image, in percent.
    pub jitter_pct: u32,
}

impl SceneSpec {
    pub fn new(seed: u64, style: Style) -> Self {
        Self {
            seed,
            style,
            width: 128,
            height: 128,
            cars: None,
            persons: None,
            jitter_pct: 10,
        }
    }

    pub fn with_size(mut self, width: u32, height: u32) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn with_dynamic(mut self, cars: u32, persons: u32) -> Self {
        self.cars = Some(cars);
        self.persons = Some(persons);
        self
    }

    pub fn with_jitter(mut self, pct: u32) -> Self {
        self.jitter_pct = pct;
        self
    }

    fn stream(&self, lane: u64) -> u64 {
        mix(mix(self.seed, self.style.tag()), lane)
    }
}

/// One rendered observation.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: RgbImage,
    /// Per-pixel class ids.
    pub labels: GrayImage,
    /// 255 where the pixel's class is static, 0 elsewhere.
    pub static_mask: GrayImage,
    pub partner: Option<Partner>,
}

/// The time-shifted second view of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Partner {
    pub image: RgbImage,
    pub labels: GrayImage,
    /// Brightness gain applied to the partner, fixed point with 1024 = 1.0.
    pub gain_q10: u32,
}

struct StyleParams {
    road: Rgb,
    lane: Rgb,
    buildings: [Rgb; 3],
    window: Rgb,
    sky_top: Rgb,
    sky_horizon: Rgb,
    vegetation: Rgb,
    cars: [Rgb; 4],
    clothes: [Rgb; 3],
    skin: Rgb,
    noise: i32,
    color_var: i32,
    /// Building top row range, percent of height.
    building_top: (u32, u32),
    trees: (u32, u32),
    cars_range: (u32, u32),
    persons_range: (u32, u32),
}

impl StyleParams {
    fn of(style: Style) -> Self {
        match style {
            Style::Source => Self {
                road: [88, 88, 94],
                lane: [225, 225, 225],
                buildings: [[150, 72, 60], [168, 98, 78], [128, 62, 56]],
                window: [58, 70, 92],
                sky_top: [68, 128, 212],
                sky_horizon: [168, 198, 236],
                vegetation: [48, 128, 52],
                cars: [[196, 32, 32], [32, 62, 178], [214, 214, 214], [34, 34, 38]],
                clothes: [[60, 40, 120], [178, 148, 40], [30, 110, 110]],
                skin: [222, 182, 142],
                noise: 8,
                color_var: 12,
                building_top: (16, 34),
                trees: (2, 4),
                cars_range: (1, 3),
                persons_range: (0, 2),
            },
            Style::Target => {
                let s = Self::of(Style::Source);
                Self {
                    road: cast(s.road),
                    lane: cast(s.lane),
                    buildings: s.buildings.map(cast),
                    window: cast(s.window),
                    sky_top: cast(s.sky_top),
                    sky_horizon: cast(s.sky_horizon),
                    vegetation: cast(s.vegetation),
                    cars: s.cars.map(cast),
                    clothes: s.clothes.map(cast),
                    skin: cast(s.skin),
                    noise: 14,
                    color_var: 16,
                    building_top: (8, 26),
                    trees: (0, 2),
                    cars_range: (2, 5),
                    persons_range: (1, 4),
                }
            }
        }
    }
}

/// Target appearance: one global warm, hazy, low-contrast transform of the source palette.
const CAST: [(i32, i32); 3] = [(80, 48), (72, 34), (55, 12)];

fn cast(c: Rgb) -> Rgb {
    let mut out = [0u8; 3];
    for k in 0..3 {
        let (gain, offset) = CAST[k];
        out[k] = (c[k] as i32 * gain / 100 + offset).clamp(0, 255) as u8;
    }
    out
}

fn pct(total: i32, p: u32) -> i32 {
    total * p as i32 / 100
}

fn vary(rng: &mut ChaCha8Rng, c: Rgb, amount: i32) -> Rgb {
    if amount == 0 {
        return c;
    }
    let d = rng.gen_range(-amount..=amount);
    shade(c, d)
}

struct Layout {
    road_top: i32,
}

fn draw_static(canvas: &mut Canvas, spec: &SceneSpec, p: &StyleParams) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.stream(1));
    let (w, h) = (canvas.width, canvas.height);
    let tex = |k: u64| Texture {
        seed: spec.stream(100 + k),
        amp: p.noise,
    };
    let horizon = pct(h, rng.gen_range(38..=48));
    let road_top = horizon + pct(h, rng.gen_range(8..=16)).max(2);

    let (top, bottom) = (p.sky_top, p.sky_horizon);
    canvas.fill(0, 0, w, horizon, |_, _| true, |_, y| lerp(top, bottom, y, horizon), SKY, tex(0));
    canvas.rect(0, horizon, w, road_top, vary(&mut rng, p.vegetation, p.color_var / 2), VEGETATION, tex(1));

    let mut x = -pct(w, rng.gen_range(0..=6));
    let mut k = 2;
    while x < w {
        x += pct(w, rng.gen_range(0..=8));
        let bw = pct(w, rng.gen_range(12..=30)).max(4);
        let btop = pct(h, rng.gen_range(p.building_top.0..=p.building_top.1));
        let base = p.buildings[rng.gen_range(0..p.buildings.len())];
        let color = vary(&mut rng, base, p.color_var);
        canvas.rect(x, btop, x + bw, road_top, color, BUILDING, tex(k));
        let win = pct(w, 3).max(1);
        let pitch = pct(w, 7).max(win + 1);
        let wcolor = vary(&mut rng, p.window, p.color_var / 2);
        let mut wy = btop + pitch / 2;
        while wy + win < road_top - pitch / 2 {
            let mut wx = x + pitch / 2;
            while wx + win < x + bw - pitch / 3 {
                canvas.rect(wx, wy, wx + win, wy + win, wcolor, BUILDING, tex(k));
                wx += pitch;
            }
            wy += pitch;
        }
        x += bw;
        k += 1;
    }

    let trees = rng.gen_range(p.trees.0..=p.trees.1);
    for t in 0..trees {
        let r = pct(w, rng.gen_range(5..=9)).max(2);
        let cx = rng.gen_range(0..w);
        let cy = rng.gen_range((horizon - r).max(r)..=(road_top - r).max(r));
        let color = vary(&mut rng, p.vegetation, p.color_var);
        canvas.ellipse(cx, cy, r, r * 5 / 4, color, VEGETATION, tex(200 + t as u64));
    }

    canvas.rect(0, road_top, w, h, vary(&mut rng, p.road, p.color_var / 2), ROAD, tex(300));
    let lane_y = road_top + (h - road_top) * 55 / 100;
    let thick = (h / 64).max(1);
    let dash = pct(w, 8).max(2);
    let gap = pct(w, 6).max(2);
    let mut lx = -rng.gen_range(0..dash + gap);
    while lx < w {
        canvas.rect(lx, lane_y, lx + dash, lane_y + thick, p.lane, ROAD, tex(301));
        lx += dash + gap;
    }
    Layout { road_top }
}

fn draw_dynamic(canvas: &mut Canvas, spec: &SceneSpec, p: &StyleParams, layout: &Layout, lane: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.stream(lane));
    let (w, h) = (canvas.width, canvas.height);
    let road_top = layout.road_top;
    let tex = |k: u64| Texture {
        seed: spec.stream(lane * 1000 + k),
        amp: p.noise,
    };
    let cars = spec.cars.unwrap_or_else(|| rng.gen_range(p.cars_range.0..=p.cars_range.1));
    let persons = spec.persons.unwrap_or_else(|| rng.gen_range(p.persons_range.0..=p.persons_range.1));

    let mut objects: Vec<(i32, bool)> = Vec::new();
    for _ in 0..persons {
        let feet = rng.gen_range(road_top..=road_top + (h - road_top) / 3);
        objects.push((feet, false));
    }
    for _ in 0..cars {
        let bottom = rng.gen_range(road_top + pct(h, 6)..=h);
        objects.push((bottom, true));
    }
    // painter's order: farther (higher on screen) first
    objects.sort_by_key(|o| o.0);
    for (i, &(bottom, is_car)) in objects.iter().enumerate() {
        let t = tex(i as u64);
        if is_car {
            let cw = pct(w, rng.gen_range(14..=24)).max(4);
            let ch = (cw * 45 / 100).max(2);
            let x0 = rng.gen_range(-cw / 3..=w - cw * 2 / 3);
            let pick = p.cars[rng.gen_range(0..p.cars.len())];
            let body = vary(&mut rng, pick, p.color_var);
            let y0 = bottom - ch;
            canvas.rounded_rect(x0, y0, x0 + cw, bottom, ch / 4, body, CAR, t);
            let glass = shade(p.window, -20);
            canvas.rect(x0 + cw / 5, y0 + ch / 6, x0 + cw * 4 / 5, y0 + ch / 2, glass, CAR, t);
            let wr = (ch / 4).max(1);
            canvas.ellipse(x0 + cw / 5, bottom - wr, wr, wr, [22, 22, 24], CAR, t);
            canvas.ellipse(x0 + cw * 4 / 5, bottom - wr, wr, wr, [22, 22, 24], CAR, t);
        } else {
            let pw = pct(w, rng.gen_range(4..=6)).max(2);
            let ph = pct(h, rng.gen_range(12..=18)).max(4);
            let cx = rng.gen_range(0..w);
            let pick = p.clothes[rng.gen_range(0..p.clothes.len())];
            let cloth = vary(&mut rng, pick, p.color_var);
            canvas.capsule(cx, bottom - ph, bottom, pw, cloth, PERSON, t);
            let head = (pw * 2 / 3).max(1);
            canvas.ellipse(cx, bottom - ph - head / 2, head, head, p.skin, PERSON, t);
        }
    }
}

fn into_images(canvas: Canvas, w: u32, h: u32) -> (RgbImage, GrayImage) {
    (
        RgbImage::from_raw(w, h, canvas.rgb).expect("canvas size"),
        GrayImage::from_raw(w, h, canvas.labels).expect("canvas size"),
    )
}

fn static_mask(labels: &GrayImage) -> GrayImage {
    GrayImage::from_fn(labels.width(), labels.height(), |x, y| {
        let l = labels.get_pixel(x, y)[0];
        image::Luma([if l == CAR || l == PERSON { 0 } else { 255 }])
    })
}

fn render(spec: &SceneSpec, with_partner: bool) -> SceneSample {
    let p = StyleParams::of(spec.style);
    let mut base = Canvas::new(spec.width, spec.height);
    let layout = draw_static(&mut base, spec, &p);
    let partner_canvas = with_partner.then(|| Canvas {
        width: base.width,
        height: base.height,
        rgb: base.rgb.clone(),
        labels: base.labels.clone(),
    });
    draw_dynamic(&mut base, spec, &p, &layout, 2);
    let (image, labels) = into_images(base, spec.width, spec.height);
    let partner = partner_canvas.map(|mut c| {
        draw_dynamic(&mut c, spec, &p, &layout, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.stream(4));
        let span = (spec.jitter_pct * 1024 / 100) as i32;
        let gain_q10 = (1024 + rng.gen_range(-span..=span)) as u32;
        c.apply_gain(gain_q10);
        let (image, labels) = into_images(c, spec.width, spec.height);
        Partner {
            image,
            labels,
            gain_q10,
        }
    });
    SceneSample {
        static_mask: static_mask(&labels),
        image,
        labels,
        partner,
    }
}

/// Renders a single observation.
pub fn generate_scene(spec: &SceneSpec) -> SceneSample {
    render(spec, false)
}

/// Renders an observation plus its time-shifted partner: same static layout,
/// independently placed cars and pedestrians, global brightness jitter.
pub fn generate_pair(spec: &SceneSpec) -> SceneSample {
    render(spec, true)
}
