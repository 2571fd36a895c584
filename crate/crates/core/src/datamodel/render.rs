//! Procedural articulated figures.
//!
//! A figure is a frontal stick-body with thick limbs built from capsules, a
//! torso quad and a head disc. Each identity owns a fixed garment palette so
//! that part colours stay consistent across poses; poses vary per image.

use rand::Rng;

use super::{Keypoint, NUM_JOINTS};

pub type Rgb = [f32; 3];

/// Fine body regions, 1-based, in the order of the K=8 part table.
pub mod region {
    pub const HEAD: u8 = 1;
    pub const TORSO: u8 = 2;
    pub const RIGHT_ARM: u8 = 3;
    pub const LEFT_ARM: u8 = 4;
    pub const RIGHT_LEG: u8 = 5;
    pub const LEFT_LEG: u8 = 6;
    pub const RIGHT_FOOT: u8 = 7;
    pub const LEFT_FOOT: u8 = 8;
}

/// Garment colours of one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Appearance {
    pub head: Rgb,
    pub shirt: Rgb,
    pub shirt_stripe: Rgb,
    pub sleeves: Rgb,
    pub pants: Rgb,
    pub shoes: Rgb,
}

fn random_color<R: Rng>(rng: &mut R) -> Rgb {
    [
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
    ]
}

fn shift_color<R: Rng>(rng: &mut R, c: Rgb, amount: f32) -> Rgb {
    c.map(|v| {
        let d = if v > 0.5 { -amount } else { amount };
        (v + d * rng.random_range(0.6..1.0)).clamp(0.0, 1.0)
    })
}

impl Appearance {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let skin_tone = rng.random_range(0.35..0.9f32);
        let skin = [skin_tone, skin_tone * 0.78, skin_tone * 0.62];
        let hair = random_color(rng).map(|v| v * 0.5);
        let shirt = random_color(rng);
        let shirt_stripe = shift_color(rng, shirt, 0.07);
        let sleeves = if rng.random_bool(0.5) {
            shirt
        } else {
            random_color(rng)
        };
        Appearance {
            head: [0, 1, 2].map(|c| 0.6 * skin[c] + 0.4 * hair[c]),
            shirt,
            shirt_stripe,
            sleeves,
            pants: random_color(rng),
            shoes: random_color(rng).map(|v| v * 0.7),
        }
    }
}

/// Joint positions plus limb thicknesses, in image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub joints: [[f32; 2]; NUM_JOINTS],
    pub head_center: [f32; 2],
    pub head_radius: f32,
    pub arm_radius: f32,
    pub leg_radius: f32,
    pub foot_radius: f32,
    pub feet: [[f32; 2]; 2],
    /// Top of the head, used as the stripe-pattern origin.
    pub top: f32,
}

impl Pose {
    /// Samples a frontal pose whose feet rest near `base_y`, centred on `cx`,
    /// with overall body height `body_h`.
    pub fn sample<R: Rng>(rng: &mut R, cx: f32, base_y: f32, body_h: f32) -> Self {
        let h = body_h;
        let top = base_y - h;
        let at = |fy: f32| top + fy * h;
        let head_center = [cx + rng.random_range(-0.01..0.01) * h, at(0.09)];
        let head_radius = 0.075 * h;
        let mut j = [[0.0f32; 2]; NUM_JOINTS];
        j[0] = [head_center[0], at(0.11)];
        j[1] = [head_center[0] + 0.03 * h, at(0.085)];
        j[2] = [head_center[0] - 0.03 * h, at(0.085)];
        j[3] = [head_center[0] + 0.065 * h, at(0.095)];
        j[4] = [head_center[0] - 0.065 * h, at(0.095)];
        let shoulder_y = at(0.21);
        let hip_y = at(0.52);
        // Frontal view: the person's right side is on the image left.
        j[5] = [cx + 0.12 * h, shoulder_y];
        j[6] = [cx - 0.12 * h, shoulder_y];
        j[11] = [cx + 0.075 * h, hip_y];
        j[12] = [cx - 0.075 * h, hip_y];

        let limb = |from: [f32; 2], angle_deg: f32, len: f32| -> [f32; 2] {
            let a = angle_deg.to_radians();
            [from[0] + a.sin() * len, from[1] + a.cos() * len]
        };
        for (side, sho, elb, wri) in [(1.0f32, 5, 7, 9), (-1.0, 6, 8, 10)] {
            let upper = rng.random_range(8.0..55.0f32);
            let lower = upper + rng.random_range(-25.0..45.0f32);
            j[elb] = limb(j[sho], side * upper, 0.17 * h);
            j[wri] = limb(j[elb], side * lower, 0.16 * h);
        }
        let mut feet = [[0.0f32; 2]; 2];
        for (k, (side, hip, knee, ankle)) in [(1.0f32, 11, 13, 15), (-1.0, 12, 14, 16)]
            .into_iter()
            .enumerate()
        {
            let thigh = rng.random_range(-6.0..16.0f32);
            let shin = thigh + rng.random_range(-10.0..8.0f32);
            j[knee] = limb(j[hip], side * thigh, 0.23 * h);
            j[ankle] = limb(j[knee], side * shin, 0.215 * h);
            feet[k] = [j[ankle][0] + side * 0.06 * h, j[ankle][1] + 0.02 * h];
        }
        Pose {
            joints: j,
            head_center,
            head_radius,
            arm_radius: 0.035 * h,
            leg_radius: 0.045 * h,
            foot_radius: 0.026 * h,
            feet,
            top,
        }
    }

    pub fn translated(&self, dx: f32, dy: f32) -> Self {
        let mv = |p: [f32; 2]| [p[0] + dx, p[1] + dy];
        Pose {
            joints: self.joints.map(mv),
            head_center: mv(self.head_center),
            feet: self.feet.map(mv),
            top: self.top + dy,
            ..self.clone()
        }
    }

    /// Horizontal extent `(min_x, max_x)` and vertical extent `(min_y, max_y)`.
    pub fn bounds(&self) -> ([f32; 2], [f32; 2]) {
        let pad = self.head_radius.max(self.leg_radius);
        let pts = self
            .joints
            .iter()
            .chain(self.feet.iter())
            .chain(std::iter::once(&self.head_center));
        let mut xs = [f32::INFINITY, f32::NEG_INFINITY];
        let mut ys = [f32::INFINITY, f32::NEG_INFINITY];
        for p in pts {
            xs = [xs[0].min(p[0]), xs[1].max(p[0])];
            ys = [ys[0].min(p[1]), ys[1].max(p[1])];
        }
        (
            [xs[0] - pad, xs[1] + pad],
            [ys[0].min(self.head_center[1] - self.head_radius), ys[1] + pad],
        )
    }

    pub fn keypoints(&self) -> Vec<Keypoint> {
        self.joints
            .iter()
            .enumerate()
            .map(|(i, p)| Keypoint::new(p[0], p[1], i as u8))
            .collect()
    }
}

/// Rasterised figure: per-pixel region label (0 = not covered) and colour.
#[derive(Debug, Clone)]
pub struct FigureRaster {
    pub height: usize,
    pub width: usize,
    pub region: Vec<u8>,
    pub color: Vec<Rgb>,
}

impl FigureRaster {
    pub fn covers(&self, x: usize, y: usize) -> bool {
        self.region[y * self.width + x] != 0
    }

    pub fn covers_point(&self, x: f32, y: f32) -> bool {
        if x < 0.0 || y < 0.0 || x >= self.width as f32 || y >= self.height as f32 {
            return false;
        }
        self.covers(x as usize, y as usize)
    }
}

fn dist_to_segment(p: [f32; 2], a: [f32; 2], b: [f32; 2]) -> f32 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0] - p[0], a[1] + t * ab[1] - p[1]];
    (q[0] * q[0] + q[1] * q[1]).sqrt()
}

fn inside_quad(p: [f32; 2], quad: &[[f32; 2]; 4]) -> bool {
    let mut sign = 0.0f32;
    for i in 0..4 {
        let a = quad[i];
        let b = quad[(i + 1) % 4];
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        if cross.abs() < 1e-9 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Rasterises `pose` dressed in `look` at pixel centres. Later primitives
/// overwrite earlier ones: legs, feet, torso, arms, head.
pub fn rasterize(pose: &Pose, look: &Appearance, height: usize, width: usize) -> FigureRaster {
    let j = &pose.joints;
    let torso = [
        [j[6][0] - 0.3 * pose.arm_radius, j[6][1] - 0.5 * pose.arm_radius],
        [j[5][0] + 0.3 * pose.arm_radius, j[5][1] - 0.5 * pose.arm_radius],
        [j[11][0] + 0.5 * pose.leg_radius, j[11][1] + 0.5 * pose.leg_radius],
        [j[12][0] - 0.5 * pose.leg_radius, j[12][1] + 0.5 * pose.leg_radius],
    ];
    let ([x0, x1], [y0, y1]) = pose.bounds();
    let xs = (x0.floor().max(0.0) as usize)..((x1.ceil().max(0.0) as usize).min(width));
    let ys = (y0.floor().max(0.0) as usize)..((y1.ceil().max(0.0) as usize).min(height));
    let mut region = vec![0u8; height * width];
    let mut color = vec![[0.0f32; 3]; height * width];
    let stripe_period = (pose.head_radius * 0.5).max(1.0);
    for y in ys {
        for x in xs.clone() {
            let p = [x as f32 + 0.5, y as f32 + 0.5];
            let mut hit: Option<(u8, Rgb)> = None;
            for (region_id, hip, knee, ankle) in [
                (region::RIGHT_LEG, 12, 14, 16),
                (region::LEFT_LEG, 11, 13, 15),
            ] {
                if dist_to_segment(p, j[hip], j[knee]) <= pose.leg_radius
                    || dist_to_segment(p, j[knee], j[ankle]) <= pose.leg_radius * 0.9
                {
                    hit = Some((region_id, look.pants));
                }
            }
            for (region_id, ankle, foot) in [(region::RIGHT_FOOT, 16, 1), (region::LEFT_FOOT, 15, 0)] {
                if dist_to_segment(p, j[ankle], pose.feet[foot]) <= pose.foot_radius {
                    hit = Some((region_id, look.shoes));
                }
            }
            if inside_quad(p, &torso) {
                let band = ((p[1] - pose.top) / stripe_period).floor() as i64;
                let c = if band.rem_euclid(2) == 0 {
                    look.shirt
                } else {
                    look.shirt_stripe
                };
                hit = Some((region::TORSO, c));
            }
            for (region_id, sho, elb, wri) in [
                (region::RIGHT_ARM, 6, 8, 10),
                (region::LEFT_ARM, 5, 7, 9),
            ] {
                if dist_to_segment(p, j[sho], j[elb]) <= pose.arm_radius
                    || dist_to_segment(p, j[elb], j[wri]) <= pose.arm_radius * 0.85
                {
                    hit = Some((region_id, look.sleeves));
                }
            }
            let dh = [p[0] - pose.head_center[0], p[1] - pose.head_center[1]];
            if dh[0].hypot(dh[1]) <= pose.head_radius {
                hit = Some((region::HEAD, look.head));
            }
            if let Some((r, c)) = hit {
                region[y * width + x] = r;
                color[y * width + x] = c;
            }
        }
    }
    FigureRaster {
        height,
        width,
        region,
        color,
    }
}
