//! Parametric glyph families standing in for a photo gallery.
//!
//! A class is a fixed composition of 2–4 primitives; an instance perturbs the
//! class parameters, so same-class instances look alike but never identical.
//! The image of an instance is a filled, anti-aliased rendering; its sketch is
//! the jittered outline of every primitive.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::raster::Raster;
use super::strokes::Polyline;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        rot: f64,
    },
    Polygon {
        cx: f64,
        cy: f64,
        radius: f64,
        sides: u32,
        rot: f64,
    },
    Arc {
        cx: f64,
        cy: f64,
        radius: f64,
        start: f64,
        sweep: f64,
        thickness: f64,
    },
}

impl Primitive {
    fn center(&self) -> (f64, f64) {
        match *self {
            Primitive::Ellipse { cx, cy, .. }
            | Primitive::Polygon { cx, cy, .. }
            | Primitive::Arc { cx, cy, .. } => (cx, cy),
        }
    }

    /// Conservative radius of the primitive's footprint around its center.
    fn extent(&self) -> f64 {
        match *self {
            Primitive::Ellipse { rx, ry, .. } => rx.max(ry),
            Primitive::Polygon { radius, .. } => radius,
            Primitive::Arc {
                radius, thickness, ..
            } => radius + thickness / 2.0,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            Primitive::Ellipse {
                cx,
                cy,
                rx,
                ry,
                rot,
            } => vec![0.0, cx, cy, rx, ry, rot],
            Primitive::Polygon {
                cx,
                cy,
                radius,
                sides,
                rot,
            } => vec![1.0, cx, cy, radius, sides as f64, rot],
            Primitive::Arc {
                cx,
                cy,
                radius,
                start,
                sweep,
                thickness,
            } => vec![2.0, cx, cy, radius, start, sweep, thickness],
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Primitive::Ellipse {
                cx,
                cy,
                rx,
                ry,
                rot,
            } => {
                let (dx, dy) = rotate(x - cx, y - cy, -rot);
                (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0
            }
            Primitive::Polygon {
                cx,
                cy,
                radius,
                sides,
                rot,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let r = dx.hypot(dy);
                if r == 0.0 {
                    return true;
                }
                let wedge = TAU / sides as f64;
                let local = (dy.atan2(dx) - rot).rem_euclid(wedge) - wedge / 2.0;
                r * local.cos() <= radius * (PI / sides as f64).cos()
            }
            Primitive::Arc {
                cx,
                cy,
                radius,
                start,
                sweep,
                thickness,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let r = dx.hypot(dy);
                let ang = (dy.atan2(dx) - start).rem_euclid(TAU);
                (r - radius).abs() <= thickness / 2.0 && ang <= sweep
            }
        }
    }

    /// Outline as a polyline; closed shapes repeat their first point.
    pub fn outline(&self, phase: f64) -> Polyline {
        match *self {
            Primitive::Ellipse {
                cx,
                cy,
                rx,
                ry,
                rot,
            } => {
                let n = 24;
                (0..=n)
                    .map(|k| {
                        let t = phase + TAU * k as f64 / n as f64;
                        let (dx, dy) = rotate(rx * t.cos(), ry * t.sin(), rot);
                        [cx + dx, cy + dy]
                    })
                    .collect()
            }
            Primitive::Polygon {
                cx,
                cy,
                radius,
                sides,
                rot,
            } => {
                let vertex = |k: u32| {
                    let t = rot + TAU * k as f64 / sides as f64;
                    [cx + radius * t.cos(), cy + radius * t.sin()]
                };
                let per_edge = 4;
                let mut pts = Vec::new();
                for k in 0..sides {
                    let (a, b) = (vertex(k), vertex(k + 1));
                    for j in 0..per_edge {
                        let s = j as f64 / per_edge as f64;
                        pts.push([a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]);
                    }
                }
                pts.push(pts[0]);
                pts
            }
            Primitive::Arc {
                cx,
                cy,
                radius,
                start,
                sweep,
                ..
            } => {
                let n = 16;
                (0..=n)
                    .map(|k| {
                        let t = start + sweep * k as f64 / n as f64;
                        [cx + radius * t.cos(), cy + radius * t.sin()]
                    })
                    .collect()
            }
        }
    }

    fn perturbed(&self, rng: &mut impl Rng) -> Self {
        let shift = |rng: &mut dyn rand::RngCore| rng.random_range(-0.035..=0.035);
        let scale = |rng: &mut dyn rand::RngCore| rng.random_range(0.85..=1.15);
        let turn = |rng: &mut dyn rand::RngCore| rng.random_range(-0.25..=0.25);
        let mut p = match *self {
            Primitive::Ellipse {
                cx,
                cy,
                rx,
                ry,
                rot,
            } => Primitive::Ellipse {
                cx: cx + shift(rng),
                cy: cy + shift(rng),
                rx: rx * scale(rng),
                ry: ry * scale(rng),
                rot: rot + turn(rng),
            },
            Primitive::Polygon {
                cx,
                cy,
                radius,
                sides,
                rot,
            } => Primitive::Polygon {
                cx: cx + shift(rng),
                cy: cy + shift(rng),
                radius: radius * scale(rng),
                sides,
                rot: rot + turn(rng),
            },
            Primitive::Arc {
                cx,
                cy,
                radius,
                start,
                sweep,
                thickness,
            } => Primitive::Arc {
                cx: cx + shift(rng),
                cy: cy + shift(rng),
                radius: radius * scale(rng),
                start: start + turn(rng),
                sweep: (sweep * scale(rng)).min(1.9 * PI),
                thickness,
            },
        };
        p.keep_inside(0.04);
        p
    }

    /// Shift the center so the whole footprint stays `margin` inside the unit square.
    fn keep_inside(&mut self, margin: f64) {
        let e = self.extent() + margin;
        let (cx, cy) = self.center();
        let clamp = |c: f64| if e >= 0.5 { 0.5 } else { c.clamp(e, 1.0 - e) };
        let (nx, ny) = (clamp(cx), clamp(cy));
        match self {
            Primitive::Ellipse { cx, cy, .. }
            | Primitive::Polygon { cx, cy, .. }
            | Primitive::Arc { cx, cy, .. } => {
                *cx = nx;
                *cy = ny;
            }
        }
    }
}

fn rotate(x: f64, y: f64, a: f64) -> (f64, f64) {
    let (s, c) = a.sin_cos();
    (c * x - s * y, s * x + c * y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphFamily {
    pub class_id: usize,
    pub primitives: Vec<Primitive>,
}

impl GlyphFamily {
    pub fn sample(class_id: usize, rng: &mut impl Rng) -> Self {
        let n = rng.random_range(2..=4);
        let primitives = (0..n)
            .map(|_| {
                let cx = rng.random_range(0.25..=0.75);
                let cy = rng.random_range(0.25..=0.75);
                let mut p = match rng.random_range(0..3) {
                    0 => Primitive::Ellipse {
                        cx,
                        cy,
                        rx: rng.random_range(0.08..=0.22),
                        ry: rng.random_range(0.08..=0.22),
                        rot: rng.random_range(0.0..PI),
                    },
                    1 => Primitive::Polygon {
                        cx,
                        cy,
                        radius: rng.random_range(0.10..=0.24),
                        sides: rng.random_range(3..=6),
                        rot: rng.random_range(0.0..TAU),
                    },
                    _ => Primitive::Arc {
                        cx,
                        cy,
                        radius: rng.random_range(0.12..=0.24),
                        start: rng.random_range(0.0..TAU),
                        sweep: rng.random_range(0.8 * PI..=1.6 * PI),
                        thickness: rng.random_range(0.04..=0.07),
                    },
                };
                p.keep_inside(0.06);
                p
            })
            .collect();
        Self {
            class_id,
            primitives,
        }
    }

    pub fn instance(&self, rng: &mut impl Rng) -> GlyphInstance {
        let primitives: Vec<Primitive> = self.primitives.iter().map(|p| p.perturbed(rng)).collect();
        let shades = primitives
            .iter()
            .map(|_| rng.random_range(0.35..=1.0))
            .collect();
        GlyphInstance { primitives, shades }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphInstance {
    pub primitives: Vec<Primitive>,
    pub shades: Vec<f64>,
}

pub const SUPERSAMPLE: usize = 4;
pub const STROKE_JITTER: f64 = 0.006;

impl GlyphInstance {
    /// Flattened instance identity: every primitive parameter, then the shades.
    pub fn shape_params(&self) -> Vec<f64> {
        self.primitives
            .iter()
            .flat_map(Primitive::params)
            .chain(self.shades.iter().copied())
            .collect()
    }

    /// Filled rendering, painter's order, `SUPERSAMPLE²` coverage samples per pixel.
    pub fn render(&self, width: usize, height: usize) -> Raster {
        let mut r = Raster::new(width, height);
        let n = SUPERSAMPLE;
        let sx = 1.0 / (width as f64 - 1.0);
        let sy = 1.0 / (height as f64 - 1.0);
        for row in 0..height {
            for col in 0..width {
                let mut acc = 0.0;
                for j in 0..n {
                    for i in 0..n {
                        let ox = (i as f64 + 0.5) / n as f64 - 0.5;
                        let oy = (j as f64 + 0.5) / n as f64 - 0.5;
                        let (x, y) = ((col as f64 + ox) * sx, (row as f64 + oy) * sy);
                        let shade = self
                            .primitives
                            .iter()
                            .zip(&self.shades)
                            .rev()
                            .find(|(p, _)| p.contains(x, y))
                            .map_or(0.0, |(_, &s)| s);
                        acc += shade;
                    }
                }
                r.set(col, row, (acc / (n * n) as f64) as f32);
            }
        }
        r
    }

    /// Outline strokes with Gaussian coordinate jitter, one per primitive.
    pub fn sketch(&self, rng: &mut impl Rng) -> Vec<Polyline> {
        let jitter = Normal::new(0.0, STROKE_JITTER).expect("valid sigma");
        self.primitives
            .iter()
            .map(|p| {
                let phase = rng.random_range(0.0..TAU);
                p.outline(phase)
                    .into_iter()
                    .map(|[x, y]| {
                        [
                            (x + jitter.sample(rng)).clamp(0.0, 1.0),
                            (y + jitter.sample(rng)).clamp(0.0, 1.0),
                        ]
                    })
                    .collect()
            })
            .collect()
    }
}
