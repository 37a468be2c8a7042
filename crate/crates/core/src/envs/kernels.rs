use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, EnvKind};

const ACTION_SLACK: f64 = 1e-12;

/// Wrap an angle to `(−π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut w = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

fn check_bound(a: f64, bound: f64) -> Result<(), EnvError> {
    if !a.is_finite() || a.abs() > bound + ACTION_SLACK {
        return Err(EnvError::ActionOutOfRange { action: a, bound });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumState {
    /// Angle from upright.
    pub theta: f64,
    pub theta_dot: f64,
}

impl PendulumState {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        PendulumState {
            theta: rng.gen_range(-PI..PI),
            theta_dot: rng.gen_range(-1.0..1.0),
        }
    }
}

/// One torque-controlled pendulum step. The cost is evaluated on the
/// pre-step state.
pub fn step_pendulum(s: &PendulumState, a: f64) -> Result<(PendulumState, f64), EnvError> {
    const G: f64 = 10.0;
    const M: f64 = 1.0;
    const L: f64 = 1.0;
    const DT: f64 = 0.05;
    check_bound(a, 2.0)?;
    let th = wrap_angle(s.theta);
    let cost = th * th + 0.1 * s.theta_dot * s.theta_dot + 0.001 * a * a;
    let acc = -3.0 * G / (2.0 * L) * (s.theta + PI).sin() + 3.0 / (M * L * L) * a;
    let theta_dot = (s.theta_dot + acc * DT).clamp(-8.0, 8.0);
    let theta = wrap_angle(s.theta + theta_dot * DT);
    Ok((PendulumState { theta, theta_dot }, -cost))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartpoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartpoleState {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut d = || rng.gen_range(-0.05..0.05);
        CartpoleState {
            x: d(),
            x_dot: d(),
            theta: d(),
            theta_dot: d(),
        }
    }
}

/// Euler step of the classic cart-pole with force `±10 N`.
/// Returns `(state', r_o, done)`; the reward is 1 while the pole survives.
pub fn step_cartpole(s: &CartpoleState, a: u8) -> (CartpoleState, f64, bool) {
    const GRAVITY: f64 = 9.8;
    const MASS_CART: f64 = 1.0;
    const MASS_POLE: f64 = 0.1;
    const TOTAL: f64 = MASS_CART + MASS_POLE;
    const HALF_LEN: f64 = 0.5;
    const POLE_ML: f64 = MASS_POLE * HALF_LEN;
    const TAU: f64 = 0.02;
    let force = if a == 1 { 10.0 } else { -10.0 };
    let (sin, cos) = s.theta.sin_cos();
    let temp = (force + POLE_ML * s.theta_dot * s.theta_dot * sin) / TOTAL;
    let theta_acc =
        (GRAVITY * sin - cos * temp) / (HALF_LEN * (4.0 / 3.0 - MASS_POLE * cos * cos / TOTAL));
    let x_acc = temp - POLE_ML * theta_acc * cos / TOTAL;
    let next = CartpoleState {
        x: s.x + TAU * s.x_dot,
        x_dot: s.x_dot + TAU * x_acc,
        theta: s.theta + TAU * s.theta_dot,
        theta_dot: s.theta_dot + TAU * theta_acc,
    };
    let done = next.x.abs() > 2.4 || next.theta.abs() > 12.0_f64.to_radians();
    (next, if done { 0.0 } else { 1.0 }, done)
}

/// Number of distinct glyph stencils.
pub const GLYPH_COUNT: usize = 8;
const STENCIL_H: usize = 8;
const STENCIL_W: usize = 6;

#[rustfmt::skip]
const STENCILS: [[&str; STENCIL_H]; GLYPH_COUNT] = [
    [".####.", "#....#", "#...##", "#..#.#", "#.#..#", "##...#", "#....#", ".####."],
    ["..##..", ".###..", "..##..", "..##..", "..##..", "..##..", "..##..", ".####."],
    [".####.", "#....#", ".....#", "....#.", "...#..", "..#...", ".#....", "######"],
    ["#####.", ".....#", ".....#", ".####.", ".....#", ".....#", ".....#", "#####."],
    ["....#.", "...##.", "..#.#.", ".#..#.", "#...#.", "######", "....#.", "....#."],
    ["######", "#.....", "#.....", "#####.", ".....#", ".....#", "#....#", ".####."],
    [".####.", "#.....", "#.....", "#####.", "#....#", "#....#", "#....#", ".####."],
    ["######", ".....#", "....#.", "...#..", "..#...", "..#...", "..#...", "..#..."],
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphState {
    pub rotation: f64,
    pub glyph: usize,
}

impl GlyphState {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        GlyphState {
            rotation: rng.gen_range(-PI / 2.0..PI / 2.0),
            glyph: rng.gen_range(0..GLYPH_COUNT),
        }
    }
}

/// Rotate the glyph by `a`; the reward is minus its angle from upright.
pub fn step_glyph(s: &GlyphState, a: f64) -> Result<(GlyphState, f64), EnvError> {
    check_bound(a, PI / 4.0)?;
    let rotation = wrap_angle(s.rotation + a);
    Ok((
        GlyphState {
            rotation,
            glyph: s.glyph,
        },
        -rotation.abs(),
    ))
}

/// Latent state of any of the three kernels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvState {
    Pendulum(PendulumState),
    Cartpole(CartpoleState),
    Glyph(GlyphState),
}

impl EnvState {
    pub fn random<R: Rng + ?Sized>(kind: EnvKind, rng: &mut R) -> Self {
        match kind {
            EnvKind::Pendulum => EnvState::Pendulum(PendulumState::random(rng)),
            EnvKind::Cartpole => EnvState::Cartpole(CartpoleState::random(rng)),
            EnvKind::Glyph => EnvState::Glyph(GlyphState::random(rng)),
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            EnvState::Pendulum(_) => EnvKind::Pendulum,
            EnvState::Cartpole(_) => EnvKind::Cartpole,
            EnvState::Glyph(_) => EnvKind::Glyph,
        }
    }

    /// Advance one step, returning `r_o`. A failed cart-pole is reset
    /// from `rng` so sequences continue transparently.
    pub fn step<R: Rng + ?Sized>(&mut self, a: f64, rng: &mut R) -> Result<f64, EnvError> {
        match self {
            EnvState::Pendulum(s) => {
                let (n, r) = step_pendulum(s, a)?;
                *s = n;
                Ok(r)
            }
            EnvState::Cartpole(s) => {
                let bit = match a {
                    x if x == 0.0 => 0,
                    x if x == 1.0 => 1,
                    _ => return Err(EnvError::ActionOutOfRange { action: a, bound: 1.0 }),
                };
                let (n, r, done) = step_cartpole(s, bit);
                *s = if done { CartpoleState::random(rng) } else { n };
                Ok(r)
            }
            EnvState::Glyph(s) => {
                let (n, r) = step_glyph(s, a)?;
                *s = n;
                Ok(r)
            }
        }
    }
}

/// Distance from `p` to the segment `a`–`b`.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Anti-aliased line: full intensity within `half_width`, fading over one pixel.
fn draw_segment(frame: &mut [f32], h: usize, w: usize, a: (f64, f64), b: (f64, f64), half_width: f64) {
    for r in 0..h {
        for c in 0..w {
            let d = segment_distance((c as f64, r as f64), a, b);
            let v = (1.0 + half_width - d).clamp(0.0, 1.0) as f32;
            let px = &mut frame[r * w + c];
            *px = px.max(v);
        }
    }
}

fn render_glyph(frame: &mut [f32], h: usize, w: usize, s: &GlyphState) {
    let cell = (h.min(w) / 12).max(1);
    let (sh, sw) = (STENCIL_H * cell, STENCIL_W * cell);
    let stencil = &STENCILS[s.glyph % GLYPH_COUNT];
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (scy, scx) = ((sh as f64 - 1.0) / 2.0, (sw as f64 - 1.0) / 2.0);
    let (sin, cos) = s.rotation.sin_cos();
    for r in 0..h {
        for c in 0..w {
            let (dx, dy) = (c as f64 - cx, r as f64 - cy);
            // inverse rotation back into stencil coordinates
            let sx = cos * dx + sin * dy + scx;
            let sy = -sin * dx + cos * dy + scy;
            let (ix, iy) = (sx.round(), sy.round());
            if ix < 0.0 || iy < 0.0 || ix >= sw as f64 || iy >= sh as f64 {
                continue;
            }
            let (ix, iy) = (ix as usize / cell, iy as usize / cell);
            if stencil[iy].as_bytes()[ix] == b'#' {
                frame[r * w + c] = 1.0;
            }
        }
    }
}

/// Grayscale rendering of `state` in `[0, 1]`, row-major `h × w`.
pub fn render(state: &EnvState, h: usize, w: usize) -> Vec<f32> {
    let mut frame = vec![0.0f32; h * w];
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let scale = h.min(w) as f64;
    let half_width = (scale / 32.0).max(0.5);
    match state {
        EnvState::Pendulum(s) => {
            let len = 0.35 * scale;
            let tip = (cx + len * s.theta.sin(), cy - len * s.theta.cos());
            draw_segment(&mut frame, h, w, (cx, cy), tip, half_width);
        }
        EnvState::Cartpole(s) => {
            let cart_y = 0.75 * (h as f64 - 1.0);
            let cart_x = cx + (s.x / 2.4).clamp(-1.0, 1.0) * (w as f64 / 2.0 - 2.0);
            let half_cart = (w as f64 / 10.0).max(1.0);
            draw_segment(
                &mut frame,
                h,
                w,
                (cart_x - half_cart, cart_y),
                (cart_x + half_cart, cart_y),
                half_width,
            );
            let len = 0.45 * scale;
            let tip = (cart_x + len * s.theta.sin(), cart_y - len * s.theta.cos());
            draw_segment(&mut frame, h, w, (cart_x, cart_y), tip, half_width * 0.5);
        }
        EnvState::Glyph(s) => render_glyph(&mut frame, h, w, s),
    }
    frame
}
