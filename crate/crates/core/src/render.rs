//! Grayscale rasterization of environment states.

use std::io::Cursor;

use image::{GrayImage, ImageFormat, Luma};
use rand::Rng;

use crate::env::{fingertip, EnvKind, EnvSpec, EnvState, REACHER_LINK, REACHER_TARGET};
use crate::Result;

pub const FRAME_SIZE: usize = 64;
pub const CROP_SIZE: usize = 56;
/// Number of distinct crop offsets along each axis.
pub const CROP_POSITIONS: usize = FRAME_SIZE - CROP_SIZE + 1;

const LINE_HALF_WIDTH: f64 = 1.0;
const TARGET_RADIUS: f64 = 2.0;
/// Pixels per world unit for the reacher (arm reach 0.2 -> 24 px).
const REACHER_SCALE: f64 = 120.0;
const TILT_BODY_LEN: f64 = 26.0;
const CURL_SEGMENT_LEN: f64 = 16.0;

/// Row-major `FRAME_SIZE` x `FRAME_SIZE` image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pixels: Vec<f64>,
}

impl Frame {
    pub fn blank() -> Self {
        Self { pixels: vec![0.0; FRAME_SIZE * FRAME_SIZE] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * FRAME_SIZE + col]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// 8-bit grayscale PNG encoding.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let img = GrayImage::from_fn(FRAME_SIZE as u32, FRAME_SIZE as u32, |x, y| {
            Luma([(self.get(y as usize, x as usize) * 255.0).round() as u8])
        });
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }
}

/// A line segment in pixel coordinates (x right, y down).
#[derive(Debug, Clone, Copy)]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

pub fn point_segment_distance(p: [f64; 2], seg: &Segment) -> f64 {
    let d = [seg.b[0] - seg.a[0], seg.b[1] - seg.a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - seg.a[0]) * d[0] + (p[1] - seg.a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    };
    let c = [seg.a[0] + t * d[0], seg.a[1] + t * d[1]];
    ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()
}

fn to_pixel(x: f64, y: f64, scale: f64) -> [f64; 2] {
    let c = FRAME_SIZE as f64 / 2.0;
    [c + scale * x, c - scale * y]
}

/// Link segments and (for the reacher) the target disk center.
pub fn scene(spec: &EnvSpec, s: &EnvState) -> (Vec<Segment>, Option<[f64; 2]>) {
    let q = s.angles();
    let c = FRAME_SIZE as f64 / 2.0;
    match spec.kind {
        EnvKind::PlanarReacher => {
            let elbow = [REACHER_LINK * q[0].cos(), REACHER_LINK * q[0].sin()];
            let tip = fingertip(q[0], q[1]);
            let origin = to_pixel(0.0, 0.0, REACHER_SCALE);
            let elbow = to_pixel(elbow[0], elbow[1], REACHER_SCALE);
            let tip = to_pixel(tip[0], tip[1], REACHER_SCALE);
            let target = to_pixel(REACHER_TARGET[0], REACHER_TARGET[1], REACHER_SCALE);
            (vec![Segment { a: origin, b: elbow }, Segment { a: elbow, b: tip }], Some(target))
        }
        EnvKind::TiltStand => {
            let tip = [c + TILT_BODY_LEN * q[0].cos(), c - TILT_BODY_LEN * q[0].sin()];
            (vec![Segment { a: [c, c], b: tip }], None)
        }
        EnvKind::ChainCurl => {
            let half = CURL_SEGMENT_LEN / 2.0;
            let left = [c - half, c];
            let right = [c + half, c];
            // Equal-sign rotor angles bend both ends the same way (horseshoe).
            let left_tip = [left[0] - CURL_SEGMENT_LEN * q[0].cos(), left[1] - CURL_SEGMENT_LEN * q[0].sin()];
            let right_tip = [right[0] + CURL_SEGMENT_LEN * q[1].cos(), right[1] - CURL_SEGMENT_LEN * q[1].sin()];
            (
                vec![
                    Segment { a: left, b: right },
                    Segment { a: left, b: left_tip },
                    Segment { a: right, b: right_tip },
                ],
                None,
            )
        }
    }
}

fn stamp<F: Fn([f64; 2]) -> bool>(frame: &mut Frame, bbox: ([f64; 2], [f64; 2]), inside: F) {
    let lo_c = bbox.0[0].floor().max(0.0) as usize;
    let lo_r = bbox.0[1].floor().max(0.0) as usize;
    let hi_c = (bbox.1[0].ceil().max(0.0) as usize).min(FRAME_SIZE - 1);
    let hi_r = (bbox.1[1].ceil().max(0.0) as usize).min(FRAME_SIZE - 1);
    for r in lo_r..=hi_r {
        for c in lo_c..=hi_c {
            if inside([c as f64 + 0.5, r as f64 + 0.5]) {
                frame.pixels[r * FRAME_SIZE + c] = 1.0;
            }
        }
    }
}

pub fn render(spec: &EnvSpec, s: &EnvState) -> Frame {
    let (segments, target) = scene(spec, s);
    let mut frame = Frame::blank();
    for seg in &segments {
        let pad = LINE_HALF_WIDTH;
        let lo = [seg.a[0].min(seg.b[0]) - pad, seg.a[1].min(seg.b[1]) - pad];
        let hi = [seg.a[0].max(seg.b[0]) + pad, seg.a[1].max(seg.b[1]) + pad];
        stamp(&mut frame, (lo, hi), |p| point_segment_distance(p, seg) <= LINE_HALF_WIDTH);
    }
    if let Some(t) = target {
        let r = TARGET_RADIUS;
        stamp(&mut frame, ([t[0] - r, t[1] - r], [t[0] + r, t[1] + r]), |p| {
            (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2) <= r * r
        });
    }
    frame
}

/// Crops the `CROP_SIZE` window at (`row_off`, `col_off`) and rescales it back
/// to `FRAME_SIZE` by nearest-neighbor lookup.
pub fn crop_at(f: &Frame, row_off: usize, col_off: usize) -> Frame {
    assert!(row_off < CROP_POSITIONS && col_off < CROP_POSITIONS);
    let mut out = Frame::blank();
    for r in 0..FRAME_SIZE {
        let src_r = row_off + r * CROP_SIZE / FRAME_SIZE;
        for c in 0..FRAME_SIZE {
            let src_c = col_off + c * CROP_SIZE / FRAME_SIZE;
            out.pixels[r * FRAME_SIZE + c] = f.get(src_r, src_c);
        }
    }
    out
}

pub fn random_crop<R: Rng + ?Sized>(f: &Frame, rng: &mut R) -> Frame {
    let row_off = rng.random_range(0..CROP_POSITIONS);
    let col_off = rng.random_range(0..CROP_POSITIONS);
    crop_at(f, row_off, col_off)
}
