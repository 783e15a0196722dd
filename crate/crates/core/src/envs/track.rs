//! Reference paths made of straights and constant-curvature arcs.

use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Segment {
    Straight { length: f64 },
    /// Positive `angle` turns left (counter-clockwise).
    Arc { radius: f64, angle: f64 },
}

impl Segment {
    pub fn length(&self) -> f64 {
        match *self {
            Segment::Straight { length } => length,
            Segment::Arc { radius, angle } => radius * angle.abs(),
        }
    }

    pub fn curvature(&self) -> f64 {
        match *self {
            Segment::Straight { .. } => 0.0,
            Segment::Arc { radius, angle } => angle.signum() / radius,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathPoint {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub curvature: f64,
}

/// Projection of a position onto the path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Arc length of the nearest path point.
    pub s: f64,
    /// Signed perpendicular distance, positive to the left of the path direction.
    pub lateral: f64,
    pub point: PathPoint,
}

#[derive(Clone, Debug)]
struct Placed {
    seg: Segment,
    s0: f64,
    x0: f64,
    y0: f64,
    h0: f64,
}

impl Placed {
    fn point_at(&self, ds: f64) -> PathPoint {
        match self.seg {
            Segment::Straight { .. } => PathPoint {
                x: self.x0 + ds * self.h0.cos(),
                y: self.y0 + ds * self.h0.sin(),
                heading: self.h0,
                curvature: 0.0,
            },
            Segment::Arc { radius, angle } => {
                let sgn = angle.signum();
                let (cx, cy) = self.center(radius, sgn);
                let turned = sgn * ds / radius;
                let h = self.h0 + turned;
                // radial vector from center to point is the heading rotated by -sgn*90deg
                PathPoint {
                    x: cx + radius * sgn * h.sin(),
                    y: cy - radius * sgn * h.cos(),
                    heading: h,
                    curvature: sgn / radius,
                }
            }
        }
    }

    fn center(&self, radius: f64, sgn: f64) -> (f64, f64) {
        (
            self.x0 - sgn * radius * self.h0.sin(),
            self.y0 + sgn * radius * self.h0.cos(),
        )
    }

    /// Nearest point on this segment: (local arc length, squared distance).
    fn nearest(&self, px: f64, py: f64) -> (f64, f64) {
        let len = self.seg.length();
        let ds = match self.seg {
            Segment::Straight { .. } => {
                let t = (px - self.x0) * self.h0.cos() + (py - self.y0) * self.h0.sin();
                t.clamp(0.0, len)
            }
            Segment::Arc { radius, angle } => {
                let sgn = angle.signum();
                let (cx, cy) = self.center(radius, sgn);
                let start = (self.y0 - cy).atan2(self.x0 - cx);
                let here = (py - cy).atan2(px - cx);
                // angle swept from the start radial in the direction of travel, in [0, 2pi)
                let swept = (sgn * (here - start)).rem_euclid(TAU);
                let total = angle.abs();
                if swept <= total {
                    swept * radius
                } else {
                    // outside the angular range: whichever endpoint is closer
                    let to_end = swept - total;
                    let to_start = TAU - swept;
                    if to_end < to_start {
                        len
                    } else {
                        0.0
                    }
                }
            }
        };
        let q = self.point_at(ds);
        let d2 = (px - q.x).powi(2) + (py - q.y).powi(2);
        (ds, d2)
    }
}

#[derive(Clone, Debug)]
pub struct Track {
    id: String,
    closed: bool,
    placed: Vec<Placed>,
    length: f64,
}

impl Track {
    pub fn new(id: impl Into<String>, segments: &[Segment], closed: bool) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::config("track needs at least one segment"));
        }
        let mut placed = Vec::with_capacity(segments.len());
        let (mut x, mut y, mut h, mut s) = (0.0, 0.0, 0.0, 0.0);
        for &seg in segments {
            if !(seg.length() > 0.0) {
                return Err(Error::config("track segments must have positive length"));
            }
            let p = Placed {
                seg,
                s0: s,
                x0: x,
                y0: y,
                h0: h,
            };
            let end = p.point_at(seg.length());
            x = end.x;
            y = end.y;
            h = end.heading;
            s += seg.length();
            placed.push(p);
        }
        if closed {
            let gap = (x * x + y * y).sqrt();
            let turn = (h.rem_euclid(TAU) + 1e-9).rem_euclid(TAU) - 1e-9;
            if gap > 1e-6 || turn.abs() > 1e-6 {
                return Err(Error::config(format!(
                    "closed track does not close: gap {gap:.3e} m, heading {turn:.3e} rad"
                )));
            }
        }
        Ok(Track {
            id: id.into(),
            closed,
            placed,
            length: s,
        })
    }

    /// Closed 60 m loop: rounded rectangle (corner radius 2 m) with an S-bend chicane
    /// (radius 2.5 m) on one long side.
    pub fn loop60() -> Self {
        let q = PI / 2.0;
        let bump = PI / 4.0;
        let r_corner = 2.0;
        let r_bump = 2.5;
        let arc_total = 4.0 * r_corner * q + 4.0 * r_bump * bump;
        let bump_extent = 4.0 * r_bump * bump.sin();
        let short = 6.0;
        // straights: two short sides + long side + long side split by the chicane
        let long = (60.0 - arc_total - 2.0 * short + bump_extent) / 2.0;
        let half = (long - bump_extent) / 2.0;
        let segs = [
            Segment::Straight { length: half },
            Segment::Arc { radius: r_bump, angle: bump },
            Segment::Arc { radius: r_bump, angle: -bump },
            Segment::Arc { radius: r_bump, angle: -bump },
            Segment::Arc { radius: r_bump, angle: bump },
            Segment::Straight { length: half },
            Segment::Arc { radius: r_corner, angle: q },
            Segment::Straight { length: short },
            Segment::Arc { radius: r_corner, angle: q },
            Segment::Straight { length: long },
            Segment::Arc { radius: r_corner, angle: q },
            Segment::Straight { length: short },
            Segment::Arc { radius: r_corner, angle: q },
        ];
        Track::new("loop60", &segs, true).expect("loop60 closes")
    }

    /// Open straight reference, for symmetry checks.
    pub fn straight(length: f64) -> Self {
        Track::new("straight", &[Segment::Straight { length }], false).expect("straight track")
    }

    pub fn by_id(id: &str) -> Result<Self> {
        match id {
            "loop60" => Ok(Track::loop60()),
            "straight" => Ok(Track::straight(200.0)),
            other => Err(Error::config(format!("unknown track id `{other}`"))),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn wrap_s(&self, s: f64) -> f64 {
        if self.closed {
            s.rem_euclid(self.length)
        } else {
            s.clamp(0.0, self.length)
        }
    }

    /// Path point at arc length `s` (wrapped on closed tracks, clamped on open ones;
    /// beyond the end of an open track the last straight is extended).
    pub fn point_at(&self, s: f64) -> PathPoint {
        if !self.closed && s > self.length {
            let end = self.point_at(self.length);
            let extra = s - self.length;
            return PathPoint {
                x: end.x + extra * end.heading.cos(),
                y: end.y + extra * end.heading.sin(),
                heading: end.heading,
                curvature: 0.0,
            };
        }
        let s = self.wrap_s(s);
        let idx = self
            .placed
            .partition_point(|p| p.s0 <= s)
            .saturating_sub(1);
        let p = &self.placed[idx];
        p.point_at((s - p.s0).min(p.seg.length()))
    }

    /// Nearest path point by per-segment analytic projection.
    pub fn project(&self, x: f64, y: f64) -> Projection {
        let mut best = (f64::INFINITY, 0.0, 0usize);
        for (i, p) in self.placed.iter().enumerate() {
            let (ds, d2) = p.nearest(x, y);
            if d2 < best.0 {
                best = (d2, ds, i);
            }
        }
        let (_, ds, i) = best;
        let p = &self.placed[i];
        let point = p.point_at(ds);
        let lateral = point.heading.cos() * (y - point.y) - point.heading.sin() * (x - point.x);
        Projection {
            s: self.wrap_s(p.s0 + ds),
            lateral,
            point,
        }
    }
}

/// Wrap an angle in radians to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loop60_has_expected_length_and_closes() {
        let t = Track::loop60();
        assert!((t.length() - 60.0).abs() < 1e-9);
        let a = t.point_at(0.0);
        let b = t.point_at(60.0 - 1e-12);
        assert!((a.x - b.x).abs() < 1e-6 && (a.y - b.y).abs() < 1e-6);
    }

    #[test]
    fn projection_recovers_offset_points() {
        let t = Track::loop60();
        for k in 0..600 {
            let s = k as f64 * 0.1 + 0.05;
            let p = t.point_at(s);
            let off = 0.4 * ((k % 7) as f64 - 3.0) / 3.0;
            let (x, y) = (p.x - off * p.heading.sin(), p.y + off * p.heading.cos());
            let pr = t.project(x, y);
            assert!((pr.lateral - off).abs() < 1e-9, "s={s} off={off} got {}", pr.lateral);
            assert!((pr.s - s).abs() < 1e-9 || (pr.s - s).abs() > 59.0);
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
    }
}
