//! Closed-loop tracks, waypoint lookup, and the two lane cumulants.
//!
//! A track is a closed loop of center waypoints. Lane centeredness `alpha` is the
//! signed distance to the nearest waypoint normalized by the half lane width, and
//! road angle `beta` is the heading error against the path tangent at that waypoint.
//! Both are clipped: `alpha` to `[-1, 1]`, `beta` to `[-pi/2, pi/2]`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum spacing between consecutive waypoints of a built track.
pub const WAYPOINT_SPACING: f64 = 0.025;
/// Default half lane width in meters (76 cm lanes).
pub const DEFAULT_HALF_WIDTH: f64 = 0.38;
/// Half size of the sliding search window used on self-intersecting tracks.
pub const DEFAULT_WINDOW: usize = 10;

const TRACK_FILE_MAGIC: &str = "# lanegvf track v1";

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid track spec: {0}")]
    InvalidSpec(String),
    #[error("degenerate loop: {0}")]
    Degenerate(String),
    #[error("track file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_heading(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product; positive when `o` is to the left of `self`.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn heading(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    /// Reflection about the world x-axis.
    pub fn mirror(self) -> Vec2 {
        Vec2::new(self.x, -self.y)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into `(-pi, pi]`. Odd in `a` except at the `-pi` boundary.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a - 2.0 * PI * (a / (2.0 * PI)).round();
    if w <= -PI {
        w + 2.0 * PI
    } else if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Vehicle pose in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec2,
    /// Yaw in `(-pi, pi]`.
    pub yaw: f64,
    /// Speed in m/s, never negative.
    pub speed: f64,
}

impl Pose {
    pub fn new(position: Vec2, yaw: f64, speed: f64) -> Self {
        Self {
            position,
            yaw: wrap_angle(yaw),
            speed: speed.max(0.0),
        }
    }

    pub fn mirror(&self) -> Pose {
        // wrap_angle(-yaw) would turn -pi into pi and break exact negation elsewhere,
        // so negate directly and only fix the single boundary value.
        let yaw = if self.yaw == PI { PI } else { -self.yaw };
        Pose {
            position: self.position.mirror(),
            yaw,
            speed: self.speed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrackShape {
    Circle { radius: f64 },
    /// Sharp-cornered rectangle centered at the origin.
    Rectangle { width: f64, height: f64 },
    /// Rectangle whose corners are quarter circles.
    RectangleRounded { width: f64, height: f64, corner_radius: f64 },
    Oval { semi_major: f64, semi_minor: f64 },
    /// Closed Catmull-Rom spline through the control points.
    ComplexSpline { control: Vec<[f64; 2]> },
    /// Lemniscate of Gerono: `x = a sin t`, `y = (b/2) sin 2t`.
    Figure8 { half_length: f64, lobe_height: f64 },
}

impl TrackShape {
    pub fn name(&self) -> &'static str {
        match self {
            TrackShape::Circle { .. } => "circle",
            TrackShape::Rectangle { .. } => "rectangle",
            TrackShape::RectangleRounded { .. } => "rectangle_rounded",
            TrackShape::Oval { .. } => "oval",
            TrackShape::ComplexSpline { .. } => "complex_spline",
            TrackShape::Figure8 { .. } => "figure8",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamageSpec {
    /// Probability that a marker segment is deleted.
    pub deletion_fraction: f64,
    /// Spurious marker segments per meter of track.
    pub distractor_density: f64,
    pub rng_seed: u64,
}

impl DamageSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.deletion_fraction) {
            return Err(GeometryError::InvalidSpec(format!(
                "deletion_fraction {} outside [0, 1]",
                self.deletion_fraction
            )));
        }
        if !(self.distractor_density >= 0.0 && self.distractor_density.is_finite()) {
            return Err(GeometryError::InvalidSpec(format!(
                "distractor_density {} must be finite and >= 0",
                self.distractor_density
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub shape: TrackShape,
    pub half_width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damage: Option<DamageSpec>,
}

impl TrackSpec {
    pub fn new(shape: TrackShape) -> Self {
        Self {
            shape,
            half_width: DEFAULT_HALF_WIDTH,
            damage: None,
        }
    }

    pub fn with_damage(mut self, damage: DamageSpec) -> Self {
        self.damage = Some(damage);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.half_width;
        if !(h > 0.0 && h.is_finite()) {
            return Err(GeometryError::InvalidSpec(format!("half width {h} must be > 0")));
        }
        if let Some(d) = &self.damage {
            d.validate()?;
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(GeometryError::InvalidSpec(format!("{name} = {v} must be > 0")))
            }
        };
        let min_extent = |name: &str, v: f64| {
            if v >= 4.0 * h {
                Ok(())
            } else {
                Err(GeometryError::InvalidSpec(format!(
                    "{name} = {v} is smaller than two lane widths ({})",
                    4.0 * h
                )))
            }
        };
        match &self.shape {
            TrackShape::Circle { radius } => {
                positive("radius", *radius)?;
                min_extent("diameter", 2.0 * radius)
            }
            TrackShape::Rectangle { width, height } => {
                min_extent("width", *width)?;
                min_extent("height", *height)
            }
            TrackShape::RectangleRounded { width, height, corner_radius } => {
                min_extent("width", *width)?;
                min_extent("height", *height)?;
                positive("corner_radius", *corner_radius)?;
                if 2.0 * corner_radius > width.min(*height) {
                    return Err(GeometryError::InvalidSpec(
                        "corner radius exceeds half the shorter side".into(),
                    ));
                }
                Ok(())
            }
            TrackShape::Oval { semi_major, semi_minor } => {
                min_extent("major axis", 2.0 * semi_major)?;
                min_extent("minor axis", 2.0 * semi_minor)?;
                if semi_minor > semi_major {
                    return Err(GeometryError::InvalidSpec("semi_minor > semi_major".into()));
                }
                Ok(())
            }
            TrackShape::ComplexSpline { control } => {
                if control.len() < 4 {
                    return Err(GeometryError::InvalidSpec(
                        "complex spline needs at least 4 control points".into(),
                    ));
                }
                if control.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(GeometryError::InvalidSpec("non-finite control point".into()));
                }
                Ok(())
            }
            TrackShape::Figure8 { half_length, lobe_height } => {
                min_extent("figure8 length", 2.0 * half_length)?;
                min_extent("figure8 lobe height", *lobe_height)
            }
        }
    }
}

/// A closed loop of center waypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct WaypointPath {
    points: Vec<Vec2>,
    /// Cumulative arclength at each waypoint; `arclength[0] == 0`.
    arclength: Vec<f64>,
    /// Unit tangent at each waypoint (central difference).
    tangent: Vec<Vec2>,
    length: f64,
    crossings: Vec<Crossing>,
}

/// Index pair of two non-adjacent segments that intersect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crossing {
    pub first: usize,
    pub second: usize,
}

impl WaypointPath {
    /// Builds a path from already-dense loop points. Fails on fewer than three
    /// distinct points or zero length.
    pub fn from_points(points: Vec<Vec2>) -> Result<Self> {
        let n = points.len();
        if n < 3 {
            return Err(GeometryError::Degenerate(format!("{n} points, need at least 3")));
        }
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::Degenerate("non-finite waypoint".into()));
        }
        let mut arclength = Vec::with_capacity(n);
        let mut acc = 0.0;
        for i in 0..n {
            arclength.push(acc);
            acc += points[i].distance(points[(i + 1) % n]);
        }
        if !(acc > 0.0) {
            return Err(GeometryError::Degenerate("zero-length loop".into()));
        }
        let tangent = (0..n)
            .map(|i| {
                let d = points[(i + 1) % n] - points[(i + n - 1) % n];
                let l = d.norm();
                if l > 0.0 {
                    d * (1.0 / l)
                } else {
                    Vec2::new(1.0, 0.0)
                }
            })
            .collect();
        let mut path = Self {
            points,
            arclength,
            tangent,
            length: acc,
            crossings: Vec::new(),
        };
        path.crossings = find_crossings(&path.points);
        Ok(path)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Vec2 {
        self.points[i % self.points.len()]
    }

    pub fn arclength(&self, i: usize) -> f64 {
        self.arclength[i]
    }

    pub fn tangent_heading(&self, i: usize) -> f64 {
        self.tangent[i % self.tangent.len()].heading()
    }

    pub fn tangent(&self, i: usize) -> Vec2 {
        self.tangent[i % self.tangent.len()]
    }

    /// Total loop length including the closing segment.
    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn crossings(&self) -> &[Crossing] {
        &self.crossings
    }

    /// Groups crossings that lie within `2 * DEFAULT_WINDOW` waypoints of each other.
    pub fn crossing_regions(&self) -> Vec<Vec<Crossing>> {
        let n = self.len();
        let near = |a: usize, b: usize| {
            let d = a.abs_diff(b);
            d.min(n - d) <= 2 * DEFAULT_WINDOW
        };
        let mut regions: Vec<Vec<Crossing>> = Vec::new();
        for &c in &self.crossings {
            let found = regions.iter_mut().find(|r| {
                r.iter().any(|o| {
                    (near(o.first, c.first) && near(o.second, c.second))
                        || (near(o.first, c.second) && near(o.second, c.first))
                })
            });
            match found {
                Some(r) => r.push(c),
                None => regions.push(vec![c]),
            }
        }
        regions
    }

    /// Self-intersecting loops need the sliding-window nearest-waypoint lookup.
    pub fn needs_window(&self) -> bool {
        !self.crossings.is_empty()
    }

    /// Reverses travel direction while keeping the same geometry.
    pub fn reversed(&self) -> WaypointPath {
        let mut pts = self.points.clone();
        pts.reverse();
        WaypointPath::from_points(pts).expect("reversal of a valid path is valid")
    }

    /// Mirror image about the world x-axis, same waypoint order.
    pub fn mirrored(&self) -> WaypointPath {
        let pts = self.points.iter().map(|p| p.mirror()).collect();
        WaypointPath::from_points(pts).expect("mirror of a valid path is valid")
    }

    /// Rotates the waypoint order so that `start` becomes index 0.
    pub fn rotated(&self, start: usize) -> WaypointPath {
        let n = self.len();
        let pts = (0..n).map(|i| self.points[(start + i) % n]).collect();
        WaypointPath::from_points(pts).expect("rotation of a valid path is valid")
    }
}

fn segments_intersect(a0: Vec2, a1: Vec2, b0: Vec2, b1: Vec2) -> bool {
    let d1 = (a1 - a0).cross(b0 - a0);
    let d2 = (a1 - a0).cross(b1 - a0);
    let d3 = (b1 - b0).cross(a0 - b0);
    let d4 = (b1 - b0).cross(a1 - b0);
    (d1 * d2 <= 0.0) && (d3 * d4 <= 0.0) && !(d1 == 0.0 && d2 == 0.0)
}

/// Brute-force O(n^2) search for intersecting non-adjacent segments of a closed loop.
pub fn find_crossings(points: &[Vec2]) -> Vec<Crossing> {
    let n = points.len();
    let mut out = Vec::new();
    if n < 4 {
        return out;
    }
    // Bounding boxes let us skip most pairs cheaply.
    let bbox: Vec<(Vec2, Vec2)> = (0..n)
        .map(|i| {
            let a = points[i];
            let b = points[(i + 1) % n];
            (
                Vec2::new(a.x.min(b.x), a.y.min(b.y)),
                Vec2::new(a.x.max(b.x), a.y.max(b.y)),
            )
        })
        .collect();
    for i in 0..n {
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let (lo_i, hi_i) = bbox[i];
            let (lo_j, hi_j) = bbox[j];
            if lo_i.x > hi_j.x || lo_j.x > hi_i.x || lo_i.y > hi_j.y || lo_j.y > hi_i.y {
                continue;
            }
            if segments_intersect(points[i], points[(i + 1) % n], points[j], points[(j + 1) % n]) {
                out.push(Crossing { first: i, second: j });
            }
        }
    }
    out
}

/// Inserts evenly spaced points so no gap exceeds `max_gap`, after dropping
/// consecutive duplicates. With `closed`, the last-to-first segment is filled too.
pub fn interpolate_polyline(raw: &[Vec2], max_gap: f64, closed: bool) -> Vec<Vec2> {
    let mut pts: Vec<Vec2> = Vec::with_capacity(raw.len());
    for &p in raw {
        if pts.last().is_none_or(|&q: &Vec2| q.distance(p) > 1e-9) {
            pts.push(p);
        }
    }
    if closed {
        while pts.len() > 1 && pts[0].distance(*pts.last().unwrap()) <= 1e-9 {
            pts.pop();
        }
    }
    let n = pts.len();
    if n < 2 {
        return pts;
    }
    let segs = if closed { n } else { n - 1 };
    let mut out = Vec::with_capacity(n);
    for i in 0..segs {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        out.push(a);
        let gap = a.distance(b);
        let pieces = (gap / max_gap - 1e-9).ceil().max(1.0) as usize;
        for k in 1..pieces {
            let t = k as f64 / pieces as f64;
            out.push(a + (b - a) * t);
        }
    }
    if !closed {
        out.push(pts[n - 1]);
    }
    out
}

/// Fills gaps in a raw closed loop so that no spacing exceeds `max_gap`.
pub fn interpolate_waypoints(raw: &[Vec2], max_gap: f64) -> Result<WaypointPath> {
    if !(max_gap > 0.0) {
        return Err(GeometryError::InvalidSpec(format!("max_gap {max_gap} must be > 0")));
    }
    if raw.len() < 3 {
        return Err(GeometryError::Degenerate(format!(
            "{} raw points, need at least 3",
            raw.len()
        )));
    }
    let pts = interpolate_polyline(raw, max_gap, true);
    WaypointPath::from_points(pts)
}

/// Resamples a closed polyline at uniform arclength with spacing `<= max_gap`.
fn resample_closed(dense: &[Vec2], max_gap: f64) -> Result<Vec<Vec2>> {
    let n = dense.len();
    let mut cum = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    cum.push(0.0);
    for i in 0..n {
        acc += dense[i].distance(dense[(i + 1) % n]);
        cum.push(acc);
    }
    if !(acc > 0.0) {
        return Err(GeometryError::Degenerate("zero-length loop".into()));
    }
    let count = (acc / max_gap).ceil() as usize;
    let step = acc / count as f64;
    let mut out = Vec::with_capacity(count);
    let mut seg = 0;
    for k in 0..count {
        let s = k as f64 * step;
        while cum[seg + 1] < s {
            seg += 1;
        }
        let a = dense[seg];
        let b = dense[(seg + 1) % n];
        let l = cum[seg + 1] - cum[seg];
        let t = if l > 0.0 { (s - cum[seg]) / l } else { 0.0 };
        out.push(a + (b - a) * t);
    }
    Ok(out)
}

fn catmull_rom_closed(control: &[[f64; 2]], samples_per_segment: usize) -> Vec<Vec2> {
    let n = control.len();
    let c: Vec<Vec2> = control.iter().map(|p| Vec2::new(p[0], p[1])).collect();
    let mut out = Vec::with_capacity(n * samples_per_segment);
    for i in 0..n {
        let p0 = c[(i + n - 1) % n];
        let p1 = c[i];
        let p2 = c[(i + 1) % n];
        let p3 = c[(i + 2) % n];
        // Centripetal parameterization avoids cusps and self-loops.
        let knot = |a: Vec2, b: Vec2| a.distance(b).sqrt().max(1e-9);
        let t0 = 0.0;
        let t1 = t0 + knot(p0, p1);
        let t2 = t1 + knot(p1, p2);
        let t3 = t2 + knot(p2, p3);
        for k in 0..samples_per_segment {
            let t = t1 + (t2 - t1) * k as f64 / samples_per_segment as f64;
            let a1 = p0 * ((t1 - t) / (t1 - t0)) + p1 * ((t - t0) / (t1 - t0));
            let a2 = p1 * ((t2 - t) / (t2 - t1)) + p2 * ((t - t1) / (t2 - t1));
            let a3 = p2 * ((t3 - t) / (t3 - t2)) + p3 * ((t - t2) / (t3 - t2));
            let b1 = a1 * ((t2 - t) / (t2 - t0)) + a2 * ((t - t0) / (t2 - t0));
            let b2 = a2 * ((t3 - t) / (t3 - t1)) + a3 * ((t - t1) / (t3 - t1));
            out.push(b1 * ((t2 - t) / (t2 - t1)) + b2 * ((t - t1) / (t2 - t1)));
        }
    }
    out
}

/// Generates the closed center line for a track spec at `<= 2.5 cm` spacing.
/// Loops run counter-clockwise.
pub fn build_track(spec: &TrackSpec) -> Result<WaypointPath> {
    spec.validate()?;
    let dense_samples = 4096;
    let points = match &spec.shape {
        TrackShape::Circle { radius } => {
            let n = (2.0 * PI * radius / WAYPOINT_SPACING).ceil() as usize;
            (0..n)
                .map(|k| {
                    let t = 2.0 * PI * k as f64 / n as f64;
                    Vec2::new(radius * t.cos(), radius * t.sin())
                })
                .collect()
        }
        TrackShape::Rectangle { width, height } => {
            let (w, h) = (width / 2.0, height / 2.0);
            let corners = [
                Vec2::new(w, -h),
                Vec2::new(w, h),
                Vec2::new(-w, h),
                Vec2::new(-w, -h),
            ];
            resample_closed(&corners, WAYPOINT_SPACING)?
        }
        TrackShape::RectangleRounded { width, height, corner_radius } => {
            let (w, h, r) = (width / 2.0, height / 2.0, *corner_radius);
            let centers = [
                (Vec2::new(w - r, h - r), 0.0),
                (Vec2::new(-w + r, h - r), FRAC_PI_2),
                (Vec2::new(-w + r, -h + r), PI),
                (Vec2::new(w - r, -h + r), 1.5 * PI),
            ];
            let arc_samples = 256;
            let mut dense = Vec::new();
            for (c, start) in centers {
                for k in 0..=arc_samples {
                    let t = start + FRAC_PI_2 * k as f64 / arc_samples as f64;
                    dense.push(c + Vec2::from_heading(t) * r);
                }
            }
            resample_closed(&dense, WAYPOINT_SPACING)?
        }
        TrackShape::Oval { semi_major, semi_minor } => {
            let dense: Vec<Vec2> = (0..dense_samples)
                .map(|k| {
                    let t = 2.0 * PI * k as f64 / dense_samples as f64;
                    Vec2::new(semi_major * t.cos(), semi_minor * t.sin())
                })
                .collect();
            resample_closed(&dense, WAYPOINT_SPACING)?
        }
        TrackShape::ComplexSpline { control } => {
            let dense = catmull_rom_closed(control, 256);
            let mut pts = resample_closed(&dense, WAYPOINT_SPACING)?;
            if signed_area(&pts) < 0.0 {
                pts.reverse();
            }
            pts
        }
        TrackShape::Figure8 { half_length, lobe_height } => {
            let dense: Vec<Vec2> = (0..dense_samples)
                .map(|k| {
                    let t = 2.0 * PI * k as f64 / dense_samples as f64;
                    Vec2::new(half_length * t.sin(), 0.5 * lobe_height * (2.0 * t).sin())
                })
                .collect();
            resample_closed(&dense, WAYPOINT_SPACING)?
        }
    };
    WaypointPath::from_points(points)
}

/// Shoelace area; positive for counter-clockwise loops.
pub fn signed_area(points: &[Vec2]) -> f64 {
    let n = points.len();
    0.5 * (0..n).map(|i| points[i].cross(points[(i + 1) % n])).sum::<f64>()
}

/// Previous nearest-waypoint index for the sliding-window lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowState {
    pub prev_index: usize,
    pub half_width: usize,
}

impl WindowState {
    pub fn new(prev_index: usize) -> Self {
        Self {
            prev_index,
            half_width: DEFAULT_WINDOW,
        }
    }
}

/// Nearest waypoint to `p`. With a window, only indices within `half_width` of the
/// previous index (wrapping at the loop boundary) are considered. Ties go to the
/// lowest index.
pub fn nearest_waypoint(p: Vec2, path: &WaypointPath, window: Option<WindowState>) -> (usize, Vec2) {
    let n = path.len();
    let mut best = (f64::INFINITY, usize::MAX);
    let mut consider = |i: usize| {
        let d = (path.points[i] - p).norm_sq();
        if d < best.0 || (d == best.0 && i < best.1) {
            best = (d, i);
        }
    };
    match window {
        Some(w) if 2 * w.half_width + 1 < n => {
            let start = w.prev_index % n + n - w.half_width;
            for k in 0..=2 * w.half_width {
                consider((start + k) % n);
            }
        }
        _ => (0..n).for_each(&mut consider),
    }
    (best.1, path.points[best.1])
}

/// Lane cumulants at one pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneState {
    pub index: usize,
    /// Signed distance to the nearest waypoint over `H`, before clipping.
    pub raw_alpha: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LaneState {
    pub fn out_of_lane(&self) -> bool {
        self.raw_alpha.abs() > 1.0
    }
}

fn signed_offset(pose: &Pose, path: &WaypointPath, index: usize, nu: Vec2) -> f64 {
    let offset = pose.position - nu;
    let side = path.tangent[index].cross(offset);
    // Sign bit keeps the mirror image exactly negated, including at zero.
    let d = offset.norm();
    if side.is_sign_negative() {
        -d
    } else {
        d
    }
}

/// Computes `alpha` and `beta` together with a single nearest-waypoint search.
pub fn lane_state(pose: &Pose, path: &WaypointPath, half_width: f64, window: Option<WindowState>) -> LaneState {
    let (index, nu) = nearest_waypoint(pose.position, path, window);
    let raw_alpha = signed_offset(pose, path, index, nu) / half_width;
    LaneState {
        index,
        raw_alpha,
        alpha: raw_alpha.clamp(-1.0, 1.0),
        beta: heading_error(path.tangent[index], pose.yaw),
    }
}

fn heading_error(tangent: Vec2, yaw: f64) -> f64 {
    // atan2 of cross/dot is odd in the mirror, unlike a wrapped difference.
    let h = Vec2::from_heading(yaw);
    h.cross(tangent).atan2(h.dot(tangent)).clamp(-FRAC_PI_2, FRAC_PI_2)
}

/// Signed lane centeredness: positive when the vehicle is left of the path direction.
pub fn lane_centeredness(pose: &Pose, path: &WaypointPath, half_width: f64, window: Option<WindowState>) -> f64 {
    lane_state(pose, path, half_width, window).alpha
}

/// Angle between the road direction and the vehicle heading, clipped to `[-pi/2, pi/2]`.
pub fn road_angle(pose: &Pose, path: &WaypointPath, window: Option<WindowState>) -> f64 {
    let (index, _) = nearest_waypoint(pose.position, path, window);
    heading_error(path.tangent[index], pose.yaw)
}

/// Writes the plain-text track format: a magic line, `half_width H`, then one
/// `x y` pair per line in meters. The loop is implied.
pub fn write_track_file<W: Write>(mut w: W, path: &WaypointPath, half_width: f64) -> Result<()> {
    let mut s = String::with_capacity(path.len() * 40);
    writeln!(s, "{TRACK_FILE_MAGIC}").unwrap();
    writeln!(s, "half_width {half_width:?}").unwrap();
    for p in path.points() {
        writeln!(s, "{:?} {:?}", p.x, p.y).unwrap();
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_track_file<R: Read>(r: R) -> Result<(WaypointPath, f64)> {
    let reader = BufReader::new(r);
    let mut lines = reader.lines();
    let first = lines.next().transpose()?.unwrap_or_default();
    if first.trim() != TRACK_FILE_MAGIC {
        return Err(GeometryError::Format(format!("bad magic line {first:?}")));
    }
    let mut half_width = None;
    let mut pts = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let a = it.next().unwrap();
        let b = it
            .next()
            .ok_or_else(|| GeometryError::Format(format!("line {}: expected two fields", lineno + 2)))?;
        let parse = |v: &str| {
            v.parse::<f64>()
                .map_err(|e| GeometryError::Format(format!("line {}: {e}", lineno + 2)))
        };
        if a == "half_width" {
            half_width = Some(parse(b)?);
        } else {
            pts.push(Vec2::new(parse(a)?, parse(b)?));
        }
    }
    let h = half_width.ok_or_else(|| GeometryError::Format("missing half_width".into()))?;
    Ok((WaypointPath::from_points(pts)?, h))
}
