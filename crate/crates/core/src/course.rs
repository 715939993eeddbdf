//! Buzz-wire game world: wire geometry, loop handle, synthetic environment
//! points, contact detection and trial progress.

use crate::geometry::{frame_with_normal, octagon_points, Pose, Vec3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

pub const DESCRIPTOR_VERSION: u32 = 1;

/// Ids of the courses compiled into the crate.
pub const BUILTIN_COURSES: &[&str] = &["training", "transfer", "straight"];

/// Ring sampling resolution used by contact detection (m).
pub const CONTACT_RESOLUTION: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum CourseError {
    #[error("course descriptor: {0}")]
    Parse(String),
    #[error("course descriptor field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("unknown course `{0}` (not a built-in id or readable file)")]
    Unknown(String),
    #[error("reading course file: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> CourseError {
    CourseError::InvalidField { field, reason: reason.into() }
}

/// On-disk course layout (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CourseDescriptor {
    pub version: u32,
    pub name: String,
    pub points: Vec<[f64; 3]>,
    pub wire_radius: f64,
    pub start_s: f64,
    pub end_s: f64,
}

/// Wire centerline polyline with a radius and the start/end arc positions of
/// the game.
#[derive(Clone, Debug)]
pub struct WireCourse {
    name: String,
    centerline: Vec<Vec3>,
    /// cumulative arc length at each centerline vertex
    arc: Vec<f64>,
    wire_radius: f64,
    start_s: f64,
    end_s: f64,
}

impl WireCourse {
    pub fn new(
        name: impl Into<String>,
        centerline: Vec<Vec3>,
        wire_radius: f64,
        start_s: f64,
        end_s: f64,
    ) -> Result<Self, CourseError> {
        if centerline.len() < 2 {
            return Err(invalid("points", "at least two points required"));
        }
        if centerline.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(invalid("points", "non-finite coordinate"));
        }
        let mut arc = Vec::with_capacity(centerline.len());
        arc.push(0.0);
        for (i, w) in centerline.windows(2).enumerate() {
            let len = (w[1] - w[0]).norm();
            if len <= 0.0 {
                return Err(invalid("points", format!("points {i} and {} coincide", i + 1)));
            }
            arc.push(arc[i] + len);
        }
        if !(wire_radius > 0.0) {
            return Err(invalid("wire_radius", "must be > 0"));
        }
        let total = *arc.last().unwrap();
        if !(start_s >= 0.0) {
            return Err(invalid("start_s", "must be >= 0"));
        }
        if !(end_s > start_s) {
            return Err(invalid("end_s", "must be > start_s"));
        }
        if end_s > total + 1e-12 {
            return Err(invalid("end_s", format!("exceeds total arc length {total}")));
        }
        Ok(WireCourse { name: name.into(), centerline, arc, wire_radius, start_s, end_s })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn centerline(&self) -> &[Vec3] {
        &self.centerline
    }

    pub fn wire_radius(&self) -> f64 {
        self.wire_radius
    }

    pub fn start_s(&self) -> f64 {
        self.start_s
    }

    pub fn end_s(&self) -> f64 {
        self.end_s
    }

    pub fn total_length(&self) -> f64 {
        *self.arc.last().unwrap()
    }

    pub fn descriptor(&self) -> CourseDescriptor {
        CourseDescriptor {
            version: DESCRIPTOR_VERSION,
            name: self.name.clone(),
            points: self.centerline.iter().map(|p| [p.x, p.y, p.z]).collect(),
            wire_radius: self.wire_radius,
            start_s: self.start_s,
            end_s: self.end_s,
        }
    }

    fn segment_index(&self, s: f64) -> usize {
        match self.arc.binary_search_by(|a| a.total_cmp(&s)) {
            Ok(i) => i.min(self.centerline.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.centerline.len() - 2),
        }
    }

    /// Centerline point at arc length `s`, clamped to the polyline.
    pub fn point_at(&self, s: f64) -> Vec3 {
        let s = s.clamp(0.0, self.total_length());
        let i = self.segment_index(s);
        let (a, b) = (self.centerline[i], self.centerline[i + 1]);
        let len = self.arc[i + 1] - self.arc[i];
        a + (b - a) * ((s - self.arc[i]) / len)
    }

    /// Unit tangent at `s`, smoothed by a central difference over ±5 mm.
    pub fn tangent_at(&self, s: f64) -> Vec3 {
        const H: f64 = 0.005;
        let total = self.total_length();
        let lo = (s - H).clamp(0.0, total);
        let hi = (s + H).clamp(0.0, total);
        let d = self.point_at(hi) - self.point_at(lo);
        if d.norm() < 1e-12 {
            let i = self.segment_index(s);
            return (self.centerline[i + 1] - self.centerline[i]).normalize();
        }
        d.normalize()
    }

    /// Ring pose centred on the wire at `s` with the ring plane normal to the
    /// local tangent.
    pub fn pose_at(&self, s: f64) -> Pose {
        Pose::new(self.point_at(s), frame_with_normal(&self.tangent_at(s), &Vec3::z()))
    }

    /// Nearest centerline point to `p`: `(arc length, point, distance)`.
    pub fn nearest(&self, p: &Vec3) -> (f64, Vec3, f64) {
        let mut best = (0.0, self.centerline[0], f64::INFINITY);
        for i in 0..self.centerline.len() - 1 {
            let (a, b) = (self.centerline[i], self.centerline[i + 1]);
            let (t, q) = closest_on_segment(p, &a, &b);
            let d = (p - q).norm();
            if d < best.2 {
                best = (self.arc[i] + t * (self.arc[i + 1] - self.arc[i]), q, d);
            }
        }
        best
    }

    /// Centerline sampled at uniform arc steps no longer than `spacing`,
    /// endpoints included.
    pub fn sample(&self, spacing: f64) -> Vec<(f64, Vec3)> {
        let total = self.total_length();
        let n = (total / spacing).ceil().max(1.0) as usize;
        let step = total / n as f64;
        let mut out = Vec::with_capacity(n + 1);
        let mut seg = 0;
        for j in 0..=n {
            let s = if j == n { total } else { j as f64 * step };
            while seg + 2 < self.arc.len() && self.arc[seg + 1] < s {
                seg += 1;
            }
            let (a, b) = (self.centerline[seg], self.centerline[seg + 1]);
            let len = self.arc[seg + 1] - self.arc[seg];
            out.push((s, a + (b - a) * ((s - self.arc[seg]) / len)));
        }
        out
    }

    fn transformed(&self, f: impl Fn(&Vec3) -> Vec3) -> WireCourse {
        WireCourse {
            name: self.name.clone(),
            centerline: self.centerline.iter().map(f).collect(),
            arc: self.arc.clone(),
            wire_radius: self.wire_radius,
            start_s: self.start_s,
            end_s: self.end_s,
        }
    }

    /// Applies a rigid transform to the whole course.
    pub fn rigid_transform(&self, iso: &nalgebra::Isometry3<f64>) -> WireCourse {
        self.transformed(|p| iso.transform_point(&nalgebra::Point3::from(*p)).coords)
    }
}

/// Parameter in `[0, 1]` and point of the closest point on segment `ab`.
pub fn closest_on_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> (f64, Vec3) {
    let ab = b - a;
    let denom = ab.norm_squared();
    let t = if denom > 0.0 { ((p - a).dot(&ab) / denom).clamp(0.0, 1.0) } else { 0.0 };
    (t, a + ab * t)
}

/// Parses a TOML course descriptor.
pub fn load_course(descriptor: &str) -> Result<WireCourse, CourseError> {
    let d: CourseDescriptor =
        toml::from_str(descriptor).map_err(|e| CourseError::Parse(e.to_string()))?;
    course_from_descriptor(d)
}

pub fn course_from_descriptor(d: CourseDescriptor) -> Result<WireCourse, CourseError> {
    if d.version != DESCRIPTOR_VERSION {
        return Err(invalid("version", format!("unsupported version {}", d.version)));
    }
    if d.name.trim().is_empty() {
        return Err(invalid("name", "must not be empty"));
    }
    let points = d.points.iter().map(|p| Vec3::from(*p)).collect();
    WireCourse::new(d.name, points, d.wire_radius, d.start_s, d.end_s)
}

/// Resolves a built-in id, or failing that, a descriptor file path.
pub fn resolve_course(id_or_path: &str) -> Result<WireCourse, CourseError> {
    if let Some(c) = builtin_course(id_or_path) {
        return Ok(c);
    }
    let path = Path::new(id_or_path);
    if !path.exists() {
        return Err(CourseError::Unknown(id_or_path.to_string()));
    }
    load_course(&std::fs::read_to_string(path)?)
}

pub fn builtin_course(id: &str) -> Option<WireCourse> {
    let (keys, wire_radius): (&[[f64; 3]], f64) = match id {
        "training" => (
            &[
                [0.0, 0.0, 0.0],
                [0.10, 0.0, 0.0],
                [0.16, 0.0, 0.05],
                [0.24, 0.03, 0.05],
                [0.30, 0.03, 0.0],
                [0.36, -0.02, -0.03],
                [0.46, -0.02, -0.03],
                [0.54, 0.0, 0.0],
            ],
            0.002,
        ),
        "transfer" => (
            &[
                [0.0, 0.0, 0.0],
                [0.08, 0.0, 0.0],
                [0.14, -0.04, 0.0],
                [0.20, -0.04, 0.06],
                [0.30, 0.03, 0.06],
                [0.36, 0.03, 0.0],
                [0.44, 0.0, -0.02],
                [0.52, 0.0, 0.0],
            ],
            0.003,
        ),
        "straight" => (&[[0.0, 0.0, 0.0], [0.40, 0.0, 0.0]], 0.002),
        _ => return None,
    };
    let keys: Vec<Vec3> = keys.iter().map(|p| Vec3::from(*p)).collect();
    let points = resample(&chaikin(&keys, 5), 0.002);
    let total: f64 = points.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    Some(WireCourse::new(id, points, wire_radius, 0.02, total - 0.02).expect("built-in course"))
}

/// Corner cutting that keeps both endpoints.
fn chaikin(points: &[Vec3], iterations: usize) -> Vec<Vec3> {
    let mut pts = points.to_vec();
    for _ in 0..iterations {
        if pts.len() < 3 {
            break;
        }
        let mut next = Vec::with_capacity(pts.len() * 2);
        next.push(pts[0]);
        for w in pts.windows(2) {
            next.push(w[0] * 0.75 + w[1] * 0.25);
            next.push(w[0] * 0.25 + w[1] * 0.75);
        }
        next.push(*pts.last().unwrap());
        pts = next;
    }
    pts
}

fn resample(points: &[Vec3], spacing: f64) -> Vec<Vec3> {
    let tmp = WireCourse::new("tmp", points.to_vec(), 1.0, 0.0, 1e-9).expect("resample input");
    tmp.sample(spacing).into_iter().map(|(_, p)| p).collect()
}

/// Geometry of the ring end-effector, independent of where it is.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandleGeometry {
    pub ring_radius: f64,
    pub tube_radius: f64,
    /// `p_com` in the handle's local frame
    pub com_offset: [f64; 3],
}

impl Default for HandleGeometry {
    fn default() -> Self {
        HandleGeometry { ring_radius: 0.02, tube_radius: 0.004, com_offset: [0.0; 3] }
    }
}

impl HandleGeometry {
    /// The wire must be able to pass through the ring.
    pub fn validate_for(&self, course: &WireCourse) -> Result<(), String> {
        if !(self.tube_radius > 0.0) {
            return Err("tube_radius must be > 0".into());
        }
        if !(self.ring_radius > course.wire_radius() + self.tube_radius) {
            return Err(format!(
                "ring_radius {} must exceed wire_radius + tube_radius = {}",
                self.ring_radius,
                course.wire_radius() + self.tube_radius
            ));
        }
        Ok(())
    }

    pub fn at(&self, pose: Pose) -> LoopHandle {
        LoopHandle { pose, geometry: *self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopHandle {
    pub pose: Pose,
    pub geometry: HandleGeometry,
}

impl LoopHandle {
    pub fn ring_radius(&self) -> f64 {
        self.geometry.ring_radius
    }

    pub fn tube_radius(&self) -> f64 {
        self.geometry.tube_radius
    }

    pub fn center(&self) -> Vec3 {
        self.pose.position
    }

    pub fn normal(&self) -> Vec3 {
        self.pose.orientation * Vec3::z()
    }

    pub fn com(&self) -> Vec3 {
        self.pose.transform_point(&Vec3::from(self.geometry.com_offset))
    }

    pub fn control_points(&self) -> [Vec3; 8] {
        octagon_points(&self.pose, self.geometry.ring_radius)
    }

    /// Distance from `p` to the ring circle (the tube's core curve).
    pub fn distance_to_ring(&self, p: &Vec3) -> f64 {
        let q = p - self.center();
        let n = self.normal();
        let h = q.dot(&n);
        let radial = (q - n * h).norm();
        ((radial - self.ring_radius()).powi(2) + h * h).sqrt()
    }

    /// Point on the ring circle at local angle `a`.
    pub fn ring_point(&self, a: f64) -> Vec3 {
        let r = self.ring_radius();
        self.pose.transform_point(&Vec3::new(r * a.cos(), r * a.sin(), 0.0))
    }

    fn ring_sample_count(&self, resolution: f64) -> usize {
        ((2.0 * PI * self.ring_radius() / resolution).ceil() as usize).max(8)
    }

    /// Ring circle sampled with chord length at most `resolution`.
    pub fn ring_samples(&self, resolution: f64) -> Vec<Vec3> {
        let n = self.ring_sample_count(resolution);
        (0..n).map(|k| self.ring_point(2.0 * PI * k as f64 / n as f64)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointClass {
    Attractive,
    Repulsive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentPoint {
    pub position: Vec3,
    pub class: PointClass,
    pub arc_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeighborhoodSet {
    pub attractive: Vec<EnvironmentPoint>,
    pub repulsive: Vec<EnvironmentPoint>,
}

impl NeighborhoodSet {
    pub fn len(&self) -> usize {
        self.attractive.len() + self.repulsive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &EnvironmentPoint> {
        self.attractive.iter().chain(self.repulsive.iter())
    }
}

/// Synthetic stand-in for the depth-camera point cloud: centerline samples
/// within `range` of any control point, classified by nearest handle feature.
///
/// A point nearer the ring tube than the ring centre is repulsive; otherwise
/// it is attractive and pulls the loop towards being centred on the wire.
pub fn sample_environment(
    course: &WireCourse,
    handle: &LoopHandle,
    spacing: f64,
    range: f64,
) -> NeighborhoodSet {
    debug_assert!(spacing > 0.0 && range > 0.0);
    let controls = handle.control_points();
    let center = handle.center();
    let reach = handle.ring_radius() + range;
    let mut out = NeighborhoodSet::default();
    for (s, p) in course.sample(spacing) {
        // every control point sits on the ring, so nothing beyond `reach`
        // from the centre can be in range
        if (p - center).norm() > reach {
            continue;
        }
        if !controls.iter().any(|c| (p - c).norm() <= range) {
            continue;
        }
        let to_ring = handle.distance_to_ring(&p);
        let to_center = (p - center).norm();
        if to_ring < to_center {
            out.repulsive.push(EnvironmentPoint { position: p, class: PointClass::Repulsive, arc_s: s });
        } else {
            out.attractive.push(EnvironmentPoint { position: p, class: PointClass::Attractive, arc_s: s });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContactReport {
    pub in_contact: bool,
    pub penetration: f64,
    pub proxy_force: f64,
    pub fatal: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactParams {
    /// proxy stiffness (N/m)
    pub k_wire: f64,
    /// proxy force above which a contact is fatal (N)
    pub fatal_force: f64,
    /// rising edges closer than this to the last counted one merge (s)
    pub debounce: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        ContactParams { k_wire: 1000.0, fatal_force: 1.0, debounce: 0.1 }
    }
}

/// Minimum distance from the ring circle to the wire centerline, or `None`
/// when no wire segment can come within `cutoff` of the ring.
pub fn ring_to_wire_distance(course: &WireCourse, handle: &LoopHandle, cutoff: f64) -> Option<f64> {
    let center = handle.center();
    let r = handle.ring_radius();
    let line = course.centerline();
    let near: Vec<(Vec3, Vec3)> = line
        .windows(2)
        .filter(|w| {
            let (_, q) = closest_on_segment(&center, &w[0], &w[1]);
            (q - center).norm() - r <= cutoff
        })
        .map(|w| (w[0], w[1]))
        .collect();
    if near.is_empty() {
        return None;
    }
    let dist = |angle: f64| {
        let p = handle.ring_point(angle);
        near.iter().map(|(a, b)| (p - closest_on_segment(&p, a, b).1).norm()).fold(f64::INFINITY, f64::min)
    };
    // coarse scan, then golden-section refinement around the best sample
    let n = handle.ring_sample_count(CONTACT_RESOLUTION);
    let step = 2.0 * PI / n as f64;
    let (k_best, coarse) = (0..n).map(|k| (k, dist(k as f64 * step))).fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
    let (mut lo, mut hi) = ((k_best as f64 - 1.0) * step, (k_best as f64 + 1.0) * step);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut x1, mut x2) = (hi - g * (hi - lo), lo + g * (hi - lo));
    let (mut f1, mut f2) = (dist(x1), dist(x2));
    for _ in 0..40 {
        if f1 < f2 {
            hi = x2;
            (x2, f2) = (x1, f1);
            x1 = hi - g * (hi - lo);
            f1 = dist(x1);
        } else {
            lo = x1;
            (x1, f1) = (x2, f2);
            x2 = lo + g * (hi - lo);
            f2 = dist(x2);
        }
    }
    Some(coarse.min(f1).min(f2))
}

/// Capsule/torus proxy contact between the wire and the loop.
pub fn check_contact(course: &WireCourse, handle: &LoopHandle, k_wire: f64, fatal_force: f64) -> ContactReport {
    let touch = course.wire_radius() + handle.tube_radius();
    let penetration = match ring_to_wire_distance(course, handle, touch) {
        Some(d) => (touch - d).max(0.0),
        None => 0.0,
    };
    let proxy_force = k_wire * penetration;
    let in_contact = penetration > 0.0;
    ContactReport { in_contact, penetration, proxy_force, fatal: in_contact && proxy_force > fatal_force }
}

/// Fraction of the game completed, from the arc position nearest the ring
/// centre.
pub fn progress(course: &WireCourse, handle: &LoopHandle) -> f64 {
    let (s, _, _) = course.nearest(&handle.center());
    ((s - course.start_s()) / (course.end_s() - course.start_s())).clamp(0.0, 1.0)
}

/// Counts buzz events in a time-ordered `(t, in_contact)` stream: rising
/// edges, with an edge closer than `debounce` to the previously counted edge
/// merged into it.
pub fn buzz_events<I>(stream: I, debounce: f64) -> usize
where
    I: IntoIterator<Item = (f64, bool)>,
{
    let mut count = 0;
    let mut prev = false;
    let mut last_edge: Option<f64> = None;
    for (t, contact) in stream {
        if contact && !prev {
            let merged = last_edge.is_some_and(|t0| t - t0 < debounce);
            if !merged {
                count += 1;
                last_edge = Some(t);
            }
        }
        prev = contact;
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Isometry3, Translation3, UnitQuaternion};
    use proptest::prelude::*;

    fn straight(len: f64) -> WireCourse {
        WireCourse::new("s", vec![Vec3::zeros(), Vec3::new(len, 0.0, 0.0)], 0.002, 0.0, len).unwrap()
    }

    fn ring(course: &WireCourse, s: f64, offset: Vec3, radius: f64) -> LoopHandle {
        let mut pose = course.pose_at(s);
        pose.position += offset;
        HandleGeometry { ring_radius: radius, tube_radius: 0.004, com_offset: [0.0; 3] }.at(pose)
    }

    /// Brute-force ring/segment distance on a dense parameter grid of both
    /// curves.
    fn brute_distance(course: &WireCourse, h: &LoopHandle) -> f64 {
        let wire = course.sample(1e-4);
        let mut best = f64::INFINITY;
        for k in 0..4000 {
            let a = 2.0 * PI * k as f64 / 4000.0;
            let p = h.pose.transform_point(&Vec3::new(h.ring_radius() * a.cos(), h.ring_radius() * a.sin(), 0.0));
            for (_, q) in &wire {
                best = best.min((p - q).norm());
            }
        }
        best
    }

    #[test]
    fn far_handle_sees_nothing() {
        let c = straight(0.4);
        let h = ring(&c, 0.2, Vec3::new(0.0, 0.0, 1.0), 0.05);
        let n = sample_environment(&c, &h, 0.002, 0.05);
        assert!(n.attractive.is_empty() && n.repulsive.is_empty());
    }

    #[test]
    fn concentric_wire_is_attractive_only() {
        let c = straight(0.4);
        let h = ring(&c, 0.2, Vec3::zeros(), 0.05);
        let n = sample_environment(&c, &h, 0.002, 0.06);
        assert!(!n.attractive.is_empty());
        assert!(n.repulsive.is_empty());
    }

    #[test]
    fn near_tube_yields_repulsive_points_on_near_side() {
        let c = straight(0.4);
        // wire 5 mm from the tube core: ring centre shifted 45 mm off axis
        let h = ring(&c, 0.2, Vec3::new(0.0, 0.0, 0.045), 0.05);
        let n = sample_environment(&c, &h, 0.002, 0.06);
        assert!(!n.repulsive.is_empty());
        // oracle: every repulsive point is nearer some dense ring sample than
        // the centre, and lies on the side the ring moved away from
        let dense = h.ring_samples(1e-4);
        for p in &n.repulsive {
            let ring_d = dense.iter().map(|q| (p.position - q).norm()).fold(f64::INFINITY, f64::min);
            assert!(ring_d < (p.position - h.center()).norm());
            assert!(p.position.z < h.center().z);
        }
    }

    #[test]
    fn concentric_has_no_contact() {
        let c = straight(0.4);
        let h = ring(&c, 0.2, Vec3::zeros(), 0.05);
        let r = check_contact(&c, &h, 1000.0, 1.0);
        assert!(!r.in_contact);
        assert_eq!(r.penetration, 0.0);
        assert!(!r.fatal);
    }

    #[test]
    fn radial_offset_penetrates_one_millimetre() {
        let c = straight(0.4);
        let offset = (0.05 - 0.002 - 0.004) + 0.001;
        for dir in [Vec3::z(), Vec3::y(), Vec3::new(0.0, 1.0, 1.0).normalize(), Vec3::new(0.0, 0.3, -1.0).normalize()] {
            let h = ring(&c, 0.2, dir * offset, 0.05);
            let r = check_contact(&c, &h, 1000.0, 1.0);
            let oracle = 0.006 - brute_distance(&c, &h);
            assert_abs_diff_eq!(oracle, 0.001, epsilon = 1e-4);
            assert_abs_diff_eq!(r.penetration, 0.001, epsilon = 1e-4);
            assert!(r.in_contact);
        }
    }

    #[test]
    fn proxy_force_and_fatal_rule() {
        let c = straight(0.4);
        // penetration 0.002
        let h = ring(&c, 0.2, Vec3::z() * (0.044 + 0.002), 0.05);
        let r = check_contact(&c, &h, 1000.0, 1.0);
        assert_abs_diff_eq!(r.penetration, 0.002, epsilon = 1e-5);
        assert_abs_diff_eq!(r.proxy_force, 2.0, epsilon = 1e-2);
        assert_eq!(r.proxy_force, 1000.0 * r.penetration);
        assert!(r.fatal);
    }

    #[test]
    fn progress_boundaries_and_midpoint() {
        let c = WireCourse::new("s", vec![Vec3::zeros(), Vec3::new(0.4, 0.0, 0.0)], 0.002, 0.1, 0.3).unwrap();
        assert_eq!(progress(&c, &ring(&c, 0.05, Vec3::zeros(), 0.02)), 0.0);
        assert_eq!(progress(&c, &ring(&c, 0.1, Vec3::zeros(), 0.02)), 0.0);
        assert_eq!(progress(&c, &ring(&c, 0.35, Vec3::zeros(), 0.02)), 1.0);
        let mid = progress(&c, &ring(&c, 0.2, Vec3::new(0.0, 0.01, 0.0), 0.02));
        assert_abs_diff_eq!(mid, 0.5, epsilon = 1e-3);
    }

    #[test]
    fn progress_midpoint_on_bent_course_matches_dense_search() {
        let c = builtin_course("training").unwrap();
        let s_mid = 0.5 * (c.start_s() + c.end_s());
        let h = ring(&c, s_mid, Vec3::zeros(), 0.02);
        // oracle: nearest of 0.1 mm dense samples
        let (s_best, _) = c
            .sample(1e-4)
            .into_iter()
            .map(|(s, p)| (s, (p - h.center()).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let oracle = (s_best - c.start_s()) / (c.end_s() - c.start_s());
        assert_abs_diff_eq!(oracle, 0.5, epsilon = 1e-3);
        assert_abs_diff_eq!(progress(&c, &h), 0.5, epsilon = 1e-3);
    }

    #[test]
    fn buzz_counting() {
        let dt = 0.01;
        let stream = |pattern: &[bool]| -> Vec<(f64, bool)> {
            pattern.iter().enumerate().map(|(i, &b)| (i as f64 * dt, b)).collect()
        };
        assert_eq!(buzz_events(stream(&[false; 50]), 0.1), 0);
        let mut one = vec![false; 10];
        one.extend([true; 20]);
        one.extend([false; 10]);
        assert_eq!(buzz_events(stream(&one), 0.1), 1);
        // 20 ms contact, 50 ms gap, contact again
        let mut two = vec![false; 5];
        two.extend([true; 2]);
        two.extend([false; 5]);
        two.extend([true; 3]);
        two.extend([false; 5]);
        assert_eq!(buzz_events(stream(&two), 0.1), 1);
        assert_eq!(buzz_events(stream(&two), 0.05), 2);
    }

    #[test]
    fn descriptor_round_trip_and_errors() {
        let text = r#"
            version = 1
            name = "two-point"
            points = [[0.0, 0.0, 0.0], [0.3, 0.4, 0.0]]
            wire_radius = 0.002
            start_s = 0.0
            end_s = 0.5
        "#;
        let c = load_course(text).unwrap();
        assert_abs_diff_eq!(c.total_length(), 0.5, epsilon = 1e-15);

        let bad = text.replace("wire_radius = 0.002", "wire_radius = 0.0");
        let err = load_course(&bad).unwrap_err().to_string();
        assert!(err.contains("wire_radius"), "{err}");

        let missing = text.replace("start_s = 0.0", "");
        let err = load_course(&missing).unwrap_err().to_string();
        assert!(err.contains("start_s"), "{err}");

        let reparsed = load_course(&toml::to_string(&c.descriptor()).unwrap()).unwrap();
        assert_eq!(reparsed.centerline(), c.centerline());
    }

    /// Counts bends as runs of tangent-direction change above 15° per 2 cm.
    fn bends(c: &WireCourse) -> usize {
        let mut count = 0;
        let mut in_bend = false;
        let mut s = 0.0;
        while s + 0.04 <= c.total_length() {
            let turn = c.tangent_at(s).angle(&c.tangent_at(s + 0.04));
            let bending = turn > 15f64.to_radians();
            if bending && !in_bend {
                count += 1;
            }
            in_bend = bending;
            s += 0.005;
        }
        count
    }

    #[test]
    fn builtin_courses() {
        let t = builtin_course("training").unwrap();
        assert!(t.centerline().len() > 3);
        assert!(bends(&t) >= 3, "training bends: {}", bends(&t));
        let x = builtin_course("transfer").unwrap();
        assert!(bends(&x) >= 3);
        assert_ne!(t.centerline().len(), 0);
        assert!(builtin_course("nope").is_none());
        for id in BUILTIN_COURSES {
            let c = resolve_course(id).unwrap();
            assert!(HandleGeometry::default().validate_for(&c).is_ok());
        }
    }

    proptest! {
        #[test]
        fn progress_monotone_along_wire(a in 0.0..1.0f64, b in 0.0..1.0f64) {
            let c = builtin_course("training").unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let s = |f: f64| f * c.total_length();
            let p_lo = progress(&c, &ring(&c, s(lo), Vec3::zeros(), 0.02));
            let p_hi = progress(&c, &ring(&c, s(hi), Vec3::zeros(), 0.02));
            prop_assert!(p_lo <= p_hi + 1e-12);
        }

        #[test]
        fn contact_invariant_under_rigid_motion(
            off in prop::array::uniform3(-0.03..0.03f64),
            t in prop::array::uniform3(-1.0..1.0f64),
            axis in prop::array::uniform3(-1.0..1.0f64),
            angle in -3.0..3.0f64,
        ) {
            let c = builtin_course("training").unwrap();
            let h = ring(&c, 0.25, Vec3::from(off), 0.02);
            let axis = Vec3::from(axis);
            prop_assume!(axis.norm() > 0.1);
            let iso = Isometry3::from_parts(
                Translation3::from(Vec3::from(t)),
                UnitQuaternion::from_scaled_axis(axis.normalize() * angle),
            );
            let c2 = c.rigid_transform(&iso);
            let pose2 = Pose::new(
                iso.transform_point(&nalgebra::Point3::from(h.pose.position)).coords,
                iso.rotation * h.pose.orientation,
            );
            let h2 = h.geometry.at(pose2);
            let r1 = check_contact(&c, &h, 1000.0, 1.0);
            let r2 = check_contact(&c2, &h2, 1000.0, 1.0);
            prop_assert!((r1.penetration - r2.penetration).abs() < 1e-4);
        }

        #[test]
        fn classification_is_exhaustive(off in prop::array::uniform3(-0.02..0.02f64), s in 0.05..0.5f64) {
            let c = builtin_course("training").unwrap();
            let h = ring(&c, s, Vec3::from(off), 0.02);
            let n = sample_environment(&c, &h, 0.0025, 0.03);
            let in_range: Vec<f64> = c
                .sample(0.0025)
                .into_iter()
                .filter(|(_, p)| h.control_points().iter().any(|q| (p - q).norm() <= 0.03))
                .map(|(s, _)| s)
                .collect();
            prop_assert_eq!(n.len(), in_range.len());
            for p in &n.attractive {
                prop_assert!(!n.repulsive.iter().any(|q| q.arc_s == p.arc_s));
            }
        }
    }
}
