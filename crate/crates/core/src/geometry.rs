//! Room, node placement and Fresnel-zone geometry.
//!
//! Zone membership is the exact ellipsoid test: a point `p` lies inside the
//! n-th Fresnel zone of a link when `|p - tx| + |p - rx| <= D + n*lambda/2`.
//! [`fresnel_radius`] is the usual cross-section approximation and is kept
//! separate from the membership test.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::{Add, Mul, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Wavelength at 2.4 GHz, in meters.
pub const DEFAULT_WAVELENGTH_M: f64 = 0.125;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("fresnel radius domain error: {0}")]
    Domain(String),
    #[error("duplicate node id {0:#06x}")]
    DuplicateNode(u16),
    #[error("need at least two nodes, got {0}")]
    TooFewNodes(usize),
    #[error("region `{0}` is empty")]
    EmptyRegion(String),
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("invalid room: {0}")]
    InvalidRoom(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        (*self - *other).norm()
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn lerp(&self, other: &Point3, t: f64) -> Point3 {
        *self + (*other - *self) * t
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Shape of an activity region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum RegionShape {
    /// Axis-aligned box. Occupants in a box are treated as sedentary.
    Box { min: Point3, max: Point3 },
    /// Closed walking loop through `waypoints` (the last point connects back
    /// to the first) with a tube of `radius` meters around it.
    Corridor { waypoints: Vec<Point3>, radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityRegion {
    pub label: String,
    #[serde(flatten)]
    pub shape: RegionShape,
}

impl ActivityRegion {
    pub fn boxed(label: &str, min: Point3, max: Point3) -> Self {
        Self { label: label.to_string(), shape: RegionShape::Box { min, max } }
    }

    pub fn corridor(label: &str, waypoints: Vec<Point3>, radius: f64) -> Self {
        Self { label: label.to_string(), shape: RegionShape::Corridor { waypoints, radius } }
    }

    pub fn is_corridor(&self) -> bool {
        matches!(self.shape, RegionShape::Corridor { .. })
    }

    fn check_nonempty(&self) -> Result<(), GeometryError> {
        let empty = match &self.shape {
            RegionShape::Box { min, max } => !(max.x >= min.x && max.y >= min.y && max.z >= min.z),
            RegionShape::Corridor { waypoints, radius } => waypoints.is_empty() || *radius < 0.0,
        };
        if empty {
            Err(GeometryError::EmptyRegion(self.label.clone()))
        } else {
            Ok(())
        }
    }

    /// Length of the closed loop for corridors, zero for boxes.
    pub fn path_length(&self) -> f64 {
        match &self.shape {
            RegionShape::Box { .. } => 0.0,
            RegionShape::Corridor { waypoints, .. } => loop_edges(waypoints).map(|(a, b)| a.distance(&b)).sum(),
        }
    }

    /// Point at arc length `s` along the corridor loop (wraps around).
    /// Boxes return their center.
    pub fn point_on_path(&self, s: f64) -> Point3 {
        match &self.shape {
            RegionShape::Box { min, max } => min.lerp(max, 0.5),
            RegionShape::Corridor { waypoints, .. } => {
                let total = self.path_length();
                if total <= 0.0 {
                    return waypoints[0];
                }
                let mut rem = s.rem_euclid(total);
                for (a, b) in loop_edges(waypoints) {
                    let len = a.distance(&b);
                    if rem <= len && len > 0.0 {
                        return a.lerp(&b, rem / len);
                    }
                    rem -= len;
                }
                waypoints[0]
            }
        }
    }

    /// Draws one point from the region: uniform in a box; for corridors a
    /// uniform arc position jittered uniformly within the tube radius.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point3 {
        match &self.shape {
            RegionShape::Box { min, max } => Point3::new(
                uniform_in(rng, min.x, max.x),
                uniform_in(rng, min.y, max.y),
                uniform_in(rng, min.z, max.z),
            ),
            RegionShape::Corridor { radius, .. } => {
                let s = rng.random::<f64>() * self.path_length();
                self.point_on_path(s) + ball_offset(rng, *radius)
            }
        }
    }

    pub fn translated(&self, by: Point3) -> Self {
        let shape = match &self.shape {
            RegionShape::Box { min, max } => RegionShape::Box { min: *min + by, max: *max + by },
            RegionShape::Corridor { waypoints, radius } => RegionShape::Corridor {
                waypoints: waypoints.iter().map(|p| *p + by).collect(),
                radius: *radius,
            },
        };
        Self { label: self.label.clone(), shape }
    }
}

fn loop_edges(points: &[Point3]) -> impl Iterator<Item = (Point3, Point3)> + '_ {
    let n = points.len();
    let edges = if n < 2 { 0 } else { n };
    (0..edges).map(move |i| (points[i], points[(i + 1) % n]))
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Uniform point in a ball of radius `r` (rejection sampling).
pub(crate) fn ball_offset<R: Rng + ?Sized>(rng: &mut R, r: f64) -> Point3 {
    if r <= 0.0 {
        return Point3::new(0.0, 0.0, 0.0);
    }
    loop {
        let p = Point3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        );
        if p.norm() <= 1.0 {
            return p * r;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomModel {
    pub width: f64,
    pub depth: f64,
    pub height: f64,
    #[serde(default)]
    pub regions: Vec<ActivityRegion>,
}

impl RoomModel {
    pub fn new(width: f64, depth: f64, height: f64) -> Result<Self, GeometryError> {
        let room = Self { width, depth, height, regions: Vec::new() };
        room.validate()?;
        Ok(room)
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0.0..=self.width).contains(&p.x) && (0.0..=self.depth).contains(&p.y) && (0.0..=self.height).contains(&p.z)
    }

    pub fn region(&self, label: &str) -> Option<&ActivityRegion> {
        self.regions.iter().find(|r| r.label == label)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        for (name, v) in [("width", self.width), ("depth", self.depth), ("height", self.height)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(GeometryError::InvalidRoom(format!("{name} must be positive, got {v}")));
            }
        }
        for region in &self.regions {
            region.check_nonempty()?;
            let touches = match &region.shape {
                RegionShape::Box { min, max } => {
                    min.x <= self.width && max.x >= 0.0 && min.y <= self.depth && max.y >= 0.0 && min.z <= self.height && max.z >= 0.0
                }
                RegionShape::Corridor { waypoints, .. } => waypoints.iter().any(|p| self.contains(p)),
            };
            if !touches {
                return Err(GeometryError::InvalidRoom(format!("region `{}` lies outside the room", region.label)));
            }
        }
        Ok(())
    }
}

impl Default for RoomModel {
    fn default() -> Self {
        Self { width: 5.0, depth: 4.0, height: 2.5, regions: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Entrance,
    MidRoom,
    Ceiling,
    Corner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePlacement {
    pub node_id: u16,
    pub position: Point3,
    pub role: NodeRole,
}

/// Directed link identity. Ordering is lexicographic on `(tx, rx)`, which is
/// the tie-break used throughout the crate. Serialized as `"TTTT-RRRR"` hex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkId {
    pub tx: u16,
    pub rx: u16,
}

impl LinkId {
    pub const fn new(tx: u16, rx: u16) -> Self {
        Self { tx, rx }
    }

    pub fn key(&self) -> u64 {
        ((self.tx as u64) << 16) | self.rx as u64
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04X}-{:04X}", self.tx, self.rx)
    }
}

impl std::str::FromStr for LinkId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.split_once('-').ok_or_else(|| format!("bad link id `{s}`"))?;
        let tx = u16::from_str_radix(a, 16).map_err(|e| format!("bad link id `{s}`: {e}"))?;
        let rx = u16::from_str_radix(b, 16).map_err(|e| format!("bad link id `{s}`: {e}"))?;
        Ok(Self { tx, rx })
    }
}

impl Serialize for LinkId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LinkId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkGeometry {
    pub tx: u16,
    pub rx: u16,
    pub tx_pos: Point3,
    pub rx_pos: Point3,
    pub wavelength: f64,
}

impl LinkGeometry {
    pub fn id(&self) -> LinkId {
        LinkId::new(self.tx, self.rx)
    }

    /// Direct path length `D`.
    pub fn length(&self) -> f64 {
        self.tx_pos.distance(&self.rx_pos)
    }

    pub fn midpoint(&self) -> Point3 {
        self.tx_pos.lerp(&self.rx_pos, 0.5)
    }

    /// Excess path length of the reflection through `p`.
    pub fn path_excess(&self, p: &Point3) -> f64 {
        p.distance(&self.tx_pos) + p.distance(&self.rx_pos) - self.length()
    }

    pub fn translated(&self, by: Point3) -> Self {
        Self { tx_pos: self.tx_pos + by, rx_pos: self.rx_pos + by, ..self.clone() }
    }
}

/// Probability that a point drawn from an activity region falls inside a
/// link's Fresnel zone; the proxy for how much occupancy information the link
/// can carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoBoundEstimate {
    pub link: LinkId,
    pub p_intersect: f64,
    pub sample_count: usize,
}

/// Radius of the n-th Fresnel zone at a point `d1` from one endpoint and `d2`
/// from the other: `sqrt(n * lambda * d1 * d2 / (d1 + d2))`.
pub fn fresnel_radius(n: u32, wavelength: f64, d1: f64, d2: f64) -> Result<f64, GeometryError> {
    if n < 1 {
        return Err(GeometryError::Domain("zone index must be >= 1".into()));
    }
    if !(wavelength.is_finite() && wavelength > 0.0) {
        return Err(GeometryError::Domain(format!("wavelength must be positive, got {wavelength}")));
    }
    if !(d1.is_finite() && d2.is_finite() && d1 >= 0.0 && d2 >= 0.0) {
        return Err(GeometryError::Domain(format!("distances must be non-negative, got {d1}, {d2}")));
    }
    if d1 + d2 <= 0.0 {
        return Err(GeometryError::Domain("d1 + d2 must be positive".into()));
    }
    Ok((n as f64 * wavelength * d1 * d2 / (d1 + d2)).sqrt())
}

/// Exact membership in the n-th Fresnel ellipsoid.
pub fn in_fresnel_zone(p: &Point3, link: &LinkGeometry, n: u32) -> bool {
    link.path_excess(p) <= n as f64 * link.wavelength / 2.0
}

/// All ordered node pairs of the complete directed graph, sorted by `(tx, rx)`.
pub fn enumerate_links(nodes: &[NodePlacement], wavelength: f64) -> Result<Vec<LinkGeometry>, GeometryError> {
    if nodes.len() < 2 {
        return Err(GeometryError::TooFewNodes(nodes.len()));
    }
    let mut seen = BTreeSet::new();
    for n in nodes {
        if !seen.insert(n.node_id) {
            return Err(GeometryError::DuplicateNode(n.node_id));
        }
    }
    let mut sorted: Vec<&NodePlacement> = nodes.iter().collect();
    sorted.sort_by_key(|n| n.node_id);
    let mut links = Vec::with_capacity(nodes.len() * (nodes.len() - 1));
    for tx in &sorted {
        for rx in &sorted {
            if tx.node_id != rx.node_id {
                links.push(LinkGeometry {
                    tx: tx.node_id,
                    rx: rx.node_id,
                    tx_pos: tx.position,
                    rx_pos: rx.position,
                    wavelength,
                });
            }
        }
    }
    Ok(links)
}

/// Monte-Carlo estimate of `P(occupant in zone n)` for occupants drawn from
/// `region`. Sample `i` uses a stream keyed by `(seed, link, i)`.
pub fn intersection_probability(
    link: &LinkGeometry,
    region: &ActivityRegion,
    n: u32,
    samples: usize,
    seed: u64,
) -> Result<InfoBoundEstimate, GeometryError> {
    if samples == 0 {
        return Err(GeometryError::NoSamples);
    }
    region.check_nonempty()?;
    let key = link.id().key();
    let hits = (0..samples)
        .filter(|&i| {
            let mut rng = rng::keyed(seed, &[key, i as u64]);
            in_fresnel_zone(&region.sample(&mut rng), link, n)
        })
        .count();
    Ok(InfoBoundEstimate { link: link.id(), p_intersect: hits as f64 / samples as f64, sample_count: samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(tx: Point3, rx: Point3) -> LinkGeometry {
        LinkGeometry { tx: 1, rx: 2, tx_pos: tx, rx_pos: rx, wavelength: DEFAULT_WAVELENGTH_M }
    }

    fn four_meter_link() -> LinkGeometry {
        link(Point3::new(0.5, 2.0, 1.0), Point3::new(4.5, 2.0, 1.0))
    }

    #[test]
    fn radius_closed_form() {
        let r = fresnel_radius(1, 0.125, 2.0, 2.0).unwrap();
        assert!((r - 0.353_553_390_593_273_8).abs() < 1e-15);
        assert_eq!(fresnel_radius(1, 0.125, 0.0, 4.0).unwrap(), 0.0);
        assert_eq!(fresnel_radius(1, 0.125, 1.0, 3.0).unwrap(), fresnel_radius(1, 0.125, 3.0, 1.0).unwrap());
    }

    #[test]
    fn radius_domain_errors() {
        assert!(fresnel_radius(0, 0.125, 1.0, 1.0).is_err());
        assert!(fresnel_radius(1, 0.0, 1.0, 1.0).is_err());
        assert!(fresnel_radius(1, 0.125, -1.0, 1.0).is_err());
        assert!(fresnel_radius(1, 0.125, 0.0, 0.0).is_err());
    }

    #[test]
    fn radius_monotone_in_n_and_lambda() {
        let mut prev = 0.0;
        for n in 1..10 {
            let r = fresnel_radius(n, 0.125, 1.3, 2.1).unwrap();
            assert!(r > prev);
            prev = r;
        }
        assert!(fresnel_radius(1, 0.2, 1.3, 2.1).unwrap() > fresnel_radius(1, 0.1, 1.3, 2.1).unwrap());
    }

    #[test]
    fn zone_membership_edges() {
        let l = four_meter_link();
        assert!(in_fresnel_zone(&l.midpoint(), &l, 1));
        // sum of distances = D + lambda at this offset
        let half = l.length() / 2.0 + l.wavelength / 2.0;
        let off = (half * half - 4.0).sqrt();
        let p = l.midpoint() + Point3::new(0.0, off, 0.0);
        assert!((l.path_excess(&p) - l.wavelength).abs() < 1e-12);
        assert!(!in_fresnel_zone(&p, &l, 1));
    }

    #[test]
    fn first_zone_radius_matches_ellipsoid_to_first_order() {
        let l = four_meter_link();
        let r1 = fresnel_radius(1, l.wavelength, 2.0, 2.0).unwrap();
        let at_r1 = l.midpoint() + Point3::new(0.0, r1, 0.0);
        assert!(in_fresnel_zone(&at_r1, &l, 1));
        assert!((l.path_excess(&at_r1) - l.wavelength / 2.0).abs() <= 0.01 * l.wavelength);
        let beyond = l.midpoint() + Point3::new(0.0, 0.0, 1.05 * r1);
        assert!(!in_fresnel_zone(&beyond, &l, 1));
    }

    #[test]
    fn points_on_segment_are_in_every_zone() {
        let l = link(Point3::new(0.3, 0.1, 0.5), Point3::new(3.1, 2.7, 2.0));
        for i in 0..=20 {
            let p = l.tx_pos.lerp(&l.rx_pos, i as f64 / 20.0);
            for n in 1..5 {
                assert!(in_fresnel_zone(&p, &l, n));
            }
        }
    }

    fn nodes(n: u16) -> Vec<NodePlacement> {
        (0..n)
            .map(|i| NodePlacement { node_id: i * 3 + 1, position: Point3::new(i as f64, 0.5, 1.0), role: NodeRole::Corner })
            .collect()
    }

    #[test]
    fn link_counts() {
        assert_eq!(enumerate_links(&nodes(2), 0.125).unwrap().len(), 2);
        assert_eq!(enumerate_links(&nodes(3), 0.125).unwrap().len(), 6);
        let nine = enumerate_links(&nodes(9), 0.125).unwrap();
        assert_eq!(nine.len(), 72);
        let ids: BTreeSet<LinkId> = nine.iter().map(|l| l.id()).collect();
        assert_eq!(ids.len(), 72);
        assert!(nine.iter().all(|l| l.tx != l.rx));
    }

    #[test]
    fn duplicate_node_rejected() {
        let mut n = nodes(3);
        n[2].node_id = n[0].node_id;
        assert_eq!(enumerate_links(&n, 0.125), Err(GeometryError::DuplicateNode(1)));
        assert_eq!(enumerate_links(&n[..1], 0.125), Err(GeometryError::TooFewNodes(1)));
    }

    #[test]
    fn intersection_extremes() {
        let l = four_meter_link();
        let inside = ActivityRegion::boxed("in", Point3::new(2.4, 1.95, 0.95), Point3::new(2.6, 2.05, 1.05));
        assert_eq!(intersection_probability(&l, &inside, 1, 500, 1).unwrap().p_intersect, 1.0);
        let outside = ActivityRegion::boxed("out", Point3::new(0.0, 3.0, 0.0), Point3::new(1.0, 4.0, 1.0));
        assert_eq!(intersection_probability(&l, &outside, 1, 500, 1).unwrap().p_intersect, 0.0);
        assert_eq!(intersection_probability(&l, &outside, 1, 0, 1), Err(GeometryError::NoSamples));
    }

    #[test]
    fn intersection_half_volume_box() {
        // A thin box on the link axis centred on the ellipsoid tip: exactly
        // half of its length lies inside the zone.
        let l = four_meter_link();
        let semi_major = (l.length() + l.wavelength / 2.0) / 2.0;
        let tip_x = l.midpoint().x + semi_major;
        let h = 0.2;
        let t = 1e-6;
        let region = ActivityRegion::boxed(
            "tip",
            Point3::new(tip_x - h, 2.0 - t, 1.0 - t),
            Point3::new(tip_x + h, 2.0 + t, 1.0 + t),
        );
        let est = intersection_probability(&l, &region, 1, 10_000, 42).unwrap();
        assert!((est.p_intersect - 0.5).abs() <= 0.02, "{}", est.p_intersect);
    }

    #[test]
    fn empty_region_rejected() {
        let l = four_meter_link();
        let bad = ActivityRegion::boxed("bad", Point3::new(1.0, 1.0, 1.0), Point3::new(0.0, 0.0, 0.0));
        assert!(matches!(intersection_probability(&l, &bad, 1, 10, 1), Err(GeometryError::EmptyRegion(_))));
    }

    #[test]
    fn corridor_path_wraps() {
        let c = ActivityRegion::corridor(
            "sq",
            vec![Point3::new(0.0, 0.0, 1.0), Point3::new(1.0, 0.0, 1.0), Point3::new(1.0, 1.0, 1.0), Point3::new(0.0, 1.0, 1.0)],
            0.1,
        );
        assert!((c.path_length() - 4.0).abs() < 1e-12);
        assert!(c.point_on_path(1.5).distance(&Point3::new(1.0, 0.5, 1.0)) < 1e-12);
        assert!(c.point_on_path(4.5).distance(&Point3::new(0.5, 0.0, 1.0)) < 1e-12);
    }

    #[test]
    fn link_id_display_roundtrip() {
        let id = LinkId::new(0xE228, 0xD990);
        assert_eq!(id.to_string(), "E228-D990");
        assert_eq!(id.to_string().parse::<LinkId>().unwrap(), id);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn intersection_translation_invariant(dx in -3.0f64..3.0, dy in -3.0f64..3.0, dz in -2.0f64..2.0, seed in 0u64..1000) {
                let l = four_meter_link();
                let region = ActivityRegion::corridor(
                    "c",
                    vec![Point3::new(1.0, 1.0, 1.0), Point3::new(3.5, 2.5, 1.0), Point3::new(2.0, 3.0, 1.2)],
                    0.3,
                );
                let by = Point3::new(dx, dy, dz);
                let a = intersection_probability(&l, &region, 1, 400, seed).unwrap();
                let b = intersection_probability(&l.translated(by), &region.translated(by), 1, 400, seed).unwrap();
                // identical draws, so counts can only differ by rounding at the boundary
                prop_assert!((a.p_intersect - b.p_intersect).abs() <= 2.0 / 400.0);
            }

            #[test]
            fn radius_symmetric(d1 in 0.0f64..10.0, d2 in 0.01f64..10.0, n in 1u32..5) {
                let a = fresnel_radius(n, 0.125, d1, d2).unwrap();
                let b = fresnel_radius(n, 0.125, d2, d1).unwrap();
                prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            }
        }
    }
}
