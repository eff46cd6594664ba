//! Procedural driving scenes: straight roads, curves and T-intersections
//! with two lanes per direction, and tracks that keep lane, change lane or
//! turn at bounded acceleration and yaw rate.
//!
//! Roads are laid out in a scene frame (main road along +x, right-hand
//! traffic) and the finished scene is moved by a random rigid transform.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::{Scene, Track};
use crate::error::{Error, Result};
use crate::geometry::{motion_features, wrap_angle, Pose};
use crate::raster::{LayerType, SemanticMap, Shape};
use crate::rng::{self, Rng};

pub const LANE_WIDTH: f64 = 3.5;
/// Painted width of a lane; the remainder is left as a visible gap.
pub const LANE_PAINT: f64 = 3.0;
pub const DRIVABLE_HALF: f64 = 2.0 * LANE_WIDTH;
pub const ROAD_HALF: f64 = 9.0;
pub const WALKWAY_OUTER: f64 = 12.0;
pub const MAX_ACCEL: f64 = 4.0;
pub const MAX_YAW_RATE: f64 = 0.7;
pub const MIN_TURN_RADIUS: f64 = 5.0;

const DECEL: f64 = 2.5;
const ACCEL: f64 = 2.0;
/// Turn speed as a fraction of the yaw-rate limit `v = ω·R`.
const TURN_MARGIN: f64 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadTemplate {
    Straight,
    Curve,
    TIntersection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    KeepLane,
    LaneChange,
    TurnLeft,
    TurnRight,
}

impl Maneuver {
    fn fits(self, t: RoadTemplate) -> bool {
        match self {
            Maneuver::KeepLane | Maneuver::LaneChange => true,
            Maneuver::TurnLeft | Maneuver::TurnRight => t == RoadTemplate::TIntersection,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub templates: Vec<RoadTemplate>,
    pub maneuvers: Vec<Maneuver>,
    pub tracks: usize,
    pub duration_s: f64,
    pub rate_hz: f64,
    /// Cruise speed range (m/s).
    pub speed: (f64, f64),
    /// Turn radius range at intersections (m).
    pub turn_radius: (f64, f64),
    /// Longitudinal length of a lane change (m).
    pub lane_change_length: (f64, f64),
    /// Standard deviation of position noise (m).
    pub position_noise: f64,
    /// Standard deviation of heading noise (rad).
    pub yaw_noise: f64,
    pub random_frame: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            templates: vec![RoadTemplate::Straight, RoadTemplate::Curve, RoadTemplate::TIntersection],
            maneuvers: vec![
                Maneuver::KeepLane,
                Maneuver::LaneChange,
                Maneuver::TurnLeft,
                Maneuver::TurnRight,
            ],
            tracks: 2,
            duration_s: 17.0,
            rate_hz: 2.0,
            speed: (5.0, 14.0),
            turn_radius: (7.0, 14.0),
            lane_change_length: (25.0, 50.0),
            position_noise: 0.02,
            yaw_noise: 0.005,
            random_frame: true,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let gen = |m: &str| Err(Error::Generation(m.to_string()));
        if self.templates.is_empty() || self.maneuvers.is_empty() {
            return gen("spec needs at least one template and one maneuver");
        }
        if self.tracks == 0 || !(self.duration_s > 0.0) || !(self.rate_hz > 0.0) {
            return gen("tracks, duration and rate must be positive");
        }
        if !(self.speed.0 > 0.0 && self.speed.0 <= self.speed.1) {
            return gen("speed range must be positive and ordered");
        }
        if self.turn_radius.0 < MIN_TURN_RADIUS || self.turn_radius.0 > self.turn_radius.1 {
            return Err(Error::Generation(format!(
                "turn radius range {:?} below the {MIN_TURN_RADIUS} m minimum or unordered",
                self.turn_radius
            )));
        }
        if !(self.lane_change_length.0 > 0.0 && self.lane_change_length.0 <= self.lane_change_length.1) {
            return gen("lane change length range must be positive and ordered");
        }
        if !(self.position_noise >= 0.0 && self.yaw_noise >= 0.0) {
            return gen("noise levels must be nonnegative");
        }
        Ok(())
    }
}

/// Densely sampled curve with headings and cumulative arc length.
#[derive(Clone, Debug)]
struct Path {
    pts: Vec<[f64; 2]>,
    heading: Vec<f64>,
    s: Vec<f64>,
}

impl Path {
    fn new(pts: Vec<[f64; 2]>, heading: Vec<f64>) -> Self {
        let mut s = vec![0.0; pts.len()];
        for i in 1..pts.len() {
            s[i] = s[i - 1] + (pts[i][0] - pts[i - 1][0]).hypot(pts[i][1] - pts[i - 1][1]);
        }
        Self { pts, heading, s }
    }

    fn length(&self) -> f64 {
        *self.s.last().expect("non-empty path")
    }

    fn pose_at(&self, s: f64) -> Pose {
        let s = s.clamp(0.0, self.length());
        let i = match self.s.binary_search_by(|v| v.total_cmp(&s)) {
            Ok(i) => i.min(self.pts.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.pts.len() - 2),
        };
        let span = self.s[i + 1] - self.s[i];
        let u = if span > 0.0 { (s - self.s[i]) / span } else { 0.0 };
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let dh = wrap_angle(self.heading[i + 1] - self.heading[i]);
        Pose::new(
            a[0] + u * (b[0] - a[0]),
            a[1] + u * (b[1] - a[1]),
            self.heading[i] + u * dh,
        )
    }

    /// Lateral offset (positive to the left) as a function of arc length.
    fn offset(&self, d: impl Fn(f64) -> f64) -> Path {
        let n = self.pts.len();
        let mut pts = Vec::with_capacity(n);
        for i in 0..n {
            let h = self.heading[i];
            let di = d(self.s[i]);
            pts.push([self.pts[i][0] - di * h.sin(), self.pts[i][1] + di * h.cos()]);
        }
        let heading = (0..n)
            .map(|i| {
                let (a, b) = (pts[i.saturating_sub(1)], pts[(i + 1).min(n - 1)]);
                let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
                if dx == 0.0 && dy == 0.0 {
                    self.heading[i]
                } else {
                    dy.atan2(dx)
                }
            })
            .collect();
        Path::new(pts, heading)
    }
}

/// Appends a straight run of `len` meters from the current end of `pts`.
fn extend_straight(pts: &mut Vec<[f64; 2]>, heads: &mut Vec<f64>, len: f64, step: f64) {
    let last = *pts.last().expect("seeded path");
    let h = *heads.last().expect("seeded path");
    let n = (len / step).ceil().max(1.0) as usize;
    for i in 1..=n {
        let t = len * i as f64 / n as f64;
        pts.push([last[0] + t * h.cos(), last[1] + t * h.sin()]);
        heads.push(h);
    }
}

/// Appends an arc of `radius` turning by `angle` (positive = left).
fn extend_arc(pts: &mut Vec<[f64; 2]>, heads: &mut Vec<f64>, radius: f64, angle: f64, step: f64) {
    let p = *pts.last().expect("seeded path");
    let h = *heads.last().expect("seeded path");
    let side = angle.signum();
    let center = [p[0] - side * radius * h.sin(), p[1] + side * radius * h.cos()];
    let n = ((radius * angle.abs()) / step).ceil().max(1.0) as usize;
    for i in 1..=n {
        let hh = h + angle * i as f64 / n as f64;
        pts.push([center[0] + side * radius * hh.sin(), center[1] - side * radius * hh.cos()]);
        heads.push(hh);
    }
}

fn straight_path(start: [f64; 2], heading: f64, len: f64) -> Path {
    let (mut pts, mut heads) = (vec![start], vec![heading]);
    extend_straight(&mut pts, &mut heads, len, len);
    Path::new(pts, heads)
}

fn ring_between(a: &Path, b: &Path) -> Shape {
    let mut ring = a.pts.clone();
    ring.extend(b.pts.iter().rev());
    Shape::Polygon { ring }
}

fn polyline(p: &Path, width: f64) -> Shape {
    Shape::Polyline {
        centerline: p.pts.clone(),
        width,
    }
}

/// Lane center offsets from the road centerline, positive to the left.
/// Traffic along the centerline direction uses the negative offsets.
const LANE_OFFSETS: [f64; 4] = [-1.5 * LANE_WIDTH, -0.5 * LANE_WIDTH, 0.5 * LANE_WIDTH, 1.5 * LANE_WIDTH];

/// Adds a two-way road along `center` to `map`. `walk_gaps` lists arc
/// length intervals where the left walkway is interrupted.
fn add_road(map: &mut SemanticMap, center: &Path, walk_gaps: &[(f64, f64)]) {
    let at = |d: f64| center.offset(move |_| d);
    map.push(LayerType::RoadSegment, ring_between(&at(ROAD_HALF), &at(-ROAD_HALF)));
    map.push(LayerType::DrivableArea, ring_between(&at(DRIVABLE_HALF), &at(-DRIVABLE_HALF)));
    for d in LANE_OFFSETS {
        map.push(LayerType::Lane, polyline(&at(d), LANE_PAINT));
    }
    map.push(LayerType::Walkway, ring_between(&at(-ROAD_HALF), &at(-WALKWAY_OUTER)));
    // Left walkway, split around gaps.
    let mut start = 0.0;
    let mut pieces = Vec::new();
    for &(g0, g1) in walk_gaps {
        pieces.push((start, g0));
        start = g1;
    }
    pieces.push((start, center.length()));
    for (a, b) in pieces {
        if b - a < 1.0 {
            continue;
        }
        let sub = sub_path(center, a, b);
        let inner = sub.offset(|_| ROAD_HALF);
        let outer = sub.offset(|_| WALKWAY_OUTER);
        map.push(LayerType::Walkway, ring_between(&inner, &outer));
    }
}

fn sub_path(p: &Path, a: f64, b: f64) -> Path {
    let mut pts = vec![p.pose_at(a)];
    for i in 0..p.pts.len() {
        if p.s[i] > a && p.s[i] < b {
            pts.push(Pose::new(p.pts[i][0], p.pts[i][1], p.heading[i]));
        }
    }
    pts.push(p.pose_at(b));
    Path::new(pts.iter().map(|q| q.position()).collect(), pts.iter().map(|q| q.yaw).collect())
}

fn smoothstep5(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

/// A planned track: its path, the starting arc length and the arc-length
/// interval of a turn (if any) for speed planning.
struct Plan {
    path: Path,
    start: f64,
    turn: Option<(f64, f64, f64)>,
}

struct Layout {
    map: SemanticMap,
    /// Road centerline in the direction of travel for +x-bound traffic.
    main: Path,
    /// x coordinate of the side road's axis for T-intersections.
    junction: Option<f64>,
}

fn build_layout(template: RoadTemplate, rng: &mut Rng) -> Layout {
    let mut map = SemanticMap::default();
    match template {
        RoadTemplate::Straight => {
            let main = straight_path([-150.0, 0.0], 0.0, 700.0);
            add_road(&mut map, &main, &[]);
            Layout {
                map,
                main,
                junction: None,
            }
        }
        RoadTemplate::Curve => {
            let radius = rng.random_range(45.0..110.0);
            let angle = rng.random_range(0.7..1.7) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let (mut pts, mut heads) = (vec![[-150.0, 0.0]], vec![0.0]);
            extend_straight(&mut pts, &mut heads, rng.random_range(170.0..260.0), 10.0);
            extend_arc(&mut pts, &mut heads, radius, angle, 2.0);
            extend_straight(&mut pts, &mut heads, 400.0, 10.0);
            let main = Path::new(pts, heads);
            add_road(&mut map, &main, &[]);
            Layout {
                map,
                main,
                junction: None,
            }
        }
        RoadTemplate::TIntersection => {
            let main = straight_path([-150.0, 0.0], 0.0, 700.0);
            let x0: f64 = rng.random_range(60.0..140.0);
            let s0 = x0 + 150.0;
            add_road(&mut map, &main, &[(s0 - ROAD_HALF - 1.0, s0 + ROAD_HALF + 1.0)]);
            // Side road heading north from the main road's left edge.
            let side = straight_path([x0, DRIVABLE_HALF], FRAC_PI_2, 400.0);
            let at = |d: f64| side.offset(move |_| d);
            map.push(LayerType::RoadSegment, ring_between(&at(ROAD_HALF), &at(-ROAD_HALF)));
            map.push(LayerType::DrivableArea, ring_between(&at(DRIVABLE_HALF), &at(-DRIVABLE_HALF)));
            for d in LANE_OFFSETS {
                map.push(LayerType::Lane, polyline(&at(d), LANE_PAINT));
            }
            let walk_start = straight_path([x0, ROAD_HALF], FRAC_PI_2, 400.0 - (ROAD_HALF - DRIVABLE_HALF));
            let w = |d: f64| walk_start.offset(move |_| d);
            map.push(LayerType::Walkway, ring_between(&w(ROAD_HALF), &w(WALKWAY_OUTER)));
            map.push(LayerType::Walkway, ring_between(&w(-ROAD_HALF), &w(-WALKWAY_OUTER)));
            Layout {
                map,
                main,
                junction: Some(x0),
            }
        }
    }
}

fn plan_track(
    layout: &Layout,
    maneuver: Maneuver,
    spec: &SceneSpec,
    cruise: f64,
    rng: &mut Rng,
) -> Result<Plan> {
    let horizon = cruise * spec.duration_s;
    match maneuver {
        Maneuver::KeepLane | Maneuver::LaneChange => {
            // Travel along the main centerline direction in one of its two
            // right-hand lanes, or against it in the others.
            let forward = rng.random_bool(0.5) || layout.junction.is_none() && rng.random_bool(0.5);
            let base = if forward {
                layout.main.clone()
            } else {
                reverse(&layout.main)
            };
            let lane = rng.random_range(0..2);
            let from = [-1.5, -0.5][lane] * LANE_WIDTH;
            let start = rng.random_range(100.0..130.0);
            let path = if maneuver == Maneuver::KeepLane {
                base.offset(move |_| from)
            } else {
                let to = [-0.5, -1.5][lane] * LANE_WIDTH;
                let len = rng.random_range(spec.lane_change_length.0..=spec.lane_change_length.1);
                let begin = start + rng.random_range(0.15..0.65) * horizon;
                base.offset(move |s| from + (to - from) * smoothstep5((s - begin) / len))
            };
            if start + horizon + 110.0 > path.length() {
                return Err(Error::Generation("road too short for the track horizon".into()));
            }
            Ok(Plan { path, start, turn: None })
        }
        Maneuver::TurnLeft | Maneuver::TurnRight => {
            let x0 = layout.junction.ok_or_else(|| Error::Generation("turns need an intersection".into()))?;
            let radius = rng.random_range(spec.turn_radius.0..=spec.turn_radius.1);
            let left = maneuver == Maneuver::TurnLeft;
            // Eastbound inner lane turns left into the northbound inner lane;
            // westbound outer lane turns right into the northbound outer lane.
            let (lane_y, heading, target_x) = if left {
                (-0.5 * LANE_WIDTH, 0.0, x0 + 0.5 * LANE_WIDTH)
            } else {
                (1.5 * LANE_WIDTH, PI, x0 + 1.5 * LANE_WIDTH)
            };
            let turn_x = if left { target_x - radius } else { target_x + radius };
            let approach = 250.0;
            let origin = if left { turn_x - approach } else { turn_x + approach };
            let (mut pts, mut heads) = (vec![[origin, lane_y]], vec![heading]);
            extend_straight(&mut pts, &mut heads, approach, 5.0);
            let arc_start = approach;
            extend_arc(&mut pts, &mut heads, radius, if left { FRAC_PI_2 } else { -FRAC_PI_2 }, 0.5);
            let arc_end = arc_start + radius * FRAC_PI_2;
            extend_straight(&mut pts, &mut heads, 350.0, 5.0);
            let path = Path::new(pts, heads);
            // Reach the turn a few seconds into the track.
            let lead = rng.random_range(0.25..0.65) * spec.duration_s;
            let v_turn = (TURN_MARGIN * MAX_YAW_RATE * radius).min(cruise);
            let start = (arc_start - lead * 0.5 * (cruise + v_turn)).max(5.0);
            Ok(Plan {
                path,
                start,
                turn: Some((arc_start, arc_end, v_turn)),
            })
        }
    }
}

fn reverse(p: &Path) -> Path {
    let pts: Vec<[f64; 2]> = p.pts.iter().rev().copied().collect();
    let heads: Vec<f64> = p.heading.iter().rev().map(|h| wrap_angle(h + PI)).collect();
    Path::new(pts, heads)
}

/// Speed limit at arc length `s` given cruise speed and an optional turn.
fn speed_limit(s: f64, cruise: f64, turn: Option<(f64, f64, f64)>) -> f64 {
    match turn {
        None => cruise,
        Some((a, b, vt)) => {
            if s < a {
                cruise.min((vt * vt + 2.0 * DECEL * (a - s)).sqrt())
            } else if s <= b {
                vt
            } else {
                cruise.min((vt * vt + 2.0 * ACCEL * (s - b)).sqrt())
            }
        }
    }
}

fn drive(plan: &Plan, cruise: f64, spec: &SceneSpec) -> Vec<Pose> {
    let period = 1.0 / spec.rate_hz;
    let n = (spec.duration_s * spec.rate_hz).round() as usize + 1;
    let substeps = 200;
    let dt = period / substeps as f64;
    let mut s = plan.start;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            for _ in 0..substeps {
                // Midpoint integration of ds/dt = v(s).
                let v1 = speed_limit(s, cruise, plan.turn);
                let v2 = speed_limit(s + 0.5 * dt * v1, cruise, plan.turn);
                s += dt * v2;
            }
        }
        out.push(plan.path.pose_at(s));
    }
    out
}

/// One scene from `seed`'s scene stream. Tracks are checked against the
/// acceleration and yaw-rate bounds before noise is added.
pub fn generate_scene(seed: u64, index: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut r = rng::substream(seed, rng::streams::SCENES, index);
    let template = *spec.templates.choose(&mut r).expect("non-empty templates");
    let allowed: Vec<Maneuver> = spec.maneuvers.iter().copied().filter(|m| m.fits(template)).collect();
    if allowed.is_empty() {
        return Err(Error::Generation(format!(
            "no maneuver in the mix fits template {template:?}"
        )));
    }
    let layout = build_layout(template, &mut r);
    let mut tracks = Vec::with_capacity(spec.tracks);
    let mut maneuvers = Vec::with_capacity(spec.tracks);
    let period = 1.0 / spec.rate_hz;
    let noise_xy = Normal::new(0.0, spec.position_noise).map_err(|e| Error::Generation(e.to_string()))?;
    let noise_yaw = Normal::new(0.0, spec.yaw_noise).map_err(|e| Error::Generation(e.to_string()))?;
    for id in 0..spec.tracks {
        let maneuver = *allowed.choose(&mut r).expect("non-empty maneuvers");
        let cruise = r.random_range(spec.speed.0..=spec.speed.1);
        let plan = plan_track(&layout, maneuver, spec, cruise, &mut r)?;
        let poses = drive(&plan, cruise, spec);
        let feats = motion_features(&poses, period)?;
        if let Some(bad) = feats
            .iter()
            .find(|f| f.a.abs() > MAX_ACCEL || f.yaw_rate.abs() > MAX_YAW_RATE)
        {
            return Err(Error::Generation(format!(
                "{maneuver:?} track exceeds kinematic bounds: a = {:.2}, yaw rate = {:.2}",
                bad.a, bad.yaw_rate
            )));
        }
        let poses = poses
            .into_iter()
            .map(|p| {
                Pose::new(
                    p.x + noise_xy.sample(&mut r),
                    p.y + noise_xy.sample(&mut r),
                    p.yaw + noise_yaw.sample(&mut r),
                )
            })
            .collect::<Vec<_>>();
        let timestamps = (0..poses.len()).map(|i| i as f64 * period).collect();
        tracks.push(Track {
            id: id as u32,
            poses,
            timestamps: Some(timestamps),
        });
        maneuvers.push(maneuver);
    }
    let mut scene = Scene {
        rate_hz: spec.rate_hz,
        map: layout.map,
        tracks,
        metadata: BTreeMap::from([
            ("template".to_string(), serde_json::to_value(template)?),
            ("maneuvers".to_string(), serde_json::to_value(&maneuvers)?),
            ("seed".to_string(), serde_json::json!(seed)),
            ("index".to_string(), serde_json::json!(index)),
        ]),
    };
    if spec.random_frame {
        let rigid = Pose::new(
            r.random_range(-1000.0..1000.0),
            r.random_range(-1000.0..1000.0),
            r.random_range(-PI..PI),
        );
        scene = transform_scene(&scene, &rigid);
    }
    Ok(scene)
}

/// Applies the rigid motion `rigid` (scene frame → new global frame).
pub fn transform_scene(scene: &Scene, rigid: &Pose) -> Scene {
    Scene {
        rate_hz: scene.rate_hz,
        map: scene.map.map_points(|p| rigid.to_global(p)),
        tracks: scene
            .tracks
            .iter()
            .map(|t| Track {
                id: t.id,
                poses: t
                    .poses
                    .iter()
                    .map(|p| {
                        let [x, y] = rigid.to_global(p.position());
                        Pose::new(x, y, p.yaw + rigid.yaw)
                    })
                    .collect(),
                timestamps: t.timestamps.clone(),
            })
            .collect(),
        metadata: scene.metadata.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
        let d = [b[0] - a[0], b[1] - a[1]];
        let l2 = d[0] * d[0] + d[1] * d[1];
        let t = if l2 > 0.0 {
            (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / l2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (p[0] - a[0] - t * d[0]).hypot(p[1] - a[1] - t * d[1])
    }

    fn within_some_lane(map: &SemanticMap, p: [f64; 2]) -> bool {
        map.layer(LayerType::Lane).iter().any(|s| match s {
            Shape::Polyline { centerline, width } => centerline
                .windows(2)
                .any(|w| seg_dist(p, w[0], w[1]) <= width / 2.0),
            _ => false,
        })
    }

    fn spec_with(template: RoadTemplate, maneuver: Maneuver) -> SceneSpec {
        SceneSpec {
            templates: vec![template],
            maneuvers: vec![maneuver],
            ..SceneSpec::default()
        }
    }

    #[test]
    fn keep_lane_stays_in_lane() {
        for template in [RoadTemplate::Straight, RoadTemplate::Curve, RoadTemplate::TIntersection] {
            for i in 0..8 {
                let s = generate_scene(3, i, &spec_with(template, Maneuver::KeepLane)).unwrap();
                for t in &s.tracks {
                    for p in &t.poses {
                        assert!(within_some_lane(&s.map, p.position()), "{template:?} scene {i}");
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let spec = SceneSpec::default();
        assert_eq!(generate_scene(9, 4, &spec).unwrap(), generate_scene(9, 4, &spec).unwrap());
        assert_ne!(generate_scene(9, 4, &spec).unwrap(), generate_scene(9, 5, &spec).unwrap());
    }

    #[test]
    fn noiseless_straight_is_collinear() {
        let spec = SceneSpec {
            position_noise: 0.0,
            yaw_noise: 0.0,
            ..spec_with(RoadTemplate::Straight, Maneuver::KeepLane)
        };
        let s = generate_scene(1, 0, &spec).unwrap();
        for t in &s.tracks {
            let (a, b) = (t.poses[0].position(), t.poses[t.poses.len() - 1].position());
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            for p in &t.poses {
                let q = p.position();
                let cross = (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]);
                assert!((cross / len).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn every_maneuver_respects_bounds() {
        let spec = SceneSpec {
            templates: vec![RoadTemplate::TIntersection],
            position_noise: 0.0,
            yaw_noise: 0.0,
            ..SceneSpec::default()
        };
        for i in 0..40 {
            let s = generate_scene(5, i, &spec).unwrap();
            for t in &s.tracks {
                assert_eq!(t.poses.len(), 35);
                for f in motion_features(&t.poses, 0.5).unwrap() {
                    assert!(f.a.abs() <= MAX_ACCEL && f.yaw_rate.abs() <= MAX_YAW_RATE);
                }
            }
        }
    }

    #[test]
    fn turns_change_heading() {
        let spec = SceneSpec {
            position_noise: 0.0,
            yaw_noise: 0.0,
            random_frame: false,
            ..spec_with(RoadTemplate::TIntersection, Maneuver::TurnLeft)
        };
        let s = generate_scene(2, 0, &spec).unwrap();
        for t in &s.tracks {
            let dyaw = wrap_angle(t.poses.last().unwrap().yaw - t.poses[0].yaw);
            assert!((dyaw - FRAC_PI_2).abs() < 1e-6, "{dyaw}");
        }
    }

    #[test]
    fn infeasible_specs() {
        let spec = SceneSpec {
            turn_radius: (2.0, 10.0),
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(0, 0, &spec), Err(Error::Generation(_))));
        let spec = spec_with(RoadTemplate::Straight, Maneuver::TurnLeft);
        assert!(matches!(generate_scene(0, 0, &spec), Err(Error::Generation(_))));
    }
}
