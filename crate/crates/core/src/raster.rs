//! Rasterization of vector map layers into agent-frame grids.
//!
//! Grids are row-major with row 0 at the far forward edge and column 0 at
//! the left edge, so "forward" points up when a grid is displayed. A pixel
//! is set when its center lies inside a polygon or within half a line
//! width of a polyline. Polygon membership is half-open: centers on the
//! left or lower edge of a shape (as displayed) count as inside, centers on
//! the right or upper edge do not.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerType {
    RoadSegment,
    DrivableArea,
    Lane,
    Walkway,
}

impl LayerType {
    pub const ALL: [LayerType; 4] = [
        LayerType::RoadSegment,
        LayerType::DrivableArea,
        LayerType::Lane,
        LayerType::Walkway,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerType::RoadSegment => "road_segment",
            LayerType::DrivableArea => "drivable_area",
            LayerType::Lane => "lane",
            LayerType::Walkway => "walkway",
        }
    }

    /// Intensity of this layer in the merged global chunk.
    pub fn merge_weight(self) -> f32 {
        match self {
            LayerType::RoadSegment => 0.25,
            LayerType::DrivableArea => 0.5,
            LayerType::Lane => 0.75,
            LayerType::Walkway => 1.0,
        }
    }
}

/// One map element in global coordinates (meters).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Shape {
    /// Closed ring; the closing edge is implicit.
    Polygon { ring: Vec<[f64; 2]> },
    Polyline { centerline: Vec<[f64; 2]>, width: f64 },
}

impl Shape {
    pub fn points(&self) -> &[[f64; 2]] {
        match self {
            Shape::Polygon { ring } => ring,
            Shape::Polyline { centerline, .. } => centerline,
        }
    }
}

/// Shapes per layer type, indexed by [`LayerType::index`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SemanticMap {
    pub layers: [Vec<Shape>; LayerType::COUNT],
}

impl SemanticMap {
    pub fn layer(&self, t: LayerType) -> &[Shape] {
        &self.layers[t.index()]
    }

    pub fn push(&mut self, t: LayerType, shape: Shape) {
        self.layers[t.index()].push(shape);
    }

    /// Applies `f` to every vertex.
    pub fn map_points(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> SemanticMap {
        let mut out = SemanticMap::default();
        for (dst, src) in out.layers.iter_mut().zip(&self.layers) {
            *dst = src
                .iter()
                .map(|s| match s {
                    Shape::Polygon { ring } => Shape::Polygon {
                        ring: ring.iter().map(|&p| f(p)).collect(),
                    },
                    Shape::Polyline { centerline, width } => Shape::Polyline {
                        centerline: centerline.iter().map(|&p| f(p)).collect(),
                        width: *width,
                    },
                })
                .collect();
        }
        out
    }
}

/// A rectangular window in front of / behind / beside a pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterWindow {
    pub center: Pose,
    pub forward: f64,
    pub rear: f64,
    pub lateral: f64,
    /// Meters per pixel.
    pub resolution: f64,
}

impl RasterWindow {
    pub fn new(center: Pose, forward: f64, rear: f64, lateral: f64, resolution: f64) -> Result<Self> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !(ok(forward + rear) && forward >= 0.0 && rear >= 0.0 && ok(lateral) && ok(resolution)) {
            return Err(Error::contract(format!(
                "raster window extents {forward}/{rear}/{lateral} at {resolution} m/px"
            )));
        }
        Ok(Self {
            center,
            forward,
            rear,
            lateral,
            resolution,
        })
    }

    pub fn rows(&self) -> usize {
        ((self.forward + self.rear) / self.resolution).round() as usize
    }

    pub fn cols(&self) -> usize {
        (2.0 * self.lateral / self.resolution).round() as usize
    }

    /// Global point to display coordinates `(u, v)`: `u` grows rightwards
    /// from the left edge, `v` grows upwards from the rear edge.
    fn to_display(self, p: [f64; 2]) -> [f64; 2] {
        let [x, y] = self.center.to_local(p);
        [self.lateral - y, x + self.rear]
    }
}

/// Single-channel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// 8-bit binary PGM with values scaled from `[0,1]`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Index range `[lo, hi)` of pixel centers `(i + 0.5)·res` in `[a, b)`.
fn center_span(a: f64, b: f64, res: f64, n: usize) -> (usize, usize) {
    let lo = (a / res - 0.5).ceil().max(0.0);
    let hi = (b / res - 0.5).ceil().max(0.0);
    ((lo as usize).min(n), (hi as usize).min(n))
}

fn fill_polygon(out: &mut Raster, ring: &[[f64; 2]], res: f64) {
    if ring.len() < 3 {
        return;
    }
    let vmin = ring.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let vmax = ring.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = center_span(vmin, vmax, res, out.rows);
    let mut xs = Vec::new();
    for k in lo..hi {
        let v = (k as f64 + 0.5) * res;
        xs.clear();
        for i in 0..ring.len() {
            let [u0, v0] = ring[i];
            let [u1, v1] = ring[(i + 1) % ring.len()];
            if (v0 <= v && v < v1) || (v1 <= v && v < v0) {
                xs.push(u0 + (v - v0) * (u1 - u0) / (v1 - v0));
            }
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        let row = out.rows - 1 - k;
        for pair in xs.chunks_exact(2) {
            let (c0, c1) = center_span(pair[0], pair[1], res, out.cols);
            for c in c0..c1 {
                out.data[row * out.cols + c] = 1.0;
            }
        }
    }
}

fn fill_polyline(out: &mut Raster, line: &[[f64; 2]], width: f64, res: f64) {
    let half = width / 2.0;
    let segments: Vec<([f64; 2], [f64; 2])> = match line {
        [] => return,
        [p] => vec![(*p, *p)],
        _ => line.windows(2).map(|w| (w[0], w[1])).collect(),
    };
    for (a, b) in segments {
        let (c0, c1) = center_span(a[0].min(b[0]) - half, a[0].max(b[0]) + half + res, res, out.cols);
        let (k0, k1) = center_span(a[1].min(b[1]) - half, a[1].max(b[1]) + half + res, res, out.rows);
        let d = [b[0] - a[0], b[1] - a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        for k in k0..k1 {
            let v = (k as f64 + 0.5) * res;
            let row = out.rows - 1 - k;
            for c in c0..c1 {
                let u = (c as f64 + 0.5) * res;
                let t = if len2 > 0.0 {
                    (((u - a[0]) * d[0] + (v - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let du = u - a[0] - t * d[0];
                let dv = v - a[1] - t * d[1];
                if du * du + dv * dv <= half * half {
                    out.data[row * out.cols + c] = 1.0;
                }
            }
        }
    }
}

/// Binary occupancy of `shapes` in `window`.
pub fn rasterize_layer(shapes: &[Shape], window: &RasterWindow) -> Raster {
    let mut out = Raster::zeros(window.rows(), window.cols());
    for shape in shapes {
        let pts: Vec<[f64; 2]> = shape.points().iter().map(|&p| window.to_display(p)).collect();
        match shape {
            Shape::Polygon { .. } => fill_polygon(&mut out, &pts, window.resolution),
            Shape::Polyline { width, .. } => fill_polyline(&mut out, &pts, *width, window.resolution),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    pub global_px: usize,
    pub global_forward: f64,
    pub global_rear: f64,
    pub global_lateral: f64,
    pub local_px: usize,
    pub local_extent: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            global_px: 128,
            global_forward: 100.0,
            global_rear: 5.0,
            global_lateral: 52.5,
            local_px: 32,
            local_extent: 20.0,
        }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.global_px == 0 || self.local_px == 0 {
            return Err(Error::contract("raster sizes must be positive"));
        }
        let g = self.global_forward + self.global_rear;
        if (g - 2.0 * self.global_lateral).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "global window must be square: {g} m long, {} m wide",
                2.0 * self.global_lateral
            )));
        }
        if !(self.local_extent > 0.0 && g > 0.0) {
            return Err(Error::contract("raster extents must be positive"));
        }
        Ok(())
    }

    pub fn global_window(&self, pose: Pose) -> Result<RasterWindow> {
        let res = (self.global_forward + self.global_rear) / self.global_px as f64;
        RasterWindow::new(pose, self.global_forward, self.global_rear, self.global_lateral, res)
    }

    pub fn local_window(&self, pose: Pose) -> Result<RasterWindow> {
        let half = self.local_extent / 2.0;
        RasterWindow::new(pose, half, half, half, self.local_extent / self.local_px as f64)
    }
}

/// Merged, normalized global chunk: each layer contributes its merge weight
/// where occupied, and the sum is divided by its maximum.
pub fn global_chunk(map: &SemanticMap, pose: Pose, config: &RasterConfig) -> Result<Raster> {
    let window = config.global_window(pose)?;
    let mut out = Raster::zeros(window.rows(), window.cols());
    for t in LayerType::ALL {
        let layer = rasterize_layer(map.layer(t), &window);
        for (o, v) in out.data.iter_mut().zip(&layer.data) {
            *o += v * t.merge_weight();
        }
    }
    let max = out.data.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        for v in &mut out.data {
            *v /= max;
        }
    }
    Ok(out)
}

/// `[T, 4, h, w]` binary layers around each of the last `steps` poses.
pub fn local_chunk_stack(map: &SemanticMap, past: &[Pose], steps: usize, config: &RasterConfig) -> Result<Tensor<f32>> {
    if past.len() < steps {
        return Err(Error::InsufficientHistory {
            needed: steps,
            got: past.len(),
        });
    }
    let px = config.local_px;
    let mut data = Vec::with_capacity(steps * LayerType::COUNT * px * px);
    for &pose in &past[past.len() - steps..] {
        let window = config.local_window(pose)?;
        for t in LayerType::ALL {
            data.extend(rasterize_layer(map.layer(t), &window).data);
        }
    }
    Tensor::new(&[steps, LayerType::COUNT, px, px], data)
}

/// SVG rendering of a raster (grayscale cells) with optional agent-frame
/// polylines drawn on top. Polyline coordinates are meters in the window's
/// frame.
pub fn svg_overlay(raster: &Raster, window: &RasterWindow, lines: &[(&str, &[[f64; 2]])]) -> String {
    let scale = 4.0;
    let (w, h) = (raster.cols as f64 * scale, raster.rows as f64 * scale);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="black"/>"#);
    for r in 0..raster.rows {
        for c in 0..raster.cols {
            let v = raster.get(r, c);
            if v > 0.0 {
                let g = (v.clamp(0.0, 1.0) * 200.0) as u8 + 40;
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="{scale}" height="{scale}" fill="rgb({g},{g},{g})"/>"#,
                    c as f64 * scale,
                    r as f64 * scale
                );
            }
        }
    }
    let px = scale / window.resolution;
    for (color, pts) in lines {
        let coords: Vec<String> = pts
            .iter()
            .map(|p| {
                let u = (window.lateral - p[1]) * px;
                let v = h - (p[0] + window.rear) * px;
                format!("{u:.2},{v:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            coords.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Shape {
        Shape::Polygon {
            ring: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
        }
    }

    /// Independent crossing-number test in display coordinates.
    fn inside(ring: &[[f64; 2]], p: [f64; 2]) -> bool {
        let mut odd = false;
        for i in 0..ring.len() {
            let a = ring[i];
            let b = ring[(i + 1) % ring.len()];
            if (a[1] <= p[1]) != (b[1] <= p[1]) {
                let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
                if x > p[0] {
                    odd = !odd;
                }
            }
        }
        odd
    }

    fn window(pose: Pose) -> RasterWindow {
        RasterWindow::new(pose, 10.0, 10.0, 10.0, 0.5).unwrap()
    }

    #[test]
    fn empty_and_full() {
        let w = window(Pose::new(0.0, 0.0, 0.0));
        assert_eq!(rasterize_layer(&[], &w).count_nonzero(), 0);
        let full = rasterize_layer(&[rect(-20.0, -20.0, 20.0, 20.0)], &w);
        assert_eq!(full.count_nonzero(), 40 * 40);
    }

    #[test]
    fn left_half() {
        // Agent frame +y is left, so y ∈ [0, 10] covers the left half.
        let w = window(Pose::new(0.0, 0.0, 0.0));
        let r = rasterize_layer(&[rect(-10.0, 0.0, 10.0, 10.0)], &w);
        for row in 0..40 {
            for c in 0..40 {
                assert_eq!(r.get(row, c), if c < 20 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn forward_is_up() {
        let w = window(Pose::new(5.0, 5.0, PI / 2.0));
        // Ahead of a pose heading +y globally.
        let r = rasterize_layer(&[rect(3.0, 10.0, 7.0, 14.0)], &w);
        assert!(r.count_nonzero() > 0);
        for row in 20..40 {
            for c in 0..40 {
                assert_eq!(r.get(row, c), 0.0);
            }
        }
    }

    #[test]
    fn polygon_matches_point_in_polygon() {
        let ring = vec![[-7.3, -2.1], [3.9, -8.2], [8.6, 4.4], [1.2, 1.7], [-4.4, 7.9]];
        let w = window(Pose::new(0.0, 0.0, 0.0));
        let r = rasterize_layer(&[Shape::Polygon { ring: ring.clone() }], &w);
        let disp: Vec<[f64; 2]> = ring.iter().map(|&p| w.to_display(p)).collect();
        for row in 0..40 {
            for c in 0..40 {
                let p = [(c as f64 + 0.5) * 0.5, (40 - row) as f64 * 0.5 - 0.25];
                assert_eq!(r.get(row, c) == 1.0, inside(&disp, p), "pixel {row},{c}");
            }
        }
    }

    #[test]
    fn polyline_width() {
        let w = window(Pose::new(0.0, 0.0, 0.0));
        let line = Shape::Polyline {
            centerline: vec![[-10.0, 0.0], [10.0, 0.0]],
            width: 2.0,
        };
        let r = rasterize_layer(&[line], &w);
        // Centers at lateral offsets ±0.25, ±0.75 are within 1 m.
        for row in 0..40 {
            for c in 0..40 {
                let on = (18..22).contains(&c);
                assert_eq!(r.get(row, c) == 1.0, on, "pixel {row},{c}");
            }
        }
    }

    fn toy_map() -> SemanticMap {
        let mut m = SemanticMap::default();
        m.push(LayerType::RoadSegment, rect(-5.0, -20.0, 90.0, 20.0));
        m.push(LayerType::DrivableArea, rect(0.0, -7.0, 80.0, 7.0));
        m.push(
            LayerType::Lane,
            Shape::Polyline {
                centerline: vec![[0.0, 1.75], [80.0, 1.75]],
                width: 3.5,
            },
        );
        m.push(LayerType::Walkway, rect(0.0, 7.0, 80.0, 10.0));
        m
    }

    #[test]
    fn global_chunk_normalized() {
        let g = global_chunk(&toy_map(), Pose::new(0.0, 0.0, 0.0), &RasterConfig::default()).unwrap();
        assert_eq!((g.rows, g.cols), (128, 128));
        assert!(g.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(g.data.iter().copied().fold(0.0f32, f32::max), 1.0);
    }

    #[test]
    fn drivable_rectangle_ahead_stays_up() {
        let mut m = SemanticMap::default();
        m.push(LayerType::DrivableArea, rect(20.0, -5.0, 60.0, 5.0));
        let g = global_chunk(&m, Pose::new(0.0, 0.0, 0.0), &RasterConfig::default()).unwrap();
        assert!(g.count_nonzero() > 0);
        let res = 105.0 / 128.0;
        // Forward distance of a row center is 100 - (row + 0.5)·res.
        for r in 0..g.rows {
            let fwd = 100.0 - (r as f64 + 0.5) * res;
            for c in 0..g.cols {
                if g.get(r, c) > 0.0 {
                    assert!((20.0..60.0).contains(&fwd));
                }
            }
        }
    }

    #[test]
    fn rotated_scene_gives_same_chunk() {
        let map = toy_map();
        let cfg = RasterConfig::default();
        let pose = Pose::new(3.0, -1.0, 0.2);
        let a = global_chunk(&map, pose, &cfg).unwrap();
        let rot = Pose::new(0.0, 0.0, PI / 2.0);
        let moved_map = map.map_points(|p| rot.to_global(p));
        let [x, y] = rot.to_global(pose.position());
        let b = global_chunk(&moved_map, Pose::new(x, y, pose.yaw + PI / 2.0), &cfg).unwrap();
        let diff = a.data.iter().zip(&b.data).filter(|(u, v)| u != v).count();
        assert!(diff as f64 <= 0.005 * a.data.len() as f64, "{diff} pixels differ");
    }

    #[test]
    fn local_stack_shape_and_stationary() {
        let cfg = RasterConfig::default();
        let past = vec![Pose::new(10.0, 1.0, 0.0); 5];
        let d = local_chunk_stack(&toy_map(), &past, 5, &cfg).unwrap();
        assert_eq!(d.shape(), &[5, 4, 32, 32]);
        let slice = 4 * 32 * 32;
        for t in 1..5 {
            assert_eq!(d.data()[..slice], d.data()[t * slice..(t + 1) * slice]);
        }
        assert!(matches!(
            local_chunk_stack(&toy_map(), &past[..4], 5, &cfg),
            Err(Error::InsufficientHistory { needed: 5, got: 4 })
        ));
    }

    #[test]
    fn channels_follow_their_layer() {
        let mut m = SemanticMap::default();
        m.push(LayerType::Walkway, rect(-3.0, -3.0, 3.0, 3.0));
        let cfg = RasterConfig::default();
        let d = local_chunk_stack(&m, &[Pose::new(0.0, 0.0, 0.0)], 1, &cfg).unwrap();
        let plane = 32 * 32;
        for ch in 0..4 {
            let nz = d.data()[ch * plane..(ch + 1) * plane].iter().filter(|&&v| v > 0.0).count();
            assert_eq!(nz > 0, ch == LayerType::Walkway.index());
        }
    }

    #[test]
    fn pgm_header() {
        let r = Raster::zeros(2, 3);
        let bytes = r.to_pgm();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
    }

    proptest! {
        #[test]
        fn rigid_equivariance(
            tx in -200.0..200.0f64, ty in -200.0..200.0f64, th in -PI..PI,
            px in -10.0..30.0f64, py in -8.0..8.0f64, pyaw in -0.5..0.5f64,
        ) {
            let map = toy_map();
            let cfg = RasterConfig { global_px: 64, local_px: 32, ..RasterConfig::default() };
            let pose = Pose::new(px, py, pyaw);
            let rigid = Pose::new(tx, ty, th);
            let moved = map.map_points(|p| rigid.to_global(p));
            let [x, y] = rigid.to_global(pose.position());
            let pose2 = Pose::new(x, y, pyaw + th);
            let a = global_chunk(&map, pose, &cfg).unwrap();
            let b = global_chunk(&moved, pose2, &cfg).unwrap();
            let diff = a.data.iter().zip(&b.data).filter(|(u, v)| u != v).count();
            prop_assert!(diff as f64 <= 0.005 * a.data.len() as f64);
            let la = local_chunk_stack(&map, &[pose], 1, &cfg).unwrap();
            let lb = local_chunk_stack(&moved, &[pose2], 1, &cfg).unwrap();
            let diff = la.data().iter().zip(lb.data()).filter(|(u, v)| u != v).count();
            prop_assert!(diff as f64 <= 0.005 * la.len() as f64);
        }

        #[test]
        fn deterministic(px in -10.0..30.0f64, pyaw in -PI..PI) {
            let cfg = RasterConfig { global_px: 48, ..RasterConfig::default() };
            let a = global_chunk(&toy_map(), Pose::new(px, 0.0, pyaw), &cfg).unwrap();
            let b = global_chunk(&toy_map(), Pose::new(px, 0.0, pyaw), &cfg).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn channels_bounded_by_union(px in -10.0..80.0f64, py in -10.0..10.0f64, pyaw in -PI..PI) {
            let map = toy_map();
            let mut union = SemanticMap::default();
            for t in LayerType::ALL {
                for s in map.layer(t) {
                    union.push(LayerType::RoadSegment, s.clone());
                }
            }
            let cfg = RasterConfig::default();
            let pose = Pose::new(px, py, pyaw);
            let d = local_chunk_stack(&map, &[pose], 1, &cfg).unwrap();
            let u = rasterize_layer(union.layer(LayerType::RoadSegment), &cfg.local_window(pose).unwrap());
            let plane = 32 * 32;
            for p in 0..plane {
                let any = (0..4).any(|ch| d.data()[ch * plane + p] > 0.0);
                prop_assert_eq!(any, u.data[p] > 0.0);
            }
        }
    }
}
