//! Scene files: a semantic map plus agent tracks sampled at a fixed rate.
//!
//! ```json
//! {
//!   "version": 1,
//!   "rate_hz": 2.0,
//!   "map": { "layers": { "road_segment": [ {"ring": [[x, y], ...]} ],
//!                        "drivable_area": [...],
//!                        "lane": [ {"centerline": [[x, y], ...], "width": 3.0} ],
//!                        "walkway": [...] } },
//!   "tracks": [ { "id": 0, "poses": [[x, y, yaw], ...], "timestamps": [0.0, 0.5, ...] } ],
//!   "metadata": { ... }
//! }
//! ```
//!
//! `timestamps` is optional; when present its spacing must equal
//! `1 / rate_hz`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::raster::{LayerType, SemanticMap, Shape};

pub const SCENE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u32,
    pub poses: Vec<Pose>,
    pub timestamps: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub rate_hz: f64,
    pub map: SemanticMap,
    pub tracks: Vec<Track>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Scene {
    pub fn track(&self, id: u32) -> Option<&Track> {
        self.tracks.iter().find(|t| t.id == id)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayersFile {
    road_segment: Vec<Shape>,
    drivable_area: Vec<Shape>,
    lane: Vec<Shape>,
    walkway: Vec<Shape>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    layers: LayersFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackFile {
    id: u32,
    poses: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timestamps: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    version: u32,
    rate_hz: f64,
    map: MapFile,
    tracks: Vec<TrackFile>,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
}

fn validate_shapes(layer: &str, shapes: &[Shape]) -> Result<()> {
    for (i, s) in shapes.iter().enumerate() {
        let field = format!("map.layers.{layer}[{i}]");
        if s.points().iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::parse(field, "non-finite coordinate"));
        }
        match s {
            Shape::Polygon { ring } if ring.len() < 3 => {
                return Err(Error::parse(field, "polygon ring needs at least 3 points"));
            }
            Shape::Polyline { centerline, width } if centerline.is_empty() || !(*width > 0.0) => {
                return Err(Error::parse(field, "polyline needs points and a positive width"));
            }
            _ => {}
        }
    }
    Ok(())
}

impl SceneFile {
    fn into_scene(self) -> Result<Scene> {
        if self.version != SCENE_VERSION {
            return Err(Error::parse("version", format!("unsupported scene version {}", self.version)));
        }
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(Error::parse("rate_hz", "rate must be positive"));
        }
        let l = self.map.layers;
        let mut map = SemanticMap::default();
        for (t, shapes) in LayerType::ALL
            .into_iter()
            .zip([l.road_segment, l.drivable_area, l.lane, l.walkway])
        {
            validate_shapes(t.name(), &shapes)?;
            map.layers[t.index()] = shapes;
        }
        let period = 1.0 / self.rate_hz;
        let mut tracks = Vec::with_capacity(self.tracks.len());
        for (i, t) in self.tracks.into_iter().enumerate() {
            if t.poses.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::parse(format!("tracks[{i}].poses"), "non-finite pose"));
            }
            if let Some(ts) = &t.timestamps {
                if ts.len() != t.poses.len() {
                    return Err(Error::parse(
                        format!("tracks[{i}].timestamps"),
                        format!("{} timestamps for {} poses", ts.len(), t.poses.len()),
                    ));
                }
                if let Some(j) = (1..ts.len()).find(|&j| ((ts[j] - ts[j - 1]) - period).abs() > 1e-6) {
                    return Err(Error::parse(
                        format!("tracks[{i}].timestamps[{j}]"),
                        format!("spacing {} does not match rate {} Hz", ts[j] - ts[j - 1], self.rate_hz),
                    ));
                }
            }
            tracks.push(Track {
                id: t.id,
                poses: t.poses.iter().map(|p| Pose::new(p[0], p[1], p[2])).collect(),
                timestamps: t.timestamps,
            });
        }
        Ok(Scene {
            rate_hz: self.rate_hz,
            map,
            tracks,
            metadata: self.metadata,
        })
    }

    fn from_scene(scene: &Scene) -> Self {
        let layer = |t: LayerType| scene.map.layer(t).to_vec();
        SceneFile {
            version: SCENE_VERSION,
            rate_hz: scene.rate_hz,
            map: MapFile {
                layers: LayersFile {
                    road_segment: layer(LayerType::RoadSegment),
                    drivable_area: layer(LayerType::DrivableArea),
                    lane: layer(LayerType::Lane),
                    walkway: layer(LayerType::Walkway),
                },
            },
            tracks: scene
                .tracks
                .iter()
                .map(|t| TrackFile {
                    id: t.id,
                    poses: t.poses.iter().map(|p| [p.x, p.y, p.yaw]).collect(),
                    timestamps: t.timestamps.clone(),
                })
                .collect(),
            metadata: scene.metadata.clone(),
        }
    }
}

pub fn scene_from_json(text: &str) -> Result<Scene> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: SceneFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let field = if path == "." { String::new() } else { path };
        // Missing fields are reported against the parent; name them.
        let msg = inner.to_string();
        let field = match msg.split('`').nth(1) {
            Some(name) if msg.starts_with("missing field") => {
                if field.is_empty() {
                    name.to_string()
                } else {
                    format!("{field}.{name}")
                }
            }
            _ => field,
        };
        Error::parse(field, msg)
    })?;
    file.into_scene()
}

pub fn scene_to_json(scene: &Scene) -> String {
    serde_json::to_string_pretty(&SceneFile::from_scene(scene)).expect("scene serializes")
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scene_from_json(&text)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    fs::write(path, scene_to_json(scene)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Scene {
        let mut map = SemanticMap::default();
        map.push(
            LayerType::DrivableArea,
            Shape::Polygon {
                ring: vec![[0.0, 0.0], [10.0, 0.1], [9.7, 3.3]],
            },
        );
        map.push(
            LayerType::Lane,
            Shape::Polyline {
                centerline: vec![[0.1, 0.2], [1.0 / 3.0, 2.0]],
                width: 3.0,
            },
        );
        Scene {
            rate_hz: 2.0,
            map,
            tracks: vec![Track {
                id: 4,
                poses: vec![Pose::new(0.1, 0.2, 0.3), Pose::new(1.0 / 7.0, 2e-9, -3.0)],
                timestamps: Some(vec![0.0, 0.5]),
            }],
            metadata: BTreeMap::from([("template".to_string(), serde_json::json!("straight"))]),
        }
    }

    #[test]
    fn round_trip() {
        let s = sample();
        assert_eq!(scene_from_json(&scene_to_json(&s)).unwrap(), s);
    }

    #[test]
    fn missing_rate_names_field() {
        let text = scene_to_json(&sample()).replace("\"rate_hz\": 2.0,", "");
        match scene_from_json(&text) {
            Err(Error::Parse { field, .. }) => assert!(field.contains("rate"), "{field}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_timestamp_spacing() {
        let mut s = sample();
        s.tracks[0].timestamps = Some(vec![0.0, 0.7]);
        match scene_from_json(&scene_to_json(&s)) {
            Err(Error::Parse { field, .. }) => assert!(field.starts_with("tracks[0].timestamps")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nested_errors_carry_paths() {
        let text = scene_to_json(&sample()).replace("\"width\": 3.0", "\"width\": \"wide\"");
        match scene_from_json(&text) {
            Err(Error::Parse { field, .. }) => assert!(field.starts_with("map.layers.lane"), "{field}"),
            other => panic!("{other:?}"),
        }
    }
}
