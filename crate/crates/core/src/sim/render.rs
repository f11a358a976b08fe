//! Camera images and BEV ground truth from a scene.

use serde::{Deserialize, Serialize};

use super::geometry::{dot, point_in_polygon, project_polyline, OrientedBox, Point};
use super::scene::{AgentClass, LightState, Scene, LANE_WIDTH};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 7;

/// BEV semantic classes, in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemClass {
    Background = 0,
    Drivable = 1,
    LaneDivider = 2,
    Crosswalk = 3,
    Vehicle = 4,
    Pedestrian = 5,
    StaticObstacle = 6,
}

impl SemClass {
    fn of_agent(c: AgentClass) -> Self {
        match c {
            AgentClass::Vehicle => SemClass::Vehicle,
            AgentClass::Pedestrian => SemClass::Pedestrian,
            AgentClass::Static => SemClass::StaticObstacle,
        }
    }

    fn color(self) -> [f64; 3] {
        match self {
            SemClass::Background => [0.35, 0.5, 0.3],
            SemClass::Drivable => [0.3, 0.3, 0.32],
            SemClass::LaneDivider => [0.92, 0.92, 0.9],
            SemClass::Crosswalk => [0.8, 0.78, 0.55],
            SemClass::Vehicle => [0.15, 0.25, 0.85],
            SemClass::Pedestrian => [0.95, 0.6, 0.1],
            SemClass::StaticObstacle => [0.75, 0.3, 0.7],
        }
    }
}

const SKY: [f64; 3] = [0.55, 0.7, 0.92];
const FAR: [f64; 3] = [0.6, 0.62, 0.65];
const STOP_RED: [f64; 3] = [0.9, 0.1, 0.1];
const STOP_GREEN: [f64; 3] = [0.1, 0.8, 0.25];
const DIVIDER_HALF_WIDTH: f64 = 0.2;
const CROSSWALK_NEAR: f64 = 0.3;
const CROSSWALK_FAR: f64 = 2.8;

/// Top-down metric grid around the ego.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BevGrid {
    pub rows: usize,
    pub cols: usize,
    /// Metres per cell.
    pub resolution: f64,
    /// Forward extent of the top row edge.
    pub x_max: f64,
    /// Leftward extent of the first column edge.
    pub y_max: f64,
}

impl Default for BevGrid {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            resolution: 0.5,
            x_max: 24.0,
            y_max: 16.0,
        }
    }
}

impl BevGrid {
    /// Ego-frame centre of a cell; rows run backwards, columns rightwards.
    pub fn cell_center(&self, r: usize, c: usize) -> Point {
        [
            self.x_max - (r as f64 + 0.5) * self.resolution,
            self.y_max - (c as f64 + 0.5) * self.resolution,
        ]
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.x_max - self.rows as f64 * self.resolution, self.x_max)
    }

    pub fn y_range(&self) -> (f64, f64) {
        (self.y_max - self.cols as f64 * self.resolution, self.y_max)
    }
}

/// Ground class at `p`, agents at time zero taking precedence.
pub fn semantic_at(scene: &Scene, p: Point) -> SemClass {
    for a in &scene.agents {
        if a.footprint().contains(p) {
            return SemClass::of_agent(a.class);
        }
    }
    ground_class(scene, p)
}

fn ground_class(scene: &Scene, p: Point) -> SemClass {
    if !point_in_polygon(p, &scene.drivable, 0.0) {
        return SemClass::Background;
    }
    for l in &scene.lights {
        let [p0, p1] = l.stopline;
        let n = l.travel_direction();
        let along = [p1[0] - p0[0], p1[1] - p0[1]];
        let len2 = dot(along, along);
        let rel = [p[0] - p0[0], p[1] - p0[1]];
        let t = dot(rel, along) / len2;
        let d = dot(rel, n);
        if (0.0..=1.0).contains(&t) && (CROSSWALK_NEAR..=CROSSWALK_FAR).contains(&d) {
            return SemClass::Crosswalk;
        }
    }
    let nearest = scene
        .centerlines
        .iter()
        .filter_map(|c| project_polyline(p, c))
        .map(|q| q.distance)
        .fold(f64::INFINITY, f64::min);
    if (nearest - LANE_WIDTH / 2.0).abs() < DIVIDER_HALF_WIDTH {
        SemClass::LaneDivider
    } else {
        SemClass::Drivable
    }
}

/// `[rows * cols]` class indices.
pub fn bev_semantics(scene: &Scene, grid: &BevGrid) -> Vec<usize> {
    let mut out = Vec::with_capacity(grid.rows * grid.cols);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            out.push(semantic_at(scene, grid.cell_center(r, c)) as usize);
        }
    }
    out
}

/// Pinhole camera on a flat ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRig {
    /// Mounting yaw of each view, radians (left, front, right).
    pub yaws: [f64; 3],
    pub fov: f64,
    pub height: f64,
    /// Downward tilt, radians.
    pub pitch: f64,
    pub image_hw: (usize, usize),
    /// Ground hits beyond this range render as haze.
    pub max_range: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            yaws: [65f64.to_radians(), 0.0, -(65f64.to_radians())],
            fov: 70f64.to_radians(),
            height: 1.5,
            pitch: 5f64.to_radians(),
            image_hw: (32, 32),
            max_range: 60.0,
        }
    }
}

impl CameraRig {
    /// World ray through the centre of pixel `(row, col)` of view `cam`.
    pub fn ray(&self, cam: usize, row: usize, col: usize) -> [f64; 3] {
        let (h, w) = self.image_hw;
        let f = (w as f64 / 2.0) / (self.fov / 2.0).tan();
        let u = (col as f64 + 0.5 - w as f64 / 2.0) / f;
        let v = (row as f64 + 0.5 - h as f64 / 2.0) / f;
        // (horizontal, vertical) parts of the pitched forward and down axes
        let (sp, cp) = self.pitch.sin_cos();
        let fwd = [cp, -sp];
        let down = [-sp, -cp];
        let xf = fwd[0] + v * down[0];
        let z = fwd[1] + v * down[1];
        let (sy, cy) = self.yaws[cam].sin_cos();
        // right of a camera looking along yaw is (sin, -cos)
        [xf * cy + u * sy, xf * sy - u * cy, z]
    }

    /// Pixel hit by an ego-frame ground point, if in view.
    pub fn project(&self, cam: usize, p: [f64; 3]) -> Option<(f64, f64)> {
        let (h, w) = self.image_hw;
        let f = (w as f64 / 2.0) / (self.fov / 2.0).tan();
        let (sy, cy) = self.yaws[cam].sin_cos();
        let (x, y, z) = (p[0], p[1], p[2] - self.height);
        let fwd_h = x * cy + y * sy;
        let right = x * sy - y * cy;
        let (sp, cp) = self.pitch.sin_cos();
        let depth = fwd_h * cp - z * sp;
        let down = -fwd_h * sp - z * cp;
        if depth <= 1e-9 {
            return None;
        }
        let col = right / depth * f + w as f64 / 2.0;
        let row = down / depth * f + h as f64 / 2.0;
        (col >= 0.0 && col < w as f64 && row >= 0.0 && row < h as f64).then_some((row, col))
    }
}

fn agent_height(c: AgentClass) -> f64 {
    match c {
        AgentClass::Vehicle => 1.5,
        AgentClass::Pedestrian => 1.7,
        AgentClass::Static => 1.0,
    }
}

/// Entry distance of a ray into an upright box prism.
fn ray_prism(origin: [f64; 3], d: [f64; 3], b: &OrientedBox, top: f64) -> Option<f64> {
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let rel = [origin[0] - b.center[0], origin[1] - b.center[1]];
    for (ax, half) in b.axes().into_iter().zip([b.length / 2.0, b.width / 2.0]) {
        let o = dot(rel, ax);
        let s = d[0] * ax[0] + d[1] * ax[1];
        if s.abs() < 1e-12 {
            if o.abs() > half {
                return None;
            }
            continue;
        }
        let (t1, t2) = ((-half - o) / s, (half - o) / s);
        lo = lo.max(t1.min(t2));
        hi = hi.min(t1.max(t2));
    }
    // vertical slab 0 <= z <= top
    if d[2].abs() < 1e-12 {
        if origin[2] < 0.0 || origin[2] > top {
            return None;
        }
    } else {
        let (t1, t2) = ((0.0 - origin[2]) / d[2], (top - origin[2]) / d[2]);
        lo = lo.max(t1.min(t2));
        hi = hi.min(t1.max(t2));
    }
    (lo <= hi).then_some(lo)
}

fn shade(c: [f64; 3], k: f64) -> [f64; 3] {
    c.map(|v| (v * k).min(1.0))
}

fn stopline_color(scene: &Scene, p: Point) -> Option<[f64; 3]> {
    for l in &scene.lights {
        let [p0, p1] = l.stopline;
        let along = [p1[0] - p0[0], p1[1] - p0[1]];
        let rel = [p[0] - p0[0], p[1] - p0[1]];
        let t = dot(rel, along) / dot(along, along);
        let d = dot(rel, l.travel_direction());
        if (0.0..=1.0).contains(&t) && (-0.5..=0.0).contains(&d) {
            return Some(match l.state {
                LightState::Red => STOP_RED,
                LightState::Green => STOP_GREEN,
            });
        }
    }
    None
}

/// `[Ncam, 3, H, W]` RGB views in `[0, 1]`.
pub fn render_views(scene: &Scene, rig: &CameraRig) -> Tensor<f32> {
    let (h, w) = rig.image_hw;
    let ncam = rig.yaws.len();
    let mut data = vec![0f32; ncam * 3 * h * w];
    let origin = [0.0, 0.0, rig.height];
    let boxes: Vec<(OrientedBox, f64, SemClass)> = scene
        .agents
        .iter()
        .map(|a| (a.footprint(), agent_height(a.class), SemClass::of_agent(a.class)))
        .collect();
    for cam in 0..ncam {
        for r in 0..h {
            for c in 0..w {
                let d = rig.ray(cam, r, c);
                let ground_t = if d[2] < 0.0 { Some(-rig.height / d[2]) } else { None };
                let mut hit: Option<(f64, SemClass)> = None;
                for (b, top, cls) in &boxes {
                    if let Some(t) = ray_prism(origin, d, b, *top) {
                        if hit.map_or(true, |(bt, _)| t < bt) {
                            hit = Some((t, *cls));
                        }
                    }
                }
                let color = match (hit, ground_t) {
                    (Some((t, cls)), g) if g.map_or(true, |g| t <= g) => {
                        // darker with distance so silhouettes carry range
                        shade(cls.color(), 1.0 - (t / rig.max_range).min(0.6))
                    }
                    (_, Some(t)) => {
                        let p = [d[0] * t, d[1] * t];
                        if t * (d[0] * d[0] + d[1] * d[1]).sqrt() > rig.max_range {
                            FAR
                        } else {
                            stopline_color(scene, p).unwrap_or_else(|| ground_class(scene, p).color())
                        }
                    }
                    _ => SKY,
                };
                for (ch, v) in color.iter().enumerate() {
                    data[((cam * 3 + ch) * h + r) * w + c] = *v as f32;
                }
            }
        }
    }
    Tensor::new(&[ncam, 3, h, w], data).expect("view shape matches buffer")
}

/// Agent boxes inside the grid at time zero: `[x, y, w, l, yaw]`.
pub fn detection_targets(scene: &Scene, grid: &BevGrid) -> Vec<[f64; 5]> {
    let (x0, x1) = grid.x_range();
    let (y0, y1) = grid.y_range();
    scene
        .agents
        .iter()
        .map(|a| a.pose)
        .filter(|p| (x0..=x1).contains(&p[0]) && (y0..=y1).contains(&p[1]))
        .collect()
}
