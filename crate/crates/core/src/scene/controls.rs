//! Structured per-frame control state and the layout canvases derived from it.
//!
//! Canvases are computed from the control state alone, so the same function serves
//! dataset generation and closed-loop rollouts where only controls are available.

use nalgebra::{Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::camera::{ego_matrix, Camera, CameraRig};
use super::world::{SceneConfig, ToyWorld};
use crate::error::{contract, Result};

pub const CANVAS_CHANNELS: usize = 2;
pub const CANVAS_LEGEND: [&str; CANVAS_CHANNELS] = ["road", "boxes"];
/// Width of one box row in the packed `[T, N, 8]` layout.
pub const BOX_FIELDS: usize = 8;
/// Corners closer than this to the image plane cull the whole box.
const NEAR: f32 = 0.1;

/// Oriented 3D box in the ego frame.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Box3 {
    pub center: [f32; 3],
    /// Length, width, height.
    pub size: [f32; 3],
    pub yaw: f32,
    pub category: u8,
}

impl Box3 {
    pub fn corners(&self) -> [Vector3<f32>; 8] {
        let (s, c) = self.yaw.sin_cos();
        let [l, w, h] = self.size;
        let mut out = [Vector3::zeros(); 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let dx = if i & 1 == 0 { -0.5 } else { 0.5 } * l;
            let dy = if i & 2 == 0 { -0.5 } else { 0.5 } * w;
            let dz = if i & 4 == 0 { -0.5 } else { 0.5 } * h;
            *corner = Vector3::new(
                self.center[0] + c * dx - s * dy,
                self.center[1] + s * dx + c * dy,
                self.center[2] + dz,
            );
        }
        out
    }

    pub fn to_row(&self) -> [f32; BOX_FIELDS] {
        let [x, y, z] = self.center;
        let [l, w, h] = self.size;
        [x, y, z, l, w, h, self.yaw, self.category as f32]
    }

    pub fn from_row(r: &[f32]) -> Self {
        Box3 {
            center: [r[0], r[1], r[2]],
            size: [r[3], r[4], r[5]],
            yaw: r[6],
            category: r[7] as u8,
        }
    }

    /// Pixel rectangle `[u0, u1] x [v0, v1]` covered by the projected corners, or `None`
    /// when any corner is behind the near plane.
    pub fn screen_rect(&self, cam: &Camera) -> Option<[f32; 4]> {
        let mut rect = [
            f32::INFINITY,
            f32::NEG_INFINITY,
            f32::INFINITY,
            f32::NEG_INFINITY,
        ];
        for p in self.corners() {
            let q = cam.project_ego(&p);
            if q.depth < NEAR {
                return None;
            }
            rect = [
                rect[0].min(q.u),
                rect[1].max(q.u),
                rect[2].min(q.v),
                rect[3].max(q.v),
            ];
        }
        Some(rect)
    }
}

/// Ego-centred bird's-eye occupancy grid with a road and an agent channel.
///
/// Cell `(ix, iy)` covers the ego-frame point `((ix + 0.5 - n/2) * cell, (iy + 0.5 - n/2) * cell)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bev {
    pub size: usize,
    pub cell: f32,
    /// `[size, size, 2]`, values in {0, 1}.
    pub data: Vec<f32>,
}

impl Bev {
    pub fn at(&self, ix: usize, iy: usize, ch: usize) -> f32 {
        self.data[(ix * self.size + iy) * 2 + ch]
    }

    fn cell_center(&self, i: usize) -> f32 {
        (i as f32 + 0.5 - 0.5 * self.size as f32) * self.cell
    }

    /// Bilinear sample of the road channel at an ego-frame ground point; zero outside the grid.
    pub fn road_at(&self, x: f32, y: f32) -> f32 {
        let n = self.size as f32;
        let fx = x / self.cell + 0.5 * n - 0.5;
        let fy = y / self.cell + 0.5 * n - 0.5;
        let (x0, y0) = (fx.floor(), fy.floor());
        let (ax, ay) = (fx - x0, fy - y0);
        let get = |ix: f32, iy: f32| {
            if ix < 0.0 || iy < 0.0 || ix >= n || iy >= n {
                0.0
            } else {
                self.at(ix as usize, iy as usize, 0)
            }
        };
        (1.0 - ax) * (1.0 - ay) * get(x0, y0)
            + ax * (1.0 - ay) * get(x0 + 1.0, y0)
            + (1.0 - ax) * ay * get(x0, y0 + 1.0)
            + ax * ay * get(x0 + 1.0, y0 + 1.0)
    }
}

/// `C_t = {P_t, B_t, E_t, M_t, c}` for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlState {
    /// Per view `[K | R | t]`.
    pub cameras: Vec<[[f32; 7]; 3]>,
    /// Exactly `max_boxes` entries; padding entries have `box_mask == false`.
    pub boxes: Vec<Box3>,
    pub box_mask: Vec<bool>,
    pub bev: Bev,
    /// Ego pose relative to frame 0 (ego frame to frame-0 frame).
    pub ego: [[f32; 4]; 4],
    pub caption: Vec<u32>,
}

impl ControlState {
    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn camera(&self, view: usize) -> Camera {
        Camera::from_params(&self.cameras[view])
    }

    pub fn valid_boxes(&self) -> impl Iterator<Item = &Box3> {
        self.boxes
            .iter()
            .zip(&self.box_mask)
            .filter(|(_, &m)| m)
            .map(|(b, _)| b)
    }

    pub fn ego_matrix(&self) -> Matrix4<f32> {
        Matrix4::from_fn(|i, j| self.ego[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.box_mask.len() {
            return contract("control state: box list and mask lengths differ");
        }
        if self.ego[3] != [0.0, 0.0, 0.0, 1.0] {
            return contract("control state: ego transform bottom row must be [0, 0, 0, 1]");
        }
        if self.bev.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return contract("control state: BEV values must be 0 or 1");
        }
        for p in &self.cameras {
            Camera::from_params(p).validate()?;
        }
        Ok(())
    }
}

fn to_local(m_inv: &Matrix4<f32>, p: [f32; 2], z: f32) -> Vector3<f32> {
    let h = m_inv * Vector4::new(p[0], p[1], z, 1.0);
    Vector3::new(h.x, h.y, h.z)
}

/// Control state of `world` at frame `t`.
pub fn controls_at(world: &ToyWorld, cfg: &SceneConfig, rig: &CameraRig, t: usize) -> ControlState {
    let m_t = ego_matrix(&world.ego[t]);
    let m_inv = m_t.try_inverse().expect("rigid transform");
    let rel = ego_matrix(&world.ego[0])
        .try_inverse()
        .expect("rigid transform")
        * m_t;

    let mut boxes = vec![Box3::default(); cfg.max_boxes];
    let mut box_mask = vec![false; cfg.max_boxes];
    for (i, a) in world.agents[t].iter().enumerate().take(cfg.max_boxes) {
        let c = to_local(&m_inv, a.pos, 0.5 * a.height);
        boxes[i] = Box3 {
            center: [c.x, c.y, c.z],
            size: [a.size[0], a.size[1], a.height],
            yaw: a.heading - world.ego[t].heading,
            category: a.category,
        };
        box_mask[i] = true;
    }

    let n = cfg.bev_size;
    let mut bev = Bev {
        size: n,
        cell: cfg.bev_cell,
        data: vec![0.0; n * n * 2],
    };
    for ix in 0..n {
        for iy in 0..n {
            let (x, y) = (bev.cell_center(ix), bev.cell_center(iy));
            let h = m_t * Vector4::new(x, y, 0.0, 1.0);
            let road = world.road.contains([h.x, h.y]);
            let agent = box_mask
                .iter()
                .zip(&boxes)
                .any(|(&m, b)| m && footprint_contains(b, x, y));
            bev.data[(ix * n + iy) * 2] = road as u8 as f32;
            bev.data[(ix * n + iy) * 2 + 1] = agent as u8 as f32;
        }
    }

    ControlState {
        cameras: rig.cameras.iter().map(Camera::to_params).collect(),
        boxes,
        box_mask,
        bev,
        ego: std::array::from_fn(|i| std::array::from_fn(|j| rel[(i, j)])),
        caption: world.caption.clone(),
    }
}

fn footprint_contains(b: &Box3, x: f32, y: f32) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.center[0], y - b.center[1]);
    let along = c * dx + s * dy;
    let across = -s * dx + c * dy;
    along.abs() <= 0.5 * b.size[0] && across.abs() <= 0.5 * b.size[1]
}

/// Whether the ground ray through the centre of pixel `(i, j)` lands on road.
pub(crate) fn pixel_on_road(cs: &ControlState, cam: &Camera, i: usize, j: usize) -> bool {
    let dir = cam.ray(j as f32 + 0.5, i as f32 + 0.5);
    if dir.z >= -1e-6 {
        return false;
    }
    let origin = cam.center();
    let lambda = -origin.z / dir.z;
    let hit = origin + dir * lambda;
    cs.bev.road_at(hit.x, hit.y) >= 0.5
}

/// Whether the pixel centre of `(i, j)` falls inside `rect`.
pub(crate) fn rect_covers(rect: &[f32; 4], i: usize, j: usize) -> bool {
    let (u, v) = (j as f32 + 0.5, i as f32 + 0.5);
    u >= rect[0] && u <= rect[1] && v >= rect[2] && v <= rect[3]
}

/// Layout canvas `[H, W, 2]` (road, boxes) for one view.
pub fn canvas_view(cs: &ControlState, view: usize, height: usize, width: usize) -> Vec<f32> {
    let cam = cs.camera(view);
    let rects: Vec<[f32; 4]> = cs
        .valid_boxes()
        .filter_map(|b| b.screen_rect(&cam))
        .collect();
    let mut out = vec![0.0; height * width * CANVAS_CHANNELS];
    for i in 0..height {
        for j in 0..width {
            let px = (i * width + j) * CANVAS_CHANNELS;
            out[px] = pixel_on_road(cs, &cam, i, j) as u8 as f32;
            out[px + 1] = rects.iter().any(|r| rect_covers(r, i, j)) as u8 as f32;
        }
    }
    out
}

/// Canvases for every view, `[V, H, W, 2]` flattened.
pub fn canvases(cs: &ControlState, height: usize, width: usize) -> Vec<f32> {
    (0..cs.views())
        .flat_map(|v| canvas_view(cs, v, height, width))
        .collect()
}
