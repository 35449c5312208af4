//! Pinhole cameras rigidly mounted on the ego vehicle.
//!
//! Ego frame: x forward, y left, z up. Camera frame: x right, y down, z forward.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use super::world::{Pose2, SceneConfig};
use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub k: Matrix3<f32>,
    /// Rotation taking ego-frame vectors into the camera frame.
    pub r: Matrix3<f32>,
    pub t: Vector3<f32>,
}

/// A projected point; `depth <= 0` means the point is behind the camera and must be culled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub u: f32,
    pub v: f32,
    pub depth: f32,
}

impl Projected {
    pub fn in_front(&self) -> bool {
        self.depth > 0.0
    }
}

impl Camera {
    /// Camera at `height` above the ego origin, rotated by `yaw` (left positive).
    pub fn mounted(focal: f32, cx: f32, cy: f32, yaw: f32, height: f32) -> Self {
        let (s, c) = yaw.sin_cos();
        #[rustfmt::skip]
        let r = Matrix3::new(
            s, -c, 0.0,
            0.0, 0.0, -1.0,
            c, s, 0.0,
        );
        let k = Matrix3::new(focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0);
        let t = -(r * Vector3::new(0.0, 0.0, height));
        Camera { k, r, t }
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.k;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return contract("camera intrinsics must be upper-triangular with K[2][2] = 1");
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return contract("camera focal lengths must be positive");
        }
        let err = (self.r.transpose() * self.r - Matrix3::identity())
            .abs()
            .max();
        if err > 1e-5 {
            return contract(format!("camera rotation is not orthonormal (error {err})"));
        }
        Ok(())
    }

    /// The `[K | R | t]` packing used for control states.
    pub fn to_params(&self) -> [[f32; 7]; 3] {
        let mut p = [[0.0; 7]; 3];
        for (i, row) in p.iter_mut().enumerate() {
            for j in 0..3 {
                row[j] = self.k[(i, j)];
                row[3 + j] = self.r[(i, j)];
            }
            row[6] = self.t[i];
        }
        p
    }

    pub fn from_params(p: &[[f32; 7]; 3]) -> Self {
        let k = Matrix3::from_fn(|i, j| p[i][j]);
        let r = Matrix3::from_fn(|i, j| p[i][3 + j]);
        let t = Vector3::new(p[0][6], p[1][6], p[2][6]);
        Camera { k, r, t }
    }

    /// Camera centre in the ego frame.
    pub fn center(&self) -> Vector3<f32> {
        -(self.r.transpose() * self.t)
    }

    /// Projects a point given in the ego frame.
    pub fn project_ego(&self, p: &Vector3<f32>) -> Projected {
        let c = self.r * p + self.t;
        let h = self.k * c;
        Projected {
            u: h.x / c.z,
            v: h.y / c.z,
            depth: c.z,
        }
    }

    /// Ego-frame direction of the ray through pixel coordinate `(u, v)`.
    pub fn ray(&self, u: f32, v: f32) -> Vector3<f32> {
        let k = &self.k;
        let y = (v - k[(1, 2)]) / k[(1, 1)];
        let x = (u - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        self.r.transpose() * Vector3::new(x, y, 1.0)
    }
}

/// Homogeneous transform from the ego frame at `pose` to world coordinates.
pub fn ego_matrix(pose: &Pose2) -> Matrix4<f32> {
    let (s, c) = pose.heading.sin_cos();
    #[rustfmt::skip]
    let m = Matrix4::new(
        c, -s, 0.0, pose.pos[0],
        s, c, 0.0, pose.pos[1],
        0.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
    );
    m
}

/// Projects a world point through `camera` on an ego vehicle whose pose is `ego`
/// (ego frame to world, as stored in a control state).
pub fn project_point(world: &Vector3<f32>, camera: &Camera, ego: &Matrix4<f32>) -> Projected {
    // Rigid inverse: [R t]^-1 = [R^T, -R^T t].
    let r = ego.fixed_view::<3, 3>(0, 0);
    let t = ego.fixed_view::<3, 1>(0, 3);
    let local = r.transpose() * (world - t);
    camera.project_ego(&local)
}

/// Transforms a world point into the ego frame of `ego`.
pub fn world_to_ego(world: &Vector3<f32>, ego: &Matrix4<f32>) -> Vector3<f32> {
    let h = ego.try_inverse().expect("ego transform is rigid")
        * Vector4::new(world.x, world.y, world.z, 1.0);
    Vector3::new(h.x, h.y, h.z)
}

/// One camera per view, yaws spaced evenly and centred on the forward direction;
/// view 0 is the leftmost.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
    pub height: usize,
    pub width: usize,
}

impl CameraRig {
    pub fn from_config(cfg: &SceneConfig) -> Self {
        let focal = 0.5 * cfg.width as f32 / (0.5 * cfg.fov_deg.to_radians()).tan();
        let centre = 0.5 * (cfg.views as f32 - 1.0);
        let cameras = (0..cfg.views)
            .map(|v| {
                let yaw = (centre - v as f32) * cfg.view_spacing_deg.to_radians();
                Camera::mounted(
                    focal,
                    0.5 * cfg.width as f32,
                    0.5 * cfg.height as f32,
                    yaw,
                    cfg.camera_height,
                )
            })
            .collect();
        CameraRig {
            cameras,
            height: cfg.height,
            width: cfg.width,
        }
    }
}
