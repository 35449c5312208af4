//! Procedural toy worlds: a road polyline, constant-velocity agents and an ego that
//! drives along the road centreline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Size of the caption vocabulary: four slots of four values each.
pub const VOCAB_SIZE: usize = 16;
pub const CAPTION_LEN: usize = 4;
pub const N_CATEGORIES: usize = 4;

/// Knobs for world generation and rendering resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub agents: usize,
    pub max_boxes: usize,
    pub bev_size: usize,
    pub bev_cell: f32,
    pub ego_speed: f32,
    pub road_width: f32,
    pub fov_deg: f32,
    pub view_spacing_deg: f32,
    pub camera_height: f32,
    /// Generate a straight road instead of a gently curving one.
    pub straight: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            views: 3,
            height: 32,
            width: 32,
            frames: 16,
            agents: 4,
            max_boxes: 8,
            bev_size: 32,
            bev_cell: 1.5,
            ego_speed: 0.8,
            road_width: 8.0,
            fov_deg: 60.0,
            view_spacing_deg: 50.0,
            camera_height: 1.5,
            straight: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return contract("scene config: frames must be at least 1");
        }
        if self.views == 0 || self.height == 0 || self.width == 0 {
            return contract("scene config: views, height and width must be positive");
        }
        if self.agents > self.max_boxes {
            return contract(format!(
                "scene config: {} agents exceed the box capacity {}",
                self.agents, self.max_boxes
            ));
        }
        if self.bev_size == 0 || self.bev_cell <= 0.0 {
            return contract("scene config: BEV grid must be non-empty");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub pos: [f32; 2],
    pub heading: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub pos: [f32; 2],
    pub heading: f32,
    /// Length along the heading, width across it.
    pub size: [f32; 2],
    pub height: f32,
    pub vel: [f32; 2],
    pub category: u8,
}

/// Piecewise-linear road centreline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub points: Vec<[f32; 2]>,
    pub width: f32,
}

impl Road {
    /// Distance from `p` to the nearest point of the centreline.
    pub fn distance(&self, p: [f32; 2]) -> f32 {
        self.points
            .windows(2)
            .map(|w| segment_distance(p, w[0], w[1]))
            .fold(f32::INFINITY, f32::min)
    }

    pub fn contains(&self, p: [f32; 2]) -> bool {
        self.distance(p) <= 0.5 * self.width
    }

    pub fn length(&self) -> f32 {
        self.points.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    /// Pose at arclength `s` from the first point, clamped to the polyline.
    pub fn pose_at(&self, s: f32) -> Pose2 {
        let mut remaining = s.max(0.0);
        for w in self.points.windows(2) {
            let len = dist(w[0], w[1]);
            let heading = (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]);
            if remaining <= len {
                let f = remaining / len;
                return Pose2 {
                    pos: [
                        w[0][0] + f * (w[1][0] - w[0][0]),
                        w[0][1] + f * (w[1][1] - w[0][1]),
                    ],
                    heading,
                };
            }
            remaining -= len;
        }
        let n = self.points.len();
        let (a, b) = (self.points[n - 2], self.points[n - 1]);
        Pose2 {
            pos: b,
            heading: (b[1] - a[1]).atan2(b[0] - a[0]),
        }
    }
}

fn dist(a: [f32; 2], b: [f32; 2]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn segment_distance(p: [f32; 2], a: [f32; 2], b: [f32; 2]) -> f32 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let f = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, [a[0] + f * ab[0], a[1] + f * ab[1]])
}

/// Axis-aligned arena that agents bounce inside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arena {
    pub min: [f32; 2],
    pub max: [f32; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyWorld {
    pub road: Road,
    pub arena: Arena,
    /// Agent states per frame, `agents[t][i]`.
    pub agents: Vec<Vec<Agent>>,
    pub ego: Vec<Pose2>,
    pub caption: Vec<u32>,
}

impl ToyWorld {
    /// Simulates `initial` agents for as many frames as `ego` has poses (dt = 1).
    pub fn simulate(
        road: Road,
        arena: Arena,
        initial: Vec<Agent>,
        ego: Vec<Pose2>,
        caption: Vec<u32>,
    ) -> Result<Self> {
        if ego.is_empty() {
            return contract("world needs at least one ego pose");
        }
        let mut agents = vec![initial];
        for _ in 1..ego.len() {
            let next = agents
                .last()
                .unwrap()
                .iter()
                .map(|a| step_agent(a, &arena))
                .collect();
            agents.push(next);
        }
        Ok(ToyWorld {
            road,
            arena,
            agents,
            ego,
            caption,
        })
    }

    pub fn frames(&self) -> usize {
        self.ego.len()
    }
}

/// Advances one agent by its velocity, reflecting the velocity component that would
/// leave the arena.
fn step_agent(a: &Agent, arena: &Arena) -> Agent {
    let mut next = *a;
    for axis in 0..2 {
        let p = a.pos[axis] + a.vel[axis];
        if p < arena.min[axis] || p > arena.max[axis] {
            next.vel[axis] = -a.vel[axis];
            next.pos[axis] = a.pos[axis] - a.vel[axis];
        } else {
            next.pos[axis] = p;
        }
    }
    if next.vel != a.vel {
        next.heading = next.vel[1].atan2(next.vel[0]);
    }
    next
}

const CATEGORY_SIZES: [[f32; 3]; N_CATEGORIES] = [
    [4.0, 1.8, 1.5],
    [6.0, 2.2, 2.6],
    [1.0, 1.0, 1.7],
    [2.0, 0.8, 1.5],
];

/// Generates a deterministic world of `frames` frames.
pub fn gen_world(seed: u64, cfg: &SceneConfig) -> Result<ToyWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // A straight run-up behind the start keeps the BEV grid covered at frame 0.
    let mut points = vec![[-40.0, 0.0], [0.0, 0.0]];
    let needed = cfg.frames as f32 * cfg.ego_speed + 80.0;
    let (mut heading, mut travelled) = (0.0f32, 0.0f32);
    while travelled < needed {
        if !cfg.straight {
            heading = (heading + rng.random_range(-0.25..0.25)).clamp(-0.8, 0.8);
        }
        let last = *points.last().unwrap();
        points.push([
            last[0] + 20.0 * heading.cos(),
            last[1] + 20.0 * heading.sin(),
        ]);
        travelled += 20.0;
    }
    let road = Road {
        points,
        width: cfg.road_width,
    };
    let start = 40.0;
    let ego: Vec<Pose2> = (0..cfg.frames)
        .map(|t| road.pose_at(start + t as f32 * cfg.ego_speed))
        .collect();

    let (mut lo, mut hi) = ([f32::INFINITY; 2], [f32::NEG_INFINITY; 2]);
    for p in &road.points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a] - 15.0);
            hi[a] = hi[a].max(p[a] + 15.0);
        }
    }
    let arena = Arena { min: lo, max: hi };

    let agents = (0..cfg.agents)
        .map(|_| {
            let pose = road.pose_at(start + rng.random_range(6.0..35.0));
            let lateral = rng.random_range(-0.35..0.35) * cfg.road_width;
            let (s, c) = pose.heading.sin_cos();
            let category = rng.random_range(0..N_CATEGORIES as u8);
            let speed = if category == 2 {
                rng.random_range(-0.2..0.2)
            } else {
                cfg.ego_speed + rng.random_range(-0.4..0.3)
            };
            let [l, w, h] = CATEGORY_SIZES[category as usize];
            Agent {
                pos: [pose.pos[0] - s * lateral, pose.pos[1] + c * lateral],
                heading: pose.heading,
                size: [l, w],
                height: h,
                vel: [c * speed, s * speed],
                category,
            }
        })
        .collect::<Vec<_>>();

    let caption = vec![
        rng.random_range(0..4),
        4 + rng.random_range(0..4),
        8 + (cfg.agents * 4 / (cfg.max_boxes + 1)) as u32,
        12 + if cfg.straight {
            0
        } else {
            1 + rng.random_range(0..3)
        },
    ];
    ToyWorld::simulate(road, arena, agents, ego, caption)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_world() {
        let cfg = SceneConfig::default();
        assert_eq!(gen_world(7, &cfg).unwrap(), gen_world(7, &cfg).unwrap());
        assert_ne!(gen_world(7, &cfg).unwrap(), gen_world(8, &cfg).unwrap());
    }

    #[test]
    fn unit_velocity_advances_one_unit_per_frame() {
        let road = Road {
            points: vec![[0.0, 0.0], [100.0, 0.0]],
            width: 8.0,
        };
        let arena = Arena {
            min: [-100.0, -100.0],
            max: [100.0, 100.0],
        };
        let agent = Agent {
            pos: [0.0, 2.0],
            heading: 0.0,
            size: [4.0, 2.0],
            height: 1.5,
            vel: [1.0, 0.0],
            category: 0,
        };
        let ego = vec![road.pose_at(0.0); 5];
        let w = ToyWorld::simulate(road, arena, vec![agent], ego, vec![0; 4]).unwrap();
        for t in 0..5 {
            assert_eq!(w.agents[t][0].pos, [t as f32, 2.0]);
        }
    }

    #[test]
    fn single_frame_world_starts_at_road_origin() {
        let cfg = SceneConfig {
            frames: 1,
            ..Default::default()
        };
        let w = gen_world(1, &cfg).unwrap();
        assert_eq!(w.ego.len(), 1);
        assert_eq!(w.ego[0].pos, [0.0, 0.0]);
        assert_eq!(w.ego[0].heading, 0.0);
    }

    #[test]
    fn agents_stay_inside_arena() {
        let cfg = SceneConfig {
            frames: 200,
            ..Default::default()
        };
        let w = gen_world(3, &cfg).unwrap();
        for frame in &w.agents {
            for a in frame {
                for ax in 0..2 {
                    assert!(a.pos[ax] >= w.arena.min[ax] && a.pos[ax] <= w.arena.max[ax]);
                }
            }
        }
    }

    #[test]
    fn too_many_agents_is_a_contract_violation() {
        let cfg = SceneConfig {
            agents: 9,
            ..Default::default()
        };
        assert!(gen_world(0, &cfg).is_err());
    }

    #[test]
    fn caption_tokens_are_in_vocabulary() {
        let w = gen_world(11, &SceneConfig::default()).unwrap();
        assert_eq!(w.caption.len(), CAPTION_LEN);
        assert!(w.caption.iter().all(|&c| (c as usize) < VOCAB_SIZE));
    }
}
