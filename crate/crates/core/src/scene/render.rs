//! Flat-shaded rasterizer for toy camera views.

use super::camera::CameraRig;
use super::controls::{controls_at, pixel_on_road, rect_covers, ControlState};
use super::world::{SceneConfig, ToyWorld, N_CATEGORIES};

/// Road colour; no palette entry for sky, ground or agents comes near it.
pub const ROAD_COLOR: [f32; 3] = [0.55, 0.10, 0.60];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub sky: [f32; 3],
    pub ground: [f32; 3],
    pub agents: [[f32; 3]; N_CATEGORIES],
}

const SKIES: [[f32; 3]; 4] = [
    [0.45, 0.70, 0.95],
    [0.70, 0.75, 0.80],
    [0.55, 0.60, 0.70],
    [0.85, 0.85, 0.90],
];
const GROUNDS: [[f32; 3]; 4] = [
    [0.30, 0.55, 0.25],
    [0.45, 0.42, 0.30],
    [0.35, 0.40, 0.30],
    [0.60, 0.58, 0.50],
];
pub const AGENT_COLORS: [[f32; 3]; N_CATEGORIES] = [
    [0.90, 0.20, 0.10],
    [0.10, 0.30, 0.90],
    [0.95, 0.85, 0.10],
    [0.10, 0.85, 0.35],
];

impl Palette {
    /// Sky follows the weather token, ground the time-of-day token, and a dark time token
    /// dims both.
    pub fn from_caption(caption: &[u32]) -> Self {
        let weather = caption.first().copied().unwrap_or(0) as usize % 4;
        let time = caption.get(1).map_or(0, |&t| t as usize % 4);
        let dim = if time == 3 { 0.6 } else { 1.0 };
        Palette {
            sky: SKIES[weather].map(|c| c * dim),
            ground: GROUNDS[time].map(|c| c * dim),
            agents: AGENT_COLORS,
        }
    }
}

/// Renders view `view` of a control state into `[H, W, 3]`.
pub fn render_controls(
    cs: &ControlState,
    view: usize,
    height: usize,
    width: usize,
    palette: &Palette,
) -> Vec<f32> {
    let cam = cs.camera(view);
    let mut img = vec![0.0; height * width * 3];
    for i in 0..height {
        for j in 0..width {
            let below = cam.ray(j as f32 + 0.5, i as f32 + 0.5).z < -1e-6;
            let color = if pixel_on_road(cs, &cam, i, j) {
                ROAD_COLOR
            } else if below {
                palette.ground
            } else {
                palette.sky
            };
            img[(i * width + j) * 3..][..3].copy_from_slice(&color);
        }
    }
    // Painter's order: farthest box first.
    let mut boxes: Vec<_> = cs
        .valid_boxes()
        .filter_map(|b| {
            let depth = cam.project_ego(&b.center.into()).depth;
            b.screen_rect(&cam).map(|r| (depth, r, b.category))
        })
        .collect();
    boxes.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (_, rect, category) in boxes {
        let color = palette.agents[category as usize % N_CATEGORIES];
        let (j0, j1) = (
            rect[0].floor().max(0.0) as usize,
            (rect[1].ceil().max(0.0) as usize).min(width),
        );
        let (i0, i1) = (
            rect[2].floor().max(0.0) as usize,
            (rect[3].ceil().max(0.0) as usize).min(height),
        );
        for i in i0..i1 {
            for j in j0..j1 {
                if rect_covers(&rect, i, j) {
                    img[(i * width + j) * 3..][..3].copy_from_slice(&color);
                }
            }
        }
    }
    img
}

/// Renders camera `view` of `world` at frame `t`.
pub fn render_view(
    world: &ToyWorld,
    cfg: &SceneConfig,
    rig: &CameraRig,
    view: usize,
    t: usize,
) -> Vec<f32> {
    let cs = controls_at(world, cfg, rig, t);
    render_controls(
        &cs,
        view,
        rig.height,
        rig.width,
        &Palette::from_caption(&world.caption),
    )
}

/// Layout canvas `[H, W, 2]` of camera `view` of `world` at frame `t`.
pub fn project_layout(
    world: &ToyWorld,
    cfg: &SceneConfig,
    rig: &CameraRig,
    view: usize,
    t: usize,
) -> Vec<f32> {
    let cs = controls_at(world, cfg, rig, t);
    super::controls::canvas_view(&cs, view, rig.height, rig.width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::camera::project_point;
    use crate::scene::world::{gen_world, Agent, Arena, Pose2, Road};
    use nalgebra::Vector3;

    fn linf(a: &[f32], b: &[f32; 3]) -> f32 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn palette_stays_away_from_road_color() {
        for w in 0..4 {
            for t in 0..4 {
                let p = Palette::from_caption(&[w, 4 + t]);
                for c in [p.sky, p.ground].iter().chain(&p.agents) {
                    assert!(linf(c, &ROAD_COLOR) > 0.2, "{c:?}");
                }
            }
        }
    }

    #[test]
    fn empty_world_has_only_background_and_road() {
        let cfg = SceneConfig {
            agents: 0,
            ..Default::default()
        };
        let w = gen_world(2, &cfg).unwrap();
        let rig = CameraRig::from_config(&cfg);
        let pal = Palette::from_caption(&w.caption);
        let img = render_view(&w, &cfg, &rig, 1, 0);
        for px in img.chunks(3) {
            assert!([pal.sky, pal.ground, ROAD_COLOR]
                .iter()
                .any(|c| linf(px, c) == 0.0));
        }
        assert_eq!(img, render_view(&w, &cfg, &rig, 1, 0));
    }

    fn one_agent_world(ahead: f32) -> (ToyWorld, SceneConfig, CameraRig) {
        let cfg = SceneConfig {
            frames: 1,
            agents: 1,
            ..Default::default()
        };
        let road = Road {
            points: vec![[-50.0, 0.0], [200.0, 0.0]],
            width: 8.0,
        };
        let arena = Arena {
            min: [-100.0, -100.0],
            max: [300.0, 100.0],
        };
        let agent = Agent {
            pos: [ahead, 0.0],
            heading: 0.0,
            size: [4.0, 1.8],
            height: 1.5,
            vel: [0.0, 0.0],
            category: 1,
        };
        let ego = vec![Pose2 {
            pos: [0.0, 0.0],
            heading: 0.0,
        }];
        let w = ToyWorld::simulate(road, arena, vec![agent], ego, vec![0, 4, 8, 12]).unwrap();
        let rig = CameraRig::from_config(&cfg);
        (w, cfg, rig)
    }

    #[test]
    fn nearer_agent_covers_more_pixels() {
        let count = |ahead: f32| {
            let (w, cfg, rig) = one_agent_world(ahead);
            let img = render_view(&w, &cfg, &rig, 1, 0);
            img.chunks(3)
                .filter(|p| linf(p, &AGENT_COLORS[1]) == 0.0)
                .count()
        };
        let (near, far) = (count(8.0), count(16.0));
        assert!(far > 0 && near > far, "near {near} far {far}");
    }

    #[test]
    fn canvas_ignores_agent_colors() {
        let (w, cfg, rig) = one_agent_world(8.0);
        let cs = controls_at(&w, &cfg, &rig, 0);
        let mut pal = Palette::from_caption(&w.caption);
        let a = render_controls(&cs, 1, 32, 32, &pal);
        pal.agents = [[0.0, 0.0, 0.0]; N_CATEGORIES];
        let b = render_controls(&cs, 1, 32, 32, &pal);
        assert_ne!(a, b);
        assert_eq!(
            project_layout(&w, &cfg, &rig, 1, 0),
            project_layout(&w, &cfg, &rig, 1, 0)
        );
    }

    #[test]
    fn projected_agent_centres_land_in_their_rectangles() {
        let cfg = SceneConfig::default();
        let rig = CameraRig::from_config(&cfg);
        let mut checked = 0;
        for seed in 0..20 {
            let world = gen_world(seed, &cfg).unwrap();
            for t in 0..world.frames() {
                let cs = controls_at(&world, &cfg, &rig, t);
                let ego = super::super::camera::ego_matrix(&world.ego[t]);
                for (i, a) in world.agents[t].iter().enumerate() {
                    // Render this agent alone so occlusion cannot hide it.
                    let mut solo = cs.clone();
                    solo.box_mask = solo
                        .box_mask
                        .iter()
                        .enumerate()
                        .map(|(k, _)| k == i)
                        .collect();
                    for v in 0..cfg.views {
                        let cam = cs.camera(v);
                        let Some(rect) = cs.boxes[i].screen_rect(&cam) else {
                            continue;
                        };
                        let centre = Vector3::new(a.pos[0], a.pos[1], 0.5 * a.height);
                        let p = project_point(&centre, &cam, &ego);
                        let (j, r) = (p.u.floor(), p.v.floor());
                        assert!(p.in_front());
                        assert!(
                            p.u >= rect[0] && p.u <= rect[1] && p.v >= rect[2] && p.v <= rect[3]
                        );
                        if j < 0.0 || r < 0.0 || j >= 32.0 || r >= 32.0 {
                            continue;
                        }
                        // Rectangles thinner than a pixel may not cover the centre pixel.
                        if !rect_covers(&rect, r as usize, j as usize) {
                            continue;
                        }
                        let img = render_controls(
                            &solo,
                            v,
                            32,
                            32,
                            &Palette::from_caption(&world.caption),
                        );
                        let px = &img[((r as usize) * 32 + j as usize) * 3..][..3];
                        assert_eq!(
                            linf(px, &AGENT_COLORS[a.category as usize]),
                            0.0,
                            "seed {seed} t {t} agent {i}"
                        );
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 100, "only {checked} visible agent centres");
    }
}
