//! Scene records and their on-disk dataset format.
//!
//! A dataset directory holds `manifest.json` plus one `scene_XXXX.fars` file per scene:
//! magic `FARS`, u32 version, then a named-tensor table (see [`crate::tensorfile`]).

use std::fs;
use std::path::{Path, PathBuf};

use far_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::camera::CameraRig;
use super::controls::{
    canvases, controls_at, Bev, Box3, ControlState, BOX_FIELDS, CANVAS_CHANNELS, CANVAS_LEGEND,
};
use super::render::{render_controls, Palette};
use super::world::{gen_world, SceneConfig, CAPTION_LEN, VOCAB_SIZE};
use crate::error::{contract, io_err, FarError, Result};
use crate::tensorfile::{take_named, write_table, Reader};

pub const SCENE_MAGIC: &[u8; 4] = b"FARS";
pub const SCENE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    /// `[T, V, H, W, 3]` in `[0, 1]`.
    pub frames: Tensor,
    pub controls: Vec<ControlState>,
    /// `[T, V, H, W, 2]` in `{0, 1}`.
    pub canvases: Tensor,
}

impl SceneRecord {
    pub fn frames_len(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Images of frame `t`, `[V, H, W, 3]` flattened.
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frames.numel() / self.frames_len();
        &self.frames.data()[t * n..(t + 1) * n]
    }

    /// Canvases of frame `t`, `[V, H, W, 2]` flattened.
    pub fn canvas(&self, t: usize) -> &[f32] {
        let n = self.canvases.numel() / self.frames_len();
        &self.canvases.data()[t * n..(t + 1) * n]
    }
}

/// Renders every frame and canvas of one procedurally generated scene.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneRecord> {
    let world = gen_world(seed, cfg)?;
    let rig = CameraRig::from_config(cfg);
    let palette = Palette::from_caption(&world.caption);
    let (t_len, v, h, w) = (cfg.frames, cfg.views, cfg.height, cfg.width);
    let mut frames = Vec::with_capacity(t_len * v * h * w * 3);
    let mut canv = Vec::with_capacity(t_len * v * h * w * CANVAS_CHANNELS);
    let mut controls = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let cs = controls_at(&world, cfg, &rig, t);
        for view in 0..v {
            frames.extend(render_controls(&cs, view, h, w, &palette));
        }
        canv.extend(canvases(&cs, h, w));
        controls.push(cs);
    }
    Ok(SceneRecord {
        frames: Tensor::new(vec![t_len, v, h, w, 3], frames)?,
        controls,
        canvases: Tensor::new(vec![t_len, v, h, w, CANVAS_CHANNELS], canv)?,
    })
}

/// Seed of scene `index` within a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

pub fn generate_scenes(seed: u64, n: usize, cfg: &SceneConfig) -> Result<Vec<SceneRecord>> {
    (0..n)
        .map(|i| generate_scene(scene_seed(seed, i), cfg))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecInfo {
    pub patch: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub n_scenes: usize,
    pub frames: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub canvas_channels: usize,
    pub canvas_legend: Vec<String>,
    pub max_boxes: usize,
    pub bev_size: usize,
    pub bev_cell: f32,
    pub caption_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub codec: CodecInfo,
    pub scene_config: SceneConfig,
    pub scenes: Vec<String>,
}

impl Manifest {
    pub fn new(cfg: &SceneConfig, seed: u64, n_scenes: usize, codec: CodecInfo) -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            n_scenes,
            frames: cfg.frames,
            views: cfg.views,
            height: cfg.height,
            width: cfg.width,
            canvas_channels: CANVAS_CHANNELS,
            canvas_legend: CANVAS_LEGEND.iter().map(|s| s.to_string()).collect(),
            max_boxes: cfg.max_boxes,
            bev_size: cfg.bev_size,
            bev_cell: cfg.bev_cell,
            caption_len: CAPTION_LEN,
            vocab_size: VOCAB_SIZE,
            seed,
            codec,
            scene_config: cfg.clone(),
            scenes: (0..n_scenes)
                .map(|i| format!("scene_{i:04}.fars"))
                .collect(),
        }
    }

    fn expected_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (t, v, h, w) = (self.frames, self.views, self.height, self.width);
        vec![
            ("frames", vec![t, v, h, w, 3]),
            ("canvases", vec![t, v, h, w, self.canvas_channels]),
            ("cameras", vec![t, v, 3, 7]),
            ("boxes", vec![t, self.max_boxes, BOX_FIELDS]),
            ("box_mask", vec![t, self.max_boxes]),
            ("bev", vec![t, self.bev_size, self.bev_size, 2]),
            ("ego", vec![t, 4, 4]),
            ("caption", vec![t, self.caption_len]),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub scenes: Vec<SceneRecord>,
}

fn scene_bytes(rec: &SceneRecord) -> Result<Vec<u8>> {
    let t = rec.frames_len();
    let cs0 = &rec.controls[0];
    let (v, n, nb, l) = (
        cs0.views(),
        cs0.boxes.len(),
        cs0.bev.size,
        cs0.caption.len(),
    );
    let mut cameras = Vec::with_capacity(t * v * 21);
    let mut boxes = Vec::with_capacity(t * n * BOX_FIELDS);
    let (mut mask, mut bev, mut ego, mut caption) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for cs in &rec.controls {
        cameras.extend(cs.cameras.iter().flatten().flatten());
        boxes.extend(cs.boxes.iter().flat_map(Box3::to_row));
        mask.extend(cs.box_mask.iter().map(|&m| m as u8 as f32));
        bev.extend(&cs.bev.data);
        ego.extend(cs.ego.iter().flatten());
        caption.extend(cs.caption.iter().map(|&c| c as f32));
    }
    let cameras = Tensor::new(vec![t, v, 3, 7], cameras)?;
    let boxes = Tensor::new(vec![t, n, BOX_FIELDS], boxes)?;
    let mask = Tensor::new(vec![t, n], mask)?;
    let bev = Tensor::new(vec![t, nb, nb, 2], bev)?;
    let ego = Tensor::new(vec![t, 4, 4], ego)?;
    let caption = Tensor::new(vec![t, l], caption)?;
    let mut out = SCENE_MAGIC.to_vec();
    out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    write_table(
        &mut out,
        &[
            ("frames", &rec.frames),
            ("canvases", &rec.canvases),
            ("cameras", &cameras),
            ("boxes", &boxes),
            ("box_mask", &mask),
            ("bev", &bev),
            ("ego", &ego),
            ("caption", &caption),
        ],
    );
    Ok(out)
}

pub fn write_dataset(dir: &Path, manifest: &Manifest, scenes: &[SceneRecord]) -> Result<()> {
    if scenes.len() != manifest.scenes.len() {
        return contract(format!(
            "manifest lists {} scenes but {} were given",
            manifest.scenes.len(),
            scenes.len()
        ));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, rec) in manifest.scenes.iter().zip(scenes) {
        write_scene_file(&dir.join(name), rec)?;
    }
    write_manifest(dir, manifest)
}

/// Writes one scene file. Its directory needs a matching manifest to be read back.
pub fn write_scene_file(path: &Path, rec: &SceneRecord) -> Result<()> {
    fs::write(path, scene_bytes(rec)?).map_err(io_err(path))
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest).map_err(|source| FarError::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, json).map_err(io_err(&path))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|source| FarError::Json {
        path: path.clone(),
        source,
    })?;
    if m.version != MANIFEST_VERSION {
        return Err(FarError::Version {
            file: path,
            found: m.version,
            expected: MANIFEST_VERSION,
        });
    }
    if m.scenes.len() != m.n_scenes {
        return Err(FarError::Format {
            file: path,
            msg: format!(
                "n_scenes is {} but {} scene files are listed",
                m.n_scenes,
                m.scenes.len()
            ),
        });
    }
    Ok(m)
}

/// Reads one scene file and checks every tensor against the manifest's shapes.
pub fn read_scene(path: &Path, manifest: &Manifest) -> Result<SceneRecord> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut r = Reader::new(&bytes, path);
    r.header(SCENE_MAGIC, SCENE_VERSION)?;
    let mut tensors = r.table()?;
    let mut get = |name: &'static str, shape: &[usize]| -> Result<Tensor> {
        let t = take_named(&mut tensors, name, path)?;
        if t.shape() != shape {
            return Err(FarError::ShapeDisagreement {
                file: path.to_path_buf(),
                tensor: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    };
    let shapes = manifest.expected_shapes();
    let mut loaded: Vec<Tensor> = Vec::with_capacity(shapes.len());
    for (name, shape) in &shapes {
        loaded.push(get(name, shape)?);
    }
    let [frames, canvases, cameras, boxes, mask, bev, ego, caption]: [Tensor; 8] =
        loaded.try_into().expect("eight tensors");

    let (t, v, n, nb) = (
        manifest.frames,
        manifest.views,
        manifest.max_boxes,
        manifest.bev_size,
    );
    let controls = (0..t)
        .map(|i| {
            let cam = &cameras.data()[i * v * 21..(i + 1) * v * 21];
            ControlState {
                cameras: cam
                    .chunks(21)
                    .map(|c| std::array::from_fn(|r| std::array::from_fn(|k| c[r * 7 + k])))
                    .collect(),
                boxes: boxes.data()[i * n * BOX_FIELDS..(i + 1) * n * BOX_FIELDS]
                    .chunks(BOX_FIELDS)
                    .map(Box3::from_row)
                    .collect(),
                box_mask: mask.data()[i * n..(i + 1) * n]
                    .iter()
                    .map(|&m| m != 0.0)
                    .collect(),
                bev: Bev {
                    size: nb,
                    cell: manifest.bev_cell,
                    data: bev.data()[i * nb * nb * 2..(i + 1) * nb * nb * 2].to_vec(),
                },
                ego: std::array::from_fn(|r| {
                    std::array::from_fn(|k| ego.data()[i * 16 + r * 4 + k])
                }),
                caption: caption.data()[i * manifest.caption_len..(i + 1) * manifest.caption_len]
                    .iter()
                    .map(|&c| c as u32)
                    .collect(),
            }
        })
        .collect();
    Ok(SceneRecord {
        frames,
        controls,
        canvases,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|name| read_scene(&dir.join(name), &manifest))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, scenes })
}

/// Reads a scene file using the `manifest.json` of the directory that holds it.
pub fn read_scene_file(path: &Path) -> Result<SceneRecord> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    read_scene(path, &read_manifest(dir)?)
}

/// Paths of the scene files listed in a dataset manifest.
pub fn scene_paths(dir: &Path, manifest: &Manifest) -> Vec<PathBuf> {
    manifest.scenes.iter().map(|s| dir.join(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig {
            frames: 3,
            height: 16,
            width: 16,
            ..Default::default()
        }
    }

    fn write_small(dir: &Path) -> (Manifest, Vec<SceneRecord>) {
        let cfg = small();
        let scenes = generate_scenes(9, 2, &cfg).unwrap();
        let m = Manifest::new(&cfg, 9, 2, CodecInfo { patch: 4, seed: 0 });
        write_dataset(dir, &m, &scenes).unwrap();
        (m, scenes)
    }

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (m, scenes) = write_small(dir.path());
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        assert_eq!(ds.scenes, scenes);
    }

    #[test]
    fn single_file_and_derived_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (m, scenes) = write_small(dir.path());
        let one = read_scene_file(&dir.path().join("scene_0001.fars")).unwrap();
        assert_eq!(one, scenes[1]);
        let out = dir.path().join("out");
        fs::create_dir_all(&out).unwrap();
        let mut m2 = m.clone();
        m2.scenes = vec!["renamed.fars".into()];
        m2.n_scenes = 1;
        write_scene_file(&out.join("renamed.fars"), &scenes[0]).unwrap();
        write_manifest(&out, &m2).unwrap();
        assert_eq!(read_dataset(&out).unwrap().scenes[0], scenes[0]);
        assert!(read_scene_file(&dir.path().join("missing").join("x.fars")).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small();
        let a = scene_bytes(&generate_scene(4, &cfg).unwrap()).unwrap();
        let b = scene_bytes(&generate_scene(4, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_magic_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_small(dir.path());
        let path = dir.path().join("scene_0001.fars");
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, FarError::Format { .. }), "{err}");
        assert!(err.to_string().contains("scene_0001.fars"), "{err}");
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        write_small(dir.path());
        let path = dir.path().join("scene_0000.fars");
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_dataset(dir.path()).unwrap_err(),
            FarError::Version { found: 9, .. }
        ));
    }

    #[test]
    fn truncated_file_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        write_small(dir.path());
        let path = dir.path().join("scene_0000.fars");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            read_dataset(dir.path()).unwrap_err(),
            FarError::Truncated { .. }
        ));
    }

    #[test]
    fn manifest_frame_count_disagreement() {
        let dir = tempfile::tempdir().unwrap();
        let (mut m, _) = write_small(dir.path());
        m.frames = 16;
        fs::write(
            dir.path().join("manifest.json"),
            serde_json::to_string(&m).unwrap(),
        )
        .unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        match err {
            FarError::ShapeDisagreement {
                expected, found, ..
            } => {
                assert_eq!(expected[0], 16);
                assert_eq!(found[0], 3);
            }
            other => panic!("unexpected {other}"),
        }
    }
}
