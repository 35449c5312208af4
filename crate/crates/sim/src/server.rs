//! The stepping server: one thread and one sampling session per connection, all sharing
//! read-only model weights.

use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Instant;

use far_core::codec::PatchCodec;
use far_core::model::{load_checkpoint, Model};
use far_core::rollout::{SamplerConfig, Session};
use far_core::scene::{generate_scene, ControlState, SceneConfig};

use crate::error::Result;
use crate::wire::{to_line, ClientMessage, ControlUpdate, ServerMessage, WireTensor};

/// Longest accepted request line in bytes unless configured otherwise.
pub const DEFAULT_MAX_LINE: usize = 16 << 20;

#[derive(Clone, Debug)]
pub struct ServerOptions {
    /// Sampler settings for sessions whose `init` does not override them.
    pub defaults: SamplerConfig,
    /// World settings used to derive initial controls from a scene seed. Views, resolution
    /// and box slots are taken from the model.
    pub scene: SceneConfig,
    pub max_line: usize,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions {
            defaults: SamplerConfig::default(),
            scene: SceneConfig::default(),
            max_line: DEFAULT_MAX_LINE,
        }
    }
}

struct Shared {
    model: Model,
    codec: PatchCodec,
    options: ServerOptions,
    next_id: AtomicU64,
}

/// A stepping server that can be bound to any number of listeners.
#[derive(Clone)]
pub struct Server {
    shared: Arc<Shared>,
}

impl Server {
    pub fn new(model: Model, codec: PatchCodec, mut options: ServerOptions) -> Self {
        options.scene.views = model.config.views;
        options.scene.height = model.config.image_height;
        options.scene.width = model.config.image_width;
        options.scene.max_boxes = model.config.max_boxes;
        options.scene.agents = options.scene.agents.min(model.config.max_boxes);
        Server {
            shared: Arc::new(Shared {
                model,
                codec,
                options,
                next_id: AtomicU64::new(1),
            }),
        }
    }

    pub fn from_checkpoint(path: &Path, options: ServerOptions) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        let codec = ckpt.codec()?;
        Ok(Server::new(ckpt.model, codec, options))
    }

    /// Accepts connections forever, one handler thread each.
    pub fn serve(&self, listener: TcpListener) -> Result<()> {
        for stream in listener.incoming() {
            let stream = stream?;
            let server = self.clone();
            thread::spawn(move || {
                // A dropped client is that client's problem; keep serving the rest.
                let _ = server.handle_stream(stream);
            });
        }
        Ok(())
    }

    /// Binds `addr` and serves on a background thread. Returns the bound address.
    pub fn spawn(self, addr: impl ToSocketAddrs) -> Result<(SocketAddr, JoinHandle<()>)> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let handle = thread::spawn(move || {
            let _ = self.serve(listener);
        });
        Ok((local, handle))
    }

    fn handle_stream(&self, stream: TcpStream) -> io::Result<()> {
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        self.handle(reader, BufWriter::new(stream))
    }

    /// Runs the protocol over any line reader and writer until the client closes, sends
    /// `close`, or a fatal error ends the session.
    pub fn handle(&self, mut reader: impl BufRead, mut writer: impl Write) -> io::Result<()> {
        let mut conn = Connection {
            shared: &self.shared,
            active: None,
        };
        loop {
            let reply = match read_line(&mut reader, self.shared.options.max_line)? {
                Line::Eof => return Ok(()),
                Line::TooLong(n) => error(
                    format!(
                        "payload of {n}+ bytes exceeds the {} byte bound",
                        self.shared.options.max_line
                    ),
                    false,
                ),
                Line::Text(text) => conn.dispatch(&text),
            };
            writeln!(writer, "{}", to_line(&reply))?;
            writer.flush()?;
            if matches!(
                reply,
                ServerMessage::Close | ServerMessage::Error { fatal: true, .. }
            ) {
                return Ok(());
            }
        }
    }
}

enum Line {
    Eof,
    Text(String),
    TooLong(usize),
}

/// Reads one `\n`-terminated line of at most `max` bytes. Longer lines are consumed and
/// reported by length.
fn read_line(r: &mut impl BufRead, max: usize) -> io::Result<Line> {
    let mut buf = Vec::new();
    let mut seen = 0usize;
    loop {
        let chunk = r.fill_buf()?;
        if chunk.is_empty() {
            if seen == 0 {
                return Ok(Line::Eof);
            }
            break;
        }
        let (take, done) = match chunk.iter().position(|&b| b == b'\n') {
            Some(i) => (i, true),
            None => (chunk.len(), false),
        };
        if seen + take <= max {
            buf.extend_from_slice(&chunk[..take]);
        }
        seen += take;
        r.consume(take + done as usize);
        if done {
            break;
        }
    }
    if seen > max {
        return Ok(Line::TooLong(seen));
    }
    if buf.last() == Some(&b'\r') {
        buf.pop();
    }
    Ok(Line::Text(String::from_utf8_lossy(&buf).into_owned()))
}

fn error(message: impl Into<String>, fatal: bool) -> ServerMessage {
    ServerMessage::Error {
        message: message.into(),
        fatal,
    }
}

struct Active<'m> {
    session: Session<'m>,
    control: ControlState,
    next_index: u64,
}

struct Connection<'m> {
    shared: &'m Shared,
    active: Option<Active<'m>>,
}

impl<'m> Connection<'m> {
    fn dispatch(&mut self, line: &str) -> ServerMessage {
        let msg: ClientMessage = match serde_json::from_str(line) {
            Ok(m) => m,
            Err(e) => return error(format!("malformed message: {e}"), false),
        };
        match msg {
            ClientMessage::Init {
                config,
                scene_seed,
                control,
                first_frame,
            } => self.init(config, scene_seed, control, first_frame),
            ClientMessage::Step {
                frame_index,
                control,
            } => self.step(frame_index, &control),
            ClientMessage::Close => ServerMessage::Close,
        }
    }

    fn init(
        &mut self,
        overrides: Option<serde_json::Value>,
        scene_seed: Option<u64>,
        control: Option<ControlState>,
        first_frame: Option<WireTensor>,
    ) -> ServerMessage {
        if self.active.is_some() {
            return error("session already initialized", false);
        }
        match self.start(overrides, scene_seed, control, first_frame) {
            Ok(active) => {
                let config = active.session.config().clone();
                self.active = Some(active);
                ServerMessage::Init {
                    session: self.shared.next_id.fetch_add(1, Ordering::Relaxed),
                    config,
                }
            }
            Err(msg) => error(msg, false),
        }
    }

    fn start(
        &self,
        overrides: Option<serde_json::Value>,
        scene_seed: Option<u64>,
        control: Option<ControlState>,
        first_frame: Option<WireTensor>,
    ) -> std::result::Result<Active<'m>, String> {
        let shared = self.shared;
        let cfg = &shared.model.config;
        let sampler = merge_config(&shared.options.defaults, overrides)?;
        let control = match (control, scene_seed) {
            (Some(cs), _) => cs,
            (None, Some(seed)) => {
                let scene_cfg = SceneConfig {
                    frames: 1,
                    ..shared.options.scene.clone()
                };
                let rec = generate_scene(seed, &scene_cfg).map_err(|e| e.to_string())?;
                rec.controls.into_iter().next().expect("one frame")
            }
            (None, None) => return Err("init needs either `control` or `scene_seed`".into()),
        };
        control.validate().map_err(|e| e.to_string())?;
        if control.views() != cfg.views {
            return Err(format!(
                "control has {} views, the model {}",
                control.views(),
                cfg.views
            ));
        }
        let mut session = Session::new(&shared.model, sampler).map_err(|e| e.to_string())?;
        if let Some(frame) = first_frame {
            let want = [cfg.views, cfg.image_height, cfg.image_width, 3];
            if frame.shape != want {
                return Err(format!(
                    "first_frame has shape {:?}, expected {want:?}",
                    frame.shape
                ));
            }
            let images = frame.values().map_err(|e| e.to_string())?;
            let latent = shared
                .codec
                .encode_tokens(&images, cfg.views, cfg.image_height, cfg.image_width)
                .map_err(|e| e.to_string())?;
            session
                .push_reference(latent, &control)
                .map_err(|e| e.to_string())?;
        }
        Ok(Active {
            session,
            control,
            next_index: 1,
        })
    }

    fn step(&mut self, frame_index: u64, update: &ControlUpdate) -> ServerMessage {
        let shared = self.shared;
        let Some(active) = self.active.as_mut() else {
            return error("step before init", false);
        };
        if frame_index != active.next_index {
            return error(
                format!(
                    "frame_index {frame_index} out of order, expected {}; session terminated",
                    active.next_index
                ),
                true,
            );
        }
        let control = update.apply(&active.control);
        if let Err(e) = control.validate() {
            return error(e.to_string(), false);
        }
        let cfg = &shared.model.config;
        let start = Instant::now();
        let images = active.session.sample_frame(&control).and_then(|z| {
            shared
                .codec
                .decode_tokens(&z, cfg.views, cfg.image_height, cfg.image_width)
        });
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        match images {
            Ok(images) => {
                active.control = control;
                active.next_index += 1;
                ServerMessage::Frame {
                    frame_index,
                    images: WireTensor::encode(&images),
                    latency_ms,
                }
            }
            Err(e) => error(e.to_string(), false),
        }
    }
}

/// Overlays the keys of `overrides` on `defaults`; unknown keys are rejected.
fn merge_config(
    defaults: &SamplerConfig,
    overrides: Option<serde_json::Value>,
) -> std::result::Result<SamplerConfig, String> {
    let Some(overrides) = overrides else {
        return Ok(defaults.clone());
    };
    let serde_json::Value::Object(over) = overrides else {
        return Err("`config` must be an object".into());
    };
    let mut base = serde_json::to_value(defaults).expect("sampler config serializes");
    let obj = base.as_object_mut().expect("sampler config is an object");
    obj.extend(over);
    let merged: SamplerConfig =
        serde_json::from_value(base).map_err(|e| format!("bad config: {e}"))?;
    merged.validate().map_err(|e| e.to_string())?;
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn line_reader_bounds_and_resyncs() {
        let mut r = Cursor::new(b"short\nthis line is too long\nok\r\n".to_vec());
        assert!(matches!(read_line(&mut r, 8).unwrap(), Line::Text(t) if t == "short"));
        assert!(matches!(read_line(&mut r, 8).unwrap(), Line::TooLong(21)));
        assert!(matches!(read_line(&mut r, 8).unwrap(), Line::Text(t) if t == "ok"));
        assert!(matches!(read_line(&mut r, 8).unwrap(), Line::Eof));
    }

    #[test]
    fn config_overrides_merge_over_defaults() {
        let d = SamplerConfig::default();
        let m = merge_config(&d, Some(serde_json::json!({"steps": 5, "seed": 9}))).unwrap();
        assert_eq!((m.steps, m.seed, m.kv_cache), (5, 9, d.kv_cache));
        assert!(merge_config(&d, Some(serde_json::json!({"stepz": 5}))).is_err());
        assert!(merge_config(&d, Some(serde_json::json!({"steps": 0}))).is_err());
        assert!(merge_config(&d, Some(serde_json::json!([1]))).is_err());
    }
}
