//! A scripted client that drives a straight-road scene through the server, replaying the
//! scene's ground-truth controls as its actions.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use far_core::rollout::SamplerConfig;
use far_core::scene::{generate_scene, SceneConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::wire::{to_line, ClientMessage, ControlUpdate, ServerMessage, WireTensor};

/// Shift of the ego pose applied to one action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perturbation {
    /// The action taken after observing frame `step`, which conditions frame `step + 1`.
    pub step: usize,
    /// Lateral offset added to the ego translation.
    pub dy: f32,
}

#[derive(Clone, Debug)]
pub struct AgentOptions {
    /// World settings; views and resolution must match the server's model.
    pub scene: SceneConfig,
    /// Sampler overrides sent with `init`.
    pub sampler: Option<serde_json::Value>,
    /// Send the ground-truth frame 0 as the first reference.
    pub send_first_frame: bool,
    pub perturb: Option<Perturbation>,
    pub timeout: Duration,
}

impl Default for AgentOptions {
    fn default() -> Self {
        AgentOptions {
            scene: SceneConfig::default(),
            sampler: None,
            send_first_frame: true,
            perturb: None,
            timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: u64,
    pub images: WireTensor,
    /// Generation time reported by the server.
    pub latency_ms: f64,
    /// Send-to-receive time measured by the agent.
    pub round_trip_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub session: u64,
    pub config: SamplerConfig,
    pub frames: Vec<FrameRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub max_ms: f64,
    pub mean_round_trip_ms: f64,
}

impl Transcript {
    pub fn latency_stats(&self) -> Option<LatencyStats> {
        if self.frames.is_empty() {
            return None;
        }
        let n = self.frames.len() as f64;
        Some(LatencyStats {
            mean_ms: self.frames.iter().map(|f| f.latency_ms).sum::<f64>() / n,
            max_ms: self.frames.iter().map(|f| f.latency_ms).fold(0.0, f64::max),
            mean_round_trip_ms: self.frames.iter().map(|f| f.round_trip_ms).sum::<f64>() / n,
        })
    }
}

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn exchange(&mut self, step: usize, msg: &ClientMessage) -> Result<(ServerMessage, f64)> {
        let transport = |source| SimError::Transport { step, source };
        let start = Instant::now();
        writeln!(self.writer, "{}", to_line(msg)).map_err(transport)?;
        self.writer.flush().map_err(transport)?;
        let mut line = String::new();
        let n = self.reader.read_line(&mut line).map_err(transport)?;
        let rtt = start.elapsed().as_secs_f64() * 1e3;
        if n == 0 {
            return Err(transport(std::io::ErrorKind::UnexpectedEof.into()));
        }
        let reply: ServerMessage =
            serde_json::from_str(line.trim_end()).map_err(|e| SimError::Protocol {
                step,
                msg: format!("unreadable reply: {e}"),
            })?;
        if let ServerMessage::Error { message, .. } = reply {
            return Err(SimError::Server { step, message });
        }
        Ok((reply, rtt))
    }
}

/// Runs a closed-loop session of `n_steps` steps on a straight road generated from
/// `scenario_seed` and returns what the server sent back.
pub fn scripted_agent(
    addr: impl ToSocketAddrs,
    scenario_seed: u64,
    n_steps: usize,
    options: &AgentOptions,
) -> Result<Transcript> {
    let scene_cfg = SceneConfig {
        frames: n_steps + 1,
        straight: true,
        ..options.scene.clone()
    };
    let scene = generate_scene(scenario_seed, &scene_cfg)?;
    let stream =
        TcpStream::connect(addr).map_err(|source| SimError::Transport { step: 0, source })?;
    stream.set_read_timeout(Some(options.timeout))?;
    stream.set_write_timeout(Some(options.timeout))?;
    stream.set_nodelay(true)?;
    let mut client = Client {
        reader: BufReader::new(stream.try_clone()?),
        writer: stream,
    };

    let (v, h, w) = (scene_cfg.views, scene_cfg.height, scene_cfg.width);
    let init = ClientMessage::Init {
        config: options.sampler.clone(),
        scene_seed: None,
        control: Some(scene.controls[0].clone()),
        first_frame: options
            .send_first_frame
            .then(|| WireTensor::from_values(vec![v, h, w, 3], scene.frame(0))),
    };
    let (session, config) = match client.exchange(0, &init)? {
        (ServerMessage::Init { session, config }, _) => (session, config),
        (other, _) => {
            return Err(SimError::Protocol {
                step: 0,
                msg: format!("expected init acknowledgement, got {other:?}"),
            })
        }
    };

    let mut frames = Vec::with_capacity(n_steps);
    for k in 1..=n_steps {
        let mut control = ControlUpdate::dynamic(&scene.controls[k]);
        if let Some(p) = options.perturb.filter(|p| p.step + 1 == k) {
            let ego = control.ego.as_mut().expect("dynamic update sets ego");
            ego[1][3] += p.dy;
        }
        let msg = ClientMessage::Step {
            frame_index: k as u64,
            control,
        };
        let (reply, round_trip_ms) = client.exchange(k, &msg)?;
        let ServerMessage::Frame {
            frame_index,
            images,
            latency_ms,
        } = reply
        else {
            return Err(SimError::Protocol {
                step: k,
                msg: format!("expected a frame, got {reply:?}"),
            });
        };
        if frame_index != k as u64 || images.shape != [v, h, w, 3] {
            return Err(SimError::Protocol {
                step: k,
                msg: format!(
                    "frame {frame_index} with shape {:?} in reply to step {k}",
                    images.shape
                ),
            });
        }
        images.values().map_err(|e| SimError::Protocol {
            step: k,
            msg: e.to_string(),
        })?;
        frames.push(FrameRecord {
            frame_index,
            images,
            latency_ms,
            round_trip_ms,
        });
    }

    match client.exchange(n_steps + 1, &ClientMessage::Close)? {
        (ServerMessage::Close, _) => Ok(Transcript {
            session,
            config,
            frames,
        }),
        (other, _) => Err(SimError::Protocol {
            step: n_steps + 1,
            msg: format!("expected close, got {other:?}"),
        }),
    }
}
