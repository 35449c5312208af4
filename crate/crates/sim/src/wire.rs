//! Newline-delimited JSON messages. Every message is one object on one line whose `type`
//! field is `init`, `step`, `frame`, `error` or `close`. Tensors travel as base64 of their
//! little-endian f32 values together with an explicit shape.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use far_core::rollout::SamplerConfig;
use far_core::scene::{Bev, Box3, ControlState};
use far_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireTensor {
    pub shape: Vec<usize>,
    /// Base64 of the little-endian f32 values in row-major order.
    pub data: String,
}

impl WireTensor {
    pub fn encode(t: &Tensor) -> Self {
        Self::from_values(t.shape().to_vec(), t.data())
    }

    pub fn from_values(shape: Vec<usize>, values: &[f32]) -> Self {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        WireTensor {
            shape,
            data: STANDARD.encode(bytes),
        }
    }

    pub fn values(&self) -> Result<Vec<f32>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| SimError::Payload(format!("invalid base64: {e}")))?;
        let expected: usize = self.shape.iter().product();
        if bytes.len() != expected * 4 {
            return Err(SimError::Payload(format!(
                "{} bytes for shape {:?}, expected {}",
                bytes.len(),
                self.shape,
                expected * 4
            )));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    pub fn decode(&self) -> Result<Tensor> {
        Ok(Tensor::new(self.shape.clone(), self.values()?).map_err(far_core::FarError::from)?)
    }
}

/// Fields of the control state that change from one frame to the next. Absent fields keep
/// their previous value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlUpdate {
    /// Ego pose relative to frame 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ego: Option<[[f32; 4]; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<Box3>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_mask: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bev: Option<Bev>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cameras: Option<Vec<[[f32; 7]; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<Vec<u32>>,
}

impl ControlUpdate {
    /// The update that turns any state into `cs` except for cameras and caption.
    pub fn dynamic(cs: &ControlState) -> Self {
        ControlUpdate {
            ego: Some(cs.ego),
            boxes: Some(cs.boxes.clone()),
            box_mask: Some(cs.box_mask.clone()),
            bev: Some(cs.bev.clone()),
            ..Default::default()
        }
    }

    pub fn apply(&self, cs: &ControlState) -> ControlState {
        let mut out = cs.clone();
        if let Some(e) = self.ego {
            out.ego = e;
        }
        if let Some(b) = &self.boxes {
            out.boxes = b.clone();
        }
        if let Some(m) = &self.box_mask {
            out.box_mask = m.clone();
        }
        if let Some(b) = &self.bev {
            out.bev = b.clone();
        }
        if let Some(c) = &self.cameras {
            out.cameras = c.clone();
        }
        if let Some(c) = &self.caption {
            out.caption = c.clone();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ClientMessage {
    Init {
        /// Sampler settings overriding the server defaults, e.g. `{"steps": 5, "seed": 3}`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        config: Option<serde_json::Value>,
        /// Scene whose frame-0 controls start the session when `control` is absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scene_seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        control: Option<ControlState>,
        /// Ground-truth images `[V, H, W, 3]` of frame 0; without them generation starts
        /// from the controls alone.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        first_frame: Option<WireTensor>,
    },
    Step {
        frame_index: u64,
        #[serde(default)]
        control: ControlUpdate,
    },
    Close,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMessage {
    Init {
        session: u64,
        config: SamplerConfig,
    },
    Frame {
        frame_index: u64,
        /// Decoded images `[V, H, W, 3]`.
        images: WireTensor,
        latency_ms: f64,
    },
    Error {
        message: String,
        /// The server closes the connection after a fatal error.
        fatal: bool,
    },
    Close,
}

/// One message as a line without the trailing newline.
pub fn to_line<T: Serialize>(msg: &T) -> String {
    serde_json::to_string(msg).expect("wire messages always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensors_round_trip_bit_exactly() {
        let values = [0.0, -0.0, 1.5, f32::MIN_POSITIVE, 1e-40, -3.25];
        let w = WireTensor::from_values(vec![2, 3], &values);
        let back = w.values().unwrap();
        assert!(values
            .iter()
            .zip(&back)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        // Little-endian 1.0 is 00 00 80 3f.
        assert_eq!(WireTensor::from_values(vec![1], &[1.0]).data, "AACAPw==");
    }

    #[test]
    fn payload_size_must_match_shape() {
        let mut w = WireTensor::from_values(vec![2], &[1.0, 2.0]);
        w.shape = vec![3];
        assert!(w.values().is_err());
        w.data = "***".into();
        assert!(w.values().is_err());
    }

    #[test]
    fn messages_carry_their_type_tag() {
        let line = to_line(&ClientMessage::Step {
            frame_index: 4,
            control: ControlUpdate::default(),
        });
        assert!(line.starts_with(r#"{"type":"step""#), "{line}");
        assert!(!line.contains('\n'));
        let back: ClientMessage = serde_json::from_str(&line).unwrap();
        assert!(matches!(back, ClientMessage::Step { frame_index: 4, .. }));
        assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"warp"}"#).is_err());
        assert_eq!(to_line(&ServerMessage::Close), r#"{"type":"close"}"#);
    }
}
