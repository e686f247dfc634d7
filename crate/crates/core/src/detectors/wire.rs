//! Line-delimited JSON protocol for out-of-process detectors (version 1).
//!
//! ```text
//! toolkit  -> {"hello": 1}
//! detector -> {"hello": 1, "name": "..."}
//! toolkit  -> {"id": 0, "shape": [C, H, W], "pixels": "<base64 f32 LE, C-order>"}
//! detector -> {"id": 0, "p_real": 0.42}
//! ```
//!
//! One message per line. Responses may come back in any order; ids pair
//! them with requests. A request the detector cannot handle is answered with
//! `{"id": .., "error": "..."}` and the session continues.

use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::Detector;
use crate::tensor::{ImageTensor, Shape};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hello {
    pub hello: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub id: u64,
    pub shape: [usize; 3],
    pub pixels: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum Response {
    Score { id: u64, p_real: f64 },
    Error { id: Option<u64>, error: String },
}

impl Request {
    pub fn encode(id: u64, image: &ImageTensor) -> Self {
        Request {
            id,
            shape: image.shape().as_array(),
            pixels: B64.encode(image.to_le_bytes()),
        }
    }

    pub fn decode_image(&self) -> Result<ImageTensor> {
        let shape = Shape::new(self.shape[0], self.shape[1], self.shape[2]);
        let bytes = B64
            .decode(self.pixels.as_bytes())
            .map_err(|e| Error::config(format!("pixels are not valid base64: {e}")))?;
        ImageTensor::from_le_bytes(shape, &bytes)
    }
}

/// Counters reported when a serving session ends.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub requests: u64,
    pub errors: u64,
}

fn write_json<W: Write, T: Serialize>(out: &mut W, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    out.flush()
}

/// Serve `detector` over the wire protocol until end of input.
pub fn serve<R: BufRead, W: Write>(
    detector: &dyn Detector,
    input: R,
    mut output: W,
) -> std::io::Result<ServeStats> {
    let mut stats = ServeStats::default();
    for line in input.lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(trimmed) {
            Ok(v) => v,
            Err(e) => {
                stats.errors += 1;
                write_json(
                    &mut output,
                    &Response::Error {
                        id: None,
                        error: format!("malformed JSON: {e}"),
                    },
                )?;
                continue;
            }
        };
        if value.get("hello").is_some() {
            let reply = match value.get("hello").and_then(|v| v.as_u64()) {
                Some(v) if v == PROTOCOL_VERSION as u64 => serde_json::json!({
                    "hello": PROTOCOL_VERSION,
                    "name": detector.name(),
                }),
                other => serde_json::json!({
                    "hello": PROTOCOL_VERSION,
                    "name": detector.name(),
                    "error": format!("unsupported protocol version {other:?}"),
                }),
            };
            write_json(&mut output, &reply)?;
            continue;
        }
        stats.requests += 1;
        let id = value.get("id").and_then(|v| v.as_u64());
        let response = match serde_json::from_value::<Request>(value) {
            Ok(req) => match req
                .decode_image()
                .and_then(|img| detector.score_batch(std::slice::from_ref(&img)))
            {
                Ok(scores) if scores.len() == 1 => Response::Score {
                    id: req.id,
                    p_real: scores[0],
                },
                Ok(_) => Response::Error {
                    id: Some(req.id),
                    error: "detector returned a wrong number of scores".into(),
                },
                Err(e) => Response::Error {
                    id: Some(req.id),
                    error: e.to_string(),
                },
            },
            Err(e) => Response::Error {
                id,
                error: format!("malformed request: {e}"),
            },
        };
        if matches!(response, Response::Error { .. }) {
            stats.errors += 1;
        }
        write_json(&mut output, &response)?;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::MeanIntensityDetector;

    #[test]
    fn serve_handles_hello_requests_and_garbage() {
        let img = ImageTensor::new(Shape::new(1, 1, 4), vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let req = serde_json::to_string(&Request::encode(7, &img)).unwrap();
        let input = format!(
            "{{\"hello\": 1}}\n{req}\nnot json\n{{\"id\": 9, \"shape\": [1,1,4], \"pixels\": \"!!\"}}\n"
        );
        let mut out = Vec::new();
        let stats = serve(&MeanIntensityDetector, input.as_bytes(), &mut out).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0]["hello"], 1);
        assert_eq!(lines[0]["name"], "mean-intensity");
        assert_eq!(lines[1]["id"], 7);
        assert!((lines[1]["p_real"].as_f64().unwrap() - 0.4375).abs() < 1e-12);
        assert!(lines[2]["error"].is_string());
        assert_eq!(lines[3]["id"], 9);
        assert!(lines[3]["error"].is_string());
        assert_eq!(stats.errors, 2);
    }

    #[test]
    fn request_round_trip_is_lossless() {
        let data: Vec<f32> = (0..27).map(|i| (i as f32 * 0.037) % 1.0).collect();
        let img = ImageTensor::new(Shape::new(3, 3, 3), data).unwrap();
        let back = Request::encode(1, &img).decode_image().unwrap();
        assert_eq!(back, img);
    }
}
