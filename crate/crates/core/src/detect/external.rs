//! Line-delimited JSON wire protocol for external black-box detectors,
//! spoken over a child-process pipe or a TCP stream.
//!
//! Request:  `{"id": n, "h": ..., "w": ..., "pixels": "<base64 of row-major
//! 8-bit grayscale>"}`
//! Response: `{"id": n, "detections": [{"x", "y", "w", "h", "objectness",
//! "class_score", "class_id"}]}`
//!
//! One response per request; unknown fields are ignored; a response whose id
//! does not match the request is a protocol error.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::transforms::BBox;

use super::Detection;

#[derive(Debug, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: u64,
    pub h: usize,
    pub w: usize,
    pub pixels: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassLabel {
    Text(String),
    Num(i64),
}

impl Default for ClassLabel {
    fn default() -> Self {
        ClassLabel::Text(super::PERSON_CLASS.to_string())
    }
}

impl ClassLabel {
    fn as_string(&self) -> String {
        match self {
            ClassLabel::Text(s) => s.clone(),
            ClassLabel::Num(n) => n.to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireDetection {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub objectness: f64,
    #[serde(default = "default_class_score")]
    pub class_score: f64,
    #[serde(default)]
    pub class_id: ClassLabel,
}

fn default_class_score() -> f64 {
    1.0
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: u64,
    pub detections: Vec<WireDetection>,
}

struct Transport {
    writer: Box<dyn Write + Send>,
    reader: BufReader<Box<dyn Read + Send>>,
    child: Option<Child>,
}

/// Client for a detector living in another process.
pub struct ExternalDetector {
    name: String,
    io: Mutex<Transport>,
    next_id: AtomicU64,
}

impl std::fmt::Debug for ExternalDetector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalDetector")
            .field("name", &self.name)
            .finish()
    }
}

impl ExternalDetector {
    pub fn from_command(name: &str, command: &[String]) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Config("external detector command is empty".into()));
        }
        let mut child = Command::new(&command[0])
            .args(&command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Transport {
                id: 0,
                msg: format!("spawn {:?}: {e}", command[0]),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self {
            name: name.to_string(),
            io: Mutex::new(Transport {
                writer: Box::new(stdin),
                reader: BufReader::new(Box::new(stdout)),
                child: Some(child),
            }),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn from_tcp(name: &str, addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::Transport {
            id: 0,
            msg: format!("connect {addr}: {e}"),
        })?;
        let reader = stream.try_clone().map_err(|e| Error::Transport {
            id: 0,
            msg: format!("clone stream: {e}"),
        })?;
        Ok(Self {
            name: name.to_string(),
            io: Mutex::new(Transport {
                writer: Box::new(stream),
                reader: BufReader::new(Box::new(reader)),
                child: None,
            }),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn detect(&self, image: &GrayImage) -> Result<Vec<Detection>> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let request = WireRequest {
            id,
            h: image.h(),
            w: image.w(),
            pixels: base64::engine::general_purpose::STANDARD.encode(image.to_u8()),
        };
        let line = serde_json::to_string(&request).expect("serializable request");
        let mut io = self.io.lock().expect("transport poisoned");
        io.writer
            .write_all(line.as_bytes())
            .and_then(|_| io.writer.write_all(b"\n"))
            .and_then(|_| io.writer.flush())
            .map_err(|e| Error::Transport {
                id,
                msg: format!("write request: {e}"),
            })?;
        let mut reply = String::new();
        let n = io.reader.read_line(&mut reply).map_err(|e| Error::Transport {
            id,
            msg: format!("read response: {e}"),
        })?;
        if n == 0 {
            return Err(Error::Transport {
                id,
                msg: "peer closed the connection".into(),
            });
        }
        let response: WireResponse = serde_json::from_str(reply.trim()).map_err(|e| {
            Error::Protocol(format!("malformed response for request {id}: {e}"))
        })?;
        if response.id != id {
            return Err(Error::Protocol(format!(
                "response id {} does not match request id {id}",
                response.id
            )));
        }
        let mut dets = Vec::with_capacity(response.detections.len());
        for d in response.detections {
            if !(0.0..=1.0).contains(&d.objectness) || !(0.0..=1.0).contains(&d.class_score) {
                return Err(Error::Protocol(format!(
                    "score outside [0, 1] in response {id}"
                )));
            }
            dets.push(Detection {
                box_: BBox::new(d.x, d.y, d.w, d.h),
                objectness: d.objectness,
                class_score: d.class_score,
                class_id: d.class_id.as_string(),
            });
        }
        dets.sort_by(|a, b| b.objectness.partial_cmp(&a.objectness).unwrap());
        Ok(dets)
    }
}

impl Drop for ExternalDetector {
    fn drop(&mut self) {
        if let Ok(mut io) = self.io.lock() {
            if let Some(child) = io.child.as_mut() {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }
}

/// Serve the wire protocol on a reader/writer pair: decode requests, score
/// them with `score`, answer until EOF. Usable for loopback tests and as
/// the server half of a scoring subprocess.
pub fn serve_adapter<R: Read, W: Write>(
    reader: R,
    mut writer: W,
    mut score: impl FnMut(usize, usize, &[u8]) -> Vec<WireDetection>,
) -> Result<()> {
    let reader = BufReader::new(reader);
    for line in reader.lines() {
        let line = line.map_err(|e| Error::Transport {
            id: 0,
            msg: format!("read request: {e}"),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let request: WireRequest = serde_json::from_str(&line)
            .map_err(|e| Error::Protocol(format!("malformed request: {e}")))?;
        let pixels = base64::engine::general_purpose::STANDARD
            .decode(&request.pixels)
            .map_err(|e| Error::Protocol(format!("bad base64 in request {}: {e}", request.id)))?;
        if pixels.len() != request.h * request.w {
            return Err(Error::Protocol(format!(
                "request {} pixel payload has {} bytes, expected {}",
                request.id,
                pixels.len(),
                request.h * request.w
            )));
        }
        let response = WireResponse {
            id: request.id,
            detections: score(request.h, request.w, &pixels),
        };
        let line = serde_json::to_string(&response).expect("serializable response");
        writer
            .write_all(line.as_bytes())
            .and_then(|_| writer.write_all(b"\n"))
            .and_then(|_| writer.flush())
            .map_err(|e| Error::Transport {
                id: request.id,
                msg: format!("write response: {e}"),
            })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;

    fn canned_reply() -> Vec<WireDetection> {
        vec![WireDetection {
            x: 12.0,
            y: 34.0,
            w: 56.0,
            h: 78.0,
            objectness: 0.875,
            class_score: 0.5,
            class_id: ClassLabel::Text("person".into()),
        }]
    }

    #[test]
    fn tcp_loopback_roundtrips_canned_reply() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let reader = stream.try_clone().unwrap();
            serve_adapter(reader, stream, |_, _, _| canned_reply()).unwrap();
        });
        let client = ExternalDetector::from_tcp("canned", &addr.to_string()).unwrap();
        let image = GrayImage::new(8, 8, 0.5).unwrap();
        let dets = client.detect(&image).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].box_, BBox::new(12.0, 34.0, 56.0, 78.0));
        assert_eq!(dets[0].objectness, 0.875);
        assert_eq!(dets[0].class_score, 0.5);
        assert_eq!(dets[0].class_id, "person");
        drop(client);
        server.join().unwrap();
    }

    #[test]
    fn unknown_fields_are_ignored_and_bad_id_rejected() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut writer = stream;
            let mut line = String::new();
            // first reply: extra fields, correct id
            reader.read_line(&mut line).unwrap();
            let req: WireRequest = serde_json::from_str(line.trim()).unwrap();
            writeln!(
                writer,
                "{{\"id\":{},\"detections\":[],\"extra\":\"ignored\"}}",
                req.id
            )
            .unwrap();
            // second reply: wrong id
            line.clear();
            reader.read_line(&mut line).unwrap();
            writeln!(writer, "{{\"id\":999999,\"detections\":[]}}").unwrap();
        });
        let client = ExternalDetector::from_tcp("canned", &addr.to_string()).unwrap();
        let image = GrayImage::new(4, 4, 0.25).unwrap();
        assert!(client.detect(&image).unwrap().is_empty());
        let err = client.detect(&image).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "got {err:?}");
        server.join().unwrap();
    }

    #[test]
    fn serve_rejects_truncated_payload() {
        let input = "{\"id\":1,\"h\":4,\"w\":4,\"pixels\":\"AAAA\"}\n";
        let mut out = Vec::new();
        let err = serve_adapter(input.as_bytes(), &mut out, |_, _, _| vec![]).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn request_pixels_are_row_major_u8() {
        let mut image = GrayImage::new(2, 2, 0.0).unwrap();
        image.set(0, 1, 1.0);
        image.set(1, 0, 100.0 / 255.0);
        let seen = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let reader = stream.try_clone().unwrap();
            serve_adapter(reader, stream, move |h, w, px| {
                seen2.lock().unwrap().push((h, w, px.to_vec()));
                vec![]
            })
            .unwrap();
        });
        let client = ExternalDetector::from_tcp("probe", &addr.to_string()).unwrap();
        client.detect(&image).unwrap();
        drop(client);
        server.join().unwrap();
        let seen = seen.lock().unwrap();
        assert_eq!(seen[0], (2, 2, vec![0, 255, 100, 0]));
    }
}
