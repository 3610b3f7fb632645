//! Newline-delimited JSON over a child's stdin/stdout.
//!
//! Requests (every one carries a numeric `id`, echoed in the response):
//!
//! ```text
//! {"id":1,"op":"segment","frame":3,"width":W,"height":H,"image":"...","prompt":7,"points":[[u,v],...]}
//!   -> {"id":1,"mask_rle":"0 12 4 ...","width":W,"height":H}     ("mask_rle": null for no mask)
//! {"id":2,"op":"tag","frame":3,"width":W,"height":H,"image":"..."}
//!   -> {"id":2,"tags":["chair",...]}
//! {"id":3,"op":"embed_image","frame":3,"width":W,"height":H,"image":"...","prompt":7,
//!  "box":[x0,y0,x1,y1],"mask_rle":"..."}
//!   -> {"id":3,"vector":[...]}                                    ("vector": null for none)
//! {"id":4,"op":"embed_text","texts":["chair"]}
//!   -> {"id":4,"vectors":[[...]]}
//! ```
//!
//! A response with an `"error"` string fails that call.

use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, FrameRef};
use crate::error::{Error, Result};
use crate::mask::{CropBox, Mask2d};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

const STDERR_KEEP: usize = 4096;

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    stderr: Arc<Mutex<String>>,
}

impl Worker {
    fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut stderr_pipe = child.stderr.take().expect("piped stderr");

        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let stderr = Arc::new(Mutex::new(String::new()));
        let sink = Arc::clone(&stderr);
        thread::spawn(move || {
            let mut buf = [0u8; 1024];
            while let Ok(n) = stderr_pipe.read(&mut buf) {
                if n == 0 {
                    break;
                }
                let mut s = sink.lock().expect("stderr lock");
                s.push_str(&String::from_utf8_lossy(&buf[..n]));
                if s.len() > STDERR_KEEP {
                    let mut cut = s.len() - STDERR_KEEP;
                    while !s.is_char_boundary(cut) {
                        cut += 1;
                    }
                    s.drain(..cut);
                }
            }
        });
        Ok(Worker {
            child,
            stdin,
            lines: rx,
            stderr,
        })
    }

    fn diagnostics(&self) -> String {
        let s = self.stderr.lock().expect("stderr lock");
        let s = s.trim();
        if s.is_empty() {
            String::new()
        } else {
            format!("; stderr: {s}")
        }
    }

    fn exchange(&mut self, line: &str, timeout: Duration) -> Result<String> {
        let sent = writeln!(self.stdin, "{line}").and_then(|_| self.stdin.flush());
        if let Err(e) = sent {
            let status = self.child.wait().ok();
            return Err(Error::Backend(format!(
                "cannot write to worker ({e}), exit status {status:?}{}",
                self.diagnostics()
            )));
        }
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(reply)) => Ok(reply),
            Ok(Err(e)) => Err(Error::Backend(format!("reading worker output: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                let _ = self.child.kill();
                let _ = self.child.wait();
                Err(Error::Backend(format!(
                    "worker timed out after {:.1}s{}",
                    timeout.as_secs_f64(),
                    self.diagnostics()
                )))
            }
            Err(RecvTimeoutError::Disconnected) => {
                let status = self.child.wait();
                // let the stderr reader drain before reporting
                thread::sleep(Duration::from_millis(20));
                Err(Error::Backend(format!(
                    "worker exited mid-call ({}){}",
                    status.map_or_else(|e| e.to_string(), |s| s.to_string()),
                    self.diagnostics()
                )))
            }
        }
    }

    fn shutdown(mut self) {
        drop(self.stdin);
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A pool of child processes speaking the protocol above. Each child handles
/// one request at a time.
pub struct SubprocessBackend {
    command: String,
    idle: Mutex<Vec<Worker>>,
    ready: Condvar,
    alive: AtomicUsize,
    next_id: AtomicU64,
    timeout: Duration,
}

impl SubprocessBackend {
    pub fn spawn(command: &str, workers: usize, timeout: Duration) -> Result<Self> {
        let workers = workers.max(1);
        let pool = (0..workers)
            .map(|_| Worker::spawn(command))
            .collect::<Result<Vec<_>>>()?;
        Ok(SubprocessBackend {
            command: command.to_string(),
            idle: Mutex::new(pool),
            ready: Condvar::new(),
            alive: AtomicUsize::new(workers),
            next_id: AtomicU64::new(1),
            timeout,
        })
    }

    fn acquire(&self) -> Result<Worker> {
        let mut idle = self.idle.lock().expect("pool lock");
        loop {
            if let Some(w) = idle.pop() {
                return Ok(w);
            }
            if self.alive.load(Ordering::SeqCst) == 0 {
                return Err(Error::Backend(format!(
                    "no live workers left for {:?}",
                    self.command
                )));
            }
            idle = self.ready.wait(idle).expect("pool lock");
        }
    }

    fn release(&self, worker: Worker) {
        self.idle.lock().expect("pool lock").push(worker);
        self.ready.notify_one();
    }

    fn retire(&self, worker: Worker) {
        worker.shutdown();
        self.alive.fetch_sub(1, Ordering::SeqCst);
        self.ready.notify_all();
    }

    /// Sends one request and returns the response object.
    pub fn call(&self, mut request: Value) -> Result<Value> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        request["id"] = json!(id);
        let line = request.to_string();
        let mut worker = self.acquire()?;
        let reply = match worker.exchange(&line, self.timeout) {
            Ok(r) => r,
            Err(e) => {
                self.retire(worker);
                return Err(e);
            }
        };
        let response: Value = match serde_json::from_str(&reply) {
            Ok(v) => v,
            Err(e) => {
                let diag = worker.diagnostics();
                self.retire(worker);
                return Err(Error::Backend(format!(
                    "malformed response {reply:?}: {e}{diag}"
                )));
            }
        };
        if response.get("id").and_then(Value::as_u64) != Some(id) {
            self.retire(worker);
            return Err(Error::Backend(format!(
                "response id mismatch: sent {id}, got {reply}"
            )));
        }
        self.release(worker);
        if let Some(msg) = response.get("error") {
            return Err(Error::Backend(format!(
                "worker reported: {}",
                msg.as_str().unwrap_or(&msg.to_string())
            )));
        }
        Ok(response)
    }
}

impl Drop for SubprocessBackend {
    fn drop(&mut self) {
        if let Ok(mut idle) = self.idle.lock() {
            for w in idle.drain(..) {
                w.shutdown();
            }
        }
    }
}

fn frame_fields(frame: FrameRef<'_>) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("frame".into(), json!(frame.frame_id));
    m.insert("width".into(), json!(frame.width));
    m.insert("height".into(), json!(frame.height));
    m.insert("image".into(), json!(frame.image));
    m
}

fn field<'a>(v: &'a Value, name: &str) -> Result<&'a Value> {
    v.get(name)
        .ok_or_else(|| Error::Backend(format!("response lacks field {name:?}")))
}

fn as_vector(v: &Value, what: &str) -> Result<Vec<f32>> {
    v.as_array()
        .ok_or_else(|| Error::Backend(format!("{what} is not an array")))?
        .iter()
        .map(|x| {
            x.as_f64()
                .map(|f| f as f32)
                .ok_or_else(|| Error::Backend(format!("{what} holds a non-number")))
        })
        .collect()
}

fn as_usize(v: &Value, name: &str) -> Result<usize> {
    field(v, name)?
        .as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::Backend(format!("field {name:?} is not a non-negative integer")))
}

impl Backend for SubprocessBackend {
    fn segment(
        &self,
        frame: FrameRef<'_>,
        prompt_id: usize,
        pixels: &[(usize, usize)],
    ) -> Result<Option<Mask2d>> {
        let mut req = frame_fields(frame);
        req.insert("op".into(), json!("segment"));
        req.insert("prompt".into(), json!(prompt_id));
        let points: Vec<[usize; 2]> = pixels.iter().map(|&(u, v)| [u, v]).collect();
        req.insert("points".into(), json!(points));
        let resp = self.call(Value::Object(req))?;
        let rle = field(&resp, "mask_rle")?;
        if rle.is_null() {
            return Ok(None);
        }
        let text = rle
            .as_str()
            .ok_or_else(|| Error::Backend("mask_rle is not a string".into()))?;
        let (w, h) = (as_usize(&resp, "width")?, as_usize(&resp, "height")?);
        Mask2d::from_rle_str(w, h, text)
            .map(Some)
            .map_err(|e| Error::Backend(format!("segment response: {e}")))
    }

    fn tag(&self, frame: FrameRef<'_>) -> Result<Vec<String>> {
        let mut req = frame_fields(frame);
        req.insert("op".into(), json!("tag"));
        let resp = self.call(Value::Object(req))?;
        serde_json::from_value(field(&resp, "tags")?.clone())
            .map_err(|e| Error::Backend(format!("tags: {e}")))
    }

    fn embed_crop(
        &self,
        frame: FrameRef<'_>,
        prompt_id: usize,
        crop: CropBox,
        mask: &Mask2d,
    ) -> Result<Option<Vec<f32>>> {
        let mut req = frame_fields(frame);
        req.insert("op".into(), json!("embed_image"));
        req.insert("prompt".into(), json!(prompt_id));
        req.insert("box".into(), json!([crop.x0, crop.y0, crop.x1, crop.y1]));
        req.insert("mask_rle".into(), json!(mask.to_rle_string()));
        let resp = self.call(Value::Object(req))?;
        let v = field(&resp, "vector")?;
        if v.is_null() {
            return Ok(None);
        }
        as_vector(v, "vector").map(Some)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let resp = self.call(json!({"op": "embed_text", "texts": texts}))?;
        field(&resp, "vectors")?
            .as_array()
            .ok_or_else(|| Error::Backend("vectors is not an array".into()))?
            .iter()
            .map(|row| as_vector(row, "vectors row"))
            .collect()
    }
}

fn handle(backend: &dyn Backend, req: &Value) -> Result<Value> {
    let op = req
        .get("op")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::InvalidArgument("request lacks \"op\"".into()))?;
    let image = req.get("image").and_then(Value::as_str).unwrap_or("");
    let frame = || -> Result<FrameRef<'_>> {
        Ok(FrameRef {
            frame_id: as_usize(req, "frame")? as u32,
            width: as_usize(req, "width")?,
            height: as_usize(req, "height")?,
            image,
        })
    };
    match op {
        "segment" => {
            let f = frame()?;
            let points: Vec<(usize, usize)> =
                serde_json::from_value::<Vec<[usize; 2]>>(field(req, "points")?.clone())
                    .map_err(|e| Error::InvalidArgument(format!("points: {e}")))?
                    .into_iter()
                    .map(|[u, v]| (u, v))
                    .collect();
            match backend.segment(f, as_usize(req, "prompt")?, &points)? {
                Some(m) => Ok(json!({
                    "mask_rle": m.to_rle_string(),
                    "width": m.width(),
                    "height": m.height(),
                })),
                None => Ok(json!({"mask_rle": null})),
            }
        }
        "tag" => Ok(json!({"tags": backend.tag(frame()?)?})),
        "embed_image" => {
            let f = frame()?;
            let b: [usize; 4] = serde_json::from_value(field(req, "box")?.clone())
                .map_err(|e| Error::InvalidArgument(format!("box: {e}")))?;
            let crop = CropBox {
                x0: b[0],
                y0: b[1],
                x1: b[2],
                y1: b[3],
            };
            let rle = field(req, "mask_rle")?.as_str().unwrap_or("");
            let mask = Mask2d::from_rle_str(f.width, f.height, rle)?;
            let v = backend.embed_crop(f, as_usize(req, "prompt")?, crop, &mask)?;
            Ok(json!({ "vector": v }))
        }
        "embed_text" => {
            let texts: Vec<String> = serde_json::from_value(field(req, "texts")?.clone())
                .map_err(|e| Error::InvalidArgument(format!("texts: {e}")))?;
            Ok(json!({"vectors": backend.embed_texts(&texts)?}))
        }
        other => Err(Error::InvalidArgument(format!("unknown op {other:?}"))),
    }
}

/// Answers protocol requests from `input` with `backend` until end of input.
pub fn serve(backend: &dyn Backend, input: impl BufRead, mut output: impl Write) -> Result<()> {
    let out_err = |e: std::io::Error| Error::Backend(format!("writing response: {e}"));
    for line in input.lines() {
        let line = line.map_err(|e| Error::Backend(format!("reading request: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, result) = match serde_json::from_str::<Value>(&line) {
            Ok(req) => (req.get("id").cloned().unwrap_or(Value::Null), handle(backend, &req)),
            Err(e) => (Value::Null, Err(Error::InvalidArgument(format!("bad request: {e}")))),
        };
        let mut resp = match result {
            Ok(v) => v,
            Err(e) => json!({"error": e.to_string()}),
        };
        resp["id"] = id;
        writeln!(output, "{resp}").map_err(out_err)?;
        output.flush().map_err(out_err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{FixtureData, FixtureStore};

    const ECHO_ID: &str = r#"sed -n 's/.*"id":\([0-9]*\).*/\1/p'"#;

    fn script(body: &str) -> String {
        format!("while read -r l; do id=$(echo \"$l\" | {ECHO_ID}); {body}; done")
    }

    #[test]
    fn embed_text_round_trip() {
        let b = SubprocessBackend::spawn(
            &script(r#"echo "{\"id\":$id,\"vectors\":[[3,4]]}""#),
            1,
            DEFAULT_TIMEOUT,
        )
        .unwrap();
        let v = b.embed_texts(&["chair".into()]).unwrap();
        assert_eq!(v, vec![vec![3.0, 4.0]]);
        // the pool keeps serving
        assert_eq!(b.embed_texts(&["x".into()]).unwrap().len(), 1);
    }

    #[test]
    fn segment_shape() {
        let b = SubprocessBackend::spawn(
            &script(r#"echo "{\"id\":$id,\"mask_rle\":\"1 3\",\"width\":2,\"height\":2}""#),
            2,
            DEFAULT_TIMEOUT,
        )
        .unwrap();
        let f = FrameRef { frame_id: 3, width: 2, height: 2, image: "img.png" };
        let m = b.segment(f, 0, &[(10, 12)]).unwrap().unwrap();
        assert_eq!(m.as_slice(), &[false, true, true, true]);
    }

    #[test]
    fn child_exit_is_reported_with_stderr() {
        let b = SubprocessBackend::spawn("read l; echo dying >&2; exit 3", 1, DEFAULT_TIMEOUT)
            .unwrap();
        let err = b.embed_texts(&["a".into()]).unwrap_err().to_string();
        assert!(err.contains("exited"), "{err}");
        assert!(err.contains("dying"), "{err}");
        // the only worker is gone
        assert!(b.embed_texts(&["a".into()]).is_err());
    }

    #[test]
    fn timeout_kills_the_call() {
        let b = SubprocessBackend::spawn("read l; sleep 5", 1, Duration::from_millis(200)).unwrap();
        let err = b.embed_texts(&["a".into()]).unwrap_err().to_string();
        assert!(err.contains("timed out"), "{err}");
    }

    #[test]
    fn malformed_and_error_responses() {
        let b = SubprocessBackend::spawn("read l; echo not-json", 1, DEFAULT_TIMEOUT).unwrap();
        let err = b.embed_texts(&["a".into()]).unwrap_err().to_string();
        assert!(err.contains("malformed"), "{err}");

        let b = SubprocessBackend::spawn(
            &script(r#"echo "{\"id\":$id,\"error\":\"no gpu\"}""#),
            1,
            DEFAULT_TIMEOUT,
        )
        .unwrap();
        let err = b.embed_texts(&["a".into()]).unwrap_err().to_string();
        assert!(err.contains("no gpu"), "{err}");
    }

    #[test]
    fn serve_answers_from_a_fixture() {
        let mut data = FixtureData::default();
        let mut m = Mask2d::new(2, 2);
        m.set(1, 0, true);
        data.insert_mask(3, 7, &m);
        data.insert_tags(3, vec!["chair".into()]);
        data.insert_text_embedding("chair", vec![1.0, 0.0]);
        let store = FixtureStore::from_data(data);
        let input = concat!(
            r#"{"id":1,"op":"segment","frame":3,"width":2,"height":2,"image":"","prompt":7,"points":[[0,0]]}"#,
            "\n",
            r#"{"id":2,"op":"tag","frame":3,"width":2,"height":2}"#,
            "\n",
            r#"{"id":3,"op":"embed_text","texts":["chair","sofa"]}"#,
            "\n",
            r#"{"id":4,"op":"segment","frame":3,"width":2,"height":2,"prompt":8,"points":[]}"#,
            "\n",
        );
        let mut out = Vec::new();
        serve(&store, input.as_bytes(), &mut out).unwrap();
        let lines: Vec<Value> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines[0]["id"], 1);
        assert_eq!(lines[0]["mask_rle"], "1 1 2");
        assert_eq!(lines[1]["tags"], json!(["chair"]));
        assert!(lines[2]["error"].as_str().unwrap().contains("sofa"));
        assert_eq!(lines[2]["id"], 3);
        assert!(lines[3]["mask_rle"].is_null());
    }
}
