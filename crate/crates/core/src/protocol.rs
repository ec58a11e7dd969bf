//! Newline-delimited JSON protocol for reaching black-box predictors over TCP
//! or a child process's standard streams.
//!
//! Requests are `info`, `predict` and `predict_batch`; replies are `info`,
//! `prediction`, `prediction_batch` or `error`. Unknown fields are ignored.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Number;

use crate::data::Task;
use crate::error::{Error, Result};

pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    Info,
    Predict {
        x: Vec<f64>,
    },
    PredictBatch {
        #[serde(rename = "X")]
        xs: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Reply {
    Info {
        task: String,
        n_features: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_classes: Option<usize>,
    },
    Prediction {
        y: Number,
    },
    PredictionBatch {
        y: Vec<Number>,
    },
    Error {
        message: String,
    },
}

/// A predictor's output: a class index or a regression value in raw units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prediction {
    Class(usize),
    Value(f64),
}

impl Prediction {
    pub fn class(self) -> Option<usize> {
        match self {
            Prediction::Class(c) => Some(c),
            Prediction::Value(_) => None,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Prediction::Class(c) => c as f64,
            Prediction::Value(v) => v,
        }
    }

    fn to_number(self) -> Result<Number> {
        match self {
            Prediction::Class(c) => Ok(Number::from(c as u64)),
            Prediction::Value(v) => {
                Number::from_f64(v).ok_or_else(|| Error::NonFinite("prediction value".into()))
            }
        }
    }

    fn from_number(n: &Number, task: Task) -> Result<Self> {
        match task {
            Task::Classification { n_classes } => {
                let c = n.as_u64().ok_or_else(|| {
                    Error::Protocol(format!("class label {n} is not a non-negative integer"))
                })? as usize;
                if c >= n_classes {
                    return Err(Error::Protocol(format!(
                        "class label {c} out of range for {n_classes} classes"
                    )));
                }
                Ok(Prediction::Class(c))
            }
            Task::Regression => n
                .as_f64()
                .filter(|v| v.is_finite())
                .map(Prediction::Value)
                .ok_or_else(|| Error::Protocol(format!("regression value {n} is not finite"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub task: Task,
    pub n_features: usize,
}

impl ModelInfo {
    fn to_reply(self) -> Reply {
        match self.task {
            Task::Classification { n_classes } => Reply::Info {
                task: "classification".into(),
                n_features: self.n_features,
                n_classes: Some(n_classes),
            },
            Task::Regression => Reply::Info {
                task: "regression".into(),
                n_features: self.n_features,
                n_classes: None,
            },
        }
    }

    fn from_reply(reply: Reply) -> Result<Self> {
        match reply {
            Reply::Info {
                task,
                n_features,
                n_classes,
            } => {
                let task = match (task.as_str(), n_classes) {
                    ("classification", Some(k)) if k >= 2 => Task::Classification { n_classes: k },
                    ("classification", other) => {
                        return Err(Error::Protocol(format!(
                            "classification info needs n_classes >= 2, got {other:?}"
                        )))
                    }
                    ("regression", _) => Task::Regression,
                    (other, _) => return Err(Error::Protocol(format!("unknown task '{other}'"))),
                };
                if n_features == 0 {
                    return Err(Error::Protocol("n_features must be positive".into()));
                }
                Ok(ModelInfo { task, n_features })
            }
            Reply::Error { message } => Err(Error::Protocol(format!("server error: {message}"))),
            other => Err(Error::Protocol(format!(
                "expected info reply, got {other:?}"
            ))),
        }
    }
}

/// Anything that can answer protocol requests.
pub trait Model: Send + Sync {
    fn info(&self) -> ModelInfo;
    fn predict(&self, x: &[f64]) -> Result<Prediction>;

    fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<Prediction>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }
}

fn answer(model: &dyn Model, line: &str) -> Reply {
    let request: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            return Reply::Error {
                message: format!("bad request: {e}"),
            }
        }
    };
    let outcome = match request {
        Request::Info => Ok(model.info().to_reply()),
        Request::Predict { x } => model
            .predict(&x)
            .and_then(Prediction::to_number)
            .map(|y| Reply::Prediction { y }),
        Request::PredictBatch { xs } => model.predict_many(&xs).and_then(|ys| {
            ys.into_iter()
                .map(Prediction::to_number)
                .collect::<Result<Vec<_>>>()
                .map(|y| Reply::PredictionBatch { y })
        }),
    };
    outcome.unwrap_or_else(|e| Reply::Error {
        message: e.to_string(),
    })
}

/// Answers one request per line until the reader is exhausted. Malformed
/// lines get an error reply and the loop continues.
pub fn serve<R: BufRead, W: Write>(
    model: &dyn Model,
    reader: R,
    mut writer: W,
) -> std::io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = answer(model, &line);
        let text = serde_json::to_string(&reply).expect("replies always serialize");
        writer.write_all(text.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one handler thread per connection.
pub fn serve_tcp(listener: TcpListener, model: Arc<dyn Model>) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        // Replies are tiny; without this every round trip waits on delayed ACKs.
        let _ = stream.set_nodelay(true);
        let model = Arc::clone(&model);
        thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(_) => return,
            };
            let _ = serve(model.as_ref(), reader, stream);
        });
    }
    Ok(())
}

/// Client side of one connection; one request in flight at a time.
pub struct RemoteClient {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    child: Option<Child>,
    info: ModelInfo,
    pub request_timeout: Duration,
}

impl std::fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteClient")
            .field("info", &self.info)
            .finish_non_exhaustive()
    }
}

fn spawn_line_reader<R: Read + Send + 'static>(reader: R) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(reader).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                return;
            }
        }
    });
    rx
}

impl RemoteClient {
    pub fn connect_tcp(address: &str, handshake_timeout: Duration) -> Result<Self> {
        let addr = address
            .to_socket_addrs()
            .map_err(|e| Error::Transport(format!("cannot resolve {address}: {e}")))?
            .next()
            .ok_or_else(|| Error::Transport(format!("no address for {address}")))?;
        let stream = TcpStream::connect_timeout(&addr, handshake_timeout)
            .map_err(|e| Error::Transport(format!("connect to {address}: {e}")))?;
        let _ = stream.set_nodelay(true);
        let read_half = stream
            .try_clone()
            .map_err(|e| Error::Transport(format!("socket clone: {e}")))?;
        Self::handshake(
            Box::new(stream),
            spawn_line_reader(read_half),
            None,
            handshake_timeout,
        )
    }

    /// Launches `command` and talks to it over its stdin/stdout.
    pub fn spawn(command: &[String], handshake_timeout: Duration) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("empty predictor command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport(format!("cannot start '{program}': {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::handshake(
            Box::new(stdin),
            spawn_line_reader(stdout),
            Some(child),
            handshake_timeout,
        )
    }

    fn handshake(
        writer: Box<dyn Write + Send>,
        lines: Receiver<std::io::Result<String>>,
        child: Option<Child>,
        timeout: Duration,
    ) -> Result<Self> {
        let mut client = RemoteClient {
            writer,
            lines,
            child,
            info: ModelInfo {
                task: Task::Regression,
                n_features: 0,
            },
            request_timeout: timeout,
        };
        let reply = client.request(&Request::Info)?;
        client.info = ModelInfo::from_reply(reply)?;
        client.request_timeout = DEFAULT_REQUEST_TIMEOUT;
        Ok(client)
    }

    pub fn info(&self) -> ModelInfo {
        self.info
    }

    pub fn request(&mut self, request: &Request) -> Result<Reply> {
        let mut text = serde_json::to_string(request)?;
        text.push('\n');
        self.writer
            .write_all(text.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::Transport(format!("send failed: {e}")))?;
        let line = match self.lines.recv_timeout(self.request_timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(Error::Transport(format!("receive failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::Transport(format!(
                    "no reply within {:?}",
                    self.request_timeout
                )))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Transport("connection closed by predictor".into()))
            }
        };
        serde_json::from_str(&line)
            .map_err(|e| Error::Protocol(format!("malformed reply '{line}': {e}")))
    }

    pub fn predict(&mut self, x: &[f64]) -> Result<Prediction> {
        match self.request(&Request::Predict { x: x.to_vec() })? {
            Reply::Prediction { y } => Prediction::from_number(&y, self.info.task),
            Reply::Error { message } => Err(Error::Protocol(format!("server error: {message}"))),
            other => Err(Error::Protocol(format!(
                "expected prediction, got {other:?}"
            ))),
        }
    }

    pub fn predict_batch(&mut self, xs: Vec<Vec<f64>>) -> Result<Vec<Prediction>> {
        let n = xs.len();
        match self.request(&Request::PredictBatch { xs })? {
            Reply::PredictionBatch { y } if y.len() == n => y
                .iter()
                .map(|v| Prediction::from_number(v, self.info.task))
                .collect(),
            Reply::PredictionBatch { y } => Err(Error::Protocol(format!(
                "batch of {n} answered with {}",
                y.len()
            ))),
            Reply::Error { message } => Err(Error::Protocol(format!("server error: {message}"))),
            other => Err(Error::Protocol(format!(
                "expected prediction batch, got {other:?}"
            ))),
        }
    }

    /// Kills a spawned predictor process; subsequent requests fail with a
    /// transport error.
    pub fn kill_child(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Drop for RemoteClient {
    fn drop(&mut self) {
        self.kill_child();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed;

    impl Model for Fixed {
        fn info(&self) -> ModelInfo {
            ModelInfo {
                task: Task::Classification { n_classes: 2 },
                n_features: 3,
            }
        }

        fn predict(&self, x: &[f64]) -> Result<Prediction> {
            if x.len() != 3 {
                return Err(Error::Shape {
                    expected: 3,
                    got: x.len(),
                });
            }
            Ok(Prediction::Class(1))
        }
    }

    fn transcript(input: &str) -> Vec<serde_json::Value> {
        let mut out = Vec::new();
        serve(&Fixed, input.as_bytes(), &mut out).unwrap();
        String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn wire_shapes() {
        assert_eq!(
            serde_json::to_string(&Request::Info).unwrap(),
            r#"{"type":"info"}"#
        );
        assert_eq!(
            serde_json::to_string(&Request::PredictBatch {
                xs: vec![vec![0.5]]
            })
            .unwrap(),
            r#"{"type":"predict_batch","X":[[0.5]]}"#
        );
        let reg = ModelInfo {
            task: Task::Regression,
            n_features: 13,
        }
        .to_reply();
        assert_eq!(
            serde_json::to_string(&reg).unwrap(),
            r#"{"type":"info","task":"regression","n_features":13}"#
        );
    }

    #[test]
    fn server_answers_and_survives_bad_lines() {
        let replies = transcript(
            "{\"type\":\"info\",\"extra\":1}\nnot json\n{\"type\":\"bogus\"}\n{\"type\":\"predict\",\"x\":[0,0,0]}\n\
             {\"type\":\"predict\",\"x\":[0]}\n{\"type\":\"predict_batch\",\"X\":[[1,2,3],[4,5,6]]}\n",
        );
        assert_eq!(replies.len(), 6);
        assert_eq!(replies[0]["n_classes"], 2);
        assert_eq!(replies[1]["type"], "error");
        assert_eq!(replies[2]["type"], "error");
        assert_eq!(
            replies[3],
            serde_json::json!({"type": "prediction", "y": 1})
        );
        assert_eq!(replies[4]["type"], "error");
        assert_eq!(replies[5]["y"], serde_json::json!([1, 1]));
    }

    #[test]
    fn prediction_numbers_are_task_checked() {
        let cls = Task::Classification { n_classes: 2 };
        assert_eq!(
            Prediction::from_number(&Number::from(1), cls).unwrap(),
            Prediction::Class(1)
        );
        assert!(Prediction::from_number(&Number::from(2), cls).is_err());
        assert!(Prediction::from_number(&Number::from_f64(0.5).unwrap(), cls).is_err());
        assert_eq!(
            Prediction::from_number(&Number::from_f64(23.4).unwrap(), Task::Regression).unwrap(),
            Prediction::Value(23.4)
        );
    }

    #[test]
    fn malformed_info_rejected() {
        assert!(ModelInfo::from_reply(Reply::Info {
            task: "classification".into(),
            n_features: 3,
            n_classes: None
        })
        .is_err());
        assert!(ModelInfo::from_reply(Reply::Info {
            task: "ranking".into(),
            n_features: 3,
            n_classes: None
        })
        .is_err());
        assert!(ModelInfo::from_reply(Reply::Prediction { y: Number::from(1) }).is_err());
    }

    #[test]
    fn tcp_round_trip_and_closed_connection() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        thread::spawn(move || serve_tcp(listener, Arc::new(Fixed)));
        let mut client = RemoteClient::connect_tcp(&addr, DEFAULT_HANDSHAKE_TIMEOUT).unwrap();
        assert_eq!(client.info().n_features, 3);
        assert_eq!(
            client.predict(&[0.1, 0.2, 0.3]).unwrap(),
            Prediction::Class(1)
        );
        assert!(matches!(client.predict(&[0.1]), Err(Error::Protocol(_))));

        // A server that hangs up right after the handshake.
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let mut w = stream;
            writeln!(
                w,
                r#"{{"type":"info","task":"classification","n_features":3,"n_classes":2}}"#
            )
            .unwrap();
        });
        let mut client = RemoteClient::connect_tcp(&addr, DEFAULT_HANDSHAKE_TIMEOUT).unwrap();
        let err = client.predict(&[0.0, 0.0, 0.0]).unwrap_err();
        assert!(err.is_transport(), "{err}");
    }

    #[test]
    fn silent_server_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let holder = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            thread::sleep(Duration::from_millis(600));
            drop(stream);
        });
        let err = RemoteClient::connect_tcp(&addr, Duration::from_millis(200)).unwrap_err();
        assert!(
            matches!(err, Error::Transport(ref m) if m.contains("no reply")),
            "{err}"
        );
        holder.join().unwrap();
    }
}
