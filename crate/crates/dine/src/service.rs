//! Newline-delimited JSON predictor service over TCP.
//!
//! Requests are `{"id":7,"features":[0.1,-0.4]}`. Responses echo the id and
//! carry exactly what the disclosure mode allows:
//!
//! ```text
//! {"id":7,"topk":[[1,0.981234567]]}      top-r
//! {"id":7,"probs":[0.0187654,0.981234]}  full
//! {"id":7,"label":1}                     hard
//! {"id":7,"error":"..."}                 bad request; the connection stays open
//! ```
//!
//! `{"describe":true}` returns `{"num_classes":K,"input_dim":d,"disclosure":...}`.
//! Probabilities are rounded to 9 significant digits.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use dine_core::predictor::{Disclosed, DisclosureMode, Predictor, Query};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Request {
    Predict { id: u64, features: Vec<f64> },
    Describe { describe: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    TopK { id: u64, topk: Vec<(usize, f64)> },
    Probs { id: u64, probs: Vec<f64> },
    Label { id: u64, label: usize },
    Error { id: Option<u64>, error: String },
    Description { num_classes: usize, input_dim: usize, disclosure: DisclosureMode },
}

/// Rounds to 9 significant digits.
pub fn wire_round(p: f64) -> f64 {
    format!("{p:.8e}").parse().unwrap_or(p)
}

fn to_response(id: u64, d: Disclosed) -> Response {
    match d {
        Disclosed::Full(p) => Response::Probs {
            id,
            probs: p.into_iter().map(wire_round).collect(),
        },
        Disclosed::TopR { pairs, .. } => Response::TopK {
            id,
            topk: pairs.into_iter().map(|(c, p)| (c, wire_round(p))).collect(),
        },
        Disclosed::Hard { class, .. } => Response::Label { id, label: class },
    }
}

/// Answers one request line. Never fails: problems become error responses.
pub fn handle_line<P: Predictor + ?Sized>(predictor: &P, mode: DisclosureMode, line: &str) -> Response {
    match serde_json::from_str::<Request>(line) {
        Ok(Request::Predict { id, features }) => {
            let query = Query { id: id as usize, features: &features };
            match predictor.predict(query) {
                Ok(d) => to_response(id, d),
                Err(e) => Response::Error { id: Some(id), error: e.to_string() },
            }
        }
        Ok(Request::Describe { .. }) => Response::Description {
            num_classes: predictor.num_classes(),
            input_dim: predictor.input_dim(),
            disclosure: mode,
        },
        Err(e) => Response::Error { id: None, error: format!("bad request: {e}") },
    }
}

fn serve_connection<P: Predictor + ?Sized>(predictor: &P, mode: DisclosureMode, stream: TcpStream) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle_line(predictor, mode, line.trim_end());
        serde_json::to_writer(&mut writer, &resp)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
}

/// A running service; each connection gets its own thread.
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    /// Binds `addr` (port 0 picks a free port) and starts accepting.
    pub fn spawn<P>(addr: impl ToSocketAddrs, predictor: Arc<P>, mode: DisclosureMode) -> Result<Server>
    where
        P: Predictor + ?Sized + 'static,
    {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let accept = thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let p = Arc::clone(&predictor);
                thread::spawn(move || {
                    let _ = serve_connection(&*p, mode, stream);
                });
            }
        });
        Ok(Server { addr, stop, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Connection {
    fn open(addr: SocketAddr, timeout: Duration) -> std::io::Result<Self> {
        let stream = TcpStream::connect_timeout(&addr, timeout)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(Connection { reader: BufReader::new(stream.try_clone()?), writer: stream })
    }

    fn call(&mut self, req: &Request) -> Result<Response> {
        let mut line = serde_json::to_string(req)?;
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        let mut buf = String::new();
        if self.reader.read_line(&mut buf)? == 0 {
            return Err(Error::Transport(std::io::ErrorKind::UnexpectedEof.into()));
        }
        Ok(serde_json::from_str(&buf)?)
    }
}

/// Client side of the service, usable as a [`Predictor`].
pub struct RemotePredictor {
    addr: SocketAddr,
    num_classes: usize,
    input_dim: usize,
    mode: DisclosureMode,
    retries: usize,
    timeout: Duration,
    conn: Mutex<Option<Connection>>,
}

impl RemotePredictor {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| Error::Usage("endpoint resolves to no address".into()))?;
        let timeout = Duration::from_secs(30);
        let mut conn = Connection::open(addr, timeout)?;
        match conn.call(&Request::Describe { describe: true })? {
            Response::Description { num_classes, input_dim, disclosure } => Ok(RemotePredictor {
                addr,
                num_classes,
                input_dim,
                mode: disclosure,
                retries: 3,
                timeout,
                conn: Mutex::new(Some(conn)),
            }),
            other => Err(Error::Protocol(format!("unexpected describe response {other:?}"))),
        }
    }

    pub fn mode(&self) -> DisclosureMode {
        self.mode
    }

    /// Sends one request, reconnecting on transport failures.
    pub fn call(&self, req: &Request) -> Result<Response> {
        let mut guard = self.conn.lock().map_err(|_| Error::Protocol("connection lock poisoned".into()))?;
        let mut last = None;
        for attempt in 0..=self.retries {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(50 << attempt.min(5)));
            }
            if guard.is_none() {
                match Connection::open(self.addr, self.timeout) {
                    Ok(c) => *guard = Some(c),
                    Err(e) => {
                        last = Some(Error::Transport(e));
                        continue;
                    }
                }
            }
            match guard.as_mut().map(|c| c.call(req)) {
                Some(Ok(resp)) => return Ok(resp),
                Some(Err(e @ Error::Transport(_))) => {
                    *guard = None;
                    last = Some(e);
                }
                Some(Err(e)) => return Err(e),
                None => {}
            }
        }
        Err(last.unwrap_or_else(|| Error::Protocol("no attempt made".into())))
    }

    fn to_disclosed(&self, id: u64, resp: Response) -> Result<Disclosed> {
        let k = self.num_classes;
        match resp {
            Response::TopK { id: rid, topk } if rid == id => Ok(Disclosed::TopR { num_classes: k, pairs: topk }),
            Response::Probs { id: rid, probs } if rid == id && probs.len() == k => Ok(Disclosed::Full(probs)),
            Response::Label { id: rid, label } if rid == id && label < k => Ok(Disclosed::Hard { num_classes: k, class: label }),
            Response::Error { error, .. } => Err(Error::Protocol(error)),
            other => Err(Error::Protocol(format!("unexpected response {other:?} to request {id}"))),
        }
    }
}

impl Predictor for RemotePredictor {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn predict(&self, query: Query<'_>) -> dine_core::Result<Disclosed> {
        let id = query.id as u64;
        let req = Request::Predict { id, features: query.features.to_vec() };
        self.call(&req)
            .and_then(|resp| self.to_disclosed(id, resp))
            .map_err(|e| dine_core::Error::Predictor(e.to_string()))
    }
}
