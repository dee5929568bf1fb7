//! Transports for the control API: newline-delimited JSON over TCP and JSON
//! text frames over WebSocket. Both feed the same session loop.

use std::collections::VecDeque;
use std::io;

use futures_util::{SinkExt, StreamExt};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream, ToSocketAddrs};
use tokio::sync::{broadcast, mpsc};
use tokio_tungstenite::tungstenite::Message;

use crate::api::{ApiRequest, RejectReason, RequestBody, ServerEvent};
use crate::plane::ControlPlane;

/// Longest request line accepted before the connection is dropped.
pub const MAX_LINE: usize = 1 << 20;
const OUTBOX: usize = 256;

/// Runs one client session until the peer goes away, falls behind the event
/// stream, or the service shuts down.
pub async fn run_session(plane: ControlPlane, mut incoming: mpsc::Receiver<String>, outgoing: mpsc::Sender<String>) {
    let mut sub: Option<broadcast::Receiver<ServerEvent>> = None;
    let mut shutdown = plane.shutdown_signal();
    loop {
        tokio::select! {
            line = incoming.recv() => {
                let Some(line) = line else { break };
                if line.trim().is_empty() {
                    continue;
                }
                for ev in handle_line(&plane, &line, &mut sub) {
                    if outgoing.send(ev.to_line()).await.is_err() {
                        return;
                    }
                }
            }
            ev = next_event(&mut sub) => match ev {
                Ok(ev) => {
                    if outgoing.send(ev.to_line()).await.is_err() {
                        return;
                    }
                }
                // a subscriber that cannot keep up is disconnected
                Err(broadcast::error::RecvError::Lagged(_)) => return,
                Err(broadcast::error::RecvError::Closed) => sub = None,
            },
            _ = shutdown.changed() => {
                if *shutdown.borrow() {
                    return;
                }
            }
        }
    }
}

async fn next_event(sub: &mut Option<broadcast::Receiver<ServerEvent>>) -> Result<ServerEvent, broadcast::error::RecvError> {
    match sub {
        Some(rx) => rx.recv().await,
        None => std::future::pending().await,
    }
}

fn handle_line(plane: &ControlPlane, line: &str, sub: &mut Option<broadcast::Receiver<ServerEvent>>) -> Vec<ServerEvent> {
    let req = match ApiRequest::parse(line) {
        Ok(r) => r,
        Err(message) => {
            let request_id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("request_id")?.as_str().map(str::to_string));
            return vec![ServerEvent::Reject {
                request_id,
                reason: RejectReason::BadRequest,
                message,
            }];
        }
    };
    let ack = |command: &str| ServerEvent::Ack {
        request_id: req.request_id.clone(),
        payload: serde_json::json!({ "command": command }),
    };
    match req.body {
        RequestBody::Snapshot => vec![plane.snapshot()],
        RequestBody::Subscribe => {
            let (snap, rx) = plane.subscribe();
            *sub = Some(rx);
            vec![ack("subscribe"), snap]
        }
        RequestBody::Unsubscribe => {
            *sub = None;
            vec![ack("unsubscribe")]
        }
        RequestBody::Command(cmd) => vec![plane.apply(req.request_id, cmd)],
    }
}

/// Accepts NDJSON clients until shutdown.
pub async fn serve_tcp(plane: ControlPlane, listener: TcpListener) -> io::Result<()> {
    let mut shutdown = plane.shutdown_signal();
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let (stream, _) = accepted?;
                tokio::spawn(tcp_session(plane.clone(), stream));
            }
            _ = shutdown.changed() => {
                if *shutdown.borrow() {
                    return Ok(());
                }
            }
        }
    }
}

async fn tcp_session(plane: ControlPlane, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let (r, mut w) = stream.into_split();
    let (in_tx, in_rx) = mpsc::channel(64);
    let (out_tx, mut out_rx) = mpsc::channel::<String>(OUTBOX);
    let reader = tokio::spawn(async move {
        let mut r = BufReader::new(r);
        let mut buf = Vec::new();
        loop {
            buf.clear();
            match read_line_capped(&mut r, &mut buf).await {
                Ok(true) => {}
                _ => break,
            }
            let Ok(line) = String::from_utf8(std::mem::take(&mut buf)) else { break };
            if in_tx.send(line).await.is_err() {
                break;
            }
        }
    });
    let writer = tokio::spawn(async move {
        while let Some(mut line) = out_rx.recv().await {
            line.push('\n');
            if w.write_all(line.as_bytes()).await.is_err() {
                break;
            }
        }
        let _ = w.shutdown().await;
    });
    run_session(plane, in_rx, out_tx).await;
    reader.abort();
    let _ = writer.await;
}

/// Reads one `\n`-terminated line without the terminator. Returns false at
/// end of stream; errors if the line exceeds [`MAX_LINE`].
async fn read_line_capped(r: &mut BufReader<OwnedReadHalf>, buf: &mut Vec<u8>) -> io::Result<bool> {
    loop {
        let chunk = r.fill_buf().await?;
        if chunk.is_empty() {
            return Ok(!buf.is_empty());
        }
        match chunk.iter().position(|&b| b == b'\n') {
            Some(i) => {
                buf.extend_from_slice(&chunk[..i]);
                r.consume(i + 1);
                if buf.last() == Some(&b'\r') {
                    buf.pop();
                }
                return Ok(true);
            }
            None => {
                let n = chunk.len();
                buf.extend_from_slice(chunk);
                r.consume(n);
            }
        }
        if buf.len() > MAX_LINE {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "request line too long"));
        }
    }
}

/// Accepts WebSocket clients until shutdown. Every text frame carries one
/// request; every reply or event goes out as one text frame.
pub async fn serve_ws(plane: ControlPlane, listener: TcpListener) -> io::Result<()> {
    let mut shutdown = plane.shutdown_signal();
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let (stream, _) = accepted?;
                tokio::spawn(ws_session(plane.clone(), stream));
            }
            _ = shutdown.changed() => {
                if *shutdown.borrow() {
                    return Ok(());
                }
            }
        }
    }
}

async fn ws_session(plane: ControlPlane, stream: TcpStream) {
    let Ok(ws) = tokio_tungstenite::accept_async(stream).await else { return };
    let (mut sink, mut source) = ws.split();
    let (in_tx, in_rx) = mpsc::channel(64);
    let (out_tx, mut out_rx) = mpsc::channel::<String>(OUTBOX);
    let reader = tokio::spawn(async move {
        while let Some(Ok(msg)) = source.next().await {
            let text = match msg {
                Message::Text(t) => t,
                Message::Binary(b) => match String::from_utf8(b) {
                    Ok(t) => t,
                    Err(_) => break,
                },
                Message::Close(_) => break,
                _ => continue,
            };
            if in_tx.send(text).await.is_err() {
                break;
            }
        }
    });
    let writer = tokio::spawn(async move {
        while let Some(line) = out_rx.recv().await {
            if sink.send(Message::Text(line)).await.is_err() {
                return;
            }
        }
        let _ = sink.close().await;
    });
    run_session(plane, in_rx, out_tx).await;
    reader.abort();
    let _ = writer.await;
}

/// Minimal NDJSON client used by the CLI.
pub struct Client {
    reader: BufReader<OwnedReadHalf>,
    writer: OwnedWriteHalf,
    pending: VecDeque<ServerEvent>,
}

impl Client {
    pub async fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (r, w) = stream.into_split();
        Ok(Client {
            reader: BufReader::new(r),
            writer: w,
            pending: VecDeque::new(),
        })
    }

    pub async fn send(&mut self, req: &ApiRequest) -> io::Result<()> {
        let mut line = req.to_line();
        line.push('\n');
        self.writer.write_all(line.as_bytes()).await
    }

    /// Next message from the server; `None` once the connection closes.
    pub async fn next_event(&mut self) -> io::Result<Option<ServerEvent>> {
        if let Some(ev) = self.pending.pop_front() {
            return Ok(Some(ev));
        }
        let mut line = String::new();
        loop {
            line.clear();
            if self.reader.read_line(&mut line).await? == 0 {
                return Ok(None);
            }
            if !line.trim().is_empty() {
                break;
            }
        }
        serde_json::from_str(&line)
            .map(Some)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    /// Sends a request and waits for its reply. Streamed events that arrive
    /// first stay queued for [`Client::next_event`].
    pub async fn request(&mut self, req: &ApiRequest) -> io::Result<ServerEvent> {
        self.send(req).await?;
        let mut skipped = VecDeque::new();
        let reply = loop {
            let ev = match self.pending.pop_front() {
                Some(ev) => ev,
                None => {
                    let mut line = String::new();
                    if self.reader.read_line(&mut line).await? == 0 {
                        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "server closed the connection"));
                    }
                    if line.trim().is_empty() {
                        continue;
                    }
                    serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?
                }
            };
            let is_reply = match (&req.body, &ev) {
                (RequestBody::Snapshot, ServerEvent::Topology { cause, .. }) => cause == "request",
                (_, ServerEvent::Ack { .. } | ServerEvent::Reject { .. }) => {
                    req.request_id.is_none() || ev.request_id() == req.request_id.as_deref()
                }
                _ => false,
            };
            if is_reply {
                break ev;
            }
            skipped.push_back(ev);
        };
        skipped.append(&mut self.pending);
        self.pending = skipped;
        Ok(reply)
    }
}
