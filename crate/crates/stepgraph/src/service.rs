//! Line-delimited JSON query service over an immutable retrieval index,
//! served on stdio or a local TCP socket.
//!
//! One request per line: {"query": "...", "k": 3, "mode": "baseline",
//! "query_entities": ["name", ...], "id": anything}. The response mirrors the
//! one-shot query command's output, echoing "id" when present. A malformed
//! line yields an {"error": ...} line and the connection stays open.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};

use serde::Deserialize;
use serde_json::{json, Value};

use crate::retrieval::{RetrievalEngine, RetrievalMode, RetrievalQuery};

#[derive(Debug, Clone, Copy)]
pub struct ServeOptions {
    pub default_k: usize,
    pub default_mode: RetrievalMode,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            default_k: 2,
            default_mode: RetrievalMode::Informativeness,
        }
    }
}

#[derive(Debug, Deserialize)]
struct ServiceRequest {
    query: String,
    k: Option<usize>,
    mode: Option<String>,
    query_entities: Option<Vec<String>>,
    id: Option<Value>,
}

/// Response body shared by the one-shot query command and the service.
pub fn query_response(
    engine: &RetrievalEngine,
    text: &str,
    k: usize,
    mode: RetrievalMode,
    explicit_entities: Option<&[String]>,
) -> Result<Value, String> {
    let explicit_ids = match explicit_entities {
        None => None,
        Some(names) => {
            let mut ids = Vec::with_capacity(names.len());
            for name in names {
                match engine.graph().lookup_entity(name) {
                    Some(id) => ids.push(id),
                    None => return Err(format!("unknown entity {name:?}")),
                }
            }
            Some(ids)
        }
    };
    let query = RetrievalQuery {
        text: text.to_string(),
        turn_index: 0,
        explicit_entities: explicit_ids,
        k,
    };
    let resolved = engine.resolve_query_entities(&query);
    let result = engine.retrieve(&query, mode).map_err(|e| e.to_string())?;
    let entities = engine.graph().entities();
    Ok(json!({
        "query": text,
        "mode": result.mode,
        "k": k,
        "query_entities": resolved.iter().map(|&v| entities[v].name.clone()).collect::<Vec<_>>(),
        "facts": result.facts,
        "truncated": result.truncated,
    }))
}

/// One request line in, one response line out; never panics on bad input.
pub fn handle_line(engine: &RetrievalEngine, opts: &ServeOptions, line: &str) -> String {
    let reply = match serde_json::from_str::<ServiceRequest>(line) {
        Err(e) => json!({ "error": format!("bad request: {e}") }),
        Ok(req) => {
            let mode = match req.mode.as_deref() {
                None => Ok(opts.default_mode),
                Some(m) => m.parse::<RetrievalMode>(),
            };
            let body = mode.and_then(|mode| {
                query_response(
                    engine,
                    &req.query,
                    req.k.unwrap_or(opts.default_k),
                    mode,
                    req.query_entities.as_deref(),
                )
            });
            let mut value = match body {
                Ok(v) => v,
                Err(e) => json!({ "error": e }),
            };
            if let Some(id) = req.id {
                value["id"] = id;
            }
            value
        }
    };
    reply.to_string()
}

/// Serves one already-open byte stream until EOF.
pub fn serve_stream<R: BufRead, W: Write>(
    engine: &RetrievalEngine,
    opts: &ServeOptions,
    reader: R,
    mut writer: W,
) -> std::io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writer.write_all(handle_line(engine, opts, &line).as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

fn serve_connection(engine: &RetrievalEngine, opts: &ServeOptions, stream: TcpStream) {
    let reader = BufReader::new(stream.try_clone().expect("clone tcp stream"));
    let writer = BufWriter::new(stream);
    // client hangup mid-line is not an error worth surfacing
    let _ = serve_stream(engine, opts, reader, writer);
}

/// Accepts connections and serves each on its own thread; the immutable
/// engine is shared read-only. With `max_conns` set, returns after that many
/// connections have been accepted and fully served.
pub fn serve_listener(
    engine: &RetrievalEngine,
    opts: &ServeOptions,
    listener: &TcpListener,
    max_conns: Option<usize>,
) -> std::io::Result<()> {
    std::thread::scope(|scope| {
        let mut accepted = 0usize;
        for conn in listener.incoming() {
            let stream = conn?;
            scope.spawn(move || serve_connection(engine, opts, stream));
            accepted += 1;
            if max_conns.is_some_and(|m| accepted >= m) {
                break;
            }
        }
        Ok(())
    })
}

/// Binds 127.0.0.1:`port` (0 picks a free port) and reports the bound
/// address before accepting.
pub fn serve_tcp(
    engine: &RetrievalEngine,
    opts: &ServeOptions,
    port: u16,
    max_conns: Option<usize>,
    announce: &mut dyn Write,
) -> std::io::Result<()> {
    let listener = TcpListener::bind(("127.0.0.1", port))?;
    writeln!(announce, "listening on {}", listener.local_addr()?)?;
    announce.flush()?;
    serve_listener(engine, opts, &listener, max_conns)
}
