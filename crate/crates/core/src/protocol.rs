//! Line-delimited request/response protocol exposing the environment
//! lifecycle over byte streams, so environment workers can run out of
//! process. One JSON request per line, one JSON response per line.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::env::{EnvRegistry, EnvSpec, StepOutcome};
use crate::error::Result;

/// A lifecycle request: verb, instance id where applicable, and payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verb", rename_all = "snake_case")]
pub enum Request {
    Make { spec: EnvSpec },
    Reset { instance_id: u64, seed: u64 },
    Step { instance_id: u64, action_tokens: Vec<u32> },
    Close { instance_id: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Ok(OkResponse),
    Err { ok: bool, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OkResponse {
    Made { ok: bool, instance_id: u64 },
    ResetDone { ok: bool, observation: Vec<u8> },
    Stepped { ok: bool, outcome: StepOutcome },
    Closed { ok: bool, closed: u64 },
}

fn err_response(error: impl std::fmt::Display) -> Response {
    Response::Err { ok: false, error: error.to_string() }
}

/// Handles one decoded request against a registry.
pub fn handle_request(registry: &EnvRegistry, request: Request) -> Response {
    let result = match request {
        Request::Make { spec } => registry
            .make(spec)
            .map(|instance_id| OkResponse::Made { ok: true, instance_id }),
        Request::Reset { instance_id, seed } => registry
            .reset(instance_id, seed)
            .map(|observation| OkResponse::ResetDone { ok: true, observation }),
        Request::Step { instance_id, action_tokens } => registry
            .step(instance_id, &action_tokens)
            .map(|outcome| OkResponse::Stepped { ok: true, outcome }),
        Request::Close { instance_id } => registry
            .close(instance_id)
            .map(|()| OkResponse::Closed { ok: true, closed: instance_id }),
    };
    match result {
        Ok(ok) => Response::Ok(ok),
        Err(e) => err_response(e),
    }
}

/// Serves requests from `reader` until EOF, writing one response line per
/// request line. Malformed lines produce an error response rather than
/// terminating the server.
pub fn serve<R: BufRead, W: Write>(registry: &EnvRegistry, reader: R, mut writer: W) -> Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(request) => handle_request(registry, request),
            Err(e) => err_response(format!("bad request: {e}")),
        };
        serde_json::to_writer(&mut writer, &response)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}
