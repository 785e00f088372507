//! Length-prefixed JSON frames: a 4-byte big-endian body length, then UTF-8 JSON.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use super::{BaseParams, EvalJob, EvalResult, RunnerError};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME_LEN: usize = 256 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerCaps {
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Message {
    Hello {
        protocol_version: u32,
        worker_caps: Option<WorkerCaps>,
    },
    SetBaseParams {
        base: BaseParams,
    },
    Eval {
        job: EvalJob,
    },
    Result {
        result: EvalResult,
    },
    /// The worker could not evaluate a job.
    Failed {
        job_id: u64,
        message: String,
    },
    Bye {
        reason: Option<String>,
    },
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<(), RunnerError> {
    let body = serde_json::to_vec(msg).map_err(|e| RunnerError::Protocol(e.to_string()))?;
    let len = u32::try_from(body.len())
        .ok()
        .filter(|&n| n as usize <= MAX_FRAME_LEN)
        .ok_or_else(|| RunnerError::Protocol(format!("frame of {} bytes is too large", body.len())))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

/// `Ok(None)` on a clean end of stream before a frame starts.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Message>, RunnerError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(RunnerError::Protocol(format!("frame length {len} exceeds limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    parse_body(&body).map(Some)
}

pub fn parse_body(body: &[u8]) -> Result<Message, RunnerError> {
    serde_json::from_slice(body).map_err(|e| {
        let shown = String::from_utf8_lossy(&body[..body.len().min(200)]);
        log::error!("malformed frame ({e}): {shown}");
        RunnerError::Protocol(format!("malformed frame: {e}"))
    })
}
