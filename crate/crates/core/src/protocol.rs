//! Framed messages exchanged between clients, the co-manager and workers.
//!
//! A frame is a 4-byte big-endian payload length, one version byte and the
//! payload. The payload is a record (see [`crate::record`]) whose first field
//! is `type`. The byte-level layout of every message is listed in
//! `PROTOCOL.md` at the repository root.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::record::{RecordError, RecordReader, RecordWriter};

pub const PROTOCOL_VERSION: u8 = 0x01;
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;
pub const HEADER_LEN: usize = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    /// Not enough bytes yet; `needed` is the total frame length when known.
    #[error("incomplete frame")]
    Incomplete { needed: Option<usize> },
    #[error("payload of {0} bytes exceeds the 16 MiB limit")]
    Oversize(usize),
    #[error("unsupported protocol version {0:#04x}")]
    Version(u8),
    #[error("malformed message: {0}")]
    Malformed(#[from] RecordError),
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubmitStatus {
    Assigned,
    Queued,
    Cached,
}

impl SubmitStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SubmitStatus::Assigned => "assigned",
            SubmitStatus::Queued => "queued",
            SubmitStatus::Cached => "cached",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "assigned" => SubmitStatus::Assigned,
            "queued" => SubmitStatus::Queued,
            "cached" => SubmitStatus::Cached,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    /// Worker id already registered and alive.
    Conflict,
    /// SUBMIT for a circuit id that is still executing.
    DuplicateInFlight,
    /// A worker failed to execute the circuit.
    ExecutionFailed,
    /// Circuit demand exceeds the worker's capacity.
    Capacity,
    /// The request could not be decoded or is not valid here.
    Malformed,
    /// The referenced worker or circuit is unknown.
    Unknown,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 6] = [
        ErrorCode::Conflict,
        ErrorCode::DuplicateInFlight,
        ErrorCode::ExecutionFailed,
        ErrorCode::Capacity,
        ErrorCode::Malformed,
        ErrorCode::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::Conflict => "conflict",
            ErrorCode::DuplicateInFlight => "duplicate_in_flight",
            ErrorCode::ExecutionFailed => "execution_failed",
            ErrorCode::Capacity => "capacity",
            ErrorCode::Malformed => "malformed",
            ErrorCode::Unknown => "unknown",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

/// One reported active circuit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActiveCircuit {
    pub circuit_id: String,
    pub demand: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// worker → manager. Answered by REGISTER_ACK or ERROR.
    Register {
        corr: u64,
        worker_id: String,
        max_qubits: usize,
        cru: f64,
    },
    RegisterAck {
        corr: u64,
        worker_id: String,
    },
    /// worker → manager notification; no response.
    Heartbeat {
        corr: u64,
        worker_id: String,
        active: Vec<ActiveCircuit>,
        cru: f64,
    },
    /// manager → worker. Answered by RESULT or ERROR.
    Assign {
        corr: u64,
        circuit: Vec<u8>,
    },
    Result {
        corr: u64,
        circuit_id: String,
        fidelity: f64,
    },
    /// client → manager. Answered by SUBMIT_ACK (or ERROR), then by exactly
    /// one JOB_RESULT or ERROR carrying the same correlation id.
    Submit {
        corr: u64,
        client_id: String,
        circuit: Vec<u8>,
    },
    SubmitAck {
        corr: u64,
        circuit_id: String,
        status: SubmitStatus,
    },
    JobResult {
        corr: u64,
        circuit_id: String,
        fidelity: f64,
    },
    Error {
        corr: u64,
        code: ErrorCode,
        detail: String,
    },
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Register { .. } => "REGISTER",
            Message::RegisterAck { .. } => "REGISTER_ACK",
            Message::Heartbeat { .. } => "HEARTBEAT",
            Message::Assign { .. } => "ASSIGN",
            Message::Result { .. } => "RESULT",
            Message::Submit { .. } => "SUBMIT",
            Message::SubmitAck { .. } => "SUBMIT_ACK",
            Message::JobResult { .. } => "JOB_RESULT",
            Message::Error { .. } => "ERROR",
        }
    }

    pub fn corr(&self) -> u64 {
        match self {
            Message::Register { corr, .. }
            | Message::RegisterAck { corr, .. }
            | Message::Heartbeat { corr, .. }
            | Message::Assign { corr, .. }
            | Message::Result { corr, .. }
            | Message::Submit { corr, .. }
            | Message::SubmitAck { corr, .. }
            | Message::JobResult { corr, .. }
            | Message::Error { corr, .. } => *corr,
        }
    }

    /// Record payload, without framing.
    pub fn payload(&self) -> Vec<u8> {
        let mut w = RecordWriter::new();
        w.str("type", self.type_name()).display("corr", self.corr());
        match self {
            Message::Register {
                worker_id,
                max_qubits,
                cru,
                ..
            } => {
                w.str("worker_id", worker_id)
                    .display("max_qubits", max_qubits)
                    .float("cru", *cru);
            }
            Message::RegisterAck { worker_id, .. } => {
                w.str("worker_id", worker_id);
            }
            Message::Heartbeat {
                worker_id, active, cru, ..
            } => {
                w.str("worker_id", worker_id).display("active", active.len());
                for a in active {
                    w.str("circuit_id", &a.circuit_id).display("demand", a.demand);
                }
                w.float("cru", *cru);
            }
            Message::Assign { circuit, .. } => {
                w.bytes("circuit", circuit);
            }
            Message::Result {
                circuit_id, fidelity, ..
            }
            | Message::JobResult {
                circuit_id, fidelity, ..
            } => {
                w.str("circuit_id", circuit_id).float("fidelity", *fidelity);
            }
            Message::Submit { client_id, circuit, .. } => {
                w.str("client_id", client_id).bytes("circuit", circuit);
            }
            Message::SubmitAck { circuit_id, status, .. } => {
                w.str("circuit_id", circuit_id).str("status", status.as_str());
            }
            Message::Error { code, detail, .. } => {
                w.str("code", code.as_str()).str("detail", detail);
            }
        }
        w.finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        out.push(PROTOCOL_VERSION);
        out.extend_from_slice(&payload);
        out
    }

    /// Parses a payload. `base` shifts reported error offsets.
    pub fn from_payload(payload: &[u8], base: usize) -> Result<Message, RecordError> {
        let mut r = RecordReader::with_base(payload, base);
        let type_field = r.expect("type")?;
        let ty = type_field.as_str()?;
        let corr: u64 = r.expect("corr")?.parse_uint()?;
        let owned = |f: crate::record::Field<'_>| f.as_str().map(str::to_owned);
        let msg = match ty {
            "REGISTER" => Message::Register {
                corr,
                worker_id: owned(r.expect("worker_id")?)?,
                max_qubits: r.expect("max_qubits")?.parse_uint()?,
                cru: r.expect("cru")?.float()?,
            },
            "REGISTER_ACK" => Message::RegisterAck {
                corr,
                worker_id: owned(r.expect("worker_id")?)?,
            },
            "HEARTBEAT" => {
                let worker_id = owned(r.expect("worker_id")?)?;
                let n: usize = r.expect("active")?.parse_uint()?;
                // each entry needs at least two minimal fields
                if n > payload.len() / 8 {
                    return Err(RecordError::new(r.offset(), "active count exceeds payload"));
                }
                let mut active = Vec::with_capacity(n);
                for _ in 0..n {
                    active.push(ActiveCircuit {
                        circuit_id: owned(r.expect("circuit_id")?)?,
                        demand: r.expect("demand")?.parse_uint()?,
                    });
                }
                Message::Heartbeat {
                    corr,
                    worker_id,
                    active,
                    cru: r.expect("cru")?.float()?,
                }
            }
            "ASSIGN" => Message::Assign {
                corr,
                circuit: r.expect("circuit")?.value.to_vec(),
            },
            "RESULT" | "JOB_RESULT" => {
                let circuit_id = owned(r.expect("circuit_id")?)?;
                let fidelity = r.expect("fidelity")?.float()?;
                if ty == "RESULT" {
                    Message::Result {
                        corr,
                        circuit_id,
                        fidelity,
                    }
                } else {
                    Message::JobResult {
                        corr,
                        circuit_id,
                        fidelity,
                    }
                }
            }
            "SUBMIT" => Message::Submit {
                corr,
                client_id: owned(r.expect("client_id")?)?,
                circuit: r.expect("circuit")?.value.to_vec(),
            },
            "SUBMIT_ACK" => {
                let circuit_id = owned(r.expect("circuit_id")?)?;
                let f = r.expect("status")?;
                let status = SubmitStatus::parse(f.as_str()?)
                    .ok_or_else(|| RecordError::new(f.offset, "unknown submit status"))?;
                Message::SubmitAck {
                    corr,
                    circuit_id,
                    status,
                }
            }
            "ERROR" => {
                let f = r.expect("code")?;
                let code =
                    ErrorCode::parse(f.as_str()?).ok_or_else(|| RecordError::new(f.offset, "unknown error code"))?;
                Message::Error {
                    corr,
                    code,
                    detail: owned(r.expect("detail")?)?,
                }
            }
            other => {
                return Err(RecordError::new(
                    type_field.offset,
                    format!("unknown message type {other:?}"),
                ))
            }
        };
        r.finish()?;
        Ok(msg)
    }
}

/// Decodes the first frame in `buf`, returning the message and the number
/// of bytes consumed. Never looks past the declared frame length.
pub fn decode_frame(buf: &[u8]) -> Result<(Message, usize), FrameError> {
    if buf.len() < 4 {
        return Err(FrameError::Incomplete { needed: None });
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::Oversize(len));
    }
    if buf.len() < HEADER_LEN {
        return Err(FrameError::Incomplete {
            needed: Some(HEADER_LEN + len),
        });
    }
    if buf[4] != PROTOCOL_VERSION {
        return Err(FrameError::Version(buf[4]));
    }
    let total = HEADER_LEN + len;
    if buf.len() < total {
        return Err(FrameError::Incomplete { needed: Some(total) });
    }
    let msg = Message::from_payload(&buf[HEADER_LEN..total], HEADER_LEN)?;
    Ok((msg, total))
}

/// Incremental decoder for one connection's byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete message, `Ok(None)` when more bytes are needed. After
    /// an error the stream is unrecoverable and should be dropped.
    pub fn next_message(&mut self) -> Result<Option<Message>, FrameError> {
        match decode_frame(&self.buf) {
            Ok((msg, used)) => {
                self.buf.drain(..used);
                Ok(Some(msg))
            }
            Err(FrameError::Incomplete { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    w.write_all(&msg.encode())?;
    w.flush()
}

/// Blocking read of one frame. `Ok(None)` on a clean end of stream at a
/// frame boundary.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>, WireError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes([header[0], header[1], header[2], header[3]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::Oversize(len).into());
    }
    if header[4] != PROTOCOL_VERSION {
        return Err(FrameError::Version(header[4]).into());
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some(
        Message::from_payload(&payload, HEADER_LEN).map_err(FrameError::from)?,
    ))
}
