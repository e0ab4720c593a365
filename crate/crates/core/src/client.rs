//! Trainer-side connection to a co-manager.

use std::collections::{HashMap, VecDeque};
use std::io;
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::circuit::LogicalCircuit;
use crate::protocol::{read_message, write_message, ErrorCode, Message, SubmitStatus, WireError};
use crate::trainer::{DispatchError, Dispatcher};

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub manager: String,
    pub client_id: String,
    /// Maximum circuits submitted but not yet answered.
    pub window: usize,
    /// Resubmissions allowed per circuit after a worker-side failure.
    pub retries: u32,
    /// Give up when nothing arrives for this long.
    pub idle_timeout: Option<Duration>,
}

impl RemoteConfig {
    pub fn new(manager: impl Into<String>, client_id: impl Into<String>) -> Self {
        RemoteConfig {
            manager: manager.into(),
            client_id: client_id.into(),
            window: 32,
            retries: 2,
            idle_timeout: None,
        }
    }
}

/// Ships circuits to a co-manager over one TCP connection, keeping at most
/// `window` submissions outstanding.
pub struct RemoteDispatcher {
    config: RemoteConfig,
    stream: TcpStream,
    inbox: Receiver<Result<Message, String>>,
    reader: Option<JoinHandle<()>>,
    next_corr: u64,
    resubmissions: u64,
    late_results: u64,
}

impl RemoteDispatcher {
    pub fn connect(config: RemoteConfig) -> io::Result<Self> {
        if config.window == 0 {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "window must be at least 1"));
        }
        let stream = TcpStream::connect(&config.manager)?;
        let _ = stream.set_nodelay(true);
        let mut rd = stream.try_clone()?;
        let (tx, inbox) = mpsc::channel();
        let reader = thread::spawn(move || loop {
            let item = match read_message(&mut rd) {
                Ok(Some(m)) => Ok(m),
                Ok(None) => Err("manager closed the connection".to_string()),
                Err(WireError::Io(e)) => Err(e.to_string()),
                Err(WireError::Frame(e)) => Err(e.to_string()),
            };
            let end = item.is_err();
            if tx.send(item).is_err() || end {
                break;
            }
        });
        Ok(RemoteDispatcher {
            config,
            stream,
            inbox,
            reader: Some(reader),
            next_corr: 1,
            resubmissions: 0,
            late_results: 0,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// Circuits submitted again after a worker failure, over the lifetime of
    /// this connection.
    pub fn resubmissions(&self) -> u64 {
        self.resubmissions
    }

    /// Results that arrived for no outstanding submission.
    pub fn late_results(&self) -> u64 {
        self.late_results
    }

    fn submit(&mut self, circuit: &LogicalCircuit) -> Result<u64, DispatchError> {
        let corr = self.next_corr;
        self.next_corr += 1;
        let msg = Message::Submit {
            corr,
            client_id: self.config.client_id.clone(),
            circuit: circuit.serialize(),
        };
        write_message(&mut self.stream, &msg).map_err(|e| DispatchError::Transport(e.to_string()))?;
        Ok(corr)
    }

    fn receive(&self) -> Result<Message, DispatchError> {
        let item = match self.config.idle_timeout {
            None => self.inbox.recv().map_err(|_| "reader stopped".to_string()),
            Some(t) => self.inbox.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => format!("no reply from manager within {t:?}"),
                RecvTimeoutError::Disconnected => "reader stopped".to_string(),
            }),
        };
        item.and_then(|r| r).map_err(DispatchError::Transport)
    }
}

impl Dispatcher for RemoteDispatcher {
    fn dispatch(&mut self, circuits: &[&LogicalCircuit]) -> Result<HashMap<String, f64>, DispatchError> {
        let mut results = HashMap::with_capacity(circuits.len());
        let mut waiting: VecDeque<usize> = (0..circuits.len()).collect();
        // corr -> circuit index, for submissions still awaiting an answer
        let mut outstanding: HashMap<u64, usize> = HashMap::new();
        let mut attempts = vec![0u32; circuits.len()];
        let started = Instant::now();

        while results.len() < circuits.len() {
            while outstanding.len() < self.config.window {
                let Some(i) = waiting.pop_front() else { break };
                let corr = self.submit(circuits[i])?;
                attempts[i] += 1;
                outstanding.insert(corr, i);
            }
            match self.receive()? {
                Message::SubmitAck { circuit_id, status, .. } => {
                    if status == SubmitStatus::Cached {
                        log::debug!("{circuit_id} answered from cache");
                    }
                }
                Message::JobResult {
                    corr,
                    circuit_id,
                    fidelity,
                } => {
                    if let Some(i) = outstanding.remove(&corr) {
                        results.insert(circuits[i].circuit_id().to_owned(), fidelity);
                    } else {
                        self.late_results += 1;
                        log::warn!("result for {circuit_id} matches no outstanding submission");
                    }
                }
                Message::Error { corr, code, detail } => {
                    let Some(i) = outstanding.remove(&corr) else {
                        log::warn!("manager error {}: {detail}", code.as_str());
                        continue;
                    };
                    let id = circuits[i].circuit_id();
                    match code {
                        ErrorCode::ExecutionFailed | ErrorCode::Capacity if attempts[i] <= self.config.retries => {
                            log::warn!("{id} failed ({detail}); resubmitting");
                            self.resubmissions += 1;
                            waiting.push_front(i);
                        }
                        ErrorCode::ExecutionFailed | ErrorCode::Capacity => {
                            return Err(DispatchError::Execution {
                                circuit_id: id.to_owned(),
                                attempts: attempts[i],
                                detail,
                            })
                        }
                        _ => {
                            return Err(DispatchError::Rejected {
                                circuit_id: id.to_owned(),
                                detail: format!("{}: {detail}", code.as_str()),
                            })
                        }
                    }
                }
                other => log::warn!("ignoring unexpected {} from manager", other.type_name()),
            }
        }
        log::debug!(
            "dispatched {} circuits in {:.3}s",
            circuits.len(),
            started.elapsed().as_secs_f64()
        );
        Ok(results)
    }
}

impl Drop for RemoteDispatcher {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}
