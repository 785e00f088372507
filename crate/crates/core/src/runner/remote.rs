use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use super::protocol::{read_frame, write_frame, Message, WorkerCaps, PROTOCOL_VERSION};
use super::{evaluate_with_retry, BaseParams, EvalJob, EvalResult, Result, RunnerError};

/// Dispatches of one job before the batch is abandoned.
pub const MAX_DISPATCHES: u32 = 3;

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub threads: usize,
    /// Stop accepting after this many connections (all are served to completion).
    pub max_connections: Option<usize>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { threads: thread::available_parallelism().map_or(1, |n| n.get()), max_connections: None }
    }
}

#[derive(Debug, Clone)]
pub struct DispatchOptions {
    pub job_timeout: Duration,
    pub connect_timeout: Duration,
    /// Connections per endpoint; `None` uses the thread count the worker reports.
    pub connections_per_endpoint: Option<usize>,
}

impl Default for DispatchOptions {
    fn default() -> Self {
        Self {
            job_timeout: Duration::from_secs(60),
            connect_timeout: Duration::from_secs(5),
            connections_per_endpoint: None,
        }
    }
}

/// Serve evaluation requests on `listener`, one thread per connection.
pub fn remote_worker_serve(listener: TcpListener, opts: &ServeOptions) -> Result<()> {
    let caps = WorkerCaps { threads: opts.threads.max(1) };
    thread::scope(|s| {
        for (served, stream) in listener.incoming().enumerate() {
            match stream {
                Ok(stream) => {
                    let caps = caps.clone();
                    s.spawn(move || {
                        let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
                        if let Err(e) = serve_connection(stream, caps) {
                            log::warn!("connection {peer} ended with error: {e}");
                        }
                    });
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
            if opts.max_connections.is_some_and(|m| served + 1 >= m) {
                break;
            }
        }
    });
    Ok(())
}

fn serve_connection(stream: TcpStream, caps: WorkerCaps) -> Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    match read_frame(&mut reader)? {
        Some(Message::Hello { protocol_version, .. }) if protocol_version == PROTOCOL_VERSION => {
            write_frame(&mut writer, &Message::Hello { protocol_version: PROTOCOL_VERSION, worker_caps: Some(caps) })?;
        }
        Some(Message::Hello { protocol_version, .. }) => {
            let reason = format!("protocol version mismatch: worker speaks {PROTOCOL_VERSION}, got {protocol_version}");
            write_frame(&mut writer, &Message::Bye { reason: Some(reason.clone()) })?;
            return Err(RunnerError::Protocol(reason));
        }
        Some(other) => return Err(RunnerError::Protocol(format!("expected hello, got {other:?}"))),
        None => return Ok(()),
    }
    let mut bases: HashMap<u64, BaseParams> = HashMap::new();
    loop {
        match read_frame(&mut reader)? {
            Some(Message::SetBaseParams { base }) => {
                bases.retain(|&id, _| id + 4 > base.id);
                bases.insert(base.id, base);
            }
            Some(Message::Eval { job }) => {
                let reply = match bases.get(&job.base_id) {
                    None => Message::Failed { job_id: job.job_id, message: format!("unknown base {}", job.base_id) },
                    Some(base) => match evaluate_with_retry(base, &job) {
                        Ok(result) => Message::Result { result },
                        Err(e) => Message::Failed { job_id: job.job_id, message: e.to_string() },
                    },
                };
                write_frame(&mut writer, &reply)?;
            }
            Some(Message::Bye { .. }) | None => return Ok(()),
            Some(other) => log::warn!("ignoring unexpected message {other:?}"),
        }
    }
}

struct Conn {
    endpoint: String,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

fn connect(endpoint: &str, opts: &DispatchOptions) -> Result<(Conn, WorkerCaps)> {
    let addr =
        endpoint.to_socket_addrs()?.next().ok_or_else(|| RunnerError::Network(format!("cannot resolve {endpoint}")))?;
    let stream = TcpStream::connect_timeout(&addr, opts.connect_timeout)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(opts.job_timeout))?;
    let mut conn = Conn {
        endpoint: endpoint.to_string(),
        reader: BufReader::new(stream.try_clone()?),
        writer: BufWriter::new(stream),
    };
    write_frame(&mut conn.writer, &Message::Hello { protocol_version: PROTOCOL_VERSION, worker_caps: None })?;
    match read_frame(&mut conn.reader)? {
        Some(Message::Hello { protocol_version, worker_caps }) if protocol_version == PROTOCOL_VERSION => {
            Ok((conn, worker_caps.unwrap_or(WorkerCaps { threads: 1 })))
        }
        Some(Message::Bye { reason }) => {
            Err(RunnerError::Network(format!("{endpoint} refused: {}", reason.unwrap_or_default())))
        }
        other => Err(RunnerError::Protocol(format!("{endpoint}: bad handshake reply {other:?}"))),
    }
}

struct Shared {
    queue: VecDeque<EvalJob>,
    dispatches: HashMap<u64, u32>,
    results: BTreeMap<u64, EvalResult>,
    total: usize,
    live: usize,
    error: Option<RunnerError>,
}

impl Shared {
    fn finished(&self) -> bool {
        self.error.is_some() || self.results.len() == self.total
    }

    fn requeue(&mut self, job: EvalJob, why: &str) {
        if self.results.contains_key(&job.job_id) {
            return;
        }
        let n = self.dispatches.get(&job.job_id).copied().unwrap_or(0);
        if n >= MAX_DISPATCHES {
            self.error.get_or_insert(RunnerError::Job { job_id: job.job_id, message: format!("gave up: {why}") });
        } else {
            log::warn!("re-dispatching job {}: {why}", job.job_id);
            self.queue.push_back(job);
        }
    }
}

/// Evaluate `jobs` on remote workers. Same contract as [`super::evaluate_batch`].
pub fn remote_dispatch(
    base: &BaseParams,
    jobs: &[EvalJob],
    endpoints: &[String],
    opts: &DispatchOptions,
) -> Result<Vec<EvalResult>> {
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let mut conns = Vec::new();
    for ep in endpoints {
        match connect(ep, opts) {
            Ok((conn, caps)) => {
                let extra = opts.connections_per_endpoint.unwrap_or(caps.threads).max(1) - 1;
                conns.push(conn);
                for _ in 0..extra {
                    match connect(ep, opts) {
                        Ok((c, _)) => conns.push(c),
                        Err(e) => log::warn!("extra connection to {ep} failed: {e}"),
                    }
                }
            }
            Err(e) => log::warn!("endpoint {ep} unavailable: {e}"),
        }
    }
    if conns.is_empty() {
        return Err(RunnerError::Network("all endpoints are down".into()));
    }
    let shared = Mutex::new(Shared {
        queue: jobs.iter().cloned().collect(),
        dispatches: HashMap::new(),
        results: BTreeMap::new(),
        total: jobs.len(),
        live: conns.len(),
        error: None,
    });
    let wake = Condvar::new();
    thread::scope(|s| {
        for conn in conns {
            let (shared, wake) = (&shared, &wake);
            s.spawn(move || drive_connection(conn, base, shared, wake));
        }
    });
    let shared = shared.into_inner().expect("dispatch state");
    if let Some(e) = shared.error {
        return Err(e);
    }
    Ok(shared.results.into_values().collect())
}

fn drive_connection(mut conn: Conn, base: &BaseParams, shared: &Mutex<Shared>, wake: &Condvar) {
    let lost = |shared: &Mutex<Shared>, job: Option<EvalJob>, why: String| {
        let mut st = shared.lock().expect("dispatch state");
        log::warn!("connection lost: {why}");
        if let Some(job) = job {
            st.requeue(job, &why);
        }
        st.live -= 1;
        if st.live == 0 && !st.finished() {
            st.error.get_or_insert(RunnerError::Network(format!("all workers lost: {why}")));
        }
        wake.notify_all();
    };
    if let Err(e) = write_frame(&mut conn.writer, &Message::SetBaseParams { base: base.clone() }) {
        return lost(shared, None, format!("{}: {e}", conn.endpoint));
    }
    loop {
        let job = {
            let mut st = shared.lock().expect("dispatch state");
            loop {
                if st.finished() {
                    drop(st);
                    let _ = write_frame(&mut conn.writer, &Message::Bye { reason: None });
                    return;
                }
                if let Some(job) = st.queue.pop_front() {
                    *st.dispatches.entry(job.job_id).or_insert(0) += 1;
                    break job;
                }
                st = wake.wait_timeout(st, Duration::from_millis(50)).expect("dispatch state").0;
            }
        };
        if let Err(e) = write_frame(&mut conn.writer, &Message::Eval { job: job.clone() }) {
            return lost(shared, Some(job), format!("{}: {e}", conn.endpoint));
        }
        loop {
            let frame = match read_frame(&mut conn.reader) {
                Ok(Some(m)) => m,
                Ok(None) => return lost(shared, Some(job), format!("{}: closed", conn.endpoint)),
                Err(e) => return lost(shared, Some(job), format!("{}: {e}", conn.endpoint)),
            };
            let mut st = shared.lock().expect("dispatch state");
            match frame {
                Message::Result { result } if result.job_id == job.job_id => {
                    if result.episode_returns.len() != job.episodes {
                        st.requeue(job, "result has the wrong number of episodes");
                    } else {
                        st.results.entry(result.job_id).or_insert(result);
                    }
                    wake.notify_all();
                    break;
                }
                Message::Result { result } if st.results.contains_key(&result.job_id) => {
                    log::debug!("dropping duplicate result for job {}", result.job_id);
                }
                Message::Result { result } => {
                    log::warn!(
                        "{} answered job {} with job id {}; frame discarded",
                        conn.endpoint,
                        job.job_id,
                        result.job_id
                    );
                    st.requeue(job, "wrong job id in reply");
                    wake.notify_all();
                    break;
                }
                Message::Failed { job_id, message } if job_id == job.job_id => {
                    st.requeue(job, &message);
                    wake.notify_all();
                    break;
                }
                Message::Bye { reason } => {
                    drop(st);
                    return lost(
                        shared,
                        Some(job),
                        format!("{} said bye: {}", conn.endpoint, reason.unwrap_or_default()),
                    );
                }
                other => log::warn!("{}: ignoring unexpected {other:?}", conn.endpoint),
            }
        }
    }
}
