use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use hilo::policy::{HlArch, InitScheme, PolicyArch, PolicyParams};
use hilo::runner::protocol::{read_frame, write_frame, Message, WorkerCaps, PROTOCOL_VERSION};
use hilo::runner::{
    evaluate_batch, evaluate_job, perturbation_jobs, remote_dispatch, remote_worker_serve, BaseParams, DispatchOptions,
    EvalJob, NoiseSpec, RunnerError, ServeOptions,
};
use hilo::world::Task;

fn base() -> BaseParams {
    let p = PolicyParams::init(PolicyArch::hierarchical(HlArch::standard(3, 2)), InitScheme::Gaussian { std: 0.1 }, 8)
        .unwrap();
    let theta = p.flat_vector();
    BaseParams::new(1, p, theta, NoiseSpec { seed: 3, iteration: 0, noise_std: 0.03 }).unwrap()
}

fn jobs(b: &BaseParams, directions: usize) -> Vec<EvalJob> {
    perturbation_jobs(b, directions, Task::MazeTraversal, 1, 42)
}

fn one_conn() -> DispatchOptions {
    DispatchOptions { connections_per_endpoint: Some(1), ..DispatchOptions::default() }
}

fn spawn_worker(max_connections: usize) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        remote_worker_serve(listener, &ServeOptions { threads: 1, max_connections: Some(max_connections) }).unwrap()
    });
    addr
}

/// A hand-written worker: performs the handshake, then calls `on_eval` for
/// every job with the frame writer.
fn spawn_fake<F>(on_eval: F) -> String
where
    F: Fn(&BaseParams, &EvalJob, &mut BufWriter<TcpStream>, usize) + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut r = BufReader::new(stream.try_clone().unwrap());
        let mut w = BufWriter::new(stream);
        let Some(Message::Hello { .. }) = read_frame(&mut r).unwrap() else { panic!("no hello") };
        write_frame(
            &mut w,
            &Message::Hello { protocol_version: PROTOCOL_VERSION, worker_caps: Some(WorkerCaps { threads: 1 }) },
        )
        .unwrap();
        let mut base = None;
        let mut n = 0;
        while let Ok(Some(m)) = read_frame(&mut r) {
            match m {
                Message::SetBaseParams { base: b } => base = Some(b),
                Message::Eval { job } => {
                    on_eval(base.as_ref().unwrap(), &job, &mut w, n);
                    n += 1;
                }
                _ => break,
            }
        }
    });
    addr
}

#[test]
fn loopback_worker_matches_in_process() {
    let b = base();
    let js = jobs(&b, 4);
    let local = evaluate_batch(&b, &js, 1).unwrap();
    let addr = spawn_worker(1);
    let remote = remote_dispatch(&b, &js, &[addr], &one_conn()).unwrap();
    assert_eq!(remote, local);
    for (a, b) in remote.iter().zip(&local) {
        assert_eq!(a.mean_return.to_bits(), b.mean_return.to_bits());
    }
}

#[test]
fn duplicate_results_are_counted_once() {
    let b = base();
    let js = jobs(&b, 2);
    let addr = spawn_fake(|base, job, w, _| {
        let r = evaluate_job(base, job).unwrap();
        write_frame(w, &Message::Result { result: r.clone() }).unwrap();
        write_frame(w, &Message::Result { result: r }).unwrap();
    });
    let remote = remote_dispatch(&b, &js, &[addr], &one_conn()).unwrap();
    assert_eq!(remote, evaluate_batch(&b, &js, 1).unwrap());
    let steps: u64 = remote.iter().map(|r| r.total_steps).sum();
    let expected: u64 = evaluate_batch(&b, &js, 1).unwrap().iter().map(|r| r.total_steps).sum();
    assert_eq!(steps, expected);
}

#[test]
fn wrong_job_id_is_discarded_and_redispatched() {
    let b = base();
    let js = jobs(&b, 2);
    let addr = spawn_fake(|base, job, w, n| {
        let mut r = evaluate_job(base, job).unwrap();
        if n == 0 {
            r.job_id += 1000;
            r.mean_return = f64::MAX;
        }
        write_frame(w, &Message::Result { result: r }).unwrap();
    });
    let remote = remote_dispatch(&b, &js, &[addr], &one_conn()).unwrap();
    assert_eq!(remote, evaluate_batch(&b, &js, 1).unwrap());
}

#[test]
fn straggler_is_redispatched_to_another_worker() {
    let b = base();
    let js = jobs(&b, 2);
    let slow = spawn_fake(|base, job, w, _| {
        thread::sleep(Duration::from_millis(1500));
        let _ = write_frame(w, &Message::Result { result: evaluate_job(base, job).unwrap() });
    });
    let good = spawn_worker(1);
    let opts = DispatchOptions { job_timeout: Duration::from_millis(500), ..one_conn() };
    let remote = remote_dispatch(&b, &js, &[slow, good], &opts).unwrap();
    assert_eq!(remote, evaluate_batch(&b, &js, 1).unwrap());
}

#[test]
fn all_endpoints_down() {
    let b = base();
    let closed = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().to_string()
    };
    let err = remote_dispatch(&b, &jobs(&b, 1), &[closed], &one_conn()).unwrap_err();
    assert!(matches!(err, RunnerError::Network(_)), "{err}");
}

#[test]
fn version_mismatch_is_refused() {
    let addr = spawn_worker(1);
    let stream = TcpStream::connect(&addr).unwrap();
    let mut r = BufReader::new(stream.try_clone().unwrap());
    let mut w = BufWriter::new(stream);
    write_frame(&mut w, &Message::Hello { protocol_version: PROTOCOL_VERSION + 1, worker_caps: None }).unwrap();
    match read_frame(&mut r).unwrap() {
        Some(Message::Bye { reason: Some(reason) }) => assert!(reason.contains("version")),
        other => panic!("expected bye, got {other:?}"),
    }
}

#[test]
fn worker_counts_and_scheduling_do_not_change_results() {
    let b = base();
    let js = jobs(&b, 8);
    let one = evaluate_batch(&b, &js, 1).unwrap();
    let eight = evaluate_batch(&b, &js, 8).unwrap();
    assert_eq!(one, eight);
    let mut shuffled = js.clone();
    shuffled.reverse();
    assert_eq!(evaluate_batch(&b, &shuffled, 3).unwrap(), one);
}

#[test]
fn episode_bookkeeping() {
    let b = base();
    let js = perturbation_jobs(&b, 32, Task::Flat, 3, 0);
    assert_eq!(js.len(), 64);
    let results = evaluate_batch(&b, &js, 2).unwrap();
    let episodes: usize = results.iter().map(|r| r.episode_returns.len()).sum();
    assert_eq!(episodes, 192);
    // flat ground never terminates early
    assert_eq!(results.iter().map(|r| r.total_steps).sum::<u64>(), 192 * 6000);
}

#[test]
fn parallel_speedup_when_cores_allow() {
    let cores = thread::available_parallelism().map_or(1, |n| n.get());
    if cores < 8 {
        eprintln!("skipping throughput check: {cores} core(s) available");
        return;
    }
    let b = base();
    let js = perturbation_jobs(&b, 32, Task::MazeTraversal, 1, 5);
    let t = std::time::Instant::now();
    evaluate_batch(&b, &js, 1).unwrap();
    let single = t.elapsed();
    let t = std::time::Instant::now();
    evaluate_batch(&b, &js, 8).unwrap();
    assert!(t.elapsed().as_secs_f64() <= 0.25 * single.as_secs_f64());
}
