//! Black-box perturbation oracles: an external editor reached over a
//! line-JSON subprocess pipe or HTTP, or an in-process stand-in.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use jigwm_autograd::Scalar;
use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::image::Image;
use crate::perturb::{apply_chain, PerturbationSpec, Perturber};
use crate::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_INSTANCES: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleRequest {
    pub id: String,
    pub instruction: String,
    /// Base64 PNG.
    pub images: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleResponse {
    pub id: String,
    #[serde(default)]
    pub images: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn encode_image<T: Scalar>(img: &Image<T>) -> Result<String> {
    Ok(STANDARD.encode(img.encode_png()?))
}

pub fn decode_image<T: Scalar>(s: &str) -> Result<Image<T>> {
    let bytes = STANDARD.decode(s).map_err(|e| Error::OracleProtocol(format!("bad base64 image: {e}")))?;
    Image::decode(&bytes).map_err(|e| Error::OracleProtocol(format!("undecodable image: {e}")))
}

/// Delivers a window of requests; responses may arrive in any order and
/// some may be missing.
pub trait OracleTransport: Send + Sync {
    fn exchange(&self, requests: &[OracleRequest], timeout: Duration) -> Result<Vec<OracleResponse>>;
    fn describe(&self) -> String;
}

/// Returns every image unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct EchoTransport;

impl OracleTransport for EchoTransport {
    fn exchange(&self, requests: &[OracleRequest], _timeout: Duration) -> Result<Vec<OracleResponse>> {
        Ok(requests
            .iter()
            .map(|r| OracleResponse {
                id: r.id.clone(),
                images: r.images.clone(),
                error: None,
            })
            .collect())
    }

    fn describe(&self) -> String {
        "echo".into()
    }
}

/// Seed derived from the request so that repeated calls agree.
pub fn request_seed(id: &str, instruction: &str) -> u64 {
    let d = Sha256::new().chain_update(id.as_bytes()).chain_update([0]).chain_update(instruction.as_bytes()).finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Interprets an instruction as a `+`-joined chain of perturbation labels
/// and applies it, with one shared seed, to every image of the request.
pub fn analytic_edit(req: &OracleRequest) -> OracleResponse {
    let run = || -> Result<Vec<String>> {
        let chain = req
            .instruction
            .split('+')
            .map(|s| s.trim().parse::<PerturbationSpec>())
            .collect::<Result<Vec<_>>>()?;
        let seed = request_seed(&req.id, &req.instruction);
        req.images
            .iter()
            .map(|s| encode_image(&apply_chain(&chain, &decode_image::<f32>(s)?, seed)?))
            .collect()
    };
    match run() {
        Ok(images) => OracleResponse {
            id: req.id.clone(),
            images,
            error: None,
        },
        Err(e) => OracleResponse {
            id: req.id.clone(),
            images: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

/// In-process [`analytic_edit`].
#[derive(Clone, Copy, Debug, Default)]
pub struct AnalyticTransport;

impl OracleTransport for AnalyticTransport {
    fn exchange(&self, requests: &[OracleRequest], _timeout: Duration) -> Result<Vec<OracleResponse>> {
        Ok(requests.iter().map(analytic_edit).collect())
    }

    fn describe(&self) -> String {
        "analytic".into()
    }
}

struct Proc {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Long-lived child process speaking one JSON object per line each way.
pub struct SubprocessTransport {
    argv: Vec<String>,
    proc: Mutex<Option<Proc>>,
}

impl SubprocessTransport {
    pub fn new(argv: Vec<String>) -> Result<Self> {
        if argv.is_empty() {
            return Err(Error::Config("empty oracle command".into()));
        }
        Ok(Self {
            argv,
            proc: Mutex::new(None),
        })
    }

    fn spawn(&self) -> Result<Proc> {
        let mut child = Command::new(&self.argv[0])
            .args(&self.argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::OracleTransport(format!("cannot start {:?}: {e}", self.argv[0])))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Proc { child, stdin, lines: rx })
    }
}

impl OracleTransport for SubprocessTransport {
    fn exchange(&self, requests: &[OracleRequest], timeout: Duration) -> Result<Vec<OracleResponse>> {
        let mut guard = self.proc.lock().map_err(|_| Error::OracleTransport("oracle pipe poisoned".into()))?;
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let proc = guard.as_mut().expect("spawned");
        let mut payload = String::new();
        for r in requests {
            payload.push_str(&serde_json::to_string(r)?);
            payload.push('\n');
        }
        if let Err(e) = proc.stdin.write_all(payload.as_bytes()).and_then(|_| proc.stdin.flush()) {
            *guard = None;
            return Err(Error::OracleTransport(format!("oracle pipe closed: {e}")));
        }
        let wanted: std::collections::HashSet<&str> = requests.iter().map(|r| r.id.as_str()).collect();
        let deadline = Instant::now() + timeout;
        let mut out = Vec::new();
        while out.len() < requests.len() {
            let left = deadline.saturating_duration_since(Instant::now());
            match proc.lines.recv_timeout(left) {
                Ok(line) => match serde_json::from_str::<OracleResponse>(&line) {
                    Ok(r) if wanted.contains(r.id.as_str()) => out.push(r),
                    Ok(r) => debug!("discarding stale oracle response {}", r.id),
                    Err(e) => return Err(Error::OracleProtocol(format!("malformed oracle line: {e}"))),
                },
                Err(RecvTimeoutError::Timeout) => break,
                Err(RecvTimeoutError::Disconnected) => {
                    *guard = None;
                    if out.is_empty() {
                        return Err(Error::OracleTransport("oracle process exited".into()));
                    }
                    break;
                }
            }
        }
        Ok(out)
    }

    fn describe(&self) -> String {
        format!("cmd:{}", self.argv.join(" "))
    }
}

/// One POST per request, issued concurrently within a window.
pub struct HttpTransport {
    url: String,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>) -> Self {
        Self { url: url.into() }
    }

    fn post(&self, agent: &ureq::Agent, req: &OracleRequest) -> Result<OracleResponse> {
        let body = serde_json::to_string(req)?;
        let mut resp = agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| Error::OracleTransport(format!("POST {}: {e}", self.url)))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::OracleTransport(format!("reading oracle reply: {e}")))?;
        serde_json::from_str(&text).map_err(|e| Error::OracleProtocol(format!("malformed oracle reply: {e}")))
    }
}

impl OracleTransport for HttpTransport {
    fn exchange(&self, requests: &[OracleRequest], timeout: Duration) -> Result<Vec<OracleResponse>> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        let results: Vec<Result<OracleResponse>> = std::thread::scope(|s| {
            let handles: Vec<_> = requests.iter().map(|r| s.spawn(|| self.post(&agent, r))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::OracleTransport("request thread panicked".into()))))
                .collect()
        });
        let mut out = Vec::new();
        let mut last = None;
        for r in results {
            match r {
                Ok(resp) => out.push(resp),
                Err(e) if e.is_retriable() => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        match (out.is_empty(), last) {
            (true, Some(e)) => Err(e),
            _ => Ok(out),
        }
    }

    fn describe(&self) -> String {
        self.url.clone()
    }
}

/// Retrying, windowed front end over a transport.
pub struct OracleClient {
    transport: Box<dyn OracleTransport>,
    pub timeout: Duration,
    pub retries: usize,
    pub max_in_flight: usize,
}

/// One edit: every image in `images` gets the same instruction.
#[derive(Clone, Debug)]
pub struct EditJob<T> {
    pub id: String,
    pub instruction: String,
    pub images: Vec<Image<T>>,
}

impl OracleClient {
    pub fn new(transport: Box<dyn OracleTransport>) -> Self {
        Self {
            transport,
            timeout: DEFAULT_TIMEOUT,
            retries: 2,
            max_in_flight: 8,
        }
    }

    /// `echo`, `analytic`, `cmd:PROGRAM ARGS…` or an `http(s)://` URL.
    pub fn from_endpoint(endpoint: &str) -> Result<Self> {
        let t: Box<dyn OracleTransport> = if endpoint == "echo" {
            Box::new(EchoTransport)
        } else if endpoint == "analytic" {
            Box::new(AnalyticTransport)
        } else if let Some(cmd) = endpoint.strip_prefix("cmd:") {
            Box::new(SubprocessTransport::new(cmd.split_whitespace().map(String::from).collect())?)
        } else if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
            Box::new(HttpTransport::new(endpoint))
        } else {
            return Err(Error::Config(format!("unrecognised oracle endpoint {endpoint:?}")));
        };
        Ok(Self::new(t))
    }

    pub fn describe(&self) -> String {
        self.transport.describe()
    }

    /// Runs every job, returning edited images in job order.
    pub fn edit<T: Scalar>(&self, jobs: &[EditJob<T>]) -> Result<Vec<Vec<Image<T>>>> {
        let mut index = HashMap::new();
        let mut requests = Vec::with_capacity(jobs.len());
        for (i, job) in jobs.iter().enumerate() {
            if index.insert(job.id.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate oracle request id {}", job.id)));
            }
            requests.push(OracleRequest {
                id: job.id.clone(),
                instruction: job.instruction.clone(),
                images: job.images.iter().map(encode_image).collect::<Result<_>>()?,
            });
        }
        let mut results: Vec<Option<Vec<Image<T>>>> = vec![None; jobs.len()];
        let mut pending: Vec<usize> = (0..jobs.len()).collect();
        let mut last_err = None;
        for attempt in 0..=self.retries {
            if attempt > 0 {
                warn!("oracle retry {attempt}: {} requests outstanding", pending.len());
                std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
            }
            for window in pending.chunks(self.max_in_flight.max(1)) {
                let batch: Vec<OracleRequest> = window.iter().map(|&i| requests[i].clone()).collect();
                match self.transport.exchange(&batch, self.timeout) {
                    Ok(resps) => {
                        for r in resps {
                            let Some(&i) = index.get(&r.id) else { continue };
                            if results[i].is_some() {
                                continue;
                            }
                            if let Some(e) = r.error {
                                last_err = Some(Error::OracleTransport(format!("oracle failed on {}: {e}", r.id)));
                                continue;
                            }
                            results[i] = Some(check_reply(&jobs[i], &r.images)?);
                        }
                    }
                    Err(e) if e.is_retriable() => last_err = Some(e),
                    Err(e) => return Err(e),
                }
            }
            pending.retain(|&i| results[i].is_none());
            if pending.is_empty() {
                break;
            }
        }
        if !pending.is_empty() {
            let why = last_err.map_or_else(|| "no reply before timeout".to_string(), |e| e.to_string());
            return Err(Error::OracleTransport(format!(
                "{} of {} oracle requests unanswered after {} attempts ({why})",
                pending.len(),
                jobs.len(),
                self.retries + 1
            )));
        }
        Ok(results.into_iter().map(|r| r.expect("all answered")).collect())
    }
}

fn check_reply<T: Scalar>(job: &EditJob<T>, images: &[String]) -> Result<Vec<Image<T>>> {
    if images.len() != job.images.len() {
        return Err(Error::OracleProtocol(format!(
            "request {} sent {} images, got {}",
            job.id,
            job.images.len(),
            images.len()
        )));
    }
    images
        .iter()
        .zip(&job.images)
        .map(|(s, orig)| {
            let img: Image<T> = decode_image(s)?;
            if img.dims() != orig.dims() {
                return Err(Error::OracleProtocol(format!(
                    "request {}: reply is {:?}, sent {:?}",
                    job.id,
                    img.dims(),
                    orig.dims()
                )));
            }
            Ok(img.clamp01())
        })
        .collect()
}

/// Edits each `(x, x_w)` pair `instances` times with one call per pair and
/// instance. Instructions are shuffled before being dealt out.
pub fn oracle_perturb<T: Scalar>(
    client: &OracleClient,
    pairs: &[(Image<T>, Image<T>)],
    instructions: &[String],
    instances: usize,
    seed: u64,
) -> Result<Vec<Vec<(Image<T>, Image<T>)>>> {
    if instructions.is_empty() {
        return Err(Error::Config("oracle perturbation needs at least one instruction".into()));
    }
    let mut order = instructions.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = pairs.len();
    let jobs: Vec<EditJob<T>> = (0..instances)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .enumerate()
        .map(|(k, (i, j))| EditJob {
            id: format!("{seed:016x}-{i}-{j}"),
            instruction: order[k % order.len()].clone(),
            images: vec![pairs[j].0.clone(), pairs[j].1.clone()],
        })
        .collect();
    let mut out = client.edit(&jobs)?.into_iter();
    Ok((0..instances)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let mut v = out.next().expect("one reply per job").into_iter();
                    (v.next().expect("x"), v.next().expect("x_w"))
                })
                .collect()
        })
        .collect())
}

/// Training-time perturbation source backed by an oracle.
pub struct OraclePerturber {
    pub client: OracleClient,
    pub instructions: Vec<String>,
}

impl<T: Scalar> Perturber<T> for OraclePerturber {
    fn perturb_pairs(
        &mut self,
        x: &[Image<T>],
        x_w: &[Image<T>],
        instances: usize,
        _progress: f64,
        seed: u64,
    ) -> Result<Vec<Vec<(Image<T>, Image<T>)>>> {
        let pairs: Vec<_> = x.iter().cloned().zip(x_w.iter().cloned()).collect();
        oracle_perturb(&self.client, &pairs, &self.instructions, instances, seed)
    }

    fn describe(&self) -> String {
        format!("oracle[{}]", self.client.describe())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::apply_perturbation;
    use crate::synth;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn quantized(n: usize) -> Vec<Image<f32>> {
        synth::corpus(n, 16, 16, 3).iter().map(|im| Image::from_rgb8(&im.to_rgb8())).collect()
    }

    #[test]
    fn echo_returns_inputs() {
        let imgs = quantized(2);
        let pairs: Vec<_> = imgs.iter().map(|i| (i.clone(), Image::from_rgb8(&i.map(|v| 1.0 - v).to_rgb8()))).collect();
        let client = OracleClient::from_endpoint("echo").unwrap();
        let out = oracle_perturb(&client, &pairs, &["anything".into()], 3, 1).unwrap();
        assert_eq!(out.len(), 3);
        for inst in &out {
            for ((a, b), (c, d)) in inst.iter().zip(&pairs) {
                assert_eq!(a, c);
                assert_eq!(b, d);
            }
        }
    }

    #[test]
    fn analytic_instances_are_distinct_and_pairs_aligned() {
        let imgs = quantized(2);
        let pairs: Vec<_> = imgs.iter().map(|i| (i.clone(), i.clone())).collect();
        let client = OracleClient::from_endpoint("analytic").unwrap();
        let out = oracle_perturb(&client, &pairs, &["noise:0.1".into()], 3, 9).unwrap();
        for inst in &out {
            for (a, b) in inst {
                assert_eq!(a, b);
            }
        }
        assert_ne!(out[0][0].0, out[1][0].0);
        assert_ne!(out[1][0].0, out[2][0].0);
    }

    #[test]
    fn analytic_jpeg_matches_in_process() {
        let img = quantized(1).remove(0);
        let client = OracleClient::from_endpoint("analytic").unwrap();
        let job = EditJob {
            id: "a".into(),
            instruction: "jpeg:70".into(),
            images: vec![img.clone()],
        };
        let got = client.edit(&[job]).unwrap().remove(0).remove(0);
        let want = apply_perturbation(&PerturbationSpec::Jpeg { quality: 70 }, &img, 0).unwrap();
        assert_eq!(got, want);
    }

    struct Flaky {
        calls: AtomicUsize,
        fail_first: usize,
        shrink: bool,
    }

    impl OracleTransport for Flaky {
        fn exchange(&self, requests: &[OracleRequest], _t: Duration) -> Result<Vec<OracleResponse>> {
            let c = self.calls.fetch_add(1, Ordering::SeqCst);
            if c < self.fail_first {
                return Err(Error::OracleTransport("simulated outage".into()));
            }
            let mut out: Vec<OracleResponse> = EchoTransport.exchange(requests, Duration::ZERO)?;
            if self.shrink {
                let small = encode_image(&Image::<f32>::zeros(4, 4)).unwrap();
                out.iter_mut().for_each(|r| r.images = vec![small.clone(); r.images.len()]);
            }
            out.reverse();
            Ok(out)
        }

        fn describe(&self) -> String {
            "flaky".into()
        }
    }

    #[test]
    fn retries_transport_errors_and_reorders_by_id() {
        let imgs = quantized(5);
        let jobs: Vec<_> = imgs
            .iter()
            .enumerate()
            .map(|(i, im)| EditJob { id: format!("j{i}"), instruction: "x".into(), images: vec![im.clone()] })
            .collect();
        let mut client = OracleClient::new(Box::new(Flaky { calls: AtomicUsize::new(0), fail_first: 2, shrink: false }));
        client.max_in_flight = 2;
        let out = client.edit(&jobs).unwrap();
        for (o, im) in out.iter().zip(&imgs) {
            assert_eq!(&o[0], im);
        }
        let mut dead = OracleClient::new(Box::new(Flaky { calls: AtomicUsize::new(0), fail_first: 100, shrink: false }));
        dead.retries = 1;
        assert!(matches!(dead.edit(&jobs), Err(Error::OracleTransport(_))));
    }

    #[test]
    fn shape_mismatch_is_a_protocol_error() {
        let jobs = vec![EditJob { id: "a".into(), instruction: "x".into(), images: quantized(1) }];
        let client = OracleClient::new(Box::new(Flaky { calls: AtomicUsize::new(0), fail_first: 0, shrink: true }));
        assert!(matches!(client.edit(&jobs), Err(Error::OracleProtocol(_))));
    }

    #[test]
    fn bad_instruction_surfaces_as_oracle_failure() {
        let jobs = vec![EditJob { id: "a".into(), instruction: "melt".into(), images: quantized(1) }];
        let mut client = OracleClient::from_endpoint("analytic").unwrap();
        client.retries = 0;
        assert!(matches!(client.edit(&jobs), Err(Error::OracleTransport(_))));
        assert!(matches!(OracleClient::from_endpoint("ftp://x"), Err(Error::Config(_))));
    }
}
