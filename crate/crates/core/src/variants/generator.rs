//! Variant generators: a deterministic template stub and an external process
//! or TCP endpoint speaking the line-delimited JSON protocol.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::protocol::{GenerationRequest, GenerationResponse};
use super::templates::TemplateBook;
use super::{Arm, Embedder, Prompt, PromptParams, Variant, VariantPair};
use crate::error::{Error, Result};
use crate::numkit::{mix_seed, stable_hash};

/// Standard deviation of the seeded perturbation added to stub raw features.
const STUB_FEATURE_NOISE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorMode {
    Stub,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Endpoint {
    /// Spawn `program args...` and talk over its stdin/stdout.
    Command { program: String, args: Vec<String> },
    /// Connect to `host:port`.
    Tcp(String),
}

enum Connection {
    Child {
        child: Child,
        stdin: ChildStdin,
        lines: Receiver<std::io::Result<String>>,
    },
    Tcp {
        writer: TcpStream,
        reader: BufReader<TcpStream>,
    },
}

/// How variants are produced. One in-flight request per binding.
pub struct GeneratorBinding {
    mode: GeneratorMode,
    endpoint: Option<Endpoint>,
    timeout: Duration,
    embedder: Embedder,
    conn: Option<Connection>,
}

impl std::fmt::Debug for GeneratorBinding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeneratorBinding")
            .field("mode", &self.mode)
            .field("endpoint", &self.endpoint)
            .field("timeout", &self.timeout)
            .field("connected", &self.conn.is_some())
            .finish()
    }
}

impl Drop for GeneratorBinding {
    fn drop(&mut self) {
        if let Some(Connection::Child { child, .. }) = self.conn.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl GeneratorBinding {
    pub fn stub(embedder: Embedder) -> Self {
        Self {
            mode: GeneratorMode::Stub,
            endpoint: None,
            timeout: Duration::from_millis(0),
            embedder,
            conn: None,
        }
    }

    /// Connects to (or spawns) the endpoint immediately; an unreachable
    /// endpoint is an error here rather than on first use.
    pub fn external(endpoint: Endpoint, timeout_ms: u64, embedder: Embedder) -> Result<Self> {
        let timeout = Duration::from_millis(timeout_ms.max(1));
        let conn = match &endpoint {
            Endpoint::Command { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::null())
                    .spawn()
                    .map_err(|e| {
                        Error::GeneratorUnavailable(format!("cannot spawn {program:?}: {e}"))
                    })?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                let (tx, rx) = mpsc::channel();
                std::thread::spawn(move || {
                    for line in BufReader::new(stdout).lines() {
                        if tx.send(line).is_err() {
                            break;
                        }
                    }
                });
                Connection::Child {
                    child,
                    stdin,
                    lines: rx,
                }
            }
            Endpoint::Tcp(addr) => {
                let sock = addr
                    .to_socket_addrs()
                    .map_err(|e| Error::GeneratorUnavailable(format!("{addr}: {e}")))?
                    .next()
                    .ok_or_else(|| Error::GeneratorUnavailable(format!("{addr}: no address")))?;
                let stream = TcpStream::connect_timeout(&sock, timeout)
                    .map_err(|e| Error::GeneratorUnavailable(format!("{addr}: {e}")))?;
                stream.set_read_timeout(Some(timeout))?;
                stream.set_nodelay(true)?;
                let reader = BufReader::new(stream.try_clone()?);
                Connection::Tcp {
                    writer: stream,
                    reader,
                }
            }
        };
        Ok(Self {
            mode: GeneratorMode::External,
            endpoint: Some(endpoint),
            timeout,
            embedder,
            conn: Some(conn),
        })
    }

    pub fn mode(&self) -> GeneratorMode {
        self.mode
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    fn exchange(&mut self, request: &GenerationRequest) -> Result<String> {
        let timeout = self.timeout;
        let Some(conn) = self.conn.as_mut() else {
            return Err(Error::GeneratorUnavailable(
                "connection closed after an earlier failure".into(),
            ));
        };
        let line = request.to_line();
        let reply = match conn {
            Connection::Child { stdin, lines, .. } => {
                writeln!(stdin, "{line}")
                    .and_then(|_| stdin.flush())
                    .map_err(|e| Error::GeneratorUnavailable(format!("write failed: {e}")))?;
                match lines.recv_timeout(timeout) {
                    Ok(Ok(reply)) => Ok(reply),
                    Ok(Err(e)) => Err(Error::GeneratorUnavailable(format!("read failed: {e}"))),
                    Err(RecvTimeoutError::Timeout) => Err(Error::GeneratorUnavailable(format!(
                        "no reply within {} ms",
                        timeout.as_millis()
                    ))),
                    Err(RecvTimeoutError::Disconnected) => {
                        Err(Error::GeneratorUnavailable("generator exited".into()))
                    }
                }
            }
            Connection::Tcp { writer, reader } => {
                writeln!(writer, "{line}")
                    .and_then(|_| writer.flush())
                    .map_err(|e| Error::GeneratorUnavailable(format!("write failed: {e}")))?;
                let mut reply = String::new();
                match reader.read_line(&mut reply) {
                    Ok(0) => Err(Error::GeneratorUnavailable("connection closed".into())),
                    Ok(_) => Ok(reply.trim_end().to_string()),
                    Err(e) => Err(Error::GeneratorUnavailable(format!("read failed: {e}"))),
                }
            }
        };
        if reply.is_err() {
            // A late reply would be mistaken for the answer to the next request.
            self.conn = None;
        }
        reply
    }

    /// Produces the variant pair for `prompt`.
    pub fn generate(&mut self, prompt: &Prompt, seed: u64) -> Result<VariantPair> {
        match self.mode {
            GeneratorMode::Stub => stub_pair(&self.embedder, prompt, seed),
            GeneratorMode::External => {
                let request =
                    GenerationRequest::new(prompt.text.clone(), prompt.feature_vector.clone(), seed);
                let line = self.exchange(&request)?;
                let response = GenerationResponse::parse_line(&line)?;
                let mut variants = response.variants.into_iter();
                let a = self.external_variant(Arm::A, variants.next().unwrap(), prompt, &line)?;
                let b = self.external_variant(Arm::B, variants.next().unwrap(), prompt, &line)?;
                Ok(VariantPair { a, b })
            }
        }
    }

    fn external_variant(
        &self,
        id: Arm,
        rv: super::ResponseVariant,
        prompt: &Prompt,
        line: &str,
    ) -> Result<Variant> {
        if rv.features.len() != PromptParams::encoded_len() {
            return Err(Error::Protocol {
                message: format!(
                    "variant {id} carries {} features, expected {}",
                    rv.features.len(),
                    PromptParams::encoded_len()
                ),
                excerpt: line.chars().take(120).collect(),
            });
        }
        let embedding = self.embedder.embed(&rv.text, &rv.features).map_err(|e| Error::Protocol {
            message: format!("variant {id} cannot be embedded: {e}"),
            excerpt: line.chars().take(120).collect(),
        })?;
        Ok(Variant {
            id,
            text: rv.text,
            raw_features: rv.features,
            embedding,
            params: prompt.params.clone(),
        })
    }
}

/// Deterministic template generator: a pure function of `(prompt, seed)`.
///
/// Slot A draws from the A-family templates and slot B from the B-family, so
/// the two texts always differ. Raw features are the knob encoding plus a
/// small seeded perturbation.
pub fn stub_pair(embedder: &Embedder, prompt: &Prompt, seed: u64) -> Result<VariantPair> {
    let book = TemplateBook::bundled();
    let feature_hash = prompt
        .feature_vector
        .iter()
        .fold(0u64, |h, v| mix_seed(&[h, v.to_bits()]));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
        seed,
        stable_hash(prompt.text.as_bytes()),
        feature_hash,
    ]));
    let noise = Normal::new(0.0, STUB_FEATURE_NOISE).expect("valid std");
    let base = prompt.params.encode();
    let mut make = |id: Arm| -> Result<Variant> {
        let family: Vec<_> = book.for_slot(id).collect();
        let template = family[rng.random_range(0..family.len())];
        let text = book.render(template, &prompt.params);
        let raw_features: Vec<f64> = base.iter().map(|v| v + noise.sample(&mut rng)).collect();
        let embedding = embedder.embed(&text, &raw_features)?;
        Ok(Variant {
            id,
            text,
            raw_features,
            embedding,
            params: prompt.params.clone(),
        })
    };
    let a = make(Arm::A)?;
    let b = make(Arm::B)?;
    Ok(VariantPair { a, b })
}

/// `generate_pair(binding, prompt, seed)`.
pub fn generate_pair(binding: &mut GeneratorBinding, prompt: &Prompt, seed: u64) -> Result<VariantPair> {
    binding.generate(prompt, seed)
}
