//! External OCR client. Invokes the engine binary (tesseract by default) as
//! a subprocess per document and records wall-clock duration for the
//! profiler.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// Engine invocation settings. `threads` bounds the engine's internal
/// parallelism via OMP_THREAD_LIMIT (tesseract honors it).
#[derive(Debug, Clone)]
pub struct OcrClient {
    pub engine: PathBuf,
    pub language: String,
    pub threads: usize,
    pub timeout: Duration,
}

impl Default for OcrClient {
    fn default() -> Self {
        Self {
            engine: PathBuf::from("tesseract"),
            language: "eng".into(),
            threads: 4,
            timeout: Duration::from_secs(120),
        }
    }
}

impl OcrClient {
    /// Runs the engine on one image. Returns the extracted text and the
    /// wall-clock duration of the subprocess.
    pub fn run(&self, image_path: &Path) -> Result<(String, Duration)> {
        let start = Instant::now();
        let mut child = Command::new(&self.engine)
            .arg(image_path)
            .arg("stdout")
            .arg("-l")
            .arg(&self.language)
            .env("OMP_THREAD_LIMIT", self.threads.to_string())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    Error::EngineMissing(self.engine.clone())
                } else {
                    Error::io(&self.engine, e)
                }
            })?;

        // Poll with a deadline; kill on expiry.
        let deadline = start + self.timeout;
        let status = loop {
            match child.try_wait().map_err(|e| Error::io(image_path, e))? {
                Some(status) => break status,
                None => {
                    if Instant::now() >= deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(Error::Timeout(self.timeout.as_millis() as u64));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
            }
        };
        let mut stdout = String::new();
        if let Some(mut out) = child.stdout.take() {
            out.read_to_string(&mut stdout)
                .map_err(|e| Error::io(image_path, e))?;
        }
        if !status.success() {
            let mut stderr = String::new();
            if let Some(mut err) = child.stderr.take() {
                let _ = err.read_to_string(&mut stderr);
            }
            return Err(Error::OcrFailure {
                status: status.code().unwrap_or(-1),
                stderr: stderr.trim().to_string(),
            });
        }
        Ok((stdout, start.elapsed()))
    }

    /// Runs the engine over many images with a bounded worker pool. Results
    /// come back in input order regardless of completion order.
    pub fn run_batch(&self, paths: &[PathBuf], workers: usize) -> Vec<Result<(String, Duration)>> {
        let workers = workers.max(1).min(paths.len().max(1));
        let (task_tx, task_rx) = mpsc::channel::<(usize, PathBuf)>();
        let task_rx = std::sync::Arc::new(std::sync::Mutex::new(task_rx));
        let (done_tx, done_rx) = mpsc::channel();
        for (i, p) in paths.iter().enumerate() {
            task_tx.send((i, p.clone())).expect("queue tasks");
        }
        drop(task_tx);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                let rx = task_rx.clone();
                let tx = done_tx.clone();
                let client = self.clone();
                scope.spawn(move || loop {
                    let job = { rx.lock().unwrap().recv() };
                    match job {
                        Ok((i, path)) => {
                            let _ = tx.send((i, client.run(&path)));
                        }
                        Err(_) => break,
                    }
                });
            }
            drop(done_tx);
            let mut out: Vec<Option<Result<(String, Duration)>>> =
                (0..paths.len()).map(|_| None).collect();
            for (i, res) in done_rx {
                out[i] = Some(res);
            }
            out.into_iter().map(|r| r.expect("worker reported")).collect()
        })
    }
}
