//! Output directory, MANIFEST and thread-pool plumbing.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::HarnessError;

/// Environment variable consulted when no explicit thread count is given.
pub const THREADS_ENV: &str = "LVLAB_THREADS";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs `f` on a dedicated rayon pool. `threads` wins over `LVLAB_THREADS`;
/// with neither, rayon's default pool is used.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    let from_env = std::env::var(THREADS_ENV).ok().map(|v| {
        v.trim().parse::<usize>().map_err(|_| HarnessError::BadSpec(format!("{THREADS_ENV}={v} is not a count")))
    });
    let count = match (threads, from_env) {
        (Some(n), _) => Some(n),
        (None, Some(parsed)) => Some(parsed?),
        (None, None) => None,
    };
    match count {
        None => Ok(f()),
        Some(0) => Err(HarnessError::BadSpec("thread count must be positive".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| HarnessError::BadSpec(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Complete,
    /// Stopped by an error; the files present are partial.
    Incomplete,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Complete => "complete",
            RunStatus::Incomplete => "incomplete",
        })
    }
}

/// Everything needed to re-run an experiment exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub wall_time: Duration,
    pub status: RunStatus,
    /// Extra `key=value` lines (thresholds, calibration choices, errors).
    pub notes: Vec<(String, String)>,
    /// Output files with their sha256.
    pub files: Vec<(String, String)>,
}

impl Manifest {
    pub fn version() -> String {
        format!("lvlab-{}", env!("CARGO_PKG_VERSION"))
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "command={}\nversion={}\nconfig_sha256={}\nseed={}\nwall_time_s={:.3}\nstatus={}\n",
            self.command,
            Self::version(),
            self.config_sha256,
            self.seed,
            self.wall_time.as_secs_f64(),
            self.status
        );
        for (k, v) in &self.notes {
            out.push_str(&format!("{k}={}\n", v.replace('\n', " ")));
        }
        for (name, hash) in &self.files {
            out.push_str(&format!("file.{name}={hash}\n"));
        }
        out
    }
}

/// Directory receiving the CSV outputs and the MANIFEST.
#[derive(Debug, Clone)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<(String, String)>,
}

impl OutputDir {
    pub fn create(root: impl AsRef<Path>) -> Result<Self, HarnessError> {
        fs::create_dir_all(root.as_ref())?;
        Ok(OutputDir { root: root.as_ref().to_path_buf(), written: Vec::new() })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    /// Writes `name` and records its hash.
    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), HarnessError> {
        fs::write(self.root.join(name), contents)?;
        self.written.retain(|(n, _)| n != name);
        self.written.push((name.to_string(), sha256_hex(contents)));
        Ok(())
    }

    /// Files written so far, with their hashes.
    pub fn written(&self) -> &[(String, String)] {
        &self.written
    }

    /// Hash over every file written so far (name and contents hash), in
    /// write order.
    pub fn combined_hash(&self) -> String {
        let joined: String = self.written.iter().map(|(n, h)| format!("{n}:{h}\n")).collect();
        sha256_hex(joined.as_bytes())
    }

    pub fn write_manifest(&mut self, mut manifest: Manifest) -> Result<(), HarnessError> {
        manifest.files = self.written.clone();
        fs::write(self.root.join("MANIFEST"), manifest.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn explicit_thread_count_is_used() {
        assert_eq!(with_threads(Some(3), rayon::current_num_threads).unwrap(), 3);
        assert!(with_threads(Some(0), || ()).is_err());
    }

    #[test]
    fn manifest_lists_files() {
        let dir = std::env::temp_dir().join(format!("lvlab-manifest-{}", std::process::id()));
        let mut out = OutputDir::create(&dir).unwrap();
        out.write("a.csv", b"x\n1\n").unwrap();
        out.write_manifest(Manifest {
            command: "test".into(),
            config_sha256: sha256_hex(b""),
            seed: 7,
            wall_time: Duration::from_millis(1500),
            status: RunStatus::Incomplete,
            notes: vec![("error".into(), "boom\nline".into())],
            files: Vec::new(),
        })
        .unwrap();
        let text = fs::read_to_string(dir.join("MANIFEST")).unwrap();
        assert!(text.contains("status=incomplete\n"));
        assert!(text.contains("seed=7\n"));
        assert!(text.contains("error=boom line\n"));
        assert!(text.contains(&format!("file.a.csv={}", sha256_hex(b"x\n1\n"))));
        fs::remove_dir_all(dir).unwrap();
    }
}
