//! Output files. Every file starts with a header recording the artifact
//! version, the seed and a hash of the resolved run configuration: CSV
//! files carry it as `#` comment lines, JSON files as a `header` object.
//! Files are written to a temporary sibling and renamed into place.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct Header {
    pub tool: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub config_hash: String,
}

impl Header {
    pub fn new(seed: u64, config: &impl Serialize) -> Self {
        let canonical = serde_json::to_vec(config).expect("configuration serializes");
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config_hash: hex::encode(Sha256::digest(&canonical)),
        }
    }

    fn comment_block(&self) -> String {
        format!(
            "# tool: {}\n# version: {}\n# seed: {}\n# config_hash: {}\n",
            self.tool, self.version, self.seed, self.config_hash
        )
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct OutDir {
    root: PathBuf,
    header: Header,
}

impl OutDir {
    pub fn create(root: &Path, header: Header) -> io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            header,
        })
    }

    fn write_atomic(&self, name: &str, bytes: &[u8]) -> io::Result<PathBuf> {
        let path = self.root.join(name);
        let tmp = self.root.join(format!(".{name}.tmp"));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn json<T: Serialize>(&self, name: &str, body: &T) -> io::Result<PathBuf> {
        #[derive(Serialize)]
        struct Doc<'a, T> {
            header: &'a Header,
            #[serde(flatten)]
            body: &'a T,
        }
        let text = serde_json::to_string_pretty(&Doc {
            header: &self.header,
            body,
        })
        .map_err(io::Error::other)?;
        self.write_atomic(name, text.as_bytes())
    }

    pub fn csv<T: Serialize>(&self, name: &str, rows: &[T]) -> io::Result<PathBuf> {
        let mut buf = self.header.comment_block().into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            for row in rows {
                w.serialize(row).map_err(io::Error::other)?;
            }
            w.flush()?;
        }
        self.write_atomic(name, &buf)
    }
}
