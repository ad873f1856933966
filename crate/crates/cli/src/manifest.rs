use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "run_manifest.json";

/// What a run needs to be repeated: the exact arguments, the resolved
/// configuration, the seeds in effect and a digest of every input file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub tool: String,
    pub verb: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    /// Resolved configuration in `key = value` form, when the verb uses one.
    pub config: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    /// Input path to hex SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(verb: &str, argv: &[String]) -> Self {
        Manifest {
            tool: format!("recafr {}", env!("CARGO_PKG_VERSION")),
            verb: verb.to_string(),
            argv: argv.to_vec(),
            config: None,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    /// Records a file, or every regular file directly inside a directory.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        for file in input_files(path)? {
            let digest = sha256_file(&file)?;
            self.inputs.insert(file.display().to_string(), digest);
        }
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    /// Fails if any recorded input is missing or has changed.
    pub fn verify_inputs(&self) -> Result<()> {
        for (path, want) in &self.inputs {
            let got = sha256_file(Path::new(path)).with_context(|| format!("recorded input {path}"))?;
            if &got != want {
                bail!("input {path} changed since the recorded run (sha256 {got}, recorded {want})");
            }
        }
        Ok(())
    }

    /// The recorded arguments with the output directory replaced.
    pub fn argv_with_out(&self, out: &Path) -> Result<Vec<String>> {
        let out = out.display().to_string();
        let mut argv = self.argv.clone();
        let mut replaced = false;
        let mut k = 0;
        while k < argv.len() {
            if argv[k] == "--out" && k + 1 < argv.len() {
                argv[k + 1] = out.clone();
                replaced = true;
                k += 1;
            } else if argv[k].starts_with("--out=") {
                argv[k] = format!("--out={out}");
                replaced = true;
            }
            k += 1;
        }
        if !replaced {
            bail!("recorded arguments have no --out");
        }
        Ok(argv)
    }
}

fn input_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(path).with_context(|| format!("listing {}", path.display()))? {
        let p = entry?.path();
        if p.is_file() {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
