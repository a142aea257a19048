use std::fs;
use std::path::{Path, PathBuf};

use super::{run_experiment, ExperimentConfig, ExperimentError, Stage};

/// The first difference between two output trees. `line` is 1-based; 0 means
/// the file exists on one side only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub file: PathBuf,
    pub line: usize,
    pub left: Option<String>,
    pub right: Option<String>,
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.line == 0 {
            return write!(f, "{}: present in only one output", self.file.display());
        }
        write!(
            f,
            "{}, line {}: {:?} != {:?}",
            self.file.display(),
            self.line,
            self.left.as_deref().unwrap_or("<eof>"),
            self.right.as_deref().unwrap_or("<eof>")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterminismReport {
    pub dirs: (PathBuf, PathBuf),
    pub files_compared: usize,
    pub mismatch: Option<Mismatch>,
}

impl DeterminismReport {
    pub fn identical(&self) -> bool {
        self.mismatch.is_none()
    }
}

fn artifacts(root: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if matches!(path.extension().and_then(|e| e.to_str()), Some("run" | "csv")) {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Compares every `.run` and `.csv` file under two directories byte for byte.
pub fn compare_dirs(a: &Path, b: &Path) -> std::io::Result<(usize, Option<Mismatch>)> {
    let left = artifacts(a)?;
    let right = artifacts(b)?;
    if let Some(file) = left
        .iter()
        .zip(&right)
        .find(|(l, r)| l != r)
        .map(|(l, r)| l.min(r).clone())
        .or_else(|| left.get(right.len()).or_else(|| right.get(left.len())).cloned())
    {
        return Ok((
            0,
            Some(Mismatch {
                file,
                line: 0,
                left: None,
                right: None,
            }),
        ));
    }
    for file in &left {
        let x = fs::read(a.join(file))?;
        let y = fs::read(b.join(file))?;
        if x == y {
            continue;
        }
        let xs = String::from_utf8_lossy(&x);
        let ys = String::from_utf8_lossy(&y);
        let (mut xl, mut yl) = (xs.split_inclusive('\n'), ys.split_inclusive('\n'));
        let mut line = 1;
        loop {
            match (xl.next(), yl.next()) {
                (Some(l), Some(r)) if l == r => line += 1,
                (l, r) => {
                    return Ok((
                        left.len(),
                        Some(Mismatch {
                            file: file.clone(),
                            line,
                            left: l.map(|s| s.trim_end_matches('\n').to_string()),
                            right: r.map(|s| s.trim_end_matches('\n').to_string()),
                        }),
                    ))
                }
            }
        }
    }
    Ok((left.len(), None))
}

/// Runs `a` and `b` into `work_dir/run1` and `work_dir/run2` and compares the outputs.
pub fn verify_pair(
    a: &ExperimentConfig,
    b: &ExperimentConfig,
    work_dir: &Path,
) -> Result<DeterminismReport, ExperimentError> {
    let io = |e: std::io::Error| ExperimentError::Stage {
        stage: Stage::Write,
        source: Box::new(e),
    };
    let dirs = (work_dir.join("run1"), work_dir.join("run2"));
    for (cfg, dir) in [(a, &dirs.0), (b, &dirs.1)] {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(io)?;
        }
        let mut cfg = cfg.clone();
        cfg.output_dir = dir.clone();
        // a warm cache would make the second run replay the first
        if cfg.backend.kind.is_deterministic() {
            cfg.cache = None;
        }
        run_experiment(&cfg)?;
    }
    let (files_compared, mismatch) = compare_dirs(&dirs.0, &dirs.1).map_err(io)?;
    Ok(DeterminismReport {
        dirs,
        files_compared,
        mismatch,
    })
}

/// Executes `cfg` twice under `cfg.output_dir/verify` and compares the outputs.
pub fn verify_determinism(cfg: &ExperimentConfig) -> Result<DeterminismReport, ExperimentError> {
    verify_pair(cfg, cfg, &cfg.output_dir.join("verify"))
}
