//! Records CSV, binary snapshots and checkpoints.
//!
//! Snapshot layout (all little-endian): magic `CHFL`, `u32` format version,
//! `u32` dim, `u64` cell counts, `f64` lengths, `f64` t, `f64` eps, then `n`
//! and `c` in row-major cell order and each velocity component in its face
//! layout, and finally the CRC-32 of every preceding byte.

use crate::config::{parse_config, ConfigError, RunConfig};
use crate::diagnostics::{ClampFlags, DiagnosticsRecord};
use crate::driver::{Bookkeeping, DriverError, Runner};
use crate::grid::{make_domain, GridError, ScalarField, SimState, VectorField};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"CHFL";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a snapshot file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u32),
    #[error("snapshot checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed snapshot: {0}")]
    Malformed(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("records file line {line}: {msg}")]
    Records { line: usize, msg: String },
    #[error("checkpoint metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Driver(#[from] DriverError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StorageError + '_ {
    move |source| StorageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

const FIXED_COLUMNS: [&str; 14] = [
    "t",
    "mass_n",
    "min_n",
    "max_n",
    "sup_c",
    "int_c",
    "grad_c_sq",
    "kinetic",
    "enstrophy_like",
    "F",
    "G",
    "y_p",
    "z_p",
    "clamp_flags",
];

/// Header for a given list of norm exponents.
pub fn records_header(lp_exponents: &[f64]) -> Vec<String> {
    let mut cols: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    cols.extend(lp_exponents.iter().map(|p| format!("n_L{p}")));
    cols.extend(lp_exponents.iter().map(|p| format!("u_L{p}")));
    cols
}

fn fmt_f64(out: &mut String, v: f64) {
    // 17 significant digits round-trip every finite double
    let _ = write!(out, "{v:.16e}");
}

/// CSV text for `records`; an empty list gives the header alone.
pub fn records_to_csv(records: &[DiagnosticsRecord], lp_exponents: &[f64]) -> String {
    let mut out = records_header(lp_exponents).join(",");
    out.push('\n');
    for r in records {
        let fixed = [
            r.t,
            r.mass_n,
            r.min_n,
            r.max_n,
            r.sup_c,
            r.int_c,
            r.grad_c_sq,
            r.kinetic,
            r.enstrophy_like,
            r.f_energy,
        ];
        for v in fixed {
            fmt_f64(&mut out, v);
            out.push(',');
        }
        for v in [r.g_energy, r.y_p, r.z_p] {
            if let Some(v) = v {
                fmt_f64(&mut out, v);
            }
            out.push(',');
        }
        let _ = write!(out, "{}", r.clamp.0);
        for v in r.lp_norms_n.iter().chain(&r.lp_norms_u) {
            out.push(',');
            fmt_f64(&mut out, *v);
        }
        out.push('\n');
    }
    out
}

pub fn write_records(
    records: &[DiagnosticsRecord],
    lp_exponents: &[f64],
    path: &Path,
) -> Result<(), StorageError> {
    fs::write(path, records_to_csv(records, lp_exponents)).map_err(io_err(path))
}

/// Parses records CSV text, returning the norm exponents from the header.
pub fn records_from_csv(text: &str) -> Result<(Vec<f64>, Vec<DiagnosticsRecord>), StorageError> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or(StorageError::Records {
            line: 1,
            msg: "missing header".into(),
        })?
        .split(',')
        .collect();
    let bad = |line: usize, msg: String| StorageError::Records { line, msg };
    if header.len() < FIXED_COLUMNS.len() || header[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
        return Err(bad(
            1,
            "header does not start with the fixed columns".into(),
        ));
    }
    let extra = &header[FIXED_COLUMNS.len()..];
    if !extra.len().is_multiple_of(2) {
        return Err(bad(1, "norm columns must come in n/u pairs".into()));
    }
    let half = extra.len() / 2;
    let mut exps = Vec::with_capacity(half);
    for (i, col) in extra[..half].iter().enumerate() {
        let p = col
            .strip_prefix("n_L")
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| bad(1, format!("unexpected column {col}")))?;
        if extra[half + i] != format!("u_L{p}") {
            return Err(bad(1, format!("unexpected column {}", extra[half + i])));
        }
        exps.push(p);
    }
    let mut records = Vec::new();
    for (k, line) in lines.enumerate() {
        let ln = k + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(bad(
                ln,
                format!("expected {} columns, got {}", header.len(), cells.len()),
            ));
        }
        let num = |i: usize| -> Result<f64, StorageError> {
            cells[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| bad(ln, format!("column {}: {e}", header[i])))
        };
        let opt = |i: usize| -> Result<Option<f64>, StorageError> {
            if cells[i].trim().is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        let clamp = cells[13]
            .trim()
            .parse::<u8>()
            .map_err(|e| bad(ln, format!("clamp_flags: {e}")))?;
        let n0 = FIXED_COLUMNS.len();
        records.push(DiagnosticsRecord {
            t: num(0)?,
            mass_n: num(1)?,
            min_n: num(2)?,
            max_n: num(3)?,
            sup_c: num(4)?,
            int_c: num(5)?,
            grad_c_sq: num(6)?,
            kinetic: num(7)?,
            enstrophy_like: num(8)?,
            f_energy: num(9)?,
            g_energy: opt(10)?,
            y_p: opt(11)?,
            z_p: opt(12)?,
            clamp: ClampFlags(clamp),
            lp_norms_n: (0..half).map(|i| num(n0 + i)).collect::<Result<_, _>>()?,
            lp_norms_u: (0..half)
                .map(|i| num(n0 + half + i))
                .collect::<Result<_, _>>()?,
        });
    }
    Ok((exps, records))
}

pub fn read_records(path: &Path) -> Result<(Vec<f64>, Vec<DiagnosticsRecord>), StorageError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    records_from_csv(&text)
}

/// Serializes `(n, c, u, t, eps)`; the pressure is not stored.
pub fn snapshot_bytes(state: &SimState) -> Vec<u8> {
    snapshot_bytes_with_version(state, SNAPSHOT_VERSION)
}

fn snapshot_bytes_with_version(state: &SimState, version: u32) -> Vec<u8> {
    let d = state.domain();
    let mut b = Vec::new();
    b.extend_from_slice(SNAPSHOT_MAGIC);
    b.extend_from_slice(&version.to_le_bytes());
    b.extend_from_slice(&(d.dim() as u32).to_le_bytes());
    for &n in d.cells() {
        b.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for &l in d.lengths() {
        b.extend_from_slice(&l.to_le_bytes());
    }
    b.extend_from_slice(&state.t.to_le_bytes());
    b.extend_from_slice(&state.eps.to_le_bytes());
    let fields = [state.n.values(), state.c.values()]
        .into_iter()
        .chain(state.u.components().iter().map(|c| c.as_slice()));
    for f in fields {
        for v in f {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], StorageError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                StorageError::Malformed("payload shorter than its header says".into())
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, StorageError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, StorageError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, StorageError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, StorageError> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn snapshot_from_bytes(bytes: &[u8]) -> Result<SimState, StorageError> {
    if bytes.len() < 8 || &bytes[..4] != SNAPSHOT_MAGIC {
        return Err(StorageError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != SNAPSHOT_VERSION {
        return Err(StorageError::UnsupportedVersion(version));
    }
    if bytes.len() < 12 {
        return Err(StorageError::ChecksumMismatch {
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(StorageError::ChecksumMismatch { stored, computed });
    }
    let mut r = Reader {
        buf: payload,
        pos: 8,
    };
    let dim = r.u32()? as usize;
    if dim != 2 && dim != 3 {
        return Err(StorageError::Malformed(format!("dimension {dim}")));
    }
    let cells = (0..dim)
        .map(|_| r.u64().map(|v| v as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let lengths = r.f64s(dim)?;
    let d = make_domain(dim, &lengths, &cells)?;
    let t = r.f64()?;
    let eps = r.f64()?;
    let n = ScalarField::from_values(d, r.f64s(d.cell_count())?);
    let c = ScalarField::from_values(d, r.f64s(d.cell_count())?);
    let comps = (0..dim)
        .map(|a| r.f64s(d.face_count(a)))
        .collect::<Result<Vec<_>, _>>()?;
    if r.pos != payload.len() {
        return Err(StorageError::Malformed(
            "trailing bytes after the fields".into(),
        ));
    }
    Ok(SimState {
        n,
        c,
        u: VectorField::from_components(d, comps),
        p: ScalarField::zeros(d),
        t,
        eps,
    })
}

pub fn write_snapshot(state: &SimState, path: &Path) -> Result<(), StorageError> {
    fs::write(path, snapshot_bytes(state)).map_err(io_err(path))
}

pub fn read_snapshot(path: &Path) -> Result<SimState, StorageError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    snapshot_from_bytes(&bytes)
}

/// Sidecar metadata stored next to a checkpoint snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    config: String,
    book: Bookkeeping,
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `<path>`, `<path>.meta.toml` and `<path>.records.csv`.
pub fn write_checkpoint(
    runner: &Runner,
    config: &RunConfig,
    path: &Path,
) -> Result<(), StorageError> {
    let mut cfg = config.clone();
    cfg.sim = runner.params().clone();
    write_snapshot(runner.state(), path)?;
    let meta = CheckpointMeta {
        config: cfg.to_toml(),
        book: runner.bookkeeping().clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| StorageError::Meta(e.to_string()))?;
    let meta_path = sidecar(path, ".meta.toml");
    fs::write(&meta_path, text).map_err(io_err(&meta_path))?;
    write_records(
        runner.records(),
        &runner.params().diagnostics.lp_exponents,
        &sidecar(path, ".records.csv"),
    )
}

/// Restores a runner (and the config it was started from) from a checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<(RunConfig, Runner), StorageError> {
    let mut state = read_snapshot(path)?;
    let meta_path = sidecar(path, ".meta.toml");
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: CheckpointMeta =
        toml::from_str(&text).map_err(|e| StorageError::Meta(e.to_string()))?;
    let cfg = parse_config(&meta.config)?;
    let (_, records) = read_records(&sidecar(path, ".records.csv"))?;
    state.eps = cfg.sim.reaction.eps;
    let runner = Runner::from_parts(cfg.sim.clone(), state, meta.book, records)?;
    Ok((cfg, runner))
}
