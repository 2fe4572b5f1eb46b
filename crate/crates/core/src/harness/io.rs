//! Artifact output: CSV files with commented headers, the run manifest, and
//! the bounded worker pool experiments fan out on.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::Result;
use crate::fem::to_vertex_vector;
use crate::mesh::{DofPartition, Mesh};

/// One CSV cell; floats are written as `{:.16e}` so files round-trip exactly.
#[derive(Debug, Clone)]
pub enum Cell {
    Int(i64),
    UInt(u64),
    Float(f64),
    Str(String),
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Int(x) => write!(f, "{x}"),
            Cell::UInt(x) => write!(f, "{x}"),
            Cell::Float(x) => write!(f, "{x:.16e}"),
            Cell::Str(s) => write!(f, "{s}"),
        }
    }
}

impl From<i64> for Cell {
    fn from(x: i64) -> Self {
        Cell::Int(x)
    }
}
impl From<u64> for Cell {
    fn from(x: u64) -> Self {
        Cell::UInt(x)
    }
}
impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::UInt(x as u64)
    }
}
impl From<u32> for Cell {
    fn from(x: u32) -> Self {
        Cell::UInt(u64::from(x))
    }
}
impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Float(x)
    }
}
impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Str(s.to_string())
    }
}

/// Writes a CSV file: `#`-prefixed comment lines, a column-header line, then
/// the data rows.
pub fn write_csv(
    path: &Path,
    comments: &[String],
    columns: &str,
    rows: impl IntoIterator<Item = Vec<Cell>>,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "{columns}")?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the nodal field at one instant: `t,node_x[,node_y],u` per vertex,
/// Dirichlet nodes included at value zero.
pub fn write_snapshot(
    path: &Path,
    mesh: &Mesh,
    part: &DofPartition,
    u_free: &[f64],
    t: f64,
    comments: &[String],
) -> Result<()> {
    let full = to_vertex_vector(mesh, part, u_free);
    let columns = if mesh.dim == 1 {
        "t,node_x,u"
    } else {
        "t,node_x,node_y,u"
    };
    let rows = (0..mesh.n_vertices()).map(|v| {
        let x = mesh.vertex(v);
        let mut row: Vec<Cell> = vec![t.into(), x[0].into()];
        if mesh.dim == 2 {
            row.push(x[1].into());
        }
        row.push(full[v].into());
        row
    });
    write_csv(path, comments, columns, rows)
}

/// `run.json`-style manifest next to the CSVs: experiment name, config echo,
/// crate version, wall time and any experiment-specific entries.
pub fn write_manifest(
    dir: &Path,
    experiment: &str,
    config_echo: &str,
    wall_time_s: f64,
    extra: &[(String, serde_json::Value)],
) -> Result<PathBuf> {
    let mut obj = serde_json::Map::new();
    obj.insert("experiment".into(), experiment.into());
    obj.insert("config".into(), config_echo.into());
    obj.insert(
        "version".into(),
        env!("CARGO_PKG_VERSION").into(),
    );
    obj.insert("wall_time_s".into(), wall_time_s.into());
    for (k, v) in extra {
        obj.insert(k.clone(), v.clone());
    }
    let path = dir.join("run.json");
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(obj))
        .expect("manifest serialization cannot fail");
    std::fs::write(&path, text + "\n")?;
    Ok(path)
}

/// FNV-1a over the raw bit patterns; used to assert that runs share initial
/// data.
pub fn checksum_f64(data: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &x in data {
        for b in x.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Worker count for a fan-out over `items` independent tasks: bounded by
/// `LTS_WAVE_THREADS` when set, otherwise by the available parallelism.
pub fn worker_count(items: usize) -> usize {
    let env = std::env::var("LTS_WAVE_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&k| k >= 1);
    let avail = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    env.unwrap_or(avail).clamp(1, items.max(1))
}

/// Applies `f` to every item on a bounded scoped pool. Results come back in
/// input order regardless of scheduling, so output files are deterministic.
pub fn parallel_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let workers = worker_count(items.len());
    if workers <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let queue: Mutex<Vec<(usize, T)>> = Mutex::new(items.into_iter().enumerate().rev().collect());
    let done: Mutex<Vec<(usize, R)>> = Mutex::new(Vec::with_capacity(n));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let next = queue.lock().unwrap().pop();
                match next {
                    Some((i, item)) => {
                        let r = f(item);
                        done.lock().unwrap().push((i, r));
                    }
                    None => break,
                }
            });
        }
    });
    let mut out = done.into_inner().unwrap();
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, r)| r).collect()
}
