use std::fs;
use std::io::Write;
use std::path::Path;

use fnv::FnvHasher;
use mcfbsde::{DiscreteChainTree, SolutionField};
use serde::Serialize;
use std::hash::Hasher;

use crate::error::CliError;

/// Writes `bytes` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(dir.join(name)).map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(dir, name, text.as_bytes())
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

/// FNV-1a (64-bit) of the state sequence from the root, each state as a
/// little-endian `u32`, as 16 hex digits.
pub fn path_hash(states: &[usize]) -> String {
    let mut h = FnvHasher::default();
    for &s in states {
        h.write(&(s as u32).to_le_bytes());
    }
    format!("{:016x}", h.finish())
}

pub fn solution_csv(tree: &DiscreteChainTree, field: &SolutionField) -> Result<Vec<u8>, CliError> {
    let (n, m, d) = field.dims();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["node_id", "level", "state_path_hash", "time"].map(String::from).to_vec();
    header.extend((1..=n).map(|i| format!("X_{i}")));
    header.extend((1..=m).map(|j| format!("Y_{j}")));
    for j in 1..=m {
        header.extend((1..=d).map(|k| format!("Z_{j}_{k}")));
    }
    w.write_record(&header)?;
    for v in 0..tree.node_count() {
        let level = tree.level_of(v);
        let mut row = vec![
            v.to_string(),
            level.to_string(),
            path_hash(&tree.path_states(v)),
            num(tree.time(level)),
        ];
        row.extend(field.x[v].iter().map(|&e| num(e)));
        row.extend(field.y[v].iter().map(|&e| num(e)));
        let leaf = tree.is_leaf(v);
        for j in 0..m {
            for k in 0..d {
                row.push(if leaf { String::new() } else { num(field.z[v][(j, k)]) });
            }
        }
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_hash_is_fnv1a_64() {
        assert_eq!(path_hash(&[]), "cbf29ce484222325");
        // FNV-1a over the bytes 01 00 00 00, folded by hand
        let mut h: u64 = 0xcbf29ce484222325;
        for b in [1u8, 0, 0, 0] {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        assert_eq!(path_hash(&[1]), format!("{h:016x}"));
    }
}
