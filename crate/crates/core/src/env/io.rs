//! Transition dumps: a compact binary log and a CSV export.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! magic  [u8; 8]  = b"DSTRLOG1"
//! state_dim  u32
//! action_dim u32
//! count      u64
//! count × { s: f64[state_dim], a: f64[action_dim], s_next: f64[state_dim],
//!           r: f64, flags: u8 (bit 0 terminated, bit 1 truncated) }
//! ```

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::Transition;
use crate::error::{Error, Result};

pub const TRANSITION_LOG_MAGIC: &[u8; 8] = b"DSTRLOG1";
pub const TRANSITION_CSV_SCHEMA: &str = "dynasaur.transitions.v1";

pub fn write_transition_log(path: &Path, data: &[Transition]) -> Result<()> {
    let (ns, na) = dims(data)?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(TRANSITION_LOG_MAGIC)?;
    w.write_all(&(ns as u32).to_le_bytes())?;
    w.write_all(&(na as u32).to_le_bytes())?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    for t in data {
        for v in t.s.iter().chain(&t.a).chain(&t.s_next).chain(std::iter::once(&t.r)) {
            w.write_all(&v.to_le_bytes())?;
        }
        let flags = u8::from(t.terminated) | (u8::from(t.truncated) << 1);
        w.write_all(&[flags])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_transition_log(path: &Path) -> Result<Vec<Transition>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 24 || &bytes[..8] != TRANSITION_LOG_MAGIC {
        return Err(bad("not a transition log"));
    }
    let ns = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let na = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let rec = 8 * (2 * ns + na + 1) + 1;
    if bytes.len() != 24 + rec * count {
        return Err(bad("truncated or oversized body"));
    }
    let f = |b: &[u8]| f64::from_le_bytes(b.try_into().unwrap());
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let body = &bytes[24 + k * rec..24 + (k + 1) * rec];
        let vals: Vec<f64> = body[..rec - 1].chunks_exact(8).map(f).collect();
        let flags = body[rec - 1];
        if flags > 3 {
            return Err(bad("invalid flag byte"));
        }
        out.push(Transition {
            s: vals[..ns].to_vec(),
            a: vals[ns..ns + na].to_vec(),
            s_next: vals[ns + na..2 * ns + na].to_vec(),
            r: vals[2 * ns + na],
            terminated: flags & 1 != 0,
            truncated: flags & 2 != 0,
        });
    }
    Ok(out)
}

/// Columns: schema/kind, t, s…, a…, s′…, r, terminated, truncated.
pub fn write_transition_csv(path: &Path, data: &[Transition]) -> Result<()> {
    let (ns, na) = dims(data)?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let mut header = vec![TRANSITION_CSV_SCHEMA.to_string(), "t".into()];
    header.extend((0..ns).map(|i| format!("s{i}")));
    header.extend((0..na).map(|i| format!("a{i}")));
    header.extend((0..ns).map(|i| format!("s_next{i}")));
    header.extend(["r".into(), "terminated".into(), "truncated".into()]);
    writeln!(w, "{}", header.join(","))?;
    for (t, tr) in data.iter().enumerate() {
        let mut row = vec!["transition".to_string(), t.to_string()];
        row.extend(tr.s.iter().chain(&tr.a).chain(&tr.s_next).map(|v| format!("{v:e}")));
        row.push(format!("{:e}", tr.r));
        row.push(u8::from(tr.terminated).to_string());
        row.push(u8::from(tr.truncated).to_string());
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn dims(data: &[Transition]) -> Result<(usize, usize)> {
    let Some(first) = data.first() else {
        return Ok((0, 0));
    };
    let (ns, na) = (first.s.len(), first.a.len());
    for t in data {
        if t.s.len() != ns || t.s_next.len() != ns || t.a.len() != na {
            return Err(Error::Shape {
                context: "transition dump",
                expected: ns,
                got: t.s.len(),
            });
        }
    }
    Ok((ns, na))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Transition> {
        vec![
            Transition {
                s: vec![0.1, -0.2],
                a: vec![0.5],
                s_next: vec![0.11, -0.19],
                r: 0.75,
                terminated: false,
                truncated: false,
            },
            Transition {
                s: vec![1.9, 0.4],
                a: vec![-1.0],
                s_next: vec![2.01, 0.42],
                r: 0.0,
                terminated: true,
                truncated: false,
            },
            Transition {
                s: vec![f64::MIN_POSITIVE, 1e300],
                a: vec![1.0],
                s_next: vec![0.0, -0.0],
                r: -3.5,
                terminated: false,
                truncated: true,
            },
        ]
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.bin");
        write_transition_log(&path, &sample()).unwrap();
        let back = read_transition_log(&path).unwrap();
        assert_eq!(back, sample());
    }

    #[test]
    fn corrupted_log_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.bin");
        write_transition_log(&path, &sample()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_transition_log(&path).is_err());
    }

    #[test]
    fn csv_has_schema_header_and_one_row_per_transition() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.csv");
        write_transition_csv(&path, &sample()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "dynasaur.transitions.v1,t,s0,s1,a0,s_next0,s_next1,r,terminated,truncated"
        );
        assert_eq!(lines.len(), 4);
        let cells: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(cells[0], "transition");
        assert_eq!(cells[1], "1");
        assert_eq!(cells[cells.len() - 2], "1");
        assert_eq!(cells[4].parse::<f64>().unwrap(), -1.0);
    }
}
