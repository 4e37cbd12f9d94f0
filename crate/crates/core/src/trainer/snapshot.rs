//! Model snapshots: a short text header followed by little-endian f32
//! parameters.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{ModelShape, TinySegModel, TrainError};

const MAGIC: &str = "labelprop-model 1";

pub fn write_snapshot_to(w: &mut impl Write, model: &TinySegModel) -> std::io::Result<()> {
    let s = model.shape();
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "classes {}", s.classes)?;
    writeln!(w, "hidden1 {}", s.hidden1)?;
    writeln!(w, "hidden2 {}", s.hidden2)?;
    writeln!(w, "kernel {}", s.kernel)?;
    writeln!(w, "params {}", model.num_params())?;
    writeln!(w, "end")?;
    for &v in model.params() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_snapshot_from(r: impl Read) -> Result<TinySegModel, TrainError> {
    let bad = |m: String| TrainError::Snapshot(m);
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut next = |r: &mut BufReader<_>| -> Result<String, TrainError> {
        line.clear();
        r.read_line(&mut line)?;
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next(&mut r)? != MAGIC {
        return Err(bad("not a model snapshot".into()));
    }
    let mut field = |r: &mut BufReader<_>, key: &str| -> Result<usize, TrainError> {
        let l = next(r)?;
        l.strip_prefix(key)
            .and_then(|v| v.strip_prefix(' '))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("expected `{key} <n>`, found `{l}`")))
    };
    let shape = ModelShape {
        classes: field(&mut r, "classes")?,
        hidden1: field(&mut r, "hidden1")?,
        hidden2: field(&mut r, "hidden2")?,
        kernel: field(&mut r, "kernel")?,
    };
    let n = field(&mut r, "params")?;
    if next(&mut r)? != "end" {
        return Err(bad("missing header terminator".into()));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 4 * n {
        return Err(bad(format!("expected {} parameter bytes, found {}", 4 * n, bytes.len())));
    }
    let params = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    TinySegModel::from_params(shape, params)
}

pub fn save_snapshot(path: &Path, model: &TinySegModel) -> Result<(), TrainError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_snapshot_to(&mut f, model)?;
    f.flush()?;
    Ok(())
}

pub fn load_snapshot(path: &Path) -> Result<TinySegModel, TrainError> {
    read_snapshot_from(std::fs::File::open(path)?)
}

/// The model as it will read back from a snapshot.
pub fn round_trip(model: &TinySegModel) -> TinySegModel {
    let params = model.params().iter().map(|&v| v as f32 as f64).collect();
    TinySegModel::from_params(model.shape(), params).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TinySegModel {
        TinySegModel::new(
            ModelShape {
                classes: 4,
                hidden1: 3,
                hidden2: 2,
                kernel: 3,
            },
            8,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_f32_rounding() {
        let m = model();
        let mut buf = Vec::new();
        write_snapshot_to(&mut buf, &m).unwrap();
        let back = read_snapshot_from(&buf[..]).unwrap();
        assert_eq!(back, round_trip(&m));
        let mut again = Vec::new();
        write_snapshot_to(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_damage() {
        let mut buf = Vec::new();
        write_snapshot_to(&mut buf, &model()).unwrap();
        assert!(read_snapshot_from(&buf[..buf.len() - 1]).is_err());
        assert!(read_snapshot_from(&b"junk\n"[..]).is_err());
        let text = String::from_utf8_lossy(&buf[..40]).replace("classes 4", "classes x");
        assert!(read_snapshot_from(text.as_bytes()).is_err());
    }
}
