//! On-disk formats.
//!
//! * Real matrices: an ASCII header line `DMAT <rows> <cols> f64` followed by
//!   `rows * cols` little-endian `f64` values in row-major order.
//! * Binary matrices: a header line `BMAT <rows> <cols>` followed by `0`/`1`
//!   characters in row-major order, one line per row. Readers ignore ASCII
//!   whitespace between the digits.
//! * Constraints: one text line per (user, window),
//!   `user_id window_start window_end count exact|noisy`, with 0-based
//!   half-open round intervals. An optional leading `# rounds <n>` comment
//!   records the round count; other `#` lines are ignored.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::analytics::{ConstraintSet, WindowCount};
use crate::flsim::ParticipantMatrix;
use crate::linalg::DenseMatrix;
use crate::Error;

fn read_header<R: BufRead>(r: &mut R, magic: &str, fields: usize) -> Result<Vec<String>, Error> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let parts: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
    if parts.first().map(String::as_str) != Some(magic) || parts.len() != fields {
        return Err(Error::Parse(format!("expected `{magic}` header, got {:?}", line.trim_end())));
    }
    Ok(parts)
}

fn parse_dim(s: &str) -> Result<usize, Error> {
    s.parse().map_err(|_| Error::Parse(format!("bad dimension `{s}`")))
}

pub fn write_dmat<W: Write>(mut w: W, m: &DenseMatrix) -> Result<(), Error> {
    writeln!(w, "DMAT {} {} f64", m.rows(), m.cols())?;
    let mut buf = Vec::with_capacity(8 * m.rows() * m.cols());
    for v in m.to_row_major() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dmat<R: BufRead>(mut r: R) -> Result<DenseMatrix, Error> {
    let head = read_header(&mut r, "DMAT", 4)?;
    if head[3] != "f64" {
        return Err(Error::Parse(format!("unsupported dtype `{}`", head[3])));
    }
    let (rows, cols) = (parse_dim(&head[1])?, parse_dim(&head[2])?);
    let mut bytes = vec![0u8; 8 * rows * cols];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Parse(format!("DMAT payload shorter than {rows}x{cols}: {e}")))?;
    let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    DenseMatrix::from_row_major(rows, cols, &data)
}

pub fn write_bmat<W: Write>(mut w: W, p: &ParticipantMatrix) -> Result<(), Error> {
    writeln!(w, "BMAT {} {}", p.rounds(), p.users())?;
    let mut line = String::with_capacity(p.users() + 1);
    for r in 0..p.rounds() {
        line.clear();
        line.extend((0..p.users()).map(|k| if p.get(r, k) { '1' } else { '0' }));
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn read_bmat<R: BufRead>(mut r: R) -> Result<ParticipantMatrix, Error> {
    let head = read_header(&mut r, "BMAT", 3)?;
    let (rows, cols) = (parse_dim(&head[1])?, parse_dim(&head[2])?);
    let mut rest = String::new();
    r.read_to_string(&mut rest)?;
    let bits = rest
        .chars()
        .filter(|c| !c.is_ascii_whitespace())
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            other => Err(Error::Parse(format!("unexpected `{other}` in BMAT body"))),
        })
        .collect::<Result<Vec<u8>, _>>()?;
    if bits.len() != rows * cols {
        return Err(Error::Parse(format!("BMAT body has {} entries, header says {}", bits.len(), rows * cols)));
    }
    ParticipantMatrix::from_bits(rows, cols, bits)
}

pub fn write_constraints<W: Write>(mut w: W, cs: &ConstraintSet) -> Result<(), Error> {
    writeln!(w, "# rounds {} users {}", cs.num_rounds, cs.num_users())?;
    let tag = if cs.noisy { "noisy" } else { "exact" };
    for (k, ws) in cs.users.iter().enumerate() {
        for win in ws {
            writeln!(w, "{k} {} {} {} {tag}", win.start, win.end, win.count)?;
        }
    }
    Ok(())
}

/// Reads a constraint file. `num_rounds` and `num_users` fill in what the
/// records cannot express (trailing rounds, users without reports); pass
/// `None` to take them from the header comment or infer them.
pub fn read_constraints<R: BufRead>(r: R, num_rounds: Option<usize>, num_users: Option<usize>) -> Result<ConstraintSet, Error> {
    let mut records: Vec<(usize, WindowCount, bool)> = Vec::new();
    let (mut hdr_rounds, mut hdr_users) = (None, None);
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if let Some(comment) = trimmed.strip_prefix('#') {
            let parts: Vec<&str> = comment.split_whitespace().collect();
            for pair in parts.chunks(2) {
                match pair {
                    ["rounds", v] => hdr_rounds = v.parse().ok(),
                    ["users", v] => hdr_users = v.parse().ok(),
                    _ => {}
                }
            }
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        let bad = || Error::Parse(format!("constraint line {}: `{trimmed}`", lineno + 1));
        let f: Vec<&str> = trimmed.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let user: usize = f[0].parse().map_err(|_| bad())?;
        let start: usize = f[1].parse().map_err(|_| bad())?;
        let end: usize = f[2].parse().map_err(|_| bad())?;
        let count: i64 = f[3].parse().map_err(|_| bad())?;
        let noisy = match f[4] {
            "exact" => false,
            "noisy" => true,
            _ => return Err(bad()),
        };
        if end <= start {
            return Err(bad());
        }
        records.push((user, WindowCount { start, end, count }, noisy));
    }
    let max_end = records.iter().map(|(_, w, _)| w.end).max().unwrap_or(0);
    let n = num_rounds.or(hdr_rounds).unwrap_or(max_end);
    if max_end > n {
        return Err(Error::Parse(format!("window ends at round {max_end} but only {n} rounds")));
    }
    let u = num_users.or(hdr_users).unwrap_or_else(|| records.iter().map(|(k, _, _)| k + 1).max().unwrap_or(0));
    let mut users = vec![Vec::new(); u];
    let mut noisy = false;
    for (k, w, nz) in records {
        if k >= u {
            return Err(Error::Parse(format!("user {k} out of range for {u} users")));
        }
        users[k].push(w);
        noisy |= nz;
    }
    for ws in &mut users {
        ws.sort_by_key(|w| w.start);
    }
    let granularity = users.iter().flatten().map(WindowCount::len).max().unwrap_or(1);
    Ok(ConstraintSet {
        num_rounds: n,
        granularity,
        kept_fraction: 1.0,
        count_noise_sigma: 0.0,
        noisy,
        users,
    })
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>, Error> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(std::io::BufReader::new(f))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, Error> {
    let f = std::fs::File::create(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(std::io::BufWriter::new(f))
}

pub fn load_dmat(path: &Path) -> Result<DenseMatrix, Error> {
    read_dmat(open(path)?)
}

pub fn save_dmat(path: &Path, m: &DenseMatrix) -> Result<(), Error> {
    let mut w = create(path)?;
    write_dmat(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_bmat(path: &Path) -> Result<ParticipantMatrix, Error> {
    read_bmat(open(path)?)
}

pub fn save_bmat(path: &Path, p: &ParticipantMatrix) -> Result<(), Error> {
    let mut w = create(path)?;
    write_bmat(&mut w, p)?;
    w.flush()?;
    Ok(())
}

pub fn load_constraints(path: &Path) -> Result<ConstraintSet, Error> {
    read_constraints(open(path)?, None, None)
}

pub fn save_constraints(path: &Path, cs: &ConstraintSet) -> Result<(), Error> {
    let mut w = create(path)?;
    write_constraints(&mut w, cs)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{make_constraints, perturb_counts};
    use proptest::prelude::*;

    #[test]
    fn dmat_header_layout() {
        let m = DenseMatrix::from_row_major(1, 2, &[1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_dmat(&mut buf, &m).unwrap();
        assert!(buf.starts_with(b"DMAT 1 2 f64\n"));
        assert_eq!(&buf[13..21], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 13 + 16);
    }

    #[test]
    fn bmat_layout() {
        let p = ParticipantMatrix::from_columns(&[vec![1, 0], vec![0, 1], vec![1, 1]]);
        let mut buf = Vec::new();
        write_bmat(&mut buf, &p).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "BMAT 2 3\n101\n011\n");
        assert_eq!(read_bmat(&buf[..]).unwrap(), p);
        assert_eq!(read_bmat(&b"BMAT 2 3\n101011"[..]).unwrap(), p);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(read_dmat(&b"DMAT 2 2 f32\n"[..]).is_err());
        assert!(read_dmat(&b"DMAT 1 1 f64\n1234"[..]).is_err());
        assert!(read_bmat(&b"BMAT 1 2\n12"[..]).is_err());
        assert!(read_bmat(&b"BMAT 1 2\n1"[..]).is_err());
        assert!(read_constraints(&b"0 3 1 1 exact\n"[..], None, None).is_err());
        assert!(read_constraints(&b"0 0 4 1 maybe\n"[..], None, None).is_err());
    }

    #[test]
    fn constraint_file_lines() {
        let p = ParticipantMatrix::from_columns(&[vec![1, 1, 1, 0, 0, 0, 1, 1, 0, 0]]);
        let cs = make_constraints(&p, 5);
        let mut buf = Vec::new();
        write_constraints(&mut buf, &cs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "# rounds 10 users 1\n0 0 5 3 exact\n0 5 10 2 exact\n");
        let back = read_constraints(&buf[..], None, None).unwrap();
        assert_eq!(back.users, cs.users);
        assert_eq!(back.num_rounds, 10);
        assert!(!back.noisy);

        let noisy = perturb_counts(&cs, 1.0, 3);
        let mut buf = Vec::new();
        write_constraints(&mut buf, &noisy).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().contains("noisy"));
        assert!(read_constraints(&buf[..], None, None).unwrap().noisy);
    }

    proptest! {
        #[test]
        fn dmat_round_trip_is_bit_exact(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut x = seed;
            let m = DenseMatrix::from_fn(rows, cols, |_, _| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(x >> 12 | 0x3ff0_0000_0000_0000) - 1.5
            });
            let mut buf = Vec::new();
            write_dmat(&mut buf, &m).unwrap();
            let back = read_dmat(&buf[..]).unwrap();
            let bits = |m: &DenseMatrix| m.to_row_major().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&m));
        }
    }
}
