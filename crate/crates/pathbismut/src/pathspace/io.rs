//! Columnar dumps of particle-major path arrays.
//!
//! Binary layout: the 8-byte magic `PBSPATH1`, then little-endian
//! `u64` fields `dim, n, k, n_total`, then `f64` fields `dt, r0, T`, then
//! `n * (n_total + 1) * dim` little-endian `f64` values, particle-major.

use std::io::{Read, Write};

use super::TimeGrid;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PBSPATH1";

/// Paths of `n` particles on a shared grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PathFile {
    pub grid: TimeGrid,
    pub dim: usize,
    pub n: usize,
    pub values: Vec<f64>,
}

pub fn write_binary<W: Write>(
    mut w: W,
    grid: &TimeGrid,
    dim: usize,
    n: usize,
    values: &[f64],
) -> Result<()> {
    if values.len() != n * grid.points() * dim {
        return Err(Error::SizeMismatch(format!(
            "{} values for {n} particles of {} points in dimension {dim}",
            values.len(),
            grid.points()
        )));
    }
    w.write_all(MAGIC)?;
    for v in [dim, n, grid.k, grid.n_total] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for v in [grid.dt, grid.r0, grid.horizon] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<PathFile> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut word = [0u8; 8];
    let mut next_u64 = |r: &mut R| -> Result<usize> {
        r.read_exact(&mut word)?;
        usize::try_from(u64::from_le_bytes(word))
            .map_err(|_| Error::Format("header field overflows".into()))
    };
    let dim = next_u64(&mut r)?;
    let n = next_u64(&mut r)?;
    let k = next_u64(&mut r)?;
    let n_total = next_u64(&mut r)?;
    let next_f64 = |r: &mut R| -> Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    };
    let dt = next_f64(&mut r)?;
    let r0 = next_f64(&mut r)?;
    let horizon = next_f64(&mut r)?;
    if k > n_total || dim == 0 {
        return Err(Error::Format("inconsistent header".into()));
    }
    let grid = TimeGrid {
        dt,
        r0,
        horizon,
        k,
        n_total,
    };
    let count = n
        .checked_mul(grid.points())
        .and_then(|v| v.checked_mul(dim))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 8 {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {}",
            bytes.len(),
            count * 8
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(PathFile {
        grid,
        dim,
        n,
        values,
    })
}

/// One row per particle and grid point: `particle, index, t, x0, x1, ...`.
pub fn write_csv<W: Write>(
    w: W,
    grid: &TimeGrid,
    dim: usize,
    n: usize,
    values: &[f64],
) -> Result<()> {
    if values.len() != n * grid.points() * dim {
        return Err(Error::SizeMismatch(
            "value count does not match header".into(),
        ));
    }
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["particle".to_string(), "index".to_string(), "t".to_string()];
    header.extend((0..dim).map(|c| format!("x{c}")));
    out.write_record(&header)?;
    let mut row = Vec::with_capacity(3 + dim);
    for i in 0..n {
        for j in 0..grid.points() {
            row.clear();
            row.push(i.to_string());
            row.push(j.to_string());
            row.push(grid.time(j).to_string());
            let base = (i * grid.points() + j) * dim;
            row.extend(values[base..base + dim].iter().map(|v| v.to_string()));
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathspace::make_grid;

    #[test]
    fn binary_round_trip() {
        let grid = make_grid(1.0, 0.25, 0.5).unwrap();
        let values: Vec<f64> = (0..3 * grid.points() * 2)
            .map(|v| v as f64 * 0.1 - 1.0)
            .collect();
        let mut buf = Vec::new();
        write_binary(&mut buf, &grid, 2, 3, &values).unwrap();
        assert_eq!(buf.len(), 8 + 7 * 8 + values.len() * 8);
        let back = read_binary(buf.as_slice()).unwrap();
        assert_eq!(
            back,
            PathFile {
                grid,
                dim: 2,
                n: 3,
                values
            }
        );
    }

    #[test]
    fn payload_is_little_endian_particle_major() {
        let grid = make_grid(0.5, 0.5, 0.0).unwrap();
        let values = vec![1.0, 2.0, 3.0, 4.0];
        let mut buf = Vec::new();
        write_binary(&mut buf, &grid, 1, 2, &values).unwrap();
        let payload = &buf[64..];
        assert_eq!(&payload[16..24], &3.0f64.to_le_bytes());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let grid = make_grid(0.5, 0.5, 0.0).unwrap();
        let mut buf = Vec::new();
        write_binary(&mut buf, &grid, 1, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        buf.pop();
        assert!(matches!(read_binary(buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn csv_has_one_row_per_point() {
        let grid = make_grid(0.5, 0.25, 0.25).unwrap();
        let values: Vec<f64> = (0..2 * grid.points()).map(|v| v as f64).collect();
        let mut buf = Vec::new();
        write_csv(&mut buf, &grid, 1, 2, &values).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "particle,index,t,x0");
        assert_eq!(lines.len(), 1 + 2 * grid.points());
        assert_eq!(lines[1], "0,0,-0.25,0");
    }
}
