//! Plain-text output: 17-significant-digit floats, CSV tables, PGM masks.

use crate::error::Result;
use std::io::Write;
use std::path::Path;

/// Format a float with 17 significant digits, enough to reparse the exact
/// bit pattern.
pub fn fmt_g17(v: f64) -> String {
    format!("{:.16e}", v)
}

/// A CSV table with a fixed header. Cells are written verbatim; use
/// [`fmt_g17`] for floats so reruns are byte-identical.
pub struct CsvWriter<W: Write> {
    out: W,
    columns: usize,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(mut out: W, header: &[&str]) -> Result<Self> {
        writeln!(out, "{}", header.join(","))?;
        Ok(CsvWriter { out, columns: header.len() })
    }

    pub fn row(&mut self, cells: &[String]) -> Result<()> {
        assert_eq!(cells.len(), self.columns, "csv row width");
        writeln!(self.out, "{}", cells.join(","))?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = CsvWriter::new(std::fs::File::create(path)?, header)?;
    for row in rows {
        w.row(row)?;
    }
    Ok(())
}

/// Binary PGM (P5) image with 8-bit depth.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Binary mask PGM: 255 where the predicate holds, 0 elsewhere.
pub fn write_mask_pgm(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let pixels: Vec<u8> = mask.iter().map(|m| if *m { 255 } else { 0 }).collect();
    write_pgm(path, width, height, &pixels)
}
