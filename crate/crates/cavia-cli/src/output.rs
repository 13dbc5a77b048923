//! CSV emission. Every metric file opens with a comment line referencing the
//! manifest hash, and all numbers carry 17 significant digits.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use cavia::util::format_g17;
use cavia::Result;

pub struct CsvWriter {
    inner: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path, manifest_hash: &str, header: &str) -> Result<Self> {
        let file = File::create(path)?;
        let mut inner = BufWriter::new(file);
        writeln!(inner, "# manifest {manifest_hash}")?;
        writeln!(inner, "{header}")?;
        Ok(Self { inner })
    }

    pub fn row(&mut self, fields: &[CsvField]) -> Result<()> {
        let mut line = String::new();
        for (i, f) in fields.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            match f {
                CsvField::Int(v) => line.push_str(&v.to_string()),
                CsvField::Float(v) => line.push_str(&format_g17(*v)),
                CsvField::Str(s) => line.push_str(s),
            }
        }
        writeln!(self.inner, "{line}")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub enum CsvField<'a> {
    Int(i64),
    Float(f64),
    Str(&'a str),
}

impl<'a> From<usize> for CsvField<'a> {
    fn from(v: usize) -> Self {
        CsvField::Int(v as i64)
    }
}

impl<'a> From<f64> for CsvField<'a> {
    fn from(v: f64) -> Self {
        CsvField::Float(v)
    }
}

impl<'a> From<&'a str> for CsvField<'a> {
    fn from(v: &'a str) -> Self {
        CsvField::Str(v)
    }
}
