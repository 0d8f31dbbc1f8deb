//! Dense field grids and their CSV format.
//!
//! ```text
//! width,height,cell_size,units
//! v(0,0),v(1,0),...,v(w-1,0)
//! ...
//! v(0,h-1),...,v(w-1,h-1)
//! ```
//!
//! The first line carries the four header values; each following line is one
//! grid row. Values are written with Rust's shortest round-trip formatting so
//! a write/read cycle is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{GppError, Result};
use crate::gp::{GridSpec, Location};

#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    grid: GridSpec,
    units: String,
    values: Vec<f64>,
}

impl FieldGrid {
    pub fn new(grid: GridSpec, units: &str, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(GppError::Field(format!(
                "expected {} values for a {}x{} grid, found {}",
                grid.len(),
                grid.width,
                grid.height,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GppError::Field(format!("value at cell {i} is not finite")));
        }
        if units.contains(',') || units.contains('\n') {
            return Err(GppError::Field("units label may not contain commas or newlines".into()));
        }
        Ok(Self {
            grid,
            units: units.to_string(),
            values,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn units(&self) -> &str {
        &self.units
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, loc: &Location) -> f64 {
        self.values[loc.index]
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{},{},{},{}",
            self.grid.width, self.grid.height, self.grid.cell_size, self.units
        );
        for row in self.values.chunks(self.grid.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| GppError::Field("empty field file".into()))?;
        let parts: Vec<&str> = header.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(GppError::Field(format!(
                "malformed header `{header}`: expected width,height,cell_size,units"
            )));
        }
        let bad_header = |what: &str| GppError::Field(format!("malformed header: bad {what}"));
        let width: usize = parts[0].parse().map_err(|_| bad_header("width"))?;
        let height: usize = parts[1].parse().map_err(|_| bad_header("height"))?;
        let cell_size: f64 = parts[2].parse().map_err(|_| bad_header("cell_size"))?;
        let grid = GridSpec::new(width, height, cell_size)?;
        let mut values = Vec::with_capacity(grid.len());
        for (row, line) in lines.enumerate() {
            for (col, cell) in line.split(',').enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    GppError::Field(format!("non-numeric cell `{}` at row {row}, column {col}", cell.trim()))
                })?;
                values.push(v);
            }
        }
        Self::new(grid, parts[3], values)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::parse_csv(&fs::read_to_string(path)?)
    }
}

pub fn load_field_csv(path: &Path) -> Result<FieldGrid> {
    FieldGrid::load_csv(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_and_parse_errors() {
        let grid = GridSpec::new(14, 12, 40.0).unwrap();
        let ok = FieldGrid::new(grid, "mg/l", (0..168).map(|i| 3.0 + 0.01 * i as f64).collect())
            .unwrap();
        let text = ok.to_csv_string();
        assert_eq!(FieldGrid::parse_csv(&text).unwrap(), ok);

        let short = text.trim_end().rsplit_once(',').unwrap().0.to_string();
        assert!(matches!(FieldGrid::parse_csv(&short), Err(GppError::Field(m)) if m.contains("167")));
        assert!(FieldGrid::parse_csv("14,12,40\n1,2").is_err());
        assert!(FieldGrid::parse_csv("1,1,1.0,km\nabc").is_err());
        assert!(FieldGrid::parse_csv("").is_err());
    }
}
