pub mod checkpoint;
pub mod pfm;
pub mod png;

pub use pfm::Pfm;

use std::io::Write;

use serde::Serialize;

use crate::error::Result;

/// Serializes `rows` as CSV with a header taken from the field names.
pub fn write_csv<W: Write, T: Serialize>(out: W, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
