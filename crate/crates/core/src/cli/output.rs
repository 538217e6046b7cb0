//! CSV artefacts written next to heatmaps and models.

use std::path::{Path, PathBuf};

use crate::aggregate::SaliencyMap;
use crate::error::{Error, Result};
use crate::multilayer::{CombineMode, LayerWeights};

/// Version written in the first column of every CSV row this module emits.
pub const CSV_SCHEMA_VERSION: u32 = 1;

fn writer(path: &Path) -> Result<csv::Writer<std::io::BufWriter<std::fs::File>>> {
    Ok(csv::Writer::from_writer(std::io::BufWriter::new(std::fs::File::create(path)?)))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// `out` with its extension replaced by `suffix` (which includes the leading dot).
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

/// Raw map values, one CSV row per map row.
///
/// Columns: `schema_version,y,x0,...,x{W-1}`.
pub fn write_map_grid(map: &SaliencyMap, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["schema_version".to_string(), "y".to_string()];
    header.extend((0..map.width).map(|x| format!("x{x}")));
    w.write_record(&header).map_err(csv_err)?;
    for y in 0..map.height {
        let mut row = vec![CSV_SCHEMA_VERSION.to_string(), y.to_string()];
        row.extend((0..map.width).map(|x| map.get(y, x).to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: `schema_version,scheme,mode,layer,gamma`.
pub fn write_weights(weights: &LayerWeights, mode: CombineMode, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["schema_version", "scheme", "mode", "layer", "gamma"]).map_err(csv_err)?;
    for (layer, gamma) in &weights.gamma {
        w.write_record([
            CSV_SCHEMA_VERSION.to_string(),
            weights.scheme.to_string(),
            mode.to_string(),
            layer.clone(),
            gamma.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: `schema_version,epoch,loss`, epochs counted from 1.
pub fn write_loss_curve(curve: &[f64], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["schema_version", "epoch", "loss"]).map_err(csv_err)?;
    for (e, l) in curve.iter().enumerate() {
        w.write_record([CSV_SCHEMA_VERSION.to_string(), (e + 1).to_string(), l.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: `schema_version,target,max_rel_err`.
pub fn write_gradcheck(rows: &[(String, f64)], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["schema_version", "target", "max_rel_err"]).map_err(csv_err)?;
    for (t, e) in rows {
        w.write_record([CSV_SCHEMA_VERSION.to_string(), t.clone(), e.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_map_grid(&SaliencyMap::new(2, 2, vec![0.5, 1.0, -2.0, 0.25]).unwrap(), &p).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert_eq!(s, "schema_version,y,x0,x1\n1,0,0.5,1\n1,1,-2,0.25\n");
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(sibling(Path::new("a/map.pgm"), ".csv"), PathBuf::from("a/map.csv"));
        assert_eq!(sibling(Path::new("model.sg"), ".loss.csv"), PathBuf::from("model.loss.csv"));
        assert_eq!(sibling(Path::new("plain"), ".csv"), PathBuf::from("plain.csv"));
    }
}
