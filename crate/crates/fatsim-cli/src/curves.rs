//! Tidy-CSV export of metrics streams for external plotting.

use fatsim_core::orchestrator::{read_records, ExperimentError};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Write (run_id, round, metric, value) rows for every metric present on
/// every record; the run_id column (file stem) distinguishes merged runs.
pub fn export(files: &[PathBuf], out: &Path) -> Result<(), ExperimentError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    writeln!(w, "run_id,round,metric,value")?;
    for path in files {
        let text = std::fs::read_to_string(path)?;
        let records = read_records(&text).map_err(ExperimentError::Config)?;
        let run_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
        for rec in &records {
            for (metric, value) in rec.metric_values() {
                writeln!(w, "{run_id},{},{metric},{value}", rec.round)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
