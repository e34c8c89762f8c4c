//! CSV artifacts. Every file starts with `# runspec_sha256=<hex>` followed by
//! a header row.

use std::path::Path;

use crate::error::Result;
use crate::objective::MetricReport;
use crate::trainer::{AblationReport, RunHistory};

pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self {
            header: header.iter().map(|h| h.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<I, S>(&mut self, row: I)
    where
        I: IntoIterator<Item = S>,
        S: ToString,
    {
        self.rows.push(row.into_iter().map(|c| c.to_string()).collect());
    }

    pub fn to_string(&self, spec_hash: &str) -> Result<String> {
        let mut out = format!("# runspec_sha256={spec_hash}\n").into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(&self.header).map_err(csv_io)?;
            for r in &self.rows {
                w.write_record(r).map_err(csv_io)?;
            }
            w.flush()?;
        }
        Ok(String::from_utf8(out).expect("csv output is utf-8"))
    }

    pub fn write(&self, path: &Path, spec_hash: &str) -> Result<()> {
        std::fs::write(path, self.to_string(spec_hash)?)?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

pub fn history_table(h: &RunHistory) -> CsvTable {
    let mut t = CsvTable::new(&["epoch", "train_mse", "train_ss", "train_total", "val_mse", "val_psnr", "seconds"]);
    for r in &h.epochs {
        t.push([
            r.epoch.to_string(),
            r.train_mse.to_string(),
            r.train_ss.to_string(),
            r.train_total.to_string(),
            r.val_mse.to_string(),
            r.val_psnr.to_string(),
            format!("{:.3}", r.seconds),
        ]);
    }
    t
}

pub fn metric_table(split: &str, r: &MetricReport) -> CsvTable {
    let mut t = CsvTable::new(&["split", "windows", "mse", "psnr", "mean_cosine"]);
    t.push([
        split.to_string(),
        r.windows.to_string(),
        r.mse.to_string(),
        r.psnr.to_string(),
        r.mean_cosine.to_string(),
    ]);
    t
}

pub fn step_cosine_table(r: &MetricReport) -> CsvTable {
    let mut t = CsvTable::new(&["step", "mean_cosine"]);
    for (k, c) in r.step_cosines.iter().enumerate() {
        t.push([(k + 1).to_string(), c.to_string()]);
    }
    t
}

pub fn ablation_table(a: &AblationReport) -> CsvTable {
    let mut t = CsvTable::new(&[
        "variant",
        "lambda",
        "seeds",
        "test_mse_mean",
        "test_mse_sd",
        "test_psnr_mean",
        "test_psnr_sd",
    ]);
    for c in &a.cells {
        let (mm, ms) = c.test_mse();
        let (pm, ps) = c.test_psnr();
        t.push([
            c.variant.as_str().to_string(),
            c.lambda.to_string(),
            c.runs.len().to_string(),
            mm.to_string(),
            ms.to_string(),
            pm.to_string(),
            ps.to_string(),
        ]);
    }
    t
}

pub fn curves_table(a: &AblationReport) -> CsvTable {
    let mut t = CsvTable::new(&[
        "variant",
        "lambda",
        "seed",
        "epoch",
        "train_mse",
        "train_ss",
        "train_total",
        "val_mse",
        "val_psnr",
    ]);
    for c in &a.cells {
        for run in &c.runs {
            for r in &run.history.epochs {
                t.push([
                    c.variant.as_str().to_string(),
                    c.lambda.to_string(),
                    run.seed.to_string(),
                    r.epoch.to_string(),
                    r.train_mse.to_string(),
                    r.train_ss.to_string(),
                    r.train_total.to_string(),
                    r.val_mse.to_string(),
                    r.val_psnr.to_string(),
                ]);
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comment_then_header_then_quoted_rows() {
        let mut t = CsvTable::new(&["a", "b"]);
        t.push(["1", "x,y"]);
        let s = t.to_string("abc").unwrap();
        assert_eq!(s, "# runspec_sha256=abc\na,b\n1,\"x,y\"\n");
    }
}
