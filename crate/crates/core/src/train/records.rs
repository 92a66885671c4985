//! Per-epoch results, dev-set model selection and the top-k selection metric.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub dev_bleu: f64,
    pub test_bleu: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<EpochRow>,
}

/// `x` with six significant digits, `%g` style.
pub fn format_sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..6).contains(&exp) {
        trim(&format!("{x:.*}", (5 - exp) as usize))
    } else {
        format!("{}e{exp}", trim(mantissa))
    }
}

impl RunRecord {
    pub fn from_rows(rows: Vec<EpochRow>) -> Result<Self> {
        let r = Self { rows };
        r.validate()?;
        Ok(r)
    }

    /// Epochs must run 1, 2, 3, ...
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            if row.epoch != i + 1 {
                return Err(Error::data(format!(
                    "record row {} has epoch {}, expected {}",
                    i + 1,
                    row.epoch,
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// One line per epoch: `epoch train_loss valid_loss dev_bleu test_bleu`.
    pub fn to_loss_log(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{} {} {} {} {}",
                r.epoch,
                format_sig6(r.train_loss),
                format_sig6(r.valid_loss),
                format_sig6(r.dev_bleu),
                format_sig6(r.test_bleu)
            );
        }
        s
    }

    pub fn from_loss_log(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::data(format!("loss log line {}: {line:?}", n + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            rows.push(EpochRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(f[1])?,
                valid_loss: num(f[2])?,
                dev_bleu: num(f[3])?,
                test_bleu: num(f[4])?,
            });
        }
        Self::from_rows(rows)
    }

    /// Exact, lossless text form for checkpoint headers.
    pub fn to_compact(&self) -> String {
        self.rows
            .iter()
            .map(|r| format!("{} {} {} {} {}", r.epoch, r.train_loss, r.valid_loss, r.dev_bleu, r.test_bleu))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_compact(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Ok(Self::default());
        }
        Self::from_loss_log(&s.replace(',', "\n"))
    }
}

/// Epoch with the highest dev BLEU; the earliest such epoch on ties.
pub fn select_best(record: &RunRecord) -> Result<usize> {
    let mut best: Option<&EpochRow> = None;
    for r in &record.rows {
        if best.is_none_or(|b| r.dev_bleu > b.dev_bleu) {
            best = Some(r);
        }
    }
    best.map(|r| r.epoch)
        .ok_or_else(|| Error::data("cannot select from an empty run record"))
}

/// Whether the dev-selected epoch is among the `k` best epochs by test
/// BLEU. Its rank is one plus the number of epochs with strictly higher
/// test BLEU, so tied epochs share the better rank.
pub fn topk_selection(record: &RunRecord, k: usize) -> Result<bool> {
    if k < 1 {
        return Err(Error::param("k must be at least 1"));
    }
    let epoch = select_best(record)?;
    let chosen = record.rows[epoch - 1].test_bleu;
    let rank = 1 + record.rows.iter().filter(|r| r.test_bleu > chosen).count();
    Ok(rank <= k)
}

/// Fraction of runs whose selected model ranks in the top `k`.
pub fn selection_rate(records: &[RunRecord], k: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::data("no run records"));
    }
    let mut hits = 0;
    for r in records {
        if topk_selection(r, k)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(dev: &[f64], test: &[f64]) -> RunRecord {
        RunRecord {
            rows: dev
                .iter()
                .zip(test)
                .enumerate()
                .map(|(i, (&d, &t))| EpochRow {
                    epoch: i + 1,
                    train_loss: 0.0,
                    valid_loss: 0.0,
                    dev_bleu: d,
                    test_bleu: t,
                })
                .collect(),
        }
    }

    #[test]
    fn select_examples() {
        assert_eq!(select_best(&record(&[1.0, 2.0, 3.0], &[0.0; 3])).unwrap(), 3);
        assert_eq!(select_best(&record(&[2.0, 2.0], &[0.0; 2])).unwrap(), 1);
        assert_eq!(select_best(&record(&[5.0], &[0.0])).unwrap(), 1);
        assert!(select_best(&RunRecord::default()).is_err());
    }

    #[test]
    fn topk_examples() {
        assert!(topk_selection(&record(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 1).unwrap());
        let r = record(&[3.0, 1.0, 2.0], &[1.0, 3.0, 2.0]);
        assert!(!topk_selection(&r, 1).unwrap());
        assert!(topk_selection(&r, 3).unwrap());
        assert!(topk_selection(&record(&[1.0, 4.0], &[7.0, 7.0]), 1).unwrap());
        assert!(topk_selection(&r, 0).is_err());
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(1.234_567_89), "1.23457");
        assert_eq!(format_sig6(100.0), "100");
        assert_eq!(format_sig6(0.000123456789), "0.000123457");
        assert_eq!(format_sig6(1234567.0), "1.23457e6");
        assert_eq!(format_sig6(9.9999999), "10");
        assert_eq!(format_sig6(0.0), "0");
    }

    #[test]
    fn loss_log_round_trip() {
        let r = record(&[1.5, 2.25], &[3.0, 4.0]);
        assert_eq!(RunRecord::from_loss_log(&r.to_loss_log()).unwrap(), r);
        let back = RunRecord::from_compact(&r.to_compact()).unwrap();
        assert_eq!(back, r);
        assert!(RunRecord::from_loss_log("2 1 1 1 1\n").is_err());
    }
}
