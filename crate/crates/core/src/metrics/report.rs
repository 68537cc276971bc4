use std::io::{BufRead, Write};

use super::bins::BinSummary;
use super::bradley_terry::PairwiseVote;
use super::image::MetricRecord;
use crate::error::{Error, Result};

pub fn write_metric_records(out: &mut impl Write, records: &[MetricRecord]) -> Result<()> {
    writeln!(out, "id,mse,fmse,psnr,fg_ratio")?;
    for r in records {
        writeln!(out, "{},{:.6},{:.6},{:.6},{:.6}", r.id, r.mse, r.fmse, r.psnr, r.fg_ratio)?;
    }
    Ok(())
}

/// Rows are metrics, columns are foreground-ratio ranges. Empty bins print `-`.
pub fn write_bin_summary(out: &mut impl Write, bins: &[BinSummary]) -> Result<()> {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
    write!(out, "metric")?;
    for b in bins {
        write!(out, ",{}", b.bin.label)?;
    }
    writeln!(out)?;
    write!(out, "count")?;
    for b in bins {
        write!(out, ",{}", b.count)?;
    }
    writeln!(out)?;
    for (name, pick) in [("mse", (|b: &BinSummary| b.mse) as fn(&BinSummary) -> Option<f64>), ("fmse", |b| b.fmse)] {
        write!(out, "{name}")?;
        for b in bins {
            write!(out, ",{}", fmt(pick(b)))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Reads `item_a,item_b,winner` rows; a header row with those names is skipped.
pub fn parse_votes(input: impl BufRead) -> Result<Vec<PairwiseVote>> {
    let mut votes = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Invalid(format!("votes line {}: expected 3 fields, got {}", lineno + 1, fields.len())));
        }
        if lineno == 0 && fields == ["item_a", "item_b", "winner"] {
            continue;
        }
        votes.push(
            PairwiseVote::new(fields[0], fields[1], fields[2])
                .map_err(|e| Error::Invalid(format!("votes line {}: {e}", lineno + 1)))?,
        );
    }
    Ok(votes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_header() {
        let text = "item_a,item_b,winner\nx,y,x\n\ny,z,z\n";
        let votes = parse_votes(text.as_bytes()).unwrap();
        assert_eq!(votes.len(), 2);
        assert_eq!(votes[1].winner, "z");
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(parse_votes("a,b\n".as_bytes()).is_err());
        assert!(parse_votes("a,b,c\n".as_bytes()).is_err());
    }
}
