use crate::error::{Error, Result};
use crate::losses::CodeQuadruple;
use crate::scalar::Scalar;

/// Pairwise orderings checked per triplet, written as `d(x, y) < d(x, z)`.
/// `b` background, `f` real foreground, `fh` harmonized, `fc` composite.
pub const REQUIREMENT_LABELS: [&str; 6] = [
    "d(b,f) < d(b,fc)",
    "d(b,fh) < d(b,fc)",
    "d(f,fh) < d(f,fc)",
    "d(fh,f) < d(fh,fc)",
    "d(fh,b) < d(fh,fc)",
    "d(f,b) < d(f,fc)",
];

/// Strict-inequality outcomes for one quadruple; ties fail.
pub fn requirement_checks<T: Scalar>(q: &CodeQuadruple<T>) -> Result<[bool; 6]> {
    let b = &q.background;
    let f = &q.real_fg;
    let fh = &q.harmonized_fg;
    let fc = &q.composite_fg;
    Ok([
        b.distance(f)? < b.distance(fc)?,
        b.distance(fh)? < b.distance(fc)?,
        f.distance(fh)? < f.distance(fc)?,
        fh.distance(f)? < fh.distance(fc)?,
        fh.distance(b)? < fh.distance(fc)?,
        f.distance(b)? < f.distance(fc)?,
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequirementReport {
    pub count: usize,
    pub ratios: [f64; 6],
    pub all_six: f64,
}

pub fn requirement_ratios<T: Scalar>(quadruples: &[CodeQuadruple<T>]) -> Result<RequirementReport> {
    if quadruples.is_empty() {
        return Err(Error::Invalid("requirement ratios need at least one quadruple".into()));
    }
    let mut hits = [0usize; 6];
    let mut all = 0usize;
    for q in quadruples {
        let checks = requirement_checks(q)?;
        for (h, ok) in hits.iter_mut().zip(checks) {
            *h += ok as usize;
        }
        all += checks.iter().all(|&c| c) as usize;
    }
    let n = quadruples.len() as f64;
    Ok(RequirementReport { count: quadruples.len(), ratios: hits.map(|h| h as f64 / n), all_six: all as f64 / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::DomainCode;

    fn code(v: &[f64]) -> DomainCode<f64> {
        DomainCode::new(v.to_vec()).unwrap()
    }

    #[test]
    fn equal_codes_fail_everything() {
        let z = code(&[1.0, 2.0]);
        let q = CodeQuadruple::new(z.clone(), z.clone(), z.clone(), z).unwrap();
        let r = requirement_ratios(&[q]).unwrap();
        assert_eq!(r.ratios, [0.0; 6]);
        assert_eq!(r.all_six, 0.0);
    }

    #[test]
    fn separated_composite_passes_everything() {
        let z = code(&[0.0, 0.0]);
        let q = CodeQuadruple::new(code(&[10.0, 0.0]), z.clone(), z.clone(), z).unwrap();
        let r = requirement_ratios(&[q]).unwrap();
        assert_eq!(r.ratios, [1.0; 6]);
        assert_eq!(r.all_six, 1.0);
    }
}
