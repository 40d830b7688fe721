//! Regular-grid region samples for external contour plotting.

use std::io::Write;

use permbarrier::polynomial::{Polynomial, VariableSet};
use permbarrier::verify::{self, DomainBox};

use crate::error::CliError;

/// Points per axis when the spec does not say.
pub fn default_resolution(dim: usize) -> usize {
    match dim {
        1 => 1000,
        2 => 200,
        _ => 40,
    }
}

/// Union of the (padded) bounding boxes of the regions `{p >= 0}`.
pub fn default_box(regions: &[&Polynomial]) -> Result<DomainBox, CliError> {
    let mut acc: Option<DomainBox> = None;
    for p in regions {
        let b = verify::bounding_box(p)?;
        acc = Some(match acc {
            Some(a) => a.union(&b),
            None => b,
        });
    }
    acc.ok_or_else(|| CliError::invalid("export.box", "no region to derive a box from"))
}

/// Write a grid with columns `x.., h, V, q1..qM`; returns the row count.
/// The last variable varies fastest.
pub fn write_region<W: Write>(
    out: W,
    vars: &VariableSet,
    h: &Polynomial,
    v: &Polynomial,
    unsafe_sets: &[Polynomial],
    domain: &DomainBox,
    resolution: usize,
) -> Result<usize, CliError> {
    let n = vars.dim();
    if n > 3 {
        return Err(CliError::Dimension(n));
    }
    if resolution < 2 {
        return Err(CliError::invalid("export.resolution", format!("need at least 2 points per axis, got {resolution}")));
    }
    if domain.dim() != n {
        return Err(CliError::invalid("export.box", format!("{} intervals for {n} variables", domain.dim())));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = vars.names().to_vec();
    header.extend(["h".to_string(), "V".to_string()]);
    header.extend((1..=unsafe_sets.len()).map(|i| format!("q{i}")));
    w.write_record(&header)?;

    let axis = |k: usize, i: usize| domain.lo[k] + (domain.hi[k] - domain.lo[k]) * i as f64 / (resolution - 1) as f64;
    let rows = resolution.pow(n as u32);
    let mut x = vec![0.0; n];
    let mut record = Vec::with_capacity(header.len());
    for r in 0..rows {
        let mut rem = r;
        for k in (0..n).rev() {
            x[k] = axis(k, rem % resolution);
            rem /= resolution;
        }
        record.clear();
        record.extend(x.iter().map(|v| v.to_string()));
        record.push(h.eval(&x).to_string());
        record.push(v.eval(&x).to_string());
        record.extend(unsafe_sets.iter().map(|q| q.eval(&x).to_string()));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| CliError::Csv(e.into()))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corners_at_resolution_two() {
        let vars = VariableSet::indexed(2);
        let h = Polynomial::parse("1 - x1^2 - x2^2", &vars).unwrap();
        let v = Polynomial::parse("x1^2 + x2^2", &vars).unwrap();
        let domain = DomainBox::symmetric(&[1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        assert_eq!(write_region(&mut buf, &vars, &h, &v, &[], &domain, 2).unwrap(), 4);
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x1,x2,h,V");
        assert_eq!(lines[1], "-1,-2,-4,5");
        assert_eq!(lines[4], "1,2,-4,5");
    }

    #[test]
    fn refuses_four_dimensions() {
        let vars = VariableSet::indexed(4);
        let h = Polynomial::constant(4, 1.0);
        let domain = DomainBox::symmetric(&[1.0; 4]).unwrap();
        let err = write_region(Vec::new(), &vars, &h, &h, &[], &domain, 2).unwrap_err();
        assert!(matches!(err, CliError::Dimension(4)));
    }

    #[test]
    fn default_box_covers_both_regions() {
        let vars = VariableSet::indexed(2);
        let a = Polynomial::parse("1 - x1^2 - x2^2", &vars).unwrap();
        let b = Polynomial::parse("4 - x1^2 - 4*x2^2", &vars).unwrap();
        let d = default_box(&[&a, &b]).unwrap();
        assert!(d.lo[0] <= -2.0 && d.hi[0] >= 2.0 && d.lo[1] <= -1.0 && d.hi[1] >= 1.0);
    }
}
