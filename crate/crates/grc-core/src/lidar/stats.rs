//! Histogram and distribution-shift diagnostics for point clouds.

use super::PointCloud;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Distance,
    Reflectance,
}

impl Field {
    pub fn extract(&self, cloud: &PointCloud) -> Vec<f64> {
        match self {
            Field::Distance => cloud.distances(),
            Field::Reflectance => cloud.reflectances(),
        }
    }
}

impl std::str::FromStr for Field {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distance" => Ok(Field::Distance),
            "reflectance" => Ok(Field::Reflectance),
            other => Err(Error::Config(format!(
                "unknown histogram field '{other}' (distance|reflectance)"
            ))),
        }
    }
}

/// Equal-width histogram over [0, max(values)].
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// bins + 1 edges, first 0, last the max value (or 1 when max == 0).
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// CSV rows: bin_lo, bin_hi, count, frequency. The count column is the raw
    /// histogram; the frequency column is count / n for size-independent
    /// comparisons.
    pub fn to_csv(&self) -> String {
        let n = self.total().max(1) as f64;
        let mut out = String::from("bin_lo,bin_hi,count,frequency\n");
        for (i, &c) in self.counts.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.edges[i],
                self.edges[i + 1],
                c,
                c as f64 / n
            ));
        }
        out
    }
}

/// Histogram of a point field. Counts always sum to the point count.
pub fn histogram(cloud: &PointCloud, field: Field, bins: usize) -> Result<Histogram> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("histogram of an empty cloud".into()));
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let values = field.extract(cloud);
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let hi = if max > 0.0 { max } else { 1.0 };
    let mut counts = vec![0u64; bins];
    for &v in &values {
        let idx = ((v / hi) * bins as f64).floor() as usize;
        counts[idx.min(bins - 1)] += 1;
    }
    let edges = (0..=bins).map(|i| hi * i as f64 / bins as f64).collect();
    Ok(Histogram { edges, counts })
}

/// Wasserstein-1 distance between two empirical distributions given as raw
/// samples: the integral of |F_a - F_b| over the merged support.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut dist = 0.0;
    let mut x = sa[0].min(sb[0]);
    while ia < sa.len() || ib < sb.len() {
        let next = match (sa.get(ia), sb.get(ib)) {
            (Some(&va), Some(&vb)) => va.min(vb),
            (Some(&va), None) => va,
            (None, Some(&vb)) => vb,
            (None, None) => break,
        };
        dist += (ia as f64 / na - ib as f64 / nb).abs() * (next - x);
        x = next;
        while ia < sa.len() && sa[ia] <= x {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] <= x {
            ib += 1;
        }
    }
    dist
}
