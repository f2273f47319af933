use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::model::SymptomRecord;

/// Significance band of a correlation p-value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Significance {
    None,
    /// 0.001 < p ≤ 0.01
    P01,
    /// p ≤ 0.001
    P001,
}

impl Significance {
    pub fn from_p(p: f64) -> Self {
        if p <= 0.001 {
            Significance::P001
        } else if p <= 0.01 {
            Significance::P01
        } else {
            Significance::None
        }
    }

    pub fn marker(self) -> &'static str {
        match self {
            Significance::None => "",
            Significance::P01 => "*",
            Significance::P001 => "**",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCell {
    pub rho: f64,
    pub p_value: f64,
    pub significance: Significance,
}

impl std::fmt::Display for CorrelationCell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}{}", self.rho, self.significance.marker())
    }
}

fn check_pair(x: &[f64], y: &[f64], min_len: usize, what: &'static str) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: what,
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < min_len {
        return Err(Error::InvalidParameter(format!(
            "{what} needs at least {min_len} values, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            tensor: "correlation input".into(),
            context: what.into(),
        });
    }
    Ok(())
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn centered_correlation(x: &[f64], y: &[f64], what: &'static str) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(what));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2, "pearson")?;
    centered_correlation(x, y, "pearson: constant input")
}

/// Spearman rank correlation with a two-sided t-approximation p-value.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<CorrelationCell> {
    check_pair(x, y, 3, "spearman")?;
    let rho = centered_correlation(
        &average_ranks(x),
        &average_ranks(y),
        "spearman: constant input",
    )?;
    let df = (x.len() - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df)
            .map_err(|e| Error::InvalidParameter(format!("t distribution: {e}")))?;
        (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
    };
    Ok(CorrelationCell {
        rho,
        p_value,
        significance: Significance::from_p(p_value),
    })
}

fn check_errors(p: &[f64], t: &[f64]) -> Result<()> {
    if p.len() != t.len() {
        return Err(Error::DimensionMismatch {
            context: "error metric",
            expected: t.len(),
            actual: p.len(),
        });
    }
    if p.is_empty() {
        return Err(Error::Empty("error metric of no values"));
    }
    Ok(())
}

pub fn mae(p: &[f64], t: &[f64]) -> Result<f64> {
    check_errors(p, t)?;
    Ok(p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

pub fn rmse(p: &[f64], t: &[f64]) -> Result<f64> {
    check_errors(p, t)?;
    let ms = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
    Ok(ms.sqrt())
}

/// Expression-by-symptom Spearman table: one row per expression, one column
/// per symptom and a final column for the total score.
///
/// `cohorts[i]`, when given, restricts row `i` to those video indices (the
/// outlier-band survivors for that expression). Cells whose correlation is
/// undefined, e.g. a constant column, are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub expression_names: Vec<String>,
    pub column_names: Vec<String>,
    pub cells: Vec<Vec<Option<CorrelationCell>>>,
    pub cohort_sizes: Vec<usize>,
}

impl CorrelationTable {
    pub fn shape(&self) -> (usize, usize) {
        (self.expression_names.len(), self.column_names.len())
    }

    pub fn cell(&self, expression: usize, column: usize) -> Option<&CorrelationCell> {
        self.cells[expression][column].as_ref()
    }

    /// Fixed-width text rendering with significance markers.
    pub fn render(&self) -> String {
        let width = self
            .expression_names
            .iter()
            .map(|n| n.len())
            .max()
            .unwrap_or(0)
            .max(10);
        let mut out = format!("{:width$}", "");
        for c in &self.column_names {
            out.push_str(&format!("  {c:>10}"));
        }
        out.push('\n');
        for (name, row) in self.expression_names.iter().zip(&self.cells) {
            out.push_str(&format!("{name:width$}"));
            for cell in row {
                let text = cell.map_or_else(|| "n/a".to_string(), |c| c.to_string());
                out.push_str(&format!("  {text:>10}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn correlation_table(
    frequencies: ArrayView2<'_, f64>,
    expression_names: &[String],
    records: &[SymptomRecord],
    symptom_names: &[String],
    cohorts: Option<&[Vec<usize>]>,
) -> Result<CorrelationTable> {
    let (v, n) = frequencies.dim();
    if records.len() != v {
        return Err(Error::DimensionMismatch {
            context: "correlation table records",
            expected: v,
            actual: records.len(),
        });
    }
    if expression_names.len() != n {
        return Err(Error::DimensionMismatch {
            context: "correlation table expressions",
            expected: n,
            actual: expression_names.len(),
        });
    }
    let w = symptom_names.len();
    if let Some(r) = records.iter().find(|r| r.symptom_scores.len() != w) {
        return Err(Error::DimensionMismatch {
            context: "correlation table symptoms",
            expected: w,
            actual: r.symptom_scores.len(),
        });
    }
    if let Some(c) = cohorts {
        if c.len() != n {
            return Err(Error::DimensionMismatch {
                context: "correlation table cohorts",
                expected: n,
                actual: c.len(),
            });
        }
        if c.iter().flatten().any(|&i| i >= v) {
            return Err(Error::InvalidParameter("cohort index out of range".into()));
        }
    }
    let all: Vec<usize> = (0..v).collect();
    let mut cells = Vec::with_capacity(n);
    let mut cohort_sizes = Vec::with_capacity(n);
    for i in 0..n {
        let members = cohorts.map_or(&all[..], |c| &c[i][..]);
        cohort_sizes.push(members.len());
        let f: Vec<f64> = members.iter().map(|&j| frequencies[[j, i]]).collect();
        let mut row = Vec::with_capacity(w + 1);
        for s in 0..=w {
            let y: Vec<f64> = members
                .iter()
                .map(|&j| {
                    let r = &records[j];
                    if s < w {
                        r.symptom_scores[s] as f64
                    } else {
                        r.total_score as f64
                    }
                })
                .collect();
            row.push(match spearman(&f, &y) {
                Ok(cell) => Some(cell),
                Err(Error::UndefinedCorrelation(_)) => None,
                Err(Error::InvalidParameter(_)) if members.len() < 3 => None,
                Err(e) => return Err(e),
            });
        }
        cells.push(row);
    }
    let mut column_names = symptom_names.to_vec();
    column_names.push("total".into());
    Ok(CorrelationTable {
        expression_names: expression_names.to_vec(),
        column_names,
        cells,
        cohort_sizes,
    })
}
