//! Dice tables: one row per variant, per-label means and the foreground average.

use std::collections::BTreeMap;

use crate::emdriver::Variant;
use crate::error::{Error, Result};

/// Per-image foreground Dice of one evaluated run.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    pub variant: Variant,
    /// `per_image[i][l - 1]` is the Dice of label `l` on image `i`.
    pub per_image: Vec<Vec<f64>>,
    pub num_labels: usize,
}

impl DiceReport {
    pub fn new(variant: Variant, per_image: Vec<Vec<f64>>, num_labels: usize) -> Result<Self> {
        if num_labels < 2 {
            return Err(Error::Input("a report needs at least one foreground label".into()));
        }
        if let Some(bad) = per_image.iter().find(|r| r.len() != num_labels - 1) {
            return Err(Error::Input(format!("expected {} Dice values per image, got {}", num_labels - 1, bad.len())));
        }
        if per_image.iter().flatten().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::Input("Dice value outside [0, 1]".into()));
        }
        Ok(DiceReport {
            variant,
            per_image,
            num_labels,
        })
    }

    pub fn label_means(&self) -> Vec<f64> {
        Stat::per_label(&self.per_image, self.num_labels).iter().map(|s| s.mean).collect()
    }

    /// Unweighted mean of the foreground label means.
    pub fn avg(&self) -> f64 {
        let m = self.label_means();
        m.iter().sum::<f64>() / m.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std, n }
    }

    fn per_label(rows: &[Vec<f64>], num_labels: usize) -> Vec<Stat> {
        (0..num_labels - 1)
            .map(|l| Stat::of(&rows.iter().map(|r| r[l]).collect::<Vec<_>>()))
            .collect()
    }
}

/// One table row: runs of the same variant pooled image by image.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: Variant,
    pub runs: usize,
    pub labels: Vec<Stat>,
    /// Per-image foreground averages.
    pub avg: Stat,
}

impl ReportRow {
    /// The Avg column: unweighted mean of the label means.
    pub fn avg_of_means(&self) -> f64 {
        self.labels.iter().map(|s| s.mean).sum::<f64>() / self.labels.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub num_labels: usize,
    pub rows: Vec<ReportRow>,
}

impl Table {
    /// Rows in report order; all runs must share the label count.
    pub fn build(runs: &[DiceReport]) -> Result<Table> {
        let first = runs.first().ok_or_else(|| Error::Input("no runs to report".into()))?;
        let num_labels = first.num_labels;
        if runs.iter().any(|r| r.num_labels != num_labels) {
            return Err(Error::Input("runs disagree on the label count".into()));
        }
        let mut by_variant: BTreeMap<usize, (usize, Vec<Vec<f64>>)> = BTreeMap::new();
        for r in runs {
            let idx = Variant::ALL.iter().position(|v| *v == r.variant).expect("variant listed");
            let entry = by_variant.entry(idx).or_default();
            entry.0 += 1;
            entry.1.extend(r.per_image.iter().cloned());
        }
        let rows = by_variant
            .into_iter()
            .map(|(idx, (count, images))| {
                let per_image_avg: Vec<f64> = images.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
                ReportRow {
                    variant: Variant::ALL[idx],
                    runs: count,
                    labels: Stat::per_label(&images, num_labels),
                    avg: Stat::of(&per_image_avg),
                }
            })
            .collect();
        Ok(Table { num_labels, rows })
    }

    /// `variant,label,dice_mean,dice_std,n` with one line per label and one `avg` line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,label,dice_mean,dice_std,n\n");
        for r in &self.rows {
            for (l, st) in r.labels.iter().enumerate() {
                s.push_str(&format!("{},{},{},{},{}\n", r.variant, l + 1, st.mean, st.std, st.n));
            }
            s.push_str(&format!("{},avg,{},{},{}\n", r.variant, r.avg_of_means(), r.avg.std, r.avg.n));
        }
        s
    }

    /// Aligned text, three decimals.
    pub fn to_text(&self) -> String {
        let title_w = self.rows.iter().map(|r| r.variant.title().len()).max().unwrap_or(0).max(7);
        let mut s = format!("{:<title_w$}", "Variant");
        for l in 1..self.num_labels {
            s.push_str(&format!("  {:>6}", format!("L{l}")));
        }
        s.push_str(&format!("  {:>6}  {:>5}  {:>4}\n", "Avg", "n", "runs"));
        for r in &self.rows {
            s.push_str(&format!("{:<title_w$}", r.variant.title()));
            for st in &r.labels {
                s.push_str(&format!("  {:>6.3}", st.mean));
            }
            s.push_str(&format!("  {:>6.3}  {:>5}  {:>4}\n", r.avg_of_means(), r.avg.n, r.runs));
        }
        s
    }
}
