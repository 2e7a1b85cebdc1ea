//! Confusion-matrix IoU evaluation and table rendering.

use serde::{Deserialize, Serialize};

use crate::dataset::CLASS_NAMES;
use crate::error::{CoreError, Result};
use crate::exec::Exec;
use crate::raster::LabelMap;

/// `counts[gt][pred]` pixel counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds the joint pixel counts of one `(pred, gt)` pair.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(CoreError::Shape {
                expected: format!("{}x{}", gt.height(), gt.width()),
                actual: format!("{}x{}", pred.height(), pred.width()),
            });
        }
        let c = self.num_classes;
        if let Some(&v) = pred.data().iter().chain(gt.data()).find(|&&v| v as usize >= c) {
            return Err(CoreError::arg(format!("label {v} outside {c} classes")));
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(CoreError::arg("cannot merge confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Accumulates many pairs, one partial matrix per image, merged in order.
    pub fn from_pairs(exec: Exec, num_classes: usize, pairs: &[(LabelMap, LabelMap)]) -> Result<Self> {
        let partials = exec.map(pairs, |(pred, gt)| {
            let mut cm = ConfusionMatrix::new(num_classes);
            cm.accumulate(pred, gt).map(|_| cm)
        });
        let mut cm = ConfusionMatrix::new(num_classes);
        for p in partials {
            cm.merge(&p?)?;
        }
        Ok(cm)
    }
}

/// Per-class IoU over the foreground classes `1..C` and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    /// `None` marks a class with zero union (excluded from the mean).
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    /// Ground-truth pixel count per evaluated class.
    pub pixels: Vec<u64>,
}

impl IoUReport {
    /// Builds a report from known IoU values (no pixel counts).
    pub fn from_per_class(values: &[f64]) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CoreError::arg("IoU values must lie in [0, 1]"));
        }
        Ok(IoUReport {
            per_class: values.iter().map(|&v| Some(v)).collect(),
            miou: values.iter().sum::<f64>() / values.len() as f64,
            pixels: vec![0; values.len()],
        })
    }

    pub fn absent_classes(&self) -> Vec<usize> {
        self.per_class
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(i, _)| i + 1)
            .collect()
    }
}

pub fn iou_report(cm: &ConfusionMatrix) -> Result<IoUReport> {
    if cm.total() == 0 {
        return Err(CoreError::EmptyEvaluation);
    }
    let c = cm.num_classes;
    let mut per_class = Vec::with_capacity(c - 1);
    let mut pixels = Vec::with_capacity(c - 1);
    for k in 1..c {
        let tp = cm.get(k, k);
        let row: u64 = (0..c).map(|j| cm.get(k, j)).sum();
        let col: u64 = (0..c).map(|i| cm.get(i, k)).sum();
        let union = row + col - tp;
        per_class.push(if union == 0 {
            None
        } else {
            Some(tp as f64 / union as f64)
        });
        pixels.push(row);
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(CoreError::EmptyEvaluation);
    }
    Ok(IoUReport {
        miou: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
        pixels,
    })
}

/// Formats a fraction as a percentage with two decimals. Floating-point noise
/// below 1e-6 percent is removed first, then the value is cut (not rounded) at
/// the second decimal.
pub fn format_percent(v: f64) -> String {
    let pct = (v * 100.0 * 1e6).round() / 1e6;
    let cents = (pct * 100.0 + 1e-6).floor() as i64;
    format!("{}.{:02}", cents / 100, cents % 100)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedTable {
    pub markdown: String,
    pub csv: String,
}

/// Renders named reports as markdown and CSV tables with class columns in
/// label order followed by `avg`.
pub fn render_table(rows: &[(String, IoUReport)]) -> Result<RenderedTable> {
    let width = rows
        .first()
        .map(|r| r.1.per_class.len())
        .unwrap_or(CLASS_NAMES.len() - 1);
    if rows.iter().any(|r| r.1.per_class.len() != width) {
        return Err(CoreError::arg("all rows must share the class schema"));
    }
    let names: Vec<String> = (1..=width)
        .map(|k| {
            CLASS_NAMES
                .get(k)
                .map(|s| s.to_string())
                .unwrap_or(format!("class {k}"))
        })
        .collect();
    let mut header = vec!["Method".to_string()];
    header.extend(names.iter().cloned());
    header.push("avg".to_string());

    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, r)| {
            let mut row = vec![name.clone()];
            row.extend(
                r.per_class
                    .iter()
                    .map(|v| v.map(format_percent).unwrap_or_else(|| "-".to_string())),
            );
            row.push(format_percent(r.miou));
            row
        })
        .collect();

    let mut md = format!("| {} |\n", header.join(" | "));
    md.push_str(&format!(
        "|{}\n",
        header
            .iter()
            .enumerate()
            .map(|(i, _)| if i == 0 { ":---|" } else { "---:|" })
            .collect::<String>()
    ));
    for row in &cells {
        md.push_str(&format!("| {} |\n", row.join(" | ")));
    }

    let csv_field = |s: &str| {
        if s.contains(',') || s.contains('"') {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    };
    let mut csv = header.iter().map(|h| csv_field(h)).collect::<Vec<_>>().join(",");
    csv.push('\n');
    for row in &cells {
        csv.push_str(&row.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","));
        csv.push('\n');
    }
    Ok(RenderedTable { markdown: md, csv })
}
