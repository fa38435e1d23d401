//! Confusion matrices, OA/AA/Kappa and PPM rendering of class maps.

use serde::{Deserialize, Serialize};

use crate::dataio::Coord;
use crate::error::{Error, Result};

/// Counts with rows = true class, columns = predicted class (both 1..=K
/// stored at index k-1). Predictions of 0 at an evaluated pixel land in
/// `rejected` under their true class and count as errors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
    pub rejected: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes], rejected: vec![0; classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Dimension(format!("{} counts for {classes} classes", counts.len())));
        }
        Ok(ConfusionMatrix { classes, counts, rejected: vec![0; classes] })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.rejected.iter().sum::<u64>()
    }

    /// Support of each true class, rejects included.
    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|t| (0..self.classes).map(|p| self.get(t, p)).sum::<u64>() + self.rejected[t])
            .collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.classes).map(|p| (0..self.classes).map(|t| self.get(t, p)).sum()).collect()
    }
}

/// Tallies predictions against labels at `coords` of an `_ x width` map.
pub fn confusion(pred: &[u16], labels: &[u16], width: usize, coords: &[Coord], classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != labels.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", pred.len(), labels.len())));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for &(i, j) in coords {
        let at = i * width + j;
        let (&t, &p) = labels
            .get(at)
            .zip(pred.get(at))
            .ok_or_else(|| Error::Argument(format!("coordinate ({i}, {j}) outside the map")))?;
        if t == 0 || t as usize > classes {
            return Err(Error::Validation(format!("coordinate ({i}, {j}) has label {t}")));
        }
        if p as usize > classes {
            return Err(Error::Validation(format!("prediction {p} at ({i}, {j}) exceeds {classes} classes")));
        }
        if p == 0 {
            cm.rejected[t as usize - 1] += 1;
        } else {
            cm.counts[(t as usize - 1) * classes + p as usize - 1] += 1;
        }
    }
    Ok(cm)
}

/// Serialised with keys in the order `oa, aa, kappa, per_class, support,
/// rejected`. Classes without support have `null` accuracy and are left out
/// of AA.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub per_class: Vec<Option<f64>>,
    pub support: Vec<u64>,
    pub rejected: u64,
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Argument("no evaluated pixels".into()));
    }
    let n = total as f64;
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let trace: u64 = (0..cm.classes).map(|k| cm.get(k, k)).sum();
    let oa = trace as f64 / n;
    let per_class: Vec<Option<f64>> = (0..cm.classes)
        .map(|k| (rows[k] > 0).then(|| cm.get(k, k) as f64 / rows[k] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let aa = present.iter().sum::<f64>() / present.len() as f64;
    let pe = rows.iter().zip(&cols).map(|(&r, &c)| r as f64 * c as f64).sum::<f64>() / (n * n);
    let kappa = if pe == 1.0 {
        // every pixel and prediction share one class
        if oa == 1.0 { 1.0 } else { 0.0 }
    } else {
        (oa - pe) / (1.0 - pe)
    };
    Ok(MetricsReport {
        oa,
        aa,
        kappa,
        per_class,
        support: rows,
        rejected: cm.rejected.iter().sum(),
    })
}

/// Black for class 0 followed by 16 distinct colours.
pub const PALETTE: [[u8; 3]; 17] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

/// Binary PPM (`P6`) of a class map.
pub fn render_map(pred: &[u16], height: usize, width: usize, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    if pred.len() != height * width {
        return Err(Error::Dimension(format!("{} pixels for a {height}x{width} map", pred.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &c in pred {
        let rgb = palette
            .get(c as usize)
            .ok_or_else(|| Error::Argument(format!("class {c} beyond the {}-colour palette", palette.len())))?;
        out.extend_from_slice(rgb);
    }
    Ok(out)
}
