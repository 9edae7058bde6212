//! Shipped per-subject tables used as analysis inputs and regression
//! fixtures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Questions per subject battery; literal-recall counts are out of this.
pub const QUESTIONS_PER_SUBJECT: u32 = 39;
/// Upper edge (inclusive) of the low-baseline band on the C5 mean.
pub const LOW_BASELINE_MAX: f64 = 2.0;
/// Lower edge (exclusive) of the high-baseline band.
pub const HIGH_BASELINE_MIN: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineBand {
    Low,
    Mid,
    High,
}

pub fn baseline_band(c5: f64) -> BaselineBand {
    if c5 <= LOW_BASELINE_MAX {
        BaselineBand::Low
    } else if c5 <= HIGH_BASELINE_MIN {
        BaselineBand::Mid
    } else {
        BaselineBand::High
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRow {
    pub subject_id: String,
    pub name: String,
    pub c5: f64,
    pub c4: f64,
    pub c2a: f64,
    pub c4a: f64,
    pub literal_recall_count: Option<u32>,
    /// Reference subject outside the main study set.
    pub control: bool,
}

impl GradientRow {
    pub fn delta_c4a(&self) -> f64 {
        self.c4a - self.c5
    }

    pub fn delta_c2a(&self) -> f64 {
        self.c2a - self.c5
    }

    pub fn band(&self) -> BaselineBand {
        baseline_band(self.c5)
    }

    pub fn literal_fraction(&self) -> Option<f64> {
        self.literal_recall_count
            .map(|c| f64::from(c) / f64::from(QUESTIONS_PER_SUBJECT))
    }
}

/// Per-subject panel means by condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientTable {
    pub rows: Vec<GradientRow>,
}

pub const SHIPPED_GRADIENT_CSV: &str = include_str!("../data/gradient_table.csv");

impl GradientTable {
    pub fn shipped() -> Self {
        Self::from_csv(SHIPPED_GRADIENT_CSV).expect("shipped gradient table parses")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let rows = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<GradientRow>, _>>()
            .map_err(|e| Error::invalid(format!("gradient table: {e}")))?;
        if rows.is_empty() {
            return Err(Error::invalid("gradient table has no rows"));
        }
        for r in &rows {
            for v in [r.c5, r.c4, r.c2a, r.c4a] {
                if !(1.0..=5.0).contains(&v) {
                    return Err(Error::OutOfRangeScore(v));
                }
            }
        }
        Ok(Self { rows })
    }

    /// Non-control rows, in table order.
    pub fn study(&self) -> Vec<&GradientRow> {
        self.rows.iter().filter(|r| !r.control).collect()
    }

    pub fn column(&self, f: impl Fn(&GradientRow) -> f64) -> Vec<f64> {
        self.study().into_iter().map(f).collect()
    }

    pub fn in_band(&self, band: BaselineBand) -> Vec<&GradientRow> {
        self.study().into_iter().filter(|r| r.band() == band).collect()
    }

    pub fn without(&self, subject_id: &str) -> Self {
        Self {
            rows: self.rows.iter().filter(|r| r.subject_id != subject_id).cloned().collect(),
        }
    }
}

/// Per-subject (C5 → C4a) question-level anchor crossings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossingRow {
    pub subject_id: String,
    pub upward: usize,
    pub downward: usize,
    pub no_crossing: usize,
}

impl CrossingRow {
    pub fn total(&self) -> usize {
        self.upward + self.downward + self.no_crossing
    }
}

pub fn shipped_crossings() -> Vec<CrossingRow> {
    csv::Reader::from_reader(include_str!("../data/anchor_crossing.csv").as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .expect("shipped crossing table parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_table_shape() {
        let t = GradientTable::shipped();
        assert_eq!(t.rows.len(), 15);
        assert_eq!(t.study().len(), 14);
        assert_eq!(t.in_band(BaselineBand::Low).len(), 9);
        assert_eq!(t.in_band(BaselineBand::Mid).len(), 5);
        let franklin = t.rows.iter().find(|r| r.control).unwrap();
        assert_eq!(franklin.band(), BaselineBand::High);
        assert_eq!(franklin.literal_recall_count, None);
        let total: u32 = t.study().iter().filter_map(|r| r.literal_recall_count).sum();
        assert_eq!(total, 60);
    }

    #[test]
    fn ebers_delta() {
        let t = GradientTable::shipped();
        assert!((t.rows[0].delta_c4a() - 1.05).abs() < 1e-12);
    }

    #[test]
    fn crossing_rows_cover_each_battery() {
        let rows = shipped_crossings();
        assert_eq!(rows.len(), 9);
        assert!(rows.iter().all(|r| r.total() == QUESTIONS_PER_SUBJECT as usize));
        let up: usize = rows.iter().map(|r| r.upward).sum();
        let down: usize = rows.iter().map(|r| r.downward).sum();
        let stay: usize = rows.iter().map(|r| r.no_crossing).sum();
        assert_eq!((up, down, stay), (193, 24, 134));
    }

    #[test]
    fn bad_rows_rejected() {
        let csv = "subject_id,name,c5,c4,c2a,c4a,literal_recall_count,control\nx,X,0.5,2,2,2,,false\n";
        assert!(GradientTable::from_csv(csv).is_err());
    }
}
