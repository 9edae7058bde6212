//! Analyses over the shipped gradient table, and the JSON + markdown report
//! emitter. Markdown cells are looked up by key in the JSON `values` map,
//! so the two can never disagree.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::digest::{canonical_digest, sha256_hex, to_pretty_json, ChecksumAlgorithm};
use crate::error::{Error, Result};
use crate::fixtures::{shipped_crossings, BaselineBand, GradientTable};
use crate::pipeline::StudySummary;
use crate::stats::{
    bootstrap_slope, linear_regression, multiple_regression, pearson, permutation_slope, wilcoxon_values,
    BootstrapResult, MultipleFit, PermutationResult, PermutationScheme, TestResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradientConfig {
    pub bootstrap_iterations: usize,
    pub permutation_iterations: usize,
    pub seed_bootstrap: u64,
    pub seed_permutation: u64,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            bootstrap_iterations: 10_000,
            permutation_iterations: 10_000,
            seed_bootstrap: 20_250_101,
            seed_permutation: 20_250_102,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientAnalysis {
    pub n_subjects: usize,
    pub wilcoxon_c4a: TestResult,
    pub wilcoxon_c2a: TestResult,
    pub gradient: TestResult,
    pub level: TestResult,
    pub low_baseline_mean_delta: f64,
    pub low_baseline_n: usize,
    pub low_baseline_all_positive: bool,
    pub bootstrap: BootstrapResult,
    pub shuffle_delta: PermutationResult,
    pub shuffle_level: PermutationResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composition: Option<CompositionAnalysis>,
}

/// Δ_C4a regressed on the baseline and the literal-recall fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionAnalysis {
    pub fit: MultipleFit,
    pub r_literal_delta_c2a: f64,
    pub r_literal_c5: f64,
    /// The same fit without the largest-literal-fraction subject.
    pub without_max_literal: Option<(String, MultipleFit)>,
}

fn composition(table: &GradientTable) -> Result<Option<CompositionAnalysis>> {
    let rows = table.study();
    if rows.iter().any(|r| r.literal_recall_count.is_none()) {
        return Ok(None);
    }
    let fit_of = |t: &GradientTable| -> Result<MultipleFit> {
        let c5 = t.column(|r| r.c5);
        let d = t.column(|r| r.delta_c4a());
        let lit = t.column(|r| r.literal_fraction().unwrap_or(0.0));
        multiple_regression(&d, &[("baseline", &c5), ("literal_fraction", &lit)])
    };
    let lit = table.column(|r| r.literal_fraction().unwrap_or(0.0));
    let top = rows
        .iter()
        .max_by(|a, b| a.literal_fraction().partial_cmp(&b.literal_fraction()).expect("finite"))
        .map(|r| r.subject_id.clone());
    let without_max_literal = match top {
        Some(id) => Some((id.clone(), fit_of(&table.without(&id))?)),
        None => None,
    };
    Ok(Some(CompositionAnalysis {
        fit: fit_of(table)?,
        r_literal_delta_c2a: pearson(&lit, &table.column(|r| r.delta_c2a()))?,
        r_literal_c5: pearson(&lit, &table.column(|r| r.c5))?,
        without_max_literal,
    }))
}

pub fn gradient_analysis(table: &GradientTable, cfg: &GradientConfig) -> Result<GradientAnalysis> {
    let c5 = table.column(|r| r.c5);
    let c4a = table.column(|r| r.c4a);
    let d4a = table.column(|r| r.delta_c4a());
    let d2a = table.column(|r| r.delta_c2a());
    let low: Vec<f64> = table.in_band(BaselineBand::Low).iter().map(|r| r.delta_c4a()).collect();
    if low.is_empty() {
        return Err(Error::invalid("no low-baseline subjects in table"));
    }
    Ok(GradientAnalysis {
        n_subjects: c5.len(),
        wilcoxon_c4a: wilcoxon_values(&d4a)?,
        wilcoxon_c2a: wilcoxon_values(&d2a)?,
        gradient: linear_regression(&c5, &d4a)?,
        level: linear_regression(&c5, &c4a)?,
        low_baseline_mean_delta: low.iter().sum::<f64>() / low.len() as f64,
        low_baseline_n: low.len(),
        low_baseline_all_positive: low.iter().all(|&d| d > 0.0),
        bootstrap: bootstrap_slope(&c5, &d4a, cfg.bootstrap_iterations, cfg.seed_bootstrap)?,
        shuffle_delta: permutation_slope(&c5, &c4a, cfg.permutation_iterations, cfg.seed_permutation, PermutationScheme::ShuffleDelta)?,
        shuffle_level: permutation_slope(&c5, &c4a, cfg.permutation_iterations, cfg.seed_permutation, PermutationScheme::ShuffleLevel)?,
        composition: composition(table)?,
    })
}

/// One reported line: a label, the key of its value, and display precision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub key: String,
    pub decimals: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportSection {
    pub title: String,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub config_digest: String,
    pub input_digests: BTreeMap<String, String>,
    pub values: BTreeMap<String, f64>,
    pub sections: Vec<ReportSection>,
    /// Full structured results behind `values`.
    pub detail: serde_json::Value,
}

impl Report {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            config_digest: canonical_digest(config, ChecksumAlgorithm::Sha256)?,
            input_digests: BTreeMap::new(),
            values: BTreeMap::new(),
            sections: vec![],
            detail: serde_json::Value::Null,
        })
    }

    pub fn input(&mut self, name: &str, content: &str) {
        self.input_digests.insert(name.into(), sha256_hex(content));
    }

    pub fn section(&mut self, title: &str) -> &mut Self {
        self.sections.push(ReportSection {
            title: title.into(),
            rows: vec![],
        });
        self
    }

    /// Record `value` under `key` and list it in the current section.
    pub fn row(&mut self, label: &str, key: &str, value: f64, decimals: usize) -> &mut Self {
        self.values.insert(key.into(), value);
        if self.sections.is_empty() {
            self.section("Results");
        }
        self.sections.last_mut().expect("section exists").rows.push(ReportRow {
            label: label.into(),
            key: key.into(),
            decimals,
        });
        self
    }

    pub fn value(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        to_pretty_json(self)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("# {}\n\n", self.command);
        out.push_str(&format!("- config digest: `{}`\n", self.config_digest));
        for (k, v) in &self.input_digests {
            out.push_str(&format!("- input `{k}`: `{v}`\n"));
        }
        for s in &self.sections {
            out.push_str(&format!("\n## {}\n\n| Quantity | Value | Key |\n|---|---:|---|\n", s.title));
            for r in &s.rows {
                let v = self.values[&r.key];
                out.push_str(&format!("| {} | {:.*} | `{}` |\n", r.label, r.decimals, v, r.key));
            }
        }
        out
    }
}

fn add_test(report: &mut Report, prefix: &str, label: &str, t: &TestResult, decimals: usize) {
    report.row(label, &format!("{prefix}.{}", t.statistic_name), t.value, decimals);
    if let Some(p) = t.p_value {
        report.row(&format!("{label}: p"), &format!("{prefix}.p"), p, 4);
    }
    if let Some((lo, hi)) = t.ci {
        report.row(&format!("{label}: 95% CI low"), &format!("{prefix}.ci_lo"), lo, 3);
        report.row(&format!("{label}: 95% CI high"), &format!("{prefix}.ci_hi"), hi, 3);
    }
    for (k, v) in &t.extras {
        if k == "r2" || k == "intercept" {
            report.row(&format!("{label}: {k}"), &format!("{prefix}.{k}"), *v, 4);
        }
    }
}

/// Report for the gradient analysis over a table.
pub fn gradient_report(table: &GradientTable, table_source: &str, cfg: &GradientConfig) -> Result<Report> {
    let a = gradient_analysis(table, cfg)?;
    let mut r = Report::new("stats --fixture paper-table-d1", cfg)?;
    r.input("gradient_table", table_source);

    r.section("Paired tests");
    add_test(&mut r, "wilcoxon.c4a_vs_c5", "Wilcoxon, C4a vs C5", &a.wilcoxon_c4a, 0);
    add_test(&mut r, "wilcoxon.c2a_vs_c5", "Wilcoxon, C2a vs C5", &a.wilcoxon_c2a, 0);
    r.row("Subjects", "n_subjects", a.n_subjects as f64, 0);

    r.section("Gradient");
    add_test(&mut r, "gradient", "Slope of Δ_C4a on C5", &a.gradient, 3);
    add_test(&mut r, "level", "Slope of C4a on C5", &a.level, 3);
    r.row("Low-baseline mean Δ_C4a", "low_baseline.mean_delta", a.low_baseline_mean_delta, 3);
    r.row("Low-baseline subjects", "low_baseline.n", a.low_baseline_n as f64, 0);
    r.row(
        "Low-baseline subjects improving",
        "low_baseline.n_positive",
        table.in_band(BaselineBand::Low).iter().filter(|x| x.delta_c4a() > 0.0).count() as f64,
        0,
    );

    r.section("Resampling");
    let (lo, hi) = a.bootstrap.test.ci.expect("bootstrap sets a CI");
    r.row("Bootstrap slope CI low", "bootstrap.ci_lo", lo, 3);
    r.row("Bootstrap slope CI high", "bootstrap.ci_hi", hi, 3);
    r.row("Bootstrap share of slopes < 0", "bootstrap.fraction_negative", a.bootstrap.fraction_negative, 4);
    for (key, p) in [("shuffle_delta", &a.shuffle_delta), ("shuffle_level", &a.shuffle_level)] {
        r.row(&format!("Permutation ({key}) null mean"), &format!("{key}.null_mean"), p.null_mean, 3);
        r.row(&format!("Permutation ({key}) null SD"), &format!("{key}.null_sd"), p.null_sd, 3);
        r.row(&format!("Permutation ({key}) p"), &format!("{key}.p"), p.test.p_value.unwrap_or(f64::NAN), 4);
    }

    if let Some(c) = &a.composition {
        r.section("Battery composition");
        for coef in &c.fit.coefficients {
            let k = format!("composition.{}", coef.name);
            r.row(&format!("{} coefficient", coef.name), &k, coef.estimate, 3);
            r.row(&format!("{} CI low", coef.name), &format!("{k}.ci_lo"), coef.ci.0, 3);
            r.row(&format!("{} CI high", coef.name), &format!("{k}.ci_hi"), coef.ci.1, 3);
            r.row(&format!("{} p", coef.name), &format!("{k}.p"), coef.p_value, 4);
        }
        r.row("Adjusted R²", "composition.adj_r2", c.fit.adj_r2, 3);
        r.row("VIF", "composition.vif", c.fit.vifs[0], 3);
        r.row("r(literal, Δ_C2a)", "composition.r_literal_delta_c2a", c.r_literal_delta_c2a, 3);
        r.row("r(literal, C5)", "composition.r_literal_c5", c.r_literal_c5, 3);
        if let Some((_, f)) = &c.without_max_literal {
            let b = f.coefficient("baseline").expect("named coefficient");
            r.row("Baseline coefficient, top literal subject dropped", "composition.drop_top.baseline", b.estimate, 3);
            let l = f.coefficient("literal_fraction").expect("named coefficient");
            r.row("Literal p, top literal subject dropped", "composition.drop_top.literal_p", l.p_value, 3);
        }
    }

    let crossings = shipped_crossings();
    let total: usize = crossings.iter().map(|c| c.total()).sum();
    if total > 0 {
        r.section("Anchor crossings (low baseline)");
        let up: usize = crossings.iter().map(|c| c.upward).sum();
        let down: usize = crossings.iter().map(|c| c.downward).sum();
        r.row("Paired questions", "crossings.total", total as f64, 0);
        r.row("Upward share", "crossings.upward_rate", up as f64 / total as f64, 3);
        r.row("Downward share", "crossings.downward_rate", down as f64 / total as f64, 3);
    }

    r.detail = serde_json::to_value(&a)?;
    Ok(r)
}

/// Report for a judged run: panel means, deltas against C5, crossings,
/// agreement, refusal rates and isolation.
pub fn study_report(summary: &StudySummary, config: &impl Serialize) -> Result<Report> {
    let mut r = Report::new("stats", config)?;
    r.input("summary", &to_pretty_json(summary)?);

    r.section("Panel means");
    for m in &summary.means {
        r.row(&format!("{} {}", m.subject_id, m.condition), &format!("mean.{}.{}", m.subject_id, m.condition), m.panel_mean, 3);
    }
    r.section("Deltas against C5");
    for d in &summary.deltas {
        let vals = d.values();
        if vals.is_empty() {
            continue;
        }
        let key = format!("delta.{}", d.condition_a);
        r.row(&format!("Mean Δ {}", d.condition_a), &key, vals.iter().sum::<f64>() / vals.len() as f64, 3);
        if let Ok(w) = wilcoxon_values(&vals) {
            add_test(&mut r, &format!("{key}.wilcoxon"), &format!("Wilcoxon, {} vs C5", d.condition_a), &w, 0);
        }
    }
    if !summary.transitions.is_empty() {
        r.section("Anchor crossings from C5");
        for (c, t) in &summary.transitions {
            r.row(&format!("{c} upward"), &format!("crossings.{c}.upward"), t.upward as f64, 0);
            r.row(&format!("{c} downward"), &format!("crossings.{c}.downward"), t.downward as f64, 0);
            r.row(&format!("{c} no crossing"), &format!("crossings.{c}.no_crossing"), t.no_crossing as f64, 0);
        }
    }
    r.section("Audits");
    if let Some(a) = &summary.agreement {
        r.row("Krippendorff α (ordinal)", "agreement.alpha", a.value, 3);
    }
    for (c, v) in &summary.refusal_rates {
        r.row(&format!("Refusal rate {c}"), &format!("refusal.{c}"), *v, 3);
    }
    r.row("Served blocks scanned", "isolation.blocks_scanned", summary.isolation.blocks_scanned as f64, 0);
    r.row("Held-out overlaps in served blocks", "isolation.overlaps", summary.isolation.overlaps.len() as f64, 0);
    r.detail = serde_json::to_value(summary)?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markdown_uses_json_values() {
        let mut r = Report::new("demo", &serde_json::json!({"a": 1})).unwrap();
        r.section("S").row("Thing", "thing", 1.23456, 2);
        let md = r.to_markdown();
        assert!(md.contains("| Thing | 1.23 | `thing` |"));
        let back: Report = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back.value("thing"), Some(1.23456));
    }

    #[test]
    fn quick_gradient_report() {
        let cfg = GradientConfig {
            bootstrap_iterations: 1000,
            permutation_iterations: 1000,
            ..Default::default()
        };
        let t = GradientTable::shipped();
        let r = gradient_report(&t, crate::fixtures::SHIPPED_GRADIENT_CSV, &cfg).unwrap();
        assert_eq!(r.value("wilcoxon.c4a_vs_c5.W"), Some(11.0));
        assert_eq!(r.value("wilcoxon.c2a_vs_c5.W"), Some(10.0));
        assert!((r.value("gradient.slope").unwrap() + 0.96).abs() < 0.02);
        let again = gradient_report(&t, crate::fixtures::SHIPPED_GRADIENT_CSV, &cfg).unwrap();
        assert_eq!(r.to_json().unwrap(), again.to_json().unwrap());
    }
}
