//! wasm bindings for the browser demo. Each export takes plain text and
//! returns JSON; the `*_json` functions are the native-testable core.

use repacc_core::fixtures::{GradientTable, SHIPPED_GRADIENT_CSV};
use repacc_core::report::{gradient_report, GradientConfig};
use repacc_core::specdoc::{derange_fixed, derange_random, v1_table};
use repacc_core::stats::{krippendorff_alpha_ordinal, AlphaConvention};
use wasm_bindgen::prelude::*;

type Out = Result<String, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub fn gradient_json(csv: &str, iterations: usize, seed: u64) -> Out {
    let table = GradientTable::from_csv(csv).map_err(err)?;
    let cfg = GradientConfig {
        bootstrap_iterations: iterations,
        permutation_iterations: iterations,
        seed_bootstrap: seed,
        seed_permutation: seed.wrapping_add(1),
    };
    let report = gradient_report(&table, csv, &cfg).map_err(err)?;
    let points: Vec<_> = table
        .study()
        .iter()
        .map(|r| serde_json::json!({ "name": r.name, "c5": r.c5, "delta": r.delta_c4a() }))
        .collect();
    Ok(serde_json::json!({
        "values": report.values,
        "markdown": report.to_markdown(),
        "points": points,
    })
    .to_string())
}

/// `subjects`: comma or whitespace separated ids. `scheme`: "v1" or "v2".
pub fn derangement_json(subjects: &str, scheme: &str, seed: u64) -> Out {
    let ids: Vec<String> = subjects
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    let map = match scheme {
        "v1" => derange_fixed(&ids, &v1_table()),
        "v2" => derange_random(&ids, seed),
        other => return Err(format!("unknown scheme `{other}`")),
    }
    .map_err(err)?;
    serde_json::to_string(&map).map_err(err)
}

/// One judge per line, one item per column; `.` or `-` marks a missing
/// rating.
pub fn alpha_json(matrix: &str) -> Out {
    let rows: Vec<Vec<Option<u8>>> = matrix
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| match t {
                    "." | "-" => Ok(None),
                    _ => t.parse::<u8>().map(Some).map_err(|_| format!("not a rating: `{t}`")),
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    if rows.len() < 2 {
        return Err("need at least two judges (lines)".into());
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err("every line needs the same number of items".into());
    }
    let alpha = krippendorff_alpha_ordinal(&rows, AlphaConvention::PairableValues).map_err(err)?;
    serde_json::to_string(&alpha).map_err(err)
}

#[wasm_bindgen]
pub fn shipped_table() -> String {
    SHIPPED_GRADIENT_CSV.to_string()
}

#[wasm_bindgen]
pub fn gradient(csv: &str, iterations: usize, seed: u64) -> Result<String, JsError> {
    gradient_json(csv, iterations, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn derangement(subjects: &str, scheme: &str, seed: u64) -> Result<String, JsError> {
    derangement_json(subjects, scheme, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn alpha(matrix: &str) -> Result<String, JsError> {
    alpha_json(matrix).map_err(|e| JsError::new(&e))
}
