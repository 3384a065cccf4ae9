//! Aligned text rendering of coverage reports.

use ccc_fiducial::CoverageReport;

const HEADER: [&str; 8] = [
    "scenario",
    "CCC (true)",
    "N",
    "method",
    "avg lower",
    "avg upper",
    "exp. width",
    "coverage",
];

/// One row per scenario, subject count and method.
pub fn coverage_table(reports: &[CoverageReport]) -> String {
    let mut cells: Vec<[String; 8]> = vec![HEADER.map(String::from)];
    for r in reports {
        for row in &r.rows {
            cells.push([
                r.scenario.clone(),
                format!("{:.3}", r.true_ccc),
                row.n_subjects.to_string(),
                row.method.name().to_string(),
                format!("{:.3}", row.mean_lower),
                format!("{:.3}", row.mean_upper),
                format!("{:.3}", row.expected_width),
                format!("{:.3}", row.coverage),
            ]);
        }
    }
    let widths: Vec<usize> = (0..HEADER.len())
        .map(|c| {
            cells
                .iter()
                .map(|r| r[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| {
                if c == 0 || c == 3 {
                    format!("{v:<w$}")
                } else {
                    format!("{v:>w$}")
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(rule));
            out.push('\n');
        }
    }
    out
}
