//! Text tables and summary statistics.

use vfflab_core::game::action_label;

/// One decimal place; a value that rounds to zero prints as `0.0`.
pub fn fmt1(v: f64) -> String {
    let s = format!("{v:.1}");
    if s == "-0.0" {
        "0.0".into()
    } else {
        s
    }
}

fn fmt_opt(v: f64, digits: usize) -> String {
    if v.is_finite() {
        format!("{v:.digits$}")
    } else {
        "-".into()
    }
}

/// Lays out rows of cells in right-aligned columns of a common width.
pub fn align(rows: &[Vec<String>]) -> String {
    let ncol = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..ncol).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Two-agent value table: agent 1's local values label the rows, agent 2's
/// the columns, joint values fill the cells (row-major). Headers read `A(8.1)`.
pub fn render_payoff_table(row_q: &[f64], col_q: &[f64], q_tot: &[f64]) -> String {
    assert_eq!(q_tot.len(), row_q.len() * col_q.len(), "table size must match the header lengths");
    let header = |i: usize, v: f64| format!("{}({})", action_label(i), fmt1(v));
    let mut rows = Vec::with_capacity(row_q.len() + 1);
    let mut top = vec![String::new()];
    top.extend(col_q.iter().enumerate().map(|(j, &v)| header(j, v)));
    rows.push(top);
    for (i, &v) in row_q.iter().enumerate() {
        let mut r = vec![header(i, v)];
        r.extend(q_tot[i * col_q.len()..(i + 1) * col_q.len()].iter().map(|&x| fmt1(x)));
        rows.push(r);
    }
    align(&rows)
}

/// One row of the stability table.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityRow {
    pub game: String,
    pub pattern: String,
    pub classification: String,
    pub min_eigenvalue: f64,
    pub min_probe: f64,
    /// `τ · vᵀHv` along the correcting direction and its prediction `-2Δy`.
    pub scaled_curvature: Option<(f64, f64)>,
    pub escape_fraction: Option<f64>,
}

pub fn render_stability_table(rows: &[StabilityRow]) -> String {
    let mut cells = vec![
        ["game", "pattern", "class", "min_eig", "min_probe", "tau*vHv", "-2dy", "escape"].map(String::from).to_vec(),
    ];
    for r in rows {
        let (s, p) = r.scaled_curvature.map_or(("-".into(), "-".into()), |(s, p)| (fmt_opt(s, 3), fmt_opt(p, 1)));
        cells.push(vec![
            r.game.clone(),
            r.pattern.clone(),
            r.classification.clone(),
            format_sci(r.min_eigenvalue),
            format_sci(r.min_probe),
            s,
            p,
            r.escape_fraction.map_or("-".into(), |f| format!("{f:.2}")),
        ]);
    }
    align(&cells)
}

fn format_sci(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.3e}")
    } else {
        "-".into()
    }
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub q25: f64,
    pub q75: f64,
    pub n: usize,
}

/// Mean and interquartile range of the finite entries.
pub fn spread(values: &[f64]) -> Spread {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    let mean = if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    Spread { mean, q25: quantile(&v, 0.25), q75: quantile(&v, 0.75), n: v.len() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payoff_table_headers_and_cells() {
        let t = render_payoff_table(&[8.1, 0.2, -0.04], &[7.4, 1.0, 0.0], &[12.0, -12.0, -12.0, -12.0, 0.0, 0.0, -12.0, 0.0, 0.0]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("A(7.4)"));
        assert!(lines[1].trim_start().starts_with("A(8.1)"));
        assert_eq!(lines[1].split_whitespace().nth(1), Some("12.0"));
        assert!(lines[3].starts_with("C(0.0)"));
    }

    #[test]
    fn zeros_render_as_zero() {
        let t = render_payoff_table(&[0.0, -0.0], &[0.0, 0.0], &[0.0, -0.0, 0.0, -0.01]);
        let cells: Vec<&str> = t.lines().skip(1).flat_map(|l| l.split_whitespace().skip(1)).collect();
        assert_eq!(cells, vec!["0.0"; 4]);
    }

    #[test]
    fn two_by_two_is_three_by_three() {
        let t = render_payoff_table(&[1.0, 2.0], &[3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].split_whitespace().count(), 2);
        assert!(lines[1..].iter().all(|l| l.split_whitespace().count() == 3));
        let widths: Vec<usize> = lines.iter().map(|l| l.len()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn quartiles_interpolate() {
        let s = spread(&[4.0, 1.0, 3.0, 2.0, f64::NAN]);
        assert_eq!(s.n, 4);
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.q25, 1.75);
        assert_eq!(s.q75, 3.25);
        assert!(spread(&[]).mean.is_nan());
    }
}
