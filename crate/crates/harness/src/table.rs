//! Plain-text tables: one block per `(δ, coordinate)` with rows `K` ×
//! statistic and columns estimator × `n`, values rounded to 2 decimals.

use std::fmt::Write;

use crate::config::EstimatorChoice;
use crate::io::coord_label;
use crate::mc::SummaryRow;

fn fraction(r: f64) -> Option<(u32, u32)> {
    (1..=12u32).find_map(|q| {
        let p = (r * q as f64).round();
        ((r * q as f64 - p).abs() < 1e-9 && p > 0.0).then_some((p as u32, q))
    })
}

fn power_label(r: f64) -> String {
    match fraction(r) {
        Some((1, 1)) => "n".to_string(),
        Some((1, 2)) => "sqrt(n)".to_string(),
        Some((p, 1)) => format!("n^{p}"),
        Some((p, q)) => format!("n^({p}/{q})"),
        None => format!("n^{r}"),
    }
}

/// `("sqrt(n) Bias", "sqrt(n) SD", "n MSE")` for `r = 1/2`.
pub fn stat_labels(r: f64) -> [String; 3] {
    let p = power_label(r);
    [format!("{p} Bias"), format!("{p} SD"), format!("{} MSE", power_label(2.0 * r))]
}

fn cell(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

pub fn delta_text(delta: Option<f64>) -> String {
    match delta {
        None => "correct specification".to_string(),
        Some(d) => match fraction(d) {
            Some((p, 1)) => format!("delta = {p}"),
            Some((p, q)) => format!("delta = {p}/{q}"),
            None => format!("delta = {d}"),
        },
    }
}

/// Renders every `(δ, coordinate)` found in `rows`, in order of appearance.
pub fn render(rows: &[SummaryRow], coords: &[usize]) -> String {
    let mut out = String::new();
    let mut deltas: Vec<Option<f64>> = Vec::new();
    for r in rows {
        if !deltas.contains(&r.delta) {
            deltas.push(r.delta);
        }
    }
    for &delta in &deltas {
        for &coord in coords {
            let block: Vec<&SummaryRow> = rows.iter().filter(|r| r.delta == delta && r.coord == coord).collect();
            if block.is_empty() {
                continue;
            }
            render_block(&mut out, &block, delta, coord);
        }
    }
    out
}

fn unique<T: PartialEq + Copy>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut v = Vec::new();
    for i in items {
        if !v.contains(&i) {
            v.push(i);
        }
    }
    v
}

fn render_block(out: &mut String, block: &[&SummaryRow], delta: Option<f64>, coord: usize) {
    let ests: Vec<EstimatorChoice> = unique(block.iter().map(|r| r.estimator));
    let ks: Vec<usize> = unique(block.iter().map(|r| r.k));
    let ns: Vec<u64> = unique(block.iter().map(|r| r.n));
    let r = block[0].r;
    let labels = stat_labels(r);
    let width = 8;
    let group = width * ns.len();
    let _ = writeln!(
        out,
        "{}: {}, {}",
        block[0].design,
        delta_text(delta),
        coord_label(coord)
    );
    let mut head = format!("{:<4}{:<16}", "K", "Statistic");
    for e in &ests {
        let _ = write!(head, "|{:^group$}", e.display());
    }
    let _ = writeln!(out, "{head}");
    let mut sub = format!("{:<20}", "");
    for _ in &ests {
        sub.push('|');
        for n in &ns {
            let _ = write!(sub, "{:>width$}", format!("n={n}"));
        }
    }
    let _ = writeln!(out, "{sub}");
    let rule = "-".repeat(sub.len());
    let _ = writeln!(out, "{rule}");
    for &k in &ks {
        for (s, label) in labels.iter().enumerate() {
            let kcol = if s == 0 { k.to_string() } else { String::new() };
            let mut line = format!("{kcol:<4}{label:<16}");
            for &e in &ests {
                line.push('|');
                for &n in &ns {
                    let v = block
                        .iter()
                        .find(|r| r.estimator == e && r.k == k && r.n == n)
                        .map(|r| [r.scaled_bias, r.scaled_sd, r.scaled_mse][s]);
                    let _ = write!(line, "{:>width$}", v.map_or("-".to_string(), cell));
                }
            }
            let _ = writeln!(out, "{line}");
        }
        let _ = writeln!(out, "{rule}");
    }
    let _ = writeln!(out);
}
