use std::fmt::Write as _;

use serde_json::Value;

use super::probe::ProbeResult;
use super::study::StudyReport;

/// Collates study reports, probe results, variance summaries and theory
/// CSVs into one markdown document. Entries are `(file name, contents)`;
/// the output does not depend on their order.
pub fn collate(entries: &[(String, String)]) -> String {
    let mut entries: Vec<&(String, String)> = entries.iter().collect();
    entries.sort();
    let mut studies = Vec::new();
    let mut probes = Vec::new();
    let mut variances = Vec::new();
    let mut theory = Vec::new();
    let mut ignored = Vec::new();
    for (name, text) in entries {
        if name.ends_with(".json") {
            if let Ok(r) = StudyReport::from_json(text) {
                studies.push((name, r));
            } else if let Ok(p) = serde_json::from_str::<ProbeResult>(text) {
                probes.push((name, p));
            } else if let Some(v) = serde_json::from_str::<Value>(text).ok().filter(|v| v.get("v").is_some()) {
                variances.push((name, v));
            } else {
                ignored.push(name);
            }
        } else if name.ends_with(".csv") && text.starts_with("sigma_prime_scale,") {
            theory.push((name, text));
        } else {
            ignored.push(name);
        }
    }

    let mut s = String::from("# asym-lab summary\n\n");
    if !studies.is_empty() {
        s.push_str("## Placement studies\n\n| design | cell | top-1 (%) | n | reference (%) |\n|---|---|---|---|---|\n");
        for (_, r) in &studies {
            for c in &r.cells {
                let reference = r
                    .reference
                    .iter()
                    .find(|(k, _)| *k == c.cell)
                    .map_or(String::new(), |(_, v)| format!("{v:.1}"));
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.2} ± {:.2} | {} | {reference} |",
                    r.design,
                    c.cell,
                    100.0 * c.mean,
                    100.0 * c.sd,
                    c.n
                );
            }
        }
        s.push_str("\n| design | preferred | mean diff (pts) | p | verdict |\n|---|---|---|---|---|\n");
        for (_, r) in &studies {
            if let Some(t) = &r.sign_test {
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.2} | {:.4} | {} |",
                    r.design,
                    t.better,
                    100.0 * t.mean_diff,
                    t.p,
                    if t.passed { "PASS" } else { "FAIL" }
                );
            }
        }
        s.push('\n');
    }
    if !variances.is_empty() {
        s.push_str("## Variance references\n\n| file | recipe | encoder | v | images |\n|---|---|---|---|---|\n");
        for (name, v) in &variances {
            let _ = writeln!(
                s,
                "| {name} | {} | {} | {} | {} |",
                v["recipe"].as_str().unwrap_or("?"),
                v["encoder"].as_str().unwrap_or("?"),
                v["v"],
                v["images"]
            );
        }
        s.push('\n');
    }
    if !probes.is_empty() {
        s.push_str("## Linear probes\n\n| file | top-1 (%) | seed | config |\n|---|---|---|---|\n");
        for (name, p) in &probes {
            let _ = writeln!(
                s,
                "| {name} | {:.2} | {} | {} |",
                100.0 * p.top1,
                p.seed,
                &p.config_hash[..12.min(p.config_hash.len())]
            );
        }
        s.push('\n');
    }
    for (name, text) in &theory {
        let _ = writeln!(s, "## Theory sweep `{name}`\n");
        for (i, line) in text.lines().enumerate() {
            let _ = writeln!(s, "| {} |", line.replace(',', " | "));
            if i == 0 {
                let cols = line.split(',').count();
                let _ = writeln!(s, "|{}", "---|".repeat(cols));
            }
        }
        s.push('\n');
    }
    if !ignored.is_empty() {
        let names: Vec<&str> = ignored.iter().map(|n| n.as_str()).collect();
        let _ = writeln!(s, "Not collated: {}", names.join(", "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_independent() {
        let a = ("b.csv".to_string(), "sigma_prime_scale,empirical\n1,2\n".to_string());
        let b = (
            "a.json".to_string(),
            r#"{"v":0.001,"r":32,"recipe":"baseline","encoder":"e","images":4}"#.to_string(),
        );
        let c = ("notes.txt".to_string(), "hello".to_string());
        let one = collate(&[a.clone(), b.clone(), c.clone()]);
        let two = collate(&[c, b, a]);
        assert_eq!(one, two);
        assert!(one.contains("| a.json | baseline | e | 0.001 | 4 |"));
        assert!(one.contains("| sigma_prime_scale | empirical |"));
        assert!(one.contains("Not collated: notes.txt"));
    }
}
