//! Comparison tables over run reports, plus deterministic emitters: aligned
//! text, CSV (round-trippable), JSON, and a grouped-bar SVG chart.

use crate::engine::{RunReport, RunStatus};
use crate::schedulers::PolicyId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Which latency bucket a table compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    EndToEnd,
    PrefillMoe,
    DecodeMoe,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::EndToEnd, Metric::PrefillMoe, Metric::DecodeMoe];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::EndToEnd => "e2e",
            Metric::PrefillMoe => "prefill_moe",
            Metric::DecodeMoe => "decode_moe",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.as_str() == s)
    }

    fn value(self, r: &RunReport) -> f64 {
        match self {
            Metric::EndToEnd => r.end_to_end_s,
            Metric::PrefillMoe => r.prefill_moe_s,
            Metric::DecodeMoe => r.decode_moe_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub policy: String,
    pub ndp: usize,
    pub stage: String,
    /// None when the configuration is not schedulable.
    pub latency_s: Option<f64>,
    /// baseline latency / this latency; None without both latencies.
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub metric: String,
    pub baseline_policy: String,
    pub rows: Vec<TableRow>,
    /// Geometric mean of per-(model, N) speedups, per policy.
    pub speedup_geomean: BTreeMap<String, f64>,
    /// Arithmetic mean of the same speedups.
    pub speedup_mean: BTreeMap<String, f64>,
}

/// Build a table in report order, normalizing each row against the baseline
/// policy's latency at the same (model, DIMM count).
pub fn build_table(reports: &[RunReport], baseline: PolicyId, metric: Metric) -> ComparisonTable {
    let mut base: BTreeMap<(String, usize), f64> = BTreeMap::new();
    for r in reports {
        if r.policy == baseline && r.status == RunStatus::Ok {
            base.insert((r.model.clone(), r.ndp_count), metric.value(r));
        }
    }

    let mut rows = Vec::with_capacity(reports.len());
    for r in reports {
        let latency_s = (r.status == RunStatus::Ok).then(|| metric.value(r));
        let speedup = match (latency_s, base.get(&(r.model.clone(), r.ndp_count))) {
            (Some(lat), Some(&b)) if lat > 0.0 => Some(b / lat),
            _ => None,
        };
        rows.push(TableRow {
            model: r.model.clone(),
            policy: r.policy.cli_name().to_string(),
            ndp: r.ndp_count,
            stage: metric.as_str().to_string(),
            latency_s,
            speedup,
        });
    }

    let mut per_policy: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in &rows {
        if let Some(s) = row.speedup {
            per_policy.entry(row.policy.clone()).or_default().push(s);
        }
    }
    let speedup_geomean = per_policy
        .iter()
        .map(|(p, v)| {
            let g = (v.iter().map(|s| s.ln()).sum::<f64>() / v.len() as f64).exp();
            (p.clone(), g)
        })
        .collect();
    let speedup_mean = per_policy
        .iter()
        .map(|(p, v)| (p.clone(), v.iter().sum::<f64>() / v.len() as f64))
        .collect();

    ComparisonTable {
        metric: metric.as_str().to_string(),
        baseline_policy: baseline.cli_name().to_string(),
        rows,
        speedup_geomean,
        speedup_mean,
    }
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,policy,ndp,stage,latency_s,speedup\n");
        for r in &self.rows {
            let lat = match r.latency_s {
                Some(v) => format!("{v:.9e}"),
                None => "NS".to_string(),
            };
            let sp = match r.speedup {
                Some(v) => format!("{v:.6}"),
                None => "NS".to_string(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.model, r.policy, r.ndp, r.stage, lat, sp
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Aligned text table plus aggregate lines; states how the aggregate
    /// speedups are computed.
    pub fn format_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "metric: {}   baseline: {}",
            self.metric, self.baseline_policy
        );
        let _ = writeln!(
            out,
            "{:<14} {:<10} {:>3}  {:>15}  {:>9}",
            "model", "policy", "N", "latency_s", "speedup"
        );
        for r in &self.rows {
            let lat = match r.latency_s {
                Some(v) => format!("{v:.6e}"),
                None => "N.S.".to_string(),
            };
            let sp = match r.speedup {
                Some(v) => format!("{v:.3}"),
                None => "-".to_string(),
            };
            let _ = writeln!(
                out,
                "{:<14} {:<10} {:>3}  {:>15}  {:>9}",
                r.model, r.policy, r.ndp, lat, sp
            );
        }
        let _ = writeln!(
            out,
            "speedup vs {} (geometric mean of per-(model, N) points; arithmetic mean in parens):",
            self.baseline_policy
        );
        for (policy, g) in &self.speedup_geomean {
            let a = self.speedup_mean[policy];
            let _ = writeln!(out, "  {policy:<10} {g:.3} ({a:.3})");
        }
        out
    }

    /// Grouped bar chart of speedups: one group per (model, N), one bar per
    /// policy. Unschedulable points render as an "N.S." marker. Output is a
    /// pure function of the table.
    pub fn to_svg(&self, title: &str) -> String {
        const BAR_W: f64 = 34.0;
        const BAR_GAP: f64 = 6.0;
        const GROUP_GAP: f64 = 30.0;
        const CHART_H: f64 = 220.0;
        const LEFT: f64 = 56.0;
        const TOP: f64 = 56.0;
        const BOTTOM: f64 = 46.0;

        // Stable group / bar orders: first appearance in row order.
        let mut groups: Vec<(String, usize)> = Vec::new();
        let mut policies: Vec<String> = Vec::new();
        for r in &self.rows {
            let g = (r.model.clone(), r.ndp);
            if !groups.contains(&g) {
                groups.push(g);
            }
            if !policies.contains(&r.policy) {
                policies.push(r.policy.clone());
            }
        }
        let single_model = groups.iter().map(|(m, _)| m).collect::<Vec<_>>().windows(2).all(|w| w[0] == w[1]);

        let group_w = policies.len() as f64 * (BAR_W + BAR_GAP) - BAR_GAP;
        let width = LEFT + groups.len() as f64 * (group_w + GROUP_GAP) + 10.0;
        let height = TOP + CHART_H + BOTTOM;
        let max_speedup = self
            .rows
            .iter()
            .filter_map(|r| r.speedup)
            .fold(1.0_f64, f64::max);
        let axis_y = TOP + CHART_H;

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" font-family=\"monospace\" font-size=\"11\">"
        );
        let _ = writeln!(
            svg,
            "<text x=\"{LEFT:.0}\" y=\"16\" font-size=\"13\">{}</text>",
            xml_escape(title)
        );
        // Legend swatches.
        for (i, p) in policies.iter().enumerate() {
            let x = LEFT + i as f64 * 92.0;
            let _ = writeln!(
                svg,
                "<rect x=\"{x:.1}\" y=\"26\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"35\">{}</text>",
                policy_color(p),
                x + 14.0,
                xml_escape(p)
            );
        }
        // Horizontal gridlines with speedup labels.
        for t in 0..=4 {
            let v = max_speedup * t as f64 / 4.0;
            let y = axis_y - CHART_H * t as f64 / 4.0;
            let _ = writeln!(
                svg,
                "<line x1=\"{LEFT:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/><text x=\"8\" y=\"{:.1}\">{v:.2}</text>",
                width - 8.0,
                y + 4.0
            );
        }
        for (gi, (model, ndp)) in groups.iter().enumerate() {
            let gx = LEFT + gi as f64 * (group_w + GROUP_GAP);
            let label = if single_model {
                format!("N={ndp}")
            } else {
                format!("{model} N={ndp}")
            };
            let _ = writeln!(
                svg,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
                gx + group_w / 2.0,
                axis_y + 16.0,
                xml_escape(&label)
            );
            for (pi, policy) in policies.iter().enumerate() {
                let x = gx + pi as f64 * (BAR_W + BAR_GAP);
                let row = self
                    .rows
                    .iter()
                    .find(|r| &r.model == model && r.ndp == *ndp && &r.policy == policy);
                match row.and_then(|r| r.speedup) {
                    Some(s) => {
                        let h = CHART_H * s / max_speedup;
                        let y = axis_y - h;
                        let _ = writeln!(
                            svg,
                            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{BAR_W:.0}\" height=\"{h:.1}\" fill=\"{}\"/>",
                            policy_color(policy)
                        );
                        let _ = writeln!(
                            svg,
                            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{s:.2}</text>",
                            x + BAR_W / 2.0,
                            y - 3.0
                        );
                    }
                    None if row.is_some() => {
                        let _ = writeln!(
                            svg,
                            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\" fill=\"#999999\">N.S.</text>",
                            x + BAR_W / 2.0,
                            axis_y - 6.0
                        );
                    }
                    None => {}
                }
            }
        }
        let _ = writeln!(
            svg,
            "<line x1=\"{LEFT:.1}\" y1=\"{axis_y:.1}\" x2=\"{:.1}\" y2=\"{axis_y:.1}\" stroke=\"#000000\"/>",
            width - 8.0
        );
        svg.push_str("</svg>\n");
        svg
    }
}

fn policy_color(policy: &str) -> &'static str {
    match policy {
        "ondemand" => "#7f7f7f",
        "cpu" => "#bcbd22",
        "ep" => "#1f77b4",
        "tp" => "#ff7f0e",
        "tp-lb" => "#2ca02c",
        "tp-lb-pre" => "#d62728",
        _ => "#17becf",
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Parse CSV produced by [`ComparisonTable::to_csv`].
pub fn parse_csv(s: &str) -> Result<Vec<TableRow>, String> {
    let mut lines = s.lines();
    let header = lines.next().ok_or("empty CSV")?;
    if header != "model,policy,ndp,stage,latency_s,speedup" {
        return Err(format!("unexpected CSV header: {header}"));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(format!("line {}: expected 6 fields, got {}", i + 2, f.len()));
        }
        let opt = |s: &str| -> Result<Option<f64>, String> {
            if s == "NS" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| format!("line {}: {e}", i + 2))
            }
        };
        rows.push(TableRow {
            model: f[0].to_string(),
            policy: f[1].to_string(),
            ndp: f[2].parse().map_err(|e| format!("line {}: {e}", i + 2))?,
            stage: f[3].to_string(),
            latency_s: opt(f[4])?,
            speedup: opt(f[5])?,
        });
    }
    Ok(rows)
}
