//! Token heatmaps for flagged agents.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detector::ScoreReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderFormat {
    Ansi,
    Html,
}

impl std::str::FromStr for RenderFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ansi" => Ok(Self::Ansi),
            "html" => Ok(Self::Html),
            other => Err(Error::InvalidParam(format!("unknown render format `{other}`"))),
        }
    }
}

/// `max(0, e) / max_j max(0, e_j)`, or all zeros when nothing is positive.
pub fn token_intensities(expl: &[f64]) -> Vec<f64> {
    let top = expl.iter().fold(0.0f64, |m, &e| m.max(e));
    if top > 0.0 {
        expl.iter().map(|&e| e.max(0.0) / top).collect()
    } else {
        vec![0.0; expl.len()]
    }
}

/// White at intensity 0, `rgb(255, 64, 64)` at intensity 1.
pub fn intensity_color(intensity: f64) -> (u8, u8, u8) {
    let fade = (255.0 - 0.75 * 255.0 * intensity.clamp(0.0, 1.0)).round() as u8;
    (255, fade, fade)
}

fn html_escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn check(report: &ScoreReport) -> Result<()> {
    if report.tokens.len() != report.token_expl.len() {
        return Err(Error::Shape("tokens and explanations cover different agents".into()));
    }
    for (agent, (t, e)) in report.tokens.iter().zip(&report.token_expl).enumerate() {
        if t.len() != e.len() {
            return Err(Error::Shape(format!("agent {agent}: {} tokens, {} scores", t.len(), e.len())));
        }
    }
    if let Some(&bad) = report.flagged.iter().find(|&&a| a >= report.tokens.len()) {
        return Err(Error::UnknownAgent(bad));
    }
    Ok(())
}

pub fn render_explanation(report: &ScoreReport, format: RenderFormat) -> Result<String> {
    check(report)?;
    Ok(match format {
        RenderFormat::Ansi => render_ansi(report),
        RenderFormat::Html => render_html(report),
    })
}

fn render_ansi(report: &ScoreReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "graph {}", report.graph_id);
    if report.flagged.is_empty() {
        out.push_str("no agents flagged\n");
    }
    for &agent in &report.flagged {
        let _ = writeln!(out, "agent {agent} (score {:.4})", report.fused[agent]);
        let line: Vec<String> = report.tokens[agent]
            .iter()
            .zip(token_intensities(&report.token_expl[agent]))
            .map(|(tok, i)| {
                let (r, g, b) = intensity_color(i);
                format!("\x1b[48;2;{r};{g};{b}m\x1b[38;2;0;0;0m{tok}\x1b[0m")
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

fn render_html(report: &ScoreReport) -> String {
    let id = html_escape(&report.graph_id);
    let mut out = String::new();
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\"/>\n<title>Flagged agents in {id}</title>\n</head>\n<body style=\"font-family: monospace;\">\n<h1>Graph {id}</h1>\n"
    );
    if report.flagged.is_empty() {
        out.push_str("<p>No agents flagged.</p>\n");
    }
    for &agent in &report.flagged {
        let _ = writeln!(
            out,
            "<div class=\"agent\" data-agent=\"{agent}\">\n<h2>Agent {agent} (score {:.4})</h2>",
            report.fused[agent]
        );
        out.push_str("<p>");
        let spans: Vec<String> = report.tokens[agent]
            .iter()
            .zip(token_intensities(&report.token_expl[agent]))
            .map(|(tok, i)| {
                let (r, g, b) = intensity_color(i);
                format!(
                    "<span class=\"tok\" style=\"background-color: rgb({r},{g},{b}); padding: 0 2px;\">{}</span>",
                    html_escape(tok)
                )
            })
            .collect();
        out.push_str(&spans.join(" "));
        out.push_str("</p>\n</div>\n");
    }
    out.push_str("</body>\n</html>\n");
    out
}
