//! Ablation runs: several model variants, each trained and evaluated per
//! seed on the same data.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalReport};
use crate::params::ParamStore;
use crate::synth::SceneRecord;
use crate::train::{init_rng, train, TrainConfig, TrainState};

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub id: String,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Stage 4 alone, then adding stages 3, 2 and 1.
    Stages,
    /// Both chains off, feature only, score only, both on.
    Chains,
    R,
    LambdaF,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub presets: Vec<Preset>,
    pub seeds: Vec<u64>,
    pub r_grid: Vec<f64>,
    pub lambda_f_grid: Vec<f64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            presets: vec![Preset::Stages, Preset::Chains],
            seeds: vec![0, 1, 2],
            r_grid: vec![0.9, 0.99, 0.999],
            lambda_f_grid: vec![0.0, 0.1, 0.3, 0.5],
        }
    }
}

pub fn stage_variants(base: &ModelConfig) -> Vec<Variant> {
    [(1, "4-only"), (2, "3+4"), (3, "2+3+4"), (4, "all")]
        .into_iter()
        .map(|(t, id)| {
            let mut m = base.clone();
            m.cascade.stages = t;
            Variant { id: id.into(), model: m }
        })
        .collect()
}

pub fn chain_variants(base: &ModelConfig) -> Vec<Variant> {
    [(false, false, "no-chains"), (true, false, "feature-chain"), (false, true, "score-chain"), (true, true, "both-chains")]
        .into_iter()
        .map(|(f, s, id)| {
            let mut m = base.clone();
            m.cascade.feature_chain = f;
            m.cascade.score_chain = s;
            Variant { id: id.into(), model: m }
        })
        .collect()
}

pub fn r_variants(base: &ModelConfig, grid: &[f64]) -> Vec<Variant> {
    grid.iter()
        .map(|&r| {
            let mut m = base.clone();
            m.cascade.r = r;
            Variant { id: format!("r={r}"), model: m }
        })
        .collect()
}

pub fn lambda_f_variants(base: &ModelConfig, grid: &[f64]) -> Vec<Variant> {
    grid.iter()
        .map(|&lf| {
            let mut m = base.clone();
            m.cascade.lambda_f = lf;
            m.cascade.lambda_p = 1.0 - lf;
            Variant { id: format!("lambda_f={lf}"), model: m }
        })
        .collect()
}

pub fn preset_variants(base: &ModelConfig, preset: Preset, cfg: &AblateConfig) -> Vec<Variant> {
    match preset {
        Preset::Stages => stage_variants(base),
        Preset::Chains => chain_variants(base),
        Preset::R => r_variants(base, &cfg.r_grid),
        Preset::LambdaF => lambda_f_variants(base, &cfg.lambda_f_grid),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub report: EvalReport,
}

/// Trains one variant from scratch with `seed` driving both initialization
/// and training randomness.
pub fn run_variant(
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    train_data: &[SceneRecord],
    test_data: &[SceneRecord],
) -> Result<EvalReport> {
    let mut store = ParamStore::new();
    let det = Detector::new(model, &mut store, &mut init_rng(seed))?;
    let mut state = TrainState::new(store);
    let cfg = TrainConfig { seed, ..train_cfg.clone() };
    train(&det, &mut state, train_data, &cfg, |_, _| Ok(()))?;
    evaluate_model(&det, &state.params, test_data)
}

/// Every variant under every seed, variants outermost. `progress` sees each
/// row as it completes.
pub fn ablate<F>(
    variants: &[Variant],
    train_cfg: &TrainConfig,
    seeds: &[u64],
    train_data: &[SceneRecord],
    test_data: &[SceneRecord],
    mut progress: F,
) -> Result<Vec<AblationRow>>
where
    F: FnMut(&AblationRow),
{
    if variants.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "an ablation needs at least 2 variants, got {}",
            variants.len()
        )));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("an ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for v in variants {
        for &seed in seeds {
            let report = run_variant(&v.model, train_cfg, seed, train_data, test_data)?;
            let row = AblationRow { variant: v.id.clone(), seed, report };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub variant: String,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

/// mAP mean and spread per variant, in first-appearance order.
pub fn summarize(rows: &[AblationRow]) -> Vec<Summary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    order
        .into_iter()
        .map(|id| {
            let v: Vec<f64> = rows.iter().filter(|r| r.variant == id).map(|r| r.report.map50).collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Summary { variant: id.to_string(), runs: v.len(), mean, std }
        })
        .collect()
}

pub fn rows_csv(rows: &[AblationRow], generated: Option<&str>) -> String {
    let mut s = String::new();
    if let Some(g) = generated {
        let _ = writeln!(s, "# generated {g}");
    }
    let classes = rows.first().map_or(0, |r| r.report.ap50_per_class.len());
    let mut head = vec!["variant".to_string(), "seed".into(), "map50".into()];
    head.extend((1..=classes).map(|c| format!("ap50_class{c}")));
    let _ = writeln!(s, "{}", head.join(","));
    for r in rows {
        let mut f = vec![r.variant.clone(), r.seed.to_string(), r.report.map50.to_string()];
        f.extend(r.report.ap50_per_class.iter().map(|v| v.map_or_else(String::new, |x| x.to_string())));
        let _ = writeln!(s, "{}", f.join(","));
    }
    s
}

pub fn summary_csv(summary: &[Summary], generated: Option<&str>) -> String {
    let mut s = String::new();
    if let Some(g) = generated {
        let _ = writeln!(s, "# generated {g}");
    }
    let _ = writeln!(s, "variant,runs,map50_mean,map50_std");
    for m in summary {
        let _ = writeln!(s, "{},{},{},{}", m.variant, m.runs, m.mean, m.std);
    }
    s
}

/// A standalone SVG line chart. Points are `(tick label, y)` and are spread
/// evenly along x in order.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, points: &[(String, f64)]) -> String {
    let (w, h) = (480.0, 320.0);
    let (l, r, t, b) = (60.0, 20.0, 40.0, 50.0);
    let (pw, ph) = (w - l - r, h - t - b);
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let mut lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.05;
        hi += 0.05;
    }
    let x_at = |i: usize| {
        if points.len() < 2 {
            l + pw / 2.0
        } else {
            l + pw * i as f64 / (points.len() - 1) as f64
        }
    };
    let y_at = |v: f64| t + ph * (1.0 - (v - lo) / (hi - lo));

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{l}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, t + ph, l + pw, t + ph);
    let _ = writeln!(s, r#"<line x1="{l}" y1="{t}" x2="{l}" y2="{}" stroke="black"/>"#, t + ph);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_at(v);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y:.2}" x2="{l}" y2="{y:.2}" stroke="black"/>"#, l - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.3}</text>"#, l - 6.0, y + 3.0);
    }
    for (i, (label, _)) in points.iter().enumerate() {
        let x = x_at(i);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="10">{}</text>"#, t + ph + 14.0, escape(label));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#, l + pw / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(s, r#"<text x="14" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})">{}</text>"#, t + ph / 2.0, t + ph / 2.0, escape(y_label));
    let pts: Vec<String> = points.iter().enumerate().map(|(i, p)| format!("{:.2},{:.2}", x_at(i), y_at(p.1))).collect();
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, pts.join(" "));
    for p in &pts {
        let (x, y) = p.split_once(',').expect("point");
        let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="steelblue"/>"#);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
