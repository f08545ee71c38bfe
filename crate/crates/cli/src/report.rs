//! Plain-text tables and their `key=value` record variants.

use unode_core::seg::{self, ObjectScores};

use crate::run::ImageResult;

fn named(rows: &[ImageResult]) -> Vec<(String, ObjectScores)> {
    rows.iter().map(|r| (r.name.clone(), r.scores)).collect()
}

pub fn mean_scores(rows: &[ImageResult]) -> ObjectScores {
    seg::mean_scores(&named(rows))
}

/// `name,object_dice,f1,hausdorff` per image followed by the mean row.
pub fn metrics_table(rows: &[ImageResult]) -> String {
    seg::metrics_table(&named(rows))
}

pub fn metrics_records(rows: &[ImageResult]) -> String {
    seg::metrics_records(&named(rows))
}

/// Per-image NFE of each ODE block and the total.
pub fn nfe_table(rows: &[ImageResult]) -> String {
    let mut s = String::from("name\tnfe_per_block\ttotal_nfe\n");
    for r in rows {
        let blocks: Vec<String> = r.nfe_per_block.iter().map(|n| n.to_string()).collect();
        s += &format!("{}\t{}\t{}\n", r.name, blocks.join(","), r.nfe_per_block.iter().sum::<usize>());
    }
    s
}

/// One row of the model comparison.
#[derive(Clone, Debug)]
pub struct ComparisonRow {
    pub method: String,
    pub scores: ObjectScores,
    pub parameters: usize,
}

pub fn display_name(arch: &str) -> &str {
    match arch {
        "unet" => "U-Net",
        "uresnet" => "U-ResNet",
        "unode" => "U-Node",
        other => other,
    }
}

fn human_count(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.1}m", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{:.0}k", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}

/// Method, object Dice, F1, Hausdorff and a parameter-count note per model.
pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let header = ["Method", "Object Dice", "F1 score", "Hausdorff*", "Notes"];
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                format!("{:.3}", r.scores.object_dice),
                format!("{:.3}", r.scores.f1),
                format!("{:.1}", r.scores.hausdorff),
                format!("{} parameters", human_count(r.parameters)),
            ]
        })
        .collect();
    let width: Vec<usize> = (0..5)
        .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[&str]| -> String {
        let parts: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("| {} |\n", parts.join(" | "))
    };
    let mut s = line(&header);
    let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
    s += &format!("|-{}-|\n", rule.join("-|-"));
    for r in &body {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        s += &line(&cells);
    }
    s += "*a lower Hausdorff distance is better.\n";
    s
}

pub fn comparison_records(rows: &[ComparisonRow]) -> String {
    rows.iter()
        .map(|r| {
            format!(
                "method={} object_dice={} f1={} hausdorff={} parameters={}\n",
                r.method, r.scores.object_dice, r.scores.f1, r.scores.hausdorff, r.parameters
            )
        })
        .collect()
}
