//! Two-panel SVG of one utterance: frame energy above, the layers × frames
//! keep mask of one encoder module kind below.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::gates::GateRecord;
use crate::model::Stage;

const CELL: usize = 12;
const LEFT: usize = 64;
const PAD: usize = 10;
const ENERGY_HEIGHT: usize = 60;
const GAP: usize = 20;
pub const KEPT_COLOUR: &str = "#f28e2b";
pub const PRUNED_COLOUR: &str = "#e6e6e6";

/// Renders the mask of `module_kind` for utterance `utt`. `energy` holds one
/// value per frame. Identical inputs give byte-identical output.
pub fn render_heatmap(
    gates: &[GateRecord],
    energy: &[f64],
    utt: usize,
    module_kind: &str,
) -> Result<String> {
    let rows: Vec<&GateRecord> = gates
        .iter()
        .filter(|g| g.utt == utt && g.stage == Stage::Encoder && g.module_kind == module_kind)
        .collect();
    if rows.is_empty() {
        return Err(Error::Contract(format!(
            "no encoder {module_kind} gates for utterance {utt}"
        )));
    }
    let t = energy.len();
    let layers = rows.iter().map(|g| g.layer).max().expect("nonempty") + 1;
    let mut mask = vec![vec![false; t]; layers];
    for g in &rows {
        if g.position >= t {
            return Err(Error::Contract(format!(
                "gate position {} beyond {t} frames; the dump must be temporal",
                g.position
            )));
        }
        mask[g.layer][g.position] = g.decision == 1;
    }
    let width = LEFT + t * CELL + PAD;
    let mask_top = PAD + ENERGY_HEIGHT + GAP;
    let height = mask_top + layers * CELL + PAD;
    let peak = energy.iter().copied().fold(0.0, f64::max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" data-utt="{utt}" data-module="{module_kind}" data-layers="{layers}" data-frames="{t}">"#
    );
    let _ = writeln!(
        s,
        r##"<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>"##
    );
    let _ = writeln!(s, r#"<g class="energy">"#);
    let _ = writeln!(
        s,
        r#"<text x="4" y="{}" font-family="monospace" font-size="10">energy</text>"#,
        PAD + ENERGY_HEIGHT / 2
    );
    for (i, &e) in energy.iter().enumerate() {
        let h = if peak > 0.0 {
            e / peak * ENERGY_HEIGHT as f64
        } else {
            0.0
        };
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="{:.3}" width="{}" height="{:.3}" fill="#4c4c4c"/>"##,
            LEFT + i * CELL,
            (PAD + ENERGY_HEIGHT) as f64 - h,
            CELL - 1,
            h
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="mask">"#);
    for (l, row) in mask.iter().enumerate() {
        let y = mask_top + l * CELL;
        let _ = writeln!(
            s,
            r#"<text x="4" y="{}" font-family="monospace" font-size="10">layer {}</text>"#,
            y + CELL - 2,
            l + 1
        );
        for (i, &kept) in row.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<rect class="{}" x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"/>"#,
                if kept { "kept" } else { "pruned" },
                LEFT + i * CELL,
                if kept { KEPT_COLOUR } else { PRUNED_COLOUR }
            );
        }
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gates(layers: usize, t: usize, keep: impl Fn(usize, usize) -> bool) -> Vec<GateRecord> {
        (0..layers)
            .flat_map(|l| {
                let keep = &keep;
                (0..t).map(move |p| GateRecord {
                    utt: 3,
                    stage: Stage::Encoder,
                    layer: l,
                    module_kind: "self_attn".into(),
                    position: p,
                    probability: 0.5,
                    decision: u8::from(keep(l, p)),
                })
            })
            .collect()
    }

    #[test]
    fn all_keep_fills_panel() {
        let svg = render_heatmap(&gates(2, 5, |_, _| true), &[1.0; 5], 3, "self_attn").unwrap();
        assert_eq!(svg.matches(r#"class="kept""#).count(), 10);
        assert_eq!(svg.matches(r#"class="pruned""#).count(), 0);
        assert!(svg.contains(r#"data-layers="2" data-frames="5""#));
    }

    #[test]
    fn deterministic_bytes() {
        let g = gates(3, 4, |l, p| (l + p) % 2 == 0);
        let e = [0.1, 0.9, 0.4, 0.0];
        assert_eq!(
            render_heatmap(&g, &e, 3, "self_attn").unwrap(),
            render_heatmap(&g, &e, 3, "self_attn").unwrap()
        );
    }

    #[test]
    fn utterance_dump_rejected() {
        let g = gates(1, 4, |_, _| true);
        assert!(render_heatmap(&g, &[1.0; 2], 3, "self_attn").is_err());
        assert!(render_heatmap(&g, &[1.0; 4], 9, "self_attn").is_err());
    }
}
