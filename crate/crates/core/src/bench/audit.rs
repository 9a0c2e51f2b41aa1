//! Parameter and MAC audit of an encoder configuration.

use serde::Serialize;

use crate::bench::text_table;
use crate::encoder::{EncoderConfig, MacReport, ParamReport};
use crate::error::Result;

/// One computed quantity next to its published reference value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceCheck {
    pub quantity: &'static str,
    pub ours: f64,
    pub reference: f64,
    pub reference_label: &'static str,
    pub delta_abs: f64,
    pub delta_rel: f64,
    pub note: &'static str,
}

impl ReferenceCheck {
    fn new(quantity: &'static str, ours: f64, reference: f64, reference_label: &'static str, note: &'static str) -> Self {
        Self {
            quantity,
            ours,
            reference,
            reference_label,
            delta_abs: ours - reference,
            delta_rel: (ours - reference) / reference,
            note,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub config: EncoderConfig,
    pub params: ParamReport,
    pub macs: MacReport,
    pub tokens_per_stream: usize,
    /// Published budgets for the default ViT-Base geometry.
    pub references: Vec<ReferenceCheck>,
}

pub fn audit(config: &EncoderConfig) -> Result<AuditReport> {
    config.validate()?;
    let params = config.param_report();
    let macs = config.mac_report();
    let references = vec![
        ReferenceCheck::new("amg_lora_params", params.amg_lora as f64, 0.14e6, "0.14M", "published value is truncated"),
        ReferenceCheck::new(
            "hmoe_params",
            params.hmoe as f64,
            0.46e6,
            "0.46M",
            "analytic count from the stated shapes; the published figure is larger",
        ),
        ReferenceCheck::new("learnable_params", params.learnable_total as f64, 0.6e6, "0.6M", ""),
        ReferenceCheck::new(
            "forward_macs",
            macs.total as f64,
            56.466e9,
            "56.466G",
            "reference was profiled on the full tracker including the prediction head",
        ),
    ];
    Ok(AuditReport {
        config: config.clone(),
        params,
        macs,
        tokens_per_stream: config.tokens_per_stream(),
        references,
    })
}

fn millions(v: f64) -> String {
    format!("{:.3}M", v / 1e6)
}

impl AuditReport {
    pub fn to_text(&self) -> String {
        let p = &self.params;
        let m = &self.macs;
        let mut out = String::new();
        out.push_str(&format!(
            "insertion layers: {:?} ({} of {}), {} + {} tokens per stream{}\n\n",
            p.insertion_layers,
            p.insertion_layers.len(),
            self.config.n_layers,
            self.config.n_z,
            self.config.n_c,
            if self.config.merged_lora { ", LoRA merged" } else { "" }
        ));
        let rows = vec![
            vec!["amg_lora".into(), p.amg_lora.to_string(), p.amg_lora_per_layer.to_string()],
            vec![
                "hmoe".into(),
                p.hmoe.to_string(),
                (p.hmoe_attn_block + p.hmoe_ffn_block).to_string(),
            ],
            vec!["  attention side".into(), (p.insertion_layers.len() * p.hmoe_attn_block).to_string(), p.hmoe_attn_block.to_string()],
            vec!["  ffn side".into(), (p.insertion_layers.len() * p.hmoe_ffn_block).to_string(), p.hmoe_ffn_block.to_string()],
            vec!["learnable total".into(), p.learnable_total.to_string(), String::new()],
            vec!["frozen total".into(), p.frozen_total.to_string(), String::new()],
        ];
        out.push_str(&text_table(&["component", "params", "per layer"], &rows));
        out.push('\n');
        let rows = vec![
            vec!["frozen backbone".into(), m.frozen.to_string()],
            vec!["lora bypass".into(), m.lora.to_string()],
            vec!["guidance".into(), m.amg.to_string()],
            vec!["hmoe".into(), m.hmoe.to_string()],
            vec!["total".into(), m.total.to_string()],
        ];
        out.push_str(&text_table(&["macs", "count"], &rows));
        out.push('\n');
        let rows: Vec<Vec<String>> = self
            .references
            .iter()
            .map(|r| {
                let ours = if r.quantity == "forward_macs" {
                    format!("{:.3}G", r.ours / 1e9)
                } else {
                    millions(r.ours)
                };
                vec![
                    r.quantity.to_string(),
                    ours,
                    r.reference_label.to_string(),
                    format!("{:+.1}%", 100.0 * r.delta_rel),
                    r.note.to_string(),
                ]
            })
            .collect();
        out.push_str(&text_table(&["quantity", "ours", "reference", "delta", "note"], &rows));
        out.push_str(&format!("trainable: {}\n", p.trainable.join(", ")));
        out
    }
}
