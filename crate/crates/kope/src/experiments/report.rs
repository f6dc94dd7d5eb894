use std::fmt::Write as _;

use kope_core::model::{count_flops, count_params, FlopCount, ModelConfig, ParamCount, Variant};
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Clone, Debug, Serialize)]
pub struct CostRow {
    pub config: String,
    pub variant: Variant,
    pub params: ParamCount,
    pub flops: FlopCount,
}

/// ViT-B/16, the configured blob model, and each of them with every variant.
pub fn cost_grid(cfg: &RunConfig) -> anyhow::Result<Vec<CostRow>> {
    let mut rows = Vec::new();
    let mut add = |name: &str, base: &ModelConfig| {
        for v in Variant::ALL {
            let m = base.with_variant(v);
            rows.push(CostRow {
                config: name.to_string(),
                variant: v,
                params: count_params(&m),
                flops: count_flops(&m),
            });
        }
    };
    add("vit_b16_224", &ModelConfig::vit_base(Variant::Vit));
    add("blob", &cfg.blob_model(Variant::Vit)?);
    Ok(rows)
}

pub fn format_table(rows: &[CostRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:<18} {:>12} {:>10} {:>9} {:>14} {:>7}",
        "config", "variant", "params", "overhead", "fraction", "macs", "ratio"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:<18} {:>12} {:>10} {:>9.4} {:>14.4e} {:>7.4}",
            r.config,
            r.variant.as_str(),
            r.params.total,
            r.params.kope_overhead,
            r.params.overhead_fraction,
            r.flops.kope_flops,
            r.flops.ratio
        );
    }
    s
}
