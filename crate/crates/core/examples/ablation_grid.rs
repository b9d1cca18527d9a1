//! Expand ablation grids into run configurations and show what each variant
//! changes and how many prompt parameters it trains.

use promptstream::config::{config_diff, parse_ablation, RunConfig};
use promptstream::prompts::PromptPool;

fn main() -> promptstream::Result<()> {
    let base = RunConfig::default();
    for spec in ["prompts=all", "order=all", "layout=all", "length=4,8,16,32", "prompts=MS+TA|MS+TA+TS;length=4,8"] {
        let variants = parse_ablation(spec, &base)?;
        println!("{spec}: {} variants", variants.len());
        for v in variants {
            let changed: Vec<String> = config_diff(&base, &v.config).iter().map(|(k, _, new)| format!("{k}={new}")).collect();
            let prompts = PromptPool::parameter_count(&v.config.prompts, v.config.backbone.hidden_dim, 7);
            println!("  {:<28} {:>6} prompt params  {}", v.name, prompts, changed.join(", "));
        }
    }
    Ok(())
}
