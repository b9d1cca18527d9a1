//! Run a tiny stream in two modes and merge the records into the markdown
//! table and CSV produced by `promptstream report`.

use promptstream::backbone::pretrain;
use promptstream::cli::build_report;
use promptstream::config::RunConfig;
use promptstream::continual::{run, Mode, RunRecord};
use promptstream::data::generate_synthetic;

fn main() -> promptstream::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.pretrain_samples = 120;
    cfg.data.train_per_task = 24;
    cfg.data.test_per_task = 24;
    cfg.trainer.epochs = 1;
    cfg.trainer.batch_size = 24;
    let data = generate_synthetic(&cfg.data)?;
    let pre = pretrain(&cfg.backbone, &data.pretrain, 2, 1e-3, 64, 0)?;
    let mut records = Vec::new();
    for mode in [Mode::Ours, Mode::Lowerbound, Mode::Upperbound] {
        cfg.trainer.mode = mode;
        let record = run(&cfg, &data, &pre.params)?;
        let text = record.to_json()?;
        records.push((mode.name().to_string(), RunRecord::from_json(&text)?));
    }
    let (md, csv) = build_report(&records)?;
    println!("{md}");
    println!("{} accuracy cells in the CSV", csv.lines().count() - 1);
    Ok(())
}
