//! Train prompts over the seven-task stream with a frozen backbone, then the
//! fine-tuning baseline, and print both accuracy matrices.

use promptstream::backbone::pretrain;
use promptstream::config::RunConfig;
use promptstream::continual::{run, Mode, RunRecord};
use promptstream::data::generate_synthetic;

fn print_record(r: &RunRecord) {
    println!("== {} ==", r.mode.name());
    let m = r.accuracy_matrix.as_ref().expect("sequential run");
    for i in 1..=m.tasks() {
        let row: Vec<String> = (1..=m.tasks())
            .map(|j| match m.get(i, j) {
                Ok(Some(a)) => format!("{:5.1}", 100.0 * a),
                _ => "    .".into(),
            })
            .collect();
        println!("task {}: {}", r.task_order[i - 1], row.join(" "));
    }
    println!(
        "AA {:.2}  FM {:.2}  trainable {} of {}",
        100.0 * r.average_accuracy,
        100.0 * r.forgetting.unwrap_or(0.0),
        r.parameters.trainable,
        r.parameters.total
    );
}

fn main() -> promptstream::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.pretrain_samples = 300;
    cfg.data.train_per_task = 80;
    cfg.data.test_per_task = 80;
    cfg.trainer.epochs = 3;
    cfg.trainer.batch_size = 32;
    let data = generate_synthetic(&cfg.data)?;
    let pre = pretrain(&cfg.backbone, &data.pretrain, 5, 1e-3, 64, 0)?;
    for mode in [Mode::Ours, Mode::Lowerbound] {
        cfg.trainer.mode = mode;
        print_record(&run(&cfg, &data, &pre.params)?);
    }
    Ok(())
}
