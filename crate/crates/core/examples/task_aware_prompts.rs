//! Build the prompt pool for a small backbone and show how the task-aware
//! prompt changes with the missing-modality pattern.

use promptstream::losses::{cosine_sim, TaskEmbeddings};
use promptstream::optim::ParameterSet;
use promptstream::prompts::{PromptConfig, PromptFamily, PromptPool, TaskId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = PromptConfig {
        length: 4,
        init_std: 0.5,
        ..PromptConfig::default()
    };
    let (dim, layers) = (8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ParameterSet::new();
    let mut pool = PromptPool::init(&cfg, dim, layers, &mut rng, &mut params).unwrap();
    for t in TaskId::all() {
        pool.add_task(t, &mut rng, &mut params).unwrap();
    }

    let s = pool.schedule();
    for f in PromptFamily::ALL {
        println!("{:<3} layers {:?}", f.short(), s.layers(f));
    }
    println!("{} prompt parameters", params.count_prefix("prompts/"));

    for t in TaskId::all() {
        let p = pool.task_aware(&params, t.pattern()).unwrap();
        let norm = p.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("task {t} pattern {}  task-aware prompt {:?} norm {norm:.3}", t.pattern(), p.shape());
    }

    let emb = TaskEmbeddings::from_pool(&pool, &params).unwrap();
    println!("cosine similarity of task-aware embeddings:");
    for i in TaskId::all() {
        let row: Vec<String> = TaskId::all()
            .map(|j| {
                let c = cosine_sim(emb.get(i).unwrap(), emb.get(j).unwrap()).unwrap();
                format!("{:+.2}", c.item())
            })
            .collect();
        println!("  {i}: {}", row.join(" "));
    }
}
