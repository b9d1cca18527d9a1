//! Differentiate a small two-layer classifier and compare every gradient
//! with central finite differences.

use promptstream::losses::{task_loss, TaskKind};
use promptstream::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor, labels: &[f64]) -> Tensor {
    let h = x.linear(w1, b1).unwrap().layer_norm(1e-12).gelu();
    let logits = h.linear(w2, b2).unwrap();
    task_loss(&logits, labels, TaskKind::CrossEntropy).unwrap()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rand = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let x = Tensor::new(rand(5 * 4), &[5, 4]).unwrap();
    let labels = [0.0, 2.0, 1.0, 1.0, 0.0];
    let shapes: [&[usize]; 4] = [&[4, 6], &[6], &[6, 3], &[3]];
    let values: Vec<Vec<f64>> = shapes.iter().map(|s| rand(s.iter().product())).collect();

    let params: Vec<Tensor> = values.iter().zip(shapes).map(|(v, s)| Tensor::param(v.clone(), s).unwrap()).collect();
    let l = loss(&x, &params[0], &params[1], &params[2], &params[3], &labels);
    l.backward().unwrap();
    println!("loss {:.6}", l.item());

    let eval = |vals: &[Vec<f64>]| {
        let t: Vec<Tensor> = vals.iter().zip(shapes).map(|(v, s)| Tensor::new(v.clone(), s).unwrap()).collect();
        loss(&x, &t[0], &t[1], &t[2], &t[3], &labels).item()
    };
    let h = 1e-5;
    for (k, name) in ["w1", "b1", "w2", "b2"].iter().enumerate() {
        let analytic = params[k].grad().unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..analytic.len() {
            let mut plus = values.clone();
            plus[k][i] += h;
            let mut minus = values.clone();
            minus[k][i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max((numeric - analytic[i]).abs());
        }
        println!("{name}: {} entries, max |analytic - numeric| = {worst:.2e}", analytic.len());
    }
}
