//! Average accuracy and forgetting of a hand-written accuracy matrix.

use promptstream::metrics::{average_accuracy, forgetting_measure, AccuracyMatrix};

fn main() {
    // rows: task i; columns: after training task j
    let rows = [
        [0.90, 0.85, 0.70, 0.65],
        [0.00, 0.80, 0.78, 0.60],
        [0.00, 0.00, 0.75, 0.74],
        [0.00, 0.00, 0.00, 0.88],
    ];
    let mut m = AccuracyMatrix::new(4);
    for j in 1..=4 {
        for i in 1..=j {
            m.set(i, j, rows[i - 1][j - 1]).unwrap();
        }
    }
    for n in 1..=4 {
        let aa = average_accuracy(&m, n).unwrap();
        let fm = forgetting_measure(&m, n).unwrap();
        let fm = fm.map(|f| format!("{:.2}", 100.0 * f)).unwrap_or_else(|| "n/a".into());
        println!("after task {n}: AA {:.2}  FM {fm}", 100.0 * aa);
    }
}
