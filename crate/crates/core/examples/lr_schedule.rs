//! Warmup + cosine schedule with the linear batch-size scaling rule.

use vqmae::train::{peak_lr, ScheduleConfig};

fn main() {
    for batch in [32, 256, 512] {
        println!("base 1e-3, batch {batch:3}: peak {:.2e}", peak_lr(1e-3, batch));
    }
    let sched = ScheduleConfig::from_epochs(1e-3, 512, 10, 100, 0.1, 1e-6);
    println!("\n{} steps, warmup {}", sched.total_steps, sched.warmup_steps);
    for step in (0..=sched.total_steps).step_by(50) {
        let lr = sched.lr_at(step);
        let bar = "#".repeat((lr / sched.peak_lr() * 50.0).round() as usize);
        println!("{step:5} {lr:.3e} {bar}");
    }
    let w = sched.warmup_steps as f64;
    println!("junction gap {:.1e}", (sched.warmup_lr(w) - sched.cosine_lr(w)).abs());
}
