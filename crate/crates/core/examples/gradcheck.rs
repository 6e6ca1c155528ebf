//! Finite-difference check of a transformer block feeding a linear head
//! trained with the asymmetric loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vqmae::heads::{asymmetric_loss, AslConfig};
use vqmae::ndauto::nn::{Linear, TransformerBlock};
use vqmae::ndauto::{grad_check, NdError, ParamStore, Tensor};

fn main() -> vqmae::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut store, "block", 8, 2, 2, &mut rng);
    let head = Linear::new(&mut store, "head", 8, 3, &mut rng);
    let x = Tensor::from_fn(&[5, 8], |_| rng.gen_range(-1.0..1.0));
    let labels = [2];
    let asl = AslConfig::default();

    let report = grad_check(
        &mut store,
        |g, s| {
            let x = g.constant(x.clone())?;
            let h = block.forward(g, s, x)?;
            let first = g.narrow(h, 0, 0, 1)?;
            let logits = head.forward(g, s, first)?;
            asymmetric_loss(g, logits, &labels, &asl).map_err(|e| NdError::Shape(e.to_string()))
        },
        1e-5,
        1e-4,
        16,
    )?;
    for p in &report.params {
        println!("{:24} {:3} entries  max rel err {:.2e}", p.name, p.checked, p.max_rel_error);
    }
    println!("worst {:.2e} -> {}", report.max_rel_error(), if report.passed() { "ok" } else { "FAILED" });
    Ok(())
}
