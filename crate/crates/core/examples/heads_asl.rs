//! The two classification heads on a random latent sequence, and how the
//! asymmetric loss reweights easy and hard examples compared with plain
//! cross-entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vqmae::heads::{asymmetric_loss, predict, AslConfig, Head, HeadKind};
use vqmae::ndauto::{Graph, ParamStore, Tensor};

fn main() -> vqmae::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (batch, seq, width, classes) = (2, 5, 16, 4);
    let latent = Tensor::from_fn(&[batch * seq, width], |_| rng.gen_range(-1.0..1.0));
    for kind in [HeadKind::ClsLinear, HeadKind::Query2Emo] {
        let mut store = ParamStore::new();
        let head = Head::new(kind, &mut store, width, classes, 4, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(latent.clone())?;
        let y = head.forward(&mut g, &store, x, batch, seq)?;
        println!("{kind}: {} parameters, logits {:?}, predictions {:?}", store.num_scalars(), g.shape(y), predict(g.value(y)));
    }

    println!("\nlogit margin   cross-entropy   ASL(γ+=0, γ-=4, m=0.05)");
    let asl = AslConfig::default();
    for margin in [-2.0, 0.0, 2.0, 5.0] {
        let logits = Tensor::new(&[1, 4], vec![margin, 0.0, 0.0, 0.0])?;
        let mut g = Graph::new();
        let v = g.constant(logits)?;
        let ce = g.cross_entropy(v, &[0], None)?;
        let l = asymmetric_loss(&mut g, v, &[0], &asl)?;
        println!("{margin:12.1} {:15.4} {:12.4}", g.value(ce).item(), g.value(l).item());
    }
    Ok(())
}
