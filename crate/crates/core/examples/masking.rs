//! The four masking strategies on a 10 × 16 token grid.

use vqmae::tokens::{expected_masked, make_mask, MaskStrategy, TokenGeometry};

fn main() -> vqmae::Result<()> {
    let ratio = 0.8;
    // 100 frames × 64 positions in 10 × 4 tokens
    let patch = TokenGeometry::new(100, 64, 10, 4)?;
    // one token per frame
    let frame = TokenGeometry::new(100, 64, 1, 64)?;
    for strategy in MaskStrategy::ALL {
        let geo = if strategy == MaskStrategy::Frame { frame } else { patch };
        let plan = make_mask(&geo, strategy, ratio, 7)?;
        println!("{strategy}: {} of {} tokens masked (closed form {})", plan.num_masked(), geo.num_tokens(), expected_masked(&geo, strategy, ratio));
        if strategy != MaskStrategy::Frame {
            print!("{}", plan.render_text(&geo));
        }
        println!();
    }
    Ok(())
}
