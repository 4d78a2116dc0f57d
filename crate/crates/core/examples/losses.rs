//! The contrastive and triplet objectives on hand-made embeddings.

use cookie_kit::objectives::{cross_modal_loss, hard_triplet_loss, info_nce};
use cookie_kit::tensor::{Tape, Tensor};

fn main() -> cookie_kit::Result<()> {
    let images = Tensor::<f64>::from_rows(&[vec![1.0, 0.1, 0.0], vec![0.0, 1.0, 0.2], vec![0.1, 0.0, 1.0]])?;
    let aligned = images.map(|v| v + 0.05);
    let shuffled = Tensor::from_rows(&[images.row(1).to_vec(), images.row(2).to_vec(), images.row(0).to_vec()])?;

    for (name, texts) in [("aligned", &aligned), ("shuffled", &shuffled)] {
        let mut tape = Tape::new();
        let i = tape.constant(images.clone());
        let t = tape.constant(texts.clone());
        let nce = info_nce(&mut tape, i, t, 0.07)?;
        let cm = cross_modal_loss(&mut tape, i, t, 0.07)?;
        let trip = hard_triplet_loss(&mut tape, i, t, 0.2)?;
        println!(
            "{name:>8}: info_nce {:.4}  i2t {:.4}  t2i {:.4}  triplet {:.4}",
            tape.value(nce).item(),
            tape.value(cm.i2t).item(),
            tape.value(cm.t2i).item(),
            tape.value(trip).item()
        );
    }

    // every pair equally similar: the loss is ln N
    let mut tape = Tape::new();
    let same = tape.constant(Tensor::<f64>::from_fn(&[8, 3], |_| 1.0));
    let l = info_nce(&mut tape, same, same, 0.07)?;
    println!("uniform logits, N = 8: {:.6} (ln 8 = {:.6})", tape.value(l).item(), 8f64.ln());
    Ok(())
}
