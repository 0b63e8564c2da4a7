//! The weighted cascade classification loss on hand-made stage batches.
//!
//! ```bash
//! cargo run -p crpn --example cascade_loss
//! ```

use crpn::losses::{cascade_cls_loss, StageBatch, StageWeights};

fn main() {
    println!("alpha for T = 4: {:?}", StageWeights::new(4).alpha);

    let one = StageBatch { scores: vec![[0.5, 0.5]], k_star: vec![1], mu: vec![true] };
    let two = StageBatch { scores: vec![[0.2, 0.8]], k_star: vec![1], mu: vec![true] };
    let w = StageWeights { alpha: vec![0.1, 1.0] };
    println!("single stage, p = 0.5: {:.6}", cascade_cls_loss(std::slice::from_ref(&one), &StageWeights::new(1)));
    println!("two stages: {:.6}", cascade_cls_loss(&[one.clone(), two], &w));

    // mu = 0 at stage 2: the sample was rejected earlier and adds nothing.
    let rejected = StageBatch { scores: vec![[0.99, 0.01]], k_star: vec![1], mu: vec![false] };
    println!("rejected at stage 2: {:.6}", cascade_cls_loss(&[one, rejected], &w));
}
