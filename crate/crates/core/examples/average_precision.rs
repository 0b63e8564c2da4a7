//! All-point AP@0.5 on a hand-built set of detections.
//!
//! ```bash
//! cargo run -p crpn --example average_precision
//! ```

use crpn::detector::Detection;
use crpn::eval::{all_point_ap, evaluate_ap, ranked_matches};
use crpn::geometry::BBox;

fn det(x: f64, y: f64, class: usize, score: f64) -> Detection {
    Detection { bbox: BBox::new(x, y, x + 20.0, y + 20.0), class, score }
}

fn main() {
    let gts = vec![
        vec![(BBox::new(0.0, 0.0, 20.0, 20.0), 1), (BBox::new(40.0, 40.0, 60.0, 60.0), 2)],
        vec![(BBox::new(10.0, 10.0, 30.0, 30.0), 1)],
    ];
    let dets = vec![
        vec![det(1.0, 1.0, 1, 0.9), det(2.0, 0.0, 1, 0.8), det(40.0, 41.0, 2, 0.6)],
        vec![det(70.0, 70.0, 1, 0.85), det(10.0, 12.0, 1, 0.4)],
    ];
    let (tp, npos) = ranked_matches(&dets, &gts, 1, 0.5);
    println!("class 1 ranked hits {tp:?} over {npos} gts -> AP {:.4}", all_point_ap(&tp, npos));
    let s = evaluate_ap(&dets, &gts, 3, 0.5);
    println!("per class {:?}, mAP {:.4}", s.per_class, s.map);
}
