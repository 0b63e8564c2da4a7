//! Anchor grid, box encoding round trip and non-maximum suppression.
//!
//! ```bash
//! cargo run -p crpn --example anchors_and_nms
//! ```

use crpn::geometry::{decode, encode, generate_anchors, iou, nms, BBox};

fn main() -> crpn::Result<()> {
    let grid = generate_anchors(6, 6, 16, &[1.0, 2.0], &[0.5, 1.0, 2.0])?;
    println!("{} anchors, {} per cell", grid.len(), grid.per_cell());
    let inside = grid.inside_mask(96.0, 96.0).iter().filter(|&&m| m).count();
    println!("{inside} lie fully inside a 96x96 image");

    let gt = BBox::new(20.0, 24.0, 58.0, 50.0);
    let anchor = BBox::new(16.0, 16.0, 48.0, 48.0);
    let d = encode(&gt, &anchor)?;
    let back = decode(&anchor, &d)?;
    println!("delta {:?}", d.to_array());
    println!("decoded {back:?}, IoU with gt {:.6}", iou(&back, &gt));

    let boxes = vec![
        BBox::new(10.0, 10.0, 40.0, 40.0),
        BBox::new(12.0, 12.0, 42.0, 42.0),
        BBox::new(60.0, 60.0, 80.0, 80.0),
    ];
    let keep = nms(&boxes, &[0.9, 0.8, 0.7], 0.5)?;
    println!("NMS at 0.5 keeps {keep:?}");
    Ok(())
}
