//! Load a detections file, cut the crops and count what crop-only
//! transmission saves.
//!
//! ```text
//! cargo run --example detections -- [detections.json] [image_dir]
//! ```

use std::path::PathBuf;

use semcom::detection::{byte_accounting, extract_crops, load_detections, load_image, resolve_image_path};

fn main() -> semcom::Result<()> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let mut args = std::env::args().skip(1);
    let detections = args.next().map(PathBuf::from).unwrap_or_else(|| fixtures.join("orchard30.json"));
    let images = args.next().map(PathBuf::from).unwrap_or(fixtures);

    for set in load_detections(&detections, 0.25)? {
        let Some(path) = resolve_image_path(&images, &set.image_id) else {
            eprintln!("{}: no image in {}", set.image_id, images.display());
            continue;
        };
        let image = load_image(&path)?;
        let crops = extract_crops(&image, &set)?;
        let rep = byte_accounting(&[(set.image_id.as_str(), &image)], &[crops])?;
        let confs = set.confidences();
        println!(
            "{}: {} objects, confidence {:.2}..{:.2}",
            set.image_id,
            set.len(),
            confs.iter().copied().fold(f64::INFINITY, f64::min),
            confs.iter().copied().fold(0.0, f64::max)
        );
        println!(
            "  PNG {} -> {} bytes ({:.1}% less), raw {} -> {} bytes ({:.1}% less)",
            rep.original_bytes,
            rep.semantic_bytes,
            100.0 * rep.reduction_ratio,
            rep.original_raw_bytes,
            rep.semantic_raw_bytes,
            100.0 * rep.raw_reduction_ratio
        );
    }
    Ok(())
}
