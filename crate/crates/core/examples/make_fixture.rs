//! Render the synthetic orchard scene and write it as a detections fixture.
//!
//! ```text
//! cargo run --example make_fixture -- [out_dir]
//! ```
//!
//! Writes `orchard30.png`, `orchard30.json` (all 30 apples) and
//! `orchard10.json` (ten apples spread over the confidence range, same image).

use std::path::PathBuf;

use semcom::detection::{detections_to_json, DetectionSet};
use semcom::scene::{render_orchard, OrchardSpec};

fn main() -> semcom::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures"));
    std::fs::create_dir_all(&out).map_err(|e| semcom::Error::io(&out, e))?;

    let (image, set) = render_orchard(&OrchardSpec::default(), "orchard30");
    let png = out.join("orchard30.png");
    image.save(&png).map_err(|source| semcom::Error::Image {
        name: png.display().to_string(),
        source,
    })?;

    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.detections[a].confidence.total_cmp(&set.detections[b].confidence));
    let mut picked: Vec<usize> = (0..10).map(|k| order[k * (set.len() - 1) / 9]).collect();
    picked.sort_unstable();
    let small = DetectionSet {
        detections: picked.iter().map(|&i| set.detections[i].clone()).collect(),
        ..set.clone()
    };

    for (name, s) in [("orchard30.json", &set), ("orchard10.json", &small)] {
        let path = out.join(name);
        let text = detections_to_json(std::slice::from_ref(s))?;
        std::fs::write(&path, text + "\n").map_err(|e| semcom::Error::io(&path, e))?;
        println!("{} ({} detections)", path.display(), s.len());
    }
    println!("{}", png.display());
    Ok(())
}
