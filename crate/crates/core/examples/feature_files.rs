//! Feature and match file formats: binary features, text keypoints,
//! manifests, match files and the top-scale subset.

use cashash::feature_io::{
    convert_text_keys, load_features, load_matches, save_features, save_matches,
    select_top_scale, DatasetManifest, ManifestEntry, MatchRecord,
};
use cashash::synth::random_images;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("cashash-files-example");
    std::fs::create_dir_all(&dir)?;

    let fs = random_images(5, 1, 50).remove(0);
    save_features(&fs, dir.join("a.chft"))?;
    let back = load_features(dir.join("a.chft"))?;
    println!("{}: {} points, {} bytes on disk", back.image_id, back.len(), std::fs::metadata(dir.join("a.chft"))?.len());

    let top = select_top_scale(&back, 0.2)?;
    println!("top-scale subset: {} points, original indices {:?}", top.features.len(), top.original_indices);

    let mut text = String::from("1 128\n12.5 40.0 3.2 0.7\n");
    text.push_str(&vec!["9"; 128].join(" "));
    std::fs::write(dir.join("b.key"), text)?;
    println!("converted {} text keypoints", convert_text_keys(dir.join("b.key"), dir.join("b.chft"))?);

    let manifest = DatasetManifest::new(vec![
        ManifestEntry { image_id: "a".into(), path: dir.join("a.chft") },
        ManifestEntry { image_id: "b".into(), path: dir.join("b.chft") },
    ])?;
    manifest.save(dir.join("manifest.txt"))?;
    print!("{}", std::fs::read_to_string(dir.join("manifest.txt"))?);

    let matches = vec![MatchRecord::new(0, 0, 1234.0), MatchRecord::new(3, 0, 99.5)];
    save_matches(("a", "b"), &matches, dir.join("a_b.matches"))?;
    print!("{}", std::fs::read_to_string(dir.join("a_b.matches"))?);
    assert_eq!(load_matches(dir.join("a_b.matches"))?.1, matches);
    Ok(())
}
