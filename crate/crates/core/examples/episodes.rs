//! Sampling few-shot episodes from the synthetic families, and round-tripping
//! a family through the binary dataset format.

use tsmd::episodes::{blobs_family, file_family, patterns_family, Dataset, Split};

fn main() -> tsmd::Result<()> {
    let blobs = blobs_family(16, 60, 1.0, 0.5)?.with_shape(5, 1, 3);
    let ep = blobs.episode(7, 0)?;
    println!(
        "blobs: support {:?}, query {:?}, classes {:?}",
        ep.support_x.shape(),
        ep.query_x.shape(),
        ep.classes
    );
    for split in [Split::MetaTrain, Split::MetaVal, Split::MetaTest] {
        println!("  {split:?} pool: {} classes", blobs.family.pool(split).len());
    }
    // The same (seed, index) always gives the same episode.
    assert_eq!(blobs.episode(7, 0)?.support_x, ep.support_x);

    let patterns = patterns_family(12, 30, 0.1)?.with_shape(3, 2, 2);
    let ep = patterns.episode(1, 4)?;
    println!(
        "patterns: support {:?}, labels {:?}",
        ep.support_x.shape(),
        ep.support_y
    );

    let dir = std::env::temp_dir().join("tsmd-episodes-example");
    std::fs::create_dir_all(&dir).map_err(|e| tsmd::Error::Config(e.to_string()))?;
    let path = dir.join("blobs.bin");
    Dataset::export(&blobs.family, 20, 3)?.write(&path)?;
    let loaded = file_family(&path)?.with_shape(5, 1, 3);
    let ep = loaded.clone().with_split(Split::MetaTest).episode(2, 0)?;
    println!(
        "file family from {}: {} classes, test episode classes {:?}",
        path.display(),
        loaded.family.n_classes(),
        ep.classes
    );
    Ok(())
}
