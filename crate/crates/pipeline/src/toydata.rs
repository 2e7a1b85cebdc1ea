//! Writes the procedural toy datasets named in a config.

use std::path::Path;

use cariface_core::dataset::list_basenames;
use cariface_core::toy::{generate_toy_faces_with, toy_name, Domain, ToyOptions};
use cariface_core::Exec;

use crate::config::{DataPaths, PipelineConfig};
use crate::error::{PipelineError, Result};

pub const MAKE_TOY_DATA: &str = "make-toy-data";

/// Refuses to write into a dataset holding images this run would not produce,
/// so generated and real samples never mix.
fn check_target(root: &Path, names: &[String]) -> Result<()> {
    if !root.join("images").is_dir() {
        return Ok(());
    }
    if let Some(other) = list_basenames(root)?.into_iter().find(|n| !names.contains(n)) {
        return Err(PipelineError::config(format!(
            "{} already holds `{other}`, which is not part of the toy set; choose an empty directory",
            root.display()
        )));
    }
    Ok(())
}

fn write_split(root: &Path, opts: ToyOptions) -> Result<()> {
    let names: Vec<String> = (opts.first_index..opts.first_index + opts.n).map(toy_name).collect();
    check_target(root, &names)?;
    generate_toy_faces_with(Exec::default(), root, &opts)?;
    Ok(())
}

/// Generates photos, unlabelled caricatures and a disjoint annotated
/// caricature evaluation split. With `out`, the splits go under
/// `out/{photos,caricatures,eval}` instead of the configured paths.
pub fn make_toy_data(cfg: &PipelineConfig, out: Option<&Path>) -> Result<DataPaths> {
    let paths = match out {
        Some(root) => DataPaths {
            photos: root.join("photos"),
            caricatures: root.join("caricatures"),
            eval: root.join("eval"),
            grouping: cfg.data.grouping.clone(),
        },
        None => cfg.data.clone(),
    };
    let t = &cfg.toy;
    // Caricatures use their own seed so they are not paired with the photos.
    let cari_seed = t.seed.wrapping_add(1);
    let opts = |n, domain, seed, annotated, first_index| ToyOptions {
        n,
        domain,
        seed,
        size: t.size,
        annotated,
        first_index,
    };
    write_split(&paths.photos, opts(t.photos, Domain::Photo, t.seed, true, 0))?;
    write_split(
        &paths.caricatures,
        opts(t.caricatures, Domain::Caricature, cari_seed, false, 0),
    )?;
    write_split(
        &paths.eval,
        opts(t.eval, Domain::Caricature, cari_seed, true, t.caricatures),
    )?;
    log::info!(
        "make-toy-data: {} photos, {} caricatures, {} evaluation caricatures",
        t.photos,
        t.caricatures,
        t.eval
    );
    Ok(paths)
}
