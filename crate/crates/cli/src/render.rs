//! Overlay PNGs for generated items.

use std::fs;
use std::path::Path;

use demokit_core::overlay::{blank_frame, encode_png, render_overlay};
use demokit_core::vqa::VqaItem;

use crate::pipeline::PipelineError;

pub const OVERLAY_DIR: &str = "overlays";

fn file_stem(item_id: &str) -> String {
    item_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '@') { c } else { '_' })
        .collect()
}

/// Renders every image that carries an overlay spec into `out_dir/overlays`
/// and records the relative path on the image. Frames are read from
/// `frames_root/<frame_ref>` when present, otherwise a blank canvas is used.
pub fn render_item_overlays(item: &mut VqaItem, size: (u32, u32), frames_root: &Path, out_dir: &Path) -> Result<(), PipelineError> {
    let dir = out_dir.join(OVERLAY_DIR);
    let stem = file_stem(&item.item_id);
    for (i, img) in item.images.iter_mut().enumerate() {
        let Some(spec) = &img.overlay else { continue };
        let source = frames_root.join(&img.frame_ref);
        let base = match image::open(&source) {
            Ok(im) => im.to_rgb8(),
            Err(_) => blank_frame(size.0, size.1),
        };
        let drawn = render_overlay(&base, spec, size).map_err(|e| PipelineError::Input(format!("{}: {e}", source.display())))?;
        let name = format!("{stem}-{i}.png");
        fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        let path = dir.join(&name);
        fs::write(&path, encode_png(&drawn)).map_err(|e| PipelineError::io(&path, e))?;
        img.rendered = Some(format!("{OVERLAY_DIR}/{name}"));
    }
    Ok(())
}
