//! Synthetic sketch/image pairs.

pub mod augment;
pub mod dataset;
pub mod glyph;
pub mod raster;
pub mod strokes;

pub use augment::{augment, AugmentOp};
pub use dataset::{
    generate_dataset, Dataset, DatasetManifest, GenConfig, ManifestItem, SketchItem, Split,
    SplitSelector, DEFAULT_DILATION, DEFAULT_STAGES,
};
pub use glyph::{GlyphFamily, GlyphInstance, Primitive};
pub use raster::{
    dilate, draw_line, rasterize, render_sketch, ImageFileFormat, Raster, DEFAULT_SIZE,
};
pub use strokes::{
    inject_noise_strokes, partial_stages, stroke_stages, validate_polyline, NoisyStrokes, Point,
    Polyline, StrokeSequence,
};
