use serde::{Deserialize, Serialize};

use super::dataset::SketchItem;
use super::raster::Raster;
use super::strokes::Point;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    FlipH,
    Rotate90,
    Rotate180,
    Rotate270,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 4] = [
        AugmentOp::FlipH,
        AugmentOp::Rotate90,
        AugmentOp::Rotate180,
        AugmentOp::Rotate270,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            AugmentOp::FlipH => "fliph",
            AugmentOp::Rotate90 => "rot90",
            AugmentOp::Rotate180 => "rot180",
            AugmentOp::Rotate270 => "rot270",
        }
    }

    /// Rotations are clockwise on screen (y points down).
    pub fn map_point(self, [x, y]: Point) -> Point {
        match self {
            AugmentOp::FlipH => [1.0 - x, y],
            AugmentOp::Rotate90 => [1.0 - y, x],
            AugmentOp::Rotate180 => [1.0 - x, 1.0 - y],
            AugmentOp::Rotate270 => [y, 1.0 - x],
        }
    }

    /// Same map on pixel indices. Rotations assume a square raster.
    pub fn map_raster(self, r: &Raster) -> Raster {
        let (w, h) = (r.width(), r.height());
        let mut out = Raster::new(w, h);
        for row in 0..h {
            for col in 0..w {
                let (c, rr) = match self {
                    AugmentOp::FlipH => (w - 1 - col, row),
                    AugmentOp::Rotate90 => (h - 1 - row, col),
                    AugmentOp::Rotate180 => (w - 1 - col, h - 1 - row),
                    AugmentOp::Rotate270 => (row, w - 1 - col),
                };
                out.set(c, rr, r.get(col, row));
            }
        }
        out
    }
}

/// Apply `op` to both the strokes and the image; identity (class, split,
/// noise flags) is kept and the id gains a suffix.
pub fn augment(item: &SketchItem, op: AugmentOp) -> SketchItem {
    SketchItem {
        id: format!("{}_{}", item.id, op.suffix()),
        class_id: item.class_id,
        shape_params: item.shape_params.clone(),
        strokes: item.strokes.map_points(|p| op.map_point(p)),
        stages: item.stages,
        image: op.map_raster(&item.image),
        noise_flags: item.noise_flags.clone(),
        split: item.split,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketchgen::dataset::{generate_dataset, GenConfig};
    use crate::sketchgen::raster::{dilate, rasterize};

    fn item() -> SketchItem {
        generate_dataset(&GenConfig {
            n_classes: 2,
            items_per_class: 1,
            seed: 4,
            noise_prob: 0.0,
            ..GenConfig::default()
        })
        .unwrap()
        .items
        .remove(0)
    }

    fn close(a: &SketchItem, b: &SketchItem) -> bool {
        a.image == b.image
            && a.strokes
                .strokes()
                .iter()
                .flatten()
                .zip(b.strokes.strokes().iter().flatten())
                .all(|(p, q)| (p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12)
    }

    #[test]
    fn flip_maps_quarter_point() {
        assert_eq!(AugmentOp::FlipH.map_point([0.25, 0.5]), [0.75, 0.5]);
    }

    #[test]
    fn flip_is_an_involution() {
        let it = item();
        let twice = augment(&augment(&it, AugmentOp::FlipH), AugmentOp::FlipH);
        assert!(close(&twice, &it));
        assert_eq!(twice.class_id, it.class_id);
        assert!(twice.id.starts_with(&it.id) && twice.id != it.id);
    }

    #[test]
    fn rotation_group_laws() {
        let it = item();
        let mut r = it.clone();
        for _ in 0..4 {
            r = augment(&r, AugmentOp::Rotate90);
        }
        assert!(close(&r, &it));
        let a = augment(&augment(&it, AugmentOp::Rotate90), AugmentOp::Rotate90);
        assert!(close(&a, &augment(&it, AugmentOp::Rotate180)));
        let b = augment(&augment(&it, AugmentOp::Rotate180), AugmentOp::Rotate90);
        assert!(close(&b, &augment(&it, AugmentOp::Rotate270)));
    }

    #[test]
    fn stroke_and_raster_maps_agree() {
        let it = item();
        for op in AugmentOp::ALL {
            let aug = augment(&it, op);
            let direct = rasterize(&aug.strokes, 64, 64);
            let mapped = dilate(&op.map_raster(&rasterize(&it.strokes, 64, 64)), 1);
            // Line rasterization breaks ties differently after a rotation, so
            // compare up to one pixel of slack.
            let diff = direct
                .pixels()
                .iter()
                .zip(mapped.pixels())
                .filter(|(a, b)| a > b)
                .count();
            assert!(diff == 0, "{op:?}: {diff} pixels differ");
        }
    }
}
