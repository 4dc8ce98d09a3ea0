use vita_core::raster::Mask;
use vita_core::scenegen::{
    bin_mix, compute_masks, generate_scenes, occlusion_bin, rasterize_shape, Geometry, OcclusionBin, SceneConfig, ShapeCatalog, Split,
    BACKGROUND,
};
use vita_core::Error;

fn small_cfg(seed: u64) -> SceneConfig {
    SceneConfig {
        n_scenes: 10,
        scene_side: 128,
        seed,
        target_mix: None,
        ..SceneConfig::default()
    }
}

#[test]
fn bins_follow_half_open_intervals() {
    assert_eq!(occlusion_bin(0.0).unwrap(), OcclusionBin::Low);
    assert_eq!(occlusion_bin(0.1999).unwrap(), OcclusionBin::Low);
    assert_eq!(occlusion_bin(0.2).unwrap(), OcclusionBin::Medium);
    assert_eq!(occlusion_bin(0.4999).unwrap(), OcclusionBin::Medium);
    assert_eq!(occlusion_bin(0.5).unwrap(), OcclusionBin::High);
    assert_eq!(occlusion_bin(1.0).unwrap(), OcclusionBin::High);
    assert!(matches!(occlusion_bin(1.01), Err(Error::Contract(_))));
    assert!(matches!(occlusion_bin(-0.01), Err(Error::Contract(_))));
}

#[test]
fn rectangle_covers_exact_area() {
    let m = rasterize_shape(&Geometry::Rectangle { width: 7, height: 4 }, (20, 20), 64).unwrap();
    assert_eq!(m.count(), 28);
    let b = m.bbox().unwrap();
    assert_eq!((b.x, b.y, b.w, b.h), (17, 18, 7, 4));
}

#[test]
fn degenerate_geometry_is_a_generation_error() {
    let cases = [
        Geometry::Circle { radius: 0.0 },
        Geometry::Rectangle { width: 0, height: 5 },
        Geometry::ConvexPolygon {
            vertices: vec![(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)],
        },
        Geometry::ConvexPolygon {
            vertices: vec![(0.0, 0.0), (1.0, 1.0)],
        },
    ];
    for g in cases {
        assert!(matches!(rasterize_shape(&g, (10, 10), 32), Err(Error::Generation(_))), "{g:?}");
    }
}

#[test]
fn two_overlapping_squares() {
    // Bottom 10x10 at origin, top 10x10 shifted by 5 in x: half of the
    // bottom square is hidden.
    let side = 32;
    let bottom = Mask::from_fn(side, side, |x, y| x < 10 && y < 10);
    let top = Mask::from_fn(side, side, |x, y| (5..15).contains(&x) && y < 10);
    let masks = compute_masks(&[bottom.clone(), top.clone()]).unwrap();
    assert_eq!(masks[0].0.count(), 50);
    assert_eq!(masks[0].1.count(), 50);
    assert_eq!(masks[1].0, top);
    assert!(masks[1].1.is_empty());
    let rate = masks[0].1.count() as f64 / bottom.count() as f64;
    assert_eq!(rate, 0.5);
    assert_eq!(occlusion_bin(rate).unwrap(), OcclusionBin::High);
}

#[test]
fn instance_invariants_hold() {
    let scenes = generate_scenes(&small_cfg(3)).unwrap();
    for s in &scenes {
        assert_eq!(s.image.width, 128);
        let mut union = Mask::empty(128, 128);
        for inst in &s.instances {
            assert!(inst.visible.is_subset_of(&inst.amodal).unwrap());
            assert!(!inst.visible.intersects(&inst.occluded).unwrap());
            assert_eq!(inst.visible.or(&inst.occluded).unwrap(), inst.amodal);
            let rate = inst.occluded.count() as f64 / inst.amodal.count() as f64;
            assert_eq!(inst.occ_rate, rate);
            assert_eq!(inst.occ_bin, occlusion_bin(rate).unwrap());
            assert_eq!(inst.excluded, inst.visible.is_empty());
            // Visible regions partition the painted pixels.
            assert!(!union.intersects(&inst.visible).unwrap());
            union = union.or(&inst.visible).unwrap();
        }
        for y in 0..128 {
            for x in 0..128 {
                assert_eq!(s.image.pixel(x, y) == BACKGROUND, !union.get(x, y));
            }
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate_scenes(&small_cfg(9)).unwrap();
    let b = generate_scenes(&small_cfg(9)).unwrap();
    assert_eq!(a, b);
    let c = generate_scenes(&small_cfg(10)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn split_pools_are_disjoint() {
    let cfg = SceneConfig {
        n_scenes: 20,
        ..small_cfg(4)
    };
    let scenes = generate_scenes(&cfg).unwrap();
    let catalog = cfg.catalog();
    let mut train = std::collections::BTreeSet::new();
    let mut val = std::collections::BTreeSet::new();
    for (i, s) in scenes.iter().enumerate() {
        for inst in &s.instances {
            assert_eq!(inst.split, cfg.split_of(i));
            assert_eq!(catalog.pool_of(inst.prototype), inst.split);
            match inst.split {
                Split::Train => train.insert(inst.prototype),
                Split::Val => val.insert(inst.prototype),
            };
        }
    }
    assert!(!val.is_empty());
    assert!(train.is_disjoint(&val));
}

#[test]
fn catalog_is_pure() {
    let c = ShapeCatalog {
        seed: 11,
        size: 64,
        train_fraction: 0.5,
    };
    for id in 0..64 {
        assert_eq!(c.prototype(id), c.prototype(id));
    }
}

#[test]
fn unreachable_mix_fails_with_generation_error() {
    let cfg = SceneConfig {
        n_scenes: 4,
        target_mix: Some([0.0, 0.0, 100.0]),
        mix_tolerance: 1.0,
        ..small_cfg(1)
    };
    assert!(matches!(generate_scenes(&cfg), Err(Error::Generation(_))));
}

#[test]
fn steered_mix_stays_near_target() {
    let cfg = SceneConfig {
        n_scenes: 50,
        seed: 5,
        ..SceneConfig::default()
    };
    let scenes = generate_scenes(&cfg).unwrap();
    let mix = bin_mix(scenes.iter().flat_map(|s| &s.instances));
    let target = cfg.target_mix.unwrap();
    for b in 0..3 {
        assert!((mix[b] - target[b]).abs() <= 10.0, "{mix:?}");
    }
}
